use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use trustyseg::embeddings::{generate_toy_dataset, load_dataset, save_dataset};
use trustyseg::error::Result;
use trustyseg::harness::{
    evaluate, export_label_image, predict_labels, run_ablation_grid, sweep_gamma, toy_config,
    train, write_run_outputs, RunConfig,
};
use trustyseg::head::{load_head_params, LearnerInput};

/// Open-vocabulary segmentation head with a trusty token.
#[derive(Parser)]
#[command(name = "trustyseg", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Plain-text `key = value` config file; defaults apply when absent.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override single keys, e.g. `--set seed=9 --set gamma=0`.
    #[arg(short, long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn build(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::parse(&std::fs::read_to_string(path)?)?,
            None => RunConfig::default(),
        };
        for kv in &self.set {
            let Some((key, value)) = kv.split_once('=') else {
                return Err(trustyseg::Error::Config(format!(
                    "override `{kv}` is not KEY=VALUE"
                )));
            };
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset as a directory of TGT1 tensor files.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output dataset directory.
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Train under the configured protocol and evaluate.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset directory; generated from the config when absent.
        #[arg(short, long)]
        data: Option<PathBuf>,
        /// Run directory for config snapshot, reports, trace and params.
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Evaluate saved parameters on a dataset.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Parameter directory written by a training run.
        #[arg(short, long)]
        params: PathBuf,
        /// Dataset directory; generated from the config when absent.
        #[arg(short, long)]
        data: Option<PathBuf>,
        /// Optional directory for the report files.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Run the ablation grid: baseline, token-only, attention variants,
    /// token+learner, and the full weighted head.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(short, long)]
        data: Option<PathBuf>,
        /// Extra attention-input rows as q/k/v triples,
        /// e.g. `--variants text/image/image,product/text/text`.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
        /// Optional directory for the grid table.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Train once per trusty-loss weight and tabulate the metric splits.
    SweepGamma {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(short, long)]
        data: Option<PathBuf>,
        /// Comma-separated weights, e.g. `--gammas 0,1,10,100`.
        #[arg(short, long, value_delimiter = ',', default_value = "0,1,10,100")]
        gammas: Vec<f64>,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Export a label map (prediction or ground truth) as a P6 pixmap.
    Export {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset directory; generated from the config when absent.
        #[arg(short, long)]
        data: Option<PathBuf>,
        /// Sample index within the dataset.
        #[arg(long, default_value_t = 0)]
        sample: usize,
        /// Parameter directory; exports the prediction when given, the
        /// ground truth otherwise.
        #[arg(short, long)]
        params: Option<PathBuf>,
        /// Output image path.
        #[arg(short, long)]
        out: PathBuf,
    },
}

fn load_or_generate(
    cfg: &RunConfig,
    data: &Option<PathBuf>,
) -> Result<(
    trustyseg::embeddings::ClassVocabulary,
    Vec<trustyseg::embeddings::ToySample>,
)> {
    match data {
        Some(dir) => load_dataset(dir),
        None => generate_toy_dataset(&toy_config(cfg)),
    }
}

fn parse_variant(spec: &str) -> Result<[LearnerInput; 3]> {
    let parts: Vec<&str> = spec.split('/').collect();
    if parts.len() != 3 {
        return Err(trustyseg::Error::Config(format!(
            "variant `{spec}` must be q/k/v"
        )));
    }
    Ok([parts[0].parse()?, parts[1].parse()?, parts[2].parse()?])
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = config.build()?;
            let (vocab, samples) = generate_toy_dataset(&toy_config(&cfg))?;
            save_dataset(&out, &vocab, &samples)?;
            println!(
                "wrote {} samples, {} classes ({} unseen) to {}",
                samples.len(),
                vocab.class_count(),
                vocab.unseen_ids().len(),
                out.display()
            );
        }
        Command::Train { config, data, out } => {
            let cfg = config.build()?;
            let (vocab, samples) = load_or_generate(&cfg, &data)?;
            let (params, result) = train(&cfg, &vocab, &samples)?;
            write_run_outputs(&out, &cfg, &result, Some(&params))?;
            println!("{}", result.report);
            println!(
                "\nself_train_threshold = {}\nrun written to {}",
                cfg.self_train_threshold,
                out.display()
            );
        }
        Command::Eval {
            config,
            params,
            data,
            out,
        } => {
            let cfg = config.build()?;
            let (vocab, samples) = load_or_generate(&cfg, &data)?;
            let head_params = load_head_params(&params)?;
            let weighted = cfg.weighted_map && cfg.trusty_token;
            let report = evaluate(&head_params, &cfg.head_config(), weighted, &vocab, &samples)?;
            println!("{report}");
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join("report.txt"), format!("{report}\n"))?;
                std::fs::write(dir.join("report.kv"), report.to_key_values())?;
            }
        }
        Command::Ablate {
            config,
            data,
            variants,
            out,
        } => {
            let cfg = config.build()?;
            let (vocab, samples) = load_or_generate(&cfg, &data)?;
            let triples = variants
                .iter()
                .map(|v| parse_variant(v))
                .collect::<Result<Vec<_>>>()?;
            let rows = run_ablation_grid(&cfg, &vocab, &samples, &triples)?;
            let mut table = format!(
                "{:<40} {:>8} {:>8} {:>8} {:>8}\n",
                "row", "pAcc", "mIoU(S)", "mIoU(U)", "hIoU"
            );
            for row in &rows {
                table.push_str(&format!(
                    "{:<40} {:>8.2} {:>8.2} {:>8.2} {:>8.2}\n",
                    row.tag,
                    row.result.report.pixel_acc * 100.0,
                    row.result.report.miou_seen * 100.0,
                    row.result.report.miou_unseen * 100.0,
                    row.result.report.hiou * 100.0
                ));
            }
            print!("{table}");
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join("ablation.txt"), table)?;
            }
        }
        Command::SweepGamma {
            config,
            data,
            gammas,
            out,
        } => {
            let cfg = config.build()?;
            let (vocab, samples) = load_or_generate(&cfg, &data)?;
            let rows = sweep_gamma(&cfg, &vocab, &samples, &gammas)?;
            let mut table = format!(
                "{:>8} {:>8} {:>8} {:>8} {:>8}\n",
                "gamma", "pAcc", "mIoU(S)", "mIoU(U)", "hIoU"
            );
            for (gamma, result) in &rows {
                table.push_str(&format!(
                    "{:>8} {:>8.2} {:>8.2} {:>8.2} {:>8.2}\n",
                    gamma,
                    result.report.pixel_acc * 100.0,
                    result.report.miou_seen * 100.0,
                    result.report.miou_unseen * 100.0,
                    result.report.hiou * 100.0
                ));
            }
            print!("{table}");
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join("gamma_sweep.txt"), table)?;
            }
        }
        Command::Export {
            config,
            data,
            sample,
            params,
            out,
        } => {
            let cfg = config.build()?;
            let (vocab, samples) = load_or_generate(&cfg, &data)?;
            let picked = samples.get(sample).ok_or_else(|| {
                trustyseg::Error::Dataset(format!(
                    "sample {sample} out of range ({} available)",
                    samples.len()
                ))
            })?;
            let labels = match params {
                Some(dir) => {
                    let head_params = load_head_params(&dir)?;
                    let weighted = cfg.weighted_map && cfg.trusty_token;
                    predict_labels(&head_params, &cfg.head_config(), weighted, &vocab, picked)?
                }
                None => picked.labels.clone(),
            };
            export_label_image(&labels, &out)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}
