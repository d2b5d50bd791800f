//! Training and evaluation driver: inductive, transductive (self-training)
//! and fully supervised protocols, the ablation grid, and the trusty-weight
//! sweep.

pub mod config;
pub mod image;
pub mod optim;

pub use config::{Protocol, RunConfig};
pub use image::{class_color, export_label_image};
pub use optim::Adam;

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use crate::embeddings::{
    generate_toy_dataset, mask_unseen_annotations, ClassVocabulary, LabelMap, ToyConfig, ToySample,
};
use crate::error::{Error, Result};
use crate::head::{self, save_head_params, HeadConfig, HeadParams, SegOutputs};
use crate::inference::{decode_labels, fuse_with_trusty};
use crate::losses::{total_loss, LossConfig, LossReport};
use crate::metrics::{report, ConfusionMatrix, EvalReport};

/// Evaluation plus the full training trace of one run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub report: EvalReport,
    pub trace: Vec<LossReport>,
    pub wall: Duration,
}

pub fn toy_config(cfg: &RunConfig) -> ToyConfig {
    ToyConfig {
        seed: cfg.seed,
        class_count: cfg.class_count,
        unseen_count: cfg.unseen_count,
        dim: cfg.dim,
        grid: cfg.grid(),
        samples: cfg.samples,
        noise: cfg.noise,
    }
}

/// Number of plain warm-up steps before self-training kicks in.
pub fn warmup_steps(cfg: &RunConfig) -> usize {
    (cfg.steps as f64 * cfg.warmup_fraction).round() as usize
}

fn loss_config(cfg: &RunConfig, include_unseen: bool) -> LossConfig {
    LossConfig {
        weights: cfg.loss_weights(),
        focal: cfg.focal_params(),
        include_unseen_channels: include_unseen,
        include_trusty_presence: true,
    }
}

/// Fills masked pixels whose best unseen-channel score clears the
/// threshold; everything else stays as it was.
fn merge_pseudo_labels(
    outputs: &SegOutputs,
    labels: &LabelMap,
    vocab: &ClassVocabulary,
    threshold: f64,
) -> (LabelMap, bool) {
    let n = labels.len();
    let values = outputs.raw_maps.values();
    let unseen = vocab.unseen_ids();
    let mut merged = labels.data.clone();
    let mut any = false;
    for p in 0..n {
        if merged[p] != vocab.masked_label() {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for &c in &unseen {
            let score = values[c * n + p];
            if best.map_or(true, |(_, s)| score > s) {
                best = Some((c, score));
            }
        }
        if let Some((class, score)) = best {
            if score > threshold {
                merged[p] = class;
                any = true;
            }
        }
    }
    (
        LabelMap {
            height: labels.height,
            width: labels.width,
            data: merged,
        },
        any,
    )
}

enum Phase {
    Plain { include_unseen: bool },
    SelfTrain,
}

fn run_steps(
    cfg: &RunConfig,
    vocab: &ClassVocabulary,
    view: &[ToySample],
    mut params: HeadParams,
    adam: &mut Adam,
    trace: &mut Vec<LossReport>,
    steps: std::ops::Range<usize>,
    phase: Phase,
) -> Result<HeadParams> {
    let head_cfg = cfg.head_config();
    for step in steps {
        let sample = &view[step % view.len()];
        let outputs = head::forward(&params, &sample.bundle, &head_cfg)?;
        let (labels, include_unseen) = match &phase {
            Phase::Plain { include_unseen } => (sample.labels.clone(), *include_unseen),
            Phase::SelfTrain => {
                merge_pseudo_labels(&outputs, &sample.labels, vocab, cfg.self_train_threshold)
            }
        };
        let (total, step_report) =
            total_loss(&outputs, &labels, vocab, &loss_config(cfg, include_unseen))?;
        if !step_report.total.is_finite() {
            return Err(Error::Diverged {
                step,
                value: step_report.total,
            });
        }
        total.backward()?;
        params = adam.step(&params)?;
        trace.push(step_report);
    }
    Ok(params)
}

/// Decodes one sample under the run's fusion setting.
pub fn predict_labels(
    params: &HeadParams,
    head_cfg: &HeadConfig,
    weighted: bool,
    vocab: &ClassVocabulary,
    sample: &ToySample,
) -> Result<LabelMap> {
    let outputs = head::forward(params, &sample.bundle, head_cfg)?;
    let scores = if weighted {
        let trusty = outputs.trusty_map.as_ref().ok_or_else(|| {
            Error::Config("weighted decoding needs the trusty token".into())
        })?;
        fuse_with_trusty(&outputs.raw_maps, trusty, vocab)?
    } else {
        outputs.raw_maps.clone()
    };
    decode_labels(&scores)
}

/// Evaluates on raw (unmasked) labels.
pub fn evaluate(
    params: &HeadParams,
    head_cfg: &HeadConfig,
    weighted: bool,
    vocab: &ClassVocabulary,
    data: &[ToySample],
) -> Result<EvalReport> {
    let mut cm = ConfusionMatrix::new(vocab.class_count());
    for sample in data {
        let predicted = predict_labels(params, head_cfg, weighted, vocab, sample)?;
        cm.accumulate(&predicted, &sample.labels)?;
    }
    report(&cm, vocab)
}

/// Trains under the configured protocol and evaluates on the raw data.
///
/// The run is a pure function of (config, data): parameters are seeded from
/// the config, the sample order is fixed, and all arithmetic is sequential
/// double precision.
pub fn train(
    cfg: &RunConfig,
    vocab: &ClassVocabulary,
    data: &[ToySample],
) -> Result<(HeadParams, RunResult)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Dataset("training needs at least one sample".into()));
    }
    if data[0].bundle.dim() != cfg.dim {
        return Err(Error::Config(format!(
            "config dim {} does not match data dim {}",
            cfg.dim,
            data[0].bundle.dim()
        )));
    }
    let start = Instant::now();
    // Parameter init draws from its own stream so data and head never share
    // random state.
    let params = HeadParams::init(cfg.seed.wrapping_add(0x9e37), cfg.dim, cfg.n_heads)?;
    let mut adam = Adam::new(cfg.learning_rate);
    let mut trace = Vec::with_capacity(cfg.steps);

    let masked: Vec<ToySample>;
    let view: &[ToySample] = match cfg.protocol {
        Protocol::Supervised => data,
        Protocol::Inductive | Protocol::Transductive => {
            masked = data
                .iter()
                .map(|s| mask_unseen_annotations(s, vocab))
                .collect();
            &masked
        }
    };

    let params = match cfg.protocol {
        Protocol::Inductive => run_steps(
            cfg,
            vocab,
            view,
            params,
            &mut adam,
            &mut trace,
            0..cfg.steps,
            Phase::Plain {
                include_unseen: false,
            },
        )?,
        Protocol::Supervised => run_steps(
            cfg,
            vocab,
            view,
            params,
            &mut adam,
            &mut trace,
            0..cfg.steps,
            Phase::Plain {
                include_unseen: true,
            },
        )?,
        Protocol::Transductive => {
            let warmup = warmup_steps(cfg);
            let after_warmup = run_steps(
                cfg,
                vocab,
                view,
                params,
                &mut adam,
                &mut trace,
                0..warmup,
                Phase::Plain {
                    include_unseen: false,
                },
            )?;
            run_steps(
                cfg,
                vocab,
                view,
                after_warmup,
                &mut adam,
                &mut trace,
                warmup..cfg.steps,
                Phase::SelfTrain,
            )?
        }
    };

    let head_cfg = cfg.head_config();
    let weighted = cfg.weighted_map && cfg.trusty_token;
    let eval = evaluate(&params, &head_cfg, weighted, vocab, data)?;
    Ok((
        params,
        RunResult {
            report: eval,
            trace,
            wall: start.elapsed(),
        },
    ))
}

/// Continues training from warmed-up parameters with pseudo labels merged
/// into the masked ground truth at every visit.
///
/// Pixels whose best unseen-channel score stays at or below the threshold
/// remain masked. Runs the post-warmup share of `cfg.steps`.
pub fn self_train(
    cfg: &RunConfig,
    vocab: &ClassVocabulary,
    masked_data: &[ToySample],
    params: HeadParams,
) -> Result<(HeadParams, Vec<LossReport>)> {
    cfg.validate()?;
    let mut adam = Adam::new(cfg.learning_rate);
    let mut trace = Vec::new();
    let warmup = warmup_steps(cfg);
    let params = run_steps(
        cfg,
        vocab,
        masked_data,
        params,
        &mut adam,
        &mut trace,
        warmup..cfg.steps,
        Phase::SelfTrain,
    )?;
    Ok((params, trace))
}

/// One ablation row: a human-readable tag plus its config and result.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub tag: String,
    pub config: RunConfig,
    pub result: RunResult,
}

fn row_config(
    base: &RunConfig,
    token: bool,
    learner: bool,
    weighted: bool,
    qkv: Option<[head::LearnerInput; 3]>,
) -> RunConfig {
    let mut cfg = base.clone();
    cfg.trusty_token = token;
    cfg.trusty_learner = learner;
    cfg.weighted_map = weighted;
    if let Some([q, k, v]) = qkv {
        cfg.learner_q = q;
        cfg.learner_k = k;
        cfg.learner_v = v;
    }
    cfg
}

/// Runs the ablation rows in order: (a) baseline, (b) trusty token alone,
/// any extra attention-input variants, (c) token plus learner on the
/// descriptor, (d) the full head with the weighted map.
pub fn run_ablation_grid(
    base: &RunConfig,
    vocab: &ClassVocabulary,
    data: &[ToySample],
    variants: &[[head::LearnerInput; 3]],
) -> Result<Vec<AblationRow>> {
    let desc = head::LearnerInput::Descriptor;
    let mut rows: Vec<(String, RunConfig)> = vec![
        (
            "(a) baseline".into(),
            row_config(base, false, false, false, None),
        ),
        (
            "(b) trusty token".into(),
            row_config(base, true, false, false, None),
        ),
    ];
    for v in variants {
        rows.push((
            format!("(c) {}/{}/{}", v[0], v[1], v[2]),
            row_config(base, true, true, false, Some(*v)),
        ));
    }
    rows.push((
        "(c) descriptor/descriptor/descriptor".into(),
        row_config(base, true, true, false, Some([desc, desc, desc])),
    ));
    rows.push((
        "(d) full, weighted map".into(),
        row_config(base, true, true, true, Some([desc, desc, desc])),
    ));
    rows.into_iter()
        .map(|(tag, cfg)| {
            let (_, result) = train(&cfg, vocab, data)?;
            Ok(AblationRow {
                tag,
                config: cfg,
                result,
            })
        })
        .collect()
}

/// Trains once per trusty-loss weight and reports the metric splits.
pub fn sweep_gamma(
    base: &RunConfig,
    vocab: &ClassVocabulary,
    data: &[ToySample],
    gammas: &[f64],
) -> Result<Vec<(f64, RunResult)>> {
    gammas
        .iter()
        .map(|&gamma| {
            let mut cfg = base.clone();
            cfg.gamma = gamma;
            let (_, result) = train(&cfg, vocab, data)?;
            Ok((gamma, result))
        })
        .collect()
}

/// Convenience: generate the toy data for a config and train on it.
pub fn train_on_toy(cfg: &RunConfig) -> Result<(HeadParams, RunResult)> {
    let (vocab, data) = generate_toy_dataset(&toy_config(cfg))?;
    train(cfg, &vocab, &data)
}

/// Writes config snapshot, reports, loss trace, and parameters under `dir`.
pub fn write_run_outputs(
    dir: &Path,
    cfg: &RunConfig,
    result: &RunResult,
    params: Option<&HeadParams>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.txt"), cfg.serialize())?;
    fs::write(
        dir.join("report.txt"),
        format!(
            "{}\n\nwall_seconds = {:.3}\n",
            result.report,
            result.wall.as_secs_f64()
        ),
    )?;
    fs::write(dir.join("report.kv"), result.report.to_key_values())?;
    let mut csv = String::from("step,cls,focal,dice,trusty,total\n");
    for (i, r) in result.trace.iter().enumerate() {
        csv.push_str(&format!(
            "{i},{},{},{},{},{}\n",
            r.cls, r.focal, r.dice, r.trusty, r.total
        ));
    }
    fs::write(dir.join("trace.csv"), csv)?;
    if let Some(p) = params {
        save_head_params(&dir.join("params"), p)?;
    }
    Ok(())
}
