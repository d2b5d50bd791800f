//! Trusty-weighted fusion of the raw class maps and label decoding.

use crate::embeddings::{ClassVocabulary, LabelMap};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Fused per-class scores and the decoded label map.
#[derive(Debug, Clone)]
pub struct FusedPrediction {
    pub scores: Tensor,
    pub labels: LabelMap,
}

/// Weighs each raw channel by the trusty map: seen channels by the
/// seen-confidence `m_a`, unseen channels by its complement `1 - m_a`.
///
/// No per-pixel renormalization is applied; the map is used as a soft
/// weight exactly as produced.
pub fn fuse_with_trusty(
    raw_maps: &Tensor,
    trusty_map: &Tensor,
    vocab: &ClassVocabulary,
) -> Result<Tensor> {
    let [classes, h, w] = *raw_maps.shape() else {
        return Err(Error::InvalidShape {
            op: "fuse_with_trusty",
            shape: raw_maps.shape().to_vec(),
            reason: "expected [classes, height, width]".into(),
        });
    };
    if trusty_map.shape() != [h, w] {
        return Err(Error::ShapeMismatch {
            op: "fuse_with_trusty",
            left: raw_maps.shape().to_vec(),
            right: trusty_map.shape().to_vec(),
        });
    }
    if classes != vocab.class_count() {
        return Err(Error::InvalidShape {
            op: "fuse_with_trusty",
            shape: raw_maps.shape().to_vec(),
            reason: format!("expected {} class channels", vocab.class_count()),
        });
    }
    let n = h * w;
    let mut out = vec![0.0; classes * n];
    for c in 0..classes {
        let seen = vocab.is_seen(c);
        for p in 0..n {
            let weight = if seen {
                trusty_map.values()[p]
            } else {
                1.0 - trusty_map.values()[p]
            };
            out[c * n + p] = weight * raw_maps.values()[c * n + p];
        }
    }
    Tensor::from_vec(vec![classes, h, w], out)
}

/// Per-pixel argmax over channels; ties go to the lowest class id.
pub fn decode_labels(scores: &Tensor) -> Result<LabelMap> {
    let [classes, h, w] = *scores.shape() else {
        return Err(Error::InvalidShape {
            op: "decode_labels",
            shape: scores.shape().to_vec(),
            reason: "expected [classes, height, width]".into(),
        });
    };
    if classes == 0 {
        return Err(Error::InvalidShape {
            op: "decode_labels",
            shape: scores.shape().to_vec(),
            reason: "need at least one channel".into(),
        });
    }
    let n = h * w;
    let mut labels = vec![0usize; n];
    for p in 0..n {
        let mut best = (0usize, scores.values()[p]);
        for c in 1..classes {
            let v = scores.values()[c * n + p];
            if v > best.1 {
                best = (c, v);
            }
        }
        labels[p] = best.0;
    }
    LabelMap::new(h, w, labels)
}

/// Fusion followed by decoding.
pub fn predict(
    raw_maps: &Tensor,
    trusty_map: &Tensor,
    vocab: &ClassVocabulary,
) -> Result<FusedPrediction> {
    let scores = fuse_with_trusty(raw_maps, trusty_map, vocab)?;
    let labels = decode_labels(&scores)?;
    Ok(FusedPrediction { scores, labels })
}
