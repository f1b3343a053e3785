//! Evaluation: thresholded predictions, the confusion matrix with the fake
//! class as positive, per-class metrics, and feature dumps.

use crate::encoders::{EmbeddingBundle, NewsItem, StubEncoder};
use crate::error::{Result, SeerError};
use crate::harness::MetricsReport;
use crate::model::SeerModel;

/// Confusion counts keyed by `(predicted, truth)`; fake is the positive
/// class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    /// predicted fake, truth fake
    pub ff: usize,
    /// predicted fake, truth real
    pub fr: usize,
    /// predicted real, truth fake
    pub rf: usize,
    /// predicted real, truth real
    pub rr: usize,
}

impl Confusion {
    pub fn from_pairs(pairs: &[(u8, u8)]) -> Self {
        let mut c = Confusion::default();
        for (pred, truth) in pairs {
            match (pred, truth) {
                (0, 0) => c.ff += 1,
                (0, 1) => c.fr += 1,
                (1, 0) => c.rf += 1,
                (1, 1) => c.rr += 1,
                _ => unreachable!("labels are validated to {{0, 1}}"),
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.ff + self.fr + self.rf + self.rr
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

pub fn metrics_from_confusion(c: &Confusion) -> MetricsReport {
    let fake_precision = ratio(c.ff, c.ff + c.fr);
    let fake_recall = ratio(c.ff, c.ff + c.rf);
    let real_precision = ratio(c.rr, c.rr + c.rf);
    let real_recall = ratio(c.rr, c.rr + c.fr);
    MetricsReport {
        accuracy: ratio(c.ff + c.rr, c.total()),
        fake_precision,
        fake_recall,
        fake_f1: f1(fake_precision, fake_recall),
        real_precision,
        real_recall,
        real_f1: f1(real_precision, real_recall),
    }
}

/// Threshold P(real) at 0.5 (ties go to real).
pub fn threshold(p_real: f64) -> u8 {
    u8::from(p_real >= 0.5)
}

/// Metrics over `(predicted, truth)` label pairs, recounted a second way
/// as a self-check.
pub fn metrics_from_pairs(pairs: &[(u8, u8)]) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(SeerError::Contract(
            "evaluation over an empty dataset".to_string(),
        ));
    }
    let confusion = Confusion::from_pairs(pairs);
    // independent recount straight from the definition
    let brute = Confusion {
        ff: pairs.iter().filter(|(p, t)| *p == 0 && *t == 0).count(),
        fr: pairs.iter().filter(|(p, t)| *p == 0 && *t == 1).count(),
        rf: pairs.iter().filter(|(p, t)| *p == 1 && *t == 0).count(),
        rr: pairs.iter().filter(|(p, t)| *p == 1 && *t == 1).count(),
    };
    assert_eq!(confusion, brute, "confusion-matrix recount diverged");
    Ok(metrics_from_confusion(&confusion))
}

/// Evaluate a model on already-encoded samples.
pub fn evaluate_encoded(
    model: &SeerModel,
    samples: &[(EmbeddingBundle, u8)],
) -> Result<MetricsReport> {
    let pairs = samples
        .iter()
        .map(|(bundle, label)| Ok((threshold(model.predict(bundle)?), *label)))
        .collect::<Result<Vec<_>>>()?;
    metrics_from_pairs(&pairs)
}

/// Evaluate a model on raw items via the stub encoder.
pub fn evaluate(model: &SeerModel, items: &[NewsItem]) -> Result<MetricsReport> {
    if items.is_empty() {
        return Err(SeerError::Contract(
            "evaluation over an empty dataset".to_string(),
        ));
    }
    let encoder = StubEncoder::new(&model.hp)?;
    let samples = items
        .iter()
        .map(|i| Ok((encoder.encode(i)?, i.label)))
        .collect::<Result<Vec<_>>>()?;
    evaluate_encoded(model, &samples)
}

/// Long-format CSV of the joint, emotion and fused features per sample,
/// for external projection/visualization tooling.
pub fn dump_features(
    model: &SeerModel,
    items: &[NewsItem],
    bundles: &[EmbeddingBundle],
) -> Result<String> {
    if items.len() != bundles.len() {
        return Err(SeerError::Shape {
            op: "dump_features",
            detail: format!("{} items vs {} bundles", items.len(), bundles.len()),
        });
    }
    let mut out = String::from("id,label,feature,index,value\n");
    for (item, bundle) in items.iter().zip(bundles.iter()) {
        let (fusion, verdict, joint) = model.features(bundle)?;
        let mut push = |feature: &str, values: &[f64]| {
            for (index, value) in values.iter().enumerate() {
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    item.id, item.label, feature, index, value
                ));
            }
        };
        push("joint", &joint);
        push("emotion", &verdict.feature.row(0).to_vec());
        push("fused", &fusion.fused.row(0).to_vec());
    }
    Ok(out)
}
