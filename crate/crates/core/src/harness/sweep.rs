//! One-parameter sweeps: retrain with identical seeds for each value and
//! tabulate held-out metrics.

use std::str::FromStr;

use crate::encoders::NewsItem;
use crate::error::{Result, SeerError};
use crate::harness::data::split_dataset;
use crate::harness::metrics::evaluate;
use crate::harness::train::train;
use crate::harness::{HyperParams, MetricsReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Lambda,
    KExperts,
}

impl SweepParam {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Lambda => "lambda",
            Self::KExperts => "k_experts",
        }
    }
}

impl FromStr for SweepParam {
    type Err = SeerError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(Self::Lambda),
            "k_experts" => Ok(Self::KExperts),
            other => Err(SeerError::Config(format!(
                "unknown sweep parameter {other:?}; expected lambda or k_experts"
            ))),
        }
    }
}

fn apply_value(base: &HyperParams, param: SweepParam, value: f64) -> Result<HyperParams> {
    let mut hp = base.clone();
    match param {
        SweepParam::Lambda => hp.lambda = value,
        SweepParam::KExperts => {
            if value < 1.0 || value.fract() != 0.0 {
                return Err(SeerError::Config(format!(
                    "k_experts sweep values must be positive integers, got {value}"
                )));
            }
            hp.k_experts = value as usize;
        }
    }
    hp.validate()?;
    Ok(hp)
}

/// Train one model per value (identical seeds and split otherwise) and
/// report test-split metrics.
pub fn sweep(
    param: SweepParam,
    values: &[f64],
    base: &HyperParams,
    dataset: &[NewsItem],
) -> Result<Vec<(f64, MetricsReport)>> {
    if values.is_empty() {
        return Err(SeerError::Config("sweep needs at least one value".into()));
    }
    let (train_items, _, test_items) = split_dataset(dataset, base);
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let hp = apply_value(base, param, value)?;
        let outcome = train(&train_items, &hp)?;
        let metrics = evaluate(&outcome.model, &test_items)?;
        rows.push((value, metrics));
    }
    Ok(rows)
}

/// CSV table with the swept parameter echoed in the first column.
pub fn sweep_to_csv(param: SweepParam, rows: &[(f64, MetricsReport)]) -> String {
    let mut out = format!("{},{}\n", param.name(), MetricsReport::CSV_HEADER);
    for (value, m) in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            value,
            m.accuracy,
            m.fake_precision,
            m.fake_recall,
            m.fake_f1,
            m.real_precision,
            m.real_recall,
            m.real_f1
        ));
    }
    out
}
