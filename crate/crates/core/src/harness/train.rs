//! Mini-batch training with the adaptive-moment optimizer.
//!
//! Per-sample forward/backward passes inside a batch run in parallel;
//! gradients are reduced in batch order afterwards, so the result is
//! bit-identical regardless of thread scheduling.

use rayon::prelude::*;

use crate::encoders::{EmbeddingBundle, NewsItem};
use crate::error::{Result, SeerError};
use crate::harness::data::encode_dataset;
use crate::harness::HyperParams;
use crate::model::SeerModel;
use crate::numerics::rng::Stream;
use crate::numerics::tape::Tape;
use crate::params::{Adam, Gradients};

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: SeerModel,
    /// Summed per-sample loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Train a fresh model on `dataset` under `hp`.
pub fn train(dataset: &[NewsItem], hp: &HyperParams) -> Result<TrainOutcome> {
    let bundles = encode_dataset(dataset, hp, None)?;
    let samples: Vec<(EmbeddingBundle, u8)> = bundles
        .into_iter()
        .zip(dataset.iter().map(|i| i.label))
        .collect();
    let model = SeerModel::init(hp)?;
    train_encoded(model, &samples, hp)
}

fn sample_loss_and_grads(
    model: &SeerModel,
    bundle: &EmbeddingBundle,
    label: u8,
) -> Result<(f64, Gradients)> {
    let mut tape = Tape::new();
    let (vars, reg) = model.bind(&mut tape);
    let trace = model.forward_sample(&mut tape, &vars, bundle)?;
    let loss = model.loss_sample(&mut tape, &trace, label);
    let value = tape.scalar(loss);
    tape.backward(loss);
    Ok((value, Gradients::from_tape(&mut tape, &reg)))
}

/// Train an existing model on pre-encoded samples.
pub fn train_encoded(
    mut model: SeerModel,
    samples: &[(EmbeddingBundle, u8)],
    hp: &HyperParams,
) -> Result<TrainOutcome> {
    hp.validate()?;
    if samples.is_empty() {
        return Err(SeerError::Contract("training set is empty".to_string()));
    }
    let mut optimizer = Adam::new(hp.lr);
    let mut epoch_losses = Vec::with_capacity(hp.epochs);
    for epoch in 0..hp.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        Stream::with_tag(hp.seed, &format!("shuffle.epoch{epoch}")).shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for (batch_idx, chunk) in order.chunks(hp.batch_size).enumerate() {
            let results: Vec<Result<(f64, Gradients)>> = chunk
                .par_iter()
                .map(|&i| {
                    let (bundle, label) = &samples[i];
                    sample_loss_and_grads(&model, bundle, *label)
                })
                .collect();
            let mut batch_grads: Option<Gradients> = None;
            for result in results {
                let (value, grads) = result?;
                if !value.is_finite() {
                    return Err(SeerError::NonFinite(format!(
                        "training loss at epoch {epoch}, batch {batch_idx}"
                    )));
                }
                epoch_loss += value;
                match &mut batch_grads {
                    None => batch_grads = Some(grads),
                    Some(acc) => acc.accumulate(&grads),
                }
            }
            optimizer.step(&mut model.params, &batch_grads.expect("non-empty batch"));
        }
        epoch_losses.push(epoch_loss);
    }
    Ok(TrainOutcome {
        model,
        epoch_losses,
    })
}
