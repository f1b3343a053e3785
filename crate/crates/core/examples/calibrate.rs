// verification run for the end-to-end learnability criterion
use seer_core::harness::metrics::evaluate;
use seer_core::harness::synth::make_synthetic;
use seer_core::harness::train::train;
use seer_core::harness::HyperParams;
use std::time::Instant;

fn main() {
    let hp = HyperParams::default();
    for (es, al) in [(0.9, 0.9), (0.0, 0.0)] {
        let t = Instant::now();
        let train_items = make_synthetic(400, es, al, 1, &hp).unwrap();
        let test_items = make_synthetic(100, es, al, 2, &hp).unwrap();
        let outcome = train(&train_items, &hp).unwrap();
        let acc = evaluate(&outcome.model, &test_items).unwrap().accuracy;
        println!(
            "strengths ({es},{al}): acc {acc:.3}, loss {:.1} -> {:.1}, {:.1}s",
            outcome.epoch_losses.first().unwrap(),
            outcome.epoch_losses.last().unwrap(),
            t.elapsed().as_secs_f64()
        );
    }
}
