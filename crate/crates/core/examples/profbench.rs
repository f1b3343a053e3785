// quick instrumented timing of one sample's forward/backward pieces
use std::time::Instant;
fn main() {
    use seer_core::harness::{HyperParams};
    use seer_core::harness::synth::make_synthetic;
    use seer_core::harness::data::encode_dataset;
    use seer_core::model::SeerModel;
    use seer_core::numerics::tape::Tape;
    use seer_core::params::Gradients;

    let hp = HyperParams::default();
    let items = make_synthetic(32, 0.9, 0.9, 1, &hp).unwrap();
    let bundles = encode_dataset(&items, &hp, None).unwrap();
    let model = SeerModel::init(&hp).unwrap();

    // warmup
    for b in bundles.iter().take(4) {
        let mut tape = Tape::new();
        let (vars, _reg) = model.bind(&mut tape);
        let tr = model.forward_sample(&mut tape, &vars, b).unwrap();
        let loss = model.loss_sample(&mut tape, &tr, 1);
        tape.backward(loss);
    }

    let n = 32;
    let t0 = Instant::now();
    let mut binds = 0.0; let mut fwd = 0.0; let mut bwd = 0.0; let mut collect = 0.0;
    let mut nodes = 0usize;
    for b in &bundles {
        let t = Instant::now();
        let mut tape = Tape::new();
        let (vars, reg) = model.bind(&mut tape);
        binds += t.elapsed().as_secs_f64();
        let t = Instant::now();
        let tr = model.forward_sample(&mut tape, &vars, b).unwrap();
        let loss = model.loss_sample(&mut tape, &tr, 1);
        fwd += t.elapsed().as_secs_f64();
        let t = Instant::now();
        tape.backward(loss);
        bwd += t.elapsed().as_secs_f64();
        let t = Instant::now();
        let g = Gradients::from_tape(&mut tape, &reg);
        std::hint::black_box(&g);
        collect += t.elapsed().as_secs_f64();
        nodes = tape.len();
    }
    let total = t0.elapsed().as_secs_f64();
    println!("per-sample: bind {:.2}ms fwd {:.2}ms bwd {:.2}ms collect {:.2}ms total {:.2}ms nodes {}",
        1e3*binds/n as f64, 1e3*fwd/n as f64, 1e3*bwd/n as f64, 1e3*collect/n as f64, 1e3*total/n as f64, nodes);
}
