use rdseg::model::{self, ModelSpec};
use rdseg::tensor::{DiffTensor, Tape};
use rdseg::distill;
use rdseg::grid::LabelGrid;
use std::time::Instant;

fn main() {
    let spec = ModelSpec::teacher_default(5);
    let params = model::build(&spec, 1).unwrap();
    let images = DiffTensor::new(vec![8, 3, 64, 64], (0..8*3*64*64).map(|v| (v as f64 * 0.001).sin().abs()).collect()).unwrap();
    let labels = LabelGrid::new(8, 64, 64, (0..8*64*64).map(|v| (v % 5) as u32).collect());

    // teacher forward only
    let t0 = Instant::now();
    let reps = 10;
    for _ in 0..reps {
        let mut tape = Tape::new();
        let out = model::forward(&mut tape, &params, &images, true).unwrap();
        std::hint::black_box(tape.value(out.logits.primary)[0]);
    }
    println!("teacher fwd: {:.1} ms/iter", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    // teacher fwd+bwd (pretraining step cost)
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::new();
        let out = model::forward(&mut tape, &params, &images, true).unwrap();
        let ce_p = distill::cross_entropy_loss(&mut tape, out.logits.primary, &labels).unwrap();
        let ce_a = distill::cross_entropy_loss(&mut tape, out.logits.auxiliary.unwrap(), &labels).unwrap();
        let scaled = tape.scale(ce_a, 0.4).unwrap();
        let loss = tape.add(ce_p, scaled).unwrap();
        tape.backward(loss).unwrap();
        std::hint::black_box(tape.grad(out.param_ids[0].1));
    }
    println!("teacher fwd+bwd: {:.1} ms/iter", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    // student step with constant teacher logits (distill iteration cost)
    let sspec = ModelSpec::student_default(5);
    let sparams = model::build(&sspec, 2).unwrap();
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::new();
        let tlogits = tape.constant(vec![8,5,64,64], vec![0.1; 8*5*64*64]).unwrap();
        let out = model::forward(&mut tape, &sparams, &images, false).unwrap();
        let cfg = rdseg::DistillConfig { total_iters: 100, ..Default::default() };
        let tpair = rdseg::LogitPair { primary: tlogits, auxiliary: None };
        let (loss, _) = distill::rdd_total_loss(&mut tape, 50, &cfg, &out.logits, &tpair, &labels, &[]).unwrap();
        tape.backward(loss).unwrap();
        std::hint::black_box(tape.grad(out.param_ids[0].1));
    }
    println!("student rdd step: {:.1} ms/iter", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);
}
