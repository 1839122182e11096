//! Applies the perturbation to one feature map and looks at its parts:
//! the annealing blend, the channel scales, and eval-mode behaviour.

use rand::Rng as _;

use metaperturb::perturbation::{apply_perturbation, compute_scales, PerturbConfig, PhiParams, RunningScales};
use metaperturb::tensor::{Mode, NoiseSource, Tape, Tensor};
use metaperturb::{seeded_rng, Result};

fn main() -> Result<()> {
    let mut rng = seeded_rng(1);
    let phi = PhiParams::<f32>::init(&mut rng);
    let h = Tensor::from_fn(vec![8, 4, 6, 6], |_| rng.random_range(-1.0f32..1.0));
    let cfg = PerturbConfig::default();
    let mut running = RunningScales::new(cfg.scale_momentum);
    let mut noise = seeded_rng(2);

    for beta in [0.0f32, 0.5, 1.0] {
        let mut tape = Tape::new();
        let x = tape.constant(h.clone());
        let vars = phi.to_tape(&mut tape, false);
        let y = apply_perturbation(&mut tape, x, &vars, &cfg, Mode::Train, beta, &mut running, 0, &mut NoiseSource::Gaussian(&mut noise))?;
        println!("beta {beta:.1}: max |g(h) - h| = {:.4}", tape.value(y).max_abs_diff(&h));
    }

    let mut tape = Tape::new();
    let x = tape.constant(h.clone());
    let vars = phi.to_tape(&mut tape, false);
    let s = compute_scales(&mut tape, x, &vars, Mode::Train, &mut running, 0)?;
    println!("batch scales  {:?}", tape.value(s).data());
    let ema = running.get(0, 4).expect("scales recorded");
    println!("running scales {:?} after {} batches", ema.ema, ema.update_count);

    let mut tape = Tape::new();
    let x = tape.constant(h.map(|v| v * 3.0));
    let vars = phi.to_tape(&mut tape, false);
    let s = compute_scales(&mut tape, x, &vars, Mode::Eval, &mut running, 0)?;
    println!("eval scales   {:?} (the running average, whatever the batch)", tape.value(s).data());

    let off = PerturbConfig::disabled();
    let mut tape = Tape::new();
    let x = tape.constant(h.clone());
    let vars = phi.to_tape(&mut tape, false);
    let y = apply_perturbation(&mut tape, x, &vars, &off, Mode::Train, 1.0, &mut running, 0, &mut NoiseSource::Zero)?;
    println!("both components disabled: output == input is {}", tape.value(y) == &h);
    Ok(())
}
