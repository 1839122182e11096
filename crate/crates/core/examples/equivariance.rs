//! The noise generator treats channels as a set: permuting the input
//! channels permutes its output the same way, for any channel count.

use rand::seq::SliceRandom;
use rand::Rng as _;

use metaperturb::perturbation::{mu, PhiParams};
use metaperturb::tensor::{Tape, Tensor};
use metaperturb::{seeded_rng, Result};

fn permute(t: &Tensor<f32>, perm: &[usize]) -> Tensor<f32> {
    let (b, c, h, w) = t.dims4().expect("4-d");
    let plane = h * w;
    let mut out = Tensor::zeros(vec![b, c, h, w]);
    for n in 0..b {
        for (from, &to) in perm.iter().enumerate() {
            let src = &t.data()[(n * c + from) * plane..][..plane];
            out.data_mut()[(n * c + to) * plane..][..plane].copy_from_slice(src);
        }
    }
    out
}

fn mean_map(phi: &PhiParams<f32>, h: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut tape = Tape::new();
    let x = tape.constant(h.clone());
    let vars = phi.to_tape(&mut tape, false);
    let m = mu(&mut tape, x, &vars)?;
    Ok(tape.value(m).clone())
}

fn main() -> Result<()> {
    let mut rng = seeded_rng(0);
    let phi = PhiParams::init(&mut rng);
    println!("one φ of {} scalars serves every channel count", phi.param_count());
    for c in [1, 3, 8, 32, 128] {
        let h = Tensor::from_fn(vec![2, c, 6, 6], |_| rng.random_range(-1.0f32..1.0));
        let mut perm: Vec<usize> = (0..c).collect();
        perm.shuffle(&mut rng);
        let lhs = mean_map(&phi, &permute(&h, &perm))?;
        let rhs = permute(&mean_map(&phi, &h)?, &perm);
        println!("C = {c:>3}: max |mu(P h) - P mu(h)| = {:.2e}", lhs.max_abs_diff(&rhs));
    }
    Ok(())
}
