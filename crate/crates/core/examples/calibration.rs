//! Expected calibration error on hand-made predictions, and the effect of
//! averaging several noisy predictions.

use rand::Rng as _;

use metaperturb::perturbation::{mc_predict, softmax_rows};
use metaperturb::tensor::Tensor;
use metaperturb::trainer::{ece, ECE_BINS};
use metaperturb::{seeded_rng, Result};

fn main() -> Result<()> {
    let confident = vec![0.9; 10];
    let hits: Vec<bool> = (0..10).map(|i| i < 6).collect();
    println!("90% confident, 60% right: ECE {}", ece(&confident, &hits, ECE_BINS)?);

    let calibrated: Vec<bool> = (0..10).map(|i| i < 9).collect();
    println!("90% confident, 90% right: ECE {}", ece(&confident, &calibrated, ECE_BINS)?);

    // One noisy logit vector per call; MC averaging smooths the probabilities.
    let mut rng = seeded_rng(8);
    let clean = Tensor::new(vec![1, 3], vec![2.0f64, 0.5, -1.0])?;
    println!("softmax of the clean logits {:?}", softmax_rows(&clean)?.data());
    for k in [1, 10, 100] {
        let p = mc_predict(k, || {
            let noisy: Vec<f64> = clean.data().iter().map(|v| v + rng.random_range(-2.0..2.0)).collect();
            Tensor::new(vec![1, 3], noisy)
        })?;
        println!("{k:>3} samples: {:?}", p.data());
    }
    Ok(())
}
