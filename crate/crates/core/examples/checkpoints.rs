//! Writes and reads the φ and θ checkpoint formats.

use metaperturb::models::{build_model, read_theta_file, write_theta_file, ModelSpec};
use metaperturb::perturbation::{read_phi_file, write_phi_file, PhiParams};
use metaperturb::{seeded_rng, Result};

fn main() -> Result<()> {
    let dir = std::env::temp_dir().join("metaperturb-checkpoints");
    std::fs::create_dir_all(&dir)?;

    let phi = PhiParams::<f32>::init(&mut seeded_rng(9));
    let phi_path = dir.join("phi.mpph");
    write_phi_file(&phi, &phi_path)?;
    let bytes = std::fs::read(&phi_path)?;
    println!("{}: {} bytes, magic {:?}", phi_path.display(), bytes.len(), std::str::from_utf8(&bytes[..4]).unwrap_or("?"));
    assert_eq!(read_phi_file(&phi_path)?, phi);

    let spec = ModelSpec::resnet8_lite([3, 32, 32], 10);
    let theta = build_model::<f32>(&spec, &mut seeded_rng(10))?;
    let theta_path = dir.join("theta.mpth");
    write_theta_file(&theta, &spec, &theta_path)?;
    let read_theta = read_theta_file(&spec, &theta_path)?;
    println!("{}: {} parameters in {} tensors", theta_path.display(), read_theta.param_count(), read_theta.params.len());
    assert_eq!(read_theta, theta);
    let other = ModelSpec::conv4_lite([3, 32, 32], 10);
    if let Err(e) = read_theta_file(&other, &theta_path) {
        println!("loading it as conv4 is refused: {e}");
    }
    Ok(())
}
