//! Trains target networks of several architectures on an unseen two-class
//! task, with and without a meta-learned φ.
//!
//! `cargo run --release --example transfer -- [phi.mpph]`; without a file a
//! short meta-training run supplies φ.

use metaperturb::data::{make_synthetic, split_classwise, split_train_test, Dataset, SyntheticConfig};
use metaperturb::models::ModelSpec;
use metaperturb::perturbation::{read_phi_file, PerturbConfig, PhiParams};
use metaperturb::trainer::{evaluate, meta_test_train, meta_train, MetaState, MetricsLog, TaskState, TrainConfig};
use metaperturb::{seeded_rng, Result};

fn quick_phi(source: &Dataset) -> Result<PhiParams<f32>> {
    let mut rng = seeded_rng(5);
    let cfg = TrainConfig { batch_size: 32, test_batch_size: 32, ..TrainConfig::default() }.with_steps(200);
    let split = split_classwise(source, 4, &mut rng)?;
    let mut tasks = Vec::new();
    for (i, task) in split.tasks.iter().enumerate() {
        let tt = split_train_test(task, cfg.test_fraction, &mut rng)?;
        tasks.push(TaskState::new(i, ModelSpec::conv2_lite(source.shape(), task.class_count()), tt.train, tt.test, &cfg)?);
    }
    meta_train(&mut tasks, &mut MetaState::new(cfg), &mut MetricsLog::default())
}

fn main() -> Result<()> {
    let shape = [1, 16, 16];
    let all = make_synthetic(&SyntheticConfig::new(10, 200, shape, 0.5), &mut seeded_rng(7))?;
    let source_idx: Vec<usize> = (0..all.len()).filter(|&i| all.labels()[i] < 8).collect();
    let target_idx: Vec<usize> = (0..all.len()).filter(|&i| all.labels()[i] >= 8).collect();
    let mut source = all.subset(&source_idx, 8, |l| l)?;
    let mut train = all.subset(&target_idx[..200], 2, |l| l - 8)?;
    let mut test = all.subset(&target_idx[200..], 2, |l| l - 8)?;
    let stats = source.channel_stats();
    for ds in [&mut source, &mut train, &mut test] {
        ds.standardize(&stats)?;
    }

    let phi = match std::env::args().nth(1) {
        Some(path) => read_phi_file(path)?,
        None => quick_phi(&source)?,
    };
    for spec in [ModelSpec::conv2_lite(shape, 2), ModelSpec::conv4_lite(shape, 2), ModelSpec::resnet8_lite(shape, 2)] {
        let cfg = TrainConfig { batch_size: 32, ..TrainConfig::default() }.with_steps(120);
        let base_cfg = TrainConfig { perturb: PerturbConfig::disabled(), ..cfg.clone() };
        let base = meta_test_train(&train, &phi, &spec, &base_cfg, &mut MetricsLog::default())?;
        let perturbed = meta_test_train(&train, &phi, &spec, &cfg, &mut MetricsLog::default())?;
        let b = evaluate(&base, &test, 64, 0)?;
        let p = evaluate(&perturbed, &test, 64, 0)?;
        println!(
            "{:<28} base acc {:.3} nll {:.3} ece {:.3} | perturbed acc {:.3} nll {:.3} ece {:.3}",
            spec.canonical().split('|').next().unwrap_or(""),
            b.accuracy, b.nll, b.ece, p.accuracy, p.nll, p.ece
        );
    }
    Ok(())
}
