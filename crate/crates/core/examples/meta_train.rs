//! Meta-trains φ jointly with four source-task networks and saves it.
//!
//! `cargo run --release --example meta_train -- [steps] [out.mpph]`

use metaperturb::data::{make_synthetic, split_classwise, split_train_test, SyntheticConfig};
use metaperturb::models::ModelSpec;
use metaperturb::perturbation::write_phi_file;
use metaperturb::trainer::{meta_step, MetaState, TaskState, TrainConfig};
use metaperturb::{seeded_rng, Result};

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().map(|s| s.parse().expect("step count")).unwrap_or(300);
    let out = args.next().unwrap_or_else(|| "phi.mpph".into());

    let mut rng = seeded_rng(4);
    let mut source = make_synthetic(&SyntheticConfig::new(8, 100, [1, 16, 16], 0.5), &mut rng)?;
    source.standardize(&source.channel_stats())?;
    let cfg = TrainConfig { batch_size: 32, test_batch_size: 32, workers: 2, ..TrainConfig::default() }.with_steps(steps);
    let split = split_classwise(&source, 4, &mut rng)?;
    let mut tasks = Vec::new();
    for (i, task) in split.tasks.iter().enumerate() {
        let tt = split_train_test(task, cfg.test_fraction, &mut rng)?;
        let spec = ModelSpec::conv2_lite(source.shape(), task.class_count());
        tasks.push(TaskState::new(i, spec, tt.train, tt.test, &cfg)?);
    }

    let mut meta = MetaState::new(cfg.clone());
    meta.broadcast(&mut tasks);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build().expect("thread pool");
    let every = (steps / 10).max(1);
    while meta.step < steps {
        let r = meta_step(&mut tasks, &mut meta, Some(&pool))?;
        if r.step % every == 0 || r.step + 1 == steps {
            let n = r.tasks.len() as f64;
            let train = r.tasks.iter().map(|t| t.train_loss).sum::<f64>() / n;
            let test = r.tasks.iter().map(|t| t.test_loss).sum::<f64>() / n;
            let acc = r.tasks.iter().map(|t| t.test_accuracy).sum::<f64>() / n;
            println!("step {:>5}  lr {:.1e}  beta {:.2}  train {train:.3}  test {test:.3}  test acc {acc:.3}", r.step, r.lr, r.beta);
        }
    }
    write_phi_file(&meta.phi, &out)?;
    println!("wrote {} scalars of φ to {out}", meta.phi.param_count());
    Ok(())
}
