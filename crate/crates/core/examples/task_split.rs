//! Builds a synthetic source set and divides it into tasks, class-wise
//! (heterogeneous) and instance-wise (homogeneous).

use metaperturb::data::{make_synthetic, split_classwise, split_instancewise, split_train_test, SyntheticConfig};
use metaperturb::{seeded_rng, Result};

fn main() -> Result<()> {
    let mut rng = seeded_rng(3);
    let source = make_synthetic(&SyntheticConfig::new(8, 30, [1, 16, 16], 1.0), &mut rng)?;
    println!("source: {} images of {:?}, class counts {:?}", source.len(), source.shape(), source.class_counts());

    let classwise = split_classwise(&source, 4, &mut rng)?;
    for (t, task) in classwise.tasks.iter().enumerate() {
        let tt = split_train_test(task, 0.2, &mut rng)?;
        println!(
            "class-wise task {t}: source classes {:?}, {} train / {} test",
            classwise.task_classes[t],
            tt.train.len(),
            tt.test.len()
        );
    }

    let instancewise = split_instancewise(&source, 4, &mut rng)?;
    for (t, task) in instancewise.tasks.iter().enumerate() {
        println!("instance-wise task {t}: {} images, class counts {:?}", task.len(), task.class_counts());
    }
    Ok(())
}
