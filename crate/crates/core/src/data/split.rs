use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    /// Tasks own disjoint label groups (heterogeneous tasks).
    Classwise,
    /// Tasks share the label space and split instances (homogeneous tasks).
    Instancewise,
}

/// Where one source instance went.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_index: usize,
    pub task: usize,
    /// Position inside the task dataset.
    pub task_index: usize,
    pub source_label: usize,
    pub task_label: usize,
}

#[derive(Clone, Debug)]
pub struct TaskSplit {
    pub kind: SplitKind,
    pub tasks: Vec<Dataset>,
    /// Source labels owned by each task, indexed by the task's new label.
    pub task_classes: Vec<Vec<usize>>,
    /// One entry per source instance, in source order.
    pub provenance: Vec<Provenance>,
}

/// Contiguous group sizes: the first `n % parts` groups get one extra element.
fn partition_sizes(n: usize, parts: usize) -> Vec<usize> {
    (0..parts).map(|i| n / parts + usize::from(i < n % parts)).collect()
}

/// Shuffles the classes and deals them into `tasks` contiguous groups;
/// labels are renumbered `0..k_t` inside each task.
pub fn split_classwise(source: &Dataset, tasks: usize, rng: &mut Rng) -> Result<TaskSplit> {
    let k = source.class_count();
    if tasks == 0 || tasks > k {
        return Err(Error::Data(format!("cannot split {k} classes into {tasks} tasks")));
    }
    let mut classes: Vec<usize> = (0..k).collect();
    classes.shuffle(rng);
    let mut owner = vec![(0usize, 0usize); k];
    let mut task_classes = Vec::with_capacity(tasks);
    let mut start = 0;
    for (t, size) in partition_sizes(k, tasks).into_iter().enumerate() {
        let group = classes[start..start + size].to_vec();
        for (new_label, &c) in group.iter().enumerate() {
            owner[c] = (t, new_label);
        }
        task_classes.push(group);
        start += size;
    }
    let mut members = vec![Vec::new(); tasks];
    let mut provenance = Vec::with_capacity(source.len());
    for (i, &label) in source.labels().iter().enumerate() {
        let (t, new_label) = owner[label];
        provenance.push(Provenance {
            source_index: i,
            task: t,
            task_index: members[t].len(),
            source_label: label,
            task_label: new_label,
        });
        members[t].push(i);
    }
    let datasets = members
        .iter()
        .enumerate()
        .map(|(t, idx)| {
            if idx.is_empty() {
                return Err(Error::Data(format!("task {t} received no instances")));
            }
            source.subset(idx, task_classes[t].len(), |l| owner[l].1)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TaskSplit { kind: SplitKind::Classwise, tasks: datasets, task_classes, provenance })
}

/// Shuffles instances and cuts them into `tasks` contiguous parts; labels are kept.
pub fn split_instancewise(source: &Dataset, tasks: usize, rng: &mut Rng) -> Result<TaskSplit> {
    let n = source.len();
    if tasks == 0 || tasks > n {
        return Err(Error::Data(format!("cannot split {n} instances into {tasks} tasks")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut provenance = vec![None; n];
    let mut datasets = Vec::with_capacity(tasks);
    let mut start = 0;
    for (t, size) in partition_sizes(n, tasks).into_iter().enumerate() {
        let mut idx = order[start..start + size].to_vec();
        idx.sort_unstable();
        for (pos, &i) in idx.iter().enumerate() {
            let label = source.labels()[i];
            provenance[i] = Some(Provenance {
                source_index: i,
                task: t,
                task_index: pos,
                source_label: label,
                task_label: label,
            });
        }
        datasets.push(source.subset(&idx, source.class_count(), |l| l)?);
        start += size;
    }
    let all: Vec<usize> = (0..source.class_count()).collect();
    Ok(TaskSplit {
        kind: SplitKind::Instancewise,
        task_classes: vec![all; tasks],
        tasks: datasets,
        provenance: provenance.into_iter().map(|p| p.expect("every index assigned")).collect(),
    })
}

#[derive(Clone, Debug)]
pub struct TrainTestSplit {
    pub train: Dataset,
    pub test: Dataset,
    /// Indices into the split dataset, ascending.
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

/// Stratified holdout: each class sends `round(fraction · n_c)` of its
/// instances (at least one, never all) to the test side.
pub fn split_train_test(task: &Dataset, test_fraction: f64, rng: &mut Rng) -> Result<TrainTestSplit> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Data(format!("test fraction {test_fraction} must lie strictly between 0 and 1")));
    }
    let mut by_class = vec![Vec::new(); task.class_count()];
    for (i, &l) in task.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    let mut train_indices = Vec::new();
    let mut test_indices = Vec::new();
    for (class, mut idx) in by_class.into_iter().enumerate() {
        match idx.len() {
            0 => continue,
            1 => return Err(Error::Data(format!("class {class} has a single instance; cannot hold one out"))),
            n => {
                idx.shuffle(rng);
                let n_test = ((test_fraction * n as f64).round() as usize).clamp(1, n - 1);
                test_indices.extend_from_slice(&idx[..n_test]);
                train_indices.extend_from_slice(&idx[n_test..]);
            }
        }
    }
    train_indices.sort_unstable();
    test_indices.sort_unstable();
    let k = task.class_count();
    Ok(TrainTestSplit {
        train: task.subset(&train_indices, k, |l| l)?,
        test: task.subset(&test_indices, k, |l| l)?,
        train_indices,
        test_indices,
    })
}
