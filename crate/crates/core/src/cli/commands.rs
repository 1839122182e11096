use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::settings::Settings;
use super::{
    CliError, MetaTestArgs, MetaTrainArgs, ReportArgs, SplitArgs, SplitMode, SynthArgs, TrainFlags, EXIT_CHECKPOINT,
    EXIT_DIVERGENCE, EXIT_REPORT,
};
use crate::data::{
    load_mpds, make_synthetic, save_mpds, split_classwise, split_instancewise, split_train_test, ChannelStats,
    Dataset, SyntheticConfig,
};
use crate::error::Error;
use crate::models::{write_theta_file, ModelSpec};
use crate::perturbation::{read_phi_file, write_phi_file};
use crate::trainer::{
    evaluate, meta_test_train, meta_train as run_meta_train, EvalMetrics, MetaState, MetricsLog, MetricsRow, Phase,
    Summary, TaskState,
};

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::usage(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn load(path: &Path) -> Result<Dataset, CliError> {
    load_mpds(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

fn to_json(value: &impl Serialize) -> Result<String, CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::usage(e.to_string()))?;
    text.push('\n');
    Ok(text)
}

/// Turns a divergence into exit code 2 naming the last completed step.
fn training_err(e: Error) -> CliError {
    match e {
        Error::Divergence { step, loss } => {
            let last_good = step.checked_sub(1).map_or("none".to_string(), |s| s.to_string());
            CliError::new(EXIT_DIVERGENCE, format!("training diverged at step {step} (loss {loss}); last good step {last_good}"))
        }
        other => other.into(),
    }
}

#[derive(Serialize)]
struct ProvenanceEntry {
    source_index: usize,
    source_label: usize,
    task_label: usize,
}

#[derive(Serialize)]
struct TaskProvenance {
    task: usize,
    /// Source labels owned by the task, indexed by task label.
    classes: Vec<usize>,
    train: Vec<ProvenanceEntry>,
    test: Vec<ProvenanceEntry>,
}

#[derive(Serialize)]
struct SplitRecord {
    mode: &'static str,
    tasks: usize,
    test_fraction: f64,
    seed: u64,
    config_hash: String,
}

pub(super) fn split(a: &SplitArgs) -> Result<(), CliError> {
    let mut source = load(&a.input)?;
    let stats = source.channel_stats();
    source.standardize(&stats)?;
    let mut rng = crate::seeded_rng(a.seed);
    let split = match a.mode {
        SplitMode::Classwise => split_classwise(&source, a.tasks, &mut rng)?,
        SplitMode::Instancewise => split_instancewise(&source, a.tasks, &mut rng)?,
    };
    create_dir(&a.out)?;
    for (t, task) in split.tasks.iter().enumerate() {
        let tt = split_train_test(task, a.test_fraction, &mut rng)?;
        // task-local index → provenance entry of the source instance
        let mut members: Vec<_> = split.provenance.iter().filter(|p| p.task == t).collect();
        members.sort_by_key(|p| p.task_index);
        let entries = |idx: &[usize]| -> Vec<ProvenanceEntry> {
            idx.iter()
                .map(|&i| ProvenanceEntry {
                    source_index: members[i].source_index,
                    source_label: members[i].source_label,
                    task_label: members[i].task_label,
                })
                .collect()
        };
        let dir = a.out.join(format!("task_{t}"));
        create_dir(&dir)?;
        save_mpds(&tt.train, dir.join("train.mpds"))?;
        save_mpds(&tt.test, dir.join("test.mpds"))?;
        let prov = TaskProvenance {
            task: t,
            classes: split.task_classes[t].clone(),
            train: entries(&tt.train_indices),
            test: entries(&tt.test_indices),
        };
        write_file(&dir.join("provenance.json"), to_json(&prov)?)?;
    }
    let mode = match a.mode {
        SplitMode::Classwise => "classwise",
        SplitMode::Instancewise => "instancewise",
    };
    let canonical = format!("split|mode={mode}|tasks={}|test_fraction={}", a.tasks, a.test_fraction);
    let record = SplitRecord {
        mode,
        tasks: a.tasks,
        test_fraction: a.test_fraction,
        seed: a.seed,
        config_hash: format!("{:016x}", crate::stable_hash64(canonical.as_bytes())),
    };
    write_file(&a.out.join("split.json"), to_json(&record)?)?;
    write_file(&a.out.join("norm.json"), to_json(&stats)?)?;
    println!("wrote {} {mode} tasks to {}", a.tasks, a.out.display());
    Ok(())
}

fn build_settings(f: &TrainFlags) -> Result<Settings, CliError> {
    let mut s = Settings::defaults();
    if let Some(path) = &f.config {
        s.apply_file(path)?;
    }
    for kv in &f.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| CliError::usage(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        s.set(k, v)?;
    }
    let flags: [(&str, Option<String>); 7] = [
        ("model", f.model.clone()),
        ("steps", f.steps.map(|v| v.to_string())),
        ("lr", f.lr.map(|v| v.to_string())),
        ("batch_size", f.batch_size.map(|v| v.to_string())),
        ("anneal_fraction", f.anneal_fraction.map(|v| v.to_string())),
        ("insertion", f.insertion.clone()),
        ("seed", f.seed.map(|v| v.to_string())),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            s.set(k, v)?;
        }
    }
    if f.disable_noise {
        s.set("noise", "false")?;
    }
    if f.disable_scale {
        s.set("scale", "false")?;
    }
    Ok(s)
}

fn model_spec(s: &Settings, shape: [usize; 3], classes: usize) -> Result<ModelSpec, CliError> {
    let name = s.get("model").unwrap_or("conv2");
    let spec = ModelSpec::from_name(name, shape, classes)?.with_insertion(s.insertion()?);
    spec.trace_shapes()?;
    Ok(spec)
}

fn config_json(s: &Settings, command: &str) -> Result<serde_json::Value, CliError> {
    let mut map = s.effective()?;
    map.insert("command".into(), command.into());
    serde_json::to_value(map).map_err(|e| CliError::usage(e.to_string()))
}

fn mean_metrics(all: &[EvalMetrics]) -> EvalMetrics {
    let n = all.len() as f64;
    EvalMetrics {
        accuracy: all.iter().map(|m| m.accuracy).sum::<f64>() / n,
        nll: all.iter().map(|m| m.nll).sum::<f64>() / n,
        ece: all.iter().map(|m| m.ece).sum::<f64>() / n,
    }
}

pub(super) fn meta_train(a: &MetaTrainArgs) -> Result<(), CliError> {
    let mut settings = build_settings(&a.train)?;
    if let Some(w) = a.workers {
        settings.set("workers", w.to_string())?;
    }
    let cfg = settings.train_config()?;
    let mut tasks = Vec::new();
    while a.tasks.join(format!("task_{}", tasks.len())).is_dir() {
        let t = tasks.len();
        let dir = a.tasks.join(format!("task_{t}"));
        let train = load(&dir.join("train.mpds"))?;
        let test = load(&dir.join("test.mpds"))?;
        let spec = model_spec(&settings, train.shape(), train.class_count().max(test.class_count()))?;
        tasks.push(TaskState::new(t, spec, train, test, &cfg)?);
    }
    if tasks.is_empty() {
        return Err(CliError::usage(format!("no task_0 directory under {}", a.tasks.display())));
    }
    create_dir(&a.out)?;
    let mut meta = MetaState::new(cfg.clone());
    let mut log = MetricsLog::default();
    let result = run_meta_train(&mut tasks, &mut meta, &mut log);
    log.write(a.out.join("metrics.csv"))?;
    let phi = result.map_err(training_err)?;
    write_phi_file(&phi, a.out.join("phi.mpph"))?;
    let metrics: Vec<EvalMetrics> = tasks
        .iter()
        .map(|t| evaluate(&t.target_model(&phi, &cfg), &t.test, cfg.batch_size, cfg.seed))
        .collect::<Result<_, _>>()?;
    let m = mean_metrics(&metrics);
    let summary = Summary {
        accuracy: m.accuracy,
        nll: m.nll,
        ece: m.ece,
        phi_count: phi.param_count(),
        config_hash: settings.config_hash(&[("command", "meta-train".into()), ("tasks", tasks.len().to_string())])?,
        seed: cfg.seed,
        config: config_json(&settings, "meta-train")?,
    };
    summary.write(a.out.join("summary.json"))?;
    let norm = a.tasks.join("norm.json");
    if norm.is_file() {
        fs::copy(&norm, a.out.join("norm.json")).map_err(|e| io_err(&norm, e))?;
    }
    println!(
        "meta-trained φ over {} tasks for {} steps: mean task accuracy {:.4}",
        tasks.len(),
        cfg.total_steps,
        summary.accuracy
    );
    Ok(())
}

fn norm_stats(a: &MetaTestArgs) -> Result<Option<ChannelStats>, CliError> {
    let path = match &a.norm {
        Some(p) => p.clone(),
        None => {
            let beside = a.phi.parent().unwrap_or(Path::new(".")).join("norm.json");
            if !beside.is_file() {
                return Ok(None);
            }
            beside
        }
    };
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    serde_json::from_str(&text).map(Some).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

pub(super) fn meta_test(a: &MetaTestArgs) -> Result<(), CliError> {
    let mut settings = build_settings(&a.train_flags)?;
    if let Some(k) = a.mc {
        settings.set("mc_samples", k.to_string())?;
    }
    let cfg = settings.train_config()?;
    let phi = read_phi_file(&a.phi)
        .map_err(|e| CliError::new(EXIT_CHECKPOINT, format!("cannot load φ checkpoint {}: {e}", a.phi.display())))?;
    let mut train = load(&a.train)?;
    let mut test = load(&a.test)?;
    if train.shape() != test.shape() {
        return Err(CliError::usage(format!(
            "train images are {:?} but test images are {:?}",
            train.shape(),
            test.shape()
        )));
    }
    if let Some(stats) = norm_stats(a)? {
        train.standardize(&stats)?;
        test.standardize(&stats)?;
    }
    let spec = model_spec(&settings, train.shape(), train.class_count().max(test.class_count()))?;
    create_dir(&a.out)?;
    let mut log = MetricsLog::default();
    let result = meta_test_train(&train, &phi, &spec, &cfg, &mut log);
    let model = match result {
        Ok(m) => m,
        Err(e) => {
            log.write(a.out.join("metrics.csv"))?;
            return Err(training_err(e));
        }
    };
    let m = evaluate(&model, &test, cfg.batch_size, cfg.seed)?;
    log.push(MetricsRow {
        step: cfg.total_steps,
        task_id: 0,
        phase: Phase::Eval,
        train_loss: None,
        test_loss: Some(m.nll),
        accuracy: Some(m.accuracy),
        lr: cfg.lr_at(cfg.total_steps),
        beta: model.beta,
    });
    log.write(a.out.join("metrics.csv"))?;
    write_theta_file(&model.theta, &spec, a.out.join("theta.mpth"))?;
    let summary = Summary {
        accuracy: m.accuracy,
        nll: m.nll,
        ece: m.ece,
        phi_count: phi.param_count(),
        config_hash: settings.config_hash(&[("command", "meta-test".into())])?,
        seed: cfg.seed,
        config: config_json(&settings, "meta-test")?,
    };
    summary.write(a.out.join("summary.json"))?;
    println!("accuracy {:.4}  nll {:.4}  ece {:.4}", m.accuracy, m.nll, m.ece);
    Ok(())
}

/// One aggregated configuration: means and sample standard deviations.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub accuracy: (f64, f64),
    pub nll: (f64, f64),
    pub ece: (f64, f64),
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Groups summaries by config hash in order of first appearance; `force`
/// pools everything into a single row.
pub fn aggregate_summaries(summaries: &[Summary], force: bool) -> Vec<ReportRow> {
    let mut groups: Vec<(String, Vec<&Summary>)> = Vec::new();
    for s in summaries {
        let key = if force { String::new() } else { s.config_hash.clone() };
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, members)) => members.push(s),
            None => groups.push((key, vec![s])),
        }
    }
    groups
        .into_iter()
        .map(|(_, members)| {
            let mut hashes: Vec<&str> = Vec::new();
            for s in &members {
                if !hashes.contains(&s.config_hash.as_str()) {
                    hashes.push(&s.config_hash);
                }
            }
            let column = |f: fn(&Summary) -> f64| mean_std(&members.iter().map(|s| f(s)).collect::<Vec<_>>());
            ReportRow {
                config_hash: hashes.join(";"),
                seeds: members.iter().map(|s| s.seed).collect(),
                accuracy: column(|s| s.accuracy),
                nll: column(|s| s.nll),
                ece: column(|s| s.ece),
            }
        })
        .collect()
}

pub(super) fn report(a: &ReportArgs) -> Result<(), CliError> {
    let bad = |msg: String| CliError::new(EXIT_REPORT, msg);
    let mut summaries = Vec::new();
    for run in &a.runs {
        let path: PathBuf = if run.is_dir() { run.join("summary.json") } else { run.clone() };
        let text = fs::read_to_string(&path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        let summary: Summary = serde_json::from_str(&text).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        summaries.push(summary);
    }
    let distinct: BTreeMap<&str, ()> = summaries.iter().map(|s| (s.config_hash.as_str(), ())).collect();
    if a.force && distinct.len() > 1 {
        eprintln!("warning: pooling {} different configurations", distinct.len());
    }
    let mut csv = String::from("config_hash,runs,seeds,accuracy_mean,accuracy_std,nll_mean,nll_std,ece_mean,ece_std\n");
    for r in aggregate_summaries(&summaries, a.force) {
        let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.config_hash,
            r.seeds.len(),
            seeds.join(";"),
            r.accuracy.0,
            r.accuracy.1,
            r.nll.0,
            r.nll.1,
            r.ece.0,
            r.ece.1
        ));
    }
    write_file(&a.out, csv)?;
    Ok(())
}

pub(super) fn synth(a: &SynthArgs) -> Result<(), CliError> {
    let cfg = SyntheticConfig {
        noise_std: a.noise_std,
        ..SyntheticConfig::new(a.classes, a.per_class, [a.channels, a.size, a.size], a.separation)
    };
    let ds = make_synthetic(&cfg, &mut crate::seeded_rng(a.seed))?;
    save_mpds(&ds, &a.out)?;
    println!("wrote {} images of {} classes to {}", ds.len(), ds.class_count(), a.out.display());
    Ok(())
}
