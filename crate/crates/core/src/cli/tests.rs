use super::*;
use crate::perturbation::Anneal;
use crate::trainer::Summary;

#[test]
fn defaults_build_the_default_train_config() {
    let cfg = Settings::defaults().train_config().unwrap();
    assert_eq!(cfg, crate::trainer::TrainConfig::default());
}

#[test]
fn config_text_overrides_and_comments() {
    let mut s = Settings::defaults();
    s.apply_text("# desk run\nsteps = 100\n\nlr=0.01  # faster\nfixed_beta = 0.5\nmilestones = 10, 50\n").unwrap();
    let cfg = s.train_config().unwrap();
    assert_eq!(cfg.total_steps, 100);
    assert_eq!(cfg.lr, 0.01);
    assert_eq!(cfg.milestones, [10, 50]);
    assert_eq!(cfg.perturb.anneal, Anneal::Fixed(0.5));
    assert!(s.apply_text("no equals sign").is_err());
    assert!(s.apply_text("colour = red").is_err());
}

#[test]
fn milestones_follow_the_step_count_unless_set() {
    let mut s = Settings::defaults();
    s.set("steps", "50").unwrap();
    assert_eq!(s.train_config().unwrap().milestones, [20, 35, 45]);
    assert_eq!(s.effective().unwrap()["milestones"], "20,35,45");
    s.set("milestones", "").unwrap();
    assert!(s.train_config().unwrap().milestones.is_empty());
    s.set("milestones", "60").unwrap();
    assert!(s.train_config().is_err());
}

#[test]
fn invalid_values_are_usage_errors() {
    for (k, v) in [("steps", "many"), ("lr", "-1"), ("insertion", "sideways"), ("noise", "maybe")] {
        let mut s = Settings::defaults();
        s.set(k, v).unwrap();
        let r = s.train_config().and_then(|_| s.insertion().map(|_| ()));
        assert_eq!(r.unwrap_err().code, EXIT_USAGE, "{k}={v}");
    }
}

#[test]
fn config_hash_ignores_seed_and_workers_only() {
    let base = Settings::defaults();
    let h = base.config_hash(&[]).unwrap();
    assert_eq!(h.len(), 16);
    let mut s = base.clone();
    s.set("seed", "9").unwrap();
    s.set("workers", "4").unwrap();
    assert_eq!(s.config_hash(&[]).unwrap(), h);
    s.set("lr", "0.002").unwrap();
    assert_ne!(s.config_hash(&[]).unwrap(), h);
    assert_ne!(base.config_hash(&[("command", "meta-test".into())]).unwrap(), h);
    let mut explicit = base.clone();
    explicit.set("milestones", "800,1400,1800").unwrap();
    assert_eq!(explicit.config_hash(&[]).unwrap(), h);
}

fn summary(hash: &str, seed: u64, acc: f64) -> Summary {
    Summary {
        accuracy: acc,
        nll: 2.0 * acc,
        ece: acc / 10.0,
        phi_count: 82,
        config_hash: hash.into(),
        seed,
        config: serde_json::Value::Null,
    }
}

#[test]
fn report_single_run_passes_through() {
    let rows = aggregate_summaries(&[summary("a", 3, 0.7)], false);
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].accuracy, (0.7, 0.0));
    assert_eq!(rows[0].nll, (1.4, 0.0));
    assert_eq!(rows[0].seeds, [3]);
}

#[test]
fn report_mean_and_sample_std_over_five_seeds() {
    let accs = [0.61, 0.65, 0.58, 0.7, 0.66];
    let runs: Vec<Summary> = accs.iter().enumerate().map(|(i, &a)| summary("h", i as u64, a)).collect();
    let row = &aggregate_summaries(&runs, false)[0];
    // Deviations −.03, .01, −.06, .06, .02 square-sum to .0086; sqrt(.0086 / 4).
    let mean = 3.2 / 5.0;
    let ss: f64 = accs.iter().map(|a| (a - mean) * (a - mean)).sum();
    assert!((row.accuracy.0 - 0.64).abs() < 1e-12);
    assert!((row.accuracy.1 - (ss / 4.0).sqrt()).abs() < 1e-12);
    assert!((row.accuracy.1 - 0.0463680924774785).abs() < 1e-12);
}

#[test]
fn report_groups_by_hash_unless_forced() {
    let runs = [summary("a", 0, 0.5), summary("b", 0, 0.9), summary("a", 1, 0.7)];
    let rows = aggregate_summaries(&runs, false);
    assert_eq!(rows.len(), 2);
    assert_eq!((rows[0].config_hash.as_str(), rows[0].seeds.as_slice()), ("a", &[0, 1][..]));
    assert!((rows[0].accuracy.0 - 0.6).abs() < 1e-12);
    assert_eq!(rows[1].config_hash, "b");
    let forced = aggregate_summaries(&runs, true);
    assert_eq!(forced.len(), 1);
    assert_eq!(forced[0].config_hash, "a;b");
    assert_eq!(forced[0].seeds.len(), 3);
}

#[test]
fn help_and_parse_errors() {
    assert!(run(["metaperturb", "--help"]).is_ok());
    assert_eq!(run(["metaperturb", "frobnicate"]).unwrap_err().code, EXIT_USAGE);
    assert_eq!(run(["metaperturb", "split", "--tasks", "2"]).unwrap_err().code, EXIT_USAGE);
}
