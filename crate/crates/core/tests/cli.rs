mod common;

use std::path::{Path, PathBuf};
use std::process::Command;

use affect_mtl::cli::{
    cmd_evaluate, cmd_kfold, cmd_predict, cmd_split, cmd_train, fold_dir, run_spec, EnsembleSpec, EvaluateArgs,
    Strategy, TrainSummary,
};
use affect_mtl::data::{load_all_features, read_raw_predictions, raw_sidecar_path, save_features, FoldPlan};
use affect_mtl::metrics::fold_aggregate;
use affect_mtl::model::ModelConfig;
use common::{small_config, small_corpus, small_run};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_affect-mtl"))
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|r| r.unwrap().iter().map(String::from).collect()).collect()
}

#[test]
fn same_seed_gives_identical_checkpoints_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let (f, l) = small_corpus(dir.path(), 40, 5, 1);
    let a = cmd_train(&small_run(&f, &l, &dir.path().join("a"))).unwrap();
    let b = cmd_train(&small_run(&f, &l, &dir.path().join("b"))).unwrap();
    assert_eq!(a, b);
    for e in 1..=3 {
        for name in [format!("epoch_{e:03}.afck"), format!("epoch_{e:03}.report.json")] {
            assert_eq!(read(&dir.path().join("a").join(&name)), read(&dir.path().join("b").join(&name)), "{name}");
        }
    }
    assert_eq!(read(&dir.path().join("a/steps.jsonl")), read(&dir.path().join("b/steps.jsonl")));
    let steps = std::fs::read_to_string(dir.path().join("a/steps.jsonl")).unwrap();
    assert_eq!(steps.lines().count(), 3 * 3);
}

#[test]
fn evaluating_a_saved_checkpoint_reproduces_the_training_report() {
    let dir = tempfile::tempdir().unwrap();
    let (f, l) = small_corpus(dir.path(), 40, 5, 2);
    let run = dir.path().join("run");
    let summary = cmd_train(&small_run(&f, &l, &run)).unwrap();
    let best = summary.best_overall.as_ref().unwrap();
    let cfg = small_config();
    let args = EvaluateArgs {
        checkpoint: &run.join(&best.checkpoint),
        features: &f,
        labels: &l,
        expected: Some(&cfg),
        batch_size: 7,
    };
    let report = cmd_evaluate(&args, &dir.path().join("eval.json")).unwrap();
    assert_eq!(&report, summary.best_report().unwrap());
    assert!((report.p_mtl - (report.p_au + report.p_expr + report.p_va)).abs() <= 1e-9);
    assert!(dir.path().join("eval.json.manifest.json").exists());

    let wrong = ModelConfig {
        d_model: 32,
        ..small_config()
    };
    let err = cmd_evaluate(&EvaluateArgs { expected: Some(&wrong), ..args }, &dir.path().join("x.json")).unwrap_err();
    assert_eq!(err.kind(), "checkpoint");
}

#[test]
fn best_epochs_prefer_the_earliest_tie() {
    use affect_mtl::cli::{best_epoch, EpochRecord};
    use affect_mtl::metrics::{EvalReport, Task};
    let scores = [(0.3, 0.2, 0.1), (0.5, 0.2, 0.4), (0.5, 0.1, 0.4), (0.2, 0.2, 0.0)];
    let epochs: Vec<EpochRecord> = scores
        .iter()
        .enumerate()
        .map(|(i, &(a, e, v))| EpochRecord {
            epoch: i + 1,
            checkpoint: format!("epoch_{:03}.afck", i + 1),
            mean_loss: 1.0,
            report: EvalReport::from_scores(a, e, v),
        })
        .collect();
    let pick = |t: Task| best_epoch(&epochs, |r| r.task_score(t)).unwrap().epoch;
    assert_eq!((pick(Task::Au), pick(Task::Expr), pick(Task::Va)), (2, 1, 2));
    assert_eq!(best_epoch(&epochs, |r| r.p_mtl).unwrap().epoch, 2);
    assert!(best_epoch(&[], |r| r.p_mtl).is_none());
}

#[test]
fn predict_writes_one_bounded_row_per_feature_map() {
    let dir = tempfile::tempdir().unwrap();
    let (f, l) = small_corpus(dir.path(), 30, 4, 4);
    let run = dir.path().join("run");
    cmd_train(&small_run(&f, &l, &run)).unwrap();
    let ck = run.join("epoch_003.afck");
    let out1 = dir.path().join("p1.csv");
    let out2 = dir.path().join("p2.csv");
    let records = cmd_predict(&ck, &f, &out1, 8).unwrap();
    cmd_predict(&ck, &f, &out2, 64).unwrap();
    assert_eq!(records.len(), 30);
    assert_eq!(read(&out1), read(&out2));
    assert_eq!(read(&raw_sidecar_path(&out1)), read(&raw_sidecar_path(&out2)));
    assert_eq!(read_raw_predictions(&raw_sidecar_path(&out1)).unwrap(), records);
    let rows = csv_rows(&out1);
    assert_eq!(rows.len(), 30);
    for row in rows {
        for field in &row[1..3] {
            let v: f64 = field.parse().unwrap();
            assert!((-1.0..=1.0).contains(&v));
        }
    }

    let shape = affect_mtl::data::FeatureShape {
        patches: 8,
        channels: 12,
    };
    let mut maps = load_all_features(&f, shape).unwrap();
    maps[1].id = maps[0].id.clone();
    let dup = dir.path().join("dup.aff");
    save_features(&dup, shape, &maps).unwrap();
    assert!(cmd_predict(&ck, &dup, &dir.path().join("p3.csv"), 8).is_err());
}

#[test]
fn feature_container_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let (f, _) = small_corpus(dir.path(), 12, 3, 5);
    let shape = affect_mtl::data::FeatureShape {
        patches: 8,
        channels: 12,
    };
    let maps = load_all_features(&f, shape).unwrap();
    let copy = dir.path().join("copy.aff");
    save_features(&copy, shape, &maps).unwrap();
    assert_eq!(read(&f), read(&copy));
    assert_eq!(load_all_features(&copy, shape).unwrap(), maps);
}

#[test]
fn kfold_reports_six_folds_and_their_average() {
    let dir = tempfile::tempdir().unwrap();
    let (f, l) = small_corpus(dir.path(), 60, 12, 6);
    let mut cfg = small_run(&f, &l, &dir.path().join("kf"));
    cfg.train.epochs = 1;
    let report = cmd_kfold(&cfg, 6, None).unwrap().unwrap();
    assert_eq!(report.folds.len(), 6);
    assert_eq!(report.average, fold_aggregate(&report.folds).unwrap());
    let plan = FoldPlan::load(&dir.path().join("kf/folds.json")).unwrap();
    assert_eq!(plan.k, 6);

    // one fold per invocation, as separate processes would run them
    let mut split = small_run(&f, &l, &dir.path().join("kf2"));
    split.train.epochs = 1;
    for fold in [4, 1, 6, 2, 5] {
        assert!(cmd_kfold(&split, 6, Some(fold)).unwrap().is_none());
    }
    let again = cmd_kfold(&split, 6, Some(3)).unwrap().unwrap();
    assert_eq!(again, report);
    assert!(cmd_kfold(&split, 6, Some(7)).is_err());
}

#[test]
fn training_on_a_fold_plan_holds_that_fold_out() {
    let dir = tempfile::tempdir().unwrap();
    let (f, l) = small_corpus(dir.path(), 36, 6, 7);
    let plan_path = dir.path().join("plan.json");
    let plan = cmd_split(&l, None, 3, 0, &plan_path).unwrap();
    let mut cfg = small_run(&f, &l, &dir.path().join("run"));
    cfg.train.epochs = 1;
    cfg.paths.folds = Some(plan_path);
    assert!(cmd_train(&cfg).is_err(), "a plan without --fold is ambiguous");
    cfg.fold = Some(2);
    let summary = cmd_train(&cfg).unwrap();
    let held = plan.fold_sizes()[1];
    let counts = summary.epochs[0].report.counts;
    assert_eq!(counts.au.valid + counts.au.invalid, held);
}

fn write_member(dir: &Path, name: &str, scale: f32) -> PathBuf {
    use affect_mtl::data::{write_predictions, PredictionRecord};
    let records: Vec<PredictionRecord> = (0..5)
        .map(|i| PredictionRecord {
            id: format!("vid/{i:03}"),
            au_logits: std::array::from_fn(|j| scale * ((i * 12 + j) as f32 * 0.37).sin()),
            expr_logits: std::array::from_fn(|k| scale * ((i * 8 + k) as f32 * 0.91).cos()),
            va: [(scale * i as f32 * 0.2).tanh(), -(scale * 0.1).tanh()],
        })
        .collect();
    let path = dir.join(name);
    write_predictions(&path, &records).unwrap();
    path
}

#[test]
fn ensemble_files_identity_and_concatenation() {
    use affect_mtl::data::write_predictions;
    let dir = tempfile::tempdir().unwrap();
    let a = write_member(dir.path(), "a.csv", 1.0);
    let b = write_member(dir.path(), "b.csv", -2.0);
    let c = write_member(dir.path(), "c.csv", 0.5);
    for strategy in [
        Strategy::BestOverall,
        Strategy::BestPerTask,
        Strategy::KfoldBestOverall,
        Strategy::KfoldBestPerTask,
        Strategy::Meta,
    ] {
        let n = strategy.member_count();
        let mut spec = EnsembleSpec {
            strategy: Some(strategy),
            ..EnsembleSpec::default()
        };
        if strategy.per_task() {
            spec.au = vec![a.clone(); n];
            spec.expr = vec![a.clone(); n];
            spec.va = vec![a.clone(); n];
        } else {
            spec.members = vec![a.clone(); n];
        }
        let out = dir.path().join(format!("{strategy:?}.csv"));
        write_predictions(&out, &run_spec(&spec).unwrap()).unwrap();
        assert_eq!(read(&out), read(&a), "{strategy:?}");
    }

    let spec = EnsembleSpec {
        strategy: Some(Strategy::BestPerTask),
        au: vec![a.clone()],
        expr: vec![b.clone()],
        va: vec![c.clone()],
        ..EnsembleSpec::default()
    };
    let out = dir.path().join("concat.csv");
    write_predictions(&out, &run_spec(&spec).unwrap()).unwrap();
    let (rows, ra, rb, rc) = (csv_rows(&out), csv_rows(&a), csv_rows(&b), csv_rows(&c));
    for i in 0..rows.len() {
        assert_eq!(rows[i][1..3], rc[i][1..3]);
        assert_eq!(rows[i][3], rb[i][3]);
        assert_eq!(rows[i][4..], ra[i][4..]);
    }
}

#[test]
fn ensemble_members_from_kfold_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (f, l) = small_corpus(dir.path(), 48, 12, 8);
    let mut cfg = small_run(&f, &l, &dir.path().join("kf"));
    cfg.train.epochs = 2;
    cmd_kfold(&cfg, 6, None).unwrap();
    let runs: Vec<PathBuf> = (1..=6).map(|i| fold_dir(&dir.path().join("kf"), i)).collect();
    for strategy in [Strategy::KfoldBestOverall, Strategy::KfoldBestPerTask] {
        let spec = EnsembleSpec::from_runs(strategy, &runs, f.clone()).unwrap();
        let out = run_spec(&spec).unwrap();
        assert_eq!(out.len(), 48);
        assert!(out.iter().all(|r| r.va.iter().all(|v| (-1.0..=1.0).contains(v))));
    }
    let single = EnsembleSpec::from_runs(Strategy::BestOverall, &runs[..1], f.clone()).unwrap();
    let summary = TrainSummary::load(&runs[0]).unwrap();
    assert_eq!(single.members, vec![runs[0].join(summary.best_overall.unwrap().checkpoint)]);
    assert!(EnsembleSpec::from_runs(Strategy::KfoldBestOverall, &runs[..5], f).is_err());
}

#[test]
fn binary_round_trip_and_error_line() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let ok = bin()
        .args(["gen-synthetic", "--n", "24", "--seed", "3", "--n-videos", "4", "--patches", "8", "--channels", "12"])
        .arg("--out")
        .arg(d.join("data"))
        .output()
        .unwrap();
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    let toml = "[train]\nepochs = 2\nwarmup_epochs = 1\nbatch_size = 8\nseed = 5\n\
                [model]\nn_patches = 8\nin_channels = 12\nconv_hidden = 16\nd_model = 16\n\
                n_heads = 2\nffn_hidden = 32\nn_blocks = 2\n";
    std::fs::write(d.join("run.toml"), toml).unwrap();
    let train = bin()
        .arg("train")
        .arg("--config")
        .arg(d.join("run.toml"))
        .arg("--features")
        .arg(d.join("data/features.aff"))
        .arg("--labels")
        .arg(d.join("data/labels.csv"))
        .arg("--out")
        .arg(d.join("run"))
        .output()
        .unwrap();
    assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));
    let stdout = String::from_utf8_lossy(&train.stdout);
    assert!(stdout.contains("effective lr at warmup end (epoch 1): 0.001"), "{stdout}");
    for f in ["summary.json", "config.json", "manifest.json", "epoch_002.afck", "epoch_002.afck.json"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }

    let fail = bin()
        .args(["train", "--epochs", "0", "--features", "x.aff", "--labels", "y.csv"])
        .output()
        .unwrap();
    assert!(!fail.status.success());
    let line: serde_json::Value = serde_json::from_slice(fail.stderr.trim_ascii()).unwrap();
    assert_eq!(line["error"], "invalid_argument");
    assert!(line["message"].as_str().unwrap().contains("nothing to train"));

    let missing = bin()
        .args(["predict", "--checkpoint", "nope.afck", "--features", "x.aff", "--out", "p.csv"])
        .current_dir(d)
        .output()
        .unwrap();
    assert!(!missing.status.success());
    let line: serde_json::Value = serde_json::from_slice(missing.stderr.trim_ascii()).unwrap();
    assert_eq!(line["error"], "io");
}

#[test]
fn default_recipe_reports_the_base_rate_at_warmup_end() {
    let cfg = affect_mtl::cli::RunConfig::default();
    let s = cfg.train.schedule().unwrap();
    assert_eq!(s.lr_at(f64::from(cfg.train.warmup_epochs)), 0.001);
}

/// Serves real features for the first `healthy` reads, then infinities.
struct Poisoned<'a> {
    inner: &'a [affect_mtl::data::FeatureMap],
    healthy: usize,
    reads: std::cell::Cell<usize>,
}

impl affect_mtl::training::FeatureSource for Poisoned<'_> {
    fn len(&self) -> usize {
        self.inner.len()
    }

    fn shape(&self) -> affect_mtl::data::FeatureShape {
        self.inner[0].shape()
    }

    fn id(&self, i: usize) -> &str {
        &self.inner[i].id
    }

    fn write_features(&self, i: usize, out: &mut [f32]) {
        self.reads.set(self.reads.get() + 1);
        if self.reads.get() > self.healthy {
            out.fill(f32::INFINITY);
        } else {
            out.copy_from_slice(self.inner[i].patches.data());
        }
    }
}

#[test]
fn divergence_keeps_the_last_good_checkpoint() {
    use affect_mtl::cli::train_run;
    use affect_mtl::training::align_labels;
    let dir = tempfile::tempdir().unwrap();
    let (f, l) = small_corpus(dir.path(), 20, 4, 9);
    let cfg = small_run(&f, &l, &dir.path().join("run"));
    let maps = load_all_features(&f, affect_mtl::data::FeatureShape { patches: 8, channels: 12 }).unwrap();
    let labels = align_labels(&maps[..], &affect_mtl::data::load_labels(&l).unwrap()).unwrap();
    let source = Poisoned {
        inner: &maps,
        healthy: 20,
        reads: std::cell::Cell::new(0),
    };
    let out = dir.path().join("run");
    let err = train_run(&cfg, (&source, &labels), (&maps[..], &labels), &out).unwrap_err();
    assert_eq!(err.kind(), "divergence");
    assert!(err.to_string().contains("epoch_001.afck"), "{err}");
    assert!(out.join("epoch_001.afck").exists());
    assert!(!out.join("epoch_002.afck").exists());
    let summary = TrainSummary::load(&out).unwrap();
    assert_eq!(summary.epochs.len(), 1);
    assert!(summary.diverged.is_some());
}
