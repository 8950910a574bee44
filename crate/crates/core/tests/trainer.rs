use std::fs;

use east_core::model::Phase;
use east_core::tensor::{GradMode, Graph};
use east_core::train::{
    compare, grad_norm_sum, load_dataset, read_metrics, run, run_with_data, Checkpoint, CompareOptions, RunConfig,
    RunOptions, Split, Trainer,
};
use east_core::Error;

const SMALL: &str = r#"
name = "small"
seed = 3

[arch]
family = "resnet-basic"
widths = [4, 8]
blocks = [3, 3]
classes = 3
input = [1, 6, 6]
activation = "dyrelu-phased"

[arch.sharing]
donors = [2, 2]

[data]
kind = "synthetic"
classes = 3
shape = [1, 6, 6]
train = 60
test = 30
separation = 2.0

[train]
epochs = 4
batch_size = 10
log_every = 2

[topology]
sparsity = 0.9
cycles = 2
cycle_epochs = 1
interval_cyclic = 130
interval_fixed = 130
"#;

fn small() -> RunConfig {
    RunConfig::from_toml(SMALL).unwrap()
}

fn det(dir: &std::path::Path) -> RunOptions {
    RunOptions {
        out_dir: Some(dir.to_path_buf()),
        deterministic: true,
        verbose: false,
    }
}

#[test]
fn smoke_run_ends_at_target_sparsity() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&small(), &det(dir.path())).unwrap();
    let s = &out.summary;
    assert_eq!(s.steps, 24);
    assert_eq!(s.epochs.len(), 4);
    assert!(s.topology_updates > 0);
    let maskable = s.census.maskable as f64;
    assert!((s.final_sparsity - 0.9).abs() <= 1.0 / maskable, "{}", s.final_sparsity);
    assert_eq!(s.active_count, (0.1 * maskable).round() as usize);
    for f in ["metrics.csv", "preact.csv", "summary.json", "config.toml", "checkpoint.bin"] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    let rows = read_metrics(&dir.path().join("metrics.csv")).unwrap();
    assert_eq!(rows.iter().filter(|r| r.split == Split::Test).count(), 4);
    assert!(rows.iter().all(|r| r.wallclock == 0.0));
    // Phasing finishes before the first lr drop at epoch 2.
    assert_eq!(s.epochs[0].beta, 1.0);
    assert_eq!(s.epochs[3].beta, 0.0);
    assert_eq!(s.dyrelu_sites, 0);
}

#[test]
fn identical_runs_write_identical_metrics() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run(&small(), &det(a.path())).unwrap();
    run(&small(), &det(b.path())).unwrap();
    for f in ["metrics.csv", "preact.csv", "checkpoint.bin"] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small();
    let out = run(&cfg, &det(dir.path())).unwrap();
    let path = dir.path().join("checkpoint.bin");
    let first = fs::read(&path).unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    let again = dir.path().join("again.bin");
    ck.save(&again).unwrap();
    assert_eq!(first, fs::read(&again).unwrap());

    let restored = ck.restore(&cfg.arch).unwrap().model;
    let data = out.trainer.data();
    let (x, _) = data.test.batch::<f32>(&(0..16).collect::<Vec<_>>()).unwrap();
    let logits = |m: &east_core::Model<f32>| {
        let mut g = Graph::new(GradMode::Masked);
        let xv = g.constant(x.clone());
        let o = m.forward(&mut g, xv, Phase::Eval).unwrap();
        g.value(o.logits).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(logits(out.trainer.model()), logits(&restored));
    assert_eq!(ck.active_count(), out.summary.active_count);
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&small(), &det(dir.path())).unwrap();
    let bytes = out.trainer.checkpoint().encode();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::decode(&bad), Err(Error::Format(_))));
    assert!(Checkpoint::decode(&bytes[..bytes.len() - 3]).is_err());
    let mut long = bytes.clone();
    long.push(0);
    assert!(Checkpoint::decode(&long).is_err());
    let mut other = small();
    other.arch.widths = vec![4, 4];
    assert!(Checkpoint::decode(&bytes).unwrap().restore(&other.arch).is_err());
}

#[test]
fn resumed_run_matches_an_uninterrupted_one() {
    let cfg = small();
    let data = load_dataset(&cfg.data).unwrap();
    let mut whole = Trainer::new(cfg.clone(), data.clone()).unwrap();
    whole.run_to_end(false).unwrap();

    let mut first = Trainer::new(cfg.clone(), data.clone()).unwrap();
    first.train_epoch().unwrap();
    first.train_epoch().unwrap();
    let bytes = first.checkpoint().encode();
    let ck = Checkpoint::decode(&bytes).unwrap();
    let mut rest = Trainer::resume(cfg.clone(), data.clone(), &ck).unwrap();
    assert_eq!(rest.step(), 12);
    assert_eq!(rest.epoch(), 2);
    rest.run_to_end(false).unwrap();
    assert_eq!(whole.checkpoint().encode(), rest.checkpoint().encode());

    let mut renamed = cfg;
    renamed.train.lr = 0.05;
    assert!(matches!(Trainer::resume(renamed, data, &ck), Err(Error::State(_))));
}

#[test]
fn divergence_aborts_with_recent_rows() {
    let mut cfg = small();
    cfg.train.lr = 1e30;
    cfg.train.log_every = 1;
    let data = load_dataset(&cfg.data).unwrap();
    let err = run_with_data(&cfg, data, &RunOptions::default()).map(|_| ()).unwrap_err();
    let Error::NonFinite { step, detail } = err else { panic!("expected a non-finite abort, got {err}") };
    assert!(step > 1);
    assert!(detail.contains("last metric rows"), "{detail}");
    assert!(detail.contains("split=Train"), "{detail}");
}

#[test]
fn step_grad_norm_matches_a_recomputation() {
    let cfg = small();
    let data = load_dataset(&cfg.data).unwrap();
    let mut t = Trainer::new(cfg, data).unwrap();
    t.train_epoch().unwrap();
    let idx: Vec<usize> = (5..15).collect();
    let before = t.model().clone();
    let step = t.train_step(&idx, 0.01).unwrap();
    assert!(step.update.is_none());

    let (x, labels) = t.data().train.batch::<f32>(&idx).unwrap();
    let mut g = Graph::new(GradMode::Dense);
    let xv = g.constant(x);
    let out = before.forward(&mut g, xv, Phase::Train).unwrap();
    let loss = g.softmax_cross_entropy(out.logits, &labels).unwrap();
    g.backward(loss).unwrap();
    let grads = before.gradients(&g);
    let mut manual = 0.0f64;
    for (p, gr) in before.store.masked.iter().zip(&grads.masked) {
        let gr = gr.as_ref().unwrap();
        let mut sq = 0.0f64;
        for (&v, &m) in gr.iter().zip(p.mask()) {
            if m {
                sq += (v as f64).powi(2);
            }
        }
        manual += sq.sqrt();
    }
    assert!((manual - step.grad_norm_sum).abs() <= 1e-9 * manual.max(1.0), "{manual} vs {}", step.grad_norm_sum);
    assert_eq!(grad_norm_sum(&before.store, &grads), manual);
}

#[test]
fn compare_aggregates_seeds_per_method() {
    let dir = tempfile::tempdir().unwrap();
    let mut a = small();
    a.name = "a".into();
    a.train.epochs = 2;
    a.train.lr_drops = vec![1];
    a.arch.activation = east_core::ActivationMode::Relu;
    a.topology.cycle_epochs = 1;
    a.topology.cycles = 1;
    let mut b = a.clone();
    b.name = "b".into();
    let opts = CompareOptions {
        out_dir: Some(dir.path().to_path_buf()),
        deterministic: true,
        verbose: false,
    };
    let rep = compare(&[a.clone(), b], &[1, 2, 3], &opts).unwrap();
    assert_eq!(rep.runs.len(), 6);
    let (ma, mb) = (rep.method("a").unwrap(), rep.method("b").unwrap());
    assert_eq!(ma.runs, 3);
    assert_eq!(ma.accuracy_median, mb.accuracy_median);
    assert_eq!(ma.early_grad_norm_median, mb.early_grad_norm_median);
    let mut acc: Vec<f64> = rep.runs_of("a").map(|r| r.final_test_accuracy).collect();
    acc.sort_by(f64::total_cmp);
    assert_eq!(ma.accuracy_median, acc[1]);
    for f in ["summary.csv", "summary.json", "accuracy_vs_sparsity.csv", "grad_norm_vs_epoch.csv", "density_vs_epoch.csv"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    assert!(dir.path().join("runs/b/seed2/metrics.csv").is_file());
    let curve = fs::read_to_string(dir.path().join("density_vs_epoch.csv")).unwrap();
    assert_eq!(curve.lines().count(), 1 + 6 * 2);
    assert!(compare(&[a.clone(), a], &[1], &CompareOptions::default()).is_err());
}
