use std::path::Path;

use reid_core::checkpoint::load_checkpoint;
use reid_core::datasets::Layout;
use reid_core::eval::EnsembleMode;
use reid_core::model::{BackboneConfig, MultiHeadModel};
use reid_core::nn::Module;
use reid_core::synthetic::{two_task_fixture, write_fixture, FixtureSpec};
use reid_core::trainer::*;

fn tasks(root: &Path, seed: u64) -> (TaskData, TaskData) {
    let [a, b] = two_task_fixture(root, seed).unwrap();
    (
        TaskData::load("task1", &a, Layout::Market, 0).unwrap(),
        TaskData::load("task2", &b, Layout::Market, 1).unwrap(),
    )
}

fn model_for(specs: &[&TaskData], seed: u64) -> MultiHeadModel {
    let specs: Vec<_> = specs.iter().map(|t| t.spec.clone()).collect();
    build_model(&BackboneConfig::tiny(), &HeadSettings::default(), &specs, seed).unwrap()
}

/// The batch and learning rate used by the toy-scale runs.
fn toy_cfg(seed: u64, epochs: usize) -> TrainConfig {
    let mut cfg = TrainConfig {
        epochs,
        seed,
        ..TrainConfig::default()
    };
    cfg.batch.k = 2;
    cfg.clr.base_lr = 0.01;
    cfg.clr.max_lr = 0.06;
    cfg
}

fn weights(model: &MultiHeadModel) -> Vec<(String, Vec<u64>)> {
    let mut out = Vec::new();
    model.visit("", &mut |name, t| {
        out.push((name.to_string(), t.value.iter().map(|v| v.to_bits()).collect()));
    });
    out
}

#[test]
fn two_task_protocol_rows_and_forgetting_bound() {
    let dir = tempfile::tempdir().unwrap();
    let (t1, t2) = tasks(dir.path(), 0);
    let model = model_for(&[&t1, &t2], 0);
    let mut seen = Vec::new();
    let out = run_incremental(
        model,
        &[t1, t2],
        &toy_cfg(0, 30),
        None,
        &mut RunLog::new(),
        &mut |row| {
            seen.push((row.phase, row.task.clone(), row.reeval));
            Ok(())
        },
    )
    .unwrap();
    let expected = vec![
        (1, "task1".to_string(), false),
        (2, "task2".to_string(), false),
        (2, "task1".to_string(), true),
    ];
    assert_eq!(seen, expected);
    assert_eq!(out.rows.len(), 3);
    assert_eq!(out.model.phase(), 2);
    let (first, again) = (out.rows[0].report.rank1, out.rows[2].report.rank1);
    assert!(first - again <= 0.15, "task 1 fell from {first} to {again}");
}

#[test]
fn ablation_reeval_does_not_improve() {
    for seed in [0, 4] {
        let dir = tempfile::tempdir().unwrap();
        let (t1, t2) = tasks(dir.path(), seed);
        let model = model_for(&[&t1, &t2], seed);
        let mut cfg = toy_cfg(seed, 20);
        cfg.cov.lambda = 0.0;
        let out = run_incremental(model, &[t1, t2], &cfg, None, &mut RunLog::new(), &mut |_| Ok(())).unwrap();
        assert!(out.rows[2].report.rank1 <= out.rows[0].report.rank1, "seed {seed}");
    }
}

#[test]
fn three_tasks_give_six_rows() {
    let dir = tempfile::tempdir().unwrap();
    let mut data = Vec::new();
    for (i, first) in [1, 101, 201].into_iter().enumerate() {
        let root = dir.path().join(format!("t{i}"));
        let mut spec = FixtureSpec::new(first..first + 4);
        spec.train_per_id = 4;
        write_fixture(&root, &spec).unwrap();
        data.push(TaskData::load(format!("t{i}"), &root, Layout::Market, i).unwrap());
    }
    let model = model_for(&data.iter().collect::<Vec<_>>(), 1);
    let mut cfg = toy_cfg(1, 1);
    cfg.batch.p = 4;
    let out = run_incremental(model, &data, &cfg, None, &mut RunLog::new(), &mut |_| Ok(())).unwrap();
    let order: Vec<(usize, &str)> = out.rows.iter().map(|r| (r.phase, r.task.as_str())).collect();
    assert_eq!(
        order,
        [(1, "t0"), (2, "t1"), (2, "t0"), (3, "t2"), (3, "t0"), (3, "t1")]
    );
    assert_eq!(out.model.phase(), 3);
    assert_eq!(out.phases.len(), 3);
}

#[test]
fn same_seed_gives_identical_logs() {
    let dir = tempfile::tempdir().unwrap();
    let (t1, _) = tasks(dir.path(), 2);
    let run = || {
        let mut model = model_for(&[&t1], 5);
        let mut log = RunLog::new();
        train_phase(
            &mut model,
            &PhasePlan::standard(1, t1.spec.clone(), 3),
            &t1,
            &toy_cfg(5, 3),
            &mut log,
            None,
        )
        .unwrap();
        (log.iterations, weights(&model))
    };
    let (a, wa) = run();
    let (b, wb) = run();
    assert_eq!(a.len(), 12);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!((x.iter, x.lr.to_bits()), (y.iter, y.lr.to_bits()));
    }
    assert_eq!(a, b);
    assert_eq!(wa, wb);
}

#[test]
fn resume_from_checkpoint_matches_uninterrupted_training() {
    let dir = tempfile::tempdir().unwrap();
    let (t1, t2) = tasks(&dir.path().join("data"), 3);
    let plan = PhasePlan::standard(1, t1.spec.clone(), 3);

    let mut cfg = toy_cfg(3, 3);
    let mut straight = model_for(&[&t1, &t2], 3);
    let mut full = RunLog::new();
    train_phase(&mut straight, &plan, &t1, &cfg, &mut full, None).unwrap();

    // Stop after one epoch, then reload and finish the remaining two.
    let ckpt_dir = dir.path().join("ckpt");
    cfg.checkpoint_dir = Some(ckpt_dir.clone());
    let mut partial = model_for(&[&t1, &t2], 3);
    let short = PhasePlan::standard(1, t1.spec.clone(), 1);
    train_phase(&mut partial, &short, &t1, &cfg, &mut RunLog::new(), None).unwrap();
    let ckpt = load_checkpoint(&checkpoint_path(&ckpt_dir, 1)).unwrap();
    let cursor = ckpt.cursor.unwrap();
    assert_eq!((cursor.phase, cursor.epoch), (1, 1));
    let mut resumed = ckpt.model;
    let resume = Resume {
        optimizer: ckpt.optimizer.unwrap(),
        epochs_done: cursor.epoch,
    };
    let mut tail = RunLog::new();
    cfg.checkpoint_dir = None;
    train_phase(&mut resumed, &plan, &t1, &cfg, &mut tail, Some(resume)).unwrap();

    let ipe = full.iterations.len() / 3;
    let rest = &full.iterations[ipe..];
    assert_eq!(tail.iterations.len(), rest.len());
    for (a, b) in rest.iter().zip(&tail.iterations) {
        assert_eq!(a.lr.to_bits(), b.lr.to_bits());
        assert_eq!(a.total.to_bits(), b.total.to_bits());
    }
    assert_eq!(weights(&straight), weights(&resumed));
    assert_eq!(resumed.phase(), 1);
}

#[test]
fn run_logs_are_written_as_json_lines() {
    let dir = tempfile::tempdir().unwrap();
    let (t1, t2) = tasks(&dir.path().join("data"), 4);
    let model = model_for(&[&t1, &t2], 4);
    let logs = dir.path().join("logs");
    let mut log = RunLog::with_files(&logs).unwrap();
    let mut cfg = toy_cfg(4, 1);
    cfg.iterations_per_epoch = Some(2);
    run_incremental(model, &[t1, t2], &cfg, None, &mut log, &mut |_| Ok(())).unwrap();
    drop(log);
    let iters = std::fs::read_to_string(logs.join(ITERATIONS_LOG)).unwrap();
    let lines: Vec<serde_json::Value> = iters.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 4);
    for (i, v) in lines.iter().enumerate() {
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys.len(), 5);
        for k in ["iter", "lr", "ce", "cov", "total"] {
            assert!(keys.contains(&k));
        }
        assert_eq!(v["iter"], i);
    }
    let evals = std::fs::read_to_string(logs.join(EVALS_LOG)).unwrap();
    let tasks: Vec<String> = evals
        .lines()
        .map(|l| {
            serde_json::from_str::<serde_json::Value>(l).unwrap()["task"]
                .as_str()
                .unwrap()
                .to_string()
        })
        .collect();
    assert_eq!(tasks, ["task1", "task2", "task1"]);
}

#[test]
fn ensemble_modes_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let (t1, t2) = tasks(dir.path(), 6);
    let model = model_for(&[&t1, &t2], 6);
    let mut cfg = toy_cfg(6, 1);
    cfg.iterations_per_epoch = Some(2);
    let mut out = run_incremental(
        model,
        &[t1.clone(), t2],
        &cfg,
        None,
        &mut RunLog::new(),
        &mut |_| Ok(()),
    )
    .unwrap();
    let plain = evaluate(&mut out.model, &t1, 0, &EvalOptions::default(), None).unwrap();
    assert_eq!(plain, out.rows[2].report);
    for mode in [EnsembleMode::BasePlusHead, EnsembleMode::AllHeads] {
        let opts = EvalOptions {
            ensemble: mode,
            ..EvalOptions::default()
        };
        let r = evaluate(&mut out.model, &t1, 0, &opts, None).unwrap();
        assert!((0.0..=1.0).contains(&r.rank1) && r.rank1 <= r.rank20);
    }
}
