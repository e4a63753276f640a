use tokenflow_core::harness::*;
use tokenflow_core::model::{load_checkpoint, Model, Task};
use tokenflow_core::params::ParamGroup;
use tokenflow_core::scene::{build_dataset, Dataset, Split};

fn tiny_run(task: &str) -> RunConfig {
    let mut cfg = RunConfig { model: ModelPreset::Tiny, scenarios: 4, frames: 16, ..RunConfig::default() };
    cfg.set("task", task).unwrap();
    cfg.train.epochs = 2;
    cfg.train.lr = 1e-3;
    cfg.train.batch = 4;
    cfg.train.train_limit = Some(24);
    cfg.train.val_limit = Some(12);
    cfg
}

fn dataset(cfg: &RunConfig) -> Dataset {
    let mut sc = scenario_config(cfg);
    sc.val_fraction = 0.25;
    build_dataset(&sc).unwrap()
}

#[test]
fn same_seed_gives_identical_metrics() {
    let cfg = tiny_run("beam");
    let ds = dataset(&cfg);
    let (_, a) = train_and_evaluate(&cfg, &ds, 3).unwrap();
    let (_, b) = train_and_evaluate(&cfg, &ds, 3).unwrap();
    assert_eq!(a.deterministic_json().unwrap(), b.deterministic_json().unwrap());
    let (_, c) = train_and_evaluate(&cfg, &ds, 4).unwrap();
    assert_ne!(a.deterministic_json().unwrap(), c.deterministic_json().unwrap());
}

#[test]
fn topk_scores_are_nested() {
    let cfg = tiny_run("beam");
    let ds = dataset(&cfg);
    let (_, rec) = train_and_evaluate(&cfg, &ds, 0).unwrap();
    let (t1, t3, t5) = (rec.eval.top1.unwrap(), rec.eval.top3.unwrap(), rec.eval.top5.unwrap());
    assert!(t1 <= t3 && t3 <= t5 && t5 <= 1.0, "{t1} {t3} {t5}");
    assert_eq!(rec.eval.samples, 12);
    assert!(rec.eval.accuracy.is_none());
}

#[test]
fn uniform_ratio_pins_keep_ratios() {
    let mut cfg = tiny_run("beam");
    cfg.train.ablation = Ablation::UniformRatio(1.0);
    let ds = dataset(&cfg);
    let (model, rec) = train_and_evaluate(&cfg, &ds, 0).unwrap();
    assert_eq!(model.keep_ratios(), vec![1.0; model.config.layers]);
    assert!(rec.epochs.iter().all(|e| e.penalty == 0.0));
    assert_eq!(rec.inference_tokens, vec![model.token_count(); model.config.layers]);
}

#[test]
fn penalty_pulls_ratios_toward_target() {
    let mut cfg = tiny_run("beam");
    cfg.train.epochs = 4;
    cfg.train.gamma_prime = 0.5;
    cfg.train.keep_ratio_lr = 2e-2;
    let ds = dataset(&cfg);
    let (model, rec) = train_and_evaluate(&cfg, &ds, 0).unwrap();
    let first = rec.epochs.first().unwrap().r_avg;
    let last = rec.epochs.last().unwrap().r_avg;
    assert!(last < first && last < 0.95, "r_avg {first} -> {last}");
    let r_min = model.config.r_min();
    assert!(model.keep_ratios().iter().all(|&r| (r_min..=1.0).contains(&r)));
}

#[test]
fn frozen_groups_do_not_move() {
    let cfg = tiny_run("beam");
    let ds = dataset(&cfg);
    for (ablation, group) in [
        (Ablation::FreezeTokenizers, ParamGroup::Tokenizer),
        (Ablation::RandomRouting, ParamGroup::Router),
    ] {
        let mut model = Model::new(cfg.model.config(cfg.task), 1).unwrap();
        let before: Vec<_> = model.params.iter().filter(|p| p.group == group).map(|p| p.tensor.data().to_vec()).collect();
        assert!(!before.is_empty());
        let settings = TrainSettings { ablation, ..cfg.train.clone() };
        let (train_idx, _) = split_indices(&ds, &settings);
        train_model(&mut model, &ds, &train_idx, &settings).unwrap();
        let after: Vec<_> = model.params.iter().filter(|p| p.group == group).map(|p| p.tensor.data().to_vec()).collect();
        assert_eq!(before, after, "{ablation}");
    }
}

#[test]
fn run_outputs_round_trip() {
    let cfg = tiny_run("beam");
    let ds = dataset(&cfg);
    let (model, rec) = train_and_evaluate(&cfg, &ds, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_run_outputs(dir.path(), &model, &rec).unwrap();
    for f in ["model.ckpt", "metrics.json", "keep_ratios.csv", "flops.json"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let csv = std::fs::read_to_string(dir.path().join("keep_ratios.csv")).unwrap();
    assert_eq!(csv.lines().count(), model.config.layers + 1);
    let loaded = load_checkpoint(&dir.path().join("model.ckpt")).unwrap();
    let frames = ds.window(0, &model.config.modalities);
    let a = model.forward_infer(&frames).unwrap();
    let b = loaded.forward_infer(&frames).unwrap();
    assert_eq!(a.data(), b.data());
    let metrics: MetricsRecord = serde_json::from_str(&std::fs::read_to_string(dir.path().join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics, rec);
}

#[test]
fn handover_reports_accuracy() {
    let cfg = tiny_run("handover");
    let ds = dataset(&cfg);
    let (_, rec) = train_and_evaluate(&cfg, &ds, 0).unwrap();
    assert!(matches!(rec.task, Task::Handover { .. }));
    let acc = rec.eval.accuracy.unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(rec.eval.top1.is_none());
}

#[test]
fn task_mismatch_is_refused() {
    let cfg = tiny_run("handover");
    let ds = dataset(&cfg);
    let mut model = Model::new(ModelPreset::Tiny.config(parse_task("beam").unwrap()), 0).unwrap();
    let idx = ds.indices(Split::Train);
    assert!(train_model(&mut model, &ds, &idx, &cfg.train).is_err());
    assert!(train_model(&mut model, &ds, &[], &cfg.train).is_err() || idx.is_empty());
}

#[test]
fn non_finite_parameters_abort_training() {
    let cfg = tiny_run("beam");
    let ds = dataset(&cfg);
    let mut model = Model::new(cfg.model.config(cfg.task), 0).unwrap();
    let head = model.params.iter_mut().find(|p| p.name.starts_with("head")).unwrap();
    head.tensor.data_mut()[0] = f64::NAN;
    let idx = ds.indices(Split::Train);
    let err = train_model(&mut model, &ds, &idx, &cfg.train).unwrap_err().to_string();
    assert!(err.contains("non-finite"), "{err}");
}

#[test]
fn budget_flops_sets_gamma_prime() {
    let cfg = tiny_run("beam");
    let model_cfg = cfg.model.config(cfg.task);
    let n = model_cfg.token_count();
    let full = tokenflow_core::flops::count_flops(&model_cfg, &vec![n; model_cfg.layers]).unwrap().total_flops as f64;
    let settings = TrainSettings { budget_flops: Some(0.25 * full), ..cfg.train.clone() };
    let g = resolve_gamma_prime(&model_cfg, &settings).unwrap();
    assert!((g - 0.5).abs() < 1e-12, "{g}");
    let settings = TrainSettings { budget_flops: None, gamma_prime: 0.7, ..cfg.train.clone() };
    assert_eq!(resolve_gamma_prime(&model_cfg, &settings).unwrap(), 0.7);
}

#[test]
fn ablation_covers_four_modes() {
    let mut cfg = tiny_run("beam");
    cfg.train.epochs = 1;
    cfg.seeds = 2;
    let ds = dataset(&cfg);
    let rows = ablate(&cfg, &ds, &ablation_modes(0.5)).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.top1.values.len() == 2));
    assert_eq!(ablation_csv(&rows).lines().count(), 5);
}
