//! Library-level run of both stages on a small dataset.

use std::fs;
use std::path::Path;

use tape_core::params::Role;
use tape_core::pipeline::{
    compare_runs, evaluate_run, load_checkpoint, load_trained_run, run_pretrain, run_strategy, summary_field,
    RunConfig, StrategyId, CONFIG_FILE, LOSSES_FILE, METRICS_FILE, STAGE1_CKPT, STAGE2_CKPT, SUMMARY_FILE,
};
use tape_core::seg::predict;
use tape_core::synthdata::{gen_dataset, Dataset, DatasetSpec, Split};
use tape_core::Error;

fn quick(strategy: StrategyId, data: &Path, out: &Path) -> RunConfig {
    let mut cfg = RunConfig::new(strategy, data, out);
    cfg.stage1_epochs = 1;
    cfg.stage2_epochs = 2;
    cfg
}

#[test]
fn pretrain_then_adapt_from_the_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let fp = gen_dataset(&data, &DatasetSpec::new(5, 1)).unwrap();

    let pre = run_pretrain(&quick(StrategyId::Tape, &data, &tmp.path().join("pre")), false).unwrap();
    assert_eq!(pre.fingerprint, fp);
    let stage1 = load_checkpoint(&pre.dir.join(STAGE1_CKPT)).unwrap();
    assert!(stage1.iter().any(|(_, p)| p.role == Role::DomainAdapter));
    assert!(stage1.iter().any(|(_, p)| p.role == Role::Decoder));
    assert!(fs::read_to_string(pre.dir.join(LOSSES_FILE))
        .unwrap()
        .starts_with("stage,epoch,split,metric,value"));

    let mut cfg = quick(StrategyId::Tape, &data, &tmp.path().join("tape"));
    cfg.stage1_checkpoint = Some(pre.dir.join(STAGE1_CKPT));
    let run = run_strategy(&cfg, false).unwrap();
    assert!(run.stage1.is_none());
    for f in [
        CONFIG_FILE,
        STAGE1_CKPT,
        STAGE2_CKPT,
        LOSSES_FILE,
        METRICS_FILE,
        SUMMARY_FILE,
    ] {
        assert!(run.dir.join(f).is_file(), "{f}");
    }
    assert_eq!(summary_field(&run.dir, "fingerprint").unwrap(), fp);

    let loaded = load_trained_run(&run.dir).unwrap();
    assert_eq!(loaded.config, cfg);
    let domain: Vec<_> = loaded
        .state
        .iter()
        .filter(|(_, p)| p.role == Role::DomainAdapter)
        .collect();
    assert!(!domain.is_empty());
    for (name, p) in domain {
        assert!(
            p.tensor.bit_eq(stage1.get(name).unwrap()),
            "{name} moved during Stage II"
        );
    }
    assert!(loaded.state.iter().all(|(_, p)| p.role != Role::Decoder));

    let (_, rows) = evaluate_run(&run.dir, None, Split::Test).unwrap();
    assert_eq!(rows, run.metrics);

    let ds = Dataset::open(&data).unwrap();
    let sample = ds.split(Split::Test)[0];
    let a = predict(&loaded.stage2, &loaded.state, sample).unwrap();
    let b = predict(&loaded.stage2, &loaded.state, sample).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), sample.labels.len());
}

#[test]
fn compare_refuses_runs_on_different_data() {
    let tmp = tempfile::tempdir().unwrap();
    let (d1, d2) = (tmp.path().join("d1"), tmp.path().join("d2"));
    gen_dataset(&d1, &DatasetSpec::new(5, 1)).unwrap();
    gen_dataset(&d2, &DatasetSpec::new(5, 2)).unwrap();

    let mut dirs = Vec::new();
    for (i, strategy) in [StrategyId::Stl, StrategyId::StlOct].into_iter().enumerate() {
        let out = tmp.path().join(format!("run{i}"));
        run_strategy(&quick(strategy, &d1, &out), false).unwrap();
        dirs.push(out);
    }
    let table = compare_runs(&dirs).unwrap();
    assert_eq!(table.runs.len(), 2);
    assert!(table.runs[0].overall_mdice() >= table.runs[1].overall_mdice());
    assert_eq!(table.cell_count(), 20);

    let stray = tmp.path().join("stray");
    run_strategy(&quick(StrategyId::Stl, &d2, &stray), false).unwrap();
    dirs.push(stray);
    assert!(matches!(compare_runs(&dirs), Err(Error::Dataset(_))));
}

#[test]
fn existing_output_is_not_overwritten_without_force() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_dataset(&data, &DatasetSpec::new(5, 3)).unwrap();
    let out = tmp.path().join("run");
    let mut cfg = quick(StrategyId::StlOct, &data, &out);
    cfg.stage2_epochs = 0;
    run_strategy(&cfg, false).unwrap();
    let before = fs::read(out.join(METRICS_FILE)).unwrap();
    assert!(run_strategy(&cfg, false).is_err());
    run_strategy(&cfg, true).unwrap();
    assert_eq!(fs::read(out.join(METRICS_FILE)).unwrap(), before);
}
