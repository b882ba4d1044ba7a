//! End-to-end acceptance checks. Prints one line per criterion and exits
//! non-zero if any of them fails.

use std::collections::BTreeSet;
use std::fs;
use std::panic;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::Rng;
use tape_core::gradsuite;
use tape_core::mim::{init_stage1_state, random_mask, run_stage1, FmKind, Stage1Config, MASK_RATIO};
use tape_core::numeric::{Graph, Tensor};
use tape_core::params::{materialize, ParamStore};
use tape_core::peft::{audit, format_share, inject, thousands, AdapterRole, PeftConfig};
use tape_core::pipeline::{
    compare_runs, decode_checkpoint, encode_checkpoint, load_checkpoint, load_run, run_strategy, save_checkpoint,
    RunConfig, StrategyId, METRICS_FILE, STAGE1_CKPT,
};
use tape_core::seg::{compute_metrics, init_stage2_state, random_label_map, train_steps, SegModel, Stage2Config};
use tape_core::synthdata::{
    decode_sample, encode_sample, gen_phantom, load_sample, save_sample, Dataset, Pathology, Split, NUM_CLASSES,
};
use tape_core::train::rng_for;
use tape_core::vit::{encoder_specs, patchify, ViTConfig};
use tape_core::Error;

const MDICE_FLOOR: f64 = 0.80;
const SEEDS: [u64; 3] = [42, 43, 44];

type Check<'a> = Box<dyn FnOnce() -> Outcome + 'a>;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn within_budget(o: Outcome, took: Duration, budget: Option<Duration>) -> Outcome {
    match budget {
        Some(b) if took > b => outcome(false, format!("{}; over the {:.0} s budget", o.detail, b.as_secs_f64())),
        _ => o,
    }
}

fn tape_bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_tape"));
    c.env("RUST_LOG", "warn");
    c
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = tape_bin().args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "`tape {}` exited with {}: {}",
            args.join(" "),
            out.status,
            String::from_utf8_lossy(&out.stderr).lines().last().unwrap_or("")
        ))
    }
}

fn parameter_budget() -> Outcome {
    let get = |peft: PeftConfig| audit("vit-large", &peft).expect("vit-large audit");
    let lora = get(PeftConfig::lora(8));
    let vpt = get(PeftConfig::vpt(10));
    let adapter = get(PeftConfig::vit_adapter(8));
    let fft = get(PeftConfig::fft());
    let rel = |a: f64, b: f64| (a - b).abs() / b;
    let lora_m = (lora.trainable as f64 / 1e6 * 100.0).round() / 100.0;
    let checks = [
        lora.trainable == 3_145_728 && lora_m == 3.15,
        vpt.trainable == 10_240 && format_share(vpt.trainable, vpt.percent()) == "10,240 (0.003%)",
        rel(adapter.trainable as f64, 0.84e6) <= 0.005,
        rel(fft.total as f64, 329.81e6) <= 0.005,
    ];
    outcome(
        checks.iter().all(|&c| c),
        format!(
            "LoRA {} ({:.2}%), VPT {}, adapter {} ({:+.2}% vs 0.84M), FFT total {} ({:+.3}% vs 329.81M)",
            thousands(lora.trainable),
            lora.percent(),
            format_share(vpt.trainable, vpt.percent()),
            thousands(adapter.trainable),
            100.0 * (adapter.trainable as f64 / 0.84e6 - 1.0),
            thousands(fft.total),
            100.0 * (fft.total as f64 / 329.81e6 - 1.0),
        ),
    )
}

fn gradient_suite() -> Outcome {
    match gradsuite::run_all(&ViTConfig::vit_tiny(), 3) {
        Ok(cases) => {
            let worst = cases.iter().map(|c| c.report.max_rel_error).fold(0.0, f64::max);
            let failed: Vec<_> = cases
                .iter()
                .filter(|c| !c.passed())
                .map(|c| format!("{}/{}", c.suite, c.case))
                .collect();
            let suites: BTreeSet<_> = cases.iter().map(|c| c.suite).collect();
            outcome(
                failed.is_empty() && suites.len() == 3,
                format!(
                    "{} cases over {:?}, worst relative error {worst:.2e}{}",
                    cases.len(),
                    suites,
                    if failed.is_empty() {
                        String::new()
                    } else {
                        format!(", failing {failed:?}")
                    }
                ),
            )
        }
        Err(e) => outcome(false, e.to_string()),
    }
}

fn small_phantoms(n: u64) -> Vec<tape_core::synthdata::PhantomSample> {
    (0..n)
        .map(|i| gen_phantom(100 + i, Pathology::ALL[i as usize % 4], 64, 64).unwrap())
        .collect()
}

fn checkpoint_diff(before: &ParamStore<f32>, after: &ParamStore<f32>, dir: &Path, tag: &str) -> BTreeSet<String> {
    let a = dir.join(format!("{tag}.before.ckpt"));
    let b = dir.join(format!("{tag}.after.ckpt"));
    save_checkpoint(&a, before).unwrap();
    save_checkpoint(&b, after).unwrap();
    load_checkpoint(&a)
        .unwrap()
        .changed_names(&load_checkpoint(&b).unwrap())
        .into_iter()
        .collect()
}

fn freeze_invariance(dir: &Path) -> Outcome {
    let samples = small_phantoms(6);
    let refs: Vec<_> = samples.iter().collect();
    let mut mismatches = Vec::new();
    let mut checked = 0;
    for strategy in StrategyId::ALL {
        let cfg = RunConfig::new(strategy, "", "");
        let backbone = cfg.backbone().unwrap();
        let base = match cfg.stage1_peft() {
            None => backbone,
            Some(peft) => {
                let mut s1 = cfg.stage1_config(peft).unwrap();
                s1.epochs = 1;
                s1.batch_size = 2;
                let init = init_stage1_state(&s1, backbone).unwrap();
                let out = run_stage1(&refs, &refs[..2], &s1, init.clone()).unwrap();
                let changed = checkpoint_diff(&init, &out.state, dir, &format!("{strategy}-stage1"));
                let declared: BTreeSet<String> = s1.freeze_plan().trainable_names(&init);
                checked += 1;
                if changed != declared {
                    mismatches.push(format!("{strategy} stage I"));
                }
                out.state
            }
        };
        let mut s2 = cfg.stage2_config().unwrap();
        s2.batch_size = 2;
        let init = init_stage2_state(&s2, base).unwrap();
        let stepped = train_steps(&refs, &s2, init.clone(), 3).unwrap();
        let changed = checkpoint_diff(&init, &stepped, dir, &format!("{strategy}-stage2"));
        let declared = s2.freeze_plan().unwrap().trainable_names(&init);
        checked += 1;
        if changed != declared || declared.is_empty() {
            mismatches.push(format!(
                "{strategy} stage II ({} changed, {} declared)",
                changed.len(),
                declared.len()
            ));
        }
    }
    outcome(
        mismatches.is_empty(),
        if mismatches.is_empty() {
            format!("changed set equals trainable set in {checked} stage runs of 3 steps")
        } else {
            format!("mismatch in {mismatches:?}")
        },
    )
}

fn zero_init_identity() -> Outcome {
    let vit = ViTConfig::vit_tiny();
    let base_cfg = Stage2Config::new(vit.clone(), StrategyId::Stl, None).unwrap();
    let backbone = materialize(&encoder_specs(&vit), &mut rng_for(5, 0)).unwrap();
    let base = init_stage2_state(&base_cfg, backbone).unwrap();
    let logits = |cfg: &Stage2Config, state: &ParamStore<f32>, input: u64| -> Tensor<f32> {
        let mut rng = rng_for(input, 99);
        let mut image = || {
            let n = vit.image_size * vit.image_size;
            let img = Tensor::from_vec(
                &[1, vit.image_size, vit.image_size],
                (0..n).map(|_| rng.gen::<f32>()).collect(),
            );
            patchify(&img.unwrap(), vit.patch_size).unwrap()
        };
        let (oct, octa) = (image(), image());
        let model = SegModel::new(cfg).unwrap();
        let mut g = Graph::new();
        let b = state.bind(&mut g);
        let out = model.logits(&mut g, &b, &oct, Some(&octa)).unwrap();
        g.tensor(out)
    };
    let mut report = Vec::new();
    let mut pass = true;
    for peft in [PeftConfig::lora(8), PeftConfig::vit_adapter(8)] {
        let peft = peft.with_role(AdapterRole::Task);
        let mut cfg = base_cfg.clone();
        cfg.task_adapter = Some(peft.clone());
        let mut state = base.clone();
        inject(&mut state, &vit, &peft, &mut rng_for(6, 0)).unwrap();
        let identical = (0..10)
            .filter(|&i| logits(&base_cfg, &base, i).bit_eq(&logits(&cfg, &state, i)))
            .count();
        pass &= identical == 10;
        report.push(format!("{} {identical}/10", peft.kind));
    }
    outcome(pass, format!("bit-identical logits: {}", report.join(", ")))
}

fn masking_law() -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;
    for n in [4usize, 49, 196, 1024] {
        let a = random_mask(n, MASK_RATIO, 42).unwrap();
        let b = random_mask(n, MASK_RATIO, 42).unwrap();
        let expected = (0.75 * n as f64).floor() as usize;
        let mut all: Vec<usize> = a.masked.iter().chain(&a.visible).copied().collect();
        all.sort_unstable();
        let ok = a.masked.len() == expected && a == b && all == (0..n).collect::<Vec<_>>();
        pass &= ok;
        parts.push(format!("N={n}: {}", a.masked.len()));
    }
    outcome(pass, format!("masked counts {}, seed-reproducible", parts.join(", ")))
}

fn stage1_smoke(data: &Dataset) -> Outcome {
    let train = data.split(Split::Train);
    let test = data.split(Split::Test);
    let backbone = RunConfig::default().backbone().unwrap();
    let mut results = Vec::new();
    for peft in [PeftConfig::lora(8).with_role(AdapterRole::Domain), PeftConfig::fft()] {
        let cfg = Stage1Config::new(ViTConfig::vit_tiny(), FmKind::Generic, peft);
        let state = init_stage1_state(&cfg, backbone.clone()).unwrap();
        let out = run_stage1(&train, &test, &cfg, state).unwrap();
        let initial = out.loss_at(0, Split::Train).unwrap();
        let last = out.loss_at(cfg.epochs, Split::Train).unwrap();
        let test_loss = out.loss_at(cfg.epochs, Split::Test).unwrap();
        results.push((cfg.peft.kind.to_string(), initial, last, test_loss));
    }
    let halved = results.iter().all(|(_, i, l, _)| *l < 0.5 * i);
    let (lora_test, fft_test) = (results[0].3, results[1].3);
    let detail = results
        .iter()
        .map(|(k, i, l, t)| format!("{k}: train {i:.4} -> {l:.4} ({:.2}x), test {t:.4}", l / i))
        .collect::<Vec<_>>()
        .join("; ");
    outcome(
        halved && lora_test <= 1.2 * fft_test,
        format!("{detail}; LoRA/FFT test ratio {:.3}", lora_test / fft_test),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn stage2_smoke(data_dir: &Path, runs: &Path) -> Outcome {
    let tape42 = runs.join("tape-42");
    if let Err(e) = run_cli(&[
        "adapt",
        "--strategy",
        "tape",
        "--seed",
        "42",
        "--data",
        data_dir.to_str().unwrap(),
        "--out",
        tape42.to_str().unwrap(),
    ]) {
        return outcome(false, e);
    }
    let mut dirs = vec![tape42.clone()];
    let mut jobs: Vec<(StrategyId, u64)> = StrategyId::ALL
        .into_iter()
        .filter(|&s| s != StrategyId::Tape)
        .map(|s| (s, 42))
        .collect();
    jobs.extend([
        (StrategyId::Stl, 43),
        (StrategyId::Stl, 44),
        (StrategyId::Tape, 43),
        (StrategyId::Tape, 44),
    ]);
    for (strategy, seed) in jobs {
        let out = runs.join(format!("{}-{seed}", strategy.as_str()));
        let mut cfg = RunConfig::new(strategy, data_dir, &out);
        cfg.seed = seed;
        if strategy == StrategyId::Dlora {
            cfg.stage1_checkpoint = Some(tape42.join(STAGE1_CKPT));
        }
        if let Err(e) = run_strategy(&cfg, false) {
            return outcome(false, format!("{strategy} seed {seed}: {e}"));
        }
        dirs.push(out);
    }
    let records: Vec<_> = dirs.iter().map(|d| load_run(d).unwrap()).collect();
    match compare_runs(&dirs) {
        Ok(c) => eprint!("{}", c.render()),
        Err(e) => return outcome(false, e.to_string()),
    }
    let seed42: Vec<_> = records.iter().filter(|r| r.seed == 42).collect();
    let low: Vec<_> = seed42
        .iter()
        .filter(|r| r.overall_mdice() < MDICE_FLOOR)
        .map(|r| format!("{} {:.4}", r.strategy, r.overall_mdice()))
        .collect();
    let ordered_rows = records.iter().flat_map(|r| &r.rows).all(|row| row.mdice >= row.miou);
    let med = |s: StrategyId| {
        median(
            records
                .iter()
                .filter(|r| r.strategy == s)
                .map(|r| r.overall_mdice())
                .collect(),
        )
    };
    let (tape, stl) = (med(StrategyId::Tape), med(StrategyId::Stl));
    let worst = seed42.iter().map(|r| r.overall_mdice()).fold(1.0, f64::min);
    outcome(
        seed42.len() == 7 && low.is_empty() && tape >= stl && ordered_rows,
        format!(
            "7 strategies at seed 42, lowest overall mDice {worst:.4}{}; median over seeds {SEEDS:?}: TAPE {tape:.4} vs STL {stl:.4}; mDice >= mIoU in every row: {ordered_rows}",
            if low.is_empty() { String::new() } else { format!(" (below {MDICE_FLOOR}: {low:?})") }
        ),
    )
}

fn metric_identities() -> Outcome {
    let mut rng = rng_for(2024, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let len = rng.gen_range(1..=256);
        let pred = random_label_map(&mut rng, len, NUM_CLASSES);
        let gt = random_label_map(&mut rng, len, NUM_CLASSES);
        let m = compute_metrics(&pred, &gt, NUM_CLASSES).unwrap();
        for (d, i) in m.dice.iter().zip(&m.iou) {
            worst = worst.max((d - 2.0 * i / (1.0 + i)).abs());
        }
    }
    let gt = random_label_map(&mut rng, 4096, NUM_CLASSES);
    let perfect = compute_metrics(&gt, &gt, NUM_CLASSES).unwrap();
    let exact =
        perfect.mdice == 1.0 && perfect.miou == 1.0 && perfect.dice.iter().chain(&perfect.iou).all(|&v| v == 1.0);
    outcome(
        worst <= 1e-9 && exact,
        format!("max |dice - 2iou/(1+iou)| = {worst:.1e} over 1000 pairs; perfect prediction exactly 1.0: {exact}"),
    )
}

fn never_panics<T>(f: impl FnOnce() -> T + panic::UnwindSafe) -> bool {
    panic::catch_unwind(f).is_ok()
}

fn format_roundtrips(dir: &Path) -> Outcome {
    let mut store = RunConfig::default().backbone().unwrap();
    inject(
        &mut store,
        &ViTConfig::vit_tiny(),
        &PeftConfig::lora(8),
        &mut rng_for(3, 0),
    )
    .unwrap();
    let ckpt = dir.join("model.ckpt");
    save_checkpoint(&ckpt, &store).unwrap();
    let back = load_checkpoint(&ckpt).unwrap();
    let ckpt_ok = store.len() == back.len()
        && store
            .iter()
            .zip(back.iter())
            .all(|((n1, p1), (n2, p2))| n1 == n2 && p1.role == p2.role && p1.tensor.bit_eq(&p2.tensor))
        && fs::read(&ckpt).unwrap() == encode_checkpoint(&back);

    let sample = gen_phantom(77, Pathology::Rvo, 64, 64).unwrap();
    let img = dir.join("sample.timg");
    save_sample(&img, &sample).unwrap();
    let loaded = load_sample(&img).unwrap();
    let sample_ok = loaded.oct.bit_eq(&sample.oct)
        && loaded.octa.bit_eq(&sample.octa)
        && loaded.labels == sample.labels
        && encode_sample(&loaded) == fs::read(&img).unwrap();

    let mut bad_ckpt = fs::read(&ckpt).unwrap();
    bad_ckpt[0] ^= 0xFF;
    fs::write(&ckpt, &bad_ckpt).unwrap();
    let mut bad_img = fs::read(&img).unwrap();
    bad_img[0] ^= 0xFF;
    fs::write(&img, &bad_img).unwrap();
    let magic_ok = matches!(load_checkpoint(&ckpt), Err(Error::Format { .. }))
        && matches!(load_sample(&img), Err(Error::Format { .. }));

    let good_img = encode_sample(&sample);
    let good_ckpt = encode_checkpoint(&store);
    let mut rng = rng_for(8, 0);
    let mut robust = true;
    for _ in 0..200 {
        let mut b = good_img.clone();
        let at = rng.gen_range(0..b.len());
        b[at] = rng.gen();
        let cut = rng.gen_range(0..good_img.len());
        let ccut = rng.gen_range(0..good_ckpt.len());
        robust &= never_panics(|| decode_sample(&b, Path::new("mem")).map(drop))
            && never_panics(|| decode_sample(&good_img[..cut], Path::new("mem")).is_err())
            && never_panics(|| decode_checkpoint(&good_ckpt[..ccut], Path::new("mem")).is_err());
    }
    outcome(
        ckpt_ok && sample_ok && magic_ok && robust,
        format!(
            "checkpoint bitwise {ckpt_ok} ({} tensors), TAPEIMG1 bitwise {sample_ok}, bad magic is a format error {magic_ok}, 600 corrupted inputs without panic {robust}",
            store.len()
        ),
    )
}

fn determinism(data_dir: &Path, runs: &Path) -> Outcome {
    let again = runs.join("tape-42-again");
    if let Err(e) = run_cli(&[
        "adapt",
        "--strategy",
        "tape",
        "--seed",
        "42",
        "--data",
        data_dir.to_str().unwrap(),
        "--out",
        again.to_str().unwrap(),
    ]) {
        return outcome(false, e);
    }
    let first = fs::read(runs.join("tape-42").join(METRICS_FILE));
    let second = fs::read(again.join(METRICS_FILE));
    match (first, second) {
        (Ok(a), Ok(b)) => outcome(
            a == b && !a.is_empty(),
            format!(
                "metrics.csv of two runs: {} vs {} bytes, identical {}",
                a.len(),
                b.len(),
                a == b
            ),
        ),
        _ => outcome(false, "metrics.csv missing from one of the runs"),
    }
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().expect("temp dir");
    let data_dir = tmp.path().join("data");
    let runs = tmp.path().join("runs");
    let scratch = tmp.path().join("scratch");
    fs::create_dir_all(&scratch).unwrap();
    fs::create_dir_all(&runs).unwrap();

    let dataset = run_cli(&["gen-data", "--out", data_dir.to_str().unwrap(), "--seed", "42"])
        .map_err(|e| e.to_string())
        .and_then(|_| Dataset::open(&data_dir).map_err(|e| e.to_string()));
    let data = match dataset {
        Ok(d) => d,
        Err(e) => {
            println!("acceptance: could not build the phantom dataset: {e}");
            return ExitCode::FAILURE;
        }
    };
    println!(
        "dataset: {} phantoms, fingerprint {}",
        data.samples().len(),
        data.fingerprint
    );

    let secs = Duration::from_secs;
    let criteria: Vec<(&str, Option<Duration>, Check)> = vec![
        ("parameter budget", Some(secs(1)), Box::new(parameter_budget)),
        ("gradient suite", Some(secs(120)), Box::new(gradient_suite)),
        (
            "freeze invariance",
            Some(secs(60)),
            Box::new(|| freeze_invariance(&scratch)),
        ),
        ("zero-init identity", None, Box::new(zero_init_identity)),
        ("masking law", None, Box::new(masking_law)),
        ("stage I learning", Some(secs(600)), Box::new(|| stage1_smoke(&data))),
        (
            "stage II end to end",
            Some(secs(1800)),
            Box::new(|| stage2_smoke(&data_dir, &runs)),
        ),
        ("metric identities", None, Box::new(metric_identities)),
        ("format roundtrips", None, Box::new(|| format_roundtrips(&scratch))),
        ("determinism", None, Box::new(|| determinism(&data_dir, &runs))),
    ];
    let mut failed = 0;
    for (i, (name, budget, check)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let result = panic::catch_unwind(panic::AssertUnwindSafe(check)).unwrap_or_else(|_| outcome(false, "panicked"));
        let took = start.elapsed();
        let result = within_budget(result, took, budget);
        if !result.pass {
            failed += 1;
        }
        println!(
            "criterion {:>2} {:<20} {} [{:.1} s] {}",
            i + 1,
            name,
            if result.pass { "PASS" } else { "FAIL" },
            took.as_secs_f64(),
            result.detail
        );
    }
    println!("acceptance: {} of 10 criteria passed", 10 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
