//! Finite-difference gradient suites over the differentiable operators, the
//! full reconstruction loss and the full segmentation loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::mim::{init_stage1_state, mim_forward, mim_loss, random_mask, FmKind, Stage1Config, MASK_RATIO};
use crate::numeric::{grad_check, GradCheckReport, Graph, Tensor, Var};
use crate::params::{materialize, Bound, ParamStore, Role};
use crate::peft::PeftConfig;
use crate::pipeline::StrategyId;
use crate::seg::{init_stage2_state, SegHeadConfig, SegModel, Stage2Config};
use crate::synthdata::{gen_phantom, Pathology};
use crate::vit::{encoder_specs, patchify, ViTConfig};

/// Acceptance bound on the worst relative error.
pub const MAX_REL_ERROR: f64 = 1e-3;
/// Largest share of probes that may straddle a ReLU kink.
pub const MAX_SKIPPED_SHARE: f64 = 0.1;
pub const FD_STEP: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub suite: &'static str,
    pub case: String,
    pub report: GradCheckReport,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        let probed = self.report.coordinates + self.report.skipped;
        self.report.max_rel_error < MAX_REL_ERROR
            && self.report.coordinates > 0
            && (self.report.skipped as f64) <= MAX_SKIPPED_SHARE * probed as f64
    }
}

type Build = Box<dyn for<'g> Fn(&mut Graph<'g, f64>, &Bound) -> Result<Var>>;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape matches")
}

fn store(entries: Vec<(&str, Tensor<f64>)>) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (n, t) in entries {
        s.insert(n, Role::Head, t.with_requires_grad(true))
            .expect("distinct names");
    }
    s
}

/// Weighted sum of all coordinates with fixed uneven weights.
fn project(g: &mut Graph<'_, f64>, y: Var) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.4).collect();
    let wv = g.constant(Tensor::from_vec(&shape, w)?);
    let p = g.mul(y, wv)?;
    Ok(g.sum(p))
}

fn op_cases() -> Vec<(&'static str, ParamStore<f64>, Build)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let r = &mut rng;
    let mut cases: Vec<(&'static str, ParamStore<f64>, Build)> = Vec::new();
    cases.push((
        "matmul",
        store(vec![("a", random(&[3, 4], r)), ("b", random(&[4, 2], r))]),
        Box::new(|g, p| {
            let y = g.matmul(p.get("a")?, p.get("b")?)?;
            project(g, y)
        }),
    ));
    cases.push((
        "linear",
        store(vec![
            ("x", random(&[3, 4], r)),
            ("w", random(&[5, 4], r)),
            ("b", random(&[5], r)),
        ]),
        Box::new(|g, p| {
            let y = g.linear(p.get("x")?, p.get("w")?, Some(p.get("b")?))?;
            project(g, y)
        }),
    ));
    cases.push((
        "layer_norm",
        store(vec![
            ("x", random(&[4, 6], r)),
            ("g", random(&[6], r)),
            ("b", random(&[6], r)),
        ]),
        Box::new(|g, p| {
            let y = g.layer_norm(p.get("x")?, p.get("g")?, p.get("b")?, 1e-6)?;
            project(g, y)
        }),
    ));
    cases.push((
        "group_norm",
        store(vec![
            ("x", random(&[4, 3, 3], r)),
            ("g", random(&[4], r)),
            ("b", random(&[4], r)),
        ]),
        Box::new(|g, p| {
            let y = g.group_norm(p.get("x")?, 2, p.get("g")?, p.get("b")?, 1e-5)?;
            project(g, y)
        }),
    ));
    cases.push((
        "scaled_dot_attention",
        store(vec![
            ("q", random(&[2, 3, 4], r)),
            ("k", random(&[2, 5, 4], r)),
            ("v", random(&[2, 5, 4], r)),
        ]),
        Box::new(|g, p| {
            let o = g.scaled_dot_attention(p.get("q")?, p.get("k")?, p.get("v")?)?;
            project(g, o)
        }),
    ));
    cases.push((
        "gelu",
        store(vec![("x", random(&[3, 5], r))]),
        Box::new(|g, p| {
            let y = g.gelu(p.get("x")?);
            project(g, y)
        }),
    ));
    cases.push((
        "relu",
        store(vec![(
            "x",
            Tensor::from_f64(&[4], &[0.5, -0.3, 1.2, -2.0]).expect("4 values"),
        )]),
        Box::new(|g, p| {
            let y = g.relu(p.get("x")?);
            project(g, y)
        }),
    ));
    cases.push((
        "add_sub_mul_scale",
        store(vec![("a", random(&[3, 4], r)), ("b", random(&[3, 4], r))]),
        Box::new(|g, p| {
            let (a, b) = (p.get("a")?, p.get("b")?);
            let x = g.mul(a, b)?;
            let y = g.sub(x, b)?;
            let z = g.add(y, a)?;
            let z = g.scale(z, 1.7);
            let m = g.mean(z);
            let s = project(g, z)?;
            g.add(s, m)
        }),
    ));
    cases.push((
        "layout",
        store(vec![("a", random(&[2, 3, 4], r)), ("b", random(&[1, 3, 4], r))]),
        Box::new(|g, p| {
            let c = g.concat(&[p.get("a")?, p.get("b")?])?;
            let perm = g.permute(c, &[2, 0, 1])?;
            let m = g.reshape(perm, &[4, 9])?;
            let rows = g.gather_rows(m, &[3, 0, 3, 1])?;
            let n = g.narrow(rows, 1, 2)?;
            let t = g.transpose(n)?;
            project(g, t)
        }),
    ));
    cases.push((
        "conv2d",
        store(vec![
            ("x", random(&[2, 5, 4], r)),
            ("w", random(&[3, 2, 3, 3], r)),
            ("b", random(&[3], r)),
        ]),
        Box::new(|g, p| {
            let y = g.conv2d(p.get("x")?, p.get("w")?, 1, 1)?;
            let y = g.add_channel_bias(y, p.get("b")?)?;
            project(g, y)
        }),
    ));
    cases.push((
        "transposed_conv2d",
        store(vec![("x", random(&[3, 2, 3], r)), ("w", random(&[3, 2, 2, 2], r))]),
        Box::new(|g, p| {
            let y = g.transposed_conv2d(p.get("x")?, p.get("w")?, 2, 0)?;
            project(g, y)
        }),
    ));
    cases.push((
        "cross_entropy",
        store(vec![("l", random(&[4, 3, 2], r))]),
        Box::new(|g, p| g.cross_entropy(p.get("l")?, &[0, 3, 1, 1, 2, 0])),
    ));
    let target = random(&[4, 3], r);
    cases.push((
        "mse_masked",
        store(vec![("p", random(&[4, 3], r))]),
        Box::new(move |g, p| g.mse_masked(p.get("p")?, target.data(), &[true, false, false, true])),
    ));
    cases
}

/// Every differentiable operator on a small random input.
pub fn op_suite() -> Result<Vec<CaseResult>> {
    op_cases()
        .into_iter()
        .map(|(name, s, build)| {
            Ok(CaseResult {
                suite: "numeric",
                case: name.to_string(),
                report: grad_check(&s, FD_STEP, 64, build)?,
            })
        })
        .collect()
}

/// Shifts every value by a small random amount so zero-initialized
/// adapter factors carry gradient into the other factor.
fn perturb(state: &mut ParamStore<f32>, rng: &mut ChaCha8Rng) {
    for (_, p) in state.iter_mut() {
        p.tensor
            .data_mut()
            .iter_mut()
            .for_each(|v| *v += rng.gen_range(-0.05..0.05));
    }
}

/// Masked-reconstruction loss of `vit` with each adaptation kind, probing
/// `probes` coordinates per trainable tensor.
pub fn mim_suite(vit: &ViTConfig, probes: usize) -> Result<Vec<CaseResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let sample = gen_phantom(3, Pathology::Amd, vit.image_size, vit.image_size)?;
    let img = if vit.in_chans == 1 {
        sample.oct.cast::<f64>()
    } else {
        Tensor::ones(&[vit.in_chans, vit.image_size, vit.image_size])
    };
    let patches = patchify(&img, vit.patch_size)?;
    let plan = random_mask(vit.num_patches(), MASK_RATIO, 5)?;
    let kinds = [
        PeftConfig::fft(),
        PeftConfig::lora(4),
        PeftConfig::vit_adapter(4),
        PeftConfig::vpt(3),
    ];
    kinds
        .into_iter()
        .map(|peft| {
            let cfg = Stage1Config::new(vit.clone(), FmKind::Domain, peft.clone());
            let backbone = materialize(&encoder_specs(vit), &mut rng)?;
            let mut state = init_stage1_state(&cfg, backbone)?;
            perturb(&mut state, &mut rng);
            let state = state.cast::<f64>();
            let adapters = cfg.adapters()?;
            let report = grad_check(&state, FD_STEP, probes, |g, b| {
                let pred = mim_forward(g, b, vit, &adapters, &patches, &plan)?;
                mim_loss(g, pred, &patches, &plan, cfg.normalize_targets)
            })?;
            Ok(CaseResult {
                suite: "mim",
                case: peft.kind.short_name().to_string(),
                report,
            })
        })
        .collect()
}

/// Segmentation cross-entropy through frozen domain LoRA, trainable task
/// LoRA, both encoders, fusion and head, with every tensor made trainable.
pub fn seg_suite(vit: &ViTConfig, head: Option<SegHeadConfig>, probes: usize) -> Result<Vec<CaseResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let sample = gen_phantom(7, Pathology::Dr, vit.image_size, vit.image_size)?;
    let mut cfg = Stage2Config::new(vit.clone(), StrategyId::Tape, Some(PeftConfig::lora(4)))?;
    cfg.task_adapter = Some(PeftConfig::lora(4).with_role(crate::peft::AdapterRole::Task));
    if let Some(h) = head {
        cfg.head = h;
    }
    let mut base = materialize(&encoder_specs(vit), &mut rng)?;
    crate::peft::inject(
        &mut base,
        vit,
        cfg.domain_adapter.as_ref().expect("set above"),
        &mut rng,
    )?;
    let mut state = init_stage2_state(&cfg, base)?;
    perturb(&mut state, &mut rng);
    let mut state = state.cast::<f64>();
    state.set_all_trainable(true);
    let model = SegModel::new(&cfg)?;
    let oct = patchify(&sample.oct.cast::<f64>(), vit.patch_size)?;
    let octa = patchify(&sample.octa.cast::<f64>(), vit.patch_size)?;
    let labels = sample.labels_usize();
    let report = grad_check(&state, FD_STEP, probes, |g, b| {
        let logits = model.logits(g, b, &oct, Some(&octa))?;
        g.cross_entropy(logits, &labels)
    })?;
    Ok(vec![CaseResult {
        suite: "seg",
        case: "tape".to_string(),
        report,
    }])
}

/// Reduced geometry for the full-model suites: two blocks, small width.
pub fn small_vit() -> ViTConfig {
    ViTConfig {
        image_size: 32,
        patch_size: 8,
        embed_dim: 16,
        depth: 2,
        num_heads: 2,
        decoder_dim: 8,
        decoder_depth: 1,
        decoder_heads: 2,
        ..ViTConfig::vit_tiny()
    }
}

/// Operator suite plus both model suites on `vit`.
pub fn run_all(vit: &ViTConfig, probes: usize) -> Result<Vec<CaseResult>> {
    let mut out = op_suite()?;
    out.extend(mim_suite(vit, probes)?);
    out.extend(seg_suite(vit, None, probes)?);
    Ok(out)
}
