//! Masked-image-modeling domain adaptation (Stage I).

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{adamw_step, AdamWConfig, Graph, OptimState, Real, Tensor, Var};
use crate::params::{materialize, Bound, ParamStore, Role};
use crate::peft::{self, AdapterSet, FreezePlan, PeftConfig};
use crate::synthdata::{PhantomSample, Split};
use crate::train::{accumulate_sample, epoch_order, eval_threads, par_map, rng_for};
use crate::vit::{self, block_prefix, decoder_specs, encode, patchify, ViTConfig, LN_EPS};

pub const MASK_RATIO: f64 = 0.75;
/// Added to each patch's variance before standardizing targets.
pub const NORM_VAR_FLOOR: f64 = 1e-6;

/// Which patches of one image are hidden from the encoder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    pub num_patches: usize,
    /// Sorted.
    pub masked: Vec<usize>,
    /// Sorted complement of `masked`.
    pub visible: Vec<usize>,
    pub seed: u64,
}

impl MaskPlan {
    pub fn mask_flags(&self) -> Vec<bool> {
        let mut flags = vec![false; self.num_patches];
        for &i in &self.masked {
            flags[i] = true;
        }
        flags
    }
}

/// Masks `floor(ratio · n)` patches chosen by a seeded shuffle.
pub fn random_mask(n: usize, ratio: f64, seed: u64) -> Result<MaskPlan> {
    if n < 2 || !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!("mask ratio {ratio} over {n} patches")));
    }
    let count = (ratio * n as f64).floor() as usize;
    if count == 0 || count == n {
        return Err(Error::InvalidArgument(format!(
            "ratio {ratio} masks {count} of {n} patches"
        )));
    }
    let order = epoch_order(n, &mut rng_for(seed, 0));
    let mut masked = order[..count].to_vec();
    let mut visible = order[count..].to_vec();
    masked.sort_unstable();
    visible.sort_unstable();
    Ok(MaskPlan {
        num_patches: n,
        masked,
        visible,
        seed,
    })
}

/// Kind of foundation model being adapted. A generic model reconstructs
/// both modalities, a domain-specific one only OCTA.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FmKind {
    #[default]
    Generic,
    Domain,
}

impl std::str::FromStr for FmKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "generic" => Ok(FmKind::Generic),
            "domain" => Ok(FmKind::Domain),
            other => Err(Error::Config(format!(
                "unknown foundation-model kind `{other}` (expected generic or domain)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Modality {
    Oct,
    Octa,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Oct => "OCT",
            Modality::Octa => "OCTA",
        }
    }

    pub fn image(self, s: &PhantomSample) -> &Tensor<f32> {
        match self {
            Modality::Oct => &s.oct,
            Modality::Octa => &s.octa,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StagePlan {
    pub fm_kind: FmKind,
    pub targets: Vec<Modality>,
}

impl StagePlan {
    pub fn new(fm_kind: FmKind) -> Self {
        let targets = match fm_kind {
            FmKind::Generic => vec![Modality::Oct, Modality::Octa],
            FmKind::Domain => vec![Modality::Octa],
        };
        StagePlan { fm_kind, targets }
    }
}

/// Rows `idx` of a 2-D tensor.
fn take_rows<T: Real>(t: &Tensor<T>, idx: &[usize]) -> Result<Tensor<T>> {
    let cols = t.shape()[1];
    let mut out = Vec::with_capacity(idx.len() * cols);
    for &i in idx {
        out.extend_from_slice(&t.data()[i * cols..(i + 1) * cols]);
    }
    Tensor::from_vec(&[idx.len(), cols], out)
}

/// Reconstructs every patch of an image from its visible ones.
///
/// `patches: [N×p²C]` is the full patchified image; only the rows listed
/// in `plan.visible` reach the encoder. Prompt tokens are dropped after
/// encoding, the class token passes through the decoder, and masked
/// positions are filled with the learned mask token. Returns `[N×p²C]`.
pub fn mim_forward<T: Real>(
    g: &mut Graph<'_, T>,
    b: &Bound,
    cfg: &ViTConfig,
    adapters: &AdapterSet,
    patches: &Tensor<T>,
    plan: &MaskPlan,
) -> Result<Var> {
    let n = cfg.num_patches();
    if plan.num_patches != n || patches.shape() != [n, cfg.patch_dim()] {
        return Err(Error::shape(
            "mim_forward",
            format!(
                "plan over {} patches, image patches {:?}, model expects [{n}, {}]",
                plan.num_patches,
                patches.shape(),
                cfg.patch_dim()
            ),
        ));
    }
    let vis = g.constant(take_rows(patches, &plan.visible)?);
    let enc = encode(g, b, cfg, adapters, vis, &plan.visible)?;
    let n_vis = plan.visible.len();
    let seq_len = n_vis + usize::from(enc.has_cls);
    let tokens = g.narrow(enc.tokens, enc.num_prompts, seq_len)?;
    let x = g.linear(
        tokens,
        b.get("decoder.embed.weight")?,
        Some(b.get("decoder.embed.bias")?),
    )?;
    let (cls, vis_x) = if enc.has_cls {
        (Some(g.narrow(x, 0, 1)?), g.narrow(x, 1, n_vis)?)
    } else {
        (None, x)
    };

    let mask_token = g.reshape(b.get("decoder.mask_token")?, &[1, cfg.decoder_dim])?;
    let pool = g.concat(&[vis_x, mask_token])?;
    let mut slot = vec![n_vis; n];
    for (k, &i) in plan.visible.iter().enumerate() {
        slot[i] = k;
    }
    let mut full = g.gather_rows(pool, &slot)?;
    if let Some(cls) = cls {
        full = g.concat(&[cls, full])?;
    }
    full = g.add(full, b.get("decoder.pos_embed")?)?;

    let none = AdapterSet::default();
    for i in 0..cfg.decoder_depth {
        full = vit::block_forward(g, b, &block_prefix("decoder", i), i, full, cfg.decoder_heads, &none)?;
    }
    let full = g.layer_norm(full, b.get("decoder.norm.weight")?, b.get("decoder.norm.bias")?, LN_EPS)?;
    let pred = g.linear(full, b.get("decoder.pred.weight")?, Some(b.get("decoder.pred.bias")?))?;
    if cls.is_some() {
        g.narrow(pred, 1, n)
    } else {
        Ok(pred)
    }
}

/// Each row standardized to zero mean and unit variance
/// (`(x − μ) / √(σ² + 1e-6)`).
pub fn normalize_patches<T: Real>(patches: &Tensor<T>) -> Vec<T> {
    let cols = patches.shape()[1];
    let floor = T::from_f64_lossy(NORM_VAR_FLOOR);
    let n = T::from_usize(cols).expect("width fits");
    let mut out = Vec::with_capacity(patches.numel());
    for row in patches.data().chunks_exact(cols) {
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = T::one() / (var + floor).sqrt();
        out.extend(row.iter().map(|&v| (v - mean) * inv));
    }
    out
}

/// Mean squared error over the masked patches only.
pub fn mim_loss<T: Real>(
    g: &mut Graph<'_, T>,
    pred: Var,
    patches: &Tensor<T>,
    plan: &MaskPlan,
    normalize: bool,
) -> Result<Var> {
    if patches.shape().len() != 2 || patches.shape()[0] != plan.num_patches {
        return Err(Error::shape(
            "mim_loss",
            format!("patches {:?} for a plan over {}", patches.shape(), plan.num_patches),
        ));
    }
    if normalize {
        g.mse_masked(pred, &normalize_patches(patches), &plan.mask_flags())
    } else {
        g.mse_masked(pred, patches.data(), &plan.mask_flags())
    }
}

// ---------------------------------------------------------------- training

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Config {
    pub vit: ViTConfig,
    pub fm_kind: FmKind,
    /// Domain adapter, or FFT of the whole encoder.
    pub peft: PeftConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub mask_ratio: f64,
    pub normalize_targets: bool,
    pub optim: AdamWConfig,
    pub seed: u64,
    /// Fixes the masks used for reported losses.
    pub eval_seed: u64,
}

impl Stage1Config {
    pub fn new(vit: ViTConfig, fm_kind: FmKind, peft: PeftConfig) -> Self {
        Stage1Config {
            vit,
            fm_kind,
            peft,
            epochs: 20,
            batch_size: 16,
            mask_ratio: MASK_RATIO,
            normalize_targets: true,
            optim: AdamWConfig::reconstruction(),
            seed: 42,
            eval_seed: 0,
        }
    }

    pub fn freeze_plan(&self) -> FreezePlan {
        if self.peft.is_fft() {
            FreezePlan::new([Role::Backbone, Role::Decoder])
        } else {
            FreezePlan::new([self.peft.role.param_role(), Role::Decoder])
        }
    }

    pub fn adapters(&self) -> Result<AdapterSet> {
        AdapterSet::new([self.peft.clone()])
    }
}

/// One point of a loss curve. `modality` is `OCT`, `OCTA` or `ALL`
/// (mean over the reconstructed modalities).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub split: Split,
    pub modality: String,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct Stage1Output {
    /// Backbone, decoder and domain adapter; everything frozen.
    pub state: ParamStore<f32>,
    pub curve: Vec<LossRecord>,
    /// How many reconstructions used an OCT image as target.
    pub oct_target_uses: usize,
}

impl Stage1Output {
    pub fn loss_at(&self, epoch: usize, split: Split) -> Option<f64> {
        self.curve
            .iter()
            .find(|r| r.epoch == epoch && r.split == split && r.modality == "ALL")
            .map(|r| r.loss)
    }
}

/// Adds the decoder and the configured adapter to a backbone.
pub fn init_stage1_state(cfg: &Stage1Config, backbone: ParamStore<f32>) -> Result<ParamStore<f32>> {
    cfg.vit.validate()?;
    let mut state = backbone;
    state.extend(materialize(&decoder_specs(&cfg.vit), &mut rng_for(cfg.seed, 11))?)?;
    if !cfg.peft.is_fft() {
        peft::inject(&mut state, &cfg.vit, &cfg.peft, &mut rng_for(cfg.seed, 12))?;
    }
    cfg.freeze_plan().apply(&mut state);
    Ok(state)
}

struct Prepared {
    patches: Vec<Tensor<f32>>,
}

fn prepare(samples: &[&PhantomSample], plan: &StagePlan, p: usize) -> Result<Vec<Prepared>> {
    samples
        .iter()
        .map(|s| {
            let patches = plan
                .targets
                .iter()
                .map(|m| patchify(m.image(s), p))
                .collect::<Result<_>>()?;
            Ok(Prepared { patches })
        })
        .collect()
}

fn eval_mask_seed(eval_seed: u64, index: usize) -> u64 {
    rng_for(eval_seed, 1 << 32 | index as u64).gen()
}

/// Mean masked reconstruction loss per target modality under fixed masks.
fn evaluate(
    state: &ParamStore<f32>,
    adapters: &AdapterSet,
    cfg: &Stage1Config,
    data: &[Prepared],
    n_targets: usize,
) -> Result<Vec<f64>> {
    let n = cfg.vit.num_patches();
    let indexed: Vec<(usize, &Prepared)> = data.iter().enumerate().collect();
    let per_sample = par_map(&indexed, eval_threads(), |&(i, item)| -> Result<Vec<f64>> {
        let plan = random_mask(n, cfg.mask_ratio, eval_mask_seed(cfg.eval_seed, i))?;
        item.patches
            .iter()
            .map(|patches| {
                let mut g = Graph::new();
                let b = state.bind(&mut g);
                let pred = mim_forward(&mut g, &b, &cfg.vit, adapters, patches, &plan)?;
                let loss = mim_loss(&mut g, pred, patches, &plan, cfg.normalize_targets)?;
                Ok(g.scalar(loss) as f64)
            })
            .collect()
    });
    let mut sums = vec![0.0; n_targets];
    for r in per_sample {
        for (s, v) in sums.iter_mut().zip(r?) {
            *s += v;
        }
    }
    Ok(sums.into_iter().map(|s| s / data.len().max(1) as f64).collect())
}

/// Trains the reconstruction decoder plus either the domain adapter or
/// the whole encoder, starting from `state` as built by
/// [`init_stage1_state`]. Losses are recorded on both splits before
/// training (epoch 0) and after every epoch.
pub fn run_stage1(
    train: &[&PhantomSample],
    test: &[&PhantomSample],
    cfg: &Stage1Config,
    mut state: ParamStore<f32>,
) -> Result<Stage1Output> {
    if train.is_empty() {
        return Err(Error::Dataset("no training images for reconstruction".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be ≥ 1".into()));
    }
    let plan = StagePlan::new(cfg.fm_kind);
    let adapters = cfg.adapters()?;
    let p = cfg.vit.patch_size;
    let train_data = prepare(train, &plan, p)?;
    let test_data = prepare(test, &plan, p)?;
    let n = cfg.vit.num_patches();
    let oct_per_image = usize::from(plan.targets.contains(&Modality::Oct));
    let mut oct_target_uses = 0;
    let mut curve = Vec::new();

    let mut record = |epoch: usize, state: &ParamStore<f32>, uses: &mut usize| -> Result<()> {
        for (split, data) in [(Split::Train, &train_data), (Split::Test, &test_data)] {
            if data.is_empty() {
                continue;
            }
            let losses = evaluate(state, &adapters, cfg, data, plan.targets.len())?;
            *uses += oct_per_image * data.len();
            for (m, &l) in plan.targets.iter().zip(&losses) {
                curve.push(LossRecord {
                    epoch,
                    split,
                    modality: m.as_str().to_string(),
                    loss: l,
                });
            }
            curve.push(LossRecord {
                epoch,
                split,
                modality: "ALL".to_string(),
                loss: losses.iter().sum::<f64>() / losses.len() as f64,
            });
        }
        Ok(())
    };

    record(0, &state, &mut oct_target_uses)?;
    let mut optim = OptimState::new(cfg.optim);
    let mut order_rng = rng_for(cfg.seed, 13);
    let mut mask_rng = rng_for(cfg.seed, 14);
    for epoch in 1..=cfg.epochs {
        let order = epoch_order(train_data.len(), &mut order_rng);
        for batch in order.chunks(cfg.batch_size) {
            let scale = 1.0 / (batch.len() * plan.targets.len()) as f32;
            for &i in batch {
                let mask = random_mask(n, cfg.mask_ratio, mask_rng.gen())?;
                for patches in &train_data[i].patches {
                    accumulate_sample(&mut state, scale, |g, b| {
                        let pred = mim_forward(g, b, &cfg.vit, &adapters, patches, &mask)?;
                        mim_loss(g, pred, patches, &mask, cfg.normalize_targets)
                    })?;
                }
                oct_target_uses += oct_per_image;
            }
            adamw_step(&mut state, &mut optim)?;
        }
        log::info!("stage I epoch {epoch}/{} done", cfg.epochs);
        record(epoch, &state, &mut oct_target_uses)?;
    }
    state.set_all_trainable(false);
    Ok(Stage1Output {
        state,
        curve,
        oct_target_uses,
    })
}

/// `epoch,split,modality,loss` with a header row.
pub fn losses_csv(curve: &[LossRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in curve {
        w.serialize(r).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}
