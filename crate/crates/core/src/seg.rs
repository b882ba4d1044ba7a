//! Segmentation (Stage II): token-to-feature-map reshaping, modality
//! fusion, the convolutional head, cross-entropy training and Dice/IoU
//! evaluation.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{adamw_step, AdamWConfig, Graph, OptimState, Real, Tensor, Var};
use crate::params::{materialize, Bound, Init, ParamSpec, ParamStore, Role};
use crate::peft::{self, freeze_plan, AdapterRole, AdapterSet, FreezePlan, PeftConfig, Stage};
use crate::pipeline::StrategyId;
use crate::synthdata::{PhantomSample, NUM_CLASSES};
use crate::train::{accumulate_sample, epoch_order, eval_threads, par_map, rng_for};
use crate::vit::{encode, patchify, ViTConfig};

pub const GN_EPS: f64 = 1e-5;
pub const GN_GROUPS: usize = 8;

/// Head layout: a 1×1 stem from the fused channels to `widths[0]`, then per
/// stage a residual block at `widths[i]` and a ×2 transposed convolution
/// to `widths[i + 1]`, then a 1×1 classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegHeadConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    /// One entry per stage plus the classifier input width.
    pub widths: Vec<usize>,
}

impl SegHeadConfig {
    /// Head for an encoder: `2d` fused channels, halving width per stage,
    /// `log₂(patch)` stages.
    pub fn for_vit(vit: &ViTConfig, num_classes: usize) -> Result<Self> {
        let p = vit.patch_size;
        if !p.is_power_of_two() || p < 2 {
            return Err(Error::Config(format!("patch size {p} is not a power of two ≥ 2")));
        }
        let stages = p.trailing_zeros() as usize;
        let first = 2 * vit.embed_dim;
        let widths = (0..=stages).map(|i| (first >> i).max(GN_GROUPS)).collect();
        let cfg = SegHeadConfig {
            in_channels: first,
            num_classes,
            widths,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn stages(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn upsampling(&self) -> usize {
        1 << self.stages()
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 || self.num_classes < 2 || self.in_channels == 0 {
            return Err(Error::Config(format!("degenerate head {self:?}")));
        }
        if let Some(w) = self.widths[..self.stages()].iter().find(|&&w| w % GN_GROUPS != 0) {
            return Err(Error::Config(format!(
                "head width {w} not divisible into {GN_GROUPS} norm groups"
            )));
        }
        Ok(())
    }
}

fn conv_specs(specs: &mut Vec<ParamSpec>, name: &str, cin: usize, cout: usize, k: usize) {
    specs.push(ParamSpec::new(
        format!("{name}.weight"),
        Role::Head,
        &[cout, cin, k, k],
        Init::KaimingNormal { fan_in: cin * k * k },
    ));
    specs.push(ParamSpec::new(format!("{name}.bias"), Role::Head, &[cout], Init::Zeros));
}

pub fn head_specs(cfg: &SegHeadConfig) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    conv_specs(&mut specs, "head.stem", cfg.in_channels, cfg.widths[0], 1);
    for i in 0..cfg.stages() {
        let (c, next) = (cfg.widths[i], cfg.widths[i + 1]);
        let s = format!("head.stages.{i}");
        conv_specs(&mut specs, &format!("{s}.conv1"), c, c, 3);
        specs.push(ParamSpec::new(format!("{s}.norm.weight"), Role::Head, &[c], Init::Ones));
        specs.push(ParamSpec::new(format!("{s}.norm.bias"), Role::Head, &[c], Init::Zeros));
        conv_specs(&mut specs, &format!("{s}.conv2"), c, c, 3);
        specs.push(ParamSpec::new(
            format!("{s}.up.weight"),
            Role::Head,
            &[c, next, 2, 2],
            Init::KaimingNormal { fan_in: c },
        ));
        specs.push(ParamSpec::new(format!("{s}.up.bias"), Role::Head, &[next], Init::Zeros));
    }
    let last = *cfg.widths.last().expect("validated");
    specs.push(ParamSpec::new(
        "head.classifier.weight",
        Role::Head,
        &[cfg.num_classes, last, 1, 1],
        Init::XavierUniform {
            fan_in: last,
            fan_out: cfg.num_classes,
        },
    ));
    specs.push(ParamSpec::new(
        "head.classifier.bias",
        Role::Head,
        &[cfg.num_classes],
        Init::Zeros,
    ));
    specs
}

/// Drops the first `prefix` tokens of `tokens: [n×d]` and lays the rest
/// out as `[d×h×w]`, token `i` landing at row `i / w`, column `i % w`.
pub fn seq_to_spatial<T: Real>(g: &mut Graph<'_, T>, tokens: Var, prefix: usize, grid: (usize, usize)) -> Result<Var> {
    let s = g.shape(tokens).to_vec();
    let (h, w) = grid;
    if s.len() != 2 || s[0] != prefix + h * w {
        return Err(Error::shape(
            "seq_to_spatial",
            format!("tokens {s:?} minus {prefix} leading tokens for a {h}×{w} grid"),
        ));
    }
    let body = if prefix > 0 {
        g.narrow(tokens, prefix, h * w)?
    } else {
        tokens
    };
    let t = g.transpose(body)?;
    g.reshape(t, &[s[1], h, w])
}

/// Inverse of [`seq_to_spatial`] without prefix: `[d×h×w]` → `[hw×d]`.
pub fn spatial_to_seq<T: Real>(g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 {
        return Err(Error::shape("spatial_to_seq", format!("input {s:?}")));
    }
    let flat = g.reshape(x, &[s[0], s[1] * s[2]])?;
    g.transpose(flat)
}

/// OCT channels first, OCTA channels second.
pub fn fuse_concat<T: Real>(g: &mut Graph<'_, T>, f_oct: Var, f_octa: Var) -> Result<Var> {
    let (a, b) = (g.shape(f_oct).to_vec(), g.shape(f_octa).to_vec());
    if a.len() != 3 || b.len() != 3 || a[1..] != b[1..] {
        return Err(Error::shape("fuse_concat", format!("{a:?} with {b:?}")));
    }
    g.concat(&[f_oct, f_octa])
}

fn conv<T: Real>(g: &mut Graph<'_, T>, b: &Bound, name: &str, x: Var, padding: usize) -> Result<Var> {
    let y = g.conv2d(x, b.get(&format!("{name}.weight"))?, 1, padding)?;
    g.add_channel_bias(y, b.get(&format!("{name}.bias"))?)
}

/// Logits `[C×H×W]` from fused features `[2d×h×w]`.
pub fn seg_head_forward<T: Real>(g: &mut Graph<'_, T>, b: &Bound, cfg: &SegHeadConfig, fused: Var) -> Result<Var> {
    let s = g.shape(fused).to_vec();
    if s.len() != 3 || s[0] != cfg.in_channels {
        return Err(Error::shape(
            "seg_head_forward",
            format!("features {s:?} for a head expecting {} channels", cfg.in_channels),
        ));
    }
    let mut x = conv(g, b, "head.stem", fused, 0)?;
    for i in 0..cfg.stages() {
        let s = format!("head.stages.{i}");
        let h = conv(g, b, &format!("{s}.conv1"), x, 1)?;
        let h = g.group_norm(
            h,
            GN_GROUPS,
            b.get(&format!("{s}.norm.weight"))?,
            b.get(&format!("{s}.norm.bias"))?,
            GN_EPS,
        )?;
        let h = g.relu(h);
        let h = conv(g, b, &format!("{s}.conv2"), h, 1)?;
        x = g.add(x, h)?;
        let up = g.transposed_conv2d(x, b.get(&format!("{s}.up.weight"))?, 2, 0)?;
        let up = g.add_channel_bias(up, b.get(&format!("{s}.up.bias"))?)?;
        x = g.relu(up);
    }
    conv(g, b, "head.classifier", x, 0)
}

/// Per-pixel argmax over the class axis of `[C×H×W]` logits.
pub fn argmax_labels<T: Real>(logits: &Tensor<T>) -> Vec<u8> {
    let c = logits.shape()[0];
    let n = logits.numel() / c;
    let d = logits.data();
    (0..n)
        .map(|i| {
            let mut best = 0;
            for k in 1..c {
                if d[k * n + i] > d[best * n + i] {
                    best = k;
                }
            }
            best as u8
        })
        .collect()
}

// ---------------------------------------------------------------------- metrics

/// Per-class overlap scores of one label map; index 0 is background.
#[derive(Clone, Debug, PartialEq)]
pub struct SegMetrics {
    pub dice: Vec<f64>,
    pub iou: Vec<f64>,
    /// Mean over foreground classes.
    pub mdice: f64,
    pub miou: f64,
}

/// Dice and IoU per class. A class absent from both maps scores 1.
pub fn compute_metrics(pred: &[u8], gt: &[u8], classes: usize) -> Result<SegMetrics> {
    if pred.len() != gt.len() {
        return Err(Error::shape(
            "compute_metrics",
            format!("{} predicted vs {} reference pixels", pred.len(), gt.len()),
        ));
    }
    if classes < 2 {
        return Err(Error::InvalidArgument(
            "need a background and a foreground class".into(),
        ));
    }
    let mut p = vec![0u64; classes];
    let mut g = vec![0u64; classes];
    let mut both = vec![0u64; classes];
    for (&a, &b) in pred.iter().zip(gt) {
        for &l in [a, b].iter() {
            if l as usize >= classes {
                return Err(Error::LabelOutOfRange {
                    label: l as usize,
                    classes,
                });
            }
        }
        p[a as usize] += 1;
        g[b as usize] += 1;
        if a == b {
            both[a as usize] += 1;
        }
    }
    let mut dice = Vec::with_capacity(classes);
    let mut iou = Vec::with_capacity(classes);
    for c in 0..classes {
        let (pc, gc, ic) = (p[c] as f64, g[c] as f64, both[c] as f64);
        if pc + gc == 0.0 {
            dice.push(1.0);
            iou.push(1.0);
        } else {
            dice.push(2.0 * ic / (pc + gc));
            iou.push(ic / (pc + gc - ic));
        }
    }
    let fg = (classes - 1) as f64;
    Ok(SegMetrics {
        mdice: dice[1..].iter().sum::<f64>() / fg,
        miou: iou[1..].iter().sum::<f64>() / fg,
        dice,
        iou,
    })
}

/// Mean image-level scores for one group of test images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub pathology: String,
    pub images: usize,
    pub mdice: f64,
    pub miou: f64,
}

/// Rows per pathology (in `groups` order) followed by `ALL`.
pub fn aggregate(per_image: &[(String, SegMetrics)], groups: &[&str]) -> Vec<MetricsRow> {
    let mut sums: BTreeMap<&str, (usize, f64, f64)> = BTreeMap::new();
    for (group, m) in per_image {
        for key in [group.as_str(), "ALL"] {
            let e = sums.entry(key).or_default();
            e.0 += 1;
            e.1 += m.mdice;
            e.2 += m.miou;
        }
    }
    groups
        .iter()
        .copied()
        .chain(["ALL"])
        .filter_map(|k| {
            sums.get(k).map(|&(n, d, i)| MetricsRow {
                pathology: k.to_string(),
                images: n,
                mdice: d / n as f64,
                miou: i / n as f64,
            })
        })
        .collect()
}

// ---------------------------------------------------------------- training

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Config {
    pub vit: ViTConfig,
    pub strategy: StrategyId,
    pub head: SegHeadConfig,
    /// Frozen Stage-I adapter carried by the encoder, if any.
    pub domain_adapter: Option<PeftConfig>,
    /// Adapter trained together with the head, if any.
    pub task_adapter: Option<PeftConfig>,
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: AdamWConfig,
    pub seed: u64,
}

impl Stage2Config {
    pub fn new(vit: ViTConfig, strategy: StrategyId, domain_adapter: Option<PeftConfig>) -> Result<Self> {
        let head = SegHeadConfig::for_vit(&vit, NUM_CLASSES)?;
        let task_adapter = matches!(strategy, StrategyId::Tlora | StrategyId::Tape)
            .then(|| PeftConfig::lora(peft::DEFAULT_RANK).with_role(AdapterRole::Task));
        Ok(Stage2Config {
            vit,
            strategy,
            head,
            domain_adapter,
            task_adapter,
            epochs: 30,
            batch_size: 8,
            optim: AdamWConfig::segmentation(),
            seed: 42,
        })
    }

    pub fn uses_octa(&self) -> bool {
        self.strategy != StrategyId::StlOct
    }

    pub fn freeze_plan(&self) -> Result<FreezePlan> {
        freeze_plan(self.strategy, Stage::Task)
    }

    pub fn adapters(&self) -> Result<AdapterSet> {
        AdapterSet::new(self.domain_adapter.iter().chain(&self.task_adapter).cloned())
    }
}

/// Builds the Stage-II model from an encoder state (optionally carrying a
/// Stage-I domain adapter): drops the reconstruction decoder, adds the task
/// adapter and head, and applies the strategy's freeze plan.
pub fn init_stage2_state(cfg: &Stage2Config, base: ParamStore<f32>) -> Result<ParamStore<f32>> {
    cfg.vit.validate()?;
    cfg.head.validate()?;
    let mut state = base;
    state.retain(|_, p| p.role == Role::Backbone || p.role == Role::DomainAdapter);
    if let Some(dom) = &cfg.domain_adapter {
        if dom.role != AdapterRole::Domain {
            return Err(Error::Config("domain adapter must carry the domain role".into()));
        }
        for spec in dom.specs(&cfg.vit)? {
            match state.get(&spec.name) {
                Err(_) => {
                    return Err(Error::Config(format!(
                        "{} needs a domain-adaptation checkpoint; `{}` is missing",
                        cfg.strategy, spec.name
                    )))
                }
                Ok(t) if t.shape() != spec.shape.as_slice() => {
                    return Err(Error::Config(format!(
                        "`{}` has shape {:?}, expected {:?}",
                        spec.name,
                        t.shape(),
                        spec.shape
                    )))
                }
                Ok(_) => {}
            }
        }
    }
    if let Some(task) = &cfg.task_adapter {
        peft::inject(&mut state, &cfg.vit, task, &mut rng_for(cfg.seed, 21))?;
    }
    state.extend(materialize(&head_specs(&cfg.head), &mut rng_for(cfg.seed, 22))?)?;
    cfg.freeze_plan()?.apply(&mut state);
    Ok(state)
}

/// Encoder tokens of every patch of one image.
fn encode_spatial<T: Real>(
    g: &mut Graph<'_, T>,
    b: &Bound,
    vit: &ViTConfig,
    adapters: &AdapterSet,
    patches: &Tensor<T>,
) -> Result<Var> {
    let all: Vec<usize> = (0..vit.num_patches()).collect();
    let p = g.constant(patches.clone());
    let enc = encode(g, b, vit, adapters, p, &all)?;
    seq_to_spatial(g, enc.tokens, enc.prefix_len(), (vit.grid(), vit.grid()))
}

/// Fused `[2d×h×w]` features of one image pair. Without OCTA the OCT
/// features fill both halves.
pub fn fused_features<T: Real>(
    g: &mut Graph<'_, T>,
    b: &Bound,
    vit: &ViTConfig,
    adapters: &AdapterSet,
    oct: &Tensor<T>,
    octa: Option<&Tensor<T>>,
) -> Result<Var> {
    let f_oct = encode_spatial(g, b, vit, adapters, oct)?;
    let f_octa = match octa {
        Some(t) => encode_spatial(g, b, vit, adapters, t)?,
        None => f_oct,
    };
    fuse_concat(g, f_oct, f_octa)
}

/// Model input of one sample: patchified images, or fused features when
/// the encoder is frozen and they can be computed once.
enum Input {
    Patches {
        oct: Tensor<f32>,
        octa: Option<Tensor<f32>>,
    },
    Features(Tensor<f32>),
}

struct Item {
    input: Input,
    labels: Vec<usize>,
    labels_u8: Vec<u8>,
    group: String,
}

/// Everything needed to run the segmentation model.
pub struct SegModel<'c> {
    pub cfg: &'c Stage2Config,
    pub adapters: AdapterSet,
}

impl<'c> SegModel<'c> {
    pub fn new(cfg: &'c Stage2Config) -> Result<Self> {
        Ok(SegModel {
            cfg,
            adapters: cfg.adapters()?,
        })
    }

    /// Logits `[C×H×W]` for one sample.
    pub fn logits<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        b: &Bound,
        oct: &Tensor<T>,
        octa: Option<&Tensor<T>>,
    ) -> Result<Var> {
        let fused = fused_features(g, b, &self.cfg.vit, &self.adapters, oct, octa)?;
        seg_head_forward(g, b, &self.cfg.head, fused)
    }

    fn item_logits<'g>(&self, g: &mut Graph<'g, f32>, b: &Bound, input: &Input) -> Result<Var> {
        match input {
            Input::Patches { oct, octa } => self.logits(g, b, oct, octa.as_ref()),
            Input::Features(f) => {
                let fv = g.constant(f.clone());
                seg_head_forward(g, b, &self.cfg.head, fv)
            }
        }
    }

    fn prepare(&self, state: &ParamStore<f32>, samples: &[&PhantomSample], cache: bool) -> Result<Vec<Item>> {
        let p = self.cfg.vit.patch_size;
        let prepared: Vec<Result<Item>> = par_map(samples, if cache { eval_threads() } else { 1 }, |s| {
            let oct = patchify(&s.oct, p)?;
            let octa = if self.cfg.uses_octa() {
                Some(patchify(&s.octa, p)?)
            } else {
                None
            };
            let input = if cache {
                let mut g = Graph::new();
                let b = state.bind(&mut g);
                let f = fused_features(&mut g, &b, &self.cfg.vit, &self.adapters, &oct, octa.as_ref())?;
                Input::Features(g.tensor(f))
            } else {
                Input::Patches { oct, octa }
            };
            Ok(Item {
                input,
                labels: s.labels_usize(),
                labels_u8: s.labels.clone(),
                group: s.pathology.as_str().to_string(),
            })
        });
        prepared.into_iter().collect()
    }

    fn evaluate(&self, state: &ParamStore<f32>, items: &[Item]) -> Result<Vec<(String, SegMetrics)>> {
        let results = par_map(items, eval_threads(), |item| -> Result<(String, SegMetrics)> {
            let mut g = Graph::new();
            let b = state.bind(&mut g);
            let logits = self.item_logits(&mut g, &b, &item.input)?;
            let pred = argmax_labels(&g.tensor(logits));
            Ok((
                item.group.clone(),
                compute_metrics(&pred, &item.labels_u8, self.cfg.head.num_classes)?,
            ))
        });
        results.into_iter().collect()
    }
}

/// Whether any encoder-side tensor trains, i.e. whether features change.
fn encoder_trains(state: &ParamStore<f32>) -> bool {
    state
        .iter()
        .any(|(_, p)| p.role != Role::Head && p.tensor.requires_grad())
}

struct Trainer<'c> {
    model: SegModel<'c>,
    optim: OptimState<f32>,
    order_rng: rand_chacha::ChaCha8Rng,
}

impl<'c> Trainer<'c> {
    fn new(cfg: &'c Stage2Config) -> Result<Self> {
        if cfg.batch_size == 0 {
            return Err(Error::Config("batch size must be ≥ 1".into()));
        }
        Ok(Trainer {
            model: SegModel::new(cfg)?,
            optim: OptimState::new(cfg.optim),
            order_rng: rng_for(cfg.seed, 23),
        })
    }

    fn step(&mut self, state: &mut ParamStore<f32>, items: &[Item], batch: &[usize]) -> Result<f64> {
        let scale = 1.0 / batch.len() as f32;
        let mut total = 0.0;
        for &i in batch {
            let item = &items[i];
            let model = &self.model;
            total += accumulate_sample(state, scale, |g, b| {
                let logits = model.item_logits(g, b, &item.input)?;
                g.cross_entropy(logits, &item.labels)
            })? as f64;
        }
        adamw_step(state, &mut self.optim)?;
        Ok(total / batch.len() as f64)
    }

    fn batches(&mut self, n: usize) -> Vec<Vec<usize>> {
        epoch_order(n, &mut self.order_rng)
            .chunks(self.model.cfg.batch_size)
            .map(<[usize]>::to_vec)
            .collect()
    }
}

/// Applies exactly `steps` optimizer updates on `train`, cycling epochs.
pub fn train_steps(
    train: &[&PhantomSample],
    cfg: &Stage2Config,
    mut state: ParamStore<f32>,
    steps: usize,
) -> Result<ParamStore<f32>> {
    let mut trainer = Trainer::new(cfg)?;
    let cache = !encoder_trains(&state);
    let items = trainer.model.prepare(&state, train, cache)?;
    let mut done = 0;
    while done < steps {
        for batch in trainer.batches(items.len()) {
            if done == steps {
                break;
            }
            trainer.step(&mut state, &items, &batch)?;
            done += 1;
        }
    }
    Ok(state)
}

#[derive(Clone, Debug)]
pub struct Stage2Output {
    /// Parameters of the epoch with the best validation mDice.
    pub state: ParamStore<f32>,
    pub best_epoch: usize,
    /// `(epoch, mean training loss, validation mDice)`; epoch 0 is before
    /// training and has no loss.
    pub curve: Vec<(usize, Option<f64>, f64)>,
    /// Test scores per pathology and overall.
    pub test: Vec<MetricsRow>,
}

pub const PATHOLOGY_GROUPS: [&str; 4] = ["NORMAL", "AMD", "DR", "RVO"];

/// Trains per the strategy's freeze plan from `state` (as built by
/// [`init_stage2_state`]), keeps the epoch with the best validation mDice
/// (epoch 0 included) and scores it on `test`.
pub fn run_stage2(
    train: &[&PhantomSample],
    val: &[&PhantomSample],
    test: &[&PhantomSample],
    cfg: &Stage2Config,
    mut state: ParamStore<f32>,
) -> Result<Stage2Output> {
    if train.is_empty() || val.is_empty() || test.is_empty() {
        return Err(Error::Dataset("segmentation needs train, val and test images".into()));
    }
    let mut trainer = Trainer::new(cfg)?;
    let cache = !encoder_trains(&state);
    let train_items = trainer.model.prepare(&state, train, cache)?;
    let val_items = trainer.model.prepare(&state, val, cache)?;

    let score = |m: &SegModel, s: &ParamStore<f32>| -> Result<f64> {
        let per = m.evaluate(s, &val_items)?;
        Ok(per.iter().map(|(_, x)| x.mdice).sum::<f64>() / per.len() as f64)
    };
    let mut best = (0usize, score(&trainer.model, &state)?);
    let mut best_state = state.clone();
    let mut curve = vec![(0, None, best.1)];
    for epoch in 1..=cfg.epochs {
        let mut loss = 0.0;
        let batches = trainer.batches(train_items.len());
        for batch in &batches {
            loss += trainer.step(&mut state, &train_items, batch)?;
        }
        let loss = loss / batches.len() as f64;
        let val = score(&trainer.model, &state)?;
        log::info!(
            "stage II epoch {epoch}/{}: loss {loss:.4}, val mDice {val:.4}",
            cfg.epochs
        );
        curve.push((epoch, Some(loss), val));
        if val > best.1 {
            best = (epoch, val);
            best_state = state.clone();
        }
    }
    let mut state = best_state;
    state.zero_grads();
    let test_items = trainer.model.prepare(&state, test, cache)?;
    let per_image = trainer.model.evaluate(&state, &test_items)?;
    state.set_all_trainable(false);
    Ok(Stage2Output {
        state,
        best_epoch: best.0,
        curve,
        test: aggregate(&per_image, &PATHOLOGY_GROUPS),
    })
}

/// Predicted label map of one sample under a trained state.
pub fn predict(cfg: &Stage2Config, state: &ParamStore<f32>, sample: &PhantomSample) -> Result<Vec<u8>> {
    let model = SegModel::new(cfg)?;
    let p = cfg.vit.patch_size;
    let oct = patchify(&sample.oct, p)?;
    let octa = if cfg.uses_octa() {
        Some(patchify(&sample.octa, p)?)
    } else {
        None
    };
    let mut g = Graph::new();
    let b = state.bind(&mut g);
    let logits = model.logits(&mut g, &b, &oct, octa.as_ref())?;
    Ok(argmax_labels(&g.tensor(logits)))
}

/// Scores a trained state on `samples`, per pathology and overall.
pub fn evaluate_state(
    cfg: &Stage2Config,
    state: &ParamStore<f32>,
    samples: &[&PhantomSample],
) -> Result<Vec<MetricsRow>> {
    let model = SegModel::new(cfg)?;
    let items = model.prepare(state, samples, false)?;
    Ok(aggregate(&model.evaluate(state, &items)?, &PATHOLOGY_GROUPS))
}

/// Seeded random label maps, for metric property checks.
pub fn random_label_map<R: Rng>(rng: &mut R, len: usize, classes: usize) -> Vec<u8> {
    (0..len).map(|_| rng.gen_range(0..classes) as u8).collect()
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numeric::grad_check;
    use crate::synthdata::{gen_phantom, Pathology};
    use crate::vit::encoder_specs;

    #[test]
    fn spatial_layout_and_roundtrip() {
        let mut g = Graph::<f32>::new();
        let t = g.constant(Tensor::from_vec(&[4, 2], vec![0., 10., 1., 11., 2., 12., 3., 13.]).unwrap());
        let s = seq_to_spatial(&mut g, t, 0, (2, 2)).unwrap();
        assert_eq!(g.shape(s), &[2, 2, 2]);
        assert_eq!(g.value(s), &[0., 1., 2., 3., 10., 11., 12., 13.]);
        let back = spatial_to_seq(&mut g, s).unwrap();
        assert_eq!(g.value(back), g.value(t));

        let long = g.constant(Tensor::zeros(&[1 + 10 + 64, 8]));
        let s = seq_to_spatial(&mut g, long, 11, (8, 8)).unwrap();
        assert_eq!(g.shape(s), &[8, 8, 8]);
        assert!(seq_to_spatial(&mut g, long, 10, (8, 8)).is_err());
    }

    #[test]
    fn fuse_order_and_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::full(&[1, 1, 1], 2.0));
        let b = g.constant(Tensor::full(&[1, 1, 1], 5.0));
        let f = fuse_concat(&mut g, a, b).unwrap();
        assert_eq!(g.value(f), &[2.0, 5.0]);
        let x = g.constant(Tensor::ones(&[64, 8, 8]));
        let z = g.constant(Tensor::zeros(&[64, 8, 8]));
        let f = fuse_concat(&mut g, x, z).unwrap();
        assert_eq!(g.shape(f), &[128, 8, 8]);
        assert!(g.value(f)[..64 * 64].iter().all(|&v| v == 1.0));
        let bad = g.constant(Tensor::zeros(&[64, 4, 8]));
        assert!(fuse_concat(&mut g, x, bad).is_err());
    }

    fn head_state(cfg: &SegHeadConfig, seed: u64) -> ParamStore<f32> {
        materialize(&head_specs(cfg), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn tiny_head_has_three_stages_and_full_resolution() {
        let cfg = SegHeadConfig::for_vit(&ViTConfig::vit_tiny(), 7).unwrap();
        assert_eq!(cfg.widths, vec![128, 64, 32, 16]);
        assert_eq!(cfg.stages(), 3);
        assert_eq!(cfg.upsampling(), 8);
        let state = head_state(&cfg, 1);
        let mut g = Graph::new();
        let b = state.bind(&mut g);
        let x = g.constant(Tensor::ones(&[128, 8, 8]));
        let y = seg_head_forward(&mut g, &b, &cfg, x).unwrap();
        assert_eq!(g.shape(y), &[7, 64, 64]);
    }

    #[test]
    fn zero_classifier_gives_uniform_cross_entropy() {
        let cfg = SegHeadConfig::for_vit(&ViTConfig::vit_tiny(), 7).unwrap();
        let mut state = head_state(&cfg, 2);
        state.get_mut("head.classifier.weight").unwrap().data_mut().fill(0.0);
        let mut g = Graph::new();
        let b = state.bind(&mut g);
        let x = g.constant(Tensor::full(&[128, 8, 8], 0.3));
        let y = seg_head_forward(&mut g, &b, &cfg, x).unwrap();
        let labels: Vec<usize> = (0..64 * 64).map(|i| i % 7).collect();
        let l = g.cross_entropy(y, &labels).unwrap();
        let err = (g.scalar(l) as f64 - 7f64.ln()).abs();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn head_gradient_matches_finite_differences() {
        let cfg = SegHeadConfig {
            in_channels: 4,
            num_classes: 3,
            widths: vec![8, 8, 4],
        };
        let mut state = head_state(&cfg, 3).cast::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (_, p) in state.iter_mut() {
            p.tensor
                .data_mut()
                .iter_mut()
                .for_each(|v| *v += rng.gen_range(-0.1..0.1));
        }
        state.set_all_trainable(true);
        let x = Tensor::<f64>::from_vec(&[4, 2, 2], (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let labels: Vec<usize> = (0..8 * 8).map(|_| rng.gen_range(0..3)).collect();
        let r = grad_check(&state, 1e-4, 16, |g, b| {
            let xv = g.constant(x.clone());
            let y = seg_head_forward(g, b, &cfg, xv)?;
            g.cross_entropy(y, &labels)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-3, "{r:?}");
    }

    #[test]
    fn swapping_fuse_order_with_stem_blocks_is_equivariant() {
        let cfg = SegHeadConfig::for_vit(&ViTConfig::vit_tiny(), 7).unwrap();
        let state = head_state(&cfg, 5);
        let mut swapped = state.clone();
        {
            let w = swapped.get_mut("head.stem.weight").unwrap();
            let (cout, cin) = (w.shape()[0], w.shape()[1]);
            let half = cin / 2;
            let data = w.data_mut();
            for o in 0..cout {
                let row = &mut data[o * cin..(o + 1) * cin];
                let (a, b) = row.split_at_mut(half);
                a.swap_with_slice(b);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = Tensor::<f32>::from_vec(&[64, 8, 8], (0..4096).map(|_| rng.gen()).collect()).unwrap();
        let c = Tensor::<f32>::from_vec(&[64, 8, 8], (0..4096).map(|_| rng.gen()).collect()).unwrap();
        let run = |s: &ParamStore<f32>, first: &Tensor<f32>, second: &Tensor<f32>| {
            let mut g = Graph::new();
            let b = s.bind(&mut g);
            let (x, y) = (g.constant(first.clone()), g.constant(second.clone()));
            let f = fuse_concat(&mut g, x, y).unwrap();
            let out = seg_head_forward(&mut g, &b, &cfg, f).unwrap();
            g.tensor(out)
        };
        let l1 = run(&state, &a, &c);
        let l2 = run(&swapped, &c, &a);
        let max = l1
            .data()
            .iter()
            .zip(l2.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f32, f32::max);
        assert!(max < 1e-4, "{max}");
    }

    #[test]
    fn metric_examples() {
        let gt = [1u8, 1, 0, 0];
        let m = compute_metrics(&gt, &gt, 3).unwrap();
        assert_eq!((m.mdice, m.miou), (1.0, 1.0));
        let pred = [1u8, 0, 0, 0];
        let m = compute_metrics(&pred, &gt, 2).unwrap();
        assert!((m.dice[1] - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.iou[1] - 0.5).abs() < 1e-15);
        assert!(compute_metrics(&[3], &[0], 3).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let p = random_label_map(&mut rng, 50, 7);
            let g = random_label_map(&mut rng, 50, 7);
            let m = compute_metrics(&p, &g, 7).unwrap();
            for c in 0..7 {
                assert!((m.dice[c] - 2.0 * m.iou[c] / (1.0 + m.iou[c])).abs() < 1e-9);
            }
            assert!(m.mdice >= m.miou);
        }
    }

    #[test]
    fn aggregate_rows() {
        let m = |d: f64| SegMetrics {
            dice: vec![],
            iou: vec![],
            mdice: d,
            miou: d / 2.0,
        };
        let rows = aggregate(
            &[
                ("AMD".into(), m(0.5)),
                ("NORMAL".into(), m(1.0)),
                ("AMD".into(), m(0.7)),
            ],
            &PATHOLOGY_GROUPS,
        );
        let names: Vec<&str> = rows.iter().map(|r| r.pathology.as_str()).collect();
        assert_eq!(names, vec!["NORMAL", "AMD", "ALL"]);
        assert!((rows[1].mdice - 0.6).abs() < 1e-12);
        assert_eq!(rows[2].images, 3);
    }

    #[test]
    fn stage2_smoke_and_freeze() {
        let vit = ViTConfig::vit_tiny();
        let samples: Vec<PhantomSample> = (0..3)
            .map(|i| gen_phantom(i, Pathology::ALL[i as usize], 64, 64).unwrap())
            .collect();
        let refs: Vec<&PhantomSample> = samples.iter().collect();
        let backbone = materialize(&encoder_specs(&vit), &mut rng_for(9, 0)).unwrap();

        let mut cfg = Stage2Config::new(vit.clone(), StrategyId::Tape, None).unwrap();
        assert!(init_stage2_state(&cfg, backbone.clone()).is_err() || cfg.domain_adapter.is_none());
        cfg.domain_adapter = Some(PeftConfig::lora(8));
        assert!(init_stage2_state(&cfg, backbone.clone()).is_err());

        let mut cfg = Stage2Config::new(vit.clone(), StrategyId::Tlora, None).unwrap();
        cfg.batch_size = 2;
        let init = init_stage2_state(&cfg, backbone.clone()).unwrap();
        let stepped = train_steps(&refs, &cfg, init.clone(), 2).unwrap();
        let changed: std::collections::BTreeSet<String> = init.changed_names(&stepped).into_iter().collect();
        assert_eq!(changed, cfg.freeze_plan().unwrap().trainable_names(&init));

        cfg.epochs = 0;
        let out = run_stage2(&refs, &refs, &refs, &cfg, init.clone()).unwrap();
        assert!(init.changed_names(&out.state).is_empty());
        assert_eq!(out.test.last().unwrap().pathology, "ALL");
        assert!(out.test.iter().all(|r| r.mdice >= r.miou));
    }
}
