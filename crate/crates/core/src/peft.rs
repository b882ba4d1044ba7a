//! Adapter zoo: LoRA, bottleneck adapters and visual prompts, plus freeze
//! plans and the parameter-budget audit.

use std::collections::BTreeSet;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Graph, Real, Var};
use crate::params::{count_specs, materialize, Bound, Init, ParamSpec, ParamStore, Role};
use crate::pipeline::StrategyId;
use crate::vit::{decoder_specs, encoder_specs, ViTConfig, EMBED_STD};

/// Linear layer of a transformer block that LoRA can wrap.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraTarget {
    Qkv,
    Proj,
    Fc1,
    Fc2,
}

impl LoraTarget {
    pub const ALL: [LoraTarget; 4] = [LoraTarget::Qkv, LoraTarget::Proj, LoraTarget::Fc1, LoraTarget::Fc2];

    pub fn as_str(self) -> &'static str {
        match self {
            LoraTarget::Qkv => "qkv",
            LoraTarget::Proj => "proj",
            LoraTarget::Fc1 => "fc1",
            LoraTarget::Fc2 => "fc2",
        }
    }
}

/// Sub-layer after which a bottleneck adapter adds its output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdapterSite {
    Msa,
    Ffn,
}

impl AdapterSite {
    pub const ALL: [AdapterSite; 2] = [AdapterSite::Msa, AdapterSite::Ffn];

    pub fn as_str(self) -> &'static str {
        match self {
            AdapterSite::Msa => "msa",
            AdapterSite::Ffn => "ffn",
        }
    }
}

/// Whether an adapter is trained during domain (Stage I) or task (Stage II)
/// adaptation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterRole {
    #[default]
    Domain,
    Task,
}

impl AdapterRole {
    pub fn as_str(self) -> &'static str {
        match self {
            AdapterRole::Domain => "domain",
            AdapterRole::Task => "task",
        }
    }

    pub fn param_role(self) -> Role {
        match self {
            AdapterRole::Domain => Role::DomainAdapter,
            AdapterRole::Task => Role::TaskAdapter,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum PeftKind {
    Fft,
    Lora { rank: usize, alpha: f64 },
    VitAdapter { bottleneck: usize },
    Vpt { num_tokens: usize },
}

impl PeftKind {
    pub fn short_name(&self) -> &'static str {
        match self {
            PeftKind::Fft => "fft",
            PeftKind::Lora { .. } => "lora",
            PeftKind::VitAdapter { .. } => "adapter",
            PeftKind::Vpt { .. } => "vpt",
        }
    }
}

impl fmt::Display for PeftKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PeftKind::Fft => write!(f, "FFT"),
            PeftKind::Lora { rank, .. } => write!(f, "LoRA(r={rank})"),
            PeftKind::VitAdapter { bottleneck } => write!(f, "ViT-Adapter(b={bottleneck})"),
            PeftKind::Vpt { num_tokens } => write!(f, "VPT({num_tokens})"),
        }
    }
}

pub const DEFAULT_RANK: usize = 8;
pub const DEFAULT_BOTTLENECK: usize = 8;
pub const DEFAULT_PROMPTS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeftConfig {
    pub kind: PeftKind,
    #[serde(default = "all_targets")]
    pub lora_targets: Vec<LoraTarget>,
    #[serde(default)]
    pub role: AdapterRole,
}

fn all_targets() -> Vec<LoraTarget> {
    LoraTarget::ALL.to_vec()
}

impl PeftConfig {
    pub fn new(kind: PeftKind) -> Self {
        PeftConfig {
            kind,
            lora_targets: all_targets(),
            role: AdapterRole::Domain,
        }
    }

    pub fn fft() -> Self {
        Self::new(PeftKind::Fft)
    }

    /// LoRA with unit effective scale (α = r).
    pub fn lora(rank: usize) -> Self {
        Self::new(PeftKind::Lora {
            rank,
            alpha: rank as f64,
        })
    }

    pub fn vit_adapter(bottleneck: usize) -> Self {
        Self::new(PeftKind::VitAdapter { bottleneck })
    }

    pub fn vpt(num_tokens: usize) -> Self {
        Self::new(PeftKind::Vpt { num_tokens })
    }

    /// Default-sized config for a kind named `fft`, `lora`, `adapter` or `vpt`.
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "fft" => Ok(Self::fft()),
            "lora" => Ok(Self::lora(DEFAULT_RANK)),
            "adapter" => Ok(Self::vit_adapter(DEFAULT_BOTTLENECK)),
            "vpt" => Ok(Self::vpt(DEFAULT_PROMPTS)),
            other => Err(Error::Config(format!(
                "unknown adapter kind `{other}` (expected fft, lora, adapter or vpt)"
            ))),
        }
    }

    pub fn with_role(mut self, role: AdapterRole) -> Self {
        self.role = role;
        self
    }

    pub fn is_fft(&self) -> bool {
        matches!(self.kind, PeftKind::Fft)
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            PeftKind::Fft => Ok(()),
            PeftKind::Lora { rank, alpha } => {
                if rank == 0 || !(alpha.is_finite() && alpha > 0.0) {
                    return Err(Error::Config("LoRA needs rank ≥ 1 and a positive scale".into()));
                }
                if self.lora_targets.is_empty() {
                    return Err(Error::Config("LoRA target set is empty".into()));
                }
                Ok(())
            }
            PeftKind::VitAdapter { bottleneck: 0 } => Err(Error::Config("adapter bottleneck must be ≥ 1".into())),
            PeftKind::Vpt { num_tokens: 0 } => Err(Error::Config("prompt count must be ≥ 1".into())),
            _ => Ok(()),
        }
    }

    /// Parameter-name prefix, e.g. `domain_lora` or `task_adapter`.
    pub fn prefix(&self) -> String {
        format!("{}_{}", self.role.as_str(), self.kind.short_name())
    }

    fn targets(&self) -> impl Iterator<Item = LoraTarget> + '_ {
        LoraTarget::ALL.into_iter().filter(|t| self.lora_targets.contains(t))
    }

    /// Parameters this adapter adds to an encoder of geometry `vit`.
    /// FFT adds none.
    pub fn specs(&self, vit: &ViTConfig) -> Result<Vec<ParamSpec>> {
        self.validate()?;
        let role = self.role.param_role();
        let prefix = self.prefix();
        let d = vit.embed_dim;
        let mut specs = Vec::new();
        match self.kind {
            PeftKind::Fft => {}
            PeftKind::Lora { rank, .. } => {
                for i in 0..vit.depth {
                    for t in self.targets() {
                        let (din, dout) = vit.linear_dims(t);
                        let site = format!("{prefix}.blocks.{i}.{}", t.as_str());
                        specs.push(ParamSpec::new(
                            format!("{site}.a"),
                            role,
                            &[rank, din],
                            Init::TruncNormal {
                                std: 1.0 / (din as f64).sqrt(),
                            },
                        ));
                        specs.push(ParamSpec::new(format!("{site}.b"), role, &[dout, rank], Init::Zeros));
                    }
                }
            }
            PeftKind::VitAdapter { bottleneck } => {
                for i in 0..vit.depth {
                    for s in AdapterSite::ALL {
                        let site = format!("{prefix}.blocks.{i}.{}", s.as_str());
                        specs.push(ParamSpec::new(
                            format!("{site}.down.weight"),
                            role,
                            &[bottleneck, d],
                            Init::XavierUniform {
                                fan_in: d,
                                fan_out: bottleneck,
                            },
                        ));
                        specs.push(ParamSpec::new(
                            format!("{site}.down.bias"),
                            role,
                            &[bottleneck],
                            Init::Zeros,
                        ));
                        specs.push(ParamSpec::new(
                            format!("{site}.up.weight"),
                            role,
                            &[d, bottleneck],
                            Init::Zeros,
                        ));
                        specs.push(ParamSpec::new(format!("{site}.up.bias"), role, &[d], Init::Zeros));
                    }
                }
            }
            PeftKind::Vpt { num_tokens } => specs.push(ParamSpec::new(
                format!("{prefix}.prompts"),
                role,
                &[num_tokens, d],
                Init::TruncNormal { std: EMBED_STD },
            )),
        }
        Ok(specs)
    }
}

/// Adapters attached to an encoder, applied in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdapterSet {
    configs: Vec<PeftConfig>,
}

impl AdapterSet {
    /// FFT entries attach nothing and are dropped; two adapters may not
    /// share a name prefix.
    pub fn new(configs: impl IntoIterator<Item = PeftConfig>) -> Result<Self> {
        let mut set = AdapterSet::default();
        for cfg in configs {
            set.push(cfg)?;
        }
        Ok(set)
    }

    pub fn push(&mut self, cfg: PeftConfig) -> Result<()> {
        cfg.validate()?;
        if cfg.is_fft() {
            return Ok(());
        }
        if self.configs.iter().any(|c| c.prefix() == cfg.prefix()) {
            return Err(Error::Config(format!("adapter `{}` attached twice", cfg.prefix())));
        }
        self.configs.push(cfg);
        Ok(())
    }

    pub fn configs(&self) -> &[PeftConfig] {
        &self.configs
    }

    pub fn is_empty(&self) -> bool {
        self.configs.is_empty()
    }

    /// Parameter prefix and scale α/r of every LoRA delta on one layer.
    pub fn lora_sites(&self, block: usize, target: LoraTarget) -> Vec<(String, f64)> {
        self.configs
            .iter()
            .filter_map(|c| match c.kind {
                PeftKind::Lora { rank, alpha } if c.lora_targets.contains(&target) => Some((
                    format!("{}.blocks.{block}.{}", c.prefix(), target.as_str()),
                    alpha / rank as f64,
                )),
                _ => None,
            })
            .collect()
    }

    /// Parameter prefixes of the bottleneck adapters after one sub-layer.
    pub fn adapter_sites(&self, block: usize, site: AdapterSite) -> Vec<String> {
        self.configs
            .iter()
            .filter(|c| matches!(c.kind, PeftKind::VitAdapter { .. }))
            .map(|c| format!("{}.blocks.{block}.{}", c.prefix(), site.as_str()))
            .collect()
    }

    /// Names of the prompt matrices, in prepend order.
    pub fn prompt_params(&self) -> Vec<String> {
        self.configs
            .iter()
            .filter(|c| matches!(c.kind, PeftKind::Vpt { .. }))
            .map(|c| format!("{}.prompts", c.prefix()))
            .collect()
    }

    pub fn num_prompts(&self) -> usize {
        self.configs
            .iter()
            .map(|c| match c.kind {
                PeftKind::Vpt { num_tokens } => num_tokens,
                _ => 0,
            })
            .sum()
    }
}

/// Adds freshly initialized adapter parameters for `cfg` to `store` and
/// freezes the backbone. LoRA `B` and adapter up-projections start at
/// zero, so the adapted model initially computes exactly what the base
/// model does.
pub fn inject<R: Rng + ?Sized>(
    store: &mut ParamStore<f32>,
    vit: &ViTConfig,
    cfg: &PeftConfig,
    rng: &mut R,
) -> Result<()> {
    let added = materialize(&cfg.specs(vit)?, rng)?;
    store.extend(added)?;
    for (_, p) in store.iter_mut() {
        if p.role == Role::Backbone {
            p.tensor.set_requires_grad(false);
        }
    }
    Ok(())
}

/// LoRA injection; errors on non-LoRA configs.
pub fn inject_lora<R: Rng + ?Sized>(
    store: &mut ParamStore<f32>,
    vit: &ViTConfig,
    cfg: &PeftConfig,
    rng: &mut R,
) -> Result<()> {
    if !matches!(cfg.kind, PeftKind::Lora { .. }) {
        return Err(Error::Config(format!("inject_lora given {}", cfg.kind)));
    }
    inject(store, vit, cfg, rng)
}

/// Bottleneck adapter output `up(gelu(down(x)))` for the adapter at `prefix`.
pub fn adapter_forward<T: Real>(g: &mut Graph<'_, T>, b: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let down_w = b.get(&format!("{prefix}.down.weight"))?;
    let d = g.shape(down_w)[1];
    let sx = g.shape(x);
    if sx.len() != 2 || sx[1] != d {
        return Err(Error::shape(
            "adapter_forward",
            format!("input {sx:?} for adapter width {d}"),
        ));
    }
    let h = g.linear(x, down_w, Some(b.get(&format!("{prefix}.down.bias"))?))?;
    let h = g.gelu(h);
    g.linear(
        h,
        b.get(&format!("{prefix}.up.weight"))?,
        Some(b.get(&format!("{prefix}.up.bias"))?),
    )
}

/// Places `prompts: [k×d]` ahead of `tokens: [n×d]`.
pub fn prepend_prompts<T: Real>(g: &mut Graph<'_, T>, tokens: Var, prompts: Var) -> Result<Var> {
    let (st, sp) = (g.shape(tokens), g.shape(prompts));
    if st.len() != 2 || sp.len() != 2 || st[1] != sp[1] {
        return Err(Error::shape(
            "prepend_prompts",
            format!("prompts {sp:?} for tokens {st:?}"),
        ));
    }
    g.concat(&[prompts, tokens])
}

// ---------------------------------------------------------------- freeze plans

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Stage I: masked reconstruction on the target domain.
    Domain,
    /// Stage II: segmentation.
    Task,
}

/// The parameter roles trained in one stage; every other role is frozen.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FreezePlan {
    trainable: BTreeSet<Role>,
}

impl FreezePlan {
    pub fn new(trainable: impl IntoIterator<Item = Role>) -> Self {
        FreezePlan {
            trainable: trainable.into_iter().collect(),
        }
    }

    pub fn is_trainable(&self, role: Role) -> bool {
        self.trainable.contains(&role)
    }

    pub fn trainable_roles(&self) -> impl Iterator<Item = Role> + '_ {
        self.trainable.iter().copied()
    }

    /// Sets `requires_grad` on every parameter according to its role.
    pub fn apply<T: Real>(&self, store: &mut ParamStore<T>) {
        for (_, p) in store.iter_mut() {
            p.tensor.set_requires_grad(self.is_trainable(p.role));
        }
    }

    pub fn trainable_names<T: Real>(&self, store: &ParamStore<T>) -> BTreeSet<String> {
        store
            .iter()
            .filter(|(_, p)| self.is_trainable(p.role))
            .map(|(n, _)| n.to_string())
            .collect()
    }
}

/// Which roles each strategy trains in `stage`. Single-stage strategies
/// have no domain stage.
pub fn freeze_plan(strategy: StrategyId, stage: Stage) -> Result<FreezePlan> {
    use StrategyId::*;
    let roles: &[Role] = match (stage, strategy) {
        (Stage::Domain, FftDa) => &[Role::Backbone, Role::Decoder],
        (Stage::Domain, Dlora | Tape) => &[Role::DomainAdapter, Role::Decoder],
        (Stage::Domain, _) => {
            return Err(Error::Config(format!(
                "{strategy} is single-stage and has no domain-adaptation stage"
            )))
        }
        (Stage::Task, StlOct | Stl | FftDa | Dlora) => &[Role::Head],
        (Stage::Task, FftTa) => &[Role::Backbone, Role::Head],
        (Stage::Task, Tlora | Tape) => &[Role::TaskAdapter, Role::Head],
    };
    Ok(FreezePlan::new(roles.iter().copied()))
}

// ---------------------------------------------------------------------- audit

/// One row of the parameter-budget table.
#[derive(Clone, Debug, PartialEq)]
pub struct AuditReport {
    pub preset: String,
    pub method: String,
    /// Short kind name: `fft`, `lora`, `adapter` or `vpt`.
    pub kind: String,
    /// Backbone, reconstruction decoder and adapter parameters.
    pub total: usize,
    /// Encoder-side trainable parameters: all backbone parameters for FFT,
    /// adapter parameters otherwise.
    pub trainable: usize,
    /// Trainable count when the decoder, which is always trained during
    /// reconstruction, is included.
    pub trainable_with_decoder: usize,
}

impl AuditReport {
    pub fn percent(&self) -> f64 {
        100.0 * self.trainable as f64 / self.total as f64
    }

    pub fn percent_with_decoder(&self) -> f64 {
        100.0 * self.trainable_with_decoder as f64 / self.total as f64
    }
}

/// Counts parameters of `preset` with `peft` attached, without allocating.
pub fn audit(preset: &str, peft: &PeftConfig) -> Result<AuditReport> {
    let vit = ViTConfig::preset(preset)?;
    let backbone = count_specs(&encoder_specs(&vit));
    let decoder = count_specs(&decoder_specs(&vit));
    let adapter = count_specs(&peft.specs(&vit)?);
    let total = backbone + decoder + adapter;
    let trainable = if peft.is_fft() { total } else { adapter };
    let trainable_with_decoder = if peft.is_fft() { total } else { adapter + decoder };
    Ok(AuditReport {
        preset: preset.to_string(),
        method: peft.kind.to_string(),
        kind: peft.kind.short_name().to_string(),
        total,
        trainable,
        trainable_with_decoder,
    })
}

/// `3145728` → `3,145,728`.
pub fn thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

/// Percentages are shown to two decimals; values that would round to
/// zero keep one significant digit instead (`0.003%`).
pub fn format_percent(p: f64) -> String {
    if p == 0.0 || p >= 0.005 {
        return format!("{p:.2}%");
    }
    let decimals = (-p.log10()).ceil() as usize;
    format!("{p:.decimals$}%")
}

/// `10,240 (0.003%)`.
pub fn format_share(count: usize, percent: f64) -> String {
    format!("{} ({})", thousands(count), format_percent(percent))
}

/// Aligned plain-text table of audit rows.
pub fn render_audit_table(rows: &[AuditReport]) -> String {
    let header = ["preset", "method", "total", "trainable", "trainable+decoder"];
    let cells: Vec<[String; 5]> = rows
        .iter()
        .map(|r| {
            [
                r.preset.clone(),
                r.method.clone(),
                thousands(r.total),
                format_share(r.trainable, r.percent()),
                format_share(r.trainable_with_decoder, r.percent_with_decoder()),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let mut out = String::new();
    let mut line = |row: Vec<&str>| {
        let padded: Vec<String> = row
            .iter()
            .zip(widths)
            .enumerate()
            .map(|(i, (c, w))| if i < 2 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        out.push_str(padded.join("  ").trim_end());
        out.push('\n');
    };
    line(header.to_vec());
    for row in &cells {
        line(row.iter().map(String::as_str).collect());
    }
    out
}

/// Machine-readable rows `name,total,trainable,percent`.
pub fn render_audit_csv(rows: &[AuditReport]) -> String {
    let mut out = String::from("name,total,trainable,percent\n");
    for r in rows {
        out.push_str(&format!(
            "{}/{},{},{},{}\n",
            r.preset,
            r.kind,
            r.total,
            r.trainable,
            r.percent()
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numeric::Tensor;
    use crate::vit::{block_forward, encode, patchify};

    #[test]
    fn closed_form_counts_at_large_geometry() {
        let vit = ViTConfig::vit_large();
        assert_eq!(
            count_specs(&PeftConfig::lora(8).specs(&vit).unwrap()),
            24 * 8 * (4096 + 2048 + 5120 + 5120)
        );
        assert_eq!(count_specs(&PeftConfig::lora(8).specs(&vit).unwrap()), 3_145_728);
        assert_eq!(
            count_specs(&PeftConfig::vit_adapter(8).specs(&vit).unwrap()),
            48 * (1024 * 8 + 8 + 8 * 1024 + 1024)
        );
        assert_eq!(count_specs(&PeftConfig::vpt(10).specs(&vit).unwrap()), 10_240);
        assert!(PeftConfig::fft().specs(&vit).unwrap().is_empty());
    }

    #[test]
    fn non_fft_budgets_stay_small() {
        for cfg in [PeftConfig::lora(8), PeftConfig::vit_adapter(8), PeftConfig::vpt(10)] {
            let r = audit("vit-large", &cfg).unwrap();
            assert!((r.trainable as f64) / (r.total as f64) < 0.012, "{r:?}");
        }
        assert_eq!(audit("vit-large", &PeftConfig::fft()).unwrap().percent(), 100.0);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(PeftConfig::lora(0).validate().is_err());
        let mut empty = PeftConfig::lora(4);
        empty.lora_targets.clear();
        assert!(empty.validate().is_err());
        assert!(PeftConfig::vit_adapter(0).validate().is_err());
        assert!(PeftConfig::vpt(0).validate().is_err());
        assert!(PeftConfig::from_name("prefix").is_err());
        let mut set = AdapterSet::new([PeftConfig::lora(2)]).unwrap();
        assert!(set.push(PeftConfig::lora(4)).is_err());
        set.push(PeftConfig::lora(4).with_role(AdapterRole::Task)).unwrap();
    }

    #[test]
    fn number_formatting() {
        assert_eq!(thousands(0), "0");
        assert_eq!(thousands(999), "999");
        assert_eq!(thousands(10_240), "10,240");
        assert_eq!(thousands(3_145_728), "3,145,728");
        assert_eq!(format_percent(100.0), "100.00%");
        assert_eq!(format_percent(0.2530), "0.25%");
        assert_eq!(format_percent(0.00311), "0.003%");
        assert_eq!(format_share(10_240, 0.00311), "10,240 (0.003%)");
    }

    #[test]
    fn rank_one_delta_is_scaled_outer_product() {
        let mut vit = ViTConfig::vit_tiny();
        vit.embed_dim = 2;
        vit.num_heads = 1;
        vit.mlp_ratio = 1.0;
        let mut cfg = PeftConfig::new(PeftKind::Lora { rank: 1, alpha: 3.0 });
        cfg.lora_targets = vec![LoraTarget::Proj];
        let specs = cfg.specs(&vit).unwrap();
        assert_eq!(specs.len(), 2 * vit.depth);

        let mut store = ParamStore::<f64>::new();
        let (u, v) = ([0.5, -1.0], [2.0, 0.25]);
        store
            .insert("a", Role::DomainAdapter, Tensor::from_vec(&[1, 2], u.to_vec()).unwrap())
            .unwrap();
        store
            .insert("b", Role::DomainAdapter, Tensor::from_vec(&[2, 1], v.to_vec()).unwrap())
            .unwrap();
        let x = Tensor::from_vec(&[1, 2], vec![1.0, 3.0]).unwrap();
        let mut g = Graph::new();
        let bd = store.bind(&mut g);
        let xv = g.constant(x);
        let down = g.linear(xv, bd.get("a").unwrap(), None).unwrap();
        let up = g.linear(down, bd.get("b").unwrap(), None).unwrap();
        let delta = g.scale(up, 3.0);
        // (α/r)·v·uᵀ·x computed by hand
        let ux = 0.5 * 1.0 + -3.0;
        assert_eq!(g.value(delta), &[3.0 * v[0] * ux, 3.0 * v[1] * ux]);
    }

    fn tiny_model(seed: u64) -> (ViTConfig, ParamStore<f32>) {
        let vit = ViTConfig::vit_tiny();
        let store = materialize(&encoder_specs(&vit), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        (vit, store)
    }

    fn encode_full(vit: &ViTConfig, store: &ParamStore<f32>, set: &AdapterSet, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = vit.image_size * vit.image_size;
        let img = Tensor::from_vec(
            &[1, vit.image_size, vit.image_size],
            (0..n).map(|_| rng.gen()).collect(),
        )
        .unwrap();
        let patches = patchify(&img, vit.patch_size).unwrap();
        let visible: Vec<usize> = (0..vit.num_patches()).collect();
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let p = g.constant(patches);
        let e = encode(&mut g, &b, vit, set, p, &visible).unwrap();
        g.tensor(e.tokens)
    }

    #[test]
    fn zero_initialized_adapters_leave_outputs_bit_identical() {
        for cfg in [PeftConfig::lora(8), PeftConfig::vit_adapter(8)] {
            let (vit, base) = tiny_model(1);
            let mut injected = base.clone();
            inject(&mut injected, &vit, &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
            let set = AdapterSet::new([cfg.clone()]).unwrap();
            for s in 0..3 {
                let a = encode_full(&vit, &base, &AdapterSet::default(), s);
                let b = encode_full(&vit, &injected, &set, s);
                assert!(a.bit_eq(&b), "{cfg:?}");
            }
        }
    }

    #[test]
    fn vpt_extends_sequence_and_stacked_lora_is_additive() {
        let (vit, mut store) = tiny_model(3);
        let vpt = PeftConfig::vpt(10);
        inject(&mut store, &vit, &vpt, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let set = AdapterSet::new([vpt]).unwrap();
        assert_eq!(encode_full(&vit, &store, &set, 0).shape(), &[10 + 1 + 64, 64]);

        let (vit, mut store) = tiny_model(5);
        let dom = PeftConfig::lora(4);
        let task = PeftConfig::lora(4).with_role(AdapterRole::Task);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        inject(&mut store, &vit, &dom, &mut rng).unwrap();
        inject(&mut store, &vit, &task, &mut rng).unwrap();
        for (name, p) in store.iter_mut() {
            if name.starts_with("domain_lora") && name.ends_with(".b") {
                p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.01);
            }
        }
        let domain_only = AdapterSet::new([dom.clone()]).unwrap();
        let both = AdapterSet::new([dom, task]).unwrap();
        // task B is still zero: removing the task term recovers the domain model
        assert!(encode_full(&vit, &store, &domain_only, 1).bit_eq(&encode_full(&vit, &store, &both, 1)));
        assert!(!encode_full(&vit, &store, &AdapterSet::default(), 1).bit_eq(&encode_full(&vit, &store, &both, 1)));
    }

    #[test]
    fn adapter_grads_flow_only_to_trainable_tensors() {
        let (vit, mut store) = tiny_model(7);
        let cfg = PeftConfig::vit_adapter(8);
        inject(&mut store, &vit, &cfg, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        for (_, p) in store.iter_mut() {
            if p.role == Role::DomainAdapter {
                p.tensor.set_requires_grad(true);
            }
        }
        let set = AdapterSet::new([cfg]).unwrap();
        let x = Tensor::<f32>::from_vec(&[3, 64], (0..192).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let xv = g.constant(x);
        let y = block_forward(&mut g, &b, "encoder.blocks.0", 0, xv, 4, &set).unwrap();
        let sq = g.mul(y, y).unwrap();
        let loss = g.mean(sq);
        let grads = g.backward(loss).unwrap();
        drop(g);
        let mut store2 = store.clone();
        store2.accumulate_grads(&b, &grads, 1.0);
        assert!(store2
            .get("domain_adapter.blocks.0.msa.up.weight")
            .unwrap()
            .grad()
            .is_some());
        assert!(store2
            .get("domain_adapter.blocks.0.ffn.up.bias")
            .unwrap()
            .grad()
            .is_some());
        assert!(store2.get("encoder.blocks.0.attn.qkv.weight").unwrap().grad().is_none());
    }

    #[test]
    fn freeze_plans_match_strategy_table() {
        use StrategyId::*;
        let task = |s| freeze_plan(s, Stage::Task).unwrap();
        assert_eq!(task(Stl), FreezePlan::new([Role::Head]));
        assert_eq!(task(FftTa), FreezePlan::new([Role::Backbone, Role::Head]));
        assert_eq!(task(Tape), FreezePlan::new([Role::TaskAdapter, Role::Head]));
        assert!(!task(Tape).is_trainable(Role::DomainAdapter));
        assert_eq!(
            freeze_plan(Tape, Stage::Domain).unwrap(),
            FreezePlan::new([Role::DomainAdapter, Role::Decoder])
        );
        assert!(freeze_plan(Stl, Stage::Domain).is_err());

        let mut store = ParamStore::<f32>::new();
        for r in Role::ALL {
            store.insert(r.as_str(), r, Tensor::zeros(&[1])).unwrap();
        }
        let plan = task(Tape);
        plan.apply(&mut store);
        plan.apply(&mut store);
        let names: Vec<String> = plan.trainable_names(&store).into_iter().collect();
        assert_eq!(names, vec!["head".to_string(), "task_adapter".to_string()]);
        assert_eq!(
            store.trainable_names(),
            vec!["task_adapter".to_string(), "head".to_string()]
        );
    }

    #[test]
    fn audit_table_renders_rows() {
        let rows: Vec<AuditReport> = ["fft", "lora", "adapter", "vpt"]
            .iter()
            .map(|k| audit("vit-large", &PeftConfig::from_name(k).unwrap()).unwrap())
            .collect();
        let text = render_audit_table(&rows);
        assert!(text.contains("10,240 (0.003%)"), "{text}");
        assert!(text.contains("3,145,728"));
        assert!(text.contains("835,968 (0.25%)"));
        let csv = render_audit_csv(&rows);
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.contains(",10240,"));
    }
}
