//! Strategy orchestration, checkpoints and run directories.

mod checkpoint;
mod compare;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mim::{init_stage1_state, run_stage1, FmKind, Stage1Config, Stage1Output};
use crate::numeric::AdamWConfig;
use crate::params::{materialize, ParamStore};
use crate::peft::{AdapterRole, PeftConfig, DEFAULT_RANK};
use crate::seg::{evaluate_state, init_stage2_state, run_stage2, MetricsRow, Stage2Config, Stage2Output};
use crate::synthdata::{Dataset, Split};
use crate::train::rng_for;
use crate::vit::{encoder_specs, ViTConfig};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, MAGIC, VERSION};
pub use compare::{compare_runs, load_run, Comparison, RunRecord};

pub const CONFIG_FILE: &str = "config.json";
pub const STAGE1_CKPT: &str = "stage1.ckpt";
pub const STAGE2_CKPT: &str = "stage2.ckpt";
pub const LOSSES_FILE: &str = "losses.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.txt";

/// The seven adaptation strategies compared end to end.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyId {
    /// Frozen encoder, OCT input only, head trained.
    StlOct,
    /// Frozen encoder, both modalities, head trained.
    Stl,
    /// Encoder and head fully fine-tuned together.
    FftTa,
    /// Task LoRA and head trained.
    Tlora,
    /// Full fine-tuning by reconstruction, then head only.
    FftDa,
    /// Domain LoRA by reconstruction, then head only.
    Dlora,
    /// Domain LoRA by reconstruction, then task LoRA and head.
    Tape,
}

impl StrategyId {
    pub const ALL: [StrategyId; 7] = [
        StrategyId::StlOct,
        StrategyId::Stl,
        StrategyId::FftTa,
        StrategyId::Tlora,
        StrategyId::FftDa,
        StrategyId::Dlora,
        StrategyId::Tape,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyId::StlOct => "stl-oct",
            StrategyId::Stl => "stl",
            StrategyId::FftTa => "fft-ta",
            StrategyId::Tlora => "tlora",
            StrategyId::FftDa => "fft-da",
            StrategyId::Dlora => "dlora",
            StrategyId::Tape => "tape",
        }
    }

    /// Display name used in result tables.
    pub fn label(self) -> &'static str {
        match self {
            StrategyId::StlOct => "STL_OCT",
            StrategyId::Stl => "STL",
            StrategyId::FftTa => "FFT_TA",
            StrategyId::Tlora => "TLORA",
            StrategyId::FftDa => "FFT_DA",
            StrategyId::Dlora => "DLORA",
            StrategyId::Tape => "TAPE",
        }
    }

    pub fn is_two_stage(self) -> bool {
        matches!(self, StrategyId::FftDa | StrategyId::Dlora | StrategyId::Tape)
    }
}

impl fmt::Display for StrategyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for StrategyId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('_', "-");
        StrategyId::ALL
            .into_iter()
            .find(|id| id.as_str() == norm)
            .ok_or_else(|| Error::Config(format!("unknown strategy `{s}`")))
    }
}

/// Everything needed to reproduce a run; stored as `config.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub preset: String,
    pub fm_kind: FmKind,
    pub strategy: StrategyId,
    pub seed: u64,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub stage1_batch_size: usize,
    pub stage2_batch_size: usize,
    pub stage1_optim: AdamWConfig,
    pub stage2_optim: AdamWConfig,
    /// Stage-I adapter of DLoRA/TAPE runs and of standalone pretraining.
    pub domain_peft: PeftConfig,
    /// Rank of the Stage-II task LoRA.
    pub task_rank: usize,
    pub data: PathBuf,
    pub out: PathBuf,
    /// Reuse this Stage-I checkpoint instead of running Stage I.
    pub stage1_checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            preset: "vit-tiny".to_string(),
            fm_kind: FmKind::Generic,
            strategy: StrategyId::Tape,
            seed: 42,
            stage1_epochs: 20,
            stage2_epochs: 30,
            stage1_batch_size: 16,
            stage2_batch_size: 8,
            stage1_optim: AdamWConfig::reconstruction(),
            stage2_optim: AdamWConfig::segmentation(),
            domain_peft: PeftConfig::lora(DEFAULT_RANK),
            task_rank: DEFAULT_RANK,
            data: PathBuf::new(),
            out: PathBuf::new(),
            stage1_checkpoint: None,
        }
    }
}

impl RunConfig {
    pub fn new(strategy: StrategyId, data: impl Into<PathBuf>, out: impl Into<PathBuf>) -> Self {
        RunConfig {
            strategy,
            data: data.into(),
            out: out.into(),
            ..Self::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn vit(&self) -> Result<ViTConfig> {
        ViTConfig::preset(&self.preset)
    }

    pub fn validate(&self) -> Result<()> {
        self.vit()?;
        if self.stage1_checkpoint.is_some() && !self.strategy.is_two_stage() {
            return Err(Error::Config(format!(
                "{} is single-stage and takes no Stage-I checkpoint",
                self.strategy
            )));
        }
        if self.stage1_batch_size == 0 || self.stage2_batch_size == 0 {
            return Err(Error::Config("batch sizes must be ≥ 1".into()));
        }
        if self.task_rank == 0 {
            return Err(Error::Config("task LoRA rank must be ≥ 1".into()));
        }
        self.domain_peft.validate()
    }

    /// Stage-I adaptation of a two-stage strategy.
    pub fn stage1_peft(&self) -> Option<PeftConfig> {
        match self.strategy {
            StrategyId::FftDa => Some(PeftConfig::fft()),
            StrategyId::Dlora | StrategyId::Tape => Some(self.domain_peft.clone().with_role(AdapterRole::Domain)),
            _ => None,
        }
    }

    pub fn stage1_config(&self, peft: PeftConfig) -> Result<Stage1Config> {
        let mut c = Stage1Config::new(self.vit()?, self.fm_kind, peft);
        c.epochs = self.stage1_epochs;
        c.batch_size = self.stage1_batch_size;
        c.optim = self.stage1_optim;
        c.seed = self.seed;
        Ok(c)
    }

    pub fn stage2_config(&self) -> Result<Stage2Config> {
        let domain = self.stage1_peft().filter(|p| !p.is_fft());
        let mut c = Stage2Config::new(self.vit()?, self.strategy, domain)?;
        if let Some(task) = c.task_adapter.as_mut() {
            *task = PeftConfig::lora(self.task_rank).with_role(AdapterRole::Task);
        }
        c.epochs = self.stage2_epochs;
        c.batch_size = self.stage2_batch_size;
        c.optim = self.stage2_optim;
        c.seed = self.seed;
        Ok(c)
    }

    /// Encoder weights every strategy starts from.
    pub fn backbone(&self) -> Result<ParamStore<f32>> {
        materialize(&encoder_specs(&self.vit()?), &mut rng_for(self.seed, 0))
    }
}

/// Creates `dir`, refusing to reuse a non-empty one unless `force`.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.as_os_str().is_empty() {
        return Err(Error::Config("no output directory given".into()));
    }
    if dir.exists() {
        let mut entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        if entries.next().is_some() && !force {
            return Err(Error::Config(format!(
                "{} already exists and is not empty (use --force to overwrite)",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// One row of `losses.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub stage: u8,
    pub epoch: usize,
    pub split: Split,
    pub metric: String,
    pub value: String,
}

fn stage1_rows(out: &Stage1Output) -> Vec<LossRow> {
    out.curve
        .iter()
        .map(|r| LossRow {
            stage: 1,
            epoch: r.epoch,
            split: r.split,
            metric: format!("mse_{}", r.modality),
            value: format!("{:.6}", r.loss),
        })
        .collect()
}

fn stage2_rows(out: &Stage2Output) -> Vec<LossRow> {
    let mut rows = Vec::new();
    for &(epoch, loss, val) in &out.curve {
        if let Some(l) = loss {
            rows.push(LossRow {
                stage: 2,
                epoch,
                split: Split::Train,
                metric: "cross_entropy".into(),
                value: format!("{l:.6}"),
            });
        }
        rows.push(LossRow {
            stage: 2,
            epoch,
            split: Split::Val,
            metric: "mdice".into(),
            value: format!("{val:.6}"),
        });
    }
    rows
}

fn to_csv<S: Serialize>(rows: &[S]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// `strategy,pathology,images,mdice,miou`, scores as fractions to six
/// decimals.
pub fn metrics_csv(strategy: StrategyId, rows: &[MetricsRow]) -> String {
    let mut s = String::from("strategy,pathology,images,mdice,miou\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{:.6},{:.6}\n",
            strategy.label(),
            r.pathology,
            r.images,
            r.mdice,
            r.miou
        ));
    }
    s
}

fn summary_text(cfg: &RunConfig, fingerprint: &str, body: &[(String, String)], table: &str) -> String {
    let mut s = format!(
        "strategy: {}\npreset: {}\nseed: {}\nfingerprint: {fingerprint}\n",
        cfg.strategy.label(),
        cfg.preset,
        cfg.seed
    );
    for (k, v) in body {
        s.push_str(&format!("{k}: {v}\n"));
    }
    if !table.is_empty() {
        s.push('\n');
        s.push_str(table);
    }
    s
}

/// Human-readable per-pathology table in percent.
pub fn render_metrics(rows: &[MetricsRow]) -> String {
    let mut s = format!("{:<8} {:>7} {:>8} {:>8}\n", "group", "images", "mDice", "mIoU");
    for r in rows {
        s.push_str(&format!(
            "{:<8} {:>7} {:>8.2} {:>8.2}\n",
            r.pathology,
            r.images,
            100.0 * r.mdice,
            100.0 * r.miou
        ));
    }
    s
}

fn open_dataset(cfg: &RunConfig) -> Result<Dataset> {
    if cfg.data.as_os_str().is_empty() {
        return Err(Error::Config("no dataset directory given".into()));
    }
    Dataset::open(&cfg.data)
}

#[derive(Clone, Debug)]
pub struct PretrainSummary {
    pub dir: PathBuf,
    pub fingerprint: String,
    pub output: Stage1Output,
}

/// Stage I alone with `cfg.domain_peft`: writes the config, the Stage-I
/// checkpoint, the loss curve and a summary into `cfg.out`.
pub fn run_pretrain(cfg: &RunConfig, force: bool) -> Result<PretrainSummary> {
    cfg.validate()?;
    let data = open_dataset(cfg)?;
    prepare_out_dir(&cfg.out, force)?;
    write(&cfg.out.join(CONFIG_FILE), cfg.to_json())?;
    let peft = cfg.domain_peft.clone().with_role(AdapterRole::Domain);
    let s1 = cfg.stage1_config(peft)?;
    let state = init_stage1_state(&s1, cfg.backbone()?)?;
    let out = run_stage1(&data.split(Split::Train), &data.split(Split::Test), &s1, state)?;
    save_checkpoint(&cfg.out.join(STAGE1_CKPT), &out.state)?;
    write(&cfg.out.join(LOSSES_FILE), to_csv(&stage1_rows(&out))?)?;
    let last = cfg.stage1_epochs;
    let fmt = |split| {
        out.loss_at(last, split)
            .map_or("n/a".to_string(), |l| format!("{l:.6}"))
    };
    let body = vec![
        ("stage".to_string(), "pretrain".to_string()),
        ("adaptation".to_string(), s1.peft.kind.to_string()),
        (
            "initial_train_loss".to_string(),
            out.loss_at(0, Split::Train).map_or("n/a".into(), |l| format!("{l:.6}")),
        ),
        ("final_train_loss".to_string(), fmt(Split::Train)),
        ("final_test_loss".to_string(), fmt(Split::Test)),
    ];
    write(
        &cfg.out.join(SUMMARY_FILE),
        summary_text(cfg, &data.fingerprint, &body, ""),
    )?;
    Ok(PretrainSummary {
        dir: cfg.out.clone(),
        fingerprint: data.fingerprint.clone(),
        output: out,
    })
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub fingerprint: String,
    pub best_epoch: usize,
    pub metrics: Vec<MetricsRow>,
    pub stage1: Option<Stage1Output>,
}

/// Runs one strategy end to end into `cfg.out`: Stage I when the strategy
/// has one (unless a Stage-I checkpoint is supplied), then Stage II with
/// best-validation selection and test evaluation.
pub fn run_strategy(cfg: &RunConfig, force: bool) -> Result<RunSummary> {
    cfg.validate()?;
    let data = open_dataset(cfg)?;
    let stage2 = cfg.stage2_config()?;
    prepare_out_dir(&cfg.out, force)?;
    write(&cfg.out.join(CONFIG_FILE), cfg.to_json())?;
    let (train, val, test) = (
        data.split(Split::Train),
        data.split(Split::Val),
        data.split(Split::Test),
    );

    let mut losses = Vec::new();
    let mut stage1 = None;
    let base = match (cfg.stage1_peft(), &cfg.stage1_checkpoint) {
        (None, _) => cfg.backbone()?,
        (Some(_), Some(path)) => {
            let state = load_checkpoint(path)?;
            save_checkpoint(&cfg.out.join(STAGE1_CKPT), &state)?;
            state
        }
        (Some(peft), None) => {
            let s1 = cfg.stage1_config(peft)?;
            let state = init_stage1_state(&s1, cfg.backbone()?)?;
            let out = run_stage1(&train, &test, &s1, state)?;
            save_checkpoint(&cfg.out.join(STAGE1_CKPT), &out.state)?;
            losses.extend(stage1_rows(&out));
            let state = out.state.clone();
            stage1 = Some(out);
            state
        }
    };

    let state = init_stage2_state(&stage2, base)?;
    let out = run_stage2(&train, &val, &test, &stage2, state)?;
    save_checkpoint(&cfg.out.join(STAGE2_CKPT), &out.state)?;
    losses.extend(stage2_rows(&out));
    write(&cfg.out.join(LOSSES_FILE), to_csv(&losses)?)?;
    write(&cfg.out.join(METRICS_FILE), metrics_csv(cfg.strategy, &out.test))?;
    let mut body = vec![
        ("best_epoch".to_string(), out.best_epoch.to_string()),
        (
            "trainable_stage2".to_string(),
            stage2.freeze_plan()?.trainable_names(&out.state).len().to_string(),
        ),
    ];
    if let Some(p) = &cfg.stage1_checkpoint {
        body.push(("stage1_checkpoint".to_string(), p.display().to_string()));
    }
    write(
        &cfg.out.join(SUMMARY_FILE),
        summary_text(cfg, &data.fingerprint, &body, &render_metrics(&out.test)),
    )?;
    Ok(RunSummary {
        dir: cfg.out.clone(),
        fingerprint: data.fingerprint.clone(),
        best_epoch: out.best_epoch,
        metrics: out.test,
        stage1,
    })
}

/// A finished run reloaded for evaluation.
pub struct LoadedRun {
    pub config: RunConfig,
    pub stage2: Stage2Config,
    pub state: ParamStore<f32>,
}

pub fn load_trained_run(dir: &Path) -> Result<LoadedRun> {
    let config = RunConfig::load(&dir.join(CONFIG_FILE))?;
    let stage2 = config.stage2_config()?;
    let state = load_checkpoint(&dir.join(STAGE2_CKPT))?;
    Ok(LoadedRun { config, stage2, state })
}

/// Scores a finished run's Stage-II checkpoint on one split of `data`
/// (or the run's own dataset).
pub fn evaluate_run(dir: &Path, data: Option<&Path>, split: Split) -> Result<(LoadedRun, Vec<MetricsRow>)> {
    let run = load_trained_run(dir)?;
    let ds = Dataset::open(data.unwrap_or(&run.config.data))?;
    let rows = evaluate_state(&run.stage2, &run.state, &ds.split(split))?;
    Ok((run, rows))
}

/// Reads `key: value` from a run's summary.
pub fn summary_field(dir: &Path, key: &str) -> Result<String> {
    let path = dir.join(SUMMARY_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .find_map(|l| l.strip_prefix(key)?.strip_prefix(": ").map(str::to_string))
        .ok_or_else(|| Error::format(&path, format!("no `{key}` entry")))
}
