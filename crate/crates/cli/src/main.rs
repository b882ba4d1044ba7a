use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use tape_core::gradsuite::{self, CaseResult};
use tape_core::mim::FmKind;
use tape_core::peft::{self, PeftConfig};
use tape_core::pipeline::{self, RunConfig, StrategyId};
use tape_core::seg::predict;
use tape_core::synthdata::{self, Dataset, DatasetSpec, Split};
use tape_core::vit::ViTConfig;

/// Two-stage adapter training for retinal layer segmentation on synthetic
/// OCT/OCTA phantoms.
#[derive(Parser, Debug)]
#[command(name = "tape", version, propagate_version = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a phantom dataset with stratified train/val/test splits.
    GenData(GenDataArgs),
    /// Count total and trainable parameters of an adaptation method.
    Audit(AuditArgs),
    /// Stage I: masked-reconstruction domain adaptation.
    Pretrain(PretrainArgs),
    /// Stage II (after Stage I for two-stage strategies): segmentation.
    Adapt(AdaptArgs),
    /// Score a finished run's segmentation checkpoint.
    Eval(EvalArgs),
    /// Merge finished runs into one table ranked by overall mDice.
    Compare(CompareArgs),
    /// Run the finite-difference gradient suites.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Samples per pathology class.
    #[arg(long, default_value_t = 50)]
    n_per_class: usize,
    /// Image height and width in pixels.
    #[arg(long, default_value_t = synthdata::DEFAULT_SIZE)]
    size: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Replace an existing dataset in --out.
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Table,
    Csv,
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum)]
enum PeftName {
    Fft,
    Lora,
    Adapter,
    Vpt,
    All,
}

#[derive(Args, Debug)]
struct AdapterFlags {
    /// LoRA rank.
    #[arg(long, default_value_t = peft::DEFAULT_RANK)]
    rank: usize,
    /// ViT-Adapter bottleneck width.
    #[arg(long, default_value_t = peft::DEFAULT_BOTTLENECK)]
    bottleneck: usize,
    /// Number of VPT prompt tokens.
    #[arg(long, default_value_t = peft::DEFAULT_PROMPTS)]
    tokens: usize,
}

impl AdapterFlags {
    fn config(&self, name: PeftName) -> PeftConfig {
        match name {
            PeftName::Fft | PeftName::All => PeftConfig::fft(),
            PeftName::Lora => PeftConfig::lora(self.rank),
            PeftName::Adapter => PeftConfig::vit_adapter(self.bottleneck),
            PeftName::Vpt => PeftConfig::vpt(self.tokens),
        }
    }
}

#[derive(Args, Debug)]
struct AuditArgs {
    #[arg(long, default_value = "vit-large", value_parser = ViTConfig::PRESETS)]
    preset: String,
    #[arg(long, value_enum, default_value = "lora")]
    peft: PeftName,
    #[command(flatten)]
    adapter: AdapterFlags,
    #[arg(long, value_enum, default_value = "table")]
    format: Format,
}

#[derive(Args, Debug)]
struct CommonRunArgs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Run directory to create.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value = "vit-tiny", value_parser = ViTConfig::PRESETS)]
    preset: String,
    /// Foundation-model kind: generic reconstructs both modalities, domain only OCTA.
    #[arg(long, value_enum, default_value = "generic")]
    fm: FmArg,
    /// Start from a stored RunConfig; explicitly given flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overwrite a non-empty run directory.
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FmArg {
    Generic,
    Domain,
}

impl From<FmArg> for FmKind {
    fn from(f: FmArg) -> Self {
        match f {
            FmArg::Generic => FmKind::Generic,
            FmArg::Domain => FmKind::Domain,
        }
    }
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[command(flatten)]
    common: CommonRunArgs,
    #[arg(long, value_enum, default_value = "lora")]
    peft: PeftName,
    #[command(flatten)]
    adapter: AdapterFlags,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StrategyArg {
    StlOct,
    Stl,
    FftTa,
    Tlora,
    FftDa,
    Dlora,
    Tape,
}

impl From<StrategyArg> for StrategyId {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::StlOct => StrategyId::StlOct,
            StrategyArg::Stl => StrategyId::Stl,
            StrategyArg::FftTa => StrategyId::FftTa,
            StrategyArg::Tlora => StrategyId::Tlora,
            StrategyArg::FftDa => StrategyId::FftDa,
            StrategyArg::Dlora => StrategyId::Dlora,
            StrategyArg::Tape => StrategyId::Tape,
        }
    }
}

#[derive(Args, Debug)]
struct AdaptArgs {
    #[command(flatten)]
    common: CommonRunArgs,
    #[arg(long, value_enum, default_value = "tape")]
    strategy: StrategyArg,
    /// Stage-I checkpoint to reuse (two-stage strategies only).
    #[arg(long)]
    stage1: Option<PathBuf>,
    /// Stage-II epochs.
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    /// Stage-I epochs when Stage I runs here.
    #[arg(long, default_value_t = 20)]
    stage1_epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    /// Stage-II learning rate.
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Rank of the domain and task LoRA adapters.
    #[arg(long, default_value_t = peft::DEFAULT_RANK)]
    rank: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Run directory written by adapt.
    #[arg(long)]
    run: PathBuf,
    /// Evaluate on this dataset instead of the run's own.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Also write predicted and reference label maps (PGM) here.
    #[arg(long)]
    export: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
}

#[derive(Args, Debug)]
struct CompareArgs {
    /// Run directories written by adapt.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "table")]
    format: Format,
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum)]
enum SuiteArg {
    All,
    Numeric,
    Mim,
    Seg,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "all")]
    suite: SuiteArg,
    /// Coordinates probed per parameter tensor in the model suites.
    #[arg(long, default_value_t = 3)]
    probes: usize,
    /// Model geometry: vit-tiny, or a reduced one for a quick check.
    #[arg(long, value_enum, default_value = "vit-tiny")]
    geometry: GeometryArg,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum GeometryArg {
    VitTiny,
    Small,
}

/// Whether the user passed `id` rather than leaving its default.
fn explicit(m: &ArgMatches, id: &str) -> bool {
    matches!(
        m.value_source(id),
        Some(ValueSource::CommandLine | ValueSource::EnvVariable)
    )
}

fn base_config(common: &CommonRunArgs, m: &ArgMatches) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let fresh = common.config.is_none();
    if fresh || explicit(m, "seed") {
        cfg.seed = common.seed;
    }
    if fresh || explicit(m, "preset") {
        cfg.preset = common.preset.clone();
    }
    if fresh || explicit(m, "fm") {
        cfg.fm_kind = common.fm.into();
    }
    if let Some(d) = &common.data {
        cfg.data = d.clone();
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    if cfg.data.as_os_str().is_empty() {
        bail!(Usage("--data is required (directly or through --config)".into()));
    }
    if cfg.out.as_os_str().is_empty() {
        bail!(Usage("--out is required (directly or through --config)".into()));
    }
    Ok(cfg)
}

fn echo_config(cfg: &RunConfig) {
    eprintln!("seed: {}", cfg.seed);
    eprintln!("resolved config:\n{}", cfg.to_json());
}

/// A usage problem detected after parsing; exits with status 1.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    eprintln!("seed: {}", a.seed);
    if a.force && a.out.join(synthdata::INDEX_FILE).exists() {
        for entry in fs::read_dir(&a.out).with_context(|| format!("reading {}", a.out.display()))? {
            let path = entry?.path();
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            if name.ends_with(".timg") || name == synthdata::INDEX_FILE || name == synthdata::FINGERPRINT_FILE {
                fs::remove_file(&path).with_context(|| format!("removing {}", path.display()))?;
            }
        }
    }
    let spec = DatasetSpec {
        height: a.size,
        width: a.size,
        ..DatasetSpec::new(a.n_per_class, a.seed)
    };
    let fp = synthdata::gen_dataset(&a.out, &spec)?;
    println!("{fp}");
    Ok(())
}

fn audit(a: &AuditArgs) -> Result<()> {
    let names = if a.peft == PeftName::All {
        vec![PeftName::Fft, PeftName::Lora, PeftName::Adapter, PeftName::Vpt]
    } else {
        vec![a.peft]
    };
    let rows = names
        .into_iter()
        .map(|n| peft::audit(&a.preset, &a.adapter.config(n)))
        .collect::<tape_core::Result<Vec<_>>>()?;
    match a.format {
        Format::Table => print!("{}", peft::render_audit_table(&rows)),
        Format::Csv => print!("{}", peft::render_audit_csv(&rows)),
    }
    Ok(())
}

fn pretrain(a: &PretrainArgs, m: &ArgMatches) -> Result<()> {
    let mut cfg = base_config(&a.common, m)?;
    let fresh = a.common.config.is_none();
    if fresh || explicit(m, "peft") || explicit(m, "rank") || explicit(m, "bottleneck") || explicit(m, "tokens") {
        if a.peft == PeftName::All {
            bail!(Usage("--peft all is only meaningful for audit".into()));
        }
        cfg.domain_peft = a.adapter.config(a.peft);
    }
    if fresh || explicit(m, "epochs") {
        cfg.stage1_epochs = a.epochs;
    }
    if fresh || explicit(m, "batch_size") {
        cfg.stage1_batch_size = a.batch_size;
    }
    if fresh || explicit(m, "lr") {
        cfg.stage1_optim.lr = a.lr;
    }
    echo_config(&cfg);
    let s = pipeline::run_pretrain(&cfg, a.common.force)?;
    println!("epoch,split,modality,loss");
    for r in &s.output.curve {
        println!("{},{},{},{:.6}", r.epoch, r.split.as_str(), r.modality, r.loss);
    }
    eprintln!("wrote {}", s.dir.display());
    Ok(())
}

fn adapt(a: &AdaptArgs, m: &ArgMatches) -> Result<()> {
    let mut cfg = base_config(&a.common, m)?;
    let fresh = a.common.config.is_none();
    if fresh || explicit(m, "strategy") {
        cfg.strategy = a.strategy.into();
    }
    if let Some(p) = &a.stage1 {
        cfg.stage1_checkpoint = Some(p.clone());
    }
    if fresh || explicit(m, "epochs") {
        cfg.stage2_epochs = a.epochs;
    }
    if fresh || explicit(m, "stage1_epochs") {
        cfg.stage1_epochs = a.stage1_epochs;
    }
    if fresh || explicit(m, "batch_size") {
        cfg.stage2_batch_size = a.batch_size;
    }
    if fresh || explicit(m, "lr") {
        cfg.stage2_optim.lr = a.lr;
    }
    if fresh || explicit(m, "rank") {
        cfg.domain_peft = PeftConfig::lora(a.rank);
        cfg.task_rank = a.rank;
    }
    echo_config(&cfg);
    let s = pipeline::run_strategy(&cfg, a.common.force)?;
    print!("{}", pipeline::metrics_csv(cfg.strategy, &s.metrics));
    eprintln!("best epoch {}; wrote {}", s.best_epoch, s.dir.display());
    Ok(())
}

fn write_pgm(path: &Path, labels: &[u8], h: usize, w: usize) -> Result<()> {
    let scale = 255 / (synthdata::NUM_CLASSES as u8 - 1);
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(labels.iter().map(|&l| l * scale));
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn eval(a: &EvalArgs) -> Result<()> {
    let (run, rows) = pipeline::evaluate_run(&a.run, a.data.as_deref(), a.split.into())?;
    eprintln!("seed: {}", run.config.seed);
    match a.format {
        Format::Csv => print!("{}", pipeline::metrics_csv(run.config.strategy, &rows)),
        Format::Table => print!("{}", pipeline::render_metrics(&rows)),
    }
    if let Some(dir) = &a.export {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let ds = Dataset::open(a.data.as_deref().unwrap_or(&run.config.data))?;
        let split: Split = a.split.into();
        let names = ds
            .entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.filename.clone());
        for (sample, name) in ds.split(split).into_iter().zip(names) {
            let pred = predict(&run.stage2, &run.state, sample)?;
            let stem = name.trim_end_matches(".timg");
            let (h, w) = (sample.height(), sample.width());
            write_pgm(&dir.join(format!("{stem}_pred.pgm")), &pred, h, w)?;
            write_pgm(&dir.join(format!("{stem}_true.pgm")), &sample.labels, h, w)?;
        }
        eprintln!("label maps written to {}", dir.display());
    }
    Ok(())
}

fn compare(a: &CompareArgs) -> Result<()> {
    let c = pipeline::compare_runs(&a.runs)?;
    match a.format {
        Format::Table => print!("{}", c.render()),
        Format::Csv => print!("{}", c.to_csv()),
    }
    eprintln!("dataset fingerprint {}", c.fingerprint);
    Ok(())
}

fn gradcheck(a: &GradcheckArgs) -> Result<bool> {
    let vit = match a.geometry {
        GeometryArg::VitTiny => ViTConfig::vit_tiny(),
        GeometryArg::Small => gradsuite::small_vit(),
    };
    let mut results: Vec<CaseResult> = Vec::new();
    if matches!(a.suite, SuiteArg::All | SuiteArg::Numeric) {
        results.extend(gradsuite::op_suite()?);
    }
    if matches!(a.suite, SuiteArg::All | SuiteArg::Mim) {
        results.extend(gradsuite::mim_suite(&vit, a.probes)?);
    }
    if matches!(a.suite, SuiteArg::All | SuiteArg::Seg) {
        results.extend(gradsuite::seg_suite(&vit, None, a.probes)?);
    }
    let mut out = std::io::stdout().lock();
    writeln!(out, "suite,case,max_rel_error,coordinates,skipped,status")?;
    for r in &results {
        writeln!(
            out,
            "{},{},{:.3e},{},{},{}",
            r.suite,
            r.case,
            r.report.max_rel_error,
            r.report.coordinates,
            r.report.skipped,
            if r.passed() { "pass" } else { "FAIL" }
        )?;
    }
    Ok(results.iter().all(CaseResult::passed))
}

fn dispatch(cli: &Cli, m: &ArgMatches) -> Result<bool> {
    let sub = m.subcommand().map(|(_, s)| s).expect("subcommand is required");
    match &cli.command {
        Command::GenData(a) => gen_data(a)?,
        Command::Audit(a) => audit(a)?,
        Command::Pretrain(a) => pretrain(a, sub)?,
        Command::Adapt(a) => adapt(a, sub)?,
        Command::Eval(a) => eval(a)?,
        Command::Compare(a) => compare(a)?,
        Command::Gradcheck(a) => return gradcheck(a),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let matches = match Cli::command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match dispatch(&cli, &matches) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: gradient check failed");
            ExitCode::from(2)
        }
        Err(e) if e.is::<Usage>() => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

#[cfg(test)]
mod tests {
    use tape_core::peft::PeftKind;

    use super::*;

    #[test]
    fn command_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn peft_flags_map_to_configs() {
        let f = AdapterFlags {
            rank: 4,
            bottleneck: 16,
            tokens: 5,
        };
        assert_eq!(f.config(PeftName::Lora), PeftConfig::lora(4));
        assert!(matches!(
            f.config(PeftName::Adapter).kind,
            PeftKind::VitAdapter { bottleneck: 16 }
        ));
        assert!(matches!(f.config(PeftName::Vpt).kind, PeftKind::Vpt { num_tokens: 5 }));
    }
}
