//! `mrmtl` command line: train, calibrate, evaluate, sweep, report.
//!
//! A run is described by one JSON [`RunConfig`]; flags override fields of
//! it. Everything is validated before the first file is written. Output
//! layout under `output_dir`:
//!
//! ```text
//! mrmtl/            two-round bundle
//! srstl_nc{K}/      single-round baseline with K channel uses
//! calibration.json  from `calibrate`
//! evaluate/         report files from `evaluate`
//! sweep/            sweep.csv (+ SVG charts) from `sweep`
//! report/           full report from `report`, charts included
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::analysis::{self, BaselineResult, MrmtlResult, MrmtlSection, ProtocolReport, RunReport};
use crate::channel::{ChannelConfig, ChannelKind};
use crate::dataset::{self, Dataset, Sample};
use crate::error::{Error, Result};
use crate::models::{self, ArchitectureConfig, BundleKind, TrainConfig};
use crate::protocol::{self, CalibrationStats, GridSpec, SweepMode, ALWAYS_ESCALATE, DEFAULT_BINS};
use crate::rng::{self, tag};

pub const DATA_DIR_ENV: &str = "MRMTL_DATA_DIR";
pub const MRMTL_DIR: &str = "mrmtl";
pub const CALIBRATION_FILE: &str = "calibration.json";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSpec {
    /// Binary CIFAR-10; falls back to `$MRMTL_DATA_DIR` when `path` is unset.
    Cifar10 {
        #[serde(default)]
        path: Option<PathBuf>,
    },
    Synthetic {
        num_classes: usize,
        per_class: usize,
        #[serde(default)]
        seed: u64,
    },
}

/// Escalation threshold: a number, or `"auto"` for the calibrated midpoint.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DeltaSpec {
    Fixed(f64),
    Auto,
}

impl std::str::FromStr for DeltaSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(DeltaSpec::Auto);
        }
        s.parse()
            .map(DeltaSpec::Fixed)
            .map_err(|_| Error::arg(format!("delta must be a number or \"auto\", got {s:?}")))
    }
}

impl Serialize for DeltaSpec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            DeltaSpec::Fixed(v) => s.serialize_f64(*v),
            DeltaSpec::Auto => s.serialize_str("auto"),
        }
    }
}

impl<'de> Deserialize<'de> for DeltaSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(DeltaSpec::Fixed(v)),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Which samples the threshold is calibrated on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum CalibrationSource {
    /// The evaluation test split itself.
    Test,
    /// First half of the test split; evaluation uses the second half.
    Holdout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    pub delta: DeltaSpec,
    #[serde(with = "grid_text")]
    pub grid: GridSpec,
    pub calibration: CalibrationSource,
    pub bins: usize,
    pub sweep_mode: SweepMode,
    /// Seed of the evaluation channel draws; derived from the training and
    /// channel seeds when unset.
    #[serde(default)]
    pub eval_seed: Option<u64>,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            delta: DeltaSpec::Auto,
            grid: GridSpec::default(),
            calibration: CalibrationSource::Test,
            bins: DEFAULT_BINS,
            sweep_mode: SweepMode::Eager,
            eval_seed: None,
        }
    }
}

mod grid_text {
    use super::GridSpec;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(g: &GridSpec, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{}:{}:{}", g.start, g.step, g.stop))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<GridSpec, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub channel: ChannelConfig,
    pub arch: ArchitectureConfig,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub protocol: ProtocolConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetSpec::Cifar10 { path: None },
            channel: ChannelConfig::default(),
            arch: ArchitectureConfig::symmetric(5),
            training: TrainConfig::default(),
            protocol: ProtocolConfig::default(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    /// Small synthetic problem that trains in minutes on one core.
    pub fn desk_scale() -> Self {
        let mut cfg = RunConfig {
            output_dir: PathBuf::from("runs/desk"),
            ..RunConfig::default()
        };
        cfg.apply_desk_scale();
        cfg
    }

    pub fn apply_desk_scale(&mut self) {
        self.dataset = DatasetSpec::Synthetic {
            num_classes: DESK_CLASSES,
            per_class: DESK_PER_CLASS,
            seed: 0,
        };
        self.arch = ArchitectureConfig {
            num_classes: DESK_CLASSES,
            decoder_hidden: Some(DESK_DECODER_HIDDEN),
            ..ArchitectureConfig::symmetric(DESK_NC)
        };
        self.training.epochs = DESK_EPOCHS;
        self.training.batch = DESK_BATCH;
        self.training.lr = DESK_LR;
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid run config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Load {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// Dataset directory after the environment fallback.
    pub fn data_dir(&self) -> Result<Option<PathBuf>> {
        match &self.dataset {
            DatasetSpec::Synthetic { .. } => Ok(None),
            DatasetSpec::Cifar10 { path: Some(p) } => Ok(Some(p.clone())),
            DatasetSpec::Cifar10 { path: None } => std::env::var_os(DATA_DIR_ENV)
                .map(|p| Some(PathBuf::from(p)))
                .ok_or_else(|| Error::Config(format!("no CIFAR-10 path in the config and {DATA_DIR_ENV} is unset"))),
        }
    }

    /// Checks every field and every referenced path.
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.channel.validate()?;
        self.training.validate()?;
        match &self.dataset {
            DatasetSpec::Synthetic { num_classes, per_class, .. } => {
                if *num_classes < 2 {
                    return Err(Error::Config("synthetic num_classes must be >= 2".into()));
                }
                if *per_class < 2 {
                    return Err(Error::Config("synthetic per_class must be >= 2 to leave a test split".into()));
                }
                if *num_classes != self.arch.num_classes {
                    return Err(Error::Config(format!(
                        "dataset has {num_classes} classes, arch.num_classes is {}",
                        self.arch.num_classes
                    )));
                }
            }
            DatasetSpec::Cifar10 { .. } => {
                if self.arch.num_classes != dataset::NUM_CLASSES {
                    return Err(Error::Config(format!(
                        "CIFAR-10 has {} classes, arch.num_classes is {}",
                        dataset::NUM_CLASSES,
                        self.arch.num_classes
                    )));
                }
                let dir = self.data_dir()?.expect("cifar path");
                for name in dataset::TRAIN_FILES.iter().chain(std::iter::once(&dataset::TEST_FILE)) {
                    if !dir.join(name).is_file() {
                        return Err(Error::Config(format!("missing CIFAR-10 file {}", dir.join(name).display())));
                    }
                }
            }
        }
        if let DeltaSpec::Fixed(d) = self.protocol.delta {
            if !(0.0..=ALWAYS_ESCALATE).contains(&d) {
                return Err(Error::Config(format!("delta {d} outside [0, {ALWAYS_ESCALATE}]")));
            }
        }
        self.protocol.grid.values()?;
        if self.protocol.bins == 0 {
            return Err(Error::Config("protocol.bins must be >= 1".into()));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::Config("output_dir is empty".into()));
        }
        Ok(())
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        match &self.dataset {
            DatasetSpec::Synthetic { num_classes, per_class, seed } => dataset::make_synthetic(*num_classes, *per_class, *seed),
            DatasetSpec::Cifar10 { .. } => dataset::load_cifar10(&self.data_dir()?.expect("cifar path")),
        }
    }

    pub fn eval_seed(&self) -> u64 {
        self.protocol
            .eval_seed
            .unwrap_or_else(|| rng::derive_seed(self.training.seed, &[tag::EVAL, self.channel.seed]))
    }

    pub fn mrmtl_dir(&self) -> PathBuf {
        self.output_dir.join(MRMTL_DIR)
    }

    pub fn srstl_dir(&self, channel_uses: usize) -> PathBuf {
        self.output_dir.join(format!("srstl_nc{channel_uses}"))
    }
}

pub const DESK_CLASSES: usize = 10;
pub const DESK_PER_CLASS: usize = 40;
pub const DESK_NC: usize = 4;
pub const DESK_DECODER_HIDDEN: usize = 32;
pub const DESK_EPOCHS: usize = 5;
pub const DESK_BATCH: usize = 8;
pub const DESK_LR: f64 = 2e-3;

#[derive(Parser, Debug)]
#[command(name = "mrmtl", version, about = "Multi-round, multi-task task-oriented communications")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train the two-round model and/or single-round baselines.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_enum, default_value_t = Mode::Mrmtl)]
        mode: Mode,
    },
    /// Derive the escalation threshold from Round-1 confidences.
    Calibrate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run the protocol at one threshold and write a report.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        /// Threshold in [0, 1.01] or "auto".
        #[arg(long)]
        delta: Option<String>,
        #[arg(long)]
        svg: bool,
    },
    /// Sweep the threshold over a grid.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// start:step:stop
        #[arg(long)]
        grid: Option<String>,
        #[arg(long)]
        svg: bool,
    },
    /// Full report: baselines, protocol, calibration, sweep and charts.
    Report {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        delta: Option<String>,
        #[arg(long)]
        grid: Option<String>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Srstl,
    Mrmtl,
    All,
}

#[derive(Args, Debug, Clone, Default)]
pub struct CommonArgs {
    /// Run configuration JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Synthetic data, 5 epochs, n_c = 4.
    #[arg(long)]
    pub desk_scale: bool,
    /// Serial, seeded execution.
    #[arg(long)]
    pub deterministic: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads.
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// CIFAR-10 directory.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Channel-use budget per round.
    #[arg(long)]
    pub nc: Option<usize>,
    #[arg(long)]
    pub channel: Option<ChannelKind>,
    #[arg(long)]
    pub snr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Round-1 loss weight.
    #[arg(long)]
    pub w: Option<f64>,
    #[arg(long, value_enum)]
    pub calibration: Option<CalibrationSource>,
}

impl std::str::FromStr for ChannelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "awgn" => Ok(ChannelKind::Awgn),
            "rayleigh" => Ok(ChannelKind::Rayleigh),
            _ => Err(Error::arg(format!("unknown channel {s:?}, expected awgn or rayleigh"))),
        }
    }
}

impl CommonArgs {
    /// Config file (or defaults), then the desk preset, then flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None if self.desk_scale => RunConfig::desk_scale(),
            None => RunConfig::default(),
        };
        if self.desk_scale {
            cfg.apply_desk_scale();
        }
        if let Some(dir) = &self.data_dir {
            cfg.dataset = DatasetSpec::Cifar10 { path: Some(dir.clone()) };
        }
        if let Some(n) = self.nc {
            cfg.arch = ArchitectureConfig {
                n_c: n,
                n_c1: n,
                n_c2: n,
                ..cfg.arch
            };
        }
        if let Some(k) = self.channel {
            cfg.channel.kind = k;
        }
        if let Some(s) = self.snr {
            cfg.channel.snr_db = s;
        }
        if let Some(e) = self.epochs {
            cfg.training.epochs = e;
        }
        if let Some(b) = self.batch {
            cfg.training.batch = b;
        }
        if let Some(lr) = self.lr {
            cfg.training.lr = lr;
        }
        if let Some(w) = self.w {
            cfg.training.w = w;
        }
        if let Some(s) = self.seed {
            cfg.training.seed = s;
        }
        if self.deterministic {
            cfg.training.deterministic = true;
        }
        if let Some(c) = self.calibration {
            cfg.protocol.calibration = c;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        Ok(cfg)
    }

    fn threads(&self, cfg: &RunConfig) -> Result<usize> {
        match (cfg.training.deterministic, self.threads) {
            (_, Some(0)) => Err(Error::Config("--threads must be >= 1".into())),
            (true, _) => Ok(1),
            (false, Some(n)) => Ok(n),
            (false, None) => Ok(0),
        }
    }
}

/// Maps an error to the process exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Argument(_) | Error::Config(_) | Error::Load { .. } | Error::Format { .. } | Error::Json(_) | Error::Shape { .. } => {
            EXIT_USAGE
        }
        _ => EXIT_RUNTIME,
    }
}

/// Parses `args` (program name first) and runs the command, returning the
/// exit code. Errors are printed to stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    let common = match &command {
        Command::Train { common, .. }
        | Command::Calibrate { common }
        | Command::Evaluate { common, .. }
        | Command::Sweep { common, .. }
        | Command::Report { common, .. } => common.clone(),
    };
    let mut cfg = common.resolve()?;
    match &command {
        Command::Evaluate { delta: Some(d), .. } | Command::Report { delta: Some(d), .. } => {
            cfg.protocol.delta = d.parse().map_err(|e: Error| Error::Config(e.to_string()))?;
        }
        _ => {}
    }
    match &command {
        Command::Sweep { grid: Some(g), .. } | Command::Report { grid: Some(g), .. } => {
            cfg.protocol.grid = g.parse().map_err(|e: Error| Error::Config(e.to_string()))?;
        }
        _ => {}
    }
    cfg.validate()?;
    let threads = common.threads(&cfg)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| match command {
        Command::Train { mode, .. } => cmd_train(&cfg, mode).map(|_| ()),
        Command::Calibrate { .. } => cmd_calibrate(&cfg).map(|_| ()),
        Command::Evaluate { svg, .. } => cmd_evaluate(&cfg, &cfg.output_dir.join("evaluate"), svg).map(|_| ()),
        Command::Sweep { svg, .. } => cmd_sweep(&cfg, svg).map(|_| ()),
        Command::Report { .. } => cmd_evaluate(&cfg, &cfg.output_dir.join("report"), true).map(|_| ()),
    })
}

/// Trains per `mode` and writes bundles. Returns the bundle directories.
///
/// `srstl` trains one baseline with `n_c1` channel uses; `all` trains the
/// two-round model plus baselines at `n_c1` and `n_c1 + n_c2`.
pub fn cmd_train(cfg: &RunConfig, mode: Mode) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let data = cfg.load_dataset()?;
    let mut written = Vec::new();
    if mode != Mode::Srstl {
        eprintln!("training MRMTL (n_c1 = {}, n_c2 = {})", cfg.arch.n_c1, cfg.arch.n_c2);
        let (model, log) = models::train_mrmtl(&data, &cfg.arch, &cfg.channel, &cfg.training)?;
        for e in &log.epochs {
            eprintln!("  epoch {:>3}  loss {:.4}  test acc {:?}", e.epoch, e.loss, e.test_accuracy);
        }
        let dir = cfg.mrmtl_dir();
        let manifest = models::manifest_for(BundleKind::Mrmtl, &cfg.arch, &cfg.channel, &cfg.training, &data);
        models::save_mrmtl_bundle(&dir, &model, &manifest, &log)?;
        println!("wrote {}", dir.display());
        written.push(dir);
    }
    let budgets = match mode {
        Mode::Mrmtl => vec![],
        Mode::Srstl => vec![cfg.arch.n_c1],
        Mode::All => vec![cfg.arch.n_c1, cfg.arch.n_c1 + cfg.arch.n_c2],
    };
    for uses in budgets {
        let arch = ArchitectureConfig {
            n_c1: uses,
            ..cfg.arch
        };
        eprintln!("training SRSTL ({uses} channel uses)");
        let (model, log) = models::train_srstl(&data, &arch, &cfg.channel, &cfg.training)?;
        for e in &log.epochs {
            eprintln!("  epoch {:>3}  loss {:.4}  test acc {:?}", e.epoch, e.loss, e.test_accuracy);
        }
        let dir = cfg.srstl_dir(uses);
        let manifest = models::manifest_for(BundleKind::Srstl, &arch, &cfg.channel, &cfg.training, &data);
        models::save_srstl_bundle(&dir, &model, &manifest, &log)?;
        println!("wrote {}", dir.display());
        written.push(dir);
    }
    Ok(written)
}

/// Dataset, two-round model, and the calibration / evaluation splits.
struct Loaded {
    data: Dataset,
    model: models::MrmtlModel,
    split: usize,
}

impl Loaded {
    fn calibration_samples(&self, cfg: &RunConfig) -> &[Sample] {
        match cfg.protocol.calibration {
            CalibrationSource::Test => &self.data.test,
            CalibrationSource::Holdout => &self.data.test[..self.split],
        }
    }

    fn eval_samples(&self, cfg: &RunConfig) -> &[Sample] {
        match cfg.protocol.calibration {
            CalibrationSource::Test => &self.data.test,
            CalibrationSource::Holdout => &self.data.test[self.split..],
        }
    }
}

fn load_trained(cfg: &RunConfig) -> Result<Loaded> {
    let dir = cfg.mrmtl_dir();
    if !dir.join(models::BUNDLE_FILE).is_file() {
        return Err(Error::Config(format!("no trained bundle at {}; run `mrmtl train` first", dir.display())));
    }
    let data = cfg.load_dataset()?;
    let (model, manifest) = models::load_mrmtl_bundle(&dir)?;
    if manifest.dataset_hash != data.fingerprint() {
        return Err(Error::Config(format!("{} was trained on a different dataset", dir.display())));
    }
    if model.decoder1.output_shape() != [data.num_classes()] {
        return Err(Error::Config("bundle class count differs from the dataset".into()));
    }
    let split = data.test.len() / 2;
    if cfg.protocol.calibration == CalibrationSource::Holdout && split == 0 {
        return Err(Error::Config("test split too small for a calibration holdout".into()));
    }
    Ok(Loaded { data, model, split })
}

fn calibrate_loaded(cfg: &RunConfig, l: &Loaded) -> Result<CalibrationStats> {
    let mut stats = protocol::calibrate_threshold(&l.model, l.calibration_samples(cfg), &cfg.channel, cfg.eval_seed(), cfg.protocol.bins)?;
    stats.reused_test_split = cfg.protocol.calibration == CalibrationSource::Test;
    Ok(stats)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn cmd_calibrate(cfg: &RunConfig) -> Result<CalibrationStats> {
    let l = load_trained(cfg)?;
    let stats = calibrate_loaded(cfg, &l)?;
    println!("mean confidence (correct)   {:.6}", stats.mean_conf_correct);
    println!("mean confidence (incorrect) {:.6}", stats.mean_conf_incorrect);
    println!("delta*                      {:.6}", stats.delta_star);
    if !stats.separated {
        eprintln!("warning: correct decisions are not more confident than incorrect ones");
    }
    let path = cfg.output_dir.join(CALIBRATION_FILE);
    write_json(&path, &stats)?;
    println!("wrote {}", path.display());
    Ok(stats)
}

fn baselines(cfg: &RunConfig, samples: &[Sample]) -> Result<Vec<BaselineResult>> {
    let uses = [cfg.arch.n_c1, cfg.arch.n_c1 + cfg.arch.n_c2];
    let mut out = Vec::new();
    for (i, &u) in uses.iter().enumerate() {
        if i == 1 && u == uses[0] {
            break;
        }
        let dir = cfg.srstl_dir(u);
        if !dir.join(models::BUNDLE_FILE).is_file() {
            continue;
        }
        let (model, manifest) = models::load_srstl_bundle(&dir)?;
        out.push(BaselineResult {
            channel_uses: model.channel_uses(),
            channel: manifest.channel,
            test_accuracy: models::evaluate_round1(&model, samples, &cfg.channel, cfg.eval_seed())?,
        });
    }
    Ok(out)
}

/// Evaluates at the configured threshold and emits a report into `out`.
pub fn cmd_evaluate(cfg: &RunConfig, out: &Path, svg: bool) -> Result<RunReport> {
    let l = load_trained(cfg)?;
    let samples = l.eval_samples(cfg);
    let seed = cfg.eval_seed();
    let calibration = match calibrate_loaded(cfg, &l) {
        Ok(s) => Some(s),
        Err(e @ Error::Calibration(_)) if matches!(cfg.protocol.delta, DeltaSpec::Fixed(_)) => {
            eprintln!("warning: calibration skipped: {e}");
            None
        }
        Err(e) => return Err(e),
    };
    let (delta, delta_source) = match cfg.protocol.delta {
        DeltaSpec::Fixed(d) => (d, "fixed"),
        DeltaSpec::Auto => (calibration.as_ref().expect("calibrated").delta_star, "calibrated"),
    };
    let grid = cfg.protocol.grid.values()?;
    let cache = protocol::compute_round_cache(&l.model, samples, &cfg.channel, seed, None)?;
    let traces = analysis::trace_rows(&cache, delta)?;
    let summary = analysis::summarize(&traces)?;
    let sweep = protocol::sweep_rows(&cache, &grid)?;
    let result = MrmtlResult {
        n_c1: l.model.n_c1(),
        n_c2: l.model.n_c2(),
        channel: cfg.channel,
        round1_accuracy: summary.round1_accuracy,
        round2_accuracy: summary.round2_accuracy.expect("round 2 evaluated for every sample"),
    };
    let srstl = baselines(cfg, samples)?;
    let comparison = analysis::compare_srstl_mrmtl(&srstl, &result).ok();
    let report = RunReport {
        format_version: analysis::REPORT_FORMAT_VERSION,
        generated_at: analysis::timestamp_now(),
        config: serde_json::to_value(cfg)?,
        srstl,
        mrmtl: Some(MrmtlSection { result, comparison }),
        protocol: Some(ProtocolReport {
            delta,
            delta_source: delta_source.into(),
            eval_seed: seed,
            summary,
            sweep,
        }),
        calibration,
        traces,
        class_names: l.data.class_names.clone(),
    };
    analysis::emit_report(&report, out)?;
    if svg {
        write_charts(out, &report.protocol.as_ref().expect("protocol").sweep)?;
    }
    println!(
        "delta {delta:.4} ({delta_source}): accuracy {:.4}, average delay {:.4}, escalated {:.2}%",
        summary.accuracy,
        summary.avg_delay,
        100.0 * summary.escalation_rate
    );
    println!("wrote {}", out.display());
    Ok(report)
}

fn write_charts(dir: &Path, rows: &[protocol::SweepRow]) -> Result<()> {
    for (name, body) in analysis::sweep_charts(rows) {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

pub fn cmd_sweep(cfg: &RunConfig, svg: bool) -> Result<Vec<protocol::SweepRow>> {
    let l = load_trained(cfg)?;
    let grid = cfg.protocol.grid.values()?;
    let sweep = protocol::sweep_threshold(
        &l.model,
        l.eval_samples(cfg),
        &grid,
        &cfg.channel,
        cfg.eval_seed(),
        cfg.protocol.sweep_mode,
    )?;
    let out = cfg.output_dir.join("sweep");
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let path = out.join(analysis::SWEEP_FILE);
    fs::write(&path, analysis::sweep_csv(&sweep.rows)).map_err(|e| Error::io(&path, e))?;
    if svg {
        write_charts(&out, &sweep.rows)?;
    }
    println!("{} thresholds, wrote {}", sweep.rows.len(), path.display());
    Ok(sweep.rows)
}
