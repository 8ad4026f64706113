//! Command-line driver: configuration, experiment directories, the run
//! ledger and one function per subcommand.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::da::{train_da, GrlConfig};
use crate::data::{
    build_segment_index, extract_piano_subset, format_manifest, load_manifest, read_id_list, read_manifest,
    sample_segments, split_by_artist, ClipRecord, Domain, Sample, SegmentIndex, SplitAssignment, SplitFractions,
    FEATURE_NAMES, SEGMENT_SECONDS,
};
use crate::distill::{pseudo_label, select_teachers, train_student, DistillConfig, PseudoLabelledSet};
use crate::dsp::{read_cache, read_wav, resample, wav_info, write_cache, Spectrogram, SpectrogramConfig, SpectrogramExtractor};
use crate::error::{Error, Result};
use crate::metrics::{
    average_features_over_time, evaluate, format_correlation_table, format_r2_table, model_discrepancy, probe_report,
};
use crate::net::{build_model, load_checkpoint, save_checkpoint, DiscriminatorConfig, ModelCheckpoint, RfResNetConfig};
use crate::pipeline::{run_synthetic_pipeline, PipelineConfig, PipelineReport};
use crate::train::{format_epoch_log, train_supervised, TrainConfig, TrainOutcome};

/// Environment variable naming the directory relative audio paths resolve
/// against.
pub const DATA_ROOT_ENV: &str = "MIDLEVEL_DATA_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub data_root: PathBuf,
    /// Labelled source manifest.
    pub source_manifest: Option<PathBuf>,
    /// Long unlabelled target recordings (WAV).
    pub target_recordings: Vec<PathBuf>,
    /// Optional list of clip ids reserved as the piano test set.
    pub piano_test_ids: Option<PathBuf>,
    /// Parent of timestamped experiment directories.
    pub output_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data_root: PathBuf::from("."),
            source_manifest: None,
            target_recordings: Vec::new(),
            piano_test_ids: None,
            output_dir: PathBuf::from("runs"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SeedConfig {
    pub split: u64,
    pub baseline: u64,
    /// Adversarial run `i` uses `da + i`.
    pub da: u64,
    pub pseudo: u64,
    pub student: u64,
}

impl Default for SeedConfig {
    fn default() -> Self {
        Self {
            split: 0,
            baseline: 1,
            da: 100,
            pseudo: 7,
            student: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub paths: PathsConfig,
    pub spectrogram: SpectrogramConfig,
    pub model: RfResNetConfig,
    pub split: SplitFractions,
    pub train: TrainConfig,
    pub grl: GrlConfig,
    /// Hidden widths of the discriminator; empty uses a quarter of the
    /// embedding width.
    pub discriminator_hidden: Vec<usize>,
    pub distill: DistillConfig,
    pub seeds: SeedConfig,
    /// Settings of `synth-e2e`.
    pub synthetic: PipelineConfig,
    pub synthetic_seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            paths: PathsConfig::default(),
            spectrogram: SpectrogramConfig::default(),
            model: RfResNetConfig::default(),
            split: SplitFractions::default(),
            train: TrainConfig::default(),
            grl: GrlConfig::default(),
            discriminator_hidden: Vec::new(),
            distill: DistillConfig::default(),
            seeds: SeedConfig::default(),
            synthetic: PipelineConfig::default(),
            synthetic_seeds: vec![1, 2, 3, 4, 5],
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.spectrogram.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.grl.validate()?;
        self.distill.validate()?;
        self.synthetic.validate()?;
        if self.synthetic_seeds.is_empty() {
            return Err(Error::Config("synthetic_seeds must not be empty".into()));
        }
        let frames = self.spectrogram.frame_count(SEGMENT_SECONDS as usize * self.spectrogram.sample_rate as usize);
        if self.model.input_shape != [self.spectrogram.bands, frames] {
            return Err(Error::Config(format!(
                "model input {:?} does not match spectrogram shape [{}, {frames}]",
                self.model.input_shape, self.spectrogram.bands
            )));
        }
        Ok(())
    }

    pub fn discriminator(&self) -> DiscriminatorConfig {
        let mut c = DiscriminatorConfig::for_model(&self.model);
        if !self.discriminator_hidden.is_empty() {
            c.hidden.clone_from(&self.discriminator_hidden);
        }
        c
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Apply `a.b.c=value` overrides to a TOML table. Values parse as TOML
/// where possible (numbers, booleans, arrays) and as strings otherwise.
pub fn apply_overrides(mut table: toml::Table, overrides: &[String]) -> Result<toml::Table> {
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{o}` is not KEY=VALUE")))?;
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let parts: Vec<&str> = key.trim().split('.').collect();
        let mut cur = &mut table;
        for p in &parts[..parts.len() - 1] {
            let entry = cur
                .entry(p.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            cur = entry
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
        }
        cur.insert(parts[parts.len() - 1].to_string(), value);
    }
    Ok(table)
}

/// Resolve a configuration from an optional file plus overrides and the
/// data-root environment variable.
pub fn resolve_config(file: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let base = match file {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str::<toml::Table>(&text).map_err(|e| Error::parse(p.display().to_string(), e.to_string()))?
        }
        None => toml::Table::new(),
    };
    let table = apply_overrides(base, overrides)?;
    let mut config: ExperimentConfig =
        toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    if let Ok(root) = std::env::var(DATA_ROOT_ENV) {
        config.paths.data_root = PathBuf::from(root);
    }
    config.validate()?;
    Ok(config)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub stage: String,
    /// Paths relative to the experiment directory.
    pub artifacts: Vec<String>,
    /// Stages whose artifacts were consumed.
    pub consumed: Vec<String>,
}

/// Record of completed stages in an experiment directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLedger {
    pub entries: Vec<LedgerEntry>,
}

impl RunLedger {
    const FILE: &'static str = "ledger.json";

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(Self::FILE);
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_text(&dir.join(Self::FILE), &to_json(self)?)
    }

    pub fn latest(&self, stage: &str) -> Option<&LedgerEntry> {
        self.entries.iter().rev().find(|e| e.stage == stage)
    }

    pub fn require(&self, stage: &str, needed_by: &str) -> Result<&LedgerEntry> {
        self.latest(stage).ok_or_else(|| {
            Error::MissingArtifact(format!("`{needed_by}` needs the output of `{stage}`, which has not run in this experiment"))
        })
    }

    pub fn record(&mut self, stage: &str, artifacts: Vec<String>, consumed: &[&str]) {
        self.entries.push(LedgerEntry {
            stage: stage.to_string(),
            artifacts,
            consumed: consumed.iter().map(|s| s.to_string()).collect(),
        });
    }
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map(|s| s + "\n").map_err(|e| Error::Config(e.to_string()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))
}

#[derive(Parser, Debug)]
#[command(name = "midlevel", version, about = "Domain-adapted mid-level feature regression")]
pub struct Cli {
    /// TOML experiment configuration; every key has a default.
    #[arg(short, long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set train.learning_rate=0.01`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Experiment directory to create or continue. Defaults to a new
    /// timestamped directory under `paths.output_dir`.
    #[arg(short, long, global = true)]
    pub exp_dir: Option<PathBuf>,
    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Extract spectrograms, split the source set by artist and index target segments.
    Prep,
    /// Train the supervised baseline.
    TrainBaseline,
    /// Train adversarial teacher candidates.
    TrainDa {
        /// Number of runs; defaults to `distill.candidates`.
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Keep the best adversarial runs by validation score.
    SelectTeachers,
    /// Label a random target subset with the teacher ensemble.
    PseudoLabel,
    /// Train a student on source plus pseudo-labelled clips.
    TrainStudent,
    /// Distance between mean embeddings of two manifests.
    Discrepancy {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Model whose embedding is used; defaults to a freshly
        /// initialized model from the config.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score a checkpoint on a labelled manifest.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Linear probes from mid-level features to descriptive dimensions.
    Probe {
        /// CSV of `id` plus the seven feature columns.
        #[arg(long)]
        features: Option<PathBuf>,
        /// CSV of `id` plus one column per dimension.
        #[arg(long)]
        dimensions: PathBuf,
        /// Compute features with this model instead of reading them.
        #[arg(long, requires = "performances")]
        checkpoint: Option<PathBuf>,
        /// CSV of `id,audio_path` for whole performances.
        #[arg(long)]
        performances: Option<PathBuf>,
        /// Row label in the R² table.
        #[arg(long, default_value = "model")]
        name: String,
    },
    /// Run the full pipeline on the synthetic two-domain task.
    SynthE2e,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Prep => "prep",
            Command::TrainBaseline => "train-baseline",
            Command::TrainDa { .. } => "train-da",
            Command::SelectTeachers => "select-teachers",
            Command::PseudoLabel => "pseudo-label",
            Command::TrainStudent => "train-student",
            Command::Discrepancy { .. } => "discrepancy",
            Command::Evaluate { .. } => "evaluate",
            Command::Probe { .. } => "probe",
            Command::SynthE2e => "synth-e2e",
        }
    }
}

/// State shared by subcommands: resolved config, experiment directory and
/// ledger.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub dir: PathBuf,
    pub ledger: RunLedger,
}

impl Experiment {
    /// Open `dir` (or create a timestamped directory) and store the
    /// resolved configuration. A directory that already holds a
    /// configuration keeps it as the base for overrides.
    pub fn open(cli: &Cli) -> Result<Self> {
        let dir = match &cli.exp_dir {
            Some(d) => d.clone(),
            None => {
                let base = resolve_config(cli.config.as_deref(), &cli.overrides)?;
                timestamped_dir(&base.paths.output_dir)?
            }
        };
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let stored = dir.join("config.toml");
        let config = if stored.exists() && cli.config.is_none() {
            resolve_config(Some(&stored), &cli.overrides)?
        } else {
            resolve_config(cli.config.as_deref(), &cli.overrides)?
        };
        let text = config.to_toml()?;
        if !stored.exists() {
            write_text(&stored, &text)?;
        } else if fs::read_to_string(&stored).map_err(|e| Error::io(&stored, e))? != text {
            write_text(&dir.join(format!("config.{}.toml", cli.command.name())), &text)?;
        }
        let ledger = RunLedger::load(&dir)?;
        Ok(Self { config, dir, ledger })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn resolve_audio(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.config.paths.data_root.join(p)
        }
    }

    fn finish(&mut self, stage: &str, artifacts: Vec<String>, consumed: &[&str]) -> Result<()> {
        self.ledger.record(stage, artifacts, consumed);
        self.ledger.save(&self.dir)
    }
}

fn timestamped_dir(parent: &Path) -> Result<PathBuf> {
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S").to_string();
    let mut dir = parent.join(&stamp);
    let mut i = 1;
    while dir.exists() {
        dir = parent.join(format!("{stamp}-{i}"));
        i += 1;
    }
    Ok(dir)
}

/// Log file of the current run. The logger is process-global, so each run
/// swaps its own file in.
static LOG_FILE: Mutex<Option<fs::File>> = Mutex::new(None);

/// Writes log lines to stderr and to the current run's log file.
struct Tee;

impl Write for Tee {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        std::io::stderr().write_all(buf)?;
        if let Some(f) = LOG_FILE.lock().expect("log file lock").as_mut() {
            f.write_all(buf)?;
        }
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        match LOG_FILE.lock().expect("log file lock").as_mut() {
            Some(f) => f.flush(),
            None => Ok(()),
        }
    }
}

fn init_logging(verbose: u8, file: Option<&Path>) {
    let level = match verbose {
        0 => log::LevelFilter::Info,
        1 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    *LOG_FILE.lock().expect("log file lock") =
        file.and_then(|p| fs::OpenOptions::new().create(true).append(true).open(p).ok());
    let mut b = env_logger::Builder::new();
    b.filter_level(level).parse_default_env();
    b.target(env_logger::Target::Pipe(Box::new(Tee)));
    let _ = b.try_init();
}

/// Parse arguments, run, and map errors to a nonzero exit status.
pub fn main() -> std::process::ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            std::process::ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            std::process::ExitCode::FAILURE
        }
    }
}

/// Run one subcommand; returns the experiment directory.
pub fn run(cli: &Cli) -> Result<PathBuf> {
    let mut exp = Experiment::open(cli)?;
    init_logging(cli.verbose, Some(&exp.path("run.log")));
    log::info!("{} in {}", cli.command.name(), exp.dir.display());
    match &cli.command {
        Command::Prep => prep(&mut exp)?,
        Command::TrainBaseline => train_baseline(&mut exp)?,
        Command::TrainDa { runs } => train_da_runs(&mut exp, *runs)?,
        Command::SelectTeachers => select(&mut exp)?,
        Command::PseudoLabel => pseudo(&mut exp)?,
        Command::TrainStudent => student(&mut exp)?,
        Command::Discrepancy {
            source,
            target,
            checkpoint,
        } => discrepancy(&mut exp, source, target, checkpoint.as_deref())?,
        Command::Evaluate { checkpoint, manifest } => evaluate_cmd(&mut exp, checkpoint, manifest)?,
        Command::Probe {
            features,
            dimensions,
            checkpoint,
            performances,
            name,
        } => probe(&mut exp, features.as_deref(), dimensions, checkpoint.as_deref(), performances.as_deref(), name)?,
        Command::SynthE2e => synth_e2e(&mut exp)?,
    }
    Ok(exp.dir)
}

fn cache_name(clip_id: &str) -> String {
    use sha2::{Digest, Sha256};
    format!("{}.spec", &hex::encode(Sha256::digest(clip_id.as_bytes()))[..20])
}

/// Spectrograms for manifest records, cached under `spec/` in the
/// experiment directory. Records whose path ends in `.spec` are read as
/// caches directly; `<stem>@<offset>` ids read one segment.
fn spectrograms(exp: &Experiment, records: &[ClipRecord]) -> Result<Vec<Arc<Spectrogram>>> {
    let cfg = &exp.config.spectrogram;
    let extractor = SpectrogramExtractor::new(cfg.clone())?;
    let cache_dir = exp.path("spec");
    fs::create_dir_all(&cache_dir).map_err(|e| Error::io(&cache_dir, e))?;
    let mut out: Vec<Option<Arc<Spectrogram>>> = vec![None; records.len()];
    let mut by_file: BTreeMap<PathBuf, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        let audio = exp.resolve_audio(&r.audio_path);
        if audio.extension().is_some_and(|e| e == "spec") {
            out[i] = Some(Arc::new(read_cache(&audio, None)?));
            continue;
        }
        let cached = cache_dir.join(cache_name(&r.clip_id));
        if cached.exists() {
            out[i] = Some(Arc::new(read_cache(&cached, Some(cfg))?));
        } else {
            by_file.entry(audio).or_default().push(i);
        }
    }
    let seg_len = SEGMENT_SECONDS as usize * cfg.sample_rate as usize;
    for (path, idx) in by_file {
        let audio = read_wav(&path)?;
        for i in idx {
            let r = &records[i];
            let native_len = SEGMENT_SECONDS as usize * audio.sample_rate as usize;
            let start = r.segment_offset().unwrap_or(0) as usize;
            if start >= audio.samples.len() {
                return Err(Error::TooShort {
                    samples: audio.samples.len(),
                    required: start + native_len,
                });
            }
            let end = (start + native_len).min(audio.samples.len());
            let mut pcm = resample(&audio.samples[start..end], audio.sample_rate, cfg.sample_rate)?;
            pcm.resize(seg_len, 0.0);
            let spec = extractor.compute(&pcm)?;
            write_cache(&cache_dir.join(cache_name(&r.clip_id)), &spec)?;
            out[i] = Some(Arc::new(spec));
        }
    }
    Ok(out.into_iter().map(|s| s.expect("every record handled")).collect())
}

fn samples(exp: &Experiment, records: &[ClipRecord]) -> Result<Vec<Sample>> {
    let specs = spectrograms(exp, records)?;
    Ok(records
        .iter()
        .zip(specs)
        .map(|(r, input)| Sample {
            id: r.clip_id.clone(),
            input,
            label: r.labels,
        })
        .collect())
}

const SPLIT_FILE: &str = "split.tsv";
const SOURCE_FILE: &str = "source_manifest.csv";
const SEGMENTS_FILE: &str = "target_segments.json";

fn prep(exp: &mut Experiment) -> Result<()> {
    let manifest = exp
        .config
        .paths
        .source_manifest
        .clone()
        .ok_or_else(|| Error::Config("paths.source_manifest is not set".into()))?;
    let records = load_manifest(&exp.resolve_audio(&manifest))?;
    let source: Vec<ClipRecord> = records.into_iter().filter(|r| r.domain == Domain::Source).collect();
    let piano_ids = match &exp.config.paths.piano_test_ids {
        Some(p) => read_id_list(&exp.resolve_audio(p))?,
        None => Vec::new(),
    };
    let (piano, rest) = extract_piano_subset(&source, &piano_ids)?;
    let mut split = split_by_artist(&rest, exp.config.split, exp.config.seeds.split)?;
    split.assign_piano_test(piano.into_iter().map(|r| r.clip_id))?;
    log::info!("extracting {} source spectrograms", source.len());
    spectrograms(exp, &source)?;
    write_text(&exp.path(SOURCE_FILE), &format_manifest(&source, None)?)?;
    write_text(&exp.path(SPLIT_FILE), &split.to_split_file())?;

    let mut indices = Vec::new();
    for rec in &exp.config.paths.target_recordings {
        let path = exp.resolve_audio(rec);
        let (n, sr) = wav_info(&path)?;
        match build_segment_index(&path, n, sr) {
            Ok(idx) => indices.push(idx),
            Err(Error::TooShort { .. }) => log::warn!("{} is shorter than one segment; skipped", path.display()),
            Err(e) => return Err(e),
        }
    }
    let segments: usize = indices.iter().map(|i| i.offsets.len()).sum();
    log::info!("{} target segments from {} recordings", segments, indices.len());
    write_text(&exp.path(SEGMENTS_FILE), &to_json(&indices)?)?;
    exp.finish(
        "prep",
        vec![SOURCE_FILE.into(), SPLIT_FILE.into(), SEGMENTS_FILE.into(), "spec".into()],
        &[],
    )
}

struct SourceSets {
    train: Vec<Sample>,
    val: Vec<Sample>,
}

fn source_sets(exp: &Experiment) -> Result<SourceSets> {
    let records = load_manifest(&exp.path(SOURCE_FILE))?;
    let text = fs::read_to_string(exp.path(SPLIT_FILE)).map_err(|e| Error::io(exp.path(SPLIT_FILE), e))?;
    let split = SplitAssignment::from_split_file(&text, exp.config.seeds.split)?;
    let pick = |set: &std::collections::BTreeSet<String>| -> Vec<ClipRecord> {
        records.iter().filter(|r| set.contains(&r.clip_id)).cloned().collect()
    };
    Ok(SourceSets {
        train: samples(exp, &pick(&split.train))?,
        val: samples(exp, &pick(&split.validation))?,
    })
}

fn save_outcome(exp: &Experiment, outcome: &TrainOutcome, name: &str) -> Result<Vec<String>> {
    save_outcome_in(exp, outcome, "checkpoints", "logs", name)
}

fn save_outcome_in(exp: &Experiment, outcome: &TrainOutcome, ckpt_dir: &str, log_dir: &str, name: &str) -> Result<Vec<String>> {
    let ckpt = format!("{ckpt_dir}/{name}.ckpt");
    let log = format!("{log_dir}/{name}.csv");
    fs::create_dir_all(exp.path(ckpt_dir)).map_err(|e| Error::io(exp.path(ckpt_dir), e))?;
    save_checkpoint(&exp.path(&ckpt), &outcome.checkpoint)?;
    write_text(&exp.path(&log), &format_epoch_log(&outcome.log))?;
    Ok(vec![ckpt, log])
}

fn train_baseline(exp: &mut Experiment) -> Result<()> {
    exp.ledger.require("prep", "train-baseline")?;
    let sets = source_sets(exp)?;
    let cfg = TrainConfig {
        seed: exp.config.seeds.baseline,
        ..exp.config.train.clone()
    };
    let init = build_model(&exp.config.model, cfg.seed)?;
    let outcome = train_supervised(&init, &sets.train, &sets.val, &cfg)?;
    log::info!("baseline validation r {:.4}", outcome.validation.avg_pearson);
    let artifacts = save_outcome(exp, &outcome, "baseline")?;
    exp.finish("train-baseline", artifacts, &["prep"])
}

fn target_indices(exp: &Experiment) -> Result<Vec<SegmentIndex>> {
    read_json(&exp.path(SEGMENTS_FILE))
}

fn train_da_runs(exp: &mut Experiment, runs: Option<usize>) -> Result<()> {
    exp.ledger.require("prep", "train-da")?;
    let runs = runs.unwrap_or(exp.config.distill.candidates);
    let sets = source_sets(exp)?;
    let indices = target_indices(exp)?;
    let disc = exp.config.discriminator();
    let mut artifacts = Vec::new();
    for i in 0..runs {
        let seed = exp.config.seeds.da + i as u64;
        let cfg = TrainConfig {
            seed,
            ..exp.config.train.clone()
        };
        // A fresh target pool the size of the source training set per run.
        let pool_records = sample_segments(&indices, sets.train.len(), seed)?;
        let pool = samples(exp, &pool_records)?;
        log::info!("adversarial run {}/{runs} (seed {seed})", i + 1);
        let (outcome, _) = train_da(
            &build_model(&exp.config.model, seed)?,
            &sets.train,
            &pool,
            &sets.val,
            &cfg,
            &exp.config.grl,
            &disc,
        )?;
        artifacts.extend(save_outcome(exp, &outcome, &outcome.checkpoint.id)?);
    }
    exp.finish("train-da", artifacts, &["prep"])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherSelection {
    pub candidates: Vec<(String, f64)>,
    pub selected: Vec<String>,
}

const TEACHERS_FILE: &str = "teachers.json";

fn select(exp: &mut Experiment) -> Result<()> {
    let entry = exp.ledger.require("train-da", "select-teachers")?.clone();
    let sets = source_sets(exp)?;
    let candidates = entry
        .artifacts
        .iter()
        .filter(|a| a.ends_with(".ckpt"))
        .map(|a| load_checkpoint(&exp.path(a)))
        .collect::<Result<Vec<_>>>()?;
    let pool = select_teachers(candidates, &sets.val, exp.config.distill.k)?;
    let sel = TeacherSelection {
        candidates: pool.candidates.iter().map(|c| c.id.clone()).zip(pool.scores.iter().copied()).collect(),
        selected: pool.teachers().iter().map(|t| format!("checkpoints/{}.ckpt", t.id)).collect(),
    };
    log::info!("selected {:?}", sel.selected);
    write_text(&exp.path(TEACHERS_FILE), &to_json(&sel)?)?;
    exp.finish("select-teachers", vec![TEACHERS_FILE.into()], &["train-da"])
}

const PSEUDO_FILE: &str = "pseudo_manifest.csv";
const PSEUDO_INFO: &str = "pseudo_labels.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoInfo {
    pub teachers: Vec<String>,
    pub subset_hash: String,
    pub labelled: usize,
    pub excluded: Vec<String>,
}

fn pseudo(exp: &mut Experiment) -> Result<()> {
    exp.ledger.require("select-teachers", "pseudo-label")?;
    let sel: TeacherSelection = read_json(&exp.path(TEACHERS_FILE))?;
    let teachers = sel
        .selected
        .iter()
        .map(|p| load_checkpoint(&exp.path(p)))
        .collect::<Result<Vec<ModelCheckpoint>>>()?;
    let train_size = {
        let text = fs::read_to_string(exp.path(SPLIT_FILE)).map_err(|e| Error::io(exp.path(SPLIT_FILE), e))?;
        SplitAssignment::from_split_file(&text, exp.config.seeds.split)?.train.len()
    };
    let n = exp.config.distill.pseudo_count(train_size);
    let records = sample_segments(&target_indices(exp)?, n, exp.config.seeds.pseudo)?;
    let subset = samples(exp, &records)?;
    let refs: Vec<&ModelCheckpoint> = teachers.iter().collect();
    let set = pseudo_label(&refs, &subset, exp.config.distill.clip_labels)?;
    write_pseudo(exp, &set, &records)?;
    exp.finish("pseudo-label", vec![PSEUDO_FILE.into(), PSEUDO_INFO.into()], &["select-teachers", "prep"])
}

fn write_pseudo(exp: &Experiment, set: &PseudoLabelledSet, records: &[ClipRecord]) -> Result<()> {
    let meta: HashMap<&str, &ClipRecord> = records.iter().map(|r| (r.clip_id.as_str(), r)).collect();
    let (rows, prov) = set.to_manifest(&meta)?;
    write_text(&exp.path(PSEUDO_FILE), &format_manifest(&rows, Some(&prov))?)?;
    let info = PseudoInfo {
        teachers: set.teacher_ids.clone(),
        subset_hash: set.subset_hash.clone(),
        labelled: set.samples.len(),
        excluded: set.excluded.clone(),
    };
    write_text(&exp.path(PSEUDO_INFO), &to_json(&info)?)
}

fn student(exp: &mut Experiment) -> Result<()> {
    exp.ledger.require("pseudo-label", "train-student")?;
    let sets = source_sets(exp)?;
    let manifest = read_manifest(&exp.path(PSEUDO_FILE))?;
    let info: PseudoInfo = read_json(&exp.path(PSEUDO_INFO))?;
    let pseudo = PseudoLabelledSet {
        samples: samples(exp, &manifest.records)?,
        teacher_ids: info.teachers,
        subset_hash: info.subset_hash,
        excluded: info.excluded,
    };
    let cfg = TrainConfig {
        seed: exp.config.seeds.student,
        ..exp.config.train.clone()
    };
    let outcome = train_student(&exp.config.model, &sets.train, &pseudo, &sets.val, &cfg)?;
    log::info!("student validation r {:.4}", outcome.validation.avg_pearson);
    let artifacts = save_outcome(exp, &outcome, "student")?;
    exp.finish("train-student", artifacts, &["pseudo-label", "prep"])
}

fn model_or_init(exp: &Experiment, checkpoint: Option<&Path>) -> Result<ModelCheckpoint> {
    match checkpoint {
        Some(p) => load_checkpoint(p),
        None => build_model(&exp.config.model, exp.config.seeds.baseline),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyReport {
    pub checkpoint: String,
    pub value: f64,
    pub source_clips: usize,
    pub target_clips: usize,
}

fn discrepancy(exp: &mut Experiment, source: &Path, target: &Path, checkpoint: Option<&Path>) -> Result<()> {
    let ckpt = model_or_init(exp, checkpoint)?;
    let s = samples(exp, &read_manifest(source)?.records)?;
    let t = samples(exp, &read_manifest(target)?.records)?;
    let d = model_discrepancy(&ckpt.model, &s, &t)?;
    let report = DiscrepancyReport {
        checkpoint: ckpt.id,
        value: d.value,
        source_clips: d.m,
        target_clips: d.n,
    };
    log::info!("discrepancy {}", report.value);
    write_text(&exp.path("discrepancy.json"), &to_json(&report)?)?;
    exp.finish("discrepancy", vec!["discrepancy.json".into()], &[])
}

fn evaluate_cmd(exp: &mut Experiment, checkpoint: &Path, manifest: &Path) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let records: Vec<ClipRecord> = read_manifest(manifest)?.records.into_iter().filter(|r| r.labels.is_some()).collect();
    let report = evaluate(&ckpt.model, &samples(exp, &records)?)?;
    let mut csv = String::from("feature,pearson_r,undefined,mse\n");
    for (j, name) in FEATURE_NAMES.iter().enumerate() {
        csv.push_str(&format!("{name},{:.6},{},{:.6}\n", report.pearson[j], report.undefined[j], report.mse[j]));
    }
    csv.push_str(&format!("average,{:.6},false,{:.6}\n", report.avg_pearson, report.avg_mse));
    log::info!("average r {:.4}, mse {:.4}", report.avg_pearson, report.avg_mse);
    write_text(&exp.path("evaluation.csv"), &csv)?;
    exp.finish("evaluate", vec!["evaluation.csv".into()], &[])
}

/// Row ids, column names and numeric rows.
pub type Table = (Vec<String>, Vec<String>, Vec<Vec<f64>>);

/// Read a CSV of `id` followed by numeric columns.
pub fn read_table(path: &Path) -> Result<Table> {
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?
        .iter()
        .skip(1)
        .map(str::to_string)
        .collect();
    let (mut ids, mut rows) = (Vec::new(), Vec::new());
    for (line, rec) in r.records().enumerate() {
        let loc = format!("{}:{}", path.display(), line + 2);
        let rec = rec.map_err(|e| Error::parse(&loc, e.to_string()))?;
        if rec.len() != header.len() + 1 {
            return Err(Error::parse(&loc, format!("expected {} fields", header.len() + 1)));
        }
        ids.push(rec[0].to_string());
        rows.push(
            rec.iter()
                .skip(1)
                .map(|v| v.parse::<f64>().map_err(|e| Error::parse(&loc, format!("`{v}`: {e}"))))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    Ok((ids, header, rows))
}

fn probe(
    exp: &mut Experiment,
    features: Option<&Path>,
    dimensions: &Path,
    checkpoint: Option<&Path>,
    performances: Option<&Path>,
    name: &str,
) -> Result<()> {
    let mut artifacts = Vec::new();
    let (f_ids, f_rows) = match (features, checkpoint, performances) {
        (_, Some(ck), Some(perf)) => {
            let model = load_checkpoint(ck)?.model;
            let extractor = SpectrogramExtractor::new(exp.config.spectrogram.clone())?;
            let (ids, rows) = read_performances(perf)?;
            let mut feats = Vec::with_capacity(ids.len());
            for p in &rows {
                let audio = read_wav(&exp.resolve_audio(p))?;
                let pcm = resample(&audio.samples, audio.sample_rate, exp.config.spectrogram.sample_rate)?;
                feats.push(average_features_over_time(&model, &extractor, &pcm)?.0.to_vec());
            }
            let mut csv = format!("id,{}\n", FEATURE_NAMES.join(","));
            for (id, f) in ids.iter().zip(&feats) {
                csv.push_str(&format!("{id},{}\n", f.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")));
            }
            write_text(&exp.path("features.csv"), &csv)?;
            artifacts.push("features.csv".to_string());
            (ids, feats)
        }
        (Some(f), _, _) => {
            let (ids, header, rows) = read_table(f)?;
            if header.len() != FEATURE_NAMES.len() {
                return Err(Error::parse(
                    f.display().to_string(),
                    format!("expected {} feature columns, found {}", FEATURE_NAMES.len(), header.len()),
                ));
            }
            (ids, rows)
        }
        _ => return Err(Error::Config("probe needs --features or --checkpoint with --performances".into())),
    };
    let (d_ids, _, d_rows) = read_table(dimensions)?;
    let by_id: HashMap<&str, &Vec<f64>> = d_ids.iter().map(String::as_str).zip(&d_rows).collect();
    let dims = f_ids
        .iter()
        .map(|id| by_id.get(id.as_str()).map(|r| (*r).clone()).ok_or_else(|| Error::UnknownClip(id.clone())))
        .collect::<Result<Vec<_>>>()?;
    let report = probe_report(name, &f_rows, &dims)?;
    write_text(&exp.path("probe_r2.csv"), &format_r2_table(std::slice::from_ref(&report)))?;
    artifacts.push("probe_r2.csv".into());
    for d in 0..report.r2.len() {
        let file = format!("probe_correlations_dim{}.csv", d + 1);
        write_text(&exp.path(&file), &format_correlation_table(&report, d))?;
        artifacts.push(file);
    }
    exp.finish("probe", artifacts, &[])
}

fn read_performances(path: &Path) -> Result<(Vec<String>, Vec<PathBuf>)> {
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    let mut ids = Vec::new();
    let mut paths = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::parse(format!("{}:{}", path.display(), line + 2), e.to_string()))?;
        if rec.len() < 2 {
            return Err(Error::parse(format!("{}:{}", path.display(), line + 2), "expected id,audio_path"));
        }
        ids.push(rec[0].to_string());
        paths.push(PathBuf::from(&rec[1]));
    }
    Ok((ids, paths))
}

/// Per-seed comparisons of the synthetic run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub reports: Vec<PipelineReport>,
    pub da_beats_baseline: usize,
    pub student_beats_da: usize,
    pub discrepancy_decreasing: usize,
    pub source_preserved: usize,
}

/// Relative tolerance on the source validation score of the adapted models.
pub const SOURCE_SCORE_TOLERANCE: f64 = 0.05;

impl SynthSummary {
    pub fn from_reports(reports: Vec<PipelineReport>) -> Self {
        let count = |f: &dyn Fn(&PipelineReport) -> bool| reports.iter().filter(|r| f(r)).count();
        Self {
            da_beats_baseline: count(&|r| r.da_target_mse < r.baseline.target_mse),
            student_beats_da: count(&|r| r.student.target_mse <= r.da_target_mse),
            discrepancy_decreasing: count(&|r| {
                r.baseline.discrepancy > r.da_discrepancy && r.da_discrepancy > r.student.discrepancy
            }),
            source_preserved: count(&|r| {
                let floor = (1.0 - SOURCE_SCORE_TOLERANCE) * r.baseline.source_val_r;
                r.da_source_val_r >= floor && r.student.source_val_r >= floor
            }),
            reports,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "seed,baseline_target_mse,da_target_mse,ensemble_target_mse,student_target_mse,\
             baseline_discrepancy,da_discrepancy,student_discrepancy,\
             baseline_val_r,da_val_r,student_val_r\n",
        );
        for r in &self.reports {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                r.seed,
                r.baseline.target_mse,
                r.da_target_mse,
                r.ensemble_target_mse,
                r.student.target_mse,
                r.baseline.discrepancy,
                r.da_discrepancy,
                r.student.discrepancy,
                r.baseline.source_val_r,
                r.da_source_val_r,
                r.student.source_val_r
            ));
        }
        out
    }
}

fn synth_e2e(exp: &mut Experiment) -> Result<()> {
    let mut reports = Vec::new();
    let mut artifacts = Vec::new();
    for &seed in &exp.config.synthetic_seeds {
        let run = run_synthetic_pipeline(&exp.config.synthetic, seed)?;
        let dir = format!("synthetic/seed-{seed}");
        artifacts.extend(save_outcome_in(exp, &run.baseline, &dir, &dir, "baseline")?);
        for c in &run.candidates {
            artifacts.extend(save_outcome_in(exp, c, &dir, &dir, &c.checkpoint.id)?);
        }
        artifacts.extend(save_outcome_in(exp, &run.student, &dir, &dir, "student")?);
        write_text(&exp.path(&format!("{dir}/report.json")), &to_json(&run.report)?)?;
        artifacts.push(format!("{dir}/report.json"));
        let r = &run.report;
        log::info!(
            "seed {seed}: target mse baseline {:.4} adapted {:.4} student {:.4}",
            r.baseline.target_mse,
            r.da_target_mse,
            r.student.target_mse
        );
        reports.push(run.report);
    }
    let summary = SynthSummary::from_reports(reports);
    write_text(&exp.path("summary.json"), &to_json(&summary)?)?;
    write_text(&exp.path("summary.csv"), &summary.to_csv())?;
    artifacts.extend(["summary.json".to_string(), "summary.csv".to_string()]);
    exp.finish("synth-e2e", artifacts, &[])
}
