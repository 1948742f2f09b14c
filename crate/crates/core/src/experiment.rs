//! Configuration-driven experiments: training with checkpoint caching, SNR
//! sweeps, ablations and joint-versus-sequential codec comparisons.
//!
//! Every run writes `results.csv` (columns in [`RESULTS_HEADER`] order) and
//! `manifest.txt`. The manifest embeds the full configuration and the hashes
//! of the checkpoints and outputs, so a run can be replayed from it alone.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use sha2::{Digest, Sha256};

use crate::autodiff::Tape;
use crate::channel::{ChannelConfig, ChannelKind};
use crate::data::{generate_dataset, snapshot, InstructionSample, Task, TaskMix};
use crate::error::{Error, Result};
use crate::llm::{TokenSequence, BOS, EOS};
use crate::model::{Link, LinkModel, Variant};
use crate::params::{checkpoint_hash, Group};
use crate::train::{accuracy, run_phase, write_metrics_csv, MetricRow, Phase, TrainPhaseConfig};
use crate::tensor::Tensor;

pub const RESULTS_HEADER: &str = "experiment,variant,task,channel,snr_db,seed,accuracy,mean_ce,n_samples";
pub const SAMPLES_HEADER: &str = "variant,task,channel,snr_db,seed,index,correct,ce";
pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

const PRETRAIN_DATA_SALT: u64 = 0x5052_4554;
const EVAL_DATA_SALT: u64 = 0x4556_414c;
const MONITOR_DATA_SALT: u64 = 0x4d4f_4e49;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Experiment {
    Train,
    Eval,
    SweepSnr,
    Ablate,
    JointCompare,
}

impl Experiment {
    pub const ALL: [Experiment; 5] = [
        Experiment::Train,
        Experiment::Eval,
        Experiment::SweepSnr,
        Experiment::Ablate,
        Experiment::JointCompare,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::Train => "train",
            Experiment::Eval => "eval",
            Experiment::SweepSnr => "sweep-snr",
            Experiment::Ablate => "ablate",
            Experiment::JointCompare => "joint-compare",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseBudget {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub variant: Variant,
    pub channels: Vec<ChannelKind>,
    pub snr_db: Vec<f64>,
    pub seeds: Vec<u64>,
    pub tasks: Vec<Task>,
    pub eval_samples: usize,
    pub reference_channel: ChannelKind,
    pub reference_snr: f64,
    pub model_seed: u64,
    pub data_seed: u64,
    pub pretrain_samples: usize,
    pub train_samples: usize,
    pub pretrain: PhaseBudget,
    pub sft: PhaseBudget,
    pub codec: PhaseBudget,
    pub joint: PhaseBudget,
    pub train_snr: (f64, f64),
    pub checkpoint_dir: PathBuf,
}

/// Documented configuration keys, in canonical order.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("experiment", "train | eval | sweep-snr | ablate | joint-compare"),
    ("variant", "full | no_ban | no_kan | no_joint"),
    ("channels", "comma list of awgn, rayleigh"),
    ("snr_db", "comma list of evaluation SNRs in dB (inf allowed)"),
    ("seeds", "comma list of distinct evaluation seeds"),
    ("tasks", "comma list of evaluated tasks"),
    ("eval_samples", "samples per (task, seed) cell"),
    ("reference_channel", "channel for eval and ablate"),
    ("reference_snr", "SNR in dB for eval and ablate"),
    ("model_seed", "parameter initialization seed"),
    ("data_seed", "training data seed"),
    ("pretrain_samples", "caption pairs for alignment pretraining"),
    ("train_samples", "instruction samples for tuning"),
    ("pretrain_steps", "optimizer steps"),
    ("pretrain_lr", "initial learning rate"),
    ("pretrain_batch", "batch size"),
    ("sft_steps", "optimizer steps"),
    ("sft_lr", "initial learning rate"),
    ("sft_batch", "batch size"),
    ("codec_steps", "codec pretraining steps (no_joint only)"),
    ("codec_lr", "initial learning rate"),
    ("codec_batch", "batch size"),
    ("joint_steps", "optimizer steps"),
    ("joint_lr", "initial learning rate"),
    ("joint_batch", "batch size"),
    ("train_snr_min", "lower end of the training SNR range in dB"),
    ("train_snr_max", "upper end of the training SNR range in dB"),
    ("checkpoint_dir", "where trained checkpoints are cached"),
];

/// Keys that determine a trained checkpoint.
const BUDGET_KEYS: &[&str] = &[
    "model_seed",
    "data_seed",
    "pretrain_samples",
    "train_samples",
    "pretrain_steps",
    "pretrain_lr",
    "pretrain_batch",
    "sft_steps",
    "sft_lr",
    "sft_batch",
    "codec_steps",
    "codec_lr",
    "codec_batch",
    "joint_steps",
    "joint_lr",
    "joint_batch",
    "train_snr_min",
    "train_snr_max",
];

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: Experiment::SweepSnr,
            variant: Variant::Full,
            channels: ChannelKind::ALL.to_vec(),
            snr_db: vec![-6.0, -3.0, 0.0, 3.0, 6.0, 9.0, 12.0, 18.0],
            seeds: vec![1, 2, 3],
            tasks: Task::VQA.to_vec(),
            eval_samples: 60,
            reference_channel: ChannelKind::Awgn,
            reference_snr: 18.0,
            model_seed: 1,
            data_seed: 1,
            pretrain_samples: 2000,
            train_samples: 8000,
            pretrain: PhaseBudget {
                steps: 100,
                lr: 1e-3,
                batch: 32,
            },
            sft: PhaseBudget {
                steps: 2000,
                lr: 1e-3,
                batch: 16,
            },
            codec: PhaseBudget {
                steps: 400,
                lr: 1e-3,
                batch: 16,
            },
            joint: PhaseBudget {
                steps: 1500,
                lr: 1e-4,
                batch: 16,
            },
            train_snr: (-6.0, 18.0),
            checkpoint_dir: PathBuf::from("checkpoints"),
        }
    }
}

fn fmt_f64(x: f64) -> String {
    if x == f64::INFINITY {
        "inf".into()
    } else if x == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{x}")
    }
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    match v {
        "inf" | "+inf" => Ok(f64::INFINITY),
        _ => v
            .parse::<f64>()
            .ok()
            .filter(|x| x.is_finite())
            .ok_or_else(|| Error::Config(format!("{key}: {v:?} is not a number"))),
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: {v:?} is not a valid value")))
}

fn parse_list<T>(key: &str, v: &str, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| f(s).map_err(|e| Error::Config(format!("{key}: {e}"))))
        .collect()
}

fn join<T>(xs: &[T], f: impl Fn(&T) -> String) -> String {
    xs.iter().map(f).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn get(&self, key: &str) -> Option<String> {
        let budget = |b: &PhaseBudget, field: &str| match field {
            "steps" => b.steps.to_string(),
            "lr" => fmt_f64(b.lr),
            _ => b.batch.to_string(),
        };
        let v = match key {
            "experiment" => self.experiment.to_string(),
            "variant" => self.variant.to_string(),
            "channels" => join(&self.channels, |c| c.to_string()),
            "snr_db" => join(&self.snr_db, |x| fmt_f64(*x)),
            "seeds" => join(&self.seeds, |s| s.to_string()),
            "tasks" => join(&self.tasks, |t| t.to_string()),
            "eval_samples" => self.eval_samples.to_string(),
            "reference_channel" => self.reference_channel.to_string(),
            "reference_snr" => fmt_f64(self.reference_snr),
            "model_seed" => self.model_seed.to_string(),
            "data_seed" => self.data_seed.to_string(),
            "pretrain_samples" => self.pretrain_samples.to_string(),
            "train_samples" => self.train_samples.to_string(),
            "train_snr_min" => fmt_f64(self.train_snr.0),
            "train_snr_max" => fmt_f64(self.train_snr.1),
            "checkpoint_dir" => self.checkpoint_dir.display().to_string(),
            _ => {
                let (phase, field) = key.split_once('_')?;
                let b = match phase {
                    "pretrain" => &self.pretrain,
                    "sft" => &self.sft,
                    "codec" => &self.codec,
                    "joint" => &self.joint,
                    _ => return None,
                };
                if !matches!(field, "steps" | "lr" | "batch") {
                    return None;
                }
                budget(b, field)
            }
        };
        Some(v)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "experiment" => self.experiment = v.parse()?,
            "variant" => self.variant = v.parse()?,
            "channels" => self.channels = parse_list(key, v, |s| s.parse())?,
            "snr_db" => self.snr_db = parse_list(key, v, |s| parse_f64(key, s))?,
            "seeds" => self.seeds = parse_list(key, v, |s| parse_num(key, s))?,
            "tasks" => self.tasks = parse_list(key, v, |s| s.parse())?,
            "eval_samples" => self.eval_samples = parse_num(key, v)?,
            "reference_channel" => self.reference_channel = v.parse()?,
            "reference_snr" => self.reference_snr = parse_f64(key, v)?,
            "model_seed" => self.model_seed = parse_num(key, v)?,
            "data_seed" => self.data_seed = parse_num(key, v)?,
            "pretrain_samples" => self.pretrain_samples = parse_num(key, v)?,
            "train_samples" => self.train_samples = parse_num(key, v)?,
            "train_snr_min" => self.train_snr.0 = parse_f64(key, v)?,
            "train_snr_max" => self.train_snr.1 = parse_f64(key, v)?,
            "checkpoint_dir" => self.checkpoint_dir = PathBuf::from(v),
            _ => {
                let unknown = || Error::Config(format!("unknown config key {key:?}"));
                let (phase, field) = key.split_once('_').ok_or_else(unknown)?;
                let b = match phase {
                    "pretrain" => &mut self.pretrain,
                    "sft" => &mut self.sft,
                    "codec" => &mut self.codec,
                    "joint" => &mut self.joint,
                    _ => return Err(unknown()),
                };
                match field {
                    "steps" => b.steps = parse_num(key, v)?,
                    "lr" => b.lr = parse_f64(key, v)?,
                    "batch" => b.batch = parse_num(key, v)?,
                    _ => return Err(unknown()),
                }
            }
        }
        Ok(())
    }

    /// Parses `key=value` lines over the defaults. Blank lines and `#`
    /// comments are skipped; unknown or repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            let k = k.trim();
            if seen.contains(&k) {
                return Err(Error::Config(format!("line {}: repeated key {k:?}", n + 1)));
            }
            seen.push(k);
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() || seeds.is_empty() {
            return Err(Error::Config("seeds must be a non-empty list of distinct values".into()));
        }
        if self.snr_db.is_empty() || self.channels.is_empty() || self.tasks.is_empty() {
            return Err(Error::Config("snr_db, channels and tasks must be non-empty".into()));
        }
        if self.eval_samples == 0 || self.train_samples == 0 || self.pretrain_samples == 0 {
            return Err(Error::Config("sample counts must be positive".into()));
        }
        if self.train_snr.0 > self.train_snr.1 {
            return Err(Error::Config("train_snr_min exceeds train_snr_max".into()));
        }
        for b in [&self.pretrain, &self.sft, &self.codec, &self.joint] {
            if b.batch == 0 || !b.lr.is_finite() || b.lr <= 0.0 {
                return Err(Error::Config("phase batch sizes and learning rates must be positive".into()));
            }
        }
        Ok(())
    }

    /// All keys in canonical order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, _) in CONFIG_KEYS {
            s.push_str(&format!("{k}={}\n", self.get(k).expect("documented key")));
        }
        s
    }

    /// Hash of every setting except where checkpoints are cached.
    pub fn hash(&self) -> String {
        let text: String = self
            .to_text()
            .lines()
            .filter(|l| !l.starts_with("checkpoint_dir="))
            .map(|l| format!("{l}\n"))
            .collect();
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn budget_text(&self) -> String {
        BUDGET_KEYS
            .iter()
            .map(|k| format!("{k}={}\n", self.get(k).expect("documented key")))
            .collect()
    }

    pub fn budget_hash(&self) -> String {
        hex::encode(Sha256::digest(self.budget_text().as_bytes()))
    }

    fn phase(&self, phase: Phase, b: &PhaseBudget, salt: u64) -> TrainPhaseConfig {
        let mut c = TrainPhaseConfig::new(phase, b.lr, b.steps, b.batch);
        c.snr_range = self.train_snr;
        c.eval_every = (b.steps / 5).max(1);
        c.seed = self.model_seed.wrapping_mul(1_000_003).wrapping_add(salt);
        c
    }

    pub fn pretrain_data(&self) -> Vec<InstructionSample> {
        generate_dataset(self.data_seed ^ PRETRAIN_DATA_SALT, self.pretrain_samples, &TaskMix::only(Task::Caption))
    }

    pub fn train_data(&self) -> Vec<InstructionSample> {
        generate_dataset(self.data_seed, self.train_samples, &TaskMix::instruction_default())
    }

    /// SHA-256 over the snapshots of both training sets.
    pub fn dataset_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(snapshot(&self.pretrain_data()));
        h.update(snapshot(&self.train_data()));
        hex::encode(h.finalize())
    }
}

/// Structural family sharing the pretrain and tuning stages.
fn stage_family(v: Variant) -> Variant {
    match v {
        Variant::NoJoint => Variant::Full,
        other => other,
    }
}

pub fn checkpoint_dir(cfg: &ExperimentConfig, variant: Variant) -> PathBuf {
    cfg.checkpoint_dir
        .join(format!("{}-{}", variant, &cfg.budget_hash()[..12]))
}

fn stage_dir(cfg: &ExperimentConfig, variant: Variant) -> PathBuf {
    cfg.checkpoint_dir
        .join(format!("tuned-{}-{}", stage_family(variant), &cfg.budget_hash()[..12]))
}

fn train_record(cfg: &ExperimentConfig, variant: Variant, model: &LinkModel, dataset_hash: &str) -> String {
    let projector = model.store.count_in(&[Group::Zeta]);
    format!(
        "variant={variant}\nbudget_hash={}\ndataset_hash={dataset_hash}\nparams={}\nprojector_params={projector}\n{}",
        cfg.budget_hash(),
        model.store.num_scalars(),
        cfg.budget_text()
    )
}

/// Parsed `train.txt` of a checkpoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainRecord {
    pub fields: BTreeMap<String, String>,
}

impl TrainRecord {
    pub fn read(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("train.txt"))?;
        let fields = text
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        Ok(Self { fields })
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.fields
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("train record lacks {key:?}")))
    }
}

fn monitor_set(cfg: &ExperimentConfig) -> Vec<InstructionSample> {
    let mix = TaskMix::new(Task::VQA.iter().map(|&t| (t, 1.0)).collect()).expect("positive weights");
    generate_dataset(cfg.data_seed ^ MONITOR_DATA_SALT, 30, &mix)
}

fn monitor_link(phase: Phase) -> impl Fn(usize) -> Link {
    move |i| match phase {
        Phase::Pretrain | Phase::Sft => Link::Bypass,
        _ => Link::Channel {
            cfg: ChannelConfig {
                kind: ChannelKind::Awgn,
                snr_db: 12.0,
                seed: 7,
            },
            frame_id: i as u64,
        },
    }
}

fn run_logged(
    tc: &TrainPhaseConfig,
    model: &mut LinkModel,
    data: &[InstructionSample],
    monitor: &[InstructionSample],
    log: &mut Vec<MetricRow>,
) -> Result<()> {
    let link = monitor_link(tc.phase);
    let mut eval = |m: &LinkModel| accuracy(m, monitor, &link);
    let offset = log.last().map(|r| r.step + 1).unwrap_or(0);
    for mut r in run_phase(tc, model, data, Some(&mut eval))? {
        r.step += offset;
        log.push(r);
    }
    Ok(())
}

fn build_model(cfg: &ExperimentConfig, variant: Variant) -> Result<LinkModel> {
    LinkModel::desk(variant, cfg.model_seed)
}

/// Pretrain and tuning stages, cached per structural family.
/// Returns the model and the wall-clock seconds the stage took when it was
/// first trained.
fn tuned_stage(cfg: &ExperimentConfig, variant: Variant, log: &mut Vec<MetricRow>) -> Result<(LinkModel, f64)> {
    let dir = stage_dir(cfg, variant);
    let mut model = build_model(cfg, stage_family(variant))?;
    if dir.join("seconds.txt").exists() && model.store.load_into(&dir).is_ok() {
        *log = read_metrics(&dir.join("metrics.csv"))?;
        let secs = fs::read_to_string(dir.join("seconds.txt"))?
            .trim()
            .parse()
            .map_err(|_| Error::Format("malformed stage timing".into()))?;
        model.variant = variant;
        return Ok((model, secs));
    }
    let start = Instant::now();
    let monitor = monitor_set(cfg);
    let pre = cfg.phase(Phase::Pretrain, &cfg.pretrain, 1);
    if pre.steps > 0 {
        run_logged(&pre, &mut model, &cfg.pretrain_data(), &monitor, log)?;
    }
    let sft = cfg.phase(Phase::Sft, &cfg.sft, 2);
    if sft.steps > 0 {
        run_logged(&sft, &mut model, &cfg.train_data(), &monitor, log)?;
    }
    let secs = start.elapsed().as_secs_f64();
    model.store.save(&dir)?;
    let mut buf = Vec::new();
    write_metrics_csv(&mut buf, log)?;
    fs::write(dir.join("metrics.csv"), buf)?;
    fs::write(dir.join("seconds.txt"), format!("{secs:.1}\n"))?;
    model.variant = variant;
    Ok((model, secs))
}

fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let text = fs::read_to_string(path)?;
    let bad = || Error::Format(format!("malformed metrics file {}", path.display()));
    text.lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 6 {
                return Err(bad());
            }
            Ok(MetricRow {
                step: f[0].parse().map_err(|_| bad())?,
                phase: f[1].parse()?,
                loss: f[2].parse().map_err(|_| bad())?,
                lr: f[3].parse().map_err(|_| bad())?,
                grad_norm: f[4].parse().map_err(|_| bad())?,
                eval_acc: if f[5].is_empty() { None } else { Some(f[5].parse().map_err(|_| bad())?) },
            })
        })
        .collect()
}

/// A trained, loaded checkpoint.
pub struct Trained {
    pub model: LinkModel,
    pub dir: PathBuf,
    pub hash: String,
}

/// Trains `variant` under the config's budget, or reuses a cached
/// checkpoint with the same budget.
pub fn train_variant(cfg: &ExperimentConfig, variant: Variant) -> Result<Trained> {
    if let Ok(t) = load_checkpoint(cfg, variant) {
        return Ok(t);
    }
    let mut log = Vec::new();
    let (mut model, stage_secs) = tuned_stage(cfg, variant, &mut log)?;
    let start = Instant::now();
    model.codec.init_pseudo_inverse(&mut model.store)?;
    let monitor = monitor_set(cfg);
    let data = cfg.train_data();
    let mut joint = cfg.phase(Phase::Joint, &cfg.joint, 3);
    if variant == Variant::NoJoint {
        let codec = cfg.phase(Phase::Codec, &cfg.codec, 4);
        if codec.steps > 0 {
            run_logged(&codec, &mut model, &data, &monitor, &mut log)?;
        }
        joint.groups.retain(|g| !matches!(g, Group::Beta | Group::Gamma));
    }
    if joint.steps > 0 {
        run_logged(&joint, &mut model, &data, &monitor, &mut log)?;
    }
    let secs = stage_secs + start.elapsed().as_secs_f64();
    let dir = checkpoint_dir(cfg, variant);
    let hash = model.store.save(&dir)?;
    model.vocab.save(&dir.join("vocab.txt"))?;
    let mut buf = Vec::new();
    write_metrics_csv(&mut buf, &log)?;
    fs::write(dir.join("metrics.csv"), buf)?;
    let record = train_record(cfg, variant, &model, &cfg.dataset_hash());
    fs::write(dir.join("train.txt"), format!("{record}train_seconds={secs:.1}\n"))?;
    Ok(Trained { model, dir, hash })
}

/// Loads a finished checkpoint; a missing one is a configuration error.
pub fn load_checkpoint(cfg: &ExperimentConfig, variant: Variant) -> Result<Trained> {
    let dir = checkpoint_dir(cfg, variant);
    if !dir.join("train.txt").exists() {
        return Err(Error::Config(format!(
            "no trained {variant} checkpoint at {}; run `train` first",
            dir.display()
        )));
    }
    let rec = TrainRecord::read(&dir)?;
    if rec.get("budget_hash")? != cfg.budget_hash() || rec.get("variant")? != variant.name() {
        return Err(Error::Config(format!("checkpoint at {} was trained under a different budget", dir.display())));
    }
    let mut model = build_model(cfg, variant)?;
    let hash = model.store.load_into(&dir)?;
    Ok(Trained { model, dir, hash })
}

/// Outcome of one evaluated sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleOutcome {
    pub correct: bool,
    pub ce: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub experiment: Experiment,
    pub variant: Variant,
    pub task: Task,
    /// `None` for the channel-free codec link.
    pub channel: Option<ChannelKind>,
    pub snr_db: f64,
    pub seed: u64,
    pub accuracy: f64,
    pub mean_ce: f64,
    pub n_samples: usize,
}

impl ResultRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.6},{:.6},{}",
            self.experiment,
            self.variant,
            self.task,
            self.channel.map(|c| c.name()).unwrap_or("none"),
            fmt_f64(self.snr_db),
            self.seed,
            self.accuracy,
            self.mean_ce,
            self.n_samples
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Format(format!("malformed result row {line:?}"));
        if f.len() != 9 {
            return Err(bad());
        }
        Ok(Self {
            experiment: f[0].parse()?,
            variant: f[1].parse()?,
            task: f[2].parse()?,
            channel: if f[3] == "none" { None } else { Some(f[3].parse()?) },
            snr_db: parse_f64("snr_db", f[4])?,
            seed: f[5].parse().map_err(|_| bad())?,
            accuracy: f[6].parse().map_err(|_| bad())?,
            mean_ce: f[7].parse().map_err(|_| bad())?,
            n_samples: f[8].parse().map_err(|_| bad())?,
        })
    }
}

pub fn results_csv(rows: &[ResultRow]) -> String {
    let mut s = format!("{RESULTS_HEADER}\n");
    for r in rows {
        s.push_str(&r.csv());
        s.push('\n');
    }
    s
}

pub fn parse_results(text: &str) -> Result<Vec<ResultRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(RESULTS_HEADER) {
        return Err(Error::Format("results file lacks the expected header".into()));
    }
    lines.map(ResultRow::parse).collect()
}

fn task_index(t: Task) -> u64 {
    Task::ALL.iter().position(|&x| x == t).expect("known task") as u64
}

pub fn eval_samples(seed: u64, task: Task, n: usize) -> Vec<InstructionSample> {
    let s = seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(task_index(task))
        ^ EVAL_DATA_SALT;
    generate_dataset(s, n, &TaskMix::only(task))
}

/// Channel seed shared by every variant and SNR, so comparisons use common
/// random numbers.
pub fn eval_channel(kind: ChannelKind, snr_db: f64, seed: u64) -> ChannelConfig {
    let k = match kind {
        ChannelKind::Awgn => 1,
        ChannelKind::Rayleigh => 2,
    };
    ChannelConfig {
        kind,
        snr_db,
        seed: seed.wrapping_mul(0x2545_f491_4f6c_dd1d).wrapping_add(k),
    }
}

/// Link used for one evaluation cell; `None` runs the codec with no channel.
fn cell_link(channel: Option<ChannelKind>, snr_db: f64, seed: u64, task: Task, index: usize) -> Link {
    match channel {
        None => Link::Codec,
        Some(kind) => Link::Channel {
            cfg: eval_channel(kind, snr_db, seed),
            frame_id: (task_index(task) << 32) | index as u64,
        },
    }
}

fn decode_answer(model: &LinkModel, z_hat: &Tensor) -> Result<String> {
    let ids = model.token.decode_tokens(
        &model.store,
        z_hat,
        &TokenSequence::prompt(vec![BOS]),
        model.cfg.max_answer_len,
    )?;
    let end = ids.iter().position(|&i| i == EOS).unwrap_or(ids.len());
    Ok(crate::llm::detokenize(&ids[..end], &model.vocab))
}

/// Pre-encoded evaluation inputs for one (task, seed).
struct EncodedCell {
    samples: Vec<InstructionSample>,
    z: Vec<Tensor>,
}

fn encode_cell(model: &LinkModel, task: Task, seed: u64, n: usize) -> Result<EncodedCell> {
    let samples = eval_samples(seed, task, n);
    let z = samples
        .iter()
        .map(|s| {
            let mut tape = Tape::new();
            let z = model.encode(&mut tape, s)?;
            Ok(tape.value(z).clone())
        })
        .collect::<Result<_>>()?;
    Ok(EncodedCell { samples, z })
}

fn eval_encoded(
    model: &LinkModel,
    cell: &EncodedCell,
    task: Task,
    channel: Option<ChannelKind>,
    snr_db: f64,
    seed: u64,
) -> Result<Vec<SampleOutcome>> {
    cell.samples
        .iter()
        .zip(&cell.z)
        .enumerate()
        .map(|(i, (s, z))| {
            let mut tape = Tape::new();
            let zv = tape.constant(z.clone());
            let (z_hat, _) = model.transmit(&mut tape, zv, cell_link(channel, snr_db, seed, task, i))?;
            let z_hat_val = tape.value(z_hat).clone();
            let loss = model.response_loss(&mut tape, z_hat, s)?;
            let ce = tape.value(loss).data()[0];
            let answer = decode_answer(model, &z_hat_val)?;
            Ok(SampleOutcome {
                correct: s.is_correct(&answer),
                ce,
            })
        })
        .collect()
}

/// Per-sample outcome log line.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub variant: Variant,
    pub task: Task,
    pub channel: Option<ChannelKind>,
    pub snr_db: f64,
    pub seed: u64,
    pub index: usize,
    pub outcome: SampleOutcome,
}

impl SampleRecord {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{:.6}",
            self.variant,
            self.task,
            self.channel.map(|c| c.name()).unwrap_or("none"),
            fmt_f64(self.snr_db),
            self.seed,
            self.index,
            u8::from(self.outcome.correct),
            self.outcome.ce
        )
    }
}

fn summarize(
    experiment: Experiment,
    variant: Variant,
    task: Task,
    channel: Option<ChannelKind>,
    snr_db: f64,
    seed: u64,
    outs: &[SampleOutcome],
) -> ResultRow {
    let n = outs.len();
    ResultRow {
        experiment,
        variant,
        task,
        channel,
        snr_db,
        seed,
        accuracy: outs.iter().filter(|o| o.correct).count() as f64 / n as f64,
        mean_ce: outs.iter().map(|o| o.ce).sum::<f64>() / n as f64,
        n_samples: n,
    }
}

/// Evaluates one model over a grid. Rows are ordered by channel, SNR, seed,
/// then task.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_grid(
    experiment: Experiment,
    model: &LinkModel,
    channels: &[Option<ChannelKind>],
    snrs: &[f64],
    seeds: &[u64],
    tasks: &[Task],
    n: usize,
    samples_log: Option<&mut Vec<SampleRecord>>,
) -> Result<Vec<ResultRow>> {
    type Cell = (ResultRow, Vec<SampleOutcome>);
    let mut cells: BTreeMap<(usize, usize, usize, usize), Cell> = BTreeMap::new();
    for (si, &seed) in seeds.iter().enumerate() {
        for (ti, &task) in tasks.iter().enumerate() {
            let enc = encode_cell(model, task, seed, n)?;
            for (ci, &ch) in channels.iter().enumerate() {
                for (ni, &snr) in snrs.iter().enumerate() {
                    let outs = eval_encoded(model, &enc, task, ch, snr, seed)?;
                    let row = summarize(experiment, model.variant, task, ch, snr, seed, &outs);
                    cells.insert((ci, ni, si, ti), (row, outs));
                }
            }
        }
    }
    let mut rows = Vec::with_capacity(cells.len());
    let mut log = samples_log;
    for (row, outs) in cells.into_values() {
        if let Some(l) = log.as_deref_mut() {
            for (index, outcome) in outs.into_iter().enumerate() {
                l.push(SampleRecord {
                    variant: row.variant,
                    task: row.task,
                    channel: row.channel,
                    snr_db: row.snr_db,
                    seed: row.seed,
                    index,
                    outcome,
                });
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Files produced by one run, in write order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOutput {
    pub files: Vec<(String, Vec<u8>)>,
    pub checkpoints: Vec<(Variant, String)>,
}

impl RunOutput {
    pub fn file(&self, name: &str) -> Option<&[u8]> {
        self.files.iter().find(|f| f.0 == name).map(|f| f.1.as_slice())
    }
}

fn reference(cfg: &ExperimentConfig) -> (Vec<Option<ChannelKind>>, Vec<f64>) {
    (vec![Some(cfg.reference_channel)], vec![cfg.reference_snr])
}

/// Refuses to compare checkpoints trained under different budgets or data.
pub fn audit_fairness(dirs: &[(Variant, PathBuf)]) -> Result<String> {
    let mut audit = String::from("variant\tparams\tprojector_params\tbudget_hash\tdataset_hash\n");
    let mut first: Option<(String, String)> = None;
    for (v, dir) in dirs {
        let rec = TrainRecord::read(dir)?;
        let key = (rec.get("budget_hash")?.to_string(), rec.get("dataset_hash")?.to_string());
        match &first {
            None => first = Some(key.clone()),
            Some(f) if *f != key => {
                return Err(Error::Config(format!(
                    "variant {v} was trained under a different budget or dataset"
                )))
            }
            _ => {}
        }
        audit.push_str(&format!(
            "{v}\t{}\t{}\t{}\t{}\n",
            rec.get("params")?,
            rec.get("projector_params")?,
            key.0,
            key.1
        ));
    }
    Ok(audit)
}

fn samples_csv(log: &[SampleRecord]) -> Vec<u8> {
    let mut s = format!("{SAMPLES_HEADER}\n");
    for r in log {
        s.push_str(&r.csv());
        s.push('\n');
    }
    s.into_bytes()
}

/// Runs `cfg.experiment`. Training is the only experiment that creates
/// checkpoints; the others require them.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let mut out = RunOutput::default();
    match cfg.experiment {
        Experiment::Train => {
            let t = train_variant(cfg, cfg.variant)?;
            out.files.push(("metrics.csv".into(), fs::read(t.dir.join("metrics.csv"))?));
            let (ch, snr) = reference(cfg);
            let rows = evaluate_grid(Experiment::Train, &t.model, &ch, &snr, &cfg.seeds, &cfg.tasks, cfg.eval_samples, None)?;
            out.files.push(("results.csv".into(), results_csv(&rows).into_bytes()));
            out.checkpoints.push((cfg.variant, t.hash));
        }
        Experiment::Eval => {
            let t = load_checkpoint(cfg, cfg.variant)?;
            let (ch, snr) = reference(cfg);
            let rows = evaluate_grid(Experiment::Eval, &t.model, &ch, &snr, &cfg.seeds, &cfg.tasks, cfg.eval_samples, None)?;
            out.files.push(("results.csv".into(), results_csv(&rows).into_bytes()));
            out.checkpoints.push((cfg.variant, t.hash));
        }
        Experiment::SweepSnr => {
            let t = load_checkpoint(cfg, cfg.variant)?;
            let ch: Vec<_> = cfg.channels.iter().copied().map(Some).collect();
            let rows = evaluate_grid(
                Experiment::SweepSnr,
                &t.model,
                &ch,
                &cfg.snr_db,
                &cfg.seeds,
                &cfg.tasks,
                cfg.eval_samples,
                None,
            )?;
            out.files.push(("results.csv".into(), results_csv(&rows).into_bytes()));
            out.checkpoints.push((cfg.variant, t.hash));
        }
        Experiment::Ablate => {
            let variants = [Variant::Full, Variant::NoBan, Variant::NoKan];
            let trained = variants
                .iter()
                .map(|&v| load_checkpoint(cfg, v))
                .collect::<Result<Vec<_>>>()?;
            let dirs: Vec<_> = trained.iter().map(|t| (t.model.variant, t.dir.clone())).collect();
            let audit = audit_fairness(&dirs)?;
            let (ch, snr) = reference(cfg);
            let mut rows = Vec::new();
            for t in &trained {
                rows.extend(evaluate_grid(
                    Experiment::Ablate,
                    &t.model,
                    &ch,
                    &snr,
                    &cfg.seeds,
                    &cfg.tasks,
                    cfg.eval_samples,
                    None,
                )?);
                out.checkpoints.push((t.model.variant, t.hash.clone()));
            }
            out.files.push(("results.csv".into(), results_csv(&rows).into_bytes()));
            out.files.push(("audit.tsv".into(), audit.into_bytes()));
        }
        Experiment::JointCompare => {
            let mut rows = Vec::new();
            let mut log = Vec::new();
            let ch: Vec<_> = cfg.channels.iter().copied().map(Some).collect();
            for v in [Variant::Full, Variant::NoJoint] {
                let t = load_checkpoint(cfg, v)?;
                rows.extend(evaluate_grid(
                    Experiment::JointCompare,
                    &t.model,
                    &ch,
                    &cfg.snr_db,
                    &cfg.seeds,
                    &cfg.tasks,
                    cfg.eval_samples,
                    Some(&mut log),
                )?);
                out.checkpoints.push((v, t.hash));
            }
            out.files.push(("results.csv".into(), results_csv(&rows).into_bytes()));
            out.files.push(("samples.csv".into(), samples_csv(&log)));
        }
    }
    let manifest = manifest_text(cfg, &out);
    out.files.push(("manifest.txt".into(), manifest.into_bytes()));
    Ok(out)
}

pub fn write_output(out: &RunOutput, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (name, bytes) in &out.files {
        fs::write(dir.join(name), bytes)?;
    }
    Ok(())
}

const MANIFEST_CONFIG_MARKER: &str = "[config]";

pub fn manifest_text(cfg: &ExperimentConfig, out: &RunOutput) -> String {
    let mut s = String::from("# run manifest\n");
    s.push_str(&format!("experiment={}\n", cfg.experiment));
    s.push_str(&format!("code_version={CODE_VERSION}\n"));
    s.push_str(&format!("config_hash={}\n", cfg.hash()));
    s.push_str(&format!("seeds={}\n", join(&cfg.seeds, |x| x.to_string())));
    s.push_str(&format!("dataset_seed={}\n", cfg.data_seed));
    for (v, h) in &out.checkpoints {
        s.push_str(&format!("checkpoint.{v}={h}\n"));
    }
    for (name, bytes) in &out.files {
        s.push_str(&format!("output.{name}={}\n", hex::encode(Sha256::digest(bytes))));
    }
    s.push_str(MANIFEST_CONFIG_MARKER);
    s.push('\n');
    s.push_str(&cfg.to_text());
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub fields: BTreeMap<String, String>,
    pub config: ExperimentConfig,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let (head, cfg_text) = text
            .split_once(&format!("{MANIFEST_CONFIG_MARKER}\n"))
            .ok_or_else(|| Error::Format("manifest lacks a [config] section".into()))?;
        let fields = head
            .lines()
            .filter(|l| !l.starts_with('#'))
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        Ok(Self {
            fields,
            config: ExperimentConfig::parse(cfg_text)?,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Recorded checkpoint hashes, checked against the files on disk.
    pub fn verify_checkpoints(&self) -> Result<()> {
        for (k, v) in &self.fields {
            if let Some(name) = k.strip_prefix("checkpoint.") {
                let variant: Variant = name.parse()?;
                let dir = checkpoint_dir(&self.config, variant);
                let actual = checkpoint_hash(&dir)?;
                if &actual != v {
                    return Err(Error::Format(format!(
                        "checkpoint {} hash {actual} does not match manifest {v}",
                        dir.display()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Re-runs the experiment recorded in a manifest after checking that the
/// checkpoints it used are unchanged.
pub fn reproduce(manifest: &Manifest) -> Result<RunOutput> {
    manifest.verify_checkpoints()?;
    let recorded = manifest.fields.get("config_hash").map(String::as_str);
    if recorded != Some(manifest.config.hash().as_str()) {
        return Err(Error::Format("manifest config hash does not match its config section".into()));
    }
    run(&manifest.config)
}
