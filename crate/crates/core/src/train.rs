//! Optimization phases: alignment pretraining, instruction tuning and joint
//! model–channel training, plus the separate codec pretraining used by the
//! sequential baseline.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::channel::{ChannelConfig, ChannelKind};
use crate::data::InstructionSample;
use crate::error::{Error, Result};
use crate::model::{Link, LinkModel};
use crate::params::{Group, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Phase {
    Pretrain,
    Sft,
    Joint,
    Codec,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Sft => "sft",
            Phase::Joint => "joint",
            Phase::Codec => "codec",
        }
    }

    /// Groups a phase may train.
    fn allowed(self) -> &'static [Group] {
        match self {
            Phase::Pretrain => &[Group::Epsilon, Group::Zeta],
            Phase::Sft => &[
                Group::Theta,
                Group::Alpha,
                Group::Delta,
                Group::Epsilon,
                Group::Zeta,
                Group::Vision,
            ],
            Phase::Joint => &[Group::Epsilon, Group::Zeta, Group::Beta, Group::Gamma, Group::Adapter],
            Phase::Codec => &[Group::Beta, Group::Gamma],
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Phase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [Phase::Pretrain, Phase::Sft, Phase::Joint, Phase::Codec]
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown phase {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainPhaseConfig {
    pub phase: Phase,
    pub groups: Vec<Group>,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Uniform training SNR range in dB; used by phases that cross the channel.
    pub snr_range: (f64, f64),
    pub channels: Vec<ChannelKind>,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
    /// Evaluate every this many steps (0 = only at the end).
    pub eval_every: usize,
}

impl TrainPhaseConfig {
    pub fn new(phase: Phase, lr: f64, steps: usize, batch_size: usize) -> Self {
        let groups = match phase {
            Phase::Pretrain => vec![Group::Epsilon, Group::Zeta],
            Phase::Sft => Phase::Sft.allowed().to_vec(),
            Phase::Joint => vec![Group::Epsilon, Group::Zeta, Group::Beta, Group::Gamma, Group::Adapter],
            Phase::Codec => vec![Group::Beta, Group::Gamma],
        };
        Self {
            phase,
            groups,
            lr,
            steps,
            batch_size,
            snr_range: (-6.0, 18.0),
            channels: ChannelKind::ALL.to_vec(),
            weight_decay: 0.01,
            grad_clip: 1.0,
            seed: 0,
            eval_every: 0,
        }
    }

    pub fn pretrain_default() -> Self {
        Self::new(Phase::Pretrain, 1e-3, 100, 32)
    }

    pub fn sft_default() -> Self {
        Self::new(Phase::Sft, 2e-5, 100, 16)
    }

    pub fn joint_default() -> Self {
        Self::new(Phase::Joint, 1e-4, 100, 16)
    }

    pub fn uses_channel(&self) -> bool {
        matches!(self.phase, Phase::Joint | Phase::Codec)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(g) = self.groups.iter().find(|g| !self.phase.allowed().contains(g)) {
            return Err(Error::Config(format!("phase {} may not train group {g}", self.phase)));
        }
        if self.phase == Phase::Pretrain && self.groups.len() != 2 {
            return Err(Error::Config("pretraining trains exactly the fusion and projector groups".into()));
        }
        if self.batch_size == 0 || !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::Config(format!(
                "phase {} needs a positive batch size and learning rate",
                self.phase
            )));
        }
        if self.uses_channel() && (self.channels.is_empty() || self.snr_range.0 > self.snr_range.1) {
            return Err(Error::Config("channel phases need channel kinds and an ordered SNR range".into()));
        }
        Ok(())
    }
}

/// Cosine decay from `base` at step 0 to 0 at `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step.min(total) as f64) / total as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    /// Applies one update to every parameter in `grads`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Vec<f64>)], lr: f64) {
        if self.m.len() < store.len() {
            self.m.resize(store.len(), Vec::new());
            self.v.resize(store.len(), Vec::new());
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (id, g) in grads {
            let i = id.index();
            if self.m[i].is_empty() {
                self.m[i] = vec![0.0; g.len()];
                self.v[i] = vec![0.0; g.len()];
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let w = store.value_mut(*id).data_mut();
            for k in 0..g.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let update = (m[k] / bc1) / ((v[k] / bc2).sqrt() + self.eps);
                w[k] -= lr * (update + self.weight_decay * w[k]);
            }
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub phase: Phase,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub eval_acc: Option<f64>,
}

pub const METRICS_HEADER: &str = "step,phase,loss,lr,grad_norm,eval_acc";

pub fn write_metrics_csv<W: Write>(w: &mut W, rows: &[MetricRow]) -> Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for r in rows {
        let acc = r.eval_acc.map(|a| format!("{a:.6}")).unwrap_or_default();
        writeln!(
            w,
            "{},{},{:.8},{:.8e},{:.8},{}",
            r.step, r.phase, r.loss, r.lr, r.grad_norm, acc
        )?;
    }
    Ok(())
}

/// Draws the channel condition of one training batch.
fn batch_channel<R: Rng + ?Sized>(cfg: &TrainPhaseConfig, rng: &mut R) -> ChannelConfig {
    let kind = cfg.channels[rng.random_range(0..cfg.channels.len())];
    let (lo, hi) = cfg.snr_range;
    let snr_db = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    ChannelConfig {
        kind,
        snr_db,
        seed: rng.random(),
    }
}

/// Summed per-parameter gradients, in a fixed parameter order.
struct GradBuffer {
    sums: Vec<Option<Vec<f64>>>,
}

impl GradBuffer {
    fn new(n: usize) -> Self {
        Self { sums: vec![None; n] }
    }

    fn add(&mut self, id: ParamId, g: &[f64]) {
        match &mut self.sums[id.index()] {
            Some(s) => s.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            slot => *slot = Some(g.to_vec()),
        }
    }

    /// Mean gradients, clipped to `clip` in global L2 norm. Returns the
    /// pre-clip norm.
    fn finish(self, batch: usize, clip: f64) -> (Vec<(ParamId, Vec<f64>)>, f64) {
        let inv = 1.0 / batch as f64;
        let mut out: Vec<(ParamId, Vec<f64>)> = Vec::new();
        let mut sq = 0.0;
        for (i, s) in self.sums.into_iter().enumerate() {
            if let Some(mut g) = s {
                g.iter_mut().for_each(|v| *v *= inv);
                sq += g.iter().map(|v| v * v).sum::<f64>();
                out.push((ParamId::from_index(i), g));
            }
        }
        let norm = sq.sqrt();
        if clip > 0.0 && norm > clip {
            let f = clip / norm;
            for (_, g) in &mut out {
                g.iter_mut().for_each(|v| *v *= f);
            }
        }
        (out, norm)
    }
}

/// Evaluation callback: returns an accuracy in `[0, 1]`.
pub type EvalFn<'a> = dyn FnMut(&LinkModel) -> Result<f64> + 'a;

/// Runs one phase. Only `cfg.groups` are updated; every other group is left
/// bit-identical. Codec phases use a reconstruction loss on `Z`; the other
/// phases use the masked response cross-entropy.
pub fn run_phase(
    cfg: &TrainPhaseConfig,
    model: &mut LinkModel,
    data: &[InstructionSample],
    mut eval: Option<&mut EvalFn<'_>>,
) -> Result<Vec<MetricRow>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config(format!("phase {} has no training data", cfg.phase)));
    }
    model.store.train_only(&cfg.groups);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let lr = cosine_lr(cfg.lr, step, cfg.steps);
        let chan = cfg.uses_channel().then(|| batch_channel(cfg, &mut rng));
        let mut buf = GradBuffer::new(model.store.len());
        let mut loss_sum = 0.0;
        for b in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let sample = &data[order[cursor]];
            cursor += 1;
            let link = match chan {
                Some(c) => Link::Channel {
                    cfg: c,
                    frame_id: b as u64,
                },
                None => Link::Bypass,
            };
            let mut tape = Tape::new();
            let loss = match cfg.phase {
                Phase::Codec => codec_loss(model, &mut tape, sample, link),
                _ => model.loss(&mut tape, sample, link),
            }
            .map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!(
                    "{msg} in phase {} at step {step} (sample seed {}, task {})",
                    cfg.phase, sample.seed, sample.task
                )),
                other => other,
            })?;
            let lv = tape.value(loss).data()[0];
            if !lv.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss {lv} in phase {} at step {step} (sample seed {}, task {}, lr {lr:.3e}, channel {chan:?})",
                    cfg.phase, sample.seed, sample.task
                )));
            }
            loss_sum += lv;
            let grads = tape.backward(loss)?;
            for (id, g) in grads.param_grads() {
                buf.add(id, g);
            }
        }
        let (grads, grad_norm) = buf.finish(cfg.batch_size, cfg.grad_clip);
        if !grad_norm.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient norm in phase {} at step {step}",
                cfg.phase
            )));
        }
        opt.step(&mut model.store, &grads, lr);
        let last = step + 1 == cfg.steps;
        let due = last || (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0);
        let eval_acc = match (&mut eval, due) {
            (Some(f), true) => Some(f(model)?),
            _ => None,
        };
        log.push(MetricRow {
            step,
            phase: cfg.phase,
            loss: loss_sum / cfg.batch_size as f64,
            lr,
            grad_norm,
            eval_acc,
        });
    }
    Ok(log)
}

/// Mean squared reconstruction error of `Z` across the channel, with `Z`
/// itself held fixed.
pub fn codec_loss(model: &LinkModel, tape: &mut Tape, sample: &InstructionSample, link: Link) -> Result<crate::autodiff::Var> {
    let z = model.encode(tape, sample)?;
    let z = tape.detach(z);
    let (z_hat, _) = model.transmit(tape, z, link)?;
    let diff = tape.sub(z_hat, z)?;
    let sq = tape.mul(diff, diff)?;
    let n = tape.value(sq).len() as f64;
    let total = tape.sum_all(sq);
    Ok(tape.scale(total, 1.0 / n))
}

/// Fraction of samples answered correctly over `link`.
pub fn accuracy(model: &LinkModel, samples: &[InstructionSample], link: impl Fn(usize) -> Link) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Config("accuracy over an empty sample set".into()));
    }
    let mut ok = 0usize;
    for (i, s) in samples.iter().enumerate() {
        if s.is_correct(&model.answer(s, link(i))?) {
            ok += 1;
        }
    }
    Ok(ok as f64 / samples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1e-3, 0, 100), 1e-3);
        assert!(cosine_lr(1e-3, 100, 100).abs() < 1e-18);
        assert!((cosine_lr(1e-3, 50, 100) - 5e-4).abs() < 1e-15);
    }

    #[test]
    fn default_rates() {
        assert_eq!(TrainPhaseConfig::pretrain_default().lr, 1e-3);
        assert_eq!(TrainPhaseConfig::sft_default().lr, 2e-5);
        assert_eq!(TrainPhaseConfig::joint_default().lr, 1e-4);
        assert_eq!(TrainPhaseConfig::pretrain_default().batch_size, 32);
    }

    #[test]
    fn phase_group_rules() {
        let mut c = TrainPhaseConfig::pretrain_default();
        c.groups.push(Group::Alpha);
        assert!(c.validate().is_err());
        let mut c = TrainPhaseConfig::sft_default();
        c.groups.push(Group::Beta);
        assert!(c.validate().is_err());
        let mut c = TrainPhaseConfig::joint_default();
        c.groups.push(Group::Delta);
        assert!(c.validate().is_err());
        assert!(TrainPhaseConfig::joint_default().validate().is_ok());
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store
            .add("w", Group::Alpha, crate::tensor::Tensor::full(&[2], 1.0))
            .unwrap();
        let mut opt = AdamW::new(0.0);
        opt.step(&mut store, &[(id, vec![0.5, -2.0])], 0.1);
        let w = store.value(id).data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] - 1.1).abs() < 1e-6);
    }
    fn tiny_model(seed: u64) -> LinkModel {
        let vocab = crate::data::default_vocabulary();
        let cfg = crate::model::ModelConfig::tiny(vocab.len());
        LinkModel::new(cfg, crate::model::Variant::Full, vocab, seed).unwrap()
    }

    #[test]
    fn cosine_is_monotone() {
        let lrs: Vec<f64> = (0..=40).map(|s| cosine_lr(2e-5, s, 40)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn metrics_csv_layout() {
        let mut buf = Vec::new();
        let row = MetricRow {
            step: 3,
            phase: Phase::Joint,
            loss: 0.5,
            lr: 1e-4,
            grad_norm: 2.0,
            eval_acc: None,
        };
        write_metrics_csv(&mut buf, &[row]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(&format!("{METRICS_HEADER}\n3,joint,")));
    }

    #[test]
    fn frozen_groups_stay_bit_identical() {
        let data = crate::data::generate_dataset(4, 12, &crate::data::TaskMix::instruction_default());
        let mut joint_without_codec = TrainPhaseConfig::new(Phase::Joint, 1e-3, 2, 2);
        joint_without_codec.groups.retain(|g| !matches!(g, Group::Beta | Group::Gamma));
        let phases = [
            TrainPhaseConfig::new(Phase::Pretrain, 1e-3, 2, 2),
            TrainPhaseConfig::new(Phase::Sft, 1e-3, 2, 2),
            TrainPhaseConfig::new(Phase::Joint, 1e-3, 2, 2),
            TrainPhaseConfig::new(Phase::Codec, 1e-3, 2, 2),
            joint_without_codec,
        ];
        for cfg in phases {
            let mut m = tiny_model(7);
            let before: Vec<Vec<u8>> = Group::ALL.iter().map(|&g| m.store.group_bytes(g)).collect();
            run_phase(&cfg, &mut m, &data, None).unwrap();
            for (k, &g) in Group::ALL.iter().enumerate() {
                let same = m.store.group_bytes(g) == before[k];
                if cfg.groups.contains(&g) {
                    // LoRA B starts at zero, so adapters may move only slightly, but they do move
                    assert!(!same || before[k].is_empty(), "{} left {g} unchanged", cfg.phase);
                } else {
                    assert!(same, "{} changed frozen group {g}", cfg.phase);
                }
            }
        }
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostics() {
        let data = crate::data::generate_dataset(2, 4, &crate::data::TaskMix::only(crate::data::Task::VqaCount));
        let mut m = tiny_model(1);
        let id = m.store.id("text.embed").unwrap();
        m.store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = f64::NAN);
        let err = run_phase(&TrainPhaseConfig::new(Phase::Sft, 1e-3, 1, 1), &mut m, &data, None).unwrap_err();
        match err {
            Error::Numeric(msg) => assert!(msg.contains("sample seed")),
            other => panic!("unexpected {other:?}"),
        }
    }
}
