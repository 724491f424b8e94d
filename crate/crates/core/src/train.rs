//! SGD, learning-rate schedules and the epoch loop.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use robustdistill_tensor::{Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::attacks::AttackConfig;
use crate::data::{augment, shuffled_batches, AugmentConfig, Dataset};
use crate::distill::{craft_adversarial, outer_loss, DefenseConfig, Method};
use crate::error::{Error, Result};
use crate::eval;
use crate::nn::{Checkpoint, ParameterSet, Role, Selection};

/// Mixes a base seed with a sequence of tags (splitmix64 finalizer).
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut z = base;
    for &t in tags {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(t.wrapping_mul(0xD1B5_4A32_D192_ED03));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

const TAG_SHUFFLE: u64 = 1;
const TAG_AUGMENT: u64 = 2;
const TAG_ATTACK: u64 = 3;
const TAG_SELECT: u64 = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 2e-4,
            batch_size: 128,
        }
    }
}

/// Momentum buffers mirroring a parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub buffers: BTreeMap<String, Tensor<f32>>,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl OptimizerState {
    pub fn new(params: &ParameterSet<f32>, momentum: f64, weight_decay: f64) -> Self {
        let buffers = params
            .tensors()
            .iter()
            .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape().to_vec())))
            .collect();
        Self {
            buffers,
            momentum,
            weight_decay,
        }
    }
}

/// `g = grad + wd * p; buf = m * buf + g; p -= lr * buf`.
pub fn sgd_step(
    params: &mut ParameterSet<f32>,
    grads: &BTreeMap<String, Tensor<f32>>,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    if params.role() == Role::Teacher {
        return Err(Error::Contract("refusing to update teacher parameters".into()));
    }
    let keys_match = grads.len() == params.tensors().len()
        && state.buffers.len() == grads.len()
        && grads.iter().all(|(k, g)| {
            params.get(k).is_some_and(|p| p.shape() == g.shape())
                && state.buffers.get(k).is_some_and(|b| b.shape() == g.shape())
        });
    if !keys_match {
        return Err(Error::Contract("gradients, buffers and parameters do not align".into()));
    }
    let (m, wd, lr) = (state.momentum as f32, state.weight_decay as f32, lr as f32);
    for (name, p) in params.tensors_mut() {
        let g = &grads[name];
        let buf = state.buffers.get_mut(name).expect("checked above");
        for ((pv, &gv), bv) in p.data_mut().iter_mut().zip(g.data()).zip(buf.data_mut()) {
            let g = gv + wd * *pv;
            *bv = m * *bv + g;
            *pv -= lr * *bv;
        }
    }
    Ok(())
}

/// Step decay: the learning rate is divided at each decay epoch, effective
/// from that (1-indexed) epoch onward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub initial_lr: f64,
    pub total_epochs: usize,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
}

impl Schedule {
    /// 300 epochs, divided by 10 at 215, 260 and 285.
    pub fn adversarial() -> Self {
        Self {
            initial_lr: 0.1,
            total_epochs: 300,
            decay_epochs: vec![215, 260, 285],
            decay_factor: 0.1,
        }
    }

    /// 100 epochs, divided by 10 at 75 and 90.
    pub fn natural() -> Self {
        Self {
            initial_lr: 0.1,
            total_epochs: 100,
            decay_epochs: vec![75, 90],
            decay_factor: 0.1,
        }
    }

    /// 60 epochs, divided by 10 at 43, 52 and 57.
    pub fn desk() -> Self {
        Self {
            initial_lr: 0.1,
            total_epochs: 60,
            decay_epochs: vec![43, 52, 57],
            decay_factor: 0.1,
        }
    }

    /// Decay points scaled proportionally from the 300-epoch schedule. The
    /// first epoch always runs at the initial rate.
    pub fn scaled(total_epochs: usize) -> Self {
        let long = Self::adversarial();
        let mut decay: Vec<usize> = long
            .decay_epochs
            .iter()
            .map(|&d| ((d * total_epochs) as f64 / long.total_epochs as f64).round() as usize)
            .filter(|&d| d >= 2 && d <= total_epochs)
            .collect();
        decay.dedup();
        Self {
            total_epochs,
            decay_epochs: decay,
            ..long
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_epochs == 0 {
            return Err(Error::Parameter("schedule needs at least one epoch".into()));
        }
        if !(self.initial_lr > 0.0) || !(self.decay_factor > 0.0) {
            return Err(Error::Parameter(format!(
                "initial_lr {} and decay_factor {} must be positive",
                self.initial_lr, self.decay_factor
            )));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Parameter(format!(
                "decay epochs {:?} must be strictly increasing",
                self.decay_epochs
            )));
        }
        if self.decay_epochs.iter().any(|&d| d == 0 || d > self.total_epochs) {
            return Err(Error::Parameter(format!(
                "decay epochs {:?} must lie in 1..={}",
                self.decay_epochs, self.total_epochs
            )));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch == 0 || epoch > self.total_epochs {
            return Err(Error::Parameter(format!(
                "epoch {epoch} outside 1..={}",
                self.total_epochs
            )));
        }
        let decays = self.decay_epochs.iter().filter(|&&d| d <= epoch).count();
        Ok(self.initial_lr * self.decay_factor.powi(decays as i32))
    }
}

/// One line of training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_clean_acc: f64,
    pub val_robust_acc: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRunConfig {
    pub defense: DefenseConfig,
    /// Inner solver used to craft training examples.
    pub attack: AttackConfig,
    /// Attack measuring validation robustness for checkpoint selection.
    pub selection_attack: AttackConfig,
    pub schedule: Schedule,
    pub optimizer: OptimizerConfig,
    pub augment: AugmentConfig,
    pub seed: u64,
    /// Rows per independently differentiated slice of a batch. Fixing it
    /// keeps results identical for any worker count.
    pub grad_chunk: usize,
    /// Record zero instead of measured wall time in the history.
    pub deterministic: bool,
}

impl TrainRunConfig {
    pub fn new(defense: DefenseConfig, epsilon: f64) -> Self {
        Self {
            defense,
            attack: AttackConfig::train_pgd10(epsilon),
            selection_attack: AttackConfig::pgd_trades(epsilon),
            schedule: Schedule::desk(),
            optimizer: OptimizerConfig::default(),
            augment: AugmentConfig::default(),
            seed: 0,
            grad_chunk: 32,
            deterministic: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.defense.validate()?;
        self.attack.validate()?;
        self.selection_attack.validate()?;
        self.schedule.validate()?;
        if self.optimizer.batch_size == 0 || self.grad_chunk == 0 {
            return Err(Error::Parameter("batch_size and grad_chunk must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.optimizer.momentum) || self.optimizer.weight_decay < 0.0 {
            return Err(Error::Parameter(format!(
                "momentum {} must be in [0, 1) and weight_decay {} >= 0",
                self.optimizer.momentum, self.optimizer.weight_decay
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub train_loss: f64,
    pub train_acc: f64,
    pub wall_ms: u64,
}

fn check_teacher(cfg: &TrainRunConfig, student: &ParameterSet<f32>, teacher: Option<&ParameterSet<f32>>) -> Result<()> {
    match teacher {
        None if cfg.defense.needs_teacher() => Err(Error::Config(format!(
            "{} needs a teacher checkpoint",
            cfg.defense.method
        ))),
        Some(t) => {
            let (s, t) = (student.spec(), t.spec());
            if s.input_shape != t.input_shape || s.num_classes != t.num_classes {
                return Err(Error::Config(format!(
                    "teacher ({:?}, {} classes) does not match student ({:?}, {} classes)",
                    t.input_shape, t.num_classes, s.input_shape, s.num_classes
                )));
            }
            Ok(())
        }
        None => Ok(()),
    }
}

/// Loss value and gradients of one batch, accumulated over fixed chunks.
fn batch_gradients(
    cfg: &TrainRunConfig,
    student: &ParameterSet<f32>,
    teacher: Option<&ParameterSet<f32>>,
    x: &Tensor<f32>,
    x_adv: &Tensor<f32>,
    y: &[usize],
) -> Result<(f64, BTreeMap<String, Tensor<f32>>)> {
    let n = y.len();
    let starts: Vec<usize> = (0..n).step_by(cfg.grad_chunk).collect();
    let parts: Vec<(f64, BTreeMap<String, Tensor<f32>>)> = starts
        .par_iter()
        .map(|&s| {
            let idx: Vec<usize> = (s..(s + cfg.grad_chunk).min(n)).collect();
            let weight = idx.len() as f32 / n as f32;
            let tape = Tape::new();
            let bound = student.bind(&tape, true);
            let tbound = teacher.map(|t| t.bind(&tape, false));
            let loss = outer_loss(
                &cfg.defense,
                &bound,
                tbound.as_ref(),
                &x.select_rows(&idx),
                &x_adv.select_rows(&idx),
                &y[s..s + idx.len()],
            )?;
            let value = loss.value().item() as f64;
            let grads = tape.backward(loss.scale(weight))?;
            Ok((value * weight as f64, bound.gradients(&grads)))
        })
        .collect::<Result<_>>()?;
    let mut parts = parts.into_iter();
    let (mut total, mut acc) = parts.next().expect("non-empty batch");
    for (v, g) in parts {
        total += v;
        for (k, t) in g {
            acc.get_mut(&k).expect("same parameter names").add_assign(&t);
        }
    }
    Ok((total, acc))
}

/// One pass over `data` in seeded shuffled batches.
pub fn train_epoch(
    cfg: &TrainRunConfig,
    student: &mut ParameterSet<f32>,
    state: &mut OptimizerState,
    teacher: Option<&ParameterSet<f32>>,
    epoch: usize,
    data: &Dataset,
) -> Result<EpochStats> {
    check_teacher(cfg, student, teacher)?;
    let started = Instant::now();
    let lr = cfg.schedule.lr_at(epoch)?;
    let e = epoch as u64;
    let batches = shuffled_batches(data.len(), cfg.optimizer.batch_size, derive_seed(cfg.seed, &[TAG_SHUFFLE, e]));
    let mut aug_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[TAG_AUGMENT, e]));
    let (mut loss_sum, mut correct) = (0.0, 0usize);
    for (step, idx) in batches.iter().enumerate() {
        let (x, y) = data.batch(idx);
        let x = augment(&x, &cfg.augment, &mut aug_rng);
        let pred = student.predict(&x)?;
        correct += pred.iter().zip(&y).filter(|(p, t)| p == t).count();
        let x_adv = if cfg.defense.method == Method::Nat && cfg.defense.inner_method.is_none() {
            x.clone()
        } else {
            let seed = derive_seed(cfg.seed, &[TAG_ATTACK, e, step as u64]);
            craft_adversarial(&cfg.defense, student, teacher, &x, &y, &cfg.attack, seed)?
        };
        let (loss, grads) = batch_gradients(cfg, student, teacher, &x, &x_adv, &y)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite { epoch, step, value: loss });
        }
        sgd_step(student, &grads, state, lr)?;
        loss_sum += loss * y.len() as f64;
    }
    let n = data.len().max(1) as f64;
    Ok(EpochStats {
        train_loss: loss_sum / n,
        train_acc: correct as f64 / n,
        wall_ms: started.elapsed().as_millis() as u64,
    })
}

pub struct TrainOutcome {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub history: Vec<EpochRecord>,
}

/// Per-epoch progress passed to [`run_training`] observers.
pub struct EpochReport<'a> {
    pub record: &'a EpochRecord,
    /// Measured wall time, even when the record holds zero.
    pub wall_ms: u64,
    pub is_best: bool,
}

/// Trains for the whole schedule, evaluating the selection metric on `val`
/// after every epoch. NAT selects by clean validation accuracy, every other
/// method by robust accuracy under `cfg.selection_attack`. Ties go to the
/// later epoch.
pub fn run_training(
    cfg: &TrainRunConfig,
    init: ParameterSet<f32>,
    teacher: Option<&ParameterSet<f32>>,
    train: &Dataset,
    val: &Dataset,
    mut observer: impl FnMut(EpochReport<'_>) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut student = init.with_role(Role::Student);
    check_teacher(cfg, &student, teacher)?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Parameter("training and validation sets must be non-empty".into()));
    }
    let teacher_digest = teacher.map(ParameterSet::digest);
    let mut state = OptimizerState::new(&student, cfg.optimizer.momentum, cfg.optimizer.weight_decay);
    let mut history = Vec::with_capacity(cfg.schedule.total_epochs);
    let mut best: Option<(f64, Checkpoint)> = None;
    let by_clean = cfg.defense.method == Method::Nat;
    for epoch in 1..=cfg.schedule.total_epochs {
        let stats = train_epoch(cfg, &mut student, &mut state, teacher, epoch, train)?;
        let clean = eval::accuracy(&student, val)?;
        let robust = eval::robust_accuracy(
            &student,
            val,
            &cfg.selection_attack,
            derive_seed(cfg.seed, &[TAG_SELECT, epoch as u64]),
        )?;
        let record = EpochRecord {
            epoch,
            lr: cfg.schedule.lr_at(epoch)?,
            train_loss: stats.train_loss,
            train_acc: stats.train_acc,
            val_clean_acc: clean,
            val_robust_acc: robust,
            wall_ms: if cfg.deterministic { 0 } else { stats.wall_ms },
        };
        history.push(record.clone());
        let score = if by_clean { clean } else { robust };
        let is_best = best.as_ref().is_none_or(|(s, _)| score >= *s);
        if is_best {
            let ckpt = Checkpoint {
                params: student.clone(),
                epoch,
                momentum: state.buffers.clone(),
                history: history.clone(),
                selection: Selection::Best,
            };
            best = Some((score, ckpt));
        }
        observer(EpochReport {
            record: &record,
            wall_ms: stats.wall_ms,
            is_best,
        })?;
    }
    if let (Some(t), Some(d)) = (teacher, teacher_digest) {
        if t.digest() != d {
            return Err(Error::Contract("teacher parameters changed during training".into()));
        }
    }
    let last = Checkpoint {
        params: student,
        epoch: cfg.schedule.total_epochs,
        momentum: state.buffers,
        history: history.clone(),
        selection: Selection::Last,
    };
    let (_, best) = best.expect("at least one epoch");
    Ok(TrainOutcome { best, last, history })
}
