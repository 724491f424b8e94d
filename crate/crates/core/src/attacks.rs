//! L-infinity attacks: FGSM, PGD with configurable start and inner loss,
//! and the CW margin attack optimized by PGD.
//!
//! Examples are attacked independently. The random start of row `i` draws
//! from a ChaCha stream keyed by `(seed, i)`, and rows are processed in
//! fixed-size chunks, so results do not depend on the worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;
use robustdistill_tensor::{Scalar, Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::distill::Method;
use crate::error::{Error, Result};
use crate::losses;
use crate::nn::ParameterSet;

/// Rows per independently processed attack chunk.
pub const ATTACK_CHUNK: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RandomStart {
    None,
    /// Uniform noise in `[-scale, scale]`.
    Uniform { scale: f64 },
    /// Gaussian noise with standard deviation `std`.
    Gaussian { std: f64 },
}

/// Objective maximized by the attack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerLoss {
    /// Cross-entropy against labels.
    Ce,
    /// KL from a reference distribution (the model's own natural prediction).
    KlToNatural,
    /// KL from a reference distribution produced by a teacher.
    KlToTeacherNatural,
    /// `max_{k != y} z_k - z_y` on logits.
    CwMargin,
}

impl InnerLoss {
    fn wants_probs(self) -> bool {
        matches!(self, InnerLoss::KlToNatural | InnerLoss::KlToTeacherNatural)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub random_start: RandomStart,
    pub inner_loss: InnerLoss,
    pub clamp: (f64, f64),
}

/// Step size of the TRADES-style evaluation attack at `epsilon = 8/255`.
const TRADES_STEP_AT_CIFAR_EPS: f64 = 0.003;
const CIFAR_EPS: f64 = 8.0 / 255.0;

impl AttackConfig {
    pub fn fgsm(epsilon: f64) -> Self {
        Self {
            epsilon,
            steps: 1,
            step_size: epsilon,
            random_start: RandomStart::None,
            inner_loss: InnerLoss::Ce,
            clamp: (0.0, 1.0),
        }
    }

    /// 20 steps of `epsilon / 4` from a uniform start over the whole ball.
    pub fn pgd_sat(epsilon: f64) -> Self {
        Self {
            epsilon,
            steps: 20,
            step_size: epsilon / 4.0,
            random_start: RandomStart::Uniform { scale: epsilon },
            inner_loss: InnerLoss::Ce,
            clamp: (0.0, 1.0),
        }
    }

    /// 20 steps of `0.003` (rescaled with `epsilon`) from a Gaussian start of
    /// std 0.001.
    pub fn pgd_trades(epsilon: f64) -> Self {
        Self {
            epsilon,
            steps: 20,
            step_size: TRADES_STEP_AT_CIFAR_EPS * epsilon / CIFAR_EPS,
            random_start: RandomStart::Gaussian { std: 0.001 },
            inner_loss: InnerLoss::Ce,
            clamp: (0.0, 1.0),
        }
    }

    /// The PGD_TRADES schedule applied to the CW margin.
    pub fn cw(epsilon: f64) -> Self {
        Self {
            inner_loss: InnerLoss::CwMargin,
            ..Self::pgd_trades(epsilon)
        }
    }

    /// The training-time inner solver: 10 steps of `epsilon / 4` from a
    /// Gaussian start of std 0.001.
    pub fn train_pgd10(epsilon: f64) -> Self {
        Self {
            epsilon,
            steps: 10,
            step_size: epsilon / 4.0,
            random_start: RandomStart::Gaussian { std: 0.001 },
            inner_loss: InnerLoss::Ce,
            clamp: (0.0, 1.0),
        }
    }

    pub fn with_loss(mut self, inner_loss: InnerLoss) -> Self {
        self.inner_loss = inner_loss;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Parameter(format!("epsilon {} not in [0, 1]", self.epsilon)));
        }
        // A zero radius pins every iterate to x, so its presets' zero step
        // size is accepted.
        let step_ok = if self.epsilon == 0.0 {
            self.step_size >= 0.0 && self.step_size.is_finite()
        } else {
            self.step_size > 0.0 && self.step_size.is_finite()
        };
        if self.steps > 0 && !step_ok {
            return Err(Error::Parameter(format!(
                "step_size must be positive when steps > 0, got {}",
                self.step_size
            )));
        }
        let (lo, hi) = self.clamp;
        if !(lo < hi) {
            return Err(Error::Parameter(format!("clamp range ({lo}, {hi}) is empty")));
        }
        match self.random_start {
            RandomStart::Uniform { scale } if !(scale >= 0.0) => {
                Err(Error::Parameter(format!("uniform start scale {scale} must be >= 0")))
            }
            RandomStart::Gaussian { std } if !(std >= 0.0) => {
                Err(Error::Parameter(format!("gaussian start std {std} must be >= 0")))
            }
            _ => Ok(()),
        }
    }
}

/// What the attack's loss is measured against.
#[derive(Clone, Copy, Debug)]
pub enum Reference<'a, T> {
    Labels(&'a [usize]),
    /// Row-stochastic `[batch, classes]`, treated as a constant.
    Probs(&'a Tensor<T>),
}

impl<T> Reference<'_, T> {
    fn rows(&self) -> usize
    where
        T: Scalar,
    {
        match self {
            Reference::Labels(y) => y.len(),
            Reference::Probs(p) => p.rows(),
        }
    }
}

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Projects onto the `epsilon` ball around `x`, then clamps to the valid range.
fn project<T: Scalar>(adv: &mut [T], x: &[T], eps: T, lo: T, hi: T) {
    for (a, &o) in adv.iter_mut().zip(x) {
        *a = a.max(o - eps).min(o + eps).max(lo).min(hi);
    }
}

fn start_point<T: Scalar>(x: &Tensor<T>, cfg: &AttackConfig, seed: u64, first_row: usize) -> Tensor<T> {
    let mut adv = x.clone();
    if matches!(cfg.random_start, RandomStart::None) {
        return adv;
    }
    for i in 0..adv.rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream((first_row + i) as u64);
        let row = adv.row_mut(i);
        match cfg.random_start {
            RandomStart::Uniform { scale } if scale > 0.0 => {
                let d = Uniform::new_inclusive(-scale, scale).expect("finite scale");
                row.iter_mut().for_each(|v| *v = *v + T::lit(d.sample(&mut rng)));
            }
            RandomStart::Gaussian { std } if std > 0.0 => {
                let d = Normal::new(0.0, std).expect("finite std");
                row.iter_mut().for_each(|v| *v = *v + T::lit(d.sample(&mut rng)));
            }
            _ => {}
        }
    }
    adv
}

fn attack_chunk<T: Scalar>(
    params: &ParameterSet<T>,
    x: &Tensor<T>,
    reference: Reference<'_, T>,
    cfg: &AttackConfig,
    seed: u64,
    first_row: usize,
) -> Result<Tensor<T>> {
    let eps = T::lit(cfg.epsilon);
    let (lo, hi) = (T::lit(cfg.clamp.0), T::lit(cfg.clamp.1));
    let step = T::lit(cfg.step_size);
    let mut adv = start_point(x, cfg, seed, first_row);
    project(adv.data_mut(), x.data(), eps, lo, hi);
    for _ in 0..cfg.steps {
        let tape = Tape::new();
        let model = params.bind(&tape, false);
        let xv = tape.leaf(adv.clone());
        let logits = model.forward(xv)?;
        // Summed rather than averaged so each row's objective is independent
        // of how rows are grouped; only the gradient sign is used.
        let loss = match (cfg.inner_loss, reference) {
            (InnerLoss::Ce, Reference::Labels(y)) => losses::ce_rows(logits.softmax()?, y)?.sum(),
            (InnerLoss::CwMargin, Reference::Labels(y)) => losses::cw_margin_rows(logits, y)?.sum(),
            (InnerLoss::KlToNatural | InnerLoss::KlToTeacherNatural, Reference::Probs(p)) => {
                losses::kl_rows(logits.softmax()?, tape.constant(p.clone()))?.sum()
            }
            _ => unreachable!("reference kind checked by caller"),
        };
        let g = tape.backward(loss)?.wrt(xv);
        for (a, &gv) in adv.data_mut().iter_mut().zip(g.data()) {
            *a = *a + step * sign(gv);
        }
        project(adv.data_mut(), x.data(), eps, lo, hi);
    }
    Ok(adv)
}

/// Projected gradient ascent on the configured inner loss. Returns the final
/// iterate; model parameters are read only.
pub fn pgd<T: Scalar>(
    params: &ParameterSet<T>,
    x: &Tensor<T>,
    reference: Reference<'_, T>,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    match (cfg.inner_loss.wants_probs(), reference) {
        (true, Reference::Labels(_)) => {
            return Err(Error::Contract(format!(
                "{:?} needs a probability reference, got labels",
                cfg.inner_loss
            )))
        }
        (false, Reference::Probs(_)) => {
            return Err(Error::Contract(format!("{:?} needs labels, got probabilities", cfg.inner_loss)))
        }
        _ => {}
    }
    if reference.rows() != x.rows() {
        return Err(Error::Shape(format!(
            "{} reference rows for a batch of {}",
            reference.rows(),
            x.rows()
        )));
    }
    if let Reference::Probs(p) = reference {
        if p.ndim() != 2 || p.shape()[1] != params.spec().num_classes {
            return Err(Error::Shape(format!(
                "reference {:?} does not match {} classes",
                p.shape(),
                params.spec().num_classes
            )));
        }
    }
    let n = x.rows();
    let starts: Vec<usize> = (0..n).step_by(ATTACK_CHUNK).collect();
    let pieces: Vec<Tensor<T>> = starts
        .par_iter()
        .map(|&s| {
            let idx: Vec<usize> = (s..(s + ATTACK_CHUNK).min(n)).collect();
            let xs = x.select_rows(&idx);
            match reference {
                Reference::Labels(y) => attack_chunk(params, &xs, Reference::Labels(&y[s..s + idx.len()]), cfg, seed, s),
                Reference::Probs(p) => {
                    let ps = p.select_rows(&idx);
                    attack_chunk(params, &xs, Reference::Probs(&ps), cfg, seed, s)
                }
            }
        })
        .collect::<Result<_>>()?;
    if pieces.is_empty() {
        return Ok(x.clone());
    }
    Ok(Tensor::concat_rows(&pieces)?)
}

/// One signed-gradient step of size `epsilon` on cross-entropy.
pub fn fgsm<T: Scalar>(params: &ParameterSet<T>, x: &Tensor<T>, y: &[usize], epsilon: f64) -> Result<Tensor<T>> {
    pgd(params, x, Reference::Labels(y), &AttackConfig::fgsm(epsilon), 0)
}

/// PGD on the CW margin with the schedule of `cfg`.
pub fn cw_inf<T: Scalar>(
    params: &ParameterSet<T>,
    x: &Tensor<T>,
    y: &[usize],
    cfg: &AttackConfig,
    seed: u64,
) -> Result<Tensor<T>> {
    pgd(params, x, Reference::Labels(y), &cfg.with_loss(InnerLoss::CwMargin), seed)
}

/// The inner maximization of `method`: cross-entropy for SAT, MART, ARD and
/// IAD; KL from the student's own natural prediction for TRADES; KL from the
/// teacher's natural prediction (temperature 1) for RSLAD.
pub fn inner_max<T: Scalar>(
    method: Method,
    student: &ParameterSet<T>,
    teacher: Option<&ParameterSet<T>>,
    x: &Tensor<T>,
    y: &[usize],
    cfg: &AttackConfig,
    seed: u64,
) -> Result<Tensor<T>> {
    if method.needs_teacher() && teacher.is_none() {
        return Err(Error::Config(format!("{method} needs a teacher model")));
    }
    match method {
        Method::Nat => Ok(x.clone()),
        Method::Sat | Method::Mart | Method::Ard | Method::Iad => {
            pgd(student, x, Reference::Labels(y), &cfg.with_loss(InnerLoss::Ce), seed)
        }
        Method::Trades => {
            let natural = student.predict_probs(x, T::one())?;
            pgd(student, x, Reference::Probs(&natural), &cfg.with_loss(InnerLoss::KlToNatural), seed)
        }
        Method::Rslad => {
            let teacher = teacher.expect("checked above");
            let natural = teacher.predict_probs(x, T::one())?;
            pgd(
                student,
                x,
                Reference::Probs(&natural),
                &cfg.with_loss(InnerLoss::KlToTeacherNatural),
                seed,
            )
        }
    }
}
