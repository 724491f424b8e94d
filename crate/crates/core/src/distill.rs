//! Defense methods: outer-minimization losses, soft labels, and the
//! method-specific choice of adversarial examples.

use std::fmt;
use std::str::FromStr;

use robustdistill_tensor::{softmax_t, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::attacks::{self, AttackConfig, InnerLoss, Reference};
use crate::error::{Error, Result};
use crate::losses::{bce_mart_rows, ce_loss, kl_loss, kl_rows};
use crate::nn::{BoundModel, ParameterSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    Nat,
    Sat,
    Trades,
    Mart,
    Ard,
    Iad,
    Rslad,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Nat,
        Method::Sat,
        Method::Trades,
        Method::Mart,
        Method::Ard,
        Method::Iad,
        Method::Rslad,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Nat => "NAT",
            Method::Sat => "SAT",
            Method::Trades => "TRADES",
            Method::Mart => "MART",
            Method::Ard => "ARD",
            Method::Iad => "IAD",
            Method::Rslad => "RSLAD",
        }
    }

    /// Whether the method distills from a teacher.
    pub fn needs_teacher(self) -> bool {
        matches!(self, Method::Ard | Method::Iad | Method::Rslad)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl TryFrom<String> for Method {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Method> for String {
    fn from(m: Method) -> String {
        m.name().to_string()
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let valid: Vec<_> = Method::ALL.iter().map(|m| m.name()).collect();
                Error::Config(format!("unknown method {s:?}; valid methods: {}", valid.join(", ")))
            })
    }
}

/// Where RSLAD's teacher predictions are taken.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RslSource {
    /// `T(x)` in every term.
    Natural,
    /// `T(x')` in every term of the outer loss.
    Adversarial,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SoftLabelKind {
    /// Label smoothing toward uniform.
    Ssl,
    /// Predictions of a naturally trained teacher.
    Nsl,
    /// Predictions of an adversarially trained teacher.
    Rsl,
}

impl fmt::Display for SoftLabelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SoftLabelKind::Ssl => "SSL",
            SoftLabelKind::Nsl => "NSL",
            SoftLabelKind::Rsl => "RSL",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefenseConfig {
    pub method: Method,
    /// Overrides the method whose inner maximization crafts `x'`.
    pub inner_method: Option<Method>,
    pub lambda: f64,
    pub alpha: f64,
    pub tau: f64,
    pub beta: f64,
    pub rsl_source: RslSource,
    /// Targets used by RSLAD.
    pub soft_label: SoftLabelKind,
    /// Smoothing of SSL targets.
    pub smoothing: f64,
}

impl DefenseConfig {
    /// Defaults: lambda 6, tau 1, beta 1; alpha 5/6 for RSLAD and 1 otherwise.
    pub fn new(method: Method) -> Self {
        Self {
            method,
            inner_method: None,
            lambda: 6.0,
            alpha: Self::default_alpha(method),
            tau: 1.0,
            beta: 1.0,
            rsl_source: RslSource::Natural,
            soft_label: SoftLabelKind::Rsl,
            smoothing: 0.1,
        }
    }

    pub fn default_alpha(method: Method) -> f64 {
        match method {
            Method::Rslad => 5.0 / 6.0,
            _ => 1.0,
        }
    }

    pub fn inner(&self) -> Method {
        self.inner_method.unwrap_or(self.method)
    }

    fn method_needs_teacher(&self, m: Method) -> bool {
        match m {
            Method::Rslad => self.soft_label != SoftLabelKind::Ssl,
            other => other.needs_teacher(),
        }
    }

    pub fn needs_teacher(&self) -> bool {
        self.method_needs_teacher(self.method) || self.method_needs_teacher(self.inner())
    }

    /// Every field is range-checked, whether or not the method uses it.
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, what: String| if ok { Ok(()) } else { Err(Error::Parameter(what)) };
        check(self.lambda >= 0.0 && self.lambda.is_finite(), format!("lambda {} must be >= 0", self.lambda))?;
        check((0.0..=1.0).contains(&self.alpha), format!("alpha {} not in [0, 1]", self.alpha))?;
        check(self.tau > 0.0 && self.tau.is_finite(), format!("tau {} must be > 0", self.tau))?;
        check(self.beta > 0.0 && self.beta.is_finite(), format!("beta {} must be > 0", self.beta))?;
        check(
            (0.0..1.0).contains(&self.smoothing),
            format!("smoothing {} not in [0, 1)", self.smoothing),
        )
    }
}

/// Row-stochastic targets tagged with their origin.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftLabelBatch<T = f32> {
    pub rows: Tensor<T>,
    pub kind: SoftLabelKind,
}

/// `(1 - s) * onehot(y) + s / C`.
pub fn smooth_labels<T: Scalar>(y: &[usize], num_classes: usize, smoothing: f64) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::Parameter(format!("smoothing {smoothing} not in [0, 1)")));
    }
    let off = smoothing / num_classes as f64;
    let mut rows = Tensor::full(vec![y.len(), num_classes], T::lit(off));
    for (i, &label) in y.iter().enumerate() {
        rows.data_mut()[i * num_classes + label] = T::lit(1.0 - smoothing + off);
    }
    Ok(rows)
}

/// SSL rows from labels, or the teacher's temperature-1 predictions on `x`
/// (or on `x_adv` for the adversarial RSL source).
#[allow(clippy::too_many_arguments)]
pub fn make_soft_labels<T: Scalar>(
    kind: SoftLabelKind,
    teacher: Option<&ParameterSet<T>>,
    x: &Tensor<T>,
    x_adv: &Tensor<T>,
    y: &[usize],
    num_classes: usize,
    smoothing: f64,
    source: RslSource,
) -> Result<SoftLabelBatch<T>> {
    let rows = match kind {
        SoftLabelKind::Ssl => smooth_labels(y, num_classes, smoothing)?,
        SoftLabelKind::Nsl | SoftLabelKind::Rsl => {
            let teacher = teacher.ok_or_else(|| Error::Config(format!("{kind} soft labels need a teacher")))?;
            let input = match source {
                RslSource::Natural => x,
                RslSource::Adversarial => x_adv,
            };
            teacher.predict_probs(input, T::one())?
        }
    };
    Ok(SoftLabelBatch { rows, kind })
}

fn teacher_probs<'t, T: Scalar>(teacher: &BoundModel<'t, T>, x: &Tensor<T>, tau: T) -> Result<Tensor<T>> {
    let p = softmax_t(teacher.forward_tensor(x)?, tau)?;
    let rows = (*p.value()).clone();
    Ok(rows)
}

fn require<'a, 'b, T: Scalar>(
    teacher: Option<&'a BoundModel<'b, T>>,
    method: Method,
) -> Result<&'a BoundModel<'b, T>> {
    teacher.ok_or_else(|| Error::Config(format!("{method} needs a teacher model")))
}

/// The outer-minimization objective of `cfg.method` for one batch.
///
/// Teacher outputs enter as constants, so no gradient reaches teacher
/// parameters even when they are bound as trainable leaves. Student
/// self-distillation terms keep gradients through both arguments.
pub fn outer_loss<'t, T: Scalar>(
    cfg: &DefenseConfig,
    student: &BoundModel<'t, T>,
    teacher: Option<&BoundModel<'t, T>>,
    x: &Tensor<T>,
    x_adv: &Tensor<T>,
    y: &[usize],
) -> Result<Var<'t, T>> {
    cfg.validate()?;
    let tape = student.tape();
    let lit = T::lit;
    let probs = |input: &Tensor<T>, tau: T| -> Result<Var<'t, T>> { Ok(softmax_t(student.forward_tensor(input)?, tau)?) };
    let mix = |a: f64, first: Option<Var<'t, T>>, b: f64, second: Option<Var<'t, T>>| -> Result<Var<'t, T>> {
        // Terms with weight exactly zero are skipped, not multiplied by zero.
        match (first, second) {
            (Some(f), Some(s)) => Ok(f.scale(lit(a)).add(s.scale(lit(b)))?),
            (Some(f), None) => Ok(f.scale(lit(a))),
            (None, Some(s)) => Ok(s.scale(lit(b))),
            (None, None) => Ok(tape.constant(Tensor::scalar(T::zero()))),
        }
    };
    match cfg.method {
        Method::Nat => ce_loss(probs(x, T::one())?, y),
        Method::Sat => ce_loss(probs(x_adv, T::one())?, y),
        Method::Trades => {
            let nat = probs(x, T::one())?;
            let adv = probs(x_adv, T::one())?;
            Ok(ce_loss(nat, y)?.add(kl_loss(adv, nat)?.scale(lit(cfg.lambda)))?)
        }
        Method::Mart => {
            let nat = probs(x, T::one())?;
            let adv = probs(x_adv, T::one())?;
            let weight = nat.gather(y)?.rsub_scalar(T::one());
            let robust = kl_rows(adv, nat)?.mul(weight)?.scale(lit(cfg.lambda));
            Ok(bce_mart_rows(adv, y)?.add(robust)?.mean())
        }
        Method::Ard => {
            let teacher = require(teacher, cfg.method)?;
            let tau = lit(cfg.tau);
            let natural = (cfg.alpha < 1.0).then(|| probs(x, tau).and_then(|p| ce_loss(p, y))).transpose()?;
            let distill = if cfg.alpha > 0.0 {
                let t = tape.constant(teacher_probs(teacher, x, tau)?);
                Some(kl_loss(probs(x_adv, tau)?, t)?.scale(lit(cfg.tau * cfg.tau)))
            } else {
                None
            };
            mix(1.0 - cfg.alpha, natural, cfg.alpha, distill)
        }
        Method::Iad => {
            let teacher = require(teacher, cfg.method)?;
            let tau = lit(cfg.tau);
            let confidence = teacher_probs(teacher, x_adv, T::one())?;
            let beta = lit(cfg.beta);
            let w: Vec<T> = y
                .iter()
                .enumerate()
                .map(|(i, &label)| confidence.row(i)[label].powf(beta))
                .collect();
            let w = Tensor::from_vec(w);
            let one_minus = w.map(|v| T::one() - v);
            let adv = probs(x_adv, tau)?;
            let t = tape.constant(teacher_probs(teacher, x, tau)?);
            let from_teacher = kl_rows(adv, t)?.mul(tape.constant(w))?;
            let from_self = kl_rows(adv, probs(x, tau)?)?.mul(tape.constant(one_minus))?;
            Ok(from_teacher.add(from_self)?.mean())
        }
        Method::Rslad => {
            let targets = match cfg.soft_label {
                SoftLabelKind::Ssl => smooth_labels(y, student.spec().num_classes, cfg.smoothing)?,
                _ => {
                    let input = match cfg.rsl_source {
                        RslSource::Natural => x,
                        RslSource::Adversarial => x_adv,
                    };
                    teacher_probs(require(teacher, cfg.method)?, input, T::one())?
                }
            };
            let targets = tape.constant(targets);
            let natural = (cfg.alpha < 1.0)
                .then(|| probs(x, T::one()).and_then(|p| kl_loss(p, targets)))
                .transpose()?;
            let adversarial = (cfg.alpha > 0.0)
                .then(|| probs(x_adv, T::one()).and_then(|p| kl_loss(p, targets)))
                .transpose()?;
            mix(1.0 - cfg.alpha, natural, cfg.alpha, adversarial)
        }
    }
}

/// Crafts `x'` with the inner maximization of `cfg.inner()`. For RSLAD the
/// reference distribution follows `cfg.soft_label` (teacher predictions at
/// temperature 1, or smoothed labels).
pub fn craft_adversarial<T: Scalar>(
    cfg: &DefenseConfig,
    student: &ParameterSet<T>,
    teacher: Option<&ParameterSet<T>>,
    x: &Tensor<T>,
    y: &[usize],
    attack: &AttackConfig,
    seed: u64,
) -> Result<Tensor<T>> {
    match cfg.inner() {
        Method::Rslad => {
            let reference = match cfg.soft_label {
                SoftLabelKind::Ssl => smooth_labels(y, student.spec().num_classes, cfg.smoothing)?,
                _ => teacher
                    .ok_or_else(|| Error::Config("RSLAD needs a teacher model".into()))?
                    .predict_probs(x, T::one())?,
            };
            attacks::pgd(
                student,
                x,
                Reference::Probs(&reference),
                &attack.with_loss(InnerLoss::KlToTeacherNatural),
                seed,
            )
        }
        other => attacks::inner_max(other, student, teacher, x, y, attack, seed),
    }
}
