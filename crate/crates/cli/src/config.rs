//! Run configuration files (TOML).
//!
//! Every field has a default, so an empty file is a valid configuration.
//! Unknown keys are rejected. [`RunConfig::resolve`] fills the defaults
//! that depend on other fields; the resolved form is what gets echoed to
//! `config.resolved` and digested.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use robustdistill::attacks::{AttackConfig, InnerLoss, RandomStart};
use robustdistill::data::{AugmentConfig, SyntheticConfig, SyntheticKind};
use robustdistill::digest::fnv1a64;
use robustdistill::distill::{DefenseConfig, Method, RslSource, SoftLabelKind};
use robustdistill::eval::SuiteConfig;
use robustdistill::nn::{Layer, ModelSpec, TeacherSize};
use robustdistill::train::{OptimizerConfig, Schedule, TrainRunConfig};
use serde::{Deserialize, Serialize};

const CIFAR_EPSILON: f64 = 8.0 / 255.0;
const DESK_EPSILON: f64 = 0.1;
// Without normalization layers the desk students diverge now and then at 0.1.
const DESK_LR: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetId {
    Synthetic,
    /// idx files `train-images-idx3-ubyte`, `train-labels-idx1-ubyte`,
    /// `t10k-images-idx3-ubyte`, `t10k-labels-idx1-ubyte` under `path`.
    Mnist,
    /// `data_batch_1.bin` .. `data_batch_5.bin` and `test_batch.bin` under `path`.
    Cifar10,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub id: DatasetId,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub kind: SyntheticKind,
    pub n_train: usize,
    pub n_test: usize,
    pub num_classes: usize,
    pub image_size: usize,
    pub margin: f64,
    pub noise: f64,
    pub mix: f64,
    pub pattern_seed: u64,
    pub validation_fraction: f64,
    pub augment: bool,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let s = SyntheticConfig::default();
        Self {
            id: DatasetId::Synthetic,
            path: None,
            kind: s.kind,
            n_train: s.n,
            n_test: 1000,
            num_classes: s.num_classes,
            image_size: s.image_size,
            margin: s.margin,
            noise: s.noise,
            mix: s.mix,
            pattern_seed: s.pattern_seed,
            validation_fraction: 0.1,
            augment: false,
        }
    }
}

impl DatasetSection {
    pub fn synthetic(&self, n: usize, seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            kind: self.kind,
            n,
            num_classes: self.num_classes,
            seed,
            pattern_seed: self.pattern_seed,
            image_size: self.image_size,
            margin: self.margin,
            noise: self.noise,
            mix: self.mix,
        }
    }

    pub fn augment_config(&self) -> AugmentConfig {
        if self.augment {
            AugmentConfig::standard()
        } else {
            AugmentConfig::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    /// Two convolutions and two dense layers.
    Cnn,
    /// Fully connected, widths from `hidden`.
    Mlp,
    ResnetSmall,
    ResnetMedium,
    ResnetLarge,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub arch: Arch,
    pub hidden: Vec<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            arch: Arch::Cnn,
            hidden: vec![100],
        }
    }
}

impl ModelSection {
    pub fn spec(&self, sample_shape: &[usize], num_classes: usize) -> Result<ModelSpec> {
        let image = || -> Result<[usize; 3]> {
            <[usize; 3]>::try_from(sample_shape)
                .map_err(|_| anyhow!("{:?} inputs need [channels, height, width] samples", self.arch))
        };
        let spec = match self.arch {
            Arch::Cnn => ModelSpec::student_cnn(image()?, num_classes),
            Arch::ResnetSmall => ModelSpec::teacher_cnn(image()?, num_classes, TeacherSize::Small),
            Arch::ResnetMedium => ModelSpec::teacher_cnn(image()?, num_classes, TeacherSize::Medium),
            Arch::ResnetLarge => ModelSpec::teacher_cnn(image()?, num_classes, TeacherSize::Large),
            Arch::Mlp => {
                let features = sample_shape.iter().product();
                let mut spec = ModelSpec::mlp(features, &self.hidden, num_classes);
                if sample_shape.len() > 1 {
                    spec.input_shape = sample_shape.to_vec();
                    spec.layers.insert(0, Layer::Flatten);
                }
                spec
            }
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherSection {
    /// Adversarially trained teacher (RSL source).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Naturally trained teacher (NSL source).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub natural_checkpoint: Option<PathBuf>,
    /// Teachers distilled from by `teacher-sweep`.
    pub checkpoints: Vec<PathBuf>,
    /// Architecture of teachers the tool trains itself.
    pub arch: Arch,
    /// Method used to train a missing robust teacher.
    pub method: Method,
    /// Epochs for teachers the tool trains itself; 0 means the run's schedule.
    pub epochs: usize,
    /// Learning rate for a natural teacher the tool trains itself. Without
    /// normalization layers the residual nets collapse to chance at 0.1.
    pub natural_lr: f64,
}

impl Default for TeacherSection {
    fn default() -> Self {
        Self {
            checkpoint: None,
            natural_checkpoint: None,
            checkpoints: Vec::new(),
            arch: Arch::ResnetLarge,
            method: Method::Trades,
            epochs: 0,
            natural_lr: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DefenseSection {
    pub method: Method,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inner_method: Option<Method>,
    pub lambda: f64,
    /// Defaults to 5/6 for RSLAD and 1 otherwise.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    pub tau: f64,
    pub beta: f64,
    pub rsl_source: RslSource,
    pub soft_label: SoftLabelKind,
    pub smoothing: f64,
}

impl Default for DefenseSection {
    fn default() -> Self {
        let d = DefenseConfig::new(Method::Rslad);
        Self {
            method: d.method,
            inner_method: None,
            lambda: d.lambda,
            alpha: None,
            tau: d.tau,
            beta: d.beta,
            rsl_source: d.rsl_source,
            soft_label: d.soft_label,
            smoothing: d.smoothing,
        }
    }
}

impl DefenseSection {
    pub fn to_config(&self) -> DefenseConfig {
        DefenseConfig {
            method: self.method,
            inner_method: self.inner_method,
            lambda: self.lambda,
            alpha: self.alpha.unwrap_or(DefenseConfig::default_alpha(self.method)),
            tau: self.tau,
            beta: self.beta,
            rsl_source: self.rsl_source,
            soft_label: self.soft_label,
            smoothing: self.smoothing,
        }
    }
}

/// Partial attack settings; unset fields come from the attack's preset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step_size: Option<f64>,
    /// `none`, `uniform` or `gaussian`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub random_start: Option<String>,
    /// Uniform half-width or Gaussian std of the random start.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub random_scale: Option<f64>,
}

impl AttackSection {
    fn from_config(c: &AttackConfig) -> Self {
        let (kind, scale) = match c.random_start {
            RandomStart::None => ("none", 0.0),
            RandomStart::Uniform { scale } => ("uniform", scale),
            RandomStart::Gaussian { std } => ("gaussian", std),
        };
        Self {
            epsilon: Some(c.epsilon),
            steps: Some(c.steps),
            step_size: Some(c.step_size),
            random_start: Some(kind.into()),
            random_scale: Some(scale),
        }
    }

    /// Overlays the set fields on `preset(epsilon)`.
    fn apply(&self, epsilon: f64, preset: fn(f64) -> AttackConfig, section: &str) -> Result<AttackConfig> {
        let eps = self.epsilon.unwrap_or(epsilon);
        let mut c = preset(eps);
        if let Some(s) = self.steps {
            c.steps = s;
        }
        if let Some(s) = self.step_size {
            c.step_size = s;
        }
        let scale = self.random_scale;
        if let Some(kind) = &self.random_start {
            c.random_start = match kind.as_str() {
                "none" => RandomStart::None,
                "uniform" => RandomStart::Uniform { scale: scale.unwrap_or(eps) },
                "gaussian" => RandomStart::Gaussian { std: scale.unwrap_or(0.001) },
                other => bail!("[{section}] random_start {other:?}: expected none, uniform or gaussian"),
            };
        } else if let Some(s) = scale {
            match &mut c.random_start {
                RandomStart::Uniform { scale } => *scale = s,
                RandomStart::Gaussian { std } => *std = s,
                RandomStart::None => {}
            }
        }
        c.validate().with_context(|| format!("[{section}]"))?;
        Ok(c)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalAttackSection {
    /// Shared radius; defaults to the training radius.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    pub fgsm: AttackSection,
    pub pgd_sat: AttackSection,
    pub pgd_trades: AttackSection,
    pub cw: AttackSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub epochs: usize,
    /// Defaults to the 215/260/285-of-300 points scaled to `epochs`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decays: Option<Vec<usize>>,
    pub factor: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            epochs: 60,
            decays: None,
            factor: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    /// Defaults to 0.1 on CIFAR-10 and 0.05 on the desk datasets.
    pub lr: Option<f64>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub grad_chunk: usize,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let o = OptimizerConfig::default();
        Self {
            lr: None,
            momentum: o.momentum,
            weight_decay: o.weight_decay,
            batch_size: o.batch_size,
            grad_chunk: 32,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetSection,
    pub student: ModelSection,
    pub teacher: TeacherSection,
    pub defense: DefenseSection,
    pub attack_train: AttackSection,
    pub attack_eval: EvalAttackSection,
    pub schedule: ScheduleSection,
    pub optimizer: OptimizerSection,
}

const ATTACK_KEYS: &[&str] = &["epsilon", "steps", "step_size", "random_start", "random_scale"];

fn known_keys(section: &str) -> Option<&'static [&'static str]> {
    Some(match section {
        "dataset" => &[
            "id",
            "path",
            "kind",
            "n_train",
            "n_test",
            "num_classes",
            "image_size",
            "margin",
            "noise",
            "mix",
            "pattern_seed",
            "validation_fraction",
            "augment",
        ],
        "student" => &["arch", "hidden"],
        "teacher" => &[
            "checkpoint",
            "natural_checkpoint",
            "checkpoints",
            "arch",
            "method",
            "epochs",
            "natural_lr",
        ],
        "defense" => &[
            "method",
            "inner_method",
            "lambda",
            "alpha",
            "tau",
            "beta",
            "rsl_source",
            "soft_label",
            "smoothing",
        ],
        "attack_train" | "attack_eval.fgsm" | "attack_eval.pgd_sat" | "attack_eval.pgd_trades" | "attack_eval.cw" => {
            ATTACK_KEYS
        }
        "attack_eval" => &["epsilon", "fgsm", "pgd_sat", "pgd_trades", "cw"],
        "schedule" => &["epochs", "decays", "factor"],
        "optimizer" => &["lr", "momentum", "weight_decay", "batch_size", "grad_chunk"],
        _ => return None,
    })
}

const TOP_LEVEL: &[&str] = &["seed", "output_dir"];

fn check_keys(table: &toml::Table, section: &str) -> Result<()> {
    let allowed = known_keys(section).expect("known section");
    for (key, value) in table {
        if !allowed.contains(&key.as_str()) {
            bail!(
                "unknown key `{key}` in section [{section}]; allowed keys: {}",
                allowed.join(", ")
            );
        }
        let nested = format!("{section}.{key}");
        if let (Some(t), Some(_)) = (value.as_table(), known_keys(&nested)) {
            check_keys(t, &nested)?;
        }
    }
    Ok(())
}

impl RunConfig {
    /// Parses TOML text, rejecting unknown keys and out-of-range values.
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().context("invalid TOML")?;
        for (key, value) in &table {
            match (known_keys(key), value.as_table()) {
                (Some(_), Some(t)) => check_keys(t, key)?,
                (Some(_), None) => bail!("`{key}` must be a section ([{key}])"),
                (None, _) if TOP_LEVEL.contains(&key.as_str()) => {}
                (None, _) => {
                    let mut sections: Vec<&str> = vec![
                        "dataset",
                        "student",
                        "teacher",
                        "defense",
                        "attack_train",
                        "attack_eval",
                        "schedule",
                        "optimizer",
                    ];
                    sections.extend(TOP_LEVEL);
                    bail!("unknown top-level key `{key}`; allowed: {}", sections.join(", "))
                }
            }
        }
        let cfg: RunConfig = toml::from_str(text).context("invalid configuration value")?;
        let cfg = cfg.resolve()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in config {}", path.display()))
    }

    /// TOML text of the configuration.
    pub fn emit(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// 64-bit FNV-1a over the canonical JSON form.
    pub fn digest(&self) -> u64 {
        fnv1a64(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    fn lr(&self) -> f64 {
        self.optimizer.lr.unwrap_or(match self.dataset.id {
            DatasetId::Cifar10 => OptimizerConfig::default().lr,
            _ => DESK_LR,
        })
    }

    fn default_epsilon(&self) -> f64 {
        match self.dataset.id {
            DatasetId::Cifar10 => CIFAR_EPSILON,
            _ => DESK_EPSILON,
        }
    }

    /// Fills every default that depends on other fields.
    pub fn resolve(mut self) -> Result<Self> {
        if self.defense.alpha.is_none() {
            self.defense.alpha = Some(DefenseConfig::default_alpha(self.defense.method));
        }
        self.optimizer.lr = Some(self.lr());
        if self.schedule.decays.is_none() {
            self.schedule.decays = Some(Schedule::scaled(self.schedule.epochs.max(1)).decay_epochs);
        }
        let train = self.attack_train.apply(self.default_epsilon(), AttackConfig::train_pgd10, "attack_train")?;
        self.attack_train = AttackSection::from_config(&train);
        let eps = self.attack_eval.epsilon.unwrap_or(train.epsilon);
        self.attack_eval.epsilon = Some(eps);
        let suite = self.suite()?;
        self.attack_eval.fgsm = AttackSection::from_config(&suite.fgsm);
        self.attack_eval.pgd_sat = AttackSection::from_config(&suite.pgd_sat);
        self.attack_eval.pgd_trades = AttackSection::from_config(&suite.pgd_trades);
        self.attack_eval.cw = AttackSection::from_config(&suite.cw);
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        if d.id != DatasetId::Synthetic && d.path.is_none() {
            bail!("[dataset] id = {:?} needs a path", d.id);
        }
        if !(0.0..1.0).contains(&d.validation_fraction) || d.validation_fraction == 0.0 {
            bail!("[dataset] validation_fraction {} not in (0, 1)", d.validation_fraction);
        }
        if d.id == DatasetId::Synthetic {
            self.dataset
                .synthetic(d.n_train, 0)
                .validate()
                .context("[dataset]")?;
            if d.n_test == 0 {
                bail!("[dataset] n_test must be >= 1");
            }
        }
        self.defense.to_config().validate().context("[defense]")?;
        self.schedule().context("[schedule]")?;
        let o = &self.optimizer;
        if o.batch_size == 0 || o.grad_chunk == 0 {
            bail!("[optimizer] batch_size and grad_chunk must be >= 1");
        }
        if let Some(lr) = o.lr.filter(|lr| !(*lr > 0.0)) {
            bail!("[optimizer] lr {lr} must be > 0");
        }
        if !(self.teacher.natural_lr > 0.0) {
            bail!("[teacher] natural_lr {} must be > 0", self.teacher.natural_lr);
        }
        if !(0.0..1.0).contains(&o.momentum) {
            bail!("[optimizer] momentum {} not in [0, 1)", o.momentum);
        }
        if o.weight_decay < 0.0 {
            bail!("[optimizer] weight_decay {} must be >= 0", o.weight_decay);
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<Schedule> {
        let s = Schedule {
            initial_lr: self.lr(),
            total_epochs: self.schedule.epochs,
            decay_epochs: self
                .schedule
                .decays
                .clone()
                .unwrap_or_else(|| Schedule::scaled(self.schedule.epochs.max(1)).decay_epochs),
            decay_factor: self.schedule.factor,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn train_attack(&self) -> Result<AttackConfig> {
        self.attack_train.apply(self.default_epsilon(), AttackConfig::train_pgd10, "attack_train")
    }

    pub fn suite(&self) -> Result<SuiteConfig> {
        let eps = match self.attack_eval.epsilon {
            Some(e) => e,
            None => self.train_attack()?.epsilon,
        };
        let e = &self.attack_eval;
        Ok(SuiteConfig {
            fgsm: e.fgsm.apply(eps, AttackConfig::fgsm, "attack_eval.fgsm")?,
            pgd_sat: e.pgd_sat.apply(eps, AttackConfig::pgd_sat, "attack_eval.pgd_sat")?,
            pgd_trades: e.pgd_trades.apply(eps, AttackConfig::pgd_trades, "attack_eval.pgd_trades")?,
            cw: e.cw.apply(eps, AttackConfig::cw, "attack_eval.cw")?.with_loss(InnerLoss::CwMargin),
        })
    }

    /// Training settings of the core library for this configuration.
    pub fn train_run(&self, deterministic: bool) -> Result<TrainRunConfig> {
        let suite = self.suite()?;
        let cfg = TrainRunConfig {
            defense: self.defense.to_config(),
            attack: self.train_attack()?,
            selection_attack: suite.pgd_trades,
            schedule: self.schedule()?,
            optimizer: OptimizerConfig {
                lr: self.lr(),
                momentum: self.optimizer.momentum,
                weight_decay: self.optimizer.weight_decay,
                batch_size: self.optimizer.batch_size,
            },
            augment: self.dataset.augment_config(),
            seed: self.seed,
            grad_chunk: self.optimizer.grad_chunk,
            deterministic,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
