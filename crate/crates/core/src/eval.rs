//! Clean and adversarial accuracy, the white-box suite, transfer attacks
//! and report serialization.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{self, AttackConfig, Reference};
use crate::data::{sequential_batches, Dataset};
use crate::error::{Error, Result};
use crate::nn::ParameterSet;
use crate::train::derive_seed;

/// Evaluation batch size.
pub const EVAL_BATCH: usize = 256;

/// Shown in place of the AutoAttack column, which is not implemented.
pub const AUTOATTACK_NOTE: &str = "n/a (out of scope)";

fn nonempty(data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Parameter("cannot evaluate on an empty dataset".into()));
    }
    Ok(())
}

/// Fraction of examples whose argmax logit (lowest index on ties) is the label.
pub fn accuracy(params: &ParameterSet<f32>, data: &Dataset) -> Result<f64> {
    nonempty(data)?;
    let batches = sequential_batches(data.len(), EVAL_BATCH);
    let correct: Vec<usize> = batches
        .par_iter()
        .map(|idx| {
            let (x, y) = data.batch(idx);
            let pred = params.predict(&x)?;
            Ok(pred.iter().zip(&y).filter(|(p, t)| p == t).count())
        })
        .collect::<Result<_>>()?;
    Ok(correct.iter().sum::<usize>() as f64 / data.len() as f64)
}

/// The adversarial version of every example in `data`, crafted against
/// `params`. Batch `b` uses seed `derive_seed(seed, [b])`.
pub fn adversarial_examples(
    params: &ParameterSet<f32>,
    data: &Dataset,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<Dataset> {
    let batches = sequential_batches(data.len(), EVAL_BATCH);
    let mut parts = Vec::with_capacity(batches.len());
    for (b, idx) in batches.iter().enumerate() {
        let (x, y) = data.batch(idx);
        let adv = if cfg.epsilon == 0.0 && matches!(cfg.random_start, attacks::RandomStart::None) {
            x
        } else {
            attacks::pgd(params, &x, Reference::Labels(&y), cfg, derive_seed(seed, &[b as u64]))?
        };
        parts.push(Dataset::new(adv, y, data.num_classes(), data.split())?);
    }
    if parts.is_empty() {
        return Ok(data.clone());
    }
    Dataset::concat(&parts)
}

/// Accuracy on examples crafted by `cfg` (whose inner loss must take labels).
pub fn robust_accuracy(params: &ParameterSet<f32>, data: &Dataset, cfg: &AttackConfig, seed: u64) -> Result<f64> {
    nonempty(data)?;
    if cfg.epsilon == 0.0 {
        // The ball is a point, so every attack returns the input.
        return accuracy(params, data);
    }
    accuracy(params, &adversarial_examples(params, data, cfg, seed)?)
}

/// Accuracy of `target` on examples crafted against `surrogate`.
pub fn transfer_attack_eval(
    target: &ParameterSet<f32>,
    surrogate: &ParameterSet<f32>,
    data: &Dataset,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<f64> {
    nonempty(data)?;
    let (t, s) = (target.spec(), surrogate.spec());
    if t.num_classes != s.num_classes || t.input_shape != s.input_shape {
        return Err(Error::Config(format!(
            "surrogate ({:?}, {} classes) does not match target ({:?}, {} classes)",
            s.input_shape, s.num_classes, t.input_shape, t.num_classes
        )));
    }
    accuracy(target, &adversarial_examples(surrogate, data, cfg, seed)?)
}

/// The four white-box attacks of the evaluation suite.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AttackKind {
    #[serde(rename = "FGSM")]
    Fgsm,
    #[serde(rename = "PGD_SAT")]
    PgdSat,
    #[serde(rename = "PGD_TRADES")]
    PgdTrades,
    #[serde(rename = "CW")]
    Cw,
}

impl AttackKind {
    pub const ALL: [AttackKind; 4] = [AttackKind::Fgsm, AttackKind::PgdSat, AttackKind::PgdTrades, AttackKind::Cw];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Fgsm => "FGSM",
            AttackKind::PgdSat => "PGD_SAT",
            AttackKind::PgdTrades => "PGD_TRADES",
            AttackKind::Cw => "CW",
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Attack configurations of the white-box suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    pub fgsm: AttackConfig,
    pub pgd_sat: AttackConfig,
    pub pgd_trades: AttackConfig,
    pub cw: AttackConfig,
}

impl SuiteConfig {
    pub fn new(epsilon: f64) -> Self {
        Self {
            fgsm: AttackConfig::fgsm(epsilon),
            pgd_sat: AttackConfig::pgd_sat(epsilon),
            pgd_trades: AttackConfig::pgd_trades(epsilon),
            cw: AttackConfig::cw(epsilon),
        }
    }

    pub fn get(&self, kind: AttackKind) -> &AttackConfig {
        match kind {
            AttackKind::Fgsm => &self.fgsm,
            AttackKind::PgdSat => &self.pgd_sat,
            AttackKind::PgdTrades => &self.pgd_trades,
            AttackKind::Cw => &self.cw,
        }
    }
}

/// Published reference point, recorded for context and never asserted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferencePoint {
    pub setting: String,
    pub clean: f64,
    pub autoattack: f64,
    pub reproducible_here: bool,
}

impl ReferencePoint {
    pub fn cifar10_resnet18() -> Self {
        Self {
            setting: "RSLAD ResNet-18 student on CIFAR-10, best checkpoint".into(),
            clean: 0.8338,
            autoattack: 0.5149,
            reproducible_here: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferRow {
    pub surrogate: String,
    pub attack: String,
    pub accuracy: f64,
}

/// Accuracies of one checkpoint under the white-box suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub checkpoint: String,
    pub clean: f64,
    /// Keyed by attack name: FGSM, PGD_SAT, PGD_TRADES, CW.
    pub rows: BTreeMap<String, f64>,
    #[serde(rename = "AA")]
    pub autoattack: String,
    pub attacks: SuiteConfig,
    pub transfer: Vec<TransferRow>,
    pub config_digests: BTreeMap<String, String>,
    pub seed: u64,
    pub reference: ReferencePoint,
}

impl EvalReport {
    /// Robust accuracy under PGD_TRADES, the selection metric.
    pub fn robust(&self) -> f64 {
        self.rows[AttackKind::PgdTrades.name()]
    }

    pub fn row_value(&self, key: &str) -> Option<f64> {
        if key == "clean" {
            Some(self.clean)
        } else {
            self.rows.get(key).copied()
        }
    }
}

/// Clean accuracy plus every attack of `suite`. Attack `k` uses seed
/// `derive_seed(seed, [k])`.
pub fn white_box_suite(
    params: &ParameterSet<f32>,
    data: &Dataset,
    suite: &SuiteConfig,
    model: &str,
    checkpoint: &str,
    seed: u64,
) -> Result<EvalReport> {
    let before = params.digest();
    let clean = accuracy(params, data)?;
    let mut rows = BTreeMap::new();
    for (k, kind) in AttackKind::ALL.into_iter().enumerate() {
        let acc = robust_accuracy(params, data, suite.get(kind), derive_seed(seed, &[k as u64]))?;
        rows.insert(kind.name().to_string(), acc);
    }
    if params.digest() != before {
        return Err(Error::Contract("evaluation modified model parameters".into()));
    }
    let mut config_digests = BTreeMap::new();
    config_digests.insert("model_spec".into(), format!("{:016x}", params.spec().digest()));
    config_digests.insert("parameters".into(), format!("{:016x}", params.digest()));
    let suite_json = serde_json::to_string(suite).expect("suite serializes");
    config_digests.insert(
        "attacks".into(),
        format!("{:016x}", crate::digest::fnv1a64(suite_json.as_bytes())),
    );
    Ok(EvalReport {
        model: model.into(),
        checkpoint: checkpoint.into(),
        clean,
        rows,
        autoattack: AUTOATTACK_NOTE.into(),
        attacks: suite.clone(),
        transfer: Vec::new(),
        config_digests,
        seed,
        reference: ReferencePoint::cifar10_resnet18(),
    })
}

/// Flat table: one line per report, accuracies then digests.
pub fn write_reports_csv(reports: &[EvalReport], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["model".to_string(), "checkpoint".into(), "clean".into()];
    header.extend(AttackKind::ALL.iter().map(|k| k.name().to_string()));
    header.extend(["AA".into(), "transfer".into(), "seed".into(), "model_spec".into(), "parameters".into(), "attacks".into()]);
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for r in reports {
        let mut rec = vec![r.model.clone(), r.checkpoint.clone(), format!("{:.6}", r.clean)];
        rec.extend(AttackKind::ALL.iter().map(|k| format!("{:.6}", r.rows[k.name()])));
        let transfer: Vec<String> = r
            .transfer
            .iter()
            .map(|t| format!("{}:{}={:.6}", t.surrogate, t.attack, t.accuracy))
            .collect();
        rec.push(r.autoattack.clone());
        rec.push(transfer.join(";"));
        rec.push(r.seed.to_string());
        for key in ["model_spec", "parameters", "attacks"] {
            rec.push(r.config_digests.get(key).cloned().unwrap_or_default());
        }
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    }
}
