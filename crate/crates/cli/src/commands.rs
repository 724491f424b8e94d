//! One function per CLI verb. Each writes its artifacts under `out` and
//! returns an error instead of exiting.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use robustdistill::attacks::AttackConfig;
use robustdistill::data::{
    gen_synthetic, load_cifar_binary, load_idx, write_idx, Dataset, IdxEncoding, Split,
};
use robustdistill::distill::{Method, SoftLabelKind};
use robustdistill::eval::{self, AttackKind, EvalReport, TransferRow};
use robustdistill::nn::{build_model, Checkpoint, ParameterSet, Role};
use robustdistill::train::{derive_seed, run_training, EpochRecord, TrainOutcome};
use serde::Serialize;

use crate::config::{Arch, DatasetId, RunConfig};

/// Options shared by every command.
#[derive(Clone, Debug)]
pub struct Options {
    pub out: PathBuf,
    /// Write zero wall times to `metrics.jsonl` (timings go to `timing.jsonl`).
    pub deterministic: bool,
    /// Print per-epoch progress to stderr.
    pub verbose: bool,
}

pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

const TAG_TRAIN_SET: u64 = 0x7a1a;
const TAG_TEST_SET: u64 = 0x7e57;
const TAG_STUDENT_INIT: u64 = 0x1417;
const TAG_TEACHER_INIT: u64 = 0x7eac;
const TAG_VAL_SPLIT: u64 = 0x5a11;

/// Loads or generates the train/validation/test splits of `cfg`.
pub fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    let d = &cfg.dataset;
    let (train, test) = match d.id {
        DatasetId::Synthetic => {
            // Train and test share class patterns but not samples.
            let train = gen_synthetic(&d.synthetic(d.n_train, derive_seed(d.pattern_seed, &[TAG_TRAIN_SET])))?;
            let test = gen_synthetic(&d.synthetic(d.n_test, derive_seed(d.pattern_seed, &[TAG_TEST_SET])))?;
            (train, test.with_split(Split::Test))
        }
        DatasetId::Mnist => {
            let dir = d.path.as_ref().expect("validated");
            let train = load_idx(dir.join("train-images-idx3-ubyte"), dir.join("train-labels-idx1-ubyte"))?;
            let test = load_idx(dir.join("t10k-images-idx3-ubyte"), dir.join("t10k-labels-idx1-ubyte"))?;
            (train.take(d.n_train), test.take(d.n_test).with_split(Split::Test))
        }
        DatasetId::Cifar10 => {
            let dir = d.path.as_ref().expect("validated");
            let batches: Vec<PathBuf> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
            let train = load_cifar_binary(&batches)?;
            let test = load_cifar_binary(&[dir.join("test_batch.bin")])?;
            (train.take(d.n_train), test.take(d.n_test).with_split(Split::Test))
        }
    };
    let (train, val) = train.split_validation(d.validation_fraction, derive_seed(cfg.seed, &[TAG_VAL_SPLIT]))?;
    ensure!(!train.is_empty() && !val.is_empty(), "dataset too small for a validation split");
    Ok(Splits { train, val, test })
}

pub fn load_teacher(path: &Path) -> Result<ParameterSet<f32>> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading teacher {}", path.display()))?;
    Ok(ckpt.params.with_role(Role::Teacher))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn prepare_out(cfg: &RunConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let resolved = out.join("config.resolved");
    fs::write(&resolved, cfg.emit()).with_context(|| format!("writing {}", resolved.display()))
}

/// Everything one training run produced.
pub struct RunResult {
    pub outcome: TrainOutcome,
    pub best: EvalReport,
    pub last: EvalReport,
}

#[derive(Serialize)]
struct TrainReport<'a> {
    command: &'a str,
    method: String,
    inner_method: String,
    seed: u64,
    config_digest: String,
    teacher: Option<String>,
    schedule_convention: &'static str,
    selection: &'static str,
    reports: [&'a EvalReport; 2],
}

const SCHEDULE_NOTE: &str = "epochs are 1-indexed; a decay at epoch N applies from epoch N on";
const SELECTION_NOTE: &str = "best checkpoint chosen on a held-out validation split (10% of train by default), \
     by PGD_TRADES robust accuracy (clean accuracy for NAT)";

/// Trains one model per `cfg` into `out`: checkpoints, metrics, reports.
pub fn train_into(
    cfg: &RunConfig,
    splits: &Splits,
    teacher: Option<(&ParameterSet<f32>, &Path)>,
    out: &Path,
    opts: &Options,
    label: &str,
) -> Result<RunResult> {
    let run = cfg.train_run(opts.deterministic)?;
    if run.defense.needs_teacher() && teacher.is_none() {
        bail!(
            "{} needs a teacher: set [teacher] checkpoint or pass --checkpoint",
            run.defense.method
        );
    }
    prepare_out(cfg, out)?;
    let spec = cfg.student.spec(splits.train.sample_shape(), splits.train.num_classes())?;
    let init = build_model(&spec, derive_seed(cfg.seed, &[TAG_STUDENT_INIT]))?;

    let metrics_path = out.join("metrics.jsonl");
    let mut metrics = BufWriter::new(File::create(&metrics_path).with_context(|| format!("creating {}", metrics_path.display()))?);
    let mut timing = if opts.deterministic {
        Some(BufWriter::new(File::create(out.join("timing.jsonl"))?))
    } else {
        None
    };
    let outcome = run_training(&run, init, teacher.map(|t| t.0), &splits.train, &splits.val, |r| {
        let line = serde_json::to_string(r.record).expect("record serializes");
        // Flushed per epoch so progress can be followed while training runs.
        writeln!(metrics, "{line}")
            .and_then(|()| metrics.flush())
            .map_err(|source| robustdistill::Error::Io {
                path: metrics_path.clone(),
                source,
            })?;
        if let Some(t) = timing.as_mut() {
            writeln!(t, "{{\"epoch\":{},\"wall_ms\":{}}}", r.record.epoch, r.wall_ms)
                .map_err(|source| robustdistill::Error::Io {
                    path: out.join("timing.jsonl"),
                    source,
                })?;
        }
        if opts.verbose {
            let EpochRecord { epoch, lr, train_loss, train_acc, val_clean_acc, val_robust_acc, .. } = r.record;
            eprintln!(
                "[{label}] epoch {epoch:>3} lr {lr:.4} loss {train_loss:.4} train {train_acc:.3} \
                 val clean {val_clean_acc:.3} robust {val_robust_acc:.3}{} ({} ms)",
                if r.is_best { " *" } else { "" },
                r.wall_ms
            );
        }
        Ok(())
    })?;
    metrics.flush()?;
    if let Some(mut t) = timing {
        t.flush()?;
    }
    outcome.best.save(out.join("best.ckpt"))?;
    outcome.last.save(out.join("last.ckpt"))?;

    let suite = cfg.suite()?;
    let mut reports = Vec::new();
    for ckpt in [&outcome.best, &outcome.last] {
        let mut r = eval::white_box_suite(
            &ckpt.params,
            &splits.test,
            &suite,
            label,
            ckpt.selection.as_str(),
            cfg.seed,
        )?;
        r.config_digests.insert("run_config".into(), format!("{:016x}", cfg.digest()));
        if let Some((t, path)) = teacher {
            r.config_digests.insert("teacher".into(), format!("{:016x}", t.digest()));
            r.config_digests.insert("teacher_checkpoint".into(), path.display().to_string());
        }
        reports.push(r);
    }
    let last = reports.pop().expect("two reports");
    let best = reports.pop().expect("two reports");
    let report = TrainReport {
        command: "train",
        method: run.defense.method.to_string(),
        inner_method: run.defense.inner().to_string(),
        seed: cfg.seed,
        config_digest: format!("{:016x}", cfg.digest()),
        teacher: teacher.map(|(_, p)| p.display().to_string()),
        schedule_convention: SCHEDULE_NOTE,
        selection: SELECTION_NOTE,
        reports: [&best, &last],
    };
    write_json(&out.join("report.json"), &report)?;
    eval::write_reports_csv(&[best.clone(), last.clone()], &out.join("report.csv"))?;
    Ok(RunResult { outcome, best, last })
}

fn teacher_path(cfg: &RunConfig, checkpoint: Option<&Path>) -> Option<PathBuf> {
    checkpoint.map(Path::to_path_buf).or_else(|| cfg.teacher.checkpoint.clone())
}

/// `train`: one run of the configured method.
pub fn cmd_train(cfg: &RunConfig, checkpoint: Option<&Path>, opts: &Options) -> Result<()> {
    let defense = cfg.defense.to_config();
    let teacher_file = teacher_path(cfg, checkpoint);
    let teacher = match (&teacher_file, defense.needs_teacher()) {
        (Some(p), true) => Some(load_teacher(p)?),
        (None, true) => bail!(
            "{} needs a teacher: set [teacher] checkpoint or pass --checkpoint",
            defense.method
        ),
        _ => None,
    };
    let splits = load_splits(cfg)?;
    let label = defense.method.to_string();
    let t = teacher.as_ref().zip(teacher_file.as_deref());
    train_into(cfg, &splits, t, &opts.out, opts, &label)?;
    Ok(())
}

/// `eval`: the white-box suite on the test split, plus transfer rows when
/// a surrogate is given.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, surrogate: Option<&Path>, opts: &Options) -> Result<()> {
    prepare_out(cfg, &opts.out)?;
    let ckpt = Checkpoint::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let splits = load_splits(cfg)?;
    let suite = cfg.suite()?;
    let name = checkpoint.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned());
    let mut report = eval::white_box_suite(
        &ckpt.params,
        &splits.test,
        &suite,
        &name,
        ckpt.selection.as_str(),
        cfg.seed,
    )?;
    report.config_digests.insert("run_config".into(), format!("{:016x}", cfg.digest()));
    if let Some(sp) = surrogate {
        let s = Checkpoint::load(sp).with_context(|| format!("loading surrogate {}", sp.display()))?;
        for (k, kind) in [AttackKind::PgdSat, AttackKind::Cw].into_iter().enumerate() {
            let acc = eval::transfer_attack_eval(
                &ckpt.params,
                &s.params,
                &splits.test,
                suite.get(kind),
                derive_seed(cfg.seed, &[0x7a, k as u64]),
            )?;
            report.transfer.push(TransferRow {
                surrogate: sp.display().to_string(),
                attack: kind.name().into(),
                accuracy: acc,
            });
        }
    }
    write_json(&opts.out.join("report.json"), &report)?;
    eval::write_reports_csv(std::slice::from_ref(&report), &opts.out.join("report.csv"))?;
    Ok(())
}

/// `attack`: writes the adversarial test set as a float32 idx pair.
pub fn cmd_attack(cfg: &RunConfig, checkpoint: &Path, kind: AttackKind, opts: &Options) -> Result<()> {
    prepare_out(cfg, &opts.out)?;
    let ckpt = Checkpoint::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let splits = load_splits(cfg)?;
    let attack: AttackConfig = *cfg.suite()?.get(kind);
    let adv = eval::adversarial_examples(&ckpt.params, &splits.test, &attack, cfg.seed)?;
    let images = opts.out.join("adversarial-images.idx");
    let labels = opts.out.join("adversarial-labels.idx");
    write_idx(&adv, &images, &labels, IdxEncoding::F32)?;
    #[derive(Serialize)]
    struct AttackReport {
        attack: String,
        config: AttackConfig,
        examples: usize,
        clean_accuracy: f64,
        adversarial_accuracy: f64,
        images: String,
        labels: String,
        seed: u64,
    }
    write_json(
        &opts.out.join("report.json"),
        &AttackReport {
            attack: kind.name().into(),
            config: attack,
            examples: adv.len(),
            clean_accuracy: eval::accuracy(&ckpt.params, &splits.test)?,
            adversarial_accuracy: eval::accuracy(&ckpt.params, &adv)?,
            images: images.display().to_string(),
            labels: labels.display().to_string(),
            seed: cfg.seed,
        },
    )
}

/// A named row of a multi-run comparison.
#[derive(Clone, Debug, Serialize)]
pub struct ComparisonRow {
    pub name: String,
    pub method: String,
    pub inner_method: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub teacher: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub teacher_parameters: Option<usize>,
    pub config_digest: String,
    pub best: EvalReport,
    pub last: EvalReport,
}

#[derive(Serialize)]
struct ComparisonReport<'a> {
    command: &'a str,
    seed: u64,
    notes: Vec<String>,
    rows: &'a [ComparisonRow],
}

fn write_comparison(out: &Path, command: &str, seed: u64, rows: &[ComparisonRow], notes: Vec<String>) -> Result<()> {
    write_json(
        &out.join("report.json"),
        &ComparisonReport {
            command,
            seed,
            notes,
            rows,
        },
    )?;
    let mut flat = Vec::new();
    for r in rows {
        for rep in [&r.best, &r.last] {
            let mut rep = rep.clone();
            rep.model = r.name.clone();
            flat.push(rep);
        }
    }
    eval::write_reports_csv(&flat, &out.join("report.csv"))?;
    Ok(())
}

fn row(name: &str, cfg: &RunConfig, teacher: Option<(&ParameterSet<f32>, &Path)>, r: RunResult) -> ComparisonRow {
    ComparisonRow {
        name: name.into(),
        method: cfg.defense.method.to_string(),
        inner_method: cfg.defense.to_config().inner().to_string(),
        teacher: teacher.map(|(_, p)| p.display().to_string()),
        teacher_parameters: teacher.map(|(t, _)| t.num_parameters()),
        config_digest: format!("{:016x}", cfg.digest()),
        best: r.best,
        last: r.last,
    }
}

/// The four outer/inner pairings of ARD and RSLAD, in report order.
pub const ABLATION_ROWS: [(&str, Method, Method); 4] = [
    ("ARD", Method::Ard, Method::Ard),
    ("ARD_min+RSLAD_max", Method::Ard, Method::Rslad),
    ("RSLAD_min+ARD_max", Method::Rslad, Method::Ard),
    ("RSLAD", Method::Rslad, Method::Rslad),
];

/// `ablate`: ARD and RSLAD outer losses crossed with their inner
/// maximizations, all with the same seed and teacher.
pub fn cmd_ablate(cfg: &RunConfig, checkpoint: Option<&Path>, opts: &Options) -> Result<Vec<ComparisonRow>> {
    let path = teacher_path(cfg, checkpoint)
        .context("ablate needs a teacher: set [teacher] checkpoint or pass --checkpoint")?;
    let teacher = load_teacher(&path)?;
    prepare_out(cfg, &opts.out)?;
    let splits = load_splits(cfg)?;
    let mut rows = Vec::new();
    for (name, outer, inner) in ABLATION_ROWS {
        let mut c = cfg.clone();
        c.defense.method = outer;
        c.defense.inner_method = (inner != outer).then_some(inner);
        c.defense.alpha = Some(robustdistill::distill::DefenseConfig::default_alpha(outer));
        c.defense.soft_label = SoftLabelKind::Rsl;
        let t = Some((&teacher, path.as_path()));
        let r = train_into(&c, &splits, t, &opts.out.join(name), opts, name)?;
        rows.push(row(name, &c, t, r));
    }
    write_comparison(
        &opts.out,
        "ablate",
        cfg.seed,
        &rows,
        vec!["rows share seed and teacher; X_min+Y_max pairs X's outer loss with Y's inner maximization".into()],
    )?;
    Ok(rows)
}

fn teacher_arch_spec(cfg: &RunConfig, splits: &Splits, arch: Arch) -> Result<robustdistill::nn::ModelSpec> {
    let section = crate::config::ModelSection {
        arch,
        hidden: cfg.student.hidden.clone(),
    };
    section.spec(splits.train.sample_shape(), splits.train.num_classes())
}

/// Trains a teacher with `method` on the configured data and saves its best
/// checkpoint at `path`.
pub fn train_teacher(cfg: &RunConfig, splits: &Splits, method: Method, path: &Path, opts: &Options) -> Result<ParameterSet<f32>> {
    let mut c = cfg.clone();
    c.defense = crate::config::DefenseSection {
        method,
        ..Default::default()
    };
    c.defense.alpha = None;
    c.defense.soft_label = SoftLabelKind::Rsl;
    if method == Method::Nat {
        c.optimizer.lr = Some(cfg.teacher.natural_lr);
    }
    if cfg.teacher.epochs > 0 {
        c.schedule.epochs = cfg.teacher.epochs;
        c.schedule.decays = None;
    }
    let c = c.resolve()?;
    let run = c.train_run(opts.deterministic)?;
    let spec = teacher_arch_spec(&c, splits, cfg.teacher.arch)?;
    let init = build_model(&spec, derive_seed(cfg.seed, &[TAG_TEACHER_INIT, method as u64]))?;
    let label = format!("teacher {method}");
    let outcome = run_training(&run, init, None, &splits.train, &splits.val, |r| {
        if opts.verbose {
            eprintln!(
                "[{label}] epoch {:>3} val clean {:.3} robust {:.3}",
                r.record.epoch, r.record.val_clean_acc, r.record.val_robust_acc
            );
        }
        Ok(())
    })?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    outcome.best.save(path)?;
    Ok(outcome.best.params.with_role(Role::Teacher))
}

/// `compare-soft-labels`: RSLAD with smoothed labels, a natural teacher's
/// predictions and a robust teacher's predictions. Missing teachers are
/// trained first and stored under `teachers/`.
pub fn cmd_compare_soft_labels(cfg: &RunConfig, opts: &Options) -> Result<Vec<ComparisonRow>> {
    prepare_out(cfg, &opts.out)?;
    let splits = load_splits(cfg)?;
    let obtain = |given: Option<&PathBuf>, method: Method, file: &str| -> Result<(ParameterSet<f32>, PathBuf)> {
        match given {
            Some(p) => Ok((load_teacher(p)?, p.clone())),
            None => {
                let p = opts.out.join("teachers").join(file);
                if p.exists() {
                    Ok((load_teacher(&p)?, p))
                } else {
                    Ok((train_teacher(cfg, &splits, method, &p, opts)?, p))
                }
            }
        }
    };
    let (robust, robust_path) = obtain(cfg.teacher.checkpoint.as_ref(), cfg.teacher.method, "robust.ckpt")?;
    let (natural, natural_path) = obtain(cfg.teacher.natural_checkpoint.as_ref(), Method::Nat, "natural.ckpt")?;
    let mut rows = Vec::new();
    for kind in [SoftLabelKind::Ssl, SoftLabelKind::Nsl, SoftLabelKind::Rsl] {
        let mut c = cfg.clone();
        c.defense.method = Method::Rslad;
        c.defense.inner_method = None;
        // NSL and RSL differ only in which teacher supplies the targets, so
        // their resolved configs differ only in the checkpoint reference.
        c.defense.soft_label = match kind {
            SoftLabelKind::Ssl => SoftLabelKind::Ssl,
            _ => SoftLabelKind::Rsl,
        };
        c.teacher.checkpoint = match kind {
            SoftLabelKind::Ssl => None,
            SoftLabelKind::Nsl => Some(natural_path.clone()),
            SoftLabelKind::Rsl => Some(robust_path.clone()),
        };
        c.teacher.natural_checkpoint = None;
        let teacher = match kind {
            SoftLabelKind::Ssl => None,
            SoftLabelKind::Nsl => Some((&natural, natural_path.as_path())),
            SoftLabelKind::Rsl => Some((&robust, robust_path.as_path())),
        };
        let name = kind.to_string();
        let r = train_into(&c, &splits, teacher, &opts.out.join(&name), opts, &name)?;
        rows.push(row(&name, &c, teacher, r));
    }
    write_comparison(
        &opts.out,
        "compare-soft-labels",
        cfg.seed,
        &rows,
        vec![
            "all rows train RSLAD with the same seed; only the target distribution differs".into(),
            format!("natural teacher: {}", natural_path.display()),
            format!("robust teacher: {}", robust_path.display()),
        ],
    )?;
    Ok(rows)
}

/// `teacher-sweep`: one RSLAD student per teacher, ordered by teacher size.
pub fn cmd_teacher_sweep(cfg: &RunConfig, opts: &Options) -> Result<Vec<ComparisonRow>> {
    ensure!(
        cfg.teacher.checkpoints.len() >= 2,
        "teacher-sweep needs at least two [teacher] checkpoints"
    );
    prepare_out(cfg, &opts.out)?;
    let splits = load_splits(cfg)?;
    let mut teachers = cfg
        .teacher
        .checkpoints
        .iter()
        .map(|p| Ok((load_teacher(p)?, p.clone())))
        .collect::<Result<Vec<_>>>()?;
    teachers.sort_by_key(|(t, _)| t.num_parameters());
    let mut rows = Vec::new();
    for (i, (teacher, path)) in teachers.iter().enumerate() {
        let mut c = cfg.clone();
        c.defense.method = Method::Rslad;
        c.teacher.checkpoint = Some(path.clone());
        let name = format!("teacher{}-{}params", i + 1, teacher.num_parameters());
        let t = Some((teacher, path.as_path()));
        let r = train_into(&c, &splits, t, &opts.out.join(&name), opts, &name)?;
        rows.push(row(&name, &c, t, r));
    }
    let mut notes = vec!["rows ordered by teacher parameter count".to_string()];
    for (teacher, path) in &teachers {
        let acc = eval::robust_accuracy(teacher, &splits.test, &cfg.suite()?.pgd_trades, cfg.seed)?;
        notes.push(format!(
            "teacher {} ({} parameters): PGD_TRADES test accuracy {acc:.4}",
            path.display(),
            teacher.num_parameters()
        ));
    }
    write_comparison(&opts.out, "teacher-sweep", cfg.seed, &rows, notes)?;
    Ok(rows)
}
