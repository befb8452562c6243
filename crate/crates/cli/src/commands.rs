//! Subcommand implementations. Each returns the text it would print.

use std::path::{Path, PathBuf};

use civt_core::checkpoint;
use civt_core::distill::kl_similarity;
use civt_core::models::param_summary;
use civt_core::suite::{self, SuiteEntry};
use civt_core::{ChannelStats, Error, Family, Mode, Model, ModelSpec, Result};
use serde::Serialize;

use crate::config::RunConfig;
use crate::train::{self, load_data, load_model, logits_for, save_model, Data, EvalReport, Outcome};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const RUN_FILE: &str = "run.toml";

#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    teachers: Vec<String>,
    param_count: usize,
    stats: &'a ChannelStats,
    config: &'a RunConfig,
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.out.clone().ok_or_else(|| Error::Config("no output directory: pass --out or set out".into()))?;
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_run(dir: &Path, command: &str, cfg: &RunConfig, data: &Data, teachers: &[PathBuf], outcome: &Outcome, distill: bool) -> Result<()> {
    save_model(&outcome.model, &dir.join(CHECKPOINT_FILE))?;
    train::write_metrics(&dir.join(METRICS_FILE), &outcome.rows, distill)?;
    train::write_timing(&dir.join(TIMING_FILE), &outcome.wall_seconds)?;
    let record = RunRecord {
        command,
        teachers: teachers.iter().map(|p| p.display().to_string()).collect(),
        param_count: outcome.model.param_count(),
        stats: &data.stats,
        config: cfg,
    };
    std::fs::write(dir.join(RUN_FILE), toml::to_string(&record).map_err(|e| Error::Config(e.to_string()))?)?;
    Ok(())
}

fn log_epoch(r: &train::EpochRow) {
    eprintln!("epoch {} lr={:.6} train_loss={:.4} train_acc={:.4} test_acc={:.4}", r.epoch, r.lr, r.train_loss, r.train_acc, r.test_acc);
}

/// Supervised training of a cnn or inn teacher.
pub fn train_teacher(cfg: &RunConfig) -> Result<String> {
    if !cfg.family.is_residual() {
        return Err(Error::Config(format!("train-teacher needs family cnn or inn, got {}", cfg.family.as_str())));
    }
    let cfg = RunConfig { mode: Mode::None, ..cfg.clone() };
    let dir = out_dir(&cfg)?;
    let data = load_data(&cfg)?;
    let outcome = train::train(&cfg, &data, &[], log_epoch)?;
    write_run(&dir, "train-teacher", &cfg, &data, &[], &outcome, false)?;
    Ok(format!("test_acc={:.6} checkpoint={}\n", outcome.final_test_acc(), dir.join(CHECKPOINT_FILE).display()))
}

/// Loads teachers in the order the mode expects: cross-bias takes the
/// cnn teacher first regardless of the order given.
pub fn load_teachers(paths: &[PathBuf], mode: Mode) -> Result<(Vec<PathBuf>, Vec<Model<f32>>)> {
    for p in paths {
        if !p.is_file() {
            return Err(Error::Config(format!("teacher checkpoint {} does not exist", p.display())));
        }
    }
    let mut pairs: Vec<(PathBuf, Model<f32>)> = paths.iter().map(|p| Ok((p.clone(), load_model(p)?))).collect::<Result<_>>()?;
    if mode == Mode::CrossBias {
        pairs.sort_by_key(|(_, m)| m.spec.family != Family::Cnn);
    }
    Ok(pairs.into_iter().unzip())
}

pub fn distill(cfg: &RunConfig, teacher_paths: &[PathBuf]) -> Result<String> {
    let (paths, teachers) = load_teachers(teacher_paths, cfg.mode)?;
    for (p, t) in paths.iter().zip(&teachers) {
        if t.spec.classes != cfg_classes(cfg) {
            return Err(Error::Config(format!("teacher {} predicts {} classes, dataset has {}", p.display(), t.spec.classes, cfg_classes(cfg))));
        }
    }
    let dir = out_dir(cfg)?;
    let data = load_data(cfg)?;
    let outcome = train::train(cfg, &data, &teachers, log_epoch)?;
    write_run(&dir, "distill", cfg, &data, &paths, &outcome, true)?;
    Ok(format!("test_acc={:.6} checkpoint={}\n", outcome.final_test_acc(), dir.join(CHECKPOINT_FILE).display()))
}

fn cfg_classes(cfg: &RunConfig) -> usize {
    match cfg.dataset {
        crate::config::DatasetKind::Synthetic => cfg.synth_classes,
        crate::config::DatasetKind::Cifar10 => 10,
    }
}

pub fn eval(cfg: &RunConfig, ckpt: &Path, confusion: bool) -> Result<(EvalReport, String)> {
    let model = load_model(ckpt)?;
    let data = load_data(cfg)?;
    let report = train::evaluate(&model, &data.test, &data.stats, cfg.eval_batch_size)?;
    let text = report.render(confusion);
    Ok((report, text))
}

/// One row of the KL table: a student token or a teacher, against each
/// teacher column.
#[derive(Clone, Debug, PartialEq)]
pub struct KlTable {
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<f64>)>,
}

impl KlTable {
    pub fn get(&self, row: &str, column: &str) -> Option<f64> {
        let c = self.columns.iter().position(|n| n == column)?;
        self.rows.iter().find(|(r, _)| r == row).map(|(_, v)| v[c])
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("output,{}\n", self.columns.join(","));
        for (name, vals) in &self.rows {
            let v: Vec<String> = vals.iter().map(|x| format!("{x:.6}")).collect();
            s.push_str(&format!("{name},{}\n", v.join(",")));
        }
        s
    }
}

fn teacher_names(teachers: &[Model<f32>]) -> Vec<String> {
    let base: Vec<&str> = teachers.iter().map(|t| t.spec.family.as_str()).collect();
    base.iter()
        .enumerate()
        .map(|(i, b)| if base.iter().filter(|o| *o == b).count() > 1 { format!("{b}{}", i + 1) } else { b.to_string() })
        .collect()
}

/// Mean `KL(teacher ‖ output)` over the test set, for every student token
/// and every teacher against every teacher.
pub fn kl_table(cfg: &RunConfig, student: &Path, teacher_paths: &[PathBuf]) -> Result<KlTable> {
    let model = load_model(student)?;
    let (_, teachers) = load_teachers(teacher_paths, Mode::None)?;
    if teachers.is_empty() {
        return Err(Error::Config("kl-table needs at least one --teacher".into()));
    }
    if let Some(t) = teachers.iter().find(|t| t.spec.classes != model.spec.classes) {
        return Err(Error::Config(format!("class counts differ: student {} vs {} teacher {}", model.spec.classes, t.spec.family.as_str(), t.spec.classes)));
    }
    let data = load_data(cfg)?;
    let all: Vec<usize> = (0..data.test.len()).collect();
    let teacher_logits: Vec<_> = teachers.iter().map(|t| Ok(logits_for(t, &data.test, &data.stats, &all, cfg.eval_batch_size)?.remove(0))).collect::<Result<_>>()?;
    let student_logits = logits_for(&model, &data.test, &data.stats, &all, cfg.eval_batch_size)?;
    let token_names: &[&str] = if student_logits.len() == 3 { &["class_token", "conv_token", "inv_token"] } else { &["class_token"] };
    let names = teacher_names(&teachers);
    let mut rows = Vec::new();
    for (name, z) in token_names.iter().zip(&student_logits) {
        rows.push((name.to_string(), teacher_logits.iter().map(|t| kl_similarity(t, z)).collect::<Result<_>>()?));
    }
    for (name, z) in names.iter().zip(&teacher_logits) {
        rows.push((format!("teacher_{name}"), teacher_logits.iter().map(|t| kl_similarity(t, z)).collect::<Result<_>>()?));
    }
    Ok(KlTable { columns: names, rows })
}

pub fn gradcheck() -> Result<(Vec<SuiteEntry>, String)> {
    gradcheck_with(&suite::default_checks())
}

pub fn gradcheck_with(checks: &[suite::Check]) -> Result<(Vec<SuiteEntry>, String)> {
    let entries = suite::run(checks);
    let mut text: String = entries.iter().map(|e| e.line() + "\n").collect();
    let failed = entries.iter().filter(|e| !e.report.passed).count();
    text.push_str(&format!("checks={} failed={failed}\n", entries.len()));
    Ok((entries, text))
}

pub fn preset(name: &str) -> Option<ModelSpec> {
    Some(match name {
        "civt-ti" => ModelSpec::civt_ti(),
        "civt-s" => ModelSpec::civt_s(),
        "desk-ti" => ModelSpec::desk_ti(),
        "desk-cnn" => ModelSpec::desk_teacher(Family::Cnn),
        "desk-inn" => ModelSpec::desk_teacher(Family::Inn),
        "mixer-ti" => ModelSpec::mixer_ti(32, 10, 4),
        _ => return None,
    })
}

pub const PRESETS: [&str; 6] = ["civt-ti", "civt-s", "desk-ti", "desk-cnn", "desk-inn", "mixer-ti"];

/// Parameter counts per module. `target` is a preset name, a model spec
/// TOML file or a checkpoint.
pub fn inspect(target: &str) -> Result<(Vec<(String, usize)>, String)> {
    let summary = if let Some(spec) = preset(target) {
        Model::<f32>::build(&spec, 0)?.param_summary()
    } else {
        let path = Path::new(target);
        if !path.is_file() {
            return Err(Error::Config(format!("'{target}' is neither a preset ({}) nor an existing file", PRESETS.join(", "))));
        }
        if path.extension().is_some_and(|e| e == "toml") {
            let text = std::fs::read_to_string(path)?;
            let spec: ModelSpec = toml::from_str(&text).map_err(|e| Error::Config(format!("{target}: {e}")))?;
            Model::<f32>::build(&spec, 0)?.param_summary()
        } else {
            let named = checkpoint::load(path)?;
            param_summary(named.iter().map(|(n, t)| (n.as_str(), t.numel())))
        }
    };
    let total: usize = summary.iter().map(|(_, n)| n).sum();
    let mut text: String = summary.iter().map(|(m, n)| format!("{m} {n}\n")).collect();
    text.push_str(&format!("total {total}\n"));
    Ok((summary, text))
}
