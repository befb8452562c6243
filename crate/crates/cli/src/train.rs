//! The shared training loop, evaluation and model I/O.

use std::path::{Path, PathBuf};
use std::time::Instant;

use civt_core::checkpoint;
use civt_core::data::{batches, load_cifar10, make_batch, mixup, synth_generate, AugmentDraw};
use civt_core::distill::{civt_loss, naive_multi_loss};
use civt_core::models::predict_from_logits;
use civt_core::{AdamW, ChannelStats, Dataset, Error, Family, Mode, Model, ModelSpec, Result, Schedule, Tape, Target, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{DatasetKind, RunConfig};

pub struct Data {
    pub train: Dataset,
    pub test: Dataset,
    pub stats: ChannelStats,
}

pub fn load_data(cfg: &RunConfig) -> Result<Data> {
    let (train, test) = match cfg.dataset {
        DatasetKind::Synthetic => {
            let set = synth_generate(&cfg.synth_spec())?;
            (set.train, set.test)
        }
        DatasetKind::Cifar10 => load_cifar10(cfg.data_dir.as_deref().expect("validated"))?,
    };
    let stats = train.channel_stats();
    Ok(Data { train, test, stats })
}

/// Sidecar holding the architecture of `ckpt`.
pub fn spec_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("spec.toml")
}

pub fn save_model(model: &Model<f32>, ckpt: &Path) -> Result<()> {
    checkpoint::save(ckpt, &model.to_named())?;
    let spec = toml::to_string(&model.spec).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(spec_path(ckpt), spec)?;
    Ok(())
}

pub fn load_model(ckpt: &Path) -> Result<Model<f32>> {
    let sidecar = spec_path(ckpt);
    let text = std::fs::read_to_string(&sidecar).map_err(|e| Error::Checkpoint(format!("{}: {e}", sidecar.display())))?;
    let spec: ModelSpec = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", sidecar.display())))?;
    let mut model = Model::build(&spec, 0)?;
    model.load_named(&checkpoint::load(ckpt)?)?;
    Ok(model)
}

/// Checks that a model accepts the dataset's images and labels.
pub fn check_compatible(spec: &ModelSpec, ds: &Dataset) -> Result<()> {
    let want = [spec.channels, spec.image_height, spec.image_width, spec.classes];
    let got = [ds.channels, ds.height, ds.width, ds.classes];
    if want != got {
        return Err(Error::Shape { op: "model/dataset (channels, height, width, classes)", lhs: want.to_vec(), rhs: got.to_vec() });
    }
    Ok(())
}

/// Class-token logits for examples `indices`, batched.
pub fn logits_for(model: &Model<f32>, ds: &Dataset, stats: &ChannelStats, indices: &[usize], batch: usize) -> Result<Vec<Tensor<f32>>> {
    let mut class = Vec::new();
    let mut conv = Vec::new();
    let mut inv = Vec::new();
    for chunk in indices.chunks(batch) {
        let b = make_batch::<f32>(ds, chunk, stats, None);
        let out = model.logits(&b.images)?;
        class.extend_from_slice(out.class.data());
        if let Some(c) = out.conv {
            conv.extend_from_slice(c.data());
        }
        if let Some(i) = out.inv {
            inv.extend_from_slice(i.data());
        }
    }
    let k = model.spec.classes;
    let n = indices.len();
    Ok([class, conv, inv].into_iter().filter(|v| !v.is_empty()).map(|v| Tensor::new(&[n, k], v).expect("row-major logits")).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub correct: usize,
    pub total: usize,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl EvalReport {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total.max(1) as f64
    }

    pub fn render(&self, confusion: bool) -> String {
        let mut s = format!("accuracy={:.6} correct={} total={}\n", self.accuracy(), self.correct, self.total);
        if confusion {
            for (y, row) in self.confusion.iter().enumerate() {
                let counts: Vec<String> = row.iter().map(usize::to_string).collect();
                s.push_str(&format!("confusion true={y} predicted={}\n", counts.join(",")));
            }
        }
        s
    }
}

pub fn evaluate(model: &Model<f32>, ds: &Dataset, stats: &ChannelStats, batch: usize) -> Result<EvalReport> {
    check_compatible(&model.spec, ds)?;
    let k = ds.classes;
    let mut report = EvalReport { correct: 0, total: ds.len(), confusion: vec![vec![0; k]; k] };
    let all: Vec<usize> = (0..ds.len()).collect();
    for chunk in all.chunks(batch) {
        let b = make_batch::<f32>(ds, chunk, stats, None);
        for (&p, &y) in model.predict(&b.images)?.iter().zip(&b.labels) {
            report.confusion[y][p] += 1;
            report.correct += usize::from(p == y);
        }
    }
    Ok(report)
}

/// One line of `metrics.csv`. The loss terms are present for distillation
/// runs only; `kl_conv`/`kl_inv` hold the term of the cnn/inn teacher.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub ce: f64,
    pub kl_conv: Option<f64>,
    pub kl_inv: Option<f64>,
}

pub struct Outcome {
    pub model: Model<f32>,
    pub rows: Vec<EpochRow>,
    pub wall_seconds: Vec<f64>,
}

impl Outcome {
    pub fn final_test_acc(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.test_acc)
    }
}

fn shuffle_seed(seed: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1)
}

/// Trains `cfg.family` on `data` under `cfg.mode` with the given frozen
/// teachers. The civt student under cross-bias routes the two teachers
/// to its conv and inv tokens; every other pairing distills into the
/// class output.
pub fn train(cfg: &RunConfig, data: &Data, teachers: &[Model<f32>], mut progress: impl FnMut(&EpochRow)) -> Result<Outcome> {
    cfg.validate()?;
    let dcfg = cfg.distill();
    let families: Vec<Family> = teachers.iter().map(|t| t.spec.family).collect();
    dcfg.check_teachers(&families)?;
    let (train, test) = (&data.train, &data.test);
    let spec = cfg.model_spec(train.channels, train.height, train.width, train.classes);
    let mut model = Model::<f32>::build(&spec, cfg.seed)?;
    check_compatible(&spec, test)?;
    for t in teachers {
        check_compatible(&t.spec, train)?;
    }
    let three_token = spec.family == Family::Civt && dcfg.mode == Mode::CrossBias;
    if dcfg.mode == Mode::CrossBias && !three_token {
        return Err(Error::Config(format!("mode cross-bias needs a civt student, got {}", spec.family.as_str())));
    }

    // Without augmentation every example is seen unchanged, so teacher
    // outputs can be computed once.
    let cached = !cfg.augment && cfg.mixup_alpha == 0.0;
    let all: Vec<usize> = (0..train.len()).collect();
    let cache: Vec<Tensor<f32>> = if cached {
        teachers.iter().map(|t| Ok(logits_for(t, train, &data.stats, &all, cfg.eval_batch_size)?.remove(0))).collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    let sched = Schedule::new(cfg.lr, cfg.warmup_epochs, cfg.epochs as f64, cfg.min_lr)?;
    let mut opt = AdamW::<f32>::new(cfg.lr, cfg.weight_decay);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    aug_rng.set_stream(1);
    let k = spec.classes;
    let mut rows = Vec::with_capacity(cfg.epochs);
    let mut wall = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let order = batches(train.len(), cfg.batch_size, shuffle_seed(cfg.seed), epoch as u64)?;
        let steps = order.len();
        let (mut loss_sum, mut ce_sum, mut correct) = (0.0, 0.0, 0usize);
        let mut kl_sum = vec![0.0; teachers.len()];
        for (step, idx) in order.iter().enumerate() {
            let draws: Option<Vec<AugmentDraw>> = cfg.augment.then(|| idx.iter().map(|_| AugmentDraw::sample(&mut aug_rng, cfg.crop_pad)).collect());
            let mut batch = make_batch::<f32>(train, idx, &data.stats, draws.as_deref());
            if cfg.mixup_alpha > 0.0 && batch.len() >= 2 {
                batch = mixup(&batch, cfg.mixup_alpha, &mut aug_rng)?;
            }
            let z: Vec<Tensor<f32>> = if cached {
                cache.iter().map(|c| Tensor::new(&[idx.len(), k], idx.iter().flat_map(|&i| c.data()[i * k..(i + 1) * k].iter().copied()).collect()).expect("rows")).collect()
            } else {
                teachers.iter().map(|t| Ok(t.logits(&batch.images)?.class)).collect::<Result<_>>()?
            };

            let tape = Tape::new();
            let p = model.params.bind(&tape, true);
            let out = model.forward(&p, tape.constant(batch.images.clone()))?;
            let target = match &batch.soft {
                Some(s) => Target::Soft(s),
                None => Target::Hard(&batch.labels),
            };
            let terms = if three_token { civt_loss(&out, target, &z[0], &z[1], &dcfg)? } else { naive_multi_loss(out.class, target, &z, &dcfg)? };
            let loss = terms.total.item() as f64;
            if !loss.is_finite() {
                return Err(Error::NonFinite { op: format!("training loss at epoch {} step {} (global step {})", epoch + 1, step + 1, epoch * steps + step + 1) });
            }
            let mut grads = tape.backward(terms.total)?;
            model.params.zero_grad();
            model.params.accumulate(&p, &mut grads);
            opt.lr = sched.lr_at(epoch as f64 + step as f64 / steps as f64)?;
            opt.step(&mut model.params)?;

            let n = idx.len() as f64;
            loss_sum += loss * n;
            ce_sum += terms.ce * n;
            for (s, v) in kl_sum.iter_mut().zip(&terms.kl) {
                *s += v * n;
            }
            correct += predict_from_logits(&out.class.value()).iter().zip(&batch.labels).filter(|(p, y)| p == y).count();
        }
        let n = train.len() as f64;
        let family_term = |f: Family| {
            let hits: Vec<f64> = families.iter().zip(&kl_sum).filter(|(g, _)| **g == f).map(|(_, s)| s / n).collect();
            (!hits.is_empty()).then(|| hits.iter().sum())
        };
        let row = EpochRow {
            epoch: epoch + 1,
            lr: sched.lr_at(epoch as f64)?,
            train_loss: loss_sum / n,
            train_acc: correct as f64 / n,
            test_acc: evaluate(&model, test, &data.stats, cfg.eval_batch_size)?.accuracy(),
            ce: ce_sum / n,
            kl_conv: family_term(Family::Cnn),
            kl_inv: family_term(Family::Inn),
        };
        progress(&row);
        rows.push(row);
        wall.push(started.elapsed().as_secs_f64());
    }
    Ok(Outcome { model, rows, wall_seconds: wall })
}

/// Writes `metrics.csv`; `distill` selects the per-term columns.
pub fn write_metrics(path: &Path, rows: &[EpochRow], distill: bool) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["epoch", "lr", "train_loss", "train_acc", "test_acc"];
    if distill {
        header.extend(["ce", "kl_conv", "kl_inv"]);
    }
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![r.epoch.to_string(), r.lr.to_string(), r.train_loss.to_string(), r.train_acc.to_string(), r.test_acc.to_string()];
        if distill {
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            rec.extend([r.ce.to_string(), opt(r.kl_conv), opt(r.kl_inv)]);
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_timing(path: &Path, wall: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["epoch", "wall_seconds"]).map_err(csv_err)?;
    for (i, s) in wall.iter().enumerate() {
        w.write_record([(i + 1).to_string(), format!("{s:.3}")]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}
