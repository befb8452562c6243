//! Supervised and distillation losses with token routing, plus the
//! KL-similarity diagnostic.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::models::{Family, TokenVars};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    None,
    Single,
    NaiveMulti,
    CrossBias,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::None => "none",
            Mode::Single => "single",
            Mode::NaiveMulti => "naive-multi",
            Mode::CrossBias => "cross-bias",
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => Mode::None,
            "single" | "single_teacher" => Mode::Single,
            "naive-multi" | "naive_multi" => Mode::NaiveMulti,
            "cross-bias" | "cross_bias_3tok" => Mode::CrossBias,
            other => return Err(Error::Config(format!("unknown distillation mode '{other}'"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub mode: Mode,
    pub lambda0: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau1: f64,
    pub tau2: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self { mode: Mode::CrossBias, lambda0: 1.0, lambda1: 1.0, lambda2: 1.0, tau1: 1.0, tau2: 1.0 }
    }
}

impl DistillConfig {
    pub fn with_mode(mode: Mode) -> Self {
        Self { mode, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, l) in [("lambda0", self.lambda0), ("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite nonnegative weight, got {l}")));
            }
        }
        for (name, t) in [("tau1", self.tau1), ("tau2", self.tau2)] {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {t}")));
            }
        }
        Ok(())
    }

    /// Checks the teacher set against the mode: none takes no teachers,
    /// single exactly one, naive-multi at least two, cross-bias exactly one
    /// cnn followed by one inn.
    pub fn check_teachers(&self, teachers: &[Family]) -> Result<()> {
        let ok = match self.mode {
            Mode::None => teachers.is_empty(),
            Mode::Single => teachers.len() == 1,
            Mode::NaiveMulti => teachers.len() >= 2,
            Mode::CrossBias => teachers == [Family::Cnn, Family::Inn],
        };
        let residual = teachers.iter().all(|f| f.is_residual());
        if ok && residual {
            return Ok(());
        }
        let names: Vec<_> = teachers.iter().map(|f| f.as_str()).collect();
        let want = match self.mode {
            Mode::None => "no teachers",
            Mode::Single => "exactly one cnn or inn teacher",
            Mode::NaiveMulti => "at least two cnn/inn teachers",
            Mode::CrossBias => "one cnn teacher then one inn teacher",
        };
        Err(Error::Config(format!("mode {} needs {want}, got [{}]", self.mode.as_str(), names.join(", "))))
    }

    /// Weight and temperature applied to teacher `j` in the one-token
    /// losses: the first teacher uses (λ1, τ1), the rest (λ2, τ2).
    pub fn teacher_weight(&self, j: usize) -> (f64, f64) {
        if j == 0 {
            (self.lambda1, self.tau1)
        } else {
            (self.lambda2, self.tau2)
        }
    }
}

/// Supervision for a batch: hard labels or soft rows summing to one.
#[derive(Clone, Copy, Debug)]
pub enum Target<'a, T> {
    Hard(&'a [usize]),
    Soft(&'a Tensor<T>),
}

impl<T: Float> Target<'_, T> {
    fn matrix(&self, batch: usize, classes: usize) -> Result<Tensor<T>> {
        match *self {
            Target::Hard(labels) => {
                if labels.len() != batch {
                    return Err(Error::Shape { op: "cross_entropy", lhs: vec![batch, classes], rhs: vec![labels.len()] });
                }
                let mut m = Tensor::zeros(&[batch, classes]);
                for (i, &y) in labels.iter().enumerate() {
                    if y >= classes {
                        return Err(Error::Parameter(format!("label {y} out of range for {classes} classes")));
                    }
                    m.data_mut()[i * classes + y] = T::one();
                }
                Ok(m)
            }
            Target::Soft(t) => {
                if t.shape() != [batch, classes] {
                    return Err(Error::Shape { op: "cross_entropy", lhs: vec![batch, classes], rhs: t.shape().to_vec() });
                }
                Ok(t.clone())
            }
        }
    }
}

fn batch_dims<T: Float>(logits: &Var<'_, T>) -> Result<(usize, usize)> {
    match logits.shape()[..] {
        [b, k] => Ok((b, k)),
        ref s => Err(Error::InvalidShape { shape: s.to_vec(), reason: "logits must be [batch, classes]".into() }),
    }
}

/// Mean over the batch of `−Σ_k y_k log softmax(z)_k`.
pub fn cross_entropy<'t, T: Float>(logits: Var<'t, T>, target: Target<'_, T>) -> Result<Var<'t, T>> {
    let (b, k) = batch_dims(&logits)?;
    let y = logits.tape().constant(target.matrix(b, k)?);
    logits.log_softmax_rows(T::one())?.mul(&y)?.sum()?.scale(T::of(-1.0 / b as f64))
}

/// Row-wise `log softmax(z / τ)` of a plain tensor.
pub fn log_softmax<T: Float>(logits: &Tensor<T>, tau: f64) -> Tensor<T> {
    let k = *logits.shape().last().unwrap_or(&1);
    let t = T::of(tau);
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v / t));
        let lse = row.iter().map(|&v| (v / t - max).exp()).sum::<T>().ln() + max;
        row.iter_mut().for_each(|v| *v = *v / t - lse);
    }
    out
}

/// `τ² · mean_b KL(softmax(teacher/τ) ‖ softmax(student/τ))`. The teacher
/// logits are constants, so no gradient reaches the teacher.
pub fn kd_kl<'t, T: Float>(student: Var<'t, T>, teacher: &Tensor<T>, tau: f64) -> Result<Var<'t, T>> {
    let (b, k) = batch_dims(&student)?;
    if teacher.shape() != [b, k] {
        return Err(Error::Shape { op: "kd_kl", lhs: vec![b, k], rhs: teacher.shape().to_vec() });
    }
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!("temperature must be positive, got {tau}")));
    }
    let log_p = log_softmax(teacher, tau);
    let p = log_p.map(|v| v.exp());
    // Σ p ln p, with 0·ln 0 = 0
    let neg_entropy: T = p.data().iter().zip(log_p.data()).filter(|(&p, _)| p > T::zero()).map(|(&p, &l)| p * l).sum();
    let cross = student.log_softmax_rows(T::of(tau))?.mul(&student.tape().constant(p))?.sum()?;
    cross.neg()?.add_scalar(neg_entropy)?.scale(T::of(tau * tau / b as f64))
}

/// Loss graph plus the per-term values for logging. `kl` holds one entry
/// per teacher (unweighted, already scaled by τ²).
pub struct LossTerms<'t, T: Float> {
    pub total: Var<'t, T>,
    pub ce: f64,
    pub kl: Vec<f64>,
}

/// Three-token co-advising: the class token fits the label, the conv
/// token the cnn teacher and the inv token the inn teacher.
///
/// Terms whose weight is zero are evaluated for logging but left out of
/// the graph, so λ1 = λ2 = 0 is bitwise identical to plain supervision.
pub fn civt_loss<'t, T: Float>(
    tokens: &TokenVars<'t, T>,
    target: Target<'_, T>,
    z_t1: &Tensor<T>,
    z_t2: &Tensor<T>,
    cfg: &DistillConfig,
) -> Result<LossTerms<'t, T>> {
    let (Some(conv), Some(inv)) = (tokens.conv, tokens.inv) else {
        return Err(Error::Contract("civt_loss needs conv and inv token logits".into()));
    };
    let ce = cross_entropy(tokens.class, target)?;
    let kl_conv = kd_kl(conv, z_t1, cfg.tau1)?;
    let kl_inv = kd_kl(inv, z_t2, cfg.tau2)?;
    let mut total = ce.scale(T::of(cfg.lambda0))?;
    for (kl, lambda) in [(kl_conv, cfg.lambda1), (kl_inv, cfg.lambda2)] {
        if lambda != 0.0 {
            total = total.add(&kl.scale(T::of(lambda))?)?;
        }
    }
    Ok(LossTerms { total, ce: ce.item().f64(), kl: vec![kl_conv.item().f64(), kl_inv.item().f64()] })
}

/// One output fits the label and every teacher at once:
/// `λ0·CE + Σ_j λ_j·kd_kl(z, z_tj, τ_j)`.
pub fn naive_multi_loss<'t, T: Float>(
    logits: Var<'t, T>,
    target: Target<'_, T>,
    teachers: &[Tensor<T>],
    cfg: &DistillConfig,
) -> Result<LossTerms<'t, T>> {
    if cfg.mode != Mode::None && teachers.is_empty() {
        return Err(Error::Contract(format!("mode {} needs at least one teacher", cfg.mode.as_str())));
    }
    let ce = cross_entropy(logits, target)?;
    let mut total = ce.scale(T::of(cfg.lambda0))?;
    let mut kls = Vec::with_capacity(teachers.len());
    for (j, z_t) in teachers.iter().enumerate() {
        let (lambda, tau) = cfg.teacher_weight(j);
        let kl = kd_kl(logits, z_t, tau)?;
        if lambda != 0.0 {
            total = total.add(&kl.scale(T::of(lambda))?)?;
        }
        kls.push(kl.item().f64());
    }
    Ok(LossTerms { total, ce: ce.item().f64(), kl: kls })
}

/// Per-row `KL(softmax(a) ‖ softmax(b))` at τ = 1, in f64.
pub fn kl_rows<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Vec<f64>> {
    if a.shape() != b.shape() || a.rank() != 2 {
        return Err(Error::Shape { op: "kl_similarity", lhs: a.shape().to_vec(), rhs: b.shape().to_vec() });
    }
    let k = a.shape()[1];
    let la = log_softmax(&a.cast::<f64>(), 1.0);
    let lb = log_softmax(&b.cast::<f64>(), 1.0);
    Ok(la
        .data()
        .chunks(k)
        .zip(lb.data().chunks(k))
        .map(|(ra, rb)| ra.iter().zip(rb).map(|(&x, &y)| x.exp() * (x - y)).sum::<f64>().max(0.0))
        .collect())
}

/// Mean over the set of `KL(softmax(a) ‖ softmax(b))`; smaller means the
/// two models agree more.
pub fn kl_similarity<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let rows = kl_rows(a, b)?;
    Ok(rows.iter().sum::<f64>() / rows.len() as f64)
}
