//! The gradient-check suite: every differentiable primitive and layer, the
//! model families, and the full CivT forward with the co-advising loss, all
//! checked against central differences at f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autograd::{Padding, Var};
use crate::distill::{civt_loss, cross_entropy, kd_kl, DistillConfig, Target};
use crate::error::{Error, Result};
use crate::gradcheck::{gradcheck_many, GradcheckOptions, GradcheckReport};
use crate::models::{Family, Model, ModelSpec};
use crate::nn::{Involution, Linear, MultiHeadAttention, PatchEmbed, TransformerBlock};
use crate::param::{Bound, Init, ParamStore};
use crate::tensor::Tensor;

/// Tolerance for single primitives.
pub const PRIMITIVE_TOL: f64 = 1e-6;
/// Tolerance for layers and model families.
pub const LAYER_TOL: f64 = 1e-5;
/// Tolerance for the end-to-end CivT pipeline.
pub const PIPELINE_TOL: f64 = 1e-4;

type CheckFn = Box<dyn Fn() -> Result<GradcheckReport>>;

pub struct Check {
    pub name: String,
    pub run: CheckFn,
}

impl Check {
    pub fn new(name: impl Into<String>, run: impl Fn() -> Result<GradcheckReport> + 'static) -> Self {
        Self { name: name.into(), run: Box::new(run) }
    }
}

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradcheckReport,
}

impl SuiteEntry {
    /// One report line: `PASS name max_rel_err=… tol=…` or a FAIL line with
    /// the failure reason.
    pub fn line(&self) -> String {
        let r = &self.report;
        let status = if r.passed { "PASS" } else { "FAIL" };
        match &r.failure {
            Some(f) => format!("{status} {} tol={:e} failure=\"{f}\"", self.name, r.tol),
            None => format!("{status} {} max_rel_err={:.3e} tol={:e} coords={}", self.name, r.max_rel_err, r.tol, r.coords_checked),
        }
    }
}

pub fn run(checks: &[Check]) -> Vec<SuiteEntry> {
    checks
        .iter()
        .map(|c| {
            let report = (c.run)().unwrap_or_else(|e| GradcheckReport {
                max_rel_err: f64::INFINITY,
                worst: None,
                coords_checked: 0,
                tol: f64::NAN,
                passed: false,
                failure: Some(e.to_string()),
            });
            SuiteEntry { name: c.name.clone(), report }
        })
        .collect()
}

pub fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
}

/// `Σ y ⊙ R` for a fixed random `R`, so the scalar depends on every output
/// coordinate non-trivially (a plain sum of softmax rows would be constant).
pub fn project<'t>(y: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let r = y.tape().constant(random(&y.shape(), seed ^ 0x5eed));
    y.mul(&r)?.sum()
}

fn opts(tol: f64) -> GradcheckOptions {
    GradcheckOptions::default().tol(tol)
}

fn primitive(name: &str, shapes: Vec<Vec<usize>>, f: impl for<'t> Fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>> + 'static) -> Check {
    Check::new(name, move || {
        let inputs: Vec<_> = shapes.iter().enumerate().map(|(i, s)| random(s, 100 + i as u64)).collect();
        gradcheck_many(|_, v| project(f(v)?, 1), &inputs, &opts(PRIMITIVE_TOL))
    })
}

/// Checks a layer with respect to its input and all of its parameters.
fn layer<L: 'static>(
    name: &str,
    input: Vec<usize>,
    build: impl Fn(&mut ParamStore<f64>, &mut Init) -> Result<L>,
    forward: impl for<'t> Fn(&L, &Bound<'t, f64>, Var<'t, f64>) -> Result<Var<'t, f64>> + 'static,
) -> Check {
    let mut store = ParamStore::new();
    let layer = build(&mut store, &mut Init::new(7)).map_err(|e| e.to_string());
    Check::new(name, move || {
        let layer = layer.as_ref().map_err(|e| Error::Config(e.clone()))?;
        let mut inputs = vec![random(&input, 11)];
        // random parameters, not the init values, so norms/biases are exercised
        inputs.extend(store.iter().enumerate().map(|(i, p)| random(p.value.shape(), 200 + i as u64).map(|v| 0.5 * v)));
        gradcheck_many(
            |_, v| {
                let p = Bound::from_vars(v[1..].to_vec());
                project(forward(layer, &p, v[0])?, 2)
            },
            &inputs,
            &opts(LAYER_TOL),
        )
    })
}

/// Checks a whole model on a 2-image batch, sampling coordinates of every
/// parameter tensor.
fn model(name: &str, spec: ModelSpec, coords: usize) -> Check {
    Check::new(name, move || {
        let model = Model::<f64>::build(&spec, 3)?;
        let images = random(&[2, spec.channels, spec.image_height, spec.image_width], 12);
        let inputs: Vec<_> = model.params.iter().enumerate().map(|(i, p)| random(p.value.shape(), 300 + i as u64).map(|v| 0.3 * v)).collect();
        gradcheck_many(
            |tape, v| {
                let p = Bound::from_vars(v.to_vec());
                let out = model.forward(&p, tape.constant(images.clone()))?;
                project(out.class, 4)
            },
            &inputs,
            &opts(LAYER_TOL).sampled(coords, 5),
        )
    })
}

fn tiny(family: Family) -> ModelSpec {
    let mut s = ModelSpec::transformer(family, 8, 3, 4, 8, 1, 2, 4);
    s.stage_widths = vec![4, 8];
    s.blocks_per_stage = 1;
    s.gn_groups = 2;
    s.inv_kernel = 3;
    s.inv_groups = 2;
    s.inv_reduction = 2;
    s
}

/// End-to-end: CivT forward and the three-term loss on a 2-image batch,
/// checked on sampled coordinates of every parameter.
pub fn civt_pipeline_check(coords_per_tensor: usize) -> Check {
    Check::new("pipeline_civt_forward_loss", move || {
        let spec = ModelSpec::transformer(Family::Civt, 8, 3, 4, 8, 2, 2, 4);
        let model = Model::<f64>::build(&spec, 3)?;
        let images = random(&[2, 3, 8, 8], 21);
        let z_t1 = random(&[2, 4], 22);
        let z_t2 = random(&[2, 4], 23);
        let labels = [1usize, 3];
        let cfg = DistillConfig { tau1: 2.0, tau2: 0.5, ..DistillConfig::default() };
        let inputs: Vec<_> = model.params.iter().enumerate().map(|(i, p)| random(p.value.shape(), 400 + i as u64).map(|v| 0.3 * v)).collect();
        gradcheck_many(
            |tape, v| {
                let p = Bound::from_vars(v.to_vec());
                let out = model.forward(&p, tape.constant(images.clone()))?;
                Ok(civt_loss(&out, Target::Hard(&labels), &z_t1, &z_t2, &cfg)?.total)
            },
            &inputs,
            &opts(PIPELINE_TOL).sampled(coords_per_tensor, 9),
        )
    })
}

/// The full default suite.
pub fn default_checks() -> Vec<Check> {
    let mut checks = vec![
        primitive("matmul", vec![vec![3, 4], vec![4, 2]], |v| v[0].matmul(&v[1])),
        primitive("bmm_transposed", vec![vec![2, 3, 4], vec![2, 5, 4]], |v| v[0].bmm(&v[1], true)),
        primitive("softmax_rows", vec![vec![3, 5]], |v| v[0].softmax_rows(2.0)),
        primitive("log_softmax_rows", vec![vec![3, 5]], |v| v[0].log_softmax_rows(0.7)),
        primitive("elementwise_exp_log_sqrt", vec![vec![6], vec![6]], |v| {
            let pos = v[1].mul(&v[1])?.add_scalar(0.5)?;
            v[0].exp()?.mul(&pos.log()?)?.add(&pos.sqrt()?)?.sub(&v[0].scale(0.3)?)
        }),
        primitive("gelu", vec![vec![10]], |v| v[0].gelu()),
        primitive("concat_slice_mean", vec![vec![2, 3], vec![2, 2]], |v| {
            Var::concat(&[v[0], v[1]], 1)?.slice(1, 1, 3)?.mean_axis(0)
        }),
        primitive("layer_norm", vec![vec![3, 6], vec![6], vec![6]], |v| v[0].layer_norm(&v[1], &v[2], 1e-6)),
        primitive("group_norm", vec![vec![2, 4, 3, 3], vec![4], vec![4]], |v| v[0].group_norm(2, &v[1], &v[2], 1e-5)),
        primitive("conv2d", vec![vec![2, 2, 5, 5], vec![3, 2, 3, 3], vec![3]], |v| {
            v[0].conv2d(&v[1], Some(&v[2]), 2, 1, Padding::Zero)
        }),
        primitive("conv2d_circular", vec![vec![1, 2, 4, 4], vec![2, 2, 3, 3]], |v| {
            v[0].conv2d(&v[1], None, 1, 1, Padding::Circular)
        }),
        primitive("involution2d", vec![vec![2, 4, 5, 5], vec![2, 18, 5, 5]], |v| {
            v[0].involution(&v[1], 2, 3, 1, Padding::Zero)
        }),
        primitive("avg_pool", vec![vec![2, 3, 4, 4]], |v| v[0].avg_pool(2)),
        layer("linear", vec![4, 3], |s, i| Ok(Linear::new(s, i, "fc", 3, 5, true)), |l, p, x| l.forward(p, x)),
        layer(
            "multi_head_self_attention",
            vec![2, 5, 6],
            |s, i| MultiHeadAttention::new(s, i, "attn", 6, 3),
            |l, p, x| l.forward(p, x),
        ),
        layer(
            "transformer_block",
            vec![1, 4, 6],
            |s, i| TransformerBlock::new(s, i, "block", 6, 2, 2),
            |l, p, x| l.forward(p, x),
        ),
        layer("patch_embed", vec![2, 2, 4, 4], |s, i| Ok(PatchEmbed::new(s, i, "pe", 2, 2, 3)), |l, p, x| l.forward(p, x)),
        layer(
            "involution_layer_strided",
            vec![1, 4, 6, 6],
            |s, i| Involution::new(s, i, "inv", 4, 3, 2, 2, 2),
            |l, p, x| l.forward(p, x),
        ),
        Check::new("cross_entropy", || {
            let soft = Tensor::from_f64(&[2, 3], &[0.2, 0.5, 0.3, 1.0, 0.0, 0.0])?;
            gradcheck_many(|_, v| cross_entropy(v[0], Target::Soft(&soft)), &[random(&[2, 3], 31)], &opts(PRIMITIVE_TOL))
        }),
        Check::new("kd_kl", || {
            let teacher = random(&[3, 4], 32);
            gradcheck_many(|_, v| kd_kl(v[0], &teacher, 2.0), &[random(&[3, 4], 33)], &opts(PRIMITIVE_TOL))
        }),
        model("mixer_model", tiny(Family::Mixer), 4),
        model("cnn_teacher", tiny(Family::Cnn), 4),
        model("inn_teacher", tiny(Family::Inn), 4),
        model("transformer_1tok_model", tiny(Family::Transformer1Tok), 3),
    ];
    checks.push(civt_pipeline_check(2));
    checks
}
