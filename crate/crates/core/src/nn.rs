//! Layers built on the tape primitives.
//!
//! Every layer stores [`ParamId`]s into a model's [`ParamStore`] and runs
//! against a [`Bound`] view of it, so the same layer object serves training
//! (gradient leaves) and evaluation (constant leaves).

use crate::autograd::{Padding, Var};
use crate::error::{Error, Result};
use crate::param::{Bound, Init, ParamId, ParamStore};
use crate::tensor::{Float, Tensor};

/// Standard deviation of the truncated-normal weight initializer.
pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-6;
pub const GN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Float>(store: &mut ParamStore<T>, init: &mut Init, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        let weight = store.add(format!("{name}.weight"), init.trunc_normal(&[d_in, d_out], INIT_STD), true);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]), false));
        Self { weight, bias, d_in, d_out }
    }

    /// Applies `x·W + b` over the last axis of `x`.
    pub fn forward<'t, T: Float>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let mut shape = x.shape();
        if shape.last() != Some(&self.d_in) {
            return Err(Error::Shape { op: "linear", lhs: shape, rhs: vec![self.d_in, self.d_out] });
        }
        let rows = shape.iter().product::<usize>() / self.d_in;
        let mut y = x.reshape(&[rows, self.d_in])?.matmul(&p[self.weight])?;
        if let Some(b) = self.bias {
            y = y.add_broadcast(&p[b])?;
        }
        *shape.last_mut().unwrap() = self.d_out;
        y.reshape(&shape)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::ones(&[d]), false);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[d]), false);
        Self { gain, bias }
    }

    pub fn forward<'t, T: Float>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.layer_norm(&p[self.gain], &p[self.bias], T::of(LN_EPS))
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, channels: usize, groups: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::ones(&[channels]), false);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[channels]), false);
        Self { gain, bias, groups }
    }

    pub fn forward<'t, T: Float>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.group_norm(self.groups, &p[self.gain], &p[self.bias], T::of(GN_EPS))
    }
}

/// Multi-head self-attention. Head `i` owns column block `i` of each
/// projection, so `Q_i = X·W^Q_i` with `W^Q_i` of size `d_in×d_k`.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub heads: usize,
    pub d_in: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub d_out: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Float>(store: &mut ParamStore<T>, init: &mut Init, name: &str, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("{name}: head count {heads} must divide width {d}")));
        }
        let d_k = d / heads;
        let mut mat = |suffix: &str, rows: usize, cols: usize| store.add(format!("{name}.{suffix}"), init.trunc_normal(&[rows, cols], INIT_STD), true);
        Ok(Self {
            w_q: mat("w_q", d, heads * d_k),
            w_k: mat("w_k", d, heads * d_k),
            w_v: mat("w_v", d, heads * d_k),
            w_o: mat("w_o", heads * d_k, d),
            heads,
            d_in: d,
            d_k,
            d_v: d_k,
            d_out: d,
        })
    }

    /// `x` is `[N, d_in]` or `[B, N, d_in]`; the output keeps the leading
    /// axes with `d_out` columns.
    pub fn forward<'t, T: Float>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = x.shape();
        let (b, n) = match shape[..] {
            [n, d] if d == self.d_in => (1, n),
            [b, n, d] if d == self.d_in => (b, n),
            _ => return Err(Error::Shape { op: "multi_head_self_attention", lhs: shape, rhs: vec![self.d_in, self.d_out] }),
        };
        let h = self.heads;
        let x2 = x.reshape(&[b * n, self.d_in])?;
        let split = |w: ParamId, width: usize| -> Result<Var<'t, T>> {
            x2.matmul(&p[w])?.reshape(&[b, n, h, width])?.permute(&[0, 2, 1, 3])?.reshape(&[b * h, n, width])
        };
        let q = split(self.w_q, self.d_k)?;
        let k = split(self.w_k, self.d_k)?;
        let v = split(self.w_v, self.d_v)?;
        let scale = T::one() / T::of(self.d_k as f64).sqrt();
        let attn = q.bmm(&k, true)?.scale(scale)?.softmax_rows(T::one())?;
        let heads = attn.bmm(&v, false)?.reshape(&[b, h, n, self.d_v])?.permute(&[0, 2, 1, 3])?.reshape(&[b * n, h * self.d_v])?;
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.d_out;
        heads.matmul(&p[self.w_o])?.reshape(&out_shape)
    }
}

/// Two-layer perceptron with a GELU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Float>(store: &mut ParamStore<T>, init: &mut Init, name: &str, d: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::new(store, init, &format!("{name}.fc1"), d, hidden, true),
            fc2: Linear::new(store, init, &format!("{name}.fc2"), hidden, d, true),
        }
    }

    pub fn forward<'t, T: Float>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let h = self.fc1.forward(p, x)?.gelu()?;
        self.fc2.forward(p, h)
    }
}

/// Pre-norm transformer block: `x + MHSA(LN(x))`, then `x + FFN(LN(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn new<T: Float>(store: &mut ParamStore<T>, init: &mut Init, name: &str, d: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            attn: MultiHeadAttention::new(store, init, &format!("{name}.attn"), d, heads)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            mlp: Mlp::new(store, init, &format!("{name}.mlp"), d, mlp_ratio * d),
        })
    }

    pub fn forward<'t, T: Float>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let x = x.add(&self.attn.forward(p, self.ln1.forward(p, x)?)?)?;
        x.add(&self.mlp.forward(p, self.ln2.forward(p, x)?)?)
    }
}

/// Splits `[B,C,H,W]` images into non-overlapping `P×P` patches in raster
/// order and projects each flattened `C·P²` patch with one shared linear map.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub patch: usize,
}

impl PatchEmbed {
    pub fn new<T: Float>(store: &mut ParamStore<T>, init: &mut Init, name: &str, channels: usize, patch: usize, d: usize) -> Self {
        Self { proj: Linear::new(store, init, &format!("{name}.proj"), channels * patch * patch, d, true), patch }
    }

    pub fn patch_count(height: usize, width: usize, patch: usize) -> Result<usize> {
        if patch == 0 || height % patch != 0 || width % patch != 0 {
            return Err(Error::Config(format!("patch size {patch} must divide image size {height}x{width}")));
        }
        Ok(height * width / (patch * patch))
    }

    pub fn forward<'t, T: Float>(&self, p: &Bound<'t, T>, images: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = images.shape();
        let [b, c, h, w] = s[..] else {
            return Err(Error::Shape { op: "patch_embed", lhs: s, rhs: vec![self.patch] });
        };
        let pp = self.patch;
        let m = Self::patch_count(h, w, pp)?;
        let patches = images
            .reshape(&[b, c, h / pp, pp, w / pp, pp])?
            .permute(&[0, 2, 4, 1, 3, 5])?
            .reshape(&[b, m, c * pp * pp])?;
        self.proj.forward(p, patches)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    pub padding: Padding,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init.trunc_normal(&[c_out, c_in, kernel, kernel], INIT_STD), true);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]), false));
        Self { weight, bias, stride, pad: kernel / 2, padding: Padding::Zero }
    }

    pub fn forward<'t, T: Float>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.conv2d(&p[self.weight], self.bias.map(|b| &p[b]), self.stride, self.pad, self.padding)
    }
}

/// Involution: a per-position kernel generated from the local feature
/// vector (`C → C/r → K²·G` with a ReLU between), shared by all channels of
/// a group.
#[derive(Clone, Debug)]
pub struct Involution {
    pub reduce: Conv2d,
    pub span: Conv2d,
    pub size: usize,
    pub groups: usize,
    pub stride: usize,
    pub padding: Padding,
}

impl Involution {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        channels: usize,
        size: usize,
        groups: usize,
        reduction: usize,
        stride: usize,
    ) -> Result<Self> {
        if size % 2 == 0 {
            return Err(Error::Config(format!("{name}: involution kernel size {size} must be odd")));
        }
        if groups == 0 || channels % groups != 0 {
            return Err(Error::Config(format!("{name}: involution groups {groups} must divide channels {channels}")));
        }
        if reduction == 0 {
            return Err(Error::Config(format!("{name}: involution reduction ratio must be positive")));
        }
        let hidden = (channels / reduction).max(1);
        Ok(Self {
            reduce: Conv2d::new(store, init, &format!("{name}.reduce"), channels, hidden, 1, 1, true),
            span: Conv2d::new(store, init, &format!("{name}.span"), hidden, size * size * groups, 1, 1, true),
            size,
            groups,
            stride,
            padding: Padding::Zero,
        })
    }

    /// Generated kernels, `[B, G·K², H', W']`. Strided involutions generate
    /// from the average-pooled feature map.
    pub fn kernels<'t, T: Float>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let feat = if self.stride > 1 { x.avg_pool(self.stride)? } else { x };
        let hidden = self.reduce.forward(p, feat)?.relu()?;
        self.span.forward(p, hidden)
    }

    pub fn forward<'t, T: Float>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let k = self.kernels(p, x)?;
        x.involution(&k, self.groups, self.size, self.stride, self.padding)
    }
}
