//! Assembled networks: the three-token CivT student, its single-token
//! baseline, residual CNN/INN teachers and an MLP-Mixer student.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, GroupNorm, Involution, LayerNorm, Linear, Mlp, PatchEmbed, TransformerBlock, INIT_STD};
use crate::param::{Bound, Init, ParamStore};
use crate::tensor::{argmax, Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "civt")]
    Civt,
    #[serde(rename = "transformer_1tok")]
    Transformer1Tok,
    #[serde(rename = "cnn")]
    Cnn,
    #[serde(rename = "inn")]
    Inn,
    #[serde(rename = "mixer")]
    Mixer,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::Civt => "civt",
            Family::Transformer1Tok => "transformer_1tok",
            Family::Cnn => "cnn",
            Family::Inn => "inn",
            Family::Mixer => "mixer",
        }
    }

    pub fn is_transformer(self) -> bool {
        matches!(self, Family::Civt | Family::Transformer1Tok)
    }

    pub fn is_residual(self) -> bool {
        matches!(self, Family::Cnn | Family::Inn)
    }

    /// Learnable tokens prepended to the patch sequence.
    pub fn token_count(self) -> usize {
        match self {
            Family::Civt => 3,
            Family::Transformer1Tok => 1,
            _ => 0,
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "civt" => Family::Civt,
            "transformer_1tok" => Family::Transformer1Tok,
            "cnn" => Family::Cnn,
            "inn" => Family::Inn,
            "mixer" => Family::Mixer,
            other => return Err(Error::Config(format!("unknown model family '{other}'"))),
        })
    }
}

/// Declarative architecture description.
///
/// Transformer and mixer families read `width`, `depth`, `heads`, `patch`
/// and `mlp_ratio`; residual families read `stage_widths`,
/// `blocks_per_stage`, `gn_groups` and the `inv_*` fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub classes: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub patch: usize,
    pub mlp_ratio: usize,
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub gn_groups: usize,
    pub inv_kernel: usize,
    pub inv_groups: usize,
    pub inv_reduction: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self::desk_ti()
    }
}

impl ModelSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn transformer(family: Family, image: usize, channels: usize, classes: usize, width: usize, depth: usize, heads: usize, patch: usize) -> Self {
        Self {
            family,
            image_height: image,
            image_width: image,
            channels,
            classes,
            width,
            depth,
            heads,
            patch,
            mlp_ratio: 4,
            stage_widths: vec![32, 64, 128, 256],
            blocks_per_stage: 2,
            gn_groups: 8,
            inv_kernel: 7,
            inv_groups: 4,
            inv_reduction: 4,
        }
    }

    /// CivT-Ti at 224×224: d=192, 12 layers, 3 heads, 16×16 patches.
    pub fn civt_ti() -> Self {
        Self::transformer(Family::Civt, 224, 3, 1000, 192, 12, 3, 16)
    }

    /// CivT-S at 224×224: d=384, 12 layers, 6 heads.
    pub fn civt_s() -> Self {
        Self::transformer(Family::Civt, 224, 3, 1000, 384, 12, 6, 16)
    }

    /// 32×32 desk profile: 4×4 patches, d=192, 6 layers, 3 heads.
    pub fn desk_ti() -> Self {
        Self::transformer(Family::Civt, 32, 3, 10, 192, 6, 3, 4)
    }

    /// Desk residual teacher: widths 32/64/128/256, two blocks per stage.
    pub fn desk_teacher(family: Family) -> Self {
        Self { family, width: 0, depth: 0, heads: 0, patch: 0, ..Self::desk_ti() }
    }

    /// Mixer-Ti: 12 layers, width 192.
    pub fn mixer_ti(image: usize, classes: usize, patch: usize) -> Self {
        Self::transformer(Family::Mixer, image, 3, classes, 192, 12, 0, patch)
    }

    pub fn with_family(mut self, family: Family) -> Self {
        self.family = family;
        self
    }

    /// Patch count `M = HW/P²` for patch-based families.
    pub fn patch_count(&self) -> Result<usize> {
        PatchEmbed::patch_count(self.image_height, self.image_width, self.patch)
    }

    /// Sequence length seen by the transformer blocks.
    pub fn sequence_len(&self) -> Result<usize> {
        Ok(self.patch_count()? + self.family.token_count())
    }

    pub fn validate(&self) -> Result<()> {
        let mut violations = Vec::new();
        if self.image_height == 0 || self.image_width == 0 || self.channels == 0 {
            violations.push("image extents and channel count must be positive".to_string());
        }
        if self.classes == 0 {
            violations.push("class count must be positive".to_string());
        }
        match self.family {
            Family::Civt | Family::Transformer1Tok | Family::Mixer => {
                if self.width == 0 {
                    violations.push("width must be positive".into());
                }
                if self.family != Family::Mixer && (self.heads == 0 || self.width % self.heads != 0) {
                    violations.push(format!("heads ({}) must divide width ({})", self.heads, self.width));
                }
                if self.patch == 0 || self.image_height % self.patch != 0 || self.image_width % self.patch != 0 {
                    violations.push(format!(
                        "patch ({}) must divide image height ({}) and width ({})",
                        self.patch, self.image_height, self.image_width
                    ));
                }
                if self.mlp_ratio == 0 {
                    violations.push("mlp_ratio must be positive".into());
                }
            }
            Family::Cnn | Family::Inn => {
                if self.stage_widths.is_empty() || self.stage_widths.contains(&0) {
                    violations.push("stage_widths must be a nonempty list of positive widths".into());
                }
                if self.blocks_per_stage == 0 {
                    violations.push("blocks_per_stage must be positive".into());
                }
                for &w in &self.stage_widths {
                    if self.gn_groups == 0 || w % self.gn_groups != 0 {
                        violations.push(format!("gn_groups ({}) must divide stage width {w}", self.gn_groups));
                    }
                    if self.family == Family::Inn && (self.inv_groups == 0 || w % self.inv_groups != 0) {
                        violations.push(format!("inv_groups ({}) must divide stage width {w}", self.inv_groups));
                    }
                }
                if self.family == Family::Inn {
                    if self.inv_kernel % 2 == 0 {
                        violations.push(format!("inv_kernel ({}) must be odd", self.inv_kernel));
                    }
                    if self.inv_reduction == 0 {
                        violations.push("inv_reduction must be positive".into());
                    }
                }
                let down = 1usize << self.stage_widths.len().saturating_sub(1);
                if self.image_height % down != 0 || self.image_width % down != 0 {
                    violations.push(format!("image size must be divisible by {down} for {} stages", self.stage_widths.len()));
                }
            }
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid {} spec: {}", self.family.as_str(), violations.join("; "))))
        }
    }
}

/// Per-class logits read from the class, conv and inv tokens. Models with
/// a single output fill only `class`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenLogits<T> {
    pub class: Tensor<T>,
    pub conv: Option<Tensor<T>>,
    pub inv: Option<Tensor<T>>,
}

/// Tape handles to the token logits of a batch, each `[B, classes]`.
#[derive(Clone, Copy, Debug)]
pub struct TokenVars<'t, T: Float> {
    pub class: Var<'t, T>,
    pub conv: Option<Var<'t, T>>,
    pub inv: Option<Var<'t, T>>,
}

impl<T: Float> TokenVars<'_, T> {
    pub fn values(&self) -> TokenLogits<T> {
        TokenLogits {
            class: (*self.class.value()).clone(),
            conv: self.conv.map(|v| (*v.value()).clone()),
            inv: self.inv.map(|v| (*v.value()).clone()),
        }
    }
}

#[derive(Clone, Debug)]
struct Vit {
    patch: PatchEmbed,
    tokens: crate::param::ParamId,
    pos: crate::param::ParamId,
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
    heads: Vec<Linear>,
}

#[derive(Clone, Debug)]
enum SpatialOp {
    Conv(Conv2d),
    Inv(Involution),
}

/// `1×1 → spatial (stride) → 1×1`, each followed by GroupNorm, plus a
/// projected shortcut when the shape changes.
#[derive(Clone, Debug)]
struct ResBlock {
    reduce: (Conv2d, GroupNorm),
    spatial: (SpatialOp, GroupNorm),
    expand: (Conv2d, GroupNorm),
    shortcut: Option<(Conv2d, GroupNorm)>,
}

#[derive(Clone, Debug)]
struct ResNet {
    stem: (Conv2d, GroupNorm),
    stages: Vec<Vec<ResBlock>>,
    head: Linear,
}

#[derive(Clone, Debug)]
struct MixerBlock {
    ln1: LayerNorm,
    token_mlp: Mlp,
    ln2: LayerNorm,
    channel_mlp: Mlp,
}

#[derive(Clone, Debug)]
struct Mixer {
    patch: PatchEmbed,
    blocks: Vec<MixerBlock>,
    norm: LayerNorm,
    head: Linear,
}

#[derive(Clone, Debug)]
enum Arch {
    Vit(Vit),
    ResNet(ResNet),
    Mixer(Mixer),
}

/// A parameterized network built from a [`ModelSpec`].
#[derive(Clone, Debug)]
pub struct Model<T: Float> {
    pub spec: ModelSpec,
    pub params: ParamStore<T>,
    arch: Arch,
}

fn build_vit<T: Float>(spec: &ModelSpec, store: &mut ParamStore<T>, init: &mut Init) -> Result<Vit> {
    let d = spec.width;
    let tokens = spec.family.token_count();
    let seq = spec.sequence_len()?;
    let patch = PatchEmbed::new(store, init, "patch_embed", spec.channels, spec.patch, d);
    let tok = store.add("tokens", init.trunc_normal(&[tokens, d], INIT_STD), false);
    let pos = store.add("pos_embed", init.trunc_normal(&[seq, d], INIT_STD), false);
    let blocks = (0..spec.depth)
        .map(|i| TransformerBlock::new(store, init, &format!("blocks.{i}"), d, spec.heads, spec.mlp_ratio))
        .collect::<Result<Vec<_>>>()?;
    let norm = LayerNorm::new(store, "norm", d);
    let names = ["head_class", "head_conv", "head_inv"];
    let heads = names[..tokens].iter().map(|n| Linear::new(store, init, n, d, spec.classes, true)).collect();
    Ok(Vit { patch, tokens: tok, pos, blocks, norm, heads })
}

fn build_resnet<T: Float>(spec: &ModelSpec, store: &mut ParamStore<T>, init: &mut Init) -> Result<ResNet> {
    let g = spec.gn_groups;
    let w0 = spec.stage_widths[0];
    let stem = (
        Conv2d::new(store, init, "stem.conv", spec.channels, w0, 3, 1, false),
        GroupNorm::new(store, "stem.norm", w0, g),
    );
    let mut stages = Vec::new();
    let mut c_in = w0;
    for (s, &c_out) in spec.stage_widths.iter().enumerate() {
        let mut blocks = Vec::new();
        for b in 0..spec.blocks_per_stage {
            let stride = if s > 0 && b == 0 { 2 } else { 1 };
            let name = format!("stages.{s}.{b}");
            let conv = |store: &mut ParamStore<T>, init: &mut Init, part: &str, ci: usize, co: usize, k: usize, st: usize| {
                (
                    Conv2d::new(store, init, &format!("{name}.{part}.conv"), ci, co, k, st, false),
                    GroupNorm::new(store, &format!("{name}.{part}.norm"), co, g),
                )
            };
            let reduce = conv(store, init, "reduce", c_in, c_out, 1, 1);
            let spatial_op = match spec.family {
                Family::Cnn => SpatialOp::Conv(Conv2d::new(store, init, &format!("{name}.spatial.conv"), c_out, c_out, 3, stride, false)),
                _ => SpatialOp::Inv(Involution::new(
                    store,
                    init,
                    &format!("{name}.spatial.inv"),
                    c_out,
                    spec.inv_kernel,
                    spec.inv_groups,
                    spec.inv_reduction,
                    stride,
                )?),
            };
            let spatial = (spatial_op, GroupNorm::new(store, &format!("{name}.spatial.norm"), c_out, g));
            let expand = conv(store, init, "expand", c_out, c_out, 1, 1);
            let shortcut = (stride != 1 || c_in != c_out).then(|| conv(store, init, "shortcut", c_in, c_out, 1, stride));
            blocks.push(ResBlock { reduce, spatial, expand, shortcut });
            c_in = c_out;
        }
        stages.push(blocks);
    }
    let head = Linear::new(store, init, "head", c_in, spec.classes, true);
    Ok(ResNet { stem, stages, head })
}

fn build_mixer<T: Float>(spec: &ModelSpec, store: &mut ParamStore<T>, init: &mut Init) -> Result<Mixer> {
    let d = spec.width;
    let m = spec.patch_count()?;
    let patch = PatchEmbed::new(store, init, "patch_embed", spec.channels, spec.patch, d);
    let token_hidden = (d / 2).max(1);
    let blocks = (0..spec.depth)
        .map(|i| MixerBlock {
            ln1: LayerNorm::new(store, &format!("blocks.{i}.ln1"), d),
            token_mlp: Mlp::new(store, init, &format!("blocks.{i}.token_mlp"), m, token_hidden),
            ln2: LayerNorm::new(store, &format!("blocks.{i}.ln2"), d),
            channel_mlp: Mlp::new(store, init, &format!("blocks.{i}.channel_mlp"), d, spec.mlp_ratio * d),
        })
        .collect();
    let norm = LayerNorm::new(store, "norm", d);
    let head = Linear::new(store, init, "head", d, spec.classes, true);
    Ok(Mixer { patch, blocks, norm, head })
}

impl<T: Float> Model<T> {
    /// Builds a model with deterministic seeded initialization: truncated
    /// normal (σ=0.02, ±2σ) weights, zero biases, unit norm gains.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init::new(seed);
        let arch = match spec.family {
            Family::Civt | Family::Transformer1Tok => Arch::Vit(build_vit(spec, &mut params, &mut init)?),
            Family::Cnn | Family::Inn => Arch::ResNet(build_resnet(spec, &mut params, &mut init)?),
            Family::Mixer => Arch::Mixer(build_mixer(spec, &mut params, &mut init)?),
        };
        Ok(Self { spec: spec.clone(), params, arch })
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Same architecture and values in another precision.
    pub fn cast<U: Float>(&self) -> Model<U> {
        Model { spec: self.spec.clone(), params: self.params.cast(), arch: self.arch.clone() }
    }

    fn check_images(&self, images: &Var<'_, T>) -> Result<usize> {
        let s = images.shape();
        let want = [self.spec.channels, self.spec.image_height, self.spec.image_width];
        match s[..] {
            [b, c, h, w] if [c, h, w] == want => Ok(b),
            _ => Err(Error::Shape { op: "model input", lhs: s, rhs: want.to_vec() }),
        }
    }

    /// Runs the network on `[B,C,H,W]` images.
    pub fn forward<'t>(&self, p: &Bound<'t, T>, images: Var<'t, T>) -> Result<TokenVars<'t, T>> {
        self.check_images(&images)?;
        match &self.arch {
            Arch::Vit(_) => self.forward_civt(p, images),
            Arch::ResNet(_) => self.forward_teacher(p, images).map(|class| TokenVars { class, conv: None, inv: None }),
            Arch::Mixer(_) => self.forward_mixer(p, images).map(|class| TokenVars { class, conv: None, inv: None }),
        }
    }

    /// Final-normed token sequence `[B, tokens + M, d]` of a transformer.
    pub fn transformer_features<'t>(&self, p: &Bound<'t, T>, images: Var<'t, T>) -> Result<Var<'t, T>> {
        let Arch::Vit(vit) = &self.arch else {
            return Err(Error::Contract(format!("{} has no token sequence", self.spec.family.as_str())));
        };
        let b = self.check_images(&images)?;
        let patches = vit.patch.forward(p, images)?;
        let tokens = p[vit.tokens].expand(b)?;
        let mut x = Var::concat(&[tokens, patches], 1)?.add_broadcast(&p[vit.pos])?;
        for block in &vit.blocks {
            x = block.forward(p, x)?;
        }
        vit.norm.forward(p, x)
    }

    /// `[class, conv, inv, patches] + pos → blocks → LN → one linear head
    /// per token`. The single-token baseline fills `class` only.
    pub fn forward_civt<'t>(&self, p: &Bound<'t, T>, images: Var<'t, T>) -> Result<TokenVars<'t, T>> {
        let Arch::Vit(vit) = &self.arch else {
            return Err(Error::Contract(format!("forward_civt called on {}", self.spec.family.as_str())));
        };
        let b = images.shape()[0];
        let x = self.transformer_features(p, images)?;
        let d = self.spec.width;
        let mut outs = vit
            .heads
            .iter()
            .enumerate()
            .map(|(t, head)| head.forward(p, x.slice(1, t, 1)?.reshape(&[b, d])?))
            .collect::<Result<Vec<_>>>()?
            .into_iter();
        Ok(TokenVars { class: outs.next().expect("at least one token"), conv: outs.next(), inv: outs.next() })
    }

    /// Residual CNN/INN: stem, stages with stride-2 transitions, global
    /// average pool, linear head.
    pub fn forward_teacher<'t>(&self, p: &Bound<'t, T>, images: Var<'t, T>) -> Result<Var<'t, T>> {
        let Arch::ResNet(net) = &self.arch else {
            return Err(Error::Contract(format!("forward_teacher called on {}", self.spec.family.as_str())));
        };
        let b = images.shape()[0];
        let mut x = net.stem.1.forward(p, net.stem.0.forward(p, images)?)?.relu()?;
        for block in net.stages.iter().flatten() {
            let h = block.reduce.1.forward(p, block.reduce.0.forward(p, x)?)?.relu()?;
            let h = match &block.spatial.0 {
                SpatialOp::Conv(c) => c.forward(p, h)?,
                SpatialOp::Inv(i) => i.forward(p, h)?,
            };
            let h = block.spatial.1.forward(p, h)?.relu()?;
            let h = block.expand.1.forward(p, block.expand.0.forward(p, h)?)?;
            let skip = match &block.shortcut {
                Some((conv, norm)) => norm.forward(p, conv.forward(p, x)?)?,
                None => x,
            };
            x = h.add(&skip)?.relu()?;
        }
        let s = x.shape();
        let pooled = x.reshape(&[b, s[1], s[2] * s[3]])?.mean_axis(2)?;
        net.head.forward(p, pooled)
    }

    /// Residual stream of the mixer after all blocks, `[B, M, d]`.
    pub fn mixer_trunk<'t>(&self, p: &Bound<'t, T>, images: Var<'t, T>) -> Result<Var<'t, T>> {
        let Arch::Mixer(mixer) = &self.arch else {
            return Err(Error::Contract(format!("mixer_trunk called on {}", self.spec.family.as_str())));
        };
        let mut x = mixer.patch.forward(p, images)?;
        for block in &mixer.blocks {
            let y = block.ln1.forward(p, x)?.permute(&[0, 2, 1])?;
            let y = block.token_mlp.forward(p, y)?.permute(&[0, 2, 1])?;
            x = x.add(&y)?;
            x = x.add(&block.channel_mlp.forward(p, block.ln2.forward(p, x)?)?)?;
        }
        Ok(x)
    }

    /// Patch embed → token-mixing and channel-mixing MLP blocks → LN →
    /// mean pool over patches → head.
    pub fn forward_mixer<'t>(&self, p: &Bound<'t, T>, images: Var<'t, T>) -> Result<Var<'t, T>> {
        let Arch::Mixer(mixer) = &self.arch else {
            return Err(Error::Contract(format!("forward_mixer called on {}", self.spec.family.as_str())));
        };
        let x = self.mixer_trunk(p, images)?;
        let pooled = mixer.norm.forward(p, x)?.mean_axis(1)?;
        mixer.head.forward(p, pooled)
    }

    /// Evaluation-mode logits for a batch of images.
    pub fn logits(&self, images: &Tensor<T>) -> Result<TokenLogits<T>> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let out = self.forward(&p, tape.constant(images.clone()))?;
        Ok(out.values())
    }

    /// Class prediction per image from the class token alone.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Vec<usize>> {
        Ok(predict_from_logits(&self.logits(images)?.class))
    }

    /// Parameter counts grouped by top-level module, in build order.
    pub fn param_summary(&self) -> Vec<(String, usize)> {
        param_summary(self.params.iter().map(|p| (p.name.as_str(), p.value.numel())))
    }
}

/// Row-wise argmax of `[B, classes]` logits, lowest index on ties.
pub fn predict_from_logits<T: Float>(logits: &Tensor<T>) -> Vec<usize> {
    let k = *logits.shape().last().unwrap_or(&1);
    logits.data().chunks(k).map(argmax).collect()
}

/// Groups `(name, count)` pairs by module prefix: the first name segment
/// plus any directly following numeric indices (`blocks.3`, `stages.1.0`).
pub fn param_summary<'a>(entries: impl Iterator<Item = (&'a str, usize)>) -> Vec<(String, usize)> {
    let mut out: Vec<(String, usize)> = Vec::new();
    for (name, count) in entries {
        let mut parts = name.split('.');
        let mut module = parts.next().unwrap_or_default().to_string();
        for part in parts {
            if part.chars().all(|c| c.is_ascii_digit()) {
                module.push('.');
                module.push_str(part);
            } else {
                break;
            }
        }
        match out.last_mut() {
            Some((m, n)) if *m == module => *n += count,
            _ => out.push((module, count)),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invalid_specs_list_constraints() {
        let mut spec = ModelSpec::desk_ti();
        spec.heads = 5;
        spec.patch = 5;
        let err = spec.validate().unwrap_err().to_string();
        assert!(err.contains("heads (5) must divide width (192)"), "{err}");
        assert!(err.contains("patch (5) must divide"), "{err}");
        let mut t = ModelSpec::desk_teacher(Family::Inn);
        t.inv_kernel = 4;
        assert!(t.validate().unwrap_err().to_string().contains("inv_kernel"));
    }

    #[test]
    fn sequence_lengths() {
        assert_eq!(ModelSpec::desk_ti().sequence_len().unwrap(), 67);
        assert_eq!(ModelSpec::civt_ti().sequence_len().unwrap(), 199);
        assert_eq!(ModelSpec::desk_ti().with_family(Family::Transformer1Tok).sequence_len().unwrap(), 65);
    }

    #[test]
    fn predict_ties_low() {
        let l = Tensor::<f64>::from_f64(&[2, 3], &[0.1, 2.0, -1.0, 5.0, 5.0, 1.0]).unwrap();
        assert_eq!(predict_from_logits(&l), vec![1, 0]);
    }

    #[test]
    fn summary_groups_by_prefix() {
        let s = param_summary([("tokens", 3), ("blocks.0.attn.w_q", 4), ("blocks.0.ln1.gain", 2), ("blocks.1.x", 1), ("head", 5)].into_iter());
        assert_eq!(s, vec![("tokens".into(), 3), ("blocks.0".into(), 6), ("blocks.1".into(), 1), ("head".into(), 5)]);
    }
}
