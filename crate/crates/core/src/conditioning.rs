//! The image-prompt branch: masked reference stacked with the full reference,
//! a shallow adapter, the shared VAE encoder, and a control copy of the
//! U-Net encoder whose outputs reach the backbone through zero-initialised
//! 1x1 convolutions. Also the toy caption encoder.

use std::collections::BTreeMap;

use maskctl_tensor::{Bound, Float, Graph, ParamStore, Tensor, Var};

use crate::diffusion_core::{embedding_graph, encode_features, is_encoder_tensor, UNetConfig, UNetParams};
use crate::error::{CoreError, Result};
use crate::latent_codec::{encode_graph, VaeParams};
use crate::raster::{apply_mask, ensure_same_size, Image, Mask};
use crate::seeding::{rng_for, stream};
use crate::synthetic_data::caption_vocabulary;

// ----- text encoder ----------------------------------------------------------

pub const WORD_DIM: usize = 32;

/// Mean of word embeddings followed by a linear projection. Word order is
/// ignored, so permuted captions embed identically.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoderParams {
    pub vocabulary: Vec<String>,
    pub store: ParamStore<f32>,
}

impl TextEncoderParams {
    pub fn init(out_dim: usize, seed: u64) -> Self {
        let vocabulary: Vec<String> = caption_vocabulary().into_iter().map(String::from).collect();
        let mut rng = rng_for(seed, stream::INIT, 3);
        let mut store = ParamStore::new();
        store.insert("embed", Tensor::randn(&[vocabulary.len(), WORD_DIM], &mut rng));
        store.init_linear("proj", out_dim, WORD_DIM, &mut rng);
        Self { vocabulary, store }
    }

    pub fn out_dim(&self) -> usize {
        self.store.get("proj.bias").map(|b| b.len()).unwrap_or(0)
    }

    /// Word ids; every unknown word is listed in the error.
    pub fn tokenize(&self, caption: &str) -> Result<Vec<usize>> {
        let mut ids = Vec::new();
        let mut unknown = Vec::new();
        for w in caption.split_whitespace() {
            match self.vocabulary.iter().position(|v| v == w) {
                Some(i) => ids.push(i),
                None => unknown.push(w.to_string()),
            }
        }
        if !unknown.is_empty() {
            return Err(CoreError::Vocabulary(unknown));
        }
        if ids.is_empty() {
            return Err(CoreError::Argument("caption has no words".into()));
        }
        Ok(ids)
    }
}

/// `[N, out_dim]` embeddings of tokenised captions; `p` reads `embed` and
/// `proj.*`.
pub fn text_encode_graph<T: Float>(p: &Bound<T>, captions: &[Vec<usize>]) -> Result<Var> {
    let g = p.graph();
    let embed = p.get("embed")?;
    let vocab = g.shape(embed)[0];
    let mut pool = vec![T::zero(); captions.len() * vocab];
    for (i, ids) in captions.iter().enumerate() {
        let w = T::of(1.0 / ids.len() as f64);
        for &id in ids {
            pool[i * vocab + id] += w;
        }
    }
    let pool = g.constant(Tensor::new(&[captions.len(), vocab], pool)?);
    let mean = g.matmul(pool, embed)?;
    Ok(p.linear(mean, "proj")?)
}

pub fn text_encode(caption: &str, params: &TextEncoderParams) -> Result<Tensor<f32>> {
    let ids = params.tokenize(caption)?;
    let g = Graph::new();
    let p = Bound::new(&g, &params.store, false);
    let out = text_encode_graph(&p, &[ids])?;
    Ok((*g.value(out)).clone())
}

// ----- condition stack and adapter ------------------------------------------

/// What the first three stack channels carry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    /// `reference * mask` (the masked object).
    WithMask,
    /// The raw reference again, so both variants have the same input arity.
    DuplicateReference,
}

impl MaskMode {
    pub fn name(self) -> &'static str {
        match self {
            MaskMode::WithMask => "with_mask",
            MaskMode::DuplicateReference => "no_mask",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "with_mask" => Ok(MaskMode::WithMask),
            "no_mask" => Ok(MaskMode::DuplicateReference),
            other => Err(CoreError::InvalidData(format!("unknown mask mode `{other}`"))),
        }
    }
}

/// Six-channel image prompt, `[N, 6, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionStack(pub Tensor<f32>);

impl ConditionStack {
    pub fn build(pairs: &[(&Image, &Mask)], mode: MaskMode) -> Result<Self> {
        let first = pairs
            .first()
            .ok_or_else(|| CoreError::Argument("empty condition batch".into()))?;
        let (w, h) = first.0.size();
        let plane = w * h;
        let mut data = Vec::with_capacity(pairs.len() * 6 * plane);
        for (image, mask) in pairs {
            ensure_same_size("condition stack", image.size(), mask.size())?;
            ensure_same_size("condition stack", image.size(), (w, h))?;
            match mode {
                MaskMode::WithMask => data.extend_from_slice(apply_mask(image, mask)?.data()),
                MaskMode::DuplicateReference => data.extend_from_slice(image.data()),
            }
            data.extend_from_slice(image.data());
        }
        Ok(Self(Tensor::new(&[pairs.len(), 6, h, w], data)?))
    }
}

/// The adapter on a graph: 3x3 conv 6->16, SiLU, 3x3 conv 16->3, sigmoid.
pub fn adapter_graph<T: Float>(p: &Bound<T>, stack: Var) -> Result<Var> {
    let g = p.graph();
    let h = g.silu(p.conv(stack, "conv1", 1, 1)?);
    Ok(g.sigmoid(p.conv(h, "conv2", 1, 1)?))
}

/// Condition latent: adapter output encoded by the frozen VAE (mean).
pub fn condition_graph<T: Float>(adapter: &Bound<T>, vae: &Bound<T>, stack: Var) -> Result<Var> {
    let mapped = adapter_graph(adapter, stack)?;
    Ok(encode_graph(vae, mapped)?.0)
}

// ----- control branch --------------------------------------------------------

pub const ADAPTER_PREFIX: &str = "adapter/";
pub const CONTROL_PREFIX: &str = "controlnet/";
pub const HINT_WIDTH: usize = 32;

/// Trainable conditioning tensors: `adapter/*` and `controlnet/*` in one
/// store, plus the stack mode they were built for.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlParams {
    pub mask_mode: MaskMode,
    pub store: ParamStore<f32>,
}

/// 1x1 convolution `weight [c, c, 1, 1]`, `bias [c]`.
pub fn zero_conv_forward(features: &Tensor<f32>, weight: &Tensor<f32>, bias: &Tensor<f32>) -> Result<Tensor<f32>> {
    let g = Graph::new();
    let out = g.conv2d(
        g.constant(features.clone()),
        g.constant(weight.clone()),
        Some(g.constant(bias.clone())),
        1,
        0,
    )?;
    Ok((*g.value(out)).clone())
}

/// Adapter with random weights; control encoder copied bit-for-bit from the
/// backbone; a randomly initialised hint projection; all zero convolutions
/// exactly 0.
pub fn init_controlnet_from_backbone(backbone: &UNetParams, mask_mode: MaskMode, seed: u64) -> ControlParams {
    let cfg = &backbone.config;
    let mut rng = rng_for(seed, stream::INIT, 4);
    let mut store = ParamStore::new();
    store.init_conv(&format!("{ADAPTER_PREFIX}conv1"), 16, 6, 3, &mut rng);
    store.init_conv(&format!("{ADAPTER_PREFIX}conv2"), 3, 16, 3, &mut rng);
    for (name, t) in backbone.store.iter() {
        if is_encoder_tensor(name) {
            store.insert(format!("{CONTROL_PREFIX}{name}"), t.clone());
        }
    }
    store.init_conv(&format!("{CONTROL_PREFIX}hint.conv1"), HINT_WIDTH, cfg.latent_channels, 3, &mut rng);
    store.init_conv(&format!("{CONTROL_PREFIX}hint.conv2"), cfg.base_width, HINT_WIDTH, 3, &mut rng);
    for (i, (ch, _)) in cfg.injection_geometry().into_iter().enumerate() {
        store.init_zero_conv(&format!("{CONTROL_PREFIX}zero.{i}"), ch, ch);
    }
    ControlParams { mask_mode, store }
}

/// Control residuals, one per injection point. `p` is bound with the
/// `controlnet/` prefix.
pub fn controlnet_graph<T: Float>(
    p: &Bound<T>,
    cfg: &UNetConfig,
    z_t: Var,
    ts: &[usize],
    text: Var,
    cond: Var,
) -> Result<Vec<Var>> {
    let g = p.graph();
    let (zs, cs) = (g.shape(z_t), g.shape(cond));
    if zs != cs {
        return Err(CoreError::Shape(format!(
            "condition latent {cs:?} does not match noisy latent {zs:?}"
        )));
    }
    let emb = embedding_graph(p, cfg, ts, text)?;
    let hint = g.silu(p.conv(cond, "hint.conv1", 1, 1)?);
    let hint = p.conv(hint, "hint.conv2", 1, 1)?;
    let feats = encode_features(p, cfg, z_t, emb, Some(hint))?;
    feats
        .into_iter()
        .enumerate()
        .map(|(i, f)| p.conv(f, &format!("zero.{i}"), 1, 0).map_err(CoreError::from))
        .collect()
}

/// Plain-value control pass.
pub fn controlnet_forward(
    z_t: &Tensor<f32>,
    ts: &[usize],
    text: &Tensor<f32>,
    cond: &Tensor<f32>,
    control: &ControlParams,
    cfg: &UNetConfig,
) -> Result<Vec<Tensor<f32>>> {
    let g = Graph::new();
    let p = Bound::prefixed(&g, &control.store, false, CONTROL_PREFIX);
    let rs = controlnet_graph(
        &p,
        cfg,
        g.constant(z_t.clone()),
        ts,
        g.constant(text.clone()),
        g.constant(cond.clone()),
    )?;
    Ok(rs.into_iter().map(|v| (*g.value(v)).clone()).collect())
}

/// Condition latents for a batch of `(reference, mask)` pairs.
pub fn assemble_condition_batch(
    pairs: &[(&Image, &Mask)],
    control: &ControlParams,
    vae: &VaeParams,
) -> Result<Tensor<f32>> {
    let stack = ConditionStack::build(pairs, control.mask_mode)?;
    let g = Graph::new();
    let a = Bound::prefixed(&g, &control.store, false, ADAPTER_PREFIX);
    let v = Bound::new(&g, &vae.store, false);
    let out = condition_graph(&a, &v, g.constant(stack.0))?;
    Ok((*g.value(out)).clone())
}

pub fn assemble_condition(
    reference: &Image,
    mask: &Mask,
    control: &ControlParams,
    vae: &VaeParams,
) -> Result<Tensor<f32>> {
    assemble_condition_batch(&[(reference, mask)], control, vae)
}

impl ControlParams {
    /// Tensor names per component, for reporting.
    pub fn component_names(&self) -> BTreeMap<&'static str, Vec<String>> {
        let mut out: BTreeMap<&'static str, Vec<String>> = BTreeMap::new();
        for name in self.store.names() {
            let key = if name.starts_with(ADAPTER_PREFIX) { "adapter" } else { "controlnet" };
            out.entry(key).or_default().push(name.clone());
        }
        out
    }
}
