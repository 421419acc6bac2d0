//! A small Vision Transformer whose attention projection is an injectable slot.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{trunc_normal, ParamId, ParamStore, Seeds, StreamRng, Tape, Tensor, Var, INIT_STD};

pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub depth: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub drop_path_rate: f64,
}

impl ViTConfig {
    /// 28x28 single-channel images, patch 7, 4 blocks of width 64.
    pub fn tiny() -> Self {
        Self {
            image_size: 28,
            patch_size: 7,
            channels: 1,
            depth: 4,
            embed_dim: 64,
            num_heads: 4,
            mlp_ratio: 4,
            drop_path_rate: 0.25,
        }
    }

    /// ViT-B/8 on 72x72 inputs.
    pub fn vit_b8() -> Self {
        Self {
            image_size: 72,
            patch_size: 8,
            channels: 3,
            depth: 12,
            embed_dim: 768,
            num_heads: 12,
            mlp_ratio: 4,
            drop_path_rate: 0.25,
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "vit-b8" => Ok(Self::vit_b8()),
            other => Err(Error::Input(format!("unknown model profile `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::Input(format!(
                "embed_dim {} is not a multiple of {} heads",
                self.embed_dim, self.num_heads
            )));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Input(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.depth == 0 || self.channels == 0 || self.mlp_ratio == 0 {
            return Err(Error::Input("depth, channels and mlp_ratio must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return Err(Error::Input(format!("drop path rate {} outside [0, 1)", self.drop_path_rate)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn num_patches(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    /// Sequence length including the class token.
    pub fn num_tokens(&self) -> usize {
        1 + self.num_patches()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinearParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl LinearParams {
    /// Truncated-normal weights `[fan_in, fan_out]`, zero bias.
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut StreamRng,
        scratch: bool,
    ) -> Result<Self> {
        let w = trunc_normal(&[fan_in, fan_out], INIT_STD, rng);
        Self::with_weights(store, name, w, scratch)
    }

    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, scratch: bool) -> Result<Self> {
        Self::with_weights(store, name, Tensor::zeros(&[fan_in, fan_out]), scratch)
    }

    fn with_weights(store: &mut ParamStore, name: &str, w: Tensor, scratch: bool) -> Result<Self> {
        let fan_out = w.shape()[1];
        let b = Tensor::zeros(&[fan_out]);
        let (w, b) = if scratch {
            (store.add_scratch(&format!("{name}.w"), w, true)?, store.add_scratch(&format!("{name}.b"), b, true)?)
        } else {
            (store.add(&format!("{name}.w"), w, true)?, store.add(&format!("{name}.b"), b, true)?)
        };
        Ok(Self { w, b })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.linear(x, w, Some(b))
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }

    /// Re-draws the weights in place and zeroes the bias.
    pub fn reinit(&self, store: &mut ParamStore, rng: &mut StreamRng) {
        let shape = store.tensor(self.w).shape().to_vec();
        store.get_mut(self.w).tensor = trunc_normal(&shape, INIT_STD, rng);
        let n = store.tensor(self.b).len();
        store.get_mut(self.b).tensor = Tensor::zeros(&[n]);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl NormParams {
    pub fn init(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(&format!("{name}.gamma"), Tensor::full(&[dim], 1.0), true)?,
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(&[dim]), true)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layernorm(x, g, b, LN_EPS)
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.gamma, self.beta]
    }
}

/// Everything in a block except the projection slot.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockWeights {
    pub ln1: NormParams,
    pub query: LinearParams,
    pub key: LinearParams,
    pub value: LinearParams,
    pub ln2: NormParams,
    pub mlp_up: LinearParams,
    pub mlp_down: LinearParams,
}

impl BlockWeights {
    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = Vec::new();
        v.extend(self.ln1.ids());
        v.extend(self.query.ids());
        v.extend(self.key.ids());
        v.extend(self.value.ids());
        v.extend(self.ln2.ids());
        v.extend(self.mlp_up.ids());
        v.extend(self.mlp_down.ids());
        v
    }
}

/// The shared trunk: patch embedding, class token, positions, blocks, final norm.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Backbone {
    pub config: ViTConfig,
    pub patch: LinearParams,
    pub cls: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<BlockWeights>,
    pub norm: NormParams,
}

impl Backbone {
    /// Initializes the trunk together with one projection per block.
    pub fn init(config: ViTConfig, store: &mut ParamStore, seeds: &Seeds) -> Result<(Self, Vec<LinearParams>)> {
        config.validate()?;
        let d = config.embed_dim;
        let mut rng = seeds.stream("init/backbone");
        let patch = LinearParams::init(store, "patch_embed", config.patch_dim(), d, &mut rng, false)?;
        let cls = store.add("cls_token", trunc_normal(&[d], INIT_STD, &mut rng), true)?;
        let pos = store.add("pos_embed", trunc_normal(&[config.num_tokens(), d], INIT_STD, &mut rng), true)?;
        let mut blocks = Vec::with_capacity(config.depth);
        let mut projections = Vec::with_capacity(config.depth);
        let hidden = d * config.mlp_ratio;
        for l in 0..config.depth {
            let p = format!("blocks.{l}");
            blocks.push(BlockWeights {
                ln1: NormParams::init(store, &format!("{p}.ln1"), d)?,
                query: LinearParams::init(store, &format!("{p}.attn.query"), d, d, &mut rng, false)?,
                key: LinearParams::init(store, &format!("{p}.attn.key"), d, d, &mut rng, false)?,
                value: LinearParams::init(store, &format!("{p}.attn.value"), d, d, &mut rng, false)?,
                ln2: NormParams::init(store, &format!("{p}.ln2"), d)?,
                mlp_up: LinearParams::init(store, &format!("{p}.mlp.up"), d, hidden, &mut rng, false)?,
                mlp_down: LinearParams::init(store, &format!("{p}.mlp.down"), hidden, d, &mut rng, false)?,
            });
            projections.push(LinearParams::init(store, &format!("bank.{l}.0.proj"), d, d, &mut rng, false)?);
        }
        let norm = NormParams::init(store, "norm", d)?;
        Ok((Self { config, patch, cls, pos, blocks, norm }, projections))
    }

    /// All trunk parameters (no projections, no heads).
    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = Vec::new();
        v.extend(self.patch.ids());
        v.push(self.cls);
        v.push(self.pos);
        for b in &self.blocks {
            v.extend(b.ids());
        }
        v.extend(self.norm.ids());
        v
    }
}

/// Splits `[b, c, H, W]` images into `[b, n, c*p*p]` non-overlapping patches.
pub fn patchify(images: &Tensor, config: &ViTConfig) -> Result<Tensor> {
    let s = images.shape();
    let (c, hw, p) = (config.channels, config.image_size, config.patch_size);
    if s.len() != 4 || s[1] != c || s[2] != hw || s[3] != hw {
        return Err(Error::Input(format!("expected images [b, {c}, {hw}, {hw}], got {s:?}")));
    }
    let b = s[0];
    let g = hw / p;
    let pd = config.patch_dim();
    let src = images.data();
    let mut out = vec![0.0; b * g * g * pd];
    for bi in 0..b {
        for gy in 0..g {
            for gx in 0..g {
                let dst = &mut out[((bi * g + gy) * g + gx) * pd..][..pd];
                let mut k = 0;
                for ch in 0..c {
                    for py in 0..p {
                        let row = ((bi * c + ch) * hw + gy * p + py) * hw + gx * p;
                        dst[k..k + p].copy_from_slice(&src[row..row + p]);
                        k += p;
                    }
                }
            }
        }
    }
    Tensor::new(&[b, g * g, pd], out)
}

/// Linear patch projection, leading class token, additive positions.
/// `cls` overrides the trunk's class token (task tokens).
pub fn patch_embed(
    tape: &mut Tape,
    store: &ParamStore,
    backbone: &Backbone,
    images: &Tensor,
    cls: Option<ParamId>,
) -> Result<Var> {
    let patches = tape.constant(patchify(images, &backbone.config)?);
    let emb = backbone.patch.forward(tape, store, patches)?;
    let cls = tape.param(store, cls.unwrap_or(backbone.cls));
    let pos = tape.param(store, backbone.pos);
    tape.tokens(emb, cls, pos)
}

/// Multi-head self-attention without the output projection.
pub fn mhsa(tape: &mut Tape, store: &ParamStore, block: &BlockWeights, x_norm: Var, heads: usize) -> Result<Var> {
    let q = block.query.forward(tape, store, x_norm)?;
    let k = block.key.forward(tape, store, x_norm)?;
    let v = block.value.forward(tape, store, x_norm)?;
    tape.attention(q, k, v, heads)
}

/// What occupies a block's projection slot.
pub trait ProjectionSlot {
    /// `None` means the attention branch is skipped entirely.
    fn apply(&self, tape: &mut Tape, store: &ParamStore, u: Var) -> Result<Option<Var>>;
}

impl ProjectionSlot for LinearParams {
    fn apply(&self, tape: &mut Tape, store: &ParamStore, u: Var) -> Result<Option<Var>> {
        self.forward(tape, store, u).map(Some)
    }
}

/// Per-sample stochastic depth: a residual branch is zeroed with probability
/// `rate` and otherwise scaled by `1 / (1 - rate)`.
pub struct DropPath<'a> {
    pub rate: f64,
    pub rng: &'a mut StreamRng,
}

impl DropPath<'_> {
    fn scales(&mut self, batch: usize) -> Vec<f64> {
        let keep = 1.0 - self.rate;
        (0..batch)
            .map(|_| if self.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect()
    }
}

pub struct BlockOutput {
    pub y: Var,
    /// Slot output before the residual add; `None` for a skipped branch.
    pub slot_out: Option<Var>,
}

/// `z = x + slot(mhsa(ln1(x)))`, `y = z + down(gelu(up(ln2(z))))`.
pub fn block_forward(
    tape: &mut Tape,
    store: &ParamStore,
    block: &BlockWeights,
    heads: usize,
    x: Var,
    slot: &dyn ProjectionSlot,
    mut drop_path: Option<&mut DropPath<'_>>,
) -> Result<BlockOutput> {
    let batch = tape.value(x).shape()[0];
    let xn = block.ln1.forward(tape, store, x)?;
    let u = mhsa(tape, store, block, xn, heads)?;
    let slot_out = slot.apply(tape, store, u)?;
    let z = match slot_out {
        Some(s) => {
            let s = match drop_path.as_deref_mut() {
                Some(dp) => {
                    let sc = dp.scales(batch);
                    tape.scale_samples(s, sc)?
                }
                None => s,
            };
            tape.add(x, s)?
        }
        None => x,
    };
    let y = ffn_residual(tape, store, block, z, drop_path)?;
    Ok(BlockOutput { y, slot_out })
}

/// Second half of a block: `z + down(gelu(up(ln2(z))))`.
pub fn ffn_residual(
    tape: &mut Tape,
    store: &ParamStore,
    block: &BlockWeights,
    z: Var,
    drop_path: Option<&mut DropPath<'_>>,
) -> Result<Var> {
    let batch = tape.value(z).shape()[0];
    let zn = block.ln2.forward(tape, store, z)?;
    let h = block.mlp_up.forward(tape, store, zn)?;
    let h = tape.gelu(h);
    let f = block.mlp_down.forward(tape, store, h)?;
    let f = match drop_path {
        Some(dp) => {
            let sc = dp.scales(batch);
            tape.scale_samples(f, sc)?
        }
        None => f,
    };
    tape.add(z, f)
}

/// Token 0 of each sequence.
pub fn extract_class_token(tape: &mut Tape, y: Var) -> Result<Var> {
    tape.first_tokens(y)
}

pub struct Forward {
    /// Final normalized class tokens `[b, d]`.
    pub features: Var,
    /// Per-block slot outputs (pre-residual), `None` where skipped.
    pub slot_outputs: Vec<Option<Var>>,
}

/// Runs the full trunk with one slot per block.
pub fn forward_features(
    tape: &mut Tape,
    store: &ParamStore,
    backbone: &Backbone,
    images: &Tensor,
    slots: &[&dyn ProjectionSlot],
    cls: Option<ParamId>,
    mut drop_path: Option<&mut DropPath<'_>>,
) -> Result<Forward> {
    if slots.len() != backbone.blocks.len() {
        return Err(Error::Dimension(format!("{} slots for {} blocks", slots.len(), backbone.blocks.len())));
    }
    let heads = backbone.config.num_heads;
    let mut x = patch_embed(tape, store, backbone, images, cls)?;
    let mut slot_outputs = Vec::with_capacity(slots.len());
    for (block, slot) in backbone.blocks.iter().zip(slots) {
        let out = block_forward(tape, store, block, heads, x, *slot, drop_path.as_deref_mut())?;
        x = out.y;
        slot_outputs.push(out.slot_out);
    }
    let xn = backbone.norm.forward(tape, store, x)?;
    let features = extract_class_token(tape, xn)?;
    Ok(Forward { features, slot_outputs })
}

#[cfg(test)]
mod tests;
