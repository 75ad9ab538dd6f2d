//! Shape-guided text-to-trajectory flow model: a transformer over latent
//! tokens `[num_c, n, c]` with chunk-axis rotary attention, token-axis
//! attention, text cross-attention and timestep-modulated residual gates,
//! plus the rectified-flow loss and an Euler sampler with classifier-free
//! guidance.

mod sample;
mod train;

pub use sample::{
    cfg_velocity, euler_sample, generate_animation, noisy_latent, sample_timestep, timestep_cdf, FlowSampler,
};
pub use train::{rf_loss, rf_train_step, FlowDraw, FlowExample};

use crate::config::{parse_value, Configurable, KeyValues};
use crate::error::{Error, Result};
use crate::nn::{apply_maps, attention_maps, Bound, Builder, Linear, Mlp, ParamId, ParamSet, LN_EPS};
use crate::tensor::{Graph, Rng, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct SgttConfig {
    pub blocks: usize,
    pub dim: usize,
    pub heads: usize,
    /// Euler steps at sampling time.
    pub steps: usize,
    /// Guidance scale `ζ`.
    pub guidance: f64,
    pub text_dim: usize,
    /// Latent channels `c` of the paired VAE.
    pub latent: usize,
    /// Width of the sampled vertex features from the VAE encoder.
    pub shape_dim: usize,
    /// Probability of swapping the text for the null embedding in training.
    pub cond_drop: f64,
    pub rope_base: f64,
    /// Multiplier on `t` before the sinusoidal timestep features.
    pub time_scale: f64,
    pub zero_output: bool,
}

impl Default for SgttConfig {
    fn default() -> Self {
        SgttConfig {
            blocks: 2,
            dim: 32,
            heads: 1,
            steps: 64,
            guidance: 3.0,
            text_dim: 16,
            latent: 8,
            shape_dim: 40,
            cond_drop: 0.1,
            rope_base: 10_000.0,
            time_scale: 1000.0,
            zero_output: false,
        }
    }
}

impl Configurable for SgttConfig {
    fn set_key(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "blocks" => self.blocks = parse_value(key, v)?,
            "dim" => self.dim = parse_value(key, v)?,
            "heads" => self.heads = parse_value(key, v)?,
            "steps" => self.steps = parse_value(key, v)?,
            "guidance" => self.guidance = parse_value(key, v)?,
            "text_dim" => self.text_dim = parse_value(key, v)?,
            "latent" => self.latent = parse_value(key, v)?,
            "shape_dim" => self.shape_dim = parse_value(key, v)?,
            "cond_drop" => self.cond_drop = parse_value(key, v)?,
            "rope_base" => self.rope_base = parse_value(key, v)?,
            "time_scale" => self.time_scale = parse_value(key, v)?,
            "out_init" => {
                self.zero_output = match v {
                    "zero" => true,
                    "random" => false,
                    _ => return Err(Error::Config(format!("out_init must be zero or random, got {v:?}"))),
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("blocks", self.blocks);
        kv.set("dim", self.dim);
        kv.set("heads", self.heads);
        kv.set("steps", self.steps);
        kv.set("guidance", self.guidance);
        kv.set("text_dim", self.text_dim);
        kv.set("latent", self.latent);
        kv.set("shape_dim", self.shape_dim);
        kv.set("cond_drop", self.cond_drop);
        kv.set("rope_base", self.rope_base);
        kv.set("time_scale", self.time_scale);
        kv.set("out_init", if self.zero_output { "zero" } else { "random" });
        kv
    }

    fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.steps == 0 {
            return Err(Error::Config("blocks and steps must be at least 1".into()));
        }
        if !(self.guidance >= 0.0) {
            return Err(Error::Config(format!("guidance must be non-negative, got {}", self.guidance)));
        }
        if self.dim == 0 || !self.dim.is_multiple_of(2) {
            return Err(Error::Config(format!("dim must be positive and even, got {}", self.dim)));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("dim {} is not divisible into {} heads", self.dim, self.heads)));
        }
        if self.text_dim == 0 || self.latent == 0 || self.shape_dim == 0 {
            return Err(Error::Config("text_dim, latent and shape_dim must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.cond_drop) {
            return Err(Error::Config(format!("cond_drop must lie in [0, 1], got {}", self.cond_drop)));
        }
        Ok(())
    }
}

/// Conditioning for one sample: sampled vertex features `[n, shape_dim]`
/// and text tokens `[m, text_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowCondition {
    pub shape: Tensor,
    pub text: Tensor,
}

#[derive(Clone, Copy, Debug)]
struct Attn {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl Attn {
    fn new(b: &mut Builder, name: &str, d: usize) -> Result<Self> {
        Ok(Attn {
            q: b.linear(&format!("{name}.q"), d, d, false)?,
            k: b.linear(&format!("{name}.k"), d, d, false)?,
            v: b.linear(&format!("{name}.v"), d, d, true)?,
            o: b.linear(&format!("{name}.o"), d, d, true)?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
struct Block {
    /// `silu(temb) → [β, α, g] × 4 stages`, zero at init.
    modulation: Linear,
    temporal: Attn,
    spatial: Attn,
    cross: Attn,
    ffn: Mlp,
}

/// Residual stage order inside a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Temporal = 0,
    Spatial = 1,
    Cross = 2,
    Ffn = 3,
}

pub struct SgttFlow {
    pub cfg: SgttConfig,
    pub params: ParamSet,
    latent_in: Linear,
    shape_in: Linear,
    text_in: Linear,
    null_text: ParamId,
    time_mlp: Mlp,
    blocks: Vec<Block>,
    final_mod: Linear,
    out: Linear,
}

impl std::fmt::Debug for SgttFlow {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SgttFlow")
            .field("cfg", &self.cfg)
            .field("parameters", &self.params.num_values())
            .finish()
    }
}

impl SgttFlow {
    pub fn new(cfg: SgttConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let mut rng = Rng::new(seed);
        let mut b = Builder { params: &mut params, rng: &mut rng };
        let d = cfg.dim;
        let latent_in = b.linear("flow.latent_in", cfg.latent, d, true)?;
        let shape_in = b.linear("flow.shape_in", cfg.shape_dim, d, true)?;
        let text_in = b.linear("flow.text_in", cfg.text_dim, d, true)?;
        let null = b.rng.normal_tensor([1, cfg.text_dim]);
        let null_text = b.tensor("flow.null_text", null)?;
        let time_mlp = Mlp::new(&mut b, "flow.time", d, d, d)?;
        let blocks = (0..cfg.blocks)
            .map(|i| {
                let name = format!("flow.block{i}");
                Ok(Block {
                    modulation: b.zeros_linear(&format!("{name}.mod"), d, 12 * d)?,
                    temporal: Attn::new(&mut b, &format!("{name}.temporal"), d)?,
                    spatial: Attn::new(&mut b, &format!("{name}.spatial"), d)?,
                    cross: Attn::new(&mut b, &format!("{name}.cross"), d)?,
                    ffn: Mlp::new(&mut b, &format!("{name}.ffn"), d, 4 * d, d)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let final_mod = b.zeros_linear("flow.final_mod", d, 2 * d)?;
        let out = b.linear("flow.out", d, cfg.latent, true)?;
        if cfg.zero_output {
            out.zero(&mut params);
        }
        Ok(SgttFlow {
            cfg,
            params,
            latent_in,
            shape_in,
            text_in,
            null_text,
            time_mlp,
            blocks,
            final_mod,
            out,
        })
    }

    pub fn from_params(cfg: SgttConfig, params: &ParamSet) -> Result<Self> {
        let mut m = SgttFlow::new(cfg, 0)?;
        m.params.load_from(params)?;
        Ok(m)
    }

    pub fn zero_output_projection(&mut self) {
        self.out.zero(&mut self.params);
    }

    /// Zeroes the gate rows of every temporal stage, so no information
    /// crosses chunks.
    pub fn gate_off_temporal(&mut self) {
        let d = self.cfg.dim;
        let col = Stage::Temporal as usize * 3 * d + 2 * d;
        for blk in &self.blocks {
            let w = self.params.get_mut(blk.modulation.w);
            let width = 12 * d;
            for row in w.data_mut().chunks_mut(width) {
                row[col..col + d].fill(0.0);
            }
            if let Some(bias) = blk.modulation.b {
                self.params.get_mut(bias).data_mut()[col..col + d].fill(0.0);
            }
        }
    }

    pub fn null_text(&self) -> &Tensor {
        self.params.get(self.null_text)
    }

    /// The learned null-text variable on a bound graph.
    pub fn null_text_var(&self, p: &Bound) -> Var {
        p.var(self.null_text)
    }

    fn modulate(&self, g: &Graph, x: Var, shift: Var, scale: Var) -> Result<Var> {
        let xn = g.layer_norm(x, LN_EPS)?;
        g.add_bcast(g.mul_bcast(xn, g.add_scalar(scale, 1.0)?)?, shift)
    }

    /// Timestep embedding `[dim]`.
    pub fn time_embedding_vars(&self, g: &Graph, p: &Bound, t: f64) -> Result<Var> {
        let s = crate::nn::sinusoid(t * self.cfg.time_scale, self.cfg.dim, 10_000.0);
        self.time_mlp.forward(g, p, g.constant(s))
    }

    /// Token embedding `[num_c, n, dim]`: projected latents plus projected
    /// shape features added to every chunk.
    pub fn embed_vars(&self, g: &Graph, p: &Bound, z: Var, shape: Var) -> Result<Var> {
        let zs = g.shape(z);
        let ss = g.shape(shape);
        if zs.len() != 3 || zs[2] != self.cfg.latent || ss.len() != 2 || ss[0] != zs[1] {
            return Err(Error::dim("sgtt_embed", format!("latent {zs:?} with shape features {ss:?}")));
        }
        g.add_bcast(self.latent_in.forward(g, p, z)?, self.shape_in.forward(g, p, shape)?)
    }

    /// Runs every block on tokens `x` (`[num_c, n, dim]`) given the timestep
    /// embedding and projected text `[m, dim]`.
    pub fn blocks_vars(&self, g: &Graph, p: &Bound, mut x: Var, temb: Var, text: Var) -> Result<Var> {
        let d = self.cfg.dim;
        let heads = self.cfg.heads;
        let c = g.silu(temb)?;
        for blk in &self.blocks {
            let mods = blk.modulation.forward(g, p, c)?;
            let part = |stage: Stage, k: usize| g.slice_last(mods, (stage as usize * 3 + k) * d, (stage as usize * 3 + k + 1) * d);
            let gated = |x: Var, y: Var, stage: Stage| -> Result<Var> { g.add(x, g.mul_bcast(y, part(stage, 2)?)?) };

            let h = self.modulate(g, x, part(Stage::Temporal, 0)?, part(Stage::Temporal, 1)?)?;
            let ht = g.swap01(h)?;
            let a = &blk.temporal;
            let q = g.rotary(a.q.forward(g, p, ht)?, self.cfg.rope_base)?;
            let k = g.rotary(a.k.forward(g, p, ht)?, self.cfg.rope_base)?;
            let maps = attention_maps(g, q, k, heads, None)?;
            let y = a.o.forward(g, p, apply_maps(g, &maps, a.v.forward(g, p, ht)?)?)?;
            x = gated(x, g.swap01(y)?, Stage::Temporal)?;

            let h = self.modulate(g, x, part(Stage::Spatial, 0)?, part(Stage::Spatial, 1)?)?;
            let a = &blk.spatial;
            let maps = attention_maps(g, a.q.forward(g, p, h)?, a.k.forward(g, p, h)?, heads, None)?;
            let y = a.o.forward(g, p, apply_maps(g, &maps, a.v.forward(g, p, h)?)?)?;
            x = gated(x, y, Stage::Spatial)?;

            let h = self.modulate(g, x, part(Stage::Cross, 0)?, part(Stage::Cross, 1)?)?;
            let s = g.shape(h);
            let flat = g.reshape(h, [s[0] * s[1], d])?;
            let a = &blk.cross;
            let maps = attention_maps(g, a.q.forward(g, p, flat)?, a.k.forward(g, p, text)?, heads, None)?;
            let y = a.o.forward(g, p, apply_maps(g, &maps, a.v.forward(g, p, text)?)?)?;
            x = gated(x, g.reshape(y, s)?, Stage::Cross)?;

            let h = self.modulate(g, x, part(Stage::Ffn, 0)?, part(Stage::Ffn, 1)?)?;
            x = gated(x, blk.ffn.forward(g, p, h)?, Stage::Ffn)?;
        }
        Ok(x)
    }

    /// Predicted velocity with the latent's shape. `text` is `[m, text_dim]`.
    /// Projects raw text embeddings `[m, text_dim]` to `[m, D]`.
    pub fn text_vars(&self, g: &Graph, p: &Bound, text: Var) -> Result<Var> {
        self.text_in.forward(g, p, text)
    }

    pub fn velocity_vars(&self, g: &Graph, p: &Bound, z: Var, t: f64, shape: Var, text: Var) -> Result<Var> {
        let x = self.embed_vars(g, p, z, shape)?;
        let temb = self.time_embedding_vars(g, p, t)?;
        let tt = self.text_vars(g, p, text)?;
        let x = self.blocks_vars(g, p, x, temb, tt)?;
        let d = self.cfg.dim;
        let fm = self.final_mod.forward(g, p, g.silu(temb)?)?;
        let h = self.modulate(g, x, g.slice_last(fm, 0, d)?, g.slice_last(fm, d, 2 * d)?)?;
        self.out.forward(g, p, h)
    }

    /// Velocity for a concrete state; `text = None` uses the null embedding.
    pub fn velocity(&self, z: &Tensor, t: f64, shape: &Tensor, text: Option<&Tensor>) -> Result<Tensor> {
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let tv = match text {
            Some(t) => g.constant(t.clone()),
            None => self.null_text_var(&p),
        };
        let v = self.velocity_vars(&g, &p, g.constant(z.clone()), t, g.constant(shape.clone()), tv)?;
        Ok(g.value(v))
    }
}
