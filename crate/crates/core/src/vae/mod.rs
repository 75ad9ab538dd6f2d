//! Trajectory VAE: positional encoding, normal injection, topology-masked
//! attention, farthest point sampling, shared-map aggregation of vertex and
//! trajectory streams, a Gaussian latent head, and the decoder that reads
//! per-vertex chunk offsets back out through cross-attention.

mod encoding;
mod train;

use std::sync::atomic::{AtomicUsize, Ordering};

pub use encoding::{fps, fps_count, kl_divergence, positional_encode};
pub use train::{train_step, VaeExample, VaeStepStats};

use crate::chunking::{split_chunks, tdgw_blend, BlendOrientation, ChunkConfig, ChunkedTrajectory};
use crate::config::{parse_value, Configurable, KeyValues};
use crate::error::{Error, Result};
use crate::mesh::{decompose_trajectory, vertex_normals, DynamicMeshSequence, TriangleMesh};
use crate::nn::{
    apply_maps, apply_maps_vertex_major, attention_maps, Bound, Builder, Linear, Mlp, ParamSet, LN_EPS,
};
use crate::tensor::{Graph, Rng, Tensor, Var};
use crate::topology::{hop_bands, one_hop, weighted_adjacency};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NormalPlacement {
    None,
    /// Raw normals join the coordinates before positional encoding.
    Enc1,
    /// Projected normals join the projected coordinates before PLTA.
    #[default]
    Enc2,
    /// Projected normals join the features after PLTA.
    Enc3,
}

impl std::str::FromStr for NormalPlacement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(NormalPlacement::None),
            "enc1" => Ok(NormalPlacement::Enc1),
            "enc2" => Ok(NormalPlacement::Enc2),
            "enc3" => Ok(NormalPlacement::Enc3),
            other => Err(Error::Config(format!("unknown normal placement {other:?}"))),
        }
    }
}

impl std::fmt::Display for NormalPlacement {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NormalPlacement::None => "none",
            NormalPlacement::Enc1 => "enc1",
            NormalPlacement::Enc2 => "enc2",
            NormalPlacement::Enc3 => "enc3",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeConfig {
    /// `d_k`
    pub hidden: usize,
    /// `c`
    pub latent: usize,
    pub normal_width: usize,
    pub heads: usize,
    pub plta_layers: usize,
    /// `L`
    pub plta_steps: usize,
    /// `γ`
    pub gamma: f64,
    /// `ε` in `ln(Adj + ε)`
    pub mask_eps: f64,
    pub pe_vertex: usize,
    pub pe_traj: usize,
    pub fps_ratio: f64,
    /// `K`
    pub decoder_blocks: usize,
    /// `η`
    pub kl_weight: f64,
    pub normals: NormalPlacement,
    pub chunk: ChunkConfig,
    pub blend: BlendOrientation,
    pub max_vertices: usize,
    /// Initial bias of the log-scale head.
    pub log_sigma_init: f64,
    /// Start the decoder's output projection at zero.
    pub zero_output: bool,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            hidden: 32,
            latent: 8,
            normal_width: 8,
            heads: 1,
            plta_layers: 2,
            plta_steps: 4,
            gamma: 0.5,
            mask_eps: 1e-8,
            pe_vertex: 8,
            pe_traj: 10,
            fps_ratio: 0.125,
            decoder_blocks: 8,
            kl_weight: 1e-6,
            normals: NormalPlacement::Enc2,
            chunk: ChunkConfig::default(),
            blend: BlendOrientation::ProseDecay,
            max_vertices: 512,
            log_sigma_init: 0.0,
            zero_output: true,
        }
    }
}

impl VaeConfig {
    /// Width of the features PLTA runs on.
    pub fn plta_width(&self) -> usize {
        match self.normals {
            NormalPlacement::Enc2 => self.hidden + self.normal_width,
            _ => self.hidden,
        }
    }

    /// Width of `V̄_0` and `V̄_0^n`.
    pub fn feature_width(&self) -> usize {
        match self.normals {
            NormalPlacement::Enc2 | NormalPlacement::Enc3 => self.hidden + self.normal_width,
            _ => self.hidden,
        }
    }

    fn pe_input_width(&self) -> usize {
        let coords = if self.normals == NormalPlacement::Enc1 { 6 } else { 3 };
        coords * (1 + 2 * self.pe_vertex)
    }

    fn traj_input_width(&self) -> usize {
        self.chunk.chunk * 3 * (1 + 2 * self.pe_traj)
    }

    pub fn output_width(&self) -> usize {
        self.chunk.chunk * 3
    }
}

impl Configurable for VaeConfig {
    fn set_key(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "hidden" => self.hidden = parse_value(key, v)?,
            "latent" => self.latent = parse_value(key, v)?,
            "normal_width" => self.normal_width = parse_value(key, v)?,
            "heads" => self.heads = parse_value(key, v)?,
            "plta_layers" => self.plta_layers = parse_value(key, v)?,
            "plta_steps" => self.plta_steps = parse_value(key, v)?,
            "gamma" => self.gamma = parse_value(key, v)?,
            "mask_eps" => self.mask_eps = parse_value(key, v)?,
            "pe_vertex" => self.pe_vertex = parse_value(key, v)?,
            "pe_traj" => self.pe_traj = parse_value(key, v)?,
            "fps_ratio" => self.fps_ratio = parse_value(key, v)?,
            "decoder_blocks" => self.decoder_blocks = parse_value(key, v)?,
            "kl_weight" => self.kl_weight = parse_value(key, v)?,
            "normals" => self.normals = v.parse()?,
            "chunk_stride" => self.chunk.stride = parse_value(key, v)?,
            "chunk_len" => self.chunk.chunk = parse_value(key, v)?,
            "blend" => self.blend = v.parse()?,
            "max_vertices" => self.max_vertices = parse_value(key, v)?,
            "log_sigma_init" => self.log_sigma_init = parse_value(key, v)?,
            "out_init" => {
                self.zero_output = match v {
                    "zero" => true,
                    "random" => false,
                    _ => return Err(Error::Config(format!("out_init must be zero or random, got {v:?}"))),
                }
            }
            "norm" => {
                if v != "pre" {
                    return Err(Error::Config(format!("only pre-normalization is supported, got {v:?}")));
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("hidden", self.hidden);
        kv.set("latent", self.latent);
        kv.set("normal_width", self.normal_width);
        kv.set("heads", self.heads);
        kv.set("plta_layers", self.plta_layers);
        kv.set("plta_steps", self.plta_steps);
        kv.set("gamma", self.gamma);
        kv.set("mask_eps", self.mask_eps);
        kv.set("pe_vertex", self.pe_vertex);
        kv.set("pe_traj", self.pe_traj);
        kv.set("fps_ratio", self.fps_ratio);
        kv.set("decoder_blocks", self.decoder_blocks);
        kv.set("kl_weight", self.kl_weight);
        kv.set("normals", self.normals);
        kv.set("chunk_stride", self.chunk.stride);
        kv.set("chunk_len", self.chunk.chunk);
        kv.set("blend", self.blend);
        kv.set("max_vertices", self.max_vertices);
        kv.set("log_sigma_init", self.log_sigma_init);
        kv.set("out_init", if self.zero_output { "zero" } else { "random" });
        kv.set("norm", "pre");
        kv
    }

    fn validate(&self) -> Result<()> {
        self.chunk.validate()?;
        if self.hidden == 0 || self.latent == 0 {
            return Err(Error::Config("hidden and latent widths must be positive".into()));
        }
        if self.normals != NormalPlacement::None && self.normals != NormalPlacement::Enc1 && self.normal_width == 0 {
            return Err(Error::Config("normal_width must be positive for enc2/enc3".into()));
        }
        for w in [self.hidden, self.plta_width(), self.feature_width()] {
            if self.heads == 0 || w % self.heads != 0 {
                return Err(Error::Config(format!("width {w} is not divisible into {} heads", self.heads)));
            }
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if !(self.mask_eps > 0.0) {
            return Err(Error::Config("mask_eps must be positive".into()));
        }
        if !(self.fps_ratio > 0.0 && self.fps_ratio <= 1.0) {
            return Err(Error::Config(format!("fps_ratio must lie in (0, 1], got {}", self.fps_ratio)));
        }
        if self.kl_weight < 0.0 {
            return Err(Error::Config("kl_weight must be non-negative".into()));
        }
        Ok(())
    }
}

/// Per-mesh inputs that do not depend on learned weights.
#[derive(Clone, Debug, PartialEq)]
pub struct MeshContext {
    pub vertices: Tensor,
    pub normals: Tensor,
    /// Positional encoding of the encoder input (coordinates, plus raw
    /// normals under `enc1`).
    pub vertex_pe: Tensor,
    /// `ln(Adj + ε)`, `[N, N]`.
    pub mask: Tensor,
    pub fps: Vec<usize>,
}

impl MeshContext {
    pub fn new(mesh: &TriangleMesh, cfg: &VaeConfig) -> Result<Self> {
        let n = mesh.num_vertices();
        if n == 0 {
            return Err(Error::Argument("mesh has no vertices".into()));
        }
        if n > cfg.max_vertices {
            return Err(Error::Capacity { vertices: n, max: cfg.max_vertices });
        }
        let flat = |pts: &[[f64; 3]]| Tensor::new([pts.len(), 3], pts.iter().flatten().copied().collect());
        let vertices = flat(&mesh.vertices)?;
        let normals = flat(&vertex_normals(mesh).normals)?;
        let pe_src = if cfg.normals == NormalPlacement::Enc1 {
            let data = mesh
                .vertices
                .iter()
                .zip(vertex_normals(mesh).normals)
                .flat_map(|(p, q)| p.iter().chain(q.iter()).copied().collect::<Vec<_>>())
                .collect();
            Tensor::new([n, 6], data)?
        } else {
            vertices.clone()
        };
        let adj = one_hop(mesh)?;
        let bands = hop_bands(&adj, cfg.plta_steps);
        let mask = weighted_adjacency(&bands, cfg.gamma)?.log_mask(cfg.mask_eps);
        let fps = fps(&mesh.vertices, fps_count(n, cfg.fps_ratio))?;
        Ok(MeshContext {
            vertex_pe: positional_encode(&pe_src, cfg.pe_vertex),
            vertices,
            normals,
            mask,
            fps,
        })
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.shape()[0]
    }

    pub fn num_samples(&self) -> usize {
        self.fps.len()
    }
}

/// Chunk offsets as `[num_c, N, L_C·3]`.
pub fn chunk_tensor(chunked: &ChunkedTrajectory) -> Result<Tensor> {
    let shape = [chunked.num_chunks(), chunked.num_vertices(), chunked.width()];
    Tensor::new(shape, chunked.chunks.concat())
}

/// Inverse of [`chunk_tensor`].
pub fn tensor_chunks(t: &Tensor, like: &ChunkedTrajectory) -> Result<ChunkedTrajectory> {
    let expect = [like.num_chunks(), like.num_vertices(), like.width()];
    if t.shape() != expect {
        return Err(Error::dim("tensor_chunks", format!("{:?} vs {:?}", t.shape(), expect)));
    }
    let per = like.num_vertices() * like.width();
    Ok(ChunkedTrajectory {
        chunks: t.data().chunks(per.max(1)).map(<[f64]>::to_vec).collect(),
        ..like.clone()
    })
}

/// Encoder inputs and reconstruction target for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleData {
    /// Positional encoding of chunk offsets, `[num_c, N, L_C·3·(1+2F)]`.
    pub traj_pe: Tensor,
    /// `[num_c, N, L_C·3]`
    pub target: Tensor,
}

impl SampleData {
    pub fn new(chunked: &ChunkedTrajectory, cfg: &VaeConfig) -> Result<Self> {
        let target = chunk_tensor(chunked)?;
        Ok(SampleData {
            traj_pe: positional_encode(&target, cfg.pe_traj),
            target,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedMesh {
    /// `V̄_0`, `N × d`
    pub features: Tensor,
    /// `V̄_0^n`, `n × d`
    pub sampled: Tensor,
    pub fps: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentPacket {
    /// `[num_c, n, c]`
    pub mu: Tensor,
    pub sigma: Tensor,
    pub z: Tensor,
    pub sampled: Tensor,
    pub kl: f64,
}

/// Counts of shared-map computations and applications in the sync stage.
#[derive(Debug, Default)]
pub struct SyncStats {
    maps: AtomicUsize,
    uses: AtomicUsize,
}

impl SyncStats {
    pub fn maps_computed(&self) -> usize {
        self.maps.load(Ordering::Relaxed)
    }

    pub fn map_applications(&self) -> usize {
        self.uses.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.maps.store(0, Ordering::Relaxed);
        self.uses.store(0, Ordering::Relaxed);
    }
}

#[derive(Clone, Copy, Debug)]
struct AttnProj {
    q: Linear,
    k: Linear,
    v: Linear,
}

impl AttnProj {
    fn new(b: &mut Builder, name: &str, dq: usize, dk_in: usize, dv_in: usize, dk: usize, dv: usize) -> Result<Self> {
        Ok(AttnProj {
            q: b.linear(&format!("{name}.q"), dq, dk, false)?,
            k: b.linear(&format!("{name}.k"), dk_in, dk, false)?,
            v: b.linear(&format!("{name}.v"), dv_in, dv, true)?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
struct DecoderBlock {
    attn: AttnProj,
    latent_v: Linear,
    ffn: Mlp,
}

/// Graph values of the mesh half of the encoder.
#[derive(Clone, Debug)]
pub struct MeshVars {
    pub features: Var,
    pub sampled: Var,
    pub sync_maps: Vec<Var>,
}

/// Outputs of one full forward pass on a graph.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub loss: Var,
    pub mse: Var,
    pub kl: Var,
    pub recon: Var,
    pub z: Var,
}

pub struct DyMeshVae {
    pub cfg: VaeConfig,
    pub params: ParamSet,
    input: Linear,
    normal_proj: Option<Linear>,
    plta: Vec<AttnProj>,
    sync: AttnProj,
    traj_in: Linear,
    traj_v: Linear,
    mu: Linear,
    log_sigma: Linear,
    latent_in: Linear,
    blocks: Vec<DecoderBlock>,
    cross: AttnProj,
    query_res: Linear,
    out_ffn: Mlp,
    out: Linear,
    pub sync_stats: SyncStats,
}

impl std::fmt::Debug for DyMeshVae {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DyMeshVae")
            .field("cfg", &self.cfg)
            .field("parameters", &self.params.num_values())
            .finish()
    }
}

impl DyMeshVae {
    pub fn new(cfg: VaeConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let mut rng = Rng::new(seed);
        let mut b = Builder { params: &mut params, rng: &mut rng };
        let h = cfg.hidden;
        let pw = cfg.plta_width();
        let fw = cfg.feature_width();
        let input = b.linear("enc.input", cfg.pe_input_width(), h, true)?;
        let normal_proj = match cfg.normals {
            NormalPlacement::Enc2 | NormalPlacement::Enc3 => Some(b.linear("enc.normal", 3, cfg.normal_width, true)?),
            _ => None,
        };
        let plta = (0..cfg.plta_layers)
            .map(|i| AttnProj::new(&mut b, &format!("enc.plta{i}"), pw, pw, pw, h, pw))
            .collect::<Result<Vec<_>>>()?;
        let sync = AttnProj::new(&mut b, "enc.sync", fw, fw, fw, h, fw)?;
        let traj_in = b.linear("enc.traj_in", cfg.traj_input_width(), h, true)?;
        let traj_v = b.linear("enc.traj_v", h, h, true)?;
        let mu = b.linear("enc.mu", h, cfg.latent, true)?;
        let log_sigma = b.linear("enc.log_sigma", h, cfg.latent, true)?;
        let latent_in = b.linear("dec.latent_in", cfg.latent, h, true)?;
        let blocks = (0..cfg.decoder_blocks)
            .map(|i| {
                Ok(DecoderBlock {
                    attn: AttnProj::new(&mut b, &format!("dec.block{i}"), fw, fw, fw, h, fw)?,
                    latent_v: b.linear(&format!("dec.block{i}.latent_v"), h, h, true)?,
                    ffn: Mlp::new(&mut b, &format!("dec.block{i}.ffn"), h, 2 * h, h)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let cross = AttnProj::new(&mut b, "dec.cross", fw, fw, h, h, h)?;
        let query_res = b.linear("dec.query_res", fw, h, true)?;
        let out_ffn = Mlp::new(&mut b, "dec.out_ffn", h, 2 * h, h)?;
        let out = b.linear("dec.out", h, cfg.output_width(), true)?;
        params
            .get_mut(log_sigma.b.expect("log-scale bias"))
            .data_mut()
            .fill(cfg.log_sigma_init);
        if cfg.zero_output {
            out.zero(&mut params);
        }
        Ok(DyMeshVae {
            cfg,
            params,
            input,
            normal_proj,
            plta,
            sync,
            traj_in,
            traj_v,
            mu,
            log_sigma,
            latent_in,
            blocks,
            cross,
            query_res,
            out_ffn,
            out,
            sync_stats: SyncStats::default(),
        })
    }

    /// Rebuilds a model around checkpointed parameters.
    pub fn from_params(cfg: VaeConfig, params: &ParamSet) -> Result<Self> {
        let mut m = DyMeshVae::new(cfg, 0)?;
        m.params.load_from(params)?;
        Ok(m)
    }

    pub fn zero_output_projection(&mut self) {
        self.out.zero(&mut self.params);
    }

    fn ln(&self, g: &Graph, x: Var) -> Result<Var> {
        g.layer_norm(x, LN_EPS)
    }

    /// Concatenates projected normals onto `feat` for `enc2`/`enc3`
    /// (whichever placement is active); otherwise returns `feat`.
    pub fn inject_normals(&self, g: &Graph, p: &Bound, feat: Var, normals: Var) -> Result<Var> {
        match self.normal_proj {
            Some(proj) => {
                let nf = proj.forward(g, p, normals)?;
                g.concat_last(&[feat, nf])
            }
            None => Ok(feat),
        }
    }

    /// One topology-masked layer: `softmax(QKᵀ/√d + mask)·V(LN x) + x`.
    pub fn plta_layer(&self, g: &Graph, p: &Bound, layer: usize, x: Var, mask: &Tensor) -> Result<Var> {
        let a = &self.plta[layer];
        let xn = self.ln(g, x)?;
        let maps = attention_maps(g, a.q.forward(g, p, xn)?, a.k.forward(g, p, xn)?, self.cfg.heads, Some(mask))?;
        let agg = apply_maps(g, &maps, a.v.forward(g, p, xn)?)?;
        g.add(agg, x)
    }

    pub fn encode_mesh_vars(&self, g: &Graph, p: &Bound, ctx: &MeshContext) -> Result<MeshVars> {
        let pe = g.constant(ctx.vertex_pe.clone());
        let mut x = self.input.forward(g, p, pe)?;
        let normals = g.constant(ctx.normals.clone());
        if self.cfg.normals == NormalPlacement::Enc2 {
            x = self.inject_normals(g, p, x, normals)?;
        }
        for l in 0..self.plta.len() {
            x = self.plta_layer(g, p, l, x, &ctx.mask)?;
        }
        if self.cfg.normals == NormalPlacement::Enc3 {
            x = self.inject_normals(g, p, x, normals)?;
        }
        let features = x;
        let sampled = g.gather_rows(features, &ctx.fps)?;
        let fn_ = self.ln(g, features)?;
        let sn = self.ln(g, sampled)?;
        let s = &self.sync;
        let maps = attention_maps(g, s.q.forward(g, p, sn)?, s.k.forward(g, p, fn_)?, self.cfg.heads, None)?;
        self.sync_stats.maps.fetch_add(1, Ordering::Relaxed);
        let agg = apply_maps(g, &maps, s.v.forward(g, p, fn_)?)?;
        self.sync_stats.uses.fetch_add(1, Ordering::Relaxed);
        let sampled = g.add(agg, sampled)?;
        Ok(MeshVars { features, sampled, sync_maps: maps })
    }

    /// `V̂_T^n`, vertex-major `[n, num_c, d_k]`, using the sync maps of `mesh`.
    pub fn encode_trajectory_vars(&self, g: &Graph, p: &Bound, ctx: &MeshContext, mesh: &MeshVars, traj_pe: &Tensor) -> Result<Var> {
        let pe = g.constant(traj_pe.clone());
        let vt = g.swap01(self.traj_in.forward(g, p, pe)?)?;
        let vals = self.traj_v.forward(g, p, self.ln(g, vt)?)?;
        let agg = apply_maps_vertex_major(g, &mesh.sync_maps, vals)?;
        self.sync_stats.uses.fetch_add(1, Ordering::Relaxed);
        let s = g.shape(vt);
        let flat = g.reshape(vt, [s[0], s[1] * s[2]])?;
        let base = g.reshape(g.gather_rows(flat, &ctx.fps)?, [ctx.fps.len(), s[1], s[2]])?;
        g.add(agg, base)
    }

    /// Latent head. Returns `(μ, ln σ, Z, L_kl)` with `μ`, `ln σ`, `Z` as
    /// `[num_c, n, c]`. Without `eps`, `Z = μ`.
    pub fn kl_head_vars(&self, g: &Graph, p: &Bound, vtn: Var, eps: Option<&Tensor>) -> Result<(Var, Var, Var, Var)> {
        let mu = g.swap01(self.mu.forward(g, p, vtn)?)?;
        let ls = g.swap01(self.log_sigma.forward(g, p, vtn)?)?;
        let z = match eps {
            Some(e) => {
                let noise = g.mul(g.exp(ls)?, g.constant(e.clone()))?;
                g.add(mu, noise)?
            }
            None => mu,
        };
        let var = g.exp(g.scale(ls, 2.0)?)?;
        let term = g.sub(g.add(g.square(mu)?, var)?, g.scale(ls, 2.0)?)?;
        let kl = g.add_scalar(g.scale(g.mean(term)?, 0.5)?, -0.5)?;
        Ok((mu, ls, z, kl))
    }

    /// Decoder: `K` shared-map blocks on `(V̄_0^n, Z)`, then cross-attention
    /// from `V̄_0`. Returns `[num_c, N, L_C·3]`.
    pub fn decode_vars(&self, g: &Graph, p: &Bound, features: Var, sampled: Var, z: Var) -> Result<Var> {
        let heads = self.cfg.heads;
        let mut zh = self.latent_in.forward(g, p, g.swap01(z)?)?;
        let mut s = sampled;
        for b in &self.blocks {
            let sn = self.ln(g, s)?;
            let maps = attention_maps(g, b.attn.q.forward(g, p, sn)?, b.attn.k.forward(g, p, sn)?, heads, None)?;
            s = g.add(s, apply_maps(g, &maps, b.attn.v.forward(g, p, sn)?)?)?;
            let zv = b.latent_v.forward(g, p, self.ln(g, zh)?)?;
            zh = g.add(zh, apply_maps_vertex_major(g, &maps, zv)?)?;
            zh = g.add(zh, b.ffn.forward(g, p, self.ln(g, zh)?)?)?;
        }
        let fn_ = self.ln(g, features)?;
        let sn = self.ln(g, s)?;
        let c = &self.cross;
        let maps = attention_maps(g, c.q.forward(g, p, fn_)?, c.k.forward(g, p, sn)?, heads, None)?;
        let h = apply_maps_vertex_major(g, &maps, c.v.forward(g, p, self.ln(g, zh)?)?)?;
        let h = g.add_bcast(g.swap01(h)?, self.query_res.forward(g, p, features)?)?;
        let h = g.add(h, self.out_ffn.forward(g, p, self.ln(g, h)?)?)?;
        self.out.forward(g, p, h)
    }

    /// Full pass and `L_dvae = MSE + η·L_kl`.
    pub fn loss_vars(&self, g: &Graph, p: &Bound, ctx: &MeshContext, data: &SampleData, eps: Option<&Tensor>) -> Result<LossVars> {
        let mesh = self.encode_mesh_vars(g, p, ctx)?;
        let vtn = self.encode_trajectory_vars(g, p, ctx, &mesh, &data.traj_pe)?;
        let (_, _, z, kl) = self.kl_head_vars(g, p, vtn, eps)?;
        let recon = self.decode_vars(g, p, mesh.features, mesh.sampled, z)?;
        let target = g.constant(data.target.clone());
        let mse = g.mean(g.square(g.sub(recon, target)?)?)?;
        let loss = g.add(mse, g.scale(kl, self.cfg.kl_weight)?)?;
        Ok(LossVars { loss, mse, kl, recon, z })
    }

    pub fn encode(&self, ctx: &MeshContext) -> Result<EncodedMesh> {
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let m = self.encode_mesh_vars(&g, &p, ctx)?;
        Ok(EncodedMesh {
            features: g.value(m.features),
            sampled: g.value(m.sampled),
            fps: ctx.fps.clone(),
        })
    }

    /// Encodes a chunked trajectory to latents; `eps` selects sampling, its
    /// absence returns `Z = μ`.
    pub fn encode_latents(&self, ctx: &MeshContext, data: &SampleData, eps: Option<&Tensor>) -> Result<LatentPacket> {
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let m = self.encode_mesh_vars(&g, &p, ctx)?;
        let vtn = self.encode_trajectory_vars(&g, &p, ctx, &m, &data.traj_pe)?;
        let (mu, ls, z, kl) = self.kl_head_vars(&g, &p, vtn, eps)?;
        Ok(LatentPacket {
            mu: g.value(mu),
            sigma: g.value(ls).map(f64::exp),
            z: g.value(z),
            sampled: g.value(m.sampled),
            kl: g.value(kl).data()[0],
        })
    }

    /// `[num_c, N, L_C·3]` offsets for latents `z` (`[num_c, n, c]`).
    pub fn decode(&self, encoded: &EncodedMesh, z: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let f = g.constant(encoded.features.clone());
        let s = g.constant(encoded.sampled.clone());
        let out = self.decode_vars(&g, &p, f, s, g.constant(z.clone()))?;
        Ok(g.value(out))
    }

    /// Encode with `Z = μ`, decode, and return chunks shaped like the input.
    pub fn reconstruct_chunks(&self, ctx: &MeshContext, chunked: &ChunkedTrajectory) -> Result<ChunkedTrajectory> {
        let data = SampleData::new(chunked, &self.cfg)?;
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let lv = self.loss_vars(&g, &p, ctx, &data, None)?;
        tensor_chunks(&g.value(lv.recon), chunked)
    }

    /// Whole-sequence round trip: decompose, chunk, reconstruct, blend and
    /// add back the first frame.
    pub fn reconstruct_sequence(&self, seq: &DynamicMeshSequence) -> Result<DynamicMeshSequence> {
        let ctx = MeshContext::new(&seq.mesh_at(0), &self.cfg)?;
        let chunked = split_chunks(&decompose_trajectory(seq), self.cfg.chunk)?;
        let rec = self.reconstruct_chunks(&ctx, &chunked)?;
        let mut out = tdgw_blend(&rec, self.cfg.blend)?.recompose(&seq.faces);
        out.caption = seq.caption.clone();
        Ok(out)
    }
}

/// `mean((recon - target)²) + η·kl`.
pub fn vae_loss(recon: &Tensor, target: &Tensor, kl: f64, eta: f64) -> Result<f64> {
    if recon.shape() != target.shape() {
        return Err(Error::dim("vae_loss", format!("{:?} vs {:?}", recon.shape(), target.shape())));
    }
    let n = recon.len().max(1) as f64;
    let mse = recon.data().iter().zip(target.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
    Ok(mse + eta * kl)
}
