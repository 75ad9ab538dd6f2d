use std::f64::consts::FRAC_PI_2;

use super::{FlowCondition, SgttFlow};
use crate::chunking::{tdgw_blend, ChunkedTrajectory};
use crate::error::{Error, Result};
use crate::mesh::{DynamicMeshSequence, TriangleMesh};
use crate::tensor::{Rng, Tensor};
use crate::vae::{DyMeshVae, MeshContext};

/// `t = 1 − 1/(tan(π/2·u) + 1)` for `u ∈ [0, 1)`.
pub fn sample_timestep(u: f64) -> f64 {
    1.0 - 1.0 / ((FRAC_PI_2 * u).tan() + 1.0)
}

/// CDF of [`sample_timestep`] under uniform `u`: `(2/π)·atan(t/(1−t))`.
pub fn timestep_cdf(t: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else if t >= 1.0 {
        1.0
    } else {
        (t / (1.0 - t)).atan() / FRAC_PI_2
    }
}

/// `(1 − t)·z + t·ε`
pub fn noisy_latent(z: &Tensor, eps: &Tensor, t: f64) -> Result<Tensor> {
    if z.shape() != eps.shape() {
        return Err(Error::dim("noisy_latent", format!("{:?} vs {:?}", z.shape(), eps.shape())));
    }
    let data = z.data().iter().zip(eps.data()).map(|(a, e)| (1.0 - t) * a + t * e).collect();
    Tensor::new(z.shape().to_vec(), data)
}

/// `v_u + ζ·(v_c − v_u)`; `ζ = 1` and `ζ = 0` return the respective input
/// unchanged.
pub fn cfg_velocity(cond: &Tensor, uncond: &Tensor, guidance: f64) -> Result<Tensor> {
    if cond.shape() != uncond.shape() {
        return Err(Error::dim("cfg_velocity", format!("{:?} vs {:?}", cond.shape(), uncond.shape())));
    }
    if guidance == 1.0 {
        return Ok(cond.clone());
    }
    if guidance == 0.0 {
        return Ok(uncond.clone());
    }
    let data = cond
        .data()
        .iter()
        .zip(uncond.data())
        .map(|(c, u)| u + guidance * (c - u))
        .collect();
    Tensor::new(cond.shape().to_vec(), data)
}

/// Integrates `Z ← Z + Δ·v(Z, t)` from `t = 1` (`Z = noise`) down to `t = 0`
/// on a uniform grid of `steps` intervals.
pub fn euler_sample<F>(noise: Tensor, steps: usize, mut velocity: F) -> Result<Tensor>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    if steps == 0 {
        return Err(Error::Argument("euler_sample needs at least one step".into()));
    }
    let dt = 1.0 / steps as f64;
    let mut z = noise;
    for k in 0..steps {
        let t = 1.0 - k as f64 * dt;
        let v = match velocity(&z, t) {
            Ok(v) => v,
            Err(Error::NonFinite { .. }) => return Err(Error::Divergence { step: k }),
            Err(e) => return Err(e),
        };
        if v.shape() != z.shape() {
            return Err(Error::dim("euler_sample", format!("velocity {:?} for state {:?}", v.shape(), z.shape())));
        }
        for (a, b) in z.data_mut().iter_mut().zip(v.data()) {
            *a += dt * b;
        }
        if !z.is_finite() {
            return Err(Error::Divergence { step: k });
        }
    }
    Ok(z)
}

/// A flow model bound to one condition.
#[derive(Clone, Copy, Debug)]
pub struct FlowSampler<'a> {
    pub model: &'a SgttFlow,
    pub cond: &'a FlowCondition,
    pub guidance: f64,
    pub steps: usize,
}

impl FlowSampler<'_> {
    pub fn guided_velocity(&self, z: &Tensor, t: f64) -> Result<Tensor> {
        let m = self.model;
        let shape = &self.cond.shape;
        if self.guidance == 1.0 {
            return m.velocity(z, t, shape, Some(&self.cond.text));
        }
        let vu = m.velocity(z, t, shape, None)?;
        if self.guidance == 0.0 {
            return Ok(vu);
        }
        let vc = m.velocity(z, t, shape, Some(&self.cond.text))?;
        cfg_velocity(&vc, &vu, self.guidance)
    }

    /// Latents `[num_c, n, c]` from noise drawn from `rng`.
    pub fn sample(&self, num_chunks: usize, rng: &mut Rng) -> Result<Tensor> {
        let n = self.cond.shape.shape()[0];
        let noise = rng.normal_tensor([num_chunks, n, self.model.cfg.latent]);
        euler_sample(noise, self.steps, |z, t| self.guided_velocity(z, t))
    }
}

/// Samples latents for `frames` frames on `mesh`, decodes, blends and adds
/// the rest pose back. Faces are copied from `mesh`.
#[allow(clippy::too_many_arguments)]
pub fn generate_animation(
    vae: &DyMeshVae,
    flow: &SgttFlow,
    mesh: &TriangleMesh,
    text: &Tensor,
    frames: usize,
    steps: usize,
    guidance: f64,
    rng: &mut Rng,
) -> Result<DynamicMeshSequence> {
    if frames == 0 {
        return Err(Error::Argument("frames must be at least 1".into()));
    }
    let ctx = MeshContext::new(mesh, &vae.cfg)?;
    let encoded = vae.encode(&ctx)?;
    let cond = FlowCondition { shape: encoded.sampled.clone(), text: text.clone() };
    let num_c = vae.cfg.chunk.num_chunks(frames);
    let sampler = FlowSampler { model: flow, cond: &cond, guidance, steps };
    let z = sampler.sample(num_c, rng)?;
    let decoded = vae.decode(&encoded, &z)?;
    let per = mesh.num_vertices() * vae.cfg.output_width();
    let chunked = ChunkedTrajectory {
        chunks: decoded.data().chunks(per).map(<[f64]>::to_vec).collect(),
        config: vae.cfg.chunk,
        frames,
        initial: mesh.vertices.clone(),
    };
    Ok(tdgw_blend(&chunked, vae.cfg.blend)?.recompose(&mesh.faces))
}
