use rayon::prelude::*;

use super::{noisy_latent, sample_timestep, FlowCondition, SgttFlow};
use crate::error::Result;
use crate::nn::{sum_grads, Bound};
use crate::tensor::{Adam, Graph, Rng, Tensor, Var};

/// Clean latents `[num_c, n, c]` with their condition.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowExample {
    pub z: Tensor,
    pub cond: FlowCondition,
}

/// Random choices for one loss evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowDraw {
    pub t: f64,
    /// Replace the text with the null embedding.
    pub drop_text: bool,
    pub eps: Tensor,
}

impl FlowDraw {
    /// Draws `t`, then the drop decision, then `ε`.
    pub fn draw(rng: &mut Rng, shape: &[usize], cond_drop: f64) -> Self {
        let t = sample_timestep(rng.uniform());
        let drop_text = rng.uniform() < cond_drop;
        FlowDraw { t, drop_text, eps: rng.normal_tensor(shape.to_vec()) }
    }
}

impl SgttFlow {
    /// `mean((v_θ(Z̃, t) − (Z − ε))²)` on a graph.
    pub fn rf_loss_vars(&self, g: &Graph, p: &Bound, z: &Tensor, cond: &FlowCondition, draw: &FlowDraw) -> Result<Var> {
        let zt = noisy_latent(z, &draw.eps, draw.t)?;
        let text = if draw.drop_text { self.null_text_var(p) } else { g.constant(cond.text.clone()) };
        let v = self.velocity_vars(g, p, g.constant(zt), draw.t, g.constant(cond.shape.clone()), text)?;
        let target = g.constant(velocity_target(z, &draw.eps)?);
        g.mean(g.square(g.sub(v, target)?)?)
    }
}

/// `Z − ε`
fn velocity_target(z: &Tensor, eps: &Tensor) -> Result<Tensor> {
    let data = z.data().iter().zip(eps.data()).map(|(a, e)| a - e).collect();
    Tensor::new(z.shape().to_vec(), data)
}

/// Rectified-flow loss at one random `(t, ε, drop)` drawn from `rng`.
pub fn rf_loss(model: &SgttFlow, z: &Tensor, cond: &FlowCondition, rng: &mut Rng) -> Result<f64> {
    let draw = FlowDraw::draw(rng, z.shape(), model.cfg.cond_drop);
    let g = Graph::new();
    let p = model.params.bind(&g, false);
    let loss = model.rf_loss_vars(&g, &p, z, cond, &draw)?;
    Ok(g.value(loss).data()[0])
}

/// One Adam step on the mean loss over `batch`. Draws happen in batch order
/// before the parallel section, so the update is thread-count independent.
pub fn rf_train_step(model: &mut SgttFlow, opt: &mut Adam, batch: &[&FlowExample], rng: &mut Rng) -> Result<f64> {
    let draws: Vec<_> = batch
        .iter()
        .map(|ex| FlowDraw::draw(rng, ex.z.shape(), model.cfg.cond_drop))
        .collect();
    let m = &*model;
    let results = batch
        .par_iter()
        .zip(draws.par_iter())
        .map(|(ex, d)| {
            let g = Graph::new();
            let p = m.params.bind(&g, true);
            let loss = m.rf_loss_vars(&g, &p, &ex.z, &ex.cond, d)?;
            let grads = g.backward(loss)?;
            let gs: Vec<_> = p.vars().iter().map(|&v| grads.get(v)).collect();
            Ok((gs, g.value(loss).data()[0]))
        })
        .collect::<Result<Vec<_>>>()?;
    let k = batch.len().max(1) as f64;
    let mut mean = 0.0;
    let mut parts = Vec::with_capacity(results.len());
    for (gs, l) in results {
        mean += l / k;
        parts.push(gs);
    }
    if let Some(mut grads) = sum_grads(parts) {
        for gt in &mut grads {
            gt.data_mut().iter_mut().for_each(|x| *x /= k);
        }
        opt.update(model.params.tensors_mut(), &grads);
    }
    Ok(mean)
}
