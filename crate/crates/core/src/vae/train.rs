use rayon::prelude::*;

use super::{DyMeshVae, MeshContext, SampleData};
use crate::chunking::split_chunks;
use crate::error::Result;
use crate::mesh::{decompose_trajectory, DynamicMeshSequence};
use crate::nn::sum_grads;
use crate::tensor::{Adam, Graph, Rng};

/// One training sequence with its precomputed inputs.
#[derive(Clone, Debug)]
pub struct VaeExample {
    pub ctx: MeshContext,
    pub data: SampleData,
}

impl VaeExample {
    pub fn new(seq: &DynamicMeshSequence, model: &DyMeshVae) -> Result<Self> {
        let ctx = MeshContext::new(&seq.mesh_at(0), &model.cfg)?;
        let chunked = split_chunks(&decompose_trajectory(seq), model.cfg.chunk)?;
        Ok(VaeExample {
            ctx,
            data: SampleData::new(&chunked, &model.cfg)?,
        })
    }

    fn latent_shape(&self, model: &DyMeshVae) -> [usize; 3] {
        [self.data.target.shape()[0], self.ctx.num_samples(), model.cfg.latent]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VaeStepStats {
    pub loss: f64,
    pub mse: f64,
    pub kl: f64,
}

/// One Adam step on the mean loss over `batch`. Noise is drawn from `rng`
/// in batch order before the per-example graphs run in parallel, and
/// gradients are summed in batch order, so results do not depend on the
/// thread count.
pub fn train_step(model: &mut DyMeshVae, opt: &mut Adam, batch: &[&VaeExample], rng: &mut Rng) -> Result<VaeStepStats> {
    let eps: Vec<_> = batch.iter().map(|ex| rng.normal_tensor(ex.latent_shape(model))).collect();
    let m = &*model;
    let results = batch
        .par_iter()
        .zip(eps.par_iter())
        .map(|(ex, e)| {
            let g = Graph::new();
            let p = m.params.bind(&g, true);
            let lv = m.loss_vars(&g, &p, &ex.ctx, &ex.data, Some(e))?;
            let grads = g.backward(lv.loss)?;
            let gs: Vec<_> = p.vars().iter().map(|&v| grads.get(v)).collect();
            let scalar = |v| g.with_value(v, |t: &crate::tensor::Tensor| t.data()[0]);
            Ok((gs, [scalar(lv.loss), scalar(lv.mse), scalar(lv.kl)]))
        })
        .collect::<Result<Vec<_>>>()?;
    let k = batch.len().max(1) as f64;
    let mut stats = [0.0; 3];
    let mut parts = Vec::with_capacity(results.len());
    for (gs, s) in results {
        for (a, b) in stats.iter_mut().zip(s) {
            *a += b / k;
        }
        parts.push(gs);
    }
    if let Some(mut grads) = sum_grads(parts) {
        for gt in &mut grads {
            gt.data_mut().iter_mut().for_each(|x| *x /= k);
        }
        opt.update(model.params.tensors_mut(), &grads);
    }
    Ok(VaeStepStats {
        loss: stats[0],
        mse: stats[1],
        kl: stats[2],
    })
}
