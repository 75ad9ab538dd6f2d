//! Named parameter storage and the layers shared by the VAE and the flow
//! transformer.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Rng, Tensor, Var};

/// Ordered, named parameter tensors. Order is insertion order and is what
/// optimizers and checkpoints iterate over.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter {name:?}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replaces every tensor from `other`, matching by name and shape.
    pub fn load_from(&mut self, other: &ParamSet) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let src = other
                .id(name)
                .map(|id| other.get(id))
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter {name:?}")))?;
            if src.shape() != self.tensors[i].shape() {
                return Err(Error::Config(format!(
                    "parameter {name:?} has shape {:?}, model expects {:?}",
                    src.shape(),
                    self.tensors[i].shape()
                )));
            }
            self.tensors[i] = src.clone();
        }
        Ok(())
    }

    /// Records every tensor on `g`. With `trainable`, they become gradient
    /// leaves.
    pub fn bind(&self, g: &Graph, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        Bound { vars }
    }

    /// Binds all tensors as constants except `id`, which is replaced by `var`.
    pub fn bind_override(&self, g: &Graph, id: ParamId, var: Var) -> Bound {
        let vars = self
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| if i == id.0 { var } else { g.constant(t.clone()) })
            .collect();
        Bound { vars }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Parameters of one [`ParamSet`] as recorded on a particular graph.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Collects parameter ids while a model is being built.
pub struct Builder<'a> {
    pub params: &'a mut ParamSet,
    pub rng: &'a mut Rng,
}

impl Builder<'_> {
    pub fn linear(&mut self, name: &str, din: usize, dout: usize, bias: bool) -> Result<Linear> {
        let std = 1.0 / (din.max(1) as f64).sqrt();
        let w = self.rng.normal_tensor([din, dout]).map(|x| x * std);
        let w = self.params.insert(format!("{name}.w"), w)?;
        let b = if bias {
            Some(self.params.insert(format!("{name}.b"), Tensor::zeros([dout]))?)
        } else {
            None
        };
        Ok(Linear { w, b, din, dout })
    }

    pub fn zeros_linear(&mut self, name: &str, din: usize, dout: usize) -> Result<Linear> {
        let w = self.params.insert(format!("{name}.w"), Tensor::zeros([din, dout]))?;
        let b = Some(self.params.insert(format!("{name}.b"), Tensor::zeros([dout]))?);
        Ok(Linear { w, b, din, dout })
    }

    pub fn tensor(&mut self, name: &str, t: Tensor) -> Result<ParamId> {
        self.params.insert(name, t)
    }
}

/// `x·W + b` over the last axis of any-rank input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn forward(&self, g: &Graph, p: &Bound, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        let d = *shape.last().ok_or_else(|| Error::dim("linear", "scalar input"))?;
        if d != self.din {
            return Err(Error::dim("linear", format!("input width {d}, expected {}", self.din)));
        }
        let rows = shape[..shape.len() - 1].iter().product::<usize>();
        let flat = if shape.len() == 2 { x } else { g.reshape(x, [rows, d])? };
        let mut y = g.matmul(flat, p.var(self.w))?;
        if let Some(b) = self.b {
            y = g.add_bcast(y, p.var(b))?;
        }
        if shape.len() == 2 {
            return Ok(y);
        }
        let mut out = shape;
        *out.last_mut().unwrap() = self.dout;
        g.reshape(y, out)
    }

    pub fn zero(&self, params: &mut ParamSet) {
        params.get_mut(self.w).data_mut().fill(0.0);
        if let Some(b) = self.b {
            params.get_mut(b).data_mut().fill(0.0);
        }
    }
}

/// Two-layer SiLU perceptron.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(b: &mut Builder, name: &str, din: usize, hidden: usize, dout: usize) -> Result<Self> {
        Ok(Mlp {
            fc1: b.linear(&format!("{name}.fc1"), din, hidden, true)?,
            fc2: b.linear(&format!("{name}.fc2"), hidden, dout, true)?,
        })
    }

    pub fn forward(&self, g: &Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = g.silu(self.fc1.forward(g, p, x)?)?;
        self.fc2.forward(g, p, h)
    }
}

pub const LN_EPS: f64 = 1e-6;

/// Attention maps `softmax(q·kᵀ/√d_h + mask)` per head. `q` is `[.., S_q, d]`
/// and `k` is `[.., S_k, d]` with equal leading axes (rank 2 or 3); heads
/// split `d` into equal column blocks.
pub fn attention_maps(g: &Graph, q: Var, k: Var, heads: usize, mask: Option<&Tensor>) -> Result<Vec<Var>> {
    let d = *g.shape(q).last().unwrap_or(&0);
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config(format!("width {d} is not divisible into {heads} heads")));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    (0..heads)
        .map(|h| {
            let (qh, kh) = if heads == 1 {
                (q, k)
            } else {
                (g.slice_last(q, h * dh, (h + 1) * dh)?, g.slice_last(k, h * dh, (h + 1) * dh)?)
            };
            let logits = batched_mm(g, qh, g.transpose(kh)?)?;
            g.masked_softmax(g.scale(logits, scale)?, mask)
        })
        .collect()
}

/// Applies per-head maps to `v` (`[.., S_k, d_v]`), each head reading its
/// own column block of `v`.
pub fn apply_maps(g: &Graph, maps: &[Var], v: Var) -> Result<Var> {
    let heads = maps.len();
    let dv = *g.shape(v).last().unwrap_or(&0);
    if heads == 0 || !dv.is_multiple_of(heads) {
        return Err(Error::Config(format!("value width {dv} is not divisible into {heads} heads")));
    }
    if heads == 1 {
        return batched_mm(g, maps[0], v);
    }
    let dh = dv / heads;
    let parts = maps
        .iter()
        .enumerate()
        .map(|(h, &a)| batched_mm(g, a, g.slice_last(v, h * dh, (h + 1) * dh)?))
        .collect::<Result<Vec<_>>>()?;
    g.concat_last(&parts)
}

/// Applies a 2-D map `[S_q, S_k]` to a vertex-major stream `[S_k, B, d]`,
/// giving `[S_q, B, d]`. The same map multiplies every `B` slice.
pub fn apply_map_vertex_major(g: &Graph, map: Var, x: Var) -> Result<Var> {
    let s = g.shape(x);
    if s.len() != 3 {
        return Err(Error::dim("apply_map_vertex_major", format!("expected rank 3, got {:?}", s)));
    }
    let flat = g.reshape(x, [s[0], s[1] * s[2]])?;
    let y = g.matmul(map, flat)?;
    let sq = g.shape(map)[0];
    g.reshape(y, [sq, s[1], s[2]])
}

/// Multi-head variant of [`apply_map_vertex_major`].
pub fn apply_maps_vertex_major(g: &Graph, maps: &[Var], x: Var) -> Result<Var> {
    let heads = maps.len();
    let dv = *g.shape(x).last().unwrap_or(&0);
    if heads == 0 || !dv.is_multiple_of(heads) {
        return Err(Error::Config(format!("value width {dv} is not divisible into {heads} heads")));
    }
    if heads == 1 {
        return apply_map_vertex_major(g, maps[0], x);
    }
    let dh = dv / heads;
    let parts = maps
        .iter()
        .enumerate()
        .map(|(h, &a)| apply_map_vertex_major(g, a, g.slice_last(x, h * dh, (h + 1) * dh)?))
        .collect::<Result<Vec<_>>>()?;
    g.concat_last(&parts)
}

fn batched_mm(g: &Graph, a: Var, b: Var) -> Result<Var> {
    if g.shape(a).len() == 3 {
        g.bmm(a, b)
    } else {
        g.matmul(a, b)
    }
}

/// Sinusoidal features of a scalar: `[sin(t·f_0), cos(t·f_0), …]` with
/// geometric frequencies from 1 down to 1/max_period.
pub fn sinusoid(t: f64, dim: usize, max_period: f64) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(max_period.ln()) * i as f64 / half.max(1) as f64).exp();
        let (s, c) = (t * freq).sin_cos();
        out[2 * i] = s;
        out[2 * i + 1] = c;
    }
    Tensor::new([dim], out).expect("sinusoid shape")
}

/// Sum of per-graph gradient lists, accumulated in slice order so the
/// result does not depend on how the work was scheduled.
pub fn sum_grads(parts: Vec<Vec<Tensor>>) -> Option<Vec<Tensor>> {
    let mut it = parts.into_iter();
    let mut acc = it.next()?;
    for part in it {
        for (a, b) in acc.iter_mut().zip(part) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }
    Some(acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_any_rank_and_zero() {
        let mut ps = ParamSet::new();
        let mut rng = Rng::new(1);
        let lin = Builder { params: &mut ps, rng: &mut rng }.linear("l", 3, 2, true).unwrap();
        let g = Graph::new();
        let p = ps.bind(&g, false);
        let x = g.constant(Tensor::new([2, 2, 3], (0..12).map(f64::from).collect()).unwrap());
        let y = lin.forward(&g, &p, x).unwrap();
        assert_eq!(g.shape(y), vec![2, 2, 2]);
        // row 1 of the flattened input through the plain matmul
        let w = ps.get(lin.w);
        let expect: f64 = (0..3).map(|k| (3 + k) as f64 * w.at2(k, 0)).sum();
        assert!((g.value(y).data()[2] - expect).abs() < 1e-12);

        lin.zero(&mut ps);
        let g = Graph::new();
        let p = ps.bind(&g, false);
        let x = g.constant(Tensor::full([4, 3], 2.0));
        assert!(g.value(lin.forward(&g, &p, x).unwrap()).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = ParamSet::new();
        ps.insert("a", Tensor::zeros([1])).unwrap();
        assert!(ps.insert("a", Tensor::zeros([1])).is_err());
    }

    #[test]
    fn zero_queries_give_uniform_maps() {
        let g = Graph::new();
        let q = g.constant(Tensor::zeros([2, 4]));
        let k = g.constant(Tensor::full([3, 4], 0.7));
        let maps = attention_maps(&g, q, k, 2, None).unwrap();
        assert_eq!(maps.len(), 2);
        for m in maps {
            assert!(g.value(m).data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        }
    }

    #[test]
    fn vertex_major_map_matches_per_slice_product() {
        let mut rng = Rng::new(3);
        let a = rng.normal_tensor([2, 3]);
        let x = rng.normal_tensor([3, 4, 5]);
        let g = Graph::new();
        let av = g.constant(a.clone());
        let xv = g.constant(x.clone());
        let y = g.value(apply_map_vertex_major(&g, av, xv).unwrap());
        for i in 0..2 {
            for b in 0..4 {
                for c in 0..5 {
                    let e: f64 = (0..3).map(|j| a.at2(i, j) * x.data()[j * 20 + b * 5 + c]).sum();
                    assert!((y.data()[i * 20 + b * 5 + c] - e).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn sum_grads_is_ordered_sum() {
        let a = vec![Tensor::full([2], 1.0)];
        let b = vec![Tensor::full([2], 2.5)];
        let s = sum_grads(vec![a, b]).unwrap();
        assert_eq!(s[0].data(), &[3.5, 3.5]);
        assert!(sum_grads(Vec::new()).is_none());
    }
}
