//! Average vertex error, anomalous edge ratio and average moving distance.

use crate::error::{Error, Result};
use crate::mesh::{dist, edge_set, DynamicMeshSequence, TriangleMesh};

/// Edge-length reference for [`rho_abn`].
#[derive(Clone, Copy, Debug)]
pub enum EdgeReference<'a> {
    /// Per-frame ground truth.
    Sequence(&'a DynamicMeshSequence),
    /// Static input mesh (generation mode).
    Mesh(&'a TriangleMesh),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RhoAbn {
    pub ratio: f64,
    pub anomalous: usize,
    /// `(edge, frame)` pairs evaluated.
    pub pairs: usize,
    /// Pairs skipped because the reference edge has zero length.
    pub zero_length: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub ave: Option<f64>,
    /// `(τ, ρ_abn^τ)`
    pub rho: Vec<(f64, f64)>,
    pub amd: Option<f64>,
    pub zero_length_edges: usize,
}

pub const DEFAULT_TAUS: [f64; 3] = [2.0, 5.0, 10.0];

fn same_shape(a: &DynamicMeshSequence, b: &DynamicMeshSequence, op: &'static str) -> Result<()> {
    if a.num_frames() != b.num_frames() || a.num_vertices() != b.num_vertices() {
        return Err(Error::dim(
            op,
            format!(
                "T={} N={} vs T={} N={}",
                a.num_frames(),
                a.num_vertices(),
                b.num_frames(),
                b.num_vertices()
            ),
        ));
    }
    Ok(())
}

/// Mean over all `(t, i)` of `‖V_rec^t[i] − V_gt^t[i]‖`.
pub fn ave(recon: &DynamicMeshSequence, gt: &DynamicMeshSequence) -> Result<f64> {
    same_shape(recon, gt, "ave")?;
    let count = recon.num_frames() * recon.num_vertices();
    if count == 0 {
        return Ok(0.0);
    }
    let total: f64 = recon
        .frames
        .iter()
        .zip(&gt.frames)
        .flat_map(|(a, b)| a.iter().zip(b).map(|(p, q)| dist(*p, *q)))
        .sum();
    Ok(total / count as f64)
}

/// Share of `(edge, frame ≥ 1)` pairs whose length ratio to the reference
/// is strictly above `τ` or strictly below `1/τ`.
pub fn rho_abn(recon: &DynamicMeshSequence, reference: EdgeReference, tau: f64) -> Result<RhoAbn> {
    if !(tau > 1.0) {
        return Err(Error::Argument(format!("τ must exceed 1, got {tau}")));
    }
    let n = recon.num_vertices();
    match reference {
        EdgeReference::Sequence(r) => same_shape(recon, r, "rho_abn")?,
        EdgeReference::Mesh(m) => {
            if m.num_vertices() != n {
                return Err(Error::dim("rho_abn", format!("{n} vertices vs mesh with {}", m.num_vertices())));
            }
        }
    }
    let edges = edge_set(&recon.faces);
    let mut out = RhoAbn { ratio: 0.0, anomalous: 0, pairs: 0, zero_length: 0 };
    for t in 1..recon.num_frames() {
        let ref_frame = match reference {
            EdgeReference::Sequence(r) => &r.frames[t],
            EdgeReference::Mesh(m) => &m.vertices,
        };
        let cur = &recon.frames[t];
        for &(a, b) in &edges {
            let (a, b) = (a as usize, b as usize);
            let lr = dist(ref_frame[a], ref_frame[b]);
            if lr == 0.0 {
                out.zero_length += 1;
                continue;
            }
            let r = dist(cur[a], cur[b]) / lr;
            out.pairs += 1;
            if r > tau || r < 1.0 / tau {
                out.anomalous += 1;
            }
        }
    }
    if out.pairs > 0 {
        out.ratio = out.anomalous as f64 / out.pairs as f64;
    }
    Ok(out)
}

/// Mean over `t ≥ 1` and `i` of `‖V^t[i] − V^{t−1}[i]‖`.
pub fn amd(seq: &DynamicMeshSequence) -> Result<f64> {
    let t_len = seq.num_frames();
    if t_len < 2 {
        return Err(Error::Argument(format!("average moving distance needs T >= 2, got {t_len}")));
    }
    let n = seq.num_vertices();
    if n == 0 {
        return Ok(0.0);
    }
    let total: f64 = seq
        .frames
        .windows(2)
        .flat_map(|w| w[1].iter().zip(&w[0]).map(|(p, q)| dist(*p, *q)))
        .sum();
    Ok(total / ((t_len - 1) * n) as f64)
}

/// All three metrics. AVE needs a sequence reference; AMD needs `T ≥ 2`.
pub fn report(recon: &DynamicMeshSequence, reference: EdgeReference, taus: &[f64]) -> Result<MetricReport> {
    let ave = match reference {
        EdgeReference::Sequence(r) => Some(ave(recon, r)?),
        EdgeReference::Mesh(_) => None,
    };
    let mut rho = Vec::with_capacity(taus.len());
    let mut zero = 0;
    for &tau in taus {
        let r = rho_abn(recon, reference, tau)?;
        zero = r.zero_length;
        rho.push((tau, r.ratio));
    }
    let amd = if recon.num_frames() >= 2 { Some(amd(recon)?) } else { None };
    Ok(MetricReport { ave, rho, amd, zero_length_edges: zero })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::Point;
    use crate::tensor::Rng;
    use crate::toy;
    use proptest::prelude::*;

    fn rotate(seq: &DynamicMeshSequence, angles: [f64; 2]) -> DynamicMeshSequence {
        let (sa, ca) = angles[0].sin_cos();
        let (sb, cb) = angles[1].sin_cos();
        let rot = |p: Point| {
            let q = [ca * p[0] - sa * p[1], sa * p[0] + ca * p[1], p[2]];
            [q[0], cb * q[1] - sb * q[2], sb * q[1] + cb * q[2]]
        };
        let mut out = seq.clone();
        for f in &mut out.frames {
            for p in f.iter_mut() {
                *p = rot(*p);
            }
        }
        out
    }

    fn perturb(seq: &DynamicMeshSequence, rng: &mut Rng, scale: f64) -> DynamicMeshSequence {
        let mut out = seq.clone();
        for f in out.frames.iter_mut().skip(1) {
            for p in f.iter_mut() {
                for v in p.iter_mut() {
                    *v += scale * rng.normal();
                }
            }
        }
        out
    }

    #[test]
    fn ave_examples() {
        let seq = toy::wave_sheet(4, 5);
        assert_eq!(ave(&seq, &seq).unwrap(), 0.0);
        let mut shifted = seq.clone();
        shifted.frames.iter_mut().flatten().for_each(|p| p[0] += 1.0);
        assert!((ave(&shifted, &seq).unwrap() - 1.0).abs() < 1e-12);
        assert!(ave(&seq, &toy::wave_sheet(4, 6)).is_err());
    }

    #[test]
    fn amd_examples() {
        let mesh = toy::grid(3, 3, 1.0);
        assert_eq!(amd(&DynamicMeshSequence::repeat(&mesh, 4)).unwrap(), 0.0);
        assert!((amd(&toy::drifting(&mesh, 6, 0.5)).unwrap() - 0.5).abs() < 1e-12);
        assert!(amd(&DynamicMeshSequence::repeat(&mesh, 1)).is_err());
    }

    #[test]
    fn rho_boundary_and_errors() {
        let mesh = toy::grid(3, 3, 1.0);
        let still = DynamicMeshSequence::repeat(&mesh, 3);
        let mut scaled = still.clone();
        for f in scaled.frames.iter_mut().skip(1) {
            for p in f.iter_mut() {
                *p = p.map(|v| v * 2.0);
            }
        }
        let r = rho_abn(&scaled, EdgeReference::Sequence(&still), 2.0).unwrap();
        // exact doubling is a boundary case, not anomalous
        assert_eq!(r.ratio, 0.0);
        let r = rho_abn(&scaled, EdgeReference::Mesh(&mesh), 1.5).unwrap();
        assert_eq!(r.ratio, 1.0);
        assert!(rho_abn(&still, EdgeReference::Mesh(&mesh), 1.0).is_err());
    }

    #[test]
    fn zero_length_reference_edges_are_counted_apart() {
        let mut mesh = toy::triangle();
        mesh.vertices[1] = mesh.vertices[0];
        let seq = DynamicMeshSequence::repeat(&mesh, 3);
        let r = rho_abn(&seq, EdgeReference::Sequence(&seq), 2.0).unwrap();
        assert_eq!(r.zero_length, 2);
        assert_eq!(r.pairs, 4);
    }

    #[test]
    fn rigid_rotation_invariance() {
        let mut rng = Rng::new(4);
        let gt = toy::twisting_tube(4, 6, 6);
        let rec = perturb(&gt, &mut rng, 0.05);
        let a = [0.7, -1.1];
        let (gr, rr) = (rotate(&gt, a), rotate(&rec, a));
        assert!((ave(&rec, &gt).unwrap() - ave(&rr, &gr).unwrap()).abs() < 1e-12);
        assert!((amd(&rec).unwrap() - amd(&rr).unwrap()).abs() < 1e-12);
        for tau in DEFAULT_TAUS {
            let x = rho_abn(&rec, EdgeReference::Sequence(&gt), tau).unwrap().ratio;
            let y = rho_abn(&rr, EdgeReference::Sequence(&gr), tau).unwrap().ratio;
            assert_eq!(x, y);
        }
    }

    proptest! {
        #[test]
        fn rho_is_monotone_in_tau(seed in 0u64..10_000, scale in 0.0f64..0.5) {
            let mut rng = Rng::new(seed);
            let gt = toy::wave_sheet(4, 5);
            let rec = perturb(&gt, &mut rng, scale);
            let r: Vec<f64> = DEFAULT_TAUS
                .iter()
                .map(|&t| rho_abn(&rec, EdgeReference::Sequence(&gt), t).unwrap().ratio)
                .collect();
            prop_assert!(r[0] >= r[1] && r[1] >= r[2]);
            prop_assert!(r.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }

        #[test]
        fn ave_and_amd_scale_linearly(s in 0.1f64..10.0, seed in 0u64..1000) {
            let mut rng = Rng::new(seed);
            let gt = toy::bending_bar(5, 5);
            let rec = perturb(&gt, &mut rng, 0.1);
            let scale = |q: &DynamicMeshSequence| {
                let mut o = q.clone();
                o.frames.iter_mut().flatten().for_each(|p| *p = p.map(|v| v * s));
                o
            };
            let (gs, rs) = (scale(&gt), scale(&rec));
            prop_assert!((ave(&rs, &gs).unwrap() - s * ave(&rec, &gt).unwrap()).abs() < 1e-9);
            prop_assert!((amd(&rs).unwrap() - s * amd(&rec).unwrap()).abs() < 1e-9);
        }
    }
}
