//! Quick oracle checks runnable from the command line.

use std::io::Write;
use std::path::Path;

use crate::chunking::{split_chunks, tdgw_blend, BlendOrientation, ChunkConfig};
use crate::dataset::{decode_dms, encode_dms};
use crate::error::Result;
use crate::mesh::decompose_trajectory;
use crate::metrics::{report, EdgeReference};
use crate::sgtt::{euler_sample, sample_timestep, timestep_cdf};
use crate::tensor::{grad_check, masked_softmax, Rng, Tensor};
use crate::topology::{bfs_band_oracle, hop_bands, one_hop};
use crate::toy;

type Check = (&'static str, fn() -> Result<bool>);

const CHECKS: &[Check] = &[
    ("hop bands match breadth-first search", hop_bands_match),
    ("masked softmax rows are distributions", softmax_rows),
    ("attention gradient matches finite differences", attention_grad),
    ("trajectory round trip through chunks", chunk_round_trip),
    ("timestep sampler follows its CDF", timestep_ks),
    ("Euler sampler solves the linear flow", euler_linear),
    ("metrics vanish on identical sequences", metrics_identity),
    ("container bytes round trip", container_round_trip),
];

/// Runs every check, writing one `PASS`/`FAIL` line each. Returns whether
/// all passed.
pub fn run(out: &mut dyn Write) -> Result<bool> {
    let mut all = true;
    for (name, check) in CHECKS {
        let ok = check().unwrap_or(false);
        all &= ok;
        let _ = writeln!(out, "{} {name}", if ok { "PASS" } else { "FAIL" });
    }
    Ok(all)
}

fn hop_bands_match() -> Result<bool> {
    let mut rng = Rng::new(11);
    for _ in 0..20 {
        let mesh = toy::random_triangulation(&mut rng, 40);
        let adj = one_hop(&mesh)?;
        if hop_bands(&adj, 4) != bfs_band_oracle(&adj, 4) {
            return Ok(false);
        }
    }
    Ok(true)
}

fn softmax_rows() -> Result<bool> {
    let mut rng = Rng::new(12);
    let logits = rng.normal_tensor([6, 5]).map(|x| 30.0 * x);
    let mask = Tensor::new([5], vec![0.0, f64::NEG_INFINITY, 0.0, (1e-8f64).ln(), 0.0])?;
    let p = masked_softmax(&logits, &mask)?;
    Ok(p.data().chunks(5).all(|r| (r.iter().sum::<f64>() - 1.0).abs() < 1e-12 && r[1] == 0.0))
}

fn attention_grad() -> Result<bool> {
    let mut rng = Rng::new(13);
    let x = rng.normal_tensor([4, 3]);
    let mask = Tensor::new([4, 4], (0..16).map(|k| if (k / 4 + k % 4) % 3 == 2 { -1e3 } else { 0.0 }).collect())?;
    let err = grad_check(
        |g, x| {
            let h = g.layer_norm(x, 1e-5)?;
            let ht = g.transpose(h)?;
            let s = g.matmul(h, ht)?;
            let a = g.masked_softmax(s, Some(&mask))?;
            let y = g.matmul(a, x)?;
            let y = g.square(y)?;
            g.sum(y)
        },
        &x,
        1e-6,
    )?;
    Ok(err < 1e-6)
}

fn chunk_round_trip() -> Result<bool> {
    let seq = toy::wave_sheet(4, 37);
    let traj = decompose_trajectory(&seq);
    let chunked = split_chunks(&traj, ChunkConfig::default())?;
    let blended = tdgw_blend(&chunked, BlendOrientation::default())?;
    let back = blended.recompose(&seq.faces);
    let diff = seq
        .frames
        .iter()
        .flatten()
        .zip(back.frames.iter().flatten())
        .flat_map(|(a, b)| (0..3).map(move |k| (a[k] - b[k]).abs()))
        .fold(0.0, f64::max);
    Ok(diff < 1e-12)
}

fn timestep_ks() -> Result<bool> {
    let mut rng = Rng::new(14);
    let mut t: Vec<f64> = (0..20_000).map(|_| sample_timestep(rng.uniform())).collect();
    t.sort_by(f64::total_cmp);
    let n = t.len() as f64;
    let ks = t
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let c = timestep_cdf(x);
            (c - i as f64 / n).abs().max((c - (i + 1) as f64 / n).abs())
        })
        .fold(0.0, f64::max);
    Ok(ks < 0.02)
}

fn euler_linear() -> Result<bool> {
    let mut rng = Rng::new(15);
    let target = rng.normal_tensor([2, 3, 4]);
    let noise = rng.normal_tensor([2, 3, 4]);
    let v = Tensor::new(
        target.shape().to_vec(),
        target.data().iter().zip(noise.data()).map(|(a, b)| a - b).collect(),
    )?;
    let out = euler_sample(noise, 16, |_, _| Ok(v.clone()))?;
    Ok(out.max_abs_diff(&target) < 1e-12)
}

fn metrics_identity() -> Result<bool> {
    let seq = toy::twisting_tube(4, 6, 10);
    let m = report(&seq, EdgeReference::Sequence(&seq), &[2.0, 5.0])?;
    Ok(m.ave == Some(0.0) && m.rho.iter().all(|(_, r)| *r == 0.0))
}

fn container_round_trip() -> Result<bool> {
    let bytes = encode_dms(&toy::bending_bar(5, 8));
    let seq = decode_dms(&bytes, Path::new("<memory>"))?;
    Ok(encode_dms(&seq) == bytes)
}

#[cfg(test)]
mod tests {
    #[test]
    fn every_check_passes() {
        let mut out = Vec::new();
        let ok = super::run(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(ok, "{text}");
        assert_eq!(text.lines().count(), super::CHECKS.len());
    }
}
