use crate::error::{Error, Result};
use crate::mesh::{dist, Point};
use crate::tensor::Tensor;

/// Frequency features over the last axis: each scalar `v` becomes
/// `[v, sin(2^0 π v), cos(2^0 π v), …, sin(2^(F-1) π v), cos(2^(F-1) π v)]`.
pub fn positional_encode(x: &Tensor, num_freq: usize) -> Tensor {
    let width = x.last_dim();
    let block = 1 + 2 * num_freq;
    let mut out = Vec::with_capacity(x.len() * block);
    for &v in x.data() {
        out.push(v);
        let mut f = std::f64::consts::PI;
        for _ in 0..num_freq {
            let (s, c) = (f * v).sin_cos();
            out.push(s);
            out.push(c);
            f *= 2.0;
        }
    }
    let mut shape = x.shape().to_vec();
    if shape.is_empty() {
        shape.push(block);
    } else {
        *shape.last_mut().unwrap() = width * block;
    }
    Tensor::new(shape, out).expect("encoding width")
}

/// Greedy farthest point sampling seeded at index 0. Each step takes the
/// unselected point with the largest distance to the selected set, the
/// lowest index winning ties.
pub fn fps(points: &[Point], n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > points.len() {
        return Err(Error::Argument(format!(
            "cannot sample {n} of {} points",
            points.len()
        )));
    }
    let mut chosen = Vec::with_capacity(n);
    let mut taken = vec![false; points.len()];
    let mut near = vec![f64::INFINITY; points.len()];
    let mut cur = 0;
    loop {
        chosen.push(cur);
        taken[cur] = true;
        if chosen.len() == n {
            return Ok(chosen);
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in points.iter().enumerate() {
            if taken[i] {
                continue;
            }
            near[i] = near[i].min(dist(*p, points[cur]));
            if best.is_none_or(|(_, d)| near[i] > d) {
                best = Some((i, near[i]));
            }
        }
        cur = best.expect("unselected point remains").0;
    }
}

/// `max(1, floor(N · ratio))`, capped at `N`.
pub fn fps_count(num_vertices: usize, ratio: f64) -> usize {
    ((num_vertices as f64 * ratio).floor() as usize).clamp(1, num_vertices.max(1))
}

/// Mean over elements of `½(μ² + σ² − 1 − 2 ln σ)`.
pub fn kl_divergence(mu: &[f64], log_sigma: &[f64]) -> f64 {
    let total: f64 = mu
        .iter()
        .zip(log_sigma)
        .map(|(m, ls)| 0.5 * (m * m + (2.0 * ls).exp() - 1.0 - 2.0 * ls))
        .sum();
    total / mu.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encoding_widths_and_values() {
        let x = Tensor::new([2, 3], vec![0.0, 0.0, 0.0, 0.25, -1.0, 2.0]).unwrap();
        assert_eq!(positional_encode(&x, 0), x);
        let e = positional_encode(&x, 8);
        assert_eq!(e.shape(), &[2, 51]);
        for j in 0..8 {
            assert_eq!(e.data()[1 + 2 * j], 0.0);
            assert_eq!(e.data()[2 + 2 * j], 1.0);
        }
        // sin(2π·0.25) = 1 for the second frequency of the first coordinate of row 1
        assert!((e.data()[51 + 3] - 1.0).abs() < 1e-15);
        assert_eq!(e.data()[51], 0.25);
        assert_eq!(positional_encode(&x, 10).shape(), &[2, 63]);
    }

    #[test]
    fn fps_examples() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.1, 0.0, 0.0], [0.9, 0.0, 0.0]];
        assert_eq!(fps(&pts, 2).unwrap(), vec![0, 1]);
        assert_eq!(fps(&pts, 4).unwrap(), vec![0, 1, 2, 3]);
        let same = [[0.5, 0.5, 0.5]; 3];
        assert_eq!(fps(&same, 2).unwrap(), vec![0, 1]);
        assert!(fps(&pts, 5).is_err());
        assert!(fps(&pts, 0).is_err());
    }

    #[test]
    fn fps_matches_exhaustive_greedy() {
        let mut rng = crate::tensor::Rng::new(11);
        let pts: Vec<Point> = (0..40).map(|_| [rng.normal(), rng.normal(), rng.normal()]).collect();
        let got = fps(&pts, 12).unwrap();
        let mut sel = vec![0usize];
        while sel.len() < 12 {
            let score = |i: usize| sel.iter().map(|&s| dist(pts[i], pts[s])).fold(f64::INFINITY, f64::min);
            let next = (0..pts.len())
                .filter(|i| !sel.contains(i))
                .fold(None, |acc: Option<usize>, i| match acc {
                    Some(b) if score(b) >= score(i) => Some(b),
                    _ => Some(i),
                })
                .unwrap();
            sel.push(next);
        }
        assert_eq!(got, sel);
    }

    #[test]
    fn fps_counts() {
        assert_eq!(fps_count(7, 0.125), 1);
        assert_eq!(fps_count(256, 0.125), 32);
        assert_eq!(fps_count(1, 0.125), 1);
    }

    #[test]
    fn kl_closed_form() {
        assert_eq!(kl_divergence(&[0.0; 4], &[0.0; 4]), 0.0);
        assert!((kl_divergence(&[1.0; 3], &[0.0; 3]) - 0.5).abs() < 1e-15);
    }
}
