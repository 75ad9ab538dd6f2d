//! Small procedural meshes and animations used by tests, the self-test and
//! examples.

use std::f64::consts::PI;

use crate::mesh::{DynamicMeshSequence, Face, Point, TriangleMesh};
use crate::tensor::Rng;

/// `nx × ny` vertex grid in the `z = 0` plane spanning `[-w/2, w/2]` on
/// each axis, two triangles per cell.
pub fn grid(nx: usize, ny: usize, w: f64) -> TriangleMesh {
    let mut vertices = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let x = w * (i as f64 / (nx - 1).max(1) as f64 - 0.5);
            let y = w * (j as f64 / (ny - 1).max(1) as f64 - 0.5);
            vertices.push([x, y, 0.0]);
        }
    }
    TriangleMesh { faces: grid_faces(nx, ny, 0), vertices }
}

fn grid_faces(nx: usize, ny: usize, base: usize) -> Vec<Face> {
    let mut faces = Vec::new();
    for j in 0..ny.saturating_sub(1) {
        for i in 0..nx.saturating_sub(1) {
            let a = (base + j * nx + i) as u32;
            let b = a + 1;
            let c = a + nx as u32;
            let d = c + 1;
            faces.push([a, b, d]);
            faces.push([a, d, c]);
        }
    }
    faces
}

pub fn triangle() -> TriangleMesh {
    TriangleMesh {
        faces: vec![[0, 1, 2]],
        vertices: vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
    }
}

pub fn cube() -> TriangleMesh {
    let vertices = (0..8)
        .map(|i| [(i & 1) as f64 - 0.5, ((i >> 1) & 1) as f64 - 0.5, ((i >> 2) & 1) as f64 - 0.5])
        .collect();
    let faces = vec![
        [0, 2, 3], [0, 3, 1], [4, 5, 7], [4, 7, 6], [0, 1, 5], [0, 5, 4],
        [2, 6, 7], [2, 7, 3], [0, 4, 6], [0, 6, 2], [1, 3, 7], [1, 7, 5],
    ];
    TriangleMesh { faces, vertices }
}

/// Random planar triangulation: jittered grid with randomly flipped cell
/// diagonals, then a random vertex relabelling.
pub fn random_triangulation(rng: &mut Rng, max_vertices: usize) -> TriangleMesh {
    let side_max = ((max_vertices as f64).sqrt() as usize).max(2);
    let nx = 2 + rng.below(side_max - 1);
    let ny = 2 + rng.below((max_vertices / nx).clamp(2, side_max) - 1);
    let mut perm: Vec<usize> = (0..nx * ny).collect();
    for i in (1..perm.len()).rev() {
        perm.swap(i, rng.below(i + 1));
    }
    let mut vertices = vec![[0.0; 3]; nx * ny];
    for j in 0..ny {
        for i in 0..nx {
            vertices[perm[j * nx + i]] = [i as f64 + 0.3 * rng.uniform(), j as f64 + 0.3 * rng.uniform(), 0.0];
        }
    }
    let mut faces = Vec::new();
    for j in 0..ny - 1 {
        for i in 0..nx - 1 {
            let [a, b, c, d] = [j * nx + i, j * nx + i + 1, (j + 1) * nx + i, (j + 1) * nx + i + 1].map(|v| perm[v] as u32);
            if rng.uniform() < 0.5 {
                faces.push([a, b, d]);
                faces.push([a, d, c]);
            } else {
                faces.push([a, b, c]);
                faces.push([b, d, c]);
            }
        }
    }
    TriangleMesh { faces, vertices }
}

fn animate(mesh: &TriangleMesh, frames: usize, f: impl Fn(Point, usize, f64) -> Point) -> DynamicMeshSequence {
    let frames = (0..frames)
        .map(|t| {
            let s = t as f64 / (frames.max(2) - 1) as f64;
            mesh.vertices.iter().enumerate().map(|(i, &p)| f(p, i, s)).collect()
        })
        .collect();
    DynamicMeshSequence { faces: mesh.faces.clone(), frames, caption: None }
}

/// Travelling wave across a sheet.
pub fn wave_sheet(n: usize, frames: usize) -> DynamicMeshSequence {
    let mesh = grid(n, n, 1.0);
    animate(&mesh, frames, |p, _, s| [p[0], p[1], 0.15 * (2.0 * PI * (p[0] - 0.5 * s)).sin() * s])
}

/// Two parallel sheets 0.04 apart: the upper slides along `+y`, the lower
/// swings about the `z` axis. Spatially close, topologically separate.
pub fn sliding_sheets(n: usize, frames: usize) -> DynamicMeshSequence {
    let top = grid(n, n, 0.8);
    let mut vertices = top.vertices.clone();
    let m = vertices.len();
    vertices.extend(top.vertices.iter().map(|p| [p[0], p[1], -0.04]));
    let mut faces = top.faces.clone();
    faces.extend(grid_faces(n, n, m));
    let mesh = TriangleMesh { faces, vertices };
    animate(&mesh, frames, |p, i, s| {
        if i < m {
            [p[0], p[1] + 0.3 * s, p[2]]
        } else {
            let a = 0.5 * s;
            let (sn, cs) = a.sin_cos();
            [cs * p[0] - sn * p[1], sn * p[0] + cs * p[1], p[2]]
        }
    })
}

/// Strip bending upward around its midpoint.
pub fn bending_bar(len: usize, frames: usize) -> DynamicMeshSequence {
    let mut mesh = grid(len, 3, 1.0);
    for p in &mut mesh.vertices {
        p[1] *= 0.15;
    }
    animate(&mesh, frames, |p, _, s| {
        let k = 2.0 * s;
        let theta = k * p[0];
        if k.abs() < 1e-9 {
            p
        } else {
            let r = 1.0 / k;
            [r * theta.sin(), p[1], r * (1.0 - theta.cos())]
        }
    })
}

/// Open tube twisting about its axis, the twist growing with height.
pub fn twisting_tube(rings: usize, around: usize, frames: usize) -> DynamicMeshSequence {
    let mut vertices = Vec::new();
    for r in 0..rings {
        let z = r as f64 / (rings - 1) as f64 - 0.5;
        for a in 0..around {
            let phi = 2.0 * PI * a as f64 / around as f64;
            vertices.push([0.25 * phi.cos(), 0.25 * phi.sin(), z]);
        }
    }
    let mut faces = Vec::new();
    for r in 0..rings - 1 {
        for a in 0..around {
            let i0 = (r * around + a) as u32;
            let i1 = (r * around + (a + 1) % around) as u32;
            let j0 = i0 + around as u32;
            let j1 = i1 + around as u32;
            faces.push([i0, i1, j1]);
            faces.push([i0, j1, j0]);
        }
    }
    let mesh = TriangleMesh { faces, vertices };
    animate(&mesh, frames, |p, _, s| {
        let a = 1.2 * s * (p[2] + 0.5);
        let (sn, cs) = a.sin_cos();
        [cs * p[0] - sn * p[1], sn * p[0] + cs * p[1], p[2]]
    })
}

/// Uniform drift of `step` per frame along `x`.
pub fn drifting(mesh: &TriangleMesh, frames: usize, step: f64) -> DynamicMeshSequence {
    let frames = (0..frames)
        .map(|t| mesh.vertices.iter().map(|p| [p[0] + step * t as f64, p[1], p[2]]).collect())
        .collect();
    DynamicMeshSequence { faces: mesh.faces.clone(), frames, caption: None }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_are_valid() {
        for seq in [wave_sheet(6, 16), sliding_sheets(5, 16), bending_bar(12, 16), twisting_tube(6, 8, 16)] {
            assert!(DynamicMeshSequence::new(seq.faces.clone(), seq.frames.clone()).is_ok());
            assert_eq!(seq.num_frames(), 16);
        }
        let mut rng = Rng::new(2);
        for _ in 0..20 {
            let m = random_triangulation(&mut rng, 500);
            assert!(m.num_vertices() <= 500 && m.num_vertices() >= 4);
            assert!(TriangleMesh::new(m.faces.clone(), m.vertices.clone()).is_ok());
        }
        assert_eq!(cube().num_faces(), 12);
    }
}
