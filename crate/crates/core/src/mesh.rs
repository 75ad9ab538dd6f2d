//! Dynamic mesh sequences and the geometric preprocessing applied to them:
//! duplicate-vertex merging, centroid normalization, trajectory
//! decomposition, area-weighted vertex normals and edge extraction.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub type Point = [f64; 3];
pub type Face = [u32; 3];

#[inline]
pub fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn cross(a: Point, b: Point) -> Point {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm(a: Point) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

#[inline]
pub fn dist(a: Point, b: Point) -> f64 {
    norm(sub(a, b))
}

fn check_faces(faces: &[Face], n: usize) -> Result<()> {
    for f in faces {
        for &i in f {
            if i as usize >= n {
                return Err(Error::Index {
                    index: i as usize,
                    len: n,
                });
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TriangleMesh {
    pub faces: Vec<Face>,
    pub vertices: Vec<Point>,
}

impl TriangleMesh {
    pub fn new(faces: Vec<Face>, vertices: Vec<Point>) -> Result<Self> {
        check_faces(&faces, vertices.len())?;
        Ok(TriangleMesh { faces, vertices })
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_faces(&self) -> usize {
        self.faces.len()
    }
}

/// Static faces with per-frame vertex positions (`frames[t][i]`).
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicMeshSequence {
    pub faces: Vec<Face>,
    pub frames: Vec<Vec<Point>>,
    pub caption: Option<String>,
}

impl DynamicMeshSequence {
    pub fn new(faces: Vec<Face>, frames: Vec<Vec<Point>>) -> Result<Self> {
        let n = frames.first().map_or(0, |f| f.len());
        if let Some((t, f)) = frames.iter().enumerate().find(|(_, f)| f.len() != n) {
            return Err(Error::Argument(format!(
                "frame {t} has {} vertices, frame 0 has {n}",
                f.len()
            )));
        }
        check_faces(&faces, n)?;
        Ok(DynamicMeshSequence {
            faces,
            frames,
            caption: None,
        })
    }

    /// `T` copies of a static mesh.
    pub fn repeat(mesh: &TriangleMesh, frames: usize) -> Self {
        DynamicMeshSequence {
            faces: mesh.faces.clone(),
            frames: vec![mesh.vertices.clone(); frames],
            caption: None,
        }
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn num_vertices(&self) -> usize {
        self.frames.first().map_or(0, |f| f.len())
    }

    pub fn num_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn mesh_at(&self, t: usize) -> TriangleMesh {
        TriangleMesh {
            faces: self.faces.clone(),
            vertices: self.frames[t].clone(),
        }
    }

    /// Frames in reverse order. An involution: applying it twice is the
    /// identity, bit for bit.
    pub fn reversed(&self) -> Self {
        let mut out = self.clone();
        out.frames.reverse();
        out
    }

    /// Frames `[start, start + len)`.
    pub fn slice(&self, start: usize, len: usize) -> Self {
        DynamicMeshSequence {
            faces: self.faces.clone(),
            frames: self.frames[start..start + len].to_vec(),
            caption: self.caption.clone(),
        }
    }

    /// Largest single-vertex displacement between consecutive frames.
    pub fn max_interframe_displacement(&self) -> f64 {
        self.frames
            .windows(2)
            .flat_map(|w| w[0].iter().zip(&w[1]).map(|(a, b)| dist(*a, *b)))
            .fold(0.0, f64::max)
    }
}

/// `V^t = V_0 + V_T^t`, with offsets flattened per vertex as
/// `offsets[i * 3T + 3t + k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RelativeTrajectory {
    pub initial: Vec<Point>,
    pub offsets: Vec<f64>,
    pub frames: usize,
}

impl RelativeTrajectory {
    pub fn num_vertices(&self) -> usize {
        self.initial.len()
    }

    /// Row width of the offset matrix, `3T`.
    pub fn width(&self) -> usize {
        self.frames * 3
    }

    pub fn offset(&self, vertex: usize, t: usize) -> Point {
        let b = vertex * self.width() + 3 * t;
        [self.offsets[b], self.offsets[b + 1], self.offsets[b + 2]]
    }

    pub fn recompose(&self, faces: &[Face]) -> DynamicMeshSequence {
        let frames = (0..self.frames)
            .map(|t| {
                self.initial
                    .iter()
                    .enumerate()
                    .map(|(i, p)| {
                        let o = self.offset(i, t);
                        [p[0] + o[0], p[1] + o[1], p[2] + o[2]]
                    })
                    .collect()
            })
            .collect();
        DynamicMeshSequence {
            faces: faces.to_vec(),
            frames,
            caption: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VertexNormals {
    pub normals: Vec<Point>,
    pub degenerate: Vec<bool>,
}

fn cell_key(p: Point, cell: f64) -> [i64; 3] {
    if cell > 0.0 {
        [
            (p[0] / cell).floor() as i64,
            (p[1] / cell).floor() as i64,
            (p[2] / cell).floor() as i64,
        ]
    } else {
        [p[0].to_bits() as i64, p[1].to_bits() as i64, p[2].to_bits() as i64]
    }
}

/// Greedy merge in index order: a vertex joins the first surviving vertex
/// for which `same(survivor, candidate)` holds; candidates come from the
/// 27 hash cells (cell size `tol`) around the frame-0 position.
fn merge_by<F>(points: &[Point], tol: f64, same: F) -> (Vec<usize>, Vec<usize>)
where
    F: Fn(usize, usize) -> bool,
{
    let mut grid: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    let mut survivors = Vec::new();
    let mut remap = vec![0; points.len()];
    for (i, &p) in points.iter().enumerate() {
        let key = cell_key(p, tol);
        let mut found = None;
        let span: &[i64] = if tol > 0.0 { &[-1, 0, 1] } else { &[0] };
        'search: for &dx in span {
            for &dy in span {
                for &dz in span {
                    let k = [key[0] + dx, key[1] + dy, key[2] + dz];
                    if let Some(list) = grid.get(&k) {
                        for &s in list {
                            if same(survivors[s], i) {
                                found = Some(s);
                                break 'search;
                            }
                        }
                    }
                }
            }
        }
        match found {
            Some(s) => remap[i] = s,
            None => {
                remap[i] = survivors.len();
                grid.entry(key).or_default().push(survivors.len());
                survivors.push(i);
            }
        }
    }
    (survivors, remap)
}

fn remap_faces(faces: &[Face], remap: &[usize]) -> Vec<Face> {
    faces
        .iter()
        .map(|f| f.map(|i| remap[i as usize] as u32))
        .filter(|f| f[0] != f[1] && f[1] != f[2] && f[0] != f[2])
        .collect()
}

/// Merges vertices within `tol` of an earlier survivor (lowest original
/// index wins) and drops faces that collapse. Returns the merged mesh and
/// the old→new index map.
pub fn merge_duplicate_vertices(mesh: &TriangleMesh, tol: f64) -> (TriangleMesh, Vec<usize>) {
    let pts = &mesh.vertices;
    let (survivors, remap) = merge_by(pts, tol, |s, i| dist(pts[s], pts[i]) <= tol);
    let vertices = survivors.iter().map(|&s| pts[s]).collect();
    let faces = remap_faces(&mesh.faces, &remap);
    (TriangleMesh { faces, vertices }, remap)
}

/// Sequence variant: two vertices merge only when they coincide (within
/// `tol`) in every frame, so no motion is lost.
pub fn merge_duplicate_sequence_vertices(
    seq: &DynamicMeshSequence,
    tol: f64,
) -> (DynamicMeshSequence, Vec<usize>) {
    if seq.frames.is_empty() {
        return (seq.clone(), Vec::new());
    }
    let frames = &seq.frames;
    let (survivors, remap) = merge_by(&frames[0], tol, |s, i| {
        frames.iter().all(|f| dist(f[s], f[i]) <= tol)
    });
    let out_frames = frames
        .iter()
        .map(|f| survivors.iter().map(|&s| f[s]).collect())
        .collect();
    let out = DynamicMeshSequence {
        faces: remap_faces(&seq.faces, &remap),
        frames: out_frames,
        caption: seq.caption.clone(),
    };
    (out, remap)
}

fn centroid(points: &[Point]) -> Point {
    let n = points.len().max(1) as f64;
    let mut c = [0.0; 3];
    for p in points {
        for k in 0..3 {
            c[k] += p[k];
        }
    }
    c.map(|v| v / n)
}

/// Shifts every frame by the negated frame-0 centroid.
pub fn centroid_normalize(seq: &DynamicMeshSequence) -> DynamicMeshSequence {
    let mut out = seq.clone();
    if let Some(first) = seq.frames.first() {
        let c = centroid(first);
        for frame in &mut out.frames {
            for p in frame.iter_mut() {
                *p = sub(*p, c);
            }
        }
    }
    out
}

pub fn decompose_trajectory(seq: &DynamicMeshSequence) -> RelativeTrajectory {
    let t_len = seq.num_frames();
    let n = seq.num_vertices();
    let initial = seq.frames.first().cloned().unwrap_or_default();
    let mut offsets = vec![0.0; n * 3 * t_len];
    for (t, frame) in seq.frames.iter().enumerate() {
        for (i, p) in frame.iter().enumerate() {
            let d = sub(*p, initial[i]);
            offsets[i * 3 * t_len + 3 * t..i * 3 * t_len + 3 * t + 3].copy_from_slice(&d);
        }
    }
    RelativeTrajectory {
        initial,
        offsets,
        frames: t_len,
    }
}

/// Area-weighted vertex normals. Vertices whose weighted sum is shorter than
/// `1e-12` get a zero normal and a degenerate flag.
pub fn vertex_normals(mesh: &TriangleMesh) -> VertexNormals {
    let v = &mesh.vertices;
    let mut acc = vec![[0.0; 3]; v.len()];
    for f in &mesh.faces {
        let [a, b, c] = f.map(|i| v[i as usize]);
        // |cross| is twice the area and the direction is the face normal
        let w = cross(sub(b, a), sub(c, a)).map(|x| 0.5 * x);
        for &i in f {
            for k in 0..3 {
                acc[i as usize][k] += w[k];
            }
        }
    }
    let mut degenerate = vec![false; v.len()];
    let normals = acc
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let l = norm(s);
            if l < 1e-12 {
                degenerate[i] = true;
                [0.0; 3]
            } else {
                s.map(|x| x / l)
            }
        })
        .collect();
    VertexNormals {
        normals,
        degenerate,
    }
}

/// Undirected edges as sorted `(min, max)` pairs, each listed once.
pub fn edge_set(faces: &[Face]) -> Vec<(u32, u32)> {
    let mut edges: Vec<(u32, u32)> = faces
        .iter()
        .flat_map(|f| [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])])
        .filter(|(a, b)| a != b)
        .map(|(a, b)| (a.min(b), a.max(b)))
        .collect();
    edges.sort_unstable();
    edges.dedup();
    edges
}
