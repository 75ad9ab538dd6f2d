//! Overlapping chunk segmentation of relative trajectories and the
//! time-dependent cross-fade that stitches decoded chunks back together.

use crate::error::{Error, Result};
use crate::mesh::{Point, RelativeTrajectory};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChunkConfig {
    /// `L_S`: frames owned by each chunk.
    pub stride: usize,
    /// `L_C`: chunk length including the overlap with its predecessor.
    pub chunk: usize,
}

impl Default for ChunkConfig {
    fn default() -> Self {
        ChunkConfig {
            stride: 16,
            chunk: 24,
        }
    }
}

impl ChunkConfig {
    pub fn new(stride: usize, chunk: usize) -> Result<Self> {
        let cfg = ChunkConfig { stride, chunk };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.stride > self.chunk {
            return Err(Error::Config(format!(
                "chunk config needs 0 < stride <= chunk, got stride {} chunk {}",
                self.stride, self.chunk
            )));
        }
        Ok(())
    }

    /// `L_O = L_C - L_S`
    pub fn overlap(&self) -> usize {
        self.chunk - self.stride
    }

    /// `ceil(T / L_S)`
    pub fn num_chunks(&self, frames: usize) -> usize {
        frames.div_ceil(self.stride)
    }

    /// Frames after tail padding: `num_chunks · L_S`.
    pub fn padded_len(&self, frames: usize) -> usize {
        self.num_chunks(frames) * self.stride
    }

    /// First (possibly negative) frame index covered by chunk `i`.
    pub fn chunk_start(&self, i: usize) -> isize {
        ((i + 1) * self.stride) as isize - self.chunk as isize
    }
}

/// Which side of an overlap fades out.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BlendOrientation {
    /// `W(t) = (L_O - t) / (L_O + 1)`: the earlier chunk fades out.
    #[default]
    ProseDecay,
    /// `W(t) = (t + 1) / (L_O + 1)`.
    AsWritten,
}

impl BlendOrientation {
    /// Weight of the earlier chunk at overlap step `t`.
    pub fn weight(self, t: usize, overlap: usize) -> f64 {
        let denom = (overlap + 1) as f64;
        match self {
            BlendOrientation::ProseDecay => (overlap - t) as f64 / denom,
            BlendOrientation::AsWritten => (t + 1) as f64 / denom,
        }
    }
}

impl std::str::FromStr for BlendOrientation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prose-decay" => Ok(BlendOrientation::ProseDecay),
            "as-written" => Ok(BlendOrientation::AsWritten),
            other => Err(Error::Config(format!("unknown blend orientation {other:?}"))),
        }
    }
}

impl std::fmt::Display for BlendOrientation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BlendOrientation::ProseDecay => "prose-decay",
            BlendOrientation::AsWritten => "as-written",
        })
    }
}

/// Per-chunk offset matrices, each `N × (L_C·3)` row-major, plus what is
/// needed to reassemble them.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkedTrajectory {
    pub chunks: Vec<Vec<f64>>,
    pub config: ChunkConfig,
    /// Original length `T` before tail padding.
    pub frames: usize,
    pub initial: Vec<Point>,
}

impl ChunkedTrajectory {
    pub fn num_vertices(&self) -> usize {
        self.initial.len()
    }

    pub fn num_chunks(&self) -> usize {
        self.chunks.len()
    }

    /// Row width of each chunk, `L_C·3`.
    pub fn width(&self) -> usize {
        self.config.chunk * 3
    }
}

/// Splits offsets into overlapping chunks. Chunk `i` covers frames
/// `[(i+1)·L_S - L_C, (i+1)·L_S)`; frames before 0 are zeros and frames past
/// the end repeat the last frame.
pub fn split_chunks(traj: &RelativeTrajectory, cfg: ChunkConfig) -> Result<ChunkedTrajectory> {
    cfg.validate()?;
    let t_len = traj.frames;
    if t_len == 0 {
        return Err(Error::Argument("cannot chunk an empty trajectory".into()));
    }
    let n = traj.num_vertices();
    let src_w = traj.width();
    let w = cfg.chunk * 3;
    let chunks = (0..cfg.num_chunks(t_len))
        .map(|i| {
            let start = cfg.chunk_start(i);
            let mut c = vec![0.0; n * w];
            for p in 0..cfg.chunk {
                let f = start + p as isize;
                if f < 0 {
                    continue;
                }
                let f = (f as usize).min(t_len - 1);
                for v in 0..n {
                    let src = v * src_w + 3 * f;
                    let dst = v * w + 3 * p;
                    c[dst..dst + 3].copy_from_slice(&traj.offsets[src..src + 3]);
                }
            }
            c
        })
        .collect();
    Ok(ChunkedTrajectory {
        chunks,
        config: cfg,
        frames: t_len,
        initial: traj.initial.clone(),
    })
}

/// Reassembles chunks. Owned frames are copied; overlap frames are blended
/// as `W(t)·current + (1 - W(t))·next[t]`, where `current` is the value the
/// earlier chunks left at that frame (the previous chunk's value whenever
/// `L_O ≤ L_S`). The padded tail is trimmed back to `T` frames.
pub fn tdgw_blend(chunked: &ChunkedTrajectory, orientation: BlendOrientation) -> Result<RelativeTrajectory> {
    let cfg = chunked.config;
    cfg.validate()?;
    let n = chunked.num_vertices();
    let w = chunked.width();
    let expected = cfg.num_chunks(chunked.frames);
    if chunked.chunks.len() != expected {
        return Err(Error::dim(
            "tdgw_blend",
            format!("{} chunks for {} frames, expected {expected}", chunked.chunks.len(), chunked.frames),
        ));
    }
    if let Some(c) = chunked.chunks.iter().find(|c| c.len() != n * w) {
        return Err(Error::dim("tdgw_blend", format!("chunk of {} values, expected {}", c.len(), n * w)));
    }
    let overlap = cfg.overlap();
    let padded = cfg.padded_len(chunked.frames);
    let out_w = padded * 3;
    let mut out = vec![0.0; n * out_w];
    for (i, chunk) in chunked.chunks.iter().enumerate() {
        let start = cfg.chunk_start(i);
        for p in 0..cfg.chunk {
            let f = start + p as isize;
            if f < 0 {
                continue;
            }
            let f = f as usize;
            let blend = p < overlap;
            let wt = if blend { orientation.weight(p, overlap) } else { 0.0 };
            for v in 0..n {
                for k in 0..3 {
                    let o = &mut out[v * out_w + 3 * f + k];
                    let next = chunk[v * w + 3 * p + k];
                    *o = if blend { wt * *o + (1.0 - wt) * next } else { next };
                }
            }
        }
    }
    let t_len = chunked.frames;
    let mut offsets = Vec::with_capacity(n * t_len * 3);
    for v in 0..n {
        offsets.extend_from_slice(&out[v * out_w..v * out_w + 3 * t_len]);
    }
    Ok(RelativeTrajectory {
        initial: chunked.initial.clone(),
        offsets,
        frames: t_len,
    })
}

/// For each chunk boundary frame `b = k·L_S < T`, the largest per-vertex
/// jump `‖V^b - V^{b-1}‖` divided by the median inter-frame displacement
/// (the mean when the median is zero). A static sequence scores 0.
pub fn continuity_score(traj: &RelativeTrajectory, cfg: ChunkConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let t_len = traj.frames;
    if t_len < 2 {
        return Err(Error::Argument("continuity needs at least 2 frames".into()));
    }
    let n = traj.num_vertices();
    let step = |v: usize, t: usize| {
        let a = traj.offset(v, t);
        let b = traj.offset(v, t - 1);
        crate::mesh::dist(a, b)
    };
    let mut all: Vec<f64> = (1..t_len).flat_map(|t| (0..n).map(move |v| (v, t))).map(|(v, t)| step(v, t)).collect();
    all.sort_by(f64::total_cmp);
    let median = if all.is_empty() {
        0.0
    } else if all.len() % 2 == 1 {
        all[all.len() / 2]
    } else {
        0.5 * (all[all.len() / 2 - 1] + all[all.len() / 2])
    };
    let scale = if median > 0.0 {
        median
    } else {
        all.iter().sum::<f64>() / all.len().max(1) as f64
    };
    let scores = (1..)
        .map(|k| k * cfg.stride)
        .take_while(|&b| b < t_len)
        .map(|b| {
            let jump = (0..n).map(|v| step(v, b)).fold(0.0, f64::max);
            if scale > 0.0 {
                jump / scale
            } else {
                0.0
            }
        })
        .collect();
    Ok(scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Trajectory where offset of vertex v at frame t, axis k is a distinct value.
    fn labelled(n: usize, t_len: usize) -> RelativeTrajectory {
        let mut offsets = vec![0.0; n * t_len * 3];
        for v in 0..n {
            for t in 1..t_len {
                for k in 0..3 {
                    offsets[v * t_len * 3 + 3 * t + k] = (v * 1000 + t * 10 + k) as f64 * 0.001;
                }
            }
        }
        RelativeTrajectory { initial: vec![[0.0; 3]; n], offsets, frames: t_len }
    }

    fn frame_of(c: &ChunkedTrajectory, chunk: usize, v: usize, p: usize) -> Point {
        let w = c.width();
        let s = &c.chunks[chunk][v * w + 3 * p..v * w + 3 * p + 3];
        [s[0], s[1], s[2]]
    }

    #[test]
    fn two_chunks_for_32_frames() {
        let tr = labelled(2, 32);
        let c = split_chunks(&tr, ChunkConfig::default()).unwrap();
        assert_eq!(c.num_chunks(), 2);
        for p in 0..24 {
            assert_eq!(frame_of(&c, 1, 1, p), tr.offset(1, 8 + p));
        }
        // trailing overlap of chunk 0 equals leading overlap of chunk 1
        for p in 0..8 {
            assert_eq!(frame_of(&c, 0, 0, 16 + p), frame_of(&c, 1, 0, p));
        }
    }

    #[test]
    fn single_chunk_is_padded_with_zeros() {
        let tr = labelled(3, 16);
        let c = split_chunks(&tr, ChunkConfig::default()).unwrap();
        assert_eq!(c.num_chunks(), 1);
        for p in 0..8 {
            assert_eq!(frame_of(&c, 0, 2, p), [0.0; 3]);
        }
        for p in 8..24 {
            assert_eq!(frame_of(&c, 0, 2, p), tr.offset(2, p - 8));
        }
    }

    #[test]
    fn ragged_tail_repeats_last_frame() {
        let tr = labelled(1, 40);
        let c = split_chunks(&tr, ChunkConfig::default()).unwrap();
        assert_eq!(c.num_chunks(), 3);
        // chunk 2 covers frames 24..48, frames 40..47 repeat frame 39
        for p in 16..24 {
            assert_eq!(frame_of(&c, 2, 0, p), tr.offset(0, 39));
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(ChunkConfig::new(0, 4).is_err());
        assert!(ChunkConfig::new(5, 4).is_err());
        let tr = labelled(1, 4);
        assert!(split_chunks(&tr, ChunkConfig { stride: 8, chunk: 4 }).is_err());
    }

    #[test]
    fn blend_midpoint_value() {
        // prev overlap value 0, next value 1, first overlap step
        let cfg = ChunkConfig::default();
        let mut c = split_chunks(&labelled(1, 32), cfg).unwrap();
        c.chunks[0].iter_mut().for_each(|v| *v = 0.0);
        c.chunks[1].iter_mut().for_each(|v| *v = 1.0);
        let out = tdgw_blend(&c, BlendOrientation::ProseDecay).unwrap();
        assert!((BlendOrientation::ProseDecay.weight(0, 8) - 8.0 / 9.0).abs() < 1e-15);
        // overlap step 0 sits at frame 8
        assert!((out.offset(0, 8)[0] - 1.0 / 9.0).abs() < 1e-15);
        let out = tdgw_blend(&c, BlendOrientation::AsWritten).unwrap();
        assert!((out.offset(0, 8)[0] - 8.0 / 9.0).abs() < 1e-15);
        // owned frames of chunk 0 before the overlap are copied
        assert_eq!(out.offset(0, 7)[0], 0.0);
        assert_eq!(out.offset(0, 16)[0], 1.0);
    }

    #[test]
    fn blend_rejects_bad_shapes() {
        let mut c = split_chunks(&labelled(2, 20), ChunkConfig::default()).unwrap();
        c.chunks[1].pop();
        assert!(tdgw_blend(&c, BlendOrientation::default()).is_err());
        c.chunks.pop();
        assert!(tdgw_blend(&c, BlendOrientation::default()).is_err());
    }

    #[test]
    fn chunk_count_matches_scalar_reference() {
        for t in 1..=200usize {
            for (s, c) in [(16usize, 24usize), (4, 4), (3, 10), (7, 9)] {
                let cfg = ChunkConfig::new(s, c).unwrap();
                // count chunk starts by stepping, independent of div_ceil
                let mut count = 0;
                let mut covered = 0;
                while covered < t {
                    covered += s;
                    count += 1;
                }
                assert_eq!(cfg.num_chunks(t), count);
                assert_eq!(cfg.padded_len(t), covered);
            }
        }
    }

    #[test]
    fn continuity_cases() {
        let cfg = ChunkConfig::default();
        // constant velocity
        let n = 3;
        let t_len = 40;
        let mut offsets = vec![0.0; n * t_len * 3];
        for v in 0..n {
            for t in 0..t_len {
                offsets[v * t_len * 3 + 3 * t] = 0.01 * t as f64;
                offsets[v * t_len * 3 + 3 * t + 1] = -0.02 * t as f64;
            }
        }
        let tr = RelativeTrajectory { initial: vec![[0.0; 3]; n], offsets: offsets.clone(), frames: t_len };
        let s = continuity_score(&tr, cfg).unwrap();
        assert_eq!(s.len(), 2);
        assert!(s.iter().all(|v| (v - 1.0).abs() < 1e-9), "{s:?}");

        let still = RelativeTrajectory { initial: vec![[0.0; 3]; n], offsets: vec![0.0; n * t_len * 3], frames: t_len };
        assert!(continuity_score(&still, cfg).unwrap().iter().all(|&v| v == 0.0));

        // jump of 10x the step at boundary frame 16 for vertex 0
        let mut jumped = offsets;
        let step = (0.01f64.powi(2) + 0.02f64.powi(2)).sqrt();
        for t in 16..t_len {
            jumped[3 * t + 2] += 10.0 * step;
        }
        let tr = RelativeTrajectory { initial: vec![[0.0; 3]; n], offsets: jumped, frames: t_len };
        let s = continuity_score(&tr, cfg).unwrap();
        assert!(s[0] >= 10.0, "{s:?}");
        assert!(continuity_score(&labelled(1, 1), cfg).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_any_config(t in 1usize..120, s in 1usize..20, extra in 0usize..30, n in 1usize..4, seed in 0u64..1000) {
            let cfg = ChunkConfig::new(s, s + extra).unwrap();
            let mut rng = crate::tensor::Rng::new(seed);
            let mut offsets = vec![0.0; n * t * 3];
            for v in 0..n {
                for f in 1..t {
                    for k in 0..3 {
                        offsets[v * t * 3 + 3 * f + k] = rng.normal();
                    }
                }
            }
            let tr = RelativeTrajectory { initial: vec![[0.0; 3]; n], offsets, frames: t };
            let c = split_chunks(&tr, cfg).unwrap();
            for o in [BlendOrientation::ProseDecay, BlendOrientation::AsWritten] {
                let back = tdgw_blend(&c, o).unwrap();
                prop_assert_eq!(back.frames, t);
                for (a, b) in back.offsets.iter().zip(&tr.offsets) {
                    prop_assert!((a - b).abs() <= 1e-12);
                }
            }
        }

        #[test]
        fn blended_frames_are_convex(seed in 0u64..500) {
            let cfg = ChunkConfig::default();
            let mut rng = crate::tensor::Rng::new(seed);
            let n = 2;
            let mut c = split_chunks(&labelled(n, 48), cfg).unwrap();
            for ch in &mut c.chunks {
                ch.iter_mut().for_each(|v| *v = rng.normal());
            }
            let out = tdgw_blend(&c, BlendOrientation::ProseDecay).unwrap();
            for i in 1..c.num_chunks() {
                for t in 0..cfg.overlap() {
                    let f = i * cfg.stride - cfg.overlap() + t;
                    for v in 0..n {
                        let prev = frame_of(&c, i - 1, v, cfg.chunk - cfg.overlap() + t);
                        let next = frame_of(&c, i, v, t);
                        let got = out.offset(v, f);
                        for k in 0..3 {
                            let (lo, hi) = (prev[k].min(next[k]), prev[k].max(next[k]));
                            prop_assert!(got[k] >= lo - 1e-12 && got[k] <= hi + 1e-12);
                        }
                    }
                }
            }
        }
    }
}
