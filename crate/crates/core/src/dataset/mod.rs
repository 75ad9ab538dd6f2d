//! Curation of dynamic mesh sequences: ingestion, motion and face-ratio
//! filters, overlapping window slicing, reverse augmentation with content
//! deduplication, and the manifest that records every decision.

mod formats;
mod manifest;

use std::collections::HashSet;
use std::path::Path;

use sha2::{Digest, Sha256};

pub use formats::{
    decode_dms, encode_dms, obj_frame_files, parse_obj, read_dms, read_mesh, read_obj, read_obj_dir, read_sequence,
    write_dms, write_obj,
};
pub use manifest::{read_manifest, write_manifest, ManifestRecord};

use crate::config::{parse_value, Configurable, KeyValues};
use crate::error::{Error, Result};
use crate::mesh::{centroid_normalize, merge_duplicate_sequence_vertices, DynamicMeshSequence};

#[derive(Clone, Debug, PartialEq)]
pub struct FilterRules {
    pub min_max_disp: f64,
    pub max_max_disp: f64,
    pub max_face_ratio: f64,
    pub min_frames: usize,
    pub max_frames: usize,
}

impl Default for FilterRules {
    fn default() -> Self {
        FilterRules {
            min_max_disp: 0.01,
            max_max_disp: 1.0,
            max_face_ratio: 2.5,
            min_frames: 16,
            max_frames: 200,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rejection {
    TooShort,
    TooLong,
    FaceRatio,
    BelowMotion,
    AboveMotion,
    Duplicate,
}

impl Rejection {
    pub fn as_str(self) -> &'static str {
        match self {
            Rejection::TooShort => "too-short",
            Rejection::TooLong => "too-long",
            Rejection::FaceRatio => "face-ratio",
            Rejection::BelowMotion => "below-motion",
            Rejection::AboveMotion => "above-motion",
            Rejection::Duplicate => "duplicate",
        }
    }
}

impl std::fmt::Display for Rejection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Length, then face ratio, then motion. Boundary values pass.
pub fn apply_filters(seq: &DynamicMeshSequence, rules: &FilterRules) -> Option<Rejection> {
    let t = seq.num_frames();
    if t < rules.min_frames {
        return Some(Rejection::TooShort);
    }
    if t > rules.max_frames {
        return Some(Rejection::TooLong);
    }
    let n = seq.num_vertices().max(1);
    if seq.num_faces() as f64 / n as f64 > rules.max_face_ratio {
        return Some(Rejection::FaceRatio);
    }
    let disp = seq.max_interframe_displacement();
    if disp < rules.min_max_disp {
        return Some(Rejection::BelowMotion);
    }
    if disp > rules.max_max_disp {
        return Some(Rejection::AboveMotion);
    }
    None
}

#[derive(Clone, Debug, PartialEq)]
pub struct SliceConfig {
    pub windows: Vec<usize>,
    /// Stride per window; `None` means `window / 2`.
    pub stride: Option<usize>,
    pub keep_reversed: bool,
}

impl Default for SliceConfig {
    fn default() -> Self {
        SliceConfig {
            windows: vec![16, 32, 64],
            stride: None,
            keep_reversed: true,
        }
    }
}

impl SliceConfig {
    pub fn stride_for(&self, window: usize) -> usize {
        self.stride.unwrap_or(window / 2).clamp(1, window.max(1))
    }

    /// `(window, start)` pairs in emission order.
    pub fn slice_starts(&self, frames: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for &w in &self.windows {
            if w == 0 || w > frames {
                continue;
            }
            let s = self.stride_for(w);
            out.extend((0..=frames - w).step_by(s).map(|start| (w, start)));
        }
        out
    }
}

/// Every window slice of `seq`, each re-centered on its own first frame.
pub fn slice_windows(seq: &DynamicMeshSequence, cfg: &SliceConfig) -> Vec<(usize, usize, DynamicMeshSequence)> {
    cfg.slice_starts(seq.num_frames())
        .into_iter()
        .map(|(w, start)| (w, start, centroid_normalize(&seq.slice(start, w))))
        .collect()
}

/// Each slice followed by its reversed copy. The copy keeps the slice's
/// coordinates so that reversing twice restores it bit for bit.
pub fn augment_reverse(slices: &[DynamicMeshSequence]) -> Vec<(bool, DynamicMeshSequence)> {
    slices
        .iter()
        .flat_map(|s| [(false, s.clone()), (true, s.reversed())])
        .collect()
}

/// SHA-256 over faces and the bit patterns of every position.
pub fn content_hash(seq: &DynamicMeshSequence) -> [u8; 32] {
    let mut h = Sha256::new();
    for v in [seq.num_frames(), seq.num_vertices(), seq.num_faces()] {
        h.update((v as u64).to_le_bytes());
    }
    for f in &seq.faces {
        for i in f {
            h.update(i.to_le_bytes());
        }
    }
    for p in seq.frames.iter().flatten() {
        for c in p {
            h.update(c.to_bits().to_le_bytes());
        }
    }
    h.finalize().into()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurationConfig {
    pub filters: FilterRules,
    pub slices: SliceConfig,
    /// Vertices closer than this in every frame are merged on ingest.
    pub merge_tol: f64,
}

impl Default for CurationConfig {
    fn default() -> Self {
        CurationConfig {
            filters: FilterRules::default(),
            slices: SliceConfig::default(),
            merge_tol: 1e-6,
        }
    }
}

impl Configurable for CurationConfig {
    fn set_key(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "min_max_disp" => self.filters.min_max_disp = parse_value(key, v)?,
            "max_max_disp" => self.filters.max_max_disp = parse_value(key, v)?,
            "max_face_ratio" => self.filters.max_face_ratio = parse_value(key, v)?,
            "min_frames" => self.filters.min_frames = parse_value(key, v)?,
            "max_frames" => self.filters.max_frames = parse_value(key, v)?,
            "windows" => {
                self.slices.windows = v
                    .split(',')
                    .map(|w| parse_value(key, w.trim()))
                    .collect::<Result<_>>()?
            }
            "stride" => self.slices.stride = if v == "half" { None } else { Some(parse_value(key, v)?) },
            "keep_reversed" => self.slices.keep_reversed = parse_value(key, v)?,
            "merge_tol" => self.merge_tol = parse_value(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("min_max_disp", self.filters.min_max_disp);
        kv.set("max_max_disp", self.filters.max_max_disp);
        kv.set("max_face_ratio", self.filters.max_face_ratio);
        kv.set("min_frames", self.filters.min_frames);
        kv.set("max_frames", self.filters.max_frames);
        let windows: Vec<String> = self.slices.windows.iter().map(ToString::to_string).collect();
        kv.set("windows", windows.join(","));
        kv.set("stride", self.slices.stride.map_or("half".to_string(), |s| s.to_string()));
        kv.set("keep_reversed", self.slices.keep_reversed);
        kv.set("merge_tol", self.merge_tol);
        kv
    }

    fn validate(&self) -> Result<()> {
        let f = &self.filters;
        if !(0.0 <= f.min_max_disp && f.min_max_disp < f.max_max_disp) {
            return Err(Error::Config(format!(
                "need 0 <= min_max_disp < max_max_disp, got {} and {}",
                f.min_max_disp, f.max_max_disp
            )));
        }
        if f.min_frames > f.max_frames {
            return Err(Error::Config("min_frames exceeds max_frames".into()));
        }
        if self.slices.windows.contains(&0) {
            return Err(Error::Config("windows must be positive".into()));
        }
        if let Some(s) = self.slices.stride {
            if s == 0 || self.slices.windows.iter().any(|&w| s > w) {
                return Err(Error::Config(format!("stride {s} must lie in [1, window]")));
            }
        }
        if !(self.merge_tol >= 0.0) {
            return Err(Error::Config("merge_tol must be non-negative".into()));
        }
        Ok(())
    }
}

/// Vertex merge followed by centroid normalization.
pub fn normalize_source(seq: &DynamicMeshSequence, merge_tol: f64) -> DynamicMeshSequence {
    centroid_normalize(&merge_duplicate_sequence_vertices(seq, merge_tol).0)
}

/// Reads a source path and normalizes it.
pub fn ingest(path: &Path, merge_tol: f64) -> Result<DynamicMeshSequence> {
    Ok(normalize_source(&read_sequence(path)?, merge_tol))
}

/// Caption sidecar for a source: `caption.txt` inside a directory, or the
/// source path with a `.txt` extension.
pub fn caption_path(source: &Path) -> std::path::PathBuf {
    if source.is_dir() {
        source.join("caption.txt")
    } else {
        source.with_extension("txt")
    }
}

/// One record per decision plus the accepted sequences keyed by record id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Curated {
    pub records: Vec<ManifestRecord>,
    pub accepted: Vec<(String, DynamicMeshSequence)>,
}

/// Filters a normalized source, slices it, augments with reversed copies
/// and drops any sequence whose content hash is already in `seen`.
/// Container paths are left empty for the caller to fill in.
pub fn curate(
    id: &str,
    source: &str,
    caption: &str,
    seq: &DynamicMeshSequence,
    cfg: &CurationConfig,
    seen: &mut HashSet<[u8; 32]>,
) -> Curated {
    let mut out = Curated::default();
    let base = ManifestRecord {
        source: source.to_string(),
        caption: caption.to_string(),
        vertices: seq.num_vertices(),
        faces: seq.num_faces(),
        ..Default::default()
    };
    if let Some(r) = apply_filters(seq, &cfg.filters) {
        out.records.push(ManifestRecord {
            id: id.to_string(),
            frames: seq.num_frames(),
            reason: r.to_string(),
            ..base
        });
        return out;
    }
    for (window, start, slice) in slice_windows(seq, &cfg.slices) {
        let copies = if cfg.slices.keep_reversed {
            augment_reverse(std::slice::from_ref(&slice))
        } else {
            vec![(false, slice)]
        };
        for (reversed, s) in copies {
            let rid = format!("{id}_w{window}_s{start}{}", if reversed { "_rev" } else { "" });
            let verdict = apply_filters(&s, &cfg.filters)
                .or_else(|| (!seen.insert(content_hash(&s))).then_some(Rejection::Duplicate));
            out.records.push(ManifestRecord {
                id: rid.clone(),
                start,
                frames: window,
                accepted: verdict.is_none(),
                reason: verdict.map(|r| r.to_string()).unwrap_or_default(),
                window,
                reversed,
                ..base.clone()
            });
            if verdict.is_none() {
                out.accepted.push((rid, s));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests;
