//! `.dms` containers and per-frame OBJ directories.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::mesh::{DynamicMeshSequence, Face, Point, TriangleMesh};

const DMS_MAGIC: &[u8; 4] = b"DMS1";
const DMS_VERSION: u32 = 1;

/// Serializes a sequence; positions are stored as `f32`.
pub fn encode_dms(seq: &DynamicMeshSequence) -> Vec<u8> {
    let (t, n, m) = (seq.num_frames(), seq.num_vertices(), seq.num_faces());
    let mut out = Vec::with_capacity(20 + 12 * m + 12 * t * n);
    out.extend_from_slice(DMS_MAGIC);
    for v in [DMS_VERSION, t as u32, n as u32, m as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for f in &seq.faces {
        for i in f {
            out.extend_from_slice(&i.to_le_bytes());
        }
    }
    for p in seq.frames.iter().flatten() {
        for c in p {
            out.extend_from_slice(&(*c as f32).to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn fail(&self, offset: usize, detail: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            detail: detail.into(),
        }
    }

    fn take4(&mut self, what: &str) -> Result<[u8; 4]> {
        let end = self.pos + 4;
        let b = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| self.fail(self.pos, format!("truncated while reading {what}")))?;
        self.pos = end;
        Ok(b.try_into().expect("four bytes"))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        self.take4(what).map(u32::from_le_bytes)
    }
}

pub fn decode_dms(bytes: &[u8], path: &Path) -> Result<DynamicMeshSequence> {
    let mut c = Cursor { bytes, pos: 0, path };
    if &c.take4("magic")? != DMS_MAGIC {
        return Err(c.fail(0, "bad magic, expected DMS1"));
    }
    let version = c.u32("version")?;
    if version != DMS_VERSION {
        return Err(c.fail(4, format!("unsupported version {version}")));
    }
    let t = c.u32("frame count")? as usize;
    let n = c.u32("vertex count")? as usize;
    let m = c.u32("face count")? as usize;
    let expect = 20u64 + 12 * m as u64 + 12 * (t as u64) * (n as u64);
    if bytes.len() as u64 != expect {
        return Err(c.fail(
            bytes.len().min(expect as usize),
            format!("file is {} bytes, header implies {expect}", bytes.len()),
        ));
    }
    let mut faces = Vec::with_capacity(m);
    for _ in 0..m {
        let mut f: Face = [0; 3];
        for slot in &mut f {
            let at = c.pos;
            *slot = c.u32("face index")?;
            if *slot as usize >= n {
                return Err(c.fail(at, format!("face index {} out of range for {n} vertices", *slot)));
            }
        }
        faces.push(f);
    }
    let mut frames = Vec::with_capacity(t);
    for _ in 0..t {
        let mut frame = Vec::with_capacity(n);
        for _ in 0..n {
            let mut p: Point = [0.0; 3];
            for slot in &mut p {
                let at = c.pos;
                let v = f32::from_le_bytes(c.take4("position")?);
                if !v.is_finite() {
                    return Err(c.fail(at, "non-finite position"));
                }
                *slot = v as f64;
            }
            frame.push(p);
        }
        frames.push(frame);
    }
    DynamicMeshSequence::new(faces, frames)
}

pub fn read_dms(path: &Path) -> Result<DynamicMeshSequence> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dms(&bytes, path)
}

pub fn write_dms(path: &Path, seq: &DynamicMeshSequence) -> Result<()> {
    fs::write(path, encode_dms(seq)).map_err(|e| Error::io(path, e))
}

/// Parses `v` and triangular `f` records; other records are skipped.
/// Face tokens may carry `/vt/vn` suffixes, which are ignored.
pub fn parse_obj(text: &str, path: &Path) -> Result<TriangleMesh> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let mut offset = 0usize;
    for line in text.split_inclusive('\n') {
        let at = offset;
        offset += line.len();
        let fail = |detail: String| Error::Parse { path: path.to_path_buf(), offset: at as u64, detail };
        let mut toks = line.split_whitespace();
        match toks.next() {
            Some("v") => {
                let mut p: Point = [0.0; 3];
                for slot in &mut p {
                    let tok = toks.next().ok_or_else(|| fail("vertex with fewer than 3 coordinates".into()))?;
                    *slot = tok
                        .parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| fail(format!("bad coordinate {tok:?}")))?;
                }
                vertices.push(p);
            }
            Some("f") => {
                let idx: Vec<&str> = toks.collect();
                if idx.len() != 3 {
                    return Err(fail(format!("face with {} corners, only triangles are supported", idx.len())));
                }
                let mut f: Face = [0; 3];
                for (slot, tok) in f.iter_mut().zip(&idx) {
                    let head = tok.split('/').next().unwrap_or("");
                    let i: u32 = head.parse().map_err(|_| fail(format!("bad face index {tok:?}")))?;
                    if i == 0 {
                        return Err(fail("face indices are 1-based".into()));
                    }
                    *slot = i - 1;
                }
                faces.push(f);
            }
            _ => {}
        }
    }
    let n = vertices.len();
    if let Some(bad) = faces.iter().flatten().find(|&&i| i as usize >= n) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: text.len() as u64,
            detail: format!("face index {} out of range for {n} vertices", bad + 1),
        });
    }
    Ok(TriangleMesh { faces, vertices })
}

pub fn read_obj(path: &Path) -> Result<TriangleMesh> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_obj(&text, path)
}

pub fn write_obj(path: &Path, mesh: &TriangleMesh) -> Result<()> {
    let mut s = String::new();
    for p in &mesh.vertices {
        s.push_str(&format!("v {} {} {}\n", p[0], p[1], p[2]));
    }
    for f in &mesh.faces {
        s.push_str(&format!("f {} {} {}\n", f[0] + 1, f[1] + 1, f[2] + 1));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// `frame_NNNN.obj` files of `dir`, ordered by frame number.
pub fn obj_frame_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path.file_name().and_then(|s| s.to_str()).unwrap_or("");
        if let Some(num) = name.strip_prefix("frame_").and_then(|s| s.strip_suffix(".obj")) {
            if let Ok(k) = num.parse::<u64>() {
                found.push((k, path));
            }
        }
    }
    found.sort();
    Ok(found.into_iter().map(|(_, p)| p).collect())
}

/// Reads a directory of per-frame OBJ files sharing one face list.
pub fn read_obj_dir(dir: &Path) -> Result<DynamicMeshSequence> {
    let files = obj_frame_files(dir)?;
    let first = files.first().ok_or_else(|| Error::Topology {
        path: dir.to_path_buf(),
        detail: "no frame_NNNN.obj files".into(),
    })?;
    let base = read_obj(first)?;
    let mut frames = vec![base.vertices];
    for f in &files[1..] {
        let mesh = read_obj(f)?;
        if mesh.faces != base.faces {
            return Err(Error::Topology {
                path: f.clone(),
                detail: format!("face list differs from {} ({} vs {} faces)", first.display(), mesh.num_faces(), base.faces.len()),
            });
        }
        if mesh.num_vertices() != frames[0].len() {
            return Err(Error::Topology {
                path: f.clone(),
                detail: format!("{} vertices, first frame has {}", mesh.num_vertices(), frames[0].len()),
            });
        }
        frames.push(mesh.vertices);
    }
    DynamicMeshSequence::new(base.faces, frames)
}

/// A static mesh from an `.obj` file, or frame 0 of a `.dms` container.
pub fn read_mesh(path: &Path) -> Result<TriangleMesh> {
    if path.extension().and_then(|s| s.to_str()) == Some("dms") {
        let seq = read_dms(path)?;
        if seq.num_frames() == 0 {
            return Err(Error::Argument(format!("{}: container has no frames", path.display())));
        }
        Ok(seq.mesh_at(0))
    } else {
        read_obj(path)
    }
}

/// A `.dms` container or an OBJ frame directory.
pub fn read_sequence(path: &Path) -> Result<DynamicMeshSequence> {
    if path.is_dir() {
        read_obj_dir(path)
    } else {
        read_dms(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy;

    #[test]
    fn dms_round_trip_and_header_echo() {
        let seq = toy::wave_sheet(10, 32);
        let bytes = encode_dms(&seq);
        let back = decode_dms(&bytes, Path::new("a.dms")).unwrap();
        assert_eq!((back.num_frames(), back.num_vertices(), back.num_faces()), (32, 100, 162));
        assert_eq!(back.faces, seq.faces);
        for (a, b) in back.frames.iter().flatten().zip(seq.frames.iter().flatten()) {
            for k in 0..3 {
                assert_eq!(a[k], b[k] as f32 as f64);
            }
        }
        assert_eq!(encode_dms(&back), bytes);
    }

    #[test]
    fn dms_errors_carry_offsets() {
        let mut bytes = encode_dms(&toy::wave_sheet(3, 2));
        let p = Path::new("x.dms");
        let at = |e: Error| match e {
            Error::Parse { offset, .. } => offset,
            other => panic!("{other}"),
        };
        assert_eq!(at(decode_dms(b"DMS2\x01\0\0\0", p).unwrap_err()), 0);
        assert_eq!(at(decode_dms(&bytes[..10], p).unwrap_err()), 8);
        assert!(decode_dms(&bytes[..bytes.len() - 1], p).is_err());
        bytes[20..24].copy_from_slice(&99u32.to_le_bytes());
        assert_eq!(at(decode_dms(&bytes, p).unwrap_err()), 20);
    }

    #[test]
    fn obj_parsing() {
        let text = "# tri\nv 0 0 0\nv 1 0 0\nvn 0 0 1\nv 0 1 0\nf 1/1/1 2//1 3\n";
        let m = parse_obj(text, Path::new("t.obj")).unwrap();
        assert_eq!(m.faces, vec![[0, 1, 2]]);
        assert_eq!(m.vertices.len(), 3);
        let quad = "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n";
        match parse_obj(quad, Path::new("q.obj")).unwrap_err() {
            Error::Parse { offset, .. } => assert_eq!(offset, 32),
            e => panic!("{e}"),
        }
        assert!(parse_obj("v 0 0\n", Path::new("b.obj")).is_err());
        assert!(parse_obj("v 0 0 0\nf 1 2 3\n", Path::new("b.obj")).is_err());
    }

    #[test]
    fn obj_directory_reading() {
        let dir = tempfile::tempdir().unwrap();
        let seq = toy::bending_bar(4, 2);
        for t in 0..2 {
            write_obj(&dir.path().join(format!("frame_{t:04}.obj")), &seq.mesh_at(t)).unwrap();
        }
        let back = read_obj_dir(dir.path()).unwrap();
        assert_eq!(back.num_frames(), 2);
        assert_eq!(back.frames, seq.frames);

        let mut other = seq.mesh_at(1);
        other.faces.pop();
        write_obj(&dir.path().join("frame_0002.obj"), &other).unwrap();
        assert!(matches!(read_obj_dir(dir.path()).unwrap_err(), Error::Topology { .. }));
        let empty = tempfile::tempdir().unwrap();
        assert!(read_obj_dir(empty.path()).is_err());
    }
}
