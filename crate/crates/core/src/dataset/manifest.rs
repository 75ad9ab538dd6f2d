//! Tab-separated manifest of curated records.

use std::collections::HashSet;
use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    /// File or directory the record was read from.
    pub source: String,
    /// Written `.dms` container; empty for rejected records.
    pub container: String,
    /// First frame of the slice within the source.
    pub start: usize,
    pub frames: usize,
    pub vertices: usize,
    pub faces: usize,
    /// Caption sidecar path, empty when there is none.
    pub caption: String,
    pub accepted: bool,
    /// Rejection reason, empty when accepted.
    pub reason: String,
    /// Slice window, `0` for a whole source.
    pub window: usize,
    pub reversed: bool,
}

fn writer_for(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new().delimiter(b'\t').from_writer(file))
}

fn schema(path: &Path, line: u64, detail: impl Into<String>) -> Error {
    Error::Schema {
        path: path.to_path_buf(),
        line,
        detail: detail.into(),
    }
}

pub fn write_manifest(records: &[ManifestRecord], path: &Path) -> Result<()> {
    let mut w = writer_for(path)?;
    if records.is_empty() {
        w.write_record(HEADER).map_err(|e| schema(path, 1, e.to_string()))?;
    }
    for (i, r) in records.iter().enumerate() {
        w.serialize(r).map_err(|e| schema(path, i as u64 + 2, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

const HEADER: [&str; 12] = [
    "id", "source", "container", "start", "frames", "vertices", "faces", "caption", "accepted", "reason", "window",
    "reversed",
];

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::ReaderBuilder::new().delimiter(b'\t').from_reader(file);
    let header = r.headers().map_err(|e| schema(path, 1, e.to_string()))?.clone();
    if header.iter().ne(HEADER.iter().copied()) {
        return Err(schema(path, 1, format!("unexpected header {:?}", header.iter().collect::<Vec<_>>())));
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    let mut raw = csv::StringRecord::new();
    loop {
        let line = r.position().line();
        match r.read_record(&mut raw) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => return Err(schema(path, line, e.to_string())),
        }
        let line = raw.position().map_or(line, |p| p.line());
        let rec: ManifestRecord = raw.deserialize(Some(&header)).map_err(|e| schema(path, line, e.to_string()))?;
        if !seen.insert(rec.id.clone()) {
            return Err(schema(path, line, format!("duplicate id {:?}", rec.id)));
        }
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn random_record(rng: &mut Rng, i: usize) -> ManifestRecord {
        let word = |rng: &mut Rng| -> String {
            let alphabet = ['a', 'Z', '7', ' ', '\t', '"', ',', 'é', '\n', '/', '_'];
            (0..rng.below(8)).map(|_| alphabet[rng.below(alphabet.len())]).collect()
        };
        ManifestRecord {
            id: format!("rec{i}"),
            source: word(rng),
            container: word(rng),
            start: rng.below(500),
            frames: rng.below(300),
            vertices: rng.below(10_000),
            faces: rng.below(20_000),
            caption: word(rng),
            accepted: rng.uniform() < 0.5,
            reason: word(rng),
            window: [0, 16, 32, 64][rng.below(4)],
            reversed: rng.uniform() < 0.5,
        }
    }

    #[test]
    fn round_trip_is_field_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tsv");
        let mut rng = Rng::new(1);
        let records: Vec<_> = (0..100).map(|i| random_record(&mut rng, i)).collect();
        write_manifest(&records, &path).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), records);
    }

    #[test]
    fn empty_manifest_has_only_the_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tsv");
        write_manifest(&[], &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), format!("{}\n", HEADER.join("\t")));
        assert!(read_manifest(&path).unwrap().is_empty());
    }

    #[test]
    fn duplicate_ids_and_bad_fields_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tsv");
        let a = ManifestRecord { id: "x".into(), ..Default::default() };
        let b = ManifestRecord { id: "y".into(), ..Default::default() };
        write_manifest(&[a.clone(), b, a], &path).unwrap();
        match read_manifest(&path).unwrap_err() {
            Error::Schema { line, detail, .. } => {
                assert_eq!(line, 4);
                assert!(detail.contains("duplicate"));
            }
            e => panic!("{e}"),
        }
        let text = format!("{}\nz\ts\tc\tnope\t1\t1\t1\t\ttrue\t\t0\tfalse\n", HEADER.join("\t"));
        std::fs::write(&path, text).unwrap();
        assert!(matches!(read_manifest(&path).unwrap_err(), Error::Schema { line: 2, .. }));
    }
}
