use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

use super::*;
use crate::mesh::{Point, TriangleMesh};
use crate::toy;

/// 3×3 grid whose centre vertex sits at `z(t)`; frame-0 centroid is the
/// origin exactly.
fn bobbing(frames: usize, z: impl Fn(usize) -> f64) -> DynamicMeshSequence {
    let mesh = toy::grid(3, 3, 1.0);
    let frames = (0..frames)
        .map(|t| {
            let mut v = mesh.vertices.clone();
            v[4][2] = z(t);
            v
        })
        .collect();
    DynamicMeshSequence::new(mesh.faces, frames).unwrap()
}

fn swaying(frames: usize) -> DynamicMeshSequence {
    bobbing(frames, |t| 0.3 * (0.7 * t as f64).sin())
}

/// `n` vertices and `m` faces; vertex 0 hops by 0.1 every frame.
fn with_faces(n: usize, m: usize) -> DynamicMeshSequence {
    let frames = (0..20)
        .map(|t| (0..n).map(|i| [i as f64, 0.0, if i == 0 { 0.1 * (t % 2) as f64 } else { 0.0 }]).collect())
        .collect();
    let faces = (0..m).map(|k| [0, 1, (2 + k % (n - 2)) as u32]).collect();
    DynamicMeshSequence::new(faces, frames).unwrap()
}

#[test]
fn filter_examples() {
    let r = FilterRules::default();
    let still = DynamicMeshSequence::repeat(&toy::grid(3, 3, 1.0), 20);
    assert_eq!(apply_filters(&still, &r), Some(Rejection::BelowMotion));
    assert_eq!(Rejection::BelowMotion.as_str(), "below-motion");
    let ok = with_faces(5, 10);
    assert_eq!(ok.max_interframe_displacement(), 0.1);
    assert_eq!(apply_filters(&ok, &r), None);
    let half = bobbing(20, |t| 0.5 * (t % 2) as f64);
    assert_eq!(half.max_interframe_displacement(), 0.5);
    assert_eq!(apply_filters(&with_faces(10, 20), &r), None);
    assert_eq!(apply_filters(&with_faces(10, 26), &r), Some(Rejection::FaceRatio));
    assert_eq!(apply_filters(&with_faces(10, 25), &r), None);
    assert_eq!(apply_filters(&bobbing(20, |t| 0.01 * (t % 2) as f64), &r), None);
    assert_eq!(apply_filters(&bobbing(20, |t| (t % 2) as f64), &r), None);
    assert_eq!(apply_filters(&bobbing(20, |t| 1.0000001 * (t % 2) as f64), &r), Some(Rejection::AboveMotion));
    assert_eq!(apply_filters(&bobbing(15, |t| 0.1 * (t % 2) as f64), &r), Some(Rejection::TooShort));
    assert_eq!(apply_filters(&bobbing(201, |t| 0.1 * (t % 2) as f64), &r), Some(Rejection::TooLong));
}

#[test]
fn slice_count_examples() {
    let cfg = SliceConfig { windows: vec![16], ..SliceConfig::default() };
    let starts: Vec<_> = cfg.slice_starts(40).into_iter().map(|(_, s)| s).collect();
    assert_eq!(starts, vec![0, 8, 16, 24]);
    assert_eq!(SliceConfig::default().slice_starts(16), vec![(16, 0)]);
    assert!(SliceConfig::default().slice_starts(15).is_empty());
    let seq = toy::wave_sheet(3, 40);
    let slices = slice_windows(&seq, &SliceConfig::default());
    assert_eq!(slices.len(), 5);
    for (w, _, s) in &slices {
        assert_eq!(s.num_frames(), *w);
        assert_eq!(s.faces, seq.faces);
    }
}

proptest! {
    #[test]
    fn slice_count_matches_scalar_reference(t in 16usize..=200) {
        let cfg = SliceConfig::default();
        let mut expect = 0;
        for w in [16usize, 32, 64] {
            let mut start = 0;
            while start + w <= t {
                expect += 1;
                start += w / 2;
            }
        }
        prop_assert_eq!(cfg.slice_starts(t).len(), expect);
    }

    #[test]
    fn filters_ignore_rigid_rotation(a in -3.0f64..3.0, b in -3.0f64..3.0, amp in 0.0f64..1.5) {
        let seq = bobbing(20, |t| amp * ((t * 7 % 5) as f64 / 4.0));
        let (sa, ca) = a.sin_cos();
        let (sb, cb) = b.sin_cos();
        let rot = |p: Point| {
            let q = [ca * p[0] - sa * p[1], sa * p[0] + ca * p[1], p[2]];
            [q[0], cb * q[1] - sb * q[2], sb * q[1] + cb * q[2]]
        };
        let mut turned = seq.clone();
        turned.frames.iter_mut().flatten().for_each(|p| *p = rot(*p));
        let d = seq.max_interframe_displacement();
        // decisions may only differ within rounding of a threshold
        let near = |x: f64| (d - x).abs() < 1e-12;
        if !near(0.01) && !near(1.0) {
            prop_assert_eq!(apply_filters(&seq, &FilterRules::default()), apply_filters(&turned, &FilterRules::default()));
        }
    }

    #[test]
    fn reversal_is_an_involution(seed in 0u64..1000) {
        let mut rng = crate::tensor::Rng::new(seed);
        let mesh = toy::random_triangulation(&mut rng, 30);
        let frames = (0..5)
            .map(|_| mesh.vertices.iter().map(|p| p.map(|c| c + rng.normal())).collect())
            .collect();
        let seq = DynamicMeshSequence::new(mesh.faces, frames).unwrap();
        prop_assert!(seq.reversed().reversed() == seq);
    }
}

#[test]
fn augmentation_doubles_and_palindromes_deduplicate() {
    let seq = swaying(40);
    let slices: Vec<_> = slice_windows(&seq, &SliceConfig::default()).into_iter().map(|(_, _, s)| s).collect();
    let aug = augment_reverse(&slices);
    assert_eq!(aug.len(), 2 * slices.len());
    assert!(aug.iter().all(|(_, s)| apply_filters(s, &FilterRules::default()).is_none()));

    let pal = bobbing(16, |t| 0.05 * t.min(15 - t) as f64);
    assert_eq!(pal.reversed(), pal);
    assert_eq!(content_hash(&pal.reversed()), content_hash(&pal));
    let mut seen = HashSet::new();
    let cur = curate("p", "p.dms", "", &pal, &CurationConfig::default(), &mut seen);
    let reasons: Vec<_> = cur.records.iter().map(|r| (r.reversed, r.accepted, r.reason.as_str())).collect();
    assert_eq!(reasons, vec![(false, true, ""), (true, false, "duplicate")]);
}

#[test]
fn curation_records_every_decision() {
    let mut seen = HashSet::new();
    let cfg = CurationConfig::default();
    let seq = normalize_source(&swaying(40), cfg.merge_tol);
    let cur = curate("w", "w.dms", "w.txt", &seq, &cfg, &mut seen);
    assert_eq!(cur.records.len(), 10);
    assert_eq!(cur.accepted.len(), 10);
    assert!(cur.records.iter().all(|r| r.caption == "w.txt" && r.source == "w.dms"));
    assert_eq!(cur.records[1].id, "w_w16_s0_rev");
    let again = curate("w2", "w.dms", "", &seq, &cfg, &mut seen);
    assert!(again.accepted.is_empty());

    let short = curate("s", "s.dms", "", &toy::wave_sheet(3, 2), &cfg, &mut HashSet::new());
    assert_eq!(short.records.len(), 1);
    assert_eq!(short.records[0].reason, "too-short");
}

#[test]
fn two_frame_obj_pair_is_read_then_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let seq = toy::bending_bar(4, 2);
    for t in 0..2 {
        write_obj(&dir.path().join(format!("frame_{t:04}.obj")), &seq.mesh_at(t)).unwrap();
    }
    let got = ingest(dir.path(), 1e-6).unwrap();
    assert_eq!(got.num_frames(), 2);
    assert_eq!(apply_filters(&got, &FilterRules::default()), Some(Rejection::TooShort));
    assert_eq!(caption_path(dir.path()), dir.path().join("caption.txt"));
    assert_eq!(caption_path(Path::new("a/b.dms")), Path::new("a/b.txt"));
}

#[test]
fn ingest_merges_and_centers() {
    let dir = tempfile::tempdir().unwrap();
    let mut mesh = toy::triangle();
    mesh.vertices.push(mesh.vertices[0]);
    mesh.faces.push([3, 1, 2]);
    let mesh = TriangleMesh::new(mesh.faces, mesh.vertices).unwrap();
    let path = dir.path().join("d.dms");
    write_dms(&path, &DynamicMeshSequence::repeat(&mesh, 3)).unwrap();
    let got = ingest(&path, 1e-6).unwrap();
    assert_eq!(got.num_vertices(), 3);
    let c: f64 = got.frames[0].iter().map(|p| p[0]).sum();
    assert!(c.abs() < 1e-12);
}

#[test]
fn config_round_trip() {
    let cfg = CurationConfig {
        slices: SliceConfig { windows: vec![8, 24], stride: Some(4), keep_reversed: false },
        ..CurationConfig::default()
    };
    let mut back = CurationConfig::default();
    back.apply(&cfg.to_kv()).unwrap();
    assert_eq!(back, cfg);
    let mut bad = KeyValues::new();
    bad.set("min_max_disp", 2.0);
    assert!(CurationConfig::default().apply(&bad).is_err());
}
