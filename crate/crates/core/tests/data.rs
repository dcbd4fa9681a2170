use std::f64::consts::PI;
use std::path::Path;

use proptest::prelude::*;
use rfgen::data::index::{build_index, camera_vector, read_index, write_index, Family};
use rfgen::data::pose::LANDMARK_GROUPS;
use rfgen::data::*;
use rfgen::kernels::warp;

fn kp(x: f32, y: f32) -> Keypoint {
    Keypoint { x, y, visible: true }
}

// ---- encoders

#[test]
fn heatmap_examples() {
    let hm = encode_heatmap(&[kp(16.0, 16.0), Keypoint { visible: false, ..kp(3.0, 3.0) }], 33, 33, 3.0).unwrap();
    assert_eq!(hm.shape(), &[1, 2, 33, 33]);
    let plane = &hm.data()[..33 * 33];
    let (arg, max) = plane.iter().enumerate().fold((0, 0.0f32), |a, (i, &v)| if v > a.1 { (i, v) } else { a });
    assert_eq!((arg, max), (16 * 33 + 16, 1.0));
    assert!(hm.data()[33 * 33..].iter().all(|&v| v == 0.0));

    let hm = encode_heatmap(&[kp(10.0, 10.0)], 32, 32, 2.0).unwrap();
    assert!((hm.data()[10 * 32 + 12] - (-0.5f32).exp()).abs() < 1e-7);
    assert!((hm.data()[10 * 32 + 12] - 0.6065).abs() < 1e-4);
    assert!(encode_heatmap(&[kp(1.0, 1.0)], 8, 8, 0.0).is_err());
}

proptest! {
    #[test]
    fn heatmap_range_and_unique_peak(
        pts in prop::collection::vec((0.0f32..47.0, 0.0f32..31.0, any::<bool>()), 1..6),
        sigma in 0.5f32..6.0,
    ) {
        let points: Vec<Keypoint> = pts.iter().map(|&(x, y, v)| Keypoint { x, y, visible: v }).collect();
        let hm = encode_heatmap(&points, 32, 48, sigma).unwrap();
        prop_assert!(hm.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        for (j, k) in points.iter().enumerate() {
            let plane = &hm.data()[j * 32 * 48..(j + 1) * 32 * 48];
            let max = plane.iter().cloned().fold(0.0f32, f32::max);
            if k.visible {
                prop_assert_eq!(plane.iter().filter(|&&v| v == max).count(), 1);
                let nearest = (k.y.round() as usize) * 48 + k.x.round() as usize;
                prop_assert_eq!(plane[nearest], max);
            } else {
                prop_assert_eq!(max, 0.0);
            }
        }
    }
}

fn face(offset: f32) -> Vec<[f32; 2]> {
    (0..68)
        .map(|i| {
            let t = i as f32 * 0.37;
            // quarter-pixel grid so mirroring is exact
            let q = |v: f32| (v * 4.0).round() / 4.0;
            [q(offset + 10.0 + 12.0 * t.cos() + (i % 7) as f32), q(20.0 + 10.0 * t.sin() + (i % 5) as f32)]
        })
        .collect()
}

#[test]
fn landmark_raster() {
    let pts = face(4.0);
    let a = encode_landmarks(&pts, 48, 64).unwrap();
    let b = encode_landmarks(&pts, 48, 64).unwrap();
    assert_eq!(a.data(), b.data());
    assert_eq!(a.shape(), &[1, 3, 48, 64]);
    assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    // bottom rows are far from every point
    for c in 0..3 {
        assert!(a.data()[(c * 48 + 44) * 64..(c * 48 + 48) * 64].iter().all(|&v| v == 0.0));
    }
    // every group leaves its colour somewhere
    assert_eq!(LANDMARK_GROUPS.len(), 8);
    assert!(a.data().iter().any(|&v| v > 0.9));

    let flipped: Vec<[f32; 2]> = pts.iter().map(|p| [63.0 - p[0], p[1]]).collect();
    let f = encode_landmarks(&flipped, 48, 64).unwrap();
    for c in 0..3 {
        for y in 0..48 {
            for x in 0..64 {
                let d = (f.data()[(c * 48 + y) * 64 + x] - a.data()[(c * 48 + y) * 64 + 63 - x]).abs();
                assert!(d < 1e-5, "({c}, {y}, {x}): {d}");
            }
        }
    }
    let mut wild = pts.clone();
    wild[3] = [-50.0, 400.0];
    assert!(encode_landmarks(&wild, 48, 64).unwrap().all_finite());
    assert!(encode_landmarks(&pts[..60], 48, 64).is_err());
}

#[test]
fn view_encodings() {
    let v = encode_view(&ViewPose::Shapenet { azimuth: 0, elevation: 0 }, 4, 5).unwrap();
    assert_eq!(v.shape(), &[1, 21, 4, 5]);
    for c in 0..21 {
        let want = if c == 0 || c == 18 { 1.0 } else { 0.0 };
        assert!(v.data()[c * 20..(c + 1) * 20].iter().all(|&x| x == want));
    }
    let mut seen = std::collections::HashSet::new();
    for az in 0..18 {
        for el in 0..3 {
            let e = encode_view(&ViewPose::Shapenet { azimuth: az, elevation: el }, 2, 2).unwrap();
            seen.insert(e.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }
    assert_eq!(seen.len(), 54);
    let cam = [0.1f32, -0.2, 0.3, 0.4, -0.5, 0.6];
    let e = encode_view(&ViewPose::Camera { vector: cam }, 3, 3).unwrap();
    assert_eq!(e.shape(), &[1, 6, 3, 3]);
    for c in 0..6 {
        assert!(e.data()[c * 9..(c + 1) * 9].iter().all(|&x| x == cam[c]));
    }
    assert!(encode_view(&ViewPose::Shapenet { azimuth: 18, elevation: 0 }, 2, 2).is_err());
    assert!(encode_view(&ViewPose::Shapenet { azimuth: 0, elevation: 3 }, 2, 2).is_err());
}

// ---- tuples

#[test]
fn exact_identity_gives_its_whole_set() {
    let s = TupleSampler::new(&[vec![7, 8, 9]], 2, 1).unwrap();
    let mut roles = std::collections::HashSet::new();
    for t in s.iter().take(60) {
        let mut all = t.sources.clone();
        all.push(t.target);
        roles.insert(all.clone());
        all.sort();
        assert_eq!(all, vec![7, 8, 9]);
    }
    assert!(roles.len() > 1, "roles are never shuffled");
}

#[test]
fn tuples_are_deterministic_and_valid() {
    let groups: Vec<Vec<usize>> = (0..100).map(|g| (g * 5..g * 5 + 5).collect()).collect();
    let a = TupleSampler::new(&groups, 2, 42).unwrap();
    let b = TupleSampler::new(&groups, 2, 42).unwrap();
    let c = TupleSampler::new(&groups, 2, 43).unwrap();
    let ta: Vec<_> = a.iter().take(1000).collect();
    assert_eq!(ta, b.iter().take(1000).collect::<Vec<_>>());
    assert_ne!(ta, c.iter().take(1000).collect::<Vec<_>>());
    for t in &ta {
        let mut all = t.sources.clone();
        all.push(t.target);
        assert!(all.iter().all(|&i| i / 5 == t.group));
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 3);
    }
    // one epoch visits each identity once
    let mut first: Vec<usize> = ta[..100].iter().map(|t| t.group).collect();
    first.sort();
    assert_eq!(first, (0..100).collect::<Vec<_>>());
    assert_eq!(a.tuple(517), ta[517]);
}

#[test]
fn small_identities_are_skipped() {
    let s = TupleSampler::new(&[vec![0, 1], vec![2, 3, 4], vec![5]], 2, 0).unwrap();
    assert_eq!(s.eligible(), 1);
    assert!(s.iter().take(20).all(|t| t.group == 1));
    assert!(TupleSampler::new(&[vec![0, 1]], 2, 0).is_err());
}

#[test]
fn identity_split_is_disjoint() {
    let (train, test) = split_identities(50, 7, 3);
    assert_eq!((train.len(), test.len()), (43, 7));
    assert!(test.iter().all(|t| !train.contains(t)));
    assert_eq!(split_identities(50, 7, 3), (train, test));
}

// ---- synthetic sprites

#[test]
fn identity_and_translation_flows() {
    let zero = flow_between(64, &SpriteView::IDENTITY, &SpriteView::IDENTITY, 1);
    assert!(zero.data().iter().all(|&v| v == 0.0));
    let shifted = SpriteView {
        translation: [5.0, 0.0],
        ..SpriteView::IDENTITY
    };
    let f = flow_between(64, &SpriteView::IDENTITY, &shifted, 1);
    assert!(f.data()[..4096].iter().all(|&v| (v - 5.0).abs() < 1e-5));
    assert!(f.data()[4096..].iter().all(|&v| v.abs() < 1e-5));
    // half the offset in pixels of a stride-2 level
    let f = flow_between(64, &SpriteView::IDENTITY, &shifted, 2);
    assert!(f.data()[..1024].iter().all(|&v| (v - 2.5).abs() < 1e-5));
}

#[test]
fn rotation_flow_matches_matrix() {
    let rot = SpriteView {
        angle: PI / 6.0,
        ..SpriteView::IDENTITY
    };
    let f = flow_between(64, &SpriteView::IDENTITY, &rot, 1);
    let c = 31.5;
    let (cs, sn) = ((PI / 6.0).cos(), (PI / 6.0).sin());
    for (x, y) in [(0usize, 0usize), (63, 0), (10, 50), (31, 32), (45, 7)] {
        let (px, py) = (x as f64 - c, y as f64 - c);
        let want = [cs * px - sn * py + c - x as f64, sn * px + cs * py + c - y as f64];
        let got = [f.data()[y * 64 + x] as f64, f.data()[4096 + y * 64 + x] as f64];
        assert!((got[0] - want[0]).abs() < 1e-4 && (got[1] - want[1]).abs() < 1e-4, "{got:?} {want:?}");
    }
}

#[test]
fn ground_truth_flow_warps_source_onto_target() {
    let data = SynthSprites::new(9, 64, 0, 10, 6).unwrap();
    let mut worst = 0.0f32;
    for id in 0..10 {
        for (t, s) in [(0usize, 1usize), (2, 3), (4, 5), (5, 0), (1, 4)] {
            let (ti, si) = (id * 6 + t, id * 6 + s);
            let target = data.load(ti).unwrap();
            let source = data.load(si).unwrap();
            let flow = data.ground_truth_flow(ti, si, 1).unwrap();
            let warped = warp(&source.image, &flow).unwrap();
            let mask = target.mask.unwrap();
            let (mut err, mut n) = (0.0f32, 0.0f32);
            for p in 0..4096 {
                if mask.data()[p] > 0.5 {
                    for c in 0..3 {
                        err += (warped.data()[c * 4096 + p] - target.image.data()[c * 4096 + p]).abs();
                    }
                    n += 3.0;
                }
            }
            assert!(n > 300.0);
            worst = worst.max(err / n);
        }
    }
    assert!(worst < 0.05, "masked L1 {worst}");
}

#[test]
fn sprites_are_deterministic_and_posed() {
    let a = SynthSprites::new(1, 64, 0, 4, 3).unwrap();
    let b = SynthSprites::new(1, 64, 0, 4, 3).unwrap();
    let (sa, sb) = (a.load(5).unwrap(), b.load(5).unwrap());
    assert_eq!(sa.image.data(), sb.image.data());
    assert_eq!(sa.pose.data(), sb.pose.data());
    assert_eq!(sa.pose.shape(), &[1, 4, 64, 64]);
    assert!(sa.image.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    assert_eq!(a.groups()[1].1, vec![3, 4, 5]);
    assert!(a.ground_truth_flow(0, 4, 1).is_none());
    // keypoints lie on the sprite
    let sprite = a.sprite(1);
    let view = a.view(1, 2);
    for k in sprite.keypoints_at(&view, 64) {
        let p = (k.y.round() as usize) * 64 + k.x.round() as usize;
        assert_eq!(sa.mask.as_ref().unwrap().data()[p], 1.0);
    }
    assert!(SynthSprites::new(1, 16, 0, 4, 3).is_err());
    let held = SynthSprites::new(1, 64, 4, 2, 3).unwrap();
    assert!(held.groups().iter().all(|(n, _)| !a.groups().iter().any(|(m, _)| m == n)));
}

#[test]
fn batches_stack_tuples() {
    let data = SynthSprites::new(2, 32, 0, 6, 4).unwrap();
    let sampler = TupleSampler::new(&data.groups().into_iter().map(|g| g.1).collect::<Vec<_>>(), 2, 0).unwrap();
    let tuples: Vec<SampleTuple> = sampler.iter().take(3).map(|t| load_tuple(&data, &t).unwrap()).collect();
    let batch = collate(&tuples).unwrap();
    assert_eq!(batch.sources.len(), 2);
    assert_eq!(batch.sources[1].image.shape(), &[3, 3, 32, 32]);
    assert_eq!(batch.target_pose.shape(), &[3, 4, 32, 32]);
    assert_eq!(batch.target_mask.as_ref().unwrap().shape(), &[3, 1, 32, 32]);
    let flows = batch_flows(&data, &batch, 4).unwrap();
    assert_eq!(flows[0].shape(), &[3, 2, 8, 8]);
    assert_eq!(batch.with_sources(1).sources.len(), 1);
    assert!(collate(&[]).is_err());
}

// ---- index files

fn write_png(path: &Path, w: u32, h: u32, shade: u8) {
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    image::RgbImage::from_fn(w, h, |x, y| image::Rgb([shade, (x * 7) as u8, (y * 5) as u8]))
        .save(path)
        .unwrap();
}

#[test]
fn keypoint_csv_layout_builds_an_index() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let xs = "[4, 10, -1]";
    let ys = "[5, 12, -1]";
    let mut csv = String::from("name:keypoints_y:keypoints_x\n");
    for (id, view) in [("0002", "c1s1_000451_03"), ("0002", "c2s1_000301_01"), ("0007", "c1s1_000100_02")] {
        let name = format!("{id}_{view}.jpg");
        write_png(&root.join("train").join(&name), 16, 32, 10);
        csv.push_str(&format!("{name}:{ys}:{xs}\n"));
    }
    std::fs::write(root.join("market-annotation-train.csv"), &csv).unwrap();
    let records = build_index(Family::Market, root).unwrap();
    assert_eq!(records.len(), 3);
    assert_eq!(records[0].identity, "0002");
    assert_eq!(records[2].identity, "0007");
    let PoseAnnotation::Keypoints { points } = &records[0].pose else { panic!() };
    assert_eq!(points[1], Keypoint { x: 10.0, y: 12.0, visible: true });
    assert!(!points[2].visible);
    assert_eq!(build_index(Family::Market, root).unwrap(), records);

    let index = root.join("out/index.jsonl");
    write_index(&index, &records).unwrap();
    assert_eq!(read_index(&index).unwrap(), records);
    let ds = IndexDataset::open(&index, root, (64, 32)).unwrap();
    assert_eq!(ds.groups().len(), 2);
    assert_eq!(ds.pose_channels(), 3);
    let s = ds.load(0).unwrap();
    assert_eq!(s.image.shape(), &[1, 3, 64, 32]);
    assert_eq!(s.pose.shape(), &[1, 3, 64, 32]);
    assert!(s.image.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    // joint (10, 12) of a 16x32 image lands at (20.5, 24.5) after 2x resize
    let plane = &s.pose.data()[64 * 32..2 * 64 * 32];
    let peak = plane.iter().enumerate().fold((0, 0.0f32), |a, (i, &v)| if v > a.1 { (i, v) } else { a }).0;
    assert!([(24, 20), (24, 21), (25, 20), (25, 21)].contains(&(peak / 32, peak % 32)));
    assert!(s.mask.is_some());

    std::fs::remove_file(root.join("train/0007_c1s1_000100_02.jpg")).unwrap();
    let err = build_index(Family::Market, root).unwrap_err().to_string();
    assert!(err.contains("1 missing") && err.contains("0007_c1s1_000100_02.jpg"), "{err}");
}

#[test]
fn empty_root_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    for fam in ["deepfashion", "market", "kitti", "shapenet", "voxceleb2"] {
        assert!(build_index(fam.parse().unwrap(), dir.path()).is_err(), "{fam}");
    }
    assert!(build_index(Family::Shapenet, &dir.path().join("nope")).is_err());
    assert!("celeba".parse::<Family>().is_err());
}

#[test]
fn view_and_landmark_layouts() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    for (az, el) in [(0, 0), (5, 2), (17, 1)] {
        write_png(&root.join(format!("shapenet/chair01/{az}_{el}.png")), 8, 8, 0);
    }
    let recs = build_index(Family::Shapenet, &root.join("shapenet")).unwrap();
    assert_eq!(recs.len(), 3);
    assert!(recs.iter().all(|r| r.identity == "chair01"));
    assert_eq!(recs[1].pose.channels(), 21);

    let frame = root.join("vox/id001/vidA/0001.png");
    write_png(&frame, 32, 32, 0);
    let marks: String = face(0.0).iter().map(|p| format!("{} {}\n", p[0], p[1])).collect();
    std::fs::write(frame.with_extension("txt"), marks).unwrap();
    write_png(&root.join("vox/id001/vidA/0002.png"), 32, 32, 0);
    let err = build_index(Family::Voxceleb2, &root.join("vox")).unwrap_err().to_string();
    assert!(err.contains("0002.txt"), "{err}");
    std::fs::remove_file(root.join("vox/id001/vidA/0002.png")).unwrap();
    let recs = build_index(Family::Voxceleb2, &root.join("vox")).unwrap();
    assert_eq!(recs[0].identity, "id001/vidA");
    let ds = IndexDataset::new(recs, &root.join("vox"), (32, 32)).unwrap();
    assert_eq!(ds.load(0).unwrap().pose.shape(), &[1, 3, 32, 32]);

    let kitti = root.join("kitti");
    std::fs::create_dir_all(kitti.join("poses")).unwrap();
    std::fs::write(kitti.join("poses/00.txt"), "1 0 0 1.5 0 1 0 -2 0 0 1 3\n1 0 0 0 0 1 0 0 0 0 1 0\n").unwrap();
    for f in 0..2 {
        write_png(&kitti.join(format!("sequences/00/image_2/{f:06}.png")), 8, 4, 0);
    }
    let recs = build_index(Family::Kitti, &kitti).unwrap();
    assert_eq!(recs.len(), 2);
    let PoseAnnotation::View { view: ViewPose::Camera { vector } } = recs[0].pose else { panic!() };
    assert_eq!(vector, [1.5, -2.0, 3.0, 0.0, 0.0, 0.0]);
    let yaw = 0.3f64;
    let m = [yaw.cos(), -yaw.sin(), 0.0, 0.0, yaw.sin(), yaw.cos(), 0.0, 0.0, 0.0, 0.0, 1.0, 0.0];
    assert!((camera_vector(&m)[5] - 0.3).abs() < 1e-6);
}

#[test]
fn synth_data_source_splits_identities() {
    let source = rfgen::config::DataSource::Synth {
        identities: 12,
        views: 3,
        size: 32,
        seed: 5,
        test_identities: Some(4),
    };
    let (train, test) = open(&source, Path::new("."), (32, 32)).unwrap();
    assert_eq!((train.groups().len(), test.groups().len()), (12, 4));
    let names: Vec<String> = train.groups().into_iter().map(|g| g.0).collect();
    assert!(test.groups().iter().all(|g| !names.contains(&g.0)));
}
