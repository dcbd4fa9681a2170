//! Line-delimited image index and thin builders for real dataset layouts.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::imageops::FilterType;
use serde::{Deserialize, Serialize};

use super::pose::{default_sigma, encode_heatmap, encode_landmarks, encode_view, Keypoint, ViewPose, LANDMARKS};
use super::{Dataset, Sample};
use crate::autograd::Tensor;
use crate::error::{io_err, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PoseAnnotation {
    Keypoints { points: Vec<Keypoint> },
    Landmarks { points: Vec<[f32; 2]> },
    View { view: ViewPose },
}

impl PoseAnnotation {
    pub fn channels(&self) -> usize {
        match self {
            PoseAnnotation::Keypoints { points } => points.len(),
            PoseAnnotation::Landmarks { .. } => 3,
            PoseAnnotation::View { view } => view.channels(),
        }
    }

    /// Pose tensor `[1, C, h, w]` at `size` for coordinates given in an image
    /// of `original` (height, width) pixels, plus a bounding-box mask when
    /// the annotation has points.
    pub fn encode(&self, original: (usize, usize), size: (usize, usize)) -> Result<(Tensor, Option<Tensor>)> {
        let ((oh, ow), (h, w)) = (original, size);
        let (sx, sy) = (w as f32 / ow as f32, h as f32 / oh as f32);
        let rescale = |x: f32, y: f32| ((x + 0.5) * sx - 0.5, (y + 0.5) * sy - 0.5);
        Ok(match self {
            PoseAnnotation::Keypoints { points } => {
                for k in points {
                    if k.visible && !(k.x >= 0.0 && k.y >= 0.0 && k.x < ow as f32 && k.y < oh as f32) {
                        return Err(Error::Dataset(format!("visible joint ({}, {}) outside {ow}x{oh}", k.x, k.y)));
                    }
                }
                let scaled: Vec<Keypoint> = points
                    .iter()
                    .map(|k| {
                        let (x, y) = rescale(k.x, k.y);
                        Keypoint { x, y, ..*k }
                    })
                    .collect();
                let mask = bbox_mask(scaled.iter().filter(|k| k.visible).map(|k| (k.x, k.y)), h, w);
                (encode_heatmap(&scaled, h, w, default_sigma(h))?, mask)
            }
            PoseAnnotation::Landmarks { points } => {
                let scaled: Vec<[f32; 2]> = points
                    .iter()
                    .map(|p| {
                        let (x, y) = rescale(p[0], p[1]);
                        [x, y]
                    })
                    .collect();
                let mask = bbox_mask(scaled.iter().map(|p| (p[0], p[1])), h, w);
                (encode_landmarks(&scaled, h, w)?, mask)
            }
            PoseAnnotation::View { view } => (encode_view(view, h, w)?, None),
        })
    }

    fn kind(&self) -> &'static str {
        match self {
            PoseAnnotation::Keypoints { .. } => "keypoints",
            PoseAnnotation::Landmarks { .. } => "landmarks",
            PoseAnnotation::View { .. } => "view",
        }
    }
}

/// One image of the index. `path` and `mask` are relative to the dataset root;
/// pose coordinates are in pixels of the stored image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexRecord {
    pub id: String,
    pub identity: String,
    pub path: String,
    pub pose: PoseAnnotation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
}

pub fn read_index(path: &Path) -> Result<Vec<IndexRecord>> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: IndexRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Dataset(format!("{}:{}: {e}", path.display(), i + 1)))?;
        records.push(rec);
    }
    Ok(records)
}

pub fn write_index(path: &Path, records: &[IndexRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::File::create(path).and_then(|mut f| f.write_all(&out)).map_err(io_err(path))
}

/// Images listed in an index file, resized to a fixed size on load.
#[derive(Debug, Clone)]
pub struct IndexDataset {
    records: Vec<IndexRecord>,
    root: PathBuf,
    size: (usize, usize),
    channels: usize,
    groups: Vec<(String, Vec<usize>)>,
}

impl IndexDataset {
    pub fn new(records: Vec<IndexRecord>, root: &Path, size: (usize, usize)) -> Result<Self> {
        let Some(first) = records.first() else {
            return Err(Error::Dataset("index is empty".into()));
        };
        let (kind, channels) = (first.pose.kind(), first.pose.channels());
        let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
        let mut slot: BTreeMap<String, usize> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            if r.pose.kind() != kind || r.pose.channels() != channels {
                return Err(Error::Dataset(format!(
                    "record {}: pose {} with {} channels, index started with {kind} with {channels}",
                    r.id,
                    r.pose.kind(),
                    r.pose.channels()
                )));
            }
            if let PoseAnnotation::Landmarks { points } = &r.pose {
                if points.len() != LANDMARKS {
                    return Err(Error::Dataset(format!("record {}: {} landmarks", r.id, points.len())));
                }
            }
            let g = *slot.entry(r.identity.clone()).or_insert_with(|| {
                groups.push((r.identity.clone(), Vec::new()));
                groups.len() - 1
            });
            groups[g].1.push(i);
        }
        Ok(IndexDataset {
            records,
            root: root.to_path_buf(),
            size,
            channels,
            groups,
        })
    }

    pub fn open(path: &Path, root: &Path, size: (usize, usize)) -> Result<Self> {
        Self::new(read_index(path)?, root, size)
    }

    pub fn records(&self) -> &[IndexRecord] {
        &self.records
    }

    /// The identities with the given group indices.
    pub fn subset(&self, groups: &[usize]) -> IndexDataset {
        let mut records = Vec::new();
        for &g in groups {
            records.extend(self.groups[g].1.iter().map(|&i| self.records[i].clone()));
        }
        IndexDataset::new(records, &self.root, self.size).expect("subset of a valid index")
    }
}

/// 8-bit RGB file to `[1, 3, h, w]` in [-1, 1], plus its original size.
pub fn load_image(path: &Path, size: Option<(usize, usize)>) -> Result<(Tensor, (usize, usize))> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let orig = (img.height() as usize, img.width() as usize);
    let img = match size {
        Some((h, w)) if (h, w) != orig => image::imageops::resize(&img, w as u32, h as u32, FilterType::Triangle),
        _ => img,
    };
    let (h, w) = (img.height() as usize, img.width() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px[c] as f32 / 127.5 - 1.0;
        }
    }
    Ok((Tensor::from_vec(data, &[1, 3, h, w]), orig))
}

fn bbox_mask(points: impl Iterator<Item = (f32, f32)>, h: usize, w: usize) -> Option<Tensor> {
    let pts: Vec<(f32, f32)> = points.collect();
    if pts.is_empty() {
        return None;
    }
    let (mut x0, mut x1, mut y0, mut y1) = (f32::MAX, f32::MIN, f32::MAX, f32::MIN);
    for (x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let (mx, my) = (0.1 * (x1 - x0) + 2.0, 0.1 * (y1 - y0) + 2.0);
    let mut data = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let (xf, yf) = (x as f32, y as f32);
            if xf >= x0 - mx && xf <= x1 + mx && yf >= y0 - my && yf <= y1 + my {
                data[y * w + x] = 1.0;
            }
        }
    }
    Some(Tensor::from_vec(data, &[1, 1, h, w]))
}

impl Dataset for IndexDataset {
    fn len(&self) -> usize {
        self.records.len()
    }

    fn image_size(&self) -> (usize, usize) {
        self.size
    }

    fn pose_channels(&self) -> usize {
        self.channels
    }

    fn groups(&self) -> Vec<(String, Vec<usize>)> {
        self.groups.clone()
    }

    fn load(&self, index: usize) -> Result<Sample> {
        let r = &self.records[index];
        let (h, w) = self.size;
        let (image, (oh, ow)) = load_image(&self.root.join(&r.path), Some(self.size))?;
        let (pose, fallback_mask) = r
            .pose
            .encode((oh, ow), self.size)
            .map_err(|e| Error::Dataset(format!("record {}: {e}", r.id)))?;
        let mask = match &r.mask {
            Some(m) => {
                let (t, _) = load_image(&self.root.join(m), Some(self.size))?;
                let bin: Vec<f32> = t.data()[..h * w].iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
                Some(Tensor::from_vec(bin, &[1, 1, h, w]))
            }
            None => fallback_mask,
        };
        Ok(Sample { image, pose, mask })
    }
}

/// Real dataset families with an index builder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Deepfashion,
    Market,
    Kitti,
    Shapenet,
    Voxceleb2,
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "deepfashion" => Family::Deepfashion,
            "market" => Family::Market,
            "kitti" => Family::Kitti,
            "shapenet" => Family::Shapenet,
            "voxceleb2" => Family::Voxceleb2,
            _ => return Err(Error::Dataset(format!("unknown dataset family `{s}`"))),
        })
    }
}

/// Frames per KITTI identity window.
pub const KITTI_WINDOW: usize = 10;

/// Scans `root` in the family's layout and builds index records sorted by id.
///
/// Layouts:
/// - deepfashion, market: `*annotation*.csv` files with rows
///   `name:[y, ...]:[x, ...]` (-1 marks a missing joint); images live in
///   `train/` or `test/` following the csv name, else in the root.
/// - kitti: `poses/<seq>.txt` (3x4 row-major per frame) and
///   `sequences/<seq>/image_2/<frame:06>.png`; identities are windows of
///   consecutive frames.
/// - shapenet: `<model>/<azimuth>_<elevation>.png`.
/// - voxceleb2: `<person>/<video>/<frame>.{png,jpg}` with 68 `x y` lines in
///   `<frame>.txt`.
pub fn build_index(family: Family, root: &Path) -> Result<Vec<IndexRecord>> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!("dataset root {} is not a directory", root.display())));
    }
    let mut missing = Vec::new();
    let mut records = match family {
        Family::Deepfashion | Family::Market => keypoint_csv(family, root, &mut missing)?,
        Family::Kitti => kitti(root, &mut missing)?,
        Family::Shapenet => shapenet(root)?,
        Family::Voxceleb2 => voxceleb(root, &mut missing)?,
    };
    if !missing.is_empty() {
        let mut report = format!("{} missing file(s) under {}:", missing.len(), root.display());
        for m in &missing {
            report.push_str("\n  ");
            report.push_str(m);
        }
        return Err(Error::Dataset(report));
    }
    if records.is_empty() {
        return Err(Error::Dataset(format!("no images found under {} for {family:?}", root.display())));
    }
    records.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(records)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()
        .map_err(io_err(dir))?;
    out.sort();
    Ok(out)
}

fn rel(root: &Path, p: &Path) -> String {
    p.strip_prefix(root).unwrap_or(p).to_string_lossy().replace('\\', "/")
}

fn parse_list(s: &str) -> Option<Vec<f32>> {
    let inner = s.trim().strip_prefix('[')?.strip_suffix(']')?;
    if inner.trim().is_empty() {
        return Some(Vec::new());
    }
    inner.split(',').map(|v| v.trim().parse().ok()).collect()
}

fn keypoint_csv(family: Family, root: &Path, missing: &mut Vec<String>) -> Result<Vec<IndexRecord>> {
    let csvs: Vec<PathBuf> = sorted_entries(root)?
        .into_iter()
        .filter(|p| {
            let name = p.file_name().map(|n| n.to_string_lossy().to_string()).unwrap_or_default();
            name.contains("annotation") && name.ends_with(".csv")
        })
        .collect();
    if csvs.is_empty() {
        missing.push("*annotation*.csv".into());
        return Ok(Vec::new());
    }
    let mut records = Vec::new();
    for csv in csvs {
        let text = fs::read_to_string(&csv).map_err(io_err(&csv))?;
        let stem = csv.file_name().unwrap().to_string_lossy().to_string();
        let dir = if stem.contains("train") {
            root.join("train")
        } else if stem.contains("test") {
            root.join("test")
        } else {
            root.to_path_buf()
        };
        for (line_no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with("name:") {
                continue;
            }
            let parts: Vec<&str> = line.split(':').collect();
            let bad = || Error::Dataset(format!("{}:{}: malformed row", csv.display(), line_no + 1));
            if parts.len() != 3 {
                return Err(bad());
            }
            let ys = parse_list(parts[1]).ok_or_else(bad)?;
            let xs = parse_list(parts[2]).ok_or_else(bad)?;
            if ys.len() != xs.len() {
                return Err(bad());
            }
            let name = parts[0].trim();
            let image = dir.join(name);
            if !image.is_file() {
                missing.push(rel(root, &image));
                continue;
            }
            let stem = name.rsplit_once('.').map(|(s, _)| s).unwrap_or(name);
            let identity = match family {
                Family::Market => stem.split('_').next().unwrap_or(stem),
                _ => stem.rsplit_once('_').map(|(s, _)| s).unwrap_or(stem),
            };
            let points = xs
                .iter()
                .zip(&ys)
                .map(|(&x, &y)| Keypoint {
                    x: x.max(0.0),
                    y: y.max(0.0),
                    visible: x >= 0.0 && y >= 0.0,
                })
                .collect();
            records.push(IndexRecord {
                id: rel(root, &image),
                identity: identity.to_string(),
                path: rel(root, &image),
                pose: PoseAnnotation::Keypoints { points },
                mask: None,
            });
        }
    }
    Ok(records)
}

/// Translation and ZYX Euler angles of a 3x4 camera matrix.
pub fn camera_vector(m: &[f64; 12]) -> [f32; 6] {
    let r = |i: usize, j: usize| m[i * 4 + j];
    let yaw = r(1, 0).atan2(r(0, 0));
    let pitch = (-r(2, 0)).atan2((r(2, 1).powi(2) + r(2, 2).powi(2)).sqrt());
    let roll = r(2, 1).atan2(r(2, 2));
    [m[3] as f32, m[7] as f32, m[11] as f32, roll as f32, pitch as f32, yaw as f32]
}

fn kitti(root: &Path, missing: &mut Vec<String>) -> Result<Vec<IndexRecord>> {
    let poses = root.join("poses");
    if !poses.is_dir() {
        missing.push("poses/".into());
        return Ok(Vec::new());
    }
    let mut records = Vec::new();
    for file in sorted_entries(&poses)? {
        if file.extension().map_or(true, |e| e != "txt") {
            continue;
        }
        let seq = file.file_stem().unwrap().to_string_lossy().to_string();
        let text = fs::read_to_string(&file).map_err(io_err(&file))?;
        for (frame, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
            let vals: Vec<f64> = line.split_whitespace().filter_map(|v| v.parse().ok()).collect();
            let m: [f64; 12] = vals
                .try_into()
                .map_err(|_| Error::Dataset(format!("{}:{}: expected 12 numbers", file.display(), frame + 1)))?;
            let image = root.join("sequences").join(&seq).join("image_2").join(format!("{frame:06}.png"));
            if !image.is_file() {
                missing.push(rel(root, &image));
                continue;
            }
            records.push(IndexRecord {
                id: rel(root, &image),
                identity: format!("{seq}/{:04}", frame / KITTI_WINDOW),
                path: rel(root, &image),
                pose: PoseAnnotation::View {
                    view: ViewPose::Camera {
                        vector: camera_vector(&m),
                    },
                },
                mask: None,
            });
        }
    }
    Ok(records)
}

fn shapenet(root: &Path) -> Result<Vec<IndexRecord>> {
    let mut records = Vec::new();
    for model in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        for image in sorted_entries(&model)? {
            let Some(stem) = image.file_stem().map(|s| s.to_string_lossy().to_string()) else {
                continue;
            };
            let Some((az, el)) = stem.split_once('_') else { continue };
            let (Ok(azimuth), Ok(elevation)) = (az.parse(), el.parse()) else { continue };
            let view = ViewPose::Shapenet { azimuth, elevation };
            encode_view(&view, 1, 1).map_err(|e| Error::Dataset(format!("{}: {e}", image.display())))?;
            records.push(IndexRecord {
                id: rel(root, &image),
                identity: rel(root, &model),
                path: rel(root, &image),
                pose: PoseAnnotation::View { view },
                mask: None,
            });
        }
    }
    Ok(records)
}

fn voxceleb(root: &Path, missing: &mut Vec<String>) -> Result<Vec<IndexRecord>> {
    let mut records = Vec::new();
    for person in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        for video in sorted_entries(&person)?.into_iter().filter(|p| p.is_dir()) {
            for image in sorted_entries(&video)? {
                let ext = image.extension().map(|e| e.to_string_lossy().to_lowercase());
                if !matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
                    continue;
                }
                let marks = image.with_extension("txt");
                let Ok(text) = fs::read_to_string(&marks) else {
                    missing.push(rel(root, &marks));
                    continue;
                };
                let points: Vec<[f32; 2]> = text
                    .lines()
                    .filter_map(|l| {
                        let mut it = l.split_whitespace().map(|v| v.parse::<f32>());
                        match (it.next(), it.next()) {
                            (Some(Ok(x)), Some(Ok(y))) => Some([x, y]),
                            _ => None,
                        }
                    })
                    .collect();
                if points.len() != LANDMARKS {
                    return Err(Error::Dataset(format!("{}: {} landmarks, expected {LANDMARKS}", marks.display(), points.len())));
                }
                records.push(IndexRecord {
                    id: rel(root, &image),
                    identity: rel(root, &video),
                    path: rel(root, &image),
                    pose: PoseAnnotation::Landmarks { points },
                    mask: None,
                });
            }
        }
    }
    Ok(records)
}
