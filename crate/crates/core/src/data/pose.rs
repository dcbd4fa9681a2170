use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{contract, Result};

/// One annotated joint in pixel coordinates of the image it belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "(f32, f32, bool)", into = "(f32, f32, bool)")]
pub struct Keypoint {
    pub x: f32,
    pub y: f32,
    pub visible: bool,
}

impl From<(f32, f32, bool)> for Keypoint {
    fn from((x, y, visible): (f32, f32, bool)) -> Self {
        Keypoint { x, y, visible }
    }
}

impl From<Keypoint> for (f32, f32, bool) {
    fn from(k: Keypoint) -> Self {
        (k.x, k.y, k.visible)
    }
}

pub const SHAPENET_AZIMUTHS: usize = 18;
pub const SHAPENET_ELEVATIONS: usize = 3;
pub const LANDMARKS: usize = 68;

/// Camera or object viewpoint for the view-conditioned families.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ViewPose {
    Shapenet { azimuth: usize, elevation: usize },
    /// Translation then rotation (three each).
    Camera { vector: [f32; 6] },
}

impl ViewPose {
    pub fn channels(&self) -> usize {
        match self {
            ViewPose::Shapenet { .. } => SHAPENET_AZIMUTHS + SHAPENET_ELEVATIONS,
            ViewPose::Camera { .. } => 6,
        }
    }
}

/// Heatmap width at `height`: 6 px at 256, scaled linearly.
pub fn default_sigma(height: usize) -> f32 {
    6.0 * height as f32 / 256.0
}

/// One Gaussian channel per joint, `[1, J, h, w]`; invisible joints stay zero.
pub fn encode_heatmap(points: &[Keypoint], h: usize, w: usize, sigma: f32) -> Result<Tensor> {
    if !(sigma > 0.0) {
        return Err(contract("encode_heatmap", format!("sigma must be positive, got {sigma}")));
    }
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut data = vec![0.0f32; points.len() * h * w];
    for (j, k) in points.iter().enumerate() {
        if !k.visible {
            continue;
        }
        let plane = &mut data[j * h * w..(j + 1) * h * w];
        for y in 0..h {
            let dy = y as f32 - k.y;
            for x in 0..w {
                let dx = x as f32 - k.x;
                plane[y * w + x] = (-(dx * dx + dy * dy) * inv).exp();
            }
        }
    }
    Ok(Tensor::from_vec(data, &[1, points.len(), h, w]))
}

/// Facial groups of the 68-point layout: (first, last, closed).
pub const LANDMARK_GROUPS: [(usize, usize, bool); 8] = [
    (0, 16, false),  // jaw
    (17, 21, false), // right brow
    (22, 26, false), // left brow
    (27, 35, false), // nose
    (36, 41, true),  // right eye
    (42, 47, true),  // left eye
    (48, 59, true),  // outer lip
    (60, 67, true),  // inner lip
];

pub const LANDMARK_PALETTE: [[f32; 3]; 8] = [
    [1.0, 1.0, 1.0],
    [1.0, 0.5, 0.0],
    [1.0, 1.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.5, 1.0],
    [0.0, 1.0, 1.0],
    [1.0, 0.0, 0.0],
    [1.0, 0.0, 1.0],
];

fn segment_distance(px: f32, py: f32, a: [f32; 2], b: [f32; 2]) -> f32 {
    let (ex, ey) = (b[0] - a[0], b[1] - a[1]);
    let len2 = ex * ex + ey * ey;
    let t = if len2 > 0.0 {
        (((px - a[0]) * ex + (py - a[1]) * ey) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (dx, dy) = (px - a[0] - t * ex, py - a[1] - t * ey);
    (dx * dx + dy * dy).sqrt()
}

/// Antialiased polylines of the 68 landmarks, one palette colour per facial
/// group, `[1, 3, h, w]` in [0, 1]. Points outside the canvas are clamped to it.
pub fn encode_landmarks(points: &[[f32; 2]], h: usize, w: usize) -> Result<Tensor> {
    if points.len() != LANDMARKS {
        return Err(contract("encode_landmarks", format!("expected {LANDMARKS} points, got {}", points.len())));
    }
    let clip = |p: [f32; 2]| [p[0].clamp(0.0, (w - 1) as f32), p[1].clamp(0.0, (h - 1) as f32)];
    let mut data = vec![0.0f32; 3 * h * w];
    let width = 1.0f32;
    for (g, &(first, last, closed)) in LANDMARK_GROUPS.iter().enumerate() {
        let mut segments: Vec<(usize, usize)> = (first..last).map(|i| (i, i + 1)).collect();
        if closed {
            segments.push((last, first));
        }
        for (i, j) in segments {
            let (a, b) = (clip(points[i]), clip(points[j]));
            let x0 = (a[0].min(b[0]) - width).floor().max(0.0) as usize;
            let x1 = ((a[0].max(b[0]) + width).ceil() as usize).min(w - 1);
            let y0 = (a[1].min(b[1]) - width).floor().max(0.0) as usize;
            let y1 = ((a[1].max(b[1]) + width).ceil() as usize).min(h - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let v = (1.0 - segment_distance(x as f32, y as f32, a, b) / width).max(0.0);
                    for c in 0..3 {
                        let px = &mut data[(c * h + y) * w + x];
                        *px = px.max(v * LANDMARK_PALETTE[g][c]);
                    }
                }
            }
        }
    }
    Ok(Tensor::from_vec(data, &[1, 3, h, w]))
}

/// Broadcasts the view vector to constant channels, `[1, C, h, w]`.
pub fn encode_view(view: &ViewPose, h: usize, w: usize) -> Result<Tensor> {
    let vector: Vec<f32> = match *view {
        ViewPose::Shapenet { azimuth, elevation } => {
            if azimuth >= SHAPENET_AZIMUTHS || elevation >= SHAPENET_ELEVATIONS {
                return Err(contract(
                    "encode_view",
                    format!("azimuth {azimuth} / elevation {elevation} out of range"),
                ));
            }
            let mut v = vec![0.0; SHAPENET_AZIMUTHS + SHAPENET_ELEVATIONS];
            v[azimuth] = 1.0;
            v[SHAPENET_AZIMUTHS + elevation] = 1.0;
            v
        }
        ViewPose::Camera { vector } => vector.to_vec(),
    };
    let mut data = Vec::with_capacity(vector.len() * h * w);
    for v in &vector {
        data.extend(std::iter::repeat(*v).take(h * w));
    }
    Ok(Tensor::from_vec(data, &[1, vector.len(), h, w]))
}
