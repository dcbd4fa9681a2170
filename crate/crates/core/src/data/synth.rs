use std::f64::consts::PI;

use rand::Rng;

use super::pose::{default_sigma, encode_heatmap, Keypoint};
use super::{Dataset, Sample};
use crate::autograd::Tensor;
use crate::error::{contract, Result};
use crate::rng::keyed;

pub const SPRITE_KEYPOINTS: usize = 4;
const SUPERSAMPLE: usize = 4;

/// 2D affine map `p -> a p + b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine {
    pub a: [[f64; 2]; 2],
    pub b: [f64; 2],
}

impl Affine {
    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        [
            self.a[0][0] * p[0] + self.a[0][1] * p[1] + self.b[0],
            self.a[1][0] * p[0] + self.a[1][1] * p[1] + self.b[1],
        ]
    }

    pub fn inverse(&self) -> Affine {
        let [[a, b], [c, d]] = self.a;
        let det = a * d - b * c;
        let inv = [[d / det, -b / det], [-c / det, a / det]];
        let t = [
            -(inv[0][0] * self.b[0] + inv[0][1] * self.b[1]),
            -(inv[1][0] * self.b[0] + inv[1][1] * self.b[1]),
        ];
        Affine { a: inv, b: t }
    }

    /// `self` after `other`.
    pub fn then_after(&self, other: &Affine) -> Affine {
        let m = |i: usize, j: usize| self.a[i][0] * other.a[0][j] + self.a[i][1] * other.a[1][j];
        Affine {
            a: [[m(0, 0), m(0, 1)], [m(1, 0), m(1, 1)]],
            b: self.apply(other.b),
        }
    }
}

/// Placement of a sprite in the frame: rotate and scale about the canvas
/// centre, then translate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpriteView {
    pub angle: f64,
    pub scale: f64,
    pub translation: [f64; 2],
}

impl SpriteView {
    pub const IDENTITY: SpriteView = SpriteView {
        angle: 0.0,
        scale: 1.0,
        translation: [0.0, 0.0],
    };

    /// Canonical sprite coordinates to pixel coordinates.
    pub fn to_pixels(&self, size: usize) -> Affine {
        let c = (size as f64 - 1.0) / 2.0;
        let (s, cs) = (self.scale * self.angle.sin(), self.scale * self.angle.cos());
        Affine {
            a: [[cs, -s], [s, cs]],
            b: [c + self.translation[0], c + self.translation[1]],
        }
    }

    fn random(rng: &mut impl Rng, size: usize) -> SpriteView {
        let radius = size as f64 / 8.0 * rng.gen::<f64>().sqrt();
        let dir = rng.gen_range(0.0..2.0 * PI);
        SpriteView {
            angle: rng.gen_range(-PI / 2.0..=PI / 2.0),
            scale: rng.gen_range(0.8f64.ln()..=1.25f64.ln()).exp(),
            translation: [radius * dir.cos(), radius * dir.sin()],
        }
    }
}

/// Exact flow from `target` to `source` views, `[1, 2, size/factor, size/factor]`.
///
/// Pixel `i` of a level with stride `factor` sits at image coordinate
/// `factor * i + (factor - 1) / 2`; offsets are in that level's pixels.
pub fn flow_between(size: usize, target: &SpriteView, source: &SpriteView, factor: usize) -> Tensor {
    let map = source.to_pixels(size).then_after(&target.to_pixels(size).inverse());
    let n = size / factor;
    let f = factor as f64;
    let mut data = vec![0.0f32; 2 * n * n];
    for y in 0..n {
        for x in 0..n {
            let p = [f * x as f64 + (f - 1.0) / 2.0, f * y as f64 + (f - 1.0) / 2.0];
            let q = map.apply(p);
            data[y * n + x] = ((q[0] - p[0]) / f) as f32;
            data[n * n + y * n + x] = ((q[1] - p[1]) / f) as f32;
        }
    }
    Tensor::from_vec(data, &[1, 2, n, n])
}

/// A textured star-shaped polygon in canonical coordinates.
#[derive(Debug, Clone)]
pub struct Sprite {
    pub vertices: Vec<[f64; 2]>,
    pub keypoints: [[f64; 2]; SPRITE_KEYPOINTS],
    base: [f64; 3],
    waves: [([f64; 2], f64, [f64; 3]); 2],
    background: [f64; 3],
}

impl Sprite {
    pub fn random(rng: &mut impl Rng, size: usize) -> Sprite {
        let n = rng.gen_range(5..=8);
        let radius = size as f64 * rng.gen_range(0.16..0.26);
        let offset = rng.gen_range(0.0..2.0 * PI);
        let vertices: Vec<[f64; 2]> = (0..n)
            .map(|i| {
                let t = offset + 2.0 * PI * (i as f64 + rng.gen_range(-0.25..0.25)) / n as f64;
                let r = radius * rng.gen_range(0.6..1.0);
                [r * t.cos(), r * t.sin()]
            })
            .collect();
        let keypoints = std::array::from_fn(|j| {
            let v = vertices[j * n / SPRITE_KEYPOINTS];
            [0.7 * v[0], 0.7 * v[1]]
        });
        let mut wave = || {
            let wavelength = rng.gen_range(8.0..16.0) * size as f64 / 64.0;
            let dir = rng.gen_range(0.0..PI);
            let k = 2.0 * PI / wavelength;
            let amp = std::array::from_fn(|_| rng.gen_range(0.15..0.3));
            ([k * dir.cos(), k * dir.sin()], rng.gen_range(0.0..2.0 * PI), amp)
        };
        let waves = [wave(), wave()];
        Sprite {
            vertices,
            keypoints,
            base: std::array::from_fn(|_| rng.gen_range(-0.2..0.6)),
            waves,
            background: std::array::from_fn(|_| rng.gen_range(-1.0..-0.5)),
        }
    }

    pub fn contains(&self, q: [f64; 2]) -> bool {
        let v = &self.vertices;
        let mut inside = false;
        let mut j = v.len() - 1;
        for i in 0..v.len() {
            if (v[i][1] > q[1]) != (v[j][1] > q[1])
                && q[0] < (v[j][0] - v[i][0]) * (q[1] - v[i][1]) / (v[j][1] - v[i][1]) + v[i][0]
            {
                inside = !inside;
            }
            j = i;
        }
        inside
    }

    fn color(&self, q: [f64; 2]) -> [f64; 3] {
        let mut c = self.base;
        for (k, phase, amp) in &self.waves {
            let s = (k[0] * q[0] + k[1] * q[1] + phase).sin();
            for ch in 0..3 {
                c[ch] += amp[ch] * s;
            }
        }
        c
    }

    /// Image `[1, 3, size, size]` in [-1, 1] and support mask `[1, 1, size, size]`.
    pub fn render(&self, view: &SpriteView, size: usize) -> (Tensor, Tensor) {
        let inv = view.to_pixels(size).inverse();
        let plane = size * size;
        let mut image = vec![0.0f32; 3 * plane];
        let mut mask = vec![0.0f32; plane];
        let step = 1.0 / SUPERSAMPLE as f64;
        for y in 0..size {
            for x in 0..size {
                let mut acc = [0.0; 3];
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let p = [
                            x as f64 - 0.5 + (sx as f64 + 0.5) * step,
                            y as f64 - 0.5 + (sy as f64 + 0.5) * step,
                        ];
                        let q = inv.apply(p);
                        let c = if self.contains(q) { self.color(q) } else { self.background };
                        for ch in 0..3 {
                            acc[ch] += c[ch];
                        }
                    }
                }
                let norm = (SUPERSAMPLE * SUPERSAMPLE) as f64;
                for ch in 0..3 {
                    image[ch * plane + y * size + x] = (acc[ch] / norm).clamp(-1.0, 1.0) as f32;
                }
                if self.contains(inv.apply([x as f64, y as f64])) {
                    mask[y * size + x] = 1.0;
                }
            }
        }
        (
            Tensor::from_vec(image, &[1, 3, size, size]),
            Tensor::from_vec(mask, &[1, 1, size, size]),
        )
    }

    pub fn keypoints_at(&self, view: &SpriteView, size: usize) -> Vec<Keypoint> {
        let m = view.to_pixels(size);
        self.keypoints
            .iter()
            .map(|&k| {
                let p = m.apply(k);
                Keypoint {
                    x: p[0] as f32,
                    y: p[1] as f32,
                    visible: true,
                }
            })
            .collect()
    }
}

/// Procedural sprite dataset: identities `first..first + count`, each seen
/// from `views` random placements. Image `i` is view `i % views` of identity
/// `first + i / views`.
#[derive(Debug, Clone)]
pub struct SynthSprites {
    pub seed: u64,
    pub size: usize,
    pub views: usize,
    pub first: usize,
    pub count: usize,
}

impl SynthSprites {
    pub fn new(seed: u64, size: usize, first: usize, count: usize, views: usize) -> Result<Self> {
        if size < 32 {
            return Err(contract("synth_sprites", format!("size must be at least 32, got {size}")));
        }
        if views == 0 || count == 0 {
            return Err(contract("synth_sprites", "need at least one identity and one view"));
        }
        Ok(SynthSprites {
            seed,
            size,
            views,
            first,
            count,
        })
    }

    pub fn sprite(&self, identity: usize) -> Sprite {
        Sprite::random(&mut keyed(self.seed, &[0, identity as u64]), self.size)
    }

    pub fn view(&self, identity: usize, view: usize) -> SpriteView {
        SpriteView::random(&mut keyed(self.seed, &[1, identity as u64, view as u64]), self.size)
    }

    fn locate(&self, index: usize) -> (usize, usize) {
        (self.first + index / self.views, index % self.views)
    }
}

impl Dataset for SynthSprites {
    fn len(&self) -> usize {
        self.count * self.views
    }

    fn image_size(&self) -> (usize, usize) {
        (self.size, self.size)
    }

    fn pose_channels(&self) -> usize {
        SPRITE_KEYPOINTS
    }

    fn groups(&self) -> Vec<(String, Vec<usize>)> {
        (0..self.count)
            .map(|g| (format!("sprite-{}", self.first + g), (g * self.views..(g + 1) * self.views).collect()))
            .collect()
    }

    fn load(&self, index: usize) -> Result<Sample> {
        let (identity, v) = self.locate(index);
        let sprite = self.sprite(identity);
        let view = self.view(identity, v);
        let (image, mask) = sprite.render(&view, self.size);
        let pose = encode_heatmap(&sprite.keypoints_at(&view, self.size), self.size, self.size, default_sigma(self.size))?;
        Ok(Sample {
            image,
            pose,
            mask: Some(mask),
        })
    }

    fn ground_truth_flow(&self, target: usize, source: usize, factor: usize) -> Option<Tensor> {
        let (ti, tv) = self.locate(target);
        let (si, sv) = self.locate(source);
        if ti != si {
            return None;
        }
        Some(flow_between(self.size, &self.view(ti, tv), &self.view(si, sv), factor))
    }
}
