//! FID, perceptual distances, held-out evaluation and sample grids.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::autograd::{no_grad, Tensor};
use crate::config::Ablation;
use crate::data::{batch_flows, collate, load_tuple, Batch, Dataset, TupleSampler};
use crate::error::{contract, io_err, Error, Result};
use crate::losses::{FeatureProvider, PERCEPTUAL_LAYERS};
use crate::networks::Generator;
use crate::train::infer;

/// Gaussian fit of a set of embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStats {
    pub mean: Vec<f64>,
    /// Row-major `d x d`, unbiased.
    pub cov: Vec<f64>,
    pub n: usize,
}

impl EmbeddingStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Two passes: mean first, then centred co-moments.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n < 2 {
            return Err(contract("embedding_stats", format!("need at least 2 samples, got {n}")));
        }
        let d = rows[0].len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(contract("embedding_stats", "rows differ in length"));
        }
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = vec![0.0; d * d];
        for r in rows {
            for i in 0..d {
                let di = r[i] - mean[i];
                for j in 0..d {
                    cov[i * d + j] += di * (r[j] - mean[j]);
                }
            }
        }
        cov.iter_mut().for_each(|c| *c /= (n - 1) as f64);
        Ok(EmbeddingStats { mean, cov, n })
    }
}

/// One-pass (Welford) accumulation of [`EmbeddingStats`].
#[derive(Debug, Clone, Default)]
pub struct StatsAccumulator {
    n: usize,
    mean: Vec<f64>,
    comoment: Vec<f64>,
}

impl StatsAccumulator {
    pub fn push(&mut self, row: &[f64]) {
        let d = row.len();
        if self.n == 0 {
            self.mean = vec![0.0; d];
            self.comoment = vec![0.0; d * d];
        }
        assert_eq!(d, self.mean.len(), "embedding width changed");
        self.n += 1;
        let before: Vec<f64> = row.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
        for (m, b) in self.mean.iter_mut().zip(&before) {
            *m += b / self.n as f64;
        }
        for i in 0..d {
            for j in 0..d {
                self.comoment[i * d + j] += before[i] * (row[j] - self.mean[j]);
            }
        }
    }

    pub fn finish(self) -> Result<EmbeddingStats> {
        if self.n < 2 {
            return Err(contract("embedding_stats", format!("need at least 2 samples, got {}", self.n)));
        }
        let n = self.n;
        Ok(EmbeddingStats {
            mean: self.mean,
            cov: self.comoment.into_iter().map(|c| c / (n - 1) as f64).collect(),
            n,
        })
    }
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between two Gaussian fits.
///
/// `Tr((S1 S2)^1/2)` is evaluated as `Tr((A S2 A)^1/2)` with `A = S1^1/2`;
/// negative eigenvalues from round-off are clamped to zero.
pub fn fid(a: &EmbeddingStats, b: &EmbeddingStats) -> Result<f64> {
    let d = a.dim();
    if b.dim() != d {
        return Err(contract("fid", format!("embedding widths differ: {d} vs {}", b.dim())));
    }
    if a.mean == b.mean && a.cov == b.cov {
        return Ok(0.0);
    }
    let s1 = DMatrix::from_row_slice(d, d, &a.cov);
    let s2 = DMatrix::from_row_slice(d, d, &b.cov);
    let r = sym_sqrt(&s1);
    let mut inner = &r * &s2 * &r;
    inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let diff = DVector::from_column_slice(&a.mean) - DVector::from_column_slice(&b.mean);
    Ok((diff.norm_squared() + s1.trace() + s2.trace() - 2.0 * cross).max(0.0))
}

/// Per-image embeddings: spatial means of the perceptual layers, concatenated.
pub fn embed(provider: &FeatureProvider, images: &Tensor) -> Result<Vec<Vec<f64>>> {
    let feats = no_grad(|| provider.features(images, &PERCEPTUAL_LAYERS))?;
    let n = images.dim(0);
    let mut rows = vec![Vec::new(); n];
    for f in &feats {
        let (_, c, h, w) = f.dims4();
        let d = f.data();
        for (b, row) in rows.iter_mut().enumerate() {
            for ch in 0..c {
                let plane = &d[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                row.push(plane.iter().map(|&v| v as f64).sum::<f64>() / (h * w) as f64);
            }
        }
    }
    Ok(rows)
}

/// Per-image perceptual distance: for each layer, the spatial mean of the
/// squared difference of channel-normalized features, summed over layers.
pub fn perceptual_distances(a: &Tensor, b: &Tensor, provider: &FeatureProvider) -> Result<Vec<f64>> {
    if a.shape() != b.shape() || a.rank() != 4 {
        return Err(contract("perceptual_distance", format!("shapes differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    let n = a.dim(0);
    let fa = no_grad(|| provider.features(a, &PERCEPTUAL_LAYERS))?;
    let fb = no_grad(|| provider.features(b, &PERCEPTUAL_LAYERS))?;
    let mut out = vec![0.0; n];
    for (x, y) in fa.iter().zip(&fb) {
        let (_, c, h, w) = x.dims4();
        let (xd, yd) = (x.data(), y.data());
        for (s, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for p in 0..h * w {
                let at = |d: &[f32], ch: usize| d[(s * c + ch) * h * w + p] as f64;
                let nx = (0..c).map(|ch| at(xd, ch).powi(2)).sum::<f64>().sqrt() + 1e-10;
                let ny = (0..c).map(|ch| at(yd, ch).powi(2)).sum::<f64>().sqrt() + 1e-10;
                acc += (0..c).map(|ch| (at(xd, ch) / nx - at(yd, ch) / ny).powi(2)).sum::<f64>();
            }
            *o += acc / (h * w) as f64;
        }
    }
    Ok(out)
}

/// Mean perceptual distance over the batch.
pub fn perceptual_distance(a: &Tensor, b: &Tensor, provider: &FeatureProvider) -> Result<f64> {
    let d = perceptual_distances(a, b, provider)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

fn apply_mask(op: &'static str, image: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let (n, _, h, w) = image.dims4();
    if mask.shape() != [n, 1, h, w] {
        return Err(contract(op, format!("mask shape {:?} does not match image {:?}", mask.shape(), image.shape())));
    }
    if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(contract(op, "mask must be binary"));
    }
    Ok(image.mul(mask))
}

/// Perceptual distances of the images with everything outside `mask` zeroed.
pub fn masked_perceptual_distances(a: &Tensor, b: &Tensor, mask: &Tensor, provider: &FeatureProvider) -> Result<Vec<f64>> {
    const OP: &str = "masked_perceptual_distance";
    if a.shape() != b.shape() || a.rank() != 4 {
        return Err(contract(OP, format!("shapes differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    perceptual_distances(&apply_mask(OP, a, mask)?, &apply_mask(OP, b, mask)?, provider)
}

pub fn masked_perceptual_distance(a: &Tensor, b: &Tensor, mask: &Tensor, provider: &FeatureProvider) -> Result<f64> {
    let d = masked_perceptual_distances(a, b, mask, provider)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

fn to_rgb8(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Writes the first image of a `[n, 3, h, w]` batch in [-1, 1] as 8-bit RGB.
pub fn save_image(image: &Tensor, path: &Path) -> Result<()> {
    let (_, c, h, w) = image.dims4();
    if c != 3 {
        return Err(contract("save_image", format!("expected 3 channels, got {c}")));
    }
    let d = image.data();
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |ch: usize| to_rgb8(d[(ch * h + y as usize) * w + x as usize]);
        image::Rgb([at(0), at(1), at(2)])
    });
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// One row per tuple: sources, target pose, output, ground truth.
pub fn emit_grid(generator: &Generator, batch: &Batch, ablation: Ablation, path: &Path) -> Result<()> {
    let out = infer(generator, &batch.sources, &batch.target_pose, ablation)?;
    let (n, _, h, w) = out.dims4();
    let k = batch.sources.len();
    let panels = k + 3;
    let mut img = image::RgbImage::new((panels * w) as u32, (n * h) as u32);
    let cp = batch.target_pose.dim(1);
    let paint = |img: &mut image::RgbImage, panel: usize, row: usize, rgb: &dyn Fn(usize, usize, usize) -> u8| {
        for y in 0..h {
            for x in 0..w {
                let px = image::Rgb([rgb(0, y, x), rgb(1, y, x), rgb(2, y, x)]);
                img.put_pixel((panel * w + x) as u32, (row * h + y) as u32, px);
            }
        }
    };
    for r in 0..n {
        let pix = |t: &Tensor, c: usize, y: usize, x: usize| t.data()[((r * 3 + c) * h + y) * w + x];
        for (j, s) in batch.sources.iter().enumerate() {
            paint(&mut img, j, r, &|c, y, x| to_rgb8(pix(&s.image, c, y, x)));
        }
        let pose = batch.target_pose.data();
        paint(&mut img, k, r, &|_, y, x| {
            let v = (0..cp).map(|c| pose[((r * cp + c) * h + y) * w + x]).fold(0.0f32, f32::max);
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        });
        paint(&mut img, k + 1, r, &|c, y, x| to_rgb8(pix(&out, c, y, x)));
        paint(&mut img, k + 2, r, &|c, y, x| to_rgb8(pix(&batch.target_image, c, y, x)));
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Held-out tuples: the first `count` of a seeded stream over `data`.
pub fn held_out_batches(data: &dyn Dataset, k: usize, count: usize, batch: usize, seed: u64) -> Result<Vec<Batch>> {
    let groups: Vec<Vec<usize>> = data.groups().into_iter().map(|(_, g)| g).collect();
    let sampler = TupleSampler::new(&groups, k, seed)?;
    let tuples: Vec<_> = sampler.iter().take(count).collect();
    tuples
        .chunks(batch.max(1))
        .map(|chunk| collate(&chunk.iter().map(|t| load_tuple(data, t)).collect::<Result<Vec<_>>>()?))
        .collect()
}

/// Per-tuple metrics of one evaluation pass.
#[derive(Debug, Clone, Default)]
pub struct HeldOut {
    pub l1: Vec<f64>,
    pub perceptual: Vec<f64>,
    pub masked_perceptual: Option<Vec<f64>>,
    pub real: Vec<Vec<f64>>,
    pub fake: Vec<Vec<f64>>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

impl HeldOut {
    pub fn mean_l1(&self) -> f64 {
        mean(&self.l1)
    }

    pub fn mean_perceptual(&self) -> f64 {
        mean(&self.perceptual)
    }

    pub fn mean_masked_perceptual(&self) -> Option<f64> {
        self.masked_perceptual.as_deref().map(mean)
    }

    pub fn fid(&self) -> Result<f64> {
        fid(&EmbeddingStats::from_rows(&self.real)?, &EmbeddingStats::from_rows(&self.fake)?)
    }
}

/// Generates every target from its first `sources` sources and scores it.
pub fn evaluate(
    generator: &Generator,
    batches: &[Batch],
    sources: usize,
    ablation: Ablation,
    provider: &FeatureProvider,
) -> Result<HeldOut> {
    let mut r = HeldOut {
        masked_perceptual: Some(Vec::new()),
        ..Default::default()
    };
    for b in batches {
        let b = b.with_sources(sources);
        let out = infer(generator, &b.sources, &b.target_pose, ablation)?;
        let (n, c, h, w) = out.dims4();
        let per = c * h * w;
        for s in 0..n {
            let (o, t) = (&out.data()[s * per..(s + 1) * per], &b.target_image.data()[s * per..(s + 1) * per]);
            r.l1.push(o.iter().zip(t).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / per as f64);
        }
        r.perceptual.extend(perceptual_distances(&out, &b.target_image, provider)?);
        match (&b.target_mask, &mut r.masked_perceptual) {
            (Some(m), Some(acc)) => acc.extend(masked_perceptual_distances(&out, &b.target_image, m, provider)?),
            _ => r.masked_perceptual = None,
        }
        r.real.extend(embed(provider, &b.target_image)?);
        r.fake.extend(embed(provider, &out)?);
    }
    Ok(r)
}

/// Mean endpoint error of the flow extractor's level-`level` flows against the
/// dataset's exact flows, on the target support; also the mean exact-flow magnitude.
pub fn flow_endpoint_error(generator: &Generator, data: &dyn Dataset, batches: &[Batch], level: usize) -> Result<(f64, f64)> {
    let g = generator.config();
    let (lh, lw) = g.level_size(level);
    let factor = g.image_height / lh;
    let (mut err, mut mag, mut count) = (0.0, 0.0, 0.0);
    for b in batches {
        let flows = no_grad(|| generator.flows(&b.sources, &b.target_pose))?;
        let exact = batch_flows(data, b, factor)
            .ok_or_else(|| Error::Dataset("dataset has no ground-truth flow".into()))?;
        let mask = b
            .target_mask
            .as_ref()
            .ok_or_else(|| Error::Dataset("dataset has no foreground masks".into()))?
            .avg_pool2d(factor);
        let n = b.len();
        for (j, gt) in exact.iter().enumerate() {
            let (p, t) = (flows[j][level].flow.data(), gt.data());
            for s in 0..n {
                for q in 0..lh * lw {
                    if mask.data()[s * lh * lw + q] < 0.5 {
                        continue;
                    }
                    let (u, v) = ((s * 2) * lh * lw + q, (s * 2 + 1) * lh * lw + q);
                    err += (((p[u] - t[u]) as f64).powi(2) + ((p[v] - t[v]) as f64).powi(2)).sqrt();
                    mag += ((t[u] as f64).powi(2) + (t[v] as f64).powi(2)).sqrt();
                    count += 1.0;
                }
            }
        }
    }
    if count == 0.0 {
        return Err(Error::Dataset("no foreground pixels at this level".into()));
    }
    Ok((err / count, mag / count))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricEntry {
    pub metric: String,
    pub value: f64,
    pub n: usize,
    pub embedder: String,
    pub checkpoint: String,
}

pub fn write_report(path: &Path, entries: &[MetricEntry]) -> Result<()> {
    let mut text = serde_json::to_string_pretty(entries)?;
    text.push('\n');
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, text).map_err(io_err(path))
}
