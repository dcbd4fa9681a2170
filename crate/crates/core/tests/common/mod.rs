#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rfgen::autograd::{Element, Tensor};
use rfgen::eval::EmbeddingStats;

pub fn random<T: Element>(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec((0..n).map(|_| T::from_f64(rng.gen_range(lo..hi))).collect(), shape)
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Layer outputs of the default generator at 256x256, 18 pose channels, K = 2.
pub const LAYER_TABLE: &[(&str, [usize; 4])] = &[
    ("appearance.block0", [2, 64, 128, 128]),
    ("appearance.block1", [2, 128, 64, 64]),
    ("appearance.block2", [2, 256, 32, 32]),
    ("flow.input", [2, 39, 256, 256]),
    ("flow.down0", [2, 32, 128, 128]),
    ("flow.down1", [2, 64, 64, 64]),
    ("flow.down2", [2, 128, 32, 32]),
    ("flow.down3", [2, 256, 16, 16]),
    ("flow.down4", [2, 512, 8, 8]),
    ("flow.up0", [2, 256, 16, 16]),
    ("flow.up1", [2, 128, 32, 32]),
    ("flow.level0.flow", [2, 2, 32, 32]),
    ("flow.level0.occlusion", [2, 1, 32, 32]),
    ("flow.level0.attention", [2, 1, 32, 32]),
    ("flow.up2", [2, 64, 64, 64]),
    ("flow.level1.flow", [2, 2, 64, 64]),
    ("flow.level1.occlusion", [2, 1, 64, 64]),
    ("flow.level1.attention", [2, 1, 64, 64]),
    ("predictor.enc0", [1, 64, 128, 128]),
    ("predictor.enc1", [1, 128, 64, 64]),
    ("predictor.enc2", [1, 256, 32, 32]),
    ("predictor.rf0.fused", [1, 256, 32, 32]),
    ("predictor.rf0.body", [1, 256, 32, 32]),
    ("predictor.rf0.up", [1, 128, 64, 64]),
    ("predictor.rf1.fused", [1, 128, 64, 64]),
    ("predictor.rf1.body", [1, 128, 64, 64]),
    ("predictor.rf1.up", [1, 64, 128, 128]),
    ("predictor.tail_body", [1, 64, 128, 128]),
    ("predictor.tail_up", [1, 64, 256, 256]),
    ("predictor.out", [1, 3, 256, 256]),
];

/// Cyclic Jacobi eigenvalues of a symmetric matrix.
fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-26 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let (c, s) = (1.0 / (t * t + 1.0).sqrt(), t / (t * t + 1.0).sqrt());
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i][i]).collect()
}

fn cholesky(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            l[i][j] = if i == j { (a[i][i] - s).sqrt() } else { (a[i][j] - s) / l[j][j] };
        }
    }
    l
}

/// Fréchet distance with Tr((S1 S2)^1/2) from the eigenvalues of L^T S2 L, S1 = L L^T.
pub fn fid_oracle(a: &EmbeddingStats, b: &EmbeddingStats) -> f64 {
    let d = a.dim();
    let m = |s: &EmbeddingStats| (0..d).map(|i| s.cov[i * d..(i + 1) * d].to_vec()).collect::<Vec<_>>();
    let (s1, s2) = (m(a), m(b));
    let l = cholesky(&s1);
    let mut inner = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in 0..d {
            inner[i][j] = (0..d).flat_map(|p| (0..d).map(move |q| (p, q))).map(|(p, q)| l[p][i] * s2[p][q] * l[q][j]).sum();
        }
    }
    let cross: f64 = jacobi_eigenvalues(inner).iter().map(|v| v.max(0.0).sqrt()).sum();
    let shift: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).powi(2)).sum();
    let tr = |s: &Vec<Vec<f64>>| (0..d).map(|i| s[i][i]).sum::<f64>();
    shift + tr(&s1) + tr(&s2) - 2.0 * cross
}

pub fn gaussian_rows(seed: u64, n: usize, d: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mix: Vec<f64> = (0..d * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    (0..n)
        .map(|_| {
            let z: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            (0..d).map(|i| (0..d).map(|j| mix[i * d + j] * z[j]).sum::<f64>() + i as f64 * 0.3).collect()
        })
        .collect()
}

