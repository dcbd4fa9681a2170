//! Differentiable primitives shared by the networks and the losses.
//!
//! All maps are batched, `[n, c, h, w]`. Conventions:
//!
//! * A flow field is `[n, 2, h, w]` and holds displacements in pixels of the
//!   map it is applied to. Channel 0 is horizontal, channel 1 vertical. The
//!   output pixel `(x, y)` samples the input at `(x + flow[0], y + flow[1])`.
//!   Flows are never rescaled between pyramid levels.
//! * Sampling is bilinear. Coordinates outside the map are clamped to the
//!   border, so out-of-range samples replicate edge values.
//! * Occlusion maps and attention logits are single-channel, `[n, 1, h, w]`.

use rfgen_autograd::{BackwardOp, Element, Tensor};

use crate::error::{contract, Result};

/// Bilinear footprint of one sample: corner offsets into a plane and weights.
#[derive(Debug, Clone, Copy)]
struct Footprint<T> {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    ax: T,
    ay: T,
    /// Whether the unclamped coordinate lies inside the map (derivative is
    /// zero once the sample is clamped).
    inside_x: bool,
    inside_y: bool,
}

fn footprint<T: Element>(sx: T, sy: T, h: usize, w: usize) -> Footprint<T> {
    let (wmax, hmax) = (T::from_f64((w - 1) as f64), T::from_f64((h - 1) as f64));
    let cx = sx.max(T::zero()).min(wmax);
    let cy = sy.max(T::zero()).min(hmax);
    let fx = cx.floor();
    let fy = cy.floor();
    let x0 = fx.as_f64() as usize;
    let y0 = fy.as_f64() as usize;
    Footprint {
        x0,
        x1: (x0 + 1).min(w - 1),
        y0,
        y1: (y0 + 1).min(h - 1),
        ax: cx - fx,
        ay: cy - fy,
        inside_x: sx >= T::zero() && sx <= wmax,
        inside_y: sy >= T::zero() && sy <= hmax,
    }
}

struct Warp;

impl<T: Element> BackwardOp<T> for Warp {
    fn name(&self) -> &'static str {
        "warp"
    }

    fn backward(&self, inputs: &[Tensor<T>], _output: &Tensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let (feat, flow) = (&inputs[0], &inputs[1]);
        let (n, c, h, w) = feat.dims4();
        let (fd, wd) = (feat.data(), flow.data());
        let plane = h * w;
        let one = T::one();
        let mut gf = feat.requires_grad().then(|| vec![T::zero(); feat.numel()]);
        let mut gw = flow.requires_grad().then(|| vec![T::zero(); flow.numel()]);
        for b in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let p = y * w + x;
                    let sx = T::from_f64(x as f64) + wd[(b * 2) * plane + p];
                    let sy = T::from_f64(y as f64) + wd[(b * 2 + 1) * plane + p];
                    let fp = footprint(sx, sy, h, w);
                    let (i00, i01) = (fp.y0 * w + fp.x0, fp.y0 * w + fp.x1);
                    let (i10, i11) = (fp.y1 * w + fp.x0, fp.y1 * w + fp.x1);
                    let (mut dsx, mut dsy) = (T::zero(), T::zero());
                    for ch in 0..c {
                        let base = (b * c + ch) * plane;
                        let g = grad[base + p];
                        if let Some(gf) = gf.as_mut() {
                            gf[base + i00] += g * (one - fp.ay) * (one - fp.ax);
                            gf[base + i01] += g * (one - fp.ay) * fp.ax;
                            gf[base + i10] += g * fp.ay * (one - fp.ax);
                            gf[base + i11] += g * fp.ay * fp.ax;
                        }
                        if gw.is_some() {
                            let (v00, v01) = (fd[base + i00], fd[base + i01]);
                            let (v10, v11) = (fd[base + i10], fd[base + i11]);
                            dsx += g * ((one - fp.ay) * (v01 - v00) + fp.ay * (v11 - v10));
                            dsy += g * ((one - fp.ax) * (v10 - v00) + fp.ax * (v11 - v01));
                        }
                    }
                    if let Some(gw) = gw.as_mut() {
                        if fp.inside_x {
                            gw[(b * 2) * plane + p] = dsx;
                        }
                        if fp.inside_y {
                            gw[(b * 2 + 1) * plane + p] = dsy;
                        }
                    }
                }
            }
        }
        vec![gf, gw]
    }
}

fn check_spatial<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>, b_channels: usize) -> Result<()> {
    if a.rank() != 4 || b.rank() != 4 {
        return Err(contract(op, format!("expected rank-4 maps, got {:?} and {:?}", a.shape(), b.shape())));
    }
    let (an, _, ah, aw) = a.dims4();
    let (bn, bc, bh, bw) = b.dims4();
    if (an, ah, aw) != (bn, bh, bw) || bc != b_channels {
        return Err(contract(
            op,
            format!("shape mismatch: {:?} vs {:?} (expected {b_channels} channels)", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

/// Bilinearly resamples `feature` at `grid + flow`, differentiable in both.
pub fn warp<T: Element>(feature: &Tensor<T>, flow: &Tensor<T>) -> Result<Tensor<T>> {
    check_spatial("warp", feature, flow, 2)?;
    let (n, c, h, w) = feature.dims4();
    let (fd, wd) = (feature.data(), flow.data());
    let plane = h * w;
    let one = T::one();
    let mut out = vec![T::zero(); feature.numel()];
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let sx = T::from_f64(x as f64) + wd[(b * 2) * plane + p];
                let sy = T::from_f64(y as f64) + wd[(b * 2 + 1) * plane + p];
                let fp = footprint(sx, sy, h, w);
                for ch in 0..c {
                    let base = (b * c + ch) * plane;
                    let top = fd[base + fp.y0 * w + fp.x0] * (one - fp.ax) + fd[base + fp.y0 * w + fp.x1] * fp.ax;
                    let bottom = fd[base + fp.y1 * w + fp.x0] * (one - fp.ax) + fd[base + fp.y1 * w + fp.x1] * fp.ax;
                    out[base + p] = top * (one - fp.ay) + bottom * fp.ay;
                }
            }
        }
    }
    Ok(Tensor::from_op(
        out,
        feature.shape(),
        vec![feature.clone(), flow.clone()],
        Warp,
    ))
}

/// Refined flow: the initial flow plus a residual correction.
pub fn compose_flow<T: Element>(flow: &Tensor<T>, residual: &Tensor<T>) -> Result<Tensor<T>> {
    if flow.shape() != residual.shape() || flow.rank() != 4 || flow.dim(1) != 2 {
        return Err(contract(
            "compose_flow",
            format!("flows must share a [n, 2, h, w] shape, got {:?} and {:?}", flow.shape(), residual.shape()),
        ));
    }
    Ok(flow.add(residual))
}

/// Per-pixel convex blend `warped * (1 - m) + target * m`.
///
/// `m = 1` marks pixels the source cannot see, which then come from the
/// running target feature.
pub fn matte<T: Element>(warped: &Tensor<T>, target: &Tensor<T>, occlusion: &Tensor<T>) -> Result<Tensor<T>> {
    if warped.shape() != target.shape() {
        return Err(contract(
            "matte",
            format!("feature shapes differ: {:?} vs {:?}", warped.shape(), target.shape()),
        ));
    }
    check_spatial("matte", warped, occlusion, 1)?;
    if let Some(bad) = occlusion.data().iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
        return Err(contract("matte", format!("occlusion value {bad:?} outside [0, 1]")));
    }
    let visible = occlusion.affine(-1.0, 1.0);
    Ok(warped.mul(&visible).add(&target.mul(occlusion)))
}

/// Per-pixel softmax of the `K` attention logits across sources.
pub fn fusion_weights<T: Element>(logits: &[Tensor<T>]) -> Result<Tensor<T>> {
    if logits.is_empty() {
        return Err(contract("softmax_fuse", "no sources to fuse"));
    }
    let first = logits[0].shape();
    if first.len() != 4 || first[1] != 1 {
        return Err(contract("softmax_fuse", format!("logits must be [n, 1, h, w], got {first:?}")));
    }
    if let Some(bad) = logits.iter().find(|l| l.shape() != first) {
        return Err(contract("softmax_fuse", format!("logit shapes differ: {:?} vs {first:?}", bad.shape())));
    }
    Ok(Tensor::stack(logits, 0).softmax(0))
}

/// Attention-weighted sum of the per-source blended features.
pub fn softmax_fuse<T: Element>(blended: &[Tensor<T>], logits: &[Tensor<T>]) -> Result<Tensor<T>> {
    if blended.len() != logits.len() {
        return Err(contract(
            "softmax_fuse",
            format!("{} features but {} logit maps", blended.len(), logits.len()),
        ));
    }
    let weights = fusion_weights(logits)?;
    let shape = blended[0].shape();
    if let Some(bad) = blended.iter().find(|b| b.shape() != shape) {
        return Err(contract("softmax_fuse", format!("feature shapes differ: {:?} vs {shape:?}", bad.shape())));
    }
    check_spatial("softmax_fuse", &blended[0], &logits[0], 1)?;
    Ok(Tensor::stack(blended, 0).mul(&weights).sum_axes(&[0], false))
}

/// Channel Gram matrices `[n, c, c]`, normalized by `c * h * w`.
pub fn gram<T: Element>(feature: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = feature.dims4();
    let flat = feature.reshape(&[n, c, h * w]);
    flat.matmul(&flat.t()).scale(1.0 / (c * h * w) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rfgen_autograd::gradcheck;

    fn t(data: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::from_vec(data.to_vec(), shape)
    }

    fn random(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec((0..n).map(|_| rng.gen_range(lo..hi)).collect(), shape)
    }

    #[test]
    fn zero_flow_is_identity() {
        let f = random(&[2, 3, 4, 5], -1.0, 1.0, 1);
        let out = warp(&f, &Tensor::zeros(&[2, 2, 4, 5])).unwrap();
        assert!(out.max_abs_diff(&f) <= 1e-7);
        let f32map: Tensor<f32> = f.cast();
        let out = warp(&f32map, &Tensor::zeros(&[2, 2, 4, 5])).unwrap();
        assert_eq!(out.data(), f32map.data());
    }

    #[test]
    fn integer_shift_replicates_border() {
        let f = t(&[0.0, 1.0, 2.0], &[1, 1, 1, 3]);
        let flow = t(&[1.0, 1.0, 1.0, 0.0, 0.0, 0.0], &[1, 2, 1, 3]);
        assert_eq!(warp(&f, &flow).unwrap().to_vec(), vec![1.0, 2.0, 2.0]);
    }

    #[test]
    fn half_pixel_shift_interpolates() {
        let f = t(&[0.0, 2.0], &[1, 1, 1, 2]);
        let flow = t(&[0.5, 0.0, 0.0, 0.0], &[1, 2, 1, 2]);
        assert_eq!(warp(&f, &flow).unwrap().data()[0], 1.0);
    }

    #[test]
    fn warp_rejects_mismatched_dims() {
        let f = Tensor::<f64>::zeros(&[1, 3, 4, 4]);
        assert!(warp(&f, &Tensor::zeros(&[1, 2, 4, 5])).is_err());
        assert!(warp(&f, &Tensor::zeros(&[1, 1, 4, 4])).is_err());
    }

    #[test]
    fn warp_gradients_match_finite_differences() {
        for seed in 0..5 {
            let f = random(&[1, 2, 5, 5], -1.0, 1.0, 10 + seed);
            let flow = random(&[1, 2, 5, 5], -2.0, 2.0, 20 + seed);
            let probe = random(&[1, 2, 5, 5], -1.0, 1.0, 30 + seed);
            let checks = gradcheck::check(&[f, flow], 1e-6, |x| warp(&x[0], &x[1]).unwrap().mul(&probe).sum_all());
            for c in checks {
                assert!(c.relative_error() < 1e-4, "rel err {}", c.relative_error());
            }
        }
    }

    #[test]
    fn compose_flow_examples() {
        let w = random(&[1, 2, 4, 4], -3.0, 3.0, 5);
        let r = random(&[1, 2, 4, 4], -3.0, 3.0, 6);
        assert_eq!(compose_flow(&w, &Tensor::zeros(&[1, 2, 4, 4])).unwrap().to_vec(), w.to_vec());
        let plus = Tensor::full(2.0, &[1, 2, 4, 4]);
        let minus = Tensor::full(-2.0, &[1, 2, 4, 4]);
        assert!(compose_flow(&plus, &minus).unwrap().data().iter().all(|v| *v == 0.0));
        let sum = compose_flow(&w, &r).unwrap();
        for i in 0..sum.numel() {
            assert_eq!(sum.data()[i], w.data()[i] + r.data()[i]);
        }
        assert!(compose_flow(&w, &Tensor::zeros(&[1, 2, 4, 3])).is_err());
    }

    #[test]
    fn matte_examples() {
        let fw = random(&[1, 3, 2, 2], -1.0, 1.0, 7);
        let ft = random(&[1, 3, 2, 2], -1.0, 1.0, 8);
        let ones = Tensor::ones(&[1, 1, 2, 2]);
        assert_eq!(matte(&fw, &ft, &ones).unwrap().to_vec(), ft.to_vec());
        assert_eq!(matte(&fw, &ft, &Tensor::zeros(&[1, 1, 2, 2])).unwrap().to_vec(), fw.to_vec());
        let out = matte(
            &Tensor::full(4.0, &[1, 2, 2, 2]),
            &Tensor::full(8.0, &[1, 2, 2, 2]),
            &Tensor::full(0.25, &[1, 1, 2, 2]),
        )
        .unwrap();
        assert!(out.data().iter().all(|v| *v == 5.0));
        assert!(matte(&fw, &ft, &Tensor::full(1.5, &[1, 1, 2, 2])).is_err());
        assert!(matte(&fw, &ft, &Tensor::full(-0.1, &[1, 1, 2, 2])).is_err());
    }

    #[test]
    fn softmax_fuse_examples() {
        let b = random(&[1, 3, 2, 2], -1.0, 1.0, 9);
        let single = softmax_fuse(&[b.clone()], &[random(&[1, 1, 2, 2], -5.0, 5.0, 10)]).unwrap();
        assert_eq!(single.to_vec(), b.to_vec());

        let logit = Tensor::full(0.3, &[1, 1, 2, 2]);
        let out = softmax_fuse(
            &[Tensor::full(2.0, &[1, 1, 2, 2]), Tensor::full(6.0, &[1, 1, 2, 2])],
            &[logit.clone(), logit],
        )
        .unwrap();
        assert!(out.data().iter().all(|v| *v == 4.0));

        let logits: Vec<Tensor<f64>> = [0.0, 2f64.ln(), 4f64.ln()]
            .iter()
            .map(|&v| Tensor::full(v, &[1, 1, 1, 1]))
            .collect();
        let w = fusion_weights(&logits).unwrap().to_vec();
        for (got, want) in w.iter().zip([1.0 / 7.0, 2.0 / 7.0, 4.0 / 7.0]) {
            assert!((got - want).abs() < 1e-15);
        }
        assert!(softmax_fuse::<f64>(&[], &[]).is_err());
    }

    #[test]
    fn gram_examples() {
        let c = Tensor::<f64>::full(3.0, &[1, 1, 4, 5]);
        assert!((gram(&c).item() - 9.0).abs() < 1e-12);

        let mut data = vec![0.0; 2 * 2 * 2];
        data[0] = 1.0;
        data[1] = 2.0;
        data[6] = 5.0;
        data[7] = -1.0;
        let g = gram(&t(&data, &[1, 2, 2, 2])).to_vec();
        assert_eq!(g[1], 0.0);
        assert_eq!(g[2], 0.0);

        let f = random(&[1, 2, 3, 3], -1.0, 1.0, 11);
        let got = gram(&f).to_vec();
        let d = f.data();
        for a in 0..2 {
            for b in 0..2 {
                let mut acc = 0.0;
                for p in 0..9 {
                    acc += d[a * 9 + p] * d[b * 9 + p];
                }
                assert!((got[a * 2 + b] - acc / 18.0).abs() < 1e-14);
            }
        }
    }

    fn arb_map(c: usize, h: usize, w: usize) -> impl Strategy<Value = Tensor<f64>> {
        proptest::collection::vec(-3.0f64..3.0, c * h * w).prop_map(move |v| Tensor::from_vec(v, &[1, c, h, w]))
    }

    proptest! {
        #[test]
        fn matte_is_bounded(fw in arb_map(2, 3, 3), ft in arb_map(2, 3, 3), m in proptest::collection::vec(0.0f64..=1.0, 9)) {
            let m = Tensor::from_vec(m, &[1, 1, 3, 3]);
            let out = matte(&fw, &ft, &m).unwrap();
            for i in 0..out.numel() {
                let (a, b) = (fw.data()[i], ft.data()[i]);
                prop_assert!(out.data()[i] >= a.min(b) - 1e-12 && out.data()[i] <= a.max(b) + 1e-12);
            }
        }

        #[test]
        fn fusion_weights_normalize_and_commute(
            logits in proptest::collection::vec(arb_map(1, 2, 3), 1..5),
            seed in 0u64..1000,
        ) {
            let k = logits.len();
            let w = fusion_weights(&logits).unwrap();
            for p in 0..6 {
                let s: f64 = (0..k).map(|i| w.data()[i * 6 + p]).sum();
                prop_assert!((s - 1.0).abs() <= 1e-6);
            }
            let blended: Vec<Tensor<f64>> = (0..k).map(|i| random(&[1, 3, 2, 3], -2.0, 2.0, seed + i as u64)).collect();
            let out = softmax_fuse(&blended, &logits).unwrap();
            let mut order: Vec<usize> = (0..k).collect();
            order.reverse();
            order.rotate_left(seed as usize % k);
            let pb: Vec<Tensor<f64>> = order.iter().map(|&i| blended[i].clone()).collect();
            let pl: Vec<Tensor<f64>> = order.iter().map(|&i| logits[i].clone()).collect();
            prop_assert!(softmax_fuse(&pb, &pl).unwrap().max_abs_diff(&out) <= 1e-5);
        }

        #[test]
        fn gram_is_symmetric_psd(f in arb_map(4, 3, 3)) {
            let g = gram(&f).to_vec();
            let m = nalgebra::DMatrix::from_row_slice(4, 4, &g);
            prop_assert_eq!(m.clone(), m.transpose());
            let min = m.symmetric_eigen().eigenvalues.min();
            prop_assert!(min >= -1e-8);
        }

        #[test]
        fn compose_flow_commutes_and_associates(a in arb_map(2, 2, 2), b in arb_map(2, 2, 2), c in arb_map(2, 2, 2)) {
            let ab = compose_flow(&a, &b).unwrap();
            prop_assert_eq!(ab.to_vec(), compose_flow(&b, &a).unwrap().to_vec());
            let left = compose_flow(&ab, &c).unwrap();
            let right = compose_flow(&a, &compose_flow(&b, &c).unwrap()).unwrap();
            prop_assert!(left.max_abs_diff(&right) <= 1e-12);
        }
    }
}
