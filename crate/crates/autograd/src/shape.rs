//! Broadcasting and stride helpers shared by the operations.

use crate::element::Element;

pub(crate) fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for (i, &d) in shape.iter().enumerate().rev() {
        strides[i] = acc;
        acc *= d;
    }
    strides
}

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `src` viewed at shape `out`, zero along broadcast axes.
pub(crate) fn broadcast_strides(src: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    assert!(src.len() <= rank);
    let base = contiguous_strides(src);
    let offset = rank - src.len();
    (0..rank)
        .map(|i| {
            if i < offset {
                0
            } else {
                let d = src[i - offset];
                if d == 1 && out[i] != 1 {
                    0
                } else {
                    assert_eq!(d, out[i], "cannot broadcast {src:?} to {out:?}");
                    base[i - offset]
                }
            }
        })
        .collect()
}

/// Calls `f(out_index, a_offset, b_offset)` for every element of `out`.
pub(crate) fn for_each_pair(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let numel: usize = out.iter().product();
    if numel == 0 {
        return;
    }
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[rank - 1];
    let (ia_step, ib_step) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut i = 0;
    while i < numel {
        let (mut a, mut b) = (oa, ob);
        for j in 0..inner {
            f(i + j, a, b);
            a += ia_step;
            b += ib_step;
        }
        i += inner;
        // advance the outer multi-index
        let mut axis = rank - 1;
        loop {
            if axis == 0 {
                return;
            }
            axis -= 1;
            idx[axis] += 1;
            oa += sa[axis];
            ob += sb[axis];
            if idx[axis] < out[axis] {
                break;
            }
            oa -= sa[axis] * out[axis];
            ob -= sb[axis] * out[axis];
            idx[axis] = 0;
        }
    }
}

/// Sums `grad` (laid out at `out`) down to `target`, the inverse of broadcasting.
pub(crate) fn sum_to<T: Element>(grad: &[T], out: &[usize], target: &[usize]) -> Vec<T> {
    if out == target {
        return grad.to_vec();
    }
    let n: usize = target.iter().product();
    let mut acc = vec![T::zero(); n];
    let st = broadcast_strides(target, out);
    let zeros = vec![0; out.len()];
    for_each_pair(out, &st, &zeros, |i, t, _| acc[t] += grad[i]);
    acc
}

/// Materializes `data` (laid out at `src`) broadcast to `out`.
pub(crate) fn expand<T: Element>(data: &[T], src: &[usize], out: &[usize]) -> Vec<T> {
    if src == out {
        return data.to_vec();
    }
    let n: usize = out.iter().product();
    let mut res = vec![T::zero(); n];
    let ss = broadcast_strides(src, out);
    let zeros = vec![0; out.len()];
    for_each_pair(out, &ss, &zeros, |i, s, _| res[i] = data[s]);
    res
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 3], &[4, 3]), None);
        assert_eq!(broadcast_shape(&[], &[5]), Some(vec![5]));
    }

    #[test]
    fn sum_to_inverts_expand_counts() {
        let src = [1.0f64, 2.0];
        let e = expand(&src, &[2, 1], &[2, 3]);
        assert_eq!(e, vec![1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        let s = sum_to(&e, &[2, 3], &[2, 1]);
        assert_eq!(s, vec![3.0, 6.0]);
        let s = sum_to(&e, &[2, 3], &[3]);
        assert_eq!(s, vec![3.0, 3.0, 3.0]);
    }
}
