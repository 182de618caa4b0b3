//! Small dense-linear-algebra kernels used by the model code.
//!
//! Everything is `f64` and strictly sequential with a fixed order of
//! floating-point operations, so results are bit-reproducible run to run.
//! Dot products use four accumulators to break the add dependency chain,
//! which is what makes the single-threaded training loops fast enough.

/// Dot product with four-lane unrolling; lanes are summed in a fixed order.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (xa, xb) in (&mut ca).zip(&mut cb) {
        acc[0] += xa[0] * xb[0];
        acc[1] += xa[1] * xb[1];
        acc[2] += xa[2] * xb[2];
        acc[3] += xa[3] * xb[3];
    }
    let mut tail = 0.0;
    for (xa, xb) in ca.remainder().iter().zip(cb.remainder()) {
        tail += xa * xb;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + tail
}

/// `y += a * x` element-wise.
#[inline]
pub fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yo, xi) in y.iter_mut().zip(x) {
        *yo += a * xi;
    }
}

/// `y = W x` where `w` is row-major `[out_dim, in_dim]`.
#[inline]
pub fn matvec(w: &[f64], x: &[f64], in_dim: usize, y: &mut [f64]) {
    debug_assert_eq!(w.len(), in_dim * y.len());
    for (row, yo) in w.chunks_exact(in_dim).zip(y.iter_mut()) {
        *yo = dot(row, x);
    }
}

/// `acc += Wᵀ d` for row-major `w: [out_dim, in_dim]`, accumulated row-wise.
#[inline]
pub fn matvec_t_acc(w: &[f64], d: &[f64], in_dim: usize, acc: &mut [f64]) {
    debug_assert_eq!(w.len(), in_dim * d.len());
    debug_assert_eq!(acc.len(), in_dim);
    for (row, &dv) in w.chunks_exact(in_dim).zip(d) {
        axpy(acc, dv, row);
    }
}

/// `dW += d ⊗ x` for row-major `dw: [out_dim, in_dim]`.
#[inline]
pub fn outer_acc(dw: &mut [f64], d: &[f64], x: &[f64]) {
    let in_dim = x.len();
    debug_assert_eq!(dw.len(), in_dim * d.len());
    for (row, &dv) in dw.chunks_exact_mut(in_dim).zip(d) {
        axpy(row, dv, x);
    }
}

/// In-place numerically stable softmax.
#[inline]
pub fn softmax_inplace(v: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for &x in v.iter() {
        if x > max {
            max = x;
        }
    }
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = 1.0 / sum;
    for x in v.iter_mut() {
        *x *= inv;
    }
}

/// Log-softmax into `out`; returns nothing. Stable via max subtraction.
#[inline]
pub fn log_softmax(logits: &[f64], out: &mut [f64]) {
    debug_assert_eq!(logits.len(), out.len());
    let mut max = f64::NEG_INFINITY;
    for &x in logits {
        if x > max {
            max = x;
        }
    }
    let mut sum = 0.0;
    for &x in logits {
        sum += (x - max).exp();
    }
    let log_z = max + sum.ln();
    for (o, &x) in out.iter_mut().zip(logits) {
        *o = x - log_z;
    }
}

/// Index of the maximum value; ties resolved to the lowest index.
#[inline]
pub fn argmax_tie_lowest(v: &[f64]) -> usize {
    let mut best = f64::NEG_INFINITY;
    let mut idx = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > best {
            best = x;
            idx = i;
        }
    }
    idx
}

/// Largest and second-largest values of a slice with at least two elements.
#[inline]
pub fn top2(v: &[f64]) -> (f64, f64) {
    debug_assert!(v.len() >= 2);
    let (mut p1, mut p2) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &x in v {
        if x > p1 {
            p2 = p1;
            p1 = x;
        } else if x > p2 {
            p2 = x;
        }
    }
    (p1, p2)
}

/// ln(1 + e^x) without overflow for large |x|.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Logistic sigmoid.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f64> = (0..23).map(|i| (i as f64).sin()).collect();
        let b: Vec<f64> = (0..23).map(|i| (i as f64 * 0.7).cos()).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }

    #[test]
    fn matvec_roundtrip_with_transpose() {
        // y = W x, then Wᵀ y accumulates consistently with a naive loop.
        let (out_dim, in_dim) = (5, 7);
        let w: Vec<f64> = (0..out_dim * in_dim)
            .map(|i| (i as f64 * 0.13).sin())
            .collect();
        let x: Vec<f64> = (0..in_dim).map(|i| 0.5 - i as f64 * 0.1).collect();
        let mut y = vec![0.0; out_dim];
        matvec(&w, &x, in_dim, &mut y);
        let mut back = vec![0.0; in_dim];
        matvec_t_acc(&w, &y, in_dim, &mut back);
        for j in 0..in_dim {
            let naive: f64 = (0..out_dim).map(|o| w[o * in_dim + j] * y[o]).sum();
            assert!((back[j] - naive).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_normalizes_and_orders() {
        let mut v = vec![1.0, 3.0, 2.0, -1.0];
        softmax_inplace(&mut v);
        let sum: f64 = v.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(v[1] > v[2] && v[2] > v[0] && v[0] > v[3]);
        assert!(v.iter().all(|&p| p > 0.0));
    }

    #[test]
    fn log_softmax_consistent_with_softmax() {
        let logits = vec![0.3, -1.2, 2.0, 0.0];
        let mut ls = vec![0.0; 4];
        log_softmax(&logits, &mut ls);
        let mut sm = logits.clone();
        softmax_inplace(&mut sm);
        for (l, p) in ls.iter().zip(&sm) {
            assert!((l.exp() - p).abs() < 1e-12);
        }
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax_tie_lowest(&[0.1, 0.9, 0.9, 0.2]), 1);
        assert_eq!(argmax_tie_lowest(&[0.5, 0.5]), 0);
    }

    #[test]
    fn top2_finds_two_largest() {
        let (p1, p2) = top2(&[0.1, 0.7, 0.2, 0.05]);
        assert_eq!((p1, p2), (0.7, 0.2));
    }

    #[test]
    fn softplus_and_sigmoid_stable_at_extremes() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(softplus(-800.0).abs() < 1e-300);
        assert!((softplus(800.0) - 800.0).abs() < 1e-9);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }
}
