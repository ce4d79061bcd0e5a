use super::tensor::{Scalar, Tensor};
use crate::error::{GeldError, Result};

/// Stabiliser inside the root-mean-square normaliser.
pub const RMS_EPS: f64 = 1e-6;

fn check_2d<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<()> {
    if t.shape().len() != 2 {
        return Err(GeldError::Shape(format!("{what} must be 2-d, got shape {:?}", t.shape())));
    }
    Ok(())
}

/// `a · b` for `a: n×k`, `b: k×m`.
///
/// Every output entry accumulates its `k` products in ascending `k` order,
/// so results are bit-identical to a naive triple loop.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_2d(a, "matmul lhs")?;
    check_2d(b, "matmul rhs")?;
    let (n, k) = (a.rows(), a.cols());
    let (k2, m) = (b.rows(), b.cols());
    if k != k2 {
        return Err(GeldError::Shape(format!("matmul inner dims {k} vs {k2}")));
    }
    let mut out = vec![T::zero(); n * m];
    let ad = a.data();
    let bd = b.data();
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for (kk, &x) in ad[i * k..(i + 1) * k].iter().enumerate() {
            let brow = &bd[kk * m..(kk + 1) * m];
            for (o, &w) in orow.iter_mut().zip(brow) {
                *o = *o + x * w;
            }
        }
    }
    Tensor::matrix(n, m, out)
}

/// `a · bᵀ` for `a: n×k`, `b: m×k`.
pub fn matmul_t<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_2d(a, "matmul_t lhs")?;
    check_2d(b, "matmul_t rhs")?;
    let (n, k) = (a.rows(), a.cols());
    let (m, k2) = (b.rows(), b.cols());
    if k != k2 {
        return Err(GeldError::Shape(format!("matmul_t inner dims {k} vs {k2}")));
    }
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        let arow = a.row(i);
        for j in 0..m {
            let mut s = T::zero();
            for (&x, &y) in arow.iter().zip(b.row(j)) {
                s = s + x * y;
            }
            out.push(s);
        }
    }
    Tensor::matrix(n, m, out)
}

/// `x · w + b` with the bias broadcast over rows.
pub fn linear_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut y = matmul(x, w)?;
    if b.len() != y.cols() {
        return Err(GeldError::Shape(format!("bias length {} vs output width {}", b.len(), y.cols())));
    }
    add_bias_in_place(&mut y, b);
    Ok(y)
}

pub(crate) fn add_bias_in_place<T: Scalar>(y: &mut Tensor<T>, b: &Tensor<T>) {
    let c = y.cols();
    for row in y.data_mut().chunks_mut(c) {
        for (v, &bb) in row.iter_mut().zip(b.data()) {
            *v = *v + bb;
        }
    }
}

/// Numerically stable softmax of one row. `-inf` entries come out as exactly
/// zero. Returns `false` when every entry is `-inf`.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) -> bool {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return false;
    }
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = if *v == T::neg_infinity() { T::zero() } else { (*v - max).exp() };
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
    true
}

pub fn softmax_rows<T: Scalar>(m: &Tensor<T>) -> Result<Tensor<T>> {
    let mut out = m.clone();
    let c = out.cols();
    if c == 0 {
        return Err(GeldError::Shape("softmax over zero columns".into()));
    }
    for (r, row) in out.data_mut().chunks_mut(c).enumerate() {
        if !softmax_in_place(row) {
            return Err(GeldError::FullyMasked { row: r });
        }
    }
    Ok(out)
}

/// Row-wise `x / sqrt(mean(x²) + ε) ⊙ gain`.
pub fn rms_norm<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>) -> Tensor<T> {
    let h = x.cols();
    assert_eq!(gain.len(), h, "rms_norm gain width");
    let mut out = x.clone();
    let eps = T::of(RMS_EPS);
    let inv_h = T::of(1.0 / h as f64);
    for row in out.data_mut().chunks_mut(h) {
        let ms = row.iter().map(|&v| v * v).sum::<T>() * inv_h;
        let inv = T::one() / (ms + eps).sqrt();
        for (v, &g) in row.iter_mut().zip(gain.data()) {
            *v = *v * inv * g;
        }
    }
    out
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    relu_in_place(&mut out);
    out
}

pub(crate) fn relu_in_place<T: Scalar>(x: &mut Tensor<T>) {
    for v in x.data_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// `ln(1 + eˣ)` without overflow.
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// `-log softmax(logits)[target]` and its gradient `softmax − onehot`.
pub fn cross_entropy<T: Scalar>(logits: &[T], target: usize) -> Result<(T, Vec<T>)> {
    masked_cross_entropy(logits, &vec![true; logits.len()], target)
}

/// Cross-entropy where entries with `allowed[i] == false` are treated as
/// `-inf` logits. The target must be allowed.
pub fn masked_cross_entropy<T: Scalar>(logits: &[T], allowed: &[bool], target: usize) -> Result<(T, Vec<T>)> {
    if target >= logits.len() {
        return Err(GeldError::Index { index: target, len: logits.len() });
    }
    if allowed.len() != logits.len() {
        return Err(GeldError::Shape(format!("mask length {} vs logits {}", allowed.len(), logits.len())));
    }
    if !allowed[target] {
        return Err(GeldError::Precondition(format!("target {target} is masked")));
    }
    let mut probs: Vec<T> = logits
        .iter()
        .zip(allowed)
        .map(|(&l, &a)| if a { l } else { T::neg_infinity() })
        .collect();
    let max = probs.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = max + probs.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
    let loss = lse - logits[target];
    softmax_in_place(&mut probs);
    let mut grad = probs;
    grad[target] = grad[target] - T::one();
    if !loss.is_finite() {
        return Err(GeldError::NonFinite("cross-entropy loss".into()));
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; b[0].len()]; a.len()];
        for i in 0..a.len() {
            for j in 0..b[0].len() {
                let mut s = 0.0;
                for k in 0..b.len() {
                    s += a[i][k] * b[k][j];
                }
                out[i][j] = s;
            }
        }
        out
    }

    #[test]
    fn linear_identity_rows_select_weight_rows() {
        let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let w = Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 3.0]]).unwrap();
        let b = Tensor::vector(vec![0.0, 0.0]);
        let y = linear_forward(&x, &w, &b).unwrap();
        assert_eq!(y.data(), &[2.0, 0.0, 0.0, 3.0]);
    }

    #[test]
    fn linear_sum_plus_bias() {
        let x = Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let w = Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let y = linear_forward(&x, &w, &Tensor::vector(vec![5.0])).unwrap();
        assert_eq!(y.data(), &[7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = vec![
            vec![0.3, -1.2, 2.5, 0.7],
            vec![1.1, 0.4, -0.6, 2.2],
            vec![-0.9, 0.05, 1.75, -3.1],
        ];
        let b = vec![vec![0.2, -0.4], vec![1.3, 0.8], vec![-2.1, 0.6], vec![0.9, 1.7]];
        let expect = naive_matmul(&a, &b);
        let got = matmul(&Tensor::from_rows(&a).unwrap(), &Tensor::from_rows(&b).unwrap()).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                assert!((got.get(i, j) - expect[i][j]).abs() < 1e-12);
                // same accumulation order, so bit-identical
                assert_eq!(got.get(i, j).to_bits(), expect[i][j].to_bits());
            }
        }
        let bt = Tensor::from_rows(&b).unwrap().transpose();
        let got_t = matmul_t(&Tensor::from_rows(&a).unwrap(), &bt).unwrap();
        assert_eq!(got, got_t);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::<f64>::zeros(vec![2, 3]);
        let b = Tensor::<f64>::zeros(vec![2, 3]);
        assert!(matches!(matmul(&a, &b), Err(GeldError::Shape(_))));
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap()).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_rows(&Tensor::from_rows(&[vec![f64::NEG_INFINITY, 0.0]]).unwrap()).unwrap();
        assert_eq!(s.data(), &[0.0, 1.0]);
        let s = softmax_rows(&Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap()).unwrap();
        // e^-2, e^-1, 1 normalised; values from direct evaluation
        let z = (-2.0f64).exp() + (-1.0f64).exp() + 1.0;
        let expect = [(-2.0f64).exp() / z, (-1.0f64).exp() / z, 1.0 / z];
        for (a, b) in s.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((s.data()[0] - 0.090_030_573_170_380_46).abs() < 1e-15);
        assert!((s.data()[2] - 0.665_240_955_774_821_5).abs() < 1e-15);
    }

    #[test]
    fn softmax_fully_masked_row_errors() {
        let m = Tensor::from_rows(&[vec![0.0, 1.0], vec![f64::NEG_INFINITY, f64::NEG_INFINITY]]).unwrap();
        assert!(matches!(softmax_rows(&m), Err(GeldError::FullyMasked { row: 1 })));
    }

    #[test]
    fn rms_norm_examples() {
        let ones = Tensor::vector(vec![1.0f64; 4]);
        let y = rms_norm(&Tensor::from_rows(&[vec![1.0; 4]]).unwrap(), &ones);
        for v in y.data() {
            assert!((v - 1.0).abs() < 1e-6);
        }
        let y = rms_norm(&Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap(), &Tensor::vector(vec![1.0, 1.0]));
        assert_eq!(y.data(), &[0.0, 0.0]);
        let y = rms_norm(&Tensor::from_rows(&[vec![3.0f64, 4.0]]).unwrap(), &Tensor::vector(vec![1.0, 1.0]));
        assert!((y.data()[0] - 0.8485).abs() < 1e-4);
        assert!((y.data()[1] - 1.1314).abs() < 1e-4);
        assert!((y.data()[0] - 3.0 / (12.5f64 + 1e-6).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_examples() {
        let (l, g) = cross_entropy(&[0.0, 0.0], 0).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(g, vec![-0.5, 0.5]);
        let (l, _) = cross_entropy(&[30.0, -30.0], 0).unwrap();
        assert!(l < 1e-12);
        let (l, _) = cross_entropy(&[1.0, 2.0, 3.0], 2).unwrap();
        let e = std::f64::consts::E;
        let direct = -(e.powi(3) / (e + e * e + e.powi(3))).ln();
        assert!((l - direct).abs() < 1e-14);
        assert!((l - 0.407_605_964_444_380_1).abs() < 1e-14);
        assert!(matches!(cross_entropy(&[1.0, 2.0], 2), Err(GeldError::Index { .. })));
    }

    #[test]
    fn masked_cross_entropy_ignores_masked_entries() {
        let (l, g) = masked_cross_entropy(&[100.0, 0.0, 0.0, 100.0], &[false, true, true, false], 1).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[3], 0.0);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0f64) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(softplus(1000.0f64), 1000.0);
        assert!(softplus(-1000.0f64) >= 0.0);
    }
}
