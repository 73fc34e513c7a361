//! Elementwise, linear-algebra and reduction ops: forward kernels plus the
//! matmul backward helper. Convolution-family kernels live in `conv.rs`.

use super::graph::{Graph, Op};
use super::{fmt_shape, Real, NodeId, TensorError};
#[cfg(test)]
use super::Tensor;

/// Probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]` inside the loss.
pub const BCE_EPS: f64 = 1e-7;

fn same_shape<T: Real>(
    g: &Graph<T>,
    op: &'static str,
    a: NodeId,
    b: NodeId,
) -> Result<(), TensorError> {
    if g.shape(a) != g.shape(b) {
        return Err(TensorError::DimMismatch {
            op,
            left: fmt_shape(g.shape(a)),
            right: fmt_shape(g.shape(b)),
        });
    }
    Ok(())
}

impl<T: Real> Graph<T> {
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        same_shape(self, "add", a, b)?;
        let data: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        Ok(self.out(self.shape(a).to_vec(), data, Op::Add, &[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        same_shape(self, "sub", a, b)?;
        let data: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x - y)
            .collect();
        Ok(self.out(self.shape(a).to_vec(), data, Op::Sub, &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        same_shape(self, "mul", a, b)?;
        let data: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        Ok(self.out(self.shape(a).to_vec(), data, Op::Mul, &[a, b]))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId, TensorError> {
        let c = T::from_f64(c);
        let data: Vec<T> = self.data(x).iter().map(|&v| v * c).collect();
        Ok(self.out(self.shape(x).to_vec(), data, Op::Scale { c }, &[x]))
    }

    /// `x [.., C] + b [C]`, broadcast over all leading axes.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let c = self.data(b).len();
        if self.shape(b).len() != 1 || self.shape(x).last() != Some(&c) {
            return Err(TensorError::DimMismatch {
                op: "add_bias",
                left: fmt_shape(self.shape(x)),
                right: fmt_shape(self.shape(b)),
            });
        }
        let bias = self.data(b).to_vec();
        let mut data = self.data(x).to_vec();
        for chunk in data.chunks_exact_mut(c) {
            for (v, &bv) in chunk.iter_mut().zip(&bias) {
                *v += bv;
            }
        }
        Ok(self.out(self.shape(x).to_vec(), data, Op::AddBias, &[x, b]))
    }

    /// `x [.., C] * g [C]`, broadcast over all leading axes.
    pub fn mul_channels(&mut self, x: NodeId, g: NodeId) -> Result<NodeId, TensorError> {
        let c = self.data(g).len();
        if self.shape(g).len() != 1 || self.shape(x).last() != Some(&c) {
            return Err(TensorError::DimMismatch {
                op: "mul_channels",
                left: fmt_shape(self.shape(x)),
                right: fmt_shape(self.shape(g)),
            });
        }
        let gain = self.data(g).to_vec();
        let mut data = self.data(x).to_vec();
        for chunk in data.chunks_exact_mut(c) {
            for (v, &gv) in chunk.iter_mut().zip(&gain) {
                *v *= gv;
            }
        }
        Ok(self.out(self.shape(x).to_vec(), data, Op::MulChannels, &[x, g]))
    }

    /// Per-channel `(x - mean) * inv_std` with constant statistics (the
    /// statistics are not differentiated through).
    pub fn norm_channels(
        &mut self,
        x: NodeId,
        mean: Vec<T>,
        inv_std: Vec<T>,
    ) -> Result<NodeId, TensorError> {
        let c = mean.len();
        if inv_std.len() != c || self.shape(x).last() != Some(&c) {
            return Err(TensorError::DimMismatch {
                op: "norm_channels",
                left: fmt_shape(self.shape(x)),
                right: format!("{} statistics", c),
            });
        }
        let mut data = self.data(x).to_vec();
        for chunk in data.chunks_exact_mut(c) {
            for ((v, &m), &s) in chunk.iter_mut().zip(&mean).zip(&inv_std) {
                *v = (*v - m) * s;
            }
        }
        Ok(self.out(
            self.shape(x).to_vec(),
            data,
            Op::NormChannels { inv_std },
            &[x],
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let data: Vec<T> = self.data(x).iter().map(|&v| v.max(T::zero())).collect();
        Ok(self.out(self.shape(x).to_vec(), data, Op::Relu, &[x]))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let one = T::one();
        let data: Vec<T> = self
            .data(x)
            .iter()
            .map(|&v| one / (one + (-v).exp()))
            .collect();
        Ok(self.out(self.shape(x).to_vec(), data, Op::Sigmoid, &[x]))
    }

    pub fn tanh_op(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let data: Vec<T> = self.data(x).iter().map(|&v| v.tanh()).collect();
        Ok(self.out(self.shape(x).to_vec(), data, Op::Tanh, &[x]))
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let s: T = self.data(x).iter().copied().sum();
        Ok(self.out(vec![1], vec![s], Op::SumAll, &[x]))
    }

    /// `[R, C] -> [R]`, mean over each row.
    pub fn row_mean(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        if self.shape(x).len() != 2 {
            return Err(TensorError::Geometry {
                op: "row_mean",
                msg: format!("expected rank 2, got {}", fmt_shape(self.shape(x))),
            });
        }
        let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
        let inv = T::from_f64(1.0 / c as f64);
        let data: Vec<T> = self
            .data(x)
            .chunks_exact(c)
            .map(|row| row.iter().copied().sum::<T>() * inv)
            .collect();
        Ok(self.out(vec![r], data, Op::RowMean, &[x]))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::DimMismatch {
                op: "matmul",
                left: fmt_shape(sa),
                right: fmt_shape(sb),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_forward((m, k, n), self.data(a), self.data(b));
        Ok(self.out(vec![m, n], data, Op::MatMul { m, k, n }, &[a, b]))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        if self.shape(x).len() != 2 {
            return Err(TensorError::Geometry {
                op: "transpose",
                msg: format!("expected rank 2, got {}", fmt_shape(self.shape(x))),
            });
        }
        let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
        let src = self.data(x);
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.out(vec![c, r], data, Op::Transpose, &[x]))
    }

    /// Numerically stable softmax along the last axis: each row has its max
    /// subtracted before exponentiation, so rows sum to one and the result is
    /// invariant to adding a constant to a row.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let cols = *self.shape(x).last().ok_or(TensorError::Geometry {
            op: "softmax",
            msg: "rank 0 input".to_string(),
        })?;
        let mut data = self.data(x).to_vec();
        for row in data.chunks_exact_mut(cols) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            let inv = T::one() / sum;
            for v in row.iter_mut() {
                *v *= inv;
            }
        }
        Ok(self.out(self.shape(x).to_vec(), data, Op::SoftmaxRows, &[x]))
    }

    /// Concatenation along the last axis; all leading axes must agree.
    pub fn concat_last(&mut self, xs: &[NodeId]) -> Result<NodeId, TensorError> {
        if xs.is_empty() {
            return Err(TensorError::Geometry {
                op: "concat",
                msg: "no inputs".to_string(),
            });
        }
        let lead = &self.shape(xs[0])[..self.shape(xs[0]).len() - 1];
        for &x in &xs[1..] {
            let xl = &self.shape(x)[..self.shape(x).len() - 1];
            if xl != lead {
                return Err(TensorError::DimMismatch {
                    op: "concat",
                    left: fmt_shape(self.shape(xs[0])),
                    right: fmt_shape(self.shape(x)),
                });
            }
        }
        let rows: usize = lead.iter().product();
        let parts: Vec<usize> = xs
            .iter()
            .map(|&x| *self.shape(x).last().expect("rank >= 1"))
            .collect();
        let total: usize = parts.iter().sum();
        let mut data = vec![T::zero(); rows * total];
        let mut offset = 0;
        for (&x, &w) in xs.iter().zip(&parts) {
            let src = self.data(x);
            for r in 0..rows {
                data[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        Ok(self.out(shape, data, Op::Concat { parts }, xs))
    }

    /// `[start, start+len)` of a vector.
    pub fn slice1(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, TensorError> {
        if self.shape(x).len() != 1 || start + len > self.data(x).len() {
            return Err(TensorError::Geometry {
                op: "slice",
                msg: format!(
                    "[{start}, {}) of {}",
                    start + len,
                    fmt_shape(self.shape(x))
                ),
            });
        }
        let data = self.data(x)[start..start + len].to_vec();
        Ok(self.out(vec![len], data, Op::Slice { start, len }, &[x]))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId, TensorError> {
        if shape.iter().product::<usize>() != self.data(x).len() {
            return Err(TensorError::DimMismatch {
                op: "reshape",
                left: fmt_shape(self.shape(x)),
                right: fmt_shape(&shape),
            });
        }
        let data = self.data(x).to_vec();
        Ok(self.out(shape, data, Op::Reshape, &[x]))
    }

    /// Summed binary cross-entropy of per-step stress probabilities against
    /// fixed 0/1 labels; probabilities are clamped to `[1e-7, 1 - 1e-7]`.
    pub fn bce_sum(&mut self, probs: NodeId, labels: Vec<T>) -> Result<NodeId, TensorError> {
        if self.shape(probs).len() != 1 || labels.len() != self.data(probs).len() {
            return Err(TensorError::DimMismatch {
                op: "bce_sum",
                left: fmt_shape(self.shape(probs)),
                right: format!("{} labels", labels.len()),
            });
        }
        let eps = T::from_f64(BCE_EPS);
        let one = T::one();
        let s: T = self
            .data(probs)
            .iter()
            .zip(&labels)
            .map(|(&p, &y)| {
                let p = p.max(eps).min(one - eps);
                -(y * p.ln() + (one - y) * (one - p).ln())
            })
            .sum();
        Ok(self.out(vec![1], vec![s], Op::BceSum { labels }, &[probs]))
    }

    /// Affine map of a vector: `x [in] -> x W + b [out]` with `W [in, out]`.
    pub fn dense_vec(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    ) -> Result<NodeId, TensorError> {
        let n = self.data(x).len();
        let row = self.reshape(x, vec![1, n])?;
        let y = self.matmul(row, w)?;
        let out_w = self.shape(y)[1];
        let flat = self.reshape(y, vec![out_w])?;
        match b {
            Some(b) => self.add_bias(flat, b),
            None => Ok(flat),
        }
    }
}

pub(crate) fn matmul_forward<T: Real>(dims: (usize, usize, usize), a: &[T], b: &[T]) -> Vec<T> {
    let (m, k, n) = dims;
    let mut out = vec![T::zero(); m * n];
    for (i, orow) in out.chunks_exact_mut(n).enumerate() {
        for (p, brow) in b.chunks_exact(n).enumerate() {
            let av = a[i * k + p];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn matmul_backward<T: Real>(
    dims: (usize, usize, usize),
    a: &[T],
    b: &[T],
    gout: &[T],
    need_a: bool,
    need_b: bool,
    emit: &mut impl FnMut(usize, Vec<T>),
) {
    let (m, k, n) = dims;
    if need_a {
        // dA[i, p] = sum_j gout[i, j] * B[p, j]
        let mut ga = vec![T::zero(); m * k];
        for (i, garow) in ga.chunks_exact_mut(k).enumerate() {
            let grow = &gout[i * n..(i + 1) * n];
            for (gav, brow) in garow.iter_mut().zip(b.chunks_exact(n)) {
                *gav = grow.iter().zip(brow).map(|(&g, &bv)| g * bv).sum();
            }
        }
        emit(0, ga);
    }
    if need_b {
        // dB[p, j] = sum_i A[i, p] * gout[i, j]
        let mut gb = vec![T::zero(); k * n];
        for i in 0..m {
            let grow = &gout[i * n..(i + 1) * n];
            for (p, gbrow) in gb.chunks_exact_mut(n).enumerate() {
                let av = a[i * k + p];
                for (gbv, &g) in gbrow.iter_mut().zip(grow) {
                    *gbv += av * g;
                }
            }
        }
        emit(1, gb);
    }
}

/// Test convenience: softmax of a plain vector through the graph op.
#[cfg(test)]
fn softmax_vec(x: &[f64]) -> Vec<f64> {
    let mut g: Graph<f64> = Graph::new();
    let t = Tensor::new(vec![x.len()], x.to_vec()).expect("vector shape");
    let id = g.constant(t);
    let y = g.softmax_rows(id).expect("softmax of a vector");
    g.data(y).to_vec()
}

#[cfg(test)]
mod tests {
    use super::super::{Graph, Tensor};
    use super::softmax_vec;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let y = softmax_vec(&[0.0, 0.0]);
        assert!(close(y[0], 0.5, 1e-12) && close(y[1], 0.5, 1e-12));
    }

    #[test]
    fn softmax_of_log_odds() {
        let y = softmax_vec(&[1f64.ln(), 3f64.ln()]);
        assert!(close(y[0], 0.25, 1e-12), "got {}", y[0]);
        assert!(close(y[1], 0.75, 1e-12), "got {}", y[1]);
    }

    #[test]
    fn softmax_shift_invariance_and_normalization() {
        let x = [0.3, -1.2, 2.5, 0.0, 4.1];
        let y = softmax_vec(&x);
        let shifted: Vec<f64> = x.iter().map(|v| v + 123.456).collect();
        let ys = softmax_vec(&shifted);
        for (a, b) in y.iter().zip(&ys) {
            assert!(close(*a, *b, 1e-12));
        }
        let sum: f64 = y.iter().sum();
        assert!(close(sum, 1.0, 1e-12));
        // Large logits must not overflow thanks to max subtraction.
        let big = softmax_vec(&[1000.0, 1001.0]);
        assert!(big.iter().all(|v| v.is_finite()));
        assert!(close(big.iter().sum::<f64>(), 1.0, 1e-12));
    }

    #[test]
    fn matmul_hand_case() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.constant(Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let b = g.constant(Tensor::new(vec![3, 2], vec![7., 8., 9., 10., 11., 12.]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 2]);
        assert_eq!(g.data(c), &[58., 64., 139., 154.]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![4, 2]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("4x2"), "message: {msg}");
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.constant(Tensor::new(vec![3], vec![1., 2., 3.]).unwrap());
        let b = g.constant(Tensor::new(vec![2], vec![4., 5.]).unwrap());
        let c = g.concat_last(&[a, b]).unwrap();
        assert_eq!(g.data(c), &[1., 2., 3., 4., 5.]);
        let s = g.slice1(c, 3, 2).unwrap();
        assert_eq!(g.data(s), &[4., 5.]);
    }

    #[test]
    fn concat_last_on_matrices_interleaves_rows() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.constant(Tensor::new(vec![2, 2], vec![1., 2., 3., 4.]).unwrap());
        let b = g.constant(Tensor::new(vec![2, 1], vec![9., 10.]).unwrap());
        let c = g.concat_last(&[a, b]).unwrap();
        assert_eq!(g.shape(c), &[2, 3]);
        assert_eq!(g.data(c), &[1., 2., 9., 3., 4., 10.]);
    }

    #[test]
    fn bce_sum_half_probability_is_ln2() {
        let mut g: Graph<f64> = Graph::new();
        let p = g.constant(Tensor::new(vec![1], vec![0.5]).unwrap());
        let l = g.bce_sum(p, vec![1.0]).unwrap();
        assert!(close(g.data(l)[0], std::f64::consts::LN_2, 1e-12));
    }

    #[test]
    fn bce_sum_clamps_extreme_probabilities() {
        let mut g: Graph<f64> = Graph::new();
        let p = g.constant(Tensor::new(vec![2], vec![0.0, 1.0]).unwrap());
        let l = g.bce_sum(p, vec![1.0, 0.0]).unwrap();
        assert!(g.data(l)[0].is_finite());
    }

    #[test]
    fn row_mean_averages_rows() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.constant(Tensor::new(vec![2, 3], vec![1., 2., 3., 10., 20., 30.]).unwrap());
        let m = g.row_mean(a).unwrap();
        assert_eq!(g.data(m), &[2.0, 20.0]);
    }

    #[test]
    fn dense_vec_matches_hand_computation() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(Tensor::new(vec![2], vec![1., 2.]).unwrap());
        let w = g.constant(Tensor::new(vec![2, 3], vec![1., 0., 2., 0., 1., 1.]).unwrap());
        let b = g.constant(Tensor::new(vec![3], vec![0.5, -0.5, 0.0]).unwrap());
        let y = g.dense_vec(x, w, Some(b)).unwrap();
        assert_eq!(g.data(y), &[1.5, 1.5, 4.0]);
    }
}
