use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Epsilon added to the variance inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Strided view of one operand of a (batched) matrix product.
#[derive(Clone, Copy)]
struct MatView {
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl MatView {
    /// Logical view of a stored `r x c` row-major block, optionally transposed.
    fn of(r: usize, c: usize, trans: bool) -> Self {
        if trans {
            MatView {
                rows: c,
                cols: r,
                rs: 1,
                cs: c,
            }
        } else {
            MatView {
                rows: r,
                cols: c,
                rs: c,
                cs: 1,
            }
        }
    }
}

/// Batched product over `groups` contiguous blocks with optional transposes.
/// `a_shape`/`b_shape` are the stored (untransposed) per-group dimensions.
#[allow(clippy::too_many_arguments)]
pub(crate) fn batched_gemm<F: Real>(
    groups: usize,
    a: &[F],
    a_shape: (usize, usize),
    trans_a: bool,
    b: &[F],
    b_shape: (usize, usize),
    trans_b: bool,
    out: &mut [F],
    accumulate: bool,
) {
    let va = MatView::of(a_shape.0, a_shape.1, trans_a);
    let vb = MatView::of(b_shape.0, b_shape.1, trans_b);
    debug_assert_eq!(va.cols, vb.rows);
    let (m, k, n) = (va.rows, va.cols, vb.cols);
    let (sa, sb, sc) = (a_shape.0 * a_shape.1, b_shape.0 * b_shape.1, m * n);
    let beta = if accumulate { F::one() } else { F::zero() };
    for g in 0..groups {
        F::gemm(
            m,
            k,
            n,
            &a[g * sa..(g + 1) * sa],
            va.rs,
            va.cs,
            &b[g * sb..(g + 1) * sb],
            vb.rs,
            vb.cs,
            beta,
            &mut out[g * sc..(g + 1) * sc],
            n,
            1,
        );
    }
}

/// Split `shape` around `axis` into (outer, axis_len, inner) element counts.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<F: Real> Tensor<F> {
    fn same_shape(&self, other: &Tensor<F>, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(())
    }

    fn zip_map(&self, other: &Tensor<F>, op: &'static str, f: impl Fn(F, F) -> F) -> Result<Self> {
        self.same_shape(other, op)?;
        Ok(Tensor::from_raw(
            self.shape.clone(),
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        ))
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor::from_raw(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn add(&self, other: &Tensor<F>) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<F>) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Tensor<F>) -> Result<Self> {
        self.zip_map(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, factor: F) -> Self {
        self.map(|v| v * factor)
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor<F>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Add a length-`n` vector to every row of an `m x n` matrix.
    pub fn add_row(&self, v: &Tensor<F>) -> Result<Self> {
        let (_, n) = self.dims2()?;
        if v.numel() != n {
            return Err(Error::shape("add_row", &self.shape, &v.shape));
        }
        let mut out = self.clone();
        for row in out.data.chunks_mut(n) {
            for (o, &b) in row.iter_mut().zip(&v.data) {
                *o += b;
            }
        }
        Ok(out)
    }

    /// Add a length-`m` vector to every column of an `m x n` matrix.
    pub fn add_col(&self, v: &Tensor<F>) -> Result<Self> {
        let (m, n) = self.dims2()?;
        if v.numel() != m {
            return Err(Error::shape("add_col", &self.shape, &v.shape));
        }
        let mut out = self.clone();
        for (row, &b) in out.data.chunks_mut(n).zip(&v.data) {
            for o in row {
                *o += b;
            }
        }
        Ok(out)
    }

    pub fn matmul(&self, other: &Tensor<F>) -> Result<Self> {
        self.matmul_t(other, false, false)
    }

    /// Matrix product with optional transposition of either operand.
    pub fn matmul_t(&self, other: &Tensor<F>, trans_a: bool, trans_b: bool) -> Result<Self> {
        let (ar, ac) = self
            .dims2()
            .map_err(|_| Error::shape("matmul", &self.shape, &other.shape))?;
        let (br, bc) = other
            .dims2()
            .map_err(|_| Error::shape("matmul", &self.shape, &other.shape))?;
        let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![F::zero(); m * n];
        batched_gemm(
            1,
            &self.data,
            (ar, ac),
            trans_a,
            &other.data,
            (br, bc),
            trans_b,
            &mut out,
            false,
        );
        Ok(Tensor::from_raw(vec![m, n], out))
    }

    /// Batched product `[G, m, k] x [G, k, n] -> [G, m, n]`.
    pub fn bmm(&self, other: &Tensor<F>) -> Result<Self> {
        self.bmm_t(other, false, false)
    }

    pub fn bmm_t(&self, other: &Tensor<F>, trans_a: bool, trans_b: bool) -> Result<Self> {
        let err = || Error::shape("bmm", &self.shape, &other.shape);
        let (g, ar, ac) = self.dims3().map_err(|_| err())?;
        let (g2, br, bc) = other.dims3().map_err(|_| err())?;
        let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
        if g != g2 || k != k2 {
            return Err(err());
        }
        let mut out = vec![F::zero(); g * m * n];
        batched_gemm(
            g,
            &self.data,
            (ar, ac),
            trans_a,
            &other.data,
            (br, bc),
            trans_b,
            &mut out,
            false,
        );
        Ok(Tensor::from_raw(vec![g, m, n], out))
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.dims2()?;
        let mut out = Vec::with_capacity(m * n);
        for j in 0..n {
            for i in 0..m {
                out.push(self.data[i * n + j]);
            }
        }
        Ok(Tensor::from_raw(vec![n, m], out))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.numel() || shape.contains(&0) {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Tensor::from_raw(shape.to_vec(), self.data.clone()))
    }

    /// Reorder axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape("permute", &self.shape, axes));
        }
        let mut in_strides = vec![1usize; rank];
        for i in (0..rank.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * self.shape[i + 1];
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let mut out = Vec::with_capacity(self.numel());
        let mut idx = vec![0usize; rank];
        let inner = out_shape[rank - 1];
        let inner_stride = strides[rank - 1];
        loop {
            let base: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
            for t in 0..inner {
                out.push(self.data[base + t * inner_stride]);
            }
            // odometer over all but the last axis
            let mut ax = rank - 1;
            loop {
                if ax == 0 {
                    return Ok(Tensor::from_raw(out_shape, out));
                }
                ax -= 1;
                idx[ax] += 1;
                if idx[ax] < out_shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
    }

    pub fn concat(parts: &[&Tensor<F>], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        if axis >= first.rank() {
            return Err(Error::shape("concat", &first.shape, &[axis]));
        }
        for p in parts {
            let compatible = p.rank() == first.rank()
                && p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &first.shape, &p.shape));
            }
        }
        let (outer, _, inner) = split_axis(&first.shape, axis);
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let len = p.shape[axis] * inner;
                out.extend_from_slice(&p.data[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Ok(Tensor::from_raw(shape, out))
    }

    /// Sub-range `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.rank() || len == 0 || start + len > self.shape[axis] {
            return Err(Error::shape("narrow", &self.shape, &[axis, start, len]));
        }
        let (outer, n, inner) = split_axis(&self.shape, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Tensor::from_raw(shape, out))
    }

    /// Stack `times` copies along a new leading axis.
    pub fn repeat_leading(&self, times: usize) -> Result<Self> {
        if times == 0 {
            return Err(Error::Contract("repeat count must be positive".into()));
        }
        let mut shape = vec![times];
        shape.extend_from_slice(&self.shape);
        let mut out = Vec::with_capacity(times * self.numel());
        for _ in 0..times {
            out.extend_from_slice(&self.data);
        }
        Ok(Tensor::from_raw(shape, out))
    }

    fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensors have rank >= 1")
    }

    /// Softmax over the last axis, stabilized by subtracting the row maximum.
    pub fn softmax_last(&self) -> Self {
        let n = self.last_dim();
        let mut out = self.data.clone();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            let inv = sum.recip();
            for v in row.iter_mut() {
                *v *= inv;
            }
        }
        Tensor::from_raw(self.shape.clone(), out)
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax_rows(&self) -> Result<Self> {
        self.dims2()?;
        Ok(self.softmax_last())
    }

    pub fn layer_norm(&self, gamma: &Tensor<F>, beta: &Tensor<F>) -> Result<Self> {
        Ok(self.layer_norm_stats(gamma, beta)?.0)
    }

    /// Layer norm over the last axis; also returns normalized values and
    /// per-row reciprocal standard deviations for the backward pass.
    pub(crate) fn layer_norm_stats(&self, gamma: &Tensor<F>, beta: &Tensor<F>) -> Result<(Self, Vec<F>, Vec<F>)> {
        let n = self.last_dim();
        if gamma.numel() != n || beta.numel() != n {
            return Err(Error::shape("layer_norm", &self.shape, &gamma.shape));
        }
        let eps = F::from_f64(LAYER_NORM_EPS);
        let nf = F::from_f64(n as f64);
        let mut out = Vec::with_capacity(self.numel());
        let mut xhat = Vec::with_capacity(self.numel());
        let mut rstds = Vec::with_capacity(self.numel() / n);
        for row in self.data.chunks(n) {
            let mean = row.iter().copied().sum::<F>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nf;
            let rstd = (var + eps).sqrt().recip();
            rstds.push(rstd);
            for ((&v, &g), &b) in row.iter().zip(&gamma.data).zip(&beta.data) {
                let h = (v - mean) * rstd;
                xhat.push(h);
                out.push(h * g + b);
            }
        }
        Ok((Tensor::from_raw(self.shape.clone(), out), xhat, rstds))
    }

    /// Exact (error-function) GELU.
    pub fn gelu(&self) -> Self {
        self.map(gelu_scalar)
    }

    pub fn sum_all(&self) -> F {
        self.data.iter().copied().sum()
    }

    /// Sum over the last axis, dropping it (`[.., n] -> [..]`, or `[1]` for vectors).
    pub fn sum_last(&self) -> Self {
        let n = self.last_dim();
        let data: Vec<F> = self.data.chunks(n).map(|r| r.iter().copied().sum()).collect();
        let mut shape = self.shape[..self.rank() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        Tensor::from_raw(shape, data)
    }

    /// Scale every slice along the last axis to unit Euclidean norm.
    pub fn l2_normalize_last(&self) -> Result<Self> {
        let n = self.last_dim();
        let mut out = self.data.clone();
        for (i, row) in out.chunks_mut(n).enumerate() {
            let norm = row.iter().map(|&v| v * v).sum::<F>().sqrt();
            if !(norm > F::zero()) {
                return Err(Error::Numeric(format!(
                    "zero-norm vector at row {i} cannot be normalized"
                )));
            }
            for v in row {
                *v /= norm;
            }
        }
        Ok(Tensor::from_raw(self.shape.clone(), out))
    }

    /// Pairwise squared euclidean distances between the rows of `[m, d]`
    /// and `[n, d]`, computed from explicit differences.
    pub fn sq_dist(&self, other: &Tensor<F>) -> Result<Self> {
        let (m, d) = self.dims2()?;
        let (n, d2) = other.dims2()?;
        if d != d2 {
            return Err(Error::shape("sq_dist", &self.shape, &other.shape));
        }
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let a = self.row(i);
            for j in 0..n {
                out.push(a.iter().zip(other.row(j)).map(|(&x, &y)| (x - y) * (x - y)).sum());
            }
        }
        Ok(Tensor::from_raw(vec![m, n], out))
    }
}

pub(crate) fn gelu_scalar<F: Real>(x: F) -> F {
    let half = F::from_f64(0.5);
    half * x * (F::one() + (x * F::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub(crate) fn gelu_grad_scalar<F: Real>(x: F) -> F {
    let half = F::from_f64(0.5);
    let cdf = half * (F::one() + (x * F::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * F::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_reference() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(a.matmul(&Tensor::eye(2)).unwrap(), a);
        let b = m(&[&[5.0, 6.0], &[7.0, 8.0]]);
        assert_eq!(a.matmul(&b).unwrap(), m(&[&[19.0, 22.0], &[43.0, 50.0]]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 2]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn transposed_products_match_explicit_transpose() {
        let a = m(&[&[1.0, -2.0, 0.5], &[3.0, 4.0, -1.0]]);
        let b = m(&[&[2.0, 1.0, 0.0], &[-1.0, 3.0, 2.0]]);
        let expect = a.matmul(&b.transpose().unwrap()).unwrap();
        assert_eq!(a.matmul_t(&b, false, true).unwrap(), expect);
        let expect = a.transpose().unwrap().matmul(&b).unwrap();
        assert_eq!(a.matmul_t(&b, true, false).unwrap(), expect);
    }

    #[test]
    fn softmax_closed_forms() {
        let t = m(&[&[0.0, 2f64.ln()], &[3.0, 3.0]]);
        let s = t.softmax_rows().unwrap();
        assert!((s.data()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.data()[1] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(&s.data()[2..], &[0.5, 0.5]);
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let x = m(&[&[3.0, 3.0, 3.0, 3.0]]);
        let y = x.layer_norm(&Tensor::ones(&[4]), &Tensor::zeros(&[4])).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gelu_fixed_point_and_tails() {
        assert_eq!(gelu_scalar(0.0f64), 0.0);
        assert!((gelu_scalar(6.0f64) - 6.0).abs() < 1e-8);
        assert!(gelu_scalar(-6.0f64).abs() < 1e-8);
    }

    #[test]
    fn transpose_is_an_involution() {
        let a = m(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        assert_eq!(a.transpose().unwrap().transpose().unwrap(), a);
    }

    #[test]
    fn permute_matches_index_formula() {
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let t = Tensor::new(vec![2, 3, 4], data).unwrap();
        let p = t.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    assert_eq!(p.data()[c * 6 + a * 3 + b], t.data()[a * 12 + b * 4 + c]);
                }
            }
        }
        assert!(t.permute(&[0, 0, 1]).is_err());
    }

    #[test]
    fn concat_and_narrow_are_inverse() {
        let a = Tensor::<f64>::from_f64_slice(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::<f64>::from_f64_slice(&[2, 2, 2], &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = Tensor::concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3, 2]);
        assert_eq!(
            c.data(),
            &[1.0, 2.0, 5.0, 6.0, 7.0, 8.0, 3.0, 4.0, 9.0, 10.0, 11.0, 12.0]
        );
        assert_eq!(c.narrow(1, 0, 1).unwrap(), a);
        assert_eq!(c.narrow(1, 1, 2).unwrap(), b);
    }

    #[test]
    fn l2_normalize_rejects_zero_rows() {
        let t = m(&[&[3.0, 4.0], &[0.0, 0.0]]);
        assert!(matches!(t.l2_normalize_last(), Err(Error::Numeric(_))));
        let u = m(&[&[3.0, 4.0]]).l2_normalize_last().unwrap();
        assert_eq!(u.data(), &[0.6, 0.8]);
    }

    #[test]
    fn zero_sized_and_mismatched_shapes_are_rejected() {
        assert!(Tensor::<f64>::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 2], vec![1.0; 3]).is_err());
    }
}
