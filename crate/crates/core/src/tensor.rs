//! Dense row-major `f64` tensors and the plain (non-recording) kernels the
//! tape builds on.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::NumericError;

/// Row-major dense tensor of 64-bit floats.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NumericError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(NumericError::Dimension(format!(
                "shape {shape:?} holds {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    /// Builds a 2-D tensor from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        Self { shape: vec![r, c], data: rows.concat() }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Number of rows when viewed as a matrix whose columns are the last extent.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            _ => self.numel() / self.cols().max(1),
        }
    }

    /// The last extent (1 for a 0-d tensor).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self, NumericError> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self, NumericError> {
        ensure_same_shape(self, other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn transpose2(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self { shape: vec![c, r], data: out }
    }

    /// Accumulates `other` into `self` elementwise.
    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

pub(crate) fn ensure_same_shape(a: &Tensor, b: &Tensor) -> Result<(), NumericError> {
    if a.shape != b.shape {
        return Err(NumericError::Dimension(format!(
            "shape mismatch {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    Ok(())
}

fn ensure_matrix(t: &Tensor, what: &str) -> Result<(usize, usize), NumericError> {
    if t.shape.len() != 2 {
        return Err(NumericError::Dimension(format!("{what} must be 2-D, got {:?}", t.shape)));
    }
    Ok((t.shape[0], t.shape[1]))
}

/// Matrix product of two 2-D tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericError> {
    let (m, k) = ensure_matrix(a, "matmul lhs")?;
    let (k2, n) = ensure_matrix(b, "matmul rhs")?;
    if k != k2 {
        return Err(NumericError::Dimension(format!(
            "matmul inner extents differ: {m}x{k} by {k2}x{n}"
        )));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Ok(Tensor { shape: vec![m, n], data: out })
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericError> {
    let (m, k) = ensure_matrix(a, "matmul_nt lhs")?;
    let (n, k2) = ensure_matrix(b, "matmul_nt rhs")?;
    if k != k2 {
        return Err(NumericError::Dimension(format!(
            "matmul_nt inner extents differ: {m}x{k} by ({n}x{k2})ᵀ"
        )));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.data[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Ok(Tensor { shape: vec![m, n], data: out })
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericError> {
    let (k, m) = ensure_matrix(a, "matmul_tn lhs")?;
    let (k2, n) = ensure_matrix(b, "matmul_tn rhs")?;
    if k != k2 {
        return Err(NumericError::Dimension(format!(
            "matmul_tn inner extents differ: ({k}x{m})ᵀ by {k2}x{n}"
        )));
    }
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a.data[p * m..(p + 1) * m];
        let brow = &b.data[p * n..(p + 1) * n];
        for (i, &api) in arow.iter().enumerate() {
            if api == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += api * bv;
            }
        }
    }
    Ok(Tensor { shape: vec![m, n], data: out })
}

/// Row-wise softmax over the last extent, stabilized by subtracting each row max.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor, NumericError> {
    let c = x.cols();
    if c == 0 {
        return Err(NumericError::Dimension("softmax over an empty extent".into()));
    }
    if x.data.iter().any(|v| v.is_nan()) {
        return Err(NumericError::Contract("softmax input contains NaN".into()));
    }
    let mut out = x.data.clone();
    for row in out.chunks_mut(c) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(Tensor { shape: x.shape.clone(), data: out })
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Normalizes every row (last extent) to zero mean and unit variance.
/// Returns the output together with each row's inverse standard deviation.
pub(crate) fn layer_norm_with_stats(x: &Tensor, eps: f64) -> Result<(Tensor, Vec<f64>), NumericError> {
    let c = x.cols();
    if c < 2 {
        return Err(NumericError::Dimension(format!("layer norm needs ≥ 2 channels, got {c}")));
    }
    let mut out = x.data.clone();
    let mut inv_std = Vec::with_capacity(x.rows());
    for row in out.chunks_mut(c) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
        inv_std.push(inv);
    }
    Ok((Tensor { shape: x.shape.clone(), data: out }, inv_std))
}

pub fn layer_norm(x: &Tensor, eps: f64) -> Result<Tensor, NumericError> {
    layer_norm_with_stats(x, eps).map(|(t, _)| t)
}

/// Valid (unpadded) strided 1-D cross-correlation.
///
/// `x` is `[L, C_in]` (or `[L]` for one channel), `kernel` is `[K, C_in, C_out]`
/// (or `[K]`). Output is `[L_out, C_out]` (or `[L_out]`), `L_out = ⌊(L−K)/stride⌋+1`.
pub fn conv1d(x: &Tensor, kernel: &Tensor, stride: usize) -> Result<Tensor, NumericError> {
    let geom = Conv1dGeometry::infer(x, kernel, stride)?;
    let mut out = vec![0.0; geom.out_len * geom.c_out];
    for t in 0..geom.out_len {
        for k in 0..geom.k {
            let xrow = &x.data[(t * stride + k) * geom.c_in..][..geom.c_in];
            for (ci, &xv) in xrow.iter().enumerate() {
                let wrow = &kernel.data[(k * geom.c_in + ci) * geom.c_out..][..geom.c_out];
                for (co, &wv) in wrow.iter().enumerate() {
                    out[t * geom.c_out + co] += xv * wv;
                }
            }
        }
    }
    Tensor::new(geom.out_shape(x), out)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv1dGeometry {
    pub k: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub out_len: usize,
}

impl Conv1dGeometry {
    pub(crate) fn infer(x: &Tensor, kernel: &Tensor, stride: usize) -> Result<Self, NumericError> {
        if stride == 0 {
            return Err(NumericError::Domain("conv1d stride must be positive".into()));
        }
        let (len, c_in) = match x.shape.as_slice() {
            [l] => (*l, 1),
            [l, c] => (*l, *c),
            s => return Err(NumericError::Dimension(format!("conv1d input must be 1-D or 2-D, got {s:?}"))),
        };
        let (k, kc_in, c_out) = match kernel.shape.as_slice() {
            [k] => (*k, 1, 1),
            [k, ci, co] => (*k, *ci, *co),
            s => return Err(NumericError::Dimension(format!("conv1d kernel must be [K] or [K,Cin,Cout], got {s:?}"))),
        };
        if kc_in != c_in {
            return Err(NumericError::Dimension(format!("conv1d channels: input {c_in}, kernel {kc_in}")));
        }
        if k == 0 || k > len {
            return Err(NumericError::Dimension(format!("conv1d kernel length {k} exceeds input length {len}")));
        }
        Ok(Self { k, c_in, c_out, out_len: (len - k) / stride + 1 })
    }

    fn out_shape(&self, x: &Tensor) -> Vec<usize> {
        if x.shape.len() == 1 && self.c_out == 1 {
            vec![self.out_len]
        } else {
            vec![self.out_len, self.c_out]
        }
    }
}

/// Valid strided 2-D cross-correlation on `[H, W, C_in]` with kernel
/// `[KH, KW, C_in, C_out]`, producing `[H_out, W_out, C_out]`.
pub fn conv2d(x: &Tensor, kernel: &Tensor, stride: usize) -> Result<Tensor, NumericError> {
    let g = Conv2dGeometry::infer(x, kernel, stride)?;
    let mut out = vec![0.0; g.oh * g.ow * g.c_out];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let orow = &mut out[(oy * g.ow + ox) * g.c_out..][..g.c_out];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let (iy, ix) = (oy * stride + ky, ox * stride + kx);
                    let xpix = &x.data[(iy * g.w + ix) * g.c_in..][..g.c_in];
                    for (ci, &xv) in xpix.iter().enumerate() {
                        let wrow = &kernel.data[((ky * g.kw + kx) * g.c_in + ci) * g.c_out..][..g.c_out];
                        for (o, &wv) in orow.iter_mut().zip(wrow) {
                            *o += xv * wv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.oh, g.ow, g.c_out], out)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv2dGeometry {
    pub w: usize,
    pub c_in: usize,
    pub kh: usize,
    pub kw: usize,
    pub c_out: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Conv2dGeometry {
    pub(crate) fn infer(x: &Tensor, kernel: &Tensor, stride: usize) -> Result<Self, NumericError> {
        if stride == 0 {
            return Err(NumericError::Domain("conv2d stride must be positive".into()));
        }
        let [h, w, c_in] = x.shape[..] else {
            return Err(NumericError::Dimension(format!("conv2d input must be [H,W,C], got {:?}", x.shape)));
        };
        let [kh, kw, kc, c_out] = kernel.shape[..] else {
            return Err(NumericError::Dimension(format!(
                "conv2d kernel must be [KH,KW,Cin,Cout], got {:?}",
                kernel.shape
            )));
        };
        if kc != c_in {
            return Err(NumericError::Dimension(format!("conv2d channels: input {c_in}, kernel {kc}")));
        }
        if kh == 0 || kw == 0 || kh > h || kw > w {
            return Err(NumericError::Dimension(format!("conv2d kernel {kh}x{kw} exceeds input {h}x{w}")));
        }
        Ok(Self { w, c_in, kh, kw, c_out, oh: (h - kh) / stride + 1, ow: (w - kw) / stride + 1 })
    }
}

/// Named parameter tensors with deterministic (lexicographic) iteration order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    params: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a parameter; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<(), NumericError> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(NumericError::Contract(format!("duplicate parameter name {name:?}")));
        }
        self.params.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries across all parameters.
    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Euclidean norm over every entry of every parameter.
    pub fn global_norm(&self) -> f64 {
        self.params
            .values()
            .flat_map(|t| t.data.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Merges every parameter of `other`; names must stay unique.
    pub fn extend_from(&mut self, other: &ParamSet) -> Result<(), NumericError> {
        for (k, v) in other.iter() {
            self.insert(k.clone(), v.clone())?;
        }
        Ok(())
    }
}

impl FromIterator<(String, Tensor)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Self { params: iter.into_iter().collect() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_and_swap() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0], vec![7.0, 8.0, 9.0]]);
        assert_eq!(matmul(&Tensor::identity(3), &a).unwrap(), a);

        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c, Tensor::from_rows(&[vec![2.0, 1.0], vec![4.0, 3.0]]));
    }

    #[test]
    fn matmul_empty_contraction_is_zero() {
        let a = Tensor::zeros(&[1, 0]);
        let b = Tensor::zeros(&[0, 1]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[1, 1]);
        assert_eq!(c.data(), &[0.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        assert!(matches!(err, NumericError::Dimension(_)));
    }

    #[test]
    fn transposed_products_agree() {
        let a = Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 1.5, -1.0]).unwrap();
        let b = Tensor::new(vec![4, 3], (0..12).map(|i| i as f64 * 0.3 - 1.0).collect()).unwrap();
        let nt = matmul_nt(&a, &b).unwrap();
        let direct = matmul(&a, &b.transpose2()).unwrap();
        assert!(nt.max_abs_diff(&direct) < 1e-14);
        let tn = matmul_tn(&b, &b).unwrap();
        let direct = matmul(&b.transpose2(), &b).unwrap();
        assert!(tn.max_abs_diff(&direct) < 1e-14);
    }

    #[test]
    fn softmax_cases() {
        let s = softmax_rows(&Tensor::vector(vec![0.0, 0.0, 0.0])).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax_rows(&Tensor::vector(vec![1000.0, 0.0])).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-12 && s.data()[1].abs() < 1e-12);
        let s = softmax_rows(&Tensor::vector(vec![2f64.ln(), 0.0])).unwrap();
        assert!((s.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.data()[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_nan() {
        let err = softmax_rows(&Tensor::vector(vec![f64::NAN, 0.0])).unwrap_err();
        assert!(matches!(err, NumericError::Contract(_)));
    }

    #[test]
    fn layer_norm_cases() {
        let y = layer_norm(&Tensor::vector(vec![3.0, 3.0, 3.0]), LAYER_NORM_EPS).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);
        let y = layer_norm(&Tensor::vector(vec![1.0, -1.0]), 0.0).unwrap();
        assert_eq!(y.data(), &[1.0, -1.0]);
        assert!(layer_norm(&Tensor::vector(vec![1.0]), 1e-5).is_err());
    }

    #[test]
    fn conv1d_cases() {
        let x = Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]);
        let y = conv1d(&x, &Tensor::vector(vec![1.0, 1.0]), 2).unwrap();
        assert_eq!(y.data(), &[3.0, 7.0]);
        let y = conv1d(&x, &Tensor::vector(vec![1.0]), 1).unwrap();
        assert_eq!(y, x);
        let y = conv1d(&Tensor::vector(vec![0.0, 1.0, 2.0, 3.0]), &Tensor::vector(vec![0.25; 4]), 4).unwrap();
        assert_eq!(y.data(), &[1.5]);
        let err = conv1d(&x, &Tensor::vector(vec![1.0; 5]), 1).unwrap_err();
        assert!(matches!(err, NumericError::Dimension(_)));
    }

    #[test]
    fn conv1d_output_length_formula() {
        for len in 1..12 {
            for k in 1..=len {
                for stride in 1..5 {
                    let y = conv1d(&Tensor::zeros(&[len]), &Tensor::zeros(&[k]), stride).unwrap();
                    assert_eq!(y.numel(), (len - k) / stride + 1);
                }
            }
        }
    }

    #[test]
    fn conv2d_patch_sum() {
        let x = Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let k = Tensor::full(&[2, 2, 1, 1], 1.0);
        assert_eq!(conv2d(&x, &k, 2).unwrap().data(), &[10.0]);
    }

    #[test]
    fn param_names_unique() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::scalar(1.0)).unwrap();
        assert!(p.insert("w", Tensor::scalar(2.0)).is_err());
    }
}
