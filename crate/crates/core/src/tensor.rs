//! Dense row-major `f64` tensors and the forward kernels every layer is built from.
//!
//! Kernels treat a tensor of shape `[d0, .., dk]` as a matrix of
//! `d0 * .. * d(k-1)` rows by `dk` columns wherever they operate "per row".
//! Gradients are handled by [`crate::autograd`]; these functions are the
//! forward halves it delegates to.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Invalid(format!("zero-sized dimension in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("tensor", shape, &[data.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(&[1], value)
    }

    /// Builds a 2-D tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Invalid("ragged rows".into()));
        }
        Self::new(&[rows.len(), cols], rows.concat())
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
        if !flag {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient slot, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::shape("accumulate_grad", &self.shape, &[g.len()]));
        }
        let slot = self.grad.get_or_insert_with(|| vec![0.0; g.len()]);
        for (s, v) in slot.iter_mut().zip(g) {
            *s += v;
        }
        Ok(())
    }

    /// Trailing dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has at least one dimension")
    }

    /// Product of all leading dimensions.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Counter-based deterministic random stream.
///
/// Two states with the same `(seed, counter)` produce identical streams.
#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self::at(seed, 0)
    }

    pub fn at(seed: u64, counter: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_word_pos(u128::from(counter));
        Self { seed, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of 32-bit words consumed so far.
    pub fn counter(&self) -> u64 {
        self.rng.get_word_pos() as u64
    }

    /// Independent stream derived from this seed; does not advance `self`.
    pub fn derive(&self, stream: u64) -> Self {
        let mixed = self
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
            .rotate_left(29);
        Self::new(mixed ^ stream)
    }

    /// Uniform sample in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

impl RngCore for RngState {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// `[m, k] x [k, n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::shape("matmul", &a.shape, &b.shape));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    matmul_into(&a.data, &b.data, &mut out, m, k, n);
    Tensor::new(&[m, n], out)
}

pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `y = x·w + b` over the last axis of `x`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    if w.shape.len() != 2 || x.cols() != w.shape[0] {
        return Err(Error::shape("linear", &x.shape, &w.shape));
    }
    let out_dim = w.shape[1];
    if b.shape != [out_dim] {
        return Err(Error::shape("linear.bias", &w.shape, &b.shape));
    }
    let rows = x.rows();
    let mut out = Vec::with_capacity(rows * out_dim);
    for _ in 0..rows {
        out.extend_from_slice(&b.data);
    }
    matmul_into(&x.data, &w.data, &mut out, rows, x.cols(), out_dim);
    let mut shape = x.shape.clone();
    *shape.last_mut().unwrap() = out_dim;
    Tensor::new(&shape, out)
}

fn softmax_slice(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Numerically stable softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.shape.len() {
        return Err(Error::Invalid(format!(
            "softmax axis {axis} out of range for shape {:?}",
            x.shape
        )));
    }
    let n = x.shape[axis];
    let inner: usize = x.shape[axis + 1..].iter().product();
    let outer: usize = x.shape[..axis].iter().product();
    let mut out = x.data.clone();
    let mut buf = vec![0.0; n];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            for (j, b) in buf.iter_mut().enumerate() {
                *b = out[base + j * inner];
            }
            softmax_slice(&mut buf);
            for (j, b) in buf.iter().enumerate() {
                out[base + j * inner] = *b;
            }
        }
    }
    Tensor::new(&x.shape, out)
}

/// Row softmax where `key_mask[j] == false` forces column `j` to probability 0.
pub(crate) fn masked_softmax_rows(x: &Tensor, key_mask: Option<&[bool]>) -> Result<Tensor> {
    let cols = x.cols();
    if let Some(mask) = key_mask {
        if mask.len() != cols {
            return Err(Error::shape("masked_softmax", &x.shape, &[mask.len()]));
        }
    }
    let mut out = x.data.clone();
    for (r, row) in out.chunks_mut(cols).enumerate() {
        match key_mask {
            None => softmax_slice(row),
            Some(mask) => {
                let max = row
                    .iter()
                    .zip(mask)
                    .filter(|(_, &m)| m)
                    .map(|(v, _)| *v)
                    .fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    return Err(Error::DegenerateAttention { row: r });
                }
                let mut sum = 0.0;
                for (v, &m) in row.iter_mut().zip(mask) {
                    *v = if m { (*v - max).exp() } else { 0.0 };
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
        }
    }
    Tensor::new(&x.shape, out)
}

/// Per-row normalisation statistics kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct LayerNormCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub(crate) fn layer_norm_with_cache(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, LayerNormCache)> {
    let d = x.cols();
    if gamma.shape != [d] || beta.shape != [d] {
        return Err(Error::shape("layer_norm", &x.shape, &gamma.shape));
    }
    if eps <= 0.0 {
        return Err(Error::Invalid(format!("layer_norm eps must be positive, got {eps}")));
    }
    let rows = x.rows();
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[r] = is;
        for j in 0..d {
            let h = (row[j] - mean) * is;
            xhat[r * d + j] = h;
            out[r * d + j] = h * gamma.data[j] + beta.data[j];
        }
    }
    Ok((Tensor::new(&x.shape, out)?, LayerNormCache { xhat, inv_std }))
}

/// Layer normalisation over the last axis with population variance.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    layer_norm_with_cache(x, gamma, beta, eps).map(|(t, _)| t)
}

/// Inverted-dropout keep mask: entries are `0` or `1/(1-p)`.
pub(crate) fn dropout_mask(len: usize, p: f64, rng: &mut RngState) -> Vec<f64> {
    if p >= 1.0 {
        return vec![0.0; len];
    }
    let scale = 1.0 / (1.0 - p);
    (0..len)
        .map(|_| if rng.uniform() < p { 0.0 } else { scale })
        .collect()
}

/// Inverted dropout. Identity when `training` is false or `p == 0`;
/// `p == 1` in training zeroes everything.
pub fn dropout(x: &Tensor, p: f64, training: bool, rng: &mut RngState) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Invalid(format!("dropout probability {p} outside [0, 1]")));
    }
    if !training || p == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask(x.len(), p, rng);
    let data = x.data.iter().zip(&mask).map(|(v, m)| v * m).collect();
    Tensor::new(&x.shape, data)
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

pub(crate) fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * INV_SQRT_2))
}

pub(crate) fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu(x: &Tensor) -> Tensor {
    let data = x.data.iter().map(|&v| v * normal_cdf(v)).collect();
    Tensor {
        shape: x.shape.clone(),
        data,
        grad: None,
        requires_grad: false,
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn shape_product_must_match() {
        assert!(Tensor::new(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(&[0], vec![]).is_err());
    }

    #[test]
    fn linear_scalar_case() {
        let y = linear(&t(&[1], &[3.0]), &t(&[1, 1], &[2.0]), &t(&[1], &[1.0])).unwrap();
        assert_eq!(y.data(), &[7.0]);
    }

    #[test]
    fn linear_identity_and_zero_weight() {
        let x = t(&[2, 2], &[1.5, -2.0, 0.25, 4.0]);
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(linear(&x, &eye, &Tensor::zeros(&[2])).unwrap(), x);

        let y = linear(&x, &Tensor::zeros(&[2, 2]), &t(&[2], &[5.0, 5.0])).unwrap();
        assert_eq!(y.data(), &[5.0; 4]);
    }

    #[test]
    fn linear_shape_error_names_both_shapes() {
        let err = linear(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[4, 1]), &Tensor::zeros(&[1]))
            .unwrap_err()
            .to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 1]"), "{err}");
    }

    #[test]
    fn softmax_cases() {
        let y = softmax(&t(&[2], &[0.0, 0.0]), 0).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);

        let y = softmax(&t(&[2], &[2f64.ln(), 0.0]), 0).unwrap();
        assert!((y.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((y.data()[1] - 1.0 / 3.0).abs() < 1e-15);

        let x = t(&[2, 3], &[0.1, -3.0, 2.0, 7.0, 7.5, -1.0]);
        let shifted = Tensor::new(&[2, 3], x.data().iter().map(|v| v + 123.0).collect()).unwrap();
        assert!(softmax(&x, 1).unwrap().max_abs_diff(&softmax(&shifted, 1).unwrap()) < 1e-15);
    }

    #[test]
    fn softmax_non_last_axis_columns_sum_to_one() {
        let x = t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, -6.0]);
        let y = softmax(&x, 0).unwrap();
        for c in 0..2 {
            let s: f64 = (0..3).map(|r| y.data()[r * 2 + c]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_softmax_zeroes_masked_columns_and_rejects_all_masked() {
        let x = t(&[1, 3], &[1.0, 50.0, 1.0]);
        let y = masked_softmax_rows(&x, Some(&[true, false, true])).unwrap();
        assert_eq!(y.data(), &[0.5, 0.0, 0.5]);
        assert!(matches!(
            masked_softmax_rows(&x, Some(&[false, false, false])),
            Err(Error::DegenerateAttention { row: 0 })
        ));
    }

    #[test]
    fn layer_norm_cases() {
        let ones = Tensor::ones(&[3]);
        let zeros = Tensor::zeros(&[3]);
        let y = layer_norm(&t(&[3], &[4.0, 4.0, 4.0]), &ones, &zeros, 1e-5).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);

        let y = layer_norm(&t(&[2], &[1.0, -1.0]), &Tensor::ones(&[2]), &Tensor::zeros(&[2]), 1e-14)
            .unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-12 && (y.data()[1] + 1.0).abs() < 1e-12);

        let beta = t(&[3], &[0.5, -2.0, 9.0]);
        let y = layer_norm(&t(&[2, 3], &[1.0, 5.0, -3.0, 2.0, 2.5, 0.0]), &zeros, &beta, 1e-5)
            .unwrap();
        assert_eq!(y.data(), &[0.5, -2.0, 9.0, 0.5, -2.0, 9.0]);
    }

    #[test]
    fn dropout_cases() {
        let x = t(&[4], &[1.0, 2.0, 3.0, 4.0]);
        let mut rng = RngState::new(1);
        assert_eq!(dropout(&x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(dropout(&x, 0.7, false, &mut rng).unwrap(), x);
        assert_eq!(dropout(&x, 1.0, true, &mut rng).unwrap().data(), &[0.0; 4]);
        assert!(dropout(&x, 1.5, true, &mut rng).is_err());

        let y = dropout(&x, 0.5, true, &mut rng).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!(*a == 0.0 || *a == 2.0 * b);
        }
    }

    #[test]
    fn gelu_cases() {
        let y = gelu(&t(&[3], &[0.0, 1.0, 40.0]));
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 0.8413).abs() < 1e-3);
        assert!((y.data()[2] - 40.0).abs() < 1e-9);
    }

    #[test]
    fn rng_state_replays_from_seed_and_counter() {
        let mut a = RngState::new(42);
        a.uniform();
        a.uniform();
        let counter = a.counter();
        let mut b = RngState::at(42, counter);
        for _ in 0..16 {
            assert_eq!(a.uniform().to_bits(), b.uniform().to_bits());
        }
    }
}
