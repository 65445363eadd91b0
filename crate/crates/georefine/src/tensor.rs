//! Dense row-major f64 tensors and the pure kernels shared by the model
//! forward pass, the gradient tape, and the evaluation code.
//!
//! Training runs entirely in f64 so that gradient checks and metric oracles
//! can use tight tolerances; file I/O converts to f32 at the boundary.

use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() || shape.iter().any(|&e| e == 0) {
            return Err(Error::Shape {
                op: "Tensor::new",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|i| f(i)).collect(),
        }
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Number of rows/cols of a 2-D tensor. Panics on other ranks: callers
    /// reach these only after shape validation.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() on non-2D tensor");
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() on non-2D tensor");
        self.shape[1]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.shape[1] + j] = v;
    }

    /// Element of a [C, H, W] tensor.
    pub fn get3(&self, c: usize, y: usize, x: usize) -> f64 {
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[c * h * w + y * w + x]
    }

    pub fn set3(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[c * h * w + y * w + x] = v;
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, ctx: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(ctx.to_string()))
        }
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    }
}

/// C = A · B for A[m×k], B[k×n].
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(shape_err("matmul", a, b));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b.data[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
    Tensor::new(&[m, n], out)
}

/// C = A · Bᵀ for A[m×k], B[n×k].
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[1] {
        return Err(shape_err("matmul_nt", a, b));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[0]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.data[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for t in 0..k {
                acc += arow[t] * brow[t];
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::new(&[m, n], out)
}

/// C = Aᵀ · B for A[k×m], B[k×n].
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[0] != b.shape[0] {
        return Err(shape_err("matmul_tn", a, b));
    }
    let (k, m, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    for t in 0..k {
        let arow = &a.data[t * m..(t + 1) * m];
        let brow = &b.data[t * n..(t + 1) * n];
        for i in 0..m {
            let ati = arow[i];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += ati * brow[j];
            }
        }
    }
    Tensor::new(&[m, n], out)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(shape_err("add", a, b));
    }
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    Tensor::new(&a.shape, data)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(shape_err("sub", a, b));
    }
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect();
    Tensor::new(&a.shape, data)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(shape_err("mul", a, b));
    }
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
    Tensor::new(&a.shape, data)
}

pub fn scale(a: &Tensor, k: f64) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().map(|x| x * k).collect(),
    }
}

/// y[i][j] = a[i][j] + row[j] for a 2-D a and a 1-D row.
pub fn add_row(a: &Tensor, row: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || row.shape.len() != 1 || a.shape[1] != row.shape[0] {
        return Err(shape_err("add_row", a, row));
    }
    let (m, n) = (a.shape[0], a.shape[1]);
    let mut data = a.data.clone();
    for i in 0..m {
        for j in 0..n {
            data[i * n + j] += row.data[j];
        }
    }
    Tensor::new(&[m, n], data)
}

pub fn transpose2(a: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 {
        return Err(Error::Shape {
            op: "transpose2",
            lhs: a.shape.clone(),
            rhs: vec![],
        });
    }
    let (m, n) = (a.shape[0], a.shape[1]);
    let mut data = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            data[j * m + i] = a.data[i * n + j];
        }
    }
    Tensor::new(&[n, m], data)
}

pub fn sum_all(a: &Tensor) -> f64 {
    a.data.iter().sum()
}

/// Row-wise softmax with max-subtraction for stability.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    if x.shape.len() != 2 {
        return Err(Error::Shape {
            op: "softmax_rows",
            lhs: x.shape.clone(),
            rhs: vec![],
        });
    }
    x.check_finite("softmax_rows input")?;
    let (m, n) = (x.shape[0], x.shape[1]);
    let mut data = vec![0.0; m * n];
    for i in 0..m {
        let row = &x.data[i * n..(i + 1) * n];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let out = &mut data[i * n..(i + 1) * n];
        let mut sum = 0.0;
        for j in 0..n {
            let e = (row[j] - mx).exp();
            out[j] = e;
            sum += e;
        }
        for v in out.iter_mut() {
            *v /= sum;
        }
    }
    Tensor::new(&[m, n], data)
}

/// Per-row layer normalization with affine gain/bias over the last axis.
/// Variance is floored by `LAYER_NORM_EPS` inside the square root, so a
/// constant row maps to the bias rather than dividing by zero.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if x.shape.len() != 2 || gain.shape.len() != 1 || gain.shape[0] != x.shape[1] {
        return Err(shape_err("layer_norm", x, gain));
    }
    if bias.shape != gain.shape {
        return Err(shape_err("layer_norm", gain, bias));
    }
    let (m, n) = (x.shape[0], x.shape[1]);
    if n < 2 {
        return Err(Error::Config(
            "layer_norm: normalized axis extent must be >= 2".into(),
        ));
    }
    let mut data = vec![0.0; m * n];
    for i in 0..m {
        let row = &x.data[i * n..(i + 1) * n];
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        let out = &mut data[i * n..(i + 1) * n];
        for j in 0..n {
            out[j] = (row[j] - mean) * inv * gain.data[j] + bias.data[j];
        }
    }
    Tensor::new(&[m, n], data)
}

/// GELU in the tanh approximation (the usual transformer form); smooth and
/// cheap to differentiate exactly.
pub fn gelu_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_scalar_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn gelu(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| gelu_scalar(v)).collect(),
    }
}

/// Normalizes a 3-vector and repeats until the stored components compute to
/// a Euclidean norm of exactly 1.0, so a later divide-by-norm is bitwise
/// the identity. Converges in one or two rounds for any non-degenerate
/// input; zero vectors are returned unchanged.
pub fn snap_unit3(v: [f64; 3]) -> [f64; 3] {
    let mut out = v;
    for _ in 0..8 {
        let r = (out[0] * out[0] + out[1] * out[1] + out[2] * out[2]).sqrt();
        if r == 1.0 {
            return out;
        }
        if r == 0.0 || !r.is_finite() {
            return out;
        }
        out = [out[0] / r, out[1] / r, out[2] / r];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn matmul_identity() {
        let i2 = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let a = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(matmul(&i2, &a).unwrap(), a);
    }

    #[test]
    fn matmul_basis_selection() {
        let e = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
        let v = Tensor::new(&[2, 1], vec![7.5, -3.0]).unwrap();
        let out = matmul(&e, &v).unwrap();
        assert_eq!(out.data(), &[7.5]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = randn(&mut rng, &[5, 7]);
        let b = randn(&mut rng, &[7, 3]);
        let c = matmul(&a, &b).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut acc = 0.0;
                for k in 0..7 {
                    acc += a.get2(i, k) * b.get2(k, j);
                }
                assert_eq!(c.get2(i, j), acc);
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn matmul_variants_match_explicit_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = randn(&mut rng, &[4, 6]);
        let b = randn(&mut rng, &[5, 6]);
        let via_nt = matmul_nt(&a, &b).unwrap();
        let via_t = matmul(&a, &transpose2(&b).unwrap()).unwrap();
        assert_eq!(via_nt.shape(), &[4, 5]);
        for (x, y) in via_nt.data().iter().zip(via_t.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let c = randn(&mut rng, &[6, 4]);
        let d = randn(&mut rng, &[6, 5]);
        let via_tn = matmul_tn(&c, &d).unwrap();
        let via_t2 = matmul(&transpose2(&c).unwrap(), &d).unwrap();
        for (x, y) in via_tn.data().iter().zip(via_t2.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_symmetry() {
        let x = Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap();
        let s = softmax_rows(&x).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_large_magnitude_is_stable() {
        let x = Tensor::new(&[1, 2], vec![1000.0, 0.0]).unwrap();
        let s = softmax_rows(&x).unwrap();
        assert!(s.all_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-12);
        assert!(s.data()[1] >= 0.0 && s.data()[1] < 1e-12);
    }

    #[test]
    fn softmax_matches_exp_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let x = randn(&mut rng, &[3, 9]);
            let s = softmax_rows(&x).unwrap();
            for i in 0..3 {
                let row: Vec<f64> = (0..9).map(|j| x.get2(i, j).exp()).collect();
                let sum: f64 = row.iter().sum();
                let mut row_sum = 0.0;
                for j in 0..9 {
                    assert!((s.get2(i, j) - row[j] / sum).abs() < 1e-14);
                    row_sum += s.get2(i, j);
                }
                assert!((row_sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_at_magnitude_1e3() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = Tensor::from_fn(&[4, 8], |_| (rng.random::<f64>() * 2.0 - 1.0) * 1e3);
        let s = softmax_rows(&x).unwrap();
        for i in 0..4 {
            let sum: f64 = (0..8).map(|j| s.get2(i, j)).sum();
            assert!((sum - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn layer_norm_constant_row_yields_bias() {
        let x = Tensor::new(&[1, 3], vec![1.0, 1.0, 1.0]).unwrap();
        let gain = Tensor::new(&[3], vec![1.0; 3]).unwrap();
        let bias = Tensor::new(&[3], vec![0.0; 3]).unwrap();
        let y = layer_norm(&x, &gain, &bias).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn layer_norm_already_normalized_row() {
        let x = Tensor::new(&[1, 2], vec![-1.0, 1.0]).unwrap();
        let gain = Tensor::new(&[2], vec![1.0; 2]).unwrap();
        let bias = Tensor::new(&[2], vec![0.0; 2]).unwrap();
        let y = layer_norm(&x, &gain, &bias).unwrap();
        // unit variance up to the epsilon floor
        assert!((y.data()[0] + 1.0).abs() < 1e-5);
        assert!((y.data()[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_matches_mean_var_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = randn(&mut rng, &[4, 11]);
        let gain = randn(&mut rng, &[11]);
        let bias = randn(&mut rng, &[11]);
        let y = layer_norm(&x, &gain, &bias).unwrap();
        for i in 0..4 {
            let row: Vec<f64> = (0..11).map(|j| x.get2(i, j)).collect();
            let mean = row.iter().sum::<f64>() / 11.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 11.0;
            for j in 0..11 {
                let want =
                    (row[j] - mean) / (var + LAYER_NORM_EPS).sqrt() * gain.data()[j] + bias.data()[j];
                assert!((y.get2(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_extent_shapes_rejected() {
        assert!(Tensor::new(&[0, 3], vec![]).is_err());
        assert!(Tensor::new(&[2, 2], vec![1.0]).is_err());
    }
}
