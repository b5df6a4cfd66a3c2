// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense row-major `f32` tensors and the handful of kernels the engine needs.
//!
//! Every kernel is a pure function of its inputs. Dot products accumulate in
//! `f64` with a fixed lane layout, and parallel kernels split work by output
//! element only, so results are bit-identical regardless of thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Output columns per parallel work item in the matmul kernels.
const COL_BLOCK: usize = 256;

/// Dense row-major tensor of finite `f32` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, validating the element count and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        let t = Tensor { shape, data };
        t.ensure_finite("tensor construction")?;
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn vector(data: Vec<f32>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    /// Stacks equal-length rows into an `n × d` matrix.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(n * d);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != d {
                return Err(Error::Shape(format!(
                    "row {i} has length {}, expected {d}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![n, d], data)
    }

    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            s => Err(Error::Shape(format!("expected a matrix, got shape {s:?}"))),
        }
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f32] {
        let cols = *self.shape.last().unwrap_or(&0);
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        let cols = (*self.shape.last().unwrap_or(&1)).max(1);
        self.data.chunks_exact(cols)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor::from_raw(vec![c, r], out))
    }

    pub fn scale(&self, c: f32) -> Result<Tensor> {
        let t = Tensor::from_raw(self.shape.clone(), self.data.iter().map(|v| v * c).collect());
        t.ensure_finite("scale")?;
        Ok(t)
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::NonFinite(format!(
                "{what}: element {i} is {}",
                self.data[i]
            ))),
        }
    }
}

/// Dot product accumulated in `f64` over eight fixed lanes.
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += f64::from(x[l]) * f64::from(y[l]);
        }
    }
    let mut tail = 0.0f64;
    for (x, y) in ra.iter().zip(rb) {
        tail += f64::from(*x) * f64::from(*y);
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// `a · bᵀ` where `a` is `m × k` and `bt` is `n × k`, plus an optional bias of length `n`.
///
/// This is the hot path of the forward pass: model weights are stored
/// pre-transposed so both operands are read contiguously.
pub fn matmul_transposed(a: &Tensor, bt: &Tensor, bias: Option<&[f32]>) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (n, k2) = bt.dims2()?;
    if k != k2 {
        return Err(Error::Shape(format!(
            "cannot multiply {:?} by the transpose of {:?}",
            a.shape(),
            bt.shape()
        )));
    }
    if let Some(b) = bias {
        if b.len() != n {
            return Err(Error::Shape(format!(
                "bias of length {} does not match {n} output columns",
                b.len()
            )));
        }
    }
    let mut out = vec![0.0f32; m * n];
    if n > 0 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, row_out)| {
            let x = &a.data[i * k..(i + 1) * k];
            row_out
                .par_chunks_mut(COL_BLOCK)
                .enumerate()
                .for_each(|(blk, cols)| {
                    let j0 = blk * COL_BLOCK;
                    for (dj, o) in cols.iter_mut().enumerate() {
                        let j = j0 + dj;
                        let mut s = dot(x, &bt.data[j * k..(j + 1) * k]);
                        if let Some(b) = bias {
                            s += f64::from(b[j]);
                        }
                        *o = s as f32;
                    }
                });
        });
    }
    let t = Tensor::from_raw(vec![m, n], out);
    t.ensure_finite("matmul")?;
    Ok(t)
}

/// Standard matrix product of an `m × k` and a `k × n` matrix.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (_, k) = a.dims2()?;
    let (k2, _) = b.dims2()?;
    if k != k2 {
        return Err(Error::Shape(format!(
            "cannot multiply {:?} by {:?}",
            a.shape(),
            b.shape()
        )));
    }
    matmul_transposed(a, &b.transpose()?, None)
}

/// Row-wise layer normalization with population variance.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    let (n, d) = x.dims2()?;
    if gamma.len() != d || beta.len() != d {
        return Err(Error::Shape(format!(
            "layer_norm over width {d} got gamma {:?} and beta {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    if !(eps > 0.0) {
        return Err(Error::Domain(format!("layer_norm eps must be > 0, got {eps}")));
    }
    let mut out = vec![0.0f32; n * d];
    for (row, o) in x.rows().zip(out.chunks_exact_mut(d.max(1))) {
        let mean = row.iter().map(|&v| f64::from(v)).sum::<f64>() / d as f64;
        let var = row
            .iter()
            .map(|&v| {
                let c = f64::from(v) - mean;
                c * c
            })
            .sum::<f64>()
            / d as f64;
        let inv = 1.0 / (var + f64::from(eps)).sqrt();
        for j in 0..d {
            let z = (f64::from(row[j]) - mean) * inv;
            o[j] = (z * f64::from(gamma.data[j]) + f64::from(beta.data[j])) as f32;
        }
    }
    let t = Tensor::from_raw(vec![n, d], out);
    t.ensure_finite("layer_norm")?;
    Ok(t)
}

/// Numerically stable softmax of a slice, written into `out`.
pub(crate) fn softmax_slice(x: &[f32], out: &mut [f32]) {
    let max = f64::from(x.iter().copied().fold(f32::NEG_INFINITY, f32::max));
    let exps: Vec<f64> = x.iter().map(|&v| (f64::from(v) - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    for (o, e) in out.iter_mut().zip(exps) {
        *o = (e / sum) as f32;
    }
}

/// Softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::Shape(format!(
            "softmax axis {axis} out of range for shape {shape:?}"
        )));
    }
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![0.0f32; x.len()];
    let mut buf_in = vec![0.0f32; len];
    let mut buf_out = vec![0.0f32; len];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            for a in 0..len {
                buf_in[a] = x.data[base + a * inner];
            }
            softmax_slice(&buf_in, &mut buf_out);
            for a in 0..len {
                out[base + a * inner] = buf_out[a];
            }
        }
    }
    Ok(Tensor::from_raw(shape.to_vec(), out))
}

/// Tanh-approximation GELU as used by GPT-2.
pub(crate) fn gelu_scalar(x: f32) -> f32 {
    let x = f64::from(x);
    let c = (2.0 / std::f64::consts::PI).sqrt();
    (0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())) as f32
}

pub fn gelu(x: &Tensor) -> Result<Tensor> {
    let t = Tensor::from_raw(
        x.shape().to_vec(),
        x.data().iter().map(|&v| gelu_scalar(v)).collect(),
    );
    t.ensure_finite("gelu")?;
    Ok(t)
}

/// Arithmetic mean of the rows of an `n × d` matrix.
pub fn mean_rows(x: &Tensor) -> Result<Tensor> {
    let (n, d) = x.dims2()?;
    if n == 0 {
        return Err(Error::EmptyInput("mean_rows of a matrix with no rows".into()));
    }
    let mut acc = vec![0.0f64; d];
    for row in x.rows() {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += f64::from(v);
        }
    }
    let t = Tensor::from_raw(vec![d], acc.into_iter().map(|a| (a / n as f64) as f32).collect());
    t.ensure_finite("mean_rows")?;
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random(vec![3, 5], &mut rng);
        assert_eq!(matmul(&Tensor::identity(3), &m).unwrap(), m);
    }

    #[test]
    fn matmul_hand_example() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![5.0], vec![6.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_zeros() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = matmul(&Tensor::zeros(vec![2, 3]), &random(vec![3, 4], &mut rng)).unwrap();
        assert_eq!(c, Tensor::zeros(vec![2, 4]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::zeros(vec![2, 3]), &Tensor::zeros(vec![4, 2])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn matmul_wide_output_spans_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(vec![2, 7], &mut rng);
        let b = random(vec![7, 600], &mut rng);
        let c = matmul(&a, &b).unwrap();
        for i in 0..2 {
            for j in [0, 255, 256, 599] {
                let want: f64 = (0..7)
                    .map(|t| f64::from(a.data()[i * 7 + t]) * f64::from(b.data()[t * 600 + j]))
                    .sum();
                assert!((f64::from(c.data()[i * 600 + j]) - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn layer_norm_constant_row() {
        let x = Tensor::from_rows(&[vec![1.0; 4]]).unwrap();
        let g = Tensor::vector(vec![1.0; 4]).unwrap();
        let b = Tensor::vector(vec![0.0; 4]).unwrap();
        assert_eq!(layer_norm(&x, &g, &b, 1e-5).unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn layer_norm_two_values() {
        let x = Tensor::from_rows(&[vec![1.0, 3.0]]).unwrap();
        let g = Tensor::vector(vec![1.0; 2]).unwrap();
        let b = Tensor::vector(vec![0.0; 2]).unwrap();
        let y = layer_norm(&x, &g, &b, 1e-12).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-6 && (y.data()[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_random_row_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(vec![1, 64], &mut rng).scale(10.0).unwrap();
        let g = Tensor::vector(vec![1.0; 64]).unwrap();
        let b = Tensor::vector(vec![0.0; 64]).unwrap();
        let y = layer_norm(&x, &g, &b, 1e-5).unwrap();
        let mean = y.data().iter().map(|&v| f64::from(v)).sum::<f64>() / 64.0;
        let var = y.data().iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / 64.0;
        assert!(mean.abs() < 1e-6, "{mean}");
        assert!((var - 1.0).abs() < 1e-4, "{var}");
    }

    #[test]
    fn layer_norm_errors() {
        let x = Tensor::zeros(vec![2, 3]);
        let g = Tensor::vector(vec![1.0; 2]).unwrap();
        let b = Tensor::vector(vec![0.0; 3]).unwrap();
        assert!(matches!(layer_norm(&x, &g, &b, 1e-5), Err(Error::Shape(_))));
        let g = Tensor::vector(vec![1.0; 3]).unwrap();
        assert!(matches!(layer_norm(&x, &g, &b, 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn softmax_examples() {
        let u = softmax(&Tensor::vector(vec![0.0; 4]).unwrap(), 0).unwrap();
        assert_eq!(u.data(), &[0.25; 4]);

        let s = softmax(&Tensor::vector(vec![1000.0, 0.0]).unwrap(), 0).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-6 && s.data()[1] >= 0.0 && s.data()[1] < 1e-6);

        let x = Tensor::vector(vec![1f32.ln(), 2f32.ln(), 3f32.ln()]).unwrap();
        let p = softmax(&x, 0).unwrap();
        for (got, want) in p.data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((f64::from(*got) - want).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_along_first_axis() {
        let x = Tensor::from_rows(&[vec![0.0, 5.0], vec![0.0, 5.0]]).unwrap();
        let p = softmax(&x, 0).unwrap();
        assert_eq!(p.data(), &[0.5; 4]);
        assert!(softmax(&x, 2).is_err());
    }

    #[test]
    fn gelu_fixed_points() {
        let y = gelu(&Tensor::vector(vec![0.0, 10.0, -10.0]).unwrap()).unwrap();
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 10.0).abs() < 1e-5);
        assert!(y.data()[2].abs() < 1e-5);
    }

    #[test]
    fn gelu_matches_reference_values() {
        // torch.nn.functional.gelu(x, approximate="tanh")
        let y = gelu(&Tensor::vector(vec![1.0, -1.0, 0.5]).unwrap()).unwrap();
        for (got, want) in y.data().iter().zip([0.841_192, -0.158_808, 0.345_714]) {
            assert!((got - want).abs() < 1e-5, "{got} vs {want}");
        }
    }

    #[test]
    fn mean_rows_examples() {
        let one = Tensor::from_rows(&[vec![1.5, -2.0]]).unwrap();
        assert_eq!(mean_rows(&one).unwrap().data(), &[1.5, -2.0]);
        let two = Tensor::from_rows(&[vec![1.0, 3.0], vec![3.0, 5.0]]).unwrap();
        assert_eq!(mean_rows(&two).unwrap().data(), &[2.0, 4.0]);
        let v = vec![0.3f32, -0.7, 11.0];
        let copies = Tensor::from_rows(&vec![v.clone(); 7]).unwrap();
        assert_eq!(mean_rows(&copies).unwrap().data(), v.as_slice());
        assert!(matches!(
            mean_rows(&Tensor::zeros(vec![0, 3])),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn tensor_rejects_bad_construction() {
        assert!(matches!(Tensor::new(vec![2, 2], vec![0.0; 3]), Err(Error::Shape(_))));
        assert!(matches!(
            Tensor::new(vec![2], vec![0.0, f32::NAN]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn kernels_are_repeatable() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random(vec![9, 33], &mut rng);
        let b = random(vec![33, 300], &mut rng);
        let first = matmul(&a, &b).unwrap();
        for _ in 0..3 {
            assert_eq!(matmul(&a, &b).unwrap().data(), first.data());
        }
    }

    proptest! {
        #[test]
        fn matmul_is_associative(seed in 0u64..1000, m in 1usize..6, k in 1usize..6, n in 1usize..6, p in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(vec![m, k], &mut rng);
            let b = random(vec![k, n], &mut rng);
            let c = random(vec![n, p], &mut rng);
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            let scale = left.data().iter().map(|v| v.abs()).fold(1.0f32, f32::max);
            for (l, r) in left.data().iter().zip(right.data()) {
                prop_assert!((l - r).abs() <= 1e-4 * scale);
            }
        }

        #[test]
        fn softmax_rows_sum_to_one(xs in proptest::collection::vec(-1e4f32..1e4, 1..40)) {
            let p = softmax(&Tensor::vector(xs).unwrap(), 0).unwrap();
            let s: f64 = p.data().iter().map(|&v| f64::from(v)).sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(p.data().iter().all(|&v| v >= 0.0 && v.is_finite()));
        }

        #[test]
        fn layer_norm_rows_are_centered(xs in proptest::collection::vec(-100f32..100.0, 2..50)) {
            let d = xs.len();
            let x = Tensor::new(vec![1, d], xs).unwrap();
            let g = Tensor::vector(vec![1.0; d]).unwrap();
            let b = Tensor::vector(vec![0.0; d]).unwrap();
            let y = layer_norm(&x, &g, &b, 1e-5).unwrap();
            let mean = y.data().iter().map(|&v| f64::from(v)).sum::<f64>() / d as f64;
            prop_assert!(mean.abs() < 1e-6);
        }
    }
}
