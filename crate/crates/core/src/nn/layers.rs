use rand::Rng;

use super::{gemm, Mat, Scalar, Tensor};

/// `y = x W + b` with `W` stored `[in, out]`.
pub fn linear_forward<F: Scalar>(x: &Mat<F>, w: &Tensor<F>, b: &Tensor<F>) -> Mat<F> {
    let (d_in, d_out) = (w.shape[0], w.shape[1]);
    assert_eq!(x.cols, d_in, "linear: input width");
    let mut y = Mat::zeros(x.rows, d_out);
    for r in 0..x.rows {
        y.row_mut(r).copy_from_slice(&b.data);
    }
    gemm(false, false, x.rows, d_in, d_out, F::one(), &x.data, &w.data, F::one(), &mut y.data);
    y
}

/// Gradients of one weighted layer: weight, bias (or gamma/beta for batch
/// norm) and, when requested, the layer input.
pub struct LayerGrads<F> {
    pub weight: Vec<F>,
    pub bias: Vec<F>,
    pub input: Option<Mat<F>>,
}

fn column_sums<F: Scalar>(m: &Mat<F>) -> Vec<F> {
    let mut out = vec![F::zero(); m.cols];
    for r in 0..m.rows {
        for (g, v) in out.iter_mut().zip(m.row(r)) {
            *g += *v;
        }
    }
    out
}

pub fn linear_backward<F: Scalar>(
    x: &Mat<F>,
    w: &Tensor<F>,
    dy: &Mat<F>,
    need_dx: bool,
) -> LayerGrads<F> {
    let (d_in, d_out) = (w.shape[0], w.shape[1]);
    let mut dw = vec![F::zero(); d_in * d_out];
    gemm(true, false, d_in, x.rows, d_out, F::one(), &x.data, &dy.data, F::zero(), &mut dw);
    let input = need_dx.then(|| {
        let mut dx = Mat::zeros(dy.rows, d_in);
        gemm(false, true, dy.rows, d_out, d_in, F::one(), &dy.data, &w.data, F::zero(), &mut dx.data);
        dx
    });
    LayerGrads {
        weight: dw,
        bias: column_sums(dy),
        input,
    }
}

/// Same-padded 1-D convolution over `batch` sequences of `len` steps.
/// `x` is `(batch*len, in)`, `w` is `[kernel, in, out]`. Returns the output and
/// the im2col buffer needed by the backward pass.
pub fn conv1d_forward<F: Scalar>(
    x: &Mat<F>,
    batch: usize,
    len: usize,
    w: &Tensor<F>,
    b: &Tensor<F>,
) -> (Mat<F>, Vec<F>) {
    let (kernel, c_in, c_out) = (w.shape[0], w.shape[1], w.shape[2]);
    assert_eq!(x.cols, c_in, "conv1d: input channels");
    assert_eq!(x.rows, batch * len, "conv1d: rows");
    let pad = kernel / 2;
    let width = kernel * c_in;
    let mut cols = vec![F::zero(); x.rows * width];
    for bi in 0..batch {
        for t in 0..len {
            let dst = &mut cols[(bi * len + t) * width..(bi * len + t + 1) * width];
            for j in 0..kernel {
                let src_t = t as isize + j as isize - pad as isize;
                if src_t < 0 || src_t >= len as isize {
                    continue;
                }
                let src = x.row(bi * len + src_t as usize);
                dst[j * c_in..(j + 1) * c_in].copy_from_slice(src);
            }
        }
    }
    let mut y = Mat::zeros(x.rows, c_out);
    for r in 0..y.rows {
        y.row_mut(r).copy_from_slice(&b.data);
    }
    gemm(false, false, x.rows, width, c_out, F::one(), &cols, &w.data, F::one(), &mut y.data);
    (y, cols)
}

pub fn conv1d_backward<F: Scalar>(
    cols: &[F],
    batch: usize,
    len: usize,
    w: &Tensor<F>,
    dy: &Mat<F>,
    need_dx: bool,
) -> LayerGrads<F> {
    let (kernel, c_in, c_out) = (w.shape[0], w.shape[1], w.shape[2]);
    let width = kernel * c_in;
    let rows = batch * len;
    let mut dw = vec![F::zero(); width * c_out];
    gemm(true, false, width, rows, c_out, F::one(), cols, &dy.data, F::zero(), &mut dw);
    let bias = column_sums(dy);
    if !need_dx {
        return LayerGrads {
            weight: dw,
            bias,
            input: None,
        };
    }
    let mut dcols = vec![F::zero(); rows * width];
    gemm(false, true, rows, c_out, width, F::one(), &dy.data, &w.data, F::zero(), &mut dcols);
    let pad = kernel / 2;
    let mut dx = Mat::zeros(rows, c_in);
    for bi in 0..batch {
        for t in 0..len {
            let src = &dcols[(bi * len + t) * width..(bi * len + t + 1) * width];
            for j in 0..kernel {
                let dst_t = t as isize + j as isize - pad as isize;
                if dst_t < 0 || dst_t >= len as isize {
                    continue;
                }
                let dst = dx.row_mut(bi * len + dst_t as usize);
                for (d, s) in dst.iter_mut().zip(&src[j * c_in..(j + 1) * c_in]) {
                    *d += *s;
                }
            }
        }
    }
    LayerGrads {
        weight: dw,
        bias,
        input: Some(dx),
    }
}

/// Parameter views for one batch-norm layer.
pub struct BatchNormParams<'a, F> {
    pub gamma: &'a [F],
    pub beta: &'a [F],
    pub eps: F,
}

pub struct BatchNormCache<F> {
    xhat: Vec<F>,
    inv_std: Vec<F>,
}

/// Training-mode batch norm over all rows. Updates the running buffers with
/// `momentum` (running variance uses the unbiased batch variance).
pub fn batch_norm_train<F: Scalar>(
    x: &Mat<F>,
    p: &BatchNormParams<'_, F>,
    running_mean: &mut [F],
    running_var: &mut [F],
    momentum: F,
) -> (Mat<F>, BatchNormCache<F>) {
    let c = x.cols;
    let n = F::from_usize(x.rows).unwrap();
    let mut mean = vec![F::zero(); c];
    for r in 0..x.rows {
        for (m, v) in mean.iter_mut().zip(x.row(r)) {
            *m += *v;
        }
    }
    mean.iter_mut().for_each(|m| *m = *m / n);
    let mut var = vec![F::zero(); c];
    for r in 0..x.rows {
        for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
            let d = *v - *m;
            *s += d * d;
        }
    }
    var.iter_mut().for_each(|s| *s = *s / n);
    let inv_std: Vec<F> = var.iter().map(|v| F::one() / (*v + p.eps).sqrt()).collect();

    let mut xhat = vec![F::zero(); x.data.len()];
    let mut y = Mat::zeros(x.rows, c);
    for r in 0..x.rows {
        let xr = x.row(r);
        let hr = &mut xhat[r * c..(r + 1) * c];
        for ch in 0..c {
            hr[ch] = (xr[ch] - mean[ch]) * inv_std[ch];
        }
        let yr = y.row_mut(r);
        for ch in 0..c {
            yr[ch] = p.gamma[ch] * hr[ch] + p.beta[ch];
        }
    }

    let unbias = if x.rows > 1 {
        n / (n - F::one())
    } else {
        F::one()
    };
    let keep = F::one() - momentum;
    for ch in 0..c {
        running_mean[ch] = keep * running_mean[ch] + momentum * mean[ch];
        running_var[ch] = keep * running_var[ch] + momentum * var[ch] * unbias;
    }
    (y, BatchNormCache { xhat, inv_std })
}

pub fn batch_norm_eval<F: Scalar>(
    x: &Mat<F>,
    p: &BatchNormParams<'_, F>,
    running_mean: &[F],
    running_var: &[F],
) -> Mat<F> {
    let c = x.cols;
    let scale: Vec<F> = (0..c)
        .map(|ch| p.gamma[ch] / (running_var[ch] + p.eps).sqrt())
        .collect();
    let mut y = Mat::zeros(x.rows, c);
    for r in 0..x.rows {
        let xr = x.row(r);
        let yr = y.row_mut(r);
        for ch in 0..c {
            yr[ch] = (xr[ch] - running_mean[ch]) * scale[ch] + p.beta[ch];
        }
    }
    y
}

/// Returns gamma/beta gradients as `weight`/`bias`; `input` is always set.
pub fn batch_norm_backward<F: Scalar>(
    cache: &BatchNormCache<F>,
    gamma: &[F],
    dy: &Mat<F>,
) -> LayerGrads<F> {
    let c = dy.cols;
    let n = F::from_usize(dy.rows).unwrap();
    let mut sum_dy = vec![F::zero(); c];
    let mut sum_dy_xhat = vec![F::zero(); c];
    for r in 0..dy.rows {
        let dr = dy.row(r);
        let hr = &cache.xhat[r * c..(r + 1) * c];
        for ch in 0..c {
            sum_dy[ch] += dr[ch];
            sum_dy_xhat[ch] += dr[ch] * hr[ch];
        }
    }
    let mut dx = Mat::zeros(dy.rows, c);
    for r in 0..dy.rows {
        let dr = dy.row(r);
        let hr = &cache.xhat[r * c..(r + 1) * c];
        let xr = dx.row_mut(r);
        for ch in 0..c {
            let k = gamma[ch] * cache.inv_std[ch] / n;
            xr[ch] = k * (n * dr[ch] - sum_dy[ch] - hr[ch] * sum_dy_xhat[ch]);
        }
    }
    LayerGrads {
        weight: sum_dy_xhat,
        bias: sum_dy,
        input: Some(dx),
    }
}

/// ReLU followed by inverted dropout. With `rng = None` (evaluation) only the
/// ReLU is applied. The returned mask holds the per-element gain (0 or
/// `1/(1-p)`), which is all the backward pass needs.
pub fn relu_dropout_forward<F: Scalar, R: Rng + ?Sized>(
    mut x: Mat<F>,
    p: f64,
    rng: Option<&mut R>,
) -> (Mat<F>, Vec<F>) {
    match rng {
        Some(rng) if p > 0.0 => {
            let gain = F::lit(1.0 / (1.0 - p));
            let mut mask = Vec::with_capacity(x.data.len());
            for v in x.data.iter_mut() {
                let keep = rng.random::<f64>() >= p;
                let g = if keep && *v > F::zero() { gain } else { F::zero() };
                *v = *v * g;
                mask.push(g);
            }
            (x, mask)
        }
        _ => {
            let mut mask = Vec::with_capacity(x.data.len());
            for v in x.data.iter_mut() {
                if *v > F::zero() {
                    mask.push(F::one());
                } else {
                    *v = F::zero();
                    mask.push(F::zero());
                }
            }
            (x, mask)
        }
    }
}

pub fn relu_dropout_backward<F: Scalar>(mut dy: Mat<F>, mask: &[F]) -> Mat<F> {
    for (d, m) in dy.data.iter_mut().zip(mask) {
        *d = *d * *m;
    }
    dy
}

pub fn softmax_rows<F: Scalar>(logits: &Mat<F>) -> Mat<F> {
    let mut out = logits.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    out
}

/// Vector-Jacobian product of the row softmax.
pub fn softmax_rows_backward<F: Scalar>(probs: &Mat<F>, dprobs: &Mat<F>) -> Mat<F> {
    let mut out = Mat::zeros(probs.rows, probs.cols);
    for r in 0..probs.rows {
        let p = probs.row(r);
        let dp = dprobs.row(r);
        let dot: F = p.iter().zip(dp).map(|(a, b)| *a * *b).sum();
        for ((o, pi), dpi) in out.row_mut(r).iter_mut().zip(p).zip(dp) {
            *o = *pi * (*dpi - dot);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn conv_naive(x: &[f64], len: usize, c_in: usize, w: &Tensor<f64>, b: &[f64]) -> Vec<f64> {
        let (k, _, c_out) = (w.shape[0], w.shape[1], w.shape[2]);
        let pad = k / 2;
        let mut y = vec![0.0; len * c_out];
        for t in 0..len {
            for o in 0..c_out {
                let mut acc = b[o];
                for j in 0..k {
                    let s = t as isize + j as isize - pad as isize;
                    if s < 0 || s >= len as isize {
                        continue;
                    }
                    for c in 0..c_in {
                        acc += x[s as usize * c_in + c] * w.data[(j * c_in + c) * c_out + o];
                    }
                }
                y[t * c_out + o] = acc;
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let (len, c_in, c_out, k) = (7, 2, 3, 5);
        let x: Vec<f64> = (0..len * c_in).map(|i| (i as f64 * 0.7).sin()).collect();
        let w = Tensor {
            shape: vec![k, c_in, c_out],
            data: (0..k * c_in * c_out).map(|i| (i as f64 * 0.3).cos()).collect(),
        };
        let b = Tensor {
            shape: vec![c_out],
            data: vec![0.1, -0.2, 0.3],
        };
        let (y, _) = conv1d_forward(&Mat::from_vec(len, c_in, x.clone()), 1, len, &w, &b);
        let expected = conv_naive(&x, len, c_in, &w, &b.data);
        for (a, e) in y.data.iter().zip(&expected) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_does_not_mix_batch_elements() {
        let (len, c_in) = (6, 1);
        let w = Tensor {
            shape: vec![3, 1, 1],
            data: vec![1.0, 1.0, 1.0],
        };
        let b = Tensor::zeros(&[1]);
        let mut x = vec![0.0f64; 2 * len];
        x[len..].iter_mut().for_each(|v| *v = 1.0);
        let (y, _) = conv1d_forward(&Mat::from_vec(2 * len, c_in, x), 2, len, &w, &b);
        assert!(y.data[..len].iter().all(|v| *v == 0.0));
        assert_eq!(y.data[len], 2.0);
        assert_eq!(y.data[2 * len - 1], 2.0);
    }

    #[test]
    fn batch_norm_train_output_is_standardized() {
        let x = Mat::from_vec(4, 1, vec![1.0f64, 2.0, 3.0, 4.0]);
        let gamma = [1.0];
        let beta = [0.0];
        let p = BatchNormParams {
            gamma: &gamma,
            beta: &beta,
            eps: 0.0,
        };
        let mut rm = [0.0];
        let mut rv = [1.0];
        let (y, _) = batch_norm_train(&x, &p, &mut rm, &mut rv, 0.1);
        let mean: f64 = y.data.iter().sum::<f64>() / 4.0;
        let var: f64 = y.data.iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-12);
        assert!((rm[0] - 0.25).abs() < 1e-12);
        // unbiased batch variance 5/3
        assert!((rv[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn eval_relu_without_rng_has_no_dropout() {
        let x = Mat::from_vec(1, 4, vec![-1.0f32, 0.5, 2.0, 0.0]);
        let (y, mask) = relu_dropout_forward::<f32, ChaCha8Rng>(x, 0.2, None);
        assert_eq!(y.data, vec![0.0, 0.5, 2.0, 0.0]);
        assert_eq!(mask, vec![0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn dropout_keeps_roughly_one_minus_p() {
        let x = Mat::from_vec(1, 10_000, vec![1.0f64; 10_000]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (y, _) = relu_dropout_forward(x, 0.2, Some(&mut rng));
        let kept = y.data.iter().filter(|v| **v > 0.0).count() as f64 / 10_000.0;
        assert!((kept - 0.8).abs() < 0.02);
        let mean = y.data.iter().sum::<f64>() / 10_000.0;
        assert!((mean - 1.0).abs() < 0.03);
    }

    #[test]
    fn softmax_rows_sum_to_one_even_for_large_logits() {
        let l = Mat::from_vec(2, 3, vec![1000.0f32, 999.0, -5.0, 0.0, 0.0, 0.0]);
        let p = softmax_rows(&l);
        for r in 0..2 {
            let s: f32 = p.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        assert!((p.data[3] - 1.0 / 3.0).abs() < 1e-6);
    }
}
