//! Single-layer bidirectional LSTM that emits the final hidden state of each
//! direction. Gate order inside the `4H` blocks is input, forget, cell, output.

use super::{gemm, Mat, Scalar, Tensor};

#[derive(Clone, Copy)]
pub struct LstmWeights<'a, F> {
    /// `[in, 4H]`
    pub w_ih: &'a Tensor<F>,
    /// `[H, 4H]`
    pub w_hh: &'a Tensor<F>,
    /// `[4H]`
    pub bias: &'a Tensor<F>,
}

impl<F> LstmWeights<'_, F> {
    fn hidden(&self) -> usize {
        self.w_hh.shape[0]
    }
}

pub struct LstmGrads<F> {
    pub w_ih: Vec<F>,
    pub w_hh: Vec<F>,
    pub bias: Vec<F>,
}

struct DirectionCache<F> {
    /// Post-activation gates per step, `(len * batch, 4H)` indexed by step.
    gates: Vec<F>,
    /// Cell state entering each step, `(len * batch, H)`.
    c_prev: Vec<F>,
    /// Hidden state entering each step, `(len * batch, H)`.
    h_prev: Vec<F>,
    /// `tanh(c)` after each step.
    tanh_c: Vec<F>,
}

pub struct BiLstmCache<F> {
    batch: usize,
    len: usize,
    fwd: DirectionCache<F>,
    bwd: DirectionCache<F>,
}

fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

fn run_direction<F: Scalar>(
    x: &Mat<F>,
    batch: usize,
    len: usize,
    w: LstmWeights<'_, F>,
    reverse: bool,
    keep_cache: bool,
) -> (Vec<F>, Option<DirectionCache<F>>) {
    let h = w.hidden();
    let g4 = 4 * h;
    let d_in = w.w_ih.shape[0];
    assert_eq!(x.cols, d_in, "lstm: input width");

    let mut xg = vec![F::zero(); x.rows * g4];
    for r in 0..x.rows {
        xg[r * g4..(r + 1) * g4].copy_from_slice(&w.bias.data);
    }
    gemm(false, false, x.rows, d_in, g4, F::one(), &x.data, &w.w_ih.data, F::one(), &mut xg);

    let mut hs = vec![F::zero(); batch * h];
    let mut cs = vec![F::zero(); batch * h];
    let mut step_gates = vec![F::zero(); batch * g4];
    let mut cache = keep_cache.then(|| DirectionCache {
        gates: vec![F::zero(); len * batch * g4],
        c_prev: vec![F::zero(); len * batch * h],
        h_prev: vec![F::zero(); len * batch * h],
        tanh_c: vec![F::zero(); len * batch * h],
    });

    for s in 0..len {
        let t = if reverse { len - 1 - s } else { s };
        for b in 0..batch {
            let src = &xg[(b * len + t) * g4..(b * len + t + 1) * g4];
            step_gates[b * g4..(b + 1) * g4].copy_from_slice(src);
        }
        gemm(false, false, batch, h, g4, F::one(), &hs, &w.w_hh.data, F::one(), &mut step_gates);
        if let Some(c) = cache.as_mut() {
            c.c_prev[s * batch * h..(s + 1) * batch * h].copy_from_slice(&cs);
            c.h_prev[s * batch * h..(s + 1) * batch * h].copy_from_slice(&hs);
        }
        for b in 0..batch {
            let gate = &mut step_gates[b * g4..(b + 1) * g4];
            for k in 0..h {
                let i = sigmoid(gate[k]);
                let f = sigmoid(gate[h + k]);
                let g = gate[2 * h + k].tanh();
                let o = sigmoid(gate[3 * h + k]);
                gate[k] = i;
                gate[h + k] = f;
                gate[2 * h + k] = g;
                gate[3 * h + k] = o;
                let c_new = f * cs[b * h + k] + i * g;
                let tc = c_new.tanh();
                cs[b * h + k] = c_new;
                hs[b * h + k] = o * tc;
                if let Some(c) = cache.as_mut() {
                    c.tanh_c[(s * batch + b) * h + k] = tc;
                }
            }
        }
        if let Some(c) = cache.as_mut() {
            c.gates[s * batch * g4..(s + 1) * batch * g4].copy_from_slice(&step_gates);
        }
    }
    (hs, cache)
}

/// Runs both directions over `x` (`(batch*len, in)`) and returns
/// `[h_forward_last | h_backward_first]` as a `(batch, 2H)` matrix. The cache
/// is only built when `keep_cache` is set.
pub fn bilstm_forward<F: Scalar>(
    x: &Mat<F>,
    batch: usize,
    len: usize,
    fwd: LstmWeights<'_, F>,
    bwd: LstmWeights<'_, F>,
    keep_cache: bool,
) -> (Mat<F>, Option<BiLstmCache<F>>) {
    let h = fwd.hidden();
    let (hf, cf) = run_direction(x, batch, len, fwd, false, keep_cache);
    let (hb, cb) = run_direction(x, batch, len, bwd, true, keep_cache);
    let out = Mat::from_vec(batch, h, hf).hcat(&Mat::from_vec(batch, h, hb));
    let cache = match (cf, cb) {
        (Some(fwd), Some(bwd)) => Some(BiLstmCache {
            batch,
            len,
            fwd,
            bwd,
        }),
        _ => None,
    };
    (out, cache)
}

fn backprop_direction<F: Scalar>(
    cache: &DirectionCache<F>,
    x: &Mat<F>,
    batch: usize,
    len: usize,
    w: LstmWeights<'_, F>,
    dh_last: Vec<F>,
    reverse: bool,
    dx: Option<&mut Mat<F>>,
) -> LstmGrads<F> {
    let h = w.hidden();
    let g4 = 4 * h;
    let d_in = w.w_ih.shape[0];
    let mut dh = dh_last;
    let mut dc = vec![F::zero(); batch * h];
    // pre-activation gate gradients, by step (for W_hh) and by input row (for W_ih)
    let mut da_steps = vec![F::zero(); len * batch * g4];
    let mut dxg = vec![F::zero(); batch * len * g4];

    for s in (0..len).rev() {
        let t = if reverse { len - 1 - s } else { s };
        let gates = &cache.gates[s * batch * g4..(s + 1) * batch * g4];
        let c_prev = &cache.c_prev[s * batch * h..(s + 1) * batch * h];
        let tanh_c = &cache.tanh_c[s * batch * h..(s + 1) * batch * h];
        let da = &mut da_steps[s * batch * g4..(s + 1) * batch * g4];
        for b in 0..batch {
            let gate = &gates[b * g4..(b + 1) * g4];
            let da_b = &mut da[b * g4..(b + 1) * g4];
            for k in 0..h {
                let idx = b * h + k;
                let (i, f, g, o) = (gate[k], gate[h + k], gate[2 * h + k], gate[3 * h + k]);
                let tc = tanh_c[idx];
                let dhk = dh[idx];
                let dck = dc[idx] + dhk * o * (F::one() - tc * tc);
                let d_o = dhk * tc;
                let d_i = dck * g;
                let d_g = dck * i;
                let d_f = dck * c_prev[idx];
                da_b[k] = d_i * i * (F::one() - i);
                da_b[h + k] = d_f * f * (F::one() - f);
                da_b[2 * h + k] = d_g * (F::one() - g * g);
                da_b[3 * h + k] = d_o * o * (F::one() - o);
                dc[idx] = dck * f;
            }
            dxg[(b * len + t) * g4..(b * len + t + 1) * g4].copy_from_slice(da_b);
        }
        gemm(false, true, batch, g4, h, F::one(), da, &w.w_hh.data, F::zero(), &mut dh);
    }

    let mut d_whh = vec![F::zero(); h * g4];
    gemm(true, false, h, len * batch, g4, F::one(), &cache.h_prev, &da_steps, F::zero(), &mut d_whh);
    let mut d_wih = vec![F::zero(); d_in * g4];
    gemm(true, false, d_in, batch * len, g4, F::one(), &x.data, &dxg, F::zero(), &mut d_wih);
    let mut d_bias = vec![F::zero(); g4];
    for r in 0..batch * len {
        for (g, v) in d_bias.iter_mut().zip(&dxg[r * g4..(r + 1) * g4]) {
            *g += *v;
        }
    }
    if let Some(dx) = dx {
        gemm(false, true, batch * len, g4, d_in, F::one(), &dxg, &w.w_ih.data, F::one(), &mut dx.data);
    }
    LstmGrads {
        w_ih: d_wih,
        w_hh: d_whh,
        bias: d_bias,
    }
}

/// Backward pass for [`bilstm_forward`]. `dout` is the gradient of the
/// `(batch, 2H)` output. Returns per-direction weight gradients and, when
/// requested, the input gradient.
pub fn bilstm_backward<F: Scalar>(
    cache: &BiLstmCache<F>,
    x: &Mat<F>,
    fwd: LstmWeights<'_, F>,
    bwd: LstmWeights<'_, F>,
    dout: &Mat<F>,
    need_dx: bool,
) -> (LstmGrads<F>, LstmGrads<F>, Option<Mat<F>>) {
    let h = fwd.hidden();
    let (dhf, dhb) = dout.hsplit(h);
    let mut dx = need_dx.then(|| Mat::zeros(x.rows, x.cols));
    let gf = backprop_direction(&cache.fwd, x, cache.batch, cache.len, fwd, dhf.data, false, dx.as_mut());
    let gb = backprop_direction(&cache.bwd, x, cache.batch, cache.len, bwd, dhb.data, true, dx.as_mut());
    (gf, gb, dx)
}
