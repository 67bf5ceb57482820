//! Selective state-space layer in the scalar-decay-per-head (SSD) form.
//!
//! Per head `h` the hidden state `S` is a `[head_dim, d_state]` matrix:
//!
//! ```text
//! alpha_t = exp(-dt[t,h] * exp(a_log[h]))
//! S_t     = alpha_t * S_{t-1} + dt[t,h] * outer(X[t,h], B[t])
//! Y[t,h]  = S_t . C[t]
//! ```
//!
//! `B` and `C` are shared by all heads.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::params::{uniform_init, Bound, ParamId, ParamStore};
use crate::tensor::{self, Tape, Tensor, TensorError, Var};

type Result<T> = std::result::Result<T, TensorError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsdConfig {
    pub d_model: usize,
    pub expand: usize,
    pub n_heads: usize,
    pub d_state: usize,
    pub d_conv: usize,
}

impl Default for SsdConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            expand: 8,
            n_heads: 4,
            d_state: 32,
            d_conv: 4,
        }
    }
}

impl SsdConfig {
    pub fn d_inner(&self) -> usize {
        self.expand * self.d_model
    }

    pub fn head_dim(&self) -> usize {
        self.d_inner() / self.n_heads
    }

    /// Width of the conv'd main path: X, B and C channels.
    pub fn conv_channels(&self) -> usize {
        self.d_inner() + 2 * self.d_state
    }

    /// Width of the in-projection: gate z, main path, dt.
    pub fn proj_width(&self) -> usize {
        self.d_inner() + self.conv_channels() + self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.d_model,
            self.expand,
            self.n_heads,
            self.d_state,
            self.d_conv,
        ];
        if fields.contains(&0) {
            return Err(TensorError::Invalid(
                "ssd config dimensions must be positive".into(),
            ));
        }
        if self.d_inner() % self.n_heads != 0 {
            return Err(TensorError::Invalid(format!(
                "d_inner {} not divisible by n_heads {}",
                self.d_inner(),
                self.n_heads
            )));
        }
        Ok(())
    }
}

/// Per-timestep inputs of one scan.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanInputs {
    /// `[T, n_heads * head_dim]`, head-major within a row.
    pub x: Tensor,
    /// `[T, n_heads]`, nonnegative.
    pub dt: Tensor,
    /// `[T, d_state]`
    pub b: Tensor,
    /// `[T, d_state]`
    pub c: Tensor,
}

#[derive(Clone, Copy, Debug)]
struct ScanDims {
    t: usize,
    heads: usize,
    head_dim: usize,
    d_state: usize,
}

impl ScanInputs {
    fn dims(&self, a_log: &[f64]) -> Result<ScanDims> {
        let shape_err = |what: &str| {
            Err(TensorError::Invalid(format!("ssd_scan: {what}")))
        };
        if [&self.x, &self.dt, &self.b, &self.c]
            .iter()
            .any(|t| t.shape().len() != 2)
        {
            return shape_err("inputs must be 2-D");
        }
        let t = self.x.shape()[0];
        let heads = a_log.len();
        if heads == 0 || self.dt.shape() != [t, heads] {
            return shape_err(&format!(
                "dt shape {:?} does not match T={t}, heads={heads}",
                self.dt.shape()
            ));
        }
        let width = self.x.shape()[1];
        if width % heads != 0 {
            return shape_err(&format!("x width {width} not divisible by {heads} heads"));
        }
        let d_state = self.b.shape()[1];
        if self.b.shape()[0] != t || self.c.shape() != self.b.shape() {
            return shape_err(&format!(
                "B {:?} and C {:?} must both be [{t}, N]",
                self.b.shape(),
                self.c.shape()
            ));
        }
        if let Some(bad) = self.dt.data().iter().find(|&&d| !(d >= 0.0)) {
            return shape_err(&format!("negative or NaN step size {bad}"));
        }
        Ok(ScanDims {
            t,
            heads,
            head_dim: width / heads,
            d_state,
        })
    }
}

/// Four-lane dot product (lets the reduction vectorize).
fn dot(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (xc, yc) = (x.chunks_exact(4), y.chunks_exact(4));
    let tail: f64 = xc.remainder().iter().zip(yc.remainder()).map(|(a, b)| a * b).sum();
    for (a, b) in xc.zip(yc) {
        for l in 0..4 {
            acc[l] += a[l] * b[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Sequential scan from a zero state. Returns `Y` as `[T, n_heads * head_dim]`.
pub fn ssd_scan(inputs: &ScanInputs, a_log: &[f64]) -> Result<Tensor> {
    let dims = inputs.dims(a_log)?;
    let mut y = vec![0.0; dims.t * dims.heads * dims.head_dim];
    scan_forward(inputs, a_log, dims, &mut y, None);
    Tensor::new(&[dims.t, dims.heads * dims.head_dim], y)
}

/// Sequential recurrence; optionally records every state `S_t` into `states`
/// (layout `[T, heads, head_dim, d_state]`).
fn scan_forward(
    inputs: &ScanInputs,
    a_log: &[f64],
    d: ScanDims,
    y: &mut [f64],
    mut states: Option<&mut Vec<f64>>,
) {
    let (p, n) = (d.head_dim, d.d_state);
    let width = d.heads * p;
    let mut state = vec![0.0; d.heads * p * n];
    let (xv, dtv, bv, cv) = (
        inputs.x.data(),
        inputs.dt.data(),
        inputs.b.data(),
        inputs.c.data(),
    );
    for t in 0..d.t {
        let brow = &bv[t * n..(t + 1) * n];
        let crow = &cv[t * n..(t + 1) * n];
        for h in 0..d.heads {
            let dt = dtv[t * d.heads + h];
            let alpha = (-dt * a_log[h].exp()).exp();
            for pi in 0..p {
                let xin = dt * xv[t * width + h * p + pi];
                let s = &mut state[(h * p + pi) * n..(h * p + pi + 1) * n];
                for (sv, &bv) in s.iter_mut().zip(brow) {
                    *sv = alpha * *sv + xin * bv;
                }
                y[t * width + h * p + pi] = dot(s, crow);
            }
        }
        if let Some(buf) = states.as_deref_mut() {
            buf.extend_from_slice(&state);
        }
    }
}

/// Chunked evaluation: within each chunk the outputs are computed from the
/// closed form
///
/// ```text
/// Y_t = e^{L_t} (S_prev . C_t) + sum_{r<=t} e^{L_t - L_r} dt_r (B_r . C_t) X_r
/// ```
///
/// with `L_t` the within-chunk cumulative log-decay, and the state is carried
/// between chunks. Agrees with [`ssd_scan`] up to rounding.
pub fn ssd_scan_chunked(inputs: &ScanInputs, a_log: &[f64], chunk: usize) -> Result<Tensor> {
    if chunk == 0 {
        return Err(TensorError::Invalid("ssd_scan_chunked: chunk must be >= 1".into()));
    }
    let d = inputs.dims(a_log)?;
    let (p, n) = (d.head_dim, d.d_state);
    let width = d.heads * p;
    let (xv, dtv, bv, cv) = (
        inputs.x.data(),
        inputs.dt.data(),
        inputs.b.data(),
        inputs.c.data(),
    );
    let mut y = vec![0.0; d.t * width];
    let mut state = vec![0.0; d.heads * p * n];
    let mut start = 0;
    while start < d.t {
        let end = (start + chunk).min(d.t);
        let len = end - start;
        // B_r . C_t for r <= t within the chunk, shared by all heads
        let mut bc = vec![0.0; len * len];
        for ti in 0..len {
            let crow = &cv[(start + ti) * n..(start + ti + 1) * n];
            for ri in 0..=ti {
                let brow = &bv[(start + ri) * n..(start + ri + 1) * n];
                bc[ti * len + ri] = brow.iter().zip(crow).map(|(a, b)| a * b).sum();
            }
        }
        for h in 0..d.heads {
            let a = a_log[h].exp();
            let mut cum = vec![0.0; len];
            let mut acc = 0.0;
            for ti in 0..len {
                acc -= dtv[(start + ti) * d.heads + h] * a;
                cum[ti] = acc;
            }
            let hs = &state[h * p * n..(h + 1) * p * n];
            for ti in 0..len {
                let t = start + ti;
                let crow = &cv[t * n..(t + 1) * n];
                let decay = cum[ti].exp();
                for pi in 0..p {
                    let carried: f64 = hs[pi * n..(pi + 1) * n]
                        .iter()
                        .zip(crow)
                        .map(|(s, c)| s * c)
                        .sum();
                    let mut out = decay * carried;
                    for ri in 0..=ti {
                        let r = start + ri;
                        let w = (cum[ti] - cum[ri]).exp() * dtv[r * d.heads + h] * bc[ti * len + ri];
                        out += w * xv[r * width + h * p + pi];
                    }
                    y[t * width + h * p + pi] = out;
                }
            }
            // carry the state to the chunk boundary
            let last = cum[len - 1];
            let mut next = vec![0.0; p * n];
            for pi in 0..p {
                for ni in 0..n {
                    next[pi * n + ni] = last.exp() * hs[pi * n + ni];
                }
            }
            for ri in 0..len {
                let r = start + ri;
                let w = (last - cum[ri]).exp() * dtv[r * d.heads + h];
                let brow = &bv[r * n..(r + 1) * n];
                for pi in 0..p {
                    let xw = w * xv[r * width + h * p + pi];
                    for ni in 0..n {
                        next[pi * n + ni] += xw * brow[ni];
                    }
                }
            }
            state[h * p * n..(h + 1) * p * n].copy_from_slice(&next);
        }
        start = end;
    }
    Tensor::new(&[d.t, width], y)
}

/// Records a differentiable scan on `tape`. `x: [T, H*P]`, `dt: [T, H]`,
/// `b, c: [T, N]`, `a_log: [H]`.
pub fn scan_on_tape(tape: &mut Tape, x: Var, dt: Var, b: Var, c: Var, a_log: Var) -> Result<Var> {
    let inputs = ScanInputs {
        x: tape.value(x).clone(),
        dt: tape.value(dt).clone(),
        b: tape.value(b).clone(),
        c: tape.value(c).clone(),
    };
    let a = tape.value(a_log).data().to_vec();
    let y = ssd_scan(&inputs, &a)?;
    let backward: tensor::BackwardFn = Box::new(|vals, _out, g| {
        let inputs = ScanInputs {
            x: vals[0].clone(),
            dt: vals[1].clone(),
            b: vals[2].clone(),
            c: vals[3].clone(),
        };
        let grads = scan_backward(&inputs, vals[4].data(), g);
        grads.into_iter().map(Some).collect()
    });
    Ok(tape.custom(&[x, dt, b, c, a_log], y, backward))
}

/// Reverse sweep of the recurrence. Returns grads for `(x, dt, b, c, a_log)`.
fn scan_backward(inputs: &ScanInputs, a_log: &[f64], gy: &[f64]) -> Vec<Vec<f64>> {
    let d = inputs.dims(a_log).expect("validated in forward");
    let (p, n) = (d.head_dim, d.d_state);
    let width = d.heads * p;
    let block = d.heads * p * n;
    let mut y = vec![0.0; d.t * width];
    let mut states = Vec::with_capacity(d.t * block);
    scan_forward(inputs, a_log, d, &mut y, Some(&mut states));

    let (xv, dtv, bv, cv) = (
        inputs.x.data(),
        inputs.dt.data(),
        inputs.b.data(),
        inputs.c.data(),
    );
    let mut gx = vec![0.0; xv.len()];
    let mut gdt = vec![0.0; dtv.len()];
    let mut gb = vec![0.0; bv.len()];
    let mut gc = vec![0.0; cv.len()];
    let mut ga = vec![0.0; d.heads];
    // running d(loss)/d(S_t), one [P, N] block per head
    let mut gs = vec![0.0; block];
    let zeros = vec![0.0; block];
    for t in (0..d.t).rev() {
        let brow = &bv[t * n..(t + 1) * n];
        let crow = &cv[t * n..(t + 1) * n];
        let st = &states[t * block..(t + 1) * block];
        let prev = if t > 0 { &states[(t - 1) * block..t * block] } else { &zeros[..] };
        let mut gc_t = vec![0.0; n];
        let mut gb_t = vec![0.0; n];
        for h in 0..d.heads {
            let dt = dtv[t * d.heads + h];
            let a = a_log[h].exp();
            let alpha = (-dt * a).exp();
            let mut galpha = 0.0;
            let mut gdt_inject = 0.0;
            for pi in 0..p {
                let col = t * width + h * p + pi;
                let (gyv, xval) = (gy[col], xv[col]);
                let base = (h * p + pi) * n;
                let g = &mut gs[base..base + n];
                for ((gcv, gv), (&sv, &cv)) in gc_t.iter_mut().zip(g.iter_mut()).zip(st[base..base + n].iter().zip(crow)) {
                    *gcv += gyv * sv;
                    *gv += gyv * cv;
                }
                let gx_acc = dot(g, brow);
                gdt_inject += xval * gx_acc;
                gx[col] += dt * gx_acc;
                galpha += dot(g, &prev[base..base + n]);
                let xs = dt * xval;
                for (gbv, gv) in gb_t.iter_mut().zip(g.iter_mut()) {
                    *gbv += xs * *gv;
                    *gv *= alpha;
                }
            }
            gdt[t * d.heads + h] += gdt_inject - galpha * alpha * a;
            ga[h] -= galpha * alpha * dt * a;
        }
        gc[t * n..(t + 1) * n].copy_from_slice(&gc_t);
        gb[t * n..(t + 1) * n].copy_from_slice(&gb_t);
    }
    vec![gx, gdt, gb, gc, ga]
}

/// Learnable state of one block, as ids into a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct SsdParams {
    pub config: SsdConfig,
    pub in_w: ParamId,
    pub in_b: ParamId,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub dt_bias: ParamId,
    pub a_log: ParamId,
    pub norm_g: ParamId,
    pub norm_b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

/// Initial step size after softplus.
const DT_INIT: f64 = 0.01;

impl SsdParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        config: &SsdConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let (dm, di, h) = (config.d_model, config.d_inner(), config.n_heads);
        let (cc, pw, k) = (config.conv_channels(), config.proj_width(), config.d_conv);
        let name = |s: &str| format!("{prefix}.{s}");
        // inverse softplus, so softplus(dt_bias) == DT_INIT
        let dt_bias = DT_INIT.exp_m1().ln();
        let a_log = (0..h)
            .map(|i| {
                let a = if h == 1 {
                    1.0
                } else {
                    1.0 + (h as f64 - 1.0) * i as f64 / (h as f64 - 1.0)
                };
                a.ln()
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            in_w: store.add(name("in_w"), uniform_init(rng, &[dm, pw], dm)),
            in_b: store.add(name("in_b"), Tensor::zeros(&[pw])),
            conv_w: store.add(name("conv_w"), uniform_init(rng, &[k, cc], k)),
            conv_b: store.add(name("conv_b"), Tensor::zeros(&[cc])),
            dt_bias: store.add(name("dt_bias"), Tensor::filled(&[h], dt_bias)),
            a_log: store.add(name("a_log"), Tensor::vector(a_log)),
            norm_g: store.add(name("norm_g"), Tensor::filled(&[di], 1.0)),
            norm_b: store.add(name("norm_b"), Tensor::zeros(&[di])),
            out_w: store.add(name("out_w"), uniform_init(rng, &[di, dm], di)),
            out_b: store.add(name("out_b"), Tensor::zeros(&[dm])),
        })
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// One block over a single sequence `x[T, d_model]`:
/// in-projection into gate `z`, main path and `dt`; causal conv + SiLU on the
/// main path, split into `X, B, C`; `dt = softplus(raw + dt_bias)`; scan;
/// gate by `silu(z)`; layer norm; out-projection.
pub fn mamba2_block(tape: &mut Tape, bound: &Bound, p: &SsdParams, x: Var) -> Result<Var> {
    let cfg = &p.config;
    let shape = tape.shape(x).to_vec();
    if shape.len() != 2 || shape[1] != cfg.d_model {
        return Err(TensorError::Shape {
            op: "mamba2_block",
            left: shape,
            right: vec![cfg.d_model],
        });
    }
    let (di, n, h) = (cfg.d_inner(), cfg.d_state, cfg.n_heads);
    let proj = tape.matmul(x, bound[p.in_w])?;
    let proj = tape.add_row(proj, bound[p.in_b])?;
    let z = tape.slice_cols(proj, 0, di)?;
    let main = tape.slice_cols(proj, di, cfg.conv_channels())?;
    let dt_raw = tape.slice_cols(proj, di + cfg.conv_channels(), h)?;

    let conv = tape.causal_conv1d(main, bound[p.conv_w], bound[p.conv_b])?;
    let act = tape.silu(conv);
    let xs = tape.slice_cols(act, 0, di)?;
    let bs = tape.slice_cols(act, di, n)?;
    let cs = tape.slice_cols(act, di + n, n)?;

    let dt = tape.add_row(dt_raw, bound[p.dt_bias])?;
    let dt = tape.softplus(dt);
    let y = scan_on_tape(tape, xs, dt, bs, cs, bound[p.a_log])?;

    let gate = tape.silu(z);
    let gated = tape.mul(y, gate)?;
    let normed = tape.layer_norm(gated, bound[p.norm_g], bound[p.norm_b], LAYER_NORM_EPS)?;
    let out = tape.matmul(normed, bound[p.out_w])?;
    tape.add_row(out, bound[p.out_b])
}
