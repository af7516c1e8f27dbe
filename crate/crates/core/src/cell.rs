//! One step of a projected LSTM tower with diagonal peepholes, plus
//! optional additive injections into the pre-activation of each of the
//! four sinks (input gate, forget gate, output gate, cell activation).
//!
//! The forward step computes
//!
//! ```text
//! i = σ(W_ix x + W_ir r' + w_ic ⊙ c' + b_i + inj_i)
//! f = σ(W_fx x + W_fr r' + w_fc ⊙ c' + b_f + inj_f)
//! g = tanh(W_cx x + W_cr r' + b_c + inj_g)
//! c = f ⊙ c' + i ⊙ g
//! o = σ(W_ox x + W_or r' + w_oc ⊙ c + b_o + inj_o)
//! m = o ⊙ tanh(c),  r = W_rm m,  p = W_pm m
//! y = W_yr r + W_yp p + b_y
//! ```
//!
//! where primes denote the previous step. Note the output gate peeks at the
//! current cell while the input and forget gates peek at the previous one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sigmoid, Mat, SplitMix64};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CellDims {
    pub input: usize,
    pub cell: usize,
    pub rec_proj: usize,
    pub nonrec_proj: usize,
    pub output: usize,
}

impl CellDims {
    pub fn new(input: usize, cell: usize, rec_proj: usize, nonrec_proj: usize, output: usize) -> Self {
        CellDims {
            input,
            cell,
            rec_proj,
            nonrec_proj,
            output,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input == 0 || self.cell == 0 || self.rec_proj == 0 || self.nonrec_proj == 0 || self.output == 0 {
            return Err(Error::invalid(format!("all cell dimensions must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (n, c, r, p, o) = (self.input, self.cell, self.rec_proj, self.nonrec_proj, self.output);
        4 * c * n + 4 * c * r + 3 * c + 4 * c + r * c + p * c + o * r + o * p + o
    }
}

/// The four blocks that can receive cross-task feedback.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Sink {
    I,
    F,
    O,
    G,
}

impl Sink {
    pub const ALL: [Sink; 4] = [Sink::I, Sink::F, Sink::O, Sink::G];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            Sink::I => "i",
            Sink::F => "f",
            Sink::O => "o",
            Sink::G => "g",
        }
    }
}

/// All weights of one tower. Every field is also a gradient slot when the
/// struct is used as an accumulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellParams {
    pub dims: CellDims,
    pub w_ix: Mat,
    pub w_fx: Mat,
    pub w_cx: Mat,
    pub w_ox: Mat,
    pub w_ir: Mat,
    pub w_fr: Mat,
    pub w_cr: Mat,
    pub w_or: Mat,
    pub w_ic: Vec<f64>,
    pub w_fc: Vec<f64>,
    pub w_oc: Vec<f64>,
    pub b_i: Vec<f64>,
    pub b_f: Vec<f64>,
    pub b_c: Vec<f64>,
    pub b_o: Vec<f64>,
    pub w_rm: Mat,
    pub w_pm: Mat,
    pub w_yr: Mat,
    pub w_yp: Mat,
    pub b_y: Vec<f64>,
}

/// Canonical field order used by flattening, checkpoints and gradient checks.
pub const CELL_FIELD_NAMES: [&str; 20] = [
    "w_ix", "w_fx", "w_cx", "w_ox", "w_ir", "w_fr", "w_cr", "w_or", "w_ic", "w_fc", "w_oc", "b_i",
    "b_f", "b_c", "b_o", "w_rm", "w_pm", "w_yr", "w_yp", "b_y",
];

impl CellParams {
    pub fn zeros(dims: CellDims) -> Self {
        let CellDims {
            input: n,
            cell: c,
            rec_proj: r,
            nonrec_proj: p,
            output: o,
        } = dims;
        CellParams {
            dims,
            w_ix: Mat::zeros(c, n),
            w_fx: Mat::zeros(c, n),
            w_cx: Mat::zeros(c, n),
            w_ox: Mat::zeros(c, n),
            w_ir: Mat::zeros(c, r),
            w_fr: Mat::zeros(c, r),
            w_cr: Mat::zeros(c, r),
            w_or: Mat::zeros(c, r),
            w_ic: vec![0.0; c],
            w_fc: vec![0.0; c],
            w_oc: vec![0.0; c],
            b_i: vec![0.0; c],
            b_f: vec![0.0; c],
            b_c: vec![0.0; c],
            b_o: vec![0.0; c],
            w_rm: Mat::zeros(r, c),
            w_pm: Mat::zeros(p, c),
            w_yr: Mat::zeros(o, r),
            w_yp: Mat::zeros(o, p),
            b_y: vec![0.0; o],
        }
    }

    /// Tensors in canonical order.
    pub fn tensors(&self) -> [&[f64]; 20] {
        [
            self.w_ix.as_slice(),
            self.w_fx.as_slice(),
            self.w_cx.as_slice(),
            self.w_ox.as_slice(),
            self.w_ir.as_slice(),
            self.w_fr.as_slice(),
            self.w_cr.as_slice(),
            self.w_or.as_slice(),
            &self.w_ic,
            &self.w_fc,
            &self.w_oc,
            &self.b_i,
            &self.b_f,
            &self.b_c,
            &self.b_o,
            self.w_rm.as_slice(),
            self.w_pm.as_slice(),
            self.w_yr.as_slice(),
            self.w_yp.as_slice(),
            &self.b_y,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 20] {
        [
            self.w_ix.as_mut_slice(),
            self.w_fx.as_mut_slice(),
            self.w_cx.as_mut_slice(),
            self.w_ox.as_mut_slice(),
            self.w_ir.as_mut_slice(),
            self.w_fr.as_mut_slice(),
            self.w_cr.as_mut_slice(),
            self.w_or.as_mut_slice(),
            &mut self.w_ic,
            &mut self.w_fc,
            &mut self.w_oc,
            &mut self.b_i,
            &mut self.b_f,
            &mut self.b_c,
            &mut self.b_o,
            self.w_rm.as_mut_slice(),
            self.w_pm.as_mut_slice(),
            self.w_yr.as_mut_slice(),
            self.w_yp.as_mut_slice(),
            &mut self.b_y,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Fan-in of each tensor in canonical order; `None` marks biases.
    fn fan_ins(dims: &CellDims) -> [Option<usize>; 20] {
        let (n, c, r, p) = (dims.input, dims.cell, dims.rec_proj, dims.nonrec_proj);
        [
            Some(n),
            Some(n),
            Some(n),
            Some(n),
            Some(r),
            Some(r),
            Some(r),
            Some(r),
            // diagonal peepholes: one incoming connection each
            Some(1),
            Some(1),
            Some(1),
            None,
            None,
            None,
            None,
            Some(c),
            Some(c),
            Some(r),
            Some(p),
            None,
        ]
    }
}

/// Uniform fan-in scaled initialization: each weight entry is drawn from
/// `[-1/√fan_in, 1/√fan_in)` in canonical field order, biases are zero.
pub fn init_cell_params(dims: CellDims, rng: &mut SplitMix64) -> Result<CellParams> {
    dims.validate()?;
    let mut params = CellParams::zeros(dims);
    let fans = CellParams::fan_ins(&dims);
    for (tensor, fan) in params.tensors_mut().into_iter().zip(fans) {
        if let Some(fan) = fan {
            let s = 1.0 / (fan as f64).sqrt();
            for w in tensor.iter_mut() {
                *w = rng.uniform(-s, s)?;
            }
        }
    }
    Ok(params)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellState {
    pub c: Vec<f64>,
    pub r: Vec<f64>,
}

impl CellState {
    pub fn zeros(dims: &CellDims) -> Self {
        CellState {
            c: vec![0.0; dims.cell],
            r: vec![0.0; dims.rec_proj],
        }
    }
}

/// Additive pre-activation terms per sink, indexed by [`Sink::index`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SinkInjection(pub [Option<Vec<f64>>; 4]);

impl SinkInjection {
    pub fn none() -> Self {
        SinkInjection::default()
    }

    pub fn with(mut self, sink: Sink, v: Vec<f64>) -> Self {
        self.0[sink.index()] = Some(v);
        self
    }

    pub fn get(&self, sink: Sink) -> Option<&[f64]> {
        self.0[sink.index()].as_deref()
    }
}

/// Everything the backward pass needs from one forward step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepCache {
    pub x: Vec<f64>,
    pub c_prev: Vec<f64>,
    pub r_prev: Vec<f64>,
    pub a_i: Vec<f64>,
    pub a_f: Vec<f64>,
    pub a_g: Vec<f64>,
    pub a_o: Vec<f64>,
    pub i: Vec<f64>,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub o: Vec<f64>,
    pub c: Vec<f64>,
    pub tanh_c: Vec<f64>,
    pub m: Vec<f64>,
    pub r: Vec<f64>,
    pub p: Vec<f64>,
    pub injection: SinkInjection,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub state: CellState,
    pub m: Vec<f64>,
    pub r: Vec<f64>,
    pub p: Vec<f64>,
    pub pre_y: Vec<f64>,
}

fn check_len(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::dim(context, expected, got));
    }
    Ok(())
}

fn affine(
    wx: &Mat,
    x: &[f64],
    wr: &Mat,
    r_prev: &[f64],
    b: &[f64],
    inj: Option<&[f64]>,
) -> Vec<f64> {
    let mut a = b.to_vec();
    wx.mul_vec_acc(x, &mut a);
    wr.mul_vec_acc(r_prev, &mut a);
    if let Some(inj) = inj {
        for (a, v) in a.iter_mut().zip(inj) {
            *a += v;
        }
    }
    a
}

/// Runs one time step.
pub fn cell_forward(
    params: &CellParams,
    x: &[f64],
    state: &CellState,
    inj: &SinkInjection,
) -> Result<(StepOutput, StepCache)> {
    let d = &params.dims;
    check_len("cell_forward input", d.input, x.len())?;
    check_len("cell_forward previous cell", d.cell, state.c.len())?;
    check_len("cell_forward previous projection", d.rec_proj, state.r.len())?;
    for sink in Sink::ALL {
        if let Some(v) = inj.get(sink) {
            check_len("cell_forward injection", d.cell, v.len())?;
        }
    }

    let c_prev = &state.c;
    let r_prev = &state.r;

    let mut a_i = affine(&params.w_ix, x, &params.w_ir, r_prev, &params.b_i, inj.get(Sink::I));
    let mut a_f = affine(&params.w_fx, x, &params.w_fr, r_prev, &params.b_f, inj.get(Sink::F));
    for k in 0..d.cell {
        a_i[k] += params.w_ic[k] * c_prev[k];
        a_f[k] += params.w_fc[k] * c_prev[k];
    }
    let a_g = affine(&params.w_cx, x, &params.w_cr, r_prev, &params.b_c, inj.get(Sink::G));

    let i: Vec<f64> = a_i.iter().map(|&v| sigmoid(v)).collect();
    let f: Vec<f64> = a_f.iter().map(|&v| sigmoid(v)).collect();
    let g: Vec<f64> = a_g.iter().map(|&v| v.tanh()).collect();
    let c: Vec<f64> = (0..d.cell).map(|k| f[k] * c_prev[k] + i[k] * g[k]).collect();

    let mut a_o = affine(&params.w_ox, x, &params.w_or, r_prev, &params.b_o, inj.get(Sink::O));
    for k in 0..d.cell {
        a_o[k] += params.w_oc[k] * c[k];
    }
    let o: Vec<f64> = a_o.iter().map(|&v| sigmoid(v)).collect();
    let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
    let m: Vec<f64> = o.iter().zip(&tanh_c).map(|(o, h)| o * h).collect();

    let mut r = vec![0.0; d.rec_proj];
    params.w_rm.mul_vec_acc(&m, &mut r);
    let mut p = vec![0.0; d.nonrec_proj];
    params.w_pm.mul_vec_acc(&m, &mut p);
    let mut pre_y = params.b_y.clone();
    params.w_yr.mul_vec_acc(&r, &mut pre_y);
    params.w_yp.mul_vec_acc(&p, &mut pre_y);

    let out = StepOutput {
        state: CellState {
            c: c.clone(),
            r: r.clone(),
        },
        m: m.clone(),
        r: r.clone(),
        p: p.clone(),
        pre_y,
    };
    let cache = StepCache {
        x: x.to_vec(),
        c_prev: c_prev.clone(),
        r_prev: r_prev.clone(),
        a_i,
        a_f,
        a_g,
        a_o,
        i,
        f,
        g,
        o,
        c,
        tanh_c,
        m,
        r,
        p,
        injection: inj.clone(),
    };
    Ok((out, cache))
}

/// Loss gradients arriving at one step's outputs. Any field may be left
/// empty, which is read as zero.
#[derive(Debug, Clone, Default)]
pub struct StepUpstream {
    /// From step t+1 through the cell-state recurrence.
    pub d_c_next: Vec<f64>,
    /// From step t+1 through the recurrent projection.
    pub d_r_next: Vec<f64>,
    pub d_m: Vec<f64>,
    pub d_r: Vec<f64>,
    pub d_p: Vec<f64>,
    pub d_y: Vec<f64>,
}

/// Gradients flowing out of one step, besides the parameter gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct StepGrads {
    pub d_x: Vec<f64>,
    pub d_c_prev: Vec<f64>,
    pub d_r_prev: Vec<f64>,
    /// Gradient at each sink's pre-activation, indexed by [`Sink::index`].
    pub d_sink: [Vec<f64>; 4],
}

fn add_opt(dst: &mut [f64], src: &[f64], context: &'static str) -> Result<()> {
    if src.is_empty() {
        return Ok(());
    }
    check_len(context, dst.len(), src.len())?;
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
    Ok(())
}

fn check_cache(params: &CellParams, cache: &StepCache) -> Result<()> {
    let d = &params.dims;
    let ok = cache.x.len() == d.input
        && cache.c.len() == d.cell
        && cache.c_prev.len() == d.cell
        && cache.r_prev.len() == d.rec_proj
        && cache.r.len() == d.rec_proj
        && cache.p.len() == d.nonrec_proj;
    if !ok {
        return Err(Error::dim(
            "cell_backward cache",
            format!("{d:?}"),
            format!(
                "x {}, c {}, r {}, p {}",
                cache.x.len(),
                cache.c.len(),
                cache.r.len(),
                cache.p.len()
            ),
        ));
    }
    Ok(())
}

/// Backward pass of one step. Parameter gradients are accumulated into
/// `grads`, which must have the same dims as `params`.
pub fn cell_backward(
    params: &CellParams,
    cache: &StepCache,
    up: &StepUpstream,
    grads: &mut CellParams,
) -> Result<StepGrads> {
    check_cache(params, cache)?;
    if grads.dims != params.dims {
        return Err(Error::dim("cell_backward gradient buffer", format!("{:?}", params.dims), format!("{:?}", grads.dims)));
    }
    let d = params.dims;
    let nc = d.cell;

    let mut d_y = vec![0.0; d.output];
    add_opt(&mut d_y, &up.d_y, "cell_backward d_y")?;
    let mut d_r = vec![0.0; d.rec_proj];
    add_opt(&mut d_r, &up.d_r, "cell_backward d_r")?;
    add_opt(&mut d_r, &up.d_r_next, "cell_backward d_r_next")?;
    let mut d_p = vec![0.0; d.nonrec_proj];
    add_opt(&mut d_p, &up.d_p, "cell_backward d_p")?;
    let mut d_m = vec![0.0; nc];
    add_opt(&mut d_m, &up.d_m, "cell_backward d_m")?;
    let mut d_c = vec![0.0; nc];
    add_opt(&mut d_c, &up.d_c_next, "cell_backward d_c_next")?;

    // output layer
    grads.w_yr.add_outer(&d_y, &cache.r);
    grads.w_yp.add_outer(&d_y, &cache.p);
    for (g, v) in grads.b_y.iter_mut().zip(&d_y) {
        *g += v;
    }
    params.w_yr.t_mul_vec_acc(&d_y, &mut d_r);
    params.w_yp.t_mul_vec_acc(&d_y, &mut d_p);

    // projections
    grads.w_rm.add_outer(&d_r, &cache.m);
    grads.w_pm.add_outer(&d_p, &cache.m);
    params.w_rm.t_mul_vec_acc(&d_r, &mut d_m);
    params.w_pm.t_mul_vec_acc(&d_p, &mut d_m);

    // output gate and cell
    let mut da_o = vec![0.0; nc];
    for k in 0..nc {
        let o = cache.o[k];
        da_o[k] = d_m[k] * cache.tanh_c[k] * o * (1.0 - o);
        let h = cache.tanh_c[k];
        d_c[k] += d_m[k] * o * (1.0 - h * h) + da_o[k] * params.w_oc[k];
        grads.w_oc[k] += da_o[k] * cache.c[k];
    }

    let mut da_i = vec![0.0; nc];
    let mut da_f = vec![0.0; nc];
    let mut da_g = vec![0.0; nc];
    let mut d_c_prev = vec![0.0; nc];
    for k in 0..nc {
        let (i, f, g) = (cache.i[k], cache.f[k], cache.g[k]);
        da_i[k] = d_c[k] * g * i * (1.0 - i);
        da_f[k] = d_c[k] * cache.c_prev[k] * f * (1.0 - f);
        da_g[k] = d_c[k] * i * (1.0 - g * g);
        d_c_prev[k] = d_c[k] * f + da_i[k] * params.w_ic[k] + da_f[k] * params.w_fc[k];
        grads.w_ic[k] += da_i[k] * cache.c_prev[k];
        grads.w_fc[k] += da_f[k] * cache.c_prev[k];
    }

    let mut d_x = vec![0.0; d.input];
    let mut d_r_prev = vec![0.0; d.rec_proj];
    let gates: [(&[f64], &Mat, &Mat); 4] = [
        (&da_i, &params.w_ix, &params.w_ir),
        (&da_f, &params.w_fx, &params.w_fr),
        (&da_g, &params.w_cx, &params.w_cr),
        (&da_o, &params.w_ox, &params.w_or),
    ];
    for (da, wx, wr) in gates {
        wx.t_mul_vec_acc(da, &mut d_x);
        wr.t_mul_vec_acc(da, &mut d_r_prev);
    }
    grads.w_ix.add_outer(&da_i, &cache.x);
    grads.w_fx.add_outer(&da_f, &cache.x);
    grads.w_cx.add_outer(&da_g, &cache.x);
    grads.w_ox.add_outer(&da_o, &cache.x);
    grads.w_ir.add_outer(&da_i, &cache.r_prev);
    grads.w_fr.add_outer(&da_f, &cache.r_prev);
    grads.w_cr.add_outer(&da_g, &cache.r_prev);
    grads.w_or.add_outer(&da_o, &cache.r_prev);
    for k in 0..nc {
        grads.b_i[k] += da_i[k];
        grads.b_f[k] += da_f[k];
        grads.b_c[k] += da_g[k];
        grads.b_o[k] += da_o[k];
    }

    Ok(StepGrads {
        d_x,
        d_c_prev,
        d_r_prev,
        d_sink: [da_i, da_f, da_o, da_g],
    })
}
