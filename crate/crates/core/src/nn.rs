//! Stacked GRU with a linear per-step readout, trained by backpropagation
//! through time.
//!
//! Cell update, with `*` the elementwise product:
//!
//! ```text
//! z  = sigmoid(W_z x + U_z h + b_z)
//! r  = sigmoid(W_r x + U_r h + b_r)
//! h' = tanh(W_h x + U_h (r * h) + b_h)
//! h  <- z * h + (1 - z) * h'
//! ```
//!
//! Zero biases give the bias-free form. Inverted dropout is applied to the
//! output sequence of every layer that feeds another layer, in training mode
//! only.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// `out += self * x`
    #[inline]
    fn gemv_acc(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols)) {
            *o += dot(row, x);
        }
    }

    /// `out += self^T * d`
    #[inline]
    fn gemv_t_acc(&self, d: &[f64], out: &mut [f64]) {
        for (&di, row) in d.iter().zip(self.data.chunks_exact(self.cols)) {
            if di != 0.0 {
                axpy(di, row, out);
            }
        }
    }

    /// `self += d x^T`
    #[inline]
    fn rank1_acc(&mut self, d: &[f64], x: &[f64]) {
        let cols = self.cols;
        for (&di, row) in d.iter().zip(self.data.chunks_exact_mut(cols)) {
            if di != 0.0 {
                axpy(di, x, row);
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GruCellParams {
    pub w_z: Matrix,
    pub w_r: Matrix,
    pub w_h: Matrix,
    pub u_z: Matrix,
    pub u_r: Matrix,
    pub u_h: Matrix,
    pub b_z: Vec<f64>,
    pub b_r: Vec<f64>,
    pub b_h: Vec<f64>,
}

impl GruCellParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        GruCellParams {
            w_z: Matrix::zeros(hidden, input),
            w_r: Matrix::zeros(hidden, input),
            w_h: Matrix::zeros(hidden, input),
            u_z: Matrix::zeros(hidden, hidden),
            u_r: Matrix::zeros(hidden, hidden),
            u_h: Matrix::zeros(hidden, hidden),
            b_z: vec![0.0; hidden],
            b_r: vec![0.0; hidden],
            b_h: vec![0.0; hidden],
        }
    }

    pub fn input_size(&self) -> usize {
        self.w_z.cols
    }

    pub fn hidden_size(&self) -> usize {
        self.u_z.rows
    }

    fn check_shapes(&self) -> Result<()> {
        let (i, h) = (self.input_size(), self.hidden_size());
        let mats_ok = [&self.w_z, &self.w_r, &self.w_h]
            .iter()
            .all(|m| m.rows == h && m.cols == i)
            && [&self.u_z, &self.u_r, &self.u_h]
                .iter()
                .all(|m| m.rows == h && m.cols == h);
        let bias_ok = [&self.b_z, &self.b_r, &self.b_h].iter().all(|b| b.len() == h);
        if mats_ok && bias_ok {
            Ok(())
        } else {
            Err(Error::ShapeMismatch("inconsistent GRU cell parameter shapes".into()))
        }
    }

    fn tensors(&self) -> [(&'static str, &Matrix); 6] {
        [
            ("w_z", &self.w_z),
            ("w_r", &self.w_r),
            ("w_h", &self.w_h),
            ("u_z", &self.u_z),
            ("u_r", &self.u_r),
            ("u_h", &self.u_h),
        ]
    }
}

/// Intermediate values of one cell step, kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct CellCache {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub z: Vec<f64>,
    pub r: Vec<f64>,
    pub candidate: Vec<f64>,
}

/// Gradients of one cell step with respect to its inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct CellInputGrads {
    pub dx: Vec<f64>,
    pub dh_prev: Vec<f64>,
}

/// Scratch buffers for one step; all slices have the hidden size except `x`.
struct StepOut<'a> {
    z: &'a mut [f64],
    r: &'a mut [f64],
    cand: &'a mut [f64],
    rh: &'a mut [f64],
    h: &'a mut [f64],
}

fn cell_step(p: &GruCellParams, x: &[f64], h_prev: &[f64], out: StepOut<'_>) {
    out.z.copy_from_slice(&p.b_z);
    p.w_z.gemv_acc(x, out.z);
    p.u_z.gemv_acc(h_prev, out.z);
    out.r.copy_from_slice(&p.b_r);
    p.w_r.gemv_acc(x, out.r);
    p.u_r.gemv_acc(h_prev, out.r);
    for (zi, ri) in out.z.iter_mut().zip(out.r.iter_mut()) {
        *zi = sigmoid(*zi);
        *ri = sigmoid(*ri);
    }
    for ((rh, r), h) in out.rh.iter_mut().zip(out.r.iter()).zip(h_prev) {
        *rh = r * h;
    }
    out.cand.copy_from_slice(&p.b_h);
    p.w_h.gemv_acc(x, out.cand);
    p.u_h.gemv_acc(out.rh, out.cand);
    for (((h, c), z), hp) in out.h.iter_mut().zip(out.cand.iter_mut()).zip(out.z.iter()).zip(h_prev) {
        *c = c.tanh();
        *h = z * hp + (1.0 - z) * *c;
    }
}

/// Scratch for a backward step, sized to the hidden width.
struct BackScratch {
    dz: Vec<f64>,
    dr: Vec<f64>,
    dc: Vec<f64>,
    drh: Vec<f64>,
}

impl BackScratch {
    fn new(hidden: usize) -> Self {
        BackScratch {
            dz: vec![0.0; hidden],
            dr: vec![0.0; hidden],
            dc: vec![0.0; hidden],
            drh: vec![0.0; hidden],
        }
    }
}

/// Backward through one step. Accumulates parameter gradients into `grads`,
/// adds the input gradient into `dx` and writes the recurrent gradient into
/// `dh_prev` (overwriting it).
#[allow(clippy::too_many_arguments)]
fn cell_step_backward(
    p: &GruCellParams,
    grads: &mut GruCellParams,
    x: &[f64],
    h_prev: &[f64],
    z: &[f64],
    r: &[f64],
    cand: &[f64],
    rh: &[f64],
    dh: &[f64],
    dx: &mut [f64],
    dh_prev: &mut [f64],
    s: &mut BackScratch,
) {
    for i in 0..dh.len() {
        let g = dh[i];
        // pre-activation gradients of the update gate and the candidate
        s.dz[i] = g * (h_prev[i] - cand[i]) * z[i] * (1.0 - z[i]);
        s.dc[i] = g * (1.0 - z[i]) * (1.0 - cand[i] * cand[i]);
        dh_prev[i] = g * z[i];
        s.drh[i] = 0.0;
    }
    p.u_h.gemv_t_acc(&s.dc, &mut s.drh);
    for i in 0..dh.len() {
        s.dr[i] = s.drh[i] * h_prev[i] * r[i] * (1.0 - r[i]);
        dh_prev[i] += s.drh[i] * r[i];
    }

    grads.w_h.rank1_acc(&s.dc, x);
    grads.u_h.rank1_acc(&s.dc, rh);
    axpy(1.0, &s.dc, &mut grads.b_h);
    grads.w_z.rank1_acc(&s.dz, x);
    grads.u_z.rank1_acc(&s.dz, h_prev);
    axpy(1.0, &s.dz, &mut grads.b_z);
    grads.w_r.rank1_acc(&s.dr, x);
    grads.u_r.rank1_acc(&s.dr, h_prev);
    axpy(1.0, &s.dr, &mut grads.b_r);

    p.w_z.gemv_t_acc(&s.dz, dx);
    p.w_r.gemv_t_acc(&s.dr, dx);
    p.w_h.gemv_t_acc(&s.dc, dx);
    p.u_z.gemv_t_acc(&s.dz, dh_prev);
    p.u_r.gemv_t_acc(&s.dr, dh_prev);
}

pub fn gru_cell_forward(p: &GruCellParams, x: &[f64], h_prev: &[f64]) -> Result<(Vec<f64>, CellCache)> {
    p.check_shapes()?;
    let hidden = p.hidden_size();
    if x.len() != p.input_size() || h_prev.len() != hidden {
        return Err(Error::ShapeMismatch(format!(
            "cell expects input {} and hidden {}, got {} and {}",
            p.input_size(),
            hidden,
            x.len(),
            h_prev.len()
        )));
    }
    let (mut z, mut r, mut cand, mut rh, mut h) = (
        vec![0.0; hidden],
        vec![0.0; hidden],
        vec![0.0; hidden],
        vec![0.0; hidden],
        vec![0.0; hidden],
    );
    cell_step(
        p,
        x,
        h_prev,
        StepOut {
            z: &mut z,
            r: &mut r,
            cand: &mut cand,
            rh: &mut rh,
            h: &mut h,
        },
    );
    let cache = CellCache {
        x: x.to_vec(),
        h_prev: h_prev.to_vec(),
        z,
        r,
        candidate: cand,
    };
    Ok((h, cache))
}

/// Backward through a single cell step; parameter gradients are accumulated
/// into `grads`.
pub fn gru_cell_backward(
    p: &GruCellParams,
    cache: &CellCache,
    dh: &[f64],
    grads: &mut GruCellParams,
) -> Result<CellInputGrads> {
    let hidden = p.hidden_size();
    if dh.len() != hidden || cache.z.len() != hidden || cache.x.len() != p.input_size() {
        return Err(Error::CacheMismatch("cell cache does not match parameters".into()));
    }
    let rh: Vec<f64> = cache.r.iter().zip(&cache.h_prev).map(|(r, h)| r * h).collect();
    let mut dx = vec![0.0; p.input_size()];
    let mut dh_prev = vec![0.0; hidden];
    cell_step_backward(
        p,
        grads,
        &cache.x,
        &cache.h_prev,
        &cache.z,
        &cache.r,
        &cache.candidate,
        &rh,
        dh,
        &mut dx,
        &mut dh_prev,
        &mut BackScratch::new(hidden),
    );
    Ok(CellInputGrads { dx, dh_prev })
}

/// Layer sizes of a [`GruNetwork`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSizes {
    pub n_inputs: usize,
    pub hidden: usize,
    pub n_layers: usize,
    pub n_outputs: usize,
}

impl Default for NetworkSizes {
    fn default() -> Self {
        NetworkSizes {
            n_inputs: 4,
            hidden: 64,
            n_layers: 2,
            n_outputs: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GruNetwork {
    pub layers: Vec<GruCellParams>,
    pub head_w: Matrix,
    pub head_b: Vec<f64>,
    pub dropout: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-layer trace of a forward pass, stored as flat `[T x width]` arrays.
#[derive(Debug, Clone)]
struct LayerTrace {
    /// Inputs actually seen by the layer (after dropout for upper layers).
    inputs: Vec<f64>,
    /// Hidden states `h_0..h_T`, `(T + 1) x hidden`.
    hidden: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    cand: Vec<f64>,
    rh: Vec<f64>,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    steps: usize,
    layers: Vec<LayerTrace>,
    /// Dropout scale factors applied to the output of layer `l`, `T x hidden`.
    masks: Vec<Option<Vec<f64>>>,
}

impl ForwardCache {
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Hidden state of `layer` after step `t` (0-based).
    pub fn hidden_state(&self, layer: usize, t: usize) -> &[f64] {
        let trace = &self.layers[layer];
        let h = trace.z.len() / self.steps;
        &trace.hidden[(t + 1) * h..(t + 2) * h]
    }

    /// Largest absolute hidden-state coordinate over all layers and steps.
    pub fn max_abs_hidden(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.hidden.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Network outputs, `T x n_outputs` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Outputs {
    pub steps: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Outputs {
    pub fn zeros(steps: usize, width: usize) -> Self {
        Outputs {
            steps,
            width,
            data: vec![0.0; steps * width],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::ShapeMismatch("ragged rows".into()));
        }
        Ok(Outputs {
            steps: rows.len(),
            width,
            data: rows.iter().flatten().copied().collect(),
        })
    }

    #[inline]
    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.width..(t + 1) * self.width]
    }

    #[inline]
    pub fn row_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.data[t * self.width..(t + 1) * self.width]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.steps).map(|t| self.data[t * self.width + c]).collect()
    }
}

impl GruNetwork {
    /// A network with every parameter zero.
    pub fn zeros(sizes: NetworkSizes, dropout: f64) -> Self {
        let layers = (0..sizes.n_layers)
            .map(|l| {
                let input = if l == 0 { sizes.n_inputs } else { sizes.hidden };
                GruCellParams::zeros(input, sizes.hidden)
            })
            .collect();
        GruNetwork {
            layers,
            head_w: Matrix::zeros(sizes.n_outputs, sizes.hidden),
            head_b: vec![0.0; sizes.n_outputs],
            dropout,
        }
    }

    pub fn zeros_like(&self) -> Self {
        GruNetwork::zeros(self.sizes(), self.dropout)
    }

    pub fn sizes(&self) -> NetworkSizes {
        NetworkSizes {
            n_inputs: self.layers.first().map_or(0, |l| l.input_size()),
            hidden: self.head_w.cols,
            n_layers: self.layers.len(),
            n_outputs: self.head_w.rows,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::ShapeMismatch("network has no layers".into()));
        }
        let hidden = self.head_w.cols;
        for (l, p) in self.layers.iter().enumerate() {
            p.check_shapes()?;
            if p.hidden_size() != hidden || (l > 0 && p.input_size() != hidden) {
                return Err(Error::ShapeMismatch(format!("layer {l} does not match hidden size {hidden}")));
            }
        }
        if self.head_b.len() != self.head_w.rows {
            return Err(Error::ShapeMismatch("head bias length".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidParameter(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }

    /// Named parameter tensors with their shapes, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        for (l, p) in self.layers.iter().enumerate() {
            for (name, m) in p.tensors() {
                out.push((format!("layers.{l}.{name}"), vec![m.rows, m.cols], m.data.as_slice()));
            }
            for (name, b) in [("b_z", &p.b_z), ("b_r", &p.b_r), ("b_h", &p.b_h)] {
                out.push((format!("layers.{l}.{name}"), vec![b.len()], b.as_slice()));
            }
        }
        out.push(("head.w".into(), vec![self.head_w.rows, self.head_w.cols], &self.head_w.data));
        out.push(("head.b".into(), vec![self.head_b.len()], &self.head_b));
        out
    }

    /// Mutable views of the parameter tensors, in the order of [`tensors`](Self::tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for p in &mut self.layers {
            out.push(&mut p.w_z.data);
            out.push(&mut p.w_r.data);
            out.push(&mut p.w_h.data);
            out.push(&mut p.u_z.data);
            out.push(&mut p.u_r.data);
            out.push(&mut p.u_h.data);
            out.push(&mut p.b_z);
            out.push(&mut p.b_r);
            out.push(&mut p.b_h);
        }
        out.push(&mut self.head_w.data);
        out.push(&mut self.head_b);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, _, t)| t.len()).sum()
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, _, t)| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// `self += factor * other`
    pub fn add_scaled(&mut self, other: &GruNetwork, factor: f64) -> Result<()> {
        let theirs = other.tensors();
        let mine = self.tensors_mut();
        if theirs.len() != mine.len() || theirs.iter().zip(&mine).any(|((_, _, a), b)| a.len() != b.len()) {
            return Err(Error::ShapeMismatch("networks have different shapes".into()));
        }
        for ((_, _, src), dst) in theirs.iter().zip(mine) {
            axpy(factor, src, dst);
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, _, t)| t.iter().all(|v| v.is_finite()))
    }
}

/// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` weights, zero biases.
pub fn init_network(seed: u64, sizes: NetworkSizes, dropout: f64) -> GruNetwork {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = GruNetwork::zeros(sizes, dropout);
    let mut fill = |m: &mut Matrix| {
        let bound = 1.0 / (m.cols as f64).sqrt();
        for v in &mut m.data {
            *v = rng.random_range(-bound..=bound);
        }
    };
    for p in &mut net.layers {
        for m in [&mut p.w_z, &mut p.w_r, &mut p.w_h, &mut p.u_z, &mut p.u_r, &mut p.u_h] {
            fill(m);
        }
    }
    fill(&mut net.head_w);
    net
}

fn dropout_mask(rng: &mut ChaCha8Rng, len: usize, p: f64) -> Vec<f64> {
    let keep = 1.0 - p;
    let scale = 1.0 / keep;
    (0..len)
        .map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 })
        .collect()
}

/// Runs the network over a `T x n_inputs` sequence from zero initial states.
/// In train mode a dropout mask is drawn from `rng_seed`.
pub fn network_forward(
    net: &GruNetwork,
    seq: &Outputs,
    mode: Mode,
    rng_seed: u64,
) -> Result<(Outputs, ForwardCache)> {
    net.validate()?;
    let sizes = net.sizes();
    if seq.width != sizes.n_inputs {
        return Err(Error::ShapeMismatch(format!(
            "network expects {} input channels, got {}",
            sizes.n_inputs, seq.width
        )));
    }
    if seq.steps == 0 {
        return Err(Error::ShapeMismatch("empty input sequence".into()));
    }
    let steps = seq.steps;
    let h = sizes.hidden;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut layers = Vec::with_capacity(net.layers.len());
    let mut masks = Vec::with_capacity(net.layers.len());
    let mut inputs = seq.data.clone();

    for (l, p) in net.layers.iter().enumerate() {
        let width = p.input_size();
        let mut trace = LayerTrace {
            inputs,
            hidden: vec![0.0; (steps + 1) * h],
            z: vec![0.0; steps * h],
            r: vec![0.0; steps * h],
            cand: vec![0.0; steps * h],
            rh: vec![0.0; steps * h],
        };
        for t in 0..steps {
            let (prev, next) = trace.hidden.split_at_mut((t + 1) * h);
            let span = t * h..(t + 1) * h;
            cell_step(
                p,
                &trace.inputs[t * width..(t + 1) * width],
                &prev[t * h..],
                StepOut {
                    z: &mut trace.z[span.clone()],
                    r: &mut trace.r[span.clone()],
                    cand: &mut trace.cand[span.clone()],
                    rh: &mut trace.rh[span],
                    h: &mut next[..h],
                },
            );
        }
        let mut next_inputs = trace.hidden[h..].to_vec();
        let is_last = l + 1 == net.layers.len();
        let mask = if mode == Mode::Train && !is_last && net.dropout > 0.0 {
            let mask = dropout_mask(&mut rng, steps * h, net.dropout);
            next_inputs.iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
            Some(mask)
        } else {
            None
        };
        masks.push(mask);
        layers.push(trace);
        inputs = next_inputs;
    }

    let mut out = Outputs::zeros(steps, sizes.n_outputs);
    for t in 0..steps {
        let row = out.row_mut(t);
        row.copy_from_slice(&net.head_b);
        net.head_w.gemv_acc(&inputs[t * h..(t + 1) * h], row);
    }
    Ok((
        out,
        ForwardCache {
            steps,
            layers,
            masks,
        },
    ))
}

/// Backpropagation through time for the per-step output gradients `d_outputs`.
pub fn network_backward(net: &GruNetwork, cache: &ForwardCache, d_outputs: &Outputs) -> Result<GruNetwork> {
    let sizes = net.sizes();
    let steps = cache.steps;
    let h = sizes.hidden;
    if cache.layers.len() != net.layers.len()
        || cache.layers.iter().any(|l| l.z.len() != steps * h)
        || cache.layers[0].inputs.len() != steps * sizes.n_inputs
    {
        return Err(Error::CacheMismatch("forward cache was produced by a different network".into()));
    }
    if d_outputs.steps != steps || d_outputs.width != sizes.n_outputs {
        return Err(Error::ShapeMismatch(format!(
            "output gradient is {}x{}, expected {}x{}",
            d_outputs.steps, d_outputs.width, steps, sizes.n_outputs
        )));
    }
    let mut grads = net.zeros_like();

    // gradient w.r.t. the top layer's hidden sequence, from the head
    let top = cache.layers.last().expect("validated non-empty");
    let mut d_seq = vec![0.0; steps * h];
    for t in 0..steps {
        let dy = d_outputs.row(t);
        let h_t = &top.hidden[(t + 1) * h..(t + 2) * h];
        grads.head_w.rank1_acc(dy, h_t);
        axpy(1.0, dy, &mut grads.head_b);
        net.head_w.gemv_t_acc(dy, &mut d_seq[t * h..(t + 1) * h]);
    }

    let mut scratch = BackScratch::new(h);
    for l in (0..net.layers.len()).rev() {
        let p = &net.layers[l];
        let g = &mut grads.layers[l];
        let trace = &cache.layers[l];
        let width = p.input_size();
        let mut d_in = vec![0.0; steps * width];
        let mut dh_next = vec![0.0; h];
        let mut dh_prev = vec![0.0; h];
        let mut dh = vec![0.0; h];
        for t in (0..steps).rev() {
            let span = t * h..(t + 1) * h;
            for ((d, a), b) in dh.iter_mut().zip(&d_seq[span.clone()]).zip(&dh_next) {
                *d = a + b;
            }
            cell_step_backward(
                p,
                g,
                &trace.inputs[t * width..(t + 1) * width],
                &trace.hidden[t * h..(t + 1) * h],
                &trace.z[span.clone()],
                &trace.r[span.clone()],
                &trace.cand[span.clone()],
                &trace.rh[span],
                &dh,
                &mut d_in[t * width..(t + 1) * width],
                &mut dh_prev,
                &mut scratch,
            );
            std::mem::swap(&mut dh_next, &mut dh_prev);
        }
        if l > 0 {
            if let Some(mask) = &cache.masks[l - 1] {
                d_in.iter_mut().zip(mask).for_each(|(d, m)| *d *= m);
            }
            d_seq = d_in;
        }
    }
    Ok(grads)
}

/// Rescales `grads` so its global L2 norm is at most `max_norm`. Returns the
/// norm before clipping when clipping happened.
pub fn clip_global_norm(grads: &mut GruNetwork, max_norm: f64) -> Option<f64> {
    let norm = grads.global_norm();
    if norm > max_norm && norm.is_finite() {
        grads.scale(max_norm / norm);
        Some(norm)
    } else {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moment accumulators, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step_count: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, shapes: &[usize]) -> Self {
        AdamState {
            config,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step_count: 0,
        }
    }

    pub fn for_network(config: AdamConfig, net: &GruNetwork) -> Self {
        let lens: Vec<usize> = net.tensors().iter().map(|(_, _, t)| t.len()).collect();
        Self::new(config, &lens)
    }

    /// One bias-corrected Adam update over matching parameter and gradient tensors.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        let shapes_ok = params.len() == self.m.len()
            && grads.len() == self.m.len()
            && params
                .iter()
                .zip(grads)
                .zip(&self.m)
                .all(|((p, g), m)| p.len() == m.len() && g.len() == m.len());
        if !shapes_ok {
            return Err(Error::ShapeMismatch("Adam state does not match parameters".into()));
        }
        self.step_count += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - beta2.powi(self.step_count as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

pub fn adam_step(net: &mut GruNetwork, grads: &GruNetwork, state: &mut AdamState) -> Result<()> {
    let grad_views: Vec<&[f64]> = grads.tensors().into_iter().map(|(_, _, t)| t).collect();
    let mut params = net.tensors_mut();
    state.step(&mut params, &grad_views)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_sizes() -> NetworkSizes {
        NetworkSizes {
            n_inputs: 3,
            hidden: 4,
            n_layers: 2,
            n_outputs: 7,
        }
    }

    fn random_sequence(seed: u64, steps: usize, width: usize) -> Outputs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Outputs {
            steps,
            width,
            data: (0..steps * width).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    fn randomize_biases(net: &mut GruNetwork, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in &mut net.layers {
            for b in [&mut p.b_z, &mut p.b_r, &mut p.b_h] {
                b.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
            }
        }
        net.head_b.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
    }

    #[test]
    fn zero_cell_gives_half_gates() {
        let p = GruCellParams::zeros(2, 3);
        let (h, cache) = gru_cell_forward(&p, &[0.3, -0.2], &[0.0; 3]).unwrap();
        assert_eq!(h, vec![0.0; 3]);
        assert_eq!(cache.z, vec![0.5; 3]);
        assert_eq!(cache.r, vec![0.5; 3]);
        assert_eq!(cache.candidate, vec![0.0; 3]);
    }

    #[test]
    fn saturated_update_gate_retains_memory() {
        let mut p = init_network(1, NetworkSizes { n_inputs: 2, hidden: 3, n_layers: 1, n_outputs: 1 }, 0.0)
            .layers
            .remove(0);
        p.b_z = vec![50.0; 3];
        let h_prev = [0.4, -0.7, 0.1];
        let (h, _) = gru_cell_forward(&p, &[0.9, -0.3], &h_prev).unwrap();
        for (a, b) in h.iter().zip(&h_prev) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cell_matches_straight_line_reference() {
        let mut net = init_network(7, NetworkSizes { n_inputs: 2, hidden: 3, n_layers: 1, n_outputs: 1 }, 0.0);
        randomize_biases(&mut net, 8);
        let p = &net.layers[0];
        let x = [0.25, -0.8];
        let hp = [0.1, -0.3, 0.6];
        let (h, _) = gru_cell_forward(p, &x, &hp).unwrap();

        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut expected = [0.0; 3];
        let mut r = [0.0; 3];
        let mut z = [0.0; 3];
        for i in 0..3 {
            let mut az = p.b_z[i];
            let mut ar = p.b_r[i];
            for j in 0..2 {
                az += p.w_z.get(i, j) * x[j];
                ar += p.w_r.get(i, j) * x[j];
            }
            for j in 0..3 {
                az += p.u_z.get(i, j) * hp[j];
                ar += p.u_r.get(i, j) * hp[j];
            }
            z[i] = sig(az);
            r[i] = sig(ar);
        }
        for i in 0..3 {
            let mut ah = p.b_h[i];
            for j in 0..2 {
                ah += p.w_h.get(i, j) * x[j];
            }
            for j in 0..3 {
                ah += p.u_h.get(i, j) * r[j] * hp[j];
            }
            expected[i] = z[i] * hp[i] + (1.0 - z[i]) * ah.tanh();
        }
        for i in 0..3 {
            assert!((h[i] - expected[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn cell_rejects_bad_shapes() {
        let p = GruCellParams::zeros(2, 3);
        assert!(matches!(gru_cell_forward(&p, &[0.0; 3], &[0.0; 3]), Err(Error::ShapeMismatch(_))));
        assert!(matches!(gru_cell_forward(&p, &[0.0; 2], &[0.0; 2]), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn cell_backward_matches_finite_differences() {
        let mut net = init_network(3, NetworkSizes { n_inputs: 2, hidden: 3, n_layers: 1, n_outputs: 1 }, 0.0);
        randomize_biases(&mut net, 4);
        let p = net.layers[0].clone();
        let x = [0.5, -0.4];
        let hp = [0.2, -0.1, 0.7];
        let weights = [0.3, -1.1, 0.8];
        let loss = |p: &GruCellParams, x: &[f64], hp: &[f64]| -> f64 {
            let (h, _) = gru_cell_forward(p, x, hp).unwrap();
            h.iter().zip(&weights).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = gru_cell_forward(&p, &x, &hp).unwrap();
        let mut grads = GruCellParams::zeros(2, 3);
        let inputs = gru_cell_backward(&p, &cache, &weights, &mut grads).unwrap();
        let eps = 1e-6;
        for j in 0..3 {
            let (mut up, mut dn) = (hp, hp);
            up[j] += eps;
            dn[j] -= eps;
            let fd = (loss(&p, &x, &up) - loss(&p, &x, &dn)) / (2.0 * eps);
            assert!((fd - inputs.dh_prev[j]).abs() < 1e-8);
        }
        for j in 0..2 {
            let (mut up, mut dn) = (x, x);
            up[j] += eps;
            dn[j] -= eps;
            let fd = (loss(&p, &up, &hp) - loss(&p, &dn, &hp)) / (2.0 * eps);
            assert!((fd - inputs.dx[j]).abs() < 1e-8);
        }
        let mut perturbed = p.clone();
        perturbed.u_h.data[4] += eps;
        let up = loss(&perturbed, &x, &hp);
        perturbed.u_h.data[4] -= 2.0 * eps;
        let dn = loss(&perturbed, &x, &hp);
        assert!(((up - dn) / (2.0 * eps) - grads.u_h.data[4]).abs() < 1e-8);
    }

    #[test]
    fn eval_forward_is_deterministic_and_bounded() {
        let net = init_network(9, NetworkSizes::default(), 0.2);
        let seq = random_sequence(2, 50, 4);
        let (a, cache) = network_forward(&net, &seq, Mode::Eval, 1).unwrap();
        let (b, _) = network_forward(&net, &seq, Mode::Eval, 2).unwrap();
        assert_eq!(a, b);
        assert!(cache.max_abs_hidden() <= 1.0);
    }

    #[test]
    fn train_forward_depends_only_on_dropout_seed() {
        let net = init_network(9, NetworkSizes::default(), 0.2);
        let seq = random_sequence(2, 30, 4);
        let (a, _) = network_forward(&net, &seq, Mode::Train, 5).unwrap();
        let (b, _) = network_forward(&net, &seq, Mode::Train, 5).unwrap();
        let (c, _) = network_forward(&net, &seq, Mode::Train, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn zero_output_gradient_gives_zero_gradients() {
        let net = init_network(4, tiny_sizes(), 0.2);
        let seq = random_sequence(3, 7, 3);
        let (out, cache) = network_forward(&net, &seq, Mode::Train, 0).unwrap();
        let grads = network_backward(&net, &cache, &Outputs::zeros(out.steps, out.width)).unwrap();
        assert_eq!(grads.global_norm(), 0.0);
    }

    #[test]
    fn head_bias_gradient_is_column_sum() {
        let net = init_network(4, tiny_sizes(), 0.0);
        let seq = random_sequence(3, 7, 3);
        let (_, cache) = network_forward(&net, &seq, Mode::Eval, 0).unwrap();
        let d = random_sequence(5, 7, 7);
        let grads = network_backward(&net, &cache, &d).unwrap();
        for c in 0..7 {
            let sum: f64 = d.column(c).iter().sum();
            assert!((grads.head_b[c] - sum).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_rejects_foreign_cache() {
        let net = init_network(4, tiny_sizes(), 0.0);
        let other = init_network(4, NetworkSizes { hidden: 5, ..tiny_sizes() }, 0.0);
        let seq = random_sequence(3, 7, 3);
        let (out, cache) = network_forward(&other, &seq, Mode::Eval, 0).unwrap();
        let d = Outputs::zeros(out.steps, out.width);
        assert!(matches!(network_backward(&net, &cache, &d), Err(Error::CacheMismatch(_))));
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = init_network(42, NetworkSizes::default(), 0.2);
        let b = init_network(42, NetworkSizes::default(), 0.2);
        let c = init_network(43, NetworkSizes::default(), 0.2);
        assert_eq!(a, b);
        assert_ne!(a, c);
        for p in &a.layers {
            for m in [&p.w_z, &p.w_r, &p.w_h, &p.u_z, &p.u_r, &p.u_h] {
                let bound = 1.0 / (m.cols as f64).sqrt();
                assert!(m.data.iter().all(|v| v.abs() <= bound));
            }
            assert!(p.b_z.iter().chain(&p.b_r).chain(&p.b_h).all(|v| *v == 0.0));
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut state = AdamState::new(AdamConfig::default(), &[3]);
        let mut p = vec![1.0, -2.0, 0.5];
        state.step(&mut [&mut p[..]], &[&[0.0, 0.0, 0.0][..]]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        assert_eq!(state.step_count, 1);
    }

    #[test]
    fn adam_first_step_size() {
        let mut state = AdamState::new(AdamConfig::default(), &[1]);
        let mut p = [0.0];
        state.step(&mut [&mut p[..]], &[&[1.0][..]]).unwrap();
        let expected = -1e-4 * (1.0 / (1.0 + 1e-8));
        assert!((p[0] - expected).abs() < 1e-18);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let config = AdamConfig { lr: 1e-2, ..AdamConfig::default() };
        let mut state = AdamState::new(config, &[1]);
        let mut theta = [1.0];
        let mut reached = None;
        for step in 1..=2000 {
            let g = [2.0 * theta[0]];
            state.step(&mut [&mut theta[..]], &[&g[..]]).unwrap();
            if theta[0].abs() < 1e-2 {
                reached = Some(step);
                break;
            }
        }
        assert!(reached.is_some(), "theta = {}", theta[0]);
    }

    #[test]
    fn adam_rejects_mismatched_shapes() {
        let mut state = AdamState::new(AdamConfig::default(), &[2]);
        let mut p = [0.0; 3];
        assert!(state.step(&mut [&mut p[..]], &[&[0.0; 3][..]]).is_err());
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = init_network(1, tiny_sizes(), 0.0);
        g.scale(100.0);
        let before = clip_global_norm(&mut g, 5.0).unwrap();
        assert!(before > 5.0);
        assert!((g.global_norm() - 5.0).abs() < 1e-9);
        assert!(clip_global_norm(&mut g, 10.0).is_none());
    }
}
