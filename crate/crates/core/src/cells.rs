//! The three recurrent cells and their exact reverse-mode steps.
//!
//! Every gate reads the step input, the previous hidden state and (through a
//! diagonal peephole) the previous cell state:
//!
//! ```text
//! pre = Wx·x + Wh·h_prev + p ⊙ c_prev + b
//! ```
//!
//! The candidate keeps its peephole term and the output gate peeks at
//! `c_prev`, not the freshly updated cell.
//!
//! * `Conventional`: one gate set, `c = f⊙c_prev + i⊙g`, `h = o⊙tanh(c)`.
//! * `Glf` (gate-level fusion): horizontal and vertical gate sets see their
//!   own stream; the gates are summed (`i = iᴴ + iⱽ`, ...) before a single
//!   shared state update. Fused gates lie in (0, 2).
//! * `Slf` (state-level fusion): each stream runs a full update from the
//!   shared previous state and the resulting `c` and `h` are summed.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{glorot_uniform, sigmoid_scalar, Matrix, RngStream, Vector};
use crate::params::{join, Parameters, TensorRef};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    #[serde(rename = "conv")]
    Conventional,
    Glf,
    Slf,
}

impl CellKind {
    pub const ALL: [CellKind; 3] = [CellKind::Conventional, CellKind::Glf, CellKind::Slf];

    /// Number of input streams the cell consumes per step.
    pub fn stream_count(self) -> usize {
        match self {
            CellKind::Conventional => 1,
            CellKind::Glf | CellKind::Slf => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CellKind::Conventional => "conv",
            CellKind::Glf => "glf",
            CellKind::Slf => "slf",
        }
    }
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for CellKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv" => Ok(CellKind::Conventional),
            "glf" => Ok(CellKind::Glf),
            "slf" => Ok(CellKind::Slf),
            other => Err(Error::Config(format!(
                "unknown cell `{other}` (valid: conv, glf, slf)"
            ))),
        }
    }
}

/// Weights of one gate: input matrix, recurrent matrix, diagonal peephole, bias.
#[derive(Debug, Clone, PartialEq)]
pub struct GateBlock {
    pub wx: Matrix,
    pub wh: Matrix,
    pub peephole: Vector,
    pub bias: Vector,
}

impl GateBlock {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        GateBlock {
            wx: Matrix::zeros(hidden_dim, input_dim),
            wh: Matrix::zeros(hidden_dim, hidden_dim),
            peephole: Vector::zeros(hidden_dim),
            bias: Vector::zeros(hidden_dim),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.bias.len()
    }

    pub fn input_dim(&self) -> usize {
        self.wx.cols()
    }

    fn check(&self, x: &[f64], prev: &CellState) -> Result<()> {
        let hd = self.hidden_dim();
        if self.wx.rows() != hd
            || self.wh.shape() != (hd, hd)
            || self.peephole.len() != hd
            || self.wx.cols() != x.len()
            || prev.h.len() != hd
            || prev.c.len() != hd
        {
            return Err(Error::shape(
                "gate_preactivation",
                format!(
                    "Wx {:?}, Wh {:?}, peephole {}, bias {}, x {}, h {}, c {}",
                    self.wx.shape(),
                    self.wh.shape(),
                    self.peephole.len(),
                    hd,
                    x.len(),
                    prev.h.len(),
                    prev.c.len()
                ),
            ));
        }
        Ok(())
    }

    fn preactivation_into(&self, x: &[f64], prev: &CellState, out: &mut [f64]) {
        for ((o, b), (p, c)) in out
            .iter_mut()
            .zip(self.bias.iter())
            .zip(self.peephole.iter().zip(prev.c.iter()))
        {
            *o = b + p * c;
        }
        self.wx.matvec_acc(x, out);
        self.wh.matvec_acc(&prev.h, out);
    }

    /// Accumulates the parameter gradients for upstream `dpre` and pushes the
    /// gradient on to the step input and the previous state.
    fn backward(
        &self,
        dpre: &[f64],
        x: &[f64],
        prev: &CellState,
        grad: &mut GateBlock,
        dx: &mut [f64],
        dh_prev: &mut [f64],
        dc_prev: &mut [f64],
    ) {
        grad.wx.outer_acc(dpre, x);
        grad.wh.outer_acc(dpre, &prev.h);
        for k in 0..dpre.len() {
            grad.peephole[k] += dpre[k] * prev.c[k];
            grad.bias[k] += dpre[k];
            dc_prev[k] += dpre[k] * self.peephole[k];
        }
        self.wx.matvec_t_acc(dpre, dx);
        self.wh.matvec_t_acc(dpre, dh_prev);
    }

    fn tensors(&self, prefix: &str) -> Vec<TensorRef<'_>> {
        vec![
            TensorRef {
                name: join(prefix, "wx"),
                shape: vec![self.wx.rows(), self.wx.cols()],
                data: self.wx.as_slice(),
            },
            TensorRef {
                name: join(prefix, "wh"),
                shape: vec![self.wh.rows(), self.wh.cols()],
                data: self.wh.as_slice(),
            },
            TensorRef {
                name: join(prefix, "peephole"),
                shape: vec![self.peephole.len()],
                data: &self.peephole,
            },
            TensorRef {
                name: join(prefix, "bias"),
                shape: vec![self.bias.len()],
                data: &self.bias,
            },
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.wx.as_mut_slice(),
            self.wh.as_mut_slice(),
            &mut self.peephole,
            &mut self.bias,
        ]
    }
}

/// `Wx·x + Wh·prev.h + peephole ⊙ prev.c + b`.
pub fn gate_preactivation(g: &GateBlock, x: &[f64], prev: &CellState) -> Result<Vector> {
    g.check(x, prev)?;
    let mut out = Vector::zeros(g.hidden_dim());
    g.preactivation_into(x, prev, &mut out);
    Ok(out)
}

/// The four gates of one stream, in the order input, candidate, forget, output.
#[derive(Debug, Clone, PartialEq)]
pub struct GateSet {
    pub input: GateBlock,
    pub candidate: GateBlock,
    pub forget: GateBlock,
    pub output: GateBlock,
}

impl GateSet {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        GateSet {
            input: GateBlock::zeros(input_dim, hidden_dim),
            candidate: GateBlock::zeros(input_dim, hidden_dim),
            forget: GateBlock::zeros(input_dim, hidden_dim),
            output: GateBlock::zeros(input_dim, hidden_dim),
        }
    }

    pub fn blocks(&self) -> [&GateBlock; 4] {
        [&self.input, &self.candidate, &self.forget, &self.output]
    }

    fn blocks_mut(&mut self) -> [&mut GateBlock; 4] {
        [
            &mut self.input,
            &mut self.candidate,
            &mut self.forget,
            &mut self.output,
        ]
    }

    fn activations(&self, x: &[f64], prev: &CellState) -> StreamCache {
        let hd = self.input.hidden_dim();
        let mut i = Vector::zeros(hd);
        let mut g = Vector::zeros(hd);
        let mut f = Vector::zeros(hd);
        let mut o = Vector::zeros(hd);
        self.input.preactivation_into(x, prev, &mut i);
        self.candidate.preactivation_into(x, prev, &mut g);
        self.forget.preactivation_into(x, prev, &mut f);
        self.output.preactivation_into(x, prev, &mut o);
        for k in 0..hd {
            i[k] = sigmoid_scalar(i[k]);
            g[k] = g[k].tanh();
            f[k] = sigmoid_scalar(f[k]);
            o[k] = sigmoid_scalar(o[k]);
        }
        StreamCache {
            x: Vector::from_slice(x),
            input: i,
            candidate: g,
            forget: f,
            output: o,
            state: None,
        }
    }

    /// Back-propagates gradients with respect to this stream's gate
    /// activations (`d_i`, `d_g`, `d_f`, `d_o`) through the nonlinearities
    /// and gate blocks.
    #[allow(clippy::too_many_arguments)]
    fn backward(
        &self,
        acts: &StreamCache,
        prev: &CellState,
        d_i: &[f64],
        d_g: &[f64],
        d_f: &[f64],
        d_o: &[f64],
        grad: &mut GateSet,
        dx: &mut [f64],
        dh_prev: &mut [f64],
        dc_prev: &mut [f64],
    ) {
        let hd = d_i.len();
        let mut dpre = vec![0.0; hd];
        let x = &acts.x;

        for k in 0..hd {
            let a = acts.input[k];
            dpre[k] = d_i[k] * a * (1.0 - a);
        }
        self.input
            .backward(&dpre, x, prev, &mut grad.input, dx, dh_prev, dc_prev);

        for k in 0..hd {
            let a = acts.candidate[k];
            dpre[k] = d_g[k] * (1.0 - a * a);
        }
        self.candidate
            .backward(&dpre, x, prev, &mut grad.candidate, dx, dh_prev, dc_prev);

        for k in 0..hd {
            let a = acts.forget[k];
            dpre[k] = d_f[k] * a * (1.0 - a);
        }
        self.forget
            .backward(&dpre, x, prev, &mut grad.forget, dx, dh_prev, dc_prev);

        for k in 0..hd {
            let a = acts.output[k];
            dpre[k] = d_o[k] * a * (1.0 - a);
        }
        self.output
            .backward(&dpre, x, prev, &mut grad.output, dx, dh_prev, dc_prev);
    }
}

/// Parameters of one cell. `streams[0]` is the horizontal (or only) gate
/// set, `streams[1]` the vertical one for fused kinds.
#[derive(Debug, Clone, PartialEq)]
pub struct CellParams {
    pub kind: CellKind,
    pub streams: Vec<GateSet>,
}

impl CellParams {
    pub fn zeros(kind: CellKind, input_dim: usize, hidden_dim: usize) -> Self {
        CellParams {
            kind,
            streams: (0..kind.stream_count())
                .map(|_| GateSet::zeros(input_dim, hidden_dim))
                .collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.streams[0].input.input_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.streams[0].input.hidden_dim()
    }

    pub fn horizontal(&self) -> &GateSet {
        &self.streams[0]
    }

    pub fn vertical(&self) -> Option<&GateSet> {
        self.streams.get(1)
    }

    /// Validates block shapes against each other.
    pub fn validate(&self) -> Result<()> {
        if self.streams.len() != self.kind.stream_count() {
            return Err(Error::Config(format!(
                "{} cell needs {} gate sets, found {}",
                self.kind,
                self.kind.stream_count(),
                self.streams.len()
            )));
        }
        let (m, d) = (self.input_dim(), self.hidden_dim());
        for set in &self.streams {
            for b in set.blocks() {
                if b.wx.shape() != (d, m)
                    || b.wh.shape() != (d, d)
                    || b.peephole.len() != d
                    || b.bias.len() != d
                {
                    return Err(Error::shape(
                        "CellParams",
                        format!("gate block inconsistent with input {m}, hidden {d}"),
                    ));
                }
            }
        }
        Ok(())
    }

    fn check_step(&self, inputs: &[&[f64]], prev: &CellState) -> Result<()> {
        if inputs.len() != self.kind.stream_count() {
            return Err(Error::shape(
                "cell step",
                format!(
                    "{} cell takes {} input stream(s), got {}",
                    self.kind,
                    self.kind.stream_count(),
                    inputs.len()
                ),
            ));
        }
        for (set, x) in self.streams.iter().zip(inputs) {
            set.input.check(x, prev)?;
        }
        Ok(())
    }

    /// One forward step on `inputs` (one slice per stream).
    pub fn step(&self, inputs: &[&[f64]], prev: &CellState) -> Result<(CellState, StepCache)> {
        self.check_step(inputs, prev)?;
        Ok(self.step_unchecked(inputs, prev))
    }

    pub(crate) fn step_unchecked(
        &self,
        inputs: &[&[f64]],
        prev: &CellState,
    ) -> (CellState, StepCache) {
        let hd = self.hidden_dim();
        let mut streams: Vec<StreamCache> = self
            .streams
            .iter()
            .zip(inputs)
            .map(|(set, x)| set.activations(x, prev))
            .collect();

        let (state, fused) = match self.kind {
            CellKind::Conventional => {
                let s = &streams[0];
                let st = update_state(&s.input, &s.candidate, &s.forget, &s.output, &prev.c);
                (st, None)
            }
            CellKind::Glf => {
                let (h, v) = (&streams[0], &streams[1]);
                let sum = |a: &Vector, b: &Vector| -> Vector {
                    Vector((0..hd).map(|k| a[k] + b[k]).collect())
                };
                let gates = FusedGates {
                    input: sum(&h.input, &v.input),
                    candidate: sum(&h.candidate, &v.candidate),
                    forget: sum(&h.forget, &v.forget),
                    output: sum(&h.output, &v.output),
                };
                let st = update_state(
                    &gates.input,
                    &gates.candidate,
                    &gates.forget,
                    &gates.output,
                    &prev.c,
                );
                (st, Some(gates))
            }
            CellKind::Slf => {
                let mut c = Vector::zeros(hd);
                let mut h = Vector::zeros(hd);
                for s in &mut streams {
                    let st =
                        update_state(&s.input, &s.candidate, &s.forget, &s.output, &prev.c);
                    c.add_assign(&st.c);
                    h.add_assign(&st.h);
                    s.state = Some(st);
                }
                (CellState { h, c }, None)
            }
        };

        let tanh_c = Vector(state.c.iter().map(|v| v.tanh()).collect());
        let cache = StepCache {
            kind: self.kind,
            prev: prev.clone(),
            streams,
            fused,
            tanh_c,
        };
        (state, cache)
    }

    /// Reverse-mode step: accumulates parameter gradients into `grads` and
    /// returns the gradients for the step inputs and the previous state.
    pub fn backward_into(
        &self,
        cache: &StepCache,
        grad_h: &[f64],
        grad_c: &[f64],
        grads: &mut CellParams,
    ) -> Result<(Vec<Vector>, CellState)> {
        if cache.kind != self.kind || grads.kind != self.kind {
            return Err(Error::KindMismatch {
                expected: self.kind.to_string(),
                actual: if cache.kind != self.kind {
                    cache.kind.to_string()
                } else {
                    grads.kind.to_string()
                },
            });
        }
        let hd = self.hidden_dim();
        if grad_h.len() != hd || grad_c.len() != hd || cache.prev.h.len() != hd {
            return Err(Error::shape(
                "cell_step_backward",
                format!(
                    "hidden {hd}, grad_h {}, grad_c {}",
                    grad_h.len(),
                    grad_c.len()
                ),
            ));
        }
        Ok(self.backward_unchecked(cache, grad_h, grad_c, grads))
    }

    pub(crate) fn backward_unchecked(
        &self,
        cache: &StepCache,
        grad_h: &[f64],
        grad_c: &[f64],
        grads: &mut CellParams,
    ) -> (Vec<Vector>, CellState) {
        let hd = self.hidden_dim();
        let m = self.input_dim();
        let prev = &cache.prev;
        let mut dxs: Vec<Vector> = (0..self.streams.len()).map(|_| Vector::zeros(m)).collect();
        let mut dh_prev = Vector::zeros(hd);
        let mut dc_prev = Vector::zeros(hd);
        let mut d_i = vec![0.0; hd];
        let mut d_g = vec![0.0; hd];
        let mut d_f = vec![0.0; hd];
        let mut d_o = vec![0.0; hd];

        match self.kind {
            CellKind::Conventional | CellKind::Glf => {
                let (i, g, f, o) = match &cache.fused {
                    Some(fg) => (&fg.input, &fg.candidate, &fg.forget, &fg.output),
                    None => {
                        let s = &cache.streams[0];
                        (&s.input, &s.candidate, &s.forget, &s.output)
                    }
                };
                for k in 0..hd {
                    let t = cache.tanh_c[k];
                    let dc = grad_c[k] + grad_h[k] * o[k] * (1.0 - t * t);
                    d_o[k] = grad_h[k] * t;
                    d_i[k] = dc * g[k];
                    d_g[k] = dc * i[k];
                    d_f[k] = dc * prev.c[k];
                    dc_prev[k] = dc * f[k];
                }
                // Fused gates are plain sums, so each stream sees the same
                // upstream gradient.
                for (s, ((set, acts), dx)) in self
                    .streams
                    .iter()
                    .zip(&cache.streams)
                    .zip(dxs.iter_mut())
                    .enumerate()
                {
                    set.backward(
                        acts,
                        prev,
                        &d_i,
                        &d_g,
                        &d_f,
                        &d_o,
                        &mut grads.streams[s],
                        dx,
                        &mut dh_prev,
                        &mut dc_prev,
                    );
                }
            }
            CellKind::Slf => {
                for (s, ((set, acts), dx)) in self
                    .streams
                    .iter()
                    .zip(&cache.streams)
                    .zip(dxs.iter_mut())
                    .enumerate()
                {
                    let st = acts.state.as_ref().expect("slf cache carries stream states");
                    for k in 0..hd {
                        let t = st.c[k].tanh();
                        let dc = grad_c[k] + grad_h[k] * acts.output[k] * (1.0 - t * t);
                        d_o[k] = grad_h[k] * t;
                        d_i[k] = dc * acts.candidate[k];
                        d_g[k] = dc * acts.input[k];
                        d_f[k] = dc * prev.c[k];
                        dc_prev[k] += dc * acts.forget[k];
                    }
                    set.backward(
                        acts,
                        prev,
                        &d_i,
                        &d_g,
                        &d_f,
                        &d_o,
                        &mut grads.streams[s],
                        dx,
                        &mut dh_prev,
                        &mut dc_prev,
                    );
                }
            }
        }
        (
            dxs,
            CellState {
                h: dh_prev,
                c: dc_prev,
            },
        )
    }
}

fn update_state(i: &[f64], g: &[f64], f: &[f64], o: &[f64], c_prev: &[f64]) -> CellState {
    let c: Vec<f64> = (0..i.len()).map(|k| f[k] * c_prev[k] + i[k] * g[k]).collect();
    let h: Vec<f64> = (0..i.len()).map(|k| o[k] * c[k].tanh()).collect();
    CellState {
        h: Vector(h),
        c: Vector(c),
    }
}

impl Parameters for CellParams {
    fn tensors(&self, prefix: &str) -> Vec<TensorRef<'_>> {
        let stream_names = ["h", "v"];
        let gate_names = ["input", "candidate", "forget", "output"];
        let mut out = Vec::new();
        for (set, sname) in self.streams.iter().zip(stream_names) {
            for (block, gname) in set.blocks().into_iter().zip(gate_names) {
                out.extend(block.tensors(&join(prefix, &format!("{sname}.{gname}"))));
            }
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for set in &mut self.streams {
            for block in set.blocks_mut() {
                out.extend(block.tensors_mut());
            }
        }
        out
    }
}

/// Hidden and cell vectors at one chain position.
#[derive(Debug, Clone, PartialEq)]
pub struct CellState {
    pub h: Vector,
    pub c: Vector,
}

impl CellState {
    pub fn zeros(hidden_dim: usize) -> Self {
        CellState {
            h: Vector::zeros(hidden_dim),
            c: Vector::zeros(hidden_dim),
        }
    }
}

/// Activations of one stream's gate set during a step.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamCache {
    pub x: Vector,
    pub input: Vector,
    pub candidate: Vector,
    pub forget: Vector,
    pub output: Vector,
    /// Per-stream `(h, c)` before summation (state-level fusion only).
    pub state: Option<CellState>,
}

/// Summed gates of a gate-level fusion step.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedGates {
    pub input: Vector,
    pub candidate: Vector,
    pub forget: Vector,
    pub output: Vector,
}

/// Everything a forward step computed, kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct StepCache {
    pub kind: CellKind,
    pub prev: CellState,
    pub streams: Vec<StreamCache>,
    pub fused: Option<FusedGates>,
    /// `tanh` of the output cell state.
    pub tanh_c: Vector,
}

/// Step of the conventional peephole cell.
pub fn conv_lstm_step(
    params: &CellParams,
    x: &[f64],
    prev: &CellState,
) -> Result<(CellState, StepCache)> {
    expect_kind(params, CellKind::Conventional)?;
    params.step(&[x], prev)
}

/// Step of the gate-level fusion cell.
pub fn glf_lstm_step(
    params: &CellParams,
    hx: &[f64],
    vx: &[f64],
    prev: &CellState,
) -> Result<(CellState, StepCache)> {
    expect_kind(params, CellKind::Glf)?;
    params.step(&[hx, vx], prev)
}

/// Step of the state-level fusion cell.
pub fn slf_lstm_step(
    params: &CellParams,
    hx: &[f64],
    vx: &[f64],
    prev: &CellState,
) -> Result<(CellState, StepCache)> {
    expect_kind(params, CellKind::Slf)?;
    params.step(&[hx, vx], prev)
}

fn expect_kind(params: &CellParams, kind: CellKind) -> Result<()> {
    if params.kind != kind {
        return Err(Error::KindMismatch {
            expected: kind.to_string(),
            actual: params.kind.to_string(),
        });
    }
    Ok(())
}

/// Gradients produced by [`cell_step_backward`].
#[derive(Debug, Clone)]
pub struct StepGrads {
    pub params: CellParams,
    pub inputs: Vec<Vector>,
    pub prev: CellState,
}

/// Reverse-mode step into a fresh zeroed gradient set.
pub fn cell_step_backward(
    params: &CellParams,
    cache: &StepCache,
    grad_h: &[f64],
    grad_c: &[f64],
) -> Result<StepGrads> {
    let mut grads = CellParams::zeros(params.kind, params.input_dim(), params.hidden_dim());
    let (inputs, prev) = params.backward_into(cache, grad_h, grad_c, &mut grads)?;
    Ok(StepGrads {
        params: grads,
        inputs,
        prev,
    })
}

/// Glorot-uniform `Wx` and `Wh`, zero peepholes, zero biases except the
/// forget gate(s) at 1.0. Draw order: per stream, per gate (input,
/// candidate, forget, output), `Wx` then `Wh`.
pub fn init_cell_params(
    kind: CellKind,
    input_dim: usize,
    hidden_dim: usize,
    stream: &mut RngStream,
) -> Result<CellParams> {
    if input_dim == 0 || hidden_dim == 0 {
        return Err(Error::Config("cell dimensions must be at least 1".into()));
    }
    let mut params = CellParams::zeros(kind, input_dim, hidden_dim);
    for set in &mut params.streams {
        for block in set.blocks_mut() {
            block.wx = glorot_uniform(stream, hidden_dim, input_dim);
            block.wh = glorot_uniform(stream, hidden_dim, hidden_dim);
        }
        set.forget.bias = Vector::filled(hidden_dim, 1.0);
    }
    Ok(params)
}
