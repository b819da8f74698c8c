//! Trainable layers: parameter storage, dense heads, the LSTM family,
//! graph-mixing ConvLSTM, graph convolution and temporal convolution.
//!
//! Parameters live in a [`ParamStore`] as plain tensors. A forward pass
//! binds the whole store to a fresh [`Tape`] ([`ParamStore::bind`]) and
//! layers look up their parameters through the returned [`Bound`] handles.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: String, tensor: Tensor<T>) -> ParamId {
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name `{name}`"
        );
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Records every parameter as a leaf of `tape`.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.leaf(t)).collect())
    }

    /// Adds gradients from a finished backward pass into the store.
    pub fn accumulate(&mut self, tape: &Tape<T>, bound: &Bound) {
        for (t, &v) in self.tensors.iter_mut().zip(&bound.0) {
            tape.accumulate_into(v, t);
        }
    }

    /// Replaces the value of a parameter, keeping its shape.
    pub fn set(&mut self, id: ParamId, values: &[T]) -> Result<()> {
        let t = &mut self.tensors[id.0];
        if t.numel() != values.len() {
            return Err(Error::shape(
                "set_param",
                format!("{} expects {} values, got {}", self.names[id.0], t.numel(), values.len()),
            ));
        }
        t.data_mut().copy_from_slice(values);
        Ok(())
    }

    pub fn fill(&mut self, value: T) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|v| *v = value);
        }
    }
}

/// Tape handles of a bound [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Wraps handles in store order, e.g. leaves created by a gradient check.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn get(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

/// Seeded initializer that registers parameters under dotted names.
pub struct ParamBuilder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: Vec<String>,
}

impl<'a, T: Scalar> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: Vec::new(),
        }
    }

    /// Runs `f` with `name` appended to the parameter name prefix.
    pub fn scope<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        self.prefix.push(name.to_string());
        let out = f(self);
        self.prefix.pop();
        out
    }

    fn full_name(&self, name: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(name.to_string());
        parts.join(".")
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::of(self.rng.gen_range(-bound..=bound)))
            .collect();
        let t = Tensor::from_vec(shape, data).expect("initializer shape");
        self.store.push(self.full_name(name), t)
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn fan_in(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        self.uniform(name, shape, 1.0 / (fan_in.max(1) as f64).sqrt())
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        self.store.push(self.full_name(name), Tensor::full(shape, T::of(value)))
    }
}

// ---- dense -----------------------------------------------------------------

/// Fully connected layer `x W^T + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: b.fan_in("weight", &[out_dim, in_dim], in_dim),
            bias: b.constant("bias", &[out_dim], 0.0),
            in_dim,
            out_dim,
        }
    }

    pub fn num_scalars(in_dim: usize, out_dim: usize) -> usize {
        out_dim * in_dim + out_dim
    }

    /// Maps `[N, in]` to `[N, out]`, or `[in]` to `[out]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let vector = tape.shape(x).len() == 1;
        let x2 = if vector {
            tape.reshape(x, &[1, self.in_dim])?
        } else {
            x
        };
        let wt = tape.transpose(p.get(self.weight))?;
        let y = tape.matmul(x2, wt)?;
        let y = tape.add_bias(y, p.get(self.bias), 1)?;
        if vector {
            tape.reshape(y, &[self.out_dim])
        } else {
            Ok(y)
        }
    }
}

// ---- LSTM ------------------------------------------------------------------

pub const GATE_NAMES: [&str; 4] = ["i", "f", "o", "c"];
const FORGET: usize = 1;

/// Gate weights of one LSTM layer. Order of every array: input, forget,
/// output, cell candidate. `w` is `[H, D]`, `u` is `[H, H]`, `b` is `[H]`.
#[derive(Debug, Clone)]
pub struct LstmParams {
    pub input_dim: usize,
    pub hidden: usize,
    pub w: [ParamId; 4],
    pub u: [ParamId; 4],
    pub b: [ParamId; 4],
}

impl LstmParams {
    /// Fan-in uniform weights, zero biases except the forget gate at 1.
    pub fn new<T: Scalar>(bld: &mut ParamBuilder<'_, T>, input_dim: usize, hidden: usize) -> Self {
        let w = GATE_NAMES.map(|g| bld.fan_in(&format!("w_{g}"), &[hidden, input_dim], input_dim));
        let u = GATE_NAMES.map(|g| bld.fan_in(&format!("u_{g}"), &[hidden, hidden], hidden));
        let b = [0, 1, 2, 3].map(|k| {
            let name = format!("b_{}", GATE_NAMES[k]);
            if k == FORGET {
                bld.constant(&name, &[hidden], 1.0)
            } else {
                bld.constant(&name, &[hidden], 0.0)
            }
        });
        Self {
            input_dim,
            hidden,
            w,
            u,
            b,
        }
    }

    pub fn num_scalars(input_dim: usize, hidden: usize) -> usize {
        4 * (hidden * input_dim + hidden * hidden + hidden)
    }

    /// Transposes the gate matrices once per pass.
    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound) -> Result<BoundLstm> {
        let mut wt = Vec::with_capacity(4);
        let mut ut = Vec::with_capacity(4);
        for k in 0..4 {
            wt.push(tape.transpose(p.get(self.w[k]))?);
            ut.push(tape.transpose(p.get(self.u[k]))?);
        }
        Ok(BoundLstm {
            wt: wt.try_into().expect("four gates"),
            ut: ut.try_into().expect("four gates"),
            b: self.b.map(|id| p.get(id)),
            input_dim: self.input_dim,
            hidden: self.hidden,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLstm {
    wt: [Var; 4],
    ut: [Var; 4],
    b: [Var; 4],
    pub input_dim: usize,
    pub hidden: usize,
}

/// Hidden and cell state, each `[N, H]` (or `[H]` for a single sequence).
#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmState {
    pub fn zeros<T: Scalar>(tape: &mut Tape<T>, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        Ok(Self {
            h: tape.constant(shape, vec![T::zero(); n])?,
            c: tape.constant(shape, vec![T::zero(); n])?,
        })
    }
}

/// Result of one cell update, with the activated gates exposed.
#[derive(Debug, Clone, Copy)]
pub struct CellStep {
    pub state: LstmState,
    /// Activated input, forget, output gates and the cell candidate.
    pub gates: [Var; 4],
}

/// Gate update from already spatially mixed inputs `x_in: [N, D]`,
/// `h_in: [N, H]` and previous cell `c: [N, H]`.
fn gate_update<T: Scalar>(
    tape: &mut Tape<T>,
    p: &BoundLstm,
    x_in: Var,
    h_in: Var,
    c: Var,
) -> Result<CellStep> {
    let mut act = Vec::with_capacity(4);
    for k in 0..4 {
        let xw = tape.matmul(x_in, p.wt[k])?;
        let hu = tape.matmul(h_in, p.ut[k])?;
        let pre = tape.add(xw, hu)?;
        let pre = tape.add_bias(pre, p.b[k], 1)?;
        act.push(if k == 3 {
            tape.tanh(pre)
        } else {
            tape.sigmoid(pre)
        });
    }
    let (i, f, o, cand) = (act[0], act[1], act[2], act[3]);
    let keep = tape.mul(f, c)?;
    let write = tape.mul(i, cand)?;
    let c_new = tape.add(keep, write)?;
    let squashed = tape.tanh(c_new);
    let h_new = tape.mul(o, squashed)?;
    Ok(CellStep {
        state: LstmState { h: h_new, c: c_new },
        gates: [i, f, o, cand],
    })
}

fn check_lstm_shapes<T: Scalar>(
    tape: &Tape<T>,
    p: &BoundLstm,
    x: Var,
    state: &LstmState,
) -> Result<usize> {
    let xs = tape.shape(x);
    let rows = if xs.len() == 1 { 1 } else { xs[0] };
    let ok_x = xs.last() == Some(&p.input_dim) && xs.len() <= 2;
    let expect_state: Vec<usize> = if xs.len() == 1 {
        vec![p.hidden]
    } else {
        vec![rows, p.hidden]
    };
    if !ok_x || tape.shape(state.h) != expect_state || tape.shape(state.c) != expect_state {
        return Err(Error::shape(
            "lstm_cell_step",
            format!(
                "x {:?}, h {:?}, c {:?} with input size {} and hidden size {}",
                xs,
                tape.shape(state.h),
                tape.shape(state.c),
                p.input_dim,
                p.hidden
            ),
        ));
    }
    Ok(rows)
}

/// One LSTM update. `x` is `[D]` with `[H]` state, or `[N, D]` with
/// `[N, H]` state for N independent rows.
pub fn lstm_cell_step<T: Scalar>(
    tape: &mut Tape<T>,
    p: &BoundLstm,
    x: Var,
    state: LstmState,
) -> Result<CellStep> {
    let rows = check_lstm_shapes(tape, p, x, &state)?;
    if tape.shape(x).len() == 2 {
        return gate_update(tape, p, x, state.h, state.c);
    }
    let x2 = tape.reshape(x, &[rows, p.input_dim])?;
    let h2 = tape.reshape(state.h, &[rows, p.hidden])?;
    let c2 = tape.reshape(state.c, &[rows, p.hidden])?;
    let step = gate_update(tape, p, x2, h2, c2)?;
    let h = tape.reshape(step.state.h, &[p.hidden])?;
    let c = tape.reshape(step.state.c, &[p.hidden])?;
    let mut gates = step.gates;
    for g in &mut gates {
        *g = tape.reshape(*g, &[p.hidden])?;
    }
    Ok(CellStep {
        state: LstmState { h, c },
        gates,
    })
}

/// Runs one layer over `seq: [T, D]`, returning the `[1, H]` hidden state
/// after each processed step (in processing order).
fn run_layer<T: Scalar>(
    tape: &mut Tape<T>,
    p: &BoundLstm,
    seq: Var,
    reverse: bool,
) -> Result<Vec<Var>> {
    let s = tape.shape(seq).to_vec();
    if s.len() != 2 || s[1] != p.input_dim {
        return Err(Error::shape(
            "run_sequence_lstm",
            format!("sequence {s:?} does not match input size {}", p.input_dim),
        ));
    }
    let t_len = s[0];
    if t_len == 0 {
        return Err(Error::shape("run_sequence_lstm", "empty sequence"));
    }
    let mut state = LstmState::zeros(tape, &[1, p.hidden])?;
    let mut hs = Vec::with_capacity(t_len);
    for step in 0..t_len {
        let t = if reverse { t_len - 1 - step } else { step };
        let x = tape.select(seq, t)?;
        let x = tape.reshape(x, &[1, p.input_dim])?;
        state = gate_update(tape, p, x, state.h, state.c)?.state;
        hs.push(state.h);
    }
    Ok(hs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LstmVariant {
    Plain,
    Bi,
    Attention,
    #[default]
    Stacked,
}

impl LstmVariant {
    pub const ALL: [LstmVariant; 4] = [
        LstmVariant::Plain,
        LstmVariant::Bi,
        LstmVariant::Attention,
        LstmVariant::Stacked,
    ];
}

impl fmt::Display for LstmVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LstmVariant::Plain => "plain",
            LstmVariant::Bi => "bi",
            LstmVariant::Attention => "attention",
            LstmVariant::Stacked => "stacked",
        })
    }
}

impl FromStr for LstmVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(LstmVariant::Plain),
            "bi" => Ok(LstmVariant::Bi),
            "attention" => Ok(LstmVariant::Attention),
            "stacked" => Ok(LstmVariant::Stacked),
            other => Err(Error::Config(format!(
                "unknown lstm variant `{other}` (expected plain|bi|attention|stacked)"
            ))),
        }
    }
}

/// Additive attention `e_t = v^T tanh(W_a h_t)`.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub w_a: ParamId,
    pub v: ParamId,
}

/// Sequence encoder over `[T, D]` producing one feature vector.
#[derive(Debug, Clone)]
pub struct SequenceLstm {
    pub variant: LstmVariant,
    pub layers: Vec<LstmParams>,
    pub attention: Option<AttentionParams>,
    pub input_dim: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone)]
pub struct SequenceOutput {
    pub features: Var,
    /// Attention weights `[T]` for the attention variant.
    pub attention: Option<Var>,
}

impl SequenceLstm {
    pub fn new<T: Scalar>(
        bld: &mut ParamBuilder<'_, T>,
        variant: LstmVariant,
        input_dim: usize,
        hidden: usize,
    ) -> Self {
        let (layers, attention) = match variant {
            LstmVariant::Plain => (vec![bld.scope("lstm", |b| LstmParams::new(b, input_dim, hidden))], None),
            LstmVariant::Bi => (
                vec![
                    bld.scope("fwd", |b| LstmParams::new(b, input_dim, hidden)),
                    bld.scope("bwd", |b| LstmParams::new(b, input_dim, hidden)),
                ],
                None,
            ),
            LstmVariant::Attention => {
                let lstm = bld.scope("lstm", |b| LstmParams::new(b, input_dim, hidden));
                let att = bld.scope("attention", |b| AttentionParams {
                    w_a: b.fan_in("w_a", &[hidden, hidden], hidden),
                    v: b.fan_in("v", &[hidden], hidden),
                });
                (vec![lstm], Some(att))
            }
            LstmVariant::Stacked => (
                vec![
                    bld.scope("layer1", |b| LstmParams::new(b, input_dim, hidden)),
                    bld.scope("layer2", |b| LstmParams::new(b, hidden, hidden)),
                ],
                None,
            ),
        };
        Self {
            variant,
            layers,
            attention,
            input_dim,
            hidden,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self.variant {
            LstmVariant::Bi => 2 * self.hidden,
            _ => self.hidden,
        }
    }

    /// Scalar parameter count of a variant.
    pub fn num_scalars(variant: LstmVariant, input_dim: usize, hidden: usize) -> usize {
        let one = LstmParams::num_scalars(input_dim, hidden);
        match variant {
            LstmVariant::Plain => one,
            LstmVariant::Bi => 2 * one,
            LstmVariant::Attention => one + hidden * hidden + hidden,
            LstmVariant::Stacked => one + LstmParams::num_scalars(hidden, hidden),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, seq: Var) -> Result<Var> {
        Ok(self.forward_detailed(tape, p, seq)?.features)
    }

    pub fn forward_detailed<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        seq: Var,
    ) -> Result<SequenceOutput> {
        let h = self.hidden;
        let first = self.layers[0].bind(tape, p)?;
        let out = match self.variant {
            LstmVariant::Plain => {
                let hs = run_layer(tape, &first, seq, false)?;
                SequenceOutput {
                    features: tape.reshape(*hs.last().expect("non-empty"), &[h])?,
                    attention: None,
                }
            }
            LstmVariant::Bi => {
                let back = self.layers[1].bind(tape, p)?;
                let fwd = run_layer(tape, &first, seq, false)?;
                let bwd = run_layer(tape, &back, seq, true)?;
                let both = tape.concat(&[*fwd.last().unwrap(), *bwd.last().unwrap()], 1)?;
                SequenceOutput {
                    features: tape.reshape(both, &[2 * h])?,
                    attention: None,
                }
            }
            LstmVariant::Attention => {
                let att = self.attention.as_ref().expect("attention params");
                let hs = run_layer(tape, &first, seq, false)?;
                let t_len = hs.len();
                let states = tape.concat(&hs, 0)?;
                let wt = tape.transpose(p.get(att.w_a))?;
                let proj = tape.matmul(states, wt)?;
                let proj = tape.tanh(proj);
                let v = tape.reshape(p.get(att.v), &[h, 1])?;
                let scores = tape.matmul(proj, v)?;
                let scores = tape.reshape(scores, &[1, t_len])?;
                let alpha = tape.softmax(scores)?;
                let ctx = tape.matmul(alpha, states)?;
                SequenceOutput {
                    features: tape.reshape(ctx, &[h])?,
                    attention: Some(tape.reshape(alpha, &[t_len])?),
                }
            }
            LstmVariant::Stacked => {
                let second = self.layers[1].bind(tape, p)?;
                let hs = run_layer(tape, &first, seq, false)?;
                let mid = tape.concat(&hs, 0)?;
                let hs2 = run_layer(tape, &second, mid, false)?;
                SequenceOutput {
                    features: tape.reshape(*hs2.last().unwrap(), &[h])?,
                    attention: None,
                }
            }
        };
        Ok(out)
    }
}

// ---- graph layers -----------------------------------------------------------

/// `A_hat X W` for one graph signal `X: [V, C_in]`.
pub fn graph_convolution<T: Scalar>(tape: &mut Tape<T>, a_hat: Var, x: Var, w: Var) -> Result<Var> {
    let (sa, sx, sw) = (tape.shape(a_hat), tape.shape(x), tape.shape(w));
    if sa.len() != 2 || sa[0] != sa[1] || sx.len() != 2 || sx[0] != sa[1] || sw.len() != 2 || sw[0] != sx[1] {
        return Err(Error::shape(
            "graph_convolution",
            format!("A {sa:?}, X {sx:?}, W {sw:?}"),
        ));
    }
    let mixed = tape.matmul(a_hat, x)?;
    tape.matmul(mixed, w)
}

/// Graph convolution applied to every frame of `X: [T, V, C_in]`.
pub fn graph_convolution_frames<T: Scalar>(
    tape: &mut Tape<T>,
    a_hat: Var,
    x: Var,
    w: Var,
) -> Result<Var> {
    let sx = tape.shape(x).to_vec();
    let sw = tape.shape(w).to_vec();
    let sa = tape.shape(a_hat).to_vec();
    if sx.len() != 3 || sa != [sx[1], sx[1]] || sw.len() != 2 || sw[0] != sx[2] {
        return Err(Error::shape(
            "graph_convolution",
            format!("A {sa:?}, X {sx:?}, W {sw:?}"),
        ));
    }
    let (t, v, c) = (sx[0], sx[1], sx[2]);
    let nodes_first = tape.permute(x, &[1, 0, 2])?;
    let flat = tape.reshape(nodes_first, &[v, t * c])?;
    let mixed = tape.matmul(a_hat, flat)?;
    let mixed = tape.reshape(mixed, &[v, t, c])?;
    let frames_first = tape.permute(mixed, &[1, 0, 2])?;
    let rows = tape.reshape(frames_first, &[t * v, c])?;
    let out = tape.matmul(rows, w)?;
    tape.reshape(out, &[t, v, sw[1]])
}

/// Zero padding that preserves sequence length for an odd kernel.
pub fn same_padding(k: usize) -> Result<usize> {
    if k == 0 || k.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "temporal kernel length {k} must be odd for same padding"
        )));
    }
    Ok((k - 1) / 2)
}

/// Convolves every node's channel sequence of `X: [T, V, C_in]` along time
/// with a `[C_out, C_in, k]` kernel, zero-padded so `T` is preserved.
pub fn temporal_convolution<T: Scalar>(tape: &mut Tape<T>, x: Var, kernel: Var) -> Result<Var> {
    let k = *tape
        .shape(kernel)
        .last()
        .ok_or_else(|| Error::shape("temporal_convolution", "rank-0 kernel"))?;
    let pad = same_padding(k)?;
    tape.conv1d_temporal(x, kernel, pad)
}

/// Temporal convolution with bias.
#[derive(Debug, Clone)]
pub struct TemporalConv {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub k: usize,
}

impl TemporalConv {
    pub fn new<T: Scalar>(
        bld: &mut ParamBuilder<'_, T>,
        c_in: usize,
        c_out: usize,
        k: usize,
    ) -> Result<Self> {
        same_padding(k)?;
        Ok(Self {
            kernel: bld.fan_in("kernel", &[c_out, c_in, k], c_in * k),
            bias: bld.constant("bias", &[c_out], 0.0),
            k,
        })
    }

    pub fn num_scalars(c_in: usize, c_out: usize, k: usize) -> usize {
        c_out * c_in * k + c_out
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = temporal_convolution(tape, x, p.get(self.kernel))?;
        let axis = tape.shape(y).len() - 1;
        tape.add_bias(y, p.get(self.bias), axis)
    }
}

/// LSTM whose input and hidden transforms are preceded by graph mixing
/// with the normalized adjacency: gates use `(A X) W` and `(A H) U`.
#[derive(Debug, Clone)]
pub struct ConvLstm {
    pub params: LstmParams,
}

impl ConvLstm {
    pub fn new<T: Scalar>(bld: &mut ParamBuilder<'_, T>, c_in: usize, hidden: usize) -> Self {
        Self {
            params: LstmParams::new(bld, c_in, hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.params.hidden
    }
}

/// One ConvLSTM update on a graph signal `x: [V, C]` with `[V, H]` state.
pub fn convlstm_cell_step<T: Scalar>(
    tape: &mut Tape<T>,
    p: &BoundLstm,
    a_hat: Var,
    x: Var,
    state: LstmState,
) -> Result<CellStep> {
    let v = tape.shape(a_hat)[0];
    let sx = tape.shape(x).to_vec();
    if tape.shape(a_hat) != [v, v] || sx.len() != 2 || sx[0] != v || tape.shape(state.h) != [v, p.hidden] {
        return Err(Error::shape(
            "convlstm_cell_step",
            format!(
                "graph has {v} nodes but x is {sx:?} and h is {:?}",
                tape.shape(state.h)
            ),
        ));
    }
    let x_in = tape.matmul(a_hat, x)?;
    let h_in = tape.matmul(a_hat, state.h)?;
    gate_update(tape, p, x_in, h_in, state.c)
}

/// Runs a ConvLSTM over `X: [T, V, C]`, returning hidden states `[T, V, H]`.
pub fn convlstm_sequence<T: Scalar>(
    tape: &mut Tape<T>,
    layer: &ConvLstm,
    p: &Bound,
    a_hat: Var,
    x: Var,
) -> Result<Var> {
    let sx = tape.shape(x).to_vec();
    if sx.len() != 3 {
        return Err(Error::shape("convlstm", format!("expected [T,V,C], got {sx:?}")));
    }
    let bound = layer.params.bind(tape, p)?;
    let mut state = LstmState::zeros(tape, &[sx[1], layer.hidden()])?;
    let mut hs = Vec::with_capacity(sx[0]);
    for t in 0..sx[0] {
        let xt = tape.select(x, t)?;
        state = convlstm_cell_step(tape, &bound, a_hat, xt, state)?.state;
        hs.push(state.h);
    }
    tape.stack(&hs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheck};
    use rand::SeedableRng;

    fn store_with<F, L>(seed: u64, f: F) -> (ParamStore<f64>, L)
    where
        F: FnOnce(&mut ParamBuilder<'_, f64>) -> L,
    {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = {
            let mut b = ParamBuilder::new(&mut store, &mut rng);
            f(&mut b)
        };
        (store, layer)
    }

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()
    }

    #[test]
    fn zero_lstm_halves_the_cell() {
        let (mut store, lstm) = store_with(0, |b| LstmParams::new(b, 1, 1));
        store.fill(0.0);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let bl = lstm.bind(&mut tape, &p).unwrap();
        let x = tape.constant(&[1], vec![0.0]).unwrap();
        let h = tape.constant(&[1], vec![0.0]).unwrap();
        let c = tape.constant(&[1], vec![2.0]).unwrap();
        let step = lstm_cell_step(&mut tape, &bl, x, LstmState { h, c }).unwrap();
        assert_eq!(tape.value(step.state.c), &[1.0]);
        assert!((tape.value(step.state.h)[0] - 0.5 * 1f64.tanh()).abs() < 1e-15);

        let zero = LstmState::zeros(&mut tape, &[1]).unwrap();
        let step = lstm_cell_step(&mut tape, &bl, x, zero).unwrap();
        assert_eq!(tape.value(step.state.h), &[0.0]);
        assert_eq!(tape.value(step.state.c), &[0.0]);
    }

    #[test]
    fn forget_bias_starts_at_one() {
        let (store, lstm) = store_with(3, |b| LstmParams::new(b, 2, 3));
        assert_eq!(store.get(lstm.b[1]).data(), &[1.0, 1.0, 1.0]);
        assert_eq!(store.name(lstm.w[0]), "w_i");
    }

    #[test]
    fn gates_are_strictly_bounded() {
        let (store, lstm) = store_with(4, |b| LstmParams::new(b, 3, 4));
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let bl = lstm.bind(&mut tape, &p).unwrap();
        let mut state = LstmState::zeros(&mut tape, &[4]).unwrap();
        for t in 0..5 {
            let x = tape.constant(&[3], rand_vec(3, t)).unwrap();
            let step = lstm_cell_step(&mut tape, &bl, x, state).unwrap();
            for g in &step.gates[..3] {
                assert!(tape.value(*g).iter().all(|&v| v > 0.0 && v < 1.0));
            }
            assert!(tape.value(step.gates[3]).iter().all(|&v| v > -1.0 && v < 1.0));
            state = step.state;
        }
    }

    #[test]
    fn lstm_rollout_gradients() {
        let (store, lstm) = store_with(5, |b| LstmParams::new(b, 2, 3));
        let mut inputs: Vec<Tensor<f64>> = store.iter().map(|(_, t)| t.clone()).collect();
        inputs.push(Tensor::from_vec(&[3, 2], rand_vec(6, 6)).unwrap());
        let n = store.len();
        let report = check_gradients(&inputs, &GradCheck::default(), |tape, v| {
            let p = Bound(v[..n].to_vec());
            let bl = lstm.bind(tape, &p)?;
            let mut state = LstmState::zeros(tape, &[3])?;
            for t in 0..3 {
                let x = tape.select(v[n], t)?;
                state = lstm_cell_step(tape, &bl, x, state)?.state;
            }
            let w = tape.constant(&[3], vec![0.7, -1.3, 0.4])?;
            let y = tape.mul(state.h, w)?;
            Ok(tape.sum(y))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn single_step_plain_matches_cell() {
        let (store, seq) = store_with(7, |b| SequenceLstm::new(b, LstmVariant::Plain, 3, 4));
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xs = tape.constant(&[1, 3], rand_vec(3, 8)).unwrap();
        let out = seq.forward(&mut tape, &p, xs).unwrap();
        let bl = seq.layers[0].bind(&mut tape, &p).unwrap();
        let x = tape.reshape(xs, &[3]).unwrap();
        let zero = LstmState::zeros(&mut tape, &[4]).unwrap();
        let step = lstm_cell_step(&mut tape, &bl, x, zero).unwrap();
        assert_eq!(tape.value(out), tape.value(step.state.h));
    }

    #[test]
    fn empty_sequence_is_rejected() {
        let (store, seq) = store_with(7, |b| SequenceLstm::new(b, LstmVariant::Plain, 3, 4));
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let bl = seq.layers[0].bind(&mut tape, &p).unwrap();
        let bad = tape.constant(&[2, 5], vec![0.0; 10]).unwrap();
        assert!(run_layer(&mut tape, &bl, bad, false).is_err());
    }

    #[test]
    fn bi_on_palindrome_with_tied_params() {
        let (mut store, seq) = store_with(9, |b| SequenceLstm::new(b, LstmVariant::Bi, 2, 3));
        for k in 0..4 {
            for (f, b) in [
                (seq.layers[0].w[k], seq.layers[1].w[k]),
                (seq.layers[0].u[k], seq.layers[1].u[k]),
                (seq.layers[0].b[k], seq.layers[1].b[k]),
            ] {
                let vals = store.get(f).data().to_vec();
                store.set(b, &vals).unwrap();
            }
        }
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xs = tape.constant(&[4, 2], [0.3, -0.2].repeat(4)).unwrap();
        let out = seq.forward(&mut tape, &p, xs).unwrap();
        let v = tape.value(out);
        assert_eq!(&v[..3], &v[3..]);
    }

    #[test]
    fn bi_time_reversal_swaps_halves() {
        let (store, seq) = store_with(10, |b| SequenceLstm::new(b, LstmVariant::Bi, 2, 3));
        let mut swapped = store.clone();
        for k in 0..4 {
            for (f, b) in [
                (seq.layers[0].w[k], seq.layers[1].w[k]),
                (seq.layers[0].u[k], seq.layers[1].u[k]),
                (seq.layers[0].b[k], seq.layers[1].b[k]),
            ] {
                swapped.set(f, store.get(b).data()).unwrap();
                swapped.set(b, store.get(f).data()).unwrap();
            }
        }
        let data = rand_vec(10, 11);
        let mut rev = Vec::new();
        for t in (0..5).rev() {
            rev.extend_from_slice(&data[t * 2..t * 2 + 2]);
        }
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xs = tape.constant(&[5, 2], data).unwrap();
        let a = seq.forward(&mut tape, &p, xs).unwrap();
        let q = swapped.bind(&mut tape);
        let xr = tape.constant(&[5, 2], rev).unwrap();
        let b = seq.forward(&mut tape, &q, xr).unwrap();
        let (a, b) = (tape.value(a), tape.value(b));
        assert_eq!(&a[..3], &b[3..]);
        assert_eq!(&a[3..], &b[..3]);
    }

    #[test]
    fn attention_weights_are_a_distribution() {
        let (store, seq) = store_with(12, |b| SequenceLstm::new(b, LstmVariant::Attention, 3, 5));
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xs = tape.constant(&[7, 3], rand_vec(21, 13)).unwrap();
        let out = seq.forward_detailed(&mut tape, &p, xs).unwrap();
        let alpha = tape.value(out.attention.unwrap());
        assert_eq!(alpha.len(), 7);
        assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(alpha.iter().all(|&a| a > 0.0));
        assert_eq!(tape.shape(out.features), &[5]);
    }

    #[test]
    fn variant_parameter_counts() {
        let (d, h) = (6, 5);
        for variant in LstmVariant::ALL {
            let (store, seq) = store_with(1, |b| SequenceLstm::new(b, variant, d, h));
            assert_eq!(store.num_scalars(), SequenceLstm::num_scalars(variant, d, h));
            assert_eq!(seq.output_dim(), if variant == LstmVariant::Bi { 10 } else { 5 });
        }
        let stacked = 4 * (h * d + h * h + h) + 4 * (h * h + h * h + h);
        assert_eq!(SequenceLstm::num_scalars(LstmVariant::Stacked, d, h), stacked);
        assert_eq!("stacked".parse::<LstmVariant>().unwrap(), LstmVariant::Stacked);
        assert!("gru".parse::<LstmVariant>().is_err());
    }

    #[test]
    fn sequence_variant_gradients() {
        for variant in LstmVariant::ALL {
            let (store, seq) = store_with(14, |b| SequenceLstm::new(b, variant, 2, 3));
            let mut inputs: Vec<Tensor<f64>> = store.iter().map(|(_, t)| t.clone()).collect();
            inputs.push(Tensor::from_vec(&[4, 2], rand_vec(8, 15)).unwrap().with_grad());
            let n = store.len();
            let report = check_gradients(&inputs, &GradCheck::default(), |tape, v| {
                let p = Bound(v[..n].to_vec());
                let out = seq.forward(tape, &p, v[n])?;
                let k = tape.value(out).len();
                let w = tape.constant(&[k], (0..k).map(|i| 0.5 - 0.3 * i as f64).collect())?;
                let y = tape.mul(out, w)?;
                Ok(tape.sum(y))
            })
            .unwrap();
            assert!(report.max_rel_err < 1e-4, "{variant}: {report:?}");
        }
    }

    fn path_adjacency(v: usize) -> Tensor<f64> {
        let edges: Vec<(usize, usize)> = (1..v).map(|i| (i - 1, i)).collect();
        crate::graph::normalize_adjacency(v, &edges).unwrap()
    }

    #[test]
    fn convlstm_with_identity_adjacency_is_per_node_lstm() {
        let (store, layer) = store_with(16, |b| ConvLstm::new(b, 2, 3));
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let bl = layer.params.bind(&mut tape, &p).unwrap();
        let eye = tape
            .constant(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])
            .unwrap();
        let xdata = rand_vec(6, 17);
        let x = tape.constant(&[3, 2], xdata.clone()).unwrap();
        let h0 = tape.constant(&[3, 3], rand_vec(9, 18)).unwrap();
        let c0 = tape.constant(&[3, 3], rand_vec(9, 19)).unwrap();
        let joint = convlstm_cell_step(&mut tape, &bl, eye, x, LstmState { h: h0, c: c0 }).unwrap();
        for node in 0..3 {
            let xn = tape.constant(&[2], xdata[node * 2..node * 2 + 2].to_vec()).unwrap();
            let hn = tape.select(h0, node).unwrap();
            let cn = tape.select(c0, node).unwrap();
            let single = lstm_cell_step(&mut tape, &bl, xn, LstmState { h: hn, c: cn }).unwrap();
            let joint_h = &tape.value(joint.state.h)[node * 3..node * 3 + 3];
            assert_eq!(joint_h, tape.value(single.state.h));
        }
    }

    #[test]
    fn convlstm_zero_params_fixed_point() {
        let (mut store, layer) = store_with(20, |b| ConvLstm::new(b, 2, 3));
        store.fill(0.0);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let a = tape.leaf(&path_adjacency(4));
        let x = tape.constant(&[5, 4, 2], rand_vec(40, 21)).unwrap();
        let hs = convlstm_sequence(&mut tape, &layer, &p, a, x).unwrap();
        assert_eq!(tape.shape(hs), &[5, 4, 3]);
        assert!(tape.value(hs).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn convlstm_node_mismatch() {
        let (store, layer) = store_with(20, |b| ConvLstm::new(b, 2, 3));
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let bl = layer.params.bind(&mut tape, &p).unwrap();
        let a = tape.leaf(&path_adjacency(4));
        let x = tape.constant(&[3, 2], vec![0.0; 6]).unwrap();
        let s = LstmState::zeros(&mut tape, &[3, 3]).unwrap();
        assert!(matches!(
            convlstm_cell_step(&mut tape, &bl, a, x, s),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn convlstm_path_graph_gradients() {
        let (store, layer) = store_with(22, |b| ConvLstm::new(b, 2, 2));
        let mut inputs: Vec<Tensor<f64>> = store.iter().map(|(_, t)| t.clone()).collect();
        inputs.push(Tensor::from_vec(&[2, 3, 2], rand_vec(12, 23)).unwrap().with_grad());
        inputs.push(path_adjacency(3));
        let n = store.len();
        let report = check_gradients(&inputs, &GradCheck::default(), |tape, v| {
            let p = Bound(v[..n].to_vec());
            let hs = convlstm_sequence(tape, &layer, &p, v[n + 1], v[n])?;
            let w = tape.constant(&[2, 3, 2], rand_vec(12, 24))?;
            let y = tape.mul(hs, w)?;
            Ok(tape.sum(y))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn gcn_identity_and_averaging() {
        let mut tape = Tape::<f64>::new();
        let eye = tape.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let x = tape.constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = graph_convolution(&mut tape, eye, x, eye).unwrap();
        assert_eq!(tape.value(out), &[1.0, 2.0, 3.0, 4.0]);
        let half = tape.constant(&[2, 2], vec![0.5; 4]).unwrap();
        let x = tape.constant(&[2, 1], vec![2.0, 0.0]).unwrap();
        let w = tape.constant(&[1, 1], vec![1.0]).unwrap();
        let out = graph_convolution(&mut tape, half, x, w).unwrap();
        assert_eq!(tape.value(out), &[1.0, 1.0]);
        let bad = tape.constant(&[3, 1], vec![0.0; 3]).unwrap();
        assert!(graph_convolution(&mut tape, half, bad, w).is_err());
    }

    #[test]
    fn gcn_permutation_equivariance() {
        let v = 5;
        let adj = crate::graph::normalize_adjacency(v, &[(0, 1), (1, 2), (2, 4), (3, 4), (0, 3)]).unwrap();
        let perm = [3usize, 0, 4, 1, 2];
        let x = rand_vec(v * 3, 30);
        let w = rand_vec(3 * 2, 31);
        let mut pa = vec![0.0; v * v];
        let mut px = vec![0.0; v * 3];
        for i in 0..v {
            for j in 0..v {
                pa[perm[i] * v + perm[j]] = adj.data()[i * v + j];
            }
            px[perm[i] * 3..perm[i] * 3 + 3].copy_from_slice(&x[i * 3..i * 3 + 3]);
        }
        let mut tape = Tape::<f64>::new();
        let (a, xv, wv) = (
            tape.leaf(&adj),
            tape.constant(&[v, 3], x).unwrap(),
            tape.constant(&[3, 2], w).unwrap(),
        );
        let base = graph_convolution(&mut tape, a, xv, wv).unwrap();
        let (pa, pxv) = (
            tape.constant(&[v, v], pa).unwrap(),
            tape.constant(&[v, 3], px).unwrap(),
        );
        let permuted = graph_convolution(&mut tape, pa, pxv, wv).unwrap();
        for i in 0..v {
            for c in 0..2 {
                let lhs = tape.value(permuted)[perm[i] * 2 + c];
                assert!((lhs - tape.value(base)[i * 2 + c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gcn_is_linear_in_x() {
        let adj = path_adjacency(4);
        let (x, y, w) = (rand_vec(12, 40), rand_vec(12, 41), rand_vec(6, 42));
        let (a, b) = (1.7, -0.6);
        let combo: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let mut tape = Tape::<f64>::new();
        let av = tape.leaf(&adj);
        let wv = tape.constant(&[3, 2], w).unwrap();
        let run = |tape: &mut Tape<f64>, data: Vec<f64>| {
            let xv = tape.constant(&[4, 3], data).unwrap();
            let out = graph_convolution(tape, av, xv, wv).unwrap();
            tape.value(out).to_vec()
        };
        let (gx, gy, gc) = (run(&mut tape, x), run(&mut tape, y), run(&mut tape, combo));
        for i in 0..gc.len() {
            assert!((gc[i] - (a * gx[i] + b * gy[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn frame_gcn_matches_per_frame_gcn() {
        let adj = path_adjacency(4);
        let x = rand_vec(3 * 4 * 2, 50);
        let w = rand_vec(2 * 5, 51);
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(&adj);
        let xv = tape.constant(&[3, 4, 2], x).unwrap();
        let wv = tape.constant(&[2, 5], w).unwrap();
        let all = graph_convolution_frames(&mut tape, a, xv, wv).unwrap();
        assert_eq!(tape.shape(all), &[3, 4, 5]);
        for t in 0..3 {
            let xt = tape.select(xv, t).unwrap();
            let one = graph_convolution(&mut tape, a, xt, wv).unwrap();
            let expect = tape.value(one).to_vec();
            let got = &tape.value(all)[t * 20..(t + 1) * 20];
            for (g, e) in got.iter().zip(&expect) {
                assert!((g - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn temporal_convolution_cases() {
        let mut tape = Tape::<f64>::new();
        let x = rand_vec(6 * 3 * 2, 60);
        let xv = tape.constant(&[6, 3, 2], x.clone()).unwrap();
        let eye = tape.constant(&[2, 2, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let out = temporal_convolution(&mut tape, xv, eye).unwrap();
        assert_eq!(tape.value(out), x.as_slice());

        let konst = tape.constant(&[10, 2, 1], [0.5, -1.0].repeat(10)).unwrap();
        let kernel = tape.constant(&[2, 1, 5], rand_vec(10, 61)).unwrap();
        let out = temporal_convolution(&mut tape, konst, kernel).unwrap();
        let vals = tape.value(out);
        let row = |t: usize| &vals[t * 4..(t + 1) * 4];
        for t in 2..8 {
            assert_eq!(row(t), row(2));
        }
        assert_ne!(row(0), row(2));

        let big = tape.constant(&[20, 68, 2], vec![0.1; 20 * 68 * 2]).unwrap();
        let kernel = tape.constant(&[32, 2, 9], vec![0.01; 32 * 2 * 9]).unwrap();
        let out = temporal_convolution(&mut tape, big, kernel).unwrap();
        assert_eq!(tape.shape(out), &[20, 68, 32]);

        let even = tape.constant(&[2, 2, 4], vec![0.0; 16]).unwrap();
        assert!(matches!(
            temporal_convolution(&mut tape, xv, even),
            Err(Error::Config(_))
        ));
    }
}
