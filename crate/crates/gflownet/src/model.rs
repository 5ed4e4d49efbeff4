//! Learnable parametrizations: a tabular table per state/edge and a small
//! MLP with masked policy heads, both exposing their computation through the
//! gradient tape.
//!
//! By convention the state-flow output at the initial state is the log Z
//! parameter itself, so detailed-balance, subtrajectory-balance, and
//! trajectory-balance terms all read the same quantity there.

use std::collections::HashMap;

use rand::Rng;
use thiserror::Error;

use crate::dag::{DagSpec, StateId};
use crate::tape::{log_sum_exp, NodeId, Tape, LEAKY_SLOPE};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("terminal state {0} has no forward policy")]
    TerminalHasNoForward(StateId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Policy,
    LogZ,
}

/// Whether the backward policy is learned or frozen to the uniform
/// distribution over parents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum PbMode {
    Learned,
    FrozenUniform,
}

/// Tape nodes for the model outputs at one state.
pub struct Heads {
    /// Log-probabilities over child slots (None at terminals).
    pub log_pf: Option<NodeId>,
    /// Log-probabilities over parent slots (None at the initial state).
    pub log_pb: Option<NodeId>,
    /// Scalar log state flow; the log Z parameter at the initial state.
    pub log_flow: NodeId,
    /// Raw log edge flows over child slots (None at terminals).
    pub log_edge: Option<NodeId>,
}

pub trait Model {
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];
    fn group(&self, index: usize) -> ParamGroup;
    fn is_frozen(&self, index: usize) -> bool;
    fn log_z_offset(&self) -> usize;

    /// Build tape nodes for all model outputs at `s`.
    fn heads(&self, tape: &mut Tape, spec: &DagSpec, s: StateId) -> Heads;

    // Plain numeric evaluation (no gradients), used for sampling and metrics.
    fn log_pf_row(&self, spec: &DagSpec, s: StateId) -> Vec<f64>;
    fn log_pb_row(&self, spec: &DagSpec, s: StateId) -> Vec<f64>;
    fn log_flow_value(&self, spec: &DagSpec, s: StateId) -> f64;
    fn log_edge_row(&self, spec: &DagSpec, s: StateId) -> Vec<f64>;

    fn log_z(&self) -> f64 {
        self.params()[self.log_z_offset()]
    }

    fn log_z_node(&self, tape: &mut Tape) -> NodeId {
        tape.leaf(self.params(), self.log_z_offset(), 1, false)
    }

    fn num_params(&self) -> usize {
        self.params().len()
    }

    /// Log-softmax forward policy, log-softmax backward policy, and log
    /// state flow at `s`. Errors when a terminal state is queried for P_F.
    fn forward_heads(
        &self,
        spec: &DagSpec,
        s: StateId,
    ) -> Result<(Vec<f64>, Vec<f64>, f64), ModelError> {
        if spec.terminal[s] {
            return Err(ModelError::TerminalHasNoForward(s));
        }
        Ok((
            self.log_pf_row(spec, s),
            self.log_pb_row(spec, s),
            self.log_flow_value(spec, s),
        ))
    }
}

/// Per-batch memoization of head nodes: each distinct state is evaluated on
/// the tape once, so repeated visits share nodes and gradients accumulate
/// through them.
pub struct BatchEval {
    pub tape: Tape,
    cache: HashMap<StateId, Heads>,
    log_z: Option<NodeId>,
}

impl BatchEval {
    pub fn new() -> Self {
        BatchEval { tape: Tape::new(), cache: HashMap::new(), log_z: None }
    }

    pub fn heads(&mut self, model: &dyn Model, spec: &DagSpec, s: StateId) -> &Heads {
        if !self.cache.contains_key(&s) {
            let h = model.heads(&mut self.tape, spec, s);
            self.cache.insert(s, h);
        }
        &self.cache[&s]
    }

    pub fn log_z(&mut self, model: &dyn Model) -> NodeId {
        if self.log_z.is_none() {
            self.log_z = Some(model.log_z_node(&mut self.tape));
        }
        self.log_z.unwrap()
    }
}

impl Default for BatchEval {
    fn default() -> Self {
        Self::new()
    }
}

fn log_softmax_row(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|&v| v - lse).collect()
}

fn uniform_log_row(len: usize) -> Vec<f64> {
    vec![-(len.max(1) as f64).ln(); len]
}

/// Tabular parametrization: explicit logits per (state, child) and
/// (state, parent), per-state log flows, per-edge log flows, and a scalar
/// log Z.
pub struct TabularParams {
    params: Vec<f64>,
    pf_offset: Vec<usize>,
    pb_offset: Vec<usize>,
    flow_offset: usize,
    edge_offset: usize,
    log_z_offset: usize,
    pb_mode: PbMode,
}

impl TabularParams {
    pub fn new<R: Rng>(spec: &DagSpec, pb_mode: PbMode, rng: &mut R) -> Self {
        let mut pf_offset = Vec::with_capacity(spec.num_states);
        let mut pb_offset = Vec::with_capacity(spec.num_states);
        let mut next = 0usize;
        for s in 0..spec.num_states {
            pf_offset.push(next);
            next += spec.children[s].len();
        }
        for s in 0..spec.num_states {
            pb_offset.push(next);
            next += spec.parents[s].len();
        }
        let flow_offset = next;
        next += spec.num_states;
        let edge_offset = next;
        next += spec.num_edges();
        let log_z_offset = next;
        next += 1;

        let mut params = vec![0.0; next];
        for v in params[..flow_offset].iter_mut() {
            *v = rng.gen_range(-0.1..0.1);
        }
        for v in params[flow_offset..log_z_offset].iter_mut() {
            *v = rng.gen_range(-0.1..0.1);
        }
        params[log_z_offset] = 0.0;
        if pb_mode == PbMode::FrozenUniform {
            // Frozen uniform P_B: equal (zero) logits, never updated.
            for s in 0..spec.num_states {
                let len = spec.parents[s].len();
                params[pb_offset[s]..pb_offset[s] + len].fill(0.0);
            }
        }
        TabularParams {
            params,
            pf_offset,
            pb_offset,
            flow_offset,
            edge_offset,
            log_z_offset,
            pb_mode,
        }
    }

    fn pb_range(&self) -> std::ops::Range<usize> {
        self.pb_offset[0]..self.flow_offset
    }

    pub fn set_pf_logit(&mut self, s: StateId, slot: usize, v: f64) {
        self.params[self.pf_offset[s] + slot] = v;
    }

    pub fn set_pb_logit(&mut self, s: StateId, slot: usize, v: f64) {
        self.params[self.pb_offset[s] + slot] = v;
    }

    /// Sets the log state flow; at the initial state this is log Z.
    pub fn set_log_flow(&mut self, s: StateId, v: f64) {
        if s == 0 {
            self.params[self.log_z_offset] = v;
        } else {
            self.params[self.flow_offset + s] = v;
        }
    }

    pub fn set_log_edge(&mut self, spec: &DagSpec, s: StateId, slot: usize, v: f64) {
        self.params[self.edge_offset + spec.edge_id(s, slot)] = v;
    }

    /// Loads an exact flow assignment: policies become the logits directly
    /// (log-probabilities are valid logits) and flows their logs.
    pub fn load_flow(
        &mut self,
        spec: &DagSpec,
        flow: &crate::flow::FlowAssignment,
        policies: &crate::flow::PolicyTable,
    ) {
        for s in 0..spec.num_states {
            for (k, &p) in policies.forward[s].iter().enumerate() {
                self.set_pf_logit(s, k, p.max(f64::MIN_POSITIVE).ln());
            }
            for (k, &p) in policies.backward[s].iter().enumerate() {
                self.set_pb_logit(s, k, p.max(f64::MIN_POSITIVE).ln());
            }
            self.set_log_flow(s, flow.state_flow[s].max(f64::MIN_POSITIVE).ln());
            for k in 0..spec.children[s].len() {
                let f = flow.edge_flow[spec.edge_id(s, k)];
                self.set_log_edge(spec, s, k, f.max(f64::MIN_POSITIVE).ln());
            }
        }
    }
}

impl Model for TabularParams {
    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn group(&self, index: usize) -> ParamGroup {
        if index == self.log_z_offset {
            ParamGroup::LogZ
        } else {
            ParamGroup::Policy
        }
    }

    fn is_frozen(&self, index: usize) -> bool {
        self.pb_mode == PbMode::FrozenUniform && self.pb_range().contains(&index)
    }

    fn log_z_offset(&self) -> usize {
        self.log_z_offset
    }

    fn heads(&self, tape: &mut Tape, spec: &DagSpec, s: StateId) -> Heads {
        let n_out = spec.children[s].len();
        let n_in = spec.parents[s].len();
        let log_pf = (n_out > 0).then(|| {
            let logits = tape.leaf(&self.params, self.pf_offset[s], n_out, false);
            tape.log_softmax(logits)
        });
        let log_pb = (n_in > 0).then(|| {
            let frozen = self.pb_mode == PbMode::FrozenUniform;
            let logits = tape.leaf(&self.params, self.pb_offset[s], n_in, frozen);
            tape.log_softmax(logits)
        });
        let log_flow = if s == 0 {
            tape.leaf(&self.params, self.log_z_offset, 1, false)
        } else {
            tape.leaf(&self.params, self.flow_offset + s, 1, false)
        };
        let log_edge = (n_out > 0).then(|| {
            tape.leaf(&self.params, self.edge_offset + spec.edge_id(s, 0), n_out, false)
        });
        Heads { log_pf, log_pb, log_flow, log_edge }
    }

    fn log_pf_row(&self, spec: &DagSpec, s: StateId) -> Vec<f64> {
        let n = spec.children[s].len();
        log_softmax_row(&self.params[self.pf_offset[s]..self.pf_offset[s] + n])
    }

    fn log_pb_row(&self, spec: &DagSpec, s: StateId) -> Vec<f64> {
        let n = spec.parents[s].len();
        if self.pb_mode == PbMode::FrozenUniform {
            return uniform_log_row(n);
        }
        log_softmax_row(&self.params[self.pb_offset[s]..self.pb_offset[s] + n])
    }

    fn log_flow_value(&self, _spec: &DagSpec, s: StateId) -> f64 {
        if s == 0 {
            self.params[self.log_z_offset]
        } else {
            self.params[self.flow_offset + s]
        }
    }

    fn log_edge_row(&self, spec: &DagSpec, s: StateId) -> Vec<f64> {
        let n = spec.children[s].len();
        let off = self.edge_offset + spec.edge_id(s, 0);
        self.params[off..off + n].to_vec()
    }
}

/// MLP over state encodings: two hidden layers, shared trunk, and output
/// heads for the forward policy (doubling as log edge flows), backward
/// policy, and log state flow. Nonexistent action slots are excluded by
/// gathering only valid slots before the softmax.
pub struct MlpParams {
    params: Vec<f64>,
    input_dim: usize,
    hidden: usize,
    max_out: usize,
    max_in: usize,
    // Offsets into the flat parameter vector.
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w_pf: usize,
    b_pf: usize,
    w_pb: usize,
    b_pb: usize,
    w_flow: usize,
    b_flow: usize,
    log_z_offset: usize,
    pb_mode: PbMode,
}

impl MlpParams {
    pub fn new<R: Rng>(spec: &DagSpec, hidden: usize, pb_mode: PbMode, rng: &mut R) -> Self {
        let input_dim = spec.encoding_dim();
        let max_out = spec.max_out_degree();
        let max_in = spec.max_in_degree();
        let mut next = 0usize;
        let mut take = |n: usize| {
            let off = next;
            next += n;
            off
        };
        let w1 = take(hidden * input_dim);
        let b1 = take(hidden);
        let w2 = take(hidden * hidden);
        let b2 = take(hidden);
        let w_pf = take(max_out * hidden);
        let b_pf = take(max_out);
        let w_pb = take(max_in * hidden);
        let b_pb = take(max_in);
        let w_flow = take(hidden);
        let b_flow = take(1);
        let log_z_offset = take(1);

        let mut params = vec![0.0; next];
        let mut init = |off: usize, len: usize, fan_in: usize| {
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            for v in params[off..off + len].iter_mut() {
                *v = rng.gen_range(-bound..bound);
            }
        };
        init(w1, hidden * input_dim, input_dim);
        init(w2, hidden * hidden, hidden);
        init(w_pf, max_out * hidden, hidden);
        init(w_pb, max_in * hidden, hidden);
        init(w_flow, hidden, hidden);
        // Biases and log Z start at zero.
        MlpParams {
            params,
            input_dim,
            hidden,
            max_out,
            max_in,
            w1,
            b1,
            w2,
            b2,
            w_pf,
            b_pf,
            w_pb,
            b_pb,
            w_flow,
            b_flow,
            log_z_offset,
            pb_mode,
        }
    }

    fn trunk_tape(&self, tape: &mut Tape, enc: &[f64]) -> NodeId {
        let x = tape.constant(enc.to_vec());
        let w1 = tape.leaf(&self.params, self.w1, self.hidden * self.input_dim, false);
        let b1 = tape.leaf(&self.params, self.b1, self.hidden, false);
        let h = tape.matvec(w1, x, self.hidden, self.input_dim);
        let h = tape.add_vec(h, b1);
        let h = tape.leaky_relu(h);
        let w2 = tape.leaf(&self.params, self.w2, self.hidden * self.hidden, false);
        let b2 = tape.leaf(&self.params, self.b2, self.hidden, false);
        let h = tape.matvec(w2, h, self.hidden, self.hidden);
        let h = tape.add_vec(h, b2);
        tape.leaky_relu(h)
    }

    fn head_tape(
        &self,
        tape: &mut Tape,
        trunk: NodeId,
        w: usize,
        b: usize,
        width: usize,
        take: usize,
    ) -> NodeId {
        let wn = tape.leaf(&self.params, w, width * self.hidden, false);
        let bn = tape.leaf(&self.params, b, width, false);
        let o = tape.matvec(wn, trunk, width, self.hidden);
        let o = tape.add_vec(o, bn);
        if take == width {
            o
        } else {
            tape.gather(o, (0..take).collect())
        }
    }

    fn trunk_numeric(&self, enc: &[f64]) -> Vec<f64> {
        let affine = |w: usize, b: usize, rows: usize, cols: usize, x: &[f64]| -> Vec<f64> {
            (0..rows)
                .map(|i| {
                    let row = &self.params[w + i * cols..w + (i + 1) * cols];
                    row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + self.params[b + i]
                })
                .collect()
        };
        let lrelu = |mut v: Vec<f64>| {
            for x in v.iter_mut() {
                if *x < 0.0 {
                    *x *= LEAKY_SLOPE;
                }
            }
            v
        };
        let h = lrelu(affine(self.w1, self.b1, self.hidden, self.input_dim, enc));
        lrelu(affine(self.w2, self.b2, self.hidden, self.hidden, &h))
    }

    fn head_numeric(&self, trunk: &[f64], w: usize, b: usize, take: usize) -> Vec<f64> {
        (0..take)
            .map(|i| {
                let row = &self.params[w + i * self.hidden..w + (i + 1) * self.hidden];
                row.iter().zip(trunk).map(|(a, v)| a * v).sum::<f64>() + self.params[b + i]
            })
            .collect()
    }
}

impl Model for MlpParams {
    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn group(&self, index: usize) -> ParamGroup {
        if index == self.log_z_offset {
            ParamGroup::LogZ
        } else {
            ParamGroup::Policy
        }
    }

    fn is_frozen(&self, _index: usize) -> bool {
        false
    }

    fn log_z_offset(&self) -> usize {
        self.log_z_offset
    }

    fn heads(&self, tape: &mut Tape, spec: &DagSpec, s: StateId) -> Heads {
        let n_out = spec.children[s].len();
        let n_in = spec.parents[s].len();
        let trunk = self.trunk_tape(tape, &spec.encoding[s]);
        let log_pf_edge = (n_out > 0)
            .then(|| self.head_tape(tape, trunk, self.w_pf, self.b_pf, self.max_out, n_out));
        let log_pf = log_pf_edge.map(|logits| tape.log_softmax(logits));
        let log_pb = (n_in > 0).then(|| {
            if self.pb_mode == PbMode::FrozenUniform {
                tape.constant(uniform_log_row(n_in))
            } else {
                let logits =
                    self.head_tape(tape, trunk, self.w_pb, self.b_pb, self.max_in, n_in);
                tape.log_softmax(logits)
            }
        });
        let log_flow = if s == 0 {
            tape.leaf(&self.params, self.log_z_offset, 1, false)
        } else {
            self.head_tape(tape, trunk, self.w_flow, self.b_flow, 1, 1)
        };
        Heads { log_pf, log_pb, log_flow, log_edge: log_pf_edge }
    }

    fn log_pf_row(&self, spec: &DagSpec, s: StateId) -> Vec<f64> {
        log_softmax_row(&self.log_edge_row(spec, s))
    }

    fn log_pb_row(&self, spec: &DagSpec, s: StateId) -> Vec<f64> {
        let n = spec.parents[s].len();
        if self.pb_mode == PbMode::FrozenUniform {
            return uniform_log_row(n);
        }
        let trunk = self.trunk_numeric(&spec.encoding[s]);
        log_softmax_row(&self.head_numeric(&trunk, self.w_pb, self.b_pb, n))
    }

    fn log_flow_value(&self, spec: &DagSpec, s: StateId) -> f64 {
        if s == 0 {
            return self.params[self.log_z_offset];
        }
        let trunk = self.trunk_numeric(&spec.encoding[s]);
        self.head_numeric(&trunk, self.w_flow, self.b_flow, 1)[0]
    }

    fn log_edge_row(&self, spec: &DagSpec, s: StateId) -> Vec<f64> {
        let trunk = self.trunk_numeric(&spec.encoding[s]);
        self.head_numeric(&trunk, self.w_pf, self.b_pf, spec.children[s].len())
    }
}

/// Numeric forward policies for every state, as a table usable by the exact
/// DP oracles.
pub fn forward_policy_table(model: &dyn Model, spec: &DagSpec) -> Vec<Vec<f64>> {
    (0..spec.num_states)
        .map(|s| {
            if spec.terminal[s] {
                Vec::new()
            } else {
                model.log_pf_row(spec, s).iter().map(|&l| l.exp()).collect()
            }
        })
        .collect()
}

/// Numeric backward policies for every state.
pub fn backward_policy_table(model: &dyn Model, spec: &DagSpec) -> Vec<Vec<f64>> {
    (0..spec.num_states)
        .map(|s| {
            if s == 0 {
                Vec::new()
            } else {
                model.log_pb_row(spec, s).iter().map(|&l| l.exp()).collect()
            }
        })
        .collect()
}
