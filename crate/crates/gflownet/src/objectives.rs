//! Differentiable training losses over the gradient tape: flow matching,
//! detailed balance, trajectory balance (plus its tree form), subtrajectory
//! balance over hub segments, and the Reinforce-KL gradient used for the
//! equivalence check.

use std::collections::HashMap;

use thiserror::Error;

use crate::dag::{enumerate_trajectories, DagError, DagSpec, StateId, Trajectory};
use crate::model::{BatchEval, Model};
use crate::tape::NodeId;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("nonpositive reward at terminal {0}")]
    NonpositiveReward(StateId),
    #[error("rewards must be normalized to sum 1, got {0}")]
    UnnormalizedRewards(f64),
    #[error("spec is not a tree")]
    NotATree,
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Dag(#[from] DagError),
}

/// Loss hyperparameters: reward exponent, leaf coefficient (FM only), and
/// the smoothing constant added inside each log operand.
#[derive(Debug, Clone)]
pub struct ObjectiveParams {
    pub beta: f64,
    pub lambda_t: f64,
    pub eps: f64,
}

impl Default for ObjectiveParams {
    fn default() -> Self {
        ObjectiveParams { beta: 1.0, lambda_t: 1.0, eps: 1e-8 }
    }
}

impl ObjectiveParams {
    /// No smoothing, unit exponent: the setting under which exact models
    /// reach loss zero bit-for-bit.
    pub fn exact() -> Self {
        ObjectiveParams { beta: 1.0, lambda_t: 1.0, eps: 0.0 }
    }

    fn log_reward(&self, rewards: &[f64], x: StateId) -> Result<f64, ObjectiveError> {
        let v = rewards[x].powf(self.beta) + self.eps;
        if v <= 0.0 {
            return Err(ObjectiveError::NonpositiveReward(x));
        }
        Ok(v.ln())
    }
}

/// Batch loss: per-trajectory values, their mean, and the gradient of the
/// mean with respect to the flat parameter vector.
#[derive(Debug, Clone)]
pub struct LossBatch {
    pub losses: Vec<f64>,
    pub mean: f64,
    pub grad: Vec<f64>,
}

/// States at which the subtrajectory-balance objective reads the flow head.
/// Always contains the initial state and every terminal.
#[derive(Debug, Clone)]
pub struct HubSet {
    pub membership: Vec<bool>,
}

impl HubSet {
    pub fn all(spec: &DagSpec) -> Self {
        HubSet { membership: vec![true; spec.num_states] }
    }

    /// Just the mandatory hubs: s0 and the terminals.
    pub fn endpoints(spec: &DagSpec) -> Self {
        let mut membership: Vec<bool> = spec.terminal.clone();
        membership[0] = true;
        HubSet { membership }
    }

    pub fn with_hubs(spec: &DagSpec, extra: &[StateId]) -> Self {
        let mut h = Self::endpoints(spec);
        for &s in extra {
            h.membership[s] = true;
        }
        h
    }

    pub fn is_hub(&self, s: StateId) -> bool {
        self.membership[s]
    }
}

fn child_slot(spec: &DagSpec, a: StateId, b: StateId) -> usize {
    spec.children[a].iter().position(|&c| c == b).expect("edge not in spec")
}

fn parent_slot(spec: &DagSpec, a: StateId, b: StateId) -> usize {
    spec.parents[b].iter().position(|&p| p == a).expect("edge not in spec")
}

fn finish(
    model: &dyn Model,
    be: &mut BatchEval,
    per_traj: Vec<NodeId>,
) -> Result<LossBatch, ObjectiveError> {
    if per_traj.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    let losses: Vec<f64> = per_traj.iter().map(|&n| be.tape.scalar(n)).collect();
    let n = per_traj.len();
    let total = be.tape.sum_many(per_traj);
    let mean_node = be.tape.scale(total, 1.0 / n as f64);
    let mean = be.tape.scalar(mean_node);
    let mut grad = vec![0.0; model.num_params()];
    be.tape.backward(mean_node, &mut grad);
    Ok(LossBatch { losses, mean, grad })
}

/// Flow matching: squared log inflow/outflow gap at each noninitial interior
/// state of the trajectory, with the terminal outflow replaced by the reward
/// and weighted by `lambda_t`.
pub fn loss_fm(
    model: &dyn Model,
    spec: &DagSpec,
    batch: &[Trajectory],
    rewards: &[f64],
    p: &ObjectiveParams,
) -> Result<LossBatch, ObjectiveError> {
    let mut be = BatchEval::new();
    let mut state_term: HashMap<StateId, NodeId> = HashMap::new();
    let mut per_traj = Vec::with_capacity(batch.len());
    for traj in batch {
        let mut terms = Vec::new();
        for &s in &traj.states[1..] {
            if let Some(&t) = state_term.get(&s) {
                terms.push(t);
                continue;
            }
            // log(sum of inflows + eps)
            let mut in_parts = Vec::new();
            for &q in &spec.parents[s] {
                let edge_row = be.heads(model, spec, q).log_edge.unwrap();
                in_parts.push(be.tape.index(edge_row, child_slot(spec, q, s)));
            }
            if p.eps > 0.0 {
                let c = be.tape.constant(vec![p.eps.ln()]);
                in_parts.push(c);
            }
            let in_vec = be.tape.concat(in_parts);
            let log_in = be.tape.log_sum_exp(in_vec);
            let term = if spec.terminal[s] {
                let r = be.tape.add_const(log_in, -p.log_reward(rewards, s)?);
                let sq = be.tape.square(r);
                be.tape.scale(sq, p.lambda_t)
            } else {
                let edge_row = be.heads(model, spec, s).log_edge.unwrap();
                let log_out = if p.eps > 0.0 {
                    let c = be.tape.constant(vec![p.eps.ln()]);
                    let v = be.tape.concat(vec![edge_row, c]);
                    be.tape.log_sum_exp(v)
                } else {
                    be.tape.log_sum_exp(edge_row)
                };
                let r = be.tape.sub(log_in, log_out);
                be.tape.square(r)
            };
            state_term.insert(s, term);
            terms.push(term);
        }
        per_traj.push(be.tape.sum_many(terms));
    }
    finish(model, &mut be, per_traj)
}

/// Detailed balance: squared residual
/// `log F(s) + log P_F(s'|s) - log F(s') - log P_B(s|s')` on every edge,
/// with `R(s')` replacing the flow at terminal targets.
pub fn loss_db(
    model: &dyn Model,
    spec: &DagSpec,
    batch: &[Trajectory],
    rewards: &[f64],
    p: &ObjectiveParams,
) -> Result<LossBatch, ObjectiveError> {
    let mut be = BatchEval::new();
    let mut edge_term: HashMap<(StateId, StateId), NodeId> = HashMap::new();
    let mut per_traj = Vec::with_capacity(batch.len());
    for traj in batch {
        let mut terms = Vec::new();
        for (a, b) in traj.edges() {
            if let Some(&t) = edge_term.get(&(a, b)) {
                terms.push(t);
                continue;
            }
            let ha = {
                let h = be.heads(model, spec, a);
                (h.log_pf.unwrap(), h.log_flow)
            };
            let pf = be.tape.index(ha.0, child_slot(spec, a, b));
            let pos = be.tape.sum_many(vec![ha.1, pf]);
            let hb = {
                let h = be.heads(model, spec, b);
                (h.log_pb.unwrap(), h.log_flow)
            };
            let pb = be.tape.index(hb.0, parent_slot(spec, a, b));
            let target = if spec.terminal[b] {
                be.tape.constant(vec![p.log_reward(rewards, b)?])
            } else {
                hb.1
            };
            let neg = be.tape.sum_many(vec![target, pb]);
            let r = be.tape.sub(pos, neg);
            let term = be.tape.square(r);
            edge_term.insert((a, b), term);
            terms.push(term);
        }
        per_traj.push(be.tape.sum_many(terms));
    }
    finish(model, &mut be, per_traj)
}

/// Trajectory balance: squared residual
/// `log Z + sum log P_F - log R(x) - sum log P_B` per trajectory.
pub fn loss_tb(
    model: &dyn Model,
    spec: &DagSpec,
    batch: &[Trajectory],
    rewards: &[f64],
    p: &ObjectiveParams,
) -> Result<LossBatch, ObjectiveError> {
    loss_tb_inner(model, spec, batch, rewards, p, true)
}

/// Tree specialization of trajectory balance: the backward policy is the
/// constant 1, so its term is dropped.
pub fn loss_tb_tree(
    model: &dyn Model,
    spec: &DagSpec,
    batch: &[Trajectory],
    rewards: &[f64],
    p: &ObjectiveParams,
) -> Result<LossBatch, ObjectiveError> {
    if !spec.is_tree() {
        return Err(ObjectiveError::NotATree);
    }
    loss_tb_inner(model, spec, batch, rewards, p, false)
}

fn loss_tb_inner(
    model: &dyn Model,
    spec: &DagSpec,
    batch: &[Trajectory],
    rewards: &[f64],
    p: &ObjectiveParams,
    with_pb: bool,
) -> Result<LossBatch, ObjectiveError> {
    let mut be = BatchEval::new();
    let mut pf_cache: HashMap<(StateId, StateId), NodeId> = HashMap::new();
    let mut pb_cache: HashMap<(StateId, StateId), NodeId> = HashMap::new();
    let mut per_traj = Vec::with_capacity(batch.len());
    for traj in batch {
        let z = be.log_z(model);
        let mut pos = vec![z];
        let mut neg = Vec::new();
        for (a, b) in traj.edges() {
            let pf = *pf_cache.entry((a, b)).or_insert_with(|| {
                let row = be.heads(model, spec, a).log_pf.unwrap();
                be.tape.index(row, child_slot(spec, a, b))
            });
            pos.push(pf);
            if with_pb {
                let pb = *pb_cache.entry((a, b)).or_insert_with(|| {
                    let row = be.heads(model, spec, b).log_pb.unwrap();
                    be.tape.index(row, parent_slot(spec, a, b))
                });
                neg.push(pb);
            }
        }
        let pos = be.tape.sum_many(pos);
        let r = if neg.is_empty() {
            pos
        } else {
            let neg = be.tape.sum_many(neg);
            be.tape.sub(pos, neg)
        };
        let r = be.tape.add_const(r, -p.log_reward(rewards, traj.terminal())?);
        per_traj.push(be.tape.square(r));
    }
    finish(model, &mut be, per_traj)
}

/// Subtrajectory balance: squared residuals over the segments between
/// consecutive hub states, with `F(s0) = Z` (by the flow-head convention)
/// and `F(x) = R(x)` at terminal hubs.
pub fn loss_subtb(
    model: &dyn Model,
    spec: &DagSpec,
    batch: &[Trajectory],
    rewards: &[f64],
    hubs: &HubSet,
    p: &ObjectiveParams,
) -> Result<LossBatch, ObjectiveError> {
    let mut be = BatchEval::new();
    let mut per_traj = Vec::with_capacity(batch.len());
    for traj in batch {
        let mut terms = Vec::new();
        let states = &traj.states;
        let mut seg_start = 0;
        for i in 1..states.len() {
            if !hubs.is_hub(states[i]) {
                continue;
            }
            let first = states[seg_start];
            let last = states[i];
            let f_first = be.heads(model, spec, first).log_flow;
            let mut pos = vec![f_first];
            let mut neg = Vec::new();
            for w in states[seg_start..=i].windows(2) {
                let (a, b) = (w[0], w[1]);
                let row = be.heads(model, spec, a).log_pf.unwrap();
                pos.push(be.tape.index(row, child_slot(spec, a, b)));
                let row = be.heads(model, spec, b).log_pb.unwrap();
                neg.push(be.tape.index(row, parent_slot(spec, a, b)));
            }
            let f_last = if spec.terminal[last] {
                be.tape.constant(vec![p.log_reward(rewards, last)?])
            } else {
                be.heads(model, spec, last).log_flow
            };
            neg.push(f_last);
            let pos = be.tape.sum_many(pos);
            let neg = be.tape.sum_many(neg);
            let r = be.tape.sub(pos, neg);
            terms.push(be.tape.square(r));
            seg_start = i;
        }
        per_traj.push(be.tape.sum_many(terms));
    }
    finish(model, &mut be, per_traj)
}

/// Numeric log-probability of a trajectory under the forward policy.
pub fn log_pf_trajectory(model: &dyn Model, spec: &DagSpec, traj: &Trajectory) -> f64 {
    traj.edges()
        .map(|(a, b)| model.log_pf_row(spec, a)[child_slot(spec, a, b)])
        .sum()
}

/// Numeric log-probability of a trajectory under the backward policy.
pub fn log_pb_trajectory(model: &dyn Model, spec: &DagSpec, traj: &Trajectory) -> f64 {
    traj.edges()
        .map(|(a, b)| model.log_pb_row(spec, b)[parent_slot(spec, a, b)])
        .sum()
}

/// Per-batch Reinforce-KL gradient estimator with fixed P_B:
/// `(log(P_F(tau) / (R(x) P_B(tau|x))) + 1) * grad log P_F(tau)`,
/// averaged over the batch. The `+1` score term has zero expectation.
pub fn kl_reinforce_gradient(
    model: &dyn Model,
    spec: &DagSpec,
    batch: &[Trajectory],
    rewards: &[f64],
) -> Result<Vec<f64>, ObjectiveError> {
    if batch.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    let total: f64 = spec.terminal_states().map(|x| rewards[x]).sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(ObjectiveError::UnnormalizedRewards(total));
    }
    let mut be = BatchEval::new();
    let mut weighted = Vec::with_capacity(batch.len());
    for traj in batch {
        let x = traj.terminal();
        if rewards[x] <= 0.0 {
            return Err(ObjectiveError::NonpositiveReward(x));
        }
        let c = log_pf_trajectory(model, spec, traj)
            - rewards[x].ln()
            - log_pb_trajectory(model, spec, traj);
        let pf_terms: Vec<NodeId> = traj
            .edges()
            .map(|(a, b)| {
                let row = be.heads(model, spec, a).log_pf.unwrap();
                be.tape.index(row, child_slot(spec, a, b))
            })
            .collect();
        let log_pf = be.tape.sum_many(pf_terms);
        weighted.push(be.tape.scale(log_pf, (c + 1.0) / batch.len() as f64));
    }
    let root = be.tape.sum_many(weighted);
    let mut grad = vec![0.0; model.num_params()];
    be.tape.backward(root, &mut grad);
    Ok(grad)
}

/// Exact expected TB gradient: enumerate all trajectories and weight each
/// single-trajectory gradient by P_F(tau).
pub fn expected_gradient_tb(
    model: &dyn Model,
    spec: &DagSpec,
    rewards: &[f64],
    p: &ObjectiveParams,
    cap: u128,
) -> Result<Vec<f64>, ObjectiveError> {
    let trajs = enumerate_trajectories(spec, cap)?;
    let mut acc = vec![0.0; model.num_params()];
    for traj in &trajs {
        let w = log_pf_trajectory(model, spec, traj).exp();
        let lb = loss_tb(model, spec, std::slice::from_ref(traj), rewards, p)?;
        for (a, g) in acc.iter_mut().zip(&lb.grad) {
            *a += w * g;
        }
    }
    Ok(acc)
}

/// Exact expected Reinforce-KL gradient over all trajectories.
pub fn expected_gradient_kl(
    model: &dyn Model,
    spec: &DagSpec,
    rewards: &[f64],
) -> Result<Vec<f64>, ObjectiveError> {
    let trajs = enumerate_trajectories(spec, u128::MAX)?;
    let mut acc = vec![0.0; model.num_params()];
    for traj in &trajs {
        let w = log_pf_trajectory(model, spec, traj).exp();
        let g = kl_reinforce_gradient(model, spec, std::slice::from_ref(traj), rewards)?;
        for (a, gi) in acc.iter_mut().zip(&g) {
            *a += w * gi;
        }
    }
    Ok(acc)
}
