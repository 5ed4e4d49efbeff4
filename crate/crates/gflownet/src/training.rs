//! The training loop: exploratory trajectory sampling, batch loss and
//! gradient evaluation, optimizer stepping, metric emission, and convergence
//! monitoring.

use std::collections::VecDeque;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::dag::{DagSpec, StateId, Trajectory};
use crate::flow::{exact_l1, terminating_distribution};
use crate::metrics::{empirical_l1, MetricsRecord};
use crate::model::{forward_policy_table, Model};
use crate::objectives::{
    loss_db, loss_fm, loss_subtb, loss_tb, loss_tb_tree, HubSet, LossBatch, ObjectiveError,
    ObjectiveParams,
};
use crate::optim::{Adam, AdamConfig};
use crate::tape::log_sum_exp;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss became NaN at iteration {iteration}; diagnostic: {diagnostic}")]
    NaN { iteration: u64, diagnostic: String },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("bad exploration policy: {0}")]
    BadExploration(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ExploreMode {
    OnPolicy,
    EpsilonUniform,
    Tempered,
}

/// Training-time sampling policy. Epsilon mixes in uniform random valid
/// actions; temperature rescales the P_F logits during sampling only — the
/// objective always uses the untempered P_F.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ExplorationPolicy {
    pub mode: ExploreMode,
    pub epsilon: f64,
    pub temperature: f64,
}

impl ExplorationPolicy {
    pub fn on_policy() -> Self {
        ExplorationPolicy { mode: ExploreMode::OnPolicy, epsilon: 0.0, temperature: 1.0 }
    }

    pub fn epsilon_uniform(epsilon: f64) -> Self {
        ExplorationPolicy { mode: ExploreMode::EpsilonUniform, epsilon, temperature: 1.0 }
    }

    pub fn tempered(temperature: f64) -> Self {
        ExplorationPolicy { mode: ExploreMode::Tempered, epsilon: 0.0, temperature }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(TrainError::BadExploration(format!("epsilon {} not in [0,1]", self.epsilon)));
        }
        if self.temperature < 1.0 {
            return Err(TrainError::BadExploration(format!(
                "temperature {} below 1",
                self.temperature
            )));
        }
        Ok(())
    }

    /// Sampling probabilities over the valid child slots of one state.
    pub fn action_probs(&self, log_pf_row: &[f64]) -> Vec<f64> {
        let n = log_pf_row.len();
        let base: Vec<f64> = match self.mode {
            ExploreMode::Tempered => {
                let scaled: Vec<f64> = log_pf_row.iter().map(|l| l / self.temperature).collect();
                let lse = log_sum_exp(&scaled);
                scaled.iter().map(|l| (l - lse).exp()).collect()
            }
            _ => log_pf_row.iter().map(|l| l.exp()).collect(),
        };
        if self.mode == ExploreMode::EpsilonUniform && self.epsilon > 0.0 {
            let u = 1.0 / n as f64;
            base.iter().map(|p| (1.0 - self.epsilon) * p + self.epsilon * u).collect()
        } else {
            base
        }
    }
}

/// Draw one complete trajectory from the exploratory policy.
pub fn sample_trajectory(
    model: &dyn Model,
    spec: &DagSpec,
    explore: &ExplorationPolicy,
    rng: &mut ChaCha12Rng,
) -> Trajectory {
    let mut states = vec![0];
    let mut s = 0;
    while !spec.terminal[s] {
        let probs = explore.action_probs(&model.log_pf_row(spec, s));
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut slot = probs.len() - 1;
        for (k, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                slot = k;
                break;
            }
        }
        s = spec.children[s][slot];
        states.push(s);
    }
    let traj = Trajectory { states };
    debug_assert!(traj.is_valid(spec));
    traj
}

/// Which loss drives training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Objective {
    Fm,
    Db,
    Tb,
    TbTree,
    SubTb,
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub iterations: u64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub objective: Objective,
    pub objective_params: ObjectiveParams,
    pub explore: ExplorationPolicy,
    pub eval_interval: u64,
    /// Visited-terminal ring buffer size for empirical L1.
    pub window: usize,
    /// Running-loss window span (batch losses).
    pub loss_window: usize,
    /// Stop early once the loss-window mean stays below the threshold for
    /// `patience` consecutive evaluations.
    pub convergence_threshold: Option<f64>,
    pub patience: u32,
    /// Compute exact L1 each evaluation (cheap only on small specs).
    pub exact_eval: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            iterations: 1000,
            batch_size: 16,
            adam: AdamConfig::new(1e-3, 1e-1),
            objective: Objective::Tb,
            objective_params: ObjectiveParams::default(),
            explore: ExplorationPolicy::on_policy(),
            eval_interval: 100,
            window: 100_000,
            loss_window: 100,
            convergence_threshold: None,
            patience: 1,
            exact_eval: true,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Convergence {
    pub converged: bool,
    pub window_mean: f64,
}

/// Mutable training state: the model, the optimizer, the RNG, and the
/// monitoring buffers.
pub struct Trainer<M: Model> {
    pub model: M,
    pub opt: Adam,
    pub rng: ChaCha12Rng,
    pub iteration: u64,
    pub losses: VecDeque<f64>,
    pub terminals: VecDeque<StateId>,
    pub(crate) streak: u32,
}

impl<M: Model> Trainer<M> {
    pub fn new(model: M, adam: AdamConfig, rng: ChaCha12Rng) -> Self {
        let n = model.num_params();
        Trainer {
            model,
            opt: Adam::new(adam, n),
            rng,
            iteration: 0,
            losses: VecDeque::new(),
            terminals: VecDeque::new(),
            streak: 0,
        }
    }

    fn eval_loss(
        &self,
        spec: &DagSpec,
        batch: &[Trajectory],
        rewards: &[f64],
        opts: &TrainOptions,
        hubs: &HubSet,
    ) -> Result<LossBatch, ObjectiveError> {
        let p = &opts.objective_params;
        match opts.objective {
            Objective::Fm => loss_fm(&self.model, spec, batch, rewards, p),
            Objective::Db => loss_db(&self.model, spec, batch, rewards, p),
            Objective::Tb => loss_tb(&self.model, spec, batch, rewards, p),
            Objective::TbTree => loss_tb_tree(&self.model, spec, batch, rewards, p),
            Objective::SubTb => loss_subtb(&self.model, spec, batch, rewards, hubs, p),
        }
    }

    /// One iteration: sample a batch, evaluate the loss, step the optimizer.
    pub fn step(
        &mut self,
        spec: &DagSpec,
        rewards: &[f64],
        opts: &TrainOptions,
        hubs: &HubSet,
    ) -> Result<f64, TrainError> {
        let batch: Vec<Trajectory> = (0..opts.batch_size)
            .map(|_| sample_trajectory(&self.model, spec, &opts.explore, &mut self.rng))
            .collect();
        for t in &batch {
            if self.terminals.len() == opts.window {
                self.terminals.pop_front();
            }
            self.terminals.push_back(t.terminal());
        }
        let lb = self.eval_loss(spec, &batch, rewards, opts, hubs)?;
        if !lb.mean.is_finite() {
            return Err(TrainError::NaN {
                iteration: self.iteration,
                diagnostic: format!(
                    "mean loss {}, log_z {}, per-trajectory losses {:?}",
                    lb.mean,
                    self.model.log_z(),
                    lb.losses
                ),
            });
        }
        self.opt.step(&mut self.model, &lb.grad);
        if self.losses.len() == opts.loss_window {
            self.losses.pop_front();
        }
        self.losses.push_back(lb.mean);
        self.iteration += 1;
        Ok(lb.mean)
    }

    /// Convergence state of the running loss window.
    pub fn running_convergence(&self, threshold: f64, patience: u32) -> Convergence {
        let mean = if self.losses.is_empty() {
            f64::INFINITY
        } else {
            self.losses.iter().sum::<f64>() / self.losses.len() as f64
        };
        Convergence { converged: self.streak >= patience && mean < threshold, window_mean: mean }
    }

    fn metrics(&self, spec: &DagSpec, rewards: &[f64], opts: &TrainOptions) -> MetricsRecord {
        let mean_loss = if self.losses.is_empty() {
            0.0
        } else {
            self.losses.iter().sum::<f64>() / self.losses.len() as f64
        };
        // The sampler is trained toward R^beta, so L1 targets use it too.
        let beta = opts.objective_params.beta;
        let target: Vec<f64> = rewards.iter().map(|r| r.powf(beta)).collect();
        let exact = if opts.exact_eval {
            let forward = forward_policy_table(&self.model, spec);
            terminating_distribution(spec, 1.0, &forward)
                .ok()
                .and_then(|d| exact_l1(spec, &d, &target).ok())
        } else {
            None
        };
        let emp = {
            let buf: Vec<StateId> = self.terminals.iter().copied().collect();
            empirical_l1(&buf, spec, &target).ok()
        };
        MetricsRecord {
            iteration: self.iteration,
            mean_loss,
            exact_l1: exact,
            empirical_l1: emp,
            log_z: self.model.log_z(),
            modes_found: None,
            spearman: None,
            pearson: None,
        }
    }

    /// Run the loop for `opts.iterations` more iterations, emitting a metrics
    /// record at iteration 0, every `eval_interval`, and at the end. The sink
    /// may enrich records with domain metrics before persisting them.
    pub fn run(
        &mut self,
        spec: &DagSpec,
        rewards: &[f64],
        opts: &TrainOptions,
        mut sink: impl FnMut(MetricsRecord, &Self),
    ) -> Result<(), TrainError> {
        let hubs = HubSet::all(spec);
        if self.iteration == 0 {
            sink(self.metrics(spec, rewards, opts), self);
        }
        let end = self.iteration + opts.iterations;
        while self.iteration < end {
            self.step(spec, rewards, opts, &hubs)?;
            let at_eval = self.iteration % opts.eval_interval == 0 || self.iteration == end;
            if !at_eval {
                continue;
            }
            sink(self.metrics(spec, rewards, opts), self);
            if let Some(threshold) = opts.convergence_threshold {
                let mean = self.losses.iter().sum::<f64>() / self.losses.len() as f64;
                if mean < threshold {
                    self.streak += 1;
                } else {
                    self.streak = 0;
                }
                if self.running_convergence(threshold, opts.patience).converged {
                    return Ok(());
                }
            }
        }
        Ok(())
    }
}
