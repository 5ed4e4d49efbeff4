//! Orchestration shared by the CLI and the acceptance suite: building
//! environments and models from a `RunConfig`, running training with metric
//! enrichment, evaluating checkpoints, and reading/writing the run files
//! (`metrics.csv`, `manifest.json`, `checkpoint.bin`, `.flow`).

use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::config::{EnvConfig, ModelKind, RunConfig};
use crate::dag::{enumerate_trajectories, DagError, DagSpec, StateId};
use crate::envs::{
    bitseq_string_of_state, build_bitseq_spec, build_hypergrid_spec, generate_modes,
    generate_test_set, EnvError, ModeSet,
};
use crate::flow::{
    flow_from_forward, policies_from_flow, residual_db, residual_fm, residual_tb, FlowAssignment,
    FlowError,
};
use crate::metrics::{log_likelihoods, metrics_to_csv, modes_found, spearman, MetricsRecord};
use crate::model::{Heads, MlpParams, Model, ParamGroup, PbMode, TabularParams};
use crate::objectives::{loss_db, loss_fm, loss_subtb, loss_tb, loss_tb_tree, HubSet, LossBatch};
use crate::training::{Objective, TrainError, Trainer};

/// State-count guard for exhaustive environment construction.
pub const STATE_CAP: u128 = 1 << 22;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Dag(#[from] DagError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{0}")]
    Other(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> RunError + '_ {
    move |source| RunError::Io { path: path.to_path_buf(), source }
}

/// A constructed environment: the DAG, raw rewards per terminal state, and
/// the sequence-domain extras where applicable.
pub struct BuiltEnv {
    pub spec: DagSpec,
    pub rewards: Vec<f64>,
    pub modes: Option<ModeSet>,
    pub test_set: Option<Vec<(String, f64)>>,
    /// Terminal state id of each test-set string (same order).
    pub test_states: Option<Vec<StateId>>,
    /// String form of each terminal, indexed by state id (bit sequences).
    pub strings: Option<Vec<Option<String>>>,
    /// Mode-capture radius (bit sequences).
    pub delta: Option<usize>,
}

pub fn build_env(cfg: &EnvConfig) -> Result<BuiltEnv, RunError> {
    match cfg {
        EnvConfig::Hypergrid(g) => {
            let (spec, rewards) = build_hypergrid_spec(g, STATE_CAP)?;
            Ok(BuiltEnv {
                spec,
                rewards,
                modes: None,
                test_set: None,
                test_states: None,
                strings: None,
                delta: None,
            })
        }
        EnvConfig::Bitseq(b) => {
            let mut rng = ChaCha12Rng::seed_from_u64(b.seed);
            let modes = generate_modes(b, &mut rng)?;
            let test_set = generate_test_set(&modes, b, &mut rng)?;
            let (spec, rewards) = build_bitseq_spec(b, &modes, STATE_CAP)?;
            let mut strings: Vec<Option<String>> = vec![None; spec.num_states];
            let mut by_string: HashMap<String, StateId> = HashMap::new();
            for x in spec.terminal_states() {
                let s = bitseq_string_of_state(x, b);
                by_string.insert(s.clone(), x);
                strings[x] = Some(s);
            }
            let test_states = test_set
                .iter()
                .map(|(s, _)| *by_string.get(s).expect("test string is a terminal"))
                .collect();
            Ok(BuiltEnv {
                spec,
                rewards,
                modes: Some(modes),
                test_set: Some(test_set),
                test_states: Some(test_states),
                strings: Some(strings),
                delta: Some(b.delta),
            })
        }
    }
}

/// Either parametrization behind one trait object, so the trainer and the
/// checkpoint code stay generic.
pub enum AnyModel {
    Tabular(TabularParams),
    Mlp(MlpParams),
}

impl AnyModel {
    fn inner(&self) -> &dyn Model {
        match self {
            AnyModel::Tabular(m) => m,
            AnyModel::Mlp(m) => m,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn Model {
        match self {
            AnyModel::Tabular(m) => m,
            AnyModel::Mlp(m) => m,
        }
    }
}

impl Model for AnyModel {
    fn params(&self) -> &[f64] {
        self.inner().params()
    }
    fn params_mut(&mut self) -> &mut [f64] {
        self.inner_mut().params_mut()
    }
    fn group(&self, index: usize) -> ParamGroup {
        self.inner().group(index)
    }
    fn is_frozen(&self, index: usize) -> bool {
        self.inner().is_frozen(index)
    }
    fn log_z_offset(&self) -> usize {
        self.inner().log_z_offset()
    }
    fn heads(&self, tape: &mut crate::tape::Tape, spec: &DagSpec, s: StateId) -> Heads {
        self.inner().heads(tape, spec, s)
    }
    fn log_pf_row(&self, spec: &DagSpec, s: StateId) -> Vec<f64> {
        self.inner().log_pf_row(spec, s)
    }
    fn log_pb_row(&self, spec: &DagSpec, s: StateId) -> Vec<f64> {
        self.inner().log_pb_row(spec, s)
    }
    fn log_flow_value(&self, spec: &DagSpec, s: StateId) -> f64 {
        self.inner().log_flow_value(spec, s)
    }
    fn log_edge_row(&self, spec: &DagSpec, s: StateId) -> Vec<f64> {
        self.inner().log_edge_row(spec, s)
    }
}

pub fn build_model(cfg: &RunConfig, spec: &DagSpec, rng: &mut ChaCha12Rng) -> AnyModel {
    match cfg.model.kind {
        ModelKind::Tabular => {
            AnyModel::Tabular(TabularParams::new(spec, cfg.objective.pb_mode, rng))
        }
        ModelKind::Mlp => {
            AnyModel::Mlp(MlpParams::new(spec, cfg.model.hidden, cfg.objective.pb_mode, rng))
        }
    }
}

/// Write a file atomically: temp file in the same directory, then rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), RunError> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default()
    ));
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))?;
    Ok(())
}

/// FNV-1a of the running executable, standing in for a content hash of the
/// binary in the manifest.
fn binary_hash() -> String {
    let bytes = std::env::current_exe().ok().and_then(|p| fs::read(p).ok()).unwrap_or_default();
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    format!("{h:016x}")
}

/// Sequence-domain enrichment: modes found among the visited-terminal window
/// and rank correlations of exact likelihood vs. reward on the test set.
fn enrich_bitseq(
    record: &mut MetricsRecord,
    trainer: &Trainer<AnyModel>,
    env: &BuiltEnv,
) {
    let (Some(modes), Some(test_set), Some(test_states), Some(strings)) =
        (&env.modes, &env.test_set, &env.test_states, &env.strings)
    else {
        return;
    };
    let Some(delta) = env.delta else { return };
    let visited: Vec<String> = {
        let mut seen = std::collections::HashSet::new();
        trainer
            .terminals
            .iter()
            .filter(|&&x| seen.insert(x))
            .filter_map(|&x| strings[x].clone())
            .collect()
    };
    record.modes_found = Some(modes_found(&visited, modes, delta));
    let lp = log_likelihoods(&trainer.model, &env.spec);
    let pairs: Vec<(f64, f64)> = test_set
        .iter()
        .zip(test_states)
        .map(|((_, r), &x)| (r.ln(), lp[x]))
        .collect();
    record.spearman = spearman(&pairs).ok();
    record.pearson = crate::metrics::pearson(&pairs).ok();
}

/// Everything a finished training run produced.
pub struct TrainedRun {
    pub trainer: Trainer<AnyModel>,
    pub records: Vec<MetricsRecord>,
    pub env: BuiltEnv,
}

/// Run training per the config. When `out_dir` is given, metrics.csv,
/// checkpoint.bin, and manifest.json are written there.
pub fn train_run(
    cfg: &RunConfig,
    out_dir: Option<&Path>,
    resume: Option<&Path>,
) -> Result<TrainedRun, RunError> {
    let started = std::time::Instant::now();
    let env = build_env(&cfg.env)?;
    let opts = cfg.train_options();
    opts.explore.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.training.seed);
    let model = build_model(cfg, &env.spec, &mut rng);
    let mut trainer = Trainer::new(model, opts.adam.clone(), rng);
    if let Some(path) = resume {
        let bytes = fs::read(path).map_err(io_err(path))?;
        checkpoint::load(&mut trainer, &mut bytes.as_slice())?;
    }
    let is_bitseq = env.modes.is_some();
    let mut records: Vec<MetricsRecord> = Vec::new();
    {
        let env_ref = &env;
        trainer.run(&env.spec, &env.rewards, &opts, |mut r, t| {
            if is_bitseq {
                enrich_bitseq(&mut r, t, env_ref);
            }
            records.push(r);
        })?;
    }
    if let Some(dir) = out_dir {
        write_outputs(cfg, dir, &trainer, &records, started.elapsed().as_secs_f64())?;
    }
    Ok(TrainedRun { trainer, records, env })
}

fn write_outputs(
    cfg: &RunConfig,
    dir: &Path,
    trainer: &Trainer<AnyModel>,
    records: &[MetricsRecord],
    wall_seconds: f64,
) -> Result<(), RunError> {
    atomic_write(&dir.join("metrics.csv"), metrics_to_csv(records).as_bytes())?;
    let mut ckpt = Vec::new();
    checkpoint::save(trainer, &mut ckpt)?;
    atomic_write(&dir.join("checkpoint.bin"), &ckpt)?;
    let manifest = serde_json::json!({
        "version": 1,
        "config": cfg,
        "seed": cfg.training.seed,
        "binary_fnv1a": binary_hash(),
        "wall_seconds": wall_seconds,
        "iterations_done": trainer.iteration,
    });
    atomic_write(
        &dir.join("manifest.json"),
        (serde_json::to_string_pretty(&manifest).expect("config serializes") + "\n").as_bytes(),
    )?;
    Ok(())
}

/// Evaluate a checkpoint: the standard metrics record at the stored
/// iteration, enriched for the sequence domain.
pub fn eval_run(cfg: &RunConfig, ckpt_path: &Path) -> Result<(MetricsRecord, BuiltEnv), RunError> {
    let env = build_env(&cfg.env)?;
    let opts = cfg.train_options();
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.training.seed);
    let model = build_model(cfg, &env.spec, &mut rng);
    let mut trainer = Trainer::new(model, opts.adam.clone(), rng);
    let bytes = fs::read(ckpt_path).map_err(io_err(ckpt_path))?;
    checkpoint::load(&mut trainer, &mut bytes.as_slice())?;
    let mut r = trainer_metrics(&trainer, &env, &opts);
    if env.modes.is_some() {
        enrich_bitseq(&mut r, &trainer, &env);
    }
    Ok((r, env))
}

fn trainer_metrics(
    trainer: &Trainer<AnyModel>,
    env: &BuiltEnv,
    opts: &crate::training::TrainOptions,
) -> MetricsRecord {
    // Mirrors Trainer::metrics, which is private to the training module.
    let beta = opts.objective_params.beta;
    let target: Vec<f64> = env.rewards.iter().map(|r| r.powf(beta)).collect();
    let exact = if opts.exact_eval {
        let forward = crate::model::forward_policy_table(&trainer.model, &env.spec);
        crate::flow::terminating_distribution(&env.spec, 1.0, &forward)
            .ok()
            .and_then(|d| crate::flow::exact_l1(&env.spec, &d, &target).ok())
    } else {
        None
    };
    let buf: Vec<StateId> = trainer.terminals.iter().copied().collect();
    let emp = crate::metrics::empirical_l1(&buf, &env.spec, &target).ok();
    MetricsRecord {
        iteration: trainer.iteration,
        mean_loss: if trainer.losses.is_empty() {
            0.0
        } else {
            trainer.losses.iter().sum::<f64>() / trainer.losses.len() as f64
        },
        exact_l1: exact,
        empirical_l1: emp,
        log_z: trainer.model.log_z(),
        modes_found: None,
        spearman: None,
        pearson: None,
    }
}

/// The batch loss for the configured objective, usable by gradcheck.
pub fn eval_objective_loss(
    cfg: &RunConfig,
    model: &dyn Model,
    spec: &DagSpec,
    batch: &[crate::dag::Trajectory],
    rewards: &[f64],
) -> Result<LossBatch, RunError> {
    let p = cfg.objective_params();
    let lb = match cfg.objective.objective {
        Objective::Fm => loss_fm(model, spec, batch, rewards, &p),
        Objective::Db => loss_db(model, spec, batch, rewards, &p),
        Objective::Tb => loss_tb(model, spec, batch, rewards, &p),
        Objective::TbTree => loss_tb_tree(model, spec, batch, rewards, &p),
        Objective::SubTb => {
            let hubs = match cfg.objective.hubs {
                crate::config::HubPolicy::All => HubSet::all(spec),
                crate::config::HubPolicy::Endpoints => HubSet::endpoints(spec),
            };
            loss_subtb(model, spec, batch, rewards, &hubs, &p)
        }
    };
    lb.map_err(|e| RunError::Other(format!("{e}")))
}

// ---------------------------------------------------------------------------
// .flow files

/// Serialize edge flows and terminal rewards.
///
/// ```text
/// flow v1
/// edges <E>
/// <from> <to> <value>     x E
/// rewards <T>
/// <state> <value>         x T
/// ```
pub fn flow_to_text(spec: &DagSpec, flow: &FlowAssignment, rewards: &[f64]) -> String {
    let mut out = String::from("flow v1\n");
    out.push_str(&format!("edges {}\n", spec.num_edges()));
    for s in 0..spec.num_states {
        for (k, &c) in spec.children[s].iter().enumerate() {
            out.push_str(&format!("{s} {c} {}\n", flow.edge_flow[spec.edge_id(s, k)]));
        }
    }
    let terms: Vec<StateId> = spec.terminal_states().collect();
    out.push_str(&format!("rewards {}\n", terms.len()));
    for x in terms {
        out.push_str(&format!("{x} {}\n", rewards[x]));
    }
    out
}

/// Parse a `.flow` file against a spec; state flows are recovered from edge
/// sums (outflow at the initial state, inflow elsewhere).
pub fn flow_from_text(
    spec: &DagSpec,
    text: &str,
) -> Result<(FlowAssignment, Vec<f64>), RunError> {
    let bad = |line: usize, msg: String| RunError::Other(format!("flow line {line}: {msg}"));
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| bad(0, "empty file".into()))?;
    if header.trim() != "flow v1" {
        return Err(bad(1, format!("expected 'flow v1', got '{header}'")));
    }
    let mut edge_flow = vec![0.0; spec.num_edges()];
    let mut rewards = vec![0.0; spec.num_states];
    let (i, edges_line) = lines.next().ok_or_else(|| bad(1, "missing edges header".into()))?;
    let e_count: usize = edges_line
        .strip_prefix("edges ")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad(i + 1, "expected 'edges <count>'".into()))?;
    for _ in 0..e_count {
        let (i, line) = lines.next().ok_or_else(|| bad(0, "truncated edge list".into()))?;
        let mut it = line.split_whitespace();
        let parse = |v: Option<&str>| {
            v.and_then(|v| v.parse::<f64>().ok())
                .ok_or_else(|| bad(i + 1, format!("bad edge line '{line}'")))
        };
        let from = parse(it.next())? as usize;
        let to = parse(it.next())? as usize;
        let value = parse(it.next())?;
        let e = spec
            .find_edge(from, to)
            .ok_or_else(|| bad(i + 1, format!("no edge {from} -> {to} in spec")))?;
        edge_flow[e] = value;
    }
    let (i, rewards_line) = lines.next().ok_or_else(|| bad(0, "missing rewards header".into()))?;
    let r_count: usize = rewards_line
        .strip_prefix("rewards ")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad(i + 1, "expected 'rewards <count>'".into()))?;
    for _ in 0..r_count {
        let (i, line) = lines.next().ok_or_else(|| bad(0, "truncated reward list".into()))?;
        let mut it = line.split_whitespace();
        let parse = |v: Option<&str>| {
            v.and_then(|v| v.parse::<f64>().ok())
                .ok_or_else(|| bad(i + 1, format!("bad reward line '{line}'")))
        };
        let x = parse(it.next())? as usize;
        rewards[x] = parse(it.next())?;
    }
    let mut state_flow = vec![0.0; spec.num_states];
    for s in 0..spec.num_states {
        if s == 0 {
            state_flow[0] =
                (0..spec.children[0].len()).map(|k| edge_flow[spec.edge_id(0, k)]).sum();
        } else {
            state_flow[s] = spec.parent_edge_ids(s).iter().map(|&e| edge_flow[e]).sum();
        }
    }
    Ok((FlowAssignment { state_flow, edge_flow }, rewards))
}

/// Residual summary of one constraint family.
#[derive(Debug, Clone)]
pub struct ResidualSummary {
    pub family: &'static str,
    pub max_abs: f64,
    pub mean_abs: f64,
    pub count: usize,
}

/// Max/mean absolute residuals per constraint family for a flow file.
pub fn check_flow(
    spec: &DagSpec,
    flow: &FlowAssignment,
    rewards: &[f64],
    trajectory_cap: u128,
) -> Result<Vec<ResidualSummary>, RunError> {
    let mut out = Vec::new();
    let policies = policies_from_flow(spec, flow)?;

    let mut fm = Vec::new();
    for s in 1..spec.num_states {
        fm.push(residual_fm(spec, &flow.edge_flow, rewards, s, 0.0)?.abs());
    }
    out.push(summarize("fm", &fm));

    let mut db = Vec::new();
    for s in 0..spec.num_states {
        for &c in &spec.children[s] {
            db.push(residual_db(spec, &flow.state_flow, &policies, (s, c), rewards, 0.0)?.abs());
        }
    }
    out.push(summarize("db", &db));

    match enumerate_trajectories(spec, trajectory_cap) {
        Ok(trajs) => {
            let z = flow.partition();
            let mut tb = Vec::new();
            for t in &trajs {
                tb.push(residual_tb(spec, z.ln(), &policies, t, rewards, 0.0)?.abs());
            }
            out.push(summarize("tb", &tb));
        }
        Err(DagError::TooManyTrajectories { .. }) => {}
        Err(e) => return Err(e.into()),
    }
    Ok(out)
}

fn summarize(family: &'static str, vals: &[f64]) -> ResidualSummary {
    let max_abs = vals.iter().cloned().fold(0.0, f64::max);
    let mean_abs =
        if vals.is_empty() { 0.0 } else { vals.iter().sum::<f64>() / vals.len() as f64 };
    ResidualSummary { family, max_abs, mean_abs, count: vals.len() }
}

/// Exact flow for a model's forward policy (partition fixed by log Z).
pub fn model_flow(model: &dyn Model, spec: &DagSpec) -> Result<FlowAssignment, RunError> {
    let forward = crate::model::forward_policy_table(model, spec);
    Ok(flow_from_forward(spec, model.log_z().exp(), &forward)?)
}
