//! Flat-sectioned `key = value` run configuration with a typed schema.
//! Unknown sections or keys are rejected; every field has a documented
//! default (several defaults are per-environment).

use std::collections::BTreeMap;

use thiserror::Error;

use crate::envs::{BitSeqConfig, HypergridConfig};
use crate::model::PbMode;
use crate::objectives::ObjectiveParams;
use crate::optim::AdamConfig;
use crate::training::{ExplorationPolicy, ExploreMode, Objective, TrainOptions};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {0}: {1}")]
    Syntax(usize, String),
    #[error("unknown section [{0}]")]
    UnknownSection(String),
    #[error("unknown key '{key}' in section [{section}]")]
    UnknownKey { section: String, key: String },
    #[error("missing required key '{key}' in section [{section}]")]
    MissingKey { section: String, key: String },
    #[error("bad value for '{key}': {msg}")]
    BadValue { key: String, msg: String },
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EnvConfig {
    Hypergrid(HypergridConfig),
    Bitseq(BitSeqConfig),
}

/// Which states carry flow heads for the subtrajectory objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HubPolicy {
    All,
    Endpoints,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ObjectiveConfig {
    pub objective: Objective,
    pub beta: f64,
    pub lambda_t: f64,
    pub eps: f64,
    pub hubs: HubPolicy,
    pub pb_mode: PbMode,
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Tabular,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Hidden layer width (MLP only; two layers of this size).
    pub hidden: usize,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct TrainingConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub lr_policy: f64,
    pub lr_log_z: f64,
    pub exploration: ExploreMode,
    pub epsilon: f64,
    pub temperature: f64,
    pub seed: u64,
    pub eval_interval: u64,
    pub window: usize,
    pub loss_window: usize,
    pub convergence_threshold: Option<f64>,
    pub patience: u32,
    pub exact_eval: bool,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub objective: ObjectiveConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub out_dir: String,
}

impl RunConfig {
    pub fn objective_params(&self) -> ObjectiveParams {
        ObjectiveParams {
            beta: self.objective.beta,
            lambda_t: self.objective.lambda_t,
            eps: self.objective.eps,
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        let t = &self.training;
        TrainOptions {
            iterations: t.iterations,
            batch_size: t.batch_size,
            adam: AdamConfig::new(t.lr_policy, t.lr_log_z),
            objective: self.objective.objective,
            objective_params: self.objective_params(),
            explore: ExplorationPolicy {
                mode: t.exploration,
                epsilon: t.epsilon,
                temperature: t.temperature,
            },
            eval_interval: t.eval_interval,
            window: t.window,
            loss_window: t.loss_window,
            convergence_threshold: t.convergence_threshold,
            patience: t.patience,
            exact_eval: t.exact_eval,
        }
    }
}

/// One parsed section with consumed-key tracking.
struct Section {
    name: String,
    entries: BTreeMap<String, (String, bool)>,
}

impl Section {
    fn take(&mut self, key: &str) -> Option<String> {
        self.entries.get_mut(key).map(|(v, used)| {
            *used = true;
            v.clone()
        })
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        match self.take(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|e| ConfigError::BadValue {
                key: key.to_string(),
                msg: format!("{e}"),
            }),
        }
    }

    fn require(&mut self, key: &str) -> Result<String, ConfigError> {
        self.take(key).ok_or_else(|| ConfigError::MissingKey {
            section: self.name.clone(),
            key: key.to_string(),
        })
    }

    fn finish(&self) -> Result<(), ConfigError> {
        for (k, (_, used)) in &self.entries {
            if !used {
                return Err(ConfigError::UnknownKey {
                    section: self.name.clone(),
                    key: k.clone(),
                });
            }
        }
        Ok(())
    }
}

fn split_sections(text: &str) -> Result<BTreeMap<String, Section>, ConfigError> {
    let mut out: BTreeMap<String, Section> = BTreeMap::new();
    let mut current: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('[') {
            if !line.ends_with(']') {
                return Err(ConfigError::Syntax(i + 1, "unterminated section header".into()));
            }
            let name = line[1..line.len() - 1].trim().to_string();
            if !["env", "objective", "model", "training", "output"].contains(&name.as_str()) {
                return Err(ConfigError::UnknownSection(name));
            }
            out.entry(name.clone()).or_insert_with(|| Section {
                name: name.clone(),
                entries: BTreeMap::new(),
            });
            current = Some(name);
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ConfigError::Syntax(i + 1, format!("expected key = value, got '{line}'")));
        };
        let Some(ref sec) = current else {
            return Err(ConfigError::Syntax(i + 1, "key before any section header".into()));
        };
        out.get_mut(sec)
            .unwrap()
            .entries
            .insert(key.trim().to_string(), (value.trim().to_string(), false));
    }
    Ok(out)
}

fn empty_section(name: &str) -> Section {
    Section { name: name.to_string(), entries: BTreeMap::new() }
}

pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let mut sections = split_sections(text)?;
    let mut env = sections.remove("env").unwrap_or_else(|| empty_section("env"));
    let mut obj = sections.remove("objective").unwrap_or_else(|| empty_section("objective"));
    let mut model = sections.remove("model").unwrap_or_else(|| empty_section("model"));
    let mut training = sections.remove("training").unwrap_or_else(|| empty_section("training"));
    let mut output = sections.remove("output").unwrap_or_else(|| empty_section("output"));

    let env_type = env.require("type")?;
    let env_cfg = match env_type.as_str() {
        "hypergrid" => EnvConfig::Hypergrid(HypergridConfig {
            h: env.parse("h")?.unwrap_or(8),
            d: env.parse("d")?.unwrap_or(2),
            r0: env.parse("r0")?.unwrap_or(0.1),
        }),
        "bitseq" => {
            let n = env.parse("n")?.unwrap_or(16);
            EnvConfig::Bitseq(BitSeqConfig {
                n,
                k: env.parse("k")?.unwrap_or(1),
                b: env.parse("b")?.unwrap_or(8.min(n)),
                num_modes: env.parse("num_modes")?.unwrap_or(4),
                delta: env.parse("delta")?.unwrap_or(3),
                seed: env.parse("seed")?.unwrap_or(0),
            })
        }
        other => {
            return Err(ConfigError::BadValue {
                key: "type".into(),
                msg: format!("unknown environment '{other}'"),
            })
        }
    };
    env.finish()?;
    let is_grid = matches!(env_cfg, EnvConfig::Hypergrid(_));

    let objective = match obj.take("type").as_deref().unwrap_or("tb") {
        "fm" => Objective::Fm,
        "db" => Objective::Db,
        "tb" => Objective::Tb,
        "tb_tree" => Objective::TbTree,
        "subtb" => Objective::SubTb,
        other => {
            return Err(ConfigError::BadValue {
                key: "type".into(),
                msg: format!("unknown objective '{other}'"),
            })
        }
    };
    let obj_cfg = ObjectiveConfig {
        objective,
        // Reward exponent defaults match the per-domain experiment settings.
        beta: obj.parse("beta")?.unwrap_or(if is_grid { 1.0 } else { 3.0 }),
        lambda_t: obj.parse("lambda_t")?.unwrap_or(1.0),
        eps: obj.parse("eps")?.unwrap_or(1e-8),
        hubs: match obj.take("hubs").as_deref().unwrap_or("all") {
            "all" => HubPolicy::All,
            "endpoints" => HubPolicy::Endpoints,
            other => {
                return Err(ConfigError::BadValue {
                    key: "hubs".into(),
                    msg: format!("unknown hub policy '{other}'"),
                })
            }
        },
        pb_mode: match obj.take("pb_mode").as_deref().unwrap_or("learned") {
            "learned" => PbMode::Learned,
            "frozen_uniform" => PbMode::FrozenUniform,
            other => {
                return Err(ConfigError::BadValue {
                    key: "pb_mode".into(),
                    msg: format!("unknown pb mode '{other}'"),
                })
            }
        },
    };
    obj.finish()?;

    let model_cfg = ModelConfig {
        kind: match model.take("type").as_deref().unwrap_or("mlp") {
            "tabular" => ModelKind::Tabular,
            "mlp" => ModelKind::Mlp,
            other => {
                return Err(ConfigError::BadValue {
                    key: "type".into(),
                    msg: format!("unknown model '{other}'"),
                })
            }
        },
        hidden: model.parse("hidden")?.unwrap_or(256),
    };
    model.finish()?;

    let exploration = match training.take("exploration").as_deref() {
        None => {
            if is_grid {
                ExploreMode::OnPolicy
            } else {
                ExploreMode::EpsilonUniform
            }
        }
        Some("on_policy") => ExploreMode::OnPolicy,
        Some("epsilon_uniform") => ExploreMode::EpsilonUniform,
        Some("tempered") => ExploreMode::Tempered,
        Some(other) => {
            return Err(ConfigError::BadValue {
                key: "exploration".into(),
                msg: format!("unknown exploration mode '{other}'"),
            })
        }
    };
    let training_cfg = TrainingConfig {
        iterations: training.parse("iterations")?.unwrap_or(1000),
        batch_size: training.parse("batch_size")?.unwrap_or(16),
        // Per-domain learning-rate defaults.
        lr_policy: training.parse("lr_policy")?.unwrap_or(if is_grid { 1e-3 } else { 1e-4 }),
        lr_log_z: training.parse("lr_log_z")?.unwrap_or(if is_grid { 1e-1 } else { 1e-3 }),
        exploration,
        epsilon: training.parse("epsilon")?.unwrap_or(if is_grid { 0.0 } else { 0.0005 }),
        temperature: training.parse("temperature")?.unwrap_or(1.0),
        seed: training.parse("seed")?.unwrap_or(0),
        eval_interval: training.parse("eval_interval")?.unwrap_or(100),
        window: training.parse("window")?.unwrap_or(100_000),
        loss_window: training.parse("loss_window")?.unwrap_or(100),
        convergence_threshold: training.parse("convergence_threshold")?,
        patience: training.parse("patience")?.unwrap_or(1),
        // Exact evaluation enumerates flows; cheap on grids, skipped by
        // default on the larger sequence trees.
        exact_eval: training.parse("exact_eval")?.unwrap_or(is_grid),
    };
    training.finish()?;

    let out_dir = output.take("dir").unwrap_or_else(|| "out".to_string());
    output.finish()?;

    Ok(RunConfig {
        env: env_cfg,
        objective: obj_cfg,
        model: model_cfg,
        training: training_cfg,
        out_dir,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const GRID: &str = "\
[env]
type = hypergrid
h = 4
d = 2
r0 = 0.1

[objective]
type = tb
pb_mode = frozen_uniform

[model]
type = tabular

[training]
iterations = 500
seed = 3
";

    #[test]
    fn parses_grid_config_with_defaults() {
        let cfg = parse_config(GRID).unwrap();
        assert_eq!(cfg.env, EnvConfig::Hypergrid(HypergridConfig { h: 4, d: 2, r0: 0.1 }));
        assert_eq!(cfg.objective.objective, Objective::Tb);
        assert_eq!(cfg.objective.pb_mode, PbMode::FrozenUniform);
        assert_eq!(cfg.objective.beta, 1.0); // grid default
        assert_eq!(cfg.model.kind, ModelKind::Tabular);
        assert_eq!(cfg.training.batch_size, 16);
        assert_eq!(cfg.training.lr_policy, 1e-3);
        assert_eq!(cfg.training.lr_log_z, 1e-1);
        assert_eq!(cfg.training.epsilon, 0.0);
        assert_eq!(cfg.training.seed, 3);
        assert!(cfg.training.exact_eval);
        assert_eq!(cfg.out_dir, "out");
    }

    #[test]
    fn bitseq_defaults_differ() {
        let cfg = parse_config("[env]\ntype = bitseq\nn = 16\nk = 2\n").unwrap();
        assert_eq!(cfg.objective.beta, 3.0);
        assert_eq!(cfg.training.lr_policy, 1e-4);
        assert_eq!(cfg.training.lr_log_z, 1e-3);
        assert_eq!(cfg.training.epsilon, 0.0005);
        assert_eq!(cfg.training.exploration, ExploreMode::EpsilonUniform);
        assert!(!cfg.training.exact_eval);
        match cfg.env {
            EnvConfig::Bitseq(b) => {
                assert_eq!((b.n, b.k, b.b, b.num_modes, b.delta), (16, 2, 8, 4, 3));
            }
            _ => panic!("wrong env"),
        }
    }

    #[test]
    fn unknown_keys_and_sections_are_rejected() {
        let bad_key = "[env]\ntype = hypergrid\nhh = 3\n";
        assert!(matches!(
            parse_config(bad_key),
            Err(ConfigError::UnknownKey { .. })
        ));
        let bad_section = "[environment]\ntype = hypergrid\n";
        assert!(matches!(
            parse_config(bad_section),
            Err(ConfigError::UnknownSection(_))
        ));
        let bad_value = "[env]\ntype = hypergrid\nh = four\n";
        assert!(matches!(parse_config(bad_value), Err(ConfigError::BadValue { .. })));
        let missing = "[objective]\ntype = tb\n";
        assert!(matches!(parse_config(missing), Err(ConfigError::MissingKey { .. })));
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let text = "# run\n[env]\ntype = hypergrid # inline\n\nh = 2\n";
        let cfg = parse_config(text).unwrap();
        assert_eq!(cfg.env, EnvConfig::Hypergrid(HypergridConfig { h: 2, d: 2, r0: 0.1 }));
    }
}
