//! Experiment configuration: one TOML file with flat, documented keys,
//! plus dotted-path overrides from the command line. Unknown keys are
//! rejected so provenance stays trustworthy.

use serde::{Deserialize, Serialize};

use seqstop::env::EnvId;
use seqstop::error::{Error, Result};
use seqstop::example1::Ex1Config;
use seqstop::example2::Ex2Config;
use seqstop::forward::ForwardOptions;
use seqstop::pg::{Baseline, PgConfig};
use seqstop::qlearn::{DqnConfig, TabularConfig};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub config_version: u32,
    pub env: EnvSection,
    pub sim: SimSection,
    pub dp: DpSection,
    pub boundary: BoundarySection,
    pub qlearn: QlearnSection,
    pub dqn: DqnSection,
    pub pg: PgSection,
    pub output: OutputSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            config_version: CONFIG_VERSION,
            env: EnvSection::default(),
            sim: SimSection::default(),
            dp: DpSection::default(),
            boundary: BoundarySection::default(),
            qlearn: QlearnSection::default(),
            dqn: DqnSection::default(),
            pg: PgSection::default(),
            output: OutputSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvSection {
    /// Which trial to run: "example1" or "example2".
    pub id: String,
    pub example1: Ex1Config,
    pub example2: Ex2Config,
}

impl Default for EnvSection {
    fn default() -> Self {
        EnvSection {
            id: "example1".into(),
            example1: Ex1Config::default(),
            example2: Ex2Config::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSection {
    pub episodes: u32,
    pub seed: u64,
    /// Success-fraction bins of the binary trial's grid.
    pub p_bins: u32,
    /// (sd, mean) bins of the dose-finding grid.
    pub sd_bins: u32,
    pub mean_bins: u32,
}

impl Default for SimSection {
    fn default() -> Self {
        SimSection {
            episodes: 1000,
            seed: 20240601,
            p_bins: 100,
            sd_bins: 50,
            mean_bins: 50,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpSection {
    pub max_iterations: u32,
    pub change_threshold: u32,
}

impl Default for DpSection {
    fn default() -> Self {
        DpSection {
            max_iterations: 100,
            change_threshold: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundarySection {
    pub phi_lo: f64,
    pub phi_hi: f64,
    pub phi_points: u32,
    pub b_lo: f64,
    pub b_hi: f64,
    pub b_points: u32,
    pub c_lo: f64,
    pub c_hi: f64,
    pub c_points: u32,
}

impl Default for BoundarySection {
    fn default() -> Self {
        BoundarySection {
            phi_lo: 0.1,
            phi_hi: 0.9,
            phi_points: 33,
            b_lo: 0.0,
            b_hi: 3.0,
            b_points: 10,
            c_lo: 0.0,
            c_hi: 1.0,
            c_points: 10,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QlearnSection {
    pub episodes: u64,
    pub epsilon_initial: f64,
    pub epsilon_final: f64,
    pub epsilon_decay_frac: f64,
    /// 0 selects the visit-count schedule; anything positive is a constant
    /// step size.
    pub learning_rate: f64,
    pub p_bins: u32,
    pub seed: u64,
}

impl Default for QlearnSection {
    fn default() -> Self {
        let d = TabularConfig::default();
        QlearnSection {
            episodes: d.episodes,
            epsilon_initial: d.epsilon_initial,
            epsilon_final: d.epsilon_final,
            epsilon_decay_frac: d.epsilon_decay_frac,
            learning_rate: 0.0,
            p_bins: d.p_bins,
            seed: d.seed,
        }
    }
}

impl QlearnSection {
    pub fn to_core(&self) -> TabularConfig {
        TabularConfig {
            episodes: self.episodes,
            epsilon_initial: self.epsilon_initial,
            epsilon_final: self.epsilon_final,
            epsilon_decay_frac: self.epsilon_decay_frac,
            learning_rate: (self.learning_rate > 0.0).then_some(self.learning_rate),
            p_bins: self.p_bins,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DqnSection {
    pub total_steps: u64,
    pub buffer_capacity: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epsilon_initial: f64,
    pub epsilon_final: f64,
    pub epsilon_decay_frac: f64,
    pub target_sync_period: u64,
    pub warmup_steps: u64,
    pub eval_period: u64,
    pub eval_episodes: u32,
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for DqnSection {
    fn default() -> Self {
        let d = DqnConfig::default();
        DqnSection {
            total_steps: d.total_steps,
            buffer_capacity: d.buffer_capacity,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            epsilon_initial: d.epsilon_initial,
            epsilon_final: d.epsilon_final,
            epsilon_decay_frac: d.epsilon_decay_frac,
            target_sync_period: d.target_sync_period,
            warmup_steps: d.warmup_steps,
            eval_period: d.eval_period,
            eval_episodes: d.eval_episodes,
            hidden: d.hidden,
            seed: d.seed,
        }
    }
}

impl DqnSection {
    pub fn to_core(&self) -> DqnConfig {
        DqnConfig {
            total_steps: self.total_steps,
            buffer_capacity: self.buffer_capacity,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            epsilon_initial: self.epsilon_initial,
            epsilon_final: self.epsilon_final,
            epsilon_decay_frac: self.epsilon_decay_frac,
            target_sync_period: self.target_sync_period,
            warmup_steps: self.warmup_steps,
            eval_period: self.eval_period,
            eval_episodes: self.eval_episodes,
            hidden: self.hidden.clone(),
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PgSection {
    pub batches: u32,
    pub episodes_per_batch: u32,
    pub learning_rate: f64,
    /// "batch-mean" or "none".
    pub baseline: String,
    pub entropy_coef: f64,
    pub reward_to_go: bool,
    pub normalize_advantages: bool,
    pub initial_continue_logit: f64,
    pub eval_period: u32,
    pub eval_episodes: u32,
    pub hidden: Vec<usize>,
    pub stats_episodes: u32,
    /// Reference rollouts behind the region visitation mask.
    pub region_episodes: u32,
    pub seed: u64,
}

impl Default for PgSection {
    fn default() -> Self {
        let d = PgConfig::default();
        PgSection {
            batches: d.batches,
            episodes_per_batch: d.episodes_per_batch,
            learning_rate: d.learning_rate,
            baseline: "batch-mean".into(),
            entropy_coef: d.entropy_coef,
            reward_to_go: d.reward_to_go,
            normalize_advantages: d.normalize_advantages,
            initial_continue_logit: d.initial_continue_logit,
            eval_period: d.eval_period,
            eval_episodes: d.eval_episodes,
            hidden: d.hidden,
            stats_episodes: d.stats_episodes,
            region_episodes: 500,
            seed: d.seed,
        }
    }
}

impl PgSection {
    pub fn to_core(&self) -> Result<PgConfig> {
        let baseline = match self.baseline.as_str() {
            "batch-mean" => Baseline::BatchMean,
            "none" => Baseline::None,
            other => {
                return Err(Error::config(format!(
                    "pg.baseline must be \"batch-mean\" or \"none\", got `{other}`"
                )))
            }
        };
        Ok(PgConfig {
            batches: self.batches,
            episodes_per_batch: self.episodes_per_batch,
            learning_rate: self.learning_rate,
            baseline,
            entropy_coef: self.entropy_coef,
            reward_to_go: self.reward_to_go,
            normalize_advantages: self.normalize_advantages,
            initial_continue_logit: self.initial_continue_logit,
            eval_period: self.eval_period,
            eval_episodes: self.eval_episodes,
            hidden: self.hidden.clone(),
            stats_episodes: self.stats_episodes,
            seed: self.seed,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: String,
    /// Worker pool size; 0 uses the machine's parallelism.
    pub threads: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: "out".into(),
            threads: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn env_id(&self) -> Result<EnvId> {
        EnvId::parse(&self.env.id)
    }

    pub fn forward_options(&self) -> ForwardOptions {
        ForwardOptions {
            episodes: self.sim.episodes,
            master_seed: self.sim.seed,
            ex1_p_bins: self.sim.p_bins,
            ex2_bins: [self.sim.sd_bins, self.sim.mean_bins],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.config_version != CONFIG_VERSION {
            return Err(Error::config(format!(
                "config_version {} unsupported (expected {CONFIG_VERSION})",
                self.config_version
            )));
        }
        self.env_id()?;
        self.env.example1.validate()?;
        self.env.example2.validate()?;
        if self.sim.episodes == 0 {
            return Err(Error::config("sim.episodes must be positive"));
        }
        if self.boundary.phi_points < 2
            || !(self.boundary.phi_lo > 0.0)
            || !(self.boundary.phi_hi < 1.0)
            || !(self.boundary.phi_lo < self.boundary.phi_hi)
        {
            return Err(Error::config(
                "boundary.phi grid must satisfy 0 < phi_lo < phi_hi < 1 with at least 2 points",
            ));
        }
        self.pg.to_core()?.validate()?;
        self.dqn.to_core().validate()?;
        Ok(())
    }
}

/// Loads the configuration: defaults, overlaid by the optional file,
/// overlaid by dotted-path `--set key=value` overrides.
pub fn load_config(path: Option<&std::path::Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut value: toml::Value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::config(format!("cannot read config {}: {e}", p.display())))?;
            let table: toml::Table = text
                .parse()
                .map_err(|e| Error::config(format!("config parse error in {}: {e}", p.display())))?;
            toml::Value::Table(table)
        }
        None => toml::Value::try_from(ExperimentConfig::default()).expect("defaults serialize"),
    };
    for item in overrides {
        apply_override(&mut value, item)?;
    }
    let config: ExperimentConfig = value
        .try_into()
        .map_err(|e| Error::config(format!("invalid configuration: {e}")))?;
    config.validate()?;
    Ok(config)
}

fn apply_override(root: &mut toml::Value, item: &str) -> Result<()> {
    let (path, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override `{item}` must look like key.path=value")))?;
    // Parse the value as a TOML literal by embedding it in a document;
    // anything that fails to parse is taken as a bare string.
    let parsed: toml::Value = match format!("x = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("x").expect("just inserted"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override path `{path}` crosses a non-table")))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    unreachable!("the loop returns on the last segment")
}
