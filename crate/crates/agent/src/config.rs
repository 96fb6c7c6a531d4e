//! Flat key=value run configuration shared by training, evaluation and
//! the ablation harness. Unknown keys are an error.

use crate::error::AgentError;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    ImpalaOnly,
    ImpalaMem,
    ImpalaMemContrastiveUniform,
    Full,
}

impl Mode {
    pub fn parse(s: &str) -> Result<Self, AgentError> {
        match s {
            "impala_only" => Ok(Mode::ImpalaOnly),
            "impala_mem" => Ok(Mode::ImpalaMem),
            "impala_mem_contrastive_uniform" => Ok(Mode::ImpalaMemContrastiveUniform),
            "full" => Ok(Mode::Full),
            other => Err(AgentError::Config(format!("unknown mode '{other}'"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::ImpalaOnly => "impala_only",
            Mode::ImpalaMem => "impala_mem",
            Mode::ImpalaMemContrastiveUniform => "impala_mem_contrastive_uniform",
            Mode::Full => "full",
        }
    }

    pub fn uses_mem(&self) -> bool {
        !matches!(self, Mode::ImpalaOnly)
    }

    pub fn uses_contrastive(&self) -> bool {
        matches!(self, Mode::ImpalaMemContrastiveUniform | Mode::Full)
    }

    /// Whether transfers pick the rarest entries (vs uniform sampling).
    pub fn rare_transfer(&self) -> bool {
        matches!(self, Mode::Full)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvKind {
    Gridworld,
    ThreeDWorld,
}

impl EnvKind {
    pub fn parse(s: &str) -> Result<Self, AgentError> {
        match s {
            "gridworld" => Ok(EnvKind::Gridworld),
            "threedworld" => Ok(EnvKind::ThreeDWorld),
            other => Err(AgentError::Config(format!("unknown env '{other}'"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            EnvKind::Gridworld => "gridworld",
            EnvKind::ThreeDWorld => "threedworld",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub mode: Mode,
    pub env: EnvKind,
    pub seed: u64,

    // Environment family.
    pub n_maps: usize,
    pub n_objects: usize,
    pub grid_size: usize,
    pub step_limit: usize,
    pub action_repeats: usize,
    pub zipf_exponent: f64,

    // Collection and optimization.
    pub n_actors: usize,
    pub unroll_length: usize,
    pub total_env_steps: usize,
    pub discount: f64,
    pub baseline_loss_scale: f64,
    pub entropy_cost: f64,
    pub contrastive_weight: f64,
    pub learning_rate: f64,
    pub rmsprop_decay: f64,
    pub rmsprop_eps: f64,
    pub use_vtrace: bool,

    // Familiarity buffer and episodic memory.
    pub fam_capacity: usize,
    pub mem_capacity: usize,
    pub beta: f64,
    pub tau: f64,
    pub t_k: usize,
    pub t_f: usize,
    pub knn_k: usize,
    pub epsilon: f64,
    pub hop: usize,
    pub contrastive_batch: usize,
    pub refresh_keys_on_transfer: bool,
    pub save_familiarity: bool,
    pub dump_rarity_csv: bool,

    // Augmentations.
    pub sigma: f64,
    pub cutout_min_frac: f64,
    pub cutout_max_frac: f64,

    // Network sizes.
    pub embed_dim: usize,
    pub lstm_dim: usize,
    pub key_dim: usize,
    pub conv1_filters: usize,
    pub conv2_filters: usize,

    // Execution and evaluation.
    pub n_threads: usize,
    pub trials_per_cell: usize,
    pub eval_trials: usize,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            mode: Mode::Full,
            env: EnvKind::Gridworld,
            seed: 1,
            n_maps: 10,
            n_objects: 10,
            grid_size: 11,
            step_limit: 100,
            action_repeats: 1,
            zipf_exponent: 2.0,
            n_actors: 8,
            unroll_length: 32,
            total_env_steps: 200_000,
            discount: 0.99,
            baseline_loss_scale: 0.5,
            entropy_cost: 0.01,
            contrastive_weight: 0.5,
            learning_rate: 3e-4,
            rmsprop_decay: 0.99,
            rmsprop_eps: 1e-6,
            use_vtrace: false,
            fam_capacity: 1024,
            mem_capacity: 1024,
            beta: 0.97,
            tau: 0.5,
            t_k: 16,
            t_f: 8,
            knn_k: 16,
            epsilon: 1e-3,
            hop: 16,
            contrastive_batch: 256,
            refresh_keys_on_transfer: false,
            save_familiarity: false,
            dump_rarity_csv: false,
            sigma: 0.05,
            cutout_min_frac: 0.1,
            cutout_max_frac: 0.3,
            embed_dim: 128,
            lstm_dim: 128,
            key_dim: 64,
            conv1_filters: 16,
            conv2_filters: 32,
            n_threads: 0,
            trials_per_cell: 50,
            eval_trials: 20_000,
        }
    }
}

impl Config {
    pub fn from_file(path: &Path) -> Result<Self, AgentError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str_contents(&text)
    }

    pub fn from_str_contents(text: &str) -> Result<Self, AgentError> {
        let mut cfg = Config::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(AgentError::Config(format!(
                    "line {}: expected key=value, got '{raw}'",
                    lineno + 1
                )));
            };
            cfg.apply(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), AgentError> {
        fn p<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, AgentError> {
            value
                .parse()
                .map_err(|_| AgentError::Config(format!("bad value '{value}' for key '{key}'")))
        }
        match key {
            "mode" => self.mode = Mode::parse(value)?,
            "env" => self.env = EnvKind::parse(value)?,
            "seed" => self.seed = p(key, value)?,
            "n_maps" => self.n_maps = p(key, value)?,
            "n_objects" => self.n_objects = p(key, value)?,
            "grid_size" => self.grid_size = p(key, value)?,
            "step_limit" => self.step_limit = p(key, value)?,
            "action_repeats" => self.action_repeats = p(key, value)?,
            "zipf_exponent" => self.zipf_exponent = p(key, value)?,
            "n_actors" => self.n_actors = p(key, value)?,
            "unroll_length" => self.unroll_length = p(key, value)?,
            "total_env_steps" => self.total_env_steps = p(key, value)?,
            "discount" => self.discount = p(key, value)?,
            "baseline_loss_scale" => self.baseline_loss_scale = p(key, value)?,
            "entropy_cost" => self.entropy_cost = p(key, value)?,
            "contrastive_weight" => self.contrastive_weight = p(key, value)?,
            "learning_rate" => self.learning_rate = p(key, value)?,
            "rmsprop_decay" => self.rmsprop_decay = p(key, value)?,
            "rmsprop_eps" => self.rmsprop_eps = p(key, value)?,
            "use_vtrace" => self.use_vtrace = p(key, value)?,
            "fam_capacity" => self.fam_capacity = p(key, value)?,
            "mem_capacity" => self.mem_capacity = p(key, value)?,
            "beta" => self.beta = p(key, value)?,
            "tau" => self.tau = p(key, value)?,
            "t_k" => self.t_k = p(key, value)?,
            "t_f" => self.t_f = p(key, value)?,
            "knn_k" => self.knn_k = p(key, value)?,
            "epsilon" => self.epsilon = p(key, value)?,
            "hop" => self.hop = p(key, value)?,
            "contrastive_batch" => self.contrastive_batch = p(key, value)?,
            "refresh_keys_on_transfer" => self.refresh_keys_on_transfer = p(key, value)?,
            "save_familiarity" => self.save_familiarity = p(key, value)?,
            "dump_rarity_csv" => self.dump_rarity_csv = p(key, value)?,
            "sigma" => self.sigma = p(key, value)?,
            "cutout_min_frac" => self.cutout_min_frac = p(key, value)?,
            "cutout_max_frac" => self.cutout_max_frac = p(key, value)?,
            "embed_dim" => self.embed_dim = p(key, value)?,
            "lstm_dim" => self.lstm_dim = p(key, value)?,
            "key_dim" => self.key_dim = p(key, value)?,
            "conv1_filters" => self.conv1_filters = p(key, value)?,
            "conv2_filters" => self.conv2_filters = p(key, value)?,
            "n_threads" => self.n_threads = p(key, value)?,
            "trials_per_cell" => self.trials_per_cell = p(key, value)?,
            "eval_trials" => self.eval_trials = p(key, value)?,
            other => {
                return Err(AgentError::Config(format!("unknown config key '{other}'")));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        let bad = |msg: String| Err(AgentError::Config(msg));
        if self.n_maps == 0 || self.n_objects == 0 {
            return bad("n_maps and n_objects must be >= 1".into());
        }
        if self.zipf_exponent < 0.0 {
            return bad("zipf_exponent must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.discount) {
            return bad(format!("discount must be in [0,1], got {}", self.discount));
        }
        if self.unroll_length == 0 || self.hop == 0 {
            return bad("unroll_length and hop must be >= 1".into());
        }
        if self.n_actors == 0 {
            return bad("n_actors must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.beta) {
            return bad(format!("beta must be in [0,1), got {}", self.beta));
        }
        if self.tau <= 0.0 {
            return bad("tau must be > 0".into());
        }
        if self.epsilon <= 0.0 {
            return bad("epsilon must be > 0".into());
        }
        if self.t_k == 0 || self.t_f == 0 || self.knn_k == 0 {
            return bad("t_k, t_f and knn_k must be >= 1".into());
        }
        if self.sigma < 0.0 {
            return bad("sigma must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.cutout_min_frac)
            || !(0.0..=1.0).contains(&self.cutout_max_frac)
            || self.cutout_min_frac > self.cutout_max_frac
        {
            return bad("cutout fractions must satisfy 0 <= min <= max <= 1".into());
        }
        if self.contrastive_batch == 0 || self.fam_capacity == 0 || self.mem_capacity == 0 {
            return bad("buffer sizes and contrastive_batch must be >= 1".into());
        }
        Ok(())
    }

    pub fn learner_steps(&self) -> usize {
        (self.total_env_steps / (self.n_actors * self.unroll_length)).max(1)
    }

    /// Serialize as the same key=value format `from_file` reads.
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("mode", self.mode.as_str().into());
        kv("env", self.env.as_str().into());
        kv("seed", self.seed.to_string());
        kv("n_maps", self.n_maps.to_string());
        kv("n_objects", self.n_objects.to_string());
        kv("grid_size", self.grid_size.to_string());
        kv("step_limit", self.step_limit.to_string());
        kv("action_repeats", self.action_repeats.to_string());
        kv("zipf_exponent", self.zipf_exponent.to_string());
        kv("n_actors", self.n_actors.to_string());
        kv("unroll_length", self.unroll_length.to_string());
        kv("total_env_steps", self.total_env_steps.to_string());
        kv("discount", self.discount.to_string());
        kv("baseline_loss_scale", self.baseline_loss_scale.to_string());
        kv("entropy_cost", self.entropy_cost.to_string());
        kv("contrastive_weight", self.contrastive_weight.to_string());
        kv("learning_rate", self.learning_rate.to_string());
        kv("rmsprop_decay", self.rmsprop_decay.to_string());
        kv("rmsprop_eps", self.rmsprop_eps.to_string());
        kv("use_vtrace", self.use_vtrace.to_string());
        kv("fam_capacity", self.fam_capacity.to_string());
        kv("mem_capacity", self.mem_capacity.to_string());
        kv("beta", self.beta.to_string());
        kv("tau", self.tau.to_string());
        kv("t_k", self.t_k.to_string());
        kv("t_f", self.t_f.to_string());
        kv("knn_k", self.knn_k.to_string());
        kv("epsilon", self.epsilon.to_string());
        kv("hop", self.hop.to_string());
        kv("contrastive_batch", self.contrastive_batch.to_string());
        kv("refresh_keys_on_transfer", self.refresh_keys_on_transfer.to_string());
        kv("save_familiarity", self.save_familiarity.to_string());
        kv("dump_rarity_csv", self.dump_rarity_csv.to_string());
        kv("sigma", self.sigma.to_string());
        kv("cutout_min_frac", self.cutout_min_frac.to_string());
        kv("cutout_max_frac", self.cutout_max_frac.to_string());
        kv("embed_dim", self.embed_dim.to_string());
        kv("lstm_dim", self.lstm_dim.to_string());
        kv("key_dim", self.key_dim.to_string());
        kv("conv1_filters", self.conv1_filters.to_string());
        kv("conv2_filters", self.conv2_filters.to_string());
        kv("n_threads", self.n_threads.to_string());
        kv("trials_per_cell", self.trials_per_cell.to_string());
        kv("eval_trials", self.eval_trials.to_string());
        s
    }
}
