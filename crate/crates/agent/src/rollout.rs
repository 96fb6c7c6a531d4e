//! Single-trial policy execution, shared by the evaluation harness.

use crate::config::{Config, EnvKind};
use crate::error::AgentError;
use crate::memory::MemBuffer;
use crate::model::{act_step, argmax_action, obs_to_chw, sample_action, AgentNet};
use rand_chacha::ChaCha8Rng;
use zipflab_envs::{Env, EnvError, Gridworld, MapSpec, Observation, StepResult, ThreeDWorld};
use zipflab_numeric::{Graph, ParamSet, Real};
use zipflab_envs::{IMG_H, IMG_W};

/// Both environments behind one concrete type so actor state stays simple.
pub enum AnyEnv {
    Grid(Gridworld),
    Three(ThreeDWorld),
}

impl AnyEnv {
    pub fn create(cfg: &Config, map: MapSpec) -> AnyEnv {
        match cfg.env {
            EnvKind::Gridworld => AnyEnv::Grid(Gridworld::new(map, cfg.n_maps, cfg.step_limit)),
            EnvKind::ThreeDWorld => AnyEnv::Three(ThreeDWorld::new(
                map,
                cfg.n_maps,
                cfg.step_limit,
                cfg.action_repeats,
            )),
        }
    }
}

impl Env for AnyEnv {
    fn n_actions(&self) -> usize {
        match self {
            AnyEnv::Grid(e) => e.n_actions(),
            AnyEnv::Three(e) => e.n_actions(),
        }
    }

    fn map(&self) -> &MapSpec {
        match self {
            AnyEnv::Grid(e) => e.map(),
            AnyEnv::Three(e) => e.map(),
        }
    }

    fn reset(&mut self, target: usize) -> Result<Observation, EnvError> {
        match self {
            AnyEnv::Grid(e) => e.reset(target),
            AnyEnv::Three(e) => e.reset(target),
        }
    }

    fn step(&mut self, action: usize) -> Result<StepResult, EnvError> {
        match self {
            AnyEnv::Grid(e) => e.step(action),
            AnyEnv::Three(e) => e.step(action),
        }
    }
}

/// Run one trial to termination. Returns true on success (unit reward).
/// With `argmax` false, actions are sampled with the provided rng.
#[allow(clippy::too_many_arguments)]
pub fn run_trial<R: Real>(
    net: &AgentNet,
    params: &ParamSet<R>,
    mem: &MemBuffer<R>,
    cfg: &Config,
    map: MapSpec,
    target: usize,
    argmax: bool,
    rng: &mut ChaCha8Rng,
) -> Result<bool, AgentError> {
    use rand::Rng;
    let mut env = AnyEnv::create(cfg, map);
    let obs = env.reset(target)?;
    let mut im = obs_to_chw::<R>(&obs);
    let hd = net.dims.lstm_dim;
    let mut h = vec![R::zero(); hd];
    let mut c = vec![R::zero(); hd];
    let mut prev_action: Option<usize> = None;
    let mut prev_reward = R::zero();
    let use_mem = cfg.mode.uses_mem();

    loop {
        let (action, h_next, c_next) = {
            let mut g = Graph::new(params);
            let im_node = g.leaf(&[3, IMG_H, IMG_W], im.clone());
            let h_node = g.leaf(&[hd], h.clone());
            let c_node = g.leaf(&[hd], c.clone());
            let out = act_step(
                net, &mut g, im_node, prev_action, prev_reward, h_node, c_node, mem, cfg.knn_k,
                cfg.epsilon, use_mem,
            )?;
            let action = if argmax {
                argmax_action(g.data(out.logits))
            } else {
                sample_action(g.data(out.log_probs), rng.random::<f64>())
            };
            (action, g.data(out.h).to_vec(), g.data(out.c).to_vec())
        };
        let res = env.step(action)?;
        if res.done {
            return Ok(res.reward > 0.0);
        }
        im = obs_to_chw::<R>(&res.obs);
        h = h_next;
        c = c_next;
        prev_action = Some(action);
        prev_reward = R::of_f64(res.reward);
    }
}
