//! Library side of the harness: evaluation, ablation sweeps and shared
//! helpers used by the `zipflab` binary and by the acceptance suite.

pub mod ablate;
pub mod eval;

use anyhow::Result;
use zipflab_agent::{AgentNet, Config, MemBuffer, NetDims};
use zipflab_envs::{generate_maps, MapSpec};
use zipflab_numeric::checkpoint::{self, Checkpoint};
use zipflab_numeric::ParamSet;

/// None = strictly serial (the reproducibility reference); Some = a pool
/// with the requested thread count (0 = all available).
pub fn make_pool(n_threads: usize) -> Result<Option<rayon::ThreadPool>> {
    if n_threads == 1 {
        return Ok(None);
    }
    let threads = if n_threads == 0 {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(4)
    } else {
        n_threads
    };
    Ok(Some(
        rayon::ThreadPoolBuilder::new().num_threads(threads).build()?,
    ))
}

pub struct LoadedAgent {
    pub params: ParamSet<f32>,
    pub net: AgentNet,
    pub mem: MemBuffer<f32>,
    pub maps: Vec<MapSpec>,
}

/// Restore a trained agent from a checkpoint plus its run config. Maps
/// are regenerated (generation is deterministic in the config seed).
pub fn load_agent(ckpt_path: &std::path::Path, cfg: &Config) -> Result<LoadedAgent> {
    let ck: Checkpoint<f32> = checkpoint::load(ckpt_path)?;
    let maps = generate_maps(cfg.seed, cfg.n_maps, cfg.n_objects, (cfg.grid_size, cfg.grid_size))?;
    let n_actions = match cfg.env {
        zipflab_agent::EnvKind::Gridworld => zipflab_envs::GRID_ACTIONS,
        zipflab_agent::EnvKind::ThreeDWorld => zipflab_envs::THREED_ACTIONS,
    };
    let dims = NetDims::from_config(cfg, n_actions);
    let net = AgentNet::attach(dims, &ck.params)?;
    let mem = match ck.blobs.iter().find(|(n, _)| n == "mem") {
        Some((_, bytes)) => MemBuffer::from_bytes(bytes)?,
        None => MemBuffer::new(cfg.mem_capacity),
    };
    Ok(LoadedAgent {
        params: ck.params,
        net,
        mem,
        maps,
    })
}
