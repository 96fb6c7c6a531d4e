//! Synchronous training loop.
//!
//! Per learner step: collect one unroll from every actor on the current
//! parameters, compute the actor-critic loss over the batch, push a
//! subsample of the fresh states into the familiarity buffer, run one
//! contrastive sweep (in the modes that train it), every t_f steps
//! transfer the chosen states into the episodic memory, then apply the
//! accumulated gradients with RMSProp. Actors read the memory written at
//! previous steps only, so collection and the learner forward see the
//! same snapshot.

use std::collections::VecDeque;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::augment::AugmentConfig;
use crate::config::Config;
use crate::error::AgentError;
use crate::familiarity::{FamiliarityBuffer, FamiliarityDims};
use crate::memory::{MemBuffer, MemEntry};
use crate::model::{act_step, obs_to_chw, sample_action, AgentNet, NetDims};
use crate::rl::{build_sequence_loss, subsample_indices, TrajStep, Trajectory};
use crate::rollout::AnyEnv;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zipflab_envs::{generate_maps, Env, MapSpec, TrialSampler, ZipfParams, IMG_H, IMG_W};
use zipflab_numeric::{checkpoint, Graph, ParamId, ParamSet, Real, RmsProp};

pub struct TrainResult<R: Real> {
    pub params: ParamSet<R>,
    pub net: AgentNet,
    pub mem: MemBuffer<R>,
    pub maps: Vec<MapSpec>,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub env_steps: usize,
    /// Largest observed |behavior/learner probability ratio - 1|.
    pub max_ratio_dev: f64,
}

struct ActorState<R: Real> {
    actor_id: usize,
    rng: ChaCha8Rng,
    env: Option<AnyEnv>,
    obs: Vec<R>,
    h: Vec<R>,
    c: Vec<R>,
    prev_action: Option<usize>,
    prev_reward: f64,
    pending_reset: bool,
    episode_uid: u64,
    episode_count: u64,
    step_in_ep: u32,
    episode_return: f64,
    completed: Vec<f64>,
}

impl<R: Real> ActorState<R> {
    fn new(actor_id: usize, seed: u64, lstm_dim: usize) -> Self {
        ActorState {
            actor_id,
            rng: ChaCha8Rng::seed_from_u64(seed ^ (actor_id as u64 + 1).wrapping_mul(0xA24B_AED4_963E_E407)),
            env: None,
            obs: Vec::new(),
            h: vec![R::zero(); lstm_dim],
            c: vec![R::zero(); lstm_dim],
            prev_action: None,
            prev_reward: 0.0,
            pending_reset: true,
            episode_uid: 0,
            episode_count: 0,
            step_in_ep: 0,
            episode_return: 0.0,
            completed: Vec::new(),
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn collect_unroll<R: Real>(
    actor: &mut ActorState<R>,
    net: &AgentNet,
    params: &ParamSet<R>,
    mem: &MemBuffer<R>,
    cfg: &Config,
    sampler: &TrialSampler,
    maps: &[MapSpec],
) -> Result<Trajectory<R>, AgentError> {
    let hd = net.dims.lstm_dim;
    let use_mem = cfg.mode.uses_mem();
    let mut steps: Vec<TrajStep<R>> = Vec::with_capacity(cfg.unroll_length);
    let mut h0 = actor.h.clone();
    let mut c0 = actor.c.clone();

    for step_i in 0..cfg.unroll_length {
        if actor.pending_reset {
            let (map_id, target) = sampler.sample(&mut actor.rng);
            let mut env = AnyEnv::create(cfg, maps[map_id].clone());
            let obs = env.reset(target)?;
            actor.obs = obs_to_chw(&obs);
            actor.env = Some(env);
            actor.h = vec![R::zero(); hd];
            actor.c = vec![R::zero(); hd];
            actor.prev_action = None;
            actor.prev_reward = 0.0;
            actor.episode_count += 1;
            actor.episode_uid = actor.actor_id as u64 * 1_000_000_000 + actor.episode_count;
            actor.step_in_ep = 0;
            actor.episode_return = 0.0;
            actor.pending_reset = false;
        }
        if step_i == 0 {
            h0 = actor.h.clone();
            c0 = actor.c.clone();
        }

        let (action, log_prob, value, p, k, h_post, c_post) = {
            let mut g = Graph::new(params);
            let im = g.leaf(&[3, IMG_H, IMG_W], actor.obs.clone());
            let h_node = g.leaf(&[hd], actor.h.clone());
            let c_node = g.leaf(&[hd], actor.c.clone());
            let out = act_step(
                net,
                &mut g,
                im,
                actor.prev_action,
                R::of_f64(actor.prev_reward),
                h_node,
                c_node,
                mem,
                cfg.knn_k,
                cfg.epsilon,
                use_mem,
            )?;
            let u = actor.rng.random::<f64>();
            let action = sample_action(g.data(out.log_probs), u);
            (
                action,
                g.data(out.log_probs)[action].into_f64(),
                g.data(out.value)[0].into_f64(),
                g.data(out.p).to_vec(),
                g.data(out.k).to_vec(),
                g.data(out.h).to_vec(),
                g.data(out.c).to_vec(),
            )
        };

        let res = actor.env.as_mut().expect("env present").step(action)?;
        steps.push(TrajStep {
            im: actor.obs.clone(),
            prev_action: actor.prev_action,
            prev_reward: R::of_f64(actor.prev_reward),
            action,
            reward: res.reward,
            done: res.done,
            behavior_log_prob: log_prob,
            value,
            entry_id: (actor.episode_uid, actor.step_in_ep),
            p,
            k,
            h_post: h_post.clone(),
        });
        actor.step_in_ep += 1;
        actor.episode_return += res.reward;
        if res.done {
            actor.completed.push(actor.episode_return);
            actor.pending_reset = true;
        } else {
            actor.obs = obs_to_chw(&res.obs);
            actor.h = h_post;
            actor.c = c_post;
            actor.prev_action = Some(action);
            actor.prev_reward = res.reward;
        }
    }

    // Bootstrap with the value of the state after the window (zero at a
    // terminal). No rng is consumed here.
    let bootstrap_value = if actor.pending_reset {
        0.0
    } else {
        let mut g = Graph::new(params);
        let im = g.leaf(&[3, IMG_H, IMG_W], actor.obs.clone());
        let h_node = g.leaf(&[hd], actor.h.clone());
        let c_node = g.leaf(&[hd], actor.c.clone());
        let out = act_step(
            net,
            &mut g,
            im,
            actor.prev_action,
            R::of_f64(actor.prev_reward),
            h_node,
            c_node,
            mem,
            cfg.knn_k,
            cfg.epsilon,
            use_mem,
        )?;
        g.data(out.value)[0].into_f64()
    };

    Ok(Trajectory {
        steps,
        h0,
        c0,
        bootstrap_value,
    })
}

pub fn train<R: Real>(cfg: &Config, out_dir: &Path, verbose: bool) -> Result<TrainResult<R>, AgentError> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let maps = generate_maps(cfg.seed, cfg.n_maps, cfg.n_objects, (cfg.grid_size, cfg.grid_size))?;
    let n_actions = AnyEnv::create(cfg, maps[0].clone()).n_actions();
    let dims = NetDims::from_config(cfg, n_actions);

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params: ParamSet<R> = ParamSet::new();
    let net = AgentNet::build(dims, &mut params, &mut init_rng);
    let mut optimizer = RmsProp::new(
        R::of_f64(cfg.learning_rate),
        R::of_f64(cfg.rmsprop_decay),
        R::of_f64(cfg.rmsprop_eps),
    )?;

    let fam_dims = FamiliarityDims {
        im_len: 3 * IMG_H * IMG_W,
        k_len: dims.key_dim,
        p_len: dims.embed_dim,
        h_len: dims.lstm_dim,
    };
    let mut fm = FamiliarityBuffer::<R>::new(cfg.fam_capacity, cfg.beta, cfg.tau, fam_dims)?;
    let mut mem = MemBuffer::<R>::new(cfg.mem_capacity);
    let aug_cfg = AugmentConfig::new(cfg.sigma, cfg.cutout_min_frac, cfg.cutout_max_frac)?;

    let zp = ZipfParams::new(cfg.n_maps, cfg.zipf_exponent)?;
    let zo = ZipfParams::new(cfg.n_objects, cfg.zipf_exponent)?;
    let sampler = TrialSampler::new(&zp, &zo);

    let pool: Option<rayon::ThreadPool> = if cfg.n_threads == 1 {
        None
    } else {
        let threads = if cfg.n_threads == 0 {
            std::thread::available_parallelism().map(|n| n.get()).unwrap_or(4)
        } else {
            cfg.n_threads
        };
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| AgentError::Train(format!("thread pool: {e}")))?,
        )
    };

    let mut actors: Vec<ActorState<R>> = (0..cfg.n_actors)
        .map(|i| ActorState::new(i, cfg.seed, dims.lstm_dim))
        .collect();
    let mut learner_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_5EED_5EED_5EED);

    let metrics_path = out_dir.join("metrics.csv");
    let mut metrics = std::io::BufWriter::new(std::fs::File::create(&metrics_path)?);
    writeln!(
        metrics,
        "learner_step,env_steps,mean_episode_return,zipfian_accuracy_estimate,l_impala,l_contrastive,mem_size,transfer_count"
    )?;
    let rarity_path = out_dir.join("rarity.csv");
    let mut rarity_csv = if cfg.dump_rarity_csv {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&rarity_path)?);
        writeln!(f, "learner_step,episode_id,step_id,lm,m")?;
        Some(f)
    } else {
        None
    };

    let mut return_window: VecDeque<f64> = VecDeque::with_capacity(100);
    let mut success_window: VecDeque<bool> = VecDeque::with_capacity(500);
    let mut transfer_count = 0u64;
    let mut max_ratio_dev = 0.0f64;
    let total_steps = cfg.learner_steps();
    let batch_scale = 1.0 / (cfg.n_actors * cfg.unroll_length) as f64;

    for t in 1..=total_steps {
        // (1) Collect one unroll per actor on the current snapshot.
        let trajs: Vec<Trajectory<R>> = match &pool {
            Some(pool) => pool.install(|| {
                use rayon::prelude::*;
                actors
                    .par_iter_mut()
                    .map(|a| collect_unroll(a, &net, &params, &mem, cfg, &sampler, &maps))
                    .collect::<Result<_, _>>()
            })?,
            None => actors
                .iter_mut()
                .map(|a| collect_unroll(a, &net, &params, &mem, cfg, &sampler, &maps))
                .collect::<Result<_, _>>()?,
        };
        for a in &mut actors {
            for ret in a.completed.drain(..) {
                if return_window.len() == 100 {
                    return_window.pop_front();
                }
                return_window.push_back(ret);
                if success_window.len() == 500 {
                    success_window.pop_front();
                }
                success_window.push_back(ret > 0.0);
            }
        }

        // (2) Actor-critic loss over the batch.
        type SeqOut<R> = (f64, Vec<(ParamId, Vec<R>)>, f64);
        let seq_one = |traj: &Trajectory<R>| -> Result<SeqOut<R>, AgentError> {
            let mut g = Graph::new(&params);
            let sl = build_sequence_loss(&net, &mut g, traj, cfg, &mem, cfg.mode.uses_mem(), batch_scale)?;
            let loss_value = g.value(sl.loss).into_f64();
            g.backward(sl.loss)?;
            let grads = g.take_param_grads();
            let dev = sl
                .learner_log_probs
                .iter()
                .zip(&traj.steps)
                .map(|(lp, s)| ((lp - s.behavior_log_prob).exp() - 1.0).abs())
                .fold(0.0f64, f64::max);
            Ok((loss_value, grads, dev))
        };
        let seq_results: Vec<SeqOut<R>> = match &pool {
            Some(pool) => pool.install(|| {
                use rayon::prelude::*;
                trajs.par_iter().map(seq_one).collect::<Result<_, _>>()
            })?,
            None => trajs.iter().map(seq_one).collect::<Result<_, _>>()?,
        };
        let mut l_impala = 0.0;
        for (lv, grads, dev) in seq_results {
            l_impala += lv;
            max_ratio_dev = max_ratio_dev.max(dev);
            params.accumulate_grads(grads);
        }
        if !l_impala.is_finite() {
            let diag = out_dir.join("diagnostic.bin");
            let _ = checkpoint::save(&diag, &params, Some(&optimizer), &[], &[]);
            return Err(AgentError::Train(format!(
                "non-finite actor-critic loss at learner step {t}; diagnostic checkpoint at {}",
                diag.display()
            )));
        }

        // (3) Fresh states into the familiarity buffer.
        if cfg.mode.uses_mem() {
            let mut batch = Vec::new();
            for traj in &trajs {
                for idx in subsample_indices(traj.steps.len(), cfg.hop) {
                    let s = &traj.steps[idx];
                    batch.push((s.entry_id, s.im.clone(), s.k.clone(), s.p.clone(), s.h_post.clone()));
                }
            }
            fm.add(batch)?;
        }

        // (4) One contrastive sweep; gradients carry the loss weight.
        let mut l_contrastive = 0.0;
        if cfg.mode.uses_contrastive() {
            let outcome = fm.contrastive_pass(
                &net,
                &params,
                &aug_cfg,
                &mut learner_rng,
                R::of_f64(cfg.contrastive_weight),
                cfg.contrastive_batch,
                pool.as_ref(),
            )?;
            if let Some(out) = outcome {
                l_contrastive = out.mean_loss;
                params.accumulate_grads(out.grads);
                fm.update_momentum(&out.per_entry)?;
            }
        }

        // (5) Periodic transfer of chosen states into the MEM.
        if cfg.mode.uses_mem() && t % cfg.t_f == 0 && !fm.is_empty() {
            let picked = if cfg.mode.rare_transfer() {
                fm.get_rare_k(cfg.t_k)?
            } else {
                fm.uniform_sample(cfg.t_k, &mut learner_rng)?
            };
            if let Some(f) = rarity_csv.as_mut() {
                let m = fm.normalized_momentum()?;
                let by_id: std::collections::HashMap<_, _> = fm
                    .entries()
                    .zip(m.iter())
                    .map(|(e, &mv)| (e.entry_id, (e.lm, mv)))
                    .collect();
                for e in &picked {
                    if let Some((lm, mv)) = by_id.get(&e.entry_id) {
                        writeln!(f, "{},{},{},{lm:.6},{mv:.6}", t, e.entry_id.0, e.entry_id.1)?;
                    }
                }
            }
            mem.add_entries(
                picked
                    .into_iter()
                    .map(|e| MemEntry {
                        entry_id: e.entry_id,
                        p: e.p,
                        h: e.h,
                        k: e.k,
                    })
                    .collect(),
            );
            if cfg.refresh_keys_on_transfer {
                mem.refresh_keys(&params, &net.key);
            }
            transfer_count += 1;
        }

        // (6) Apply the step.
        optimizer.step(&mut params)?;
        params.zero_grads();
        if params.check_finite().is_err() {
            let diag = out_dir.join("diagnostic.bin");
            let _ = checkpoint::save(&diag, &params, Some(&optimizer), &[], &[]);
            return Err(AgentError::Train(format!(
                "non-finite parameter after step {t}; diagnostic checkpoint at {}",
                diag.display()
            )));
        }

        let mean_ret = if return_window.is_empty() {
            0.0
        } else {
            return_window.iter().sum::<f64>() / return_window.len() as f64
        };
        let zipf_acc = if success_window.is_empty() {
            0.0
        } else {
            success_window.iter().filter(|&&s| s).count() as f64 / success_window.len() as f64
        };
        writeln!(
            metrics,
            "{},{},{:.6},{:.6},{:.6},{:.6},{},{}",
            t,
            t * cfg.n_actors * cfg.unroll_length,
            mean_ret,
            zipf_acc,
            l_impala,
            l_contrastive,
            mem.len(),
            transfer_count
        )?;
        if verbose && (t % 25 == 0 || t == total_steps) {
            eprintln!(
                "step {t}/{total_steps} env_steps {} return {mean_ret:.3} zipf_acc {zipf_acc:.3} L_rl {l_impala:.4} L_c {l_contrastive:.4} mem {}",
                t * cfg.n_actors * cfg.unroll_length,
                mem.len()
            );
        }
    }
    metrics.flush()?;
    if let Some(f) = rarity_csv.as_mut() {
        f.flush()?;
    }

    let checkpoint_path = out_dir.join("checkpoint.bin");
    let counters = vec![
        ("learner_steps".to_string(), total_steps as u64),
        ("env_steps".to_string(), (total_steps * cfg.n_actors * cfg.unroll_length) as u64),
    ];
    let mut blobs = vec![("mem".to_string(), mem.to_bytes())];
    if cfg.save_familiarity {
        blobs.push(("familiarity".to_string(), fm.to_bytes()));
    }
    checkpoint::save(&checkpoint_path, &params, Some(&optimizer), &counters, &blobs)?;

    Ok(TrainResult {
        params,
        net,
        mem,
        maps,
        metrics_path,
        checkpoint_path,
        env_steps: total_steps * cfg.n_actors * cfg.unroll_length,
        max_ratio_dev,
    })
}
