//! Trajectory records, return targets and the per-sequence actor-critic
//! loss graph.
//!
//! Collection is synchronous: actors and learner run in lockstep on the
//! same parameters, so importance ratios are 1 and the default estimator
//! is plain on-policy n-step returns. A V-trace-style variant with ratios
//! clipped at 1 is available behind a flag; on-policy the two coincide.

use crate::config::Config;
use crate::error::AgentError;
use crate::memory::{EntryId, MemBuffer};
use crate::model::{act_step, AgentNet};
use zipflab_envs::{IMG_H, IMG_W};
use zipflab_numeric::{Graph, NodeId, Real};

#[derive(Debug, Clone)]
pub struct TrajStep<R: Real> {
    pub im: Vec<R>,
    pub prev_action: Option<usize>,
    pub prev_reward: R,
    pub action: usize,
    pub reward: f64,
    pub done: bool,
    pub behavior_log_prob: f64,
    pub value: f64,
    pub entry_id: EntryId,
    pub p: Vec<R>,
    pub k: Vec<R>,
    pub h_post: Vec<R>,
}

#[derive(Debug, Clone)]
pub struct Trajectory<R: Real> {
    pub steps: Vec<TrajStep<R>>,
    /// Recurrent state at the start of the unroll window (constant under
    /// truncated backpropagation through time).
    pub h0: Vec<R>,
    pub c0: Vec<R>,
    /// Value of the state after the window; 0 when that state is terminal.
    pub bootstrap_value: f64,
}

/// 0-based subsample stride: states 0, hop, 2*hop, ... of a trajectory
/// are the ones forwarded to the familiarity buffer.
pub fn subsample_indices(len: usize, hop: usize) -> Vec<usize> {
    (0..len).step_by(hop.max(1)).collect()
}

/// Discounted n-step returns with bootstrap, cut at episode boundaries.
pub fn n_step_returns<R: Real>(steps: &[TrajStep<R>], bootstrap: f64, discount: f64) -> Vec<f64> {
    let mut acc = bootstrap;
    let mut out = vec![0.0; steps.len()];
    for t in (0..steps.len()).rev() {
        acc = if steps[t].done {
            steps[t].reward
        } else {
            steps[t].reward + discount * acc
        };
        out[t] = acc;
    }
    out
}

/// V-trace targets and policy-gradient advantages with clip thresholds
/// rho_bar = c_bar = 1. `learner_log_probs[t]` is the current policy's
/// log-probability of the recorded action.
pub fn vtrace_targets<R: Real>(
    steps: &[TrajStep<R>],
    bootstrap: f64,
    discount: f64,
    learner_log_probs: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let len = steps.len();
    let mut vs = vec![0.0; len + 1];
    vs[len] = bootstrap;
    let next_value = |t: usize| -> f64 {
        if steps[t].done {
            0.0
        } else if t + 1 < len {
            steps[t + 1].value
        } else {
            bootstrap
        }
    };
    for t in (0..len).rev() {
        let rho = (learner_log_probs[t] - steps[t].behavior_log_prob).exp().min(1.0);
        let c = rho;
        let not_done = if steps[t].done { 0.0 } else { 1.0 };
        let v_next = next_value(t);
        let delta = rho * (steps[t].reward + discount * not_done * v_next - steps[t].value);
        let vs_next = if steps[t].done { 0.0 } else { vs[t + 1] };
        vs[t] = steps[t].value + delta + discount * not_done * c * (vs_next - v_next);
    }
    let mut adv = vec![0.0; len];
    for t in 0..len {
        let rho = (learner_log_probs[t] - steps[t].behavior_log_prob).exp().min(1.0);
        let not_done = if steps[t].done { 0.0 } else { 1.0 };
        let vs_next = if steps[t].done { 0.0 } else { vs[t + 1] };
        adv[t] = rho * (steps[t].reward + discount * not_done * vs_next - steps[t].value);
    }
    (vs[..len].to_vec(), adv)
}

pub struct SequenceLoss {
    pub loss: NodeId,
    /// Current-policy log-probs of the recorded actions, for ratio
    /// diagnostics.
    pub learner_log_probs: Vec<f64>,
}

/// Build the full unroll in one graph: chained act steps (hidden state
/// reset at episode boundaries), then per-step policy-gradient, value
/// regression and entropy terms, summed and scaled by `scale`.
pub fn build_sequence_loss<R: Real>(
    net: &AgentNet,
    g: &mut Graph<R>,
    traj: &Trajectory<R>,
    cfg: &Config,
    mem: &MemBuffer<R>,
    use_mem: bool,
    scale: f64,
) -> Result<SequenceLoss, AgentError> {
    let hd = net.dims.lstm_dim;
    let mut h = g.leaf(&[hd], traj.h0.clone());
    let mut c = g.leaf(&[hd], traj.c0.clone());
    let mut nodes = Vec::with_capacity(traj.steps.len());
    for (t, step) in traj.steps.iter().enumerate() {
        if t > 0 && traj.steps[t - 1].done {
            h = g.zeros(hd);
            c = g.zeros(hd);
        }
        let im = g.leaf(&[3, IMG_H, IMG_W], step.im.clone());
        let out = act_step(
            net,
            g,
            im,
            step.prev_action,
            step.prev_reward,
            h,
            c,
            mem,
            cfg.knn_k,
            cfg.epsilon,
            use_mem,
        )?;
        h = out.h;
        c = out.c;
        nodes.push(out);
    }

    let learner_log_probs: Vec<f64> = nodes
        .iter()
        .zip(&traj.steps)
        .map(|(n, s)| g.data(n.log_probs)[s.action].into_f64())
        .collect();

    let (targets, advantages) = if cfg.use_vtrace {
        vtrace_targets(&traj.steps, traj.bootstrap_value, cfg.discount, &learner_log_probs)
    } else {
        let rets = n_step_returns(&traj.steps, traj.bootstrap_value, cfg.discount);
        let adv: Vec<f64> = rets
            .iter()
            .zip(&traj.steps)
            .map(|(gt, s)| gt - s.value)
            .collect();
        (rets, adv)
    };

    let mut total: Option<NodeId> = None;
    for (t, (out, step)) in nodes.iter().zip(&traj.steps).enumerate() {
        let lp_a = g.index(out.log_probs, step.action)?;
        let pg = g.scale(lp_a, R::of_f64(-advantages[t]));

        let neg_v = g.scale(out.value, R::of_f64(-1.0));
        let diff = g.offset(neg_v, R::of_f64(targets[t]));
        let sq = g.mul(diff, diff)?;
        let v_term = g.scale(sq, R::of_f64(cfg.baseline_loss_scale));

        let probs = g.exp(out.log_probs);
        let plogp = g.mul(probs, out.log_probs)?;
        let neg_entropy = g.sum(plogp);
        let e_term = g.scale(neg_entropy, R::of_f64(cfg.entropy_cost));

        let s1 = g.add(pg, v_term)?;
        let s2 = g.add(s1, e_term)?;
        total = Some(match total {
            None => s2,
            Some(acc) => g.add(acc, s2)?,
        });
    }
    let loss = g.scale(total.expect("non-empty trajectory"), R::of_f64(scale));
    Ok(SequenceLoss {
        loss,
        learner_log_probs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(reward: f64, done: bool, value: f64) -> TrajStep<f64> {
        TrajStep {
            im: Vec::new(),
            prev_action: None,
            prev_reward: 0.0,
            action: 0,
            reward,
            done,
            behavior_log_prob: -1.0,
            value,
            entry_id: (0, 0),
            p: Vec::new(),
            k: Vec::new(),
            h_post: Vec::new(),
        }
    }

    #[test]
    fn subsample_matches_hop_examples() {
        assert_eq!(subsample_indices(10, 4), vec![0, 4, 8]);
        assert_eq!(subsample_indices(32, 16), vec![0, 16]);
        assert_eq!(subsample_indices(5, 1), vec![0, 1, 2, 3, 4]);
        assert_eq!(subsample_indices(1, 7), vec![0]);
    }

    #[test]
    fn single_step_return_with_bootstrap() {
        // reward 1, discount 0.99, bootstrap 0 -> target 1, advantage 1.
        let steps = vec![step(1.0, false, 0.0)];
        let rets = n_step_returns(&steps, 0.0, 0.99);
        assert_eq!(rets, vec![1.0]);
    }

    #[test]
    fn returns_cut_at_episode_boundaries() {
        let steps = vec![
            step(0.0, false, 0.0),
            step(1.0, true, 0.0),
            step(0.0, false, 0.0),
        ];
        let rets = n_step_returns(&steps, 5.0, 0.5);
        // t=2: 0 + 0.5*5 = 2.5; t=1: done -> 1; t=0: 0 + 0.5*1 = 0.5
        assert_eq!(rets, vec![0.5, 1.0, 2.5]);
    }

    #[test]
    fn vtrace_on_policy_equals_n_step() {
        let steps = vec![
            step(0.0, false, 0.3),
            step(1.0, false, -0.2),
            step(0.0, true, 0.1),
            step(0.5, false, 0.4),
        ];
        let lp: Vec<f64> = steps.iter().map(|s| s.behavior_log_prob).collect();
        let (vs, adv) = vtrace_targets(&steps, 0.7, 0.9, &lp);
        let rets = n_step_returns(&steps, 0.7, 0.9);
        for t in 0..steps.len() {
            assert!((vs[t] - rets[t]).abs() < 1e-12, "t={t}: {} vs {}", vs[t], rets[t]);
            assert!((adv[t] - (rets[t] - steps[t].value)).abs() < 1e-12);
        }
    }
}
