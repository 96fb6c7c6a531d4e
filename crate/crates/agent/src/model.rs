//! The recurrent actor-critic network: conv encoder -> embedding, learned
//! key projection, input fusion (embedding, previous action one-hot,
//! previous reward, reinstated memory), LSTM core, policy and value heads.
//!
//! One builder constructs the step both for acting (constant recurrent
//! inputs, no backward) and for the learner (chained node inputs), so the
//! two paths compute bit-identical values.

use crate::config::Config;
use crate::error::AgentError;
use crate::memory::{compute_key_in_graph, KeyProjection, MemBuffer};
use rand_chacha::ChaCha8Rng;
use zipflab_envs::{Observation, IMG_H, IMG_W};
use zipflab_numeric::{lstm_step, Graph, NodeId, ParamId, ParamSet, Real, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct NetDims {
    pub n_actions: usize,
    pub conv1_filters: usize,
    pub conv2_filters: usize,
    pub embed_dim: usize,
    pub lstm_dim: usize,
    pub key_dim: usize,
}

impl NetDims {
    pub fn from_config(cfg: &Config, n_actions: usize) -> Self {
        NetDims {
            n_actions,
            conv1_filters: cfg.conv1_filters,
            conv2_filters: cfg.conv2_filters,
            embed_dim: cfg.embed_dim,
            lstm_dim: cfg.lstm_dim,
            key_dim: cfg.key_dim,
        }
    }

    /// Spatial side after two stride-2 valid 3x3 convolutions.
    pub fn conv_out_side(&self) -> usize {
        let s1 = (IMG_H - 3) / 2 + 1;
        (s1 - 3) / 2 + 1
    }

    pub fn flatten_len(&self) -> usize {
        let side = self.conv_out_side();
        self.conv2_filters * side * side
    }

    pub fn lstm_input_dim(&self) -> usize {
        self.embed_dim + self.n_actions + 1 + self.lstm_dim
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AgentNet {
    pub dims: NetDims,
    pub conv1_k: ParamId,
    pub conv2_k: ParamId,
    pub fc_w: ParamId,
    pub fc_b: ParamId,
    pub key: KeyProjection,
    pub lstm_w_ih: ParamId,
    pub lstm_w_hh: ParamId,
    pub lstm_b: ParamId,
    pub pi_w: ParamId,
    pub pi_b: ParamId,
    pub v_w: ParamId,
    pub v_b: ParamId,
}

impl AgentNet {
    /// Register all parameters with fan-in uniform init. The forget-gate
    /// bias starts at 1 so fresh cells retain state.
    pub fn build<R: Real>(dims: NetDims, params: &mut ParamSet<R>, rng: &mut ChaCha8Rng) -> Self {
        let c1 = dims.conv1_filters;
        let c2 = dims.conv2_filters;
        let conv1_k = params.add("enc.conv1.k", Tensor::fan_in_uniform(&[c1, 3, 3, 3], 3 * 9, rng));
        let conv2_k = params.add(
            "enc.conv2.k",
            Tensor::fan_in_uniform(&[c2, c1, 3, 3], c1 * 9, rng),
        );
        let flat = dims.flatten_len();
        let fc_w = params.add(
            "enc.fc.w",
            Tensor::fan_in_uniform(&[dims.embed_dim, flat], flat, rng),
        );
        let fc_b = params.add("enc.fc.b", Tensor::zeros(&[dims.embed_dim]).requires_grad(true));

        let key_in = dims.embed_dim + dims.lstm_dim;
        let key_w = params.add(
            "key.w",
            Tensor::fan_in_uniform(&[dims.key_dim, key_in], key_in, rng),
        );
        let key_b = params.add("key.b", Tensor::zeros(&[dims.key_dim]).requires_grad(true));

        let n_x = dims.lstm_input_dim();
        let h = dims.lstm_dim;
        let lstm_w_ih = params.add("lstm.w_ih", Tensor::fan_in_uniform(&[4 * h, n_x], n_x, rng));
        let lstm_w_hh = params.add("lstm.w_hh", Tensor::fan_in_uniform(&[4 * h, h], h, rng));
        let mut b = Tensor::zeros(&[4 * h]);
        for i in h..2 * h {
            b.data[i] = R::one();
        }
        let lstm_b = params.add("lstm.b", b.requires_grad(true));

        let pi_w = params.add(
            "pi.w",
            Tensor::fan_in_uniform(&[dims.n_actions, h], h, rng),
        );
        let pi_b = params.add("pi.b", Tensor::zeros(&[dims.n_actions]).requires_grad(true));
        let v_w = params.add("v.w", Tensor::fan_in_uniform(&[1, h], h, rng));
        let v_b = params.add("v.b", Tensor::zeros(&[1]).requires_grad(true));

        AgentNet {
            dims,
            conv1_k,
            conv2_k,
            fc_w,
            fc_b,
            key: KeyProjection { w: key_w, b: key_b },
            lstm_w_ih,
            lstm_w_hh,
            lstm_b,
            pi_w,
            pi_b,
            v_w,
            v_b,
        }
    }

    /// Bind to parameters loaded from a checkpoint, resolving by name.
    pub fn attach<R: Real>(dims: NetDims, params: &ParamSet<R>) -> Result<Self, AgentError> {
        let find = |name: &str| {
            params
                .find(name)
                .ok_or_else(|| AgentError::InvalidState(format!("checkpoint missing parameter {name}")))
        };
        let net = AgentNet {
            dims,
            conv1_k: find("enc.conv1.k")?,
            conv2_k: find("enc.conv2.k")?,
            fc_w: find("enc.fc.w")?,
            fc_b: find("enc.fc.b")?,
            key: KeyProjection {
                w: find("key.w")?,
                b: find("key.b")?,
            },
            lstm_w_ih: find("lstm.w_ih")?,
            lstm_w_hh: find("lstm.w_hh")?,
            lstm_b: find("lstm.b")?,
            pi_w: find("pi.w")?,
            pi_b: find("pi.b")?,
            v_w: find("v.w")?,
            v_b: find("v.b")?,
        };
        let fc_shape = &params.get(net.fc_w).shape;
        if fc_shape != &[dims.embed_dim, dims.flatten_len()] {
            return Err(AgentError::InvalidState(format!(
                "checkpoint encoder shape {fc_shape:?} does not match configured dims"
            )));
        }
        Ok(net)
    }

    /// conv -> relu -> conv -> relu -> flatten -> affine. `im` is a
    /// [3, 84, 84] node; output is the pixel embedding p.
    pub fn encode<R: Real>(&self, g: &mut Graph<R>, im: NodeId) -> Result<NodeId, AgentError> {
        let k1 = g.param(self.conv1_k);
        let k2 = g.param(self.conv2_k);
        let c1 = g.conv2d(im, k1, 2)?;
        let r1 = g.relu(c1);
        let c2 = g.conv2d(r1, k2, 2)?;
        let r2 = g.relu(c2);
        let flat_len = self.dims.flatten_len();
        let flat = g.slice(r2, 0, flat_len)?;
        let w = g.param(self.fc_w);
        let b = g.param(self.fc_b);
        Ok(g.affine(w, flat, b)?)
    }
}

/// All interesting nodes of one agent step.
pub struct StepNodes {
    pub p: NodeId,
    pub k: NodeId,
    pub m: NodeId,
    pub h: NodeId,
    pub c: NodeId,
    pub logits: NodeId,
    pub log_probs: NodeId,
    pub value: NodeId,
}

/// One forward step of the agent.
///
/// p = encode(im); k = key(p, h_prev); m = retrieve(k) (zeros when the
/// memory path is off); x = [p, one_hot(prev_a), prev_r, m];
/// (h, c) = lstm(x, h_prev, c_prev); policy and value heads read h.
#[allow(clippy::too_many_arguments)]
pub fn act_step<R: Real>(
    net: &AgentNet,
    g: &mut Graph<R>,
    im: NodeId,
    prev_action: Option<usize>,
    prev_reward: R,
    h_prev: NodeId,
    c_prev: NodeId,
    mem: &MemBuffer<R>,
    knn_k: usize,
    eps: f64,
    use_mem: bool,
) -> Result<StepNodes, AgentError> {
    let dims = &net.dims;
    let p = net.encode(g, im)?;
    let k = compute_key_in_graph(g, p, h_prev, &net.key)?;
    let m = if use_mem {
        mem.retrieve_in_graph(g, k, knn_k, eps, &net.key, dims.lstm_dim)?
    } else {
        g.zeros(dims.lstm_dim)
    };

    let mut onehot = vec![R::zero(); dims.n_actions];
    if let Some(a) = prev_action {
        onehot[a] = R::one();
    }
    let onehot = g.leaf(&[dims.n_actions], onehot);
    let reward = g.leaf(&[1], vec![prev_reward]);
    let x = g.concat(&[p, onehot, reward, m]);

    let w_ih = g.param(net.lstm_w_ih);
    let w_hh = g.param(net.lstm_w_hh);
    let b = g.param(net.lstm_b);
    let (h, c) = lstm_step(g, x, h_prev, c_prev, w_ih, w_hh, b, dims.lstm_dim)?;

    let pi_w = g.param(net.pi_w);
    let pi_b = g.param(net.pi_b);
    let logits = g.affine(pi_w, h, pi_b)?;
    let log_probs = g.log_softmax(logits);
    let v_w = g.param(net.v_w);
    let v_b = g.param(net.v_b);
    let value = g.affine(v_w, h, v_b)?;

    Ok(StepNodes {
        p,
        k,
        m,
        h,
        c,
        logits,
        log_probs,
        value,
    })
}

/// Observation bytes to the [3, 84, 84] float image in [0, 1].
pub fn obs_to_chw<R: Real>(obs: &Observation) -> Vec<R> {
    let mut out = vec![R::zero(); 3 * IMG_H * IMG_W];
    let inv = R::of_f64(1.0 / 255.0);
    for ch in 0..3 {
        let plane = &mut out[ch * IMG_H * IMG_W..(ch + 1) * IMG_H * IMG_W];
        for (i, v) in plane.iter_mut().enumerate() {
            *v = R::of_f64(obs.pixels[i * 3 + ch] as f64) * inv;
        }
    }
    out
}

/// Sample an action index from log-probabilities with one uniform draw.
pub fn sample_action<R: Real>(log_probs: &[R], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &lp) in log_probs.iter().enumerate() {
        acc += lp.into_f64().exp();
        if u < acc {
            return i;
        }
    }
    log_probs.len() - 1
}

/// Greedy action, ties to the lowest index.
pub fn argmax_action<R: Real>(logits: &[R]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny_dims() -> NetDims {
        NetDims {
            n_actions: 4,
            conv1_filters: 2,
            conv2_filters: 3,
            embed_dim: 8,
            lstm_dim: 6,
            key_dim: 4,
        }
    }

    #[test]
    fn step_shapes_line_up() {
        let dims = tiny_dims();
        let mut params: ParamSet<f32> = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = AgentNet::build(dims, &mut params, &mut rng);
        let mem = MemBuffer::new(8);
        let mut g = Graph::new(&params);
        let im = g.leaf(&[3, IMG_H, IMG_W], vec![0.5f32; 3 * IMG_H * IMG_W]);
        let h0 = g.zeros(dims.lstm_dim);
        let c0 = g.zeros(dims.lstm_dim);
        let out = act_step(&net, &mut g, im, None, 0.0, h0, c0, &mem, 4, 1e-3, true).unwrap();
        assert_eq!(g.data(out.p).len(), dims.embed_dim);
        assert_eq!(g.data(out.k).len(), dims.key_dim);
        assert_eq!(g.data(out.m).len(), dims.lstm_dim);
        assert_eq!(g.data(out.logits).len(), dims.n_actions);
        assert_eq!(g.data(out.value).len(), 1);
        // Empty MEM: the memory input must be exactly zero.
        assert!(g.data(out.m).iter().all(|&v| v == 0.0));
        let probs: f32 = g.data(out.log_probs).iter().map(|v| v.exp()).sum();
        assert!((probs - 1.0).abs() < 1e-5);
    }

    #[test]
    fn memory_off_matches_memory_on_with_empty_mem() {
        // impala_only concatenates a zero memory vector; with an empty MEM
        // the full mode does the same, so activations agree exactly.
        let dims = tiny_dims();
        let mut params: ParamSet<f32> = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = AgentNet::build(dims, &mut params, &mut rng);
        let mem = MemBuffer::new(8);
        let run = |use_mem: bool| {
            let mut g = Graph::new(&params);
            let im = g.leaf(&[3, IMG_H, IMG_W], vec![0.25f32; 3 * IMG_H * IMG_W]);
            let h0 = g.zeros(dims.lstm_dim);
            let c0 = g.zeros(dims.lstm_dim);
            let out =
                act_step(&net, &mut g, im, Some(2), 1.0, h0, c0, &mem, 4, 1e-3, use_mem).unwrap();
            g.data(out.logits).to_vec()
        };
        assert_eq!(run(true), run(false));
    }

    #[test]
    fn uniform_logits_sample_uniformly() {
        let lp = vec![(0.25f64).ln(); 4];
        assert_eq!(sample_action(&lp, 0.1), 0);
        assert_eq!(sample_action(&lp, 0.3), 1);
        assert_eq!(sample_action(&lp, 0.6), 2);
        assert_eq!(sample_action(&lp, 0.9), 3);
    }

    #[test]
    fn deterministic_given_seed_and_inputs() {
        let dims = tiny_dims();
        let mut params: ParamSet<f32> = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = AgentNet::build(dims, &mut params, &mut rng);
        let mem = MemBuffer::new(8);
        let run = || {
            let mut g = Graph::new(&params);
            let im = g.leaf(&[3, IMG_H, IMG_W], vec![0.1f32; 3 * IMG_H * IMG_W]);
            let h0 = g.zeros(dims.lstm_dim);
            let c0 = g.zeros(dims.lstm_dim);
            let out = act_step(&net, &mut g, im, Some(1), 0.5, h0, c0, &mem, 2, 1e-3, true).unwrap();
            (g.data(out.h).to_vec(), g.data(out.value)[0])
        };
        assert_eq!(run(), run());
    }
}
