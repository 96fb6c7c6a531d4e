//! Familiarity buffer: a circular store of visited states scored for
//! rarity. Each pass re-encodes every stored image and its augmented view,
//! applies the normalized-temperature contrastive loss over the batch, and
//! tracks a per-entry exponential moving average of that loss. Entries
//! whose average stays high are the long-tail candidates promoted to the
//! episodic memory.

use crate::augment::{augment, AugmentConfig};
use crate::error::AgentError;
use crate::memory::EntryId;
use crate::model::AgentNet;
use rand_chacha::ChaCha8Rng;
use zipflab_envs::{IMG_H, IMG_W};
use zipflab_numeric::{Graph, ParamId, ParamSet, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FamiliarityDims {
    pub im_len: usize,
    pub k_len: usize,
    pub p_len: usize,
    pub h_len: usize,
}

#[derive(Debug, Clone)]
pub struct FamiliarityEntry<R: Real> {
    pub entry_id: EntryId,
    pub im: Vec<R>,
    pub k: Vec<R>,
    pub p: Vec<R>,
    pub h: Vec<R>,
    /// Momentum (EMA) of this entry's per-pass contrastive loss.
    pub lm: f64,
    pub passes_seen: u32,
    pub insert_seq: u64,
}

#[derive(Debug, Clone)]
pub struct FamiliarityBuffer<R: Real> {
    capacity: usize,
    beta: f64,
    tau: f64,
    dims: FamiliarityDims,
    entries: Vec<FamiliarityEntry<R>>,
    cursor: usize,
    insert_counter: u64,
}

pub struct PassOutcome<R: Real> {
    pub mean_loss: f64,
    pub per_entry: Vec<f64>,
    /// Encoder gradients of grad_scale * mean loss, ready to add into the
    /// parameter set.
    pub grads: Vec<(ParamId, Vec<R>)>,
}

impl<R: Real> FamiliarityBuffer<R> {
    pub fn new(
        capacity: usize,
        beta: f64,
        tau: f64,
        dims: FamiliarityDims,
    ) -> Result<Self, AgentError> {
        if capacity == 0 {
            return Err(AgentError::InvalidArgument("capacity must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&beta) {
            return Err(AgentError::InvalidArgument(format!(
                "beta must be in [0,1), got {beta}"
            )));
        }
        if tau <= 0.0 {
            return Err(AgentError::InvalidArgument("tau must be > 0".into()));
        }
        Ok(FamiliarityBuffer {
            capacity,
            beta,
            tau,
            dims,
            entries: Vec::with_capacity(capacity),
            cursor: 0,
            insert_counter: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() == self.capacity
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entries(&self) -> impl Iterator<Item = &FamiliarityEntry<R>> {
        self.entries.iter()
    }

    /// FIFO insert. A reused slot loses the previous occupant's momentum
    /// history: the EMA of a different state is meaningless.
    pub fn add(
        &mut self,
        states: Vec<(EntryId, Vec<R>, Vec<R>, Vec<R>, Vec<R>)>,
    ) -> Result<(), AgentError> {
        for (entry_id, im, k, p, h) in states {
            if im.len() != self.dims.im_len
                || k.len() != self.dims.k_len
                || p.len() != self.dims.p_len
                || h.len() != self.dims.h_len
            {
                return Err(AgentError::InvalidArgument(format!(
                    "familiarity add: widths (im {}, k {}, p {}, h {}) do not match configured dims {:?}",
                    im.len(),
                    k.len(),
                    p.len(),
                    h.len(),
                    self.dims
                )));
            }
            let entry = FamiliarityEntry {
                entry_id,
                im,
                k,
                p,
                h,
                lm: 0.0,
                passes_seen: 0,
                insert_seq: self.insert_counter,
            };
            self.insert_counter += 1;
            if self.entries.len() < self.capacity {
                self.entries.push(entry);
            } else {
                self.entries[self.cursor] = entry;
                self.cursor = (self.cursor + 1) % self.capacity;
            }
        }
        Ok(())
    }

    /// One full sweep of the buffer in encoder minibatches.
    ///
    /// Inactive (returns None) until the buffer is full. For each entry i
    /// the pass re-encodes p_i = enc(im_i) and p_i_aug = enc(augment(im_i)),
    /// L2-normalizes, and scores the contrastive loss of the positive pair
    /// against the 2(N-1) in-batch negatives plus the positive itself.
    /// Returned gradients are of grad_scale * mean pass loss; per-entry
    /// losses feed the momentum update.
    pub fn contrastive_pass(
        &self,
        net: &AgentNet,
        params: &ParamSet<R>,
        aug_cfg: &AugmentConfig,
        rng: &mut ChaCha8Rng,
        grad_scale: R,
        minibatch: usize,
        pool: Option<&rayon::ThreadPool>,
    ) -> Result<Option<PassOutcome<R>>, AgentError> {
        if !self.is_full() {
            return Ok(None);
        }
        let n = self.entries.len();
        let mb = minibatch.max(1);
        let mut per_entry = vec![0.0f64; n];
        let d = self.dims.p_len;
        let mut acc: Vec<Option<Vec<R>>> = vec![None; params.len()];

        let mut start = 0;
        while start < n {
            let end = (start + mb).min(n);
            let idxs: Vec<usize> = (start..end).collect();
            let bs = idxs.len();

            // Augmented views, drawn serially so the rng stream is stable.
            let aug_ims: Vec<Vec<R>> = idxs
                .iter()
                .map(|&i| augment(&self.entries[i].im, 3, IMG_H, IMG_W, aug_cfg, rng))
                .collect();

            // Embeddings of originals and augmented views.
            let encode_one = |i: usize| -> Result<(Vec<R>, Vec<R>), AgentError> {
                let orig = {
                    let mut g = Graph::new(params);
                    let im = g.leaf(&[3, IMG_H, IMG_W], self.entries[idxs[i]].im.clone());
                    let p = net.encode(&mut g, im)?;
                    g.data(p).to_vec()
                };
                let aug = {
                    let mut g = Graph::new(params);
                    let im = g.leaf(&[3, IMG_H, IMG_W], aug_ims[i].clone());
                    let p = net.encode(&mut g, im)?;
                    g.data(p).to_vec()
                };
                Ok((orig, aug))
            };
            let embeddings: Vec<(Vec<R>, Vec<R>)> = match pool {
                Some(pool) => pool.install(|| {
                    use rayon::prelude::*;
                    (0..bs).into_par_iter().map(encode_one).collect::<Result<Vec<_>, AgentError>>()
                })?,
                None => (0..bs).map(encode_one).collect::<Result<_, _>>()?,
            };

            // Batch loss over embedding leaves.
            let (losses, grad_p, grad_a) = {
                let mut g = Graph::new(params);
                let mut p_flat = Vec::with_capacity(bs * d);
                let mut a_flat = Vec::with_capacity(bs * d);
                for (p, a) in &embeddings {
                    p_flat.extend_from_slice(p);
                    a_flat.extend_from_slice(a);
                }
                let p_mat = g.var_leaf(&[bs, d], p_flat);
                let a_mat = g.var_leaf(&[bs, d], a_flat);
                let pn = g.row_normalize(p_mat)?;
                let an = g.row_normalize(a_mat)?;
                let oo = g.matmul_nt(pn, pn)?;
                let oa = g.matmul_nt(pn, an)?;
                let loss_vec = g.nt_xent(oo, oa, R::of_f64(self.tau))?;
                let losses: Vec<f64> = g.data(loss_vec).iter().map(|v| v.into_f64()).collect();
                let mean = g.mean(loss_vec);
                if grad_scale != R::zero() {
                    // This minibatch's share of the pass-level mean.
                    let seed = grad_scale * R::of_f64(bs as f64 / n as f64);
                    g.backward_seeded(mean, &[seed])?;
                    let gp = g.leaf_grad(p_mat).map(|s| s.to_vec());
                    let ga = g.leaf_grad(a_mat).map(|s| s.to_vec());
                    (losses, gp, ga)
                } else {
                    (losses, None, None)
                }
            };
            for (pos, &i) in idxs.iter().enumerate() {
                per_entry[i] = losses[pos];
            }

            // Push embedding gradients back through per-image encoder graphs.
            if let (Some(gp), Some(ga)) = (grad_p, grad_a) {
                let backprop_one = |i: usize| -> Result<Vec<(ParamId, Vec<R>)>, AgentError> {
                    let mut g = Graph::new(params);
                    let im = g.leaf(&[3, IMG_H, IMG_W], self.entries[idxs[i]].im.clone());
                    let p = net.encode(&mut g, im)?;
                    let im_a = g.leaf(&[3, IMG_H, IMG_W], aug_ims[i].clone());
                    let pa = net.encode(&mut g, im_a)?;
                    g.backward_seeded(p, &gp[i * d..(i + 1) * d])?;
                    g.backward_seeded(pa, &ga[i * d..(i + 1) * d])?;
                    Ok(g.take_param_grads())
                };
                // Chunked so only a few per-image gradient sets are alive.
                let chunk = match pool {
                    Some(p) => p.current_num_threads().max(1) * 2,
                    None => 4,
                };
                let mut at = 0;
                while at < bs {
                    let upto = (at + chunk).min(bs);
                    let grads: Vec<Vec<(ParamId, Vec<R>)>> = match pool {
                        Some(pool) => pool.install(|| {
                            use rayon::prelude::*;
                            (at..upto).into_par_iter().map(backprop_one).collect::<Result<Vec<_>, AgentError>>()
                        })?,
                        None => (at..upto).map(backprop_one).collect::<Result<_, _>>()?,
                    };
                    for gset in grads {
                        for (pid, g) in gset {
                            match &mut acc[pid.0] {
                                Some(buf) => {
                                    for (a, b) in buf.iter_mut().zip(&g) {
                                        *a = *a + *b;
                                    }
                                }
                                slot @ None => *slot = Some(g),
                            }
                        }
                    }
                    at = upto;
                }
            }
            start = end;
        }

        let mean_loss = per_entry.iter().sum::<f64>() / n as f64;
        let grads = acc
            .into_iter()
            .enumerate()
            .filter_map(|(i, g)| g.map(|g| (ParamId(i), g)))
            .collect();
        Ok(Some(PassOutcome {
            mean_loss,
            per_entry,
            grads,
        }))
    }

    /// EMA update, one loss per live entry: first observation seeds the
    /// average, later ones blend with weight (1 - beta).
    pub fn update_momentum(&mut self, per_entry: &[f64]) -> Result<(), AgentError> {
        if per_entry.len() != self.entries.len() {
            return Err(AgentError::InvalidArgument(format!(
                "momentum update: {} losses for {} entries",
                per_entry.len(),
                self.entries.len()
            )));
        }
        for (e, &l) in self.entries.iter_mut().zip(per_entry) {
            if e.passes_seen == 0 {
                e.lm = l;
            } else {
                e.lm = self.beta * e.lm + (1.0 - self.beta) * l;
            }
            e.passes_seen += 1;
        }
        Ok(())
    }

    /// Normalized momentum M_i in [0, 1]: recenter by the buffer mean and
    /// scale by the max absolute deviation. All-equal momenta map to 0.5.
    pub fn normalized_momentum(&self) -> Result<Vec<f64>, AgentError> {
        if self.entries.is_empty() {
            return Err(AgentError::InvalidState(
                "normalized momentum of an empty buffer".into(),
            ));
        }
        let n = self.entries.len() as f64;
        let mean = self.entries.iter().map(|e| e.lm).sum::<f64>() / n;
        let max_dev = self
            .entries
            .iter()
            .map(|e| (e.lm - mean).abs())
            .fold(0.0f64, f64::max);
        if max_dev == 0.0 {
            return Ok(vec![0.5; self.entries.len()]);
        }
        Ok(self
            .entries
            .iter()
            .map(|e| 0.5 * ((e.lm - mean) / max_dev + 1.0))
            .collect())
    }

    /// The t_k entries with the highest normalized momentum; ties prefer
    /// the newer entry, then the smaller entry id. Entries are copied,
    /// not removed. t_k larger than the buffer clamps to everything.
    pub fn get_rare_k(&self, t_k: usize) -> Result<Vec<FamiliarityEntry<R>>, AgentError> {
        if t_k == 0 {
            return Err(AgentError::InvalidArgument("t_k must be >= 1".into()));
        }
        let m = self.normalized_momentum()?;
        let mut order: Vec<usize> = (0..self.entries.len()).collect();
        order.sort_by(|&a, &b| {
            m[b].partial_cmp(&m[a])
                .unwrap()
                .then(self.entries[b].insert_seq.cmp(&self.entries[a].insert_seq))
                .then(self.entries[a].entry_id.cmp(&self.entries[b].entry_id))
        });
        Ok(order
            .into_iter()
            .take(t_k.min(self.entries.len()))
            .map(|i| self.entries[i].clone())
            .collect())
    }

    /// Snapshot for resumable training. Images round-trip as u8 (they are
    /// exact multiples of 1/255); the vector fields keep f64 bits.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let push_u64 = |out: &mut Vec<u8>, v: u64| out.extend_from_slice(&v.to_le_bytes());
        push_u64(&mut out, self.capacity as u64);
        push_u64(&mut out, self.beta.to_bits());
        push_u64(&mut out, self.tau.to_bits());
        push_u64(&mut out, self.cursor as u64);
        push_u64(&mut out, self.insert_counter);
        for d in [self.dims.im_len, self.dims.k_len, self.dims.p_len, self.dims.h_len] {
            push_u64(&mut out, d as u64);
        }
        push_u64(&mut out, self.entries.len() as u64);
        for e in &self.entries {
            push_u64(&mut out, e.entry_id.0);
            out.extend_from_slice(&e.entry_id.1.to_le_bytes());
            for &v in &e.im {
                out.push((v.into_f64() * 255.0).round() as u8);
            }
            for vec in [&e.k, &e.p, &e.h] {
                for &v in vec.iter() {
                    out.extend_from_slice(&v.into_f64().to_le_bytes());
                }
            }
            push_u64(&mut out, e.lm.to_bits());
            out.extend_from_slice(&e.passes_seen.to_le_bytes());
            push_u64(&mut out, e.insert_seq);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, AgentError> {
        let mut cur = 0usize;
        let trunc = || AgentError::InvalidState("truncated familiarity snapshot".into());
        let take8 = |cur: &mut usize| -> Result<u64, AgentError> {
            let b = bytes.get(*cur..*cur + 8).ok_or_else(trunc)?;
            *cur += 8;
            Ok(u64::from_le_bytes(b.try_into().unwrap()))
        };
        let capacity = take8(&mut cur)? as usize;
        let beta = f64::from_bits(take8(&mut cur)?);
        let tau = f64::from_bits(take8(&mut cur)?);
        let cursor = take8(&mut cur)? as usize;
        let insert_counter = take8(&mut cur)?;
        let dims = FamiliarityDims {
            im_len: take8(&mut cur)? as usize,
            k_len: take8(&mut cur)? as usize,
            p_len: take8(&mut cur)? as usize,
            h_len: take8(&mut cur)? as usize,
        };
        let n = take8(&mut cur)? as usize;
        let mut buf = FamiliarityBuffer::new(capacity, beta, tau, dims)?;
        buf.cursor = cursor;
        buf.insert_counter = insert_counter;
        for _ in 0..n {
            let eid = take8(&mut cur)?;
            let sid = {
                let b = bytes.get(cur..cur + 4).ok_or_else(trunc)?;
                cur += 4;
                u32::from_le_bytes(b.try_into().unwrap())
            };
            let im_bytes = bytes.get(cur..cur + dims.im_len).ok_or_else(trunc)?;
            cur += dims.im_len;
            let im = im_bytes
                .iter()
                .map(|&b| R::of_f64(b as f64 / 255.0))
                .collect();
            let mut vecs: [Vec<R>; 3] = [Vec::new(), Vec::new(), Vec::new()];
            for (slot, len) in vecs.iter_mut().zip([dims.k_len, dims.p_len, dims.h_len]) {
                let mut v = Vec::with_capacity(len);
                for _ in 0..len {
                    v.push(R::of_f64(f64::from_bits(take8(&mut cur)?)));
                }
                *slot = v;
            }
            let [k, p, h] = vecs;
            let lm = f64::from_bits(take8(&mut cur)?);
            let passes_seen = {
                let b = bytes.get(cur..cur + 4).ok_or_else(trunc)?;
                cur += 4;
                u32::from_le_bytes(b.try_into().unwrap())
            };
            let insert_seq = take8(&mut cur)?;
            buf.entries.push(FamiliarityEntry {
                entry_id: (eid, sid),
                im,
                k,
                p,
                h,
                lm,
                passes_seen,
                insert_seq,
            });
        }
        Ok(buf)
    }

    /// Uniform sample without replacement (the contrastive-uniform and
    /// plain-MEM baselines feed the episodic memory this way).
    pub fn uniform_sample(
        &self,
        t_k: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<FamiliarityEntry<R>>, AgentError> {
        if t_k == 0 {
            return Err(AgentError::InvalidArgument("t_k must be >= 1".into()));
        }
        if self.entries.is_empty() {
            return Err(AgentError::InvalidState("sample from an empty buffer".into()));
        }
        let k = t_k.min(self.entries.len());
        let picked = rand::seq::index::sample(rng, self.entries.len(), k);
        Ok(picked.into_iter().map(|i| self.entries[i].clone()).collect())
    }
}
