//! Conditional VAE over bounding boxes.
//!
//! Boxes are predicted autoregressively: labels in the fixed order, boxes
//! left to right within each label. Each step conditions on the label set
//! with counts, the current label, and a recurrent pooling of every box
//! placed so far. The decoder predicts the mean of a four-dimensional
//! Gaussian whose per-coordinate spread is fixed.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dist::{grad, DiagGaussian};
use crate::layout::{BBox, Layout, OrderingPolicy};
use crate::nd::{dense, recurrent_cell_step, NodeId, ParamStore, Tape, UnaryKind};
use crate::net::{
    register_cell, register_dense, register_gaussian_head, register_mlp, CellSlots, DenseSlots,
    GaussianHeadSlots, MlpSlots,
};
use crate::train::AblationFlags;
use crate::{Error, Result};

/// Fixed per-coordinate standard deviation of the box decoder.
pub const BOX_STD: f64 = 0.02;
/// The matching variance, 0.0004 per coordinate.
pub const BOX_VAR: f64 = BOX_STD * BOX_STD;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBoxVaeConfig {
    pub vocab_size: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    pub ordering: OrderingPolicy,
    pub ablation: AblationFlags,
}

impl BBoxVaeConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            latent_dim: 32,
            hidden: 128,
            ordering: OrderingPolicy::ThingsFirst,
            ablation: AblationFlags::default(),
        }
    }
}

/// Conditioning input for one box step: pooled label-count vector over the
/// whole label set, current label one-hot, and the ordered list of every
/// box already placed (earlier labels' boxes, then earlier boxes of the
/// current label), each tagged with its label.
#[derive(Debug, Clone, PartialEq)]
pub struct BBoxCondition {
    pub label_counts: Vec<f64>,
    pub current_label: Vec<f64>,
    pub prev_boxes: Vec<(u32, BBox)>,
}

impl BBoxCondition {
    /// Teacher-forced condition for the `j`-th box (0-based) of the label
    /// at position `step` in `order`.
    pub fn for_step(
        vocab_size: usize,
        order: &[u32],
        counts: &BTreeMap<u32, u32>,
        boxes: &BTreeMap<u32, Vec<BBox>>,
        step: usize,
        j: usize,
    ) -> Self {
        let label = order[step];
        let mut prev_boxes = Vec::new();
        for &earlier in &order[..step] {
            for b in &boxes[&earlier] {
                prev_boxes.push((earlier, *b));
            }
        }
        for b in &boxes[&label][..j] {
            prev_boxes.push((label, *b));
        }
        Self {
            label_counts: pooled_counts(vocab_size, counts),
            current_label: one_hot(vocab_size, label),
            prev_boxes,
        }
    }
}

pub(crate) fn pooled_counts(vocab_size: usize, counts: &BTreeMap<u32, u32>) -> Vec<f64> {
    let mut v = vec![0.0; vocab_size];
    for (&label, &n) in counts {
        v[(label - 1) as usize] = n as f64;
    }
    v
}

fn one_hot(vocab_size: usize, label: u32) -> Vec<f64> {
    let mut v = vec![0.0; vocab_size];
    v[(label - 1) as usize] = 1.0;
    v
}

/// Box plus label one-hot, the per-element input of the pooling cell.
fn box_input(vocab_size: usize, label: u32, b: &BBox) -> Vec<f64> {
    let mut v = Vec::with_capacity(4 + vocab_size);
    v.extend_from_slice(&b.as_array());
    v.extend_from_slice(&one_hot(vocab_size, label));
    v
}

struct BBoxSlots {
    embed_counts: MlpSlots,
    embed_current: MlpSlots,
    pool_cell: CellSlots,
    embed_pooled: MlpSlots,
    fuse: DenseSlots,
    prior: GaussianHeadSlots,
    posterior: GaussianHeadSlots,
    decoder_trunk: MlpSlots,
    decoder_out: DenseSlots,
}

/// The box model: count-aware context embedding, recurrent pooling of
/// placed boxes, conditional prior/posterior, and a fixed-spread Gaussian
/// decoder squashed into the unit square.
pub struct BBoxVae {
    config: BBoxVaeConfig,
    store: ParamStore,
    slots: BBoxSlots,
}

/// Running state of the box pooling cell, advanced one placed box at a
/// time so autoregressive prefixes share work.
pub struct PoolState {
    h: NodeId,
    c: NodeId,
}

impl BBoxVae {
    pub fn new<R: Rng>(config: BBoxVaeConfig, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let slots = Self::register(&config, &mut store, rng);
        Self {
            config,
            store,
            slots,
        }
    }

    fn register<R: Rng>(config: &BBoxVaeConfig, store: &mut ParamStore, rng: &mut R) -> BBoxSlots {
        let m = config.vocab_size;
        let h = config.hidden;
        let d = config.latent_dim;
        BBoxSlots {
            embed_counts: register_mlp(store, "embed.counts", m, &[h, h], rng),
            embed_current: register_mlp(store, "embed.current", m, &[h, h], rng),
            pool_cell: register_cell(store, "pool", 4 + m, h, rng),
            embed_pooled: register_mlp(store, "embed.pooled", h, &[h, h], rng),
            fuse: register_dense(store, "fuse", 3 * h, h, rng),
            prior: register_gaussian_head(store, "prior", h, &[h, h], d, rng),
            posterior: register_gaussian_head(store, "posterior", 4 + h, &[h, h], d, rng),
            decoder_trunk: register_mlp(store, "decoder.trunk", d + h, &[h, h], rng),
            decoder_out: register_dense(store, "decoder.out", h, 4, rng),
        }
    }

    pub fn config(&self) -> &BBoxVaeConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Zeroed pooling state: the defined base case for an empty history.
    pub fn pool_init(&self, tape: &mut Tape) -> PoolState {
        let h = tape.constant_vec(vec![0.0; self.config.hidden]);
        let c = tape.constant_vec(vec![0.0; self.config.hidden]);
        PoolState { h, c }
    }

    /// Advances the pooling cell over one placed box.
    pub fn pool_push(
        &self,
        tape: &mut Tape,
        state: &PoolState,
        label: u32,
        b: &BBox,
    ) -> Result<PoolState> {
        let input = tape.constant_vec(box_input(self.config.vocab_size, label, b));
        let cell = self.slots.pool_cell.nodes(tape, &self.store);
        let (h, c) = recurrent_cell_step(tape, input, state.h, state.c, &cell)?;
        Ok(PoolState { h, c })
    }

    /// Pooled representation of a box sequence: the final hidden state of
    /// the recurrent cell, or zeros for an empty sequence.
    pub fn pool_prev_boxes(&self, tape: &mut Tape, prev: &[(u32, BBox)]) -> Result<NodeId> {
        let mut state = self.pool_init(tape);
        for (label, b) in prev {
            state = self.pool_push(tape, &state, *label, b)?;
        }
        Ok(state.h)
    }

    /// Condition embedding from an explicit condition (applies the model's
    /// ablation flags first).
    pub fn embed_condition(&self, tape: &mut Tape, cond: &BBoxCondition) -> Result<NodeId> {
        let cond = self.config.ablation.apply_bbox(cond);
        let pooled = self.pool_prev_boxes(tape, &cond.prev_boxes)?;
        let counts_in = tape.constant_vec(cond.label_counts);
        let current_in = tape.constant_vec(cond.current_label);
        self.fuse_components(tape, counts_in, current_in, pooled)
    }

    /// Fusion of the three component embeddings given their raw inputs
    /// already on the tape (context vector, current one-hot, pooled h).
    fn fuse_components(
        &self,
        tape: &mut Tape,
        counts_in: NodeId,
        current_in: NodeId,
        pooled: NodeId,
    ) -> Result<NodeId> {
        let ctx = self
            .slots
            .embed_counts
            .apply(tape, &self.store, counts_in)?;
        let cur = self
            .slots
            .embed_current
            .apply(tape, &self.store, current_in)?;
        let pool = self.slots.embed_pooled.apply(tape, &self.store, pooled)?;
        let joined = tape.concat(&[ctx, cur, pool]);
        let fused = self.slots.fuse.apply(tape, &self.store, joined)?;
        Ok(tape.relu(fused))
    }

    pub fn prior(&self, tape: &mut Tape, cond_embed: NodeId) -> Result<(NodeId, NodeId)> {
        self.slots.prior.apply(tape, &self.store, cond_embed)
    }

    /// Posterior over the latent given the ground-truth box.
    pub fn posterior(
        &self,
        tape: &mut Tape,
        target: &BBox,
        cond_embed: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let box_in = tape.constant_vec(target.as_array().to_vec());
        let joined = tape.concat(&[box_in, cond_embed]);
        self.slots.posterior.apply(tape, &self.store, joined)
    }

    /// Decodes a latent into the Gaussian mean over (x, y, w, h); each
    /// coordinate is squashed into (0, 1). The variance is the fixed
    /// [`BOX_VAR`] per coordinate, returned as a constant node.
    pub fn decode(
        &self,
        tape: &mut Tape,
        z: NodeId,
        cond_embed: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let joined = tape.concat(&[z, cond_embed]);
        let h = self.slots.decoder_trunk.apply(tape, &self.store, joined)?;
        let out = self.slots.decoder_out.apply(tape, &self.store, h)?;
        let mean = tape.unary(UnaryKind::Sigmoid, out);
        let var = tape.constant_vec(vec![BOX_VAR; 4]);
        Ok((mean, var))
    }

    /// Single-step ELBO with one posterior sample and analytic KL, from an
    /// explicit condition embedding.
    fn step_elbo_at<R: Rng>(
        &self,
        tape: &mut Tape,
        target: &BBox,
        cond_embed: NodeId,
        rng: &mut R,
    ) -> Result<(NodeId, f64, f64)> {
        let (prior_mean, prior_var) = self.prior(tape, cond_embed)?;
        let (post_mean, post_var) = self.posterior(tape, target, cond_embed)?;
        let eps: Vec<f64> = (0..self.config.latent_dim)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        let z = grad::reparam_sample(tape, post_mean, post_var, &eps)?;
        let (mean, var) = self.decode(tape, z, cond_embed)?;
        let recon = grad::gaussian_logpdf_const(tape, &target.as_array(), mean, var)?;
        let kl = grad::kl_diag_gaussian(tape, post_mean, post_var, prior_mean, prior_var)?;
        let elbo = tape.sub(recon, kl)?;
        Ok((elbo, tape.value(recon).item(), tape.value(kl).item()))
    }

    /// Single-step ELBO from an explicit condition.
    pub fn step_elbo<R: Rng>(
        &self,
        tape: &mut Tape,
        target: &BBox,
        cond: &BBoxCondition,
        rng: &mut R,
    ) -> Result<(NodeId, f64, f64)> {
        let cond_embed = self.embed_condition(tape, cond)?;
        self.step_elbo_at(tape, target, cond_embed, rng)
    }

    /// Teacher-forced per-image loss: negative mean step ELBO over all
    /// boxes, visiting labels in `order` and boxes left to right.
    ///
    /// The pooling cell runs once over the ground-truth sequence; step
    /// (k, j) reads the hidden state after its prefix, which is exactly
    /// the pooled history that an explicit per-step condition would see.
    pub fn image_loss<R: Rng>(
        &self,
        tape: &mut Tape,
        layout: &Layout,
        order: &[u32],
        rng: &mut R,
    ) -> Result<NodeId> {
        if order.is_empty() {
            return Err(Error::Contract("image loss over an empty label set".into()));
        }
        let use_history = self.config.ablation.use_history;
        let label_counts = if self.config.ablation.use_context {
            pooled_counts(self.config.vocab_size, &layout.counts)
        } else {
            vec![0.0; self.config.vocab_size]
        };
        let counts_in = tape.constant_vec(label_counts);
        let ctx = self
            .slots
            .embed_counts
            .apply(tape, &self.store, counts_in)?;

        let mut state = self.pool_init(tape);
        let mut total: Option<NodeId> = None;
        let mut steps = 0usize;
        for (k_idx, &label) in order.iter().enumerate() {
            let current_in = tape.constant_vec(one_hot(self.config.vocab_size, label));
            let cur = self
                .slots
                .embed_current
                .apply(tape, &self.store, current_in)?;
            for b in &layout.boxes[&label] {
                let pooled = if use_history {
                    state.h
                } else {
                    self.pool_init(tape).h
                };
                let pool = self.slots.embed_pooled.apply(tape, &self.store, pooled)?;
                let joined = tape.concat(&[ctx, cur, pool]);
                let fused = self.slots.fuse.apply(tape, &self.store, joined)?;
                let cond_embed = tape.relu(fused);
                let (elbo, _, _) = self.step_elbo_at(tape, b, cond_embed, rng)?;
                total = Some(match total {
                    Some(t) => tape.add(t, elbo)?,
                    None => elbo,
                });
                steps += 1;
                state = self.pool_push(tape, &state, label, b)?;
            }
            let _ = k_idx;
        }
        let total = total.expect("layouts have at least one box");
        Ok(tape.scale_shift(total, -1.0 / steps as f64, 0.0))
    }

    /// Autoregressive generation of a full set of boxes for the given
    /// ordered labels and counts. Each step samples a latent from the
    /// conditional prior and, unless `mean_only`, a box from the decoder
    /// Gaussian; boxes are clipped into the unit square and fed back into
    /// the pooled history.
    pub fn generate<R: Rng>(
        &self,
        order: &[u32],
        counts: &BTreeMap<u32, u32>,
        mean_only: bool,
        rng: &mut R,
    ) -> Result<BTreeMap<u32, Vec<BBox>>> {
        for &label in order {
            match counts.get(&label) {
                Some(&n) if n >= 1 => {}
                _ => {
                    return Err(Error::Contract(format!(
                        "generation needs a count >= 1 for label {label}"
                    )))
                }
            }
        }
        let mut tape = Tape::new();
        let label_counts = if self.config.ablation.use_context {
            pooled_counts(self.config.vocab_size, counts)
        } else {
            vec![0.0; self.config.vocab_size]
        };
        let counts_in = tape.constant_vec(label_counts);
        let ctx = self
            .slots
            .embed_counts
            .apply(&mut tape, &self.store, counts_in)?;

        let mut out: BTreeMap<u32, Vec<BBox>> = BTreeMap::new();
        let mut state = self.pool_init(&mut tape);
        for &label in order {
            let current_in = tape.constant_vec(one_hot(self.config.vocab_size, label));
            let cur = self
                .slots
                .embed_current
                .apply(&mut tape, &self.store, current_in)?;
            for _ in 0..counts[&label] {
                let pooled = if self.config.ablation.use_history {
                    state.h
                } else {
                    self.pool_init(&mut tape).h
                };
                let pool = self
                    .slots
                    .embed_pooled
                    .apply(&mut tape, &self.store, pooled)?;
                let joined = tape.concat(&[ctx, cur, pool]);
                let fused = self.slots.fuse.apply(&mut tape, &self.store, joined)?;
                let cond_embed = tape.relu(fused);

                let (mean, var) = self.prior(&mut tape, cond_embed)?;
                let prior = DiagGaussian::new(
                    tape.value(mean).data().to_vec(),
                    tape.value(var).data().to_vec(),
                )?;
                let z = prior.sample(rng);
                let zn = tape.constant_vec(z);
                let (box_mean, _v) = self.decode(&mut tape, zn, cond_embed)?;
                let mv = tape.value(box_mean).data();
                let raw: Vec<f64> = if mean_only {
                    mv.to_vec()
                } else {
                    mv.iter()
                        .map(|&m| {
                            let eps: f64 = rng.sample(StandardNormal);
                            m + BOX_STD * eps
                        })
                        .collect()
                };
                let b = BBox::clip_from_unchecked(raw[0], raw[1], raw[2], raw[3]);
                out.entry(label).or_default().push(b);
                state = self.pool_push(&mut tape, &state, label, &b)?;
            }
        }
        Ok(out)
    }

    /// Decoder mean at the prior mean latent, the deterministic
    /// prediction behind the IoU metric.
    pub fn predict_mean(&self, cond: &BBoxCondition) -> Result<BBox> {
        let mut tape = Tape::new();
        let cond_embed = self.embed_condition(&mut tape, cond)?;
        let (mean, _var) = self.prior(&mut tape, cond_embed)?;
        let z = tape.value(mean).data().to_vec();
        let zn = tape.constant_vec(z);
        let (box_mean, _) = self.decode(&mut tape, zn, cond_embed)?;
        let m = tape.value(box_mean).data();
        Ok(BBox::clip_from_unchecked(m[0], m[1], m[2], m[3]))
    }

    /// Per-step negative log-likelihood estimate. `importance` draws the
    /// latents from the posterior and reweights by prior/posterior density;
    /// otherwise they come straight from the conditional prior.
    pub fn step_nll<R: Rng>(
        &self,
        target: &BBox,
        cond: &BBoxCondition,
        samples: usize,
        importance: bool,
        rng: &mut R,
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let cond_embed = self.embed_condition(&mut tape, cond)?;
        self.step_nll_at(&mut tape, target, cond_embed, samples, importance, rng)
    }

    /// As [`BBoxVae::step_nll`] but reusing a condition embedding already
    /// on `tape` (the dataset scorers batch stepwise over shared prefixes).
    pub(crate) fn step_nll_at<R: Rng>(
        &self,
        tape: &mut Tape,
        target: &BBox,
        cond_embed: NodeId,
        samples: usize,
        importance: bool,
        rng: &mut R,
    ) -> Result<f64> {
        if samples < 1 {
            return Err(Error::Contract("need at least one sample".into()));
        }
        let (pm, pv) = self.prior(tape, cond_embed)?;
        let prior = DiagGaussian::new(
            tape.value(pm).data().to_vec(),
            tape.value(pv).data().to_vec(),
        )?;
        let embed = tape.value(cond_embed).data().to_vec();
        let d = self.config.latent_dim;

        let mut latents = vec![0.0; samples * d];
        let mut weights = vec![0.0; samples];
        if importance {
            let (qm, qv) = self.posterior(tape, target, cond_embed)?;
            let posterior = DiagGaussian::new(
                tape.value(qm).data().to_vec(),
                tape.value(qv).data().to_vec(),
            )?;
            for s in 0..samples {
                let z = posterior.sample(rng);
                weights[s] = prior.logpdf(&z)? - posterior.logpdf(&z)?;
                latents[s * d..(s + 1) * d].copy_from_slice(&z);
            }
        } else {
            for s in 0..samples {
                let z = prior.sample(rng);
                latents[s * d..(s + 1) * d].copy_from_slice(&z);
            }
        }

        let means = self.decode_batched(&latents, samples, &embed);
        let tgt = target.as_array();
        let mut logps = Vec::with_capacity(samples);
        for s in 0..samples {
            let mean = &means[s * 4..(s + 1) * 4];
            let mut lp = 0.0;
            for (m, x) in mean.iter().zip(&tgt) {
                let diff = x - m;
                lp += -0.5 * (LN_2PI + BOX_VAR.ln()) - diff * diff / (2.0 * BOX_VAR);
            }
            logps.push(lp + weights[s]);
        }
        Ok(-crate::dist::log_mean_exp(&logps)?)
    }

    /// Batched decoder means for latent rows with a fixed condition
    /// embedding; matches the tape forward exactly (tested).
    pub(crate) fn decode_batched(
        &self,
        latents: &[f64],
        samples: usize,
        embed: &[f64],
    ) -> Vec<f64> {
        let d = self.config.latent_dim;
        let h = self.config.hidden;
        let store = &self.store;
        let trunk = &self.slots.decoder_trunk.layers;

        let l0 = &trunk[0];
        let w0 = l0.weights(store);
        let mut fixed = vec![0.0; h];
        dense::matvec(embed, &w0[d * h..], l0.bias(store), &mut fixed);
        let mut act = vec![0.0; samples * h];
        dense::matmul(latents, samples, d, &w0[..d * h], h, &mut act);
        dense::add_row(&mut act, samples, &fixed);
        dense::relu_inplace(&mut act);

        let mut cur = act;
        for layer in &trunk[1..] {
            let mut next = vec![0.0; samples * layer.n_out];
            dense::matmul(
                &cur,
                samples,
                layer.n_in,
                layer.weights(store),
                layer.n_out,
                &mut next,
            );
            dense::add_row(&mut next, samples, layer.bias(store));
            dense::relu_inplace(&mut next);
            cur = next;
        }

        let out = &self.slots.decoder_out;
        let mut means = vec![0.0; samples * 4];
        dense::matmul(&cur, samples, out.n_in, out.weights(store), 4, &mut means);
        dense::add_row(&mut means, samples, out.bias(store));
        dense::sigmoid_inplace(&mut means);
        means
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "bbox",
            "config": self.config,
        });
        crate::nd::checkpoint::write_checkpoint(path, &self.store, &meta)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let (store, meta) = crate::nd::checkpoint::read_checkpoint(path)?;
        let kind = meta.get("kind").and_then(|k| k.as_str()).unwrap_or("");
        if kind != "bbox" {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds a {kind:?} model, expected \"bbox\""
            )));
        }
        let config: BBoxVaeConfig = serde_json::from_value(
            meta.get("config")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("missing config in checkpoint header".into()))?,
        )
        .map_err(|e| Error::Checkpoint(format!("bad config in checkpoint header: {e}")))?;
        Self::from_store(config, store)
    }

    pub fn from_store(config: BBoxVaeConfig, store: ParamStore) -> Result<Self> {
        let mut fresh = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let slots = Self::register(&config, &mut fresh, &mut rng);
        if store.len() != fresh.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, config needs {}",
                store.len(),
                fresh.len()
            )));
        }
        for slot in 0..fresh.len() {
            let name = fresh.name(slot).to_string();
            let src = store
                .slot(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name:?}")))?;
            if store.value(src).shape() != fresh.value(slot).shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name:?} has shape {:?}, config needs {:?}",
                    store.value(src).shape(),
                    fresh.value(slot).shape()
                )));
            }
            *fresh.value_mut(slot) = store.value(src).clone();
        }
        Ok(Self {
            config,
            store: fresh,
            slots,
        })
    }
}

const LN_2PI: f64 = 1.8378770664093453;

/// Steps of the teacher-forced iteration in (label order, left-to-right)
/// visit order, with explicit conditions. Used by the evaluators; the
/// training loss computes the same thing with shared pooling prefixes.
pub fn teacher_forced_steps(
    vocab_size: usize,
    layout: &Layout,
    order: &[u32],
) -> Vec<(BBoxCondition, BBox)> {
    let mut steps = Vec::with_capacity(layout.total_boxes());
    for (k_idx, &label) in order.iter().enumerate() {
        for (j, b) in layout.boxes[&label].iter().enumerate() {
            steps.push((
                BBoxCondition::for_step(vocab_size, order, &layout.counts, &layout.boxes, k_idx, j),
                *b,
            ));
        }
    }
    steps
}
