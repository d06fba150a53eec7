//! Conditional VAE over per-label instance counts.
//!
//! Counts are predicted autoregressively in a fixed label order. Each step
//! conditions on the full label set, the current label, and the counts
//! already decided, fuses those three embeddings, and runs a conditional
//! VAE whose decoder emits the rate of a shifted Poisson over the count.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dist::{grad, DiagGaussian, ShiftedPoisson};
use crate::layout::{Layout, OrderingPolicy};
use crate::nd::{dense, NodeId, ParamStore, Tape, UnaryKind};
use crate::net::{
    register_dense, register_gaussian_head, register_mlp, DenseSlots, GaussianHeadSlots, MlpSlots,
};
use crate::train::AblationFlags;
use crate::{Error, Result};

/// Floor added to the decoded Poisson rate so its logarithm stays finite.
pub const RATE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CountVaeConfig {
    /// Number of categories M in the vocabulary.
    pub vocab_size: usize,
    /// Latent code dimension.
    pub latent_dim: usize,
    /// Width of every hidden layer.
    pub hidden: usize,
    /// Label order used for training and generation.
    pub ordering: OrderingPolicy,
    /// Conditioning ablation applied to every condition this model sees.
    pub ablation: AblationFlags,
}

impl CountVaeConfig {
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

/// Autoregressive conditioning input for one count step: the label set as
/// a multi-hot vector, the current label one-hot, and the sum of the
/// count vectors of the labels already processed.
#[derive(Debug, Clone, PartialEq)]
pub struct CountCondition {
    pub label_set: Vec<f64>,
    pub current_label: Vec<f64>,
    pub prev_counts: Vec<f64>,
}

impl CountCondition {
    /// Condition for step `step` of `order`, reading counts for earlier
    /// labels from `counts` (ground truth under teacher forcing, sampled
    /// values during generation).
    pub fn for_step(
        vocab_size: usize,
        order: &[u32],
        step: usize,
        counts: &BTreeMap<u32, u32>,
    ) -> Self {
        let mut label_set = vec![0.0; vocab_size];
        for &label in order {
            label_set[(label - 1) as usize] = 1.0;
        }
        let mut current_label = vec![0.0; vocab_size];
        current_label[(order[step] - 1) as usize] = 1.0;
        let mut prev_counts = vec![0.0; vocab_size];
        for &label in &order[..step] {
            prev_counts[(label - 1) as usize] += counts[&label] as f64;
        }
        Self {
            label_set,
            current_label,
            prev_counts,
        }
    }

    fn current_index(&self) -> usize {
        self.current_label
            .iter()
            .position(|&v| v != 0.0)
            .expect("current label one-hot has exactly one nonzero")
    }
}

struct CountSlots {
    embed_context: MlpSlots,
    embed_current: MlpSlots,
    embed_history: MlpSlots,
    fuse: DenseSlots,
    prior: GaussianHeadSlots,
    posterior: GaussianHeadSlots,
    decoder_trunk: MlpSlots,
    decoder_out: DenseSlots,
}

/// The count model: three condition embeddings, conditional prior and
/// posterior over the latent code, and a Poisson-rate decoder.
pub struct CountVae {
    config: CountVaeConfig,
    store: ParamStore,
    slots: CountSlots,
}

impl CountVae {
    pub fn new<R: Rng>(config: CountVaeConfig, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let slots = Self::register(&config, &mut store, rng);
        Self {
            config,
            store,
            slots,
        }
    }

    fn register<R: Rng>(
        config: &CountVaeConfig,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> CountSlots {
        let m = config.vocab_size;
        let h = config.hidden;
        let d = config.latent_dim;
        CountSlots {
            embed_context: register_mlp(store, "embed.context", m, &[h, h], rng),
            embed_current: register_mlp(store, "embed.current", m, &[h, h], rng),
            embed_history: register_mlp(store, "embed.history", m, &[h, h], rng),
            fuse: register_dense(store, "fuse", 3 * h, h, rng),
            prior: register_gaussian_head(store, "prior", h, &[h, h], d, rng),
            posterior: register_gaussian_head(store, "posterior", m + h, &[h, h], d, rng),
            decoder_trunk: register_mlp(store, "decoder.trunk", d + h, &[h, h], rng),
            decoder_out: register_dense(store, "decoder.out", h, 1, rng),
        }
    }

    pub fn config(&self) -> &CountVaeConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Fused condition embedding (the fc over the three component MLPs).
    /// The model's ablation flags are applied here, so every downstream
    /// computation sees the ablated condition.
    pub fn embed_condition(&self, tape: &mut Tape, cond: &CountCondition) -> Result<NodeId> {
        let cond = self.config.ablation.apply_count(cond);
        let ctx_in = tape.constant_vec(cond.label_set);
        let cur_in = tape.constant_vec(cond.current_label);
        let hist_in = tape.constant_vec(cond.prev_counts);
        let ctx = self.slots.embed_context.apply(tape, &self.store, ctx_in)?;
        let cur = self.slots.embed_current.apply(tape, &self.store, cur_in)?;
        let hist = self.slots.embed_history.apply(tape, &self.store, hist_in)?;
        let joined = tape.concat(&[ctx, cur, hist]);
        let fused = self.slots.fuse.apply(tape, &self.store, joined)?;
        Ok(tape.relu(fused))
    }

    /// Conditional prior over the latent code.
    pub fn prior(&self, tape: &mut Tape, cond_embed: NodeId) -> Result<(NodeId, NodeId)> {
        self.slots.prior.apply(tape, &self.store, cond_embed)
    }

    /// Approximate posterior given the true count.
    pub fn posterior(
        &self,
        tape: &mut Tape,
        count: u32,
        cond: &CountCondition,
        cond_embed: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        if count < 1 {
            return Err(Error::Domain(format!("count must be >= 1, got {count}")));
        }
        let mut count_vec = vec![0.0; self.config.vocab_size];
        count_vec[cond.current_index()] = count as f64;
        let count_in = tape.constant_vec(count_vec);
        let joined = tape.concat(&[count_in, cond_embed]);
        self.slots.posterior.apply(tape, &self.store, joined)
    }

    /// Decodes a latent sample into a strictly positive Poisson rate.
    pub fn decode(&self, tape: &mut Tape, z: NodeId, cond_embed: NodeId) -> Result<NodeId> {
        let joined = tape.concat(&[z, cond_embed]);
        let h = self.slots.decoder_trunk.apply(tape, &self.store, joined)?;
        let out = self.slots.decoder_out.apply(tape, &self.store, h)?;
        let rate = tape.unary(UnaryKind::Softplus, out);
        Ok(tape.scale_shift(rate, 1.0, RATE_FLOOR))
    }

    /// Single-step ELBO with one reparameterized posterior sample and
    /// analytic KL. Returns the ELBO node plus (recon, kl) values.
    pub fn step_elbo<R: Rng>(
        &self,
        tape: &mut Tape,
        count: u32,
        cond: &CountCondition,
        rng: &mut R,
    ) -> Result<(NodeId, f64, f64)> {
        let cond_embed = self.embed_condition(tape, cond)?;
        let (prior_mean, prior_var) = self.prior(tape, cond_embed)?;
        let (post_mean, post_var) = self.posterior(tape, count, cond, cond_embed)?;
        let eps: Vec<f64> = (0..self.config.latent_dim)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        let z = grad::reparam_sample(tape, post_mean, post_var, &eps)?;
        let rate = self.decode(tape, z, cond_embed)?;
        let recon = grad::shifted_poisson_logpmf(tape, u64::from(count), rate)?;
        let kl = grad::kl_diag_gaussian(tape, post_mean, post_var, prior_mean, prior_var)?;
        let elbo = tape.sub(recon, kl)?;
        Ok((elbo, tape.value(recon).item(), tape.value(kl).item()))
    }

    /// Teacher-forced per-image loss: the negative mean step ELBO over the
    /// ordered label set.
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
        let mut total: Option<NodeId> = None;
        for step in 0..order.len() {
            let cond =
                CountCondition::for_step(self.config.vocab_size, order, step, &layout.counts);
            let (elbo, _, _) = self.step_elbo(tape, layout.counts[&order[step]], &cond, rng)?;
            total = Some(match total {
                Some(t) => tape.add(t, elbo)?,
                None => elbo,
            });
        }
        let total = total.expect("at least one step");
        Ok(tape.scale_shift(total, -1.0 / order.len() as f64, 0.0))
    }

    /// Autoregressive generation: for each label in order, sample a latent
    /// from the conditional prior and a count from the decoded Poisson,
    /// feeding sampled counts into later conditions.
    pub fn generate<R: Rng>(&self, order: &[u32], rng: &mut R) -> Result<BTreeMap<u32, u32>> {
        if order.is_empty() {
            return Err(Error::Contract("generation over an empty label set".into()));
        }
        let mut counts = BTreeMap::new();
        for step in 0..order.len() {
            let cond = CountCondition::for_step(self.config.vocab_size, order, step, &counts);
            let mut tape = Tape::new();
            let cond_embed = self.embed_condition(&mut tape, &cond)?;
            let (mean, var) = self.prior(&mut tape, cond_embed)?;
            let prior = DiagGaussian::new(
                tape.value(mean).data().to_vec(),
                tape.value(var).data().to_vec(),
            )?;
            let z = prior.sample(rng);
            let zn = tape.constant_vec(z);
            let rate = self.decode(&mut tape, zn, cond_embed)?;
            let dist = ShiftedPoisson::new(tape.value(rate).item())?;
            counts.insert(order[step], dist.sample(rng) as u32);
        }
        Ok(counts)
    }

    /// Most-likely count at the prior mean latent, the prediction rule
    /// behind the accuracy metrics.
    pub fn predict_mode(&self, cond: &CountCondition) -> Result<u32> {
        let mut tape = Tape::new();
        let cond_embed = self.embed_condition(&mut tape, cond)?;
        let (mean, _var) = self.prior(&mut tape, cond_embed)?;
        let z = tape.value(mean).data().to_vec();
        let zn = tape.constant_vec(z);
        let rate = self.decode(&mut tape, zn, cond_embed)?;
        Ok(ShiftedPoisson::new(tape.value(rate).item())?.mode() as u32)
    }

    /// Monte-Carlo negative log-likelihood of one step from `samples`
    /// conditional-prior draws, batched through the decoder.
    pub fn step_nll_prior_mc<R: Rng>(
        &self,
        count: u32,
        cond: &CountCondition,
        samples: usize,
        rng: &mut R,
    ) -> Result<f64> {
        if samples < 1 {
            return Err(Error::Contract("need at least one sample".into()));
        }
        let mut tape = Tape::new();
        let cond_embed = self.embed_condition(&mut tape, cond)?;
        let (mean, var) = self.prior(&mut tape, cond_embed)?;
        let prior = DiagGaussian::new(
            tape.value(mean).data().to_vec(),
            tape.value(var).data().to_vec(),
        )?;
        let embed = tape.value(cond_embed).data().to_vec();

        let d = self.config.latent_dim;
        let mut latents = vec![0.0; samples * d];
        for s in 0..samples {
            let z = prior.sample(rng);
            latents[s * d..(s + 1) * d].copy_from_slice(&z);
        }
        let rates = self.decode_batched(&latents, samples, &embed);
        let mut logps = Vec::with_capacity(samples);
        for &rate in &rates {
            logps.push(ShiftedPoisson::new(rate)?.logpmf(u64::from(count))?);
        }
        Ok(-crate::dist::log_mean_exp(&logps)?)
    }

    /// Decoder applied to a batch of latent rows with a fixed condition
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

        // Layer 0 input is [z, embed]: the embed block is constant across
        // the batch, so it folds into the bias.
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
        let ow = out.weights(store);
        let ob = out.bias(store)[0];
        let mut rates = vec![0.0; samples];
        for s in 0..samples {
            let row = &cur[s * out.n_in..(s + 1) * out.n_in];
            let mut acc = ob;
            for (v, w) in row.iter().zip(ow) {
                acc += v * w;
            }
            rates[s] = crate::nd::softplus(acc) + RATE_FLOOR;
        }
        rates
    }

    /// Serializes weights plus configuration.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "count",
            "config": self.config,
        });
        crate::nd::checkpoint::write_checkpoint(path, &self.store, &meta)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let (store, meta) = crate::nd::checkpoint::read_checkpoint(path)?;
        let kind = meta.get("kind").and_then(|k| k.as_str()).unwrap_or("");
        if kind != "count" {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds a {kind:?} model, expected \"count\""
            )));
        }
        let config: CountVaeConfig = serde_json::from_value(
            meta.get("config")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("missing config in checkpoint header".into()))?,
        )
        .map_err(|e| Error::Checkpoint(format!("bad config in checkpoint header: {e}")))?;
        Self::from_store(config, store)
    }

    /// Rebuilds the model around loaded weights, verifying that the
    /// declared configuration matches the stored shapes.
    pub fn from_store(config: CountVaeConfig, store: ParamStore) -> Result<Self> {
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

#[cfg(test)]
mod tests;
