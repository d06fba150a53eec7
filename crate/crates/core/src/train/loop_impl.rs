//! The optimization loop shared by both sub-models.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::{derive_seed, salt, ModelKind, TrainConfig};
use crate::bboxvae::{BBoxVae, BBoxVaeConfig};
use crate::countvae::{CountVae, CountVaeConfig};
use crate::layout::{order_labels, Layout, OrderingPolicy, Vocabulary};
use crate::nd::{Gradients, NodeId, ParamStore, Tape};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub wall_secs: f64,
}

/// Loss trajectory plus the validation-selected epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// 1-based epoch whose weights were kept (argmin validation loss).
    pub selected_epoch: usize,
    pub wall_secs: f64,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{},{}\n", e.epoch, e.train_loss, e.val_loss));
        }
        out
    }

    pub fn best_val_loss(&self) -> f64 {
        self.epochs[self.selected_epoch - 1].val_loss
    }
}

pub enum TrainedModel {
    Count(CountVae),
    BBox(BBoxVae),
}

impl TrainedModel {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        match self {
            Self::Count(m) => m.save(path),
            Self::BBox(m) => m.save(path),
        }
    }
}

/// Split identifiers entering per-example rng derivation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitId {
    Train = 0,
    Val = 1,
    Test = 2,
}

/// Label order for one example. Fixed policies ignore the identifiers;
/// the random policy derives a per-example order that is stable across
/// epochs and across training/evaluation (it does not depend on the
/// training seed).
pub fn resolve_order(
    vocab: &Vocabulary,
    policy: OrderingPolicy,
    labels: &[u32],
    split: SplitId,
    index: usize,
) -> Result<Vec<u32>> {
    match policy {
        OrderingPolicy::RandomPerImage => {
            let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(&[
                salt::RANDOM_ORDER,
                split as u64,
                index as u64,
            ]));
            order_labels(labels, vocab, policy, Some(&mut rng))
        }
        _ => order_labels::<ChaCha20Rng>(labels, vocab, policy, None),
    }
}

/// Narrow view of the two models that the loop needs.
trait Trainable: Sync {
    fn image_loss_on(
        &self,
        tape: &mut Tape,
        layout: &Layout,
        order: &[u32],
        rng: &mut ChaCha20Rng,
    ) -> Result<NodeId>;
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
}

impl Trainable for CountVae {
    fn image_loss_on(
        &self,
        tape: &mut Tape,
        layout: &Layout,
        order: &[u32],
        rng: &mut ChaCha20Rng,
    ) -> Result<NodeId> {
        self.image_loss(tape, layout, order, rng)
    }
    fn store(&self) -> &ParamStore {
        CountVae::store(self)
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        CountVae::store_mut(self)
    }
}

impl Trainable for BBoxVae {
    fn image_loss_on(
        &self,
        tape: &mut Tape,
        layout: &Layout,
        order: &[u32],
        rng: &mut ChaCha20Rng,
    ) -> Result<NodeId> {
        self.image_loss(tape, layout, order, rng)
    }
    fn store(&self) -> &ParamStore {
        BBoxVae::store(self)
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        BBoxVae::store_mut(self)
    }
}

/// Trains a count model with the given configuration.
pub fn train_count(
    config: &TrainConfig,
    vocab: &Vocabulary,
    train_data: &[Layout],
    val_data: &[Layout],
) -> Result<(CountVae, TrainReport)> {
    config.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(&[config.seed, salt::INIT]));
    let model_config = CountVaeConfig {
        vocab_size: vocab.len(),
        latent_dim: config.latent_dim,
        hidden: config.hidden,
        ordering: config.ordering,
        ablation: config.ablation,
    };
    let mut model = CountVae::new(model_config, &mut rng);
    let report = run_loop(&mut model, config, vocab, train_data, val_data)?;
    Ok((model, report))
}

/// Trains a box model with the given configuration.
pub fn train_bbox(
    config: &TrainConfig,
    vocab: &Vocabulary,
    train_data: &[Layout],
    val_data: &[Layout],
) -> Result<(BBoxVae, TrainReport)> {
    config.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(&[config.seed, salt::INIT]));
    let model_config = BBoxVaeConfig {
        vocab_size: vocab.len(),
        latent_dim: config.latent_dim,
        hidden: config.hidden,
        ordering: config.ordering,
        ablation: config.ablation,
    };
    let mut model = BBoxVae::new(model_config, &mut rng);
    let report = run_loop(&mut model, config, vocab, train_data, val_data)?;
    Ok((model, report))
}

/// Trains whichever model the config names.
pub fn train(
    config: &TrainConfig,
    vocab: &Vocabulary,
    train_data: &[Layout],
    val_data: &[Layout],
) -> Result<(TrainedModel, TrainReport)> {
    match config.model_kind {
        ModelKind::Count => {
            let (m, r) = train_count(config, vocab, train_data, val_data)?;
            Ok((TrainedModel::Count(m), r))
        }
        ModelKind::BBox => {
            let (m, r) = train_bbox(config, vocab, train_data, val_data)?;
            Ok((TrainedModel::BBox(m), r))
        }
    }
}

const GRAD_NORM_ABORT: f64 = 1e6;

fn run_loop<M: Trainable>(
    model: &mut M,
    config: &TrainConfig,
    vocab: &Vocabulary,
    train_data: &[Layout],
    val_data: &[Layout],
) -> Result<TrainReport> {
    if train_data.is_empty() || val_data.is_empty() {
        return Err(Error::Train(
            "training needs nonempty train and val splits".into(),
        ));
    }

    let started = clock::start();
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, Vec<crate::nd::NumArray>)> = None;
    let mut adam_t = 0u64;

    for epoch in 1..=config.epochs {
        let epoch_started = clock::start();
        let order_cache = OrderCache {
            vocab,
            policy: config.ordering,
        };

        // deterministic shuffle per epoch
        let mut perm: Vec<usize> = (0..train_data.len()).collect();
        let mut shuffle_rng =
            ChaCha20Rng::seed_from_u64(derive_seed(&[config.seed, salt::SHUFFLE, epoch as u64]));
        for i in (1..perm.len()).rev() {
            let j = rand::Rng::gen_range(&mut shuffle_rng, 0..=i);
            perm.swap(i, j);
        }

        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for batch in perm.chunks(config.batch_size) {
            let (grads, batch_loss) =
                compute_batch_grads(model, config, &order_cache, train_data, batch, epoch)?;
            loss_sum += batch_loss * batch.len() as f64;
            seen += batch.len();

            let store = model.store_mut();
            store.accumulate(&grads);
            let norm = store.grad_norm();
            if !norm.is_finite() || norm > GRAD_NORM_ABORT {
                return Err(Error::Train(format!(
                    "gradient norm {norm:.3e} at epoch {epoch}; training diverged"
                )));
            }
            adam_t += 1;
            store.adam_step(config.lr, 0.9, 0.999, 1e-8, adam_t)?;
        }
        let train_loss = loss_sum / seen as f64;

        let val_loss = validation_loss(model, &order_cache, val_data)?;
        if !val_loss.is_finite() {
            return Err(Error::Train(format!(
                "non-finite validation loss at epoch {epoch}"
            )));
        }
        let improved = best.as_ref().is_none_or(|(_, b, _)| val_loss < *b);
        if improved {
            best = Some((epoch, val_loss, model.store().snapshot()));
        }
        epochs.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            wall_secs: clock::elapsed(epoch_started),
        });
    }

    let (selected_epoch, _, snapshot) = best.expect("at least one epoch ran");
    model.store_mut().restore(&snapshot)?;
    Ok(TrainReport {
        epochs,
        selected_epoch,
        wall_secs: clock::elapsed(started),
    })
}

struct OrderCache<'v> {
    vocab: &'v Vocabulary,
    policy: OrderingPolicy,
}

impl OrderCache<'_> {
    fn order(&self, layout: &Layout, split: SplitId, index: usize) -> Result<Vec<u32>> {
        resolve_order(self.vocab, self.policy, &layout.labels, split, index)
    }
}

/// Runs a slice of examples on one shared tape: parameters are attached
/// once per chunk and a single backward sweep serves every example. The
/// chunk loss is pre-scaled by 1/batch, so chunk gradients merge by
/// addition.
fn process_chunk<M: Trainable>(
    model: &M,
    config: &TrainConfig,
    orders: &OrderCache,
    data: &[Layout],
    indices: &[usize],
    epoch: usize,
    batch_len: usize,
) -> Result<(Gradients, f64)> {
    let mut tape = Tape::new();
    let mut total: Option<NodeId> = None;
    let mut loss_sum = 0.0;
    for &idx in indices {
        let layout = &data[idx];
        let order = orders.order(layout, SplitId::Train, idx)?;
        let noise = derive_seed(&[config.seed, salt::STEP_NOISE, epoch as u64, idx as u64]);
        let mut rng = ChaCha20Rng::seed_from_u64(noise);
        let loss = model.image_loss_on(&mut tape, layout, &order, &mut rng)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            let id = layout
                .meta
                .image_id
                .map(|v| v.to_string())
                .unwrap_or_else(|| format!("index {idx}"));
            return Err(Error::Train(format!(
                "non-finite loss on example {id} (epoch {epoch})"
            )));
        }
        loss_sum += value;
        total = Some(match total {
            Some(t) => tape.add(t, loss)?,
            None => loss,
        });
    }
    let total = total.expect("chunks are nonempty");
    let scaled = tape.scale_shift(total, 1.0 / batch_len as f64, 0.0);
    Ok((tape.backward(scaled)?, loss_sum))
}

fn compute_batch_grads<M: Trainable>(
    model: &M,
    config: &TrainConfig,
    orders: &OrderCache,
    data: &[Layout],
    batch: &[usize],
    epoch: usize,
) -> Result<(Gradients, f64)> {
    let n_threads = config.threads.max(1).min(batch.len());
    let (grads, loss_sum) = if n_threads <= 1 {
        process_chunk(model, config, orders, data, batch, epoch, batch.len())?
    } else {
        // contiguous chunks merged in order, so results are reproducible
        // for a fixed thread count
        let chunk_len = batch.len().div_ceil(n_threads);
        let chunks: Vec<&[usize]> = batch.chunks(chunk_len).collect();
        let results: Vec<Result<(Gradients, f64)>> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunks
                .iter()
                .map(|chunk| {
                    scope.spawn(move || {
                        process_chunk(model, config, orders, data, chunk, epoch, batch.len())
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("worker panicked"))
                .collect()
        });
        let mut agg = Gradients::empty(model.store().len());
        let mut sum = 0.0;
        for r in results {
            let (g, s) = r?;
            agg.merge(&g);
            sum += s;
        }
        (agg, sum)
    };
    Ok((grads, loss_sum / batch.len() as f64))
}

/// Teacher-forced validation loss with a fixed per-example rng, so model
/// selection compares epochs on identical noise.
fn validation_loss<M: Trainable>(
    model: &M,
    orders: &OrderCache,
    val_data: &[Layout],
) -> Result<f64> {
    let mut sum = 0.0;
    // forward-only shared tapes, rebuilt periodically to bound memory
    let mut tape = Tape::new();
    for (idx, layout) in val_data.iter().enumerate() {
        if tape.len() > 200_000 {
            tape = Tape::new();
        }
        let order = orders.order(layout, SplitId::Val, idx)?;
        let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(&[salt::VALIDATION, idx as u64]));
        let loss = model.image_loss_on(&mut tape, layout, &order, &mut rng)?;
        sum += tape.value(loss).item();
    }
    Ok(sum / val_data.len() as f64)
}

/// Wall-clock helpers that degrade gracefully where no monotonic clock
/// exists (wasm).
mod clock {
    #[cfg(not(target_arch = "wasm32"))]
    pub fn start() -> std::time::Instant {
        std::time::Instant::now()
    }

    #[cfg(not(target_arch = "wasm32"))]
    pub fn elapsed(start: std::time::Instant) -> f64 {
        start.elapsed().as_secs_f64()
    }

    #[cfg(target_arch = "wasm32")]
    pub fn start() {}

    #[cfg(target_arch = "wasm32")]
    pub fn elapsed(_start: ()) -> f64 {
        0.0
    }
}
