//! Test-time metrics and experiments: dataset-level likelihoods via prior
//! Monte-Carlo and importance sampling, accuracy and IoU under mean-latent
//! decoding, the flipped-layout anomaly experiment, and the comparison
//! tables over ablations, label orders, and latent sizes.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::bboxvae::{teacher_forced_steps, BBoxVae};
use crate::countvae::{CountCondition, CountVae};
use crate::layout::{iou, Layout, OrderingPolicy, Vocabulary};
use crate::train::{
    derive_seed, resolve_order, train_bbox, train_count, AblationFlags, ModelKind, SplitId,
    TrainConfig,
};
use crate::{Error, Result};

const EVAL_SALT: u64 = 21;

/// Per-step and per-image negative log-likelihood over a split.
#[derive(Debug, Clone, PartialEq)]
pub struct NllSummary {
    /// Mean NLL per autoregressive step (per label for counts, per box
    /// for boxes), the normalization of the training losses.
    pub per_step: f64,
    /// Mean over images of the per-image total NLL.
    pub per_image: f64,
    pub steps: usize,
    pub images: usize,
}

/// Teacher-forced count NLL by conditional-prior Monte Carlo.
pub fn count_dataset_nll(
    model: &CountVae,
    vocab: &Vocabulary,
    layouts: &[Layout],
    split: SplitId,
    samples: usize,
    seed: u64,
) -> Result<NllSummary> {
    let mut step_sum = 0.0;
    let mut image_sum = 0.0;
    let mut steps = 0usize;
    for (idx, layout) in layouts.iter().enumerate() {
        let order = resolve_order(vocab, model.config().ordering, &layout.labels, split, idx)?;
        let mut rng =
            ChaCha20Rng::seed_from_u64(derive_seed(&[seed, EVAL_SALT, split as u64, idx as u64]));
        let mut image_total = 0.0;
        for step in 0..order.len() {
            let cond = CountCondition::for_step(vocab.len(), &order, step, &layout.counts);
            let nll =
                model.step_nll_prior_mc(layout.counts[&order[step]], &cond, samples, &mut rng)?;
            step_sum += nll;
            image_total += nll;
            steps += 1;
        }
        image_sum += image_total;
    }
    Ok(NllSummary {
        per_step: step_sum / steps as f64,
        per_image: image_sum / layouts.len() as f64,
        steps,
        images: layouts.len(),
    })
}

/// Teacher-forced box NLL; latents come from the conditional prior or,
/// with `importance`, from the posterior with density-ratio weights.
pub fn bbox_dataset_nll(
    model: &BBoxVae,
    vocab: &Vocabulary,
    layouts: &[Layout],
    split: SplitId,
    samples: usize,
    importance: bool,
    seed: u64,
) -> Result<NllSummary> {
    let mut step_sum = 0.0;
    let mut image_sum = 0.0;
    let mut steps = 0usize;
    for (idx, layout) in layouts.iter().enumerate() {
        let order = resolve_order(vocab, model.config().ordering, &layout.labels, split, idx)?;
        let mut rng =
            ChaCha20Rng::seed_from_u64(derive_seed(&[seed, EVAL_SALT, split as u64, idx as u64]));
        let mut image_total = 0.0;
        for (cond, target) in teacher_forced_steps(vocab.len(), layout, &order) {
            let nll = model.step_nll(&target, &cond, samples, importance, &mut rng)?;
            step_sum += nll;
            image_total += nll;
            steps += 1;
        }
        image_sum += image_total;
    }
    Ok(NllSummary {
        per_step: step_sum / steps as f64,
        per_image: image_sum / layouts.len() as f64,
        steps,
        images: layouts.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccuracySummary {
    pub exact_pct: f64,
    pub within_one_pct: f64,
    pub steps: usize,
}

/// Teacher-forced count accuracy under mean-latent decoding: the latent is
/// the conditional prior mean and the prediction is the most likely count.
pub fn count_accuracy(
    model: &CountVae,
    vocab: &Vocabulary,
    layouts: &[Layout],
    split: SplitId,
) -> Result<AccuracySummary> {
    let mut exact = 0usize;
    let mut within_one = 0usize;
    let mut steps = 0usize;
    for (idx, layout) in layouts.iter().enumerate() {
        let order = resolve_order(vocab, model.config().ordering, &layout.labels, split, idx)?;
        for step in 0..order.len() {
            let cond = CountCondition::for_step(vocab.len(), &order, step, &layout.counts);
            let predicted = model.predict_mode(&cond)?;
            let truth = layout.counts[&order[step]];
            if predicted == truth {
                exact += 1;
            }
            if predicted.abs_diff(truth) <= 1 {
                within_one += 1;
            }
            steps += 1;
        }
    }
    Ok(AccuracySummary {
        exact_pct: 100.0 * exact as f64 / steps as f64,
        within_one_pct: 100.0 * within_one as f64 / steps as f64,
        steps,
    })
}

/// Teacher-forced mean IoU of the decoder mean at the prior mean latent
/// against each ground-truth box.
pub fn mean_iou(
    model: &BBoxVae,
    vocab: &Vocabulary,
    layouts: &[Layout],
    split: SplitId,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut steps = 0usize;
    for (idx, layout) in layouts.iter().enumerate() {
        let order = resolve_order(vocab, model.config().ordering, &layout.labels, split, idx)?;
        for (cond, target) in teacher_forced_steps(vocab.len(), layout, &order) {
            let predicted = model.predict_mean(&cond)?;
            sum += iou(&predicted, &target);
            steps += 1;
        }
    }
    Ok(sum / steps as f64)
}

/// Outcome of scoring original versus vertically flipped layouts.
#[derive(Debug, Clone, PartialEq)]
pub struct FlipReport {
    /// Fraction of layouts whose flipped version scores a higher
    /// (worse) per-box NLL.
    pub fraction_worse: f64,
    pub mean_nll_original: f64,
    pub mean_nll_flipped: f64,
    /// Per-layout (original, flipped) per-box NLLs.
    pub pairs: Vec<(f64, f64)>,
}

/// Scores each layout and its upside-down mirror by importance-sampled
/// per-box NLL.
pub fn flip_experiment(
    model: &BBoxVae,
    vocab: &Vocabulary,
    layouts: &[Layout],
    samples: usize,
    seed: u64,
) -> Result<FlipReport> {
    if layouts.is_empty() {
        return Err(Error::Contract("flip experiment needs layouts".into()));
    }
    let mut pairs = Vec::with_capacity(layouts.len());
    let mut worse = 0usize;
    let mut sum_orig = 0.0;
    let mut sum_flip = 0.0;
    for (idx, layout) in layouts.iter().enumerate() {
        let order = resolve_order(
            vocab,
            model.config().ordering,
            &layout.labels,
            SplitId::Test,
            idx,
        )?;
        let nll_of = |l: &Layout, which: u64| -> Result<f64> {
            let mut rng =
                ChaCha20Rng::seed_from_u64(derive_seed(&[seed, EVAL_SALT, 7, idx as u64, which]));
            let mut sum = 0.0;
            let mut n = 0usize;
            for (cond, target) in teacher_forced_steps(vocab.len(), l, &order) {
                sum += model.step_nll(&target, &cond, samples, true, &mut rng)?;
                n += 1;
            }
            Ok(sum / n as f64)
        };
        let orig = nll_of(layout, 0)?;
        let flipped = nll_of(&layout.flip_vertical(), 1)?;
        if flipped > orig {
            worse += 1;
        }
        sum_orig += orig;
        sum_flip += flipped;
        pairs.push((orig, flipped));
    }
    Ok(FlipReport {
        fraction_worse: worse as f64 / layouts.len() as f64,
        mean_nll_original: sum_orig / layouts.len() as f64,
        mean_nll_flipped: sum_flip / layouts.len() as f64,
        pairs,
    })
}

/// Aggregate agreement between the two marginal-likelihood estimators,
/// plus the rate at which the negative ELBO dips below the importance
/// estimate beyond Monte-Carlo noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsistencyReport {
    pub mean_importance: f64,
    pub mean_prior_mc: f64,
    /// Mean of the per-step negative ELBO (averaged over posterior draws).
    pub mean_neg_elbo: f64,
    /// Fraction of steps whose negative ELBO sits below the importance
    /// NLL by more than three standard errors of the ELBO estimate.
    pub elbo_violation_rate: f64,
    pub steps: usize,
}

/// Posterior draws averaged per step when bounding the NLL by the ELBO.
/// A single draw would make the comparison a coin flip whenever the
/// variational gap is smaller than the ELBO's own noise.
const ELBO_DRAWS: usize = 16;

pub fn bbox_estimator_consistency(
    model: &BBoxVae,
    vocab: &Vocabulary,
    layouts: &[Layout],
    samples: usize,
    seed: u64,
) -> Result<ConsistencyReport> {
    let mut sum_is = 0.0;
    let mut sum_mc = 0.0;
    let mut sum_neg_elbo = 0.0;
    let mut violations = 0usize;
    let mut steps = 0usize;
    for (idx, layout) in layouts.iter().enumerate() {
        let order = resolve_order(
            vocab,
            model.config().ordering,
            &layout.labels,
            SplitId::Test,
            idx,
        )?;
        let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(&[seed, EVAL_SALT, 9, idx as u64]));
        for (cond, target) in teacher_forced_steps(vocab.len(), layout, &order) {
            let nll_is = model.step_nll(&target, &cond, samples, true, &mut rng)?;
            let nll_mc = model.step_nll(&target, &cond, samples, false, &mut rng)?;

            let mut draws = [0.0f64; ELBO_DRAWS];
            for d in draws.iter_mut() {
                let mut tape = crate::nd::Tape::new();
                let (elbo, _, _) = model.step_elbo(&mut tape, &target, &cond, &mut rng)?;
                *d = -tape.value(elbo).item();
            }
            let mean: f64 = draws.iter().sum::<f64>() / ELBO_DRAWS as f64;
            let var: f64 =
                draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (ELBO_DRAWS - 1) as f64;
            let stderr = (var / ELBO_DRAWS as f64).sqrt();
            if mean < nll_is - 3.0 * stderr {
                violations += 1;
            }
            sum_neg_elbo += mean;
            sum_is += nll_is;
            sum_mc += nll_mc;
            steps += 1;
        }
    }
    Ok(ConsistencyReport {
        mean_importance: sum_is / steps as f64,
        mean_prior_mc: sum_mc / steps as f64,
        mean_neg_elbo: sum_neg_elbo / steps as f64,
        elbo_violation_rate: violations as f64 / steps as f64,
        steps,
    })
}

/// One row of a comparison table: a configuration label plus its test NLL.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub name: String,
    pub val_loss: f64,
    pub test_nll_per_step: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub title: String,
    pub rows: Vec<TableRow>,
}

impl ComparisonTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,val_loss,test_nll_per_step\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{}\n",
                r.name, r.val_loss, r.test_nll_per_step
            ));
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{}\n", self.title);
        let width = self
            .rows
            .iter()
            .map(|r| r.name.len())
            .max()
            .unwrap_or(4)
            .max(4);
        out.push_str(&format!(
            "{:width$}  {:>10}  {:>16}\n",
            "name", "val_loss", "test_nll_per_step"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:width$}  {:>10.4}  {:>16.4}\n",
                r.name, r.val_loss, r.test_nll_per_step
            ));
        }
        out
    }
}

/// Experiment kinds mirroring the published comparison tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableKind {
    /// 2x2 grid over history/context conditioning.
    Ablation,
    /// things-first vs stuffs-first vs random-per-image label order.
    Order,
    /// Latent dimension sweep.
    Latent,
}

/// Trains one model per row of the requested table and evaluates its test
/// NLL (prior Monte-Carlo, matching the published protocol).
#[allow(clippy::too_many_arguments)]
pub fn run_table(
    kind: TableKind,
    base: &TrainConfig,
    vocab: &Vocabulary,
    train_data: &[Layout],
    val_data: &[Layout],
    test_data: &[Layout],
    samples: usize,
    latent_sizes: &[usize],
) -> Result<ComparisonTable> {
    let mut configs: Vec<(String, TrainConfig)> = Vec::new();
    match kind {
        TableKind::Ablation => {
            for (history, context) in [(false, false), (false, true), (true, false), (true, true)] {
                let mut c = *base;
                c.ablation = AblationFlags {
                    use_history: history,
                    use_context: context,
                };
                let name = format!(
                    "history={} context={}",
                    if history { "yes" } else { "no" },
                    if context { "yes" } else { "no" }
                );
                configs.push((name, c));
            }
        }
        TableKind::Order => {
            for policy in [
                OrderingPolicy::ThingsFirst,
                OrderingPolicy::StuffsFirst,
                OrderingPolicy::RandomPerImage,
            ] {
                let mut c = *base;
                c.ordering = policy;
                configs.push((policy.as_str().to_string(), c));
            }
        }
        TableKind::Latent => {
            for &d in latent_sizes {
                let mut c = *base;
                c.latent_dim = d;
                configs.push((format!("latent_dim={d}"), c));
            }
        }
    }

    let mut rows = Vec::with_capacity(configs.len());
    for (name, config) in configs {
        let (val_loss, test_nll) = match config.model_kind {
            ModelKind::Count => {
                let (model, report) = train_count(&config, vocab, train_data, val_data)?;
                let nll = count_dataset_nll(
                    &model,
                    vocab,
                    test_data,
                    SplitId::Test,
                    samples,
                    config.seed,
                )?;
                (report.best_val_loss(), nll.per_step)
            }
            ModelKind::BBox => {
                let (model, report) = train_bbox(&config, vocab, train_data, val_data)?;
                let nll = bbox_dataset_nll(
                    &model,
                    vocab,
                    test_data,
                    SplitId::Test,
                    samples,
                    false,
                    config.seed,
                )?;
                (report.best_val_loss(), nll.per_step)
            }
        };
        rows.push(TableRow {
            name,
            val_loss,
            test_nll_per_step: test_nll,
        });
    }

    let title = match kind {
        TableKind::Ablation => "conditioning ablation (test NLL per step)",
        TableKind::Order => "label order (test NLL per step)",
        TableKind::Latent => "latent size (test NLL per step)",
    };
    Ok(ComparisonTable {
        title: title.to_string(),
        rows,
    })
}
