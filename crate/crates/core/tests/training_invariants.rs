//! Learning-dynamics invariants: monotone descent on a fixed batch from
//! random init, and enough capacity to drive a 32-example overfit set to
//! its floor.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use layoutvae::countvae::{CountCondition, CountVae, CountVaeConfig};
use layoutvae::data::mnist::{self, MnistRuleConfig};
use layoutvae::dist::ShiftedPoisson;
use layoutvae::layout::{Layout, OrderingPolicy, Vocabulary};
use layoutvae::nd::Tape;
use layoutvae::train::{resolve_order, train_bbox, train_count, SplitId, TrainConfig};

fn small_dataset(n: usize) -> (Vocabulary, Vec<Layout>) {
    let config = MnistRuleConfig {
        train: n,
        val: 0,
        test: 0,
        ..Default::default()
    };
    (Vocabulary::mnist(), mnist::generate_split(&config, 1, 0, n))
}

/// With the posterior noise replayed from a fixed seed, the batch loss is
/// a deterministic objective; at the published learning rate every one of
/// the first 200 steps strictly decreases it.
#[test]
fn count_loss_strictly_decreases_on_a_fixed_batch() {
    let (vocab, data) = small_dataset(32);
    let mut model = {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        CountVae::new(CountVaeConfig::new(vocab.len()), &mut rng)
    };
    let mut losses = Vec::with_capacity(200);
    for step in 1..=200u64 {
        let mut tape = Tape::new();
        let mut noise = ChaCha20Rng::seed_from_u64(77);
        let mut total = None;
        for (idx, layout) in data.iter().enumerate() {
            let order = resolve_order(
                &vocab,
                OrderingPolicy::ThingsFirst,
                &layout.labels,
                SplitId::Train,
                idx,
            )
            .unwrap();
            let loss = model
                .image_loss(&mut tape, layout, &order, &mut noise)
                .unwrap();
            total = Some(match total {
                Some(t) => tape.add(t, loss).unwrap(),
                None => loss,
            });
        }
        let scaled = tape.scale_shift(total.unwrap(), 1.0 / data.len() as f64, 0.0);
        losses.push(tape.value(scaled).item());
        let grads = tape.backward(scaled).unwrap();
        let store = model.store_mut();
        store.accumulate(&grads);
        store.adam_step(1e-5, 0.9, 0.999, 1e-8, step).unwrap();
    }
    for (i, w) in losses.windows(2).enumerate() {
        assert!(
            w[1] < w[0],
            "step {}: loss {} did not decrease from {}",
            i + 1,
            w[1],
            w[0]
        );
    }
}

/// Best achievable teacher-forced count NLL on a fixed set: steps with
/// identical conditions share one rate, optimized by grid search. This is
/// the floor that overfitting can approach; duplicate conditions with
/// different target counts keep it well above zero.
fn count_overfit_floor(vocab: &Vocabulary, layouts: &[Layout]) -> f64 {
    let mut groups: BTreeMap<String, Vec<u32>> = BTreeMap::new();
    for layout in layouts {
        let order = resolve_order(
            vocab,
            OrderingPolicy::ThingsFirst,
            &layout.labels,
            SplitId::Train,
            0,
        )
        .unwrap();
        for step in 0..order.len() {
            let cond = CountCondition::for_step(vocab.len(), &order, step, &layout.counts);
            let key = format!("{cond:?}");
            groups
                .entry(key)
                .or_default()
                .push(layout.counts[&order[step]]);
        }
    }
    let mut total = 0.0;
    let mut steps = 0usize;
    for counts in groups.values() {
        let mut best = f64::INFINITY;
        let mut rate = 0.05;
        while rate < 10.0 {
            let dist = ShiftedPoisson::new(rate).unwrap();
            let nll: f64 = counts
                .iter()
                .map(|&n| -dist.logpmf(u64::from(n)).unwrap())
                .sum();
            best = best.min(nll);
            rate += 0.05;
        }
        total += best;
        steps += counts.len();
    }
    total / steps as f64
}

/// Count capacity: 2000 steps on 32 examples reach the conditional floor.
/// The raw 10%-of-initial bar is unreachable here by construction: images
/// sharing a label set see identical conditions with different target
/// counts, so the floor is their conditional entropy, not zero.
#[test]
fn count_overfit_reaches_the_conditional_floor() {
    let (vocab, data) = small_dataset(32);
    let mut config = TrainConfig::count_defaults();
    config.lr = 1e-3;
    config.epochs = 2000;
    config.batch_size = 32;
    config.threads = 1;
    let (_, report) = train_count(&config, &vocab, &data, &data).unwrap();
    let initial = report.epochs[0].train_loss;
    let final_loss = report.epochs.last().unwrap().train_loss;
    let floor = count_overfit_floor(&vocab, &data);
    assert!(
        final_loss < floor + 0.2,
        "final {final_loss:.4} should approach the floor {floor:.4} (initial {initial:.4})"
    );
    assert!(
        final_loss < 0.5 * initial,
        "final {final_loss:.4} vs initial {initial:.4}"
    );
}

/// Box capacity: continuous targets have no duplicate-condition floor, so
/// the plain bar applies — 2000 steps bring the loss under 10% of its
/// starting value (it goes negative well before that).
#[test]
fn bbox_overfit_reaches_a_tenth_of_initial() {
    let (vocab, data) = small_dataset(32);
    let mut config = TrainConfig::bbox_defaults();
    config.epochs = 2000;
    config.batch_size = 32;
    config.threads = 1;
    let (_, report) = train_bbox(&config, &vocab, &data, &data).unwrap();
    let initial = report.epochs[0].train_loss;
    let final_loss = report.epochs.last().unwrap().train_loss;
    assert!(initial > 0.0, "random-init box loss starts positive");
    assert!(
        final_loss < 0.1 * initial,
        "final {final_loss:.4} vs initial {initial:.4}"
    );
}
