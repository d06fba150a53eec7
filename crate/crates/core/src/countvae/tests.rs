use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::*;
use crate::dist::log_mean_exp;
use crate::layout::{BBox, LayoutMeta, Vocabulary};

fn test_model(seed: u64) -> CountVae {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut config = CountVaeConfig::new(4);
    config.latent_dim = 8;
    config.hidden = 16;
    CountVae::new(config, &mut rng)
}

fn zeroed_model() -> CountVae {
    let mut model = test_model(0);
    for slot in 0..model.store().len() {
        model.store_mut().value_mut(slot).fill(0.0);
    }
    model
}

fn cond_example() -> CountCondition {
    let counts: BTreeMap<u32, u32> = [(1, 2), (2, 3)].into();
    CountCondition::for_step(4, &[1, 2, 3], 2, &counts)
}

#[test]
fn condition_for_step_pools_previous_counts() {
    let cond = cond_example();
    assert_eq!(cond.label_set, vec![1.0, 1.0, 1.0, 0.0]);
    assert_eq!(cond.current_label, vec![0.0, 0.0, 1.0, 0.0]);
    assert_eq!(cond.prev_counts, vec![2.0, 3.0, 0.0, 0.0]);
}

#[test]
fn earlier_sampled_counts_change_later_conditions() {
    let order = [1, 2, 3];
    let a: BTreeMap<u32, u32> = [(1, 2), (2, 3)].into();
    let mut b = a.clone();
    b.insert(1, 4);
    let cond_a = CountCondition::for_step(4, &order, 2, &a);
    let cond_b = CountCondition::for_step(4, &order, 2, &b);
    assert_ne!(cond_a.prev_counts, cond_b.prev_counts);
}

#[test]
fn zero_weights_give_zero_embedding() {
    let model = zeroed_model();
    let mut tape = Tape::new();
    let e = model.embed_condition(&mut tape, &cond_example()).unwrap();
    assert!(tape.value(e).data().iter().all(|&v| v == 0.0));
}

#[test]
fn pooled_history_is_order_invariant() {
    // two prefixes with the same multiset of (label, count) pairs pool to
    // the same vector, so the embedding cannot depend on their order
    let counts: BTreeMap<u32, u32> = [(1, 2), (2, 3), (3, 1)].into();
    let a = CountCondition::for_step(4, &[1, 2, 3], 2, &counts);
    let b = CountCondition::for_step(4, &[2, 1, 3], 2, &counts);
    assert_eq!(a.prev_counts, b.prev_counts);

    let model = test_model(3);
    let mut tape = Tape::new();
    let ea = model.embed_condition(&mut tape, &a).unwrap();
    let eb = model.embed_condition(&mut tape, &b).unwrap();
    assert_eq!(tape.value(ea).data(), tape.value(eb).data());
}

#[test]
fn embedding_depends_on_every_component() {
    let model = test_model(5);
    let base = cond_example();
    let mut tape = Tape::new();
    let e = model.embed_condition(&mut tape, &base).unwrap();
    let loss = tape.sum(e);
    let grads = tape.backward(loss).unwrap();
    for prefix in ["embed.context", "embed.current", "embed.history"] {
        let slot = model.store().slot(&format!("{prefix}.l0.w")).unwrap();
        let g = grads
            .slot(slot)
            .expect("component weights reached by backward");
        assert!(
            g.data().iter().any(|&v| v != 0.0),
            "{prefix} got an all-zero gradient"
        );
    }
}

#[test]
fn prior_emits_positive_variance_of_latent_dim() {
    let model = test_model(7);
    let mut tape = Tape::new();
    let e = model.embed_condition(&mut tape, &cond_example()).unwrap();
    let (mean, var) = model.prior(&mut tape, e).unwrap();
    assert_eq!(tape.value(mean).len(), 8);
    assert_eq!(tape.value(var).len(), 8);
    assert!(tape.value(var).data().iter().all(|&v| v > 0.0));
}

#[test]
fn prior_distinguishes_conditions() {
    let model = test_model(11);
    let counts = BTreeMap::new();
    let a = CountCondition::for_step(4, &[1, 2], 0, &counts);
    let b = CountCondition::for_step(4, &[1, 3], 0, &counts);
    let mut tape = Tape::new();
    let ea = model.embed_condition(&mut tape, &a).unwrap();
    let eb = model.embed_condition(&mut tape, &b).unwrap();
    let (ma, _) = model.prior(&mut tape, ea).unwrap();
    let (mb, _) = model.prior(&mut tape, eb).unwrap();
    assert_ne!(tape.value(ma).data(), tape.value(mb).data());
}

#[test]
fn posterior_shape_positivity_and_count_sensitivity() {
    let model = test_model(13);
    let cond = cond_example();
    let mut tape = Tape::new();
    let e = model.embed_condition(&mut tape, &cond).unwrap();
    let (m2, v2) = model.posterior(&mut tape, 2, &cond, e).unwrap();
    let (m5, _) = model.posterior(&mut tape, 5, &cond, e).unwrap();
    assert_eq!(tape.value(m2).len(), 8);
    assert!(tape.value(v2).data().iter().all(|&v| v > 0.0));
    assert_ne!(tape.value(m2).data(), tape.value(m5).data());

    assert!(model.posterior(&mut tape, 0, &cond, e).is_err());
}

#[test]
fn decoded_rate_is_positive_and_deterministic() {
    let model = test_model(17);
    let cond = cond_example();
    let run = || {
        let mut tape = Tape::new();
        let e = model.embed_condition(&mut tape, &cond).unwrap();
        let z = tape.constant_vec(vec![0.3; 8]);
        let rate = model.decode(&mut tape, z, e).unwrap();
        tape.value(rate).item()
    };
    let rate = run();
    assert!(rate > 0.0);
    assert_eq!(rate, run());
}

#[test]
fn decoder_rate_gradient_wrt_latent_matches_finite_differences() {
    let model = test_model(19);
    let cond = cond_example();
    let count = 3u32;
    let eval = |z: &[f64]| {
        let mut tape = Tape::new();
        let e = model.embed_condition(&mut tape, &cond).unwrap();
        let zn = tape.constant_vec(z.to_vec());
        let rate = model.decode(&mut tape, zn, e).unwrap();
        let lp =
            crate::dist::grad::shifted_poisson_logpmf(&mut tape, u64::from(count), rate).unwrap();
        (tape, lp, zn)
    };
    let z0 = vec![0.1, -0.2, 0.4, 0.0, 0.7, -0.5, 0.2, 0.3];
    let (mut tape, lp, zn) = eval(&z0);
    tape.backward(lp).unwrap();
    let analytic = tape.grad(zn).unwrap().to_vec();
    let eps = 1e-6;
    for i in 0..z0.len() {
        let mut hi = z0.clone();
        hi[i] += eps;
        let mut lo = z0.clone();
        lo[i] -= eps;
        let (th, lh, _) = eval(&hi);
        let (tl, ll, _) = eval(&lo);
        let numeric = (th.value(lh).item() - tl.value(ll).item()) / (2.0 * eps);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
        assert!(
            (analytic[i] - numeric).abs() / denom < 1e-4,
            "z[{i}]: {} vs {numeric}",
            analytic[i]
        );
    }
}

#[test]
fn step_elbo_kl_is_nonnegative() {
    let model = test_model(23);
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    for count in [1, 2, 5] {
        let mut tape = Tape::new();
        let (_, _, kl) = model
            .step_elbo(&mut tape, count, &cond_example(), &mut rng)
            .unwrap();
        assert!(kl >= 0.0, "negative KL {kl}");
    }
}

/// Copies the prior head into the posterior head and zeroes the rows that
/// read the count vector, making q identical to p for every input.
fn tie_posterior_to_prior(model: &mut CountVae) {
    let m = model.config().vocab_size;
    let pairs = [
        ("posterior.trunk.l0", "prior.trunk.l0"),
        ("posterior.trunk.l1", "prior.trunk.l1"),
        ("posterior.mean", "prior.mean"),
        ("posterior.logvar", "prior.logvar"),
    ];
    for (dst, src) in pairs {
        for suffix in [".w", ".b"] {
            let src_slot = model.store().slot(&format!("{src}{suffix}")).unwrap();
            let dst_slot = model.store().slot(&format!("{dst}{suffix}")).unwrap();
            let src_val = model.store().value(src_slot).clone();
            let dst_shape = model.store().value(dst_slot).shape().to_vec();
            if src_val.shape() == dst_shape.as_slice() {
                *model.store_mut().value_mut(dst_slot) = src_val;
            } else {
                // first trunk layer: posterior input is [count_vec, embed];
                // zero the count rows, copy the embed rows from the prior
                let (rows_dst, cols) = (dst_shape[0], dst_shape[1]);
                let mut data = vec![0.0; rows_dst * cols];
                data[m * cols..].copy_from_slice(src_val.data());
                *model.store_mut().value_mut(dst_slot) =
                    crate::nd::NumArray::matrix(rows_dst, cols, data).unwrap();
            }
        }
    }
}

#[test]
fn elbo_equals_reconstruction_when_posterior_matches_prior() {
    let mut model = test_model(29);
    tie_posterior_to_prior(&mut model);
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    let mut tape = Tape::new();
    let (elbo, recon, kl) = model
        .step_elbo(&mut tape, 3, &cond_example(), &mut rng)
        .unwrap();
    assert!(kl.abs() < 1e-12, "kl = {kl}");
    assert!((tape.value(elbo).item() - recon).abs() < 1e-12);
}

#[test]
fn elbo_lower_bounds_monte_carlo_likelihood() {
    // Jensen: averaged over instances, the single-sample ELBO sits below
    // the 1000-sample prior Monte-Carlo log-likelihood estimate.
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let mut elbo_sum = 0.0;
    let mut mc_sum = 0.0;
    let instances = 40;
    for i in 0..instances {
        let model = test_model(100 + i);
        let cond = cond_example();
        let count = rng.gen_range(1..=5u32);
        let mut tape = Tape::new();
        let (elbo, _, _) = model.step_elbo(&mut tape, count, &cond, &mut rng).unwrap();
        elbo_sum += tape.value(elbo).item();
        let nll = model
            .step_nll_prior_mc(count, &cond, 1000, &mut rng)
            .unwrap();
        mc_sum += -nll;
    }
    let mean_elbo = elbo_sum / instances as f64;
    let mean_mc = mc_sum / instances as f64;
    assert!(
        mean_elbo <= mean_mc + 0.05,
        "mean ELBO {mean_elbo} above mean MC log-likelihood {mean_mc}"
    );
}

fn single_label_layout() -> crate::layout::Layout {
    let vocab = Vocabulary::mnist();
    let mut boxes = BTreeMap::new();
    boxes.insert(
        2u32,
        vec![
            BBox::new(0.1, 0.4, 0.25, 0.25).unwrap(),
            BBox::new(0.5, 0.4, 0.3, 0.3).unwrap(),
            BBox::new(0.4, 0.45, 0.2, 0.2).unwrap(),
        ],
    );
    crate::layout::Layout::from_boxes(&vocab, boxes, LayoutMeta::default()).unwrap()
}

#[test]
fn single_label_image_loss_is_negative_step_elbo() {
    let model = test_model(31);
    let layout = single_label_layout();
    let order = vec![2u32];

    let mut rng_a = ChaCha20Rng::seed_from_u64(4);
    let mut tape_a = Tape::new();
    let loss = model
        .image_loss(&mut tape_a, &layout, &order, &mut rng_a)
        .unwrap();

    let mut rng_b = ChaCha20Rng::seed_from_u64(4);
    let cond = CountCondition::for_step(4, &order, 0, &layout.counts);
    let mut tape_b = Tape::new();
    let (elbo, _, _) = model.step_elbo(&mut tape_b, 3, &cond, &mut rng_b).unwrap();

    let expected = -tape_b.value(elbo).item();
    assert!((tape_a.value(loss).item() - expected).abs() < 1e-12);
}

#[test]
fn image_loss_is_finite_on_random_init() {
    let model = test_model(37);
    let layout = single_label_layout();
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let mut tape = Tape::new();
    let loss = model
        .image_loss(&mut tape, &layout, &[2], &mut rng)
        .unwrap();
    assert!(tape.value(loss).item().is_finite());
}

#[test]
fn empty_order_is_rejected() {
    let model = test_model(41);
    let layout = single_label_layout();
    let mut rng = ChaCha20Rng::seed_from_u64(6);
    let mut tape = Tape::new();
    assert!(model.image_loss(&mut tape, &layout, &[], &mut rng).is_err());
    assert!(model.generate(&[], &mut rng).is_err());
}

#[test]
fn generation_is_deterministic_and_at_least_one() {
    let model = test_model(43);
    let order = [1u32, 3, 4];
    let mut rng_a = ChaCha20Rng::seed_from_u64(7);
    let counts_a = model.generate(&order, &mut rng_a).unwrap();
    let mut rng_b = ChaCha20Rng::seed_from_u64(7);
    let counts_b = model.generate(&order, &mut rng_b).unwrap();
    assert_eq!(counts_a, counts_b);
    assert_eq!(counts_a.len(), 3);
    assert!(counts_a.values().all(|&n| n >= 1));
}

#[test]
fn ablation_flags_zero_the_right_components() {
    let cond = cond_example();
    let both = AblationFlags::default().apply_count(&cond);
    assert_eq!(both, cond, "full flags are the identity");

    let no_history = AblationFlags {
        use_history: false,
        use_context: true,
    }
    .apply_count(&cond);
    assert!(no_history.prev_counts.iter().all(|&v| v == 0.0));
    assert_eq!(no_history.label_set, cond.label_set);

    let no_context = AblationFlags {
        use_history: true,
        use_context: false,
    }
    .apply_count(&cond);
    assert!(no_context.label_set.iter().all(|&v| v == 0.0));
    assert_eq!(no_context.current_label, cond.current_label);
    assert_eq!(no_context.prev_counts, cond.prev_counts);
}

#[test]
fn prior_mc_with_one_sample_is_single_logpmf() {
    let model = test_model(47);
    let cond = cond_example();
    let count = 2u32;

    let mut rng = ChaCha20Rng::seed_from_u64(8);
    let nll = model.step_nll_prior_mc(count, &cond, 1, &mut rng).unwrap();

    // replay the same draw by hand
    let mut rng = ChaCha20Rng::seed_from_u64(8);
    let mut tape = Tape::new();
    let e = model.embed_condition(&mut tape, &cond).unwrap();
    let (mean, var) = model.prior(&mut tape, e).unwrap();
    let prior = crate::dist::DiagGaussian::new(
        tape.value(mean).data().to_vec(),
        tape.value(var).data().to_vec(),
    )
    .unwrap();
    let z = prior.sample(&mut rng);
    let zn = tape.constant_vec(z);
    let rate = model.decode(&mut tape, zn, e).unwrap();
    let expected = -crate::dist::ShiftedPoisson::new(tape.value(rate).item())
        .unwrap()
        .logpmf(u64::from(count))
        .unwrap();
    assert!((nll - expected).abs() < 1e-12);
}

#[test]
fn prior_mc_is_sample_count_invariant_when_decoder_ignores_latent() {
    let mut model = test_model(53);
    // zero the latent rows of the decoder's first layer
    let slot = model.store().slot("decoder.trunk.l0.w").unwrap();
    let d = model.config().latent_dim;
    let (rows, cols) = model.store().value(slot).dims2().unwrap();
    assert!(rows > d);
    model.store_mut().value_mut(slot).data_mut()[..d * cols]
        .iter_mut()
        .for_each(|v| *v = 0.0);

    let cond = cond_example();
    let mut rng = ChaCha20Rng::seed_from_u64(9);
    let one = model.step_nll_prior_mc(4, &cond, 1, &mut rng).unwrap();
    let many = model.step_nll_prior_mc(4, &cond, 333, &mut rng).unwrap();
    assert!((one - many).abs() < 1e-12);
}

#[test]
fn batched_decode_matches_tape_decode() {
    let model = test_model(59);
    let cond = cond_example();
    let mut tape = Tape::new();
    let e = model.embed_condition(&mut tape, &cond).unwrap();
    let embed = tape.value(e).data().to_vec();

    let mut rng = ChaCha20Rng::seed_from_u64(10);
    let d = model.config().latent_dim;
    let samples = 5;
    let latents: Vec<f64> = (0..samples * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let batched = model.decode_batched(&latents, samples, &embed);

    for s in 0..samples {
        let zn = tape.constant_vec(latents[s * d..(s + 1) * d].to_vec());
        let rate = model.decode(&mut tape, zn, e).unwrap();
        let expected = tape.value(rate).item();
        assert!(
            (batched[s] - expected).abs() < 1e-12,
            "sample {s}: batched {} vs tape {expected}",
            batched[s]
        );
    }
}

#[test]
fn checkpoint_roundtrip_preserves_forward_outputs() {
    let dir = std::env::temp_dir().join("lvae-countvae-test");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("count.lvae");

    let model = test_model(61);
    model.save(&path).unwrap();
    let loaded = CountVae::load(&path).unwrap();
    assert_eq!(loaded.config(), model.config());

    let cond = cond_example();
    let mut ta = Tape::new();
    let ea = model.embed_condition(&mut ta, &cond).unwrap();
    let (ma, va) = model.prior(&mut ta, ea).unwrap();
    let mut tb = Tape::new();
    let eb = loaded.embed_condition(&mut tb, &cond).unwrap();
    let (mb, vb) = loaded.prior(&mut tb, eb).unwrap();
    assert_eq!(ta.value(ma).data(), tb.value(mb).data());
    assert_eq!(ta.value(va).data(), tb.value(vb).data());
}

#[test]
fn checkpoint_kind_and_shape_mismatches_error() {
    let dir = std::env::temp_dir().join("lvae-countvae-test");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("mismatch.lvae");

    let model = test_model(67);
    model.save(&path).unwrap();

    // wrong latent dim in the declared config
    let (store, _meta) = crate::nd::checkpoint::read_checkpoint(&path).unwrap();
    let mut config = *model.config();
    config.latent_dim = 16;
    let err = match CountVae::from_store(config, store) {
        Err(e) => e.to_string(),
        Ok(_) => panic!("latent dim mismatch must fail"),
    };
    assert!(err.contains("shape"), "got: {err}");
}

#[test]
fn log_mean_exp_backs_the_nll_estimator() {
    // spot check the aggregation the estimator relies on
    let vals = [(-3.0f64), -1.0, -2.0];
    let lme = log_mean_exp(&vals).unwrap();
    let direct = ((vals[0].exp() + vals[1].exp() + vals[2].exp()) / 3.0).ln();
    assert!((lme - direct).abs() < 1e-12);
}
