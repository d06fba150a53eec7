//! Full-layout sampling: counts from the count model, then boxes from the
//! box model, both conditioned autoregressively on what came before.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::bboxvae::BBoxVae;
use crate::countvae::CountVae;
use crate::layout::{order_labels, Layout, LayoutMeta, OrderingPolicy, Vocabulary};
use crate::train::derive_seed;
use crate::{Error, Result};

const SAMPLE_SALT: u64 = 31;

/// Draws `n` layouts for one label set. Deterministic in `seed`.
pub fn sample_layouts(
    count_model: &CountVae,
    bbox_model: &BBoxVae,
    vocab: &Vocabulary,
    labels: &[u32],
    n: usize,
    seed: u64,
    mean_boxes: bool,
) -> Result<Vec<Layout>> {
    if labels.is_empty() {
        return Err(Error::Contract(
            "sampling needs a nonempty label set".into(),
        ));
    }
    let mut label_set: Vec<u32> = labels.to_vec();
    label_set.sort_unstable();
    label_set.dedup();
    for &label in &label_set {
        if !vocab.contains(label) {
            return Err(Error::Schema(format!(
                "label {} outside vocabulary {:?} (M = {})",
                label,
                vocab.id,
                vocab.len()
            )));
        }
    }
    if count_model.config().vocab_size != vocab.len()
        || bbox_model.config().vocab_size != vocab.len()
    {
        return Err(Error::Contract(format!(
            "model vocabulary sizes ({}, {}) do not match the vocabulary (M = {})",
            count_model.config().vocab_size,
            bbox_model.config().vocab_size,
            vocab.len()
        )));
    }
    let ordering = count_model.config().ordering;
    if bbox_model.config().ordering != ordering {
        return Err(Error::Contract(format!(
            "count model orders labels {} but box model {}",
            ordering.as_str(),
            bbox_model.config().ordering.as_str()
        )));
    }

    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(&[seed, SAMPLE_SALT, i as u64]));
        let order = match ordering {
            OrderingPolicy::RandomPerImage => {
                order_labels(&label_set, vocab, ordering, Some(&mut rng))?
            }
            _ => order_labels::<ChaCha20Rng>(&label_set, vocab, ordering, None)?,
        };
        let counts = count_model.generate(&order, &mut rng)?;
        let boxes = bbox_model.generate(&order, &counts, mean_boxes, &mut rng)?;
        let meta = LayoutMeta {
            image_id: Some(i as u64),
            width: None,
            height: None,
        };
        out.push(Layout::from_boxes(vocab, boxes, meta)?);
    }
    Ok(out)
}
