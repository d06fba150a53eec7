//! Browser demo for the layout models: generate rule-based layouts,
//! train both conditional VAEs live in the page, sample layouts for a
//! chosen label set, and compare likelihoods of original versus flipped
//! layouts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use wasm_bindgen::prelude::*;

use layoutvae::bboxvae::{BBoxVae, BBoxVaeConfig};
use layoutvae::countvae::{CountVae, CountVaeConfig};
use layoutvae::data::mnist::{self, MnistRuleConfig};
use layoutvae::eval;
use layoutvae::layout::{Layout, LayoutDoc, Vocabulary};
use layoutvae::nd::{NodeId, Tape};
use layoutvae::render::layout_to_svg;
use layoutvae::sampling::sample_layouts;
use layoutvae::train::{resolve_order, SplitId};

#[wasm_bindgen(start)]
pub fn init() {
    console_error_panic_hook::set_once();
}

fn err_to_js(e: layoutvae::Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

/// Ground-truth layouts straight from the generator rules, as JSON:
/// `[{ "svg": ..., "doc": ... }, ...]`.
#[wasm_bindgen]
pub fn dataset_samples(seed: u32, count: u32) -> Result<String, JsValue> {
    let config = MnistRuleConfig::default();
    let vocab = Vocabulary::mnist();
    let layouts = mnist::generate_split(&config, u64::from(seed), 0, count as usize);
    let mut out = Vec::with_capacity(layouts.len());
    for layout in &layouts {
        let svg = layout_to_svg(layout, &vocab, 220).map_err(err_to_js)?;
        out.push(serde_json::json!({
            "svg": svg,
            "doc": LayoutDoc::from_layout(layout),
        }));
    }
    Ok(serde_json::Value::Array(out).to_string())
}

/// One live training session: a generated dataset plus both models and
/// their optimizer state. Training advances in small batches so the page
/// can report progress between calls.
#[wasm_bindgen]
pub struct DemoSession {
    vocab: Vocabulary,
    train_data: Vec<Layout>,
    test_data: Vec<Layout>,
    count_model: CountVae,
    bbox_model: BBoxVae,
    count_steps: u64,
    bbox_steps: u64,
    cursor: usize,
    order_rng: ChaCha20Rng,
    indices: Vec<usize>,
}

const DEMO_BATCH: usize = 16;

#[wasm_bindgen]
impl DemoSession {
    /// Builds a session with `train_images` generated layouts and fresh
    /// models. Smaller hidden sizes keep in-browser training responsive.
    #[wasm_bindgen(constructor)]
    pub fn new(
        seed: u32,
        train_images: u32,
        hidden: u32,
        latent: u32,
    ) -> Result<DemoSession, JsValue> {
        let config = MnistRuleConfig {
            train: train_images as usize,
            val: 0,
            test: 64,
            ..Default::default()
        };
        let train_data = mnist::generate_split(&config, u64::from(seed), 0, config.train);
        let test_data = mnist::generate_split(&config, u64::from(seed), 2, config.test);
        let vocab = Vocabulary::mnist();

        let mut init_rng = ChaCha20Rng::seed_from_u64(u64::from(seed) ^ 0xD3A0);
        let mut count_config = CountVaeConfig::new(vocab.len());
        count_config.hidden = hidden as usize;
        count_config.latent_dim = latent as usize;
        let count_model = CountVae::new(count_config, &mut init_rng);

        let mut bbox_config = BBoxVaeConfig::new(vocab.len());
        bbox_config.hidden = hidden as usize;
        bbox_config.latent_dim = latent as usize;
        let bbox_model = BBoxVae::new(bbox_config, &mut init_rng);

        let indices: Vec<usize> = (0..train_data.len()).collect();
        Ok(DemoSession {
            vocab,
            train_data,
            test_data,
            count_model,
            bbox_model,
            count_steps: 0,
            bbox_steps: 0,
            cursor: 0,
            order_rng: ChaCha20Rng::seed_from_u64(u64::from(seed) ^ 0x5EED),
            indices,
        })
    }

    /// Runs `steps` optimizer steps on each model and returns the running
    /// batch losses as JSON.
    pub fn train_steps(&mut self, steps: u32, lr: f64) -> Result<String, JsValue> {
        let mut count_loss = f64::NAN;
        let mut bbox_loss = f64::NAN;
        for _ in 0..steps {
            let batch = self.next_batch();
            count_loss = self.step_count(&batch, lr).map_err(err_to_js)?;
            bbox_loss = self.step_bbox(&batch, lr).map_err(err_to_js)?;
        }
        Ok(serde_json::json!({
            "count_loss": count_loss,
            "bbox_loss": bbox_loss,
            "count_steps": self.count_steps,
            "bbox_steps": self.bbox_steps,
        })
        .to_string())
    }

    /// Samples one full layout for a comma-separated label set.
    pub fn sample(&self, labels: &str, seed: u32) -> Result<String, JsValue> {
        let parsed: Result<Vec<u32>, _> =
            labels.split(',').map(|s| s.trim().parse::<u32>()).collect();
        let parsed = parsed.map_err(|_| JsValue::from_str("labels: expected ids like 1,3"))?;
        let layouts = sample_layouts(
            &self.count_model,
            &self.bbox_model,
            &self.vocab,
            &parsed,
            1,
            u64::from(seed),
            false,
        )
        .map_err(err_to_js)?;
        let svg = layout_to_svg(&layouts[0], &self.vocab, 300).map_err(err_to_js)?;
        Ok(serde_json::json!({
            "svg": svg,
            "doc": LayoutDoc::from_layout(&layouts[0]),
        })
        .to_string())
    }

    /// Scores a held-out layout and its upside-down flip by importance
    /// sampling; anomalous (flipped) layouts should score a higher NLL
    /// once the box model has learned the vertical structure.
    pub fn score_flip(&self, index: u32, samples: u32) -> Result<String, JsValue> {
        let layout = &self.test_data[index as usize % self.test_data.len()];
        let report = eval::flip_experiment(
            &self.bbox_model,
            &self.vocab,
            std::slice::from_ref(layout),
            samples as usize,
            u64::from(index),
        )
        .map_err(err_to_js)?;
        let flipped = layout.flip_vertical();
        Ok(serde_json::json!({
            "svg_original": layout_to_svg(layout, &self.vocab, 220).map_err(err_to_js)?,
            "svg_flipped": layout_to_svg(&flipped, &self.vocab, 220).map_err(err_to_js)?,
            "nll_original": report.pairs[0].0,
            "nll_flipped": report.pairs[0].1,
        })
        .to_string())
    }

    fn next_batch(&mut self) -> Vec<usize> {
        let mut batch = Vec::with_capacity(DEMO_BATCH);
        for _ in 0..DEMO_BATCH {
            if self.cursor == 0 {
                // reshuffle each pass
                for i in (1..self.indices.len()).rev() {
                    let j = self.order_rng.gen_range(0..=i);
                    self.indices.swap(i, j);
                }
            }
            batch.push(self.indices[self.cursor]);
            self.cursor = (self.cursor + 1) % self.indices.len();
        }
        batch
    }

    fn step_count(&mut self, batch: &[usize], lr: f64) -> layoutvae::Result<f64> {
        let mut tape = Tape::new();
        let mut total: Option<NodeId> = None;
        let mut noise = ChaCha20Rng::seed_from_u64(self.count_steps ^ 0xC0);
        for &idx in batch {
            let layout = &self.train_data[idx];
            let order = resolve_order(
                &self.vocab,
                self.count_model.config().ordering,
                &layout.labels,
                SplitId::Train,
                idx,
            )?;
            let loss = self
                .count_model
                .image_loss(&mut tape, layout, &order, &mut noise)?;
            total = Some(match total {
                Some(t) => tape.add(t, loss)?,
                None => loss,
            });
        }
        let total = total.expect("demo batches are nonempty");
        let scaled = tape.scale_shift(total, 1.0 / batch.len() as f64, 0.0);
        let value = tape.value(scaled).item();
        let grads = tape.backward(scaled)?;
        let store = self.count_model.store_mut();
        store.accumulate(&grads);
        self.count_steps += 1;
        store.adam_step(lr, 0.9, 0.999, 1e-8, self.count_steps)?;
        Ok(value)
    }

    fn step_bbox(&mut self, batch: &[usize], lr: f64) -> layoutvae::Result<f64> {
        let mut tape = Tape::new();
        let mut total: Option<NodeId> = None;
        let mut noise = ChaCha20Rng::seed_from_u64(self.bbox_steps ^ 0xB0);
        for &idx in batch {
            let layout = &self.train_data[idx];
            let order = resolve_order(
                &self.vocab,
                self.bbox_model.config().ordering,
                &layout.labels,
                SplitId::Train,
                idx,
            )?;
            let loss = self
                .bbox_model
                .image_loss(&mut tape, layout, &order, &mut noise)?;
            total = Some(match total {
                Some(t) => tape.add(t, loss)?,
                None => loss,
            });
        }
        let total = total.expect("demo batches are nonempty");
        let scaled = tape.scale_shift(total, 1.0 / batch.len() as f64, 0.0);
        let value = tape.value(scaled).item();
        let grads = tape.backward(scaled)?;
        let store = self.bbox_model.store_mut();
        store.accumulate(&grads);
        self.bbox_steps += 1;
        store.adam_step(lr, 0.9, 0.999, 1e-8, self.bbox_steps)?;
        Ok(value)
    }
}
