//! Canonical layout document: the JSON contract between dataset files,
//! training, evaluation, and the command line.
//!
//! One document per layout:
//!
//! ```json
//! {"vocab_id": "mnist-layouts",
//!  "labels": [1, 3],
//!  "counts": {"1": 3, "3": 2},
//!  "boxes": {"1": [[x, y, w, h], ...], "3": [...]},
//!  "meta": {}}
//! ```
//!
//! Datasets are newline-delimited streams of documents.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{BBox, Layout, LayoutMeta, Vocabulary};
use crate::{Error, Result};

/// Serialized form of [`Layout`]. JSON object keys are strings, so count
/// and box maps are keyed by the decimal label id.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayoutDoc {
    pub vocab_id: String,
    pub labels: Vec<u32>,
    pub counts: BTreeMap<String, u32>,
    pub boxes: BTreeMap<String, Vec<[f64; 4]>>,
    #[serde(default)]
    pub meta: LayoutMeta,
}

impl LayoutDoc {
    pub fn from_layout(layout: &Layout) -> Self {
        Self {
            vocab_id: layout.vocab_id.clone(),
            labels: layout.labels.clone(),
            counts: layout
                .counts
                .iter()
                .map(|(k, v)| (k.to_string(), *v))
                .collect(),
            boxes: layout
                .boxes
                .iter()
                .map(|(k, list)| (k.to_string(), list.iter().map(BBox::as_array).collect()))
                .collect(),
            meta: layout.meta.clone(),
        }
    }

    /// Validates against `vocab` and converts to the in-memory form.
    pub fn into_layout(self, vocab: &Vocabulary) -> Result<Layout> {
        let mut counts = BTreeMap::new();
        for (k, v) in self.counts {
            let label: u32 = k
                .parse()
                .map_err(|_| Error::Schema(format!("counts key {k:?} is not a label id")))?;
            counts.insert(label, v);
        }
        let mut boxes = BTreeMap::new();
        for (k, list) in self.boxes {
            let label: u32 = k
                .parse()
                .map_err(|_| Error::Schema(format!("boxes key {k:?} is not a label id")))?;
            let parsed: Result<Vec<BBox>> = list
                .into_iter()
                .map(|[x, y, w, h]| BBox::new(x, y, w, h))
                .collect();
            boxes.insert(label, parsed?);
        }
        let layout = Layout {
            vocab_id: self.vocab_id,
            labels: self.labels,
            counts,
            boxes,
            meta: self.meta,
        };
        layout.validate(vocab)?;
        Ok(layout)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("document serialization cannot fail")
    }

    pub fn parse_json(line: &str) -> Result<Self> {
        serde_json::from_str(line).map_err(|e| Error::Schema(format!("bad layout document: {e}")))
    }
}
