//! The layout data model: vocabularies, label sets, normalized bounding
//! boxes, ordering policies, and the canonical layout document.

mod doc;

pub use doc::LayoutDoc;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Countable object vs amorphous region, the split that drives the fixed
/// label orderings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CategoryKind {
    Thing,
    Stuff,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Category {
    /// Dense id in 1..=M.
    pub id: u32,
    pub name: String,
    pub kind: CategoryKind,
    /// Id in the source annotation scheme, when ingested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_id: Option<u32>,
}

/// The closed set of categories a model is trained over.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocabulary {
    pub id: String,
    categories: Vec<Category>,
}

impl Vocabulary {
    /// Ids must be dense 1..=M in order.
    pub fn new(id: &str, categories: Vec<Category>) -> Result<Self> {
        if categories.is_empty() {
            return Err(Error::Schema(
                "vocabulary needs at least one category".into(),
            ));
        }
        for (i, c) in categories.iter().enumerate() {
            if c.id != i as u32 + 1 {
                return Err(Error::Schema(format!(
                    "vocabulary ids must be dense 1..=M; found {} at position {}",
                    c.id, i
                )));
            }
        }
        Ok(Self {
            id: id.to_string(),
            categories,
        })
    }

    /// The four-digit vocabulary used by the synthetic dataset.
    pub fn mnist() -> Self {
        let categories = (1..=4)
            .map(|id| Category {
                id,
                name: format!("digit-{id}"),
                kind: CategoryKind::Thing,
                source_id: None,
            })
            .collect();
        Self::new("mnist-layouts", categories).expect("static vocabulary is valid")
    }

    /// Number of categories M.
    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn categories(&self) -> &[Category] {
        &self.categories
    }

    pub fn category(&self, id: u32) -> Result<&Category> {
        self.categories
            .get(
                id.checked_sub(1).ok_or_else(|| {
                    Error::Schema("category id 0 is outside the vocabulary".into())
                })? as usize,
            )
            .ok_or_else(|| {
                Error::Schema(format!(
                    "category id {} outside vocabulary {:?} (M = {})",
                    id,
                    self.id,
                    self.len()
                ))
            })
    }

    pub fn contains(&self, id: u32) -> bool {
        id >= 1 && id as usize <= self.len()
    }

    /// Dense id for a source-scheme id, if ingested from one.
    pub fn dense_id_for_source(&self, source_id: u32) -> Option<u32> {
        self.categories
            .iter()
            .find(|c| c.source_id == Some(source_id))
            .map(|c| c.id)
    }
}

/// Normalized bounding box: top-left corner plus width and height, all in
/// [0, 1] relative to the image side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

/// Clamp epsilon for sampled boxes; keeps width/height strictly positive.
pub const BOX_EPS: f64 = 1e-4;

/// Tolerance on the far edge, so x + w <= 1 + BOUNDS_TOL holds after
/// normalization rounding.
pub const BOUNDS_TOL: f64 = 1e-6;

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { x, y, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let Self { x, y, w, h } = *self;
        if !(x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(Error::Schema("box coordinates must be finite".into()));
        }
        if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
            return Err(Error::Schema(format!(
                "box corner ({x}, {y}) outside the unit square"
            )));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::Schema(format!(
                "box width/height must be positive, got ({w}, {h})"
            )));
        }
        if w > 1.0 || h > 1.0 {
            return Err(Error::Schema(format!(
                "box width/height must be <= 1, got ({w}, {h})"
            )));
        }
        if x + w > 1.0 + BOUNDS_TOL || y + h > 1.0 + BOUNDS_TOL {
            return Err(Error::Schema(format!(
                "box ({x}, {y}, {w}, {h}) extends past the unit square"
            )));
        }
        Ok(())
    }

    /// Clamps arbitrary real coordinates into a valid normalized box.
    /// Sampling distributions have unbounded support; layouts do not.
    pub fn clip_from_unchecked(x: f64, y: f64, w: f64, h: f64) -> Self {
        let cx = x.clamp(0.0, 1.0 - BOX_EPS);
        let cy = y.clamp(0.0, 1.0 - BOX_EPS);
        // 1 - cx can land a hair under BOX_EPS in floating point.
        let max_w = 1.0 - cx;
        let max_h = 1.0 - cy;
        let cw = w.min(max_w).max(BOX_EPS.min(max_w));
        let ch = h.min(max_h).max(BOX_EPS.min(max_h));
        Self {
            x: cx,
            y: cy,
            w: cw,
            h: ch,
        }
    }

    /// Mirror across the horizontal midline: (x, 1 - y - h, w, h).
    pub fn flip_vertical(&self) -> Self {
        Self {
            x: self.x,
            y: (1.0 - self.y - self.h).max(0.0),
            w: self.w,
            h: self.h,
        }
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x + a.w).min(b.x + b.w) - a.x.max(b.x);
    let iy = (a.y + a.h).min(b.y + b.h) - a.y.max(b.y);
    if ix <= 0.0 || iy <= 0.0 {
        return 0.0;
    }
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    inter / union
}

/// Total order for autoregression: ascending x, ties by y, then w, then h.
pub fn box_cmp(a: &BBox, b: &BBox) -> std::cmp::Ordering {
    a.x.total_cmp(&b.x)
        .then(a.y.total_cmp(&b.y))
        .then(a.w.total_cmp(&b.w))
        .then(a.h.total_cmp(&b.h))
}

/// Stable left-to-right sort of a box list.
pub fn order_boxes(boxes: &mut [BBox]) {
    boxes.sort_by(box_cmp);
}

/// Label ordering across autoregressive steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderingPolicy {
    /// Things before stuffs, ascending id within each group.
    ThingsFirst,
    /// Stuffs before things, ascending id within each group.
    StuffsFirst,
    /// A fresh uniform permutation per image.
    RandomPerImage,
}

impl OrderingPolicy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "things_first" => Ok(Self::ThingsFirst),
            "stuffs_first" => Ok(Self::StuffsFirst),
            "random_per_image" | "random" => Ok(Self::RandomPerImage),
            other => Err(Error::Schema(format!(
                "unknown ordering policy {other:?} (expected things_first, stuffs_first or random_per_image)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::ThingsFirst => "things_first",
            Self::StuffsFirst => "stuffs_first",
            Self::RandomPerImage => "random_per_image",
        }
    }
}

/// Permutation of `labels` under `policy`. The fixed policies are
/// deterministic total orders; the random policy needs an rng.
pub fn order_labels<R: Rng>(
    labels: &[u32],
    vocab: &Vocabulary,
    policy: OrderingPolicy,
    rng: Option<&mut R>,
) -> Result<Vec<u32>> {
    let mut out = labels.to_vec();
    match policy {
        OrderingPolicy::ThingsFirst | OrderingPolicy::StuffsFirst => {
            let stuff_rank = |id: u32| -> Result<u32> {
                let is_stuff = vocab.category(id)?.kind == CategoryKind::Stuff;
                Ok(u32::from(match policy {
                    OrderingPolicy::ThingsFirst => is_stuff,
                    _ => !is_stuff,
                }))
            };
            for &id in &out {
                stuff_rank(id)?;
            }
            out.sort_by_key(|&id| (stuff_rank(id).expect("checked above"), id));
        }
        OrderingPolicy::RandomPerImage => {
            let rng = rng
                .ok_or_else(|| Error::Contract("random_per_image ordering needs an rng".into()))?;
            out.shuffle(rng);
        }
    }
    Ok(out)
}

/// Free-form provenance carried through layout streams.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LayoutMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<u64>,
    /// Original pixel dimensions, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<u32>,
}

/// A scene layout: which labels are present, how many instances of each,
/// and where each instance sits. The unit of training, sampling, and
/// scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub vocab_id: String,
    /// Sorted ascending; nonempty.
    pub labels: Vec<u32>,
    pub counts: BTreeMap<u32, u32>,
    /// Per-label boxes, each list sorted left-to-right.
    pub boxes: BTreeMap<u32, Vec<BBox>>,
    pub meta: LayoutMeta,
}

impl Layout {
    /// Builds a layout from per-label box lists; counts are derived and
    /// boxes are sorted left-to-right.
    pub fn from_boxes(
        vocab: &Vocabulary,
        mut boxes: BTreeMap<u32, Vec<BBox>>,
        meta: LayoutMeta,
    ) -> Result<Self> {
        boxes.retain(|_, list| !list.is_empty());
        if boxes.is_empty() {
            return Err(Error::Schema(
                "layout needs at least one labeled box".into(),
            ));
        }
        for list in boxes.values_mut() {
            order_boxes(list);
        }
        let labels: Vec<u32> = boxes.keys().copied().collect();
        let counts = boxes
            .iter()
            .map(|(label, list)| (*label, list.len() as u32))
            .collect();
        let layout = Self {
            vocab_id: vocab.id.clone(),
            labels,
            counts,
            boxes,
            meta,
        };
        layout.validate(vocab)?;
        Ok(layout)
    }

    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        if self.vocab_id != vocab.id {
            return Err(Error::Schema(format!(
                "layout vocabulary {:?} does not match {:?}",
                self.vocab_id, vocab.id
            )));
        }
        if self.labels.is_empty() {
            return Err(Error::Schema("label set is empty".into()));
        }
        if self.labels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Schema(
                "label set must be sorted and duplicate-free".into(),
            ));
        }
        for &label in &self.labels {
            if !vocab.contains(label) {
                return Err(Error::Schema(format!(
                    "label {} outside vocabulary {:?}",
                    label, vocab.id
                )));
            }
        }
        let keys: Vec<u32> = self.counts.keys().copied().collect();
        if keys != self.labels {
            return Err(Error::Schema(
                "counts keys differ from the label set".into(),
            ));
        }
        let keys: Vec<u32> = self.boxes.keys().copied().collect();
        if keys != self.labels {
            return Err(Error::Schema("boxes keys differ from the label set".into()));
        }
        for (&label, &count) in &self.counts {
            if count < 1 {
                return Err(Error::Schema(format!(
                    "count for label {label} must be >= 1"
                )));
            }
            let list = &self.boxes[&label];
            if list.len() != count as usize {
                return Err(Error::Schema(format!(
                    "label {} has {} boxes but count {}",
                    label,
                    list.len(),
                    count
                )));
            }
            for b in list {
                b.validate()?;
            }
            if list
                .windows(2)
                .any(|w| box_cmp(&w[0], &w[1]) == std::cmp::Ordering::Greater)
            {
                return Err(Error::Schema(format!(
                    "boxes for label {label} are not in left-to-right order"
                )));
            }
        }
        Ok(())
    }

    /// Total number of boxes across labels.
    pub fn total_boxes(&self) -> usize {
        self.boxes.values().map(Vec::len).sum()
    }

    /// The layout mirrored upside down. Widths, heights, x-coordinates,
    /// counts and labels are preserved.
    pub fn flip_vertical(&self) -> Self {
        let mut out = self.clone();
        for list in out.boxes.values_mut() {
            for b in list.iter_mut() {
                *b = b.flip_vertical();
            }
            order_boxes(list);
        }
        out
    }
}
