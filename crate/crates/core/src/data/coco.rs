//! COCO panoptic annotation ingestion.
//!
//! Reads the official panoptic annotation schema — `images[]` and
//! `annotations[]`, where each annotation carries `segments_info[]` with
//! `category_id`, a pixel-space `bbox` `[x, y, w, h]`, and `iscrowd` —
//! plus the panoptic categories file (`id`, `name`, `isthing`). Crowd
//! segments are dropped, boxes are normalized by image width/height, and
//! source category ids are remapped onto a dense vocabulary.

use std::collections::BTreeMap;

use serde::Deserialize;

use crate::layout::{BBox, Category, CategoryKind, Layout, LayoutMeta, Vocabulary};
use crate::{Error, Result};

#[derive(Debug, Deserialize)]
struct PanopticFile {
    images: Vec<PanopticImage>,
    annotations: Vec<PanopticAnnotation>,
}

#[derive(Debug, Deserialize)]
struct PanopticImage {
    id: u64,
    width: u32,
    height: u32,
}

#[derive(Debug, Deserialize)]
struct PanopticAnnotation {
    image_id: u64,
    segments_info: Vec<SegmentInfo>,
}

#[derive(Debug, Deserialize)]
struct SegmentInfo {
    category_id: u32,
    bbox: [f64; 4],
    #[serde(default)]
    iscrowd: u8,
}

#[derive(Debug, Deserialize)]
struct CocoCategory {
    id: u32,
    name: String,
    #[serde(default)]
    isthing: u8,
}

/// Builds a dense vocabulary from a panoptic categories JSON array,
/// ordered by ascending source id.
pub fn vocabulary_from_categories(text: &str) -> Result<Vocabulary> {
    let mut cats: Vec<CocoCategory> =
        serde_json::from_str(text).map_err(|e| parse_error(text, &e))?;
    if cats.is_empty() {
        return Err(Error::Schema("categories file holds no categories".into()));
    }
    cats.sort_by_key(|c| c.id);
    let categories = cats
        .into_iter()
        .enumerate()
        .map(|(i, c)| Category {
            id: i as u32 + 1,
            name: c.name,
            kind: if c.isthing != 0 {
                CategoryKind::Thing
            } else {
                CategoryKind::Stuff
            },
            source_id: Some(c.id),
        })
        .collect();
    Vocabulary::new("coco-panoptic", categories)
}

/// Converts one panoptic annotation file into layouts, in the file's
/// image order. Images whose segments are all crowd-tagged are skipped.
pub fn ingest_panoptic(text: &str, vocab: &Vocabulary) -> Result<Vec<Layout>> {
    let file: PanopticFile = serde_json::from_str(text).map_err(|e| parse_error(text, &e))?;

    let mut dims: BTreeMap<u64, (u32, u32, usize)> = BTreeMap::new();
    for (pos, img) in file.images.iter().enumerate() {
        dims.insert(img.id, (img.width, img.height, pos));
    }

    // emit in the image order of the file
    let mut annotations: Vec<&PanopticAnnotation> = file.annotations.iter().collect();
    annotations.sort_by_key(|a| {
        dims.get(&a.image_id)
            .map(|&(_, _, pos)| pos)
            .unwrap_or(usize::MAX)
    });

    let mut out = Vec::new();
    for ann in annotations {
        let Some(&(width, height, _)) = dims.get(&ann.image_id) else {
            return Err(Error::Schema(format!(
                "annotation references unknown image id {}",
                ann.image_id
            )));
        };
        if width == 0 || height == 0 {
            return Err(Error::Schema(format!(
                "image {} has zero dimensions",
                ann.image_id
            )));
        }
        let mut boxes: BTreeMap<u32, Vec<BBox>> = BTreeMap::new();
        for seg in &ann.segments_info {
            if seg.iscrowd != 0 {
                continue;
            }
            let label = vocab.dense_id_for_source(seg.category_id).ok_or_else(|| {
                Error::Schema(format!(
                    "unknown category id {} (image {})",
                    seg.category_id, ann.image_id
                ))
            })?;
            let [px, py, pw, ph] = seg.bbox;
            if pw <= 0.0 || ph <= 0.0 {
                continue;
            }
            let b = BBox::clip_from_unchecked(
                px / f64::from(width),
                py / f64::from(height),
                pw / f64::from(width),
                ph / f64::from(height),
            );
            boxes.entry(label).or_default().push(b);
        }
        if boxes.is_empty() {
            continue;
        }
        let meta = LayoutMeta {
            image_id: Some(ann.image_id),
            width: Some(width),
            height: Some(height),
        };
        out.push(Layout::from_boxes(vocab, boxes, meta)?);
    }
    Ok(out)
}

/// Splits ingested layouts into (head, tail) with the last `val_tail`
/// images as the validation split.
pub fn split_val_tail(mut layouts: Vec<Layout>, val_tail: usize) -> (Vec<Layout>, Vec<Layout>) {
    if val_tail == 0 || val_tail >= layouts.len() {
        return (layouts, Vec::new());
    }
    let tail = layouts.split_off(layouts.len() - val_tail);
    (layouts, tail)
}

/// Serde errors carry line/column; callers also want the byte offset.
fn parse_error(text: &str, e: &serde_json::Error) -> Error {
    let (line, column) = (e.line(), e.column());
    let offset: usize = text
        .lines()
        .take(line.saturating_sub(1))
        .map(|l| l.len() + 1)
        .sum::<usize>()
        + column.saturating_sub(1);
    Error::Parse(format!(
        "malformed annotation JSON at line {line}, column {column} (byte offset {offset}): {e}"
    ))
}
