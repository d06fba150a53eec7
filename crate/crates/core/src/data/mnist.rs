//! Rule-based synthetic layout generator over the four-digit vocabulary.
//!
//! Per image: a nonempty label subset is drawn uniformly, counts follow
//! per-label ranges (label 4's range depends on label 2's count when both
//! are present), and each instance is placed as a square box by its
//! label's location rule. All coordinates are normalized; the canvas size
//! is metadata only.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::layout::{BBox, Layout, LayoutMeta, Vocabulary, BOUNDS_TOL};
use crate::train::derive_seed;
use crate::{Error, Result};

/// Inclusive real interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Range(pub f64, pub f64);

impl Range {
    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.0 == self.1 {
            self.0
        } else {
            rng.gen_range(self.0..=self.1)
        }
    }
}

/// Generation rules: count ranges per label, vertical bands, square side
/// ranges, the bottom-right region, and the placement radius around a
/// label-2 instance.
#[derive(Debug, Clone, PartialEq)]
pub struct MnistRuleConfig {
    /// Pixel canvas recorded in layout metadata (boxes stay normalized).
    pub canvas: u32,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub band_top: Range,
    pub band_middle: Range,
    pub band_bottom: Range,
    pub size_small: Range,
    pub size_small_medium: Range,
    pub size_medium: Range,
    pub size_large: Range,
    /// Center range (both axes) for label 4 when label 2 is absent.
    pub bottom_right: Range,
    /// Distance from the chosen label-2 center for label 4 placements.
    pub around_radius: Range,
    pub count_1: (u32, u32),
    pub count_2: (u32, u32),
    pub count_3: (u32, u32),
    /// With label 2 present: count(4) uniform on [count(2) + offset, cap],
    /// or exactly `cap` when that interval is empty.
    pub count_4_offset: u32,
    pub count_4_cap: u32,
    /// Without label 2.
    pub count_4_alone: u32,
}

impl Default for MnistRuleConfig {
    fn default() -> Self {
        Self {
            canvas: 128,
            train: 5000,
            val: 1000,
            test: 1000,
            band_top: Range(0.05, 0.30),
            band_middle: Range(0.35, 0.65),
            band_bottom: Range(0.70, 0.95),
            size_small: Range(0.06, 0.12),
            size_small_medium: Range(0.08, 0.18),
            size_medium: Range(0.12, 0.22),
            size_large: Range(0.22, 0.38),
            bottom_right: Range(0.65, 0.95),
            around_radius: Range(0.12, 0.25),
            count_1: (3, 4),
            count_2: (2, 3),
            count_3: (1, 2),
            count_4_offset: 3,
            count_4_cap: 6,
            count_4_alone: 2,
        }
    }
}

impl MnistRuleConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("band.top", self.band_top),
            ("band.middle", self.band_middle),
            ("band.bottom", self.band_bottom),
            ("size.small", self.size_small),
            ("size.small_medium", self.size_small_medium),
            ("size.medium", self.size_medium),
            ("size.large", self.size_large),
            ("bottom_right", self.bottom_right),
            ("around_radius", self.around_radius),
        ] {
            if r.0 > r.1 {
                return Err(Error::Schema(format!("{name}: empty range {:?}", r)));
            }
            if name.starts_with("band") && !(0.0..=1.0).contains(&r.0) {
                return Err(Error::Schema(format!("{name}: band outside [0,1]")));
            }
        }
        for (name, (lo, hi)) in [
            ("label.1.count", self.count_1),
            ("label.2.count", self.count_2),
            ("label.3.count", self.count_3),
        ] {
            if lo < 1 || lo > hi {
                return Err(Error::Schema(format!("{name}: bad range {lo}..{hi}")));
            }
        }
        if self.count_4_alone < 1 || self.count_4_cap < 1 {
            return Err(Error::Schema("label 4 counts must be >= 1".into()));
        }
        Ok(())
    }

    /// Canonical key=value rendering; its hash identifies the config.
    pub fn canonical_text(&self) -> String {
        let r = |x: Range| format!("{}..{}", x.0, x.1);
        format!(
            "canvas = {}\ntrain = {}\nval = {}\ntest = {}\n\
             band.top = {}\nband.middle = {}\nband.bottom = {}\n\
             size.small = {}\nsize.small_medium = {}\nsize.medium = {}\nsize.large = {}\n\
             bottom_right = {}\naround_radius = {}\n\
             label.1.count = {}..{}\nlabel.2.count = {}..{}\nlabel.3.count = {}..{}\n\
             label.4.offset = {}\nlabel.4.cap = {}\nlabel.4.alone = {}\n",
            self.canvas,
            self.train,
            self.val,
            self.test,
            r(self.band_top),
            r(self.band_middle),
            r(self.band_bottom),
            r(self.size_small),
            r(self.size_small_medium),
            r(self.size_medium),
            r(self.size_large),
            r(self.bottom_right),
            r(self.around_radius),
            self.count_1.0,
            self.count_1.1,
            self.count_2.0,
            self.count_2.1,
            self.count_3.0,
            self.count_3.1,
            self.count_4_offset,
            self.count_4_cap,
            self.count_4_alone,
        )
    }

    /// Parses the key=value rules format (the canonical rendering reads
    /// back to the same config). Unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Parse(format!("rules line {}: expected key = value", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            let bad = |what: &str| {
                Error::Parse(format!(
                    "rules line {}: bad {what} value {value:?}",
                    lineno + 1
                ))
            };
            let parse_range = |v: &str| -> Result<Range> {
                let (lo, hi) = v.split_once("..").ok_or_else(|| bad("range"))?;
                Ok(Range(
                    lo.trim().parse().map_err(|_| bad("range"))?,
                    hi.trim().parse().map_err(|_| bad("range"))?,
                ))
            };
            let parse_counts = |v: &str| -> Result<(u32, u32)> {
                let (lo, hi) = v.split_once("..").ok_or_else(|| bad("count range"))?;
                Ok((
                    lo.trim().parse().map_err(|_| bad("count range"))?,
                    hi.trim().parse().map_err(|_| bad("count range"))?,
                ))
            };
            match key {
                "canvas" => config.canvas = value.parse().map_err(|_| bad("canvas"))?,
                "train" => config.train = value.parse().map_err(|_| bad("train"))?,
                "val" => config.val = value.parse().map_err(|_| bad("val"))?,
                "test" => config.test = value.parse().map_err(|_| bad("test"))?,
                "band.top" => config.band_top = parse_range(value)?,
                "band.middle" => config.band_middle = parse_range(value)?,
                "band.bottom" => config.band_bottom = parse_range(value)?,
                "size.small" => config.size_small = parse_range(value)?,
                "size.small_medium" => config.size_small_medium = parse_range(value)?,
                "size.medium" => config.size_medium = parse_range(value)?,
                "size.large" => config.size_large = parse_range(value)?,
                "bottom_right" => config.bottom_right = parse_range(value)?,
                "around_radius" => config.around_radius = parse_range(value)?,
                "label.1.count" => config.count_1 = parse_counts(value)?,
                "label.2.count" => config.count_2 = parse_counts(value)?,
                "label.3.count" => config.count_3 = parse_counts(value)?,
                "label.4.offset" => {
                    config.count_4_offset = value.parse().map_err(|_| bad("offset"))?
                }
                "label.4.cap" => config.count_4_cap = value.parse().map_err(|_| bad("cap"))?,
                "label.4.alone" => {
                    config.count_4_alone = value.parse().map_err(|_| bad("alone"))?
                }
                other => {
                    return Err(Error::Parse(format!(
                        "rules line {}: unknown key {other:?}",
                        lineno + 1
                    )))
                }
            }
        }
        config.validate()?;
        Ok(config)
    }
}

const SPLIT_SALT: u64 = 11;
const IMAGE_SALT: u64 = 12;
const MAX_PLACEMENT_ATTEMPTS: usize = 100;
const MAX_IMAGE_RESAMPLES: usize = 10_000;

/// Generates one split deterministically from (config, seed).
pub fn generate_split(
    config: &MnistRuleConfig,
    seed: u64,
    split_index: u64,
    size: usize,
) -> Vec<Layout> {
    try_generate_split(config, seed, split_index, size)
        .expect("default rules always admit a placement")
}

/// As [`generate_split`], surfacing unsatisfiable rule files as errors.
pub fn try_generate_split(
    config: &MnistRuleConfig,
    seed: u64,
    split_index: u64,
    size: usize,
) -> Result<Vec<Layout>> {
    let vocab = Vocabulary::mnist();
    (0..size)
        .map(|i| {
            let image_seed = derive_seed(&[seed, SPLIT_SALT, split_index, IMAGE_SALT, i as u64]);
            let mut rng = ChaCha20Rng::seed_from_u64(image_seed);
            generate_image(config, &vocab, &mut rng, i as u64)
        })
        .collect()
}

/// All three splits: train, val, test.
pub fn generate_all(
    config: &MnistRuleConfig,
    seed: u64,
) -> (Vec<Layout>, Vec<Layout>, Vec<Layout>) {
    (
        generate_split(config, seed, 0, config.train),
        generate_split(config, seed, 1, config.val),
        generate_split(config, seed, 2, config.test),
    )
}

fn generate_image<R: Rng>(
    config: &MnistRuleConfig,
    vocab: &Vocabulary,
    rng: &mut R,
    image_id: u64,
) -> Result<Layout> {
    // rejected placements resample the whole image from the same stream,
    // so the result stays a pure function of the image seed
    for _ in 0..MAX_IMAGE_RESAMPLES {
        if let Some(layout) = try_generate_image(config, vocab, rng, image_id) {
            return Ok(layout);
        }
    }
    Err(Error::Schema(
        "rules admit no valid placement (sizes too large for their bands?)".into(),
    ))
}

fn try_generate_image<R: Rng>(
    config: &MnistRuleConfig,
    vocab: &Vocabulary,
    rng: &mut R,
    image_id: u64,
) -> Option<Layout> {
    // uniform over the 15 nonempty subsets of {1, 2, 3, 4}
    let mask: u32 = rng.gen_range(1..16);
    let labels: Vec<u32> = (1..=4).filter(|l| mask & (1 << (l - 1)) != 0).collect();

    let mut counts: BTreeMap<u32, u32> = BTreeMap::new();
    for &label in &labels {
        let n = match label {
            1 => uniform_count(config.count_1, rng),
            2 => uniform_count(config.count_2, rng),
            3 => uniform_count(config.count_3, rng),
            4 => {
                if let Some(&c2) = counts.get(&2) {
                    let lo = c2 + config.count_4_offset;
                    let hi = config.count_4_cap;
                    if lo > hi {
                        hi
                    } else {
                        uniform_count((lo, hi), rng)
                    }
                } else {
                    config.count_4_alone
                }
            }
            _ => unreachable!("vocabulary has four labels"),
        };
        counts.insert(label, n);
    }

    let mut boxes: BTreeMap<u32, Vec<BBox>> = BTreeMap::new();
    for &label in &labels {
        // one anchor per image: every 4 clusters around the same 2
        let anchor = if label == 4 {
            boxes.get(&2).map(|twos| twos[rng.gen_range(0..twos.len())])
        } else {
            None
        };
        let mut placed: Vec<BBox> = Vec::with_capacity(counts[&label] as usize);
        for _ in 0..counts[&label] {
            // boxes of the same label never overlap each other; boxes of
            // different labels may (label 4 hugs an instance of label 2)
            let b = match label {
                1 => place_in_band(config.band_top, config.size_medium, &placed, rng)?,
                2 => place_in_band(config.band_middle, config.size_large, &placed, rng)?,
                3 => place_in_band(config.band_bottom, config.size_small_medium, &placed, rng)?,
                4 => match anchor {
                    Some(two) => {
                        place_around(&two, config.around_radius, config.size_small, &placed, rng)?
                    }
                    None => place_in_region(config.bottom_right, config.size_small, &placed, rng)?,
                },
                _ => unreachable!(),
            };
            placed.push(b);
        }
        boxes.insert(label, placed);
    }

    let meta = LayoutMeta {
        image_id: Some(image_id),
        width: Some(config.canvas),
        height: Some(config.canvas),
    };
    Some(Layout::from_boxes(vocab, boxes, meta).expect("generated layouts satisfy invariants"))
}

fn uniform_count<R: Rng>((lo, hi): (u32, u32), rng: &mut R) -> u32 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

fn fits(center: f64, side: f64) -> bool {
    let lo = center - side / 2.0;
    lo >= 0.0 && lo + side <= 1.0 + BOUNDS_TOL
}

fn disjoint_from_all(b: &BBox, existing: &[BBox]) -> bool {
    existing.iter().all(|e| crate::layout::iou(b, e) == 0.0)
}

/// Uniform square in a horizontal band: the vertical center falls in the
/// band, the horizontal center anywhere the box fits, rejecting overlaps
/// with boxes of the same label.
fn place_in_band<R: Rng>(band: Range, size: Range, existing: &[BBox], rng: &mut R) -> Option<BBox> {
    for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        let side = size.sample(rng);
        let y_center = band.sample(rng);
        if !fits(y_center, side) {
            continue;
        }
        let x_center = rng.gen_range(side / 2.0..=1.0 - side / 2.0);
        let b = square(x_center, y_center, side);
        if disjoint_from_all(&b, existing) {
            return Some(b);
        }
    }
    None
}

/// Uniform square with both center coordinates in `region`.
fn place_in_region<R: Rng>(
    region: Range,
    size: Range,
    existing: &[BBox],
    rng: &mut R,
) -> Option<BBox> {
    for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        let side = size.sample(rng);
        let x_center = region.sample(rng);
        let y_center = region.sample(rng);
        if !fits(x_center, side) || !fits(y_center, side) {
            continue;
        }
        let b = square(x_center, y_center, side);
        if disjoint_from_all(&b, existing) {
            return Some(b);
        }
    }
    None
}

/// Square centered on a ring around the image's anchor box, clamped so
/// the box stays on the canvas. May overlap the anchor (a different
/// label) but not its own siblings.
fn place_around<R: Rng>(
    anchor: &BBox,
    radius: Range,
    size: Range,
    existing: &[BBox],
    rng: &mut R,
) -> Option<BBox> {
    let (ax, ay) = anchor.center();
    for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        let side = size.sample(rng);
        let r = radius.sample(rng);
        let theta = rng.gen_range(0.0..std::f64::consts::TAU);
        let cx = (ax + r * theta.cos()).clamp(side / 2.0, 1.0 - side / 2.0);
        let cy = (ay + r * theta.sin()).clamp(side / 2.0, 1.0 - side / 2.0);
        let b = square(cx, cy, side);
        if disjoint_from_all(&b, existing) {
            return Some(b);
        }
    }
    None
}

fn square(x_center: f64, y_center: f64, side: f64) -> BBox {
    BBox::clip_from_unchecked(x_center - side / 2.0, y_center - side / 2.0, side, side)
}

/// Band membership check used by generator self-validation and tests.
pub fn band_for_label(config: &MnistRuleConfig, label: u32) -> Option<Range> {
    match label {
        1 => Some(config.band_top),
        2 => Some(config.band_middle),
        3 => Some(config.band_bottom),
        _ => None,
    }
}

/// True when the box's vertical center falls in its label's band. Band
/// placements are rejection-sampled to fit, so no clamping tolerance is
/// needed beyond float noise.
pub fn center_in_band(config: &MnistRuleConfig, label: u32, b: &BBox) -> bool {
    match band_for_label(config, label) {
        Some(band) => {
            let (_, cy) = b.center();
            cy >= band.0 - 1e-9 && cy <= band.1 + 1e-9
        }
        None => true,
    }
}
