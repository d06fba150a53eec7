use super::mnist::{self, MnistRuleConfig};
use super::*;
use crate::layout::Vocabulary;

fn tmp_dir(name: &str) -> std::path::PathBuf {
    let dir = std::env::temp_dir().join("lvae-data-tests").join(name);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn stream_roundtrip_is_identity() {
    let config = MnistRuleConfig {
        train: 20,
        val: 5,
        test: 5,
        ..Default::default()
    };
    let layouts = mnist::generate_split(&config, 7, 0, 20);
    let vocab = Vocabulary::mnist();
    let path = tmp_dir("roundtrip").join("split.jsonl");
    write_layout_stream(&path, &layouts).unwrap();
    let back = read_layout_stream(&path, &vocab).unwrap();
    assert_eq!(back, layouts);
}

#[test]
fn empty_file_is_an_empty_dataset() {
    let path = tmp_dir("empty").join("empty.jsonl");
    std::fs::write(&path, "").unwrap();
    let layouts = read_layout_stream(&path, &Vocabulary::mnist()).unwrap();
    assert!(layouts.is_empty());
}

#[test]
fn bad_document_errors_name_the_line() {
    let path = tmp_dir("badline").join("bad.jsonl");
    let good = r#"{"vocab_id":"mnist-layouts","labels":[1],"counts":{"1":1},"boxes":{"1":[[0.1,0.1,0.2,0.2]]},"meta":{}}"#;
    let zero_width = r#"{"vocab_id":"mnist-layouts","labels":[1],"counts":{"1":1},"boxes":{"1":[[0.1,0.1,0.0,0.2]]},"meta":{}}"#;
    std::fs::write(&path, format!("{good}\n{zero_width}\n")).unwrap();
    let err = read_layout_stream(&path, &Vocabulary::mnist())
        .expect_err("zero-width box must fail")
        .to_string();
    assert!(err.contains("line 2"), "got: {err}");
    assert!(err.contains("width/height"), "got: {err}");
}

#[test]
fn generator_is_deterministic() {
    let config = MnistRuleConfig::default();
    let a = mnist::generate_split(&config, 123, 0, 50);
    let b = mnist::generate_split(&config, 123, 0, 50);
    assert_eq!(a, b);
    let c = mnist::generate_split(&config, 124, 0, 50);
    assert_ne!(a, c, "different seeds give different data");
}

#[test]
fn generator_respects_count_rules() {
    let config = MnistRuleConfig::default();
    let layouts = mnist::generate_split(&config, 5, 0, 2000);
    for layout in &layouts {
        for (&label, &count) in &layout.counts {
            match label {
                1 => assert!((3..=4).contains(&count), "label 1 count {count}"),
                2 => assert!((2..=3).contains(&count), "label 2 count {count}"),
                3 => assert!((1..=2).contains(&count), "label 3 count {count}"),
                4 => {
                    if let Some(&c2) = layout.counts.get(&2) {
                        let lo = c2 + 3;
                        assert!(
                            count >= lo.min(6) && count <= 6,
                            "label 4 count {count} with count(2) = {c2}"
                        );
                    } else {
                        assert_eq!(count, 2, "label 4 alone");
                    }
                }
                other => panic!("unexpected label {other}"),
            }
        }
    }
}

#[test]
fn generator_respects_band_rules() {
    let config = MnistRuleConfig::default();
    let layouts = mnist::generate_split(&config, 9, 0, 2000);
    let vocab = Vocabulary::mnist();
    let mut around_checked = 0usize;
    for layout in &layouts {
        layout.validate(&vocab).unwrap();
        for (&label, list) in &layout.boxes {
            for b in list {
                assert!(
                    mnist::center_in_band(&config, label, b),
                    "label {label} center {:?} outside its band",
                    b.center()
                );
            }
        }
        // label 4 near a 2 when both are present
        if let (Some(fours), Some(twos)) = (layout.boxes.get(&4), layout.boxes.get(&2)) {
            for four in fours {
                let (fx, fy) = four.center();
                let min_dist = twos
                    .iter()
                    .map(|two| {
                        let (tx, ty) = two.center();
                        ((fx - tx).powi(2) + (fy - ty).powi(2)).sqrt()
                    })
                    .fold(f64::INFINITY, f64::min);
                // radius range plus the clamp-to-canvas allowance
                assert!(
                    min_dist <= 0.25 + 1e-9 || fx <= 0.07 || fx >= 0.93 || fy <= 0.07 || fy >= 0.93,
                    "label 4 at ({fx}, {fy}) is {min_dist} from the nearest 2"
                );
                around_checked += 1;
            }
        }
    }
    assert!(around_checked > 100, "enough around-2 placements exercised");
}

#[test]
fn generator_count_frequencies_are_uniform() {
    // label 1 draws uniformly from {3, 4}: a 3-sigma multinomial bound on
    // 10k images catches a broken sampler without flaking
    let config = MnistRuleConfig::default();
    let layouts = mnist::generate_split(&config, 11, 0, 10_000);
    let mut threes = 0u32;
    let mut total = 0u32;
    for layout in &layouts {
        if let Some(&c) = layout.counts.get(&1) {
            total += 1;
            if c == 3 {
                threes += 1;
            }
        }
    }
    let p = f64::from(threes) / f64::from(total);
    let sigma = (0.25 / f64::from(total)).sqrt();
    assert!(
        (p - 0.5).abs() < 3.0 * sigma,
        "count(1) = 3 frequency {p} (n = {total})"
    );
}

#[test]
fn splits_are_disjoint_by_seed() {
    let config = MnistRuleConfig {
        train: 30,
        val: 30,
        test: 30,
        ..Default::default()
    };
    let (train, val, test) = mnist::generate_all(&config, 42);
    assert_eq!(train.len(), 30);
    let train_docs: std::collections::BTreeSet<String> = train
        .iter()
        .map(|l| crate::layout::LayoutDoc::from_layout(l).to_json())
        .collect();
    for l in val.iter().chain(&test) {
        let doc = crate::layout::LayoutDoc::from_layout(l).to_json();
        assert!(!train_docs.contains(&doc), "split leakage");
    }
}

#[test]
fn rules_parse_roundtrip_and_unknown_keys() {
    let config = MnistRuleConfig::default();
    let text = config.canonical_text();
    let parsed = MnistRuleConfig::parse(&text).unwrap();
    assert_eq!(parsed, config);

    let err = MnistRuleConfig::parse("nonsense = 4\n")
        .expect_err("unknown key must fail")
        .to_string();
    assert!(err.contains("unknown key"), "got: {err}");

    let err = MnistRuleConfig::parse("band.top = 0.4..0.1\n")
        .expect_err("empty range must fail")
        .to_string();
    assert!(err.contains("empty range"), "got: {err}");
}

#[test]
fn dataset_dir_roundtrip() {
    let config = MnistRuleConfig {
        train: 10,
        val: 4,
        test: 4,
        ..Default::default()
    };
    let (train, val, test) = mnist::generate_all(&config, 3);
    let vocab = Vocabulary::mnist();
    let manifest = DatasetManifest {
        config_hash: config_hash(&config.canonical_text()),
        seed: 3,
        splits: [
            ("train".to_string(), train.len()),
            ("val".to_string(), val.len()),
            ("test".to_string(), test.len()),
        ]
        .into(),
    };
    let root = tmp_dir("dataset-dir");
    let written = DatasetDir::create(
        &root,
        &vocab,
        &manifest,
        &[
            ("train", &train[..]),
            ("val", &val[..]),
            ("test", &test[..]),
        ],
    )
    .unwrap();
    assert_eq!(written.split("train").unwrap(), train);

    let opened = DatasetDir::open(&root).unwrap();
    assert_eq!(opened.manifest.as_ref().unwrap(), &manifest);
    assert_eq!(opened.split("val").unwrap(), val);
    assert_eq!(opened.vocab.len(), 4);
}

const TINY_CATEGORIES: &str = r#"[
    {"id": 1, "name": "person", "isthing": 1},
    {"id": 35, "name": "umbrella", "isthing": 1},
    {"id": 184, "name": "sky", "isthing": 0}
]"#;

fn tiny_annotations() -> String {
    r#"{
        "images": [
            {"id": 10, "width": 640, "height": 480, "file_name": "a.jpg"},
            {"id": 11, "width": 320, "height": 320, "file_name": "b.jpg"},
            {"id": 12, "width": 100, "height": 100, "file_name": "c.jpg"}
        ],
        "annotations": [
            {"image_id": 10, "segments_info": [
                {"id": 1, "category_id": 1, "bbox": [64, 48, 320, 240], "iscrowd": 0},
                {"id": 2, "category_id": 184, "bbox": [0, 0, 640, 120], "iscrowd": 0}
            ]},
            {"image_id": 11, "segments_info": [
                {"id": 3, "category_id": 35, "bbox": [32, 32, 64, 64], "iscrowd": 0},
                {"id": 4, "category_id": 1, "bbox": [0, 0, 160, 320], "iscrowd": 1}
            ]},
            {"image_id": 12, "segments_info": [
                {"id": 5, "category_id": 1, "bbox": [10, 10, 50, 50], "iscrowd": 1}
            ]}
        ]
    }"#
    .to_string()
}

#[test]
fn coco_vocabulary_is_dense_over_source_ids() {
    let vocab = coco::vocabulary_from_categories(TINY_CATEGORIES).unwrap();
    assert_eq!(vocab.len(), 3);
    assert_eq!(vocab.dense_id_for_source(1), Some(1));
    assert_eq!(vocab.dense_id_for_source(35), Some(2));
    assert_eq!(vocab.dense_id_for_source(184), Some(3));
    assert_eq!(
        vocab.category(3).unwrap().kind,
        crate::layout::CategoryKind::Stuff
    );
}

#[test]
fn coco_ingestion_normalizes_and_drops_crowds() {
    let vocab = coco::vocabulary_from_categories(TINY_CATEGORIES).unwrap();
    let layouts = coco::ingest_panoptic(&tiny_annotations(), &vocab).unwrap();
    // image 12 is crowd-only and skipped
    assert_eq!(layouts.len(), 2);

    let first = &layouts[0];
    assert_eq!(first.meta.image_id, Some(10));
    let person = &first.boxes[&1][0];
    assert!((person.x - 0.1).abs() < 1e-12);
    assert!((person.y - 0.1).abs() < 1e-12);
    assert!((person.w - 0.5).abs() < 1e-12);
    assert!((person.h - 0.5).abs() < 1e-12);

    let second = &layouts[1];
    assert_eq!(second.labels, vec![2], "crowd person dropped");
}

#[test]
fn coco_unknown_category_errors_with_the_id() {
    let vocab = coco::vocabulary_from_categories(TINY_CATEGORIES).unwrap();
    let text = tiny_annotations().replace("\"category_id\": 35", "\"category_id\": 99");
    let err = coco::ingest_panoptic(&text, &vocab)
        .expect_err("unknown category must fail")
        .to_string();
    assert!(err.contains("99"), "got: {err}");
}

#[test]
fn coco_malformed_file_reports_position() {
    let vocab = coco::vocabulary_from_categories(TINY_CATEGORIES).unwrap();
    let err = coco::ingest_panoptic("{\"images\": [,]}", &vocab)
        .expect_err("malformed JSON must fail")
        .to_string();
    assert!(err.contains("byte offset"), "got: {err}");
}

#[test]
fn val_tail_split_takes_the_last_images() {
    let config = MnistRuleConfig::default();
    let layouts = mnist::generate_split(&config, 2, 0, 10);
    let last = layouts[9].clone();
    let (head, tail) = coco::split_val_tail(layouts, 3);
    assert_eq!(head.len(), 7);
    assert_eq!(tail.len(), 3);
    assert_eq!(tail[2], last);
}

#[test]
fn config_hash_is_stable_and_input_sensitive() {
    let a = config_hash("canvas = 128\n");
    let b = config_hash("canvas = 128\n");
    let c = config_hash("canvas = 129\n");
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.len(), 16);
}

#[test]
fn generator_same_label_boxes_are_disjoint() {
    let config = MnistRuleConfig::default();
    let layouts = mnist::generate_split(&config, 13, 0, 3000);
    for layout in &layouts {
        for list in layout.boxes.values() {
            for i in 0..list.len() {
                for j in (i + 1)..list.len() {
                    assert_eq!(
                        crate::layout::iou(&list[i], &list[j]),
                        0.0,
                        "same-label overlap in image {:?}",
                        layout.meta.image_id
                    );
                }
            }
        }
    }
}

#[test]
fn generator_fours_share_one_anchor() {
    // all 4s of an image cluster around a single 2: pairwise distances
    // between 4 centers stay within the ring diameter plus box extent
    let config = MnistRuleConfig::default();
    let layouts = mnist::generate_split(&config, 14, 0, 3000);
    let mut checked = 0;
    for layout in &layouts {
        let (Some(fours), Some(_twos)) = (layout.boxes.get(&4), layout.boxes.get(&2)) else {
            continue;
        };
        for a in fours {
            for b in fours {
                let (ax, ay) = a.center();
                let (bx, by) = b.center();
                let dist = ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt();
                assert!(
                    dist <= 2.0 * 0.25 + 1e-9,
                    "4s {dist} apart cannot share an anchor"
                );
            }
        }
        checked += 1;
    }
    assert!(checked > 300);
}

#[test]
fn unsatisfiable_rules_error_instead_of_hanging() {
    // sides larger than the canvas can never fit, whatever the label set
    let huge = super::mnist::Range(1.5, 1.6);
    let config = MnistRuleConfig {
        size_small: huge,
        size_small_medium: huge,
        size_medium: huge,
        size_large: huge,
        ..Default::default()
    };
    let err = mnist::try_generate_split(&config, 1, 0, 3).expect_err("impossible rules must fail");
    assert!(err.to_string().contains("no valid placement"), "{err}");
}
