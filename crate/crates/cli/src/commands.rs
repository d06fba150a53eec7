use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::Args;

use layoutvae::data::{self, coco, mnist::MnistRuleConfig, DatasetDir, DatasetManifest};
use layoutvae::eval;
use layoutvae::layout::{Layout, Vocabulary};
use layoutvae::train::{self, ModelKind, SplitId, TrainConfig};
use layoutvae::{bboxvae::BBoxVae, countvae::CountVae};

use crate::config::parse_train_config;

fn default_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Refuses to write into an existing non-empty directory unless forced.
fn guard_out_dir(out: &Path, force: bool) -> anyhow::Result<()> {
    if out.exists() && !force {
        let occupied = std::fs::read_dir(out)
            .map(|mut entries| entries.next().is_some())
            .unwrap_or(false);
        if occupied {
            bail!(
                "output directory {} is not empty (use --force to overwrite)",
                out.display()
            );
        }
    }
    std::fs::create_dir_all(out)?;
    Ok(())
}

fn guard_out_file(out: &Path, force: bool) -> anyhow::Result<()> {
    if out.exists() && !force {
        bail!(
            "{} already exists (use --force to overwrite)",
            out.display()
        );
    }
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    Ok(())
}

/// Vocabulary resolution: an explicit file, a dataset directory's
/// vocab.json, or the built-in four-digit vocabulary.
fn load_vocab(explicit: Option<&Path>) -> anyhow::Result<Vocabulary> {
    match explicit {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            Ok(serde_json::from_str(&text)
                .with_context(|| format!("parsing vocabulary {}", path.display()))?)
        }
        None => Ok(Vocabulary::mnist()),
    }
}

#[derive(Args)]
pub struct GenDataArgs {
    /// Rules file (key=value); defaults to the built-in rules.
    #[arg(long)]
    rules: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

pub fn gen_data(args: GenDataArgs) -> anyhow::Result<()> {
    let config = match &args.rules {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            MnistRuleConfig::parse(&text)?
        }
        None => MnistRuleConfig::default(),
    };
    guard_out_dir(&args.out, args.force)?;

    let (train, val, test) = layoutvae::data::mnist::generate_all(&config, args.seed);
    let vocab = Vocabulary::mnist();
    let manifest = DatasetManifest {
        config_hash: data::config_hash(&config.canonical_text()),
        seed: args.seed,
        splits: [
            ("train".to_string(), train.len()),
            ("val".to_string(), val.len()),
            ("test".to_string(), test.len()),
        ]
        .into(),
    };
    DatasetDir::create(
        &args.out,
        &vocab,
        &manifest,
        &[
            ("train", &train[..]),
            ("val", &val[..]),
            ("test", &test[..]),
        ],
    )?;
    println!(
        "wrote {} train / {} val / {} test layouts to {} (config {})",
        train.len(),
        val.len(),
        test.len(),
        args.out.display(),
        manifest.config_hash
    );
    Ok(())
}

#[derive(Args)]
pub struct IngestCocoArgs {
    /// Panoptic annotation JSON (images[] plus annotations[] with
    /// segments_info[]).
    #[arg(long)]
    annotations: PathBuf,
    /// Panoptic categories JSON (id, name, isthing).
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Move the last N ingested images into val.jsonl.
    #[arg(long, default_value_t = 5000)]
    val_tail: usize,
    /// Split name for the ingested stream (train writes train/val pair).
    #[arg(long = "as", default_value = "train")]
    split: String,
    #[arg(long)]
    force: bool,
}

pub fn ingest_coco(args: IngestCocoArgs) -> anyhow::Result<()> {
    let categories = std::fs::read_to_string(&args.vocab)
        .with_context(|| format!("reading {}", args.vocab.display()))?;
    let vocab = coco::vocabulary_from_categories(&categories)?;
    let annotations = std::fs::read_to_string(&args.annotations)
        .with_context(|| format!("reading {}", args.annotations.display()))?;
    let layouts = coco::ingest_panoptic(&annotations, &vocab)?;

    // dataset checksums to compare against the published corpus statistics
    let max_labels = layouts.iter().map(|l| l.labels.len()).max().unwrap_or(0);
    let max_boxes = layouts.iter().map(Layout::total_boxes).max().unwrap_or(0);
    println!(
        "ingested stats: {} images, largest label set {}, most boxes in an image {}",
        layouts.len(),
        max_labels,
        max_boxes
    );

    guard_out_dir(&args.out, true)?;
    let vocab_json = serde_json::to_string_pretty(&vocab)?;
    std::fs::write(args.out.join("vocab.json"), vocab_json)?;

    if args.split == "train" {
        let (train, val) = coco::split_val_tail(layouts, args.val_tail);
        let train_path = args.out.join("train.jsonl");
        let val_path = args.out.join("val.jsonl");
        if !args.force && (train_path.exists() || val_path.exists()) {
            bail!(
                "split files already exist in {} (use --force)",
                args.out.display()
            );
        }
        data::write_layout_stream(&train_path, &train)?;
        data::write_layout_stream(&val_path, &val)?;
        println!(
            "ingested {} train / {} val layouts into {}",
            train.len(),
            val.len(),
            args.out.display()
        );
    } else {
        let path = args.out.join(format!("{}.jsonl", args.split));
        if !args.force && path.exists() {
            bail!("{} already exists (use --force)", path.display());
        }
        data::write_layout_stream(&path, &layouts)?;
        println!("ingested {} layouts into {}", layouts.len(), path.display());
    }
    Ok(())
}

#[derive(Args)]
pub struct TrainArgs {
    /// Which sub-model to train: count or bbox.
    #[arg(long)]
    model: String,
    /// Dataset directory from gen-data or ingest-coco.
    #[arg(long)]
    data: PathBuf,
    /// Key=value config file; defaults reproduce the published setup.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Also write the per-epoch loss table here (defaults to
    /// <out>.report.csv).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Worker threads (default: available cores).
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    force: bool,
}

pub fn train(args: TrainArgs) -> anyhow::Result<()> {
    let kind = ModelKind::parse(&args.model)?;
    let mut config = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            parse_train_config(kind, &text)?
        }
        None => TrainConfig::defaults_for(kind),
    };
    config.model_kind = kind;
    if let Some(threads) = args.threads {
        config.threads = threads.max(1);
    } else if config.threads == 1 {
        config.threads = default_threads();
    }
    guard_out_file(&args.out, args.force)?;

    let dataset = DatasetDir::open(&args.data)?;
    let train_split = dataset.split("train")?;
    let val_split = dataset.split("val")?;
    println!(
        "training {} model: {} train / {} val layouts, {} epochs, lr {}, batch {}, threads {}",
        args.model,
        train_split.len(),
        val_split.len(),
        config.epochs,
        config.lr,
        config.batch_size,
        config.threads
    );

    let (model, report) = train::train(&config, &dataset.vocab, &train_split, &val_split)?;
    model.save(&args.out)?;

    let report_path = args
        .report
        .clone()
        .unwrap_or_else(|| args.out.with_extension("report.csv"));
    std::fs::write(&report_path, report.to_csv())?;

    println!(
        "selected epoch {} (val loss {:.4}); checkpoint {}; report {} ({:.1}s)",
        report.selected_epoch,
        report.best_val_loss(),
        args.out.display(),
        report_path.display(),
        report.wall_secs
    );
    Ok(())
}

#[derive(Args)]
pub struct SampleArgs {
    #[arg(long)]
    count_ckpt: PathBuf,
    #[arg(long)]
    bbox_ckpt: PathBuf,
    /// Comma-separated label ids, e.g. "1,3".
    #[arg(long)]
    labels: String,
    /// Number of layouts to sample.
    #[arg(long, default_value_t = 5)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also write one SVG per sample.
    #[arg(long)]
    svg: bool,
    /// Vocabulary JSON (defaults to the built-in four-digit vocabulary).
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Decode box means instead of sampling around them.
    #[arg(long)]
    mean_boxes: bool,
    #[arg(long)]
    force: bool,
}

pub fn sample(args: SampleArgs) -> anyhow::Result<()> {
    let vocab = load_vocab(args.vocab.as_deref())?;
    let count_model = CountVae::load(&args.count_ckpt)?;
    let bbox_model = BBoxVae::load(&args.bbox_ckpt)?;

    let labels: Vec<u32> = args
        .labels
        .split(',')
        .map(|s| s.trim().parse::<u32>().context("label ids are integers"))
        .collect::<anyhow::Result<Vec<u32>>>()?;
    if labels.is_empty() {
        bail!("need at least one label");
    }
    for &label in &labels {
        if !vocab.contains(label) {
            bail!(
                "label {} outside vocabulary {:?} (M = {})",
                label,
                vocab.id,
                vocab.len()
            );
        }
    }

    guard_out_dir(&args.out, args.force)?;
    let layouts = layoutvae::sampling::sample_layouts(
        &count_model,
        &bbox_model,
        &vocab,
        &labels,
        args.n,
        args.seed,
        args.mean_boxes,
    )?;
    let stream_path = args.out.join("samples.jsonl");
    data::write_layout_stream(&stream_path, &layouts)?;
    if args.svg {
        for (i, layout) in layouts.iter().enumerate() {
            let svg = layoutvae::render::layout_to_svg(layout, &vocab, 512)?;
            std::fs::write(args.out.join(format!("sample_{i:03}.svg")), svg)?;
        }
    }
    println!(
        "wrote {} sampled layouts to {}",
        layouts.len(),
        stream_path.display()
    );
    Ok(())
}

#[derive(Args)]
pub struct ScoreArgs {
    #[arg(long)]
    bbox_ckpt: PathBuf,
    /// Optional count model: adds per-label count NLL to the report.
    #[arg(long)]
    count_ckpt: Option<PathBuf>,
    /// Layout stream to score.
    #[arg(long)]
    layouts: PathBuf,
    /// prior or importance.
    #[arg(long, default_value = "importance")]
    mode: String,
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Also score vertically flipped layouts and report the worsened
    /// fraction.
    #[arg(long)]
    flip: bool,
    /// Write flipped/original document pairs here for rendering.
    #[arg(long)]
    emit_pairs: Option<PathBuf>,
    /// Per-layout CSV output path.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
}

pub fn score(args: ScoreArgs) -> anyhow::Result<()> {
    let vocab = load_vocab(args.vocab.as_deref())?;
    let bbox_model = BBoxVae::load(&args.bbox_ckpt)?;
    if bbox_model.config().vocab_size != vocab.len() {
        bail!(
            "checkpoint was trained over {} categories but the vocabulary has {}",
            bbox_model.config().vocab_size,
            vocab.len()
        );
    }
    let layouts = data::read_layout_stream(&args.layouts, &vocab)?;
    if layouts.is_empty() {
        bail!("no layouts to score in {}", args.layouts.display());
    }
    let importance = match args.mode.as_str() {
        "importance" => true,
        "prior" => false,
        other => bail!("unknown mode {other:?} (expected prior or importance)"),
    };

    let mut csv = String::from("index,image_id,boxes,bbox_nll_per_box\n");
    let bbox_nll = eval::bbox_dataset_nll(
        &bbox_model,
        &vocab,
        &layouts,
        SplitId::Test,
        args.samples,
        importance,
        args.seed,
    )?;
    // per-layout rows
    for (idx, layout) in layouts.iter().enumerate() {
        let one = eval::bbox_dataset_nll(
            &bbox_model,
            &vocab,
            std::slice::from_ref(layout),
            SplitId::Test,
            args.samples,
            importance,
            args.seed.wrapping_add(idx as u64),
        )?;
        csv.push_str(&format!(
            "{},{},{},{}\n",
            idx,
            layout
                .meta
                .image_id
                .map_or(String::new(), |v| v.to_string()),
            layout.total_boxes(),
            one.per_step
        ));
    }
    println!(
        "bbox NLL ({}): {:.4} per box / {:.4} per image over {} layouts",
        args.mode, bbox_nll.per_step, bbox_nll.per_image, bbox_nll.images
    );

    if let Some(count_path) = &args.count_ckpt {
        let count_model = CountVae::load(count_path)?;
        let count_nll = eval::count_dataset_nll(
            &count_model,
            &vocab,
            &layouts,
            SplitId::Test,
            args.samples,
            args.seed,
        )?;
        println!(
            "count NLL (prior): {:.4} per label / {:.4} per image",
            count_nll.per_step, count_nll.per_image
        );
    }

    if args.flip {
        let report = eval::flip_experiment(&bbox_model, &vocab, &layouts, args.samples, args.seed)?;
        println!(
            "flip: {:.2}% of layouts score worse upside down (NLL {:.4} original vs {:.4} flipped)",
            100.0 * report.fraction_worse,
            report.mean_nll_original,
            report.mean_nll_flipped
        );
        if let Some(pairs_dir) = &args.emit_pairs {
            guard_out_dir(pairs_dir, true)?;
            let flipped: Vec<Layout> = layouts.iter().map(Layout::flip_vertical).collect();
            data::write_layout_stream(&pairs_dir.join("original.jsonl"), &layouts)?;
            data::write_layout_stream(&pairs_dir.join("flipped.jsonl"), &flipped)?;
        }
    }

    if let Some(out) = &args.out {
        guard_out_file(out, true)?;
        std::fs::write(out, csv)?;
        println!("per-layout scores written to {}", out.display());
    }
    Ok(())
}

#[derive(Args)]
pub struct RenderArgs {
    #[arg(long)]
    layouts: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 512)]
    width: u32,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

pub fn render(args: RenderArgs) -> anyhow::Result<()> {
    let vocab = load_vocab(args.vocab.as_deref())?;
    let layouts = data::read_layout_stream(&args.layouts, &vocab)?;
    guard_out_dir(&args.out, args.force)?;
    for (i, layout) in layouts.iter().enumerate() {
        let svg = layoutvae::render::layout_to_svg(layout, &vocab, args.width)?;
        std::fs::write(args.out.join(format!("layout_{i:04}.svg")), svg)?;
    }
    println!(
        "rendered {} layouts into {}",
        layouts.len(),
        args.out.display()
    );
    Ok(())
}

#[derive(Args)]
pub struct ExperimentArgs {
    /// ablation, order, latent, or flip.
    #[arg(long)]
    name: String,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// count or bbox (defaults: ablation/latent use count, order uses
    /// bbox; flip needs --bbox-ckpt).
    #[arg(long)]
    model: Option<String>,
    /// Override training epochs for the table rows (tables train one
    /// model per row; the published epoch counts can take hours on a
    /// laptop).
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    threads: Option<usize>,
    /// Trained box checkpoint (flip experiment only).
    #[arg(long)]
    bbox_ckpt: Option<PathBuf>,
    /// Latent sizes for --name latent.
    #[arg(long, default_value = "2,4,8,16,32,64,128")]
    latent_sizes: String,
    #[arg(long)]
    force: bool,
}

pub fn experiment(args: ExperimentArgs) -> anyhow::Result<()> {
    let dataset = DatasetDir::open(&args.data)?;
    guard_out_dir(&args.out, args.force)?;
    let test_split = dataset.split("test")?;

    if args.name == "flip" {
        let Some(ckpt) = &args.bbox_ckpt else {
            bail!("--name flip needs --bbox-ckpt <trained box checkpoint>");
        };
        let model = BBoxVae::load(ckpt)?;
        let report =
            eval::flip_experiment(&model, &dataset.vocab, &test_split, args.samples, args.seed)?;
        let mut csv = String::from("index,nll_original,nll_flipped\n");
        for (i, (orig, flip)) in report.pairs.iter().enumerate() {
            csv.push_str(&format!("{i},{orig},{flip}\n"));
        }
        std::fs::write(args.out.join("flip.csv"), csv)?;
        let summary = format!(
            "flipped NLL worse for {:.2}% of layouts\nmean NLL original: {:.4}\nmean NLL flipped: {:.4}\n",
            100.0 * report.fraction_worse,
            report.mean_nll_original,
            report.mean_nll_flipped
        );
        std::fs::write(args.out.join("flip.txt"), &summary)?;
        print!("{summary}");
        return Ok(());
    }

    let (kind, table_kind) = match args.name.as_str() {
        "ablation" => (ModelKind::Count, eval::TableKind::Ablation),
        "order" => (ModelKind::BBox, eval::TableKind::Order),
        "latent" => (ModelKind::Count, eval::TableKind::Latent),
        other => bail!("unknown experiment {other:?} (expected ablation, order, latent or flip)"),
    };
    let kind = match &args.model {
        Some(m) => ModelKind::parse(m)?,
        None => kind,
    };

    let mut base = TrainConfig::defaults_for(kind);
    base.seed = args.seed;
    if let Some(epochs) = args.epochs {
        base.epochs = epochs;
    }
    base.threads = args.threads.unwrap_or_else(default_threads);

    let latent_sizes: Vec<usize> = args
        .latent_sizes
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .context("latent sizes are integers")
        })
        .collect::<anyhow::Result<Vec<usize>>>()?;

    let train_split = dataset.split("train")?;
    let val_split = dataset.split("val")?;
    let table = eval::run_table(
        table_kind,
        &base,
        &dataset.vocab,
        &train_split,
        &val_split,
        &test_split,
        args.samples,
        &latent_sizes,
    )?;
    std::fs::write(args.out.join(format!("{}.csv", args.name)), table.to_csv())?;
    std::fs::write(args.out.join(format!("{}.txt", args.name)), table.to_text())?;
    print!("{}", table.to_text());
    Ok(())
}
