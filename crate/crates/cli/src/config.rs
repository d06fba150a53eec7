//! Key=value training configuration files.
//!
//! Every hyperparameter defaults to the published value for the chosen
//! model, so `train` with no config reproduces the reference setup.
//!
//! ```text
//! # comments and blank lines are ignored
//! lr = 1e-4
//! epochs = 150
//! batch_size = 32
//! latent_dim = 32
//! hidden = 128
//! ordering = things_first
//! use_history = true
//! use_context = true
//! seed = 1
//! threads = 2
//! ```

use anyhow::{bail, Context};
use layoutvae::layout::OrderingPolicy;
use layoutvae::train::{ModelKind, TrainConfig};

pub fn parse_train_config(kind: ModelKind, text: &str) -> anyhow::Result<TrainConfig> {
    let mut config = TrainConfig::defaults_for(kind);
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("config line {}: expected key = value", lineno + 1);
        };
        let key = key.trim();
        let value = value.trim();
        let ctx = || format!("config line {}: bad value for {key:?}", lineno + 1);
        match key {
            "lr" => config.lr = value.parse().with_context(ctx)?,
            "epochs" => config.epochs = value.parse().with_context(ctx)?,
            "batch_size" => config.batch_size = value.parse().with_context(ctx)?,
            "latent_dim" => config.latent_dim = value.parse().with_context(ctx)?,
            "hidden" => config.hidden = value.parse().with_context(ctx)?,
            "ordering" => config.ordering = OrderingPolicy::parse(value)?,
            "use_history" => config.ablation.use_history = parse_bool(value).with_context(ctx)?,
            "use_context" => config.ablation.use_context = parse_bool(value).with_context(ctx)?,
            "seed" => config.seed = value.parse().with_context(ctx)?,
            "threads" => config.threads = value.parse().with_context(ctx)?,
            other => bail!("config line {}: unknown key {other:?}", lineno + 1),
        }
    }
    config.validate()?;
    Ok(config)
}

fn parse_bool(v: &str) -> anyhow::Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        other => bail!("expected true/false, got {other:?}"),
    }
}
