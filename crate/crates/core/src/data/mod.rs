//! Dataset construction and ingestion: the rule-based synthetic layout
//! generator, newline-delimited layout streams, and COCO panoptic
//! annotation conversion.

pub mod coco;
pub mod mnist;

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::layout::{Layout, LayoutDoc, Vocabulary};
use crate::{Error, Result};

/// Writes layouts as one JSON document per line.
pub fn write_layout_stream(path: &Path, layouts: &[Layout]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    for layout in layouts {
        let doc = LayoutDoc::from_layout(layout);
        writeln!(w, "{}", doc.to_json())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a layout stream, validating every document against `vocab`.
/// Errors carry the 1-based line number. An empty file is an empty
/// dataset, not an error.
pub fn read_layout_stream(path: &Path, vocab: &Vocabulary) -> Result<Vec<Layout>> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc = LayoutDoc::parse_json(&line)
            .map_err(|e| Error::Schema(format!("line {}: {e}", i + 1)))?;
        let layout = doc
            .into_layout(vocab)
            .map_err(|e| Error::Schema(format!("line {}: {e}", i + 1)))?;
        out.push(layout);
    }
    Ok(out)
}

/// Provenance record written next to generated or ingested splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Hash of the canonical rule/ingestion configuration.
    pub config_hash: String,
    pub seed: u64,
    /// Split name -> number of layouts.
    pub splits: std::collections::BTreeMap<String, usize>,
}

/// The three standard split names.
pub const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

/// A dataset directory: `vocab.json`, `manifest.json`, and one
/// `<split>.jsonl` stream per split.
pub struct DatasetDir {
    pub vocab: Vocabulary,
    pub manifest: Option<DatasetManifest>,
    root: std::path::PathBuf,
}

impl DatasetDir {
    pub fn create(
        root: &Path,
        vocab: &Vocabulary,
        manifest: &DatasetManifest,
        splits: &[(&str, &[Layout])],
    ) -> Result<Self> {
        std::fs::create_dir_all(root)?;
        let vocab_json =
            serde_json::to_string_pretty(vocab).map_err(|e| Error::Schema(e.to_string()))?;
        std::fs::write(root.join("vocab.json"), vocab_json)?;
        let manifest_json =
            serde_json::to_string_pretty(manifest).map_err(|e| Error::Schema(e.to_string()))?;
        std::fs::write(root.join("manifest.json"), manifest_json)?;
        for (name, layouts) in splits {
            write_layout_stream(&root.join(format!("{name}.jsonl")), layouts)?;
        }
        Ok(Self {
            vocab: vocab.clone(),
            manifest: Some(manifest.clone()),
            root: root.to_path_buf(),
        })
    }

    pub fn open(root: &Path) -> Result<Self> {
        let vocab_path = root.join("vocab.json");
        let vocab: Vocabulary = serde_json::from_str(&std::fs::read_to_string(&vocab_path)?)
            .map_err(|e| Error::Schema(format!("{}: {e}", vocab_path.display())))?;
        let manifest_path = root.join("manifest.json");
        let manifest = if manifest_path.exists() {
            Some(
                serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)
                    .map_err(|e| Error::Schema(format!("{}: {e}", manifest_path.display())))?,
            )
        } else {
            None
        };
        Ok(Self {
            vocab,
            manifest,
            root: root.to_path_buf(),
        })
    }

    pub fn split(&self, name: &str) -> Result<Vec<Layout>> {
        read_layout_stream(&self.root.join(format!("{name}.jsonl")), &self.vocab)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
}

/// FNV-1a over the canonical text of a configuration, rendered as hex.
pub fn config_hash(canonical: &str) -> String {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in canonical.bytes() {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{hash:016x}")
}

#[cfg(test)]
mod tests;
