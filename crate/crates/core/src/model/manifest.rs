//! Sample manifest: one JSON object per line.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io;
use crate::model::Sample;

/// Serialize the manifest. Key order follows the `Sample` field order and
/// the output is byte-identical for identical input.
pub fn persist_manifest(samples: &[Sample], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() && !parent.is_dir() {
            return Err(Error::Precondition(format!(
                "manifest directory {} does not exist",
                parent.display()
            )));
        }
    }
    io::write_jsonl(path, samples)
}

pub fn load_manifest(path: &Path) -> Result<Vec<Sample>> {
    let samples: Vec<Sample> = io::read_jsonl(path)?;
    let mut seen = std::collections::BTreeSet::new();
    for s in &samples {
        if !seen.insert(s.id) {
            return Err(Error::Data(format!("duplicate sample {} in {}", s.id, path.display())));
        }
    }
    Ok(samples)
}
