//! Model persistence as self-describing JSON text.
//!
//! Floating-point values are written with shortest-round-trip formatting, so
//! save → load returns bit-identical parameters at the stored precision.

use super::{DualBranchNet, Network};
use crate::{PurifyError, Result};
use serde::{de::DeserializeOwned, Serialize};
use std::fs;
use std::path::Path;

const FORMAT_KEY: &str = "format";

fn save_tagged<T: Serialize>(value: &T, tag: &str, path: &Path) -> Result<()> {
    let mut doc = serde_json::to_value(value)
        .map_err(|e| PurifyError::parse(path.display().to_string(), e.to_string()))?;
    doc.as_object_mut()
        .expect("models serialize to objects")
        .insert(FORMAT_KEY.into(), serde_json::Value::String(tag.into()));
    let text = serde_json::to_string_pretty(&doc)
        .map_err(|e| PurifyError::parse(path.display().to_string(), e.to_string()))?;
    fs::write(path, text).map_err(|e| PurifyError::io(path.display().to_string(), e))
}

fn load_tagged<T: DeserializeOwned>(tag: &str, path: &Path) -> Result<T> {
    let text =
        fs::read_to_string(path).map_err(|e| PurifyError::io(path.display().to_string(), e))?;
    let doc: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| PurifyError::parse(path.display().to_string(), e.to_string()))?;
    match doc.get(FORMAT_KEY).and_then(|v| v.as_str()) {
        Some(found) if found == tag => {}
        Some(found) => {
            return Err(PurifyError::parse(
                path.display().to_string(),
                format!("expected a {tag} file, found {found}"),
            ))
        }
        None => {
            return Err(PurifyError::parse(
                path.display().to_string(),
                format!("missing {FORMAT_KEY} field"),
            ))
        }
    }
    serde_json::from_value(doc)
        .map_err(|e| PurifyError::parse(path.display().to_string(), e.to_string()))
}

/// Tag for single-network files.
pub const NETWORK_FORMAT: &str = "dense-network/v1";
/// Tag for dual-branch network files.
pub const DUAL_FORMAT: &str = "dual-branch-network/v1";

pub fn save_network(net: &Network, path: &Path) -> Result<()> {
    save_tagged(net, NETWORK_FORMAT, path)
}

pub fn load_network(path: &Path) -> Result<Network> {
    load_tagged(NETWORK_FORMAT, path)
}

pub fn save_dual(net: &DualBranchNet, path: &Path) -> Result<()> {
    save_tagged(net, DUAL_FORMAT, path)
}

pub fn load_dual(path: &Path) -> Result<DualBranchNet> {
    load_tagged(DUAL_FORMAT, path)
}
