//! Line-oriented CSV manifests: `path,identity,camera`, paths relative to
//! the manifest's directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{DomainDataset, ImageSample};
use crate::error::{Error, Result};

pub const HEADER: [&str; 3] = ["path", "identity", "camera"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: String,
    pub identity: i64,
    pub camera: u32,
}

/// Parse manifest rows, reporting the 1-based line of any malformed record.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: u64, message: String| Error::ManifestParse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| parse_err(1, e.to_string()))?;
    if headers.iter().collect::<Vec<_>>() != HEADER {
        return Err(parse_err(1, format!("expected header {:?}", HEADER.join(","))));
    }
    let mut rows = Vec::new();
    for record in reader.deserialize::<ManifestRow>() {
        match record {
            Ok(r) => rows.push(r),
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                return Err(parse_err(line, e.to_string()));
            }
        }
    }
    Ok(rows)
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Load and validate one domain. Identity labels are re-densified in
/// ascending order of their manifest values; originals are preserved on
/// each sample.
pub fn load_domain(manifest_path: &Path, domain_id: usize) -> Result<DomainDataset> {
    let rows = read_manifest(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let dense: BTreeMap<i64, usize> = rows
        .iter()
        .map(|r| r.identity)
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id, i))
        .collect();
    let mut samples = Vec::with_capacity(rows.len());
    for r in &rows {
        let file: PathBuf = root.join(&r.path);
        if !file.is_file() {
            return Err(Error::MissingImage(file));
        }
        let img = image::open(&file).map_err(|source| Error::Image {
            path: file.clone(),
            source,
        })?;
        samples.push(ImageSample {
            pixels: Arc::new(img.to_rgb8()),
            identity: dense[&r.identity],
            camera: r.camera,
            domain: domain_id,
            original_identity: r.identity,
            path: Some(file),
        });
    }
    let name = root
        .file_name()
        .map_or_else(|| format!("domain_{domain_id}"), |n| n.to_string_lossy().into_owned());
    DomainDataset::new(domain_id, name, samples)
}
