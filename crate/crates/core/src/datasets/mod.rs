//! Dataset ingestion: split/identity layout on disk, identity indexing,
//! identity-balanced batch sampling and training-time augmentation.

mod augment;
mod image;
mod sampler;

pub use self::augment::{augment, AugmentConfig};
pub use self::image::{load_image, DecodedImage, CLIP_MEAN, CLIP_STD};
pub use self::sampler::{make_batches, BatchPlan};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const IMAGE_EXTENSIONS: &[&str] = &["jpg", "jpeg", "png"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Gallery,
    Query,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Gallery, Split::Query];

    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Gallery => "gallery",
            Split::Query => "query",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "gallery" => Ok(Split::Gallery),
            "query" => Ok(Split::Query),
            other => Err(Error::invalid(format!("unknown split '{other}'"))),
        }
    }
}

/// One labeled image.
///
/// `identity` indexes the train label space for train records and the shared
/// gallery/query label space otherwise; the two spaces are unrelated.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub path: PathBuf,
    pub identity: usize,
    pub split: Split,
    pub source_id: String,
}

/// Bijection between original identity labels and contiguous indices.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentityIndex {
    forward: BTreeMap<String, usize>,
    backward: Vec<String>,
}

impl IdentityIndex {
    /// Builds an index from labels, assigning integers in lexicographic order.
    pub fn from_labels<I, S>(labels: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let unique: BTreeSet<String> = labels.into_iter().map(Into::into).collect();
        let backward: Vec<String> = unique.into_iter().collect();
        let forward = backward
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        Self { forward, backward }
    }

    pub fn len(&self) -> usize {
        self.backward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.backward.is_empty()
    }

    pub fn get(&self, source_id: &str) -> Option<usize> {
        self.forward.get(source_id).copied()
    }

    pub fn label(&self, index: usize) -> Option<&str> {
        self.backward.get(index).map(String::as_str)
    }

    pub fn labels(&self) -> &[String] {
        &self.backward
    }
}

/// Result of scanning a dataset root.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    /// All records, sorted by path.
    pub records: Vec<ImageRecord>,
    /// Train label space; its length is the class count `N`.
    pub train_index: IdentityIndex,
    /// Shared gallery/query label space.
    pub test_index: IdentityIndex,
    pub warnings: Vec<String>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ImageRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn split_records(&self, split: Split) -> Vec<ImageRecord> {
        self.split(split).cloned().collect()
    }

    pub fn num_train_identities(&self) -> usize {
        self.train_index.len()
    }
}

fn has_image_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

/// Scans `root`, which is either a directory laid out as
/// `{train,gallery,query}/<identity>/<image>`, a directory holding
/// `manifest.csv`, or a manifest CSV file itself.
pub fn scan_dataset(root: impl AsRef<Path>) -> Result<Dataset> {
    let root = root.as_ref();
    if root.is_file() {
        return load_manifest(root);
    }
    if !root.is_dir() {
        return Err(Error::Structural(format!(
            "dataset root {} does not exist",
            root.display()
        )));
    }
    let manifest = root.join("manifest.csv");
    if !root.join(Split::Train.dir_name()).is_dir() && manifest.is_file() {
        return load_manifest(&manifest);
    }

    let mut raw: Vec<(PathBuf, String, Split)> = Vec::new();
    let mut warnings = Vec::new();
    for split in Split::ALL {
        let split_dir = root.join(split.dir_name());
        if !split_dir.is_dir() {
            return Err(Error::Structural(format!(
                "missing split directory '{}' under {}",
                split.dir_name(),
                root.display()
            )));
        }
        for identity_dir in sorted_entries(&split_dir)? {
            if !identity_dir.is_dir() {
                continue;
            }
            let source_id = identity_dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            let mut found = 0usize;
            for file in sorted_entries(&identity_dir)? {
                if !file.is_file() {
                    continue;
                }
                if !has_image_extension(&file) {
                    let msg = format!("excluding {}: not an image extension", file.display());
                    log::warn!("{msg}");
                    warnings.push(msg);
                    continue;
                }
                raw.push((file, source_id.clone(), split));
                found += 1;
            }
            if found == 0 {
                let msg = format!(
                    "skipping identity '{source_id}' in {}: no images",
                    split.dir_name()
                );
                log::warn!("{msg}");
                warnings.push(msg);
            }
        }
    }
    finish_dataset(root.to_path_buf(), raw, warnings)
}

#[derive(Debug, Deserialize)]
struct ManifestRow {
    path: String,
    identity: String,
    split: String,
}

/// Loads a `path,identity,split` CSV; paths resolve relative to the manifest.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let expected = ["path", "identity", "split"];
    if headers.iter().map(str::trim).ne(expected.iter().copied()) {
        return Err(Error::Structural(format!(
            "manifest {} must have header 'path,identity,split'",
            path.display()
        )));
    }
    let mut raw = Vec::new();
    let mut warnings = Vec::new();
    for row in reader.deserialize::<ManifestRow>() {
        let row = row?;
        let split: Split = row.split.parse()?;
        let file = base.join(row.path.trim());
        if !has_image_extension(&file) {
            let msg = format!("excluding {}: not an image extension", file.display());
            log::warn!("{msg}");
            warnings.push(msg);
            continue;
        }
        raw.push((file, row.identity.trim().to_string(), split));
    }
    finish_dataset(base, raw, warnings)
}

fn finish_dataset(
    root: PathBuf,
    mut raw: Vec<(PathBuf, String, Split)>,
    warnings: Vec<String>,
) -> Result<Dataset> {
    raw.sort_by(|a, b| a.0.cmp(&b.0));
    let train_index = IdentityIndex::from_labels(
        raw.iter()
            .filter(|r| r.2 == Split::Train)
            .map(|r| r.1.clone()),
    );
    if train_index.is_empty() {
        return Err(Error::Structural("no train identities".into()));
    }
    let test_index = IdentityIndex::from_labels(
        raw.iter()
            .filter(|r| r.2 != Split::Train)
            .map(|r| r.1.clone()),
    );
    let records = raw
        .into_iter()
        .map(|(path, source_id, split)| {
            let index = if split == Split::Train {
                &train_index
            } else {
                &test_index
            };
            let identity = index.get(&source_id).expect("label indexed above");
            ImageRecord {
                path,
                identity,
                split,
                source_id,
            }
        })
        .collect();
    Ok(Dataset {
        root,
        records,
        train_index,
        test_index,
        warnings,
    })
}

/// Per-split image and identity counts, mirroring the usual ReID dataset table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub train_images: usize,
    pub train_ids: usize,
    pub gallery_images: usize,
    pub gallery_ids: usize,
    pub query_images: usize,
    pub query_ids: usize,
    pub total_images: usize,
    pub total_ids: usize,
    /// Images per identity label, keyed by `split/label`.
    pub per_identity: BTreeMap<String, usize>,
}

impl DatasetSummary {
    pub fn from_dataset(dataset: &Dataset) -> Self {
        let count = |split: Split| {
            let imgs = dataset.split(split).count();
            let ids: BTreeSet<&str> = dataset.split(split).map(|r| r.source_id.as_str()).collect();
            (imgs, ids.len())
        };
        let (train_images, train_ids) = count(Split::Train);
        let (gallery_images, gallery_ids) = count(Split::Gallery);
        let (query_images, query_ids) = count(Split::Query);
        let mut per_identity = BTreeMap::new();
        for r in &dataset.records {
            *per_identity
                .entry(format!("{}/{}", r.split, r.source_id))
                .or_insert(0) += 1;
        }
        Self {
            train_images,
            train_ids,
            gallery_images,
            gallery_ids,
            query_images,
            query_ids,
            total_images: dataset.records.len(),
            total_ids: dataset.train_index.len() + dataset.test_index.len(),
            per_identity,
        }
    }
}
