use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cmz::CropRect;
use crate::error::{Error, Result};
use crate::image::ImageBuf;
use crate::rng::{rng_for, stream};

use super::preprocess::preprocess;
use super::ImageSample;

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp"];
pub const MASK_SUFFIX: &str = "_mask";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub path: PathBuf,
    pub label: usize,
}

impl Entry {
    /// Stable identifier used in logs and exported file names.
    pub fn sample_id(&self) -> String {
        self.path
            .with_extension("")
            .to_string_lossy()
            .replace(['/', '\\'], "__")
    }

    pub fn mask_path(&self, root: &Path) -> PathBuf {
        let stem = self.path.file_stem().unwrap_or_default().to_string_lossy();
        root.join(&self.path)
            .with_file_name(format!("{stem}{MASK_SUFFIX}.png"))
    }
}

/// How scanned files are divided into train/val/test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitRule {
    AllTrain,
    Stratified {
        train: f64,
        val: f64,
        seed: u64,
    },
}

impl SplitRule {
    pub fn default_stratified(seed: u64) -> Self {
        SplitRule::Stratified {
            train: 0.8,
            val: 0.1,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub classes: Vec<String>,
    pub splits: BTreeMap<Split, Vec<Entry>>,
    pub source_crop: Option<CropRect>,
}

#[derive(Serialize, Deserialize)]
struct ManifestFile {
    classes: Vec<String>,
    splits: BTreeMap<Split, Vec<(PathBuf, usize)>>,
    #[serde(default)]
    source_crop: Option<CropRect>,
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn is_mask(path: &Path) -> bool {
    path.file_stem()
        .map(|s| s.to_string_lossy().ends_with(MASK_SUFFIX))
        .unwrap_or(false)
}

fn sorted_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

/// Count per class of a split: round(n·train) train, round(n·val) val, rest test.
pub fn split_sizes(n: usize, train: f64, val: f64) -> (usize, usize, usize) {
    let n_train = ((n as f64) * train).round() as usize;
    let n_train = n_train.min(n);
    let n_val = (((n as f64) * val).round() as usize).min(n - n_train);
    (n_train, n_val, n - n_train - n_val)
}

/// Stratified seeded assignment of each class's files to splits.
pub fn partition(
    per_class: &[Vec<PathBuf>],
    rule: SplitRule,
) -> BTreeMap<Split, Vec<Entry>> {
    let mut splits: BTreeMap<Split, Vec<Entry>> =
        Split::ALL.iter().map(|s| (*s, Vec::new())).collect();
    for (label, files) in per_class.iter().enumerate() {
        match rule {
            SplitRule::AllTrain => {
                splits.get_mut(&Split::Train).unwrap().extend(
                    files.iter().map(|p| Entry {
                        path: p.clone(),
                        label,
                    }),
                );
            }
            SplitRule::Stratified { train, val, seed } => {
                let mut order: Vec<usize> = (0..files.len()).collect();
                order.shuffle(&mut rng_for(&[seed, stream::SPLIT, label as u64]));
                let (n_train, n_val, _) = split_sizes(files.len(), train, val);
                for (rank, &i) in order.iter().enumerate() {
                    let split = if rank < n_train {
                        Split::Train
                    } else if rank < n_train + n_val {
                        Split::Val
                    } else {
                        Split::Test
                    };
                    splits.get_mut(&split).unwrap().push(Entry {
                        path: files[i].clone(),
                        label,
                    });
                }
            }
        }
    }
    for entries in splits.values_mut() {
        entries.sort_by(|a, b| (a.label, &a.path).cmp(&(b.label, &b.path)));
    }
    splits
}

/// Scans `root/<class>/<image>` into a manifest with lexicographic class order.
pub fn scan_dataset(root: &Path, rule: SplitRule) -> Result<DatasetManifest> {
    let mut classes = Vec::new();
    let mut per_class = Vec::new();
    for dir in sorted_dir(root)? {
        if !dir.is_dir() {
            continue;
        }
        let name = dir.file_name().unwrap().to_string_lossy().to_string();
        let mut files = Vec::new();
        for path in sorted_dir(&dir)? {
            if !path.is_file() || !is_image(&path) || is_mask(&path) {
                continue;
            }
            image::ImageReader::open(&path)
                .map_err(|e| Error::io(&path, e))?
                .with_guessed_format()
                .map_err(|e| Error::io(&path, e))?
                .decode()
                .map_err(|e| Error::UndecodableImage {
                    path: path.clone(),
                    reason: e.to_string(),
                })?;
            files.push(path.strip_prefix(root).unwrap().to_path_buf());
        }
        if files.is_empty() {
            return Err(Error::EmptyClass(name));
        }
        classes.push(name);
        per_class.push(files);
    }
    if classes.is_empty() {
        return Err(Error::EmptyClass(root.display().to_string()));
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        classes,
        splits: partition(&per_class, rule),
        source_crop: None,
    })
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn entries(&self, split: Split) -> &[Entry] {
        self.splits.get(&split).map(|v| v.as_slice()).unwrap_or(&[])
    }

    pub fn class_counts(&self, split: Split) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for e in self.entries(split) {
            counts[e.label] += 1;
        }
        counts
    }

    /// Reads a manifest file; relative entry paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ManifestFile = serde_json::from_str(&text)?;
        let root = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let splits = file
            .splits
            .into_iter()
            .map(|(s, v)| {
                (
                    s,
                    v.into_iter()
                        .map(|(path, label)| Entry { path, label })
                        .collect(),
                )
            })
            .collect();
        let manifest = DatasetManifest {
            root,
            classes: file.classes,
            splits,
            source_crop: file.source_crop,
        };
        manifest.validate_structure()?;
        Ok(manifest)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ManifestFile {
            classes: self.classes.clone(),
            splits: self
                .splits
                .iter()
                .map(|(s, v)| (*s, v.iter().map(|e| (e.path.clone(), e.label)).collect()))
                .collect(),
            source_crop: self.source_crop,
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = self.to_json()?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    /// SHA-256 of the canonical manifest JSON; identical splits hash equal.
    pub fn checksum(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_json()?.as_bytes())))
    }

    /// Labels dense and in range, splits disjoint by path, crop valid.
    pub fn validate_structure(&self) -> Result<()> {
        let k = self.num_classes();
        let mut seen = HashSet::new();
        for entries in self.splits.values() {
            for e in entries {
                if e.label >= k {
                    return Err(Error::LabelOutOfRange {
                        label: e.label,
                        classes: k,
                    });
                }
                if !seen.insert(e.path.clone()) {
                    return Err(Error::InvalidSpec(format!(
                        "{} appears in more than one split",
                        e.path.display()
                    )));
                }
            }
        }
        if let Some(crop) = &self.source_crop {
            crop.validate()?;
        }
        Ok(())
    }

    /// Full check including that every file exists and decodes.
    pub fn validate(&self) -> Result<()> {
        self.validate_structure()?;
        for entries in self.splits.values() {
            for e in entries {
                ImageBuf::open(&self.root.join(&e.path))?;
            }
        }
        Ok(())
    }

    /// Decodes and preprocesses one entry, attaching its mask when present.
    pub fn load_sample(&self, entry: &Entry, split: Split, size: usize) -> Result<ImageSample> {
        let raw = ImageBuf::open(&self.root.join(&entry.path))?.to_rgb();
        let mask_path = entry.mask_path(&self.root);
        let mask = if mask_path.exists() {
            Some(ImageBuf::open(&mask_path)?)
        } else {
            None
        };
        let mut sample = ImageSample {
            id: entry.sample_id(),
            pixels: raw,
            label: entry.label,
            split,
            lesion_mask: mask.map(|m| {
                let mut m = ImageBuf::from_fn(m.height, m.width, 1, |y, x, _| m.get(y, x, 0));
                for v in &mut m.data {
                    *v = if *v >= 0.5 { 1.0 } else { 0.0 };
                }
                m
            }),
        };
        sample = preprocess(&sample, self.source_crop.as_ref(), size)?;
        Ok(sample)
    }

    pub fn load_split(&self, split: Split, size: usize) -> Result<Vec<ImageSample>> {
        self.entries(split)
            .iter()
            .map(|e| self.load_sample(e, split, size))
            .collect()
    }
}
