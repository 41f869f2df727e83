use rand::seq::SliceRandom;
use sha2::{Digest, Sha256};

use crate::config::{Config, DataSource};
use crate::datasets::{preprocess, scan_dataset, synthesize_samples, DatasetManifest, ImageSample, Split, SplitRule};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Preprocessed samples of all splits.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub train: Vec<ImageSample>,
    pub val: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
    /// Digest of every `(split, id, label)` triple.
    pub checksum: String,
}

impl Dataset {
    pub fn from_samples(classes: Vec<String>, samples: Vec<ImageSample>) -> Self {
        let mut ds = Self { classes, train: Vec::new(), val: Vec::new(), test: Vec::new(), checksum: String::new() };
        for s in samples {
            match s.split {
                Split::Train => ds.train.push(s),
                Split::Val => ds.val.push(s),
                Split::Test => ds.test.push(s),
            }
        }
        ds.checksum = ds.compute_checksum();
        ds
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn split(&self, split: Split) -> &[ImageSample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn compute_checksum(&self) -> String {
        let mut h = Sha256::new();
        for c in &self.classes {
            h.update(c.as_bytes());
            h.update(b"\n");
        }
        for split in Split::ALL {
            for s in self.split(split) {
                h.update(format!("{}\t{}\t{}\n", split.as_str(), s.id, s.label).as_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

fn from_manifest(manifest: &DatasetManifest, size: usize) -> Result<Dataset> {
    let mut samples = Vec::new();
    for split in Split::ALL {
        samples.extend(manifest.load_split(split, size)?);
    }
    Ok(Dataset::from_samples(manifest.classes.clone(), samples))
}

pub fn load_dataset(cfg: &Config) -> Result<Dataset> {
    let size = cfg.backbone.input_size;
    match cfg.data.source {
        DataSource::Manifest => from_manifest(&DatasetManifest::load(&cfg.data.path)?, size),
        DataSource::Folder => {
            let rule = SplitRule::Stratified {
                train: cfg.data.train_fraction,
                val: cfg.data.val_fraction,
                seed: cfg.data.split_seed,
            };
            from_manifest(&scan_dataset(&cfg.data.path, rule)?, size)
        }
        DataSource::Synthetic => {
            let raw = synthesize_samples(&cfg.synth, None)?;
            let samples = raw.iter().map(|s| preprocess(s, None, size)).collect::<Result<Vec<_>>>()?;
            Ok(Dataset::from_samples(cfg.synth.class_names(), samples))
        }
    }
}

/// Class-balanced batches: classes are visited round-robin in a shuffled
/// order, each drawing from its own reshuffled queue, so every batch of at
/// least two samples holds at least two classes.
pub fn balanced_batches(labels: &[usize], num_classes: usize, batch_size: usize, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= num_classes {
            return Err(Error::LabelOutOfRange { label: y, classes: num_classes });
        }
        by_class[y].push(i);
    }
    let present: Vec<usize> = (0..num_classes).filter(|c| !by_class[*c].is_empty()).collect();
    if present.len() < 2 {
        return Err(Error::Config("representation training needs at least two classes in the train split".into()));
    }
    let mut queues: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    let steps = labels.len().div_ceil(batch_size);
    let mut batches = Vec::with_capacity(steps);
    let mut order = present.clone();
    let mut cursor = order.len();
    for _ in 0..steps {
        let mut batch = Vec::with_capacity(batch_size);
        while batch.len() < batch_size {
            if cursor == order.len() {
                order.shuffle(rng);
                cursor = 0;
            }
            let c = order[cursor];
            cursor += 1;
            if queues[c].is_empty() {
                queues[c] = by_class[c].clone();
                queues[c].shuffle(rng);
            }
            batch.push(queues[c].pop().unwrap());
        }
        batches.push(batch);
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    #[test]
    fn batches_always_mix_classes() {
        let labels: Vec<usize> = (0..103).map(|i| if i < 95 { 0 } else { 1 + i % 3 }).collect();
        let mut rng = rng_for(&[1]);
        let batches = balanced_batches(&labels, 4, 8, &mut rng).unwrap();
        assert_eq!(batches.len(), 13);
        for b in &batches {
            assert_eq!(b.len(), 8);
            let first = labels[b[0]];
            assert!(b.iter().any(|&i| labels[i] != first));
        }
        let again = balanced_batches(&labels, 4, 8, &mut rng_for(&[1])).unwrap();
        assert_eq!(batches, again);
    }

    #[test]
    fn single_class_data_is_rejected() {
        assert!(balanced_batches(&[0, 0, 0], 2, 2, &mut rng_for(&[1])).is_err());
    }

    #[test]
    fn synthetic_source_loads_all_splits() {
        let mut cfg = Config::default();
        cfg.data.source = DataSource::Synthetic;
        cfg.synth.n_per_class = 10;
        cfg.synth.image_size = 40;
        cfg.backbone.input_size = 32;
        let ds = load_dataset(&cfg).unwrap();
        assert_eq!(ds.train.len() + ds.val.len() + ds.test.len(), 50);
        assert_eq!(ds.train[0].pixels.height, 32);
        assert_eq!(ds.checksum, load_dataset(&cfg).unwrap().checksum);
    }
}
