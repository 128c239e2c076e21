//! Synthetic datasets in memory and on disk.
//!
//! A dataset directory holds `dataset.json` (generation settings),
//! `train.jsonl` / `test.jsonl` (one scene per line), `images/*.png`,
//! `counts.json` (triplet id to training count) and `embeddings.json`
//! (class id to vector).

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::eval::{GtInstance, ZeroShotSplit};
use crate::model::triplet_id;
use crate::pairing::{training_candidates, test_candidates, Detection, GroundTruth, PairThresholds};
use crate::seed::derive_seed;
use crate::synth::{generate_scene, pseudo_embeddings, simulate_detector, DetectorNoise, SceneSpec};
use crate::Error;

/// A training pair by detection index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub human: usize,
    pub object: usize,
    pub target: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub scene_id: String,
    /// Image path relative to the dataset directory.
    pub image: String,
    pub detections: Vec<Detection>,
    pub gt: GroundTruth,
    /// Training pairs; empty for test scenes.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pairs: Vec<PairRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeUnit {
    Scenes,
    /// Generate scenes until the candidate-pair count reaches the target.
    Pairs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetOptions {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub unit: SizeUnit,
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub noise: DetectorNoise,
    /// Keep at most this many negative training pairs per positive one.
    #[serde(default)]
    pub background_ratio: Option<f64>,
    pub thresholds: PairThresholds,
}

impl DatasetOptions {
    pub fn new(seed: u64, n_train: usize, n_test: usize) -> Self {
        Self {
            seed,
            n_train,
            n_test,
            unit: SizeUnit::Scenes,
            feature_dim: 32,
            embed_dim: 32,
            noise: DetectorNoise::mild(),
            background_ratio: None,
            thresholds: PairThresholds::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub spec: SceneSpec,
    pub options: DatasetOptions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub records: Vec<SceneRecord>,
    pub images: Vec<RgbImage>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_pairs(&self) -> usize {
        self.records.iter().map(|r| r.pairs.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    /// Indexed by class id.
    pub embeddings: Vec<Vec<f64>>,
    pub train: Split,
    pub test: Split,
}

fn generate_split(
    spec: &SceneSpec,
    opts: &DatasetOptions,
    name: &str,
    target: usize,
    train: bool,
) -> Split {
    let num_p = spec.num_predicates();
    let mut split = Split {
        records: Vec::new(),
        images: Vec::new(),
    };
    let mut pairs = 0;
    let mut index = 0;
    let done = |scenes: usize, pairs: usize| match opts.unit {
        SizeUnit::Scenes => scenes >= target,
        SizeUnit::Pairs => pairs >= target,
    };
    while !done(split.len(), pairs) {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, &format!("scene/{name}/{index}")));
        let scene = generate_scene(spec, &mut rng);
        let mut det_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, &format!("detector/{name}/{index}")));
        let detections = simulate_detector(
            &scene.gt,
            spec.image_size,
            spec.num_objects(),
            opts.feature_dim,
            &opts.noise,
            &mut det_rng,
        );
        let pair_records: Vec<PairRecord> = if train {
            training_candidates(&detections, &scene.gt, num_p, &opts.thresholds)
                .into_iter()
                .map(|c| PairRecord {
                    human: c.human,
                    object: c.object,
                    target: c.target.unwrap_or_default(),
                })
                .collect()
        } else {
            Vec::new()
        };
        pairs += if train {
            pair_records.len()
        } else {
            test_candidates(&detections, &opts.thresholds).len()
        };
        let scene_id = format!("{name}_{index:06}");
        split.records.push(SceneRecord {
            image: format!("images/{scene_id}.png"),
            scene_id,
            detections,
            gt: scene.gt,
            pairs: pair_records,
        });
        split.images.push(scene.image);
        index += 1;
    }
    split
}

/// Drops negative training pairs at random until there are at most
/// `ratio` negatives per positive over the whole split.
fn cap_negatives(split: &mut Split, ratio: f64, seed: u64) {
    let is_neg = |p: &PairRecord| p.target.iter().all(|&t| t == 0.0);
    let mut negatives: Vec<(usize, usize)> = Vec::new();
    let mut positives = 0usize;
    for (s, r) in split.records.iter().enumerate() {
        for (k, p) in r.pairs.iter().enumerate() {
            if is_neg(p) {
                negatives.push((s, k));
            } else {
                positives += 1;
            }
        }
    }
    let keep = (ratio * positives as f64).floor() as usize;
    if negatives.len() <= keep {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "background"));
    negatives.shuffle(&mut rng);
    let mut drop: Vec<Vec<usize>> = vec![Vec::new(); split.records.len()];
    for &(s, k) in &negatives[keep..] {
        drop[s].push(k);
    }
    for (r, d) in split.records.iter_mut().zip(drop) {
        let mut k = 0;
        r.pairs.retain(|_| {
            let keep = !d.contains(&k);
            k += 1;
            keep
        });
    }
}

impl Dataset {
    pub fn generate(spec: &SceneSpec, opts: &DatasetOptions) -> Result<Self, Error> {
        spec.validate()?;
        opts.noise.validate()?;
        if opts.n_train == 0 || opts.n_test == 0 {
            return Err(Error::Invalid("n_train and n_test must be positive".into()));
        }
        if opts.feature_dim == 0 {
            return Err(Error::Invalid("feature_dim must be positive".into()));
        }
        if let Some(r) = opts.background_ratio {
            if !(r >= 0.0 && r.is_finite()) {
                return Err(Error::Invalid(format!("background_ratio {r} must be non-negative")));
            }
        }
        let groups: Vec<usize> = spec.classes.iter().map(|c| c.group).collect();
        let embeddings = pseudo_embeddings(&groups, opts.embed_dim)?;
        let mut train = generate_split(spec, opts, "train", opts.n_train, true);
        if let Some(r) = opts.background_ratio {
            cap_negatives(&mut train, r, opts.seed);
        }
        let test = generate_split(spec, opts, "test", opts.n_test, false);
        Ok(Self {
            meta: DatasetMeta {
                spec: spec.clone(),
                options: opts.clone(),
            },
            embeddings,
            train,
            test,
        })
    }

    pub fn spec(&self) -> &SceneSpec {
        &self.meta.spec
    }

    pub fn num_triplets(&self) -> usize {
        self.spec().num_triplets()
    }

    /// Ground-truth triplet instances per triplet id in the training split.
    pub fn train_counts(&self) -> Vec<usize> {
        let o = self.spec().num_objects();
        let mut counts = vec![0; self.num_triplets()];
        for r in &self.train.records {
            for t in &r.gt.triplets {
                counts[triplet_id(t.predicate, t.object_class, o)] += 1;
            }
        }
        counts
    }

    /// Triplet ids that occur in either split.
    pub fn present_triplets(&self) -> Vec<usize> {
        let o = self.spec().num_objects();
        let mut ids: Vec<usize> = self
            .train
            .records
            .iter()
            .chain(&self.test.records)
            .flat_map(|r| r.gt.triplets.iter())
            .map(|t| triplet_id(t.predicate, t.object_class, o))
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Removes every training scene that contains an unseen triplet.
    pub fn withhold(&mut self, split: &ZeroShotSplit) {
        let o = self.spec().num_objects();
        let keep: Vec<bool> = self
            .train
            .records
            .iter()
            .map(|r| {
                !r.gt
                    .triplets
                    .iter()
                    .any(|t| split.is_unseen(triplet_id(t.predicate, t.object_class, o)))
            })
            .collect();
        let mut it = keep.iter();
        self.train.records.retain(|_| *it.next().expect("same length"));
        let mut it = keep.iter();
        self.train.images.retain(|_| *it.next().expect("same length"));
    }

    pub fn test_gt(&self) -> Vec<GtInstance> {
        let o = self.spec().num_objects();
        self.test
            .records
            .iter()
            .flat_map(|r| {
                r.gt.triplets.iter().map(move |t| GtInstance {
                    scene_id: r.scene_id.clone(),
                    human_box: t.human_box,
                    object_box: t.object_box,
                    triplet: triplet_id(t.predicate, t.object_class, o),
                })
            })
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<(), Error> {
        fs::create_dir_all(dir.join("images"))?;
        write_json(&dir.join("dataset.json"), &self.meta)?;
        let emb: BTreeMap<usize, &Vec<f64>> = self.embeddings.iter().enumerate().collect();
        write_json(&dir.join("embeddings.json"), &emb)?;
        let counts: BTreeMap<usize, usize> = self.train_counts().into_iter().enumerate().collect();
        write_json(&dir.join("counts.json"), &counts)?;
        for (name, split) in [("train", &self.train), ("test", &self.test)] {
            let mut w = BufWriter::new(File::create(dir.join(format!("{name}.jsonl")))?);
            for (r, img) in split.records.iter().zip(&split.images) {
                serde_json::to_writer(&mut w, r)?;
                w.write_all(b"\n")?;
                img.save(dir.join(&r.image))?;
            }
            w.flush()?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, Error> {
        let meta: DatasetMeta = read_json(&dir.join("dataset.json"))?;
        let emb: BTreeMap<usize, Vec<f64>> = read_json(&dir.join("embeddings.json"))?;
        if emb.keys().copied().ne(0..emb.len()) {
            return Err(Error::Invalid("embeddings must cover class ids 0..n".into()));
        }
        let embeddings: Vec<Vec<f64>> = emb.into_values().collect();
        let read_split = |name: &str| -> Result<Split, Error> {
            let path = dir.join(format!("{name}.jsonl"));
            let f = BufReader::new(File::open(&path)?);
            let mut split = Split {
                records: Vec::new(),
                images: Vec::new(),
            };
            for (n, line) in f.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let r: SceneRecord = serde_json::from_str(&line).map_err(|e| {
                    Error::Invalid(format!("{}:{}: {e}", path.display(), n + 1))
                })?;
                let img = image::open(dir.join(&r.image))?.to_rgb8();
                split.records.push(r);
                split.images.push(img);
            }
            Ok(split)
        };
        Ok(Self {
            meta,
            embeddings,
            train: read_split("train")?,
            test: read_split("test")?,
        })
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Error> {
    let f = File::open(path).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
    serde_json::from_reader(BufReader::new(f))
        .map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))
}
