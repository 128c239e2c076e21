//! TOML run configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hoiprime::dataset::{DatasetOptions, SizeUnit};
use hoiprime::pipeline::ScoreSource;
use hoiprime::seed::{derive_seed, digest64};
use hoiprime::synth::{DetectorNoise, SceneSpec};
use hoiprime::training::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Dataset directory: written by `gen`, read by the other commands.
    pub data: PathBuf,
    /// Run directory for checkpoints and reports.
    pub out: PathBuf,
    pub variant: String,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub ablate: AblateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: "data".into(),
            out: "run".into(),
            variant: "standard".into(),
            dataset: DatasetSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            ablate: AblateSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// `layout` (layout rules only) or `appearance` (adds a colour-gated predicate).
    pub benchmark: String,
    /// Keep only these predicates, in this order.
    pub predicates: Option<Vec<String>>,
    pub n_train: usize,
    pub n_test: usize,
    pub unit: SizeUnit,
    /// `mild` or `none`.
    pub noise: String,
    pub background_ratio: Option<f64>,
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub image_size: Option<usize>,
    pub negative_pair_rate: Option<f64>,
    /// Triplet id (as a string key) to sampling multiplier.
    pub rare_multipliers: BTreeMap<String, f64>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            benchmark: "appearance".into(),
            predicates: None,
            n_train: 300,
            n_test: 100,
            unit: SizeUnit::Scenes,
            noise: "mild".into(),
            background_ratio: None,
            feature_dim: 16,
            embed_dim: 16,
            image_size: None,
            negative_pair_rate: None,
            rare_multipliers: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// `full`, `desk` or `tiny`.
    pub preset: String,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { preset: "desk".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// `high-lr` or `desk`; the fields below override it.
    pub preset: String,
    pub epochs: Option<usize>,
    pub lr0: Option<f64>,
    pub decay_every: Option<usize>,
    pub decay_factor: Option<f64>,
    pub batch_size: Option<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            preset: "desk".into(),
            epochs: None,
            lr0: None,
            decay_every: None,
            decay_factor: None,
            batch_size: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// `final` or `layout`.
    pub score: String,
    pub zero_shot: bool,
    /// Zero-shot split file; defaults to `<data>/split.json`.
    pub split_file: Option<PathBuf>,
    pub unseen_fraction: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            score: "final".into(),
            zero_shot: false,
            split_file: None,
            unseen_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    pub variants: Vec<String>,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self {
            variants: ["standard", "np", "nl", "nc"].map(String::from).to_vec(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Hash of every setting except the two directories, so a rerun into a
    /// fresh directory reports the same hash.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.data = PathBuf::new();
        c.out = PathBuf::new();
        let json = serde_json::to_vec(&c).expect("config serializes");
        format!("{:016x}", digest64(&json))
    }

    pub fn split_file(&self) -> PathBuf {
        self.eval.split_file.clone().unwrap_or_else(|| self.data.join("split.json"))
    }

    pub fn scene_spec(&self) -> Result<SceneSpec> {
        let d = &self.dataset;
        let mut spec = match d.benchmark.as_str() {
            "layout" => SceneSpec::layout_benchmark(),
            "appearance" => SceneSpec::with_appearance(),
            other => bail!("unknown benchmark {other:?}; use layout or appearance"),
        };
        if let Some(names) = &d.predicates {
            let mut picked = Vec::with_capacity(names.len());
            for n in names {
                let rule = spec
                    .predicates
                    .iter()
                    .find(|p| &p.name == n)
                    .with_context(|| format!("unknown predicate {n:?}"))?;
                picked.push(rule.clone());
            }
            spec.predicates = picked;
        }
        if let Some(s) = d.image_size {
            spec.image_size = s;
        }
        if let Some(r) = d.negative_pair_rate {
            spec.negative_pair_rate = r;
        }
        for (k, &m) in &d.rare_multipliers {
            let t: usize = k.parse().with_context(|| format!("rare multiplier key {k:?} is not a triplet id"))?;
            spec.rare_multipliers.insert(t, m);
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn dataset_options(&self) -> Result<DatasetOptions> {
        let d = &self.dataset;
        let mut o = DatasetOptions::new(derive_seed(self.seed, "dataset"), d.n_train, d.n_test);
        o.unit = d.unit;
        o.feature_dim = d.feature_dim;
        o.embed_dim = d.embed_dim;
        o.background_ratio = d.background_ratio;
        o.noise = match d.noise.as_str() {
            "mild" => DetectorNoise::mild(),
            "none" => DetectorNoise::none(),
            other => bail!("unknown noise model {other:?}; use mild or none"),
        };
        Ok(o)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        let seed = derive_seed(self.seed, "shuffle");
        let mut tc = TrainConfig::preset(&t.preset, seed)
            .with_context(|| format!("unknown train preset {:?}; use high-lr or desk", t.preset))?;
        if let Some(v) = t.epochs {
            tc.epochs = v;
        }
        if let Some(v) = t.lr0 {
            tc.lr0 = v;
        }
        if let Some(v) = t.decay_every {
            tc.decay_every = v;
        }
        if let Some(v) = t.decay_factor {
            tc.decay_factor = v;
        }
        if let Some(v) = t.batch_size {
            tc.batch_size = v;
        }
        tc.validate()?;
        Ok(tc)
    }

    pub fn score_source(&self) -> Result<ScoreSource> {
        match self.eval.score.as_str() {
            "final" => Ok(ScoreSource::Final),
            "layout" => Ok(ScoreSource::Layout),
            other => bail!("unknown score source {other:?}; use final or layout"),
        }
    }

    pub fn init_seed(&self) -> u64 {
        derive_seed(self.seed, "init")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults() {
        let c: RunConfig = toml::from_str("seed = 3\n[train]\nepochs = 2\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.train.epochs, Some(2));
        assert_eq!(c.model, ModelSection::default());
        assert_eq!(c.train_config().unwrap().epochs, 2);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("sed = 3\n").is_err());
    }

    #[test]
    fn hash_ignores_directories_but_not_settings() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.out = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn empty_predicate_list_is_invalid() {
        let mut c = RunConfig::default();
        c.dataset.predicates = Some(vec![]);
        assert!(c.scene_spec().is_err());
        c.dataset.predicates = Some(vec!["ride".into(), "hold".into()]);
        let s = c.scene_spec().unwrap();
        assert_eq!(s.predicates[0].name, "ride");
    }
}
