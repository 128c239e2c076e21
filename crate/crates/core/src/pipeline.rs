//! Dataset to trained model to evaluation report.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{Dataset, DatasetOptions};
use crate::eval::{
    aggregate, aggregate_zero_shot, evaluate, zero_shot_split, EvalReport, TripletDetection, ZeroShotSplit, RARE_THRESHOLD,
};
use crate::model::{compose_triplets, Batch, Model, ModelConfig, VariantSpec};
use crate::pairing::{materialize, test_candidates, Candidate, HoiPair, PairContext};
use crate::seed::derive_seed;
use crate::synth::{image_tensor, SceneSpec};
use crate::tensor::{Graph, Mode};
use crate::training::{
    class_weights, model_grad_check, predicate_counts, train, EpochLoss, LayerGradCheck, TrainConfig, TrainHistory,
};
use crate::Error;

/// Which logits rank the emitted triplets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreSource {
    /// Final visual-head logits.
    Final,
    /// Layout-branch prior logits alone.
    Layout,
}

/// Sets the dataset-dependent sizes of a preset.
pub fn model_config(preset: &str, ds: &Dataset) -> Result<ModelConfig, Error> {
    let spec = ds.spec();
    let mut c = ModelConfig::preset(preset, spec.num_predicates(), spec.num_objects())
        .ok_or_else(|| Error::Invalid(format!("unknown model preset {preset:?}; use full, desk or tiny")))?;
    c.embed_dim = ds.meta.options.embed_dim;
    c.det_feat_dim = ds.meta.options.feature_dim;
    Ok(c)
}

fn context<'a>(ds: &'a Dataset, resolution: usize) -> PairContext<'a> {
    PairContext {
        resolution,
        embeddings: &ds.embeddings,
        feature_dim: ds.meta.options.feature_dim,
    }
}

/// Materializes every recorded training pair.
pub fn training_pairs(ds: &Dataset, resolution: usize) -> Result<Vec<HoiPair>, Error> {
    let ctx = context(ds, resolution);
    let mut out = Vec::with_capacity(ds.train.num_pairs());
    for (r, img) in ds.train.records.iter().zip(&ds.train.images) {
        if r.pairs.is_empty() {
            continue;
        }
        let cands: Vec<Candidate> = r
            .pairs
            .iter()
            .map(|p| Candidate {
                human: p.human,
                object: p.object,
                target: Some(p.target.clone()),
            })
            .collect();
        out.extend(materialize(&cands, &r.detections, &image_tensor(img), &ctx)?);
    }
    Ok(out)
}

/// Scores every test candidate pair and emits one triplet per predicate.
pub fn detect(model: &Model, ds: &Dataset, source: ScoreSource, batch_size: usize) -> Result<Vec<TripletDetection>, Error> {
    if source == ScoreSource::Layout && !model.variant().priming {
        return Err(Error::Invalid("layout scores need a variant with priming".into()));
    }
    let cfg = model.config();
    let ctx = context(ds, cfg.resolution);
    let th = ds.meta.options.thresholds;
    let mut out = Vec::new();
    for (r, img) in ds.test.records.iter().zip(&ds.test.images) {
        let cands = test_candidates(&r.detections, &th);
        if cands.is_empty() {
            continue;
        }
        let pairs = materialize(&cands, &r.detections, &image_tensor(img), &ctx)?;
        for chunk in pairs.chunks(batch_size.max(1)) {
            let refs: Vec<&HoiPair> = chunk.iter().collect();
            let batch = Batch::from_pairs(&refs)?;
            let mut g = Graph::new(Mode::Eval);
            let outs = model.forward(&mut g, &batch)?;
            let logits = match source {
                ScoreSource::Final => outs.p2,
                ScoreSource::Layout => outs.p1.expect("priming checked"),
            };
            let z = g.value(logits);
            let p = cfg.num_predicates;
            for (i, pair) in chunk.iter().enumerate() {
                let row = &z.data()[i * p..(i + 1) * p];
                for (triplet, score) in compose_triplets(
                    row,
                    pair.object.class_id,
                    cfg.num_objects,
                    pair.human.score,
                    pair.object.score,
                ) {
                    out.push(TripletDetection {
                        scene_id: r.scene_id.clone(),
                        human_box: pair.human.bbox,
                        object_box: pair.object.bbox,
                        triplet,
                        score,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Builds a model from `init_seed` and trains it on the dataset's training pairs.
pub fn train_model(
    ds: &Dataset,
    config: &ModelConfig,
    variant: &VariantSpec,
    tc: &TrainConfig,
    init_seed: u64,
    on_epoch: impl FnMut(&EpochLoss),
) -> Result<(Model, TrainHistory), Error> {
    let mut model = Model::build(config, variant, init_seed)?;
    let pairs = training_pairs(ds, config.resolution)?;
    let weights = class_weights(&predicate_counts(&pairs, config.num_predicates))?;
    let history = train(&mut model, &pairs, &weights, tc, on_epoch)?;
    Ok((model, history))
}

/// Full/Rare/Non-rare report, or Unseen/Seen/All when a zero-shot split is given.
pub fn evaluate_model(
    model: &Model,
    ds: &Dataset,
    source: ScoreSource,
    zero_shot: Option<&ZeroShotSplit>,
) -> Result<EvalReport, Error> {
    let dets = detect(model, ds, source, 64)?;
    score_detections(ds, &dets, zero_shot)
}

pub fn score_detections(
    ds: &Dataset,
    dets: &[TripletDetection],
    zero_shot: Option<&ZeroShotSplit>,
) -> Result<EvalReport, Error> {
    let results = evaluate(dets, &ds.test_gt(), ds.num_triplets(), ds.meta.options.thresholds.label_iou)?;
    Ok(match zero_shot {
        Some(split) => aggregate_zero_shot(results, split),
        None => aggregate(results, &ds.train_counts(), RARE_THRESHOLD),
    })
}

/// Withholds `fraction` of the triplets present in the training split,
/// sampled with the `split` substream of `seed`.
pub fn sample_zero_shot(ds: &Dataset, fraction: f64, seed: u64) -> Result<ZeroShotSplit, Error> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Invalid(format!("unseen fraction {fraction} outside [0, 1)")));
    }
    let present = ds.present_triplets();
    let n_unseen = (fraction * present.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "split"));
    Ok(zero_shot_split(&present, ds.spec().num_objects(), n_unseen, &mut rng)?)
}

/// Layers checked by [`end_to_end_grad_check`]: laterals and both heads.
pub const GRAD_CHECK_LAYERS: [&str; 7] = [
    "lateral1",
    "lateral2",
    "lateral3",
    "layout.head.fc1",
    "layout.head.out",
    "visual.head.fc1",
    "visual.head.out",
];

/// Joint-loss gradient check of a Standard model of `preset` on a small
/// batch of real synthetic pairs.
pub fn end_to_end_grad_check(preset: &str, seed: u64) -> Result<Vec<LayerGradCheck>, Error> {
    let mut opts = DatasetOptions::new(derive_seed(seed, "dataset"), 4, 1);
    opts.feature_dim = 16;
    opts.embed_dim = 16;
    let ds = Dataset::generate(&SceneSpec::with_appearance(), &opts)?;
    let config = model_config(preset, &ds)?;
    let model = Model::build(&config, &VariantSpec::standard(), derive_seed(seed, "init"))?;
    let pairs = training_pairs(&ds, config.resolution)?;
    let refs: Vec<&HoiPair> = pairs.iter().take(4).collect();
    if refs.len() < 2 {
        return Err(Error::Invalid("too few training pairs for a gradient check".into()));
    }
    let batch = Batch::from_pairs(&refs)?;
    let weights = vec![1.0; config.num_predicates];
    Ok(model_grad_check(&model, &batch, &weights, &GRAD_CHECK_LAYERS, 8, 1e-5)?)
}
