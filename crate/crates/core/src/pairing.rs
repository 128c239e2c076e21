//! Detector output, ground truth, and construction of human-object candidate pairs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{crop_resize, iou, rasterize_ip, union_box, BoxF, InteractionPattern};
use crate::tensor::Tensor;

/// Object-class index reserved for people.
pub const HUMAN_CLASS: usize = 0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PairError {
    #[error("object class {class} has no embedding ({available} available)")]
    MissingEmbedding { class: usize, available: usize },
    #[error("detection feature has length {got}, expected {expected}")]
    FeatureLength { expected: usize, got: usize },
    #[error("image must be [3, H, W], got {0:?}")]
    Image(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BoxF,
    pub class_id: usize,
    pub score: f64,
    /// RoI appearance feature reported by the detector.
    pub feature: Vec<f64>,
}

impl Detection {
    pub fn is_human(&self) -> bool {
        self.class_id == HUMAN_CLASS
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    #[serde(rename = "box")]
    pub bbox: BoxF,
    pub class_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtTriplet {
    pub human_box: BoxF,
    pub object_box: BoxF,
    pub object_class: usize,
    pub predicate: usize,
}

/// Ground truth of one image.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub boxes: Vec<GtBox>,
    pub triplets: Vec<GtTriplet>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairThresholds {
    /// Training detections need a score strictly above this.
    pub train_score: f64,
    /// ... and an IoU strictly above this with a same-class ground-truth box.
    pub train_gt_iou: f64,
    /// Test detections need a score strictly above this.
    pub test_score: f64,
    /// Human and object IoU needed to inherit a ground-truth predicate.
    pub label_iou: f64,
}

impl Default for PairThresholds {
    fn default() -> Self {
        Self {
            train_score: 0.75,
            train_gt_iou: 0.7,
            test_score: 0.9,
            label_iou: 0.5,
        }
    }
}

/// Index pair into a detection list plus an optional multi-hot target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub human: usize,
    pub object: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<Vec<f64>>,
}

/// Everything the network consumes for one (human, object) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct HoiPair {
    pub human: Detection,
    pub object: Detection,
    pub union: BoxF,
    pub ip: InteractionPattern,
    /// `[3, R, R]`
    pub union_crop: Tensor,
    /// Semantic embedding of the object class.
    pub w_o: Vec<f64>,
    pub target: Option<Vec<f64>>,
}

/// Inputs shared by every pair of a dataset.
#[derive(Debug, Clone, Copy)]
pub struct PairContext<'a> {
    pub resolution: usize,
    /// Indexed by object class.
    pub embeddings: &'a [Vec<f64>],
    pub feature_dim: usize,
}

impl HoiPair {
    pub fn build(
        human: &Detection,
        object: &Detection,
        image: &Tensor,
        ctx: &PairContext<'_>,
        target: Option<Vec<f64>>,
    ) -> Result<Self, PairError> {
        if image.shape().len() != 3 || image.shape()[0] != 3 {
            return Err(PairError::Image(image.shape().to_vec()));
        }
        for d in [human, object] {
            if d.feature.len() != ctx.feature_dim {
                return Err(PairError::FeatureLength {
                    expected: ctx.feature_dim,
                    got: d.feature.len(),
                });
            }
        }
        let w_o = ctx
            .embeddings
            .get(object.class_id)
            .ok_or(PairError::MissingEmbedding {
                class: object.class_id,
                available: ctx.embeddings.len(),
            })?
            .clone();
        let union = union_box(&human.bbox, &object.bbox);
        Ok(Self {
            human: human.clone(),
            object: object.clone(),
            union,
            ip: rasterize_ip(&human.bbox, &object.bbox, ctx.resolution),
            union_crop: crop_resize(image, &union, ctx.resolution),
            w_o,
            target,
        })
    }
}

/// Multi-hot predicate vector: predicate `p` is set iff a ground-truth triplet
/// with the pair's object class overlaps both boxes by more than `match_iou`.
pub fn label_pair(
    human: &BoxF,
    object: &BoxF,
    object_class: usize,
    triplets: &[GtTriplet],
    num_predicates: usize,
    match_iou: f64,
) -> Vec<f64> {
    let mut target = vec![0.0; num_predicates];
    for t in triplets {
        if t.object_class == object_class
            && t.predicate < num_predicates
            && iou(human, &t.human_box) > match_iou
            && iou(object, &t.object_box) > match_iou
        {
            target[t.predicate] = 1.0;
        }
    }
    target
}

fn all_pairs(dets: &[Detection], kept: &[usize]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for &h in kept.iter().filter(|&&i| dets[i].is_human()) {
        for &o in kept {
            if o != h {
                out.push((h, o));
            }
        }
    }
    out
}

/// Indices of detections usable for training.
pub fn training_detections(dets: &[Detection], gt: &GroundTruth, th: &PairThresholds) -> Vec<usize> {
    dets.iter()
        .enumerate()
        .filter(|(_, d)| {
            d.score > th.train_score
                && gt
                    .boxes
                    .iter()
                    .filter(|g| g.class_id == d.class_id)
                    .any(|g| iou(&d.bbox, &g.bbox) > th.train_gt_iou)
        })
        .map(|(i, _)| i)
        .collect()
}

/// Training candidates with targets filled from the ground truth.
pub fn training_candidates(
    dets: &[Detection],
    gt: &GroundTruth,
    num_predicates: usize,
    th: &PairThresholds,
) -> Vec<Candidate> {
    let kept = training_detections(dets, gt, th);
    all_pairs(dets, &kept)
        .into_iter()
        .map(|(h, o)| Candidate {
            human: h,
            object: o,
            target: Some(label_pair(
                &dets[h].bbox,
                &dets[o].bbox,
                dets[o].class_id,
                &gt.triplets,
                num_predicates,
                th.label_iou,
            )),
        })
        .collect()
}

/// Test candidates: every (human, other) pair among confident detections.
pub fn test_candidates(dets: &[Detection], th: &PairThresholds) -> Vec<Candidate> {
    let kept: Vec<usize> = dets
        .iter()
        .enumerate()
        .filter(|(_, d)| d.score > th.test_score)
        .map(|(i, _)| i)
        .collect();
    all_pairs(dets, &kept)
        .into_iter()
        .map(|(h, o)| Candidate {
            human: h,
            object: o,
            target: None,
        })
        .collect()
}

pub fn materialize(
    candidates: &[Candidate],
    dets: &[Detection],
    image: &Tensor,
    ctx: &PairContext<'_>,
) -> Result<Vec<HoiPair>, PairError> {
    candidates
        .iter()
        .map(|c| HoiPair::build(&dets[c.human], &dets[c.object], image, ctx, c.target.clone()))
        .collect()
}

pub fn make_training_pairs(
    dets: &[Detection],
    gt: &GroundTruth,
    image: &Tensor,
    ctx: &PairContext<'_>,
    num_predicates: usize,
    th: &PairThresholds,
) -> Result<Vec<HoiPair>, PairError> {
    let cands = training_candidates(dets, gt, num_predicates, th);
    materialize(&cands, dets, image, ctx)
}

pub fn make_test_pairs(
    dets: &[Detection],
    image: &Tensor,
    ctx: &PairContext<'_>,
    th: &PairThresholds,
) -> Result<Vec<HoiPair>, PairError> {
    materialize(&test_candidates(dets, th), dets, image, ctx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BoxF {
        BoxF::new(x1, y1, x2, y2).unwrap()
    }

    fn det(bbox: BoxF, class_id: usize, score: f64) -> Detection {
        Detection {
            bbox,
            class_id,
            score,
            feature: vec![0.0; 2],
        }
    }

    const RIDE: usize = 1;
    const HOLD: usize = 2;

    fn scene() -> GroundTruth {
        let h = b(10.0, 10.0, 30.0, 50.0);
        let horse = b(5.0, 35.0, 40.0, 60.0);
        GroundTruth {
            boxes: vec![
                GtBox {
                    bbox: h,
                    class_id: HUMAN_CLASS,
                },
                GtBox {
                    bbox: horse,
                    class_id: 3,
                },
            ],
            triplets: vec![GtTriplet {
                human_box: h,
                object_box: horse,
                object_class: 3,
                predicate: RIDE,
            }],
        }
    }

    #[test]
    fn exact_pair_gets_its_predicate_only() {
        let gt = scene();
        let t = label_pair(&gt.boxes[0].bbox, &gt.boxes[1].bbox, 3, &gt.triplets, 4, 0.5);
        assert_eq!(t, vec![0.0, 1.0, 0.0, 0.0]);
        let far = label_pair(&b(100.0, 100.0, 120.0, 140.0), &gt.boxes[1].bbox, 3, &gt.triplets, 4, 0.5);
        assert_eq!(far, vec![0.0; 4]);
        // wrong object class never inherits
        let t = label_pair(&gt.boxes[0].bbox, &gt.boxes[1].bbox, 2, &gt.triplets, 4, 0.5);
        assert_eq!(t, vec![0.0; 4]);
    }

    #[test]
    fn two_triplets_on_same_boxes_set_two_predicates() {
        let mut gt = scene();
        let mut second = gt.triplets[0];
        second.predicate = HOLD;
        gt.triplets.push(second);
        let t = label_pair(&gt.boxes[0].bbox, &gt.boxes[1].bbox, 3, &gt.triplets, 4, 0.5);
        assert_eq!(t, vec![0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn training_filters_apply_both_thresholds() {
        let gt = scene();
        let th = PairThresholds::default();
        let dets = vec![
            det(gt.boxes[0].bbox, HUMAN_CLASS, 0.95),
            det(gt.boxes[1].bbox, 3, 0.74),
            // IoU with the horse is 0.5
            det(b(5.0, 35.0, 40.0, 47.5), 3, 0.9),
        ];
        assert_eq!(iou(&dets[2].bbox, &gt.boxes[1].bbox), 0.5);
        assert_eq!(training_detections(&dets, &gt, &th), vec![0]);
        assert!(training_candidates(&dets, &gt, 4, &th).is_empty());
    }

    #[test]
    fn training_pairs_are_cartesian_minus_self() {
        let mut gt = GroundTruth::default();
        let mut dets = Vec::new();
        for i in 0..5 {
            let class = if i < 2 { HUMAN_CLASS } else { 1 };
            let bbox = b(i as f64 * 20.0, 0.0, i as f64 * 20.0 + 10.0, 10.0);
            gt.boxes.push(GtBox { bbox, class_id: class });
            dets.push(det(bbox, class, 0.9));
        }
        let cands = training_candidates(&dets, &gt, 3, &PairThresholds::default());
        // 2 humans x (2 humans + 3 objects) minus 2 self pairs
        assert_eq!(cands.len(), 2 * 5 - 2);
        assert!(cands.iter().all(|c| c.human != c.object));
        assert!(cands.iter().all(|c| c.target.as_ref().unwrap().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn test_filter_is_strict() {
        let th = PairThresholds::default();
        let dets = vec![
            det(b(0.0, 0.0, 10.0, 10.0), HUMAN_CLASS, 0.95),
            det(b(0.0, 0.0, 10.0, 10.0), 2, 0.89),
            det(b(0.0, 0.0, 10.0, 10.0), 2, 0.9),
        ];
        assert!(test_candidates(&dets, &th).is_empty());
        let dets = vec![
            det(b(0.0, 0.0, 10.0, 10.0), HUMAN_CLASS, 0.95),
            det(b(5.0, 0.0, 15.0, 10.0), 2, 0.91),
        ];
        assert_eq!(test_candidates(&dets, &th).len(), 1);
        let no_humans = vec![det(b(0.0, 0.0, 10.0, 10.0), 2, 0.99)];
        assert!(test_candidates(&no_humans, &th).is_empty());
    }

    #[test]
    fn build_checks_inputs() {
        let image = Tensor::full(&[3, 20, 20], 0.5);
        let emb = vec![vec![1.0, 0.0]; 3];
        let ctx = PairContext {
            resolution: 8,
            embeddings: &emb,
            feature_dim: 2,
        };
        let h = det(b(0.0, 0.0, 10.0, 20.0), HUMAN_CLASS, 1.0);
        let o = det(b(10.0, 10.0, 20.0, 20.0), 2, 1.0);
        let pair = HoiPair::build(&h, &o, &image, &ctx, None).unwrap();
        assert_eq!(pair.union, b(0.0, 0.0, 20.0, 20.0));
        assert_eq!(pair.union_crop.shape(), &[3, 8, 8]);
        assert_eq!(pair.ip.count(0), 32);
        let bad = det(o.bbox, 7, 1.0);
        assert!(matches!(
            HoiPair::build(&h, &bad, &image, &ctx, None),
            Err(PairError::MissingEmbedding { .. })
        ));
    }
}
