//! Triplet matching, average precision and split-wise mean AP.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{iou, BoxF};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("zero-shot split infeasible: {0}")]
    Constraint(String),
    #[error("triplet class {class} out of range (have {num_classes})")]
    ClassRange { class: usize, num_classes: usize },
}

/// A scored ⟨human, predicate, object⟩ detection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletDetection {
    pub scene_id: String,
    pub human_box: BoxF,
    pub object_box: BoxF,
    /// `predicate * num_objects + object_class`
    pub triplet: usize,
    pub score: f64,
}

/// A ground-truth triplet instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtInstance {
    pub scene_id: String,
    pub human_box: BoxF,
    pub object_box: BoxF,
    pub triplet: usize,
}

fn eligible(det: &TripletDetection, gt: &GtInstance, iou_min: f64) -> Option<f64> {
    if det.scene_id != gt.scene_id {
        return None;
    }
    let h = iou(&det.human_box, &gt.human_box);
    let o = iou(&det.object_box, &gt.object_box);
    (h > iou_min && o > iou_min).then_some(h.min(o))
}

/// Sorts by descending score; equal scores keep their input order.
pub fn sort_by_score(dets: &mut [TripletDetection]) {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
}

/// Matches score-ordered detections of one class against its ground truth.
///
/// Each detection takes the unmatched eligible ground truth with the largest
/// `min(human IoU, object IoU)`. When every eligible ground truth is taken, an
/// alternating-path search reassigns earlier detections if that frees one, so
/// the number of true positives within every score prefix is the largest any
/// one-to-one matching allows. Returns one true-positive flag per detection.
pub fn match_class(dets: &[TripletDetection], gts: &[GtInstance], iou_min: f64) -> Vec<bool> {
    let adj: Vec<Vec<(usize, f64)>> = dets
        .iter()
        .map(|d| {
            let mut e: Vec<(usize, f64)> = gts
                .iter()
                .enumerate()
                .filter_map(|(j, g)| eligible(d, g, iou_min).map(|q| (j, q)))
                .collect();
            // best overlap first; equal overlaps keep ground-truth order
            e.sort_by(|a, b| b.1.total_cmp(&a.1));
            e
        })
        .collect();
    let mut owner: Vec<Option<usize>> = vec![None; gts.len()];
    let mut flags = Vec::with_capacity(dets.len());
    for i in 0..dets.len() {
        if let Some(&(j, _)) = adj[i].iter().find(|(j, _)| owner[*j].is_none()) {
            owner[j] = Some(i);
            flags.push(true);
            continue;
        }
        let mut seen = vec![false; gts.len()];
        flags.push(augment(i, &adj, &mut owner, &mut seen));
    }
    flags
}

fn augment(i: usize, adj: &[Vec<(usize, f64)>], owner: &mut [Option<usize>], seen: &mut [bool]) -> bool {
    for &(j, _) in &adj[i] {
        if seen[j] {
            continue;
        }
        seen[j] = true;
        let free = match owner[j] {
            None => true,
            Some(k) => augment(k, adj, owner, seen),
        };
        if free {
            owner[j] = Some(i);
            return true;
        }
    }
    false
}

/// All-point interpolated AP of score-ordered flags; `None` when `n_gt == 0`.
pub fn average_precision(flags: &[bool], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    for (k, &f) in flags.iter().enumerate() {
        tp += usize::from(f);
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev) * p;
        prev = *r;
    }
    Some(ap)
}

/// Per-class AP over all scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassResults {
    /// `None` for classes without test ground truth.
    pub ap: Vec<Option<f64>>,
    pub n_gt: Vec<usize>,
}

pub fn evaluate(
    dets: &[TripletDetection],
    gts: &[GtInstance],
    num_classes: usize,
    iou_min: f64,
) -> Result<ClassResults, EvalError> {
    let mut det_by: Vec<Vec<TripletDetection>> = vec![Vec::new(); num_classes];
    let mut gt_by: Vec<Vec<GtInstance>> = vec![Vec::new(); num_classes];
    for d in dets {
        det_by
            .get_mut(d.triplet)
            .ok_or(EvalError::ClassRange {
                class: d.triplet,
                num_classes,
            })?
            .push(d.clone());
    }
    for g in gts {
        gt_by
            .get_mut(g.triplet)
            .ok_or(EvalError::ClassRange {
                class: g.triplet,
                num_classes,
            })?
            .push(g.clone());
    }
    let mut ap = Vec::with_capacity(num_classes);
    for (mut d, g) in det_by.into_iter().zip(&gt_by) {
        sort_by_score(&mut d);
        let flags = match_class(&d, g, iou_min);
        ap.push(average_precision(&flags, g.len()));
    }
    Ok(ClassResults {
        ap,
        n_gt: gt_by.iter().map(Vec::len).collect(),
    })
}

/// Mean AP over one subset of classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMap {
    pub name: String,
    /// `None` when no class of the split has test ground truth.
    pub map: Option<f64>,
    /// Classes of the split that were averaged.
    pub classes: usize,
}

fn split_map(name: &str, ap: &[Option<f64>], member: impl Fn(usize) -> bool) -> SplitMap {
    let vals: Vec<f64> = ap
        .iter()
        .enumerate()
        .filter(|(c, _)| member(*c))
        .filter_map(|(_, a)| *a)
        .collect();
    SplitMap {
        name: name.to_string(),
        map: (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64),
        classes: vals.len(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub results: ClassResults,
    pub splits: Vec<SplitMap>,
}

impl EvalReport {
    pub fn split(&self, name: &str) -> Option<&SplitMap> {
        self.splits.iter().find(|s| s.name == name)
    }

    pub fn map(&self, name: &str) -> Option<f64> {
        self.split(name).and_then(|s| s.map)
    }

    /// One header row of split names and one row of percentages.
    pub fn table(&self) -> String {
        let header: Vec<String> = self.splits.iter().map(|s| format!("{:>9}", s.name)).collect();
        let row: Vec<String> = self
            .splits
            .iter()
            .map(|s| match s.map {
                Some(m) => format!("{:>9.2}", 100.0 * m),
                None => format!("{:>9}", "-"),
            })
            .collect();
        format!("{}\n{}\n", header.join(" "), row.join(" "))
    }
}

pub const RARE_THRESHOLD: usize = 10;

/// Full, Rare (fewer than `rare_threshold` training instances) and Non-rare.
pub fn aggregate(results: ClassResults, train_counts: &[usize], rare_threshold: usize) -> EvalReport {
    let rare = |c: usize| train_counts.get(c).copied().unwrap_or(0) < rare_threshold;
    let splits = vec![
        split_map("Full", &results.ap, |_| true),
        split_map("Rare", &results.ap, rare),
        split_map("Non-rare", &results.ap, |c| !rare(c)),
    ];
    EvalReport { results, splits }
}

/// Unseen, Seen and All.
pub fn aggregate_zero_shot(results: ClassResults, split: &ZeroShotSplit) -> EvalReport {
    let unseen: std::collections::HashSet<usize> = split.unseen.iter().copied().collect();
    let splits = vec![
        split_map("Unseen", &results.ap, |c| unseen.contains(&c)),
        split_map("Seen", &results.ap, |c| !unseen.contains(&c)),
        split_map("All", &results.ap, |_| true),
    ];
    EvalReport { results, splits }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Seen,
    Unseen,
}

/// Triplet classes withheld from training.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ZeroShotSplit {
    pub num_objects: usize,
    pub seen: Vec<usize>,
    pub unseen: Vec<usize>,
}

impl ZeroShotSplit {
    /// Split-file form: triplet id to `seen` / `unseen`.
    pub fn to_map(&self) -> BTreeMap<usize, SplitTag> {
        let mut m = BTreeMap::new();
        m.extend(self.seen.iter().map(|&c| (c, SplitTag::Seen)));
        m.extend(self.unseen.iter().map(|&c| (c, SplitTag::Unseen)));
        m
    }

    pub fn from_map(map: &BTreeMap<usize, SplitTag>, num_objects: usize) -> Result<Self, EvalError> {
        let pick = |t| map.iter().filter(|(_, v)| **v == t).map(|(k, _)| *k).collect();
        let s = Self {
            num_objects,
            seen: pick(SplitTag::Seen),
            unseen: pick(SplitTag::Unseen),
        };
        s.check()?;
        Ok(s)
    }

    pub fn is_unseen(&self, triplet: usize) -> bool {
        self.unseen.contains(&triplet)
    }

    /// Every object class with any triplet keeps at least one seen triplet.
    pub fn check(&self) -> Result<(), EvalError> {
        let mut seen_per_object: HashMap<usize, usize> = HashMap::new();
        for &c in &self.seen {
            *seen_per_object.entry(c % self.num_objects).or_default() += 1;
        }
        for &c in &self.unseen {
            let o = c % self.num_objects;
            if seen_per_object.get(&o).copied().unwrap_or(0) == 0 {
                return Err(EvalError::Constraint(format!(
                    "object class {o} has no seen triplet"
                )));
            }
        }
        Ok(())
    }
}

/// Samples `n_unseen` of `classes` to withhold, spreading them as evenly over
/// object classes as possible while every object keeps a seen triplet.
pub fn zero_shot_split<R: Rng>(
    classes: &[usize],
    num_objects: usize,
    n_unseen: usize,
    rng: &mut R,
) -> Result<ZeroShotSplit, EvalError> {
    let mut by_object: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &c in classes {
        by_object.entry(c % num_objects).or_default().push(c);
    }
    let capacity: usize = by_object.values().map(|v| v.len() - 1).sum();
    if n_unseen > capacity {
        return Err(EvalError::Constraint(format!(
            "{n_unseen} unseen classes requested but only {capacity} can be withheld \
             while every object keeps a seen triplet"
        )));
    }
    let mut objects: Vec<usize> = by_object.keys().copied().collect();
    objects.shuffle(rng);
    for v in by_object.values_mut() {
        v.shuffle(rng);
    }
    let mut taken: HashMap<usize, usize> = HashMap::new();
    let mut unseen = Vec::with_capacity(n_unseen);
    while unseen.len() < n_unseen {
        // object with the fewest withheld so far that can still spare one;
        // ties go to the earlier object in the shuffled order
        let o = *objects
            .iter()
            .filter(|o| taken.get(o).copied().unwrap_or(0) + 1 < by_object[o].len())
            .min_by_key(|o| taken.get(o).copied().unwrap_or(0))
            .expect("capacity checked");
        let k = taken.entry(o).or_default();
        unseen.push(by_object[&o][*k]);
        *k += 1;
    }
    unseen.sort_unstable();
    let mut seen: Vec<usize> = classes.iter().copied().filter(|c| !unseen.contains(c)).collect();
    seen.sort_unstable();
    Ok(ZeroShotSplit {
        num_objects,
        seen,
        unseen,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BoxF {
        BoxF::new(x1, y1, x2, y2).unwrap()
    }

    fn det(h: BoxF, o: BoxF, score: f64) -> TripletDetection {
        TripletDetection {
            scene_id: "s".into(),
            human_box: h,
            object_box: o,
            triplet: 0,
            score,
        }
    }

    fn gt(h: BoxF, o: BoxF) -> GtInstance {
        GtInstance {
            scene_id: "s".into(),
            human_box: h,
            object_box: o,
            triplet: 0,
        }
    }

    #[test]
    fn reference_ap_values() {
        assert_eq!(average_precision(&[true], 1), Some(1.0));
        let ap = average_precision(&[true, false, true], 2).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert_eq!(average_precision(&[false, false], 3), Some(0.0));
        assert_eq!(average_precision(&[], 0), None);
        assert_eq!(average_precision(&[], 2), Some(0.0));
    }

    #[test]
    fn matching_rules() {
        let h = b(0.0, 0.0, 10.0, 20.0);
        let o = b(10.0, 5.0, 20.0, 15.0);
        assert_eq!(match_class(&[det(h, o, 0.9)], &[gt(h, o)], 0.5), vec![true]);
        // human overlaps, object overlap 0.4
        let o_shift = b(14.2857, 5.0, 24.2857, 15.0);
        assert!(iou(&o, &o_shift) < 0.5);
        assert_eq!(match_class(&[det(h, o_shift, 0.9)], &[gt(h, o)], 0.5), vec![false]);
        let flags = match_class(&[det(h, o, 0.9), det(h, o, 0.8)], &[gt(h, o)], 0.5);
        assert_eq!(flags, vec![true, false]);
        // other scenes never match
        let mut d = det(h, o, 0.9);
        d.scene_id = "t".into();
        assert_eq!(match_class(&[d], &[gt(h, o)], 0.5), vec![false]);
    }

    #[test]
    fn reassignment_keeps_prefix_maximal() {
        // det A fits both GTs but prefers G1; det B fits only G1
        let h = b(0.0, 0.0, 10.0, 10.0);
        let g1 = gt(h, b(20.0, 0.0, 30.0, 10.0));
        let g2 = gt(h, b(23.0, 0.0, 33.0, 10.0));
        let a = det(h, b(20.5, 0.0, 30.5, 10.0), 0.9);
        let bdet = det(h, b(18.5, 0.0, 28.5, 10.0), 0.8);
        assert!(eligible(&a, &g1, 0.5).unwrap() > eligible(&a, &g2, 0.5).unwrap());
        assert!(eligible(&bdet, &g2, 0.5).is_none() && eligible(&bdet, &g1, 0.5).is_some());
        assert_eq!(match_class(&[a, bdet], &[g1, g2], 0.5), vec![true, true]);
    }

    #[test]
    fn stable_order_for_ties() {
        let h = b(0.0, 0.0, 10.0, 10.0);
        let mut dets = vec![det(h, h, 0.5), det(h, h, 0.7), det(h, h, 0.5)];
        dets[0].scene_id = "first".into();
        dets[2].scene_id = "second".into();
        sort_by_score(&mut dets);
        assert_eq!(dets[1].scene_id, "first");
        assert_eq!(dets[2].scene_id, "second");
    }

    #[test]
    fn rare_split_aggregation() {
        let r = ClassResults {
            ap: vec![Some(1.0), Some(0.5), None, Some(0.0)],
            n_gt: vec![1, 2, 0, 4],
        };
        let rep = aggregate(r.clone(), &[20, 3, 0, 50], 10);
        assert_eq!(rep.map("Full"), Some(0.5));
        assert_eq!(rep.map("Rare"), Some(0.5));
        assert_eq!(rep.map("Non-rare"), Some(0.5));
        assert_eq!(rep.split("Full").unwrap().classes, 3);
        let rep = aggregate(r, &[20, 30, 40, 50], 10);
        assert_eq!(rep.map("Rare"), None);
        assert_eq!(rep.map("Full"), rep.map("Non-rare"));
    }

    #[test]
    fn zero_shot_split_spreads_evenly() {
        let classes: Vec<usize> = (0..20).collect();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = zero_shot_split(&classes, 4, 4, &mut rng).unwrap();
            assert_eq!(s.unseen.len(), 4);
            for o in 0..4 {
                assert!(s.seen.iter().filter(|c| *c % 4 == o).count() >= 4);
            }
            s.check().unwrap();
            assert_eq!(ZeroShotSplit::from_map(&s.to_map(), 4).unwrap(), s);
        }
    }

    #[test]
    fn zero_shot_split_infeasible() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // object 1 has a single triplet
        let classes = [0, 1, 2, 4, 6];
        assert!(zero_shot_split(&classes, 2, 3, &mut rng).is_ok());
        assert!(matches!(
            zero_shot_split(&classes, 2, 4, &mut rng),
            Err(EvalError::Constraint(_))
        ));
        let bad = ZeroShotSplit {
            num_objects: 2,
            seen: vec![0],
            unseen: vec![1],
        };
        assert!(bad.check().is_err());
    }

    #[test]
    fn hico_scale_split() {
        let classes: Vec<usize> = (0..600).map(|i| (i % 117) * 80 + (i % 80)).collect();
        let mut uniq = classes.clone();
        uniq.sort_unstable();
        uniq.dedup();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = zero_shot_split(&uniq, 80, 120, &mut rng).unwrap();
        assert_eq!((s.unseen.len(), s.seen.len()), (120, uniq.len() - 120));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn ap_is_bounded_and_rises_with_an_extra_leading_hit(
                flags in proptest::collection::vec(any::<bool>(), 0..30),
                extra in 1usize..5,
            ) {
                let tp = flags.iter().filter(|&&f| f).count();
                let n_gt = tp + extra;
                let ap = average_precision(&flags, n_gt).unwrap();
                prop_assert!((0.0..=1.0).contains(&ap));
                let mut better = vec![true];
                better.extend(&flags);
                prop_assert!(average_precision(&better, n_gt).unwrap() >= ap - 1e-12);
            }

            #[test]
            fn all_hits_give_unit_ap(n in 1usize..40) {
                prop_assert!((average_precision(&vec![true; n], n).unwrap() - 1.0).abs() < 1e-12);
            }

            #[test]
            fn zero_shot_split_keeps_a_seen_triplet_per_object(
                present in proptest::collection::btree_set(0usize..60, 1..40),
                frac in 0.0f64..0.9,
                seed in any::<u64>(),
            ) {
                let classes: Vec<usize> = present.into_iter().collect();
                let num_objects = 6;
                let mut per: HashMap<usize, usize> = HashMap::new();
                for &c in &classes {
                    *per.entry(c % num_objects).or_default() += 1;
                }
                let capacity: usize = per.values().map(|v| v - 1).sum();
                let n = ((frac * classes.len() as f64) as usize).min(capacity);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let s = zero_shot_split(&classes, num_objects, n, &mut rng).unwrap();
                prop_assert_eq!(s.unseen.len(), n);
                prop_assert_eq!(s.unseen.len() + s.seen.len(), classes.len());
                prop_assert!(s.check().is_ok());
            }
        }
    }
}
