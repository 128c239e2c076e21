//! Procedural scenes whose interaction labels are rules over relative layout,
//! a simulated detector and deterministic pseudo word embeddings.

use std::collections::BTreeMap;

use image::{Rgb, RgbImage};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{iou, BoxF};
use crate::pairing::{Detection, GroundTruth, GtBox, GtTriplet, HUMAN_CLASS};
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid scene spec: {0}")]
    Spec(String),
}

/// Where an object's centre lies in the human's normalized frame, where the
/// human box spans `[0, 1] x [0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Inside,
    Above,
    Below,
    Left,
    Right,
}

impl Region {
    /// Open interval bounds `(u_lo, u_hi, v_lo, v_hi)`.
    fn bounds(self) -> (f64, f64, f64, f64) {
        match self {
            Region::Inside => (0.0, 1.0, 0.0, 1.0),
            Region::Above => (0.0, 1.0, -1.0, 0.0),
            Region::Below => (0.0, 1.0, 1.0, 2.0),
            Region::Left => (-1.5, 0.0, 0.0, 1.0),
            Region::Right => (1.0, 2.5, 0.0, 1.0),
        }
    }

    pub fn contains(self, u: f64, v: f64) -> bool {
        let (u0, u1, v0, v1) = self.bounds();
        u > u0 && u < u1 && v > v0 && v < v1
    }
}

/// Object centre in the normalized frame of `human`.
pub fn relative_center(human: &BoxF, object: &BoxF) -> (f64, f64) {
    let (cx, cy) = object.center();
    (
        (cx - human.x1()) / human.width(),
        (cy - human.y1()) / human.height(),
    )
}

/// Distance kept between sampled centres and region boundaries.
const MARGIN: f64 = 0.15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredicateRule {
    pub name: String,
    pub region: Region,
    /// Object classes the predicate applies to; all non-human classes when absent.
    #[serde(default)]
    pub classes: Option<Vec<usize>>,
    /// When set, the object must be rendered in its bright shade.
    #[serde(default)]
    pub needs_bright: bool,
}

impl PredicateRule {
    pub fn new(name: &str, region: Region) -> Self {
        Self {
            name: name.into(),
            region,
            classes: None,
            needs_bright: false,
        }
    }

    pub fn for_classes(mut self, classes: &[usize]) -> Self {
        self.classes = Some(classes.to_vec());
        self
    }

    pub fn bright_only(mut self) -> Self {
        self.needs_bright = true;
        self
    }

    pub fn applies_to(&self, class: usize) -> bool {
        class != HUMAN_CLASS && self.classes.as_ref().is_none_or(|c| c.contains(&class))
    }

    pub fn holds(&self, human: &BoxF, object: &SceneObject) -> bool {
        let (u, v) = relative_center(human, &object.bbox);
        self.applies_to(object.class_id)
            && (!self.needs_bright || object.bright)
            && self.region.contains(u, v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Rect,
    Ellipse,
    Triangle,
    Diamond,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStyle {
    pub name: String,
    pub shape: Shape,
    /// Bright-shade RGB in `[0, 1]`.
    pub color: [f64; 3],
    /// Classes sharing a group get similar embeddings.
    pub group: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub image_size: usize,
    /// Indexed by class id; class 0 is the person class.
    pub classes: Vec<ClassStyle>,
    pub predicates: Vec<PredicateRule>,
    /// Inclusive range of humans per scene.
    pub humans: [usize; 2],
    /// Inclusive range of objects per scene.
    pub objects: [usize; 2],
    /// Human box width and height ranges in pixels.
    pub human_size: [[f64; 2]; 2],
    /// Object side range in pixels.
    pub object_size: [f64; 2],
    /// Sampling weight multipliers per triplet id (default 1).
    #[serde(default)]
    pub rare_multipliers: BTreeMap<usize, f64>,
    /// Probability that a placed object interacts with nobody.
    pub negative_pair_rate: f64,
}

impl SceneSpec {
    pub fn num_objects(&self) -> usize {
        self.classes.len()
    }

    pub fn num_predicates(&self) -> usize {
        self.predicates.len()
    }

    pub fn num_triplets(&self) -> usize {
        self.num_objects() * self.num_predicates()
    }

    fn default_classes() -> Vec<ClassStyle> {
        let c = |name: &str, shape, color, group| ClassStyle {
            name: name.into(),
            shape,
            color,
            group,
        };
        vec![
            c("person", Shape::Rect, [0.95, 0.8, 0.65], 0),
            c("horse", Shape::Ellipse, [0.9, 0.35, 0.2], 1),
            c("bicycle", Shape::Diamond, [0.2, 0.6, 0.95], 1),
            c("ball", Shape::Triangle, [0.3, 0.9, 0.3], 2),
        ]
    }

    /// Six predicates that are functions of layout and object class only.
    pub fn layout_benchmark() -> Self {
        Self {
            image_size: 64,
            classes: Self::default_classes(),
            predicates: vec![
                PredicateRule::new("hold", Region::Inside),
                PredicateRule::new("ride", Region::Below).for_classes(&[1, 2]),
                PredicateRule::new("kick", Region::Below).for_classes(&[3]),
                PredicateRule::new("walk_left", Region::Left),
                PredicateRule::new("walk_right", Region::Right),
                PredicateRule::new("lift", Region::Above),
            ],
            humans: [1, 3],
            objects: [1, 4],
            human_size: [[10.0, 14.0], [20.0, 26.0]],
            object_size: [6.0, 10.0],
            rare_multipliers: BTreeMap::new(),
            negative_pair_rate: 0.2,
        }
    }

    /// Layout benchmark plus a predicate decided by the object's shade.
    pub fn with_appearance() -> Self {
        let mut s = Self::layout_benchmark();
        s.predicates
            .push(PredicateRule::new("admire", Region::Right).bright_only());
        s
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let err = |m: String| Err(SynthError::Spec(m));
        if self.classes.len() < 2 {
            return err("need the person class and at least one object class".into());
        }
        if self.predicates.is_empty() {
            return err("need at least one predicate".into());
        }
        if self.image_size < 16 {
            return err(format!("image size {} is below 16", self.image_size));
        }
        if self.humans[0] == 0 || self.humans[0] > self.humans[1] {
            return err(format!("bad human count range {:?}", self.humans));
        }
        if self.objects[0] > self.objects[1] {
            return err(format!("bad object count range {:?}", self.objects));
        }
        for r in self.human_size.iter().chain([&self.object_size]) {
            if !(r[0] > 0.0 && r[0] <= r[1]) {
                return err(format!("bad size range {r:?}"));
            }
        }
        if !(0.0..=1.0).contains(&self.negative_pair_rate) {
            return err(format!("negative_pair_rate {} outside [0, 1]", self.negative_pair_rate));
        }
        for p in &self.predicates {
            if let Some(cs) = &p.classes {
                if cs.iter().any(|&c| c == HUMAN_CLASS || c >= self.classes.len()) {
                    return err(format!("predicate {} gates on an invalid class", p.name));
                }
            }
        }
        for (&t, &m) in &self.rare_multipliers {
            if t >= self.num_triplets() || !(m >= 0.0 && m.is_finite()) {
                return err(format!("bad rare multiplier {m} for triplet {t}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    #[serde(rename = "box")]
    pub bbox: BoxF,
    pub class_id: usize,
    pub bright: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: RgbImage,
    pub humans: Vec<BoxF>,
    pub objects: Vec<SceneObject>,
    pub gt: GroundTruth,
}

/// `[3, H, W]` tensor with values in `[0, 1]`.
pub fn image_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        f64::from(raw[p * 3 + c]) / 255.0
    })
}

/// Predicates holding for one (human, object) pair.
pub fn pair_predicates(spec: &SceneSpec, human: &BoxF, object: &SceneObject) -> Vec<usize> {
    spec.predicates
        .iter()
        .enumerate()
        .filter(|(_, r)| r.holds(human, object))
        .map(|(p, _)| p)
        .collect()
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

fn sample_in(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo + MARGIN..hi - MARGIN)
}

/// Object centre for an interaction: strictly inside the region, `MARGIN`
/// away from its boundary.
fn sample_region(rng: &mut ChaCha8Rng, region: Region) -> (f64, f64) {
    let (u0, u1, v0, v1) = region.bounds();
    (sample_in(rng, u0, u1), sample_in(rng, v0, v1))
}

/// Object centre outside every region: one of the four diagonal corners.
fn sample_background(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let u = if rng.random_bool(0.5) {
        sample_in(rng, -1.5, 0.0)
    } else {
        sample_in(rng, 1.0, 2.5)
    };
    let v = if rng.random_bool(0.5) {
        sample_in(rng, -1.0, 0.0)
    } else {
        sample_in(rng, 1.0, 2.0)
    };
    (u, v)
}

enum Intent {
    Interact { predicate: usize, class: usize },
    Background { class: usize },
}

fn sample_intent(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Intent {
    let num_objects = spec.num_objects();
    if rng.random_bool(spec.negative_pair_rate) {
        return Intent::Background {
            class: rng.random_range(1..num_objects),
        };
    }
    let mut combos = Vec::new();
    for (p, rule) in spec.predicates.iter().enumerate() {
        for class in 1..num_objects {
            if rule.applies_to(class) {
                let w = spec
                    .rare_multipliers
                    .get(&(p * num_objects + class))
                    .copied()
                    .unwrap_or(1.0);
                if w > 0.0 {
                    combos.push((p, class, w));
                }
            }
        }
    }
    let total: f64 = combos.iter().map(|c| c.2).sum();
    if combos.is_empty() || total <= 0.0 {
        return Intent::Background {
            class: rng.random_range(1..num_objects),
        };
    }
    let mut x = rng.random_range(0.0..total);
    for &(predicate, class, w) in &combos {
        if x < w {
            return Intent::Interact { predicate, class };
        }
        x -= w;
    }
    let (predicate, class, _) = *combos.last().expect("non-empty");
    Intent::Interact { predicate, class }
}

fn overlaps_any(b: &BoxF, others: &[BoxF]) -> bool {
    others.iter().any(|o| b.intersection_area(o) > 0.0)
}

const PLACEMENT_TRIES: usize = 50;

/// Places humans and objects, renders the image and labels every pair by the rules.
///
/// Each object is placed for one anchor human and rejected (then resampled)
/// when it would also satisfy a rule with another human, so every label comes
/// from the interaction the generator intended.
pub fn generate_scene(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Scene {
    let size = spec.image_size as f64;
    let mut humans: Vec<BoxF> = Vec::new();
    let n_h = rng.random_range(spec.humans[0]..=spec.humans[1]);
    for _ in 0..n_h {
        for _ in 0..PLACEMENT_TRIES {
            let w = uniform(rng, spec.human_size[0]);
            let h = uniform(rng, spec.human_size[1]);
            let x = rng.random_range(0.0..(size - w).max(1e-9));
            let y = rng.random_range(0.0..(size - h).max(1e-9));
            let b = BoxF::new(x, y, x + w, y + h).expect("positive size");
            if !overlaps_any(&b, &humans) {
                humans.push(b);
                break;
            }
        }
    }

    let mut objects: Vec<SceneObject> = Vec::new();
    let n_o = rng.random_range(spec.objects[0]..=spec.objects[1]);
    for _ in 0..n_o {
        let anchor = rng.random_range(0..humans.len());
        let intent = sample_intent(spec, rng);
        for _ in 0..PLACEMENT_TRIES {
            let h = humans[anchor];
            let (class, (u, v), bright) = match intent {
                Intent::Interact { predicate, class } => {
                    let rule = &spec.predicates[predicate];
                    let bright = rule.needs_bright || rng.random_bool(0.5);
                    (class, sample_region(rng, rule.region), bright)
                }
                Intent::Background { class } => (class, sample_background(rng), rng.random_bool(0.5)),
            };
            let side = uniform(rng, spec.object_size);
            let aspect: f64 = rng.random_range(0.75..1.33);
            let (ow, oh) = (side * aspect.sqrt(), side / aspect.sqrt());
            let (cx, cy) = (h.x1() + u * h.width(), h.y1() + v * h.height());
            let Ok(b) = BoxF::from_center(cx, cy, ow, oh) else {
                continue;
            };
            if b.x1() < 0.0 || b.y1() < 0.0 || b.x2() > size || b.y2() > size {
                continue;
            }
            let obj = SceneObject {
                bbox: b,
                class_id: class,
                bright,
            };
            let object_boxes: Vec<BoxF> = objects.iter().map(|o| o.bbox).collect();
            if overlaps_any(&b, &object_boxes) {
                continue;
            }
            // must not touch other humans, nor relate to them by any rule
            let clean = humans.iter().enumerate().all(|(i, other)| {
                i == anchor
                    || (b.intersection_area(other) == 0.0 && pair_predicates(spec, other, &obj).is_empty())
            });
            if !clean {
                continue;
            }
            objects.push(obj);
            break;
        }
    }

    let mut gt = GroundTruth::default();
    for h in &humans {
        gt.boxes.push(GtBox {
            bbox: *h,
            class_id: HUMAN_CLASS,
        });
    }
    for o in &objects {
        gt.boxes.push(GtBox {
            bbox: o.bbox,
            class_id: o.class_id,
        });
    }
    for h in &humans {
        for o in &objects {
            for p in pair_predicates(spec, h, o) {
                gt.triplets.push(GtTriplet {
                    human_box: *h,
                    object_box: o.bbox,
                    object_class: o.class_id,
                    predicate: p,
                });
            }
        }
    }
    Scene {
        image: render(spec, &humans, &objects),
        humans,
        objects,
        gt,
    }
}

const BACKGROUND: [f64; 3] = [0.25, 0.27, 0.3];
const DARK_SHADE: f64 = 0.45;

fn covers(shape: Shape, b: &BoxF, x: f64, y: f64) -> bool {
    let (cx, cy) = b.center();
    let (rx, ry) = (b.width() / 2.0, b.height() / 2.0);
    let (dx, dy) = ((x - cx) / rx, (y - cy) / ry);
    match shape {
        Shape::Rect => dx.abs() <= 1.0 && dy.abs() <= 1.0,
        Shape::Ellipse => dx * dx + dy * dy <= 1.0,
        Shape::Diamond => dx.abs() + dy.abs() <= 1.0,
        // apex at the top, base along the bottom edge
        Shape::Triangle => dy <= 1.0 && dx.abs() <= (dy + 1.0) / 2.0,
    }
}

fn paint(img: &mut RgbImage, shape: Shape, b: &BoxF, color: [f64; 3]) {
    let px = color.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8);
    let (w, h) = (img.width() as f64, img.height() as f64);
    let x0 = b.x1().floor().max(0.0) as u32;
    let y0 = b.y1().floor().max(0.0) as u32;
    let x1 = b.x2().ceil().min(w) as u32;
    let y1 = b.y2().ceil().min(h) as u32;
    for y in y0..y1 {
        for x in x0..x1 {
            if covers(shape, b, x as f64 + 0.5, y as f64 + 0.5) {
                img.put_pixel(x, y, Rgb(px));
            }
        }
    }
}

fn render(spec: &SceneSpec, humans: &[BoxF], objects: &[SceneObject]) -> RgbImage {
    let s = spec.image_size as u32;
    let bg = BACKGROUND.map(|c| (c * 255.0).round() as u8);
    let mut img = RgbImage::from_pixel(s, s, Rgb(bg));
    let person = &spec.classes[HUMAN_CLASS];
    for h in humans {
        paint(&mut img, person.shape, h, person.color);
    }
    for o in objects {
        let style = &spec.classes[o.class_id];
        let shade = if o.bright { 1.0 } else { DARK_SHADE };
        paint(&mut img, style.shape, &o.bbox, style.color.map(|c| c * shade));
    }
    img
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorNoise {
    /// Stddev of each box edge as a fraction of the box side.
    pub jitter: f64,
    /// Stddev of `1 - score` for real objects.
    pub score_sigma: f64,
    pub miss_rate: f64,
    /// Chance per real object of an extra spurious detection.
    pub false_positive_rate: f64,
    /// Stddev of the additive feature noise.
    pub feature_noise: f64,
}

impl DetectorNoise {
    pub fn none() -> Self {
        Self {
            jitter: 0.0,
            score_sigma: 0.0,
            miss_rate: 0.0,
            false_positive_rate: 0.0,
            feature_noise: 0.0,
        }
    }

    pub fn mild() -> Self {
        Self {
            jitter: 0.03,
            score_sigma: 0.03,
            miss_rate: 0.02,
            false_positive_rate: 0.05,
            feature_noise: 0.1,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        for (name, v) in [("miss_rate", self.miss_rate), ("false_positive_rate", self.false_positive_rate)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(SynthError::Spec(format!("{name} {v} outside [0, 1]")));
            }
        }
        for (name, v) in [
            ("jitter", self.jitter),
            ("score_sigma", self.score_sigma),
            ("feature_noise", self.feature_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(SynthError::Spec(format!("{name} {v} must be non-negative")));
            }
        }
        Ok(())
    }
}

/// Unit-norm class signature that the simulated detector reports as appearance.
pub fn class_feature(class_id: usize, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_f00d ^ class_id as u64);
    let v: Vec<f64> = (0..dim)
        .map(|_| Normal::new(0.0, 1.0).expect("unit normal").sample(&mut rng))
        .collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn normal(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma == 0.0 {
        0.0
    } else {
        Normal::new(0.0, sigma).expect("finite sigma").sample(rng)
    }
}

/// Jittered box, clamped to the image; `None` when the jitter collapses it.
fn jitter_box(rng: &mut ChaCha8Rng, b: &BoxF, sigma: f64, size: f64) -> Option<BoxF> {
    let (w, h) = (b.width(), b.height());
    let x1 = b.x1() + normal(rng, sigma * w);
    let y1 = b.y1() + normal(rng, sigma * h);
    let x2 = b.x2() + normal(rng, sigma * w);
    let y2 = b.y2() + normal(rng, sigma * h);
    BoxF::new(x1, y1, x2, y2).ok()?.clamp_to(size, size)
}

/// Simulated detections of a scene's ground-truth boxes.
pub fn simulate_detector(
    gt: &GroundTruth,
    image_size: usize,
    num_objects: usize,
    feature_dim: usize,
    noise: &DetectorNoise,
    rng: &mut ChaCha8Rng,
) -> Vec<Detection> {
    let size = image_size as f64;
    let feature = |rng: &mut ChaCha8Rng, class: usize| -> Vec<f64> {
        class_feature(class, feature_dim)
            .into_iter()
            .map(|v| v + normal(rng, noise.feature_noise))
            .collect()
    };
    let mut dets = Vec::new();
    for g in &gt.boxes {
        if rng.random_bool(noise.miss_rate) {
            continue;
        }
        let Some(bbox) = jitter_box(rng, &g.bbox, noise.jitter, size) else {
            continue;
        };
        let score = (1.0 - normal(rng, noise.score_sigma).abs()).clamp(0.0, 1.0);
        dets.push(Detection {
            bbox,
            class_id: g.class_id,
            score,
            feature: feature(rng, g.class_id),
        });
        if rng.random_bool(noise.false_positive_rate) {
            let w = rng.random_range(0.1..0.4) * size;
            let h = rng.random_range(0.1..0.4) * size;
            let x = rng.random_range(0.0..size - w);
            let y = rng.random_range(0.0..size - h);
            let class_id = rng.random_range(0..num_objects);
            dets.push(Detection {
                bbox: BoxF::new(x, y, x + w, y + h).expect("positive size"),
                class_id,
                score: rng.random_range(0.0..1.0),
                feature: feature(rng, class_id),
            });
        }
    }
    dets
}

/// Orthonormal vectors from Gram-Schmidt over seeded Gaussian draws.
fn orthonormal_set(count: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..dim)
            .map(|_| Normal::new(0.0, 1.0).expect("unit normal").sample(&mut rng))
            .collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= d * y;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

/// Share of the group direction in each embedding; same-group classes have
/// cosine similarity equal to this value, different groups zero.
pub const GROUP_SHARE: f64 = 0.85;

const EMBEDDING_SEED: u64 = 0x77_6f72_6476_6563;

/// Unit-norm embedding per class: `sqrt(s) * g_group + sqrt(1 - s) * c_class`
/// over one orthonormal set, so similarity follows the class groups.
pub fn pseudo_embeddings(groups: &[usize], dim: usize) -> Result<Vec<Vec<f64>>, SynthError> {
    let n_groups = groups.iter().max().map_or(0, |g| g + 1);
    if dim < n_groups + groups.len() {
        return Err(SynthError::Spec(format!(
            "embedding dim {dim} must be at least groups + classes = {}",
            n_groups + groups.len()
        )));
    }
    let basis = orthonormal_set(n_groups + groups.len(), dim, EMBEDDING_SEED);
    let (a, b) = (GROUP_SHARE.sqrt(), (1.0 - GROUP_SHARE).sqrt());
    Ok(groups
        .iter()
        .enumerate()
        .map(|(c, &g)| {
            basis[g]
                .iter()
                .zip(&basis[n_groups + c])
                .map(|(x, y)| a * x + b * y)
                .collect()
        })
        .collect())
}

/// Embedding of one class of `spec`.
pub fn pseudo_embedding(spec: &SceneSpec, class_id: usize, dim: usize) -> Result<Vec<f64>, SynthError> {
    let groups: Vec<usize> = spec.classes.iter().map(|c| c.group).collect();
    let mut all = pseudo_embeddings(&groups, dim)?;
    if class_id >= all.len() {
        return Err(SynthError::Spec(format!("class {class_id} out of range")));
    }
    Ok(all.swap_remove(class_id))
}

/// Mean IoU between each ground-truth box and its jittered copy.
pub fn mean_jitter_iou(b: &BoxF, sigma: f64, samples: usize, rng: &mut ChaCha8Rng) -> f64 {
    let mut total = 0.0;
    for _ in 0..samples {
        total += jitter_box(rng, b, sigma, f64::INFINITY).map_or(0.0, |j| iou(b, &j));
    }
    total / samples as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn every_label_satisfies_its_rule() {
        let spec = SceneSpec::with_appearance();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut labels = 0;
        for _ in 0..200 {
            let s = generate_scene(&spec, &mut rng);
            for t in &s.gt.triplets {
                let o = s.objects.iter().find(|o| o.bbox == t.object_box).unwrap();
                assert!(spec.predicates[t.predicate].holds(&t.human_box, o));
                labels += 1;
            }
            // conversely every holding rule is labeled
            for h in &s.humans {
                for o in &s.objects {
                    let n = s
                        .gt
                        .triplets
                        .iter()
                        .filter(|t| t.human_box == *h && t.object_box == o.bbox)
                        .count();
                    assert_eq!(n, pair_predicates(&spec, h, o).len());
                }
            }
        }
        assert!(labels > 100);
    }

    #[test]
    fn above_rule_puts_human_centre_above_object_centre() {
        let mut spec = SceneSpec::layout_benchmark();
        spec.negative_pair_rate = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let lift = 5;
        let mut n = 0;
        for _ in 0..300 {
            let s = generate_scene(&spec, &mut rng);
            for t in s.gt.triplets.iter().filter(|t| t.predicate == lift) {
                // object sits above the human: the human's centre is lower
                assert!(t.human_box.center().1 > t.object_box.center().1);
                n += 1;
            }
        }
        assert!(n > 10);
    }

    #[test]
    fn no_negatives_means_every_object_interacts() {
        let mut spec = SceneSpec::layout_benchmark();
        spec.negative_pair_rate = 0.0;
        spec.humans = [1, 1];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let s = generate_scene(&spec, &mut rng);
            for o in &s.objects {
                assert!(!pair_predicates(&spec, &s.humans[0], o).is_empty());
            }
        }
    }

    #[test]
    fn scenes_are_deterministic() {
        let spec = SceneSpec::with_appearance();
        let a = generate_scene(&spec, &mut ChaCha8Rng::seed_from_u64(5));
        let b = generate_scene(&spec, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
    }

    #[test]
    fn noiseless_detector_reproduces_ground_truth() {
        let spec = SceneSpec::layout_benchmark();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = generate_scene(&spec, &mut rng);
        let dets = simulate_detector(&s.gt, 64, 4, 8, &DetectorNoise::none(), &mut rng);
        assert_eq!(dets.len(), s.gt.boxes.len());
        for (d, g) in dets.iter().zip(&s.gt.boxes) {
            assert_eq!(d.bbox, g.bbox);
            assert_eq!(d.score, 1.0);
            assert_eq!(d.feature, class_feature(g.class_id, 8));
        }
        let mut all_miss = DetectorNoise::none();
        all_miss.miss_rate = 1.0;
        assert!(simulate_detector(&s.gt, 64, 4, 8, &all_miss, &mut rng).is_empty());
    }

    #[test]
    fn jitter_keeps_high_overlap() {
        // Monte-Carlo: edges move by N(0, 0.05 side), far from the 0.8 bound
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let b = BoxF::new(10.0, 10.0, 30.0, 50.0).unwrap();
        let m = mean_jitter_iou(&b, 0.05, 1000, &mut rng);
        assert!(m > 0.8, "{m}");
    }

    #[test]
    fn embeddings_follow_groups() {
        let spec = SceneSpec::layout_benchmark();
        let e: Vec<Vec<f64>> = (0..4).map(|c| pseudo_embedding(&spec, c, 16).unwrap()).collect();
        for v in &e {
            assert!((cos(v, v) - 1.0).abs() < 1e-6);
        }
        assert!(cos(&e[1], &e[2]) > 0.8);
        assert!(cos(&e[1], &e[3]).abs() < 0.3);
        assert!(cos(&e[0], &e[1]).abs() < 0.3);
        assert_eq!(e[2], pseudo_embedding(&spec, 2, 16).unwrap());
        assert!(pseudo_embedding(&spec, 0, 6).is_err());
    }

    #[test]
    fn region_sampling_respects_margins() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for region in [Region::Inside, Region::Above, Region::Below, Region::Left, Region::Right] {
            for _ in 0..100 {
                let (u, v) = sample_region(&mut rng, region);
                assert!(region.contains(u, v));
            }
        }
        for _ in 0..200 {
            let (u, v) = sample_background(&mut rng);
            for region in [Region::Inside, Region::Above, Region::Below, Region::Left, Region::Right] {
                assert!(!region.contains(u, v));
            }
        }
    }

    #[test]
    fn shapes_render_inside_their_box() {
        let spec = SceneSpec::layout_benchmark();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = generate_scene(&spec, &mut rng);
        let t = image_tensor(&s.image);
        assert_eq!(t.shape(), &[3, 64, 64]);
        let bg = (BACKGROUND[0] * 255.0).round() / 255.0;
        assert!((t.data()[0] - bg).abs() < 1e-12 || s.humans.iter().any(|h| h.contains_point(0.5, 0.5)));
    }
}
