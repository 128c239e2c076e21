//! Box arithmetic, interaction-pattern rasterization and union-box crops.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid box ({x1}, {y1}, {x2}, {y2}): need x2 > x1 and y2 > y1")]
pub struct BoxError {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

/// Axis-aligned box in continuous pixel coordinates.
///
/// Serialized as `[x1, y1, x2, y2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoxF {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl TryFrom<[f64; 4]> for BoxF {
    type Error = BoxError;

    fn try_from(v: [f64; 4]) -> Result<Self, BoxError> {
        BoxF::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoxF> for [f64; 4] {
    fn from(b: BoxF) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl BoxF {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, BoxError> {
        let ok = x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite();
        if ok && x2 > x1 && y2 > y1 {
            Ok(Self { x1, y1, x2, y2 })
        } else {
            Err(BoxError { x1, y1, x2, y2 })
        }
    }

    /// Box of the given size centred at `(cx, cy)`.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, BoxError> {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn contains(&self, other: &BoxF) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && self.x2 >= other.x2 && self.y2 >= other.y2
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }

    pub fn intersection_area(&self, other: &BoxF) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Intersection with `[0, width] x [0, height]`, if non-empty.
    pub fn clamp_to(&self, width: f64, height: f64) -> Option<BoxF> {
        BoxF::new(
            self.x1.max(0.0),
            self.y1.max(0.0),
            self.x2.min(width),
            self.y2.min(height),
        )
        .ok()
    }
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BoxF, b: &BoxF) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    if a == b {
        return 1.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Smallest box covering both inputs.
pub fn union_box(a: &BoxF, b: &BoxF) -> BoxF {
    BoxF {
        x1: a.x1.min(b.x1),
        y1: a.y1.min(b.y1),
        x2: a.x2.max(b.x2),
        y2: a.y2.max(b.y2),
    }
}

/// Two-channel binary layout map over the union box: channel 0 marks the
/// human, channel 1 the object.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionPattern {
    grid: Tensor,
}

impl InteractionPattern {
    pub fn resolution(&self) -> usize {
        self.grid.shape()[1]
    }

    /// `[2, R, R]` tensor of zeros and ones.
    pub fn as_tensor(&self) -> &Tensor {
        &self.grid
    }

    pub fn into_tensor(self) -> Tensor {
        self.grid
    }

    pub fn get(&self, channel: usize, row: usize, col: usize) -> bool {
        let r = self.resolution();
        self.grid.data()[(channel * r + row) * r + col] != 0.0
    }

    pub fn count(&self, channel: usize) -> usize {
        let r = self.resolution();
        self.grid.data()[channel * r * r..(channel + 1) * r * r]
            .iter()
            .filter(|&&v| v != 0.0)
            .count()
    }
}

fn rasterize_channel(b: &BoxF, frame: &BoxF, r: usize, out: &mut [f64]) {
    let sx = r as f64 / frame.width();
    let sy = r as f64 / frame.height();
    let (x1, x2) = ((b.x1 - frame.x1) * sx, (b.x2 - frame.x1) * sx);
    let (y1, y2) = ((b.y1 - frame.y1) * sy, (b.y2 - frame.y1) * sy);
    let mut any = false;
    for row in 0..r {
        let cy = row as f64 + 0.5;
        if cy < y1 || cy >= y2 {
            continue;
        }
        for col in 0..r {
            let cx = col as f64 + 0.5;
            if cx >= x1 && cx < x2 {
                out[row * r + col] = 1.0;
                any = true;
            }
        }
    }
    if !any {
        // box thinner than a cell: mark the cell under its centre
        let clamp = |v: f64| (v.floor().max(0.0) as usize).min(r - 1);
        let (col, row) = (clamp((x1 + x2) / 2.0), clamp((y1 + y2) / 2.0));
        out[row * r + col] = 1.0;
    }
}

/// Rasterizes both boxes into their union box at `resolution x resolution`.
///
/// A cell is set iff its centre lies inside the mapped box; a box that covers
/// no cell centre sets the single cell under its own centre.
pub fn rasterize_ip(human: &BoxF, object: &BoxF, resolution: usize) -> InteractionPattern {
    assert!(resolution > 0, "resolution must be positive");
    let frame = union_box(human, object);
    let rr = resolution * resolution;
    let mut data = vec![0.0; 2 * rr];
    rasterize_channel(human, &frame, resolution, &mut data[..rr]);
    rasterize_channel(object, &frame, resolution, &mut data[rr..]);
    InteractionPattern {
        grid: Tensor::new(vec![2, resolution, resolution], data).expect("ip shape"),
    }
}

/// Bilinear resize of `bbox` (clamped to the image) to `resolution x resolution`.
///
/// `image` is `[C, H, W]`; pixel `k` covers `[k, k+1)` with its centre at `k + 0.5`.
pub fn crop_resize(image: &Tensor, bbox: &BoxF, resolution: usize) -> Tensor {
    let (c, h, w) = match image.shape() {
        &[c, h, w] => (c, h, w),
        s => panic!("crop_resize expects [C, H, W], got {s:?}"),
    };
    let b = bbox
        .clamp_to(w as f64, h as f64)
        .unwrap_or_else(|| BoxF::new(0.0, 0.0, w as f64, h as f64).expect("image box"));
    let src = image.data();
    let sample_axis = |origin: f64, extent: f64, limit: usize| -> Vec<(usize, usize, f64)> {
        (0..resolution)
            .map(|i| {
                let pos = origin + (i as f64 + 0.5) * extent / resolution as f64 - 0.5;
                let pos = pos.clamp(0.0, (limit - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(limit - 1);
                (lo, hi, pos - lo as f64)
            })
            .collect()
    };
    let xs = sample_axis(b.x1, b.width(), w);
    let ys = sample_axis(b.y1, b.height(), h);
    let mut out = Vec::with_capacity(c * resolution * resolution);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new(vec![c, resolution, resolution], out).expect("crop shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BoxF {
        BoxF::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn rejects_degenerate_boxes() {
        assert!(BoxF::new(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(BoxF::new(0.0, 2.0, 1.0, 1.0).is_err());
        assert!(BoxF::new(f64::NAN, 0.0, 1.0, 1.0).is_err());
        assert!(serde_json::from_str::<BoxF>("[0, 0, 5, 5]").is_ok());
        assert!(serde_json::from_str::<BoxF>("[5, 0, 0, 5]").is_err());
    }

    #[test]
    fn iou_reference_values() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(20.0, 20.0, 30.0, 30.0)), 0.0);
        assert_eq!(iou(&a, &b(10.0, 0.0, 20.0, 10.0)), 0.0);
        assert!((iou(&a, &b(5.0, 5.0, 15.0, 15.0)) - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn union_reference_values() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(union_box(&a, &b(2.0, 2.0, 5.0, 5.0)), a);
        assert_eq!(
            union_box(&a, &b(20.0, 20.0, 30.0, 30.0)),
            b(0.0, 0.0, 30.0, 30.0)
        );
    }

    #[test]
    fn ip_full_and_half_coverage() {
        let h = b(0.0, 0.0, 64.0, 64.0);
        let o = b(32.0, 0.0, 64.0, 64.0);
        let ip = rasterize_ip(&h, &o, 64);
        assert_eq!(ip.count(0), 64 * 64);
        for row in 0..64 {
            for col in 0..64 {
                assert_eq!(ip.get(1, row, col), col >= 32, "({row}, {col})");
            }
        }
    }

    #[test]
    fn ip_scales_independently_of_image_units() {
        // same layout at a different scale rasterizes identically
        let ip1 = rasterize_ip(&b(0.0, 0.0, 4.0, 8.0), &b(2.0, 4.0, 8.0, 8.0), 16);
        let ip2 = rasterize_ip(&b(0.0, 0.0, 40.0, 80.0), &b(20.0, 40.0, 80.0, 80.0), 16);
        assert_eq!(ip1, ip2);
    }

    #[test]
    fn ip_thin_box_still_sets_a_cell() {
        let h = b(0.0, 0.0, 100.0, 100.0);
        let o = b(50.0, 50.0, 50.1, 50.1);
        let ip = rasterize_ip(&h, &o, 8);
        assert_eq!(ip.count(1), 1);
        assert!(ip.get(1, 4, 4));
    }

    #[test]
    fn crop_constant_and_identity() {
        let img = Tensor::full(&[3, 10, 12], 0.25);
        let crop = crop_resize(&img, &b(1.3, 2.2, 7.9, 9.1), 5);
        assert_eq!(crop.shape(), &[3, 5, 5]);
        assert!(crop.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let img = Tensor::from_fn(&[3, 6, 6], |i| (i as f64 * 0.37).sin());
        let crop = crop_resize(&img, &b(0.0, 0.0, 6.0, 6.0), 6);
        assert_eq!(crop, img);
    }

    #[test]
    fn crop_checkerboard_upsample_keeps_corners() {
        let img = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let crop = crop_resize(&img, &b(0.0, 0.0, 2.0, 2.0), 4);
        let d = crop.data();
        assert_eq!(d[0], 1.0);
        assert_eq!(d[3], 0.0);
        assert_eq!(d[12], 0.0);
        assert_eq!(d[15], 1.0);
        // inner sample at 0.25 from pixel 0 toward pixel 1 in both axes
        assert!((d[5] - (0.75 * 0.75 + 0.25 * 0.25)).abs() < 1e-12);
    }

    fn arb_box() -> impl Strategy<Value = BoxF> {
        (0.0..50.0f64, 0.0..50.0f64, 0.5..30.0f64, 0.5..30.0f64)
            .prop_map(|(x, y, w, h)| b(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), c in arb_box()) {
            let v = iou(&a, &c);
            prop_assert_eq!(v, iou(&c, &a));
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(iou(&a, &a), 1.0);
        }

        #[test]
        fn union_commutes_and_covers(a in arb_box(), c in arb_box()) {
            let u = union_box(&a, &c);
            prop_assert_eq!(u, union_box(&c, &a));
            prop_assert!(u.contains(&a) && u.contains(&c));
            prop_assert_eq!(union_box(&a, &a), a);
        }

        #[test]
        fn ip_channels_never_empty(a in arb_box(), c in arb_box(), r in 1usize..24) {
            let ip = rasterize_ip(&a, &c, r);
            prop_assert!(ip.count(0) >= 1);
            prop_assert!(ip.count(1) >= 1);
        }
    }
}
