//! Pixel-space bounding boxes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum BBoxError {
    #[error("degenerate box: width {w} and height {h} must both be positive")]
    Degenerate { w: f64, h: f64 },
    #[error("box coordinates must be finite")]
    NonFinite,
    #[error("box ({x}, {y}, {w}, {h}) is outside the {width}x{height} frame")]
    OutOfFrame {
        x: f64,
        y: f64,
        w: f64,
        h: f64,
        width: u32,
        height: u32,
    },
}

/// Axis-aligned box as `(x, y, w, h)` with the origin at the top-left pixel
/// corner. Serialises as a 4-element array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl BBox {
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn x_max(&self) -> f64 {
        self.x + self.w
    }

    pub fn y_max(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn validate(&self) -> Result<(), BBoxError> {
        if ![self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite()) {
            return Err(BBoxError::NonFinite);
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(BBoxError::Degenerate { w: self.w, h: self.h });
        }
        Ok(())
    }

    /// True when the box lies entirely inside a `width` x `height` frame.
    pub fn within(&self, width: u32, height: u32) -> bool {
        self.x >= 0.0
            && self.y >= 0.0
            && self.x_max() <= f64::from(width)
            && self.y_max() <= f64::from(height)
    }

    pub fn check_within(&self, width: u32, height: u32) -> Result<(), BBoxError> {
        self.validate()?;
        if self.within(width, height) {
            Ok(())
        } else {
            Err(BBoxError::OutOfFrame {
                x: self.x,
                y: self.y,
                w: self.w,
                h: self.h,
                width,
                height,
            })
        }
    }

    /// Intersects the box with the frame. Returns `None` when nothing of
    /// positive area remains.
    pub fn clamp_to(&self, width: u32, height: u32) -> Option<BBox> {
        let x0 = self.x.max(0.0);
        let y0 = self.y.max(0.0);
        let x1 = self.x_max().min(f64::from(width));
        let y1 = self.y_max().min(f64::from(height));
        if x1 > x0 && y1 > y0 {
            Some(BBox::new(x0, y0, x1 - x0, y1 - y0))
        } else {
            None
        }
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let iw = self.x_max().min(other.x_max()) - self.x.max(other.x);
        let ih = self.y_max().min(other.y_max()) - self.y.max(other.y);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }
}

/// Intersection over union of two boxes, in `[0, 1]`.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64, BBoxError> {
    a.validate()?;
    b.validate()?;
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return Ok(0.0);
    }
    let union = a.area() + b.area() - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identical_boxes() {
        let a = BBox::new(3.0, 4.0, 10.0, 7.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn disjoint_boxes() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        let b = BBox::new(20.0, 0.0, 5.0, 5.0);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
        // touching edges share no area
        let c = BBox::new(10.0, 0.0, 5.0, 5.0);
        assert_eq!(iou(&a, &c).unwrap(), 0.0);
    }

    #[test]
    fn half_overlap_is_one_third() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        let b = BBox::new(0.0, 5.0, 10.0, 10.0);
        assert!((iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_rejected() {
        let a = BBox::new(0.0, 0.0, 0.0, 10.0);
        let b = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert!(matches!(iou(&a, &b), Err(BBoxError::Degenerate { .. })));
        assert!(iou(&b, &BBox::new(0.0, 0.0, 5.0, -1.0)).is_err());
    }

    #[test]
    fn clamp_and_bounds() {
        let b = BBox::new(-5.0, 10.0, 20.0, 50.0);
        let c = b.clamp_to(64, 48).unwrap();
        assert_eq!(c, BBox::new(0.0, 10.0, 15.0, 38.0));
        assert!(c.within(64, 48));
        assert!(BBox::new(70.0, 0.0, 5.0, 5.0).clamp_to(64, 48).is_none());
        assert!(BBox::new(60.0, 0.0, 5.0, 5.0).check_within(64, 48).is_err());
    }

    #[test]
    fn serde_as_array() {
        let b = BBox::new(1.0, 2.5, 3.0, 4.0);
        let s = serde_json::to_string(&b).unwrap();
        assert_eq!(s, "[1.0,2.5,3.0,4.0]");
        assert_eq!(serde_json::from_str::<BBox>(&s).unwrap(), b);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-50.0..50.0f64, -50.0..50.0f64, 0.5..40.0f64, 0.5..40.0f64)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, w, h))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b).unwrap();
            let ba = iou(&b, &a).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((iou(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn iou_non_increasing_when_translated_away(a in arb_box(), step in 0.1..5.0f64, n in 1usize..20) {
            // start from b == a and slide right
            let mut prev = 1.0;
            for k in 1..=n {
                let b = BBox::new(a.x + step * k as f64, a.y, a.w, a.h);
                let v = iou(&a, &b).unwrap();
                prop_assert!(v <= prev + 1e-12);
                prev = v;
            }
        }
    }
}
