//! Axis-aligned boxes and the overlap measures used by association,
//! stoppage and wrong-way judgment.
//!
//! Coordinates are continuous image pixels: origin top-left, x rightward,
//! y downward.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default dead-band (px) below which a centroid displacement counts as no motion.
pub const DEFAULT_DEAD_BAND: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("box coordinates must be finite, got [{0}, {1}, {2}, {3}]")]
    NonFinite(f64, f64, f64, f64),
    #[error("box must have positive area, got [{0}, {1}, {2}, {3}]")]
    Degenerate(f64, f64, f64, f64),
}

/// Axis-aligned rectangle with strictly positive area.
///
/// Serialized as `[x_min, y_min, x_max, y_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeometryError> {
        if !(x_min.is_finite() && y_min.is_finite() && x_max.is_finite() && y_max.is_finite()) {
            return Err(GeometryError::NonFinite(x_min, y_min, x_max, y_max));
        }
        if x_min >= x_max || y_min >= y_max {
            return Err(GeometryError::Degenerate(x_min, y_min, x_max, y_max));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    /// Builds a box from its center and size.
    pub fn from_center(cx: f64, cy: f64, width: f64, height: f64) -> Result<Self, GeometryError> {
        Self::new(cx - width / 2.0, cy - height / 2.0, cx + width / 2.0, cy + height / 2.0)
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn y_min(&self) -> f64 {
        self.y_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Area of the intersection with `other`, zero when disjoint.
    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Result<Self, GeometryError> {
        Self::new(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    /// Closed interval covered by the box along `axis`.
    pub fn projection(&self, axis: Axis) -> (f64, f64) {
        match axis {
            Axis::Horizontal => (self.x_min, self.x_max),
            Axis::Vertical => (self.y_min, self.y_max),
        }
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = GeometryError;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        BoundingBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        b.to_array()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Horizontal,
    Vertical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Increasing,
    Decreasing,
}

/// Permitted traffic direction of a channel: the image axis the tunnel runs
/// along and which way along it cars are supposed to move.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TravelAxis {
    pub axis: Axis,
    pub positive_direction: Direction,
}

impl TravelAxis {
    pub fn new(axis: Axis, positive_direction: Direction) -> Self {
        Self {
            axis,
            positive_direction,
        }
    }
}

impl Default for TravelAxis {
    fn default() -> Self {
        Self::new(Axis::Horizontal, Direction::Increasing)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Displacement {
    Forward,
    Backward,
    None,
}

/// Intersection over union. Symmetric, in `[0, 1]`, zero for disjoint boxes.
pub fn overlap_area_ratio(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Length of the overlap of both boxes' projections on the travel axis,
/// divided by the projected length of `prev`.
pub fn overlapped_line_length_ratio(prev: &BoundingBox, curr: &BoundingBox, ax: TravelAxis) -> f64 {
    let (p0, p1) = prev.projection(ax.axis);
    let (c0, c1) = curr.projection(ax.axis);
    let overlap = p1.min(c1) - p0.max(c0);
    if overlap <= 0.0 {
        return 0.0;
    }
    (overlap / (p1 - p0)).clamp(0.0, 1.0)
}

/// Direction of the centroid displacement from `prev` to `curr` relative to
/// the permitted direction. Displacements with magnitude `<= dead_band` are
/// [`Displacement::None`].
pub fn displacement_sign(prev: &BoundingBox, curr: &BoundingBox, ax: TravelAxis, dead_band: f64) -> Displacement {
    let (pc, cc) = match ax.axis {
        Axis::Horizontal => (prev.center().0, curr.center().0),
        Axis::Vertical => (prev.center().1, curr.center().1),
    };
    let mut delta = cc - pc;
    if ax.positive_direction == Direction::Decreasing {
        delta = -delta;
    }
    if delta.abs() <= dead_band {
        Displacement::None
    } else if delta > 0.0 {
        Displacement::Forward
    } else {
        Displacement::Backward
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bb(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
        BoundingBox::new(x0, y0, x1, y1).unwrap()
    }

    /// Counts half-pixel cells whose centers fall inside the box.
    fn raster_area(b: &BoundingBox) -> f64 {
        let step = 0.5;
        let mut count = 0usize;
        let mut y = step / 2.0;
        while y < 20.0 {
            let mut x = step / 2.0;
            while x < 20.0 {
                if x > b.x_min() && x < b.x_max() && y > b.y_min() && y < b.y_max() {
                    count += 1;
                }
                x += step;
            }
            y += step;
        }
        count as f64 * step * step
    }

    #[test]
    fn area_examples() {
        assert_eq!(bb(0.0, 0.0, 10.0, 10.0).area(), 100.0);
        assert_eq!(bb(0.0, 0.0, 1.0, 1.0).area(), 1.0);
        let b = bb(2.5, 0.0, 7.5, 4.0);
        assert_eq!(raster_area(&b), 20.0);
        assert_eq!(b.area(), 20.0);
    }

    #[test]
    fn rejects_invalid_boxes() {
        assert!(matches!(
            BoundingBox::new(1.0, 0.0, 1.0, 5.0),
            Err(GeometryError::Degenerate(..))
        ));
        assert!(matches!(
            BoundingBox::new(0.0, 0.0, f64::NAN, 5.0),
            Err(GeometryError::NonFinite(..))
        ));
        assert!(BoundingBox::new(0.0, 5.0, 1.0, 4.0).is_err());
    }

    #[test]
    fn overlap_examples() {
        let a = bb(0.0, 0.0, 10.0, 10.0);
        assert_eq!(overlap_area_ratio(&a, &a), 1.0);
        assert_eq!(
            overlap_area_ratio(&bb(0.0, 0.0, 1.0, 1.0), &bb(5.0, 5.0, 6.0, 6.0)),
            0.0
        );
        let r = overlap_area_ratio(&a, &bb(5.0, 0.0, 15.0, 10.0));
        assert!((r - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn touching_boxes_do_not_overlap() {
        assert_eq!(
            overlap_area_ratio(&bb(0.0, 0.0, 1.0, 1.0), &bb(1.0, 0.0, 2.0, 1.0)),
            0.0
        );
    }

    #[test]
    fn line_ratio_examples() {
        let h = TravelAxis::new(Axis::Horizontal, Direction::Increasing);
        let v = TravelAxis::new(Axis::Vertical, Direction::Decreasing);
        let a = bb(0.0, 0.0, 10.0, 10.0);
        assert_eq!(overlapped_line_length_ratio(&a, &a, h), 1.0);
        assert_eq!(overlapped_line_length_ratio(&a, &a, v), 1.0);
        assert_eq!(overlapped_line_length_ratio(&a, &bb(5.0, 0.0, 15.0, 10.0), h), 0.5);
        assert_eq!(overlapped_line_length_ratio(&a, &bb(20.0, 0.0, 30.0, 10.0), h), 0.0);
        // normalized by prev, not by curr
        assert_eq!(
            overlapped_line_length_ratio(&bb(0.0, 0.0, 4.0, 1.0), &bb(0.0, 0.0, 20.0, 1.0), h),
            1.0
        );
    }

    #[test]
    fn displacement_examples() {
        let inc = TravelAxis::new(Axis::Horizontal, Direction::Increasing);
        let dec = TravelAxis::new(Axis::Horizontal, Direction::Decreasing);
        let a = bb(0.0, 0.0, 10.0, 10.0);
        let fwd = a.translate(4.0, 0.0).unwrap();
        let back = a.translate(-4.0, 0.0).unwrap();
        let jitter = a.translate(0.2, 0.0).unwrap();
        assert_eq!(displacement_sign(&a, &fwd, inc, 0.5), Displacement::Forward);
        assert_eq!(displacement_sign(&a, &back, inc, 0.5), Displacement::Backward);
        assert_eq!(displacement_sign(&a, &jitter, inc, 0.5), Displacement::None);
        assert_eq!(displacement_sign(&a, &fwd, dec, 0.5), Displacement::Backward);
        // vertical motion is ignored on a horizontal axis
        let down = a.translate(0.0, 30.0).unwrap();
        assert_eq!(displacement_sign(&a, &down, inc, 0.5), Displacement::None);
    }

    #[test]
    fn serde_uses_array_form() {
        let b = bb(1.0, 2.0, 3.0, 4.0);
        let s = serde_json::to_string(&b).unwrap();
        assert_eq!(s, "[1.0,2.0,3.0,4.0]");
        assert!(serde_json::from_str::<BoundingBox>("[3.0,2.0,1.0,4.0]").is_err());
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (0.0..100.0f64, 0.0..100.0f64, 0.5..60.0f64, 0.5..60.0f64)
            .prop_map(|(x, y, w, h)| BoundingBox::new(x, y, x + w, y + h).unwrap())
    }

    fn arb_axis() -> impl Strategy<Value = TravelAxis> {
        (any::<bool>(), any::<bool>()).prop_map(|(h, inc)| {
            TravelAxis::new(
                if h { Axis::Horizontal } else { Axis::Vertical },
                if inc {
                    Direction::Increasing
                } else {
                    Direction::Decreasing
                },
            )
        })
    }

    proptest! {
        #[test]
        fn iou_identity_symmetry_and_range(a in arb_box(), b in arb_box()) {
            prop_assert_eq!(overlap_area_ratio(&a, &a), 1.0);
            prop_assert_eq!(overlap_area_ratio(&a, &b), overlap_area_ratio(&b, &a));
            let r = overlap_area_ratio(&a, &b);
            prop_assert!((0.0..=1.0).contains(&r));
        }

        #[test]
        fn line_ratio_in_range_and_full_when_contained(a in arb_box(), b in arb_box(), ax in arb_axis()) {
            let r = overlapped_line_length_ratio(&a, &b, ax);
            prop_assert!((0.0..=1.0).contains(&r));
            let (a0, a1) = a.projection(ax.axis);
            let (b0, b1) = b.projection(ax.axis);
            if b0 <= a0 && b1 >= a1 {
                prop_assert_eq!(r, 1.0);
            }
        }

        #[test]
        fn translation_invariance(a in arb_box(), b in arb_box(), ax in arb_axis(),
                                  dx in -50.0..50.0f64, dy in -50.0..50.0f64) {
            let ta = a.translate(dx, dy).unwrap();
            let tb = b.translate(dx, dy).unwrap();
            prop_assert!((ta.area() - a.area()).abs() < 1e-9);
            prop_assert!((overlap_area_ratio(&ta, &tb) - overlap_area_ratio(&a, &b)).abs() < 1e-9);
            prop_assert!((overlapped_line_length_ratio(&ta, &tb, ax)
                - overlapped_line_length_ratio(&a, &b, ax)).abs() < 1e-9);
            // keep clear of the dead-band edge where rounding could flip the sign
            let (pa, pb) = match ax.axis {
                Axis::Horizontal => (a.center().0, b.center().0),
                Axis::Vertical => (a.center().1, b.center().1),
            };
            prop_assume!(((pb - pa).abs() - DEFAULT_DEAD_BAND).abs() > 1e-6);
            prop_assert_eq!(displacement_sign(&ta, &tb, ax, DEFAULT_DEAD_BAND),
                            displacement_sign(&a, &b, ax, DEFAULT_DEAD_BAND));
        }
    }
}
