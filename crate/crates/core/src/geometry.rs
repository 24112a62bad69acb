//! Pixel-space geometry shared by extraction, prompting and the dataset layer.
//!
//! Coordinates use the image convention: origin at the top-left corner,
//! `x` grows rightward and `y` grows downward. Bounding boxes are inclusive.

use serde::{Deserialize, Serialize};

/// Inclusive pixel bounding box `(x_min, y_min, x_max, y_max)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "[u32; 4]", from = "[u32; 4]")]
pub struct BBox {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
}

impl From<BBox> for [u32; 4] {
    fn from(b: BBox) -> Self {
        [b.x_min, b.y_min, b.x_max, b.y_max]
    }
}

impl From<[u32; 4]> for BBox {
    fn from(a: [u32; 4]) -> Self {
        BBox {
            x_min: a[0],
            y_min: a[1],
            x_max: a[2],
            y_max: a[3],
        }
    }
}

impl BBox {
    pub fn new(x_min: u32, y_min: u32, x_max: u32, y_max: u32) -> Self {
        BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    /// True when `x_min <= x_max` and `y_min <= y_max`.
    pub fn is_well_formed(&self) -> bool {
        self.x_min <= self.x_max && self.y_min <= self.y_max
    }

    pub fn width(&self) -> u32 {
        self.x_max - self.x_min + 1
    }

    pub fn height(&self) -> u32 {
        self.y_max - self.y_min + 1
    }

    pub fn area(&self) -> u64 {
        u64::from(self.width()) * u64::from(self.height())
    }

    pub fn fits_within(&self, width: u32, height: u32) -> bool {
        self.is_well_formed() && self.x_max < width && self.y_max < height
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    /// Center with each coordinate rounded half-up to an integer pixel.
    pub fn center(&self) -> (u32, u32) {
        // (a + b) / 2 rounded half-up == floor((a + b + 1) / 2) for non-negative integers.
        let cx = (u64::from(self.x_min) + u64::from(self.x_max)).div_ceil(2);
        let cy = (u64::from(self.y_min) + u64::from(self.y_max)).div_ceil(2);
        (cx as u32, cy as u32)
    }

    pub fn intersection_area(&self, other: &BBox) -> u64 {
        let x0 = self.x_min.max(other.x_min);
        let y0 = self.y_min.max(other.y_min);
        let x1 = self.x_max.min(other.x_max);
        let y1 = self.y_max.min(other.y_max);
        if x0 > x1 || y0 > y1 {
            return 0;
        }
        u64::from(x1 - x0 + 1) * u64::from(y1 - y0 + 1)
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Expand by `padding` on every side, clamped to `[0, width) x [0, height)`.
    pub fn expand_clamped(&self, padding: u32, width: u32, height: u32) -> BBox {
        BBox {
            x_min: self.x_min.saturating_sub(padding),
            y_min: self.y_min.saturating_sub(padding),
            x_max: self.x_max.saturating_add(padding).min(width.saturating_sub(1)),
            y_max: self.y_max.saturating_add(padding).min(height.saturating_sub(1)),
        }
    }
}

/// A detected sign in road-image space, carrying the center used for
/// coordinate prompting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SignRegion {
    pub bbox: BBox,
    pub center: (u32, u32),
    pub area_px: u64,
}

impl SignRegion {
    pub fn new(bbox: BBox, area_px: u64) -> Self {
        SignRegion {
            bbox,
            center: bbox.center(),
            area_px,
        }
    }

    /// Region built from a bounding box alone; the area is the box area.
    pub fn from_bbox(bbox: BBox) -> Self {
        SignRegion::new(bbox, bbox.area())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn center_rounds_half_up() {
        assert_eq!(BBox::new(5, 5, 14, 14).center(), (10, 10));
        assert_eq!(BBox::new(0, 0, 0, 0).center(), (0, 0));
        assert_eq!(BBox::new(0, 0, 1, 3).center(), (1, 2));
        assert_eq!(BBox::new(3, 4, 3, 4).center(), (3, 4));
    }

    #[test]
    fn expand_clamps_at_borders() {
        let b = BBox::new(0, 1, 3, 3).expand_clamped(4, 6, 5);
        assert_eq!(b, BBox::new(0, 0, 5, 4));
        let b = BBox::new(5, 5, 14, 14).expand_clamped(2, 32, 32);
        assert_eq!((b.width(), b.height()), (14, 14));
    }

    #[test]
    fn iou_of_identical_and_disjoint() {
        let a = BBox::new(0, 0, 9, 9);
        assert!((a.iou(&a) - 1.0).abs() < 1e-12);
        assert_eq!(a.iou(&BBox::new(20, 20, 25, 25)), 0.0);
    }

    #[test]
    fn bbox_serializes_as_array() {
        let s = serde_json::to_string(&BBox::new(1, 2, 3, 4)).unwrap();
        assert_eq!(s, "[1,2,3,4]");
    }
}
