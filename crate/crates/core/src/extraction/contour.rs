//! Border following on binary images (Suzuki & Abe topological structural
//! analysis), restricted to reporting outer borders.
//!
//! Foreground uses 8-connectivity, so the background is 4-connected. Hole
//! borders are still followed internally because their labels steer the
//! raster scan, but only outer borders are returned.

use crate::geometry::{BBox, SignRegion};

use super::BinaryMask;

/// Neighbour offsets in counter-clockwise order (image coordinates, y down),
/// starting from east.
const OFFSETS: [(i64, i64); 8] = [
    (1, 0),
    (1, -1),
    (0, -1),
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
];

fn direction_of(dx: i64, dy: i64) -> usize {
    OFFSETS
        .iter()
        .position(|&o| o == (dx, dy))
        .expect("points are 8-neighbours")
}

/// Outer border of one 8-connected foreground component.
///
/// Points are ordered along the border; the last point is an 8-neighbour of
/// the first. Thin parts of a component are visited more than once, and an
/// isolated pixel yields a single-point contour.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Contour {
    points: Vec<(u32, u32)>,
}

impl Contour {
    pub fn points(&self) -> &[(u32, u32)] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn bbox(&self) -> BBox {
        let (mut x0, mut y0) = (u32::MAX, u32::MAX);
        let (mut x1, mut y1) = (0, 0);
        for &(x, y) in &self.points {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        BBox::new(x0, y0, x1, y1)
    }

    /// Row-major bitmap over [`Contour::bbox`] of every pixel on or inside
    /// the contour. Holes are part of the filled region.
    pub fn filled_bitmap(&self) -> (BBox, Vec<bool>) {
        let bbox = self.bbox();
        let (bw, bh) = (bbox.width() as usize, bbox.height() as usize);
        // One cell of padding so the outside is connected around the border.
        let (gw, gh) = (bw + 2, bh + 2);
        let mut wall = vec![false; gw * gh];
        for &(x, y) in &self.points {
            let gx = (x - bbox.x_min) as usize + 1;
            let gy = (y - bbox.y_min) as usize + 1;
            wall[gy * gw + gx] = true;
        }
        let mut outside = vec![false; gw * gh];
        let mut stack = vec![0usize];
        outside[0] = true;
        while let Some(i) = stack.pop() {
            let (x, y) = (i % gw, i / gw);
            let mut visit = |j: usize| {
                if !wall[j] && !outside[j] {
                    outside[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < gw {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - gw);
            }
            if y + 1 < gh {
                visit(i + gw);
            }
        }
        let mut filled = Vec::with_capacity(bw * bh);
        for y in 1..=bh {
            for x in 1..=bw {
                filled.push(!outside[y * gw + x]);
            }
        }
        (bbox, filled)
    }

    /// Pixel count of the filled region enclosed by this contour.
    pub fn filled_area(&self) -> u64 {
        self.filled_bitmap().1.iter().filter(|&&b| b).count() as u64
    }

    pub fn region(&self) -> SignRegion {
        SignRegion::new(self.bbox(), self.filled_area())
    }
}

/// Traces the outer border of every 8-connected foreground component.
///
/// Contours come out in raster order of each component's topmost-leftmost
/// pixel. Components nested inside another component's hole get their own
/// contour.
pub fn trace_contours(mask: &BinaryMask) -> Vec<Contour> {
    let w = mask.width() as usize + 2;
    let h = mask.height() as usize + 2;
    let mut labels = vec![0i32; w * h];
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(x, y) {
                labels[(y as usize + 1) * w + x as usize + 1] = 1;
            }
        }
    }

    let mut nbd = 1i32;
    let mut contours = Vec::new();
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let idx = y * w + x;
            let v = labels[idx];
            if v == 0 {
                continue;
            }
            let outer = v == 1 && labels[idx - 1] == 0;
            let hole = !outer && v >= 1 && labels[idx + 1] == 0;
            if !(outer || hole) {
                continue;
            }
            nbd += 1;
            let from = if outer { (x - 1, y) } else { (x + 1, y) };
            let points = follow_border(&mut labels, w, (x, y), from, nbd);
            if outer {
                contours.push(Contour {
                    points: points
                        .into_iter()
                        .map(|(px, py)| ((px - 1) as u32, (py - 1) as u32))
                        .collect(),
                });
            }
        }
    }
    contours
}

fn follow_border(
    labels: &mut [i32],
    w: usize,
    start: (usize, usize),
    from: (usize, usize),
    nbd: i32,
) -> Vec<(usize, usize)> {
    let at = |p: (usize, usize)| p.1 * w + p.0;
    let step = |p: (usize, usize), d: usize| {
        let (dx, dy) = OFFSETS[d];
        ((p.0 as i64 + dx) as usize, (p.1 as i64 + dy) as usize)
    };
    let dir = |to: (usize, usize), center: (usize, usize)| {
        direction_of(to.0 as i64 - center.0 as i64, to.1 as i64 - center.1 as i64)
    };

    // Clockwise search around the start pixel, beginning at `from`.
    let d0 = dir(from, start);
    let first = (0..8)
        .map(|k| step(start, (d0 + 8 - k) % 8))
        .find(|&p| labels[at(p)] != 0);
    let Some(first) = first else {
        labels[at(start)] = -nbd;
        return vec![start];
    };

    let mut points = Vec::new();
    let mut prev = first;
    let mut cur = start;
    loop {
        // Counter-clockwise search around `cur`, starting just after `prev`.
        let dp = dir(prev, cur);
        let mut east_zero = false;
        let mut next = prev;
        for k in 1..=8 {
            let d = (dp + k) % 8;
            let p = step(cur, d);
            if labels[at(p)] != 0 {
                next = p;
                break;
            }
            if d == 0 {
                east_zero = true;
            }
        }
        let ci = at(cur);
        if east_zero {
            labels[ci] = -nbd;
        } else if labels[ci] == 1 {
            labels[ci] = nbd;
        }
        points.push(cur);
        if next == start && cur == first {
            break;
        }
        prev = cur;
        cur = next;
    }
    points
}
