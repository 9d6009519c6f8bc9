//! Small planar geometry helpers shared across the crate.

use serde::{Deserialize, Serialize};

/// Axis-aligned box in the plane.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box2 {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
}

impl Box2 {
    pub fn new(lo: [f64; 2], hi: [f64; 2]) -> Self {
        assert!(lo[0] <= hi[0] && lo[1] <= hi[1], "degenerate box");
        Self { lo, hi }
    }

    /// Box `[-half, half]^2` centered at the origin.
    pub fn centered(half: f64) -> Self {
        Self::new([-half, -half], [half, half])
    }

    /// Square window `[-side/2, side/2]^2`.
    pub fn window(side: f64) -> Self {
        Self::centered(side / 2.0)
    }

    pub fn center(&self) -> [f64; 2] {
        [
            0.5 * (self.lo[0] + self.hi[0]),
            0.5 * (self.lo[1] + self.hi[1]),
        ]
    }

    /// Half-extent along each axis.
    pub fn half_extent(&self) -> [f64; 2] {
        [
            0.5 * (self.hi[0] - self.lo[0]),
            0.5 * (self.hi[1] - self.lo[1]),
        ]
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.lo[0] && p[0] <= self.hi[0] && p[1] >= self.lo[1] && p[1] <= self.hi[1]
    }

    pub fn contains_box(&self, other: &Box2) -> bool {
        self.contains(other.lo) && self.contains(other.hi)
    }

    pub fn area(&self) -> f64 {
        (self.hi[0] - self.lo[0]) * (self.hi[1] - self.lo[1])
    }

    /// Box inflated by `pad` on every side.
    pub fn inflate(&self, pad: f64) -> Self {
        Self::new(
            [self.lo[0] - pad, self.lo[1] - pad],
            [self.hi[0] + pad, self.hi[1] + pad],
        )
    }
}

pub fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

pub fn norm2(p: [f64; 2]) -> f64 {
    (p[0] * p[0] + p[1] * p[1]).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_basics() {
        let b = Box2::window(4.0);
        assert_eq!(b.lo, [-2.0, -2.0]);
        assert!(b.contains([2.0, -2.0]));
        assert!(!b.contains([2.1, 0.0]));
        assert_eq!(b.area(), 16.0);
        assert!(b.contains_box(&Box2::centered(1.0)));
        assert!(!Box2::centered(1.0).contains_box(&b));
    }
}
