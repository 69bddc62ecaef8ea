use serde::{Deserialize, Serialize};
use std::fmt;

/// A planar position in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GeoPoint {
    pub x: f64,
    pub y: f64,
}

impl GeoPoint {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    /// Point reached after moving `dist` meters from `self` toward `to`.
    /// Does not overshoot.
    pub fn toward(&self, to: GeoPoint, dist: f64) -> GeoPoint {
        let len = distance(*self, to);
        if len <= dist || len == 0.0 {
            return to;
        }
        let f = dist / len;
        GeoPoint::new(self.x + (to.x - self.x) * f, self.y + (to.y - self.y) * f)
    }
}

impl fmt::Display for GeoPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

/// Euclidean distance in meters.
pub fn distance(p: GeoPoint, q: GeoPoint) -> f64 {
    (p.x - q.x).hypot(p.y - q.y)
}

/// Shortest distance from `p` to the closed segment `a`..`b`.
pub fn point_segment_distance(p: GeoPoint, a: GeoPoint, b: GeoPoint) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    if len2 == 0.0 {
        return distance(p, a);
    }
    let t = (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0);
    distance(p, GeoPoint::new(a.x + t * dx, a.y + t * dy))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn distance_examples() {
        assert_eq!(distance(GeoPoint::new(0.0, 0.0), GeoPoint::new(0.0, 0.0)), 0.0);
        assert_eq!(distance(GeoPoint::new(0.0, 0.0), GeoPoint::new(3.0, 4.0)), 5.0);
        assert_eq!(distance(GeoPoint::new(1.5, 2.0), GeoPoint::new(4.5, 6.0)), 5.0);
    }

    #[test]
    fn segment_distance() {
        let a = GeoPoint::new(0.0, 0.0);
        let b = GeoPoint::new(10.0, 0.0);
        assert_eq!(point_segment_distance(GeoPoint::new(5.0, 3.0), a, b), 3.0);
        assert_eq!(point_segment_distance(GeoPoint::new(-3.0, 4.0), a, b), 5.0);
        assert_eq!(point_segment_distance(GeoPoint::new(2.0, 0.0), a, a), 2.0);
    }

    #[test]
    fn toward_clamps_at_target() {
        let a = GeoPoint::new(0.0, 0.0);
        let b = GeoPoint::new(10.0, 0.0);
        assert_eq!(a.toward(b, 4.0), GeoPoint::new(4.0, 0.0));
        assert_eq!(a.toward(b, 40.0), b);
    }

    proptest! {
        #[test]
        fn distance_is_symmetric(ax in -1e4..1e4f64, ay in -1e4..1e4f64, bx in -1e4..1e4f64, by in -1e4..1e4f64) {
            let p = GeoPoint::new(ax, ay);
            let q = GeoPoint::new(bx, by);
            prop_assert_eq!(distance(p, q), distance(q, p));
            prop_assert!(distance(p, q) >= 0.0);
            prop_assert_eq!(distance(p, q) == 0.0, p == q);
        }
    }
}
