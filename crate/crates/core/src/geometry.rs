//! Planar poses, frame transforms, and polyline sampling.
//!
//! Every safety decision in the crate walks a polyline through the grid. The
//! walk lives here, in one place, so that planning, guidance, filtering, and
//! execution all see the exact same set of checked points.

/// A 2-D point or vector in meters.
pub type Vec2 = [f64; 2];

/// Robot pose in the world frame: position in meters, heading in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self { x, y, theta }
    }

    pub fn position(&self) -> Vec2 {
        [self.x, self.y]
    }

    /// Transform a robot-frame point into the world frame.
    pub fn to_world(&self, p: Vec2) -> Vec2 {
        let (s, c) = self.theta.sin_cos();
        [self.x + c * p[0] - s * p[1], self.y + s * p[0] + c * p[1]]
    }

    /// Transform a world-frame point into the robot frame.
    pub fn to_robot(&self, p: Vec2) -> Vec2 {
        let (s, c) = self.theta.sin_cos();
        let dx = p[0] - self.x;
        let dy = p[1] - self.y;
        [c * dx + s * dy, -s * dx + c * dy]
    }

    /// Rotate a world-frame direction into the robot frame (no translation).
    pub fn rotate_to_robot(&self, v: Vec2) -> Vec2 {
        let (s, c) = self.theta.sin_cos();
        [c * v[0] + s * v[1], -s * v[0] + c * v[1]]
    }
}

pub fn dist(a: Vec2, b: Vec2) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// A point produced by [`sample_polyline`], tagged with the segment it came
/// from and the interpolation parameter within that segment.
///
/// `segment` indexes the segment's end vertex: a point between `pts[k-1]` and
/// `pts[k]` carries `segment = k` and `t` such that
/// `p = (1 - t) * pts[k-1] + t * pts[k]`. Vertex 0 is emitted as
/// `(segment = 0, t = 1)`.
#[derive(Debug, Clone, Copy)]
pub struct PolylinePoint {
    pub point: Vec2,
    pub segment: usize,
    pub t: f64,
}

/// Walk a polyline emitting every vertex plus intermediate points so that
/// consecutive emitted points are at most `max_spacing` apart.
///
/// A single-vertex polyline yields that vertex. Zero-length segments emit no
/// extra points.
pub fn sample_polyline(pts: &[Vec2], max_spacing: f64) -> Vec<PolylinePoint> {
    assert!(max_spacing > 0.0, "max_spacing must be positive");
    let mut out = Vec::new();
    if pts.is_empty() {
        return out;
    }
    out.push(PolylinePoint {
        point: pts[0],
        segment: 0,
        t: 1.0,
    });
    for k in 1..pts.len() {
        let a = pts[k - 1];
        let b = pts[k];
        let len = dist(a, b);
        if len == 0.0 {
            out.push(PolylinePoint {
                point: b,
                segment: k,
                t: 1.0,
            });
            continue;
        }
        let n = (len / max_spacing).ceil() as usize;
        for i in 1..=n {
            let t = i as f64 / n as f64;
            out.push(PolylinePoint {
                point: [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])],
                segment: k,
                t,
            });
        }
    }
    out
}
