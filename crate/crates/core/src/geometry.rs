//! Oriented 3D boxes, IoU, and non-maximum suppression.
//!
//! Boxes are z-up: a footprint rectangle rotated about the vertical axis by
//! `heading`, extruded over `[cz - dz/2, cz + dz/2]`. IoU is exact: the
//! footprint intersection is computed with Sutherland-Hodgman polygon
//! clipping and multiplied by the vertical overlap.

use serde::{Deserialize, Serialize};

/// Geometric tolerance for clipping and containment. Points this close to a
/// face count as inside, which keeps surface samples and rotated copies of
/// the same box stable.
pub const GEOM_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox {
    pub center: [f64; 3],
    /// Full extents (dx, dy, dz), all > 0.
    pub size: [f64; 3],
    /// Rotation about +z, radians.
    pub heading: f64,
}

impl OrientedBox {
    pub fn volume(&self) -> f64 {
        self.size[0] * self.size[1] * self.size[2]
    }

    pub fn diagonal(&self) -> f64 {
        let [dx, dy, dz] = self.size;
        (dx * dx + dy * dy + dz * dz).sqrt()
    }

    pub fn z_interval(&self) -> (f64, f64) {
        (self.center[2] - self.size[2] / 2.0, self.center[2] + self.size[2] / 2.0)
    }

    /// Footprint corners, counterclockwise.
    pub fn corners_2d(&self) -> [[f64; 2]; 4] {
        let (hx, hy) = (self.size[0] / 2.0, self.size[1] / 2.0);
        let (s, c) = self.heading.sin_cos();
        let rot = |x: f64, y: f64| [c * x - s * y + self.center[0], s * x + c * y + self.center[1]];
        [rot(hx, hy), rot(-hx, hy), rot(-hx, -hy), rot(hx, -hy)]
    }

    /// The eight 3D corners: bottom face then top face, both counterclockwise.
    pub fn corners_3d(&self) -> [[f64; 3]; 8] {
        let fp = self.corners_2d();
        let (z0, z1) = self.z_interval();
        let mut out = [[0.0; 3]; 8];
        for (i, p) in fp.iter().enumerate() {
            out[i] = [p[0], p[1], z0];
            out[i + 4] = [p[0], p[1], z1];
        }
        out
    }

    /// True if `p` lies inside the box, with a [`GEOM_EPS`] skin so surface
    /// points stay inside under rotation round-off.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let dz = p[2] - self.center[2];
        if dz.abs() > self.size[2] / 2.0 + GEOM_EPS {
            return false;
        }
        let (s, c) = self.heading.sin_cos();
        let (px, py) = (p[0] - self.center[0], p[1] - self.center[1]);
        // Rotate into the box frame (inverse rotation).
        let lx = c * px + s * py;
        let ly = -s * px + c * py;
        lx.abs() <= self.size[0] / 2.0 + GEOM_EPS && ly.abs() <= self.size[1] / 2.0 + GEOM_EPS
    }
}

/// Signed polygon area via the shoelace formula; positive when
/// counterclockwise.
fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let [x1, y1] = poly[i];
        let [x2, y2] = poly[(i + 1) % poly.len()];
        acc += x1 * y2 - x2 * y1;
    }
    acc / 2.0
}

/// Clips a polygon by the half-plane left of edge a->b (counterclockwise
/// clip polygon). Sutherland-Hodgman step.
fn clip_by_edge(poly: &[[f64; 2]], a: [f64; 2], b: [f64; 2]) -> Vec<[f64; 2]> {
    let side = |p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
    let mut out = Vec::with_capacity(poly.len() + 2);
    for i in 0..poly.len() {
        let cur = poly[i];
        let next = poly[(i + 1) % poly.len()];
        let (sc, sn) = (side(cur), side(next));
        if sc >= -GEOM_EPS {
            out.push(cur);
        }
        if (sc > GEOM_EPS && sn < -GEOM_EPS) || (sc < -GEOM_EPS && sn > GEOM_EPS) {
            let t = sc / (sc - sn);
            out.push([cur[0] + t * (next[0] - cur[0]), cur[1] + t * (next[1] - cur[1])]);
        }
    }
    out
}

/// Area of the intersection of two convex counterclockwise polygons.
pub fn convex_intersection_area(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> f64 {
    let mut poly = subject.to_vec();
    for i in 0..clip.len() {
        if poly.is_empty() {
            return 0.0;
        }
        poly = clip_by_edge(&poly, clip[i], clip[(i + 1) % clip.len()]);
    }
    polygon_area(&poly).max(0.0)
}

/// Exact IoU of two oriented boxes.
pub fn iou(a: &OrientedBox, b: &OrientedBox) -> f64 {
    let (az0, az1) = a.z_interval();
    let (bz0, bz1) = b.z_interval();
    let dz = (az1.min(bz1) - az0.max(bz0)).max(0.0);
    if dz == 0.0 {
        return 0.0;
    }
    let inter_area = convex_intersection_area(&a.corners_2d(), &b.corners_2d());
    let inter = inter_area * dz;
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Wraps an angle to (-pi, pi].
pub fn normalize_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let mut x = a % (2.0 * PI);
    if x <= -PI {
        x += 2.0 * PI;
    } else if x > PI {
        x -= 2.0 * PI;
    }
    x
}

/// A scored, classified box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: OrientedBox,
    pub score: f64,
    pub class: usize,
}

/// Greedy class-wise NMS. Detections are visited by descending score (ties
/// broken by input order); each kept detection suppresses later same-class
/// detections whose IoU with it exceeds `iou_thresh`. The result is sorted
/// by descending score, so the operation is idempotent.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| {
        dets[j]
            .score
            .partial_cmp(&dets[i].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    let mut suppressed = vec![false; dets.len()];
    let mut kept = Vec::new();
    for (rank, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        kept.push(dets[i]);
        for &j in &order[rank + 1..] {
            if suppressed[j] || dets[j].class != dets[i].class {
                continue;
            }
            if iou(&dets[i].bbox, &dets[j].bbox) > iou_thresh {
                suppressed[j] = true;
            }
        }
    }
    kept
}
