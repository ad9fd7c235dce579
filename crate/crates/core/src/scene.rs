//! Synthetic scenes: generation, augmentation, and file formats.
//!
//! A scene is a point cloud plus ground-truth oriented boxes. Generated
//! scenes are centered on the origin so the flip augmentations map the room
//! onto itself. Points inside an object's box are sampled uniformly in its
//! volume; the rest of the budget becomes floor and clutter points.
//!
//! Formats: JSON carries points and ground truth; ASCII PLY carries points
//! only (for detection input from external tools).

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, normalize_angle, OrientedBox};
use crate::metrics::GroundTruth;
use crate::rng;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Scene {
    pub points: Vec<[f64; 3]>,
    pub objects: Vec<GroundTruth>,
}

/// One entry of the class catalog.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClassSpec {
    pub name: String,
    /// Template extents (dx, dy, dz) in meters.
    pub size: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SynthConfig {
    /// Exact number of points per scene.
    pub n_points: usize,
    /// Half extent of the square room footprint.
    pub room_half: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Fraction of points spent on floor and clutter.
    pub background_frac: f64,
    /// Per-axis multiplicative size jitter: extent *= 1 + U(-j, j).
    pub size_jitter: f64,
    /// Chance that placing a host class from `companion_pairs` seats its
    /// companion adjacent to it as the next object.
    pub companion_prob: f64,
    /// [host, companion] class-name pairs. Companions sit next to their
    /// hosts, giving scenes the co-occurrence structure that makes
    /// object-object context informative.
    pub companion_pairs: Vec<[String; 2]>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_points: 1024,
            room_half: 3.0,
            min_objects: 3,
            max_objects: 6,
            background_frac: 0.3,
            size_jitter: 0.15,
            companion_prob: 0.0,
            companion_pairs: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AugmentConfig {
    pub flip_x: bool,
    pub flip_y: bool,
    /// Max |rotation| about z, radians.
    pub max_rotation: f64,
    pub scale_lo: f64,
    pub scale_hi: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_x: true,
            flip_y: true,
            max_rotation: 30.0f64.to_radians(),
            scale_lo: 0.9,
            scale_hi: 1.1,
        }
    }
}

/// Minimum clearance kept between generated objects.
const PLACEMENT_GAP: f64 = 0.12;

fn sample_box(
    rng: &mut ChaCha12Rng,
    spec: &ClassSpec,
    cfg: &SynthConfig,
) -> OrientedBox {
    let j = cfg.size_jitter;
    let size = [
        spec.size[0] * (1.0 + rng.gen_range(-j..=j)),
        spec.size[1] * (1.0 + rng.gen_range(-j..=j)),
        spec.size[2] * (1.0 + rng.gen_range(-j..=j)),
    ];
    let margin = (size[0].hypot(size[1])) / 2.0;
    let lim = (cfg.room_half - margin).max(0.1);
    OrientedBox {
        center: [
            rng.gen_range(-lim..=lim),
            rng.gen_range(-lim..=lim),
            size[2] / 2.0,
        ],
        size,
        heading: normalize_angle(rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI)),
    }
}

/// Companion box seated adjacent to its host: same size/heading sampling as
/// a free box, but centered an arm's length from the host footprint.
fn sample_adjacent_box(
    rng: &mut ChaCha12Rng,
    spec: &ClassSpec,
    host: &OrientedBox,
    cfg: &SynthConfig,
) -> OrientedBox {
    let mut b = sample_box(rng, spec, cfg);
    let theta = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    let dist = 0.5 * host.size[0].hypot(host.size[1])
        + 0.5 * b.size[0].hypot(b.size[1])
        + PLACEMENT_GAP
        + rng.gen_range(0.05..=0.3);
    let margin = b.size[0].hypot(b.size[1]) / 2.0;
    let lim = (cfg.room_half - margin).max(0.1);
    b.center[0] = (host.center[0] + dist * theta.cos()).clamp(-lim, lim);
    b.center[1] = (host.center[1] + dist * theta.sin()).clamp(-lim, lim);
    b
}

fn grown(b: &OrientedBox, gap: f64) -> OrientedBox {
    OrientedBox {
        center: b.center,
        size: [b.size[0] + gap, b.size[1] + gap, b.size[2] + gap],
        heading: b.heading,
    }
}

/// Uniform point inside the box volume.
fn sample_point_in_box(rng: &mut ChaCha12Rng, b: &OrientedBox) -> [f64; 3] {
    let lx = rng.gen_range(-0.5..0.5) * b.size[0];
    let ly = rng.gen_range(-0.5..0.5) * b.size[1];
    let lz = rng.gen_range(-0.5..0.5) * b.size[2];
    let (s, c) = b.heading.sin_cos();
    [
        c * lx - s * ly + b.center[0],
        s * lx + c * ly + b.center[1],
        lz + b.center[2],
    ]
}

/// Generates scene `index` of a deterministic corpus. Equal
/// `(seed, index, catalog, cfg)` always produces the identical scene.
pub fn generate_scene(
    seed: u64,
    index: usize,
    catalog: &[ClassSpec],
    cfg: &SynthConfig,
) -> Result<Scene> {
    if catalog.is_empty() {
        return Err(Error::Config("class catalog is empty".to_string()));
    }
    if cfg.min_objects == 0 || cfg.min_objects > cfg.max_objects {
        return Err(Error::Config(format!(
            "object count range {}..={} is invalid",
            cfg.min_objects, cfg.max_objects
        )));
    }
    if !(0.0..1.0).contains(&cfg.background_frac) {
        return Err(Error::Config("background_frac must be in [0, 1)".to_string()));
    }
    let companion_of: Vec<Option<usize>> = {
        let mut map = vec![None; catalog.len()];
        for pair in &cfg.companion_pairs {
            let host = catalog.iter().position(|c| c.name == pair[0]);
            let comp = catalog.iter().position(|c| c.name == pair[1]);
            match (host, comp) {
                (Some(h), Some(c)) => map[h] = Some(c),
                _ => {
                    return Err(Error::Config(format!(
                        "companion pair [{}, {}] names a class missing from the catalog",
                        pair[0], pair[1]
                    )))
                }
            }
        }
        map
    };
    let mut rng = rng::stream(seed, &format!("synth/scene/{index}"));

    // Place objects with rejection sampling; a fresh layout is attempted if
    // the room jams (practically never at <= 6 furniture-sized objects).
    let n_objects = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let mut objects: Vec<GroundTruth> = Vec::new();
    'layout: for _ in 0..20 {
        objects.clear();
        let mut pending: Option<(usize, OrientedBox)> = None;
        for _ in 0..n_objects {
            let mut placed = false;
            let seat = pending.take();
            for attempt in 0..200 {
                let (class, bbox) = match &seat {
                    // Seat a companion beside its host for the early
                    // attempts; fall back to free placement if the host's
                    // neighborhood is jammed.
                    Some((comp, host)) if attempt < 100 => {
                        (*comp, sample_adjacent_box(&mut rng, &catalog[*comp], host, cfg))
                    }
                    _ => {
                        let class = rng.gen_range(0..catalog.len());
                        (class, sample_box(&mut rng, &catalog[class], cfg))
                    }
                };
                let clear = objects
                    .iter()
                    .all(|o| iou(&grown(&bbox, PLACEMENT_GAP), &grown(&o.bbox, PLACEMENT_GAP)) == 0.0);
                if clear {
                    if let Some(c) = companion_of[class] {
                        if rng.gen_bool(cfg.companion_prob.clamp(0.0, 1.0)) {
                            pending = Some((c, bbox));
                        }
                    }
                    objects.push(GroundTruth { bbox, class });
                    placed = true;
                    break;
                }
            }
            if !placed {
                continue 'layout;
            }
        }
        break;
    }
    if objects.len() != n_objects {
        return Err(Error::Scene(format!(
            "could not place {n_objects} objects in a {}m room",
            2.0 * cfg.room_half
        )));
    }

    // Split the point budget: background first, remainder as evenly as
    // possible across objects.
    let n_bg = ((cfg.n_points as f64) * cfg.background_frac).round() as usize;
    let n_obj_total = cfg.n_points - n_bg;
    if n_obj_total < n_objects {
        return Err(Error::Config(format!(
            "{} points cannot cover {} objects",
            cfg.n_points, n_objects
        )));
    }
    let base = n_obj_total / n_objects;
    let extra = n_obj_total % n_objects;

    let mut points = Vec::with_capacity(cfg.n_points);
    for (i, obj) in objects.iter().enumerate() {
        let count = base + usize::from(i < extra);
        for _ in 0..count {
            points.push(sample_point_in_box(&mut rng, &obj.bbox));
        }
    }
    // Floor points with a sprinkle of volumetric clutter.
    for i in 0..n_bg {
        if i % 8 == 0 {
            points.push([
                rng.gen_range(-cfg.room_half..=cfg.room_half),
                rng.gen_range(-cfg.room_half..=cfg.room_half),
                rng.gen_range(0.0..=2.2),
            ]);
        } else {
            points.push([
                rng.gen_range(-cfg.room_half..=cfg.room_half),
                rng.gen_range(-cfg.room_half..=cfg.room_half),
                rng.gen_range(0.0..=0.02),
            ]);
        }
    }
    debug_assert_eq!(points.len(), cfg.n_points);

    Ok(Scene { points, objects })
}

fn transform_scene(scene: &Scene, f: impl Fn([f64; 3]) -> [f64; 3], g: impl Fn(&OrientedBox) -> OrientedBox) -> Scene {
    Scene {
        points: scene.points.iter().map(|&p| f(p)).collect(),
        objects: scene
            .objects
            .iter()
            .map(|o| GroundTruth { bbox: g(&o.bbox), class: o.class })
            .collect(),
    }
}

/// Random flip / rotation / scale. Containment of points in boxes is exactly
/// preserved (all transforms are isometries times a uniform scale).
pub fn augment(scene: &Scene, aug: &AugmentConfig, rng: &mut ChaCha12Rng) -> Scene {
    let mut out = scene.clone();
    if aug.flip_x && rng.gen_bool(0.5) {
        out = transform_scene(
            &out,
            |p| [-p[0], p[1], p[2]],
            |b| OrientedBox {
                center: [-b.center[0], b.center[1], b.center[2]],
                size: b.size,
                heading: normalize_angle(std::f64::consts::PI - b.heading),
            },
        );
    }
    if aug.flip_y && rng.gen_bool(0.5) {
        out = transform_scene(
            &out,
            |p| [p[0], -p[1], p[2]],
            |b| OrientedBox {
                center: [b.center[0], -b.center[1], b.center[2]],
                size: b.size,
                heading: normalize_angle(-b.heading),
            },
        );
    }
    if aug.max_rotation > 0.0 {
        let theta = rng.gen_range(-aug.max_rotation..=aug.max_rotation);
        let (s, c) = theta.sin_cos();
        out = transform_scene(
            &out,
            |p| [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]],
            |b| OrientedBox {
                center: [
                    c * b.center[0] - s * b.center[1],
                    s * b.center[0] + c * b.center[1],
                    b.center[2],
                ],
                size: b.size,
                heading: normalize_angle(b.heading + theta),
            },
        );
    }
    if aug.scale_hi > aug.scale_lo || aug.scale_lo != 1.0 {
        let k = rng.gen_range(aug.scale_lo..=aug.scale_hi);
        out = transform_scene(
            &out,
            |p| [k * p[0], k * p[1], k * p[2]],
            |b| OrientedBox {
                center: [k * b.center[0], k * b.center[1], k * b.center[2]],
                size: [k * b.size[0], k * b.size[1], k * b.size[2]],
                heading: b.heading,
            },
        );
    }
    out
}

impl Scene {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// ASCII PLY with double x/y/z; ground truth is not representable here.
    pub fn save_ply(&self, path: &Path) -> Result<()> {
        use std::fmt::Write as _;
        let mut s = String::new();
        s.push_str("ply\nformat ascii 1.0\n");
        let _ = writeln!(s, "element vertex {}", self.points.len());
        s.push_str("property double x\nproperty double y\nproperty double z\nend_header\n");
        for p in &self.points {
            let _ = writeln!(s, "{} {} {}", p[0], p[1], p[2]);
        }
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        fs::write(path, s)?;
        Ok(())
    }

    pub fn load_ply(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines();
        let mut vertex_count: Option<usize> = None;
        let mut saw_format = false;
        for line in lines.by_ref() {
            let line = line.trim();
            if line == "end_header" {
                break;
            }
            if let Some(rest) = line.strip_prefix("format ") {
                if !rest.starts_with("ascii") {
                    return Err(Error::Scene(format!(
                        "{}: only ascii PLY is supported",
                        path.display()
                    )));
                }
                saw_format = true;
            }
            if let Some(rest) = line.strip_prefix("element vertex ") {
                vertex_count = Some(rest.trim().parse().map_err(|_| {
                    Error::Scene(format!("{}: bad vertex count '{rest}'", path.display()))
                })?);
            }
        }
        if !saw_format {
            return Err(Error::Scene(format!("{}: missing PLY format line", path.display())));
        }
        let n = vertex_count
            .ok_or_else(|| Error::Scene(format!("{}: missing vertex element", path.display())))?;
        let mut points = Vec::with_capacity(n);
        for line in lines.take(n) {
            let mut it = line.split_whitespace();
            let mut coord = [0.0f64; 3];
            for c in &mut coord {
                let tok = it.next().ok_or_else(|| {
                    Error::Scene(format!("{}: truncated vertex line '{line}'", path.display()))
                })?;
                *c = tok.parse().map_err(|_| {
                    Error::Scene(format!("{}: bad coordinate '{tok}'", path.display()))
                })?;
            }
            points.push(coord);
        }
        if points.len() != n {
            return Err(Error::Scene(format!(
                "{}: expected {n} vertices, found {}",
                path.display(),
                points.len()
            )));
        }
        Ok(Scene { points, objects: Vec::new() })
    }

    /// Reads `.json` or `.ply` by extension.
    pub fn load(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Self::load_json(path),
            Some("ply") => Self::load_ply(path),
            other => Err(Error::Scene(format!(
                "{}: unsupported scene extension {:?}",
                path.display(),
                other
            ))),
        }
    }
}
