//! Run configuration: model dimensions, loss weights, training schedule,
//! scene synthesis, and evaluation settings.
//!
//! Configs come from named presets (`paper-sun`, `paper-scannet`, `desk`,
//! `desk-overfit`) or from a TOML file. A file may start from a preset and
//! override fields:
//!
//! ```toml
//! preset = "desk"
//!
//! [train]
//! epochs = 10
//! ```
//!
//! Without a `preset` key the file must spell out the entire config.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scene::{AugmentConfig, ClassSpec, SynthConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionMode {
    /// Pairs farther apart than the cutoff get zero pre-normalization weight.
    Mask,
    /// Learned projection of a fixed positional encoding of the pair.
    Encoding,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    /// Points kept by each set-abstraction layer, outermost first.
    pub sa_npoints: Vec<usize>,
    /// Ball-query radius per set-abstraction layer.
    pub sa_radii: Vec<f64>,
    /// Neighbors gathered per center per set-abstraction layer.
    pub sa_nsamples: Vec<usize>,
    /// Per-layer MLP widths; the last width is the layer's output dim.
    pub sa_mlps: Vec<Vec<usize>>,
    /// Feature-propagation MLP widths, applied from the deepest layer back
    /// toward the seed layer. Seeds live at layer `len(sa) - 1 - len(fp)`.
    pub fp_mlps: Vec<Vec<usize>>,
    /// Hidden widths of the per-seed head (its output width is fixed at
    /// feature dim + 6: refined feature, center offset, direction).
    pub seed_mlp: Vec<usize>,
    /// M: number of seed points after feature propagation.
    pub num_seeds: usize,
    /// K_c: number of object proposals.
    pub num_proposals: usize,
    /// Ball radius used when grouping predicted centers into proposals.
    pub cluster_radius: f64,
    /// Max seeds aggregated into one proposal.
    pub cluster_nsample: usize,
    /// Hidden widths of the proposal decode MLP.
    pub proposal_mlp: Vec<usize>,
    /// NH: heading bins over a full turn.
    pub num_heading_bins: usize,
    /// N_R: points sampled inside each proposal for attention pooling.
    pub pool_points: usize,
    /// d2: pooled appearance feature width.
    pub d_appearance: usize,
    /// d_s: semantic pair-feature width inside pooling.
    pub d_semantic: usize,
    /// d_l: layout pair-feature width inside pooling.
    pub d_layout: usize,
    /// d_p: positional pair-embedding width inside each relation graph.
    pub d_position: usize,
    /// d_a: attention projection width inside each relation graph.
    pub d_attention: usize,
    /// N_g: number of parallel relation graphs (0 disables refinement).
    pub num_graphs: usize,
    pub position_mode: PositionMode,
    /// Distance cutoff factor: cutoff = delta_scale * scene bounding-box
    /// diagonal.
    pub delta_scale: f64,
    /// true: normalize pair weights over sources, then over targets;
    /// false: plain row softmax.
    pub affinity_double_norm: bool,
    /// Direction-target sign: true trains seed directions to point away
    /// from the object center, false toward it.
    pub direction_outward: bool,
    /// Adds the supervised affinity term to the loss (weighted by
    /// `lambda_graph`; without this flag that weight is forced to 0).
    pub supervised_graph: bool,
    /// Hidden widths of the refinement decode MLP.
    pub refine_mlp: Vec<usize>,
    /// Running normalization in backbone / head MLPs.
    pub use_norm: bool,
}

impl ModelConfig {
    /// Seed feature width d1 (output of the last feature-propagation MLP).
    pub fn d_seed(&self) -> usize {
        *self
            .fp_mlps
            .last()
            .and_then(|m| m.last())
            .expect("validated: fp_mlps non-empty")
    }

    /// Index of the set-abstraction layer the seeds live at.
    pub fn seed_layer(&self) -> usize {
        self.sa_npoints.len() - 1 - self.fp_mlps.len()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LossConfig {
    pub lambda_objectness: f64,
    pub lambda_box: f64,
    pub lambda_semantic: f64,
    /// Weight of the supervised affinity term; only effective when
    /// `model.supervised_graph` is set.
    pub lambda_graph: f64,
    pub heading_cls_weight: f64,
    pub size_cls_weight: f64,
    /// Proposals closer than this to a true center are positives.
    pub near_thresh: f64,
    /// Proposals farther than this are negatives; in between is ignored.
    pub far_thresh: f64,
    /// Ablation: replace the direction term with plain center-distance
    /// regression (no direction supervision).
    pub direction_distance_only: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_objectness: 0.4,
            lambda_box: 1.0,
            lambda_semantic: 0.2,
            lambda_graph: 0.1,
            heading_cls_weight: 0.1,
            size_cls_weight: 0.1,
            near_thresh: 0.3,
            far_thresh: 0.6,
            direction_distance_only: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Scenes per optimizer step (gradients are averaged).
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs at which the learning rate drops by 10x.
    pub lr_decay_epochs: Vec<usize>,
    pub seed: u64,
    pub augment: bool,
    /// Checkpoint every this many epochs (and at the end).
    pub checkpoint_every: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalConfig {
    /// IoU above which NMS suppresses a lower-scored same-class box.
    pub nms_iou: f64,
    /// IoU threshold for a detection to count as a hit in mAP.
    pub map_iou: f64,
    /// Proposals below this objectness probability are dropped before NMS.
    pub score_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { nms_iou: 0.25, map_iou: 0.25, score_threshold: 0.05 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub augment: AugmentConfig,
    pub eval: EvalConfig,
    pub classes: Vec<ClassSpec>,
}

fn sun_classes() -> Vec<ClassSpec> {
    let spec = |name: &str, size: [f64; 3]| ClassSpec { name: name.to_string(), size };
    vec![
        spec("bathtub", [1.5, 0.75, 0.55]),
        spec("bed", [2.0, 1.6, 0.55]),
        spec("bookshelf", [0.9, 0.3, 1.8]),
        spec("chair", [0.6, 0.6, 0.9]),
        spec("desk", [1.2, 0.6, 0.75]),
        spec("dresser", [1.0, 0.5, 0.9]),
        spec("nightstand", [0.5, 0.4, 0.6]),
        spec("sofa", [1.9, 0.9, 0.8]),
        spec("table", [1.4, 0.8, 0.75]),
        spec("toilet", [0.7, 0.4, 0.8]),
    ]
}

fn scannet_classes() -> Vec<ClassSpec> {
    let spec = |name: &str, size: [f64; 3]| ClassSpec { name: name.to_string(), size };
    vec![
        spec("cabinet", [0.5, 1.0, 1.8]),
        spec("bed", [2.0, 1.6, 0.55]),
        spec("chair", [0.6, 0.6, 0.9]),
        spec("sofa", [1.9, 0.9, 0.8]),
        spec("table", [1.4, 0.8, 0.75]),
        spec("door", [1.0, 0.12, 2.0]),
        spec("window", [1.2, 0.12, 1.2]),
        spec("bookshelf", [0.9, 0.3, 1.8]),
        spec("picture", [0.6, 0.06, 0.5]),
        spec("counter", [1.8, 0.6, 0.9]),
        spec("desk", [1.2, 0.6, 0.75]),
        spec("curtain", [1.5, 0.12, 2.0]),
        spec("refrigerator", [0.7, 0.7, 1.7]),
        spec("shower_curtain", [1.2, 0.12, 1.8]),
        spec("toilet", [0.7, 0.4, 0.8]),
        spec("sink", [0.5, 0.4, 0.3]),
        spec("bathtub", [1.5, 0.75, 0.55]),
        spec("garbage_bin", [0.4, 0.4, 0.5]),
    ]
}

fn desk_classes() -> Vec<ClassSpec> {
    let spec = |name: &str, size: [f64; 3]| ClassSpec { name: name.to_string(), size };
    vec![
        spec("chair", [0.6, 0.6, 0.9]),
        spec("table", [1.4, 0.8, 0.75]),
        spec("sofa", [1.9, 0.9, 0.8]),
        spec("cabinet", [0.5, 1.0, 1.8]),
    ]
}

fn paper_sun() -> RunConfig {
    RunConfig {
        model: ModelConfig {
            sa_npoints: vec![2048, 1024, 512, 256],
            sa_radii: vec![0.2, 0.4, 0.8, 1.2],
            sa_nsamples: vec![64, 32, 16, 16],
            sa_mlps: vec![
                vec![64, 64, 128],
                vec![128, 128, 256],
                vec![128, 128, 256],
                vec![128, 128, 256],
            ],
            fp_mlps: vec![vec![256, 256], vec![256, 256]],
            seed_mlp: vec![256, 256],
            num_seeds: 1024,
            num_proposals: 256,
            cluster_radius: 0.3,
            cluster_nsample: 16,
            proposal_mlp: vec![128, 128],
            num_heading_bins: 12,
            pool_points: 128,
            d_appearance: 256,
            d_semantic: 64,
            d_layout: 32,
            d_position: 256,
            d_attention: 256,
            num_graphs: 3,
            position_mode: PositionMode::Mask,
            delta_scale: 0.25,
            affinity_double_norm: true,
            direction_outward: true,
            supervised_graph: false,
            refine_mlp: vec![128, 128],
            use_norm: true,
        },
        loss: LossConfig::default(),
        train: TrainConfig {
            epochs: 180,
            batch_size: 6,
            lr: 1e-3,
            lr_decay_epochs: vec![100, 160],
            seed: 1,
            augment: true,
            checkpoint_every: 10,
        },
        synth: SynthConfig {
            n_points: 20000,
            room_half: 4.0,
            min_objects: 3,
            max_objects: 8,
            background_frac: 0.4,
            size_jitter: 0.15,
            companion_prob: 0.6,
            companion_pairs: vec![["table".to_string(), "chair".to_string()]],
        },
        augment: AugmentConfig::default(),
        eval: EvalConfig::default(),
        classes: sun_classes(),
    }
}

fn paper_scannet() -> RunConfig {
    let mut cfg = paper_sun();
    cfg.classes = scannet_classes();
    cfg.synth.n_points = 40000;
    cfg
}

fn desk() -> RunConfig {
    RunConfig {
        model: ModelConfig {
            sa_npoints: vec![512, 256, 128, 64],
            sa_radii: vec![0.3, 0.6, 1.2, 1.8],
            sa_nsamples: vec![16, 16, 8, 8],
            sa_mlps: vec![vec![32, 32], vec![64, 64], vec![64, 128], vec![128, 128]],
            fp_mlps: vec![vec![128], vec![64]],
            seed_mlp: vec![64, 64],
            num_seeds: 256,
            num_proposals: 32,
            // A wide grouping ball with a deep member cap lets a cluster
            // anchor that lands near (not on) a vote clump still absorb it,
            // so the member centroid snaps onto the clump and the proposal
            // starts inside the positive band.
            cluster_radius: 0.6,
            cluster_nsample: 32,
            proposal_mlp: vec![64, 64],
            num_heading_bins: 12,
            pool_points: 8,
            d_appearance: 64,
            d_semantic: 16,
            d_layout: 8,
            d_position: 64,
            d_attention: 64,
            num_graphs: 3,
            position_mode: PositionMode::Mask,
            delta_scale: 0.25,
            affinity_double_norm: true,
            direction_outward: true,
            supervised_graph: false,
            refine_mlp: vec![64, 64],
            use_norm: true,
        },
        loss: LossConfig::default(),
        train: TrainConfig {
            epochs: 60,
            batch_size: 1,
            lr: 1e-3,
            lr_decay_epochs: vec![40, 52],
            seed: 1,
            augment: true,
            checkpoint_every: 10,
        },
        synth: SynthConfig {
            companion_prob: 0.6,
            companion_pairs: vec![["table".to_string(), "chair".to_string()]],
            ..SynthConfig::default()
        },
        augment: AugmentConfig::default(),
        eval: EvalConfig::default(),
        classes: desk_classes(),
    }
}

/// `desk` trimmed for fast single-scene-batch overfitting: augmentation off
/// and slimmer feature widths. Proposal geometry (seeds, proposals, graphs)
/// matches `desk`.
fn desk_overfit() -> RunConfig {
    let mut cfg = desk();
    cfg.model.sa_mlps = vec![vec![24, 24], vec![32, 48], vec![48, 64], vec![64, 64]];
    cfg.model.fp_mlps = vec![vec![64], vec![48]];
    cfg.model.seed_mlp = vec![48];
    cfg.model.proposal_mlp = vec![48, 48];
    cfg.model.refine_mlp = vec![48];
    cfg.model.sa_nsamples = vec![16, 12, 8, 8];
    cfg.model.pool_points = 6;
    cfg.model.d_appearance = 32;
    cfg.model.d_semantic = 8;
    cfg.model.d_layout = 4;
    cfg.model.d_position = 32;
    cfg.model.d_attention = 32;
    cfg.train.augment = false;
    cfg.train.epochs = 40;
    cfg.train.lr = 2e-3;
    cfg.train.lr_decay_epochs = vec![30, 36];
    cfg
}

pub const PRESET_NAMES: &[&str] = &["paper-sun", "paper-scannet", "desk", "desk-overfit"];

impl RunConfig {
    pub fn preset(name: &str) -> Result<RunConfig> {
        let cfg = match name {
            "paper-sun" => paper_sun(),
            "paper-scannet" => paper_scannet(),
            "desk" => desk(),
            "desk-overfit" => desk_overfit(),
            other => {
                return Err(Error::Config(format!(
                    "unknown preset '{other}' (available: {})",
                    PRESET_NAMES.join(", ")
                )))
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a preset name or a TOML file path. A file with a `preset` key
    /// starts from that preset and overrides the given fields.
    pub fn load(name_or_path: &str) -> Result<RunConfig> {
        if PRESET_NAMES.contains(&name_or_path) {
            return Self::preset(name_or_path);
        }
        let path = Path::new(name_or_path);
        let text = fs::read_to_string(path).map_err(|e| {
            Error::Config(format!(
                "'{name_or_path}' is neither a preset ({}) nor a readable file: {e}",
                PRESET_NAMES.join(", ")
            ))
        })?;
        let mut parsed: toml::Value =
            toml::from_str(&text).map_err(|e| Error::Toml(e.to_string()))?;
        let cfg = if let Some(preset_name) = parsed
            .as_table()
            .and_then(|t| t.get("preset"))
            .and_then(|v| v.as_str())
            .map(str::to_string)
        {
            let base = Self::preset(&preset_name)?;
            let mut base_value =
                toml::Value::try_from(&base).map_err(|e| Error::Toml(e.to_string()))?;
            if let Some(table) = parsed.as_table_mut() {
                table.remove("preset");
            }
            merge_toml(&mut base_value, parsed);
            base_value
                .try_into::<RunConfig>()
                .map_err(|e| Error::Toml(e.to_string()))?
        } else {
            parsed
                .try_into::<RunConfig>()
                .map_err(|e| Error::Toml(e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Effective supervised-affinity weight: gated by the model flag.
    pub fn lambda_graph_effective(&self) -> f64 {
        if self.model.supervised_graph {
            self.loss.lambda_graph
        } else {
            0.0
        }
    }

    /// Hex SHA-256 over the canonical JSON form; identifies a config in
    /// checkpoints and logs.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let fail = |msg: String| Err(Error::Config(msg));
        let layers = m.sa_npoints.len();
        if layers < 2 {
            return fail("need at least two set-abstraction layers".into());
        }
        if m.sa_radii.len() != layers || m.sa_nsamples.len() != layers || m.sa_mlps.len() != layers
        {
            return fail(format!(
                "sa_npoints/sa_radii/sa_nsamples/sa_mlps lengths differ: {}/{}/{}/{}",
                layers,
                m.sa_radii.len(),
                m.sa_nsamples.len(),
                m.sa_mlps.len()
            ));
        }
        for (i, w) in m.sa_npoints.windows(2).enumerate() {
            if w[1] > w[0] {
                return fail(format!("sa_npoints must not grow (layer {} -> {})", i, i + 1));
            }
        }
        if m.sa_mlps.iter().any(|v| v.is_empty()) || m.fp_mlps.iter().any(|v| v.is_empty()) {
            return fail("every MLP needs at least one width".into());
        }
        if m.fp_mlps.is_empty() || m.fp_mlps.len() >= layers {
            return fail(format!(
                "fp_mlps count must be in 1..{} (got {})",
                layers,
                m.fp_mlps.len()
            ));
        }
        if m.num_seeds != m.sa_npoints[m.seed_layer()] {
            return fail(format!(
                "num_seeds {} must equal sa_npoints[{}] = {}",
                m.num_seeds,
                m.seed_layer(),
                m.sa_npoints[m.seed_layer()]
            ));
        }
        if m.num_proposals == 0 || m.num_proposals > m.num_seeds {
            return fail(format!(
                "num_proposals {} must be in 1..={}",
                m.num_proposals, m.num_seeds
            ));
        }
        if m.cluster_nsample == 0 || m.pool_points == 0 {
            return fail("cluster_nsample and pool_points must be positive".into());
        }
        if m.num_heading_bins == 0 {
            return fail("num_heading_bins must be positive".into());
        }
        for (name, v) in [
            ("d_appearance", m.d_appearance),
            ("d_semantic", m.d_semantic),
            ("d_layout", m.d_layout),
            ("d_position", m.d_position),
            ("d_attention", m.d_attention),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if m.delta_scale <= 0.0 {
            return fail("delta_scale must be positive".into());
        }
        if m.cluster_radius <= 0.0 || m.sa_radii.iter().any(|&r| r <= 0.0) {
            return fail("radii must be positive".into());
        }
        if self.classes.is_empty() {
            return fail("class catalog is empty".into());
        }
        if self
            .classes
            .iter()
            .any(|c| c.size.iter().any(|&s| s <= 0.0))
        {
            return fail("class size templates must be positive".into());
        }
        if self.synth.n_points < m.sa_npoints[0] {
            return fail(format!(
                "n_points {} < first sa layer {}",
                self.synth.n_points, m.sa_npoints[0]
            ));
        }
        let l = &self.loss;
        if !(l.near_thresh > 0.0 && l.near_thresh <= l.far_thresh) {
            return fail(format!(
                "need 0 < near_thresh <= far_thresh (got {} / {})",
                l.near_thresh, l.far_thresh
            ));
        }
        for (name, v) in [
            ("lambda_objectness", l.lambda_objectness),
            ("lambda_box", l.lambda_box),
            ("lambda_semantic", l.lambda_semantic),
            ("lambda_graph", l.lambda_graph),
            ("heading_cls_weight", l.heading_cls_weight),
            ("size_cls_weight", l.size_cls_weight),
        ] {
            if v < 0.0 {
                return fail(format!("{name} must be non-negative"));
            }
        }
        let t = &self.train;
        if t.epochs == 0 || t.batch_size == 0 || t.checkpoint_every == 0 {
            return fail("epochs, batch_size, checkpoint_every must be positive".into());
        }
        if t.lr <= 0.0 {
            return fail("lr must be positive".into());
        }
        let a = &self.augment;
        if !(a.scale_lo > 0.0 && a.scale_lo <= a.scale_hi) {
            return fail(format!("bad scale range [{}, {}]", a.scale_lo, a.scale_hi));
        }
        let e = &self.eval;
        if !(0.0..=1.0).contains(&e.nms_iou) || !(0.0..=1.0).contains(&e.map_iou) {
            return fail("nms_iou and map_iou must be in [0, 1]".into());
        }
        Ok(())
    }
}

fn merge_toml(base: &mut toml::Value, overlay: toml::Value) {
    match (base, overlay) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_toml(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
