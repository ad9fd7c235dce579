//! Proposal stage: per-seed pseudo-center and direction prediction, grouping
//! of pseudo centers into proposal clusters, and decoding of raw head rows
//! into oriented boxes with objectness and semantic logits.

use std::f64::consts::TAU;
use std::ops::Range;

use crate::backbone::{ball_query, farthest_point_sample, mlp, register_mlp, SeedOutput};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::geometry::{normalize_angle, OrientedBox};
use crate::model::Ctx;
use crate::params::ParamStore;
use crate::scene::ClassSpec;
use crate::tensor::{Matrix, Var};

/// Column layout of one raw head row:
/// `[objectness 2 | center offset 3 | direction consensus 3 | heading-bin
/// scores NH | heading residuals NH | size-template scores NS | size
/// residuals 3*NS | semantic NC]` with NS == NC (one template per class).
///
/// The direction-consensus block re-estimates an object-level direction from
/// the aggregated seed directions; it feeds the refinement stage as an input
/// feature and carries no loss of its own.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadLayout {
    pub num_heading_bins: usize,
    pub num_classes: usize,
}

impl HeadLayout {
    pub fn new(num_heading_bins: usize, num_classes: usize) -> HeadLayout {
        assert!(num_heading_bins > 0 && num_classes > 0);
        HeadLayout { num_heading_bins, num_classes }
    }

    pub fn width(&self) -> usize {
        2 + 6 + 2 * self.num_heading_bins + 4 * self.num_classes + self.num_classes
    }

    /// Two logits: [not-object, object].
    pub fn objectness(&self) -> Range<usize> {
        0..2
    }

    /// Center offset from the cluster anchor.
    pub fn center(&self) -> Range<usize> {
        2..5
    }

    /// Object-level direction consensus (input feature for refinement).
    pub fn direction(&self) -> Range<usize> {
        5..8
    }

    pub fn heading_cls(&self) -> Range<usize> {
        let s = 8;
        s..s + self.num_heading_bins
    }

    /// Per-bin residuals, normalized by the bin width.
    pub fn heading_res(&self) -> Range<usize> {
        let s = 8 + self.num_heading_bins;
        s..s + self.num_heading_bins
    }

    pub fn size_cls(&self) -> Range<usize> {
        let s = 8 + 2 * self.num_heading_bins;
        s..s + self.num_classes
    }

    /// Per-template log-scale residuals, 3 per template.
    pub fn size_res(&self) -> Range<usize> {
        let s = 8 + 2 * self.num_heading_bins + self.num_classes;
        s..s + 3 * self.num_classes
    }

    pub fn semantic(&self) -> Range<usize> {
        let s = 8 + 2 * self.num_heading_bins + 4 * self.num_classes;
        s..s + self.num_classes
    }
}

/// Heading angle to (bin, residual / bin width). Bin centers sit at
/// `TAU * b / nh`; the normalized residual lies in [-0.5, 0.5].
pub fn heading_to_bin(theta: f64, nh: usize) -> (usize, f64) {
    let w = TAU / nh as f64;
    let t = theta.rem_euclid(TAU);
    let b = (t / w).round() as usize % nh;
    let res = normalize_angle(t - w * b as f64) / w;
    (b, res)
}

/// Inverse of [`heading_to_bin`]; always lands in [0, TAU).
pub fn heading_from_bin(bin: usize, res_norm: f64, nh: usize) -> f64 {
    let w = TAU / nh as f64;
    (w * bin as f64 + res_norm * w).rem_euclid(TAU)
}

/// Per-axis log-scale residual that decodes back via `template * exp(res)`.
pub fn size_to_residual(size: [f64; 3], template: [f64; 3]) -> [f64; 3] {
    [
        (size[0] / template[0]).ln(),
        (size[1] / template[1]).ln(),
        (size[2] / template[2]).ln(),
    ]
}

/// Unit vector from the object center toward the surface point (`outward`
/// true, the printed form) or the reverse (`outward` false). The direction
/// loss is symmetric under this sign up to the sign of its alignment term.
pub fn gt_direction(g: [f64; 3], g_star: [f64; 3], outward: bool) -> Result<[f64; 3]> {
    let d = [g[0] - g_star[0], g[1] - g_star[1], g[2] - g_star[2]];
    let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    if n == 0.0 {
        return Err(Error::shape("gt_direction", "point coincides with the center"));
    }
    let s = if outward { 1.0 } else { -1.0 };
    Ok([s * d[0] / n, s * d[1] / n, s * d[2] / n])
}

/// Registers the seed head and the proposal decode head.
pub fn register(store: &mut ParamStore, cfg: &ModelConfig, num_classes: usize) -> Result<()> {
    let d1 = cfg.d_seed();
    register_mlp(store, "seed", 3 + d1, &cfg.seed_mlp, cfg.use_norm)?;
    let seed_hidden = *cfg.seed_mlp.last().expect("validated");
    register_mlp(store, "seed/out", seed_hidden, &[d1 + 6], false)?;

    let agg_in = 3 + d1 + 3;
    register_mlp(store, "proposal", agg_in, &cfg.proposal_mlp, cfg.use_norm)?;
    let ph = *cfg.proposal_mlp.last().expect("validated");
    let width = HeadLayout::new(cfg.num_heading_bins, num_classes).width();
    register_mlp(store, "proposal/out", ph, &[width], false)?;
    Ok(())
}

/// Per-seed predictions: refined feature, pseudo center, unit direction.
pub struct SeedPrediction {
    pub xyz: Vec<[f64; 3]>,
    /// f': [num_seeds, d1], residual refinement of the backbone feature.
    pub feat: Var,
    /// g': [num_seeds, 3].
    pub centers: Var,
    /// Snapshot of g' values; drives clustering.
    pub centers_val: Vec<[f64; 3]>,
    /// Unit directions: [num_seeds, 3].
    pub dirs: Var,
}

pub fn predict_seeds(
    ctx: &mut Ctx,
    seeds: &SeedOutput,
    cfg: &ModelConfig,
) -> Result<SeedPrediction> {
    let d1 = cfg.d_seed();
    let m = seeds.xyz.len();
    let xyz = ctx
        .tape
        .leaf(Matrix::from_fn(m, 3, |r, c| seeds.xyz[r][c]));
    let inp = ctx.tape.concat_cols(&[xyz, seeds.feat])?;
    let h = mlp(ctx, "seed", inp, 3 + d1, &cfg.seed_mlp, cfg.use_norm, true)?;
    let seed_hidden = *cfg.seed_mlp.last().expect("validated");
    let out = mlp(ctx, "seed/out", h, seed_hidden, &[d1 + 6], false, false)?;

    let df = ctx.tape.slice_cols(out, 0, d1)?;
    let feat = ctx.tape.add(seeds.feat, df)?;
    let dc = ctx.tape.slice_cols(out, d1, d1 + 3)?;
    let centers = ctx.tape.add(xyz, dc)?;
    let v_raw = ctx.tape.slice_cols(out, d1 + 3, d1 + 6)?;
    let v_len = ctx.tape.row_norm(v_raw, 1e-12)?;
    let dirs = ctx.tape.div_col(v_raw, v_len)?;

    let cv = ctx.tape.value(centers);
    let centers_val = (0..m)
        .map(|r| [cv.get(r, 0), cv.get(r, 1), cv.get(r, 2)])
        .collect();
    Ok(SeedPrediction { xyz: seeds.xyz.clone(), feat, centers, centers_val, dirs })
}

/// Cluster geometry: which seeds form each proposal.
pub struct ClusterSet {
    /// Seed index of each anchor (farthest-point order over pseudo centers).
    pub anchor_idx: Vec<usize>,
    pub anchors: Vec<[f64; 3]>,
    /// Member seed indices, padded to a fixed count by cycling.
    pub members: Vec<Vec<usize>>,
}

pub fn cluster_pseudo_centers(
    centers: &[[f64; 3]],
    k: usize,
    radius: f64,
    nsample: usize,
) -> Result<ClusterSet> {
    if k == 0 || k > centers.len() {
        return Err(Error::shape(
            "cluster",
            format!("need 1..={} clusters, got {k}", centers.len()),
        ));
    }
    let anchor_idx = farthest_point_sample(centers, k);
    let anchors: Vec<[f64; 3]> = anchor_idx.iter().map(|&i| centers[i]).collect();
    let members = ball_query(&anchors, centers, radius, nsample);
    Ok(ClusterSet { anchor_idx, anchors, members })
}

pub struct ProposalOutput {
    pub clusters: ClusterSet,
    /// Regression origin of each proposal: the centroid of its member
    /// pseudo centers. Box offsets in the head are relative to this point.
    pub anchors: Vec<[f64; 3]>,
    /// Raw head rows: [num_proposals, layout.width()].
    pub head: Var,
    pub layout: HeadLayout,
}

/// Groups pseudo centers and decodes each group into one raw head row.
/// Member rows (centroid-relative offset, refined feature, direction) pass
/// through a shared MLP and a channel max, as in the backbone layers.
/// Using the member centroid rather than the sampled cluster seed as the
/// regression origin keeps the origin near the mass of the votes, so more
/// proposals start inside the positive-assignment band around true centers.
pub fn propose(
    ctx: &mut Ctx,
    pred: &SeedPrediction,
    cfg: &ModelConfig,
    num_classes: usize,
) -> Result<ProposalOutput> {
    let clusters = cluster_pseudo_centers(
        &pred.centers_val,
        cfg.num_proposals,
        cfg.cluster_radius,
        cfg.cluster_nsample,
    )?;
    let ns = cfg.cluster_nsample;
    let flat: Vec<usize> = clusters.members.iter().flatten().copied().collect();

    let g_rows = ctx.tape.gather_rows(pred.centers, &flat)?;
    let cent = ctx.tape.block_mean(g_rows, ns)?;
    let cent_rep: Vec<usize> = (0..clusters.members.len())
        .flat_map(|c| std::iter::repeat(c).take(ns))
        .collect();
    let a_rows = ctx.tape.gather_rows(cent, &cent_rep)?;
    let off = ctx.tape.sub(g_rows, a_rows)?;
    let f_rows = ctx.tape.gather_rows(pred.feat, &flat)?;
    let v_rows = ctx.tape.gather_rows(pred.dirs, &flat)?;
    let rows = ctx.tape.concat_cols(&[off, f_rows, v_rows])?;

    let d1 = cfg.d_seed();
    let h = mlp(ctx, "proposal", rows, 3 + d1 + 3, &cfg.proposal_mlp, cfg.use_norm, true)?;
    let pooled = ctx.tape.block_max(h, ns)?;
    let ph = *cfg.proposal_mlp.last().expect("validated");
    let layout = HeadLayout::new(cfg.num_heading_bins, num_classes);
    let head = mlp(ctx, "proposal/out", pooled, ph, &[layout.width()], false, false)?;
    let cv = ctx.tape.value(cent);
    let anchors: Vec<[f64; 3]> = (0..clusters.members.len())
        .map(|r| [cv.get(r, 0), cv.get(r, 1), cv.get(r, 2)])
        .collect();
    Ok(ProposalOutput { clusters, anchors, head, layout })
}

/// One decoded proposal, before score filtering and suppression.
#[derive(Debug, Clone)]
pub struct DecodedProposal {
    pub bbox: OrientedBox,
    /// P(object), from the two objectness logits.
    pub objectness: f64,
    pub class: usize,
    /// P(class | proposal), from the semantic logits.
    pub class_prob: f64,
}

impl DecodedProposal {
    pub fn score(&self) -> f64 {
        self.objectness * self.class_prob
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / s).collect()
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    let _ = xs[best];
    best
}

/// Decodes raw head rows against their anchors. Headings land in [0, TAU),
/// sizes stay strictly positive through the log-scale parametrization.
pub fn decode_head(
    head: &Matrix,
    layout: HeadLayout,
    anchors: &[[f64; 3]],
    classes: &[ClassSpec],
) -> Result<Vec<DecodedProposal>> {
    if head.cols() != layout.width() {
        return Err(Error::shape(
            "decode_head",
            format!("row width {} != layout width {}", head.cols(), layout.width()),
        ));
    }
    if head.rows() != anchors.len() || classes.len() != layout.num_classes {
        return Err(Error::shape(
            "decode_head",
            format!(
                "{} rows / {} anchors / {} classes vs layout {}",
                head.rows(),
                anchors.len(),
                classes.len(),
                layout.num_classes
            ),
        ));
    }
    let nh = layout.num_heading_bins;
    let mut out = Vec::with_capacity(head.rows());
    for r in 0..head.rows() {
        let row = head.row(r);
        let obj = softmax(&row[layout.objectness()]);
        let center_off = &row[layout.center()];
        let center = [
            anchors[r][0] + center_off[0],
            anchors[r][1] + center_off[1],
            anchors[r][2] + center_off[2],
        ];
        let bin = argmax(&row[layout.heading_cls()]);
        let res = row[layout.heading_res()][bin];
        let heading = heading_from_bin(bin, res, nh);
        let tpl = argmax(&row[layout.size_cls()]);
        let sres = &row[layout.size_res()][3 * tpl..3 * tpl + 3];
        let t = classes[tpl].size;
        let size = [t[0] * sres[0].exp(), t[1] * sres[1].exp(), t[2] * sres[2].exp()];
        let sem = softmax(&row[layout.semantic()]);
        let class = argmax(&sem);
        out.push(DecodedProposal {
            bbox: OrientedBox { center, size, heading },
            objectness: obj[1],
            class,
            class_prob: sem[class],
        });
    }
    Ok(out)
}

/// Role of each proposal in the objectness loss, by anchor-to-center
/// distance: within `near` of some true center -> positive (carrying the
/// matched object index), farther than `far` from all -> negative, the band
/// in between -> ignored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectnessTarget {
    Positive(usize),
    Negative,
    Ignore,
}

pub fn assign_objectness(
    anchors: &[[f64; 3]],
    gt_centers: &[[f64; 3]],
    near: f64,
    far: f64,
) -> Vec<ObjectnessTarget> {
    anchors
        .iter()
        .map(|&a| {
            let mut best: Option<(f64, usize)> = None;
            for (i, &g) in gt_centers.iter().enumerate() {
                let d = ((a[0] - g[0]).powi(2) + (a[1] - g[1]).powi(2) + (a[2] - g[2]).powi(2))
                    .sqrt();
                if best.map_or(true, |(bd, _)| d < bd) {
                    best = Some((d, i));
                }
            }
            match best {
                None => ObjectnessTarget::Negative,
                Some((d, i)) if d <= near => ObjectnessTarget::Positive(i),
                Some((d, _)) if d > far => ObjectnessTarget::Negative,
                Some(_) => ObjectnessTarget::Ignore,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Ctx;
    use crate::params::Binder;
    use crate::rng;
    use crate::tensor::gradcheck::{check_named, rand_matrix, FD_TOL};
    use crate::tensor::Tape;
    use rand::Rng;
    use std::collections::BTreeMap;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            sa_npoints: vec![16, 8],
            sa_radii: vec![0.4, 0.8],
            sa_nsamples: vec![4, 4],
            sa_mlps: vec![vec![8], vec![8]],
            fp_mlps: vec![vec![6]],
            seed_mlp: vec![10],
            num_seeds: 16,
            num_proposals: 4,
            cluster_radius: 0.6,
            cluster_nsample: 3,
            proposal_mlp: vec![9],
            num_heading_bins: 4,
            pool_points: 4,
            d_appearance: 8,
            d_semantic: 4,
            d_layout: 4,
            d_position: 8,
            d_attention: 8,
            num_graphs: 2,
            position_mode: crate::config::PositionMode::Mask,
            delta_scale: 0.25,
            affinity_double_norm: true,
            direction_outward: true,
            supervised_graph: false,
            refine_mlp: vec![8],
            use_norm: false,
        }
    }

    fn tiny_classes() -> Vec<ClassSpec> {
        vec![
            ClassSpec { name: "a".into(), size: [0.6, 0.6, 0.9] },
            ClassSpec { name: "b".into(), size: [1.4, 0.8, 0.75] },
        ]
    }

    #[test]
    fn head_width_matches_formula() {
        let l = HeadLayout::new(12, 10);
        assert_eq!(l.width(), 82);
        // The named ranges tile the row exactly.
        assert_eq!(l.objectness().end, l.center().start);
        assert_eq!(l.center().end, l.direction().start);
        assert_eq!(l.direction().end, l.heading_cls().start);
        assert_eq!(l.heading_cls().end, l.heading_res().start);
        assert_eq!(l.heading_res().end, l.size_cls().start);
        assert_eq!(l.size_cls().end, l.size_res().start);
        assert_eq!(l.size_res().end, l.semantic().start);
        assert_eq!(l.semantic().end, l.width());
    }

    #[test]
    fn heading_round_trip_is_exact() {
        let mut r = rng::stream(7, "test/heading");
        for &nh in &[1usize, 4, 12, 24] {
            for _ in 0..500 {
                let theta: f64 = r.gen_range(-10.0..10.0);
                let (bin, res) = heading_to_bin(theta, nh);
                assert!(bin < nh);
                assert!(res.abs() <= 0.5 + 1e-12, "residual {res} out of band");
                let back = heading_from_bin(bin, res, nh);
                assert!((0.0..TAU).contains(&back));
                let diff = normalize_angle(back - theta);
                assert!(diff.abs() < 1e-9, "nh={nh} theta={theta} back={back}");
            }
        }
    }

    #[test]
    fn decode_zero_row_keeps_anchor_and_first_template() {
        let layout = HeadLayout::new(12, 2);
        let head = Matrix::zeros(1, layout.width());
        let anchors = [[1.0, 2.0, 0.5]];
        let classes = tiny_classes();
        let d = decode_head(&head, layout, &anchors, &classes).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].bbox.center, anchors[0]);
        assert_eq!(d[0].bbox.heading, 0.0);
        assert_eq!(d[0].bbox.size, classes[0].size);
        assert!((d[0].objectness - 0.5).abs() < 1e-12);
        assert!((d[0].class_prob - 0.5).abs() < 1e-12);
    }

    #[test]
    fn decode_one_hot_bin_three_gives_quarter_turn() {
        let layout = HeadLayout::new(12, 2);
        let mut head = Matrix::zeros(1, layout.width());
        head.set(0, layout.heading_cls().start + 3, 1.0);
        let d = decode_head(&head, layout, &[[0.0; 3]], &tiny_classes()).unwrap();
        assert!((d[0].bbox.heading - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
    }

    #[test]
    fn decode_applies_size_residual_to_chosen_template() {
        let layout = HeadLayout::new(4, 2);
        let mut head = Matrix::zeros(1, layout.width());
        head.set(0, layout.size_cls().start + 1, 3.0);
        let sres = layout.size_res().start + 3;
        head.set(0, sres, 0.2);
        head.set(0, sres + 1, -0.1);
        head.set(0, sres + 2, 0.0);
        let classes = tiny_classes();
        let d = decode_head(&head, layout, &[[0.0; 3]], &classes).unwrap();
        let t = classes[1].size;
        let expect = [t[0] * 0.2f64.exp(), t[1] * (-0.1f64).exp(), t[2]];
        for k in 0..3 {
            assert!((d[0].bbox.size[k] - expect[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn decode_rejects_wrong_width() {
        let layout = HeadLayout::new(12, 2);
        let head = Matrix::zeros(1, layout.width() + 1);
        assert!(decode_head(&head, layout, &[[0.0; 3]], &tiny_classes()).is_err());
    }

    #[test]
    fn gt_direction_matches_hand_cases() {
        assert_eq!(gt_direction([1.0, 0.0, 0.0], [0.0; 3], true).unwrap(), [1.0, 0.0, 0.0]);
        let v = gt_direction([0.0, 3.0, 4.0], [0.0; 3], true).unwrap();
        assert!((v[1] - 0.6).abs() < 1e-15 && (v[2] - 0.8).abs() < 1e-15);
        let w = gt_direction([1.0, 0.0, 0.0], [0.0; 3], false).unwrap();
        assert_eq!(w, [-1.0, 0.0, 0.0]);
        assert!(gt_direction([1.0, 1.0, 1.0], [1.0, 1.0, 1.0], true).is_err());
    }

    #[test]
    fn objectness_band_assignment() {
        let gt = [[0.0, 0.0, 0.0]];
        let targets = assign_objectness(
            &[[0.0, 0.0, 0.0], [0.45, 0.0, 0.0], [0.7, 0.0, 0.0]],
            &gt,
            0.3,
            0.6,
        );
        assert_eq!(targets[0], ObjectnessTarget::Positive(0));
        assert_eq!(targets[1], ObjectnessTarget::Ignore);
        assert_eq!(targets[2], ObjectnessTarget::Negative);
        let empty = assign_objectness(&[[0.0; 3]], &[], 0.3, 0.6);
        assert_eq!(empty[0], ObjectnessTarget::Negative);
    }

    #[test]
    fn clustering_partitions_separated_blobs() {
        let mut r = rng::stream(11, "test/blobs");
        let mut pts: Vec<[f64; 3]> = Vec::new();
        for i in 0..40 {
            let base = if i < 20 { [0.0, 0.0, 0.0] } else { [5.0, 0.0, 0.0] };
            // Blob diameter stays under the query radius, so each anchor
            // must cover its entire blob.
            pts.push([
                base[0] + r.gen_range(-0.1..0.1),
                base[1] + r.gen_range(-0.1..0.1),
                base[2] + r.gen_range(-0.1..0.1),
            ]);
        }
        let cs = cluster_pseudo_centers(&pts, 2, 0.5, 20).unwrap();
        for (ci, members) in cs.members.iter().enumerate() {
            let blob_of = |i: usize| i >= 20;
            let anchor_blob = blob_of(cs.anchor_idx[ci]);
            let mut seen: Vec<usize> = members.clone();
            seen.sort_unstable();
            seen.dedup();
            assert_eq!(seen.len(), 20, "cluster should cover its whole blob");
            assert!(seen.iter().all(|&m| blob_of(m) == anchor_blob));
        }
    }

    #[test]
    fn clustering_rejects_more_clusters_than_points() {
        let pts = [[0.0; 3], [1.0, 0.0, 0.0]];
        assert!(cluster_pseudo_centers(&pts, 3, 0.5, 2).is_err());
        assert!(cluster_pseudo_centers(&pts, 0, 0.5, 2).is_err());
    }

    #[test]
    fn clustering_is_translation_equivariant() {
        let mut r = rng::stream(3, "test/translate");
        let pts: Vec<[f64; 3]> = (0..60)
            .map(|_| [r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0), r.gen_range(-1.0..1.0)])
            .collect();
        let t = [1.25, -0.5, 2.0];
        let moved: Vec<[f64; 3]> = pts
            .iter()
            .map(|p| [p[0] + t[0], p[1] + t[1], p[2] + t[2]])
            .collect();
        let a = cluster_pseudo_centers(&pts, 8, 0.7, 6).unwrap();
        let b = cluster_pseudo_centers(&moved, 8, 0.7, 6).unwrap();
        assert_eq!(a.anchor_idx, b.anchor_idx);
        assert_eq!(a.members, b.members);
        for (pa, pb) in a.anchors.iter().zip(&b.anchors) {
            for k in 0..3 {
                assert_eq!(pa[k] + t[k], pb[k]);
            }
        }
    }

    #[test]
    fn coincident_centers_collapse_to_single_cluster_on_target() {
        let g_star = [0.4, -0.2, 0.9];
        let pts = vec![g_star; 12];
        let cs = cluster_pseudo_centers(&pts, 1, 0.3, 12).unwrap();
        assert_eq!(cs.anchors[0], g_star);
        let mut covered: Vec<usize> = cs.members[0].clone();
        covered.sort_unstable();
        covered.dedup();
        assert_eq!(covered.len(), 12);
    }

    /// Runs the seed head and proposal head on synthetic backbone output.
    fn run_stage(
        store: &ParamStore,
        cfg: &ModelConfig,
        xyz: &[[f64; 3]],
        feat: &Matrix,
        train: bool,
    ) -> Result<(f64, Option<BTreeMap<String, Matrix>>, Matrix)> {
        let mut store = store.clone();
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let mut ctx = if train {
            Ctx::train(&mut tape, &mut binder, &mut store)
        } else {
            Ctx::eval(&mut tape, &mut binder, &mut store)
        };
        let seeds = SeedOutput { xyz: xyz.to_vec(), feat: ctx.tape.leaf(feat.clone()) };
        let pred = predict_seeds(&mut ctx, &seeds, cfg)?;
        let out = propose(&mut ctx, &pred, cfg, 2)?;
        let hm = ctx.tape.mean_all(out.head)?;
        let cm = ctx.tape.mean_all(pred.centers)?;
        let dm = ctx.tape.mean_all(pred.dirs)?;
        let s1 = ctx.tape.add(hm, cm)?;
        let loss = ctx.tape.add(s1, dm)?;
        let val = tape.scalar_value(loss);
        let dirs_val = tape.value(pred.dirs).clone();
        let grads = if train {
            let g = tape.backward(loss)?;
            Some(binder.collect_grads(&tape, &store, &g)?)
        } else {
            None
        };
        Ok((val, grads, dirs_val))
    }

    fn fixture(cfg: &ModelConfig) -> (Vec<[f64; 3]>, Matrix) {
        let mut r = rng::stream(5, "test/proposal-fixture");
        let xyz: Vec<[f64; 3]> = (0..cfg.num_seeds)
            .map(|_| [r.gen_range(-1.5..1.5), r.gen_range(-1.5..1.5), r.gen_range(0.0..1.0)])
            .collect();
        let feat = rand_matrix(&mut r, cfg.num_seeds, cfg.d_seed(), -0.8, 0.8);
        (xyz, feat)
    }

    #[test]
    fn predicted_directions_are_unit_and_centers_finite() {
        let cfg = tiny_cfg();
        let (xyz, feat) = fixture(&cfg);
        let mut store = ParamStore::new(42);
        register(&mut store, &cfg, 2).unwrap();
        let (_, _, dirs) = run_stage(&store, &cfg, &xyz, &feat, false).unwrap();
        for r in 0..dirs.rows() {
            let row = dirs.row(r);
            let n = (row[0] * row[0] + row[1] * row[1] + row[2] * row[2]).sqrt();
            assert!((n - 1.0).abs() < 1e-6, "row {r}: |v| = {n}");
        }
    }

    #[test]
    fn registration_covers_every_stage_parameter() {
        let cfg = tiny_cfg();
        let (xyz, feat) = fixture(&cfg);
        let mut store = ParamStore::new(42);
        register(&mut store, &cfg, 2).unwrap();
        let before: Vec<String> = store.names().map(str::to_string).collect();
        run_stage(&store, &cfg, &xyz, &feat, false).unwrap();
        let after: Vec<String> = store.names().map(str::to_string).collect();
        assert_eq!(before, after, "forward pass must not invent parameters");
    }

    #[test]
    fn gradients_flow_through_seed_and_proposal_heads() {
        let cfg = tiny_cfg();
        let (xyz, feat) = fixture(&cfg);
        let mut store = ParamStore::new(42);
        register(&mut store, &cfg, 2).unwrap();
        let names = store.trainable_names();
        assert!(names.iter().any(|n| n.starts_with("seed/")));
        assert!(names.iter().any(|n| n.starts_with("proposal/")));
        let mut r = rng::stream(42, "test/proposal-gradcheck");
        check_named("proposal", &store, &names, 40, FD_TOL, &mut r, |s, want_grads| {
            let (v, g, _) = run_stage(s, &cfg, &xyz, &feat, want_grads)?;
            Ok((v, g))
        })
        .unwrap();
    }
}
