//! Training objectives: seed direction loss, proposal objectness and
//! semantic cross-entropies, the box regression bundle, and the weighted
//! total that also folds in graph supervision.

use log::warn;

use crate::config::LossConfig;
use crate::error::{Error, Result};
use crate::metrics::GroundTruth;
use crate::proposal::{
    assign_objectness, gt_direction, heading_to_bin, size_to_residual, HeadLayout,
    ObjectnessTarget, SeedPrediction,
};
use crate::scene::ClassSpec;
use crate::tensor::{Matrix, Tape, Var};

/// Transition point of every smooth-L1 term, in normalized units.
pub const SMOOTH_L1_BETA: f64 = 1.0;
/// A seed point may sit inside several boxes; only this many nearest
/// centers compete for its direction target.
pub const MAX_DIRECTION_CANDIDATES: usize = 3;

/// Mean over on-object seeds of (center distance - direction alignment).
/// Each on-object seed contributes `|g' - g*| - v . v*`, with `g*` the
/// candidate center minimizing the first term and `v*` the unit vector
/// between the seed and that center (sign per `outward`). Bounded below by
/// -1, attained only at zero offset and perfect alignment. With
/// `distance_only` the alignment credit is dropped (ablation).
pub fn direction_loss(
    tape: &mut Tape,
    pred: &SeedPrediction,
    objects: &[GroundTruth],
    outward: bool,
    distance_only: bool,
) -> Result<Var> {
    let mut rows: Vec<usize> = Vec::new();
    let mut g_star: Vec<[f64; 3]> = Vec::new();
    let mut v_star: Vec<[f64; 3]> = Vec::new();
    for (i, &g) in pred.xyz.iter().enumerate() {
        let candidates: Vec<&GroundTruth> = objects
            .iter()
            .filter(|o| o.bbox.contains(g))
            .take(MAX_DIRECTION_CANDIDATES)
            .collect();
        if candidates.is_empty() {
            continue;
        }
        let gp = pred.centers_val[i];
        let best = candidates
            .iter()
            .map(|o| {
                let c = o.bbox.center;
                let d2 = (gp[0] - c[0]).powi(2) + (gp[1] - c[1]).powi(2) + (gp[2] - c[2]).powi(2);
                (d2, c)
            })
            .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal))
            .expect("non-empty candidates");
        rows.push(i);
        g_star.push(best.1);
        v_star.push(gt_direction(g, best.1, outward)?);
    }
    if rows.is_empty() {
        return Err(Error::shape("direction_loss", "no seed lies on any object"));
    }
    let n = rows.len();
    let g_rows = tape.gather_rows(pred.centers, &rows)?;
    let targets = tape.leaf(Matrix::from_fn(n, 3, |r, c| g_star[r][c]));
    let neg_targets = tape.scale(targets, -1.0)?;
    let diff = tape.add(g_rows, neg_targets)?;
    let dist = tape.row_norm(diff, 1e-12)?;
    if distance_only {
        return tape.mean_all(dist);
    }
    let v_rows = tape.gather_rows(pred.dirs, &rows)?;
    let v_t = tape.leaf(Matrix::from_fn(n, 3, |r, c| v_star[r][c]));
    let prod = tape.mul(v_rows, v_t)?;
    let align = tape.row_sum(prod)?;
    let term = tape.sub(dist, align)?;
    tape.mean_all(term)
}

/// Per-stage classification and regression losses of one head output.
pub struct StageLosses {
    pub obj: Var,
    pub sem: Var,
    pub c_reg: Var,
    pub h_cls: Var,
    pub h_reg: Var,
    pub s_cls: Var,
    pub s_reg: Var,
    /// c_reg + w_h*h_cls + h_reg + w_s*s_cls + s_reg.
    pub box_total: Var,
    pub n_pos: usize,
}

/// Losses of one decode head against the scene objects. Positive/negative
/// roles come from anchor-to-center distance; box and semantic terms average
/// over positives only and contribute zero (with a warning) when there are
/// none.
pub fn stage_losses(
    tape: &mut Tape,
    head: Var,
    layout: HeadLayout,
    anchors: &[[f64; 3]],
    objects: &[GroundTruth],
    classes: &[ClassSpec],
    cfg: &LossConfig,
) -> Result<StageLosses> {
    let kc = anchors.len();
    if tape.value(head).rows() != kc || tape.value(head).cols() != layout.width() {
        return Err(Error::shape(
            "stage_losses",
            format!(
                "head {} vs {} anchors * width {}",
                tape.value(head).shape_str(),
                kc,
                layout.width()
            ),
        ));
    }
    let centers: Vec<[f64; 3]> = objects.iter().map(|o| o.bbox.center).collect();
    let assign = assign_objectness(anchors, &centers, cfg.near_thresh, cfg.far_thresh);

    let mut obj_targets = vec![0usize; kc];
    let mut obj_weights = vec![0.0f64; kc];
    let mut pos = vec![0.0f64; kc];
    let mut matched: Vec<Option<usize>> = vec![None; kc];
    for (i, a) in assign.iter().enumerate() {
        match *a {
            ObjectnessTarget::Positive(g) => {
                obj_targets[i] = 1;
                obj_weights[i] = 1.0;
                pos[i] = 1.0;
                matched[i] = Some(g);
            }
            ObjectnessTarget::Negative => {
                obj_weights[i] = 1.0;
            }
            ObjectnessTarget::Ignore => {}
        }
    }
    if obj_weights.iter().all(|&w| w == 0.0) {
        return Err(Error::shape("stage_losses", "every proposal is ignored"));
    }
    let n_pos = pos.iter().filter(|&&w| w > 0.0).count();
    if n_pos == 0 {
        warn!("no positive proposals; box and semantic losses are zero this step");
    }

    let obj_slice = tape.slice_cols(head, layout.objectness().start, layout.objectness().end)?;
    let obj = tape.cross_entropy_rows(obj_slice, &obj_targets, &obj_weights)?;

    let nh = layout.num_heading_bins;
    let nc = layout.num_classes;
    let mut c_target = Matrix::zeros(kc, 3);
    let mut h_bins = vec![0usize; kc];
    let mut h_onehot = Matrix::zeros(kc, nh);
    let mut h_target = Matrix::zeros(kc, 1);
    let mut cls_targets = vec![0usize; kc];
    let mut s_mask = Matrix::zeros(kc, 3 * nc);
    let mut s_target = Matrix::zeros(kc, 3 * nc);
    for i in 0..kc {
        let Some(g) = matched[i] else { continue };
        let o = &objects[g];
        for c in 0..3 {
            c_target.set(i, c, o.bbox.center[c] - anchors[i][c]);
        }
        let (bin, res) = heading_to_bin(o.bbox.heading, nh);
        h_bins[i] = bin;
        h_onehot.set(i, bin, 1.0);
        h_target.set(i, 0, res);
        cls_targets[i] = o.class;
        let sres = size_to_residual(o.bbox.size, classes[o.class].size);
        for c in 0..3 {
            s_mask.set(i, 3 * o.class + c, 1.0);
            s_target.set(i, 3 * o.class + c, sres[c]);
        }
    }

    let c_slice = tape.slice_cols(head, layout.center().start, layout.center().end)?;
    let c_reg = tape.smooth_l1(c_slice, &c_target, &pos, SMOOTH_L1_BETA)?;

    let hc_slice = tape.slice_cols(head, layout.heading_cls().start, layout.heading_cls().end)?;
    let h_cls = tape.cross_entropy_rows(hc_slice, &h_bins, &pos)?;

    let hr_slice = tape.slice_cols(head, layout.heading_res().start, layout.heading_res().end)?;
    let h_mask = tape.leaf(h_onehot);
    let hr_masked = tape.mul(hr_slice, h_mask)?;
    let hr_sel = tape.row_sum(hr_masked)?;
    let h_reg = tape.smooth_l1(hr_sel, &h_target, &pos, SMOOTH_L1_BETA)?;

    let sc_slice = tape.slice_cols(head, layout.size_cls().start, layout.size_cls().end)?;
    let s_cls = tape.cross_entropy_rows(sc_slice, &cls_targets, &pos)?;

    let sr_slice = tape.slice_cols(head, layout.size_res().start, layout.size_res().end)?;
    let sr_mask = tape.leaf(s_mask);
    let sr_masked = tape.mul(sr_slice, sr_mask)?;
    let s_reg = tape.smooth_l1(sr_masked, &s_target, &pos, SMOOTH_L1_BETA)?;

    let sem_slice = tape.slice_cols(head, layout.semantic().start, layout.semantic().end)?;
    let sem = tape.cross_entropy_rows(sem_slice, &cls_targets, &pos)?;

    let h_cls_w = tape.scale(h_cls, cfg.heading_cls_weight)?;
    let s_cls_w = tape.scale(s_cls, cfg.size_cls_weight)?;
    let mut box_total = tape.add(c_reg, h_cls_w)?;
    box_total = tape.add(box_total, h_reg)?;
    box_total = tape.add(box_total, s_cls_w)?;
    box_total = tape.add(box_total, s_reg)?;

    Ok(StageLosses { obj, sem, c_reg, h_cls, h_reg, s_cls, s_reg, box_total, n_pos })
}

/// Every component value of one training step, for logs and assertions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub dir: f64,
    pub obj: f64,
    pub box_total: f64,
    pub c_reg: f64,
    pub h_cls: f64,
    pub h_reg: f64,
    pub s_cls: f64,
    pub s_reg: f64,
    pub sem: f64,
    pub sup: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str =
        "loss_total,loss_dir,loss_obj,loss_box,loss_c_reg,loss_h_cls,loss_h_reg,loss_s_cls,loss_s_reg,loss_sem,loss_sup";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.total,
            self.dir,
            self.obj,
            self.box_total,
            self.c_reg,
            self.h_cls,
            self.h_reg,
            self.s_cls,
            self.s_reg,
            self.sem,
            self.sup
        )
    }
}

/// Weighted total over all stages:
/// `dir + w_obj * sum(obj) + w_box * sum(box) + w_sem * sum(sem) + w_sup * sup`.
/// Components must be finite; the offender is named otherwise.
pub fn total_loss(
    tape: &mut Tape,
    dir: Var,
    stages: &[StageLosses],
    sup: Option<Var>,
    cfg: &LossConfig,
    lambda_sup: f64,
) -> Result<(Var, LossReport)> {
    let mut report = LossReport {
        total: 0.0,
        dir: tape.scalar_value(dir),
        obj: 0.0,
        box_total: 0.0,
        c_reg: 0.0,
        h_cls: 0.0,
        h_reg: 0.0,
        s_cls: 0.0,
        s_reg: 0.0,
        sem: 0.0,
        sup: 0.0,
    };
    let mut total = dir;
    for s in stages {
        report.obj += tape.scalar_value(s.obj);
        report.box_total += tape.scalar_value(s.box_total);
        report.c_reg += tape.scalar_value(s.c_reg);
        report.h_cls += tape.scalar_value(s.h_cls);
        report.h_reg += tape.scalar_value(s.h_reg);
        report.s_cls += tape.scalar_value(s.s_cls);
        report.s_reg += tape.scalar_value(s.s_reg);
        report.sem += tape.scalar_value(s.sem);
        let obj_w = tape.scale(s.obj, cfg.lambda_objectness)?;
        total = tape.add(total, obj_w)?;
        let box_w = tape.scale(s.box_total, cfg.lambda_box)?;
        total = tape.add(total, box_w)?;
        let sem_w = tape.scale(s.sem, cfg.lambda_semantic)?;
        total = tape.add(total, sem_w)?;
    }
    if let Some(sup) = sup {
        report.sup = tape.scalar_value(sup);
        let sup_w = tape.scale(sup, lambda_sup)?;
        total = tape.add(total, sup_w)?;
    }
    report.total = tape.scalar_value(total);
    for (name, v) in [
        ("loss component dir", report.dir),
        ("loss component obj", report.obj),
        ("loss component box", report.box_total),
        ("loss component sem", report.sem),
        ("loss component sup", report.sup),
        ("loss total", report.total),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
    }
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::OrientedBox;
    use crate::model::Ctx;
    use crate::params::{Binder, ParamStore};
    use crate::rng;
    use crate::tensor::gradcheck::{check_named, rand_matrix, FD_TOL};
    use rand::Rng;

    fn obj_at(center: [f64; 3], size: [f64; 3], heading: f64, class: usize) -> GroundTruth {
        GroundTruth { bbox: OrientedBox { center, size, heading }, class }
    }

    fn classes() -> Vec<ClassSpec> {
        vec![
            ClassSpec { name: "a".into(), size: [0.6, 0.6, 0.9] },
            ClassSpec { name: "b".into(), size: [1.4, 0.8, 0.75] },
        ]
    }

    /// SeedPrediction with explicit value leaves; feat is unused by losses.
    fn seed_pred(
        tape: &mut Tape,
        xyz: Vec<[f64; 3]>,
        centers: Vec<[f64; 3]>,
        dirs: Vec<[f64; 3]>,
    ) -> SeedPrediction {
        let n = xyz.len();
        let feat = tape.leaf(Matrix::zeros(n, 1));
        let c = tape.leaf(Matrix::from_fn(n, 3, |r, k| centers[r][k]));
        let d = tape.leaf(Matrix::from_fn(n, 3, |r, k| dirs[r][k]));
        SeedPrediction { xyz, feat, centers: c, centers_val: centers, dirs: d }
    }

    #[test]
    fn direction_loss_hand_cases() {
        let objects = vec![obj_at([0.0; 3], [2.5, 2.5, 2.5], 0.0, 0)];
        // Offset half a meter toward the center, perfectly aligned outward.
        let mut tape = Tape::new();
        let pred = seed_pred(
            &mut tape,
            vec![[1.0, 0.0, 0.0]],
            vec![[0.5, 0.0, 0.0]],
            vec![[1.0, 0.0, 0.0]],
        );
        let l = direction_loss(&mut tape, &pred, &objects, true, false).unwrap();
        assert!((tape.scalar_value(l) + 0.5).abs() < 1e-6);

        // Same offset, anti-aligned.
        let mut tape = Tape::new();
        let pred = seed_pred(
            &mut tape,
            vec![[1.0, 0.0, 0.0]],
            vec![[0.5, 0.0, 0.0]],
            vec![[-1.0, 0.0, 0.0]],
        );
        let l = direction_loss(&mut tape, &pred, &objects, true, false).unwrap();
        assert!((tape.scalar_value(l) - 1.5).abs() < 1e-6);

        // Perfect predictions bottom out at -1.
        let mut tape = Tape::new();
        let pred = seed_pred(
            &mut tape,
            vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            vec![[0.0; 3], [0.0; 3]],
            vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        );
        let l = direction_loss(&mut tape, &pred, &objects, true, false).unwrap();
        assert!((tape.scalar_value(l) + 1.0).abs() < 1e-5);
    }

    #[test]
    fn direction_loss_respects_sign_flag_and_ablation() {
        let objects = vec![obj_at([0.0; 3], [2.5, 2.5, 2.5], 0.0, 0)];
        let mk = |tape: &mut Tape| {
            seed_pred(
                tape,
                vec![[1.0, 0.0, 0.0]],
                vec![[0.5, 0.0, 0.0]],
                vec![[1.0, 0.0, 0.0]],
            )
        };
        let mut tape = Tape::new();
        let pred = mk(&mut tape);
        let inward = direction_loss(&mut tape, &pred, &objects, false, false).unwrap();
        // Inward target flips the alignment sign: 0.5 + 1.
        assert!((tape.scalar_value(inward) - 1.5).abs() < 1e-6);

        let mut tape = Tape::new();
        let pred = mk(&mut tape);
        let dist = direction_loss(&mut tape, &pred, &objects, true, true).unwrap();
        assert!((tape.scalar_value(dist) - 0.5).abs() < 1e-6);
    }

    #[test]
    fn direction_loss_needs_a_surface_seed() {
        let objects = vec![obj_at([0.0; 3], [1.0; 3], 0.0, 0)];
        let mut tape = Tape::new();
        let pred = seed_pred(
            &mut tape,
            vec![[5.0, 5.0, 5.0]],
            vec![[5.0, 5.0, 5.0]],
            vec![[1.0, 0.0, 0.0]],
        );
        assert!(direction_loss(&mut tape, &pred, &objects, true, false).is_err());
    }

    #[test]
    fn direction_loss_picks_the_nearest_candidate_center() {
        // Two overlapping boxes; the pseudo center sits nearer the second.
        let objects = vec![
            obj_at([0.0, 0.0, 0.0], [2.0, 2.0, 2.0], 0.0, 0),
            obj_at([0.8, 0.0, 0.0], [2.0, 2.0, 2.0], 0.0, 1),
        ];
        let g = [0.5, 0.1, 0.0];
        let gp = [0.7, 0.0, 0.0];
        let v: [f64; 3] = [0.3, 0.9, 0.1];
        let vn = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        let v = [v[0] / vn, v[1] / vn, v[2] / vn];
        let mut tape = Tape::new();
        let pred = seed_pred(&mut tape, vec![g], vec![gp], vec![v]);
        let l = direction_loss(&mut tape, &pred, &objects, true, false).unwrap();
        let c = objects[1].bbox.center;
        let dist = ((gp[0] - c[0]).powi(2) + (gp[1] - c[1]).powi(2) + (gp[2] - c[2]).powi(2)).sqrt();
        let vs = crate::proposal::gt_direction(g, c, true).unwrap();
        let expect = dist - (v[0] * vs[0] + v[1] * vs[1] + v[2] * vs[2]);
        assert!((tape.scalar_value(l) - expect).abs() < 1e-6);
    }

    #[test]
    fn direction_loss_is_bounded_below() {
        let mut r = rng::stream(50, "test/dir-bound");
        let objects = vec![obj_at([0.0; 3], [2.0, 2.0, 2.0], 0.3, 0)];
        for _ in 0..50 {
            let n = 6;
            let xyz: Vec<[f64; 3]> = (0..n)
                .map(|_| [r.gen_range(-0.9..0.9), r.gen_range(-0.9..0.9), r.gen_range(-0.9..0.9)])
                .collect();
            let centers: Vec<[f64; 3]> = (0..n)
                .map(|_| [r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0)])
                .collect();
            let dirs: Vec<[f64; 3]> = (0..n)
                .map(|_| {
                    let v: [f64; 3] =
                        [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)];
                    let l = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-6);
                    [v[0] / l, v[1] / l, v[2] / l]
                })
                .collect();
            let mut tape = Tape::new();
            let pred = seed_pred(&mut tape, xyz, centers, dirs);
            let l = direction_loss(&mut tape, &pred, &objects, true, false).unwrap();
            assert!(tape.scalar_value(l) >= -1.0 - 1e-9);
        }
    }

    fn layout2() -> HeadLayout {
        HeadLayout::new(4, 2)
    }

    /// Head row matching `o` exactly when anchored at `anchor`.
    fn perfect_row(layout: HeadLayout, anchor: [f64; 3], o: &GroundTruth, cls: &[ClassSpec]) -> Vec<f64> {
        let mut row = vec![0.0; layout.width()];
        row[layout.objectness().start + 1] = 12.0;
        for c in 0..3 {
            row[layout.center().start + c] = o.bbox.center[c] - anchor[c];
        }
        let (bin, res) = heading_to_bin(o.bbox.heading, layout.num_heading_bins);
        row[layout.heading_cls().start + bin] = 12.0;
        row[layout.heading_res().start + bin] = res;
        row[layout.size_cls().start + o.class] = 12.0;
        let sres = size_to_residual(o.bbox.size, cls[o.class].size);
        for c in 0..3 {
            row[layout.size_res().start + 3 * o.class + c] = sres[c];
        }
        row[layout.semantic().start + o.class] = 12.0;
        row
    }

    #[test]
    fn perfect_head_zeroes_every_regression_term() {
        let layout = layout2();
        let cls = classes();
        let o = obj_at([0.5, -0.3, 0.4], [0.7, 0.5, 1.0], 1.1, 1);
        let anchor = [0.45, -0.25, 0.35];
        let row = perfect_row(layout, anchor, &o, &cls);
        let mut tape = Tape::new();
        let head = tape.leaf(Matrix::new(1, layout.width(), row).unwrap());
        let losses = stage_losses(
            &mut tape,
            head,
            layout,
            &[anchor],
            &[o],
            &cls,
            &LossConfig::default(),
        )
        .unwrap();
        assert_eq!(losses.n_pos, 1);
        assert_eq!(tape.scalar_value(losses.c_reg), 0.0);
        assert_eq!(tape.scalar_value(losses.h_reg), 0.0);
        assert_eq!(tape.scalar_value(losses.s_reg), 0.0);
        // Confident logits push the CE terms near zero.
        assert!(tape.scalar_value(losses.obj) < 1e-4);
        assert!(tape.scalar_value(losses.h_cls) < 1e-4);
        assert!(tape.scalar_value(losses.s_cls) < 1e-4);
        assert!(tape.scalar_value(losses.sem) < 1e-4);
    }

    #[test]
    fn one_bin_heading_miss_keeps_regression_zero() {
        let layout = layout2();
        let cls = classes();
        let nh = layout.num_heading_bins;
        let w = std::f64::consts::TAU / nh as f64;
        // Object heading exactly on bin 1's center; prediction votes bin 2.
        let o = obj_at([0.0; 3], [0.7, 0.5, 1.0], w, 0);
        let anchor = [0.0; 3];
        let mut row = perfect_row(layout, anchor, &o, &cls);
        row[layout.heading_cls().start + 1] = 0.0;
        row[layout.heading_cls().start + 2] = 10.0;
        let mut tape = Tape::new();
        let head = tape.leaf(Matrix::new(1, layout.width(), row).unwrap());
        let losses = stage_losses(
            &mut tape,
            head,
            layout,
            &[anchor],
            &[o],
            &cls,
            &LossConfig::default(),
        )
        .unwrap();
        assert_eq!(tape.scalar_value(losses.h_reg), 0.0, "gt-bin residual still matches");
        // Cross entropy of a one-hot mismatch with logit 10 vs 0.
        let z: f64 = (0..nh).map(|b| if b == 2 { 10f64.exp() } else { 1.0 }).sum();
        let expect = -(1.0f64 / z).ln();
        assert!((tape.scalar_value(losses.h_cls) - expect).abs() < 1e-9);
    }

    #[test]
    fn objectness_matches_hand_computed_ce() {
        let layout = layout2();
        let cls = classes();
        let o = obj_at([0.0; 3], [0.7, 0.5, 1.0], 0.0, 0);
        // Anchors: one positive (on center), one negative (far), one ignored.
        let anchors = [[0.0, 0.0, 0.0], [3.0, 0.0, 0.0], [0.45, 0.0, 0.0]];
        let mut head = Matrix::zeros(3, layout.width());
        head.set(0, 0, 0.2);
        head.set(0, 1, 0.9);
        head.set(1, 0, 1.4);
        head.set(1, 1, -0.3);
        head.set(2, 0, 9.0);
        head.set(2, 1, 9.0);
        let mut tape = Tape::new();
        let h = tape.leaf(head.clone());
        let losses =
            stage_losses(&mut tape, h, layout, &anchors, &[o], &cls, &LossConfig::default())
                .unwrap();
        let ce = |l0: f64, l1: f64, t: usize| {
            let z = l0.exp() + l1.exp();
            -([l0, l1][t].exp() / z).ln()
        };
        let expect = (ce(0.2, 0.9, 1) + ce(1.4, -0.3, 0)) / 2.0;
        assert!((tape.scalar_value(losses.obj) - expect).abs() < 1e-9);
    }

    #[test]
    fn all_ignored_proposals_error() {
        let layout = layout2();
        let o = obj_at([0.0; 3], [0.7, 0.5, 1.0], 0.0, 0);
        let anchors = [[0.45, 0.0, 0.0]];
        let mut tape = Tape::new();
        let h = tape.leaf(Matrix::zeros(1, layout.width()));
        assert!(stage_losses(
            &mut tape,
            h,
            layout,
            &anchors,
            &[o],
            &classes(),
            &LossConfig::default()
        )
        .is_err());
    }

    #[test]
    fn no_positives_zeroes_box_terms() {
        let layout = layout2();
        let o = obj_at([0.0; 3], [0.7, 0.5, 1.0], 0.0, 0);
        let anchors = [[3.0, 0.0, 0.0], [-3.0, 0.0, 0.0]];
        let mut tape = Tape::new();
        let h = tape.leaf(Matrix::zeros(2, layout.width()));
        let losses = stage_losses(
            &mut tape,
            h,
            layout,
            &anchors,
            &[o],
            &classes(),
            &LossConfig::default(),
        )
        .unwrap();
        assert_eq!(losses.n_pos, 0);
        assert_eq!(tape.scalar_value(losses.box_total), 0.0);
        assert_eq!(tape.scalar_value(losses.sem), 0.0);
        assert!(tape.scalar_value(losses.obj) > 0.0);
    }

    #[test]
    fn box_loss_matches_independent_smooth_l1_oracle() {
        let layout = layout2();
        let cls = classes();
        let mut r = rng::stream(51, "test/box-oracle");
        let o = obj_at([0.3, -0.2, 0.5], [0.8, 0.6, 1.1], 0.7, 1);
        let anchor = [0.2, -0.1, 0.45];
        let row: Vec<f64> = (0..layout.width()).map(|_| r.gen_range(-1.5..1.5)).collect();
        let mut tape = Tape::new();
        let head = tape.leaf(Matrix::new(1, layout.width(), row.clone()).unwrap());
        let losses =
            stage_losses(&mut tape, head, layout, &[anchor], &[o], &cls, &LossConfig::default())
                .unwrap();

        let huber = |d: f64| {
            let d = d.abs();
            if d < 1.0 {
                0.5 * d * d
            } else {
                d - 0.5
            }
        };
        let mut c_expect = 0.0;
        for c in 0..3 {
            let pred = row[layout.center().start + c];
            let target = o.bbox.center[c] - anchor[c];
            c_expect += huber(pred - target);
        }
        assert!((tape.scalar_value(losses.c_reg) - c_expect).abs() < 1e-9);

        let (bin, res) = heading_to_bin(o.bbox.heading, layout.num_heading_bins);
        let h_expect = huber(row[layout.heading_res().start + bin] - res);
        assert!((tape.scalar_value(losses.h_reg) - h_expect).abs() < 1e-9);

        let sres = size_to_residual(o.bbox.size, cls[1].size);
        let mut s_expect = 0.0;
        for c in 0..3 {
            s_expect += huber(row[layout.size_res().start + 3 + c] - sres[c]);
        }
        assert!((tape.scalar_value(losses.s_reg) - s_expect).abs() < 1e-9);

        let total = tape.scalar_value(losses.c_reg)
            + 0.1 * tape.scalar_value(losses.h_cls)
            + tape.scalar_value(losses.h_reg)
            + 0.1 * tape.scalar_value(losses.s_cls)
            + tape.scalar_value(losses.s_reg);
        assert!((tape.scalar_value(losses.box_total) - total).abs() < 1e-9);
    }

    fn scalar_stage(tape: &mut Tape, v: f64) -> StageLosses {
        let s = tape.leaf(Matrix::scalar(v));
        StageLosses {
            obj: s,
            sem: s,
            c_reg: s,
            h_cls: s,
            h_reg: s,
            s_cls: s,
            s_reg: s,
            box_total: s,
            n_pos: 1,
        }
    }

    #[test]
    fn total_weights_match_published_mix() {
        let cfg = LossConfig::default();
        let mut tape = Tape::new();
        let dir = tape.leaf(Matrix::scalar(1.0));
        let stage = scalar_stage(&mut tape, 1.0);
        let sup = tape.leaf(Matrix::scalar(1.0));
        let (total, report) =
            total_loss(&mut tape, dir, &[stage], Some(sup), &cfg, 0.1).unwrap();
        assert!((tape.scalar_value(total) - 2.7).abs() < 1e-12);
        assert!((report.total - 2.7).abs() < 1e-12);

        // Linearity in each component.
        let mut tape = Tape::new();
        let dir = tape.leaf(Matrix::scalar(-1.0));
        let stage = scalar_stage(&mut tape, 0.0);
        let (total, _) = total_loss(&mut tape, dir, &[stage], None, &cfg, 0.0).unwrap();
        assert!((tape.scalar_value(total) + 1.0).abs() < 1e-12);

        let mut tape = Tape::new();
        let dir = tape.leaf(Matrix::scalar(0.0));
        let a = scalar_stage(&mut tape, 1.0);
        let b = scalar_stage(&mut tape, 1.0);
        let (total, report) = total_loss(&mut tape, dir, &[a, b], None, &cfg, 0.0).unwrap();
        // Two stages accumulate: 2 * (0.4 + 1.0 + 0.2).
        assert!((tape.scalar_value(total) - 3.2).abs() < 1e-12);
        assert!(
            (report.total
                - (report.dir
                    + cfg.lambda_objectness * report.obj
                    + cfg.lambda_box * report.box_total
                    + cfg.lambda_semantic * report.sem))
                .abs()
                < 1e-9
        );
    }

    #[test]
    fn non_finite_component_is_named() {
        let cfg = LossConfig::default();
        let mut tape = Tape::new();
        let dir = tape.leaf(Matrix::scalar(f64::NAN));
        let stage = scalar_stage(&mut tape, 0.0);
        let err = total_loss(&mut tape, dir, &[stage], None, &cfg, 0.0).unwrap_err();
        assert!(err.to_string().contains("dir"), "{err}");
    }

    #[test]
    fn gradients_flow_through_both_losses() {
        // Inputs live in a parameter store so the shared checker can probe
        // them: seed centers/dirs and a full head matrix.
        let layout = layout2();
        let cls = classes();
        let objects = vec![
            obj_at([0.2, 0.1, 0.4], [1.2, 1.0, 1.0], 0.9, 0),
            obj_at([2.0, 2.0, 0.5], [1.0, 1.2, 1.0], 2.2, 1),
        ];
        let xyz: Vec<[f64; 3]> = vec![
            [0.3, 0.2, 0.5],
            [0.1, -0.2, 0.1],
            [2.2, 1.9, 0.6],
            [1.8, 2.3, 0.2],
        ];
        let anchors = [[0.25, 0.05, 0.42], [2.05, 2.1, 0.48], [5.0, 5.0, 0.5]];
        let mut store = ParamStore::new(60);
        let mut r = rng::stream(61, "test/loss-grad");
        let n = xyz.len();
        store
            .get_or_init_shaped("in/centers", n, 3, true, |_| {
                Matrix::from_fn(n, 3, |i, c| xyz[i][c] + 0.05 * ((i + c) as f64))
            })
            .unwrap();
        store
            .get_or_init_shaped("in/dirs", n, 3, true, |rr| rand_matrix(rr, n, 3, -0.9, 0.9))
            .unwrap();
        store
            .get_or_init_shaped("in/head", anchors.len(), layout.width(), true, |rr| {
                rand_matrix(rr, 3, layout.width(), -1.0, 1.0)
            })
            .unwrap();
        let names = store.trainable_names();
        let cfg = LossConfig::default();
        check_named("losses", &store, &names, 60, FD_TOL, &mut r, |s, want| {
            let mut store = s.clone();
            let mut tape = Tape::new();
            let mut binder = Binder::new();
            let mut ctx = Ctx::eval(&mut tape, &mut binder, &mut store);
            let centers = ctx.bind("in/centers")?;
            let dirs_raw = ctx.bind("in/dirs")?;
            let head = ctx.bind("in/head")?;
            let norm = ctx.tape.row_norm(dirs_raw, 1e-12)?;
            let dirs = ctx.tape.div_col(dirs_raw, norm)?;
            let cv = ctx.tape.value(centers);
            let centers_val: Vec<[f64; 3]> =
                (0..n).map(|i| [cv.get(i, 0), cv.get(i, 1), cv.get(i, 2)]).collect();
            let feat = ctx.tape.leaf(Matrix::zeros(n, 1));
            let pred = SeedPrediction {
                xyz: xyz.clone(),
                feat,
                centers,
                centers_val,
                dirs,
            };
            let dir = direction_loss(&mut tape, &pred, &objects, true, false)?;
            let stage =
                stage_losses(&mut tape, head, layout, &anchors, &objects, &cls, &cfg)?;
            let (total, _) = total_loss(&mut tape, dir, &[stage], None, &cfg, 0.0)?;
            let val = tape.scalar_value(total);
            let grads = if want {
                let g = tape.backward(total)?;
                Some(binder.collect_grads(&tape, &store, &g)?)
            } else {
                None
            };
            Ok((val, grads))
        })
        .unwrap();
    }
}
