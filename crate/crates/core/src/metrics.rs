//! Detection quality metrics: per-class average precision and mAP.
//!
//! Matching follows the usual protocol: detections are ranked by score
//! globally per class, each detection greedily claims the highest-IoU
//! unmatched ground-truth box in its own scene (if above the IoU threshold),
//! and AP is the area under the interpolated precision-recall curve using
//! every operating point (all-point interpolation, no fixed recall grid).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::geometry::{iou, Detection, OrientedBox};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    #[serde(rename = "box")]
    pub bbox: OrientedBox,
    pub class: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapReport {
    /// AP per class that has at least one ground-truth instance.
    pub per_class: BTreeMap<usize, f64>,
    /// Mean over the classes in `per_class`.
    pub map: f64,
    pub iou_thresh: f64,
}

/// AP for one class over parallel per-scene detection / ground-truth lists.
pub fn average_precision_for_class(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruth>],
    class: usize,
    iou_thresh: f64,
) -> Option<f64> {
    assert_eq!(dets.len(), gts.len(), "detections and ground truth cover the same scenes");

    // (scene, gt index within scene) for this class.
    let mut gt_index: Vec<Vec<usize>> = Vec::with_capacity(gts.len());
    let mut n_gt = 0usize;
    for scene_gts in gts {
        let idx: Vec<usize> = scene_gts
            .iter()
            .enumerate()
            .filter(|(_, g)| g.class == class)
            .map(|(i, _)| i)
            .collect();
        n_gt += idx.len();
        gt_index.push(idx);
    }
    if n_gt == 0 {
        return None;
    }

    let mut ranked: Vec<(usize, usize)> = Vec::new();
    for (scene, scene_dets) in dets.iter().enumerate() {
        for (i, d) in scene_dets.iter().enumerate() {
            if d.class == class {
                ranked.push((scene, i));
            }
        }
    }
    ranked.sort_by(|&(sa, ia), &(sb, ib)| {
        let a = dets[sa][ia].score;
        let b = dets[sb][ib].score;
        b.partial_cmp(&a)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(sa.cmp(&sb))
            .then(ia.cmp(&ib))
    });

    let mut matched: Vec<Vec<bool>> = gt_index.iter().map(|v| vec![false; v.len()]).collect();
    let mut is_tp = Vec::with_capacity(ranked.len());
    for &(scene, di) in &ranked {
        let det = &dets[scene][di];
        let mut best: Option<(usize, f64)> = None;
        for (slot, &gi) in gt_index[scene].iter().enumerate() {
            if matched[scene][slot] {
                continue;
            }
            let v = iou(&det.bbox, &gts[scene][gi].bbox);
            if v >= iou_thresh && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((slot, v));
            }
        }
        match best {
            Some((slot, _)) => {
                matched[scene][slot] = true;
                is_tp.push(true);
            }
            None => is_tp.push(false),
        }
    }

    // Precision envelope over all operating points.
    let n = is_tp.len();
    let mut precisions = Vec::with_capacity(n);
    let mut recalls = Vec::with_capacity(n);
    let mut tp = 0usize;
    for (k, &hit) in is_tp.iter().enumerate() {
        if hit {
            tp += 1;
        }
        precisions.push(tp as f64 / (k + 1) as f64);
        recalls.push(tp as f64 / n_gt as f64);
    }
    let mut envelope = precisions.clone();
    for k in (0..n.saturating_sub(1)).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for k in 0..n {
        ap += (recalls[k] - prev_recall) * envelope[k];
        prev_recall = recalls[k];
    }
    Some(ap)
}

/// mAP over every class that appears in the ground truth.
pub fn evaluate_map(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruth>],
    iou_thresh: f64,
) -> MapReport {
    let mut classes: Vec<usize> = gts
        .iter()
        .flatten()
        .map(|g| g.class)
        .collect();
    classes.sort_unstable();
    classes.dedup();

    let mut per_class = BTreeMap::new();
    for &c in &classes {
        if let Some(ap) = average_precision_for_class(dets, gts, c, iou_thresh) {
            per_class.insert(c, ap);
        }
    }
    let map = if per_class.is_empty() {
        0.0
    } else {
        per_class.values().sum::<f64>() / per_class.len() as f64
    };
    MapReport { per_class, map, iou_thresh }
}

/// Convenience for tests and synthetic evaluation: a ground truth promoted
/// to a perfect-score detection.
pub fn perfect_detection(gt: &GroundTruth) -> Detection {
    Detection { bbox: gt.bbox, score: 1.0, class: gt.class }
}

pub fn unit_box_at(x: f64, y: f64) -> OrientedBox {
    OrientedBox { center: [x, y, 0.0], size: [1.0, 1.0, 1.0], heading: 0.0 }
}
