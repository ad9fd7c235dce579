//! Point-cloud backbone: stacked set-abstraction layers (sample, group,
//! shared MLP, max-pool) followed by feature-propagation layers that
//! interpolate deep features back onto the seed points.
//!
//! Sampling and grouping decisions are made on values (never differentiated)
//! and are content-based: farthest-point sampling starts from the
//! lexicographically smallest point, and grouped neighbors are ordered by
//! (distance, coordinates). Permuting the input point order therefore leaves
//! the output bit-identical.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Ctx;
use crate::params::ParamStore;
use crate::tensor::{Matrix, Var};

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

fn lex_less(a: [f64; 3], b: [f64; 3]) -> bool {
    (a[0], a[1], a[2]) < (b[0], b[1], b[2])
}

/// Farthest-point sampling. Starts from the lexicographically smallest
/// point; every subsequent pick maximizes the distance to the selected set,
/// with ties broken toward the lexicographically smallest candidate. The
/// returned indices refer to `pts` but the selected sequence of points does
/// not depend on the input order.
pub fn farthest_point_sample(pts: &[[f64; 3]], k: usize) -> Vec<usize> {
    assert!(k >= 1 && k <= pts.len(), "fps: k={k} of {}", pts.len());
    let mut first = 0;
    for (i, &p) in pts.iter().enumerate() {
        if lex_less(p, pts[first]) {
            first = i;
        }
    }
    let mut selected = Vec::with_capacity(k);
    let mut taken = vec![false; pts.len()];
    selected.push(first);
    taken[first] = true;
    let mut min_d: Vec<f64> = pts.iter().map(|&p| dist2(p, pts[first])).collect();
    for _ in 1..k {
        let mut best = usize::MAX;
        for i in 0..pts.len() {
            if taken[i] {
                continue;
            }
            if best == usize::MAX
                || min_d[i] > min_d[best]
                || (min_d[i] == min_d[best] && lex_less(pts[i], pts[best]))
            {
                best = i;
            }
        }
        selected.push(best);
        taken[best] = true;
        for i in 0..pts.len() {
            let d = dist2(pts[i], pts[best]);
            if d < min_d[i] {
                min_d[i] = d;
            }
        }
    }
    selected
}

/// Indices of up to `nsample` points within `radius` of each center,
/// ordered by (distance, coordinates) and padded by cycling when fewer are
/// in range. Every group is non-empty as long as each center coincides with
/// at least one point (guaranteed when centers are sampled from `pts`);
/// otherwise the nearest point is used as the lone member.
pub fn ball_query(
    centers: &[[f64; 3]],
    pts: &[[f64; 3]],
    radius: f64,
    nsample: usize,
) -> Vec<Vec<usize>> {
    assert!(nsample >= 1);
    let r2 = radius * radius;
    centers
        .iter()
        .map(|&c| {
            let mut found: Vec<usize> = (0..pts.len()).filter(|&i| dist2(pts[i], c) <= r2).collect();
            if found.is_empty() {
                let mut nearest = 0;
                for i in 1..pts.len() {
                    let (da, db) = (dist2(pts[i], c), dist2(pts[nearest], c));
                    if da < db || (da == db && lex_less(pts[i], pts[nearest])) {
                        nearest = i;
                    }
                }
                found.push(nearest);
            }
            found.sort_by(|&a, &b| {
                dist2(pts[a], c)
                    .partial_cmp(&dist2(pts[b], c))
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then_with(|| {
                        if lex_less(pts[a], pts[b]) {
                            std::cmp::Ordering::Less
                        } else if lex_less(pts[b], pts[a]) {
                            std::cmp::Ordering::Greater
                        } else {
                            std::cmp::Ordering::Equal
                        }
                    })
            });
            found.truncate(nsample);
            let base = found.len();
            for i in base..nsample {
                let again = found[i % base];
                found.push(again);
            }
            found
        })
        .collect()
}

/// Three nearest sources per target with inverse-square-distance weights,
/// for feature interpolation. Falls back to repeating sources when fewer
/// than three exist.
pub fn three_nn_weights(
    targets: &[[f64; 3]],
    sources: &[[f64; 3]],
) -> (Vec<[usize; 3]>, Vec<[f64; 3]>) {
    assert!(!sources.is_empty());
    let mut idx = Vec::with_capacity(targets.len());
    let mut wts = Vec::with_capacity(targets.len());
    for &t in targets {
        let mut order: Vec<usize> = (0..sources.len()).collect();
        order.sort_by(|&a, &b| {
            dist2(sources[a], t)
                .partial_cmp(&dist2(sources[b], t))
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let tri = [
            order[0],
            order[1.min(order.len() - 1)],
            order[2.min(order.len() - 1)],
        ];
        let mut w = [0.0f64; 3];
        for k in 0..3 {
            w[k] = 1.0 / (dist2(sources[tri[k]], t) + 1e-8);
        }
        let s: f64 = w.iter().sum();
        for x in &mut w {
            *x /= s;
        }
        idx.push(tri);
        wts.push(w);
    }
    (idx, wts)
}

const NORM_EPS: f64 = 1e-5;

/// Registers the parameters of a linear[-norm]-relu stack.
pub fn register_mlp(
    store: &mut ParamStore,
    prefix: &str,
    in_dim: usize,
    widths: &[usize],
    norm: bool,
) -> Result<()> {
    let mut d = in_dim;
    for (i, &w) in widths.iter().enumerate() {
        store.get_or_init_shaped(&format!("{prefix}/l{i}/w"), w, d, true, |r| {
            crate::params::init_linear(r, w, d)
        })?;
        store.get_or_init_shaped(&format!("{prefix}/l{i}/b"), 1, w, true, |_| Matrix::zeros(1, w))?;
        if norm {
            store.get_or_init_shaped(&format!("{prefix}/l{i}/mu"), 1, w, false, |_| {
                Matrix::zeros(1, w)
            })?;
            store.get_or_init_shaped(&format!("{prefix}/l{i}/sig2"), 1, w, false, |_| {
                Matrix::full(1, w, 1.0)
            })?;
        }
        d = w;
    }
    Ok(())
}

/// Shared MLP over rows: linear, optional running normalization, ReLU.
/// `relu_last` controls the activation after the final layer. When the
/// context is in training mode the running statistics are advanced from the
/// observed pre-normalization activations (outside the tape).
pub fn mlp(
    ctx: &mut Ctx,
    prefix: &str,
    mut x: Var,
    in_dim: usize,
    widths: &[usize],
    norm: bool,
    relu_last: bool,
) -> Result<Var> {
    let mut d = in_dim;
    for (i, &wd) in widths.iter().enumerate() {
        let w = ctx.bind(&format!("{prefix}/l{i}/w"))?;
        let b = ctx.bind(&format!("{prefix}/l{i}/b"))?;
        let lin = ctx.tape.matmul_nt(x, w)?;
        let mut y = ctx.tape.add_row(lin, b)?;
        if norm {
            y = running_norm(ctx, &format!("{prefix}/l{i}"), y)?;
        }
        let last = i + 1 == widths.len();
        if !last || relu_last {
            y = ctx.tape.relu(y)?;
        }
        x = y;
        d = wd;
    }
    let _ = d;
    Ok(x)
}

/// Normalizes rows per column. In training mode the statistics come from
/// the current batch and live inside the tape, so gradients account for the
/// normalization; the running buffers are advanced (outside the tape) for
/// later evaluation. In eval mode the buffers normalize as constants.
fn running_norm(ctx: &mut Ctx, prefix: &str, x: Var) -> Result<Var> {
    let mu_name = format!("{prefix}/mu");
    let sig_name = format!("{prefix}/sig2");
    if ctx.train {
        let v = ctx.tape.value(x).clone();
        let cols = v.cols();
        let rows = v.rows().max(1) as f64;
        let mut mean = vec![0.0; cols];
        for r in 0..v.rows() {
            for (m, &x) in mean.iter_mut().zip(v.row(r)) {
                *m += x;
            }
        }
        for m in &mut mean {
            *m /= rows;
        }
        let mut var = vec![0.0; cols];
        for r in 0..v.rows() {
            for (s, (&x, &m)) in var.iter_mut().zip(v.row(r).iter().zip(&mean)) {
                *s += (x - m) * (x - m);
            }
        }
        for s in &mut var {
            *s /= rows;
        }
        let momentum = ctx.norm_momentum;
        let old_mu = ctx.store.get(&mu_name)?.clone();
        let old_sig = ctx.store.get(&sig_name)?.clone();
        let new_mu = Matrix::from_fn(1, cols, |_, c| {
            (1.0 - momentum) * old_mu.data()[c] + momentum * mean[c]
        });
        let new_sig = Matrix::from_fn(1, cols, |_, c| {
            (1.0 - momentum) * old_sig.data()[c] + momentum * var[c]
        });
        ctx.store.set(&mu_name, new_mu)?;
        ctx.store.set(&sig_name, new_sig)?;

        // Batch statistics inside the tape: sd = exp(0.5 ln(var + eps)).
        let csum = ctx.tape.col_sum(x)?;
        let mu_b = ctx.tape.scale(csum, 1.0 / rows)?;
        let neg_mu = ctx.tape.scale(mu_b, -1.0)?;
        let centered = ctx.tape.add_row(x, neg_mu)?;
        let sq = ctx.tape.mul(centered, centered)?;
        let sqsum = ctx.tape.col_sum(sq)?;
        let var_b = ctx.tape.scale(sqsum, 1.0 / rows)?;
        let var_eps = ctx.tape.add_const(var_b, NORM_EPS)?;
        let ln_var = ctx.tape.ln(var_eps)?;
        let half_ln = ctx.tape.scale(ln_var, 0.5)?;
        let sd = ctx.tape.exp(half_ln)?;
        return ctx.tape.div_row(centered, sd);
    }
    let mu = ctx.store.get(&mu_name)?;
    let sig2 = ctx.store.get(&sig_name)?;
    let neg_mu = mu.map(|m| -m);
    let inv_sd = sig2.map(|s| (s + NORM_EPS).sqrt());
    let neg_mu = ctx.tape.leaf(neg_mu);
    let sd = ctx.tape.leaf(inv_sd);
    let centered = ctx.tape.add_row(x, neg_mu)?;
    ctx.tape.div_row(centered, sd)
}

/// Input channel count of set-abstraction layer `i`: normalized offsets plus
/// either the absolute height (first layer) or the previous layer's features.
fn sa_in_dim(cfg: &ModelConfig, layer: usize) -> usize {
    if layer == 0 {
        4
    } else {
        3 + cfg.sa_mlps[layer - 1].last().copied().expect("validated")
    }
}

pub fn register(store: &mut ParamStore, cfg: &ModelConfig) -> Result<()> {
    for i in 0..cfg.sa_npoints.len() {
        register_mlp(
            store,
            &format!("backbone/sa{i}"),
            sa_in_dim(cfg, i),
            &cfg.sa_mlps[i],
            cfg.use_norm,
        )?;
    }
    let l = cfg.sa_npoints.len();
    let mut source_dim = cfg.sa_mlps[l - 1].last().copied().expect("validated");
    for (k, widths) in cfg.fp_mlps.iter().enumerate() {
        let target_layer = l - 2 - k;
        let skip_dim = cfg.sa_mlps[target_layer].last().copied().expect("validated");
        register_mlp(
            store,
            &format!("backbone/fp{k}"),
            source_dim + skip_dim,
            widths,
            cfg.use_norm,
        )?;
        source_dim = widths.last().copied().expect("validated");
    }
    Ok(())
}

/// Seed points and their features.
pub struct SeedOutput {
    pub xyz: Vec<[f64; 3]>,
    /// [num_seeds, d_seed]
    pub feat: Var,
}

pub fn forward(ctx: &mut Ctx, points: &[[f64; 3]], cfg: &ModelConfig) -> Result<SeedOutput> {
    if points.len() < cfg.sa_npoints[0] {
        return Err(Error::shape(
            "backbone",
            format!("{} points < first layer {}", points.len(), cfg.sa_npoints[0]),
        ));
    }

    // Set-abstraction pyramid. Level i holds sa_npoints[i] points.
    let mut xyz_levels: Vec<Vec<[f64; 3]>> = Vec::new();
    let mut feat_levels: Vec<Var> = Vec::new();
    let mut cur_xyz: Vec<[f64; 3]> = points.to_vec();
    for i in 0..cfg.sa_npoints.len() {
        let npoint = cfg.sa_npoints[i];
        let nsample = cfg.sa_nsamples[i];
        let centers_idx = farthest_point_sample(&cur_xyz, npoint);
        let centers: Vec<[f64; 3]> = centers_idx.iter().map(|&j| cur_xyz[j]).collect();
        let groups = ball_query(&centers, &cur_xyz, cfg.sa_radii[i], nsample);

        let mut flat = Vec::with_capacity(npoint * nsample);
        let mut local = Matrix::zeros(npoint * nsample, if i == 0 { 4 } else { 3 });
        for (g, group) in groups.iter().enumerate() {
            for (s, &pi) in group.iter().enumerate() {
                let row = g * nsample + s;
                let p = cur_xyz[pi];
                let c = centers[g];
                local.set(row, 0, (p[0] - c[0]) / cfg.sa_radii[i]);
                local.set(row, 1, (p[1] - c[1]) / cfg.sa_radii[i]);
                local.set(row, 2, (p[2] - c[2]) / cfg.sa_radii[i]);
                if i == 0 {
                    local.set(row, 3, p[2]);
                }
                flat.push(pi);
            }
        }
        let local = ctx.tape.leaf(local);
        let rows = if i == 0 {
            local
        } else {
            let gathered = ctx.tape.gather_rows(feat_levels[i - 1], &flat)?;
            ctx.tape.concat_cols(&[local, gathered])?
        };
        let hidden = mlp(
            ctx,
            &format!("backbone/sa{i}"),
            rows,
            sa_in_dim(cfg, i),
            &cfg.sa_mlps[i],
            cfg.use_norm,
            true,
        )?;
        let pooled = ctx.tape.block_max(hidden, nsample)?;
        xyz_levels.push(centers.clone());
        feat_levels.push(pooled);
        cur_xyz = centers;
    }

    // Feature propagation from the deepest level back to the seed level.
    let l = cfg.sa_npoints.len();
    let mut source_xyz = xyz_levels[l - 1].clone();
    let mut source_feat = feat_levels[l - 1];
    let mut source_dim = cfg.sa_mlps[l - 1].last().copied().expect("validated");
    for (k, widths) in cfg.fp_mlps.iter().enumerate() {
        let target_layer = l - 2 - k;
        let target_xyz = &xyz_levels[target_layer];
        let (tri, wts) = three_nn_weights(target_xyz, &source_xyz);
        let interpolated = ctx.tape.interp_rows(source_feat, &tri, &wts)?;
        let skip_dim = cfg.sa_mlps[target_layer].last().copied().expect("validated");
        let joined = ctx.tape.concat_cols(&[interpolated, feat_levels[target_layer]])?;
        let out = mlp(
            ctx,
            &format!("backbone/fp{k}"),
            joined,
            source_dim + skip_dim,
            widths,
            cfg.use_norm,
            true,
        )?;
        source_xyz = target_xyz.clone();
        source_feat = out;
        source_dim = widths.last().copied().expect("validated");
    }

    debug_assert_eq!(source_xyz.len(), cfg.num_seeds);
    Ok(SeedOutput { xyz: source_xyz, feat: source_feat })
}
