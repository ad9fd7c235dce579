//! Object-object relation graphs over the proposal set: pairwise weights
//! from appearance affinity (scaled dot product) and position affinity
//! (learned projection of a fixed pair encoding, optionally distance
//! masked), normalized per row, then used to mix appearance features.
//! Multiple independent graphs are summed into a residual update.

use crate::config::{ModelConfig, PositionMode};
use crate::error::{Error, Result};
use crate::geometry::{iou, normalize_angle, OrientedBox};
use crate::metrics::GroundTruth;
use crate::model::Ctx;
use crate::params::{init_linear, ParamStore};
use crate::tensor::{Matrix, Tape, Var};

/// Pairs matching ground truth this well can be related by label.
pub const LABEL_IOU: f64 = 0.15;
/// Mass clamp keeping the supervision loss finite.
pub const MASS_CLAMP: f64 = 1e-6;
/// Rows of position-modulated weight summing to no more than this are
/// treated as isolated and attend to themselves.
pub const ISOLATION_EPS: f64 = 1e-9;

/// Trainable parameters of ONE graph:
/// mixing d2*d2, two attention projections d_a*d2, a per-proposal attention
/// query K_c*d_a, and per-proposal position rows K_c*d_p.
pub fn relation_param_count(cfg: &ModelConfig) -> usize {
    let (kc, d2, da, dp) = (
        cfg.num_proposals,
        cfg.d_appearance,
        cfg.d_attention,
        cfg.d_position,
    );
    kc * dp + da * (2 * d2 + kc) + d2 * d2
}

pub fn register(store: &mut ParamStore, cfg: &ModelConfig) -> Result<()> {
    let (kc, d2, da, dp) = (
        cfg.num_proposals,
        cfg.d_appearance,
        cfg.d_attention,
        cfg.d_position,
    );
    for g in 0..cfg.num_graphs {
        store.get_or_init_shaped(&format!("rel{g}/w_r"), d2, d2, true, |r| {
            init_linear(r, d2, d2)
        })?;
        store.get_or_init_shaped(&format!("rel{g}/w_a1"), da, d2, true, |r| {
            init_linear(r, da, d2)
        })?;
        store.get_or_init_shaped(&format!("rel{g}/w_a2"), da, d2, true, |r| {
            init_linear(r, da, d2)
        })?;
        store.get_or_init_shaped(&format!("rel{g}/w_p"), kc, dp, true, |r| {
            init_linear(r, kc, dp)
        })?;
        // Additive per-proposal attention query; zero init keeps the initial
        // affinity a pure projected dot product.
        store.get_or_init_shaped(&format!("rel{g}/query"), kc, da, true, |_| {
            Matrix::zeros(kc, da)
        })?;
    }
    Ok(())
}

/// Distance cutoff for mask-mode position affinity: a fraction of the scene
/// bounding-box diagonal.
pub fn distance_cutoff(scene_extent: [f64; 3], delta_scale: f64) -> f64 {
    let d = (scene_extent[0] * scene_extent[0]
        + scene_extent[1] * scene_extent[1]
        + scene_extent[2] * scene_extent[2])
        .sqrt();
    delta_scale * d
}

/// Relative-position descriptor of an ordered box pair: center offset (3),
/// per-axis log size ratio (3), heading difference (1), center distance (1),
/// both volumes (2).
pub fn pair_descriptor(a: &OrientedBox, b: &OrientedBox) -> [f64; 10] {
    let d = [
        a.center[0] - b.center[0],
        a.center[1] - b.center[1],
        a.center[2] - b.center[2],
    ];
    let dist = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    [
        d[0],
        d[1],
        d[2],
        (a.size[0] / b.size[0]).ln(),
        (a.size[1] / b.size[1]).ln(),
        (a.size[2] / b.size[2]).ln(),
        normalize_angle(a.heading - b.heading),
        dist,
        a.volume(),
        b.volume(),
    ]
}

/// Fixed sinusoidal expansion of the 10-dim descriptor to `d_p` values.
/// Output slot t encodes component t%10 at harmonic t/10, alternating
/// sin/cos across harmonics; no trainable state.
pub fn sinusoidal_embed(desc: &[f64; 10], d_p: usize) -> Vec<f64> {
    let harmonics = d_p.div_ceil(10);
    (0..d_p)
        .map(|t| {
            let c = t % 10;
            let h = t / 10;
            let omega = 10_000f64.powf(-(h as f64) / harmonics as f64);
            let angle = desc[c] * omega;
            if h % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// One constructed relation graph, kept for inspection and supervision.
pub struct GraphOutput {
    /// Final row-stochastic weights [K_c, K_c].
    pub alpha: Var,
    /// Row-normalized pre-softmax weights; exactly zero where masked.
    pub inner: Var,
    /// Non-negative position affinity after masking [K_c, K_c].
    pub position: Var,
    /// Scaled dot-product appearance affinity [K_c, K_c].
    pub appearance: Var,
}

/// Builds all graphs from appearance rows `r` [K_c, d2] and the decoded
/// stage-one boxes, returning the residual-updated appearance matrix and
/// the per-graph internals.
pub fn forward(
    ctx: &mut Ctx,
    r: Var,
    boxes: &[OrientedBox],
    scene_extent: [f64; 3],
    cfg: &ModelConfig,
) -> Result<(Var, Vec<GraphOutput>)> {
    let kc = boxes.len();
    if ctx.tape.value(r).rows() != kc || kc != cfg.num_proposals {
        return Err(Error::shape(
            "relation",
            format!(
                "{} appearance rows / {} boxes / {} proposals",
                ctx.tape.value(r).rows(),
                kc,
                cfg.num_proposals
            ),
        ));
    }
    if cfg.num_graphs == 0 {
        return Ok((r, Vec::new()));
    }

    // Pair geometry is a fixed input: descriptors come from decoded boxes.
    let dp = cfg.d_position;
    let mut embed = Matrix::zeros(kc * kc, dp);
    let mut mask = Matrix::full(kc, kc, 1.0);
    let delta = distance_cutoff(scene_extent, cfg.delta_scale);
    for m in 0..kc {
        for n in 0..kc {
            let desc = pair_descriptor(&boxes[m], &boxes[n]);
            for (c, v) in sinusoidal_embed(&desc, dp).into_iter().enumerate() {
                embed.set(m * kc + n, c, v);
            }
            if cfg.position_mode == PositionMode::Mask && desc[7] > delta {
                mask.set(m, n, 0.0);
            }
        }
    }
    let embed = ctx.tape.leaf(embed);
    let mask = ctx.tape.leaf(mask);
    let row_of_pair: Vec<usize> = (0..kc * kc).map(|p| p / kc).collect();
    let inv_sqrt_da = 1.0 / (cfg.d_attention as f64).sqrt();

    let mut fused = r;
    let mut graphs = Vec::with_capacity(cfg.num_graphs);
    for g in 0..cfg.num_graphs {
        let w_a1 = ctx.bind(&format!("rel{g}/w_a1"))?;
        let w_a2 = ctx.bind(&format!("rel{g}/w_a2"))?;
        let query = ctx.bind(&format!("rel{g}/query"))?;
        let q_proj = ctx.tape.matmul_nt(r, w_a1)?;
        let q = ctx.tape.add(q_proj, query)?;
        let k = ctx.tape.matmul_nt(r, w_a2)?;
        let scores = ctx.tape.matmul_nt(q, k)?;
        let appearance = ctx.tape.scale(scores, inv_sqrt_da)?;

        let w_p = ctx.bind(&format!("rel{g}/w_p"))?;
        let w_p_rows = ctx.tape.gather_rows(w_p, &row_of_pair)?;
        let prod = ctx.tape.mul(w_p_rows, embed)?;
        let dots = ctx.tape.row_sum(prod)?;
        let pos_flat = ctx.tape.relu(dots)?;
        let pos_grid = ctx.tape.reshape(pos_flat, kc, kc)?;
        let position = ctx.tape.mul(pos_grid, mask)?;

        // Inner weights: position-modulated softmax, renormalized per row.
        // softmax's max shift keeps exp finite; masked entries stay exact 0.
        let soft = ctx.tape.softmax_rows(appearance)?;
        let weighted = ctx.tape.mul(position, soft)?;
        // Rows whose total unmasked weight is numerically indistinguishable
        // from zero fall back to self-weight 1: an isolated proposal attends
        // to itself. The threshold (rather than an exact-zero test) keeps the
        // normalization's backward pass away from underflowing divisors.
        let wv = ctx.tape.value(weighted);
        let mut fallback = Matrix::zeros(kc, kc);
        let mut any_fallback = false;
        for m in 0..kc {
            if wv.row(m).iter().sum::<f64>() <= ISOLATION_EPS {
                fallback.set(m, m, 1.0);
                any_fallback = true;
            }
        }
        let weighted = if any_fallback {
            let fb = ctx.tape.leaf(fallback);
            ctx.tape.add(weighted, fb)?
        } else {
            weighted
        };
        let sums = ctx.tape.row_sum(weighted)?;
        let inner = ctx.tape.div_col(weighted, sums)?;
        let alpha = if cfg.affinity_double_norm {
            ctx.tape.softmax_rows(inner)?
        } else {
            inner
        };

        let w_r = ctx.bind(&format!("rel{g}/w_r"))?;
        let values = ctx.tape.matmul_nt(r, w_r)?;
        let mixed = ctx.tape.matmul(alpha, values)?;
        fused = ctx.tape.add(fused, mixed)?;
        graphs.push(GraphOutput { alpha, inner, position, appearance });
    }
    Ok((fused, graphs))
}

/// Binary pair labels: 1 when the two proposals lie on different objects of
/// different classes, both with IoU >= `LABEL_IOU` against their object.
/// Zero diagonal, symmetric.
pub fn build_relation_label(proposals: &[OrientedBox], gts: &[GroundTruth]) -> Matrix {
    let kc = proposals.len();
    let mut matched: Vec<Option<usize>> = vec![None; kc];
    for (p, prop) in proposals.iter().enumerate() {
        let mut best = (LABEL_IOU, None);
        for (g, gt) in gts.iter().enumerate() {
            let v = iou(prop, &gt.bbox);
            if v >= best.0 {
                best = (v, Some(g));
            }
        }
        matched[p] = best.1;
    }
    Matrix::from_fn(kc, kc, |m, n| {
        if m == n {
            return 0.0;
        }
        match (matched[m], matched[n]) {
            (Some(a), Some(b)) if a != b && gts[a].class != gts[b].class => 1.0,
            _ => 0.0,
        }
    })
}

/// Fraction of row-softmax mass landing on labeled pairs, averaged over
/// rows, clamped away from {0, 1}.
pub fn graph_mass(tape: &mut Tape, graph: Var, label: &Matrix) -> Result<Var> {
    let kc = label.rows();
    let soft = tape.softmax_rows(graph)?;
    let lab = tape.leaf(label.clone());
    let hit = tape.mul(soft, lab)?;
    let total = tape.sum_all(hit)?;
    let mean = tape.scale(total, 1.0 / kc as f64)?;
    tape.clamp(mean, MASS_CLAMP, 1.0 - MASS_CLAMP)
}

/// Supervision on a mass value m in (0, 1): -(1-m)^2 * ln(m). Zero when all
/// mass is on labeled pairs; grows without bound (until the clamp) as the
/// mass vanishes.
pub fn mass_loss(tape: &mut Tape, mass: Var) -> Result<Var> {
    let neg = tape.scale(mass, -1.0)?;
    let one_minus = tape.add_const(neg, 1.0)?;
    let sq = tape.mul(one_minus, one_minus)?;
    let lnm = tape.ln(mass)?;
    let prod = tape.mul(sq, lnm)?;
    tape.scale(prod, -1.0)
}

/// Convenience: mass then loss.
pub fn graph_supervision_loss(tape: &mut Tape, graph: Var, label: &Matrix) -> Result<Var> {
    let m = graph_mass(tape, graph, label)?;
    mass_loss(tape, m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::model::Ctx;
    use crate::params::Binder;
    use crate::rng;
    use crate::tensor::gradcheck::{check_named, rand_matrix, FD_TOL};
    use rand::Rng;
    use std::collections::BTreeMap;

    fn tiny_cfg() -> ModelConfig {
        let mut cfg = RunConfig::preset("desk").unwrap().model;
        cfg.num_proposals = 5;
        cfg.d_appearance = 6;
        cfg.d_attention = 4;
        cfg.d_position = 8;
        cfg.num_graphs = 2;
        cfg
    }

    fn rand_boxes(n: usize, seed: u64, spread: f64) -> Vec<OrientedBox> {
        let mut r = rng::stream(seed, "test/rel-boxes");
        (0..n)
            .map(|_| OrientedBox {
                center: [
                    r.gen_range(-spread..spread),
                    r.gen_range(-spread..spread),
                    r.gen_range(0.2..1.0),
                ],
                size: [
                    r.gen_range(0.4..1.5),
                    r.gen_range(0.4..1.5),
                    r.gen_range(0.4..1.5),
                ],
                heading: r.gen_range(0.0..std::f64::consts::TAU),
            })
            .collect()
    }

    struct Run {
        fused: Matrix,
        alphas: Vec<Matrix>,
        inners: Vec<Matrix>,
        positions: Vec<Matrix>,
        appearances: Vec<Matrix>,
    }

    fn run_graphs(
        store: &ParamStore,
        cfg: &ModelConfig,
        r_in: &Matrix,
        boxes: &[OrientedBox],
        extent: [f64; 3],
        want_grads: bool,
    ) -> Result<(f64, Option<BTreeMap<String, Matrix>>, Run)> {
        let mut store = store.clone();
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let mut ctx = Ctx::eval(&mut tape, &mut binder, &mut store);
        let r = ctx.tape.leaf(r_in.clone());
        let (fused, graphs) = forward(&mut ctx, r, boxes, extent, cfg)?;
        let loss = ctx.tape.mean_all(fused)?;
        let val = tape.scalar_value(loss);
        let run = Run {
            fused: tape.value(fused).clone(),
            alphas: graphs.iter().map(|g| tape.value(g.alpha).clone()).collect(),
            inners: graphs.iter().map(|g| tape.value(g.inner).clone()).collect(),
            positions: graphs.iter().map(|g| tape.value(g.position).clone()).collect(),
            appearances: graphs.iter().map(|g| tape.value(g.appearance).clone()).collect(),
        };
        let grads = if want_grads {
            let g = tape.backward(loss)?;
            Some(binder.collect_grads(&tape, &store, &g)?)
        } else {
            None
        };
        Ok((val, grads, run))
    }

    #[test]
    fn param_count_matches_formula_and_census() {
        let sun = RunConfig::preset("paper-sun").unwrap().model;
        assert_eq!(relation_param_count(&sun), 327_680);
        assert_eq!(sun.num_graphs * relation_param_count(&sun), 983_040);
        let desk = RunConfig::preset("desk").unwrap().model;
        assert_eq!(relation_param_count(&desk), 16_384);
        let mut one = desk.clone();
        one.num_proposals = 1;
        one.d_appearance = 1;
        one.d_attention = 1;
        one.d_position = 1;
        assert_eq!(relation_param_count(&one), 5);

        for preset in ["paper-sun", "desk"] {
            let cfg = RunConfig::preset(preset).unwrap().model;
            let mut store = ParamStore::new(3);
            register(&mut store, &cfg).unwrap();
            assert_eq!(
                store.census("rel"),
                cfg.num_graphs * relation_param_count(&cfg),
                "{preset}"
            );
        }
    }

    #[test]
    fn cutoff_matches_room_diagonal_fraction() {
        let d = distance_cutoff([4.0, 4.0, 3.0], 0.25);
        assert!((d - 41f64.sqrt() / 4.0).abs() < 1e-12);
        assert!((d - 1.6008).abs() < 1e-4);
    }

    #[test]
    fn rows_are_stochastic_and_nonnegative() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new(21);
        register(&mut store, &cfg).unwrap();
        let mut r = rng::stream(22, "test/rel-rows");
        for trial in 0..20 {
            let feats = rand_matrix(&mut r, cfg.num_proposals, cfg.d_appearance, -2.0, 2.0);
            let boxes = rand_boxes(cfg.num_proposals, 100 + trial, 2.5);
            let (_, _, run) =
                run_graphs(&store, &cfg, &feats, &boxes, [5.0, 5.0, 2.0], false).unwrap();
            for alpha in &run.alphas {
                for m in 0..alpha.rows() {
                    let row = alpha.row(m);
                    assert!(row.iter().all(|&x| x >= 0.0));
                    let s: f64 = row.iter().sum();
                    assert!((s - 1.0).abs() < 1e-6, "trial {trial} row {m} sums {s}");
                }
            }
        }
    }

    #[test]
    fn masked_pairs_carry_exactly_zero_inner_weight() {
        let mut cfg = tiny_cfg();
        cfg.position_mode = PositionMode::Mask;
        cfg.delta_scale = 0.1;
        let mut store = ParamStore::new(23);
        register(&mut store, &cfg).unwrap();
        let mut r = rng::stream(24, "test/rel-mask");
        let feats = rand_matrix(&mut r, cfg.num_proposals, cfg.d_appearance, -1.0, 1.0);
        let boxes = rand_boxes(cfg.num_proposals, 7, 3.0);
        let extent = [6.0, 6.0, 2.0];
        let delta = distance_cutoff(extent, cfg.delta_scale);
        let (_, _, run) = run_graphs(&store, &cfg, &feats, &boxes, extent, false).unwrap();
        let mut masked_pairs = 0;
        for m in 0..cfg.num_proposals {
            for n in 0..cfg.num_proposals {
                let d = pair_descriptor(&boxes[m], &boxes[n])[7];
                if d > delta {
                    masked_pairs += 1;
                    for (g, inner) in run.inners.iter().enumerate() {
                        assert_eq!(inner.get(m, n), 0.0, "graph {g} pair ({m},{n})");
                    }
                    for pos in &run.positions {
                        assert_eq!(pos.get(m, n), 0.0);
                    }
                }
            }
        }
        assert!(masked_pairs > 0, "fixture must mask something");
    }

    #[test]
    fn isolated_rows_fall_back_to_self() {
        // delta so small every off-diagonal pair is masked; diagonal distance
        // is 0 so the diagonal survives only if its ReLU output is positive,
        // otherwise the explicit self-weight fallback kicks in. Either way
        // each inner row must be a valid distribution.
        let mut cfg = tiny_cfg();
        cfg.position_mode = PositionMode::Mask;
        cfg.delta_scale = 1e-9;
        cfg.affinity_double_norm = false;
        let mut store = ParamStore::new(25);
        register(&mut store, &cfg).unwrap();
        let mut r = rng::stream(26, "test/rel-isolated");
        let feats = rand_matrix(&mut r, cfg.num_proposals, cfg.d_appearance, -1.0, 1.0);
        let boxes = rand_boxes(cfg.num_proposals, 8, 3.0);
        let (_, _, run) = run_graphs(&store, &cfg, &feats, &boxes, [6.0, 6.0, 2.0], false).unwrap();
        for inner in &run.inners {
            for m in 0..cfg.num_proposals {
                let row = inner.row(m);
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
                for (n, &x) in row.iter().enumerate() {
                    if n != m {
                        assert_eq!(x, 0.0, "off-diagonal ({m},{n}) should be masked");
                    }
                }
                assert!((row[m] - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn appearance_affinity_matches_direct_arithmetic() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new(27);
        register(&mut store, &cfg).unwrap();
        let mut r = rng::stream(28, "test/rel-app");
        let feats = rand_matrix(&mut r, cfg.num_proposals, cfg.d_appearance, -1.0, 1.0);
        let boxes = rand_boxes(cfg.num_proposals, 9, 1.5);
        let (_, _, run) = run_graphs(&store, &cfg, &feats, &boxes, [8.0, 8.0, 3.0], false).unwrap();
        for g in 0..cfg.num_graphs {
            let w1 = store.get(&format!("rel{g}/w_a1")).unwrap();
            let w2 = store.get(&format!("rel{g}/w_a2")).unwrap();
            for m in 0..cfg.num_proposals {
                for n in 0..cfg.num_proposals {
                    let mut expect = 0.0;
                    for a in 0..cfg.d_attention {
                        let mut qm = 0.0;
                        let mut kn = 0.0;
                        for c in 0..cfg.d_appearance {
                            qm += w1.get(a, c) * feats.get(m, c);
                            kn += w2.get(a, c) * feats.get(n, c);
                        }
                        expect += qm * kn;
                    }
                    expect /= (cfg.d_attention as f64).sqrt();
                    let got = run.appearances[g].get(m, n);
                    assert!(
                        (got - expect).abs() < 1e-9 * expect.abs().max(1.0),
                        "graph {g} ({m},{n}): {got} vs {expect}"
                    );
                }
            }
        }
    }

    #[test]
    fn relation_weights_match_bruteforce_oracle() {
        // Recompute inner weights and the literal double normalization from
        // the recorded position / appearance matrices, straight-line.
        let cfg = tiny_cfg();
        let mut store = ParamStore::new(29);
        register(&mut store, &cfg).unwrap();
        let mut r = rng::stream(30, "test/rel-oracle");
        let feats = rand_matrix(&mut r, cfg.num_proposals, cfg.d_appearance, -1.5, 1.5);
        let boxes = rand_boxes(cfg.num_proposals, 10, 2.0);
        let (_, _, run) = run_graphs(&store, &cfg, &feats, &boxes, [7.0, 7.0, 3.0], false).unwrap();
        let kc = cfg.num_proposals;
        for g in 0..cfg.num_graphs {
            let pos = &run.positions[g];
            let app = &run.appearances[g];
            for m in 0..kc {
                let shift = (0..kc).map(|n| app.get(m, n)).fold(f64::NEG_INFINITY, f64::max);
                let den: f64 = (0..kc).map(|n| (app.get(m, n) - shift).exp()).sum();
                let mut raw: Vec<f64> = (0..kc)
                    .map(|n| pos.get(m, n) * (app.get(m, n) - shift).exp() / den)
                    .collect();
                if raw.iter().sum::<f64>() <= ISOLATION_EPS {
                    raw[m] += 1.0;
                }
                let z: f64 = raw.iter().sum();
                let inner_expect: Vec<f64> = raw.iter().map(|&x| x / z).collect();
                for n in 0..kc {
                    let got = run.inners[g].get(m, n);
                    assert!(
                        (got - inner_expect[n]).abs() < 1e-9,
                        "inner ({m},{n}): {got} vs {}",
                        inner_expect[n]
                    );
                }
                let mx = inner_expect.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = inner_expect.iter().map(|&x| (x - mx).exp()).collect();
                let ez: f64 = exps.iter().sum();
                for n in 0..kc {
                    let got = run.alphas[g].get(m, n);
                    assert!((got - exps[n] / ez).abs() < 1e-9, "alpha ({m},{n})");
                }
                // The outer softmax preserves the row argmax.
                let argmax = |v: &[f64]| {
                    v.iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .unwrap()
                        .0
                };
                assert_eq!(argmax(&inner_expect), argmax(run.alphas[g].row(m)));
            }
        }
    }

    #[test]
    fn mixing_matches_matrix_product_oracle() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new(31);
        register(&mut store, &cfg).unwrap();
        let mut r = rng::stream(32, "test/rel-mix");
        let feats = rand_matrix(&mut r, cfg.num_proposals, cfg.d_appearance, -1.0, 1.0);
        let boxes = rand_boxes(cfg.num_proposals, 11, 1.5);
        let (_, _, run) = run_graphs(&store, &cfg, &feats, &boxes, [8.0, 8.0, 3.0], false).unwrap();
        let kc = cfg.num_proposals;
        let d2 = cfg.d_appearance;
        for m in 0..kc {
            for c in 0..d2 {
                let mut expect = feats.get(m, c);
                for g in 0..cfg.num_graphs {
                    let w_r = store.get(&format!("rel{g}/w_r")).unwrap();
                    for n in 0..kc {
                        let mut wr_rn = 0.0;
                        for j in 0..d2 {
                            wr_rn += w_r.get(c, j) * feats.get(n, j);
                        }
                        expect += run.alphas[g].get(m, n) * wr_rn;
                    }
                }
                let got = run.fused.get(m, c);
                assert!(
                    (got - expect).abs() < 1e-9 * expect.abs().max(1.0),
                    "({m},{c}): {got} vs {expect}"
                );
            }
        }
    }

    #[test]
    fn zero_graphs_is_identity() {
        let mut cfg = tiny_cfg();
        cfg.num_graphs = 0;
        let mut store = ParamStore::new(33);
        register(&mut store, &cfg).unwrap();
        assert!(store.trainable_names().is_empty());
        let mut r = rng::stream(34, "test/rel-zero");
        let feats = rand_matrix(&mut r, cfg.num_proposals, cfg.d_appearance, -1.0, 1.0);
        let boxes = rand_boxes(cfg.num_proposals, 12, 1.5);
        let (_, _, run) = run_graphs(&store, &cfg, &feats, &boxes, [8.0, 8.0, 3.0], false).unwrap();
        assert_eq!(run.fused.data(), feats.data());
    }

    #[test]
    fn zero_mixing_weights_leave_appearance_unchanged() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new(35);
        register(&mut store, &cfg).unwrap();
        for g in 0..cfg.num_graphs {
            let name = format!("rel{g}/w_r");
            let shape = store.get(&name).unwrap();
            let zero = Matrix::zeros(shape.rows(), shape.cols());
            store.set(&name, zero).unwrap();
        }
        let mut r = rng::stream(36, "test/rel-fuse-id");
        let feats = rand_matrix(&mut r, cfg.num_proposals, cfg.d_appearance, -1.0, 1.0);
        let boxes = rand_boxes(cfg.num_proposals, 13, 1.5);
        let (_, _, run) = run_graphs(&store, &cfg, &feats, &boxes, [8.0, 8.0, 3.0], false).unwrap();
        for (a, b) in run.fused.data().iter().zip(feats.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn relation_label_requires_distinct_objects_and_classes() {
        let unit = |c: [f64; 3]| OrientedBox { center: c, size: [1.0; 3], heading: 0.0 };
        let gts = vec![
            GroundTruth { bbox: unit([0.0, 0.0, 0.0]), class: 0 },
            GroundTruth { bbox: unit([5.0, 0.0, 0.0]), class: 1 },
            GroundTruth { bbox: unit([10.0, 0.0, 0.0]), class: 1 },
        ];
        // p0, p1 on gt0; p2 on gt1; p3 on gt2; p4 matches nothing.
        let proposals = vec![
            unit([0.1, 0.0, 0.0]),
            unit([-0.1, 0.0, 0.0]),
            unit([5.05, 0.0, 0.0]),
            unit([10.0, 0.1, 0.0]),
            unit([20.0, 0.0, 0.0]),
        ];
        let label = build_relation_label(&proposals, &gts);
        for m in 0..proposals.len() {
            assert_eq!(label.get(m, m), 0.0, "diagonal must be zero");
            for n in 0..proposals.len() {
                assert_eq!(label.get(m, n), label.get(n, m), "label must be symmetric");
            }
        }
        assert_eq!(label.get(0, 1), 0.0, "same object");
        assert_eq!(label.get(0, 2), 1.0, "different object and class");
        assert_eq!(label.get(1, 2), 1.0);
        assert_eq!(label.get(2, 3), 0.0, "different objects, same class");
        assert_eq!(label.get(0, 4), 0.0, "unmatched proposal");
        let empty = build_relation_label(&proposals, &[]);
        assert!(empty.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn supervision_loss_hits_pinned_values() {
        // All mass on labeled pairs: loss collapses to ~0.
        let mut tape = Tape::new();
        let g = tape.leaf(Matrix::zeros(2, 2));
        let all = Matrix::full(2, 2, 1.0);
        let loss = graph_supervision_loss(&mut tape, g, &all).unwrap();
        assert!(tape.scalar_value(loss).abs() < 1e-6);

        // Half the mass labeled: -(0.25)·ln(0.5).
        let mut tape = Tape::new();
        let g = tape.leaf(Matrix::zeros(2, 2));
        let half = Matrix::from_fn(2, 2, |_, n| if n == 0 { 1.0 } else { 0.0 });
        let loss = graph_supervision_loss(&mut tape, g, &half).unwrap();
        let expect = -(0.25f64) * 0.5f64.ln();
        assert!((tape.scalar_value(loss) - expect).abs() < 1e-9);
        assert!((expect - 0.1733).abs() < 1e-4);

        // No labeled pair: mass clamps, loss large and finite.
        let mut tape = Tape::new();
        let g = tape.leaf(Matrix::zeros(2, 2));
        let none = Matrix::zeros(2, 2);
        let loss = graph_supervision_loss(&mut tape, g, &none).unwrap();
        let v = tape.scalar_value(loss);
        assert!(v.is_finite() && v > 10.0);
    }

    #[test]
    fn supervision_loss_decreases_in_mass() {
        let mut prev = f64::INFINITY;
        for i in 1..200 {
            let m = i as f64 / 200.0;
            let mut tape = Tape::new();
            let mv = tape.leaf(Matrix::scalar(m));
            let loss = mass_loss(&mut tape, mv).unwrap();
            let v = tape.scalar_value(loss);
            assert!(v < prev, "loss must fall as mass grows (m = {m})");
            prev = v;
        }
    }

    #[test]
    fn gradients_flow_through_all_graph_params() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new(37);
        register(&mut store, &cfg).unwrap();
        let mut r = rng::stream(38, "test/rel-grad");
        let feats = rand_matrix(&mut r, cfg.num_proposals, cfg.d_appearance, -1.0, 1.0);
        let boxes = rand_boxes(cfg.num_proposals, 14, 1.5);
        let names = store.trainable_names();
        assert_eq!(names.len(), 5 * cfg.num_graphs);
        check_named("relation", &store, &names, 60, FD_TOL, &mut r, |s, want| {
            let (v, g, _) = run_graphs(s, &cfg, &feats, &boxes, [8.0, 8.0, 3.0], want)?;
            Ok((v, g))
        })
        .unwrap();
    }

    #[test]
    fn supervised_mass_gradcheck() {
        // Gradients through softmax + clamp + log chain.
        let cfg = tiny_cfg();
        let mut store = ParamStore::new(39);
        register(&mut store, &cfg).unwrap();
        let mut r = rng::stream(40, "test/rel-mass-grad");
        let feats = rand_matrix(&mut r, cfg.num_proposals, cfg.d_appearance, -1.0, 1.0);
        let boxes = rand_boxes(cfg.num_proposals, 15, 1.2);
        let kc = cfg.num_proposals;
        let label = Matrix::from_fn(kc, kc, |m, n| if m != n && (m + n) % 2 == 0 { 1.0 } else { 0.0 });
        let names = store.trainable_names();
        check_named("relation-mass", &store, &names, 40, FD_TOL, &mut r, |s, want| {
            let mut store = s.clone();
            let mut tape = Tape::new();
            let mut binder = Binder::new();
            let mut ctx = Ctx::eval(&mut tape, &mut binder, &mut store);
            let rv = ctx.tape.leaf(feats.clone());
            let (_, graphs) = forward(&mut ctx, rv, &boxes, [8.0, 8.0, 3.0], &cfg)?;
            let mut total = tape.scalar(0.0);
            for g in &graphs {
                let l = graph_supervision_loss(&mut tape, g.alpha, &label)?;
                total = tape.add(total, l)?;
            }
            let val = tape.scalar_value(total);
            let grads = if want {
                let gr = tape.backward(total)?;
                Some(binder.collect_grads(&tape, &store, &gr)?)
            } else {
                None
            };
            Ok((val, grads))
        })
        .unwrap();
    }
}
