//! Full detection pipeline and the forward-pass context shared by all
//! layers.

use rand_chacha::ChaCha12Rng;

use crate::attention::{self, InteriorSample};
use crate::backbone::{self, mlp, register_mlp};
use crate::config::{EvalConfig, ModelConfig, RunConfig};
use crate::error::Result;
use crate::geometry::{nms, Detection, OrientedBox};
use crate::losses::{self, LossReport, StageLosses};
use crate::metrics::GroundTruth;
use crate::params::{Binder, ParamStore};
use crate::proposal::{self, ClusterSet, DecodedProposal, HeadLayout, SeedPrediction};
use crate::relation::{self, GraphOutput};
use crate::scene::ClassSpec;
use crate::tensor::{Matrix, Tape, Var};

/// Everything a layer needs during one forward pass: the tape, the binder
/// that maps parameter names to tape leaves, the parameter store, and
/// whether running statistics should advance (training mode).
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    pub binder: &'a mut Binder,
    pub store: &'a mut ParamStore,
    pub train: bool,
    pub norm_momentum: f64,
}

impl<'a> Ctx<'a> {
    pub fn eval(tape: &'a mut Tape, binder: &'a mut Binder, store: &'a mut ParamStore) -> Self {
        Ctx { tape, binder, store, train: false, norm_momentum: 0.05 }
    }

    pub fn train(tape: &'a mut Tape, binder: &'a mut Binder, store: &'a mut ParamStore) -> Self {
        Ctx { tape, binder, store, train: true, norm_momentum: 0.05 }
    }

    /// Tape leaf carrying the named parameter.
    pub fn bind(&mut self, name: &str) -> Result<Var> {
        self.binder.bind(self.tape, self.store, name)
    }
}

/// One decode stage: raw head rows, the anchors they regress against, and
/// the decoded boxes.
pub struct StageOutput {
    pub head: Var,
    pub anchors: Vec<[f64; 3]>,
    pub decoded: Vec<DecodedProposal>,
}

/// Everything one forward pass produces.
pub struct ModelOutput {
    pub seeds: SeedPrediction,
    pub clusters: ClusterSet,
    pub layout: HeadLayout,
    pub stage1: StageOutput,
    /// Refined decode; present when the model runs relation graphs.
    pub stage2: Option<StageOutput>,
    pub graphs: Vec<GraphOutput>,
}

impl ModelOutput {
    /// The stage whose decode feeds detection output.
    pub fn final_stage(&self) -> &StageOutput {
        self.stage2.as_ref().unwrap_or(&self.stage1)
    }
}

fn refine_in_dim(cfg: &ModelConfig) -> usize {
    // Fused relation features plus the stage-one direction consensus.
    cfg.d_appearance + 3
}

/// Registers every parameter the configured model uses.
pub fn register_all(store: &mut ParamStore, cfg: &ModelConfig, num_classes: usize) -> Result<()> {
    backbone::register(store, cfg)?;
    proposal::register(store, cfg, num_classes)?;
    if cfg.num_graphs > 0 {
        attention::register(store, cfg)?;
        relation::register(store, cfg)?;
        register_mlp(store, "refine", refine_in_dim(cfg), &cfg.refine_mlp, cfg.use_norm)?;
        let rh = *cfg.refine_mlp.last().expect("validated");
        let width = HeadLayout::new(cfg.num_heading_bins, num_classes).width();
        // The refinement head adds a correction to the first-stage head, so
        // its output layer starts at zero: refinement begins as the identity
        // and the correction grows only as the relation features earn it.
        store.get_or_init_shaped("refine/out/l0/w", width, rh, true, |_| {
            Matrix::zeros(width, rh)
        })?;
        store.get_or_init_shaped("refine/out/l0/b", 1, width, true, |_| Matrix::zeros(1, width))?;
    }
    Ok(())
}

/// Axis-aligned extent of the point cloud, for the relation distance cutoff.
pub fn point_extent(points: &[[f64; 3]]) -> [f64; 3] {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for c in 0..3 {
            lo[c] = lo[c].min(p[c]);
            hi[c] = hi[c].max(p[c]);
        }
    }
    let mut e = [0.0; 3];
    for c in 0..3 {
        e[c] = (hi[c] - lo[c]).max(0.0);
    }
    e
}

/// Runs the whole pipeline on one point cloud. With graphs disabled the
/// output stops at stage one; otherwise interior points of every first-stage
/// box are pooled, related across proposals, and re-decoded as a correction
/// added onto the first-stage head against the same anchors.
pub fn forward(
    ctx: &mut Ctx,
    points: &[[f64; 3]],
    cfg: &ModelConfig,
    classes: &[ClassSpec],
    sample_rng: &mut ChaCha12Rng,
) -> Result<ModelOutput> {
    let seeds = backbone::forward(ctx, points, cfg)?;
    let pred = proposal::predict_seeds(ctx, &seeds, cfg)?;
    let prop = proposal::propose(ctx, &pred, cfg, classes.len())?;
    let head1 = ctx.tape.value(prop.head).clone();
    let anchors1 = prop.anchors.clone();
    let decoded1 = proposal::decode_head(&head1, prop.layout, &anchors1, classes)?;
    let stage1 = StageOutput { head: prop.head, anchors: anchors1, decoded: decoded1 };

    if cfg.num_graphs == 0 {
        return Ok(ModelOutput {
            seeds: pred,
            clusters: prop.clusters,
            layout: prop.layout,
            stage1,
            stage2: None,
            graphs: Vec::new(),
        });
    }

    let samples: Vec<InteriorSample> = stage1
        .decoded
        .iter()
        .zip(&prop.clusters.members)
        .map(|(d, members)| {
            attention::sample_interior(&d.bbox, &pred.xyz, members, cfg.pool_points, sample_rng)
        })
        .collect::<Result<_>>()?;
    let pooled = attention::pool(ctx, &samples, pred.dirs, pred.feat, cfg)?;

    let boxes: Vec<OrientedBox> = stage1.decoded.iter().map(|d| d.bbox).collect();
    let (fused, graphs) = relation::forward(ctx, pooled, &boxes, point_extent(points), cfg)?;

    let dirs = ctx.tape.slice_cols(
        stage1.head,
        prop.layout.direction().start,
        prop.layout.direction().end,
    )?;
    let refine_in = ctx.tape.concat_cols(&[fused, dirs])?;
    let h = mlp(ctx, "refine", refine_in, refine_in_dim(cfg), &cfg.refine_mlp, cfg.use_norm, true)?;
    let rh = *cfg.refine_mlp.last().expect("validated");
    let delta = mlp(ctx, "refine/out", h, rh, &[prop.layout.width()], false, false)?;
    let head2 = ctx.tape.add(stage1.head, delta)?;

    let anchors2 = stage1.anchors.clone();
    let head2_val = ctx.tape.value(head2).clone();
    let decoded2 = proposal::decode_head(&head2_val, prop.layout, &anchors2, classes)?;

    Ok(ModelOutput {
        seeds: pred,
        clusters: prop.clusters,
        layout: prop.layout,
        stage1,
        stage2: Some(StageOutput { head: head2, anchors: anchors2, decoded: decoded2 }),
        graphs,
    })
}

/// Full training objective of one scene: direction loss, per-stage head
/// losses, and (when enabled) graph supervision averaged over graphs.
pub fn scene_loss(
    tape: &mut Tape,
    output: &ModelOutput,
    objects: &[GroundTruth],
    cfg: &RunConfig,
) -> Result<(Var, LossReport)> {
    let dir = losses::direction_loss(
        tape,
        &output.seeds,
        objects,
        cfg.model.direction_outward,
        cfg.loss.direction_distance_only,
    )?;
    let mut stages = vec![losses::stage_losses(
        tape,
        output.stage1.head,
        output.layout,
        &output.stage1.anchors,
        objects,
        &cfg.classes,
        &cfg.loss,
    )?];
    if let Some(s2) = &output.stage2 {
        stages.push(losses::stage_losses(
            tape,
            s2.head,
            output.layout,
            &s2.anchors,
            objects,
            &cfg.classes,
            &cfg.loss,
        )?);
    }
    let sup = supervision_term(tape, output, objects, cfg)?;
    losses::total_loss(tape, dir, &stages, sup, &cfg.loss, cfg.lambda_graph_effective())
}

/// Mean supervision loss over all graphs, if enabled and any graph exists.
fn supervision_term(
    tape: &mut Tape,
    output: &ModelOutput,
    objects: &[GroundTruth],
    cfg: &RunConfig,
) -> Result<Option<Var>> {
    if !cfg.model.supervised_graph || output.graphs.is_empty() {
        return Ok(None);
    }
    let boxes: Vec<OrientedBox> = output.stage1.decoded.iter().map(|d| d.bbox).collect();
    let label = relation::build_relation_label(&boxes, objects);
    let mut acc: Option<Var> = None;
    for g in &output.graphs {
        let l = relation::graph_supervision_loss(tape, g.inner, &label)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, l)?,
            None => l,
        });
    }
    let acc = acc.expect("graphs non-empty");
    Ok(Some(tape.scale(acc, 1.0 / output.graphs.len() as f64)?))
}

/// Score-filters and class-wise suppresses the final decode.
pub fn detections(output: &ModelOutput, eval: &EvalConfig) -> Vec<Detection> {
    let kept: Vec<Detection> = output
        .final_stage()
        .decoded
        .iter()
        .filter(|d| d.score() >= eval.score_threshold)
        .map(|d| Detection { bbox: d.bbox, score: d.score(), class: d.class })
        .collect();
    nms(&kept, eval.nms_iou)
}

/// Per-graph final attention weights, snapshot as plain matrices.
pub fn graph_weights(tape: &Tape, output: &ModelOutput) -> Vec<Matrix> {
    output.graphs.iter().map(|g| tape.value(g.alpha).clone()).collect()
}

/// Bundles the per-stage loss handles a caller needs to drive `total_loss`
/// manually; re-exported mainly for tests.
pub type Stages = Vec<StageLosses>;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::scene::{generate_scene, SynthConfig};

    fn desk_cfg() -> RunConfig {
        RunConfig::preset("desk-overfit").expect("preset exists")
    }

    fn tiny_scene(cfg: &RunConfig, seed: u64) -> crate::scene::Scene {
        generate_scene(seed, 0, &cfg.classes, &cfg.synth).expect("scene generates")
    }

    #[test]
    fn forward_shapes_and_detect_run_end_to_end() {
        let mut cfg = desk_cfg();
        cfg.model.supervised_graph = true;
        let scene = tiny_scene(&cfg, 7);
        let mut store = ParamStore::new(11);
        register_all(&mut store, &cfg.model, cfg.classes.len()).unwrap();
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let mut ctx = Ctx::eval(&mut tape, &mut binder, &mut store);
        let mut srng = rng::stream(11, "test/model-sample");
        let out = forward(&mut ctx, &scene.points, &cfg.model, &cfg.classes, &mut srng).unwrap();

        assert_eq!(out.stage1.decoded.len(), cfg.model.num_proposals);
        assert_eq!(out.graphs.len(), cfg.model.num_graphs);
        let s2 = out.stage2.as_ref().expect("graphs enabled implies stage two");
        assert_eq!(s2.decoded.len(), cfg.model.num_proposals);
        // Stage two shares the stage-one anchors; at zero-initialized
        // correction weights it decodes exactly the stage-one boxes.
        assert_eq!(s2.anchors, out.stage1.anchors);
        for (d2, d1) in s2.decoded.iter().zip(&out.stage1.decoded) {
            assert_eq!(d2.bbox, d1.bbox);
            assert_eq!(d2.objectness, d1.objectness);
        }
        for g in &out.graphs {
            let a = tape.value(g.alpha);
            assert_eq!((a.rows(), a.cols()), (cfg.model.num_proposals, cfg.model.num_proposals));
        }

        let dets = detections(&out, &cfg.eval);
        assert!(dets.len() <= cfg.model.num_proposals);
        for d in &dets {
            assert!(d.score >= cfg.eval.score_threshold);
            assert!(d.class < cfg.classes.len());
        }

        let (total, report) = scene_loss(&mut tape, &out, &scene.objects, &cfg).unwrap();
        let v = tape.scalar_value(total);
        assert!(v.is_finite());
        assert!((report.total - v).abs() < 1e-12);
        assert!(report.sup != 0.0, "supervision active in this preset");
        // Report recombines to the weighted total.
        let recon = report.dir
            + cfg.loss.lambda_objectness * report.obj
            + cfg.loss.lambda_box * report.box_total
            + cfg.loss.lambda_semantic * report.sem
            + cfg.lambda_graph_effective() * report.sup;
        assert!((recon - report.total).abs() < 1e-9);

        // Backward reaches every bound parameter without error.
        let grads = tape.backward(total).unwrap();
        let named = binder.collect_grads(&tape, &store, &grads).unwrap();
        assert!(named.keys().any(|k| k.starts_with("refine")));
        assert!(named.keys().any(|k| k.starts_with("rel0")));
        assert!(named.keys().any(|k| k.starts_with("pool")));
    }

    #[test]
    fn zero_graphs_stops_at_stage_one() {
        let mut cfg = desk_cfg();
        cfg.model.num_graphs = 0;
        cfg.model.supervised_graph = false;
        let scene = tiny_scene(&cfg, 8);
        let mut store = ParamStore::new(12);
        register_all(&mut store, &cfg.model, cfg.classes.len()).unwrap();
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let mut ctx = Ctx::eval(&mut tape, &mut binder, &mut store);
        let mut srng = rng::stream(12, "test/model-sample");
        let out = forward(&mut ctx, &scene.points, &cfg.model, &cfg.classes, &mut srng).unwrap();
        assert!(out.stage2.is_none());
        assert!(out.graphs.is_empty());
        assert!(!store.contains("refine/l0/w"));
        let (_, report) = scene_loss(&mut tape, &out, &scene.objects, &cfg).unwrap();
        assert_eq!(report.sup, 0.0);
    }

    #[test]
    fn forward_is_deterministic_for_fixed_seeds() {
        let cfg = desk_cfg();
        let scene = tiny_scene(&cfg, 9);
        let run = || {
            let mut store = ParamStore::new(13);
            register_all(&mut store, &cfg.model, cfg.classes.len()).unwrap();
            let mut tape = Tape::new();
            let mut binder = Binder::new();
            let mut ctx = Ctx::eval(&mut tape, &mut binder, &mut store);
            let mut srng = rng::stream(13, "test/model-sample");
            let out =
                forward(&mut ctx, &scene.points, &cfg.model, &cfg.classes, &mut srng).unwrap();
            let dets = detections(&out, &cfg.eval);
            let (total, _) = scene_loss(&mut tape, &out, &scene.objects, &cfg).unwrap();
            (dets, tape.scalar_value(total))
        };
        let (d1, l1) = run();
        let (d2, l2) = run();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(d1.len(), d2.len());
        for (a, b) in d1.iter().zip(&d2) {
            assert_eq!(a.score.to_bits(), b.score.to_bits());
            assert_eq!(a.bbox, b.bbox);
            assert_eq!(a.class, b.class);
        }
    }
}
