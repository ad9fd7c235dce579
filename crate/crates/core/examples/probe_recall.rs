// Scratch probe: train once, then diagnose recall limits per ground-truth box.
use graphdet::config::RunConfig;
use graphdet::geometry::{self, Detection};
use graphdet::metrics::{evaluate_map, GroundTruth};
use graphdet::model::{self, Ctx};
use graphdet::params::{Binder, ParamStore};
use graphdet::proposal::DecodedProposal;
use graphdet::rng;
use graphdet::scene::generate_scene;
use graphdet::tensor::Tape;
use graphdet::train;

fn to_dets(decoded: &[DecodedProposal], score_thresh: f64, nms_iou: f64) -> Vec<Detection> {
    let kept: Vec<Detection> = decoded
        .iter()
        .filter(|d| d.score() >= score_thresh)
        .map(|d| Detection { bbox: d.bbox, score: d.score(), class: d.class })
        .collect();
    geometry::nms(&kept, nms_iou)
}

fn envf(k: &str, d: f64) -> f64 {
    std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d)
}

fn main() {
    let mut cfg = RunConfig::preset("desk").unwrap();
    cfg.train.augment = false;
    cfg.train.lr = envf("LR", 2e-3);
    cfg.train.epochs = envf("EPOCHS", 300.0) as usize;
    let d1 = (cfg.train.epochs * 4) / 5;
    cfg.train.lr_decay_epochs = vec![d1, d1 + cfg.train.epochs / 10];
    cfg.model.cluster_radius = envf("RADIUS", cfg.model.cluster_radius);
    cfg.model.cluster_nsample = envf("NSAMPLE", cfg.model.cluster_nsample as f64) as usize;
    let scenes: Vec<_> = (0..20)
        .map(|i| generate_scene(cfg.train.seed, i, &cfg.classes, &cfg.synth).unwrap())
        .collect();

    let path = std::env::var("CACHE").unwrap_or("/root/scratch/recall-store.json".into());
    let path = path.as_str();
    let mut store: ParamStore = if let Ok(s) = std::fs::read_to_string(path) {
        serde_json::from_str(&s).unwrap()
    } else {
        let res = train::train(&cfg, &scenes, std::path::Path::new("/root/scratch/recall-out"), None)
            .unwrap();
        let store = res.checkpoint.params;
        std::fs::write(path, serde_json::to_string(&store).unwrap()).unwrap();
        store
    };

    let (mut n_gt, mut cov03, mut cov06) = (0usize, 0usize, 0usize);
    let mut dmin_sum = 0.0;
    let (mut fps_dmin_sum, mut fps_cov03) = (0.0, 0usize);
    let (mut s1_hit, mut s2_hit) = (0usize, 0usize);
    let (mut s1_iou_sum, mut s2_iou_sum) = (0.0, 0.0);
    let mut s2_best_scored = 0usize; // best-IoU proposal passes score+class
    let mut det_matched = 0usize;
    let mut n_dets = 0usize;
    let (mut all_dets, mut all_gts): (Vec<Vec<Detection>>, Vec<Vec<GroundTruth>>) = (vec![], vec![]);
    let (mut s1_dets_all, mut gt_missed_sizes): (Vec<Vec<Detection>>, Vec<(usize, f64)>) =
        (vec![], vec![]);
    let mut vote_err: Vec<(usize, f64, usize)> = vec![];
    let mut missed_votes: Vec<f64> = vec![];

    for (i, scene) in scenes.iter().enumerate() {
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let mut srng = rng::stream(cfg.train.seed, &format!("probe/{i}"));
        let mut ctx = Ctx::eval(&mut tape, &mut binder, &mut store);
        let out = model::forward(&mut ctx, &scene.points, &cfg.model, &cfg.classes, &mut srng)
            .unwrap();

        let dets = model::detections(&out, &cfg.eval);
        n_dets += dets.len();
        let s2 = out.stage2.as_ref().expect("overfit runs with graphs");
        for gt in &scene.objects {
            n_gt += 1;
            // Vote quality: seeds sitting on this object, mean |vote - center|.
            let (mut verr, mut vn) = (0.0, 0usize);
            for (sx, v) in out.seeds.xyz.iter().zip(&out.seeds.centers_val) {
                if gt.bbox.contains(*sx) {
                    let c = gt.bbox.center;
                    verr += ((v[0] - c[0]).powi(2) + (v[1] - c[1]).powi(2) + (v[2] - c[2]).powi(2))
                        .sqrt();
                    vn += 1;
                }
            }
            vote_err.push((gt.class, if vn > 0 { verr / vn as f64 } else { f64::NAN }, vn));
            let near = |pts: &[[f64; 3]]| {
                pts.iter()
                    .map(|a| {
                        let c = gt.bbox.center;
                        ((a[0] - c[0]).powi(2) + (a[1] - c[1]).powi(2) + (a[2] - c[2]).powi(2))
                            .sqrt()
                    })
                    .fold(f64::INFINITY, f64::min)
            };
            let dmin = near(&out.stage1.anchors);
            fps_dmin_sum += near(&out.clusters.anchors);
            if near(&out.clusters.anchors) <= 0.3 {
                fps_cov03 += 1;
            }
            dmin_sum += dmin;
            if dmin <= 0.3 {
                cov03 += 1;
            }
            if dmin <= 0.6 {
                cov06 += 1;
            }
            let best = |dec: &[DecodedProposal]| {
                dec.iter()
                    .map(|p| (geometry::iou(&p.bbox, &gt.bbox), p.score(), p.class))
                    .fold((0.0f64, 0.0, 0usize), |acc, x| if x.0 > acc.0 { x } else { acc })
            };
            let (i1, _, _) = best(&out.stage1.decoded);
            let (i2, sc2, cl2) = best(&s2.decoded);
            s1_iou_sum += i1;
            s2_iou_sum += i2;
            if i1 >= 0.25 {
                s1_hit += 1;
            }
            if i2 >= 0.25 {
                s2_hit += 1;
                if sc2 >= cfg.eval.score_threshold && cl2 == gt.class {
                    s2_best_scored += 1;
                }
            } else {
                let ve = vote_err.last().map(|(_, e, _)| *e).unwrap_or(f64::NAN);
                gt_missed_sizes.push((gt.class, dmin));
                missed_votes.push((ve * 100.0).round() / 100.0);
            }
            if dets
                .iter()
                .any(|d| d.class == gt.class && geometry::iou(&d.bbox, &gt.bbox) >= 0.25)
            {
                det_matched += 1;
            }
        }
        s1_dets_all.push(to_dets(&out.stage1.decoded, cfg.eval.score_threshold, cfg.eval.nms_iou));
        all_dets.push(dets);
        all_gts.push(scene.objects.clone());
    }

    let f = |a: usize| a as f64 / n_gt as f64;
    eprintln!("gt total {n_gt}  anchors<=0.3 {:.3}  <=0.6 {:.3}  mean dmin {:.3}  [fps picks: <=0.3 {:.3} mean {:.3}]", f(cov03), f(cov06), dmin_sum / n_gt as f64, f(fps_cov03), fps_dmin_sum / n_gt as f64);
    eprintln!("stage1: bestIoU>=0.25 {:.3}  mean best IoU {:.3}", f(s1_hit), s1_iou_sum / n_gt as f64);
    eprintln!("stage2: bestIoU>=0.25 {:.3}  mean best IoU {:.3}  scored+classed {:.3}", f(s2_hit), s2_iou_sum / n_gt as f64, f(s2_best_scored));
    eprintln!("final detections: recall {:.3}  dets/scene {:.1}", f(det_matched), n_dets as f64 / 20.0);
    let m2 = evaluate_map(&all_dets, &all_gts, 0.25);
    let m1 = evaluate_map(&s1_dets_all, &all_gts, 0.25);
    eprintln!("mAP stage2 {:.3} per-class {:?}", m2.map, m2.per_class);
    eprintln!("mAP stage1 {:.3} per-class {:?}", m1.map, m1.per_class);
    let mut by_class = [0usize; 8];
    for (c, _) in &gt_missed_sizes {
        by_class[*c] += 1;
    }
    eprintln!("missed-by-stage2 per class {:?}", &by_class[..cfg.classes.len()]);
    let missed_d: Vec<f64> = gt_missed_sizes.iter().map(|(_, d)| (*d * 100.0).round() / 100.0).collect();
    eprintln!("missed gt anchor-dmin: {missed_d:?}");
    eprintln!("missed gt vote-err:    {missed_votes:?}");
    for c in 0..cfg.classes.len() {
        let es: Vec<f64> = vote_err.iter().filter(|(k, _, n)| *k == c && *n > 0).map(|(_, e, _)| *e).collect();
        let ns: Vec<usize> = vote_err.iter().filter(|(k, _, _)| *k == c).map(|(_, _, n)| *n).collect();
        let mean = es.iter().sum::<f64>() / es.len().max(1) as f64;
        let worst = es.iter().cloned().fold(0.0, f64::max);
        let mseeds = ns.iter().sum::<usize>() as f64 / ns.len().max(1) as f64;
        eprintln!("class {c} ({}): mean vote err {mean:.3}  worst {worst:.2}  mean seeds-on-obj {mseeds:.1}", cfg.classes[c].name);
    }
}
