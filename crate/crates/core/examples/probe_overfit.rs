// Scratch probe: desk-overfit on 20 scenes, report mAP trajectory.
use graphdet::config::RunConfig;
use graphdet::scene::generate_scene;
use graphdet::train;

fn main() {
    let mut cfg = RunConfig::preset("desk-overfit").unwrap();
    let n = 20;
    let scenes: Vec<_> = (0..n)
        .map(|i| generate_scene(cfg.train.seed, i, &cfg.classes, &cfg.synth).unwrap())
        .collect();
    eprintln!(
        "model: M={} Kc={} Ng={} epochs={} lr={} batch={}",
        cfg.model.num_seeds, cfg.model.num_proposals, cfg.model.num_graphs,
        cfg.train.epochs, cfg.train.lr, cfg.train.batch_size
    );
    let dir = std::path::PathBuf::from("/root/scratch/probe-out");
    let _ = std::fs::remove_dir_all(&dir);
    let t0 = std::time::Instant::now();
    cfg.train.checkpoint_every = 10_000;
    let stages = 8usize;
    let per = cfg.train.epochs / stages;
    let mut resume: Option<graphdet::checkpoint::Checkpoint> = None;
    for s in 0..stages {
        let mut part = cfg.clone();
        part.train.epochs = per * (s + 1);
        if let Some(ck) = resume.as_mut() {
            ck.config_hash = part.hash();
        }
        let r = train::train(&part, &scenes, &dir, resume.take()).unwrap();
        let mut ck = r.checkpoint;
        let dets = train::detect_scenes(&cfg, &mut ck.params, &scenes, "probe-eval").unwrap();
        let ndet: usize = dets.iter().map(|d| d.len()).sum();
        let ngt: usize = scenes.iter().map(|s| s.objects.len()).sum();
        let gts: Vec<_> = scenes.iter().map(|s| s.objects.clone()).collect();
        let map = graphdet::metrics::evaluate_map(&dets, &gts, cfg.eval.map_iou);
        let last = r.steps.last().map(|x| x.report.total).unwrap_or(f64::NAN);
        eprintln!(
            "epoch {:>3}  loss {:>8.4}  mAP {:.4}  dets {}  gts {}  per-class {:?}  elapsed {:?}",
            ck.epoch, last, map.map, ndet, ngt,
            map.per_class.iter().map(|(k, v)| (*k, (v * 100.0).round() / 100.0)).collect::<Vec<_>>(),
            t0.elapsed()
        );
        if s + 1 == stages {
            for (d, g) in dets[0].iter().zip(scenes[0].objects.iter()) {
                eprintln!(
                    "  det c={} s={:.3} ctr=({:.2},{:.2},{:.2}) sz=({:.2},{:.2},{:.2}) | gt c={} ctr=({:.2},{:.2},{:.2}) sz=({:.2},{:.2},{:.2})",
                    d.class, d.score,
                    d.bbox.center[0], d.bbox.center[1], d.bbox.center[2],
                    d.bbox.size[0], d.bbox.size[1], d.bbox.size[2],
                    g.class, g.bbox.center[0], g.bbox.center[1], g.bbox.center[2],
                    g.bbox.size[0], g.bbox.size[1], g.bbox.size[2],
                );
            }
        }
        resume = Some(ck);
    }
}
