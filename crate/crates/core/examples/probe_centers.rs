// Scratch probe: where do predicted centers and anchors land relative to gt?
use graphdet::config::RunConfig;
use graphdet::model::{self, Ctx};
use graphdet::params::{Binder, ParamStore};
use graphdet::rng;
use graphdet::scene::generate_scene;
use graphdet::tensor::Tape;
use graphdet::train;

fn main() {
    let mut cfg = RunConfig::preset("desk-overfit").unwrap();
    cfg.train.epochs = 16; // stop before the blowup
    cfg.train.checkpoint_every = 10_000;
    let n = 20;
    let scenes: Vec<_> = (0..n)
        .map(|i| generate_scene(cfg.train.seed, i, &cfg.classes, &cfg.synth).unwrap())
        .collect();
    let dir = std::path::PathBuf::from("/root/scratch/probe-centers");
    let _ = std::fs::remove_dir_all(&dir);
    let r = train::train(&cfg, &scenes, &dir, None).unwrap();
    let mut store = r.checkpoint.params;
    // per-component means of last epoch
    let tail = &r.steps[r.steps.len() - 20..];
    let mean = |f: fn(&graphdet::losses::LossReport) -> f64| {
        tail.iter().map(|s| f(&s.report)).sum::<f64>() / tail.len() as f64
    };
    eprintln!(
        "last-epoch means: total {:.3} dir {:.3} obj {:.3} box {:.3} sem {:.3}",
        mean(|r| r.total), mean(|r| r.dir), mean(|r| r.obj), mean(|r| r.box_total), mean(|r| r.sem)
    );
    let err = train::pseudo_center_error(&cfg, &mut store, &scenes, "probe").unwrap();
    eprintln!("pseudo-center error (mean over on-object seeds): {err:.3} m");

    for (i, scene) in scenes.iter().take(3).enumerate() {
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let mut srng = rng::stream(cfg.train.seed, &format!("probe/{i}"));
        let mut ctx = Ctx::eval(&mut tape, &mut binder, &mut store);
        let out = model::forward(&mut ctx, &scene.points, &cfg.model, &cfg.classes, &mut srng).unwrap();
        let anchors = &out.stage1.anchors;
        let mut line = String::new();
        for o in &scene.objects {
            let c = o.bbox.center;
            let dmin = anchors.iter().map(|a| {
                ((a[0]-c[0]).powi(2)+(a[1]-c[1]).powi(2)+(a[2]-c[2]).powi(2)).sqrt()
            }).fold(f64::INFINITY, f64::min);
            line.push_str(&format!("{dmin:.2} "));
        }
        // how concentrated are predicted centers? count centers within 0.3 of any gt
        let near = out.seeds.centers_val.iter().filter(|g| {
            scene.objects.iter().any(|o| {
                let c = o.bbox.center;
                ((g[0]-c[0]).powi(2)+(g[1]-c[1]).powi(2)+(g[2]-c[2]).powi(2)).sqrt() <= 0.3
            })
        }).count();
        eprintln!(
            "scene {i}: gt->nearest-anchor {line} | centers within 0.3 of a gt: {near}/{}",
            out.seeds.centers_val.len()
        );
    }
}
