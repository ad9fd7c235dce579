// Scratch probe: long overfit with gradient clipping, tracking center error.
use graphdet::config::RunConfig;
use graphdet::losses;
use graphdet::model::{self, Ctx};
use graphdet::optim::{lr_schedule_scale, Adam, AdamConfig};
use graphdet::params::{Binder, ParamStore};
use graphdet::rng;
use graphdet::scene::generate_scene;
use graphdet::tensor::Tape;
use graphdet::train;
use rand::seq::SliceRandom;

fn main() {
    let mut cfg = RunConfig::preset("desk-overfit").unwrap();
    cfg.train.epochs = 150;
    cfg.train.lr_decay_epochs = vec![120, 140];
    let n = 20;
    let scenes: Vec<_> = (0..n)
        .map(|i| generate_scene(cfg.train.seed, i, &cfg.classes, &cfg.synth).unwrap())
        .collect();
    let mut store = ParamStore::new(cfg.train.seed);
    model::register_all(&mut store, &cfg.model, cfg.classes.len()).unwrap();
    let mut adam = Adam::new(AdamConfig { lr: cfg.train.lr, ..AdamConfig::default() });
    let t0 = std::time::Instant::now();
    let clip = 5.0f64;

    for epoch in 0..cfg.train.epochs {
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        order.shuffle(&mut rng::stream(cfg.train.seed, &format!("train/order/{epoch}")));
        let lr_scale = lr_schedule_scale(epoch, &cfg.train.lr_decay_epochs);
        let mut dir_sum = 0.0;
        let mut pos_sum = 0usize;
        let mut clipped = 0usize;
        for &idx in &order {
            let scene = &scenes[idx];
            let mut tape = Tape::new();
            let mut binder = Binder::new();
            let mut srng = rng::stream(cfg.train.seed, &format!("train/sample/{epoch}/{idx}"));
            let mut ctx = Ctx::train(&mut tape, &mut binder, &mut store);
            let out = model::forward(&mut ctx, &scene.points, &cfg.model, &cfg.classes, &mut srng).unwrap();
            let (total, report) = model::scene_loss(&mut tape, &out, &scene.objects, &cfg).unwrap();
            let s1 = losses::stage_losses(&mut tape, out.stage1.head, out.layout, &out.stage1.anchors, &scene.objects, &cfg.classes, &cfg.loss).unwrap();
            pos_sum += s1.n_pos;
            dir_sum += report.dir;
            let grads = tape.backward(total).unwrap();
            let mut named = binder.collect_grads(&tape, &store, &grads).unwrap();
            let norm2: f64 = named.values().map(|g| g.data().iter().map(|x| x * x).sum::<f64>()).sum();
            let norm = norm2.sqrt();
            if !norm.is_finite() { eprintln!("skip nonfinite grad at epoch {epoch}"); continue; }
            if norm > clip {
                let s = clip / norm;
                for g in named.values_mut() { for x in g.data_mut() { *x *= s; } }
                clipped += 1;
            }
            adam.step(&mut store, &named, lr_scale).unwrap();
        }
        if epoch % 10 == 9 || epoch < 3 {
            let err = train::pseudo_center_error(&cfg, &mut store, &scenes, "probe").unwrap();
            let map = train::evaluate(&cfg, &mut store, &scenes, "probe").unwrap();
            eprintln!(
                "epoch {epoch:>3}: dir {:.3} pos/scene {:.1} clipped {clipped}/20 center-err {err:.3} mAP {:.3}  [{:?}]",
                dir_sum / 20.0, pos_sum as f64 / 20.0, map.map, t0.elapsed()
            );
        }
    }
}
