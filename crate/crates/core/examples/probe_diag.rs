// Scratch probe: manual training steps with per-step diagnostics.
use graphdet::config::RunConfig;
use graphdet::losses;
use graphdet::model::{self, Ctx};
use graphdet::optim::{Adam, AdamConfig};
use graphdet::params::{Binder, ParamStore};
use graphdet::rng;
use graphdet::scene::generate_scene;
use graphdet::tensor::Tape;

fn main() {
    let cfg = RunConfig::preset("desk-overfit").unwrap();
    let n = 20;
    let scenes: Vec<_> = (0..n)
        .map(|i| generate_scene(cfg.train.seed, i, &cfg.classes, &cfg.synth).unwrap())
        .collect();
    let mut store = ParamStore::new(cfg.train.seed);
    model::register_all(&mut store, &cfg.model, cfg.classes.len()).unwrap();
    let mut adam = Adam::new(AdamConfig { lr: cfg.train.lr, ..AdamConfig::default() });
    use rand::seq::SliceRandom;

    let mut step = 0u64;
    'outer: for epoch in 0..20 {
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        order.shuffle(&mut rng::stream(cfg.train.seed, &format!("train/order/{epoch}")));
        let mut pos1_sum = 0usize;
        let mut pos2_sum = 0usize;
        let mut worst_grad: (f64, String) = (0.0, String::new());
        for &idx in &order {
            let scene = &scenes[idx];
            let mut tape = Tape::new();
            let mut binder = Binder::new();
            let mut srng = rng::stream(cfg.train.seed, &format!("train/sample/{epoch}/{idx}"));
            let mut ctx = Ctx::train(&mut tape, &mut binder, &mut store);
            let out = match model::forward(&mut ctx, &scene.points, &cfg.model, &cfg.classes, &mut srng) {
                Ok(o) => o,
                Err(e) => { eprintln!("step {step} epoch {epoch} scene {idx}: forward error {e}"); break 'outer; }
            };
            let dir = losses::direction_loss(&mut tape, &out.seeds, &scene.objects, cfg.model.direction_outward, cfg.loss.direction_distance_only);
            let dir = match dir { Ok(d) => d, Err(e) => { eprintln!("step {step}: dir error {e}"); break 'outer; } };
            let dirv = tape.scalar_value(dir);
            let s1 = losses::stage_losses(&mut tape, out.stage1.head, out.layout, &out.stage1.anchors, &scene.objects, &cfg.classes, &cfg.loss).unwrap();
            let s2v = out.stage2.as_ref().map(|s2| losses::stage_losses(&mut tape, s2.head, out.layout, &s2.anchors, &scene.objects, &cfg.classes, &cfg.loss).unwrap());
            pos1_sum += s1.n_pos;
            pos2_sum += s2v.as_ref().map_or(0, |s| s.n_pos);
            let mut stages = vec![s1];
            if let Some(s2) = s2v { stages.push(s2); }
            let (total, report) = match losses::total_loss(&mut tape, dir, &stages, None, &cfg.loss, 0.0) {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("step {step} epoch {epoch} scene {idx}: total error {e} (dir={dirv})");
                    // dump worst params
                    let mut worst: Vec<(f64, String)> = store.trainable_names().iter().map(|n| {
                        let m = store.get(n).unwrap();
                        let mx = m.data().iter().fold(0.0f64, |a, &x| if x.abs() > a || !x.is_finite() { if x.is_finite() { x.abs() } else { f64::INFINITY } } else { a });
                        (mx, n.clone())
                    }).collect();
                    worst.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
                    for (v, n) in worst.iter().take(8) { eprintln!("   param {n}: max|x| = {v}"); }
                    break 'outer;
                }
            };
            let grads = tape.backward(total).unwrap();
            let named = binder.collect_grads(&tape, &store, &grads).unwrap();
            for (name, g) in &named {
                let mx = g.data().iter().fold(0.0f64, |a, &x| a.max(x.abs()));
                if mx > worst_grad.0 || !mx.is_finite() {
                    worst_grad = (mx, name.clone());
                }
                if !mx.is_finite() {
                    eprintln!("step {step}: NONFINITE grad in {name}; report {report:?}");
                    break 'outer;
                }
            }
            adam.step(&mut store, &named, 1.0).unwrap();
            step += 1;
        }
        eprintln!("epoch {epoch:>3} done, step {step}: pos1/scene {:.1} pos2/scene {:.1} (of {}), worst grad {:.3e} in {}", pos1_sum as f64 / 20.0, pos2_sum as f64 / 20.0, cfg.model.num_proposals, worst_grad.0, worst_grad.1);
    }
}
