//! Training loop: deterministic epoch/batch iteration, gradient averaging,
//! step logging, checkpointing, and evaluation helpers.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::SliceRandom;

use crate::checkpoint::{Checkpoint, FORMAT_VERSION};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::geometry::Detection;
use crate::losses::LossReport;
use crate::metrics::{evaluate_map, GroundTruth, MapReport};
use crate::model::{self, Ctx};
use crate::optim::{lr_schedule_scale, Adam, AdamConfig};
use crate::params::{Binder, ParamStore};
use crate::rng;
use crate::scene::{augment, Scene};
use crate::tensor::{Matrix, Tape};

/// Global gradient-norm cap. Data-dependent rewiring (resampling, cluster
/// changes) occasionally produces shock gradients; clipping keeps one such
/// step from derailing the optimizer state.
pub const GRAD_CLIP: f64 = 5.0;

/// One optimizer step's log entry: batch-averaged loss components.
#[derive(Debug, Clone, Copy)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub report: LossReport,
}

impl StepRecord {
    pub const CSV_HEADER: &'static str = "step,epoch,loss_total,loss_dir,loss_obj,loss_box,loss_c_reg,loss_h_cls,loss_h_reg,loss_s_cls,loss_s_reg,loss_sem,loss_sup";

    pub fn csv_row(&self) -> String {
        format!("{},{},{}", self.step, self.epoch, self.report.csv_row())
    }
}

/// Final state plus the per-step records of the epochs this call ran.
pub struct TrainResult {
    pub checkpoint: Checkpoint,
    pub steps: Vec<StepRecord>,
}

fn add_into(acc: &mut BTreeMap<String, Matrix>, grads: BTreeMap<String, Matrix>) -> Result<()> {
    for (name, g) in grads {
        match acc.get_mut(&name) {
            Some(a) => {
                if !a.same_shape(&g) {
                    return Err(Error::shape("grad_accumulate", name));
                }
                for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                    *x += y;
                }
            }
            None => {
                acc.insert(name, g);
            }
        }
    }
    Ok(())
}

fn add_report(acc: &mut LossReport, r: &LossReport) {
    acc.total += r.total;
    acc.dir += r.dir;
    acc.obj += r.obj;
    acc.box_total += r.box_total;
    acc.c_reg += r.c_reg;
    acc.h_cls += r.h_cls;
    acc.h_reg += r.h_reg;
    acc.s_cls += r.s_cls;
    acc.s_reg += r.s_reg;
    acc.sem += r.sem;
    acc.sup += r.sup;
}

fn scale_report(r: &mut LossReport, s: f64) {
    r.total *= s;
    r.dir *= s;
    r.obj *= s;
    r.box_total *= s;
    r.c_reg *= s;
    r.h_cls *= s;
    r.h_reg *= s;
    r.s_cls *= s;
    r.s_reg *= s;
    r.sem *= s;
    r.sup *= s;
}

fn zero_report() -> LossReport {
    LossReport {
        total: 0.0,
        dir: 0.0,
        obj: 0.0,
        box_total: 0.0,
        c_reg: 0.0,
        h_cls: 0.0,
        h_reg: 0.0,
        s_cls: 0.0,
        s_reg: 0.0,
        sem: 0.0,
        sup: 0.0,
    }
}

/// Loss of one scene under the current parameters, plus its gradients.
fn scene_step(
    cfg: &RunConfig,
    store: &mut ParamStore,
    scene: &Scene,
    sample_label: &str,
) -> Result<(LossReport, BTreeMap<String, Matrix>)> {
    let mut tape = Tape::new();
    let mut binder = Binder::new();
    let seed = cfg.train.seed;
    let mut srng = rng::stream(seed, sample_label);
    let mut ctx = Ctx::train(&mut tape, &mut binder, store);
    let out = model::forward(&mut ctx, &scene.points, &cfg.model, &cfg.classes, &mut srng)?;
    let (total, report) = model::scene_loss(&mut tape, &out, &scene.objects, cfg)?;
    let grads = tape.backward(total)?;
    let named = binder.collect_grads(&tape, store, &grads)?;
    Ok((report, named))
}

fn checkpoint_path(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join(format!("checkpoint-epoch-{epoch}.json"))
}

/// Trains `cfg.train.epochs` epochs over `scenes`, resuming from `resume`
/// when given. Writes one CSV row per optimizer step to
/// `out_dir/train_log.csv` (appending on resume) and a checkpoint every
/// `checkpoint_every` epochs plus `out_dir/checkpoint.json` at the end.
///
/// Every random choice (epoch shuffle, augmentation, interior sampling) is
/// drawn from a stream keyed by the root seed and the epoch/scene position,
/// so a resumed run replays exactly the steps the uninterrupted run takes.
pub fn train(
    cfg: &RunConfig,
    scenes: &[Scene],
    out_dir: &Path,
    resume: Option<Checkpoint>,
) -> Result<TrainResult> {
    if scenes.is_empty() {
        return Err(Error::Config("training needs at least one scene".into()));
    }
    let hash = cfg.hash();
    let (mut store, mut adam, start_epoch, mut global_step) = match resume {
        Some(ck) => {
            if ck.config_hash != hash {
                return Err(Error::Checkpoint(format!(
                    "config hash mismatch: checkpoint {} vs current {}",
                    ck.config_hash, hash
                )));
            }
            (ck.params, ck.optim, ck.epoch, ck.global_step)
        }
        None => {
            let mut store = ParamStore::new(cfg.train.seed);
            model::register_all(&mut store, &cfg.model, cfg.classes.len())?;
            let adam = Adam::new(AdamConfig { lr: cfg.train.lr, ..AdamConfig::default() });
            (store, adam, 0, 0)
        }
    };

    fs::create_dir_all(out_dir)?;
    let log_path = out_dir.join("train_log.csv");
    let mut log = if start_epoch == 0 {
        let mut f = fs::File::create(&log_path)?;
        writeln!(f, "{}", StepRecord::CSV_HEADER)?;
        f
    } else {
        OpenOptions::new().create(true).append(true).open(&log_path)?
    };

    let seed = cfg.train.seed;
    let mut steps = Vec::new();
    for epoch in start_epoch..cfg.train.epochs {
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        order.shuffle(&mut rng::stream(seed, &format!("train/order/{epoch}")));
        let lr_scale = lr_schedule_scale(epoch, &cfg.train.lr_decay_epochs);

        for batch in order.chunks(cfg.train.batch_size.max(1)) {
            let mut grad_acc: BTreeMap<String, Matrix> = BTreeMap::new();
            let mut report_acc = zero_report();
            for &idx in batch {
                let scene = if cfg.train.augment {
                    augment(
                        &scenes[idx],
                        &cfg.augment,
                        &mut rng::stream(seed, &format!("train/aug/{epoch}/{idx}")),
                    )
                } else {
                    scenes[idx].clone()
                };
                let label = format!("train/sample/{epoch}/{idx}");
                let (report, grads) = scene_step(cfg, &mut store, &scene, &label)?;
                add_into(&mut grad_acc, grads)?;
                add_report(&mut report_acc, &report);
            }
            let inv = 1.0 / batch.len() as f64;
            for g in grad_acc.values_mut() {
                for x in g.data_mut() {
                    *x *= inv;
                }
            }
            scale_report(&mut report_acc, inv);
            let norm = grad_acc
                .values()
                .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
                .sum::<f64>()
                .sqrt();
            if !norm.is_finite() {
                warn!("non-finite gradient norm at step {}; skipping update", global_step + 1);
            } else {
                if norm > GRAD_CLIP {
                    let s = GRAD_CLIP / norm;
                    for g in grad_acc.values_mut() {
                        for x in g.data_mut() {
                            *x *= s;
                        }
                    }
                }
                adam.step(&mut store, &grad_acc, lr_scale)?;
            }
            global_step += 1;
            let rec = StepRecord { step: global_step, epoch, report: report_acc };
            writeln!(log, "{}", rec.csv_row())?;
            steps.push(rec);
        }

        let done = epoch + 1;
        if done % cfg.train.checkpoint_every.max(1) == 0 || done == cfg.train.epochs {
            let ck = Checkpoint {
                format_version: FORMAT_VERSION,
                config_hash: hash.clone(),
                config: cfg.clone(),
                epoch: done,
                global_step,
                root_seed: seed,
                params: store.clone(),
                optim: adam.clone(),
            };
            ck.save(&checkpoint_path(out_dir, done))?;
        }
    }
    log.flush()?;

    let checkpoint = Checkpoint {
        format_version: FORMAT_VERSION,
        config_hash: hash,
        config: cfg.clone(),
        epoch: cfg.train.epochs,
        global_step,
        root_seed: seed,
        params: store,
        optim: adam,
    };
    checkpoint.save(&out_dir.join("checkpoint.json"))?;
    Ok(TrainResult { checkpoint, steps })
}

/// Detections of every scene under the current parameters, with
/// deterministic interior sampling keyed by `label` and the scene index.
pub fn detect_scenes(
    cfg: &RunConfig,
    store: &mut ParamStore,
    scenes: &[Scene],
    label: &str,
) -> Result<Vec<Vec<Detection>>> {
    let mut all = Vec::with_capacity(scenes.len());
    for (i, scene) in scenes.iter().enumerate() {
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let mut srng = rng::stream(cfg.train.seed, &format!("{label}/{i}"));
        let mut ctx = Ctx::eval(&mut tape, &mut binder, store);
        let out = model::forward(&mut ctx, &scene.points, &cfg.model, &cfg.classes, &mut srng)?;
        all.push(model::detections(&out, &cfg.eval));
    }
    Ok(all)
}

/// Mean average precision of the model over `scenes`.
pub fn evaluate(
    cfg: &RunConfig,
    store: &mut ParamStore,
    scenes: &[Scene],
    label: &str,
) -> Result<MapReport> {
    let dets = detect_scenes(cfg, store, scenes, label)?;
    let gts: Vec<Vec<GroundTruth>> = scenes.iter().map(|s| s.objects.clone()).collect();
    Ok(evaluate_map(&dets, &gts, cfg.eval.map_iou))
}

/// Mean distance between predicted pseudo centers and their true object
/// centers, over every seed that sits on an object. Candidate centers are
/// the boxes containing the seed; the nearest (to the prediction) counts,
/// mirroring the training target.
pub fn pseudo_center_error(
    cfg: &RunConfig,
    store: &mut ParamStore,
    scenes: &[Scene],
    label: &str,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, scene) in scenes.iter().enumerate() {
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let mut srng = rng::stream(cfg.train.seed, &format!("{label}/{i}"));
        let mut ctx = Ctx::eval(&mut tape, &mut binder, store);
        let out = model::forward(&mut ctx, &scene.points, &cfg.model, &cfg.classes, &mut srng)?;
        for (s, &g) in out.seeds.xyz.iter().enumerate() {
            let gp = out.seeds.centers_val[s];
            let best = scene
                .objects
                .iter()
                .filter(|o| o.bbox.contains(g))
                .map(|o| {
                    let c = o.bbox.center;
                    ((gp[0] - c[0]).powi(2) + (gp[1] - c[1]).powi(2) + (gp[2] - c[2]).powi(2))
                        .sqrt()
                })
                .min_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
            if let Some(d) = best {
                total += d;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Config("no seed lies on any object in the eval scenes".into()));
    }
    Ok(total / count as f64)
}
