//! Command-line front end: scene synthesis, training, detection, evaluation,
//! and finite-difference gradient checks.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use rand::Rng;
use serde::{Deserialize, Serialize};

use graphdet::checkpoint::Checkpoint;
use graphdet::config::RunConfig;
use graphdet::geometry::Detection;
use graphdet::metrics::{evaluate_map, GroundTruth};
use graphdet::model::{self, Ctx};
use graphdet::params::{Binder, ParamStore};
use graphdet::rng;
use graphdet::scene::{generate_scene, Scene};
use graphdet::tensor::gradcheck::{check_named, FD_TOL};
use graphdet::tensor::{Matrix, Tape};
use graphdet::train;

#[derive(Parser)]
#[command(
    name = "graphdet",
    version,
    about = "3D object detection on point clouds with object-object relation graphs"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a deterministic synthetic scene corpus.
    Synth(SynthArgs),
    /// Train a model over a directory of scene files.
    Train(TrainArgs),
    /// Detect objects in one scene with a trained checkpoint.
    Detect(DetectArgs),
    /// Score detection dumps against ground-truth scenes.
    Eval(EvalArgs),
    /// Finite-difference gradient checks per parameter group.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Number of scenes to generate.
    #[arg(long)]
    n: usize,
    /// Preset name or TOML config path.
    #[arg(long)]
    config: String,
    /// Output directory for scene files and the manifest.
    #[arg(long)]
    out_dir: PathBuf,
    /// Also write an ASCII PLY point cloud per scene (points only).
    #[arg(long)]
    ply: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Preset name or TOML config path.
    #[arg(long)]
    config: String,
    /// Directory of JSON scene files (with ground truth).
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the training log and checkpoints.
    #[arg(long)]
    out: PathBuf,
    /// Resume from an existing checkpoint (config hashes must match).
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct DetectArgs {
    /// Trained checkpoint (embeds its config).
    #[arg(long)]
    ckpt: PathBuf,
    /// Scene file, .json or .ply.
    #[arg(long)]
    scene: PathBuf,
    /// Output JSON dump of post-NMS proposals.
    #[arg(long)]
    out: PathBuf,
    /// Also write each relation graph's attention matrix as CSV next to the
    /// dump (<out>.graph<G>.csv).
    #[arg(long)]
    dump_graph: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Detection dump file, or a directory of dumps (sorted by name).
    #[arg(long)]
    dets: PathBuf,
    /// Ground-truth scene JSON file, or a directory (sorted by name).
    #[arg(long)]
    gt: PathBuf,
    /// IoU threshold for a match.
    #[arg(long, default_value_t = 0.25)]
    iou: f64,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Parameter group: backbone | proposal | attention | relation | refine | all.
    #[arg(long)]
    module: String,
    /// Random single-coordinate probes to run.
    #[arg(long, default_value_t = 100)]
    probes: usize,
}

/// One record of the detection dump.
#[derive(Serialize, Deserialize)]
struct ProposalRecord {
    center: [f64; 3],
    size: [f64; 3],
    heading: f64,
    class: usize,
    objectness: f64,
    score: f64,
}

/// Detection dump: the config hash of the producing model plus the post-NMS
/// proposals of one scene.
#[derive(Serialize, Deserialize)]
struct DetectionDump {
    config_hash: String,
    scene: String,
    proposals: Vec<ProposalRecord>,
}

#[derive(Serialize)]
struct SynthManifest {
    config_hash: String,
    seed: u64,
    count: usize,
    files: Vec<String>,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Synth(a) => synth(a),
        Cmd::Train(a) => train_cmd(a),
        Cmd::Detect(a) => detect(a),
        Cmd::Eval(a) => eval(a),
        Cmd::Gradcheck(a) => gradcheck(a),
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = RunConfig::load(&a.config)?;
    fs::create_dir_all(&a.out_dir)?;
    let mut files = Vec::with_capacity(a.n);
    for i in 0..a.n {
        let scene = generate_scene(cfg.train.seed, i, &cfg.classes, &cfg.synth)?;
        let name = format!("scene-{i:04}.json");
        scene.save_json(&a.out_dir.join(&name))?;
        if a.ply {
            scene.save_ply(&a.out_dir.join(format!("scene-{i:04}.ply")))?;
        }
        files.push(name);
    }
    let manifest = SynthManifest {
        config_hash: cfg.hash(),
        seed: cfg.train.seed,
        count: a.n,
        files,
    };
    fs::write(a.out_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    info!("wrote {} scenes to {}", a.n, a.out_dir.display());
    Ok(())
}

/// All .json scene files of a directory, sorted by file name.
fn scene_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading scene directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().and_then(|e| e.to_str()) == Some("json")
                && p.file_name().and_then(|n| n.to_str()) != Some("manifest.json")
        })
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no .json scene files in {}", dir.display());
    }
    Ok(files)
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let cfg = RunConfig::load(&a.config)?;
    let scenes: Vec<Scene> = scene_files(&a.data)?
        .iter()
        .map(|p| Scene::load(p))
        .collect::<graphdet::error::Result<_>>()?;
    let resume = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    info!(
        "training on {} scenes for {} epochs (resume: {})",
        scenes.len(),
        cfg.train.epochs,
        a.resume.is_some()
    );
    let result = train::train(&cfg, &scenes, &a.out, resume)?;
    let last = result.steps.last().map(|s| s.report.total);
    info!(
        "finished at epoch {} ({} steps); final loss {:?}; checkpoint at {}",
        result.checkpoint.epoch,
        result.checkpoint.global_step,
        last,
        a.out.join("checkpoint.json").display()
    );
    Ok(())
}

fn detect(a: DetectArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let cfg = ck.config.clone();
    let mut store = ck.params;
    let scene = Scene::load(&a.scene)?;

    let mut tape = Tape::new();
    let mut binder = Binder::new();
    let mut srng = rng::stream(ck.root_seed, "detect/0");
    let mut ctx = Ctx::eval(&mut tape, &mut binder, &mut store);
    let out = model::forward(&mut ctx, &scene.points, &cfg.model, &cfg.classes, &mut srng)?;
    let dets = model::detections(&out, &cfg.eval);

    // Carry objectness into the dump by matching each kept detection back to
    // its decoded proposal (boxes are copied verbatim, so bit-equality holds).
    let decoded = &out.final_stage().decoded;
    let proposals: Vec<ProposalRecord> = dets
        .iter()
        .map(|d| {
            let objectness = decoded
                .iter()
                .find(|p| p.bbox == d.bbox && p.class == d.class)
                .map(|p| p.objectness)
                .unwrap_or(0.0);
            ProposalRecord {
                center: d.bbox.center,
                size: d.bbox.size,
                heading: d.bbox.heading,
                class: d.class,
                objectness,
                score: d.score,
            }
        })
        .collect();

    let dump = DetectionDump {
        config_hash: ck.config_hash.clone(),
        scene: a.scene.display().to_string(),
        proposals,
    };
    if let Some(dir) = a.out.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(&a.out, serde_json::to_string_pretty(&dump)?)?;
    info!("wrote {} detections to {}", dump.proposals.len(), a.out.display());

    if a.dump_graph {
        let weights = model::graph_weights(&tape, &out);
        for (g, m) in weights.iter().enumerate() {
            let path = a.out.with_extension(format!("graph{g}.csv"));
            let mut s = String::new();
            for r in 0..m.rows() {
                let row: Vec<String> = m.row(r).iter().map(|x| format!("{x}")).collect();
                s.push_str(&row.join(","));
                s.push('\n');
            }
            fs::write(&path, s)?;
            info!("wrote graph {g} attention ({}x{}) to {}", m.rows(), m.cols(), path.display());
        }
        if weights.is_empty() {
            info!("model has no relation graphs; nothing to dump");
        }
    }
    Ok(())
}

/// A single file, or every .json in a directory, sorted by name.
fn json_inputs(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_dir() {
        scene_files(path)
    } else {
        Ok(vec![path.to_path_buf()])
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    let det_files = json_inputs(&a.dets)?;
    let gt_files = json_inputs(&a.gt)?;
    if det_files.len() != gt_files.len() {
        bail!(
            "{} detection dumps vs {} ground-truth scenes",
            det_files.len(),
            gt_files.len()
        );
    }
    let mut dets: Vec<Vec<Detection>> = Vec::with_capacity(det_files.len());
    for f in &det_files {
        let dump: DetectionDump = serde_json::from_str(
            &fs::read_to_string(f).with_context(|| f.display().to_string())?,
        )
        .with_context(|| format!("parsing detection dump {}", f.display()))?;
        dets.push(
            dump.proposals
                .iter()
                .map(|p| Detection {
                    bbox: graphdet::geometry::OrientedBox {
                        center: p.center,
                        size: p.size,
                        heading: p.heading,
                    },
                    score: p.score,
                    class: p.class,
                })
                .collect(),
        );
    }
    let mut gts: Vec<Vec<GroundTruth>> = Vec::with_capacity(gt_files.len());
    for f in &gt_files {
        let scene = Scene::load(f)?;
        if scene.objects.is_empty() {
            log::warn!("{}: no ground-truth objects", f.display());
        }
        gts.push(scene.objects);
    }
    let report = evaluate_map(&dets, &gts, a.iou);
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let prefixes: &[&str] = match a.module.as_str() {
        "backbone" => &["backbone/"],
        "proposal" => &["seed/", "proposal/"],
        "attention" => &["pool/"],
        "relation" => &["rel"],
        "refine" => &["refine/"],
        "all" => &[""],
        other => bail!(
            "unknown module '{other}' (backbone, proposal, attention, relation, refine, all)"
        ),
    };

    // A slim end-to-end run drives the checks: full forward plus every loss
    // term, so the probed parameters see exactly the training-time graph.
    let mut cfg = RunConfig::preset("desk-overfit")?;
    cfg.model.supervised_graph = true;
    cfg.loss.lambda_graph = 0.1;
    cfg.synth.n_points = 512;
    cfg.model.sa_npoints = vec![128, 64, 32, 16];
    cfg.model.num_seeds = 64;
    cfg.model.num_proposals = 8;
    cfg.validate()?;
    let scene = generate_scene(7, 0, &cfg.classes, &cfg.synth)?;

    let mut store = ParamStore::new(9);
    model::register_all(&mut store, &cfg.model, cfg.classes.len())?;
    // The refinement output layer registers as zeros (it starts as the
    // identity correction). Zeros would silence the gradient path from the
    // relation stage into the box losses, so the check probes a perturbed
    // copy instead.
    if cfg.model.num_graphs > 0 {
        let w = store.get("refine/out/l0/w")?.clone();
        let mut r = rng::stream(9, "gradcheck/refine-init");
        let jittered = Matrix::from_fn(w.rows(), w.cols(), |_, _| r.gen_range(-0.05..0.05));
        store.set("refine/out/l0/w", jittered)?;
    }
    let names: Vec<String> = store
        .trainable_names()
        .into_iter()
        .filter(|n| prefixes.iter().any(|p| n.starts_with(p)))
        .collect();
    if names.is_empty() {
        bail!("no trainable parameters match module '{}'", a.module);
    }

    let drive = |s: &ParamStore,
                 want: bool|
     -> graphdet::error::Result<(f64, Option<BTreeMap<String, Matrix>>)> {
        let mut store = s.clone();
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let mut srng = rng::stream(9, "gradcheck/sample");
        let mut ctx = Ctx::train(&mut tape, &mut binder, &mut store);
        let out = model::forward(&mut ctx, &scene.points, &cfg.model, &cfg.classes, &mut srng)?;
        let (total, _) = model::scene_loss(&mut tape, &out, &scene.objects, &cfg)?;
        let val = tape.scalar_value(total);
        if want {
            let g = tape.backward(total)?;
            Ok((val, Some(binder.collect_grads(&tape, &store, &g)?)))
        } else {
            Ok((val, None))
        }
    };

    let mut r = rng::stream(9, "gradcheck/probes");
    let report = check_named(&a.module, &store, &names, a.probes, FD_TOL, &mut r, drive)?;
    let pass = report.max_rel_err < FD_TOL;
    println!(
        "{}: {} probes over {} parameters, max rel err {:.3e} ({}) -> {}",
        report.module,
        report.probes,
        names.len(),
        report.max_rel_err,
        report.worst,
        if pass { "PASS" } else { "FAIL" }
    );
    if !pass {
        std::process::exit(2);
    }
    Ok(())
}
