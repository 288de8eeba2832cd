//! Command-line front end over the synthetic pipeline: fixture generation,
//! feature lifting, sampling, decoding, toy training, evaluation and
//! gradient checking.
//!
//! Configuration is one JSON file with `seed`, `model`, `synth` and `train`
//! sections; every field can also be overridden with `--set path=value`.
//! Without a config file the model section defaults to the micro scale so
//! the whole synth → train-toy → eval loop works out of the box.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::geometry::fixtures::{load_mat, load_scene, load_view, save_mat, save_scene, save_view};
use crate::geometry::{fps, lift_views, spherical_inject, CameraView, Superpointization};
use crate::harness::{
    evaluate, generate_dataset, train_toy, InferMode, Sample, SynthSpec, TrainOptions,
};
use crate::loss::{assign, pool_gt_to_superpoints, total_loss};
use crate::model::params::{load_checkpoint, save_checkpoint, ParamStore};
use crate::model::{forward, infer_gres, infer_res, ModelConfig, RawFeatures, SceneInputs};
use crate::tensor::gradcheck::grad_check;
use crate::tensor::Tape;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    /// Parameter-initialization seed. `--seed` overrides this and the synth
    /// and train seeds in one go.
    pub seed: u64,
    pub model: ModelConfig,
    pub synth: SynthSpec,
    pub train: TrainOptions,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::micro(),
            synth: SynthSpec::default(),
            train: TrainOptions::default(),
        }
    }
}

#[derive(Parser)]
#[command(name = "refseg3d", version, about = "3D referring-expression segmentation toolkit")]
struct Cli {
    /// JSON config file with `seed`, `model`, `synth` and `train` sections.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Dotted-path overrides applied on top of the config, e.g.
    /// `--set model.layers=4 --set train.lr=0.01`.
    #[arg(long = "set", global = true, value_name = "PATH=VALUE")]
    set: Vec<String>,
    /// Overrides every seed in the config (init, synth, train).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic scene/view fixtures plus a dataset manifest.
    Synth {
        #[arg(long, value_name = "DIR")]
        out_dir: PathBuf,
        /// Number of scenes, generated from consecutive synth seeds.
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
    /// Lift view features onto scene points and write the result as TNSR.
    Featlift {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        views: Vec<PathBuf>,
        /// Sphere radius; defaults to the config's model.radius.
        #[arg(long)]
        radius: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Farthest point sampling over a scene fixture.
    Fps {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        count: usize,
        /// Index the sweep starts from.
        #[arg(long, default_value_t = 0)]
        start: usize,
        /// Sample superpoint centroids (decoder seeding) or raw points.
        #[arg(long, value_parser = ["superpoints", "points"], default_value = "superpoints")]
        on: String,
        /// Output JSON path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a checkpoint on a scene fixture and write the predicted points.
    Decode {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, num_args = 0..)]
        views: Vec<PathBuf>,
        /// TNSR text-feature matrix; defaults to the fixture's embedded text.
        #[arg(long)]
        text: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        ckpt: PathBuf,
        #[arg(long, value_parser = parse_mode, default_value = "res")]
        mode: InferMode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on synthetic scenes; writes a JSONL step log and a checkpoint.
    TrainToy {
        #[arg(long, value_name = "DIR")]
        out_dir: PathBuf,
        /// Dataset size, generated from consecutive synth seeds.
        #[arg(long, default_value_t = 32)]
        count: usize,
        /// Shortcut for --set train.steps=N.
        #[arg(long)]
        steps: Option<usize>,
        /// Shortcut for --set train.lr=X.
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Score a checkpoint; prints per-sample IoU, mIoU and accuracies.
    Eval {
        #[arg(long, value_name = "DIR")]
        ckpt: PathBuf,
        /// Dataset manifest written by `synth`; regenerates from the config
        /// when omitted.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Dataset size when regenerating.
        #[arg(long, default_value_t = 32)]
        count: usize,
        #[arg(long, value_parser = parse_mode, default_value = "res")]
        mode: InferMode,
        /// Output JSON path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of the full forward + loss gradients.
    Gradcheck {
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

fn parse_mode(s: &str) -> Result<InferMode, String> {
    match s {
        "res" => Ok(InferMode::Res),
        "gres" => Ok(InferMode::Gres),
        other => Err(format!("unknown mode {other:?}, expected res or gres")),
    }
}

/// Inserts `value` at a dotted path like `model.layers`, creating
/// intermediate objects as needed.
fn set_path(root: &mut Value, dotted: &str, value: Value) -> anyhow::Result<()> {
    let (head, rest) = match dotted.split_once('.') {
        Some((h, r)) => (h, Some(r)),
        None => (dotted, None),
    };
    anyhow::ensure!(!head.is_empty(), "empty segment in config path {dotted:?}");
    let obj = root
        .as_object_mut()
        .with_context(|| format!("config path {dotted:?} descends into a non-object"))?;
    match rest {
        None => {
            obj.insert(head.to_string(), value);
            Ok(())
        }
        Some(rest) => set_path(
            obj.entry(head.to_string()).or_insert_with(|| Value::Object(Default::default())),
            rest,
            value,
        ),
    }
}

fn load_config(
    path: Option<&Path>,
    sets: &[String],
    seed: Option<u64>,
) -> anyhow::Result<CliConfig> {
    let mut value = match path {
        Some(p) => {
            let raw = fs::read_to_string(p).with_context(|| format!("read {}", p.display()))?;
            serde_json::from_str(&raw).with_context(|| format!("parse {}", p.display()))?
        }
        None => Value::Object(Default::default()),
    };
    for entry in sets {
        let (dotted, raw) = entry
            .split_once('=')
            .with_context(|| format!("--set {entry:?}: expected PATH=VALUE"))?;
        // Bare words double as strings so `--set synth.target_rule=zero` works.
        let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        set_path(&mut value, dotted, parsed)?;
    }
    let mut cfg: CliConfig =
        serde_json::from_value(value).context("config does not match the expected schema")?;
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.synth.seed = s;
        cfg.train.seed = s;
    }
    cfg.model.validate()?;
    cfg.synth.validate()?;
    Ok(cfg)
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetEntry {
    scene: String,
    views: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetManifest {
    samples: Vec<DatasetEntry>,
}

fn load_views(paths: &[PathBuf]) -> anyhow::Result<Vec<CameraView>> {
    paths.iter().map(|p| load_view(p)).collect()
}

fn load_dataset(manifest_path: &Path) -> anyhow::Result<Vec<Sample>> {
    let raw = fs::read_to_string(manifest_path)
        .with_context(|| format!("read {}", manifest_path.display()))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&raw).with_context(|| format!("parse {}", manifest_path.display()))?;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    anyhow::ensure!(!manifest.samples.is_empty(), "dataset manifest lists no samples");
    manifest
        .samples
        .iter()
        .map(|entry| {
            let fixture = load_scene(&dir.join(&entry.scene))?;
            let text_raw = fixture.text_features.with_context(|| {
                format!("{}: fixture embeds no text features", entry.scene)
            })?;
            let views = entry
                .views
                .iter()
                .map(|v| load_view(&dir.join(v)))
                .collect::<anyhow::Result<Vec<_>>>()?;
            Ok(Sample { scene: fixture.scene, views, text_raw })
        })
        .collect()
}

pub fn run() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let cfg = load_config(cli.config.as_deref(), &cli.set, cli.seed)?;
    match cli.cmd {
        Cmd::Synth { out_dir, count } => cmd_synth(&cfg, &out_dir, count),
        Cmd::Featlift { scene, views, radius, out } => {
            cmd_featlift(&scene, &views, radius.unwrap_or(cfg.model.radius), &out)
        }
        Cmd::Fps { scene, count, start, on, out } => {
            cmd_fps(&scene, count, start, &on, out.as_deref())
        }
        Cmd::Decode { scene, views, text, ckpt, mode, out } => {
            cmd_decode(&scene, &views, text.as_deref(), &ckpt, mode, &out)
        }
        Cmd::TrainToy { out_dir, count, steps, lr } => {
            let mut train = cfg.train.clone();
            if let Some(s) = steps {
                train.steps = s;
            }
            if let Some(l) = lr {
                train.lr = l;
            }
            cmd_train_toy(&cfg, &train, &out_dir, count)
        }
        Cmd::Eval { ckpt, dataset, count, mode, out } => {
            cmd_eval(&cfg, &ckpt, dataset.as_deref(), count, mode, out.as_deref())
        }
        Cmd::Gradcheck { step, tol } => cmd_gradcheck(&cfg, step, tol),
    }
}

fn cmd_synth(cfg: &CliConfig, out_dir: &Path, count: usize) -> anyhow::Result<()> {
    anyhow::ensure!(count > 0, "--count must be positive");
    fs::create_dir_all(out_dir).with_context(|| format!("create {}", out_dir.display()))?;
    let samples = generate_dataset(&cfg.synth, count)?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, sample) in samples.iter().enumerate() {
        let scene_name = format!("sample{i:03}.json");
        save_scene(&out_dir.join(&scene_name), &sample.scene, Some(&sample.text_raw))?;
        let mut view_names = Vec::with_capacity(sample.views.len());
        for (v, view) in sample.views.iter().enumerate() {
            let view_name = format!("sample{i:03}.view{v}.json");
            save_view(&out_dir.join(&view_name), view)?;
            view_names.push(view_name);
        }
        entries.push(DatasetEntry { scene: scene_name, views: view_names });
    }
    let manifest = DatasetManifest { samples: entries };
    fs::write(
        out_dir.join("dataset.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    eprintln!("wrote {count} scenes to {}", out_dir.display());
    Ok(())
}

fn cmd_featlift(
    scene_path: &Path,
    view_paths: &[PathBuf],
    radius: f64,
    out: &Path,
) -> anyhow::Result<()> {
    let fixture = load_scene(scene_path)?;
    let views = load_views(view_paths)?;
    let (p_3d, feats) = lift_views(&views)?;
    let injected = spherical_inject(&fixture.scene.points, &p_3d, &feats, radius)?;
    save_mat(out, &injected)?;
    eprintln!(
        "lifted {} pixels from {} views into a {}x{} point-feature matrix",
        p_3d.rows,
        views.len(),
        injected.rows,
        injected.cols
    );
    Ok(())
}

fn cmd_fps(
    scene_path: &Path,
    count: usize,
    start: usize,
    on: &str,
    out: Option<&Path>,
) -> anyhow::Result<()> {
    let fixture = load_scene(scene_path)?;
    let coords = match on {
        "points" => fixture.scene.points.clone(),
        _ => Superpointization::from_scene(&fixture.scene)?.sp_coords,
    };
    let indices = fps(&coords, count, start)?;
    let doc = serde_json::json!({
        "on": on,
        "start": start,
        "count": count,
        "indices": indices,
    });
    emit_json(&doc, out)
}

fn cmd_decode(
    scene_path: &Path,
    view_paths: &[PathBuf],
    text_path: Option<&Path>,
    ckpt: &Path,
    mode: InferMode,
    out: &Path,
) -> anyhow::Result<()> {
    let (model_cfg, store) = load_checkpoint(ckpt)?;
    let fixture = load_scene(scene_path)?;
    let text_raw = match text_path {
        Some(p) => load_mat(p)?,
        None => fixture
            .text_features
            .context("scene fixture embeds no text features; pass --text")?,
    };
    let views = load_views(view_paths)?;
    let inputs = SceneInputs::prepare(&fixture.scene, &RawFeatures, &views, text_raw, &model_cfg)?;
    let tape = Tape::new();
    let p = store.leaves(&tape, false);
    let fwd = forward(&inputs, &model_cfg, &p)?;
    let mask = match mode {
        InferMode::Res => infer_res(&fwd.queries, &inputs.sp, inputs.n_points),
        InferMode::Gres => infer_gres(&fwd.queries, &inputs.sp, inputs.n_points),
    };
    let point_indices: Vec<usize> = mask
        .iter()
        .enumerate()
        .filter_map(|(i, &b)| b.then_some(i))
        .collect();
    let doc = serde_json::json!({
        "expression_id": fixture.scene.expression_id,
        "mode": mode,
        "num_points": inputs.n_points,
        "point_indices": point_indices,
    });
    fs::write(out, serde_json::to_string_pretty(&doc)?)
        .with_context(|| format!("write {}", out.display()))?;
    eprintln!("predicted {} of {} points", point_indices.len(), inputs.n_points);
    Ok(())
}

fn cmd_train_toy(
    cfg: &CliConfig,
    train: &TrainOptions,
    out_dir: &Path,
    count: usize,
) -> anyhow::Result<()> {
    anyhow::ensure!(count > 0, "--count must be positive");
    let samples = generate_dataset(&cfg.synth, count)?;
    let mut store = ParamStore::init(&cfg.model, cfg.seed);
    let log = train_toy(&cfg.model, &mut store, &samples, train)?;
    fs::create_dir_all(out_dir).with_context(|| format!("create {}", out_dir.display()))?;
    let mut jsonl = String::new();
    for entry in &log {
        jsonl.push_str(&serde_json::to_string(entry)?);
        jsonl.push('\n');
    }
    fs::write(out_dir.join("log.jsonl"), jsonl)?;
    save_checkpoint(&out_dir.join("checkpoint"), &cfg.model, &store)?;
    let result = evaluate(&cfg.model, &store, &samples, InferMode::Res)?;
    eprintln!(
        "{} steps on {} scenes; final loss {:.6}; checkpoint in {}",
        log.len(),
        count,
        log.last().map(|s| s.total).unwrap_or(f64::NAN),
        out_dir.join("checkpoint").display()
    );
    print_stdout(&serde_json::to_string_pretty(&result)?)?;
    Ok(())
}

fn cmd_eval(
    cfg: &CliConfig,
    ckpt: &Path,
    dataset: Option<&Path>,
    count: usize,
    mode: InferMode,
    out: Option<&Path>,
) -> anyhow::Result<()> {
    let (model_cfg, store) = load_checkpoint(ckpt)?;
    let samples = match dataset {
        Some(manifest) => load_dataset(manifest)?,
        None => {
            anyhow::ensure!(count > 0, "--count must be positive");
            generate_dataset(&cfg.synth, count)?
        }
    };
    let result = evaluate(&model_cfg, &store, &samples, mode)?;
    emit_json(&serde_json::to_value(&result)?, out)
}

fn cmd_gradcheck(cfg: &CliConfig, step: f64, tol: f64) -> anyhow::Result<()> {
    let samples = generate_dataset(&cfg.synth, 1)?;
    let sample = &samples[0];
    let inputs = SceneInputs::prepare(
        &sample.scene,
        &RawFeatures,
        &sample.views,
        sample.text_raw.clone(),
        &cfg.model,
    )?;
    let gt_sp: Vec<Vec<f64>> = sample
        .scene
        .gt_instances
        .iter()
        .map(|m| pool_gt_to_superpoints(m, &inputs.sp))
        .collect();
    let store = ParamStore::init(&cfg.model, cfg.seed);
    let model_cfg = cfg.model.clone();
    let report = grad_check(&store.to_flat(), step, tol, |vals, want_grads| {
        let mut probe = store.clone();
        probe.load_flat(vals)?;
        let tape = Tape::new();
        let p = probe.leaves(&tape, want_grads);
        let out = forward(&inputs, &model_cfg, &p)?;
        let assignment = assign(&out.queries.coords, &sample.scene.gt_instances, &sample.scene)?;
        let (total, _) = total_loss(&out, &assignment, &gt_sp, &model_cfg)?;
        let loss = total.value();
        if want_grads {
            total.backward()?;
            Ok((loss, Some(p.grads())))
        } else {
            Ok((loss, None))
        }
    })?;
    print!("{report}");
    anyhow::ensure!(
        report.passed(),
        "gradient check failed: max err {:.3e} > tol {:.1e}",
        report.max_err(),
        report.tol
    );
    Ok(())
}

/// `println!` that treats a closed pipe (e.g. `refseg3d fps | head`) as a
/// normal way to stop instead of a panic.
fn print_stdout(s: &str) -> anyhow::Result<()> {
    use std::io::Write;
    match writeln!(std::io::stdout(), "{s}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn emit_json(doc: &Value, out: Option<&Path>) -> anyhow::Result<()> {
    let json = serde_json::to_string_pretty(doc)?;
    match out {
        Some(p) => {
            fs::write(p, &json).with_context(|| format!("write {}", p.display()))?;
            eprintln!("wrote {}", p.display());
        }
        None => print_stdout(&json)?,
    }
    Ok(())
}
