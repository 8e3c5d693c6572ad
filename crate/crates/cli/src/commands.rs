use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use burnmap::backbone::DTypeName;
use burnmap::dataplane::{
    build_split, make_patches, qa_filter, read_scene, synth_scene, write_scene, Partition,
    RejectReason, SplitManifest,
};
use burnmap::engine::{self, checkpoint_dtype, HistoryLog, Trainer};
use burnmap::objective::{confusion, MetricRecord};
use burnmap::tiler::{emit_error_map, infer_scene, read_mask_pgm, write_mask_pgm, WindowPredictor};
use burnmap::{
    Checkpoint, Error, LoraSpec, Model, ModelAssembly, RasterScene, Result, Scope, Strategy,
    TileJob, ViTConfig,
};
use diffcore::{Scalar, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::RunConfig;
use crate::{Cli, Command};

fn quoted(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn path_set(key: &str, p: &Path) -> String {
    format!("{key}={}", quoted(&p.display().to_string()))
}

/// Turns subcommand flags into overrides applied after `--set`.
fn flag_overrides(cmd: &Command) -> Vec<String> {
    let mut o = Vec::new();
    let mut path = |k: &str, v: &Option<PathBuf>| {
        if let Some(p) = v {
            o.push(path_set(k, p));
        }
    };
    match cmd {
        Command::Synthgen(a) => {
            path("data.dir", &a.out);
            o.extend(a.count.map(|v| format!("data.count={v}")));
            o.extend(a.seed.map(|v| format!("data.seed={v}")));
            if let Some(s) = a.size {
                o.push(format!("data.height={s}"));
                o.push(format!("data.width={s}"));
            }
        }
        Command::Split(a) => {
            path("data.dir", &a.data);
            path("data.split_file", &a.out);
            o.extend(
                a.mode
                    .as_ref()
                    .map(|m| format!("data.split.mode={}", quoted(m))),
            );
        }
        Command::Train(a) => {
            path("data.dir", &a.data);
            path("data.split_file", &a.split);
            path("train.out_dir", &a.out);
            o.extend(
                a.strategy
                    .as_ref()
                    .map(|s| format!("train.strategy={}", quoted(s))),
            );
            o.extend(a.steps.map(|v| format!("train.max_steps={v}")));
            o.extend(a.lr.map(|v| format!("train.lr={v:e}")));
            o.extend(a.seed.map(|v| format!("train.seed={v}")));
        }
        Command::Eval(a) => {
            path("data.dir", &a.data);
            path("data.split_file", &a.split);
            path("infer.checkpoint", &a.checkpoint);
            o.extend(a.stride.map(|v| format!("infer.stride={v}")));
            if a.force {
                o.push("infer.force=true".into());
            }
        }
        Command::Infer(a) => {
            path("infer.checkpoint", &a.checkpoint);
            path("infer.out_dir", &a.out_dir);
            o.extend(a.stride.map(|v| format!("infer.stride={v}")));
            if a.force {
                o.push("infer.force=true".into());
            }
        }
        Command::Params(a) => {
            o.extend(
                a.preset
                    .as_ref()
                    .map(|p| format!("model.preset={}", quoted(p))),
            );
            o.extend(
                a.strategy
                    .as_ref()
                    .map(|s| format!("train.strategy={}", quoted(s))),
            );
            o.extend(a.rank.map(|v| format!("lora.rank={v}")));
        }
    }
    o
}

pub fn run(cli: Cli) -> Result<()> {
    let mut overrides = cli.overrides.clone();
    overrides.extend(flag_overrides(&cli.command));
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    match &cli.command {
        Command::Synthgen(_) => synthgen(&cfg),
        Command::Split(_) => split(&cfg),
        Command::Train(a) => match cfg.model.vit.dtype {
            DTypeName::F32 => train::<f32>(&cfg, a.resume.as_deref()),
            DTypeName::F64 => train::<f64>(&cfg, a.resume.as_deref()),
        },
        Command::Eval(a) => eval(&cfg, a.pred_dir.as_deref(), a.out.as_deref()),
        Command::Infer(a) => infer(&cfg, &a.scene),
        Command::Params(a) => params(&cfg, a.reference, a.json),
    }
}

fn print_json(v: &impl Serialize) {
    println!(
        "{}",
        serde_json::to_string_pretty(v).expect("report serialises")
    );
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_file(p: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(p, bytes).map_err(|e| Error::io(p, e))
}

fn synthgen(cfg: &RunConfig) -> Result<()> {
    let d = &cfg.data;
    create_dir(&d.dir)?;
    let mut files = Vec::with_capacity(d.count);
    for i in 0..d.count {
        let s = synth_scene(d.seed, i, d.height, d.width, &d.scar)?;
        let path = d.dir.join(format!("{}.barc", s.fire_id));
        write_scene(&s, &path)?;
        files.push(path);
    }
    print_json(&json!({
        "dir": d.dir,
        "seed": d.seed,
        "count": files.len(),
        "height": d.height,
        "width": d.width,
    }));
    Ok(())
}

/// BARC1 files of a directory in name order.
fn scene_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "barc"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Data(format!("no .barc scenes in {}", dir.display())));
    }
    Ok(files)
}

fn load_scenes(dir: &Path) -> Result<Vec<RasterScene>> {
    scene_files(dir)?
        .iter()
        .map(|p| {
            read_scene(p).map_err(|e| match e {
                Error::Format { offset, msg } => Error::Format {
                    offset,
                    msg: format!("{}: {msg}", p.display()),
                },
                other => other,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Rejected {
    fire_id: String,
    reasons: Vec<RejectReason>,
}

/// Split manifest plus the scenes QA removed before splitting.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct SplitFile {
    #[serde(flatten)]
    manifest: SplitManifest,
    rejected: Vec<Rejected>,
}

fn make_split(cfg: &RunConfig, scenes: &[RasterScene]) -> Result<SplitFile> {
    let mut metas = Vec::new();
    let mut rejected = Vec::new();
    for s in scenes {
        let v = qa_filter(s, &cfg.data.qa);
        if cfg.data.apply_qa && !v.accepted() {
            rejected.push(Rejected {
                fire_id: s.fire_id.clone(),
                reasons: v.reasons,
            });
        } else {
            metas.push(s.meta());
        }
    }
    Ok(SplitFile {
        manifest: build_split(&metas, &cfg.data.split)?,
        rejected,
    })
}

fn split(cfg: &RunConfig) -> Result<()> {
    let scenes = load_scenes(&cfg.data.dir)?;
    let sf = make_split(cfg, &scenes)?;
    let out = cfg.data.split_path();
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_file(
        &out,
        serde_json::to_vec_pretty(&sf).expect("manifest serialises"),
    )?;
    print_json(&json!({
        "split_file": out,
        "mode": sf.manifest.mode,
        "train": sf.manifest.ids(Partition::Train).len(),
        "test": sf.manifest.ids(Partition::Test).len(),
        "rejected": sf.rejected.len(),
    }));
    Ok(())
}

/// The split manifest on disk, or one built on the fly when there is none.
fn current_split(cfg: &RunConfig, scenes: &[RasterScene]) -> Result<SplitFile> {
    let path = cfg.data.split_path();
    if path.exists() {
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_slice(&bytes)
            .map_err(|e| Error::Data(format!("{}: bad split manifest: {e}", path.display())))
    } else {
        eprintln!(
            "note: {} not found; splitting {} in memory",
            path.display(),
            cfg.data.dir.display()
        );
        make_split(cfg, scenes)
    }
}

fn partition<'a>(
    scenes: &'a [RasterScene],
    split: &SplitFile,
    part: Partition,
) -> Vec<&'a RasterScene> {
    let ids: BTreeSet<&str> = split.manifest.ids(part).into_iter().collect();
    scenes
        .iter()
        .filter(|s| ids.contains(s.fire_id.as_str()))
        .collect()
}

fn train<T: Scalar>(cfg: &RunConfig, resume: Option<&Path>) -> Result<()> {
    let scenes = load_scenes(&cfg.data.dir)?;
    let split = current_split(cfg, &scenes)?;
    let train_scenes = partition(&scenes, &split, Partition::Train);
    if train_scenes.is_empty() {
        return Err(Error::Data("the split has no training scenes".into()));
    }
    let size = cfg.model.vit.img_size;
    let mut patches = Vec::new();
    for s in &train_scenes {
        patches.extend(make_patches(s, size, cfg.data.patch_stride)?);
    }
    let (train_p, val_p) = engine::holdout_split(patches, cfg.train.val_fraction);
    let tc = cfg.train.clone();
    let trainer = match resume {
        Some(path) => {
            let expected =
                ModelAssembly::build(&cfg.model.config(), tc.strategy, &cfg.lora)?.config_hash();
            let ck = Checkpoint::<T>::load(path, Some(&expected), cfg.infer.force)?;
            Trainer::resume(&ck, &train_p, &val_p, tc)?
        }
        None => {
            let model = Model::<T>::build(
                &cfg.model.config(),
                tc.strategy,
                &cfg.lora,
                cfg.model.init_seed,
            )?;
            Trainer::new(model, &train_p, &val_p, tc)?
        }
    };
    for w in &trainer.model.assembly.warnings {
        eprintln!("warning: {w}");
    }
    let report = engine::param_report(&trainer.model.assembly, Scope::FullNetwork);
    eprintln!(
        "training {} on {} patches ({} validation) from {} scenes; {report}",
        trainer.config().strategy,
        train_p.len(),
        val_p.len(),
        train_scenes.len()
    );
    create_dir(&cfg.out_dir)?;
    write_file(&cfg.out_dir.join("run.toml"), cfg.to_toml())?;
    let hist_path = cfg.out_dir.join("history.jsonl");
    if resume.is_none() && hist_path.exists() {
        std::fs::remove_file(&hist_path).map_err(|e| Error::io(&hist_path, e))?;
    }
    let mut log = HistoryLog::open(&hist_path)?;
    let outcome = trainer.run(|e| {
        if let Some(v) = e.val_iou {
            eprintln!("step {} loss {:.4} val_iou {v:.4}", e.step, e.loss);
        }
        log.append(e)
    })?;
    let best = cfg.out_dir.join("best.ckpt");
    let last = cfg.out_dir.join("last.ckpt");
    outcome.best.save(&best)?;
    outcome.last.save(&last)?;
    print_json(&json!({
        "strategy": outcome.last.strategy,
        "steps": outcome.last.step,
        "best_step": outcome.best.step,
        "best_val_iou": outcome.last.best_val_iou,
        "final_loss": outcome.history.last().map(|h| h.loss),
        "trainable": report.trainable,
        "total": report.total,
        "config_hash": outcome.last.config_hash,
        "best_checkpoint": best,
        "last_checkpoint": last,
    }));
    Ok(())
}

/// A checkpointed model of either precision.
enum Loaded {
    F32(Model<f32>),
    F64(Model<f64>),
}

impl Loaded {
    fn strategy(&self) -> Strategy {
        match self {
            Loaded::F32(m) => m.assembly.strategy,
            Loaded::F64(m) => m.assembly.strategy,
        }
    }
}

impl WindowPredictor for Loaded {
    fn window(&self) -> usize {
        match self {
            Loaded::F32(m) => m.window(),
            Loaded::F64(m) => m.window(),
        }
    }

    fn predict_window(&self, pre: &Tensor<f32>, post: &Tensor<f32>) -> Result<Tensor<f64>> {
        match self {
            Loaded::F32(m) => m.predict_window(pre, post),
            Loaded::F64(m) => m.predict_window(pre, post),
        }
    }
}

fn load_model(cfg: &RunConfig) -> Result<Loaded> {
    let path = cfg.infer.checkpoint.as_ref().ok_or_else(|| {
        Error::Config("no checkpoint given (infer.checkpoint or --checkpoint)".into())
    })?;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    fn open<T: Scalar>(cfg: &RunConfig, bytes: &[u8], path: &Path) -> Result<Model<T>> {
        let ck = Checkpoint::<T>::from_bytes(bytes)?;
        let expected = ModelAssembly::build_with_adapters(
            &cfg.model.config(),
            ck.strategy,
            ck.lora.is_some().then_some(&cfg.lora),
        )?
        .config_hash();
        if expected != ck.config_hash && !cfg.infer.force {
            return Err(Error::Config(format!(
                "{} was trained with config hash {}, the run config gives {expected}; pass the training config or --force",
                path.display(),
                ck.config_hash
            )));
        }
        ck.to_model()
    }
    Ok(match checkpoint_dtype(&bytes)? {
        DTypeName::F32 => Loaded::F32(open(cfg, &bytes, path)?),
        DTypeName::F64 => Loaded::F64(open(cfg, &bytes, path)?),
    })
}

fn tile_job(cfg: &RunConfig, model: &impl WindowPredictor) -> TileJob {
    TileJob {
        window: model.window(),
        stride: cfg.infer.stride,
    }
}

fn eval(cfg: &RunConfig, pred_dir: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let model = match pred_dir {
        Some(_) => None,
        None => Some(load_model(cfg)?),
    };
    let strategy = model
        .as_ref()
        .map_or("external".to_string(), |m| m.strategy().name().to_string());
    let scenes = load_scenes(&cfg.data.dir)?;
    let groups: Vec<(&str, Vec<&RasterScene>)> = if cfg.data.split_path().exists() {
        let split = current_split(cfg, &scenes)?;
        vec![
            ("train", partition(&scenes, &split, Partition::Train)),
            ("test", partition(&scenes, &split, Partition::Test)),
        ]
    } else {
        vec![("all", scenes.iter().collect())]
    };
    let mut records = Vec::new();
    for (name, group) in groups {
        let mut total = burnmap::ConfusionCounts::default();
        for s in group {
            let pred = match (&model, pred_dir) {
                (Some(m), _) => infer_scene(m, s, &tile_job(cfg, m))?.pred,
                (None, Some(dir)) => read_mask_pgm(dir.join(format!("{}.pred.pgm", s.fire_id)))?,
                (None, None) => unreachable!("model or prediction directory"),
            };
            total += confusion(&pred, &s.mask)?;
        }
        records.push(MetricRecord::new(name, strategy.clone(), total));
    }
    if let Some(p) = out {
        write_file(
            p,
            serde_json::to_vec_pretty(&records).expect("records serialise"),
        )?;
    }
    print_json(&records);
    Ok(())
}

fn infer(cfg: &RunConfig, scene_path: &Path) -> Result<()> {
    let model = load_model(cfg)?;
    let scene = read_scene(scene_path)?;
    let r = infer_scene(&model, &scene, &tile_job(cfg, &model))?;
    create_dir(&cfg.infer.out_dir)?;
    let pred_path = cfg
        .infer
        .out_dir
        .join(format!("{}.pred.pgm", scene.fire_id));
    let map_path = cfg
        .infer
        .out_dir
        .join(format!("{}.error.ppm", scene.fire_id));
    write_mask_pgm(&r.pred, &pred_path)?;
    let c = emit_error_map(&r.pred, &scene.mask, &map_path)?;
    print_json(&json!({
        "fire_id": scene.fire_id,
        "height": scene.height(),
        "width": scene.width(),
        "min_coverage": r.count.iter().min(),
        "max_coverage": r.count.iter().max(),
        "tp": c.tp, "fp": c.fp, "fn": c.fn_, "tn": c.tn,
        "iou": c.iou(),
        "f1": c.f1(),
        "prediction": pred_path,
        "error_map": map_path,
    }));
    Ok(())
}

fn params(cfg: &RunConfig, reference: bool, as_json: bool) -> Result<()> {
    let rows: Vec<(String, ModelAssembly)> = if reference {
        [
            ("terramind-b", LoraSpec::default()),
            ("dinov3-b", LoraSpec::default()),
            ("prithvi-v2-l", LoraSpec::prithvi()),
        ]
        .into_iter()
        .map(|(name, lora)| {
            let mut mc = cfg.model.config();
            mc.vit = ViTConfig::preset(name)?;
            Ok((
                name.to_string(),
                ModelAssembly::build(&mc, Strategy::Lora, &lora)?,
            ))
        })
        .collect::<Result<_>>()?
    } else {
        vec![(
            cfg.model.preset.clone(),
            ModelAssembly::build(&cfg.model.config(), cfg.train.strategy, &cfg.lora)?,
        )]
    };
    let mut out = Vec::new();
    for (name, a) in &rows {
        for w in &a.warnings {
            eprintln!("warning: {w}");
        }
        let enc = engine::param_report(a, Scope::EncoderOnly);
        let full = engine::param_report(a, Scope::FullNetwork);
        if as_json {
            out.push(json!({
                "model": name,
                "strategy": a.strategy,
                "config_hash": a.config_hash(),
                "encoder_only": enc,
                "full_network": full,
            }));
        } else {
            println!("{name} ({})", a.strategy);
            println!("  {enc}");
            println!("  {full}");
        }
    }
    if as_json {
        print_json(&out);
    }
    Ok(())
}
