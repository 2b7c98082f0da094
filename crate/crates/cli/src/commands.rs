//! Subcommand bodies.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use defusion_core::backbone::{self, FrozenEncoder};
use defusion_core::fusion::{self, DecompositionVisual, FusionMode, FusionRequest};
use defusion_core::imaging::{load_image, save_image, ColorMode, SceneImage};
use defusion_core::metrics::{self, MetricReport, Task};
use defusion_core::model::{DeFusionModel, ModelConfig};
use defusion_core::trainer::{self, Ablation, Trainer};
use defusion_core::{synthetic, Error};
use serde_json::json;

use crate::config::Settings;
use crate::corpus::{list_images, load_dir, Pairing};
use crate::{CommonArgs, EvalArgs, PairArgs, PretrainArgs, SynthArgs, SynthKind, TrainArgs};

/// Suffix stripped from fused file stems when matching them to sources.
pub const FUSED_SUFFIX: &str = "_fused";
pub const FEATURE_EXT: &str = "feat";
pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const RUN_CONFIG: &str = "config.json";

fn settings(common: &CommonArgs) -> anyhow::Result<Settings> {
    let mut s = Settings::load(common.config.as_deref(), common.preset.as_deref())?;
    if let Some(seed) = common.seed {
        s.train.seed = seed;
        s.pretrain.seed = seed;
        s.model.init_seed = seed;
    }
    Ok(s)
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_all(dir: &Path, items: &[(String, SceneImage)]) -> anyhow::Result<()> {
    create_dir(dir)?;
    for (name, img) in items {
        save_image(img, dir.join(format!("{name}.png")))?;
    }
    Ok(())
}

pub fn synth(args: &SynthArgs) -> anyhow::Result<()> {
    let s = settings(&args.common)?;
    s.report();
    let seed = s.train.seed;
    let (n, out) = (args.size, &args.out);
    let stem = |i: usize| format!("img_{i:04}");
    let mut folders: BTreeMap<&str, Vec<(String, SceneImage)>> = BTreeMap::new();
    for i in 0..args.count {
        let k = seed.wrapping_add(i as u64);
        match args.kind {
            SynthKind::Single => folders.entry("").or_default().push((stem(i), synthetic::scene(n, n, k)?)),
            SynthKind::Ivf => {
                let (v, r) = synthetic::modal_pair(n, n, k)?;
                folders.entry("vis").or_default().push((stem(i), v));
                folders.entry("ir").or_default().push((stem(i), r));
            }
            SynthKind::Mef => {
                let (u, o) = synthetic::exposure_pair(n, n, k)?;
                folders.entry("under").or_default().push((stem(i), u));
                folders.entry("over").or_default().push((stem(i), o));
            }
            SynthKind::Mff => {
                let (near, far, gt) = synthetic::focus_pair(n, n, k)?;
                folders.entry("near").or_default().push((stem(i), near));
                folders.entry("far").or_default().push((stem(i), far));
                folders.entry("gt").or_default().push((stem(i), gt));
            }
        }
    }
    for (sub, items) in &folders {
        write_all(&out.join(sub), items)?;
    }
    log::info!("wrote {} scenes to {}", args.count, out.display());
    Ok(())
}

fn modality_name(dir: &Path) -> anyhow::Result<String> {
    dir.file_name()
        .and_then(|s| s.to_str())
        .map(str::to_string)
        .ok_or_else(|| Error::Config(format!("cannot name a modality after {}", dir.display())).into())
}

/// Path of the frozen-encoder checkpoint written for `modality`.
pub fn frozen_path(out: &Path, modality: &str) -> PathBuf {
    out.join(format!("frozen_{modality}.ckpt"))
}

pub fn pretrain_frozen(args: &PretrainArgs) -> anyhow::Result<()> {
    let mut s = settings(&args.common)?;
    if let Some(v) = args.steps {
        s.pretrain.steps = v;
    }
    if let Some(v) = args.lr {
        s.pretrain.lr = v;
    }
    if let Some(v) = args.batch_size {
        s.pretrain.batch_size = v;
    }
    if let Some(v) = args.crop {
        s.pretrain.crop = v;
    }
    s.report();
    let names = args.corpus.iter().map(|d| modality_name(d)).collect::<anyhow::Result<Vec<_>>>()?;
    for (i, n) in names.iter().enumerate() {
        if names[..i].contains(n) {
            return Err(Error::Config(format!("modality `{n}` given twice")).into());
        }
    }
    let cfg = s.model.backbone.frozen_counterpart();
    let dtype = s.model.dtype()?;
    create_dir(&args.out)?;
    for (dir, name) in args.corpus.iter().zip(&names) {
        let images = load_dir(dir)?;
        let result = backbone::pretrain_frozen(&images, cfg, name, &s.pretrain, dtype)?;
        let path = frozen_path(&args.out, name);
        let hash = result.encoder.save(&path)?;
        log::info!(
            "modality `{name}`: {} images, final loss {:?}, wrote {} ({hash})",
            images.len(),
            result.losses.last(),
            path.display()
        );
    }
    Ok(())
}

fn load_frozen(args: &TrainArgs, model: &ModelConfig) -> anyhow::Result<[FrozenEncoder; 2]> {
    let dtype = model.dtype()?;
    let (Some(vis), Some(ir)) = (&args.frozen_vis, &args.frozen_ir) else {
        return Err(Error::Config(
            "multi-modal training needs --frozen-vis and --frozen-ir (or --ablate cud-only)".into(),
        )
        .into());
    };
    let load = |p: &PathBuf| -> anyhow::Result<FrozenEncoder> {
        if !p.exists() {
            return Err(Error::Config(format!("frozen encoder {} does not exist", p.display())).into());
        }
        Ok(FrozenEncoder::load(p, dtype)?)
    };
    Ok([load(vis)?, load(ir)?])
}

fn load_multi(root: &Path) -> anyhow::Result<Vec<(SceneImage, SceneImage)>> {
    let pairing = Pairing::of_dirs(&root.join("vis"), &root.join("ir"))?;
    pairing.check(true)?;
    pairing
        .pairs
        .iter()
        .map(|(_, a, b)| Ok((load_image(a, ColorMode::Rgb)?, load_image(b, ColorMode::Rgb)?)))
        .collect()
}

pub fn train(args: &TrainArgs) -> anyhow::Result<()> {
    let mut s = settings(&args.common)?;
    let t = &mut s.train;
    if let Some(v) = args.epochs {
        t.epochs = v;
    }
    if let Some(v) = args.steps_per_epoch {
        t.steps_per_epoch = Some(v);
    }
    if let Some(v) = args.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = args.crop {
        t.crop = v;
    }
    if let Some(v) = args.lr {
        t.lr0 = v;
    }
    if let Some(v) = args.alpha {
        t.alpha = v;
    }
    if let Some(v) = args.mix {
        t.modality_mix = Some(v);
    }
    for a in &args.ablate {
        a.parse::<Ablation>()?.apply(&mut s.model, &mut s.train);
    }
    s.report();

    let single = load_dir(&args.single)?;
    let mix = s.train.effective_mix(args.multi.is_some());
    let (multi, frozen) = match &args.multi {
        Some(root) if mix > 0.0 => {
            (load_multi(root)?, Some(load_frozen(args, &s.model)?))
        }
        _ => (Vec::new(), None),
    };
    let trainer = match &args.resume {
        Some(path) => {
            if !path.exists() {
                return Err(Error::Config(format!("checkpoint {} does not exist", path.display())).into());
            }
            Trainer::resume(path, frozen)?
        }
        None => Trainer::new(DeFusionModel::new(s.model.clone())?, s.train.clone(), frozen)?,
    };
    create_dir(&args.out)?;
    let cfg_path = args.out.join(RUN_CONFIG);
    fs::write(&cfg_path, serde_json::to_string_pretty(&s)?).with_context(|| format!("writing {}", cfg_path.display()))?;
    let outcome = trainer::fit(trainer, &single, &multi, &args.out)?;
    log::info!(
        "{} steps, wrote {} ({})",
        outcome.reports.len(),
        outcome.final_checkpoint.display(),
        outcome.checkpoint_hash
    );
    Ok(())
}

struct PairJob {
    model: DeFusionModel,
    hash: String,
    mode: FusionMode,
    pairing: Pairing,
    out: PathBuf,
}

fn pair_job(args: &PairArgs, default_out: &str) -> anyhow::Result<PairJob> {
    settings(&args.common)?.report();
    let task: Task = args.task.parse()?;
    let (a, b, base) = match (&args.a, &args.b, &args.input) {
        (Some(a), Some(b), _) => (a.clone(), b.clone(), a.parent().map(Path::to_path_buf).unwrap_or_default()),
        (_, _, Some(root)) => {
            let (da, db) = task.source_dirs();
            (root.join(da), root.join(db), root.clone())
        }
        _ => return Err(Error::Config("give --input or both --a and --b".into()).into()),
    };
    let mode = match &args.mode {
        Some(m) => m.parse()?,
        None if task == Task::Ivf => FusionMode::MultiModal,
        None => FusionMode::SingleModal,
    };
    let pairing = Pairing::of_dirs(&a, &b)?;
    pairing.check(args.strict)?;
    let (model, hash) = trainer::load_model(&args.checkpoint)?;
    let out = args.out.clone().unwrap_or_else(|| base.join(default_out));
    create_dir(&out)?;
    Ok(PairJob {
        model,
        hash,
        mode,
        pairing,
        out,
    })
}

fn each_pair(job: &PairJob, mut f: impl FnMut(&str, &FusionRequest) -> anyhow::Result<()>) -> anyhow::Result<()> {
    for (stem, a, b) in &job.pairing.pairs {
        let req = FusionRequest::new(&load_image(a, ColorMode::Rgb)?, &load_image(b, ColorMode::Rgb)?, job.mode)
            .with_context(|| format!("pair `{stem}`"))?;
        f(stem, &req)?;
    }
    log::info!("processed {} pairs into {}", job.pairing.pairs.len(), job.out.display());
    Ok(())
}

pub fn fuse(args: &PairArgs) -> anyhow::Result<()> {
    let job = pair_job(args, "fused")?;
    each_pair(&job, |stem, req| {
        let img = fusion::fuse(&job.model, req)?;
        save_image(&img, job.out.join(format!("{stem}{FUSED_SUFFIX}.png")))?;
        Ok(())
    })
}

pub fn decompose(args: &PairArgs) -> anyhow::Result<()> {
    let job = pair_job(args, "decomposed")?;
    each_pair(&job, |stem, req| {
        let vis = fusion::decompose_visualize(&job.model, req)?;
        for (suffix, img) in DecompositionVisual::SUFFIXES.iter().zip(vis.images()) {
            save_image(img, job.out.join(format!("{stem}_{suffix}.png")))?;
        }
        Ok(())
    })
}

pub fn export(args: &PairArgs) -> anyhow::Result<()> {
    let job = pair_job(args, "features")?;
    each_pair(&job, |stem, req| {
        let feats = fusion::export_features(&job.model, req, &job.hash)?;
        feats.save(job.out.join(format!("{stem}.{FEATURE_EXT}")))?;
        Ok(())
    })
}

fn fused_index(dir: &Path) -> anyhow::Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for (stem, path) in list_images(dir)? {
        let key = stem.strip_suffix(FUSED_SUFFIX).unwrap_or(&stem).to_string();
        if let Some(prev) = out.insert(key.clone(), path.clone()) {
            return Err(Error::Data(format!(
                "fused images {} and {} both match `{key}`",
                prev.display(),
                path.display()
            ))
            .into());
        }
    }
    Ok(out)
}

pub fn eval(args: &EvalArgs) -> anyhow::Result<()> {
    settings(&args.common)?.report();
    let task: Task = args.task.parse()?;
    let (da, db) = task.source_dirs();
    let sources = Pairing::of_dirs(&args.input.join(da), &args.input.join(db))?;
    sources.check(true)?;
    let fused_dir = args.fused.clone().unwrap_or_else(|| args.input.join("fused"));
    let fused = fused_index(&fused_dir)?;
    let gt_dir = match (&args.gt, task) {
        (Some(g), Task::Mff) => Some(g.clone()),
        (Some(_), _) => {
            log::warn!("ground truth is only scored for mff; ignoring --gt");
            None
        }
        (None, Task::Mff) => Some(args.input.join("gt")).filter(|g| g.is_dir()),
        (None, _) => None,
    };
    let gt = gt_dir.as_deref().map(list_images).transpose()?;
    let columns = task.columns(gt.is_some());

    let mut rows = Vec::new();
    for (stem, a, b) in &sources.pairs {
        let Some(fp) = fused.get(stem) else {
            log::warn!("no fused image for `{stem}`; row marked failed");
            rows.push((stem.clone(), None));
            continue;
        };
        let g = match &gt {
            Some(map) => match map.get(stem) {
                Some(p) => Some(load_image(p, ColorMode::Rgb)?),
                None => {
                    log::warn!("no ground truth for `{stem}`; row marked failed");
                    rows.push((stem.clone(), None));
                    continue;
                }
            },
            None => None,
        };
        let f = load_image(fp, ColorMode::Rgb)?;
        let s1 = load_image(a, ColorMode::Rgb)?;
        let s2 = load_image(b, ColorMode::Rgb)?;
        match metrics::evaluate(task, &f, &s1, &s2, g.as_ref()) {
            Ok(r) => rows.push((stem.clone(), Some(r))),
            Err(Error::Contract(msg)) => {
                log::warn!("`{stem}`: {msg}; row marked failed");
                rows.push((stem.clone(), None));
            }
            Err(e) => return Err(e.into()),
        }
    }
    let report = MetricReport::from_rows(&columns, rows);
    let out = args.out.clone().unwrap_or(fused_dir);
    create_dir(&out)?;
    write_csv(&out.join(METRICS_CSV), &columns, &report)?;
    let failed: Vec<&str> = report.rows.iter().filter(|(_, r)| r.is_none()).map(|(s, _)| s.as_str()).collect();
    let summary = json!({
        "task": task,
        "images": report.rows.len() - failed.len(),
        "failed": failed,
        "means": report.means,
        "higher_is_better": report.higher_is_better,
    });
    let jp = out.join(METRICS_JSON);
    fs::write(&jp, serde_json::to_string_pretty(&summary)?).with_context(|| format!("writing {}", jp.display()))?;
    for c in &columns {
        if let Some(m) = report.means.get(*c) {
            log::info!("{c}: {m:.4}");
        }
    }
    Ok(())
}

fn write_csv(path: &Path, columns: &[&str], report: &MetricReport) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    let mut header = vec!["image", "status"];
    header.extend_from_slice(columns);
    w.write_record(&header)?;
    for (stem, row) in &report.rows {
        let mut rec = vec![stem.clone()];
        match row {
            Some(r) => {
                rec.push("ok".into());
                rec.extend(columns.iter().map(|c| r[*c].to_string()));
            }
            None => {
                rec.push("failed".into());
                rec.extend(columns.iter().map(|_| String::new()));
            }
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
