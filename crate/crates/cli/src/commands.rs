use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use drex::analysis::{
    ablate_branches, ablate_dino_dims, ablate_resnet_blocks, attention_weight_correlation,
    grad_importance, AblationResult, AnalysisConfig,
};
use drex::checkpoint::Checkpoint;
use drex::features::{
    read_features, read_features_unchecked, read_features_with_layout, validate_manifest,
    write_features, DatasetManifest,
};
use drex::synthetic::{generate, SyntheticSpec, Target};
use drex::trainer::{evaluate, train, TrainConfig};
use drex::{Ablation, FusionConfig, Model};
use serde::Serialize;
use serde_json::Value;

use crate::config::{RunConfig, Section};
use crate::output::Output;

const CHECKPOINT_FILE: &str = "model.drxc";

fn load_features(path: &Path) -> Result<DatasetManifest> {
    read_features(path).with_context(|| format!("reading features {}", path.display()))
}

/// A checkpoint file, or a training output directory containing one.
fn checkpoint_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(CHECKPOINT_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Loads the checkpoint and makes its configuration the resolved one.
fn load_checkpoint(cfg: &mut RunConfig) -> Result<(Checkpoint, Model)> {
    let path = checkpoint_path(&cfg.require_path("ckpt")?);
    let ckpt = Checkpoint::load(&path)
        .with_context(|| format!("loading checkpoint {}", path.display()))?;
    cfg.adopt(Section::Model, &ckpt.model, "the checkpoint", &[])?;
    cfg.adopt(
        Section::Train,
        &ckpt.train,
        "the checkpoint",
        &["train.eval_with_ema"],
    )?;
    let use_ema: bool = cfg.get("train.eval_with_ema")?;
    let model = ckpt.model(use_ema)?;
    Ok((ckpt, model))
}

fn eval_set(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<DatasetManifest> {
    let path = cfg.require_path("features")?;
    read_features_with_layout(&path, &ckpt.model.layout())
        .with_context(|| format!("reading features {}", path.display()))
}

fn weights_label(cfg: &RunConfig) -> Result<&'static str> {
    Ok(if cfg.get::<bool>("train.eval_with_ema")? {
        "averaged"
    } else {
        "raw"
    })
}

pub fn train_cmd(mut cfg: RunConfig) -> Result<()> {
    let train_set = load_features(&cfg.require_path("features")?)?;
    let val_set = cfg.path("val")?.map(|p| load_features(&p)).transpose()?;
    let out = cfg.require_path("out")?;
    // the architecture follows the feature file unless pinned in the config
    if !cfg.is_explicit("model.dino_dim") {
        cfg.set("model.dino_dim", Value::from(train_set.layout.dino_dim))?;
    }
    if !cfg.is_explicit("model.block_dims") {
        cfg.set(
            "model.block_dims",
            serde_json::to_value(&train_set.layout.block_dims)?,
        )?;
    }
    let model_cfg: FusionConfig = cfg.section(Section::Model)?;
    let train_cfg: TrainConfig = cfg.section(Section::Train)?;

    let per_epoch = train_cfg.steps_per_epoch(train_set.len());
    let epochs = train_cfg.epochs;
    let (trained, report) = train::<f32>(
        &model_cfg,
        &train_cfg,
        &train_set,
        val_set.as_ref(),
        &mut |e| {
            if e.batch + 1 == per_epoch {
                eprintln!("epoch {}/{epochs} done (step {})", e.epoch + 1, e.step + 1);
            }
        },
    )?;

    let output = Output::new(&out, "train", false)?;
    let ckpt_path = output.join(CHECKPOINT_FILE);
    trained.checkpoint().save(&ckpt_path)?;
    output.write(&output.companion("report.txt"), &report.render())?;
    output.write(&output.companion("timing.txt"), &report.render_timing())?;
    output.finish(&cfg)?;
    print!("{}", report.render());
    println!("checkpoint: {}", ckpt_path.display());
    Ok(())
}

#[derive(Serialize)]
struct PredictionRow<'a> {
    id: &'a str,
    score: Option<f32>,
    prediction: f32,
    w_d: f32,
}

pub fn eval_cmd(mut cfg: RunConfig) -> Result<()> {
    let (ckpt, model) = load_checkpoint(&mut cfg)?;
    let set = eval_set(&cfg, &ckpt)?;
    let scored = set.records.iter().all(|r| r.score.is_some());
    let (metrics, preds) = if scored {
        let (m, p) = evaluate(&model, &set)?;
        (Some(m), p)
    } else {
        (None, model.predict_records(&set.records, Ablation::None)?)
    };

    let mut report = String::new();
    writeln!(report, "weights: {}", weights_label(&cfg)?)?;
    writeln!(report, "records: {}", set.len())?;
    match &metrics {
        Some(m) => writeln!(report, "metrics: {m}")?,
        None => writeln!(report, "metrics: none (unscored records present)")?,
    }
    print!("{report}");

    if let Some(out) = cfg.path("out")? {
        let output = Output::new(&out, "eval", true)?;
        let mut w = csv::Writer::from_path(output.primary("csv"))?;
        for (rec, p) in set.records.iter().zip(&preds) {
            w.serialize(PredictionRow {
                id: &rec.id,
                score: rec.score,
                prediction: p.score,
                w_d: p.w_d,
            })?;
        }
        w.flush()?;
        output.write(&output.companion("report.txt"), &report)?;
        output.finish(&cfg)?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationMode {
    Branch,
    DinoDims,
    ResnetBlocks,
}

impl AblationMode {
    fn as_str(self) -> &'static str {
        match self {
            AblationMode::Branch => "branch",
            AblationMode::DinoDims => "dino-dims",
            AblationMode::ResnetBlocks => "resnet-blocks",
        }
    }
}

#[derive(Serialize)]
struct AblationRow<'a> {
    name: &'a str,
    unit: &'a str,
    baseline_r: f64,
    ablated_r: f64,
    delta_r: f64,
    baseline_rho: f64,
    ablated_rho: f64,
    delta_rho: f64,
    p_value: f64,
    fdr_significant: bool,
}

pub fn ablate_cmd(mut cfg: RunConfig) -> Result<()> {
    let Some(mode) = cfg.get::<Option<AblationMode>>("mode")? else {
        bail!("`ablate` needs --mode (branch, dino-dims or resnet-blocks)");
    };
    let out = cfg.require_path("out")?;
    let (ckpt, model) = load_checkpoint(&mut cfg)?;
    let set = eval_set(&cfg, &ckpt)?;
    let acfg: AnalysisConfig = cfg.section(Section::Analysis)?;
    let results: Vec<AblationResult> = match mode {
        AblationMode::Branch => ablate_branches(&model, &set, &acfg)?,
        AblationMode::DinoDims => ablate_dino_dims(&model, &set, &acfg)?,
        AblationMode::ResnetBlocks => ablate_resnet_blocks(&model, &set, &acfg)?,
    };

    let output = Output::new(&out, &format!("ablate-{}", mode.as_str()), true)?;
    let mut w = csv::Writer::from_path(output.primary("csv"))?;
    let mut report = String::new();
    writeln!(report, "weights: {}", weights_label(&cfg)?)?;
    writeln!(
        report,
        "permutations: {} alpha: {}",
        acfg.n_perm, acfg.alpha
    )?;
    for r in &results {
        let unit = r.name.split_once(':').map_or(r.name.as_str(), |(_, u)| u);
        w.serialize(AblationRow {
            name: &r.name,
            unit,
            baseline_r: r.baseline.pearson_r,
            ablated_r: r.ablated.pearson_r,
            delta_r: r.delta_r,
            baseline_rho: r.baseline.spearman_rho,
            ablated_rho: r.ablated.spearman_rho,
            delta_rho: r.delta_rho,
            p_value: r.p_value,
            fdr_significant: r.fdr_significant,
        })?;
        writeln!(report, "{r}")?;
    }
    w.flush()?;
    let flagged = results.iter().filter(|r| r.fdr_significant).count();
    writeln!(
        report,
        "significant after FDR: {flagged} of {}",
        results.len()
    )?;
    output.write(&output.companion("report.txt"), &report)?;
    output.finish(&cfg)?;

    if results.len() <= 8 {
        print!("{report}");
    } else {
        println!(
            "{} ablations written to {}",
            results.len(),
            output.primary("csv").display()
        );
        println!("significant after FDR: {flagged} of {}", results.len());
    }
    Ok(())
}

#[derive(Serialize)]
struct ImportanceRow {
    dim: usize,
    importance: f64,
}

pub fn importance_cmd(mut cfg: RunConfig) -> Result<()> {
    let out = cfg.require_path("out")?;
    let (ckpt, model) = load_checkpoint(&mut cfg)?;
    let set = eval_set(&cfg, &ckpt)?;
    let acfg: AnalysisConfig = cfg.section(Section::Analysis)?;
    let profile = grad_importance(&model, &set, &acfg)?;
    let attention_r = attention_weight_correlation(&model, &set)?;

    let output = Output::new(&out, "importance", true)?;
    let mut w = csv::Writer::from_path(output.primary("csv"))?;
    for (dim, &importance) in profile.importance.iter().enumerate() {
        w.serialize(ImportanceRow { dim, importance })?;
    }
    w.flush()?;
    let mut report = String::new();
    writeln!(report, "weights: {}", weights_label(&cfg)?)?;
    writeln!(report, "records: {}", set.len())?;
    writeln!(report, "importance_skewness: {:.6}", profile.skewness)?;
    writeln!(
        report,
        "skewness_p_value: {:.6e} ({} bootstrap resamples)",
        profile.skewness_p, acfg.n_boot
    )?;
    writeln!(report, "attention_weight_r: {attention_r:.6}")?;
    output.write(&output.companion("report.txt"), &report)?;
    output.finish(&cfg)?;
    print!("{report}");
    Ok(())
}

pub fn report_cmd(mut cfg: RunConfig) -> Result<()> {
    let (ckpt, model) = load_checkpoint(&mut cfg)?;
    let mut report = String::new();
    writeln!(report, "steps: {}", ckpt.steps)?;
    writeln!(report, "param_count: {}", model.param_count())?;
    writeln!(report, "layout: {}", ckpt.model.layout())?;
    writeln!(report, "weights: {}", weights_label(&cfg)?)?;
    writeln!(report, "averaged_weights_stored: {}", ckpt.ema.is_some())?;
    writeln!(report, "temperature: {:.6}", model.temperature())?;
    writeln!(report, "residual_scale: {:.6}", model.residual_scale())?;
    if cfg.path("features")?.is_some() {
        let set = eval_set(&cfg, &ckpt)?;
        let (m, _) = evaluate(&model, &set)?;
        writeln!(report, "metrics: {m}")?;
        writeln!(
            report,
            "attention_weight_r: {:.6}",
            attention_weight_correlation(&model, &set)?
        )?;
    }
    print!("{report}");
    if let Some(out) = cfg.path("out")? {
        let output = Output::new(&out, "report", true)?;
        output.write(&output.primary("txt"), &report)?;
        output.finish(&cfg)?;
    }
    Ok(())
}

pub fn synth_cmd(cfg: RunConfig) -> Result<()> {
    let spec: SyntheticSpec = cfg.section(Section::Synth)?;
    let output = Output::new(&cfg.require_path("out")?, "synth", false)?;
    let layout = &spec.layout;
    let in_range = match spec.target {
        Target::DinoDim(j) => j < layout.dino_dim,
        Target::ResnetBlock(b) => b < layout.block_dims.len(),
        _ => true,
    };
    if !in_range || spec.zero_dino_dims.iter().any(|&j| j >= layout.dino_dim) {
        bail!("synthetic target or zeroed dimension lies outside the layout {layout}");
    }
    let (train_set, test_set) = generate(&spec);
    for (set, name) in [(&train_set, "train.drxf"), (&test_set, "test.drxf")] {
        let path = output.join(name);
        write_features(set, &path).with_context(|| format!("writing {}", path.display()))?;
        println!("{}: {} records", path.display(), set.len());
    }
    output.finish(&cfg)
}

pub fn validate_cmd(path: &Path) -> Result<ExitCode> {
    let m = read_features_unchecked(path)
        .with_context(|| format!("reading features {}", path.display()))?;
    println!("{}: {} records, {}", path.display(), m.len(), m.layout);
    let violations = validate_manifest(&m);
    for v in &violations {
        println!("{v}");
    }
    println!("{} violations", violations.len());
    Ok(if violations.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}
