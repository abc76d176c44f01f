//! Subcommand implementations. Each returns the number of per-item errors
//! that were skipped (always zero in strict mode, where the first error
//! aborts the run).

use serde::{Deserialize, Serialize};
use std::path::PathBuf;

use vlmad_core::annotation::{annotate, ActionVocabulary, MockClient, ReplayClient, RetryPolicy, VlmClient};
use vlmad_core::encoding::{
    cache_write, encode_actions, encode_freeform, BagOfWordsHashEncoder, HashTextEncoder,
    SupervisionEntry, TextEncoder, DEFAULT_MOCK_DIM,
};
use vlmad_core::harness::{
    evaluate, generate_dataset, train, DatasetConfig, PlannerCheckpoint, PlannerConfig,
    TrainingConfig, TrainingReport, NUM_CLASSES,
};
use vlmad_core::hash::split_seed;
use vlmad_core::heads::{AuxiliaryHeadConfig, Checkpoint};
use vlmad_core::losses::{AlignmentVariant, LossConfig};
use vlmad_core::metrics::{
    annotation_stats, format_annotation_stats, format_l2_table, format_questionnaire,
    questionnaire_report, QuestionnaireRecord,
};
use vlmad_core::projection::{
    is_stationary, project_trajectory, render_overlay, CameraCalibration, FrontViewImage,
    FutureTrajectory, LineStyle, ProjectionConfig,
};
use vlmad_core::store::{existing_ids, store_append, store_scan};
use vlmad_core::{Error, Result};

use crate::config::RunConfig;

fn report_item_error(strict: bool, errors: &mut u32, context: &str, e: Error) -> Result<()> {
    if strict {
        return Err(Error::Validation(format!("{context}: {e}")));
    }
    eprintln!("warning: {context}: {e}");
    *errors += 1;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct TrajectoryRow {
    sample_id: String,
    waypoints: Vec<[f64; 2]>,
}

pub fn cmd_project(cfg: &RunConfig, strict: bool) -> Result<u32> {
    let calib = CameraCalibration::load(&cfg.require_path("project.calibration")?)?;
    let traj_path = cfg.require_path("project.trajectories")?;
    let images_dir = cfg.get_path("project.images_dir")?;
    let out_dir = cfg.require_path("out")?;
    std::fs::create_dir_all(&out_dir)?;
    let proj = ProjectionConfig {
        ground_offset: cfg.get_f64("project.ground_offset", 0.0)?,
        depth_epsilon: cfg.get_f64("project.depth_epsilon", 0.1)?,
        stationary_threshold: cfg.get_f64("project.stationary_threshold", 1.0)?,
    };
    let style = LineStyle {
        color: [255, 0, 0],
        width: cfg.get_u64("project.line_width", 4)? as u32,
    };
    let text = std::fs::read_to_string(&traj_path)?;
    let mut errors = 0u32;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let context = format!("{}:{}", traj_path.display(), lineno + 1);
        let row: TrajectoryRow = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => {
                report_item_error(strict, &mut errors, &context, Error::Parse(e.to_string()))?;
                continue;
            }
        };
        let image = match &images_dir {
            Some(dir) => match FrontViewImage::load_png(&dir.join(format!("{}.png", row.sample_id))) {
                Ok(img) => img,
                Err(e) => {
                    report_item_error(strict, &mut errors, &row.sample_id, e)?;
                    continue;
                }
            },
            None => FrontViewImage::new(calib.image_width, calib.image_height),
        };
        let traj = FutureTrajectory::new(row.waypoints);
        let stationary = is_stationary(&traj, proj.stationary_threshold);
        match project_trajectory(&traj, &calib, &proj) {
            Ok(polyline) => {
                let overlay = render_overlay(&image, &polyline, &traj, &proj, &style);
                overlay.save_png(&out_dir.join(format!("{}.png", row.sample_id)))?;
                println!(
                    "{} {}",
                    row.sample_id,
                    if stationary { "stationary" } else { "moving" }
                );
            }
            Err(e) => report_item_error(strict, &mut errors, &row.sample_id, e)?,
        }
    }
    Ok(errors)
}

fn build_client(cfg: &RunConfig) -> Result<Box<dyn VlmClient>> {
    match cfg.get_str("client")?.as_deref().unwrap_or("mock") {
        "mock" => Ok(Box::new(MockClient)),
        "replay" => {
            let path = cfg.require_path("annotate.replay_store")?;
            let outcome = store_scan(&path, true)?;
            Ok(Box::new(ReplayClient::new(outcome.records)))
        }
        "live" => build_live_client(cfg),
        other => Err(Error::Config(format!("unknown client mode: {other}"))),
    }
}

#[cfg(feature = "live-client")]
fn build_live_client(cfg: &RunConfig) -> Result<Box<dyn VlmClient>> {
    let params = cfg.get_str("annotate.decode_params")?.unwrap_or_default();
    Ok(Box::new(vlmad_core::annotation::live::LiveClient::from_env(&params)?))
}

#[cfg(not(feature = "live-client"))]
fn build_live_client(_cfg: &RunConfig) -> Result<Box<dyn VlmClient>> {
    Err(Error::Config(
        "live client support is not compiled in; rebuild with --features live-client".into(),
    ))
}

fn sample_images(cfg: &RunConfig) -> Result<Vec<(String, PathBuf)>> {
    let dir = cfg.require_path("annotate.images_dir")?;
    let mut files: Vec<(String, PathBuf)> = std::fs::read_dir(&dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("png"))
        .filter_map(|p| {
            p.file_stem()
                .and_then(|s| s.to_str())
                .map(|s| (s.to_string(), p.clone()))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Deterministic stand-in frame for runs without real imagery.
fn synthetic_image(index: usize, width: u32, height: u32) -> FrontViewImage {
    let rgb = [
        (index * 37 % 256) as u8,
        (index * 59 % 256) as u8,
        (index * 83 % 256) as u8,
    ];
    FrontViewImage::filled(width, height, rgb)
}

pub fn cmd_annotate(cfg: &RunConfig, strict: bool) -> Result<u32> {
    let out = cfg.require_path("out")?;
    let client = build_client(cfg)?;
    let vocab = ActionVocabulary::default();
    let retry = RetryPolicy::default();
    let done = existing_ids(&out)?;
    let mut errors = 0u32;
    let mut records = Vec::new();

    let frames: Vec<(String, FrontViewImage)> = if cfg.contains("annotate.images_dir") {
        let mut out = Vec::new();
        for (id, path) in sample_images(cfg)? {
            match FrontViewImage::load_png(&path) {
                Ok(img) => out.push((id, img)),
                Err(e) => report_item_error(strict, &mut errors, &id, e)?,
            }
        }
        out
    } else {
        let n = cfg.get_u64("annotate.num_samples", 5)? as usize;
        let w = cfg.get_u64("annotate.image_width", 64)? as u32;
        let h = cfg.get_u64("annotate.image_height", 36)? as u32;
        (0..n)
            .map(|i| (format!("sample{i:05}"), synthetic_image(i, w, h)))
            .collect()
    };

    for (id, image) in &frames {
        if done.contains(id) {
            continue;
        }
        match annotate(id, image, client.as_ref(), &vocab, &retry) {
            Ok(rec) => records.push(rec),
            Err(e) => report_item_error(strict, &mut errors, id, e)?,
        }
    }
    store_append(&out, &records)?;
    println!("annotated {} new frames ({} already present)", records.len(), done.len());
    Ok(errors)
}

fn build_encoder(cfg: &RunConfig) -> Result<Box<dyn TextEncoder>> {
    let dim = cfg.get_u64("encode.dim", DEFAULT_MOCK_DIM as u64)? as usize;
    match cfg.get_str("encode.encoder")?.as_deref().unwrap_or("hash") {
        "hash" => Ok(Box::new(HashTextEncoder::new(dim))),
        "bow" => Ok(Box::new(BagOfWordsHashEncoder::new(dim))),
        other => Err(Error::Config(format!("unknown encoder: {other}"))),
    }
}

pub fn cmd_encode(cfg: &RunConfig, strict: bool) -> Result<u32> {
    let store_path = cfg.require_path("encode.store")?;
    let out = cfg.require_path("out")?;
    let encoder = build_encoder(cfg)?;
    let vocab = ActionVocabulary::default();
    let outcome = store_scan(&store_path, !strict)?;
    let mut errors = outcome.issues.len() as u32;
    for issue in &outcome.issues {
        eprintln!("warning: {}: {}", store_path.display(), issue.message);
    }
    let mut entries = Vec::with_capacity(outcome.records.len());
    for rec in &outcome.records {
        let encoded = encode_freeform(&rec.freeform, encoder.as_ref())
            .and_then(|text| Ok((text, encode_actions(&rec.actions, &vocab)?)));
        match encoded {
            Ok((text, actions)) => entries.push(SupervisionEntry {
                sample_id: rec.sample_id.clone(),
                dim: encoder.embedding_dim(),
                y_c: text.y_c,
                y_f: text.y_f,
                y_r: text.y_r,
                y_control: actions.y_control,
                y_turn: actions.y_turn,
                y_lane: actions.y_lane,
            }),
            Err(e) => report_item_error(strict, &mut errors, &rec.sample_id, e)?,
        }
    }
    cache_write(&out, &entries)?;
    println!("encoded {} of {} records", entries.len(), outcome.records.len());
    Ok(errors)
}

fn dataset_config(cfg: &RunConfig, key_scenes: &str, default_scenes: u64, seed: u64) -> Result<DatasetConfig> {
    let base = DatasetConfig::default();
    let mut weights = base.class_weights;
    for (i, w) in weights.iter_mut().enumerate().take(NUM_CLASSES) {
        *w = cfg.get_f64(&format!("dataset.class_weight{i}"), *w)?;
    }
    Ok(DatasetConfig {
        num_scenes: cfg.get_u64(key_scenes, default_scenes)? as usize,
        seed,
        descriptor_dim: cfg.get_u64("dataset.descriptor_dim", base.descriptor_dim as u64)? as usize,
        descriptor_noise: cfg.get_f64("dataset.descriptor_noise", base.descriptor_noise)?,
        trajectory_noise: cfg.get_f64("dataset.trajectory_noise", base.trajectory_noise)?,
        class_weights: weights,
    })
}

pub fn training_config(cfg: &RunConfig, seed: u64) -> Result<TrainingConfig> {
    let base = TrainingConfig::default();
    let model_dim = cfg.get_u64("train.model_dim", base.planner.model_dim as u64)? as usize;
    let text_dim = cfg.get_u64("train.text_dim", base.text_dim as u64)? as usize;
    let planner = PlannerConfig {
        descriptor_dim: cfg.get_u64("dataset.descriptor_dim", base.planner.descriptor_dim as u64)? as usize,
        encoder_hidden: cfg.get_u64("train.encoder_hidden", base.planner.encoder_hidden as u64)? as usize,
        ego_tokens: cfg.get_u64("train.ego_tokens", base.planner.ego_tokens as u64)? as usize,
        model_dim,
        planning_hidden: cfg.get_u64("train.planning_hidden", base.planner.planning_hidden as u64)? as usize,
        horizon: base.planner.horizon,
        output_scale: cfg.get_f64("train.output_scale", base.planner.output_scale)?,
    };
    let mut heads = AuxiliaryHeadConfig::new(model_dim, text_dim);
    heads.num_heads = cfg.get_u64("train.num_heads", base.heads.num_heads as u64)? as usize;
    heads.num_layers = cfg.get_u64("train.num_layers", base.heads.num_layers as u64)? as usize;
    heads.mlp_hidden_dims = vec![cfg.get_u64("train.mlp_hidden", base.heads.mlp_hidden_dims[0] as u64)? as usize];
    let loss = LossConfig {
        tau_t: cfg.get_f64("loss.tau_t", base.loss.tau_t)?,
        tau_s: cfg.get_f64("loss.tau_s", base.loss.tau_s)?,
        lambda1: cfg.get_f64("loss.lambda1", base.loss.lambda1)?,
        lambda2: cfg.get_f64("loss.lambda2", base.loss.lambda2)?,
        alignment_variant: cfg
            .get_str("train.variant")?
            .as_deref()
            .unwrap_or("align")
            .parse::<AlignmentVariant>()?,
    };
    Ok(TrainingConfig {
        planner,
        heads,
        loss,
        aux_enabled: true,
        stop_ego_gradient: cfg.get_bool("train.stop_ego_gradient", false)?,
        epochs: cfg.get_u64("train.epochs", base.epochs as u64)? as usize,
        batch_size: cfg.get_u64("train.batch_size", base.batch_size as u64)? as usize,
        learning_rate: cfg.get_f64("train.learning_rate", base.learning_rate)?,
        seed,
        text_dim,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainToyReport {
    aux: TrainingReport,
    no_aux: TrainingReport,
}

pub fn cmd_train_toy(cfg: &RunConfig, _strict: bool) -> Result<u32> {
    let seed = cfg.require_u64("seed")?;
    let out_dir = cfg.require_path("out")?;
    std::fs::create_dir_all(&out_dir)?;
    let train_data = generate_dataset(&dataset_config(cfg, "dataset.train_scenes", 256, split_seed(seed, 100))?)?;
    let val_data = generate_dataset(&dataset_config(cfg, "dataset.val_scenes", 64, split_seed(seed, 101))?)?;
    let mut tcfg = training_config(cfg, seed)?;

    tcfg.aux_enabled = true;
    let with_aux = train(&train_data, &val_data, &tcfg)?;
    tcfg.aux_enabled = false;
    let without_aux = train(&train_data, &val_data, &tcfg)?;

    PlannerCheckpoint::from_store(&with_aux.planner, tcfg.planner.clone(), seed)
        .save(&out_dir.join("planner_aux.json"))?;
    PlannerCheckpoint::from_store(&without_aux.planner, tcfg.planner.clone(), seed)
        .save(&out_dir.join("planner_no_aux.json"))?;
    Checkpoint::from_store(&with_aux.heads, tcfg.heads.clone(), seed)
        .save(&out_dir.join("heads_aux.json"))?;

    // timing is stripped so reruns under the same seed are byte-identical
    let mut report = TrainToyReport {
        aux: with_aux.report,
        no_aux: without_aux.report,
    };
    report.aux.wall_clock_secs = 0.0;
    report.no_aux.wall_clock_secs = 0.0;
    std::fs::write(
        out_dir.join("report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    println!("aux     avg L2 {:.4} m", report.aux.val_l2.avg);
    println!("no_aux  avg L2 {:.4} m", report.no_aux.val_l2.avg);
    Ok(0)
}

pub fn cmd_eval(cfg: &RunConfig, _strict: bool) -> Result<u32> {
    let seed = cfg.require_u64("seed")?;
    let ckpt = PlannerCheckpoint::load(&cfg.require_path("eval.checkpoint")?)?;
    let out = cfg.require_path("out")?;
    let val_data = generate_dataset(&dataset_config(cfg, "dataset.val_scenes", 64, split_seed(seed, 101))?)?;
    let planner_cfg = ckpt.config.clone();
    let store = ckpt.into_store();
    let l2 = evaluate(&store, &planner_cfg, &val_data)?;
    std::fs::write(&out, serde_json::to_string_pretty(&l2)?)?;
    print!("{}", format_l2_table(&l2));
    Ok(0)
}

pub fn cmd_stats(cfg: &RunConfig, strict: bool) -> Result<u32> {
    let store_path = cfg.require_path("stats.store")?;
    let out = cfg.require_path("out")?;
    let outcome = store_scan(&store_path, !strict)?;
    for issue in &outcome.issues {
        eprintln!("warning: {}: {}", store_path.display(), issue.message);
    }
    let stats = annotation_stats(&outcome.records)?;
    std::fs::write(&out, serde_json::to_string_pretty(&stats)?)?;
    print!("{}", format_annotation_stats(&stats));
    Ok(outcome.issues.len() as u32)
}

pub fn cmd_report(cfg: &RunConfig, _strict: bool) -> Result<u32> {
    let src = cfg.require_path("report.questionnaire")?;
    let out = cfg.require_path("out")?;
    let records: Vec<QuestionnaireRecord> = serde_json::from_str(&std::fs::read_to_string(&src)?)
        .map_err(|e| Error::Parse(format!("{}: {e}", src.display())))?;
    let report = questionnaire_report(&records)?;
    std::fs::write(&out, serde_json::to_string_pretty(&report)?)?;
    print!("{}", format_questionnaire(&report));
    Ok(0)
}
