//! Multi-hypothesis evaluation, pose export, the mean-pose baseline and the
//! component ablation.

use ndarray::Array3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{dataset_windows, normalize_2d, DatasetFile, Window};
use crate::denoiser::{
    allocate_channels, parameters_for, BudgetSlot, DenoiserConfig, DEFAULT_RATIOS,
};
use crate::diffusion::{
    derive_seed, sample_hypotheses, ConditionalDenoiser, NoiseSchedule, SamplingParams,
};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};
use crate::objective::{aggregate_hypotheses, window_metrics, MetricValues, MetricsReport};
use crate::skeleton::{PartName, PoseSequence, SkeletonLayout};

use super::{train, TrainRun};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalParams {
    pub frames: usize,
    pub stride: usize,
    pub hypotheses: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl EvalParams {
    pub fn from_config(config: &RunConfig) -> Self {
        Self {
            frames: config.train.frames,
            stride: config.eval.window_stride.unwrap_or(config.train.frames),
            hypotheses: config.eval.hypotheses,
            iterations: config.eval.iterations,
            seed: config.eval.seed,
        }
    }
}

fn windows_for(data: &DatasetFile, params: &EvalParams) -> Result<Vec<Window>> {
    if params.stride == 0 {
        return Err(Error::Config("window stride must be positive".into()));
    }
    let windows = dataset_windows(data, params.frames, params.stride);
    if windows.is_empty() {
        return Err(Error::Config(format!(
            "dataset has no windows of {} annotated frames",
            params.frames
        )));
    }
    Ok(windows)
}

fn sample_window<D: ConditionalDenoiser + ?Sized>(
    denoiser: &D,
    data: &DatasetFile,
    window: &Window,
    index: usize,
    schedule: &NoiseSchedule,
    scale: f64,
    params: &EvalParams,
) -> Result<crate::diffusion::HypothesisSet> {
    let x2d = PoseSequence::new(
        window.frame_ids.clone(),
        normalize_2d(window.kp2d.view(), data.image_size),
    )?;
    let sampling = SamplingParams {
        iterations: params.iterations,
        hypotheses: params.hypotheses,
        seed: derive_seed(params.seed, index as u64),
    };
    sample_hypotheses(denoiser, &x2d, schedule, sampling, scale)
}

/// P-Best and P-Agg metrics averaged over every window of `data`. Window `i`
/// draws its hypotheses from `derive_seed(seed, i)`.
pub fn evaluate<D: ConditionalDenoiser + ?Sized>(
    denoiser: &D,
    data: &DatasetFile,
    schedule: &NoiseSchedule,
    scale: f64,
    params: &EvalParams,
) -> Result<MetricsReport> {
    let windows = windows_for(data, params)?;
    let per_window = windows
        .par_iter()
        .enumerate()
        .map(|(i, w)| {
            let gt = w.pose3d().ok_or_else(|| {
                Error::data(&w.sequence, w.start, "evaluation needs 3D ground truth")
            })?;
            let hyps = sample_window(denoiser, data, w, i, schedule, scale, params)?;
            window_metrics(&hyps, &gt, &data.layout)
        })
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_windows(
        params.frames,
        params.hypotheses,
        params.iterations,
        &per_window,
    )
}

/// One exported window: the mean hypothesis in millimeters, body root at the
/// origin.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseRecord {
    pub sequence: String,
    pub start: usize,
    pub frame_ids: Vec<i64>,
    /// N×J×3.
    pub kp3d: Array3<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPose {
    sequence: String,
    start: usize,
    frame_ids: Vec<i64>,
    kp3d: Vec<Vec<[f64; 3]>>,
}

pub fn poses_to_jsonl(records: &[PoseRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let raw = RawPose {
            sequence: r.sequence.clone(),
            start: r.start,
            frame_ids: r.frame_ids.clone(),
            kp3d: r
                .kp3d
                .outer_iter()
                .map(|f| f.outer_iter().map(|j| [j[0], j[1], j[2]]).collect())
                .collect(),
        };
        out.push_str(&serde_json::to_string(&raw).expect("pose serializes"));
        out.push('\n');
    }
    out
}

pub fn poses_from_jsonl(text: &str) -> Result<Vec<PoseRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let bad = |message: String| Error::Format {
                kind: "pose export",
                message: format!("line {}: {message}", i + 1),
            };
            let raw: RawPose = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
            let n = raw.kp3d.len();
            let j = raw.kp3d.first().map_or(0, Vec::len);
            if n != raw.frame_ids.len() || raw.kp3d.iter().any(|f| f.len() != j) {
                return Err(bad("kp3d is not frames × joints × 3".into()));
            }
            let flat: Vec<f64> = raw.kp3d.iter().flatten().flatten().copied().collect();
            Ok(PoseRecord {
                sequence: raw.sequence,
                start: raw.start,
                frame_ids: raw.frame_ids,
                kp3d: Array3::from_shape_vec((n, j, 3), flat).expect("checked shape"),
            })
        })
        .collect()
}

/// Lifts every window of a 2D-only dataset; each record holds the mean of the
/// hypotheses.
pub fn infer<D: ConditionalDenoiser + ?Sized>(
    denoiser: &D,
    data: &DatasetFile,
    schedule: &NoiseSchedule,
    scale: f64,
    params: &EvalParams,
) -> Result<Vec<PoseRecord>> {
    let windows = windows_for(data, params)?;
    windows
        .par_iter()
        .enumerate()
        .map(|(i, w)| {
            let hyps = sample_window(denoiser, data, w, i, schedule, scale, params)?;
            let mean = aggregate_hypotheses(&hyps)?;
            Ok(PoseRecord {
                sequence: w.sequence.clone(),
                start: w.start,
                frame_ids: w.frame_ids.clone(),
                kp3d: mean.into_coords(),
            })
        })
        .collect()
}

/// Metrics of predicting the training-set mean root-relative pose for every
/// frame of every test window.
pub fn mean_pose_baseline(
    train: &DatasetFile,
    test: &DatasetFile,
    params: &EvalParams,
) -> Result<MetricValues> {
    let mean = crate::data::mean_root_relative_pose(train)?;
    let windows = windows_for(test, params)?;
    let per_window = windows
        .iter()
        .map(|w| {
            let gt = w.pose3d().ok_or_else(|| {
                Error::data(&w.sequence, w.start, "evaluation needs 3D ground truth")
            })?;
            let coords =
                Array3::from_shape_fn((w.len(), mean.nrows(), 3), |(_, j, d)| mean[[j, d]]);
            let pred = PoseSequence::new(w.frame_ids.clone(), coords)?;
            MetricValues::compute(&pred, &gt, &test.layout)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per_window.len() as f64;
    let avg = |f: fn(&MetricValues) -> f64| per_window.iter().map(f).sum::<f64>() / n;
    Ok(MetricValues::from_parts(
        avg(|m| m.wb),
        avg(|m| m.body),
        avg(|m| m.face),
        avg(|m| m.hands),
    ))
}

/// One row of the component ablation.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationEntry {
    pub variant: Variant,
    pub channels: Vec<usize>,
    pub parameters: usize,
    pub report: MetricsReport,
    pub run: TrainRun,
}

fn budget_slots(
    variant: Variant,
    layout: &SkeletonLayout,
    frames: usize,
) -> Result<Vec<BudgetSlot>> {
    if !variant.part_denoisers() {
        return Ok(vec![BudgetSlot {
            joints: layout.total_joints(),
            frames,
            ratio: 1.0,
        }]);
    }
    let len = |name| {
        layout
            .part(name)
            .map(|p| p.len())
            .ok_or_else(|| Error::Layout(format!("the ablation needs a `{name}` part")))
    };
    let joints = [
        len(PartName::Body)?,
        len(PartName::LeftHand)?,
        len(PartName::Face)?,
    ];
    Ok(joints
        .iter()
        .zip(DEFAULT_RATIOS)
        .map(|(&joints, ratio)| BudgetSlot {
            joints,
            frames,
            ratio,
        })
        .collect())
}

/// Parameter total of the part-based model described by `config`.
pub fn model_budget(config: &RunConfig, layout: &SkeletonLayout) -> Result<usize> {
    let slots = budget_slots(config.model.variant, layout, config.train.frames)?;
    if slots.len() != config.model.channels.len() {
        return Err(Error::Config(
            "model.channels does not match the variant".into(),
        ));
    }
    Ok(slots
        .iter()
        .zip(&config.model.channels)
        .map(|(s, &c)| {
            parameters_for(&DenoiserConfig::new(
                "",
                s.joints,
                s.frames,
                c,
                config.model.depth,
            ))
        })
        .sum())
}

/// Trains and evaluates all four variants at the parameter budget of
/// `config.model`, widths chosen by the channel allocator.
pub fn run_ablation(
    train_data: &DatasetFile,
    test_data: &DatasetFile,
    config: &RunConfig,
) -> Result<Vec<AblationEntry>> {
    let layout = &train_data.layout;
    let target = model_budget(config, layout)?;
    let schedule = NoiseSchedule::try_from(config.diffusion)?;
    let params = EvalParams::from_config(config);
    let mut entries = Vec::with_capacity(Variant::ALL.len());
    for variant in Variant::ALL {
        let slots = budget_slots(variant, layout, config.train.frames)?;
        let channels = allocate_channels(target, &slots, config.model.depth)?;
        let mut run_config = config.clone();
        run_config.model = ModelConfig {
            variant,
            depth: config.model.depth,
            channels: channels.clone(),
        };
        log::info!("ablation `{variant}`: widths {channels:?}");
        let run = train(train_data, &run_config, |_| Ok(()))?;
        let mut report = evaluate(
            &run.checkpoint,
            test_data,
            &schedule,
            config.train.data_scale,
            &params,
        )?;
        report.config = Some(run_config.to_value());
        entries.push(AblationEntry {
            variant,
            parameters: run.checkpoint.model.parameter_count(),
            channels,
            report,
            run,
        });
    }
    Ok(entries)
}
