//! AdamW training of the lifting model on the one-step denoising objective.

mod eval;

pub use eval::{
    evaluate, infer, mean_pose_baseline, model_budget, poses_from_jsonl, poses_to_jsonl,
    run_ablation, AblationEntry, EvalParams, PoseRecord,
};

use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{LossFrame, RunConfig, TrainConfig};
use crate::data::{dataset_windows, normalize_2d, DatasetFile, Window};
use crate::denoiser::tape::{NodeId, Tape};
use crate::diffusion::{
    derive_seed, forward_noise_with, standard_normal, ConditionalDenoiser, NoiseSchedule,
};
use crate::error::{Error, Result};
use crate::model::LiftingModel;
use crate::objective::LossKind;
use crate::skeleton::{center_on_root, shift_to_part_frames, PartName};

pub const ADAM_EPS: f64 = 1e-8;

// Independent random streams derived from the run seed.
const SHUFFLE_STREAM: u64 = 0x5348_5546_464c_4500;
const NOISE_STREAM: u64 = 0x4e4f_4953_4500_0000;

/// AdamW hyperparameters for one update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn from_config(config: &TrainConfig, lr: f64) -> Self {
        Self {
            lr,
            beta1: config.beta1,
            beta2: config.beta2,
            weight_decay: config.weight_decay,
        }
    }
}

/// One AdamW step with decoupled weight decay; `step` counts from 1.
pub fn adamw_update(
    param: &mut Array2<f64>,
    grad: &Array2<f64>,
    m: &mut Array2<f64>,
    v: &mut Array2<f64>,
    step: u64,
    hp: &AdamW,
) -> Result<()> {
    if grad.dim() != param.dim() || m.dim() != param.dim() || v.dim() != param.dim() {
        return Err(Error::Shape(format!(
            "parameter {:?}, gradient {:?}, moments {:?}/{:?}",
            param.dim(),
            grad.dim(),
            m.dim(),
            v.dim()
        )));
    }
    if step == 0 {
        return Err(Error::Config("optimizer steps count from 1".into()));
    }
    let c1 = 1.0 - hp.beta1.powi(step as i32);
    let c2 = 1.0 - hp.beta2.powi(step as i32);
    ndarray::Zip::from(param)
        .and(grad)
        .and(m)
        .and(v)
        .for_each(|p, &g, m, v| {
            *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
            *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= hp.lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + hp.weight_decay * *p);
        });
    Ok(())
}

/// First and second moments for every parameter of every network.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first: Vec<Vec<Array2<f64>>>,
    pub second: Vec<Vec<Array2<f64>>>,
}

impl OptimizerState {
    pub fn new(model: &LiftingModel) -> Self {
        let zeros: Vec<Vec<Array2<f64>>> = model
            .networks()
            .iter()
            .map(|n| {
                n.denoiser
                    .params()
                    .iter()
                    .map(|p| Array2::zeros(p.raw_dim()))
                    .collect()
            })
            .collect();
        Self {
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// Advances the step counter and updates every parameter.
    pub fn apply(
        &mut self,
        model: &mut LiftingModel,
        grads: &[Vec<Array2<f64>>],
        hp: &AdamW,
    ) -> Result<()> {
        if grads.len() != model.networks().len() {
            return Err(Error::Shape(
                "one gradient list per network expected".into(),
            ));
        }
        self.step += 1;
        for (n, net) in model.networks_mut().iter_mut().enumerate() {
            let params = net.denoiser.params_mut();
            if grads[n].len() != params.len() {
                return Err(Error::Shape(format!(
                    "network {n}: gradient count mismatch"
                )));
            }
            for (i, p) in params.iter_mut().enumerate() {
                adamw_update(
                    p,
                    &grads[n][i],
                    &mut self.first[n][i],
                    &mut self.second[n][i],
                    self.step,
                    hp,
                )?;
            }
        }
        Ok(())
    }
}

/// A training window converted to the model's units.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedWindow {
    /// Normalized 2D keypoints per unit, N×J_u×2.
    pub x2d: Vec<Array3<f64>>,
    /// Scaled local targets per unit, N×J_u×3.
    pub local: Vec<Array3<f64>>,
    /// Scaled body-root-relative targets per unit, (N·J_u)×3.
    pub whole: Vec<Array2<f64>>,
}

pub fn prepare_window(
    model: &LiftingModel,
    window: &Window,
    image_size: [f64; 2],
    scale: f64,
) -> Result<PreparedWindow> {
    let pose = window.pose3d().ok_or_else(|| {
        Error::data(
            &window.sequence,
            window.start,
            "window has no 3D ground truth",
        )
    })?;
    let (local_parts, _) = shift_to_part_frames(&pose, model.frame_layout())?;
    let centered = center_on_root(&pose, model.layout())?;
    let x2d = normalize_2d(window.kp2d.view(), image_size);
    let mut out = PreparedWindow {
        x2d: Vec::new(),
        local: Vec::new(),
        whole: Vec::new(),
    };
    for (unit, joints) in model.units().iter().zip(model.unit_joint_indices()) {
        out.x2d.push(x2d.select(Axis(1), &joints));
        let views: Vec<_> = unit.iter().map(|p| local_parts[p].coords()).collect();
        let local =
            ndarray::concatenate(Axis(1), &views).map_err(|e| Error::Shape(e.to_string()))?;
        out.local.push(local * scale);
        let whole = centered.coords().select(Axis(1), &joints) * scale;
        out.whole.push(token_rows(&whole));
    }
    Ok(out)
}

/// N×J×D to (N·J)×D, rows in frame-major order like the network tokens.
fn token_rows(a: &Array3<f64>) -> Array2<f64> {
    let (n, j, d) = a.dim();
    Array2::from_shape_vec((n * j, d), a.iter().copied().collect()).expect("sizes agree")
}

/// Per unit, the row of the body unit's output holding each joint's part root
/// (`None` for body joints, which need no offset).
fn root_gather(model: &LiftingModel, frames: usize) -> Result<(usize, Vec<Vec<Option<usize>>>)> {
    let layout = model.frame_layout();
    let unit_joints = model.unit_joint_indices();
    let body_unit = model
        .units()
        .iter()
        .position(|u| u.contains(&PartName::Body))
        .ok_or_else(|| Error::Layout("no unit holds the body part".into()))?;
    let body_joints = &unit_joints[body_unit];
    let mut index = Vec::with_capacity(unit_joints.len());
    for (unit, joints) in model.units().iter().zip(&unit_joints) {
        let mut roots = Vec::with_capacity(joints.len());
        for &name in unit {
            let part = layout.part(name).expect("unit parts come from the layout");
            for _ in 0..part.len() {
                roots.push(if name == PartName::Body {
                    None
                } else {
                    Some(
                        body_joints
                            .iter()
                            .position(|&j| j == part.root_index)
                            .ok_or_else(|| {
                                Error::Layout(format!("root of `{name}` is not a body joint"))
                            })?,
                    )
                });
            }
        }
        let jb = body_joints.len();
        index.push(
            (0..frames)
                .flat_map(|f| roots.iter().map(move |r| r.map(|k| f * jb + k)))
                .collect(),
        );
    }
    Ok((body_unit, index))
}

/// Records the loss of one window at step `t` with unit noise `eps`; returns
/// the scalar node.
#[allow(clippy::too_many_arguments)]
pub fn record_window_loss(
    model: &LiftingModel,
    tape: &mut Tape,
    bound: &[Vec<NodeId>],
    sample: &PreparedWindow,
    t: usize,
    eps: &[Array3<f64>],
    schedule: &NoiseSchedule,
    kind: LossKind,
    frame: LossFrame,
) -> Result<NodeId> {
    let n = model.frames();
    let mut outputs = Vec::with_capacity(sample.local.len());
    for (u, local) in sample.local.iter().enumerate() {
        let y_t = forward_noise_with(local.view(), t, schedule, eps[u].view())?;
        let net = model.unit_network(u);
        let out = model.networks()[net].denoiser.forward(
            tape,
            &bound[net],
            t,
            sample.x2d[u].view(),
            y_t.view(),
        )?;
        outputs.push(out);
    }
    let gather = match frame {
        LossFrame::Part => None,
        LossFrame::WholeBody => Some(root_gather(model, n)?),
    };
    let mut total: Option<NodeId> = None;
    let mut joints = 0;
    for (u, &out) in outputs.iter().enumerate() {
        let (pred, target) = match &gather {
            None => (out, token_rows(&sample.local[u])),
            Some((body_unit, index)) => {
                let wb = tape.add_gathered_partial(out, outputs[*body_unit], index[u].clone());
                (wb, sample.whole[u].clone())
            }
        };
        joints += target.nrows() / n;
        let term = match kind {
            LossKind::Mpjpe => tape.norm_sum(pred, target),
            LossKind::Mse => tape.sq_sum(pred, target),
        };
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term),
        });
    }
    let total = total.ok_or_else(|| Error::Config("model has no units".into()))?;
    let count = match kind {
        LossKind::Mpjpe => n * joints,
        LossKind::Mse => n * joints * 3,
    };
    Ok(tape.scale(total, 1.0 / count as f64))
}

/// Loss of one window and its gradient for every parameter of every network.
fn window_gradients(
    model: &LiftingModel,
    sample: &PreparedWindow,
    seed: u64,
    schedule: &NoiseSchedule,
    config: &TrainConfig,
) -> Result<(f64, Vec<Vec<Array2<f64>>>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = rng.random_range(1..=schedule.steps());
    let eps: Vec<Array3<f64>> = sample
        .local
        .iter()
        .map(|l| standard_normal(&mut rng, l.dim()))
        .collect();
    let mut tape = Tape::new();
    let bound: Vec<Vec<NodeId>> = model
        .networks()
        .iter()
        .map(|n| n.denoiser.bind(&mut tape))
        .collect();
    let loss = record_window_loss(
        model,
        &mut tape,
        &bound,
        sample,
        t,
        &eps,
        schedule,
        config.loss,
        config.loss_frame,
    )?;
    let value = tape.value(loss)[[0, 0]];
    let mut grads = tape.backward(loss);
    let per_net = model
        .networks()
        .iter()
        .zip(&bound)
        .map(|(net, ids)| {
            net.denoiser
                .params()
                .iter()
                .zip(ids)
                .map(|(p, &id)| grads.take(id).unwrap_or_else(|| Array2::zeros(p.raw_dim())))
                .collect()
        })
        .collect();
    Ok((value, per_net))
}

/// Mean batch loss and its gradients. Windows run in parallel; the sum is
/// taken in batch order so the result does not depend on the thread count.
pub fn batch_loss_gradients(
    model: &LiftingModel,
    batch: &[&PreparedWindow],
    seeds: &[u64],
    schedule: &NoiseSchedule,
    config: &TrainConfig,
) -> Result<(f64, Vec<Vec<Array2<f64>>>)> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    assert_eq!(batch.len(), seeds.len(), "one seed per window");
    let results = batch
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(sample, &seed)| window_gradients(model, sample, seed, schedule, config))
        .collect::<Result<Vec<_>>>()?;
    let inv = 1.0 / batch.len() as f64;
    let mut results = results.into_iter();
    let (mut loss, mut grads) = results.next().expect("non-empty batch");
    for (l, g) in results {
        loss += l;
        for (acc, g) in grads.iter_mut().flatten().zip(g.iter().flatten()) {
            *acc += g;
        }
    }
    grads.iter_mut().flatten().for_each(|g| *g *= inv);
    Ok((loss * inv, grads))
}

/// One optimizer step on `batch`; returns the batch loss before the update.
pub fn train_step(
    model: &mut LiftingModel,
    state: &mut OptimizerState,
    batch: &[&PreparedWindow],
    seeds: &[u64],
    schedule: &NoiseSchedule,
    config: &TrainConfig,
    lr: f64,
) -> Result<f64> {
    let (loss, grads) = batch_loss_gradients(model, batch, seeds, schedule, config)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!(
            "training loss became {loss} at step {}",
            state.step + 1
        )));
    }
    if grads
        .iter()
        .flatten()
        .any(|g| g.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::NonFinite(format!(
            "non-finite gradient at step {}",
            state.step + 1
        )));
    }
    state.apply(model, &grads, &AdamW::from_config(config, lr))?;
    Ok(loss)
}

/// One line of the epoch log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

pub fn log_to_jsonl(log: &[EpochRecord]) -> String {
    log.iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochRecord>,
}

pub fn make_checkpoint(model: &LiftingModel, config: &RunConfig, epoch: usize) -> Checkpoint {
    Checkpoint {
        model: model.clone(),
        schedule: config.diffusion,
        data_scale: config.train.data_scale,
        epoch,
        config: config.to_value(),
    }
}

/// Builds a fresh model from `config` and trains it on every window of
/// `data`. `on_checkpoint` receives intermediate checkpoints every
/// `checkpoint_every` epochs; the final one is returned.
pub fn train(
    data: &DatasetFile,
    config: &RunConfig,
    mut on_checkpoint: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<TrainRun> {
    config.validate()?;
    let tc = &config.train;
    let schedule = NoiseSchedule::try_from(config.diffusion)?;
    let mut model = LiftingModel::build(&data.layout, tc.frames, &config.model, tc.seed)?;
    let windows = dataset_windows(data, tc.frames, tc.stride());
    if windows.is_empty() {
        return Err(Error::Config(format!(
            "dataset has no windows of {} annotated frames",
            tc.frames
        )));
    }
    let prepared = windows
        .par_iter()
        .map(|w| prepare_window(&model, w, data.image_size, tc.data_scale))
        .collect::<Result<Vec<_>>>()?;

    let mut state = OptimizerState::new(&model);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(tc.seed, SHUFFLE_STREAM));
    let noise_seed = derive_seed(tc.seed, NOISE_STREAM);
    let mut draws = 0u64;
    let mut log = Vec::with_capacity(tc.epochs);
    let mut lr = tc.learning_rate;
    for epoch in 1..=tc.epochs {
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut sum = 0.0;
        for chunk in order.chunks(tc.batch_size) {
            let batch: Vec<&PreparedWindow> = chunk.iter().map(|&i| &prepared[i]).collect();
            let seeds: Vec<u64> = (0..chunk.len() as u64)
                .map(|k| derive_seed(noise_seed, draws + k))
                .collect();
            draws += chunk.len() as u64;
            sum += chunk.len() as f64
                * train_step(&mut model, &mut state, &batch, &seeds, &schedule, tc, lr)?;
        }
        let record = EpochRecord {
            epoch,
            lr,
            loss: sum / prepared.len() as f64,
        };
        log::info!("epoch {epoch}: lr {lr:.3e}, loss {:.6}", record.loss);
        log.push(record);
        if tc.checkpoint_every > 0 && epoch % tc.checkpoint_every == 0 && epoch < tc.epochs {
            on_checkpoint(&make_checkpoint(&model, config, epoch))?;
        }
        lr *= tc.lr_decay;
    }
    Ok(TrainRun {
        checkpoint: make_checkpoint(&model, config, tc.epochs),
        log,
    })
}

impl ConditionalDenoiser for Checkpoint {
    fn frame_layout(&self) -> &crate::skeleton::SkeletonLayout {
        self.model.frame_layout()
    }

    fn units(&self) -> &[Vec<PartName>] {
        self.model.units()
    }

    fn predict(
        &self,
        unit: usize,
        t: usize,
        x2d: ndarray::ArrayView3<'_, f64>,
        y_t: ndarray::ArrayView3<'_, f64>,
    ) -> Result<Array3<f64>> {
        self.model.predict(unit, t, x2d, y_t)
    }
}
