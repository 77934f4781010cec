//! Forward noising, the cosine schedule and deterministic DDIM sampling.

use std::f64::consts::FRAC_PI_2;

use ndarray::{Array1, Array3, ArrayView3, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::{
    derive_root_offsets_from_body, reconstruct_whole_body, PartName, PartSequences, PoseSequence,
    SkeletonLayout,
};

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_OFFSET: f64 = 0.008;

/// Cumulative signal retention of a variance-preserving diffusion process.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    offset: f64,
    alpha_bar: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleParams {
    pub steps: usize,
    pub offset: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            offset: DEFAULT_OFFSET,
        }
    }
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn params(&self) -> ScheduleParams {
        ScheduleParams {
            steps: self.steps,
            offset: self.offset,
        }
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t > self.steps {
            return Err(Error::Config(format!(
                "timestep {t} outside 0..={}",
                self.steps
            )));
        }
        Ok(())
    }
}

/// alpha_bar[t] = f(t)/f(0), f(t) = cos²(((t/T + s)/(1 + s))·π/2).
pub fn cosine_schedule(steps: usize, offset: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Config(
            "diffusion step count must be positive".into(),
        ));
    }
    if !(offset > 0.0 && offset.is_finite()) {
        return Err(Error::Config(format!(
            "schedule offset {offset} must be positive"
        )));
    }
    let f = |t: usize| {
        let c = ((t as f64 / steps as f64 + offset) / (1.0 + offset) * FRAC_PI_2).cos();
        c * c
    };
    let f0 = f(0);
    let alpha_bar = (0..=steps).map(|t| f(t) / f0).collect();
    Ok(NoiseSchedule {
        steps,
        offset,
        alpha_bar,
    })
}

impl TryFrom<ScheduleParams> for NoiseSchedule {
    type Error = Error;

    fn try_from(p: ScheduleParams) -> Result<Self> {
        cosine_schedule(p.steps, p.offset)
    }
}

/// √ᾱ_t·y + √(1−ᾱ_t)·ε with an explicit noise tensor.
pub fn forward_noise_with(
    y: ArrayView3<'_, f64>,
    t: usize,
    schedule: &NoiseSchedule,
    eps: ArrayView3<'_, f64>,
) -> Result<Array3<f64>> {
    schedule.check_step(t)?;
    if y.shape() != eps.shape() {
        return Err(Error::Shape(format!(
            "noise shape {:?} differs from signal shape {:?}",
            eps.shape(),
            y.shape()
        )));
    }
    let a = schedule.alpha_bar[t];
    let (signal, noise) = (a.sqrt(), (1.0 - a).sqrt());
    Ok(Zip::from(&y)
        .and(&eps)
        .map_collect(|&y, &e| signal * y + noise * e))
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, shape: (usize, usize, usize)) -> Array3<f64> {
    Array3::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
}

pub fn forward_noise<R: Rng + ?Sized>(
    y: ArrayView3<'_, f64>,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Array3<f64>> {
    let eps = standard_normal(rng, y.dim());
    forward_noise_with(y, t, schedule, eps.view())
}

/// Sinusoidal encoding: sin(t·ω_k) then cos(t·ω_k), ω_k geometric from 1 to 1e-4.
pub fn timestep_embedding(t: f64, dim: usize) -> Result<Array1<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "timestep embedding width {dim} must be even and positive"
        )));
    }
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for k in 0..half {
        let omega = if half == 1 {
            1.0
        } else {
            10_000f64.powf(-(k as f64) / (half - 1) as f64)
        };
        out[k] = (t * omega).sin();
        out[half + k] = (t * omega).cos();
    }
    Ok(out)
}

/// Deterministic DDIM update from step `t` to `t_next` given a clean estimate.
pub fn ddim_step(
    y_t: ArrayView3<'_, f64>,
    y0_hat: ArrayView3<'_, f64>,
    t: usize,
    t_next: usize,
    schedule: &NoiseSchedule,
) -> Result<Array3<f64>> {
    schedule.check_step(t)?;
    if y_t.shape() != y0_hat.shape() {
        return Err(Error::Shape(format!(
            "estimate shape {:?} differs from sample shape {:?}",
            y0_hat.shape(),
            y_t.shape()
        )));
    }
    if t_next == t {
        return Ok(y_t.to_owned());
    }
    if t_next > t {
        return Err(Error::Config(format!(
            "DDIM step must move toward 0 ({t} -> {t_next})"
        )));
    }
    let a = schedule.alpha_bar[t];
    let a_next = schedule.alpha_bar[t_next];
    let noise_mag = (1.0 - a).sqrt();
    if noise_mag == 0.0 {
        return Err(Error::Config(format!(
            "zero noise magnitude at timestep {t}"
        )));
    }
    let (sa, sa_next, sn_next) = (a.sqrt(), a_next.sqrt(), (1.0 - a_next).sqrt());
    Ok(Zip::from(&y_t).and(&y0_hat).map_collect(|&yt, &y0| {
        let eps = (yt - sa * y0) / noise_mag;
        sa_next * y0 + sn_next * eps
    }))
}

/// K+1 timesteps uniformly spaced from T down to 0 inclusive.
pub fn sampling_timesteps(steps: usize, iterations: usize) -> Vec<usize> {
    (0..=iterations)
        .map(|i| (steps * (iterations - i) + iterations / 2) / iterations)
        .collect()
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for stream `index` of `seed`; independent of how many streams exist.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index))
}

/// Something that predicts clean local parts from noisy ones.
///
/// A unit is a group of parts handed to one network call; the part-based model
/// has one unit per part, a monolithic model a single unit covering everything.
pub trait ConditionalDenoiser: Sync {
    /// Layout whose part roots define the local frames being denoised.
    fn frame_layout(&self) -> &SkeletonLayout;

    fn units(&self) -> &[Vec<PartName>];

    /// One-shot clean estimate for `unit` at step `t`: inputs are N×J_unit×2
    /// (normalized 2D) and N×J_unit×3 (scaled noisy local 3D).
    fn predict(
        &self,
        unit: usize,
        t: usize,
        x2d: ArrayView3<'_, f64>,
        y_t: ArrayView3<'_, f64>,
    ) -> Result<Array3<f64>>;
}

/// Global joint indices of a unit, parts concatenated in the given order.
pub fn unit_joints(layout: &SkeletonLayout, parts: &[PartName]) -> Result<Vec<usize>> {
    let mut joints = Vec::new();
    for &name in parts {
        let part = layout
            .part(name)
            .ok_or_else(|| Error::Layout(format!("layout has no part `{name}`")))?;
        joints.extend_from_slice(&part.joint_indices);
    }
    Ok(joints)
}

/// Splits unit tensors (N×J_unit×3) back into per-part local sequences.
pub fn units_to_parts(
    layout: &SkeletonLayout,
    units: &[Vec<PartName>],
    tensors: &[Array3<f64>],
    frame_ids: &[i64],
) -> Result<PartSequences> {
    let mut parts = PartSequences::new();
    for (names, tensor) in units.iter().zip(tensors) {
        let mut start = 0;
        for &name in names {
            let len = layout
                .part(name)
                .ok_or_else(|| Error::Layout(format!("layout has no part `{name}`")))?
                .len();
            let coords = tensor
                .slice(ndarray::s![.., start..start + len, ..])
                .to_owned();
            parts.insert(name, PoseSequence::new(frame_ids.to_vec(), coords)?);
            start += len;
        }
    }
    Ok(parts)
}

/// H whole-body predictions for one window with the seed each came from.
#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisSet {
    pub hypotheses: Vec<PoseSequence>,
    pub seeds: Vec<u64>,
}

impl HypothesisSet {
    pub fn new(hypotheses: Vec<PoseSequence>, seeds: Vec<u64>) -> Result<Self> {
        let first = hypotheses
            .first()
            .ok_or_else(|| Error::Shape("empty hypothesis set".into()))?;
        let shape = first.coords().raw_dim();
        if hypotheses.iter().any(|h| h.coords().raw_dim() != shape)
            || seeds.len() != hypotheses.len()
        {
            return Err(Error::Shape("hypotheses disagree in shape".into()));
        }
        Ok(Self { hypotheses, seeds })
    }

    pub fn len(&self) -> usize {
        self.hypotheses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hypotheses.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplingParams {
    pub iterations: usize,
    pub hypotheses: usize,
    pub seed: u64,
}

/// Draws H hypotheses by K DDIM iterations per unit, then reassembles each
/// into the whole-body frame using root offsets read off the predicted body.
///
/// `x2d` holds normalized 2D keypoints for every joint; `scale` is the factor
/// that was applied to 3D targets during training.
pub fn sample_hypotheses<D: ConditionalDenoiser + ?Sized>(
    denoiser: &D,
    x2d: &PoseSequence,
    schedule: &NoiseSchedule,
    params: SamplingParams,
    scale: f64,
) -> Result<HypothesisSet> {
    if params.iterations == 0 || params.hypotheses == 0 {
        return Err(Error::Config(
            "need at least one iteration and one hypothesis".into(),
        ));
    }
    if x2d.dim() != 2 {
        return Err(Error::Shape("2D conditioning expected".into()));
    }
    let layout = denoiser.frame_layout();
    if x2d.joints() != layout.total_joints() {
        return Err(Error::JointCount {
            expected: layout.total_joints(),
            actual: x2d.joints(),
        });
    }
    let units = denoiser.units();
    let covered: usize = units.iter().flatten().count();
    if covered != layout.parts().len()
        || layout
            .parts()
            .iter()
            .any(|p| !units.iter().flatten().any(|&n| n == p.name))
    {
        return Err(Error::Config(
            "denoiser units do not cover every part".into(),
        ));
    }
    let unit_x2d = units
        .iter()
        .map(|parts| Ok(x2d.coords().select(Axis(1), &unit_joints(layout, parts)?)))
        .collect::<Result<Vec<_>>>()?;
    let timesteps = sampling_timesteps(schedule.steps(), params.iterations);
    let frames = x2d.frames();

    let run = |h: usize| -> Result<(PoseSequence, u64)> {
        let seed = derive_seed(params.seed, h as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut samples: Vec<Array3<f64>> = unit_x2d
            .iter()
            .map(|x| standard_normal(&mut rng, (frames, x.len_of(Axis(1)), 3)))
            .collect();
        for pair in timesteps.windows(2) {
            let (t, t_next) = (pair[0], pair[1]);
            for (u, sample) in samples.iter_mut().enumerate() {
                let estimate = denoiser.predict(u, t, unit_x2d[u].view(), sample.view())?;
                *sample = ddim_step(sample.view(), estimate.view(), t, t_next, schedule)?;
            }
        }
        for sample in &mut samples {
            sample.mapv_inplace(|v| v / scale);
        }
        let local = units_to_parts(layout, units, &samples, x2d.frame_ids())?;
        let offsets = derive_root_offsets_from_body(&local[&PartName::Body], layout)?;
        Ok((reconstruct_whole_body(&local, &offsets, layout)?, seed))
    };

    let drawn = (0..params.hypotheses)
        .into_par_iter()
        .map(run)
        .collect::<Result<Vec<_>>>()?;
    let (hypotheses, seeds) = drawn.into_iter().unzip();
    HypothesisSet::new(hypotheses, seeds)
}
