//! Part-specific spatio-temporal denoising networks.
//!
//! Each network maps a conditioned input of N frames × J joints × 5 channels
//! (3 noisy local 3D + 2 conditioning 2D) to a clean 3D estimate. Tokens are
//! one per (frame, joint); blocks alternate attention across the joints of a
//! frame and across the frames of a joint.

pub mod tape;

use ndarray::{Array2, Array3, ArrayView3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::timestep_embedding;
use crate::error::{Error, Result};
use tape::{NodeId, Tape};

pub const IN_CHANNELS: usize = 5;
pub const OUT_CHANNELS: usize = 3;
const FFN_EXPANSION: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub name: String,
    pub joints: usize,
    pub frames: usize,
    pub channels: usize,
    pub depth: usize,
}

impl DenoiserConfig {
    pub fn new(
        name: impl Into<String>,
        joints: usize,
        frames: usize,
        channels: usize,
        depth: usize,
    ) -> Self {
        Self {
            name: name.into(),
            joints,
            frames,
            channels,
            depth,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels < 4 || !self.channels.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "network `{}`: channel width {} must be even and at least 4",
                self.name, self.channels
            )));
        }
        if self.joints == 0 || self.frames == 0 {
            return Err(Error::Config(format!(
                "network `{}`: joints and frames must be positive",
                self.name
            )));
        }
        Ok(())
    }
}

/// Half-width of a zero-mean, unit-variance uniform distribution.
const UNIT_UNIFORM: f64 = 1.732_050_807_568_877_2;

#[derive(Debug, Clone, Copy)]
enum Init {
    Xavier,
    Zeros,
    Ones,
    Uniform(f64),
}

/// Names, shapes and initializers of every parameter, in storage order.
fn parameter_specs(config: &DenoiserConfig) -> Vec<(String, (usize, usize), Init)> {
    let c = config.channels;
    let hidden = FFN_EXPANSION * c;
    let mut specs = vec![
        ("embed.weight".to_string(), (IN_CHANNELS, c), Init::Xavier),
        ("embed.bias".to_string(), (1, c), Init::Zeros),
        // the timestep enters silent and is learned in; a full-strength
        // sinusoid swamps the 2D condition after layer norm
        ("time.weight".to_string(), (c, c), Init::Zeros),
        ("time.bias".to_string(), (1, c), Init::Zeros),
        // unit variance, so joints and frames are distinguishable from step one
        (
            "pos.frame".to_string(),
            (config.frames, c),
            Init::Uniform(UNIT_UNIFORM),
        ),
        (
            "pos.joint".to_string(),
            (config.joints, c),
            Init::Uniform(UNIT_UNIFORM),
        ),
    ];
    for block in 0..config.depth {
        for mixer in ["spatial", "temporal"] {
            let p = format!("blocks.{block}.{mixer}");
            let mut push =
                |name: &str, shape, init| specs.push((format!("{p}.{name}"), shape, init));
            push("norm1.gamma", (1, c), Init::Ones);
            push("norm1.beta", (1, c), Init::Zeros);
            for proj in ["query", "key", "value", "out"] {
                push(&format!("{proj}.weight"), (c, c), Init::Xavier);
                push(&format!("{proj}.bias"), (1, c), Init::Zeros);
            }
            push("norm2.gamma", (1, c), Init::Ones);
            push("norm2.beta", (1, c), Init::Zeros);
            push("ffn1.weight", (c, hidden), Init::Xavier);
            push("ffn1.bias", (1, hidden), Init::Zeros);
            push("ffn2.weight", (hidden, c), Init::Xavier);
            push("ffn2.bias", (1, c), Init::Zeros);
        }
    }
    specs.push(("final_norm.gamma".to_string(), (1, c), Init::Ones));
    specs.push(("final_norm.beta".to_string(), (1, c), Init::Zeros));
    specs.push(("head.weight".to_string(), (c, OUT_CHANNELS), Init::Zeros));
    specs.push(("head.bias".to_string(), (1, OUT_CHANNELS), Init::Zeros));
    specs
}

/// A denoising network: a configuration plus its named parameter arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    config: DenoiserConfig,
    names: Vec<String>,
    params: Vec<Array2<f64>>,
}

pub fn build_denoiser(config: DenoiserConfig, seed: u64) -> Result<Denoiser> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (names, params) = parameter_specs(&config)
        .into_iter()
        .map(|(name, (rows, cols), init)| {
            let value = match init {
                Init::Zeros => Array2::zeros((rows, cols)),
                Init::Ones => Array2::ones((rows, cols)),
                Init::Uniform(bound) => {
                    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..=bound))
                }
                Init::Xavier => {
                    let bound = (6.0 / (rows + cols) as f64).sqrt();
                    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..=bound))
                }
            };
            (name, value)
        })
        .unzip();
    Ok(Denoiser {
        config,
        names,
        params,
    })
}

impl Denoiser {
    /// Rebuilds a network from stored arrays, checking names and shapes.
    pub fn from_parts(config: DenoiserConfig, arrays: Vec<(String, Array2<f64>)>) -> Result<Self> {
        config.validate()?;
        let specs = parameter_specs(&config);
        if specs.len() != arrays.len() {
            return Err(Error::Shape(format!(
                "network `{}` expects {} arrays, got {}",
                config.name,
                specs.len(),
                arrays.len()
            )));
        }
        for ((name, shape, _), (got_name, value)) in specs.iter().zip(&arrays) {
            if name != got_name || *shape != value.dim() {
                return Err(Error::Shape(format!(
                    "network `{}`: expected {name} {shape:?}, got {got_name} {:?}",
                    config.name,
                    value.dim()
                )));
            }
        }
        let (names, params) = arrays.into_iter().unzip();
        Ok(Self {
            config,
            names,
            params,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Array2<f64>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.params
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    /// Registers every parameter on the tape as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.params.iter().map(|p| tape.param(p.clone())).collect()
    }

    fn check_inputs(&self, x2d: &ArrayView3<'_, f64>, y_t: &ArrayView3<'_, f64>) -> Result<()> {
        let (n, j) = (self.config.frames, self.config.joints);
        if x2d.dim() != (n, j, 2) || y_t.dim() != (n, j, 3) {
            return Err(Error::Shape(format!(
                "network `{}` expects {n}×{j}×2 and {n}×{j}×3 inputs, got {:?} and {:?}",
                self.config.name,
                x2d.shape(),
                y_t.shape()
            )));
        }
        Ok(())
    }

    /// Records the forward pass; returns the (N·J)×3 output node, rows in
    /// frame-major token order.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &[NodeId],
        t: usize,
        x2d: ArrayView3<'_, f64>,
        y_t: ArrayView3<'_, f64>,
    ) -> Result<NodeId> {
        self.check_inputs(&x2d, &y_t)?;
        let (n, j, c) = (self.config.frames, self.config.joints, self.config.channels);
        let tokens = n * j;
        let mut input = Array2::zeros((tokens, IN_CHANNELS));
        for f in 0..n {
            for k in 0..j {
                let row = f * j + k;
                for d in 0..3 {
                    input[[row, d]] = y_t[[f, k, d]];
                }
                for d in 0..2 {
                    input[[row, 3 + d]] = x2d[[f, k, d]];
                }
            }
        }
        let mut p = bound.iter().copied();
        let mut next = || p.next().expect("bound parameter list matches the network");

        let input = tape.constant(input);
        let h = tape.matmul(input, next());
        let mut h = tape.add_row(h, next());
        let temb = timestep_embedding(t as f64, c)?.insert_axis(Axis(0));
        let temb = tape.constant(temb);
        let temb = tape.matmul(temb, next());
        let temb = tape.add_row(temb, next());
        h = tape.add_row(h, temb);
        h = tape.add_gathered(h, next(), (0..tokens).map(|r| r / j).collect());
        h = tape.add_gathered(h, next(), (0..tokens).map(|r| r % j).collect());

        let spatial: Vec<Vec<usize>> = (0..n).map(|f| (f * j..(f + 1) * j).collect()).collect();
        let temporal: Vec<Vec<usize>> = (0..j)
            .map(|k| (0..n).map(|f| f * j + k).collect())
            .collect();
        for _ in 0..self.config.depth {
            for groups in [&spatial, &temporal] {
                let (g1, b1) = (next(), next());
                let a = tape.layer_norm(h, g1, b1);
                let mut project = |tape: &mut Tape| {
                    let (w, b) = (next(), next());
                    let m = tape.matmul(a, w);
                    tape.add_row(m, b)
                };
                let q = project(tape);
                let k = project(tape);
                let v = project(tape);
                let o = tape.attention(q, k, v, groups.clone());
                let (wo, bo) = (next(), next());
                let o = tape.matmul(o, wo);
                let o = tape.add_row(o, bo);
                h = tape.add(h, o);

                let (g2, b2) = (next(), next());
                let a = tape.layer_norm(h, g2, b2);
                let (w1, bias1, w2, bias2) = (next(), next(), next(), next());
                let f = tape.matmul(a, w1);
                let f = tape.add_row(f, bias1);
                let f = tape.gelu(f);
                let f = tape.matmul(f, w2);
                let f = tape.add_row(f, bias2);
                h = tape.add(h, f);
            }
        }
        let (gf, bf) = (next(), next());
        let h = tape.layer_norm(h, gf, bf);
        let (wh, bh) = (next(), next());
        let out = tape.matmul(h, wh);
        Ok(tape.add_row(out, bh))
    }
}

/// One-shot clean-signal estimate, N×J×3, in scaled local part coordinates.
pub fn denoise_predict(
    denoiser: &Denoiser,
    t: usize,
    x2d: ArrayView3<'_, f64>,
    y_t: ArrayView3<'_, f64>,
) -> Result<Array3<f64>> {
    let mut tape = Tape::new();
    let bound = denoiser.bind(&mut tape);
    let out = denoiser.forward(&mut tape, &bound, t, x2d, y_t)?;
    let (n, j) = (denoiser.config.frames, denoiser.config.joints);
    Ok(tape
        .value(out)
        .to_owned()
        .into_shape_with_order((n, j, OUT_CHANNELS))
        .expect("token matrix has N·J rows"))
}

pub fn count_parameters(denoiser: &Denoiser) -> usize {
    denoiser.params.iter().map(Array2::len).sum()
}

/// Number of named parameter arrays in a network built from `config`.
pub fn tensor_count(config: &DenoiserConfig) -> Result<usize> {
    config.validate()?;
    Ok(parameter_specs(config).len())
}

/// Parameter count of a network that would be built from `config`.
pub fn parameters_for(config: &DenoiserConfig) -> usize {
    parameter_specs(config)
        .iter()
        .map(|(_, (r, c), _)| r * c)
        .sum()
}

/// Shape of one network slot in a channel budget: joints and frames it sees
/// and its share of the total width.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BudgetSlot {
    pub joints: usize,
    pub frames: usize,
    pub ratio: f64,
}

/// Full-scale channel proportions for body, hands and face.
pub const DEFAULT_RATIOS: [f64; 3] = [384.0, 256.0, 224.0];

fn even_width(x: f64) -> usize {
    ((x / 2.0).round() as usize * 2).max(4)
}

/// Picks even channel widths proportional to the slot ratios so that the
/// summed parameter count lands within 3% of `target_total`.
pub fn allocate_channels(
    target_total: usize,
    slots: &[BudgetSlot],
    depth: usize,
) -> Result<Vec<usize>> {
    if slots.is_empty()
        || slots
            .iter()
            .any(|s| !(s.ratio > 0.0) || s.joints == 0 || s.frames == 0)
    {
        return Err(Error::Config(
            "channel budget needs positive ratios and shapes".into(),
        ));
    }
    let total_for = |widths: &[usize]| -> usize {
        slots
            .iter()
            .zip(widths)
            .map(|(s, &c)| parameters_for(&DenoiserConfig::new("", s.joints, s.frames, c, depth)))
            .sum()
    };
    let widths_at =
        |scale: f64| -> Vec<usize> { slots.iter().map(|s| even_width(scale * s.ratio)).collect() };
    let max_ratio = slots.iter().map(|s| s.ratio).fold(0.0, f64::max);
    let min_total = total_for(&vec![4; slots.len()]);
    if target_total < min_total {
        return Err(Error::Config(format!(
            "target of {target_total} parameters is below the minimum {min_total}"
        )));
    }

    // Continuous widths give a monotone total; bisect on the common scale.
    let continuous_total = |scale: f64| -> f64 {
        slots
            .iter()
            .map(|s| {
                let c = (scale * s.ratio).max(4.0);
                let cfg = DenoiserConfig::new("", s.joints, s.frames, 4, depth);
                let at4 = parameters_for(&cfg) as f64;
                let at6 = parameters_for(&DenoiserConfig {
                    channels: 6,
                    ..cfg.clone()
                }) as f64;
                let at8 = parameters_for(&DenoiserConfig { channels: 8, ..cfg }) as f64;
                // counts are quadratic in width; recover the coefficients
                let a = (at8 - 2.0 * at6 + at4) / 8.0;
                let b = (at6 - at4) / 2.0 - a * 10.0;
                let k = at4 - 16.0 * a - 4.0 * b;
                a * c * c + b * c + k
            })
            .sum()
    };
    let (mut lo, mut hi) = (0.0, 1.0 / max_ratio);
    while continuous_total(hi) < target_total as f64 {
        hi *= 2.0;
        if hi > 1e9 {
            return Err(Error::Config("channel budget search diverged".into()));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if continuous_total(mid) < target_total as f64 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let scale = 0.5 * (lo + hi);

    // Slots with a larger ratio come out strictly wider, equal ratios equal.
    let ordered = |w: &[usize]| {
        slots.iter().zip(w).all(|(a, &wa)| {
            slots.iter().zip(w).all(|(b, &wb)| {
                (a.ratio > b.ratio && wa > wb)
                    || (a.ratio == b.ratio && wa == wb)
                    || a.ratio < b.ratio
            })
        })
    };
    let mut best = widths_at(scale);
    let mut order: Vec<usize> = (0..slots.len()).collect();
    order.sort_by(|&a, &b| slots[a].ratio.total_cmp(&slots[b].ratio));
    while !ordered(&best) {
        // widen the lower-ratio neighbour's successor until the ties break
        for pair in order.windows(2) {
            let (lo_i, hi_i) = (pair[0], pair[1]);
            if slots[hi_i].ratio > slots[lo_i].ratio && best[hi_i] <= best[lo_i] {
                best[hi_i] = best[lo_i] + 2;
            }
        }
    }

    // Rounding to even widths can overshoot; try the neighbours too.
    let mut best_err = total_for(&best).abs_diff(target_total);
    let start = best.clone();
    for step in [-2i64, 2] {
        // one slot at a time, then all together
        for i in 0..=slots.len() {
            let mut w = start.clone();
            let moved = if i == slots.len() {
                0..slots.len()
            } else {
                i..i + 1
            };
            if moved.clone().any(|k| (w[k] as i64 + step) < 4) {
                continue;
            }
            for k in moved {
                w[k] = (w[k] as i64 + step) as usize;
            }
            let err = total_for(&w).abs_diff(target_total);
            let keeps_order = ordered(&w);
            if err < best_err && keeps_order {
                best = w;
                best_err = err;
            }
        }
    }
    if best_err as f64 > 0.03 * target_total as f64 {
        return Err(Error::Config(format!(
            "no even widths reach {target_total} parameters within 3% (closest {})",
            total_for(&best)
        )));
    }
    Ok(best)
}
