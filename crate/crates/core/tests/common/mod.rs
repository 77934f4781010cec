//! Oracles shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use ndarray::{Array3, ArrayView3, Axis};
use pafuse_core::data::{normalize_2d, DatasetFile, Window};
use pafuse_core::diffusion::ConditionalDenoiser;
use pafuse_core::model::{LiftingModel, ModelConfig, Variant};
use pafuse_core::skeleton::{shift_to_part_frames, PartName, PoseSequence, SkeletonLayout};
use pafuse_core::Result;

/// Per-unit 2D inputs and per-unit scaled targets of one window.
type WindowEntry = (Vec<Array3<f64>>, Vec<Array3<f64>>);

/// Returns the scaled ground-truth local pose of whichever window the 2D
/// input belongs to, whatever the noisy input.
pub struct OracleDenoiser {
    frame_layout: SkeletonLayout,
    units: Vec<Vec<PartName>>,
    /// Per window: unit 2D inputs and unit targets.
    entries: Vec<WindowEntry>,
}

impl OracleDenoiser {
    pub fn new(variant: Variant, data: &DatasetFile, windows: &[Window], scale: f64) -> Self {
        let channels = if variant.part_denoisers() {
            vec![4, 4, 4]
        } else {
            vec![4]
        };
        let shape = LiftingModel::build(
            &data.layout,
            windows[0].len(),
            &ModelConfig {
                variant,
                depth: 0,
                channels,
            },
            0,
        )
        .unwrap();
        let frame_layout = shape.frame_layout().clone();
        let units = shape.units().to_vec();
        let unit_joints = shape.unit_joint_indices();
        let entries = windows
            .iter()
            .map(|w| {
                let x2d = normalize_2d(w.kp2d.view(), data.image_size);
                let gt = PoseSequence::new(w.frame_ids.clone(), w.kp3d.clone().unwrap()).unwrap();
                let (local, _) = shift_to_part_frames(&gt, &frame_layout).unwrap();
                let xs = unit_joints.iter().map(|j| x2d.select(Axis(1), j)).collect();
                let ts = units
                    .iter()
                    .map(|parts| {
                        let views: Vec<_> = parts.iter().map(|p| local[p].coords()).collect();
                        ndarray::concatenate(Axis(1), &views).unwrap() * scale
                    })
                    .collect();
                (xs, ts)
            })
            .collect();
        Self {
            frame_layout,
            units,
            entries,
        }
    }
}

impl ConditionalDenoiser for OracleDenoiser {
    fn frame_layout(&self) -> &SkeletonLayout {
        &self.frame_layout
    }

    fn units(&self) -> &[Vec<PartName>] {
        &self.units
    }

    fn predict(
        &self,
        unit: usize,
        _t: usize,
        x2d: ArrayView3<'_, f64>,
        _y_t: ArrayView3<'_, f64>,
    ) -> Result<Array3<f64>> {
        let (_, targets) = self
            .entries
            .iter()
            .find(|(xs, _)| xs[unit] == x2d)
            .expect("oracle knows every window");
        Ok(targets[unit].clone())
    }
}

/// Body-root-relative copy, computed joint by joint.
pub fn root_centered(coords: &Array3<f64>, root: usize) -> Array3<f64> {
    let mut out = coords.clone();
    for f in 0..coords.shape()[0] {
        for j in 0..coords.shape()[1] {
            for d in 0..3 {
                out[[f, j, d]] = coords[[f, j, d]] - coords[[f, root, d]];
            }
        }
    }
    out
}

pub fn brute_mpjpe(p: &Array3<f64>, g: &Array3<f64>) -> f64 {
    let (n, j, _) = p.dim();
    let mut total = 0.0;
    for f in 0..n {
        for k in 0..j {
            let mut sq = 0.0;
            for d in 0..3 {
                sq += (p[[f, k, d]] - g[[f, k, d]]) * (p[[f, k, d]] - g[[f, k, d]]);
            }
            total += sq.sqrt();
        }
    }
    total / (n * j) as f64
}

pub fn brute_mse(p: &Array3<f64>, g: &Array3<f64>) -> f64 {
    let mut total = 0.0;
    for (a, b) in p.iter().zip(g.iter()) {
        total += (a - b) * (a - b);
    }
    total / p.len() as f64
}

/// Mean error over `joints`, both sides aligned on `root` frame by frame.
pub fn brute_aligned(p: &Array3<f64>, g: &Array3<f64>, joints: &[usize], roots: &[usize]) -> f64 {
    let n = p.shape()[0];
    let mut total = 0.0;
    for f in 0..n {
        for (&j, &r) in joints.iter().zip(roots) {
            let mut sq = 0.0;
            for d in 0..3 {
                let e = (p[[f, j, d]] - p[[f, r, d]]) - (g[[f, j, d]] - g[[f, r, d]]);
                sq += e * e;
            }
            total += sq.sqrt();
        }
    }
    total / (n * joints.len()) as f64
}

/// (WB, body, face, hands) for the standard whole-body index blocks.
pub fn brute_metrics(p: &Array3<f64>, g: &Array3<f64>) -> [f64; 4] {
    let all: Vec<usize> = (0..133).collect();
    let body: Vec<usize> = (0..23).collect();
    let face: Vec<usize> = (23..91).collect();
    let hands: Vec<usize> = (91..133).collect();
    let hand_roots: Vec<usize> = hands
        .iter()
        .map(|&j| if j < 112 { 10 } else { 11 })
        .collect();
    [
        brute_aligned(p, g, &all, &[0; 133]),
        brute_aligned(p, g, &body, &[0; 23]),
        brute_aligned(p, g, &face, &[1; 68]),
        brute_aligned(p, g, &hands, &hand_roots),
    ]
}
