//! Dataset files, window extraction, gap statistics and the synthetic
//! motion generator.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use ndarray::{s, Array2, Array3, ArrayView3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffusion::derive_seed;
use crate::error::{Error, Result};
use crate::skeleton::{PartName, PoseSequence, SkeletonLayout};

/// Pinhole camera with square pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub focal: f64,
    pub principal: [f64; 2],
}

impl Camera {
    pub fn project(&self, p: [f64; 3]) -> [f64; 2] {
        [
            self.focal * p[0] / p[2] + self.principal[0],
            self.focal * p[1] / p[2] + self.principal[1],
        ]
    }
}

/// One annotated sequence: 2D pixels and optional 3D millimeters per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub id: String,
    pub frame_ids: Vec<i64>,
    /// N×J×2 pixels.
    pub kp2d: Array3<f64>,
    /// N×J×3 millimeters, camera space.
    pub kp3d: Option<Array3<f64>>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frame_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFile {
    pub layout: SkeletonLayout,
    pub image_size: [f64; 2],
    pub camera: Option<Camera>,
    pub sequences: Vec<Sequence>,
}

#[derive(Serialize, Deserialize)]
struct RawFrame {
    frame_id: i64,
    kp2d: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kp3d: Option<Vec<[f64; 3]>>,
}

#[derive(Serialize, Deserialize)]
struct RawSequence {
    id: String,
    frames: Vec<RawFrame>,
}

#[derive(Serialize, Deserialize)]
struct RawDataset {
    layout: SkeletonLayout,
    image_size: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    camera: Option<Camera>,
    sequences: Vec<RawSequence>,
}

fn sequence_from_raw(raw: RawSequence, joints: usize) -> Result<Sequence> {
    let n = raw.frames.len();
    let has_3d = raw.frames.first().is_some_and(|f| f.kp3d.is_some());
    let mut kp2d = Array3::zeros((n, joints, 2));
    let mut kp3d = has_3d.then(|| Array3::zeros((n, joints, 3)));
    let mut frame_ids = Vec::with_capacity(n);
    for (pos, frame) in raw.frames.into_iter().enumerate() {
        let fail = |msg: String| Error::data(&raw.id, pos, msg);
        if let Some(&prev) = frame_ids.last() {
            if frame.frame_id <= prev {
                return Err(fail(format!(
                    "frame_id {} does not increase after {prev}",
                    frame.frame_id
                )));
            }
        }
        frame_ids.push(frame.frame_id);
        if frame.kp2d.len() != joints {
            return Err(fail(format!(
                "kp2d has {} joints, layout has {joints}",
                frame.kp2d.len()
            )));
        }
        for (j, p) in frame.kp2d.iter().enumerate() {
            if p.iter().any(|v| !v.is_finite()) {
                return Err(fail(format!("non-finite kp2d at joint {j}")));
            }
            kp2d[[pos, j, 0]] = p[0];
            kp2d[[pos, j, 1]] = p[1];
        }
        match (&mut kp3d, frame.kp3d) {
            (Some(dst), Some(points)) => {
                if points.len() != joints {
                    return Err(fail(format!(
                        "kp3d has {} joints, layout has {joints}",
                        points.len()
                    )));
                }
                for (j, p) in points.iter().enumerate() {
                    if p.iter().any(|v| !v.is_finite()) {
                        return Err(fail(format!("non-finite kp3d at joint {j}")));
                    }
                    for d in 0..3 {
                        dst[[pos, j, d]] = p[d];
                    }
                }
            }
            (None, None) => {}
            _ => return Err(fail("kp3d present on some frames but not others".into())),
        }
    }
    Ok(Sequence {
        id: raw.id,
        frame_ids,
        kp2d,
        kp3d,
    })
}

fn sequence_to_raw(seq: &Sequence) -> RawSequence {
    let frames = (0..seq.len())
        .map(|f| RawFrame {
            frame_id: seq.frame_ids[f],
            kp2d: seq
                .kp2d
                .index_axis(Axis(0), f)
                .outer_iter()
                .map(|p| [p[0], p[1]])
                .collect(),
            kp3d: seq.kp3d.as_ref().map(|k| {
                k.index_axis(Axis(0), f)
                    .outer_iter()
                    .map(|p| [p[0], p[1], p[2]])
                    .collect()
            }),
        })
        .collect();
    RawSequence {
        id: seq.id.clone(),
        frames,
    }
}

impl DatasetFile {
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawDataset = serde_json::from_str(text).map_err(|e| Error::Format {
            kind: "dataset",
            message: e.to_string(),
        })?;
        if raw.image_size.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Format {
                kind: "dataset",
                message: format!("image_size {:?} must be positive", raw.image_size),
            });
        }
        let joints = raw.layout.total_joints();
        let sequences = raw
            .sequences
            .into_iter()
            .map(|s| sequence_from_raw(s, joints))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layout: raw.layout,
            image_size: raw.image_size,
            camera: raw.camera,
            sequences,
        })
    }

    pub fn to_json(&self) -> String {
        let raw = RawDataset {
            layout: self.layout.clone(),
            image_size: self.image_size,
            camera: self.camera,
            sequences: self.sequences.iter().map(sequence_to_raw).collect(),
        };
        serde_json::to_string(&raw).expect("dataset serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn has_3d(&self) -> bool {
        self.sequences.iter().all(|s| s.kp3d.is_some())
    }

    /// Moves the last `count` sequences into a second dataset.
    pub fn split_holdout(&self, count: usize) -> (DatasetFile, DatasetFile) {
        let cut = self.sequences.len().saturating_sub(count);
        let part = |seqs: &[Sequence]| DatasetFile {
            layout: self.layout.clone(),
            image_size: self.image_size,
            camera: self.camera,
            sequences: seqs.to_vec(),
        };
        (part(&self.sequences[..cut]), part(&self.sequences[cut..]))
    }
}

/// Reads and validates a dataset file.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<DatasetFile> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    DatasetFile::from_json(&text)
}

/// N consecutive annotated frames of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub sequence: String,
    pub start: usize,
    pub frame_ids: Vec<i64>,
    /// N×J×2 pixels.
    pub kp2d: Array3<f64>,
    /// N×J×3 millimeters.
    pub kp3d: Option<Array3<f64>>,
}

impl Window {
    pub fn len(&self) -> usize {
        self.frame_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_ids.is_empty()
    }

    pub fn pose3d(&self) -> Option<PoseSequence> {
        self.kp3d.as_ref().map(|k| {
            PoseSequence::new(self.frame_ids.clone(), k.clone()).expect("window frames are valid")
        })
    }
}

/// Windows of `length` consecutive annotated frames starting every `stride`
/// annotations. Frame-id gaps inside a window are kept.
pub fn make_windows(seq: &Sequence, length: usize, stride: usize) -> Vec<Window> {
    if length == 0 || stride == 0 || seq.len() < length {
        return Vec::new();
    }
    (0..=seq.len() - length)
        .step_by(stride)
        .map(|start| {
            let range = start..start + length;
            Window {
                sequence: seq.id.clone(),
                start,
                frame_ids: seq.frame_ids[range.clone()].to_vec(),
                kp2d: seq.kp2d.slice(s![range.clone(), .., ..]).to_owned(),
                kp3d: seq
                    .kp3d
                    .as_ref()
                    .map(|k| k.slice(s![range, .., ..]).to_owned()),
            }
        })
        .collect()
}

pub fn dataset_windows(data: &DatasetFile, length: usize, stride: usize) -> Vec<Window> {
    data.sequences
        .iter()
        .flat_map(|s| make_windows(s, length, stride))
        .collect()
}

/// Histogram of frame-id differences between consecutive annotated frames.
pub fn gap_histogram(frame_ids: &[i64]) -> BTreeMap<i64, usize> {
    let mut hist = BTreeMap::new();
    for w in frame_ids.windows(2) {
        *hist.entry(w[1] - w[0]).or_insert(0) += 1;
    }
    hist
}

fn half_extent(image_size: [f64; 2]) -> f64 {
    image_size[0].max(image_size[1]) / 2.0
}

/// Pixels to [−1, 1]²: centered on the image center, divided by half the
/// larger image dimension.
pub fn normalize_2d(kp2d: ArrayView3<'_, f64>, image_size: [f64; 2]) -> Array3<f64> {
    let half = half_extent(image_size);
    let center = [image_size[0] / 2.0, image_size[1] / 2.0];
    let mut out = kp2d.to_owned();
    for mut p in out.lanes_mut(Axis(2)) {
        p[0] = (p[0] - center[0]) / half;
        p[1] = (p[1] - center[1]) / half;
    }
    out
}

pub fn denormalize_2d(kp: ArrayView3<'_, f64>, image_size: [f64; 2]) -> Array3<f64> {
    let half = half_extent(image_size);
    let center = [image_size[0] / 2.0, image_size[1] / 2.0];
    let mut out = kp.to_owned();
    for mut p in out.lanes_mut(Axis(2)) {
        p[0] = p[0] * half + center[0];
        p[1] = p[1] * half + center[1];
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub sequences: usize,
    pub frames: usize,
    /// Motion scale in millimeters. Body joints swing by up to this much per
    /// latent component, the root drifts on a circle of 2.5× this radius and
    /// hand joints jitter with a standard deviation of 1/25 of it.
    pub amplitude: f64,
    pub focal: f64,
    pub seed: u64,
    pub image_size: [f64; 2],
    /// Subject distance from the camera, millimeters.
    pub depth: f64,
    /// Frame-id step between annotated frames.
    pub frame_step: i64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            sequences: 8,
            frames: 200,
            amplitude: 80.0,
            focal: 1000.0,
            seed: 0,
            image_size: [1000.0, 1000.0],
            depth: 4500.0,
            frame_step: 5,
        }
    }
}

/// Root-relative body template (mm, y down, z away from the camera). Joint 0 is
/// the hip center, 1 the nose, 10/11 the wrists.
const BODY_TEMPLATE: [[f64; 3]; 23] = [
    [0.0, 0.0, 0.0],
    [0.0, -620.0, -90.0],
    [0.0, -500.0, 0.0],
    [0.0, -720.0, 0.0],
    [170.0, -470.0, 0.0],
    [-170.0, -470.0, 0.0],
    [210.0, -200.0, 10.0],
    [-210.0, -200.0, 10.0],
    [100.0, 0.0, 0.0],
    [-100.0, 0.0, 0.0],
    [230.0, 50.0, -60.0],
    [-230.0, 50.0, -60.0],
    [100.0, 430.0, -20.0],
    [-100.0, 430.0, -20.0],
    [100.0, 850.0, 20.0],
    [-100.0, 850.0, 20.0],
    [0.0, -280.0, 0.0],
    [80.0, 900.0, -130.0],
    [130.0, 900.0, -110.0],
    [100.0, 900.0, 50.0],
    [-80.0, 900.0, -130.0],
    [-130.0, 900.0, -110.0],
    [-100.0, 900.0, 50.0],
];

/// Latent sinusoid components shared by all body joints.
const MOTION_COMPONENTS: usize = 3;
const FRAME_RATE: f64 = 50.0;
const ROOT_DRIFT_RATIO: f64 = 2.5;
const HAND_NOISE_RATIO: f64 = 0.04;

fn face_template() -> Vec<[f64; 3]> {
    // contour, brows, nose, eyes, mouth laid out on an ellipse around the nose
    (0..68)
        .map(|i| {
            let a = i as f64 / 68.0 * 2.0 * PI;
            let r = if i < 17 {
                1.0
            } else {
                0.35 + 0.5 * ((i * 7) % 11) as f64 / 11.0
            };
            [
                70.0 * r * a.cos(),
                90.0 * r * a.sin() - 10.0,
                30.0 * (1.0 - r) - 20.0,
            ]
        })
        .collect()
}

fn hand_template(mirror: bool) -> Vec<[f64; 3]> {
    let sign = if mirror { -1.0 } else { 1.0 };
    let mut points = vec![[0.0, 15.0, 0.0]];
    for finger in 0..5 {
        let spread = (finger as f64 - 2.0) * 0.3;
        for joint in 1..=4 {
            let len = 30.0 + 22.0 * joint as f64;
            points.push([
                sign * len * spread.sin(),
                15.0 + len * spread.cos(),
                -6.0 * joint as f64,
            ]);
        }
    }
    points
}

/// Generates a dataset whose body joints move along smooth low-frequency
/// trajectories, with a rigid face on the nose and rigid hands on the wrists,
/// projected through a pinhole camera.
pub fn synth_generate(config: &SynthConfig) -> Result<DatasetFile> {
    if config.sequences == 0 || config.frames == 0 {
        return Err(Error::Config(
            "sequence and frame counts must be positive".into(),
        ));
    }
    if !(config.focal > 0.0) || !(config.depth > 0.0) || config.frame_step <= 0 {
        return Err(Error::Config(
            "focal length, depth and frame step must be positive".into(),
        ));
    }
    if !(config.amplitude >= 0.0) || config.image_size.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::Config(
            "amplitude and image size must be non-negative".into(),
        ));
    }
    let layout = SkeletonLayout::whole_body();
    let camera = Camera {
        focal: config.focal,
        principal: [config.image_size[0] / 2.0, config.image_size[1] / 2.0],
    };
    let body = layout.body();
    let face = face_template();
    let hands = [hand_template(false), hand_template(true)];

    // Per-joint motion directions are shared by every sequence of the dataset.
    let mut basis_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, u64::MAX));
    let basis = Array3::from_shape_fn((body.len(), MOTION_COMPONENTS, 3), |(j, _, _)| {
        if j == 0 {
            0.0
        } else {
            basis_rng.random_range(-1.0..1.0)
        }
    });

    let sequences = (0..config.sequences)
        .map(|si| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, si as u64));
            let omega: Vec<f64> = (0..MOTION_COMPONENTS)
                .map(|_| 2.0 * PI * rng.random_range(0.2..0.8) / FRAME_RATE)
                .collect();
            let phase: Vec<f64> = (0..MOTION_COMPONENTS)
                .map(|_| rng.random_range(0.0..2.0 * PI))
                .collect();
            let drift = (
                2.0 * PI * rng.random_range(0.05..0.15) / FRAME_RATE,
                rng.random_range(0.0..2.0 * PI),
            );
            let n = config.frames;
            let frame_ids: Vec<i64> = (0..n as i64).map(|i| 1 + i * config.frame_step).collect();
            let drift_radius = ROOT_DRIFT_RATIO * config.amplitude;
            let hand_noise = HAND_NOISE_RATIO * config.amplitude;
            let mut kp3d = Array3::zeros((n, layout.total_joints(), 3));
            for (f, &fid) in frame_ids.iter().enumerate() {
                let time = fid as f64;
                let root = [
                    drift_radius * (drift.0 * time + drift.1).sin(),
                    0.0,
                    config.depth + drift_radius * (drift.0 * time + drift.1).cos(),
                ];
                let wave: Vec<f64> = (0..MOTION_COMPONENTS)
                    .map(|k| (omega[k] * time + phase[k]).sin())
                    .collect();
                let mut body_pos = [[0.0; 3]; 23];
                for (k, &j) in body.joint_indices.iter().enumerate() {
                    for d in 0..3 {
                        let motion: f64 = (0..MOTION_COMPONENTS)
                            .map(|c| basis[[k, c, d]] * wave[c])
                            .sum();
                        body_pos[k][d] = root[d] + BODY_TEMPLATE[k][d] + config.amplitude * motion;
                        kp3d[[f, j, d]] = body_pos[k][d];
                    }
                }
                let attach = |name: PartName| layout.part(name).expect("default layout part");
                let face_part = attach(PartName::Face);
                let nose = body_pos[body
                    .position_of(face_part.root_index)
                    .expect("nose is a body joint")];
                for (k, &j) in face_part.joint_indices.iter().enumerate() {
                    for d in 0..3 {
                        kp3d[[f, j, d]] = nose[d] + face[k][d];
                    }
                }
                for (h, name) in [PartName::LeftHand, PartName::RightHand]
                    .into_iter()
                    .enumerate()
                {
                    let part = attach(name);
                    let wrist = body_pos[body
                        .position_of(part.root_index)
                        .expect("wrist is a body joint")];
                    for (k, &j) in part.joint_indices.iter().enumerate() {
                        for d in 0..3 {
                            let jitter: f64 = rng.sample(StandardNormal);
                            kp3d[[f, j, d]] = wrist[d] + hands[h][k][d] + hand_noise * jitter;
                        }
                    }
                }
            }
            let mut kp2d = Array3::zeros((n, layout.total_joints(), 2));
            for f in 0..n {
                for j in 0..layout.total_joints() {
                    let uv = camera.project([kp3d[[f, j, 0]], kp3d[[f, j, 1]], kp3d[[f, j, 2]]]);
                    kp2d[[f, j, 0]] = uv[0];
                    kp2d[[f, j, 1]] = uv[1];
                }
            }
            Sequence {
                id: format!("seq{si:03}"),
                frame_ids,
                kp2d,
                kp3d: Some(kp3d),
            }
        })
        .collect();

    Ok(DatasetFile {
        layout,
        image_size: config.image_size,
        camera: Some(camera),
        sequences,
    })
}

/// Mean root-relative pose per joint over every annotated frame (J×3).
pub fn mean_root_relative_pose(data: &DatasetFile) -> Result<Array2<f64>> {
    let root = data.layout.body_root();
    let mut sum = Array2::zeros((data.layout.total_joints(), 3));
    let mut count = 0usize;
    for seq in &data.sequences {
        let kp3d = seq
            .kp3d
            .as_ref()
            .ok_or_else(|| Error::data(&seq.id, 0, "sequence has no 3D ground truth"))?;
        for frame in kp3d.outer_iter() {
            let r = frame.row(root).to_owned();
            for (mut acc, joint) in sum.outer_iter_mut().zip(frame.outer_iter()) {
                acc += &(&joint - &r);
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Config("no frames to average".into()));
    }
    Ok(sum / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(frame_ids: &[i64], joints: usize) -> Sequence {
        let n = frame_ids.len();
        Sequence {
            id: "s".into(),
            frame_ids: frame_ids.to_vec(),
            kp2d: Array3::from_shape_fn((n, joints, 2), |(f, j, d)| (f * 10 + j + d) as f64),
            kp3d: Some(Array3::from_shape_fn((n, joints, 3), |(f, j, d)| {
                (f * 100 + j * 3 + d) as f64
            })),
        }
    }

    #[test]
    fn window_counts() {
        let seq = tiny(&(0..10).collect::<Vec<_>>(), 2);
        assert_eq!(make_windows(&seq, 5, 5).len(), 2);
        assert_eq!(make_windows(&seq, 5, 1).len(), 6);
        assert_eq!(make_windows(&tiny(&[0, 1, 2, 3], 2), 5, 1).len(), 0);
        let windows = make_windows(&seq, 5, 3);
        for w in &windows {
            assert_eq!(w.len(), 5);
            assert_eq!(w.frame_ids, seq.frame_ids[w.start..w.start + 5].to_vec());
            assert_eq!(w.kp2d, seq.kp2d.slice(s![w.start..w.start + 5, .., ..]));
        }
    }

    #[test]
    fn windows_keep_gaps() {
        let seq = tiny(&[1, 6, 11, 111, 116], 1);
        let w = make_windows(&seq, 4, 1);
        assert_eq!(w[0].frame_ids, vec![1, 6, 11, 111]);
    }

    #[test]
    fn gaps() {
        assert_eq!(gap_histogram(&[1, 6, 11]), BTreeMap::from([(5, 2)]));
        assert!(gap_histogram(&[4]).is_empty());
        assert_eq!(
            gap_histogram(&[1, 6, 11, 111]),
            BTreeMap::from([(5, 2), (100, 1)])
        );
    }

    #[test]
    fn normalization() {
        let size = [640.0, 480.0];
        let p = Array3::from_shape_vec((1, 2, 2), vec![320.0, 240.0, 0.0, 0.0]).unwrap();
        let n = normalize_2d(p.view(), size);
        assert_eq!(n[[0, 0, 0]], 0.0);
        assert_eq!(n[[0, 0, 1]], 0.0);
        let sq = normalize_2d(p.view(), [400.0, 400.0]);
        assert_eq!((sq[[0, 1, 0]], sq[[0, 1, 1]]), (-1.0, -1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pix = Array3::from_shape_simple_fn((3, 5, 2), || rng.random_range(-100.0..900.0));
        let back = denormalize_2d(normalize_2d(pix.view(), size).view(), size);
        for (a, b) in back.iter().zip(pix.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    fn small_synth() -> SynthConfig {
        SynthConfig {
            sequences: 2,
            frames: 12,
            seed: 7,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn synth_is_valid_and_deterministic() {
        let data = synth_generate(&small_synth()).unwrap();
        let json = data.to_json();
        assert_eq!(json, synth_generate(&small_synth()).unwrap().to_json());
        let loaded = DatasetFile::from_json(&json).unwrap();
        assert_eq!(loaded, data);
        assert_eq!(loaded.to_json(), json);
        assert_eq!(loaded.sequences.len(), 2);
        assert_eq!(loaded.sequences[0].kp2d.dim(), (12, 133, 2));
        let hist = gap_histogram(&loaded.sequences[0].frame_ids);
        assert_eq!(hist, BTreeMap::from([(5, 11)]));
    }

    #[test]
    fn synth_projection_consistent() {
        let data = synth_generate(&small_synth()).unwrap();
        let cam = data.camera.unwrap();
        for seq in &data.sequences {
            let kp3d = seq.kp3d.as_ref().unwrap();
            for f in 0..seq.len() {
                for j in 0..133 {
                    let uv = cam.project([kp3d[[f, j, 0]], kp3d[[f, j, 1]], kp3d[[f, j, 2]]]);
                    assert!((uv[0] - seq.kp2d[[f, j, 0]]).abs() < 1e-6);
                    assert!((uv[1] - seq.kp2d[[f, j, 1]]).abs() < 1e-6);
                }
            }
        }
        let axis = cam.project([0.0, 0.0, 3000.0]);
        assert_eq!(axis, cam.principal);
    }

    #[test]
    fn zero_amplitude_freezes_every_frame() {
        let data = synth_generate(&SynthConfig {
            amplitude: 0.0,
            ..small_synth()
        })
        .unwrap();
        for seq in &data.sequences {
            let kp3d = seq.kp3d.as_ref().unwrap();
            for f in 1..seq.len() {
                assert_eq!(kp3d.index_axis(Axis(0), f), kp3d.index_axis(Axis(0), 0));
                assert_eq!(
                    seq.kp2d.index_axis(Axis(0), f),
                    seq.kp2d.index_axis(Axis(0), 0)
                );
            }
        }
    }

    #[test]
    fn synth_rejects_bad_config() {
        for bad in [
            SynthConfig {
                frames: 0,
                ..small_synth()
            },
            SynthConfig {
                sequences: 0,
                ..small_synth()
            },
            SynthConfig {
                focal: 0.0,
                ..small_synth()
            },
        ] {
            assert!(synth_generate(&bad).is_err());
        }
    }

    #[test]
    fn load_errors_name_the_sequence() {
        let layout = SkeletonLayout::whole_body();
        let frame = |id: i64, joints: usize| serde_json::json!({"frame_id": id, "kp2d": vec![[0.0, 0.0]; joints], "kp3d": vec![[0.0, 0.0, 1.0]; joints]});
        let doc = |frames: Vec<serde_json::Value>| {
            serde_json::json!({
                "layout": layout,
                "image_size": [100.0, 100.0],
                "sequences": [{"id": "walk_03", "frames": frames}],
            })
            .to_string()
        };
        let ok = DatasetFile::from_json(&doc(vec![frame(0, 133), frame(1, 133)])).unwrap();
        assert_eq!(make_windows(&ok.sequences[0], 2, 1).len(), 1);

        let err = DatasetFile::from_json(&doc(vec![frame(0, 17)])).unwrap_err();
        assert!(err.to_string().contains("walk_03"), "{err}");
        let err = DatasetFile::from_json(&doc(vec![frame(5, 133), frame(5, 133)])).unwrap_err();
        assert!(err.to_string().contains("does not increase"), "{err}");
        assert!(DatasetFile::from_json("{not json").is_err());
    }
}
