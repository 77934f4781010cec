//! Whole-body skeleton layout and the part-frame decomposition.
//!
//! A pose is usually expressed relative to the body root (keypoint 0). The
//! part-frame representation instead expresses each part relative to its own
//! root joint: the body root for the body, the nose for the face and the wrists
//! for the hands. Because every part root is itself a body joint, the body part
//! alone carries enough information to put the other parts back in place.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use ndarray::{Array3, ArrayView3, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartName {
    Body,
    Face,
    LeftHand,
    RightHand,
}

impl PartName {
    pub const ALL: [PartName; 4] = [
        PartName::Body,
        PartName::Face,
        PartName::LeftHand,
        PartName::RightHand,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PartName::Body => "body",
            PartName::Face => "face",
            PartName::LeftHand => "left_hand",
            PartName::RightHand => "right_hand",
        }
    }

    pub fn is_hand(self) -> bool {
        matches!(self, PartName::LeftHand | PartName::RightHand)
    }
}

impl fmt::Display for PartName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartSpec {
    pub name: PartName,
    #[serde(rename = "joints")]
    pub joint_indices: Vec<usize>,
    #[serde(rename = "root")]
    pub root_index: usize,
}

impl PartSpec {
    pub fn len(&self) -> usize {
        self.joint_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joint_indices.is_empty()
    }

    /// Position of a global joint index inside this part.
    pub fn position_of(&self, joint: usize) -> Option<usize> {
        self.joint_indices.binary_search(&joint).ok()
    }
}

/// Joint indices, part membership and part roots of a skeleton.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawLayout", into = "RawLayout")]
pub struct SkeletonLayout {
    total_joints: usize,
    parts: Vec<PartSpec>,
}

#[derive(Serialize, Deserialize)]
struct RawLayout {
    total_joints: usize,
    parts: Vec<PartSpec>,
}

impl TryFrom<RawLayout> for SkeletonLayout {
    type Error = Error;

    fn try_from(raw: RawLayout) -> Result<Self> {
        SkeletonLayout::new(raw.total_joints, raw.parts)
    }
}

impl From<SkeletonLayout> for RawLayout {
    fn from(layout: SkeletonLayout) -> Self {
        RawLayout {
            total_joints: layout.total_joints,
            parts: layout.parts,
        }
    }
}

pub const WHOLE_BODY_JOINTS: usize = 133;
pub const BODY_JOINTS: usize = 23;
pub const FACE_JOINTS: usize = 68;
pub const HAND_JOINTS: usize = 21;

impl Default for SkeletonLayout {
    fn default() -> Self {
        Self::whole_body()
    }
}

impl SkeletonLayout {
    /// Validates and builds a layout. Joint lists are sorted; parts keep the
    /// given order.
    pub fn new(total_joints: usize, mut parts: Vec<PartSpec>) -> Result<Self> {
        if total_joints == 0 {
            return Err(Error::Layout("total_joints must be positive".into()));
        }
        let mut owner = vec![None::<usize>; total_joints];
        for (p, part) in parts.iter_mut().enumerate() {
            part.joint_indices.sort_unstable();
            if part.joint_indices.is_empty() {
                return Err(Error::Layout(format!("part `{}` has no joints", part.name)));
            }
            for &j in &part.joint_indices {
                let slot = owner.get_mut(j).ok_or_else(|| {
                    Error::Layout(format!(
                        "part `{}` references joint {j} outside 0..{total_joints}",
                        part.name
                    ))
                })?;
                if let Some(prev) = slot.replace(p) {
                    return Err(Error::Layout(format!(
                        "joint {j} belongs to more than one part (parts {prev} and {p})"
                    )));
                }
            }
        }
        if let Some(j) = owner.iter().position(Option::is_none) {
            return Err(Error::Layout(format!(
                "joint {j} is not assigned to any part"
            )));
        }
        for (i, a) in parts.iter().enumerate() {
            if parts[..i].iter().any(|b| b.name == a.name) {
                return Err(Error::Layout(format!("duplicate part `{}`", a.name)));
            }
        }
        let body = parts
            .iter()
            .find(|p| p.name == PartName::Body)
            .ok_or_else(|| Error::Layout("layout has no body part".into()))?;
        for part in &parts {
            if body.position_of(part.root_index).is_none() {
                return Err(Error::Layout(format!(
                    "root {} of part `{}` is not a body joint",
                    part.root_index, part.name
                )));
            }
        }
        Ok(Self {
            total_joints,
            parts,
        })
    }

    /// The built-in 133-keypoint layout: contiguous blocks for body (23),
    /// face (68), left hand (21) and right hand (21), rooted at 0/1/10/11.
    pub fn whole_body() -> Self {
        let block = |start: usize, len: usize| (start..start + len).collect::<Vec<_>>();
        let face_start = BODY_JOINTS;
        let left_start = face_start + FACE_JOINTS;
        let right_start = left_start + HAND_JOINTS;
        Self::new(
            WHOLE_BODY_JOINTS,
            vec![
                PartSpec {
                    name: PartName::Body,
                    joint_indices: block(0, BODY_JOINTS),
                    root_index: 0,
                },
                PartSpec {
                    name: PartName::Face,
                    joint_indices: block(face_start, FACE_JOINTS),
                    root_index: 1,
                },
                PartSpec {
                    name: PartName::LeftHand,
                    joint_indices: block(left_start, HAND_JOINTS),
                    root_index: 10,
                },
                PartSpec {
                    name: PartName::RightHand,
                    joint_indices: block(right_start, HAND_JOINTS),
                    root_index: 11,
                },
            ],
        )
        .expect("built-in layout is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format {
            kind: "layout",
            message: e.to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("layout serializes")
    }

    pub fn total_joints(&self) -> usize {
        self.total_joints
    }

    pub fn parts(&self) -> &[PartSpec] {
        &self.parts
    }

    pub fn part(&self, name: PartName) -> Option<&PartSpec> {
        self.parts.iter().find(|p| p.name == name)
    }

    pub fn part_index(&self, name: PartName) -> Option<usize> {
        self.parts.iter().position(|p| p.name == name)
    }

    pub fn body(&self) -> &PartSpec {
        self.part(PartName::Body)
            .expect("validated layout has a body part")
    }

    pub fn body_root(&self) -> usize {
        self.body().root_index
    }

    /// Same membership, but every part rooted at the body root. Shifting with
    /// this layout yields the plain whole-body frame.
    pub fn with_body_roots(&self) -> Self {
        let root = self.body_root();
        let parts = self
            .parts
            .iter()
            .map(|p| PartSpec {
                root_index: root,
                ..p.clone()
            })
            .collect();
        Self {
            total_joints: self.total_joints,
            parts,
        }
    }

    /// Short stable fingerprint of the canonical JSON form.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("layout serializes");
        let digest = Sha256::digest(&canonical);
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// N frames of J×D keypoints with their original frame numbers.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSequence {
    frame_ids: Vec<i64>,
    coords: Array3<f64>,
}

impl PoseSequence {
    pub fn new(frame_ids: Vec<i64>, coords: Array3<f64>) -> Result<Self> {
        if frame_ids.len() != coords.len_of(Axis(0)) {
            return Err(Error::Shape(format!(
                "{} frame ids for {} frames",
                frame_ids.len(),
                coords.len_of(Axis(0))
            )));
        }
        if let Some(w) = frame_ids.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::Shape(format!(
                "frame ids not strictly increasing at position {}",
                w + 1
            )));
        }
        let dim = coords.len_of(Axis(2));
        if dim != 2 && dim != 3 {
            return Err(Error::Shape(format!(
                "coordinate dimension {dim} is not 2 or 3"
            )));
        }
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("pose coordinates".into()));
        }
        Ok(Self { frame_ids, coords })
    }

    /// Frames numbered 0..N.
    pub fn from_coords(coords: Array3<f64>) -> Result<Self> {
        let n = coords.len_of(Axis(0)) as i64;
        Self::new((0..n).collect(), coords)
    }

    pub(crate) fn from_parts_unchecked(frame_ids: Vec<i64>, coords: Array3<f64>) -> Self {
        debug_assert_eq!(frame_ids.len(), coords.len_of(Axis(0)));
        Self { frame_ids, coords }
    }

    pub fn frame_ids(&self) -> &[i64] {
        &self.frame_ids
    }

    pub fn coords(&self) -> ArrayView3<'_, f64> {
        self.coords.view()
    }

    pub fn into_coords(self) -> Array3<f64> {
        self.coords
    }

    pub fn frames(&self) -> usize {
        self.coords.len_of(Axis(0))
    }

    pub fn joints(&self) -> usize {
        self.coords.len_of(Axis(1))
    }

    pub fn dim(&self) -> usize {
        self.coords.len_of(Axis(2))
    }

    fn require_3d(&self) -> Result<()> {
        if self.dim() != 3 {
            return Err(Error::Shape(format!(
                "expected 3D coordinates, got D={}",
                self.dim()
            )));
        }
        Ok(())
    }
}

/// Per-frame positions of each part root relative to the body root, N×P×3 in
/// layout part order.
#[derive(Debug, Clone, PartialEq)]
pub struct RootOffsets {
    parts: Vec<PartName>,
    offsets: Array3<f64>,
}

impl RootOffsets {
    pub fn new(parts: Vec<PartName>, offsets: Array3<f64>) -> Result<Self> {
        if offsets.len_of(Axis(1)) != parts.len() || offsets.len_of(Axis(2)) != 3 {
            return Err(Error::Shape(format!(
                "offsets of shape {:?} for {} parts",
                offsets.shape(),
                parts.len()
            )));
        }
        Ok(Self { parts, offsets })
    }

    pub fn parts(&self) -> &[PartName] {
        &self.parts
    }

    pub fn frames(&self) -> usize {
        self.offsets.len_of(Axis(0))
    }

    pub fn array(&self) -> ArrayView3<'_, f64> {
        self.offsets.view()
    }

    pub fn get(&self, frame: usize, part: PartName) -> Option<[f64; 3]> {
        let p = self.parts.iter().position(|&n| n == part)?;
        let row = self.offsets.slice(ndarray::s![frame, p, ..]);
        Some([row[0], row[1], row[2]])
    }
}

pub type PartSequences = BTreeMap<PartName, PoseSequence>;

fn check_joints(seq: &PoseSequence, layout: &SkeletonLayout) -> Result<()> {
    if seq.joints() != layout.total_joints() {
        return Err(Error::JointCount {
            expected: layout.total_joints(),
            actual: seq.joints(),
        });
    }
    Ok(())
}

/// Splits a whole-body sequence into one sequence per part.
pub fn split_parts(seq: &PoseSequence, layout: &SkeletonLayout) -> Result<PartSequences> {
    check_joints(seq, layout)?;
    Ok(layout
        .parts()
        .iter()
        .map(|part| {
            let coords = seq.coords.select(Axis(1), &part.joint_indices);
            (
                part.name,
                PoseSequence::from_parts_unchecked(seq.frame_ids.clone(), coords),
            )
        })
        .collect())
}

/// offset[frame][part] = coords[frame][part root] − coords[frame][body root].
pub fn compute_root_offsets(seq3d: &PoseSequence, layout: &SkeletonLayout) -> Result<RootOffsets> {
    seq3d.require_3d()?;
    check_joints(seq3d, layout)?;
    let n = seq3d.frames();
    let body_root = layout.body_root();
    let mut offsets = Array3::zeros((n, layout.parts().len(), 3));
    for f in 0..n {
        for (p, part) in layout.parts().iter().enumerate() {
            for d in 0..3 {
                offsets[[f, p, d]] =
                    seq3d.coords[[f, part.root_index, d]] - seq3d.coords[[f, body_root, d]];
            }
        }
    }
    RootOffsets::new(layout.parts().iter().map(|p| p.name).collect(), offsets)
}

/// Expresses every part relative to its own root joint.
pub fn shift_to_part_frames(
    seq3d: &PoseSequence,
    layout: &SkeletonLayout,
) -> Result<(PartSequences, RootOffsets)> {
    seq3d.require_3d()?;
    check_joints(seq3d, layout)?;
    let n = seq3d.frames();
    let mut local = PartSequences::new();
    for part in layout.parts() {
        let mut coords = Array3::zeros((n, part.len(), 3));
        for f in 0..n {
            for (k, &j) in part.joint_indices.iter().enumerate() {
                for d in 0..3 {
                    coords[[f, k, d]] =
                        seq3d.coords[[f, j, d]] - seq3d.coords[[f, part.root_index, d]];
                }
            }
        }
        local.insert(
            part.name,
            PoseSequence::from_parts_unchecked(seq3d.frame_ids.clone(), coords),
        );
    }
    Ok((local, compute_root_offsets(seq3d, layout)?))
}

/// Reads every part root off a body part expressed in its local frame.
pub fn derive_root_offsets_from_body(
    body_local: &PoseSequence,
    layout: &SkeletonLayout,
) -> Result<RootOffsets> {
    body_local.require_3d()?;
    let body = layout.body();
    if body_local.joints() != body.len() {
        return Err(Error::JointCount {
            expected: body.len(),
            actual: body_local.joints(),
        });
    }
    let n = body_local.frames();
    let mut offsets = Array3::zeros((n, layout.parts().len(), 3));
    for (p, part) in layout.parts().iter().enumerate() {
        if part.name == PartName::Body {
            continue;
        }
        let k = body.position_of(part.root_index).ok_or_else(|| {
            Error::Layout(format!(
                "root {} of part `{}` is not a body joint",
                part.root_index, part.name
            ))
        })?;
        for f in 0..n {
            for d in 0..3 {
                offsets[[f, p, d]] = body_local.coords[[f, k, d]];
            }
        }
    }
    RootOffsets::new(layout.parts().iter().map(|p| p.name).collect(), offsets)
}

/// Places every local part at its root offset and reassembles the whole body.
pub fn reconstruct_whole_body(
    local_parts: &PartSequences,
    offsets: &RootOffsets,
    layout: &SkeletonLayout,
) -> Result<PoseSequence> {
    let body = local_parts
        .get(&PartName::Body)
        .ok_or_else(|| Error::Shape("missing part `body`".into()))?;
    let n = body.frames();
    if offsets.frames() != n {
        return Err(Error::Shape(format!(
            "{} offset frames for {n} pose frames",
            offsets.frames()
        )));
    }
    let mut coords = Array3::zeros((n, layout.total_joints(), 3));
    for part in layout.parts() {
        let seq = local_parts
            .get(&part.name)
            .ok_or_else(|| Error::Shape(format!("missing part `{}`", part.name)))?;
        if seq.frames() != n {
            return Err(Error::Shape(format!(
                "part `{}` has {} frames, expected {n}",
                part.name,
                seq.frames()
            )));
        }
        if seq.joints() != part.len() || seq.dim() != 3 {
            return Err(Error::Shape(format!(
                "part `{}` has shape {:?}, expected [{n}, {}, 3]",
                part.name,
                seq.coords.shape(),
                part.len()
            )));
        }
        let p = offsets
            .parts()
            .iter()
            .position(|&name| name == part.name)
            .ok_or_else(|| Error::Shape(format!("no offsets for part `{}`", part.name)))?;
        for f in 0..n {
            for (k, &j) in part.joint_indices.iter().enumerate() {
                for d in 0..3 {
                    coords[[f, j, d]] = seq.coords[[f, k, d]] + offsets.offsets[[f, p, d]];
                }
            }
        }
    }
    Ok(PoseSequence::from_parts_unchecked(
        body.frame_ids.clone(),
        coords,
    ))
}

/// Translates every frame so the body root sits at the origin.
pub fn center_on_root(seq3d: &PoseSequence, layout: &SkeletonLayout) -> Result<PoseSequence> {
    seq3d.require_3d()?;
    check_joints(seq3d, layout)?;
    let root = layout.body_root();
    let mut coords = seq3d.coords.clone();
    for mut frame in coords.axis_iter_mut(Axis(0)) {
        let r = frame.row(root).to_owned();
        for mut joint in frame.axis_iter_mut(Axis(0)) {
            joint -= &r;
        }
    }
    Ok(PoseSequence::from_parts_unchecked(
        seq3d.frame_ids.clone(),
        coords,
    ))
}
