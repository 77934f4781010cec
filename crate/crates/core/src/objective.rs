//! Training losses, MPJPE evaluation metrics and hypothesis selection.

use ndarray::{Array3, ArrayView3, Axis, Zip};
use serde::{Deserialize, Serialize, Serializer};

use crate::diffusion::HypothesisSet;
use crate::error::{Error, Result};
use crate::skeleton::{PartName, PartSequences, PoseSequence, RootOffsets, SkeletonLayout};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Mpjpe,
    Mse,
}

fn same_shape(a: &ArrayView3<'_, f64>, b: &ArrayView3<'_, f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs ground truth {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Mean over frames and joints of the per-joint Euclidean error.
pub fn mpjpe(pred: ArrayView3<'_, f64>, gt: ArrayView3<'_, f64>) -> Result<f64> {
    same_shape(&pred, &gt)?;
    let (n, j, _) = pred.dim();
    if n * j == 0 {
        return Err(Error::Shape("empty pose tensor".into()));
    }
    let total: f64 = pred
        .lanes(Axis(2))
        .into_iter()
        .zip(gt.lanes(Axis(2)))
        .map(|(p, g)| {
            p.iter()
                .zip(g)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    Ok(total / (n * j) as f64)
}

/// Mean over all components of the squared difference.
pub fn mse(pred: ArrayView3<'_, f64>, gt: ArrayView3<'_, f64>) -> Result<f64> {
    same_shape(&pred, &gt)?;
    if pred.is_empty() {
        return Err(Error::Shape("empty pose tensor".into()));
    }
    let total = Zip::from(&pred)
        .and(&gt)
        .fold(0.0, |acc, &a, &b| acc + (a - b) * (a - b));
    Ok(total / pred.len() as f64)
}

pub fn loss(kind: LossKind, pred: ArrayView3<'_, f64>, gt: ArrayView3<'_, f64>) -> Result<f64> {
    match kind {
        LossKind::Mpjpe => mpjpe(pred, gt),
        LossKind::Mse => mse(pred, gt),
    }
}

fn concat_parts(
    parts: &PartSequences,
    offsets: Option<&RootOffsets>,
    layout: &SkeletonLayout,
) -> Result<Array3<f64>> {
    let mut views = Vec::with_capacity(layout.parts().len());
    let mut shifted = Vec::new();
    for part in layout.parts() {
        let seq = parts
            .get(&part.name)
            .ok_or_else(|| Error::Shape(format!("missing part `{}`", part.name)))?;
        if seq.joints() != part.len() || seq.dim() != 3 {
            return Err(Error::Shape(format!(
                "part `{}` has {} joints of dimension {}, expected {} of dimension 3",
                part.name,
                seq.joints(),
                seq.dim(),
                part.len()
            )));
        }
        match offsets {
            Some(off) => {
                if off.frames() != seq.frames() {
                    return Err(Error::Shape(format!(
                        "{} offset frames for part `{}` with {} frames",
                        off.frames(),
                        part.name,
                        seq.frames()
                    )));
                }
                let mut c = seq.coords().to_owned();
                for (f, mut frame) in c.axis_iter_mut(Axis(0)).enumerate() {
                    let r = off.get(f, part.name).ok_or_else(|| {
                        Error::Shape(format!("no offsets for part `{}`", part.name))
                    })?;
                    for mut joint in frame.axis_iter_mut(Axis(0)) {
                        for d in 0..3 {
                            joint[d] += r[d];
                        }
                    }
                }
                shifted.push(c);
            }
            None => views.push(seq.coords()),
        }
    }
    let views: Vec<_> = if offsets.is_some() {
        shifted.iter().map(|a| a.view()).collect()
    } else {
        views
    };
    ndarray::concatenate(Axis(1), &views).map_err(|e| Error::Shape(e.to_string()))
}

/// ℓ over all parts concatenated along the joint axis in layout order.
pub fn part_loss(
    pred_parts: &PartSequences,
    gt_parts: &PartSequences,
    layout: &SkeletonLayout,
    kind: LossKind,
) -> Result<f64> {
    let pred = concat_parts(pred_parts, None, layout)?;
    let gt = concat_parts(gt_parts, None, layout)?;
    loss(kind, pred.view(), gt.view())
}

/// ℓ after moving each side's local parts to the whole-body frame with its
/// own root offsets.
pub fn wb_loss(
    pred_parts: &PartSequences,
    pred_offsets: &RootOffsets,
    gt_parts: &PartSequences,
    gt_offsets: &RootOffsets,
    layout: &SkeletonLayout,
    kind: LossKind,
) -> Result<f64> {
    let pred = concat_parts(pred_parts, Some(pred_offsets), layout)?;
    let gt = concat_parts(gt_parts, Some(gt_offsets), layout)?;
    loss(kind, pred.view(), gt.view())
}

fn check_wb(pred: &PoseSequence, gt: &PoseSequence, layout: &SkeletonLayout) -> Result<()> {
    if pred.coords().shape() != gt.coords().shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.coords().shape(),
            gt.coords().shape()
        )));
    }
    if pred.dim() != 3 {
        return Err(Error::Shape("metrics need 3D poses".into()));
    }
    if pred.joints() != layout.total_joints() {
        return Err(Error::JointCount {
            expected: layout.total_joints(),
            actual: pred.joints(),
        });
    }
    Ok(())
}

/// Sum of per-joint errors over `joints`, each side aligned on `root` per frame.
fn aligned_error_sum(pred: &PoseSequence, gt: &PoseSequence, joints: &[usize], root: usize) -> f64 {
    let (p, g) = (pred.coords(), gt.coords());
    let mut total = 0.0;
    for f in 0..pred.frames() {
        for &j in joints {
            let mut sq = 0.0;
            for d in 0..3 {
                let e = (p[[f, j, d]] - p[[f, root, d]]) - (g[[f, j, d]] - g[[f, root, d]]);
                sq += e * e;
            }
            total += sq.sqrt();
        }
    }
    total
}

/// Whole-body MPJPE after moving the predicted body root onto the true one.
pub fn metric_wb(pred: &PoseSequence, gt: &PoseSequence, layout: &SkeletonLayout) -> Result<f64> {
    check_wb(pred, gt, layout)?;
    let joints: Vec<usize> = (0..layout.total_joints()).collect();
    let total = aligned_error_sum(pred, gt, &joints, layout.body_root());
    Ok(total / (pred.frames() * joints.len()) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricPart {
    Body,
    Face,
    Hands,
}

impl MetricPart {
    pub const ALL: [MetricPart; 3] = [MetricPart::Body, MetricPart::Face, MetricPart::Hands];

    fn members(self) -> &'static [PartName] {
        match self {
            MetricPart::Body => &[PartName::Body],
            MetricPart::Face => &[PartName::Face],
            MetricPart::Hands => &[PartName::LeftHand, PartName::RightHand],
        }
    }
}

/// MPJPE over one part's joints, each part aligned on its own root. Hands pool
/// both hands, each aligned to its wrist.
pub fn metric_part(
    pred: &PoseSequence,
    gt: &PoseSequence,
    layout: &SkeletonLayout,
    part: MetricPart,
) -> Result<f64> {
    check_wb(pred, gt, layout)?;
    let mut total = 0.0;
    let mut count = 0;
    for &name in part.members() {
        let spec = layout
            .part(name)
            .ok_or_else(|| Error::Layout(format!("layout has no part `{name}`")))?;
        total += aligned_error_sum(pred, gt, &spec.joint_indices, spec.root_index);
        count += spec.len();
    }
    Ok(total / (pred.frames() * count) as f64)
}

/// Mean of the body, face and hands metrics.
pub fn metric_pb(pred: &PoseSequence, gt: &PoseSequence, layout: &SkeletonLayout) -> Result<f64> {
    let mut sum = 0.0;
    for part in MetricPart::ALL {
        sum += metric_part(pred, gt, layout, part)?;
    }
    Ok(sum / 3.0)
}

/// Element-wise mean of all hypotheses.
pub fn aggregate_hypotheses(hyps: &HypothesisSet) -> Result<PoseSequence> {
    let first = hyps
        .hypotheses
        .first()
        .ok_or_else(|| Error::Shape("empty hypothesis set".into()))?;
    let mut sum = Array3::<f64>::zeros(first.coords().raw_dim());
    for h in &hyps.hypotheses {
        sum += &h.coords();
    }
    sum /= hyps.len() as f64;
    PoseSequence::new(first.frame_ids().to_vec(), sum)
}

/// Index and value of the hypothesis minimizing `metric`; ties go to the
/// lowest index.
pub fn select_best<F>(
    hyps: &HypothesisSet,
    gt: &PoseSequence,
    mut metric: F,
) -> Result<(usize, f64)>
where
    F: FnMut(&PoseSequence, &PoseSequence) -> Result<f64>,
{
    let mut best: Option<(usize, f64)> = None;
    for (i, h) in hyps.hypotheses.iter().enumerate() {
        let v = metric(h, gt)?;
        if best.is_none_or(|(_, b)| v < b) {
            best = Some((i, v));
        }
    }
    best.ok_or_else(|| Error::Shape("empty hypothesis set".into()))
}

fn round3<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_f64((v * 1000.0).round() / 1000.0)
}

/// WB/PB/Body/Face/Hands values in millimeters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricValues {
    #[serde(serialize_with = "round3")]
    pub wb: f64,
    #[serde(serialize_with = "round3")]
    pub pb: f64,
    #[serde(serialize_with = "round3")]
    pub body: f64,
    #[serde(serialize_with = "round3")]
    pub face: f64,
    #[serde(serialize_with = "round3")]
    pub hands: f64,
}

impl MetricValues {
    /// Builds values from WB and the part columns; PB is always their mean.
    pub fn from_parts(wb: f64, body: f64, face: f64, hands: f64) -> Self {
        Self {
            wb,
            pb: (body + face + hands) / 3.0,
            body,
            face,
            hands,
        }
    }

    pub fn compute(
        pred: &PoseSequence,
        gt: &PoseSequence,
        layout: &SkeletonLayout,
    ) -> Result<Self> {
        Ok(Self::from_parts(
            metric_wb(pred, gt, layout)?,
            metric_part(pred, gt, layout, MetricPart::Body)?,
            metric_part(pred, gt, layout, MetricPart::Face)?,
            metric_part(pred, gt, layout, MetricPart::Hands)?,
        ))
    }
}

/// P-Best (per-metric minimum over hypotheses) and P-Agg (metrics of the mean
/// hypothesis) for one window.
pub fn window_metrics(
    hyps: &HypothesisSet,
    gt: &PoseSequence,
    layout: &SkeletonLayout,
) -> Result<(MetricValues, MetricValues)> {
    let per_hyp = hyps
        .hypotheses
        .iter()
        .map(|h| MetricValues::compute(h, gt, layout))
        .collect::<Result<Vec<_>>>()?;
    let min = |f: fn(&MetricValues) -> f64| per_hyp.iter().map(f).fold(f64::INFINITY, f64::min);
    let best = MetricValues::from_parts(
        min(|m| m.wb),
        min(|m| m.body),
        min(|m| m.face),
        min(|m| m.hands),
    );
    let agg = MetricValues::compute(&aggregate_hypotheses(hyps)?, gt, layout)?;
    Ok((best, agg))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportSettings {
    #[serde(rename = "N")]
    pub frames: usize,
    #[serde(rename = "H")]
    pub hypotheses: usize,
    #[serde(rename = "K")]
    pub iterations: usize,
    pub windows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub settings: ReportSettings,
    pub p_best: MetricValues,
    pub p_agg: MetricValues,
    /// Resolved configuration the report was produced with.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

impl MetricsReport {
    /// Averages per-window (P-Best, P-Agg) pairs.
    pub fn from_windows(
        frames: usize,
        hypotheses: usize,
        iterations: usize,
        windows: &[(MetricValues, MetricValues)],
    ) -> Result<Self> {
        if windows.is_empty() {
            return Err(Error::Shape("no windows to report".into()));
        }
        let mean = |pick: fn(&(MetricValues, MetricValues)) -> &MetricValues| {
            let n = windows.len() as f64;
            let s =
                |f: fn(&MetricValues) -> f64| windows.iter().map(|w| f(pick(w))).sum::<f64>() / n;
            MetricValues::from_parts(s(|m| m.wb), s(|m| m.body), s(|m| m.face), s(|m| m.hands))
        };
        Ok(Self {
            settings: ReportSettings {
                frames,
                hypotheses,
                iterations,
                windows: windows.len(),
            },
            p_best: mean(|w| &w.0),
            p_agg: mean(|w| &w.1),
            config: None,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format {
            kind: "report",
            message: e.to_string(),
        })
    }

    /// Aligned text table with one row per protocol.
    pub fn table(&self) -> String {
        let mut out = format!(
            "N={} H={} K={} windows={}\n{:<8}{:>10}{:>10}{:>10}{:>10}{:>10}\n",
            self.settings.frames,
            self.settings.hypotheses,
            self.settings.iterations,
            self.settings.windows,
            "",
            "WB",
            "PB",
            "Body",
            "Face",
            "Hands"
        );
        for (name, m) in [("P-Best", &self.p_best), ("P-Agg", &self.p_agg)] {
            out.push_str(&format!(
                "{name:<8}{:>10.3}{:>10.3}{:>10.3}{:>10.3}{:>10.3}\n",
                m.wb, m.pb, m.body, m.face, m.hands
            ));
        }
        out
    }
}
