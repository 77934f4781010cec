//! The lifting model: which parts are denoised by which network, in which
//! local frames.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::denoiser::{
    build_denoiser, count_parameters, denoise_predict, Denoiser, DenoiserConfig,
};
use crate::diffusion::{derive_seed, unit_joints, ConditionalDenoiser};
use crate::error::{Error, Result};
use crate::skeleton::{PartName, SkeletonLayout};

/// The four configurations of the component ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Part-local frames and one network per part (hands shared).
    Full,
    /// Part-local frames, one network for the whole body.
    ShiftOnly,
    /// Whole-body frame, one network per part.
    PartsOnly,
    /// Whole-body frame, one network for the whole body.
    Monolithic,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Monolithic,
        Variant::ShiftOnly,
        Variant::PartsOnly,
        Variant::Full,
    ];

    pub fn part_frames(self) -> bool {
        matches!(self, Variant::Full | Variant::ShiftOnly)
    }

    pub fn part_denoisers(self) -> bool {
        matches!(self, Variant::Full | Variant::PartsOnly)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::ShiftOnly => "shift_only",
            Variant::PartsOnly => "parts_only",
            Variant::Monolithic => "monolithic",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown model variant `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkRole {
    Body,
    Hands,
    Face,
    WholeBody,
}

impl NetworkRole {
    pub fn as_str(self) -> &'static str {
        match self {
            NetworkRole::Body => "body",
            NetworkRole::Hands => "hands",
            NetworkRole::Face => "face",
            NetworkRole::WholeBody => "whole_body",
        }
    }

    fn members(self) -> &'static [PartName] {
        match self {
            NetworkRole::Body => &[PartName::Body],
            NetworkRole::Hands => &[PartName::LeftHand, PartName::RightHand],
            NetworkRole::Face => &[PartName::Face],
            NetworkRole::WholeBody => &PartName::ALL,
        }
    }
}

/// Desk-scale widths for body, hands and face.
pub const DESK_CHANNELS: [usize; 3] = [32, 24, 20];
pub const DESK_DEPTH: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub depth: usize,
    /// Widths per network: `[body, hands, face]` for part denoisers,
    /// `[whole_body]` otherwise.
    pub channels: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Full,
            depth: DESK_DEPTH,
            channels: DESK_CHANNELS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub role: NetworkRole,
    pub denoiser: Denoiser,
}

/// A set of denoising networks plus the routing of parts to networks.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftingModel {
    variant: Variant,
    layout: SkeletonLayout,
    frame_layout: SkeletonLayout,
    units: Vec<Vec<PartName>>,
    unit_network: Vec<usize>,
    networks: Vec<Network>,
}

fn roles_for(variant: Variant, layout: &SkeletonLayout) -> Vec<NetworkRole> {
    if !variant.part_denoisers() {
        return vec![NetworkRole::WholeBody];
    }
    [NetworkRole::Body, NetworkRole::Hands, NetworkRole::Face]
        .into_iter()
        .filter(|r| r.members().iter().any(|&p| layout.part(p).is_some()))
        .collect()
}

impl LiftingModel {
    /// Freshly initialized networks for `variant`; `channels` lists widths in
    /// body, hands, face order (a single width for whole-body networks).
    pub fn build(
        layout: &SkeletonLayout,
        frames: usize,
        config: &ModelConfig,
        seed: u64,
    ) -> Result<Self> {
        let roles = roles_for(config.variant, layout);
        if roles.len() != config.channels.len() {
            return Err(Error::Config(format!(
                "variant `{}` needs {} channel widths, got {}",
                config.variant,
                roles.len(),
                config.channels.len()
            )));
        }
        let mut networks = Vec::with_capacity(roles.len());
        for (i, (&role, &channels)) in roles.iter().zip(&config.channels).enumerate() {
            let joints = Self::role_joints(layout, role)?;
            let cfg = DenoiserConfig::new(role.as_str(), joints, frames, channels, config.depth);
            networks.push(Network {
                role,
                denoiser: build_denoiser(cfg, derive_seed(seed, i as u64))?,
            });
        }
        Self::from_networks(layout, config.variant, networks)
    }

    fn role_joints(layout: &SkeletonLayout, role: NetworkRole) -> Result<usize> {
        let sizes: Vec<usize> = role
            .members()
            .iter()
            .filter_map(|&p| layout.part(p).map(|s| s.len()))
            .collect();
        match role {
            NetworkRole::WholeBody => Ok(layout.total_joints()),
            NetworkRole::Hands if sizes.windows(2).any(|w| w[0] != w[1]) => Err(Error::Layout(
                "the shared hand network needs both hands to have the same joint count".into(),
            )),
            _ => sizes.first().copied().ok_or_else(|| {
                Error::Layout(format!("layout has no parts for `{}`", role.as_str()))
            }),
        }
    }

    /// Reassembles a model from stored networks, checking they fit the layout.
    pub fn from_networks(
        layout: &SkeletonLayout,
        variant: Variant,
        networks: Vec<Network>,
    ) -> Result<Self> {
        let roles = roles_for(variant, layout);
        if networks.iter().map(|n| n.role).ne(roles.iter().copied()) {
            return Err(Error::Config(format!(
                "variant `{variant}` expects networks {:?}",
                roles.iter().map(|r| r.as_str()).collect::<Vec<_>>()
            )));
        }
        let frames = networks[0].denoiser.config().frames;
        for net in &networks {
            let cfg = net.denoiser.config();
            if cfg.joints != Self::role_joints(layout, net.role)? || cfg.frames != frames {
                return Err(Error::Shape(format!(
                    "network `{}` is built for {} joints × {} frames",
                    cfg.name, cfg.joints, cfg.frames
                )));
            }
        }
        let frame_layout = if variant.part_frames() {
            layout.clone()
        } else {
            layout.with_body_roots()
        };
        let (units, unit_network) = if variant.part_denoisers() {
            layout
                .parts()
                .iter()
                .map(|p| {
                    let net = networks
                        .iter()
                        .position(|n| n.role.members().contains(&p.name))
                        .expect("every part has a role");
                    (vec![p.name], net)
                })
                .unzip()
        } else {
            (
                vec![layout.parts().iter().map(|p| p.name).collect()],
                vec![0],
            )
        };
        Ok(Self {
            variant,
            layout: layout.clone(),
            frame_layout,
            units,
            unit_network,
            networks,
        })
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn layout(&self) -> &SkeletonLayout {
        &self.layout
    }

    pub fn frames(&self) -> usize {
        self.networks[0].denoiser.config().frames
    }

    pub fn depth(&self) -> usize {
        self.networks[0].denoiser.config().depth
    }

    pub fn networks(&self) -> &[Network] {
        &self.networks
    }

    pub fn networks_mut(&mut self) -> &mut [Network] {
        &mut self.networks
    }

    pub fn unit_network(&self, unit: usize) -> usize {
        self.unit_network[unit]
    }

    pub fn channels(&self) -> Vec<usize> {
        self.networks
            .iter()
            .map(|n| n.denoiser.config().channels)
            .collect()
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            depth: self.depth(),
            channels: self.channels(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.networks
            .iter()
            .map(|n| count_parameters(&n.denoiser))
            .sum()
    }

    /// Global joint indices for every unit.
    pub fn unit_joint_indices(&self) -> Vec<Vec<usize>> {
        self.units
            .iter()
            .map(|parts| unit_joints(&self.layout, parts).expect("units come from the layout"))
            .collect()
    }
}

impl ConditionalDenoiser for LiftingModel {
    fn frame_layout(&self) -> &SkeletonLayout {
        &self.frame_layout
    }

    fn units(&self) -> &[Vec<PartName>] {
        &self.units
    }

    fn predict(
        &self,
        unit: usize,
        t: usize,
        x2d: ArrayView3<'_, f64>,
        y_t: ArrayView3<'_, f64>,
    ) -> Result<Array3<f64>> {
        let net = self
            .unit_network
            .get(unit)
            .ok_or_else(|| Error::Config(format!("no network for unit {unit}")))?;
        denoise_predict(&self.networks[*net].denoiser, t, x2d, y_t)
    }
}

impl<T: ConditionalDenoiser + ?Sized> ConditionalDenoiser for &T {
    fn frame_layout(&self) -> &SkeletonLayout {
        (**self).frame_layout()
    }

    fn units(&self) -> &[Vec<PartName>] {
        (**self).units()
    }

    fn predict(
        &self,
        unit: usize,
        t: usize,
        x2d: ArrayView3<'_, f64>,
        y_t: ArrayView3<'_, f64>,
    ) -> Result<Array3<f64>> {
        (**self).predict(unit, t, x2d, y_t)
    }
}
