//! Zero-shot test variants: re-sample dynamics (armature, density, damping,
//! gear) or kinematics (limb shape, joint angles) of an existing robot while
//! keeping its tree structure fixed.

use crate::config::{joint_angle_set_rad, SpaceConfig};
use crate::morphology::{serialize_morphology, MorphologyGraph, NodeKind};
use crate::rng::stream;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Variation families. Dynamics kinds re-sample physical constants; kinematic
/// kinds re-sample shape or joint-range parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariationKind {
    Armature,
    Density,
    Damping,
    Gear,
    LimbShape,
    JointAngle,
}

impl VariationKind {
    pub const ALL: [VariationKind; 6] = [
        VariationKind::Armature,
        VariationKind::Density,
        VariationKind::Damping,
        VariationKind::Gear,
        VariationKind::LimbShape,
        VariationKind::JointAngle,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            VariationKind::Armature => "armature",
            VariationKind::Density => "density",
            VariationKind::Damping => "damping",
            VariationKind::Gear => "gear",
            VariationKind::LimbShape => "limb_shape",
            VariationKind::JointAngle => "joint_angle",
        }
    }

    pub fn parse(s: &str) -> Option<VariationKind> {
        VariationKind::ALL.iter().copied().find(|k| k.as_str() == s)
    }

    pub fn is_dynamics(self) -> bool {
        matches!(
            self,
            VariationKind::Armature
                | VariationKind::Density
                | VariationKind::Damping
                | VariationKind::Gear
        )
    }
}

/// Sampling ranges for the dynamics variations: armature and damping are
/// re-drawn absolutely; gear and density are scaled multiplicatively.
pub const ARMATURE_RANGE: [f64; 2] = [0.1, 2.0];
pub const DAMPING_RANGE: [f64; 2] = [0.01, 5.0];
pub const GEAR_SCALE: [f64; 2] = [0.8, 1.2];
pub const DENSITY_SCALE: [f64; 2] = [0.8, 1.2];

/// Minimum fraction of the original joint range that a replacement range must
/// overlap.
pub const JOINT_ANGLE_MIN_OVERLAP: f64 = 0.5;

#[derive(Debug, Error)]
pub enum VariationError {
    #[error("{0}")]
    Morphology(#[from] crate::morphology::MorphologyError),
    #[error("no replacement range overlaps >= 50% of joint {joint} on edge {edge}")]
    NoOverlappingRange { edge: usize, joint: usize },
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

/// Re-sample one dynamics property of every joint (armature, damping, gear)
/// or every module (density). The kinematic tree is untouched.
pub fn perturb_dynamics(
    g: &MorphologyGraph,
    kind: VariationKind,
    rng: &mut impl Rng,
) -> Result<MorphologyGraph, VariationError> {
    assert!(kind.is_dynamics(), "kinematic kind passed to perturb_dynamics");
    let mut out = g.clone();
    match kind {
        VariationKind::Armature => {
            for e in &mut out.edges {
                for j in &mut e.joints {
                    j.armature = rng.gen_range(ARMATURE_RANGE[0]..ARMATURE_RANGE[1]);
                }
            }
        }
        VariationKind::Damping => {
            for e in &mut out.edges {
                for j in &mut e.joints {
                    j.damping = rng.gen_range(DAMPING_RANGE[0]..DAMPING_RANGE[1]);
                }
            }
        }
        VariationKind::Gear => {
            for e in &mut out.edges {
                for j in &mut e.joints {
                    j.gear *= rng.gen_range(GEAR_SCALE[0]..GEAR_SCALE[1]);
                }
            }
        }
        VariationKind::Density => {
            for n in &mut out.nodes {
                n.density *= rng.gen_range(DENSITY_SCALE[0]..DENSITY_SCALE[1]);
            }
        }
        _ => unreachable!(),
    }
    Ok(out)
}

/// Overlap between two intervals as a fraction of the first one's width.
pub fn overlap_fraction(original: (f64, f64), candidate: (f64, f64)) -> f64 {
    let width = original.1 - original.0;
    if width <= 0.0 {
        return 0.0;
    }
    let lo = original.0.max(candidate.0);
    let hi = original.1.min(candidate.1);
    ((hi - lo).max(0.0)) / width
}

/// Replacement ranges admissible for `original` under the overlap rule.
pub fn admissible_ranges(original: (f64, f64)) -> Vec<(f64, f64)> {
    joint_angle_set_rad()
        .into_iter()
        .filter(|&cand| overlap_fraction(original, cand) >= JOINT_ANGLE_MIN_OVERLAP)
        .collect()
}

/// Re-sample kinematics: every limb's shape, or every joint's angular range
/// (restricted to vocabulary entries overlapping at least half of the
/// original range).
pub fn perturb_kinematics(
    g: &MorphologyGraph,
    kind: VariationKind,
    space: &SpaceConfig,
    rng: &mut impl Rng,
) -> Result<MorphologyGraph, VariationError> {
    assert!(!kind.is_dynamics(), "dynamics kind passed to perturb_kinematics");
    let mut out = g.clone();
    match kind {
        VariationKind::LimbShape => {
            for n in &mut out.nodes {
                if n.kind == NodeKind::Cylinder {
                    n.radius = rng.gen_range(space.limb_radius[0]..space.limb_radius[1]);
                    n.length = rng.gen_range(space.limb_length[0]..space.limb_length[1]);
                }
            }
        }
        VariationKind::JointAngle => {
            for (ei, e) in out.edges.iter_mut().enumerate() {
                for (ji, j) in e.joints.iter_mut().enumerate() {
                    let candidates = admissible_ranges((j.range_lo, j.range_hi));
                    let &(lo, hi) = candidates.choose(rng).ok_or(
                        VariationError::NoOverlappingRange { edge: ei, joint: ji },
                    )?;
                    j.range_lo = lo;
                    j.range_hi = hi;
                }
            }
        }
        _ => unreachable!(),
    }
    Ok(out)
}

/// Apply a variation of any kind.
pub fn perturb(
    g: &MorphologyGraph,
    kind: VariationKind,
    space: &SpaceConfig,
    rng: &mut impl Rng,
) -> Result<MorphologyGraph, VariationError> {
    if kind.is_dynamics() {
        perturb_dynamics(g, kind, rng)
    } else {
        perturb_kinematics(g, kind, space, rng)
    }
}

/// One entry of a generated variant suite.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantEntry {
    pub source: String,
    pub kind: VariationKind,
    pub index: usize,
    pub seed: u64,
    pub path: String,
}

/// Manifest written next to the variant files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteManifest {
    pub master_seed: u64,
    pub variants_per_robot: usize,
    pub entries: Vec<VariantEntry>,
}

/// Build the variant suite for `robots`: for every robot and every requested
/// kind, `variants_per_robot` perturbed copies, each written as a morphology
/// file under `out_dir`. Deterministic given `master_seed`.
pub fn build_variant_suite(
    robots: &[(String, MorphologyGraph)],
    kinds: &[VariationKind],
    variants_per_robot: usize,
    space: &SpaceConfig,
    master_seed: u64,
    out_dir: &std::path::Path,
) -> Result<SuiteManifest, VariationError> {
    std::fs::create_dir_all(out_dir)?;
    let mut entries = Vec::new();
    for (ri, (name, graph)) in robots.iter().enumerate() {
        for &kind in kinds {
            for vi in 0..variants_per_robot {
                // Independent stream per (robot, kind, variant).
                let seed_index =
                    (ri as u64) << 32 | (kind as u64) << 16 | vi as u64;
                let mut rng = stream(master_seed, "variant", seed_index);
                let mut variant = perturb(graph, kind, space, &mut rng)?;
                variant.name = format!("{name}_{}_{vi}", kind.as_str());
                let file = format!("{}.json", variant.name);
                let path = out_dir.join(&file);
                std::fs::write(&path, serialize_morphology(&variant, space)?)?;
                entries.push(VariantEntry {
                    source: name.clone(),
                    kind,
                    index: vi,
                    seed: seed_index,
                    path: file,
                });
            }
        }
    }
    Ok(SuiteManifest {
        master_seed,
        variants_per_robot,
        entries,
    })
}
