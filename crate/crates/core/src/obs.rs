//! Observation construction: per-module morphology and proprioception
//! features, zero-padding to a fixed token count, the global terrain profile,
//! and running normalization.
//!
//! Feature layout (fixed, version-stamped into checkpoints):
//!
//! Morphology row, 30 columns per token:
//!   [0..2)   module kind one-hot (sphere, cylinder)
//!   [2]      radius, [3] length, [4] density
//!   [5..9)   attach orientation quaternion (w, x, y, z)
//!   [9..12)  attach offset (x, y, z)
//!   [12..21) joint slot 0: present, axis xyz, range lo/hi, gear, armature, damping
//!   [21..30) joint slot 1: same
//!
//! Proprioception row, 17 columns per token:
//!   [0..3)   world position (x, 0, z) of the module center of mass
//!   [3..7)   orientation quaternion (w, x, y, z), rotation about the plane normal
//!   [7..10)  linear velocity (x, 0, z)
//!   [10..13) angular velocity (0, w, 0)
//!   [13..15) joint slot 0: angle, velocity
//!   [15..17) joint slot 1: angle, velocity
//!
//! Joint observations live on the child module of the edge; the root has no
//! parent joint and carries zeros in every slot.

use crate::morphology::{parent_edge_of, MorphologyGraph, NodeKind, TokenOrder};
use crate::sim::{quat_from_planar, RobotModel, SimState};
use crate::terrain::Heightfield;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Bump when the feature layout above changes; checkpoints refuse to load
/// across versions.
pub const OBS_LAYOUT_VERSION: u32 = 1;

pub const MORPH_WIDTH: usize = 30;
pub const PROPRIO_WIDTH: usize = 17;
pub const LOCAL_WIDTH: usize = MORPH_WIDTH + PROPRIO_WIDTH;

/// Column of the joint-present flag for a slot inside the morphology row.
pub fn morph_joint_slot_offset(slot: usize) -> usize {
    12 + slot * 9
}

/// Column of the joint angle for a slot inside the proprioception row.
pub fn proprio_joint_slot_offset(slot: usize) -> usize {
    13 + slot * 2
}

#[derive(Debug, Error)]
pub enum ObsError {
    #[error("{got} modules exceed the configured maximum of {n_max}")]
    TooManyModules { got: usize, n_max: usize },
    #[error("row counts differ: morphology {morph}, proprioception {proprio}")]
    RowMismatch { morph: usize, proprio: usize },
}

/// Fixed-size observation of one robot at one instant. Padded rows are
/// all-zero and masked out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationBundle {
    /// n_max x LOCAL_WIDTH, row-major.
    pub local: Vec<f64>,
    /// True where the token is a real module.
    pub mask: Vec<bool>,
    /// n_max x 2, true where the joint slot is populated.
    pub joint_mask: Vec<bool>,
    /// Terrain profile relative to the ground under the root.
    pub global: Vec<f64>,
    pub n_max: usize,
}

impl ObservationBundle {
    pub fn real_tokens(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn live_joints(&self) -> usize {
        self.joint_mask.iter().filter(|m| **m).count()
    }
}

/// Time-invariant morphology features in token order, one 30-wide row per
/// module.
pub fn build_morphology_features(g: &MorphologyGraph, order: &TokenOrder) -> Vec<Vec<f64>> {
    let parent_edge = parent_edge_of(g);
    order
        .0
        .iter()
        .map(|&i| {
            let node = &g.nodes[i];
            let mut row = vec![0.0; MORPH_WIDTH];
            match node.kind {
                NodeKind::Sphere => row[0] = 1.0,
                NodeKind::Cylinder => row[1] = 1.0,
            }
            row[2] = node.radius;
            row[3] = node.length;
            row[4] = node.density;
            row[5..9].copy_from_slice(&node.attach_orientation);
            row[9..12].copy_from_slice(&node.attach_offset);
            if let Some(ei) = parent_edge[i] {
                for (slot, joint) in g.edges[ei].joints.iter().enumerate().take(2) {
                    let base = morph_joint_slot_offset(slot);
                    row[base] = 1.0;
                    row[base + 1..base + 4].copy_from_slice(&joint.axis);
                    row[base + 4] = joint.range_lo;
                    row[base + 5] = joint.range_hi;
                    row[base + 6] = joint.gear;
                    row[base + 7] = joint.armature;
                    row[base + 8] = joint.damping;
                }
            }
            row
        })
        .collect()
}

/// Time-varying proprioception in token order, one 17-wide row per module.
pub fn build_proprioception(
    model: &RobotModel,
    state: &SimState,
    order: &TokenOrder,
) -> Vec<Vec<f64>> {
    order
        .0
        .iter()
        .map(|&i| {
            let pose = &state.poses[i];
            let mut row = vec![0.0; PROPRIO_WIDTH];
            row[0] = pose.com[0];
            row[2] = pose.com[1];
            row[3..7].copy_from_slice(&quat_from_planar(pose.angle));
            row[7] = pose.v_com[0];
            row[9] = pose.v_com[1];
            row[11] = pose.omega;
            for (slot, &j) in model.node_joints[i].iter().enumerate().take(2) {
                let base = proprio_joint_slot_offset(slot);
                row[base] = state.q[j];
                row[base + 1] = state.qd[j];
            }
            row
        })
        .collect()
}

/// Concatenate morphology and proprioception rows per token, pad with zero
/// rows to `n_max`, and derive the token and joint masks.
pub fn assemble_local_obs(
    s_m: &[Vec<f64>],
    s_p: &[Vec<f64>],
    n_max: usize,
) -> Result<(Vec<f64>, Vec<bool>, Vec<bool>), ObsError> {
    if s_m.len() != s_p.len() {
        return Err(ObsError::RowMismatch {
            morph: s_m.len(),
            proprio: s_p.len(),
        });
    }
    let n = s_m.len();
    if n > n_max {
        return Err(ObsError::TooManyModules { got: n, n_max });
    }
    let mut local = vec![0.0; n_max * LOCAL_WIDTH];
    let mut mask = vec![false; n_max];
    let mut joint_mask = vec![false; n_max * 2];
    for (t, (m, p)) in s_m.iter().zip(s_p).enumerate() {
        debug_assert_eq!(m.len(), MORPH_WIDTH);
        debug_assert_eq!(p.len(), PROPRIO_WIDTH);
        let row = &mut local[t * LOCAL_WIDTH..(t + 1) * LOCAL_WIDTH];
        row[..MORPH_WIDTH].copy_from_slice(m);
        row[MORPH_WIDTH..].copy_from_slice(p);
        mask[t] = true;
        for slot in 0..2 {
            joint_mask[t * 2 + slot] = m[morph_joint_slot_offset(slot)] != 0.0;
        }
    }
    Ok((local, mask, joint_mask))
}

/// Terrain heights at forward offsets from the root, relative to the ground
/// directly under the root.
pub fn build_global_obs(root_x: f64, terrain: &Heightfield, grid: &[f64]) -> Vec<f64> {
    let under = terrain.height_at(root_x);
    grid.iter()
        .map(|off| terrain.height_at(root_x + off) - under)
        .collect()
}

/// Build the complete observation bundle for the current state.
pub fn build_observation(
    g: &MorphologyGraph,
    model: &RobotModel,
    state: &SimState,
    terrain: &Heightfield,
    order: &TokenOrder,
    n_max: usize,
    grid: &[f64],
) -> Result<ObservationBundle, ObsError> {
    let s_m = build_morphology_features(g, order);
    let s_p = build_proprioception(model, state, order);
    let (local, mask, joint_mask) = assemble_local_obs(&s_m, &s_p, n_max)?;
    let root_x = state.poses[model.root].anchor[0];
    let global = build_global_obs(root_x, terrain, grid);
    Ok(ObservationBundle {
        local,
        mask,
        joint_mask,
        global,
        n_max,
    })
}

/// Streaming per-dimension mean/variance with clipping, updated one sample
/// row at a time (Welford). Padded rows must be excluded by the caller.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningNormalizer {
    pub mean: Vec<f64>,
    pub m2: Vec<f64>,
    pub count: f64,
    pub clip: f64,
}

impl RunningNormalizer {
    pub fn new(dim: usize, clip: f64) -> RunningNormalizer {
        RunningNormalizer {
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
            count: 0.0,
            clip,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn update_row(&mut self, row: &[f64]) {
        debug_assert_eq!(row.len(), self.mean.len());
        self.count += 1.0;
        for (i, &x) in row.iter().enumerate() {
            let delta = x - self.mean[i];
            self.mean[i] += delta / self.count;
            self.m2[i] += delta * (x - self.mean[i]);
        }
    }

    pub fn update(&mut self, rows: &[&[f64]]) {
        for row in rows {
            self.update_row(row);
        }
    }

    /// Population variance per dimension.
    pub fn variance(&self) -> Vec<f64> {
        if self.count < 1.0 {
            return vec![0.0; self.mean.len()];
        }
        self.m2.iter().map(|m2| m2 / self.count).collect()
    }

    /// clip((x - mean) / sqrt(var + 1e-8), -clip, clip). With no data yet this
    /// degenerates to clipping the raw value.
    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.mean.len());
        if self.count < 1.0 {
            for (o, &v) in out.iter_mut().zip(x) {
                *o = v.clamp(-self.clip, self.clip);
            }
            return;
        }
        for i in 0..x.len() {
            let var = self.m2[i] / self.count;
            let v = (x[i] - self.mean[i]) / (var + 1e-8).sqrt();
            out[i] = v.clamp(-self.clip, self.clip);
        }
    }

    pub fn apply_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.apply(x, &mut out);
        out
    }
}

/// Normalize a bundle for network input: per-token local rows (padded rows
/// included, they are masked downstream) and the global vector.
pub fn normalize_bundle(
    bundle: &ObservationBundle,
    local_norm: &RunningNormalizer,
    global_norm: &RunningNormalizer,
) -> (Vec<f64>, Vec<f64>) {
    let mut local = vec![0.0; bundle.local.len()];
    for t in 0..bundle.n_max {
        let row = &bundle.local[t * LOCAL_WIDTH..(t + 1) * LOCAL_WIDTH];
        local_norm.apply(row, &mut local[t * LOCAL_WIDTH..(t + 1) * LOCAL_WIDTH]);
    }
    let global = global_norm.apply_vec(&bundle.global);
    (local, global)
}
