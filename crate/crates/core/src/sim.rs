//! Deterministic planar reduced-coordinate locomotion simulator.
//!
//! The robot lives in the x-z plane. Generalized coordinates are the root
//! pose (x, z, pitch) plus one angle per hinge joint; every hinge acts about
//! the plane normal, and both joints of a two-joint edge stack as sequential
//! hinges with independent ranges and gears. The mass matrix is diagonal:
//! the root translation carries the total mass, the root pitch carries the
//! instantaneous moment of the module masses about the root, and each joint
//! carries its child-subtree mass times the squared limb length plus the
//! joint armature. Forces map to generalized coordinates through the exact
//! point Jacobians of the tree. Ground contact is a penalty spring with
//! viscous friction capped by a Coulomb cone, applied at module endpoints.
//! Integration is semi-implicit Euler with implicit joint damping.

use crate::config::{SimParams, Task, TaskConfig};
use crate::morphology::{children_of, MorphologyGraph, NodeKind};
use crate::rng::stream;
use crate::terrain::{generate_terrain, Heightfield};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("action length {got} does not match joint count {expected}")]
    ActionLength { expected: usize, got: usize },
    #[error("non-finite action component at index {0}")]
    NonFiniteAction(usize),
    #[error("simulation state became non-finite at step {0}")]
    NonFiniteState(usize),
    #[error("step called on a terminal state")]
    Terminal,
}

/// One hinge joint in env order (edge order, then slot order within an edge).
#[derive(Debug, Clone)]
pub struct JointInfo {
    pub child_node: usize,
    pub range_lo: f64,
    pub range_hi: f64,
    pub gear: f64,
    pub armature: f64,
    pub damping: f64,
    /// Diagonal inertia: child-subtree mass x squared limb length + armature.
    pub inertia: f64,
}

/// Precomputed per-robot constants.
#[derive(Debug, Clone)]
pub struct RobotModel {
    pub kinds: Vec<NodeKind>,
    pub radii: Vec<f64>,
    pub lengths: Vec<f64>,
    pub masses: Vec<f64>,
    pub total_mass: f64,
    /// Planar rotation of each module relative to its parent (from the attach
    /// quaternion, exact for rotations about the plane normal).
    pub attach_angles: Vec<f64>,
    /// Attachment point in the parent frame, (x, z) components.
    pub attach_offsets: Vec<[f64; 2]>,
    pub parent: Vec<Option<usize>>,
    /// Nodes ordered parents-first (depth-first in declaration order).
    pub topo: Vec<usize>,
    pub joints: Vec<JointInfo>,
    /// Global joint indices of each node's parent edge, in slot order.
    pub node_joints: Vec<Vec<usize>>,
    /// Joint indices on the path from the root to each node (inclusive).
    pub path_joints: Vec<Vec<usize>>,
    root_own_inertia: f64,
    pub root: usize,
}

/// Rotation angle about the plane normal encoded in a quaternion; exact when
/// the quaternion is a pure rotation about that axis.
pub fn planar_angle(q: [f64; 4]) -> f64 {
    let [w, x, y, z] = q;
    (2.0 * (w * y + x * z)).atan2(1.0 - 2.0 * (x * x + y * y))
}

/// Quaternion for a rotation of `angle` about the plane normal.
pub fn quat_from_planar(angle: f64) -> [f64; 4] {
    [(angle / 2.0).cos(), 0.0, (angle / 2.0).sin(), 0.0]
}

impl RobotModel {
    pub fn new(g: &MorphologyGraph) -> RobotModel {
        let n = g.nodes.len();
        let children = children_of(g);
        let mut topo = Vec::with_capacity(n);
        let mut stack = vec![g.root_index];
        while let Some(i) = stack.pop() {
            topo.push(i);
            for &c in children[i].iter().rev() {
                stack.push(c);
            }
        }

        let masses: Vec<f64> = g.nodes.iter().map(|nd| nd.mass()).collect();
        let mut subtree_mass = masses.clone();
        for &i in topo.iter().rev() {
            for &c in &children[i] {
                subtree_mass[i] += subtree_mass[c];
            }
        }

        let mut parent = vec![None; n];
        let mut joints = Vec::new();
        let mut node_joints = vec![Vec::new(); n];
        for e in &g.edges {
            parent[e.child] = Some(e.parent);
            for j in &e.joints {
                let limb_len = g.nodes[e.child].length.max(0.05);
                joints.push(JointInfo {
                    child_node: e.child,
                    range_lo: j.range_lo,
                    range_hi: j.range_hi,
                    gear: j.gear,
                    armature: j.armature,
                    damping: j.damping,
                    inertia: subtree_mass[e.child] * limb_len * limb_len + j.armature,
                });
                node_joints[e.child].push(joints.len() - 1);
            }
        }

        let mut path_joints = vec![Vec::new(); n];
        for &i in &topo {
            if let Some(p) = parent[i] {
                let mut path = path_joints[p].clone();
                path.extend(&node_joints[i]);
                path_joints[i] = path;
            }
        }

        let root = g.root_index;
        let root_own_inertia = 0.4 * masses[root] * g.nodes[root].radius * g.nodes[root].radius;

        RobotModel {
            kinds: g.nodes.iter().map(|nd| nd.kind).collect(),
            radii: g.nodes.iter().map(|nd| nd.radius).collect(),
            lengths: g.nodes.iter().map(|nd| nd.length).collect(),
            masses,
            total_mass: subtree_mass[root],
            attach_angles: g
                .nodes
                .iter()
                .map(|nd| planar_angle(nd.attach_orientation))
                .collect(),
            attach_offsets: g
                .nodes
                .iter()
                .map(|nd| [nd.attach_offset[0], nd.attach_offset[2]])
                .collect(),
            parent,
            topo,
            joints,
            node_joints,
            path_joints,
            root_own_inertia,
            root,
        }
    }

    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }
}

/// World pose and velocity of one module, refreshed after every step.
#[derive(Debug, Clone, Copy, Default)]
pub struct ModulePose {
    pub anchor: [f64; 2],
    pub angle: f64,
    pub com: [f64; 2],
    pub v_anchor: [f64; 2],
    pub v_com: [f64; 2],
    pub omega: f64,
}

/// Full simulator state in generalized coordinates plus cached world poses.
#[derive(Debug, Clone)]
pub struct SimState {
    pub x: f64,
    pub z: f64,
    pub pitch: f64,
    pub vx: f64,
    pub vz: f64,
    pub vpitch: f64,
    pub q: Vec<f64>,
    pub qd: Vec<f64>,
    pub step: usize,
    pub poses: Vec<ModulePose>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DoneReason {
    Fall,
    Horizon,
}

impl DoneReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DoneReason::Fall => "fall",
            DoneReason::Horizon => "horizon",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StepOutcome {
    pub reward: f64,
    pub done: bool,
    pub reason: Option<DoneReason>,
    /// Forward (or escape-distance) progress term before weighting.
    pub progress: f64,
    /// Mean actuation power magnitude over the step.
    pub energy: f64,
}

fn perp(v: [f64; 2]) -> [f64; 2] {
    [-v[1], v[0]]
}

fn cross2(r: [f64; 2], f: [f64; 2]) -> f64 {
    r[0] * f[1] - r[1] * f[0]
}

/// A single-robot episode environment. Owns its terrain and state; many
/// instances run concurrently with no shared mutable data.
pub struct Env {
    pub model: RobotModel,
    pub task: TaskConfig,
    pub params: SimParams,
    pub terrain: Heightfield,
    pub state: SimState,
    pub h0: f64,
    spawn_x: f64,
    spawn_arc: f64,
    terminal: bool,
}

impl Env {
    pub fn new(g: &MorphologyGraph, task: TaskConfig, params: SimParams) -> Env {
        let model = RobotModel::new(g);
        let nj = model.joint_count();
        let n = model.kinds.len();
        let mut env = Env {
            model,
            task,
            params,
            terrain: generate_terrain(Task::Flat, &mut stream(0, "terrain", 0)),
            state: SimState {
                x: 0.0,
                z: 0.0,
                pitch: 0.0,
                vx: 0.0,
                vz: 0.0,
                vpitch: 0.0,
                q: vec![0.0; nj],
                qd: vec![0.0; nj],
                step: 0,
                poses: vec![ModulePose::default(); n],
            },
            h0: 0.0,
            spawn_x: 0.0,
            spawn_arc: 0.0,
            terminal: true,
        };
        env.reset(0);
        env
    }

    pub fn joint_count(&self) -> usize {
        self.model.joint_count()
    }

    /// Start a new episode: regenerate terrain from `seed`, pose the robot
    /// with every joint at its range midpoint, and drop it so that the lowest
    /// module point sits 1 mm above the ground.
    pub fn reset(&mut self, seed: u64) -> &SimState {
        self.terrain = generate_terrain(self.task.task, &mut stream(seed, "terrain", 0));
        self.spawn_x = self.terrain.spawn_x(self.task.task);

        let nj = self.model.joint_count();
        self.state.q = (0..nj)
            .map(|j| 0.5 * (self.model.joints[j].range_lo + self.model.joints[j].range_hi))
            .collect();
        self.state.qd = vec![0.0; nj];
        self.state.x = self.spawn_x;
        self.state.z = 0.0;
        self.state.pitch = 0.0;
        self.state.vx = 0.0;
        self.state.vz = 0.0;
        self.state.vpitch = 0.0;
        self.state.step = 0;

        // Lowest clearance over all contact points with the root at z = 0.
        self.refresh_poses();
        let mut min_clearance = f64::INFINITY;
        self.for_each_contact_point(|_node, p, r| {
            let clearance = (p[1] - r) - self.terrain.height_at(p[0]);
            if clearance < min_clearance {
                min_clearance = clearance;
            }
        });
        self.state.z = -min_clearance + 1e-3;
        self.refresh_poses();

        self.h0 = self.state.z - self.terrain.height_at(self.state.x);
        self.spawn_arc = self.terrain.arc_length_to(self.spawn_x);
        self.terminal = false;
        &self.state
    }

    fn refresh_poses(&mut self) {
        let m = &self.model;
        let s = &mut self.state;
        for &i in &m.topo {
            if i == m.root {
                let pose = ModulePose {
                    anchor: [s.x, s.z],
                    angle: s.pitch,
                    com: [s.x, s.z],
                    v_anchor: [s.vx, s.vz],
                    v_com: [s.vx, s.vz],
                    omega: s.vpitch,
                };
                s.poses[i] = pose;
                continue;
            }
            let p = m.parent[i].expect("non-root node has a parent");
            let pp = s.poses[p];
            let (sa, ca) = pp.angle.sin_cos();
            let off = m.attach_offsets[i];
            let anchor = [
                pp.anchor[0] + ca * off[0] - sa * off[1],
                pp.anchor[1] + sa * off[0] + ca * off[1],
            ];
            let mut angle = pp.angle + m.attach_angles[i];
            let mut omega = pp.omega;
            for &j in &m.node_joints[i] {
                angle += s.q[j];
                omega += s.qd[j];
            }
            let rel = [anchor[0] - pp.anchor[0], anchor[1] - pp.anchor[1]];
            let v_anchor = [
                pp.v_anchor[0] + pp.omega * perp(rel)[0],
                pp.v_anchor[1] + pp.omega * perp(rel)[1],
            ];
            let (com, v_com) = match m.kinds[i] {
                NodeKind::Sphere => (anchor, v_anchor),
                NodeKind::Cylinder => {
                    let half = 0.5 * m.lengths[i];
                    let dir = [angle.cos(), angle.sin()];
                    let com = [anchor[0] + half * dir[0], anchor[1] + half * dir[1]];
                    let rel = [com[0] - anchor[0], com[1] - anchor[1]];
                    let v_com = [
                        v_anchor[0] + omega * perp(rel)[0],
                        v_anchor[1] + omega * perp(rel)[1],
                    ];
                    (com, v_com)
                }
            };
            s.poses[i] = ModulePose {
                anchor,
                angle,
                com,
                v_anchor,
                v_com,
                omega,
            };
        }
    }

    /// Visit every potential ground-contact point: (node, center, radius).
    fn for_each_contact_point(&self, mut f: impl FnMut(usize, [f64; 2], f64)) {
        let m = &self.model;
        for (i, pose) in self.state.poses.iter().enumerate() {
            match m.kinds[i] {
                NodeKind::Sphere => f(i, pose.anchor, m.radii[i]),
                NodeKind::Cylinder => {
                    f(i, pose.anchor, m.radii[i]);
                    let dir = [pose.angle.cos(), pose.angle.sin()];
                    let tip = [
                        pose.anchor[0] + m.lengths[i] * dir[0],
                        pose.anchor[1] + m.lengths[i] * dir[1],
                    ];
                    f(i, tip, m.radii[i]);
                }
            }
        }
    }

    /// Velocity of a material point attached to `node`.
    fn point_velocity(&self, node: usize, p: [f64; 2]) -> [f64; 2] {
        let pose = &self.state.poses[node];
        let rel = [p[0] - pose.anchor[0], p[1] - pose.anchor[1]];
        [
            pose.v_anchor[0] + pose.omega * perp(rel)[0],
            pose.v_anchor[1] + pose.omega * perp(rel)[1],
        ]
    }

    /// Accumulate the generalized force of a world-frame force `f` applied at
    /// point `p` on `node`.
    fn apply_force(&self, node: usize, p: [f64; 2], f: [f64; 2], gen: &mut [f64]) {
        gen[0] += f[0];
        gen[1] += f[1];
        let root = &self.state.poses[self.model.root];
        gen[2] += cross2([p[0] - root.anchor[0], p[1] - root.anchor[1]], f);
        for &j in &self.model.path_joints[node] {
            let ja = self.state.poses[self.model.joints[j].child_node].anchor;
            gen[3 + j] += cross2([p[0] - ja[0], p[1] - ja[1]], f);
        }
    }

    fn pitch_inertia(&self) -> f64 {
        let m = &self.model;
        let root = &self.state.poses[m.root];
        let mut inertia = m.root_own_inertia;
        for (i, pose) in self.state.poses.iter().enumerate() {
            if i == m.root {
                continue;
            }
            let dx = pose.com[0] - root.anchor[0];
            let dz = pose.com[1] - root.anchor[1];
            inertia += m.masses[i] * (dx * dx + dz * dz);
        }
        inertia.max(1e-4)
    }

    /// Advance one control step under per-joint torque commands in [-1, 1].
    pub fn step(&mut self, action: &[f64]) -> Result<StepOutcome, SimError> {
        if self.terminal {
            return Err(SimError::Terminal);
        }
        let nj = self.model.joint_count();
        if action.len() != nj {
            return Err(SimError::ActionLength {
                expected: nj,
                got: action.len(),
            });
        }
        for (i, a) in action.iter().enumerate() {
            if !a.is_finite() {
                return Err(SimError::NonFiniteAction(i));
            }
        }
        let torques: Vec<f64> = action
            .iter()
            .zip(&self.model.joints)
            .map(|(a, j)| a.clamp(-1.0, 1.0) * j.gear)
            .collect();

        let x_before = self.state.x;
        let escape_before = self.escape_distance();

        let h = self.task.dt / self.params.substeps as f64;
        let mut power_accum = 0.0;

        for _ in 0..self.params.substeps {
            self.refresh_poses();
            let mut gen = vec![0.0; 3 + nj];

            // Gravity at every module center of mass.
            for (i, pose) in self.state.poses.iter().enumerate() {
                let fg = [0.0, -self.model.masses[i] * self.params.gravity];
                self.apply_force(i, pose.com, fg, &mut gen);
            }

            // Ground contact at module endpoints.
            let mut contacts: Vec<(usize, [f64; 2], [f64; 2])> = Vec::new();
            self.for_each_contact_point(|node, p, r| {
                let low = [p[0], p[1] - r];
                let pen = low[1] - self.terrain.height_at(low[0]);
                if pen < 0.0 {
                    let v = self.point_velocity(node, low);
                    let fn_ = (-self.params.contact_stiffness * pen
                        - self.params.contact_damping * v[1])
                        .max(0.0);
                    let ft = (-self.params.friction_damping * v[0])
                        .clamp(-self.params.friction_mu * fn_, self.params.friction_mu * fn_);
                    contacts.push((node, low, [ft, fn_]));
                }
            });
            for (node, p, f) in contacts {
                self.apply_force(node, p, f, &mut gen);
            }

            // Actuation.
            for (j, tau) in torques.iter().enumerate() {
                gen[3 + j] += tau;
            }

            // Semi-implicit Euler with implicit joint damping.
            let mt = self.model.total_mass;
            self.state.vx += h * gen[0] / mt;
            self.state.vz += h * gen[1] / mt;
            self.state.vpitch += h * gen[2] / self.pitch_inertia();
            for j in 0..nj {
                let info = &self.model.joints[j];
                let v = self.state.qd[j] + h * gen[3 + j] / info.inertia;
                self.state.qd[j] = v / (1.0 + h * info.damping / info.inertia);
            }
            self.state.x += h * self.state.vx;
            self.state.z += h * self.state.vz;
            self.state.pitch += h * self.state.vpitch;
            for j in 0..nj {
                self.state.q[j] += h * self.state.qd[j];
                let info = &self.model.joints[j];
                if self.state.q[j] < info.range_lo {
                    self.state.q[j] = info.range_lo;
                    self.state.qd[j] = self.state.qd[j].max(0.0);
                } else if self.state.q[j] > info.range_hi {
                    self.state.q[j] = info.range_hi;
                    self.state.qd[j] = self.state.qd[j].min(0.0);
                }
            }

            for (j, tau) in torques.iter().enumerate() {
                power_accum += (tau * self.state.qd[j]).abs();
            }
        }
        self.refresh_poses();
        self.state.step += 1;

        if !(self.state.x.is_finite()
            && self.state.z.is_finite()
            && self.state.pitch.is_finite()
            && self.state.q.iter().all(|v| v.is_finite())
            && self.state.qd.iter().all(|v| v.is_finite()))
        {
            return Err(SimError::NonFiniteState(self.state.step));
        }

        let progress = match self.task.task {
            Task::Escape => {
                (self.escape_distance() - escape_before) / self.task.dt
            }
            _ => (self.state.x - x_before) / self.task.dt,
        };
        let energy = power_accum / self.params.substeps as f64;
        let reward = self.task.w_forward * progress - self.task.w_energy * energy;

        let torso_height = self.state.z - self.terrain.height_at(self.state.x);
        let mut reason = None;
        if torso_height < self.task.termination_fraction * self.h0 {
            reason = Some(DoneReason::Fall);
        } else if self.state.step >= self.task.episode_horizon {
            reason = Some(DoneReason::Horizon);
        }
        let done = reason.is_some();
        if done {
            self.terminal = true;
        }

        Ok(StepOutcome {
            reward,
            done,
            reason,
            progress,
            energy,
        })
    }

    /// Arc-length distance from the spawn point along the terrain profile.
    fn escape_distance(&self) -> f64 {
        (self.terrain.arc_length_to(self.state.x) - self.spawn_arc).abs()
    }
}
