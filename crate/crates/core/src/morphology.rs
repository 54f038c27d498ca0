//! Kinematic trees of the modular design space: parsing, validation,
//! canonical serialization, depth-first tokenization, and a seeded sampler.
//!
//! A robot is a tree of rigid modules. The root is a sphere (the torso);
//! every other module is a cylinder limb. Each edge carries one or two
//! motor-actuated hinge joints.

use crate::config::{joint_angle_set_rad, SpaceConfig};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Sphere,
    Cylinder,
}

/// One rigid module of a robot.
#[derive(Debug, Clone, PartialEq)]
pub struct ModuleNode {
    pub kind: NodeKind,
    /// Meters. Sphere radius or cylinder cross-section radius.
    pub radius: f64,
    /// Meters. Zero for spheres.
    pub length: f64,
    /// kg/m^3.
    pub density: f64,
    /// Child frame orientation relative to the parent frame, (w, x, y, z).
    pub attach_orientation: [f64; 4],
    /// Attachment point in the parent frame, meters.
    pub attach_offset: [f64; 3],
}

impl ModuleNode {
    /// Mass from density times analytic volume.
    pub fn mass(&self) -> f64 {
        match self.kind {
            NodeKind::Sphere => {
                self.density * 4.0 / 3.0 * std::f64::consts::PI * self.radius.powi(3)
            }
            NodeKind::Cylinder => {
                self.density * std::f64::consts::PI * self.radius * self.radius * self.length
            }
        }
    }
}

/// A single hinge joint on an edge.
#[derive(Debug, Clone, PartialEq)]
pub struct JointSpec {
    /// Unit rotation axis in the parent frame.
    pub axis: [f64; 3],
    /// Radians, lo < hi.
    pub range_lo: f64,
    pub range_hi: f64,
    /// Torque per unit action.
    pub gear: f64,
    /// Reflected rotor inertia added to the joint DoF.
    pub armature: f64,
    /// N·m·s/rad.
    pub damping: f64,
}

/// A parent→child connection carrying 1..=2 joints.
#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub parent: usize,
    pub child: usize,
    pub joints: Vec<JointSpec>,
}

/// A robot morphology as a kinematic tree. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct MorphologyGraph {
    pub name: String,
    pub nodes: Vec<ModuleNode>,
    pub edges: Vec<Edge>,
    pub root_index: usize,
}

/// Token order: node indices in a depth-first traversal, root first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenOrder(pub Vec<usize>);

#[derive(Debug, Error)]
pub enum MorphologyError {
    #[error("{path}: json error: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
    #[error("{path}: invalid morphology:\n{report}")]
    Invalid { path: String, report: ValidationReport },
    #[error("graph failed validation:\n{0}")]
    InvalidGraph(ValidationReport),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

/// One violated invariant, pointing at the offending node or edge.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Violation {
    /// "node 3", "edge 1 joint 0", "graph"
    pub location: String,
    pub message: String,
}

/// Validation output. Empty means the graph satisfies every invariant.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn contains(&self, needle: &str) -> bool {
        self.violations.iter().any(|v| v.message.contains(needle))
    }

    fn push(&mut self, location: impl Into<String>, message: impl Into<String>) {
        self.violations.push(Violation {
            location: location.into(),
            message: message.into(),
        });
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for v in &self.violations {
            writeln!(f, "  {}: {}", v.location, v.message)?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// File schema

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MorphologyDoc {
    name: String,
    nodes: Vec<NodeDoc>,
    edges: Vec<EdgeDoc>,
    root: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeDoc {
    kind: NodeKind,
    radius: f64,
    length: f64,
    density: f64,
    attach_orientation: [f64; 4],
    attach_offset: [f64; 3],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EdgeDoc {
    parent: usize,
    child: usize,
    joints: Vec<JointDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JointDoc {
    axis: [f64; 3],
    range: [f64; 2],
    gear: f64,
    armature: f64,
    damping: f64,
}

/// Parse a morphology document. The returned graph is guaranteed valid under
/// `space`; schema problems and invariant violations are both errors.
pub fn parse_morphology(
    document: &str,
    space: &SpaceConfig,
) -> Result<MorphologyGraph, MorphologyError> {
    parse_named(document, space, "<string>")
}

/// Like [`parse_morphology`] but errors carry `path` for context.
pub fn parse_named(
    document: &str,
    space: &SpaceConfig,
    path: &str,
) -> Result<MorphologyGraph, MorphologyError> {
    let doc: MorphologyDoc =
        serde_json::from_str(document).map_err(|source| MorphologyError::Json {
            path: path.to_string(),
            source,
        })?;
    let graph = MorphologyGraph {
        name: doc.name,
        nodes: doc
            .nodes
            .into_iter()
            .map(|n| ModuleNode {
                kind: n.kind,
                radius: n.radius,
                length: n.length,
                density: n.density,
                attach_orientation: n.attach_orientation,
                attach_offset: n.attach_offset,
            })
            .collect(),
        edges: doc
            .edges
            .into_iter()
            .map(|e| Edge {
                parent: e.parent,
                child: e.child,
                joints: e
                    .joints
                    .into_iter()
                    .map(|j| JointSpec {
                        axis: j.axis,
                        range_lo: j.range[0],
                        range_hi: j.range[1],
                        gear: j.gear,
                        armature: j.armature,
                        damping: j.damping,
                    })
                    .collect(),
            })
            .collect(),
        root_index: doc.root,
    };
    let report = validate_graph(&graph, space);
    if !report.is_valid() {
        return Err(MorphologyError::Invalid {
            path: path.to_string(),
            report,
        });
    }
    Ok(graph)
}

/// Read and parse a morphology file.
pub fn load_morphology(
    path: &std::path::Path,
    space: &SpaceConfig,
) -> Result<MorphologyGraph, MorphologyError> {
    let text = std::fs::read_to_string(path)?;
    parse_named(&text, space, &path.display().to_string())
}

// ---------------------------------------------------------------------------
// Validation

const UNIT_TOL: f64 = 1e-9;

fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn norm4(v: [f64; 4]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Check every structural and parameter invariant. Violations are data, not
/// failures; an empty report means the graph is valid.
pub fn validate_graph(g: &MorphologyGraph, space: &SpaceConfig) -> ValidationReport {
    let mut report = ValidationReport::default();
    let n = g.nodes.len();

    if n == 0 {
        report.push("graph", "no nodes");
        return report;
    }
    if n > space.n_max {
        report.push(
            "graph",
            format!("node count {} exceeds maximum {}", n, space.n_max),
        );
    }
    if g.root_index >= n {
        report.push("graph", format!("root index {} out of range", g.root_index));
        return report;
    }

    // Node invariants.
    for (i, node) in g.nodes.iter().enumerate() {
        let loc = format!("node {i}");
        match node.kind {
            NodeKind::Sphere => {
                if i != g.root_index {
                    report.push(&loc, "non-root node must be a cylinder");
                }
                if node.length != 0.0 {
                    report.push(&loc, "sphere length must be 0");
                }
                if !(node.radius > 0.0) {
                    report.push(&loc, "sphere radius must be positive");
                }
            }
            NodeKind::Cylinder => {
                if i == g.root_index {
                    report.push(&loc, "root node must be a sphere");
                }
                let [rlo, rhi] = space.limb_radius;
                if !(node.radius >= rlo && node.radius <= rhi) {
                    report.push(
                        &loc,
                        format!("cylinder radius {} outside [{rlo}, {rhi}]", node.radius),
                    );
                }
                let [llo, lhi] = space.limb_length;
                if !(node.length >= llo && node.length <= lhi) {
                    report.push(
                        &loc,
                        format!("cylinder length {} outside [{llo}, {lhi}]", node.length),
                    );
                }
            }
        }
        if !(node.density > 0.0) {
            report.push(&loc, "density must be positive");
        }
        if (norm4(node.attach_orientation) - 1.0).abs() > UNIT_TOL {
            report.push(&loc, "attach orientation quaternion is not unit norm");
        }
        if !node.attach_offset.iter().all(|x| x.is_finite()) {
            report.push(&loc, "attach offset not finite");
        }
    }

    // Edge and joint invariants.
    let angle_set = joint_angle_set_rad();
    let mut parent_of: Vec<Option<usize>> = vec![None; n];
    for (ei, edge) in g.edges.iter().enumerate() {
        let loc = format!("edge {ei}");
        if edge.parent >= n || edge.child >= n {
            report.push(&loc, "node index out of range");
            continue;
        }
        if edge.joints.is_empty() {
            report.push(&loc, "edge carries no joints");
        }
        if edge.joints.len() > 2 {
            report.push(&loc, format!("joint count > 2 ({})", edge.joints.len()));
        }
        if edge.child == g.root_index {
            report.push(&loc, "root listed as a child (not a tree)");
        }
        if parent_of[edge.child].is_some() {
            report.push(
                &loc,
                format!("node {} has multiple parents (not a tree)", edge.child),
            );
        } else {
            parent_of[edge.child] = Some(edge.parent);
        }
        for (ji, joint) in edge.joints.iter().enumerate() {
            let jloc = format!("edge {ei} joint {ji}");
            if (norm3(joint.axis) - 1.0).abs() > UNIT_TOL {
                report.push(&jloc, "axis is not unit norm");
            }
            if !(joint.range_lo < joint.range_hi) {
                report.push(&jloc, "range_lo must be < range_hi");
            }
            let in_set = angle_set.iter().any(|&(lo, hi)| {
                (joint.range_lo - lo).abs() < 1e-9 && (joint.range_hi - hi).abs() < 1e-9
            });
            if !in_set {
                report.push(
                    &jloc,
                    format!(
                        "joint range ({:.4}, {:.4}) rad not in the design-space vocabulary",
                        joint.range_lo, joint.range_hi
                    ),
                );
            }
            if !(joint.gear > 0.0) {
                report.push(&jloc, "gear must be positive");
            }
            if !(joint.armature > 0.0) {
                report.push(&jloc, "armature must be positive");
            }
            if !(joint.damping > 0.0) {
                report.push(&jloc, "damping must be positive");
            }
        }
    }

    // Connectivity: every non-root node reachable from the root.
    let children = children_table(g);
    let mut seen = vec![false; n];
    let mut stack = vec![g.root_index];
    seen[g.root_index] = true;
    while let Some(i) = stack.pop() {
        for &c in &children[i] {
            if c < n && !seen[c] {
                seen[c] = true;
                stack.push(c);
            }
        }
    }
    if seen.iter().any(|s| !s) {
        report.push("graph", "unreachable nodes (not a tree)");
    }
    for (i, p) in parent_of.iter().enumerate() {
        if i != g.root_index && p.is_none() {
            report.push("graph", format!("node {i} has no parent edge (not a tree)"));
        }
    }

    report
}

fn children_table(g: &MorphologyGraph) -> Vec<Vec<usize>> {
    let mut children = vec![Vec::new(); g.nodes.len()];
    for e in &g.edges {
        if e.parent < g.nodes.len() && e.child < g.nodes.len() {
            children[e.parent].push(e.child);
        }
    }
    children
}

// ---------------------------------------------------------------------------
// Token order

/// Depth-first token order starting at the root. Siblings are visited in
/// edge-declaration order; with `sibling_shuffle`, each sibling group is
/// permuted by the rng (the training-time traversal augmentation).
pub fn dfs_token_order(
    g: &MorphologyGraph,
    mut sibling_shuffle: Option<&mut impl Rng>,
    space: &SpaceConfig,
) -> Result<TokenOrder, MorphologyError> {
    let report = validate_graph(g, space);
    if !report.is_valid() {
        return Err(MorphologyError::InvalidGraph(report));
    }
    let children = children_table(g);
    let mut order = Vec::with_capacity(g.nodes.len());
    // Recursion depth is bounded by the module cap, but keep it iterative.
    let mut stack = vec![g.root_index];
    while let Some(i) = stack.pop() {
        order.push(i);
        let mut kids = children[i].clone();
        if let Some(rng) = sibling_shuffle.as_deref_mut() {
            kids.shuffle(rng);
        }
        // Reverse so the first child is popped first.
        for &c in kids.iter().rev() {
            stack.push(c);
        }
    }
    Ok(TokenOrder(order))
}

// ---------------------------------------------------------------------------
// Canonical serialization

fn fmt_f64(x: f64) -> String {
    // 17 significant digits round-trip any f64 exactly.
    let s = format!("{:.16e}", x);
    // Normalize "1.5000000000000000e0" exponent form into plain JSON numbers.
    s.parse::<f64>().expect("formatted float");
    s
}

fn write_floats(out: &mut String, xs: &[f64]) {
    out.push('[');
    for (i, x) in xs.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&fmt_f64(*x));
    }
    out.push(']');
}

/// Serialize a valid graph to its canonical document: nodes in depth-first
/// order, edges sorted by child, fixed field order, 17-significant-digit
/// floats. Two serializations of equal graphs are byte-identical.
pub fn serialize_morphology(
    g: &MorphologyGraph,
    space: &SpaceConfig,
) -> Result<String, MorphologyError> {
    let order = dfs_token_order(g, None::<&mut rand_chacha::ChaCha8Rng>, space)?;
    // Remap node indices into DFS order.
    let mut new_index = vec![0usize; g.nodes.len()];
    for (pos, &old) in order.0.iter().enumerate() {
        new_index[old] = pos;
    }
    let mut edges: Vec<&Edge> = g.edges.iter().collect();
    edges.sort_by_key(|e| new_index[e.child]);

    let mut out = String::new();
    out.push_str("{\n");
    out.push_str(&format!(
        "  \"name\": {},\n",
        serde_json::to_string(&g.name).expect("string")
    ));
    out.push_str("  \"nodes\": [\n");
    for (pos, &old) in order.0.iter().enumerate() {
        let n = &g.nodes[old];
        let kind = match n.kind {
            NodeKind::Sphere => "sphere",
            NodeKind::Cylinder => "cylinder",
        };
        out.push_str(&format!(
            "    {{\"kind\": \"{kind}\", \"radius\": {}, \"length\": {}, \"density\": {}, \"attach_orientation\": ",
            fmt_f64(n.radius),
            fmt_f64(n.length),
            fmt_f64(n.density)
        ));
        write_floats(&mut out, &n.attach_orientation);
        out.push_str(", \"attach_offset\": ");
        write_floats(&mut out, &n.attach_offset);
        out.push('}');
        if pos + 1 < order.0.len() {
            out.push(',');
        }
        out.push('\n');
    }
    out.push_str("  ],\n");
    out.push_str("  \"edges\": [\n");
    for (i, e) in edges.iter().enumerate() {
        out.push_str(&format!(
            "    {{\"parent\": {}, \"child\": {}, \"joints\": [",
            new_index[e.parent], new_index[e.child]
        ));
        for (ji, j) in e.joints.iter().enumerate() {
            if ji > 0 {
                out.push_str(", ");
            }
            out.push_str("{\"axis\": ");
            write_floats(&mut out, &j.axis);
            out.push_str(", \"range\": ");
            write_floats(&mut out, &[j.range_lo, j.range_hi]);
            out.push_str(&format!(
                ", \"gear\": {}, \"armature\": {}, \"damping\": {}}}",
                fmt_f64(j.gear),
                fmt_f64(j.armature),
                fmt_f64(j.damping)
            ));
        }
        out.push_str("]}");
        if i + 1 < edges.len() {
            out.push(',');
        }
        out.push('\n');
    }
    out.push_str("  ],\n");
    out.push_str("  \"root\": 0\n");
    out.push_str("}\n");
    Ok(out)
}

/// Field-wise equality with a numeric tolerance. Node order must match.
pub fn graphs_approx_eq(a: &MorphologyGraph, b: &MorphologyGraph, tol: f64) -> bool {
    if a.name != b.name
        || a.nodes.len() != b.nodes.len()
        || a.edges.len() != b.edges.len()
        || a.root_index != b.root_index
    {
        return false;
    }
    let close = |x: f64, y: f64| (x - y).abs() <= tol;
    for (na, nb) in a.nodes.iter().zip(&b.nodes) {
        if na.kind != nb.kind
            || !close(na.radius, nb.radius)
            || !close(na.length, nb.length)
            || !close(na.density, nb.density)
            || !na
                .attach_orientation
                .iter()
                .zip(&nb.attach_orientation)
                .all(|(x, y)| close(*x, *y))
            || !na
                .attach_offset
                .iter()
                .zip(&nb.attach_offset)
                .all(|(x, y)| close(*x, *y))
        {
            return false;
        }
    }
    for (ea, eb) in a.edges.iter().zip(&b.edges) {
        if ea.parent != eb.parent || ea.child != eb.child || ea.joints.len() != eb.joints.len() {
            return false;
        }
        for (ja, jb) in ea.joints.iter().zip(&eb.joints) {
            if !ja.axis.iter().zip(&jb.axis).all(|(x, y)| close(*x, *y))
                || !close(ja.range_lo, jb.range_lo)
                || !close(ja.range_hi, jb.range_hi)
                || !close(ja.gear, jb.gear)
                || !close(ja.armature, jb.armature)
                || !close(ja.damping, jb.damping)
            {
                return false;
            }
        }
    }
    true
}

// ---------------------------------------------------------------------------
// Sampling

/// Sample a valid morphology from the design space. Deterministic given the
/// rng state; nodes come out in a DFS-consistent order (parents first).
pub fn sample_morphology(space: &SpaceConfig, rng: &mut impl Rng) -> MorphologyGraph {
    let n = rng.gen_range(space.min_modules..=space.max_modules);
    let angle_set = joint_angle_set_rad();
    let uni = |rng: &mut dyn rand::RngCore, range: [f64; 2]| -> f64 {
        if range[0] == range[1] {
            range[0]
        } else {
            rng.gen_range(range[0]..range[1])
        }
    };

    let mut nodes = vec![ModuleNode {
        kind: NodeKind::Sphere,
        radius: uni(rng, space.sphere_radius),
        length: 0.0,
        density: uni(rng, space.density),
        attach_orientation: [1.0, 0.0, 0.0, 0.0],
        attach_offset: [0.0, 0.0, 0.0],
    }];
    let mut edges = Vec::new();

    for i in 1..n {
        let parent = rng.gen_range(0..i);
        let attach_deg = *space
            .attach_angles_deg
            .choose(rng)
            .expect("attach angle set");
        let half = attach_deg.to_radians() / 2.0;
        let attach_offset = match nodes[parent].kind {
            // Surface point of the torso at a sampled planar angle.
            NodeKind::Sphere => {
                let psi = space
                    .attach_angles_deg
                    .choose(rng)
                    .expect("attach angle set")
                    .to_radians();
                let r = nodes[parent].radius;
                [r * psi.cos(), 0.0, r * psi.sin()]
            }
            // Distal tip of the parent limb.
            NodeKind::Cylinder => [nodes[parent].length, 0.0, 0.0],
        };
        nodes.push(ModuleNode {
            kind: NodeKind::Cylinder,
            radius: uni(rng, space.limb_radius),
            length: uni(rng, space.limb_length),
            density: uni(rng, space.density),
            attach_orientation: [half.cos(), 0.0, half.sin(), 0.0],
            attach_offset,
        });

        let joint_count = if rng.gen_bool(space.two_joint_prob) { 2 } else { 1 };
        let joints = (0..joint_count)
            .map(|_| {
                let &(lo, hi) = angle_set.choose(rng).expect("joint angle set");
                JointSpec {
                    axis: *space.joint_axes.choose(rng).expect("axis set"),
                    range_lo: lo,
                    range_hi: hi,
                    gear: uni(rng, space.gear),
                    armature: space.armature,
                    damping: space.damping,
                }
            })
            .collect();
        edges.push(Edge {
            parent,
            child: i,
            joints,
        });
    }

    MorphologyGraph {
        name: String::new(),
        nodes,
        edges,
        root_index: 0,
    }
}

/// Children of each node in edge-declaration order, exposed for consumers
/// that need the tree structure (simulator, observation builder).
pub fn children_of(g: &MorphologyGraph) -> Vec<Vec<usize>> {
    children_table(g)
}

/// Parent edge index of each node (`None` for the root).
pub fn parent_edge_of(g: &MorphologyGraph) -> Vec<Option<usize>> {
    let mut out = vec![None; g.nodes.len()];
    for (ei, e) in g.edges.iter().enumerate() {
        out[e.child] = Some(ei);
    }
    out
}
