//! The 27-DoF humanoid model: forward kinematics, center of mass, collision
//! spheres and support-surface computations.
//!
//! The robot ships as a JSON data file (see `assets/humanoid_27dof.json`);
//! the loader validates the model invariants and reports the first violation.
//! A tape-backed FK mirror (`fk_diff`) makes link positions differentiable
//! w.r.t. selected joint angles and the base orientation, which the
//! retargeting and motion-prior losses backpropagate through.

use crate::tensor::{Tape, Var};
use crate::util::*;
use serde::{Deserialize, Serialize};

pub const NUM_JOINTS: usize = 27;
pub const NUM_LINKS: usize = NUM_JOINTS + 1;
pub const NUM_LEG_JOINTS: usize = 12;
pub const NUM_UPPER_JOINTS: usize = 15;
/// Upper-body joints (waist + both arms) start here in the joint vector.
pub const UPPER_JOINT_OFFSET: usize = NUM_LEG_JOINTS;

/// Links whose collision spheres enter the self-collision losses and metrics.
pub const COLLISION_LINK_SET: [&str; 6] = [
    "waist_yaw",
    "pelvis",
    "l_wrist_roll",
    "r_wrist_roll",
    "l_hip_pitch",
    "r_hip_pitch",
];

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("model invalid: {0}")]
    Invalid(String),
    #[error("link '{0}' carries no collision sphere")]
    MissingSphere(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LinkSpec {
    pub name: String,
    /// Parent link index; `None` marks the floating-base root.
    pub parent: Option<usize>,
    /// Joint axis in the parent frame (unit).
    pub axis: Vec3,
    /// Joint origin offset from the parent frame.
    pub origin: Vec3,
    pub mass: f64,
    /// Diagonal inertia in the link frame.
    pub inertia: Vec3,
    /// Center of mass offset in the link frame.
    pub com: Vec3,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CollisionSphere {
    pub link: String,
    pub center: Vec3,
    pub radius: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FootSpec {
    pub link: String,
    pub corners: [Vec3; 4],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RobotModel {
    pub name: String,
    #[serde(default)]
    pub comment: String,
    pub links: Vec<LinkSpec>,
    pub joint_limits: Vec<[f64; 2]>,
    pub collision_spheres: Vec<CollisionSphere>,
    pub feet: Vec<FootSpec>,
    pub default_pose: Vec<f64>,
    pub h_ref: f64,
}

impl RobotModel {
    /// Parse and validate a model JSON, reporting the first violated invariant.
    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let model: RobotModel = serde_json::from_str(text)?;
        model.validate()?;
        Ok(model)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ModelError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// The built-in 1.65 m / 60 kg humanoid.
    pub fn default_humanoid() -> Self {
        Self::from_json(include_str!("../assets/humanoid_27dof.json"))
            .expect("built-in model must validate")
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::Invalid(msg));
        if self.links.len() != NUM_LINKS {
            return fail(format!("expected {} links, got {}", NUM_LINKS, self.links.len()));
        }
        if self.links[0].parent.is_some() {
            return fail("link 0 must be the floating-base root".into());
        }
        for (i, l) in self.links.iter().enumerate().skip(1) {
            match l.parent {
                None => return fail(format!("link {} ('{}') is a second root", i, l.name)),
                Some(p) if p >= i => {
                    return fail(format!("link {} parent {} is not topologically sorted", i, p))
                }
                _ => {}
            }
            let n = v_norm(l.axis);
            if (n - 1.0).abs() > 1e-9 {
                return fail(format!("link '{}' axis norm {} != 1", l.name, n));
            }
        }
        for l in &self.links {
            if l.mass <= 0.0 {
                return fail(format!("link '{}' mass {} must be > 0", l.name, l.mass));
            }
        }
        if self.joint_limits.len() != NUM_JOINTS {
            return fail(format!("expected {} joint limits, got {}", NUM_JOINTS, self.joint_limits.len()));
        }
        for (j, lim) in self.joint_limits.iter().enumerate() {
            if lim[0] >= lim[1] {
                return fail(format!("joint {j} limits [{}, {}] need lo < hi", lim[0], lim[1]));
            }
        }
        if self.default_pose.len() != NUM_JOINTS {
            return fail(format!("default pose has {} angles", self.default_pose.len()));
        }
        for (j, &q) in self.default_pose.iter().enumerate() {
            let lim = self.joint_limits[j];
            if q < lim[0] || q > lim[1] {
                return fail(format!("default pose joint {j} = {q} outside limits"));
            }
        }
        for s in &self.collision_spheres {
            if self.link_index(&s.link).is_none() {
                return fail(format!("collision sphere references unknown link '{}'", s.link));
            }
        }
        if self.feet.len() != 2 {
            return fail(format!("expected 2 feet, got {}", self.feet.len()));
        }
        for f in &self.feet {
            if self.link_index(&f.link).is_none() {
                return fail(format!("foot references unknown link '{}'", f.link));
            }
        }
        Ok(())
    }

    pub fn link_index(&self, name: &str) -> Option<usize> {
        self.links.iter().position(|l| l.name == name)
    }

    /// Joint index for link `i` (links 1.. map one-to-one onto joints).
    pub fn joint_of_link(&self, link: usize) -> Option<usize> {
        (link > 0).then(|| link - 1)
    }

    pub fn total_mass(&self) -> f64 {
        self.links.iter().map(|l| l.mass).sum()
    }

    pub fn clamp_to_limits(&self, q: &mut [f64]) {
        for (j, v) in q.iter_mut().enumerate() {
            let lim = self.joint_limits[j];
            *v = v.clamp(lim[0], lim[1]);
        }
    }

    pub fn default_upper_pose(&self) -> [f64; NUM_UPPER_JOINTS] {
        let mut out = [0.0; NUM_UPPER_JOINTS];
        out.copy_from_slice(&self.default_pose[UPPER_JOINT_OFFSET..]);
        out
    }

    pub fn default_leg_pose(&self) -> [f64; NUM_LEG_JOINTS] {
        let mut out = [0.0; NUM_LEG_JOINTS];
        out.copy_from_slice(&self.default_pose[..UPPER_JOINT_OFFSET]);
        out
    }

    /// Upper-body joint limits as (lo, hi) arrays.
    pub fn upper_limits(&self) -> ([f64; NUM_UPPER_JOINTS], [f64; NUM_UPPER_JOINTS]) {
        let mut lo = [0.0; NUM_UPPER_JOINTS];
        let mut hi = [0.0; NUM_UPPER_JOINTS];
        for j in 0..NUM_UPPER_JOINTS {
            lo[j] = self.joint_limits[UPPER_JOINT_OFFSET + j][0];
            hi[j] = self.joint_limits[UPPER_JOINT_OFFSET + j][1];
        }
        (lo, hi)
    }
}

/// Floating-base pose: world position/orientation plus 27 joint angles.
#[derive(Clone, Debug, PartialEq)]
pub struct Pose {
    pub base_pos: Vec3,
    pub base_quat: Quat,
    pub q: Vec<f64>,
}

impl Pose {
    pub fn new(base_pos: Vec3, base_quat: Quat, q: Vec<f64>) -> Self {
        assert_eq!(q.len(), NUM_JOINTS);
        Pose { base_pos, base_quat: q_normalize(base_quat), q }
    }

    pub fn default_for(model: &RobotModel) -> Self {
        Pose::new([0.0, 0.0, model.h_ref], IDENTITY_QUAT, model.default_pose.clone())
    }
}

/// World transforms per link.
#[derive(Clone, Debug)]
pub struct FkResult {
    pub rot: Vec<Mat3>,
    pub pos: Vec<Vec3>,
}

pub fn forward_kinematics(model: &RobotModel, pose: &Pose) -> FkResult {
    let n = model.links.len();
    let mut rot = Vec::with_capacity(n);
    let mut pos = Vec::with_capacity(n);
    rot.push(q_to_mat(pose.base_quat));
    pos.push(pose.base_pos);
    for (i, link) in model.links.iter().enumerate().skip(1) {
        let p = link.parent.expect("validated tree");
        let joint = i - 1;
        let local = axis_angle_mat(link.axis, pose.q[joint]);
        let r = m_mul(&rot[p], &local);
        let t = v_add(pos[p], m_vec(&rot[p], link.origin));
        rot.push(r);
        pos.push(t);
    }
    FkResult { rot, pos }
}

impl FkResult {
    pub fn link_com(&self, model: &RobotModel, link: usize) -> Vec3 {
        v_add(self.pos[link], m_vec(&self.rot[link], model.links[link].com))
    }

    pub fn point_on(&self, link: usize, local: Vec3) -> Vec3 {
        v_add(self.pos[link], m_vec(&self.rot[link], local))
    }
}

/// Mass-weighted mean of link COM positions.
pub fn center_of_mass(model: &RobotModel, fk: &FkResult) -> Vec3 {
    let mut acc = [0.0; 3];
    let mut mass = 0.0;
    for (i, link) in model.links.iter().enumerate() {
        let c = fk.link_com(model, i);
        acc = v_add(acc, v_scale(c, link.mass));
        mass += link.mass;
    }
    v_scale(acc, 1.0 / mass)
}

/// World centers of all collision spheres, in declaration order.
pub fn sphere_centers(model: &RobotModel, fk: &FkResult) -> Vec<Vec3> {
    model
        .collision_spheres
        .iter()
        .map(|s| {
            let li = model.link_index(&s.link).expect("validated sphere link");
            fk.point_on(li, s.center)
        })
        .collect()
}

/// Surface distances (center distance minus radii, floored at 0) for every
/// unordered pair of collision spheres on *different* links in `link_set`.
pub fn min_pair_distances(
    model: &RobotModel,
    fk: &FkResult,
    link_set: &[&str],
) -> Result<Vec<((String, String), f64)>, ModelError> {
    let mut spheres = Vec::new();
    for name in link_set {
        let matching: Vec<&CollisionSphere> = model
            .collision_spheres
            .iter()
            .filter(|s| s.link == *name)
            .collect();
        if matching.is_empty() {
            return Err(ModelError::MissingSphere((*name).to_string()));
        }
        for s in matching {
            let li = model.link_index(&s.link).expect("validated");
            spheres.push((s.link.clone(), fk.point_on(li, s.center), s.radius));
        }
    }
    let mut out = Vec::new();
    for i in 0..spheres.len() {
        for j in (i + 1)..spheres.len() {
            if spheres[i].0 == spheres[j].0 {
                continue;
            }
            let d = v_norm(v_sub(spheres[i].1, spheres[j].1)) - spheres[i].2 - spheres[j].2;
            out.push(((spheres[i].0.clone(), spheres[j].0.clone()), d.max(0.0)));
        }
    }
    Ok(out)
}

/// Sole centers (mean of the 4 corner points) for both feet.
pub fn foot_centers(model: &RobotModel, fk: &FkResult) -> [Vec3; 2] {
    let mut out = [[0.0; 3]; 2];
    for (f, foot) in model.feet.iter().enumerate() {
        let li = model.link_index(&foot.link).expect("validated");
        let mut acc = [0.0; 3];
        for c in &foot.corners {
            acc = v_add(acc, fk.point_on(li, *c));
        }
        out[f] = v_scale(acc, 0.25);
    }
    out
}

/// Horizontal distance between the COM ground projection and the midpoint of
/// the two foot-sole centers.
pub fn support_center_distance(model: &RobotModel, fk: &FkResult, com: Vec3) -> f64 {
    let centers = foot_centers(model, fk);
    let mid = v_scale(v_add(centers[0], centers[1]), 0.5);
    let dx = com[0] - mid[0];
    let dy = com[1] - mid[1];
    (dx * dx + dy * dy).sqrt()
}

// ---------------------------------------------------------------------------
// Skeleton graphs (key nodes for retargeting)
// ---------------------------------------------------------------------------

pub const KEY_NODE_NAMES: [&str; 8] = [
    "waist",
    "torso",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
    "r_shoulder",
    "r_elbow",
    "r_wrist",
];

/// Key-node skeleton as a graph with rest-pose edge features.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SkeletonGraph {
    pub nodes: Vec<String>,
    pub edges: Vec<(usize, usize)>,
    /// Rest-pose offset (child minus parent) per edge.
    pub rest_offsets: Vec<Vec3>,
    pub bone_lengths: Vec<f64>,
}

impl SkeletonGraph {
    pub fn from_rest_positions(
        nodes: Vec<String>,
        edges: Vec<(usize, usize)>,
        rest: &[Vec3],
    ) -> Self {
        let rest_offsets: Vec<Vec3> =
            edges.iter().map(|&(a, b)| v_sub(rest[b], rest[a])).collect();
        let bone_lengths = rest_offsets.iter().map(|o| v_norm(*o)).collect();
        let g = SkeletonGraph { nodes, edges, rest_offsets, bone_lengths };
        assert!(g.is_connected(), "skeleton graph must be connected");
        g
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_connected(&self) -> bool {
        let n = self.nodes.len();
        if n == 0 {
            return false;
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for &(a, b) in &self.edges {
                let other = if a == i {
                    b
                } else if b == i {
                    a
                } else {
                    continue;
                };
                if !seen[other] {
                    seen[other] = true;
                    stack.push(other);
                }
            }
        }
        seen.iter().all(|&s| s)
    }

    /// 0/1 adjacency without self-loops.
    pub fn adjacency(&self) -> crate::tensor::Tensor {
        let n = self.nodes.len();
        let mut data = vec![0.0; n * n];
        for &(a, b) in &self.edges {
            data[a * n + b] = 1.0;
            data[b * n + a] = 1.0;
        }
        crate::tensor::Tensor::matrix(n, n, data)
    }
}

/// (link name, local offset) per robot key node, in `KEY_NODE_NAMES` order.
pub fn robot_key_node_anchors() -> [(&'static str, Vec3); 8] {
    [
        ("waist_yaw", [0.0, 0.0, 0.0]),
        ("waist_yaw", [0.0, 0.0, 0.30]),
        ("l_shoulder_roll", [0.0, 0.0, 0.0]),
        ("l_elbow", [0.0, 0.0, 0.0]),
        ("l_wrist_roll", [0.0, 0.0, 0.0]),
        ("r_shoulder_roll", [0.0, 0.0, 0.0]),
        ("r_elbow", [0.0, 0.0, 0.0]),
        ("r_wrist_roll", [0.0, 0.0, 0.0]),
    ]
}

pub const KEY_NODE_EDGES: [(usize, usize); 7] =
    [(0, 1), (1, 2), (2, 3), (3, 4), (1, 5), (5, 6), (6, 7)];

/// Key-node world positions for a robot pose.
pub fn robot_key_nodes(model: &RobotModel, fk: &FkResult) -> [Vec3; 8] {
    let anchors = robot_key_node_anchors();
    let mut out = [[0.0; 3]; 8];
    for (i, (link, off)) in anchors.iter().enumerate() {
        let li = model.link_index(link).expect("key node link");
        out[i] = fk.point_on(li, *off);
    }
    out
}

/// Robot skeleton graph with rest features taken at the default pose.
pub fn robot_skeleton_graph(model: &RobotModel) -> SkeletonGraph {
    let fk = forward_kinematics(model, &Pose::default_for(model));
    let rest = robot_key_nodes(model, &fk);
    SkeletonGraph::from_rest_positions(
        KEY_NODE_NAMES.iter().map(|s| s.to_string()).collect(),
        KEY_NODE_EDGES.to_vec(),
        &rest,
    )
}

// ---------------------------------------------------------------------------
// Differentiable FK (tape mirror)
// ---------------------------------------------------------------------------

/// Per-joint angle source for the taped FK.
#[derive(Clone, Copy)]
pub enum DiffAngle {
    Const(f64),
    Var(Var),
}

/// Rodrigues rotation about a constant unit axis with a variable angle.
pub fn rot_about_axis_diff(tape: &mut Tape, axis: Vec3, angle: Var) -> Var {
    let [x, y, z] = axis;
    let k = [0.0, -z, y, z, 0.0, -x, -y, x, 0.0];
    let mut k2 = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            for l in 0..3 {
                k2[i * 3 + j] += k[i * 3 + l] * k[l * 3 + j];
            }
        }
    }
    let eye = tape.matrix(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    let kc = tape.matrix(3, 3, &k);
    let k2c = tape.matrix(3, 3, &k2);
    let s = tape.sin(angle);
    let c = tape.cos(angle);
    let neg_c = tape.scale(c, -1.0);
    let one_minus_c = tape.add_const(neg_c, 1.0);
    let t1 = tape.scale_by(kc, s);
    let t2 = tape.scale_by(k2c, one_minus_c);
    let a = tape.add(eye, t1);
    tape.add(a, t2)
}

/// Base rotation Rz(yaw) Ry(pitch) Rx(roll) from a 3-vector rpy variable.
pub fn rpy_rotation_diff(tape: &mut Tape, rpy: Var) -> Var {
    let roll = tape.index(rpy, 0);
    let pitch = tape.index(rpy, 1);
    let yaw = tape.index(rpy, 2);
    let rx = rot_about_axis_diff(tape, [1.0, 0.0, 0.0], roll);
    let ry = rot_about_axis_diff(tape, [0.0, 1.0, 0.0], pitch);
    let rz = rot_about_axis_diff(tape, [0.0, 0.0, 1.0], yaw);
    let ryx = tape.matmul(ry, rx);
    tape.matmul(rz, ryx)
}

/// Taped link transforms. `base_rot` is a [3,3] variable (use a constant leaf
/// for a fixed base), `base_pos` a [3] variable, `angles` one entry per joint.
pub struct DiffFk {
    pub rot: Vec<Var>,
    pub pos: Vec<Var>,
}

pub fn fk_diff(
    tape: &mut Tape,
    model: &RobotModel,
    base_rot: Var,
    base_pos: Var,
    angles: &[DiffAngle],
) -> DiffFk {
    assert_eq!(angles.len(), NUM_JOINTS);
    let mut rot = Vec::with_capacity(model.links.len());
    let mut pos = Vec::with_capacity(model.links.len());
    rot.push(base_rot);
    pos.push(base_pos);
    for (i, link) in model.links.iter().enumerate().skip(1) {
        let p = link.parent.expect("validated tree");
        let local = match angles[i - 1] {
            DiffAngle::Const(a) => {
                let m = axis_angle_mat(link.axis, a);
                let flat: Vec<f64> = m.iter().flatten().copied().collect();
                tape.matrix(3, 3, &flat)
            }
            DiffAngle::Var(v) => rot_about_axis_diff(tape, link.axis, v),
        };
        let r = tape.matmul(rot[p], local);
        let origin = tape.vector(&link.origin);
        let moved = tape.matmul(rot[p], origin);
        let t = tape.add(pos[p], moved);
        rot.push(r);
        pos.push(t);
    }
    DiffFk { rot, pos }
}

impl DiffFk {
    pub fn point_on(&self, tape: &mut Tape, link: usize, local: Vec3) -> Var {
        let off = tape.vector(&local);
        let moved = tape.matmul(self.rot[link], off);
        tape.add(self.pos[link], moved)
    }

    /// Taped center of mass.
    pub fn com(&self, tape: &mut Tape, model: &RobotModel) -> Var {
        let total: f64 = model.total_mass();
        let mut acc: Option<Var> = None;
        for (i, link) in model.links.iter().enumerate() {
            let c = self.point_on(tape, i, link.com);
            let w = tape.scale(c, link.mass / total);
            acc = Some(match acc {
                None => w,
                Some(a) => tape.add(a, w),
            });
        }
        acc.expect("at least one link")
    }
}
