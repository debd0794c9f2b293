//! Deterministic simplified physics environment.
//!
//! The humanoid is simulated as a floating aggregate rigid body (all link
//! point masses and inertias summed about the instantaneous COM) carried by
//! servo-driven joints: each joint integrates its own PD torque against a
//! fixed effective inertia, with exact generalized gravity loading, while the
//! joint configuration shapes the aggregate's COM, inertia, foot contact
//! geometry and reaction wrench. Ground contact is a spring-damper at four
//! corner points per foot with regularized Coulomb friction. Fast limb motion
//! feeds back on the base through a finite-difference momentum reaction, so
//! aggressive arm swings genuinely disturb balance. Self-collisions between
//! the collision spheres produce recorded contact forces and joint
//! disturbance torques.
//!
//! Physics runs at 1 kHz; control at 50 Hz (20 substeps per action). The
//! velocity update is semi-implicit; positions advance with the midpoint
//! velocity so constant-acceleration segments match their closed form.

use crate::config::{DrToggles, SimConfig};
use crate::kinematics::*;
use crate::util::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

pub const NUM_ACTIONS: usize = 12;

// Observation frame layout: [q (27), a_prev (12), rpy (3), g (15)].
pub const FRAME_WIDTH: usize = 57;
pub const FRAME_Q: usize = 0;
pub const FRAME_APREV: usize = 27;
pub const FRAME_RPY: usize = 39;
pub const FRAME_GOAL: usize = 42;
/// Privileged observations append base linear velocity (3) and height (1).
pub const FRAME_WIDTH_PRIVILEGED: usize = FRAME_WIDTH + 4;
pub const OBS_WINDOW: usize = 15;

/// Per-episode randomized physical parameters. Defaults are the
/// randomization-off values.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainParams {
    pub friction: f64,
    pub base_mass_delta: f64,
    pub hand_mass: [f64; 2],
    pub base_com_offset: Vec3,
    pub link_inertia_scale: f64,
    pub link_mass_scale: f64,
    pub p_gain_scale: f64,
    pub d_gain_scale: f64,
    pub torque_limit_scale: f64,
    pub motor_damping: f64,
    /// Whole-substep delay slots (0..=10 at 1 kHz).
    pub motor_delay_slots: usize,
    pub action_scale: f64,
    pub hang: bool,
    pub init_joint_offsets: [f64; NUM_JOINTS],
}

impl Default for DomainParams {
    fn default() -> Self {
        DomainParams {
            friction: 1.0,
            base_mass_delta: 0.0,
            hand_mass: [0.0, 0.0],
            base_com_offset: [0.0; 3],
            link_inertia_scale: 1.0,
            link_mass_scale: 1.0,
            p_gain_scale: 1.0,
            d_gain_scale: 1.0,
            torque_limit_scale: 1.0,
            motor_damping: 0.0,
            motor_delay_slots: 0,
            action_scale: 1.0,
            hang: false,
            init_joint_offsets: [0.0; NUM_JOINTS],
        }
    }
}

impl DomainParams {
    /// Sample per the randomization table. Every row is drawn regardless of
    /// its toggle (keeping the RNG stream aligned across configurations);
    /// disabled rows fall back to defaults.
    pub fn sample(rng: &mut ChaCha8Rng, t: &DrToggles, cfg: &SimConfig) -> Self {
        let mut dp = DomainParams::default();
        let friction = rng.gen_range(0.1..2.0);
        let base_mass = rng.gen_range(-5.0..5.0);
        let hand_mass = [rng.gen_range(0.0..2.5), rng.gen_range(0.0..2.5)];
        let base_com = [
            rng.gen_range(-0.05..0.05),
            rng.gen_range(-0.05..0.05),
            rng.gen_range(-0.05..0.05),
        ];
        let link_inertia = rng.gen_range(0.8..1.2);
        let link_mass = rng.gen_range(0.8..1.2);
        let p_gain = rng.gen_range(0.8..1.2);
        let d_gain = rng.gen_range(0.8..1.2);
        let torque = rng.gen_range(0.8..1.2);
        let damping = rng.gen_range(0.3..4.0);
        let delay_ms: f64 = rng.gen_range(0.0..10.0);
        let action_scale = rng.gen_range(0.98..1.02);
        let hang: f64 = rng.gen_range(0.0..1.0);
        let mut offsets = [0.0; NUM_JOINTS];
        for o in offsets.iter_mut() {
            *o = rng.gen_range(-0.1..0.1);
        }
        if t.friction {
            dp.friction = friction;
        }
        if t.base_mass {
            dp.base_mass_delta = base_mass;
        }
        if t.hand_mass {
            dp.hand_mass = hand_mass;
        }
        if t.base_com {
            dp.base_com_offset = base_com;
        }
        if t.link_inertia {
            dp.link_inertia_scale = link_inertia;
        }
        if t.link_mass {
            dp.link_mass_scale = link_mass;
        }
        if t.p_gain {
            dp.p_gain_scale = p_gain;
        }
        if t.d_gain {
            dp.d_gain_scale = d_gain;
        }
        if t.motor_torque {
            dp.torque_limit_scale = torque;
        }
        if t.motor_damping {
            dp.motor_damping = damping;
        }
        if t.motor_delay {
            dp.motor_delay_slots = delay_ms.round() as usize;
        }
        if t.action_scale {
            dp.action_scale = action_scale;
        }
        if t.hang {
            dp.hang = hang < cfg.hang_prob;
        }
        if t.init_joint {
            dp.init_joint_offsets = offsets;
        }
        dp
    }
}

/// Full simulator state: everything needed to continue an episode
/// bit-identically, including the episode RNG.
#[derive(Clone, Debug)]
pub struct SimState {
    pub pose: Pose,
    pub qd: [f64; NUM_JOINTS],
    pub base_lin_vel: Vec3,
    pub base_ang_vel: Vec3,
    /// Mean vertical contact force per foot over the last control step.
    pub foot_fz: [f64; 2],
    /// Mean self-collision force magnitude per sphere pair.
    pub pair_forces: Vec<f64>,
    /// Mean horizontal sole-center speed per foot.
    pub foot_speed: [f64; 2],
    /// Mean applied joint torques over the last control step.
    pub tau_mean: [f64; NUM_JOINTS],
    pub substep_count: u64,
    pub step_count: u64,
    pub dp: DomainParams,
    pub rng: ChaCha8Rng,
    /// Delayed-torque ring buffer (len = delay slots + 1).
    torque_ring: Vec<[f64; NUM_JOINTS]>,
    ring_head: usize,
    // control-step bookkeeping for rewards
    pub prev_ctrl_base_vel: Vec3,
    pub prev_ctrl_qd: [f64; NUM_JOINTS],
    action_hist: [[f64; NUM_ACTIONS]; 3],
    actions_seen: usize,
    // substep bookkeeping
    prev_corners: [[Vec3; 4]; 2],
    prev_rel_com: Vec3,
    prev_rel_com_vel: Vec3,
    prev_body_coms: Vec<Vec3>,
    prev_limb_ang_momentum: Vec3,
    momentum_history: usize,
}

impl SimState {
    pub fn time(&self, cfg: &SimConfig) -> f64 {
        self.substep_count as f64 * cfg.substep_dt
    }

    pub fn last_action(&self) -> [f64; NUM_ACTIONS] {
        self.action_hist[0]
    }
}

/// Reward kernel inputs, all at control-step boundaries.
#[derive(Clone, Debug)]
pub struct RewardInputs {
    pub rpy: Vec3,
    pub pg: Vec3,
    pub h: f64,
    pub h_ref: f64,
    pub v: Vec3,
    pub v_prev: Vec3,
    pub omega: Vec3,
    pub q_leg: [f64; NUM_LEG_JOINTS],
    pub q_leg_ref: [f64; NUM_LEG_JOINTS],
    pub foot_fz: [f64; 2],
    pub foot_speed: [f64; 2],
    pub action: [f64; NUM_ACTIONS],
    pub action_prev: [f64; NUM_ACTIONS],
    pub action_prev2: [f64; NUM_ACTIONS],
    pub tau: [f64; NUM_JOINTS],
    pub qd: [f64; NUM_JOINTS],
    pub qdd: [f64; NUM_JOINTS],
}

pub const REWARD_NAMES: [&str; 15] = [
    "base_orientation",
    "projected_gravity",
    "base_height",
    "base_lin_vel",
    "base_ang_vel",
    "base_acceleration",
    "leg_dof_position",
    "feet_contact",
    "feet_slip",
    "action_range",
    "action_rate",
    "action_acceleration",
    "torques",
    "dof_velocity",
    "dof_acceleration",
];

pub const REWARD_WEIGHTS: [f64; 15] = [
    3.0, 3.0, 0.2, 0.75, 0.75, 0.2, 1.0, 0.5, 0.2, -0.075, -1.5, -1.5, -1e-5, -1e-4, -1e-7,
];

/// Weighted per-term reward breakdown; the total is exactly the sum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RewardTerms(pub [f64; 15]);

impl RewardTerms {
    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }
}

fn norm1(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// The full reward: weighted sum of all fifteen terms with the exact kernel
/// expressions. Returns the total and the weighted breakdown.
pub fn reward_total(inp: &RewardInputs) -> (f64, RewardTerms) {
    let mut t = [0.0; 15];
    // regularization
    t[0] = REWARD_WEIGHTS[0] * (-10.0 * norm1(&inp.rpy[..2])).exp();
    t[1] = REWARD_WEIGHTS[1] * (-20.0 * norm2(&inp.pg[..2])).exp();
    t[2] = REWARD_WEIGHTS[2] * (-100.0 * (inp.h - inp.h_ref).abs()).exp();
    t[3] = REWARD_WEIGHTS[3] * (-10.0 * sq_norm(&inp.v)).exp();
    t[4] = REWARD_WEIGHTS[4] * (-20.0 * norm2(&inp.omega)).exp();
    let dv = [
        inp.v[0] - inp.v_prev[0],
        inp.v[1] - inp.v_prev[1],
        inp.v[2] - inp.v_prev[2],
    ];
    t[5] = REWARD_WEIGHTS[5] * (-3.0 * norm2(&dv)).exp();
    let dq: Vec<f64> = inp
        .q_leg
        .iter()
        .zip(&inp.q_leg_ref)
        .map(|(a, b)| a - b)
        .collect();
    t[6] = REWARD_WEIGHTS[6] * (-100.0 * norm2(&dq)).exp();
    // feet terms use per-foot contact indicators averaged over both feet
    let contact = [inp.foot_fz[0] >= 5.0, inp.foot_fz[1] >= 5.0];
    let contact_mean =
        (contact[0] as u8 as f64 + contact[1] as u8 as f64) / 2.0;
    t[7] = REWARD_WEIGHTS[7] * contact_mean;
    let slip = (if contact[0] { inp.foot_speed[0].sqrt() } else { 0.0 }
        + if contact[1] { inp.foot_speed[1].sqrt() } else { 0.0 })
        / 2.0;
    t[8] = REWARD_WEIGHTS[8] * slip;
    // energy
    t[9] = REWARD_WEIGHTS[9] * norm1(&inp.action);
    let da: Vec<f64> = inp
        .action
        .iter()
        .zip(&inp.action_prev)
        .map(|(a, b)| a - b)
        .collect();
    t[10] = REWARD_WEIGHTS[10] * sq_norm(&da);
    let dda: Vec<f64> = (0..NUM_ACTIONS)
        .map(|i| inp.action[i] + inp.action_prev2[i] - 2.0 * inp.action_prev[i])
        .collect();
    t[11] = REWARD_WEIGHTS[11] * sq_norm(&dda);
    t[12] = REWARD_WEIGHTS[12] * sq_norm(&inp.tau);
    t[13] = REWARD_WEIGHTS[13] * sq_norm(&inp.qd);
    t[14] = REWARD_WEIGHTS[14] * sq_norm(&inp.qdd);
    let terms = RewardTerms(t);
    (terms.total(), terms)
}

/// Episode ends when the projected gravity tips past 0.7 on x or y
/// (strict inequality).
pub fn termination_from_pg(pg: Vec3) -> bool {
    pg[0].abs() > 0.7 || pg[1].abs() > 0.7
}

pub fn check_termination(state: &SimState) -> bool {
    termination_from_pg(projected_gravity(state.pose.base_quat))
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub reward: f64,
    pub terms: RewardTerms,
    pub terminated: bool,
}

struct PairSpec {
    sphere_a: usize,
    sphere_b: usize,
    link_a: usize,
    link_b: usize,
    radius_sum: f64,
}

/// The environment: immutable model + config, stateless across episodes.
pub struct SimEnv {
    pub model: Arc<RobotModel>,
    pub cfg: SimConfig,
    /// Per joint: links in its subtree (for generalized gravity).
    descendants: Vec<Vec<usize>>,
    /// Per link: chain of joint indices from the root.
    ancestor_joints: Vec<Vec<usize>>,
    pairs: Vec<PairSpec>,
    wrist_links: [usize; 2],
    foot_links: [usize; 2],
}

impl SimEnv {
    pub fn new(model: Arc<RobotModel>, cfg: SimConfig) -> Self {
        let n = model.links.len();
        let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (i, l) in model.links.iter().enumerate() {
            if let Some(p) = l.parent {
                children[p].push(i);
            }
        }
        // subtree links per joint (joint j drives link j+1)
        let mut descendants = vec![Vec::new(); NUM_JOINTS];
        for j in 0..NUM_JOINTS {
            let mut stack = vec![j + 1];
            while let Some(l) = stack.pop() {
                descendants[j].push(l);
                stack.extend(children[l].iter().copied());
            }
        }
        let mut ancestor_joints = vec![Vec::new(); n];
        for i in 1..n {
            let mut chain = Vec::new();
            let mut cur = i;
            while let Some(p) = model.links[cur].parent {
                chain.push(cur - 1);
                cur = p;
            }
            chain.reverse();
            ancestor_joints[i] = chain;
        }
        let sphere_links: Vec<usize> = model
            .collision_spheres
            .iter()
            .map(|s| model.link_index(&s.link).expect("validated"))
            .collect();
        let mut pairs = Vec::new();
        for i in 0..model.collision_spheres.len() {
            for j in (i + 1)..model.collision_spheres.len() {
                if sphere_links[i] == sphere_links[j] {
                    continue;
                }
                pairs.push(PairSpec {
                    sphere_a: i,
                    sphere_b: j,
                    link_a: sphere_links[i],
                    link_b: sphere_links[j],
                    radius_sum: model.collision_spheres[i].radius
                        + model.collision_spheres[j].radius,
                });
            }
        }
        let wrist_links = [
            model.link_index("l_wrist_roll").expect("wrist link"),
            model.link_index("r_wrist_roll").expect("wrist link"),
        ];
        let foot_links = [
            model.link_index(&model.feet[0].link).expect("foot link"),
            model.link_index(&model.feet[1].link).expect("foot link"),
        ];
        SimEnv {
            model,
            cfg,
            descendants,
            ancestor_joints,
            pairs,
            wrist_links,
            foot_links,
        }
    }

    pub fn num_pairs(&self) -> usize {
        self.pairs.len()
    }

    /// Pair labels matching `SimState::pair_forces` order.
    pub fn pair_names(&self) -> Vec<(String, String)> {
        self.pairs
            .iter()
            .map(|p| {
                (
                    self.model.collision_spheres[p.sphere_a].link.clone(),
                    self.model.collision_spheres[p.sphere_b].link.clone(),
                )
            })
            .collect()
    }

    fn effective_mass(&self, link: usize, dp: &DomainParams) -> f64 {
        let mut m = self.model.links[link].mass * dp.link_mass_scale;
        if link == 0 {
            m += dp.base_mass_delta;
        }
        if link == self.wrist_links[0] {
            m += dp.hand_mass[0];
        }
        if link == self.wrist_links[1] {
            m += dp.hand_mass[1];
        }
        m
    }

    fn link_com_world(&self, fk: &FkResult, link: usize, dp: &DomainParams) -> Vec3 {
        let mut local = self.model.links[link].com;
        if link == 0 {
            local = v_add(local, dp.base_com_offset);
        }
        fk.point_on(link, local)
    }

    /// Fresh episode: default pose plus sampled randomization; deterministic
    /// for a given seed.
    pub fn reset(&self, seed: u64) -> SimState {
        let mut rng = rng_from_seed(seed);
        let mut dp = DomainParams::sample(&mut rng, &self.cfg.dr, &self.cfg);
        if let Some([lo, hi]) = self.cfg.hand_load_range {
            dp.hand_mass[0] += rng.gen_range(lo..hi);
            dp.hand_mass[1] += rng.gen_range(lo..hi);
        }
        let mut q = self.model.default_pose.clone();
        for (j, v) in q.iter_mut().enumerate() {
            *v += dp.init_joint_offsets[j];
        }
        self.model.clamp_to_limits(&mut q);
        let h = self.model.h_ref + if dp.hang { self.cfg.hang_height } else { 0.0 };
        let pose = Pose::new([0.0, 0.0, h], IDENTITY_QUAT, q);
        let fk = forward_kinematics(&self.model, &pose);
        let mut prev_corners = [[[0.0; 3]; 4]; 2];
        for f in 0..2 {
            for (c, corner) in self.model.feet[f].corners.iter().enumerate() {
                prev_corners[f][c] = fk.point_on(self.foot_links[f], *corner);
            }
        }
        let ring_len = dp.motor_delay_slots + 1;
        SimState {
            pose,
            qd: [0.0; NUM_JOINTS],
            base_lin_vel: [0.0; 3],
            base_ang_vel: [0.0; 3],
            foot_fz: [0.0; 2],
            pair_forces: vec![0.0; self.pairs.len()],
            foot_speed: [0.0; 2],
            tau_mean: [0.0; NUM_JOINTS],
            substep_count: 0,
            step_count: 0,
            dp,
            rng,
            torque_ring: vec![[0.0; NUM_JOINTS]; ring_len],
            ring_head: 0,
            prev_ctrl_base_vel: [0.0; 3],
            prev_ctrl_qd: [0.0; NUM_JOINTS],
            action_hist: [[0.0; NUM_ACTIONS]; 3],
            actions_seen: 0,
            prev_corners,
            prev_rel_com: [0.0; 3],
            prev_rel_com_vel: [0.0; 3],
            prev_body_coms: vec![[0.0; 3]; self.model.links.len()],
            prev_limb_ang_momentum: [0.0; 3],
            momentum_history: 0,
        }
    }

    /// Advance one control step (20 substeps of 1 ms) under a PD controller
    /// tracking the commanded leg action and upper-body target.
    pub fn step(
        &self,
        state: &mut SimState,
        action: &[f64; NUM_ACTIONS],
        upper_target: &[f64; NUM_UPPER_JOINTS],
    ) -> StepOutcome {
        assert!(
            action.iter().all(|a| a.is_finite()),
            "action must be finite"
        );
        state.action_hist = [*action, state.action_hist[0], state.action_hist[1]];
        state.actions_seen += 1;

        // PD targets: legs offset from the default pose, upper tracked raw,
        // both clamped to joint limits.
        let mut targets = [0.0; NUM_JOINTS];
        let legs_ref = self.model.default_leg_pose();
        for j in 0..NUM_LEG_JOINTS {
            targets[j] = legs_ref[j]
                + self.cfg.action_offset_scale * (action[j] * state.dp.action_scale);
        }
        for j in 0..NUM_UPPER_JOINTS {
            targets[UPPER_JOINT_OFFSET + j] = upper_target[j];
        }
        self.model.clamp_to_limits(&mut targets);

        let substeps = self.cfg.substeps_per_control;
        let mut fz_acc = [0.0; 2];
        let mut speed_acc = [0.0; 2];
        let mut pair_acc = vec![0.0; self.pairs.len()];
        let mut tau_acc = [0.0; NUM_JOINTS];
        for _ in 0..substeps {
            self.substep(state, &targets, &mut fz_acc, &mut speed_acc, &mut pair_acc, &mut tau_acc);
        }
        let inv = 1.0 / substeps as f64;
        for f in 0..2 {
            state.foot_fz[f] = fz_acc[f] * inv;
            state.foot_speed[f] = speed_acc[f] * inv;
        }
        for (dst, src) in state.pair_forces.iter_mut().zip(&pair_acc) {
            *dst = src * inv;
        }
        for j in 0..NUM_JOINTS {
            state.tau_mean[j] = tau_acc[j] * inv;
        }

        let ctrl_dt = self.cfg.control_dt();
        let mut qdd = [0.0; NUM_JOINTS];
        for j in 0..NUM_JOINTS {
            qdd[j] = (state.qd[j] - state.prev_ctrl_qd[j]) / ctrl_dt;
        }
        let mut q_leg = [0.0; NUM_LEG_JOINTS];
        q_leg.copy_from_slice(&state.pose.q[..NUM_LEG_JOINTS]);
        let inputs = RewardInputs {
            rpy: q_to_rpy(state.pose.base_quat),
            pg: projected_gravity(state.pose.base_quat),
            h: state.pose.base_pos[2],
            h_ref: self.model.h_ref,
            v: state.base_lin_vel,
            v_prev: state.prev_ctrl_base_vel,
            omega: state.base_ang_vel,
            q_leg,
            q_leg_ref: legs_ref,
            foot_fz: state.foot_fz,
            foot_speed: state.foot_speed,
            action: state.action_hist[0],
            action_prev: state.action_hist[1],
            action_prev2: state.action_hist[2],
            tau: state.tau_mean,
            qd: state.qd,
            qdd,
        };
        let (reward, terms) = reward_total(&inputs);
        state.prev_ctrl_base_vel = state.base_lin_vel;
        state.prev_ctrl_qd = state.qd;
        state.step_count += 1;
        let terminated = check_termination(state);
        StepOutcome { reward, terms, terminated }
    }

    #[allow(clippy::too_many_arguments)]
    fn substep(
        &self,
        state: &mut SimState,
        targets: &[f64; NUM_JOINTS],
        fz_acc: &mut [f64; 2],
        speed_acc: &mut [f64; 2],
        pair_acc: &mut [f64],
        tau_acc: &mut [f64; NUM_JOINTS],
    ) {
        let cfg = &self.cfg;
        let dt = cfg.substep_dt;
        let dp = state.dp.clone();
        let model = &self.model;
        let g_vec: Vec3 = if cfg.gravity_enabled { [0.0, 0.0, -cfg.gravity] } else { [0.0; 3] };

        let fk = forward_kinematics(model, &state.pose);

        // aggregate mass / COM / inertia about COM
        let mut total_mass = 0.0;
        let mut com = [0.0; 3];
        let mut link_coms = Vec::with_capacity(model.links.len());
        for i in 0..model.links.len() {
            let m = self.effective_mass(i, &dp);
            let c = self.link_com_world(&fk, i, &dp);
            total_mass += m;
            com = v_add(com, v_scale(c, m));
            link_coms.push((m, c));
        }
        com = v_scale(com, 1.0 / total_mass);
        let mut inertia = [[0.0; 3]; 3];
        for (i, (m, c)) in link_coms.iter().enumerate() {
            let r = v_sub(*c, com);
            let r2 = v_dot(r, r);
            let scale = dp.link_inertia_scale;
            let diag = model.links[i].inertia;
            let rot = &fk.rot[i];
            // rotate the diagonal link inertia into world: R diag R^T
            for a in 0..3 {
                for b in 0..3 {
                    let mut rd = 0.0;
                    for k in 0..3 {
                        rd += rot[a][k] * diag[k] * scale * rot[b][k];
                    }
                    inertia[a][b] += rd + m * (if a == b { r2 } else { 0.0 } - r[a] * r[b]);
                }
            }
        }

        // joint torques: PD -> limit clamp -> delay ring -> damping
        let mut tau_cmd = [0.0; NUM_JOINTS];
        for j in 0..NUM_JOINTS {
            let (kp, kd, lim) = if j < NUM_LEG_JOINTS {
                (cfg.kp_legs, cfg.kd_legs, cfg.torque_limit_legs)
            } else {
                (cfg.kp_upper, cfg.kd_upper, cfg.torque_limit_upper)
            };
            let kp = kp * dp.p_gain_scale;
            let kd = kd * dp.d_gain_scale;
            let lim = lim * dp.torque_limit_scale;
            let t = kp * (targets[j] - state.pose.q[j]) - kd * state.qd[j];
            tau_cmd[j] = t.clamp(-lim, lim);
        }
        let ring_len = state.torque_ring.len();
        state.torque_ring[state.ring_head] = tau_cmd;
        // oldest entry = delayed command
        let delayed = state.torque_ring[(state.ring_head + 1) % ring_len];
        state.ring_head = (state.ring_head + 1) % ring_len;

        // generalized gravity per joint over its subtree
        let mut tau_gravity = [0.0; NUM_JOINTS];
        if cfg.gravity_enabled {
            for j in 0..NUM_JOINTS {
                let link = j + 1;
                let axis_world = m_vec(&fk.rot[link], model.links[link].axis);
                let pj = fk.pos[link];
                let mut acc = 0.0;
                for &l in &self.descendants[j] {
                    let (m, c) = link_coms[l];
                    acc += m * v_dot(axis_world, v_cross(v_sub(c, pj), g_vec));
                }
                tau_gravity[j] = acc;
            }
        }

        // self-collision forces: recorded, pushed into the joints of both links
        let centers = sphere_centers(model, &fk);
        let mut tau_collision = [0.0; NUM_JOINTS];
        for (pi, pair) in self.pairs.iter().enumerate() {
            let delta = v_sub(centers[pair.sphere_a], centers[pair.sphere_b]);
            let dist = v_norm(delta).max(1e-9);
            let pen = pair.radius_sum - dist;
            if pen <= 0.0 {
                continue;
            }
            let mag = cfg.self_collision_stiffness * pen;
            pair_acc[pi] += mag;
            let dir = v_scale(delta, 1.0 / dist);
            let f_a = v_scale(dir, mag);
            for (&link, f) in [(pair.link_a, f_a), (pair.link_b, v_scale(dir, -mag))]
                .iter()
                .map(|(l, f)| (l, *f))
            {
                let p_s = centers[if link == pair.link_a { pair.sphere_a } else { pair.sphere_b }];
                for &j in &self.ancestor_joints[link] {
                    let jl = j + 1;
                    let axis_world = m_vec(&fk.rot[jl], model.links[jl].axis);
                    tau_collision[j] += v_dot(axis_world, v_cross(v_sub(p_s, fk.pos[jl]), f));
                }
            }
        }

        // foot corner contacts
        let mut force = v_scale(g_vec, total_mass);
        let mut torque = [0.0; 3];
        if cfg.contacts_enabled {
            for f in 0..2 {
                let li = self.foot_links[f];
                let mut foot_fz = 0.0;
                let mut center_vel = [0.0; 3];
                for (ci, corner) in model.feet[f].corners.iter().enumerate() {
                    let p = fk.point_on(li, *corner);
                    let vel = v_scale(v_sub(p, state.prev_corners[f][ci]), 1.0 / dt);
                    center_vel = v_add(center_vel, v_scale(vel, 0.25));
                    state.prev_corners[f][ci] = p;
                    if p[2] < 0.0 {
                        let depth = -p[2];
                        let fn_z =
                            (cfg.contact_stiffness * depth - cfg.contact_damping * vel[2]).max(0.0);
                        let slip = [vel[0], vel[1], 0.0];
                        let slip_mag = v_norm(slip);
                        let ft = v_scale(
                            slip,
                            -dp.friction * fn_z / (slip_mag + cfg.friction_vel_eps),
                        );
                        let fc = [ft[0], ft[1], fn_z];
                        force = v_add(force, fc);
                        torque = v_add(torque, v_cross(v_sub(p, com), fc));
                        foot_fz += fn_z;
                    }
                }
                fz_acc[f] += foot_fz;
                speed_acc[f] += (center_vel[0] * center_vel[0] + center_vel[1] * center_vel[1]).sqrt();
            }
        } else {
            for f in 0..2 {
                let li = self.foot_links[f];
                for (ci, corner) in model.feet[f].corners.iter().enumerate() {
                    state.prev_corners[f][ci] = fk.point_on(li, *corner);
                }
            }
        }

        // limb-motion reaction wrench: the joint-driven part of the link
        // momenta must react on the base, so fast arm swings genuinely push
        // and twist the aggregate. Joint-induced link velocities come from
        // finite differences of body-frame link COM positions.
        let r_base = q_to_mat(state.pose.base_quat);
        let r_base_t = m_transpose(&r_base);
        let rel_com = m_vec(&r_base_t, v_sub(com, state.pose.base_pos));
        let mut limb_l = [0.0; 3];
        for (i, (m, c)) in link_coms.iter().enumerate() {
            let body = m_vec(&r_base_t, v_sub(*c, state.pose.base_pos));
            if state.momentum_history >= 1 {
                let v_joint =
                    m_vec(&r_base, v_scale(v_sub(body, state.prev_body_coms[i]), 1.0 / dt));
                limb_l = v_add(limb_l, v_scale(v_cross(v_sub(*c, com), v_joint), *m));
            }
            state.prev_body_coms[i] = body;
        }
        if state.momentum_history >= 1 {
            let rel_vel = v_scale(v_sub(rel_com, state.prev_rel_com), 1.0 / dt);
            if state.momentum_history >= 2 {
                let rel_acc = v_scale(v_sub(rel_vel, state.prev_rel_com_vel), 1.0 / dt);
                let f_react = clamp_vec(
                    v_scale(m_vec(&r_base, rel_acc), -total_mass),
                    3.0 * total_mass * cfg.gravity,
                );
                force = v_add(force, f_react);
                let t_react = clamp_vec(
                    v_scale(v_sub(limb_l, state.prev_limb_ang_momentum), -1.0 / dt),
                    0.5 * total_mass * cfg.gravity,
                );
                torque = v_add(torque, t_react);
            }
            state.prev_rel_com_vel = rel_vel;
            state.prev_limb_ang_momentum = limb_l;
        }
        state.prev_rel_com = rel_com;
        state.momentum_history += 1;

        // aggregate Newton-Euler about the COM
        let gyro = v_cross(state.base_ang_vel, m_vec(&inertia, state.base_ang_vel));
        let ang_acc = m_solve(&inertia, v_sub(torque, gyro));
        let lin_acc = v_scale(force, 1.0 / total_mass);
        let v_old = state.base_lin_vel;
        state.base_lin_vel = v_add(state.base_lin_vel, v_scale(lin_acc, dt));
        state.base_ang_vel = v_add(state.base_ang_vel, v_scale(ang_acc, dt));
        let com_shift = v_scale(v_add(v_old, state.base_lin_vel), 0.5 * dt);
        // rotate the base about the (translated) COM, then translate
        let dq = q_from_omega_dt(state.base_ang_vel, dt);
        let rot_inc = q_to_mat(dq);
        let new_com = v_add(com, com_shift);
        state.pose.base_pos = v_add(new_com, m_vec(&rot_inc, v_sub(state.pose.base_pos, com)));
        state.pose.base_quat = q_normalize(q_mul(dq, state.pose.base_quat));

        // servo joints: effective-inertia second-order dynamics
        for j in 0..NUM_JOINTS {
            let inertia_j = if j < NUM_LEG_JOINTS {
                cfg.joint_inertia_legs
            } else {
                cfg.joint_inertia_upper
            } * dp.link_inertia_scale;
            let tau = delayed[j] - dp.motor_damping * state.qd[j] + tau_gravity[j]
                + tau_collision[j];
            tau_acc[j] += delayed[j];
            let qdd = tau / inertia_j;
            let qd_old = state.qd[j];
            state.qd[j] += qdd * dt;
            let lim = self.model.joint_limits[j];
            let q_new = state.pose.q[j] + 0.5 * (qd_old + state.qd[j]) * dt;
            if q_new <= lim[0] {
                state.pose.q[j] = lim[0];
                state.qd[j] = state.qd[j].max(0.0);
            } else if q_new >= lim[1] {
                state.pose.q[j] = lim[1];
                state.qd[j] = state.qd[j].min(0.0);
            } else {
                state.pose.q[j] = q_new;
            }
        }

        state.substep_count += 1;

        // scheduled pushes at exact multiples of the interval
        if cfg.dr.push {
            let interval = (cfg.push_interval_s / dt).round() as u64;
            if interval > 0 && state.substep_count % interval == 0 {
                let angle: f64 = state.rng.gen_range(0.0..std::f64::consts::TAU);
                let sign: f64 = if state.rng.gen_range(0.0..1.0) < 0.5 { 1.0 } else { -1.0 };
                state.base_lin_vel = v_add(
                    state.base_lin_vel,
                    v_scale([angle.cos(), angle.sin(), 0.0], cfg.push_lin_vel),
                );
                state.base_ang_vel[2] += sign * cfg.push_yaw_vel;
            }
        }

        let finite = state.pose.base_pos.iter().all(|x| x.is_finite())
            && state.pose.base_quat.iter().all(|x| x.is_finite())
            && state.pose.q.iter().all(|x| x.is_finite())
            && state.qd.iter().all(|x| x.is_finite());
        if !finite {
            panic!("NaN state at substep {}", state.substep_count);
        }
    }

    /// Total mechanical energy under the aggregate model (for drift checks).
    pub fn mechanical_energy(&self, state: &SimState) -> f64 {
        let fk = forward_kinematics(&self.model, &state.pose);
        let dp = &state.dp;
        let mut total_mass = 0.0;
        let mut com = [0.0; 3];
        for i in 0..self.model.links.len() {
            let m = self.effective_mass(i, dp);
            total_mass += m;
            com = v_add(com, v_scale(self.link_com_world(&fk, i, dp), m));
        }
        com = v_scale(com, 1.0 / total_mass);
        let mut inertia = [[0.0; 3]; 3];
        for i in 0..self.model.links.len() {
            let m = self.effective_mass(i, dp);
            let c = self.link_com_world(&fk, i, dp);
            let r = v_sub(c, com);
            let r2 = v_dot(r, r);
            let diag = self.model.links[i].inertia;
            let rot = &fk.rot[i];
            for a in 0..3 {
                for b in 0..3 {
                    let mut rd = 0.0;
                    for k in 0..3 {
                        rd += rot[a][k] * diag[k] * dp.link_inertia_scale * rot[b][k];
                    }
                    inertia[a][b] += rd + m * (if a == b { r2 } else { 0.0 } - r[a] * r[b]);
                }
            }
        }
        let v = state.base_lin_vel;
        let w = state.base_ang_vel;
        let ke_lin = 0.5 * total_mass * v_dot(v, v);
        let ke_rot = 0.5 * v_dot(w, m_vec(&inertia, w));
        let mut ke_joints = 0.0;
        for j in 0..NUM_JOINTS {
            let inertia_j = if j < NUM_LEG_JOINTS {
                self.cfg.joint_inertia_legs
            } else {
                self.cfg.joint_inertia_upper
            } * dp.link_inertia_scale;
            ke_joints += 0.5 * inertia_j * state.qd[j] * state.qd[j];
        }
        let pe = if self.cfg.gravity_enabled {
            total_mass * self.cfg.gravity * com[2]
        } else {
            0.0
        };
        ke_lin + ke_rot + ke_joints + pe
    }
}

fn clamp_vec(v: Vec3, max_norm: f64) -> Vec3 {
    let n = v_norm(v);
    if n > max_norm {
        v_scale(v, max_norm / n)
    } else {
        v
    }
}

fn q_from_omega_dt(omega: Vec3, dt: f64) -> Quat {
    let angle = v_norm(omega) * dt;
    if angle < 1e-14 {
        return IDENTITY_QUAT;
    }
    q_from_axis_angle(v_scale(omega, 1.0 / v_norm(omega)), angle)
}

// ---------------------------------------------------------------------------
// Observations
// ---------------------------------------------------------------------------

/// One observation frame: [q, a_prev, rpy, g] (+ [v, h] when privileged).
pub fn state_frame(
    state: &SimState,
    prev_action: &[f64; NUM_ACTIONS],
    goal: &[f64; NUM_UPPER_JOINTS],
    privileged: bool,
) -> Vec<f64> {
    let mut frame = Vec::with_capacity(if privileged { FRAME_WIDTH_PRIVILEGED } else { FRAME_WIDTH });
    frame.extend_from_slice(&state.pose.q);
    frame.extend_from_slice(prev_action);
    frame.extend_from_slice(&q_to_rpy(state.pose.base_quat));
    frame.extend_from_slice(goal);
    if privileged {
        frame.extend_from_slice(&state.base_lin_vel);
        frame.push(state.pose.base_pos[2]);
    }
    debug_assert_eq!(frame.len(), if privileged { FRAME_WIDTH_PRIVILEGED } else { FRAME_WIDTH });
    frame
}

/// Fixed-length stack of the last T frames, zero-padded before the T-th step.
#[derive(Clone, Debug)]
pub struct ObsBuilder {
    window: usize,
    width: usize,
    frames: std::collections::VecDeque<Vec<f64>>,
}

impl ObsBuilder {
    pub fn new(window: usize, width: usize) -> Self {
        ObsBuilder { window, width, frames: Default::default() }
    }

    pub fn reset(&mut self) {
        self.frames.clear();
    }

    pub fn push(&mut self, frame: Vec<f64>) {
        assert_eq!(frame.len(), self.width);
        if self.frames.len() == self.window {
            self.frames.pop_front();
        }
        self.frames.push_back(frame);
    }

    /// Flattened T x D window, oldest first.
    pub fn window_flat(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.window * self.width];
        let pad = self.window - self.frames.len();
        for (i, f) in self.frames.iter().enumerate() {
            out[(pad + i) * self.width..(pad + i + 1) * self.width].copy_from_slice(f);
        }
        out
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn window(&self) -> usize {
        self.window
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SimConfig;

    fn env_with(mut f: impl FnMut(&mut SimConfig)) -> SimEnv {
        let mut cfg = SimConfig::default();
        f(&mut cfg);
        SimEnv::new(Arc::new(RobotModel::default_humanoid()), cfg)
    }

    fn zero_action() -> [f64; NUM_ACTIONS] {
        [0.0; NUM_ACTIONS]
    }

    fn default_upper(env: &SimEnv) -> [f64; NUM_UPPER_JOINTS] {
        env.model.default_upper_pose()
    }

    #[test]
    fn reset_without_dr_is_default_pose() {
        let env = env_with(|_| {});
        let s = env.reset(123);
        assert_eq!(s.pose.base_pos, [0.0, 0.0, env.model.h_ref]);
        assert_eq!(s.pose.q, env.model.default_pose);
        assert_eq!(s.qd, [0.0; NUM_JOINTS]);
        assert_eq!(s.dp, DomainParams::default());
    }

    #[test]
    fn reset_is_bit_deterministic() {
        let env = env_with(|c| c.dr = DrToggles::all_on());
        let a = env.reset(999);
        let b = env.reset(999);
        assert_eq!(a.pose, b.pose);
        assert_eq!(a.dp, b.dp);
        assert_eq!(a.base_lin_vel, b.base_lin_vel);
    }

    #[test]
    fn dr_sampling_distributions() {
        let env = env_with(|c| c.dr = DrToggles::all_on());
        let n = 10_000;
        let mut hang_count = 0usize;
        let mut offsets: Vec<f64> = Vec::with_capacity(n);
        for seed in 0..n as u64 {
            let s = env.reset(seed);
            if s.dp.hang {
                hang_count += 1;
            }
            offsets.push(s.dp.init_joint_offsets[0]);
            assert!((0.1..=2.0).contains(&s.dp.friction));
            assert!((-5.0..=5.0).contains(&s.dp.base_mass_delta));
            assert!((0.0..=2.5).contains(&s.dp.hand_mass[0]));
            assert!((0.8..=1.2).contains(&s.dp.p_gain_scale));
            assert!(s.dp.motor_delay_slots <= 10);
            assert!((0.3..=4.0).contains(&s.dp.motor_damping));
        }
        let hang_freq = hang_count as f64 / n as f64;
        assert!(
            (0.18..=0.22).contains(&hang_freq),
            "hang frequency {hang_freq}"
        );
        // KS statistic of init offsets against U(-0.1, 0.1)
        offsets.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut ks: f64 = 0.0;
        for (i, x) in offsets.iter().enumerate() {
            let cdf = (x + 0.1) / 0.2;
            let emp_hi = (i + 1) as f64 / n as f64;
            let emp_lo = i as f64 / n as f64;
            ks = ks.max((cdf - emp_lo).abs()).max((cdf - emp_hi).abs());
        }
        assert!(ks < 0.02, "KS statistic {ks}");
    }

    #[test]
    fn zero_gravity_zero_velocity_is_equilibrium() {
        let env = env_with(|c| {
            c.gravity_enabled = false;
        });
        let mut s = env.reset(0);
        let before = s.pose.clone();
        let upper = default_upper(&env);
        for _ in 0..5 {
            env.step(&mut s, &zero_action(), &upper);
        }
        assert_eq!(s.pose.base_pos, before.base_pos);
        assert_eq!(s.pose.q, before.q);
        assert_eq!(s.base_lin_vel, [0.0; 3]);
    }

    #[test]
    fn freefall_matches_ballistic_closed_form() {
        let env = env_with(|c| {
            c.contacts_enabled = false;
        });
        let mut s = env.reset(0);
        let z0 = s.pose.base_pos[2];
        let upper = default_upper(&env);
        env.step(&mut s, &zero_action(), &upper); // 0.02 s
        let drop = z0 - s.pose.base_pos[2];
        let expect = 0.5 * env.cfg.gravity * 0.02 * 0.02;
        let rel = (drop - expect).abs() / expect;
        assert!(rel < 0.01, "drop {drop}, expect {expect}, rel {rel}");
    }

    #[test]
    fn pd_hold_keeps_stance_upright_for_10s() {
        let env = env_with(|_| {});
        let mut s = env.reset(7);
        let upper = default_upper(&env);
        for _ in 0..500 {
            let out = env.step(&mut s, &zero_action(), &upper);
            assert!(!out.terminated, "fell at step {}", s.step_count);
            let pg = projected_gravity(s.pose.base_quat);
            assert!(
                pg[0].abs() < 0.1 && pg[1].abs() < 0.1,
                "pg {:?} at step {}",
                pg,
                s.step_count
            );
        }
    }

    #[test]
    fn determinism_identical_trajectories() {
        let run = || {
            let env = env_with(|c| c.dr = DrToggles::all_on());
            let mut s = env.reset(5);
            let upper = default_upper(&env);
            let mut acc: Vec<u64> = Vec::new();
            for i in 0..50 {
                let a = [(i as f64 * 0.01).sin() * 0.1; NUM_ACTIONS];
                env.step(&mut s, &a, &upper);
                acc.push(s.pose.base_pos[2].to_bits());
            }
            acc
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn push_events_fire_exactly_on_schedule() {
        let env = env_with(|c| {
            c.dr.push = true;
        });
        let mut s = env.reset(3);
        let upper = default_upper(&env);
        // 5 s = 250 control steps; watch velocity jump at the boundary
        let mut jumped_at = Vec::new();
        let mut prev_v = 0.0;
        for step in 1..=260u64 {
            env.step(&mut s, &zero_action(), &upper);
            let v = v_norm(s.base_lin_vel);
            if (v - prev_v).abs() > 0.3 {
                jumped_at.push(step);
            }
            prev_v = v;
        }
        assert!(jumped_at.contains(&250), "jumps at {jumped_at:?}");
    }

    #[test]
    fn termination_thresholds() {
        assert!(!termination_from_pg([0.0, 0.0, -1.0]));
        assert!(termination_from_pg([0.71, 0.0, -0.7]));
        assert!(!termination_from_pg([0.70, 0.0, -0.71]));
        assert!(termination_from_pg([0.0, -0.75, 0.6]));
    }

    #[test]
    fn reward_perfect_stand_sums_regularization() {
        let inp = RewardInputs {
            rpy: [0.0; 3],
            pg: [0.0, 0.0, -1.0],
            h: 0.89,
            h_ref: 0.89,
            v: [0.0; 3],
            v_prev: [0.0; 3],
            omega: [0.0; 3],
            q_leg: [0.0; NUM_LEG_JOINTS],
            q_leg_ref: [0.0; NUM_LEG_JOINTS],
            foot_fz: [300.0, 300.0],
            foot_speed: [0.0, 0.0],
            action: [0.0; NUM_ACTIONS],
            action_prev: [0.0; NUM_ACTIONS],
            action_prev2: [0.0; NUM_ACTIONS],
            tau: [0.0; NUM_JOINTS],
            qd: [0.0; NUM_JOINTS],
            qdd: [0.0; NUM_JOINTS],
        };
        let (total, terms) = reward_total(&inp);
        assert!((total - 9.4).abs() < 1e-12, "total {total}");
        assert_eq!(terms.total(), total);
    }

    #[test]
    fn reward_orientation_kernel_value() {
        let mut inp = RewardInputs {
            rpy: [0.1, 0.1, 0.4],
            pg: [0.0, 0.0, -1.0],
            h: 0.89,
            h_ref: 0.89,
            v: [0.0; 3],
            v_prev: [0.0; 3],
            omega: [0.0; 3],
            q_leg: [0.0; NUM_LEG_JOINTS],
            q_leg_ref: [0.0; NUM_LEG_JOINTS],
            foot_fz: [300.0, 300.0],
            foot_speed: [0.0, 0.0],
            action: [0.0; NUM_ACTIONS],
            action_prev: [0.0; NUM_ACTIONS],
            action_prev2: [0.0; NUM_ACTIONS],
            tau: [0.0; NUM_JOINTS],
            qd: [0.0; NUM_JOINTS],
            qdd: [0.0; NUM_JOINTS],
        };
        inp.rpy = [0.1, 0.1, 0.0];
        let (_, terms) = reward_total(&inp);
        let expect = 3.0 * (-10.0 * 0.2f64).exp();
        assert!((terms.0[0] - expect).abs() < 1e-12);
        assert!((expect - 0.406).abs() < 1e-3);
    }

    #[test]
    fn airborne_feet_zero_contact_terms() {
        let mk = |fz: [f64; 2], speed: [f64; 2]| RewardInputs {
            rpy: [0.0; 3],
            pg: [0.0, 0.0, -1.0],
            h: 0.89,
            h_ref: 0.89,
            v: [0.0; 3],
            v_prev: [0.0; 3],
            omega: [0.0; 3],
            q_leg: [0.0; NUM_LEG_JOINTS],
            q_leg_ref: [0.0; NUM_LEG_JOINTS],
            foot_fz: fz,
            foot_speed: speed,
            action: [0.0; NUM_ACTIONS],
            action_prev: [0.0; NUM_ACTIONS],
            action_prev2: [0.0; NUM_ACTIONS],
            tau: [0.0; NUM_JOINTS],
            qd: [0.0; NUM_JOINTS],
            qdd: [0.0; NUM_JOINTS],
        };
        let (_, t) = reward_total(&mk([4.9, 0.0], [3.0, 3.0]));
        assert_eq!(t.0[7], 0.0);
        assert_eq!(t.0[8], 0.0);
        let (_, t) = reward_total(&mk([6.0, 6.0], [0.25, 0.25]));
        assert_eq!(t.0[7], 0.5);
        assert!((t.0[8] - 0.2 * 0.5).abs() < 1e-12);
    }

    #[test]
    fn energy_drift_bounds() {
        // freefall, no rotation: linear + potential energy conserved
        let env = env_with(|c| {
            c.contacts_enabled = false;
        });
        let mut s = env.reset(0);
        let e0 = env.mechanical_energy(&s);
        let upper = default_upper(&env);
        for _ in 0..50 {
            env.step(&mut s, &zero_action(), &upper);
        }
        let e1 = env.mechanical_energy(&s);
        let denom = e0.abs().max(
            (0.5 * 60.0 * v_dot(s.base_lin_vel, s.base_lin_vel)).abs(),
        );
        assert!(((e1 - e0) / denom).abs() < 0.01, "drift {} -> {}", e0, e1);

        // zero gravity tumble: kinetic energy conserved within 1%
        let env = env_with(|c| {
            c.contacts_enabled = false;
            c.gravity_enabled = false;
        });
        let mut s = env.reset(0);
        s.base_ang_vel = [0.5, 0.3, 0.2];
        let e0 = env.mechanical_energy(&s);
        for _ in 0..50 {
            env.step(&mut s, &zero_action(), &upper);
        }
        let e1 = env.mechanical_energy(&s);
        assert!(((e1 - e0) / e0).abs() < 0.01, "tumble drift {} -> {}", e0, e1);
    }

    #[test]
    fn observation_padding_and_window() {
        let mut ob = ObsBuilder::new(3, 2);
        ob.push(vec![1.0, 2.0]);
        assert_eq!(ob.window_flat(), vec![0.0, 0.0, 0.0, 0.0, 1.0, 2.0]);
        ob.push(vec![3.0, 4.0]);
        ob.push(vec![5.0, 6.0]);
        ob.push(vec![7.0, 8.0]);
        assert_eq!(ob.window_flat(), vec![3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn newest_frame_carries_current_state_only() {
        let env = env_with(|_| {});
        let s = env.reset(0);
        let goal = default_upper(&env);
        let f = state_frame(&s, &[0.0; NUM_ACTIONS], &goal, false);
        assert_eq!(f.len(), FRAME_WIDTH);
        // goal occupies the tail of the frame
        assert_eq!(&f[FRAME_GOAL..], &goal[..]);
        let fp = state_frame(&s, &[0.0; NUM_ACTIONS], &goal, true);
        assert_eq!(fp.len(), FRAME_WIDTH_PRIVILEGED);
    }
}
