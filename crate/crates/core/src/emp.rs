//! Executable motion prior: encodes (state, goal) to a latent and decodes an
//! adjusted, executable upper-body goal.
//!
//! Training follows the two-phase loop: phase one rolls the policy on raw
//! goals and fits the world model online; phase two rolls the policy on
//! adjusted goals and backpropagates the six-term objective through the
//! frozen policy and frozen world model into the prior. The orientation and
//! collision terms are implemented sign-corrected (the printed forms point
//! away from their stated goals); `paper_literal_losses` restores the printed
//! expressions for comparison.

use crate::config::{EmpLossWeights, EmpTrainConfig, SimConfig};
use crate::kinematics::*;
use crate::motion::RobotMotionClip;
use crate::nn::*;
use crate::policy::PolicyNets;
use crate::sim::*;
use crate::tensor::{Tape, Tensor, Var};
use crate::util::*;
use crate::world_model::{rpy_to_pg_on_tape, rpy_to_projected_gravity, Transition, WorldModel};
use std::sync::Arc;

/// Margin inside the collision kernel (meters of sphere surface distance).
pub const COLLISION_MARGIN: f64 = 0.08;
/// Neutral point of the centroid kernel (meters of support offset).
pub const CENTROID_NEUTRAL: f64 = 0.03;
pub const CENTROID_CAP: f64 = 10.0;
/// Guard inside taped/plain distance square roots.
const DIST_EPS: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum EmpError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("emp: {0}")]
    Train(String),
}

/// Unweighted loss terms; `total` applies the configured weights.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EmpLossTerms {
    pub rec: f64,
    pub ori: f64,
    pub col: f64,
    pub cen: f64,
    pub smo: f64,
    pub reg: f64,
}

impl EmpLossTerms {
    pub fn total(&self, w: &EmpLossWeights) -> f64 {
        w.rec * self.rec
            + w.ori * self.ori
            + w.col * self.col
            + w.cen * self.cen
            + w.smo * self.smo
            + w.reg * self.reg
    }

    pub fn scaled_add(&mut self, other: &EmpLossTerms, s: f64) {
        self.rec += other.rec * s;
        self.ori += other.ori * s;
        self.col += other.col * s;
        self.cen += other.cen * s;
        self.smo += other.smo * s;
        self.reg += other.reg * s;
    }
}

/// Geometry inputs to the kernels, extracted from FK so the formula layer
/// stays a pure function.
#[derive(Clone, Debug)]
pub struct EmpLossParts {
    /// Squared horizontal norm of the predicted projected gravity.
    pub pg_xy_sq: f64,
    /// Sphere surface distances for the collision link pairs (floored at 0).
    pub pair_distances: Vec<f64>,
    /// Horizontal COM-to-support-center distance.
    pub support_distance: f64,
}

/// The six kernels as pure formulas over plain values.
pub fn emp_loss_terms(
    goal: &[f64; NUM_UPPER_JOINTS],
    adjusted: &[f64; NUM_UPPER_JOINTS],
    adjusted_prev: &[f64; NUM_UPPER_JOINTS],
    adjusted_prev2: &[f64; NUM_UPPER_JOINTS],
    z: &[f64],
    parts: &EmpLossParts,
    literal: bool,
) -> EmpLossTerms {
    let mut rec = 0.0;
    for j in 0..NUM_UPPER_JOINTS {
        rec += (goal[j] - adjusted[j]).powi(2);
    }
    let ori = if literal {
        (-parts.pg_xy_sq).exp() - 1.0
    } else {
        1.0 - (-parts.pg_xy_sq).exp()
    };
    let mut col = 0.0;
    for &d in &parts.pair_distances {
        col += if literal {
            (-2.0 * (COLLISION_MARGIN - d)).exp()
        } else {
            (2.0 * (COLLISION_MARGIN - d)).exp()
        };
    }
    let cen = ((-7.0 * (CENTROID_NEUTRAL - parts.support_distance)).exp()).min(CENTROID_CAP) - 1.0;
    let mut smo = 0.0;
    for j in 0..NUM_UPPER_JOINTS {
        let vel = adjusted[j] - adjusted_prev[j];
        let acc = adjusted[j] + adjusted_prev2[j] - 2.0 * adjusted_prev[j];
        smo += vel * vel + 0.2 * acc * acc;
    }
    let reg: f64 = z.iter().map(|v| v * v).sum();
    EmpLossTerms { rec, ori, col, cen, smo, reg }
}

/// Plain-path geometry for the loss: FK pose built from the adjusted upper
/// body, the measured lower body and the world-model-predicted base rpy.
pub fn emp_geometry(
    model: &RobotModel,
    adjusted: &[f64; NUM_UPPER_JOINTS],
    lower: &[f64; NUM_LEG_JOINTS],
    predicted_rpy: Vec3,
) -> EmpLossParts {
    let pg = rpy_to_projected_gravity(predicted_rpy);
    let pg_xy_sq = pg[0] * pg[0] + pg[1] * pg[1];
    let mut q = vec![0.0; NUM_JOINTS];
    q[..NUM_LEG_JOINTS].copy_from_slice(lower);
    q[UPPER_JOINT_OFFSET..].copy_from_slice(adjusted);
    let rot = rpy_to_mat(predicted_rpy);
    // quaternion from the matrix is unnecessary; FK consumes the base pose,
    // so rebuild it through the same Euler composition used on the tape
    let pose = Pose {
        base_pos: [0.0, 0.0, model.h_ref],
        base_quat: IDENTITY_QUAT,
        q,
    };
    let mut fk = forward_kinematics(model, &pose);
    // re-rotate all links by the predicted base rotation about the base origin
    for i in 0..fk.pos.len() {
        let rel = v_sub(fk.pos[i], pose.base_pos);
        fk.pos[i] = v_add(pose.base_pos, m_vec(&rot, rel));
        fk.rot[i] = m_mul(&rot, &fk.rot[i]);
    }
    let centers = sphere_centers(model, &fk);
    let spheres: Vec<(usize, f64)> = model
        .collision_spheres
        .iter()
        .map(|s| (model.link_index(&s.link).expect("validated"), s.radius))
        .collect();
    let mut pair_distances = Vec::new();
    for i in 0..centers.len() {
        for j in (i + 1)..centers.len() {
            if spheres[i].0 == spheres[j].0 {
                continue;
            }
            let center_d_sq = {
                let d = v_sub(centers[i], centers[j]);
                v_dot(d, d)
            };
            let center_d = (center_d_sq + DIST_EPS).sqrt();
            pair_distances.push((center_d - spheres[i].1 - spheres[j].1).max(0.0));
        }
    }
    let com = center_of_mass(model, &fk);
    let feet = foot_centers(model, &fk);
    let mid = v_scale(v_add(feet[0], feet[1]), 0.5);
    let dx = com[0] - mid[0];
    let dy = com[1] - mid[1];
    let support_distance = (dx * dx + dy * dy + DIST_EPS).sqrt();
    EmpLossParts { pg_xy_sq, pair_distances, support_distance }
}

// ---------------------------------------------------------------------------
// Networks
// ---------------------------------------------------------------------------

pub struct EmpNets {
    pub params: NetParams,
    pub fs: MlpSpec,
    pub ft: MlpSpec,
    pub fusion: MlpSpec,
    pub dec: MlpSpec,
    pub latent: usize,
    upper_lo: [f64; NUM_UPPER_JOINTS],
    upper_hi: [f64; NUM_UPPER_JOINTS],
}

impl EmpNets {
    pub fn new(cfg: &EmpTrainConfig, model: &RobotModel, seed: u64) -> Self {
        let fs = MlpSpec::new(FRAME_WIDTH, &cfg.encoder_hidden, cfg.latent, Activation::Relu);
        let ft = MlpSpec::new(NUM_UPPER_JOINTS, &cfg.encoder_hidden, cfg.latent, Activation::Relu);
        let fusion = MlpSpec::new(2 * cfg.latent, &cfg.fusion_hidden, cfg.latent, Activation::Relu);
        let dec =
            MlpSpec::new(cfg.latent, &cfg.fusion_hidden, NUM_UPPER_JOINTS, Activation::Relu);
        let mut params = NetParams::new();
        let mut rng = rng_from_seed(seed);
        init_mlp(&mut params, "fs", &fs, &mut rng);
        init_mlp(&mut params, "ft", &ft, &mut rng);
        init_mlp(&mut params, "fpsi", &fusion, &mut rng);
        init_mlp(&mut params, "dec", &dec, &mut rng);
        let mut meta = vec![cfg.latent as f64, cfg.encoder_hidden.len() as f64];
        meta.extend(cfg.encoder_hidden.iter().map(|&h| h as f64));
        meta.push(cfg.fusion_hidden.len() as f64);
        meta.extend(cfg.fusion_hidden.iter().map(|&h| h as f64));
        params.insert("meta.arch", Tensor::vector(meta));
        let (upper_lo, upper_hi) = model.upper_limits();
        EmpNets { params, fs, ft, fusion, dec, latent: cfg.latent, upper_lo, upper_hi }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), NnError> {
        self.params.save(path)
    }

    pub fn load(path: &std::path::Path, model: &RobotModel) -> Result<Self, NnError> {
        let params = NetParams::load(path)?;
        let meta = params.get("meta.arch").data.clone();
        let latent = meta[0] as usize;
        let ne = meta[1] as usize;
        let enc: Vec<usize> = meta[2..2 + ne].iter().map(|&h| h as usize).collect();
        let nf = meta[2 + ne] as usize;
        let fus: Vec<usize> =
            meta[3 + ne..3 + ne + nf].iter().map(|&h| h as usize).collect();
        let (upper_lo, upper_hi) = model.upper_limits();
        Ok(EmpNets {
            fs: MlpSpec::new(FRAME_WIDTH, &enc, latent, Activation::Relu),
            ft: MlpSpec::new(NUM_UPPER_JOINTS, &enc, latent, Activation::Relu),
            fusion: MlpSpec::new(2 * latent, &fus, latent, Activation::Relu),
            dec: MlpSpec::new(latent, &fus, NUM_UPPER_JOINTS, Activation::Relu),
            params,
            latent,
            upper_lo,
            upper_hi,
        })
    }

    /// Deterministic encode-fuse-decode; returns the adjusted goal, the
    /// latent and the mean-square latent magnitude used for gating.
    pub fn adjust(
        &self,
        frame: &[f64],
        goal: &[f64; NUM_UPPER_JOINTS],
    ) -> ([f64; NUM_UPPER_JOINTS], Vec<f64>, f64) {
        assert!(frame.iter().all(|v| v.is_finite()) && goal.iter().all(|v| v.is_finite()));
        let z1 = forward_mlp_plain(&self.params, "fs", &self.fs, frame, 1);
        let z2 = forward_mlp_plain(&self.params, "ft", &self.ft, goal, 1);
        let zin: Vec<f64> = z1.iter().chain(z2.iter()).copied().collect();
        let z = forward_mlp_plain(&self.params, "fpsi", &self.fusion, &zin, 1);
        let raw = forward_mlp_plain(&self.params, "dec", &self.dec, &z, 1);
        let mut adjusted = [0.0; NUM_UPPER_JOINTS];
        for j in 0..NUM_UPPER_JOINTS {
            adjusted[j] = raw[j].clamp(self.upper_lo[j], self.upper_hi[j]);
        }
        let regloss = z.iter().map(|v| v * v).sum::<f64>() / self.latent as f64;
        (adjusted, z, regloss)
    }

    /// Taped mirror of [`EmpNets::adjust`] for batched rows; returns the
    /// clamped adjusted goals [B,15] and latents [B,latent].
    pub fn adjust_on_tape(&self, tape: &mut Tape, frames: Var, goals: Var) -> (Var, Var) {
        let b = tape.shape(frames)[0];
        let z1 = forward_mlp(tape, &self.params, "fs", &self.fs, frames).expect("fs");
        let z2 = forward_mlp(tape, &self.params, "ft", &self.ft, goals).expect("ft");
        // row-wise concat of the two latent blocks
        let mut rows = Vec::with_capacity(b);
        for r in 0..b {
            let a = tape.slice(z1, r * self.latent, self.latent);
            let t = tape.slice(z2, r * self.latent, self.latent);
            rows.push(tape.concat(&[a, t]));
        }
        let zcat = tape.concat(&rows);
        let zin = tape.reshape(zcat, vec![b, 2 * self.latent]);
        let z = forward_mlp(tape, &self.params, "fpsi", &self.fusion, zin).expect("fpsi");
        let raw = forward_mlp(tape, &self.params, "dec", &self.dec, z).expect("dec");
        let mut lo = Vec::with_capacity(b * NUM_UPPER_JOINTS);
        let mut hi = Vec::with_capacity(b * NUM_UPPER_JOINTS);
        for _ in 0..b {
            lo.extend_from_slice(&self.upper_lo);
            hi.extend_from_slice(&self.upper_hi);
        }
        let flat = tape.reshape(raw, vec![b * NUM_UPPER_JOINTS]);
        let clamped = tape.clamp_vec(flat, &lo, &hi);
        let adjusted = tape.reshape(clamped, vec![b, NUM_UPPER_JOINTS]);
        (adjusted, z)
    }

    /// Danger gating: pass the goal through untouched while the latent
    /// magnitude stays under the threshold.
    pub fn gated_adjust(
        &self,
        frame: &[f64],
        goal: &[f64; NUM_UPPER_JOINTS],
        threshold: f64,
    ) -> ([f64; NUM_UPPER_JOINTS], f64) {
        let (adjusted, _, regloss) = self.adjust(frame, goal);
        if regloss <= threshold {
            (*goal, regloss)
        } else {
            (adjusted, regloss)
        }
    }
}

// ---------------------------------------------------------------------------
// Taped loss
// ---------------------------------------------------------------------------

/// Taped evaluation of the six terms for one sample; returns the weighted
/// total plus the unweighted term values.
#[allow(clippy::too_many_arguments)]
pub fn emp_loss_on_tape(
    tape: &mut Tape,
    model: &RobotModel,
    weights: &EmpLossWeights,
    literal: bool,
    goal: &[f64; NUM_UPPER_JOINTS],
    adjusted: Var,
    adjusted_prev: &[f64; NUM_UPPER_JOINTS],
    adjusted_prev2: &[f64; NUM_UPPER_JOINTS],
    z: Var,
    predicted_frame: Var,
    lower: &[f64; NUM_LEG_JOINTS],
) -> (Var, EmpLossTerms) {
    // reconstruction
    let g_const = tape.vector(goal);
    let rec_d = tape.sub(g_const, adjusted);
    let l_rec = tape.sq_norm(rec_d);

    // orientation through the predicted rpy
    let rpy = tape.slice(predicted_frame, FRAME_RPY, 3);
    let pg = rpy_to_pg_on_tape(tape, rpy);
    let pg_xy = tape.slice(pg, 0, 2);
    let pg_sq = tape.sq_norm(pg_xy);
    let neg = tape.scale(pg_sq, -1.0);
    let e = tape.exp(neg);
    let l_ori = if literal {
        tape.add_const(e, -1.0)
    } else {
        let ne = tape.scale(e, -1.0);
        tape.add_const(ne, 1.0)
    };

    // FK pose: adjusted upper body, measured lower body, predicted base rotation
    let base_rot = rpy_rotation_diff(tape, rpy);
    let base_pos = tape.vector(&[0.0, 0.0, model.h_ref]);
    let mut angles = Vec::with_capacity(NUM_JOINTS);
    for &l in lower.iter() {
        angles.push(DiffAngle::Const(l));
    }
    for j in 0..NUM_UPPER_JOINTS {
        angles.push(DiffAngle::Var(tape.index(adjusted, j)));
    }
    let dfk = fk_diff(tape, model, base_rot, base_pos, &angles);

    // collision: sphere pair surface distances
    let spheres: Vec<(usize, Vec3, f64)> = model
        .collision_spheres
        .iter()
        .map(|s| {
            (model.link_index(&s.link).expect("validated"), s.center, s.radius)
        })
        .collect();
    let centers: Vec<Var> = spheres
        .iter()
        .map(|(li, c, _)| dfk.point_on(tape, *li, *c))
        .collect();
    let mut col_parts = Vec::new();
    for i in 0..centers.len() {
        for j in (i + 1)..centers.len() {
            if spheres[i].0 == spheres[j].0 {
                continue;
            }
            let d = tape.sub(centers[i], centers[j]);
            let d2 = tape.sq_norm(d);
            let d2e = tape.add_const(d2, DIST_EPS);
            let center_d = tape.sqrt(d2e);
            let surf = tape.add_const(center_d, -(spheres[i].2 + spheres[j].2));
            let surf = tape.max_const(surf, 0.0);
            let arg = if literal {
                let neg_m = tape.add_const(surf, -COLLISION_MARGIN);
                tape.scale(neg_m, 2.0)
            } else {
                let neg_d = tape.scale(surf, -1.0);
                let m = tape.add_const(neg_d, COLLISION_MARGIN);
                tape.scale(m, 2.0)
            };
            col_parts.push(tape.exp(arg));
        }
    }
    let col_cat = tape.concat(&col_parts);
    let l_col = tape.sum(col_cat);

    // centroid: horizontal COM offset against the foot-center midpoint
    let com = dfk.com(tape, model);
    let mut foot_vars = Vec::new();
    for foot in &model.feet {
        let li = model.link_index(&foot.link).expect("foot link");
        let mut acc: Option<Var> = None;
        for c in &foot.corners {
            let p = dfk.point_on(tape, li, *c);
            acc = Some(match acc {
                None => p,
                Some(a) => tape.add(a, p),
            });
        }
        foot_vars.push(tape.scale(acc.expect("corners"), 0.25));
    }
    let feet_sum = tape.add(foot_vars[0], foot_vars[1]);
    let mid = tape.scale(feet_sum, 0.5);
    let delta = tape.sub(com, mid);
    let dxy = tape.slice(delta, 0, 2);
    let d2 = tape.sq_norm(dxy);
    let d2e = tape.add_const(d2, DIST_EPS);
    let dist = tape.sqrt(d2e);
    let t = tape.scale(dist, 7.0);
    let t = tape.add_const(t, -7.0 * CENTROID_NEUTRAL);
    let e = tape.exp(t);
    let capped = tape.min_const(e, CENTROID_CAP);
    let l_cen = tape.add_const(capped, -1.0);

    // smoothness over the adjusted-goal history
    let prev = tape.vector(adjusted_prev);
    let prev2 = tape.vector(adjusted_prev2);
    let vel = tape.sub(adjusted, prev);
    let l_vel = tape.sq_norm(vel);
    let two_prev = tape.scale(prev, 2.0);
    let acc_sum = tape.add(adjusted, prev2);
    let acc = tape.sub(acc_sum, two_prev);
    let l_acc_raw = tape.sq_norm(acc);
    let l_acc = tape.scale(l_acc_raw, 0.2);
    let l_smo = tape.add(l_vel, l_acc);

    // latent regularization
    let l_reg = tape.sq_norm(z);

    let terms = EmpLossTerms {
        rec: tape.scalar_value(l_rec),
        ori: tape.scalar_value(l_ori),
        col: tape.scalar_value(l_col),
        cen: tape.scalar_value(l_cen),
        smo: tape.scalar_value(l_smo),
        reg: tape.scalar_value(l_reg),
    };
    let wrec = tape.scale(l_rec, weights.rec);
    let wori = tape.scale(l_ori, weights.ori);
    let wcol = tape.scale(l_col, weights.col);
    let wcen = tape.scale(l_cen, weights.cen);
    let wsmo = tape.scale(l_smo, weights.smo);
    let wreg = tape.scale(l_reg, weights.reg);
    let parts = tape.concat(&[wrec, wori, wcol, wcen, wsmo, wreg]);
    (tape.sum(parts), terms)
}

// ---------------------------------------------------------------------------
// Training (two-phase loop)
// ---------------------------------------------------------------------------

/// Rolling observation context: full past frames (with the goals that were
/// actually in effect) plus the current state part awaiting its goal slot.
pub struct EmpObsContext {
    history: std::collections::VecDeque<Vec<f64>>,
    window: usize,
    state_part: Vec<f64>,
}

impl EmpObsContext {
    pub fn new(window: usize) -> Self {
        EmpObsContext {
            history: Default::default(),
            window,
            state_part: vec![0.0; FRAME_GOAL],
        }
    }

    pub fn begin_step(&mut self, state: &SimState, prev_action: &[f64; NUM_ACTIONS]) {
        let mut part = Vec::with_capacity(FRAME_GOAL);
        part.extend_from_slice(&state.pose.q);
        part.extend_from_slice(prev_action);
        part.extend_from_slice(&q_to_rpy(state.pose.base_quat));
        self.state_part = part;
    }

    /// Current frame with an explicit goal slot.
    pub fn frame_with_goal(&self, goal: &[f64; NUM_UPPER_JOINTS]) -> Vec<f64> {
        let mut f = self.state_part.clone();
        f.extend_from_slice(goal);
        f
    }

    /// Flattened observation window with the newest goal slot excluded
    /// (the caller concatenates the live goal variable).
    pub fn window_prefix(&self) -> Vec<f64> {
        let width = FRAME_WIDTH;
        let mut out = vec![0.0; self.window * width - NUM_UPPER_JOINTS];
        let pad = self.window - 1 - self.history.len();
        for (i, f) in self.history.iter().enumerate() {
            out[(pad + i) * width..(pad + i + 1) * width].copy_from_slice(f);
        }
        let tail_start = (self.window - 1) * width;
        out[tail_start..].copy_from_slice(&self.state_part);
        out
    }

    /// Commit the frame after its goal is known.
    pub fn commit(&mut self, goal: &[f64; NUM_UPPER_JOINTS]) {
        let f = self.frame_with_goal(goal);
        if self.history.len() + 1 == self.window {
            self.history.pop_front();
        }
        self.history.push_back(f);
    }

    pub fn reset(&mut self) {
        self.history.clear();
    }
}

pub struct EmpTrainReport {
    pub epoch_terms: Vec<EmpLossTerms>,
    pub epoch_totals: Vec<f64>,
    pub wm_losses: Vec<f64>,
    pub grad_clip_events: usize,
}

struct Phase2Slot {
    state: SimState,
    ctx: EmpObsContext,
    prev_action: [f64; NUM_ACTIONS],
    ghat_prev: [f64; NUM_UPPER_JOINTS],
    ghat_prev2: [f64; NUM_UPPER_JOINTS],
    has_history: bool,
}

/// Algorithm: for each motion batch run a raw-goal rollout updating the
/// world model, then an adjusted-goal rollout updating the prior through the
/// frozen policy and world model. The simulator advances phase two; the
/// world model only carries the differentiable loss path.
pub fn train_emp(
    cfg: &EmpTrainConfig,
    sim_cfg: &SimConfig,
    model: Arc<RobotModel>,
    policy: &PolicyNets,
    wm: &mut WorldModel,
    motions: &[RobotMotionClip],
    seed: u64,
) -> Result<(EmpNets, EmpTrainReport), EmpError> {
    if motions.is_empty() {
        return Err(EmpError::Train("empty motion set".into()));
    }
    if policy.privileged {
        return Err(EmpError::Train("prior training expects the standard policy".into()));
    }
    let env = SimEnv::new(model.clone(), sim_cfg.clone());
    let mut nets = EmpNets::new(cfg, &model, split_seed(seed, 11));
    let mut rng = rng_from_seed(split_seed(seed, 12));
    let mut report = EmpTrainReport {
        epoch_terms: Vec::new(),
        epoch_totals: Vec::new(),
        wm_losses: Vec::new(),
        grad_clip_events: 0,
    };
    let log_std = policy.log_std().to_vec();

    for epoch in 0..cfg.epochs {
        let mut epoch_terms = EmpLossTerms::default();
        let mut term_samples = 0.0f64;
        let mut epoch_total = 0.0;
        let mut samples = 0.0f64;
        for (batch_idx, batch) in motions.chunks(cfg.batch_motions).enumerate() {
            let frames = batch.iter().map(|m| m.frames.len()).min().expect("non-empty");
            // ---- phase 1: raw goals, fit the world model online ----
            let mut slots: Vec<Phase2Slot> = batch
                .iter()
                .enumerate()
                .map(|(i, _)| {
                    let s = env.reset(split_seed(
                        seed,
                        ((epoch as u64) << 40) | ((batch_idx as u64) << 20) | i as u64,
                    ));
                    let mut ctx = EmpObsContext::new(policy.obs_window);
                    ctx.begin_step(&s, &[0.0; NUM_ACTIONS]);
                    Phase2Slot {
                        state: s,
                        ctx,
                        prev_action: [0.0; NUM_ACTIONS],
                        ghat_prev: [0.0; NUM_UPPER_JOINTS],
                        ghat_prev2: [0.0; NUM_UPPER_JOINTS],
                        has_history: false,
                    }
                })
                .collect();
            let mut wm_loss_acc = 0.0;
            for t in 0..frames.saturating_sub(1) {
                let mut transitions = Vec::with_capacity(batch.len());
                for (slot, motion) in slots.iter_mut().zip(batch) {
                    let goal = motion.frame(t);
                    let frame_before = slot.ctx.frame_with_goal(&goal);
                    let obs_prefix = slot.ctx.window_prefix();
                    let mut obs = obs_prefix;
                    obs.extend_from_slice(&goal);
                    let (action, _, _) = policy.act(&obs, true, &mut rng);
                    env.step(&mut slot.state, &action, &goal);
                    slot.ctx.commit(&goal);
                    slot.prev_action = action;
                    slot.ctx.begin_step(&slot.state, &action);
                    let next_goal = motion.frame(t + 1);
                    let frame_after = slot.ctx.frame_with_goal(&next_goal);
                    transitions.push(Transition {
                        frame: frame_before,
                        action,
                        next_frame: frame_after,
                    });
                }
                let refs: Vec<&Transition> = transitions.iter().collect();
                wm_loss_acc += wm.update(&refs, cfg.lr)?;
            }
            report.wm_losses.push(wm_loss_acc / (frames.max(2) - 1) as f64);

            // ---- phase 2: adjusted goals, update the prior ----
            for slot in slots.iter_mut() {
                slot.state = env.reset(split_seed(
                    seed,
                    0x5000_0000_0000 | ((epoch as u64) << 32) | ((batch_idx as u64) << 16),
                ));
                slot.ctx.reset();
                slot.prev_action = [0.0; NUM_ACTIONS];
                slot.ctx.begin_step(&slot.state, &slot.prev_action);
                slot.has_history = false;
            }
            for t in 0..frames {
                let b = batch.len();
                let mut tape = Tape::new();
                // batched (state frame, goal) rows with raw goals for f_s
                let mut frame_rows = Vec::with_capacity(b * FRAME_WIDTH);
                let mut goal_rows = Vec::with_capacity(b * NUM_UPPER_JOINTS);
                for (slot, motion) in slots.iter().zip(batch) {
                    let goal = motion.frame(t);
                    frame_rows.extend_from_slice(&slot.ctx.frame_with_goal(&goal));
                    goal_rows.extend_from_slice(&goal);
                }
                let frames_t = Tensor::matrix(b, FRAME_WIDTH, frame_rows);
                let goals_t = Tensor::matrix(b, NUM_UPPER_JOINTS, goal_rows);
                let frames_v = tape.constant(&frames_t);
                let goals_v = tape.constant(&goals_t);
                let (adjusted, z) = nets.adjust_on_tape(&mut tape, frames_v, goals_v);

                let mut loss_parts = Vec::with_capacity(b);
                let mut ghat_values: Vec<[f64; NUM_UPPER_JOINTS]> = Vec::with_capacity(b);
                let mut action_values: Vec<[f64; NUM_ACTIONS]> = Vec::with_capacity(b);
                for (i, (slot, motion)) in slots.iter().zip(batch).enumerate() {
                    let goal = motion.frame(t);
                    let ghat_i = tape.slice(adjusted, i * NUM_UPPER_JOINTS, NUM_UPPER_JOINTS);
                    let z_i = tape.slice(z, i * nets.latent, nets.latent);
                    // policy action through the frozen actor, reparameterized
                    let prefix = slot.ctx.window_prefix();
                    let prefix_v = tape.vector(&prefix);
                    let obs_row = tape.concat(&[prefix_v, ghat_i]);
                    let obs_mat = tape.reshape(obs_row, vec![1, policy.obs_dim]);
                    let mu = forward_mlp(&mut tape, &policy.params, "actor", &policy.actor, obs_mat)
                        .expect("frozen actor");
                    let mu_flat = tape.reshape(mu, vec![NUM_ACTIONS]);
                    let mut noise = [0.0; NUM_ACTIONS];
                    for (j, n) in noise.iter_mut().enumerate() {
                        *n = log_std[j].exp() * sample_normal(&mut rng);
                    }
                    let noise_v = tape.vector(&noise);
                    let action_v = tape.add(mu_flat, noise_v);
                    // world-model prediction with the adjusted goal in the state slot
                    let state_part = tape.vector(&slot.ctx.state_part);
                    let wm_frame_row = tape.concat(&[state_part, ghat_i]);
                    let predicted = wm.predict_on_tape(&mut tape, wm_frame_row, action_v);
                    let mut lower = [0.0; NUM_LEG_JOINTS];
                    lower.copy_from_slice(&slot.state.pose.q[..NUM_LEG_JOINTS]);
                    let (ghat_prev, ghat_prev2) = if slot.has_history {
                        (slot.ghat_prev, slot.ghat_prev2)
                    } else {
                        // initialize the history by repeating the first output
                        let mut cur = [0.0; NUM_UPPER_JOINTS];
                        cur.copy_from_slice(tape.value(ghat_i));
                        (cur, cur)
                    };
                    let (total, terms) = emp_loss_on_tape(
                        &mut tape,
                        &model,
                        &cfg.weights,
                        cfg.paper_literal_losses,
                        &goal,
                        ghat_i,
                        &ghat_prev,
                        &ghat_prev2,
                        z_i,
                        predicted,
                        &lower,
                    );
                    epoch_terms.scaled_add(&terms, 1.0);
                    term_samples += 1.0;
                    loss_parts.push(total);
                    let mut gv = [0.0; NUM_UPPER_JOINTS];
                    gv.copy_from_slice(tape.value(ghat_i));
                    ghat_values.push(gv);
                    let mut av = [0.0; NUM_ACTIONS];
                    av.copy_from_slice(tape.value(action_v));
                    action_values.push(av);
                }
                let stacked = tape.concat(&loss_parts);
                let batch_loss = tape.mean(stacked);
                epoch_total += tape.scalar_value(batch_loss);
                samples += 1.0;
                tape.backward(batch_loss).expect("fresh tape");
                tape.apply_param_grads(&mut nets.params);
                if nets.params.clip_grad_norm(cfg.grad_clip) {
                    report.grad_clip_events += 1;
                }
                nets.params.adam_step(cfg.lr)?;

                // advance the live simulator with the detached actions
                for ((slot, motion), (ghat, action)) in slots
                    .iter_mut()
                    .zip(batch)
                    .zip(ghat_values.iter().zip(&action_values))
                {
                    let _ = motion;
                    env.step(&mut slot.state, action, ghat);
                    slot.ctx.commit(ghat);
                    slot.prev_action = *action;
                    slot.ctx.begin_step(&slot.state, action);
                    slot.ghat_prev2 = if slot.has_history { slot.ghat_prev } else { *ghat };
                    slot.ghat_prev = *ghat;
                    slot.has_history = true;
                }
            }
        }
        report.epoch_totals.push(epoch_total / samples.max(1.0));
        let mut mean_terms = EmpLossTerms::default();
        mean_terms.scaled_add(&epoch_terms, 1.0 / term_samples.max(1.0));
        report.epoch_terms.push(mean_terms);
        let _ = epoch;
    }
    Ok((nets, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use rand::Rng;

    fn tiny_cfg() -> EmpTrainConfig {
        EmpTrainConfig {
            encoder_hidden: vec![32, 32],
            fusion_hidden: vec![32, 32],
            latent: 8,
            ..EmpTrainConfig::default()
        }
    }

    fn model() -> Arc<RobotModel> {
        Arc::new(RobotModel::default_humanoid())
    }

    fn random_frame(rng: &mut impl Rng) -> Vec<f64> {
        (0..FRAME_WIDTH).map(|_| rng.gen_range(-0.5..0.5)).collect()
    }

    #[test]
    fn zero_weight_adjust_returns_decoder_bias() {
        let m = model();
        let mut nets = EmpNets::new(&tiny_cfg(), &m, 0);
        for spec_prefix in ["fs", "ft", "fpsi", "dec"] {
            let layers = match spec_prefix {
                "fs" => nets.fs.layer_dims().len(),
                "ft" => nets.ft.layer_dims().len(),
                "fpsi" => nets.fusion.layer_dims().len(),
                _ => nets.dec.layer_dims().len(),
            };
            for i in 0..layers {
                for s in ["w", "b"] {
                    nets.params
                        .get_mut(&format!("{spec_prefix}.{s}{i}"))
                        .data
                        .iter_mut()
                        .for_each(|v| *v = 0.0);
                }
            }
        }
        let mut rng = rng_from_seed(1);
        let frame = random_frame(&mut rng);
        let goal = [0.3; NUM_UPPER_JOINTS];
        let (adjusted, z, regloss) = nets.adjust(&frame, &goal);
        // zero decoder bias is the documented neutral pose (all zeros)
        assert_eq!(adjusted, [0.0; NUM_UPPER_JOINTS]);
        assert!(z.iter().all(|v| *v == 0.0));
        assert_eq!(regloss, 0.0);
    }

    #[test]
    fn adjust_is_deterministic_and_in_limits() {
        let m = model();
        let nets = EmpNets::new(&tiny_cfg(), &m, 3);
        let mut rng = rng_from_seed(2);
        let (lo, hi) = m.upper_limits();
        for _ in 0..20 {
            let frame = random_frame(&mut rng);
            let mut goal = [0.0; NUM_UPPER_JOINTS];
            goal.iter_mut().for_each(|g| *g = rng.gen_range(-2.0..2.0));
            let (a1, z1, r1) = nets.adjust(&frame, &goal);
            let (a2, z2, r2) = nets.adjust(&frame, &goal);
            assert_eq!(a1, a2);
            assert_eq!(z1, z2);
            assert_eq!(r1, r2);
            for j in 0..NUM_UPPER_JOINTS {
                assert!(a1[j] >= lo[j] && a1[j] <= hi[j]);
            }
        }
    }

    #[test]
    fn taped_adjust_matches_plain() {
        let m = model();
        let nets = EmpNets::new(&tiny_cfg(), &m, 5);
        let mut rng = rng_from_seed(4);
        let frame = random_frame(&mut rng);
        let goal = [0.2; NUM_UPPER_JOINTS];
        let (plain, z_plain, _) = nets.adjust(&frame, &goal);
        let mut tape = Tape::new();
        let f_t = Tensor::matrix(1, FRAME_WIDTH, frame.clone());
        let g_t = Tensor::matrix(1, NUM_UPPER_JOINTS, goal.to_vec());
        let f = tape.constant(&f_t);
        let g = tape.constant(&g_t);
        let (adj, z) = nets.adjust_on_tape(&mut tape, f, g);
        assert_eq!(tape.value(adj), &plain[..]);
        assert_eq!(tape.value(z), z_plain.as_slice());
    }

    #[test]
    fn goal_jacobian_matches_finite_differences() {
        let m = model();
        let nets = EmpNets::new(&tiny_cfg(), &m, 7);
        let mut rng = rng_from_seed(6);
        let frame = random_frame(&mut rng);
        let goal: Vec<f64> = (0..NUM_UPPER_JOINTS).map(|_| rng.gen_range(-0.4..0.4)).collect();
        let weights: Vec<f64> =
            (0..NUM_UPPER_JOINTS).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let eval = |g: &[f64]| {
            let mut arr = [0.0; NUM_UPPER_JOINTS];
            arr.copy_from_slice(g);
            let (adj, _, _) = nets.adjust(&frame, &arr);
            adj.iter().zip(&weights).map(|(a, w)| a * w).sum::<f64>()
        };
        let mut tape = Tape::new();
        let f_t = Tensor::matrix(1, FRAME_WIDTH, frame.clone());
        let g_t = Tensor::matrix(1, NUM_UPPER_JOINTS, goal.clone());
        let f = tape.constant(&f_t);
        let g = tape.constant(&g_t);
        let (adj, _) = nets.adjust_on_tape(&mut tape, f, g);
        let flat = tape.reshape(adj, vec![NUM_UPPER_JOINTS]);
        let wv = tape.vector(&weights);
        let p = tape.mul(flat, wv);
        let loss = tape.sum(p);
        tape.backward(loss).unwrap();
        let err = gradcheck::check_grad(eval, &goal, &tape.grad(g));
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn loss_formula_boundary_values() {
        // spec boundary: identical goals, zero latent, upright prediction,
        // support distance exactly at the neutral point, constant history,
        // all pairs at the margin distance
        let goal = [0.3; NUM_UPPER_JOINTS];
        let parts = EmpLossParts {
            pg_xy_sq: 0.0,
            pair_distances: vec![COLLISION_MARGIN; 15],
            support_distance: CENTROID_NEUTRAL,
        };
        let z = vec![0.0; 8];
        let terms = emp_loss_terms(&goal, &goal, &goal, &goal, &z, &parts, false);
        assert_eq!(terms.rec, 0.0);
        assert_eq!(terms.ori, 0.0);
        assert_eq!(terms.smo, 0.0);
        assert_eq!(terms.reg, 0.0);
        assert!((terms.cen - 0.0).abs() < 1e-12);
        assert!((terms.col - 15.0).abs() < 1e-12, "col {}", terms.col);
    }

    #[test]
    fn centroid_cap_engages_far_from_support() {
        let goal = [0.0; NUM_UPPER_JOINTS];
        let parts = EmpLossParts {
            pg_xy_sq: 0.0,
            pair_distances: vec![],
            support_distance: 2.0,
        };
        let terms = emp_loss_terms(&goal, &goal, &goal, &goal, &[], &parts, false);
        assert!((terms.cen - (CENTROID_CAP - 1.0)).abs() < 1e-12);
        // lower bound at zero distance
        let parts0 = EmpLossParts { support_distance: 0.0, ..parts };
        let t0 = emp_loss_terms(&goal, &goal, &goal, &goal, &[], &parts0, false);
        let bound = -(1.0 - (-7.0 * CENTROID_NEUTRAL as f64).exp());
        assert!((t0.cen - bound).abs() < 1e-12);
    }

    #[test]
    fn literal_mode_restores_printed_signs() {
        let goal = [0.0; NUM_UPPER_JOINTS];
        let parts = EmpLossParts {
            pg_xy_sq: 0.3,
            pair_distances: vec![0.02],
            support_distance: 0.05,
        };
        let corrected = emp_loss_terms(&goal, &goal, &goal, &goal, &[], &parts, false);
        let literal = emp_loss_terms(&goal, &goal, &goal, &goal, &[], &parts, true);
        // corrected orientation grows with tilt; literal decreases
        assert!(corrected.ori > 0.0 && literal.ori < 0.0);
        assert!((corrected.ori + literal.ori).abs() < 1e-12);
        // corrected collision grows as spheres approach; literal shrinks
        assert!(corrected.col > 1.0 && literal.col < 1.0);
    }

    #[test]
    fn taped_loss_matches_plain_formula() {
        let m = model();
        let mut rng = rng_from_seed(8);
        let weights = EmpLossWeights::default();
        for _ in 0..10 {
            let mut goal = [0.0; NUM_UPPER_JOINTS];
            goal.iter_mut().for_each(|g| *g = rng.gen_range(-0.8..0.8));
            let mut adjusted = [0.0; NUM_UPPER_JOINTS];
            adjusted.iter_mut().for_each(|g| *g = rng.gen_range(-0.8..0.8));
            let prev = [0.1; NUM_UPPER_JOINTS];
            let prev2 = [0.05; NUM_UPPER_JOINTS];
            let z: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut lower = [0.0; NUM_LEG_JOINTS];
            lower.iter_mut().for_each(|l| *l = rng.gen_range(-0.3..0.3));
            let mut frame = vec![0.0; FRAME_WIDTH];
            for v in frame.iter_mut() {
                *v = rng.gen_range(-0.3..0.3);
            }

            let mut tape = Tape::new();
            let adj = tape.vector(&adjusted);
            let zv = tape.vector(&z);
            let fv = tape.vector(&frame);
            let (total, terms) = emp_loss_on_tape(
                &mut tape, &m, &weights, false, &goal, adj, &prev, &prev2, zv, fv, &lower,
            );
            // plain mirror
            let rpy = crate::world_model::frame_rpy(&frame);
            let parts = emp_geometry(&m, &adjusted, &lower, rpy);
            let plain = emp_loss_terms(&goal, &adjusted, &prev, &prev2, &z, &parts, false);
            assert!((terms.rec - plain.rec).abs() < 1e-10);
            assert!((terms.ori - plain.ori).abs() < 1e-10, "{} vs {}", terms.ori, plain.ori);
            assert!((terms.col - plain.col).abs() < 1e-9, "{} vs {}", terms.col, plain.col);
            assert!((terms.cen - plain.cen).abs() < 1e-9);
            assert!((terms.smo - plain.smo).abs() < 1e-10);
            assert!((terms.reg - plain.reg).abs() < 1e-12);
            let total_plain = plain.total(&weights);
            assert!(
                (tape.scalar_value(total) - total_plain).abs() < 1e-8,
                "{} vs {}",
                tape.scalar_value(total),
                total_plain
            );
        }
    }

    #[test]
    fn loss_gradient_through_fk_matches_finite_differences() {
        let m = model();
        let weights = EmpLossWeights::default();
        let mut rng = rng_from_seed(9);
        let goal = [0.2; NUM_UPPER_JOINTS];
        let prev = [0.1; NUM_UPPER_JOINTS];
        let prev2 = [0.0; NUM_UPPER_JOINTS];
        let lower = [0.0; NUM_LEG_JOINTS];
        let z = vec![0.1; 4];
        let mut frame = vec![0.0; FRAME_WIDTH];
        for v in frame.iter_mut() {
            *v = rng.gen_range(-0.1..0.1);
        }
        let adjusted: Vec<f64> =
            (0..NUM_UPPER_JOINTS).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let eval = |a: &[f64]| {
            let mut arr = [0.0; NUM_UPPER_JOINTS];
            arr.copy_from_slice(a);
            let rpy = crate::world_model::frame_rpy(&frame);
            let parts = emp_geometry(&m, &arr, &lower, rpy);
            emp_loss_terms(&goal, &arr, &prev, &prev2, &z, &parts, false).total(&weights)
        };
        let mut tape = Tape::new();
        let adj = tape.vector(&adjusted);
        let zv = tape.vector(&z);
        let fv = tape.vector(&frame);
        let (total, _) = emp_loss_on_tape(
            &mut tape, &m, &weights, false, &goal, adj, &prev, &prev2, zv, fv, &lower,
        );
        tape.backward(total).unwrap();
        let err = gradcheck::check_grad(eval, &adjusted, &tape.grad(adj));
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn gating_thresholds() {
        let m = model();
        let nets = EmpNets::new(&tiny_cfg(), &m, 11);
        let mut rng = rng_from_seed(10);
        let frame = random_frame(&mut rng);
        let goal = [0.4; NUM_UPPER_JOINTS];
        let (adjusted, _, regloss) = nets.adjust(&frame, &goal);
        assert!(regloss > 0.0);
        // threshold 0 behaves like plain adjust
        let (g0, _) = nets.gated_adjust(&frame, &goal, 0.0);
        assert_eq!(g0, adjusted);
        // infinite threshold is the identity
        let (ginf, _) = nets.gated_adjust(&frame, &goal, f64::INFINITY);
        assert_eq!(ginf, goal);
        // below/above the configured threshold
        let (g_lo, r) = nets.gated_adjust(&frame, &goal, r_plus_eps(regloss));
        assert_eq!(g_lo, goal);
        assert_eq!(r, regloss);
        let (g_hi, _) = nets.gated_adjust(&frame, &goal, regloss * 0.5);
        assert_eq!(g_hi, adjusted);
    }

    fn r_plus_eps(r: f64) -> f64 {
        r + 1e-12
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = model();
        let nets = EmpNets::new(&tiny_cfg(), &m, 13);
        let dir = std::env::temp_dir().join(format!("emp_ckpt_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("emp.bin");
        nets.save(&path).unwrap();
        let loaded = EmpNets::load(&path, &m).unwrap();
        let mut rng = rng_from_seed(14);
        let frame = random_frame(&mut rng);
        let goal = [0.1; NUM_UPPER_JOINTS];
        let (a1, _, r1) = nets.adjust(&frame, &goal);
        let (a2, _, r2) = loaded.adjust(&frame, &goal);
        assert_eq!(a1, a2);
        assert_eq!(r1.to_bits(), r2.to_bits());
        std::fs::remove_dir_all(&dir).ok();
    }
}
