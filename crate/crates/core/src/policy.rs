//! Goal-conditioned lower-body balance policy trained with PPO.
//!
//! The actor maps the flattened 15-frame observation window to 12 leg-joint
//! action means with a learned per-dimension log-std; the critic shares the
//! input. Updates use the clipped surrogate with GAE, advantage
//! normalization, an entropy bonus and a KL early stop.

use crate::config::{PolicyTrainConfig, SimConfig};
use crate::kinematics::{RobotModel, NUM_UPPER_JOINTS};
use crate::motion::{looped_frame, RobotMotionClip};
use crate::nn::*;
use crate::sim::*;
use crate::tensor::{Tape, Tensor};
use crate::util::*;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::sync::Arc;

pub const LOG_STD_MIN: f64 = -4.0;
pub const LOG_STD_MAX: f64 = 1.0;
const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("training diverged at update {update}: mean episode length {mean_ep_len:.1}")]
    Diverged { update: usize, mean_ep_len: f64 },
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Actor-critic parameter bundle.
pub struct PolicyNets {
    pub params: NetParams,
    pub actor: MlpSpec,
    pub critic: MlpSpec,
    pub obs_dim: usize,
    pub obs_window: usize,
    pub frame_width: usize,
    pub privileged: bool,
}

impl PolicyNets {
    pub fn new(cfg: &PolicyTrainConfig, seed: u64) -> Self {
        let frame_width = if cfg.privileged { FRAME_WIDTH_PRIVILEGED } else { FRAME_WIDTH };
        Self::with_dims(cfg.obs_window, frame_width, &cfg.hidden, cfg.log_std_init, cfg.privileged, seed)
    }

    pub fn with_dims(
        obs_window: usize,
        frame_width: usize,
        hidden: &[usize],
        log_std_init: f64,
        privileged: bool,
        seed: u64,
    ) -> Self {
        let obs_dim = obs_window * frame_width;
        let actor = MlpSpec::new(obs_dim, hidden, NUM_ACTIONS, Activation::Elu);
        let critic = MlpSpec::new(obs_dim, hidden, 1, Activation::Elu);
        let mut params = NetParams::new();
        let mut rng = rng_from_seed(seed);
        init_mlp(&mut params, "actor", &actor, &mut rng);
        init_mlp(&mut params, "critic", &critic, &mut rng);
        params.insert("actor.log_std", Tensor::vector(vec![log_std_init; NUM_ACTIONS]));
        // checkpoint metadata
        params.insert(
            "meta.arch",
            Tensor::vector(
                [obs_window as f64, frame_width as f64, privileged as u64 as f64]
                    .into_iter()
                    .chain(hidden.iter().map(|&h| h as f64))
                    .collect(),
            ),
        );
        PolicyNets { params, actor, critic, obs_dim, obs_window, frame_width, privileged }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), NnError> {
        self.params.save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, NnError> {
        let params = NetParams::load(path)?;
        let meta = params.get("meta.arch").data.clone();
        if meta.len() < 4 {
            return Err(NnError::Checkpoint("policy meta.arch too short".into()));
        }
        let obs_window = meta[0] as usize;
        let frame_width = meta[1] as usize;
        let privileged = meta[2] != 0.0;
        let hidden: Vec<usize> = meta[3..].iter().map(|&h| h as usize).collect();
        let obs_dim = obs_window * frame_width;
        Ok(PolicyNets {
            actor: MlpSpec::new(obs_dim, &hidden, NUM_ACTIONS, Activation::Elu),
            critic: MlpSpec::new(obs_dim, &hidden, 1, Activation::Elu),
            params,
            obs_dim,
            obs_window,
            frame_width,
            privileged,
        })
    }

    pub fn log_std(&self) -> &[f64] {
        &self.params.get("actor.log_std").data
    }

    fn clamp_log_std(&mut self) {
        let t = self.params.get_mut("actor.log_std");
        t.data.iter_mut().for_each(|v| *v = v.clamp(LOG_STD_MIN, LOG_STD_MAX));
    }

    /// Batched forward over N stacked observations; samples one action per
    /// row (mean when deterministic) and returns (action, log-prob, value).
    pub fn act_batch(
        &self,
        obs: &[f64],
        n: usize,
        stochastic: bool,
        rng: &mut ChaCha8Rng,
    ) -> Vec<([f64; NUM_ACTIONS], f64, f64)> {
        assert!(obs.iter().all(|x| x.is_finite()), "NaN observation");
        let mu = forward_mlp_plain(&self.params, "actor", &self.actor, obs, n);
        let values = forward_mlp_plain(&self.params, "critic", &self.critic, obs, n);
        assert!(mu.iter().all(|x| x.is_finite()), "NaN in actor output");
        let log_std = self.log_std();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let mut action = [0.0; NUM_ACTIONS];
            let mut logp = -(NUM_ACTIONS as f64) * 0.5 * LN_2PI;
            for j in 0..NUM_ACTIONS {
                let m = mu[i * NUM_ACTIONS + j];
                let s = log_std[j].exp();
                let a = if stochastic { m + s * sample_normal(rng) } else { m };
                let z = (a - m) / s;
                logp += -0.5 * z * z - log_std[j];
                action[j] = a;
            }
            out.push((action, logp, values[i]));
        }
        out
    }

    pub fn act(
        &self,
        obs: &[f64],
        stochastic: bool,
        rng: &mut ChaCha8Rng,
    ) -> ([f64; NUM_ACTIONS], f64, f64) {
        self.act_batch(obs, 1, stochastic, rng).pop().expect("one row")
    }

    pub fn values(&self, obs: &[f64], n: usize) -> Vec<f64> {
        forward_mlp_plain(&self.params, "critic", &self.critic, obs, n)
    }
}

/// Closed-form diagonal Gaussian log density (shared by tests and updates).
pub fn gaussian_log_prob(action: &[f64], mu: &[f64], log_std: &[f64]) -> f64 {
    let mut logp = -(action.len() as f64) * 0.5 * LN_2PI;
    for j in 0..action.len() {
        let s = log_std[j].exp();
        let z = (action[j] - mu[j]) / s;
        logp += -0.5 * z * z - log_std[j];
    }
    logp
}

/// Flat rollout storage; index = step * envs + env.
pub struct RolloutBuffer {
    pub envs: usize,
    pub horizon: usize,
    pub obs_dim: usize,
    pub obs: Vec<f64>,
    pub actions: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub terminated: Vec<bool>,
    /// Bootstrap value for truncated episodes (0 elsewhere).
    pub truncation_value: Vec<f64>,
    pub truncated: Vec<bool>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl RolloutBuffer {
    pub fn new(envs: usize, horizon: usize, obs_dim: usize) -> Self {
        let n = envs * horizon;
        RolloutBuffer {
            envs,
            horizon,
            obs_dim,
            obs: vec![0.0; n * obs_dim],
            actions: vec![0.0; n * NUM_ACTIONS],
            log_probs: vec![0.0; n],
            rewards: vec![0.0; n],
            values: vec![0.0; n],
            terminated: vec![false; n],
            truncation_value: vec![0.0; n],
            truncated: vec![false; n],
            advantages: vec![0.0; n],
            returns: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.envs * self.horizon
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// GAE(lambda). Termination stops both bootstrap and propagation;
    /// truncation bootstraps the recorded value but stops propagation.
    pub fn compute_gae(&mut self, last_values: &[f64], gamma: f64, lam: f64) {
        assert_eq!(last_values.len(), self.envs);
        for e in 0..self.envs {
            let mut adv = 0.0;
            for t in (0..self.horizon).rev() {
                let idx = t * self.envs + e;
                let (next_value, prop) = if self.terminated[idx] {
                    (0.0, 0.0)
                } else if self.truncated[idx] {
                    (self.truncation_value[idx], 0.0)
                } else if t + 1 == self.horizon {
                    (last_values[e], 1.0)
                } else {
                    (self.values[(t + 1) * self.envs + e], 1.0)
                };
                let delta = self.rewards[idx] + gamma * next_value - self.values[idx];
                adv = delta + gamma * lam * prop * adv;
                self.advantages[idx] = adv;
                self.returns[idx] = adv + self.values[idx];
            }
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub epochs_run: usize,
    pub kl_early_stop: bool,
    /// Per-epoch value loss means (diagnostics).
    pub value_loss_per_epoch: Vec<f64>,
}

/// Clipped-surrogate PPO update over the whole buffer.
pub fn ppo_update(
    nets: &mut PolicyNets,
    buf: &RolloutBuffer,
    cfg: &PolicyTrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<UpdateStats, PolicyError> {
    let n = buf.len();
    // normalized advantages
    let mean = buf.advantages.iter().sum::<f64>() / n as f64;
    let var = buf.advantages.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n as f64;
    let std = var.sqrt().max(1e-8);
    let norm_adv: Vec<f64> = buf.advantages.iter().map(|a| (a - mean) / std).collect();

    let mut stats = UpdateStats::default();
    let mb_size = (n / cfg.minibatches).max(1);
    let mut indices: Vec<usize> = (0..n).collect();
    'epochs: for _epoch in 0..cfg.epochs {
        indices.shuffle(rng);
        let mut epoch_vloss = 0.0;
        let mut epoch_batches = 0.0;
        for mb in indices.chunks(mb_size) {
            let m = mb.len();
            let mut obs = Vec::with_capacity(m * buf.obs_dim);
            let mut acts = Vec::with_capacity(m * NUM_ACTIONS);
            let mut old_logp = Vec::with_capacity(m);
            let mut adv = Vec::with_capacity(m);
            let mut ret = Vec::with_capacity(m);
            for &i in mb {
                obs.extend_from_slice(&buf.obs[i * buf.obs_dim..(i + 1) * buf.obs_dim]);
                acts.extend_from_slice(&buf.actions[i * NUM_ACTIONS..(i + 1) * NUM_ACTIONS]);
                old_logp.push(buf.log_probs[i]);
                adv.push(norm_adv[i]);
                ret.push(buf.returns[i]);
            }

            let mut tape = Tape::new();
            let obs_t = Tensor::matrix(m, buf.obs_dim, obs);
            let obs_v = tape.constant(&obs_t);
            let mu = forward_mlp(&mut tape, &nets.params, "actor", &nets.actor, obs_v)?;
            let log_std = tape.param(&nets.params, "actor.log_std");
            let std_v = tape.exp(log_std);
            let inv_std = tape.recip(std_v);
            let acts_t = Tensor::matrix(m, NUM_ACTIONS, acts);
            let acts_v = tape.constant(&acts_t);
            let diff = tape.sub(acts_v, mu);
            let z = tape.mul_row(diff, inv_std);
            let z2 = tape.mul(z, z);
            let z2sum = tape.sum_axis1(z2);
            let half = tape.scale(z2sum, -0.5);
            let ls_sum = tape.sum(log_std);
            let neg_ls = tape.scale(ls_sum, -1.0);
            let shifted = tape.add_scalar(half, neg_ls);
            let logp_new = tape.add_const(shifted, -(NUM_ACTIONS as f64) * 0.5 * LN_2PI);
            let old_t = Tensor::vector(old_logp.clone());
            let old_v = tape.constant(&old_t);
            let logdiff = tape.sub(logp_new, old_v);
            let ratio = tape.exp(logdiff);
            let adv_t = Tensor::vector(adv);
            let adv_v = tape.constant(&adv_t);
            let surr1 = tape.mul(ratio, adv_v);
            let clipped = tape.clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip);
            let surr2 = tape.mul(clipped, adv_v);
            let surr = tape.min(surr1, surr2);
            let surr_mean = tape.mean(surr);
            let policy_loss = tape.scale(surr_mean, -1.0);

            // diagonal Gaussian entropy: sum(log_std) + D/2 (1 + ln 2pi)
            let entropy = tape.add_const(ls_sum, (NUM_ACTIONS as f64) * 0.5 * (1.0 + LN_2PI));
            let neg_entropy = tape.scale(entropy, -cfg.entropy_coef);

            let v = forward_mlp(&mut tape, &nets.params, "critic", &nets.critic, obs_v)?;
            let v_flat = tape.reshape(v, vec![m]);
            let ret_t = Tensor::vector(ret);
            let ret_v = tape.constant(&ret_t);
            let verr = tape.sub(v_flat, ret_v);
            let verr2 = tape.mul(verr, verr);
            let vmean = tape.mean(verr2);
            let value_loss = tape.scale(vmean, cfg.value_coef);

            let partial = tape.add(policy_loss, neg_entropy);
            let total = tape.add(partial, value_loss);
            tape.backward(total).expect("fresh tape per minibatch");
            tape.apply_param_grads(&mut nets.params);
            nets.params.adam_step(cfg.lr)?;
            nets.clamp_log_std();

            let kl = {
                let lp = tape.value(logp_new);
                old_logp.iter().zip(lp).map(|(o, n)| o - n).sum::<f64>() / m as f64
            };
            stats.policy_loss = tape.scalar_value(policy_loss);
            stats.value_loss = tape.scalar_value(vmean);
            stats.entropy = tape.scalar_value(entropy);
            stats.approx_kl = kl;
            epoch_vloss += tape.scalar_value(vmean);
            epoch_batches += 1.0;
            if kl > cfg.kl_stop {
                eprintln!("warning: PPO epoch early stop, approx KL {kl:.3} > {}", cfg.kl_stop);
                stats.kl_early_stop = true;
                stats.epochs_run += 1;
                stats.value_loss_per_epoch.push(epoch_vloss / epoch_batches);
                break 'epochs;
            }
        }
        stats.epochs_run += 1;
        stats.value_loss_per_epoch.push(epoch_vloss / epoch_batches.max(1.0));
    }
    Ok(stats)
}

// ---------------------------------------------------------------------------
// Training driver
// ---------------------------------------------------------------------------

struct EnvSlot {
    state: SimState,
    obs: ObsBuilder,
    prev_action: [f64; NUM_ACTIONS],
    goal_clip: usize,
    goal_t: usize,
    episode: u64,
    ep_len: usize,
    ep_reward: f64,
    pending_reward: f64,
    pending_terminated: bool,
    pending_goal: [f64; NUM_UPPER_JOINTS],
    pending_terms: [f64; 15],
}

#[derive(Clone, Debug)]
pub struct TrainLogRow {
    pub update: usize,
    pub mean_reward: f64,
    pub term_means: [f64; 15],
    pub suc: f64,
    pub mean_ep_len: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
}

impl TrainLogRow {
    pub fn csv_header() -> String {
        let mut cols = vec![
            "update".to_string(),
            "mean_reward".to_string(),
        ];
        cols.extend(REWARD_NAMES.iter().map(|n| format!("r_{n}")));
        cols.extend(
            ["suc", "mean_ep_len", "policy_loss", "value_loss", "entropy", "approx_kl"]
                .iter()
                .map(|s| s.to_string()),
        );
        cols.join(",")
    }

    pub fn to_csv(&self) -> String {
        let mut f = vec![self.update.to_string(), fmt_f64(self.mean_reward)];
        f.extend(self.term_means.iter().map(|v| fmt_f64(*v)));
        f.push(fmt_f64(self.suc));
        f.push(fmt_f64(self.mean_ep_len));
        f.push(fmt_f64(self.policy_loss));
        f.push(fmt_f64(self.value_loss));
        f.push(fmt_f64(self.entropy));
        f.push(fmt_f64(self.approx_kl));
        f.join(",")
    }
}

pub struct TrainOutcome {
    pub nets: PolicyNets,
    pub log: Vec<TrainLogRow>,
}

fn reset_slot(slot: &mut EnvSlot, env: &SimEnv, master_seed: u64, env_idx: usize, goals: &[RobotMotionClip]) {
    let seed = split_seed(master_seed, (env_idx as u64) << 32 | slot.episode);
    slot.state = env.reset(seed);
    slot.obs.reset();
    slot.prev_action = [0.0; NUM_ACTIONS];
    slot.goal_clip = (split_seed(seed, 77) % goals.len() as u64) as usize;
    slot.goal_t = 0;
    slot.ep_len = 0;
    slot.ep_reward = 0.0;
    slot.episode += 1;
    let goal = looped_frame(&goals[slot.goal_clip], 5, 0);
    let frame = state_frame(&slot.state, &slot.prev_action, &goal, slot.obs.width() == FRAME_WIDTH_PRIVILEGED);
    slot.obs.push(frame);
    slot.pending_goal = goal;
}

/// Train the balance policy on batched environments with goals replayed from
/// dataset chunks. Deterministic in (seed, config, dataset).
pub fn train_policy(
    cfg: &PolicyTrainConfig,
    sim_cfg: &SimConfig,
    model: Arc<RobotModel>,
    goals: &[RobotMotionClip],
    seed: u64,
    mut on_checkpoint: impl FnMut(usize, &PolicyNets, &[TrainLogRow]),
) -> Result<TrainOutcome, PolicyError> {
    assert!(!goals.is_empty(), "goal dataset is empty");
    let env = SimEnv::new(model, sim_cfg.clone());
    let mut nets = PolicyNets::new(cfg, split_seed(seed, 1));
    let mut rng = rng_from_seed(split_seed(seed, 2));
    let privileged = cfg.privileged;
    let width = if privileged { FRAME_WIDTH_PRIVILEGED } else { FRAME_WIDTH };

    let mut slots: Vec<EnvSlot> = (0..cfg.envs)
        .map(|e| {
            let mut slot = EnvSlot {
                state: env.reset(0),
                obs: ObsBuilder::new(cfg.obs_window, width),
                prev_action: [0.0; NUM_ACTIONS],
                goal_clip: 0,
                goal_t: 0,
                episode: 0,
                ep_len: 0,
                ep_reward: 0.0,
                pending_reward: 0.0,
                pending_terminated: false,
                pending_goal: [0.0; NUM_UPPER_JOINTS],
                pending_terms: [0.0; 15],
            };
            reset_slot(&mut slot, &env, seed, e, goals);
            slot
        })
        .collect();

    let mut log = Vec::with_capacity(cfg.updates);
    for update in 0..cfg.updates {
        let mut buf = RolloutBuffer::new(cfg.envs, cfg.horizon, nets.obs_dim);
        let mut ep_ends = 0usize;
        let mut ep_terms = 0usize;
        let mut ep_len_sum = 0usize;
        let mut reward_sum = 0.0;
        let mut term_sums = [0.0; 15];
        for t in 0..cfg.horizon {
            // batched observation matrix
            let mut obs_mat = vec![0.0; cfg.envs * nets.obs_dim];
            for (e, slot) in slots.iter().enumerate() {
                obs_mat[e * nets.obs_dim..(e + 1) * nets.obs_dim]
                    .copy_from_slice(&slot.obs.window_flat());
            }
            let decisions = nets.act_batch(&obs_mat, cfg.envs, true, &mut rng);
            for e in 0..cfg.envs {
                let idx = t * cfg.envs + e;
                let (action, logp, value) = decisions[e];
                buf.obs[idx * nets.obs_dim..(idx + 1) * nets.obs_dim]
                    .copy_from_slice(&obs_mat[e * nets.obs_dim..(e + 1) * nets.obs_dim]);
                buf.actions[idx * NUM_ACTIONS..(idx + 1) * NUM_ACTIONS].copy_from_slice(&action);
                buf.log_probs[idx] = logp;
                buf.values[idx] = value;
            }
            // fan the physics out across envs
            slots.par_iter_mut().enumerate().for_each(|(e, slot)| {
                let (action, _, _) = decisions[e];
                let goal = looped_frame(&goals[slot.goal_clip], 5, slot.goal_t);
                let out = env.step(&mut slot.state, &action, &goal);
                slot.goal_t += 1;
                slot.prev_action = action;
                slot.pending_reward = out.reward;
                slot.pending_terminated = out.terminated;
                slot.pending_goal = goal;
                slot.pending_terms = out.terms.0;
                let frame = state_frame(
                    &slot.state,
                    &slot.prev_action,
                    &goal,
                    slot.obs.width() == FRAME_WIDTH_PRIVILEGED,
                );
                slot.obs.push(frame);
            });
            for (e, slot) in slots.iter_mut().enumerate() {
                let idx = t * cfg.envs + e;
                buf.rewards[idx] = slot.pending_reward;
                buf.terminated[idx] = slot.pending_terminated;
                reward_sum += slot.pending_reward;
                for (s, v) in term_sums.iter_mut().zip(&slot.pending_terms) {
                    *s += v;
                }
                slot.ep_len += 1;
                slot.ep_reward += slot.pending_reward;
                let truncate = slot.ep_len >= env.cfg.episode_len_steps;
                if slot.pending_terminated || truncate {
                    if truncate && !slot.pending_terminated {
                        buf.truncated[idx] = true;
                        let v_boot = nets.values(&slot.obs.window_flat(), 1)[0];
                        buf.truncation_value[idx] = v_boot;
                    }
                    ep_ends += 1;
                    ep_terms += slot.pending_terminated as usize;
                    ep_len_sum += slot.ep_len;
                    reset_slot(slot, &env, seed, e, goals);
                }
            }
        }
        // bootstrap values for rollout tails
        let mut obs_mat = vec![0.0; cfg.envs * nets.obs_dim];
        for (e, slot) in slots.iter().enumerate() {
            obs_mat[e * nets.obs_dim..(e + 1) * nets.obs_dim]
                .copy_from_slice(&slot.obs.window_flat());
        }
        let last_values = nets.values(&obs_mat, cfg.envs);
        buf.compute_gae(&last_values, cfg.gamma, cfg.gae_lambda);
        let stats = ppo_update(&mut nets, &buf, cfg, &mut rng)?;

        let steps = (cfg.envs * cfg.horizon) as f64;
        let mean_ep_len = if ep_ends > 0 {
            ep_len_sum as f64 / ep_ends as f64
        } else {
            env.cfg.episode_len_steps as f64
        };
        let suc = if ep_ends > 0 { 1.0 - ep_terms as f64 / ep_ends as f64 } else { 1.0 };
        let mut term_means = [0.0; 15];
        for (m, s) in term_means.iter_mut().zip(&term_sums) {
            *m = s / steps;
        }
        log.push(TrainLogRow {
            update,
            mean_reward: reward_sum / steps,
            term_means,
            suc,
            mean_ep_len,
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
            entropy: stats.entropy,
            approx_kl: stats.approx_kl,
        });

        // divergence guard after warmup
        if update >= 20 && ep_ends > 0 && mean_ep_len < cfg.divergence_min_ep_len as f64 {
            return Err(PolicyError::Diverged { update, mean_ep_len });
        }
        if cfg.checkpoint_every > 0 && (update + 1) % cfg.checkpoint_every == 0 {
            on_checkpoint(update, &nets, &log);
        }
    }
    Ok(TrainOutcome { nets, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_nets(seed: u64) -> PolicyNets {
        PolicyNets::with_dims(2, 5, &[16], -1.0, false, seed)
    }

    #[test]
    fn zero_weight_actor_emits_zero_action() {
        let mut nets = tiny_nets(0);
        for i in 0..2 {
            for s in ["w", "b"] {
                let name = format!("actor.{s}{i}");
                nets.params.get_mut(&name).data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let obs = vec![0.3; nets.obs_dim];
        let mut rng = rng_from_seed(1);
        let (a, _, _) = nets.act(&obs, false, &mut rng);
        assert_eq!(a, [0.0; NUM_ACTIONS]);
    }

    #[test]
    fn deterministic_act_repeats() {
        let nets = tiny_nets(3);
        let obs: Vec<f64> = (0..nets.obs_dim).map(|i| (i as f64).sin()).collect();
        let mut rng = rng_from_seed(0);
        let (a1, l1, v1) = nets.act(&obs, false, &mut rng);
        let (a2, l2, v2) = nets.act(&obs, false, &mut rng);
        assert_eq!(a1, a2);
        assert_eq!(l1, l2);
        assert_eq!(v1, v2);
    }

    #[test]
    fn log_prob_matches_density_formula() {
        let nets = tiny_nets(5);
        let obs: Vec<f64> = (0..nets.obs_dim).map(|i| 0.1 * i as f64).collect();
        let mut rng = rng_from_seed(9);
        let (a, logp, _) = nets.act(&obs, true, &mut rng);
        let mu = forward_mlp_plain(&nets.params, "actor", &nets.actor, &obs, 1);
        let expect = gaussian_log_prob(&a, &mu, nets.log_std());
        assert!((logp - expect).abs() < 1e-12, "{logp} vs {expect}");
    }

    #[test]
    fn gae_with_gamma_lambda_one_is_return_minus_value() {
        let mut buf = RolloutBuffer::new(1, 5, 1);
        buf.rewards = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        buf.values = vec![0.5, 0.5, 0.5, 0.5, 0.5];
        buf.terminated = vec![false, false, false, false, true];
        buf.compute_gae(&[99.0], 1.0, 1.0);
        // terminal at the end: undiscounted return minus value
        let expect0 = (1.0 + 2.0 + 3.0 + 4.0 + 5.0) - 0.5;
        assert!((buf.advantages[0] - expect0).abs() < 1e-12);
        let expect4 = 5.0 - 0.5;
        assert!((buf.advantages[4] - expect4).abs() < 1e-12);
    }

    #[test]
    fn zero_advantage_leaves_actor_weights_still() {
        let mut nets = tiny_nets(7);
        let cfg = PolicyTrainConfig {
            entropy_coef: 0.0,
            epochs: 1,
            minibatches: 1,
            ..PolicyTrainConfig::default()
        };
        let n = 8;
        let mut buf = RolloutBuffer::new(2, n / 2, nets.obs_dim);
        let mut rng = rng_from_seed(2);
        for i in 0..n {
            let obs: Vec<f64> = (0..nets.obs_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            buf.obs[i * nets.obs_dim..(i + 1) * nets.obs_dim].copy_from_slice(&obs);
            let (a, logp, v) = nets.act(&obs, true, &mut rng);
            buf.actions[i * NUM_ACTIONS..(i + 1) * NUM_ACTIONS].copy_from_slice(&a);
            buf.log_probs[i] = logp;
            buf.values[i] = v;
            // returns equal to values so the critic is also at rest
            buf.advantages[i] = 0.0;
            buf.returns[i] = v;
        }
        let w_before = nets.params.get("actor.w0").data.clone();
        let ls_before = nets.params.get("actor.log_std").data.clone();
        ppo_update(&mut nets, &buf, &cfg, &mut rng_from_seed(3)).unwrap();
        // normalized zero advantages stay zero; surrogate gradient vanishes
        let w_after = &nets.params.get("actor.w0").data;
        let max_delta = w_before
            .iter()
            .zip(w_after)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_delta < 1e-12, "actor moved by {max_delta}");
        assert_eq!(&ls_before, &nets.params.get("actor.log_std").data);
    }

    #[test]
    fn bandit_mean_action_converges_to_zero() {
        // 1-step env with reward -|a|: the optimum is action 0
        let mut nets = PolicyNets::with_dims(1, 3, &[16], -0.5, false, 11);
        let cfg = PolicyTrainConfig {
            epochs: 4,
            minibatches: 2,
            lr: 1e-3,
            entropy_coef: 0.0,
            clip: 0.2,
            ..PolicyTrainConfig::default()
        };
        let mut rng = rng_from_seed(4);
        let obs = vec![1.0, 0.0, -1.0];
        for _ in 0..200 {
            let n = 64;
            let mut buf = RolloutBuffer::new(n, 1, 3);
            for i in 0..n {
                buf.obs[i * 3..(i + 1) * 3].copy_from_slice(&obs);
                let (a, logp, v) = nets.act(&obs, true, &mut rng);
                buf.actions[i * NUM_ACTIONS..(i + 1) * NUM_ACTIONS].copy_from_slice(&a);
                buf.log_probs[i] = logp;
                buf.values[i] = v;
                buf.rewards[i] = -a.iter().map(|x| x.abs()).sum::<f64>();
                buf.terminated[i] = true;
            }
            buf.compute_gae(&vec![0.0; n], 0.99, 0.95);
            ppo_update(&mut nets, &buf, &cfg, &mut rng).unwrap();
        }
        let mu = forward_mlp_plain(&nets.params, "actor", &nets.actor, &obs, 1);
        let mean_abs = mu.iter().map(|m| m.abs()).sum::<f64>() / NUM_ACTIONS as f64;
        assert!(mean_abs < 0.08, "mean |action| {mean_abs}");
    }

    #[test]
    fn value_loss_decreases_over_epochs_on_fixed_buffer() {
        let mut nets = tiny_nets(13);
        let cfg = PolicyTrainConfig {
            epochs: 4,
            minibatches: 2,
            entropy_coef: 0.0,
            ..PolicyTrainConfig::default()
        };
        let n = 64;
        let mut buf = RolloutBuffer::new(n, 1, nets.obs_dim);
        let mut rng = rng_from_seed(6);
        for i in 0..n {
            let obs: Vec<f64> = (0..nets.obs_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            buf.obs[i * nets.obs_dim..(i + 1) * nets.obs_dim].copy_from_slice(&obs);
            let (a, logp, v) = nets.act(&obs, true, &mut rng);
            buf.actions[i * NUM_ACTIONS..(i + 1) * NUM_ACTIONS].copy_from_slice(&a);
            buf.log_probs[i] = logp;
            buf.values[i] = v;
            buf.advantages[i] = 0.0;
            buf.returns[i] = obs[0] * 2.0; // a learnable target
        }
        let stats = ppo_update(&mut nets, &buf, &cfg, &mut rng).unwrap();
        assert_eq!(stats.value_loss_per_epoch.len(), 4);
        assert!(
            stats.value_loss_per_epoch[3] < stats.value_loss_per_epoch[0],
            "value losses {:?}",
            stats.value_loss_per_epoch
        );
    }

    #[test]
    fn checkpoint_round_trip_preserves_behavior() {
        let nets = tiny_nets(17);
        let dir = std::env::temp_dir().join(format!("policy_ckpt_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("policy.bin");
        nets.save(&path).unwrap();
        let loaded = PolicyNets::load(&path).unwrap();
        assert_eq!(loaded.obs_dim, nets.obs_dim);
        let obs: Vec<f64> = (0..nets.obs_dim).map(|i| (i as f64) * 0.2 - 0.5).collect();
        let mut r1 = rng_from_seed(0);
        let mut r2 = rng_from_seed(0);
        let (a1, l1, v1) = nets.act(&obs, false, &mut r1);
        let (a2, l2, v2) = loaded.act(&obs, false, &mut r2);
        assert_eq!(a1, a2);
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(v1.to_bits(), v2.to_bits());
        std::fs::remove_dir_all(&dir).ok();
    }

}
