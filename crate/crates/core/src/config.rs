//! Run configuration: JSON files with strict key checking, dotted-path
//! overrides and per-stage sections. Every run writes its resolved config
//! next to its outputs.

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One toggle per Table-style randomization row.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields, default)]
pub struct DrToggles {
    pub friction: bool,
    pub base_mass: bool,
    pub hand_mass: bool,
    pub base_com: bool,
    pub link_inertia: bool,
    pub link_mass: bool,
    pub p_gain: bool,
    pub d_gain: bool,
    pub motor_torque: bool,
    pub motor_damping: bool,
    pub motor_delay: bool,
    pub push: bool,
    pub hang: bool,
    pub init_joint: bool,
    pub action_scale: bool,
}

impl DrToggles {
    pub fn all_on() -> Self {
        DrToggles {
            friction: true,
            base_mass: true,
            hand_mass: true,
            base_com: true,
            link_inertia: true,
            link_mass: true,
            p_gain: true,
            d_gain: true,
            motor_torque: true,
            motor_damping: true,
            motor_delay: true,
            push: true,
            hang: true,
            init_joint: true,
            action_scale: true,
        }
    }

    pub fn all_off() -> Self {
        DrToggles::default()
    }
}

impl Default for DrToggles {
    fn default() -> Self {
        DrToggles {
            friction: false,
            base_mass: false,
            hand_mass: false,
            base_com: false,
            link_inertia: false,
            link_mass: false,
            p_gain: false,
            d_gain: false,
            motor_torque: false,
            motor_damping: false,
            motor_delay: false,
            push: false,
            hang: false,
            init_joint: false,
            action_scale: false,
        }
    }
}

/// Simulator parameters: 1 kHz physics under 50 Hz control.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub substep_dt: f64,
    pub substeps_per_control: usize,
    pub gravity: f64,
    pub gravity_enabled: bool,
    pub contacts_enabled: bool,
    pub contact_stiffness: f64,
    pub contact_damping: f64,
    pub friction_vel_eps: f64,
    pub self_collision_stiffness: f64,
    pub kp_legs: f64,
    pub kp_upper: f64,
    pub kd_legs: f64,
    pub kd_upper: f64,
    pub torque_limit_legs: f64,
    pub torque_limit_upper: f64,
    pub joint_inertia_legs: f64,
    pub joint_inertia_upper: f64,
    /// Policy action is an offset from the default leg pose, scaled by this.
    pub action_offset_scale: f64,
    pub push_interval_s: f64,
    pub push_lin_vel: f64,
    pub push_yaw_vel: f64,
    pub hang_height: f64,
    pub hang_prob: f64,
    pub episode_len_steps: usize,
    pub dr: DrToggles,
    /// Extra per-hand payload sampled uniformly at reset (evaluation loads).
    pub hand_load_range: Option<[f64; 2]>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            substep_dt: 0.001,
            substeps_per_control: 20,
            gravity: 9.81,
            gravity_enabled: true,
            contacts_enabled: true,
            contact_stiffness: 3.0e4,
            contact_damping: 300.0,
            friction_vel_eps: 0.01,
            self_collision_stiffness: 1.0e4,
            kp_legs: 100.0,
            kp_upper: 60.0,
            kd_legs: 5.0,
            kd_upper: 3.0,
            torque_limit_legs: 150.0,
            torque_limit_upper: 60.0,
            joint_inertia_legs: 0.25,
            joint_inertia_upper: 0.15,
            action_offset_scale: 0.25,
            push_interval_s: 5.0,
            push_lin_vel: 0.5,
            push_yaw_vel: 0.4,
            hang_height: 0.1,
            hang_prob: 0.2,
            episode_len_steps: 500,
            dr: DrToggles::all_off(),
            hand_load_range: None,
        }
    }
}

impl SimConfig {
    pub fn control_dt(&self) -> f64 {
        self.substep_dt * self.substeps_per_control as f64
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenDataConfig {
    pub human_clips: usize,
    pub human_frames: usize,
    pub frame_rate: f64,
    pub stress_clips: usize,
    pub stress_frames: usize,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        GenDataConfig {
            human_clips: 48,
            human_frames: 240,
            frame_rate: 50.0,
            stress_clips: 50,
            stress_frames: 200,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetargetTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub codebook_size: usize,
    pub codebook_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub transform_hidden: usize,
    /// Codebook entries unused for this many batches are re-seeded.
    pub dead_code_refresh: usize,
    pub chunk_len_rl: usize,
    pub chunk_len_emp: usize,
}

impl Default for RetargetTrainConfig {
    fn default() -> Self {
        RetargetTrainConfig {
            epochs: 5,
            batch_size: 16,
            lr: 1e-3,
            codebook_size: 2048,
            codebook_dim: 64,
            encoder_hidden: vec![16, 32, 64],
            decoder_hidden: vec![66, 32, 16],
            transform_hidden: 64,
            dead_code_refresh: 200,
            chunk_len_rl: 60,
            chunk_len_emp: 200,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyTrainConfig {
    pub envs: usize,
    pub horizon: usize,
    pub updates: usize,
    pub lr: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub hidden: Vec<usize>,
    pub log_std_init: f64,
    pub kl_stop: f64,
    /// Adds base linear velocity and height to the observation and trains
    /// with randomization off (the privileged baseline).
    pub privileged: bool,
    pub obs_window: usize,
    pub checkpoint_every: usize,
    /// Abort when the mean episode length collapses below this after warmup.
    pub divergence_min_ep_len: usize,
}

impl Default for PolicyTrainConfig {
    fn default() -> Self {
        PolicyTrainConfig {
            envs: 16,
            horizon: 192,
            updates: 160,
            lr: 1e-3,
            gamma: 0.99,
            gae_lambda: 0.95,
            clip: 0.2,
            entropy_coef: 0.005,
            value_coef: 0.5,
            epochs: 4,
            minibatches: 4,
            hidden: vec![128, 128],
            log_std_init: -1.0,
            kl_stop: 0.5,
            privileged: false,
            obs_window: 15,
            checkpoint_every: 50,
            divergence_min_ep_len: 20,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WmTrainConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub episodes: usize,
    pub episode_len: usize,
    pub holdout_frac: f64,
}

impl Default for WmTrainConfig {
    fn default() -> Self {
        WmTrainConfig {
            hidden: vec![1024, 512],
            epochs: 4,
            batch_size: 256,
            lr: 1e-3,
            episodes: 200,
            episode_len: 200,
            holdout_frac: 0.1,
        }
    }
}

/// Loss weights for the motion-prior objective.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EmpLossWeights {
    pub rec: f64,
    pub ori: f64,
    pub col: f64,
    pub cen: f64,
    pub smo: f64,
    pub reg: f64,
}

impl Default for EmpLossWeights {
    fn default() -> Self {
        EmpLossWeights { rec: 20.0, ori: 10.0, col: 1.0, cen: 10.0, smo: 100.0, reg: 1.0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmpTrainConfig {
    pub encoder_hidden: Vec<usize>,
    pub fusion_hidden: Vec<usize>,
    pub latent: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_motions: usize,
    pub weights: EmpLossWeights,
    /// Evaluate the orientation/collision losses exactly as printed instead
    /// of the sign-corrected forms.
    pub paper_literal_losses: bool,
    pub grad_clip: f64,
    pub gate_threshold: f64,
}

impl Default for EmpTrainConfig {
    fn default() -> Self {
        EmpTrainConfig {
            encoder_hidden: vec![1024, 1024],
            fusion_hidden: vec![2048, 2048],
            latent: 64,
            lr: 1e-3,
            epochs: 2,
            batch_motions: 8,
            weights: EmpLossWeights::default(),
            paper_literal_losses: false,
            grad_clip: 100.0,
            gate_threshold: 0.04,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episodes_per_clip: usize,
    pub episode_len: usize,
    pub seeds: Vec<u64>,
    pub hand_load: Option<[f64; 2]>,
    pub push_enabled: bool,
    pub baselines: Vec<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            episodes_per_clip: 1,
            episode_len: 250,
            seeds: vec![0, 1, 2],
            hand_load: Some([0.8, 1.2]),
            push_enabled: false,
            baselines: vec![
                "privileged".into(),
                "decoupled".into(),
                "decoupled_emp".into(),
                "emp_when_danger".into(),
            ],
        }
    }
}

/// Top-level run configuration; stage sections are optional and default.
#[derive(Clone, Debug, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: Option<String>,
    pub robot_model: Option<String>,
    pub sim: SimConfig,
    pub gen_data: GenDataConfig,
    pub retarget: RetargetTrainConfig,
    pub rl: PolicyTrainConfig,
    pub wm: WmTrainConfig,
    pub emp: EmpTrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Stable fingerprint of the resolved config.
    pub fn fingerprint(&self) -> u64 {
        crate::util::fnv1a(self.to_json_pretty().as_bytes())
    }
}

/// Apply a dotted-path override (`sim.push_lin_vel=0.8`) onto a JSON value.
pub fn apply_override(
    root: &mut serde_json::Value,
    path: &str,
    raw: &str,
) -> Result<(), ConfigError> {
    let mut cursor = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let map = cursor.as_object_mut().ok_or_else(|| {
            ConfigError::Invalid(format!("override path '{path}' hits a non-object"))
        })?;
        if i + 1 == parts.len() {
            let value: serde_json::Value = serde_json::from_str(raw)
                .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            map.insert((*part).to_string(), value);
            return Ok(());
        }
        cursor = map
            .entry((*part).to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected_with_field_name() {
        let err = RunConfig::from_json(r#"{"seed": 3, "not_a_field": 1}"#).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("not_a_field"), "{msg}");
    }

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let text = cfg.to_json_pretty();
        let back = RunConfig::from_json(&text).unwrap();
        assert_eq!(cfg.fingerprint(), back.fingerprint());
        assert_eq!(back.emp.weights, EmpLossWeights::default());
        assert_eq!(back.emp.weights.rec, 20.0);
        assert_eq!(back.emp.weights.smo, 100.0);
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let mut v: serde_json::Value = serde_json::from_str("{}").unwrap();
        apply_override(&mut v, "sim.push_lin_vel", "0.8").unwrap();
        apply_override(&mut v, "seed", "42").unwrap();
        let cfg: RunConfig = serde_json::from_value(v).unwrap();
        assert_eq!(cfg.sim.push_lin_vel, 0.8);
        assert_eq!(cfg.seed, 42);
    }
}
