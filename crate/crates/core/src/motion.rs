//! Motion clips, their JSON file formats, dataset chunking and the synthetic
//! human-motion generator that stands in for a mocap corpus.

use crate::kinematics::{SkeletonGraph, NUM_UPPER_JOINTS};
use crate::util::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Upper-body joint names in goal-vector order.
pub const UPPER_JOINT_NAMES: [&str; NUM_UPPER_JOINTS] = [
    "waist_yaw",
    "l_shoulder_pitch",
    "l_shoulder_roll",
    "l_shoulder_yaw",
    "l_elbow",
    "l_wrist_yaw",
    "l_wrist_pitch",
    "l_wrist_roll",
    "r_shoulder_pitch",
    "r_shoulder_roll",
    "r_shoulder_yaw",
    "r_elbow",
    "r_wrist_yaw",
    "r_wrist_pitch",
    "r_wrist_roll",
];

#[derive(Debug, thiserror::Error)]
pub enum MotionError {
    #[error("motion file: {0}")]
    Format(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One frame of human key-node motion.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct HumanFrame {
    pub node_positions: Vec<Vec3>,
    /// Left and right wrist orientation, row-major 3x3.
    pub wrist_rotations: [[[f64; 3]; 3]; 2],
}

/// Human key-node motion: frame rate, node names, per-frame positions and
/// wrist rotations.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct HumanMotionClip {
    pub frame_rate: f64,
    pub node_names: Vec<String>,
    pub frames: Vec<HumanFrame>,
}

/// Robot upper-body motion: frame rate, 15 joint names, per-frame angles.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RobotMotionClip {
    pub frame_rate: f64,
    pub joint_names: Vec<String>,
    pub frames: Vec<Vec<f64>>,
}

impl RobotMotionClip {
    pub fn new(frame_rate: f64, frames: Vec<Vec<f64>>) -> Self {
        RobotMotionClip {
            frame_rate,
            joint_names: UPPER_JOINT_NAMES.iter().map(|s| s.to_string()).collect(),
            frames,
        }
    }

    pub fn frame(&self, i: usize) -> [f64; NUM_UPPER_JOINTS] {
        let mut out = [0.0; NUM_UPPER_JOINTS];
        out.copy_from_slice(&self.frames[i]);
        out
    }

    pub fn validate(&self) -> Result<(), MotionError> {
        if self.joint_names.len() != NUM_UPPER_JOINTS {
            return Err(MotionError::Format(format!(
                "expected {} joint names, got {}",
                NUM_UPPER_JOINTS,
                self.joint_names.len()
            )));
        }
        for (i, f) in self.frames.iter().enumerate() {
            if f.len() != NUM_UPPER_JOINTS {
                return Err(MotionError::Format(format!("frame {i} has {} angles", f.len())));
            }
        }
        Ok(())
    }
}

impl HumanMotionClip {
    pub fn validate(&self) -> Result<(), MotionError> {
        let n = self.node_names.len();
        for (i, f) in self.frames.iter().enumerate() {
            if f.node_positions.len() != n {
                return Err(MotionError::Format(format!(
                    "frame {i} has {} nodes, names list {}",
                    f.node_positions.len(),
                    n
                )));
            }
            for r in &f.wrist_rotations {
                if !rotation_is_orthonormal(r, 1e-6) {
                    return Err(MotionError::Format(format!(
                        "frame {i} wrist rotation not orthonormal"
                    )));
                }
            }
        }
        Ok(())
    }
}

pub fn rotation_is_orthonormal(r: &[[f64; 3]; 3], tol: f64) -> bool {
    let rt = m_transpose(r);
    let prod = m_mul(r, &rt);
    for i in 0..3 {
        for j in 0..3 {
            let expect = if i == j { 1.0 } else { 0.0 };
            if (prod[i][j] - expect).abs() > tol {
                return false;
            }
        }
    }
    true
}

/// Either side of the retargeting map.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MotionClip {
    Human(HumanMotionClip),
    Robot(RobotMotionClip),
}

impl MotionClip {
    pub fn num_frames(&self) -> usize {
        match self {
            MotionClip::Human(c) => c.frames.len(),
            MotionClip::Robot(c) => c.frames.len(),
        }
    }

    fn window(&self, start: usize, len: usize) -> MotionClip {
        match self {
            MotionClip::Human(c) => MotionClip::Human(HumanMotionClip {
                frame_rate: c.frame_rate,
                node_names: c.node_names.clone(),
                frames: c.frames[start..start + len].to_vec(),
            }),
            MotionClip::Robot(c) => MotionClip::Robot(RobotMotionClip {
                frame_rate: c.frame_rate,
                joint_names: c.joint_names.clone(),
                frames: c.frames[start..start + len].to_vec(),
            }),
        }
    }
}

/// Split clips into consecutive non-overlapping windows of exactly `length`
/// frames; the remainder is dropped and clips shorter than `length` are
/// skipped with a warning on stderr.
pub fn chunk_dataset(clips: &[MotionClip], length: usize) -> Vec<MotionClip> {
    assert!(length >= 2, "chunk length must be >= 2");
    let mut out = Vec::new();
    for (i, clip) in clips.iter().enumerate() {
        let n = clip.num_frames();
        if n < length {
            eprintln!("warning: clip {i} has {n} < {length} frames, skipped");
            continue;
        }
        for w in 0..n / length {
            out.push(clip.window(w * length, length));
        }
    }
    out
}

/// Concatenate robot chunks for replay, reconnecting boundaries with a
/// `blend`-frame linear blend into each next chunk.
pub fn concat_with_blend(chunks: &[RobotMotionClip], blend: usize) -> RobotMotionClip {
    assert!(!chunks.is_empty());
    let mut frames: Vec<Vec<f64>> = chunks[0].frames.clone();
    for chunk in &chunks[1..] {
        let last = frames.last().expect("non-empty").clone();
        for (k, f) in chunk.frames.iter().enumerate() {
            if k < blend {
                let w = (k + 1) as f64 / (blend + 1) as f64;
                frames.push(
                    last.iter().zip(f).map(|(a, b)| a * (1.0 - w) + b * w).collect(),
                );
            } else {
                frames.push(f.clone());
            }
        }
    }
    RobotMotionClip {
        frame_rate: chunks[0].frame_rate,
        joint_names: chunks[0].joint_names.clone(),
        frames,
    }
}

/// Frame accessor that loops a chunk forever, blending the wrap-around over
/// `blend` frames so replay stays continuous.
pub fn looped_frame(clip: &RobotMotionClip, blend: usize, t: usize) -> [f64; NUM_UPPER_JOINTS] {
    let n = clip.frames.len();
    let i = t % n;
    let mut out = clip.frame(i);
    if t >= n && i < blend {
        let last = clip.frame(n - 1);
        let w = (i + 1) as f64 / (blend + 1) as f64;
        for j in 0..NUM_UPPER_JOINTS {
            out[j] = last[j] * (1.0 - w) + out[j] * w;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Human skeleton + synthetic motion
// ---------------------------------------------------------------------------

const HUMAN_SHOULDER_W: f64 = 0.20;
const HUMAN_UPPER_ARM: f64 = 0.30;
const HUMAN_FOREARM: f64 = 0.27;
const HUMAN_WAIST_TO_TORSO: f64 = 0.30;
const HUMAN_TORSO_TO_SHOULDER_Z: f64 = 0.15;

/// Rest key-node positions of the synthetic human (arms hanging).
pub fn human_rest_positions() -> [Vec3; 8] {
    let waist = [0.0, 0.0, 1.00];
    let torso = [0.0, 0.0, 1.00 + HUMAN_WAIST_TO_TORSO];
    let lsh = [0.0, HUMAN_SHOULDER_W, torso[2] + HUMAN_TORSO_TO_SHOULDER_Z];
    let rsh = [0.0, -HUMAN_SHOULDER_W, torso[2] + HUMAN_TORSO_TO_SHOULDER_Z];
    let lel = [lsh[0], lsh[1], lsh[2] - HUMAN_UPPER_ARM];
    let rel = [rsh[0], rsh[1], rsh[2] - HUMAN_UPPER_ARM];
    let lwr = [lel[0], lel[1], lel[2] - HUMAN_FOREARM];
    let rwr = [rel[0], rel[1], rel[2] - HUMAN_FOREARM];
    [waist, torso, lsh, lel, lwr, rsh, rel, rwr]
}

pub fn human_skeleton() -> SkeletonGraph {
    let rest = human_rest_positions();
    SkeletonGraph::from_rest_positions(
        crate::kinematics::KEY_NODE_NAMES.iter().map(|s| s.to_string()).collect(),
        crate::kinematics::KEY_NODE_EDGES.to_vec(),
        &rest,
    )
}

#[derive(Clone, Copy)]
struct Sinusoid {
    center: f64,
    amp: f64,
    freq: f64,
    phase: f64,
}

impl Sinusoid {
    fn sample(rng: &mut ChaCha8Rng, center: [f64; 2], amp: [f64; 2]) -> Self {
        Sinusoid {
            center: rng.gen_range(center[0]..center[1]),
            amp: rng.gen_range(amp[0]..amp[1]),
            freq: rng.gen_range(0.10..0.45),
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
        }
    }

    fn at(&self, t: f64) -> f64 {
        self.center + self.amp * (std::f64::consts::TAU * self.freq * t + self.phase).sin()
    }
}

struct ArmTraj {
    pitch: Sinusoid,
    roll: Sinusoid,
    yaw: Sinusoid,
    elbow: Sinusoid,
}

/// Smooth sum-of-sinusoids reach/gesture trajectories for the human key
/// nodes, produced by driving a human arm chain in joint space so bone
/// lengths stay exact.
pub fn generate_human_clip(seed: u64, frames: usize, frame_rate: f64) -> HumanMotionClip {
    let mut rng = rng_from_seed(seed);
    let waist_sway = Sinusoid::sample(&mut rng, [-0.01, 0.01], [0.0, 0.02]);
    let waist_yaw = Sinusoid::sample(&mut rng, [-0.05, 0.05], [0.0, 0.20]);
    let mut arms = Vec::new();
    for side in 0..2 {
        let sign = if side == 0 { 1.0 } else { -1.0 };
        arms.push(ArmTraj {
            pitch: Sinusoid::sample(&mut rng, [-0.5, 0.5], [0.15, 0.85]),
            // roll keeps elbows away from the torso on each side
            roll: Sinusoid::sample(
                &mut rng,
                [0.05 * sign - 0.05, 0.05 * sign + 0.05],
                [0.05, 0.45],
            ),
            yaw: Sinusoid::sample(&mut rng, [-0.3, 0.3], [0.0, 0.5]),
            elbow: Sinusoid::sample(&mut rng, [0.4, 0.9], [0.1, 0.7]),
        });
    }
    let mut out_frames = Vec::with_capacity(frames);
    for f in 0..frames {
        let t = f as f64 / frame_rate;
        let sway = waist_sway.at(t);
        let waist = [sway, 0.0, 1.00];
        let yaw = waist_yaw.at(t);
        let yaw_rot = axis_angle_mat([0.0, 0.0, 1.0], yaw);
        let torso = v_add(waist, [0.0, 0.0, HUMAN_WAIST_TO_TORSO]);
        let mut nodes = [[0.0; 3]; 8];
        nodes[0] = waist;
        nodes[1] = torso;
        let mut wrist_rots = [[[0.0; 3]; 3]; 2];
        for (side, arm) in arms.iter().enumerate() {
            let sign = if side == 0 { 1.0 } else { -1.0 };
            let sh_local = [0.0, sign * HUMAN_SHOULDER_W, HUMAN_TORSO_TO_SHOULDER_Z];
            let shoulder = v_add(torso, m_vec(&yaw_rot, sh_local));
            // shoulder rotation: pitch about y, roll about x, yaw about z
            let rp = axis_angle_mat([0.0, 1.0, 0.0], arm.pitch.at(t));
            let rr = axis_angle_mat([1.0, 0.0, 0.0], sign * arm.roll.at(t));
            let ry = axis_angle_mat([0.0, 0.0, 1.0], arm.yaw.at(t));
            let r_sh = m_mul(&yaw_rot, &m_mul(&rp, &m_mul(&rr, &ry)));
            let elbow = v_add(shoulder, m_vec(&r_sh, [0.0, 0.0, -HUMAN_UPPER_ARM]));
            let r_el = m_mul(&r_sh, &axis_angle_mat([0.0, 1.0, 0.0], arm.elbow.at(t)));
            let wrist = v_add(elbow, m_vec(&r_el, [0.0, 0.0, -HUMAN_FOREARM]));
            let (sh_i, el_i, wr_i) = if side == 0 { (2, 3, 4) } else { (5, 6, 7) };
            nodes[sh_i] = shoulder;
            nodes[el_i] = elbow;
            nodes[wr_i] = wrist;
            wrist_rots[side] = r_el;
        }
        out_frames.push(HumanFrame { node_positions: nodes.to_vec(), wrist_rotations: wrist_rots });
    }
    HumanMotionClip {
        frame_rate,
        node_names: crate::kinematics::KEY_NODE_NAMES.iter().map(|s| s.to_string()).collect(),
        frames: out_frames,
    }
}

// ---------------------------------------------------------------------------
// File IO
// ---------------------------------------------------------------------------

pub fn save_clips(path: &std::path::Path, clips: &[MotionClip]) -> Result<(), MotionError> {
    let text = serde_json::to_string(clips)?;
    atomic_write(path, text.as_bytes())?;
    Ok(())
}

pub fn load_clips(path: &std::path::Path) -> Result<Vec<MotionClip>, MotionError> {
    let text = std::fs::read_to_string(path)?;
    let clips: Vec<MotionClip> = serde_json::from_str(&text)?;
    for c in &clips {
        match c {
            MotionClip::Human(h) => h.validate()?,
            MotionClip::Robot(r) => r.validate()?,
        }
    }
    Ok(clips)
}

pub fn save_robot_clips(
    path: &std::path::Path,
    clips: &[RobotMotionClip],
) -> Result<(), MotionError> {
    let wrapped: Vec<MotionClip> = clips.iter().map(|c| MotionClip::Robot(c.clone())).collect();
    save_clips(path, &wrapped)
}

pub fn load_robot_clips(path: &std::path::Path) -> Result<Vec<RobotMotionClip>, MotionError> {
    load_clips(path)?
        .into_iter()
        .map(|c| match c {
            MotionClip::Robot(r) => Ok(r),
            MotionClip::Human(_) => Err(MotionError::Format("expected robot clips".into())),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn robot_clip(frames: usize) -> MotionClip {
        MotionClip::Robot(RobotMotionClip::new(
            50.0,
            (0..frames).map(|i| vec![i as f64 * 0.01; NUM_UPPER_JOINTS]).collect(),
        ))
    }

    #[test]
    fn chunking_floor_division() {
        let chunks = chunk_dataset(&[robot_clip(125)], 60);
        assert_eq!(chunks.len(), 2);
        let chunks = chunk_dataset(&[robot_clip(60)], 60);
        assert_eq!(chunks.len(), 1);
        assert_eq!(chunks[0].num_frames(), 60);
        // shorter than length: skipped
        let chunks = chunk_dataset(&[robot_clip(30)], 60);
        assert!(chunks.is_empty());
    }

    #[test]
    fn chunk_of_exact_length_is_identity() {
        let clip = robot_clip(60);
        let chunks = chunk_dataset(&[clip.clone()], 60);
        assert_eq!(chunks[0], clip);
    }

    #[test]
    fn blended_concat_is_continuous() {
        let a = RobotMotionClip::new(50.0, vec![vec![0.0; NUM_UPPER_JOINTS]; 20]);
        let b = RobotMotionClip::new(50.0, vec![vec![1.0; NUM_UPPER_JOINTS]; 20]);
        let joined = concat_with_blend(&[a, b], 5);
        assert_eq!(joined.frames.len(), 40);
        let mut max_jump: f64 = 0.0;
        for w in joined.frames.windows(2) {
            for j in 0..NUM_UPPER_JOINTS {
                max_jump = max_jump.max((w[1][j] - w[0][j]).abs());
            }
        }
        // a raw concat would jump 1.0; the 5-frame blend bounds steps by 1/6
        assert!(max_jump <= 1.0 / 6.0 + 1e-12, "max jump {max_jump}");
    }

    #[test]
    fn looped_replay_blends_the_wrap() {
        let clip = RobotMotionClip::new(
            50.0,
            (0..10).map(|i| vec![i as f64; NUM_UPPER_JOINTS]).collect(),
        );
        let first_pass = looped_frame(&clip, 5, 0);
        assert_eq!(first_pass[0], 0.0);
        let wrapped = looped_frame(&clip, 5, 10);
        // blends from the last frame (9.0) toward frame 0 (0.0)
        assert!(wrapped[0] > 5.0 && wrapped[0] < 9.0, "{}", wrapped[0]);
    }

    #[test]
    fn generated_human_motion_is_valid_and_deterministic() {
        let a = generate_human_clip(7, 120, 50.0);
        let b = generate_human_clip(7, 120, 50.0);
        assert_eq!(a, b);
        a.validate().unwrap();
        // bone lengths stay exact under the joint-space generator
        let skel = human_skeleton();
        for f in &a.frames {
            for (e, &(i, j)) in skel.edges.iter().enumerate() {
                let d = v_norm(v_sub(f.node_positions[j], f.node_positions[i]));
                assert!((d - skel.bone_lengths[e]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn clip_files_round_trip() {
        let dir = std::env::temp_dir().join(format!("motion_rt_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("clips.json");
        let clips = vec![MotionClip::Human(generate_human_clip(3, 30, 50.0)), robot_clip(40)];
        save_clips(&path, &clips).unwrap();
        let back = load_clips(&path).unwrap();
        assert_eq!(clips, back);
        std::fs::remove_dir_all(&dir).ok();
    }
}
