//! Single command-line entry point for the motion-imitation pipeline.
//!
//! Stages share one working directory (`--out`): each writes its artifacts
//! atomically, alongside its resolved config and the build fingerprint.
//! Exit codes: 2 = missing dependency artifact, 3 = invalid config.

use clap::{Parser, Subcommand};
use stand_imitate_core::config::{apply_override, RunConfig};
use stand_imitate_core::emp::{train_emp, EmpNets};
use stand_imitate_core::eval::{
    baseline_table_csv, baseline_table_markdown, build_stress_suite, joint_trace_svg, make_env,
    run_baseline_matrix, run_episode, BaselineInputs, TrajectoryLog, UpperSource,
};
use stand_imitate_core::kinematics::RobotModel;
use stand_imitate_core::motion::{
    chunk_dataset, generate_human_clip, load_clips, load_robot_clips, save_clips,
    save_robot_clips, MotionClip, RobotMotionClip,
};
use stand_imitate_core::policy::{train_policy, PolicyNets, TrainLogRow};
use stand_imitate_core::retarget::{train_retargeter, Retargeter};
use stand_imitate_core::sim::{state_frame, ObsBuilder, SimEnv, FRAME_WIDTH, NUM_ACTIONS};
use stand_imitate_core::util::{atomic_write, fmt_f64, rng_from_seed, split_seed};
use stand_imitate_core::world_model::{train_world_model, Transition, WorldModel};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

const EXIT_MISSING_DEP: i32 = 2;
const EXIT_BAD_CONFIG: i32 = 3;

#[derive(Parser)]
#[command(name = "stand-imitate", version, about = "Humanoid upper-body imitation pipeline")]
struct Cli {
    #[command(subcommand)]
    stage: Stage,
    /// JSON run configuration (defaults apply when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config's seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Dotted-path config override, e.g. `rl.updates=40` (repeatable).
    #[arg(long = "override", global = true)]
    overrides: Vec<String>,
    /// Working directory for inputs and outputs.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Stage {
    /// Generate the synthetic human motion corpus and the stress suite.
    GenData,
    /// Train the human-to-robot retargeting network.
    RetargetTrain,
    /// Retarget a human motion file to robot joint targets.
    RetargetRun {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train the lower-body balance policy.
    RlTrain,
    /// Collect rollouts and fit the one-step world model.
    WmTrain,
    /// Train the executable motion prior.
    EmpTrain,
    /// Run the baseline matrix over the stress suite.
    Eval,
    /// Plot upper-joint trajectories from an episode CSV.
    Plot {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Upper joint index (0..15) to plot.
        #[arg(long, default_value_t = 1)]
        joint: usize,
    },
}

struct StageError {
    code: i32,
    message: String,
}

impl StageError {
    fn missing(path: &Path) -> Self {
        StageError {
            code: EXIT_MISSING_DEP,
            message: format!("missing dependency artifact: {}", path.display()),
        }
    }

    fn config(msg: String) -> Self {
        StageError { code: EXIT_BAD_CONFIG, message: format!("invalid config: {msg}") }
    }

    fn other(msg: String) -> Self {
        StageError { code: 1, message: msg }
    }
}

/// Writes to stdout and the stage log file.
struct Logger {
    file: std::fs::File,
}

impl Logger {
    fn new(out: &Path, stage: &str) -> std::io::Result<Self> {
        std::fs::create_dir_all(out)?;
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(out.join(format!("{stage}.log")))?;
        Ok(Logger { file })
    }

    fn log(&mut self, msg: &str) {
        println!("{msg}");
        let _ = writeln!(self.file, "{msg}");
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, StageError> {
    let mut value: serde_json::Value = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| StageError::config(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| StageError::config(e.to_string()))?
        }
        None => serde_json::json!({}),
    };
    for ov in &cli.overrides {
        let (path, raw) = ov
            .split_once('=')
            .ok_or_else(|| StageError::config(format!("override '{ov}' needs key=value")))?;
        apply_override(&mut value, path, raw).map_err(|e| StageError::config(e.to_string()))?;
    }
    let text = serde_json::to_string(&value).expect("json");
    let mut cfg = RunConfig::from_json(&text).map_err(|e| StageError::config(e.to_string()))?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn stage_name(stage: &Stage) -> &'static str {
    match stage {
        Stage::GenData => "gen-data",
        Stage::RetargetTrain => "retarget-train",
        Stage::RetargetRun { .. } => "retarget-run",
        Stage::RlTrain => "rl-train",
        Stage::WmTrain => "wm-train",
        Stage::EmpTrain => "emp-train",
        Stage::Eval => "eval",
        Stage::Plot { .. } => "plot",
    }
}

fn write_provenance(out: &Path, stage: &str, cfg: &RunConfig) -> Result<(), StageError> {
    let resolved = cfg.to_json_pretty();
    atomic_write(&out.join(format!("resolved_config_{stage}.json")), resolved.as_bytes())
        .map_err(|e| StageError::other(e.to_string()))?;
    let info = format!(
        "build: {} v{}\nconfig_fingerprint: {:016x}\n",
        env!("GIT_DESCRIBE"),
        env!("CARGO_PKG_VERSION"),
        cfg.fingerprint()
    );
    atomic_write(&out.join(format!("build_info_{stage}.txt")), info.as_bytes())
        .map_err(|e| StageError::other(e.to_string()))?;
    Ok(())
}

fn load_model(cfg: &RunConfig) -> Result<Arc<RobotModel>, StageError> {
    match &cfg.robot_model {
        Some(path) => {
            let p = Path::new(path);
            if !p.exists() {
                return Err(StageError::missing(p));
            }
            RobotModel::load(p)
                .map(Arc::new)
                .map_err(|e| StageError::config(e.to_string()))
        }
        None => Ok(Arc::new(RobotModel::default_humanoid())),
    }
}

fn require(path: PathBuf) -> Result<PathBuf, StageError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(StageError::missing(&path))
    }
}

fn main() {
    let cli = Cli::parse();
    let stage = stage_name(&cli.stage);
    if let Ok(threads) = std::env::var("STAND_IMITATE_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
        }
    }
    match run(&cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("{stage}: {}", e.message);
            std::process::exit(e.code);
        }
    }
}

fn run(cli: &Cli) -> Result<(), StageError> {
    let cfg = load_config(cli)?;
    let out = cli.out.clone();
    std::fs::create_dir_all(&out).map_err(|e| StageError::other(e.to_string()))?;
    let stage = stage_name(&cli.stage);
    let mut logger = Logger::new(&out, stage).map_err(|e| StageError::other(e.to_string()))?;
    write_provenance(&out, stage, &cfg)?;
    let model = load_model(&cfg)?;

    match &cli.stage {
        Stage::GenData => {
            let g = &cfg.gen_data;
            logger.log(&format!(
                "generating {} human clips x {} frames and {} stress clips",
                g.human_clips, g.human_frames, g.stress_clips
            ));
            let clips: Vec<MotionClip> = (0..g.human_clips)
                .map(|i| {
                    MotionClip::Human(generate_human_clip(
                        split_seed(cfg.seed, i as u64),
                        g.human_frames,
                        g.frame_rate,
                    ))
                })
                .collect();
            save_clips(&out.join("human_motions.json"), &clips)
                .map_err(|e| StageError::other(e.to_string()))?;
            let suite =
                build_stress_suite(&model, g.stress_clips, g.stress_frames, split_seed(cfg.seed, 9999));
            let tiers: Vec<u8> = suite.iter().map(|s| s.tier).collect();
            save_robot_clips(
                &out.join("stress_suite.json"),
                &suite.into_iter().map(|s| s.clip).collect::<Vec<_>>(),
            )
            .map_err(|e| StageError::other(e.to_string()))?;
            atomic_write(
                &out.join("stress_tiers.json"),
                serde_json::to_string(&tiers).expect("json").as_bytes(),
            )
            .map_err(|e| StageError::other(e.to_string()))?;
            logger.log("wrote human_motions.json, stress_suite.json, stress_tiers.json");
        }
        Stage::RetargetTrain => {
            let human_path = require(out.join("human_motions.json"))?;
            let clips = load_clips(&human_path).map_err(|e| StageError::other(e.to_string()))?;
            let human: Vec<_> = clips
                .into_iter()
                .filter_map(|c| match c {
                    MotionClip::Human(h) => Some(h),
                    _ => None,
                })
                .collect();
            logger.log(&format!(
                "training retargeter on {} clips ({} epochs)",
                human.len(),
                cfg.retarget.epochs
            ));
            let (rt, report) = train_retargeter(&cfg.retarget, &human, &model, cfg.seed);
            rt.params
                .save(&out.join("retarget.bin"))
                .map_err(|e| StageError::other(e.to_string()))?;
            let mut csv = String::from("epoch,loss\n");
            for (i, l) in report.epoch_losses.iter().enumerate() {
                csv.push_str(&format!("{i},{}\n", fmt_f64(*l)));
            }
            atomic_write(&out.join("retarget_train_log.csv"), csv.as_bytes())
                .map_err(|e| StageError::other(e.to_string()))?;
            // retarget the corpus for the downstream RL / prior stages
            let robot: Vec<RobotMotionClip> =
                human.iter().map(|h| rt.retarget_clip(h, &model)).collect();
            save_robot_clips(&out.join("retargeted_motions.json"), &robot)
                .map_err(|e| StageError::other(e.to_string()))?;
            logger.log(&format!(
                "final epoch loss {:.4}; {} dead codes refreshed; wrote retarget.bin + retargeted_motions.json",
                report.epoch_losses.last().copied().unwrap_or(f64::NAN),
                report.refreshed_codes
            ));
        }
        Stage::RetargetRun { input, output } => {
            let ckpt_path = require(out.join("retarget.bin"))?;
            let input = require(input.clone())?;
            let rt = Retargeter {
                params: stand_imitate_core::nn::NetParams::load(&ckpt_path)
                    .map_err(|e| StageError::other(e.to_string()))?,
                human_graph: stand_imitate_core::motion::human_skeleton(),
                robot_graph: stand_imitate_core::kinematics::robot_skeleton_graph(&model),
                arch: cfg.retarget.clone(),
                last_used: vec![],
                batches_seen: 0,
            };
            let clips = load_clips(&input).map_err(|e| StageError::other(e.to_string()))?;
            let mut robot = Vec::new();
            for c in clips {
                if let MotionClip::Human(h) = c {
                    robot.push(rt.retarget_clip(&h, &model));
                }
            }
            save_robot_clips(output, &robot).map_err(|e| StageError::other(e.to_string()))?;
            logger.log(&format!("retargeted {} clips -> {}", robot.len(), output.display()));
        }
        Stage::RlTrain => {
            let motions_path = require(out.join("retargeted_motions.json"))?;
            let robot = load_robot_clips(&motions_path)
                .map_err(|e| StageError::other(e.to_string()))?;
            let wrapped: Vec<MotionClip> = robot.into_iter().map(MotionClip::Robot).collect();
            let chunks: Vec<RobotMotionClip> = chunk_dataset(&wrapped, cfg.retarget.chunk_len_rl)
                .into_iter()
                .filter_map(|c| match c {
                    MotionClip::Robot(r) => Some(r),
                    _ => None,
                })
                .collect();
            let mut sim_cfg = cfg.sim.clone();
            if cfg.rl.privileged {
                // the privileged baseline trains without randomization
                sim_cfg.dr = stand_imitate_core::config::DrToggles::all_off();
            }
            logger.log(&format!(
                "training {} policy: {} envs x {} steps x {} updates on {} chunks",
                if cfg.rl.privileged { "privileged" } else { "decoupled" },
                cfg.rl.envs,
                cfg.rl.horizon,
                cfg.rl.updates,
                chunks.len()
            ));
            let ckpt_name =
                if cfg.rl.privileged { "policy_privileged.bin" } else { "policy.bin" };
            let out_dir = out.clone();
            let outcome = train_policy(
                &cfg.rl,
                &sim_cfg,
                model.clone(),
                &chunks,
                cfg.seed,
                |update, nets, _| {
                    let _ = nets.save(&out_dir.join(format!("{ckpt_name}.u{update}")));
                },
            )
            .map_err(|e| StageError::other(e.to_string()))?;
            outcome
                .nets
                .save(&out.join(ckpt_name))
                .map_err(|e| StageError::other(e.to_string()))?;
            let mut csv = TrainLogRow::csv_header();
            csv.push('\n');
            for row in &outcome.log {
                csv.push_str(&row.to_csv());
                csv.push('\n');
            }
            atomic_write(&out.join("rl_train_log.csv"), csv.as_bytes())
                .map_err(|e| StageError::other(e.to_string()))?;
            let last = outcome.log.last();
            logger.log(&format!(
                "wrote {ckpt_name}; final mean reward {:.3}, SUC {:.2}",
                last.map(|l| l.mean_reward).unwrap_or(f64::NAN),
                last.map(|l| l.suc).unwrap_or(f64::NAN)
            ));
        }
        Stage::WmTrain => {
            let policy_path = require(out.join("policy.bin"))?;
            let motions_path = require(out.join("retargeted_motions.json"))?;
            let policy =
                PolicyNets::load(&policy_path).map_err(|e| StageError::other(e.to_string()))?;
            let robot = load_robot_clips(&motions_path)
                .map_err(|e| StageError::other(e.to_string()))?;
            let wrapped: Vec<MotionClip> = robot.into_iter().map(MotionClip::Robot).collect();
            let chunks: Vec<RobotMotionClip> = chunk_dataset(&wrapped, cfg.retarget.chunk_len_emp)
                .into_iter()
                .filter_map(|c| match c {
                    MotionClip::Robot(r) => Some(r),
                    _ => None,
                })
                .collect();
            logger.log(&format!(
                "collecting {} episodes x {} steps for the world model",
                cfg.wm.episodes, cfg.wm.episode_len
            ));
            let env = make_env(model.clone(), &cfg.sim);
            let data = collect_transitions(&env, &policy, &chunks, &cfg.wm, cfg.seed);
            logger.log(&format!("fitting on {} transitions", data.len()));
            let (wm, report) = train_world_model(&cfg.wm, &data, cfg.seed)
                .map_err(|e| StageError::other(e.to_string()))?;
            wm.save(&out.join("world_model.bin"))
                .map_err(|e| StageError::other(e.to_string()))?;
            atomic_write(
                &out.join("wm_report.json"),
                serde_json::json!({
                    "holdout_normalized_mse": report.holdout_mse,
                    "transitions": report.transitions,
                    "train_losses": report.train_losses,
                })
                .to_string()
                .as_bytes(),
            )
            .map_err(|e| StageError::other(e.to_string()))?;
            logger.log(&format!(
                "wrote world_model.bin; holdout normalized MSE {:.4}",
                report.holdout_mse
            ));
        }
        Stage::EmpTrain => {
            let policy_path = require(out.join("policy.bin"))?;
            let wm_path = require(out.join("world_model.bin"))?;
            let motions_path = require(out.join("retargeted_motions.json"))?;
            let policy =
                PolicyNets::load(&policy_path).map_err(|e| StageError::other(e.to_string()))?;
            let mut wm =
                WorldModel::load(&wm_path).map_err(|e| StageError::other(e.to_string()))?;
            let robot = load_robot_clips(&motions_path)
                .map_err(|e| StageError::other(e.to_string()))?;
            let wrapped: Vec<MotionClip> = robot.into_iter().map(MotionClip::Robot).collect();
            let chunks: Vec<RobotMotionClip> = chunk_dataset(&wrapped, cfg.retarget.chunk_len_emp)
                .into_iter()
                .filter_map(|c| match c {
                    MotionClip::Robot(r) => Some(r),
                    _ => None,
                })
                .collect();
            logger.log(&format!(
                "training prior on {} chunks x {} epochs (weights rec={} ori={} col={} cen={} smo={} reg={})",
                chunks.len(),
                cfg.emp.epochs,
                cfg.emp.weights.rec,
                cfg.emp.weights.ori,
                cfg.emp.weights.col,
                cfg.emp.weights.cen,
                cfg.emp.weights.smo,
                cfg.emp.weights.reg
            ));
            let (nets, report) = train_emp(
                &cfg.emp,
                &cfg.sim,
                model.clone(),
                &policy,
                &mut wm,
                &chunks,
                cfg.seed,
            )
            .map_err(|e| StageError::other(e.to_string()))?;
            nets.save(&out.join("emp.bin")).map_err(|e| StageError::other(e.to_string()))?;
            let mut csv = String::from("epoch,total,rec,ori,col,cen,smo,reg\n");
            for (i, (t, terms)) in
                report.epoch_totals.iter().zip(&report.epoch_terms).enumerate()
            {
                csv.push_str(&format!(
                    "{i},{},{},{},{},{},{},{}\n",
                    fmt_f64(*t),
                    fmt_f64(terms.rec),
                    fmt_f64(terms.ori),
                    fmt_f64(terms.col),
                    fmt_f64(terms.cen),
                    fmt_f64(terms.smo),
                    fmt_f64(terms.reg)
                ));
            }
            atomic_write(&out.join("emp_train_log.csv"), csv.as_bytes())
                .map_err(|e| StageError::other(e.to_string()))?;
            logger.log(&format!(
                "wrote emp.bin; final epoch loss {:.4}, {} gradient clips",
                report.epoch_totals.last().copied().unwrap_or(f64::NAN),
                report.grad_clip_events
            ));
        }
        Stage::Eval => {
            let policy_path = require(out.join("policy.bin"))?;
            let suite_path = require(out.join("stress_suite.json"))?;
            let policy =
                PolicyNets::load(&policy_path).map_err(|e| StageError::other(e.to_string()))?;
            let suite = load_robot_clips(&suite_path)
                .map_err(|e| StageError::other(e.to_string()))?;
            let privileged = PolicyNets::load(&out.join("policy_privileged.bin")).ok();
            let emp = EmpNets::load(&out.join("emp.bin"), &model).ok();
            let mut sim_cfg = cfg.sim.clone();
            sim_cfg.hand_load_range = cfg.eval.hand_load;
            sim_cfg.dr.push = cfg.eval.push_enabled;
            let env = make_env(model.clone(), &sim_cfg);
            logger.log(&format!(
                "evaluating {} baselines over {} clips x {} seeds",
                cfg.eval.baselines.len(),
                suite.len(),
                cfg.eval.seeds.len()
            ));
            let inputs = BaselineInputs {
                decoupled: &policy,
                privileged: privileged.as_ref(),
                emp: emp.as_ref(),
                gate_threshold: cfg.emp.gate_threshold,
            };
            let rows = run_baseline_matrix(&env, &inputs, &suite, &cfg.eval, cfg.seed);
            atomic_write(&out.join("eval_table.csv"), baseline_table_csv(&rows).as_bytes())
                .map_err(|e| StageError::other(e.to_string()))?;
            atomic_write(&out.join("eval_table.md"), baseline_table_markdown(&rows).as_bytes())
                .map_err(|e| StageError::other(e.to_string()))?;
            // example trajectory logs + a joint-trace figure per baseline
            if let Some(clip) = suite.first() {
                let mut traces = Vec::new();
                for row in &rows {
                    let source = match row.name.as_str() {
                        "decoupled_emp" => {
                            emp.as_ref().map(UpperSource::Emp).unwrap_or(UpperSource::Raw)
                        }
                        "emp_when_danger" => emp
                            .as_ref()
                            .map(|e| UpperSource::Gated(e, cfg.emp.gate_threshold))
                            .unwrap_or(UpperSource::Raw),
                        _ => UpperSource::Raw,
                    };
                    let pol = if row.name == "privileged" {
                        privileged.as_ref().unwrap_or(&policy)
                    } else {
                        &policy
                    };
                    let log = run_episode(
                        &env,
                        Some(pol),
                        &source,
                        clip,
                        split_seed(cfg.seed, 0xC11),
                        cfg.eval.episode_len,
                    );
                    atomic_write(
                        &out.join(format!("trajectory_{}.csv", row.name)),
                        log.to_csv().as_bytes(),
                    )
                    .map_err(|e| StageError::other(e.to_string()))?;
                    traces.push((row.name.clone(), log));
                }
                let refs: Vec<(String, &TrajectoryLog)> =
                    traces.iter().map(|(n, l)| (n.clone(), l)).collect();
                let svg = joint_trace_svg(&refs, 1, "left shoulder pitch: goal vs executed");
                atomic_write(&out.join("joint_trace.svg"), svg.as_bytes())
                    .map_err(|e| StageError::other(e.to_string()))?;
            }
            for row in &rows {
                let a = row.report.aggregate;
                let gate = row
                    .report
                    .gate_open_fraction
                    .map(|g| format!(", gate open {:.0}%", g * 100.0))
                    .unwrap_or_default();
                logger.log(&format!(
                    "{}: SUC {:.1}% MJP {:.4} MSC {:.4} MBV {:.4} MBA {:.4} MBO {:.4} MUS {:.4}{}",
                    row.name,
                    a.suc * 100.0,
                    a.mjp,
                    a.msc,
                    a.mbv,
                    a.mba,
                    a.mbo,
                    a.mus,
                    gate
                ));
            }
        }
        Stage::Plot { input, output, joint } => {
            let input = require(input.clone())?;
            let text =
                std::fs::read_to_string(&input).map_err(|e| StageError::other(e.to_string()))?;
            let log = TrajectoryLog::from_csv(&text, cfg.sim.control_dt())
                .map_err(|e| StageError::other(e.to_string()))?;
            let refs = vec![("executed".to_string(), &log)];
            let svg = joint_trace_svg(&refs, *joint, &format!("upper joint {joint}"));
            atomic_write(output, svg.as_bytes()).map_err(|e| StageError::other(e.to_string()))?;
            logger.log(&format!("wrote {}", output.display()));
        }
    }
    Ok(())
}

/// Roll the policy over sampled chunks and record (s, a, s') transitions.
fn collect_transitions(
    env: &SimEnv,
    policy: &PolicyNets,
    chunks: &[RobotMotionClip],
    cfg: &stand_imitate_core::config::WmTrainConfig,
    seed: u64,
) -> Vec<Transition> {
    use rayon::prelude::*;
    assert!(!chunks.is_empty(), "no motion chunks for rollouts");
    (0..cfg.episodes)
        .into_par_iter()
        .flat_map(|ep| {
            let ep_seed = split_seed(seed, 0xD0 + ep as u64);
            let clip = &chunks[(split_seed(ep_seed, 1) % chunks.len() as u64) as usize];
            let mut rng = rng_from_seed(split_seed(ep_seed, 2));
            let mut state = env.reset(ep_seed);
            let mut obs = ObsBuilder::new(policy.obs_window, FRAME_WIDTH);
            let mut prev_action = [0.0; NUM_ACTIONS];
            let mut goal = stand_imitate_core::motion::looped_frame(clip, 5, 0);
            obs.push(state_frame(&state, &prev_action, &goal, false));
            let mut out = Vec::with_capacity(cfg.episode_len);
            for t in 0..cfg.episode_len {
                let frame_before = state_frame(&state, &prev_action, &goal, false);
                let (action, _, _) = policy.act(&obs.window_flat(), true, &mut rng);
                let step = env.step(&mut state, &action, &goal);
                let next_goal = stand_imitate_core::motion::looped_frame(clip, 5, t + 1);
                let frame_after = state_frame(&state, &action, &next_goal, false);
                obs.push(frame_after.clone());
                out.push(Transition { frame: frame_before, action, next_frame: frame_after });
                prev_action = action;
                goal = next_goal;
                if step.terminated {
                    break;
                }
            }
            out
        })
        .collect()
}
