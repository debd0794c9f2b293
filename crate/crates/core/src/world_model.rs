//! Learned one-step transition model: next frame-state from the current
//! frame-state and lower-body action. Training pairs come from live
//! simulator rollouts; at motion-prior training time the frozen model is the
//! differentiable stand-in for the environment.
//!
//! The network predicts the state delta in normalized coordinates; the
//! normalization statistics live in the checkpoint next to the weights.

use crate::config::WmTrainConfig;
use crate::nn::*;
use crate::sim::{FRAME_RPY, FRAME_WIDTH, NUM_ACTIONS};
use crate::tensor::{Tape, Tensor, Var};
use crate::util::*;
use rayon::prelude::*;

pub const WM_INPUT: usize = FRAME_WIDTH + NUM_ACTIONS;

pub struct WorldModel {
    pub params: NetParams,
    pub spec: MlpSpec,
}

/// A recorded transition (s_t, a_t, s_{t+1}).
#[derive(Clone, Debug)]
pub struct Transition {
    pub frame: Vec<f64>,
    pub action: [f64; NUM_ACTIONS],
    pub next_frame: Vec<f64>,
}

impl WorldModel {
    pub fn new(hidden: &[usize], seed: u64) -> Self {
        let spec = MlpSpec::new(WM_INPUT, hidden, FRAME_WIDTH, Activation::Relu);
        let mut params = NetParams::new();
        let mut rng = rng_from_seed(seed);
        init_mlp(&mut params, "wm", &spec, &mut rng);
        // identity stats until fitted
        params.insert("stat.in_mean", Tensor::vector(vec![0.0; WM_INPUT]));
        params.insert("stat.in_std", Tensor::vector(vec![1.0; WM_INPUT]));
        params.insert("stat.out_mean", Tensor::vector(vec![0.0; FRAME_WIDTH]));
        params.insert("stat.out_std", Tensor::vector(vec![1.0; FRAME_WIDTH]));
        params.insert(
            "meta.arch",
            Tensor::vector(hidden.iter().map(|&h| h as f64).collect()),
        );
        WorldModel { params, spec }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), NnError> {
        self.params.save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, NnError> {
        let params = NetParams::load(path)?;
        let hidden: Vec<usize> =
            params.get("meta.arch").data.iter().map(|&h| h as usize).collect();
        Ok(WorldModel {
            spec: MlpSpec::new(WM_INPUT, &hidden, FRAME_WIDTH, Activation::Relu),
            params,
        })
    }

    /// Value copy (weights and stats; optimizer moments start fresh).
    pub fn snapshot(&self) -> Self {
        let params = NetParams::from_bytes(&self.params.to_bytes()).expect("own bytes");
        WorldModel { params, spec: self.spec.clone() }
    }

    /// Fit normalization statistics: inputs over [frame, action], outputs
    /// over the state deltas. Only training ever calls this; the stats are
    /// frozen afterwards.
    pub fn fit_stats(&mut self, data: &[Transition]) {
        assert!(!data.is_empty());
        let n = data.len() as f64;
        let mut in_mean = vec![0.0; WM_INPUT];
        let mut out_mean = vec![0.0; FRAME_WIDTH];
        for t in data {
            for (i, v) in t.frame.iter().chain(t.action.iter()).enumerate() {
                in_mean[i] += v / n;
            }
            for i in 0..FRAME_WIDTH {
                out_mean[i] += (t.next_frame[i] - t.frame[i]) / n;
            }
        }
        let mut in_var = vec![0.0; WM_INPUT];
        let mut out_var = vec![0.0; FRAME_WIDTH];
        for t in data {
            for (i, v) in t.frame.iter().chain(t.action.iter()).enumerate() {
                in_var[i] += (v - in_mean[i]).powi(2) / n;
            }
            for i in 0..FRAME_WIDTH {
                let d = t.next_frame[i] - t.frame[i];
                out_var[i] += (d - out_mean[i]).powi(2) / n;
            }
        }
        let floor = 1e-6;
        self.params.get_mut("stat.in_mean").data = in_mean;
        self.params.get_mut("stat.in_std").data =
            in_var.iter().map(|v| v.sqrt().max(floor)).collect();
        self.params.get_mut("stat.out_mean").data = out_mean;
        self.params.get_mut("stat.out_std").data =
            out_var.iter().map(|v| v.sqrt().max(floor)).collect();
    }

    fn stat(&self, name: &str) -> &[f64] {
        &self.params.get(name).data
    }

    /// Deterministic one-step prediction (plain path).
    pub fn predict(&self, frame: &[f64], action: &[f64; NUM_ACTIONS]) -> Vec<f64> {
        assert_eq!(frame.len(), FRAME_WIDTH);
        let in_mean = self.stat("stat.in_mean");
        let in_std = self.stat("stat.in_std");
        let x: Vec<f64> = frame
            .iter()
            .chain(action.iter())
            .enumerate()
            .map(|(i, v)| (v - in_mean[i]) / in_std[i])
            .collect();
        let y = forward_mlp_plain(&self.params, "wm", &self.spec, &x, 1);
        let out_mean = self.stat("stat.out_mean");
        let out_std = self.stat("stat.out_std");
        (0..FRAME_WIDTH)
            .map(|i| frame[i] + y[i] * out_std[i] + out_mean[i])
            .collect()
    }

    /// Taped prediction for gradient flow through the frozen model. The
    /// weights enter as constants when `self` is frozen (the caller simply
    /// never applies gradients to them).
    pub fn predict_on_tape(&self, tape: &mut Tape, frame: Var, action: Var) -> Var {
        let x = tape.concat(&[frame, action]);
        let in_mean = tape.vector(self.stat("stat.in_mean"));
        let in_inv_std: Vec<f64> = self.stat("stat.in_std").iter().map(|s| 1.0 / s).collect();
        let inv = tape.vector(&in_inv_std);
        let centered = tape.sub(x, in_mean);
        let xn = tape.mul(centered, inv);
        let y = forward_mlp(tape, &self.params, "wm", &self.spec, xn).expect("wm forward");
        let out_std = tape.vector(self.stat("stat.out_std"));
        let out_mean = tape.vector(self.stat("stat.out_mean"));
        let scaled = tape.mul(y, out_std);
        let delta = tape.add(scaled, out_mean);
        tape.add(frame, delta)
    }

    /// One Adam step on the mean one-step prediction loss (normalized space)
    /// over a batch; returns the loss value.
    pub fn update(&mut self, batch: &[&Transition], lr: f64) -> Result<f64, NnError> {
        let m = batch.len();
        assert!(m > 0);
        let in_mean = self.stat("stat.in_mean").to_vec();
        let in_std = self.stat("stat.in_std").to_vec();
        let out_mean = self.stat("stat.out_mean").to_vec();
        let out_std = self.stat("stat.out_std").to_vec();
        let mut xs = Vec::with_capacity(m * WM_INPUT);
        let mut ys = Vec::with_capacity(m * FRAME_WIDTH);
        for t in batch {
            for (i, v) in t.frame.iter().chain(t.action.iter()).enumerate() {
                xs.push((v - in_mean[i]) / in_std[i]);
            }
            for i in 0..FRAME_WIDTH {
                let d = t.next_frame[i] - t.frame[i];
                ys.push((d - out_mean[i]) / out_std[i]);
            }
        }
        let mut tape = Tape::new();
        let x_t = Tensor::matrix(m, WM_INPUT, xs);
        let x = tape.constant(&x_t);
        let pred = forward_mlp(&mut tape, &self.params, "wm", &self.spec, x)?;
        let y_t = Tensor::matrix(m, FRAME_WIDTH, ys);
        let y = tape.constant(&y_t);
        let err = tape.sub(pred, y);
        let sq = tape.mul(err, err);
        let per_sample = tape.sum_axis1(sq);
        let loss = tape.mean(per_sample);
        let value = tape.scalar_value(loss);
        tape.backward(loss).expect("fresh tape");
        tape.apply_param_grads(&mut self.params);
        self.params.adam_step(lr)?;
        Ok(value)
    }

    /// Mean over dimensions of MSE(prediction, truth) / Var(truth), the
    /// normalized held-out error.
    pub fn normalized_mse(&self, data: &[Transition]) -> f64 {
        assert!(!data.is_empty());
        let n = data.len() as f64;
        let mut mse = vec![0.0; FRAME_WIDTH];
        let mut mean = vec![0.0; FRAME_WIDTH];
        for t in data {
            for i in 0..FRAME_WIDTH {
                mean[i] += t.next_frame[i] / n;
            }
        }
        let mut var = vec![0.0; FRAME_WIDTH];
        for t in data {
            for i in 0..FRAME_WIDTH {
                var[i] += (t.next_frame[i] - mean[i]).powi(2) / n;
            }
        }
        let preds: Vec<Vec<f64>> = data
            .par_iter()
            .map(|t| self.predict(&t.frame, &t.action))
            .collect();
        for (t, pred) in data.iter().zip(&preds) {
            for i in 0..FRAME_WIDTH {
                mse[i] += (pred[i] - t.next_frame[i]).powi(2) / n;
            }
        }
        let mut acc = 0.0;
        let mut dims = 0.0f64;
        for i in 0..FRAME_WIDTH {
            if var[i] > 1e-10 {
                acc += mse[i] / var[i];
                dims += 1.0;
            }
        }
        acc / dims.max(1.0)
    }
}

/// World gravity direction (0,0,-1) expressed in the base frame given Euler
/// angles (plain path; `rpy_to_pg_on_tape` is the differentiable mirror).
pub fn rpy_to_projected_gravity(rpy: Vec3) -> Vec3 {
    let r = rpy_to_mat(rpy);
    m_vec(&m_transpose(&r), [0.0, 0.0, -1.0])
}

/// Taped projected gravity from an rpy variable: pg = R(rpy)^T g, computed
/// as the row-vector product g^T R.
pub fn rpy_to_pg_on_tape(tape: &mut Tape, rpy: Var) -> Var {
    let r = crate::kinematics::rpy_rotation_diff(tape, rpy);
    let g_row = tape.matrix(1, 3, &[0.0, 0.0, -1.0]);
    let prod = tape.matmul(g_row, r);
    tape.reshape(prod, vec![3])
}

/// rpy slice of a frame vector.
pub fn frame_rpy(frame: &[f64]) -> Vec3 {
    [frame[FRAME_RPY], frame[FRAME_RPY + 1], frame[FRAME_RPY + 2]]
}

pub struct WmTrainReport {
    pub train_losses: Vec<f64>,
    pub holdout_mse: f64,
    pub transitions: usize,
}

/// Fit a model to recorded transitions with a held-out split.
pub fn train_world_model(
    cfg: &WmTrainConfig,
    data: &[Transition],
    seed: u64,
) -> Result<(WorldModel, WmTrainReport), NnError> {
    use rand::seq::SliceRandom;
    assert!(data.len() >= 10, "world model needs data");
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = rng_from_seed(split_seed(seed, 3));
    order.shuffle(&mut rng);
    let holdout = ((data.len() as f64 * cfg.holdout_frac) as usize).max(1);
    let (hold_idx, train_idx) = order.split_at(holdout);
    let train: Vec<&Transition> = train_idx.iter().map(|&i| &data[i]).collect();
    let hold: Vec<Transition> = hold_idx.iter().map(|&i| data[i].clone()).collect();

    let mut wm = WorldModel::new(&cfg.hidden, split_seed(seed, 4));
    let train_owned: Vec<Transition> = train.iter().map(|t| (*t).clone()).collect();
    wm.fit_stats(&train_owned);
    let mut losses = Vec::new();
    let mut idx: Vec<usize> = (0..train.len()).collect();
    for _ in 0..cfg.epochs {
        idx.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0.0f64;
        for chunk in idx.chunks(cfg.batch_size) {
            let batch: Vec<&Transition> = chunk.iter().map(|&i| train[i]).collect();
            epoch_loss += wm.update(&batch, cfg.lr)?;
            batches += 1.0;
        }
        losses.push(epoch_loss / batches.max(1.0));
    }
    let holdout_mse = wm.normalized_mse(&hold);
    Ok((
        wm,
        WmTrainReport { train_losses: losses, holdout_mse, transitions: data.len() },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use rand::Rng;

    fn tiny_wm(seed: u64) -> WorldModel {
        WorldModel::new(&[32, 32], seed)
    }

    fn random_transition(rng: &mut impl Rng) -> Transition {
        let frame: Vec<f64> = (0..FRAME_WIDTH).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut action = [0.0; NUM_ACTIONS];
        action.iter_mut().for_each(|a| *a = rng.gen_range(-1.0..1.0));
        // smooth synthetic dynamics: next = frame + 0.1 sin(frame) + 0.05 a
        let next_frame: Vec<f64> = frame
            .iter()
            .enumerate()
            .map(|(i, v)| v + 0.1 * v.sin() + 0.05 * action[i % NUM_ACTIONS])
            .collect();
        Transition { frame, action, next_frame }
    }

    #[test]
    fn zero_net_predicts_mean_delta() {
        let mut wm = tiny_wm(0);
        for i in 0..wm.spec.layer_dims().len() {
            for s in ["w", "b"] {
                wm.params.get_mut(&format!("wm.{s}{i}")).data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut rng = rng_from_seed(1);
        let data: Vec<Transition> = (0..50).map(|_| random_transition(&mut rng)).collect();
        wm.fit_stats(&data);
        let t = &data[0];
        let pred = wm.predict(&t.frame, &t.action);
        // zero net output means prediction = frame + mean training delta
        let out_mean = wm.stat("stat.out_mean").to_vec();
        for i in 0..FRAME_WIDTH {
            assert!((pred[i] - (t.frame[i] + out_mean[i])).abs() < 1e-12);
        }
        // determinism
        let pred2 = wm.predict(&t.frame, &t.action);
        assert_eq!(pred, pred2);
    }

    #[test]
    fn normalization_round_trips() {
        let mut wm = tiny_wm(2);
        let mut rng = rng_from_seed(3);
        let data: Vec<Transition> = (0..100).map(|_| random_transition(&mut rng)).collect();
        wm.fit_stats(&data);
        let mean = wm.stat("stat.in_mean").to_vec();
        let std = wm.stat("stat.in_std").to_vec();
        for _ in 0..20 {
            let x: f64 = rng.gen_range(-5.0..5.0);
            let i = rng.gen_range(0..WM_INPUT);
            let normed = (x - mean[i]) / std[i];
            let back = normed * std[i] + mean[i];
            assert!((back - x).abs() < 1e-10);
        }
    }

    #[test]
    fn taped_and_plain_predictions_agree() {
        let mut wm = tiny_wm(4);
        let mut rng = rng_from_seed(5);
        let data: Vec<Transition> = (0..50).map(|_| random_transition(&mut rng)).collect();
        wm.fit_stats(&data);
        let t = &data[7];
        let plain = wm.predict(&t.frame, &t.action);
        let mut tape = Tape::new();
        let f = tape.vector(&t.frame);
        let a = tape.vector(&t.action);
        let pred = wm.predict_on_tape(&mut tape, f, a);
        let taped = tape.value(pred);
        for (p, q) in plain.iter().zip(taped) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn action_jacobian_matches_finite_differences() {
        let mut wm = tiny_wm(6);
        let mut rng = rng_from_seed(7);
        let data: Vec<Transition> = (0..50).map(|_| random_transition(&mut rng)).collect();
        wm.fit_stats(&data);
        let t = &data[3];
        let weights: Vec<f64> = (0..FRAME_WIDTH).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let eval = |a: &[f64]| {
            let mut arr = [0.0; NUM_ACTIONS];
            arr.copy_from_slice(a);
            let pred = wm.predict(&t.frame, &arr);
            pred.iter().zip(&weights).map(|(p, w)| p * w).sum::<f64>()
        };
        let mut tape = Tape::new();
        let f = tape.vector(&t.frame);
        let a = tape.vector(&t.action);
        let pred = wm.predict_on_tape(&mut tape, f, a);
        let wv = tape.vector(&weights);
        let prod = tape.mul(pred, wv);
        let loss = tape.sum(prod);
        tape.backward(loss).unwrap();
        let err = gradcheck::check_grad(eval, &t.action, &tape.grad(a));
        assert!(err < 1e-4, "rel err {err}");
        // gradient w.r.t. the input frame too
        let eval_f = |fr: &[f64]| {
            let pred = wm.predict(fr, &t.action);
            pred.iter().zip(&weights).map(|(p, w)| p * w).sum::<f64>()
        };
        let err_f = gradcheck::check_grad(eval_f, &t.frame, &tape.grad(f));
        assert!(err_f < 1e-4, "frame rel err {err_f}");
    }

    #[test]
    fn overfit_fixed_batch_loss_shrinks() {
        let mut wm = tiny_wm(8);
        let mut rng = rng_from_seed(9);
        let data: Vec<Transition> = (0..16).map(|_| random_transition(&mut rng)).collect();
        wm.fit_stats(&data);
        let batch: Vec<&Transition> = data.iter().collect();
        let mut losses = Vec::new();
        for _ in 0..1000 {
            losses.push(wm.update(&batch, 1e-3).unwrap());
        }
        let first = losses[0];
        let last = *losses.last().unwrap();
        assert!(last < first * 0.01, "{first} -> {last}");
        // windowed monotonicity: every 100-step window improves
        for w in losses.windows(2).collect::<Vec<_>>().chunks(100) {
            let a = w[0][0];
            let b = w[w.len() - 1][1];
            assert!(b <= a * 1.05, "window rose {a} -> {b}");
        }
    }

    #[test]
    fn constant_state_environment_converges() {
        let mut wm = tiny_wm(10);
        let frame = vec![0.25; FRAME_WIDTH];
        let action = [0.1; NUM_ACTIONS];
        let data: Vec<Transition> = (0..32)
            .map(|_| Transition {
                frame: frame.clone(),
                action,
                next_frame: frame.clone(),
            })
            .collect();
        wm.fit_stats(&data);
        let batch: Vec<&Transition> = data.iter().collect();
        let mut last = f64::INFINITY;
        for _ in 0..500 {
            last = wm.update(&batch, 1e-3).unwrap();
        }
        assert!(last < 1e-6, "L_pre {last}");
    }

    #[test]
    fn projected_gravity_from_rpy() {
        let pg = rpy_to_projected_gravity([0.0; 3]);
        assert!(v_norm(v_sub(pg, [0.0, 0.0, -1.0])) < 1e-15);
        // roll = pi/2 tips gravity onto -y in the base frame
        let pg = rpy_to_projected_gravity([std::f64::consts::FRAC_PI_2, 0.0, 0.0]);
        assert!((pg[1] + 1.0).abs() < 1e-12, "{pg:?}");
        // oracle: rotation matrix transpose applied to world gravity
        let mut rng = rng_from_seed(11);
        for _ in 0..1000 {
            let rpy = [
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-3.0..3.0),
            ];
            let pg = rpy_to_projected_gravity(rpy);
            assert!((v_norm(pg) - 1.0).abs() < 1e-12);
            let r = rpy_to_mat(rpy);
            let expect = m_vec(&m_transpose(&r), [0.0, 0.0, -1.0]);
            assert!(v_norm(v_sub(pg, expect)) < 1e-12);
        }
    }

    #[test]
    fn taped_pg_matches_plain() {
        let mut rng = rng_from_seed(12);
        for _ in 0..50 {
            let rpy = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-2.0..2.0),
            ];
            let plain = rpy_to_projected_gravity(rpy);
            let mut tape = Tape::new();
            let r = tape.vector(&rpy);
            let pg = rpy_to_pg_on_tape(&mut tape, r);
            let taped = tape.value(pg);
            for k in 0..3 {
                assert!((plain[k] - taped[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn training_driver_reaches_low_holdout_error() {
        let mut rng = rng_from_seed(13);
        let data: Vec<Transition> = (0..2000).map(|_| random_transition(&mut rng)).collect();
        let cfg = WmTrainConfig {
            hidden: vec![64, 32],
            epochs: 12,
            batch_size: 128,
            ..WmTrainConfig::default()
        };
        let (_, report) = train_world_model(&cfg, &data, 1).unwrap();
        assert!(report.holdout_mse < 0.10, "normalized MSE {}", report.holdout_mse);
    }
}
