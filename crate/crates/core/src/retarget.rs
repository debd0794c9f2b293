//! Graph-convolutional VQ autoencoder that converts human key-node motion
//! into robot joint-angle motion.
//!
//! Encoder and decoder are three-layer graph convolutions over the 8-node
//! upper-body skeleton; a learned latent transform bridges the two skeletons
//! and a 2048x64 codebook quantizes the latent with a straight-through
//! gradient. The training loss compares normalized limb directions and wrist
//! orientations through differentiable robot FK, plus the embedding and
//! commitment terms.

use crate::config::RetargetTrainConfig;
use crate::kinematics::*;
use crate::motion::{HumanFrame, HumanMotionClip, RobotMotionClip};
use crate::nn::*;
use crate::tensor::{Tape, Tensor, Var};
use crate::util::*;
use rand::seq::SliceRandom;
use rand::Rng;

pub const W_EE: f64 = 100.0;
pub const W_ORI: f64 = 100.0;
pub const W_ELB: f64 = 100.0;
pub const W_EMB: f64 = 10000.0;
pub const W_COM: f64 = 10000.0;
/// Guard for zero-length bone vectors inside direction normalization.
pub const NORM_EPS: f64 = 1e-8;

/// Node feature width on the human side: position (3), mean incident edge
/// rest offset (3), mean incident bone length (1), wrist rotation (9, zero
/// for non-wrist nodes).
pub const HUMAN_FEAT_WIDTH: usize = 16;

/// Unweighted loss terms; `total()` applies the table weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetargetLossTerms {
    pub ee: f64,
    pub ori: f64,
    pub elb: f64,
    pub emb: f64,
    pub com: f64,
}

impl RetargetLossTerms {
    pub fn total(&self) -> f64 {
        W_EE * self.ee + W_ORI * self.ori + W_ELB * self.elb + W_EMB * self.emb + W_COM * self.com
    }
}

/// Nearest codebook entry by Euclidean distance; ties break to the lowest
/// index. Returns (index, entry values).
pub fn vq_lookup(z: &[f64], codebook: &[f64], dim: usize) -> (usize, Vec<f64>) {
    assert_eq!(z.len(), dim);
    assert!(!codebook.is_empty() && codebook.len() % dim == 0);
    let n = codebook.len() / dim;
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for k in 0..n {
        let row = &codebook[k * dim..(k + 1) * dim];
        let mut d = 0.0;
        for i in 0..dim {
            let t = z[i] - row[i];
            d += t * t;
        }
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    (best, codebook[best * dim..(best + 1) * dim].to_vec())
}

/// Mean incident-edge features per node: (offset away from the node, length).
fn edge_summaries(graph: &SkeletonGraph) -> Vec<([f64; 3], f64)> {
    let n = graph.num_nodes();
    let mut acc = vec![([0.0; 3], 0.0, 0usize); n];
    for (e, &(a, b)) in graph.edges.iter().enumerate() {
        let off = graph.rest_offsets[e];
        let len = graph.bone_lengths[e];
        acc[a].0 = v_add(acc[a].0, off);
        acc[a].1 += len;
        acc[a].2 += 1;
        acc[b].0 = v_add(acc[b].0, v_scale(off, -1.0));
        acc[b].1 += len;
        acc[b].2 += 1;
    }
    acc.into_iter()
        .map(|(o, l, c)| {
            let c = c.max(1) as f64;
            (v_scale(o, 1.0 / c), l / c)
        })
        .collect()
}

pub struct Retargeter {
    pub params: NetParams,
    pub human_graph: SkeletonGraph,
    pub robot_graph: SkeletonGraph,
    pub arch: RetargetTrainConfig,
    /// Batch index each codebook entry was last selected.
    last_used: Vec<u64>,
    batches_seen: u64,
}

impl Retargeter {
    pub fn new(arch: RetargetTrainConfig, model: &RobotModel, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let mut params = NetParams::new();
        // encoder graph convs: feature width -> hidden[0] -> hidden[1] -> ...
        let mut in_w = HUMAN_FEAT_WIDTH;
        for (i, &out_w) in arch.encoder_hidden.iter().enumerate() {
            init_graph_conv(&mut params, &format!("enc.gc{i}"), in_w, out_w, &mut rng);
            in_w = out_w;
        }
        assert_eq!(in_w, arch.codebook_dim, "encoder must end at the codebook width");
        // latent transform: linear skip plus a one-hidden-layer correction
        let d = arch.codebook_dim;
        let h = arch.transform_hidden;
        let lim0 = (6.0 / d as f64).sqrt();
        let lim1 = (6.0 / h as f64).sqrt();
        params.insert(
            "tf.w0",
            Tensor::matrix(d, h, (0..d * h).map(|_| rng.gen_range(-lim0..lim0)).collect()),
        );
        params.insert("tf.b0", Tensor::vector(vec![0.0; h]));
        params.insert(
            "tf.w1",
            Tensor::matrix(h, d, (0..h * d).map(|_| rng.gen_range(-lim1..lim1)).collect()),
        );
        params.insert("tf.b1", Tensor::vector(vec![0.0; d]));
        params.insert(
            "tf.wskip",
            Tensor::matrix(d, d, (0..d * d).map(|_| rng.gen_range(-lim0..lim0)).collect()),
        );
        params.insert("tf.bskip", Tensor::vector(vec![0.0; d]));
        // codebook
        let cb: Vec<f64> = (0..arch.codebook_size * d)
            .map(|_| rng.gen_range(-0.5..0.5))
            .collect();
        params.insert("codebook", Tensor::matrix(arch.codebook_size, d, cb));
        // decoder graph convs over [z_e, edge features]
        let mut in_w = d + 4;
        for (i, &out_w) in arch.decoder_hidden.iter().enumerate() {
            init_graph_conv(&mut params, &format!("dec.gc{i}"), in_w, out_w, &mut rng);
            in_w = out_w;
        }
        let readout_in = in_w * 8;
        let lim = (6.0 / readout_in as f64).sqrt();
        params.insert(
            "readout.w",
            Tensor::matrix(
                readout_in,
                NUM_UPPER_JOINTS,
                (0..readout_in * NUM_UPPER_JOINTS)
                    .map(|_| rng.gen_range(-lim..lim))
                    .collect(),
            ),
        );
        params.insert("readout.b", Tensor::vector(vec![0.0; NUM_UPPER_JOINTS]));
        let last_used = vec![0; arch.codebook_size];
        Retargeter {
            params,
            human_graph: crate::motion::human_skeleton(),
            robot_graph: robot_skeleton_graph(model),
            arch,
            last_used,
            batches_seen: 0,
        }
    }

    /// Per-node input features for one human frame.
    pub fn human_features(&self, frame: &HumanFrame) -> Tensor {
        let n = self.human_graph.num_nodes();
        let summaries = edge_summaries(&self.human_graph);
        let mut data = Vec::with_capacity(n * HUMAN_FEAT_WIDTH);
        for i in 0..n {
            data.extend_from_slice(&frame.node_positions[i]);
            data.extend_from_slice(&summaries[i].0);
            data.push(summaries[i].1);
            // wrist rotation slots (l_wrist = 4, r_wrist = 7)
            let rot = if i == 4 {
                Some(&frame.wrist_rotations[0])
            } else if i == 7 {
                Some(&frame.wrist_rotations[1])
            } else {
                None
            };
            match rot {
                Some(r) => data.extend(r.iter().flatten()),
                None => data.extend_from_slice(&[0.0; 9]),
            }
        }
        Tensor::matrix(n, HUMAN_FEAT_WIDTH, data)
    }

    /// z_A: graph-conv features mean-pooled to a single latent.
    pub fn encode(&self, tape: &mut Tape, frame: &HumanFrame) -> Var {
        let feats = self.human_features(frame);
        let adj = self.human_graph.adjacency();
        let mut h = tape.constant(&feats);
        for i in 0..self.arch.encoder_hidden.len() {
            h = graph_conv(tape, &self.params, &format!("enc.gc{i}"), &adj, h, Activation::Tanh)
                .expect("encoder layer");
        }
        let n = self.human_graph.num_nodes();
        let pool_row = Tensor::matrix(1, n, vec![1.0 / n as f64; n]);
        let pool = tape.constant(&pool_row);
        let pooled = tape.matmul(pool, h);
        tape.reshape(pooled, vec![self.arch.codebook_dim])
    }

    /// z_B = skip-linear(z_A) + correction MLP.
    pub fn transform(&self, tape: &mut Tape, z_a: Var) -> Var {
        let w0 = tape.param(&self.params, "tf.w0");
        let b0 = tape.param(&self.params, "tf.b0");
        let w1 = tape.param(&self.params, "tf.w1");
        let b1 = tape.param(&self.params, "tf.b1");
        let wskip = tape.param(&self.params, "tf.wskip");
        let bskip = tape.param(&self.params, "tf.bskip");
        let h0 = tape.matmul(z_a, w0);
        let h0b = tape.add(h0, b0);
        let h = tape.tanh(h0b);
        let corr = tape.matmul(h, w1);
        let corr_b = tape.add(corr, b1);
        let skip = tape.matmul(z_a, wskip);
        let skip_b = tape.add(skip, bskip);
        tape.add(corr_b, skip_b)
    }

    /// Decoder: broadcast the quantized latent over the robot nodes, run the
    /// graph convs, read out 15 joint angles and clamp them to limits.
    pub fn decode(&self, tape: &mut Tape, z_e: Var, model: &RobotModel) -> Var {
        let n = self.robot_graph.num_nodes();
        let summaries = edge_summaries(&self.robot_graph);
        let mut rows: Vec<Var> = Vec::with_capacity(n);
        for s in summaries.iter().take(n) {
            let mut ef = s.0.to_vec();
            ef.push(s.1);
            let e = tape.vector(&ef);
            rows.push(tape.concat(&[z_e, e]));
        }
        let flat = tape.concat(&rows);
        let width = self.arch.codebook_dim + 4;
        let mut h = tape.reshape(flat, vec![n, width]);
        let adj = self.robot_graph.adjacency();
        for i in 0..self.arch.decoder_hidden.len() {
            h = graph_conv(tape, &self.params, &format!("dec.gc{i}"), &adj, h, Activation::Tanh)
                .expect("decoder layer");
        }
        let last = *self.arch.decoder_hidden.last().expect("decoder layers");
        let flat = tape.reshape(h, vec![n * last]);
        let w = tape.param(&self.params, "readout.w");
        let b = tape.param(&self.params, "readout.b");
        let lin = tape.matmul(flat, w);
        let raw = tape.add(lin, b);
        let (lo, hi) = model.upper_limits();
        tape.clamp_vec(raw, &lo, &hi)
    }

    /// Full frame inference: encode, transform, quantize, decode.
    pub fn retarget_frame(&self, frame: &HumanFrame, model: &RobotModel) -> [f64; NUM_UPPER_JOINTS] {
        let mut tape = Tape::new();
        let z_a = self.encode(&mut tape, frame);
        let z_b = self.transform(&mut tape, z_a);
        let (_, e_k) = vq_lookup(
            tape.value(z_b),
            &self.params.get("codebook").data,
            self.arch.codebook_dim,
        );
        let z_e = tape.straight_through(z_b, &e_k);
        let out = self.decode(&mut tape, z_e, model);
        let mut angles = [0.0; NUM_UPPER_JOINTS];
        angles.copy_from_slice(tape.value(out));
        angles
    }

    pub fn retarget_clip(&self, clip: &HumanMotionClip, model: &RobotModel) -> RobotMotionClip {
        RobotMotionClip::new(
            clip.frame_rate,
            clip.frames
                .iter()
                .map(|f| self.retarget_frame(f, model).to_vec())
                .collect(),
        )
    }
}

/// Straight-line evaluation of the five loss terms from plain values:
/// direction/orientation terms through plain robot FK, embedding and
/// commitment from the latent pair.
pub fn retarget_loss_terms(
    model: &RobotModel,
    frame: &HumanFrame,
    robot_upper: &[f64; NUM_UPPER_JOINTS],
    z_b: &[f64],
    e_k: &[f64],
) -> RetargetLossTerms {
    let mut q = model.default_pose.clone();
    q[UPPER_JOINT_OFFSET..].copy_from_slice(robot_upper);
    let pose = Pose::new([0.0, 0.0, model.h_ref], IDENTITY_QUAT, q);
    let fk = forward_kinematics(model, &pose);
    let nodes = robot_key_nodes(model, &fk);
    let wrist_rots = [
        fk.rot[model.link_index("l_wrist_roll").expect("wrist")],
        fk.rot[model.link_index("r_wrist_roll").expect("wrist")],
    ];
    let normalize = |v: Vec3| -> Vec3 {
        let n = (v_dot(v, v) + NORM_EPS).sqrt();
        v_scale(v, 1.0 / n)
    };
    let mut ee = 0.0;
    let mut elb = 0.0;
    let mut ori = 0.0;
    // node order: waist torso l_sh l_el l_wr r_sh r_el r_wr
    for (sh, el, wr, wrist) in [(2, 3, 4, 0), (5, 6, 7, 1)] {
        let dh = normalize(v_sub(frame.node_positions[wr], frame.node_positions[el]));
        let dr = normalize(v_sub(nodes[wr], nodes[el]));
        let diff = v_sub(dh, dr);
        ee += v_dot(diff, diff);
        let eh = normalize(v_sub(frame.node_positions[el], frame.node_positions[sh]));
        let er = normalize(v_sub(nodes[el], nodes[sh]));
        let ediff = v_sub(eh, er);
        elb += v_dot(ediff, ediff);
        for i in 0..3 {
            for j in 0..3 {
                let d = frame.wrist_rotations[wrist][i][j] - wrist_rots[wrist][i][j];
                ori += d * d;
            }
        }
    }
    let mut emb = 0.0;
    for (a, b) in z_b.iter().zip(e_k) {
        emb += (a - b) * (a - b);
    }
    RetargetLossTerms { ee, ori, elb, emb, com: 0.25 * emb }
}

/// One training step's tape-side loss for a single frame. Returns the
/// weighted total variable along with the chosen codebook index and the
/// pre-quantization latent values.
fn frame_loss(
    rt: &Retargeter,
    tape: &mut Tape,
    frame: &HumanFrame,
    model: &RobotModel,
) -> (Var, usize, Vec<f64>) {
    let z_a = rt.encode(tape, frame);
    let z_b = rt.transform(tape, z_a);
    let z_b_values = tape.value(z_b).to_vec();
    let (k, e_k) = vq_lookup(&z_b_values, &rt.params.get("codebook").data, rt.arch.codebook_dim);
    let z_e = tape.straight_through(z_b, &e_k);
    let decoded = rt.decode(tape, z_e, model);

    // differentiable FK with upper joints from the decoder output
    let eye = tape.matrix(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    let base = tape.vector(&[0.0, 0.0, model.h_ref]);
    let mut angles = Vec::with_capacity(NUM_JOINTS);
    for (j, &d) in model.default_pose.iter().enumerate().take(NUM_LEG_JOINTS) {
        let _ = j;
        angles.push(DiffAngle::Const(d));
    }
    for j in 0..NUM_UPPER_JOINTS {
        angles.push(DiffAngle::Var(tape.index(decoded, j)));
    }
    let dfk = fk_diff(tape, model, eye, base, &angles);
    let anchors = robot_key_node_anchors();
    let node_pos: Vec<Var> = anchors
        .iter()
        .map(|(link, off)| {
            let li = model.link_index(link).expect("anchor link");
            dfk.point_on(tape, li, *off)
        })
        .collect();
    let wrist_links = [
        model.link_index("l_wrist_roll").expect("wrist"),
        model.link_index("r_wrist_roll").expect("wrist"),
    ];

    let mut ee_parts = Vec::new();
    let mut elb_parts = Vec::new();
    let mut ori_parts = Vec::new();
    for (sh, el, wr, wrist) in [(2usize, 3usize, 4usize, 0usize), (5, 6, 7, 1)] {
        let hum_dir = {
            let v = v_sub(frame.node_positions[wr], frame.node_positions[el]);
            let n = (v_dot(v, v) + NORM_EPS).sqrt();
            v_scale(v, 1.0 / n)
        };
        let rob = tape.sub(node_pos[wr], node_pos[el]);
        let rob_dir = tape.normalize(rob, NORM_EPS);
        let hum = tape.vector(&hum_dir);
        let diff = tape.sub(hum, rob_dir);
        ee_parts.push(tape.sq_norm(diff));

        let hum_e = {
            let v = v_sub(frame.node_positions[el], frame.node_positions[sh]);
            let n = (v_dot(v, v) + NORM_EPS).sqrt();
            v_scale(v, 1.0 / n)
        };
        let rob_e = tape.sub(node_pos[el], node_pos[sh]);
        let rob_e_dir = tape.normalize(rob_e, NORM_EPS);
        let hum_ev = tape.vector(&hum_e);
        let ediff = tape.sub(hum_ev, rob_e_dir);
        elb_parts.push(tape.sq_norm(ediff));

        let hrot: Vec<f64> = frame.wrist_rotations[wrist].iter().flatten().copied().collect();
        let h = tape.matrix(3, 3, &hrot);
        let r = dfk.rot[wrist_links[wrist]];
        let rd = tape.sub(h, r);
        ori_parts.push(tape.sq_norm(rd));
    }
    let ee = tape.concat(&ee_parts);
    let ee = tape.sum(ee);
    let elb = tape.concat(&elb_parts);
    let elb = tape.sum(elb);
    let ori = tape.concat(&ori_parts);
    let ori = tape.sum(ori);

    // embedding loss trains the codebook, commitment trains the encoder side
    let cb = tape.param(&rt.params, "codebook");
    let e_row = tape.slice(cb, k * rt.arch.codebook_dim, rt.arch.codebook_dim);
    let zb_const = tape.vector(&z_b_values);
    let demb = tape.sub(zb_const, e_row);
    let l_emb = tape.sq_norm(demb);
    let ek_const = tape.vector(&e_k);
    let dcom = tape.sub(z_b, ek_const);
    let l_com_raw = tape.sq_norm(dcom);
    let l_com = tape.scale(l_com_raw, 0.25);

    let wee = tape.scale(ee, W_EE);
    let wori = tape.scale(ori, W_ORI);
    let welb = tape.scale(elb, W_ELB);
    let wemb = tape.scale(l_emb, W_EMB);
    let wcom = tape.scale(l_com, W_COM);
    let parts = tape.concat(&[wee, wori, welb, wemb, wcom]);
    (tape.sum(parts), k, z_b_values)
}

pub struct RetargetTrainReport {
    pub epoch_losses: Vec<f64>,
    pub refreshed_codes: usize,
}

/// Train on human clips; deterministic in (seed, dataset, config).
pub fn train_retargeter(
    cfg: &RetargetTrainConfig,
    clips: &[HumanMotionClip],
    model: &RobotModel,
    seed: u64,
) -> (Retargeter, RetargetTrainReport) {
    let mut rt = Retargeter::new(cfg.clone(), model, split_seed(seed, 1));
    let mut rng = rng_from_seed(split_seed(seed, 2));
    let frames: Vec<&HumanFrame> = clips.iter().flat_map(|c| c.frames.iter()).collect();
    assert!(!frames.is_empty(), "empty retargeting dataset");
    let mut order: Vec<usize> = (0..frames.len()).collect();
    let mut epoch_losses = Vec::new();
    let mut refreshed = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0.0f64;
        for batch in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let mut parts = Vec::with_capacity(batch.len());
            let mut used = Vec::with_capacity(batch.len());
            let mut latents = Vec::with_capacity(batch.len());
            for &fi in batch {
                let (loss, k, z_b) = frame_loss(&rt, &mut tape, frames[fi], model);
                parts.push(loss);
                used.push(k);
                latents.push(z_b);
            }
            let stacked = tape.concat(&parts);
            let total = tape.mean(stacked);
            epoch_loss += tape.scalar_value(total);
            batches += 1.0;
            tape.backward(total).expect("fresh tape");
            tape.apply_param_grads(&mut rt.params);
            rt.params.adam_step(cfg.lr).expect("finite grads");
            // codebook bookkeeping: refresh entries unused for too long
            rt.batches_seen += 1;
            for &k in &used {
                rt.last_used[k] = rt.batches_seen;
            }
            if cfg.dead_code_refresh > 0 {
                let dim = rt.arch.codebook_dim;
                for k in 0..rt.arch.codebook_size {
                    if rt.batches_seen - rt.last_used[k] >= cfg.dead_code_refresh as u64 {
                        let src = &latents[rng.gen_range(0..latents.len())];
                        let cb = rt.params.get_mut("codebook");
                        for d in 0..dim {
                            cb.data[k * dim + d] = src[d] + rng.gen_range(-0.01..0.01);
                        }
                        rt.last_used[k] = rt.batches_seen;
                        refreshed += 1;
                    }
                }
            }
        }
        epoch_losses.push(epoch_loss / batches.max(1.0));
    }
    (rt, RetargetTrainReport { epoch_losses, refreshed_codes: refreshed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::motion::generate_human_clip;

    fn small_arch() -> RetargetTrainConfig {
        RetargetTrainConfig {
            codebook_size: 64,
            ..RetargetTrainConfig::default()
        }
    }

    fn model() -> RobotModel {
        RobotModel::default_humanoid()
    }

    #[test]
    fn vq_lookup_cases() {
        // 2-dim test codebook {(0,0),(1,1)}: z=(0.9,0.8) is nearer to (1,1)
        let cb = vec![0.0, 0.0, 1.0, 1.0];
        let (k, e) = vq_lookup(&[0.9, 0.8], &cb, 2);
        assert_eq!(k, 1);
        assert_eq!(e, vec![1.0, 1.0]);
        // exact hit
        let (k, _) = vq_lookup(&[0.0, 0.0], &cb, 2);
        assert_eq!(k, 0);
        // tie breaks to the lowest index
        let cb = vec![1.0, 0.0, -1.0, 0.0];
        let (k, _) = vq_lookup(&[0.0, 0.0], &cb, 2);
        assert_eq!(k, 0);
    }

    #[test]
    fn vq_matches_exhaustive_scan() {
        let mut rng = rng_from_seed(11);
        let dim = 16;
        let n = 128;
        let cb: Vec<f64> = (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for _ in 0..200 {
            let z: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.2..1.2)).collect();
            let (k, _) = vq_lookup(&z, &cb, dim);
            // straight-line scan oracle
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for j in 0..n {
                let d: f64 = (0..dim)
                    .map(|i| (z[i] - cb[j * dim + i]).powi(2))
                    .sum();
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            assert_eq!(k, best);
        }
    }

    #[test]
    fn voronoi_cell_stability() {
        let mut rng = rng_from_seed(13);
        let dim = 8;
        let n = 32;
        let cb: Vec<f64> = (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for _ in 0..100 {
            let z: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (k, e) = vq_lookup(&z, &cb, dim);
            // distance gap to runner-up bounds safe perturbations
            let d_best: f64 = z.iter().zip(&e).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let mut runner = f64::INFINITY;
            for j in 0..n {
                if j == k {
                    continue;
                }
                let d: f64 = (0..dim)
                    .map(|i| (z[i] - cb[j * dim + i]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                runner = runner.min(d);
            }
            let margin = (runner - d_best) / 2.0;
            if margin <= 1e-6 {
                continue;
            }
            let eps = margin / (dim as f64).sqrt() * 0.9;
            let zp: Vec<f64> = z
                .iter()
                .map(|v| v + rng.gen_range(-eps..eps) / (dim as f64))
                .collect();
            let (kp, _) = vq_lookup(&zp, &cb, dim);
            assert_eq!(k, kp);
        }
    }

    #[test]
    fn zero_param_encoder_gives_zero_latent() {
        let m = model();
        let mut rt = Retargeter::new(small_arch(), &m, 3);
        for i in 0..rt.arch.encoder_hidden.len() {
            for suffix in ["w", "b"] {
                let name = format!("enc.gc{i}.{suffix}");
                let t = rt.params.get_mut(&name);
                t.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let clip = generate_human_clip(1, 3, 50.0);
        let mut tape = Tape::new();
        let z = rt.encode(&mut tape, &clip.frames[0]);
        assert!(tape.value(z).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn encode_is_deterministic_and_sensitive() {
        let m = model();
        let rt = Retargeter::new(small_arch(), &m, 5);
        let clip = generate_human_clip(2, 3, 50.0);
        let f = &clip.frames[0];
        let z1 = {
            let mut tape = Tape::new();
            let z = rt.encode(&mut tape, f);
            tape.value(z).to_vec()
        };
        let z2 = {
            let mut tape = Tape::new();
            let z = rt.encode(&mut tape, f);
            tape.value(z).to_vec()
        };
        assert_eq!(z1, z2);
        // perturbing any single node by 0.1 m must change the latent
        for node in 0..8 {
            let mut fp = f.clone();
            fp.node_positions[node][0] += 0.1;
            let mut tape = Tape::new();
            let z = rt.encode(&mut tape, &fp);
            assert_ne!(z1, tape.value(z).to_vec(), "node {node} insensitive");
        }
    }

    #[test]
    fn transform_zero_params_and_identity_config() {
        let m = model();
        let mut rt = Retargeter::new(small_arch(), &m, 7);
        let d = rt.arch.codebook_dim;
        for name in ["tf.w0", "tf.b0", "tf.w1", "tf.b1", "tf.wskip", "tf.bskip"] {
            rt.params.get_mut(name).data.iter_mut().for_each(|v| *v = 0.0);
        }
        let z: Vec<f64> = (0..d).map(|i| (i as f64) * 0.01 - 0.3).collect();
        let mut tape = Tape::new();
        let zv = tape.vector(&z);
        let out = rt.transform(&mut tape, zv);
        assert!(tape.value(out).iter().all(|v| *v == 0.0));
        // identity-initialized skip with zero hidden contribution: pass-through
        {
            let w = rt.params.get_mut("tf.wskip");
            for i in 0..d {
                w.data[i * d + i] = 1.0;
            }
        }
        let mut tape = Tape::new();
        let zv = tape.vector(&z);
        let out = rt.transform(&mut tape, zv);
        assert_eq!(tape.value(out), z.as_slice());
    }

    #[test]
    fn transform_gradient_matches_finite_differences() {
        let m = model();
        let rt = Retargeter::new(small_arch(), &m, 9);
        let d = rt.arch.codebook_dim;
        let mut rng = rng_from_seed(1);
        let z: Vec<f64> = (0..d).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let w: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let eval = |zs: &[f64]| {
            let mut tape = Tape::new();
            let zv = tape.vector(zs);
            let out = rt.transform(&mut tape, zv);
            let wv = tape.vector(&w);
            let p = tape.mul(out, wv);
            let s = tape.sum(p);
            tape.scalar_value(s)
        };
        let mut tape = Tape::new();
        let zv = tape.vector(&z);
        let out = rt.transform(&mut tape, zv);
        let wv = tape.vector(&w);
        let p = tape.mul(out, wv);
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        let err = gradcheck::check_grad(eval, &z, &tape.grad(zv));
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn decode_zero_params_is_default_offset_and_clamped() {
        let m = model();
        let mut rt = Retargeter::new(small_arch(), &m, 11);
        for i in 0..rt.arch.decoder_hidden.len() {
            for suffix in ["w", "b"] {
                let name = format!("dec.gc{i}.{suffix}");
                rt.params.get_mut(&name).data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        rt.params.get_mut("readout.w").data.iter_mut().for_each(|v| *v = 0.0);
        rt.params.get_mut("readout.b").data.iter_mut().for_each(|v| *v = 0.0);
        let mut tape = Tape::new();
        let z = tape.vector(&vec![0.3; rt.arch.codebook_dim]);
        let out = rt.decode(&mut tape, z, &m);
        // zero readout means zero angles, the default upper-body pose
        assert!(tape.value(out).iter().all(|v| *v == 0.0));

        // random latents stay inside joint limits
        let rt = Retargeter::new(small_arch(), &m, 13);
        let (lo, hi) = m.upper_limits();
        let mut rng = rng_from_seed(2);
        for _ in 0..200 {
            let z: Vec<f64> = (0..rt.arch.codebook_dim).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let mut tape = Tape::new();
            let zv = tape.vector(&z);
            let out = rt.decode(&mut tape, zv, &m);
            for (j, v) in tape.value(out).iter().enumerate() {
                assert!(*v >= lo[j] - 1e-12 && *v <= hi[j] + 1e-12);
            }
        }
    }

    #[test]
    fn loss_terms_match_plain_reimplementation() {
        let m = model();
        let rt = Retargeter::new(small_arch(), &m, 17);
        let clip = generate_human_clip(4, 4, 50.0);
        let frame = &clip.frames[2];
        let mut tape = Tape::new();
        let (loss, k, z_b) = frame_loss(&rt, &mut tape, frame, &m);
        let total_taped = tape.scalar_value(loss);
        // plain path: run the same nets, then evaluate the formulas directly
        let angles = rt.retarget_frame(frame, &m);
        let e_k = {
            let dim = rt.arch.codebook_dim;
            rt.params.get("codebook").data[k * dim..(k + 1) * dim].to_vec()
        };
        let terms = retarget_loss_terms(&m, frame, &angles, &z_b, &e_k);
        assert!(
            (terms.total() - total_taped).abs() < 1e-9,
            "taped {total_taped} vs plain {}",
            terms.total()
        );
        assert!(terms.ee >= 0.0 && terms.ori >= 0.0 && terms.elb >= 0.0);
        assert!((terms.com - 0.25 * terms.emb).abs() < 1e-15);
    }

    #[test]
    fn direction_losses_are_scale_invariant() {
        let m = model();
        let clip = generate_human_clip(6, 3, 50.0);
        let frame = &clip.frames[1];
        let mut scaled = frame.clone();
        for p in scaled.node_positions.iter_mut() {
            *p = v_scale(*p, 2.0);
        }
        let upper = [0.1; NUM_UPPER_JOINTS];
        let z = vec![0.0; 4];
        // the 1e-8 zero-length guard bounds invariance at that scale
        let a = retarget_loss_terms(&m, frame, &upper, &z, &z);
        let b = retarget_loss_terms(&m, &scaled, &upper, &z, &z);
        assert!((a.ee - b.ee).abs() < 1e-6, "{} vs {}", a.ee, b.ee);
        assert!((a.elb - b.elb).abs() < 1e-6);
    }

    #[test]
    fn perfect_match_zeroes_terms() {
        let m = model();
        // robot at default pose vs a synthetic "human" whose key nodes are the
        // robot's own: directions match exactly, losses vanish
        let fk = forward_kinematics(&m, &Pose::default_for(&m));
        let nodes = robot_key_nodes(&m, &fk);
        let wl = m.link_index("l_wrist_roll").unwrap();
        let wr = m.link_index("r_wrist_roll").unwrap();
        let frame = HumanFrame {
            node_positions: nodes.to_vec(),
            wrist_rotations: [
                [[fk.rot[wl][0][0], fk.rot[wl][0][1], fk.rot[wl][0][2]],
                 [fk.rot[wl][1][0], fk.rot[wl][1][1], fk.rot[wl][1][2]],
                 [fk.rot[wl][2][0], fk.rot[wl][2][1], fk.rot[wl][2][2]]],
                [[fk.rot[wr][0][0], fk.rot[wr][0][1], fk.rot[wr][0][2]],
                 [fk.rot[wr][1][0], fk.rot[wr][1][1], fk.rot[wr][1][2]],
                 [fk.rot[wr][2][0], fk.rot[wr][2][1], fk.rot[wr][2][2]]],
            ],
        };
        let upper = m.default_upper_pose();
        let z = vec![0.5; 8];
        let terms = retarget_loss_terms(&m, &frame, &upper, &z, &z);
        assert!(terms.ee < 1e-12, "ee {}", terms.ee);
        assert!(terms.elb < 1e-12);
        assert!(terms.ori < 1e-12);
        assert_eq!(terms.emb, 0.0);
        assert_eq!(terms.com, 0.0);
    }

    #[test]
    fn short_training_reduces_loss() {
        let m = model();
        let clips: Vec<HumanMotionClip> =
            (0..2).map(|s| generate_human_clip(s, 30, 50.0)).collect();
        let cfg = RetargetTrainConfig {
            epochs: 3,
            batch_size: 8,
            codebook_size: 32,
            ..RetargetTrainConfig::default()
        };
        let (_, report) = train_retargeter(&cfg, &clips, &m, 42);
        assert!(report.epoch_losses.len() == 3);
        assert!(
            report.epoch_losses[2] < report.epoch_losses[0],
            "losses {:?}",
            report.epoch_losses
        );
    }
}
