//! Parameter stores, layers and the optimizer.
//!
//! Networks are plain collections of named tensors in a [`NetParams`] store;
//! layer functions record their forward pass on a [`Tape`]. A tape-free
//! forward (`forward_mlp_plain`) exists for rollouts and serving; it performs
//! the arithmetic in the same order as the taped path so the two are
//! bit-identical.

use crate::tensor::{matmul_into, Tape, Tensor, Var};
use rand::Rng;
use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

const CHECKPOINT_MAGIC: &[u8; 4] = b"SIMP";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("layer {layer}: expected input width {expected}, got {got}")]
    Dimension { layer: String, expected: usize, got: usize },
    #[error("adjacency must be square, got {rows}x{cols}")]
    AdjacencyNotSquare { rows: usize, cols: usize },
    #[error("adjacency invalid: {0}")]
    AdjacencyInvalid(String),
    #[error("NaN gradient in parameter '{0}'")]
    NanGradient(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Elu,
    Relu,
}

impl Activation {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Elu => tape.elu(x),
            Activation::Relu => tape.relu(x),
        }
    }

    pub fn apply_plain(&self, data: &mut [f64]) {
        match self {
            Activation::Tanh => data.iter_mut().for_each(|v| *v = v.tanh()),
            Activation::Elu => data
                .iter_mut()
                .for_each(|v| *v = if *v > 0.0 { *v } else { v.exp() - 1.0 }),
            Activation::Relu => data.iter_mut().for_each(|v| *v = v.max(0.0)),
        }
    }
}

/// Fully-connected network shape: `input -> hidden... -> output`, hidden
/// layers activated, output linear.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(input: usize, hidden: &[usize], output: usize, activation: Activation) -> Self {
        let spec = MlpSpec { input, hidden: hidden.to_vec(), output, activation };
        assert!(spec.widths_valid(), "MLP widths must all be >= 1");
        spec
    }

    pub fn widths_valid(&self) -> bool {
        self.input >= 1 && self.output >= 1 && self.hidden.iter().all(|&w| w >= 1)
    }

    /// (fan_in, fan_out) per layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input];
        widths.extend_from_slice(&self.hidden);
        widths.push(self.output);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

struct ParamEntry {
    tensor: Tensor,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Named parameter tensors with gradient slots and Adam moments.
#[derive(Default)]
pub struct NetParams {
    entries: BTreeMap<String, ParamEntry>,
    step: u64,
}

impl NetParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, mut tensor: Tensor) {
        tensor.ensure_grad();
        let n = tensor.len();
        self.entries.insert(
            name.to_string(),
            ParamEntry { tensor, m: vec![0.0; n], v: vec![0.0; n] },
        );
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.entries.get(name).unwrap_or_else(|| panic!("no parameter '{name}'")).tensor
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("no parameter '{name}'"))
            .tensor
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(|e| e.tensor.len()).sum()
    }

    pub fn accumulate_grad(&mut self, name: &str, g: &[f64]) {
        let e = self.entries.get_mut(name).expect("unknown parameter");
        let slot = e.tensor.grad.as_mut().expect("grad slot");
        debug_assert_eq!(slot.len(), g.len());
        slot.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.tensor.zero_grad();
        }
    }

    /// Global L2 norm of all gradients.
    pub fn grad_norm(&self) -> f64 {
        self.entries
            .values()
            .map(|e| {
                e.tensor
                    .grad
                    .as_ref()
                    .map(|g| g.iter().map(|x| x * x).sum::<f64>())
                    .unwrap_or(0.0)
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Scale all gradients so the global norm does not exceed `max_norm`.
    /// Returns true when clipping fired.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> bool {
        let norm = self.grad_norm();
        if norm <= max_norm || norm == 0.0 {
            return false;
        }
        let s = max_norm / norm;
        for e in self.entries.values_mut() {
            if let Some(g) = e.tensor.grad.as_mut() {
                g.iter_mut().for_each(|x| *x *= s);
            }
        }
        true
    }

    /// One Adam update over every parameter; gradients are zeroed and the
    /// step counter advances. A NaN gradient aborts with the parameter name.
    pub fn adam_step(&mut self, lr: f64) -> Result<(), NnError> {
        for (name, e) in self.entries.iter() {
            if let Some(g) = &e.tensor.grad {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(NnError::NanGradient(name.clone()));
                }
            }
        }
        let t = (self.step + 1) as f64;
        let bc1 = 1.0 - ADAM_BETA1.powf(t);
        let bc2 = 1.0 - ADAM_BETA2.powf(t);
        for e in self.entries.values_mut() {
            let g = e.tensor.grad.as_ref().expect("grad slot").clone();
            let data = &mut e.tensor.data;
            for i in 0..data.len() {
                e.m[i] = ADAM_BETA1 * e.m[i] + (1.0 - ADAM_BETA1) * g[i];
                e.v[i] = ADAM_BETA2 * e.v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                let mhat = e.m[i] / bc1;
                let vhat = e.v[i] / bc2;
                data[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
            e.tensor.zero_grad();
        }
        self.step += 1;
        Ok(())
    }

    // ----- checkpoint format -----
    // little-endian: magic "SIMP", version u32, then per-parameter records
    // (name length u32, name bytes, rank u32, dims u32[], f64 payload).

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for (name, e) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(e.tensor.shape.len() as u32).to_le_bytes());
            for &d in &e.tensor.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in &e.tensor.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        let mut cur = std::io::Cursor::new(bytes);
        let mut magic = [0u8; 4];
        cur.read_exact(&mut magic)
            .map_err(|_| NnError::Checkpoint("truncated header".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(NnError::Checkpoint(format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut cur)?;
        if version != CHECKPOINT_VERSION {
            return Err(NnError::Checkpoint(format!("unsupported version {version}")));
        }
        let mut params = NetParams::new();
        while (cur.position() as usize) < bytes.len() {
            let name_len = read_u32(&mut cur)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            cur.read_exact(&mut name_bytes)
                .map_err(|_| NnError::Checkpoint("truncated name".into()))?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| NnError::Checkpoint("non-utf8 name".into()))?;
            let rank = read_u32(&mut cur)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(&mut cur)? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            let mut buf = [0u8; 8];
            for _ in 0..n {
                cur.read_exact(&mut buf)
                    .map_err(|_| NnError::Checkpoint("truncated payload".into()))?;
                data.push(f64::from_le_bytes(buf));
            }
            params.insert(&name, Tensor::new(shape, data));
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        crate::util::atomic_write(path, &self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

fn read_u32(cur: &mut std::io::Cursor<&[u8]>) -> Result<u32, NnError> {
    let mut buf = [0u8; 4];
    cur.read_exact(&mut buf)
        .map_err(|_| NnError::Checkpoint("truncated u32".into()))?;
    Ok(u32::from_le_bytes(buf))
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

/// He-style uniform fan-in init: W ~ U(-sqrt(6/fan_in), sqrt(6/fan_in)),
/// biases zero. Weight layout is [fan_in, fan_out] so forward is `x W + b`.
pub fn init_mlp<R: Rng>(params: &mut NetParams, prefix: &str, spec: &MlpSpec, rng: &mut R) {
    for (i, (fan_in, fan_out)) in spec.layer_dims().iter().enumerate() {
        let limit = (6.0 / *fan_in as f64).sqrt();
        let data: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-limit..limit))
            .collect();
        params.insert(&format!("{prefix}.w{i}"), Tensor::matrix(*fan_in, *fan_out, data));
        params.insert(&format!("{prefix}.b{i}"), Tensor::vector(vec![0.0; *fan_out]));
    }
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

/// Taped MLP forward. Input may be a vector [in] or a batch [B, in].
pub fn forward_mlp(
    tape: &mut Tape,
    params: &NetParams,
    prefix: &str,
    spec: &MlpSpec,
    input: Var,
) -> Result<Var, NnError> {
    let in_width = *tape.shape(input).last().unwrap_or(&0);
    if in_width != spec.input {
        return Err(NnError::Dimension {
            layer: format!("{prefix}.w0"),
            expected: spec.input,
            got: in_width,
        });
    }
    let dims = spec.layer_dims();
    let n_layers = dims.len();
    let mut h = input;
    for (i, (fan_in, _)) in dims.iter().enumerate() {
        let cur_width = *tape.shape(h).last().unwrap_or(&0);
        if cur_width != *fan_in {
            return Err(NnError::Dimension {
                layer: format!("{prefix}.w{i}"),
                expected: *fan_in,
                got: cur_width,
            });
        }
        let w = tape.param(params, &format!("{prefix}.w{i}"));
        let b = tape.param(params, &format!("{prefix}.b{i}"));
        let z = tape.matmul(h, w);
        h = if tape.shape(z).len() == 2 {
            tape.add_row(z, b)
        } else {
            tape.add(z, b)
        };
        if i + 1 < n_layers {
            h = spec.activation.apply(tape, h);
        }
    }
    Ok(h)
}

/// Tape-free MLP forward over a row-major batch, bit-identical to
/// [`forward_mlp`] for the same parameters.
pub fn forward_mlp_plain(
    params: &NetParams,
    prefix: &str,
    spec: &MlpSpec,
    input: &[f64],
    batch: usize,
) -> Vec<f64> {
    assert_eq!(input.len(), batch * spec.input, "plain forward input size");
    let dims = spec.layer_dims();
    let n_layers = dims.len();
    let mut h = input.to_vec();
    for (i, (fan_in, fan_out)) in dims.iter().enumerate() {
        let w = params.get(&format!("{prefix}.w{i}"));
        let b = params.get(&format!("{prefix}.b{i}"));
        let mut z = vec![0.0; batch * fan_out];
        matmul_into(&h, &w.data, batch, *fan_in, *fan_out, &mut z);
        for r in 0..batch {
            for c in 0..*fan_out {
                z[r * fan_out + c] += b.data[c];
            }
        }
        if i + 1 < n_layers {
            spec.activation.apply_plain(&mut z);
        }
        h = z;
    }
    h
}

// ---------------------------------------------------------------------------
// Graph convolution
// ---------------------------------------------------------------------------

/// D^-1/2 (A + I) D^-1/2 for a symmetric 0/1 adjacency without self-loops.
pub fn normalized_adjacency(adj: &Tensor) -> Result<Tensor, NnError> {
    if adj.shape.len() != 2 || adj.shape[0] != adj.shape[1] {
        let rows = *adj.shape.first().unwrap_or(&0);
        let cols = *adj.shape.get(1).unwrap_or(&0);
        return Err(NnError::AdjacencyNotSquare { rows, cols });
    }
    let n = adj.shape[0];
    for i in 0..n {
        for j in 0..n {
            let v = adj.data[i * n + j];
            if v != 0.0 && v != 1.0 {
                return Err(NnError::AdjacencyInvalid(format!("entry ({i},{j}) = {v}")));
            }
            if (adj.data[i * n + j] - adj.data[j * n + i]).abs() != 0.0 {
                return Err(NnError::AdjacencyInvalid(format!("not symmetric at ({i},{j})")));
            }
        }
    }
    let mut a_hat = adj.data.clone();
    for i in 0..n {
        a_hat[i * n + i] += 1.0;
    }
    let deg: Vec<f64> = (0..n)
        .map(|i| (0..n).map(|j| a_hat[i * n + j]).sum::<f64>())
        .collect();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = a_hat[i * n + j] / (deg[i] * deg[j]).sqrt();
        }
    }
    Ok(Tensor::matrix(n, n, out))
}

/// One graph-convolution layer: `act(Ahat X W + b)` with the degree
/// normalization computed internally from the raw adjacency.
pub fn graph_conv(
    tape: &mut Tape,
    params: &NetParams,
    prefix: &str,
    adjacency: &Tensor,
    feats: Var,
    activation: Activation,
) -> Result<Var, NnError> {
    let a_hat = normalized_adjacency(adjacency)?;
    let w_name = format!("{prefix}.w");
    let w_shape = params.get(&w_name).shape.clone();
    let fshape = tape.shape(feats).to_vec();
    if fshape.len() != 2 || fshape[1] != w_shape[0] {
        return Err(NnError::Dimension {
            layer: w_name,
            expected: w_shape[0],
            got: *fshape.last().unwrap_or(&0),
        });
    }
    if fshape[0] != a_hat.shape[0] {
        return Err(NnError::AdjacencyInvalid(format!(
            "adjacency is for {} nodes, features carry {}",
            a_hat.shape[0], fshape[0]
        )));
    }
    let a = tape.constant(&a_hat);
    let w = tape.param(params, &w_name);
    let b = tape.param(params, &format!("{prefix}.b"));
    let agg = tape.matmul(a, feats);
    let lin = tape.matmul(agg, w);
    let biased = tape.add_row(lin, b);
    Ok(activation.apply(tape, biased))
}

pub fn init_graph_conv<R: Rng>(
    params: &mut NetParams,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) {
    let limit = (6.0 / fan_in as f64).sqrt();
    let data: Vec<f64> = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-limit..limit))
        .collect();
    params.insert(&format!("{prefix}.w"), Tensor::matrix(fan_in, fan_out, data));
    params.insert(&format!("{prefix}.b"), Tensor::vector(vec![0.0; fan_out]));
}
