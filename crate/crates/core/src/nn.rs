//! Named parameter storage and the neural building blocks shared by the
//! backbone, adapter and SR head: linear layers, layer norm, multi-head
//! attention, transformer blocks, sinusoidal positions.
//!
//! Parameters live in a [`ParamSet`] keyed by dot-separated names
//! (`"audio.conv1.w"`). A forward pass binds the needed parameters onto a
//! fresh tape through [`Binder`]; after `backward`, gradients are collected
//! back by name. Freezing a namespace is then just filtering names at update
//! time, and checksums/checkpoints are iteration over a sorted map.

use crate::tensor::{Tape, Var};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;

pub const LN_EPS: f64 = 1e-5;

/// All model parameters, keyed by dot-separated names.
#[derive(Clone, Default)]
pub struct ParamSet {
    map: BTreeMap<String, ArrayD<f64>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<f64>) {
        let prev = self.map.insert(name.to_string(), value);
        assert!(prev.is_none(), "duplicate parameter name {name}");
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<f64>)> {
        self.map.iter_mut()
    }

    pub fn num_values(&self) -> usize {
        self.map.values().map(|a| a.len()).sum()
    }

    /// Merge another set under no-overlap assumption (panics on collision).
    pub fn absorb(&mut self, other: ParamSet) {
        for (k, v) in other.map {
            assert!(
                self.map.insert(k.clone(), v).is_none(),
                "parameter collision on {k}"
            );
        }
    }

    /// SHA-256 over names, shapes and little-endian payloads in sorted name
    /// order, restricted to names starting with `prefix` ("" = everything).
    pub fn checksum(&self, prefix: &str) -> String {
        let mut hasher = Sha256::new();
        for (name, value) in &self.map {
            if !name.starts_with(prefix) {
                continue;
            }
            hasher.update(name.as_bytes());
            hasher.update([0u8]);
            for &d in value.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            for &x in value.as_slice().unwrap() {
                hasher.update(x.to_le_bytes());
            }
        }
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Binds parameters onto a tape on demand and remembers the mapping so named
/// gradients can be read back after the backward pass.
pub struct Binder<'p> {
    params: &'p ParamSet,
    bound: BTreeMap<String, Var>,
}

impl<'p> Binder<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Binder {
            params,
            bound: BTreeMap::new(),
        }
    }

    pub fn get(&mut self, tape: &mut Tape, name: &str) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let v = tape.value(self.params.get(name).clone());
        self.bound.insert(name.to_string(), v);
        v
    }

    /// Pre-bind a name to an existing tape node. Used by gradient-check
    /// harnesses that create all leaves up front.
    pub fn bind_existing(&mut self, name: &str, var: Var) {
        self.bound.insert(name.to_string(), var);
    }

    /// Collect gradients for every bound parameter. Parameters that did not
    /// participate in the loss get zero gradients.
    pub fn named_grads(&self, grads: &crate::tensor::Grads) -> BTreeMap<String, ArrayD<f64>> {
        self.bound
            .iter()
            .map(|(name, &var)| {
                let g = grads
                    .get(var)
                    .cloned()
                    .unwrap_or_else(|| ArrayD::zeros(self.params.get(name).raw_dim()));
                (name.clone(), g)
            })
            .collect()
    }
}

// ---- initialization ------------------------------------------------------

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(shape), 1.0)
}

/// Uniform(-limit, limit) init with fan-in scaling (Glorot-style).
pub fn uniform_init(rng: &mut ChaCha20Rng, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let limit = (1.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let vals: Vec<f64> = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), vals).unwrap()
}

/// Insert a linear layer `prefix.{w,b}` mapping `in_dim -> out_dim`.
pub fn init_linear(
    params: &mut ParamSet,
    rng: &mut ChaCha20Rng,
    prefix: &str,
    in_dim: usize,
    out_dim: usize,
) {
    params.insert(
        &format!("{prefix}.w"),
        uniform_init(rng, &[in_dim, out_dim], in_dim),
    );
    params.insert(&format!("{prefix}.b"), zeros(&[out_dim]));
}

pub fn init_linear_zero(params: &mut ParamSet, prefix: &str, in_dim: usize, out_dim: usize) {
    params.insert(&format!("{prefix}.w"), zeros(&[in_dim, out_dim]));
    params.insert(&format!("{prefix}.b"), zeros(&[out_dim]));
}

pub fn init_layer_norm(params: &mut ParamSet, prefix: &str, dim: usize) {
    params.insert(&format!("{prefix}.g"), ones(&[dim]));
    params.insert(&format!("{prefix}.b"), zeros(&[dim]));
}

pub fn init_conv2d(
    params: &mut ParamSet,
    rng: &mut ChaCha20Rng,
    prefix: &str,
    cout: usize,
    cin: usize,
    kh: usize,
    kw: usize,
) {
    params.insert(
        &format!("{prefix}.w"),
        uniform_init(rng, &[cout, cin, kh, kw], cin * kh * kw),
    );
    params.insert(&format!("{prefix}.b"), zeros(&[cout]));
}

pub fn init_conv3d(
    params: &mut ParamSet,
    rng: &mut ChaCha20Rng,
    prefix: &str,
    cout: usize,
    cin: usize,
    kt: usize,
    kh: usize,
    kw: usize,
) {
    params.insert(
        &format!("{prefix}.w"),
        uniform_init(rng, &[cout, cin, kt, kh, kw], cin * kt * kh * kw),
    );
    params.insert(&format!("{prefix}.b"), zeros(&[cout]));
}

/// Attention projections `prefix.{wq,wk,wv,wo}` (+ biases). `zero_out`
/// zero-initializes the output projection so the block starts as identity
/// under its residual connection.
pub fn init_attention(
    params: &mut ParamSet,
    rng: &mut ChaCha20Rng,
    prefix: &str,
    q_dim: usize,
    kv_dim: usize,
    model_dim: usize,
    zero_out: bool,
) {
    init_linear(params, rng, &format!("{prefix}.q"), q_dim, model_dim);
    init_linear(params, rng, &format!("{prefix}.k"), kv_dim, model_dim);
    init_linear(params, rng, &format!("{prefix}.v"), kv_dim, model_dim);
    if zero_out {
        init_linear_zero(params, &format!("{prefix}.o"), model_dim, model_dim);
    } else {
        init_linear(params, rng, &format!("{prefix}.o"), model_dim, model_dim);
    }
}

pub fn init_ffn(
    params: &mut ParamSet,
    rng: &mut ChaCha20Rng,
    prefix: &str,
    dim: usize,
    hidden: usize,
    zero_out: bool,
) {
    init_linear(params, rng, &format!("{prefix}.l1"), dim, hidden);
    if zero_out {
        init_linear_zero(params, &format!("{prefix}.l2"), hidden, dim);
    } else {
        init_linear(params, rng, &format!("{prefix}.l2"), hidden, dim);
    }
}

/// Pre-norm transformer encoder block parameters under `prefix`.
pub fn init_encoder_block(
    params: &mut ParamSet,
    rng: &mut ChaCha20Rng,
    prefix: &str,
    dim: usize,
    ffn_hidden: usize,
) {
    init_layer_norm(params, &format!("{prefix}.ln1"), dim);
    init_attention(params, rng, &format!("{prefix}.attn"), dim, dim, dim, false);
    init_layer_norm(params, &format!("{prefix}.ln2"), dim);
    init_ffn(params, rng, &format!("{prefix}.ffn"), dim, ffn_hidden, false);
}

pub fn init_decoder_block(
    params: &mut ParamSet,
    rng: &mut ChaCha20Rng,
    prefix: &str,
    dim: usize,
    ffn_hidden: usize,
) {
    init_layer_norm(params, &format!("{prefix}.ln1"), dim);
    init_attention(params, rng, &format!("{prefix}.self"), dim, dim, dim, false);
    init_layer_norm(params, &format!("{prefix}.ln2"), dim);
    init_attention(params, rng, &format!("{prefix}.cross"), dim, dim, dim, false);
    init_layer_norm(params, &format!("{prefix}.ln3"), dim);
    init_ffn(params, rng, &format!("{prefix}.ffn"), dim, ffn_hidden, false);
}

// ---- forward helpers -------------------------------------------------------

pub fn linear(tape: &mut Tape, binder: &mut Binder, prefix: &str, x: Var) -> Var {
    let w = binder.get(tape, &format!("{prefix}.w"));
    let b = binder.get(tape, &format!("{prefix}.b"));
    let xw = tape.matmul(x, w);
    tape.add_row_vec(xw, b)
}

pub fn layer_norm(tape: &mut Tape, binder: &mut Binder, prefix: &str, x: Var) -> Var {
    let g = binder.get(tape, &format!("{prefix}.g"));
    let b = binder.get(tape, &format!("{prefix}.b"));
    tape.layer_norm(x, g, b, LN_EPS)
}

pub fn ffn(tape: &mut Tape, binder: &mut Binder, prefix: &str, x: Var) -> Var {
    let h = linear(tape, binder, &format!("{prefix}.l1"), x);
    let h = tape.gelu(h);
    linear(tape, binder, &format!("{prefix}.l2"), h)
}

/// Multi-head attention. `q_in[Tq x Dq]` drives queries; `kv_in[Tk x Dkv]`
/// drives keys and values. With `causal` each query position attends only to
/// key positions `<=` its own (requires Tq == Tk).
pub fn attention(
    tape: &mut Tape,
    binder: &mut Binder,
    prefix: &str,
    q_in: Var,
    kv_in: Var,
    num_heads: usize,
    causal: bool,
) -> Var {
    let q = linear(tape, binder, &format!("{prefix}.q"), q_in);
    let k = linear(tape, binder, &format!("{prefix}.k"), kv_in);
    let v = linear(tape, binder, &format!("{prefix}.v"), kv_in);
    let model_dim = tape.shape(q)[1];
    assert_eq!(model_dim % num_heads, 0, "model dim not divisible by heads");
    let dh = model_dim / num_heads;
    let tq = tape.shape(q)[0];
    let tk = tape.shape(k)[0];

    let mask = if causal {
        assert_eq!(tq, tk, "causal mask requires square attention");
        let mut m = vec![0.0; tq * tk];
        for i in 0..tq {
            for j in (i + 1)..tk {
                m[i * tk + j] = -1e30;
            }
        }
        Some(tape.value(ArrayD::from_shape_vec(IxDyn(&[tq, tk]), m).unwrap()))
    } else {
        None
    };

    let scale = 1.0 / (dh as f64).sqrt();
    let mut head_outs = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let qh = tape.slice_cols(q, h * dh, dh);
        let kh = tape.slice_cols(k, h * dh, dh);
        let vh = tape.slice_cols(v, h * dh, dh);
        let kt = tape.transpose2(kh);
        let scores = tape.matmul(qh, kt);
        let scores = tape.scale(scores, scale);
        let scores = match mask {
            Some(m) => tape.add(scores, m),
            None => scores,
        };
        let attn = tape.softmax_rows(scores);
        head_outs.push(tape.matmul(attn, vh));
    }
    let mut ctx = head_outs[0];
    for &h in &head_outs[1..] {
        ctx = tape.concat_cols(ctx, h);
    }
    linear(tape, binder, &format!("{prefix}.o"), ctx)
}

/// Pre-norm encoder block: x + Attn(LN(x)); x + FFN(LN(x)).
/// `drop_masks` optionally applies dropout to the two residual branches.
pub fn encoder_block(
    tape: &mut Tape,
    binder: &mut Binder,
    prefix: &str,
    x: Var,
    num_heads: usize,
    drop_masks: Option<(Var, Var)>,
) -> Var {
    let n1 = layer_norm(tape, binder, &format!("{prefix}.ln1"), x);
    let mut a = attention(tape, binder, &format!("{prefix}.attn"), n1, n1, num_heads, false);
    if let Some((m, _)) = drop_masks {
        a = tape.mul(a, m);
    }
    let x = tape.add(x, a);
    let n2 = layer_norm(tape, binder, &format!("{prefix}.ln2"), x);
    let mut f = ffn(tape, binder, &format!("{prefix}.ffn"), n2);
    if let Some((_, m)) = drop_masks {
        f = tape.mul(f, m);
    }
    tape.add(x, f)
}

/// Pre-norm decoder block with causal self-attention and cross-attention.
pub fn decoder_block(
    tape: &mut Tape,
    binder: &mut Binder,
    prefix: &str,
    x: Var,
    memory: Var,
    num_heads: usize,
) -> Var {
    let n1 = layer_norm(tape, binder, &format!("{prefix}.ln1"), x);
    let a = attention(tape, binder, &format!("{prefix}.self"), n1, n1, num_heads, true);
    let x = tape.add(x, a);
    let n2 = layer_norm(tape, binder, &format!("{prefix}.ln2"), x);
    let c = attention(tape, binder, &format!("{prefix}.cross"), n2, memory, num_heads, false);
    let x = tape.add(x, c);
    let n3 = layer_norm(tape, binder, &format!("{prefix}.ln3"), x);
    let f = ffn(tape, binder, &format!("{prefix}.ffn"), n3);
    tape.add(x, f)
}

/// Fixed sinusoidal positional encodings, `[len x dim]`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> ArrayD<f64> {
    let mut out = vec![0.0; len * dim];
    for t in 0..len {
        for i in 0..dim / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            out[t * dim + 2 * i] = (t as f64 * freq).sin();
            out[t * dim + 2 * i + 1] = (t as f64 * freq).cos();
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[len, dim]), out).unwrap()
}

pub fn add_positions(tape: &mut Tape, x: Var) -> Var {
    let (t, d) = (tape.shape(x)[0], tape.shape(x)[1]);
    let pe = tape.value(sinusoidal_positions(t, d));
    tape.add(x, pe)
}

/// Inverted-Bernoulli dropout mask as a constant node; `keep = 1 - p`.
pub fn dropout_mask(
    tape: &mut Tape,
    rng: &mut ChaCha20Rng,
    shape: &[usize],
    p: f64,
) -> Var {
    let n: usize = shape.iter().product();
    let keep = 1.0 - p;
    let vals: Vec<f64> = (0..n)
        .map(|_| {
            if rng.gen::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        })
        .collect();
    tape.value(ArrayD::from_shape_vec(IxDyn(shape), vals).unwrap())
}
