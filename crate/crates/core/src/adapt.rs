//! Feature Adaptation Module: bridges 25 frames/s backbone features to the
//! 50 frames/s frozen SR head.
//!
//! Pipeline: a Delta Upsampler doubles the temporal resolution by building
//! odd/even interpolated frames from a temporal-difference path, then a
//! projection + multi-head attention + gated feed-forward stack adapts the
//! stream to the head's feature space. The difference projections, the
//! attention output projection and the gated FFN's output layer all start at
//! zero, so a freshly initialized adapter is exactly a repetition upsample
//! followed by one linear map.

use crate::error::{AvError, Result};
use crate::nn::{self, Binder, ParamSet};
use crate::tensor::{Tape, Var};
use ndarray::{Array2, ArrayD, IxDyn};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    SelfAttn,
    Cross,
}

/// Upsampling arm: the shipped differential upsampler or plain repetition
/// (kept for ablation).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpsamplerKind {
    Delta,
    Repeat,
}

/// Feed-forward arm: gated (shipped), plain transformer FFN, or none.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FfnKind {
    Gated,
    Plain,
    None,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub in_dim: usize,
    pub out_dim: usize,
    pub num_heads: usize,
    pub hidden_mult: f64,
    pub attention_mode: AttentionMode,
    pub upsampler: UpsamplerKind,
    pub ffn: FfnKind,
    pub use_mha: bool,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            in_dim: 64,
            out_dim: 64,
            num_heads: 4,
            hidden_mult: 4.0,
            attention_mode: AttentionMode::SelfAttn,
            upsampler: UpsamplerKind::Delta,
            ffn: FfnKind::Gated,
            use_mha: true,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.out_dim % self.num_heads != 0 {
            return Err(AvError::Config(format!(
                "out_dim {} not divisible by num_heads {}",
                self.out_dim, self.num_heads
            )));
        }
        if self.hidden_mult <= 0.0 {
            return Err(AvError::Config("hidden_mult must be positive".into()));
        }
        Ok(())
    }

    fn hidden(&self) -> usize {
        (self.hidden_mult * self.out_dim as f64).round() as usize
    }

    /// Ablation arms mapped to config flags.
    pub fn with_variant(mut self, variant: AdapterVariant) -> Self {
        match variant {
            AdapterVariant::None => {
                self.upsampler = UpsamplerKind::Repeat;
                self.ffn = FfnKind::None;
                self.use_mha = false;
            }
            AdapterVariant::FfnMha => {
                self.upsampler = UpsamplerKind::Delta;
                self.ffn = FfnKind::Plain;
                self.use_mha = true;
            }
            AdapterVariant::GatedFfnMhaNoRep => {
                self.upsampler = UpsamplerKind::Repeat;
                self.ffn = FfnKind::Gated;
                self.use_mha = true;
            }
            AdapterVariant::Full => {
                self.upsampler = UpsamplerKind::Delta;
                self.ffn = FfnKind::Gated;
                self.use_mha = true;
            }
        }
        self
    }
}

/// The four adapter ablation arms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterVariant {
    None,
    FfnMha,
    GatedFfnMhaNoRep,
    Full,
}

impl std::str::FromStr for AdapterVariant {
    type Err = AvError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AdapterVariant::None),
            "ffn_mha" => Ok(AdapterVariant::FfnMha),
            "gateffn_mha_norep" => Ok(AdapterVariant::GatedFfnMhaNoRep),
            "full" => Ok(AdapterVariant::Full),
            other => Err(AvError::Config(format!("unknown adapter variant {other:?}"))),
        }
    }
}

pub struct Adapter {
    pub cfg: AdapterConfig,
}

impl Adapter {
    pub fn new(cfg: AdapterConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Adapter { cfg })
    }

    /// Initialize the `adapter.*` namespace.
    pub fn init_params(&self, params: &mut ParamSet, rng: &mut ChaCha20Rng) {
        let din = self.cfg.in_dim;
        let dout = self.cfg.out_dim;
        // central-difference start for the temporal differential kernel
        let mut k = ndarray::ArrayD::zeros(IxDyn(&[3, din]));
        for d in 0..din {
            k[[0, d]] = -0.5;
            k[[2, d]] = 0.5;
        }
        params.insert("adapter.delta.k", k);
        nn::init_linear_zero(params, "adapter.delta.pe", din, din);
        nn::init_linear_zero(params, "adapter.delta.po", din, din);
        nn::init_linear(params, rng, "adapter.proj", din, dout);
        nn::init_layer_norm(params, "adapter.ln_attn", dout);
        nn::init_layer_norm(params, "adapter.ln_q", dout);
        nn::init_attention(params, rng, "adapter.attn", dout, dout, dout, true);
        nn::init_linear(params, rng, "adapter.gffn.l1", dout, self.cfg.hidden());
        nn::init_linear_zero(params, "adapter.gffn.l2", self.cfg.hidden(), dout);
    }

    /// Delta upsampling: `[T x D]` -> `[2T x D]` interleaving even/odd
    /// interpolated frames built from a temporal-difference path.
    pub fn delta_upsample_nodes(&self, tape: &mut Tape, binder: &mut Binder, f: Var) -> Var {
        let k = binder.get(tape, "adapter.delta.k");
        let delta = tape.depthwise_tconv3(f, k);
        let pe = nn::linear(tape, binder, "adapter.delta.pe", delta);
        let po = nn::linear(tape, binder, "adapter.delta.po", delta);
        let even = tape.add(f, pe);
        let odd = tape.add(f, po);
        tape.interleave_rows(even, odd)
    }

    /// Nearest-neighbor repetition upsample (ablation arm / test oracle).
    pub fn repeat_upsample_nodes(&self, tape: &mut Tape, f: Var) -> Var {
        tape.interleave_rows(f, f)
    }

    /// Gated feed-forward: `x + sigmoid(FFN(x)) * FFN(x)` with one shared
    /// FFN evaluation feeding both gate and value.
    pub fn gated_ffn_nodes(&self, tape: &mut Tape, binder: &mut Binder, x: Var) -> Var {
        let h = nn::linear(tape, binder, "adapter.gffn.l1", x);
        let h = tape.gelu(h);
        let f = nn::linear(tape, binder, "adapter.gffn.l2", h);
        let gate = tape.sigmoid(f);
        let gated = tape.mul(gate, f);
        tape.add(x, gated)
    }

    fn plain_ffn_nodes(&self, tape: &mut Tape, binder: &mut Binder, x: Var) -> Var {
        let h = nn::linear(tape, binder, "adapter.gffn.l1", x);
        let h = tape.gelu(h);
        let f = nn::linear(tape, binder, "adapter.gffn.l2", h);
        tape.add(x, f)
    }

    /// Projection + attention + feed-forward over an upsampled stream.
    /// In cross mode the query stream is the SR head's own acoustic encoding
    /// and the visual stream supplies keys and values.
    pub fn adapt_features_nodes(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        f_up: Var,
        audio_query: Option<Var>,
    ) -> Result<Var> {
        let x = nn::linear(tape, binder, "adapter.proj", f_up);
        let x = match (self.cfg.use_mha, self.cfg.attention_mode) {
            (false, _) => x,
            (true, AttentionMode::SelfAttn) => {
                let n = nn::layer_norm(tape, binder, "adapter.ln_attn", x);
                let a = nn::attention(
                    tape,
                    binder,
                    "adapter.attn",
                    n,
                    n,
                    self.cfg.num_heads,
                    false,
                );
                tape.add(x, a)
            }
            (true, AttentionMode::Cross) => {
                let q = audio_query.ok_or_else(|| {
                    AvError::Mode("cross attention requires an audio query stream".into())
                })?;
                if tape.shape(q)[0] != tape.shape(x)[0] {
                    return Err(AvError::Shape(format!(
                        "cross attention length mismatch: query {} vs visual {}",
                        tape.shape(q)[0],
                        tape.shape(x)[0]
                    )));
                }
                let nq = nn::layer_norm(tape, binder, "adapter.ln_q", q);
                let nx = nn::layer_norm(tape, binder, "adapter.ln_attn", x);
                let a = nn::attention(
                    tape,
                    binder,
                    "adapter.attn",
                    nq,
                    nx,
                    self.cfg.num_heads,
                    false,
                );
                tape.add(x, a)
            }
        };
        Ok(match self.cfg.ffn {
            FfnKind::Gated => self.gated_ffn_nodes(tape, binder, x),
            FfnKind::Plain => self.plain_ffn_nodes(tape, binder, x),
            FfnKind::None => x,
        })
    }

    /// Full adapter: upsample then adapt. Input `[T x in_dim]`, output
    /// `[2T x out_dim]`.
    pub fn forward_nodes(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        f: Var,
        audio_query: Option<Var>,
    ) -> Result<Var> {
        let up = match self.cfg.upsampler {
            UpsamplerKind::Delta => self.delta_upsample_nodes(tape, binder, f),
            UpsamplerKind::Repeat => self.repeat_upsample_nodes(tape, f),
        };
        self.adapt_features_nodes(tape, binder, up, audio_query)
    }

    /// Plain-array wrapper for inference.
    pub fn forward(
        &self,
        params: &ParamSet,
        f: &Array2<f64>,
        audio_query: Option<&Array2<f64>>,
    ) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(params);
        let fv = tape.value(f.clone().into_dyn());
        let q = audio_query.map(|a| tape.value(a.clone().into_dyn()));
        let out = self.forward_nodes(&mut tape, &mut binder, fv, q)?;
        Ok(tape
            .get(out)
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::max_grad_error;
    use rand::SeedableRng;

    fn tiny() -> (Adapter, ParamSet) {
        let cfg = AdapterConfig {
            in_dim: 6,
            out_dim: 8,
            num_heads: 2,
            hidden_mult: 2.0,
            ..AdapterConfig::default()
        };
        let adapter = Adapter::new(cfg).unwrap();
        let mut params = ParamSet::new();
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        adapter.init_params(&mut params, &mut rng);
        (adapter, params)
    }

    fn feats(t: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_fn((t, d), |(i, j)| ((i * 5 + j) as f64 * 0.31).sin())
    }

    #[test]
    fn upsample_doubles_length_for_all_small_t() {
        let (adapter, params) = tiny();
        for t in 1..=64 {
            let f = feats(t, 6);
            let mut tape = Tape::new();
            let mut binder = Binder::new(&params);
            let fv = tape.value(f.into_dyn());
            let up = adapter.delta_upsample_nodes(&mut tape, &mut binder, fv);
            assert_eq!(tape.shape(up), &[2 * t, 6], "T={t}");
        }
    }

    #[test]
    fn zero_initialized_upsampler_is_exact_repetition() {
        let (adapter, params) = tiny();
        let f = feats(7, 6);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&params);
        let fv = tape.value(f.clone().into_dyn());
        let up = adapter.delta_upsample_nodes(&mut tape, &mut binder, fv);
        let got = tape.get(up).clone();

        // oracle: plain nearest-neighbor repetition
        let mut want = Array2::zeros((14, 6));
        for i in 0..7 {
            for j in 0..6 {
                want[[2 * i, j]] = f[[i, j]];
                want[[2 * i + 1, j]] = f[[i, j]];
            }
        }
        assert_eq!(got, want.into_dyn(), "bit-exact repetition at init");
    }

    #[test]
    fn two_frame_case_matches_repetition_oracle() {
        let (adapter, params) = tiny();
        let f = feats(2, 6);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&params);
        let fv = tape.value(f.clone().into_dyn());
        let up = adapter.delta_upsample_nodes(&mut tape, &mut binder, fv);
        let got = tape.get(up).clone();
        for j in 0..6 {
            assert_eq!(got[[0, j]], f[[0, j]]);
            assert_eq!(got[[1, j]], f[[0, j]]);
            assert_eq!(got[[2, j]], f[[1, j]]);
            assert_eq!(got[[3, j]], f[[1, j]]);
        }
    }

    #[test]
    fn gated_ffn_identities() {
        let (adapter, params) = tiny();
        // zero-initialized output layer: exact identity
        let x = feats(4, 8);
        let out = {
            let mut tape = Tape::new();
            let mut binder = Binder::new(&params);
            let xv = tape.value(x.clone().into_dyn());
            let y = adapter.gated_ffn_nodes(&mut tape, &mut binder, xv);
            tape.get(y).clone()
        };
        assert_eq!(out, x.clone().into_dyn(), "zero-init gated FFN is identity");

        // FFN forced to emit 1.0 in one coordinate: x + sigmoid(1)*1.
        // Zero the first layer (gelu(0) = 0) so FFN output is the l2 bias.
        let mut forced = params.clone();
        for v in forced.get_mut("adapter.gffn.l1.w").iter_mut() {
            *v = 0.0;
        }
        for v in forced.get_mut("adapter.gffn.l1.b").iter_mut() {
            *v = 0.0;
        }
        forced.get_mut("adapter.gffn.l2.b")[[3]] = 1.0;
        let out = {
            let mut tape = Tape::new();
            let mut binder = Binder::new(&forced);
            let xv = tape.value(x.clone().into_dyn());
            let y = adapter.gated_ffn_nodes(&mut tape, &mut binder, xv);
            tape.get(y).clone()
        };
        let sigma1 = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((sigma1 - 0.731_058_6).abs() < 1e-6);
        for i in 0..4 {
            for j in 0..8 {
                let want = x[[i, j]] + if j == 3 { sigma1 } else { 0.0 };
                assert!((out[[i, j]] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fresh_adapter_is_projection_of_repeated_input() {
        let (adapter, params) = tiny();
        let f = feats(5, 6);
        let out = adapter.forward(&params, &f, None).unwrap();
        assert_eq!(out.shape(), &[10, 8]);

        // oracle: repeat rows, then the bare projection layer
        let w = params.get("adapter.proj.w");
        let b = params.get("adapter.proj.b");
        let mut deviation: f64 = 0.0;
        let mut norm: f64 = 0.0;
        for i in 0..10 {
            for j in 0..8 {
                let mut want = b[[j]];
                for k in 0..6 {
                    want += f[[i / 2, k]] * w[[k, j]];
                }
                deviation += (out[[i, j]] - want).powi(2);
                norm += want.powi(2);
            }
        }
        assert!(
            (deviation / norm).sqrt() < 1e-6,
            "identity-start deviation ratio too large"
        );
    }

    #[test]
    fn cross_mode_contract_errors() {
        let (adapter, params) = tiny();
        let cross = Adapter::new(AdapterConfig {
            attention_mode: AttentionMode::Cross,
            ..adapter.cfg.clone()
        })
        .unwrap();
        let f = feats(4, 6);
        match cross.forward(&params, &f, None) {
            Err(e) => assert_eq!(e.code(), "E_MODE"),
            Ok(_) => panic!("cross without query must fail"),
        }
        let q = feats(6, 8); // mismatched length (visual upsampled is 8)
        match cross.forward(&params, &f, Some(&q)) {
            Err(e) => assert_eq!(e.code(), "E_SHAPE"),
            Ok(_) => panic!("length mismatch must fail"),
        }
        let q = feats(8, 8);
        let out = cross.forward(&params, &f, Some(&q)).unwrap();
        assert_eq!(out.shape(), &[8, 8]);
    }

    #[test]
    fn adapter_gradients_match_finite_differences() {
        let cfg = AdapterConfig {
            in_dim: 4,
            out_dim: 6,
            num_heads: 2,
            hidden_mult: 1.5,
            ..AdapterConfig::default()
        };
        let adapter = Adapter::new(cfg).unwrap();
        let mut params = ParamSet::new();
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        adapter.init_params(&mut params, &mut rng);
        // move zero-init layers off zero so their gradients are exercised at
        // a generic point
        for name in [
            "adapter.delta.pe.w",
            "adapter.delta.po.w",
            "adapter.attn.o.w",
            "adapter.gffn.l2.w",
        ] {
            let arr = params.get_mut(name);
            for (i, v) in arr.iter_mut().enumerate() {
                *v = ((i as f64) * 0.13).sin() * 0.2;
            }
        }
        let f = feats(3, 4);
        let names: Vec<String> = params.names().cloned().collect();
        let mut arrays: Vec<ArrayD<f64>> = vec![f.into_dyn()];
        arrays.extend(names.iter().map(|n| params.get(n).clone()));
        let err = max_grad_error(&arrays, |t, vars| {
            let local = ParamSet::new();
            let mut binder = Binder::new(&local);
            for (n, v) in names.iter().zip(&vars[1..]) {
                binder.bind_existing(n, *v);
            }
            let y = adapter.forward_nodes(t, &mut binder, vars[0], None).unwrap();
            let sq = t.mul(y, y);
            t.mean_all(sq)
        });
        assert!(err < 1e-4, "adapter gradient error {err:.2e}");
    }
}
