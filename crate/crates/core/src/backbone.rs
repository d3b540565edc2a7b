//! Representation backbone: frame-synchronous audio and visual encoders plus
//! a shared transformer context encoder with three input modes (A, V, AV).
//!
//! The audio encoder reduces 100 frames/s log-mel input to the 25 frames/s
//! video rate with two stride-2 convolutions, so audio and visual feature
//! sequences of an aligned pair always share the time axis.

use crate::corpus::{LipClip, Mel, AUDIO_FRAMES_PER_VIDEO_FRAME};
use crate::error::{AvError, Result};
use crate::nn::{self, Binder, ParamSet};
use crate::tensor::{Tape, Var};
use ndarray::{Array2, ArrayD, IxDyn};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

/// Floor added before log compression of linear-magnitude mels.
pub const LOG_FLOOR: f64 = 1e-3;

/// Log domain used by all encoders; corpus mels are linear magnitudes.
pub fn log_compress(mel: &Mel) -> Array2<f64> {
    mel.mapv(|x| (x + LOG_FLOOR).ln())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    A,
    V,
    AV,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mode::A => write!(f, "A"),
            Mode::V => write!(f, "V"),
            Mode::AV => write!(f, "AV"),
        }
    }
}

/// Frame rate semantics of a feature sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameRate {
    /// Backbone outputs: 25 frames/s.
    Fps25,
    /// After temporal upsampling: 50 frames/s.
    Fps50,
}

/// Encoder output: `values[T x D]` plus its frame-rate tag.
#[derive(Clone, Debug)]
pub struct FeatureSequence {
    pub values: Array2<f64>,
    pub rate: FrameRate,
}

impl FeatureSequence {
    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub feat_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub mel_bins: usize,
    pub dropout: f64,
    /// Audio conv channel plan (first, second stage).
    pub audio_channels: (usize, usize),
    /// Channel width of the visual stem and residual trunk.
    pub visual_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            feat_dim: 64,
            num_blocks: 2,
            num_heads: 4,
            mel_bins: 80,
            dropout: 0.1,
            audio_channels: (32, 64),
            visual_channels: 32,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feat_dim % self.num_heads != 0 {
            return Err(AvError::Config(format!(
                "feat_dim {} not divisible by num_heads {}",
                self.feat_dim, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(AvError::Config("dropout must be in [0,1)".into()));
        }
        Ok(())
    }

    fn ffn_hidden(&self) -> usize {
        4 * self.feat_dim
    }

    /// Mel bin count after the two stride-2 convolutions.
    fn reduced_bins(&self) -> usize {
        self.mel_bins.div_ceil(4)
    }
}

pub struct Backbone {
    pub cfg: BackboneConfig,
}

impl Backbone {
    pub fn new(cfg: BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Backbone { cfg })
    }

    /// Initialize `audio.*`, `visual.*` and `context.*` namespaces.
    pub fn init_params(&self, params: &mut ParamSet, rng: &mut ChaCha20Rng) {
        let d = self.cfg.feat_dim;
        let (c1, c2) = self.cfg.audio_channels;
        nn::init_conv2d(params, rng, "audio.conv1", c1, 1, 3, 3);
        nn::init_conv2d(params, rng, "audio.conv2", c2, c1, 3, 3);
        nn::init_linear(params, rng, "audio.proj", c2 * self.cfg.reduced_bins(), d);

        let cv = self.cfg.visual_channels;
        nn::init_conv3d(params, rng, "visual.stem", cv, 1, 5, 3, 3);
        for b in 1..=2 {
            nn::init_conv2d(params, rng, &format!("visual.block{b}.conv1"), cv, cv, 3, 3);
            nn::init_conv2d(params, rng, &format!("visual.block{b}.conv2"), cv, cv, 3, 3);
        }
        nn::init_linear(params, rng, "visual.proj", cv, d);

        nn::init_linear(params, rng, "context.fuse", 2 * d, d);
        for i in 0..self.cfg.num_blocks {
            nn::init_encoder_block(
                params,
                rng,
                &format!("context.block{i}"),
                d,
                self.cfg.ffn_hidden(),
            );
        }
        nn::init_layer_norm(params, "context.ln_out", d);
    }

    // ---- audio ---------------------------------------------------------

    /// Tape route of the audio encoder: log-mel `[4T x B]` -> `[T x D]`.
    pub fn audio_nodes(&self, tape: &mut Tape, binder: &mut Binder, mel: &Mel) -> Result<Var> {
        if mel.nrows() % AUDIO_FRAMES_PER_VIDEO_FRAME != 0 {
            return Err(AvError::Shape(format!(
                "mel rows {} not divisible by {AUDIO_FRAMES_PER_VIDEO_FRAME}",
                mel.nrows()
            )));
        }
        if mel.nrows() == 0 {
            return Err(AvError::Shape("empty mel".into()));
        }
        if mel.ncols() != self.cfg.mel_bins {
            return Err(AvError::Shape(format!(
                "mel bins {} do not match config {}",
                mel.ncols(),
                self.cfg.mel_bins
            )));
        }
        let (rows, bins) = (mel.nrows(), mel.ncols());
        let log_mel = log_compress(mel);
        let x = tape.value(
            ArrayD::from_shape_vec(IxDyn(&[1, 1, rows, bins]), log_mel.into_raw_vec_and_offset().0)
                .unwrap(),
        );
        let w1 = binder.get(tape, "audio.conv1.w");
        let b1 = binder.get(tape, "audio.conv1.b");
        let h = tape.conv2d(x, w1, b1, (2, 2), (1, 1));
        let h = tape.gelu(h);
        let w2 = binder.get(tape, "audio.conv2.w");
        let b2 = binder.get(tape, "audio.conv2.b");
        let h = tape.conv2d(h, w2, b2, (2, 2), (1, 1));
        let h = tape.gelu(h);
        let flat = tape.flatten_time(h);
        Ok(nn::linear(tape, binder, "audio.proj", flat))
    }

    // ---- visual --------------------------------------------------------

    /// 3D stem only (temporal kernel 5, stride 1): `[T x H x W]` ->
    /// `[T x C x H x W]`. Exposed so the temporal receptive field can be
    /// probed in isolation.
    pub fn video_stem_nodes(&self, tape: &mut Tape, binder: &mut Binder, video: &LipClip) -> Var {
        let (t, h, w) = {
            let s = video.shape();
            (s[0], s[1], s[2])
        };
        let x = tape.value(
            ArrayD::from_shape_vec(
                IxDyn(&[1, t, h, w]),
                video.iter().cloned().collect::<Vec<f64>>(),
            )
            .unwrap(),
        );
        let ws = binder.get(tape, "visual.stem.w");
        let bs = binder.get(tape, "visual.stem.b");
        let y = tape.conv3d_same(x, ws, bs); // [C, T, H, W]
        let y = tape.gelu(y);
        tape.swap_axes01_4d(y) // [T, C, H, W]
    }

    /// Full visual encoder: stem, two per-frame residual conv blocks,
    /// global average pool, projection to D. Temporal length is preserved.
    pub fn video_nodes(&self, tape: &mut Tape, binder: &mut Binder, video: &LipClip) -> Result<Var> {
        if video.shape()[0] == 0 {
            return Err(AvError::Shape("empty video clip".into()));
        }
        let mut x = self.video_stem_nodes(tape, binder, video);
        for b in 1..=2 {
            let w1 = binder.get(tape, &format!("visual.block{b}.conv1.w"));
            let b1 = binder.get(tape, &format!("visual.block{b}.conv1.b"));
            let h = tape.conv2d(x, w1, b1, (1, 1), (1, 1));
            let h = tape.relu(h);
            let w2 = binder.get(tape, &format!("visual.block{b}.conv2.w"));
            let b2 = binder.get(tape, &format!("visual.block{b}.conv2.b"));
            let h = tape.conv2d(h, w2, b2, (1, 1), (1, 1));
            let s = tape.add(x, h);
            x = tape.relu(s);
        }
        let pooled = tape.gap_hw(x); // [T, C]
        Ok(nn::linear(tape, binder, "visual.proj", pooled))
    }

    // ---- shared context encoder -----------------------------------------

    /// Transformer context pass over pre-context features. Mode AV fuses by
    /// feature-axis concatenation and a linear map back to D; all modes run
    /// the same transformer stack.
    pub fn context_nodes(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        f_a: Option<Var>,
        f_v: Option<Var>,
        mode: Mode,
        dropout_rng: Option<&mut ChaCha20Rng>,
    ) -> Result<Var> {
        let x = match mode {
            Mode::A => f_a.ok_or_else(|| AvError::Mode("mode A requires audio features".into()))?,
            Mode::V => {
                f_v.ok_or_else(|| AvError::Mode("mode V requires visual features".into()))?
            }
            Mode::AV => {
                let a = f_a
                    .ok_or_else(|| AvError::Mode("mode AV requires audio features".into()))?;
                let v = f_v
                    .ok_or_else(|| AvError::Mode("mode AV requires visual features".into()))?;
                if tape.shape(a)[0] != tape.shape(v)[0] {
                    return Err(AvError::Shape(format!(
                        "AV fusion length mismatch: {} vs {}",
                        tape.shape(a)[0],
                        tape.shape(v)[0]
                    )));
                }
                let cat = tape.concat_cols(a, v);
                nn::linear(tape, binder, "context.fuse", cat)
            }
        };
        let mut x = nn::add_positions(tape, x);
        let t = tape.shape(x)[0];
        let d = self.cfg.feat_dim;
        let mut rng = dropout_rng;
        for i in 0..self.cfg.num_blocks {
            let masks = rng.as_deref_mut().map(|r| {
                (
                    nn::dropout_mask(tape, r, &[t, d], self.cfg.dropout),
                    nn::dropout_mask(tape, r, &[t, d], self.cfg.dropout),
                )
            });
            x = nn::encoder_block(
                tape,
                binder,
                &format!("context.block{i}"),
                x,
                self.cfg.num_heads,
                masks,
            );
        }
        Ok(nn::layer_norm(tape, binder, "context.ln_out", x))
    }

    // ---- plain-array wrappers (inference) ---------------------------------

    pub fn encode_audio(&self, params: &ParamSet, mel: &Mel) -> Result<FeatureSequence> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(params);
        let out = self.audio_nodes(&mut tape, &mut binder, mel)?;
        Ok(FeatureSequence {
            values: to2(tape.get(out)),
            rate: FrameRate::Fps25,
        })
    }

    pub fn encode_video(&self, params: &ParamSet, video: &LipClip) -> Result<FeatureSequence> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(params);
        let out = self.video_nodes(&mut tape, &mut binder, video)?;
        Ok(FeatureSequence {
            values: to2(tape.get(out)),
            rate: FrameRate::Fps25,
        })
    }

    pub fn encode_context(
        &self,
        params: &ParamSet,
        f_a: Option<&FeatureSequence>,
        f_v: Option<&FeatureSequence>,
        mode: Mode,
    ) -> Result<FeatureSequence> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(params);
        let a = f_a.map(|f| tape.value(f.values.clone().into_dyn()));
        let v = f_v.map(|f| tape.value(f.values.clone().into_dyn()));
        let out = self.context_nodes(&mut tape, &mut binder, a, v, mode, None)?;
        Ok(FeatureSequence {
            values: to2(tape.get(out)),
            rate: FrameRate::Fps25,
        })
    }
}

fn to2(a: &ArrayD<f64>) -> Array2<f64> {
    a.clone().into_dimensionality::<ndarray::Ix2>().unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{gen_utterance, CorpusConfig};
    use crate::gradcheck::max_grad_error;
    use rand::SeedableRng;

    fn tiny_cfg() -> BackboneConfig {
        BackboneConfig {
            feat_dim: 8,
            num_blocks: 1,
            num_heads: 2,
            mel_bins: 8,
            dropout: 0.0,
            audio_channels: (2, 3),
            visual_channels: 3,
        }
    }

    fn desk() -> (Backbone, ParamSet) {
        let bb = Backbone::new(BackboneConfig::default()).unwrap();
        let mut params = ParamSet::new();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        bb.init_params(&mut params, &mut rng);
        (bb, params)
    }

    #[test]
    fn audio_time_reduction_is_exactly_four() {
        let (bb, params) = desk();
        let mel = Mel::from_shape_fn((128, 80), |(i, j)| ((i + j) as f64 * 0.01).sin().abs());
        let f = bb.encode_audio(&params, &mel).unwrap();
        assert_eq!(f.values.shape(), &[32, 64]);

        let tiny = Mel::from_elem((4, 80), 0.5);
        let f = bb.encode_audio(&params, &tiny).unwrap();
        assert_eq!(f.values.shape(), &[1, 64]);

        let bad = Mel::zeros((126, 80));
        assert_eq!(bb.encode_audio(&params, &bad).unwrap_err().code(), "E_SHAPE");
    }

    #[test]
    fn video_encoder_preserves_length_and_is_deterministic() {
        let (bb, params) = desk();
        let clip = LipClip::zeros((10, 16, 16));
        let a = bb.encode_video(&params, &clip).unwrap();
        let b = bb.encode_video(&params, &clip).unwrap();
        assert_eq!(a.values.shape(), &[10, 64]);
        assert_eq!(a.values, b.values, "all-zero clip encodes deterministically");
        assert!(a.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn stem_perturbation_stays_within_temporal_receptive_field() {
        let (bb, params) = desk();
        let cfg = CorpusConfig::default();
        let clip = gen_utterance(&cfg, 0, 4).unwrap().video;
        let t = clip.shape()[0];
        let mut other = clip.clone();
        let mid = t / 2;
        for h in 0..other.shape()[1] {
            for w in 0..other.shape()[2] {
                other[[mid, h, w]] = 1.0 - other[[mid, h, w]];
            }
        }
        let stem = |v: &LipClip| {
            let mut tape = Tape::new();
            let mut binder = Binder::new(&params);
            let out = bb.video_stem_nodes(&mut tape, &mut binder, v);
            tape.get(out).clone()
        };
        let y1 = stem(&clip);
        let y2 = stem(&other);
        let diff = &y1 - &y2;
        for ti in 0..t {
            let frame_diff: f64 = diff
                .index_axis(ndarray::Axis(0), ti)
                .iter()
                .map(|x| x.abs())
                .sum();
            let within = (ti as i64 - mid as i64).abs() <= 2;
            if within {
                continue; // inside the kernel-5 receptive field, changes allowed
            }
            assert!(
                frame_diff < 1e-12,
                "frame {ti} outside +-2 of {mid} changed by {frame_diff}"
            );
        }
        // the perturbed frame itself must actually change
        let center: f64 = diff
            .index_axis(ndarray::Axis(0), mid)
            .iter()
            .map(|x| x.abs())
            .sum();
        assert!(center > 1e-6);
    }

    #[test]
    fn aligned_pair_has_matching_lengths() {
        let (bb, params) = desk();
        let cfg = CorpusConfig::default();
        let s = gen_utterance(&cfg, 0, 9).unwrap();
        let fa = bb.encode_audio(&params, &s.mel).unwrap();
        let fv = bb.encode_video(&params, &s.video).unwrap();
        assert_eq!(fa.len(), fv.len(), "temporal alignment contract");
    }

    #[test]
    fn context_modes_and_errors() {
        let (bb, params) = desk();
        let cfg = CorpusConfig::default();
        let s = gen_utterance(&cfg, 0, 5).unwrap();
        let fa = bb.encode_audio(&params, &s.mel).unwrap();
        let fv = bb.encode_video(&params, &s.video).unwrap();
        let t = fa.len();

        let ca = bb.encode_context(&params, Some(&fa), None, Mode::A).unwrap();
        assert_eq!(ca.values.shape(), &[t, 64]);
        let cv = bb.encode_context(&params, None, Some(&fv), Mode::V).unwrap();
        assert_eq!(cv.values.shape(), &[t, 64]);
        let cav = bb
            .encode_context(&params, Some(&fa), Some(&fv), Mode::AV)
            .unwrap();
        assert_eq!(cav.values.shape(), &[t, 64]);

        assert_eq!(
            bb.encode_context(&params, None, None, Mode::A)
                .unwrap_err()
                .code(),
            "E_MODE"
        );
        let short = FeatureSequence {
            values: Array2::zeros((t - 1, 64)),
            rate: FrameRate::Fps25,
        };
        assert_eq!(
            bb.encode_context(&params, Some(&fa), Some(&short), Mode::AV)
                .unwrap_err()
                .code(),
            "E_SHAPE"
        );
    }

    #[test]
    fn backbone_gradients_match_finite_differences() {
        // tiny configuration per the gradient-oracle budget (T<=4, D<=8)
        let bb = Backbone::new(tiny_cfg()).unwrap();
        let mut params = ParamSet::new();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        bb.init_params(&mut params, &mut rng);
        // move off the zero-bias init so no ReLU sits exactly on its kink
        crate::gradcheck::jitter_params(&mut params, 0.02);
        let mel = Mel::from_shape_fn((8, 8), |(i, j)| ((i * 3 + j) as f64 * 0.2).sin().abs());
        let video = LipClip::from_shape_fn((2, 5, 5), |(t, h, w)| {
            (((t * 11 + h * 3 + w) as f64) * 0.17).sin() * 0.5 + 0.5
        });

        let names: Vec<String> = params.names().cloned().collect();
        let arrays: Vec<ArrayD<f64>> = names.iter().map(|n| params.get(n).clone()).collect();
        let err = max_grad_error(&arrays, |t, vars| {
            let local = ParamSet::new();
            let mut binder = Binder::new(&local);
            for (n, v) in names.iter().zip(vars) {
                binder.bind_existing(n, *v);
            }
            let fa = bb.audio_nodes(t, &mut binder, &mel).unwrap();
            let fv = bb.video_nodes(t, &mut binder, &video).unwrap();
            let ctx = bb
                .context_nodes(t, &mut binder, Some(fa), Some(fv), Mode::AV, None)
                .unwrap();
            let sq = t.mul(ctx, ctx);
            t.mean_all(sq)
        });
        assert!(err < 1e-4, "backbone gradient error {err:.2e}");
    }
}
