//! Deterministic synthetic corpus of paired (mel, lip video, transcript)
//! utterances.
//!
//! Every content token deterministically renders (a) a contiguous energized
//! band of mel bins over its audio frames and (b) a mouth ellipse whose
//! aperture and width encode the token, with a per-speaker brightness/marker
//! offset. Token identity is therefore recoverable from either modality
//! alone by nearest-template matching, which keeps recognition failures
//! attributable to models rather than data.
//!
//! Mel values are linear magnitudes (non-negative); noise mixing happens in
//! this linear-energy domain and encoders apply log compression on input.

use crate::checkpoint::{read_tensor, write_tensor, Dtype};
use crate::error::{AvError, Result};
use ndarray::{Array2, Array3, ArrayD, Ix2, Ix3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

/// Linear-magnitude mel spectrogram, `[4T x mel_bins]` at 100 frames/s.
pub type Mel = Array2<f64>;
/// Grayscale lip clip in `[0,1]`, `[T x H x W]` at 25 frames/s.
pub type LipClip = Array3<f64>;
/// Content-token transcript (indices into the corpus vocabulary).
pub type Tokens = Vec<usize>;

pub const AUDIO_FRAMES_PER_VIDEO_FRAME: usize = 4;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub vocab_size: usize,
    pub frames_per_token: usize,
    pub mel_bins: usize,
    pub image_size: usize,
    pub utterance_len_range: (usize, usize),
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            vocab_size: 16,
            frames_per_token: 2,
            mel_bins: 80,
            image_size: 16,
            utterance_len_range: (4, 12),
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(AvError::Config("vocab_size must be >= 2".into()));
        }
        if self.frames_per_token < 1 {
            return Err(AvError::Config("frames_per_token must be >= 1".into()));
        }
        if self.mel_bins < 8 {
            return Err(AvError::Config("mel_bins must be >= 8".into()));
        }
        if self.image_size < 8 {
            return Err(AvError::Config("image_size must be >= 8".into()));
        }
        let (lo, hi) = self.utterance_len_range;
        if lo < 1 || hi < lo {
            return Err(AvError::Config(
                "utterance_len_range must satisfy 1 <= lo <= hi".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct UtteranceSample {
    pub id: usize,
    pub speaker_id: usize,
    pub tokens: Tokens,
    pub mel: Mel,
    pub video: LipClip,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairProvenance {
    Aligned,
    Shifted,
    CrossSpeaker,
}

/// One contrastive training pair: audio and video sources plus a sync label.
#[derive(Clone, Debug)]
pub struct SyncPair {
    pub mel: Mel,
    pub video: LipClip,
    pub label: bool,
    pub provenance: PairProvenance,
}

// ---- deterministic hashing --------------------------------------------------

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Deterministic uniform in [0,1) from a pair of integers.
fn hash01(a: u64, b: u64) -> f64 {
    let h = splitmix64(a.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(b));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

// ---- rendering --------------------------------------------------------------

/// Token -> (aperture level, width level) on a near-square grid.
fn token_shape(config: &CorpusConfig, token: usize) -> (f64, f64) {
    let v = config.vocab_size;
    let a_levels = (v as f64).sqrt().ceil() as usize;
    let w_levels = v.div_ceil(a_levels);
    let ai = token % a_levels;
    let wi = token / a_levels;
    let frac = |i: usize, n: usize| {
        if n <= 1 {
            0.5
        } else {
            i as f64 / (n - 1) as f64
        }
    };
    (frac(ai, a_levels), frac(wi, w_levels))
}

/// Per-frame mouth opening within a token (phase p of frames_per_token).
fn aperture_envelope(p: usize, fpt: usize) -> f64 {
    0.6 + 0.4 * (p + 1) as f64 / fpt as f64
}

/// Per-audio-frame amplitude envelope within a token.
fn mel_envelope(q: usize, frames: usize) -> f64 {
    0.7 + 0.3 * (std::f64::consts::PI * (q as f64 + 0.5) / frames as f64).sin()
}

fn speaker_background(speaker: usize) -> f64 {
    0.5 + 0.25 * hash01(0xBACC, speaker as u64)
}

fn speaker_marker(speaker: usize) -> f64 {
    0.3 + 0.6 * hash01(0x3A2B, speaker as u64)
}

fn speaker_gain(speaker: usize) -> f64 {
    0.8 + 0.4 * hash01(0x9A1B, speaker as u64)
}

/// Render one video frame for (token, phase, speaker).
fn render_frame(config: &CorpusConfig, token: usize, phase: usize, speaker: usize) -> Array2<f64> {
    let n = config.image_size;
    let scale = n as f64 / 16.0;
    let (a_frac, w_frac) = token_shape(config, token);
    let ry = (1.0 + 3.0 * a_frac) * aperture_envelope(phase, config.frames_per_token) * scale;
    let rx = (2.0 + 4.5 * w_frac) * scale;
    let cy = n as f64 * 0.62;
    let cx = n as f64 * 0.5;
    let bg = speaker_background(speaker);
    let marker = speaker_marker(speaker);

    let mut img = Array2::from_elem((n, n), bg);
    // speaker marker patch in the upper-left "face" region
    let m = (2.0 * scale).round().max(1.0) as usize;
    for y in 1..=m {
        for x in 1..=m {
            img[[y, x]] = marker;
        }
    }
    // mouth ellipse (dark on bright face)
    for y in 0..n {
        for x in 0..n {
            let dy = (y as f64 - cy) / ry.max(0.6);
            let dx = (x as f64 - cx) / rx.max(0.6);
            if dy * dy + dx * dx <= 1.0 {
                img[[y, x]] = 0.1;
            }
        }
    }
    img
}

/// Mouth-image templates for a speaker: `templates[token][phase]`.
pub fn video_templates(config: &CorpusConfig, speaker: usize) -> Vec<Vec<Array2<f64>>> {
    (0..config.vocab_size)
        .map(|k| {
            (0..config.frames_per_token)
                .map(|p| render_frame(config, k, p, speaker))
                .collect()
        })
        .collect()
}

/// Mel band template for one token over its audio frames, `[4*fpt x bins]`.
fn render_mel_block(config: &CorpusConfig, token: usize, speaker: usize) -> Array2<f64> {
    let frames = AUDIO_FRAMES_PER_VIDEO_FRAME * config.frames_per_token;
    let bins = config.mel_bins;
    let band_width = (bins / config.vocab_size).max(2);
    let start = (token * (bins - band_width)) / (config.vocab_size - 1).max(1);
    let gain = speaker_gain(speaker);
    let mut block = Array2::from_elem((frames, bins), 0.01 * gain);
    for q in 0..frames {
        let amp = gain * mel_envelope(q, frames);
        for b in start..start + band_width {
            block[[q, b]] = amp;
        }
    }
    block
}

pub fn mel_templates(config: &CorpusConfig, speaker: usize) -> Vec<Array2<f64>> {
    (0..config.vocab_size)
        .map(|k| render_mel_block(config, k, speaker))
        .collect()
}

/// Generate one utterance. Pure in (config, speaker_id, seed): repeated
/// calls are bit-identical.
pub fn gen_utterance(
    config: &CorpusConfig,
    speaker_id: usize,
    seed: u64,
) -> Result<UtteranceSample> {
    config.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let (lo, hi) = config.utterance_len_range;
    let len = rng.gen_range(lo..=hi);
    let tokens: Tokens = (0..len).map(|_| rng.gen_range(0..config.vocab_size)).collect();
    Ok(render_utterance(config, speaker_id, &tokens, seed as usize))
}

/// Deterministic rendering of a fixed token sequence.
pub fn render_utterance(
    config: &CorpusConfig,
    speaker_id: usize,
    tokens: &[usize],
    id: usize,
) -> UtteranceSample {
    let fpt = config.frames_per_token;
    let t_video = tokens.len() * fpt;
    let t_audio = AUDIO_FRAMES_PER_VIDEO_FRAME * t_video;
    let n = config.image_size;

    let mut video = Array3::zeros((t_video, n, n));
    let mut mel = Array2::zeros((t_audio, config.mel_bins));
    for (ti, &tok) in tokens.iter().enumerate() {
        for p in 0..fpt {
            let frame = render_frame(config, tok, p, speaker_id);
            video
                .index_axis_mut(ndarray::Axis(0), ti * fpt + p)
                .assign(&frame);
        }
        let block = render_mel_block(config, tok, speaker_id);
        let row0 = ti * fpt * AUDIO_FRAMES_PER_VIDEO_FRAME;
        for q in 0..block.nrows() {
            for b in 0..config.mel_bins {
                mel[[row0 + q, b]] = block[[q, b]];
            }
        }
    }
    UtteranceSample {
        id,
        speaker_id,
        tokens: tokens.to_vec(),
        mel,
        video,
    }
}

/// Nearest-template decode of a video clip (speaker-conditional templates).
pub fn decode_video_tokens(config: &CorpusConfig, video: &LipClip, speaker: usize) -> Tokens {
    let fpt = config.frames_per_token;
    let templates = video_templates(config, speaker);
    let n_tokens = video.shape()[0] / fpt;
    let mut out = Vec::with_capacity(n_tokens);
    for ti in 0..n_tokens {
        let mut best = (f64::INFINITY, 0usize);
        for (k, phases) in templates.iter().enumerate() {
            let mut d = 0.0;
            for (p, tpl) in phases.iter().enumerate() {
                let frame = video.index_axis(ndarray::Axis(0), ti * fpt + p);
                for (a, b) in frame.iter().zip(tpl.iter()) {
                    d += (a - b) * (a - b);
                }
            }
            if d < best.0 {
                best = (d, k);
            }
        }
        out.push(best.1);
    }
    out
}

/// Nearest-template decode of a mel spectrogram.
pub fn decode_mel_tokens(config: &CorpusConfig, mel: &Mel, speaker: usize) -> Tokens {
    let frames = AUDIO_FRAMES_PER_VIDEO_FRAME * config.frames_per_token;
    let templates = mel_templates(config, speaker);
    let n_tokens = mel.nrows() / frames;
    let mut out = Vec::with_capacity(n_tokens);
    for ti in 0..n_tokens {
        let mut best = (f64::INFINITY, 0usize);
        for (k, tpl) in templates.iter().enumerate() {
            let mut d = 0.0;
            for q in 0..frames {
                for b in 0..config.mel_bins {
                    let diff = mel[[ti * frames + q, b]] - tpl[[q, b]];
                    d += diff * diff;
                }
            }
            if d < best.0 {
                best = (d, k);
            }
        }
        out.push(best.1);
    }
    out
}

// ---- noise mixing -----------------------------------------------------------

fn mean_square(m: &Mel) -> f64 {
    m.iter().map(|&x| x * x).sum::<f64>() / m.len() as f64
}

/// Tile/crop a noise mel to the given number of rows (bins must match).
pub fn fit_noise(noise: &Mel, rows: usize) -> Mel {
    let (nr, nc) = (noise.nrows(), noise.ncols());
    let mut out = Array2::zeros((rows, nc));
    for r in 0..rows {
        let src = r % nr;
        for c in 0..nc {
            out[[r, c]] = noise[[src, c]];
        }
    }
    out
}

/// Mix `noise` into `clean` at the given SNR (dB) in the linear-energy
/// domain. `snr_db = +inf` is the "clean" sentinel and returns `clean`
/// unchanged. Energy is the mean squared magnitude over all cells.
pub fn mix_noise(clean: &Mel, noise: &Mel, snr_db: f64) -> Result<Mel> {
    if snr_db.is_infinite() && snr_db > 0.0 {
        return Ok(clean.clone());
    }
    if clean.shape() != noise.shape() {
        return Err(AvError::Shape(format!(
            "mix_noise shape mismatch: clean {:?} vs noise {:?}",
            clean.shape(),
            noise.shape()
        )));
    }
    let e_clean = mean_square(clean);
    let e_noise = mean_square(noise);
    if e_clean == 0.0 {
        return Err(AvError::DegenerateInput(
            "clean signal has zero energy".into(),
        ));
    }
    if e_noise == 0.0 {
        return Err(AvError::DegenerateInput(
            "noise signal has zero energy".into(),
        ));
    }
    let gain = (e_clean / (e_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    Ok(clean + &noise.mapv(|x| x * gain))
}

/// SNR (dB) of a mixture relative to its known clean component.
pub fn measure_snr_db(clean: &Mel, mixed: &Mel) -> f64 {
    let residual = mixed - clean;
    10.0 * (mean_square(clean) / mean_square(&residual)).log10()
}

// ---- pair construction --------------------------------------------------------

fn circular_shift_video(video: &LipClip, shift: usize) -> LipClip {
    let t = video.shape()[0];
    let mut out = video.clone();
    for i in 0..t {
        out.index_axis_mut(ndarray::Axis(0), i)
            .assign(&video.index_axis(ndarray::Axis(0), (i + shift) % t));
    }
    out
}

/// Build one sync pair per sample. Negatives (`floor(negative_fraction * n)`
/// of them) split 50/50 between same-sample circular temporal shifts and
/// cross-utterance audio/video swaps cropped to the shorter length; the
/// shifted arm takes the odd one out.
pub fn make_pairs(
    samples: &[UtteranceSample],
    negative_fraction: f64,
    min_shift: usize,
    seed: u64,
) -> Result<Vec<SyncPair>> {
    if samples.is_empty() {
        return Err(AvError::PairConstruction("no samples".into()));
    }
    if !(0.0..=1.0).contains(&negative_fraction) {
        return Err(AvError::Config(
            "negative_fraction must be in [0,1]".into(),
        ));
    }
    if min_shift < 1 {
        return Err(AvError::Config("min_shift must be >= 1".into()));
    }
    let n = samples.len();
    let n_neg = (negative_fraction * n as f64).floor() as usize;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);

    // choose negative indices deterministically
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let neg_set: Vec<usize> = order[..n_neg].to_vec();
    let n_shift = n_neg.div_ceil(2);
    let mut kind = vec![0u8; n]; // 0 = positive, 1 = shifted, 2 = cross
    for (rank, &idx) in neg_set.iter().enumerate() {
        kind[idx] = if rank < n_shift { 1 } else { 2 };
    }

    let mut pairs = Vec::with_capacity(n);
    for (i, s) in samples.iter().enumerate() {
        let t = s.video.shape()[0];
        match kind[i] {
            0 => pairs.push(SyncPair {
                mel: s.mel.clone(),
                video: s.video.clone(),
                label: true,
                provenance: PairProvenance::Aligned,
            }),
            1 => {
                if t >= 2 * min_shift {
                    let shift = rng.gen_range(min_shift..=t - min_shift);
                    pairs.push(SyncPair {
                        mel: s.mel.clone(),
                        video: circular_shift_video(&s.video, shift),
                        label: false,
                        provenance: PairProvenance::Shifted,
                    });
                } else if n >= 2 {
                    pairs.push(cross_pair(samples, i, &mut rng));
                } else {
                    return Err(AvError::PairConstruction(format!(
                        "sample {i}: T={t} too short for min_shift={min_shift} and no \
                         other utterance available for a cross pair"
                    )));
                }
            }
            _ => {
                if n < 2 {
                    return Err(AvError::PairConstruction(
                        "cross-speaker negative requires >= 2 samples".into(),
                    ));
                }
                pairs.push(cross_pair(samples, i, &mut rng));
            }
        }
    }
    Ok(pairs)
}

fn cross_pair(samples: &[UtteranceSample], i: usize, rng: &mut ChaCha20Rng) -> SyncPair {
    let s = &samples[i];
    // prefer a different speaker, fall back to any other utterance
    let other_speaker: Vec<usize> = (0..samples.len())
        .filter(|&j| j != i && samples[j].speaker_id != s.speaker_id)
        .collect();
    let candidates: Vec<usize> = if other_speaker.is_empty() {
        (0..samples.len()).filter(|&j| j != i).collect()
    } else {
        other_speaker
    };
    let j = candidates[rng.gen_range(0..candidates.len())];
    let o = &samples[j];
    let t = s.video.shape()[0].min(o.video.shape()[0]);
    let mel = s
        .mel
        .slice(ndarray::s![..AUDIO_FRAMES_PER_VIDEO_FRAME * t, ..])
        .to_owned();
    let video = o.video.slice(ndarray::s![..t, .., ..]).to_owned();
    SyncPair {
        mel,
        video,
        label: false,
        provenance: PairProvenance::CrossSpeaker,
    }
}

// ---- corpus on disk ------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IndexRecord {
    pub id: usize,
    pub speaker: usize,
    pub tokens: String,
    pub mel_path: String,
    pub video_path: String,
}

pub fn symbol_name(i: usize) -> String {
    if i < 26 {
        ((b'a' + i as u8) as char).to_string()
    } else {
        format!("s{i}")
    }
}

pub fn parse_symbol(s: &str) -> Result<usize> {
    if s.len() == 1 {
        let c = s.as_bytes()[0];
        if c.is_ascii_lowercase() {
            return Ok((c - b'a') as usize);
        }
    }
    if let Some(rest) = s.strip_prefix('s') {
        if let Ok(v) = rest.parse::<usize>() {
            return Ok(v);
        }
    }
    Err(AvError::CorpusFormat(format!("bad token symbol {s:?}")))
}

pub fn tokens_to_string(tokens: &[usize]) -> String {
    tokens
        .iter()
        .map(|&t| symbol_name(t))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn tokens_from_string(s: &str) -> Result<Tokens> {
    s.split_whitespace().map(parse_symbol).collect()
}

/// Generate `count` utterances with speakers assigned round-robin.
/// Per-utterance seeds derive from `config.seed` and the utterance id, so
/// any sub-range regenerates identically.
pub fn generate_corpus(
    config: &CorpusConfig,
    count: usize,
    num_speakers: usize,
    id_offset: usize,
) -> Result<Vec<UtteranceSample>> {
    config.validate()?;
    if num_speakers == 0 {
        return Err(AvError::Config("num_speakers must be >= 1".into()));
    }
    (0..count)
        .map(|i| {
            let id = id_offset + i;
            let seed = splitmix64(config.seed ^ splitmix64(id as u64));
            let mut s = gen_utterance(config, id % num_speakers, seed)?;
            s.id = id;
            Ok(s)
        })
        .collect()
}

/// Write a split directory: `index.jsonl` plus one tensor file pair per
/// utterance (f32 payloads).
pub fn save_split(dir: &Path, samples: &[UtteranceSample]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut index = String::new();
    for s in samples {
        let mel_path = format!("{:05}.mel.ten", s.id);
        let video_path = format!("{:05}.vid.ten", s.id);
        write_tensor(&dir.join(&mel_path), &s.mel.clone().into_dyn(), Dtype::F32)?;
        write_tensor(
            &dir.join(&video_path),
            &s.video.clone().into_dyn(),
            Dtype::F32,
        )?;
        let rec = IndexRecord {
            id: s.id,
            speaker: s.speaker_id,
            tokens: tokens_to_string(&s.tokens),
            mel_path,
            video_path,
        };
        index.push_str(&serde_json::to_string(&rec)?);
        index.push('\n');
    }
    fs::write(dir.join("index.jsonl"), index)?;
    Ok(())
}

pub fn load_split(dir: &Path) -> Result<Vec<UtteranceSample>> {
    let index_path = dir.join("index.jsonl");
    let text = fs::read_to_string(&index_path).map_err(|e| {
        AvError::MissingArtifact(format!("corpus index {}: {e}", index_path.display()))
    })?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let rec: IndexRecord = serde_json::from_str(line)?;
        let mel: ArrayD<f64> = read_tensor(&dir.join(&rec.mel_path))?;
        let video: ArrayD<f64> = read_tensor(&dir.join(&rec.video_path))?;
        out.push(UtteranceSample {
            id: rec.id,
            speaker_id: rec.speaker,
            tokens: tokens_from_string(&rec.tokens)?,
            mel: mel
                .into_dimensionality::<Ix2>()
                .map_err(|e| AvError::CorpusFormat(format!("mel rank: {e}")))?,
            video: video
                .into_dimensionality::<Ix3>()
                .map_err(|e| AvError::CorpusFormat(format!("video rank: {e}")))?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn utterance_shapes_satisfy_rate_contract() {
        let cfg = CorpusConfig::default();
        let s = gen_utterance(&cfg, 0, 7).unwrap();
        let t = s.video.shape()[0];
        assert!((8..=24).contains(&t), "T={t} outside [8,24]");
        assert_eq!(s.mel.nrows(), 4 * t, "mel rows must be 4x video frames");
        assert_eq!(s.mel.ncols(), cfg.mel_bins);
        assert_eq!(s.video.shape()[1], cfg.image_size);
        assert!(s.video.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(s.mel.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn generation_is_bit_identical() {
        let cfg = CorpusConfig::default();
        let a = gen_utterance(&cfg, 3, 1234).unwrap();
        let b = gen_utterance(&cfg, 3, 1234).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.mel, b.mel);
        assert_eq!(a.video, b.video);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = CorpusConfig {
            vocab_size: 1,
            ..CorpusConfig::default()
        };
        assert_eq!(
            gen_utterance(&cfg, 0, 1).unwrap_err().code(),
            "E_CONFIG"
        );
    }

    #[test]
    fn both_modalities_decode_to_the_transcript() {
        let cfg = CorpusConfig::default();
        for seed in [7u64, 8, 9] {
            for speaker in [0usize, 1, 5] {
                let s = gen_utterance(&cfg, speaker, seed).unwrap();
                assert_eq!(
                    decode_video_tokens(&cfg, &s.video, speaker),
                    s.tokens,
                    "video decode"
                );
                assert_eq!(
                    decode_mel_tokens(&cfg, &s.mel, speaker),
                    s.tokens,
                    "mel decode"
                );
            }
        }
    }

    #[test]
    fn speakers_differ_in_pixels_but_not_in_decoded_tokens() {
        let cfg = CorpusConfig::default();
        let tokens = vec![0usize, 5, 11, 3, 15, 8];
        let a = render_utterance(&cfg, 0, &tokens, 0);
        let b = render_utterance(&cfg, 1, &tokens, 1);
        assert_ne!(a.video, b.video, "speaker offset must change pixels");
        assert_eq!(decode_video_tokens(&cfg, &a.video, 0), tokens);
        assert_eq!(decode_video_tokens(&cfg, &b.video, 1), tokens);
    }

    #[test]
    fn mix_noise_hits_requested_snr() {
        let cfg = CorpusConfig::default();
        let clean = gen_utterance(&cfg, 0, 21).unwrap().mel;
        let other = gen_utterance(&cfg, 1, 22).unwrap().mel;
        let noise = fit_noise(&other, clean.nrows());
        for snr in [-5.0, 0.0, 5.0] {
            let mixed = mix_noise(&clean, &noise, snr).unwrap();
            assert!(
                (measure_snr_db(&clean, &mixed) - snr).abs() < 1e-6,
                "snr {snr} not reproduced"
            );
        }
        // snr 0: post-mix energy ratio of clean to scaled noise is exactly 1
        let mixed = mix_noise(&clean, &noise, 0.0).unwrap();
        let scaled = &mixed - &clean;
        let ratio = clean.iter().map(|x| x * x).sum::<f64>()
            / scaled.iter().map(|x| x * x).sum::<f64>();
        assert!((ratio - 1.0).abs() < 1e-6);
    }

    #[test]
    fn mix_noise_sentinel_and_degenerate_inputs() {
        let cfg = CorpusConfig::default();
        let clean = gen_utterance(&cfg, 0, 30).unwrap().mel;
        let noise = fit_noise(&gen_utterance(&cfg, 1, 31).unwrap().mel, clean.nrows());
        let out = mix_noise(&clean, &noise, f64::INFINITY).unwrap();
        assert_eq!(out, clean);

        let zeros = Mel::zeros(clean.raw_dim());
        assert_eq!(
            mix_noise(&zeros, &noise, 0.0).unwrap_err().code(),
            "E_DEGENERATE_INPUT"
        );
        assert_eq!(
            mix_noise(&clean, &zeros, 0.0).unwrap_err().code(),
            "E_DEGENERATE_INPUT"
        );
    }

    #[test]
    fn make_pairs_counts_and_provenance() {
        let cfg = CorpusConfig::default();
        let samples = generate_corpus(&cfg, 100, 6, 0).unwrap();

        let all_pos = make_pairs(&samples, 0.0, 2, 9).unwrap();
        assert!(all_pos
            .iter()
            .all(|p| p.label && p.provenance == PairProvenance::Aligned));

        let mixed = make_pairs(&samples, 0.5, 2, 9).unwrap();
        let negs = mixed.iter().filter(|p| !p.label).count();
        assert_eq!(negs, 50, "exactly floor(0.5 * 100) negatives");
        let shifted = mixed
            .iter()
            .filter(|p| p.provenance == PairProvenance::Shifted)
            .count();
        let cross = mixed
            .iter()
            .filter(|p| p.provenance == PairProvenance::CrossSpeaker)
            .count();
        assert_eq!(shifted, 25);
        assert_eq!(cross, 25);
        for p in &mixed {
            assert_eq!(p.mel.nrows(), 4 * p.video.shape()[0]);
        }
    }

    #[test]
    fn make_pairs_single_short_sample_fails() {
        let cfg = CorpusConfig {
            utterance_len_range: (1, 1),
            frames_per_token: 2,
            ..CorpusConfig::default()
        };
        let samples = generate_corpus(&cfg, 1, 1, 0).unwrap();
        // T = 2 <= 2*min_shift for min_shift=2 and no cross candidate
        let err = make_pairs(&samples, 1.0, 2, 1).unwrap_err();
        assert_eq!(err.code(), "E_PAIR_CONSTRUCTION");
    }

    #[test]
    fn split_roundtrip_and_byte_identical_index() {
        let cfg = CorpusConfig::default();
        let samples = generate_corpus(&cfg, 5, 2, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let d1 = dir.path().join("one");
        let d2 = dir.path().join("two");
        save_split(&d1, &samples).unwrap();
        save_split(&d2, &samples).unwrap();
        let i1 = std::fs::read(d1.join("index.jsonl")).unwrap();
        let i2 = std::fs::read(d2.join("index.jsonl")).unwrap();
        assert_eq!(i1, i2, "index files must be byte-identical");

        let loaded = load_split(&d1).unwrap();
        assert_eq!(loaded.len(), samples.len());
        for (a, b) in loaded.iter().zip(&samples) {
            assert_eq!(a.tokens, b.tokens);
            assert_eq!(a.speaker_id, b.speaker_id);
            assert_eq!(a.mel.shape(), b.mel.shape());
            // f32 payload quantization
            for (x, y) in a.mel.iter().zip(b.mel.iter()) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }
}
