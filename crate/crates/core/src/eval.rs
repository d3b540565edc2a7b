//! Metrics and task-level evaluation: token error rate, sync discrimination
//! AUC, alignment heatmap export with a diagonal-dominance statistic, and
//! the VSR / AVSR / sync / active-speaker evaluation wrappers.

use crate::adapt::{Adapter, AttentionMode};
use crate::backbone::{Backbone, Mode};
use crate::corpus::{fit_noise, make_pairs, mix_noise, Tokens, UtteranceSample};
use crate::error::{AvError, Result};
use crate::nn::ParamSet;
use crate::srhead::SrHead;
use crate::sync::{frame_similarity, EPS_NORM};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

// ---- word error rate -----------------------------------------------------

/// Levenshtein edit distance over content tokens (unit costs).
pub fn edit_distance(reference: &[usize], hypothesis: &[usize]) -> usize {
    let (m, n) = (reference.len(), hypothesis.len());
    let mut prev: Vec<usize> = (0..=n).collect();
    let mut curr = vec![0usize; n + 1];
    for i in 1..=m {
        curr[0] = i;
        for j in 1..=n {
            let cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            curr[j] = (prev[j] + 1).min(curr[j - 1] + 1).min(prev[j - 1] + cost);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[n]
}

/// Token error rate: edit distance divided by reference length. Inputs are
/// content tokens (specials already stripped by the decoding layer).
pub fn wer(reference: &Tokens, hypothesis: &Tokens) -> Result<f64> {
    if reference.is_empty() {
        return Err(AvError::UndefinedMetric(
            "WER undefined for empty reference".into(),
        ));
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

// ---- ROC AUC ---------------------------------------------------------------

/// Area under the ROC curve via the rank statistic; ties count half.
pub fn sync_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(AvError::UndefinedMetric(
            "sync_auc needs both classes present".into(),
        ));
    }
    let mut pairs: Vec<(f64, bool)> = scores.iter().cloned().zip(labels.iter().cloned()).collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    // average ranks over tie groups (1-based ranks)
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < pairs.len() {
        let mut j = i;
        while j < pairs.len() && pairs[j].0 == pairs[i].0 {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0; // mean of ranks i+1..=j
        for p in &pairs[i..j] {
            if p.1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

// ---- heatmaps -----------------------------------------------------------------

/// Write `<stem>.csv` (full-precision matrix with a one-line header) and
/// `<stem>.png` (grayscale, linear map [-1,1] -> [0,255]).
pub fn heatmap_export(s: &Array2<f64>, stem: &Path) -> Result<(PathBuf, PathBuf)> {
    if s.iter().any(|v| !v.is_finite()) {
        return Err(AvError::Config("heatmap matrix must be finite".into()));
    }
    let csv_path = stem.with_extension("csv");
    let png_path = stem.with_extension("png");

    let mut text = format!(
        "# audio_frames={} video_frames={} colormap=linear[-1,1]\n",
        s.nrows(),
        s.ncols()
    );
    for i in 0..s.nrows() {
        let row: Vec<String> = (0..s.ncols()).map(|j| format!("{}", s[[i, j]])).collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    std::fs::write(&csv_path, text)?;

    let mut img = image::GrayImage::new(s.ncols() as u32, s.nrows() as u32);
    for i in 0..s.nrows() {
        for j in 0..s.ncols() {
            let v = ((s[[i, j]] + 1.0) / 2.0 * 255.0).round().clamp(0.0, 255.0) as u8;
            img.put_pixel(j as u32, i as u32, image::Luma([v]));
        }
    }
    img.save(&png_path)
        .map_err(|e| AvError::Io(std::io::Error::other(e)))?;
    Ok((csv_path, png_path))
}

pub fn read_heatmap_csv(path: &Path) -> Result<Array2<f64>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for line in text.lines() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|v| v.trim().parse::<f64>()).collect();
        rows.push(row.map_err(|e| AvError::CorpusFormat(format!("bad heatmap csv: {e}")))?);
    }
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, |r| r.len());
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Array2::from_shape_vec((nrows, ncols), flat)
        .map_err(|e| AvError::CorpusFormat(format!("ragged heatmap csv: {e}")))
}

/// Mean similarity within `|i-j| <= band` minus mean outside it.
pub fn diagonal_dominance(s: &Array2<f64>, band: usize) -> Result<f64> {
    if s.nrows() != s.ncols() {
        return Err(AvError::Shape(format!(
            "diagonal_dominance needs a square matrix, got {}x{}",
            s.nrows(),
            s.ncols()
        )));
    }
    let t = s.nrows();
    if band >= t {
        return Err(AvError::Config(format!("band {band} must be < T {t}")));
    }
    let (mut on, mut on_n, mut off, mut off_n) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..t {
        for j in 0..t {
            if i.abs_diff(j) <= band {
                on += s[[i, j]];
                on_n += 1;
            } else {
                off += s[[i, j]];
                off_n += 1;
            }
        }
    }
    let on_mean = on / on_n as f64;
    let off_mean = if off_n == 0 { 0.0 } else { off / off_n as f64 };
    Ok(on_mean - off_mean)
}

// ---- task-level evaluation -----------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Vsr,
    AvsrClean,
    AvsrNoisy,
    Sync,
    AsdLite,
}

impl std::str::FromStr for Task {
    type Err = AvError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vsr" => Ok(Task::Vsr),
            "avsr_clean" => Ok(Task::AvsrClean),
            "avsr_noisy" => Ok(Task::AvsrNoisy),
            "sync" => Ok(Task::Sync),
            "asd_lite" => Ok(Task::AsdLite),
            other => Err(AvError::Config(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Conditions {
    pub snr_db: Option<f64>,
    pub beam: usize,
    pub split: String,
    pub checkpoint: String,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub metric_name: String,
    pub value: f64,
    pub conditions: Conditions,
}

/// Read-only evaluation facade over a trained parameter set.
pub struct Evaluator {
    pub backbone: Backbone,
    pub adapter: Adapter,
    pub head: SrHead,
    pub params: ParamSet,
}

impl Evaluator {
    fn decode_mode(
        &self,
        s: &UtteranceSample,
        mode: Mode,
        mel_override: Option<&crate::corpus::Mel>,
        beam: usize,
    ) -> Result<Tokens> {
        let mel = mel_override.unwrap_or(&s.mel);
        let ctx = match mode {
            Mode::A => {
                let fa = self.backbone.encode_audio(&self.params, mel)?;
                self.backbone
                    .encode_context(&self.params, Some(&fa), None, Mode::A)?
            }
            Mode::V => {
                let fv = self.backbone.encode_video(&self.params, &s.video)?;
                self.backbone
                    .encode_context(&self.params, None, Some(&fv), Mode::V)?
            }
            Mode::AV => {
                let fa = self.backbone.encode_audio(&self.params, mel)?;
                let fv = self.backbone.encode_video(&self.params, &s.video)?;
                self.backbone
                    .encode_context(&self.params, Some(&fa), Some(&fv), Mode::AV)?
            }
        };
        let adapted = self.adapter.forward(&self.params, &ctx.values, None)?;
        self.head
            .decode(&self.params, &adapted, beam, self.head.cfg.max_len)
    }

    /// Corpus-level token error rate of a mode over a split:
    /// total edits / total reference tokens.
    pub fn mode_wer(
        &self,
        split: &[UtteranceSample],
        mode: Mode,
        noisy: Option<(f64, u64)>,
        beam: usize,
    ) -> Result<f64> {
        let mut edits = 0usize;
        let mut ref_len = 0usize;
        let mut rng = noisy.map(|(_, seed)| ChaCha20Rng::seed_from_u64(seed));
        for (i, s) in split.iter().enumerate() {
            let mel_noisy = match (&mut rng, noisy) {
                (Some(r), Some((snr, _))) => {
                    let j = pick_other(r, split.len(), i);
                    let noise = fit_noise(&split[j].mel, s.mel.nrows());
                    Some(mix_noise(&s.mel, &noise, snr)?)
                }
                _ => None,
            };
            let hyp = self.decode_mode(s, mode, mel_noisy.as_ref(), beam)?;
            edits += edit_distance(&s.tokens, &hyp);
            ref_len += s.tokens.len();
        }
        if ref_len == 0 {
            return Err(AvError::UndefinedMetric("empty evaluation split".into()));
        }
        Ok(edits as f64 / ref_len as f64)
    }

    /// Paired noisy comparison: AV-mode WER and audio-only WER computed on
    /// identical noise realizations.
    pub fn avsr_noisy_pair(
        &self,
        split: &[UtteranceSample],
        snr_db: f64,
        beam: usize,
        seed: u64,
    ) -> Result<(f64, f64)> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let (mut av_edits, mut a_edits, mut ref_len) = (0usize, 0usize, 0usize);
        for (i, s) in split.iter().enumerate() {
            let j = pick_other(&mut rng, split.len(), i);
            let noise = fit_noise(&split[j].mel, s.mel.nrows());
            let noisy = mix_noise(&s.mel, &noise, snr_db)?;
            let hyp_av = self.decode_mode(s, Mode::AV, Some(&noisy), beam)?;
            let hyp_a = self.decode_mode(s, Mode::A, Some(&noisy), beam)?;
            av_edits += edit_distance(&s.tokens, &hyp_av);
            a_edits += edit_distance(&s.tokens, &hyp_a);
            ref_len += s.tokens.len();
        }
        Ok((av_edits as f64 / ref_len as f64, a_edits as f64 / ref_len as f64))
    }

    /// Clean-condition cross-attention AVSR: visual keys/values attend to
    /// the head's own acoustic encoding of the clean mel.
    pub fn avsr_clean_wer(&self, split: &[UtteranceSample], beam: usize) -> Result<f64> {
        if self.adapter.cfg.attention_mode != AttentionMode::Cross {
            return Err(AvError::Mode(
                "avsr_clean evaluation requires a cross-attention adapter".into(),
            ));
        }
        let mut edits = 0usize;
        let mut ref_len = 0usize;
        for s in split {
            let fv = self.backbone.encode_video(&self.params, &s.video)?;
            let cv = self
                .backbone
                .encode_context(&self.params, None, Some(&fv), Mode::V)?;
            let q = self.head.encode_acoustic(&self.params, &s.mel)?;
            let adapted = self.adapter.forward(&self.params, &cv.values, Some(&q))?;
            let hyp = self
                .head
                .decode(&self.params, &adapted, beam, self.head.cfg.max_len)?;
            edits += edit_distance(&s.tokens, &hyp);
            ref_len += s.tokens.len();
        }
        Ok(edits as f64 / ref_len as f64)
    }

    /// Audio-only decoding through the head's own stem (no backbone), the
    /// baseline the cross-attention variant is compared against.
    pub fn head_only_wer(&self, split: &[UtteranceSample], beam: usize) -> Result<f64> {
        let mut edits = 0usize;
        let mut ref_len = 0usize;
        for s in split {
            let mem = self.head.stem_features(&self.params, &s.mel)?;
            let hyp = self
                .head
                .decode(&self.params, &mem, beam, self.head.cfg.max_len)?;
            edits += edit_distance(&s.tokens, &hyp);
            ref_len += s.tokens.len();
        }
        Ok(edits as f64 / ref_len as f64)
    }

    /// Context features of the two unimodal streams for a (mel, video) pair.
    pub fn pair_features(
        &self,
        mel: &crate::corpus::Mel,
        video: &crate::corpus::LipClip,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        let fa = self.backbone.encode_audio(&self.params, mel)?;
        let fv = self.backbone.encode_video(&self.params, video)?;
        let ca = self
            .backbone
            .encode_context(&self.params, Some(&fa), None, Mode::A)?;
        let cv = self
            .backbone
            .encode_context(&self.params, None, Some(&fv), Mode::V)?;
        Ok((ca.values, cv.values))
    }

    /// Sync discrimination AUC over generated positive/negative pairs.
    pub fn sync_auc_over(
        &self,
        split: &[UtteranceSample],
        negative_fraction: f64,
        min_shift: usize,
        seed: u64,
    ) -> Result<f64> {
        let pairs = make_pairs(split, negative_fraction, min_shift, seed)?;
        let mut scores = Vec::with_capacity(pairs.len());
        let mut labels = Vec::with_capacity(pairs.len());
        for p in &pairs {
            let (ca, cv) = self.pair_features(&p.mel, &p.video)?;
            scores.push(frame_similarity(&ca, &cv, EPS_NORM)?.d_bar);
            labels.push(p.label);
        }
        sync_auc(&scores, &labels)
    }

    /// Active-speaker pick: among `c` candidate video tracks for one audio
    /// stream, choose the argmax sync score; accuracy against ground truth.
    pub fn asd_lite_accuracy(
        &self,
        split: &[UtteranceSample],
        candidates: usize,
        seed: u64,
    ) -> Result<f64> {
        if split.len() < candidates || candidates < 2 {
            return Err(AvError::Config(
                "asd_lite needs candidates >= 2 and a large enough split".into(),
            ));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut hits = 0usize;
        for (i, s) in split.iter().enumerate() {
            let mut cand_idx = vec![i];
            while cand_idx.len() < candidates {
                let j = rng.gen_range(0..split.len());
                if !cand_idx.contains(&j) {
                    cand_idx.push(j);
                }
            }
            let mut best = (f64::NEG_INFINITY, usize::MAX);
            for &j in &cand_idx {
                let t = s.video.shape()[0].min(split[j].video.shape()[0]);
                let mel = s.mel.slice(ndarray::s![..4 * t, ..]).to_owned();
                let video = split[j].video.slice(ndarray::s![..t, .., ..]).to_owned();
                let (ca, cv) = self.pair_features(&mel, &video)?;
                let d = frame_similarity(&ca, &cv, EPS_NORM)?.d_bar;
                if d > best.0 {
                    best = (d, j);
                }
            }
            if best.1 == i {
                hits += 1;
            }
        }
        Ok(hits as f64 / split.len() as f64)
    }

    /// Run a task and return its reports (primary metric first; AVSR noisy
    /// additionally reports the paired audio-only baseline).
    pub fn evaluate_task(
        &self,
        task: Task,
        split: &[UtteranceSample],
        conditions: &Conditions,
    ) -> Result<Vec<EvalReport>> {
        let mk = |name: &str, value: f64| EvalReport {
            task,
            metric_name: name.to_string(),
            value,
            conditions: conditions.clone(),
        };
        match task {
            Task::Vsr => {
                let w = self.mode_wer(split, Mode::V, None, conditions.beam)?;
                Ok(vec![mk("wer", w)])
            }
            Task::AvsrClean => {
                let w = self.avsr_clean_wer(split, conditions.beam)?;
                let base = self.head_only_wer(split, conditions.beam)?;
                Ok(vec![mk("wer", w), mk("wer_audio_baseline", base)])
            }
            Task::AvsrNoisy => {
                let snr = conditions.snr_db.ok_or_else(|| {
                    AvError::Config("avsr_noisy requires conditions.snr_db".into())
                })?;
                let (av, audio) =
                    self.avsr_noisy_pair(split, snr, conditions.beam, conditions.seed)?;
                Ok(vec![mk("wer", av), mk("wer_audio_baseline", audio)])
            }
            Task::Sync => {
                let auc = self.sync_auc_over(split, 0.5, 2, conditions.seed)?;
                Ok(vec![mk("auc", auc)])
            }
            Task::AsdLite => {
                let acc = self.asd_lite_accuracy(split, 2, conditions.seed)?;
                Ok(vec![mk("accuracy", acc)])
            }
        }
    }
}

fn pick_other(rng: &mut ChaCha20Rng, n: usize, i: usize) -> usize {
    let j = rng.gen_range(0..n - 1);
    if j >= i {
        j + 1
    } else {
        j
    }
}

/// Append eval reports to a newline-delimited results file.
pub fn append_reports(path: &Path, reports: &[EvalReport]) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    for r in reports {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}
