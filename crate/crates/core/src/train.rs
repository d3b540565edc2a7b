//! Joint contrastive-generative training with modality dropping, linear
//! warmup, two-phase unfreezing and a frozen SR head.
//!
//! Every step computes (1) a contrastive loss over dedicated audio-only and
//! video-only context passes on a batch of sync pairs — both unimodal
//! streams are always needed for the frame-wise similarity — and (2) a
//! generative loss where the modality feeding the SR head is drawn per
//! micro-batch. Gradients flow through the frozen head into backbone and
//! adapter; only non-`srhead.*` namespaces are ever updated, and phase 1
//! additionally freezes the visual encoder and context transformer.

use crate::adapt::Adapter;
use crate::backbone::{Backbone, Mode};
use crate::corpus::{fit_noise, mix_noise, SyncPair, UtteranceSample};
use crate::error::{AvError, Result};
use crate::nn::{Binder, ParamSet};
use crate::optim::{accumulate_grads, Adam};
use crate::srhead::{PretrainedHead, SrHead};
use crate::sync::{bce_loss_nodes, frame_similarity_nodes, EPS_LOG, EPS_NORM};
use crate::tensor::{Tape, Var};
use ndarray::ArrayD;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    /// Probabilities of feeding the SR head pure audio, pure visual, and
    /// fused audio-visual features, in that order.
    pub modality_probs: (f64, f64, f64),
    pub lr: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub seed: u64,
    pub snr_range_db: (f64, f64),
    pub negative_fraction: f64,
    pub steps: usize,
    pub phase1_fraction: f64,
    pub min_shift: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 1.0,
            modality_probs: (0.2, 0.4, 0.4),
            lr: 1e-5,
            warmup_steps: 500,
            batch_size: 4,
            grad_accum: 4,
            seed: 0,
            snr_range_db: (-5.0, 5.0),
            negative_fraction: 0.5,
            steps: 300,
            phase1_fraction: 0.2,
            min_shift: 2,
        }
    }
}

impl TrainConfig {
    /// CPU-sized configuration: the stock learning rate and warmup horizon
    /// are tuned for models three orders of magnitude larger, so runs of a
    /// few hundred steps use this override.
    pub fn desk() -> Self {
        TrainConfig {
            lr: 1e-3,
            warmup_steps: 30,
            grad_accum: 2,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (a, v, av) = self.modality_probs;
        if a < 0.0 || v < 0.0 || av < 0.0 || (a + v + av - 1.0).abs() > 1e-9 {
            return Err(AvError::Config(format!(
                "modality_probs must be a simplex point, got ({a}, {v}, {av})"
            )));
        }
        if self.lambda < 0.0 {
            return Err(AvError::Config("lambda must be >= 0".into()));
        }
        if self.batch_size == 0 || self.grad_accum == 0 || self.steps == 0 {
            return Err(AvError::Config(
                "batch_size, grad_accum and steps must be positive".into(),
            ));
        }
        if self.snr_range_db.0 > self.snr_range_db.1 {
            return Err(AvError::Config("snr_range_db must be ordered".into()));
        }
        if !(0.0..=1.0).contains(&self.negative_fraction) {
            return Err(AvError::Config("negative_fraction must be in [0,1]".into()));
        }
        if !(0.0..=1.0).contains(&self.phase1_fraction) {
            return Err(AvError::Config("phase1_fraction must be in [0,1]".into()));
        }
        Ok(())
    }
}

/// Categorical modality draw; empirical frequencies converge to `probs`.
pub fn sample_modality(rng: &mut ChaCha20Rng, probs: (f64, f64, f64)) -> Result<Mode> {
    let (a, v, av) = probs;
    if a < 0.0 || v < 0.0 || av < 0.0 || (a + v + av - 1.0).abs() > 1e-9 {
        return Err(AvError::Config(format!(
            "invalid modality probabilities ({a}, {v}, {av})"
        )));
    }
    let u: f64 = rng.gen();
    Ok(if u < a {
        Mode::A
    } else if u < a + v {
        Mode::V
    } else {
        Mode::AV
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub l_co: f64,
    pub l_gen: f64,
    pub l_total: f64,
    pub mode_drawn: Mode,
    pub lr: f64,
    pub phase: u8,
}

pub struct Trainer {
    pub backbone: Backbone,
    pub adapter: Adapter,
    pub head: SrHead,
    pub params: ParamSet,
    pub cfg: TrainConfig,
    pub head_checksum: String,
}

impl Trainer {
    /// Assemble a trainer around a frozen pretrained head. Refuses to start
    /// without the head's checksum record.
    pub fn new(
        backbone: Backbone,
        adapter: Adapter,
        frozen_head: &PretrainedHead,
        cfg: TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if frozen_head.checksum.is_empty() {
            return Err(AvError::MissingArtifact(
                "frozen head has no checksum record".into(),
            ));
        }
        let head = SrHead::new(frozen_head.cfg.clone(), frozen_head.vocab.clone())?;
        let mut params = ParamSet::new();
        for (name, value) in frozen_head.params.iter() {
            params.insert(name, value.clone());
        }
        if params.checksum("srhead.") != frozen_head.checksum {
            return Err(AvError::CheckpointFormat(
                "frozen head checksum does not match its parameters".into(),
            ));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ INIT_SEED_SALT);
        backbone.init_params(&mut params, &mut rng);
        adapter.init_params(&mut params, &mut rng);
        Ok(Trainer {
            backbone,
            adapter,
            head,
            params,
            cfg,
            head_checksum: frozen_head.checksum.clone(),
        })
    }

    fn phase1_steps(&self) -> usize {
        (self.cfg.phase1_fraction * self.cfg.steps as f64).floor() as usize
    }

    fn trainable_at(&self, step: usize) -> Box<dyn Fn(&str) -> bool> {
        if step < self.phase1_steps() {
            Box::new(|n: &str| n.starts_with("audio.") || n.starts_with("adapter."))
        } else {
            Box::new(|n: &str| !n.starts_with("srhead."))
        }
    }

    /// Contrastive loss over a batch of sync pairs (audio-only and
    /// video-only context passes).
    fn contrastive_nodes(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        pairs: &[SyncPair],
        rng: &mut ChaCha20Rng,
    ) -> Result<Var> {
        let mut scores = Vec::with_capacity(pairs.len());
        let mut labels = Vec::with_capacity(pairs.len());
        for p in pairs {
            let fa = self.backbone.audio_nodes(tape, binder, &p.mel)?;
            let fv = self.backbone.video_nodes(tape, binder, &p.video)?;
            let ca = self
                .backbone
                .context_nodes(tape, binder, Some(fa), None, Mode::A, Some(rng))?;
            let cv = self
                .backbone
                .context_nodes(tape, binder, None, Some(fv), Mode::V, Some(rng))?;
            let (d_bar, _) = frame_similarity_nodes(tape, ca, cv, EPS_NORM);
            scores.push(d_bar);
            labels.push(p.label);
        }
        Ok(bce_loss_nodes(tape, &scores, &labels, EPS_LOG))
    }

    /// One generative micro-batch: draw noisy audio per sample, encode in
    /// the given mode, adapt, score against the frozen head.
    fn generative_nodes(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        samples: &[&UtteranceSample],
        noise_sources: &[&UtteranceSample],
        mode: Mode,
        rng: &mut ChaCha20Rng,
    ) -> Result<Var> {
        let mut losses = Vec::with_capacity(samples.len());
        for (s, noise_src) in samples.iter().zip(noise_sources) {
            let ctx = match mode {
                Mode::A | Mode::AV => {
                    let snr = rng.gen_range(self.cfg.snr_range_db.0..=self.cfg.snr_range_db.1);
                    let noise = fit_noise(&noise_src.mel, s.mel.nrows());
                    let noisy = mix_noise(&s.mel, &noise, snr)?;
                    let fa = self.backbone.audio_nodes(tape, binder, &noisy)?;
                    if mode == Mode::A {
                        self.backbone
                            .context_nodes(tape, binder, Some(fa), None, Mode::A, Some(rng))?
                    } else {
                        let fv = self.backbone.video_nodes(tape, binder, &s.video)?;
                        self.backbone.context_nodes(
                            tape,
                            binder,
                            Some(fa),
                            Some(fv),
                            Mode::AV,
                            Some(rng),
                        )?
                    }
                }
                Mode::V => {
                    let fv = self.backbone.video_nodes(tape, binder, &s.video)?;
                    self.backbone
                        .context_nodes(tape, binder, None, Some(fv), Mode::V, Some(rng))?
                }
            };
            let adapted = self.adapter.forward_nodes(tape, binder, ctx, None)?;
            let target = self.head.vocab.target_ids(&s.tokens);
            losses.push(self.head.nll_nodes(tape, binder, adapted, &target)?);
        }
        let stacked = tape.stack1d(&losses);
        Ok(tape.mean_all(stacked))
    }

    /// One optimizer step: contrastive pass, `grad_accum` generative
    /// micro-batches, Adam update on the trainable namespaces.
    pub fn train_step(
        &mut self,
        step: usize,
        train: &[UtteranceSample],
        adam: &mut Adam,
        rng: &mut ChaCha20Rng,
    ) -> Result<StepReport> {
        let n = train.len();
        if n < 2 {
            return Err(AvError::Config("training needs at least 2 utterances".into()));
        }
        let mut acc: BTreeMap<String, ArrayD<f64>> = BTreeMap::new();

        // contrastive stream: one pair per subset sample
        let pair_count = (self.cfg.batch_size * 2).max(2);
        let subset: Vec<UtteranceSample> = (0..pair_count)
            .map(|_| train[rng.gen_range(0..n)].clone())
            .collect();
        let pair_seed: u64 = rng.gen();
        let pairs = crate::corpus::make_pairs(
            &subset,
            self.cfg.negative_fraction,
            self.cfg.min_shift,
            pair_seed,
        )?;
        let l_co = {
            let mut tape = Tape::new();
            let mut binder = Binder::new(&self.params);
            let loss = self.contrastive_nodes(&mut tape, &mut binder, &pairs, rng)?;
            let value = tape.get_scalar(loss);
            if self.cfg.lambda > 0.0 {
                let grads = tape.backward(loss);
                accumulate_grads(&mut acc, &binder.named_grads(&grads), self.cfg.lambda);
            }
            value
        };

        // generative stream: mode drawn per micro-batch
        let mut l_gen_sum = 0.0;
        let mut last_mode = Mode::AV;
        for _ in 0..self.cfg.grad_accum {
            let mode = sample_modality(rng, self.cfg.modality_probs)?;
            last_mode = mode;
            let samples: Vec<&UtteranceSample> = (0..self.cfg.batch_size)
                .map(|_| &train[rng.gen_range(0..n)])
                .collect();
            let noises: Vec<&UtteranceSample> = samples
                .iter()
                .map(|_| &train[rng.gen_range(0..n)])
                .collect();
            let mut tape = Tape::new();
            let mut binder = Binder::new(&self.params);
            let loss =
                self.generative_nodes(&mut tape, &mut binder, &samples, &noises, mode, rng)?;
            l_gen_sum += tape.get_scalar(loss);
            let grads = tape.backward(loss);
            accumulate_grads(
                &mut acc,
                &binder.named_grads(&grads),
                1.0 / self.cfg.grad_accum as f64,
            );
        }
        let l_gen = l_gen_sum / self.cfg.grad_accum as f64;
        let l_total = l_gen + self.cfg.lambda * l_co;
        if !l_total.is_finite() {
            return Err(AvError::NonFiniteLoss {
                step,
                mode: last_mode.to_string(),
                detail: format!("l_gen={l_gen}, l_co={l_co}"),
            });
        }

        let trainable = self.trainable_at(step);
        adam.step(&mut self.params, &acc, trainable.as_ref());
        let phase = if step < self.phase1_steps() { 1 } else { 2 };
        Ok(StepReport {
            step,
            l_co,
            l_gen,
            l_total,
            mode_drawn: last_mode,
            lr: adam.effective_lr(adam.steps_taken()),
            phase,
        })
    }

    /// Full training run. The observer sees every step report and the live
    /// parameter set (for logging and interval checkpoints). The SR head is
    /// verified bit-frozen on exit.
    pub fn fit<F>(&mut self, train: &[UtteranceSample], mut observer: F) -> Result<Vec<StepReport>>
    where
        F: FnMut(&StepReport, &ParamSet) -> Result<()>,
    {
        if self.params.checksum("srhead.") != self.head_checksum {
            return Err(AvError::MissingArtifact(
                "frozen head checksum mismatch before training".into(),
            ));
        }
        let phase1 = self.phase1_steps();
        let backbone_checksum_start =
            self.params.checksum("visual.") + &self.params.checksum("context.");
        let mut adam = Adam::new(self.cfg.lr, self.cfg.warmup_steps);
        let mut rng = ChaCha20Rng::seed_from_u64(self.cfg.seed);
        let mut log = Vec::with_capacity(self.cfg.steps);
        for step in 0..self.cfg.steps {
            let report = self.train_step(step, train, &mut adam, &mut rng)?;
            if step + 1 == phase1 {
                // phase-1 freeze contract: untouched namespaces unchanged
                let now = self.params.checksum("visual.") + &self.params.checksum("context.");
                if now != backbone_checksum_start {
                    return Err(AvError::CheckpointFormat(
                        "frozen backbone namespaces changed during phase 1".into(),
                    ));
                }
            }
            observer(&report, &self.params)?;
            log.push(report);
        }
        if self.params.checksum("srhead.") != self.head_checksum {
            return Err(AvError::CheckpointFormat(
                "SR head parameters changed during training".into(),
            ));
        }
        Ok(log)
    }

    /// Adapter-only cross-attention fine-tuning on clean audio (the
    /// clean-condition AVSR regime): backbone and head stay frozen, so
    /// their per-utterance features are cached as constants.
    pub fn fit_adapter_cross<F>(
        &mut self,
        train: &[UtteranceSample],
        steps: usize,
        mut observer: F,
    ) -> Result<Vec<StepReport>>
    where
        F: FnMut(&StepReport, &ParamSet) -> Result<()>,
    {
        if self.adapter.cfg.attention_mode != crate::adapt::AttentionMode::Cross {
            return Err(AvError::Mode(
                "fit_adapter_cross requires a cross-attention adapter".into(),
            ));
        }
        let mut ctxs = Vec::with_capacity(train.len());
        let mut queries = Vec::with_capacity(train.len());
        for s in train {
            let fv = self.backbone.encode_video(&self.params, &s.video)?;
            let cv = self
                .backbone
                .encode_context(&self.params, None, Some(&fv), Mode::V)?;
            ctxs.push(cv.values);
            queries.push(self.head.encode_acoustic(&self.params, &s.mel)?);
        }
        let mut adam = Adam::new(self.cfg.lr, self.cfg.warmup_steps.min(steps / 5).max(1));
        let mut rng = ChaCha20Rng::seed_from_u64(self.cfg.seed ^ 0xc105_5a);
        let mut log = Vec::with_capacity(steps);
        for step in 0..steps {
            let mut tape = Tape::new();
            let mut binder = Binder::new(&self.params);
            let mut losses = Vec::with_capacity(self.cfg.batch_size);
            for _ in 0..self.cfg.batch_size {
                let i = rng.gen_range(0..train.len());
                let ctx = tape.value(ctxs[i].clone().into_dyn());
                let q = tape.value(queries[i].clone().into_dyn());
                let adapted = self.adapter.forward_nodes(&mut tape, &mut binder, ctx, Some(q))?;
                let target = self.head.vocab.target_ids(&train[i].tokens);
                losses.push(self.head.nll_nodes(&mut tape, &mut binder, adapted, &target)?);
            }
            let stacked = tape.stack1d(&losses);
            let loss = tape.mean_all(stacked);
            let l_gen = tape.get_scalar(loss);
            if !l_gen.is_finite() {
                return Err(AvError::NonFiniteLoss {
                    step,
                    mode: "cross".into(),
                    detail: "adapter cross fine-tune diverged".into(),
                });
            }
            let grads = tape.backward(loss);
            let named = binder.named_grads(&grads);
            adam.step(&mut self.params, &named, &|n| n.starts_with("adapter."));
            let report = StepReport {
                step,
                l_co: 0.0,
                l_gen,
                l_total: l_gen,
                mode_drawn: Mode::AV,
                lr: adam.effective_lr(adam.steps_taken()),
                phase: 2,
            };
            observer(&report, &self.params)?;
            log.push(report);
        }
        Ok(log)
    }
}

/// Salt separating parameter-init randomness from the data stream.
const INIT_SEED_SALT: u64 = 0x5eed_1717;
