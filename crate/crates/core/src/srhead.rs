//! Frozen speech-recognition head: a small encoder-decoder transformer
//! pretrained on synthetic mel -> text, then frozen for all joint training.
//!
//! The head's built-in acoustic stem reduces 100 frames/s mel input to
//! 50 frames/s features (one stride-2 convolution), so any stream feeding
//! the head must arrive at twice the backbone's 25 frames/s rate — that is
//! the structural reason the adapter upsamples. When adapted features are
//! injected, they enter the encoder directly and the stem is bypassed.

use crate::backbone::log_compress;
use crate::corpus::{Mel, Tokens, UtteranceSample};
use crate::error::{AvError, Result};
use crate::nn::{self, Binder, ParamSet};
use crate::optim::{accumulate_grads, Adam};
use crate::tensor::{Tape, Var};
use ndarray::{Array2, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Token vocabulary: PAD/BOS/EOS specials followed by content symbols.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct Vocabulary {
    pub content_size: usize,
}

impl Vocabulary {
    pub const PAD: usize = 0;
    pub const BOS: usize = 1;
    pub const EOS: usize = 2;

    pub fn new(content_size: usize) -> Self {
        Vocabulary { content_size }
    }

    pub fn total(&self) -> usize {
        self.content_size + 3
    }

    pub fn content_id(&self, k: usize) -> usize {
        debug_assert!(k < self.content_size);
        3 + k
    }

    pub fn as_content(&self, id: usize) -> Option<usize> {
        (id >= 3 && id < self.total()).then(|| id - 3)
    }

    /// Teacher-forcing target: content ids followed by EOS.
    pub fn target_ids(&self, tokens: &Tokens) -> Vec<usize> {
        let mut out: Vec<usize> = tokens.iter().map(|&k| self.content_id(k)).collect();
        out.push(Self::EOS);
        out
    }

    /// Decoder input for a target: BOS followed by all but the last target id.
    pub fn decoder_input(&self, target: &[usize]) -> Vec<usize> {
        let mut out = Vec::with_capacity(target.len());
        out.push(Self::BOS);
        out.extend_from_slice(&target[..target.len() - 1]);
        out
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SrHeadConfig {
    pub d_model: usize,
    pub enc_blocks: usize,
    pub dec_blocks: usize,
    pub num_heads: usize,
    pub max_len: usize,
    pub mel_bins: usize,
    pub stem_channels: usize,
}

impl Default for SrHeadConfig {
    fn default() -> Self {
        SrHeadConfig {
            d_model: 64,
            enc_blocks: 2,
            dec_blocks: 2,
            num_heads: 4,
            max_len: 16,
            mel_bins: 80,
            stem_channels: 16,
        }
    }
}

impl SrHeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.num_heads != 0 {
            return Err(AvError::Config(format!(
                "d_model {} not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        Ok(())
    }

    fn ffn_hidden(&self) -> usize {
        4 * self.d_model
    }

    fn stem_flat(&self) -> usize {
        self.stem_channels * self.mel_bins.div_ceil(2)
    }
}

pub struct SrHead {
    pub cfg: SrHeadConfig,
    pub vocab: Vocabulary,
}

impl SrHead {
    pub fn new(cfg: SrHeadConfig, vocab: Vocabulary) -> Result<Self> {
        cfg.validate()?;
        Ok(SrHead { cfg, vocab })
    }

    pub fn init_params(&self, params: &mut ParamSet, rng: &mut ChaCha20Rng) {
        let d = self.cfg.d_model;
        nn::init_conv2d(params, rng, "srhead.stem.conv", self.cfg.stem_channels, 1, 3, 3);
        nn::init_linear(params, rng, "srhead.stem.proj", self.cfg.stem_flat(), d);
        for i in 0..self.cfg.enc_blocks {
            nn::init_encoder_block(params, rng, &format!("srhead.enc.block{i}"), d, self.cfg.ffn_hidden());
        }
        nn::init_layer_norm(params, "srhead.enc.ln_out", d);
        params.insert(
            "srhead.dec.embed",
            nn::uniform_init(rng, &[self.vocab.total(), d], d),
        );
        for i in 0..self.cfg.dec_blocks {
            nn::init_decoder_block(params, rng, &format!("srhead.dec.block{i}"), d, self.cfg.ffn_hidden());
        }
        nn::init_layer_norm(params, "srhead.dec.ln_out", d);
        nn::init_linear(params, rng, "srhead.dec.out", d, self.vocab.total());
    }

    // ---- forward pieces ---------------------------------------------------

    /// Built-in acoustic stem: mel `[4T x B]` -> features `[2T x D_sr]`
    /// (one stride-2 convolution halves the temporal rate).
    pub fn stem_nodes(&self, tape: &mut Tape, binder: &mut Binder, mel: &Mel) -> Result<Var> {
        if mel.nrows() % 2 != 0 || mel.nrows() == 0 {
            return Err(AvError::Shape(format!(
                "stem expects a non-empty even mel row count, got {}",
                mel.nrows()
            )));
        }
        if mel.ncols() != self.cfg.mel_bins {
            return Err(AvError::Shape(format!(
                "mel bins {} do not match head config {}",
                mel.ncols(),
                self.cfg.mel_bins
            )));
        }
        let (rows, bins) = (mel.nrows(), mel.ncols());
        let log_mel = log_compress(mel);
        let x = tape.value(
            ArrayD::from_shape_vec(
                IxDyn(&[1, 1, rows, bins]),
                log_mel.into_raw_vec_and_offset().0,
            )
            .unwrap(),
        );
        let w = binder.get(tape, "srhead.stem.conv.w");
        let b = binder.get(tape, "srhead.stem.conv.b");
        let h = tape.conv2d(x, w, b, (2, 2), (1, 1));
        let h = tape.gelu(h);
        let flat = tape.flatten_time(h);
        Ok(nn::linear(tape, binder, "srhead.stem.proj", flat))
    }

    /// Encoder over a feature stream (stem output or injected features).
    pub fn encoder_nodes(&self, tape: &mut Tape, binder: &mut Binder, memory: Var) -> Var {
        let mut x = nn::add_positions(tape, memory);
        for i in 0..self.cfg.enc_blocks {
            x = nn::encoder_block(
                tape,
                binder,
                &format!("srhead.enc.block{i}"),
                x,
                self.cfg.num_heads,
                None,
            );
        }
        nn::layer_norm(tape, binder, "srhead.enc.ln_out", x)
    }

    /// Teacher-forced decoder logits over encoder output.
    pub fn decoder_logits_nodes(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        enc_out: Var,
        input_ids: &[usize],
    ) -> Var {
        let table = binder.get(tape, "srhead.dec.embed");
        let emb = tape.embed(table, input_ids);
        let mut x = nn::add_positions(tape, emb);
        for i in 0..self.cfg.dec_blocks {
            x = nn::decoder_block(
                tape,
                binder,
                &format!("srhead.dec.block{i}"),
                x,
                enc_out,
                self.cfg.num_heads,
            );
        }
        let x = nn::layer_norm(tape, binder, "srhead.dec.ln_out", x);
        nn::linear(tape, binder, "srhead.dec.out", x)
    }

    /// Teacher-forced NLL of `target` ids given a feature stream; mean over
    /// non-PAD target positions. The encoder runs on `memory` first.
    pub fn nll_nodes(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        memory: Var,
        target: &[usize],
    ) -> Result<Var> {
        if target.is_empty() {
            return Err(AvError::Batch("empty target sequence".into()));
        }
        if target.len() > self.cfg.max_len {
            return Err(AvError::Config(format!(
                "target length {} exceeds max_len {}",
                target.len(),
                self.cfg.max_len
            )));
        }
        let enc = self.encoder_nodes(tape, binder, memory);
        let input = self.vocab.decoder_input(target);
        let logits = self.decoder_logits_nodes(tape, binder, enc, &input);
        let logp = tape.log_softmax_rows(logits);
        let picked = tape.gather_cols(logp, target);
        let mask: Vec<f64> = target
            .iter()
            .map(|&t| if t == Vocabulary::PAD { 0.0 } else { 1.0 })
            .collect();
        let count: f64 = mask.iter().sum();
        if count == 0.0 {
            return Err(AvError::Batch("target is all PAD".into()));
        }
        let mask = tape.value(ArrayD::from_shape_vec(IxDyn(&[target.len()]), mask).unwrap());
        let masked = tape.mul(picked, mask);
        let total = tape.sum_all(masked);
        Ok(tape.scale(total, -1.0 / count))
    }

    // ---- plain-array wrappers ----------------------------------------------

    /// The head's own acoustic encoding of a mel input (stem + encoder);
    /// serves as the query stream for cross-attention adaptation.
    pub fn encode_acoustic(&self, params: &ParamSet, mel: &Mel) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(params);
        let stem = self.stem_nodes(&mut tape, &mut binder, mel)?;
        let enc = self.encoder_nodes(&mut tape, &mut binder, stem);
        Ok(to2(tape.get(enc)))
    }

    /// Acoustic stem output without the encoder, `[2T x D_sr]`.
    pub fn stem_features(&self, params: &ParamSet, mel: &Mel) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(params);
        let stem = self.stem_nodes(&mut tape, &mut binder, mel)?;
        Ok(to2(tape.get(stem)))
    }

    pub fn nll_loss(&self, params: &ParamSet, memory: &Array2<f64>, target: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(params);
        let mem = tape.value(memory.clone().into_dyn());
        let loss = self.nll_nodes(&mut tape, &mut binder, mem, target)?;
        Ok(tape.get_scalar(loss))
    }

    /// Teacher-forced next-token accuracy over non-PAD positions.
    pub fn token_accuracy(&self, params: &ParamSet, memory: &Array2<f64>, target: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(params);
        let mem = tape.value(memory.clone().into_dyn());
        let enc = self.encoder_nodes(&mut tape, &mut binder, mem);
        let input = self.vocab.decoder_input(target);
        let logits = self.decoder_logits_nodes(&mut tape, &mut binder, enc, &input);
        let l = tape.get(logits);
        let v = self.cfg_total();
        let ls = l.as_slice().unwrap();
        let mut hit = 0usize;
        let mut n = 0usize;
        for (i, &t) in target.iter().enumerate() {
            if t == Vocabulary::PAD {
                continue;
            }
            let row = &ls[i * v..(i + 1) * v];
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            n += 1;
            if argmax == t {
                hit += 1;
            }
        }
        Ok(hit as f64 / n.max(1) as f64)
    }

    fn cfg_total(&self) -> usize {
        self.vocab.total()
    }

    /// Length-normalized beam search over the decoder. `beam_size = 1` is
    /// greedy. Hypotheses terminate at EOS or after `max_len` emissions;
    /// ties break toward smaller token ids. Returns the emitted content
    /// tokens and the normalized log-probability of the winning hypothesis.
    pub fn decode_with_score(
        &self,
        params: &ParamSet,
        memory: &Array2<f64>,
        beam_size: usize,
        max_len: usize,
    ) -> Result<(Tokens, f64)> {
        if beam_size == 0 {
            return Err(AvError::Config("beam_size must be >= 1".into()));
        }
        let mut tape = Tape::new();
        let mut binder = Binder::new(params);
        let mem = tape.value(memory.clone().into_dyn());
        let enc = self.encoder_nodes(&mut tape, &mut binder, mem);

        #[derive(Clone)]
        struct Hyp {
            emitted: Vec<usize>,
            logp: f64,
        }
        let norm = |h: &Hyp| h.logp / h.emitted.len().max(1) as f64;

        let mut live = vec![Hyp {
            emitted: Vec::new(),
            logp: 0.0,
        }];
        let mut finished: Vec<Hyp> = Vec::new();

        while !live.is_empty() {
            let mut candidates: Vec<Hyp> = Vec::new();
            for h in &live {
                let mut input = vec![Vocabulary::BOS];
                input.extend_from_slice(&h.emitted);
                let logits = self.decoder_logits_nodes(&mut tape, &mut binder, enc, &input);
                let lp = tape.log_softmax_rows(logits);
                let row = tape.get(lp);
                let v = self.cfg_total();
                let last = row.as_slice().unwrap()[(input.len() - 1) * v..input.len() * v].to_vec();
                // emission alphabet: content symbols and EOS
                for tok in std::iter::once(Vocabulary::EOS)
                    .chain((0..self.vocab.content_size).map(|k| self.vocab.content_id(k)))
                {
                    let mut emitted = h.emitted.clone();
                    emitted.push(tok);
                    candidates.push(Hyp {
                        emitted,
                        logp: h.logp + last[tok],
                    });
                }
            }
            candidates.sort_by(|a, b| {
                b.logp
                    .partial_cmp(&a.logp)
                    .unwrap()
                    .then_with(|| a.emitted.cmp(&b.emitted))
            });
            candidates.truncate(beam_size);
            live = Vec::new();
            for c in candidates {
                if *c.emitted.last().unwrap() == Vocabulary::EOS || c.emitted.len() >= max_len {
                    finished.push(c);
                } else {
                    live.push(c);
                }
            }
        }
        let best = finished
            .into_iter()
            .max_by(|a, b| {
                norm(a)
                    .partial_cmp(&norm(b))
                    .unwrap()
                    .then_with(|| b.emitted.cmp(&a.emitted))
            })
            .expect("at least one hypothesis always finishes");
        let score = norm(&best);
        let content: Tokens = best
            .emitted
            .iter()
            .filter_map(|&id| self.vocab.as_content(id))
            .collect();
        Ok((content, score))
    }

    pub fn decode(
        &self,
        params: &ParamSet,
        memory: &Array2<f64>,
        beam_size: usize,
        max_len: usize,
    ) -> Result<Tokens> {
        Ok(self.decode_with_score(params, memory, beam_size, max_len)?.0)
    }
}

fn to2(a: &ArrayD<f64>) -> Array2<f64> {
    a.clone().into_dimensionality::<ndarray::Ix2>().unwrap()
}

// ---- pretraining ----------------------------------------------------------

/// A pretrained, frozen head: parameters (only the `srhead.*` namespace),
/// the content checksum over them, and the vocabulary record.
pub struct PretrainedHead {
    pub params: ParamSet,
    pub checksum: String,
    pub vocab: Vocabulary,
    pub cfg: SrHeadConfig,
    pub heldout_accuracy: f64,
}

/// Pretrain the head on (mel, transcript) pairs with teacher-forced NLL
/// until held-out token accuracy reaches `accuracy_bar` (early stop), or
/// fail if `max_steps` is exhausted first.
pub fn pretrain_srhead(
    corpus: &[UtteranceSample],
    cfg: SrHeadConfig,
    vocab: Vocabulary,
    max_steps: usize,
    accuracy_bar: f64,
    seed: u64,
) -> Result<PretrainedHead> {
    if corpus.len() < 16 {
        return Err(AvError::Config(
            "pretraining needs at least 16 utterances".into(),
        ));
    }
    let head = SrHead::new(cfg.clone(), vocab.clone())?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    head.init_params(&mut params, &mut rng);

    let n_holdout = (corpus.len() / 10).max(8);
    let (train, heldout) = corpus.split_at(corpus.len() - n_holdout);
    let batch_size = 8;
    let mut adam = Adam::new(1e-3, 20);

    let eval_acc = |params: &ParamSet| -> Result<f64> {
        let mut total = 0.0;
        for s in heldout {
            let mem = head.stem_features(params, &s.mel)?;
            total += head.token_accuracy(params, &mem, &vocab.target_ids(&s.tokens))?;
        }
        Ok(total / heldout.len() as f64)
    };

    let mut reached = None;
    for step in 0..max_steps {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&params);
        let mut losses = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let s = &train[rng.gen_range(0..train.len())];
            let stem = head.stem_nodes(&mut tape, &mut binder, &s.mel)?;
            let loss = head.nll_nodes(&mut tape, &mut binder, stem, &vocab.target_ids(&s.tokens))?;
            losses.push(loss);
        }
        let stacked = tape.stack1d(&losses);
        let batch_loss = tape.mean_all(stacked);
        if !tape.get_scalar(batch_loss).is_finite() {
            return Err(AvError::NonFiniteLoss {
                step,
                mode: "pretrain".into(),
                detail: "head pretraining loss diverged".into(),
            });
        }
        let grads = tape.backward(batch_loss);
        let mut named = BTreeMap::new();
        accumulate_grads(&mut named, &binder.named_grads(&grads), 1.0);
        adam.step(&mut params, &named, &|_| true);

        if (step + 1) % 20 == 0 {
            let acc = eval_acc(&params)?;
            if acc >= accuracy_bar {
                reached = Some(acc);
                break;
            }
        }
    }
    let final_acc = match reached {
        Some(a) => a,
        None => {
            let acc = eval_acc(&params)?;
            if acc < accuracy_bar {
                return Err(AvError::PretrainingFailure(format!(
                    "held-out token accuracy {acc:.3} below bar {accuracy_bar} after {max_steps} steps"
                )));
            }
            acc
        }
    };
    let checksum = params.checksum("srhead.");
    Ok(PretrainedHead {
        params,
        checksum,
        vocab,
        cfg,
        heldout_accuracy: final_acc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::max_grad_error;

    fn tiny_head() -> (SrHead, ParamSet) {
        let cfg = SrHeadConfig {
            d_model: 8,
            enc_blocks: 1,
            dec_blocks: 1,
            num_heads: 2,
            max_len: 6,
            mel_bins: 8,
            stem_channels: 2,
        };
        let vocab = Vocabulary::new(4);
        let head = SrHead::new(cfg, vocab).unwrap();
        let mut params = ParamSet::new();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        head.init_params(&mut params, &mut rng);
        (head, params)
    }

    fn memory(t: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_fn((t, d), |(i, j)| ((i * 3 + j) as f64 * 0.41).sin())
    }

    #[test]
    fn vocabulary_layout() {
        let v = Vocabulary::new(16);
        assert_eq!(v.total(), 19);
        assert_eq!(v.content_id(0), 3);
        assert_eq!(v.as_content(3), Some(0));
        assert_eq!(v.as_content(Vocabulary::EOS), None);
        let target = v.target_ids(&vec![2, 5]);
        assert_eq!(target, vec![5, 8, Vocabulary::EOS]);
        assert_eq!(
            v.decoder_input(&target),
            vec![Vocabulary::BOS, 5, 8]
        );
    }

    #[test]
    fn uniform_logits_give_ln_v_per_position() {
        let (head, mut params) = tiny_head();
        // zero the output projection: logits all equal -> uniform softmax
        for v in params.get_mut("srhead.dec.out.w").iter_mut() {
            *v = 0.0;
        }
        for v in params.get_mut("srhead.dec.out.b").iter_mut() {
            *v = 0.0;
        }
        let mem = memory(4, 8);
        let target = head.vocab.target_ids(&vec![1, 2, 0]);
        let loss = head.nll_loss(&params, &mem, &target).unwrap();
        let want = (head.vocab.total() as f64).ln();
        assert!((loss - want).abs() < 1e-12, "got {loss}, want {want}");
    }

    #[test]
    fn forced_eos_decoder_reaches_zero_loss() {
        let (head, mut params) = tiny_head();
        for v in params.get_mut("srhead.dec.out.w").iter_mut() {
            *v = 0.0;
        }
        let b = params.get_mut("srhead.dec.out.b");
        for v in b.iter_mut() {
            *v = 0.0;
        }
        b[[Vocabulary::EOS]] = 50.0; // probability ~1 for EOS everywhere
        let mem = memory(4, 8);
        let loss = head.nll_loss(&params, &mem, &[Vocabulary::EOS]).unwrap();
        assert!(loss.abs() < 1e-9, "loss {loss} should be ~0");

        let (tokens, _) = head.decode_with_score(&params, &mem, 1, 6).unwrap();
        assert!(tokens.is_empty(), "pure-EOS decoder emits empty transcript");
    }

    #[test]
    fn nll_contract_errors() {
        let (head, params) = tiny_head();
        let mem = memory(4, 8);
        assert_eq!(
            head.nll_loss(&params, &mem, &[]).unwrap_err().code(),
            "E_BATCH"
        );
        let long = vec![3usize; 7];
        assert_eq!(
            head.nll_loss(&params, &mem, &long).unwrap_err().code(),
            "E_CONFIG"
        );
    }

    #[test]
    fn nll_gradient_wrt_memory_matches_finite_differences() {
        let (head, params) = tiny_head();
        let mem = memory(4, 8);
        let target = head.vocab.target_ids(&vec![0, 3]);
        let names: Vec<String> = params.names().cloned().collect();
        let mut arrays: Vec<ArrayD<f64>> = vec![mem.into_dyn()];
        arrays.extend(names.iter().map(|n| params.get(n).clone()));
        let err = max_grad_error(&arrays, |t, vars| {
            let local = ParamSet::new();
            let mut binder = Binder::new(&local);
            for (n, v) in names.iter().zip(&vars[1..]) {
                binder.bind_existing(n, *v);
            }
            head.nll_nodes(t, &mut binder, vars[0], &target).unwrap()
        });
        assert!(err < 1e-4, "nll gradient error {err:.2e}");
    }

    #[test]
    fn greedy_follows_argmax_chain_and_beam_one_equals_greedy() {
        let (head, params) = tiny_head();
        let mem = memory(5, 8);
        let (g, gs) = head.decode_with_score(&params, &mem, 1, 6).unwrap();
        // manual argmax chain over the same model
        let mut tape = Tape::new();
        let mut binder = Binder::new(&params);
        let m = tape.value(mem.clone().into_dyn());
        let enc = head.encoder_nodes(&mut tape, &mut binder, m);
        let mut emitted: Vec<usize> = Vec::new();
        loop {
            let mut input = vec![Vocabulary::BOS];
            input.extend_from_slice(&emitted);
            let logits = head.decoder_logits_nodes(&mut tape, &mut binder, enc, &input);
            let row = tape.get(logits);
            let v = head.vocab.total();
            let last = &row.as_slice().unwrap()[(input.len() - 1) * v..input.len() * v];
            let tok = std::iter::once(Vocabulary::EOS)
                .chain((0..head.vocab.content_size).map(|k| head.vocab.content_id(k)))
                .max_by(|&a, &b| {
                    last[a]
                        .partial_cmp(&last[b])
                        .unwrap()
                        .then_with(|| b.cmp(&a))
                })
                .unwrap();
            emitted.push(tok);
            if tok == Vocabulary::EOS || emitted.len() >= 6 {
                break;
            }
        }
        let manual: Tokens = emitted
            .iter()
            .filter_map(|&id| head.vocab.as_content(id))
            .collect();
        assert_eq!(g, manual, "beam 1 must equal the greedy argmax chain");
        assert!(gs.is_finite());
    }

    #[test]
    fn full_width_beam_equals_brute_force() {
        let (head, params) = tiny_head();
        let mem = memory(4, 8);
        let max_len = 3;
        let v = head.vocab.content_size; // 4 content symbols
        let full_width = (v + 1usize).pow(max_len as u32); // generous upper bound
        let (beam_tokens, beam_score) = head
            .decode_with_score(&params, &mem, full_width, max_len)
            .unwrap();

        // brute force: enumerate every terminated emission sequence
        let mut best: Option<(f64, Vec<usize>)> = None;
        let mut stack: Vec<Vec<usize>> = vec![vec![]];
        while let Some(prefix) = stack.pop() {
            for tok in std::iter::once(Vocabulary::EOS)
                .chain((0..v).map(|k| head.vocab.content_id(k)))
            {
                let mut seq = prefix.clone();
                seq.push(tok);
                let terminated = tok == Vocabulary::EOS || seq.len() >= max_len;
                if terminated {
                    let mut logp = 0.0;
                    let mut tape = Tape::new();
                    let mut binder = Binder::new(&params);
                    let m = tape.value(mem.clone().into_dyn());
                    let enc = head.encoder_nodes(&mut tape, &mut binder, m);
                    let mut input = vec![Vocabulary::BOS];
                    input.extend_from_slice(&seq[..seq.len() - 1]);
                    let logits = head.decoder_logits_nodes(&mut tape, &mut binder, enc, &input);
                    let lp = tape.log_softmax_rows(logits);
                    let arr = tape.get(lp);
                    let vt = head.vocab.total();
                    for (pos, &t) in seq.iter().enumerate() {
                        logp += arr.as_slice().unwrap()[pos * vt + t];
                    }
                    let score = logp / seq.len() as f64;
                    if best.as_ref().map_or(true, |(b, _)| score > *b) {
                        best = Some((score, seq.clone()));
                    }
                } else if tok != Vocabulary::EOS {
                    stack.push(seq);
                }
            }
        }
        let (bf_score, bf_seq) = best.unwrap();
        let bf_tokens: Tokens = bf_seq
            .iter()
            .filter_map(|&id| head.vocab.as_content(id))
            .collect();
        assert!(
            (beam_score - bf_score).abs() < 1e-9,
            "beam {beam_score} vs brute force {bf_score}"
        );
        assert_eq!(beam_tokens, bf_tokens);
    }
}
