//! Sequence-to-sequence contrastive synchronization primitives.
//!
//! The sync score of an (audio, visual) feature pair is the temporal mean of
//! frame-wise ReLU-clamped cosine similarities; the training objective is
//! binary cross-entropy between that score and the alignment label. The raw
//! (un-clamped) cosine matrix doubles as the cross-modal alignment heatmap.
//!
//! Each scoring operation exists twice: a plain-array route used by
//! evaluation, and a tape route used inside the training graph. Tests pin
//! the two routes against each other.

use crate::error::{AvError, Result};
use crate::tensor::{Tape, Var};
use ndarray::Array2;

/// Norm clamp for frame cosines; a zero-norm frame scores similarity 0.
pub const EPS_NORM: f64 = 1e-8;
/// Probability clamp inside the BCE; identical positive pairs reach d=1.
pub const EPS_LOG: f64 = 1e-7;

/// Sync score of one feature pair: `d_bar` is the temporal mean of the
/// per-frame non-negative cosine similarities.
#[derive(Clone, Debug)]
pub struct SyncScore {
    pub d_bar: f64,
    pub per_frame: Vec<f64>,
}

/// Squared row norms clamped below by `eps^2`. The cosine denominator is
/// `sqrt(na2 * nv2)`: for bitwise-identical inputs the quotient is then
/// exactly 1.0 (IEEE round-to-nearest gives `sqrt(x*x) == x`).
fn row_sq_norms(f: &Array2<f64>, eps: f64) -> Vec<f64> {
    f.rows()
        .into_iter()
        .map(|r| r.iter().map(|x| x * x).sum::<f64>().max(eps * eps))
        .collect()
}

/// Frame-wise ReLU-clamped cosine similarity and its temporal mean.
pub fn frame_similarity(f_a: &Array2<f64>, f_v: &Array2<f64>, eps: f64) -> Result<SyncScore> {
    if f_a.shape() != f_v.shape() {
        return Err(AvError::Shape(format!(
            "frame_similarity shape mismatch: {:?} vs {:?}",
            f_a.shape(),
            f_v.shape()
        )));
    }
    if eps <= 0.0 {
        return Err(AvError::Config("eps must be positive".into()));
    }
    let na2 = row_sq_norms(f_a, eps);
    let nv2 = row_sq_norms(f_v, eps);
    let t = f_a.nrows();
    let mut per_frame = Vec::with_capacity(t);
    for i in 0..t {
        let dot: f64 = f_a
            .row(i)
            .iter()
            .zip(f_v.row(i).iter())
            .map(|(a, b)| a * b)
            .sum();
        per_frame.push((dot / (na2[i] * nv2[i]).sqrt()).max(0.0));
    }
    let d_bar = per_frame.iter().sum::<f64>() / t as f64;
    Ok(SyncScore { d_bar, per_frame })
}

/// Binary cross-entropy between sync scores and alignment labels, mean over
/// the batch. Scores are clamped into `[eps_log, 1 - eps_log]` before logs.
pub fn contrastive_loss(scores: &[f64], labels: &[bool], eps_log: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(AvError::Batch("contrastive_loss on empty batch".into()));
    }
    if scores.len() != labels.len() {
        return Err(AvError::Shape(format!(
            "scores ({}) and labels ({}) length mismatch",
            scores.len(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (&d, &y) in scores.iter().zip(labels) {
        if !(0.0..=1.0).contains(&d) {
            return Err(AvError::Config(format!("score {d} outside [0,1]")));
        }
        let d = d.clamp(eps_log, 1.0 - eps_log);
        total -= if y { d.ln() } else { (1.0 - d).ln() };
    }
    Ok(total / scores.len() as f64)
}

/// Raw cosine similarity matrix `S[i,j] = cos(F_a[i], F_v[j])`, not
/// ReLU-clamped so off-diagonal structure stays visible in heatmaps.
pub fn similarity_matrix(
    f_a: &Array2<f64>,
    f_v: &Array2<f64>,
    eps: f64,
) -> Result<Array2<f64>> {
    if f_a.ncols() != f_v.ncols() {
        return Err(AvError::Shape(format!(
            "similarity_matrix feature width mismatch: {} vs {}",
            f_a.ncols(),
            f_v.ncols()
        )));
    }
    let na2 = row_sq_norms(f_a, eps);
    let nv2 = row_sq_norms(f_v, eps);
    let (ta, tv) = (f_a.nrows(), f_v.nrows());
    let mut s = Array2::zeros((ta, tv));
    for i in 0..ta {
        for j in 0..tv {
            let dot: f64 = f_a
                .row(i)
                .iter()
                .zip(f_v.row(j).iter())
                .map(|(a, b)| a * b)
                .sum();
            s[[i, j]] = dot / (na2[i] * nv2[j]).sqrt();
        }
    }
    Ok(s)
}

/// Best integer alignment offset in `[-max_shift, max_shift]`: the shift of
/// the visual stream that maximizes `frame_similarity` over the overlap.
/// Ties break toward smaller |s|, then toward negative s, realized by the
/// probe order 0, -1, +1, -2, +2, ...
pub fn best_offset(f_a: &Array2<f64>, f_v: &Array2<f64>, max_shift: usize) -> Result<i64> {
    if f_a.ncols() != f_v.ncols() {
        return Err(AvError::Shape("best_offset feature width mismatch".into()));
    }
    let (ta, tv) = (f_a.nrows() as i64, f_v.nrows() as i64);
    if max_shift as i64 >= ta.min(tv) {
        return Err(AvError::Shape(format!(
            "max_shift {max_shift} leaves no overlap for T_a={ta}, T_v={tv}"
        )));
    }
    let mut shifts = vec![0i64];
    for s in 1..=max_shift as i64 {
        shifts.push(-s);
        shifts.push(s);
    }
    let mut best: Option<(f64, i64)> = None;
    for &s in &shifts {
        let start = 0.max(-s);
        let end = ta.min(tv - s);
        if end - start < 1 {
            continue;
        }
        let a = f_a.slice(ndarray::s![start as usize..end as usize, ..]);
        let v = f_v.slice(ndarray::s![(start + s) as usize..(end + s) as usize, ..]);
        let score = frame_similarity(&a.to_owned(), &v.to_owned(), EPS_NORM)?.d_bar;
        if best.map_or(true, |(b, _)| score > b) {
            best = Some((score, s));
        }
    }
    best.map(|(_, s)| s)
        .ok_or_else(|| AvError::Shape("no shift had a usable overlap".into()))
}

// ---- tape routes (training graph) -------------------------------------------

/// Tape version of [`frame_similarity`]; returns (d_bar scalar, per-frame
/// vector) nodes.
pub fn frame_similarity_nodes(tape: &mut Tape, f_a: Var, f_v: Var, eps: f64) -> (Var, Var) {
    assert_eq!(tape.shape(f_a), tape.shape(f_v), "feature shape mismatch");
    let prod = tape.mul(f_a, f_v);
    let dots = tape.row_sum(prod);
    let a2 = tape.mul(f_a, f_a);
    let na2 = tape.row_sum(a2);
    let na2c = tape.clamp_min(na2, eps * eps);
    let v2 = tape.mul(f_v, f_v);
    let nv2 = tape.row_sum(v2);
    let nv2c = tape.clamp_min(nv2, eps * eps);
    let denom2 = tape.mul(na2c, nv2c);
    let denom = tape.sqrt(denom2);
    let cos = tape.div(dots, denom);
    let per_frame = tape.relu(cos);
    let d_bar = tape.mean_all(per_frame);
    (d_bar, per_frame)
}

/// Tape version of [`contrastive_loss`] over scalar score nodes.
pub fn bce_loss_nodes(tape: &mut Tape, scores: &[Var], labels: &[bool], eps_log: f64) -> Var {
    assert!(!scores.is_empty(), "empty contrastive batch");
    assert_eq!(scores.len(), labels.len());
    let d = tape.stack1d(scores);
    let d = tape.clamp(d, eps_log, 1.0 - eps_log);
    let n = labels.len();
    let y = tape.value(
        ndarray::ArrayD::from_shape_vec(
            ndarray::IxDyn(&[n]),
            labels.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap(),
    );
    let ones = tape.value(ndarray::ArrayD::from_elem(ndarray::IxDyn(&[n]), 1.0));
    let log_d = tape.ln(d);
    let one_minus_d = tape.sub(ones, d);
    let log_1md = tape.ln(one_minus_d);
    let one_minus_y = {
        let o = tape.value(ndarray::ArrayD::from_elem(ndarray::IxDyn(&[n]), 1.0));
        tape.sub(o, y)
    };
    let pos = tape.mul(y, log_d);
    let neg = tape.mul(one_minus_y, log_1md);
    let sum = tape.add(pos, neg);
    let mean = tape.mean_all(sum);
    tape.scale(mean, -1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_grads;
    use ndarray::array;

    fn to_dyn(a: &Array2<f64>) -> ndarray::ArrayD<f64> {
        a.clone().into_dyn()
    }

    #[test]
    fn identical_negated_orthogonal_pairs() {
        let f = array![[1.0, 2.0], [3.0, -1.0], [0.5, 0.5]];
        let s = frame_similarity(&f, &f, EPS_NORM).unwrap();
        assert_eq!(s.d_bar, 1.0, "identical features score exactly 1");

        let neg = f.mapv(|x| -x);
        let s = frame_similarity(&f, &neg, EPS_NORM).unwrap();
        assert_eq!(s.d_bar, 0.0, "negated features clamp to 0");

        let a = array![[1.0, 0.0], [0.0, 2.0]];
        let b = array![[0.0, 3.0], [4.0, 0.0]];
        let s = frame_similarity(&a, &b, EPS_NORM).unwrap();
        assert_eq!(s.d_bar, 0.0, "orthogonal frames score 0");
    }

    #[test]
    fn hand_computed_half_and_minus_half() {
        // frame cosines (0.5, -0.5): ReLU then mean gives 0.25
        let half = 3f64.sqrt() / 2.0;
        let a = array![[1.0, 0.0], [1.0, 0.0]];
        let v = array![[0.5, half], [-0.5, half]];
        let s = frame_similarity(&a, &v, EPS_NORM).unwrap();
        assert!((s.per_frame[0] - 0.5).abs() < 1e-12);
        assert!(s.per_frame[1].abs() < 1e-12);
        assert!((s.d_bar - 0.25).abs() < 1e-12);
    }

    #[test]
    fn d_bar_is_mean_of_per_frame() {
        let a = array![[0.3, 1.0], [-0.2, 0.8], [2.0, -0.6]];
        let v = array![[1.0, 0.1], [0.5, 0.5], [-0.7, 0.2]];
        let s = frame_similarity(&a, &v, EPS_NORM).unwrap();
        let mean = s.per_frame.iter().sum::<f64>() / s.per_frame.len() as f64;
        assert!((s.d_bar - mean).abs() < 1e-9);
        assert!(s.per_frame.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn scale_invariance_and_symmetry() {
        let a = array![[0.3, 1.0, -0.4], [-0.2, 0.8, 0.9]];
        let v = array![[1.0, 0.1, 0.2], [0.5, 0.5, -0.3]];
        let base = frame_similarity(&a, &v, EPS_NORM).unwrap().d_bar;
        let scaled = frame_similarity(&a.mapv(|x| 3.7 * x), &v.mapv(|x| 0.02 * x), EPS_NORM)
            .unwrap()
            .d_bar;
        assert!((base - scaled).abs() < 1e-12, "cosine is scale invariant");

        let sym = frame_similarity(&v, &a, EPS_NORM).unwrap().d_bar;
        assert!((base - sym).abs() < 1e-12);

        let s_av = similarity_matrix(&a, &v, EPS_NORM).unwrap();
        let s_va = similarity_matrix(&v, &a, EPS_NORM).unwrap();
        assert!((&s_av - &s_va.t()).iter().all(|d| d.abs() < 1e-12));
        assert!(s_av.iter().all(|&x| (-1.0..=1.0).contains(&x)));
    }

    #[test]
    fn zero_frame_scores_zero() {
        let a = array![[0.0, 0.0], [1.0, 0.0]];
        let v = array![[1.0, 1.0], [1.0, 0.0]];
        let s = frame_similarity(&a, &v, EPS_NORM).unwrap();
        assert_eq!(s.per_frame[0], 0.0);
        assert_eq!(s.per_frame[1], 1.0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = Array2::<f64>::zeros((3, 4));
        let v = Array2::<f64>::zeros((4, 4));
        assert_eq!(
            frame_similarity(&a, &v, EPS_NORM).unwrap_err().code(),
            "E_SHAPE"
        );
        let w = Array2::<f64>::zeros((3, 5));
        assert_eq!(
            similarity_matrix(&a, &w, EPS_NORM).unwrap_err().code(),
            "E_SHAPE"
        );
    }

    #[test]
    fn bce_reference_values() {
        let ln2 = std::f64::consts::LN_2;
        let l = contrastive_loss(&[0.5], &[true], EPS_LOG).unwrap();
        assert!((l - ln2).abs() < 1e-9);

        let l = contrastive_loss(&[0.5, 0.5], &[true, false], EPS_LOG).unwrap();
        assert!((l - ln2).abs() < 1e-9);

        let l = contrastive_loss(&[1.0], &[true], EPS_LOG).unwrap();
        assert!((l + (1.0 - EPS_LOG).ln()).abs() < 1e-12);
        assert!(l < 1e-6, "perfect positive is near-zero loss");

        assert_eq!(
            contrastive_loss(&[], &[], EPS_LOG).unwrap_err().code(),
            "E_BATCH"
        );
    }

    #[test]
    fn bce_is_monotone_toward_the_label() {
        let mut prev = f64::INFINITY;
        for k in 1..20 {
            let d = k as f64 / 20.0;
            let l = contrastive_loss(&[d], &[true], EPS_LOG).unwrap();
            assert!(l < prev, "loss must fall as d_bar rises toward y=1");
            prev = l;
        }
        let mut prev = f64::NEG_INFINITY;
        for k in 1..20 {
            let d = k as f64 / 20.0;
            let l = contrastive_loss(&[d], &[false], EPS_LOG).unwrap();
            assert!(l > prev, "loss must rise as d_bar rises against y=0");
            prev = l;
        }
    }

    #[test]
    fn identity_matrix_from_orthonormal_rows() {
        let f = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let s = similarity_matrix(&f, &f, EPS_NORM).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((s[[i, j]] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn best_offset_recovers_constructed_shift() {
        // f_v[t] = f_a[t + 3]; the recovering alignment is -3
        let t = 12;
        let d = 4;
        let f_a = Array2::from_shape_fn((t, d), |(i, j)| {
            ((i * 7 + j * 3) as f64 * 0.9).sin() + 0.1 * j as f64
        });
        let mut f_v = Array2::zeros((t, d));
        for i in 0..t - 3 {
            for j in 0..d {
                f_v[[i, j]] = f_a[[i + 3, j]];
            }
        }
        // pad tail with unrelated values
        for i in t - 3..t {
            for j in 0..d {
                f_v[[i, j]] = ((i * 13 + j) as f64).cos();
            }
        }
        assert_eq!(best_offset(&f_a, &f_v, 5).unwrap(), -3);
    }

    #[test]
    fn best_offset_tie_break_and_overlap_guard() {
        let c = Array2::from_elem((6, 3), 0.7);
        assert_eq!(best_offset(&c, &c, 3).unwrap(), 0, "all shifts tie -> 0");
        assert_eq!(
            best_offset(&c, &c, 6).unwrap_err().code(),
            "E_SHAPE",
            "max_shift must leave overlap"
        );
    }

    #[test]
    fn tape_route_matches_plain_route() {
        let a = array![[0.3, 1.0, -0.4], [-0.2, 0.8, 0.9], [1.1, -0.5, 0.3]];
        let v = array![[1.0, 0.1, 0.2], [0.5, 0.5, -0.3], [-0.9, 0.4, 0.8]];
        let plain = frame_similarity(&a, &v, EPS_NORM).unwrap();

        let mut tape = Tape::new();
        let fa = tape.value(to_dyn(&a));
        let fv = tape.value(to_dyn(&v));
        let (d_bar, per_frame) = frame_similarity_nodes(&mut tape, fa, fv, EPS_NORM);
        assert!((tape.get_scalar(d_bar) - plain.d_bar).abs() < 1e-12);
        for (x, y) in tape.get(per_frame).iter().zip(&plain.per_frame) {
            assert!((x - y).abs() < 1e-12);
        }

        let scores = [0.9, 0.3, 0.5];
        let labels = [true, false, true];
        let plain_loss = contrastive_loss(&scores, &labels, EPS_LOG).unwrap();
        let mut tape = Tape::new();
        let vars: Vec<Var> = scores.iter().map(|&s| tape.scalar_value(s)).collect();
        let loss = bce_loss_nodes(&mut tape, &vars, &labels, EPS_LOG);
        assert!((tape.get_scalar(loss) - plain_loss).abs() < 1e-12);
    }

    #[test]
    fn contrastive_gradients_match_finite_differences() {
        // includes a frame with a clearly negative cosine: its ReLU is
        // inactive and the gradient through it must be exactly zero
        let a = array![[0.6, 0.8, 0.1], [-0.3, 0.9, 0.4], [0.5, -0.7, 0.2]];
        let v = array![[0.5, 0.6, 0.2], [0.3, -0.8, -0.5], [0.4, 0.9, -0.1]];
        check_grads(
            &[to_dyn(&a), to_dyn(&v)],
            |t, vars| {
                let (d1, _) = frame_similarity_nodes(t, vars[0], vars[1], EPS_NORM);
                bce_loss_nodes(t, &[d1], &[true], EPS_LOG)
            },
            1e-6,
        );

        // dead-negative pair: gradient exactly zero everywhere
        let neg = a.mapv(|x| -x);
        let mut tape = Tape::new();
        let fa = tape.value(to_dyn(&a));
        let fv = tape.value(to_dyn(&neg));
        let (d_bar, _) = frame_similarity_nodes(&mut tape, fa, fv, EPS_NORM);
        let loss = bce_loss_nodes(&mut tape, &[d_bar], &[false], EPS_LOG);
        let grads = tape.backward(loss);
        let ga = grads.get(fa).unwrap();
        assert!(
            ga.iter().all(|&g| g == 0.0),
            "ReLU-dead region must have exactly zero gradient"
        );
    }
}
