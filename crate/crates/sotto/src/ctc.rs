//! CTC algebra: alignment reduction, phrase probabilities, the
//! differentiable loss, and greedy/beam decoders.
//!
//! Everything here is parameterized by the label count of the logit
//! matrix it is handed; the blank is always the last label. That keeps
//! the brute-force oracles usable on tiny alphabets while the real model
//! runs on the 28-token alphabet.
//!
//! A phrase probability is a sum over alignments:
//! Pr(p|y) = Σ over alignments π reducing to p of Π_t y[t][π_t].
//! The dynamic program below walks the usual extended label sequence
//! (ε p₁ ε p₂ … ε) in log space; products of per-frame probabilities
//! underflow long before 300 frames, log space does not.

use std::collections::HashMap;

use thiserror::Error;

use crate::alphabet::{Alignment, Phrase};
use crate::tensor::{log_sum_exp_slice, Graph, NodeId, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CtcError {
    #[error("alignment length {alignment} does not match frame count {frames}")]
    LengthMismatch { alignment: usize, frames: usize },
    #[error("phrase needs at least {required} frames but only {frames} are available")]
    Infeasible { required: usize, frames: usize },
    #[error("phrase token {token} out of range for {labels} labels (blank {blank})")]
    TokenOutOfRange {
        token: usize,
        labels: usize,
        blank: usize,
    },
    #[error("enumeration guard exceeded: N={frames}, labels={labels} (limits N<=8, labels<=5)")]
    GuardExceeded { frames: usize, labels: usize },
    #[error("beam width must be at least 1")]
    ZeroBeamWidth,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Collapse adjacent duplicates, then strip blanks — in that order.
pub fn reduce(alignment: &Alignment, blank: usize) -> Phrase {
    let mut out = Vec::new();
    let mut prev: Option<usize> = None;
    for &tok in alignment.tokens() {
        if Some(tok) != prev && tok != blank {
            out.push(tok);
        }
        prev = Some(tok);
    }
    Phrase::new(out)
}

/// Probability of one alignment under a row-stochastic matrix `y`:
/// the product of the per-frame likelihoods of its tokens.
pub fn alignment_prob(alignment: &Alignment, y: &Tensor) -> Result<f64, CtcError> {
    let frames = y.rows();
    if alignment.len() != frames {
        return Err(CtcError::LengthMismatch {
            alignment: alignment.len(),
            frames,
        });
    }
    let mut p = 1.0;
    for (t, &tok) in alignment.tokens().iter().enumerate() {
        if tok >= y.cols() {
            return Err(CtcError::TokenOutOfRange {
                token: tok,
                labels: y.cols(),
                blank: y.cols() - 1,
            });
        }
        p *= y.at(t, tok);
    }
    Ok(p)
}

/// Every alignment of length `frames` that reduces to `p`, by exhaustive
/// search over all `labels^frames` sequences. Test oracle only; the guard
/// keeps the search within tiny instances.
pub fn enumerate_alignments(
    p: &Phrase,
    frames: usize,
    labels: usize,
) -> Result<Vec<Alignment>, CtcError> {
    if frames > 8 || labels > 5 {
        return Err(CtcError::GuardExceeded { frames, labels });
    }
    let blank = labels - 1;
    if let Some(&bad) = p.tokens().iter().find(|&&t| t >= blank) {
        return Err(CtcError::TokenOutOfRange {
            token: bad,
            labels,
            blank,
        });
    }
    let mut out = Vec::new();
    let mut seq = vec![0usize; frames];
    loop {
        let candidate = Alignment::new(seq.clone());
        if reduce(&candidate, blank) == *p {
            out.push(candidate);
        }
        // Odometer increment over base-`labels` sequences.
        let mut i = frames;
        loop {
            if i == 0 {
                return Ok(out);
            }
            i -= 1;
            seq[i] += 1;
            if seq[i] < labels {
                break;
            }
            seq[i] = 0;
        }
    }
}

/// Minimum frame count that admits any alignment of `p`.
pub fn min_frames(p: &Phrase) -> usize {
    p.min_alignment_len()
}

pub fn is_feasible(p: &Phrase, frames: usize) -> bool {
    min_frames(p) <= frames
}

/// Extended label sequence ε p₁ ε p₂ … ε used by the dynamic program.
fn extended_labels(p: &Phrase, blank: usize) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * p.len() + 1);
    ext.push(blank);
    for &tok in p.tokens() {
        ext.push(tok);
        ext.push(blank);
    }
    ext
}

/// Forward DP over the extended labels, reading log-emissions through a
/// closure so both log-prob and raw-probability inputs share one core.
fn log_phrase_prob_dp(
    frames: usize,
    labels: usize,
    log_emit: impl Fn(usize, usize) -> f64,
    p: &Phrase,
) -> Result<f64, CtcError> {
    let blank = labels - 1;
    if let Some(&bad) = p.tokens().iter().find(|&&t| t >= blank) {
        return Err(CtcError::TokenOutOfRange {
            token: bad,
            labels,
            blank,
        });
    }
    if frames == 0 || !is_feasible(p, frames) {
        return Ok(f64::NEG_INFINITY);
    }
    let ext = extended_labels(p, blank);
    let s_len = ext.len();
    let neg = f64::NEG_INFINITY;
    let mut alpha = vec![neg; s_len];
    alpha[0] = log_emit(0, ext[0]);
    if s_len > 1 {
        alpha[1] = log_emit(0, ext[1]);
    }
    let mut next = vec![neg; s_len];
    for t in 1..frames {
        for s in 0..s_len {
            let mut best = alpha[s];
            if s >= 1 {
                best = log_sum_exp_slice(&[best, alpha[s - 1]]);
            }
            if s >= 2 && ext[s] != blank && ext[s] != ext[s - 2] {
                best = log_sum_exp_slice(&[best, alpha[s - 2]]);
            }
            next[s] = if best == neg {
                neg
            } else {
                best + log_emit(t, ext[s])
            };
        }
        std::mem::swap(&mut alpha, &mut next);
    }
    let tail = if s_len > 1 {
        log_sum_exp_slice(&[alpha[s_len - 1], alpha[s_len - 2]])
    } else {
        alpha[0]
    };
    Ok(tail)
}

/// log Pr(p | y) given per-frame log-probabilities (rows of `log_y` are
/// log-softmaxed). Returns −∞ when no alignment exists.
pub fn log_phrase_prob_from_log_probs(log_y: &Tensor, p: &Phrase) -> Result<f64, CtcError> {
    log_phrase_prob_dp(log_y.rows(), log_y.cols(), |t, j| log_y.at(t, j), p)
}

/// Pr(p | y) for a row-stochastic probability matrix `y`. Rows with exact
/// zeros are fine; they contribute −∞ log-emissions that drop out of the
/// sum. Returns 0 when the phrase is infeasible for the frame count.
pub fn phrase_prob(y: &Tensor, p: &Phrase) -> Result<f64, CtcError> {
    let lp = log_phrase_prob_dp(y.rows(), y.cols(), |t, j| y.at(t, j).ln(), p)?;
    Ok(lp.exp())
}

/// Row-wise log-softmax of a logit matrix, as a plain computation.
pub fn log_softmax_rows(logits: &Tensor) -> Tensor {
    let cols = logits.cols();
    let mut data = vec![0.0; logits.len()];
    for (dst, src) in data.chunks_mut(cols).zip(logits.data().chunks(cols)) {
        let lse = log_sum_exp_slice(src);
        for (d, &x) in dst.iter_mut().zip(src) {
            *d = x - lse;
        }
    }
    Tensor::new(logits.shape().to_vec(), data).expect("log-softmax of finite logits is finite")
}

/// −log Pr(p | softmax(logits)) as a plain number (no gradients).
pub fn ctc_loss_value(logits: &Tensor, p: &Phrase) -> Result<f64, CtcError> {
    let frames = logits.rows();
    if !is_feasible(p, frames) {
        return Err(CtcError::Infeasible {
            required: min_frames(p),
            frames,
        });
    }
    let log_y = log_softmax_rows(logits);
    Ok(-log_phrase_prob_from_log_probs(&log_y, p)?)
}

/// Differentiable CTC loss: appends −log Pr(p | softmax(logits)) to the
/// graph and returns the scalar node. Infeasible phrases are rejected
/// before any graph work, so a later −∞ can only mean numeric underflow.
pub fn ctc_loss(g: &mut Graph, logits: NodeId, p: &Phrase) -> Result<NodeId, CtcError> {
    let frames = g.value(logits).rows();
    let labels = g.value(logits).cols();
    let blank = labels - 1;
    if let Some(&bad) = p.tokens().iter().find(|&&t| t >= blank) {
        return Err(CtcError::TokenOutOfRange {
            token: bad,
            labels,
            blank,
        });
    }
    if !is_feasible(p, frames) {
        return Err(CtcError::Infeasible {
            required: min_frames(p),
            frames,
        });
    }
    let log_y = g.log_softmax(logits)?;
    let ext = extended_labels(p, blank);
    let s_len = ext.len();

    // alpha[s] is a scalar node holding log α_t(s). States are created
    // lazily: at frame t only s ≤ 2t+1 is reachable from the start.
    let mut alpha: Vec<Option<NodeId>> = vec![None; s_len];
    let e0 = g.at(log_y, 0, ext[0])?;
    alpha[0] = Some(e0);
    if s_len > 1 {
        let e1 = g.at(log_y, 0, ext[1])?;
        alpha[1] = Some(e1);
    }
    for t in 1..frames {
        let mut next: Vec<Option<NodeId>> = vec![None; s_len];
        let reach = s_len.min(2 * t + 2);
        for (s, slot) in next.iter_mut().enumerate().take(reach) {
            let mut incoming = Vec::with_capacity(3);
            if let Some(id) = alpha[s] {
                incoming.push(id);
            }
            if s >= 1 {
                if let Some(id) = alpha[s - 1] {
                    incoming.push(id);
                }
            }
            if s >= 2 && ext[s] != blank && ext[s] != ext[s - 2] {
                if let Some(id) = alpha[s - 2] {
                    incoming.push(id);
                }
            }
            if incoming.is_empty() {
                continue;
            }
            let merged = if incoming.len() == 1 {
                incoming[0]
            } else {
                g.lse_scalars(&incoming)?
            };
            let emit = g.at(log_y, t, ext[s])?;
            *slot = Some(g.add(merged, emit)?);
        }
        alpha = next;
    }
    let mut finals = Vec::with_capacity(2);
    if let Some(id) = alpha[s_len - 1] {
        finals.push(id);
    }
    if s_len > 1 {
        if let Some(id) = alpha[s_len - 2] {
            finals.push(id);
        }
    }
    debug_assert!(!finals.is_empty(), "feasibility was checked above");
    let log_p = if finals.len() == 1 {
        finals[0]
    } else {
        g.lse_scalars(&finals)?
    };
    Ok(g.neg(log_p))
}

/// Per-frame argmax with ties broken toward the lowest token index.
pub fn argmax_alignment(logits: &Tensor) -> Alignment {
    let cols = logits.cols();
    let tokens = logits
        .data()
        .chunks(cols)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect();
    Alignment::new(tokens)
}

/// Greedy decoding: reduce the most likely alignment.
pub fn greedy_decode(logits: &Tensor) -> Phrase {
    let blank = logits.cols() - 1;
    reduce(&argmax_alignment(logits), blank)
}

/// Prefix beam search. Alignments that reduce to the same prefix are
/// merged; the surviving candidates (plus the greedy phrase, which is
/// always seeded in) are rescored with the exact dynamic program and the
/// best phrase returned. Ties break toward the lexicographically smaller
/// token sequence.
pub fn beam_decode(logits: &Tensor, beam_width: usize) -> Result<Phrase, CtcError> {
    if beam_width == 0 {
        return Err(CtcError::ZeroBeamWidth);
    }
    let frames = logits.rows();
    let labels = logits.cols();
    let blank = labels - 1;
    let log_y = log_softmax_rows(logits);
    let neg = f64::NEG_INFINITY;

    // prefix -> (log prob ending in blank, log prob ending in non-blank)
    let mut beam: Vec<(Vec<usize>, (f64, f64))> = vec![(Vec::new(), (0.0, neg))];
    for t in 0..frames {
        let mut next: HashMap<Vec<usize>, (f64, f64)> = HashMap::new();
        for (prefix, (pb, pnb)) in &beam {
            let total = log_sum_exp_slice(&[*pb, *pnb]);
            // Stay on the same prefix via a blank.
            let entry = next.entry(prefix.clone()).or_insert((neg, neg));
            entry.0 = log_sum_exp_slice(&[entry.0, log_y.at(t, blank) + total]);
            // Stay on the same prefix by repeating its last character.
            if let Some(&last) = prefix.last() {
                let entry = next.entry(prefix.clone()).or_insert((neg, neg));
                entry.1 = log_sum_exp_slice(&[entry.1, log_y.at(t, last) + pnb]);
            }
            // Extend by each non-blank character.
            for c in 0..blank {
                let mut ext = prefix.clone();
                ext.push(c);
                let base = if Some(&c) == prefix.last() {
                    // A repeat needs a blank in between, so only the
                    // blank-ending mass extends.
                    *pb
                } else {
                    total
                };
                if base == neg {
                    continue;
                }
                let entry = next.entry(ext).or_insert((neg, neg));
                entry.1 = log_sum_exp_slice(&[entry.1, log_y.at(t, c) + base]);
            }
        }
        let mut scored: Vec<(Vec<usize>, (f64, f64))> = next.into_iter().collect();
        scored.sort_by(|a, b| {
            let sa = log_sum_exp_slice(&[a.1 .0, a.1 .1]);
            let sb = log_sum_exp_slice(&[b.1 .0, b.1 .1]);
            sb.partial_cmp(&sa)
                .expect("beam scores are never NaN")
                .then_with(|| a.0.cmp(&b.0))
        });
        scored.truncate(beam_width);
        beam = scored;
    }

    let mut candidates: Vec<Phrase> = beam
        .into_iter()
        .map(|(tokens, _)| Phrase::new(tokens))
        .collect();
    let greedy = greedy_decode(logits);
    if !candidates.contains(&greedy) {
        candidates.push(greedy);
    }
    let mut best: Option<(f64, Phrase)> = None;
    for cand in candidates {
        let score = log_phrase_prob_from_log_probs(&log_y, &cand)?;
        let better = match &best {
            None => true,
            Some((bs, bp)) => {
                score > *bs || (score == *bs && cand.tokens() < bp.tokens())
            }
        };
        if better {
            best = Some((score, cand));
        }
    }
    Ok(best.expect("candidate set is never empty").1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn al(tokens: &[usize]) -> Alignment {
        Alignment::new(tokens.to_vec())
    }

    fn ph(tokens: &[usize]) -> Phrase {
        Phrase::new(tokens.to_vec())
    }

    /// Random logits over a restricted alphabet.
    fn random_logits(rng: &mut ChaCha8Rng, frames: usize, labels: usize) -> Tensor {
        let data: Vec<f64> = (0..frames * labels).map(|_| rng.gen_range(-3.0..3.0)).collect();
        Tensor::matrix(frames, labels, data).unwrap()
    }

    fn softmax_rows(logits: &Tensor) -> Tensor {
        let log_y = log_softmax_rows(logits);
        Tensor::new(
            log_y.shape().to_vec(),
            log_y.data().iter().map(|v| v.exp()).collect(),
        )
        .unwrap()
    }

    // With labels=3: tokens 0,1 plus blank=2.
    const BLANK3: usize = 2;

    #[test]
    fn reduce_dedups_then_strips_blanks() {
        // a a b ε ε b → a b b
        let a = al(&[0, 0, 1, BLANK3, BLANK3, 1]);
        assert_eq!(reduce(&a, BLANK3), ph(&[0, 1, 1]));
    }

    #[test]
    fn reduce_of_empty_and_all_blank() {
        assert_eq!(reduce(&al(&[]), BLANK3), Phrase::empty());
        assert_eq!(reduce(&al(&[BLANK3, BLANK3, BLANK3]), BLANK3), Phrase::empty());
    }

    #[test]
    fn reduce_never_contains_blank_and_never_grows() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let len = rng.gen_range(0..10);
            let tokens: Vec<usize> = (0..len).map(|_| rng.gen_range(0..4)).collect();
            let a = al(&tokens);
            let p = reduce(&a, 3);
            assert!(p.tokens().iter().all(|&t| t != 3));
            assert!(p.len() <= a.len());
        }
    }

    #[test]
    fn alignment_prob_uniform_is_power() {
        let frames = 4;
        let labels = 4;
        let y = Tensor::matrix(frames, labels, vec![0.25; frames * labels]).unwrap();
        let p = alignment_prob(&al(&[0, 1, 3, 2]), &y).unwrap();
        assert!((p - 0.25f64.powi(4)).abs() < 1e-15);
    }

    #[test]
    fn alignment_prob_single_frame_and_one_hot() {
        let y = Tensor::matrix(1, 3, vec![0.7, 0.2, 0.1]).unwrap();
        assert!((alignment_prob(&al(&[0]), &y).unwrap() - 0.7).abs() < 1e-15);
        let hot = Tensor::matrix(2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(alignment_prob(&al(&[0, 1]), &hot).unwrap(), 1.0);
    }

    #[test]
    fn alignment_prob_length_mismatch() {
        let y = Tensor::matrix(2, 3, vec![0.5; 6]).unwrap();
        assert!(matches!(
            alignment_prob(&al(&[0]), &y),
            Err(CtcError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn enumerate_single_token_two_frames() {
        // p="a" (token 0), N=2, labels {a, b, ε}: {aa, aε, εa}.
        let got = enumerate_alignments(&ph(&[0]), 2, 3).unwrap();
        let expect: Vec<Alignment> = vec![al(&[0, 0]), al(&[0, 2]), al(&[2, 0])];
        assert_eq!(got.len(), 3);
        for e in &expect {
            assert!(got.contains(e), "missing {e:?}");
        }
    }

    #[test]
    fn enumerate_repeat_needs_separating_blank() {
        assert!(enumerate_alignments(&ph(&[0, 0]), 2, 3).unwrap().is_empty());
        let three = enumerate_alignments(&ph(&[0, 0]), 3, 3).unwrap();
        assert_eq!(three, vec![al(&[0, 2, 0])]);
    }

    #[test]
    fn enumerate_empty_phrase_is_all_blanks() {
        let got = enumerate_alignments(&Phrase::empty(), 2, 3).unwrap();
        assert_eq!(got, vec![al(&[2, 2])]);
    }

    #[test]
    fn enumerate_guard() {
        assert!(matches!(
            enumerate_alignments(&ph(&[0]), 9, 3),
            Err(CtcError::GuardExceeded { .. })
        ));
        assert!(matches!(
            enumerate_alignments(&ph(&[0]), 3, 6),
            Err(CtcError::GuardExceeded { .. })
        ));
    }

    /// Brute-force phrase probability: sum alignment products.
    fn brute_force_prob(y: &Tensor, p: &Phrase) -> f64 {
        enumerate_alignments(p, y.rows(), y.cols())
            .unwrap()
            .iter()
            .map(|a| alignment_prob(a, y).unwrap())
            .sum()
    }

    fn dp_prob(y_logits: &Tensor, p: &Phrase) -> f64 {
        let log_y = log_softmax_rows(y_logits);
        log_phrase_prob_from_log_probs(&log_y, p).unwrap().exp()
    }

    #[test]
    fn phrase_prob_single_frame_single_token() {
        let logits = Tensor::matrix(1, 3, vec![1.0, -0.5, 0.25]).unwrap();
        let y = softmax_rows(&logits);
        assert!((dp_prob(&logits, &ph(&[0])) - y.at(0, 0)).abs() < 1e-12);
    }

    #[test]
    fn phrase_prob_matches_brute_force_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..60 {
            let frames = rng.gen_range(1..=6);
            let labels = rng.gen_range(2..=4);
            let logits = random_logits(&mut rng, frames, labels);
            let y = softmax_rows(&logits);
            let plen = rng.gen_range(0..=3);
            let p = ph(&(0..plen)
                .map(|_| rng.gen_range(0..labels - 1))
                .collect::<Vec<_>>());
            let brute = brute_force_prob(&y, &p);
            let dp = dp_prob(&logits, &p);
            assert!(
                (brute - dp).abs() < 1e-9,
                "frames={frames} labels={labels} p={:?}: brute {brute} vs dp {dp}",
                p.tokens()
            );
        }
    }

    #[test]
    fn infeasible_phrase_has_zero_probability() {
        let logits = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
        // "aa" needs 3 frames.
        assert_eq!(dp_prob(&logits, &ph(&[0, 0])), 0.0);
    }

    #[test]
    fn total_probability_over_all_phrases_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let frames = 4;
        let labels = 3;
        let logits = random_logits(&mut rng, frames, labels);
        // All phrases over {0, 1} with length ≤ frames.
        let mut total = 0.0;
        let mut stack: Vec<Vec<usize>> = vec![Vec::new()];
        while let Some(tokens) = stack.pop() {
            total += dp_prob(&logits, &ph(&tokens));
            if tokens.len() < frames {
                for c in 0..labels - 1 {
                    let mut ext = tokens.clone();
                    ext.push(c);
                    stack.push(ext);
                }
            }
        }
        assert!((total - 1.0).abs() < 1e-6, "total {total}");
    }

    #[test]
    fn ctc_loss_matches_negative_log_phrase_prob() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let frames = rng.gen_range(1..=6);
            let labels = rng.gen_range(2..=4);
            let logits = random_logits(&mut rng, frames, labels);
            let plen = rng.gen_range(0..=2.min(frames));
            let p = ph(&(0..plen)
                .map(|_| rng.gen_range(0..labels - 1))
                .collect::<Vec<_>>());
            if !is_feasible(&p, frames) {
                continue;
            }
            let mut g = Graph::new();
            let l = g.input(logits.clone());
            let loss = ctc_loss(&mut g, l, &p).unwrap();
            let direct = ctc_loss_value(&logits, &p).unwrap();
            assert!((g.value(loss).item() - direct).abs() < 1e-9);
            let brute = brute_force_prob(&softmax_rows(&logits), &p);
            assert!((g.value(loss).item() + brute.ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn ctc_loss_near_zero_for_one_hot_alignment() {
        // Strongly peaked logits spelling [0, blank, 1] → "ab".
        let big = 50.0;
        let logits = Tensor::matrix(
            3,
            3,
            vec![big, 0.0, 0.0, 0.0, 0.0, big, 0.0, big, 0.0],
        )
        .unwrap();
        let mut g = Graph::new();
        let l = g.input(logits);
        let loss = ctc_loss(&mut g, l, &ph(&[0, 1])).unwrap();
        assert!(g.value(loss).item() < 1e-9);
    }

    #[test]
    fn ctc_loss_rejects_infeasible_phrase() {
        let logits = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
        let mut g = Graph::new();
        let l = g.input(logits);
        assert!(matches!(
            ctc_loss(&mut g, l, &ph(&[0, 0])),
            Err(CtcError::Infeasible {
                required: 3,
                frames: 2
            })
        ));
    }

    #[test]
    fn ctc_loss_gradient_matches_finite_differences() {
        use crate::gradcheck;
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for trial in 0..6 {
            let frames = rng.gen_range(2..=5);
            let labels = 4;
            let logits = random_logits(&mut rng, frames, labels);
            let p = ph(&[0, 1]);
            if !is_feasible(&p, frames) {
                continue;
            }
            let mut g = Graph::new();
            let l = g.input(logits.clone());
            let loss = ctc_loss(&mut g, l, &p).unwrap();
            g.backward(loss).unwrap();
            let analytic = g.grad(l).unwrap().data().to_vec();
            let shape = logits.shape().to_vec();
            let f = |vals: &[f64]| {
                let t = Tensor::new(shape.clone(), vals.to_vec()).unwrap();
                ctc_loss_value(&t, &p).unwrap()
            };
            let numeric = gradcheck::central_difference(f, logits.data(), 1e-5);
            let err = gradcheck::max_rel_error(&analytic, &numeric, 1e-6);
            assert!(err < 1e-4, "trial {trial}: rel err {err}");
        }
    }

    #[test]
    fn ctc_loss_is_permutation_covariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let frames = 5;
        let labels = 4; // tokens 0,1,2 + blank 3
        let logits = random_logits(&mut rng, frames, labels);
        let p = ph(&[0, 2]);
        let base = ctc_loss_value(&logits, &p).unwrap();
        // Swap labels 0 and 2 consistently in logits and phrase.
        let perm = [2usize, 1, 0, 3];
        let mut data = vec![0.0; logits.len()];
        for t in 0..frames {
            for j in 0..labels {
                data[t * labels + perm[j]] = logits.at(t, j);
            }
        }
        let permuted = Tensor::matrix(frames, labels, data).unwrap();
        let pp = ph(&[2, 0]);
        let swapped = ctc_loss_value(&permuted, &pp).unwrap();
        assert!((base - swapped).abs() < 1e-12);
    }

    #[test]
    fn greedy_decode_reduces_argmax() {
        // one-hot rows: a, a, ε, b → "ab"
        let logits = Tensor::matrix(
            4,
            3,
            vec![9., 0., 0., 9., 0., 0., 0., 0., 9., 0., 9., 0.],
        )
        .unwrap();
        assert_eq!(greedy_decode(&logits), ph(&[0, 1]));
    }

    #[test]
    fn greedy_decode_all_blank_is_empty() {
        let logits = Tensor::matrix(3, 3, vec![0., 0., 9., 0., 0., 9., 0., 0., 9.]).unwrap();
        assert_eq!(greedy_decode(&logits), Phrase::empty());
    }

    #[test]
    fn greedy_matches_reduce_of_argmax_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..100 {
            let frames = rng.gen_range(1..=8);
            let labels = rng.gen_range(2..=5);
            let logits = random_logits(&mut rng, frames, labels);
            let a = argmax_alignment(&logits);
            assert_eq!(greedy_decode(&logits), reduce(&a, labels - 1));
        }
    }

    #[test]
    fn greedy_ties_break_to_lowest_index() {
        let logits = Tensor::matrix(1, 3, vec![1.0, 1.0, 1.0]).unwrap();
        assert_eq!(argmax_alignment(&logits).tokens(), &[0]);
    }

    #[test]
    fn beam_width_one_on_peaked_logits_equals_greedy() {
        let logits = Tensor::matrix(
            3,
            3,
            vec![30., 0., 0., 0., 0., 30., 0., 30., 0.],
        )
        .unwrap();
        let beam = beam_decode(&logits, 1).unwrap();
        assert_eq!(beam, greedy_decode(&logits));
    }

    #[test]
    fn exhaustive_beam_matches_brute_force_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        for _ in 0..30 {
            let frames = rng.gen_range(1..=4);
            let labels = rng.gen_range(2..=4);
            let logits = random_logits(&mut rng, frames, labels);
            let y = softmax_rows(&logits);
            // Brute-force argmax over all phrases of length ≤ frames.
            let mut best: Option<(f64, Phrase)> = None;
            let mut stack: Vec<Vec<usize>> = vec![Vec::new()];
            while let Some(tokens) = stack.pop() {
                let p = ph(&tokens);
                let prob = brute_force_prob(&y, &p);
                let better = match &best {
                    None => true,
                    Some((bs, bp)) => {
                        prob > *bs + 1e-15
                            || ((prob - bs).abs() <= 1e-15 && tokens < bp.tokens().to_vec())
                    }
                };
                if better {
                    best = Some((prob, p.clone()));
                }
                if tokens.len() < frames {
                    for c in 0..labels - 1 {
                        let mut ext = tokens.clone();
                        ext.push(c);
                        stack.push(ext);
                    }
                }
            }
            let beam = beam_decode(&logits, 10_000).unwrap();
            let (best_prob, best_phrase) = best.unwrap();
            let beam_prob = brute_force_prob(&y, &beam);
            assert!(
                (beam_prob - best_prob).abs() < 1e-12,
                "beam {:?} (p={beam_prob}) vs brute {:?} (p={best_prob})",
                beam.tokens(),
                best_phrase.tokens()
            );
        }
    }

    #[test]
    fn beam_never_scores_below_greedy() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        for _ in 0..50 {
            let frames = rng.gen_range(1..=6);
            let labels = rng.gen_range(2..=5);
            let logits = random_logits(&mut rng, frames, labels);
            let log_y = log_softmax_rows(&logits);
            for width in [1, 2, 4] {
                let beam = beam_decode(&logits, width).unwrap();
                let greedy = greedy_decode(&logits);
                let bs = log_phrase_prob_from_log_probs(&log_y, &beam).unwrap();
                let gs = log_phrase_prob_from_log_probs(&log_y, &greedy).unwrap();
                assert!(bs >= gs, "width {width}: beam {bs} < greedy {gs}");
            }
        }
    }
}
