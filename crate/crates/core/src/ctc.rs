//! CTC head, forward/backward recursion, greedy decoding and an
//! exhaustive-enumeration oracle.
//!
//! Everything here works on class indices: class 0 is the blank and class
//! `1 + k` is regular symbol `k`.

use crate::error::{Error, Result};
use crate::numerics::{log_add, Matrix, ParamId, Tape, Var};

pub const BLANK: usize = 0;

/// Per-frame log-probabilities over the blank plus every regular symbol.
#[derive(Debug, Clone, PartialEq)]
pub struct CtcPosterior(pub Matrix);

impl CtcPosterior {
    pub fn frames(&self) -> usize {
        self.0.rows()
    }

    pub fn classes(&self) -> usize {
        self.0.cols()
    }

    pub fn argmax_path(&self) -> Vec<usize> {
        (0..self.0.rows()).map(|r| self.0.argmax_row(r)).collect()
    }
}

pub fn labels_from_tokens(tokens: &[usize]) -> Vec<usize> {
    tokens.iter().map(|t| t + 1).collect()
}

pub fn tokens_from_labels(labels: &[usize]) -> Vec<usize> {
    labels.iter().map(|l| l - 1).collect()
}

/// Linear projection of the frame stream followed by a row log-softmax.
pub fn ctc_head(tape: &mut Tape, head: ParamId, h_feat: Var) -> Result<Var> {
    let w = tape.param(head);
    let logits = tape.affine(h_feat, w)?;
    Ok(tape.log_softmax_rows(logits))
}

/// Merges runs of equal symbols, then drops blanks.
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut last = None;
    for &a in path {
        if Some(a) != last && a != BLANK {
            out.push(a);
        }
        last = Some(a);
    }
    out
}

/// Minimum number of frames needed to emit `labels`: one per label plus a
/// separating blank between equal neighbours.
pub fn min_frames(labels: &[usize]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

pub fn is_feasible(frames: usize, labels: &[usize]) -> bool {
    min_frames(labels) <= frames
}

fn check_labels(post: &Matrix, labels: &[usize]) -> Result<()> {
    for (row, &l) in labels.iter().enumerate() {
        if l == BLANK || l >= post.cols() {
            return Err(Error::IndexOutOfRange {
                row,
                index: l,
                classes: post.cols(),
            });
        }
    }
    Ok(())
}

fn extended(labels: &[usize]) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * labels.len() + 1);
    ext.push(BLANK);
    for &l in labels {
        ext.push(l);
        ext.push(BLANK);
    }
    ext
}

fn skip_allowed(ext: &[usize], s: usize) -> bool {
    s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2]
}

fn forward(post: &Matrix, ext: &[usize]) -> Vec<Vec<f64>> {
    let (frames, states) = (post.rows(), ext.len());
    let mut alpha = vec![vec![f64::NEG_INFINITY; states]; frames];
    alpha[0][0] = post.get(0, ext[0]);
    if states > 1 {
        alpha[0][1] = post.get(0, ext[1]);
    }
    for t in 1..frames {
        for s in 0..states {
            let mut acc = alpha[t - 1][s];
            if s >= 1 {
                acc = log_add(acc, alpha[t - 1][s - 1]);
            }
            if skip_allowed(ext, s) {
                acc = log_add(acc, alpha[t - 1][s - 2]);
            }
            alpha[t][s] = if acc == f64::NEG_INFINITY {
                acc
            } else {
                acc + post.get(t, ext[s])
            };
        }
    }
    alpha
}

fn total(alpha: &[Vec<f64>]) -> f64 {
    let last = alpha.last().expect("at least one frame");
    let s = last.len();
    if s > 1 {
        log_add(last[s - 1], last[s - 2])
    } else {
        last[0]
    }
}

/// `log p(labels | posterior)` summed over all alignments; `-inf` when the
/// target cannot fit in the available frames.
pub fn ctc_log_prob(post: &CtcPosterior, labels: &[usize]) -> Result<f64> {
    let m = &post.0;
    check_labels(m, labels)?;
    if m.rows() == 0 {
        return Ok(if labels.is_empty() { 0.0 } else { f64::NEG_INFINITY });
    }
    if !is_feasible(m.rows(), labels) {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(total(&forward(m, &extended(labels))))
}

/// `-log p` and its gradient with respect to every log-probability entry.
pub fn ctc_nll_and_grad(post: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    check_labels(post, labels)?;
    let frames = post.rows();
    if frames == 0 || !is_feasible(frames, labels) {
        return Err(Error::InfeasibleTarget {
            len: labels.len(),
            frames,
        });
    }
    let ext = extended(labels);
    let states = ext.len();
    let alpha = forward(post, &ext);
    let log_p = total(&alpha);

    // beta[t][s]: log-probability of finishing from state s at frame t,
    // excluding the emission at t itself.
    let mut beta = vec![vec![f64::NEG_INFINITY; states]; frames];
    beta[frames - 1][states - 1] = 0.0;
    if states > 1 {
        beta[frames - 1][states - 2] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        for s in 0..states {
            let mut acc = beta[t + 1][s] + post.get(t + 1, ext[s]);
            if s + 1 < states {
                acc = log_add(acc, beta[t + 1][s + 1] + post.get(t + 1, ext[s + 1]));
            }
            if s + 2 < states && skip_allowed(&ext, s + 2) {
                acc = log_add(acc, beta[t + 1][s + 2] + post.get(t + 1, ext[s + 2]));
            }
            beta[t][s] = acc;
        }
    }

    let mut grad = Matrix::zeros(frames, post.cols());
    for t in 0..frames {
        for s in 0..states {
            let lp = alpha[t][s] + beta[t][s];
            if lp > f64::NEG_INFINITY {
                let g = grad.get(t, ext[s]) - (lp - log_p).exp();
                grad.set(t, ext[s], g);
            }
        }
    }
    Ok((-log_p, grad))
}

/// Differentiable `-log p(labels)` for log-probabilities held on the tape.
pub fn ctc_loss(tape: &mut Tape, logprobs: Var, labels: &[usize]) -> Result<Var> {
    let (nll, grad) = ctc_nll_and_grad(tape.value(logprobs), labels)?;
    tape.precomputed(logprobs, nll, grad)
}

/// Per-frame argmax followed by [`collapse`].
pub fn ctc_greedy(post: &CtcPosterior) -> Vec<usize> {
    collapse(&post.argmax_path())
}

pub const BRUTE_FORCE_MAX_FRAMES: usize = 8;
pub const BRUTE_FORCE_MAX_CLASSES: usize = 4;

/// Enumerates every alignment path and sums the probability of those that
/// collapse to `labels`. Returns the log of that sum.
pub fn brute_force_ctc(post: &CtcPosterior, labels: &[usize]) -> Result<f64> {
    let m = &post.0;
    let (frames, classes) = m.shape();
    if frames > BRUTE_FORCE_MAX_FRAMES || classes > BRUTE_FORCE_MAX_CLASSES {
        return Err(Error::EnumerationTooLarge { frames, classes });
    }
    check_labels(m, labels)?;
    let mut path = vec![0usize; frames];
    let mut sum = 0.0;
    loop {
        if collapse(&path) == labels {
            let lp: f64 = path.iter().enumerate().map(|(t, &a)| m.get(t, a)).sum();
            sum += lp.exp();
        }
        // odometer increment
        let mut t = 0;
        loop {
            if t == frames {
                return Ok(sum.ln());
            }
            path[t] += 1;
            if path[t] < classes {
                break;
            }
            path[t] = 0;
            t += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::log_softmax_rows;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_post(rng: &mut ChaCha8Rng, frames: usize, classes: usize) -> CtcPosterior {
        let data = (0..frames * classes).map(|_| rng.random_range(-2.0..2.0)).collect();
        CtcPosterior(log_softmax_rows(&Matrix::from_vec(frames, classes, data).unwrap()))
    }

    #[test]
    fn collapse_rule() {
        // (a, a, <b>, a, b, b) -> (a, a, b) with a = 1, b = 2
        assert_eq!(collapse(&[1, 1, 0, 1, 2, 2]), vec![1, 1, 2]);
        assert!(collapse(&[0, 0, 0]).is_empty());
        let once = collapse(&[2, 2, 0, 1, 0, 0, 3]);
        assert_eq!(collapse(&once), once);
        // Re-collapsing merges legitimately repeated symbols.
        assert_eq!(collapse(&collapse(&[1, 0, 1])), vec![1]);
    }

    #[test]
    fn single_frame_single_label() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let post = random_post(&mut rng, 1, 3);
        let lp = ctc_log_prob(&post, &[2]).unwrap();
        assert!((lp - post.0.get(0, 2)).abs() < 1e-12);
    }

    #[test]
    fn two_frames_three_alignments() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let post = random_post(&mut rng, 2, 3);
        let p = |t: usize, c: usize| post.0.get(t, c).exp();
        let expect = (p(0, 1) * p(1, 1) + p(0, 1) * p(1, 0) + p(0, 0) * p(1, 1)).ln();
        assert!((ctc_log_prob(&post, &[1]).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn empty_target_is_all_blank_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let post = random_post(&mut rng, 4, 3);
        let expect: f64 = (0..4).map(|t| post.0.get(t, BLANK)).sum();
        assert!((ctc_log_prob(&post, &[]).unwrap() - expect).abs() < 1e-12);
        assert!((brute_force_ctc(&post, &[]).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn infeasible_is_negative_infinity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let post = random_post(&mut rng, 2, 3);
        assert_eq!(ctc_log_prob(&post, &[1, 1]).unwrap(), f64::NEG_INFINITY);
        assert_eq!(ctc_log_prob(&post, &[1, 2, 1]).unwrap(), f64::NEG_INFINITY);
        assert!(ctc_log_prob(&post, &[1, 2]).unwrap().is_finite());
        assert!(matches!(
            ctc_nll_and_grad(&post.0, &[1, 1]),
            Err(Error::InfeasibleTarget { len: 2, frames: 2 })
        ));
    }

    #[test]
    fn feasibility_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let n = rng.random_range(0..6);
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(1..3)).collect();
            for t in 0..10 {
                if is_feasible(t, &labels) {
                    assert!(is_feasible(t + 1, &labels));
                }
            }
        }
    }

    #[test]
    fn oracle_agreement_exhaustive() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for frames in 1..=6 {
            let post = random_post(&mut rng, frames, 3);
            let mut total = 0.0;
            for len in 0..=3u32 {
                for code in 0..2usize.pow(len) {
                    let labels: Vec<usize> = (0..len).map(|i| 1 + ((code >> i) & 1)).collect();
                    let fast = ctc_log_prob(&post, &labels).unwrap();
                    let slow = brute_force_ctc(&post, &labels).unwrap();
                    if slow == f64::NEG_INFINITY {
                        assert_eq!(fast, f64::NEG_INFINITY);
                    } else {
                        assert!((fast - slow).abs() <= 1e-8, "{frames} {labels:?}");
                        total += slow.exp();
                    }
                }
            }
            if frames <= 3 {
                // every path collapses to some sequence of length <= 3
                assert!((total - 1.0).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn brute_force_refuses_large_problems() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let post = random_post(&mut rng, 9, 3);
        assert!(matches!(
            brute_force_ctc(&post, &[1]),
            Err(Error::EnumerationTooLarge { .. })
        ));
        let post = random_post(&mut rng, 3, 5);
        assert!(brute_force_ctc(&post, &[1]).is_err());
    }

    #[test]
    fn greedy_examples() {
        let mut m = Matrix::filled(3, 3, -5.0);
        for t in 0..3 {
            m.set(t, BLANK, -0.1);
        }
        assert!(ctc_greedy(&CtcPosterior(m.clone())).is_empty());
        m.set(0, 1, 0.0);
        m.set(2, 1, 0.0);
        assert_eq!(ctc_greedy(&CtcPosterior(m)), vec![1, 1]);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let post = random_post(&mut rng, 7, 4);
            assert_eq!(ctc_greedy(&post), collapse(&post.argmax_path()));
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let post = random_post(&mut rng, 5, 3);
        let labels = [1, 2, 2];
        let (_, grad) = ctc_nll_and_grad(&post.0, &labels).unwrap();
        let eps = 1e-6;
        for t in 0..5 {
            for c in 0..3 {
                let mut plus = post.0.clone();
                plus.set(t, c, plus.get(t, c) + eps);
                let mut minus = post.0.clone();
                minus.set(t, c, minus.get(t, c) - eps);
                let fp = -ctc_log_prob(&CtcPosterior(plus), &labels).unwrap();
                let fm = -ctc_log_prob(&CtcPosterior(minus), &labels).unwrap();
                let fd = (fp - fm) / (2.0 * eps);
                assert!((fd - grad.get(t, c)).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn rejects_blank_or_out_of_range_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let post = random_post(&mut rng, 3, 3);
        assert!(ctc_log_prob(&post, &[0]).is_err());
        assert!(ctc_log_prob(&post, &[3]).is_err());
    }
}
