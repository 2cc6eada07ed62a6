//! Insertion head, balanced-binary-tree training targets and parallel
//! greedy insertion decoding.

use crate::ctc::{self, CtcPosterior};
use crate::encoder::JointModel;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Tape, Var};

/// Partial output without sentinels. `step` counts completed insertion
/// rounds.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub step: usize,
}

impl Hypothesis {
    pub fn new() -> Self {
        Self::default()
    }

    /// One slot before every token plus one before `</s>`.
    pub fn slots(&self) -> usize {
        self.tokens.len() + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotTarget {
    Insert(usize),
    End,
}

impl SlotTarget {
    /// Output class: 0 for end-of-slot, `1 + k` for symbol `k`.
    pub fn class(self) -> usize {
        match self {
            SlotTarget::End => 0,
            SlotTarget::Insert(k) => k + 1,
        }
    }

    pub fn from_class(class: usize) -> Self {
        match class {
            0 => SlotTarget::End,
            c => SlotTarget::Insert(c - 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotTargets(pub Vec<SlotTarget>);

impl SlotTargets {
    pub fn active_slots(&self) -> impl Iterator<Item = usize> + '_ {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, t)| **t != SlotTarget::End)
            .map(|(i, _)| i)
    }
}

/// Number of levels of the tree over `n` positions: `ceil(log2(n + 1))`.
pub fn bbt_depth(n: usize) -> usize {
    (usize::BITS - n.leading_zeros()) as usize
}

/// Level (1-based) at which each reference position is inserted. The
/// centre of every span goes first; in an even span the tie goes to the
/// side of the more recently inserted neighbour, or left when both
/// neighbours are sentinels.
pub fn bbt_levels(n: usize) -> Vec<usize> {
    fn assign(lo: usize, hi: usize, level: usize, left: usize, right: usize, out: &mut [usize]) {
        if lo >= hi {
            return;
        }
        let m = hi - lo;
        let centre = if m % 2 == 1 || right > left {
            lo + m / 2
        } else {
            lo + m / 2 - 1
        };
        out[centre] = level;
        assign(lo, centre, level + 1, left, level, out);
        assign(centre + 1, hi, level + 1, level, right, out);
    }
    let mut levels = vec![0; n];
    assign(0, n, 1, 0, 0, &mut levels);
    levels
}

/// Reference tokens present at tree level `k`, together with the token each
/// slot should receive next (or `End` for an empty span).
pub fn bbt_partial(reference: &[usize], k: usize) -> Result<(Hypothesis, SlotTargets)> {
    let depth = bbt_depth(reference.len());
    if k > depth {
        return Err(Error::Level { level: k, depth });
    }
    let levels = bbt_levels(reference.len());
    let mut tokens = Vec::new();
    let mut targets = Vec::new();
    let mut span_best: Option<(usize, usize)> = None;
    for (pos, (&tok, &lvl)) in reference.iter().zip(&levels).enumerate() {
        if lvl <= k {
            targets.push(span_target(span_best.take(), reference));
            tokens.push(tok);
        } else if span_best.is_none_or(|(best, _)| lvl < best) {
            span_best = Some((lvl, pos));
        }
    }
    targets.push(span_target(span_best, reference));
    Ok((Hypothesis { tokens, step: k }, SlotTargets(targets)))
}

fn span_target(best: Option<(usize, usize)>, reference: &[usize]) -> SlotTarget {
    match best {
        Some((_, pos)) => SlotTarget::Insert(reference[pos]),
        None => SlotTarget::End,
    }
}

/// Position log-distribution (`1 x slots`) and per-slot token
/// log-distributions (`slots x (|V| + 1)`).
#[derive(Debug, Clone, Copy)]
pub struct SlotPosteriors {
    pub position: Var,
    pub tokens: Var,
}

/// Slot `l` is represented by the token-stream row of the token to its
/// left, so rows `0..n` (all but `</s>`) map onto the `n + 1` slots.
pub fn slot_posteriors(tape: &mut Tape, model: &JointModel, h_tok: Var) -> Result<SlotPosteriors> {
    let rows = tape.shape(h_tok).0;
    if rows < 2 {
        return Err(Error::MalformedHypothesis(format!(
            "token stream has {rows} rows; both sentinels are required"
        )));
    }
    let slots = tape.slice_rows(h_tok, 0, rows - 1)?;
    let wp = tape.param(model.head_pos);
    let pos_logits = tape.affine(slots, wp)?;
    let pos_logits = tape.transpose(pos_logits);
    let position = tape.log_softmax_rows(pos_logits);
    let wt = tape.param(model.head_token);
    let tok_logits = tape.affine(slots, wt)?;
    let tokens = tape.log_softmax_rows(tok_logits);
    Ok(SlotPosteriors { position, tokens })
}

pub fn slot_argmax(tape: &Tape, post: &SlotPosteriors) -> Vec<SlotTarget> {
    let m = tape.value(post.tokens);
    (0..m.rows())
        .map(|r| SlotTarget::from_class(m.argmax_row(r)))
        .collect()
}

/// Inserts every non-`End` prediction into its slot simultaneously.
/// Returns the new hypothesis and whether every slot ended.
pub fn parallel_greedy_insert(h: &Hypothesis, predictions: &[SlotTarget]) -> Result<(Hypothesis, bool)> {
    if predictions.len() != h.slots() {
        return Err(Error::shape(
            "parallel_greedy_insert",
            (h.slots(), 1),
            (predictions.len(), 1),
        ));
    }
    if predictions.iter().all(|p| *p == SlotTarget::End) {
        return Ok((h.clone(), true));
    }
    let mut tokens = Vec::with_capacity(h.tokens.len() + predictions.len());
    for (slot, pred) in predictions.iter().enumerate() {
        if let SlotTarget::Insert(k) = pred {
            tokens.push(*k);
        }
        if let Some(t) = h.tokens.get(slot) {
            tokens.push(*t);
        }
    }
    Ok((
        Hypothesis {
            tokens,
            step: h.step + 1,
        },
        false,
    ))
}

/// Mean per-slot token cross-entropy plus the cross-entropy of the
/// position distribution against the uniform distribution over slots that
/// still expect a token (omitted when every slot is finished).
pub fn insertion_loss(tape: &mut Tape, post: &SlotPosteriors, targets: &SlotTargets) -> Result<Var> {
    let slots = tape.shape(post.tokens).0;
    if slots != targets.0.len() {
        return Err(Error::shape(
            "insertion_loss",
            (slots, 1),
            (targets.0.len(), 1),
        ));
    }
    let classes: Vec<usize> = targets.0.iter().map(|t| t.class()).collect();
    let token_term = tape.cross_entropy(post.tokens, &classes)?;
    let active: Vec<(usize, usize)> = targets.active_slots().map(|l| (0, l)).collect();
    if active.is_empty() {
        return Ok(token_term);
    }
    let position_term = tape.nll_pairs(post.position, &active)?;
    tape.combine(&[(token_term, 1.0), (position_term, 1.0)])
}

/// Produces one prediction per slot for a hypothesis.
pub trait SlotPredictor {
    fn predict(&mut self, hyp: &Hypothesis) -> Result<Vec<SlotTarget>>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeOutcome {
    pub tokens: Vec<usize>,
    /// Rounds that inserted at least one token, counting a first round
    /// that ended immediately as one.
    pub iterations: usize,
    pub forward_passes: usize,
}

/// Starts from `<s> </s>` and repeatedly inserts the argmax of every slot
/// until all slots end or `max_iters` forward passes have run.
pub fn decode_insertion<P: SlotPredictor + ?Sized>(predictor: &mut P, max_iters: usize) -> Result<DecodeOutcome> {
    if max_iters == 0 {
        return Err(Error::Config("max decode iterations must be >= 1".into()));
    }
    let mut hyp = Hypothesis::new();
    let mut inserted_rounds = 0;
    let mut passes = 0;
    while passes < max_iters {
        let predictions = predictor.predict(&hyp)?;
        passes += 1;
        let (next, finished) = parallel_greedy_insert(&hyp, &predictions)?;
        if finished {
            break;
        }
        inserted_rounds += 1;
        hyp = next;
    }
    Ok(DecodeOutcome {
        tokens: hyp.tokens,
        iterations: inserted_rounds.max(1),
        forward_passes: passes,
    })
}

/// Runs the joint model over a fixed segment of raw frames.
pub struct ModelPredictor<'a> {
    model: &'a JointModel,
    frames: &'a Matrix,
    /// Greedy CTC output of the first forward pass.
    pub first_ctc: Option<Vec<usize>>,
}

impl<'a> ModelPredictor<'a> {
    pub fn new(model: &'a JointModel, frames: &'a Matrix) -> Self {
        ModelPredictor {
            model,
            frames,
            first_ctc: None,
        }
    }
}

impl SlotPredictor for ModelPredictor<'_> {
    fn predict(&mut self, hyp: &Hypothesis) -> Result<Vec<SlotTarget>> {
        let model = self.model;
        let mut tape = model.tape();
        let x = model.embed_audio(&mut tape, self.frames, 0)?;
        let blocks = model.split_blocks(&mut tape, x)?;
        let c = model.embed_tokens(&mut tape, &hyp.tokens)?;
        let out = model.forward_joint(&mut tape, &blocks, c)?;
        if self.first_ctc.is_none() {
            let lp = ctc::ctc_head(&mut tape, model.head_ctc, out.h_feat)?;
            let post = CtcPosterior(tape.value(lp).clone());
            self.first_ctc = Some(ctc::tokens_from_labels(&ctc::ctc_greedy(&post)));
        }
        let post = slot_posteriors(&mut tape, model, out.h_tok)?;
        Ok(slot_argmax(&tape, &post))
    }
}

/// Predicts the true tree targets of a known reference; a perfect head.
#[derive(Debug, Clone)]
pub struct ReferencePredictor {
    pub reference: Vec<usize>,
}

impl SlotPredictor for ReferencePredictor {
    fn predict(&mut self, hyp: &Hypothesis) -> Result<Vec<SlotTarget>> {
        let depth = bbt_depth(self.reference.len());
        let (expected, targets) = bbt_partial(&self.reference, hyp.step.min(depth))?;
        if expected.tokens != hyp.tokens {
            return Err(Error::MalformedHypothesis(
                "hypothesis is not a tree level of the reference".into(),
            ));
        }
        Ok(targets.0)
    }
}
