//! Joint CTC + insertion training with plain SGD.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ctc;
use crate::encoder::JointModel;
use crate::error::{Error, Result};
use crate::insertion::{bbt_depth, bbt_partial, insertion_loss, slot_posteriors};
use crate::numerics::{Matrix, Tape, Var};
use crate::synth::Utterance;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Optimizer {
    Sgd,
    Adam,
}

impl std::str::FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::Adam),
            other => Err(Error::Config(format!("optimizer must be sgd or adam, got {other:?}"))),
        }
    }
}

impl std::fmt::Display for Optimizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Optimizer::Sgd => "sgd",
            Optimizer::Adam => "adam",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSpec {
    pub optimizer: Optimizer,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight of the CTC term; the insertion term gets `1 - lambda`.
    pub lambda: f64,
    pub clip_norm: f64,
    /// Fraction of all steps over which the learning rate ramps up linearly.
    pub warmup_fraction: f64,
    /// After warm-up, decay the learning rate linearly to zero at the last step.
    pub decay: bool,
    /// Stop after the first epoch whose mean loss is at or below this.
    pub target_loss: Option<f64>,
    pub seed: u64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        TrainSpec {
            optimizer: Optimizer::Adam,
            epochs: 50,
            batch_size: 8,
            learning_rate: 0.003,
            lambda: 0.5,
            clip_norm: 1.0,
            warmup_fraction: 0.1,
            decay: true,
            target_loss: None,
            seed: 1,
        }
    }
}

impl TrainSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if !(0.0..=1.0).contains(&self.lambda) {
            return fail("lambda must lie in [0, 1]");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch size must be >= 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning rate must be positive");
        }
        if !(self.clip_norm > 0.0) {
            return fail("clip norm must be positive");
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return fail("warmup fraction must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_ctc: f64,
    pub mean_insertion: f64,
    pub skipped: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub steps: usize,
    pub skipped: usize,
}

/// Loss terms of one utterance at one tree level.
pub struct UtteranceLoss {
    pub total: Var,
    pub ctc: f64,
    pub insertion: f64,
}

/// Builds `lambda * ctc_nll + (1 - lambda) * insertion_loss` for one
/// utterance whose hypothesis is the reference's tree level `level`.
/// Returns `None` when the CTC term is needed but the target cannot fit.
pub fn utterance_loss(
    model: &JointModel,
    tape: &mut Tape,
    features: &Matrix,
    tokens: &[usize],
    level: usize,
    lambda: f64,
) -> Result<Option<UtteranceLoss>> {
    let labels = ctc::labels_from_tokens(tokens);
    let frames = features.rows() / model.cfg.subsample;
    if lambda > 0.0 && !ctc::is_feasible(frames, &labels) {
        return Ok(None);
    }
    let (hyp, targets) = bbt_partial(tokens, level)?;
    let x = model.embed_audio(tape, features, 0)?;
    let blocks = model.split_blocks(tape, x)?;
    let c = model.embed_tokens(tape, &hyp.tokens)?;
    let out = model.forward_joint(tape, &blocks, c)?;

    let mut terms = Vec::with_capacity(2);
    let mut ctc_value = 0.0;
    let mut ins_value = 0.0;
    if lambda > 0.0 {
        let lp = ctc::ctc_head(tape, model.head_ctc, out.h_feat)?;
        let nll = ctc::ctc_loss(tape, lp, &labels)?;
        ctc_value = tape.value(nll).item();
        terms.push((nll, lambda));
    }
    if lambda < 1.0 {
        let post = slot_posteriors(tape, model, out.h_tok)?;
        let ins = insertion_loss(tape, &post, &targets)?;
        ins_value = tape.value(ins).item();
        terms.push((ins, 1.0 - lambda));
    }
    let total = tape.combine(&terms)?;
    Ok(Some(UtteranceLoss {
        total,
        ctc: ctc_value,
        insertion: ins_value,
    }))
}

fn infeasible_count(model: &JointModel, data: &[Utterance]) -> usize {
    data.iter()
        .filter(|u| {
            let frames = u.features.rows() / model.cfg.subsample;
            !ctc::is_feasible(frames, &ctc::labels_from_tokens(&u.tokens))
        })
        .count()
}

/// Trains in place. `on_epoch` sees each epoch's statistics as they finish.
/// On a non-finite loss the parameters of the last good step are restored
/// and [`Error::NonFinite`] is returned.
pub fn train(
    model: &mut JointModel,
    data: &[Utterance],
    spec: &TrainSpec,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainReport> {
    spec.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput("no training utterances".into()));
    }
    if spec.lambda > 0.0 && infeasible_count(model, data) * 20 > data.len() {
        return Err(Error::Config(
            "more than 5% of the training targets do not fit their frames after subsampling".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let steps_per_epoch = data.len().div_ceil(spec.batch_size);
    let total_steps = steps_per_epoch * spec.epochs;
    let warmup = (spec.warmup_fraction * total_steps as f64).ceil() as usize;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut moments: Vec<(Matrix, Matrix)> = model
        .params
        .iter()
        .map(|p| (Matrix::zeros(p.value.rows(), p.value.cols()), Matrix::zeros(p.value.rows(), p.value.cols())))
        .collect();
    let mut report = TrainReport {
        epochs: Vec::new(),
        steps: 0,
        skipped: 0,
    };

    for epoch in 1..=spec.epochs {
        let began = Instant::now();
        order.shuffle(&mut rng);
        let (mut sum, mut sum_ctc, mut sum_ins, mut count, mut skipped) = (0.0, 0.0, 0.0, 0usize, 0usize);
        for batch in order.chunks(spec.batch_size) {
            model.params.zero_grad();
            let mut used = 0usize;
            let mut batch_loss = 0.0;
            for &i in batch {
                let utt = &data[i];
                let level = rng.random_range(0..=bbt_depth(utt.tokens.len()));
                let mut tape = model.tape();
                let Some(loss) = utterance_loss(model, &mut tape, &utt.features, &utt.tokens, level, spec.lambda)?
                else {
                    skipped += 1;
                    continue;
                };
                let value = tape.value(loss.total).item();
                if !value.is_finite() {
                    return Err(Error::NonFinite(format!("loss {value} in epoch {epoch}")));
                }
                let grads = tape.backward(loss.total)?;
                drop(tape);
                grads.accumulate_into(&mut model.params);
                batch_loss += value;
                sum_ctc += loss.ctc;
                sum_ins += loss.insertion;
                used += 1;
            }
            if used == 0 {
                continue;
            }
            sum += batch_loss;
            count += used;
            report.steps += 1;
            let lr = if report.steps <= warmup {
                spec.learning_rate * report.steps as f64 / warmup as f64
            } else if spec.decay {
                let left = total_steps.saturating_sub(report.steps) as f64;
                spec.learning_rate * left / (total_steps - warmup).max(1) as f64
            } else {
                spec.learning_rate
            };
            let norm = model.params.grad_norm() / used as f64;
            if !norm.is_finite() {
                return Err(Error::NonFinite(format!("gradient norm {norm} in epoch {epoch}")));
            }
            let scale = (spec.clip_norm / norm).min(1.0) / used as f64;
            match spec.optimizer {
                Optimizer::Sgd => {
                    for p in model.params.iter_mut() {
                        let g = p.grad.scaled(-lr * scale);
                        p.value.add_assign(&g);
                    }
                }
                Optimizer::Adam => {
                    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
                    let t = report.steps as i32;
                    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
                    for (p, (m, v)) in model.params.iter_mut().zip(moments.iter_mut()) {
                        let g = p.grad.data();
                        let (md, vd) = (m.data_mut(), v.data_mut());
                        for (k, w) in p.value.data_mut().iter_mut().enumerate() {
                            let gk = g[k] * scale;
                            md[k] = b1 * md[k] + (1.0 - b1) * gk;
                            vd[k] = b2 * vd[k] + (1.0 - b2) * gk * gk;
                            *w -= lr * (md[k] / c1) / ((vd[k] / c2).sqrt() + eps);
                        }
                    }
                }
            }
        }
        report.skipped += skipped;
        let n = count.max(1) as f64;
        let stats = EpochStats {
            epoch,
            mean_loss: sum / n,
            mean_ctc: sum_ctc / n,
            mean_insertion: sum_ins / n,
            skipped,
            seconds: began.elapsed().as_secs_f64(),
        };
        on_epoch(&stats);
        let done = spec.target_loss.is_some_and(|t| stats.mean_loss <= t);
        report.epochs.push(stats);
        if done {
            break;
        }
    }
    Ok(report)
}
