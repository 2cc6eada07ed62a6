//! Finite-difference verification of every differentiable building block,
//! shared by the `gradcheck` command and the test suites.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::{ext_block_sa, multi_head, AttentionParams};
use crate::ctc;
use crate::encoder::{JointModel, ModelConfig};
use crate::error::Result;
use crate::insertion::{bbt_partial, insertion_loss, slot_posteriors};
use crate::numerics::{grad_check, GradCheckReport, Matrix, ParamStore, Tape, Var};
use crate::train::utterance_loss;

pub const SUITE_EPSILON: f64 = 1e-5;
pub const SUITE_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub report: GradCheckReport,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error <= SUITE_TOLERANCE
    }
}

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let n = Normal::new(0.0, std).expect("valid std");
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| n.sample(rng)).collect()).expect("shape")
}

/// Reduces a matrix to a scalar through a fixed random projection and a
/// square, so every entry influences the loss.
fn probe(tape: &mut Tape, x: Var, rng_seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let cols = tape.shape(x).1;
    let r = tape.constant(gaussian(cols, 2, 1.0, &mut rng));
    let y = tape.matmul(x, r)?;
    Ok(tape.sum_squares(y))
}

fn attention_store(d: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<(ParamStore, AttentionParams)> {
    let mut store = ParamStore::new();
    let scale = 1.0 / (d as f64).sqrt();
    let mut add = |name: &str| store.add(name, gaussian(d, d, scale, rng));
    let p = AttentionParams {
        wq: add("wq")?,
        wk: add("wk")?,
        wv: add("wv")?,
        wo: add("wo")?,
        heads,
    };
    Ok((store, p))
}

fn tiny_model() -> Result<JointModel> {
    JointModel::new(
        ModelConfig {
            layers: 2,
            heads: 2,
            d_model: 8,
            block_len: 2,
            subsample: 2,
            feat_dim: 3,
            vocab_size: 3,
            max_iters: 5,
            positional_encoding: true,
        },
        17,
    )
}

pub fn check_linear() -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let w = store.add("w", gaussian(5, 3, 0.5, &mut rng))?;
    let x = gaussian(6, 4, 1.0, &mut rng);
    grad_check(&store, SUITE_EPSILON, |tape| {
        let xv = tape.constant(x.clone());
        let wv = tape.param(w);
        let y = tape.affine(xv, wv)?;
        probe(tape, y, 2)
    })
}

pub fn check_softmax() -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let logits = store.add("logits", gaussian(4, 5, 1.0, &mut rng))?;
    let targets = [(0, 1), (1, 4), (2, 0), (3, 2)];
    grad_check(&store, SUITE_EPSILON, |tape| {
        let l = tape.param(logits);
        let p = tape.softmax_rows(l);
        let lp = tape.log(p);
        let a = tape.nll_pairs(lp, &targets)?;
        let b = tape.log_softmax_rows(l);
        let b = probe(tape, b, 4)?;
        tape.combine(&[(a, 1.0), (b, 0.1)])
    })
}

pub fn check_attention() -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut store, p) = attention_store(8, 2, &mut rng)?;
    let q = store.add("q", gaussian(3, 8, 1.0, &mut rng))?;
    let kv = store.add("kv", gaussian(5, 8, 1.0, &mut rng))?;
    grad_check(&store, SUITE_EPSILON, |tape| {
        let (qv, kvv) = (tape.param(q), tape.param(kv));
        let y = multi_head(tape, qv, kvv, kvv, &p)?;
        probe(tape, y, 6)
    })
}

pub fn check_ext_block_sa() -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut store, p) = attention_store(8, 2, &mut rng)?;
    let block = store.add("block", gaussian(3, 8, 1.0, &mut rng))?;
    let prev = store.add("prev", gaussian(3, 8, 1.0, &mut rng))?;
    let memory = store.add("memory", gaussian(2, 8, 1.0, &mut rng))?;
    grad_check(&store, SUITE_EPSILON, |tape| {
        let (b, pr, m) = (tape.param(block), tape.param(prev), tape.param(memory));
        let y = ext_block_sa(tape, b, Some(pr), Some(m), &p)?;
        probe(tape, y, 8)
    })
}

pub fn check_ctc_loss() -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    let logits = store.add("logits", gaussian(7, 4, 1.0, &mut rng))?;
    let labels = [1, 3, 3, 2];
    grad_check(&store, SUITE_EPSILON, |tape| {
        let l = tape.param(logits);
        let lp = tape.log_softmax_rows(l);
        ctc::ctc_loss(tape, lp, &labels)
    })
}

pub fn check_insertion_loss() -> Result<GradCheckReport> {
    let mut model = tiny_model()?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let states = model.params.add("probe.states", gaussian(3, 8, 1.0, &mut rng))?;
    let (_, targets) = bbt_partial(&[2, 0, 1, 2, 0], 1)?;
    let model = &model;
    grad_check(&model.params, SUITE_EPSILON, |tape| {
        let h = tape.param(states);
        let post = slot_posteriors(tape, model, h)?;
        insertion_loss(tape, &post, &targets)
    })
}

pub fn check_joint_loss() -> Result<GradCheckReport> {
    let model = tiny_model()?;
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let features = gaussian(14, 3, 1.0, &mut rng);
    let tokens = [1, 0, 2];
    grad_check(&model.params, SUITE_EPSILON, |tape| {
        let loss = utterance_loss(&model, tape, &features, &tokens, 1, 0.5)?
            .expect("feasible target");
        Ok(loss.total)
    })
}

pub fn run_suite() -> Result<Vec<SuiteEntry>> {
    let checks: [(&'static str, fn() -> Result<GradCheckReport>); 7] = [
        ("linear", check_linear),
        ("softmax", check_softmax),
        ("attention", check_attention),
        ("ext_block_sa", check_ext_block_sa),
        ("joint_loss", check_joint_loss),
        ("ctc_loss", check_ctc_loss),
        ("insertion_loss", check_insertion_loss),
    ];
    checks
        .into_iter()
        .map(|(name, f)| Ok(SuiteEntry { name, report: f()? }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        for entry in run_suite().unwrap() {
            assert!(
                entry.passed(),
                "{}: {} at {}",
                entry.name,
                entry.report.max_rel_error,
                entry.report.worst
            );
        }
    }
}
