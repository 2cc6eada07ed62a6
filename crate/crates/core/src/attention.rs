//! Multi-head attention and its block-restricted variants.
//!
//! Block self-attention lets the queries of block `b` see keys only from
//! blocks `b-1` and `b`; the extended form appends an extra memory `M`
//! (the token stream) to the keys and values.

use std::cell::Cell;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, ParamId, Tape, Var};

thread_local! {
    static SCORE_EVALUATIONS: Cell<u64> = const { Cell::new(0) };
}

/// Number of query-key scores computed on this thread since the last reset.
pub fn score_evaluations() -> u64 {
    SCORE_EVALUATIONS.with(Cell::get)
}

pub fn reset_score_evaluations() {
    SCORE_EVALUATIONS.with(|c| c.set(0));
}

/// Projection weights of one attention layer. `wq`, `wk` and `wv` are
/// `d x d` with head `h` occupying columns `h*d/H .. (h+1)*d/H`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
}

pub fn multi_head(tape: &mut Tape, q: Var, k: Var, v: Var, p: &AttentionParams) -> Result<Var> {
    let wq_var = tape.param(p.wq);
    let d = tape.shape(wq_var).0;
    let (tq, qc) = tape.shape(q);
    let (tk, kc) = tape.shape(k);
    let (tv, vc) = tape.shape(v);
    if qc != d || kc != d || vc != d {
        return Err(Error::shape("multi_head", (tq, qc), (tk, kc)));
    }
    if tk != tv {
        return Err(Error::shape("multi_head", (tk, kc), (tv, vc)));
    }
    if p.heads == 0 || d % p.heads != 0 {
        return Err(Error::Config(format!(
            "model width {d} not divisible by {} heads",
            p.heads
        )));
    }
    let head_dim = d / p.heads;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let (wq, wk, wv, wo) = (
        tape.param(p.wq),
        tape.param(p.wk),
        tape.param(p.wv),
        tape.param(p.wo),
    );
    let qp = tape.matmul(q, wq)?;
    let kp = tape.matmul(k, wk)?;
    let vp = tape.matmul(v, wv)?;
    SCORE_EVALUATIONS.with(|c| c.set(c.get() + (tq * tk) as u64));

    let mut heads = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let cols = h * head_dim..(h + 1) * head_dim;
        let qh = tape.slice_cols(qp, cols.start, cols.end)?;
        let kh = tape.slice_cols(kp, cols.start, cols.end)?;
        let vh = tape.slice_cols(vp, cols.start, cols.end)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, scale);
        let weights = tape.softmax_rows(scores);
        heads.push(tape.matmul(weights, vh)?);
    }
    let concat = tape.concat_cols(&heads)?;
    tape.matmul(concat, wo)
}

pub fn self_attention(tape: &mut Tape, q: Var, p: &AttentionParams) -> Result<Var> {
    multi_head(tape, q, q, q, p)
}

/// Row ranges of consecutive blocks of at most `block_len` rows. The last
/// block may be shorter.
pub fn block_ranges(rows: usize, block_len: usize) -> Result<Vec<Range<usize>>> {
    if block_len == 0 {
        return Err(Error::Config("block length must be at least 1".into()));
    }
    Ok((0..rows)
        .step_by(block_len)
        .map(|start| start..(start + block_len).min(rows))
        .collect())
}

pub fn block_partition(q: &Matrix, block_len: usize) -> Result<Vec<Matrix>> {
    if q.rows() == 0 {
        return Err(Error::EmptyInput("block_partition of an empty matrix".into()));
    }
    Ok(block_ranges(q.rows(), block_len)?
        .into_iter()
        .map(|r| q.slice_rows(r.start, r.end))
        .collect())
}

/// Attention of block `q_b` over `[q_prev; q_b]`.
pub fn block_sa(tape: &mut Tape, q_b: Var, q_prev: Option<Var>, p: &AttentionParams) -> Result<Var> {
    ext_block_sa(tape, q_b, q_prev, None, p)
}

/// Attention of block `q_b` over `[q_prev; q_b; m]`.
pub fn ext_block_sa(
    tape: &mut Tape,
    q_b: Var,
    q_prev: Option<Var>,
    m: Option<Var>,
    p: &AttentionParams,
) -> Result<Var> {
    let width = tape.shape(q_b).1;
    let mut keys = Vec::with_capacity(3);
    if let Some(prev) = q_prev {
        if tape.shape(prev).0 > 0 {
            keys.push(prev);
        }
    }
    keys.push(q_b);
    if let Some(m) = m {
        let (rows, cols) = tape.shape(m);
        if cols != width {
            return Err(Error::shape("ext_block_sa", tape.shape(q_b), (rows, cols)));
        }
        if rows > 0 {
            keys.push(m);
        }
    }
    let kv = tape.concat_rows(&keys)?;
    multi_head(tape, q_b, kv, kv, p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{softmax_rows, ParamStore};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(d: usize, heads: usize, rng: &mut ChaCha8Rng) -> (ParamStore, AttentionParams) {
        let mut store = ParamStore::new();
        let p = AttentionParams {
            wq: store.add_xavier("wq", d, d, rng).unwrap(),
            wk: store.add_xavier("wk", d, d, rng).unwrap(),
            wv: store.add_xavier("wv", d, d, rng).unwrap(),
            wo: store.add_xavier("wo", d, d, rng).unwrap(),
            heads,
        };
        (store, p)
    }

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    /// Full attention of every query over the keys allowed by `mask`,
    /// computed with plain loops.
    fn masked_oracle(
        store: &ParamStore,
        p: &AttentionParams,
        q: &Matrix,
        kv: &Matrix,
        mask: impl Fn(usize, usize) -> bool,
    ) -> Matrix {
        let d = q.cols();
        let dh = d / p.heads;
        let qp = q.matmul(store.value(p.wq)).unwrap();
        let kp = kv.matmul(store.value(p.wk)).unwrap();
        let vp = kv.matmul(store.value(p.wv)).unwrap();
        let mut concat = Matrix::zeros(q.rows(), d);
        for h in 0..p.heads {
            for i in 0..q.rows() {
                let allowed: Vec<usize> = (0..kv.rows()).filter(|&j| mask(i, j)).collect();
                let mut scores = Matrix::zeros(1, allowed.len());
                for (n, &j) in allowed.iter().enumerate() {
                    let mut s = 0.0;
                    for c in h * dh..(h + 1) * dh {
                        s += qp.get(i, c) * kp.get(j, c);
                    }
                    scores.set(0, n, s / (dh as f64).sqrt());
                }
                let w = softmax_rows(&scores);
                for c in h * dh..(h + 1) * dh {
                    let mut acc = 0.0;
                    for (n, &j) in allowed.iter().enumerate() {
                        acc += w.get(0, n) * vp.get(j, c);
                    }
                    concat.set(i, c, acc);
                }
            }
        }
        concat.matmul(store.value(p.wo)).unwrap()
    }

    #[test]
    fn single_key_returns_projected_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (store, p) = params(8, 2, &mut rng);
        let q = random(&mut rng, 3, 8);
        let kv = random(&mut rng, 1, 8);
        let mut tape = Tape::with_params(&store);
        let (qv, kvv) = (tape.constant(q), tape.constant(kv.clone()));
        let out = multi_head(&mut tape, qv, kvv, kvv, &p).unwrap();
        let expect = kv
            .matmul(store.value(p.wv))
            .unwrap()
            .matmul(store.value(p.wo))
            .unwrap();
        for r in 0..3 {
            for c in 0..8 {
                assert!((tape.value(out).get(r, c) - expect.get(0, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_projections_one_hot_inputs() {
        let mut store = ParamStore::new();
        let p = AttentionParams {
            wq: store.add("wq", Matrix::identity(3)).unwrap(),
            wk: store.add("wk", Matrix::identity(3)).unwrap(),
            wv: store.add("wv", Matrix::identity(3)).unwrap(),
            wo: store.add("wo", Matrix::identity(3)).unwrap(),
            heads: 1,
        };
        let x = Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        let mut tape = Tape::with_params(&store);
        let xv = tape.constant(x);
        let out = self_attention(&mut tape, xv, &p).unwrap();
        // Query e0 scores (1, 0)/sqrt(3) against keys (e0, e1).
        let s = 1.0 / 3f64.sqrt();
        let w0 = s.exp() / (s.exp() + 1.0);
        let expect = Matrix::from_rows(&[[w0, 1.0 - w0, 0.0], [1.0 - w0, w0, 0.0]]);
        assert!(tape.value(out).max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn joint_key_value_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (store, p) = params(8, 4, &mut rng);
        let q = random(&mut rng, 2, 8);
        let kv = random(&mut rng, 5, 8);
        let perm = [3, 0, 4, 1, 2];
        let shuffled = Matrix::from_rows(&perm.map(|i| kv.row(i).to_vec()));
        let mut tape = Tape::with_params(&store);
        let (qv, a, b) = (tape.constant(q), tape.constant(kv), tape.constant(shuffled));
        let x = multi_head(&mut tape, qv, a, a, &p).unwrap();
        let y = multi_head(&mut tape, qv, b, b, &p).unwrap();
        assert!(tape.value(x).max_abs_diff(tape.value(y)) < 1e-12);
    }

    #[test]
    fn key_value_row_mismatch_is_shape_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (store, p) = params(4, 1, &mut rng);
        let mut tape = Tape::with_params(&store);
        let q = tape.constant(Matrix::zeros(2, 4));
        let k = tape.constant(Matrix::zeros(3, 4));
        let v = tape.constant(Matrix::zeros(2, 4));
        assert!(matches!(
            multi_head(&mut tape, q, k, v, &p),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn self_attention_single_row_and_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (store, p) = params(8, 2, &mut rng);
        let one = random(&mut rng, 1, 8);
        let four = random(&mut rng, 4, 8);
        let mut tape = Tape::with_params(&store);
        let ov = tape.constant(one.clone());
        let out = self_attention(&mut tape, ov, &p).unwrap();
        let expect = one
            .matmul(store.value(p.wv))
            .unwrap()
            .matmul(store.value(p.wo))
            .unwrap();
        assert!(tape.value(out).max_abs_diff(&expect) < 1e-12);

        let fv = tape.constant(four.clone());
        let sa = self_attention(&mut tape, fv, &p).unwrap();
        let mh = multi_head(&mut tape, fv, fv, fv, &p).unwrap();
        assert_eq!(tape.value(sa), tape.value(mh));
        let oracle = masked_oracle(&store, &p, &four, &four, |_, _| true);
        assert!(tape.value(sa).max_abs_diff(&oracle) < 1e-12);
    }

    #[test]
    fn partition_layouts() {
        let q = Matrix::from_vec(4, 1, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let blocks = block_partition(&q, 2).unwrap();
        assert_eq!(blocks.iter().map(Matrix::rows).collect::<Vec<_>>(), [2, 2]);

        let q5 = Matrix::from_vec(5, 1, vec![0.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
        let blocks = block_partition(&q5, 2).unwrap();
        assert_eq!(blocks.iter().map(Matrix::rows).collect::<Vec<_>>(), [2, 2, 1]);
        let refs: Vec<&Matrix> = blocks.iter().collect();
        assert_eq!(Matrix::concat_rows(&refs).unwrap(), q5);

        assert_eq!(block_partition(&q5, 7).unwrap(), vec![q5.clone()]);
        assert!(matches!(block_partition(&q5, 0), Err(Error::Config(_))));
    }

    #[test]
    fn first_block_equals_self_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (store, p) = params(8, 2, &mut rng);
        let q0 = random(&mut rng, 3, 8);
        let mut tape = Tape::with_params(&store);
        let v = tape.constant(q0);
        let b = block_sa(&mut tape, v, None, &p).unwrap();
        let s = self_attention(&mut tape, v, &p).unwrap();
        assert_eq!(tape.value(b), tape.value(s));
    }

    #[test]
    fn second_block_sees_four_keys() {
        // T = 4, B = 2: queries 2-3 attend to keys 0-3.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (store, p) = params(4, 1, &mut rng);
        let q = random(&mut rng, 4, 4);
        let mut tape = Tape::with_params(&store);
        let prev = tape.constant(q.slice_rows(0, 2));
        let cur = tape.constant(q.slice_rows(2, 4));
        reset_score_evaluations();
        let out = block_sa(&mut tape, cur, Some(prev), &p).unwrap();
        assert_eq!(score_evaluations(), 2 * 4);
        let oracle = masked_oracle(&store, &p, &q, &q, |_, _| true).slice_rows(2, 4);
        assert!(tape.value(out).max_abs_diff(&oracle) < 1e-12);
    }

    #[test]
    fn extra_memory_participates() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (store, p) = params(8, 2, &mut rng);
        let prev = random(&mut rng, 2, 8);
        let cur = random(&mut rng, 2, 8);
        let mem = random(&mut rng, 3, 8);
        let mut tape = Tape::with_params(&store);
        let (pv, cv) = (tape.constant(prev.clone()), tape.constant(cur.clone()));

        let empty = tape.constant(Matrix::zeros(0, 8));
        let a = ext_block_sa(&mut tape, cv, Some(pv), Some(empty), &p).unwrap();
        let b = block_sa(&mut tape, cv, Some(pv), &p).unwrap();
        assert_eq!(tape.value(a), tape.value(b));

        let mv = tape.constant(mem.clone());
        let ext = ext_block_sa(&mut tape, cv, Some(pv), Some(mv), &p).unwrap();
        let keys = Matrix::concat_rows(&[&prev, &cur, &mem]).unwrap();
        let oracle = masked_oracle(&store, &p, &cur, &keys, |_, _| true);
        assert!(tape.value(ext).max_abs_diff(&oracle) < 1e-12);

        let doubled = Matrix::concat_rows(&[&mem, &mem.slice_rows(0, 1)]).unwrap();
        let dv = tape.constant(doubled);
        let ext2 = ext_block_sa(&mut tape, cv, Some(pv), Some(dv), &p).unwrap();
        assert!(tape.value(ext).max_abs_diff(tape.value(ext2)) > 1e-6);

        let bad = tape.constant(Matrix::zeros(1, 4));
        assert!(matches!(
            ext_block_sa(&mut tape, cv, Some(pv), Some(bad), &p),
            Err(Error::Shape { .. })
        ));
    }

    fn blockwise(store: &ParamStore, p: &AttentionParams, q: &Matrix, b: usize) -> Matrix {
        let mut tape = Tape::with_params(store);
        let mut outs = Vec::new();
        let mut prev = None;
        for r in block_ranges(q.rows(), b).unwrap() {
            let cur = tape.constant(q.slice_rows(r.start, r.end));
            outs.push(block_sa(&mut tape, cur, prev, p).unwrap());
            prev = Some(cur);
        }
        let all = tape.concat_rows(&outs).unwrap();
        tape.value(all).clone()
    }

    #[test]
    fn block_sa_equals_masked_full_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let b = [2, 4, 8][rng.random_range(0..3)];
            let t = rng.random_range(1..=32);
            let (store, p) = params(8, 2, &mut rng);
            let q = random(&mut rng, t, 8);
            let got = blockwise(&store, &p, &q, b);
            let oracle = masked_oracle(&store, &p, &q, &q, |i, j| {
                let blk = i / b;
                j < (blk + 1) * b && j + b >= blk * b
            });
            assert!(got.max_abs_diff(&oracle) <= 1e-12);
        }
    }

    #[test]
    fn score_count_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (store, p) = params(4, 2, &mut rng);
        for (t, b) in [(17, 4), (32, 8), (5, 2), (1, 3)] {
            let q = random(&mut rng, t, 4);
            reset_score_evaluations();
            blockwise(&store, &p, &q, b);
            assert!(score_evaluations() <= (2 * b * b * t.div_ceil(b)) as u64);
        }
    }

    #[test]
    fn future_blocks_do_not_leak() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (store, p) = params(8, 4, &mut rng);
        let q = random(&mut rng, 12, 8);
        let mut perturbed = q.clone();
        for r in 8..12 {
            for v in perturbed.row_mut(r) {
                *v += 3.0;
            }
        }
        let a = blockwise(&store, &p, &q, 4).slice_rows(0, 8);
        let b = blockwise(&store, &p, &perturbed, 4).slice_rows(0, 8);
        assert_eq!(a.data(), b.data());
    }
}
