//! Audio/token embeddings and the shared-parameter two-stream encoder.
//!
//! Every layer updates the frame stream block by block with extended block
//! self-attention (keys: previous block, current block, token stream) and
//! the token stream with full attention over all frame blocks plus itself.
//! Both use the same projection weights.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{block_ranges, ext_block_sa, multi_head, AttentionParams};
use crate::error::{Error, Result};
use crate::numerics::{xavier_uniform, Matrix, ParamId, ParamStore, Tape, Var};

/// Token positions are offset so they never collide with frame positions.
pub const TOKEN_POSITION_OFFSET: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub block_len: usize,
    pub subsample: usize,
    pub feat_dim: usize,
    pub vocab_size: usize,
    pub max_iters: usize,
    pub positional_encoding: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 4,
            heads: 4,
            d_model: 64,
            block_len: 8,
            subsample: 4,
            feat_dim: 16,
            vocab_size: 16,
            max_iters: 5,
            positional_encoding: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.layers == 0 {
            return fail("layers must be >= 1".into());
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return fail(format!(
                "d_model {} must be divisible by heads {}",
                self.d_model, self.heads
            ));
        }
        if self.block_len == 0 {
            return fail("block length must be >= 1".into());
        }
        if self.subsample == 0 {
            return fail("subsample factor must be >= 1".into());
        }
        if self.max_iters == 0 {
            return fail("max decode iterations must be >= 1".into());
        }
        if self.feat_dim == 0 || self.vocab_size == 0 {
            return fail("feature dimension and vocabulary size must be >= 1".into());
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocabulary {
        Vocabulary::new(self.vocab_size)
    }
}

/// Regular symbols are `0..size`; reserved symbols occupy embedding rows
/// 0..4 and regular symbol `k` uses row `4 + k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocabulary {
    size: usize,
}

impl Vocabulary {
    pub const BLANK: usize = 0;
    pub const SOS: usize = 1;
    pub const EOS: usize = 2;
    pub const END: usize = 3;
    pub const RESERVED: usize = 4;

    pub fn new(size: usize) -> Self {
        Vocabulary { size }
    }

    /// Number of regular symbols.
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn embedding_rows(&self) -> usize {
        self.size + Self::RESERVED
    }

    pub fn check(&self, token: usize) -> Result<()> {
        if token < self.size {
            Ok(())
        } else {
            Err(Error::Vocabulary {
                token,
                size: self.size,
            })
        }
    }

    pub fn embedding_index(&self, token: usize) -> usize {
        token + Self::RESERVED
    }

    /// CTC outputs: class 0 is the blank, class `1 + k` is symbol `k`.
    pub fn ctc_classes(&self) -> usize {
        self.size + 1
    }

    /// Insertion outputs: class 0 terminates a slot, class `1 + k` inserts `k`.
    pub fn insertion_classes(&self) -> usize {
        self.size + 1
    }
}

pub fn sinusoid(position: usize, width: usize) -> Vec<f64> {
    (0..width)
        .map(|i| {
            let rate = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / width as f64);
            let angle = position as f64 * rate;
            if i % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

fn positional_table(start: usize, rows: usize, width: usize) -> Matrix {
    let mut m = Matrix::zeros(rows, width);
    for r in 0..rows {
        m.row_mut(r).copy_from_slice(&sinusoid(start + r, width));
    }
    m
}

/// Concatenates groups of `s` consecutive frames; a trailing remainder
/// shorter than `s` is dropped.
pub fn stack_frames(x: &Matrix, s: usize) -> Matrix {
    let rows = x.rows() / s;
    let cols = x.cols() * s;
    Matrix::from_vec(rows, cols, x.data()[..rows * cols].to_vec()).expect("length matches")
}

#[derive(Debug, Clone, Copy)]
pub struct LayerParams {
    pub attention: AttentionParams,
    pub ffn1: ParamId,
    pub ffn2: ParamId,
    pub norm1: ParamId,
    pub norm2: ParamId,
}

#[derive(Debug, Clone)]
pub struct JointModel {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub layers: Vec<LayerParams>,
    pub embed_audio: ParamId,
    pub embed_token: ParamId,
    pub head_ctc: ParamId,
    pub head_token: ParamId,
    pub head_pos: ParamId,
}

/// Output of the joint pass: frame stream and token stream.
#[derive(Debug, Clone, Copy)]
pub struct EncoderOutput {
    pub h_feat: Var,
    pub h_tok: Var,
}

impl JointModel {
    /// Seeded Xavier-uniform initialisation; affine layers carry their bias
    /// in an extra zero-initialised last row, norms start at gain 1 shift 0.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = cfg.d_model;
        let vocab = cfg.vocab();

        let embed_audio = add_affine(
            &mut params,
            "embed.audio",
            cfg.subsample * cfg.feat_dim,
            d,
            &mut rng,
        )?;
        let mut layers = Vec::with_capacity(cfg.layers);
        for j in 1..=cfg.layers {
            let mut square = |name: &str| params.add_xavier(format!("layer{j}.{name}"), d, d, &mut rng);
            let attention = AttentionParams {
                wq: square("wq")?,
                wk: square("wk")?,
                wv: square("wv")?,
                wo: square("wo")?,
                heads: cfg.heads,
            };
            let ffn1 = add_affine(&mut params, &format!("layer{j}.ffn1"), d, 4 * d, &mut rng)?;
            let ffn2 = add_affine(&mut params, &format!("layer{j}.ffn2"), 4 * d, d, &mut rng)?;
            let norm = || Matrix::concat_rows(&[&Matrix::filled(1, d, 1.0), &Matrix::zeros(1, d)]);
            let norm1 = params.add(format!("layer{j}.norm1"), norm()?)?;
            let norm2 = params.add(format!("layer{j}.norm2"), norm()?)?;
            layers.push(LayerParams {
                attention,
                ffn1,
                ffn2,
                norm1,
                norm2,
            });
        }
        // Unit-variance token vectors so identities are not swamped by the
        // positional encodings.
        let rows = vocab.embedding_rows();
        let table = xavier_uniform(rows, d, &mut rng).scaled(((rows + d) as f64 / 2.0).sqrt());
        let embed_token = params.add("embed.token", table)?;
        let head_ctc = add_affine(&mut params, "head.ctc", d, vocab.ctc_classes(), &mut rng)?;
        let head_token = add_affine(&mut params, "head.token", d, vocab.insertion_classes(), &mut rng)?;
        let head_pos = add_affine(&mut params, "head.pos", d, 1, &mut rng)?;
        Ok(JointModel {
            cfg,
            params,
            layers,
            embed_audio,
            embed_token,
            head_ctc,
            head_token,
            head_pos,
        })
    }

    pub fn vocab(&self) -> Vocabulary {
        self.cfg.vocab()
    }

    pub fn tape(&self) -> Tape<'_> {
        Tape::with_params(&self.params)
    }

    /// Frame-stacks `x`, projects to the model width and adds positional
    /// encodings starting at `start_position`.
    pub fn embed_audio(&self, tape: &mut Tape, x: &Matrix, start_position: usize) -> Result<Var> {
        let s = self.cfg.subsample;
        if x.cols() != self.cfg.feat_dim {
            return Err(Error::shape(
                "embed_audio",
                x.shape(),
                (x.rows(), self.cfg.feat_dim),
            ));
        }
        if x.rows() < s {
            return Err(Error::EmptyInput(format!(
                "{} frames is fewer than the subsampling factor {s}",
                x.rows()
            )));
        }
        let stacked = tape.constant(stack_frames(x, s));
        let w = tape.param(self.embed_audio);
        let projected = tape.affine(stacked, w)?;
        self.add_positions(tape, projected, start_position)
    }

    /// Looks up embedding-table rows (reserved indices allowed) and adds
    /// positional encodings in the token position space.
    pub fn embed_indices(&self, tape: &mut Tape, indices: &[usize]) -> Result<Var> {
        if indices.is_empty() {
            return Err(Error::EmptyInput("empty token sequence".into()));
        }
        let table = tape.param(self.embed_token);
        let looked_up = tape.embedding(table, indices)?;
        self.add_positions(tape, looked_up, TOKEN_POSITION_OFFSET)
    }

    /// Embeds `<s> tokens.. </s>`.
    pub fn embed_tokens(&self, tape: &mut Tape, tokens: &[usize]) -> Result<Var> {
        let vocab = self.vocab();
        let mut indices = Vec::with_capacity(tokens.len() + 2);
        indices.push(Vocabulary::SOS);
        for &t in tokens {
            vocab.check(t)?;
            indices.push(vocab.embedding_index(t));
        }
        indices.push(Vocabulary::EOS);
        self.embed_indices(tape, &indices)
    }

    /// Embedded `<s>` alone: the token memory used while segmenting.
    pub fn start_memory(&self) -> Result<Matrix> {
        let mut tape = self.tape();
        let m = self.embed_indices(&mut tape, &[Vocabulary::SOS])?;
        Ok(tape.value(m).clone())
    }

    fn add_positions(&self, tape: &mut Tape, x: Var, start: usize) -> Result<Var> {
        if !self.cfg.positional_encoding {
            return Ok(x);
        }
        let (rows, cols) = tape.shape(x);
        let pe = tape.constant(positional_table(start, rows, cols));
        tape.add(x, pe)
    }

    /// Splits an embedded frame sequence into blocks of the configured length.
    pub fn split_blocks(&self, tape: &mut Tape, x_emb: Var) -> Result<Vec<Var>> {
        let rows = tape.shape(x_emb).0;
        block_ranges(rows, self.cfg.block_len)?
            .into_iter()
            .map(|r| tape.slice_rows(x_emb, r.start, r.end))
            .collect()
    }

    fn feed_forward(&self, tape: &mut Tape, layer: &LayerParams, x: Var) -> Result<Var> {
        let norm2 = tape.param(layer.norm2);
        let (w1, w2) = (tape.param(layer.ffn1), tape.param(layer.ffn2));
        let n = tape.layer_norm(x, norm2)?;
        let h = tape.affine(n, w1)?;
        let h = tape.relu(h);
        let h = tape.affine(h, w2)?;
        tape.add(x, h)
    }

    /// One frame-stream update of a single block: pre-norm extended block
    /// self-attention with residual, then the feed-forward sub-layer.
    /// `normed_prev` and `normed_memory` are already layer-normalised.
    fn frame_block(
        &self,
        tape: &mut Tape,
        layer: &LayerParams,
        z_b: Var,
        normed_b: Var,
        normed_prev: Option<Var>,
        normed_memory: Var,
    ) -> Result<Var> {
        let att = ext_block_sa(tape, normed_b, normed_prev, Some(normed_memory), &layer.attention)?;
        let z = tape.add(z_b, att)?;
        self.feed_forward(tape, layer, z)
    }

    /// The full two-stream pass over embedded frame blocks and an embedded
    /// hypothesis.
    pub fn forward_joint(&self, tape: &mut Tape, blocks: &[Var], c_emb: Var) -> Result<EncoderOutput> {
        if blocks.is_empty() {
            return Err(Error::EmptyInput("forward_joint needs at least one block".into()));
        }
        let (n_hyp, width) = tape.shape(c_emb);
        if n_hyp == 0 {
            return Err(Error::EmptyInput("forward_joint needs a non-empty hypothesis".into()));
        }
        for b in blocks {
            if tape.shape(*b).1 != width {
                return Err(Error::shape("forward_joint", tape.shape(*b), (n_hyp, width)));
            }
        }
        let mut z: Vec<Var> = blocks.to_vec();
        let mut y = c_emb;
        for layer in &self.layers {
            let norm1 = tape.param(layer.norm1);
            let normed: Vec<Var> = z
                .iter()
                .map(|b| tape.layer_norm(*b, norm1))
                .collect::<Result<_>>()?;
            let y_norm = tape.layer_norm(y, norm1)?;

            let mut next = Vec::with_capacity(z.len());
            for b in 0..z.len() {
                let prev = if b == 0 { None } else { Some(normed[b - 1]) };
                next.push(self.frame_block(tape, layer, z[b], normed[b], prev, y_norm)?);
            }

            let mut keys = normed.clone();
            keys.push(y_norm);
            let kv = tape.concat_rows(&keys)?;
            let att = multi_head(tape, y_norm, kv, kv, &layer.attention)?;
            let y_res = tape.add(y, att)?;
            y = self.feed_forward(tape, layer, y_res)?;
            z = next;
        }
        let h_feat = tape.concat_rows(&z)?;
        Ok(EncoderOutput { h_feat, h_tok: y })
    }

    /// Frame stream only, with the same token memory at every layer. This is
    /// the offline counterpart of [`JointModel::forward_frames_causal`].
    pub fn forward_frames_static(&self, tape: &mut Tape, blocks: &[Var], memory: Var) -> Result<Vec<Var>> {
        let mut z: Vec<Var> = blocks.to_vec();
        for layer in &self.layers {
            let norm1 = tape.param(layer.norm1);
            let normed: Vec<Var> = z
                .iter()
                .map(|b| tape.layer_norm(*b, norm1))
                .collect::<Result<_>>()?;
            let mem = tape.layer_norm(memory, norm1)?;
            let mut next = Vec::with_capacity(z.len());
            for b in 0..z.len() {
                let prev = if b == 0 { None } else { Some(normed[b - 1]) };
                next.push(self.frame_block(tape, layer, z[b], normed[b], prev, mem)?);
            }
            z = next;
        }
        Ok(z)
    }

    pub fn new_cache(&self) -> Result<BlockCache> {
        Ok(BlockCache {
            prev: vec![None; self.cfg.layers],
            block_index: 0,
            memory: self.start_memory()?,
        })
    }

    /// Advances the frame stream by one embedded block using only the
    /// previous block held in `cache`; returns the last-layer activations.
    pub fn forward_frames_causal(&self, block: &Matrix, cache: &mut BlockCache) -> Result<Matrix> {
        if cache.prev.len() != self.layers.len() {
            return Err(Error::Config(format!(
                "cache has {} layers, model has {}",
                cache.prev.len(),
                self.layers.len()
            )));
        }
        if block.cols() != self.cfg.d_model {
            return Err(Error::shape(
                "forward_frames_causal",
                block.shape(),
                (block.rows(), self.cfg.d_model),
            ));
        }
        let mut tape = self.tape();
        let memory = tape.constant(cache.memory.clone());
        let mut z = tape.constant(block.clone());
        let mut inputs = Vec::with_capacity(self.layers.len());
        for (j, layer) in self.layers.iter().enumerate() {
            inputs.push(tape.value(z).clone());
            let norm1 = tape.param(layer.norm1);
            let normed = tape.layer_norm(z, norm1)?;
            let prev = match &cache.prev[j] {
                Some(m) => {
                    let v = tape.constant(m.clone());
                    Some(tape.layer_norm(v, norm1)?)
                }
                None => None,
            };
            let mem = tape.layer_norm(memory, norm1)?;
            z = self.frame_block(&mut tape, layer, z, normed, prev, mem)?;
        }
        for (slot, input) in cache.prev.iter_mut().zip(inputs) {
            *slot = Some(input);
        }
        cache.block_index += 1;
        Ok(tape.value(z).clone())
    }
}

fn add_affine(
    params: &mut ParamStore,
    name: &str,
    inputs: usize,
    outputs: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ParamId> {
    let w = crate::numerics::xavier_uniform(inputs, outputs, rng);
    params.add(name, Matrix::concat_rows(&[&w, &Matrix::zeros(1, outputs)])?)
}

/// Streaming state of the frame stream: each layer's input activations for
/// the most recent block, plus the fixed `<s>` token memory.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockCache {
    pub prev: Vec<Option<Matrix>>,
    pub block_index: usize,
    pub memory: Matrix,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            layers: 2,
            heads: 2,
            d_model: 8,
            block_len: 2,
            subsample: 2,
            feat_dim: 3,
            vocab_size: 5,
            max_iters: 5,
            positional_encoding: true,
        }
    }

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn audio_length_arithmetic() {
        let cfg = ModelConfig {
            subsample: 4,
            ..tiny()
        };
        let model = JointModel::new(cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = model.tape();
        let e8 = model.embed_audio(&mut tape, &random(&mut rng, 8, 3), 0).unwrap();
        assert_eq!(tape.shape(e8), (2, 8));
        let x10 = random(&mut rng, 10, 3);
        let e10 = model.embed_audio(&mut tape, &x10, 0).unwrap();
        assert_eq!(tape.shape(e10), (2, 8));
        // Frames 8-9 are dropped: changing them leaves the output untouched.
        let mut x10b = x10.clone();
        x10b.row_mut(9).fill(100.0);
        let e10b = model.embed_audio(&mut tape, &x10b, 0).unwrap();
        assert_eq!(tape.value(e10), tape.value(e10b));
        assert!(matches!(
            model.embed_audio(&mut tape, &random(&mut rng, 3, 3), 0),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn identity_audio_embedding() {
        let cfg = ModelConfig {
            subsample: 1,
            feat_dim: 8,
            positional_encoding: false,
            ..tiny()
        };
        let mut model = JointModel::new(cfg, 1).unwrap();
        let id = Matrix::concat_rows(&[&Matrix::identity(8), &Matrix::zeros(1, 8)]).unwrap();
        model.params.get_mut(model.embed_audio).value = id;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, 5, 8);
        let mut tape = model.tape();
        let e = model.embed_audio(&mut tape, &x, 0).unwrap();
        assert!(tape.value(e).max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn token_embedding_construction() {
        let model = JointModel::new(tiny(), 4).unwrap();
        let mut tape = model.tape();
        let sos = model.embed_indices(&mut tape, &[Vocabulary::SOS]).unwrap();
        assert_eq!(tape.shape(sos), (1, 8));

        let e = model.embed_tokens(&mut tape, &[2, 2]).unwrap();
        let v = tape.value(e).clone();
        assert_eq!(v.rows(), 4);
        assert!(v.slice_rows(1, 2).max_abs_diff(&v.slice_rows(2, 3)) > 1e-3);

        let table = model.params.value(model.embed_token);
        for (pos, idx) in [Vocabulary::SOS, 6, 6, Vocabulary::EOS].iter().enumerate() {
            let pe = sinusoid(TOKEN_POSITION_OFFSET + pos, 8);
            for c in 0..8 {
                assert!((v.get(pos, c) - (table.get(*idx, c) + pe[c])).abs() < 1e-12);
            }
        }
        assert!(matches!(
            model.embed_tokens(&mut tape, &[5]),
            Err(Error::Vocabulary { token: 5, size: 5 })
        ));
    }

    #[test]
    fn joint_shapes() {
        let cfg = ModelConfig {
            subsample: 1,
            feat_dim: 8,
            ..tiny()
        };
        let model = JointModel::new(cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut tape = model.tape();
        let x = model.embed_audio(&mut tape, &random(&mut rng, 6, 8), 0).unwrap();
        let blocks = model.split_blocks(&mut tape, x).unwrap();
        assert_eq!(blocks.len(), 3);
        let c = model.embed_tokens(&mut tape, &[1]).unwrap();
        let out = model.forward_joint(&mut tape, &blocks, c).unwrap();
        assert_eq!(tape.shape(out.h_feat), (6, 8));
        assert_eq!(tape.shape(out.h_tok), (3, 8));

        let narrow = tape.constant(Matrix::zeros(2, 4));
        assert!(matches!(
            model.forward_joint(&mut tape, &blocks, narrow),
            Err(Error::Shape { .. })
        ));
        assert!(model.forward_joint(&mut tape, &[], c).is_err());
    }

    #[test]
    fn single_layer_matches_hand_wiring() {
        let cfg = ModelConfig {
            layers: 1,
            subsample: 1,
            feat_dim: 8,
            block_len: 4,
            ..tiny()
        };
        let model = JointModel::new(cfg, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(&mut rng, 3, 8);
        let mut tape = model.tape();
        let xe = model.embed_audio(&mut tape, &x, 0).unwrap();
        let c = model.embed_indices(&mut tape, &[Vocabulary::SOS]).unwrap();
        let out = model.forward_joint(&mut tape, &[xe], c).unwrap();

        // Hand wiring: z + ExtBlockSA(LN(z), M = LN(<s>)) then FFN.
        let layer = &model.layers[0];
        let n1 = tape.param(layer.norm1);
        let zn = tape.layer_norm(xe, n1).unwrap();
        let mn = tape.layer_norm(c, n1).unwrap();
        let att = ext_block_sa(&mut tape, zn, None, Some(mn), &layer.attention).unwrap();
        let r = tape.add(xe, att).unwrap();
        let n2 = tape.param(layer.norm2);
        let rn = tape.layer_norm(r, n2).unwrap();
        let (w1, w2) = (tape.param(layer.ffn1), tape.param(layer.ffn2));
        let h = tape.affine(rn, w1).unwrap();
        let h = tape.relu(h);
        let h = tape.affine(h, w2).unwrap();
        let expect = tape.add(r, h).unwrap();
        assert!(tape.value(out.h_feat).max_abs_diff(tape.value(expect)) < 1e-12);
    }

    #[test]
    fn shared_attention_weights_reach_token_stream() {
        let cfg = ModelConfig {
            subsample: 1,
            feat_dim: 8,
            ..tiny()
        };
        let mut model = JointModel::new(cfg, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = random(&mut rng, 4, 8);
        let run = |model: &JointModel| {
            let mut tape = model.tape();
            let xe = model.embed_audio(&mut tape, &x, 0).unwrap();
            let blocks = model.split_blocks(&mut tape, xe).unwrap();
            let c = model.embed_tokens(&mut tape, &[0, 3]).unwrap();
            let out = model.forward_joint(&mut tape, &blocks, c).unwrap();
            tape.value(out.h_tok).clone()
        };
        let before = run(&model);
        let wq = model.layers[0].attention.wq;
        model.params.get_mut(wq).value.fill(0.0);
        let after = run(&model);
        assert!(before.max_abs_diff(&after) > 1e-6);
    }

    fn causal_run(model: &JointModel, emb: &Matrix) -> Vec<Matrix> {
        let mut cache = model.new_cache().unwrap();
        block_ranges(emb.rows(), model.cfg.block_len)
            .unwrap()
            .into_iter()
            .map(|r| {
                model
                    .forward_frames_causal(&emb.slice_rows(r.start, r.end), &mut cache)
                    .unwrap()
            })
            .collect()
    }

    #[test]
    fn causal_matches_offline_static_pass() {
        let model = JointModel::new(tiny(), 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let emb = random(&mut rng, 7, 8);
        let streamed = causal_run(&model, &emb);

        let mut tape = model.tape();
        let ev = tape.constant(emb.clone());
        let blocks = model.split_blocks(&mut tape, ev).unwrap();
        let mem = tape.constant(model.start_memory().unwrap());
        let offline = model.forward_frames_static(&mut tape, &blocks, mem).unwrap();
        assert_eq!(offline.len(), streamed.len());
        for (a, b) in offline.iter().zip(&streamed) {
            assert_eq!(tape.value(*a).data(), b.data());
        }
    }

    #[test]
    fn causal_first_block_has_no_previous_keys() {
        let model = JointModel::new(tiny(), 13).unwrap();
        let cache = model.new_cache().unwrap();
        assert!(cache.prev.iter().all(Option::is_none));
        assert_eq!(cache.block_index, 0);
        let bad = Matrix::zeros(2, 5);
        let mut cache = cache;
        assert!(matches!(
            model.forward_frames_causal(&bad, &mut cache),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn causal_outputs_ignore_future_and_far_past() {
        let model = JointModel::new(tiny(), 14).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let emb = random(&mut rng, 16, 8);
        let base = causal_run(&model, &emb);

        // Future perturbation: blocks > 3 leave blocks 0..=3 untouched.
        let mut future = emb.clone();
        for r in 8..16 {
            future.row_mut(r).fill(5.0);
        }
        let pert = causal_run(&model, &future);
        for b in 0..4 {
            assert_eq!(base[b].data(), pert[b].data());
        }

        // Receptive field: J*B + B = 6 frames. Changing frame 1 cannot
        // reach block 7 (frames 14..16).
        let mut past = emb.clone();
        past.row_mut(1).fill(-3.0);
        let pert = causal_run(&model, &past);
        assert_eq!(base[7].data(), pert[7].data());
        assert_ne!(base[1].data(), pert[1].data());
    }
}
