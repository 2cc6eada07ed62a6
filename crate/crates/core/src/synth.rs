//! Synthetic acoustic task: every token is a fixed random template vector,
//! emitted for a few frames with Gaussian noise, surrounded by near-silent
//! padding.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthTaskSpec {
    pub vocab_size: usize,
    pub feat_dim: usize,
    /// Inclusive range of units emitted per token.
    pub frames_per_token: (usize, usize),
    /// Raw frames per unit; set to the subsampling factor so every token
    /// survives subsampling with 2-4 encoder frames.
    pub frame_unit: usize,
    pub noise_std: f64,
    pub silence_std: f64,
    /// Inclusive range of leading/trailing silence units per utterance.
    pub pad_units: (usize, usize),
    /// Inclusive range of silence units between utterances of a stream.
    pub gap_units: (usize, usize),
    /// Inclusive range of reference lengths.
    pub length: (usize, usize),
    pub train_utterances: usize,
    pub test_utterances: usize,
    pub seed: u64,
}

impl Default for SynthTaskSpec {
    fn default() -> Self {
        SynthTaskSpec {
            vocab_size: 16,
            feat_dim: 16,
            frames_per_token: (2, 4),
            frame_unit: 4,
            noise_std: 0.3,
            silence_std: 0.02,
            pad_units: (1, 6),
            gap_units: (20, 32),
            length: (1, 12),
            train_utterances: 2000,
            test_utterances: 200,
            seed: 7,
        }
    }
}

impl SynthTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size < 2 {
            return bad(format!("vocabulary size {} < 2", self.vocab_size));
        }
        if self.feat_dim == 0 || self.frame_unit == 0 {
            return bad("feature dimension and frame unit must be >= 1".into());
        }
        for (name, (lo, hi)) in [
            ("frames_per_token", self.frames_per_token),
            ("pad_units", self.pad_units),
            ("gap_units", self.gap_units),
            ("length", self.length),
        ] {
            if lo > hi {
                return bad(format!("{name}: empty range {lo}..={hi}"));
            }
        }
        if self.frames_per_token.0 == 0 || self.length.0 == 0 {
            return bad("tokens and references need at least one frame/token".into());
        }
        if !(self.noise_std >= 0.0 && self.silence_std >= 0.0) {
            return bad("noise levels must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub features: Matrix,
    pub tokens: Vec<usize>,
    /// Raw-frame span of the speech part (excluding padding).
    pub speech_start: usize,
    pub speech_end: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub templates: Matrix,
    pub train: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

/// An unsegmented recording with the true utterance spans in raw frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Stream {
    pub features: Matrix,
    pub utterances: Vec<StreamUtterance>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamUtterance {
    pub start: usize,
    pub end: usize,
    pub speech_start: usize,
    pub speech_end: usize,
    pub tokens: Vec<usize>,
}

pub struct Synthesizer {
    spec: SynthTaskSpec,
    templates: Matrix,
    rng: ChaCha8Rng,
}

impl Synthesizer {
    pub fn new(spec: SynthTaskSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let templates = draw_templates(spec.vocab_size, spec.feat_dim, &mut rng);
        Ok(Synthesizer {
            spec,
            templates,
            rng,
        })
    }

    pub fn templates(&self) -> &Matrix {
        &self.templates
    }

    /// Draws a reference without immediate repeats (identical neighbouring
    /// templates would be acoustically indistinguishable from one token).
    pub fn draw_reference(&mut self) -> Vec<usize> {
        let (lo, hi) = self.spec.length;
        let n = self.rng.random_range(lo..=hi);
        let mut tokens: Vec<usize> = Vec::with_capacity(n);
        while tokens.len() < n {
            let t = self.rng.random_range(0..self.spec.vocab_size);
            if tokens.last() != Some(&t) {
                tokens.push(t);
            }
        }
        tokens
    }

    /// Renders `tokens` with the given silence padding (in units) and
    /// per-token durations (in units).
    pub fn render(&mut self, tokens: &[usize], durations: &[usize], pad: (usize, usize)) -> Result<Utterance> {
        let spec = &self.spec;
        if tokens.len() != durations.len() {
            return Err(Error::shape("render", (tokens.len(), 1), (durations.len(), 1)));
        }
        for &t in tokens {
            if t >= spec.vocab_size {
                return Err(Error::Vocabulary {
                    token: t,
                    size: spec.vocab_size,
                });
            }
        }
        let u = spec.frame_unit;
        let d = spec.feat_dim;
        let speech: usize = durations.iter().sum::<usize>() * u;
        let total = (pad.0 + pad.1) * u + speech;
        let mut features = Matrix::zeros(total, d);
        let silence = Normal::new(0.0, spec.silence_std).map_err(|e| Error::Config(e.to_string()))?;
        let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Config(e.to_string()))?;
        let mut row = 0;
        for _ in 0..pad.0 * u {
            for v in features.row_mut(row) {
                *v = silence.sample(&mut self.rng);
            }
            row += 1;
        }
        let speech_start = row;
        for (&t, &units) in tokens.iter().zip(durations) {
            for _ in 0..units * u {
                let template = self.templates.row(t);
                let out = features.row_mut(row);
                for (o, &m) in out.iter_mut().zip(template) {
                    *o = m + noise.sample(&mut self.rng);
                }
                row += 1;
            }
        }
        let speech_end = row;
        while row < total {
            for v in features.row_mut(row) {
                *v = silence.sample(&mut self.rng);
            }
            row += 1;
        }
        Ok(Utterance {
            features,
            tokens: tokens.to_vec(),
            speech_start,
            speech_end,
        })
    }

    pub fn utterance(&mut self) -> Result<Utterance> {
        let tokens = self.draw_reference();
        let (lo, hi) = self.spec.frames_per_token;
        let durations: Vec<usize> = tokens.iter().map(|_| self.rng.random_range(lo..=hi)).collect();
        let (plo, phi) = self.spec.pad_units;
        let pad = (self.rng.random_range(plo..=phi), self.rng.random_range(plo..=phi));
        self.render(&tokens, &durations, pad)
    }

    /// Concatenates utterances with silence gaps drawn from `gap_units`.
    pub fn stream(&mut self, utterances: &[Utterance]) -> Result<Stream> {
        let d = self.spec.feat_dim;
        let u = self.spec.frame_unit;
        let silence = Normal::new(0.0, self.spec.silence_std).map_err(|e| Error::Config(e.to_string()))?;
        let mut data = Vec::new();
        let mut spans = Vec::with_capacity(utterances.len());
        let mut row = 0;
        for (i, utt) in utterances.iter().enumerate() {
            if utt.features.cols() != d {
                return Err(Error::shape("stream", utt.features.shape(), (utt.features.rows(), d)));
            }
            if i > 0 {
                let (lo, hi) = self.spec.gap_units;
                let gap = self.rng.random_range(lo..=hi) * u;
                for _ in 0..gap * d {
                    data.push(silence.sample(&mut self.rng));
                }
                row += gap;
            }
            data.extend_from_slice(utt.features.data());
            spans.push(StreamUtterance {
                start: row,
                end: row + utt.features.rows(),
                speech_start: row + utt.speech_start,
                speech_end: row + utt.speech_end,
                tokens: utt.tokens.clone(),
            });
            row += utt.features.rows();
        }
        Ok(Stream {
            features: Matrix::from_vec(row, d, data)?,
            utterances: spans,
        })
    }
}

fn draw_templates(vocab: usize, d: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let data: Vec<f64> = (0..vocab * d).map(|_| normal.sample(rng)).collect();
        let m = Matrix::from_vec(vocab, d, data).expect("template shape");
        let distinct = (0..vocab).all(|a| (a + 1..vocab).all(|b| m.row(a) != m.row(b)));
        if distinct {
            return m;
        }
    }
}

/// Draws the train and test sets from one seeded generator.
pub fn synth_generate(spec: &SynthTaskSpec) -> Result<Dataset> {
    let mut synth = Synthesizer::new(spec.clone())?;
    let train = (0..spec.train_utterances)
        .map(|_| synth.utterance())
        .collect::<Result<Vec<_>>>()?;
    let test = (0..spec.test_utterances)
        .map(|_| synth.utterance())
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        templates: synth.templates.clone(),
        train,
        test,
    })
}

/// Builds a stream from a shuffled copy of `utterances` with its own seed.
pub fn synth_stream(spec: &SynthTaskSpec, utterances: &[Utterance], seed: u64) -> Result<Stream> {
    let mut synth = Synthesizer::new(SynthTaskSpec {
        seed,
        ..spec.clone()
    })?;
    let mut order: Vec<&Utterance> = utterances.iter().collect();
    order.shuffle(&mut synth.rng);
    let owned: Vec<Utterance> = order.into_iter().cloned().collect();
    synth.stream(&owned)
}
