//! Causal block processing of unsegmented input with blank-run endpoint
//! detection and per-segment insertion decoding.
//!
//! Raw frames are buffered until a full block (`subsample * block_len`
//! rows) is available. Each block runs through the frame stream only, with
//! the `<s>` memory, and the CTC argmax of its frames drives a blank-run
//! counter. When the run reaching a block end is at least `tau` frames and
//! the current segment contains speech, the segment is closed at that
//! block end and decoded with the full two-stream model.

use std::fmt;
use std::time::Instant;

use crate::ctc::{self, CtcPosterior, BLANK};
use crate::encoder::{BlockCache, JointModel};
use crate::error::{Error, Result};
use crate::insertion::{decode_insertion, DecodeOutcome, ModelPredictor, ReferencePredictor};
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputMode {
    Insertion,
    Ctc,
}

impl std::str::FromStr for OutputMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "insertion" => Ok(OutputMode::Insertion),
            "ctc" => Ok(OutputMode::Ctc),
            other => Err(Error::Config(format!(
                "output mode must be insertion or ctc, got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EndpointConfig {
    /// Blank-run length (post-subsampling frames) that closes a segment.
    pub tau: usize,
    /// Segments are force-closed at this many post-subsampling frames.
    pub max_segment: usize,
    pub max_iters: usize,
    pub output: OutputMode,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        EndpointConfig {
            tau: 8,
            max_segment: 512,
            max_iters: 5,
            output: OutputMode::Insertion,
        }
    }
}

impl EndpointConfig {
    pub fn validate(&self, block_len: usize) -> Result<()> {
        if self.tau == 0 {
            return Err(Error::Config("tau must be >= 1".into()));
        }
        if self.max_segment < block_len {
            return Err(Error::Config(format!(
                "segment cap {} is shorter than the block length {block_len}",
                self.max_segment
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max decode iterations must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentEvent {
    pub index: usize,
    /// First post-subsampling frame of the segment.
    pub start: usize,
    /// One past the last post-subsampling frame.
    pub end: usize,
    pub tokens: Vec<usize>,
    pub iterations: usize,
    pub forward_passes: usize,
    pub wall_ms: f64,
}

impl SegmentEvent {
    /// Everything except the wall-clock time.
    pub fn outcome(&self) -> (usize, usize, usize, &[usize], usize, usize) {
        (
            self.index,
            self.start,
            self.end,
            &self.tokens,
            self.iterations,
            self.forward_passes,
        )
    }

    pub fn transcript(&self) -> String {
        join_tokens(&self.tokens)
    }
}

pub fn join_tokens(tokens: &[usize]) -> String {
    tokens
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(" ")
}

/// `r  start_frame  end_frame  transcript  iterations  wall_ms`, tab separated.
impl fmt::Display for SegmentEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{}\t{}\t{}\t{:.3}",
            self.index,
            self.start,
            self.end,
            self.transcript(),
            self.iterations,
            self.wall_ms
        )
    }
}

/// The blank-run rule on its own: counts consecutive blank argmaxes across
/// block boundaries and reports whether the run reaching the end of a block
/// is at least `tau`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EndpointDetector {
    pub tau: usize,
    pub run: usize,
    pub saw_speech: bool,
}

impl EndpointDetector {
    pub fn new(tau: usize) -> Self {
        EndpointDetector {
            tau,
            run: 0,
            saw_speech: false,
        }
    }

    pub fn observe_block(&mut self, argmaxes: &[usize]) -> bool {
        for &a in argmaxes {
            if a == BLANK {
                self.run += 1;
            } else {
                self.run = 0;
                self.saw_speech = true;
            }
        }
        self.run >= self.tau
    }

    pub fn reset(&mut self) {
        self.run = 0;
        self.saw_speech = false;
    }
}

/// Decodes a closed segment of raw frames.
pub trait SegmentDecoder {
    fn decode(&mut self, frames: &Matrix) -> Result<DecodeOutcome>;
}

pub struct ModelDecoder<'m> {
    pub model: &'m JointModel,
    pub max_iters: usize,
    pub output: OutputMode,
}

impl SegmentDecoder for ModelDecoder<'_> {
    fn decode(&mut self, frames: &Matrix) -> Result<DecodeOutcome> {
        match self.output {
            OutputMode::Insertion => {
                let mut predictor = ModelPredictor::new(self.model, frames);
                decode_insertion(&mut predictor, self.max_iters)
            }
            OutputMode::Ctc => {
                let tokens = ctc_only(self.model, frames)?;
                Ok(DecodeOutcome {
                    tokens,
                    iterations: 1,
                    forward_passes: 1,
                })
            }
        }
    }
}

/// Greedy CTC from one joint pass with an empty hypothesis.
pub fn ctc_only(model: &JointModel, frames: &Matrix) -> Result<Vec<usize>> {
    let mut tape = model.tape();
    let x = model.embed_audio(&mut tape, frames, 0)?;
    let blocks = model.split_blocks(&mut tape, x)?;
    let c = model.embed_tokens(&mut tape, &[])?;
    let out = model.forward_joint(&mut tape, &blocks, c)?;
    let lp = ctc::ctc_head(&mut tape, model.head_ctc, out.h_feat)?;
    let post = CtcPosterior(tape.value(lp).clone());
    Ok(ctc::tokens_from_labels(&ctc::ctc_greedy(&post)))
}

/// Ignores the audio and decodes a fixed reference with a perfect head.
pub struct ReferenceDecoder {
    pub reference: Vec<usize>,
    pub max_iters: usize,
}

impl SegmentDecoder for ReferenceDecoder {
    fn decode(&mut self, _frames: &Matrix) -> Result<DecodeOutcome> {
        let mut p = ReferencePredictor {
            reference: self.reference.clone(),
        };
        decode_insertion(&mut p, self.max_iters)
    }
}

#[derive(Debug, Clone)]
pub struct StreamState {
    pub cache: BlockCache,
    pub detector: EndpointDetector,
    /// First post-subsampling frame of the open segment.
    pub segment_start: usize,
    /// Post-subsampling frames consumed so far.
    pub frames_done: usize,
    /// Raw rows waiting for a full block.
    pub buffer: Vec<f64>,
    /// Raw rows of the open segment.
    pub segment_frames: Vec<f64>,
    pub next_index: usize,
    pub events: Vec<SegmentEvent>,
}

pub struct Streamer<'m, D: SegmentDecoder = ModelDecoder<'m>> {
    model: &'m JointModel,
    cfg: EndpointConfig,
    decoder: D,
    state: StreamState,
}

impl<'m> Streamer<'m, ModelDecoder<'m>> {
    pub fn new(model: &'m JointModel, cfg: EndpointConfig) -> Result<Self> {
        let decoder = ModelDecoder {
            model,
            max_iters: cfg.max_iters,
            output: cfg.output,
        };
        Streamer::with_decoder(model, cfg, decoder)
    }
}

impl<'m, D: SegmentDecoder> Streamer<'m, D> {
    pub fn with_decoder(model: &'m JointModel, cfg: EndpointConfig, decoder: D) -> Result<Self> {
        cfg.validate(model.cfg.block_len)?;
        let state = StreamState {
            cache: model.new_cache()?,
            detector: EndpointDetector::new(cfg.tau),
            segment_start: 0,
            frames_done: 0,
            buffer: Vec::new(),
            segment_frames: Vec::new(),
            next_index: 0,
            events: Vec::new(),
        };
        Ok(Streamer {
            model,
            cfg,
            decoder,
            state,
        })
    }

    pub fn state(&self) -> &StreamState {
        &self.state
    }

    fn block_rows(&self) -> usize {
        self.model.cfg.subsample * self.model.cfg.block_len
    }

    /// Buffers raw frames and processes every completed block. Returns the
    /// segments closed by this call.
    pub fn push_frames(&mut self, frames: &Matrix) -> Result<Vec<SegmentEvent>> {
        let d = self.model.cfg.feat_dim;
        if frames.cols() != d && frames.rows() > 0 {
            return Err(Error::shape("push_frames", frames.shape(), (frames.rows(), d)));
        }
        self.state.buffer.extend_from_slice(frames.data());
        let block = self.block_rows() * d;
        let mut events = Vec::new();
        while self.state.buffer.len() >= block {
            let rest = self.state.buffer.split_off(block);
            let raw = std::mem::replace(&mut self.state.buffer, rest);
            events.extend(self.process_block(raw)?);
        }
        Ok(events)
    }

    /// Processes the trailing partial block and closes the open segment.
    pub fn flush(&mut self) -> Result<Vec<SegmentEvent>> {
        let (d, s) = (self.model.cfg.feat_dim, self.model.cfg.subsample);
        let rows = self.state.buffer.len() / d;
        let usable = rows / s * s;
        let mut events = Vec::new();
        if usable > 0 {
            let mut raw = std::mem::take(&mut self.state.buffer);
            raw.truncate(usable * d);
            events.extend(self.process_block(raw)?);
        }
        self.state.buffer.clear();
        if self.state.frames_done > self.state.segment_start {
            events.push(self.finalize_segment(self.state.frames_done)?);
        }
        Ok(events)
    }

    fn process_block(&mut self, raw: Vec<f64>) -> Result<Vec<SegmentEvent>> {
        let model = self.model;
        let d = model.cfg.feat_dim;
        let raw = Matrix::from_vec(raw.len() / d, d, raw)?;
        let position = self.state.frames_done - self.state.segment_start;
        let emb = {
            let mut tape = model.tape();
            let e = model.embed_audio(&mut tape, &raw, position)?;
            tape.value(e).clone()
        };
        let z = model.forward_frames_causal(&emb, &mut self.state.cache)?;
        let argmaxes = {
            let mut tape = model.tape();
            let zv = tape.constant(z);
            let lp = ctc::ctc_head(&mut tape, model.head_ctc, zv)?;
            CtcPosterior(tape.value(lp).clone()).argmax_path()
        };
        self.state.segment_frames.extend_from_slice(raw.data());
        self.state.frames_done += emb.rows();

        let fired = self.state.detector.observe_block(&argmaxes);
        let length = self.state.frames_done - self.state.segment_start;
        let mut events = Vec::new();
        if (fired && self.state.detector.saw_speech) || length >= self.cfg.max_segment {
            events.push(self.finalize_segment(self.state.frames_done)?);
        }
        Ok(events)
    }

    /// Decodes the open segment `[segment_start, end)` and starts a new one.
    pub fn finalize_segment(&mut self, end: usize) -> Result<SegmentEvent> {
        let start = self.state.segment_start;
        let raw = std::mem::take(&mut self.state.segment_frames);
        let began = Instant::now();
        let outcome = if !self.state.detector.saw_speech || end <= start {
            DecodeOutcome {
                tokens: Vec::new(),
                iterations: 0,
                forward_passes: 0,
            }
        } else {
            let d = self.model.cfg.feat_dim;
            let frames = Matrix::from_vec(raw.len() / d, d, raw)?;
            self.decoder.decode(&frames)?
        };
        let event = SegmentEvent {
            index: self.state.next_index,
            start,
            end,
            tokens: outcome.tokens,
            iterations: outcome.iterations,
            forward_passes: outcome.forward_passes,
            wall_ms: began.elapsed().as_secs_f64() * 1e3,
        };
        self.state.next_index += 1;
        self.state.segment_start = end;
        self.state.detector.reset();
        self.state.events.push(event.clone());
        Ok(event)
    }
}

/// Pushes a whole recording and flushes the tail.
pub fn run_stream(model: &JointModel, audio: &Matrix, cfg: &EndpointConfig) -> Result<Vec<SegmentEvent>> {
    let mut streamer = Streamer::new(model, cfg.clone())?;
    let mut events = streamer.push_frames(audio)?;
    events.extend(streamer.flush()?);
    Ok(events)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::ModelConfig;

    fn tiny_model() -> JointModel {
        let cfg = ModelConfig {
            layers: 2,
            heads: 2,
            d_model: 8,
            block_len: 2,
            subsample: 2,
            feat_dim: 3,
            vocab_size: 4,
            max_iters: 5,
            positional_encoding: true,
        };
        JointModel::new(cfg, 21).unwrap()
    }

    /// Makes the CTC head prefer blank (or symbol 0) everywhere.
    fn force_ctc(model: &mut JointModel, class: usize) {
        let w = &mut model.params.get_mut(model.head_ctc).value;
        w.fill(0.0);
        let bias_row = w.rows() - 1;
        w.set(bias_row, class, 10.0);
    }

    #[test]
    fn run_counter_hand_simulation() {
        // tau = 4, B = 2, all blank: run is 2, 4 -> fires at the end of block 1.
        let mut det = EndpointDetector::new(4);
        assert!(!det.observe_block(&[0, 0]));
        assert!(det.observe_block(&[0, 0]));
        assert_eq!(det.run, 4);

        let mut det = EndpointDetector::new(4);
        det.observe_block(&[0, 0]);
        det.observe_block(&[0, 2]);
        assert_eq!(det.run, 0);
        assert!(det.saw_speech);
        assert!(!det.observe_block(&[0, 0]));
        assert!(!det.observe_block(&[0]));
        assert!(det.observe_block(&[0]));
    }

    #[test]
    fn short_input_is_only_buffered() {
        let model = tiny_model();
        let mut s = Streamer::new(&model, EndpointConfig::default()).unwrap();
        let events = s.push_frames(&Matrix::zeros(3, 3)).unwrap();
        assert!(events.is_empty());
        assert_eq!(s.state().frames_done, 0);
        assert_eq!(s.state().cache.block_index, 0);
        assert!(s.push_frames(&Matrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn silence_yields_single_empty_segment() {
        let mut model = tiny_model();
        force_ctc(&mut model, BLANK);
        let cfg = EndpointConfig {
            tau: 4,
            ..Default::default()
        };
        let events = run_stream(&model, &Matrix::zeros(40, 3), &cfg).unwrap();
        assert_eq!(events.len(), 1);
        assert!(events[0].tokens.is_empty());
        assert_eq!(events[0].iterations, 0);
        assert_eq!((events[0].start, events[0].end), (0, 20));
    }

    #[test]
    fn never_silent_input_is_capped() {
        let mut model = tiny_model();
        force_ctc(&mut model, 1);
        let cfg = EndpointConfig {
            tau: 4,
            max_segment: 6,
            max_iters: 2,
            ..Default::default()
        };
        let events = run_stream(&model, &Matrix::zeros(30, 3), &cfg).unwrap();
        let spans: Vec<(usize, usize)> = events.iter().map(|e| (e.start, e.end)).collect();
        assert_eq!(spans, [(0, 6), (6, 12), (12, 15)]);
        assert!(events.iter().all(|e| e.forward_passes <= 2));
    }

    #[test]
    fn perfect_decoder_on_segment() {
        let mut model = tiny_model();
        force_ctc(&mut model, 1);
        let reference: Vec<usize> = (0..9).map(|i| i % 4).collect();
        let decoder = ReferenceDecoder {
            reference: reference.clone(),
            max_iters: 5,
        };
        let cfg = EndpointConfig::default();
        let mut s = Streamer::with_decoder(&model, cfg, decoder).unwrap();
        s.push_frames(&Matrix::zeros(8, 3)).unwrap();
        let events = s.flush().unwrap();
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].tokens, reference);
        assert_eq!(events[0].iterations, 4);
    }

    #[test]
    fn event_line_format() {
        let e = SegmentEvent {
            index: 2,
            start: 16,
            end: 40,
            tokens: vec![3, 1, 4],
            iterations: 3,
            forward_passes: 4,
            wall_ms: 1.5,
        };
        assert_eq!(e.to_string(), "2\t16\t40\t3 1 4\t3\t1.500");
    }

    #[test]
    fn config_validation() {
        let model = tiny_model();
        let bad = EndpointConfig {
            tau: 0,
            ..Default::default()
        };
        assert!(Streamer::new(&model, bad).is_err());
        let bad = EndpointConfig {
            max_segment: 1,
            ..Default::default()
        };
        assert!(Streamer::new(&model, bad).is_err());
        assert!("beam".parse::<OutputMode>().is_err());
        assert_eq!("ctc".parse::<OutputMode>().unwrap(), OutputMode::Ctc);
    }
}
