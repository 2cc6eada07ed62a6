//! Oracle-segment and streaming evaluation, and real-time-factor
//! measurement.

use std::time::Instant;

use crate::encoder::JointModel;
use crate::error::{Error, Result};
use crate::insertion::{decode_insertion, ModelPredictor};
use crate::metrics::edit_distance;
use crate::numerics::Matrix;
use crate::streaming::{ctc_only, run_stream, EndpointConfig, OutputMode, SegmentEvent};
use crate::synth::{Stream, Utterance};

/// Maps `f` over `items` on `threads` scoped workers, preserving order.
pub fn parallel_map<T: Sync, R: Send>(
    items: &[T],
    threads: usize,
    f: impl Fn(&T) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    let threads = threads.max(1).min(items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let f = &f;
    let parts: Vec<Result<Vec<R>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(f).collect::<Result<Vec<R>>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentDecode {
    pub tokens: Vec<usize>,
    /// Greedy CTC of the first pass (the insertion loop's starting point).
    pub ctc_tokens: Vec<usize>,
    pub iterations: usize,
    pub forward_passes: usize,
}

pub fn decode_segment(model: &JointModel, frames: &Matrix, max_iters: usize, output: OutputMode) -> Result<SegmentDecode> {
    match output {
        OutputMode::Insertion => {
            let mut p = ModelPredictor::new(model, frames);
            let out = decode_insertion(&mut p, max_iters)?;
            Ok(SegmentDecode {
                tokens: out.tokens,
                ctc_tokens: p.first_ctc.unwrap_or_default(),
                iterations: out.iterations,
                forward_passes: out.forward_passes,
            })
        }
        OutputMode::Ctc => {
            let tokens = ctc_only(model, frames)?;
            Ok(SegmentDecode {
                ctc_tokens: tokens.clone(),
                tokens,
                iterations: 1,
                forward_passes: 1,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleMetrics {
    pub utterances: usize,
    pub cer: f64,
    pub ctc_cer: f64,
    pub mean_iterations: f64,
    pub mean_forward_passes: f64,
    pub max_iterations: usize,
    pub decodes: Vec<SegmentDecode>,
}

/// Decodes every utterance as its own segment.
pub fn evaluate_oracle(
    model: &JointModel,
    data: &[Utterance],
    max_iters: usize,
    output: OutputMode,
    threads: usize,
) -> Result<OracleMetrics> {
    if data.is_empty() {
        return Err(Error::EmptyInput("empty evaluation set".into()));
    }
    let decodes = parallel_map(data, threads, |u| decode_segment(model, &u.features, max_iters, output))?;
    let (mut edits, mut ctc_edits, mut len) = (0, 0, 0);
    for (u, d) in data.iter().zip(&decodes) {
        edits += edit_distance(&u.tokens, &d.tokens);
        ctc_edits += edit_distance(&u.tokens, &d.ctc_tokens);
        len += u.tokens.len();
    }
    if len == 0 {
        return Err(Error::EmptyInput("references are empty".into()));
    }
    let n = decodes.len() as f64;
    Ok(OracleMetrics {
        utterances: data.len(),
        cer: edits as f64 / len as f64,
        ctc_cer: ctc_edits as f64 / len as f64,
        mean_iterations: decodes.iter().map(|d| d.iterations).sum::<usize>() as f64 / n,
        mean_forward_passes: decodes.iter().map(|d| d.forward_passes).sum::<usize>() as f64 / n,
        max_iterations: decodes.iter().map(|d| d.iterations).max().unwrap_or(0),
        decodes,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamMetrics {
    pub cer: f64,
    /// Fraction of utterance ends matched by a segment end within the
    /// tolerance.
    pub boundary_recall: f64,
    pub segments: usize,
    pub nonempty_segments: usize,
    pub mean_iterations: f64,
    pub mean_forward_passes: f64,
    pub events: Vec<SegmentEvent>,
}

/// Scores streaming output against the true utterance spans. Every
/// non-empty segment is assigned to the utterance nearest its midpoint;
/// an utterance end (in encoder frames) counts as recovered when some
/// segment ends within `tolerance` frames of it.
pub fn score_stream(stream: &Stream, events: &[SegmentEvent], subsample: usize, tolerance: usize) -> Result<StreamMetrics> {
    if stream.utterances.is_empty() {
        return Err(Error::EmptyInput("stream has no utterances".into()));
    }
    let s = subsample as f64;
    let mut hyps: Vec<Vec<usize>> = vec![Vec::new(); stream.utterances.len()];
    for e in events.iter().filter(|e| !e.tokens.is_empty()) {
        let mid = (e.start + e.end) as f64 * s / 2.0;
        let distance = |u: &crate::synth::StreamUtterance| {
            if mid < u.speech_start as f64 {
                u.speech_start as f64 - mid
            } else if mid > u.speech_end as f64 {
                mid - u.speech_end as f64
            } else {
                0.0
            }
        };
        let best = (0..stream.utterances.len())
            .min_by(|&a, &b| distance(&stream.utterances[a]).total_cmp(&distance(&stream.utterances[b])))
            .expect("non-empty");
        hyps[best].extend_from_slice(&e.tokens);
    }
    let (mut edits, mut len, mut recovered) = (0, 0, 0);
    for (u, h) in stream.utterances.iter().zip(&hyps) {
        edits += edit_distance(&u.tokens, h);
        len += u.tokens.len();
        let end = u.speech_end / subsample;
        if events.iter().any(|e| e.end.abs_diff(end) <= tolerance) {
            recovered += 1;
        }
    }
    let decoded: Vec<&SegmentEvent> = events.iter().filter(|e| e.forward_passes > 0).collect();
    let m = decoded.len().max(1) as f64;
    Ok(StreamMetrics {
        cer: edits as f64 / len.max(1) as f64,
        boundary_recall: recovered as f64 / stream.utterances.len() as f64,
        segments: events.len(),
        nonempty_segments: events.iter().filter(|e| !e.tokens.is_empty()).count(),
        mean_iterations: decoded.iter().map(|e| e.iterations).sum::<usize>() as f64 / m,
        mean_forward_passes: decoded.iter().map(|e| e.forward_passes).sum::<usize>() as f64 / m,
        events: events.to_vec(),
    })
}

/// Runs the streaming pipeline over `stream` and scores it with a
/// tolerance of two blocks.
pub fn evaluate_stream(model: &JointModel, stream: &Stream, cfg: &EndpointConfig) -> Result<StreamMetrics> {
    let events = run_stream(model, &stream.features, cfg)?;
    score_stream(stream, &events, model.cfg.subsample, 2 * model.cfg.block_len)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RtfMetrics {
    pub utterances: usize,
    pub audio_seconds: f64,
    pub wall_seconds: f64,
    pub rtf: f64,
    pub mean_iterations: f64,
    pub mean_forward_passes: f64,
    pub max_iterations: usize,
    pub max_forward_passes: usize,
    pub decodes: Vec<SegmentDecode>,
    /// Per-utterance decode time in milliseconds.
    pub wall_ms: Vec<f64>,
}

/// Decodes every utterance on a `threads`-worker pool; RTF is total wall
/// time over total audio (raw frames times the frame shift, silence
/// included).
pub fn measure_rtf(
    model: &JointModel,
    data: &[Utterance],
    max_iters: usize,
    output: OutputMode,
    threads: usize,
    frame_shift_ms: f64,
) -> Result<RtfMetrics> {
    if data.is_empty() {
        return Err(Error::EmptyInput("empty benchmark set".into()));
    }
    let began = Instant::now();
    let timed = parallel_map(data, threads, |u| {
        let t = Instant::now();
        let d = decode_segment(model, &u.features, max_iters, output)?;
        Ok((d, t.elapsed().as_secs_f64() * 1e3))
    })?;
    let wall_seconds = began.elapsed().as_secs_f64().max(1e-9);
    let raw_frames: usize = data.iter().map(|u| u.features.rows()).sum();
    let audio_seconds = raw_frames as f64 * frame_shift_ms / 1e3;
    let (decodes, wall_ms): (Vec<_>, Vec<_>) = timed.into_iter().unzip();
    let n = decodes.len() as f64;
    Ok(RtfMetrics {
        utterances: data.len(),
        audio_seconds,
        wall_seconds,
        rtf: wall_seconds / audio_seconds,
        mean_iterations: decodes.iter().map(|d| d.iterations).sum::<usize>() as f64 / n,
        mean_forward_passes: decodes.iter().map(|d| d.forward_passes).sum::<usize>() as f64 / n,
        max_iterations: decodes.iter().map(|d| d.iterations).max().unwrap_or(0),
        max_forward_passes: decodes.iter().map(|d| d.forward_passes).max().unwrap_or(0),
        decodes,
        wall_ms,
    })
}
