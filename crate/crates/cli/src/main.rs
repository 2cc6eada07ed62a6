//! `narstream` command-line tool: synthesise data, train, decode, stream,
//! benchmark and run the gradient checks.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use narstream::config::RunConfig;
use narstream::encoder::JointModel;
use narstream::eval::{evaluate_oracle, measure_rtf, score_stream};
use narstream::io;
use narstream::streaming::{join_tokens, OutputMode, Streamer};
use narstream::synth::{synth_generate, synth_stream};
use narstream::train::train;
use narstream::verify::{run_suite, SUITE_TOLERANCE};
use narstream::Error;

#[derive(Parser)]
#[command(name = "narstream", version, about = "Streaming insertion-based recogniser with joint CTC")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Flat key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Blank-run length that closes a segment (encoder frames).
    #[arg(long)]
    tau: Option<usize>,
    #[arg(long = "block-len")]
    block_len: Option<usize>,
    /// Decode forward-pass budget.
    #[arg(long)]
    iters: Option<usize>,
    /// CTC weight of the joint loss.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    threads: Option<usize>,
    /// insertion or ctc
    #[arg(long)]
    output: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (train/, test/) and a test stream (stream/).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train a model on DATA/train and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Decode pre-segmented utterances (a split directory).
    Decode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Segment and decode an unsegmented recording; prints one line per segment.
    Stream {
        #[arg(long)]
        model: PathBuf,
        /// A `.feat` file, or a stream directory (adds a score summary on stderr).
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Real-time factor and iteration statistics over a split directory.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also write one segment line per utterance here.
        #[arg(long)]
        events: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference checks of every differentiable operation.
    Gradcheck,
}

type CmdResult = Result<(), Error>;

fn apply(cfg: &mut RunConfig, common: &Common, seed_key: &str) -> CmdResult {
    if let Some(path) = &common.config {
        cfg.apply_text(
            &std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
        )?;
    }
    let mut set = |k: &str, v: Option<String>| v.map_or(Ok(()), |v| cfg.set(k, &v));
    set(seed_key, common.seed.map(|x| x.to_string()))?;
    set("tau", common.tau.map(|x| x.to_string()))?;
    set("block_len", common.block_len.map(|x| x.to_string()))?;
    set("max_iters", common.iters.map(|x| x.to_string()))?;
    set("lambda", common.lambda.map(|x| x.to_string()))?;
    set("threads", common.threads.map(|x| x.to_string()))?;
    set("output", common.output.clone())?;
    cfg.validate()
}

fn fresh_config(common: &Common, seed_key: &str) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::default();
    apply(&mut cfg, common, seed_key)?;
    Ok(cfg)
}

/// Checkpoint configuration with command-line overrides. Inference-time
/// settings may change; the architecture comes from the checkpoint.
fn load(model: &Path, common: &Common) -> Result<(JointModel, RunConfig), Error> {
    let (mut m, mut cfg) = io::load_model(model)?;
    apply(&mut cfg, common, "seed")?;
    let arch = |c: &narstream::encoder::ModelConfig| (c.layers, c.heads, c.d_model, c.subsample, c.feat_dim, c.vocab_size);
    if arch(&cfg.model) != arch(&m.cfg) {
        return Err(Error::Config("architecture keys cannot be overridden for a trained model".into()));
    }
    m.cfg = cfg.model.clone();
    Ok((m, cfg))
}

fn synth(out: &Path, common: &Common) -> CmdResult {
    let cfg = fresh_config(common, "synth_seed")?;
    let data = synth_generate(&cfg.synth)?;
    io::write_dataset(out, &data)?;
    let stream = synth_stream(&cfg.synth, &data.test, cfg.synth.seed.wrapping_add(1))?;
    io::write_stream(&out.join("stream"), &stream)?;
    std::fs::write(out.join("synth.config"), cfg.to_text())?;
    println!(
        "train={} test={} stream_frames={}",
        data.train.len(),
        data.test.len(),
        stream.features.rows()
    );
    Ok(())
}

fn train_cmd(data: &Path, out: &Path, common: &Common) -> CmdResult {
    let cfg = fresh_config(common, "seed")?;
    let utterances = io::read_split(&data.join("train"))?;
    let mut model = JointModel::new(cfg.model.clone(), cfg.model_seed)?;
    let result = train(&mut model, &utterances, &cfg.train, |e| {
        println!(
            "epoch={} loss={:.6} ctc={:.6} insertion={:.6} skipped={} seconds={:.1}",
            e.epoch, e.mean_loss, e.mean_ctc, e.mean_insertion, e.skipped, e.seconds
        );
    });
    // On divergence the parameters of the last good step are kept; save them.
    io::save_model(out, &model, &cfg)?;
    let report = result?;
    println!("steps={} skipped={}", report.steps, report.skipped);
    Ok(())
}

fn decode(model: &Path, data: &Path, common: &Common) -> CmdResult {
    let (model, cfg) = load(model, common)?;
    let utterances = io::read_split(data)?;
    let m = evaluate_oracle(&model, &utterances, cfg.model.max_iters, cfg.endpoint.output, cfg.threads)?;
    for (i, d) in m.decodes.iter().enumerate() {
        println!("{i}\t{}\t{}\t{}", join_tokens(&d.tokens), d.iterations, d.forward_passes);
    }
    println!(
        "cer={:.6} ctc_cer={:.6} mean_iterations={:.4} mean_forward_passes={:.4}",
        m.cer, m.ctc_cer, m.mean_iterations, m.mean_forward_passes
    );
    Ok(())
}

fn stream_cmd(model: &Path, input: &Path, common: &Common) -> CmdResult {
    let (model, cfg) = load(model, common)?;
    let (features, truth) = if input.is_dir() {
        let s = io::read_stream(input)?;
        (s.features.clone(), Some(s))
    } else {
        (io::read_features(input)?, None)
    };
    let mut streamer = Streamer::new(&model, cfg.endpoint.clone())?;
    let mut events = Vec::new();
    let block = model.cfg.subsample * model.cfg.block_len;
    for start in (0..features.rows()).step_by(block) {
        let chunk = features.slice_rows(start, (start + block).min(features.rows()));
        for e in streamer.push_frames(&chunk)? {
            println!("{e}");
            events.push(e);
        }
    }
    for e in streamer.flush()? {
        println!("{e}");
        events.push(e);
    }
    if let Some(truth) = truth {
        let m = score_stream(&truth, &events, model.cfg.subsample, 2 * model.cfg.block_len)?;
        eprintln!(
            "cer={:.6} boundary_recall={:.4} segments={} mean_iterations={:.4} mean_forward_passes={:.4}",
            m.cer, m.boundary_recall, m.segments, m.mean_iterations, m.mean_forward_passes
        );
    }
    Ok(())
}

fn bench(model: &Path, data: &Path, events: Option<&Path>, common: &Common) -> CmdResult {
    let (model, cfg) = load(model, common)?;
    let utterances = io::read_split(data)?;
    // Warm-up pass so allocation and page faults are not timed.
    measure_rtf(&model, &utterances[..1.min(utterances.len())], cfg.model.max_iters, cfg.endpoint.output, 1, cfg.frame_shift_ms)?;
    let m = measure_rtf(
        &model,
        &utterances,
        cfg.model.max_iters,
        cfg.endpoint.output,
        cfg.threads,
        cfg.frame_shift_ms,
    )?;
    let mode = match cfg.endpoint.output {
        OutputMode::Insertion => "insertion",
        OutputMode::Ctc => "ctc",
    };
    println!("output={mode}");
    println!("threads={}", cfg.threads);
    println!("utterances={}", m.utterances);
    println!("audio_seconds={:.3}", m.audio_seconds);
    println!("wall_seconds={:.6}", m.wall_seconds);
    println!("rtf={:.6}", m.rtf);
    println!("mean_iterations={:.4}", m.mean_iterations);
    println!("max_iterations={}", m.max_iterations);
    println!("mean_forward_passes={:.4}", m.mean_forward_passes);
    println!("max_forward_passes={}", m.max_forward_passes);
    if let Some(path) = events {
        let mut out = String::new();
        let mut start = 0;
        for (i, (d, (u, ms))) in m.decodes.iter().zip(utterances.iter().zip(&m.wall_ms)).enumerate() {
            let end = start + u.features.rows() / model.cfg.subsample;
            let _ = writeln!(
                out,
                "{i}\t{start}\t{end}\t{}\t{}\t{ms:.3}",
                join_tokens(&d.tokens),
                d.iterations
            );
            start = end;
        }
        std::fs::write(path, out)?;
    }
    Ok(())
}

fn gradcheck() -> CmdResult {
    let mut failed = Vec::new();
    for entry in run_suite()? {
        let verdict = if entry.passed() { "PASS" } else { "FAIL" };
        println!(
            "{verdict} {:<16} max_rel_error={:.3e} coordinates={} worst={}",
            entry.name, entry.report.max_rel_error, entry.report.coordinates, entry.report.worst
        );
        if !entry.passed() {
            failed.push(entry.name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!(
            "gradient checks above {SUITE_TOLERANCE:e}: {}",
            failed.join(", ")
        )))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth { out, common } => synth(out, common),
        Command::Train { data, out, common } => train_cmd(data, out, common),
        Command::Decode { model, data, common } => decode(model, data, common),
        Command::Stream { model, input, common } => stream_cmd(model, input, common),
        Command::Bench {
            model,
            data,
            events,
            common,
        } => bench(model, data, events.as_deref(), common),
        Command::Gradcheck => gradcheck(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() {
                3
            } else if matches!(e, Error::Config(_) | Error::Parse { .. } | Error::Level { .. }) {
                2
            } else {
                1
            })
        }
    }
}
