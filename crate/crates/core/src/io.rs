//! Text formats: feature files (`T d` header then `T` rows), reference
//! files (space-separated token ids), dataset directories, streams and
//! checkpoints with their configuration sidecar.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::encoder::JointModel;
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::synth::{Dataset, Stream, StreamUtterance, Utterance};

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::parse(path, e.to_string()))
}

pub fn format_features(m: &Matrix) -> String {
    let mut out = format!("{} {}\n", m.rows(), m.cols());
    for r in 0..m.rows() {
        let row: Vec<String> = m.row(r).iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

pub fn parse_features(text: &str, path: &Path) -> Result<Matrix> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::parse(path, "missing `T d` header"))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|x| x.parse().map_err(|_| Error::parse(path, format!("bad header {header:?}"))))
        .collect::<Result<_>>()?;
    let [t, d] = dims[..] else {
        return Err(Error::parse(path, format!("header must be `T d`, got {header:?}")));
    };
    let mut data = Vec::with_capacity(t * d);
    for (i, line) in lines.enumerate() {
        let before = data.len();
        for x in line.split_whitespace() {
            data.push(
                x.parse::<f64>()
                    .map_err(|_| Error::parse(path, format!("row {}: bad value {x:?}", i + 1)))?,
            );
        }
        if data.len() - before != d {
            return Err(Error::parse(path, format!("row {} has {} values, expected {d}", i + 1, data.len() - before)));
        }
    }
    if data.len() != t * d {
        return Err(Error::parse(path, format!("expected {t} rows, found {}", data.len() / d.max(1))));
    }
    Matrix::from_vec(t, d, data)
}

pub fn read_features(path: &Path) -> Result<Matrix> {
    parse_features(&read(path)?, path)
}

pub fn write_features(path: &Path, m: &Matrix) -> Result<()> {
    Ok(fs::write(path, format_features(m))?)
}

pub fn parse_tokens(text: &str, path: &Path) -> Result<Vec<usize>> {
    text.split_whitespace()
        .map(|x| x.parse().map_err(|_| Error::parse(path, format!("bad token id {x:?}"))))
        .collect()
}

pub fn read_tokens(path: &Path) -> Result<Vec<usize>> {
    parse_tokens(&read(path)?, path)
}

fn join(tokens: &[usize]) -> String {
    tokens.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

/// Writes `NNNNN.feat`, `NNNNN.ref` and `NNNNN.span` (speech start/end in
/// raw frames) for every utterance.
pub fn write_split(dir: &Path, utterances: &[Utterance]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, u) in utterances.iter().enumerate() {
        let stem = dir.join(format!("{i:05}"));
        write_features(&stem.with_extension("feat"), &u.features)?;
        fs::write(stem.with_extension("ref"), join(&u.tokens) + "\n")?;
        fs::write(stem.with_extension("span"), format!("{} {}\n", u.speech_start, u.speech_end))?;
    }
    Ok(())
}

/// Reads every `.feat` file of `dir` in name order together with its
/// `.ref` (required) and `.span` (optional; defaults to the whole file).
pub fn read_split(dir: &Path) -> Result<Vec<Utterance>> {
    let mut feats: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::parse(dir, e.to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "feat"))
        .collect();
    feats.sort();
    feats
        .into_iter()
        .map(|path| {
            let features = read_features(&path)?;
            let tokens = read_tokens(&path.with_extension("ref"))?;
            let span_path = path.with_extension("span");
            let (speech_start, speech_end) = if span_path.exists() {
                let v = parse_tokens(&read(&span_path)?, &span_path)?;
                match v[..] {
                    [a, b] if a <= b && b <= features.rows() => (a, b),
                    _ => return Err(Error::parse(&span_path, "expected `start end` within the file")),
                }
            } else {
                (0, features.rows())
            };
            Ok(Utterance {
                features,
                tokens,
                speech_start,
                speech_end,
            })
        })
        .collect()
}

pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    write_split(&dir.join("train"), &data.train)?;
    write_split(&dir.join("test"), &data.test)?;
    write_features(&dir.join("templates.feat"), &data.templates)
}

/// `stream.feat` plus `stream.utts`: one line per utterance,
/// `start end speech_start speech_end tok tok ...`.
pub fn write_stream(dir: &Path, stream: &Stream) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_features(&dir.join("stream.feat"), &stream.features)?;
    let mut out = String::new();
    for u in &stream.utterances {
        let _ = writeln!(out, "{} {} {} {} {}", u.start, u.end, u.speech_start, u.speech_end, join(&u.tokens));
    }
    Ok(fs::write(dir.join("stream.utts"), out)?)
}

pub fn read_stream(dir: &Path) -> Result<Stream> {
    let features = read_features(&dir.join("stream.feat"))?;
    let path = dir.join("stream.utts");
    let mut utterances = Vec::new();
    for line in read(&path)?.lines().filter(|l| !l.trim().is_empty()) {
        let v = parse_tokens(line, &path)?;
        if v.len() < 4 {
            return Err(Error::parse(&path, format!("short line {line:?}")));
        }
        utterances.push(StreamUtterance {
            start: v[0],
            end: v[1],
            speech_start: v[2],
            speech_end: v[3],
            tokens: v[4..].to_vec(),
        });
    }
    Ok(Stream { features, utterances })
}

pub fn config_sidecar(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.as_os_str().to_owned();
    name.push(".config");
    PathBuf::from(name)
}

pub fn save_model(path: &Path, model: &JointModel, cfg: &RunConfig) -> Result<()> {
    model.params.save_checkpoint(path)?;
    Ok(fs::write(config_sidecar(path), cfg.to_text())?)
}

/// Loads a checkpoint and the configuration it was trained with.
pub fn load_model(path: &Path) -> Result<(JointModel, RunConfig)> {
    let cfg = RunConfig::load(&config_sidecar(path))?;
    cfg.validate()?;
    let mut model = JointModel::new(cfg.model.clone(), cfg.model_seed)?;
    model.params.load_checkpoint(path)?;
    Ok((model, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_generate, SynthTaskSpec};

    #[test]
    fn features_round_trip_exactly() {
        let m = Matrix::from_rows(&[[0.1, -2.5e-17, 3.0], [1.0 / 3.0, 7.0, -0.0]]);
        let p = Path::new("x.feat");
        assert_eq!(parse_features(&format_features(&m), p).unwrap(), m);
        assert!(parse_features("2 3\n1 2 3\n", p).is_err());
        assert!(parse_features("1 2\n1 x\n", p).is_err());
        assert!(parse_features("", p).is_err());
    }

    #[test]
    fn dataset_and_stream_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthTaskSpec {
            train_utterances: 3,
            test_utterances: 2,
            ..Default::default()
        };
        let data = synth_generate(&spec).unwrap();
        write_dataset(dir.path(), &data).unwrap();
        assert_eq!(read_split(&dir.path().join("train")).unwrap(), data.train);
        assert_eq!(read_split(&dir.path().join("test")).unwrap(), data.test);

        let stream = crate::synth::synth_stream(&spec, &data.test, 3).unwrap();
        write_stream(dir.path(), &stream).unwrap();
        assert_eq!(read_stream(dir.path()).unwrap(), stream);
    }

    #[test]
    fn model_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.set("d_model", "8").unwrap();
        cfg.set("heads", "2").unwrap();
        cfg.set("layers", "1").unwrap();
        let model = JointModel::new(cfg.model.clone(), 4).unwrap();
        let path = dir.path().join("model.ckpt");
        save_model(&path, &model, &cfg).unwrap();
        let (back, back_cfg) = load_model(&path).unwrap();
        assert_eq!(back_cfg, cfg);
        assert_eq!(back.params.to_checkpoint_string(), model.params.to_checkpoint_string());
    }
}
