//! Manifest, feature and vocabulary files.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::corpus::{Annotations, Corpus, Utterance};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"CTXF";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const VOCAB_FILE: &str = "vocab.txt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub clip_id: String,
    pub start_time: f64,
    pub feature_file: String,
    pub labels: Vec<usize>,
    pub num_frames: usize,
    pub feature_dim: usize,
    #[serde(flatten)]
    pub annotations: Annotations,
}

pub fn encode_features(features: &Tensor) -> Vec<u8> {
    let (t, f) = (features.rows(), features.cols());
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * t * f);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(f as u32).to_le_bytes());
    for &v in features.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<Tensor> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(path, format!("file is {} bytes, header needs {HEADER_LEN}", bytes.len())));
    }
    if &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::format(path, format!("bad magic {:?}, expected \"CTXF\"", &bytes[..4])));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != FEATURE_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let (t, f) = (word(8) as usize, word(12) as usize);
    let want = 4 * t * f;
    let have = bytes.len() - HEADER_LEN;
    if have != want {
        return Err(Error::format(
            path,
            format!("length mismatch: header declares {t}x{f} values ({want} bytes), file holds {have}"),
        ));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Tensor::new(vec![t, f], data)
}

pub fn write_features(path: &Path, features: &Tensor) -> Result<()> {
    fs::write(path, encode_features(features)).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes, path)
}

pub fn write_vocab(path: &Path, vocab: &[String]) -> Result<()> {
    let mut text = String::new();
    for tok in vocab {
        text.push_str(tok);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_vocab(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let vocab: Vec<String> = text.lines().map(str::to_string).collect();
    if vocab.is_empty() {
        return Err(Error::format(path, "vocabulary is empty; line 0 must be the blank token"));
    }
    Ok(vocab)
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: ManifestRecord = serde_json::from_str(&line)
            .map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?;
        records.push(r);
    }
    Ok(records)
}

/// Loads a corpus directory: `manifest.jsonl`, `vocab.txt` and the feature
/// files the manifest points at (relative to the directory).
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let vocab = read_vocab(&dir.join(VOCAB_FILE))?;
    let records = read_manifest(&dir.join(MANIFEST_FILE))?;
    let mut utterances = Vec::with_capacity(records.len());
    for r in records {
        let path = dir.join(&r.feature_file);
        let features = read_features(&path)?;
        if features.rows() != r.num_frames || features.cols() != r.feature_dim {
            return Err(Error::format(
                &path,
                format!(
                    "manifest says {}x{}, file holds {}x{}",
                    r.num_frames,
                    r.feature_dim,
                    features.rows(),
                    features.cols()
                ),
            ));
        }
        utterances.push(Utterance {
            clip_id: r.clip_id,
            start_time: r.start_time,
            features,
            labels: r.labels,
            annotations: r.annotations,
        });
    }
    Ok(Corpus { vocab, utterances })
}

/// Writes `corpus` under `dir` with one feature file per utterance.
pub fn store_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    let feat_dir = dir.join("features");
    fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
    write_vocab(&dir.join(VOCAB_FILE), &corpus.vocab)?;
    let mut records = Vec::with_capacity(corpus.utterances.len());
    for (i, u) in corpus.utterances.iter().enumerate() {
        let name: PathBuf = ["features", &format!("{i:06}.ctxf")].iter().collect();
        write_features(&dir.join(&name), &u.features)?;
        records.push(ManifestRecord {
            clip_id: u.clip_id.clone(),
            start_time: u.start_time,
            feature_file: name.to_string_lossy().into_owned(),
            labels: u.labels.clone(),
            num_frames: u.features.rows(),
            feature_dim: u.features.cols(),
            annotations: u.annotations.clone(),
        });
    }
    write_manifest(&dir.join(MANIFEST_FILE), &records)
}
