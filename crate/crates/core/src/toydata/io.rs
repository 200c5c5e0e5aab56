use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::corpus::{Attributes, CorpusConfig, CorpusSplit, ToyUtterance};
use crate::diffcore::Tensor;
use crate::flowmatch::DurationSeq;
use crate::{Error, Result};

const FRAME_MAGIC: &[u8; 4] = b"FBX1";

#[derive(Serialize, Deserialize)]
struct ManifestLine {
    id: String,
    split: String,
    tokens: Vec<usize>,
    durations: Vec<usize>,
    labels: Attributes,
    style: usize,
    description: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CorpusMeta {
    seed: u64,
    config: CorpusConfig,
}

/// Serializes frames as `"FBX1"`, `u32 T`, `u32 C`, then little-endian f64.
pub fn encode_frames(frames: &Tensor) -> Result<Vec<u8>> {
    if frames.rank() != 2 {
        return Err(Error::shape(
            "encode_frames",
            format!("expected [T, C], got {:?}", frames.shape()),
        ));
    }
    let mut out = Vec::with_capacity(12 + 8 * frames.len());
    out.extend_from_slice(FRAME_MAGIC);
    for d in frames.shape() {
        let d =
            u32::try_from(*d).map_err(|_| Error::Corpus("frame dimension exceeds u32".into()))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in frames.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_frames(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 12 || &bytes[..4] != FRAME_MAGIC {
        return Err(Error::Corpus("frame file lacks FBX1 header".into()));
    }
    let t = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let c = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = &bytes[12..];
    if body.len() != 8 * t * c {
        return Err(Error::Corpus(format!(
            "frame file holds {} bytes, expected {}",
            body.len(),
            8 * t * c
        )));
    }
    let data = body
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(vec![t, c], data)
}

/// Writes `config.json`, `manifest.jsonl` and `frames/<id>.fbx`.
pub fn write_corpus(dir: &Path, corpus: &CorpusSplit) -> Result<()> {
    let frames_dir = dir.join("frames");
    fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    let meta = CorpusMeta {
        seed: corpus.seed,
        config: corpus.config.clone(),
    };
    let meta_path = dir.join("config.json");
    fs::write(&meta_path, serde_json::to_vec_pretty(&meta)?)
        .map_err(|e| Error::io(&meta_path, e))?;
    let manifest_path = dir.join("manifest.jsonl");
    let mut manifest = Vec::new();
    for (split, utts) in [
        ("train", &corpus.train),
        ("valid", &corpus.valid),
        ("test", &corpus.test),
    ] {
        for u in utts {
            let line = ManifestLine {
                id: u.id.clone(),
                split: split.to_string(),
                tokens: u.seq.tokens.clone(),
                durations: u.seq.durations.clone(),
                labels: u.attributes,
                style: u.style,
                description: u.description.clone(),
            };
            serde_json::to_writer(&mut manifest, &line)?;
            manifest.write_all(b"\n").expect("write to Vec");
            let p = frames_dir.join(format!("{}.fbx", u.id));
            fs::write(&p, encode_frames(&u.frames)?).map_err(|e| Error::io(&p, e))?;
        }
    }
    fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))
}

pub fn read_corpus(dir: &Path) -> Result<CorpusSplit> {
    let meta_path = dir.join("config.json");
    let meta: CorpusMeta =
        serde_json::from_slice(&fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?)?;
    let manifest_path = dir.join("manifest.jsonl");
    let file = fs::File::open(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut corpus = CorpusSplit {
        seed: meta.seed,
        config: meta.config,
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
    };
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&manifest_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let m: ManifestLine = serde_json::from_str(&line)?;
        let p = dir.join("frames").join(format!("{}.fbx", m.id));
        let frames = decode_frames(&fs::read(&p).map_err(|e| Error::io(&p, e))?)?;
        let seq = DurationSeq::new(m.tokens, m.durations)?;
        if seq.total_frames() != frames.shape()[0] || frames.shape()[1] != corpus.config.channels {
            return Err(Error::Corpus(format!(
                "manifest line {}: {} frames of {} channels, durations sum to {}",
                n + 1,
                frames.shape()[0],
                frames.shape()[1],
                seq.total_frames()
            )));
        }
        let u = ToyUtterance {
            id: m.id,
            seq,
            style: m.style,
            attributes: m.labels,
            description: m.description,
            frames,
        };
        match m.split.as_str() {
            "train" => corpus.train.push(u),
            "valid" => corpus.valid.push(u),
            "test" => corpus.test.push(u),
            other => {
                return Err(Error::Corpus(format!(
                    "manifest line {}: unknown split {other}",
                    n + 1
                )))
            }
        }
    }
    Ok(corpus)
}
