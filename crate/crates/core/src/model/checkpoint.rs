//! Binary checkpoints.
//!
//! Layout: the 8-byte magic `PRMECKPT`, a little-endian `u32` format version,
//! a little-endian `u64` header length, a JSON header, then every array listed
//! in the header manifest as little-endian `f64`s, in manifest order. The
//! header alone describes the model's shape, so it can be inspected without
//! reading the arrays.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::local::WarmStart;
use super::train::{StochasticConfig, TrainConfig};
use super::{GlobalState, Hyper, ModelError};
use crate::nnet::{read_f64s, write_f64s, AdamConfig, AdamState, LayerSpec, Matrix, Network};

const MAGIC: &[u8; 8] = b"PRMECKPT";
const FORMAT_VERSION: u32 = 1;
const MAX_HEADER: u64 = 1 << 28;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayEntry {
    pub name: String,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResumeHeader {
    pub config: TrainConfig,
    pub stochastic: Option<StochasticConfig>,
    /// Training documents that have a stored warm start.
    pub warm_docs: Vec<usize>,
    pub num_docs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub hyper: Hyper,
    pub num_words: usize,
    pub iteration: u64,
    pub encoder: Option<Vec<LayerSpec>>,
    pub decoder: Option<Vec<LayerSpec>>,
    pub adam: AdamConfig,
    pub adam_steps: u64,
    pub resume: Option<ResumeHeader>,
    pub arrays: Vec<ArrayEntry>,
}

impl CheckpointHeader {
    pub fn total_values(&self) -> usize {
        self.arrays.iter().map(|a| a.len).sum()
    }
}

/// Training state beyond the globals, needed to continue a run exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainResume {
    pub config: TrainConfig,
    pub stochastic: Option<StochasticConfig>,
    pub warm: Vec<Option<WarmStart>>,
}

fn arrays_of<'a>(globals: &'a GlobalState, resume: Option<&'a TrainResume>) -> Vec<(String, &'a [f64])> {
    let mut out: Vec<(String, &[f64])> = vec![
        ("v_logits".into(), &globals.v_logits),
        ("ell".into(), globals.ell.data()),
        ("gamma".into(), globals.gamma.data()),
    ];
    for (name, net) in [("encoder", &globals.encoder), ("decoder", &globals.decoder)] {
        if let Some(net) = net {
            for (i, p) in net.params().into_iter().enumerate() {
                out.push((format!("{name}.param.{i}"), p));
            }
            for (i, s) in net.running_stats().into_iter().enumerate() {
                out.push((format!("{name}.running.{i}"), s));
            }
        }
    }
    for (i, m) in globals.adam.m.iter().enumerate() {
        out.push((format!("adam.m.{i}"), m));
    }
    for (i, v) in globals.adam.v.iter().enumerate() {
        out.push((format!("adam.v.{i}"), v));
    }
    if let Some(r) = resume {
        for (d, w) in r.warm.iter().enumerate() {
            if let Some(w) = w {
                out.push((format!("warm.{d}.a"), &w.a));
                out.push((format!("warm.{d}.b"), &w.b));
                out.push((format!("warm.{d}.eps"), std::slice::from_ref(&w.eps)));
            }
        }
    }
    out
}

/// Writes a checkpoint atomically (temporary file, then rename).
pub fn checkpoint_save(path: &Path, globals: &GlobalState, resume: Option<&TrainResume>) -> Result<(), ModelError> {
    let arrays = arrays_of(globals, resume);
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        hyper: globals.hyper.clone(),
        num_words: globals.num_words,
        iteration: globals.iteration,
        encoder: globals.encoder.as_ref().map(Network::specs),
        decoder: globals.decoder.as_ref().map(Network::specs),
        adam: globals.adam.config,
        adam_steps: globals.adam.t,
        resume: resume.map(|r| ResumeHeader {
            config: r.config.clone(),
            stochastic: r.stochastic,
            warm_docs: r.warm.iter().enumerate().filter(|(_, w)| w.is_some()).map(|(i, _)| i).collect(),
            num_docs: r.warm.len(),
        }),
        arrays: arrays
            .iter()
            .map(|(name, a)| ArrayEntry {
                name: name.clone(),
                len: a.len(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;

    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for (_, a) in &arrays {
            write_f64s(&mut w, a)?;
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn read_header_from<R: Read>(r: &mut R) -> Result<CheckpointHeader, ModelError> {
    let truncated = |e: std::io::Error| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            ModelError::Checkpoint("file is truncated".into())
        } else {
            ModelError::Io(e)
        }
    };
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(ModelError::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let mut v = [0u8; 4];
    r.read_exact(&mut v).map_err(truncated)?;
    let version = u32::from_le_bytes(v);
    if version != FORMAT_VERSION {
        return Err(ModelError::Checkpoint(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let mut l = [0u8; 8];
    r.read_exact(&mut l).map_err(truncated)?;
    let len = u64::from_le_bytes(l);
    if len > MAX_HEADER {
        return Err(ModelError::Checkpoint(format!("header length {len} is implausible")));
    }
    let mut json = vec![0u8; len as usize];
    r.read_exact(&mut json).map_err(truncated)?;
    let header: CheckpointHeader =
        serde_json::from_slice(&json).map_err(|e| ModelError::Checkpoint(format!("bad header: {e}")))?;
    if header.format_version != version {
        return Err(ModelError::Checkpoint("header and preamble disagree on the version".into()));
    }
    Ok(header)
}

/// Reads only the header; array data is not touched.
pub fn read_checkpoint_header(path: &Path) -> Result<CheckpointHeader, ModelError> {
    let mut r = BufReader::new(File::open(path)?);
    read_header_from(&mut r)
}

fn network_from(specs: &Option<Vec<LayerSpec>>) -> Result<Option<Network>, ModelError> {
    specs.as_deref().map(Network::from_specs).transpose().map_err(Into::into)
}

/// Loads globals and, when present, the state needed to resume training.
pub fn checkpoint_load(path: &Path) -> Result<(GlobalState, Option<TrainResume>), ModelError> {
    let mut r = BufReader::new(File::open(path)?);
    let header = read_header_from(&mut r)?;
    header.hyper.validate()?;
    let k = header.hyper.k;
    let d = header.num_words;

    let mut globals = GlobalState {
        hyper: header.hyper.clone(),
        num_words: d,
        v_logits: vec![0.0; k],
        ell: Matrix::zeros(k, header.hyper.location_dim()),
        gamma: Matrix::zeros(k, d),
        encoder: network_from(&header.encoder)?,
        decoder: network_from(&header.decoder)?,
        adam: AdamState::new(&[], header.adam),
        iteration: header.iteration,
    };
    globals.adam = AdamState::new(&globals.gradient_shapes(), header.adam);
    globals.adam.t = header.adam_steps;
    let mut resume = header.resume.as_ref().map(|h| TrainResume {
        config: h.config.clone(),
        stochastic: h.stochastic,
        warm: vec![None; h.num_docs],
    });
    if let (Some(res), Some(h)) = (&mut resume, &header.resume) {
        for &doc in &h.warm_docs {
            if doc >= h.num_docs {
                return Err(ModelError::Checkpoint(format!("warm start for document {doc} out of range")));
            }
            res.warm[doc] = Some(WarmStart {
                a: vec![0.0; k],
                b: vec![0.0; k],
                eps: 0.0,
            });
        }
    }

    {
        let expected = arrays_of(&globals, resume.as_ref());
        if expected.len() != header.arrays.len()
            || expected
                .iter()
                .zip(&header.arrays)
                .any(|((name, a), e)| *name != e.name || a.len() != e.len)
        {
            return Err(ModelError::Checkpoint(
                "array manifest does not match the model described by the header".into(),
            ));
        }
    }

    let mut fill = |out: &mut [f64]| -> Result<(), ModelError> {
        read_f64s(&mut r, out).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                ModelError::Checkpoint("file is truncated".into())
            } else {
                ModelError::Io(e)
            }
        })
    };
    fill(&mut globals.v_logits)?;
    fill(globals.ell.data_mut())?;
    fill(globals.gamma.data_mut())?;
    for net in [&mut globals.encoder, &mut globals.decoder].into_iter().flatten() {
        for p in net.params_mut() {
            fill(p)?;
        }
        for s in net.running_stats_mut() {
            fill(s)?;
        }
    }
    for m in &mut globals.adam.m {
        fill(m)?;
    }
    for v in &mut globals.adam.v {
        fill(v)?;
    }
    if let Some(res) = &mut resume {
        for w in res.warm.iter_mut().flatten() {
            fill(&mut w.a)?;
            fill(&mut w.b)?;
            fill(std::slice::from_mut(&mut w.eps))?;
        }
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(ModelError::Checkpoint("trailing data after the last array".into()));
    }
    Ok((globals, resume))
}
