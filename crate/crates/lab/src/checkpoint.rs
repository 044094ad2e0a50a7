//! Adapter and model checkpoints: a magic line, one line of JSON header,
//! then `TSPM` blobs in the order the header implies. Loading is bit-exact.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use tailspace_core::adapter::{AdaptedLayer, AdapterPair, InitStrategy};
use tailspace_core::model::{Layer, LayerParams, LinearSpec, ToyModel};
use tailspace_core::Matrix;

use crate::error::{LabError, Result};
use crate::tspm;

const ADAPTER_MAGIC: &str = "tailspace-adapter 1";
const MODEL_MAGIC: &str = "tailspace-model 1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AdapterHeader {
    layer: String,
    rank: usize,
    alpha: f64,
    strategy: InitStrategy,
    seed: u64,
}

/// One layer's trained adapter with the metadata needed to reproduce it.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterCheckpoint {
    pub layer: String,
    pub strategy: InitStrategy,
    pub seed: u64,
    pub adapter: AdapterPair,
}

impl AdapterCheckpoint {
    pub fn from_layer(name: &str, layer: &AdaptedLayer) -> Self {
        Self { layer: name.to_string(), strategy: layer.strategy, seed: layer.seed, adapter: layer.adapter.clone() }
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        let header = AdapterHeader {
            layer: self.layer.clone(),
            rank: self.adapter.rank,
            alpha: self.adapter.alpha,
            strategy: self.strategy,
            seed: self.seed,
        };
        write_header(w, ADAPTER_MAGIC, &header)?;
        for m in [&self.adapter.a, &self.adapter.b] {
            tspm::write_matrix(w, m).map_err(blob_err)?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: &mut R) -> Result<Self> {
        let header: AdapterHeader = read_header(r, ADAPTER_MAGIC)?;
        let a = tspm::read_matrix(r)?;
        let b = tspm::read_matrix(r)?;
        let adapter = AdapterPair::new(a, b, header.alpha)?;
        if adapter.rank != header.rank {
            return Err(LabError::format("adapter checkpoint", format!("header rank {} but blobs have rank {}", header.rank, adapter.rank)));
        }
        Ok(Self { layer: header.layer, strategy: header.strategy, seed: header.seed, adapter })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_with(path, |w| self.write(w))
    }

    pub fn load(path: &Path) -> Result<Self> {
        load_with(path, Self::read)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelHeader {
    layers: Vec<LayerHeader>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayerHeader {
    spec: LinearSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    adapter: Option<AdapterMeta>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AdapterMeta {
    rank: usize,
    alpha: f64,
    strategy: InitStrategy,
    seed: u64,
    #[serde(default)]
    warnings: Vec<String>,
}

/// Blob order per layer: pristine `weight, [bias]`; adapted
/// `w_frozen, [bias], a, b, w_original`. Biases are `d × 1` blobs.
pub fn write_model<W: Write>(w: &mut W, model: &ToyModel) -> Result<()> {
    let layers = model
        .layers()
        .iter()
        .map(|l| LayerHeader {
            spec: l.spec.clone(),
            adapter: match &l.params {
                LayerParams::Pristine { .. } => None,
                LayerParams::Adapted(a) => Some(AdapterMeta {
                    rank: a.adapter.rank,
                    alpha: a.adapter.alpha,
                    strategy: a.strategy,
                    seed: a.seed,
                    warnings: a.warnings.clone(),
                }),
            },
        })
        .collect();
    write_header(w, MODEL_MAGIC, &ModelHeader { layers })?;
    for l in model.layers() {
        let (weight, adapted) = match &l.params {
            LayerParams::Pristine { weight, .. } => (weight, None),
            LayerParams::Adapted(a) => (&a.w_frozen, Some(a)),
        };
        tspm::write_matrix(w, weight).map_err(blob_err)?;
        if let Some(b) = l.bias() {
            tspm::write_matrix(w, &Matrix::column(b)?).map_err(blob_err)?;
        }
        if let Some(a) = adapted {
            for m in [&a.adapter.a, &a.adapter.b, &a.w_original] {
                tspm::write_matrix(w, m).map_err(blob_err)?;
            }
        }
    }
    Ok(())
}

pub fn read_model<R: BufRead>(r: &mut R) -> Result<ToyModel> {
    let header: ModelHeader = read_header(r, MODEL_MAGIC)?;
    let mut layers = Vec::with_capacity(header.layers.len());
    for lh in header.layers {
        let weight = tspm::read_matrix(r)?;
        let bias = if lh.spec.has_bias { Some(tspm::read_matrix(r)?.into_vec()) } else { None };
        let params = match lh.adapter {
            None => LayerParams::Pristine { weight, bias },
            Some(meta) => {
                let a = tspm::read_matrix(r)?;
                let b = tspm::read_matrix(r)?;
                let w_original = tspm::read_matrix(r)?;
                let adapter = AdapterPair::new(a, b, meta.alpha)?;
                if adapter.rank != meta.rank {
                    return Err(LabError::format("model checkpoint", format!("layer `{}`: rank mismatch", lh.spec.name)));
                }
                LayerParams::Adapted(AdaptedLayer {
                    w_frozen: weight,
                    bias,
                    adapter,
                    w_original,
                    strategy: meta.strategy,
                    seed: meta.seed,
                    warnings: meta.warnings,
                })
            }
        };
        layers.push(Layer { spec: lh.spec, params });
    }
    Ok(ToyModel::from_layers(layers)?)
}

pub fn save_model(path: &Path, model: &ToyModel) -> Result<()> {
    save_with(path, |w| write_model(w, model))
}

pub fn load_model(path: &Path) -> Result<ToyModel> {
    load_with(path, read_model)
}

fn blob_err(e: std::io::Error) -> LabError {
    LabError::format("checkpoint", format!("writing blob: {e}"))
}

fn write_header<W: Write, T: Serialize>(w: &mut W, magic: &str, header: &T) -> Result<()> {
    let json = serde_json::to_string(header)?;
    writeln!(w, "{magic}").and_then(|_| writeln!(w, "{json}")).map_err(blob_err)
}

fn read_header<R: BufRead, T: DeserializeOwned>(r: &mut R, magic: &str) -> Result<T> {
    let mut line = String::new();
    let mut next_line = |line: &mut String| -> Result<()> {
        line.clear();
        // Headers are short; a bounded read keeps garbage input from
        // pulling a whole binary file into memory.
        r.by_ref().take(1 << 20).read_line(line).map_err(|e| LabError::format("checkpoint header", e.to_string()))?;
        Ok(())
    };
    next_line(&mut line)?;
    if line.trim_end() != magic {
        return Err(LabError::format("checkpoint header", format!("expected `{magic}`")));
    }
    next_line(&mut line)?;
    Ok(serde_json::from_str(line.trim_end())?)
}

fn save_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let file = File::create(path).map_err(|e| LabError::io(path, e))?;
    let mut w = BufWriter::new(file);
    f(&mut w)?;
    w.flush().map_err(|e| LabError::io(path, e))
}

fn load_with<T>(path: &Path, f: impl FnOnce(&mut BufReader<File>) -> Result<T>) -> Result<T> {
    let file = File::open(path).map_err(|e| LabError::io(path, e))?;
    f(&mut BufReader::new(file)).map_err(|e| match e {
        LabError::Format { context, message } => LabError::format(format!("{}: {context}", path.display()), message),
        other => other,
    })
}
