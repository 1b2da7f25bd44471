// SPDX-License-Identifier: MIT OR Apache-2.0

//! Tensor container files.
//!
//! Layout: the 8 magic bytes `LALWGT01`, a little-endian `u64` header length
//! `n`, `n` bytes of UTF-8 JSON, then every tensor's data as little-endian
//! `f32` in header order, row-major. The header is
//! `{"kind", "config", "metadata", "tensors": [{"name", "shape"}]}`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::transformer::{LayerWeights, Weights};
use super::{Matrix, ModelConfig, ModelError, PlantSpec, Transformer};

pub const MAGIC: &[u8; 8] = b"LALWGT01";
pub const TRANSFORMER_KIND: &str = "transformer";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    config: Value,
    metadata: Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub kind: String,
    pub config: Value,
    pub metadata: Value,
    pub tensors: Vec<NamedTensor>,
}

impl TensorFile {
    pub fn new(kind: &str, config: Value, metadata: Value) -> Self {
        TensorFile { kind: kind.to_string(), config, metadata, tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, values: &[f64]) {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.tensors.push(NamedTensor { name: name.into(), shape, data: values.iter().map(|&v| v as f32).collect() });
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), ModelError> {
        let header = Header {
            kind: self.kind.clone(),
            config: self.config.clone(),
            metadata: self.metadata.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| TensorEntry { name: t.name.clone(), shape: t.shape.clone() })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| ModelError::Format(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for t in &self.tensors {
            for v in &t.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, ModelError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| ModelError::Format("missing magic bytes".into()))?;
        if &magic != MAGIC {
            return Err(ModelError::Format(format!("bad magic {magic:?}")));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(|_| ModelError::Format("missing header length".into()))?;
        let len = u64::from_le_bytes(len) as usize;
        let mut json = Vec::new();
        r.by_ref().take(len as u64).read_to_end(&mut json)?;
        if json.len() != len {
            return Err(ModelError::Format(format!("header truncated: {} of {len} bytes", json.len())));
        }
        let header: Header = serde_json::from_slice(&json).map_err(|e| ModelError::Format(e.to_string()))?;
        let mut body = Vec::new();
        r.read_to_end(&mut body)?;
        let expected: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>() * 4).sum();
        if body.len() < expected {
            return Err(ModelError::Truncated { expected, found: body.len() });
        }
        if body.len() > expected {
            return Err(ModelError::Format(format!("{} trailing bytes after tensor data", body.len() - expected)));
        }
        let mut chunks = body.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        let tensors = header
            .tensors
            .into_iter()
            .map(|t| {
                let n = t.shape.iter().product();
                NamedTensor { name: t.name, shape: t.shape, data: chunks.by_ref().take(n).collect() }
            })
            .collect();
        Ok(TensorFile { kind: header.kind, config: header.config, metadata: header.metadata, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::read_from(BufReader::new(File::open(path)?))
    }

    /// Tensor `name` as `f64`, checked against `shape`.
    pub fn get(&self, name: &str, shape: &[usize]) -> Result<Vec<f64>, ModelError> {
        let t = self
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| ModelError::Format(format!("missing tensor {name}")))?;
        if t.shape != shape {
            return Err(ModelError::ShapeMismatch {
                name: name.into(),
                expected: shape.to_vec(),
                found: t.shape.clone(),
            });
        }
        Ok(t.data.iter().map(|&v| v as f64).collect())
    }

    pub fn matrix(&self, name: &str, rows: usize, cols: usize) -> Result<Matrix, ModelError> {
        Ok(Matrix::from_vec(rows, cols, self.get(name, &[rows, cols])?))
    }
}

fn transformer_file(model: &Transformer) -> TensorFile {
    let w = model.weights();
    let cfg = w.config;
    let (d, ff) = (cfg.d_model, cfg.d_ff);
    let metadata = serde_json::json!({ "plant": model.plant() });
    let mut f = TensorFile::new(TRANSFORMER_KIND, serde_json::to_value(cfg).expect("config serializes"), metadata);
    f.push("embed", vec![w.embed.rows(), d], w.embed.as_slice());
    f.push("pos", vec![64, d], w.pos.as_slice());
    for (l, lw) in w.layers.iter().enumerate() {
        let p = |s: &str| format!("layers.{l}.{s}");
        f.push(p("ln1.gain"), vec![d], &lw.ln1_gain);
        f.push(p("ln1.bias"), vec![d], &lw.ln1_bias);
        f.push(p("attn.wq"), vec![d, d], lw.wq.as_slice());
        f.push(p("attn.wk"), vec![d, d], lw.wk.as_slice());
        f.push(p("attn.wv"), vec![d, d], lw.wv.as_slice());
        f.push(p("attn.wo"), vec![d, d], lw.wo.as_slice());
        f.push(p("attn.bo"), vec![d], &lw.bo);
        f.push(p("ln2.gain"), vec![d], &lw.ln2_gain);
        f.push(p("ln2.bias"), vec![d], &lw.ln2_bias);
        f.push(p("mlp.w1"), vec![d, ff], lw.w1.as_slice());
        f.push(p("mlp.b1"), vec![ff], &lw.b1);
        f.push(p("mlp.w2"), vec![ff, d], lw.w2.as_slice());
        f.push(p("mlp.b2"), vec![d], &lw.b2);
    }
    f.push("final.gain", vec![d], &w.final_gain);
    f.push("final.bias", vec![d], &w.final_bias);
    f.push("readout.bilinear", vec![d, d], w.bilinear.as_slice());
    f.push("readout.promo", vec![4], &w.promo_bias);
    f.push("value.w", vec![d], &w.value_w);
    f.push("value.b", vec![1], &[w.value_b]);
    f
}

pub fn save_weights(model: &Transformer, path: impl AsRef<Path>) -> Result<(), ModelError> {
    transformer_file(model).save(path)
}

pub fn write_weights(model: &Transformer, w: impl Write) -> Result<(), ModelError> {
    transformer_file(model).write_to(w)
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<Transformer, ModelError> {
    transformer_from_file(&TensorFile::load(path)?)
}

pub fn read_weights(r: impl Read) -> Result<Transformer, ModelError> {
    transformer_from_file(&TensorFile::read_from(r)?)
}

pub fn transformer_from_file(f: &TensorFile) -> Result<Transformer, ModelError> {
    if f.kind != TRANSFORMER_KIND {
        return Err(ModelError::Format(format!("expected a {TRANSFORMER_KIND} file, found {}", f.kind)));
    }
    let cfg: ModelConfig =
        serde_json::from_value(f.config.clone()).map_err(|e| ModelError::Format(format!("config: {e}")))?;
    cfg.validate()?;
    let plant: Option<PlantSpec> = match f.metadata.get("plant") {
        None | Some(Value::Null) => None,
        Some(v) => Some(serde_json::from_value(v.clone()).map_err(|e| ModelError::Format(format!("plant: {e}")))?),
    };
    let (d, ff) = (cfg.d_model, cfg.d_ff);
    let mut layers = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        layers.push(LayerWeights {
            ln1_gain: f.get(&p("ln1.gain"), &[d])?,
            ln1_bias: f.get(&p("ln1.bias"), &[d])?,
            wq: f.matrix(&p("attn.wq"), d, d)?,
            wk: f.matrix(&p("attn.wk"), d, d)?,
            wv: f.matrix(&p("attn.wv"), d, d)?,
            wo: f.matrix(&p("attn.wo"), d, d)?,
            bo: f.get(&p("attn.bo"), &[d])?,
            ln2_gain: f.get(&p("ln2.gain"), &[d])?,
            ln2_bias: f.get(&p("ln2.bias"), &[d])?,
            w1: f.matrix(&p("mlp.w1"), d, ff)?,
            b1: f.get(&p("mlp.b1"), &[ff])?,
            w2: f.matrix(&p("mlp.w2"), ff, d)?,
            b2: f.get(&p("mlp.b2"), &[d])?,
        });
    }
    let expected = 2 + 13 * cfg.layers + 6;
    if f.tensors.len() != expected {
        return Err(ModelError::Format(format!("expected {expected} tensors, found {}", f.tensors.len())));
    }
    let weights = Weights {
        config: cfg,
        embed: f.matrix("embed", super::FEATURES, d)?,
        pos: f.matrix("pos", 64, d)?,
        layers,
        final_gain: f.get("final.gain", &[d])?,
        final_bias: f.get("final.bias", &[d])?,
        bilinear: f.matrix("readout.bilinear", d, d)?,
        promo_bias: f.get("readout.promo", &[4])?,
        value_w: f.get("value.w", &[d])?,
        value_b: f.get("value.b", &[1])?[0],
    };
    Transformer::with_plant(weights, plant)
}
