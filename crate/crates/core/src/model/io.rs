//! On-disk model format.
//!
//! A model is a directory holding `manifest.json` (architecture, class count,
//! per-tensor offsets and SHA-256 checksums, quantization parameters) and
//! `tensors.bin`: an 8-byte magic followed by every tensor, little-endian.
//! Float tensors are `f32`; quantized weight codes are `i8`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Layer, LayerSpec, ModelGraph, Weights};
use crate::error::{Error, Result};
use crate::quant::QuantizedLayer;

pub const FORMAT_VERSION: u32 = 1;
const FORMAT_NAME: &str = "bdfa-model";
const MAGIC: &[u8; 8] = b"BDFATNS\x01";
const MANIFEST: &str = "manifest.json";
const BLOB: &str = "tensors.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum DType {
    F32,
    I8,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    offset: u64,
    bytes: u64,
    sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct QuantEntry {
    layer: usize,
    bits: u8,
    delta: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    name: String,
    classes: usize,
    input_shape: [usize; 3],
    layers: Vec<LayerSpec>,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    quantization: Vec<QuantEntry>,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

struct BlobWriter {
    blob: Vec<u8>,
    entries: Vec<TensorEntry>,
}

impl BlobWriter {
    fn push(&mut self, name: String, dtype: DType, shape: Vec<usize>, bytes: Vec<u8>) {
        self.entries.push(TensorEntry {
            name,
            dtype,
            shape,
            offset: self.blob.len() as u64,
            bytes: bytes.len() as u64,
            sha256: hex_digest(&bytes),
        });
        self.blob.extend_from_slice(&bytes);
    }

    fn push_f32(&mut self, name: String, shape: Vec<usize>, data: &[f32]) {
        let bytes = data.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.push(name, DType::F32, shape, bytes);
    }
}

pub fn save_model(model: &ModelGraph, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut w = BlobWriter { blob: MAGIC.to_vec(), entries: Vec::new() };
    let mut quantization = Vec::new();

    for (i, layer) in model.layers().iter().enumerate() {
        let key = |s: &str| format!("layers.{i}.{s}");
        if let (Some(weights), Some(shape)) = (layer.weights(), layer.weight_shape()) {
            match weights {
                Weights::Float(data) => w.push_f32(key("weight"), shape, data),
                Weights::Quantized(q) => {
                    let bytes = q.codes().iter().map(|&c| c as u8).collect();
                    w.push(key("weight"), DType::I8, shape, bytes);
                    quantization.push(QuantEntry { layer: i, bits: q.bits(), delta: q.delta() as f64 });
                }
            }
        }
        match layer {
            Layer::Conv2d(c) => {
                if let Some(b) = &c.bias {
                    w.push_f32(key("bias"), vec![b.len()], b);
                }
            }
            Layer::Linear(l) => w.push_f32(key("bias"), vec![l.bias.len()], &l.bias),
            Layer::BatchNorm2d(b) => {
                w.push_f32(key("gamma"), vec![b.channels], &b.gamma);
                w.push_f32(key("beta"), vec![b.channels], &b.beta);
                w.push_f32(key("running_mean"), vec![b.channels], &b.stats.running_mean);
                w.push_f32(key("running_var"), vec![b.channels], &b.stats.running_var);
            }
            _ => {}
        }
    }

    let manifest = Manifest {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        name: model.name.clone(),
        classes: model.classes(),
        input_shape: model.input_shape(),
        layers: model.layers().iter().map(Layer::spec).collect(),
        tensors: w.entries,
        quantization,
        metadata: model.metadata.clone(),
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(dir.join(MANIFEST), text + "\n").map_err(|e| Error::io(dir.join(MANIFEST), e))?;
    fs::write(dir.join(BLOB), &w.blob).map_err(|e| Error::io(dir.join(BLOB), e))?;
    Ok(())
}

struct BlobReader<'a> {
    blob: &'a [u8],
    entries: BTreeMap<&'a str, &'a TensorEntry>,
}

impl BlobReader<'_> {
    fn raw(&self, name: &str, dtype: DType, shape: &[usize]) -> Result<&[u8]> {
        let e = self
            .entries
            .get(name)
            .ok_or_else(|| Error::Consistency(format!("tensor `{name}` missing from manifest")))?;
        if e.dtype != dtype || e.shape != shape {
            return Err(Error::Consistency(format!(
                "tensor `{name}` is {:?} {:?}, architecture needs {dtype:?} {shape:?}",
                e.dtype, e.shape
            )));
        }
        let width = match dtype {
            DType::F32 => 4,
            DType::I8 => 1,
        };
        if e.bytes != (shape.iter().product::<usize>() * width) as u64 {
            return Err(Error::Consistency(format!("tensor `{name}` byte length disagrees with its shape")));
        }
        let end = e.offset.checked_add(e.bytes).filter(|&end| end <= self.blob.len() as u64);
        let Some(end) = end else {
            return Err(Error::Truncated(format!(
                "{BLOB} ends at byte {} but tensor `{name}` needs bytes {}..{}",
                self.blob.len(),
                e.offset,
                e.offset + e.bytes
            )));
        };
        let bytes = &self.blob[e.offset as usize..end as usize];
        if hex_digest(bytes) != e.sha256 {
            return Err(Error::Checksum(name.to_string()));
        }
        Ok(bytes)
    }

    fn f32s(&self, name: &str, shape: &[usize]) -> Result<Vec<f32>> {
        let bytes = self.raw(name, DType::F32, shape)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }
}

pub fn load_model(dir: impl AsRef<Path>) -> Result<ModelGraph> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join(MANIFEST)).map_err(|e| Error::io(dir.join(MANIFEST), e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{MANIFEST} is not a model manifest: {e}")))?;
    if manifest.format != FORMAT_NAME {
        return Err(Error::Format(format!("expected format `{FORMAT_NAME}`, found `{}`", manifest.format)));
    }
    if manifest.version != FORMAT_VERSION {
        return Err(Error::Version { found: manifest.version, expected: FORMAT_VERSION });
    }
    let blob = fs::read(dir.join(BLOB)).map_err(|e| Error::io(dir.join(BLOB), e))?;
    if blob.len() < MAGIC.len() {
        return Err(Error::Truncated(format!("{BLOB} is shorter than its header")));
    }
    if &blob[..MAGIC.len()] != MAGIC {
        return Err(Error::Format(format!("{BLOB} has bad magic bytes")));
    }
    let reader = BlobReader { blob: &blob, entries: manifest.tensors.iter().map(|e| (e.name.as_str(), e)).collect() };
    let quant: BTreeMap<usize, &QuantEntry> = manifest.quantization.iter().map(|q| (q.layer, q)).collect();

    let mut layers = Vec::with_capacity(manifest.layers.len());
    for (i, spec) in manifest.layers.iter().enumerate() {
        let key = |s: &str| format!("layers.{i}.{s}");
        let mut layer = Layer::from_spec(spec);
        if let Some(shape) = layer.weight_shape() {
            let weights = match quant.get(&i) {
                Some(q) => {
                    let codes = reader.raw(&key("weight"), DType::I8, &shape)?.iter().map(|&b| b as i8).collect();
                    Weights::Quantized(
                        QuantizedLayer::from_parts(codes, q.delta as f32, q.bits)
                            .map_err(|e| Error::Consistency(format!("layer {i}: {e}")))?,
                    )
                }
                None => Weights::Float(reader.f32s(&key("weight"), &shape)?),
            };
            *layer.weights_mut().unwrap() = weights;
        }
        match &mut layer {
            Layer::Conv2d(c) => {
                if let Some(b) = &mut c.bias {
                    *b = reader.f32s(&key("bias"), &[c.out_channels])?;
                }
            }
            Layer::Linear(l) => l.bias = reader.f32s(&key("bias"), &[l.out_features])?,
            Layer::BatchNorm2d(b) => {
                let ch = [b.channels];
                b.gamma = reader.f32s(&key("gamma"), &ch)?;
                b.beta = reader.f32s(&key("beta"), &ch)?;
                b.stats.running_mean = reader.f32s(&key("running_mean"), &ch)?;
                b.stats.running_var = reader.f32s(&key("running_var"), &ch)?;
            }
            _ => {}
        }
        layers.push(layer);
    }
    if let Some(q) = manifest.quantization.iter().find(|q| q.layer >= layers.len() || layers[q.layer].weights().is_none()) {
        return Err(Error::Consistency(format!("quantization entry for layer {} which has no weights", q.layer)));
    }

    let mut model = ModelGraph::new(manifest.name, layers, manifest.classes, manifest.input_shape)?;
    model.metadata = manifest.metadata;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;

    fn saved() -> (tempfile::TempDir, ModelGraph) {
        let dir = tempfile::tempdir().unwrap();
        let mut model = Architecture::DeskResnet.build([3, 8, 8], 4, 3).unwrap();
        model.metadata.insert("dataset".into(), "blobs4".into());
        save_model(&model, dir.path()).unwrap();
        (dir, model)
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let (dir, model) = saved();
        let back = load_model(dir.path()).unwrap();
        assert_eq!(back, model);
        for (a, b) in model.layers().iter().zip(back.layers()) {
            if let (Some(wa), Some(wb)) = (a.weights(), b.weights()) {
                let bits = |w: &Weights| w.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(wa), bits(wb));
            }
        }
    }

    #[test]
    fn corrupted_magic_is_format_error() {
        let (dir, _) = saved();
        let path = dir.path().join(BLOB);
        let mut blob = fs::read(&path).unwrap();
        blob[0] ^= 0xff;
        fs::write(&path, blob).unwrap();
        assert!(matches!(load_model(dir.path()), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_blob_detected() {
        let (dir, _) = saved();
        let path = dir.path().join(BLOB);
        let blob = fs::read(&path).unwrap();
        fs::write(&path, &blob[..blob.len() - 3]).unwrap();
        assert!(matches!(load_model(dir.path()), Err(Error::Truncated(_))));
    }

    #[test]
    fn flipped_payload_byte_is_checksum_failure() {
        let (dir, _) = saved();
        let path = dir.path().join(BLOB);
        let mut blob = fs::read(&path).unwrap();
        blob[MAGIC.len() + 5] ^= 0x01;
        fs::write(&path, blob).unwrap();
        assert!(matches!(load_model(dir.path()), Err(Error::Checksum(name)) if name == "layers.0.weight"));
    }

    fn edit_manifest(dir: &Path, f: impl FnOnce(&mut serde_json::Value)) {
        let path = dir.join(MANIFEST);
        let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        f(&mut v);
        fs::write(path, serde_json::to_string(&v).unwrap()).unwrap();
    }

    #[test]
    fn version_mismatch_detected() {
        let (dir, _) = saved();
        edit_manifest(dir.path(), |v| v["version"] = 99.into());
        assert!(matches!(load_model(dir.path()), Err(Error::Version { found: 99, expected: 1 })));
    }

    #[test]
    fn declared_classes_must_match_head() {
        let (dir, _) = saved();
        edit_manifest(dir.path(), |v| v["classes"] = 10.into());
        assert!(matches!(load_model(dir.path()), Err(Error::Consistency(_))));
    }

    #[test]
    fn garbage_manifest_is_format_error() {
        let (dir, _) = saved();
        fs::write(dir.path().join(MANIFEST), "not json").unwrap();
        assert!(matches!(load_model(dir.path()), Err(Error::Format(_))));
    }
}
