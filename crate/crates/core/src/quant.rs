//! Per-layer symmetric weight quantization and the two's-complement bit view
//! the attack operates on.
//!
//! A q-bit code `c` with bits `b_{q-1} .. b_0` represents
//! `c = -b_{q-1} 2^{q-1} + sum_{i<q-1} b_i 2^i`, and the dequantized weight is
//! `delta * c`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Layer, ModelGraph, Weights};

pub const DEFAULT_BITS: u8 = 8;
pub const MIN_BITS: u8 = 2;
pub const MAX_BITS: u8 = 8;

fn check_bits(bits: u8) -> Result<()> {
    if !(MIN_BITS..=MAX_BITS).contains(&bits) {
        return Err(Error::Config(format!("bit width must be in [{MIN_BITS}, {MAX_BITS}], got {bits}")));
    }
    Ok(())
}

/// Largest code produced by quantization, `2^(q-1) - 1`.
pub fn max_code(bits: u8) -> i32 {
    (1 << (bits - 1)) - 1
}

/// Toggles one bit of a q-bit two's-complement code.
pub fn flip(code: i8, bit: u8, bits: u8) -> Result<i8> {
    check_bits(bits)?;
    if bit >= bits {
        return Err(Error::Invalid(format!("bit position {bit} out of range for {bits}-bit codes")));
    }
    let mask = (1u16 << bits) - 1;
    let raw = ((code as u8 as u16) & mask) ^ (1 << bit);
    let value = if raw & (1 << (bits - 1)) != 0 { raw as i16 - (1i16 << bits) } else { raw as i16 };
    Ok(value as i8)
}

/// Number of differing bits between two code arrays of the same width.
pub fn hamming_distance(original: &[i8], current: &[i8], bits: u8) -> Result<u64> {
    check_bits(bits)?;
    if original.len() != current.len() {
        return Err(Error::shape("hamming_distance", format!("{} vs {} codes", original.len(), current.len())));
    }
    let mask = ((1u16 << bits) - 1) as u8;
    Ok(original.iter().zip(current).map(|(&a, &b)| (((a ^ b) as u8) & mask).count_ones() as u64).sum())
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedLayer {
    codes: Vec<i8>,
    delta: f32,
    bits: u8,
}

impl QuantizedLayer {
    /// `delta = max|w| / (2^(q-1) - 1)`, codes rounded half-to-even.
    pub fn quantize(weights: &[f32], bits: u8) -> Result<Self> {
        check_bits(bits)?;
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Invalid("weights contain non-finite values".into()));
        }
        let max = weights.iter().fold(0.0f32, |m, w| m.max(w.abs()));
        if max == 0.0 {
            return Err(Error::Invalid("all-zero weights leave the step size undefined".into()));
        }
        let levels = max_code(bits) as f64;
        let codes = weights
            .iter()
            .map(|&w| (w as f64 * levels / max as f64).round_ties_even().clamp(-levels, levels) as i8)
            .collect();
        Ok(QuantizedLayer { codes, delta: (max as f64 / levels) as f32, bits })
    }

    pub fn from_parts(codes: Vec<i8>, delta: f32, bits: u8) -> Result<Self> {
        check_bits(bits)?;
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::Invalid(format!("step size must be positive and finite, got {delta}")));
        }
        let (lo, hi) = (-(1i32 << (bits - 1)), max_code(bits));
        if let Some(c) = codes.iter().find(|&&c| !(lo..=hi).contains(&(c as i32))) {
            return Err(Error::Invalid(format!("code {c} does not fit in {bits} bits")));
        }
        Ok(QuantizedLayer { codes, delta, bits })
    }

    pub fn codes(&self) -> &[i8] {
        &self.codes
    }

    pub fn delta(&self) -> f32 {
        self.delta
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn num_bits(&self) -> usize {
        self.codes.len() * self.bits as usize
    }

    pub fn dequantize(&self) -> Vec<f32> {
        self.codes.iter().map(|&c| self.delta * c as f32).collect()
    }

    fn check_index(&self, weight: usize) -> Result<()> {
        if weight >= self.codes.len() {
            return Err(Error::Invalid(format!("weight index {weight} out of range ({} weights)", self.codes.len())));
        }
        Ok(())
    }

    pub fn bit(&self, weight: usize, bit: u8) -> Result<bool> {
        self.check_index(weight)?;
        if bit >= self.bits {
            return Err(Error::Invalid(format!("bit position {bit} out of range for {}-bit codes", self.bits)));
        }
        Ok((self.codes[weight] as u8 >> bit) & 1 == 1)
    }

    /// Flips one bit in place and returns `(before, after)`.
    pub fn flip(&mut self, weight: usize, bit: u8) -> Result<(i8, i8)> {
        self.check_index(weight)?;
        let before = self.codes[weight];
        let after = flip(before, bit, self.bits)?;
        self.codes[weight] = after;
        Ok((before, after))
    }
}

/// `dL/db` for every bit of every weight, laid out `weight * q + bit`.
///
/// Chain rule through `w = delta * code`: non-sign bit `i` contributes
/// `delta * 2^i`, the sign bit `-delta * 2^(q-1)`.
pub fn bit_gradients(layer: &QuantizedLayer, weight_grads: &[f32]) -> Result<Vec<f32>> {
    if weight_grads.len() != layer.len() {
        return Err(Error::shape(
            "bit_gradients",
            format!("{} weight gradients for {} weights", weight_grads.len(), layer.len()),
        ));
    }
    let q = layer.bits as usize;
    let delta = layer.delta as f64;
    let place: Vec<f64> = (0..q).map(|i| if i == q - 1 { -((1u32 << i) as f64) } else { (1u32 << i) as f64 }).collect();
    let mut out = Vec::with_capacity(layer.len() * q);
    for &g in weight_grads {
        out.extend(place.iter().map(|p| (g as f64 * delta * p) as f32));
    }
    Ok(out)
}

/// Replaces every conv and linear weight tensor by its q-bit quantization.
/// Biases and BN parameters stay in floating point.
pub fn quantize_model(model: &ModelGraph, bits: u8) -> Result<ModelGraph> {
    check_bits(bits)?;
    let mut out = model.clone();
    for (i, layer) in out.layers_mut().iter_mut().enumerate() {
        let Some(weights) = layer.weights_mut() else { continue };
        let Weights::Float(w) = weights else {
            return Err(Error::Invalid(format!("layer {i} is already quantized")));
        };
        let q = QuantizedLayer::quantize(w, bits).map_err(|e| Error::Invalid(format!("layer {i}: {e}")))?;
        *weights = Weights::Quantized(q);
    }
    out.metadata.insert("bits".into(), bits.to_string());
    Ok(out)
}

/// Total differing bits across all quantized layers of two models sharing
/// an architecture.
pub fn model_hamming_distance(original: &ModelGraph, current: &ModelGraph) -> Result<u64> {
    let a: Vec<_> = original.quantized_layers().collect();
    let b: Vec<_> = current.quantized_layers().collect();
    if a.len() != b.len() || a.iter().zip(&b).any(|((i, x), (j, y))| i != j || x.bits() != y.bits()) {
        return Err(Error::Consistency("models have different quantized layers".into()));
    }
    a.iter().zip(&b).map(|((_, x), (_, y))| hamming_distance(x.codes(), y.codes(), x.bits())).sum()
}

/// Total attackable bits in a model.
pub fn attackable_bits(model: &ModelGraph) -> usize {
    model.quantized_layers().map(|(_, q)| q.num_bits()).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BitAddress {
    /// Index into the model's layer list.
    pub layer: usize,
    /// Flat index into the layer's weight tensor.
    pub weight: usize,
    /// 0 is the least significant bit, q-1 the sign bit.
    pub bit: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlipRecord {
    #[serde(flatten)]
    pub address: BitAddress,
    pub code_before: i8,
    pub code_after: i8,
    pub loss_before: f64,
    pub loss_after: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy_after: Option<f64>,
}

/// Flips `address` in `model`, returning `(before, after)` codes.
pub fn apply_flip(model: &mut ModelGraph, address: BitAddress) -> Result<(i8, i8)> {
    model
        .quantized_layer_mut(address.layer)
        .ok_or_else(|| Error::Invalid(format!("layer {} is not quantized", address.layer)))?
        .flip(address.weight, address.bit)
}

/// Re-applies a flip sequence, checking each record's `code_before` against
/// the model state.
pub fn replay(model: &mut ModelGraph, records: &[FlipRecord]) -> Result<()> {
    for (n, r) in records.iter().enumerate() {
        let (before, after) = apply_flip(model, r.address)?;
        if before != r.code_before || after != r.code_after {
            return Err(Error::Consistency(format!(
                "flip {n} at {:?}: expected {} -> {}, model had {before} -> {after}",
                r.address, r.code_before, r.code_after
            )));
        }
    }
    Ok(())
}

pub fn write_flip_records(mut out: impl Write, records: &[FlipRecord]) -> Result<()> {
    for r in records {
        let line = serde_json::to_string(r)?;
        writeln!(out, "{line}").map_err(|e| Error::io("<flip trace>", e))?;
    }
    Ok(())
}

pub fn read_flip_records(text: &str) -> Result<Vec<FlipRecord>> {
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

/// Layer indices holding quantized weights, in model order.
pub fn attackable_layers(model: &ModelGraph) -> Vec<usize> {
    model
        .layers()
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l, Layer::Conv2d(_) | Layer::Linear(_)) && l.weights().and_then(Weights::as_quantized).is_some())
        .map(|(i, _)| i)
        .collect()
}
