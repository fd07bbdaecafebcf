//! Cross-attention capture, grounding diagnostics and heatmap figures.

mod figure;

use std::path::Path;

use orca_tape::{Graph, Scalar};
use serde::Serialize;

use crate::backbone::{prepare_latents, Backend, DenoiseRequest, NoiseSchedule, MID};
use crate::conditioner::ConditionEmbedding;
use crate::envkit::Mask;
use crate::error::contract;
use crate::{Error, Frame, Result};
pub use figure::{emit_heatmaps, CONTACT_SHEET_SUFFIX};

pub const DEFAULT_BLOCK: &str = MID;

#[derive(Debug, Clone, PartialEq)]
pub struct CaptureOptions {
    /// Emit one record per head instead of the head mean.
    pub per_head: bool,
    pub timestep: usize,
    pub noise_seed: u64,
}

impl Default for CaptureOptions {
    fn default() -> Self {
        Self { per_head: false, timestep: 0, noise_seed: 0 }
    }
}

/// One token's attention map over the spatial queries of one block.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttentionRecord {
    pub block_id: String,
    /// `None` for the mean over heads.
    pub head: Option<usize>,
    pub token_label: String,
    pub token_index: usize,
    /// Post-softmax mass per query location, row-major `[height, width]`.
    pub map_norm: Vec<f64>,
    /// Pre-softmax scores per query location.
    pub map_raw: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub frame: usize,
}

/// Unreduced attention of one block: `[heads, height·width, tokens]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockAttention {
    pub block_id: String,
    pub heads: usize,
    pub height: usize,
    pub width: usize,
    pub tokens: usize,
    pub probs: Vec<f64>,
    pub scores: Vec<f64>,
}

impl BlockAttention {
    /// Largest deviation from 1 of a per-query softmax total.
    pub fn max_row_sum_error(&self) -> f64 {
        self.probs.chunks(self.tokens).map(|r| (r.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Capture {
    pub records: Vec<AttentionRecord>,
    pub blocks: Vec<BlockAttention>,
}

/// One frozen forward pass of `image` under `condition`, recording the
/// cross-attention of every block in `block_ids`.
pub fn capture<S: Scalar>(
    backend: &dyn Backend<S>,
    schedule: &NoiseSchedule,
    image: &Frame,
    frame: usize,
    condition: &ConditionEmbedding<S>,
    block_ids: &[String],
    options: &CaptureOptions,
) -> Result<Capture> {
    contract!(!block_ids.is_empty(), "no blocks requested");
    let d = backend.descriptor();
    for b in block_ids {
        if !d.tap_points.contains(b) {
            return Err(Error::Config(format!("block `{b}` has no cross-attention in backend `{}`", d.backend_id)));
        }
    }
    let cs = condition.tokens.shape();
    contract!(cs.len() == 2 && cs[0] == condition.token_labels.len(), "condition has {cs:?} tokens for {} labels", condition.token_labels.len());
    let mut g = Graph::new();
    let z = prepare_latents(backend, schedule, &[image], options.timestep, &[options.noise_seed])?;
    let z = g.constant(z);
    let c = g.constant(condition.tokens.clone().reshape(&[1, cs[0], cs[1]]));
    let req = DenoiseRequest { taps: block_ids.to_vec(), record_attention: true, predict_noise: false };
    let out = backend.denoise_graph(&mut g, z, &[options.timestep], c, &req)?;
    let mut records = Vec::new();
    let mut blocks = Vec::new();
    for block in block_ids {
        let cap = out
            .attention
            .iter()
            .find(|a| &a.block == block)
            .ok_or_else(|| Error::Config(format!("block `{block}` recorded no attention")))?;
        let (h, w) = (cap.height, cap.width);
        let q = h * w;
        let l = cs[0];
        let heads = cap.trace.heads;
        let probs: Vec<f64> = g.value(cap.trace.probs).data().iter().map(|v| v.as_f64()).collect();
        let scores: Vec<f64> = g.value(cap.trace.scores).data().iter().map(|v| v.as_f64()).collect();
        contract!(probs.len() == heads * q * l, "attention of `{block}` has {} entries, expected {}", probs.len(), heads * q * l);
        let column = |src: &[f64], head: usize, tok: usize| -> Vec<f64> { (0..q).map(|i| src[(head * q + i) * l + tok]).collect() };
        for tok in 0..l {
            let mut push = |head: Option<usize>, map_norm: Vec<f64>, map_raw: Vec<f64>| {
                records.push(AttentionRecord {
                    block_id: block.clone(),
                    head,
                    token_label: condition.token_labels[tok].clone(),
                    token_index: tok,
                    map_norm,
                    map_raw,
                    height: h,
                    width: w,
                    frame,
                })
            };
            if options.per_head {
                for hd in 0..heads {
                    push(Some(hd), column(&probs, hd, tok), column(&scores, hd, tok));
                }
            } else {
                let mean = |src: &[f64]| -> Vec<f64> {
                    let mut acc = vec![0.0; q];
                    for hd in 0..heads {
                        for (a, v) in acc.iter_mut().zip(column(src, hd, tok)) {
                            *a += v / heads as f64;
                        }
                    }
                    acc
                };
                push(None, mean(&probs), mean(&scores));
            }
        }
        blocks.push(BlockAttention { block_id: block.clone(), heads, height: h, width: w, tokens: l, probs, scores });
    }
    Ok(Capture { records, blocks })
}

/// Fraction of the record's attention mass inside `mask`.
pub fn grounding_score(record: &AttentionRecord, mask: &Mask) -> Result<f64> {
    contract!(
        mask.height == record.height && mask.width == record.width,
        "mask is {}x{}, attention map {}x{}",
        mask.height,
        mask.width,
        record.height,
        record.width
    );
    let total = record.map_norm.iter().fold(0.0, |a, v| a + v);
    if total <= 0.0 {
        return Ok(0.0);
    }
    let inside: f64 = record.map_norm.iter().zip(&mask.bits).filter(|(_, &b)| b).fold(0.0, |a, (v, _)| a + v);
    Ok((inside / total).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroundingEntry {
    pub block_id: String,
    pub head: Option<usize>,
    pub token_label: String,
    pub token_index: usize,
    pub frame: usize,
    pub mask: String,
    pub score: f64,
}

/// Grounding of every record against each named renderer mask of its
/// frame, masks resized to the attention resolution. `masks[f]` belongs to
/// frame `f`.
pub fn grounding_table(records: &[AttentionRecord], masks: &[Vec<(String, Mask)>]) -> Result<Vec<GroundingEntry>> {
    let mut out = Vec::new();
    for r in records {
        let frame_masks = masks.get(r.frame).ok_or_else(|| Error::Contract(format!("no masks for frame {}", r.frame)))?;
        for (name, m) in frame_masks {
            out.push(GroundingEntry {
                block_id: r.block_id.clone(),
                head: r.head,
                token_label: r.token_label.clone(),
                token_index: r.token_index,
                frame: r.frame,
                mask: name.clone(),
                score: grounding_score(r, &m.resize(r.height, r.width))?,
            });
        }
    }
    Ok(out)
}

pub fn write_sidecar(path: impl AsRef<Path>, entries: &[GroundingEntry]) -> Result<()> {
    let p = path.as_ref();
    let json = serde_json::to_vec_pretty(entries).expect("entries serialize");
    std::fs::write(p, json).map_err(|e| Error::io(p, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(h: usize, w: usize) -> AttentionRecord {
        AttentionRecord {
            block_id: "mid".into(),
            head: None,
            token_label: "<bos>".into(),
            token_index: 0,
            map_norm: vec![0.25; h * w],
            map_raw: vec![0.0; h * w],
            height: h,
            width: w,
            frame: 0,
        }
    }

    #[test]
    fn grounding_examples() {
        let r = uniform(4, 4);
        let mut m = Mask::empty(4, 4);
        assert_eq!(grounding_score(&r, &m).unwrap(), 0.0);
        m.bits.iter_mut().for_each(|b| *b = true);
        assert_eq!(grounding_score(&r, &m).unwrap(), 1.0);
        for (i, b) in m.bits.iter_mut().enumerate() {
            *b = i < 8;
        }
        assert_eq!(grounding_score(&r, &m).unwrap(), 0.5);
        assert!(grounding_score(&r, &Mask::empty(2, 2)).is_err());
    }
}
