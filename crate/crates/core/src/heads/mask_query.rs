//! Mask-query head: a small cross-attention decoder turns trainable queries
//! into mask embeddings and class probabilities; masks are the sigmoid inner
//! product between projected features and mask embeddings, decoded to full
//! resolution through the assignment chain.
//!
//! The decoder is deliberately plain: pre-norm residual layers, cross
//! attention only (queries against the coarsest feature map), no masked
//! attention and no multi-scale inputs.

use crate::backbone::FeaturePyramid;
use crate::decode::decode_full_tape;
use crate::heads::{HeadConfig, HeadError, HeadOutput, SegmentationHead};
use crate::params::{ParamId, ParamStore, TapeBinding};
use crate::tensor::{ScaleArg, Tape, Tensor, TensorRef};

struct AttentionHead {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
}

struct DecoderLayer {
    ln_q_gain: ParamId,
    ln_q_bias: ParamId,
    ln_f_gain: ParamId,
    ln_f_bias: ParamId,
    heads: Vec<AttentionHead>,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
    ffn_w1: ParamId,
    ffn_b1: ParamId,
    ffn_w2: ParamId,
    ffn_b2: ParamId,
}

pub struct MaskQueryHead {
    queries: ParamId,
    layers: Vec<DecoderLayer>,
    ln_final_gain: ParamId,
    ln_final_bias: ParamId,
    mask_embed_w: ParamId,
    mask_embed_b: ParamId,
    feature_proj_w: ParamId,
    feature_proj_b: ParamId,
    class_w: ParamId,
    class_b: ParamId,
    head_dim: usize,
}

impl MaskQueryHead {
    pub fn build(cfg: &HeadConfig, backbone_channels: usize, store: &mut ParamStore) -> Self {
        let cq = cfg.query_dim;
        let nh = cfg.attention_heads.max(1);
        assert!(cq % nh == 0, "query_dim must be divisible by attention_heads");
        let head_dim = cq / nh;
        let ffn = cfg.ffn_multiplier.max(1) * cq;
        let ch = backbone_channels;
        let layers = (0..cfg.decoder_layers)
            .map(|l| {
                let p = format!("head.mask_query.layer{l}");
                DecoderLayer {
                    ln_q_gain: store.register_const(&format!("{p}.ln_q.gain"), vec![cq], 1.0),
                    ln_q_bias: store.register_const(&format!("{p}.ln_q.bias"), vec![cq], 0.0),
                    ln_f_gain: store.register_const(&format!("{p}.ln_f.gain"), vec![ch], 1.0),
                    ln_f_bias: store.register_const(&format!("{p}.ln_f.bias"), vec![ch], 0.0),
                    heads: (0..nh)
                        .map(|h| AttentionHead {
                            wq: store.register_uniform(&format!("{p}.h{h}.wq"), vec![head_dim, cq], cq),
                            wk: store.register_uniform(&format!("{p}.h{h}.wk"), vec![head_dim, ch], ch),
                            wv: store.register_uniform(&format!("{p}.h{h}.wv"), vec![head_dim, ch], ch),
                            wo: store.register_uniform(&format!("{p}.h{h}.wo"), vec![cq, head_dim], head_dim),
                        })
                        .collect(),
                    ln2_gain: store.register_const(&format!("{p}.ln2.gain"), vec![cq], 1.0),
                    ln2_bias: store.register_const(&format!("{p}.ln2.bias"), vec![cq], 0.0),
                    ffn_w1: store.register_uniform(&format!("{p}.ffn.w1"), vec![ffn, cq], cq),
                    ffn_b1: store.register_const(&format!("{p}.ffn.b1"), vec![ffn], 0.0),
                    ffn_w2: store.register_uniform(&format!("{p}.ffn.w2"), vec![cq, ffn], ffn),
                    ffn_b2: store.register_const(&format!("{p}.ffn.b2"), vec![cq], 0.0),
                }
            })
            .collect();
        MaskQueryHead {
            queries: store.register_uniform("head.mask_query.queries", vec![cq, cfg.num_queries], cq),
            layers,
            ln_final_gain: store.register_const("head.mask_query.ln_final.gain", vec![cq], 1.0),
            ln_final_bias: store.register_const("head.mask_query.ln_final.bias", vec![cq], 0.0),
            mask_embed_w: store.register_uniform("head.mask_query.mask_embed.w", vec![cfg.mask_dim, cq], cq),
            mask_embed_b: store.register_const("head.mask_query.mask_embed.b", vec![cfg.mask_dim], 0.0),
            feature_proj_w: store.register_uniform("head.mask_query.feature_proj.w", vec![cfg.mask_dim, ch], ch),
            feature_proj_b: store.register_const("head.mask_query.feature_proj.b", vec![cfg.mask_dim], 0.0),
            class_w: store.register_uniform("head.mask_query.class.w", vec![cfg.num_classes + 1, cq], cq),
            class_b: store.register_const("head.mask_query.class.b", vec![cfg.num_classes + 1], 0.0),
            head_dim,
        }
    }

    /// Decoder stack: queries cross-attend to the coarsest features, then
    /// feed-forward, both as pre-norm residual updates.
    fn decode_queries(
        &self,
        tape: &mut Tape,
        binding: &TapeBinding,
        features: TensorRef,
    ) -> Result<TensorRef, HeadError> {
        const LN_EPS: f64 = 1e-5;
        let mut x = binding.get(self.queries);
        let attn_scale = (self.head_dim as f64).sqrt();
        for layer in &self.layers {
            let qn = tape.layer_norm_cols(x, binding.get(layer.ln_q_gain), binding.get(layer.ln_q_bias), LN_EPS)?;
            let fnorm =
                tape.layer_norm_cols(features, binding.get(layer.ln_f_gain), binding.get(layer.ln_f_bias), LN_EPS)?;
            let mut attn_sum: Option<TensorRef> = None;
            for head in &layer.heads {
                let q = tape.linear_cols(qn, binding.get(head.wq), None)?;
                let k = tape.linear_cols(fnorm, binding.get(head.wk), None)?;
                let v = tape.linear_cols(fnorm, binding.get(head.wv), None)?;
                let scores = tape.matmul_tn(q, k)?;
                let attn = tape.softmax_rows(scores, ScaleArg::Const(attn_scale))?;
                let mixed = tape.matmul_nt(v, attn)?;
                let out = tape.linear_cols(mixed, binding.get(head.wo), None)?;
                attn_sum = Some(match attn_sum {
                    Some(acc) => tape.add(acc, out)?,
                    None => out,
                });
            }
            if let Some(attn) = attn_sum {
                x = tape.add(x, attn)?;
            }
            let xn = tape.layer_norm_cols(x, binding.get(layer.ln2_gain), binding.get(layer.ln2_bias), LN_EPS)?;
            let h = tape.linear_cols(xn, binding.get(layer.ffn_w1), Some(binding.get(layer.ffn_b1)))?;
            let h = tape.silu(h)?;
            let h = tape.linear_cols(h, binding.get(layer.ffn_w2), Some(binding.get(layer.ffn_b2)))?;
            x = tape.add(x, h)?;
        }
        if !self.layers.is_empty() {
            x = tape.layer_norm_cols(x, binding.get(self.ln_final_gain), binding.get(self.ln_final_bias), LN_EPS)?;
        }
        Ok(x)
    }
}

impl SegmentationHead for MaskQueryHead {
    fn name(&self) -> &'static str {
        "mask-query"
    }

    fn forward(
        &self,
        tape: &mut Tape,
        binding: &TapeBinding,
        pyramid: &FeaturePyramid,
        image: (usize, usize),
    ) -> Result<HeadOutput, HeadError> {
        let features = pyramid.final_features;
        let q_final = self.decode_queries(tape, binding, features)?;

        // class probabilities per query
        let cls_logits = tape.linear_cols(q_final, binding.get(self.class_w), Some(binding.get(self.class_b)))?;
        let cls_logits = tape.transpose(cls_logits)?;
        let class_probs = tape.softmax_rows(cls_logits, ScaleArg::Const(1.0))?;

        // sigmoid inner product between projected features and mask embeddings
        let e_mask = tape.linear_cols(q_final, binding.get(self.mask_embed_w), Some(binding.get(self.mask_embed_b)))?;
        let e_feat =
            tape.linear_cols(features, binding.get(self.feature_proj_w), Some(binding.get(self.feature_proj_b)))?;
        let logits = tape.matmul_tn(e_feat, e_mask)?;
        let coarse_masks = tape.sigmoid(logits)?;

        let assignments: Vec<_> = pyramid.levels.iter().map(|l| l.assignment.clone()).collect();
        let decoded = decode_full_tape(tape, &assignments, coarse_masks)?;
        let finest = assignments.first().map(|a| a.fine_shape).unwrap_or(pyramid.final_grid);
        let masks = tape.upsample_rows(decoded, finest, image)?;
        Ok(HeadOutput::MaskQuery { class_probs, masks, coarse_masks })
    }
}

/// Panoptic post-processing output at full resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct PanopticPrediction {
    /// Per-pixel class label; `num_classes` is the void label.
    pub labels: Vec<u32>,
    /// Per-pixel winning query index; `num_queries` marks void pixels.
    pub instances: Vec<u32>,
}

/// Per pixel, among queries whose most likely class is not no-object, pick
/// the query maximizing `P[i, c_i] · M[j, i]`; pixels with no candidate get
/// the void label.
pub fn postprocess_panoptic(class_probs: &Tensor, masks: &Tensor) -> PanopticPrediction {
    let num_queries = class_probs.rows();
    let num_classes = class_probs.cols() - 1; // last column is no-object
    let pixels = masks.rows();
    debug_assert_eq!(masks.cols(), num_queries);

    // per query: most likely class and its confidence
    let mut best_class = vec![0usize; num_queries];
    let mut confidence = vec![0.0f64; num_queries];
    let mut valid = vec![false; num_queries];
    for i in 0..num_queries {
        let row = class_probs.row(i);
        let mut c = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[c] {
                c = j;
            }
        }
        best_class[i] = c;
        confidence[i] = row[c];
        valid[i] = c != num_classes;
    }

    let mut labels = vec![num_classes as u32; pixels];
    let mut instances = vec![num_queries as u32; pixels];
    for j in 0..pixels {
        let mrow = masks.row(j);
        let mut best = None;
        let mut best_score = f64::NEG_INFINITY;
        for i in 0..num_queries {
            if !valid[i] {
                continue;
            }
            let score = confidence[i] * mrow[i];
            if score > best_score {
                best_score = score;
                best = Some(i);
            }
        }
        if let Some(i) = best {
            labels[j] = best_class[i] as u32;
            instances[j] = i as u32;
        }
    }
    PanopticPrediction { labels, instances }
}
