//! Relative-position-bias attention with mean-pooled classification.
//!
//! Instead of absolute position embeddings, every attention layer adds a
//! learned per-head bias indexed by the 2-D offset between token positions;
//! the class scores come from averaging all final patch states rather than
//! reading a CLS token.

use std::sync::Arc;

use super::attention::{
    block_param_dims, encoder_block, global_attention, linear, patch_embed, AttnBias, BlockIds,
    ParamKind, LN_EPS,
};
use super::{image_leaf, mean_rows, BeitConfig, BoundParams, Init, ModelError, ParamSet};
use crate::tensor::{Tape, TensorId};

/// Index table mapping every ordered token pair of a `side×side` grid to a
/// row of a `(2·side−1)²`-row bias table.
///
/// Entry `(i, j)` encodes the offset `(rowᵢ−rowⱼ, colᵢ−colⱼ)`, flattened
/// bijectively; all diagonal entries share the zero-offset row.
pub fn relative_position_index(side: usize) -> Vec<usize> {
    let n = side * side;
    let span = 2 * side - 1;
    let mut table = Vec::with_capacity(n * n);
    for i in 0..n {
        let (ri, ci) = (i / side, i % side);
        for j in 0..n {
            let (rj, cj) = (j / side, j % side);
            let dr = (ri as i64 - rj as i64 + side as i64 - 1) as usize;
            let dc = (ci as i64 - cj as i64 + side as i64 - 1) as usize;
            table.push(dr * span + dc);
        }
    }
    table
}

/// Recorded intermediates of one forward pass.
pub struct BeitTrace {
    /// Final hidden states after the last norm, `[tokens × D]`.
    pub final_hidden: TensorId,
    /// Mean-pooled representation, `[1 × D]`.
    pub pooled: TensorId,
}

pub struct BeitModel {
    pub cfg: BeitConfig,
    pub params: ParamSet,
}

impl BeitModel {
    pub fn new(cfg: BeitConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut init = Init::new(seed);
        let mut params = ParamSet::default();
        let d = cfg.embed_dim;
        let p2 = cfg.patch_side * cfg.patch_side;

        let mut specs = vec![
            ("patch_embed.weight".to_string(), vec![p2, d], ParamKind::TruncNormal),
            ("patch_embed.bias".to_string(), vec![d], ParamKind::Zeros),
        ];
        for i in 0..cfg.depth {
            specs.extend(block_param_dims(&format!("blocks.{i}"), d, cfg.mlp_hidden()));
            specs.push((
                format!("blocks.{i}.attn.rel_bias.table"),
                vec![cfg.bias_table_rows(), cfg.heads],
                ParamKind::Zeros,
            ));
        }
        specs.extend([
            ("norm.gamma".to_string(), vec![d], ParamKind::Ones),
            ("norm.beta".to_string(), vec![d], ParamKind::Zeros),
            ("head.weight".to_string(), vec![d, cfg.num_classes], ParamKind::TruncNormal),
            ("head.bias".to_string(), vec![cfg.num_classes], ParamKind::Zeros),
        ]);
        for (name, dims, kind) in specs {
            let t = match kind {
                ParamKind::TruncNormal => init.trunc_normal(dims),
                ParamKind::Zeros => init.zeros(dims),
                ParamKind::Ones => init.ones(dims),
            };
            params.insert(name, t);
        }
        Ok(BeitModel { cfg, params })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        image: &[f64],
    ) -> Result<TensorId, ModelError> {
        Ok(self.forward_traced(tape, bound, image)?.0)
    }

    /// patch embed (no position embedding) → blocks with per-head relative
    /// bias → final norm → mean pool over patch tokens → linear head.
    pub fn forward_traced(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        image: &[f64],
    ) -> Result<(TensorId, BeitTrace), ModelError> {
        let cfg = &self.cfg;
        let img = image_leaf(tape, image, cfg.image_side)?;
        let mut x = patch_embed(
            tape,
            img,
            cfg.image_side,
            cfg.patch_side,
            bound.id("patch_embed.weight"),
            bound.id("patch_embed.bias"),
        )?;

        let n = cfg.tokens();
        let rel_index = Arc::new(relative_position_index(cfg.grid_side()));
        for i in 0..cfg.depth {
            let ids = BlockIds::resolve(bound, &format!("blocks.{i}"));
            let table = bound.id(&format!("blocks.{i}.attn.rel_bias.table"));
            // per-head [N×N] bias gathered from the shared table
            let mut biases = Vec::with_capacity(cfg.heads);
            for h in 0..cfg.heads {
                let map: Vec<usize> =
                    rel_index.iter().map(|&row| row * cfg.heads + h).collect();
                biases.push(tape.gather(table, Arc::new(map), vec![n, n])?);
            }
            x = encoder_block(tape, x, &ids, |tape, normed| {
                global_attention(tape, normed, cfg.heads, &ids, &AttnBias::PerHead(&biases))
            })?;
        }

        let hidden = tape.layer_norm(x, bound.id("norm.gamma"), bound.id("norm.beta"), LN_EPS)?;
        let pooled = mean_rows(tape, hidden)?;
        let logits = linear(tape, pooled, bound.id("head.weight"), bound.id("head.bias"))?;
        Ok((logits, BeitTrace { final_hidden: hidden, pooled }))
    }
}
