//! Global patch attention with a CLS-token readout.

use std::sync::Arc;

use super::attention::{
    block_param_dims, encoder_block, global_attention, linear, patch_embed, AttnBias, BlockIds,
    ParamKind, LN_EPS,
};
use super::{image_leaf, BoundParams, Init, ModelError, ParamSet, VitConfig};
use crate::tensor::{Tape, TensorId};

pub struct VitModel {
    pub cfg: VitConfig,
    pub params: ParamSet,
}

impl VitModel {
    pub fn new(cfg: VitConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut init = Init::new(seed);
        let mut params = ParamSet::default();
        let d = cfg.embed_dim;
        let p2 = cfg.patch_side * cfg.patch_side;

        let mut specs = vec![
            ("patch_embed.weight".to_string(), vec![p2, d], ParamKind::TruncNormal),
            ("patch_embed.bias".to_string(), vec![d], ParamKind::Zeros),
            ("cls_token".to_string(), vec![1, d], ParamKind::TruncNormal),
            (
                "pos_embed".to_string(),
                vec![cfg.tokens() + 1, d],
                ParamKind::TruncNormal,
            ),
        ];
        for i in 0..cfg.depth {
            specs.extend(block_param_dims(&format!("blocks.{i}"), d, cfg.mlp_hidden()));
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
        Ok(VitModel { cfg, params })
    }

    /// patch embed → prepend CLS → add position embeddings → encoder
    /// blocks → final norm → linear head on the CLS state.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        image: &[f64],
    ) -> Result<TensorId, ModelError> {
        let cfg = &self.cfg;
        let img = image_leaf(tape, image, cfg.image_side)?;
        let tokens = patch_embed(
            tape,
            img,
            cfg.image_side,
            cfg.patch_side,
            bound.id("patch_embed.weight"),
            bound.id("patch_embed.bias"),
        )?;
        let cls = bound.id("cls_token");
        let x = tape.concat_rows(&[cls, tokens])?;
        let mut x = tape.add(x, bound.id("pos_embed"))?;

        for i in 0..cfg.depth {
            let ids = BlockIds::resolve(bound, &format!("blocks.{i}"));
            x = encoder_block(tape, x, &ids, |tape, normed| {
                global_attention(tape, normed, cfg.heads, &ids, &AttnBias::None)
            })?;
        }

        let x = tape.layer_norm(x, bound.id("norm.gamma"), bound.id("norm.beta"), LN_EPS)?;
        let d = cfg.embed_dim;
        let cls_state = tape.gather(x, Arc::new((0..d).collect()), vec![1, d])?;
        let logits = linear(tape, cls_state, bound.id("head.weight"), bound.id("head.bias"))?;
        Ok(logits)
    }
}
