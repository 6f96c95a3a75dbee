//! Shifted-window hierarchical attention with patch merging.
//!
//! Window attention restricts self-attention to `M×M` token windows;
//! odd-indexed blocks first shift the token grid cyclically by `M/2` and
//! add an additive mask so tokens that were not neighbors before the shift
//! cannot attend to each other. Patch merging between stages halves the
//! feature-map side and doubles the channel count, which keeps attention
//! cost linear in token count at fixed window size.

use std::sync::Arc;

use super::attention::{
    block_param_dims, encoder_block, linear, patch_embed, qkv_bias_vector, BlockIds, ParamKind,
    LN_EPS,
};
use super::{image_leaf, mean_rows, BoundParams, Init, ModelError, ParamSet, SwinConfig};
use crate::tensor::{Tape, Tensor, TensorId};

/// Additive mask value for forbidden token pairs; large enough to drive
/// softmax weights below 1e-40 without producing NaN.
pub const MASK_FILL: f64 = -1e4;

/// Token order that groups a `rows×cols` grid into raster-order `m×m`
/// windows: entry `k` is the source token index of the `k`-th row after
/// partitioning.
pub fn window_row_order(rows: usize, cols: usize, m: usize) -> Vec<usize> {
    let mut order = Vec::with_capacity(rows * cols);
    for wr in 0..rows / m {
        for wc in 0..cols / m {
            for i in 0..m {
                for j in 0..m {
                    order.push((wr * m + i) * cols + (wc * m + j));
                }
            }
        }
    }
    order
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (dst, &src) in perm.iter().enumerate() {
        inv[src] = dst;
    }
    inv
}

/// Row order of a cyclic shift: the token at `(i, j)` moves to
/// `((i−s) mod rows, (j−s) mod cols)`, so output row `(a, b)` reads from
/// `((a+s) mod rows, (b+s) mod cols)`. Negative `s` undoes positive `s`.
pub fn cyclic_shift_order(rows: usize, cols: usize, s: i64) -> Vec<usize> {
    let mut order = Vec::with_capacity(rows * cols);
    for a in 0..rows as i64 {
        for b in 0..cols as i64 {
            let src_r = (a + s).rem_euclid(rows as i64) as usize;
            let src_c = (b + s).rem_euclid(cols as i64) as usize;
            order.push(src_r * cols + src_c);
        }
    }
    order
}

fn expect_3d(x: &Tensor, op: &'static str) -> Result<(usize, usize, usize), ModelError> {
    match x.dims() {
        [h, w, d] => Ok((*h, *w, *d)),
        other => Err(ModelError::InvalidConfig(format!(
            "{op} expects a [rows, cols, channels] tensor, got {other:?}"
        ))),
    }
}

/// Rearrange `[rows, cols, d]` into `[num_windows, m², d]`, windows in
/// raster order.
pub fn window_partition(x: &Tensor, m: usize) -> Result<Tensor, ModelError> {
    let (h, w, d) = expect_3d(x, "window_partition")?;
    if m == 0 || h % m != 0 || w % m != 0 {
        return Err(ModelError::InvalidConfig(format!(
            "map {h}x{w} not divisible into {m}x{m} windows"
        )));
    }
    let order = window_row_order(h, w, m);
    let mut values = Vec::with_capacity(x.numel());
    for &src in &order {
        values.extend_from_slice(&x.values()[src * d..(src + 1) * d]);
    }
    Ok(Tensor::new(vec![(h / m) * (w / m), m * m, d], values).expect("partition output"))
}

/// Inverse of [`window_partition`] for a map of known extents.
pub fn window_reverse(x: &Tensor, rows: usize, cols: usize) -> Result<Tensor, ModelError> {
    let (nw, wsz, d) = expect_3d(x, "window_reverse")?;
    let m = (wsz as f64).sqrt() as usize;
    if m * m != wsz || nw * wsz != rows * cols {
        return Err(ModelError::InvalidConfig(format!(
            "cannot reverse {nw} windows of {wsz} tokens into a {rows}x{cols} map"
        )));
    }
    let order = window_row_order(rows, cols, m);
    let inv = inverse_permutation(&order);
    let mut values = Vec::with_capacity(x.numel());
    for &src in &inv {
        values.extend_from_slice(&x.values()[src * d..(src + 1) * d]);
    }
    Ok(Tensor::new(vec![rows, cols, d], values).expect("reverse output"))
}

/// Cyclic shift of a `[rows, cols, d]` token map; see
/// [`cyclic_shift_order`] for the index rule.
pub fn cyclic_shift(x: &Tensor, s: i64) -> Result<Tensor, ModelError> {
    let (h, w, d) = expect_3d(x, "cyclic_shift")?;
    let order = cyclic_shift_order(h, w, s);
    let mut values = Vec::with_capacity(x.numel());
    for &src in &order {
        values.extend_from_slice(&x.values()[src * d..(src + 1) * d]);
    }
    Ok(Tensor::new(vec![h, w, d], values).expect("shift output"))
}

/// Per-window additive masks for shifted-window attention.
///
/// Every pre-shift token gets a region id from the row partition
/// `{[0, rows−m), [rows−m, rows−s), [rows−s, rows)}` crossed with the same
/// column partition; after the cyclic shift and window partition, pairs in
/// different regions get [`MASK_FILL`].
pub fn shift_attention_mask(
    rows: usize,
    cols: usize,
    m: usize,
    s: usize,
) -> Result<Vec<Tensor>, ModelError> {
    if m == 0 || !rows.is_multiple_of(m) || !cols.is_multiple_of(m) {
        return Err(ModelError::InvalidConfig(format!(
            "map {rows}x{cols} not divisible into {m}x{m} windows"
        )));
    }
    if s == 0 || s >= m {
        return Err(ModelError::InvalidConfig(format!(
            "shift {s} must satisfy 0 < s < window side {m}"
        )));
    }
    let band = |i: usize, extent: usize| {
        if i < extent - m {
            0
        } else if i < extent - s {
            1
        } else {
            2
        }
    };
    let mut region = vec![0u8; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            region[i * cols + j] = band(i, rows) * 3 + band(j, cols);
        }
    }
    let shifted: Vec<u8> = cyclic_shift_order(rows, cols, s as i64)
        .into_iter()
        .map(|src| region[src])
        .collect();

    let order = window_row_order(rows, cols, m);
    let wsz = m * m;
    let mut masks = Vec::with_capacity(order.len() / wsz);
    for window in order.chunks_exact(wsz) {
        let mut mask = vec![0.0; wsz * wsz];
        for (a, &ta) in window.iter().enumerate() {
            for (b, &tb) in window.iter().enumerate() {
                if shifted[ta] != shifted[tb] {
                    mask[a * wsz + b] = MASK_FILL;
                }
            }
        }
        masks.push(Tensor::new(vec![wsz, wsz], mask).expect("mask tensor"));
    }
    Ok(masks)
}

/// Gather map concatenating each 2×2 token neighborhood of a
/// `side×side×d` map into `[(side/2)² × 4d]` rows, neighborhood order
/// `(2i,2j), (2i+1,2j), (2i,2j+1), (2i+1,2j+1)`.
fn patch_merge_map(side: usize, d: usize) -> Vec<usize> {
    let half = side / 2;
    let mut map = Vec::with_capacity(half * half * 4 * d);
    for i in 0..half {
        for j in 0..half {
            for (di, dj) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                let src_row = (2 * i + di) * side + (2 * j + dj);
                for c in 0..d {
                    map.push(src_row * d + c);
                }
            }
        }
    }
    map
}

/// One recorded attention matrix plus the mask that shaped it, for
/// inspecting masked weights.
pub struct AttnTrace {
    pub attn: TensorId,
    pub mask: Option<Tensor>,
}

pub struct SwinModel {
    pub cfg: SwinConfig,
    pub params: ParamSet,
}

impl SwinModel {
    pub fn new(cfg: SwinConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut init = Init::new(seed);
        let mut params = ParamSet::default();
        let p2 = cfg.patch_side * cfg.patch_side;

        let mut specs = vec![
            ("patch_embed.weight".to_string(), vec![p2, cfg.embed_dim], ParamKind::TruncNormal),
            ("patch_embed.bias".to_string(), vec![cfg.embed_dim], ParamKind::Zeros),
        ];
        for (s, &depth) in cfg.depths.iter().enumerate() {
            let d = cfg.stage_dim(s);
            let hidden = (d as f64 * cfg.mlp_ratio).round() as usize;
            for b in 0..depth {
                specs.extend(block_param_dims(&format!("stages.{s}.blocks.{b}"), d, hidden));
            }
            if s + 1 < cfg.depths.len() {
                specs.extend([
                    (format!("stages.{s}.merge.norm.gamma"), vec![4 * d], ParamKind::Ones),
                    (format!("stages.{s}.merge.norm.beta"), vec![4 * d], ParamKind::Zeros),
                    (
                        format!("stages.{s}.merge.reduce.weight"),
                        vec![4 * d, 2 * d],
                        ParamKind::TruncNormal,
                    ),
                ]);
            }
        }
        let df = cfg.final_dim();
        specs.extend([
            ("norm.gamma".to_string(), vec![df], ParamKind::Ones),
            ("norm.beta".to_string(), vec![df], ParamKind::Zeros),
            ("head.weight".to_string(), vec![df, cfg.num_classes], ParamKind::TruncNormal),
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
        Ok(SwinModel { cfg, params })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        image: &[f64],
    ) -> Result<TensorId, ModelError> {
        self.forward_traced(tape, bound, image, &mut Vec::new())
    }

    /// Forward pass that also records every window-attention matrix and
    /// its mask.
    pub fn forward_traced(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        image: &[f64],
        trace: &mut Vec<AttnTrace>,
    ) -> Result<TensorId, ModelError> {
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

        for (s, &depth) in cfg.depths.iter().enumerate() {
            let side = cfg.stage_side(s);
            let heads = cfg.heads[s];
            for b in 0..depth {
                let shift = if b % 2 == 1 { cfg.shift() } else { 0 };
                let ids = BlockIds::resolve(bound, &format!("stages.{s}.blocks.{b}"));
                x = encoder_block(tape, x, &ids, |tape, normed| {
                    windowed_attention(
                        tape,
                        normed,
                        side,
                        heads,
                        cfg.window_side,
                        shift,
                        &ids,
                        trace,
                    )
                    .map_err(|e| match e {
                        ModelError::Tensor(t) => t,
                        other => panic!("window attention failed: {other}"),
                    })
                })?;
            }
            if s + 1 < cfg.depths.len() {
                let d = cfg.stage_dim(s);
                let half = side / 2;
                let merged = tape.gather(
                    x,
                    Arc::new(patch_merge_map(side, d)),
                    vec![half * half, 4 * d],
                )?;
                let normed = tape.layer_norm(
                    merged,
                    bound.id(&format!("stages.{s}.merge.norm.gamma")),
                    bound.id(&format!("stages.{s}.merge.norm.beta")),
                    LN_EPS,
                )?;
                x = tape.matmul(normed, bound.id(&format!("stages.{s}.merge.reduce.weight")))?;
            }
        }

        let x = tape.layer_norm(x, bound.id("norm.gamma"), bound.id("norm.beta"), LN_EPS)?;
        let pooled = mean_rows(tape, x)?;
        let logits = linear(tape, pooled, bound.id("head.weight"), bound.id("head.bias"))?;
        Ok(logits)
    }
}

/// Window attention over a `side²×d` token map: optional cyclic shift,
/// per-window per-head attention with the shift mask, reassembly, unshift,
/// output projection. `shift == 0` reduces to plain window attention.
#[allow(clippy::too_many_arguments)]
fn windowed_attention(
    tape: &mut Tape,
    x: TensorId,
    side: usize,
    heads: usize,
    m: usize,
    shift: usize,
    ids: &BlockIds,
    trace: &mut Vec<AttnTrace>,
) -> Result<TensorId, ModelError> {
    let d = tape.dims(x)[1];
    let n = side * side;
    let dh = d / heads;
    let wsz = m * m;

    let x_s = if shift > 0 {
        let order = cyclic_shift_order(side, side, shift as i64);
        let map = rows_to_elements(&order, d);
        tape.gather(x, Arc::new(map), vec![n, d])?
    } else {
        x
    };

    let bqkv = qkv_bias_vector(tape, ids.q_bias, ids.v_bias)?;
    let qkv = linear(tape, x_s, ids.qkv_w, bqkv)?; // [N × 3D]
    let masks = if shift > 0 {
        Some(shift_attention_mask(side, side, m, shift)?)
    } else {
        None
    };
    let mask_ids: Option<Vec<TensorId>> = masks
        .as_ref()
        .map(|ms| ms.iter().map(|t| tape.constant(t.clone())).collect());

    let order = window_row_order(side, side, m);
    let num_windows = n / wsz;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut parts = Vec::with_capacity(num_windows * heads);
    for w in 0..num_windows {
        let rows = &order[w * wsz..(w + 1) * wsz];
        for h in 0..heads {
            let slice = |offset: usize, tape: &mut Tape| {
                let mut map = Vec::with_capacity(wsz * dh);
                for &r in rows {
                    for c in 0..dh {
                        map.push(r * 3 * d + offset + h * dh + c);
                    }
                }
                tape.gather(qkv, Arc::new(map), vec![wsz, dh])
            };
            let q = slice(0, tape)?;
            let k = slice(d, tape)?;
            let v = slice(2 * d, tape)?;
            let kt = tape.transpose(k)?;
            let scores = tape.matmul(q, kt)?;
            let mut scores = tape.scale(scores, scale);
            if let Some(ref mids) = mask_ids {
                scores = tape.add(scores, mids[w])?;
            }
            let attn = tape.softmax(scores, 1)?;
            trace.push(AttnTrace {
                attn,
                mask: masks.as_ref().map(|ms| ms[w].clone()),
            });
            parts.push(tape.matmul(attn, v)?);
        }
    }

    // Reassemble [N×D] in shifted token order: token r sits at position
    // p within window w, head h fills columns h·dh..(h+1)·dh.
    let stacked = tape.concat_rows(&parts)?;
    let inv_order = inverse_permutation(&order);
    let mut map = Vec::with_capacity(n * d);
    for &pos in &inv_order {
        let (w, p) = (pos / wsz, pos % wsz);
        for col in 0..d {
            let (h, c) = (col / dh, col % dh);
            map.push((w * heads + h) * wsz * dh + p * dh + c);
        }
    }
    let mut combined = tape.gather(stacked, Arc::new(map), vec![n, d])?;

    if shift > 0 {
        let order = cyclic_shift_order(side, side, -(shift as i64));
        let map = rows_to_elements(&order, d);
        combined = tape.gather(combined, Arc::new(map), vec![n, d])?;
    }
    Ok(linear(tape, combined, ids.out_w, ids.out_b)?)
}

/// Expand a row permutation over `d`-wide rows into an element map.
fn rows_to_elements(order: &[usize], d: usize) -> Vec<usize> {
    let mut map = Vec::with_capacity(order.len() * d);
    for &src in order {
        for c in 0..d {
            map.push(src * d + c);
        }
    }
    map
}
