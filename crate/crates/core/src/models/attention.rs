//! Shared transformer building blocks: linear layers, patch embedding,
//! multi-head self-attention, and the pre-norm encoder block.

use std::sync::Arc;

use crate::tensor::{Tape, Tensor, TensorError, TensorId};

pub(crate) const LN_EPS: f64 = 1e-5;

/// Additive attention bias, applied to the scaled scores before softmax.
pub(crate) enum AttnBias<'a> {
    None,
    /// One `[N×N]` bias per head.
    PerHead(&'a [TensorId]),
}

/// `x·W + b` with the bias broadcast over rows.
pub(crate) fn linear(
    tape: &mut Tape,
    x: TensorId,
    w: TensorId,
    b: TensorId,
) -> Result<TensorId, TensorError> {
    let xw = tape.matmul(x, w)?;
    tape.add(xw, b)
}

/// Element map flattening non-overlapping `patch×patch` squares of a
/// `side×side` image into `[(side/patch)² × patch²]` rows, raster order.
pub(crate) fn patch_map(side: usize, patch: usize) -> Vec<usize> {
    let grid = side / patch;
    let mut map = Vec::with_capacity(side * side);
    for pr in 0..grid {
        for pc in 0..grid {
            for i in 0..patch {
                for j in 0..patch {
                    map.push((pr * patch + i) * side + (pc * patch + j));
                }
            }
        }
    }
    map
}

/// Flatten patches and project each to the embed dim.
pub(crate) fn patch_embed(
    tape: &mut Tape,
    image: TensorId,
    side: usize,
    patch: usize,
    w: TensorId,
    b: TensorId,
) -> Result<TensorId, TensorError> {
    let grid = side / patch;
    let patches = tape.gather(
        image,
        Arc::new(patch_map(side, patch)),
        vec![grid * grid, patch * patch],
    )?;
    linear(tape, patches, w, b)
}

/// Column slice of a `[rows × total_cols]` tensor as an element map.
fn col_slice_map(rows: usize, total_cols: usize, offset: usize, width: usize) -> Vec<usize> {
    let mut map = Vec::with_capacity(rows * width);
    for r in 0..rows {
        for c in 0..width {
            map.push(r * total_cols + offset + c);
        }
    }
    map
}

/// Map reassembling `heads` row-stacked `[rows × width]` parts into
/// `[rows × heads·width]`, part `h` filling columns `h·width..`.
fn head_concat_map(heads: usize, rows: usize, width: usize) -> Vec<usize> {
    let mut map = Vec::with_capacity(heads * rows * width);
    for r in 0..rows {
        for h in 0..heads {
            for c in 0..width {
                map.push(h * rows * width + r * width + c);
            }
        }
    }
    map
}

/// Assemble the `[3D]` bias for a fused QKV projection from separate Q
/// and V biases. The K slice stays zero: softmax is invariant to a
/// per-row constant, so a K bias would be a parameter with an exactly
/// zero gradient.
pub(crate) fn qkv_bias_vector(
    tape: &mut Tape,
    q_bias: TensorId,
    v_bias: TensorId,
) -> Result<TensorId, TensorError> {
    let d = tape.dims(q_bias)[0];
    let row = |tape: &mut Tape, v: TensorId| tape.gather(v, Arc::new((0..d).collect()), vec![1, d]);
    let q_row = row(tape, q_bias)?;
    let zeros = tape.constant(Tensor::zeros(vec![1, d]));
    let v_row = row(tape, v_bias)?;
    let stacked = tape.concat_rows(&[q_row, zeros, v_row])?;
    tape.gather(stacked, Arc::new((0..3 * d).collect()), vec![3 * d])
}

/// Multi-head self-attention over `x: [N×D]`: per head
/// `softmax(QKᵀ/√(D/H) + bias)·V`, heads concatenated and
/// output-projected. Returns the output and the per-head post-softmax
/// attention matrices.
#[allow(clippy::too_many_arguments)]
pub(crate) fn mhsa(
    tape: &mut Tape,
    x: TensorId,
    heads: usize,
    wqkv: TensorId,
    q_bias: TensorId,
    v_bias: TensorId,
    wo: TensorId,
    bo: TensorId,
    bias: &AttnBias,
) -> Result<(TensorId, Vec<TensorId>), TensorError> {
    let (n, d) = {
        let dims = tape.dims(x);
        (dims[0], dims[1])
    };
    let dh = d / heads;
    let bqkv = qkv_bias_vector(tape, q_bias, v_bias)?;
    let qkv = linear(tape, x, wqkv, bqkv)?; // [N × 3D]

    if let AttnBias::PerHead(ids) = bias {
        if ids.len() != heads {
            return Err(TensorError::ShapeMismatch {
                op: "mhsa bias",
                left: vec![heads],
                right: vec![ids.len()],
            });
        }
    }

    let scale = 1.0 / (dh as f64).sqrt();
    let mut head_outs = Vec::with_capacity(heads);
    let mut attns = Vec::with_capacity(heads);
    for h in 0..heads {
        let slice = |offset: usize, tape: &mut Tape| {
            tape.gather(
                qkv,
                Arc::new(col_slice_map(n, 3 * d, offset + h * dh, dh)),
                vec![n, dh],
            )
        };
        let q = slice(0, tape)?;
        let k = slice(d, tape)?;
        let v = slice(2 * d, tape)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, scale);
        let scores = match bias {
            AttnBias::None => scores,
            AttnBias::PerHead(ids) => tape.add(scores, ids[h])?,
        };
        let attn = tape.softmax(scores, 1)?;
        attns.push(attn);
        head_outs.push(tape.matmul(attn, v)?);
    }

    let stacked = tape.concat_rows(&head_outs)?; // [(H·N) × dh]
    let combined = tape.gather(stacked, Arc::new(head_concat_map(heads, n, dh)), vec![n, d])?;
    let out = linear(tape, combined, wo, bo)?;
    Ok((out, attns))
}

/// Names of the parameters one encoder block owns, under `prefix`.
pub(crate) fn block_param_dims(
    prefix: &str,
    d: usize,
    hidden: usize,
) -> Vec<(String, Vec<usize>, ParamKind)> {
    vec![
        (format!("{prefix}.norm1.gamma"), vec![d], ParamKind::Ones),
        (format!("{prefix}.norm1.beta"), vec![d], ParamKind::Zeros),
        (format!("{prefix}.attn.qkv.weight"), vec![d, 3 * d], ParamKind::TruncNormal),
        (format!("{prefix}.attn.q_bias"), vec![d], ParamKind::Zeros),
        (format!("{prefix}.attn.v_bias"), vec![d], ParamKind::Zeros),
        (format!("{prefix}.attn.out.weight"), vec![d, d], ParamKind::TruncNormal),
        (format!("{prefix}.attn.out.bias"), vec![d], ParamKind::Zeros),
        (format!("{prefix}.norm2.gamma"), vec![d], ParamKind::Ones),
        (format!("{prefix}.norm2.beta"), vec![d], ParamKind::Zeros),
        (format!("{prefix}.mlp.fc1.weight"), vec![d, hidden], ParamKind::TruncNormal),
        (format!("{prefix}.mlp.fc1.bias"), vec![hidden], ParamKind::Zeros),
        (format!("{prefix}.mlp.fc2.weight"), vec![hidden, d], ParamKind::TruncNormal),
        (format!("{prefix}.mlp.fc2.bias"), vec![d], ParamKind::Zeros),
    ]
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum ParamKind {
    TruncNormal,
    Zeros,
    Ones,
}

/// Tape handles for one encoder block's parameters.
pub(crate) struct BlockIds {
    pub norm1_gamma: TensorId,
    pub norm1_beta: TensorId,
    pub qkv_w: TensorId,
    pub q_bias: TensorId,
    pub v_bias: TensorId,
    pub out_w: TensorId,
    pub out_b: TensorId,
    pub norm2_gamma: TensorId,
    pub norm2_beta: TensorId,
    pub fc1_w: TensorId,
    pub fc1_b: TensorId,
    pub fc2_w: TensorId,
    pub fc2_b: TensorId,
}

impl BlockIds {
    pub fn resolve(bound: &super::BoundParams, prefix: &str) -> Self {
        let id = |suffix: &str| bound.id(&format!("{prefix}.{suffix}"));
        BlockIds {
            norm1_gamma: id("norm1.gamma"),
            norm1_beta: id("norm1.beta"),
            qkv_w: id("attn.qkv.weight"),
            q_bias: id("attn.q_bias"),
            v_bias: id("attn.v_bias"),
            out_w: id("attn.out.weight"),
            out_b: id("attn.out.bias"),
            norm2_gamma: id("norm2.gamma"),
            norm2_beta: id("norm2.beta"),
            fc1_w: id("mlp.fc1.weight"),
            fc1_b: id("mlp.fc1.bias"),
            fc2_w: id("mlp.fc2.weight"),
            fc2_b: id("mlp.fc2.bias"),
        }
    }
}

/// Pre-norm encoder block with a custom attention body:
/// `x + attn(norm(x))`, then `x + mlp(norm(x))`.
pub(crate) fn encoder_block<F>(
    tape: &mut Tape,
    x: TensorId,
    ids: &BlockIds,
    attend: F,
) -> Result<TensorId, TensorError>
where
    F: FnOnce(&mut Tape, TensorId) -> Result<TensorId, TensorError>,
{
    let normed = tape.layer_norm(x, ids.norm1_gamma, ids.norm1_beta, LN_EPS)?;
    let attended = attend(tape, normed)?;
    let x = tape.add(x, attended)?;

    let normed = tape.layer_norm(x, ids.norm2_gamma, ids.norm2_beta, LN_EPS)?;
    let h = linear(tape, normed, ids.fc1_w, ids.fc1_b)?;
    let h = tape.gelu(h);
    let h = linear(tape, h, ids.fc2_w, ids.fc2_b)?;
    tape.add(x, h)
}

/// Plain global attention body for [`encoder_block`].
pub(crate) fn global_attention(
    tape: &mut Tape,
    x: TensorId,
    heads: usize,
    ids: &BlockIds,
    bias: &AttnBias,
) -> Result<TensorId, TensorError> {
    Ok(mhsa(
        tape,
        x,
        heads,
        ids.qkv_w,
        ids.q_bias,
        ids.v_bias,
        ids.out_w,
        ids.out_b,
        bias,
    )?
    .0)
}

/// Mean over rows of `x: [N×D]` as a `[1×D]` tensor, computed by a
/// constant `1/N` row vector product.
pub fn mean_rows(tape: &mut Tape, x: TensorId) -> Result<TensorId, TensorError> {
    let n = tape.dims(x)[0];
    let ones = Tensor::new(vec![1, n], vec![1.0 / n as f64; n]).expect("mean weights");
    let w = tape.constant(ones);
    tape.matmul(w, x)
}
