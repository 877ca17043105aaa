"""The two encoder attention implementations.

`full_attention` is plain dense masked attention; it doubles as the
verification oracle for the block-structured path. `structured_attention`
computes the same result for the segmented mask without ever
materializing the (k+1)L x (k+1)L score matrix: demonstration rows take
a softmax over [own block || test block], test rows over the full
sequence, so peak score storage stays O(k L^2).

Logits are scaled by 1/sqrt(head_dim) in both variants, applied to the
queries once up front.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .segments import bias_for_layout, build_structured_mask
from .tensor import (add, concat, constant, contract, dropout, reshape,
                     scale, slice_axis, softmax_last)

VARIANTS = ("full", "structured")


@dataclass
class AttentionConfig:
    variant: str = "structured"
    heads: int = 4
    head_dim: int = 16
    dropout_rate: float = 0.0
    num_buckets: int = 64  # exact buckets over a whole desk-scale prompt
    max_distance: int = 128

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown attention variant {self.variant!r}")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ValueError("dropout_rate must lie in [0, 1)")


def full_attention(q, k, v, mask, bias=None, dropout_rate=0.0, rng=None):
    """z = softmax(q k^T + bias + mask) v, per head.

    q, k, v: (H, T, d). mask: AttentionMask or additive array broadcastable
    to (H, T, T). This is the oracle: one dense score matrix, no blocks.
    """
    q = scale(q, q.data.shape[-1] ** -0.5)
    scores = contract("htd,hrd->htr", q, k)
    mask_values = getattr(mask, "values", mask)
    if mask_values is not None:
        scores = add(scores, constant(mask_values))
    if bias is not None:
        scores = add(scores, bias)
    probs = softmax_last(scores)
    if dropout_rate > 0.0:
        probs = dropout(probs, dropout_rate, rng)
    return contract("htr,hrd->htd", probs, v)


def structured_attention(q, k, v, layout, bias_block=None, dropout_rate=0.0,
                         rng=None):
    """Block-structured attention over a segmented prompt.

    q, k, v: (H, (k+1)*L, d). Demonstration-segment rows normalize over
    the concatenation of their own diagonal block and the test block;
    test rows normalize over the whole row. `bias_block` is the shared
    (H, L, L) within-segment bias, applied on every segment diagonal and
    nowhere else.
    """
    H, T, d = q.data.shape
    q = scale(q, d ** -0.5)
    kdem = layout.num_demos
    L = layout.segment_length
    if T != layout.total_length:
        raise ValueError(
            f"sequence length {T} does not split into {kdem + 1} segments of {L}")

    key_mask = layout.key_mask()  # (T,)
    if kdem == 0:
        scores = contract("htd,hrd->htr", q, k)
        scores = add(scores, constant(key_mask[None, None, :]))
        if bias_block is not None:
            scores = add(scores, bias_block)
        probs = softmax_last(scores)
        if dropout_rate > 0.0:
            probs = dropout(probs, dropout_rate, rng)
        return contract("htr,hrd->htd", probs, v)

    qs = reshape(q, (H, kdem + 1, L, d))
    ks = reshape(k, (H, kdem + 1, L, d))
    vs = reshape(v, (H, kdem + 1, L, d))
    qd = slice_axis(qs, 1, 0, kdem)
    kd = slice_axis(ks, 1, 0, kdem)
    vd = slice_axis(vs, 1, 0, kdem)
    qt = reshape(slice_axis(qs, 1, kdem, kdem + 1), (H, L, d))
    kt = reshape(slice_axis(ks, 1, kdem, kdem + 1), (H, L, d))
    vt = reshape(slice_axis(vs, 1, kdem, kdem + 1), (H, L, d))

    block_key_mask = key_mask.reshape(kdem + 1, L)

    # demonstration rows: [own diagonal block || test block]
    diag = contract("hstd,hsrd->hstr", qd, kd)
    diag = add(diag, constant(block_key_mask[None, :kdem, None, :]))
    if bias_block is not None:
        diag = add(diag, reshape(bias_block, (H, 1, L, L)))
    to_test = contract("hstd,hrd->hstr", qd, kt)
    to_test = add(to_test, constant(block_key_mask[None, kdem, None, :]))
    rows = softmax_last(concat([diag, to_test], axis=-1))
    if dropout_rate > 0.0:
        rows = dropout(rows, dropout_rate, rng)
    p_diag = slice_axis(rows, -1, 0, L)
    p_test = slice_axis(rows, -1, L, 2 * L)
    z_demo = add(contract("hstr,hsrd->hstd", p_diag, vd),
                 contract("hstr,hrd->hstd", p_test, vt))

    # test rows: global attention over the whole sequence
    t_scores = contract("htd,hrd->htr", qt, k)
    t_scores = add(t_scores, constant(key_mask[None, None, :]))
    if bias_block is not None:
        zeros = constant(np.zeros((H, L, kdem * L)))
        t_scores = add(t_scores, concat([zeros, bias_block], axis=-1))
    t_probs = softmax_last(t_scores)
    if dropout_rate > 0.0:
        t_probs = dropout(t_probs, dropout_rate, rng)
    z_test = contract("htr,hrd->htd", t_probs, v)

    return concat([reshape(z_demo, (H, kdem * L, d)), z_test], axis=1)


def dense_structured_reference(q, k, v, layout, table):
    """Oracle route for the structured path: dense attention under the
    structured mask with the structured bias placement."""
    mask = build_structured_mask(layout)
    bias = bias_for_layout(table, layout, structured=True) if table else None
    return full_attention(q, k, v, mask, bias)


def score_storage(k, L):
    """Peak attention-score entries for each variant at (k, L)."""
    if k < 0 or L < 1:
        raise ValueError(f"bad (k, L) = ({k}, {L})")
    return {"full": ((k + 1) * L) ** 2, "structured": (3 * k + 1) * L * L}
