"""Self-contained verification suites: oracle equivalence, invariance,
mask accounting, and gradient checks. Shared by `iclattn verify` and the
test suite.
"""

from __future__ import annotations

import numpy as np

from . import tensor as tz
from .attention import (dense_structured_reference, full_attention,
                        score_storage, structured_attention)
from .segments import (RelativeBiasTable, SegmentLayout,
                       build_full_mask, build_structured_mask,
                       permute_segments)
from .tensor import Tensor


def finite_difference_grad(fn, tensors, step=1e-5):
    """Central finite differences of a scalar-valued fn wrt each tensor."""
    grads = []
    for t in tensors:
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = fn().item()
            flat[i] = orig - step
            lo = fn().item()
            flat[i] = orig
            gf[i] = (hi - lo) / (2 * step)
        grads.append(g)
    return grads


def grad_check(fn, tensors, step=1e-5, rtol=1e-4):
    """Compare analytic gradients against central differences."""
    for t in tensors:
        t.grad = None
    loss = fn()
    tz.backward(loss)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data)
                for t in tensors]
    numeric = finite_difference_grad(fn, tensors, step=step)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst <= rtol, worst


def random_instance(rng, k=None, L=None, H=None, d=4):
    k = int(rng.integers(0, 7)) if k is None else k
    L = int(rng.integers(1, 6)) if L is None else L
    H = int(rng.choice([1, 2])) if H is None else H
    valid = tuple(int(rng.integers(1, L + 1)) for _ in range(k + 1))
    layout = SegmentLayout(k, L, valid)
    shape = (H, layout.total_length, d)
    q = Tensor(rng.standard_normal(shape))
    kk = Tensor(rng.standard_normal(shape))
    v = Tensor(rng.standard_normal(shape))
    table = RelativeBiasTable(H, num_buckets=8, max_distance=16,
                              rng=rng, init_std=0.5)
    return q, kk, v, layout, table


def oracle_equivalence(instances=100, seed=0, tol=1e-9):
    """Structured attention vs dense oracle with structured mask + bias."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        q, k, v, layout, table = random_instance(rng)
        fast = structured_attention(q, k, v, layout,
                                    bias_block=table.bias_block(layout.segment_length))
        ref = dense_structured_reference(q, k, v, layout, table)
        valid = layout.key_valid()
        diff = np.abs(fast.data - ref.data)[:, valid, :]
        worst = max(worst, float(diff.max()))
    return worst <= tol, worst


def permutation_invariance(instances=50, seed=1, tol=1e-9):
    """Permuting demonstration segments permutes demonstration outputs
    and leaves the test-segment output unchanged."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        q, k, v, layout, table = random_instance(rng)
        if layout.num_demos < 2:
            continue
        perm = tuple(rng.permutation(layout.num_demos))
        bias = table.bias_block(layout.segment_length)
        base = structured_attention(q, k, v, layout, bias_block=bias)
        playout = layout.permuted(perm)
        pq = permute_segments(layout, q, perm, axis=1)
        pk = permute_segments(layout, k, perm, axis=1)
        pv = permute_segments(layout, v, perm, axis=1)
        permd = structured_attention(pq, pk, pv, playout, bias_block=bias)
        expected = permute_segments(layout, base, perm, axis=1)
        valid = playout.key_valid()
        diff = np.abs(permd.data - expected.data)[:, valid, :]
        worst = max(worst, float(diff.max()))
    return worst <= tol, worst


def mask_counts(max_k=6, max_l=5):
    """Allowed-pair counts vs brute-force evaluation of the attention
    rule, plus the closed-form counts for full layouts."""
    for k in range(max_k + 1):
        for L in range(1, max_l + 1):
            layout = SegmentLayout(k, L, (L,) * (k + 1))
            sa = build_structured_mask(layout).allowed_count()
            fu = build_full_mask(layout).allowed_count()
            if sa != (3 * k + 1) * L * L or fu != ((k + 1) * L) ** 2:
                return False, (k, L, sa, fu)
            brute = 0
            for qpos in range(layout.total_length):
                for kpos in range(layout.total_length):
                    qs, ks = qpos // L, kpos // L
                    if qs == ks or qs == k or ks == k:
                        brute += 1
            if brute != sa:
                return False, (k, L, sa, brute)
            st = score_storage(k, L)
            if st["full"] != fu or st["structured"] != sa:
                return False, (k, L, st)
    return True, None


def attention_gradients(seed=2, rtol=1e-4):
    """Finite-difference check through both attention variants."""
    rng = np.random.default_rng(seed)
    q, k, v, layout, table = random_instance(rng, k=2, L=2, H=2, d=3)

    def loss_structured():
        out = structured_attention(
            q, k, v, layout, bias_block=table.bias_block(layout.segment_length))
        return tz.tsum(tz.mul(out, out))

    def loss_full():
        out = dense_structured_reference(q, k, v, layout, table)
        return tz.tsum(tz.mul(out, out))

    for t in (q, k, v, table.weights):
        t.requires_grad = True
    ok1, w1 = grad_check(loss_structured, [q, k, v, table.weights], rtol=rtol)
    ok2, w2 = grad_check(loss_full, [q, k, v, table.weights], rtol=rtol)
    return ok1 and ok2, max(w1, w2)


def run_suite(quick=False):
    """Run all check groups; returns list of (name, ok, detail)."""
    n_oracle = 20 if quick else 100
    n_perm = 10 if quick else 50
    results = []
    for name, fn in [
        ("oracle-equivalence", lambda: oracle_equivalence(n_oracle)),
        ("permutation-invariance", lambda: permutation_invariance(n_perm)),
        ("mask-counts", mask_counts),
        ("attention-gradients", attention_gradients),
    ]:
        ok, detail = fn()
        results.append((name, ok, detail))
    return results
