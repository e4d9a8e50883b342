"""Softmax and linear single-head attention plus their analytic cost
models.

Both variants accept [..., N, C] (leading axes batched). The linear
variant computes the C x C key-value product first and never forms an
N x N matrix; its peak intermediate is max(C^2, N*C) elements.

The cost polynomials reproduce the source convention of one unit per
multiply-accumulate:

    softmax time = 3NC + NC^2 + N^2 C        space = 2N^2 + 4NC
    linear  time = 2NC^2 + 7NC               space = N + NC + C^2

When these are compared against counters that bill multiply+add as two
(crossstitch_cost, the bench module), the polynomial is doubled first;
see bench.analytic_cost.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from himat import tensor as T
from himat.errors import ShapeMismatch
from himat.tensor import Tensor

SOFTMAX = "softmax"
LINEAR = "linear"


@dataclass
class AttentionParams:
    """Square C x C projections (single-head, d_k == C)."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    d_k: int
    variant: str = SOFTMAX

    @classmethod
    def init(cls, c, rng, variant=SOFTMAX, dtype=np.float64, scale=None):
        s = scale if scale is not None else 1.0 / math.sqrt(c)
        mk = lambda: Tensor((rng.standard_normal((c, c)) * s).astype(dtype), requires_grad=True)
        return cls(w_q=mk(), w_k=mk(), w_v=mk(), w_o=mk(), d_k=c, variant=variant)

    @classmethod
    def identity(cls, c, variant=SOFTMAX):
        eye = np.eye(c)
        return cls(
            w_q=Tensor(eye.copy()),
            w_k=Tensor(eye.copy()),
            w_v=Tensor(eye.copy()),
            w_o=Tensor(eye.copy()),
            d_k=c,
            variant=variant,
        )

    def parameters(self):
        return [self.w_q, self.w_k, self.w_v, self.w_o]

    def check_input(self, s):
        c = self.w_q.shape[0]
        if s.shape[-1] != c:
            raise ShapeMismatch(f"input channels {s.shape[-1]} != projection size {c}")


def attention(s, p):
    """softmax(Q K^T / sqrt(d_k)) V followed by the output projection."""
    if p.variant != SOFTMAX:
        raise ValueError(f"attention() needs the softmax variant, got {p.variant!r}")
    s = s if isinstance(s, Tensor) else Tensor(s)
    p.check_input(s)
    q = T.matmul(s, p.w_q)
    k = T.matmul(s, p.w_k)
    v = T.matmul(s, p.w_v)
    scores = T.mul(T.matmul(q, T.swap_last(k)), 1.0 / math.sqrt(p.d_k))
    return T.matmul(T.matmul(T.softmax_rows(scores), v), p.w_o)


def linear_attention(s, p, eps=1e-6):
    """ReLU(Q) (ReLU(K)^T V) / (ReLU(Q) (ReLU(K)^T 1) + eps), then W_o.

    The C x C matrix ReLU(K)^T V is materialized first; association this
    way keeps every intermediate at max(C^2, N*C) elements.
    """
    if p.variant != LINEAR:
        raise ValueError(f"linear_attention() needs the linear variant, got {p.variant!r}")
    s = s if isinstance(s, Tensor) else Tensor(s)
    p.check_input(s)
    q = T.relu(T.matmul(s, p.w_q))
    k = T.relu(T.matmul(s, p.w_k))
    v = T.matmul(s, p.w_v)
    kv = T.matmul(T.swap_last(k), v)  # [..., C, C]
    num = T.matmul(q, kv)  # [..., N, C]
    ksum = T.tsum(k, axis=-2, keepdims=True)  # [..., 1, C] == (ReLU(K)^T 1)^T
    den = T.add(T.matmul(q, T.swap_last(ksum)), eps)  # [..., N, 1]
    return T.matmul(T.div(num, den), p.w_o)


def attention_blocked(s_data, p, block=512):
    """Inference-only softmax attention with row-blocked scores.

    Identical arithmetic to attention() but bounds peak memory to
    block*N score entries; used by the benchmark harness at token
    counts where a full N x N float64 matrix would not fit.
    """
    s_data = np.asarray(s_data)
    q = s_data @ p.w_q.data
    k = s_data @ p.w_k.data
    v = s_data @ p.w_v.data
    scale = 1.0 / math.sqrt(p.d_k)
    out = np.empty_like(q)
    n = q.shape[-2]
    for lo in range(0, n, block):
        hi = min(lo + block, n)
        sc = (q[..., lo:hi, :] @ np.swapaxes(k, -1, -2)) * scale
        sc -= sc.max(axis=-1, keepdims=True)
        np.exp(sc, out=sc)
        sc /= sc.sum(axis=-1, keepdims=True)
        out[..., lo:hi, :] = sc @ v
    return out @ p.w_o.data


def linear_attention_infer(s_data, p, eps=1e-6):
    """Inference-only linear attention: same arithmetic as
    linear_attention() on plain arrays, for the timing harness."""
    s_data = np.asarray(s_data)
    q = np.maximum(s_data @ p.w_q.data, 0)
    k = np.maximum(s_data @ p.w_k.data, 0)
    v = s_data @ p.w_v.data
    kv = np.swapaxes(k, -1, -2) @ v
    den = q @ k.sum(axis=-2)[..., None] + eps
    return (q @ kv) / den @ p.w_o.data


def attention_cost(n, c, variant, projection_term="paper"):
    """Evaluate the cost polynomials (one unit per multiply-accumulate).

    projection_term="corrected" swaps the softmax 3NC projection term
    for 3NC^2; it exists for sensitivity checks only and is never used
    when reproducing the published polynomials.
    """
    n, c = int(n), int(c)
    if variant == SOFTMAX:
        proj = 3 * n * c if projection_term == "paper" else 3 * n * c * c
        return {
            "time_flops": proj + n * c * c + n * n * c,
            "space_units": 2 * n * n + 4 * n * c,
        }
    if variant == LINEAR:
        return {
            "time_flops": 2 * n * c * c + 7 * n * c,
            "space_units": n + n * c + c * c,
        }
    raise ValueError(f"unknown variant {variant!r}")
