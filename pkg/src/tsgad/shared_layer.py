"""Shared trunk: bidirectional LSTM followed by scaled-dot-product self-attention.

Both detector heads read the trunk's output, so its parameters live in the
``shared`` partition and its output tensor is tagged ``"Z"`` on the tape for
gradient extraction during loss balancing.

Shapes are batch-first throughout: a window batch is ``(B, N, d)`` (``N``
sensors, ``d`` timestamps) and the trunk emits ``(B, d, N)`` — one refined
feature row per timestamp.
"""

from __future__ import annotations

import math

import numpy as np

from . import numgrad as ng
from .numgrad import ParamSpec, ShapeError, Tensor

GATES = ("i", "f", "o", "c")  # input, forget, output, candidate

Params = dict[str, Tensor]


def param_specs(n_sensors: int) -> dict[str, ParamSpec]:
    """Layout of the shared partition for ``n_sensors`` channels.

    The LSTM hidden size equals the sensor count so the trunk preserves the
    window's d x N shape.
    """
    n = n_sensors
    specs: dict[str, ParamSpec] = {}
    for direction in ("fw", "bw"):
        for gate in GATES:
            specs[f"lstm_{direction}.W{gate}"] = ParamSpec((n, n), fan_in=n)
            specs[f"lstm_{direction}.U{gate}"] = ParamSpec((n, n), fan_in=n)
            specs[f"lstm_{direction}.b{gate}"] = ParamSpec((n,), kind="bias")
    for name in ("Wq", "Wk", "Wv"):
        specs[f"attn.{name}"] = ParamSpec((n, n), fan_in=n)
    return specs


def _gate(x: Tensor, h: Tensor, p: Params, prefix: str, gate: str) -> Tensor:
    pre = ng.add(
        ng.add(ng.matmul(x, p[f"{prefix}.W{gate}"]), ng.matmul(h, p[f"{prefix}.U{gate}"])),
        p[f"{prefix}.b{gate}"],
    )
    return ng.tanh(pre) if gate == "c" else ng.sigmoid(pre)


def _cell(x: Tensor, h: Tensor, c: Tensor, p: Params, prefix: str) -> tuple[Tensor, Tensor]:
    """One LSTM step: sigmoid gates, tanh candidate and output squash."""
    gi = _gate(x, h, p, prefix, "i")
    gf = _gate(x, h, p, prefix, "f")
    go = _gate(x, h, p, prefix, "o")
    gc = _gate(x, h, p, prefix, "c")
    c_new = ng.add(ng.mul(gf, c), ng.mul(gi, gc))
    return ng.mul(go, ng.tanh(c_new)), c_new


def bilstm_forward(window: Tensor, p: Params) -> Tensor:
    """Run both LSTM directions over a window batch and average their states.

    window: (B, N, d). Returns (B, d, N) where row t is
    (forward state at t + backward state at t) / 2. Initial hidden and cell
    states are zero.
    """
    if window.ndim != 3:
        raise ShapeError(f"window must be (B, N, d), got {window.shape}")
    b, n, d = window.shape
    if p["lstm_fw.Wi"].shape != (n, n):
        raise ShapeError(
            f"params sized for {p['lstm_fw.Wi'].shape[0]} sensors, window has {n}"
        )
    tape = window.tape
    xs = [ng.take_col(window, t) for t in range(d)]  # each (B, N)

    def scan(prefix: str, order: range) -> list[Tensor]:
        h = tape.leaf(np.zeros((b, n)))
        c = tape.leaf(np.zeros((b, n)))
        states: dict[int, Tensor] = {}
        for t in order:
            h, c = _cell(xs[t], h, c, p, prefix)
            states[t] = h
        return [states[t] for t in range(d)]

    fw = scan("lstm_fw", range(d))
    bw = scan("lstm_bw", range(d - 1, -1, -1))
    rows = [
        ng.reshape(ng.scale(ng.add(fw[t], bw[t]), 0.5), (b, 1, n)) for t in range(d)
    ]
    return ng.concat(rows, axis=1)


def self_attention(seq: Tensor, p: Params) -> tuple[Tensor, np.ndarray]:
    """Scaled-dot-product self-attention with shared input for Q, K, V.

    seq: (B, d, N). Projections are N x N; logits are scaled by 1/sqrt(N) and
    softmaxed over the key axis. Returns the attended sequence (same shape)
    plus a copy of the attention weights (B, d, d) for inspection.
    """
    if seq.ndim != 3:
        raise ShapeError(f"sequence must be (B, d, N), got {seq.shape}")
    n = seq.shape[-1]
    if p["attn.Wq"].shape != (n, n):
        raise ShapeError(
            f"attention projections sized {p['attn.Wq'].shape}, sequence width {n}"
        )
    q = ng.matmul(seq, p["attn.Wq"])
    k = ng.matmul(seq, p["attn.Wk"])
    v = ng.matmul(seq, p["attn.Wv"])
    logits = ng.scale(ng.matmul(q, ng.transpose(k)), 1.0 / math.sqrt(n))
    weights = ng.softmax(logits, axis=-1)
    return ng.matmul(weights, v), weights.data.copy()


def shared_forward(window: Tensor, p: Params) -> tuple[Tensor, np.ndarray]:
    """Full trunk: Bi-LSTM then self-attention; output tagged "Z"."""
    seq = bilstm_forward(window, p)
    out, attn = self_attention(seq, p)
    return window.tape.tag(out, "Z"), attn
