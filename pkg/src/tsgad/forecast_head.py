"""Forecasting head: learned sensor graph plus graph-attention aggregation.

Each sensor owns a trainable embedding; cosine similarity between embeddings
picks every sensor's top-k in-neighbors, and a graph attention layer mixes the
neighbors' window features into a per-sensor representation. A small MLP maps
the embedding-gated representations to a one-step-ahead forecast of all N
sensor values.

The top-k selection is discrete, so the adjacency mask is recomputed from the
current embeddings outside the tape on every call; gradients reach the
embeddings only through the attention scores and the output gating.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numgrad as ng
from .numgrad import ParamSpec, ShapeError, Tensor

EMBED_DIM_DEFAULT = 16

Params = dict[str, Tensor]


def param_specs(n_sensors: int, window: int, embed_dim: int) -> dict[str, ParamSpec]:
    """Layout of the `pred` partition: embeddings, GAT transform, output MLP."""
    n, d, w = n_sensors, window, embed_dim
    return {
        "embed.v": ParamSpec((n, w), kind="embedding", fan_in=w),
        "gat.W": ParamSpec((d, w), fan_in=d),
        "gat.a": ParamSpec((4 * w,), fan_in=4 * w),
        "mlp.W1": ParamSpec((n * w, 2 * n), fan_in=n * w),
        "mlp.b1": ParamSpec((2 * n,), kind="bias"),
        "mlp.W2": ParamSpec((2 * n, n), fan_in=2 * n),
        "mlp.b2": ParamSpec((n,), kind="bias"),
    }


def similarity_matrix(v: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarity of embedding rows, diagonal exactly 1."""
    norms = np.maximum(np.linalg.norm(v, axis=1), 1e-12)
    e = (v @ v.T) / np.outer(norms, norms)
    np.fill_diagonal(e, 1.0)
    return e


def learn_structure(v: np.ndarray, k: int) -> np.ndarray:
    """Binary adjacency from current embeddings: column i marks the k most
    cosine-similar other sensors as i's in-neighbors (ties to lower index)."""
    n = v.shape[0]
    if not 1 <= k <= n - 1:
        raise ValueError(f"k must be in [1, {n - 1}], got {k}")
    e = similarity_matrix(v)
    mask = np.zeros((n, n))
    for i in range(n):
        col = e[:, i].copy()
        col[i] = -np.inf  # the candidate set excludes the sensor itself
        order = np.argsort(-col, kind="stable")
        mask[order[:k], i] = 1.0
    return mask


@dataclass
class GatPass:
    """Intermediate state of one attention pass, kept for tests and export.

    members[i] lists the softmax participants for sensor i (self first, then
    in-neighbors ascending); alphas[i] holds the matching weights, shape
    (B, len(members[i])).
    """

    zs: list[Tensor]
    members: list[list[int]]
    alphas: list[np.ndarray]


def _embedding_row(v: Tensor, i: int) -> Tensor:
    # row i of the (N, w) embedding matrix as a (w,) tensor
    return ng.take_col(ng.transpose(v), i)


def gat_forward(z: Tensor, mask: np.ndarray, p: Params) -> GatPass:
    """Attention aggregation over the learned graph.

    z: (B, d, N) trunk output; column i is sensor i's refined series.
    Returns per-sensor representations z_i of shape (B, w).
    """
    if z.ndim != 3:
        raise ShapeError(f"expected (B, d, N) input, got {z.shape}")
    b, d, n = z.shape
    if mask.shape != (n, n):
        raise ShapeError(f"mask shape {mask.shape} does not match N={n}")
    if p["gat.W"].shape[0] != d:
        raise ShapeError(
            f"gat transform expects window {p['gat.W'].shape[0]}, got {d}"
        )
    v = p["embed.v"]
    w = v.shape[1]
    wx = [ng.matmul(ng.take_col(z, i), p["gat.W"]) for i in range(n)]  # (B, w)
    g = [
        ng.concat(
            [ng.broadcast_to(ng.reshape(_embedding_row(v, i), (1, w)), (b, w)), wx[i]],
            axis=1,
        )
        for i in range(n)
    ]
    zs: list[Tensor] = []
    members_all: list[list[int]] = []
    alphas_all: list[np.ndarray] = []
    for i in range(n):
        members = [i] + [j for j in range(n) if mask[j, i] > 0]
        scores = [
            ng.reshape(
                ng.leaky_relu(ng.matmul(ng.concat([g[i], g[j]], axis=1), p["gat.a"])),
                (b, 1),
            )
            for j in members
        ]
        alpha = ng.softmax(ng.concat(scores, axis=1), axis=1)  # (B, m)
        mixed = None
        for col, j in enumerate(members):
            term = ng.mul(ng.reshape(ng.take_col(alpha, col), (b, 1)), wx[j])
            mixed = term if mixed is None else ng.add(mixed, term)
        zs.append(ng.relu(mixed))
        members_all.append(members)
        alphas_all.append(alpha.data.copy())
    return GatPass(zs, members_all, alphas_all)


def predict(gat: GatPass, p: Params) -> Tensor:
    """Embedding-gated readout: concat(v_i * z_i) through the output MLP."""
    v = p["embed.v"]
    n, w = v.shape
    if len(gat.zs) != n:
        raise ShapeError(f"{len(gat.zs)} node representations for {n} embeddings")
    if gat.zs[0].shape[-1] != w:
        raise ShapeError(
            f"node representation width {gat.zs[0].shape[-1]} != embedding width {w}"
        )
    gated = [ng.mul(_embedding_row(v, i), gat.zs[i]) for i in range(n)]
    x = ng.concat(gated, axis=1)  # (B, N*w)
    hidden = ng.relu(ng.add(ng.matmul(x, p["mlp.W1"]), p["mlp.b1"]))
    return ng.add(ng.matmul(hidden, p["mlp.W2"]), p["mlp.b2"])


def forecast(z: Tensor, mask: np.ndarray, p: Params) -> tuple[Tensor, GatPass]:
    """Full head: graph attention then readout. Returns ((B, N), pass)."""
    gat = gat_forward(z, mask, p)
    return predict(gat, p), gat
