"""Detector assembly: shared trunk plus forecast and reconstruction heads.

A `Detector` owns the parameter store and knows how to run one forward pass
over a window batch on a fresh tape. Ablation flags drop the trunk or either
head; at least one head must remain.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import forecast_head as fh
from . import numgrad as ng
from . import shared_layer as sl
from . import vae_head as vh
from .numgrad import ParamStore, ShapeError, Tape, Tensor


@dataclass
class ModelConfig:
    n_sensors: int
    window: int = 5
    neighbors: int = 5
    embed_dim: int = fh.EMBED_DIM_DEFAULT
    latent: int | None = None
    no_shared: bool = False
    no_pred: bool = False
    no_recon: bool = False

    def __post_init__(self) -> None:
        if self.n_sensors < 2:
            raise ValueError(f"need at least 2 sensors, got {self.n_sensors}")
        if self.window < 1:
            raise ValueError(f"window must be >= 1, got {self.window}")
        if self.embed_dim < 1:
            raise ValueError(f"embed_dim must be >= 1, got {self.embed_dim}")
        if self.no_pred and self.no_recon:
            raise ValueError("at least one head must remain enabled")
        if not self.no_pred and not 1 <= self.neighbors <= self.n_sensors - 1:
            raise ValueError(
                f"neighbors must be in [1, {self.n_sensors - 1}], got {self.neighbors}"
            )
        if self.latent is None:
            self.latent = vh.default_latent(self.n_sensors)
        if not self.no_recon and not 1 <= self.latent < self.window * self.n_sensors:
            raise ValueError(
                f"latent must be in [1, {self.window * self.n_sensors - 1}], "
                f"got {self.latent}"
            )

    def to_dict(self) -> dict:
        return {
            "n_sensors": self.n_sensors,
            "window": self.window,
            "neighbors": self.neighbors,
            "embed_dim": self.embed_dim,
            "latent": self.latent,
            "no_shared": self.no_shared,
            "no_pred": self.no_pred,
            "no_recon": self.no_recon,
        }


def param_layout(cfg: ModelConfig) -> ng.Layout:
    layout: ng.Layout = {}
    if not cfg.no_shared:
        layout["shared"] = sl.param_specs(cfg.n_sensors)
    if not cfg.no_pred:
        layout["pred"] = fh.param_specs(cfg.n_sensors, cfg.window, cfg.embed_dim)
    if not cfg.no_recon:
        layout["recon"] = vh.param_specs(cfg.n_sensors, cfg.window, cfg.latent)
    return layout


@dataclass
class ForwardPass:
    """Everything one forward pass produced, still attached to its tape."""

    tape: Tape
    bound: dict[str, dict[str, Tensor]]
    window: Tensor
    z: Tensor
    attn: np.ndarray | None = None
    mask: np.ndarray | None = None
    pred: Tensor | None = None
    gat: fh.GatPass | None = None
    recon: Tensor | None = None
    sample: vh.LatentSample | None = None


@dataclass
class Detector:
    config: ModelConfig
    store: ParamStore

    @classmethod
    def build(cls, config: ModelConfig, seed: int) -> "Detector":
        return cls(config, ng.init_params(param_layout(config), seed))

    def structure(self) -> tuple[np.ndarray, np.ndarray]:
        """Current adjacency mask and raw similarity matrix."""
        if self.config.no_pred:
            raise ValueError("forecast head disabled; no learned structure")
        v = self.store.groups["pred"]["embed.v"]
        return fh.learn_structure(v, self.config.neighbors), fh.similarity_matrix(v)

    def forward(
        self,
        windows: np.ndarray,
        eps: np.ndarray | None = None,
        record: bool = True,
        mask: np.ndarray | None = None,
    ) -> ForwardPass:
        """Run the model over a (B, N, d) window batch on a fresh tape.

        `mask` lets the caller pin the adjacency (it is recomputed from the
        current embeddings otherwise); `eps` enables latent sampling.
        """
        cfg = self.config
        windows = np.asarray(windows, dtype=np.float64)
        if windows.ndim != 3 or windows.shape[1:] != (cfg.n_sensors, cfg.window):
            raise ShapeError(
                f"expected (B, {cfg.n_sensors}, {cfg.window}) windows, "
                f"got {windows.shape}"
            )
        tape = Tape(record=record)
        bound = ng.bind(tape, self.store)
        w_leaf = tape.leaf(windows)
        out = ForwardPass(tape, bound, window=w_leaf, z=w_leaf)
        if cfg.no_shared:
            out.z = tape.tag(ng.transpose(w_leaf), "Z")
        else:
            out.z, out.attn = sl.shared_forward(w_leaf, bound["shared"])
        if not cfg.no_pred:
            out.mask = mask if mask is not None else self.structure()[0]
            out.pred, out.gat = fh.forecast(out.z, out.mask, bound["pred"])
        if not cfg.no_recon:
            out.recon, out.sample = vh.reconstruct(out.z, bound["recon"], eps)
        return out
