"""Reconstruction head: a small variational autoencoder over the trunk output.

The flattened trunk features are encoded to a diagonal-Gaussian latent whose
mean/log-variance feed the reparameterization trick; the decoder maps the
latent sample back to a full window. Log-variance (rather than sigma) keeps
the scale positive under an unconstrained linear map. Everything here lives
in the ``recon`` partition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numgrad as ng
from .numgrad import ParamSpec, ShapeError, Tensor

Params = dict[str, Tensor]


def hidden_size(window: int, n_sensors: int) -> int:
    return math.ceil(window * n_sensors / 2)


def default_latent(n_sensors: int) -> int:
    return max(2, n_sensors // 2)


def param_specs(n_sensors: int, window: int, latent: int) -> dict[str, ParamSpec]:
    """Layout of the `recon` partition: encoder, latent maps, decoder."""
    flat = window * n_sensors
    if not 1 <= latent < flat:
        raise ValueError(f"latent size must be in [1, {flat - 1}], got {latent}")
    h = hidden_size(window, n_sensors)
    return {
        "enc.W": ParamSpec((flat, h), fan_in=flat),
        "enc.b": ParamSpec((h,), kind="bias"),
        "mu.W": ParamSpec((h, latent), fan_in=h),
        "logvar.W": ParamSpec((h, latent), fan_in=h),
        "dec.W1": ParamSpec((latent, h), fan_in=latent),
        "dec.b1": ParamSpec((h,), kind="bias"),
        "dec.W2": ParamSpec((h, flat), fan_in=h),
        "dec.b2": ParamSpec((flat,), kind="bias"),
    }


def encode(z_shared: Tensor, p: Params) -> tuple[Tensor, Tensor]:
    """(B, d, N) trunk output -> latent mean and log-variance, each (B, L)."""
    if z_shared.ndim != 3:
        raise ShapeError(f"expected (B, d, N) input, got {z_shared.shape}")
    b = z_shared.shape[0]
    flat = z_shared.shape[1] * z_shared.shape[2]
    if p["enc.W"].shape[0] != flat:
        raise ShapeError(
            f"encoder expects flattened width {p['enc.W'].shape[0]}, got {flat}"
        )
    x = ng.reshape(z_shared, (b, flat))
    hidden = ng.relu(ng.add(ng.matmul(x, p["enc.W"]), p["enc.b"]))
    return ng.matmul(hidden, p["mu.W"]), ng.matmul(hidden, p["logvar.W"])


@dataclass
class LatentSample:
    mu: Tensor
    logvar: Tensor
    eps: np.ndarray | None
    z: Tensor


def reparameterize(mu: Tensor, logvar: Tensor, eps: np.ndarray | None) -> LatentSample:
    """z = mu + exp(logvar / 2) * eps; eps None means evaluation (z = mu)."""
    if mu.shape != logvar.shape:
        raise ShapeError(f"mu {mu.shape} vs logvar {logvar.shape}")
    if eps is None:
        return LatentSample(mu, logvar, None, mu)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != mu.shape:
        raise ShapeError(f"eps {eps.shape} vs mu {mu.shape}")
    sigma = ng.exp(ng.scale(logvar, 0.5))
    z = ng.add(mu, ng.mul(sigma, mu.tape.leaf(eps)))
    return LatentSample(mu, logvar, eps, z)


def decode(z: Tensor, p: Params, window: int, n_sensors: int) -> Tensor:
    """Latent (B, L) -> reconstruction (B, d, N), timestamp-aligned with input."""
    if z.ndim != 2 or z.shape[1] != p["dec.W1"].shape[0]:
        raise ShapeError(
            f"latent shape {z.shape} incompatible with decoder {p['dec.W1'].shape}"
        )
    flat = window * n_sensors
    if p["dec.W2"].shape[1] != flat:
        raise ShapeError(
            f"decoder emits width {p['dec.W2'].shape[1]}, window needs {flat}"
        )
    hidden = ng.relu(ng.add(ng.matmul(z, p["dec.W1"]), p["dec.b1"]))
    out = ng.add(ng.matmul(hidden, p["dec.W2"]), p["dec.b2"])
    return ng.reshape(out, (z.shape[0], window, n_sensors))


def kl_term(mu: Tensor, logvar: Tensor) -> Tensor:
    """KL(N(mu, exp(logvar)) || N(0, I)): latent-dimension sum, window mean.

    For (L,) inputs this is the plain sum 0.5 * sum(mu^2 + exp(lv) - lv - 1);
    for (B, L) batches it is that sum averaged over the batch.
    """
    if mu.shape != logvar.shape:
        raise ShapeError(f"mu {mu.shape} vs logvar {logvar.shape}")
    latent = mu.shape[-1]
    per_elem = ng.scale(
        ng.shift(ng.sub(ng.add(ng.mul(mu, mu), ng.exp(logvar)), logvar), -1.0), 0.5
    )
    return ng.scale(ng.mean(per_elem), float(latent))


def reconstruct(
    z_shared: Tensor, p: Params, eps: np.ndarray | None = None
) -> tuple[Tensor, LatentSample]:
    """Full head: encode, sample (or take the mean), decode."""
    mu, logvar = encode(z_shared, p)
    sample = reparameterize(mu, logvar, eps)
    recon = decode(sample.z, p, z_shared.shape[1], z_shared.shape[2])
    return recon, sample
