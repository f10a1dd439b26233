"""
Mutual-information regularization between modality features.

Each modality is mapped by a small head to a diagonal Gaussian latent per
location; dependence between two modalities is bounded by the symmetrized
closed-form KL between their latents, and three-way interaction by the sum
(or minimum) of the three pairwise bounds.
"""
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from rpeflow.errors import ConfigError, ShapeError
from rpeflow.nn import ParameterStore, add_linear, linear, linear_act
from rpeflow.tensor import Tensor, as_tensor, clip, exp, mean, minimum, reshape, square, sum_

LOGVAR_CLAMP = 10.0
DEFAULT_LATENT_DIM = 32


@dataclass
class GaussianLatent:
    """Per-location diagonal Gaussian: ``mu`` and ``logvar`` are both M×d."""

    mu: Tensor
    logvar: Tensor

    def __post_init__(self):
        if self.mu.shape != self.logvar.shape or self.mu.ndim != 2:
            raise ShapeError(f"latent mean {self.mu.shape} and log-variance {self.logvar.shape} must be equal M×d")

    @property
    def dim(self) -> int:
        return self.mu.shape[1]


def add_mi_head(store: ParameterStore, name: str, channels: int, latent_dim: int,
                rng: np.random.Generator) -> None:
    """Two-layer head C -> 2d -> 2d producing (mu, logvar)."""
    add_linear(store, f"{name}.fc1", channels, 2 * latent_dim, rng)
    add_linear(store, f"{name}.fc2", 2 * latent_dim, 2 * latent_dim, rng)


def encode_latent(feature: Tensor, store: ParameterStore, name: str) -> GaussianLatent:
    """
    Map an H×W×C or N×C feature to per-location latents.

    Returns:
        GaussianLatent with M = H·W (or N) rows; logvar clamped to [-10, 10]
    """
    feature = as_tensor(feature)
    expected = store[f"{name}.fc1.w"].shape[0]
    if feature.shape[-1] != expected:
        raise ShapeError(f"head {name} expects {expected} channels, feature has {feature.shape[-1]}")
    rows = reshape(feature, (int(np.prod(feature.shape[:-1])), feature.shape[-1]))
    out = linear(linear_act(rows, store, f"{name}.fc1"), store, f"{name}.fc2")
    d = out.shape[1] // 2
    return GaussianLatent(out[:, :d], clip(out[:, d:], -LOGVAR_CLAMP, LOGVAR_CLAMP))


def kl_gaussians(a: GaussianLatent, b: GaussianLatent) -> Tensor:
    """
    KL(a ‖ b) between diagonal Gaussians, summed over latent dims and averaged over locations.
    """
    if a.mu.shape != b.mu.shape:
        raise ShapeError(f"latents differ in shape: {a.mu.shape} vs {b.mu.shape}")
    la, lb = a.logvar, b.logvar
    term = 0.5 * (exp(la - lb) + square(b.mu - a.mu) / exp(lb) - 1.0 + lb - la)
    return mean(sum_(term, axis=1))


def mi_pair_latents(za: GaussianLatent, zb: GaussianLatent) -> Tensor:
    """Symmetrized bound 0.5·[KL(a‖b) + KL(b‖a)]."""
    return 0.5 * (kl_gaussians(za, zb) + kl_gaussians(zb, za))


def mi_pair(fa: Tensor, fb: Tensor, store: ParameterStore, head_a: str, head_b: str) -> Tensor:
    """
    Pairwise bound between two features on the same support.

    Args:
        fa: First feature (H×W×Ca or N×Ca)
        fb: Second feature with the same leading shape
        store: Parameter store holding the heads
        head_a: Head scope for ``fa``
        head_b: Head scope for ``fb`` (may equal ``head_a``)
    """
    if fa.shape[:-1] != fb.shape[:-1]:
        raise ShapeError(f"features live on different supports: {fa.shape[:-1]} vs {fb.shape[:-1]}")
    return mi_pair_latents(encode_latent(fa, store, head_a), encode_latent(fb, store, head_b))


def mi_triple(
    features: Tuple[Tensor, Tensor, Tensor],
    store: ParameterStore,
    heads: Sequence[str],
    reduce: str = "sum",
) -> Tensor:
    """
    Interaction bound over three co-located features (r, pc, ev order).

    ``sum`` returns pair(r,pc) + pair(pc,ev) + pair(r,ev); ``min`` returns the
    smallest of the three.
    """
    if len(features) != 3 or len(heads) != 3:
        raise ShapeError("mi_triple needs exactly three features and three heads")
    support = features[0].shape[:-1]
    for f in features[1:]:
        if f.shape[:-1] != support:
            raise ShapeError(f"features live on different supports: {support} vs {f.shape[:-1]}")
    zr, zpc, zev = (encode_latent(f, store, h) for f, h in zip(features, heads))
    pairs = [mi_pair_latents(zr, zpc), mi_pair_latents(zpc, zev), mi_pair_latents(zr, zev)]
    if reduce == "sum":
        return (pairs[0] + pairs[1]) + pairs[2]
    if reduce == "min":
        return minimum(pairs)
    raise ConfigError(f"unknown interaction reduction {reduce!r}")
