"""Latent-space target selection and neighborhood sampling.

The target latent for unlearning is the extrapolation past the mean latent:
w_t = w_bar - d * (w_u - w_bar) / ||w_u - w_bar||. Adjacency offsets and
exclusion-sampled global latents feed the neighborhood and preservation
losses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .nets import GeneratorBundle, map_forward

EPS_ID = 1e-6
MEAN_LATENT_SAMPLES = 10_000
_MEAN_LATENT_BATCH = 2_048
_ANCHOR_RETRIES = 100
MAX_CONSECUTIVE_REJECTIONS = 1_000


class DegenerateSourceError(Exception):
    """The source latent coincides with the mean latent; no direction exists."""


@dataclass(frozen=True)
class AdjacencyOffsets:
    offsets: torch.Tensor  # (n_a, d_w); ||offsets[i]|| == scales[i]
    scales: torch.Tensor   # (n_a,)
    seed: int

    def __len__(self) -> int:
        return self.offsets.shape[0]


@dataclass(frozen=True)
class GlobalExclusion:
    """Keep-out balls of radius alpha_max + margin around w_u and w_t."""

    w_u: torch.Tensor
    w_t: torch.Tensor
    alpha_max: float
    margin: float = 1.0

    @property
    def radius(self) -> float:
        return self.alpha_max + self.margin


def estimate_mean_latent(bundle: GeneratorBundle, n_samples: int = MEAN_LATENT_SAMPLES,
                         gen: torch.Generator | None = None) -> torch.Tensor:
    """Monte Carlo mean of Map(z) over the standard normal prior."""
    if n_samples < 1:
        raise ValueError(f"n_samples must be >= 1, got {n_samples}")
    total = torch.zeros(bundle.config.d_w, dtype=torch.float64)
    remaining = n_samples
    with torch.no_grad():
        while remaining > 0:
            k = min(remaining, _MEAN_LATENT_BATCH)
            z = torch.randn((k, bundle.config.d_z), generator=gen)
            total += map_forward(bundle, z).double().sum(dim=0)
            remaining -= k
    return (total / n_samples).float()


def compute_identity_latent(w_u: torch.Tensor, w_bar: torch.Tensor) -> torch.Tensor:
    if w_u.shape != w_bar.shape:
        raise ValueError(f"latent shapes differ: {tuple(w_u.shape)} vs {tuple(w_bar.shape)}")
    return w_u - w_bar


def compute_target_latent(w_u: torch.Tensor, w_bar: torch.Tensor, d: float) -> torch.Tensor:
    w_id = compute_identity_latent(w_u, w_bar)
    norm = torch.linalg.vector_norm(w_id)
    if float(norm) < EPS_ID:
        raise DegenerateSourceError(
            f"||w_u - w_bar|| = {float(norm):.3e} < {EPS_ID:g}; the extrapolation "
            "direction is undefined")
    return w_bar - d * (w_id / norm)


def sample_adjacency_offsets(w_u: torch.Tensor, alpha_max: float, n_a: int,
                             bundle: GeneratorBundle,
                             gen: torch.Generator) -> AdjacencyOffsets:
    """Draw n_a offsets alpha_i * unit(Map(z_i) - w_u) with alpha_i ~ U(0, alpha_max)."""
    if alpha_max <= 0:
        raise ValueError(f"alpha_max must be > 0, got {alpha_max}")
    if n_a < 1:
        raise ValueError(f"n_a must be >= 1, got {n_a}")
    offsets = []
    scales = []
    with torch.no_grad():
        for _ in range(n_a):
            for attempt in range(_ANCHOR_RETRIES):
                z = torch.randn((bundle.config.d_z,), generator=gen, dtype=w_u.dtype)
                direction = map_forward(bundle, z) - w_u
                dist = torch.linalg.vector_norm(direction)
                if float(dist) >= EPS_ID:
                    break
            else:
                raise RuntimeError(
                    f"no anchor latent distinct from w_u after {_ANCHOR_RETRIES} draws")
            alpha = torch.rand((), generator=gen, dtype=w_u.dtype) * alpha_max
            offsets.append(alpha * direction / dist)
            scales.append(alpha)
    return AdjacencyOffsets(offsets=torch.stack(offsets), scales=torch.stack(scales),
                            seed=gen.initial_seed())


def sample_global_latents(n_g: int, bundle: GeneratorBundle, gen: torch.Generator,
                          exclusion: GlobalExclusion) -> torch.Tensor:
    """Prior latents outside the exclusion balls, by rejection resampling.

    Raises after MAX_CONSECUTIVE_REJECTIONS rejections in a row, which signals
    an exclusion radius the prior cannot satisfy.
    """
    if n_g < 1:
        raise ValueError(f"n_g must be >= 1, got {n_g}")
    accepted = []
    consecutive = 0
    with torch.no_grad():
        while len(accepted) < n_g:
            z = torch.randn((bundle.config.d_z,), generator=gen,
                            dtype=exclusion.w_u.dtype)
            w = map_forward(bundle, z)
            d_min = min(float(torch.linalg.vector_norm(w - exclusion.w_u)),
                        float(torch.linalg.vector_norm(w - exclusion.w_t)))
            if d_min > exclusion.radius:
                accepted.append(w)
                consecutive = 0
            else:
                consecutive += 1
                if consecutive >= MAX_CONSECUTIVE_REJECTIONS:
                    raise RuntimeError(
                        f"{MAX_CONSECUTIVE_REJECTIONS} consecutive rejections sampling "
                        f"global latents; exclusion radius {exclusion.radius:.3g} is "
                        "infeasible for the prior")
    return torch.stack(accepted)


def feasible_exclusion(w_u: torch.Tensor, w_t: torch.Tensor, alpha_max: float,
                       d_w: int, margin: float = 1.0) -> GlobalExclusion:
    """Exclusion for unlearning runs, radius capped at sqrt(d_w).

    With prior-scale latents, distances to w_u concentrate near sqrt(2 * d_w),
    so a radius above sqrt(d_w) would reject essentially every draw once
    alpha_max exceeds the latent scale (the paper-scale alpha_max does).
    """
    radius = min(alpha_max + margin, math.sqrt(d_w))
    return GlobalExclusion(w_u=w_u, w_t=w_t, alpha_max=radius - margin, margin=margin)
