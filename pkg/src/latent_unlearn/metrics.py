"""Evaluation protocol: identity similarity and Fréchet feature distances.

Identity similarity is the cosine of the trained embedder's unit outputs.
Fréchet distances use the embedder's penultimate pooled activations as the
shared feature space for both generators and the rendered corpus.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import torch

from .nets import (EmbedderNet, EncoderNet, GeneratorBundle, embed_identity, encode,
                   generate, map_forward, to_image_tensor)
from .rng import torch_generator
from .synthdata import Corpus, render_split

REPORT_VERSION = 1
_COV_JITTER = 1e-6
_BATCH = 256

SCENARIOS = ("random", "ind", "ood")


@dataclass(frozen=True)
class EvalConfig:
    n_eval_latents: int = 2000
    seed: int = 0
    real_split: str = "train"

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class EvalReport:
    scenario: str
    id: float
    id_others: float | None
    frechet_pre: float
    delta_frechet_real: float
    n_eval_latents: int
    seeds: dict
    config_hash: str
    runtime_sec: float

    def to_dict(self) -> dict:
        metrics = {"id": self.id, "frechet_pre": self.frechet_pre,
                   "delta_frechet_real": self.delta_frechet_real}
        if self.id_others is not None:
            metrics["id_others"] = self.id_others
        return {
            "version": REPORT_VERSION,
            "scenario": self.scenario,
            "config_hash": self.config_hash,
            "seeds": self.seeds,
            "metrics": metrics,
            "n_eval_latents": self.n_eval_latents,
            "runtime_sec": self.runtime_sec,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "EvalReport":
        metrics = doc["metrics"]
        return cls(scenario=doc["scenario"], id=metrics["id"],
                   id_others=metrics.get("id_others"),
                   frechet_pre=metrics["frechet_pre"],
                   delta_frechet_real=metrics["delta_frechet_real"],
                   n_eval_latents=doc["n_eval_latents"], seeds=doc["seeds"],
                   config_hash=doc["config_hash"], runtime_sec=doc["runtime_sec"])

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True),
                              encoding="utf-8")

    @classmethod
    def read_json(cls, path) -> "EvalReport":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def config_hash(payload) -> str:
    return hashlib.sha256(
        json.dumps(payload, sort_keys=True, default=str).encode("utf-8")).hexdigest()


def id_similarity(embedder: EmbedderNet, a: torch.Tensor, b: torch.Tensor) -> float:
    """Cosine of the two images' unit identity embeddings, in [-1, 1]."""
    with torch.no_grad():
        e_a = embed_identity(embedder, a)
        e_b = embed_identity(embedder, b)
    if torch.equal(e_a, e_b):
        # cos(e, e) is 1 by definition; the float dot product rounds below it
        return 1.0
    return float(torch.clamp((e_a * e_b).sum(), -1.0, 1.0))


def id_metric(g_s: GeneratorBundle, g_u: GeneratorBundle, w_u: torch.Tensor,
              embedder: EmbedderNet) -> float:
    """Identity similarity of the two generators' renders at the same latent."""
    if g_s.config != g_u.config:
        raise ValueError("generator bundles have different architecture configs")
    with torch.no_grad():
        img_s = generate(g_s, w_u)
        img_u = generate(g_u, w_u)
    return id_similarity(embedder, img_s, img_u)


def id_others_metric(g_s: GeneratorBundle, g_u: GeneratorBundle, encoder: EncoderNet,
                     embedder: EmbedderNet, others: torch.Tensor) -> float:
    """Mean id_metric over the inverted latents of unseen same-identity images."""
    if others.ndim == 3:
        others = others.unsqueeze(0)
    if others.shape[0] == 0:
        raise ValueError("id_others_metric needs at least one held-out image")
    values = []
    with torch.no_grad():
        latents = encode(encoder, others)
    for w_o in latents:
        values.append(id_metric(g_s, g_u, w_o, embedder))
    return float(np.mean(values))


def frechet_distance(feats_a: np.ndarray, feats_b: np.ndarray) -> float:
    """Fréchet distance between Gaussian fits of two feature sets.

    ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)), with covariances
    jittered by 1e-6 I and the matrix square root taken through a symmetric
    eigendecomposition of S_a^(1/2) S_b S_a^(1/2) (negative eigenvalues
    clamped to zero). The result is clamped to be nonnegative.
    """
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("feature sets must be 2-d (n_samples, feature_dim)")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"feature dims differ: {a.shape[1]} vs {b.shape[1]}")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("need at least 2 samples per set to fit a covariance")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    k = a.shape[1]
    cov_a = np.cov(a, rowvar=False).reshape(k, k) + _COV_JITTER * np.eye(k)
    cov_b = np.cov(b, rowvar=False).reshape(k, k) + _COV_JITTER * np.eye(k)

    vals_a, vecs_a = np.linalg.eigh(cov_a)
    sqrt_a = (vecs_a * np.sqrt(np.clip(vals_a, 0.0, None))) @ vecs_a.T
    inner = sqrt_a @ cov_b @ sqrt_a
    inner_vals = np.linalg.eigvalsh(inner)
    tr_sqrt = np.sqrt(np.clip(inner_vals, 0.0, None)).sum()

    dist = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt)
    return max(dist, 0.0)


def embedder_features(embedder: EmbedderNet, images: torch.Tensor) -> np.ndarray:
    """Penultimate pooled activations, the feature space for Fréchet metrics."""
    feats = []
    with torch.no_grad():
        for start in range(0, images.shape[0], _BATCH):
            chunk = images[start:start + _BATCH]
            feats.append(embedder.features(chunk)["pooled"].numpy())
    return np.concatenate(feats, axis=0)


def _generated_features(bundle: GeneratorBundle, latents: torch.Tensor,
                        embedder: EmbedderNet) -> np.ndarray:
    feats = []
    with torch.no_grad():
        for start in range(0, latents.shape[0], _BATCH):
            imgs = generate(bundle, latents[start:start + _BATCH])
            feats.append(embedder.features(imgs)["pooled"].numpy())
    return np.concatenate(feats, axis=0)


def _shared_eval_latents(bundle: GeneratorBundle, n_latents: int, seed: int) -> torch.Tensor:
    gen = torch_generator(seed, "eval-latents")
    z = torch.randn((n_latents, bundle.config.d_z), generator=gen)
    with torch.no_grad():
        return map_forward(bundle, z)


def frechet_pre(g_s: GeneratorBundle, g_u: GeneratorBundle, embedder: EmbedderNet,
                n_latents: int = 2000, seed: int = 0) -> float:
    """Fréchet distance between the two generators on one fixed prior latent set."""
    if n_latents < 100:
        raise ValueError(f"n_latents must be >= 100, got {n_latents}")
    latents = _shared_eval_latents(g_s, n_latents, seed)
    return frechet_distance(_generated_features(g_s, latents, embedder),
                            _generated_features(g_u, latents, embedder))


def delta_frechet_real(g_s: GeneratorBundle, g_u: GeneratorBundle, embedder: EmbedderNet,
                       real_features: np.ndarray, n_latents: int = 2000,
                       seed: int = 0) -> float:
    """Change in Fréchet distance to the real corpus caused by unlearning (signed)."""
    if n_latents < 100:
        raise ValueError(f"n_latents must be >= 100, got {n_latents}")
    latents = _shared_eval_latents(g_s, n_latents, seed)
    d_u = frechet_distance(_generated_features(g_u, latents, embedder), real_features)
    d_s = frechet_distance(_generated_features(g_s, latents, embedder), real_features)
    return d_u - d_s


def corpus_features(corpus: Corpus, split: str, embedder: EmbedderNet,
                    resolution: int) -> np.ndarray:
    images = to_image_tensor(render_split(corpus, split, resolution))
    return embedder_features(embedder, images)


def evaluate(scenario: str, g_s: GeneratorBundle, g_u: GeneratorBundle,
             encoder: EncoderNet, embedder: EmbedderNet, corpus: Corpus,
             w_u: torch.Tensor, others: torch.Tensor | None,
             cfg: EvalConfig = EvalConfig(), report_config_hash: str | None = None,
             ) -> EvalReport:
    """Assemble the full metric report for one unlearning run.

    id_others is included only when held-out same-identity images are given.
    """
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}, expected one of {SCENARIOS}")
    started = time.perf_counter()
    id_value = id_metric(g_s, g_u, w_u, embedder)
    id_others = None
    if others is not None:
        id_others = id_others_metric(g_s, g_u, encoder, embedder, others)
    real_feats = corpus_features(corpus, cfg.real_split, embedder, g_s.config.image_size)
    report = EvalReport(
        scenario=scenario,
        id=id_value,
        id_others=id_others,
        frechet_pre=frechet_pre(g_s, g_u, embedder, cfg.n_eval_latents, cfg.seed),
        delta_frechet_real=delta_frechet_real(g_s, g_u, embedder, real_feats,
                                              cfg.n_eval_latents, cfg.seed),
        n_eval_latents=cfg.n_eval_latents,
        seeds={"eval": cfg.seed},
        config_hash=report_config_hash or config_hash(cfg.to_dict()),
        runtime_sec=time.perf_counter() - started,
    )
    return report
