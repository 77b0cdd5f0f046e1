"""Latent target unlearning: the three losses and the fine-tuning loop.

Only the synthesis stage of the cloned generator is optimized; the mapping,
renderer, encoder, embedder, and perceptual nets are held fixed. Image-level
gradients flow through the frozen renderer into the synthesis parameters.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import torch
import torch.nn.functional as F

from .latentops import (AdjacencyOffsets, compute_target_latent, estimate_mean_latent,
                        feasible_exclusion, sample_adjacency_offsets, sample_global_latents)
from .nets import (EmbedderNet, GeneratorBundle, PerceptualNet, clone_generator,
                   embed_identity, perceptual_distance, render_with, synth_forward)
from .rng import substream_seed, torch_generator

GLOBAL_MARGIN = 1.0


@dataclass(frozen=True)
class LossWeights:
    l2: float = 1e-2
    per: float = 1.0
    id: float = 1e-1


@dataclass(frozen=True)
class UnlearnConfig:
    d: float = 30.0
    alpha_max: float = 15.0
    n_a: int = 2
    n_g: int = 2
    lambda_l2: float = 1e-2
    lambda_per: float = 1.0
    lambda_id: float = 1e-1
    lambda_adj: float = 1.0
    lambda_global: float = 1.0
    learning_rate: float = 1e-4
    iterations: int = 1000
    seed: int = 0
    mode: str = "guide"  # "guide" | "baseline"
    # None means the adjacency loss shares the local loss weights.
    adjacency_lambda_l2: float | None = None
    adjacency_lambda_per: float | None = None
    adjacency_lambda_id: float | None = None

    def __post_init__(self):
        if self.mode not in ("guide", "baseline"):
            raise ValueError(f"unknown mode {self.mode!r}, expected 'guide' or 'baseline'")
        for name in ("lambda_l2", "lambda_per", "lambda_id", "lambda_adj", "lambda_global"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.iterations < 0:
            raise ValueError(f"iterations must be >= 0, got {self.iterations}")

    @property
    def local_weights(self) -> LossWeights:
        return LossWeights(l2=self.lambda_l2, per=self.lambda_per, id=self.lambda_id)

    @property
    def adjacency_weights(self) -> LossWeights:
        return LossWeights(
            l2=self.lambda_l2 if self.adjacency_lambda_l2 is None else self.adjacency_lambda_l2,
            per=self.lambda_per if self.adjacency_lambda_per is None else self.adjacency_lambda_per,
            id=self.lambda_id if self.adjacency_lambda_id is None else self.adjacency_lambda_id,
        )

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, raw: dict) -> "UnlearnConfig":
        return cls(**raw)


def with_no_id_preset(cfg: UnlearnConfig) -> UnlearnConfig:
    """The `no-id` preset: reconstruction and perceptual terms only."""
    return replace(cfg, lambda_id=0.0, adjacency_lambda_id=0.0)


def _embedding_distance(embedder: EmbedderNet, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    # 0.5 * ||e_a - e_b||^2 equals 1 - cos(e_a, e_b) for the embedder's unit
    # outputs, and is exactly zero (with exactly zero gradient) on bitwise-equal
    # inputs, which the zero-loss fixed point of the optimizer relies on.
    e_a = embed_identity(embedder, a)
    e_b = embed_identity(embedder, b)
    return 0.5 * (e_a - e_b).pow(2).sum(dim=-1).mean()


def _pair_loss(feat_u, feat_t, img_u, img_t, weights: LossWeights,
               percep: PerceptualNet, embedder: EmbedderNet) -> torch.Tensor:
    loss = torch.zeros((), dtype=img_u.dtype)
    if weights.l2 != 0:
        loss = loss + weights.l2 * F.mse_loss(feat_u, feat_t)
    if weights.per != 0:
        loss = loss + weights.per * perceptual_distance(percep, img_u, img_t)
    if weights.id != 0:
        loss = loss + weights.id * _embedding_distance(embedder, img_u, img_t)
    return loss


def _two_sided(g_u: GeneratorBundle, g_s: GeneratorBundle, renderer, w_source, w_target):
    if g_u.config.feat_channels != g_s.config.feat_channels \
            or g_u.config.feat_size != g_s.config.feat_size:
        raise ValueError("unlearned and source bundles disagree on the feature shape")
    feat_u = synth_forward(g_u, w_source)
    img_u = render_with(renderer, feat_u, g_u.config)
    with torch.no_grad():
        feat_t = synth_forward(g_s, w_target)
        img_t = render_with(renderer, feat_t, g_s.config)
    return feat_u, feat_t, img_u, img_t


def local_unlearn_loss(g_u: GeneratorBundle, g_s: GeneratorBundle, renderer,
                       w_u: torch.Tensor, w_t: torch.Tensor, weights: LossWeights,
                       percep: PerceptualNet, embedder: EmbedderNet) -> torch.Tensor:
    """Feature L2 + perceptual + identity distance between G_u(w_u) and G_s(w_t)."""
    feat_u, feat_t, img_u, img_t = _two_sided(g_u, g_s, renderer, w_u, w_t)
    return _pair_loss(feat_u, feat_t, img_u, img_t, weights, percep, embedder)


def adjacency_unlearn_loss(g_u: GeneratorBundle, g_s: GeneratorBundle, renderer,
                           w_u: torch.Tensor, w_t: torch.Tensor,
                           offsets: AdjacencyOffsets, weights: LossWeights,
                           percep: PerceptualNet, embedder: EmbedderNet) -> torch.Tensor:
    """Local loss averaged over shared offsets applied to both w_u and w_t."""
    if len(offsets) == 0:
        raise ValueError("adjacency loss needs at least one offset")
    w_ua = w_u.unsqueeze(0) + offsets.offsets
    w_ta = w_t.unsqueeze(0) + offsets.offsets
    feat_u, feat_t, img_u, img_t = _two_sided(g_u, g_s, renderer, w_ua, w_ta)
    # Batched mean reductions equal the mean of the per-offset local losses.
    return _pair_loss(feat_u, feat_t, img_u, img_t, weights, percep, embedder)


def global_preservation_loss(g_u: GeneratorBundle, g_s: GeneratorBundle, renderer,
                             global_latents: torch.Tensor,
                             percep: PerceptualNet) -> torch.Tensor:
    """Perceptual drift of the unlearned generator on far-away prior latents."""
    if global_latents.ndim != 2 or global_latents.shape[0] == 0:
        raise ValueError("global_latents must be a nonempty (n_g, d_w) batch")
    img_u = render_with(renderer, synth_forward(g_u, global_latents), g_u.config)
    with torch.no_grad():
        img_s = render_with(renderer, synth_forward(g_s, global_latents), g_s.config)
    return perceptual_distance(percep, img_u, img_s)


def total_loss(l_local, l_adj, l_global, cfg: UnlearnConfig):
    """Weighted sum of precomputed components; baseline mode keeps only L_local."""
    if cfg.mode == "baseline":
        return l_local
    return l_local + cfg.lambda_adj * l_adj + cfg.lambda_global * l_global


def _percdist_from_feats(feats_a, feats_b) -> torch.Tensor:
    dists = [F.mse_loss(x, y) for x, y in zip(feats_a, feats_b)]
    return torch.stack(dists).mean()


def _embdist_from_embeddings(e_a, e_b) -> torch.Tensor:
    return 0.5 * (e_a - e_b).pow(2).sum(dim=-1).mean()


class _FusedIteration:
    """One optimization step's losses, computed through shared batched forwards.

    Produces the same component values as the standalone loss functions (same
    reductions over the same slices) while running each network once per side
    per iteration. The local target's features, image, perceptual features,
    and embedding are constants of the run and are cached up front.
    """

    def __init__(self, g_u, g_s, renderer, w_u, w_t, cfg, percep, embedder):
        self.g_u, self.g_s, self.renderer = g_u, g_s, renderer
        self.w_u, self.w_t, self.cfg = w_u, w_t, cfg
        self.percep, self.embedder = percep, embedder
        self.weights = cfg.local_weights
        self.adj_weights = cfg.adjacency_weights
        self.need_embed = self.weights.id != 0 or \
            (cfg.mode == "guide" and cfg.lambda_adj > 0 and self.adj_weights.id != 0)
        with torch.no_grad():
            self.feat_t = synth_forward(g_s, w_t.unsqueeze(0))
            self.img_t = render_with(renderer, self.feat_t, g_s.config)
            self.percep_t = self.percep(self.img_t)
            self.emb_t = embed_identity(embedder, self.img_t) if self.need_embed else None

    def losses(self, offsets: AdjacencyOffsets | None, global_latents: torch.Tensor | None):
        n_a = len(offsets) if offsets is not None else 0
        n_g = global_latents.shape[0] if global_latents is not None else 0
        u_parts = [self.w_u.unsqueeze(0)]
        s_parts = []
        if n_a:
            u_parts.append(self.w_u.unsqueeze(0) + offsets.offsets)
            s_parts.append(self.w_t.unsqueeze(0) + offsets.offsets)
        if n_g:
            u_parts.append(global_latents)
            s_parts.append(global_latents)
        feat_u = self.g_u.synthesis(torch.cat(u_parts))
        img_u = self.renderer(feat_u)
        percep_u = self.percep(img_u)
        feat_s = img_s = percep_s = emb_s = None
        with torch.no_grad():
            if s_parts:
                feat_s = self.g_s.synthesis(torch.cat(s_parts))
                img_s = self.renderer(feat_s)
                percep_s = self.percep(img_s)
            if self.need_embed and n_a:
                emb_s = embed_identity(self.embedder, img_s[:n_a])
        emb_u = embed_identity(self.embedder, img_u[:1 + n_a]) if self.need_embed else None

        def pair(sl, f_t, p_t, e_t, weights):
            loss = torch.zeros((), dtype=self.w_u.dtype)
            if weights.l2 != 0:
                loss = loss + weights.l2 * F.mse_loss(feat_u[sl], f_t)
            if weights.per != 0:
                loss = loss + weights.per * _percdist_from_feats(
                    [p[sl] for p in percep_u], p_t)
            if weights.id != 0:
                loss = loss + weights.id * _embdist_from_embeddings(emb_u[sl], e_t)
            return loss

        l_local = pair(slice(0, 1), self.feat_t, self.percep_t, self.emb_t, self.weights)
        zero = torch.zeros((), dtype=self.w_u.dtype)
        l_adj = zero
        if n_a:
            l_adj = pair(slice(1, 1 + n_a), feat_s[:n_a],
                         [p[:n_a] for p in percep_s], emb_s, self.adj_weights)
        l_global = zero
        if n_g:
            l_global = _percdist_from_feats(
                [p[1 + n_a:] for p in percep_u], [p[n_a:] for p in percep_s])
        return l_local, l_adj, l_global


@dataclass
class UnlearnRunRecord:
    config: UnlearnConfig
    seeds: dict
    rows: list = field(default_factory=list)  # per-iteration loss dicts
    wall_time_sec: float = 0.0
    source_checkpoint: str = ""
    unlearned_checkpoint: str = ""

    def write_losses_csv(self, path) -> None:
        with Path(path).open("w", encoding="utf-8", newline="") as fh:
            writer = csv.DictWriter(
                fh, fieldnames=["iteration", "l_local", "l_adj", "l_global", "l_total"])
            writer.writeheader()
            writer.writerows(self.rows)

    def write_run_json(self, path) -> None:
        doc = {
            "config": self.config.to_dict(),
            "seeds": self.seeds,
            "wall_time_sec": self.wall_time_sec,
            "source_checkpoint": self.source_checkpoint,
            "unlearned_checkpoint": self.unlearned_checkpoint,
            "iterations_recorded": len(self.rows),
        }
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True), encoding="utf-8")


def run_unlearning(g_s: GeneratorBundle, w_u: torch.Tensor, embedder: EmbedderNet,
                   percep: PerceptualNet, cfg: UnlearnConfig,
                   ) -> tuple[GeneratorBundle, UnlearnRunRecord]:
    """Fine-tune a clone of g_s so that w_u and its neighborhood render as w_t.

    Returns the unlearned bundle plus a record with per-iteration loss values.
    Only synthesis parameters change; mapping and renderer stay bitwise intact.
    """
    w_u = w_u.detach()
    g_u = clone_generator(g_s)
    g_u.frozen = {"mapping": True, "synthesis": False, "renderer": True}
    g_u.apply_freeze()
    for net in (embedder, percep):
        net.requires_grad_(False)
    for module in g_s.stage_modules().values():
        module.requires_grad_(False)

    w_bar = estimate_mean_latent(g_s, gen=torch_generator(cfg.seed, "mean-latent"))
    w_bar = w_bar.to(w_u.dtype)
    if cfg.mode == "baseline":
        w_t = w_bar
    else:
        w_t = compute_target_latent(w_u, w_bar, cfg.d)

    use_adj = cfg.mode == "guide" and cfg.lambda_adj > 0 and cfg.n_a >= 1 and cfg.alpha_max > 0
    use_global = cfg.mode == "guide" and cfg.lambda_global > 0 and cfg.n_g >= 1
    exclusion = feasible_exclusion(w_u, w_t, cfg.alpha_max, g_s.config.d_w,
                                   margin=GLOBAL_MARGIN)
    renderer = g_u.renderer

    opt = torch.optim.Adam(g_u.synthesis.parameters(), lr=cfg.learning_rate,
                           betas=(0.9, 0.999), eps=1e-8)
    seeds = {
        "master": cfg.seed,
        "mean_latent": substream_seed(cfg.seed, "mean-latent"),
        "adjacency": substream_seed(cfg.seed, "adjacency"),
        "global": substream_seed(cfg.seed, "global"),
    }
    record = UnlearnRunRecord(config=cfg, seeds=seeds)
    fused = _FusedIteration(g_u, g_s, renderer, w_u, w_t, cfg, percep, embedder)
    started = time.perf_counter()

    for it in range(cfg.iterations):
        offsets = None
        if use_adj:
            offsets = sample_adjacency_offsets(
                w_u, cfg.alpha_max, cfg.n_a, g_s, torch_generator(cfg.seed, "adjacency", it))
        latents = None
        if use_global:
            latents = sample_global_latents(
                cfg.n_g, g_s, torch_generator(cfg.seed, "global", it), exclusion)
        l_local, l_adj, l_global = fused.losses(offsets, latents)
        l_total = total_loss(l_local, l_adj, l_global, cfg)
        if not torch.isfinite(l_total):
            raise RuntimeError(f"non-finite total loss at iteration {it}: "
                               f"local={l_local.detach()} adj={l_adj.detach()} "
                               f"global={l_global.detach()}")
        opt.zero_grad()
        if l_total.grad_fn is not None:
            l_total.backward()
            opt.step()
        record.rows.append({
            "iteration": it,
            "l_local": float(l_local.detach()),
            "l_adj": float(l_adj.detach()),
            "l_global": float(l_global.detach()),
            "l_total": float(l_total.detach()),
        })

    record.wall_time_sec = time.perf_counter() - started
    return g_u, record
