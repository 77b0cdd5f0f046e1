"""Network architectures, parameter containers, and the checkpoint format.

Five networks: mapping (z -> w), synthesis (w -> feature block), renderer
(feature block -> image), encoder (image -> w), and the identity embedder
(image -> unit vector), plus a fixed random-feature perceptual extractor.
Hidden activations are SiLU throughout: every loss in this package is checked
against central finite differences, which kinked activations would break.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .rng import torch_generator

CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    """Base class for checkpoint load failures."""


class CheckpointFormatError(CheckpointError):
    """Manifest or array file missing, truncated, or unparseable."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint written by an incompatible format version."""


class CheckpointShapeError(CheckpointError):
    """A stored array does not match the architecture it is loaded into."""


@dataclass(frozen=True)
class ArchConfig:
    d_z: int = 64
    d_w: int = 64
    feat_channels: int = 32
    feat_size: int = 8
    image_size: int = 32
    map_mode: str = "identity"  # "identity" | "mlp"
    map_hidden: int = 128
    render_channels: tuple[int, int] = (16, 8)
    encoder_channels: tuple[int, int, int, int] = (16, 32, 64, 64)
    embed_channels: tuple[int, int, int] = (16, 32, 64)
    embed_dim: int = 32
    percep_channels: tuple[int, int, int] = (16, 32, 32)
    percep_seed: int = 1234

    def __post_init__(self):
        if self.map_mode not in ("identity", "mlp"):
            raise ValueError(f"unknown map_mode {self.map_mode!r}")
        if self.map_mode == "identity" and self.d_z != self.d_w:
            raise ValueError("identity mapping requires d_z == d_w")
        if self.image_size != 4 * self.feat_size:
            raise ValueError("renderer upsamples twice; image_size must be 4 * feat_size")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, raw: dict) -> "ArchConfig":
        kwargs = dict(raw)
        for key in ("render_channels", "encoder_channels", "embed_channels", "percep_channels"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


# Var(silu(x)) ~= 0.355 for unit-variance input; without this gain the forward
# signal (and the backward gradient) shrinks ~3x per layer and deep stacks stall.
_SILU_GAIN = 1.676


def _init_params(module: nn.Module, gen: torch.Generator) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv2d)):
            fan_in = m.weight.shape[1] * (m.weight[0, 0].numel() if m.weight.ndim == 4 else 1)
            bound = _SILU_GAIN * math.sqrt(3.0 / fan_in)
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=gen)
                if m.bias is not None:
                    m.bias.zero_()


class MappingNet(nn.Module):
    """Two-layer fully connected map from noise space to style space."""

    def __init__(self, config: ArchConfig, gen: torch.Generator | None = None):
        super().__init__()
        self.fc1 = nn.Linear(config.d_z, config.map_hidden)
        self.fc2 = nn.Linear(config.map_hidden, config.d_w)
        if gen is not None:
            _init_params(self, gen)

    def forward(self, z):
        return self.fc2(F.silu(self.fc1(z)))


class SynthesisNet(nn.Module):
    """Lift w to a feature block, then two conv blocks. This is the unlearned stage."""

    def __init__(self, config: ArchConfig, gen: torch.Generator | None = None):
        super().__init__()
        c, s = config.feat_channels, config.feat_size
        self.feat_shape = (c, s, s)
        self.lift = nn.Linear(config.d_w, c * s * s)
        self.conv1 = nn.Conv2d(c, c, 3, padding=1)
        self.conv2 = nn.Conv2d(c, c, 3, padding=1)
        if gen is not None:
            _init_params(self, gen)

    def forward(self, w):
        x = F.silu(self.lift(w)).reshape(w.shape[0], *self.feat_shape)
        x = F.silu(self.conv1(x))
        return self.conv2(x)


class RendererNet(nn.Module):
    """Two upsample+conv blocks to an RGB image squashed into [-1, 1]."""

    def __init__(self, config: ArchConfig, gen: torch.Generator | None = None):
        super().__init__()
        c = config.feat_channels
        r1, r2 = config.render_channels
        self.conv1 = nn.Conv2d(c, r1, 3, padding=1)
        self.conv2 = nn.Conv2d(r1, r2, 3, padding=1)
        self.out_conv = nn.Conv2d(r2, 3, 3, padding=1)
        if gen is not None:
            _init_params(self, gen)

    def forward(self, feat):
        x = F.silu(self.conv1(F.interpolate(feat, scale_factor=2, mode="nearest")))
        x = F.silu(self.conv2(F.interpolate(x, scale_factor=2, mode="nearest")))
        return torch.tanh(self.out_conv(x))


class EncoderNet(nn.Module):
    """Four stride-2 conv blocks and a fully connected head onto the style space."""

    def __init__(self, config: ArchConfig, gen: torch.Generator | None = None):
        super().__init__()
        chans = (3,) + tuple(config.encoder_channels)
        self.convs = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], 3, stride=2, padding=1) for i in range(4))
        side = config.image_size
        for _ in range(4):
            side = (side + 1) // 2
        self.head = nn.Linear(chans[-1] * side * side, config.d_w)
        if gen is not None:
            _init_params(self, gen)

    def forward(self, x):
        for conv in self.convs:
            x = F.silu(conv(x))
        return self.head(x.flatten(1))


class EmbedderNet(nn.Module):
    """Identity embedder: three conv blocks, global pooling, L2-normalized head."""

    def __init__(self, config: ArchConfig, gen: torch.Generator | None = None):
        super().__init__()
        chans = (3,) + tuple(config.embed_channels)
        self.convs = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], 3, stride=2, padding=1) for i in range(3))
        self.head = nn.Linear(chans[-1], config.embed_dim)
        if gen is not None:
            _init_params(self, gen)

    def features(self, x) -> dict[str, torch.Tensor]:
        out = {}
        for i, conv in enumerate(self.convs, start=1):
            x = F.silu(conv(x))
            out[f"conv{i}"] = x
        pooled = x.mean(dim=(2, 3))
        out["pooled"] = pooled
        emb = self.head(pooled)
        out["embedding"] = emb / emb.norm(dim=-1, keepdim=True)
        return out

    def forward(self, x):
        return self.features(x)["embedding"]


class PerceptualNet(nn.Module):
    """Random-feature perceptual extractor; parameters fixed at construction."""

    def __init__(self, config: ArchConfig):
        super().__init__()
        chans = (3,) + tuple(config.percep_channels)
        strides = (1, 2, 2)
        self.convs = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], 3, stride=strides[i], padding=1)
            for i in range(3))
        _init_params(self, torch_generator(config.percep_seed, "perceptual"))
        self.requires_grad_(False)

    def forward(self, x) -> list[torch.Tensor]:
        feats = []
        for conv in self.convs:
            x = F.silu(conv(x))
            feats.append(x)
        return feats


@dataclass(eq=False)
class GeneratorBundle:
    """The three-stage generator. mapping=None means the identity map over z."""

    config: ArchConfig
    mapping: nn.Module | None
    synthesis: SynthesisNet
    renderer: RendererNet
    provenance: str = "source"
    frozen: dict = field(default_factory=lambda: {"mapping": False, "synthesis": False,
                                                  "renderer": False})

    def stage_modules(self) -> dict[str, nn.Module]:
        stages = {"synthesis": self.synthesis, "renderer": self.renderer}
        if self.mapping is not None:
            stages["mapping"] = self.mapping
        return stages

    def apply_freeze(self) -> None:
        for name, module in self.stage_modules().items():
            module.requires_grad_(not self.frozen.get(name, False))


def build_generator(config: ArchConfig, seed: int, provenance: str = "source") -> GeneratorBundle:
    mapping = None
    if config.map_mode == "mlp":
        mapping = MappingNet(config, torch_generator(seed, "init", "mapping"))
    return GeneratorBundle(
        config=config,
        mapping=mapping,
        synthesis=SynthesisNet(config, torch_generator(seed, "init", "synthesis")),
        renderer=RendererNet(config, torch_generator(seed, "init", "renderer")),
        provenance=provenance,
    )


def clone_generator(bundle: GeneratorBundle) -> GeneratorBundle:
    """Deep, independent parameter copy tagged as the unlearned edition."""
    return GeneratorBundle(
        config=bundle.config,
        mapping=copy.deepcopy(bundle.mapping),
        synthesis=copy.deepcopy(bundle.synthesis),
        renderer=copy.deepcopy(bundle.renderer),
        provenance="unlearned",
        frozen=dict(bundle.frozen),
    )


def _as_batch(x: torch.Tensor, ndim: int):
    if x.ndim == ndim:
        return x.unsqueeze(0), True
    if x.ndim == ndim + 1:
        return x, False
    raise ValueError(f"expected a {ndim}-d value or a batch of them, got shape {tuple(x.shape)}")


def map_forward(bundle: GeneratorBundle, z: torch.Tensor) -> torch.Tensor:
    zb, single = _as_batch(z, 1)
    if zb.shape[-1] != bundle.config.d_z:
        raise ValueError(f"noise dimension {zb.shape[-1]} != configured d_z {bundle.config.d_z}")
    w = zb if bundle.mapping is None else bundle.mapping(zb)
    return w[0] if single else w


def synth_forward(bundle: GeneratorBundle, w: torch.Tensor) -> torch.Tensor:
    wb, single = _as_batch(w, 1)
    if wb.shape[-1] != bundle.config.d_w:
        raise ValueError(f"latent dimension {wb.shape[-1]} != configured d_w {bundle.config.d_w}")
    feat = bundle.synthesis(wb)
    return feat[0] if single else feat


def render_forward(bundle: GeneratorBundle, feat: torch.Tensor) -> torch.Tensor:
    img = render_with(bundle.renderer, feat, bundle.config)
    return img


def render_with(renderer: RendererNet, feat: torch.Tensor, config: ArchConfig) -> torch.Tensor:
    fb, single = _as_batch(feat, 3)
    expected = (config.feat_channels, config.feat_size, config.feat_size)
    if tuple(fb.shape[1:]) != expected:
        raise ValueError(f"feature shape {tuple(fb.shape[1:])} != configured {expected}")
    img = renderer(fb)
    return img[0] if single else img


def generate(bundle: GeneratorBundle, w: torch.Tensor) -> torch.Tensor:
    return render_forward(bundle, synth_forward(bundle, w))


def encode(encoder: EncoderNet, x: torch.Tensor) -> torch.Tensor:
    xb, single = _as_batch(x, 3)
    w = encoder(xb)
    return w[0] if single else w


def embed_identity(net: EmbedderNet, x: torch.Tensor) -> torch.Tensor:
    xb, single = _as_batch(x, 3)
    e = net(xb)
    return e[0] if single else e


def perceptual_features(net: PerceptualNet, x: torch.Tensor) -> list[torch.Tensor]:
    xb, _ = _as_batch(x, 3)
    return net(xb)


def perceptual_distance(net: PerceptualNet, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean squared distance over perceptual feature layers."""
    fa = perceptual_features(net, a)
    fb = perceptual_features(net, b)
    dists = [F.mse_loss(x, y) for x, y in zip(fa, fb)]
    return torch.stack(dists).mean()


def to_image_tensor(img: np.ndarray) -> torch.Tensor:
    """Convert a rendered (H, W, 3) or (N, H, W, 3) array to a CHW float tensor."""
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim == 3:
        return torch.from_numpy(arr).permute(2, 0, 1)
    if arr.ndim == 4:
        return torch.from_numpy(arr).permute(0, 3, 1, 2)
    raise ValueError(f"expected HWC or NHWC image array, got shape {arr.shape}")


# --- checkpoint format -------------------------------------------------------
#
# A checkpoint is a directory: manifest.json (version, config, seed, provenance,
# array table name -> shape) plus one raw binary file per parameter array,
# little-endian float32, row-major.

@dataclass
class LoadedCheckpoint:
    config: ArchConfig
    seed: int
    provenance: str
    generator: GeneratorBundle | None
    encoder: EncoderNet | None
    embedder: EmbedderNet | None
    arrays: dict[str, np.ndarray]


def _named_arrays(generator, encoder, embedder) -> dict[str, torch.Tensor]:
    named = {}
    if generator is not None:
        for stage, module in generator.stage_modules().items():
            for pname, p in module.named_parameters():
                named[f"generator.{stage}.{pname}"] = p
    if encoder is not None:
        for pname, p in encoder.named_parameters():
            named[f"encoder.{pname}"] = p
    if embedder is not None:
        for pname, p in embedder.named_parameters():
            named[f"embedder.{pname}"] = p
    return named


def save_checkpoint(path, *, generator: GeneratorBundle | None = None,
                    encoder: EncoderNet | None = None,
                    embedder: EmbedderNet | None = None,
                    config: ArchConfig | None = None, seed: int = 0,
                    extra_arrays: dict[str, np.ndarray] | None = None) -> None:
    if config is None:
        if generator is None:
            raise ValueError("pass config explicitly when saving without a generator")
        config = generator.config
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    table = {}
    named = _named_arrays(generator, encoder, embedder)
    arrays = {name: p.detach().cpu().numpy() for name, p in named.items()}
    arrays.update(extra_arrays or {})
    for name, arr in arrays.items():
        arr32 = np.ascontiguousarray(arr, dtype="<f4")
        (path / f"{name}.bin").write_bytes(arr32.tobytes())
        table[name] = list(arr32.shape)
    manifest = {
        "version": CHECKPOINT_VERSION,
        "seed": seed,
        "provenance": generator.provenance if generator is not None else "source",
        "config": config.to_dict(),
        "arrays": table,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True),
                                        encoding="utf-8")


def _read_array(path: Path, name: str, shape: list[int]) -> np.ndarray:
    file = path / f"{name}.bin"
    if not file.exists():
        raise CheckpointFormatError(f"checkpoint at {path} is missing array file {file.name}")
    raw = file.read_bytes()
    expected = 4 * int(np.prod(shape, dtype=np.int64))
    if len(raw) != expected:
        raise CheckpointFormatError(
            f"array {name!r}: file holds {len(raw)} bytes but manifest shape {shape} "
            f"needs {expected}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).copy()


def load_checkpoint(path, config: ArchConfig | None = None) -> LoadedCheckpoint:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise CheckpointFormatError(f"no checkpoint manifest at {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"checkpoint manifest at {manifest_path} is unreadable: "
                                    f"{exc}") from exc
    version = manifest.get("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint at {path} has version {version}, expected {CHECKPOINT_VERSION}")
    cfg = config if config is not None else ArchConfig.from_dict(manifest["config"])
    table: dict = manifest["arrays"]
    provenance = manifest.get("provenance", "source")
    seed = int(manifest.get("seed", 0))

    prefixes = {name.split(".", 1)[0] for name in table}
    generator = build_generator(cfg, seed=0, provenance=provenance) \
        if "generator" in prefixes else None
    encoder = EncoderNet(cfg) if "encoder" in prefixes else None
    embedder = EmbedderNet(cfg) if "embedder" in prefixes else None
    named = _named_arrays(generator, encoder, embedder)

    extras = {}
    for name, shape in sorted(table.items()):
        arr = _read_array(path, name, shape)
        if name in named:
            param = named[name]
            if tuple(param.shape) != tuple(arr.shape):
                raise CheckpointShapeError(
                    f"array {name!r}: checkpoint shape {tuple(arr.shape)} does not match "
                    f"configured shape {tuple(param.shape)}")
            with torch.no_grad():
                param.copy_(torch.from_numpy(arr))
        else:
            extras[name] = arr
    missing = sorted(set(named) - set(table))
    if missing:
        raise CheckpointFormatError(
            f"checkpoint at {path} lacks arrays for the configured architecture: "
            f"{missing[:5]}")
    return LoadedCheckpoint(config=cfg, seed=seed, provenance=provenance,
                            generator=generator, encoder=encoder, embedder=embedder,
                            arrays=extras)
