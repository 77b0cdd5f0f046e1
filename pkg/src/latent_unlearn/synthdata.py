"""Synthetic multi-image-per-identity corpus.

An identity is a fixed composition of colored Gaussian blobs; intra-identity
variation is a small translation/rotation/brightness change applied at render
time. The corpus on disk is a manifest (specs + variations + seed) only;
pixels are always re-rendered, so a round-tripped corpus reproduces the
original images bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import numpy_rng

MANIFEST_VERSION = 1

IN_DOMAIN_BLOB_COUNT = 3
OUT_OF_DOMAIN_BLOB_COUNT = 4
MU_RANGE = (-0.6, 0.6)
IN_DOMAIN_SIGMA_RANGE = (0.08, 0.2)
OUT_OF_DOMAIN_SIGMA_RANGE = (0.05, 0.09)
TRANSLATION_RANGE = (-0.1, 0.1)
ROTATION_RANGE = (-15.0, 15.0)
BRIGHTNESS_RANGE = (0.9, 1.1)

SPLITS = ("train", "heldout_ind", "heldout_ood")


class CorpusFormatError(Exception):
    """A corpus manifest is missing, truncated, or structurally invalid."""


@dataclass(frozen=True)
class Blob:
    mu: tuple[float, float]
    sigma: float
    color: tuple[float, float, float]


@dataclass(frozen=True)
class IdentitySpec:
    identity_id: str
    blobs: tuple[Blob, ...]

    @property
    def blob_count(self) -> int:
        return len(self.blobs)


@dataclass(frozen=True)
class VariationParams:
    t: tuple[float, float] = (0.0, 0.0)
    theta: float = 0.0
    b: float = 1.0

    @classmethod
    def zero(cls) -> "VariationParams":
        return cls()


@dataclass(frozen=True)
class CorpusIdentity:
    spec: IdentitySpec
    split: str
    variations: tuple[VariationParams, ...]


@dataclass(frozen=True)
class Corpus:
    identities: tuple[CorpusIdentity, ...]
    images_per_identity: int
    generation_seed: int

    def split_identities(self, split: str) -> list[CorpusIdentity]:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}, expected one of {SPLITS}")
        return [entry for entry in self.identities if entry.split == split]


def sample_identity(rng: np.random.Generator, regime: str, identity_id: str = "") -> IdentitySpec:
    """Draw identity parameters uniformly over the regime's ranges."""
    if regime == "in_domain":
        blob_count, sigma_range = IN_DOMAIN_BLOB_COUNT, IN_DOMAIN_SIGMA_RANGE
    elif regime == "out_of_domain":
        blob_count, sigma_range = OUT_OF_DOMAIN_BLOB_COUNT, OUT_OF_DOMAIN_SIGMA_RANGE
    else:
        raise ValueError(f"unknown regime {regime!r}, expected 'in_domain' or 'out_of_domain'")
    blobs = []
    for _ in range(blob_count):
        mu = rng.uniform(MU_RANGE[0], MU_RANGE[1], size=2)
        sigma = rng.uniform(sigma_range[0], sigma_range[1])
        color = rng.uniform(0.0, 1.0, size=3)
        blobs.append(Blob(mu=(float(mu[0]), float(mu[1])), sigma=float(sigma),
                          color=(float(color[0]), float(color[1]), float(color[2]))))
    return IdentitySpec(identity_id=identity_id, blobs=tuple(blobs))


def sample_variation(rng: np.random.Generator) -> VariationParams:
    t = rng.uniform(TRANSLATION_RANGE[0], TRANSLATION_RANGE[1], size=2)
    theta = rng.uniform(ROTATION_RANGE[0], ROTATION_RANGE[1])
    b = rng.uniform(BRIGHTNESS_RANGE[0], BRIGHTNESS_RANGE[1])
    return VariationParams(t=(float(t[0]), float(t[1])), theta=float(theta), b=float(b))


def render_identity(spec: IdentitySpec, var: VariationParams, resolution: int) -> np.ndarray:
    """Render one image: float32 (resolution, resolution, 3) with values in [-1, 1].

    Grid points span [-1, 1]^2; the pixel at point p gets
    clamp(b * sum_k c_k * exp(-||Rot_theta(p - t) - mu_k||^2 / (2 sigma_k^2)), 0, 1)
    mapped affinely onto [-1, 1].
    """
    if resolution < 8:
        raise ValueError(f"resolution must be >= 8, got {resolution}")
    axis = np.linspace(-1.0, 1.0, resolution)
    py, px = np.meshgrid(axis, axis, indexing="ij")
    sx = px - var.t[0]
    sy = py - var.t[1]
    th = np.deg2rad(var.theta)
    c, s = np.cos(th), np.sin(th)
    qx = c * sx - s * sy
    qy = s * sx + c * sy
    intensity = np.zeros((resolution, resolution, 3))
    for blob in spec.blobs:
        d2 = (qx - blob.mu[0]) ** 2 + (qy - blob.mu[1]) ** 2
        weight = np.exp(-d2 / (2.0 * blob.sigma ** 2))
        intensity += weight[..., None] * np.asarray(blob.color)
    img01 = np.clip(var.b * intensity, 0.0, 1.0)
    return (2.0 * img01 - 1.0).astype(np.float32)


def build_corpus(n_train_identities: int = 200, n_heldout_ind: int = 20,
                 n_heldout_ood: int = 20, images_per_identity: int = 10,
                 seed: int = 0) -> Corpus:
    """Sample a corpus manifest. Variation 0 of every identity is the zero variation."""
    for name, count in (("n_train_identities", n_train_identities),
                        ("n_heldout_ind", n_heldout_ind),
                        ("n_heldout_ood", n_heldout_ood),
                        ("images_per_identity", images_per_identity)):
        if count < 1:
            raise ValueError(f"{name} must be >= 1, got {count}")
    groups = (("train", "in_domain", n_train_identities),
              ("heldout_ind", "in_domain", n_heldout_ind),
              ("heldout_ood", "out_of_domain", n_heldout_ood))
    prefixes = {"train": "train", "heldout_ind": "ind", "heldout_ood": "ood"}
    entries = []
    for split, regime, count in groups:
        for i in range(count):
            identity_id = f"{prefixes[split]}-{i:04d}"
            spec = sample_identity(numpy_rng(seed, "identity", identity_id), regime, identity_id)
            var_rng = numpy_rng(seed, "variation", identity_id)
            variations = [VariationParams.zero()]
            variations += [sample_variation(var_rng) for _ in range(images_per_identity - 1)]
            entries.append(CorpusIdentity(spec=spec, split=split, variations=tuple(variations)))
    return Corpus(identities=tuple(entries), images_per_identity=images_per_identity,
                  generation_seed=seed)


def render_split(corpus: Corpus, split: str, resolution: int) -> np.ndarray:
    """Render every image of a split: float32 (N * images_per_identity, res, res, 3)."""
    images = [render_identity(entry.spec, var, resolution)
              for entry in corpus.split_identities(split)
              for var in entry.variations]
    return np.stack(images)


def corpus_to_dict(corpus: Corpus) -> dict:
    return {
        "version": MANIFEST_VERSION,
        "generation_seed": corpus.generation_seed,
        "identities": [
            {
                "identity_id": entry.spec.identity_id,
                "split": entry.split,
                "blobs": [{"mu": list(blob.mu), "sigma": blob.sigma, "color": list(blob.color)}
                          for blob in entry.spec.blobs],
                "variations": [{"t": list(var.t), "theta": var.theta, "b": var.b}
                               for var in entry.variations],
            }
            for entry in corpus.identities
        ],
    }


def save_corpus(corpus: Corpus, path) -> None:
    Path(path).write_text(json.dumps(corpus_to_dict(corpus), indent=2, sort_keys=True),
                          encoding="utf-8")


def load_corpus(path) -> Corpus:
    path = Path(path)
    if not path.exists():
        raise CorpusFormatError(f"corpus manifest not found at {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CorpusFormatError(f"corpus manifest at {path} is unreadable: {exc}") from exc
    try:
        if doc["version"] != MANIFEST_VERSION:
            raise CorpusFormatError(
                f"corpus manifest at {path} has version {doc['version']}, "
                f"expected {MANIFEST_VERSION}")
        entries = []
        for raw in doc["identities"]:
            if raw["split"] not in SPLITS:
                raise CorpusFormatError(
                    f"corpus manifest at {path}: identity {raw['identity_id']!r} "
                    f"has unknown split {raw['split']!r}")
            blobs = tuple(Blob(mu=(float(b["mu"][0]), float(b["mu"][1])),
                               sigma=float(b["sigma"]),
                               color=tuple(float(c) for c in b["color"]))
                          for b in raw["blobs"])
            variations = tuple(VariationParams(t=(float(v["t"][0]), float(v["t"][1])),
                                               theta=float(v["theta"]), b=float(v["b"]))
                               for v in raw["variations"])
            entries.append(CorpusIdentity(
                spec=IdentitySpec(identity_id=str(raw["identity_id"]), blobs=blobs),
                split=str(raw["split"]), variations=variations))
        seed = int(doc["generation_seed"])
    except CorpusFormatError:
        raise
    except (KeyError, IndexError, TypeError, ValueError) as exc:
        raise CorpusFormatError(f"corpus manifest at {path} is malformed: {exc!r}") from exc
    if not entries:
        raise CorpusFormatError(f"corpus manifest at {path} contains no identities")
    counts = {len(entry.variations) for entry in entries}
    if len(counts) != 1:
        raise CorpusFormatError(
            f"corpus manifest at {path}: identities disagree on images_per_identity "
            f"(saw {sorted(counts)})")
    return Corpus(identities=tuple(entries), images_per_identity=counts.pop(),
                  generation_seed=seed)


def contact_sheet(images, columns: int, pad: int = 2) -> np.ndarray:
    """Tile [-1, 1] HWC float images into one uint8 RGB sheet for human viewing."""
    images = [np.asarray(img) for img in images]
    h, w = images[0].shape[:2]
    rows = (len(images) + columns - 1) // columns
    sheet = np.zeros((rows * (h + pad) + pad, columns * (w + pad) + pad, 3), dtype=np.uint8)
    for idx, img in enumerate(images):
        r, c = divmod(idx, columns)
        block = np.clip((img + 1.0) * 127.5, 0.0, 255.0).astype(np.uint8)
        y = pad + r * (h + pad)
        x = pad + c * (w + pad)
        sheet[y:y + h, x:x + w] = block
    return sheet
