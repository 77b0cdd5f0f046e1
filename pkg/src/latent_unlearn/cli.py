"""Command-line pipeline: data generation, pretraining, unlearning, evaluation,
ablation sweeps, and contact-sheet export.

Every command is idempotent per output directory, echoes its fully resolved
config there, and writes a manifest of produced files. The output root comes
from --out, the config file, or the LATENT_UNLEARN_OUT environment variable.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .latentops import estimate_mean_latent
from .metrics import EvalConfig, config_hash, evaluate
from .nets import (ArchConfig, PerceptualNet, encode, generate, load_checkpoint,
                   map_forward, save_checkpoint, to_image_tensor)
from .pretrain import (PretrainConfig, embedder_pair_cosines,
                       reconstruction_identity_cosine, split_images, train_backbone,
                       train_embedder, write_history_csv)
from .rng import numpy_rng, substream_seed, torch_generator
from .synthdata import (Corpus, build_corpus, contact_sheet, load_corpus,
                        render_identity, sample_variation, save_corpus)
from .unlearn import UnlearnConfig, run_unlearning, with_no_id_preset

DEFAULT_OUT_ENV = "LATENT_UNLEARN_OUT"

_ABLATE_AXES = ("d", "alpha_max", "n_a", "n_g", "lambda_l2", "lambda_per", "lambda_id",
                "lambda_adj", "lambda_global", "learning_rate", "iterations")


class ConfigError(Exception):
    """Experiment config has unknown keys or invalid values."""


class MissingArtifactError(Exception):
    """A prerequisite pipeline artifact does not exist yet."""


# --- experiment config -------------------------------------------------------

@dataclass(frozen=True)
class DataSection:
    n_train: int = 200
    n_heldout_ind: int = 20
    n_heldout_ood: int = 20
    images_per_identity: int = 10
    seed: int | None = None

    def resolved_seed(self, master: int) -> int:
        return self.seed if self.seed is not None else substream_seed(master, "data")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    out: str | None = None
    arch: dict | None = None
    data: DataSection = DataSection()
    pretrain: dict | None = None
    unlearn: dict | None = None
    eval: dict | None = None
    ablate: dict | None = None

    def arch_config(self) -> ArchConfig:
        return ArchConfig.from_dict(self.arch) if self.arch else ArchConfig()

    def pretrain_config(self) -> PretrainConfig:
        kw = dict(self.pretrain or {})
        kw.setdefault("seed", substream_seed(self.seed, "pretrain"))
        return PretrainConfig(**kw)

    def unlearn_scenario(self) -> str:
        return (self.unlearn or {}).get("scenario", "random")

    def unlearn_identity_index(self) -> int:
        return (self.unlearn or {}).get("identity_index", 0)

    def unlearn_preset(self) -> str | None:
        return (self.unlearn or {}).get("preset")

    def unlearn_config(self, scenario: str | None = None,
                       identity_index: int | None = None) -> UnlearnConfig:
        scenario = scenario or self.unlearn_scenario()
        identity_index = self.unlearn_identity_index() if identity_index is None \
            else identity_index
        kw = {k: v for k, v in (self.unlearn or {}).items()
              if k not in ("scenario", "identity_index", "preset")}
        kw.setdefault("seed", substream_seed(self.seed, "unlearn", scenario, identity_index))
        cfg = UnlearnConfig(**kw)
        if self.unlearn_preset() == "no-id":
            cfg = with_no_id_preset(cfg)
        return cfg

    def eval_config(self) -> EvalConfig:
        kw = dict(self.eval or {})
        kw.setdefault("seed", substream_seed(self.seed, "eval"))
        return EvalConfig(**kw)

    def ablate_section(self) -> dict:
        section = {"axis": "d", "values": [0.0, 30.0], "n_identities": 20,
                   "scenario": "ood"}
        section.update(self.ablate or {})
        return section


_SECTION_KEYS = {
    "data": {"n_train", "n_heldout_ind", "n_heldout_ood", "images_per_identity", "seed"},
    "arch": {f.name for f in ArchConfig.__dataclass_fields__.values()},
    "pretrain": {"epochs", "embedder_epochs", "batch_size", "learning_rate", "beta",
                 "seed", "mode"},
    "unlearn": {f for f in UnlearnConfig.__dataclass_fields__} | {"scenario",
                                                                  "identity_index", "preset"},
    "eval": {"n_eval_latents", "seed", "real_split"},
    "ablate": {"axis", "values", "n_identities", "scenario"},
}


def parse_experiment_config(doc: dict) -> ExperimentConfig:
    known_top = {"seed", "out"} | set(_SECTION_KEYS)
    for key in doc:
        if key not in known_top:
            raise ConfigError(f"unknown config key {key!r}")
    for section, allowed in _SECTION_KEYS.items():
        raw = doc.get(section)
        if raw is None:
            continue
        if not isinstance(raw, dict):
            raise ConfigError(f"config section {section!r} must be an object")
        for key in raw:
            if key not in allowed:
                raise ConfigError(f"unknown config key {section}.{key}")
    data = DataSection(**doc.get("data", {}))
    cfg = ExperimentConfig(seed=int(doc.get("seed", 0)), out=doc.get("out"),
                           arch=doc.get("arch"), data=data,
                           pretrain=doc.get("pretrain"), unlearn=doc.get("unlearn"),
                           eval=doc.get("eval"), ablate=doc.get("ablate"))
    # Fail on invalid values now rather than mid-pipeline.
    cfg.arch_config()
    cfg.pretrain_config()
    cfg.unlearn_config()
    cfg.eval_config()
    if cfg.unlearn_scenario() not in ("random", "ind", "ood"):
        raise ConfigError(f"unknown config value unlearn.scenario="
                          f"{cfg.unlearn_scenario()!r}")
    preset = cfg.unlearn_preset()
    if preset not in (None, "no-id"):
        raise ConfigError(f"unknown config value unlearn.preset={preset!r}")
    axis = cfg.ablate_section()["axis"]
    if axis not in _ABLATE_AXES:
        raise ConfigError(f"unknown config value ablate.axis={axis!r}; "
                          f"expected one of {_ABLATE_AXES}")
    return cfg


def load_experiment_config(path) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    try:
        return parse_experiment_config(doc)
    except TypeError as exc:
        raise ConfigError(f"invalid config file {path}: {exc}") from exc


def resolved_config_dict(cfg: ExperimentConfig) -> dict:
    ablate = cfg.ablate_section()
    return {
        "version": __version__,
        "seed": cfg.seed,
        "out": cfg.out,
        "arch": cfg.arch_config().to_dict(),
        "data": {
            "n_train": cfg.data.n_train,
            "n_heldout_ind": cfg.data.n_heldout_ind,
            "n_heldout_ood": cfg.data.n_heldout_ood,
            "images_per_identity": cfg.data.images_per_identity,
            "seed": cfg.data.resolved_seed(cfg.seed),
        },
        "pretrain": cfg.pretrain_config().to_dict(),
        "unlearn": {**cfg.unlearn_config().to_dict(),
                    "scenario": cfg.unlearn_scenario(),
                    "identity_index": cfg.unlearn_identity_index(),
                    "preset": cfg.unlearn_preset()},
        "eval": cfg.eval_config().to_dict(),
        "ablate": ablate,
    }


# --- artifact layout ---------------------------------------------------------

def corpus_path(root: Path) -> Path:
    return root / "data" / "corpus.json"


def pretrain_checkpoint_dir(root: Path) -> Path:
    return root / "pretrain" / "checkpoint"


def unlearn_dir(root: Path, scenario: str) -> Path:
    return root / "unlearn" / scenario


def _write_outputs(out_dir: Path, command: str, cfg: ExperimentConfig,
                   files: list[str]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved_config.json").write_text(
        json.dumps(resolved_config_dict(cfg), indent=2, sort_keys=True), encoding="utf-8")
    manifest = {"version": __version__, "command": command,
                "files": sorted(set(files + ["resolved_config.json", "manifest.json"]))}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True),
                                           encoding="utf-8")


def _load_corpus_or_fail(root: Path) -> Corpus:
    path = corpus_path(root)
    if not path.exists():
        raise MissingArtifactError(
            f"no corpus manifest at {path}; run `latent-unlearn make-data` first")
    return load_corpus(path)


def _load_pretrained_or_fail(root: Path):
    ckpt_dir = pretrain_checkpoint_dir(root)
    if not (ckpt_dir / "manifest.json").exists():
        raise MissingArtifactError(
            f"no pretrained checkpoint at {ckpt_dir}; run `latent-unlearn pretrain` first")
    ckpt = load_checkpoint(ckpt_dir)
    if ckpt.generator is None or ckpt.encoder is None or ckpt.embedder is None:
        raise MissingArtifactError(
            f"checkpoint at {ckpt_dir} lacks generator/encoder/embedder arrays")
    return ckpt


# --- scenario sources --------------------------------------------------------

@dataclass
class ScenarioSource:
    scenario: str
    identity_id: str | None
    w_u: torch.Tensor
    x_u: torch.Tensor
    others: torch.Tensor | None


def resolve_scenario_source(scenario: str, corpus: Corpus, bundle, encoder,
                            master_seed: int, identity_index: int) -> ScenarioSource:
    """Produce the source latent (and held-out images) for one scenario run.

    random: fresh prior latent. ind: a train identity rendered under a fresh,
    held-out variation, inverted. ood: a heldout_ood identity's canonical
    image, inverted. For ind/ood the identity's variations 1..n-1 are the
    unseen multi-image test set.
    """
    resolution = bundle.config.image_size
    if scenario == "random":
        gen = torch_generator(master_seed, "scenario", "random", identity_index)
        z = torch.randn((bundle.config.d_z,), generator=gen)
        with torch.no_grad():
            w_u = map_forward(bundle, z)
            x_u = generate(bundle, w_u)
        return ScenarioSource(scenario, None, w_u, x_u, None)
    if scenario == "ind":
        entries = corpus.split_identities("train")
    elif scenario == "ood":
        entries = corpus.split_identities("heldout_ood")
    else:
        raise ConfigError(f"unknown scenario {scenario!r}")
    if identity_index >= len(entries) or identity_index < 0:
        raise ConfigError(f"identity_index {identity_index} out of range for "
                          f"scenario {scenario!r} with {len(entries)} identities")
    entry = entries[identity_index]
    if scenario == "ind":
        var = sample_variation(
            numpy_rng(master_seed, "scenario", "ind-variation", entry.spec.identity_id))
        x_u = to_image_tensor(render_identity(entry.spec, var, resolution))
    else:
        x_u = to_image_tensor(render_identity(entry.spec, entry.variations[0], resolution))
    others = to_image_tensor(np.stack([
        render_identity(entry.spec, v, resolution) for v in entry.variations[1:]]))
    with torch.no_grad():
        w_u = encode(encoder, x_u)
    return ScenarioSource(scenario, entry.spec.identity_id, w_u, x_u, others)


# --- commands ----------------------------------------------------------------

def cmd_make_data(cfg: ExperimentConfig, root: Path) -> Path:
    out_dir = root / "data"
    out_dir.mkdir(parents=True, exist_ok=True)
    corpus = build_corpus(cfg.data.n_train, cfg.data.n_heldout_ind, cfg.data.n_heldout_ood,
                          cfg.data.images_per_identity, seed=cfg.data.resolved_seed(cfg.seed))
    save_corpus(corpus, corpus_path(root))
    _write_outputs(out_dir, "make-data", cfg, ["corpus.json"])
    return out_dir


def cmd_pretrain(cfg: ExperimentConfig, root: Path) -> Path:
    corpus = _load_corpus_or_fail(root)
    arch = cfg.arch_config()
    pcfg = cfg.pretrain_config()
    out_dir = root / "pretrain"
    out_dir.mkdir(parents=True, exist_ok=True)

    bundle, encoder, history = train_backbone(corpus, pcfg, arch)
    embedder, emb_history = train_embedder(corpus, pcfg, arch)
    mean_latent = estimate_mean_latent(bundle, gen=torch_generator(pcfg.seed, "mean-latent"))
    save_checkpoint(pretrain_checkpoint_dir(root), generator=bundle, encoder=encoder,
                    embedder=embedder, seed=pcfg.seed,
                    extra_arrays={"mean_latent": mean_latent.numpy()})
    write_history_csv(history, out_dir / "history.csv")
    write_history_csv(emb_history, out_dir / "embedder_history.csv")

    heldout = split_images(corpus, "heldout_ind", arch.image_size)
    recon_cos = reconstruction_identity_cosine(bundle, encoder, embedder, heldout)
    same_cos, cross_cos = embedder_pair_cosines(embedder, corpus, "heldout_ind",
                                                arch.image_size)
    gates = {"heldout_recon_identity_cosine": recon_cos,
             "embedder_same_identity_cosine": same_cos,
             "embedder_cross_identity_cosine": cross_cos}
    (out_dir / "quality_gates.json").write_text(json.dumps(gates, indent=2, sort_keys=True),
                                                encoding="utf-8")
    print(f"pretrain: recon identity cosine {recon_cos:.3f}, "
          f"embedder same/cross {same_cos:.3f}/{cross_cos:.3f}")
    files = ["checkpoint/manifest.json", "history.csv", "embedder_history.csv",
             "quality_gates.json"]
    _write_outputs(out_dir, "pretrain", cfg, files)
    return out_dir


def cmd_unlearn(cfg: ExperimentConfig, root: Path) -> Path:
    corpus = _load_corpus_or_fail(root)
    ckpt = _load_pretrained_or_fail(root)
    scenario = cfg.unlearn_scenario()
    identity_index = cfg.unlearn_identity_index()
    ucfg = cfg.unlearn_config()
    source = resolve_scenario_source(scenario, corpus, ckpt.generator, ckpt.encoder,
                                     cfg.seed, identity_index)
    percep = PerceptualNet(ckpt.config)
    g_u, record = run_unlearning(ckpt.generator, source.w_u, ckpt.embedder, percep, ucfg)

    out_dir = unlearn_dir(root, scenario)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_dir = out_dir / "checkpoint"
    w_bar = estimate_mean_latent(ckpt.generator,
                                 gen=torch_generator(ucfg.seed, "mean-latent"))
    save_checkpoint(ckpt_dir, generator=g_u, seed=ucfg.seed,
                    extra_arrays={"w_u": source.w_u.numpy(), "w_bar": w_bar.numpy()})
    record.source_checkpoint = str(pretrain_checkpoint_dir(root))
    record.unlearned_checkpoint = str(ckpt_dir)
    record.write_losses_csv(out_dir / "losses.csv")
    run_doc = {
        "config": record.config.to_dict(),
        "seeds": record.seeds,
        "wall_time_sec": record.wall_time_sec,
        "source_checkpoint": record.source_checkpoint,
        "unlearned_checkpoint": record.unlearned_checkpoint,
        "iterations_recorded": len(record.rows),
        "scenario": scenario,
        "identity_index": identity_index,
        "identity_id": source.identity_id,
        "master_seed": cfg.seed,
    }
    (out_dir / "run.json").write_text(json.dumps(run_doc, indent=2, sort_keys=True),
                                      encoding="utf-8")
    _write_outputs(out_dir, "unlearn", cfg,
                   ["checkpoint/manifest.json", "losses.csv", "run.json"])
    return out_dir


def _load_run_or_fail(root: Path, scenario: str) -> dict:
    run_path = unlearn_dir(root, scenario) / "run.json"
    if not run_path.exists():
        raise MissingArtifactError(
            f"no unlearning run at {run_path}; run `latent-unlearn unlearn` first")
    return json.loads(run_path.read_text(encoding="utf-8"))


def cmd_evaluate(cfg: ExperimentConfig, root: Path) -> Path:
    corpus = _load_corpus_or_fail(root)
    ckpt = _load_pretrained_or_fail(root)
    scenario = cfg.unlearn_scenario()
    run_doc = _load_run_or_fail(root, scenario)
    unlearned = load_checkpoint(unlearn_dir(root, scenario) / "checkpoint")
    source = resolve_scenario_source(scenario, corpus, ckpt.generator, ckpt.encoder,
                                     run_doc["master_seed"], run_doc["identity_index"])
    w_u = torch.from_numpy(unlearned.arrays["w_u"])
    report = evaluate(scenario, ckpt.generator, unlearned.generator, ckpt.encoder,
                      ckpt.embedder, corpus, w_u, source.others, cfg.eval_config(),
                      report_config_hash=config_hash(resolved_config_dict(cfg)))
    out_dir = root / "evaluate" / scenario
    out_dir.mkdir(parents=True, exist_ok=True)
    report.write_json(out_dir / "report.json")
    _write_outputs(out_dir, "evaluate", cfg, ["report.json"])
    return out_dir


def cmd_grid(cfg: ExperimentConfig, root: Path) -> Path:
    from PIL import Image

    corpus = _load_corpus_or_fail(root)
    ckpt = _load_pretrained_or_fail(root)
    scenario = cfg.unlearn_scenario()
    run_doc = _load_run_or_fail(root, scenario)
    unlearned = load_checkpoint(unlearn_dir(root, scenario) / "checkpoint")
    source = resolve_scenario_source(scenario, corpus, ckpt.generator, ckpt.encoder,
                                     run_doc["master_seed"], run_doc["identity_index"])
    g_s, g_u = ckpt.generator, unlearned.generator
    w_u = torch.from_numpy(unlearned.arrays["w_u"])
    w_bar = torch.from_numpy(unlearned.arrays["w_bar"])
    ucfg = UnlearnConfig.from_dict(run_doc["config"])
    if ucfg.mode == "baseline":
        w_t = w_bar
    else:
        from .latentops import compute_target_latent
        w_t = compute_target_latent(w_u, w_bar, ucfg.d)

    def chw(img):
        return img.permute(1, 2, 0).numpy()

    with torch.no_grad():
        tiles = [chw(source.x_u), chw(generate(g_s, w_t)), chw(generate(g_s, w_u)),
                 chw(generate(g_u, w_u))]
        gen = torch_generator(cfg.seed, "grid-preservation")
        z = torch.randn((4, g_s.config.d_z), generator=gen)
        w_pres = map_forward(g_s, z)
        for i in range(0, 4, 2):
            tiles += [chw(generate(g_s, w_pres[i])), chw(generate(g_u, w_pres[i])),
                      chw(generate(g_s, w_pres[i + 1])), chw(generate(g_u, w_pres[i + 1]))]
    sheet = contact_sheet(tiles, columns=4)
    out_dir = root / "grid" / scenario
    out_dir.mkdir(parents=True, exist_ok=True)
    Image.fromarray(sheet).save(out_dir / "grid.png")
    _write_outputs(out_dir, "grid", cfg, ["grid.png"])
    return out_dir


def _summary_stats(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=1)) if len(arr) > 1 else 0.0


def cmd_ablate(cfg: ExperimentConfig, root: Path) -> Path:
    corpus = _load_corpus_or_fail(root)
    ckpt = _load_pretrained_or_fail(root)
    section = cfg.ablate_section()
    axis, values = section["axis"], section["values"]
    scenario, n_identities = section["scenario"], int(section["n_identities"])
    percep = PerceptualNet(ckpt.config)
    eval_cfg = cfg.eval_config()
    out_dir = root / "ablate" / axis
    reports_dir = out_dir / "reports"
    reports_dir.mkdir(parents=True, exist_ok=True)

    files = []
    rows = []
    for value in values:
        per_metric: dict[str, list[float]] = {}
        for identity_index in range(n_identities):
            run_seed = substream_seed(cfg.seed, "ablate", scenario, identity_index)
            base = cfg.unlearn_config(scenario=scenario, identity_index=identity_index)
            ucfg = replace(base, seed=run_seed, **{axis: value})
            source = resolve_scenario_source(scenario, corpus, ckpt.generator,
                                             ckpt.encoder, cfg.seed, identity_index)
            g_u, _ = run_unlearning(ckpt.generator, source.w_u, ckpt.embedder, percep, ucfg)
            report = evaluate(scenario, ckpt.generator, g_u, ckpt.encoder, ckpt.embedder,
                              corpus, source.w_u, source.others, eval_cfg,
                              report_config_hash=config_hash(
                                  {"axis": axis, "value": value, "seed": run_seed}))
            name = source.identity_id or f"idx{identity_index:03d}"
            report_path = reports_dir / f"{axis}={value}_{name}.json"
            report.write_json(report_path)
            files.append(str(report_path.relative_to(out_dir)))
            doc = report.to_dict()["metrics"]
            for key, metric_value in doc.items():
                per_metric.setdefault(key, []).append(metric_value)
        row = {"axis": axis, "value": value, "n": n_identities}
        for key in ("id", "id_others", "frechet_pre", "delta_frechet_real"):
            if key in per_metric:
                mean, std = _summary_stats(per_metric[key])
                row[f"{key}_mean"] = f"{mean:.6f}"
                row[f"{key}_std"] = f"{std:.6f}"
        rows.append(row)
        print(f"ablate {axis}={value}: " + ", ".join(
            f"{k}={v}" for k, v in row.items() if k.endswith("_mean")))

    fieldnames = sorted({key for row in rows for key in row},
                        key=lambda k: (k not in ("axis", "value", "n"), k))
    with (out_dir / "summary.csv").open("w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)
    _write_outputs(out_dir, "ablate", cfg, files + ["summary.csv"])
    return out_dir


# --- entry point -------------------------------------------------------------

_COMMANDS = {
    "make-data": cmd_make_data,
    "pretrain": cmd_pretrain,
    "unlearn": cmd_unlearn,
    "evaluate": cmd_evaluate,
    "grid": cmd_grid,
    "ablate": cmd_ablate,
}


def _apply_cli_overrides(doc: dict, args) -> dict:
    doc = dict(doc)
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.out is not None:
        doc["out"] = str(args.out)
    unlearn = dict(doc.get("unlearn") or {})
    if args.scenario is not None:
        unlearn["scenario"] = args.scenario
    if args.mode is not None:
        unlearn["mode"] = args.mode
    if args.preset is not None:
        unlearn["preset"] = args.preset
    if unlearn:
        doc["unlearn"] = unlearn
    return doc


def resolve_out_root(cfg: ExperimentConfig) -> Path:
    if cfg.out:
        return Path(cfg.out)
    env = os.environ.get(DEFAULT_OUT_ENV)
    if env:
        return Path(env)
    return Path("latent-unlearn-out")


def main(argv=None) -> int:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment config JSON")
    common.add_argument("--seed", type=int, help="master seed override")
    common.add_argument("--out", type=Path, help="output root directory")
    common.add_argument("--scenario", choices=["random", "ind", "ood"])
    common.add_argument("--mode", choices=["guide", "baseline"])
    common.add_argument("--preset", choices=["no-id"])
    parser = argparse.ArgumentParser(prog="latent-unlearn", parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        sub.add_parser(name, parents=[common])
    args = parser.parse_args(argv)

    try:
        doc = {}
        if args.config is not None:
            doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        cfg = parse_experiment_config(_apply_cli_overrides(doc, args))
        root = resolve_out_root(cfg)
        out_dir = _COMMANDS[args.command](cfg, root)
        print(f"{args.command}: wrote {out_dir}")
        return 0
    except (ConfigError, MissingArtifactError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
