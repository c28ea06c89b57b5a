"""Command-line entry point: ``spoofprobe <command> [--config F] [--out D] [--seed N] [--set k=v ...]``.

Exit codes: 0 success, 1 configuration or schema error, 2 runtime or numeric error.
Every run writes ``run-manifest.json`` to its output directory before any heavy work.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

from . import __version__
from .errors import (CheckpointError, ConfigurationError, DimensionError, EvaluationError, NumericError,
                     ProviderError, SchemaError, SpoofProbeError, TrainingDivergenceError)

logger = logging.getLogger("spoofprobe")

COMMANDS = ("synth-data", "train-model", "train-sfa", "attack", "evaluate", "viz-cam", "viz-sfa")
DEVICE_ENV = "SPOOFPROBE_DEVICE"

DEFAULT_CONFIG = {
    "data": {
        "root": None,
        "train_size": 2000,
        "test_size": 500,
        "image_size": 64,
        "artifact_strength": 0.5,
        "test_seed_offset": 1000,
    },
    "model": {
        "backbone": "small-cnn",
        "epochs": 8,
        "batch_size": 64,
        "learning_rate": 2e-3,
        "weight_decay": 0.0,
        "loss_weights": {"f": 1.0, "t": 0.1, "i": 0.01, "d": 0.1, "r": 0.1},
        "checkpoint": None,
    },
    "sfa": {
        "alpha": 0.1,
        "use_lbp": True,
        "epochs": 3,
        "batch_size": 64,
        "learning_rate": 1e-3,
        "beta_kl": 1e-4,
        "discriminator": "spoof",
        "checkpoint": None,
    },
    "attack": {
        "specs": [
            {"method": "fgsm", "head": "c", "epsilon": 0.06, "use_sfa": False},
            {"method": "fgsm", "head": "c", "epsilon": 0.06, "use_sfa": True},
        ],
    },
    "evaluate": {
        "methods": ["fgsm"],
        "epsilons": [0.02, 0.06, 0.1, 0.2],
        "heads": ["f", "t", "i", "d", "r", "c"],
        "head_epsilon": 0.06,
        "asr_convention": "correct",
        "transfer": [],
        "transfer_epsilon": 0.06,
    },
    "viz": {"num_samples": 8, "layer": "backbone", "target_class": "spoof"},
}


# ---------------------------------------------------------------------------
# config handling


def merge(base: dict, update: dict, path: str = "") -> dict:
    """Recursive merge; unknown keys are rejected so typos fail loudly."""
    out = copy.deepcopy(base)
    for k, v in update.items():
        where = f"{path}{k}"
        if k not in out:
            raise ConfigurationError(f"unknown config key {where!r}")
        if isinstance(out[k], dict) and isinstance(v, dict):
            out[k] = merge(out[k], v, where + ".")
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(config: dict, assignment: str) -> dict:
    if "=" not in assignment:
        raise ConfigurationError(f"override {assignment!r} is not of the form key=value")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = config
    for i, part in enumerate(parts[:-1]):
        if not isinstance(node.get(part), dict):
            raise ConfigurationError(f"unknown config key {'.'.join(parts[:i + 1])!r} in override {key!r}")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigurationError(f"unknown config key {key!r}")
    node[parts[-1]] = parse_value(raw)
    return config


def resolve_config(config_path: Optional[str], overrides: List[str]) -> dict:
    """Defaults, then the JSON config file, then ``--set`` overrides."""
    config = copy.deepcopy(DEFAULT_CONFIG)
    if config_path:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigurationError(f"config file not found: {path}")
        try:
            loaded = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigurationError(f"config file {path} must hold a JSON object")
        config = merge(config, loaded)
    for item in overrides:
        apply_override(config, item)
    return config


def select_device() -> torch.device:
    name = os.environ.get(DEVICE_ENV, "").strip()
    if not name:
        return torch.device("cuda" if torch.cuda.is_available() else "cpu")
    try:
        device = torch.device(name)
    except RuntimeError as exc:
        raise ConfigurationError(f"{DEVICE_ENV}={name!r} is not a valid device") from exc
    if device.type == "cuda" and not torch.cuda.is_available():
        raise ConfigurationError(f"{DEVICE_ENV}={name!r} requested but CUDA is unavailable")
    return device


def _checkpoint_hash(directory, kind: str) -> Optional[str]:
    if not directory:
        return None
    from .models import read_meta

    try:
        return read_meta(directory, kind).get("state_sha256")
    except CheckpointError as exc:
        # the manifest must still be written; the command itself fails on load
        return f"unreadable: {exc}"


def write_manifest(out: Path, command: str, config: dict, seed: int, device: torch.device) -> Path:
    from .models import code_version

    hashes = {"model": _checkpoint_hash(config["model"]["checkpoint"], "multitask"),
              "sfa": _checkpoint_hash(config["sfa"]["checkpoint"], "sfa")}
    for entry in config["evaluate"]["transfer"]:
        hashes[f"transfer:{entry.get('name')}"] = _checkpoint_hash(entry.get("model"), "multitask")
    manifest = {"command": command, "config": config, "seed": seed, "checkpoint_hashes": hashes,
                "device": str(device), "version": __version__, "code_version": code_version()}
    path = out / "run-manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# shared builders


def _synth_config(cfg: dict, size: int, seed: int):
    from .datasets import SynthConfig

    d = cfg["data"]
    return SynthConfig(n_samples=size, seed=seed, image_size=d["image_size"],
                       artifact_strength=d["artifact_strength"])


def _datasets(cfg: dict, seed: int):
    """Train and test splits from ``data.root`` if set, else generated in memory."""
    from .datasets import generate_synthetic, load_disk_dataset

    d = cfg["data"]
    if d["root"]:
        root = Path(d["root"])
        return (load_disk_dataset(root, "train", image_size=d["image_size"]),
                load_disk_dataset(root, "test", image_size=d["image_size"]))
    return (generate_synthetic(_synth_config(cfg, d["train_size"], seed)),
            generate_synthetic(_synth_config(cfg, d["test_size"], seed + d["test_seed_offset"])))


def _require(value, field: str):
    if not value:
        raise ConfigurationError(f"{field} must be set for this command")
    return value


def _load_model(path, device):
    from .models import load_model

    model, meta = load_model(_require(path, "model.checkpoint"), map_location=device)
    return model.to(device), meta


def _load_gens(path, device):
    if not path:
        return None, None
    from .sfa import load_generators

    gens, meta = load_generators(path, map_location=device)
    return gens.to(device), meta


def _attack_spec(entry: dict, seed: int):
    from .attacks import AttackSpec

    try:
        return AttackSpec(**{"seed": seed, **entry})
    except TypeError as exc:
        raise ConfigurationError(f"bad attack spec {entry}: {exc}") from exc


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_synth_data(cfg, out: Path, seed: int, device) -> None:
    from .datasets import generate_synthetic, save_disk_dataset

    d = cfg["data"]
    for split, size, s in (("train", d["train_size"], seed), ("test", d["test_size"], seed + d["test_seed_offset"])):
        ds = generate_synthetic(_synth_config(cfg, size, s))
        save_disk_dataset(ds, out, split)
        logger.info("wrote %d %s samples to %s", len(ds), split, out)


def cmd_train_model(cfg, out: Path, seed: int, device) -> None:
    from .losses import LossWeights
    from .models import TrainConfig, accuracy, build_model, save_model, train

    m = cfg["model"]
    train_set, test_set = _datasets(cfg, seed)
    model = build_model(m["backbone"], seed=seed, image_size=cfg["data"]["image_size"]).to(device)
    weights = LossWeights(**m["loss_weights"])
    tc = TrainConfig(epochs=m["epochs"], batch_size=m["batch_size"], learning_rate=m["learning_rate"],
                     seed=seed, weight_decay=m["weight_decay"])
    model, history = train(model, train_set, tc, weights)
    save_model(model, out / "model", seed=seed, weights=weights)
    acc = accuracy(model, test_set)
    _write_json(out / "metrics.json", {"history": history, "test_accuracy": acc,
                                       "train_fingerprint": train_set.fingerprint(),
                                       "test_fingerprint": test_set.fingerprint()})
    logger.info("test accuracy %.4f", acc)


def cmd_train_sfa(cfg, out: Path, seed: int, device) -> None:
    from .models import state_hash
    from .sfa import SfaTrainConfig, build_generators, config_dict, save_generators, train_sfa

    s = cfg["sfa"]
    model, meta = _load_model(cfg["model"]["checkpoint"], device)
    train_set, _ = _datasets(cfg, seed)
    gens = build_generators(seed=seed, alpha=s["alpha"], use_lbp=s["use_lbp"]).to(device)
    sc = SfaTrainConfig(epochs=s["epochs"], batch_size=s["batch_size"], learning_rate=s["learning_rate"],
                        beta_kl=s["beta_kl"], seed=seed, discriminator=s["discriminator"])
    before = state_hash(model)
    gens, history = train_sfa(gens, model, train_set, sc)
    if state_hash(model) != before:
        raise NumericError("frozen model parameters changed during SFA training")
    save_generators(gens, out / "sfa", model_sha256=meta["state_sha256"], beta_kl=s["beta_kl"],
                    extra={"train_config": config_dict(sc)})
    _write_json(out / "sfa_history.json", history)


def cmd_attack(cfg, out: Path, seed: int, device) -> None:
    from .evaluation import attack_dataset, attack_success_rate

    model, _ = _load_model(cfg["model"]["checkpoint"], device)
    gens, _ = _load_gens(cfg["sfa"]["checkpoint"], device)
    _, test_set = _datasets(cfg, seed)
    specs = [_attack_spec(e, seed) for e in cfg["attack"]["specs"]]
    if any(s.use_sfa for s in specs) and gens is None:
        raise ConfigurationError("an attack spec has use_sfa=true but sfa.checkpoint is not set")
    y = torch.from_numpy(np.array(test_set.y)).long()
    x = torch.from_numpy(np.array(test_set.pixels))
    summary = []
    with (out / "results.jsonl").open("w") as fh:
        for k, spec in enumerate(specs):
            res = attack_dataset(model, test_set, spec, gens, keep_adv=True)
            linf = (res.x_adv - x).abs().flatten(1).amax(dim=1)
            for i in range(len(test_set)):
                fh.write(json.dumps({"spec": k, "sample_id": test_set.ids[i], "y": int(y[i]),
                                     "pred_before": int(res.pred_before[i]), "pred_after": int(res.pred_after[i]),
                                     "perturbation_linf": float(linf[i])}, sort_keys=True) + "\n")
            summary.append({"spec": spec.to_dict(),
                            "asr": attack_success_rate(res.pred_before, res.pred_after, y)})
    _write_json(out / "attack_summary.json", summary)


def cmd_evaluate(cfg, out: Path, seed: int, device) -> None:
    from dataclasses import replace

    from .evaluation import (EvalReport, emit_report, head_shift_sweep, per_head_sweep, transfer_matrix)

    e = cfg["evaluate"]
    model, meta = _load_model(cfg["model"]["checkpoint"], device)
    gens, gmeta = _load_gens(cfg["sfa"]["checkpoint"], device)
    _, test_set = _datasets(cfg, seed)
    backbone = meta["backbone"]
    sfa_flags = [False, True] if gens is not None else [False]
    base = _attack_spec({"method": "fgsm", "head": "c", "epsilon": e["head_epsilon"]}, seed)

    specs = []
    for method in e["methods"]:
        for eps in e["epsilons"]:
            specs += [replace(base, method=method, epsilon=float(eps), use_sfa=f) for f in sfa_flags]
    for head in e["heads"]:
        if head == "c":
            continue
        specs += [replace(base, head=head, use_sfa=f) for f in sfa_flags]
    asr_rows, acc_rows = per_head_sweep(model, gens, test_set, specs, backbone, e["asr_convention"])
    shift_rows = []
    for f in sfa_flags:
        shift_rows += head_shift_sweep(model, gens, test_set, replace(base, use_sfa=f), backbone)

    models, gens_map, hashes = [(backbone, model)], {backbone: gens}, {backbone: meta["state_sha256"]}
    for entry in e["transfer"]:
        name = entry.get("name") or f"model{len(models)}"
        m2, meta2 = _load_model(entry.get("model"), device)
        g2, _ = _load_gens(entry.get("sfa"), device)
        models.append((name, m2))
        gens_map[name] = g2
        hashes[name] = meta2["state_sha256"]
    transfer_rows = []
    t_flags = [False, True] if all(g is not None for g in gens_map.values()) else [False]
    for f in t_flags:
        transfer_rows += transfer_matrix(models, gens_map, test_set,
                                         replace(base, epsilon=e["transfer_epsilon"], use_sfa=f))
    report = EvalReport(asr_rows, acc_rows, shift_rows, transfer_rows, meta={
        "schema": "v1",
        "seed": seed,
        "asr_convention": e["asr_convention"],
        "num_samples": len(test_set),
        "dataset_fingerprint": test_set.fingerprint(),
        "model_hashes": hashes,
        "sfa_hash": gmeta["state_sha256"] if gmeta else None,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    })
    emit_report(report, out)


def cmd_viz_cam(cfg, out: Path, seed: int, device) -> None:
    from .cam import grad_cam, save_overlay

    v = cfg["viz"]
    model, _ = _load_model(cfg["model"]["checkpoint"], device)
    _, test_set = _datasets(cfg, seed)
    for i in range(min(v["num_samples"], len(test_set))):
        x = torch.from_numpy(np.array(test_set.pixels[i])).to(device)
        heat = grad_cam(model, x, v["target_class"], v["layer"])
        save_overlay(heat, x.cpu(), test_set.ids[i], out / "cam")


def cmd_viz_sfa(cfg, out: Path, seed: int, device) -> None:
    from .sfa import compose_maps, export_activation_maps

    v = cfg["viz"]
    gens, _ = _load_gens(_require(cfg["sfa"]["checkpoint"], "sfa.checkpoint"), device)
    _, test_set = _datasets(cfg, seed)
    n = min(v["num_samples"], len(test_set))
    x = torch.from_numpy(np.array(test_set.pixels[:n])).to(device)
    with torch.no_grad():
        pair = compose_maps(x, gens)
    export_activation_maps(pair, list(test_set.ids[:n]), out / "sfa_maps", gens.alpha)


HANDLERS = {
    "synth-data": cmd_synth_data,
    "train-model": cmd_train_model,
    "train-sfa": cmd_train_sfa,
    "attack": cmd_attack,
    "evaluate": cmd_evaluate,
    "viz-cam": cmd_viz_cam,
    "viz-sfa": cmd_viz_sfa,
}


# ---------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigurationError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="spoofprobe", description="Probe face anti-spoofing models with SFA-boosted attacks.")
    parser.add_argument("--version", action="version", version=f"spoofprobe {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    helps = {
        "synth-data": "generate the synthetic train/test splits on disk",
        "train-model": "train the multitask model",
        "train-sfa": "train SFA generators against a frozen model",
        "attack": "run attack specs and stream per-sample results",
        "evaluate": "run the evaluation sweeps and write report.json",
        "viz-cam": "write Grad-CAM overlays",
        "viz-sfa": "export SFA activation maps",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name], description=helps[name])
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", default=f"runs/{name}", help="output directory (created if absent)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted-path override, e.g. model.epochs=5; may repeat")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


CONFIG_ERRORS = (ConfigurationError, SchemaError, CheckpointError, DimensionError, FileNotFoundError)
RUNTIME_ERRORS = (NumericError, TrainingDivergenceError, ProviderError, RuntimeError, OSError, SpoofProbeError)


def run(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if not args.command:
        parser.print_help()
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        try:
            config = resolve_config(args.config, args.overrides)
            device = select_device()
        except ConfigurationError as exc:
            _write_json(out / "run-manifest.json", {"command": args.command, "config": None, "seed": args.seed,
                                                    "error": str(exc)})
            raise
        torch.manual_seed(args.seed)
        write_manifest(out, args.command, config, args.seed, device)
        HANDLERS[args.command](config, out, args.seed, device)
    except EvaluationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        # Remaining ValueErrors come from bad config values reaching constructors.
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except RUNTIME_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
