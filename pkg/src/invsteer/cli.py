"""Command-line pipeline: ``invsteer {generate,train,eval,sweep,gradcheck,report}``.

All artifacts go under ``--out`` together with a ``manifest-<command>.json``.
Exit codes: 0 success, 2 configuration error, 3 training failure,
4 evaluation failure.
"""

import argparse
import hashlib
import json
import logging
import platform
import sys
import time
from dataclasses import asdict, fields
from importlib import metadata
from pathlib import Path

import numpy as np
import torch

from .evaluation import (
    METHODS,
    dim_ablation,
    dim_actadd,
    evaluate_method,
    feature_clamp,
    layer_sweep,
    loss_site_shift,
    no_intervention,
)
from .exceptions import InvalidArgumentError, InversionError, NoSupervisionError, TrainingError
from .subject import ContrastiveDataset, SubjectConfig, build_subject, generate_dataset, load_subject
from .train import NonlinearSteering, TrainConfig, grad_check

logger = logging.getLogger("invsteer")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_TRAIN = 3
EXIT_EVAL = 4

DEFAULTS = {
    "subject": asdict(SubjectConfig()),
    "data": {"n_pos": 100, "n_neg": 100, "seed": 8, "test_fraction": 0.5},
    "train": TrainConfig().to_dict(),
    "eval": {"methods": list(METHODS), "grad_check_probes": 50},
}


class ConfigError(Exception):
    pass


class EvalError(Exception):
    pass


# ---- configuration ---------------------------------------------------------


def _merge(section, base, override):
    unknown = set(override) - set(base)
    if unknown:
        raise ConfigError(f"unknown field(s) in '{section}': {', '.join(sorted(unknown))}")
    out = dict(base)
    out.update(override)
    return out


def resolve_config(path=None, seed=None, layer=None, tau=None):
    """Defaults, then the JSON document at ``path``, then flag overrides."""
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
    unknown = set(doc) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
    cfg = {k: _merge(k, v, doc.get(k, {})) for k, v in DEFAULTS.items()}
    if seed is not None:
        cfg["subject"]["seed"] = seed
        cfg["data"]["seed"] = seed + 1
        cfg["train"]["seed"] = seed
    if layer is not None:
        cfg["train"]["layer"] = layer
    if tau is not None:
        cfg["train"]["tau"] = tau
    _validate(cfg)
    return cfg


def _field_check(section, obj, build):
    try:
        return build(obj)
    except (InvalidArgumentError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{section}' config: {exc}") from exc


def _validate(cfg):
    numeric = {f.name for f in fields(SubjectConfig) if f.name != "radius_range"}
    for key in numeric:
        if not isinstance(cfg["subject"][key], (int, float)) or isinstance(cfg["subject"][key], bool):
            raise ConfigError(f"subject.{key} must be a number, got {cfg['subject'][key]!r}")
    cfg["subject"]["radius_range"] = list(cfg["subject"]["radius_range"])
    _field_check("subject", cfg["subject"], lambda o: _subject_config(o).validate())
    _field_check("train", cfg["train"], lambda o: TrainConfig.from_dict(o).validate())
    data = cfg["data"]
    for key in ("n_pos", "n_neg", "seed"):
        if not isinstance(data[key], int) or isinstance(data[key], bool) or data[key] < (0 if key == "seed" else 1):
            raise ConfigError(f"data.{key} must be a {'non-negative' if key == 'seed' else 'positive'} integer")
    if not 0.0 < data["test_fraction"] < 1.0:
        raise ConfigError("data.test_fraction must lie in (0, 1)")
    bad = [m for m in cfg["eval"]["methods"] if m not in METHODS]
    if bad:
        raise ConfigError(f"eval.methods contains unknown method(s): {', '.join(bad)}")


def _subject_config(obj):
    obj = dict(obj)
    obj["radius_range"] = tuple(obj["radius_range"])
    return SubjectConfig(**obj)


def config_hash(cfg):
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


# ---- artifacts -------------------------------------------------------------


def _sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _versions():
    out = {"python": platform.python_version(), "numpy": np.__version__, "torch": torch.__version__}
    try:
        out["invsteer"] = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        out["invsteer"] = "unknown"
    return out


def write_manifest(out, command, cfg, artifacts, started, extra=None):
    manifest = {
        "command": command,
        "config_hash": config_hash(cfg),
        "config": cfg,
        "seed": cfg["subject"]["seed"],
        "artifacts": {name: {"path": str(p), "sha256": _sha(p)} for name, p in artifacts.items()},
        "versions": _versions(),
        "wall_clock": time.perf_counter() - started,
    }
    manifest.update(extra or {})
    path = out / f"manifest-{command}.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def _dump(path, obj):
    path.write_text(json.dumps(obj, indent=1, sort_keys=True))
    return path


def _subject_and_data(cfg, out):
    """Reuse ``subject.json`` / ``dataset.jsonl`` under ``out`` when present, else build them."""
    sp, dp = out / "subject.json", out / "dataset.jsonl"
    if sp.exists() and dp.exists():
        return load_subject(sp), ContrastiveDataset.from_jsonl(dp), {}
    subject = build_subject(_subject_config(cfg["subject"]))
    d = cfg["data"]
    dataset = generate_dataset(subject, d["n_pos"], d["n_neg"], d["seed"], d["test_fraction"])
    subject.save(sp)
    dataset.to_jsonl(dp)
    return subject, dataset, {"subject": sp, "dataset": dp}


def _train_model(cfg, subject, dataset, feature_map="iresnet"):
    tc = TrainConfig.from_dict({**cfg["train"], "feature_map": feature_map})
    est = NonlinearSteering(subject=subject, **_estimator_params(tc))
    est.fit(dataset)
    return est


def _estimator_params(tc):
    return {
        "layer": tc.layer, "position": tc.position, "coords": tuple(tc.coords), "tau": tc.tau,
        "feature_map": tc.feature_map, "n_blocks": tc.n_blocks, "width": tc.width,
        "kappa": tc.kappa, "negative_slope": tc.negative_slope, "max_iter": tc.max_iter,
        "tol": tc.tol, "lr": tc.lr, "steps": tc.steps, "batch_size": tc.batch_size,
        "random_state": tc.seed,
    }


def _model(cfg, out, subject, dataset, feature_map, artifacts):
    name = "model.json" if feature_map == "iresnet" else "model-linear.json"
    path = out / name
    if path.exists():
        return NonlinearSteering.load(path, subject=subject)
    est = _train_model(cfg, subject, dataset, feature_map)
    est.save(path)
    artifacts[name[:-5]] = path
    return est


# ---- commands --------------------------------------------------------------


def cmd_generate(cfg, out, args):
    subject = build_subject(_subject_config(cfg["subject"]))
    d = cfg["data"]
    dataset = generate_dataset(subject, d["n_pos"], d["n_neg"], d["seed"], d["test_fraction"])
    arts = {"subject": out / "subject.json", "dataset": out / "dataset.jsonl"}
    subject.save(arts["subject"])
    dataset.to_jsonl(arts["dataset"])
    return arts, {"subject_checksum": subject.checksum()}


def cmd_train(cfg, out, args):
    subject, dataset, arts = _subject_and_data(cfg, out)
    tc = TrainConfig.from_dict(cfg["train"])
    est = NonlinearSteering(subject=subject, **_estimator_params(tc)).fit(dataset)
    arts["model"] = out / "model.json"
    est.save(arts["model"])
    arts["loss_sites"] = out / "loss_sites.json"
    est.loss_sites_.to_json(arts["loss_sites"])
    report = est.report_.to_dict()
    wall = report.pop("wall_clock")
    if args.grad_check:
        report["grad_check"] = grad_check(subject, dataset, tc, cfg["eval"]["grad_check_probes"],
                                          fmap=est.fmap_, loss_sites=est.loss_sites_)
    arts["train_report"] = _dump(out / "train_report.json", report)
    return arts, {"train_seconds": wall, "final_loss": report["final_loss"],
                  "initial_loss": report["initial_loss"]}


def build_method(name, cfg, out, subject, dataset, arts):
    if name == "none":
        return no_intervention()
    if name == "dim-ablate":
        return dim_ablation(subject, dataset)
    if name == "dim-actadd":
        return dim_actadd(subject, dataset)
    kind = "linear" if name == "linear-fmap" else "iresnet"
    est = _model(cfg, out, subject, dataset, kind, arts)
    if name == "linear-at-loss-sites":
        return loss_site_shift(est.loss_sites_)
    return feature_clamp(est.fmap_, est.site_, est.mu_bar_plus_, est.coords[0], name=name)


def cmd_eval(cfg, out, args):
    subject, dataset, arts = _subject_and_data(cfg, out)
    methods = {name: build_method(name, cfg, out, subject, dataset, arts) for name in cfg["eval"]["methods"]}
    try:
        metrics = {name: evaluate_method(subject, m, dataset.X_neg_test) for name, m in methods.items()}
    except (InvalidArgumentError, InversionError) as exc:
        raise EvalError(str(exc)) from exc
    arts["metrics"] = _dump(out / "metrics.json", metrics)
    return arts, {"rates": {k: v["rate"] for k, v in metrics.items()}}


def cmd_sweep(cfg, out, args):
    subject, dataset, arts = _subject_and_data(cfg, out)
    result = layer_sweep(subject, dataset, TrainConfig.from_dict(cfg["train"]))
    arts["sweep_csv"] = out / "sweep.csv"
    result.to_csv(arts["sweep_csv"])
    arts["sweep"] = _dump(out / "sweep.json", result.to_dict())
    return arts, {"peak_layer": result.best_layer}


def cmd_gradcheck(cfg, out, args):
    subject, dataset, arts = _subject_and_data(cfg, out)
    tc = TrainConfig.from_dict(cfg["train"])
    model_path = out / "model.json"
    fmap = loss_sites = None
    if model_path.exists():
        est = NonlinearSteering.load(model_path, subject=subject)
        fmap, loss_sites = est.fmap_, est.loss_sites_
    n = cfg["eval"]["grad_check_probes"]
    err = grad_check(subject, dataset, tc, n, fmap=fmap, loss_sites=loss_sites)
    arts["gradcheck"] = _dump(out / "gradcheck.json", {"max_rel_error": err, "n_probes": n,
                                                         "trained": fmap is not None})
    return arts, {"max_rel_error": err}


def cmd_report(cfg, out, args):
    """Collect whatever metrics exist under ``--out`` into one JSON and a Markdown table."""
    parts = {}
    for name in ("metrics", "sweep", "train_report", "gradcheck"):
        p = out / f"{name}.json"
        if p.exists():
            parts[name] = json.loads(p.read_text())
    if not parts:
        raise EvalError(f"no results found under {out}; run train/eval/sweep first")
    lines = ["# Steering report", ""]
    if "metrics" in parts:
        lines += ["| method | compliance | sites/example | mean L2 |", "|---|---|---|---|"]
        for name, m in parts["metrics"].items():
            lines.append(f"| {name} | {m['rate']:.3f} | {m['mean_sites']:.1f} | {m['mean_l2']:.3f} |")
        rates = {k: v["rate"] for k, v in parts["metrics"].items()}
        if "linear-fmap" in rates and "nonlinear-clamp" in rates:
            parts["map_ablation"] = {"linear": rates["linear-fmap"], "nonlinear": rates["nonlinear-clamp"]}
            lines += ["", f"Linear map vs i-ResNet: {rates['linear-fmap']:.3f} vs {rates['nonlinear-clamp']:.3f}"]
        lines.append("")
    if "sweep" in parts:
        lines += ["| layer | compliance | mean L2 |", "|---|---|---|"]
        for r in parts["sweep"]["rows"]:
            lines.append(f"| {r['layer']} | {r['rate']:.3f} | {r['magnitude']:.3f} |")
        lines += ["", f"Peak layer: {parts['sweep']['best_layer']}", ""]
    if "train_report" in parts:
        t = parts["train_report"]
        lines.append(f"Training loss {t['initial_loss']:.4f} -> {t['final_loss']:.4f}, "
                     f"{t['n_loss_sites']} loss sites, {t['skipped_pairs']} skipped pairs")
    if "gradcheck" in parts:
        lines.append(f"Gradient check: max relative error {parts['gradcheck']['max_rel_error']:.3g}")
    arts = {"report": _dump(out / "report.json", parts), "report_md": out / "report.md"}
    arts["report_md"].write_text("\n".join(lines) + "\n")
    return arts, {}


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "gradcheck": cmd_gradcheck,
    "report": cmd_report,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="invsteer", description="Train and evaluate invertible feature-map steering on a planted subject.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", type=Path, help="JSON config document")
    parser.add_argument("--seed", type=int, help="seed for subject, data and training")
    parser.add_argument("--out", type=Path, default=Path("runs/default"), help="output directory")
    parser.add_argument("--threads", type=int, default=1, help="torch CPU threads (1 for bitwise determinism)")
    parser.add_argument("--layer", type=int, help="intervention layer")
    parser.add_argument("--tau", type=float, help="loss-site AUC threshold")
    parser.add_argument("--grad-check", action="store_true", help="train: append a gradient check")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.perf_counter()
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        if args.seed is not None and not 0 <= args.seed < 2 ** 64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        torch.set_num_threads(args.threads)
        cfg = resolve_config(args.config, args.seed, args.layer, args.tau)
        args.out.mkdir(parents=True, exist_ok=True)
        arts, extra = COMMANDS[args.command](cfg, args.out, args)
        write_manifest(args.out, args.command, cfg, arts, started, extra)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingError, NoSupervisionError) as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    except (EvalError, InversionError) as exc:
        print(f"evaluation failed: {exc}", file=sys.stderr)
        return EXIT_EVAL
    except InvalidArgumentError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
