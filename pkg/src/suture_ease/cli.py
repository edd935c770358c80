"""Command-line entry point: ``suture-ease <command> [options]``.

Every command takes ``--config FILE`` (JSON), ``--seed``, ``--threads`` and
``--out``. Values resolve as flag > config file > built-in default and the
result is written to ``<out>/config.resolved.json`` before any work starts;
passing that file back through ``--config`` repeats the run.

Exit status: 0 success, 2 usage/config, 3 data/format, 4 numeric divergence.
Errors go to stderr as one JSON line ``{"code", "message", "context"}``.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

from threadpoolctl import threadpool_limits

from .errors import ConfigError, ContractError, DataError, EaseError

RESOLVED_NAME = "config.resolved.json"
_PATH_KEYS = ("manifest", "out", "checkpoint", "clip", "routes", "reports")

DEFAULTS = {
    "gen-synth": {"task": "hold_angle", "n_videos": 8, "stitches_per_video": 4, "resolution": [32, 32],
                  "noise_std": 0.05, "seed": 0, "out": None, "threads": None},
    "split": {"manifest": None, "test_fraction": 0.2, "seed": 0, "out": None, "threads": None},
    "train": {"domain": None, "manifest": None, "out": None, "epochs": 10, "batch_size": 8,
              "learning_rate": 1e-4, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8, "weight_decay": 0.0,
              "seed": 0, "augmentation": "default", "family": None, "resolution": None, "model": {},
              "schedule": "constant", "test_fraction": 0.2, "threads": None, "plot": True},
    "eval": {"checkpoint": None, "manifest": None, "domain": None, "routes": None, "reports": [],
             "n_bootstrap": 2000, "seed": 0, "split": "test", "table": False, "out": None, "threads": None,
             "plot": True},
    "predict": {"domain": None, "clip": None, "checkpoint": None, "routes": None, "resolution": None,
                "threshold": 0.5, "seed": 0, "out": None, "threads": None},
    "routes": {"resolution": None, "seed": 0, "out": None, "threads": None},
}


class UsageError(ContractError):
    code = "usage"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message, prog=self.prog)


def _common(p):
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, help="cap on BLAS/worker threads (default: all cores)")
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="suture-ease", description="Skill-domain video scoring on synthetic or real clips.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-synth", help="write a synthetic clip dataset and manifest")
    _common(p)
    p.add_argument("--task", choices=("reposition_count", "hold_angle", "smooth_vs_jerky"))
    p.add_argument("--n-videos", dest="n_videos", type=int)
    p.add_argument("--stitches", dest="stitches_per_video", type=int)
    p.add_argument("--resolution", type=int, nargs=2, metavar=("H", "W"))
    p.add_argument("--noise-std", dest="noise_std", type=float)

    p = sub.add_parser("split", help="assign train/test splits by video")
    _common(p)
    p.add_argument("--manifest")
    p.add_argument("--test-fraction", dest="test_fraction", type=float)

    p = sub.add_parser("train", help="train the routed model for one domain")
    _common(p)
    p.add_argument("--domain")
    p.add_argument("--manifest")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--family", choices=("MViTv2", "CNN3D"))
    p.add_argument("--resolution", type=int, nargs=2, metavar=("H", "W"))
    p.add_argument("--augment", dest="augmentation", choices=("none", "default", "flip"))
    p.add_argument("--schedule", choices=("constant", "cosine"))
    p.add_argument("--test-fraction", dest="test_fraction", type=float)
    p.add_argument("--no-plot", dest="plot", action="store_false", default=None)

    p = sub.add_parser("eval", help="AUC with bootstrap interval on the test split")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--domain")
    p.add_argument("--routes", help="routes file; evaluates every route that has a checkpoint")
    p.add_argument("--reports", nargs="*", help="existing report files to include in --table")
    p.add_argument("--n-bootstrap", dest="n_bootstrap", type=int)
    p.add_argument("--split", choices=("train", "test"))
    p.add_argument("--table", action="store_true", default=None, help="print all 7 domains as a table")
    p.add_argument("--no-plot", dest="plot", action="store_false", default=None)

    p = sub.add_parser("predict", help="score one clip")
    _common(p)
    p.add_argument("--domain")
    p.add_argument("--clip")
    p.add_argument("--checkpoint", help="use this checkpoint instead of the routes file entry")
    p.add_argument("--routes")
    p.add_argument("--resolution", type=int, nargs=2, metavar=("H", "W"))
    p.add_argument("--threshold", type=float)

    p = sub.add_parser("routes", help="print the domain routes")
    _common(p)
    p.add_argument("--resolution", type=int, nargs=2, metavar=("H", "W"), help="desk-scale geometry override")
    return parser


# ------------------------------------------------------------------ config resolution


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS[command])
    if args.config:
        path = Path(args.config)
        try:
            loaded = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}", path=str(path)) from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object", path=str(path))
        if loaded.get("command", command) != command:
            raise ConfigError(f"config was resolved for {loaded['command']!r}, not {command!r}")
        loaded.pop("command", None)
        unknown = set(loaded) - set(cfg)
        if unknown:
            raise ConfigError(f"unknown config keys for {command}: {sorted(unknown)}", path=str(path))
        base = path.parent
        for key in _PATH_KEYS:
            if isinstance(loaded.get(key), str):
                loaded[key] = str((base / loaded[key]).resolve())
            elif key == "reports" and loaded.get(key):
                loaded[key] = [str((base / p).resolve()) for p in loaded[key]]
        cfg.update(loaded)
    for key, value in vars(args).items():
        if key in cfg and value is not None:
            cfg[key] = value
    for key in _PATH_KEYS:
        if isinstance(cfg.get(key), str):
            cfg[key] = str(Path(cfg[key]).resolve())
        elif key == "reports" and cfg.get(key):
            cfg[key] = [str(Path(p).resolve()) for p in cfg[key]]
    return cfg


def _require(cfg: dict, *keys):
    missing = [k for k in keys if cfg.get(k) in (None, "")]
    if missing:
        raise UsageError(f"missing required option(s): {', '.join('--' + k.replace('_', '-') for k in missing)}")


def _echo_config(command: str, cfg: dict) -> Optional[Path]:
    if not cfg.get("out"):
        return None
    out = Path(cfg["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}", path=str(out)) from exc
    path = out / RESOLVED_NAME
    path.write_text(json.dumps({"command": command, **cfg}, indent=2, sort_keys=True) + "\n")
    return path


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


# ------------------------------------------------------------------ commands


def cmd_gen_synth(cfg):
    from .synth import SynthSpec, gen_dataset

    _require(cfg, "out")
    spec = SynthSpec(cfg["task"], cfg["n_videos"], cfg["stitches_per_video"], tuple(cfg["resolution"]),
                     cfg["noise_std"], cfg["seed"])
    manifest = gen_dataset(spec, cfg["out"])
    _emit({"manifest": str(manifest), "records": spec.n_videos * spec.stitches_per_video})


def cmd_split(cfg):
    from .data import read_manifest, split_videos, write_manifest

    _require(cfg, "manifest", "out")
    records = split_videos(read_manifest(cfg["manifest"]), cfg["test_fraction"], cfg["seed"])
    path = write_manifest(records, Path(cfg["out"]) / "manifest.jsonl")
    videos = {s: sorted({r.video_id for r in records if r.split == s}) for s in ("train", "test")}
    _emit({"manifest": str(path), "train_videos": len(videos["train"]), "test_videos": len(videos["test"]),
           "train_records": sum(r.split == "train" for r in records),
           "test_records": sum(r.split == "test" for r in records)})


def _augmentation(value):
    from .data import AugmentPolicy

    if isinstance(value, dict):
        return AugmentPolicy.from_dict(value)
    presets = {"none": AugmentPolicy(), "default": AugmentPolicy.default(),
               "flip": AugmentPolicy(hflip_p=0.5, vflip_p=0.5)}
    if value not in presets:
        raise ConfigError(f"augmentation must be one of {sorted(presets)} or an object, got {value!r}")
    return presets[value]


def cmd_train(cfg):
    from .training import TrainConfig, train

    _require(cfg, "domain", "manifest", "out")
    tc = TrainConfig(
        domain=cfg["domain"], manifest=cfg["manifest"], output=cfg["out"], epochs=cfg["epochs"],
        batch_size=cfg["batch_size"], learning_rate=cfg["learning_rate"], beta1=cfg["beta1"], beta2=cfg["beta2"],
        eps=cfg["eps"], weight_decay=cfg["weight_decay"], seed=cfg["seed"],
        augmentation=_augmentation(cfg["augmentation"]), family=cfg["family"], resolution=cfg["resolution"],
        model=cfg["model"] or {}, schedule=cfg["schedule"], test_fraction=cfg["test_fraction"],
        threads=cfg["threads"],
    )
    result = train(tc, on_epoch=lambda e: print(json.dumps(e), file=sys.stderr))
    if cfg["plot"]:
        from .plotting import plot_history

        plot_history(result.history, Path(cfg["out"]) / "history.png")
    _emit({"checkpoint": str(result.checkpoint), "best_epoch": result.best_epoch, "best_test_auc": result.best_auc})


def cmd_eval(cfg):
    from .evaluation import evaluate, format_table, format_tsv, read_report, roc_curve, write_report
    from .router import load_routes

    out = Path(cfg["out"]) if cfg["out"] else None
    reports = [read_report(p) for p in cfg["reports"] or []]
    jobs = []
    if cfg["checkpoint"]:
        _require(cfg, "manifest", "domain")
        jobs.append((cfg["domain"], cfg["checkpoint"]))
    if cfg["routes"]:
        _require(cfg, "manifest")
        jobs.extend((r.domain, r.checkpoint) for r in load_routes(cfg["routes"]) if r.checkpoint)
    if not jobs and not reports:
        raise UsageError("eval needs --checkpoint, --routes or --reports")
    for domain, ckpt in jobs:
        report, scores, labels = evaluate(ckpt, cfg["manifest"], domain, cfg["seed"], cfg["n_bootstrap"],
                                          cfg["split"])
        reports.append(report)
        if out is not None:
            slug = report.domain.replace(": ", "__").replace(" ", "_")
            write_report(report, out / f"report_{slug}.json")
            if cfg["plot"]:
                from .plotting import plot_roc

                fpr, tpr = roc_curve(scores, labels)
                plot_roc(fpr, tpr, report.auc, out / f"roc_{slug}.png", report.domain)
        if not cfg["table"]:
            _emit(report.to_dict())
    if out is not None and len(jobs) == 1:
        write_report(reports[-1], out / "report.json")
    if cfg["table"]:
        print(format_table(reports))
        if out is not None:
            (out / "table.tsv").write_text(format_tsv(reports))
            if cfg["plot"]:
                from .plotting import plot_auc_table

                plot_auc_table(reports, out / "auc_table.png")


def _route_for_checkpoint(cfg):
    from .models import load_checkpoint
    from .router import RouteEntry, default_routes, resolve

    model = load_checkpoint(cfg["checkpoint"])
    entry = resolve(default_routes(), cfg["domain"])
    res = tuple(cfg["resolution"]) if cfg["resolution"] else (model.config.height, model.config.width)
    return [RouteEntry(entry.domain, entry.family, res, entry.frames, cfg["checkpoint"])], model


def cmd_predict(cfg):
    from .router import load_routes, predict

    _require(cfg, "domain", "clip")
    if not Path(cfg["clip"]).exists():
        raise DataError(f"clip not found: {cfg['clip']}", path=cfg["clip"])
    if cfg["checkpoint"]:
        if not Path(cfg["checkpoint"]).exists():
            raise DataError(f"checkpoint not found: {cfg['checkpoint']}", path=cfg["checkpoint"])
        routes, model = _route_for_checkpoint(cfg)
    elif cfg["routes"]:
        routes, model = load_routes(cfg["routes"]), None
    else:
        raise UsageError("predict needs --checkpoint or --routes")
    pred = predict(routes, cfg["domain"], cfg["clip"], model=model, threshold=cfg["threshold"])
    _emit({"score": pred.score, "decision": pred.decision})


def cmd_routes(cfg):
    from .router import default_routes, save_routes, with_overrides

    routes = default_routes()
    if cfg["resolution"]:
        routes = with_overrides(routes, resolution=cfg["resolution"])
    for r in routes:
        h, w = r.resolution
        print(f"{r.domain.canonical}\t{r.family}\t{r.frames}x{h}x{w}")
    if cfg["out"]:
        save_routes(routes, Path(cfg["out"]) / "routes.json")


COMMANDS = {"gen-synth": cmd_gen_synth, "split": cmd_split, "train": cmd_train, "eval": cmd_eval,
            "predict": cmd_predict, "routes": cmd_routes}


def _fail(exc: EaseError) -> int:
    payload = {"code": exc.code, "message": exc.message,
               "context": {k: v for k, v in exc.context.items() if v is not None}}
    print(json.dumps(payload, default=str), file=sys.stderr)
    return exc.exit_code


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required", commands=sorted(COMMANDS))
        cfg = resolve_config(args.command, args)
        _echo_config(args.command, cfg)
        with threadpool_limits(limits=cfg.get("threads")):
            COMMANDS[args.command](cfg)
        return 0
    except EaseError as exc:
        return _fail(exc)
    except OSError as exc:
        return _fail(DataError(str(exc), path=getattr(exc, "filename", None)))


if __name__ == "__main__":
    sys.exit(main())
