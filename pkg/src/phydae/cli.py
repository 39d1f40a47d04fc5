"""Command-line entry point.

Subcommands: ``scenes``, ``synth``, ``train``, ``eval``, ``restore``,
``gradcheck``, ``route-inspect`` and ``params``. Settings come from built-in
defaults, then an optional INI-style ``--config`` file, then flags (including
repeated ``--set section.key=value``), each layer overriding the previous.

Exit codes: 0 success, 1 user or configuration error, 2 internal invariant
violation. Errors are reported on stderr as one JSON object.
"""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import jsonschema
import numpy as np

from . import CLASS_ORDER, __version__
from .degrade import CorpusManifest, SynthRanges, build_corpus
from .image_core import ImageTensor, image_bit_depth, load_image, save_image

log = logging.getLogger("phydae")

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2


class UserError(Exception):
    """Bad input, paths or configuration (exit code 1)."""


class InvariantViolation(Exception):
    """A check the code itself guarantees did not hold (exit code 2)."""


# ----------------------------------------------------------------------
# configuration
# ----------------------------------------------------------------------
RUN_DEFAULTS = {"preset": "desk", "seed": None, "k": None, "tau": None, "image_size": None,
                "kinds": "all", "bit_depth": 16, "count": 10, "split": "test"}
PATH_KEYS = ("clean", "out", "manifest", "checkpoint")
# keys owned by [run] rather than the dataclass sections
_TRAIN_SHADOWED = {"seed", "image_size", "beta"}


def _field_schema(default) -> dict:
    if isinstance(default, bool):
        return {"type": "boolean"}
    if isinstance(default, int):
        return {"type": "integer"}
    if isinstance(default, float):
        return {"type": "number"}
    if isinstance(default, tuple):
        item = "integer" if all(isinstance(v, int) for v in default) else "number"
        return {"type": "array", "items": {"type": item}, "minItems": 1}
    return {"type": "string"}


def _dataclass_defaults(cls, skip=()) -> dict:
    obj = cls()
    return {f.name: getattr(obj, f.name) for f in fields(cls) if f.name not in skip}


def _section_defaults() -> dict[str, dict]:
    from .pipeline import ModelConfig, TrainConfig
    return {
        "run": dict(RUN_DEFAULTS),
        "paths": {k: None for k in PATH_KEYS},
        "model": _dataclass_defaults(ModelConfig),
        "train": _dataclass_defaults(TrainConfig, _TRAIN_SHADOWED),
        "synth": _dataclass_defaults(SynthRanges),
    }


def config_schema() -> dict:
    """JSON schema of the merged configuration; unknown keys are rejected."""
    sections = {}
    for name, defaults in _section_defaults().items():
        if name == "run":
            props = {
                "preset": {"enum": ["desk", "full"]},
                "seed": {"type": "integer", "minimum": 0},
                "k": {"type": "integer", "minimum": 1, "maximum": len(CLASS_ORDER)},
                "tau": {"type": "number", "exclusiveMinimum": 0},
                "image_size": {"type": "integer", "minimum": 8},
                "kinds": {"type": ["string", "integer"], "pattern": "^all$",
                          "minimum": 1, "maximum": len(CLASS_ORDER)},
                "bit_depth": {"enum": [8, 16]},
                "count": {"type": "integer", "minimum": 1},
                "split": {"type": "string"},
            }
        elif name == "paths":
            props = {k: {"type": "string"} for k in PATH_KEYS}
        else:
            props = {k: _field_schema(v) for k, v in defaults.items()}
        sections[name] = {"type": "object", "properties": props, "additionalProperties": False}
    return {"type": "object", "properties": sections, "additionalProperties": False}


def _coerce(raw: str, default, key: str):
    """Convert a config string using the default's type; leave it as a
    string on failure so schema validation reports the problem."""
    text = raw.strip()
    try:
        if isinstance(default, bool):
            states = configparser.ConfigParser.BOOLEAN_STATES
            return states[text.lower()] if text.lower() in states else text
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            parts = [p.strip() for p in text.strip("()[]").split(",") if p.strip()]
            conv = int if all(isinstance(v, int) for v in default) else float
            return [conv(p) for p in parts]
    except ValueError:
        return text
    if key in ("seed", "k", "image_size", "bit_depth", "count"):
        try:
            return int(text)
        except ValueError:
            return text
    if key == "tau":
        try:
            return float(text)
        except ValueError:
            return text
    if key == "kinds" and text != "all":
        try:
            return int(text)
        except ValueError:
            return text
    return text


def _apply(cfg: dict, defaults: dict, section: str, key: str, raw: str) -> None:
    if section not in defaults:
        raise UserError(f"unknown config section [{section}]")
    if key not in defaults[section]:
        raise UserError(f"unknown config key {section}.{key}")
    cfg[section][key] = _coerce(raw, defaults[section][key], key)


def load_config(path=None, overrides: list[str] | None = None) -> dict:
    """Merge defaults < file < ``section.key=value`` overrides and validate."""
    defaults = _section_defaults()
    cfg = {name: {} for name in defaults}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise UserError(f"config file not found: {path}")
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise UserError(f"malformed config file {path}: {exc}") from exc
        for section in parser.sections():
            for key, raw in parser.items(section):
                _apply(cfg, defaults, section, key, raw)
    for item in overrides or []:
        name, sep, raw = item.partition("=")
        section, dot, key = name.strip().partition(".")
        if not sep or not dot:
            raise UserError(f"override must look like section.key=value, got {item!r}")
        _apply(cfg, defaults, section, key, raw)
    try:
        jsonschema.validate(cfg, config_schema())
    except jsonschema.ValidationError as exc:
        where = ".".join(str(p) for p in exc.absolute_path)
        raise UserError(f"invalid config value at {where}: {exc.message}") from exc
    merged = {name: dict(defaults[name]) for name in defaults}
    for name, values in cfg.items():
        merged[name].update(values)
    # keys set by the file or overrides win over the preset's values
    merged["explicit"] = {name: set(values) for name, values in cfg.items()}
    return merged


def _flag_overrides(args) -> dict:
    """Explicit command-line flags, mapped onto config sections."""
    out = {"run": {}, "paths": {}}
    for key in ("seed", "k", "tau", "image_size", "kinds", "bit_depth", "count", "split", "preset"):
        v = getattr(args, key, None)
        if v is not None:
            out["run"][key] = v
    for key in PATH_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            out["paths"][key] = str(v)
    return out


def resolve(args) -> dict:
    cfg = load_config(args.config, args.set)
    for section, values in _flag_overrides(args).items():
        cfg[section].update(values)
    run = cfg["run"]
    if run["kinds"] != "all":
        run["kinds"] = int(run["kinds"])
        if not 1 <= run["kinds"] <= len(CLASS_ORDER):
            raise UserError("kinds must be 'all' or an integer in [1, 4]")
    if run["k"] is not None and not 1 <= run["k"] <= len(CLASS_ORDER):
        raise UserError("k must lie in [1, 4]")
    if run["tau"] is not None and not run["tau"] > 0:
        raise UserError("tau must be positive")
    return cfg


def _require(cfg: dict, section: str, key: str, flag: str):
    v = cfg[section][key]
    if v is None:
        raise UserError(f"{flag} is required (flag or [{section}] {key} in --config)")
    return v


def _model_config(cfg: dict):
    from .pipeline import ModelConfig
    base = ModelConfig.desk() if cfg["run"]["preset"] == "desk" else ModelConfig()
    changed = {k: cfg["model"][k] for k in cfg["explicit"]["model"]}
    try:
        return base.replace(**{k: tuple(v) if isinstance(v, list) else v for k, v in changed.items()})
    except ValueError as exc:
        raise UserError(str(exc)) from exc


def _train_config(cfg: dict, seed: int):
    from .pipeline import TrainConfig
    base = TrainConfig.desk() if cfg["run"]["preset"] == "desk" else TrainConfig()
    changed = {k: cfg["train"][k] for k in cfg["explicit"]["train"]}
    changed["seed"] = seed
    if cfg["run"]["image_size"] is not None:
        changed["image_size"] = cfg["run"]["image_size"]
    try:
        return base.replace(**changed)
    except ValueError as exc:
        raise UserError(str(exc)) from exc


def _synth_ranges(cfg: dict) -> SynthRanges:
    return SynthRanges(**{k: tuple(v) if isinstance(v, list) else v for k, v in cfg["synth"].items()})


# ----------------------------------------------------------------------
# helpers
# ----------------------------------------------------------------------
def _atomic_text(path: Path, text: str) -> None:
    from .pipeline.checkpoint import _atomic_write
    if not path.parent.is_dir():
        raise UserError(f"output directory missing: {path.parent}")
    _atomic_write(path, text.encode("utf-8"))


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")
    sys.stdout.flush()


def _load_model(cfg: dict):
    from .pipeline import build_model, load_checkpoint
    path = Path(_require(cfg, "paths", "checkpoint", "--checkpoint"))
    bundle = load_checkpoint(path)
    return build_model(bundle), bundle


def _manifest(cfg: dict) -> CorpusManifest:
    path = Path(_require(cfg, "paths", "manifest", "--manifest"))
    if not path.is_file():
        raise UserError(f"manifest not found: {path}")
    return CorpusManifest.read(path)


def _splits(cfg: dict) -> list[str]:
    return [s.strip() for s in cfg["run"]["split"].split(",") if s.strip()]


def _image_size(cfg: dict, bundle=None) -> int:
    """Flag or config value, else the size the checkpoint was trained at."""
    if cfg["run"]["image_size"] is not None:
        return cfg["run"]["image_size"]
    if bundle is not None and bundle.train_config is not None:
        return bundle.train_config.image_size
    return 64


# ----------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------
def cmd_scenes(cfg: dict) -> int:
    from .scenes import write_scenes
    seed = _require(cfg, "run", "seed", "--seed")
    out = Path(_require(cfg, "paths", "out", "--out"))
    paths = write_scenes(out, cfg["run"]["count"], size=_image_size(cfg), seed=seed,
                         bit_depth=cfg["run"]["bit_depth"])
    _emit({"command": "scenes", "written": len(paths), "out": str(out)})
    return EXIT_OK


def cmd_synth(cfg: dict) -> int:
    seed = _require(cfg, "run", "seed", "--seed")
    clean = Path(_require(cfg, "paths", "clean", "--clean"))
    out = Path(_require(cfg, "paths", "out", "--out"))
    if not clean.is_dir():
        raise UserError(f"clean directory not found: {clean}")
    m = build_corpus(clean, out, per_image_kinds=cfg["run"]["kinds"], seed=seed,
                     ranges=_synth_ranges(cfg), bit_depth=cfg["run"]["bit_depth"])
    counts = {s: len(m.split(s)) for s in ("train", "val", "test")}
    kinds = {k: sum(e.kind == k for e in m.entries) for k in CLASS_ORDER}
    _emit({"command": "synth", "manifest": str(out / "manifest.json"), "pairs": len(m.entries),
           "splits": counts, "kinds": kinds})
    return EXIT_OK


def cmd_train(cfg: dict, max_steps: int | None = None, epochs: int | None = None) -> int:
    from .pipeline import train
    seed = _require(cfg, "run", "seed", "--seed")
    out = Path(_require(cfg, "paths", "out", "--out"))
    manifest = _manifest(cfg)
    mc = _model_config(cfg)
    tc = _train_config(cfg, seed)
    if epochs is not None:
        tc = tc.replace(epochs=epochs)
    res = train(manifest, mc, tc, out_dir=out, max_steps=max_steps, on_step=_emit,
                on_epoch=lambda ep: log.info("epoch %s", json.dumps(ep, sort_keys=True)))
    if len(res.step_log) != res.steps:
        raise InvariantViolation("step log length differs from the step count")
    log.info("wrote %s after %d steps", res.checkpoint, res.steps)
    return EXIT_OK


def cmd_eval(cfg: dict, identity: bool = False, json_out: str | None = None) -> int:
    from .pipeline import evaluate, evaluate_identity, load_split
    model, bundle = (None, None) if identity else _load_model(cfg)
    data = load_split(_manifest(cfg), _splits(cfg), _image_size(cfg, bundle))
    if identity:
        table = evaluate_identity(data)
    else:
        table = evaluate(model, data, k=cfg["run"]["k"], tau=cfg["run"]["tau"])
    print(table.format())
    if json_out:
        _atomic_text(Path(json_out), json.dumps(table.to_dict(), indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def _pad_multiple(arr: np.ndarray, m: int) -> np.ndarray:
    h, w = arr.shape[:2]
    ph, pw = (-h) % m, (-w) % m
    if ph or pw:
        mode = "reflect" if h > ph and w > pw else "edge"
        arr = np.pad(arr, ((0, ph), (0, pw), (0, 0)), mode=mode)
    return arr


def cmd_restore(cfg: dict, inputs: list[str]) -> int:
    model, _ = _load_model(cfg)
    out = Path(_require(cfg, "paths", "out", "--out"))
    if not inputs:
        raise UserError("no input images given")
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name in inputs:
        src = Path(name)
        img = load_image(src)
        depth = image_bit_depth(src)
        arr = img.data
        gray = arr.shape[2] == 1
        if gray:
            arr = np.repeat(arr, 3, axis=2)
        h, w = arr.shape[:2]
        # three stride-2 levels need extents divisible by 8
        restored = model.restore(_pad_multiple(arr, 8)[None], k=cfg["run"]["k"],
                                 tau=cfg["run"]["tau"])[0, :h, :w]
        if gray:
            restored = restored.mean(axis=2, keepdims=True)
        if restored.shape[:2] != (h, w):
            raise InvariantViolation("restored image extents differ from the input")
        dst = out / src.name
        save_image(ImageTensor.clamp(restored), dst, bit_depth=depth)
        written.append(str(dst))
    _emit({"command": "restore", "written": written})
    return EXIT_OK


def cmd_gradcheck(cfg: dict, tolerance: float, only: list[str] | None, report_path: str | None) -> int:
    from .gradsuite import run_suite
    seed = _require(cfg, "run", "seed", "--seed")
    if not tolerance > 0:
        raise UserError("tolerance must be positive")
    try:
        rep = run_suite(tolerance=tolerance, seed=seed, only=only)
    except KeyError as exc:
        raise UserError(str(exc.args[0])) from exc
    body = json.dumps(rep.to_dict(), indent=2, sort_keys=True)
    print(body)
    if report_path:
        _atomic_text(Path(report_path), body + "\n")
    if not rep.passed:
        log.error("gradient check failed for: %s", ", ".join(rep.failing))
        return EXIT_USER
    return EXIT_OK


def cmd_route_inspect(cfg: dict) -> int:
    from .pipeline import inspect_routing, load_split
    from .router import ROUTE_TRACE_SCHEMA, dump_trace
    model, bundle = _load_model(cfg)
    out = Path(_require(cfg, "paths", "out", "--out"))
    data = load_split(_manifest(cfg), _splits(cfg), _image_size(cfg, bundle))
    k = cfg["run"]["k"] or 1
    rep = inspect_routing(model, data, k=k, tau=cfg["run"]["tau"])
    for rec in rep.records:
        jsonschema.validate(rec, ROUTE_TRACE_SCHEMA)
    if int(rep.usage.sum()) != len(data) * k:
        raise InvariantViolation("usage histogram does not sum to samples x k")
    out.mkdir(parents=True, exist_ok=True)
    dump_trace(rep.records, out / "trace.jsonl")
    summary = {
        "k": k,
        "samples": len(data),
        "usage": dict(zip(CLASS_ORDER, rep.usage.tolist())),
        "usage_cv": rep.usage_cv,
        "confusion": rep.confusion.tolist(),
        "posterior_confusion": rep.posterior_confusion.tolist(),
        "routing_accuracy": rep.accuracy,
        "posterior_accuracy": rep.posterior_accuracy,
        "classes": list(CLASS_ORDER),
    }
    _atomic_text(out / "routing.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _atomic_text(out / "confusion.txt", rep.format() + "\n")
    print(rep.format())
    return EXIT_OK


def cmd_params(cfg: dict) -> int:
    from .pipeline import cost_report
    rep = cost_report(_model_config(cfg), image_size=_image_size(cfg), k=cfg["run"]["k"])
    print(rep.format())
    return EXIT_OK


# ----------------------------------------------------------------------
# argument parsing
# ----------------------------------------------------------------------
class _Parser(argparse.ArgumentParser):
    """Usage errors are user errors: exit 1 rather than argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        _report_error("UsageError", message)
        raise SystemExit(EXIT_USER)


def _common(p: argparse.ArgumentParser, *flags: str) -> None:
    p.add_argument("--config", help="INI-style key=value file with [run] [paths] [model] [train] [synth]")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--preset", choices=["desk", "full"], default=None)
    p.add_argument("-v", "--verbose", action="store_true")
    adders = {
        "seed": lambda: p.add_argument("--seed", type=int, help="RNG seed (required for randomized commands)"),
        "out": lambda: p.add_argument("--out"),
        "manifest": lambda: p.add_argument("--manifest"),
        "checkpoint": lambda: p.add_argument("--checkpoint"),
        "k": lambda: p.add_argument("--k", type=int),
        "tau": lambda: p.add_argument("--tau", type=float),
        "image_size": lambda: p.add_argument("--image-size", dest="image_size", type=int),
        "split": lambda: p.add_argument("--split", help="split name or comma list"),
    }
    for f in flags:
        adders[f]()


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="phydae", description=__doc__.split("\n\n")[0])
    ap.add_argument("--version", action="version", version=f"phydae {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("scenes", help="write seeded synthetic clean scenes")
    _common(p, "seed", "out", "image_size")
    p.add_argument("--count", type=int)
    p.add_argument("--bit-depth", dest="bit_depth", type=int, choices=[8, 16])

    p = sub.add_parser("synth", help="synthesize a degraded corpus and manifest")
    _common(p, "seed", "out")
    p.add_argument("--clean")
    p.add_argument("--kinds", help="'all' or number of kinds per clean image")
    p.add_argument("--bit-depth", dest="bit_depth", type=int, choices=[8, 16])

    p = sub.add_parser("train", help="train a model; one JSON line per step on stdout")
    _common(p, "seed", "out", "manifest", "image_size")
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", dest="max_steps", type=int)

    p = sub.add_parser("eval", help="per-kind PSNR/SSIM table")
    _common(p, "manifest", "checkpoint", "k", "tau", "image_size", "split")
    p.add_argument("--identity", action="store_true", help="evaluate the pass-through baseline")
    p.add_argument("--json", dest="json_out")

    p = sub.add_parser("restore", help="restore PNG files")
    _common(p, "checkpoint", "out", "k", "tau")
    p.add_argument("inputs", nargs="+")

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    _common(p, "seed")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--only", action="append")
    p.add_argument("--report")

    p = sub.add_parser("route-inspect", help="routing traces, usage histogram and confusion table")
    _common(p, "checkpoint", "manifest", "out", "k", "tau", "image_size", "split")

    p = sub.add_parser("params", help="parameter and multiply-accumulate report")
    _common(p, "k", "image_size")
    return ap


def _report_error(kind: str, message: str) -> None:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # --help, --version or a usage error
        return exc.code if isinstance(exc.code, int) else EXIT_USER
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    from .pipeline import CheckpointError, TrainingDiverged
    try:
        cfg = resolve(args)
        cmd = args.command
        if cmd == "scenes":
            return cmd_scenes(cfg)
        if cmd == "synth":
            return cmd_synth(cfg)
        if cmd == "train":
            return cmd_train(cfg, args.max_steps, args.epochs)
        if cmd == "eval":
            return cmd_eval(cfg, args.identity, args.json_out)
        if cmd == "restore":
            return cmd_restore(cfg, args.inputs)
        if cmd == "gradcheck":
            return cmd_gradcheck(cfg, args.tolerance, args.only, args.report)
        if cmd == "route-inspect":
            return cmd_route_inspect(cfg)
        return cmd_params(cfg)
    except (UserError, CheckpointError, OSError, ValueError, jsonschema.ValidationError) as exc:
        _report_error(type(exc).__name__, str(exc))
        return EXIT_USER
    except (InvariantViolation, TrainingDiverged, AssertionError, FloatingPointError) as exc:
        _report_error(type(exc).__name__, str(exc))
        return EXIT_INTERNAL
    except Exception as exc:  # anything unanticipated is a bug, not a user error
        log.debug("internal error", exc_info=True)
        _report_error(type(exc).__name__, str(exc))
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
