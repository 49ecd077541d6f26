"""Command-line entry point.

Subcommands: gen-data, train, register, evaluate, ablate, heatmap.  Logs go
to stderr, results to files.  Exit codes: 0 success, 1 user error (bad flags,
missing files, invalid values), 2 runtime failure (no consensus, divergence).

Every command writes a run.json manifest of its fully resolved options;
``sweepreg --from-manifest <run.json>`` re-executes it identically.  An
optional ``--config file.json`` supplies option defaults; explicit flags win.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

logger = logging.getLogger("sweepreg")


class UserError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits 2; spec wants 1
        raise UserError(message)


def _apply_threads(n: int | None) -> None:
    if not n:
        return
    import threadpoolctl
    threadpoolctl.threadpool_limits(limits=int(n))
    logger.info("BLAS thread pools limited to %d", n)


def _load_config_defaults(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise UserError(f"config file not found: {path}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UserError(f"config file {path} is not valid JSON: {exc}")
    if not isinstance(doc, dict):
        raise UserError(f"config file {path} must hold a JSON object")
    return doc


def _resolve(args: argparse.Namespace, defaults: dict, keys: list[str]) -> dict:
    """defaults < --config file < explicit flags (None marks 'not given')."""
    file_defaults = _load_config_defaults(getattr(args, "config", None))
    for k in file_defaults:
        if k not in keys:
            raise UserError(f"unknown option {k!r} in config file")
    opts = dict(defaults)
    opts.update(file_defaults)
    for k in keys:
        v = getattr(args, k.replace("-", "_"), None)
        if v is not None:
            opts[k] = v
    return opts


def _onoff(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError(f"expected 'on' or 'off', got {value!r}")
    return value == "on"


def _parse_gates(text: str) -> list[list[float]]:
    gates = []
    try:
        for part in text.split(","):
            rot, trans = part.split(":")
            gates.append([float(rot), float(trans)])
    except ValueError:
        raise UserError(f"bad gate spec {text!r}, expected 'ROT:TRANS,ROT:TRANS'")
    return gates


def _check_dir(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise UserError(f"{what} directory not found: {path}")
    return p


def _fold_ids(data_dir: Path, fold: int, folds: int, split: str) -> list[str]:
    from .synthdata import load_dataset_index
    index = load_dataset_index(data_dir)
    ids = [e["id"] for e in index["samples"]]
    if not 0 <= fold < folds:
        raise UserError(f"fold {fold} out of range for {folds} folds")
    def bucket(sid: str) -> int:
        return int(hashlib.md5(sid.encode()).hexdigest(), 16) % folds
    if split == "test":
        return [s for s in ids if bucket(s) == fold]
    return [s for s in ids if bucket(s) != fold]


# ---------------------------------------------------------------------------
# handlers (each takes a fully resolved, JSON-serializable option dict)

def _run_gen_data(opts: dict) -> int:
    from .pipeline import write_run_manifest
    from .synthdata import PhantomSpec, generate_dataset
    _apply_threads(opts.get("threads"))
    spec_kw = dict(opts.get("spec") or {})
    spec_kw.setdefault("seed", opts["seed"])
    if opts.get("dims"):
        spec_kw["volume_dims"] = (opts["dims"],) * 3
    if opts.get("frames"):
        spec_kw["n_frames"] = opts["frames"]
    if opts.get("frame-dims"):
        spec_kw["frame_dims"] = (opts["frame-dims"],) * 2
    if opts.get("deform-mm") is not None:
        spec_kw["deformation_mm"] = opts["deform-mm"]
    if opts.get("fan-correlation"):
        spec_kw["fan_correlation"] = opts["fan-correlation"]
    try:
        spec = PhantomSpec.from_dict(spec_kw)
    except (TypeError, ValueError) as exc:
        raise UserError(f"invalid phantom spec: {exc}")
    out = Path(opts["out"])
    index = generate_dataset(spec, opts["samples"], out)
    write_run_manifest(out, "gen-data", opts)
    logger.info("wrote %d samples to %s", index["n_samples"], out)
    return 0


def _run_train(opts: dict) -> int:
    from .pipeline import TrainConfig, train, write_run_manifest
    _apply_threads(opts.get("threads"))
    _check_dir(opts["data"], "dataset")
    cfg = TrainConfig(
        data_dir=opts["data"], variant=opts["variant"], steps=opts["steps"],
        learning_rate=opts["lr"], seed=opts["seed"], beta=opts["beta"],
        sink_policy=opts["sink-policy"], temperature=opts["temperature"],
        polycrop_enabled=opts["polycrop"], noise_sigma=opts["noise-sigma"],
        crop_enabled=opts["crop"], class_balance_ratio=opts["balance-ratio"],
        checkpoint_interval=opts["checkpoint-interval"],
        match_threshold=opts["threshold"], log_every=opts["log-every"])
    out = Path(opts["out"])
    write_run_manifest(out, "train", opts)
    ckpt = train(cfg, out)
    logger.info("final checkpoint: %s", ckpt)
    return 0


def _ransac_from_opts(opts: dict):
    from .geometry import RansacConfig
    return RansacConfig(iterations=opts["iterations"],
                        inlier_threshold_mm=opts["inlier-mm"],
                        seed=opts["ransac-seed"])


def _run_register(opts: dict) -> int:
    from .geometry import pose_error
    from .pipeline import register, write_run_manifest
    from .synthdata import load_sample
    from .pipeline import _reference_points
    _apply_threads(opts.get("threads"))
    _check_dir(opts["ckpt"], "checkpoint")
    case = _check_dir(opts["case"], "case")
    result = register(opts["ckpt"], case, opts["mode"],
                      match_threshold=opts.get("threshold"),
                      ransac=_ransac_from_opts(opts))
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    doc = result.to_dict()
    sample = load_sample(case)
    if sample.gt_registration is not None:
        rot, trans = pose_error(result.pose, sample.gt_registration,
                                _reference_points(sample))
        doc["rot_error_deg"] = rot
        doc["trans_error_mm"] = trans
        logger.info("pose error vs ground truth: %.2f deg / %.2f mm", rot, trans)
    (out / "result.json").write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    with open(out / "matches.jsonl", "w") as fh:
        for ms in result.match_sets:
            fh.write(ms.to_jsonl())
    write_run_manifest(out, "register", opts)
    logger.info("registered %s [%s]: %d matches, %d inliers -> %s",
                case.name, opts["mode"], result.n_matches,
                len(result.inlier_indices), out / "result.json")
    return 0


def _run_evaluate(opts: dict) -> int:
    from .pipeline import evaluate, write_run_manifest
    _apply_threads(opts.get("threads"))
    _check_dir(opts["ckpt"], "checkpoint")
    data = _check_dir(opts["data"], "dataset")
    if opts.get("ids"):
        ids = [s for s in opts["ids"].split(",") if s]
    elif opts.get("fold") is not None:
        ids = _fold_ids(data, opts["fold"], opts["folds"], opts["split"])
        if not ids:
            raise UserError(f"fold {opts['fold']}/{opts['folds']} selects no samples")
    else:
        ids = None
    gates = tuple(tuple(g) for g in (opts["gates"] if isinstance(opts["gates"], list)
                                     else _parse_gates(opts["gates"])))
    opts["gates"] = [list(g) for g in gates]
    modes = tuple(opts["modes"].split(",")) if isinstance(opts["modes"], str) \
        else tuple(opts["modes"])
    for m in modes:
        if m not in ("all", "single"):
            raise UserError(f"bad mode {m!r}, expected 'all' or 'single'")
    out = Path(opts["out"])
    report = evaluate(opts["ckpt"], data, sample_ids=ids, modes=modes, gates=gates,
                      ransac=_ransac_from_opts(opts),
                      match_threshold=opts.get("threshold"), out_dir=out)
    write_run_manifest(out, "evaluate", opts)
    sys.stderr.write(report.render())
    return 0


def _run_ablate(opts: dict) -> int:
    from .pipeline import (AblationArm, DEFAULT_ARMS, TrainConfig, ablation_run,
                           write_run_manifest)
    _apply_threads(opts.get("threads"))
    _check_dir(opts["data"], "train dataset")
    _check_dir(opts["eval-data"], "eval dataset")
    write_run_manifest(opts["out"], "ablate", opts)
    base = TrainConfig(data_dir=opts["data"], steps=opts["steps"], seed=opts["seed"],
                       learning_rate=opts["lr"], beta=opts["beta"],
                       noise_sigma=opts["noise-sigma"],
                       match_threshold=opts["threshold"], log_every=opts["log-every"])
    if opts.get("arms"):
        arms = []
        for name in opts["arms"].split(","):
            match = [a for a in DEFAULT_ARMS if a.name == name]
            if not match:
                raise UserError(f"unknown ablation arm {name!r}; known: "
                                f"{[a.name for a in DEFAULT_ARMS]}")
            arms.append(match[0])
    else:
        arms = list(DEFAULT_ARMS)
    report = ablation_run(base, opts["eval-data"], opts["out"], arms=arms,
                          ransac=_ransac_from_opts(opts))
    sys.stderr.write(report.render())
    return 0


def _run_heatmap(opts: dict) -> int:
    from .pipeline import export_heatmap, write_run_manifest
    _apply_threads(opts.get("threads"))
    _check_dir(opts["ckpt"], "checkpoint")
    _check_dir(opts["case"], "case")
    out = Path(opts["out"])
    summary = export_heatmap(opts["ckpt"], opts["case"], opts["frame"], opts["cell"],
                             out, match_threshold=opts.get("threshold"))
    write_run_manifest(out, "heatmap", opts)
    logger.info("heatmap for frame %d cell %d: argmax cell %d -> %s",
                summary["frame_index"], summary["us_cell"],
                summary["argmax_cell"], out)
    return 0


_HANDLERS = {"gen-data": _run_gen_data, "train": _run_train,
             "register": _run_register, "evaluate": _run_evaluate,
             "ablate": _run_ablate, "heatmap": _run_heatmap}

_GEN_DEFAULTS = {"samples": 10, "seed": 0, "dims": None, "frames": None,
                 "frame-dims": None, "deform-mm": None, "fan-correlation": None,
                 "spec": None, "threads": None}
_TRAIN_DEFAULTS = {"variant": "standard", "steps": 2000, "lr": 1e-3, "seed": 0,
                   "beta": 1.0, "sink-policy": "outside_only", "temperature": 1.0,
                   "polycrop": True, "noise-sigma": 0.02, "crop": True,
                   "balance-ratio": 0.5, "checkpoint-interval": 1000,
                   "threshold": 0.2, "log-every": 25, "threads": None}
_RANSAC_DEFAULTS = {"iterations": 1000, "inlier-mm": 10.0, "ransac-seed": 0}
_REGISTER_DEFAULTS = {"mode": "all", "threshold": None, "threads": None,
                      **_RANSAC_DEFAULTS}
_EVAL_DEFAULTS = {"ids": None, "fold": None, "folds": 4, "split": "test",
                  "gates": "10:10,15:20", "modes": "all,single", "threshold": None,
                  "threads": None, **_RANSAC_DEFAULTS}
_ABLATE_DEFAULTS = {"steps": 2000, "seed": 0, "lr": 1e-3, "beta": 1.0,
                    "noise-sigma": 0.02, "threshold": 0.2, "arms": None,
                    "log-every": 25, "threads": None, **_RANSAC_DEFAULTS}
_HEATMAP_DEFAULTS = {"threshold": None, "threads": None}


def _build_parser() -> _Parser:
    parser = _Parser(prog="sweepreg",
                     description="Detector-free sweep-to-volume registration")
    parser.add_argument("--from-manifest", metavar="RUN_JSON",
                        help="re-execute a previous run from its manifest")
    sub = parser.add_subparsers(dest="command")

    def add_common(p):
        p.add_argument("--config", help="JSON file with option defaults")
        p.add_argument("--threads", type=int, help="BLAS thread limit (recorded)")

    p = sub.add_parser("gen-data", help="generate a synthetic phantom dataset")
    p.add_argument("--out")
    p.add_argument("--samples", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--dims", type=int, help="cubic volume extent in voxels")
    p.add_argument("--frames", type=int, help="frames per sweep")
    p.add_argument("--frame-dims", type=int, help="square frame extent in pixels")
    p.add_argument("--deform-mm", type=float, help="max deformation displacement")
    p.add_argument("--fan-correlation", choices=["none", "pose"])
    add_common(p)

    p = sub.add_parser("train", help="train the matching model")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--variant", choices=["standard", "small"])
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--sink-policy", choices=["outside_only", "full_sink"])
    p.add_argument("--temperature", type=float)
    p.add_argument("--polycrop", type=_onoff, help="'on' or 'off'")
    p.add_argument("--noise-sigma", type=float)
    p.add_argument("--crop", type=_onoff, help="'on' or 'off'")
    p.add_argument("--balance-ratio", type=float)
    p.add_argument("--checkpoint-interval", type=int)
    p.add_argument("--threshold", type=float, help="match confidence threshold")
    p.add_argument("--log-every", type=int)
    add_common(p)

    p = sub.add_parser("register", help="register one sweep to its volume")
    p.add_argument("--ckpt")
    p.add_argument("--case")
    p.add_argument("--out")
    p.add_argument("--mode", choices=["all", "single"])
    p.add_argument("--threshold", type=float)
    p.add_argument("--iterations", type=int)
    p.add_argument("--inlier-mm", type=float)
    p.add_argument("--ransac-seed", type=int)
    add_common(p)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint over a dataset")
    p.add_argument("--ckpt")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--ids", help="comma-separated sample ids")
    p.add_argument("--fold", type=int, help="hash-based fold index")
    p.add_argument("--folds", type=int)
    p.add_argument("--split", choices=["train", "test"])
    p.add_argument("--gates", help="e.g. '10:10,15:20'")
    p.add_argument("--modes", help="comma-separated: all,single")
    p.add_argument("--threshold", type=float)
    p.add_argument("--iterations", type=int)
    p.add_argument("--inlier-mm", type=float)
    p.add_argument("--ransac-seed", type=int)
    add_common(p)

    p = sub.add_parser("ablate", help="train and compare ablation arms")
    p.add_argument("--data")
    p.add_argument("--eval-data")
    p.add_argument("--out")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--noise-sigma", type=float)
    p.add_argument("--threshold", type=float)
    p.add_argument("--arms", help="comma-separated arm names")
    p.add_argument("--log-every", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--inlier-mm", type=float)
    p.add_argument("--ransac-seed", type=int)
    add_common(p)

    p = sub.add_parser("heatmap", help="export one cell's similarity row")
    p.add_argument("--ckpt")
    p.add_argument("--case")
    p.add_argument("--out")
    p.add_argument("--frame", type=int)
    p.add_argument("--cell", type=int)
    p.add_argument("--threshold", type=float)
    add_common(p)
    return parser


_REQUIRED = {"gen-data": ["out"], "train": ["data", "out"],
             "register": ["ckpt", "case", "out"],
             "evaluate": ["ckpt", "data", "out"],
             "ablate": ["data", "eval-data", "out"],
             "heatmap": ["ckpt", "case", "out", "frame", "cell"]}
_DEFAULTS = {"gen-data": _GEN_DEFAULTS, "train": _TRAIN_DEFAULTS,
             "register": _REGISTER_DEFAULTS, "evaluate": _EVAL_DEFAULTS,
             "ablate": _ABLATE_DEFAULTS, "heatmap": _HEATMAP_DEFAULTS}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        parser = _build_parser()
        args = parser.parse_args(argv)
        if args.from_manifest:
            doc = json.loads(Path(args.from_manifest).read_text())
            kind, opts = doc.get("kind"), doc.get("config")
            if kind not in _HANDLERS or not isinstance(opts, dict):
                raise UserError(f"{args.from_manifest} is not a run manifest")
            logger.info("re-executing %s run from %s", kind, args.from_manifest)
            return _HANDLERS[kind](opts)
        if not args.command:
            raise UserError("no command given (see --help)")
        keys = list(_DEFAULTS[args.command]) + _REQUIRED[args.command]
        opts = _resolve(args, _DEFAULTS[args.command], keys)
        for key in _REQUIRED[args.command]:
            if opts.get(key) is None:
                raise UserError(f"missing required option --{key}")
        return _HANDLERS[args.command](opts)
    except UserError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1
    except FileNotFoundError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1
    except (ValueError, KeyError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1
    except Exception as exc:  # runtime failures: no consensus, divergence, io
        sys.stderr.write(f"runtime failure: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
