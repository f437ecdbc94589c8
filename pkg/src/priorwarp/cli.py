"""Command-line surface for scripted experiments.

Conventions: machine output is one JSON document on stdout; human-readable
tables and progress go to stderr. Exit codes: 0 success, 2 format/argument
error, 3 numeric error. `--threads 1` pins the numeric libraries to one
thread for bit-exact baselines, which is why all numeric imports in this
module are deferred until after argument handling.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys

from .errors import FormatError, NumericError

THREAD_ENV = (
    "OPENBLAS_NUM_THREADS",
    "OMP_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
)

DEFAULT_ORGANS = [
    {"center": [0.32, 0.32, 0.32], "semi_axes": [0.20, 0.18, 0.16]},
    {"center": [0.68, 0.68, 0.32], "semi_axes": [0.20, 0.18, 0.16]},
    {"center": [0.68, 0.32, 0.68], "semi_axes": [0.20, 0.18, 0.16]},
    {"center": [0.32, 0.68, 0.68], "semi_axes": [0.20, 0.18, 0.16]},
]

DEFAULTS = {
    "fit": {
        "iters": 600,
        "warmup_iters": 30,
        "lr_params": 3e-4,
        "lr_prior": 1e-3,
        "weight_decay": 1e-5,
        "gamma": 0.5,
        "lam": 1e-5,
        "eps": 1e-5,
        "param_span": 50,
        "prior_span": 10,
        "seed": 0,
        "tau_bg": 0.5,
        "grid": [3, 3, 3],
    },
    "phantom": {
        "c_cls": 4,
        "dims": [32, 32, 32],
        "organs": DEFAULT_ORGANS,
        "max_shift": 2.0,
        "max_disp": 2.0,
        "seed": 0,
        "grid": [3, 3, 3],
        "cases": 20,
        "prior_scale": 12.0,
    },
    "metrics": {
        "tau": 1.0,
        "spacing": None,
    },
}


def _pin_threads(argv: list[str]) -> None:
    """Set BLAS/OpenMP thread caps before numpy is first imported."""
    n = None
    for i, tok in enumerate(argv):
        if tok == "--threads" and i + 1 < len(argv):
            n = argv[i + 1]
        elif tok.startswith("--threads="):
            n = tok.split("=", 1)[1]
    if n is None:
        return
    try:
        count = int(n)
        if count < 1:
            raise ValueError
    except ValueError:
        raise FormatError(f"field --threads: expected a positive integer, got {n!r}")
    for var in THREAD_ENV:
        os.environ[var] = str(count)


def _check_keys(doc, ref, path: str) -> None:
    if isinstance(ref, dict):
        if not isinstance(doc, dict):
            raise FormatError(f"field {path}: expected a table/object")
        for key, val in doc.items():
            if key not in ref:
                raise FormatError(f"field {path}.{key}: unknown key")
            _check_keys(val, ref[key], f"{path}.{key}")
    elif path.endswith(".organs"):
        if not isinstance(doc, list):
            raise FormatError(f"field {path}: expected a list of organs")
        for i, organ in enumerate(doc):
            if not isinstance(organ, dict):
                raise FormatError(f"field {path}[{i}]: expected an object")
            for key in organ:
                if key not in ("center", "semi_axes"):
                    raise FormatError(f"field {path}[{i}].{key}: unknown key")


def _merge(base: dict, over: dict) -> None:
    for key, val in over.items():
        if isinstance(val, dict) and isinstance(base.get(key), dict):
            _merge(base[key], val)
        else:
            base[key] = val


def load_run_config(path: str | None) -> dict:
    """Defaults, optionally overlaid by a TOML or JSON config file."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is None:
        return cfg
    with open(path, "rb") as fh:
        blob = fh.read()
    if path.endswith(".json"):
        try:
            doc = json.loads(blob.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise FormatError(f"field config: not valid JSON ({e})") from e
    else:
        try:
            import tomllib  # py311+
        except ImportError:
            import tomli as tomllib
        try:
            doc = tomllib.loads(blob.decode("utf-8"))
        except (UnicodeDecodeError, tomllib.TOMLDecodeError) as e:
            raise FormatError(f"field config: not valid TOML ({e})") from e
    _check_keys(doc, DEFAULTS, "config")
    _merge(cfg, doc)
    return cfg


def _fit_config(cfg: dict, args):
    """FitConfig from the config tree with flag overrides."""
    from .optimizer import FitConfig

    sec = dict(cfg["fit"])
    grid = sec.pop("grid")
    for name in (
        "iters", "warmup_iters", "lr_params", "lr_prior", "weight_decay",
        "gamma", "lam", "eps", "param_span", "prior_span", "seed", "tau_bg",
    ):
        val = getattr(args, name, None)
        if val is not None:
            sec[name] = val
    if getattr(args, "grid", None) is not None:
        grid = args.grid
    return FitConfig(**sec), tuple(grid)


def _emit(doc: dict) -> None:
    sys.stdout.write(json.dumps(doc, indent=1) + "\n")


def _say(msg: str) -> None:
    sys.stderr.write(msg + "\n")


# -- commands -------------------------------------------------------------


def cmd_phantom(args, cfg: dict) -> int:
    from .phantom import PhantomSpec, make_suite, spec_from_dict

    sec = dict(cfg["phantom"])
    for name in ("c_cls", "max_shift", "max_disp", "seed", "cases", "prior_scale"):
        val = getattr(args, name, None)
        if val is not None:
            sec[name] = val
    if args.dims is not None:
        sec["dims"] = args.dims
    if args.grid is not None:
        sec["grid"] = args.grid
    spec = spec_from_dict(
        {
            "c_cls": sec["c_cls"],
            "dims": sec["dims"],
            "organs": sec["organs"],
            "max_shift": sec["max_shift"],
            "max_disp": sec["max_disp"],
            "seed": sec["seed"],
            "grid": {"nh": sec["grid"][0], "nw": sec["grid"][1], "nd": sec["grid"][2]},
        }
    )
    manifest = make_suite(spec, int(sec["cases"]), args.out_dir)
    if args.prior_out:
        from .phantom import canonical_anatomy
        from .prior import AnatomicalPrior, logits_from_labels, save_prior
        from .volume import Volume

        canon = canonical_anatomy(spec)
        logits = logits_from_labels(canon.labels, spec.c_cls, float(sec["prior_scale"]))
        save_prior(AnatomicalPrior(Volume(logits)), args.prior_out, seed=spec.seed)
        manifest = dict(manifest, prior_file=args.prior_out)
    _say(f"wrote {manifest['n_cases']} cases to {args.out_dir}")
    _emit(manifest)
    return 0


def _load_labels(path: str):
    from .pwv import read_volume
    from .volume import LabelMap

    vol = read_volume(path)
    if not isinstance(vol, LabelMap):
        raise FormatError(f"field dtype: {path} is not a u8 label map")
    return vol


def _write_trail_csv(path: str, trail) -> None:
    rows = ["iteration,dice_pred,dice_prior,centroid,reg,total,lr"]
    for e in trail:
        rows.append(
            f"{e.iteration},{e.loss.dice_pred!r},{e.loss.dice_prior!r},"
            f"{e.loss.centroid!r},{e.loss.reg!r},{e.loss.total!r},{e.lr!r}"
        )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(rows) + "\n")


def cmd_fit(args, cfg: dict) -> int:
    from .optimizer import fit_case, fit_report_to_dict
    from .params import save_params
    from .prior import init_prior, load_prior
    from .pwv import write_volume
    from .tps import ControlGrid, build_system

    fit_cfg, grid_shape = _fit_config(cfg, args)
    target = _load_labels(args.target)
    if args.prior:
        prior = load_prior(args.prior)
    else:
        prior = init_prior(args.init_c_cls, target.dims, fit_cfg.seed)
    sys_ = build_system(ControlGrid(grid_shape, target.dims))
    report = fit_case(target, prior.logits, sys_, fit_cfg)

    save_params(report.params, args.out_params)
    from .optimizer import deform_prior
    from .prior import normalize

    deformed = deform_prior(
        normalize(prior), report.params.theta, report.params.delta, sys_
    )
    write_volume(deformed, args.out_volume)
    if args.trail_csv:
        _write_trail_csv(args.trail_csv, report.trail)

    doc = fit_report_to_dict(report)
    doc["target"] = args.target
    doc["params_file"] = args.out_params
    doc["volume_file"] = args.out_volume
    m = report.final_metrics
    _say(
        f"fit {args.target}: mean dsc "
        f"{m.mean_dsc if m.mean_dsc is None else round(m.mean_dsc, 4)} "
        f"after {len(report.trail)} iterations"
    )
    _emit(doc)
    return 0


def cmd_learn_prior(args, cfg: dict) -> int:
    from .optimizer import learn_prior, learn_report_to_dict
    from .prior import AnatomicalPrior, init_prior, load_prior, save_prior
    from .phantom import spec_from_dict
    from .tps import ControlGrid, build_system

    fit_cfg, grid_shape = _fit_config(cfg, args)
    manifest_path = os.path.join(args.dataset_dir, "manifest.json")
    try:
        with open(manifest_path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise FormatError(f"field manifest: {manifest_path} not found")
    except json.JSONDecodeError as e:
        raise FormatError(f"field manifest: not valid JSON ({e})") from e
    if manifest.get("format") != "phantom-suite-v1":
        raise FormatError(
            f"field format: expected 'phantom-suite-v1', got {manifest.get('format')!r}"
        )
    spec = spec_from_dict(manifest["spec"])
    cases = [
        _load_labels(os.path.join(args.dataset_dir, entry["file"]))
        for entry in manifest["cases"]
    ]
    if args.grid is None:
        grid_shape = spec.grid_shape
    if args.prior:
        prior = load_prior(args.prior)
    else:
        prior = init_prior(spec.c_cls, spec.dims, fit_cfg.seed)
    sys_ = build_system(ControlGrid(grid_shape, cases[0].dims))
    result = learn_prior(cases, prior.logits, sys_, fit_cfg)

    save_prior(
        AnatomicalPrior(result.prior_logits), args.out_prior, seed=fit_cfg.seed
    )
    doc = learn_report_to_dict(result)
    doc["prior_file"] = args.out_prior
    finals = [c.final_metrics.mean_dsc for c in result.case_reports]
    finals = [v for v in finals if v is not None]
    mean_final = sum(finals) / len(finals) if finals else None
    _say(
        f"learned prior over {len(cases)} cases: mean final dsc "
        f"{mean_final if mean_final is None else round(mean_final, 4)}"
    )
    _emit(doc)
    return 0


def cmd_warp(args, cfg: dict) -> int:
    from .affine import ClassShifts, apply_class_shifts
    from .params import load_params
    from .pwv import read_volume, write_volume
    from .tps import ControlGrid, Displacements, build_system, solve_coefficients
    from .tps import warp_field, warp_volume
    from .volume import LabelMap, Volume, channel_argmax, one_hot

    vol = read_volume(args.volume)
    params = load_params(args.params)
    was_labels = isinstance(vol, LabelMap)
    if was_labels:
        src = one_hot(vol, params.theta.shape[0])
    else:
        src = vol
        if src.c != params.theta.shape[0]:
            raise FormatError(
                f"field theta: {params.theta.shape[0]} classes but volume "
                f"has {src.c} channels"
            )
    sys_ = build_system(ControlGrid(params.grid_shape, src.dims))
    moved = apply_class_shifts(src, ClassShifts(params.theta))
    coef = solve_coefficients(sys_, Displacements(params.delta))
    warped = warp_volume(moved, warp_field(sys_, coef, src.dims))
    if was_labels:
        out: Volume | LabelMap = channel_argmax(warped, args.tau_bg)
    else:
        out = warped
    write_volume(out, args.out)
    _say(f"warped {args.volume} -> {args.out}")
    _emit(
        {
            "out": args.out,
            "kind": "labels" if was_labels else "volume",
            "dims": list(src.dims),
        }
    )
    return 0


def cmd_eval(args, cfg: dict) -> int:
    from .metrics import evaluate_labels, format_table, report_to_dict

    a = _load_labels(args.a)
    b = _load_labels(args.b)
    tau = cfg["metrics"]["tau"] if args.tau is None else args.tau
    spacing = cfg["metrics"]["spacing"] if args.spacing is None else args.spacing
    report = evaluate_labels(
        a, b, c_cls=args.c_cls, tau=tau,
        spacing=None if spacing is None else tuple(spacing),
    )
    _say(format_table(report))
    _emit(report_to_dict(report))
    return 0


# -- parser ---------------------------------------------------------------


def _add_fit_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--iters", type=int)
    p.add_argument("--warmup-iters", dest="warmup_iters", type=int)
    p.add_argument("--lr-params", dest="lr_params", type=float)
    p.add_argument("--lr-prior", dest="lr_prior", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--lam", type=float, help="control-point regularizer weight")
    p.add_argument("--eps", type=float, help="dice denominator epsilon")
    p.add_argument("--param-span", dest="param_span", type=int)
    p.add_argument("--prior-span", dest="prior_span", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--tau-bg", dest="tau_bg", type=float)
    p.add_argument("--grid", type=int, nargs=3, metavar=("NH", "NW", "ND"))


def build_parser() -> argparse.ArgumentParser:
    from . import FORMAT_VERSIONS, __version__

    parser = argparse.ArgumentParser(
        prog="priorwarp",
        description="Deformable anatomical-prior fitting and evaluation.",
    )
    parser.add_argument(
        "--version",
        action="version",
        version=f"priorwarp {__version__} (formats: {', '.join(FORMAT_VERSIONS)})",
    )
    parser.add_argument("--config", help="TOML or JSON run config")
    parser.add_argument("--threads", type=int, help="thread cap for numeric libraries")
    parser.add_argument(
        "--show-config", action="store_true",
        help="print the full default config as JSON and exit",
    )
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("phantom", help="generate a synthetic phantom suite")
    p.add_argument("out_dir")
    p.add_argument("--cases", type=int)
    p.add_argument("--c-cls", dest="c_cls", type=int)
    p.add_argument("--dims", type=int, nargs=3, metavar=("H", "W", "D"))
    p.add_argument("--max-shift", dest="max_shift", type=float)
    p.add_argument("--max-disp", dest="max_disp", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--grid", type=int, nargs=3, metavar=("NH", "NW", "ND"))
    p.add_argument("--prior-out", dest="prior_out",
                   help="also write sharp canonical prior logits here")
    p.add_argument("--prior-scale", dest="prior_scale", type=float)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("fit", help="fit deformation parameters for one target")
    p.add_argument("target", help="PWV1 label map")
    p.add_argument("--prior", help="PWV1 prior logits")
    p.add_argument("--init-c-cls", dest="init_c_cls", type=int,
                   help="start from a random prior with this many classes")
    p.add_argument("--out-params", dest="out_params", default="params.json")
    p.add_argument("--out-volume", dest="out_volume", default="deformed.pwv")
    p.add_argument("--trail-csv", dest="trail_csv")
    _add_fit_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("learn-prior", help="alternating prior learning over a suite")
    p.add_argument("dataset_dir")
    p.add_argument("--prior", help="warm-start prior logits (PWV1)")
    p.add_argument("--out-prior", dest="out_prior", default="learned_prior.pwv")
    _add_fit_flags(p)
    p.set_defaults(func=cmd_learn_prior)

    p = sub.add_parser("warp", help="apply saved parameters to a volume")
    p.add_argument("volume", help="PWV1 volume or label map")
    p.add_argument("params", help="params v1 JSON")
    p.add_argument("--out", default="warped.pwv")
    p.add_argument("--tau-bg", dest="tau_bg", type=float, default=0.5)
    p.set_defaults(func=cmd_warp)

    p = sub.add_parser("eval", help="score two label maps")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--tau", type=float, help="NSD tolerance in mm (default 1.0)")
    p.add_argument("--spacing", type=float, nargs=3, metavar=("SH", "SW", "SD"))
    p.add_argument("--c-cls", dest="c_cls", type=int)
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        _pin_threads(argv)
        if "--show-config" in argv:
            _emit(DEFAULTS)
            return 0
        parser = build_parser()
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return 2
        if args.command == "fit" and not args.prior and not args.init_c_cls:
            raise FormatError("field prior: pass --prior PATH or --init-c-cls K")
        cfg = load_run_config(args.config)
        return args.func(args, cfg)
    except FormatError as e:
        _say(f"format error: {e}")
        return 2
    except NumericError as e:
        _say(f"numeric error: {e}")
        return 3
    except (ValueError, OSError) as e:
        _say(f"error: {e}")
        return 2


def entry() -> None:
    raise SystemExit(main())
