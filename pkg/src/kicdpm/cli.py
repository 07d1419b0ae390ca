"""Command-line entry point: ``kicdpm synth|krige|variogram|train|sample|eval|rerun``.

Every subcommand accepts ``--config FILE`` with flat ``key = value`` lines
naming its long options (dashes or underscores); explicit flags win over
the file, which wins over built-in defaults. Each run writes a manifest
next to its outputs recording the command line, resolved options, package
version and SHA-256 of every input file; ``kicdpm rerun MANIFEST`` checks
those hashes and replays the recorded command line. Failures print one line
``kicdpm: error: <ExceptionType>: <message>`` to stderr and exit with
status 1 (2 for usage errors).
"""

import argparse
import glob
import hashlib
import os
import shlex
import sys

import numpy as np

from . import __version__
from .grid import load_grid, save_grid
from .kriging import bicubic_upsample, ukrig_downscale
from .metrics import Ensemble, evaluate
from .synthetic import GrfSpec, derive_seed, make_pair, sample_grf
from .training import ConfigError, TrainConfig, parse_config_text, train
from .variogram import MaternModel, empirical_variogram, fit_variogram

MANIFEST_NAME = "manifest.txt"


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_text(path, text):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def write_manifest(path, command, argv, options, inputs=()):
    """Deterministic ``key = value`` record of a run."""
    lines = [f"command = {command}", f"version = {__version__}",
             f"argv = {shlex.join(argv)}"]
    for key in sorted(options):
        value = options[key]
        if isinstance(value, (list, tuple)):
            value = ",".join(str(v) for v in value)
        lines.append(f"option.{key} = {value}")
    for p in inputs:
        lines.append(f"input.{os.path.normpath(p)} = sha256:{sha256_file(p)}")
    _write_text(path, "\n".join(lines) + "\n")
    return path


def read_manifest(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read(), source=path)


class ManifestError(ValueError):
    """A manifest cannot be replayed (missing fields or changed inputs)."""


def replay_argv(manifest_path):
    """Recorded argv of a manifest after checking every input's hash."""
    entries = read_manifest(manifest_path)
    if "argv" not in entries:
        raise ManifestError(f"{manifest_path} has no argv entry")
    for key, value in entries.items():
        if not key.startswith("input."):
            continue
        path = key[len("input."):]
        if not os.path.exists(path):
            raise ManifestError(f"input {path} is missing")
        if value != f"sha256:{sha256_file(path)}":
            raise ManifestError(f"input {path} changed since the manifest was written")
    argv = shlex.split(entries["argv"])
    if argv and argv[0] == "rerun":
        raise ManifestError("refusing to replay a rerun manifest")
    return argv


def _fixed_model(args):
    """A fully specified Matern model from flags, or ``None`` to fit one."""
    given = [args.rho, args.sill]
    if all(v is None for v in given):
        return None
    if any(v is None for v in given) or args.nu is None:
        raise ValueError("a fixed variogram needs --nu, --rho and --sill (and optionally --nugget)")
    return MaternModel(args.nu, args.rho, args.sill, args.nugget or 0.0)


# ---------------------------------------------------------------- commands

def cmd_synth(args):
    os.makedirs(args.out, exist_ok=True)
    model = MaternModel(args.nu, args.rho, args.sill, args.nugget)
    if args.nx % args.factor:
        raise ValueError(f"--nx {args.nx} is not divisible by --factor {args.factor}")
    for i in range(args.n_pairs):
        spec = GrfSpec(args.nx, args.nx, model, seed=derive_seed(args.seed, i))
        coarse, fine = make_pair(sample_grf(spec, variable_name=args.variable), args.factor)
        for kind, grid in (("fine", fine), ("coarse", coarse)):
            path = os.path.join(args.out, f"pair_{i:04d}_{kind}.grid")
            save_grid(grid, path)
    return os.path.join(args.out, MANIFEST_NAME), []


def cmd_krige(args):
    coarse = load_grid(args.input)
    if args.method != "ukrig":
        if args.local is not None or _fixed_model(args) is not None:
            raise ValueError("--local and variogram flags apply only to --method ukrig")
        kernel = "spline" if args.method == "bicubic" else args.method
        fine = bicubic_upsample(coarse, args.factor, kernel)
    else:
        fine = ukrig_downscale(coarse, args.factor, model=_fixed_model(args), local=args.local,
                               n_bins=args.n_bins, fixed_nu=args.nu,
                               fit_nugget=args.fit_nugget)
    save_grid(fine, args.out)
    return args.out + ".manifest", [args.input]


def cmd_variogram(args):
    grids = [load_grid(p) for p in args.inputs]
    emp = empirical_variogram(grids, n_bins=args.n_bins, max_lag=args.max_lag)
    model = fit_variogram(emp, fixed_nu=args.nu, fit_nugget=not args.no_nugget)
    _write_text(args.out_csv, emp.to_csv())
    _write_text(args.out_model, model.to_text())
    return args.out_csv + ".manifest", list(args.inputs)


def _pairs_from_dir(directory):
    fines = sorted(glob.glob(os.path.join(directory, "pair_*_fine.grid")))
    if not fines:
        raise FileNotFoundError(f"no pair_*_fine.grid files in {directory}")
    pairs, inputs = [], []
    for f in fines:
        c = f[:-len("_fine.grid")] + "_coarse.grid"
        pairs.append((load_grid(c), load_grid(f)))
        inputs += [c, f]
    return pairs, inputs


def resolve_train_config(args):
    """Defaults, then ``--train-config`` file, then ``--set`` pairs, then ``--seed``."""
    mapping = {}
    if args.train_config:
        with open(args.train_config, encoding="utf-8") as fh:
            mapping.update(parse_config_text(fh.read(), source=args.train_config))
    for item in args.set or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        mapping[key.strip()] = value.strip()
    if args.seed is not None:
        mapping["seed"] = str(args.seed)
    return TrainConfig.from_mapping(mapping)


def cmd_train(args):
    config = resolve_train_config(args)
    pairs, inputs = _pairs_from_dir(args.data)
    os.makedirs(args.out, exist_ok=True)
    _, report, _ = train(pairs, config, checkpoint_dir=args.out)
    _write_text(os.path.join(args.out, "train_log.csv"), report.to_csv())
    _write_text(os.path.join(args.out, "train_config.txt"), config.to_text())
    if args.train_config:
        inputs.append(args.train_config)
    args.resolved = config.to_dict()
    return os.path.join(args.out, MANIFEST_NAME), inputs


def cmd_sample(args):
    from .model import KiCDPM

    est = KiCDPM.from_checkpoint(args.checkpoint)
    coarse = load_grid(args.coarse)
    ens = est.sample(coarse, n_samples=args.n_samples, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    for i, member in enumerate(ens.members):
        save_grid(member, os.path.join(args.out, f"member_{i:04d}.grid"))
    save_grid(ens.mean(), os.path.join(args.out, "mean.grid"))
    return os.path.join(args.out, MANIFEST_NAME), [args.checkpoint, args.coarse]


def _format_value(v):
    return "undefined" if not np.isfinite(v) else repr(float(v))


def variogram_comparison(truth, preds, n_bins=16):
    """Whitespace table ``lag truth pred pairs`` on shared bins (gnuplot-readable).

    Prediction semivariances are pooled over ``preds`` and matched to the
    truth bin with the nearest mean lag.
    """
    max_lag = 0.5 * np.hypot(truth.n_rows - 1, truth.n_cols - 1)
    edges = np.linspace(0.0, max_lag, n_bins + 1)
    emp_t = empirical_variogram(truth, bin_edges=edges)
    emp_p = empirical_variogram(list(preds), bin_edges=edges)
    lines = ["# lag truth_semivariance pred_semivariance truth_pairs"]
    for h, gt, n in zip(emp_t.lags, emp_t.semivariance, emp_t.pair_counts):
        gp = emp_p.semivariance[int(np.argmin(np.abs(emp_p.lags - h)))]
        lines.append(f"{float(h)!r} {float(gt)!r} {float(gp)!r} {int(n)}")
    return "\n".join(lines) + "\n"


def cmd_eval(args):
    truth = load_grid(args.truth)
    inputs = [args.truth]
    ensemble = None
    if args.ensemble:
        paths = sorted(glob.glob(os.path.join(args.ensemble, "member_*.grid")))
        if not paths:
            raise FileNotFoundError(f"no member_*.grid files in {args.ensemble}")
        ensemble = Ensemble(tuple(load_grid(p) for p in paths))
        pred = ensemble.mean()
        members = ensemble.members
        inputs += paths
    elif args.pred:
        pred = load_grid(args.pred)
        members = (pred,)
        inputs.append(args.pred)
    else:
        raise ValueError("eval needs --pred or --ensemble")
    rows = evaluate(pred, truth, ensemble=ensemble)
    text = "metric,value,n_cells\n" + "".join(
        f"{name},{_format_value(v)},{n}\n" for name, v, n in rows)
    _write_text(args.out, text)
    if args.variogram_out:
        _write_text(args.variogram_out, variogram_comparison(truth, members))
    return args.out + ".manifest", inputs


# ------------------------------------------------------------------ parser

def _add_common(p):
    p.add_argument("--config", help="flat key = value file with defaults for this command")


def _add_model_flags(p):
    p.add_argument("--nu", type=float, help="Matern smoothness; fixes nu when fitting")
    p.add_argument("--rho", type=float, help="Matern range (coarse cells) for a fixed model")
    p.add_argument("--sill", type=float, help="partial sill for a fixed model")
    p.add_argument("--nugget", type=float, help="nugget for a fixed model (default 0)")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="kicdpm", description="Kriging-conditioned diffusion downscaling toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic (coarse, fine) GRF pairs")
    _add_common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--nx", type=int, default=32, help="fine grid size (square)")
    p.add_argument("--factor", type=int, default=4, help="coarsening factor")
    p.add_argument("--n-pairs", type=int, default=1, help="number of pairs")
    p.add_argument("--nu", type=float, default=0.5, help="Matern smoothness")
    p.add_argument("--rho", type=float, default=8.0, help="Matern range in fine cells")
    p.add_argument("--sill", type=float, default=1.0, help="partial sill")
    p.add_argument("--nugget", type=float, default=0.0, help="nugget")
    p.add_argument("--variable", default="value", help="variable name written to headers")
    p.add_argument("--seed", type=int, default=0, help="base seed; pair i uses a derived seed")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("krige", help="downscale one coarse grid")
    _add_common(p)
    p.add_argument("input", help="coarse GRID file")
    p.add_argument("--out", required=True, help="output GRID file")
    p.add_argument("--factor", type=int, default=4, help="refinement factor")
    p.add_argument("--method", choices=("ukrig", "bicubic", "catmull-rom"), default="ukrig",
                   help="universal kriging, cubic-spline bicubic, or Catmull-Rom bicubic")
    p.add_argument("--local", type=int, help="krige from the k nearest coarse cells only")
    p.add_argument("--n-bins", type=int, default=16, help="variogram bins when fitting")
    p.add_argument("--fit-nugget", action="store_true", help="fit a nugget to the residuals")
    _add_model_flags(p)
    p.set_defaults(func=cmd_krige)

    p = sub.add_parser("variogram", help="empirical variogram and Matern fit")
    _add_common(p)
    p.add_argument("inputs", nargs="+", help="GRID files (pooled)")
    p.add_argument("--out-csv", required=True, help="CSV lag,semivariance,pair_count")
    p.add_argument("--out-model", required=True, help="fitted model as key=value lines")
    p.add_argument("--n-bins", type=int, default=16, help="number of distance bins")
    p.add_argument("--max-lag", type=float, help="largest lag (default half the diagonal)")
    p.add_argument("--nu", type=float, help="fix the smoothness instead of selecting it")
    p.add_argument("--no-nugget", action="store_true", help="force a zero nugget")
    p.set_defaults(func=cmd_variogram)

    p = sub.add_parser("train", help="train the conditional denoiser")
    _add_common(p)
    p.add_argument("--data", required=True, help="directory of pair_*_{coarse,fine}.grid")
    p.add_argument("--out", required=True, help="directory for checkpoints and the log")
    p.add_argument("--train-config", help="key = value file with TrainConfig fields")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one TrainConfig field (repeatable)")
    p.add_argument("--seed", type=int, help="training seed (overrides the config)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="draw an ensemble for one coarse grid")
    _add_common(p)
    p.add_argument("--checkpoint", required=True, help="model checkpoint")
    p.add_argument("--coarse", required=True, help="coarse GRID file")
    p.add_argument("--n-samples", type=int, default=8, help="ensemble size")
    p.add_argument("--seed", type=int, default=0, help="chain i uses seed + i")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="score predictions against a truth grid")
    _add_common(p)
    p.add_argument("--truth", required=True, help="truth GRID file")
    p.add_argument("--pred", help="single prediction GRID file")
    p.add_argument("--ensemble", help="directory of member_*.grid files")
    p.add_argument("--out", required=True, help="CSV metric,value,n_cells")
    p.add_argument("--variogram-out", help="per-lag variogram comparison table")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("rerun", help="replay the command recorded in a manifest")
    p.add_argument("manifest", help="manifest file written by an earlier run")
    p.set_defaults(func=None)
    return parser


def _apply_config(parser, argv):
    """Parse twice so that config-file values sit between defaults and flags."""
    args = parser.parse_args(argv)
    if not args.config:
        return args
    sub = parser._subparsers._group_actions[0].choices[args.command]
    actions = {a.dest: a for a in sub._actions if a.option_strings}
    with open(args.config, encoding="utf-8") as fh:
        entries = parse_config_text(fh.read(), source=args.config)
    defaults = {}
    for key, raw in entries.items():
        dest = key.replace("-", "_")
        if dest not in actions or dest in ("config", "help"):
            raise ConfigError(f"unknown config key {key!r} for {args.command}")
        action = actions[dest]
        if isinstance(action, argparse._StoreTrueAction):
            defaults[dest] = raw.lower() in ("1", "true", "yes", "on")
        elif isinstance(action, argparse._AppendAction):
            defaults[dest] = [v.strip() for v in raw.split(";") if v.strip()]
        else:
            try:
                defaults[dest] = action.type(raw) if action.type else raw
            except ValueError:
                raise ConfigError(f"bad value for {key}: {raw!r}") from None
            if action.choices and defaults[dest] not in action.choices:
                raise ConfigError(f"{key} must be one of {action.choices}")
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def run(argv):
    """Execute one command and write its manifest; exceptions propagate."""
    parser = build_parser()
    if argv[:1] == ["rerun"]:
        args = parser.parse_args(argv)
        return run(replay_argv(args.manifest))
    args = _apply_config(parser, argv)
    manifest, inputs = args.func(args)
    options = {k: v for k, v in vars(args).items()
               if k not in ("func", "resolved") and v is not None}
    options.update({f"train.{k}": v for k, v in getattr(args, "resolved", {}).items()})
    if args.config:
        inputs = list(inputs) + [args.config]
    return write_manifest(manifest, args.command, argv, options, inputs)


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        run(argv)
    except SystemExit:
        raise
    except Exception as exc:  # noqa: BLE001 - one-line report for any failure
        message = " ".join(str(exc).split())
        print(f"kicdpm: error: {type(exc).__name__}: {message}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
