"""``trajreg`` command-line interface.

Every subcommand reads and writes the documented file formats (NIfTI subset
or raw + sidecar volumes, three-file displacement fields, binary networks,
tab-separated reports) and records a JSON run manifest. Settings resolve as
flag > ``--config`` file > built-in default; config keys are the long flag
names with ``-`` or ``_``.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .demons import DemonsParams, demons_register, parse_key_values
from .errors import ConfigError, TrajregError
from .field import read_field, warp, write_field
from .metrics import evaluate
from .msnet import (DEFAULT_CHANNELS, DEFAULT_SKIPS, MsNet, TrainConfig, load_net, net_summary,
                    save_net, simplify_volume, train, training_patches)
from .phantom import PhantomSpec, generate_phantom, intensity_fold_energy, tissue_labels
from .pipeline import LevelParams, _training_pair, build_trajectory, guided_register
from .mesh import SmoothingParams
from .volume import BrainMask, LabelVolume, Volume3, read_volume, set_num_threads, write_volume

__all__ = ["main", "build_parser"]

DEMONS_KEYS = {
    "pyramid_levels": int, "iterations": str, "sigma_update": float, "sigma_field": float,
    "max_step": float, "kappa": float, "normalize": str,
}
PHANTOM_KEYS = {
    "dims": str, "r_wm": float, "r_gm": float, "amplitude": float, "frequency": int,
    "background": float, "gm_level": float, "wm_level": float, "noise": float,
    "blur": float, "phase": float, "warp": float,
}
LEVEL_KEYS = {"level": int, "smoothing_step": int, "lam": float}
TRAIN_KEYS = {
    "learning_rate": float, "beta1": float, "beta2": float, "eps": float, "batch_size": int,
    "epochs": int, "patches_per_pair": int, "patch_size": int,
    "hidden": str, "skips": str, "output_init": str,
}
COMMON_KEYS = {"seed": int}
LEVEL_DEFAULTS = {"level": 1, "smoothing_step": 10, "lam": 0.5}
NET_DEFAULTS = {
    "hidden": ",".join(str(c) for c in DEFAULT_CHANNELS),
    "skips": ",".join(f"{s}-{d}" for s, d in DEFAULT_SKIPS),
    "output_init": "uniform",
}


# ---------------------------------------------------------------------------
# argument plumbing

def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_keys(p: argparse.ArgumentParser, keys: dict, group: str) -> None:
    g = p.add_argument_group(group)
    for name, typ in keys.items():
        g.add_argument(_flag(name), dest=name, type=typ, default=None, metavar=name.upper())


def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("run control")
    g.add_argument("--seed", type=int, default=None, help="seed for all randomness (default 0)")
    g.add_argument("--threads", type=int, default=1,
                   help="worker threads; 1 gives bitwise-reproducible output")
    g.add_argument("--config", type=Path, default=None, help="key=value settings file")
    g.add_argument("--manifest", type=Path, default=None,
                   help="run manifest path (default: <primary output>.manifest.json)")


def _resolve(args, keys: dict, defaults: dict | None = None) -> dict:
    """Merge defaults, config-file values and flags (in increasing priority)."""
    out = dict(defaults or {})
    cfg = getattr(args, "_config_values", {})
    for name in keys:
        if name in cfg:
            out[name] = cfg[name]
        val = getattr(args, name, None)
        if val is not None:
            out[name] = val
    return out


def _load_config(args, allowed: set) -> None:
    values = {}
    if args.config is not None:
        values = parse_key_values(Path(args.config).read_text())
        unknown = sorted(set(values) - allowed)
        if unknown:
            raise ConfigError(f"{args.config}: keys not used by '{args.command}': {', '.join(unknown)}")
    args._config_values = values


def _seed(args) -> int:
    return int(_resolve(args, COMMON_KEYS, {"seed": 0})["seed"])


def _demons(args) -> DemonsParams:
    return DemonsParams.from_mapping({k: (None if v is None else str(v))
                                      for k, v in _resolve(args, DEMONS_KEYS).items()})


def _phantom_spec(args) -> PhantomSpec:
    values = _resolve(args, PHANTOM_KEYS)
    values["seed"] = _seed(args)
    return PhantomSpec.from_mapping(values)


def _level(args) -> LevelParams:
    v = _resolve(args, LEVEL_KEYS, LEVEL_DEFAULTS)
    k, step = int(v["level"]), int(v["smoothing_step"])
    if k < 1 or step < 0:
        raise ConfigError("level must be >= 1 and smoothing-step >= 0")
    return LevelParams(k, SmoothingParams(lam=float(v["lam"]), iterations=step * k))


def _parse_ints(text: str) -> tuple:
    try:
        return tuple(int(v) for v in str(text).replace(" ", "").split(",") if v)
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from exc


def _parse_skips(text: str) -> tuple:
    text = str(text).strip()
    if text in ("", "none"):
        return ()
    out = []
    for item in text.split(","):
        try:
            s, d = item.split("-")
            out.append((int(s), int(d)))
        except ValueError as exc:
            raise ConfigError(f"skip edges look like 1-6,2-5; got {text!r}") from exc
    return tuple(out)


def _read_scalar(path) -> Volume3:
    vol = read_volume(path)
    if isinstance(vol, LabelVolume):
        return Volume3(vol.data.astype(np.float64), vol.spacing, vol.origin)
    return vol


def _read_labels(path) -> LabelVolume:
    vol = read_volume(path)
    if not isinstance(vol, LabelVolume):
        data = vol.data
        if not np.all(data == np.round(data)) or data.min() < 0:
            raise ConfigError(f"{path}: not a label volume")
        vol = LabelVolume(data.astype(np.int32), vol.spacing, vol.origin)
    return vol


@contextmanager
def _threads(n: int):
    if n < 1:
        raise ConfigError("--threads must be >= 1")
    set_num_threads(n)
    with threadpool_limits(limits=n):
        yield


class _Run:
    """Collects what a subcommand read, wrote and how long each stage took."""

    def __init__(self, args, argv):
        self.args = args
        self.argv = list(argv)
        self.inputs = {}
        self.outputs = {}
        self.config = {}
        self.timings = {}
        self._t = time.perf_counter()

    def stage(self, name: str) -> None:
        now = time.perf_counter()
        self.timings[name] = round(now - self._t, 6)
        self._t = now

    def manifest(self) -> dict:
        return {
            "tool": "trajreg",
            "version": __version__,
            "subcommand": self.args.command,
            "argv": self.argv,
            "seed": _seed(self.args),
            "threads": self.args.threads,
            "config": self.config,
            "inputs": {k: [str(p) for p in v] if isinstance(v, list) else str(v)
                       for k, v in self.inputs.items()},
            "outputs": {k: [str(p) for p in v] if isinstance(v, list) else str(v)
                        for k, v in self.outputs.items()},
            "timings_s": self.timings,
        }

    def write_manifest(self, primary) -> Path:
        path = self.args.manifest or Path(str(primary) + ".manifest.json")
        Path(path).write_text(json.dumps(self.manifest(), indent=2, sort_keys=True) + "\n")
        return Path(path)


# ---------------------------------------------------------------------------
# subcommands

def cmd_phantom(args, run: _Run):
    spec = _phantom_spec(args)
    run.config = spec.to_dict()
    img, gm, wm = generate_phantom(spec)
    run.stage("generate")
    write_volume(img, args.image)
    write_volume(gm, args.gm)
    write_volume(wm, args.wm)
    run.outputs.update(image=args.image, gm=args.gm, wm=args.wm)
    if args.labels:
        write_volume(tissue_labels(gm, wm), args.labels)
        run.outputs["labels"] = args.labels
    run.stage("write")
    return args.image


def cmd_make_pair(args, run: _Run):
    lp = _level(args)
    dp = _demons(args)
    run.config = {"level": lp.level, "smoothing_iterations": lp.smoothing.iterations,
                  "lam": lp.smoothing.lam, "demons": dp.to_text()}
    img = _read_scalar(args.image)
    gm, wm = _read_labels(args.gm), _read_labels(args.wm)
    run.inputs.update(image=args.image, gm=args.gm, wm=args.wm)
    run.stage("read")
    pair = _training_pair(img, gm, wm, lp, dp)
    run.stage("pair")
    write_volume(pair.simple, args.out)
    run.outputs["simple"] = args.out
    if args.out_field:
        run.outputs["field"] = write_field(pair.field, args.out_field)
    if args.out_gm:
        write_volume(pair.gm, args.out_gm)
        run.outputs["gm"] = args.out_gm
    if args.out_wm:
        write_volume(pair.wm, args.out_wm)
        run.outputs["wm"] = args.out_wm
    run.stage("write")
    return args.out


def _net_from(values: dict, seed: int) -> MsNet:
    return MsNet(_parse_ints(values["hidden"]), _parse_skips(values["skips"]), seed=seed,
                 output_init=str(values["output_init"]))


def cmd_train(args, run: _Run):
    if len(args.complex) != len(args.simple):
        raise ConfigError("--complex and --simple need the same number of files")
    if args.mask and len(args.mask) != len(args.complex):
        raise ConfigError("give one --mask per training pair")
    seed = _seed(args)
    values = _resolve(args, TRAIN_KEYS, dict(NET_DEFAULTS))
    cfg = TrainConfig.from_mapping({k: values[k] for k in values if k not in NET_DEFAULTS}
                                   | {"seed": seed})
    net = _net_from(values, seed)
    run.config = {"train": cfg.to_text(), **{k: values[k] for k in NET_DEFAULTS}}
    pairs = []
    for i, (c, s) in enumerate(zip(args.complex, args.simple)):
        mask = None
        if args.mask:
            m = _read_labels(args.mask[i])
            mask = BrainMask.from_array(m.data != 0, m.spacing, m.origin)
        pairs += training_patches(_read_scalar(c), _read_scalar(s), mask,
                                  cfg.patches_per_pair, seed * 1_000_003 + i, cfg.patch_size)
    run.inputs.update(complex=list(args.complex), simple=list(args.simple))
    run.stage("sample")
    net, history = train(net, pairs, cfg)
    run.stage("train")
    save_net(net, args.out)
    summary = Path(str(args.out) + ".txt")
    summary.write_text(net_summary(net))
    hist_path = args.history or Path(str(args.out) + ".loss.tsv")
    Path(hist_path).write_text("epoch\tmean_ssd\n" + "".join(
        f"{i + 1}\t{v:.17g}\n" for i, v in enumerate(history)))
    run.outputs.update(net=args.out, summary=summary, history=hist_path)
    if args.figure:
        from .plotting import plot_loss_history
        run.outputs["figure"] = plot_loss_history(history, args.figure)
    run.stage("write")
    return args.out


def cmd_simplify(args, run: _Run):
    net = load_net(args.net)
    vol = _read_scalar(args.image)
    run.inputs.update(net=args.net, image=args.image)
    out = simplify_volume(net, vol)
    run.stage("simplify")
    write_volume(out, args.out)
    run.outputs["simple"] = args.out
    return args.out


def cmd_trajectory(args, run: _Run):
    nets = [load_net(p) for p in args.nets]
    vol = _read_scalar(args.image)
    run.inputs.update(nets=list(args.nets), image=args.image)
    traj = build_trajectory(vol, nets)
    run.stage("trajectory")
    paths = []
    for k, img in enumerate(traj.images):
        p = Path(f"{args.out_prefix}_level{k}.nii")
        write_volume(img, p)
        paths.append(p)
    run.outputs["images"] = paths
    scores = None
    if args.threshold is not None:
        scores = [intensity_fold_energy(img, args.threshold) for img in traj.images]
        text = "level\tfold_energy\n" + "".join(f"{k}\t{s:.6f}\n" for k, s in enumerate(scores))
        report = Path(f"{args.out_prefix}_fold_energy.tsv")
        report.write_text(text)
        sys.stdout.write(text)
        run.outputs["report"] = report
        run.config = {"threshold": args.threshold}
    if args.figure:
        from .plotting import plot_trajectory
        run.outputs["figure"] = plot_trajectory(traj.images, args.figure, scores)
    run.stage("write")
    return paths[0]


def cmd_register(args, run: _Run):
    dp = _demons(args)
    run.config = {"demons": dp.to_text()}
    fixed, moving = _read_scalar(args.fixed), _read_scalar(args.moving)
    run.inputs.update(fixed=args.fixed, moving=args.moving)
    res = demons_register(fixed, moving, dp)
    run.stage("register")
    run.outputs["field"] = write_field(res.field, args.out_field)
    if args.out_warped:
        write_volume(warp(moving, res.field), args.out_warped)
        run.outputs["warped"] = args.out_warped
    run.stage("write")
    return args.out_field


def cmd_guided(args, run: _Run):
    dp = _demons(args)
    n = args.levels if args.levels is not None else len(args.nets)
    if n < 0 or n > len(args.nets):
        raise ConfigError(f"--levels {n} needs at least that many --nets (got {len(args.nets)})")
    nets = [load_net(p) for p in args.nets[:n]]
    run.config = {"levels": n, "demons": dp.to_text()}
    fixed, moving = _read_scalar(args.fixed), _read_scalar(args.moving)
    run.inputs.update(fixed=args.fixed, moving=args.moving, nets=list(args.nets[:n]))
    res = guided_register(fixed, moving, nets, dp)
    run.stage("guided_register")
    run.outputs["field"] = write_field(res.field, args.out_field)
    if args.out_warped:
        write_volume(res.warped, args.out_warped)
        run.outputs["warped"] = args.out_warped
    if args.steps_prefix:
        run.outputs["steps"] = [p for i, f in enumerate(res.fields)
                                for p in write_field(f, f"{args.steps_prefix}_step{i + 1}.nii")]
    if args.trace:
        lines = ["step\tlevel\titeration\tmse"]
        for i, step in enumerate(res.traces):
            for lv, trace in enumerate(step):
                lines += [f"{i + 1}\t{lv}\t{j}\t{v:.9g}" for j, v in enumerate(trace)]
        Path(args.trace).write_text("\n".join(lines) + "\n")
        run.outputs["trace"] = args.trace
    if args.figure:
        from .plotting import plot_registration_traces
        run.outputs["figure"] = plot_registration_traces(res.traces, args.figure)
    run.stage("write")
    return args.out_field


def cmd_metrics(args, run: _Run):
    fixed = _read_labels(args.fixed)
    phi = read_field(args.field) if args.field else None
    if args.warped:
        warped = _read_labels(args.warped)
        run.inputs["warped"] = args.warped
    elif args.moving:
        if phi is None:
            raise ConfigError("--moving needs --field to produce the warped labels")
        warped = warp(_read_labels(args.moving), phi, interp="nearest")
        run.inputs["moving"] = args.moving
    else:
        raise ConfigError("give --warped, or --moving with --field")
    run.inputs["fixed"] = args.fixed
    if args.field:
        run.inputs["field"] = args.field
    labels = list(_parse_ints(args.labels)) if args.labels else None
    report = evaluate(warped, fixed, labels, phi)
    run.stage("evaluate")
    run.outputs["report"] = report.write(args.out)
    sys.stdout.write(report.to_table())
    if args.figure:
        from .plotting import plot_metric_report
        run.outputs["figure"] = plot_metric_report(report, args.figure)
    run.stage("write")
    return args.out


def cmd_replay(args, run: _Run):
    manifest = json.loads(Path(args.replay_manifest).read_text())
    argv = manifest.get("argv")
    if not isinstance(argv, list) or not argv or argv[0] == "replay":
        raise ConfigError(f"{args.replay_manifest}: no replayable command recorded")
    code = main(argv)
    if code != 0:
        raise TrajregError(f"replayed command exited with status {code}")
    return None


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trajreg",
        description="Trajectory-guided deformable registration toolkit.")
    parser.add_argument("--version", action="version", version=f"trajreg {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("phantom", help="generate a folded-cortex phantom")
    p.add_argument("--image", type=Path, required=True, help="intensity volume output")
    p.add_argument("--gm", type=Path, required=True, help="grey-matter label output")
    p.add_argument("--wm", type=Path, required=True, help="white-matter label output")
    p.add_argument("--labels", type=Path, help="merged 0/1/2 tissue label output")
    _add_keys(p, PHANTOM_KEYS, "phantom")
    _common(p)
    p.set_defaults(func=cmd_phantom, keys=PHANTOM_KEYS)

    p = sub.add_parser("make-pair", help="ground-truth simple image for one smoothing level")
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--gm", type=Path, required=True)
    p.add_argument("--wm", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="simple image output")
    p.add_argument("--out-field", type=Path, help="label registration field output")
    p.add_argument("--out-gm", type=Path, help="simplified grey-matter labels")
    p.add_argument("--out-wm", type=Path, help="simplified white-matter labels")
    _add_keys(p, LEVEL_KEYS, "level")
    _add_keys(p, DEMONS_KEYS, "demons")
    _common(p)
    p.set_defaults(func=cmd_make_pair, keys=LEVEL_KEYS | DEMONS_KEYS)

    p = sub.add_parser("train", help="train one simplification network")
    p.add_argument("--complex", type=Path, nargs="+", required=True)
    p.add_argument("--simple", type=Path, nargs="+", required=True)
    p.add_argument("--mask", type=Path, nargs="+", help="sampling masks, one per pair")
    p.add_argument("--out", type=Path, required=True, help="network output")
    p.add_argument("--history", type=Path, help="per-epoch loss table (default <out>.loss.tsv)")
    p.add_argument("--figure", type=Path, help="loss-curve figure")
    _add_keys(p, TRAIN_KEYS, "training")
    _common(p)
    p.set_defaults(func=cmd_train, keys=TRAIN_KEYS)

    p = sub.add_parser("simplify", help="apply one network to one volume")
    p.add_argument("--net", type=Path, required=True)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _common(p)
    p.set_defaults(func=cmd_simplify, keys={})

    p = sub.add_parser("trajectory", help="apply a network sequence")
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--nets", type=Path, nargs="*", default=[])
    p.add_argument("--out-prefix", type=Path, required=True,
                   help="writes <prefix>_level<k>.nii for k = 0..n")
    p.add_argument("--threshold", type=float, help="report fold energy of image > threshold")
    p.add_argument("--figure", type=Path)
    _common(p)
    p.set_defaults(func=cmd_trajectory, keys={})

    p = sub.add_parser("register", help="plain diffeomorphic demons")
    p.add_argument("--fixed", type=Path, required=True)
    p.add_argument("--moving", type=Path, required=True)
    p.add_argument("--out-field", type=Path, required=True)
    p.add_argument("--out-warped", type=Path)
    _add_keys(p, DEMONS_KEYS, "demons")
    _common(p)
    p.set_defaults(func=cmd_register, keys=DEMONS_KEYS)

    p = sub.add_parser("guided-register", help="trajectory-guided registration")
    p.add_argument("--fixed", type=Path, required=True)
    p.add_argument("--moving", type=Path, required=True)
    p.add_argument("--nets", type=Path, nargs="*", default=[])
    p.add_argument("--levels", type=int, help="use the first n nets (default: all)")
    p.add_argument("--out-field", type=Path, required=True)
    p.add_argument("--out-warped", type=Path)
    p.add_argument("--steps-prefix", type=Path, help="also write every step field")
    p.add_argument("--trace", type=Path, help="per-iteration similarity table")
    p.add_argument("--figure", type=Path, help="similarity-trace figure")
    _add_keys(p, DEMONS_KEYS, "demons")
    _common(p)
    p.set_defaults(func=cmd_guided, keys=DEMONS_KEYS)

    p = sub.add_parser("metrics", help="overlap and surface-distance report")
    p.add_argument("--fixed", type=Path, required=True, help="fixed (target) labels")
    p.add_argument("--warped", type=Path, help="already warped moving labels")
    p.add_argument("--moving", type=Path, help="moving labels, warped through --field")
    p.add_argument("--field", type=Path, help="deformation field (also adds Jacobian stats)")
    p.add_argument("--labels", help="comma-separated labels (default: all nonzero)")
    p.add_argument("--out", type=Path, required=True, help="report table; JSON next to it")
    p.add_argument("--figure", type=Path)
    _common(p)
    p.set_defaults(func=cmd_metrics, keys={})

    p = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    p.add_argument("replay_manifest", type=Path, metavar="MANIFEST")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_replay, keys={}, config=None, manifest=None, seed=None)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    run = _Run(args, argv)
    try:
        _load_config(args, set(args.keys) | set(COMMON_KEYS))
        with _threads(args.threads):
            primary = args.func(args, run)
        if primary is not None:
            run.write_manifest(primary)
    except (TrajregError, OSError, ValueError) as exc:
        print(f"trajreg {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
