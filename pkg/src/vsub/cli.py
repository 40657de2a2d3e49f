"""Command-line entry point: precompute, verify, deform-batch, bench, serve.

Config precedence is flags > config file > built-in defaults.  The config
file is flat JSON keyed by the long option names of the subcommand.  All
file outputs (containers, CSV traces, exported meshes) are deterministic
for a fixed config and seed; timing lines go to stderr so stdout stays
byte-stable too.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from .errors import NumericError, ParseError, ValidationError

_PRIMITIVES = ("plane", "cylinder", "bar", "solid_cylinder")

_DEFAULTS = {
    "precompute": {
        "m": 33,
        "d": 12,
        "alpha": 0.1,
        "beta": 0.1,
        "gamma": 0.0,
        "mode": "sample",
        "seed": 42,
        "patches": [],
    },
    "verify": {"instances": 200, "n": 24, "seed": 7, "admissible": False},
    "deform-batch": {"timings": False},
    "bench": {
        "mesh": "cylinder",
        "m": 33,
        "d": 12,
        "frames": 24,
        "seed": 42,
    },
    "serve": {"host": "127.0.0.1", "port": 7878, "ui": None},
}


def _load_config(path):
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON config: {exc}", path=path) from exc
    if not isinstance(cfg, dict):
        raise ParseError("config must be a JSON object", path=path)
    return cfg


def _merge(args, command):
    """Resolve option values: explicit flags > config file > defaults."""
    merged = dict(_DEFAULTS[command])
    if getattr(args, "config", None):
        cfg = _load_config(args.config)
        unknown = set(cfg) - set(merged) - {"mesh", "out", "model", "script", "csv", "out_dir", "report"}
        if unknown:
            raise ValidationError(
                f"unknown config keys: {', '.join(sorted(unknown))}"
            )
        merged.update(cfg)
    for key, value in vars(args).items():
        if key in ("command", "config"):
            continue
        if value is not None:
            merged[key] = value
    return merged


def _parse_mesh_arg(spec):
    """A mesh argument is either a file path or 'primitive:key=val,...'."""
    from .mesh import generate_primitive, load_mesh

    name, _, rest = spec.partition(":")
    if name in _PRIMITIVES and not os.path.exists(spec):
        params = {}
        if rest:
            for item in rest.split(","):
                key, _, raw = item.partition("=")
                if not _:
                    raise ValidationError(
                        f"bad primitive parameter {item!r} (want key=value)"
                    )
                try:
                    params[key] = int(raw)
                except ValueError:
                    try:
                        params[key] = float(raw)
                    except ValueError:
                        raise ValidationError(
                            f"primitive parameter {key} must be numeric"
                        ) from None
        return generate_primitive(name, **params)
    return load_mesh(spec)


def _parse_patches(raw):
    from .deform import AffinePatchSpec

    specs = []
    for entry in raw:
        if isinstance(entry, dict):  # config-file form
            specs.append(
                AffinePatchSpec(
                    vertices=np.asarray(entry["vertices"], dtype=np.int64),
                    mode=entry.get("mode", "rigid"),
                )
            )
            continue
        mode, _, ids = entry.partition(":")
        if not _ or not ids:
            raise ValidationError(
                f"bad patch spec {entry!r} (want mode:i0,i1,...)"
            )
        try:
            verts = np.asarray([int(v) for v in ids.split(",")], dtype=np.int64)
        except ValueError:
            raise ValidationError(f"patch vertices must be integers: {entry!r}") from None
        specs.append(AffinePatchSpec(vertices=verts, mode=mode))
    return specs


def _cmd_precompute(args):
    from .container import write_model
    from .deform import EnergyParams, build_model

    cfg = _merge(args, "precompute")
    if not cfg.get("mesh"):
        raise ValidationError("precompute needs --mesh")
    if not cfg.get("out"):
        raise ValidationError("precompute needs --out")
    mesh = _parse_mesh_arg(cfg["mesh"])
    params = EnergyParams(alpha=cfg["alpha"], beta=cfg["beta"], gamma=cfg["gamma"])
    t0 = time.perf_counter()
    model = build_model(
        mesh,
        m=cfg["m"],
        d=cfg["d"],
        params=params,
        mode=cfg["mode"],
        patches=_parse_patches(cfg["patches"]),
        seed=cfg["seed"],
    )
    dt = time.perf_counter() - t0
    write_model(model, cfg["out"])
    print(
        f"wrote {cfg['out']}: n={model.n} r={model.r} d={model.d} "
        f"m={model.m} s={model.s} kind={model.kind} "
        f"subspace={model.memory_bytes() / 1e6:.1f} MB"
    )
    print(f"precompute {dt:.2f} s", file=sys.stderr)
    return 0


def _cmd_verify(args):
    from .hatspace import run_verification

    cfg = _merge(args, "verify")
    report = run_verification(
        instances=cfg["instances"],
        n=cfg["n"],
        seed=cfg["seed"],
        admissible=cfg["admissible"],
    )
    summary = report["summary"]
    if cfg.get("report"):
        with open(cfg["report"], "w") as fh:
            json.dump(report, fh, sort_keys=True, indent=1)
    ok = summary["all_bounded"] and summary.get("all_exact", True)
    mode = report["config"]["mode"]
    print(
        f"{mode}: {summary['count']} instances, "
        f"min slack {summary['min_slack']:.3e}, "
        f"min lemma slack {summary['min_lemma_slack']:.3e}, "
        f"{'ok' if ok else 'VIOLATED'}"
    )
    if not ok:
        raise NumericError("verification found violated bounds")
    return 0


def _cmd_deform_batch(args):
    from .container import read_model
    from .runtime import load_script, run_batch

    cfg = _merge(args, "deform-batch")
    for key in ("model", "script"):
        if not cfg.get(key):
            raise ValidationError(f"deform-batch needs --{key}")
    model = read_model(cfg["model"])
    ops = load_script(cfg["script"])
    out_dir = cfg.get("out_dir")
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        for op in ops:
            if op.get("op") == "export" and not os.path.isabs(op.get("path", "")):
                op["path"] = os.path.join(out_dir, op["path"])
    rows, _ = run_batch(
        model, ops, csv_path=cfg.get("csv"), include_timings=cfg["timings"]
    )
    print(f"solved {len(rows)} frames")
    return 0


def _cmd_bench(args):
    """One row of build/solve timings, shaped like a cost-summary table."""
    from .deform import build_model
    from .runtime import RuntimeOptions, Session

    cfg = _merge(args, "bench")
    mesh = _parse_mesh_arg(cfg["mesh"])
    t0 = time.perf_counter()
    model = build_model(mesh, m=cfg["m"], d=cfg["d"], seed=cfg["seed"])
    t_build = time.perf_counter() - t0

    sess = Session(model, RuntimeOptions(iterations=1))
    ids = model.proxy_indices[:3] if model.proxy_indices.size else np.array([0])
    t0 = time.perf_counter()
    sess.set_handles(vertex_ids=ids)
    t_prep = time.perf_counter() - t0
    targets = mesh.vertices[ids] + np.array([0.0, 0.0, 0.05 * np.ptp(mesh.vertices)])
    sess.set_targets(vertex_targets=targets)
    sess.step()  # warm start
    frames = int(cfg["frames"])
    t0 = time.perf_counter()
    for _ in range(frames):
        sess.step()
    t_iter = (time.perf_counter() - t0) / frames
    t0 = time.perf_counter()
    for _ in range(frames):
        sess.reconstruct()
    t_rec = (time.perf_counter() - t0) / frames

    row = {
        "model": cfg["mesh"],
        "verts": model.n,
        "type": model.kind,
        "proxies": f"{model.m}/{model.d}",
        "iter_us": t_iter * 1e6,
        "reconstruct_ms": t_rec * 1e3,
        "precompute_s": t_build,
        "subspace_gb": model.memory_bytes() / 1e9,
        "prepare_ms": t_prep * 1e3,
    }
    if cfg.get("report"):
        with open(cfg["report"], "w") as fh:
            json.dump(row, fh, sort_keys=True, indent=1)
    header = (
        f"{'model':<16}{'verts':>8}{'type':>9}{'proxies':>9}"
        f"{'1-iter us':>11}{'rec ms':>8}{'pre s':>7}{'GB':>7}{'prep ms':>9}"
    )
    print(header)
    print(
        f"{row['model']:<16}{row['verts']:>8}{row['type']:>9}{row['proxies']:>9}"
        f"{row['iter_us']:>11.0f}{row['reconstruct_ms']:>8.2f}"
        f"{row['precompute_s']:>7.2f}{row['subspace_gb']:>7.3f}"
        f"{row['prepare_ms']:>9.1f}"
    )
    return 0


def _cmd_serve(args):
    cfg = _merge(args, "serve")
    import uvicorn

    from .service import create_app

    ui = cfg.get("ui")
    if ui is not None and not os.path.isdir(ui):
        raise ValidationError(f"--ui path {ui!r} is not a directory")
    app = create_app(ui_dir=ui)
    uvicorn.run(app, host=cfg["host"], port=int(cfg["port"]), log_level="warning")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="vsub",
        description="Reduced deformation models: precompute subspaces, "
        "verify the error bounds, run scripted deformations, benchmark, "
        "or serve interactive sessions.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("precompute", help="build a model and write a container")
    p.add_argument("--mesh", help="mesh file or primitive spec like plane:nx=8,ny=8")
    p.add_argument("--m", type=int, help="linear proxy count")
    p.add_argument("--d", type=int, help="rotation cluster count")
    p.add_argument("--alpha", type=float, help="increment magnitude weight")
    p.add_argument("--beta", type=float, help="normal pinning weight (surfaces)")
    p.add_argument("--gamma", type=float, help="neighbor smoothness weight")
    p.add_argument("--mode", choices=("sample", "group"), help="proxy style")
    p.add_argument("--seed", type=int)
    p.add_argument("--patch", dest="patches", action="append",
                   help="affine patch, mode:i0,i1,... (repeatable)")
    p.add_argument("--out", help="output container path")
    p.add_argument("--config", help="JSON config file")

    p = sub.add_parser("verify", help="Monte-Carlo check of the reduction bounds")
    p.add_argument("--instances", type=int)
    p.add_argument("--n", type=int, help="problem dimension")
    p.add_argument("--seed", type=int)
    p.add_argument("--admissible", action="store_true", default=None,
                   help="draw admissible subspaces and require exactness")
    p.add_argument("--report", help="write the full JSON report here")
    p.add_argument("--config", help="JSON config file")

    p = sub.add_parser("deform-batch", help="run a scripted deformation")
    p.add_argument("--model", help="container from precompute")
    p.add_argument("--script", help="JSON-lines batch script")
    p.add_argument("--csv", help="per-frame trace output")
    p.add_argument("--timings", action="store_true", default=None,
                   help="include wall-clock columns in the trace")
    p.add_argument("--out-dir", dest="out_dir", help="directory for exported frames")
    p.add_argument("--config", help="JSON config file")

    p = sub.add_parser("bench", help="time precompute and per-frame costs")
    p.add_argument("--mesh")
    p.add_argument("--m", type=int)
    p.add_argument("--d", type=int)
    p.add_argument("--frames", type=int, help="frames to average over")
    p.add_argument("--seed", type=int)
    p.add_argument("--report", help="write timings as JSON here")
    p.add_argument("--config", help="JSON config file")

    p = sub.add_parser("serve", help="run the WebSocket session service")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.add_argument("--ui", help="directory of web client assets to serve at /")
    p.add_argument("--config", help="JSON config file")

    return parser


_COMMANDS = {
    "precompute": _cmd_precompute,
    "verify": _cmd_verify,
    "deform-batch": _cmd_deform_batch,
    "bench": _cmd_bench,
    "serve": _cmd_serve,
}


def run(argv=None):
    args = build_parser().parse_args(argv)
    return _COMMANDS[args.command](args)


def main(argv=None):
    try:
        return run(argv)
    except ParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
