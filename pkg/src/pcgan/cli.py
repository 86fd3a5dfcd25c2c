"""Command-line entry point.

Exit codes: 0 ok, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from . import data as pdata
from .diffcore import NonFiniteError, ShapeError
from .losses import lemma1_verify
from .metrics import coverage, d2f
from .nets import encode, generate_points, hierarchical_sample
from .ot import AuctionConfig, AuctionError, auction_assign, hungarian_assign
from .trainer import TrainConfig, TrainingError, eval_reconstruction, load_checkpoint, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
HELP_WIDTH = 100


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _formatter(prog):
    return argparse.HelpFormatter(prog, width=HELP_WIDTH)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False, formatter_class=_formatter)
    common.add_argument("--seed", type=int, default=0, help="seed for every random draw (default 0)")
    common.add_argument("--threads", type=int, default=None,
                        help="worker threads for inference-only metrics (default: $PCGAN_THREADS or 1)")

    p = _Parser(prog="pcgan", formatter_class=_formatter,
                description="Point-cloud GAN with a sandwiched Wasserstein objective.",
                epilog="exit codes: 0 ok, 1 usage error, 2 data error, 3 numeric failure")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    def cmd(name, help_text):
        return sub.add_parser(name, parents=[common], help=help_text, description=help_text,
                              formatter_class=_formatter)

    g = cmd("gen-data", "generate the circle benchmark or sample clouds from OFF meshes")
    g.add_argument("kind", choices=["circles", "meshes"])
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--m", type=int, default=10_000, help="number of circles (default 10000)")
    g.add_argument("--n", type=int, default=100, help="points per circle (default 100)")
    g.add_argument("--mesh", nargs="+", default=[], help="OFF files (meshes)")
    g.add_argument("--samples", type=int, default=10_000, help="points per mesh (default 10000)")
    g.add_argument("--no-rotate", action="store_true", help="skip the eight x-y rotations (meshes)")
    g.add_argument("--text", action="store_true", help="write text clouds instead of binary (meshes)")
    g.add_argument("--binary", action="store_true", help="write binary clouds (circles)")

    t = cmd("train", "train stage 1 (conditional) or stage 2 (hierarchical)")
    t.add_argument("--config", help="JSON or key=value config file")
    t.add_argument("--manifest", help="training manifest")
    t.add_argument("--out", help="checkpoint and log directory")
    t.add_argument("--stage", choices=["conditional", "hierarchical"])
    t.add_argument("--steps", type=int)
    t.add_argument("--lam", type=str, help="sandwich weight on W_L, e.g. 1/21")
    t.add_argument("--stage1", help="stage-1 checkpoint (hierarchical stage)")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config field; repeatable")

    s = cmd("sample", "sample clouds from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--cloud", help="reconstruct this cloud through Q and G_x instead of hierarchical sampling")
    s.add_argument("--count", type=int, default=1, help="number of clouds (default 1)")
    s.add_argument("--n", type=int, default=None, help="points per cloud (default 500 in 2D, 2048 in 3D)")

    o = cmd("ot", "transport cost between two equal-size clouds")
    o.add_argument("--a", "--x", dest="a", required=True, help="first cloud file")
    o.add_argument("--b", "--y", dest="b", required=True, help="second cloud file, same size")
    o.add_argument("--metric", choices=["l1", "l2"], default="l1")
    o.add_argument("--eps-rel", type=float, default=0.01, help="final epsilon relative to mean cost (default 0.01)")
    o.add_argument("--exact", action="store_true", help="also report the exact Hungarian cost")

    m = cmd("metrics", "distance-to-face and coverage of a cloud against a mesh")
    m.add_argument("--cloud", required=True)
    m.add_argument("--mesh", required=True)
    m.add_argument("--cov-threshold", type=float, default=math.inf, help="coverage distance threshold (default off)")

    e = cmd("eval", "reconstruction metrics on a test manifest")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--out", required=True, help="per-object CSV")
    e.add_argument("--n", type=int, default=None, help="generated points per object")
    e.add_argument("--cov-threshold", type=float, default=math.inf)

    lc = cmd("lemma-check", "find a sandwich weight tighter than either bound")
    lc.add_argument("--eps1", type=float, required=True)
    lc.add_argument("--eps2", type=float, required=True)
    lc.add_argument("--w", type=float, default=1.0, help="true distance (default 1)")

    x = cmd("export-plot", "SVG and CSV of a loss log or of point clouds")
    x.add_argument("--log", help="training log CSV")
    x.add_argument("--cloud", nargs="+", default=[], help="cloud files for a scatter plot")
    x.add_argument("--axis", choices=["x", "y", "z"], default="z", help="projection axis for 3D clouds (default z)")
    x.add_argument("--columns", default="w_upper,w_lower,sandwich", help="log columns to draw")
    x.add_argument("--out", required=True, help="SVG path; a CSV with the same stem is written next to it")
    return p


def full_help() -> str:
    """Top-level help followed by the help of every command."""
    parser = build_parser()
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    return "\n".join([parser.format_help()] + [sp.format_help() for sp in sub.choices.values()])


# commands

def _gen_data(a) -> int:
    if a.kind == "circles":
        manifest = pdata.write_circle_dataset(a.out, pdata.CircleDatasetConfig(m=a.m, n=a.n, seed=a.seed), a.binary)
    else:
        if not a.mesh:
            raise UsageError("gen-data meshes: --mesh is required")
        angles = (0.0,) if a.no_rotate else pdata.ROTATION_ANGLES
        manifest = pdata.write_mesh_dataset(a.out, a.mesh, pdata.PreprocessConfig(a.samples, angles), a.seed,
                                            binary=not a.text)
    print(manifest)
    return EXIT_OK


def _train(a) -> int:
    values = {}
    if a.config:
        values = dict(vars(TrainConfig.from_file(a.config)))
    for key, val in (("manifest", a.manifest), ("out_dir", a.out), ("stage", a.stage), ("steps", a.steps),
                     ("lam", a.lam), ("stage1_checkpoint", a.stage1)):
        if val is not None:
            values[key] = val
    for item in a.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    values["seed"] = a.seed
    config = TrainConfig.from_mapping(values)
    if not config.manifest:
        raise UsageError("train: a manifest is required (--manifest or config)")
    report = train(config)
    print(f"steps={len(report.w_upper)} final_w_upper={report.w_upper[-1]!r} checkpoint={report.checkpoint}")
    return EXIT_OK


def _sample(a) -> int:
    model, manifest = load_checkpoint(a.checkpoint)
    norm = pdata.Normalization.from_json(manifest["normalization"]) if manifest.get("normalization") else None
    n = a.n or (500 if model.arch.dim == 2 else 2048)
    if a.count < 1 or n < 1:
        raise UsageError("sample: --count and --n must be >= 1")
    if not a.cloud and not model.object_generator_trained:
        raise pdata.DataError(f"{a.checkpoint}: no trained object generator; train stage 2 or pass --cloud")
    rng = np.random.default_rng(a.seed)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    if a.cloud:
        x = pdata.load_cloud(a.cloud)
        psi = encode(model.encoder, norm.apply(x) if norm else x)
    for k in range(a.count):
        pts = generate_points(model.generator, psi, n, rng) if a.cloud else hierarchical_sample(model, n, rng)
        path = out / f"sample_{k:04d}.txt"
        pdata.save_cloud(path, norm.invert(pts) if norm else pts)
        print(path)
    return EXIT_OK


def _ot(a) -> int:
    x, y = pdata.load_cloud(a.a), pdata.load_cloud(a.b)
    if x.shape != y.shape:
        raise pdata.DataError(f"clouds differ in shape: {x.shape} vs {y.shape}")
    res = auction_assign(x, y, AuctionConfig(eps_rel=a.eps_rel), a.metric)
    # the additive guarantee bounds the total cost by optimum + n * eps_final
    row = {"n": len(x), "w_upper": res.average, "total": res.total, "eps_final": res.eps_final,
           "gap_bound": len(x) * res.eps_final, "rounds": res.rounds}
    if a.exact:
        row["exact"] = hungarian_assign(x, y, a.metric).average
    _print_csv(row)
    return EXIT_OK


def _metrics(a) -> int:
    pts = pdata.load_cloud(a.cloud)
    mesh = pdata.load_mesh(a.mesh)
    if pts.shape[1] != 3:
        raise pdata.DataError(f"{a.cloud}: expected 3D points")
    _print_csv({"d2f": d2f(pts, mesh), "coverage": coverage(pts, mesh, a.cov_threshold),
                "faces": len(mesh), "points": len(pts)})
    return EXIT_OK


def _eval(a) -> int:
    s = eval_reconstruction(a.checkpoint, a.manifest, a.out, a.n, a.seed, a.cov_threshold)
    summary = {"objects": len(s.rows), "median_w_upper": s.median_w_upper}
    if s.ks_radius is not None:
        summary["ks_radius"] = s.ks_radius
        summary.update({f"quadrant_{q}": f for q, f in enumerate(s.quadrant_fractions)})
    if s.mean_d2f is not None:
        summary.update(mean_d2f=s.mean_d2f, mean_coverage=s.mean_coverage)
    _print_csv(summary)
    return EXIT_OK


def _lemma_check(a) -> int:
    r = lemma1_verify(a.w, a.eps1, a.eps2)
    lo, hi = r.window
    _print_csv({"window_lo": lo, "window_hi": hi, "lambda": r.lam, "worst_error": r.worst_error,
                "one_sided_error": r.one_sided_error, "tightening": r.one_sided_error - r.worst_error})
    return EXIT_OK


def _export_plot(a) -> int:
    out = Path(a.out)
    if bool(a.log) == bool(a.cloud):
        raise UsageError("export-plot: give exactly one of --log or --cloud")
    if a.log:
        rows = _read_log(a.log)
        cols = [c for c in a.columns.split(",") if c]
        missing = [c for c in cols if c not in rows[0]]
        if missing:
            raise pdata.DataError(f"{a.log}: no column(s) {', '.join(missing)}")
        steps = [float(r["step"]) for r in rows]
        series = {c: [float(r[c]) for r in rows] for c in cols}
        out.write_text(line_chart_svg(steps, series))
        shutil.copyfile(a.log, out.with_suffix(".csv"))
    else:
        clouds = [project(pdata.load_cloud(p), a.axis) for p in a.cloud]
        out.write_text(scatter_svg(clouds))
        with open(out.with_suffix(".csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["cloud", "u", "v"])
            for k, c in enumerate(clouds):
                for u, v in c:
                    w.writerow([k, repr(float(u)), repr(float(v))])
    print(out)
    return EXIT_OK


# plotting helpers

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
_AXES = {"x": 0, "y": 1, "z": 2}


def project(points: np.ndarray, axis: str = "z") -> np.ndarray:
    """2D clouds pass through; 3D clouds drop the coordinate along ``axis``."""
    if points.ndim != 2 or points.shape[1] not in (2, 3):
        raise pdata.DataError(f"cannot plot points of shape {points.shape}")
    if points.shape[1] == 2:
        return points
    keep = [i for i in range(3) if i != _AXES[axis]]
    return points[:, keep]


def _frame(xs, ys, width=640, height=480, pad=40):
    x0, x1 = float(np.min(xs)), float(np.max(xs))
    y0, y1 = float(np.min(ys)), float(np.max(ys))
    x1 = x1 if x1 > x0 else x0 + 1.0
    y1 = y1 if y1 > y0 else y0 + 1.0

    def to_px(x, y):
        return (pad + (x - x0) / (x1 - x0) * (width - 2 * pad),
                height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad))

    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}">\n<rect width="100%" height="100%" fill="white"/>\n'
            f'<rect x="{pad}" y="{pad}" width="{width - 2 * pad}" height="{height - 2 * pad}" '
            f'fill="none" stroke="#888"/>\n'
            f'<text x="{pad}" y="{height - 10}" font-size="11">x: [{x0:.4g}, {x1:.4g}]  y: [{y0:.4g}, {y1:.4g}]'
            f'</text>\n')
    return head, to_px


def line_chart_svg(steps, series: dict) -> str:
    allv = np.concatenate([np.asarray(v, dtype=float) for v in series.values()])
    head, to_px = _frame(steps, allv)
    parts = [head]
    for k, (name, vals) in enumerate(series.items()):
        color = PALETTE[k % len(PALETTE)]
        pts = " ".join("%.2f,%.2f" % to_px(s, v) for s, v in zip(steps, vals))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1" points="{pts}"/>\n')
        parts.append(f'<text x="50" y="{20 + 14 * k}" font-size="12" fill="{color}">{name}</text>\n')
    parts.append("</svg>\n")
    return "".join(parts)


def scatter_svg(clouds: list) -> str:
    allp = np.concatenate(clouds)
    head, to_px = _frame(allp[:, 0], allp[:, 1])
    parts = [head]
    for k, c in enumerate(clouds):
        color = PALETTE[k % len(PALETTE)]
        for u, v in c:
            px, py = to_px(u, v)
            parts.append(f'<circle cx="{px:.2f}" cy="{py:.2f}" r="1.5" fill="{color}"/>\n')
    parts.append("</svg>\n")
    return "".join(parts)


def _read_log(path) -> list[dict]:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as e:
        raise pdata.DataError(f"{path}: {e.strerror}") from None
    if not rows or "step" not in rows[0]:
        raise pdata.DataError(f"{path}: not a training log")
    return rows


def _print_csv(row: dict) -> None:
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(row.keys())
    w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row.values()])


COMMANDS = {"gen-data": _gen_data, "train": _train, "sample": _sample, "ot": _ot, "metrics": _metrics,
            "eval": _eval, "lemma-check": _lemma_check, "export-plot": _export_plot}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.threads is not None:
            if args.threads < 1:
                raise UsageError("--threads must be >= 1")
            os.environ["PCGAN_THREADS"] = str(args.threads)
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteError, TrainingError, AuctionError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (pdata.DataError, ShapeError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as e:
        # configuration values that parse but fail validation
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
