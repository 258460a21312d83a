"""Command-line front end: ``mxscale <verb> [options]``.

Every verb that writes files also writes ``<verb>.manifest.json`` next to
them; ``mxscale replay <manifest>`` re-runs the recorded command.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .blockquant import QuantConfig, halving_storage_increase, storage_bytes_per_element
from .experiments import (FAMILIES, DistributionSpec, find_crossover, log_grid,
                          mse_sigma_sweep, per_block_mse_pair, sample_tensor)
from .formats import FORMAT_NAMES, FormatError, get_format
from .ingest import ContainerError, load_container, tensor_report
from .theory import theory_curve

log = logging.getLogger("mxscale")

THREADS_ENV = "MXSCALE_THREADS"
MANIFEST_SCHEMA = "mxscale.manifest/1"
LEVELS_SCHEMA = "mxscale.levels/1"
STORAGE_SCHEMA = "mxscale.storage/1"
REPORT_SCHEMA = "mxscale.weights_report/1"


class UsageError(Exception):
    pass


def parse_sigma_grid(text: str) -> np.ndarray:
    """``lo:hi:points`` (log-spaced) or a comma-separated increasing list."""
    try:
        if ":" in text:
            lo, hi, pts = text.split(":")
            return log_grid(float(lo), float(hi), int(pts))
        vals = np.array([float(v) for v in text.split(",") if v.strip()])
    except ValueError as exc:
        raise UsageError(f"invalid sigma grid {text!r}: {exc}") from None
    if vals.size == 0 or np.any(vals <= 0) or np.any(np.diff(vals) <= 0):
        raise UsageError(f"invalid sigma grid {text!r}: need positive increasing values")
    return vals


def parse_config(text: str, per_tensor: bool = False) -> QuantConfig:
    """``elem:scale:N`` as used by weights-report."""
    parts = text.split(":")
    if len(parts) != 3:
        raise UsageError(f"config {text!r} is not elem:scale:N")
    try:
        return QuantConfig.make(parts[0], parts[1], int(parts[2]), per_tensor_scaling=per_tensor)
    except ValueError as exc:
        raise UsageError(f"config {text!r}: {exc}") from None


def _default_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def atomic_write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _table(schema: str, columns: list, rows: list, fmt: str, meta: dict | None = None) -> str:
    if fmt == "json":
        return json.dumps({"schema": schema, **(meta or {}), "rows": rows}, indent=2) + "\n"
    buf = io.StringIO()
    buf.write(f"# schema: {schema}\n")
    for k, v in (meta or {}).items():
        buf.write(f"# {k}: {json.dumps(v)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in columns])
    return buf.getvalue()


class Run:
    """Collects outputs of one command and writes its manifest."""

    def __init__(self, args: argparse.Namespace, argv: list):
        self.args = args
        self.argv = argv
        self.out = Path(args.out) if args.out else None
        self.outputs: list = []

    def emit(self, name: str, text: str):
        if self.out is None:
            sys.stdout.write(text)
            return
        path = atomic_write(self.out / name, text)
        self.outputs.append(str(path))
        log.info("wrote %s", path)

    def finish(self, resolved: dict):
        if self.out is None:
            return
        manifest = {
            "schema": MANIFEST_SCHEMA,
            "command": self.args.command,
            "argv": self.argv,
            "config": resolved,
            "seed": getattr(self.args, "seed", None),
            "version": __version__,
            "timestamp": datetime.now(timezone.utc).isoformat(),
            "outputs": self.outputs,
        }
        atomic_write(self.out / f"{self.args.command}.manifest.json",
                     json.dumps(manifest, indent=2) + "\n")

    @property
    def ext(self) -> str:
        return self.args.format


def cmd_levels(run: Run) -> dict:
    t = get_format(run.args.name)
    d = t.describe()
    if t.is_exact:
        rows = []
    else:
        b = np.concatenate([[-np.inf], t.boundaries, [np.inf]])
        rows = [{"index": i, "code": int(c), "level": float(v),
                 "lower_boundary": float(b[i]), "upper_boundary": float(b[i + 1])}
                for i, (c, v) in enumerate(zip(t.codes, t.levels))]
    meta = {"name": t.name, "kind": d["kind"], "bits": d["bits"],
            "max": t.max_value, "min_positive": t.min_positive}
    run.emit(f"levels_{t.name}.{run.ext}",
             _table(LEVELS_SCHEMA, ["index", "code", "level", "lower_boundary", "upper_boundary"],
                    rows, run.ext, meta))
    return {"format": t.spec.to_dict()}


def _curve_text(curve, fmt: str) -> str:
    return curve.to_json() + "\n" if fmt == "json" else curve.to_csv()


def _report_crossovers(curves: dict) -> dict:
    sizes = sorted(curves)
    found = {}
    for a, b in zip(sizes, sizes[1:]):
        xs = find_crossover(curves[a], curves[b])
        found[f"{a}-{b}"] = xs
        shown = ", ".join(f"{x:.4g}" for x in xs) or "none"
        print(f"crossover N={a} vs N={b}: {shown}", file=sys.stderr)
    return found


def cmd_sweep(run: Run) -> dict:
    a = run.args
    grid = parse_sigma_grid(a.sigma_grid)
    dist = DistributionSpec(a.dist, a.seed, a.dof)
    curves = {}
    for n in a.block_size:
        cfg = QuantConfig.make(a.elem, a.scale, n, per_tensor_scaling=a.per_tensor_scaling)
        curves[n] = mse_sigma_sweep(dist, cfg, grid, a.samples, a.threads)
        run.emit(f"sweep_{cfg.label}.{run.ext}", _curve_text(curves[n], run.ext))
    return {"distribution": dist.to_dict(), "element_format": a.elem, "scale_format": a.scale,
            "block_sizes": a.block_size, "sigmas": grid.tolist(), "samples": a.samples,
            "per_tensor_scaling": a.per_tensor_scaling,
            "crossovers": _report_crossovers(curves)}


def cmd_theory(run: Run) -> dict:
    a = run.args
    grid = parse_sigma_grid(a.sigma_grid)
    zero_bin = "literal" if a.paper_zero_bin else "consistent"
    curves = {}
    for n in a.block_size:
        curves[n] = theory_curve(a.elem, a.scale, n, grid, zero_bin=zero_bin,
                                 not_max_model=a.not_max_model)
        run.emit(f"theory_{a.elem}-{a.scale}-n{n}.{run.ext}", _curve_text(curves[n], run.ext))
    return {"element_format": a.elem, "scale_format": a.scale, "block_sizes": a.block_size,
            "sigmas": grid.tolist(), "zero_bin": zero_bin, "not_max_model": a.not_max_model,
            "crossovers": _report_crossovers(curves)}


def cmd_compare_blocks(run: Run) -> dict:
    a = run.args
    small = QuantConfig.make(a.elem, a.scale, a.small_n)
    large = QuantConfig.make(a.elem, a.scale, a.large_n)
    if a.input:
        c = load_container(a.input)
        name = a.tensor or c.names[0]
        x = c.tensor(name).ravel()
        source = {"input": str(a.input), "tensor": name}
    else:
        x = sample_tensor(DistributionSpec(a.dist, a.seed, a.dof), a.samples, a.sigma)
        source = {"distribution": a.dist, "sigma": a.sigma, "samples": a.samples}
    pair = per_block_mse_pair(x, small, large)
    print(f"fraction_above_diagonal: {pair.fraction_above_diagonal:.6f}", file=sys.stderr)
    if run.ext == "json":
        text = json.dumps({"schema": "mxscale.block_pairs/1",
                           "fraction_above_diagonal": pair.fraction_above_diagonal,
                           "mean_difference": pair.mean_difference,
                           "mse_small": pair.mse_small.tolist(),
                           "mse_large": pair.mse_large.tolist()}) + "\n"
    else:
        text = pair.to_csv()
    run.emit(f"pairs_{small.label}_vs_n{a.large_n}.{run.ext}", text)
    return {**source, "small": small.to_dict(), "large": large.to_dict(),
            "fraction_above_diagonal": pair.fraction_above_diagonal,
            "mean_difference": pair.mean_difference}


def cmd_weights_report(run: Run) -> dict:
    a = run.args
    cfgs = {}
    for text in a.configs:
        cfg = parse_config(text, a.per_tensor_scaling)
        cfgs[cfg.label] = cfg
    rows = tensor_report(load_container(a.container), cfgs)
    cols = ["tensor", "numel", "sigma", *cfgs]
    run.emit(f"weights_report.{run.ext}", _table(REPORT_SCHEMA, cols, rows, run.ext))
    return {"container": str(a.container), "configs": {k: c.to_dict() for k, c in cfgs.items()}}


def cmd_storage(run: Run) -> dict:
    a = run.args
    rows = [{"block_size": n,
             "bytes_per_element": storage_bytes_per_element(n, a.elem_bits, a.scale_bits),
             "halving_increase": halving_storage_increase(n, a.elem_bits, a.scale_bits)
             if n % 2 == 0 else ""}
            for n in a.block_size]
    run.emit(f"storage.{run.ext}",
             _table(STORAGE_SCHEMA, ["block_size", "bytes_per_element", "halving_increase"],
                    rows, run.ext, {"elem_bits": a.elem_bits, "scale_bits": a.scale_bits}))
    return {"block_sizes": a.block_size, "elem_bits": a.elem_bits, "scale_bits": a.scale_bits}


def _common(p: argparse.ArgumentParser, seed: bool = True):
    p.add_argument("--out", metavar="DIR", help="output directory (default: stdout, no manifest)")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--threads", type=int, default=_default_threads(),
                   help=f"worker threads (default: ${THREADS_ENV} or 1)")
    if seed:
        p.add_argument("--seed", type=int, default=0, help="RNG seed (u64)")


def _quant_flags(p, elem="e2m1", scale="ue4m3"):
    p.add_argument("--elem", default=elem, choices=FORMAT_NAMES)
    p.add_argument("--scale", default=scale, choices=FORMAT_NAMES)


def _dist_flags(p):
    p.add_argument("--dist", default="normal", choices=FAMILIES)
    p.add_argument("--dof", type=float, default=5.0, help="student-t degrees of freedom")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mxscale", description="Microscaling quantization error toolkit")
    ap.add_argument("-v", "--verbose", action="store_true")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("levels", help="dump a format's level table")
    p.add_argument("name", help=f"format name ({', '.join(FORMAT_NAMES)}) or spec .json path")
    _common(p, seed=False)
    p.set_defaults(fn=cmd_levels)

    p = sub.add_parser("sweep", help="Monte-Carlo MSE vs sigma")
    _dist_flags(p)
    _quant_flags(p)
    p.add_argument("--block-size", type=int, nargs="+", default=[8, 16])
    p.add_argument("--sigma-grid", default="1e-4:10:20")
    p.add_argument("--samples", type=int, default=2 ** 22)
    p.add_argument("--per-tensor-scaling", action="store_true")
    _common(p)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("theory", help="analytical MSE vs sigma with contributions")
    _quant_flags(p)
    p.add_argument("--block-size", type=int, nargs="+", default=[16])
    p.add_argument("--sigma-grid", default="1e-4:10:101")
    p.add_argument("--paper-zero-bin", action="store_true",
                   help="zero-scale boundary at s_min/2 instead of m*s_min/2")
    p.add_argument("--not-max-model", choices=("conditional", "level-truncated"), default="conditional")
    _common(p, seed=False)
    p.set_defaults(fn=cmd_theory)

    p = sub.add_parser("compare-blocks", help="per-block MSE, small vs large block size")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--input", metavar="FILE", help="tensor container or safetensors file")
    src.add_argument("--dist", default="normal", choices=FAMILIES)
    p.add_argument("--dof", type=float, default=5.0, help="student-t degrees of freedom")
    p.add_argument("--tensor", help="tensor name inside --input (default: first)")
    p.add_argument("--sigma", type=float, default=1e-2)
    p.add_argument("--samples", type=int, default=2 ** 20)
    p.add_argument("--small-N", dest="small_n", type=int, default=8)
    p.add_argument("--large-N", dest="large_n", type=int, default=16)
    _quant_flags(p)
    _common(p)
    p.set_defaults(fn=cmd_compare_blocks)

    p = sub.add_parser("weights-report", help="per-tensor sigma and MSE for a container")
    p.add_argument("--container", required=True)
    p.add_argument("--configs", nargs="+", default=["e2m1:ue4m3:8", "e2m1:ue4m3:16"],
                   metavar="ELEM:SCALE:N")
    p.add_argument("--per-tensor-scaling", action="store_true")
    _common(p, seed=False)
    p.set_defaults(fn=cmd_weights_report)

    p = sub.add_parser("storage", help="bytes per element for block sizes")
    p.add_argument("--block-size", type=int, nargs="+", default=[8, 16, 32])
    p.add_argument("--elem-bits", type=int, default=4)
    p.add_argument("--scale-bits", type=int, default=8)
    _common(p, seed=False)
    p.set_defaults(fn=cmd_storage)

    p = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    p.add_argument("manifest")
    p.add_argument("--out", metavar="DIR", help="override the recorded output directory")
    p.set_defaults(fn=None)
    return ap


def _replay(args) -> int:
    doc = json.loads(Path(args.manifest).read_text())
    if doc.get("schema") != MANIFEST_SCHEMA:
        raise UsageError(f"{args.manifest} is not a run manifest")
    argv = list(doc["argv"])
    if args.out:
        if "--out" in argv:
            argv[argv.index("--out") + 1] = args.out
        else:
            argv += ["--out", args.out]
    return main(argv)


def main(argv: list | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "replay":
            return _replay(args)
        seed = getattr(args, "seed", None)
        if seed is not None and not 0 <= seed < 2 ** 64:
            raise UsageError("--seed must be a 64-bit unsigned integer")
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        run = Run(args, argv)
        resolved = args.fn(run)
        run.finish(resolved)
    except (UsageError, FormatError, ContainerError, ValueError, OSError, KeyError) as exc:
        print(f"mxscale {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
