"""``miso`` command line: train, translate, interpolate, eval, gradcheck.

Exit codes: 0 on success, 1 for usage or configuration errors, 2 when a
run is aborted or a verification check fails.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, apply_overrides, load_config
from .data import PGMError, load_pgm_dataset, read_pgm, to_pixels, to_unit_range, write_pgm
from .evaluation import ClassifierError, evaluate_state, interpolate
from .training import CheckpointError, TrainingAborted, load_checkpoint, load_datasets, train

EXIT_OK, EXIT_USAGE, EXIT_ABORT = 0, 1, 2

log = logging.getLogger("miso")


class UsageError(Exception):
    pass


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="miso", description=__doc__.splitlines()[0])
    p.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="RunConfig JSON file")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")

    t = sub.add_parser("train", help="train a model")
    with_config(t)
    t.add_argument("--out", help="run directory (default: io.out_dir)")
    t.add_argument("--resume", help="checkpoint manifest to resume from")

    def translating(sp):
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--input", help="CSV of vectors, or a PGM file or directory; "
                                        "defaults to the first --n-inputs samples of the source domain")
        sp.add_argument("--n-inputs", type=int, default=8)
        sp.add_argument("--direction", choices=("a2b", "b2a"), default="a2b")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", required=True, help="output directory")

    tr = sub.add_parser("translate", help="sample several styles for each input")
    translating(tr)
    tr.add_argument("--n-styles", type=int, default=10)

    ip = sub.add_parser("interpolate", help="walk the style code between two random draws")
    translating(ip)
    ip.add_argument("--steps", type=int, default=11)

    ev = sub.add_parser("eval", help="write an evaluation report for a checkpoint")
    with_config(ev)
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--out", help="report path (default: <checkpoint>.eval.json)")
    ev.add_argument("--n-inputs", type=int, default=150)
    ev.add_argument("--m-styles", type=int, default=10)

    gc = sub.add_parser("gradcheck", help="run the gradient oracle and loss identity suite")
    gc.add_argument("--seed", type=int, default=0)
    return p


# ---------------------------------------------------------------------------
# commands

def cmd_train(args) -> int:
    config = load_config(args.config, args.overrides)
    out = Path(args.out or config.io.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(config.dumps() + "\n")
    result = train(config, out, resume_from=args.resume)
    log.info("finished at step %d, last checkpoint %s", result.state.step, result.last_checkpoint)
    return EXIT_OK


def _load_state(path: str):
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _read_inputs(args, state) -> tuple[np.ndarray, tuple[int, int] | None]:
    """Input vectors and, for image domains, the image shape."""
    source = "A" if args.direction == "a2b" else "B"
    d_in = state.nets.d_a if source == "A" else state.nets.d_b
    if args.input is None:
        datasets = load_datasets(state.config)
        ds = datasets[0] if source == "A" else datasets[1]
        x, shape = ds.samples[: args.n_inputs], ds.metadata.get("image_shape")
    else:
        path = Path(args.input)
        if path.is_dir():
            ds = load_pgm_dataset(path, source)
            x, shape = ds.samples, ds.metadata["image_shape"]
        elif path.suffix.lower() == ".pgm":
            img = read_pgm(path)
            x, shape = to_unit_range(img).reshape(1, -1), img.shape
        else:
            try:
                x = np.loadtxt(path, delimiter=",", ndmin=2)
            except (OSError, ValueError) as exc:
                raise UsageError(f"cannot read input CSV {path}: {exc}") from exc
            shape = None
    if x.shape[1] != d_in:
        raise UsageError(f"input has {x.shape[1]} values per sample, the checkpoint's "
                         f"{args.direction} translator expects {d_in}")
    if np.abs(x).max() > 1.0:
        raise UsageError("input values must lie in [-1, 1]")
    return x, shape


def _write_outputs(out: Path, stem: str, x: np.ndarray, ys: np.ndarray, shape) -> list[Path]:
    """``ys`` has shape (inputs, columns, d); CSV rows for vectors, one PGM grid for images."""
    out.mkdir(parents=True, exist_ok=True)
    if shape is None:
        path = out / f"{stem}.csv"
        n, m, d = ys.shape
        lines = ["input,column," + ",".join(f"y{j}" for j in range(d))]
        for i in range(n):
            for k in range(m):
                lines.append(f"{i},{k}," + ",".join(repr(float(v)) for v in ys[i, k]))
        path.write_text("\n".join(lines) + "\n")
        return [path]
    h, w = shape
    tiles = np.concatenate([x[:, None, :], ys], axis=1)  # first column shows the input
    n, m, _ = tiles.shape
    grid = tiles.reshape(n, m, h, w).transpose(0, 2, 1, 3).reshape(n * h, m * w)
    path = out / f"{stem}.pgm"
    write_pgm(path, to_pixels(grid))
    return [path]


def _translator_and_inputs(args):
    state = _load_state(args.checkpoint)
    x, shape = _read_inputs(args, state)
    return state, state.translator(args.direction), x, shape


def cmd_translate(args) -> int:
    if args.n_styles < 1:
        raise UsageError("--n-styles must be >= 1")
    state, model, x, shape = _translator_and_inputs(args)
    z = np.random.default_rng(args.seed).standard_normal((args.n_styles, model.n_z))
    ys = np.stack([model(x, np.repeat(zk[None], len(x), axis=0)) for zk in z], axis=1)
    for p in _write_outputs(Path(args.out), f"translate_{args.direction}", x, ys, shape):
        print(p)
    return EXIT_OK


def cmd_interpolate(args) -> int:
    if args.steps < 2:
        raise UsageError("--steps must be >= 2")
    state, model, x, shape = _translator_and_inputs(args)
    # the same two draws translate would use as its first two styles
    z1, z2 = np.random.default_rng(args.seed).standard_normal((2, model.n_z))
    ys = np.stack(interpolate(model, x, z1, z2, args.steps), axis=1)
    for p in _write_outputs(Path(args.out), f"interpolate_{args.direction}", x, ys, shape):
        print(p)
    return EXIT_OK


def cmd_eval(args) -> int:
    state = _load_state(args.checkpoint)
    if args.config or args.overrides:
        base = json.loads(Path(args.config).read_text()) if args.config else state.config.to_dict()
        state.config = RunConfig.from_dict(apply_overrides(base, args.overrides))
    datasets = load_datasets(state.config) if state.config.data.kind == "pgm" else None
    report = evaluate_state(state, datasets, args.n_inputs, args.m_styles)
    out = Path(args.out) if args.out else Path(args.checkpoint).with_suffix(".eval.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    if datasets is not None:
        shape = datasets[0].metadata["image_shape"]
        rng = np.random.default_rng(state.config.seed)
        for direction, src in (("a2b", datasets[0]), ("b2a", datasets[1])):
            model = state.translator(direction)
            x = src.samples[:8]
            z = rng.standard_normal((args.m_styles, model.n_z))
            ys = np.stack([model(x, np.repeat(zk[None], len(x), axis=0)) for zk in z], axis=1)
            _write_outputs(out.parent, f"{out.stem}_{direction}", x, ys, shape)
    print(json.dumps({k: v for k, v in report.to_dict().items() if k != "directions"}, sort_keys=True))
    print(out)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .verify import run_all

    results, seconds = run_all(args.seed)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed in {seconds:.1f}s")
    if failed:
        print("failing: " + ", ".join(failed), file=sys.stderr)
        return EXIT_ABORT
    return EXIT_OK


COMMANDS = {"train": cmd_train, "translate": cmd_translate, "interpolate": cmd_interpolate,
            "eval": cmd_eval, "gradcheck": cmd_gradcheck}


def main(argv: list[str] | None = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors; the contract says 1
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError, CheckpointError, PGMError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingAborted as exc:
        print(f"aborted: {exc} (last checkpoint: {exc.last_checkpoint})", file=sys.stderr)
        return EXIT_ABORT
    except ClassifierError as exc:
        print(f"evaluation failed: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
