"""Command-line entry point: ``hvcp <command> [options]``."""

from __future__ import annotations

import os

_threads = os.environ.get("HVCP_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse  # noqa: E402
import csv  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
import time  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import inference, metrics, shapes  # noqa: E402
from .config import Config, ConfigError  # noqa: E402
from .encoder import read_cloud  # noqa: E402
from .meshing import export_obj  # noqa: E402
from .model import Model  # noqa: E402
from .train import CheckpointError, NonFiniteLoss, TrainItem, load_model, train_loop  # noqa: E402

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_IO = 3
EXIT_NONFINITE = 4
EXIT_EMPTY = 5
EXIT_NO_POSTERIOR = 6
EXIT_GRADCHECK = 7

EPILOG = """exit codes:
  0  success
  2  invalid manifest, config or arguments
  3  I/O failure (missing, unreadable or malformed files)
  4  non-finite training loss
  5  empty mesh extraction
  6  checkpoint has no posterior weights
  7  gradient check failed

environment:
  HVCP_THREADS  caps BLAS worker threads (default: machine parallelism)
"""

log = logging.getLogger("hvcp")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _items_for_training(data_dir: Path) -> list[TrainItem]:
    items = shapes.load_split(data_dir, "train")
    if not items:
        raise CliError(EXIT_IO, f"no training items under {data_dir / 'train'}")
    return [TrainItem(it.partial, it.complete, it.queries, it.occupancies) for it in items]


def cmd_make_data(args) -> int:
    manifest = shapes.DatasetManifest.parse(Path(args.manifest).read_text())
    counts = shapes.make_dataset(manifest, args.out)
    for split, n in counts.items():
        print(f"{split}: {n} items")
    return EXIT_OK


def cmd_train(args) -> int:
    out = Path(args.out)
    ckpt = out / "checkpoint.hvcp"
    if args.resume:
        if not ckpt.exists():
            raise CliError(EXIT_IO, f"nothing to resume: {ckpt} does not exist")
        model, start = load_model(ckpt)
    else:
        cfg = Config.load(args.config) if args.config else Config()
        if args.iterations is not None:
            cfg = cfg.replace(iterations=args.iterations, warmup=min(cfg.warmup, args.iterations))
        model, start = Model.create(cfg), 0
    data = Path(args.data or model.config.data)
    items = _items_for_training(data)
    remaining = model.config.iterations - start
    if remaining <= 0:
        print(f"already trained for {start} iterations")
        return EXIT_OK
    t0 = time.perf_counter()
    train_loop(model, items, out, start_iteration=start)
    print(f"trained iterations {start + 1}..{model.config.iterations} in {time.perf_counter() - t0:.1f}s; "
          f"checkpoint {ckpt}")
    return EXIT_OK


def cmd_complete(args) -> int:
    model, _ = load_model(args.checkpoint)
    partial = read_cloud(args.input)
    k = args.samples or model.config.samples
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(k):
        seed = args.seed + i
        (sample,) = inference.sample_completions(model, partial, 1, seed)
        if sample.mesh.is_empty:
            raise CliError(EXIT_EMPTY, f"sample {i} (seed {seed}) extracted an empty mesh")
        export_obj(sample.mesh, out / f"sample_{i:03d}.obj")
        cloud = inference.mesh_cloud(sample, model.config.completion_points, np.random.default_rng(seed))
        rows.append((i, seed, metrics.uhd(partial, [cloud], model.config.uhd_mode)))
    with open(out / "uhd.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sample", "seed", "uhd"])
        writer.writerows([(i, s, repr(float(u))) for i, s, u in rows])
    print(f"wrote {k} meshes to {out}")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    model, _ = load_model(args.checkpoint)
    cloud = read_cloud(args.input)
    sample = inference.reconstruct(model, cloud)
    if sample.mesh.is_empty:
        raise CliError(EXIT_EMPTY, "reconstruction extracted an empty mesh")
    export_obj(sample.mesh, args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def _resolve_data(path: Path) -> tuple[Path, str]:
    """Accept a dataset root (uses its test split) or a split directory."""
    if (path / "manifest.txt").exists():
        return path, "test"
    if (path.parent / "manifest.txt").exists():
        return path.parent, path.name
    raise CliError(EXIT_IO, f"{path} is neither a dataset nor a split directory")


def cmd_eval(args) -> int:
    model, _ = load_model(args.checkpoint)
    root, split = _resolve_data(Path(args.data))
    manifest = shapes.load_manifest(root)
    items = shapes.load_split(root, split)
    if not items:
        raise CliError(EXIT_IO, f"no items under {root / split}")
    if args.mode and args.mode != manifest.partial_mode and manifest.partial_mode != "full":
        # regenerate the same shapes with the requested partial-view protocol
        alt = shapes.DatasetManifest(**{**vars(manifest), "partial_mode": args.mode})
        items = [shapes.make_item(alt, split, i)[0] for i in range(len(items))]
    autoencode = manifest.partial_mode == "full"
    if autoencode and not model.has_posterior():
        raise CliError(EXIT_NO_POSTERIOR, "auto-encoding evaluation needs posterior weights")
    k = args.samples or model.config.samples
    try:
        rows = inference.evaluate_items(model, items, k, args.seed, autoencode)
    except inference.EmptyExtraction as exc:
        raise CliError(EXIT_EMPTY, str(exc)) from None
    metrics.write_report(rows, args.out)
    print(f"wrote {len(rows)} rows + summary to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import THRESHOLD, run_gradcheck

    if args.scale != "micro":
        raise CliError(EXIT_INVALID, "only --scale micro is supported")
    t0 = time.perf_counter()
    results = run_gradcheck(args.seed)
    failed = []
    for r in results:
        status = "ok" if r.ok else "FAIL"
        print(f"{r.component:10s} max_rel_err={r.error:.3e} entries={r.entries} {status}")
        if not r.ok:
            failed.append(r.component)
    print(f"threshold {THRESHOLD:g}, {time.perf_counter() - t0:.1f}s")
    if failed:
        print(f"gradient check failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hvcp", description="Probabilistic shape completion.",
                                     epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, epilog=EPILOG,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.set_defaults(func=fn)
        return p

    p = add("make-data", cmd_make_data, "generate a synthetic shape dataset")
    p.add_argument("--manifest", required=True, help="key=value manifest file")
    p.add_argument("--out", required=True, help="output dataset directory")

    p = add("train", cmd_train, "train a model")
    p.add_argument("--config", help="key=value config file (defaults used if omitted)")
    p.add_argument("--data", help="dataset directory (overrides the config's data key)")
    p.add_argument("--out", required=True, help="run directory for log.csv and checkpoint.hvcp")
    p.add_argument("--iterations", type=int, help="override the configured iteration count")
    p.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.hvcp")

    p = add("complete", cmd_complete, "sample completions of a partial cloud from the prior")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="partial cloud (.xyz or .ply)")
    p.add_argument("--samples", type=int, help="number of completions (default: config samples)")
    p.add_argument("--seed", type=int, default=0, help="sample i uses seed + i")
    p.add_argument("--out-dir", required=True)

    p = add("reconstruct", cmd_reconstruct, "auto-encode a complete cloud with the posterior mean")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="complete cloud (.xyz or .ply)")
    p.add_argument("--out", required=True, help="output OBJ path")

    p = add("eval", cmd_eval, "evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset root (test split) or split directory")
    p.add_argument("--mode", choices=("bottom", "octant"), help="partial-view protocol")
    p.add_argument("--samples", type=int, help="completions per item (default: config samples)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="report CSV path")

    p = add("gradcheck", cmd_gradcheck, "finite-difference gradient checks of every component")
    p.add_argument("--scale", default="micro", choices=("micro",))
    p.add_argument("--seed", type=int, default=0)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (shapes.ManifestError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NonFiniteLoss as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except inference.EmptyExtraction as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EMPTY
    except inference.MissingPosterior as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NO_POSTERIOR
    except (OSError, CheckpointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
