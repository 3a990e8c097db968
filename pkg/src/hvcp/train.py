"""Training objective, KL annealing, the optimization loop and checkpoint files."""

from __future__ import annotations

import csv
import io
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import Config
from .encoder import PointCloud
from .model import Model, is_posterior_param
from .nn import ParamStore, adam_step

log = logging.getLogger(__name__)

PROB_EPS = 1e-7
LOG_HEADER = ["iter", "loss", "recon", "kl", "lambda"]


class NonFiniteLoss(FloatingPointError):
    def __init__(self, iteration: int, value: float):
        self.iteration = iteration
        super().__init__(f"non-finite loss {value} at iteration {iteration}")


@dataclass
class TrainItem:
    partial: PointCloud
    complete: PointCloud
    queries: np.ndarray
    occupancies: np.ndarray


@dataclass
class LossParts:
    loss: Tensor
    recon: float
    kl: float


def bce(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Per-query binary cross entropy with probabilities clamped to [1e-7, 1 - 1e-7]."""
    p = ad.clip(probs, PROB_EPS, 1.0 - PROB_EPS)
    labels = np.asarray(labels, dtype=np.float64)
    return ad.mul(ad.add(ad.mul(labels, ad.log(p)), ad.mul(1.0 - labels, ad.log(ad.sub(1.0, p)))), -1.0)


def item_loss(model: Model, item: TrainItem, lam: float, rng: np.random.Generator,
              queries: np.ndarray | None = None, mode: str = "posterior") -> LossParts:
    """ELBO terms for one item: mean BCE plus ``lam`` times per-dimension KL."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    qidx = slice(None) if queries is None else queries
    q, o = item.queries[qidx], item.occupancies[qidx]
    completion = model.complete(item.partial, item.complete, rng, mode)
    probs = ad.logistic(model.logits(completion, q))
    recon = ad.mean(bce(probs, o))
    kl = ad.mul(completion.kl, 1.0 / model.hvae.latent_dims)
    loss = ad.add(recon, ad.mul(kl, lam))
    return LossParts(loss, recon.item(), kl.item())


def elbo_loss(model: Model, batch: Sequence[TrainItem], lam: float, rng: np.random.Generator,
              mode: str = "posterior") -> LossParts:
    """Batch-mean ELBO loss as a single graph (used for gradient checks)."""
    parts = [item_loss(model, item, lam, rng, mode=mode) for item in batch]
    total = parts[0].loss
    for p in parts[1:]:
        total = ad.add(total, p.loss)
    n = len(parts)
    return LossParts(ad.mul(total, 1.0 / n), sum(p.recon for p in parts) / n, sum(p.kl for p in parts) / n)


def anneal(step: int, lambda_max: float, warmup: int) -> float:
    """Linear KL-weight ramp from 0 at step 0 to ``lambda_max`` at ``warmup``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    return lambda_max * min(1.0, step / warmup)


def iteration_rng(seed: int, iteration: int) -> np.random.Generator:
    return np.random.default_rng([seed, iteration])


def train_step(model: Model, items: Sequence[TrainItem], iteration: int) -> tuple[float, float, float, float]:
    """One optimizer step; returns (loss, recon, kl, lambda) averaged over the batch."""
    cfg = model.config
    rng = iteration_rng(cfg.seed, iteration)
    lam = anneal(iteration, cfg.lambda_max, cfg.warmup)
    picks = rng.integers(0, len(items), size=cfg.batch_size)
    total: dict[str, np.ndarray] = {}
    loss = recon = kl = 0.0
    for k in picks:
        item = items[int(k)]
        n_q = len(item.queries)
        qsel = None if cfg.queries >= n_q else np.sort(rng.choice(n_q, cfg.queries, replace=False))
        parts = item_loss(model, item, lam, rng, qsel)
        value = parts.loss.item()
        if not np.isfinite(value):
            raise NonFiniteLoss(iteration, value)
        grads = model.params.grads_by_name(ad.backward(parts.loss))
        for name in sorted(grads):
            total[name] = total[name] + grads[name] if name in total else grads[name].copy()
        loss += value
        recon += parts.recon
        kl += parts.kl
    b = float(cfg.batch_size)
    adam_step(model.params, {n: g / b for n, g in total.items()}, cfg.lr, cfg.beta1, cfg.beta2,
              cfg.adam_eps)
    return loss / b, recon / b, kl / b, lam


def train_loop(model: Model, items: Sequence[TrainItem], out_dir, start_iteration: int = 0,
               iterations: int | None = None,
               callback: Callable[[int, tuple], None] | None = None) -> Path:
    """Run training, append rows to ``log.csv`` and write ``checkpoint.hvcp`` periodically.

    Iteration ``k`` draws all of its randomness from ``(seed, k)``, so a run
    resumed from a checkpoint continues exactly like an uninterrupted one.
    """
    if not items:
        raise ValueError("dataset is empty")
    cfg = model.config
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "log.csv"
    ckpt_path = out / "checkpoint.hvcp"
    end = cfg.iterations if iterations is None else start_iteration + iterations
    fresh = start_iteration == 0 or not log_path.exists()
    if not fresh:
        _truncate_log(log_path, start_iteration)
    with open(log_path, "w" if fresh else "a", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if fresh:
            writer.writerow(LOG_HEADER)
        for it in range(start_iteration, end):
            row = train_step(model, items, it)
            writer.writerow([it + 1] + [repr(float(v)) for v in row])
            if callback is not None:
                callback(it + 1, row)
            if (it + 1) % cfg.checkpoint_every == 0 or it + 1 == end:
                fh.flush()
                save_checkpoint(model.params, cfg, ckpt_path, iteration=it + 1)
            if (it + 1) % 500 == 0:
                log.info("iter %d loss %.5f recon %.5f kl %.5f lambda %.4f", it + 1, *row)
    return ckpt_path


def _truncate_log(path: Path, iteration: int) -> None:
    """Drop rows logged after ``iteration`` (written past the last checkpoint)."""
    lines = path.read_text().splitlines(keepends=True)
    keep = lines[:1] + [ln for ln in lines[1:] if int(ln.split(",", 1)[0]) <= iteration]
    path.write_text("".join(keep))


def read_log(path) -> list[dict[str, float]]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


# ----------------------------------------------------------------------------
# checkpoint file format

MAGIC = b"HVCP"
VERSION = 1


class CheckpointError(ValueError):
    pass


class BadMagic(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


class TruncatedCheckpoint(CheckpointError):
    pass


@dataclass
class Checkpoint:
    params: ParamStore
    config: Config
    iteration: int = 0


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def _pack_array(name: str, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    head = _pack_str(name) + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes()


def save_checkpoint(params: ParamStore, config: Config, path, iteration: int = 0,
                    include_posterior: bool = True, include_optimizer: bool = True) -> None:
    """Write the HVCP binary: magic, version, config text, then named float64 arrays.

    Optimizer moments are stored as extra arrays named ``adam.m/<param>`` and
    ``adam.v/<param>``; the step counters go into the config text.
    """
    names = [n for n in params.params if include_posterior or not is_posterior_param(n)]
    arrays = [(n, params.params[n].data) for n in names]
    if include_optimizer:
        arrays += [(f"adam.m/{n}", params.m[n]) for n in names if n in params.m]
        arrays += [(f"adam.v/{n}", params.v[n]) for n in names if n in params.v]
    text = config.serialize() + f"state.iteration={iteration}\nstate.adam_step={params.step}\n"
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(_pack_str(text))
    buf.write(struct.pack("<Q", len(arrays)))
    for name, arr in arrays:
        buf.write(_pack_array(name, arr))
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedCheckpoint(f"checkpoint truncated at byte {len(self.data)} (needed {self.pos + n})")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    r = _Reader(data)
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagic(f"{path}: bad magic (not an HVCP checkpoint)")
    r.take(4)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise VersionMismatch(f"{path}: checkpoint version {version}, expected {VERSION}")
    text = r.string()
    state = {}
    cfg_lines = []
    for line in text.splitlines():
        if line.startswith("state."):
            k, v = line[6:].split("=", 1)
            state[k] = int(v)
        else:
            cfg_lines.append(line)
    config = Config.parse("\n".join(cfg_lines))
    (count,) = r.unpack("<Q")
    store = ParamStore()
    moments = {}
    for _ in range(count):
        name = r.string()
        (rank,) = r.unpack("<I")
        shape = r.unpack(f"<{rank}Q") if rank else ()
        n = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
        if name.startswith("adam."):
            moments[name] = arr
        else:
            store.add(name, arr)
    if r.pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - r.pos} trailing bytes")
    for name, arr in moments.items():
        kind, pname = name[5:].split("/", 1)
        getattr(store, kind)[pname] = arr.copy()
    store.step = state.get("adam_step", 0)
    return Checkpoint(store, config, state.get("iteration", 0))


def load_model(path) -> tuple[Model, int]:
    ckpt = load_checkpoint(path)
    return Model(ckpt.config, ckpt.params), ckpt.iteration
