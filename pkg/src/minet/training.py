"""Loss, Adam with step-decay schedule, training loop and checkpoints.

Checkpoint layout (all integers little-endian)::

    b"MINW1"  magic
    u32       format version
    u32 + n   UTF-8 JSON config snapshot
    sections  repeated: 4-byte tag, u64 length, payload

Section ``PARM`` stores every parameter as (u16 name length, name, u8 ndim,
u32 dims..., float32 payload). ``ADAM`` stores the step counter followed by
the m and v moments in parameter order. Unknown tags are skipped with a
warning.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import struct
import tempfile
import time
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import HazyPair, to_batch
from .metrics import psnr
from .model import MINetConfig, MINetParams, init_minet, minet_forward
from .tensor import NonFiniteError, Tensor, backward, no_grad

log = logging.getLogger(__name__)

MAGIC = b"MINW1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


# -- loss ------------------------------------------------------------------------


def loss_fn(pred: Tensor, target: Tensor, kind: str = "mse") -> Tensor:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred - target
    if kind == "mse":
        return (diff * diff).mean()
    if kind == "l1":
        return diff.abs().mean()
    raise ValueError(f"unknown loss kind {kind!r}")


# -- optimiser -------------------------------------------------------------------


@dataclass
class LRSchedule:
    base_lr: float = 1e-3
    decay: float = 0.1
    interval: int = 20_000

    def __call__(self, t: int) -> float:
        return self.base_lr * self.decay ** (t // self.interval)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.99
    beta2: float = 0.999
    eps: float = 1e-8
    lr: float = 1e-3

    @classmethod
    def for_params(cls, params: list[Tensor], **kw) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params], **kw)


def adam_step(params: list[Tensor], grads: list[np.ndarray | None], state: AdamState, names=None) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state are misaligned")
    for i, g in enumerate(grads):
        if g is not None and not np.all(np.isfinite(g)):
            name = names[i] if names else f"#{i}"
            raise NonFiniteError(f"non-finite gradient for parameter {name}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        p.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype)


# -- checkpoints -----------------------------------------------------------------


@dataclass
class Checkpoint:
    config: MINetConfig
    params: MINetParams
    adam: AdamState | None = None
    extra: dict = field(default_factory=dict)


def _section(tag: bytes, payload: bytes) -> bytes:
    return tag + struct.pack("<Q", len(payload)) + payload


def _pack_params(named: list[tuple[str, Tensor]]) -> bytes:
    out = io.BytesIO()
    out.write(struct.pack("<I", len(named)))
    for name, t in named:
        raw = name.encode("utf-8")
        out.write(struct.pack("<H", len(raw)) + raw)
        out.write(struct.pack("<B", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape))
        out.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return out.getvalue()


def _pack_adam(state: AdamState) -> bytes:
    out = io.BytesIO()
    out.write(struct.pack("<Qdddd", state.t, state.beta1, state.beta2, state.eps, state.lr))
    out.write(struct.pack("<I", len(state.m)))
    for arr in state.m + state.v:
        out.write(struct.pack("<Q", arr.size))
        out.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return out.getvalue()


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    meta = json.dumps({"config": ckpt.config.to_dict(), **ckpt.extra}, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(meta)), meta]
    parts.append(_section(b"PARM", _pack_params(list(ckpt.params.named_parameters()))))
    if ckpt.adam is not None:
        parts.append(_section(b"ADAM", _pack_adam(ckpt.adam)))
    return b"".join(parts)


def checkpoint_save(path, ckpt: Checkpoint) -> None:
    """Write atomically: temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(checkpoint_bytes(ckpt))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    @property
    def done(self) -> bool:
        return self.pos >= len(self.buf)


def _unpack_params(payload: bytes) -> list[tuple[str, np.ndarray]]:
    r = _Reader(payload)
    (count,) = r.unpack("<I")
    out = []
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape)
        out.append((name, arr))
    return out


def _unpack_adam(payload: bytes) -> AdamState:
    r = _Reader(payload)
    t, b1, b2, eps, lr = r.unpack("<Qdddd")
    (count,) = r.unpack("<I")
    arrays = []
    for _ in range(2 * count):
        (n,) = r.unpack("<Q")
        arrays.append(np.frombuffer(r.take(4 * n), dtype="<f4").copy())
    return AdamState(arrays[:count], arrays[count:], t, b1, b2, eps, lr)


def checkpoint_load(path, config: MINetConfig | None = None, dtype=np.float32) -> Checkpoint:
    """Read a checkpoint; if ``config`` is given, shapes are validated against it."""
    buf = Path(path).read_bytes()
    r = _Reader(buf)
    if len(buf) < len(MAGIC) or r.take(len(MAGIC)) != MAGIC:
        raise BadMagicError(f"{path}: bad magic, not a MINW1 checkpoint")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (mlen,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(mlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt config block ({exc})") from None
    stored_cfg = MINetConfig.from_dict(meta.pop("config"))
    cfg = config if config is not None else stored_cfg

    stored = None
    adam_payload = None
    while not r.done:
        tag = r.take(4)
        (n,) = r.unpack("<Q")
        payload = r.take(n)
        if tag == b"PARM":
            stored = _unpack_params(payload)
        elif tag == b"ADAM":
            adam_payload = payload
        else:
            warnings.warn(f"{path}: ignoring unknown checkpoint section {tag!r}")
    if stored is None:
        raise CheckpointError(f"{path}: no parameter section")

    params = init_minet(cfg, 0, dtype)
    expected = list(params.named_parameters())
    stored_map = dict(stored)
    for name, t in expected:
        if name not in stored_map:
            raise CheckpointError(f"parameter {name} missing from checkpoint")
        arr = stored_map[name]
        if arr.shape != t.shape:
            raise CheckpointError(f"shape mismatch for parameter {name}: checkpoint {arr.shape}, config {t.shape}")
        t.data[...] = arr
    if len(stored) != len(expected):
        raise CheckpointError(f"checkpoint has {len(stored)} parameters, config expects {len(expected)}")
    adam = _unpack_adam(adam_payload) if adam_payload is not None else None
    if adam is not None:
        adam.m = [m.reshape(t.shape) for m, (_, t) in zip(adam.m, expected)]
        adam.v = [v.reshape(t.shape) for v, (_, t) in zip(adam.v, expected)]
    return Checkpoint(cfg, params, adam, meta)


# -- training loop ---------------------------------------------------------------


@dataclass
class TrainConfig:
    iters: int = 2000
    batch_size: int = 2
    base_lr: float = 1e-3
    lr_decay: float = 0.1
    lr_interval: int = 20_000
    beta1: float = 0.99
    beta2: float = 0.999
    loss: str = "mse"
    dtype: str = "float32"
    checkpoint_every: int = 0
    out_dir: str | None = None

    @property
    def np_dtype(self):
        return {"float32": np.float32, "float64": np.float64}[self.dtype]


@dataclass
class LogRow:
    iteration: int
    loss: float
    lr: float
    psnr_train: float
    seconds: float


LOG_FIELDS = [f.name for f in fields(LogRow)]


def write_log_csv(path, rows: list[LogRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_FIELDS)
        for row in rows:
            w.writerow([row.iteration, repr(row.loss), repr(row.lr), repr(row.psnr_train), f"{row.seconds:.4f}"])


def train_loop(
    dataset: list[HazyPair],
    net_cfg: MINetConfig,
    cfg: TrainConfig,
    seed: int = 0,
    params: MINetParams | None = None,
) -> tuple[Checkpoint, list[LogRow]]:
    """Train on whole images with Adam; deterministic for a given seed.

    Each epoch visits the pairs in a seeded random order, ``batch_size`` at a
    time. Aborts with :class:`NonFiniteError` if the loss diverges.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    dtype = cfg.np_dtype
    if params is None:
        params = init_minet(net_cfg, seed, dtype)
    named = list(params.named_parameters())
    names = [n for n, _ in named]
    plist = [t for _, t in named]
    sched = LRSchedule(cfg.base_lr, cfg.lr_decay, cfg.lr_interval)
    state = AdamState.for_params(plist, beta1=cfg.beta1, beta2=cfg.beta2, lr=sched(0))

    hazy = to_batch([p.hazy for p in dataset], dtype)
    clean = to_batch([p.clean for p in dataset], dtype)
    rng = np.random.default_rng([seed, 1])
    order = np.empty(0, dtype=int)
    bs = min(cfg.batch_size, len(dataset))

    rows: list[LogRow] = []
    start = time.perf_counter()
    for it in range(cfg.iters):
        if order.size < bs:
            order = np.concatenate([order, rng.permutation(len(dataset))])
        idx, order = order[:bs], order[bs:]
        x, y = Tensor(hazy[idx]), Tensor(clean[idx])
        state.lr = sched(it)
        for t in plist:
            t.grad = None
        pred, _ = minet_forward(x, params)
        loss = loss_fn(pred, y, cfg.loss)
        lval = loss.item()
        if not math.isfinite(lval):
            raise NonFiniteError(f"loss became non-finite at iteration {it}")
        backward(loss)
        adam_step(plist, [t.grad for t in plist], state, names)
        rows.append(LogRow(it, lval, state.lr, psnr(pred.data, y.data), time.perf_counter() - start))
        if cfg.checkpoint_every and cfg.out_dir and (it + 1) % cfg.checkpoint_every == 0:
            checkpoint_save(Path(cfg.out_dir) / f"ckpt_{it + 1:06d}.minw", Checkpoint(net_cfg, params, state))
        if it % 100 == 0:
            log.info("iter %d loss %.6f lr %.2e", it, lval, state.lr)
    return Checkpoint(net_cfg, params, state, {"iterations": cfg.iters, "seed": seed}), rows


def predict(params: MINetParams, images: list[np.ndarray], batch_size: int = 4):
    """Run the network on (H, W, 3) images; returns outputs and per-image traces."""
    dtype = params.encoder.weight.dtype
    outs, traces = [], []
    with no_grad():
        for i in range(0, len(images), batch_size):
            chunk = images[i : i + batch_size]
            y, tr = minet_forward(Tensor(to_batch(chunk, dtype)), params)
            outs.extend(np.asarray(y.data, dtype=np.float64).transpose(0, 2, 3, 1))
            traces.extend([tr] * len(chunk))
    return outs, traces


def mean_psnr(params: MINetParams, pairs: list[HazyPair]) -> float:
    outs, _ = predict(params, [p.hazy for p in pairs])
    return float(np.mean([psnr(o, p.clean) for o, p in zip(outs, pairs)]))


def smoothed_loss_flags(rows: list[LogRow], window: int = 200, after: int = 200) -> list[int]:
    """Window start indices where the smoothed loss rose across a ``window``.

    The loss is smoothed with a ``window``-long moving average; an index ``i``
    is flagged when the average ending at ``i + window`` exceeds the one ending
    at ``i``.
    """
    losses = np.array([r.loss for r in rows])
    if losses.size < after + 2 * window:
        return []
    avg = np.convolve(losses, np.ones(window) / window, mode="valid")
    starts = range(after, avg.size - window)
    return [i for i in starts if avg[i + window] > avg[i] * (1 + 1e-9)]
