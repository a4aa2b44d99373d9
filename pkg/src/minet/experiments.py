"""Recursion-count sweep and component ablation harnesses."""

from __future__ import annotations

import csv
import itertools
import time
from dataclasses import dataclass, replace

import numpy as np

from .data import HazyPair, to_batch
from .layers import parameter_count
from .metrics import psnr
from .model import MINetConfig, init_minet, minet_forward
from .tensor import Tensor, no_grad
from .training import TrainConfig, mean_psnr, train_loop


def time_inference(params, image_batch: np.ndarray, repeats: int = 5) -> float:
    """Median wall time per image of one no-grad forward pass."""
    x = Tensor(image_batch.astype(params.encoder.weight.dtype))
    times = []
    with no_grad():
        minet_forward(x, params)  # warm-up
        for _ in range(repeats):
            t0 = time.perf_counter()
            minet_forward(x, params)
            times.append(time.perf_counter() - t0)
    return float(np.median(times)) / image_batch.shape[0]


@dataclass
class SweepRow:
    T: int
    psnr: float
    seconds_per_image: float


def tsweep(
    base: MINetConfig,
    T_list: list[int],
    eval_pairs: list[HazyPair],
    train_pairs: list[HazyPair] | None = None,
    train_cfg: TrainConfig | None = None,
    seed: int = 0,
    repeats: int = 5,
) -> list[SweepRow]:
    """Time (and optionally briefly train) the network at each recursion count.

    Without training data the PSNR column is that of the seeded
    initialisation; with it, each T gets its own short training run.
    """
    if not T_list:
        raise ValueError("empty T list")
    rows = []
    dtype = train_cfg.np_dtype if train_cfg else np.float32
    batch = to_batch([p.hazy for p in eval_pairs[:1]])
    for T in T_list:
        cfg = replace(base, recursions=(T, T, T))
        if train_pairs:
            params = train_loop(train_pairs, cfg, train_cfg or TrainConfig(), seed)[0].params
        else:
            params = init_minet(cfg, seed, dtype)
        sec = time_inference(params, batch, repeats)
        rows.append(SweepRow(T, mean_psnr(params, eval_pairs), sec))
    return rows


def write_sweep_csv(path, rows: list[SweepRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["T", "psnr", "seconds_per_image"])
        for r in rows:
            w.writerow([r.T, f"{r.psnr:.6f}", f"{r.seconds_per_image:.6f}"])


@dataclass
class AblationRow:
    block: str
    rca: bool
    mlf: bool
    params: int
    psnr_train: float
    psnr_heldout: float


ABLATION_VARIANTS = list(itertools.product(("im", "res1", "resT"), (True, False), (True, False)))


def ablate(
    base: MINetConfig,
    train_pairs: list[HazyPair],
    heldout_pairs: list[HazyPair],
    train_cfg: TrainConfig,
    seed: int = 0,
    variants=ABLATION_VARIANTS,
) -> list[AblationRow]:
    """Train every (block, rca, mlf) variant on the same data and seed."""
    rows = []
    for block, rca, mlf in variants:
        cfg = replace(base, block=block, use_rca=rca, use_mlf=mlf)
        ckpt, _ = train_loop(train_pairs, cfg, train_cfg, seed)
        rows.append(
            AblationRow(
                block,
                rca,
                mlf,
                parameter_count(ckpt.params),
                mean_psnr(ckpt.params, train_pairs),
                mean_psnr(ckpt.params, heldout_pairs),
            )
        )
    return rows


def identity_psnr(pairs: list[HazyPair]) -> float:
    return float(np.mean([psnr(p.hazy, p.clean) for p in pairs]))


def write_ablation_csv(path, rows: list[AblationRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["block", "rca", "mlf", "params", "psnr_train", "psnr_heldout"])
        for r in rows:
            w.writerow([r.block, int(r.rca), int(r.mlf), r.params, f"{r.psnr_train:.6f}", f"{r.psnr_heldout:.6f}"])
