"""Spectral-radius estimation for vector fields and Euler stability demos.

The Picard recursion ``g <- g0 + eta f(g)`` is stable when every eigenvalue
of the Jacobian of ``f`` has magnitude below ``1/eta``. The dominant
magnitude is estimated matrix-free with power iteration on finite-difference
Jacobian-vector products.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .tensor import Tensor, as_tensor, finite_diff_jvp

MARGINAL_BAND = 0.05


class SpectralEstimationError(RuntimeError):
    pass


@dataclass
class SpectralEstimate:
    rho: float
    iterations: int
    converged: bool
    growth_history: list[float] = field(default_factory=list)


@dataclass
class StabilityVerdict:
    rho: float
    threshold: float
    stable: bool
    margin: float
    status: str  # "stable" | "unstable" | "indeterminate"


def estimate_spectral_radius(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    iters: int = 50,
    eps: float = 1e-4,
    seed: int = 0,
) -> SpectralEstimate:
    """Dominant Jacobian eigenvalue magnitude of ``f`` at ``x``.

    ``rho`` is the geometric mean of the last ``max(5, iters // 4)`` norm
    growth ratios, which stays meaningful when the dominant eigenvalues form
    a complex pair and individual ratios oscillate. ``converged`` is set
    when those ratios spread by less than 5% of their mean.

    A Jacobian that annihilates two independent random starts is reported
    as ``rho = 0``. A direction that collapses to zero later in the
    iteration is reseeded once; a second collapse raises.
    """
    if iters < 10:
        raise ValueError("power iteration needs at least 10 iterations")
    x = as_tensor(x)
    fx = as_tensor(f(x))
    if fx.shape != x.shape:
        raise ValueError(f"f(x) has shape {fx.shape}, expected {x.shape}")

    rng = np.random.default_rng(seed)

    def fresh() -> np.ndarray:
        v = rng.standard_normal(x.shape)
        return v / np.linalg.norm(v.ravel())

    v = fresh()
    ratios: list[float] = []
    collapsed_at: int | None = None
    k = 0
    while k < iters:
        jv = finite_diff_jvp(f, x, Tensor(v, dtype=x.dtype), eps).data.astype(np.float64)
        norm = float(np.linalg.norm(jv.ravel()))
        if norm == 0.0 or not math.isfinite(norm):
            if collapsed_at is not None:
                if k == 0 and collapsed_at == 0 and norm == 0.0:
                    return SpectralEstimate(0.0, 1, True, [0.0])
                raise SpectralEstimationError(f"power iteration collapsed at step {k} after reseeding")
            collapsed_at = k
            v = fresh()
            ratios.clear()
            k = 0
            continue
        ratios.append(norm)
        v = jv / norm
        k += 1

    tail = np.asarray(ratios[-max(5, iters // 4):])
    rho = float(np.exp(np.mean(np.log(tail))))
    spread = float((tail.max() - tail.min()) / tail.mean())
    return SpectralEstimate(rho, len(ratios), spread < 0.05, ratios)


def verdict(rho: float, eta: float) -> StabilityVerdict:
    if not eta > 0:
        raise ValueError("eta must be positive")
    threshold = 1.0 / eta
    stable = rho < threshold
    if abs(rho * eta - 1.0) < MARGINAL_BAND:
        status = "indeterminate"
    else:
        status = "stable" if stable else "unstable"
    return StabilityVerdict(rho, threshold, stable, threshold - rho, status)


def check_theorem1(
    f: Callable[[Tensor], Tensor], x: Tensor, eta: float = 1.0, iters: int = 50, seed: int = 0
) -> StabilityVerdict:
    """Test ``rho(df/dx) < 1/eta`` at ``x`` for the Picard recursion."""
    if not eta > 0:
        raise ValueError("eta must be positive")
    est = estimate_spectral_radius(f, x, iters=iters, seed=seed)
    return verdict(est.rho, eta)


def euler_compare(lam: float, eta: float, steps: int, x0: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Explicit and implicit Euler trajectories of ``dx/dt = lam * x``.

    Both arrays have ``steps + 1`` entries starting at ``x0``.
    """
    denom = 1.0 - eta * lam
    if denom == 0.0:
        raise ZeroDivisionError("implicit Euler pole: 1 - eta*lam == 0")
    explicit = np.empty(steps + 1)
    implicit = np.empty(steps + 1)
    explicit[0] = implicit[0] = x0
    for k in range(steps):
        explicit[k + 1] = (1.0 + eta * lam) * explicit[k]
        implicit[k + 1] = implicit[k] / denom
    return explicit, implicit


def write_trajectories_csv(path, explicit: np.ndarray, implicit: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "explicit", "implicit"])
        for k, (a, b) in enumerate(zip(explicit, implicit)):
            w.writerow([k, repr(float(a)), repr(float(b))])


def write_spectrum_csv(path, estimate: SpectralEstimate) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "growth_ratio"])
        for k, r in enumerate(estimate.growth_history):
            w.writerow([k, repr(float(r))])
