"""Central finite-difference checks of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckResult:
    name: str
    max_rel_err: float
    n_checked: int
    tol: float

    @property
    def ok(self) -> bool:
        return self.max_rel_err < self.tol


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Norm-wise relative error max|a - n| / max(max|a|, max|n|, floor)."""
    if not analytic.size:
        return 0.0
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def numeric_grad(fn: Callable[[], Tensor], target: Tensor, step: float = 1e-5,
                 indices: Sequence[tuple] | None = None) -> tuple[np.ndarray, list[tuple]]:
    """Central differences of scalar ``fn()`` w.r.t. entries of ``target.data``."""
    if indices is None:
        indices = list(np.ndindex(*target.shape))
    out = np.zeros(len(indices))
    for n, idx in enumerate(indices):
        orig = target.data[idx]
        target.data[idx] = orig + step
        f_plus = fn().item()
        target.data[idx] = orig - step
        f_minus = fn().item()
        target.data[idx] = orig
        out[n] = (f_plus - f_minus) / (2 * step)
    return out, list(indices)


def check_gradients(fn: Callable[[], Tensor], tensors: dict[str, Tensor], tol: float = 1e-4,
                    step: float = 1e-5, max_entries: int | None = None,
                    rng: np.random.Generator | None = None, name: str = "",
                    rel_floor: float = 1e-3) -> GradCheckResult:
    """Compare backward() against finite differences for every tensor in ``tensors``.

    ``fn`` must rebuild the graph on each call and return a scalar. When
    ``max_entries`` is set, a random subset of each tensor's entries is probed.
    The error is norm-wise per tensor, so entries that are tiny relative to the
    rest of the gradient do not amplify finite-difference round-off. The
    per-tensor scale is floored at ``rel_floor`` times the largest gradient
    over all checked tensors: a parameter whose exact gradient is zero (e.g. a
    bias feeding straight into batch norm) is then compared against the
    overall gradient size instead of against its own round-off noise.
    """
    rng = rng or np.random.default_rng(0)
    for t in tensors.values():
        t.requires_grad = True
        t.grad = np.zeros_like(t.data)
    loss = fn()
    loss.backward()
    analytic = {k: t.grad.copy() for k, t in tensors.items()}

    probes = {}
    for key, t in tensors.items():
        all_idx = list(np.ndindex(*t.shape))
        if max_entries is not None and len(all_idx) > max_entries:
            pick = rng.choice(len(all_idx), size=max_entries, replace=False)
            all_idx = [all_idx[i] for i in sorted(pick)]
        num, idx = numeric_grad(fn, t, step, all_idx)
        ana = np.array([analytic[key][i] for i in idx])
        probes[key] = (ana, num)
    overall = max([np.max(np.abs(a)) for a, _ in probes.values() if a.size] + [0.0])
    floor = max(1e-8, rel_floor * overall)
    worst = max([rel_error(a, n, floor) for a, n in probes.values()] + [0.0])
    count = sum(a.size for a, _ in probes.values())
    return GradCheckResult(name, worst, count, tol)
