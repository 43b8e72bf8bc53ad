"""Central-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tensor import NonFiniteError, Tensor, backward, force_eval, no_grad


@dataclass
class ParamCheck:
    name: str
    coords: int
    max_rel_error: float
    worst_index: tuple
    floored: int = 0  # coordinates where both gradients were below FLOOR, so the error is absolute


@dataclass
class GradcheckReport:
    passed: bool
    max_rel_error: float
    params: list[ParamCheck] = field(default_factory=list)
    failure: str | None = None

    def summary(self) -> str:
        if self.failure:
            return f"FAIL: {self.failure}"
        state = "PASS" if self.passed else "FAIL"
        worst = max(self.params, key=lambda p: p.max_rel_error, default=None)
        where = f" (worst: {worst.name}{list(worst.worst_index)})" if worst else ""
        coords = sum(p.coords for p in self.params)
        floored = sum(p.floored for p in self.params)
        return (f"{state}: max rel error {self.max_rel_error:.3e} over {len(self.params)} tensors, "
                f"{coords} coords ({floored} under the floor){where}")


Builder = Callable[[np.random.Generator], tuple[Mapping[str, Tensor], Callable[[], Tensor]]]


FLOOR = 1e-8


def rel_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), FLOOR)


def gradcheck(
    builder: Builder,
    seed: int,
    n_coords: int = 20,
    eps: float = 1e-5,
    tol: float = 1e-5,
) -> GradcheckReport:
    """Compare backward() against central differences.

    ``builder(rng)`` returns ``(params, loss_fn)``: a mapping of float64
    parameter tensors and a zero-argument callable producing a scalar loss.
    Every parameter tensor gets ``min(n_coords, size)`` random coordinates
    probed. Dropout is forced off for the whole check.
    """
    rng = np.random.default_rng(seed)
    with force_eval():
        try:
            params, loss_fn = builder(rng)
            for p in params.values():
                if p.dtype != np.float64:
                    raise TypeError(f"gradcheck needs float64 parameters, {p.name or '?'} is {p.dtype}")
                p.grad = None
            loss = loss_fn()
            backward(loss, leaves=params.values())
        except NonFiniteError as exc:
            return GradcheckReport(False, float("inf"), failure=f"{exc} during analytic pass")

        checks = []
        for name, p in params.items():
            flat = p.data.reshape(-1)
            analytic = p.grad.reshape(-1)
            picks = rng.choice(flat.size, size=min(n_coords, flat.size), replace=False)
            worst, worst_i, floored = 0.0, 0, 0
            for i in picks:
                orig = flat[i]
                try:
                    with no_grad():
                        flat[i] = orig + eps
                        up = float(loss_fn().data)
                        flat[i] = orig - eps
                        down = float(loss_fn().data)
                except NonFiniteError as exc:
                    return GradcheckReport(False, float("inf"), checks, failure=f"{exc} while perturbing {name}")
                finally:
                    flat[i] = orig
                numeric = (up - down) / (2 * eps)
                floored += max(abs(float(analytic[i])), abs(numeric)) < FLOOR
                err = rel_error(float(analytic[i]), numeric)
                if err > worst:
                    worst, worst_i = err, int(i)
            where = tuple(int(j) for j in np.unravel_index(worst_i, p.shape))
            checks.append(ParamCheck(name, len(picks), worst, where, floored))

    max_err = max((c.max_rel_error for c in checks), default=0.0)
    return GradcheckReport(max_err < tol, max_err, checks)
