"""Conjugate gradients on arrays of any shape."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import CgNoConvergence

log = logging.getLogger(__name__)


@dataclass
class CgOptions:
    tol: float = 1e-6
    maxiter: int = 300
    raise_on_fail: bool = True


@dataclass
class CgInfo:
    iterations: int = 0
    residual: float = 0.0
    converged: bool = True
    history: list = field(default_factory=list)


def conjugate_gradient(
    apply: Callable[[np.ndarray], np.ndarray],
    b: np.ndarray,
    opts: Optional[CgOptions] = None,
    x0: Optional[np.ndarray] = None,
    precond: Optional[Callable[[np.ndarray], np.ndarray]] = None,
):
    """Solve ``apply(x) = b`` for a symmetric positive (semi)definite operator.

    Returns ``(x, info)``.  ``info.history`` holds the relative residual
    ``||b - A x|| / ||b||`` after every iteration (entry 0 is the start).
    """
    opts = opts or CgOptions()
    b = np.asarray(b, dtype=float)
    bnorm = np.linalg.norm(b)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    info = CgInfo()
    if bnorm == 0:
        info.history.append(0.0)
        return np.zeros_like(b), info
    r = b - apply(x) if x0 is not None else b.copy()
    z = precond(r) if precond else r
    p = z.copy()
    rz = np.vdot(r, z).real
    res = np.linalg.norm(r) / bnorm
    info.history.append(res)
    k = 0
    while res > opts.tol and k < opts.maxiter:
        ap = apply(p)
        pap = np.vdot(p, ap).real
        if pap <= 0:
            log.warning("cg: non-positive curvature %.3e at iteration %d", pap, k)
            break
        a = rz / pap
        x += a * p
        r -= a * ap
        k += 1
        res = np.linalg.norm(r) / bnorm
        info.history.append(res)
        z = precond(r) if precond else r
        rz_new = np.vdot(r, z).real
        p = z + (rz_new / rz) * p
        rz = rz_new
    info.iterations = k
    info.residual = float(res)
    info.converged = bool(res <= opts.tol)
    log.debug("cg: %d iterations, relative residual %.3e", k, res)
    if not info.converged and opts.raise_on_fail:
        raise CgNoConvergence(
            f"CG stopped at residual {res:.3e} after {k} iterations (tol {opts.tol:.1e})",
            residual=res,
            iterations=k,
        )
    return x, info
