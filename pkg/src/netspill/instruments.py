"""Instrument construction: ``Z = W`` or the fitted value of ``W^H`` on a basis of demeaned ``W``."""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import SingularGramError
from .panel import ClusterMap
from .transforms import RegressorPanel, cluster_demean

GRAM_COND_MAX = 1e12


class IvOption(enum.Enum):
    SIMPLE = "simple"
    PROJ_A = "A"
    PROJ_B = "B"
    PROJ_C = "C"

    @classmethod
    def parse(cls, value) -> "IvOption":
        if isinstance(value, cls):
            return value
        key = str(value).strip()
        for opt in cls:
            if key.lower() == opt.value.lower() or key.upper() == opt.name:
                return opt
        aliases = {"a": cls.PROJ_A, "b": cls.PROJ_B, "c": cls.PROJ_C,
                   "proja": cls.PROJ_A, "projb": cls.PROJ_B, "projc": cls.PROJ_C}
        try:
            return aliases[key.lower()]
        except KeyError:
            raise ValueError(f"unknown IV option {value!r}; use simple, A, B or C") from None


@dataclass(frozen=True)
class InstrumentPanel:
    """Instruments with shape ``(n, T-1, d_Z)``; ``Z[:, t-1]`` is period t."""

    Z: np.ndarray
    option: IvOption

    @property
    def d_Z(self) -> int:
        return self.Z.shape[2]


def phi_basis(option: IvOption, w, w_prev=None, t: int = 1) -> np.ndarray:
    """Projection basis evaluated at demeaned regressors ``w`` (last axis = components).

    Option C at ``t > 1`` also needs the previous period's demeaned regressors.
    """
    option = IvOption.parse(option)
    w = np.asarray(w, dtype=float)
    if option is IvOption.PROJ_A:
        return w.copy()
    if option is IvOption.PROJ_B or (option is IvOption.PROJ_C and t == 1):
        return np.concatenate([w, w ** 2], axis=-1)
    if option is IvOption.PROJ_C:
        if w_prev is None:
            raise ValueError(f"option C at t={t} needs the period t-1 regressors")
        w_prev = np.asarray(w_prev, dtype=float)
        return np.concatenate([w, w ** 2, w_prev ** 2], axis=-1)
    raise ValueError("the simple option has no projection basis")


def _project(target: np.ndarray, basis: np.ndarray, t: int) -> np.ndarray:
    """Fitted values of ``target`` regressed on ``basis`` (no intercept).

    Solved through an eigendecomposition of the basis Gram matrix so that
    near-singularity is reported instead of hidden by a pseudo-inverse.
    """
    gram = basis.T @ basis
    evals, evecs = np.linalg.eigh(gram)
    top = evals[-1]
    low = evals[0]
    cond = np.inf if low <= 0 or top <= 0 else top / low
    if not cond <= GRAM_COND_MAX:
        raise SingularGramError(
            f"projection basis Gram matrix is singular or ill-conditioned at period {t} "
            f"(condition estimate {cond:.3g} > {GRAM_COND_MAX:.0e})",
            period=t, condition=float(cond))
    cross = basis.T @ target
    coef = evecs @ ((evecs.T @ cross) / evals[:, None])
    return basis @ coef


def build_instruments(option, regs: RegressorPanel, regs_H: np.ndarray, clusters: ClusterMap
                      ) -> InstrumentPanel:
    """Instrument panel for periods 1..T-1.

    ``regs_H`` is the transformed regressor tensor of shape ``(n, T-1, d_W)``.
    The projection pools every unit of both groups.
    """
    option = IvOption.parse(option)
    W = regs.W
    T = W.shape[1]
    if regs_H.shape != (W.shape[0], T - 1, W.shape[2]):
        raise ValueError(f"transformed regressors have shape {regs_H.shape}, expected "
                         f"{(W.shape[0], T - 1, W.shape[2])}")
    if option is IvOption.SIMPLE:
        return InstrumentPanel(Z=W[:, :T - 1, :].copy(), option=option)
    demeaned = cluster_demean(W, clusters)
    Z = np.empty_like(regs_H)
    for t in range(1, T):
        prev = demeaned[:, t - 2] if t > 1 else None
        basis = phi_basis(option, demeaned[:, t - 1], prev, t)
        Z[:, t - 1] = _project(regs_H[:, t - 1], basis, t)
    return InstrumentPanel(Z=Z, option=option)
