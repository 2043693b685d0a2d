"""Normal/chi-square(1) quantiles, squared t statistics and the two-hypothesis step-down test."""
from __future__ import annotations

import math
from dataclasses import dataclass

# Acklam's rational approximation to the normal quantile
_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
      1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
      6.680131188771972e+01, -1.328068155288572e+01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
      -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
      3.754408661907416e+00)
_P_LOW = 0.02425


def normal_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def _acklam(p: float) -> float:
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        return (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    if p > 1.0 - _P_LOW:
        q = math.sqrt(-2.0 * math.log1p(-p))
        return -(((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    q = p - 0.5
    r = q * q
    return (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / \
        (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0)


def normal_ppf(p: float) -> float:
    """Standard normal quantile: rational approximation plus one Halley step on the CDF."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"probability must lie in (0, 1), got {p}")
    x = _acklam(p)
    # residual taken on the smaller tail to keep relative accuracy
    if x > 0:
        e = -(0.5 * math.erfc(x / math.sqrt(2.0)) - (1.0 - p))
    else:
        e = 0.5 * math.erfc(-x / math.sqrt(2.0)) - p
    u = e * math.sqrt(2.0 * math.pi) * math.exp(0.5 * x * x)
    return x - u / (1.0 + 0.5 * x * u)


def chi2_1_cdf(c: float) -> float:
    if c <= 0:
        return 0.0
    return math.erf(math.sqrt(0.5 * c))


def chi2_1_quantile(tau: float) -> float:
    """Quantile of chi-square(1): the square of the normal ``(1 + tau) / 2`` quantile."""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    # (1 + tau) / 2 loses digits for tau near 1, so feed the upper tail directly
    z = -normal_ppf(0.5 * (1.0 - tau))
    return z * z


def two_sided_pvalue(t_stat: float) -> float:
    return math.erfc(abs(t_stat) / math.sqrt(2.0))


def squared_t_stats(res, layer: int = 1) -> tuple[float, float]:
    """Squared t statistics ``(Q_FB, Q_BF)`` for the cross-group spillovers on ``layer``.

    ``Q_FB = n_B * beta_FB^2 / v_FB^2`` where ``v_FB^2`` is the matching diagonal
    entry of the bank-group variance; symmetrically for ``Q_BF``.
    """
    gb, gf = res.groups["B"], res.groups["F"]
    i_fb = gb.source_index("F", layer)
    i_bf = gf.source_index("B", layer)
    return (_squared_t(gb.delta_hat[i_fb], gb.V_hat[i_fb, i_fb], gb.n_K, "FB"),
            _squared_t(gf.delta_hat[i_bf], gf.V_hat[i_bf, i_bf], gf.n_K, "BF"))


def _squared_t(beta: float, v2: float, n_k: int, label: str) -> float:
    if not v2 > 0:
        raise ValueError(f"variance entry for beta_{label} is {v2}; cannot form a t statistic")
    return float(n_k * beta * beta / v2)


@dataclass(frozen=True)
class StepdownDecision:
    Q_FB: float
    Q_BF: float
    alpha: float
    S_hat: frozenset
    c_low: float
    c_high: float

    @property
    def reject_FB(self) -> bool:
        return "FB" not in self.S_hat

    @property
    def reject_BF(self) -> bool:
        return "BF" not in self.S_hat

    def to_dict(self) -> dict:
        return {"Q_FB": self.Q_FB, "Q_BF": self.Q_BF, "alpha": self.alpha,
                "S_hat": sorted(self.S_hat), "reject_FB": self.reject_FB,
                "reject_BF": self.reject_BF, "c_sqrt_1_minus_alpha": self.c_low,
                "c_1_minus_alpha": self.c_high}


def stepdown(Q_FB: float, Q_BF: float, alpha: float) -> StepdownDecision:
    """Step-down test of the two no-spillover nulls with familywise error control.

    Both statistics are screened at the chi-square(1) quantile of level
    ``sqrt(1 - alpha)``; a lone survivor is re-tested at ``1 - alpha``. Ties
    retain the hypothesis. When both exceed the first threshold, both nulls
    are rejected.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if Q_FB < 0 or Q_BF < 0:
        raise ValueError("squared t statistics must be nonnegative")
    c_low = chi2_1_quantile(math.sqrt(1.0 - alpha))
    c_high = chi2_1_quantile(1.0 - alpha)
    keep_fb = Q_FB <= c_low
    keep_bf = Q_BF <= c_low
    if keep_fb and keep_bf:
        s_hat = {"FB", "BF"}
    elif keep_fb:
        s_hat = {"FB"} if Q_FB <= c_high else set()
    elif keep_bf:
        s_hat = {"BF"} if Q_BF <= c_high else set()
    else:
        s_hat = set()
    return StepdownDecision(Q_FB=float(Q_FB), Q_BF=float(Q_BF), alpha=float(alpha),
                            S_hat=frozenset(s_hat), c_low=c_low, c_high=c_high)


def spillover_verdict(Q_FB: float, Q_BF: float, levels=(0.01, 0.05, 0.10),
                      names=("B", "F")) -> str:
    """Human summary such as ``"F -> B at 5%"`` from the strictest level with a rejection."""
    b, f = names
    for level in sorted(levels):
        d = stepdown(Q_FB, Q_BF, level)
        pct = f"{100 * level:g}%"
        if d.reject_FB and d.reject_BF:
            return f"{f} <-> {b} at {pct}"
        if d.reject_FB:
            return f"{f} -> {b} at {pct}"
        if d.reject_BF:
            return f"{b} -> {f} at {pct}"
    return f"no spillover detected at {100 * max(levels):g}%"
