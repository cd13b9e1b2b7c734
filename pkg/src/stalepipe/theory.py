"""Learning-rate bound calculators and the gradient-deviation bound report.

The convergence analysis for this training scheme yields closed-form maximal
learning rates in terms of a gradient-Lipschitz constant L, an error-gradient
norm bound M, the block count K, the maximum staleness dt, and (for the
momentum rule) beta and the slack s. These evaluators are pure 64-bit float
transcriptions of those formulas. L, M, sigma^2 are user-supplied estimates;
``estimate_constants`` derives empirical maxima from a run's deviation
samples instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class SgdBound:
    c0: float
    c1: float
    alpha_max: float


def sgd_lr_bound(L: float, M: float, K: int, dt: float) -> SgdBound:
    """c0 = M^2 K (K+1)^2;  c1 = -(dt^2+2) + sqrt((dt^2+2)^2 + 2 c0 dt^2);
    alpha_max = c1 / (L c0 dt^2)."""
    if L <= 0 or M <= 0 or K < 1 or dt < 1:
        raise ValueError("need L > 0, M > 0, K >= 1, dt >= 1")
    c0 = M * M * K * (K + 1) ** 2
    a = dt * dt + 2.0
    c1 = -a + math.sqrt(a * a + 2.0 * c0 * dt * dt)
    return SgdBound(c0=c0, c1=c1, alpha_max=c1 / (L * c0 * dt * dt))


def sgd_loss_bound(
    L: float, sigma2: float, K: int, dt: float, c1: float,
    f0_minus_fstar: float, sum_alpha: float, sum_alpha_sq: float,
) -> float:
    """Right-hand side of the SGD convergence bound on the weighted mean
    squared gradient norm, given the realized learning-rate sums."""
    if sum_alpha <= 0:
        raise ValueError("sum of learning rates must be positive")
    noise = L * sigma2 * (2.0 + K * dt * dt + 0.25 * K * c1)
    return 2.0 * f0_minus_fstar / sum_alpha + noise * sum_alpha_sq / sum_alpha


@dataclass(frozen=True)
class MomentumBound:
    c2: float
    c3: float
    c4: float
    c5: float
    alpha_max: float


def momentum_lr_bound(
    L: float, M: float, K: int, dt: float, beta: float, s: float
) -> MomentumBound:
    """c2 = ((1-b)s - 1)^2 / (1-b)^2;        c3 = M^2 K (K+1)^2 dt^2 (c2 + s^2);
    c4 = 3 + b^2 c2 + 2 (1-b)^2 dt^2 (c2+s^2);
    c5 = (2 + b^2 c2)/(1-b) + 2 (1-b) dt^2 (c2+s^2) + r/(2(1-b));
    alpha_max = r / (2 (1-b) c3 L), with r = -c4 + sqrt(c4^2 + 4 (1-b)^2 c3)."""
    if L <= 0 or M <= 0 or K < 1 or dt < 1:
        raise ValueError("need L > 0, M > 0, K >= 1, dt >= 1")
    if not (0.0 <= beta < 1.0) or s < 0:
        raise ValueError("need beta in [0, 1) and s >= 0")
    omb = 1.0 - beta
    c2 = (omb * s - 1.0) ** 2 / (omb * omb)
    mix = c2 + s * s
    c3 = M * M * K * (K + 1) ** 2 * dt * dt * mix
    c4 = 3.0 + beta * beta * c2 + 2.0 * omb * omb * dt * dt * mix
    root = -c4 + math.sqrt(c4 * c4 + 4.0 * omb * omb * c3)
    c5 = (2.0 + beta * beta * c2) / omb + 2.0 * omb * dt * dt * mix + root / (2.0 * omb)
    return MomentumBound(c2=c2, c3=c3, c4=c4, c5=c5, alpha_max=root / (2.0 * omb * c3 * L))


def momentum_loss_bound(
    L: float, sigma2: float, beta: float, c5: float,
    f0_minus_fstar: float, n_steps: int, alpha: float,
) -> float:
    """Right-hand side of the momentum convergence bound for a fixed rate alpha."""
    if n_steps <= 0 or alpha <= 0:
        raise ValueError("need n_steps > 0 and alpha > 0")
    return 2.0 * (1.0 - beta) * f0_minus_fstar / (n_steps * alpha) + c5 * sigma2 * L * alpha


def lemma_bound_rhs(L: float, M: float, diffs: list[float]) -> list[float]:
    """Per-block deviation bound: L*M * sum of snapshot distances over blocks >= k.

    Monotone non-increasing in k by construction (fewer summands higher up).
    """
    k_total = len(diffs)
    tail = 0.0
    rhs = [0.0] * k_total
    for k in range(k_total - 1, -1, -1):
        tail += diffs[k]
        rhs[k] = L * M * tail
    return rhs


def estimate_constants(samples) -> tuple[float, float]:
    """Empirical (L_hat, M_hat) from deviation rows of a run.

    M_hat is the largest error-gradient norm any block received; L_hat is the
    smallest Lipschitz constant that, together with M_hat, makes the deviation
    bound hold at every sampled step with a positive snapshot distance.
    """
    m_hat = 0.0
    for row in samples:
        m_hat = max(m_hat, max(row.upstream_norms))
    l_hat = 0.0
    if m_hat > 0.0:
        for row in samples:
            tail = 0.0
            for k in range(len(row.diffs) - 1, -1, -1):
                tail += row.diffs[k]
                if tail > 0.0:
                    l_hat = max(l_hat, row.raw_fwd[k] / (m_hat * tail))
    return l_hat, m_hat


def lemma1_report(samples, L: float, M: float) -> dict:
    """Tabulate measured deviations against the L*M bound for supplied constants.

    The measured side is the bound's own quantity: the distance between the
    runtime gradient and plain BP at the *forward-time* snapshot. A sample
    step "holds" if every block is within its bound; a zero bound (all
    snapshot distances zero from that block up) demands an exactly zero
    deviation. Violations are informational: they indicate the supplied L, M
    are too small.
    """
    rows = []
    holds = 0
    for row in samples:
        rhs = lemma_bound_rhs(L, M, row.diffs)
        ok = all(lhs <= r for lhs, r in zip(row.raw_fwd, rhs))
        holds += ok
        rows.append({
            "batch_index": row.batch_index,
            "measured": list(row.raw_fwd),
            "bound": rhs,
            "holds": ok,
        })
    return {
        "L": L,
        "M": M,
        "samples": len(rows),
        "holds_fraction": (holds / len(rows)) if rows else 1.0,
        "rows": rows,
    }
