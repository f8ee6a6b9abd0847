"""Generalization-certificate calculators.

Every calculator is a pure function returning either a ``Certificate`` (a
risk upper bound tau* at confidence 1 - delta, with an additive budget
breakdown) or a bare float for the comparator-specific corollary forms.

Numerical conventions:

* all probabilities are carried as natural logarithms end to end, so that
  products of tiny priors (e.g. 1/C(2000, 8) * 2^-128 * delta) are routine;
* the two inversions (binary-kl and binomial tail) are plain bisections,
  tolerance 1e-12 on the argument with a hard cap of 200 iterations;
* results are clamped to [0, 1] only when a ``Certificate`` is built; the
  train-set comparison table deliberately reports unclamped values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import gammaln

_BISECT_TOL = 1e-12
_BISECT_MAX_ITER = 200

CERTIFICATE_KINDS = (
    "PB",
    "SCH_BINARY",
    "SCH_REAL",
    "PBSCH",
    "PBSCH_DISINTEGRATED",
    "CATONI",
    "LINEAR",
)


@dataclass(frozen=True)
class BoundBudget:
    """Inputs shared by the certificate calculators.

    ``m_prime`` is the size of the certified task sample, ``c`` the
    compression-set size, ``b`` the message size in bits, ``emp_loss`` the
    empirical loss on the complement set, ``mu_norm_sq`` the squared norm of
    the Gaussian posterior mean, and ``log_prior_j`` the log-probability of
    the chosen compression set (defaults to the uniform prior over distinct
    sets, -ln C(m', c)).
    """

    m_prime: int
    c: int = 0
    b: int = 0
    delta: float = 0.05
    emp_loss: float = 0.0
    mu_norm_sq: float = 0.0
    log_prior_j: float | None = None

    def __post_init__(self):
        if not 0 <= self.c < self.m_prime:
            raise ValueError(f"need 0 <= c < m_prime, got c={self.c}, m_prime={self.m_prime}")
        if self.b < 0:
            raise ValueError("message size b must be >= 0")
        if not 0.0 < self.delta <= 1.0:
            raise ValueError(f"delta must be in (0, 1], got {self.delta}")
        if not 0.0 <= self.emp_loss <= 1.0:
            raise ValueError(f"emp_loss must be in [0, 1], got {self.emp_loss}")
        if self.mu_norm_sq < 0.0:
            raise ValueError("mu_norm_sq must be >= 0")
        if self.log_prior_j is None:
            object.__setattr__(self, "log_prior_j", -log_binomial(self.m_prime, self.c))
        elif self.log_prior_j > 0.0:
            raise ValueError("log_prior_j is a log-probability, must be <= 0")

    @property
    def n_complement(self) -> int:
        return self.m_prime - self.c


@dataclass(frozen=True)
class Certificate:
    """A certified risk bound: tau* at confidence 1 - delta.

    ``breakdown`` lists (label, budget contribution in nats, cumulative tau
    after adding the term); the cumulative values are non-decreasing and the
    last one equals ``tau_star`` bit for bit.
    """

    kind: str
    tau_star: float
    delta: float
    breakdown: tuple[tuple[str, float, float], ...]


# ---------------------------------------------------------------------------
# primitives


def bernoulli_kl(q: float, p: float) -> float:
    """KL divergence between Bernoulli(q) and Bernoulli(p), with 0 ln 0 = 0."""
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"q must be in [0, 1], got {q}")
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must be in [0, 1], got {p}")
    if p in (0.0, 1.0):
        if q == p:
            return 0.0
        raise ValueError(f"kl(q={q}, p={p}) diverges for p in {{0, 1}} with q != p")
    left = 0.0 if q == 0.0 else q * math.log(q / p)
    right = 0.0 if q == 1.0 else (1.0 - q) * math.log((1.0 - q) / (1.0 - p))
    return left + right


def kl_inverse(q: float, budget: float) -> float:
    """sup { tau in [q, 1] : kl(q, tau) <= budget }, by bisection.

    Monotone non-decreasing in both arguments; a zero budget pins tau = q.
    """
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"q must be in [0, 1], got {q}")
    if budget < 0.0:
        raise ValueError(f"budget must be >= 0, got {budget}")
    if budget == 0.0 or q == 1.0:
        return q
    lo, hi = q, 1.0  # kl(q, .) is 0 at q and diverges at 1, so the root is bracketed
    for _ in range(_BISECT_MAX_ITER):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break  # interval exhausted at float resolution
        if bernoulli_kl(q, mid) <= budget:
            lo = mid
        else:
            hi = mid
        if hi - lo <= _BISECT_TOL:
            break
    return lo


def log_binomial(n: int, k: int) -> float:
    """ln C(n, k) via the log-gamma function."""
    if not 0 <= k <= n:
        raise ValueError(f"need 0 <= k <= n, got n={n}, k={k}")
    return float(gammaln(n + 1) - gammaln(k + 1) - gammaln(n - k + 1))


def _log_binom_cdf(n: int, K: int, r: float, log_coeffs: np.ndarray) -> float:
    """ln sum_{k=0}^{K} C(n,k) r^k (1-r)^(n-k), for r strictly inside (0, 1)."""
    k = np.arange(K + 1)
    terms = log_coeffs + k * math.log(r) + (n - k) * math.log1p(-r)
    top = terms.max()
    return float(top + math.log(np.exp(terms - top).sum()))


def binomial_tail_inverse(n: int, K: int, log_delta_prime: float) -> float:
    """sup { r : sum_{k=0}^{K} C(n,k) r^k (1-r)^(n-k) >= exp(log_delta_prime) }.

    The binomial CDF is summed in log space (the budget routinely sits around
    e^-53), and the supremum is found by bisection.  The sum starts at k = 0,
    the standard binomial-tail test-set convention.  The result grows with K
    and with |log_delta_prime|.
    """
    if not 0 <= K <= n:
        raise ValueError(f"need 0 <= K <= n, got n={n}, K={K}")
    if log_delta_prime > 0.0:
        raise ValueError(f"log_delta_prime is a log-probability, must be <= 0, got {log_delta_prime}")
    if K == n:
        return 1.0  # CDF is identically 1
    log_coeffs = gammaln(n + 1) - gammaln(np.arange(K + 1) + 1) - gammaln(n - np.arange(K + 1) + 1)
    lo, hi = 0.0, 1.0  # CDF(0) = 1 >= delta', CDF(1) = 0 < delta'
    for _ in range(_BISECT_MAX_ITER):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break  # interval exhausted at float resolution
        if _log_binom_cdf(n, K, mid, log_coeffs) >= log_delta_prime:
            lo = mid
        else:
            hi = mid
        if hi - lo <= _BISECT_TOL:
            break
    return lo


def gaussian_kl(mu) -> float:
    """KL( N(mu, I) || N(0, I) ) = ||mu||^2 / 2."""
    mu = np.asarray(mu, dtype=np.float64).reshape(-1)
    return 0.5 * float(mu @ mu)


def renyi_divergence_gaussian(mu, alpha: float) -> float:
    """Renyi divergence D_alpha( N(mu, I) || N(0, I) ) = alpha ||mu||^2 / 2."""
    if alpha <= 1.0:
        raise ValueError(f"alpha must be > 1, got {alpha}")
    mu = np.asarray(mu, dtype=np.float64).reshape(-1)
    return 0.5 * alpha * float(mu @ mu)


# ---------------------------------------------------------------------------
# certificates

# Breakdown terms follow a fixed order: empirical loss, confidence term,
# message cost, compression-set cost.


def _kl_certificate(kind: str, q: float, n_eff: int, delta: float,
                    confidence_nats: float, message_nats: float,
                    compression_nats: float) -> Certificate:
    rows = [("empirical_loss", 0.0, kl_inverse(q, 0.0))]
    acc = 0.0
    for label, nats in (("confidence", confidence_nats),
                        ("message_cost", message_nats),
                        ("compression_set_cost", compression_nats)):
        acc += nats
        rows.append((label, nats, kl_inverse(q, acc / n_eff)))
    return Certificate(kind=kind, tau_star=rows[-1][2], delta=delta, breakdown=tuple(rows))


def bound_pb(budget: BoundBudget) -> Certificate:
    """PAC-Bayes certificate for the Gaussian-latent hypernetwork.

    tau* = kl_inverse(q, (||mu||^2/2 + ln(2 sqrt(m')/delta)) / m'); certifies
    the posterior-expected loss on the task distribution.
    """
    if budget.c != 0:
        raise ValueError("the PAC-Bayes certificate has no compression set (c must be 0)")
    m = budget.m_prime
    return _kl_certificate(
        "PB", budget.emp_loss, m, budget.delta,
        confidence_nats=math.log(2.0 * math.sqrt(m) / budget.delta),
        message_nats=0.5 * budget.mu_norm_sq,
        compression_nats=0.0,
    )


def bound_sch_binary(budget: BoundBudget, K: int) -> Certificate:
    """Binomial-tail certificate for 0-1 losses.

    ``K`` is the integer count of errors on the complement set; the inversion
    runs at log confidence ln(delta) + log_prior_j - b ln 2.
    """
    n = budget.n_complement
    if not 0 <= K <= n:
        raise ValueError(f"error count K={K} outside [0, {n}]")
    conf_nats = math.log(1.0 / budget.delta)
    msg_nats = budget.b * math.log(2.0)
    comp_nats = -budget.log_prior_j
    tail = [
        binomial_tail_inverse(n, K, -(conf_nats)),
        binomial_tail_inverse(n, K, -(conf_nats + msg_nats)),
        binomial_tail_inverse(n, K, -(conf_nats + msg_nats + comp_nats)),
    ]
    # The empirical row shows the raw error rate; the min-guard keeps the
    # cumulative sequence monotone for degenerate delta' > 1/2 inputs.
    rows = (
        ("empirical_loss", 0.0, min(K / n, tail[0])),
        ("confidence", conf_nats, tail[0]),
        ("message_cost", msg_nats, tail[1]),
        ("compression_set_cost", comp_nats, tail[2]),
    )
    return Certificate(kind="SCH_BINARY", tau_star=tail[2], delta=budget.delta, breakdown=rows)


def bound_sch_real(budget: BoundBudget) -> Certificate:
    """kl certificate for [0, 1]-valued losses of a sample-compressed predictor.

    tau* = kl_inverse(q, (ln(1/P_J(j)) + (b+1) ln 2 + ln sqrt(m'-c) + ln(1/delta)) / (m'-c)).
    """
    n = budget.n_complement
    return _kl_certificate(
        "SCH_REAL", budget.emp_loss, n, budget.delta,
        confidence_nats=math.log(2.0 * math.sqrt(n) / budget.delta),
        message_nats=budget.b * math.log(2.0),
        compression_nats=-budget.log_prior_j,
    )


def bound_pbsch(budget: BoundBudget) -> Certificate:
    """Hybrid certificate: compression set plus Gaussian message posterior.

    tau* = kl_inverse(q, (||mu||^2/2 + ln(1/P_J(j)) + ln(2 sqrt(m'-c)/delta)) / (m'-c));
    certifies the message-posterior-expected loss.  With c = 0 and mu = 0 it
    coincides with ``bound_pb``.
    """
    n = budget.n_complement
    return _kl_certificate(
        "PBSCH", budget.emp_loss, n, budget.delta,
        confidence_nats=math.log(2.0 * math.sqrt(n) / budget.delta),
        message_nats=0.5 * budget.mu_norm_sq,
        compression_nats=-budget.log_prior_j,
    )


def bound_pbsch_disintegrated(budget: BoundBudget) -> Certificate:
    """Single-draw variant of the hybrid certificate (Renyi order alpha = 2).

    tau* = kl_inverse(q, (||mu||^2 + ln(1/P_J(j)) + ln(16 sqrt(m'-c)/delta^3)) / (m'-c));
    certifies the one predictor decoded from a message sampled once from the
    posterior.  Strictly looser than ``bound_pbsch`` on the same inputs.
    """
    n = budget.n_complement
    return _kl_certificate(
        "PBSCH_DISINTEGRATED", budget.emp_loss, n, budget.delta,
        confidence_nats=math.log(16.0) + 0.5 * math.log(n) + 3.0 * math.log(1.0 / budget.delta),
        message_nats=budget.mu_norm_sq,
        compression_nats=-budget.log_prior_j,
    )


def bound_catoni(C_param: float, exp_emp_loss: float, kl_msg: float,
                 log_prior_j: float, delta: float, n_eff: int) -> float:
    """Catoni-comparator bound, clamped to [0, 1].

    (1/(1-e^-C)) * [1 - exp(-C q - (kl_msg - ln(P_J(j) delta)) / n_eff)].
    """
    if C_param <= 0.0:
        raise ValueError(f"C must be > 0, got {C_param}")
    if log_prior_j > 0.0:
        raise ValueError("log_prior_j must be <= 0")
    exponent = -C_param * exp_emp_loss - (kl_msg - (log_prior_j + math.log(delta))) / n_eff
    value = (1.0 - math.exp(exponent)) / (1.0 - math.exp(-C_param))
    return min(1.0, max(0.0, value))


def bound_linear_subgaussian(lambda_: float, sigma_sq: float, emp_loss: float,
                             kl_msg: float, log_prior_j: float, delta: float,
                             n_eff: int, n_minus_j: int) -> float:
    """Linear-comparator bound for a sigma^2-sub-Gaussian loss.

    emp_loss + [kl_msg - log_prior_j + ln(1/delta) + (n-|j|) lambda^2 sigma^2 / 2]
    / (lambda n_eff), with a Dirac prior collapsing the log-moment term to its
    single summand.  Not clamped: sub-Gaussian losses need not live in [0, 1].
    """
    if lambda_ <= 0.0:
        raise ValueError(f"lambda must be > 0, got {lambda_}")
    if log_prior_j > 0.0:
        raise ValueError("log_prior_j must be <= 0")
    log_mgf = n_minus_j * lambda_ * lambda_ * sigma_sq / 2.0
    return emp_loss + (kl_msg - log_prior_j + math.log(1.0 / delta) + log_mgf) / (lambda_ * n_eff)


# ---------------------------------------------------------------------------
# train-set vs complement-set comparison


class GapRow(NamedTuple):
    val_loss: float
    bound_squared: float
    bound_kl_pinsker: float
    gap: float


def compare_trainset_bounds(m: int, comp_size: int, kl_val: float, delta: float,
                            val_loss_grid: Sequence[float]) -> list[GapRow]:
    """Compare the train-set (squared-comparator) bound against the relaxed
    complement-set kl bound (via Pinsker), over a grid of complement losses.

    Assumes zero loss on the compression set and a Dirac-like prior on one
    compression set of size ``comp_size``, so the train loss is
    (m - comp_size)/m * val_loss.  Values are deliberately unclamped; the gap
    column is bound_squared - bound_kl_pinsker.
    """
    if not 0 <= comp_size < m:
        raise ValueError(f"need 0 <= comp_size < m, got comp_size={comp_size}, m={m}")
    if kl_val < 0.0:
        raise ValueError("kl_val must be >= 0")
    if not 0.0 < delta <= 1.0:
        raise ValueError(f"delta must be in (0, 1], got {delta}")
    n = m - comp_size
    log_conf = math.log(2.0 * math.sqrt(n) / delta)
    # exp(2 n comp_size / m) carried in log space: it only ever enters as nats
    sq_nats = kl_val + 2.0 * n * comp_size / m + log_conf
    kl_nats = kl_val + log_conf
    rows = []
    for v in val_loss_grid:
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"val_loss must be in [0, 1], got {v}")
        bound_sq = n / m * v + math.sqrt(sq_nats / (2.0 * n))
        bound_kl = v + math.sqrt(kl_nats / n / 2.0)
        rows.append(GapRow(v, bound_sq, bound_kl, bound_sq - bound_kl))
    return rows
