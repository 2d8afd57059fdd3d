"""Closed-form model of a switch-and-loop temporally multiplexed heralded source.

Every time bin of an output cycle is an independent pair source.  The
controller stores the signal photon of the first heralded bin in a fibre
loop and releases it at the common output slot, so a photon from bin ``j``
of ``m`` completes ``k = m - j + 1`` round trips and reaches the detector
with transmission ``eta_s_prime * eta_rt**k``.

All quantities are per output cycle unless stated otherwise.  Functions are
pure and operate on frozen dataclasses.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as _st

from .errors import (
    CapacityError,
    InconsistentCountsError,
    ParameterError,
    UndefinedRatioError,
)

TRUNCATION_TOL = 1e-12
N_MAX_CAP = 64


class Law(str, enum.Enum):
    THERMAL = "thermal"
    POISSON = "poisson"


@dataclass(frozen=True)
class PhotonStatistics:
    """Pair-number law of a single time bin with mean pair number ``mu``."""

    law: Law = Law.THERMAL
    mu: float = 0.009

    def __post_init__(self):
        object.__setattr__(self, "law", Law(self.law))
        if not (self.mu >= 0 and math.isfinite(self.mu)):
            raise ParameterError(f"mean photon number must be >= 0, got {self.mu!r}")


def _db_to_transmission(loss_db: float) -> float:
    return 10.0 ** (-loss_db / 10.0)


@dataclass(frozen=True)
class ChannelModel:
    """Transmissions of the herald arm, the signal arm and one loop round trip.

    ``eta_s_prime`` excludes the switch; ``loss_db_per_round_trip`` is the
    combined switch + fibre loop loss charged once per round trip.
    """

    eta_h: float = 0.145
    eta_s_prime: float = 0.143
    loss_db_per_round_trip: float = 1.0

    def __post_init__(self):
        for name in ("eta_h", "eta_s_prime"):
            v = getattr(self, name)
            if not (0.0 < v <= 1.0):
                raise ParameterError(f"{name} must lie in (0, 1], got {v!r}")
        if not (self.loss_db_per_round_trip >= 0 and math.isfinite(self.loss_db_per_round_trip)):
            raise ParameterError(
                f"loss_db_per_round_trip must be >= 0, got {self.loss_db_per_round_trip!r}"
            )

    @classmethod
    def from_component_losses(cls, eta_h, eta_s_prime, switch_loss_db, loop_loss_db):
        """Build a channel from separate switch and fibre-loop losses (dB)."""
        return cls(eta_h, eta_s_prime, switch_loss_db + loop_loss_db)

    @property
    def eta_rt(self) -> float:
        return _db_to_transmission(self.loss_db_per_round_trip)

    @property
    def eta_s(self) -> float:
        """Signal heralding efficiency including one round trip."""
        return self.eta_s_prime * self.eta_rt

    def signal_transmission(self, round_trips: int) -> float:
        return self.eta_s_prime * self.eta_rt ** round_trips


@dataclass(frozen=True)
class MuxConfig:
    """Multiplexing geometry and timing of one output cycle."""

    m: int = 11
    tau_ns: float = 125.0
    clock_hz: float = 500e3
    delta_tau_ns: float = 1.7
    delay_ns: float = 200.0
    coherence_ps: float = 5.0
    laser_hz: float = 16e6

    def __post_init__(self):
        if int(self.m) != self.m or self.m < 1:
            raise ParameterError(f"bin count m must be an integer >= 1, got {self.m!r}")
        object.__setattr__(self, "m", int(self.m))
        for name in ("tau_ns", "clock_hz", "delay_ns", "coherence_ps", "laser_hz"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be > 0, got {getattr(self, name)!r}")
        if not self.delta_tau_ns >= 0:
            raise ParameterError(f"delta_tau_ns must be >= 0, got {self.delta_tau_ns!r}")
        if self.tau_ps * self.m > self.period_ps:
            raise CapacityError(
                f"m * tau = {self.m * self.tau_ns} ns exceeds the output period "
                f"{self.period_ps / 1000} ns"
            )

    @property
    def period_ps(self) -> int:
        return round(1e12 / self.clock_hz)

    @property
    def tau_ps(self) -> int:
        return round(self.tau_ns * 1000)

    @property
    def delta_tau_ps(self) -> int:
        return round(self.delta_tau_ns * 1000)

    @property
    def delay_ps(self) -> int:
        return round(self.delay_ns * 1000)

    @property
    def laser_period_ps(self) -> int:
        return round(1e12 / self.laser_hz)


@dataclass(frozen=True)
class AnalyticResult:
    q: float
    p_h: float
    first_fire: np.ndarray = field(repr=False)
    no_fire: float
    p_m: float
    enhancement: float
    x_b_hz: float
    x_m_hz: float


# -- photon-number statistics -------------------------------------------------


def _tail_mass(stats: PhotonStatistics, n_max: int) -> float:
    if stats.mu == 0:
        return 0.0
    if stats.law is Law.THERMAL:
        return (stats.mu / (1.0 + stats.mu)) ** (n_max + 1)
    return float(_st.poisson.sf(n_max, stats.mu))


def pair_number_distribution(stats: PhotonStatistics, n_max: int):
    """Return ``(p, tail)`` with ``p[n]`` for ``n = 0..n_max`` and the mass beyond."""
    if n_max < 0:
        raise ParameterError(f"n_max must be >= 0, got {n_max}")
    n = np.arange(n_max + 1)
    mu = stats.mu
    if mu == 0:
        p = np.zeros(n_max + 1)
        p[0] = 1.0
        return p, 0.0
    if stats.law is Law.THERMAL:
        p = (1.0 / (1.0 + mu)) * (mu / (1.0 + mu)) ** n
    else:
        p = _st.poisson.pmf(n, mu)
    return p, _tail_mass(stats, n_max)


def adaptive_n_max(stats: PhotonStatistics, tol: float = TRUNCATION_TOL, cap: int = N_MAX_CAP) -> int:
    """Smallest cutoff whose neglected tail is below ``tol`` (never above ``cap``)."""
    for n_max in range(cap + 1):
        if _tail_mass(stats, n_max) < tol:
            return n_max
    return cap


def _one_minus_gf(stats: PhotonStatistics, u):
    """``1 - G(1 - u)`` for the probability generating function ``G``.

    This is the probability that at least one of the bin's photons survives
    independent thinning with per-photon survival ``u``.
    """
    mu = stats.mu
    if stats.law is Law.THERMAL:
        return mu * u / (1.0 + mu * u)
    return -np.expm1(-mu * u)


def _gf_derivative(stats: PhotonStatistics, order: int, x: float) -> float:
    mu = stats.mu
    if stats.law is Law.THERMAL:
        return math.factorial(order) * mu**order / (1.0 + mu * (1.0 - x)) ** (order + 1)
    return mu**order * math.exp(-mu * (1.0 - x))


def herald_click_prob(stats: PhotonStatistics, eta_h: float) -> float:
    """Click probability of a threshold herald detector for one bin."""
    if not 0.0 <= eta_h <= 1.0:
        raise ParameterError(f"eta_h must lie in [0, 1], got {eta_h!r}")
    return float(_one_minus_gf(stats, eta_h))


def joint_click_prob(stats: PhotonStatistics, eta_h: float, transmission: float) -> float:
    """Probability that the herald clicks and at least one signal photon survives.

    Herald and signal photons of the same ``n`` pairs are thinned
    independently.
    """
    a, t = eta_h, transmission
    return float(
        _one_minus_gf(stats, a) + _one_minus_gf(stats, t) - _one_minus_gf(stats, a + t - a * t)
    )


# -- first-fire bookkeeping ---------------------------------------------------


def first_fire_distribution(q: float, m: int):
    """Probability that bin ``j`` (1-based, chronological) is the first to herald.

    Returns ``(masses, no_fire)`` where ``masses[j - 1] = (1 - q)**(j - 1) * q``.
    """
    if not 0.0 <= q <= 1.0:
        raise ParameterError(f"q must lie in [0, 1], got {q!r}")
    if m < 1:
        raise ParameterError(f"m must be >= 1, got {m}")
    masses = q * (1.0 - q) ** np.arange(m)
    return masses, (1.0 - q) ** m


def herald_prob_at_least_one(q: float, m: int) -> float:
    if not 0.0 <= q <= 1.0:
        raise ParameterError(f"q must lie in [0, 1], got {q!r}")
    return float(-np.expm1(m * np.log1p(-q))) if q < 1.0 else 1.0


def stored_round_trips(j: int, m: int) -> int:
    """Round trips completed by a photon stored from bin ``j`` of ``m``."""
    if not 1 <= j <= m:
        raise ParameterError(f"bin index {j} outside 1..{m}")
    return m - j + 1


# -- output probability and rates --------------------------------------------


def multiplexed_coincidence_prob(stats: PhotonStatistics, channels: ChannelModel, m: int) -> float:
    """Probability per output cycle of a herald plus a detected output photon."""
    if m < 1:
        raise ParameterError(f"m must be >= 1, got {m}")
    q = herald_click_prob(stats, channels.eta_h)
    total = 0.0
    for j in range(1, m + 1):
        t = channels.signal_transmission(stored_round_trips(j, m))
        total += (1.0 - q) ** (j - 1) * joint_click_prob(stats, channels.eta_h, t)
    return total


def enhancement(stats: PhotonStatistics, channels: ChannelModel, m: int) -> float:
    base = multiplexed_coincidence_prob(stats, channels, 1)
    if base == 0.0:
        raise UndefinedRatioError("single-bin output probability is zero")
    if m == 1:
        return 1.0
    return multiplexed_coincidence_prob(stats, channels, m) / base


def output_rates(stats: PhotonStatistics, channels: ChannelModel, cfg: MuxConfig):
    """Heralded output rates ``(x_b_hz, x_m_hz)`` for one bin and for ``cfg.m`` bins."""
    x_b = cfg.clock_hz * multiplexed_coincidence_prob(stats, channels, 1)
    x_m = cfg.clock_hz * multiplexed_coincidence_prob(stats, channels, cfg.m)
    return x_b, x_m


def analyze_config(stats: PhotonStatistics, channels: ChannelModel, cfg: MuxConfig) -> AnalyticResult:
    q = herald_click_prob(stats, channels.eta_h)
    masses, no_fire = first_fire_distribution(q, cfg.m)
    p1 = multiplexed_coincidence_prob(stats, channels, 1)
    pm = multiplexed_coincidence_prob(stats, channels, cfg.m)
    return AnalyticResult(
        q=q,
        p_h=herald_prob_at_least_one(q, cfg.m),
        first_fire=masses,
        no_fire=no_fire,
        p_m=pm,
        enhancement=pm / p1 if p1 > 0 else math.nan,
        x_b_hz=cfg.clock_hz * p1,
        x_m_hz=cfg.clock_hz * pm,
    )


def asymptotic_limit(channels: ChannelModel, stats: PhotonStatistics, lossless_switch: bool = False) -> float:
    """Output probability as the number of bins grows without bound.

    With a lossless switch every cycle eventually heralds and the stored photon
    keeps the bare heralding efficiency, so the limit is ``eta_s_prime``.  With
    a lossy loop the result is the low-herald-rate envelope
    ``q * eta_s_prime * eta_rt / (1 - eta_rt)``: the geometric sum over round
    trips, which bounds the enhancement by ``1 / (1 - eta_rt)``.  At a fixed
    ``q > 0`` the exact probability peaks at finite ``m`` and decays after.
    """
    q = herald_click_prob(stats, channels.eta_h)
    if q == 0.0:
        return 0.0
    eta_rt = 1.0 if lossless_switch else channels.eta_rt
    if eta_rt == 1.0:
        return channels.eta_s_prime
    return q * channels.eta_s_prime * eta_rt / (1.0 - eta_rt)


def linear_coincidence_prob(stats: PhotonStatistics, channels: ChannelModel, m: int) -> float:
    """First-order-in-``q`` output probability, ``q * sum_k eta_s_prime * eta_rt**k``."""
    q = herald_click_prob(stats, channels.eta_h)
    k = np.arange(1, m + 1)
    return float(q * np.sum(channels.eta_s_prime * channels.eta_rt**k))


# -- calibration --------------------------------------------------------------


@dataclass(frozen=True)
class Calibration:
    mu: float
    eta_h: float
    eta_s: float


def calibrate_mu(c_rate: float, s_h_rate: float, s_s_rate: float, pulse_rate: float) -> Calibration:
    """Invert coincidence and singles rates for ``mu``, ``eta_h`` and ``eta_s``.

    Uses the low-power identities ``C = R mu eta_h eta_s``, ``S_h = R mu eta_h``
    and ``S_s = R mu eta_s``.
    """
    if min(c_rate, s_h_rate, s_s_rate, pulse_rate) <= 0:
        raise InconsistentCountsError(
            f"all rates must be > 0 (C={c_rate}, S_h={s_h_rate}, S_s={s_s_rate}, R={pulse_rate})"
        )
    if c_rate > min(s_h_rate, s_s_rate):
        raise InconsistentCountsError(
            f"coincidence rate {c_rate} exceeds a singles rate ({s_h_rate}, {s_s_rate})"
        )
    return Calibration(
        mu=s_h_rate * s_s_rate / (c_rate * pulse_rate),
        eta_h=c_rate / s_s_rate,
        eta_s=c_rate / s_h_rate,
    )


def forward_rates(mu: float, eta_h: float, eta_s: float, pulse_rate: float):
    """Low-power ``(C, S_h, S_s)`` generated by a source; inverse of :func:`calibrate_mu`."""
    return (
        pulse_rate * mu * eta_h * eta_s,
        pulse_rate * mu * eta_h,
        pulse_rate * mu * eta_s,
    )


# -- heralded second-order correlation ---------------------------------------


def heralded_g2_moments(stats: PhotonStatistics, eta_h: float) -> float:
    """Heralded ``g2(0) = <n(n-1)>_h / <n>_h**2`` of the signal photon number.

    The heralded distribution is ``p(n) * (1 - (1 - eta_h)**n)``; moments use
    generating-function derivatives.  Signal loss leaves the value unchanged.
    Low-power slopes: 4 * mu (thermal), 2 * mu (Poisson) as ``eta_h -> 0``.
    """
    if not 0.0 <= eta_h <= 1.0:
        raise ParameterError(f"eta_h must lie in [0, 1], got {eta_h!r}")
    if stats.mu == 0:
        return 0.0
    d = lambda r, x: _gf_derivative(stats, r, x)  # noqa: E731
    a = eta_h
    if a < 1e-9:
        # eta_h -> 0: the heralded law becomes n * p(n) / <n>
        mean = d(1, 1.0)
        second = d(2, 1.0) + d(1, 1.0)
        third = d(3, 1.0) + 2.0 * d(2, 1.0)
        return mean * third / second**2
    mu = stats.mu
    if stats.law is Law.THERMAL:
        # G(x) = 1 / (1 + mu (1 - x)); differences expanded so nothing cancels
        b = 1.0 + mu * a
        p_click = mu * a / b
        s1 = mu * a * (1.0 + 2.0 * mu + mu * mu * a) / b**2
        s2 = 2.0 * mu * mu * a * (2.0 + 3.0 * mu + a * (3.0 * mu * mu - 1.0) + mu**3 * a * a) / b**3
    else:
        # G(x) = exp(-mu (1 - x))
        lost = -math.expm1(-mu * a)
        kept = math.exp(-mu * a)
        p_click = lost
        s1 = mu * (lost + a * kept)
        s2 = mu * mu * (lost + a * (2.0 - a) * kept)
    return p_click * s2 / s1**2


def g2_low_power_approx(stats: PhotonStatistics) -> float:
    """The rule-of-thumb estimate ``g2(0) ~ mu`` used for weak pair sources."""
    return stats.mu


# -- topology and distinguishability -----------------------------------------


@dataclass(frozen=True)
class TopologyComparison:
    m: int
    loop_avg_passes: float
    tree_passes: int
    loop_avg_transmission: float
    tree_transmission: float


def topology_compare(m: int, per_pass_loss_db: float) -> TopologyComparison:
    """Switch passes of a loop (average over bins) versus a binary tree."""
    if m < 1:
        raise ParameterError(f"m must be >= 1, got {m}")
    if per_pass_loss_db < 0:
        raise ParameterError(f"loss must be >= 0 dB, got {per_pass_loss_db}")
    loop = (m + 1) / 2
    tree = (m - 1).bit_length()  # exact ceil(log2 m) for integers
    return TopologyComparison(
        m=m,
        loop_avg_passes=loop,
        tree_passes=tree,
        loop_avg_transmission=_db_to_transmission(loop * per_pass_loss_db),
        tree_transmission=_db_to_transmission(tree * per_pass_loss_db),
    )


def arrival_offset_and_overlap(k1: int, k2: int, cfg: MuxConfig):
    """Timing offset (ps) between photons stored ``k1`` and ``k2`` round trips.

    The overlap assumes Gaussian wavepackets of coherence time ``cfg.coherence_ps``.
    """
    if k1 < 1 or k2 < 1:
        raise ParameterError(f"round trips must be >= 1, got {k1}, {k2}")
    offset = abs(k1 - k2) * cfg.delta_tau_ps
    overlap = math.exp(-(offset**2) / (4.0 * cfg.coherence_ps**2))
    return offset, overlap
