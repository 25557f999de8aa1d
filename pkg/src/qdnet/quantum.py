"""Seedable stochastic BB84 rounds.

Two built-in protocols:

* ``bb84_with_eve``: ideal channel plus an optional intercept-resend attacker.
* ``extended_bb84``: fiber loss, detector efficiency, dark counts and
  depolarization, with the attacker (if any) placed at ``position_km`` so that
  loss before her thins what she can intercept.

Bits are ``numpy.uint8`` arrays of 0/1. One ``numpy.random.Generator`` is
built per round from the caller's seed, so identical inputs reproduce the
round bit for bit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Protocol, Sequence

import numpy as np

from qdnet import config as _config
from qdnet.params import EveDecl, LinkPhysics, ProtocolParams

Seed = int | Sequence[int] | np.random.SeedSequence


@dataclass(eq=False)
class RoundOutcome:
    secure_bits: np.ndarray
    peer_bits: np.ndarray  # what the responder ends up holding; equals secure_bits unless divergent
    alice_sifted: np.ndarray
    bob_sifted: np.ndarray
    qber: float
    sample_size: int
    sample_errors: int
    channel_uses: int
    detected: int
    simulated_duration_s: float
    aborted: bool = False
    compromised_divergent: bool = False

    def __post_init__(self):
        assert len(self.alice_sifted) == len(self.bob_sifted)
        if self.aborted:
            assert len(self.secure_bits) == 0

    def same_as(self, other: "RoundOutcome") -> bool:
        arrays = ("secure_bits", "peer_bits", "alice_sifted", "bob_sifted")
        scalars = ("qber", "sample_size", "sample_errors", "channel_uses", "detected",
                   "simulated_duration_s", "aborted", "compromised_divergent")
        return all(np.array_equal(getattr(self, a), getattr(other, a)) for a in arrays) and all(
            getattr(self, s) == getattr(other, s) for s in scalars
        )


@dataclass
class PulseRecord:
    """Per-pulse record of one round, before sifting."""

    alice_bits: np.ndarray
    alice_bases: np.ndarray
    bob_bases: np.ndarray
    bob_bits: np.ndarray
    detected: np.ndarray
    intercepted: np.ndarray


def transmittance(attenuation_db: float) -> float:
    return 10.0 ** (-attenuation_db / 10.0)


def click_probability(attenuation_db: float, efficiency: float, dark_count_prob: float) -> float:
    te = transmittance(attenuation_db) * efficiency
    return te + (1.0 - te) * dark_count_prob


def _measure(rng, state_bases, state_bits, bob_bases):
    random_bits = rng.integers(0, 2, state_bits.shape, dtype=np.uint8)
    return np.where(state_bases == bob_bases, state_bits, random_bits).astype(np.uint8)


def simulate_pulses(
    rng: np.random.Generator,
    n: int,
    *,
    eve: EveDecl | None = None,
    t_before_eve: float = 1.0,
    t_after_eve: float = 1.0,
    efficiency: float = 1.0,
    dark_count_prob: float = 0.0,
    depolarization_prob: float = 0.0,
) -> PulseRecord:
    a_bits = rng.integers(0, 2, n, dtype=np.uint8)
    a_bases = rng.integers(0, 2, n, dtype=np.uint8)
    b_bases = rng.integers(0, 2, n, dtype=np.uint8)

    reach_eve = rng.random(n) < t_before_eve
    bob_bits = _measure(rng, a_bases, a_bits, b_bases)

    intercepted = np.zeros(n, dtype=bool)
    if eve is not None and eve.intercept_fraction > 0:
        intercepted = reach_eve & (rng.random(n) < eve.intercept_fraction)
        e_bases = rng.integers(0, 2, n, dtype=np.uint8)
        e_bits = _measure(rng, a_bases, a_bits, e_bases)
        # Eve resends what she measured; Bob measures the resent state.
        resent = _measure(rng, e_bases, e_bits, b_bases)
        # In Alice's basis the disturbance is set by error_per_intercept: wrong
        # Eve basis errs with min(1, 2e), right basis with max(0, 2e - 1).
        # At e = 0.25 this is exactly the measure-and-resend statistics.
        e = eve.error_per_intercept
        p_err = np.where(e_bases != a_bases, min(1.0, 2.0 * e), max(0.0, 2.0 * e - 1.0))
        flips = (rng.random(n) < p_err).astype(np.uint8)
        matched = b_bases == a_bases
        resent = np.where(matched, a_bits ^ flips, resent).astype(np.uint8)
        bob_bits = np.where(intercepted, resent, bob_bits).astype(np.uint8)

    if depolarization_prob > 0:
        depol = rng.random(n) < depolarization_prob
        r_bases = rng.integers(0, 2, n, dtype=np.uint8)
        r_bits = rng.integers(0, 2, n, dtype=np.uint8)
        bob_bits = np.where(depol, _measure(rng, r_bases, r_bits, b_bases), bob_bits).astype(np.uint8)

    arrive = reach_eve & (rng.random(n) < t_after_eve)
    photon_click = arrive & (rng.random(n) < efficiency)
    if dark_count_prob > 0:
        dark_click = ~photon_click & (rng.random(n) < dark_count_prob)
        bob_bits = np.where(dark_click, rng.integers(0, 2, n, dtype=np.uint8), bob_bits).astype(np.uint8)
        detected = photon_click | dark_click
    else:
        detected = photon_click
    return PulseRecord(a_bits, a_bases, b_bases, bob_bits, detected, intercepted)


def estimate_qber(alice_sample, bob_sample) -> float:
    a = np.asarray(alice_sample, dtype=np.uint8)
    b = np.asarray(bob_sample, dtype=np.uint8)
    if a.shape != b.shape:
        raise ValueError(f"sample length mismatch: {a.size} != {b.size}")
    if a.size == 0:
        raise ValueError("empty sample")
    return float(np.count_nonzero(a != b)) / a.size


def binary_entropy(p: float) -> float:
    if p <= 0.0 or p >= 1.0:
        return 0.0
    return -p * math.log2(p) - (1.0 - p) * math.log2(1.0 - p)


def secure_fraction(qber: float) -> float:
    """Asymptotic BB84 secret fraction ``max(0, 1 - 2 h2(qber))``."""
    if not 0.0 <= qber <= 0.5:
        raise ValueError(f"qber must be in [0, 0.5], got {qber}")
    return max(0.0, 1.0 - 2.0 * binary_entropy(qber))


def simulated_duration(rounds: int, params: ProtocolParams) -> float:
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    return rounds * (params.pulses_per_round / params.pulse_rate_hz + params.classical_overhead_s)


def kbr(outcome: RoundOutcome) -> float:
    """Secure key bits per channel use."""
    if outcome.channel_uses < 1:
        raise ValueError("channel_uses must be >= 1")
    return len(outcome.secure_bits) / outcome.channel_uses


def sift_and_distill(
    rng: np.random.Generator,
    pulses: PulseRecord,
    params: ProtocolParams,
    *,
    release_divergent: bool = False,
) -> RoundOutcome:
    keep = pulses.detected & (pulses.alice_bases == pulses.bob_bases)
    alice = pulses.alice_bits[keep]
    bob = pulses.bob_bits[keep]
    n = alice.size
    duration = simulated_duration(1, params)
    channel_uses = pulses.alice_bits.size
    detected = int(np.count_nonzero(pulses.detected))
    empty = np.zeros(0, dtype=np.uint8)
    if n == 0:
        return RoundOutcome(empty, empty, alice, bob, 0.0, 0, 0, channel_uses, detected, duration)

    k = min(n, max(1, int(round(n * params.qber_sample_fraction))))
    order = rng.permutation(n)
    sample = np.zeros(n, dtype=bool)
    sample[order[:k]] = True
    errors = int(np.count_nonzero(alice[sample] != bob[sample]))
    qber = estimate_qber(alice[sample], bob[sample])
    a_rest, b_rest = alice[~sample], bob[~sample]

    if qber > params.qber_abort_threshold:
        if release_divergent:
            return RoundOutcome(a_rest, b_rest, alice, bob, qber, k, errors, channel_uses,
                                detected, duration, compromised_divergent=True)
        return RoundOutcome(empty, empty, alice, bob, qber, k, errors, channel_uses,
                            detected, duration, aborted=True)

    m = int(math.floor(a_rest.size * secure_fraction(qber)))
    # Reconciliation is abstracted: both ends hold Alice's bits after it.
    key = a_rest[:m].copy()
    return RoundOutcome(key, key.copy(), alice, bob, qber, k, errors, channel_uses, detected, duration)


def run_bb84_with_eve(
    params: ProtocolParams,
    eve: EveDecl | None,
    seed: Seed,
    *,
    release_divergent: bool = False,
) -> RoundOutcome:
    """BB84 over an ideal channel, optionally attacked by ``eve``.

    Eve's position does not matter here; without loss there is nothing for it
    to partition.
    """
    rng = np.random.default_rng(seed)
    pulses = simulate_pulses(rng, params.pulses_per_round, eve=eve)
    return sift_and_distill(rng, pulses, params, release_divergent=release_divergent)


def run_extended_bb84(
    params: ProtocolParams,
    phys: LinkPhysics,
    seed: Seed,
    *,
    release_divergent: bool = False,
) -> RoundOutcome:
    rng = np.random.default_rng(seed)
    att = phys.total_attenuation_db
    if phys.eve is not None and phys.length_km > 0:
        before = att * phys.eve.position_km / phys.length_km
    else:
        before = 0.0
    pulses = simulate_pulses(
        rng,
        params.pulses_per_round,
        eve=phys.eve,
        t_before_eve=transmittance(before),
        t_after_eve=transmittance(att - before),
        efficiency=params.detector_efficiency,
        dark_count_prob=params.dark_count_prob,
        depolarization_prob=params.depolarization_prob,
    )
    return sift_and_distill(rng, pulses, params, release_divergent=release_divergent)


class ProtocolFn(Protocol):
    def __call__(self, params: ProtocolParams, phys: LinkPhysics, seed: Seed, *,
                 release_divergent: bool = False) -> RoundOutcome: ...


def _bb84_with_eve(params, phys, seed, *, release_divergent=False):
    return run_bb84_with_eve(params, phys.eve, seed, release_divergent=release_divergent)


_registry: dict[str, ProtocolFn] = {
    "bb84_with_eve": _bb84_with_eve,
    "extended_bb84": run_extended_bb84,
}


def register_protocol(name: str, fn: ProtocolFn | Callable, *, supports_eve: bool = True) -> None:
    """Make ``fn`` available to links declaring ``protocol: name``.

    Registration also teaches the config parser the new name, so it must
    happen before the configuration is parsed.
    """
    _registry[name] = fn
    if name not in _config.PROTOCOLS:
        _config._extra_protocols[name] = supports_eve


def unregister_protocol(name: str) -> None:
    if name in _config.PROTOCOLS:
        raise ValueError(f"cannot unregister built-in protocol {name}")
    _registry.pop(name, None)
    _config._extra_protocols.pop(name, None)


def get_protocol(name: str) -> ProtocolFn:
    try:
        return _registry[name]
    except KeyError:
        raise KeyError(f"no protocol registered under {name!r}") from None
