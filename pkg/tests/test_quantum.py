import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from qdnet.params import EveDecl, LinkPhysics, ProtocolParams
from qdnet.quantum import (
    binary_entropy, click_probability, estimate_qber, get_protocol, kbr, run_bb84_with_eve,
    run_extended_bb84, secure_fraction, simulate_pulses, simulated_duration, transmittance,
)

from oracles import intercept_micro_cases, sifted_error_rate, single_pulse_distribution

BIG = ProtocolParams(pulses_per_round=100_000)


# -- oracle sanity ---------------------------------------------------------------

def test_micro_case_enumeration_is_complete():
    cases = list(intercept_micro_cases())
    assert len(cases) == 32
    assert sum(w for _, w, _ in cases) == 1


def test_oracle_full_intercept_error_is_quarter():
    assert sifted_error_rate(1) == Fraction(1, 4)
    assert sifted_error_rate(Fraction(3, 10)) == Fraction(3, 40)
    assert sifted_error_rate(0) == 0


# -- single pulse distribution ---------------------------------------------------

def _categories(rec):
    match = rec.alice_bases == rec.bob_bases
    agree = rec.alice_bits == rec.bob_bits
    return {(m, a): int(np.count_nonzero((match == m) & (agree == a))) for m in (True, False) for a in (True, False)}


@pytest.mark.parametrize("f", [0.0, 0.3, 1.0])
def test_single_pulse_chi_square(f):
    n = 100_000
    rec = simulate_pulses(np.random.default_rng(11), n, eve=EveDecl(f) if f else None)
    observed = _categories(rec)
    expected = single_pulse_distribution(Fraction(f).limit_denominator(100))
    for k, v in expected.items():
        if v == 0:
            assert observed[k] == 0
    keys = sorted(k for k, v in expected.items() if v)
    obs = [observed[k] for k in keys]
    exp = [float(expected[k]) * n for k in keys]
    assert stats.chisquare(obs, exp).pvalue > 1e-3


# -- eavesdropper QBER -----------------------------------------------------------

def test_no_eve_is_error_free():
    out = run_bb84_with_eve(ProtocolParams(), None, 1)
    assert out.qber == 0.0 and not out.aborted
    sifted = out.alice_sifted.size
    assert abs(sifted - 5000) < 5 * math.sqrt(10_000 * 0.25)
    assert np.array_equal(out.alice_sifted, out.bob_sifted)


def test_full_intercept_qber():
    out = run_bb84_with_eve(BIG, EveDecl(1.0), 3)
    assert out.qber == pytest.approx(0.25, abs=0.01)
    assert out.aborted


def test_partial_intercept_textbook_qber():
    out = run_bb84_with_eve(BIG, EveDecl(0.3), 4)
    assert out.qber == pytest.approx(0.075, abs=0.01)


def test_doubled_disturbance_mode_matches_reported_magnitude():
    out = run_bb84_with_eve(BIG, EveDecl(0.3, error_per_intercept=0.5), 5)
    assert out.qber == pytest.approx(0.1484, abs=0.02)


def test_divergent_release_keeps_both_strings():
    out = run_bb84_with_eve(ProtocolParams(), EveDecl(1.0), 6, release_divergent=True)
    assert out.compromised_divergent and not out.aborted
    assert out.secure_bits.size == out.peer_bits.size > 0
    assert not np.array_equal(out.secure_bits, out.peer_bits)


@given(st.integers(0, 2**63 - 1), st.floats(0, 1), st.booleans())
@settings(max_examples=25)
def test_outcome_invariants(seed, f, divergent):
    p = ProtocolParams(pulses_per_round=2000)
    out = run_bb84_with_eve(p, EveDecl(f), seed, release_divergent=divergent)
    assert out.alice_sifted.size == out.bob_sifted.size
    assert 0 <= out.qber <= 1
    if out.aborted:
        assert out.secure_bits.size == 0
    assert out.simulated_duration_s >= out.channel_uses / p.pulse_rate_hz
    assert out.channel_uses == p.pulses_per_round


# -- extended model --------------------------------------------------------------

def test_extended_degenerates_to_ideal():
    p = ProtocolParams(detector_efficiency=1.0, dark_count_prob=0.0)
    a = run_extended_bb84(p, LinkPhysics(10.0, 0.0), 42)
    b = run_bb84_with_eve(p, None, 42)
    assert a.same_as(b)


def test_detected_fraction_at_five_point_four_db():
    assert transmittance(5.4) == pytest.approx(0.2884, abs=1e-4)
    p_click = click_probability(5.4, 0.9, 1e-5)
    assert p_click == pytest.approx(0.2596, abs=1e-4)
    out = run_extended_bb84(BIG, LinkPhysics(7.4, 5.4), 8)
    sigma = math.sqrt(p_click * (1 - p_click) / BIG.pulses_per_round)
    assert abs(out.detected / out.channel_uses - p_click) < 5 * sigma


def test_sifting_rate_within_five_sigma():
    for seed in range(5):
        out = run_extended_bb84(BIG, LinkPhysics(20.0, 8.0), seed)
        n = out.detected
        assert abs(out.alice_sifted.size / n - 0.5) < 5 * math.sqrt(0.25 / n)


def _mean(fn, seeds=range(10)):
    return float(np.mean([fn(s) for s in seeds]))


def test_sifted_bits_decrease_with_attenuation():
    p = ProtocolParams()
    sifted = [_mean(lambda s: run_extended_bb84(p, LinkPhysics(1.0, db), s).alice_sifted.size)
              for db in (0.0, 5.4, 8.0, 11.9)]
    assert all(a > b for a, b in zip(sifted, sifted[1:]))


def test_qber_nondecreasing_in_intercept_fraction():
    p = ProtocolParams(pulses_per_round=20_000)
    q = [_mean(lambda s: run_bb84_with_eve(p, EveDecl(f), s).qber) for f in (0.0, 0.2, 0.5, 1.0)]
    assert all(a <= b for a, b in zip(q, q[1:]))


def test_qber_nondecreasing_in_depolarization():
    q = []
    for d in (0.0, 0.05, 0.2):
        p = ProtocolParams(pulses_per_round=20_000, depolarization_prob=d)
        q.append(_mean(lambda s: run_extended_bb84(p, LinkPhysics(1.0, 1.0), s).qber))
    assert all(a <= b for a, b in zip(q, q[1:]))
    # a random BB84 state errs half the time after sifting
    assert q[-1] == pytest.approx(0.2 / 2, abs=0.01)


def test_dark_counts_give_random_bits():
    # Almost everything lost: detections are dark counts, so QBER ~ 1/2.
    p = ProtocolParams(pulses_per_round=200_000, dark_count_prob=0.05, qber_abort_threshold=0.49)
    out = run_extended_bb84(p, LinkPhysics(100.0, 80.0), 9)
    assert out.qber == pytest.approx(0.5, abs=0.05)


def test_eve_position_thins_interception():
    p = ProtocolParams(pulses_per_round=50_000)
    rng = np.random.default_rng
    near = simulate_pulses(rng(1), 50_000, eve=EveDecl(1.0), t_before_eve=1.0, t_after_eve=transmittance(10))
    far = simulate_pulses(rng(1), 50_000, eve=EveDecl(1.0, 40.0), t_before_eve=transmittance(10), t_after_eve=1.0)
    assert near.intercepted.sum() > 5 * far.intercepted.sum()
    # And through the protocol entry point: Eve at the far end still disturbs what Bob sees.
    out = run_extended_bb84(p, LinkPhysics(40.0, 2.0, EveDecl(1.0, 40.0)), 2)
    assert out.qber == pytest.approx(0.25, abs=0.03)


# -- determinism -----------------------------------------------------------------

@given(st.integers(0, 2**32), st.sampled_from(["bb84_with_eve", "extended_bb84"]))
@settings(max_examples=20)
def test_deterministic_for_fixed_seed(seed, name):
    proto = get_protocol(name)
    phys = LinkPhysics(40.68, 11.9, EveDecl(0.3, 20.0))
    p = ProtocolParams(pulses_per_round=3000)
    assert proto(p, phys, seed).same_as(proto(p, phys, seed))


def test_duration_independent_of_seed():
    p = ProtocolParams(pulses_per_round=1234)
    assert len({run_bb84_with_eve(p, None, s).simulated_duration_s for s in range(5)}) == 1


# -- scalar helpers --------------------------------------------------------------

def test_estimate_qber_examples():
    a = np.zeros(128, dtype=np.uint8)
    assert estimate_qber(a, a) == 0.0
    b64 = np.ones(64, dtype=np.uint8)
    assert estimate_qber(np.zeros(64, dtype=np.uint8), b64) == 1.0
    b = a.copy()
    b[np.random.default_rng(0).choice(128, 19, replace=False)] = 1
    assert estimate_qber(a, b) == 0.1484375


@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=300))
def test_estimate_qber_is_hamming_fraction(pairs):
    a, b = zip(*pairs)
    assert estimate_qber(a, b) == sum(x != y for x, y in pairs) / len(pairs)


def test_estimate_qber_errors():
    with pytest.raises(ValueError):
        estimate_qber([0, 1], [0])
    with pytest.raises(ValueError):
        estimate_qber([], [])


def test_secure_fraction_examples():
    assert secure_fraction(0.0) == 1.0
    assert secure_fraction(0.11) == pytest.approx(0.0, abs=1e-2)
    assert secure_fraction(0.5) == 0.0
    h = -0.11 * math.log2(0.11) - 0.89 * math.log2(0.89)
    assert binary_entropy(0.11) == pytest.approx(h, rel=1e-12)
    assert secure_fraction(0.11) == pytest.approx(1.68e-4, abs=1e-6)
    for bad in (-0.1, 0.6):
        with pytest.raises(ValueError):
            secure_fraction(bad)


@given(st.floats(0, 0.5), st.floats(0, 0.5))
def test_secure_fraction_monotone(q1, q2):
    lo, hi = sorted((q1, q2))
    assert secure_fraction(lo) >= secure_fraction(hi)


def test_simulated_duration_examples():
    p = ProtocolParams()
    assert simulated_duration(1, p) == pytest.approx(0.02)
    assert simulated_duration(3, p) == pytest.approx(0.06)
    with pytest.raises(ValueError):
        simulated_duration(0, p)
    with pytest.raises(ValueError):
        ProtocolParams(pulses_per_round=0)


def test_kbr_examples():
    out = run_bb84_with_eve(ProtocolParams(pulses_per_round=100_000), None, 0)
    out.secure_bits = out.secure_bits[:256]
    assert kbr(out) == pytest.approx(0.00256)
    aborted = run_bb84_with_eve(ProtocolParams(), EveDecl(1.0), 0)
    assert aborted.aborted and kbr(aborted) == 0.0


def test_kbr_stable_across_request_sizes():
    # KBR is a per-round quantity; two groups of rounds standing in for a
    # short and a long request must agree within 3 standard errors.
    p = ProtocolParams(pulses_per_round=2000)
    phys = LinkPhysics(7.4, 5.4)
    short = [kbr(run_extended_bb84(p, phys, s)) for s in range(20)]
    long_ = [kbr(run_extended_bb84(p, phys, s)) for s in range(100, 160)]
    se = math.sqrt(np.var(short, ddof=1) / len(short) + np.var(long_, ddof=1) / len(long_))
    assert abs(np.mean(short) - np.mean(long_)) <= 3 * se


@pytest.mark.parametrize("bad", [
    dict(detector_efficiency=0.0), dict(detector_efficiency=1.2), dict(dark_count_prob=1.0),
    dict(depolarization_prob=-0.1), dict(qber_sample_fraction=1.0), dict(classical_overhead_s=-1),
    dict(qber_abort_threshold=0.0), dict(pulse_rate_hz=0),
])
def test_params_validation(bad):
    with pytest.raises(ValueError):
        ProtocolParams(**bad)
