"""Physical and protocol parameter records shared by config and quantum model."""
from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class EveDecl:
    """Intercept-resend eavesdropper on a link.

    ``error_per_intercept`` is the probability that an intercepted qubit which
    survives sifting carries a wrong bit. 0.25 is the textbook random-basis
    attack; other values rescale how Eve's resend disturbs Bob (see
    ``qdnet.quantum``).
    """

    intercept_fraction: float = 1.0
    position_km: float = 0.0
    error_per_intercept: float = 0.25

    def __post_init__(self):
        if not 0.0 <= self.intercept_fraction <= 1.0:
            raise ValueError("intercept_fraction must be in [0, 1]")
        if self.position_km < 0.0:
            raise ValueError("position_km must be >= 0")
        if not 0.0 <= self.error_per_intercept <= 1.0:
            raise ValueError("error_per_intercept must be in [0, 1]")


@dataclass(frozen=True)
class ProtocolParams:
    pulses_per_round: int = 10_000
    pulse_rate_hz: float = 1.0e6
    detector_efficiency: float = 0.9
    dark_count_prob: float = 1.0e-5
    depolarization_prob: float = 0.0
    qber_sample_fraction: float = 0.25
    classical_overhead_s: float = 0.01
    qber_abort_threshold: float = 0.11

    def __post_init__(self):
        if isinstance(self.pulses_per_round, bool) or not isinstance(self.pulses_per_round, int):
            raise ValueError("pulses_per_round must be an integer")
        if self.pulses_per_round <= 0:
            raise ValueError("pulses_per_round must be positive")
        if not self.pulse_rate_hz > 0:
            raise ValueError("pulse_rate_hz must be positive")
        if not 0.0 < self.detector_efficiency <= 1.0:
            raise ValueError("detector_efficiency must be in (0, 1]")
        if not 0.0 <= self.dark_count_prob < 1.0:
            raise ValueError("dark_count_prob must be in [0, 1)")
        if not 0.0 <= self.depolarization_prob < 1.0:
            raise ValueError("depolarization_prob must be in [0, 1)")
        if not 0.0 < self.qber_sample_fraction < 1.0:
            raise ValueError("qber_sample_fraction must be in (0, 1)")
        if self.classical_overhead_s < 0:
            raise ValueError("classical_overhead_s must be >= 0")
        if not 0.0 < self.qber_abort_threshold < 0.5:
            raise ValueError("qber_abort_threshold must be in (0, 0.5)")

    @property
    def round_duration_s(self) -> float:
        return self.pulses_per_round / self.pulse_rate_hz + self.classical_overhead_s


@dataclass(frozen=True)
class LinkPhysics:
    length_km: float = 0.0
    total_attenuation_db: float = 0.0
    eve: EveDecl | None = None

    def __post_init__(self):
        if self.length_km < 0 or self.total_attenuation_db < 0:
            raise ValueError("length_km and total_attenuation_db must be >= 0")
        if self.eve is not None and self.eve.position_km > self.length_km:
            raise ValueError("eve position beyond link length")

    @classmethod
    def from_link(cls, link) -> "LinkPhysics":
        return cls(link.length_km, link.attenuation_db, link.eve)
