"""Radio access network side: beam codebook and ULA gains, the periodic
sweep baseline, RAN state measurement, random-access handling and the
application of control directives coming from the knowledge agent.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Sequence

import numpy as np

from .raytrace import Cir, Tap
from .scene import InvalidInputError, Pose, vec3

log = logging.getLogger(__name__)

GAIN_FLOOR_DB = -60.0
TIE_TOL_DB = 1e-9


# --- codebook & array gain -------------------------------------------------

@dataclass(frozen=True)
class BeamCodebook:
    n_elements: int = 16
    beams: tuple[float, ...] = tuple(np.linspace(-math.radians(60.0), math.radians(60.0), 32).tolist())
    element_spacing: float = 0.5

    def __post_init__(self):
        beams = tuple(float(b) for b in self.beams)
        if self.n_elements < 2:
            raise InvalidInputError("codebook needs at least 2 elements")
        if len(beams) < 2:
            raise InvalidInputError("codebook needs at least 2 beams")
        if any(b1 <= b0 for b0, b1 in zip(beams, beams[1:])):
            raise InvalidInputError("codebook beams must be sorted ascending")
        object.__setattr__(self, "beams", beams)
        object.__setattr__(self, "_sin_steer", np.sin(np.array(beams)))

    @classmethod
    def uniform(cls, n_beams=32, n_elements=16, span_deg=60.0, element_spacing=0.5) -> "BeamCodebook":
        span = math.radians(span_deg)
        return cls(n_elements, tuple(np.linspace(-span, span, n_beams).tolist()), element_spacing)

    def __len__(self):
        return len(self.beams)

    @property
    def span(self) -> tuple[float, float]:
        return self.beams[0], self.beams[-1]

    def gains_db(self, angle: float) -> np.ndarray:
        """Array gain of every beam towards ``angle`` (radians, array frame)."""
        if abs(angle) > math.pi / 2:
            return np.full(len(self.beams), GAIN_FLOOR_DB)
        n = self.n_elements
        psi = 2.0 * math.pi * self.element_spacing * (math.sin(angle) - self._sin_steer)
        den = np.sin(psi / 2.0)
        num = np.sin(n * psi / 2.0)
        small = np.abs(den) < 1e-12
        mag = np.where(small, float(n), np.abs(num / np.where(small, 1.0, den)))
        with np.errstate(divide="ignore"):
            g = 20.0 * np.log10(mag)
        return np.maximum(g, GAIN_FLOOR_DB)

    def beams_in_window(self, low: float, high: float) -> list[int]:
        return [i for i, b in enumerate(self.beams) if low <= b <= high]


def array_gain_db(codebook: BeamCodebook, beam: int, angle: float) -> float:
    if not 0 <= beam < len(codebook.beams):
        raise InvalidInputError(f"beam index {beam} out of range")
    if abs(angle) > math.pi / 2:
        raise InvalidInputError("angle outside the array's front half-plane")
    return float(codebook.gains_db(angle)[beam])


def argmax_lowest(values: Sequence[float], tol: float = TIE_TOL_DB) -> int:
    """Index of the maximum; near-ties resolve to the lowest index."""
    best = max(values)
    for i, v in enumerate(values):
        if v >= best - tol:
            return i
    raise AssertionError("unreachable")


def sweep_beams(codebook: BeamCodebook, channel_probe: Callable[[int], float],
                beams: Optional[Sequence[int]] = None) -> tuple[int, int]:
    """Probe each candidate beam once; returns (best beam, measurement count)."""
    candidates = list(range(len(codebook.beams))) if beams is None else list(beams)
    if not candidates:
        raise InvalidInputError("nothing to sweep")
    rssi = [channel_probe(b) for b in candidates]
    return candidates[argmax_lowest(rssi)], len(candidates)


# --- RAN state ---------------------------------------------------------------

@dataclass(frozen=True)
class UeRecord:
    ue_id: str
    rssi: Optional[float]
    aoa: Optional[float]
    csi: tuple[Tap, ...]
    active_beam: int
    claimed_position: Optional[np.ndarray] = None

    def payload(self) -> dict:
        d = {
            "ue": self.ue_id,
            "rssi": self.rssi,
            "aoa": self.aoa,
            "beam": self.active_beam,
            "csi": [[t.delay, t.gain] for t in self.csi],
        }
        if self.claimed_position is not None:
            d["claim"] = self.claimed_position
        return d


@dataclass(frozen=True)
class RanState:
    antenna_pose: Pose
    timestamp: float
    records: dict[str, UeRecord] = field(default_factory=dict)


def path_beam_gains(cir: Cir, codebook: BeamCodebook, antenna_pose: Pose) -> tuple[np.ndarray, np.ndarray]:
    """Array gain in dB of every beam along every path's departure direction.

    Returns ``(gains_db[path, beam], azimuths[path])`` with azimuths in the
    antenna frame.
    """
    if not cir.paths:
        return np.zeros((0, len(codebook))), np.zeros(0)
    az = np.array([antenna_pose.local_azimuth(p.vertices[1] - p.vertices[0]) for p in cir.paths])
    return np.array([codebook.gains_db(a) for a in az]), az


def beam_weighted_powers(cir: Cir, codebook: BeamCodebook, antenna_pose: Pose) -> tuple[np.ndarray, np.ndarray]:
    """Per-path linear power through each beam: ``(powers[path, beam], azimuths[path])``."""
    gains, az = path_beam_gains(cir, codebook, antenna_pose)
    amp2 = np.array([abs(p.gain) ** 2 for p in cir.paths])
    return amp2[:, None] * 10.0 ** (gains / 10.0), az


def beam_rssi(cir: Cir, codebook: BeamCodebook, antenna_pose: Pose, tx_power: float,
              noise_floor: float) -> np.ndarray:
    """Noise-free received power per beam in dBm, floored at the noise floor."""
    powers, _ = beam_weighted_powers(cir, codebook, antenna_pose)
    total = powers.sum(axis=0) if len(powers) else np.zeros(len(codebook))
    with np.errstate(divide="ignore"):
        rssi = tx_power + 10.0 * np.log10(total)
    return np.maximum(rssi, noise_floor)


def measure_ran_state(ue_id: str, cir: Cir, codebook: BeamCodebook, active_beam: int,
                      antenna_pose: Pose, tx_power: float, noise_floor: float,
                      rng: np.random.Generator, sigma_rssi: float = 1.0,
                      sigma_aoa: float = math.radians(2.0),
                      claimed_position=None) -> UeRecord:
    if not 0 <= active_beam < len(codebook):
        raise InvalidInputError(f"beam index {active_beam} out of range")
    n_rssi = rng.normal(0.0, sigma_rssi)
    n_aoa = rng.normal(0.0, sigma_aoa)
    claim = None if claimed_position is None else vec3(claimed_position)
    if not cir.paths:
        return UeRecord(ue_id, float(noise_floor), None, (), active_beam, claim)
    gains, az = path_beam_gains(cir, codebook, antenna_pose)
    weights = 10.0 ** (gains[:, active_beam] / 20.0)
    csi = tuple(Tap(p.delay, p.gain * float(w), p.path_id) for p, w in zip(cir.paths, weights))
    col = np.array([abs(t.gain) ** 2 for t in csi])
    total = float(col.sum())
    rssi = tx_power + 10.0 * math.log10(total) + n_rssi if total > 0 else noise_floor
    aoa = float(az[int(np.argmax(col))] + n_aoa)
    return UeRecord(ue_id, float(max(rssi, noise_floor)), aoa, csi, active_beam, claim)


# --- authentication types ----------------------------------------------------

class Verdict(str, Enum):
    ACCEPT = "ACCEPT"
    REJECT = "REJECT"
    UNVERIFIED = "UNVERIFIED"


class Reason(str, Enum):
    VERIFIED = "VERIFIED"
    NEW_CELL = "NEW_CELL"
    GEOFENCE = "GEOFENCE"
    NO_WITNESS = "NO_WITNESS"
    POSITION_MISMATCH = "POSITION_MISMATCH"
    FINGERPRINT_MISMATCH = "FINGERPRINT_MISMATCH"
    SENSORS_UNAVAILABLE = "SENSORS_UNAVAILABLE"
    KA_UNREACHABLE = "KA_UNREACHABLE"
    NO_AGENT = "NO_AGENT"


@dataclass(frozen=True)
class AuthDecision:
    verdict: Verdict
    reason: Reason
    mahalanobis_sq: Optional[float] = None

    def payload(self) -> dict:
        return {"verdict": self.verdict, "reason": self.reason, "d2": self.mahalanobis_sq}


@dataclass(frozen=True)
class RachRequest:
    ue_id: str
    timestamp: float
    claimed_position: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "claimed_position", vec3(self.claimed_position))
        if not math.isfinite(self.timestamp):
            raise InvalidInputError("non-finite timestamp")


class KaUnavailable(RuntimeError):
    """The knowledge agent could not be reached or timed out."""


# --- control directives ------------------------------------------------------

class RanCnt:
    """Base class of knowledge-agent directives."""

    kind = "RANCNT"

    def payload(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class SetBeam(RanCnt):
    beam: int
    ue_id: str = ""

    def payload(self):
        return {"type": "SetBeam", "ue": self.ue_id, "beam": self.beam}


@dataclass(frozen=True)
class SweepWindow(RanCnt):
    low: float
    high: float
    ue_id: str = ""

    def payload(self):
        return {"type": "SweepWindow", "ue": self.ue_id, "low": self.low, "high": self.high}


@dataclass(frozen=True)
class ChannelEstimate(RanCnt):
    ue_id: str
    taps: tuple[Tap, ...]

    def payload(self):
        return {"type": "ChannelEstimate", "ue": self.ue_id,
                "taps": [[t.delay, t.gain, t.path_id] for t in self.taps]}


@dataclass(frozen=True)
class Fallback(RanCnt):
    ue_id: str = ""

    def payload(self):
        return {"type": "Fallback", "ue": self.ue_id}


class Control(str, Enum):
    SWEEP = "SWEEP"        # periodic full sweep (baseline behaviour)
    WINDOW = "WINDOW"      # periodic sweep restricted to a window
    DIRECTED = "DIRECTED"  # beam set by the knowledge agent, no sweeping


@dataclass
class LinkState:
    active_beam: int = 0
    control: Control = Control.SWEEP
    window: Optional[tuple[float, float]] = None
    equalizer: tuple[Tap, ...] = ()
    pilot_suppressed: bool = False


@dataclass
class AccessRecord:
    timestamp: float
    ue_id: str
    claimed_position: np.ndarray
    decision: AuthDecision
    admitted: bool


class Ran:
    """Mutable RAN state owned by the simulation loop."""

    def __init__(self, codebook: BeamCodebook, antenna_pose: Pose, tx_power: float = 20.0,
                 noise_floor: float = -90.0, sigma_rssi: float = 1.0,
                 sigma_aoa: float = math.radians(2.0)):
        self.codebook = codebook
        self.antenna_pose = antenna_pose
        self.tx_power = tx_power
        self.noise_floor = noise_floor
        self.sigma_rssi = sigma_rssi
        self.sigma_aoa = sigma_aoa
        self.links: dict[str, LinkState] = {}
        self.access_log: list[AccessRecord] = []
        self.rejected_directives = 0

    def link(self, ue_id: str) -> LinkState:
        if ue_id not in self.links:
            self.links[ue_id] = LinkState()
        return self.links[ue_id]

    def sweep_candidates(self, ue_id: str) -> list[int]:
        """Beams the next periodic sweep probes for this UE (empty: no sweep)."""
        st = self.link(ue_id)
        if st.control is Control.SWEEP:
            return list(range(len(self.codebook)))
        if st.control is Control.WINDOW:
            return self.codebook.beams_in_window(*st.window)
        return []

    def validate(self, cnt: RanCnt) -> Optional[str]:
        if isinstance(cnt, SetBeam):
            if not 0 <= cnt.beam < len(self.codebook):
                return f"beam index {cnt.beam} out of range"
        elif isinstance(cnt, SweepWindow):
            lo, hi = self.codebook.span
            if not (cnt.low < cnt.high and lo <= cnt.low and cnt.high <= hi):
                return f"window ({cnt.low}, {cnt.high}) invalid for span ({lo}, {hi})"
        elif isinstance(cnt, ChannelEstimate):
            delays = [t.delay for t in cnt.taps]
            if delays != sorted(delays):
                return "channel estimate taps not sorted by delay"
        elif not isinstance(cnt, Fallback):
            return f"unknown directive {cnt!r}"
        return None

    def apply(self, cnt: RanCnt) -> bool:
        problem = self.validate(cnt)
        if problem is not None:
            log.error("rejected directive: %s", problem)
            self.rejected_directives += 1
            return False
        st = self.link(cnt.ue_id)
        if isinstance(cnt, SetBeam):
            st.active_beam = cnt.beam
            st.control = Control.DIRECTED
            st.window = None
        elif isinstance(cnt, SweepWindow):
            st.control = Control.WINDOW
            st.window = (cnt.low, cnt.high)
        elif isinstance(cnt, ChannelEstimate):
            st.equalizer = tuple(cnt.taps)
            st.pilot_suppressed = True
        else:
            st.control = Control.SWEEP
            st.window = None
            st.pilot_suppressed = False
        return True

    def handle_rach(self, request: RachRequest, verifier) -> AuthDecision:
        decision = handle_rach(request, verifier, self.antenna_pose)
        admitted = decision.verdict is not Verdict.REJECT
        self.access_log.append(AccessRecord(request.timestamp, request.ue_id,
                                            request.claimed_position, decision, admitted))
        if decision.verdict is Verdict.UNVERIFIED:
            log.info("RACH from %s unverified (%s); standard procedure proceeds",
                     request.ue_id, decision.reason.value)
        elif not admitted:
            log.warning("RACH from %s refused: %s", request.ue_id, decision.reason.value)
        return decision


def apply_rancnt(cnt: RanCnt, ran: Ran) -> Ran:
    ran.apply(cnt)
    return ran


def handle_rach(request: RachRequest, verifier, antenna_pose: Optional[Pose] = None) -> AuthDecision:
    """Forward a random-access request to the knowledge agent for position verification.

    ``verifier`` is called with a one-record :class:`RanState`; ``None`` means
    no agent is deployed. Timeouts and connection failures degrade to an
    UNVERIFIED decision, letting the standard procedure continue.
    """
    if verifier is None:
        return AuthDecision(Verdict.UNVERIFIED, Reason.NO_AGENT)
    record = UeRecord(request.ue_id, None, None, (), 0, request.claimed_position)
    state = RanState(antenna_pose or Pose(), request.timestamp, {request.ue_id: record})
    try:
        return verifier(state)
    except (KaUnavailable, TimeoutError, ConnectionError) as exc:
        log.warning("verification for %s failed: %s", request.ue_id, exc)
        return AuthDecision(Verdict.UNVERIFIED, Reason.KA_UNREACHABLE)
