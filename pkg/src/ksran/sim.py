"""Fixed-timestep simulation binding scene, sensors, RAN, ray tracer and
knowledge agent, plus the run metrics and their CSV form.

Every random draw comes from a generator keyed by (seed, stream, step,
index), so a draw never depends on how many draws other components made.
Baseline and knowledge runs of one scenario therefore see identical sensor
noise and identical sweep noise at every step.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .ka import EntityClass, KnowledgeAgent, MapDb, Mode
from .ran import (
    ChannelEstimate,
    RachRequest,
    Ran,
    RanState,
    Reason,
    Verdict,
    beam_rssi,
    measure_ran_state,
    sweep_beams,
)
from .raytrace import Aabb, Cir, PathKind, compose_cir, trace_paths
from .scenario import ScenarioConfig
from .scene import route_position_at
from .sensors import Health, SensorKind, uwb_measure, vision_detect
from .trace import TraceLog

log = logging.getLogger(__name__)

_SENSOR_STREAM, _SWEEP_STREAM, _RANSTATE_STREAM = 1, 2, 3
MISSELECTION_DB = 3.0
ADVISORY_MATCH_TOL = 0.5  # s; slack between a predicted and an observed onset

AUTH_OUTCOMES = (
    (Verdict.ACCEPT, Reason.VERIFIED),
    (Verdict.ACCEPT, Reason.NEW_CELL),
    (Verdict.REJECT, Reason.GEOFENCE),
    (Verdict.REJECT, Reason.NO_WITNESS),
    (Verdict.REJECT, Reason.POSITION_MISMATCH),
    (Verdict.REJECT, Reason.FINGERPRINT_MISMATCH),
    (Verdict.UNVERIFIED, Reason.SENSORS_UNAVAILABLE),
    (Verdict.UNVERIFIED, Reason.KA_UNREACHABLE),
    (Verdict.UNVERIFIED, Reason.NO_AGENT),
)


def _rng(seed: int, stream: int, step: int, index: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, stream, step, index])


def nmse(estimate, truth) -> Optional[float]:
    """Normalised squared error between two tap sets, pairing taps by path id.

    Unpaired taps count in full. Returns ``None`` when the truth carries no energy.
    """
    est = {t.path_id: t.gain for t in estimate}
    ref = {t.path_id: t.gain for t in truth}
    energy = sum(abs(g) ** 2 for g in ref.values())
    if energy == 0.0:
        return None
    err = sum(abs(est.get(k, 0.0) - ref.get(k, 0.0)) ** 2 for k in sorted(set(est) | set(ref)))
    return err / energy


def pdp_nmse(estimate, truth) -> Optional[float]:
    """Like :func:`nmse` on tap magnitudes only (carrier phase ignored)."""
    est = {t.path_id: abs(t.gain) for t in estimate}
    ref = {t.path_id: abs(t.gain) for t in truth}
    energy = sum(g**2 for g in ref.values())
    if energy == 0.0:
        return None
    return sum((est.get(k, 0.0) - ref.get(k, 0.0)) ** 2 for k in sorted(set(est) | set(ref))) / energy


@dataclass
class Metrics:
    scenario: str = ""
    mode: str = ""
    seed: int = 0
    steps: int = 0
    link_steps: int = 0
    beam_measurements_total: int = 0
    beam_misselection_rate: float = 0.0
    mean_rssi: float = 0.0
    oracle_mean_rssi: float = 0.0
    rssi_valid: int = 0
    pilot_symbols_total: int = 0
    channel_nmse: float = 0.0
    channel_pdp_nmse: float = 0.0
    channel_estimation_events: int = 0
    channel_nmse_valid: int = 0
    blockage_lead_time: float = 0.0
    blockage_losses: int = 0
    blockage_unadvised: int = 0
    blockage_advisories: int = 0
    blockage_false_advisories: int = 0
    blockage_lead_valid: int = 0
    mode_knowledge: float = 0.0
    mode_window: float = 0.0
    mode_fallback: float = 0.0
    auth_accept_verified: int = 0
    auth_accept_new_cell: int = 0
    auth_reject_geofence: int = 0
    auth_reject_no_witness: int = 0
    auth_reject_position_mismatch: int = 0
    auth_reject_fingerprint_mismatch: int = 0
    auth_unverified_sensors_unavailable: int = 0
    auth_unverified_ka_unreachable: int = 0
    auth_unverified_no_agent: int = 0
    rtm_calls: int = 0

    @staticmethod
    def columns() -> list[str]:
        return [f.name for f in fields(Metrics)]

    def row(self) -> list[str]:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, float):
                if not math.isfinite(v):
                    raise ValueError(f"metric {f.name} is not finite")
                out.append(f"{v:.6g}")
            else:
                out.append(str(v))
        return out


def metrics_csv(metrics: Metrics) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(Metrics.columns())
    w.writerow(metrics.row())
    return buf.getvalue()


def parse_metrics_csv(text: str) -> dict:
    rows = list(csv.reader(io.StringIO(text)))
    header, values = rows[0], rows[1]
    types = {f.name: f.type for f in fields(Metrics)}
    out = {}
    for k, v in zip(header, values):
        t = types.get(k, "str")
        out[k] = float(v) if t == "float" else int(v) if t == "int" else v
    return out


@dataclass
class LossEvent:
    ue_id: str
    t: float
    lead: Optional[float]


@dataclass
class StepRecord:
    t: float
    measurements: int
    modes: dict
    beams: dict
    knowledge_directives: int


@dataclass
class SimResult:
    metrics: Metrics
    trace: TraceLog
    mapdb: MapDb
    steps: list[StepRecord] = field(default_factory=list)
    losses: list[LossEvent] = field(default_factory=list)
    probe_invocations: int = 0


def _truth_blockers(config: ScenarioConfig, positions: dict) -> list[Aabb]:
    return [
        Aabb.centered(positions[e.entity_id], e.extents, 0.0, e.entity_id)
        for e in config.entities
        if e.extents is not None and e.cls is not EntityClass.UE
    ]


def run(config: ScenarioConfig, mapdb: Optional[MapDb] = None) -> SimResult:
    knowledge = config.mode == "knowledge"
    seed = config.seed
    dt = config.dt
    ant = config.antenna
    scene = config.scene
    codebook = config.codebook
    freq = scene.carrier_frequency
    mismatch = 10.0 ** (-config.model_mismatch_db / 20.0)
    sweep_steps = max(1, int(round(config.sweep_period / dt)))
    sensor_steps = [max(1, int(round(1.0 / (s.rate_hz * dt)))) for s in config.sensors]
    ues = sorted(e.entity_id for e in config.entities if e.cls is EntityClass.UE and e.attach_time is not None)
    ue_index = {u: i for i, u in enumerate(ues)}
    pending_attach = {e.entity_id: e.attach_time for e in config.entities if e.entity_id in ue_index}
    attackers = list(config.attackers)
    uwb_entities = sorted((e for e in config.entities if e.uwb_tag), key=lambda e: e.entity_id)
    visible_entities = sorted((e for e in config.entities if e.extents is not None), key=lambda e: e.entity_id)

    ran = Ran(codebook, ant.pose, ant.tx_power, ant.noise_floor, ant.sigma_rssi, ant.sigma_aoa)
    ka = None
    if knowledge:
        registry = {e.entity_id: (e.cls, e.extents) for e in config.entities}
        routes = {
            e.entity_id: (e.route, Aabb.centered(np.zeros(3), e.extents, 0.0, e.entity_id))
            for e in config.entities
            if e.cls is not EntityClass.UE and e.extents is not None and e.moving
        }
        ue_routes = {e.entity_id: e.route for e in config.entities if e.cls is EntityClass.UE and e.moving}
        ka = KnowledgeAgent(scene, ant.pose, codebook, config.ka, registry, routes, ue_routes,
                            mapdb if mapdb is not None else MapDb())

    trace = TraceLog()
    m = Metrics(scenario=config.name, mode=config.mode, seed=seed)
    result = SimResult(m, trace, ka.mapdb if ka else (mapdb or MapDb()))
    served: list[str] = []
    last_verified: dict[str, float] = {}
    last_ran_state: Optional[RanState] = None
    los_prev: dict[str, bool] = {}
    nmse_vals, pdp_vals = [], []
    misselect = 0
    rssi_sum = oracle_sum = 0.0
    mode_counts = {mode: 0 for mode in Mode}

    def count_auth(decision):
        attr = f"auth_{decision.verdict.value.lower()}_{decision.reason.value.lower()}"
        setattr(m, attr, getattr(m, attr) + 1)

    def probe_counter(fn):
        def wrapped(b):
            result.probe_invocations += 1
            return fn(b)
        return wrapped

    for step in range(config.n_steps):
        t = round(step * dt, 9)
        positions = {e.entity_id: route_position_at(e.route, t) for e in config.entities}

        # sensor infrastructure
        sens_states = []
        static_entities = [(e.entity_id, positions[e.entity_id], e.extents) for e in visible_entities]
        for i, sc in enumerate(config.sensors):
            if step % sensor_steps[i]:
                continue
            health = sc.health_at(t)
            if health is Health.DOWN:
                continue  # a DOWN sensor reports nothing
            rng = _rng(seed, _SENSOR_STREAM, step, i)
            if sc.meta.kind is SensorKind.UWB:
                for e in uwb_entities:
                    sens_states.append(uwb_measure(positions[e.entity_id], sc.meta, sc.noise, rng,
                                                   e.entity_id, t, health))
            else:
                sens_states.append(vision_detect(scene, static_entities, sc.meta, sc.noise, rng,
                                                 t, health, sc.fov))
        for s in sens_states:
            trace.append(t, "SENSSTATE", s.payload_dict())
        if ka is not None:
            ka.ingest(t, sens_states, last_ran_state)

        # random access and periodic re-verification
        verifier = ka.verify if ka is not None else None
        requests = []
        for ue in ues:
            at = pending_attach.get(ue)
            if at is not None and at <= t + 1e-9:
                requests.append((RachRequest(ue, t, positions[ue]), True))
                del pending_attach[ue]
        while attackers and attackers[0].timestamp <= t + 1e-9:
            req = attackers.pop(0)
            requests.append((RachRequest(req.ue_id, t, req.claimed_position), False))
        for req, genuine in requests:
            decision = ran.handle_rach(req, verifier)
            count_auth(decision)
            trace.append(t, "AUTH", {"ue": req.ue_id, "claim": req.claimed_position, "reverify": False,
                                     **decision.payload()})
            if genuine and decision.verdict is not Verdict.REJECT:
                served.append(req.ue_id)
                served.sort()
                last_verified[req.ue_id] = t
        if ka is not None:
            for ue in served:
                if t - last_verified[ue] >= config.ka.reverify_period - 1e-9:
                    last_verified[ue] = t
                    decision = ran.handle_rach(RachRequest(ue, t, positions[ue]), verifier)
                    count_auth(decision)
                    trace.append(t, "AUTH", {"ue": ue, "claim": positions[ue], "reverify": True,
                                             **decision.payload()})

        # ground truth channels
        truth_scene = scene.with_obstacles(_truth_blockers(config, positions))
        truth: dict[str, Cir] = {}
        for ue in served:
            cir = compose_cir(trace_paths(truth_scene, ant.pose.position, positions[ue]), freq)
            if mismatch != 1.0:
                cir = Cir(tuple(_scaled(p, mismatch) for p in cir.paths), freq)
            truth[ue] = cir
        true_rssi = {ue: beam_rssi(truth[ue], codebook, ant.pose, ant.tx_power, ant.noise_floor)
                     for ue in served}

        # RAN: periodic (possibly windowed) sweeps, then the state report
        measurements = 0
        if step % sweep_steps == 0:
            for ue in served:
                candidates = ran.sweep_candidates(ue)
                if not candidates:
                    continue
                noise = _rng(seed, _SWEEP_STREAM, step, ue_index[ue]).normal(0.0, ant.sigma_rssi, len(codebook))
                probe = probe_counter(lambda b, r=true_rssi[ue], n=noise: float(r[b] + n[b]))
                best, count = sweep_beams(codebook, probe, candidates)
                ran.link(ue).active_beam = best
                measurements += count
        m.beam_measurements_total += measurements
        records = {}
        for ue in served:
            records[ue] = measure_ran_state(ue, truth[ue], codebook, ran.link(ue).active_beam, ant.pose,
                                            ant.tx_power, ant.noise_floor,
                                            _rng(seed, _RANSTATE_STREAM, step, ue_index[ue]),
                                            ant.sigma_rssi, ant.sigma_aoa)
        ran_state = RanState(ant.pose, t, records)
        last_ran_state = ran_state
        if records:
            trace.append(t, "RANSTATE", {"ues": [records[u].payload() for u in served]})

        # knowledge agent control
        knowledge_directives = 0
        if ka is not None:
            directives, events = ka.control(t, served)
            for kind, payload in events:
                trace.append(t, kind, payload)
            for cnt in directives:
                if ran.apply(cnt):
                    trace.append(t, "RANCNT", cnt.payload())
                    if not cnt.payload()["type"] == "Fallback":
                        knowledge_directives += 1
                    if isinstance(cnt, ChannelEstimate) and cnt.ue_id in truth:
                        v = nmse(cnt.taps, truth[cnt.ue_id].taps)
                        m.channel_estimation_events += 1
                        if v is not None:
                            nmse_vals.append(v)
                            pdp_vals.append(pdp_nmse(cnt.taps, truth[cnt.ue_id].taps))

        # metrics
        modes = {}
        for ue in served:
            link = ran.link(ue)
            if not link.pilot_suppressed:
                m.pilot_symbols_total += config.pilot_symbols_per_frame
            r = true_rssi[ue]
            best = float(r.max())
            active = float(r[link.active_beam])
            if active < best - MISSELECTION_DB:
                misselect += 1
            rssi_sum += active
            oracle_sum += best
            m.link_steps += 1
            mode = ka.modes.get(ue, Mode.FALLBACK) if ka is not None else Mode.FALLBACK
            mode_counts[mode] += 1
            modes[ue] = mode
            has_los = any(p.kind is PathKind.LOS for p in truth[ue].paths)
            if los_prev.get(ue, True) and not has_los and ue in los_prev:
                result.losses.append(LossEvent(ue, t, None))
            los_prev[ue] = has_los
        result.steps.append(StepRecord(t, measurements, modes,
                                       {ue: ran.link(ue).active_beam for ue in served},
                                       knowledge_directives))

    m.steps = config.n_steps
    if m.link_steps:
        m.rssi_valid = 1
        m.beam_misselection_rate = misselect / m.link_steps
        m.mean_rssi = rssi_sum / m.link_steps
        m.oracle_mean_rssi = oracle_sum / m.link_steps
        m.mode_knowledge = mode_counts[Mode.KNOWLEDGE] / m.link_steps
        m.mode_window = mode_counts[Mode.WINDOW] / m.link_steps
        m.mode_fallback = mode_counts[Mode.FALLBACK] / m.link_steps
    if nmse_vals:
        m.channel_nmse_valid = 1
        m.channel_nmse = float(np.mean(nmse_vals))
        m.channel_pdp_nmse = float(np.mean(pdp_vals))
    _score_blockage(result, ka, ADVISORY_MATCH_TOL)
    if ka is not None:
        m.rtm_calls = ka.rtm_calls
    return result


def _scaled(p, factor):
    return replace(p, gain=p.gain * factor)


def _score_blockage(result: SimResult, ka: Optional[KnowledgeAgent], tol: float) -> None:
    """Pair actual LOS-loss onsets with the earliest advisory that predicted them."""
    m = result.metrics
    advisories = ka.advisories if ka is not None else []
    used = set()
    leads = []
    for loss in result.losses:
        match = None
        for k, adv in enumerate(advisories):
            ev = adv.event
            if ev.ue_id == loss.ue_id and adv.issued <= loss.t and ev.start - tol <= loss.t <= ev.end + tol:
                if match is None or adv.issued < advisories[match].issued:
                    match = k
        if match is None:
            m.blockage_unadvised += 1
            continue
        used.add(match)
        loss.lead = loss.t - advisories[match].issued
        leads.append(loss.lead)
    m.blockage_losses = len(result.losses)
    m.blockage_advisories = len(advisories)
    m.blockage_false_advisories = sum(
        1 for k, adv in enumerate(advisories)
        if k not in used and not any(
            l.ue_id == adv.event.ue_id and adv.event.start - tol <= l.t <= adv.event.end + tol
            for l in result.losses)
    )
    if leads:
        m.blockage_lead_valid = 1
        m.blockage_lead_time = float(np.mean(leads))


def run_dir_name(config: ScenarioConfig) -> str:
    return f"{config.name}-{config.mode}-seed{config.seed}"


def write_outputs(result: SimResult, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(metrics_csv(result.metrics))
    (out / "trace.log").write_text(result.trace.text())
    result.mapdb.save(out / "map.db")
    return out
