"""Knowledge agent: fuses sensor data into a world-frame environment state,
keeps the fingerprint map, and turns environment knowledge into RAN control
(position verification, beam selection, channel estimates) with a fallback
to the conventional procedure whenever its knowledge is not trustworthy.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from .ran import (
    AuthDecision,
    BeamCodebook,
    ChannelEstimate,
    Fallback,
    RanCnt,
    RanState,
    Reason,
    SetBeam,
    SweepWindow,
    UeRecord,
    Verdict,
    argmax_lowest,
)
from .raytrace import (
    Aabb,
    BlockageEvent,
    EnvInfo,
    compose_cir,
    predict_blockage,
    trace_paths,
)
from .scene import Pose, RoutePlan, SceneModel, geofence_contains, vec3, wrap_angle
from .sensors import Health, SensState, WorldObservation, to_common_frame

log = logging.getLogger(__name__)


class EntityClass(str, Enum):
    UE = "UE"
    AGV = "AGV"
    PASSIVE = "PASSIVE"


class Mode(str, Enum):
    KNOWLEDGE = "KNOWLEDGE"
    WINDOW = "WINDOW"
    FALLBACK = "FALLBACK"


@dataclass(frozen=True)
class KaConfig:
    auth_gate: float = 11.34
    move_threshold: float = 0.25
    env_change_threshold: float = 0.25
    window_k: float = 3.0
    staleness: float = 0.5
    knowledge_sigma: float = 0.5
    witness_radius: float = 2.0
    assoc_gate: float = 1.0
    corridor_radius: float = 1.0
    min_range: float = 0.5
    cell_size: float = 0.5
    reverify_period: float = 1.0
    horizon: float = 5.0
    prediction_dt: float = 0.05
    prediction_period: float = 0.1
    beam_hysteresis_db: float = 1.0

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if not value > 0:
                raise ValueError(f"KaConfig.{name} must be positive, got {value}")


# --- environment state -------------------------------------------------------

@dataclass(frozen=True)
class TrackedEntity:
    cls: EntityClass
    position: np.ndarray
    covariance: np.ndarray
    last_seen: float
    extents: Optional[np.ndarray] = None
    witnesses: tuple[str, ...] = ()
    aoa_residual: Optional[float] = None

    @property
    def sigma(self) -> float:
        return math.sqrt(max(float(np.linalg.eigvalsh(self.covariance)[-1]), 0.0))


@dataclass(frozen=True)
class EnvState:
    timestamp: float = 0.0
    entities: Mapping[str, TrackedEntity] = field(default_factory=dict)
    next_anon: int = 0


@dataclass(frozen=True)
class ChangeSet:
    moved: Mapping[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    appeared: tuple[str, ...] = ()
    disappeared: tuple[str, ...] = ()

    def __bool__(self):
        return bool(self.moved or self.appeared or self.disappeared)

    def ids(self) -> list[str]:
        return sorted(set(self.moved) | set(self.appeared) | set(self.disappeared))


def _is_psd(cov: np.ndarray) -> bool:
    cov = np.asarray(cov, dtype=float)
    if cov.shape != (3, 3) or not np.all(np.isfinite(cov)):
        return False
    if not np.allclose(cov, cov.T, atol=1e-12):
        return False
    return float(np.linalg.eigvalsh(cov)[0]) >= -1e-12


def _regularized(cov: np.ndarray, eps: float) -> np.ndarray:
    if float(np.linalg.eigvalsh(cov)[0]) <= eps:
        return cov + eps * np.eye(3)
    return cov


def _fuse_group(obs: Sequence[WorldObservation]) -> tuple[np.ndarray, np.ndarray]:
    if len(obs) == 1:
        return obs[0].position.copy(), obs[0].covariance.copy()
    # information form, centred on the first observation for exactness on equal inputs
    ref = obs[0].position
    info = np.zeros((3, 3))
    acc = np.zeros(3)
    for o in obs:
        w = np.linalg.inv(_regularized(o.covariance, 1e-12))
        info += w
        acc += w @ (o.position - ref)
    cov = np.linalg.inv(info)
    cov = (cov + cov.T) / 2.0
    return ref + cov @ acc, cov


def _obs_key(o: WorldObservation):
    return (o.sensor_id, o.entity_id or "", tuple(o.position.tolist()))


def fuse(sens_states: Iterable[SensState], ran_state: Optional[RanState], prev: EnvState,
         config: KaConfig, now: Optional[float] = None,
         registry: Optional[Mapping[str, tuple[EntityClass, Optional[np.ndarray]]]] = None) -> EnvState:
    """Bring all measurements into the world frame and combine them per entity.

    Observations without identity are associated to the nearest known entity
    within ``assoc_gate``; otherwise they open a new anonymous track. RAN AoA
    only annotates UE tracks with a residual, it never moves them.
    """
    registry = registry or {}
    states = list(sens_states)
    if now is None:
        now = max([s.timestamp for s in states], default=prev.timestamp)
    obs = []
    for s in states:
        if s.payload is None:
            continue
        for o in to_common_frame(s):
            if not _is_psd(o.covariance):
                log.warning("discarding non-PSD covariance from %s", o.sensor_id)
                continue
            obs.append(o)
    obs.sort(key=_obs_key)

    groups: dict[str, list[WorldObservation]] = {}
    for o in obs:
        if o.entity_id is not None:
            groups.setdefault(o.entity_id, []).append(o)
    anchors = {eid: np.mean([o.position for o in g], axis=0) for eid, g in groups.items()}
    for eid, ent in prev.entities.items():
        anchors.setdefault(eid, ent.position)
    next_anon = prev.next_anon
    for o in obs:
        if o.entity_id is not None:
            continue
        best, best_d = None, config.assoc_gate
        for eid in sorted(anchors):
            d = float(np.linalg.norm(anchors[eid] - o.position))
            if d <= best_d:
                best, best_d = eid, d
        if best is None:
            best = f"obj-{next_anon}"
            next_anon += 1
            anchors[best] = o.position
        groups.setdefault(best, []).append(o)

    entities: dict[str, TrackedEntity] = {}
    for eid in sorted(groups):
        g = groups[eid]
        pos, cov = _fuse_group(g)
        old = prev.entities.get(eid)
        reg_cls, reg_ext = registry.get(eid, (None, None))
        ext_obs = [o.extents for o in g if o.extents is not None]
        # fleet-registry dimensions beat camera boxes, which inflate under rotation
        if reg_ext is not None:
            extents = np.asarray(reg_ext, dtype=float)
        elif ext_obs:
            extents = np.mean(ext_obs, axis=0)
        else:
            extents = old.extents if old is not None else None
        cls = old.cls if old is not None else (reg_cls or EntityClass.PASSIVE)
        witnesses = tuple(sorted({o.sensor_id for o in g}))
        entities[eid] = TrackedEntity(cls, pos, cov, now, extents, witnesses)
    for eid, ent in prev.entities.items():
        if eid not in entities and now - ent.last_seen <= config.staleness:
            entities[eid] = ent

    if ran_state is not None:
        for ue_id, rec in ran_state.records.items():
            ent = entities.get(ue_id)
            if ent is None or rec.aoa is None:
                continue
            local = ran_state.antenna_pose.to_local(ent.position)
            residual = wrap_angle(rec.aoa - math.atan2(local[1], local[0]))
            entities[ue_id] = replace(ent, aoa_residual=residual)
    return EnvState(now, dict(sorted(entities.items())), next_anon)


def detect_change(prev: EnvState, next: EnvState, config: KaConfig) -> ChangeSet:
    moved = {}
    for eid in sorted(set(prev.entities) & set(next.entities)):
        a, b = prev.entities[eid].position, next.entities[eid].position
        if float(np.linalg.norm(b - a)) > config.env_change_threshold:
            moved[eid] = (a, b)
    appeared = tuple(sorted(set(next.entities) - set(prev.entities)))
    disappeared = tuple(sorted(set(prev.entities) - set(next.entities)))
    return ChangeSet(moved, appeared, disappeared)


# --- fingerprint map ---------------------------------------------------------

def grid_cell(position, cell_size: float = 0.5) -> tuple[int, int]:
    return (math.floor(float(position[0]) / cell_size), math.floor(float(position[1]) / cell_size))


def witness_hash(sensor_ids: Iterable[str]) -> str:
    text = ",".join(sorted(set(sensor_ids)))
    return hashlib.blake2b(text.encode(), digest_size=8).hexdigest()


@dataclass
class FingerprintRecord:
    key: tuple[int, int]
    hash: str
    count: int
    first_seen: float
    last_seen: float

    def line(self) -> str:
        i, j = self.key
        return (f"cell={i},{j} hash={self.hash} count={self.count} "
                f"first={self.first_seen:.6f} last={self.last_seen:.6f}")


class MapDb:
    """Cell-keyed fingerprint store with a line-oriented text snapshot."""

    def __init__(self, records: Optional[Iterable[FingerprintRecord]] = None):
        self._records: dict[tuple[int, int], FingerprintRecord] = {}
        for r in records or ():
            self._records[r.key] = r

    def __len__(self):
        return len(self._records)

    def lookup(self, key) -> Optional[FingerprintRecord]:
        return self._records.get(tuple(key))

    def update(self, key, hash_: str, t: float) -> FingerprintRecord:
        key = tuple(key)
        rec = self._records.get(key)
        if rec is None:
            rec = FingerprintRecord(key, hash_, 1, t, t)
            self._records[key] = rec
        else:
            rec.hash = hash_
            rec.count += 1
            rec.last_seen = t
        return rec

    def dumps(self) -> str:
        return "".join(self._records[k].line() + "\n" for k in sorted(self._records))

    @classmethod
    def loads(cls, text: str) -> "MapDb":
        records = []
        for n, raw in enumerate(text.splitlines(), 1):
            if not raw.strip():
                continue
            try:
                fields = dict(tok.split("=", 1) for tok in raw.split())
                i, j = (int(v) for v in fields["cell"].split(","))
                records.append(FingerprintRecord((i, j), fields["hash"], int(fields["count"]),
                                                 float(fields["first"]), float(fields["last"])))
            except (KeyError, ValueError) as exc:
                raise ValueError(f"map line {n}: cannot parse {raw!r}") from exc
        return cls(records)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "MapDb":
        return cls.loads(Path(path).read_text())


@dataclass(frozen=True)
class AuditEntry:
    timestamp: float
    ue_id: str
    claimed_position: np.ndarray
    decision: AuthDecision

    def payload(self) -> dict:
        return {"ue": self.ue_id, "claim": self.claimed_position, **self.decision.payload()}


# --- services ---------------------------------------------------------------

def verify_ue(record: UeRecord, env: EnvState, mapdb: MapDb, scene: SceneModel, config: KaConfig,
              now: Optional[float] = None, sensors_healthy: bool = True,
              audit: Optional[list] = None) -> AuthDecision:
    if record.claimed_position is None:
        raise ValueError("verification needs a claimed position")
    now = env.timestamp if now is None else now
    claim = vec3(record.claimed_position)
    decision = _decide(record.ue_id, claim, env, mapdb, scene, config, now, sensors_healthy)
    if audit is not None:
        audit.append(AuditEntry(now, record.ue_id, claim, decision))
    return decision


def _decide(ue_id, claim, env, mapdb, scene, config, now, sensors_healthy) -> AuthDecision:
    if not geofence_contains(scene, claim):
        return AuthDecision(Verdict.REJECT, Reason.GEOFENCE)
    witness, best_d = None, config.witness_radius
    for eid, ent in env.entities.items():
        if ent.cls is not EntityClass.UE or now - ent.last_seen > config.staleness:
            continue
        d = float(np.linalg.norm(ent.position - claim))
        if eid == ue_id and d <= config.witness_radius:
            witness = ent
            break
        if d <= best_d:
            witness, best_d = ent, d
    if witness is None:
        if sensors_healthy:
            return AuthDecision(Verdict.REJECT, Reason.NO_WITNESS)
        return AuthDecision(Verdict.UNVERIFIED, Reason.SENSORS_UNAVAILABLE)
    cov = witness.covariance
    if float(np.linalg.eigvalsh(cov)[0]) <= 1e-12:
        cov = cov + 1e-9 * np.eye(3)
    r = claim - witness.position
    d2 = float(r @ np.linalg.solve(cov, r))
    if d2 > config.auth_gate:
        return AuthDecision(Verdict.REJECT, Reason.POSITION_MISMATCH, d2)
    cell = grid_cell(claim, config.cell_size)
    h = witness_hash(witness.witnesses)
    rec = mapdb.lookup(cell)
    if rec is None:
        mapdb.update(cell, h, now)
        return AuthDecision(Verdict.ACCEPT, Reason.NEW_CELL, d2)
    if rec.hash != h:
        return AuthDecision(Verdict.REJECT, Reason.FINGERPRINT_MISMATCH, d2)
    mapdb.update(cell, h, now)
    return AuthDecision(Verdict.ACCEPT, Reason.VERIFIED, d2)


def bearing_and_range(pose: Pose, position) -> tuple[float, float]:
    local = pose.to_local(position)
    return math.atan2(local[1], local[0]), math.hypot(local[0], local[1])


def select_beam(env: EnvState, ue_id: str, antenna_pose: Pose, codebook: BeamCodebook) -> Optional[SetBeam]:
    """Codebook entry with the highest array gain towards the UE; ``None`` if the UE is unknown."""
    ent = env.entities.get(ue_id)
    if ent is None:
        return None
    bearing, _ = bearing_and_range(antenna_pose, ent.position)
    return SetBeam(argmax_lowest(codebook.gains_db(bearing).tolist()), ue_id)


def narrow_sweep(env: EnvState, ue_id: str, antenna_pose: Pose, codebook: BeamCodebook,
                 config: KaConfig) -> Optional[RanCnt]:
    ent = env.entities.get(ue_id)
    if ent is None:
        return None
    bearing, rng = bearing_and_range(antenna_pose, ent.position)
    if rng < config.min_range:
        return Fallback(ue_id)
    half = max(config.window_k * math.atan(ent.sigma / rng), 1e-6)
    lo, hi = bearing - half, bearing + half
    beams = np.array(codebook.beams)
    nearest = float(beams[int(np.argmin(np.abs(beams - bearing)))])
    lo, hi = min(lo, nearest), max(hi, nearest)
    span_lo, span_hi = codebook.span
    if lo <= span_lo and hi >= span_hi:
        return Fallback(ue_id)
    lo, hi = max(lo, span_lo), min(hi, span_hi)
    if not lo < hi:
        # window pinned to one edge of the span
        lo, hi = (span_lo, span_lo + 1e-6) if lo <= span_lo else (span_hi - 1e-6, span_hi)
    return SweepWindow(lo, hi, ue_id)


def evaluate_mode(health: Mapping[str, Health], env: EnvState, ue_id: str, config: KaConfig,
                  now: Optional[float] = None) -> Mode:
    now = env.timestamp if now is None else now
    ent = env.entities.get(ue_id)
    if ent is None or now - ent.last_seen > config.staleness:
        return Mode.FALLBACK
    if ent.witnesses and all(health.get(w) is Health.DOWN for w in ent.witnesses):
        return Mode.FALLBACK
    if ent.sigma <= config.knowledge_sigma:
        return Mode.KNOWLEDGE
    return Mode.WINDOW


def _point_segment_distance(p, a, b) -> float:
    d = b - a
    dd = float(d @ d)
    s = 0.0 if dd == 0 else min(1.0, max(0.0, float((p - a) @ d) / dd))
    return float(np.linalg.norm(a + s * d - p))


def blocker_boxes(env: EnvState, exclude: Iterable[str] = ()) -> list[Aabb]:
    skip = set(exclude)
    return [
        Aabb.centered(ent.position, ent.extents, 0.0, eid)
        for eid, ent in env.entities.items()
        if ent.cls is not EntityClass.UE and ent.extents is not None and eid not in skip
    ]


def provide_channel(env: EnvState, changes: ChangeSet, rtm: Optional[Callable], routes: Mapping,
                    ue_ids: Sequence[str], config: KaConfig, *, scene: SceneModel,
                    antenna_pose: Pose, now: Optional[float] = None,
                    ue_routes: Optional[Mapping[str, RoutePlan]] = None,
                    predict: bool = True) -> tuple[list[RanCnt], EnvInfo]:
    """Re-trace the links touched by ``changes`` and predict blockages along known routes.

    ``routes`` maps blocker ids to ``(RoutePlan, box relative to route position)``.
    Returns the directives plus the ray-traced result (per-UE CIRs and
    predicted blockage events, onset not before ``now``).
    """
    rtm = rtm or trace_paths
    now = env.timestamp if now is None else now
    tx = antenna_pose.position
    info = EnvInfo()
    directives: list[RanCnt] = []
    if not changes:
        return directives, info

    touched = {}
    for eid in changes.ids():
        pts = []
        if eid in changes.moved:
            pts.extend(changes.moved[eid])
        elif eid in env.entities:
            pts.append(env.entities[eid].position)
        ent = env.entities.get(eid)
        reach = 0.0
        if ent is not None and ent.extents is not None:
            reach = 0.5 * float(np.linalg.norm(ent.extents))
        touched[eid] = (pts, reach)
    ka_scene = scene.with_obstacles(blocker_boxes(env))

    for ue in sorted(ue_ids):
        ent = env.entities.get(ue)
        if ent is None:
            continue
        affected = ue in touched
        if not affected:
            for eid, (pts, reach) in touched.items():
                if any(_point_segment_distance(p, tx, ent.position) <= config.corridor_radius + reach
                       for p in pts):
                    affected = True
                    break
        if not affected:
            continue
        try:
            cir = compose_cir(rtm(ka_scene, tx, ent.position), scene.carrier_frequency)
        except Exception as exc:  # RTM failure degrades to the standard procedure
            log.warning("RTM failed for %s: %s", ue, exc)
            directives.append(Fallback(ue))
            continue
        info.cirs[ue] = cir
        directives.append(ChannelEstimate(ue, cir.taps))

    if predict and routes:
        routed = set(routes)
        pred_scene = scene.with_obstacles(blocker_boxes(env, exclude=routed))
        blockers = [routes[k] for k in sorted(routes)]
        for ue in sorted(ue_ids):
            ent = env.entities.get(ue)
            if ent is None:
                continue
            route = (ue_routes or {}).get(ue) or RoutePlan.stationary(ent.position)
            events = predict_blockage(pred_scene, tx, route, blockers, config.horizon,
                                      config.prediction_dt, start=now, ue_id=ue)
            info.blockage_events.extend(events)
    return directives, info


# --- the agent ---------------------------------------------------------------

@dataclass
class Advisory:
    issued: float
    event: BlockageEvent

    def payload(self) -> dict:
        return {"ue": self.event.ue_id, "start": self.event.start, "end": self.event.end}


class KnowledgeAgent:
    """Single-threaded stream processor: SensState/RanState in, RanCnt out."""

    def __init__(self, scene: SceneModel, antenna_pose: Pose, codebook: BeamCodebook,
                 config: Optional[KaConfig] = None, registry=None, routes=None, ue_routes=None,
                 mapdb: Optional[MapDb] = None, rtm: Optional[Callable] = None):
        self.scene = scene
        self.antenna_pose = antenna_pose
        self.codebook = codebook
        self.config = config or KaConfig()
        self.registry = dict(registry or {})
        self.routes = dict(routes or {})
        self.ue_routes = dict(ue_routes or {})
        self.mapdb = mapdb if mapdb is not None else MapDb()
        self.rtm = rtm or trace_paths
        self.env = EnvState()
        self.reference = EnvState()
        self.health: dict[str, tuple[Health, float]] = {}
        self.modes: dict[str, Mode] = {}
        self.audit: list[AuditEntry] = []
        self.advisories: list[Advisory] = []
        self._anchor: dict[str, np.ndarray] = {}
        self._last_sent: dict[str, RanCnt] = {}
        self._last_prediction = -math.inf
        self.rtm_calls = 0

    # inputs
    def ingest(self, now: float, sens_states: Sequence[SensState], ran_state: Optional[RanState]) -> EnvState:
        for s in sens_states:
            self.health[s.meta.sensor_id] = (s.health, s.timestamp)
        self.env = fuse(sens_states, ran_state, self.env, self.config, now, self.registry)
        return self.env

    def health_summary(self, now: float) -> dict[str, Health]:
        return {sid: h for sid, (h, t) in self.health.items() if now - t <= self.config.staleness}

    def sensors_healthy(self, now: float) -> bool:
        return any(h is not Health.DOWN for h in self.health_summary(now).values())

    def verify(self, ran_state: RanState) -> AuthDecision:
        """Verification service handed to the RAN's random-access handler."""
        (record,) = ran_state.records.values()
        now = ran_state.timestamp
        return verify_ue(record, self.env, self.mapdb, self.scene, self.config, now,
                         self.sensors_healthy(now), self.audit)

    # control
    def control(self, now: float, ue_ids: Sequence[str]) -> tuple[list[RanCnt], list[tuple[str, dict]]]:
        """Evaluate modes and services for the served UEs.

        Returns directives for the RAN and extra trace events (mode changes,
        advisories).
        """
        cfg = self.config
        env = self.env
        health = self.health_summary(now)
        directives: list[RanCnt] = []
        events: list[tuple[str, dict]] = []
        entered_knowledge = []
        for ue in sorted(ue_ids):
            mode = evaluate_mode(health, env, ue, cfg, now)
            prev = self.modes.get(ue)
            if mode is not prev:
                events.append(("MODE", {"ue": ue, "from": prev, "to": mode}))
                self.modes[ue] = mode
                self._anchor.pop(ue, None)
                if mode is Mode.KNOWLEDGE:
                    entered_knowledge.append(ue)
            if mode is Mode.FALLBACK:
                if prev is not None and prev is not Mode.FALLBACK:
                    directives.append(Fallback(ue))
                    self._last_sent.pop(ue, None)
                continue
            pos = env.entities[ue].position
            anchor = self._anchor.get(ue)
            if anchor is not None and float(np.linalg.norm(pos - anchor)) <= cfg.move_threshold:
                continue
            self._anchor[ue] = pos
            if mode is Mode.KNOWLEDGE:
                cnt = select_beam(env, ue, self.antenna_pose, self.codebook)
                cnt = self._with_hysteresis(ue, cnt, pos)
            else:
                cnt = narrow_sweep(env, ue, self.antenna_pose, self.codebook, cfg)
            if cnt is not None and cnt != self._last_sent.get(ue):
                directives.append(cnt)
                self._last_sent[ue] = cnt

        changes = detect_change(self.reference, env, cfg)
        if entered_knowledge:
            changes = ChangeSet(changes.moved, tuple(sorted(set(changes.appeared) | set(entered_knowledge))),
                                changes.disappeared)
        if changes:
            knowledge_ues = [u for u in sorted(ue_ids) if self.modes.get(u) is Mode.KNOWLEDGE]
            predict = bool(self.routes) and now - self._last_prediction >= cfg.prediction_period - 1e-9
            if predict:
                self._last_prediction = now
            out, info = provide_channel(env, changes, self.rtm, self.routes, knowledge_ues, cfg,
                                        scene=self.scene, antenna_pose=self.antenna_pose, now=now,
                                        ue_routes=self.ue_routes, predict=predict)
            self.rtm_calls += len(info.cirs)
            directives.extend(out)
            for ev in info.blockage_events:
                if ev.start <= now + 1e-9:
                    continue  # already blocked: not an advance warning
                if self._already_advised(ev):
                    continue
                adv = Advisory(now, ev)
                self.advisories.append(adv)
                events.append(("ADVISORY", adv.payload()))
            self._advance_reference(changes, env)
        return directives, events

    def _with_hysteresis(self, ue: str, cnt: Optional[SetBeam], pos) -> Optional[SetBeam]:
        """Keep the current beam unless the new one is better by more than the margin."""
        prev = self._last_sent.get(ue)
        if not isinstance(cnt, SetBeam) or not isinstance(prev, SetBeam):
            return cnt
        bearing, _ = bearing_and_range(self.antenna_pose, pos)
        gains = self.codebook.gains_db(bearing)
        if gains[cnt.beam] - gains[prev.beam] <= self.config.beam_hysteresis_db:
            return prev
        return cnt

    def _already_advised(self, ev: BlockageEvent) -> bool:
        """True if ``ev`` refines an earlier advisory; the stored interval is updated."""
        tol = self.config.prediction_dt * 2
        for adv in self.advisories:
            e = adv.event
            end = math.inf if e.open_end else e.end
            if e.ue_id == ev.ue_id and e.start - tol <= ev.end and ev.start <= end + tol:
                if e.open_end or not ev.open_end:
                    adv.event = ev
                return True
        return False

    def _advance_reference(self, changes: ChangeSet, env: EnvState) -> None:
        ents = dict(self.reference.entities)
        for eid in changes.ids():
            if eid in env.entities:
                ents[eid] = env.entities[eid]
            else:
                ents.pop(eid, None)
        self.reference = EnvState(env.timestamp, ents, env.next_anon)
