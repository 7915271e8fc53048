"""Scenario files: JSON documents validated against the bundled schema."""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np

from .ka import EntityClass, KaConfig
from .ran import BeamCodebook, RachRequest
from .scene import Aabb, InvalidInputError, Pose, RoutePlan, SceneModel, geofence_contains, vec3
from .sensors import Health, NoiseModel, SensorKind, SensorMeta

_DATA = resources.files("ksran") / "data"
DEFAULT_RATES = {SensorKind.UWB: 100.0, SensorKind.VISION: 30.0}
DEFAULT_SIGMA = {SensorKind.UWB: 0.10, SensorKind.VISION: 0.05}


class ScenarioError(ValueError):
    """Scenario could not be parsed or failed validation."""


@dataclass(frozen=True)
class AntennaConfig:
    pose: Pose
    tx_power: float = 20.0
    noise_floor: float = -90.0
    sigma_rssi: float = 1.0
    sigma_aoa: float = math.radians(2.0)


@dataclass(frozen=True)
class SensorConfig:
    meta: SensorMeta
    noise: NoiseModel
    rate_hz: float
    fov: float = math.radians(90.0)
    health_schedule: tuple[tuple[float, Health], ...] = ()

    def health_at(self, t: float) -> Health:
        state = Health.OK
        for when, h in self.health_schedule:
            if t + 1e-9 >= when:
                state = h
        return state


@dataclass(frozen=True)
class EntityConfig:
    entity_id: str
    cls: EntityClass
    route: RoutePlan
    extents: Optional[np.ndarray] = None
    uwb_tag: bool = True
    attach_time: Optional[float] = None

    @property
    def moving(self) -> bool:
        return len(self.route.waypoints) > 1


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    scene: SceneModel
    antenna: AntennaConfig
    codebook: BeamCodebook = field(default_factory=BeamCodebook.uniform)
    sensors: tuple[SensorConfig, ...] = ()
    entities: tuple[EntityConfig, ...] = ()
    attackers: tuple[RachRequest, ...] = ()
    duration: float = 10.0
    dt: float = 0.01
    seed: int = 0
    mode: str = "knowledge"
    sweep_period: float = 0.02
    pilot_symbols_per_frame: int = 8
    model_mismatch_db: float = 0.0
    ka: KaConfig = field(default_factory=KaConfig)

    @property
    def n_steps(self) -> int:
        return max(1, int(round(self.duration / self.dt)))

    def with_mode(self, mode: str) -> "ScenarioConfig":
        return replace(self, mode=mode)

    def with_seed(self, seed: int) -> "ScenarioConfig":
        return replace(self, seed=seed)

    def noiseless(self) -> "ScenarioConfig":
        """Same scenario with every sensor and RAN measurement made exact."""
        sensors = tuple(replace(s, noise=NoiseModel(0.0, 1.0)) for s in self.sensors)
        antenna = replace(self.antenna, sigma_rssi=0.0, sigma_aoa=0.0)
        return replace(self, sensors=sensors, antenna=antenna)

    def entity(self, entity_id: str) -> EntityConfig:
        for e in self.entities:
            if e.entity_id == entity_id:
                return e
        raise KeyError(entity_id)


def schema() -> dict:
    return json.loads((_DATA / "scenario.schema.json").read_text())


def bundled_scenarios() -> list[str]:
    return sorted(p.name[:-5] for p in (_DATA / "scenarios").iterdir() if p.name.endswith(".json"))


def resolve_scenario_path(name_or_path) -> Path:
    p = Path(name_or_path)
    if p.exists():
        return p
    stem = p.name[:-5] if p.name.endswith(".json") else p.name
    candidate = _DATA / "scenarios" / f"{stem}.json"
    if candidate.is_file():
        return Path(str(candidate))
    raise ScenarioError(f"{name_or_path}: no such scenario file or bundled scenario")


def _line_of(text: str, path) -> Optional[int]:
    """Best-effort line number of the JSON value addressed by ``path``."""
    dec = json.JSONDecoder()
    ws = re.compile(r"\s*")

    def skip(i):
        return ws.match(text, i).end()

    try:
        i = skip(0)
        for key in path:
            if text[i] == "{":
                i = skip(i + 1)
                while text[i] != "}":
                    k, i = json.decoder.scanstring(text, i + 1)
                    i = skip(skip(i) + 1)
                    if k == key:
                        break
                    _, i = dec.raw_decode(text, i)
                    i = skip(i)
                    if text[i] == ",":
                        i = skip(i + 1)
                else:
                    break
            elif text[i] == "[" and isinstance(key, int):
                i = skip(i + 1)
                for _ in range(key):
                    _, i = dec.raw_decode(text, i)
                    i = skip(i)
                    if text[i] == ",":
                        i = skip(i + 1)
            else:
                break
        return text.count("\n", 0, i) + 1
    except (IndexError, ValueError):
        return None


def _where(source: str, text: str, path) -> str:
    dotted = "".join(f"[{p}]" if isinstance(p, int) else f".{p}" for p in path).lstrip(".") or "<root>"
    line = _line_of(text, list(path))
    return f"{source}: line {line}: {dotted}" if line else f"{source}: {dotted}"


def _pose(d: dict) -> Pose:
    return Pose(vec3(d["position"]), math.radians(d.get("yaw_deg", 0.0)),
                math.radians(d.get("pitch_deg", 0.0)), math.radians(d.get("roll_deg", 0.0)))


def parse_scenario(doc: dict, text: str = "", source: str = "<scenario>") -> ScenarioConfig:
    validator = jsonschema.Draft202012Validator(schema())
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        raise ScenarioError(f"{_where(source, text, e.absolute_path)}: {e.message}")

    def fail(path, msg):
        raise ScenarioError(f"{_where(source, text, path)}: {msg}")

    try:
        sc = doc["scene"]
        obstacles = tuple(
            Aabb(vec3(o["min"]), vec3(o["max"]), o.get("reflectivity", 0.3), o.get("label", f"obstacle-{i}"))
            for i, o in enumerate(sc.get("obstacles", []))
        )
        scene = SceneModel(obstacles, tuple(tuple(v) for v in sc["geofence"]),
                           sc.get("carrier_frequency", 140e9))
    except InvalidInputError as exc:
        fail(["scene"], str(exc))

    dt = doc.get("dt", 0.01)
    duration = doc["duration"]
    if duration < dt:
        fail(["duration"], f"duration {duration} shorter than dt {dt}")

    ant = doc["antenna"]
    antenna = AntennaConfig(_pose(ant["pose"]), ant.get("tx_power_dbm", 20.0), ant.get("noise_floor_dbm", -90.0),
                            ant.get("sigma_rssi_db", 1.0), math.radians(ant.get("sigma_aoa_deg", 2.0)))
    cb = doc.get("codebook", {})
    codebook = BeamCodebook.uniform(cb.get("n_beams", 32), cb.get("n_elements", 16),
                                    cb.get("span_deg", 60.0), cb.get("element_spacing", 0.5))

    sensors, seen = [], set()
    for i, s in enumerate(doc.get("sensors", [])):
        if s["id"] in seen:
            fail(["sensors", i, "id"], f"duplicate sensor id {s['id']!r}")
        seen.add(s["id"])
        kind = SensorKind(s["kind"])
        sched = tuple(sorted(((h["t"], Health(h["state"])) for h in s.get("health", [])), key=lambda x: x[0]))
        sensors.append(SensorConfig(
            SensorMeta(s["id"], kind, _pose(s["pose"])),
            NoiseModel(s.get("sigma", DEFAULT_SIGMA[kind]), s.get("detection_probability", 0.98)),
            s.get("rate_hz", DEFAULT_RATES[kind]),
            math.radians(s.get("fov_deg", 90.0)),
            sched,
        ))

    entities, seen = [], set()
    for i, e in enumerate(doc.get("entities", [])):
        eid = e["id"]
        if eid in seen:
            fail(["entities", i, "id"], f"duplicate entity id {eid!r}")
        seen.add(eid)
        if ("position" in e) == ("route" in e):
            fail(["entities", i], "exactly one of 'position' and 'route' is required")
        if "route" in e:
            for k, wp in enumerate(e["route"]):
                if not geofence_contains(scene, wp[1:]):
                    fail(["entities", i, "route", k], f"waypoint {k} of {eid!r} at {wp[1:]} lies outside the geofence")
            try:
                route = RoutePlan(tuple((wp[0], vec3(wp[1:])) for wp in e["route"]))
            except InvalidInputError as exc:
                fail(["entities", i, "route"], str(exc))
        else:
            if not geofence_contains(scene, e["position"]):
                fail(["entities", i, "position"], f"position of {eid!r} lies outside the geofence")
            route = RoutePlan.stationary(e["position"])
        cls = EntityClass(e["class"])
        attach = e.get("attach_time", 0.0 if cls is EntityClass.UE else None)
        if attach is not None and cls is not EntityClass.UE:
            fail(["entities", i, "attach_time"], "only UEs attach to the RAN")
        extents = vec3(e["extents"]) if "extents" in e else None
        entities.append(EntityConfig(eid, cls, route, extents, e.get("uwb_tag", True), attach))

    attackers = []
    for i, a in enumerate(doc.get("attackers", [])):
        if a["ue_id"] in seen:
            fail(["attackers", i, "ue_id"], f"attacker id {a['ue_id']!r} collides with an entity")
        n = a.get("repeat", 1)
        for k in range(n):
            uid = a["ue_id"] if n == 1 else f"{a['ue_id']}-{k}"
            attackers.append(RachRequest(uid, a["t"] + k * a.get("period", 0.01), vec3(a["claimed_position"])))
    attackers.sort(key=lambda r: (r.timestamp, r.ue_id))

    try:
        ka = KaConfig(**doc.get("ka", {}))
    except ValueError as exc:
        fail(["ka"], str(exc))

    return ScenarioConfig(
        name=doc["name"], scene=scene, antenna=antenna, codebook=codebook, sensors=tuple(sensors),
        entities=tuple(entities), attackers=tuple(attackers), duration=duration, dt=dt,
        seed=doc.get("seed", 0), mode=doc.get("mode", "knowledge"),
        sweep_period=doc.get("sweep_period", 0.02),
        pilot_symbols_per_frame=doc.get("pilot_symbols_per_frame", 8),
        model_mismatch_db=doc.get("model_mismatch_db", 0.0), ka=ka,
    )


def load_scenario(path) -> ScenarioConfig:
    p = resolve_scenario_path(path)
    text = p.read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{p}: line {exc.lineno}: {exc.msg}") from exc
    return parse_scenario(doc, text, str(p))
