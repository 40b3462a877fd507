"""Synthetic bird's-eye-view driving scenes.

Every scene lives in the ego frame at prediction time: x forward, y to the
left, origin at the ego position, heading 0.  Ground-truth futures are six
waypoints sampled every 0.5 s over a 3 s horizon and follow simple kinematic
templates, one per maneuver.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

DT = 0.5
N_WAYPOINTS = 6
TIMES = DT * np.arange(1, N_WAYPOINTS + 1)
AGENT_TIMES = DT * np.arange(0, N_WAYPOINTS + 1)
HISTORY_TIMES = np.array([-1.5, -1.0, -0.5, 0.0])
V_MAX = 20.0
COORD_LIMIT = 100.0
SCHEMA_VERSION = 1

EGO_LENGTH = 4.08
EGO_WIDTH = 1.85
YIELD_GAP = 4.0


class Maneuver(str, enum.Enum):
    CRUISE = "cruise"
    STOP = "stop"
    TURN_LEFT = "turn_left"
    TURN_RIGHT = "turn_right"
    LANE_CHANGE_LEFT = "lane_change_left"
    LANE_CHANGE_RIGHT = "lane_change_right"
    YIELD_TO_AGENT = "yield_to_agent"


MANEUVERS = tuple(Maneuver)
COMPLEX_MANEUVERS = frozenset(
    {
        Maneuver.TURN_LEFT,
        Maneuver.TURN_RIGHT,
        Maneuver.LANE_CHANGE_LEFT,
        Maneuver.LANE_CHANGE_RIGHT,
        Maneuver.YIELD_TO_AGENT,
    }
)


class Difficulty(str, enum.Enum):
    SIMPLE = "simple"
    COMPLEX = "complex"


class Lateral(str, enum.Enum):
    LEFT = "LEFT"
    STRAIGHT = "STRAIGHT"
    RIGHT = "RIGHT"


class Longitudinal(str, enum.Enum):
    ACCELERATE = "ACCELERATE"
    KEEP = "KEEP"
    DECELERATE = "DECELERATE"
    STOP = "STOP"


@dataclass(frozen=True)
class MetaAction:
    lateral: Lateral
    longitudinal: Longitudinal

    def __post_init__(self):
        object.__setattr__(self, "lateral", Lateral(self.lateral))
        object.__setattr__(self, "longitudinal", Longitudinal(self.longitudinal))

    def __str__(self):
        return f"{self.lateral.value}, {self.longitudinal.value}"


class Trajectory:
    """Six planar waypoints at t = 0.5 ... 3.0 s in the ego frame."""

    __slots__ = ("_waypoints",)

    def __init__(self, waypoints):
        wp = np.array(waypoints, dtype=np.float64).reshape(-1, 2) if len(waypoints) else np.empty((0, 2))
        if wp.shape != (N_WAYPOINTS, 2):
            raise ValueError(f"trajectory needs {N_WAYPOINTS} waypoints, got {wp.shape[0]}")
        if not np.all(np.isfinite(wp)):
            raise ValueError("trajectory contains non-finite coordinates")
        if np.any(np.abs(wp) > COORD_LIMIT):
            raise ValueError(f"trajectory coordinate outside [-{COORD_LIMIT}, {COORD_LIMIT}] m")
        wp.setflags(write=False)
        self._waypoints = wp

    @property
    def waypoints(self) -> np.ndarray:
        return self._waypoints

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return bool(np.array_equal(self._waypoints, other._waypoints))

    def __hash__(self):
        return hash(self._waypoints.tobytes())

    def __repr__(self):
        pts = ", ".join(f"({x:.2f}, {y:.2f})" for x, y in self._waypoints)
        return f"Trajectory([{pts}])"

    def to_list(self) -> list:
        return self._waypoints.tolist()


@dataclass(frozen=True, eq=False)
class AgentTrack:
    """Another road user: 7 poses at t = 0 ... 3 s plus its footprint."""

    positions: np.ndarray
    headings: np.ndarray
    length: float
    width: float

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64).reshape(-1, 2)
        hdg = np.asarray(self.headings, dtype=np.float64).reshape(-1)
        if pos.shape[0] != len(AGENT_TIMES) or hdg.shape[0] != len(AGENT_TIMES):
            raise ValueError("agent track needs 7 positions and 7 headings")
        if not (self.length > 0 and self.width > 0):
            raise ValueError("agent footprint must have positive length and width")
        pos.setflags(write=False)
        hdg.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "headings", hdg)
        object.__setattr__(self, "length", float(self.length))
        object.__setattr__(self, "width", float(self.width))

    def __eq__(self, other):
        if not isinstance(other, AgentTrack):
            return NotImplemented
        return (
            np.array_equal(self.positions, other.positions)
            and np.array_equal(self.headings, other.headings)
            and self.length == other.length
            and self.width == other.width
        )

    def velocity(self, k: int = 0) -> np.ndarray:
        return (self.positions[k + 1] - self.positions[k]) / DT


@dataclass(frozen=True, eq=False)
class Scene:
    """One planning query.

    ``cues`` carries scene-geometry hints (stop-line distance, road
    curvature, target lane offset, ...) that a camera would reveal; the
    policy reads them instead of pixels.  They never contain the future
    trajectory itself.
    """

    id: str
    ego_history: np.ndarray
    ego_speed: float
    ego_heading: float
    agents: tuple
    gt_trajectory: Trajectory
    gt_meta: MetaAction
    difficulty: Difficulty
    maneuver: Maneuver
    cues: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        hist = np.asarray(self.ego_history, dtype=np.float64).reshape(-1, 2)
        if hist.shape[0] != len(HISTORY_TIMES):
            raise ValueError("ego_history needs 4 points")
        hist.setflags(write=False)
        object.__setattr__(self, "ego_history", hist)
        object.__setattr__(self, "agents", tuple(self.agents))
        object.__setattr__(self, "difficulty", Difficulty(self.difficulty))
        object.__setattr__(self, "maneuver", Maneuver(self.maneuver))
        object.__setattr__(self, "cues", dict(self.cues))

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return scene_to_record(self) == scene_to_record(other)

    __hash__ = None


@dataclass(frozen=True)
class WorldConfig:
    """Knobs for the scene generator and the meta-action labeller."""

    maneuver_weights: Mapping[str, float] = field(
        default_factory=lambda: {m.value: 1.0 for m in MANEUVERS}
    )
    max_extra_agents: int = 4
    heading_threshold_deg: float = 5.0
    stop_speed: float = 0.1
    speed_ratio_band: float = 0.1

    def __post_init__(self):
        weights = dict(self.maneuver_weights)
        for key, w in weights.items():
            if key not in {m.value for m in MANEUVERS}:
                raise ValueError(f"unknown maneuver weight key: {key!r}")
            if not (w >= 0 and math.isfinite(w)):
                raise ValueError(f"maneuver weight for {key!r} must be finite and >= 0")
        if sum(weights.values()) <= 0:
            raise ValueError("maneuver weights sum to zero")
        object.__setattr__(self, "maneuver_weights", weights)


DEFAULT_WORLD = WorldConfig()


# ---------------------------------------------------------------------------
# kinematics


def longitudinal_distance(t, v0: float, accel: float) -> np.ndarray:
    """Distance travelled under constant acceleration, holding at zero speed."""
    t = np.asarray(t, dtype=np.float64)
    if accel < 0:
        t_stop = v0 / -accel
        t = np.minimum(t, t_stop)
    return v0 * t + 0.5 * accel * t**2


def kinematic_waypoints(
    maneuver: Maneuver | str,
    v0: float,
    accel: float = 0.0,
    turn_angle: float = 0.0,
    lateral_offset: float = 0.0,
    lane_change_time: float = 5.0,
    times: np.ndarray = TIMES,
) -> np.ndarray:
    """Sample the template for ``maneuver`` at ``times``.

    Turns are constant-speed circular arcs sweeping ``turn_angle`` radians over
    3 s.  Lane changes use a raised-cosine lateral profile reaching
    ``lateral_offset`` after ``lane_change_time`` seconds.
    """
    maneuver = Maneuver(maneuver)
    times = np.asarray(times, dtype=np.float64)
    if maneuver in (Maneuver.TURN_LEFT, Maneuver.TURN_RIGHT):
        omega = turn_angle / 3.0
        if abs(omega) < 1e-12:
            return np.stack([v0 * times, np.zeros_like(times)], axis=1)
        x = v0 / omega * np.sin(omega * times)
        y = v0 / omega * (1.0 - np.cos(omega * times))
        return np.stack([x, y], axis=1)
    s = longitudinal_distance(times, v0, accel)
    if maneuver in (Maneuver.LANE_CHANGE_LEFT, Maneuver.LANE_CHANGE_RIGHT):
        phase = np.minimum(times / lane_change_time, 1.0)
        y = 0.5 * lateral_offset * (1.0 - np.cos(np.pi * phase))
        return np.stack([s, y], axis=1)
    return np.stack([s, np.zeros_like(s)], axis=1)


def _history(v0: float, accel: float) -> np.ndarray:
    # backwards in time under the same acceleration, origin at t = 0
    t = HISTORY_TIMES
    x = v0 * t + 0.5 * accel * t**2
    return np.stack([x, np.zeros_like(x)], axis=1)


# ---------------------------------------------------------------------------
# meta actions


def _segment_headings(waypoints: np.ndarray, min_step: float = 1e-3) -> list[float]:
    pts = np.vstack([np.zeros((1, 2)), waypoints])
    heads = []
    for a, b in zip(pts[:-1], pts[1:]):
        d = b - a
        if np.hypot(*d) > min_step:
            heads.append(math.atan2(d[1], d[0]))
    return heads


def derive_meta(gt: Trajectory, ego_speed: float, config: WorldConfig = DEFAULT_WORLD) -> MetaAction:
    """Label a trajectory with its lateral and longitudinal decision.

    Lateral: net heading change between the first and last finite-difference
    segment headings.  Longitudinal: terminal speed from the last two
    waypoints, compared against the current speed.
    """
    wp = gt.waypoints
    heads = _segment_headings(wp)
    psi = 0.0
    if len(heads) >= 2:
        psi = math.degrees(math.remainder(heads[-1] - heads[0], 2 * math.pi))
    thr = config.heading_threshold_deg
    if psi >= thr:
        lateral = Lateral.LEFT
    elif psi <= -thr:
        lateral = Lateral.RIGHT
    else:
        lateral = Lateral.STRAIGHT

    v_end = float(np.hypot(*(wp[-1] - wp[-2]))) / DT
    vs = config.stop_speed
    band = config.speed_ratio_band
    if v_end < vs:
        longitudinal = Longitudinal.STOP
    elif ego_speed < vs:
        longitudinal = Longitudinal.ACCELERATE
    else:
        ratio = v_end / ego_speed
        if ratio > 1.0 + band:
            longitudinal = Longitudinal.ACCELERATE
        elif ratio < 1.0 - band:
            longitudinal = Longitudinal.DECELERATE
        else:
            longitudinal = Longitudinal.KEEP
    return MetaAction(lateral, longitudinal)


# ---------------------------------------------------------------------------
# scene generation


def _scene_rng(seed: int, label: str) -> np.random.Generator:
    digest = hashlib.blake2b(f"{int(seed)}:{label}".encode(), digest_size=16).digest()
    return np.random.default_rng(np.frombuffer(digest, dtype=np.uint32))


def _straight_agent(x0, y0, vx, vy, length, width) -> AgentTrack:
    pos = np.stack([x0 + vx * AGENT_TIMES, y0 + vy * AGENT_TIMES], axis=1)
    heading = math.atan2(vy, vx) if (vx or vy) else 0.0
    return AgentTrack(pos, np.full(len(AGENT_TIMES), heading), length, width)


def _agent_size(rng) -> tuple[float, float]:
    return float(rng.uniform(3.8, 5.0)), float(rng.uniform(1.7, 2.0))


def _ego_poses(waypoints: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    from .geometry import waypoint_headings

    pos = np.vstack([np.zeros((1, 2)), waypoints])
    return pos, np.concatenate([[0.0], waypoint_headings(waypoints)])


def _collides(waypoints: np.ndarray, agent: AgentTrack) -> bool:
    from .geometry import rectangles_overlap

    pos, heads = _ego_poses(waypoints)
    for k in range(len(AGENT_TIMES)):
        if rectangles_overlap(
            pos[k], heads[k], EGO_LENGTH, EGO_WIDTH,
            agent.positions[k], agent.headings[k], agent.length, agent.width,
        ):
            return True
    return False


def _background_agents(rng, v0: float, n: int) -> list[AgentTrack]:
    agents = []
    for _ in range(n):
        kind = rng.integers(0, 4)
        length, width = _agent_size(rng)
        if kind == 0:  # lead vehicle pulling away
            agents.append(_straight_agent(rng.uniform(18, 35), 0.0, v0 + rng.uniform(3, 6), 0.0, length, width))
        elif kind == 1:  # adjacent lane, same direction
            side = rng.choice([-1.0, 1.0])
            agents.append(_straight_agent(rng.uniform(-15, 25), 3.5 * side, rng.uniform(4, 14), 0.0, length, width))
        elif kind == 2:  # oncoming traffic
            agents.append(_straight_agent(rng.uniform(20, 60), 3.5 + rng.uniform(-0.2, 0.2), -rng.uniform(5, 12), 0.0, length, width))
        else:  # parked at the curb
            side = rng.choice([-1.0, 1.0])
            agents.append(_straight_agent(rng.uniform(5, 45), 6.5 * side, 0.0, 0.0, length, width))
    return agents


def generate_scene(seed: int, maneuver: Maneuver | str, config: WorldConfig = DEFAULT_WORLD) -> Scene:
    """Deterministically build one scene for ``(seed, maneuver)``."""
    maneuver = Maneuver(maneuver)
    rng = _scene_rng(seed, maneuver.value)
    accel = 0.0
    cues = {}
    agents: list[AgentTrack] = []

    if maneuver is Maneuver.CRUISE:
        v0 = float(rng.uniform(4.0, 14.0))
        accel = float(rng.uniform(-1.2, 1.2))
        wp = kinematic_waypoints(maneuver, v0, accel)
        hist = _history(v0, accel)
    elif maneuver is Maneuver.STOP:
        v0 = float(rng.uniform(3.0, 10.0))
        t_stop = float(rng.uniform(1.5, 2.5))
        accel = -v0 / t_stop
        wp = kinematic_waypoints(maneuver, v0, accel)
        hist = _history(v0, 0.0)
        cues["stop_distance"] = v0 * t_stop / 2.0
    elif maneuver in (Maneuver.TURN_LEFT, Maneuver.TURN_RIGHT):
        v0 = float(rng.uniform(3.0, 8.0))
        sign = 1.0 if maneuver is Maneuver.TURN_LEFT else -1.0
        angle = sign * math.radians(rng.uniform(40.0, 90.0))
        wp = kinematic_waypoints(maneuver, v0, turn_angle=angle)
        hist = _history(v0, 0.0)
        cues["road_curvature"] = (angle / 3.0) / v0
    elif maneuver in (Maneuver.LANE_CHANGE_LEFT, Maneuver.LANE_CHANGE_RIGHT):
        v0 = float(rng.uniform(5.0, 14.0))
        sign = 1.0 if maneuver is Maneuver.LANE_CHANGE_LEFT else -1.0
        t_lc = float(rng.uniform(3.5, 6.0))
        wp = kinematic_waypoints(maneuver, v0, lateral_offset=3.5 * sign, lane_change_time=t_lc)
        hist = _history(v0, 0.0)
        cues["target_lane_offset"] = 3.5 * sign
        cues["lane_change_time"] = t_lc
    else:
        v0 = float(rng.uniform(5.0, 12.0))
        t_c = float(rng.choice([1.5, 2.0, 2.5]))
        x_c = v0 * t_c
        # brake to a halt YIELD_GAP short of the conflict point
        accel = -(v0**2) / (2.0 * (x_c - YIELD_GAP))
        wp = kinematic_waypoints(maneuver, v0, accel)
        hist = _history(v0, 0.0)
        u = float(rng.uniform(8.0, 12.0)) * float(rng.choice([-1.0, 1.0]))
        length, width = _agent_size(rng)
        agents.append(_straight_agent(x_c, -u * t_c, 0.0, u, length, width))
        cues["conflict_distance"] = x_c

    n_extra = int(rng.integers(0, config.max_extra_agents + 1))
    for agent in _background_agents(rng, v0, n_extra):
        if not _collides(wp, agent):
            agents.append(agent)

    gt = Trajectory(wp)
    n_agents = len(agents)
    difficulty = (
        Difficulty.COMPLEX
        if maneuver in COMPLEX_MANEUVERS or n_agents >= 3
        else Difficulty.SIMPLE
    )
    return Scene(
        id=f"{maneuver.value}-{int(seed)}",
        ego_history=hist,
        ego_speed=v0,
        ego_heading=0.0,
        agents=tuple(agents),
        gt_trajectory=gt,
        gt_meta=derive_meta(gt, v0, config),
        difficulty=difficulty,
        maneuver=maneuver,
        cues=cues,
    )


def generate_scenes(n: int, seed: int, config: WorldConfig = DEFAULT_WORLD) -> list[Scene]:
    """Draw ``n`` scenes with maneuvers sampled from the configured weights."""
    names = [m.value for m in MANEUVERS]
    w = np.array([config.maneuver_weights.get(k, 0.0) for k in names], dtype=np.float64)
    rng = _scene_rng(seed, "maneuver-mix")
    picks = rng.choice(len(names), size=n, p=w / w.sum())
    scene_seeds = rng.integers(0, 2**63 - 1, size=n, dtype=np.int64)
    return [generate_scene(int(s), names[i], config) for s, i in zip(scene_seeds, picks)]


# ---------------------------------------------------------------------------
# chain-of-thought templates

SLOT_NAMES = ("knowledge", "elements", "graph", "targets", "decision")

FILLER_PHRASES = (
    # traffic knowledge
    "urban road", "speed limit 50", "traffic light ahead", "stop line ahead",
    "right of way to crossing traffic", "no special rules", "intersection rules apply",
    "lane markings dashed", "lane markings solid", "keep safe distance",
    # element recognition
    "clear road", "vehicles nearby", "crossing vehicle", "parked cars", "oncoming traffic",
    "lead vehicle", "adjacent lane occupied", "adjacent lane free", "junction ahead", "curve ahead",
    # traffic graph
    "ego in lane", "agent ahead", "agent left", "agent right", "agent crossing path",
    "agent behind", "no interaction", "path conflict", "ego approaching junction", "ego on straight road",
    # target attributes
    "agent slow", "agent fast", "agent approaching", "agent receding", "agent stationary",
    "agent large", "agent small", "few agents", "many agents", "no agents",
    # ego status and decision
    "ego speed low", "ego speed medium", "ego speed high", "ego accelerating", "ego decelerating",
    "ego steady", "turn left", "turn right", "change lane left", "change lane right",
    "brake to stop", "yield then proceed", "follow lane", "decision:",
    # spare phrases
    "check mirrors", "signal on", "smooth control", "monitor surroundings", "gap acceptable",
    "gap too small", "road wet", "road dry", "visibility good", "visibility poor",
)

assert len(FILLER_PHRASES) == 64

MAX_SLOT_FILLERS = 7
MAX_DECISION_FILLERS = 3


class CotLength(str, enum.Enum):
    SHORT = "short"
    LONG = "long"


def _speed_phrase(v: float) -> str:
    if v < 6.0:
        return "ego speed low"
    if v < 10.0:
        return "ego speed medium"
    return "ego speed high"


def _nearest_agent(scene: Scene):
    if not scene.agents:
        return None
    return min(scene.agents, key=lambda a: float(np.hypot(*a.positions[0])))


def cot_slots(scene: Scene, length: CotLength | str) -> list[tuple[str, list]]:
    """Template reasoning as ``[(slot_name, body)]``.

    Each body is a list of filler phrases, except the decision body, which
    ends with the lateral and longitudinal meta-action members.
    """
    length = CotLength(length)
    m = scene.maneuver
    meta = scene.gt_meta
    decision = ("decision", ["decision:", meta.lateral, meta.longitudinal])
    if length is CotLength.SHORT:
        return [decision]

    knowledge = ["urban road"]
    if m is Maneuver.STOP:
        knowledge += ["traffic light ahead", "stop line ahead"]
    elif m is Maneuver.YIELD_TO_AGENT:
        knowledge += ["right of way to crossing traffic"]
    elif m in (Maneuver.TURN_LEFT, Maneuver.TURN_RIGHT):
        knowledge += ["intersection rules apply"]
    elif m in (Maneuver.LANE_CHANGE_LEFT, Maneuver.LANE_CHANGE_RIGHT):
        knowledge += ["lane markings dashed"]
    else:
        knowledge += ["no special rules"]
    knowledge.append("keep safe distance")

    n = len(scene.agents)
    elements = []
    if n == 0:
        elements.append("clear road")
    else:
        elements.append("vehicles nearby")
    if m is Maneuver.YIELD_TO_AGENT:
        elements.append("crossing vehicle")
    if m in (Maneuver.TURN_LEFT, Maneuver.TURN_RIGHT):
        elements.append("junction ahead")
    if m in (Maneuver.LANE_CHANGE_LEFT, Maneuver.LANE_CHANGE_RIGHT):
        elements.append("adjacent lane free")

    graph = ["ego in lane"]
    nearest = _nearest_agent(scene)
    if nearest is None:
        graph.append("no interaction")
    else:
        x, y = nearest.positions[0]
        if m is Maneuver.YIELD_TO_AGENT:
            graph += ["agent crossing path", "path conflict"]
        elif x < -2.0:
            graph.append("agent behind")
        elif y > 2.0:
            graph.append("agent left")
        elif y < -2.0:
            graph.append("agent right")
        else:
            graph.append("agent ahead")
    graph.append("ego approaching junction" if m in (Maneuver.TURN_LEFT, Maneuver.TURN_RIGHT, Maneuver.STOP) else "ego on straight road")

    if n == 0:
        targets = ["no agents"]
    else:
        targets = ["few agents" if n < 3 else "many agents"]
        speed = float(np.hypot(*nearest.velocity()))
        targets.append("agent stationary" if speed < 0.5 else ("agent slow" if speed < 8.0 else "agent fast"))
        rel = float(np.hypot(*nearest.positions[1])) - float(np.hypot(*nearest.positions[0]))
        targets.append("agent approaching" if rel < 0 else "agent receding")
    targets.append(_speed_phrase(scene.ego_speed))

    return [
        ("knowledge", knowledge),
        ("elements", elements),
        ("graph", graph),
        ("targets", targets),
        decision,
    ]


def emit_cot(scene: Scene, length: CotLength | str) -> str:
    """Render the template reasoning as think-section text."""
    from .grammar import render_slots

    return render_slots(cot_slots(scene, length))


# ---------------------------------------------------------------------------
# persistence


def _floats(a) -> list:
    return [float(f"{v:.17g}") for v in np.asarray(a, dtype=np.float64).ravel()]


def _pairs(a) -> list:
    flat = _floats(a)
    return [flat[i:i + 2] for i in range(0, len(flat), 2)]


def scene_to_record(scene: Scene) -> dict:
    return {
        "v": SCHEMA_VERSION,
        "id": scene.id,
        "ego_history": _pairs(scene.ego_history),
        "ego_speed": float(scene.ego_speed),
        "ego_heading": float(scene.ego_heading),
        "agents": [
            {
                "positions": _pairs(a.positions),
                "headings": _floats(a.headings),
                "length": a.length,
                "width": a.width,
            }
            for a in scene.agents
        ],
        "gt_trajectory": _pairs(scene.gt_trajectory.waypoints),
        "gt_meta": {"lateral": scene.gt_meta.lateral.value, "longitudinal": scene.gt_meta.longitudinal.value},
        "difficulty": scene.difficulty.value,
        "maneuver": scene.maneuver.value,
        "cues": {k: float(v) for k, v in sorted(scene.cues.items())},
    }


def scene_from_record(rec: Mapping) -> Scene:
    if rec.get("v") != SCHEMA_VERSION:
        raise ValueError(f"schema version mismatch: expected {SCHEMA_VERSION}, got {rec.get('v')!r}")
    return Scene(
        id=str(rec["id"]),
        ego_history=rec["ego_history"],
        ego_speed=float(rec["ego_speed"]),
        ego_heading=float(rec["ego_heading"]),
        agents=tuple(
            AgentTrack(a["positions"], a["headings"], a["length"], a["width"]) for a in rec["agents"]
        ),
        gt_trajectory=Trajectory(rec["gt_trajectory"]),
        gt_meta=MetaAction(rec["gt_meta"]["lateral"], rec["gt_meta"]["longitudinal"]),
        difficulty=rec["difficulty"],
        maneuver=rec["maneuver"],
        cues=rec.get("cues", {}),
    )


class DatasetError(ValueError):
    """A dataset file could not be decoded."""


def dumps_scene(scene: Scene) -> str:
    return json.dumps(scene_to_record(scene), separators=(",", ":"))


def write_dataset(scenes: Iterable[Scene], path) -> int:
    """Write scenes as JSON Lines; returns the number of records."""
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for scene in scenes:
            fh.write(dumps_scene(scene))
            fh.write("\n")
            n += 1
    return n


def iter_records(path) -> Iterable[tuple[int, dict]]:
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{Path(path).name}: malformed record on line {lineno}: {exc.msg}") from exc
            if not isinstance(rec, dict):
                raise DatasetError(f"{Path(path).name}: line {lineno} is not a JSON object")
            yield lineno, rec


def read_dataset(path) -> list[Scene]:
    scenes = []
    for lineno, rec in iter_records(path):
        try:
            scenes.append(scene_from_record(rec))
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{Path(path).name}: bad scene on line {lineno}: {exc}") from exc
    return scenes


def split_by_difficulty(scenes: Sequence[Scene]) -> dict[str, list[Scene]]:
    out: dict[str, list[Scene]] = {d.value: [] for d in Difficulty}
    for s in scenes:
        out[s.difficulty.value].append(s)
    return out
