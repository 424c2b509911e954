"""Scenario definition: trajectories, measurement schedule, channel behavior.

A scenario is a plain JSON document (format tag ``splitcl-scenario/1``) with
the following keys; distances are meters, times seconds, angles radians:

``n_robots``            team size N; robots are labelled 1..N
``duration_s``          simulated time span
``dt_s``                integration step
``path``                square-spiral geometry, object with ``side0``
                        (innermost edge length), ``growth`` (length added
                        per edge), ``edge_time_s``, ``turn_time_s``,
                        ``center`` ([x, y])
``v_noise_frac``        per-robot std of linear-velocity noise as a fraction
                        of the commanded speed (list of N floats)
``w_noise_frac``        same for angular velocity
``meas_windows``        list of [start_s, end_s, observer, landmark]; during
                        each window the observer measures the landmark every
                        ``meas_period_s`` seconds, first at
                        ``start_s + meas_period_s`` and last at ``end_s``
``meas_period_s``       relative-measurement cadence inside windows
``meas_noise_std``      per-axis std of the relative-position measurement
``dropout_windows``     list of [robot, start_s, end_s]; the robot is
                        disconnected for times in (start_s, end_s]
``bernoulli_p``         extra i.i.d. per-robot, per-epoch loss probability
``zones``               list of [x_min, y_min, x_max, y_max] dropout areas
``initial_cov_diag``    diagonal of every robot's initial covariance
``perturb_initial``     draw the initial estimate error from the initial
                        covariance (true start poses are the spiral corners)
``seed``                default RNG seed for runs of this scenario

All robots drive the same outward square spiral, each starting one corner
further along, and all reach their next corner at the same instant (straight
edges at constant speed, turns in place). Cross-covariances always start at
zero.

The 1e-6 floor on process-noise variances applies to the covariance the
filters use, not to the injected noise, so a zero-noise scenario really is
noise free.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .model import wrap_angle
from .network import DropoutSchedule, DropoutWindow, DropoutZone

FORMAT_TAG = "splitcl-scenario/1"

# Lower bound on filter-side process-noise variances, keeps Q positive
# definite through zero-velocity segments.
PROCESS_NOISE_FLOOR = 1e-6


class ScenarioError(ValueError):
    """Invalid scenario content."""


@dataclass(frozen=True)
class SpiralPath:
    """Outward square-spiral track shared by the whole team.

    ``growth_mode`` selects how edge lengths progress: ``"linear"`` adds
    ``growth`` meters per edge, ``"geometric"`` multiplies by ``growth`` per
    edge. Robots start one corner apart on the same track and always corner
    simultaneously, so a robot further along drives proportionally faster.
    """

    side0: float = 1.0
    growth: float = 0.25
    growth_mode: str = "linear"
    edge_time_s: float = 24.0
    turn_time_s: float = 1.0
    center: tuple[float, float] = (0.0, 0.0)

    def edge_length(self, m: int) -> float:
        if self.growth_mode == "geometric":
            return self.side0 * self.growth**m
        return self.side0 + m * self.growth


@dataclass(frozen=True)
class MeasurementWindow:
    start_s: float
    end_s: float
    observer: int
    landmark: int


@dataclass(frozen=True)
class DropoutWindowSpec:
    robot: int
    start_s: float
    end_s: float


@dataclass(frozen=True)
class Scenario:
    n_robots: int = 4
    duration_s: float = 300.0
    dt_s: float = 0.1
    path: SpiralPath = field(default_factory=SpiralPath)
    v_noise_frac: tuple[float, ...] = (0.35, 0.30, 0.25, 0.20)
    w_noise_frac: tuple[float, ...] = (0.25, 0.20, 0.20, 0.15)
    path_scales: tuple[float, ...] | None = None
    meas_windows: tuple[MeasurementWindow, ...] = ()
    meas_period_s: float = 1.0
    meas_noise_std: float = 0.05
    dropout_windows: tuple[DropoutWindowSpec, ...] = ()
    bernoulli_p: float = 0.0
    zones: tuple[tuple[float, float, float, float], ...] = ()
    initial_cov_diag: tuple[float, float, float] = (0.0025, 0.0025, 0.00274)
    perturb_initial: bool = True
    seed: int = 1

    @property
    def robot_ids(self) -> tuple[int, ...]:
        return tuple(range(1, self.n_robots + 1))

    @property
    def n_steps(self) -> int:
        return int(round(self.duration_s / self.dt_s))

    def meas_noise_cov(self) -> np.ndarray:
        return np.eye(2) * self.meas_noise_std**2

    def initial_cov(self) -> np.ndarray:
        return np.diag(self.initial_cov_diag)

    def validate(self) -> None:
        if self.n_robots < 1:
            raise ScenarioError("n_robots must be at least 1")
        if self.dt_s <= 0 or self.duration_s <= 0:
            raise ScenarioError("dt_s and duration_s must be positive")
        if self.meas_period_s <= 0:
            raise ScenarioError("meas_period_s must be positive")
        if self.meas_noise_std <= 0:
            raise ScenarioError("meas_noise_std must be positive")
        if len(self.v_noise_frac) != self.n_robots or len(self.w_noise_frac) != self.n_robots:
            raise ScenarioError("noise fraction lists must have one entry per robot")
        if any(f < 0 for f in self.v_noise_frac + self.w_noise_frac):
            raise ScenarioError("noise fractions must be non-negative")
        if not 0.0 <= self.bernoulli_p < 1.0:
            raise ScenarioError("bernoulli_p must be in [0, 1)")
        if any(d <= 0 for d in self.initial_cov_diag):
            raise ScenarioError("initial covariance diagonal must be positive")
        if self.path.growth_mode not in ("linear", "geometric"):
            raise ScenarioError(f"unknown growth mode {self.path.growth_mode!r}")
        if self.path.side0 <= 0:
            raise ScenarioError("spiral side0 must be positive")
        if self.path.growth_mode == "geometric" and self.path.growth <= 0:
            raise ScenarioError("geometric growth ratio must be positive")
        if self.path_scales is not None:
            if len(self.path_scales) != self.n_robots:
                raise ScenarioError("path_scales must have one entry per robot")
            if any(s <= 0 for s in self.path_scales):
                raise ScenarioError("path scales must be positive")
        ids = set(self.robot_ids)
        for w in self.meas_windows:
            if w.observer not in ids or w.landmark not in ids:
                raise ScenarioError(f"measurement window {w} names an unknown robot")
            if w.observer == w.landmark:
                raise ScenarioError(f"measurement window {w} is self-referential")
            if not 0 <= w.start_s < w.end_s <= self.duration_s:
                raise ScenarioError(f"measurement window {w} is outside the run")
        for d in self.dropout_windows:
            if d.robot not in ids:
                raise ScenarioError(f"dropout window {d} names an unknown robot")
            if not 0 <= d.start_s <= d.end_s <= self.duration_s:
                raise ScenarioError(f"dropout window {d} is outside the run")
        for z in self.zones:
            if len(z) != 4 or z[0] > z[2] or z[1] > z[3]:
                raise ScenarioError(f"zone {z} is not a valid rectangle")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["format"] = FORMAT_TAG
        d["path"] = asdict(self.path)
        d["meas_windows"] = [
            [w.start_s, w.end_s, w.observer, w.landmark] for w in self.meas_windows
        ]
        d["dropout_windows"] = [
            [w.robot, w.start_s, w.end_s] for w in self.dropout_windows
        ]
        d["zones"] = [list(z) for z in self.zones]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        if not isinstance(d, dict):
            raise ScenarioError("scenario document must be a JSON object")
        tag = d.get("format")
        if tag != FORMAT_TAG:
            raise ScenarioError(f"unsupported scenario format {tag!r}")
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known - {"format"}
        if unknown:
            raise ScenarioError(f"unknown scenario keys {sorted(unknown)}")
        missing = known - set(d)
        if missing:
            raise ScenarioError(f"missing scenario keys {sorted(missing)}")
        try:
            path = SpiralPath(
                side0=float(d["path"]["side0"]),
                growth=float(d["path"]["growth"]),
                growth_mode=str(d["path"]["growth_mode"]),
                edge_time_s=float(d["path"]["edge_time_s"]),
                turn_time_s=float(d["path"]["turn_time_s"]),
                center=tuple(float(c) for c in d["path"]["center"]),
            )
            sc = cls(
                n_robots=int(d["n_robots"]),
                duration_s=float(d["duration_s"]),
                dt_s=float(d["dt_s"]),
                path=path,
                path_scales=(
                    None
                    if d["path_scales"] is None
                    else tuple(float(s) for s in d["path_scales"])
                ),
                v_noise_frac=tuple(float(f) for f in d["v_noise_frac"]),
                w_noise_frac=tuple(float(f) for f in d["w_noise_frac"]),
                meas_windows=tuple(
                    MeasurementWindow(float(w[0]), float(w[1]), int(w[2]), int(w[3]))
                    for w in d["meas_windows"]
                ),
                meas_period_s=float(d["meas_period_s"]),
                meas_noise_std=float(d["meas_noise_std"]),
                dropout_windows=tuple(
                    DropoutWindowSpec(int(w[0]), float(w[1]), float(w[2]))
                    for w in d["dropout_windows"]
                ),
                bernoulli_p=float(d["bernoulli_p"]),
                zones=tuple(tuple(float(v) for v in z) for z in d["zones"]),
                initial_cov_diag=tuple(float(v) for v in d["initial_cov_diag"]),
                perturb_initial=bool(d["perturb_initial"]),
                seed=int(d["seed"]),
            )
        except (KeyError, TypeError, IndexError) as exc:
            raise ScenarioError(f"malformed scenario field: {exc}") from exc
        sc.validate()
        return sc

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Scenario":
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"scenario file not found: {p}")
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"scenario file {p} is not valid JSON: {exc}") from exc
        return cls.from_dict(doc)


def seconds_to_step(t_s: float, dt_s: float) -> int:
    return int(round(t_s / dt_s))


def spiral_waypoints(path: SpiralPath, n_edges: int) -> np.ndarray:
    """Corners of the square spiral, ``n_edges + 1`` points.

    Edge ``m`` has length ``side0 + m * growth`` and heading ``m * pi/2``
    (counter-clockwise traversal).
    """
    pts = np.zeros((n_edges + 1, 2))
    pts[0] = path.center
    heading = 0.0
    for m in range(n_edges):
        length = path.edge_length(m)
        pts[m + 1] = pts[m] + length * np.array([math.cos(heading), math.sin(heading)])
        heading += math.pi / 2
    return pts


def robot_scales(sc: Scenario) -> np.ndarray:
    if sc.path_scales is None:
        return np.ones(sc.n_robots)
    return np.asarray(sc.path_scales, dtype=float)


def start_poses(sc: Scenario) -> np.ndarray:
    """True initial pose of each robot.

    Robot r drives its own copy of the base spiral, rotated by (r-1) * 90
    degrees about the shared center and scaled by its path scale, so the
    team fans out from the center in four directions while cornering in
    lockstep.
    """
    poses = np.zeros((sc.n_robots, 3))
    cx, cy = sc.path.center
    for r in range(sc.n_robots):
        poses[r, :2] = (cx, cy)
        poses[r, 2] = wrap_angle(r * math.pi / 2)
    return poses


def true_controls(sc: Scenario) -> np.ndarray:
    """Commanded ``[v, omega]`` per robot and step, shape (N, T, 2).

    Each robot alternates a constant-speed straight edge with an in-place
    quarter turn on its own scaled copy of the spiral; all robots corner at
    the same steps. Steps past the last full edge-turn cycle are zero (the
    robot waits).
    """
    dt = sc.dt_s
    n_steps = sc.n_steps
    edge_steps = seconds_to_step(sc.path.edge_time_s, dt)
    turn_steps = seconds_to_step(sc.path.turn_time_s, dt)
    if edge_steps < 1 or turn_steps < 1:
        raise ScenarioError("edge and turn times must be at least one step long")
    cycle = edge_steps + turn_steps
    n_cycles = n_steps // cycle
    edge_lengths = np.array([sc.path.edge_length(m) for m in range(n_cycles)])
    turn_rate = (math.pi / 2) / (turn_steps * dt)
    scales = robot_scales(sc)
    controls = np.zeros((sc.n_robots, n_steps, 2))
    for r in range(sc.n_robots):
        for c in range(n_cycles):
            v = scales[r] * edge_lengths[c] / (edge_steps * dt)
            k0 = c * cycle
            controls[r, k0:k0 + edge_steps, 0] = v
            controls[r, k0 + edge_steps:k0 + cycle, 1] = turn_rate
    return controls


def process_noise_diags(sc: Scenario, controls: np.ndarray) -> np.ndarray:
    """Injected-noise variances per robot and step, shape (N, T, 2)."""
    v_frac = np.asarray(sc.v_noise_frac)[:, None]
    w_frac = np.asarray(sc.w_noise_frac)[:, None]
    out = np.empty_like(controls)
    out[:, :, 0] = (v_frac * np.abs(controls[:, :, 0])) ** 2
    out[:, :, 1] = (w_frac * np.abs(controls[:, :, 1])) ** 2
    return out


def filter_noise_diags(sc: Scenario, controls: np.ndarray) -> np.ndarray:
    """Filter-side process noise: injected variances with the SPD floor."""
    return np.maximum(process_noise_diags(sc, controls), PROCESS_NOISE_FLOOR)


def measurement_schedule(sc: Scenario) -> dict[int, list[tuple[int, int]]]:
    """Map epoch step -> (observer, landmark) pairs in processing order."""
    period = seconds_to_step(sc.meas_period_s, sc.dt_s)
    if period < 1:
        raise ScenarioError("meas_period_s must be at least one step")
    schedule: dict[int, list[tuple[int, int]]] = {}
    for w in sc.meas_windows:
        start = seconds_to_step(w.start_s, sc.dt_s)
        end = seconds_to_step(w.end_s, sc.dt_s)
        for k in range(start + period, end + 1, period):
            schedule.setdefault(k, []).append((w.observer, w.landmark))
    for pairs in schedule.values():
        pairs.sort()
    return dict(sorted(schedule.items()))


def dropout_schedule(sc: Scenario) -> DropoutSchedule:
    """The scenario's channel behavior in step units."""
    return DropoutSchedule(
        windows=tuple(
            DropoutWindow(
                robot=w.robot,
                start_step=seconds_to_step(w.start_s, sc.dt_s),
                end_step=seconds_to_step(w.end_s, sc.dt_s),
            )
            for w in sc.dropout_windows
        ),
        bernoulli_p=sc.bernoulli_p,
        zones=tuple(DropoutZone(*z) for z in sc.zones),
    )


def build_table1_scenario(**overrides) -> Scenario:
    """The four-robot benchmark scenario used by the verification suite.

    Six five-second measurement bursts spread over a 300 s run, twelve
    observer-landmark window entries in total, and two scheduled
    disconnection windows for robot 4.
    """
    windows = (
        MeasurementWindow(45.0, 50.0, 1, 2),
        MeasurementWindow(45.0, 50.0, 2, 3),
        MeasurementWindow(45.0, 50.0, 3, 4),
        MeasurementWindow(90.0, 95.0, 3, 4),
        MeasurementWindow(90.0, 95.0, 4, 1),
        MeasurementWindow(135.0, 140.0, 1, 2),
        MeasurementWindow(135.0, 140.0, 3, 4),
        MeasurementWindow(180.0, 185.0, 2, 3),
        MeasurementWindow(225.0, 230.0, 1, 2),
        MeasurementWindow(225.0, 230.0, 3, 4),
        MeasurementWindow(270.0, 275.0, 2, 3),
        MeasurementWindow(270.0, 275.0, 4, 1),
    )
    dropouts = (
        DropoutWindowSpec(4, 135.0, 140.0),
        DropoutWindowSpec(4, 180.0, 185.0),
    )
    sc = Scenario(meas_windows=windows, dropout_windows=dropouts, **overrides)
    sc.validate()
    return sc


def random_scenario(
    n_robots: int,
    seed: int,
    duration_s: float = 120.0,
    window_every_s: float = 20.0,
    bernoulli_p: float = 0.0,
) -> Scenario:
    """A reproducible randomized scenario for an ``n_robots`` team.

    One measurement window per ``window_every_s`` of run time, each pairing
    two distinct randomly drawn robots.
    """
    if n_robots < 2:
        raise ScenarioError("random scenarios need at least 2 robots")
    rng = np.random.default_rng(seed)
    windows = []
    t = window_every_s
    while t + 5.0 <= duration_s:
        observer, landmark = rng.choice(np.arange(1, n_robots + 1), size=2, replace=False)
        windows.append(MeasurementWindow(t, t + 5.0, int(observer), int(landmark)))
        t += window_every_s
    fracs = rng.uniform(0.15, 0.35, size=(2, n_robots))
    sc = Scenario(
        n_robots=n_robots,
        duration_s=duration_s,
        v_noise_frac=tuple(round(f, 3) for f in fracs[0]),
        w_noise_frac=tuple(round(f, 3) for f in fracs[1]),
        meas_windows=tuple(windows),
        bernoulli_p=bernoulli_p,
        seed=seed,
    )
    sc.validate()
    return sc


def strip_dropouts(sc: Scenario) -> Scenario:
    """The same scenario under perfect communication."""
    return replace(sc, dropout_windows=(), bernoulli_p=0.0, zones=())
