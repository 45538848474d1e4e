"""Toy 2D driving world with a pseudo-perspective renderer and a scripted expert.

The world is a route polyline with a two-lane road corridor around it,
box-shaped vehicles and pedestrians, and red-light zones with timed phases.
The ego follows bicycle kinematics.  Rendering happens twice from the same
ground-truth classifier: camera pixels ray-cast onto the ground plane
through the declared CameraModel, and BeV labels rasterised at the label
grid's cell centres, so image, BeV and geometry stay consistent by
construction.

Integration order for `step` (documented because tests hand-replicate it):
    a      = accel_gain * throttle       (brake_gain when throttle < 0)
    v'     = clip(v + a * dt, 0, v_max)
    theta' = theta + (v' / wheelbase) * tan(steer * steer_max) * dt
    pos'   = pos + v' * (cos theta', sin theta') * dt
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import cv2
import numpy as np

from .config import RunConfig, SimConfig
from .data import EpisodeRecord, ObservationFrame
from .geometry import BevGridSpec, CameraModel, project_points

# BeV semantic classes
BACKGROUND, ROAD, MARKING, VEHICLE, PEDESTRIAN, RED_ZONE = range(6)

_CENTER_SIGMA_CELLS = 1.5

_TRAIN_PALETTES = [
    # road, marking, terrain, island, sky_top, sky_horizon
    dict(road=(0.30, 0.30, 0.32), marking=(0.85, 0.85, 0.80), terrain=(0.32, 0.45, 0.26),
         island=(0.38, 0.42, 0.30), sky_top=(0.35, 0.55, 0.85), sky_horizon=(0.75, 0.85, 0.95),
         brightness=1.00),
    dict(road=(0.36, 0.35, 0.36), marking=(0.90, 0.88, 0.75), terrain=(0.45, 0.42, 0.28),
         island=(0.42, 0.40, 0.30), sky_top=(0.55, 0.65, 0.90), sky_horizon=(0.85, 0.88, 0.92),
         brightness=1.08),
    dict(road=(0.24, 0.25, 0.27), marking=(0.78, 0.80, 0.82), terrain=(0.28, 0.38, 0.30),
         island=(0.33, 0.36, 0.30), sky_top=(0.45, 0.50, 0.60), sky_horizon=(0.70, 0.72, 0.75),
         brightness=0.90),
    dict(road=(0.33, 0.31, 0.29), marking=(0.88, 0.84, 0.70), terrain=(0.50, 0.46, 0.24),
         island=(0.45, 0.42, 0.26), sky_top=(0.60, 0.60, 0.75), sky_horizon=(0.90, 0.85, 0.80),
         brightness=1.05),
]
_TEST_PALETTES = [
    dict(road=(0.28, 0.28, 0.33), marking=(0.82, 0.86, 0.88), terrain=(0.36, 0.40, 0.34),
         island=(0.40, 0.40, 0.34), sky_top=(0.40, 0.45, 0.70), sky_horizon=(0.78, 0.80, 0.88),
         brightness=0.95),
    dict(road=(0.38, 0.36, 0.33), marking=(0.92, 0.90, 0.82), terrain=(0.48, 0.50, 0.30),
         island=(0.44, 0.46, 0.30), sky_top=(0.65, 0.70, 0.88), sky_horizon=(0.92, 0.90, 0.85),
         brightness=1.12),
]
_VEHICLE_COLORS = [(0.75, 0.15, 0.12), (0.12, 0.25, 0.70), (0.85, 0.75, 0.15), (0.80, 0.80, 0.82)]
_PED_COLOR = (0.90, 0.45, 0.10)
_ZONE_RED = (0.75, 0.20, 0.18)
_ZONE_INACTIVE = (0.45, 0.43, 0.44)
_POLE_RED = (0.95, 0.10, 0.10)
_POLE_GREEN = (0.10, 0.85, 0.20)
_POLE_POST = (0.40, 0.40, 0.42)


class RoutePath:
    """Polyline with arc length, tangents and curvature, plus projection."""

    def __init__(self, pts: np.ndarray) -> None:
        self.pts = np.asarray(pts, dtype=np.float64)
        deltas = np.diff(self.pts, axis=0)
        seg_len = np.hypot(deltas[:, 0], deltas[:, 1])
        self.cum_s = np.concatenate([[0.0], np.cumsum(seg_len)])
        self.length = float(self.cum_s[-1])
        self.tangent_angle = np.arctan2(deltas[:, 1], deltas[:, 0])
        self.tangent_angle = np.concatenate([self.tangent_angle, self.tangent_angle[-1:]])
        # curvature ~ d(theta)/ds over a ~2 m window
        dtheta = np.diff(np.unwrap(self.tangent_angle))
        ds = np.maximum(np.diff(self.cum_s), 1e-9)
        kappa = np.concatenate([dtheta / ds, [0.0]])
        win = max(1, int(round(2.0 / max(ds.mean(), 1e-9))))
        kernel = np.ones(win) / win
        self.curvature = np.convolve(kappa, kernel, mode="same")

    def point_at(self, s: float) -> np.ndarray:
        return np.stack(
            [np.interp(s, self.cum_s, self.pts[:, 0]), np.interp(s, self.cum_s, self.pts[:, 1])]
        )

    def heading_at(self, s: float) -> float:
        idx = min(np.searchsorted(self.cum_s, s, side="right"), len(self.tangent_angle) - 1)
        return float(self.tangent_angle[idx])

    def max_curvature(self, s0: float, s1: float) -> float:
        lo, hi = np.searchsorted(self.cum_s, [max(0.0, s0), min(self.length, s1)])
        hi = min(hi + 1, len(self.curvature))
        if lo >= hi:
            return 0.0
        return float(np.abs(self.curvature[lo:hi]).max())

    def project(self, query: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(..., 2) points -> (arc length s, signed lateral; + is right of route)."""
        q = np.asarray(query, dtype=np.float64).reshape(-1, 2)
        d2 = ((q[:, None, :] - self.pts[None, :, :]) ** 2).sum(-1)
        nearest = d2.argmin(axis=1)
        s_out = np.empty(len(q))
        lat_out = np.empty(len(q))
        for k, (point, idx) in enumerate(zip(q, nearest)):
            best = (np.inf, 0.0, 0.0)
            for seg in (idx - 1, idx):
                if seg < 0 or seg >= len(self.pts) - 1:
                    continue
                a, b = self.pts[seg], self.pts[seg + 1]
                d = b - a
                L2 = d @ d
                t = 0.0 if L2 == 0 else float(np.clip((point - a) @ d / L2, 0.0, 1.0))
                c = a + t * d
                dist2 = float(((point - c) ** 2).sum())
                if dist2 < best[0]:
                    ln = math.sqrt(L2) if L2 > 0 else 1.0
                    cross = (d[0] * (point[1] - c[1]) - d[1] * (point[0] - c[0])) / ln
                    best = (dist2, self.cum_s[seg] + t * ln, -cross)
            s_out[k], lat_out[k] = best[1], best[2]
        shape = np.asarray(query).shape[:-1]
        return s_out.reshape(shape), lat_out.reshape(shape)


def _project_batch(path: RoutePath, query: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised variant of RoutePath.project for large point sets."""
    q = np.asarray(query, dtype=np.float64).reshape(-1, 2)
    pts = path.pts
    a = pts[:-1]
    d = np.diff(pts, axis=0)
    L2 = (d * d).sum(-1)
    ln = np.sqrt(np.maximum(L2, 1e-18))
    # nearest segment via nearest vertex, then refine on its two neighbours
    d2v = ((q[:, None, :] - pts[None, :, :]) ** 2).sum(-1)
    near = d2v.argmin(axis=1)
    cand = np.stack([np.clip(near - 1, 0, len(a) - 1), np.clip(near, 0, len(a) - 1)], axis=1)
    rel = q[:, None, :] - a[cand]
    t = np.clip((rel * d[cand]).sum(-1) / np.maximum(L2[cand], 1e-18), 0.0, 1.0)
    c = a[cand] + t[..., None] * d[cand]
    dist2 = ((q[:, None, :] - c) ** 2).sum(-1)
    pick = dist2.argmin(axis=1)
    rows = np.arange(len(q))
    seg = cand[rows, pick]
    tt = t[rows, pick]
    cc = c[rows, pick]
    cross = (d[seg, 0] * (q[:, 1] - cc[:, 1]) - d[seg, 1] * (q[:, 0] - cc[:, 0])) / ln[seg]
    s = path.cum_s[seg] + tt * ln[seg]
    shape = np.asarray(query).shape[:-1]
    return s.reshape(shape), (-cross).reshape(shape)


@dataclass
class LightZone:
    s0: float
    length: float
    red_s: float
    green_s: float
    offset_s: float
    pole_xy: np.ndarray
    entered: bool = False
    inside: bool = False

    def is_red(self, t: float) -> bool:
        return ((t + self.offset_s) % (self.red_s + self.green_s)) < self.red_s


@dataclass
class Agent:
    kind: str  # "vehicle" | "pedestrian"
    size: tuple[float, float]  # length, width (metres)
    height: float
    x: float
    y: float
    heading: float
    speed: float
    target_speed: float = 0.0
    color_idx: int = 0
    path: RoutePath | None = None
    s_pos: float = 0.0
    walk_s: float | None = None  # strollers track the road at fixed offset
    walk_lat: float = 0.0
    walk_sign: float = 1.0
    walk_origin_s: float = 0.0
    walk_range: float = 0.0
    cross_dir: np.ndarray | None = None
    cross_remaining: float = 0.0
    cross_trigger: float = 0.0
    crossing: bool = False
    in_contact: bool = False

    def pos(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def corners(self) -> np.ndarray:
        return _obb_corners(self.x, self.y, self.heading, self.size[0], self.size[1])


@dataclass
class StepResult:
    reward: float
    done: bool
    reason: str
    infractions: list[str]


@dataclass
class WorldState:
    cfg: SimConfig
    camera: CameraModel
    label_grid: BevGridSpec
    route: RoutePath
    agents: list[Agent]
    zones: list[LightZone]
    palette: dict
    template: str
    island: tuple[np.ndarray, float] | None
    rng: np.random.Generator
    seed: int
    ego_x: float = 0.0
    ego_y: float = 0.0
    ego_heading: float = 0.0
    ego_speed: float = 0.0
    tick: int = 0
    progress: float = 0.0
    infractions: list[tuple[int, str]] = field(default_factory=list)
    off_route_fired: bool = False
    done: bool = False
    done_reason: str = ""
    _ray_cache: dict = field(default_factory=dict, repr=False)

    @property
    def time(self) -> float:
        return self.tick * self.cfg.dt

    def ego_pos(self) -> np.ndarray:
        return np.array([self.ego_x, self.ego_y])


def _obb_corners(x: float, y: float, heading: float, length: float, width: float) -> np.ndarray:
    c, s = math.cos(heading), math.sin(heading)
    fwd = np.array([c, s])
    right = np.array([s, -c])
    half_l, half_w = length / 2.0, width / 2.0
    center = np.array([x, y])
    return np.stack(
        [
            center + half_l * fwd + half_w * right,
            center + half_l * fwd - half_w * right,
            center - half_l * fwd - half_w * right,
            center - half_l * fwd + half_w * right,
        ]
    )


def _obb_overlap(ca: np.ndarray, cb: np.ndarray) -> bool:
    """Separating-axis test for two convex quads (corner arrays (4, 2))."""
    for quad in (ca, cb):
        for i in range(4):
            edge = quad[(i + 1) % 4] - quad[i]
            axis = np.array([-edge[1], edge[0]])
            pa = ca @ axis
            pb = cb @ axis
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True


def _points_in_obb(points: np.ndarray, agent: Agent) -> np.ndarray:
    rel = points - agent.pos()
    c, s = math.cos(agent.heading), math.sin(agent.heading)
    fwd = rel @ np.array([c, s])
    right = rel @ np.array([s, -c])
    return (np.abs(fwd) <= agent.size[0] / 2.0) & (np.abs(right) <= agent.size[1] / 2.0)


def vehicle_to_world(world: WorldState, pts: np.ndarray) -> np.ndarray:
    """Vehicle-frame (x fwd, y right[, z up]) -> world; z passes through."""
    pts = np.asarray(pts, dtype=np.float64)
    c, s = math.cos(world.ego_heading), math.sin(world.ego_heading)
    out = pts.copy()
    out[..., 0] = world.ego_x + pts[..., 0] * c + pts[..., 1] * s
    out[..., 1] = world.ego_y + pts[..., 0] * s - pts[..., 1] * c
    return out


def world_to_vehicle(world: WorldState, pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    c, s = math.cos(world.ego_heading), math.sin(world.ego_heading)
    dx = pts[..., 0] - world.ego_x
    dy = pts[..., 1] - world.ego_y
    out = pts.copy()
    out[..., 0] = dx * c + dy * s
    out[..., 1] = dx * s - dy * c
    return out


# ---------------------------------------------------------------------------
# world generation


def _arc(start: np.ndarray, heading: float, radius: float, sweep: float, left: bool,
         step: float = 0.5) -> tuple[np.ndarray, float]:
    sign = 1.0 if left else -1.0
    center = start + radius * np.array([-math.sin(heading), math.cos(heading)]) * sign
    a0 = math.atan2(start[1] - center[1], start[0] - center[0])
    n = max(2, int(math.ceil(radius * sweep / step)))
    angles = a0 + sign * np.linspace(0.0, sweep, n + 1)
    pts = center + radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return pts[1:], heading + sign * sweep


def _straight(start: np.ndarray, heading: float, length: float, step: float = 0.5) -> np.ndarray:
    n = max(1, int(math.ceil(length / step)))
    t = np.linspace(0.0, length, n + 1)[1:]
    return start + t[:, None] * np.array([math.cos(heading), math.sin(heading)])


def _build_route(rng: np.random.Generator) -> tuple[RoutePath, str, tuple[np.ndarray, float] | None]:
    template = rng.choice(["straight", "left_turn", "right_turn", "s_curve", "roundabout"])
    pts = [np.zeros((1, 2))]
    heading = 0.0
    island = None

    def extend(chunk):
        pts.append(chunk)
        return chunk[-1]

    pos = pts[0][-1]
    if template == "straight":
        pos = extend(_straight(pos, heading, float(rng.uniform(110.0, 140.0))))
    elif template in ("left_turn", "right_turn"):
        left = template == "left_turn"
        pos = extend(_straight(pos, heading, float(rng.uniform(30.0, 45.0))))
        radius = float(rng.uniform(9.0, 14.0))
        chunk, heading = _arc(pos, heading, radius, math.pi / 2.0, left)
        pos = extend(chunk)
        pos = extend(_straight(pos, heading, float(rng.uniform(30.0, 45.0))))
    elif template == "s_curve":
        pos = extend(_straight(pos, heading, float(rng.uniform(20.0, 30.0))))
        for left in (True, False):
            radius = float(rng.uniform(11.0, 16.0))
            sweep = math.radians(float(rng.uniform(55.0, 80.0)))
            chunk, heading = _arc(pos, heading, radius, sweep, left)
            pos = extend(chunk)
            pos = extend(_straight(pos, heading, float(rng.uniform(12.0, 20.0))))
    else:  # roundabout
        pos = extend(_straight(pos, heading, float(rng.uniform(25.0, 35.0))))
        radius = float(rng.uniform(8.5, 11.0))
        sweep = math.radians(float(rng.uniform(150.0, 240.0)))
        sign = 1.0
        center = pos + radius * np.array([-math.sin(heading), math.cos(heading)]) * sign
        chunk, heading = _arc(pos, heading, radius, sweep, left=True)
        pos = extend(chunk)
        pos = extend(_straight(pos, heading, float(rng.uniform(25.0, 35.0))))
        island = (center, max(2.0, radius - 6.5))
    route = RoutePath(np.concatenate(pts, axis=0))
    return route, str(template), island


def _place_agents(rng: np.random.Generator, route: RoutePath, cfg: SimConfig) -> list[Agent]:
    agents: list[Agent] = []
    lane = cfg.lane_width

    def route_pose(s: float, lateral: float) -> tuple[float, float, float]:
        p = route.point_at(s)
        th = route.heading_at(s)
        x = p[0] + lateral * math.sin(th)
        y = p[1] - lateral * math.cos(th)
        return float(x), float(y), th

    n_lead = int(rng.integers(0, cfg.max_lead + 1))
    for _ in range(n_lead):
        s0 = float(rng.uniform(18.0, 40.0))
        x, y, th = route_pose(s0, 0.0)
        agents.append(Agent(
            kind="vehicle", size=(3.8, 1.8), height=1.5, x=x, y=y, heading=th,
            # floor at 0.6: following the slowest lead over the longest route
            # has to fit inside the step cap even with two red-light waits
            speed=0.0, target_speed=float(rng.uniform(0.6, 0.85)) * cfg.cruise_speed,
            color_idx=int(rng.integers(len(_VEHICLE_COLORS))), path=route, s_pos=s0,
        ))

    n_onc = int(rng.integers(0, cfg.max_oncoming + 1))
    if n_onc:
        # oncoming lane: reversed route offset one lane to the route's left
        rev = route.pts[::-1].copy()
        th = np.array([route.heading_at(s) for s in route.cum_s[::-1]])
        rev[:, 0] -= lane * np.sin(th)
        rev[:, 1] += lane * np.cos(th)
        onc_path = RoutePath(rev)
        for _ in range(n_onc):
            s0 = float(rng.uniform(0.1, 0.75) * onc_path.length)
            p = onc_path.point_at(s0)
            heading = onc_path.heading_at(s0)
            agents.append(Agent(
                kind="vehicle", size=(3.8, 1.8), height=1.5, x=float(p[0]), y=float(p[1]),
                heading=heading, speed=0.0,
                target_speed=float(rng.uniform(0.55, 0.95)) * cfg.cruise_speed,
                color_idx=int(rng.integers(len(_VEHICLE_COLORS))), path=onc_path, s_pos=s0,
            ))

    n_parked = int(rng.integers(0, cfg.max_parked + 1))
    for _ in range(n_parked):
        s0 = float(rng.uniform(0.15, 0.85) * route.length)
        x, y, th = route_pose(s0, lane * 0.5 + 1.6)
        agents.append(Agent(
            kind="vehicle", size=(3.8, 1.8), height=1.5, x=x, y=y, heading=th,
            speed=0.0, target_speed=0.0,
            color_idx=int(rng.integers(len(_VEHICLE_COLORS))),
        ))

    n_peds = int(rng.integers(0, cfg.max_peds + 1))
    for _ in range(n_peds):
        s0 = float(rng.uniform(0.25, 0.85) * route.length)
        side = 1.0 if rng.uniform() < 0.7 else -1.0
        off = float(rng.uniform(0.8, 2.5))
        # keep walkers off the roadway on both sides (the left side has the
        # oncoming lane between the route and the verge)
        lateral = lane * 0.5 + off if side > 0 else -(lane * 1.5 + off)
        x, y, th = route_pose(s0, lateral)
        crosser = rng.uniform() < cfg.crosser_prob
        ped = Agent(kind="pedestrian", size=(0.55, 0.55), height=1.8, x=x, y=y,
                    heading=th, speed=0.0)
        if crosser:
            # walks across the road once the ego gets close, stopping a metre
            # past the far edge
            n = np.array([math.sin(th), -math.cos(th)])  # unit vector to route's right
            ped.cross_dir = -side * n
            far_lat = -(1.5 * lane + 1.0) if side > 0 else (0.5 * lane + 1.0)
            ped.cross_remaining = abs(lateral - far_lat)
            ped.cross_trigger = float(rng.uniform(10.0, 16.0))
        else:
            ped.walk_s = s0
            ped.walk_lat = lateral
            ped.walk_sign = 1.0 if rng.uniform() < 0.5 else -1.0
            ped.walk_origin_s = s0
            ped.walk_range = float(rng.uniform(3.0, 8.0))
            ped.speed = float(rng.uniform(0.5, 1.1))
        agents.append(ped)
    return agents


def _place_zones(rng: np.random.Generator, route: RoutePath, cfg: SimConfig) -> list[LightZone]:
    zones: list[LightZone] = []
    n = int(rng.integers(0, cfg.max_lights + 1))
    taken: list[float] = []
    for _ in range(n):
        for _ in range(8):  # rejection sample a spaced-out position
            s0 = float(rng.uniform(0.25, 0.8) * route.length)
            if all(abs(s0 - t) > 30.0 for t in taken):
                taken.append(s0)
                break
        else:
            continue
        p = route.point_at(s0)
        th = route.heading_at(s0)
        pole = p + (cfg.lane_width * 0.5 + 0.8) * np.array([math.sin(th), -math.cos(th)])
        zones.append(LightZone(
            s0=s0, length=3.0,
            red_s=float(rng.uniform(*cfg.red_range)),
            green_s=float(rng.uniform(*cfg.green_range)),
            offset_s=float(rng.uniform(0.0, 12.0)),
            pole_xy=pole,
        ))
    zones.sort(key=lambda z: z.s0)
    return zones


def build_world(cfg: RunConfig, seed: int) -> WorldState:
    rng = np.random.default_rng(seed)
    route, template, island = _build_route(rng)
    sim = cfg.sim
    agents = _place_agents(rng, route, sim)
    zones = _place_zones(rng, route, sim)
    if sim.palette_pool == "train":
        palette = _TRAIN_PALETTES[int(rng.integers(len(_TRAIN_PALETTES)))]
    elif sim.palette_pool == "test":
        palette = _TEST_PALETTES[int(rng.integers(len(_TEST_PALETTES)))]
    else:
        pool = _TRAIN_PALETTES + _TEST_PALETTES
        palette = pool[int(rng.integers(len(pool)))]
    start = route.point_at(3.0)
    world = WorldState(
        cfg=sim, camera=cfg.camera.build(), label_grid=cfg.bev.label_grid(),
        route=route, agents=agents, zones=zones, palette=palette, template=template,
        island=island, rng=rng, seed=seed,
        ego_x=float(start[0]), ego_y=float(start[1]),
        ego_heading=route.heading_at(3.0), ego_speed=0.0, progress=3.0,
    )
    return world


# ---------------------------------------------------------------------------
# dynamics, behaviour, reward


def _update_agents(world: WorldState) -> None:
    cfg = world.cfg
    dt = cfg.dt
    for ag in world.agents:
        if ag.kind == "vehicle" and ag.path is not None:
            # crude car following: slow down when something sits on the path ahead
            gap_limit = 9.0
            allow = ag.target_speed
            obstacles = [(world.ego_x, world.ego_y)] + [
                (o.x, o.y) for o in world.agents if o is not ag
            ]
            s_obs, lat_obs = ag.path.project(np.array(obstacles))
            for so, lo in zip(np.atleast_1d(s_obs), np.atleast_1d(lat_obs)):
                ahead = so - ag.s_pos
                if 0.0 < ahead < gap_limit and abs(lo) < 1.6:
                    allow = min(allow, ag.target_speed * max(0.0, (ahead - 4.5) / gap_limit))
            ag.speed += np.clip(allow - ag.speed, -3.0 * dt, 1.5 * dt)
            ag.speed = float(max(0.0, ag.speed))
            ag.s_pos = ag.s_pos + ag.speed * dt
            if ag.s_pos <= ag.path.length:
                p = ag.path.point_at(ag.s_pos)
                ag.heading = ag.path.heading_at(ag.s_pos)
            else:
                # keep rolling straight past the path end so the vehicle
                # clears the scene instead of freezing on the route
                end = ag.path.point_at(ag.path.length)
                ag.heading = ag.path.heading_at(ag.path.length)
                over = ag.s_pos - ag.path.length
                p = end + over * np.array([math.cos(ag.heading), math.sin(ag.heading)])
            ag.x, ag.y = float(p[0]), float(p[1])
        elif ag.kind == "pedestrian":
            if ag.cross_dir is not None and not ag.crossing and ag.cross_remaining > 0.0:
                d = math.hypot(world.ego_x - ag.x, world.ego_y - ag.y)
                if d < ag.cross_trigger:
                    ag.crossing = True
                    ag.speed = 1.0
            if ag.crossing and ag.cross_remaining > 0.0:
                step_len = ag.speed * dt
                nx = ag.x + float(ag.cross_dir[0]) * step_len
                ny = ag.y + float(ag.cross_dir[1]) * step_len
                # pause only when the next step would reach the car body
                # itself; a wider berth would deadlock against an ego that
                # is already waiting for the walker
                if math.hypot(world.ego_x - nx, world.ego_y - ny) < 2.8:
                    pass
                else:
                    ag.x, ag.y = nx, ny
                    ag.cross_remaining -= step_len
                    if ag.cross_remaining <= 0.0:
                        ag.crossing = False
                        ag.speed = 0.0
            elif ag.walk_s is not None:
                # pace back and forth along the verge, never onto the road
                ag.walk_s += ag.walk_sign * ag.speed * dt
                lo = max(0.0, ag.walk_origin_s - ag.walk_range)
                hi = min(world.route.length, ag.walk_origin_s + ag.walk_range)
                if not lo <= ag.walk_s <= hi:
                    ag.walk_s = float(np.clip(ag.walk_s, lo, hi))
                    ag.walk_sign = -ag.walk_sign
                th = world.route.heading_at(ag.walk_s)
                p = world.route.point_at(ag.walk_s)
                ag.x = float(p[0] + ag.walk_lat * math.sin(th))
                ag.y = float(p[1] - ag.walk_lat * math.cos(th))
                ag.heading = th if ag.walk_sign > 0 else th + math.pi


def desired_speed(world: WorldState) -> float:
    """Context speed target shared by the expert and the reward shaping."""
    cfg = world.cfg
    s_ego, lat_ego = world.route.project(world.ego_pos())
    s_ego = float(s_ego)
    v = cfg.cruise_speed
    kappa = world.route.max_curvature(s_ego, s_ego + 12.0)
    if kappa > 1e-6:
        v = min(v, math.sqrt(cfg.lat_accel_max / kappa))
    for z in world.zones:
        if s_ego >= z.s0 - 0.5:
            continue  # at or past the line: never brake into the zone
        gap = z.s0 - cfg.expert_stop_margin - s_ego
        v_cross = max(0.8 * v, 1.5)
        t_arrive = max(gap, 0.0) / v_cross
        t_clear = t_arrive + (z.length + cfg.ego_size[0] + 1.0) / v_cross
        if _red_within(z, world.time + t_arrive, world.time + t_clear):
            required = world.ego_speed**2 / (2.0 * cfg.comfort_brake)
            # dilemma zone: when the light flips red too late to stop in
            # comfort, carry on through instead of halting inside the zone
            if gap + 1.5 >= required:
                v = min(v, math.sqrt(2.0 * cfg.comfort_brake * max(gap, 0.0)))
    positions = [a.pos() for a in world.agents]
    if positions:
        s_a, lat_a = world.route.project(np.stack(positions))
        for ag, so, lo in zip(world.agents, np.atleast_1d(s_a), np.atleast_1d(lat_a)):
            ahead = float(so) - s_ego
            low = 0.0
            margin = 1.9 if ag.kind == "vehicle" else 2.3
            if ag.kind == "pedestrian" and ag.crossing:
                margin = 5.0  # start yielding before the crosser reaches the lane
                # when the walker's line already falls inside the bumper zone
                # the right move is to clear out, not to camp on the crossing
                low = 2.6
            if abs(float(lo)) < margin and low < ahead < 25.0:
                gap = ahead - 2.0 - ag.size[0] / 2.0 - cfg.expert_agent_gap
                allow = math.sqrt(2.0 * cfg.comfort_brake * max(gap, 0.0))
                if ag.kind == "vehicle" and ag.path is world.route:
                    # in arc coordinates the gap opens at exactly the lead's
                    # own path speed
                    allow += ag.speed
                v = min(v, allow)
    return max(0.0, v)


def _red_within(z: LightZone, t0: float, t1: float) -> bool:
    """True when the light shows red at any moment of [t0, t1]."""
    period = z.red_s + z.green_s
    u = (t0 + z.offset_s) % period
    return u < z.red_s or (period - u) <= (t1 - t0)


def expert_action(world: WorldState) -> np.ndarray:
    """Pure-pursuit steering plus proportional speed control, in [-1, 1]^2."""
    cfg = world.cfg
    s_ego, _ = world.route.project(world.ego_pos())
    s_ego = float(s_ego)
    lookahead = np.clip(cfg.expert_lookahead_base + cfg.expert_lookahead_gain * world.ego_speed,
                        2.0, 9.0)
    target = world.route.point_at(min(s_ego + lookahead, world.route.length))
    rel = world_to_vehicle(world, target)
    dist = max(math.hypot(rel[0], rel[1]), 1e-6)
    alpha = math.atan2(-rel[1], rel[0])  # +: target to the left
    delta = math.atan2(2.0 * cfg.wheelbase * math.sin(alpha), dist)
    steer = float(np.clip(delta / cfg.steer_max, -1.0, 1.0))

    v_des = desired_speed(world)
    dv = v_des - world.ego_speed
    if dv >= 0:
        throttle = cfg.expert_speed_gain * dv / cfg.accel_gain
    else:
        # stiff on the brake side: a soft gain would track deceleration
        # profiles with metres per second of speed error and overshoot
        # stop lines
        throttle = dv / 1.5
    throttle = float(np.clip(throttle, -1.0, 1.0))
    return np.array([throttle, steer], dtype=np.float64)


def step(world: WorldState, action: np.ndarray) -> StepResult:
    """Advance one tick; returns the shaped reward and termination info."""
    if world.done:
        raise RuntimeError("stepping a finished episode")
    cfg = world.cfg
    act = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
    accel = act[0] * (cfg.accel_gain if act[0] >= 0 else cfg.brake_gain)
    v_new = float(np.clip(world.ego_speed + accel * cfg.dt, 0.0, cfg.v_max))
    heading_new = world.ego_heading + (v_new / cfg.wheelbase) * math.tan(act[1] * cfg.steer_max) * cfg.dt
    world.ego_speed = v_new
    world.ego_heading = heading_new
    world.ego_x += v_new * math.cos(heading_new) * cfg.dt
    world.ego_y += v_new * math.sin(heading_new) * cfg.dt

    _update_agents(world)
    world.tick += 1

    s_ego, lat_ego = world.route.project(world.ego_pos())
    s_ego, lat_ego = float(s_ego), float(lat_ego)
    world.progress = max(world.progress, s_ego)

    new_infractions: list[str] = []
    ego_obb = _obb_corners(world.ego_x, world.ego_y, world.ego_heading, *cfg.ego_size)
    for ag in world.agents:
        hit = _obb_overlap(ego_obb, ag.corners())
        if hit and not ag.in_contact:
            kind = "collision_vehicle" if ag.kind == "vehicle" else "collision_pedestrian"
            new_infractions.append(kind)
        ag.in_contact = hit
    for z in world.zones:
        inside = (z.s0 <= s_ego <= z.s0 + z.length) and abs(lat_ego) < cfg.lane_width / 2.0
        if inside and not z.inside and z.is_red(world.time):
            new_infractions.append("red_light")
        z.inside = inside
    if abs(lat_ego) > cfg.off_route_max and not world.off_route_fired:
        new_infractions.append("off_route")
        world.off_route_fired = True
    for kind in new_infractions:
        world.infractions.append((world.tick, kind))

    v_des = desired_speed(world)
    r = 1.0
    r -= cfg.reward_lat_frac * min(abs(lat_ego) / cfg.reward_lat_scale, 1.0)
    r -= cfg.reward_speed_frac * min(abs(world.ego_speed - v_des) / cfg.v_max, 1.0)
    if new_infractions:
        r = cfg.r_min
    r = float(np.clip(r, cfg.r_min, 1.0))

    done, reason = False, ""
    if world.progress >= world.route.length - 1.0:
        done, reason = True, "route_complete"
    elif world.off_route_fired:
        done, reason = True, "off_route"
    elif world.tick >= cfg.max_steps:
        done, reason = True, "timeout"
    world.done, world.done_reason = done, reason
    return StepResult(reward=r, done=done, reason=reason, infractions=new_infractions)


# ---------------------------------------------------------------------------
# rendering


def _classify_ground(world: WorldState, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Ground-truth class for world points (..., 2), agents excluded.

    Returns (classes uint8, inactive_zone bool) - the latter only feeds the
    camera colouring (inactive zones stay visible but are not a BeV class).
    """
    cfg = world.cfg
    shape = pts.shape[:-1]
    s, lat = _project_batch(world.route, pts)
    s = s.reshape(-1)
    lat = lat.reshape(-1)
    lane = cfg.lane_width
    on_route = (s > 1e-6) & (s < world.route.length - 1e-6)
    road = on_route & (lat >= -1.5 * lane) & (lat <= 0.5 * lane)
    if world.island is not None:
        center, radius = world.island
        flat = pts.reshape(-1, 2)
        inside = ((flat - center) ** 2).sum(-1) < radius**2
        road &= ~inside
    cls = np.where(road, ROAD, BACKGROUND).astype(np.uint8)

    mw = cfg.marking_width / 2.0
    solid = (np.abs(lat - 0.5 * lane) < mw) | (np.abs(lat + 1.5 * lane) < mw)
    dash_phase = np.mod(s, cfg.center_dash_period) < cfg.center_dash_period * cfg.center_dash_fill
    dashed = (np.abs(lat + 0.5 * lane) < mw) & dash_phase
    marking = road & (solid | dashed)
    cls[marking] = MARKING

    inactive = np.zeros(len(s), dtype=bool)
    t = world.time
    for z in world.zones:
        in_zone = road & (s >= z.s0) & (s <= z.s0 + z.length) & (np.abs(lat) < lane / 2.0)
        if z.is_red(t):
            cls[in_zone] = RED_ZONE
        else:
            inactive |= in_zone
    return cls.reshape(shape), inactive.reshape(shape)


def render_bev_label(world: WorldState) -> np.ndarray:
    """(n_x, n_y) uint8 class map on the label grid, ego excluded."""
    centers_v = world.label_grid.cell_centers()
    centers_w = vehicle_to_world(world, centers_v.reshape(-1, 2))
    cls, _ = _classify_ground(world, centers_w)
    for ag in world.agents:
        if ag.kind == "vehicle":
            cls[_points_in_obb(centers_w, ag)] = VEHICLE
    for ag in world.agents:
        if ag.kind == "pedestrian":
            cls[_points_in_obb(centers_w, ag)] = PEDESTRIAN
    return cls.reshape(world.label_grid.shape)


def render_instance_targets(world: WorldState) -> tuple[np.ndarray, np.ndarray]:
    """Centre heatmap (1, n_x, n_y) and centroid offsets (2, n_x, n_y) in cells."""
    grid = world.label_grid
    nx, ny = grid.shape
    center = np.zeros((nx, ny), dtype=np.float32)
    offset = np.zeros((2, nx, ny), dtype=np.float32)
    centers_v = grid.cell_centers()
    centers_w = vehicle_to_world(world, centers_v.reshape(-1, 2))
    ii, jj = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    for ag in world.agents:
        if ag.kind != "vehicle":
            continue
        pos_v = world_to_vehicle(world, ag.pos())
        ci = (pos_v[0] - grid.origin[0]) / grid.resolution - 0.5
        cj = (pos_v[1] - grid.origin[1]) / grid.resolution - 0.5
        if not (-1 <= ci <= nx and -1 <= cj <= ny):
            continue
        blob = np.exp(-((ii - ci) ** 2 + (jj - cj) ** 2) / (2.0 * _CENTER_SIGMA_CELLS**2))
        center = np.maximum(center, blob.astype(np.float32))
        mask = _points_in_obb(centers_w, ag).reshape(nx, ny)
        offset[0][mask] = (ci - ii)[mask]
        offset[1][mask] = (cj - jj)[mask]
    return center[None], offset


def _camera_rays(world: WorldState) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel ray directions in the vehicle frame plus the camera origin."""
    key = "rays"
    if key not in world._ray_cache:
        cam = world.camera
        h, w = cam.image_size
        u = np.arange(w) + 0.5
        v = np.arange(h) + 0.5
        uu, vv = np.meshgrid(u, v)
        pix = np.stack([uu, vv, np.ones_like(uu)], axis=-1).reshape(-1, 3)
        rays_cam = pix @ np.linalg.inv(cam.intrinsics).T
        rays_veh = rays_cam @ cam.cam_to_vehicle[:3, :3].T
        world._ray_cache[key] = rays_veh
    return world._ray_cache[key], world.camera.position


def render_image(world: WorldState) -> np.ndarray:
    """(3, H, W) float32 camera frame in [0, 1], quantised to 8 bits."""
    cam = world.camera
    h, w = cam.image_size
    pal = world.palette
    rays_veh, cam_pos = _camera_rays(world)

    c, s = math.cos(world.ego_heading), math.sin(world.ego_heading)
    dirs = np.empty_like(rays_veh)
    dirs[:, 0] = rays_veh[:, 0] * c + rays_veh[:, 1] * s
    dirs[:, 1] = rays_veh[:, 0] * s - rays_veh[:, 1] * c
    dirs[:, 2] = rays_veh[:, 2]
    origin = np.array([
        world.ego_x + cam_pos[0] * c + cam_pos[1] * s,
        world.ego_y + cam_pos[0] * s - cam_pos[1] * c,
        cam_pos[2],
    ])

    img = np.zeros((h * w, 3), dtype=np.float64)
    below = dirs[:, 2] < -1e-6
    t = np.where(below, -origin[2] / np.where(below, dirs[:, 2], -1.0), np.inf)
    ground = origin[:2] + t[:, None] * dirs[:, :2]

    sky_mix = np.clip(dirs[:, 2] / 0.4, 0.0, 1.0)[:, None]
    sky = (1 - sky_mix) * np.array(pal["sky_horizon"]) + sky_mix * np.array(pal["sky_top"])
    img[~below] = sky[~below]

    if below.any():
        cls, inactive = _classify_ground(world, ground[below])
        colors = np.empty((below.sum(), 3))
        colors[:] = pal["terrain"]
        colors[cls == ROAD] = pal["road"]
        colors[cls == MARKING] = pal["marking"]
        colors[cls == RED_ZONE] = _ZONE_RED
        colors[inactive & (cls == ROAD)] = _ZONE_INACTIVE
        if world.island is not None:
            center, radius = world.island
            on_island = ((ground[below] - center) ** 2).sum(-1) < radius**2
            colors[on_island] = pal["island"]
        fog = np.clip(t[below] / 45.0, 0.0, 0.85)[:, None]
        sky_ref = np.array(pal["sky_horizon"])
        img[below] = (1 - fog) * colors + fog * sky_ref

    frame = img.reshape(h, w, 3).astype(np.float32)

    # boxes: agents and traffic-light poles, painter's order far to near
    boxes: list[tuple[float, np.ndarray, tuple]] = []
    ego = world.ego_pos()
    for ag in world.agents:
        color = _VEHICLE_COLORS[ag.color_idx] if ag.kind == "vehicle" else _PED_COLOR
        quad = ag.corners()
        dist = float(np.hypot(*(ag.pos() - ego)))
        boxes.append((dist, _box3d(quad, 0.0, ag.height), color))
    for z in world.zones:
        dist = float(np.hypot(*(z.pole_xy - ego)))
        post = _obb_corners(z.pole_xy[0], z.pole_xy[1], world.ego_heading, 0.18, 0.18)
        lamp = _obb_corners(z.pole_xy[0], z.pole_xy[1], world.ego_heading, 0.55, 0.55)
        boxes.append((dist, _box3d(post, 0.0, 2.1), _POLE_POST))
        boxes.append((dist - 1e-3, _box3d(lamp, 2.1, 2.9),
                      _POLE_RED if z.is_red(world.time) else _POLE_GREEN))

    boxes.sort(key=lambda b: -b[0])
    sky_ref = np.array(pal["sky_horizon"], dtype=np.float32)
    for dist, corners_w, color in boxes:
        corners_v = world_to_vehicle(world, corners_w)
        pix, depth = project_points(cam, corners_v)
        if depth.min() < 0.3:
            continue
        fog = float(np.clip(dist / 45.0, 0.0, 0.85))
        shade = 1.0 - 0.25 * min(dist / 30.0, 1.0)
        col = (1 - fog) * np.array(color, dtype=np.float32) * shade + fog * sky_ref
        hull = cv2.convexHull(np.round(pix * 16.0).astype(np.int32))
        cv2.fillConvexPoly(frame, hull, col.tolist(), lineType=cv2.LINE_8, shift=4)

    frame *= pal.get("brightness", 1.0)
    np.clip(frame, 0.0, 1.0, out=frame)
    frame = np.round(frame * 255.0) / 255.0  # match 8-bit storage exactly
    return frame.transpose(2, 0, 1).astype(np.float32)


def _box3d(quad: np.ndarray, z0: float, z1: float) -> np.ndarray:
    """(8, 3) corners of a vertical prism over a ground quad (4, 2)."""
    base = np.concatenate([quad, np.full((4, 1), z0)], axis=1)
    top = np.concatenate([quad, np.full((4, 1), z1)], axis=1)
    return np.concatenate([base, top], axis=0)


def render_route_map(world: WorldState) -> np.ndarray:
    """(1, 64, 64) float32 ego-frame sketch of the route ahead, in [0, 1]."""
    size = 64
    res = 0.5
    fwd_max = 24.0
    img = np.zeros((size, size), dtype=np.uint8)
    s_ego, _ = world.route.project(world.ego_pos())
    s_lo = max(0.0, float(s_ego) - 10.0)
    s_hi = min(world.route.length, float(s_ego) + 42.0)
    mask = (world.route.cum_s >= s_lo) & (world.route.cum_s <= s_hi)
    pts_w = world.route.pts[mask]
    if len(pts_w) >= 2:
        pts_v = world_to_vehicle(world, pts_w)
        cols = (pts_v[:, 1] + 16.0) / res
        rows = (fwd_max - pts_v[:, 0]) / res
        poly = np.stack([cols, rows], axis=1)
        cv2.polylines(img, [np.round(poly * 16).astype(np.int32)], isClosed=False,
                      color=255, thickness=2, lineType=cv2.LINE_8, shift=4)
    return (img.astype(np.float32) / 255.0)[None]


def observe(world: WorldState) -> ObservationFrame:
    """Render everything the model consumes at the current tick."""
    center, offset = render_instance_targets(world)
    return ObservationFrame(
        image=render_image(world),
        route=render_route_map(world),
        speed=float(world.ego_speed),
        action=np.zeros(2, dtype=np.float32),
        bev_label=render_bev_label(world),
        center=center,
        offset=offset,
    )


# ---------------------------------------------------------------------------
# episode recording


def run_expert_episode(cfg: RunConfig, seed: int, disturb: bool = True) -> EpisodeRecord:
    """Drive the scripted expert to completion and pack the stored frames."""
    world = build_world(cfg, seed)
    sim = cfg.sim
    stride = max(1, int(sim.record_stride))
    frames: list[ObservationFrame] = []
    rewards: list[float] = []
    progress: list[float] = []
    while not world.done:
        if disturb and world.rng.uniform() < sim.disturbance_prob:
            world.ego_heading += float(world.rng.uniform(-1, 1)) * sim.disturbance_heading
            kick = float(world.rng.uniform(-1, 1)) * sim.disturbance_lateral
            world.ego_x += kick * math.sin(world.ego_heading)
            world.ego_y -= kick * math.cos(world.ego_heading)
        record_now = world.tick % stride == 0
        frame = observe(world) if record_now else None
        action = expert_action(world)
        result = step(world, action)
        if frame is not None:
            frame.action = action.astype(np.float32)
            frames.append(frame)
            rewards.append(result.reward)
            progress.append(world.progress)

    tick_rate = 1.0 / sim.dt
    manifest = {
        "seed": seed,
        "n_frames": len(frames),
        "tick_rate_hz": tick_rate,
        "record_stride": stride,
        "stored_rate_hz": tick_rate / stride,
        "camera_intrinsics": world.camera.intrinsics.tolist(),
        "camera_to_vehicle": world.camera.cam_to_vehicle.tolist(),
        "depth_bins": world.camera.depth_bins.tolist(),
        "label_grid": {
            "shape": list(world.label_grid.shape),
            "resolution": world.label_grid.resolution,
            "origin": list(world.label_grid.origin),
        },
        "n_classes": RED_ZONE + 1,
        "template": world.template,
        "route_length": world.route.length,
        "done_reason": world.done_reason,
        "completion": min(1.0, world.progress / world.route.length),
        "infractions": [[t, k] for t, k in world.infractions],
    }
    arrays = {
        "images": np.stack([np.round(f.image * 255.0).astype(np.uint8) for f in frames]),
        "routes": np.stack([np.round(f.route * 255.0).astype(np.uint8) for f in frames]),
        "speeds": np.array([f.speed for f in frames], dtype=np.float32),
        "actions": np.stack([f.action for f in frames]).astype(np.float32),
        "bev_labels": np.stack([f.bev_label for f in frames]),
        "centers": np.stack([f.center for f in frames]).astype(np.float32),
        "offsets": np.stack([f.offset for f in frames]).astype(np.float32),
        "rewards": np.array(rewards, dtype=np.float32),
        "progress": np.array(progress, dtype=np.float32),
    }
    return EpisodeRecord(manifest=manifest, arrays=arrays)
