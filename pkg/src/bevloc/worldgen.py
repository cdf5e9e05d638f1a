"""Synthetic vector maps, rasterization and scenario synthesis.

A vector map is a list of stroked polylines with one of four element
classes (lane, curb, crosswalk, stopline); rasterization produces one
binary channel per class at a fixed metric resolution. All generation is
a pure function of the scenario seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .geometry import BevGrid, Pose2, cell_centers_local, compose, inverse

KLASSES = ("lane", "curb", "crosswalk", "stopline")
N_CLASSES = len(KLASSES)

FORMAT_VERSION = 1

FINE_TRANSLATION = 2.0          # meters
FINE_ROTATION_DEG = 2.0
RELOC_TRANSLATION_FULL = 30.0   # meters
RELOC_ROTATION_FULL_DEG = 30.0


@dataclass(frozen=True)
class MapElement:
    klass: str
    polyline: np.ndarray  # (N, 2) vertices in meters
    width: float

    def __post_init__(self):
        if self.klass not in KLASSES:
            raise ValueError(f"unknown element class {self.klass!r}")
        pl = np.asarray(self.polyline, dtype=np.float64)
        if pl.ndim != 2 or pl.shape[0] < 2 or pl.shape[1] != 2:
            raise ValueError("polyline must be (N>=2, 2)")
        if not self.width > 0:
            raise ValueError("width must be positive")
        object.__setattr__(self, "polyline", pl)


@dataclass
class VectorMap:
    elements: list
    bounds: tuple  # (xmin, ymin, xmax, ymax)
    junctions: list = field(default_factory=list)

    def check(self):
        xmin, ymin, xmax, ymax = self.bounds
        for el in self.elements:
            p = el.polyline
            if (
                p[:, 0].min() < xmin - 1e-9
                or p[:, 0].max() > xmax + 1e-9
                or p[:, 1].min() < ymin - 1e-9
                or p[:, 1].max() > ymax + 1e-9
            ):
                raise ValueError("polyline vertex outside map bounds")

    def contains(self, pose: Pose2) -> bool:
        xmin, ymin, xmax, ymax = self.bounds
        return xmin <= pose.x <= xmax and ymin <= pose.y <= ymax


@dataclass(frozen=True)
class ScenarioSpec:
    seed: int
    map_extent: float = 80.0
    window_size: float = 8.0
    resolution: float = 0.25
    perturb_mode: str = "fine"
    occlusion_fraction: float = 0.0
    noise_sigma: float = 0.0
    # desk-scale relocalization envelope; the full +-30m/+-30deg regime
    # stays available behind full_reloc
    reloc_translation: float = 8.0
    reloc_rotation_deg: float = 10.0
    full_reloc: bool = False

    def __post_init__(self):
        if self.perturb_mode not in ("fine", "reloc"):
            raise ValueError("perturb_mode must be 'fine' or 'reloc'")
        if not 0.0 <= self.occlusion_fraction <= 1.0:
            raise ValueError("occlusion_fraction must be in [0, 1]")


# --------------------------------------------------------------------------
# map generation
# --------------------------------------------------------------------------


def _clip_polyline(poly: np.ndarray, bounds) -> list:
    """Clip a polyline to an axis-aligned rectangle; returns sub-polylines."""
    xmin, ymin, xmax, ymax = bounds

    def inside(p):
        return xmin <= p[0] <= xmax and ymin <= p[1] <= ymax

    def clip_segment(a, b):
        # Liang-Barsky
        d = b - a
        t0, t1 = 0.0, 1.0
        for p, q in (
            (-d[0], a[0] - xmin),
            (d[0], xmax - a[0]),
            (-d[1], a[1] - ymin),
            (d[1], ymax - a[1]),
        ):
            if p == 0.0:
                if q < 0:
                    return None
                continue
            r = q / p
            if p < 0:
                if r > t1:
                    return None
                t0 = max(t0, r)
            else:
                if r < t0:
                    return None
                t1 = min(t1, r)
        if t0 > t1:
            return None
        return a + t0 * d, a + t1 * d

    pieces, current = [], []
    for i in range(len(poly) - 1):
        seg = clip_segment(poly[i].astype(float), poly[i + 1].astype(float))
        if seg is None:
            if len(current) >= 2:
                pieces.append(np.array(current))
            current = []
            continue
        a, b = seg
        if not current:
            current = [a, b]
        elif np.allclose(current[-1], a, atol=1e-12):
            current.append(b)
        else:
            if len(current) >= 2:
                pieces.append(np.array(current))
            current = [a, b]
        if not inside(poly[i + 1]):
            if len(current) >= 2:
                pieces.append(np.array(current))
            current = []
    if len(current) >= 2:
        pieces.append(np.array(current))
    return pieces


def _road_elements(center: np.ndarray) -> tuple:
    """Lane lines and curbs for a road centerline; returns (elements, frame).

    The frame gives (points, unit tangents, unit normals) along the
    centerline, used later for junction furniture.
    """
    d = np.gradient(center, axis=0)
    norm = np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-12)
    tang = d / norm
    normal = np.stack([-tang[:, 1], tang[:, 0]], axis=1)

    elements = []
    half_lane = 1.75
    half_road = 3.3
    for off, klass, width in (
        (-half_lane, "lane", 0.45),
        (half_lane, "lane", 0.45),
        (-half_road, "curb", 0.5),
        (half_road, "curb", 0.5),
    ):
        elements.append((klass, center + off * normal, width))
    return elements, (center, tang, normal)


def _curved_centerline(p0, heading, length, curvature, step=2.0):
    """Constant-curvature arc sampled every `step` meters."""
    n = max(2, int(round(length / step)) + 1)
    s = np.linspace(0.0, length, n)
    if abs(curvature) < 1e-9:
        dx = np.cos(heading) * s
        dy = np.sin(heading) * s
    else:
        dx = (np.sin(heading + curvature * s) - np.sin(heading)) / curvature
        dy = (np.cos(heading) - np.cos(heading + curvature * s)) / curvature
    return np.stack([p0[0] + dx, p0[1] + dy], axis=1)


def _segment_intersections(a: np.ndarray, b: np.ndarray) -> list:
    """All intersection points between two polylines."""
    hits = []
    for i in range(len(a) - 1):
        p, r = a[i], a[i + 1] - a[i]
        for j in range(len(b) - 1):
            q, s = b[j], b[j + 1] - b[j]
            denom = r[0] * s[1] - r[1] * s[0]
            if abs(denom) < 1e-12:
                continue
            qp = q - p
            t = (qp[0] * s[1] - qp[1] * s[0]) / denom
            u = (qp[0] * r[1] - qp[1] * r[0]) / denom
            if 0.0 <= t <= 1.0 and 0.0 <= u <= 1.0:
                hits.append(p + t * r)
    return hits


def _junction_furniture(point, tang) -> list:
    """Crosswalk bands and stoplines around a junction on one road."""
    normal = np.array([-tang[1], tang[0]])
    out = []
    for side in (-1.0, 1.0):
        base = point + side * 4.5 * tang
        out.append(
            ("crosswalk", np.stack([base - 3.3 * normal, base + 3.3 * normal]), 1.6)
        )
        stop = point + side * 6.0 * tang
        out.append(
            ("stopline", np.stack([stop - 3.3 * normal, stop + 3.3 * normal]), 0.8)
        )
    return out


def generate_map(spec: ScenarioSpec) -> VectorMap:
    """Deterministic synthetic road network with straights, curves and
    at least one junction per 200m x 200m of extent."""
    extent = float(spec.map_extent)
    if extent <= 0.0:
        return VectorMap([], (0.0, 0.0, 0.0, 0.0))
    half = extent / 2.0
    bounds = (-half, -half, half, half)
    rng = np.random.default_rng(np.random.SeedSequence((int(spec.seed), 0x6D61)))

    margin = extent  # overshoot; clipped later
    n_target = max(1, math.ceil((extent / 200.0) ** 2))

    centerlines = []
    # one north-south trunk road, gently curved
    x0 = rng.uniform(-extent / 8, extent / 8)
    curv = rng.uniform(-1.0, 1.0) * min(0.004, 2.0 / extent)
    head = math.pi / 2 + rng.uniform(-0.1, 0.1)
    trunk = _curved_centerline(
        np.array([x0 - margin * math.cos(head), -half - 4.0]),
        head,
        extent + margin,
        curv,
    )
    centerlines.append(trunk)

    # east-west crossings (straight or curved), one per target junction
    ys = np.linspace(-half * 0.5, half * 0.5, n_target) if n_target > 1 else [
        rng.uniform(-half * 0.3, half * 0.3)
    ]
    for k, yc in enumerate(ys):
        h = rng.uniform(-0.12, 0.12)
        c = rng.uniform(-1.0, 1.0) * min(0.003, 1.5 / extent) if k % 2 else 0.0
        cl = _curved_centerline(
            np.array([-half - 4.0, yc + rng.uniform(-2, 2)]), h, extent + 8.0, c
        )
        centerlines.append(cl)

    junctions = []
    for cl in centerlines[1:]:
        junctions.extend(_segment_intersections(centerlines[0], cl))

    raw_elements = []
    frames = []
    for cl in centerlines:
        els, frame = _road_elements(cl)
        raw_elements.extend(els)
        frames.append(frame)

    for pt in junctions:
        for center, tang, _ in frames:
            d = np.linalg.norm(center - pt[None, :], axis=1)
            i = int(np.argmin(d))
            if d[i] < 3.0:
                raw_elements.extend(_junction_furniture(pt, tang[i]))

    elements = []
    for klass, poly, width in raw_elements:
        for piece in _clip_polyline(poly, bounds):
            elements.append(MapElement(klass, piece, width))

    junctions_in = [
        (float(p[0]), float(p[1]))
        for p in junctions
        if bounds[0] <= p[0] <= bounds[2] and bounds[1] <= p[1] <= bounds[3]
    ]
    vmap = VectorMap(elements, bounds, junctions_in)
    vmap.check()
    return vmap


def straight_corridor_map(length: float, cluster_ys, half_width: float = 12.0) -> VectorMap:
    """A single straight north-south road with crossing-feature clusters at
    the given longitudinal positions. Windows far from every cluster see
    only features parallel to the road (longitudinally degenerate)."""
    bounds = (-half_width, -10.0, half_width, length + 10.0)
    ys = np.linspace(-10.0, length + 10.0, max(2, int(length / 2)))
    center = np.stack([np.zeros_like(ys), ys], axis=1)
    elements = []
    for off, klass, width in (
        (-1.75, "lane", 0.45),
        (1.75, "lane", 0.45),
        (-3.3, "curb", 0.5),
        (3.3, "curb", 0.5),
    ):
        elements.append(
            MapElement(klass, np.stack([center[:, 0] + off, center[:, 1]], axis=1), width)
        )
    for yc in cluster_ys:
        elements.append(
            MapElement("crosswalk", np.array([[-3.3, yc], [3.3, yc]]), 1.6)
        )
        elements.append(
            MapElement("stopline", np.array([[-3.3, yc - 2.0], [3.3, yc - 2.0]]), 0.8)
        )
    vmap = VectorMap(elements, bounds, [])
    vmap.check()
    return vmap


# --------------------------------------------------------------------------
# rasterization
# --------------------------------------------------------------------------


def rasterize(m: VectorMap, center: Pose2, window: float, res: float) -> BevGrid:
    """One binary channel per element class; a cell is set when the distance
    from its center to the element polyline is at most width/2."""
    if res <= 0 or window <= 0:
        raise ValueError("window and resolution must be positive")
    n = int(round(window / res))
    out = np.zeros((n, n, N_CLASSES), dtype=np.float64)

    cphi, sphi = math.cos(center.phi), math.sin(center.phi)
    rot = np.array([[cphi, sphi], [-sphi, cphi]])  # world -> local

    for el in m.elements:
        ch = KLASSES.index(el.klass)
        local = (el.polyline - np.array([center.x, center.y])) @ rot.T
        half_w = el.width / 2.0
        for i in range(len(local) - 1):
            a, b = local[i], local[i + 1]
            _mark_segment(out[:, :, ch], a, b, half_w, n, res)
    return BevGrid(out, res, center)


def _mark_segment(channel, a, b, half_w, n, res):
    pad = half_w + res
    xmin = min(a[0], b[0]) - pad
    xmax = max(a[0], b[0]) + pad
    ymin = min(a[1], b[1]) - pad
    ymax = max(a[1], b[1]) + pad
    half_span = (n - 1) / 2.0

    c0 = max(0, int(math.floor(xmin / res + half_span)))
    c1 = min(n - 1, int(math.ceil(xmax / res + half_span)))
    r0 = max(0, int(math.floor(half_span - ymax / res)))
    r1 = min(n - 1, int(math.ceil(half_span - ymin / res)))
    if c0 > c1 or r0 > r1:
        return

    cols = np.arange(c0, c1 + 1)
    rows = np.arange(r0, r1 + 1)
    x = (cols[None, :] - half_span) * res
    y = (half_span - rows[:, None]) * res

    d = b - a
    len2 = d[0] * d[0] + d[1] * d[1]
    if len2 < 1e-18:
        dist2 = (x - a[0]) ** 2 + (y - a[1]) ** 2
    else:
        t = ((x - a[0]) * d[0] + (y - a[1]) * d[1]) / len2
        t = np.clip(t, 0.0, 1.0)
        dist2 = (x - (a[0] + t * d[0])) ** 2 + (y - (a[1] + t * d[1])) ** 2
    hit = dist2 <= half_w * half_w
    channel[r0 : r1 + 1, c0 : c1 + 1][hit] = 1.0


def point_segment_distance(p, a, b) -> float:
    """Reference point-to-segment distance (used by tests as an oracle)."""
    p, a, b = (np.asarray(v, dtype=np.float64) for v in (p, a, b))
    d = b - a
    len2 = float(d @ d)
    if len2 < 1e-18:
        return float(np.linalg.norm(p - a))
    t = float(np.clip((p - a) @ d / len2, 0.0, 1.0))
    return float(np.linalg.norm(p - (a + t * d)))


# --------------------------------------------------------------------------
# perturbations and observations
# --------------------------------------------------------------------------


def sample_perturbation(
    mode: str,
    rng,
    *,
    reloc_translation: float = 8.0,
    reloc_rotation_deg: float = 10.0,
    full_reloc: bool = False,
) -> Pose2:
    """Uniform pose perturbation for the two task regimes.

    fine: +-2 m, +-2 deg. reloc: +-30 m / +-30 deg when full_reloc, else
    the desk-scale envelope given by the keyword overrides.
    """
    if mode == "fine":
        t, r = FINE_TRANSLATION, math.radians(FINE_ROTATION_DEG)
    elif mode == "reloc":
        if full_reloc:
            t, r = RELOC_TRANSLATION_FULL, math.radians(RELOC_ROTATION_FULL_DEG)
        else:
            t, r = reloc_translation, math.radians(reloc_rotation_deg)
    else:
        raise ValueError(f"unknown perturbation mode {mode!r}")
    u = rng.random(3) * 2.0 - 1.0
    return Pose2(u[0] * t, u[1] * t, u[2] * r)


def perturbation_bounds(spec: ScenarioSpec) -> dict:
    """Envelope actually used for a spec, recorded in scenario metadata."""
    if spec.perturb_mode == "fine":
        return {"translation_m": FINE_TRANSLATION, "rotation_deg": FINE_ROTATION_DEG}
    if spec.full_reloc:
        return {
            "translation_m": RELOC_TRANSLATION_FULL,
            "rotation_deg": RELOC_ROTATION_FULL_DEG,
        }
    return {
        "translation_m": spec.reloc_translation,
        "rotation_deg": spec.reloc_rotation_deg,
    }


def _wedge_mask(n, heading, half_angle, rng_unused=None):
    rows = np.arange(n)
    x = (np.arange(n)[None, :] - (n - 1) / 2.0)
    y = ((n - 1) / 2.0 - rows[:, None])
    ang = np.arctan2(y, x)
    d = np.arctan2(np.sin(ang - heading), np.cos(ang - heading))
    return np.abs(d) <= half_angle


def _box_mask(n, cx, cy, hx, hy):
    rows = np.arange(n)
    x = np.arange(n)[None, :] - (n - 1) / 2.0
    y = (n - 1) / 2.0 - rows[:, None]
    return (np.abs(x - cx) <= hx) & (np.abs(y - cy) <= hy)


def make_occlusion_mask(n: int, fraction: float, rng) -> np.ndarray:
    """Union of ego-centered sector wedges and random boxes whose covered
    cell fraction lands within +-0.05 of the target."""
    mask = np.zeros((n, n), dtype=bool)
    if fraction <= 0.0:
        return mask
    if fraction >= 0.999:
        return np.ones((n, n), dtype=bool)
    total = n * n
    for attempt in range(64):
        frac = mask.sum() / total
        if frac >= fraction - 0.01:
            break
        use_wedge = attempt % 2 == 0
        if use_wedge:
            heading = rng.uniform(0, 2 * math.pi)
            half = rng.uniform(math.radians(10), math.radians(55))
            new = _wedge_mask(n, heading, half)
        else:
            cx, cy = rng.uniform(-n / 2, n / 2, 2)
            hx, hy = rng.uniform(0.05 * n, 0.2 * n, 2)
            new = _box_mask(n, cx, cy, hx, hy)
        cand = mask | new
        if cand.sum() / total > fraction + 0.04:
            # shrink the occluder until the union lands inside the band
            lo, hi = 0.0, 1.0
            for _ in range(40):
                mid = 0.5 * (lo + hi)
                if use_wedge:
                    new = _wedge_mask(n, heading, half * mid)
                else:
                    new = _box_mask(n, cx, cy, hx * mid, hy * mid)
                f = (mask | new).sum() / total
                if f > fraction + 0.02:
                    hi = mid
                elif f < fraction - 0.02:
                    lo = mid
                else:
                    break
            cand = mask | new
        mask = cand
        if mask.sum() / total >= fraction - 0.01:
            break
    return mask


def synthesize_observation(
    m: VectorMap, gt_pose: Pose2, spec: ScenarioSpec, rng
) -> tuple:
    """Observation grid with occlusion and noise, its occlusion mask, and
    the clean rasterization at the ground-truth pose."""
    if not m.contains(gt_pose):
        raise ValueError("gt_pose outside map bounds")
    clean = rasterize(m, gt_pose, spec.window_size, spec.resolution)
    n = clean.height
    occ = make_occlusion_mask(n, spec.occlusion_fraction, rng)
    obs_vals = clean.values * (~occ)[:, :, None]
    if spec.noise_sigma > 0.0:
        obs_vals = obs_vals + rng.normal(0.0, spec.noise_sigma, obs_vals.shape)
        obs_vals = np.clip(obs_vals, 0.0, 1.0)
    obs = BevGrid(obs_vals, clean.resolution, gt_pose)
    occ_grid = BevGrid(occ.astype(np.float64)[:, :, None], clean.resolution, gt_pose)
    return obs, occ_grid, clean


# --------------------------------------------------------------------------
# scenarios
# --------------------------------------------------------------------------


@dataclass
class Scenario:
    spec: ScenarioSpec
    vmap: VectorMap
    gt_pose: Pose2
    init_pose: Pose2
    offset: Pose2  # init_pose = compose(gt_pose, offset); registration target
    index: int = 0

    def observation_rng(self):
        return np.random.default_rng(
            np.random.SeedSequence((int(self.spec.seed), int(self.index), 0x0B5))
        )


def make_scenario(spec: ScenarioSpec, index: int = 0, near_junction: bool = True) -> Scenario:
    """Deterministic scenario: map, ground-truth pose, perturbed initial pose."""
    vmap = generate_map(spec)
    if not vmap.elements:
        raise ValueError("cannot place a scenario on an empty map")
    rng_pose = np.random.default_rng(
        np.random.SeedSequence((int(spec.seed), int(index), 0x905E))
    )
    half = spec.map_extent / 2.0
    keepout = spec.window_size  # keep the window inside the map
    if near_junction and vmap.junctions:
        jx, jy = vmap.junctions[int(rng_pose.integers(len(vmap.junctions)))]
        gx = jx + rng_pose.uniform(-3.0, 3.0)
        gy = jy + rng_pose.uniform(-3.0, 3.0)
    else:
        gx, gy = rng_pose.uniform(-half + keepout, half - keepout, 2)
    lim = half - keepout
    gx, gy = float(np.clip(gx, -lim, lim)), float(np.clip(gy, -lim, lim))
    gphi = rng_pose.uniform(-math.pi, math.pi)
    gt = Pose2(gx, gy, gphi)

    rng_perturb = np.random.default_rng(
        np.random.SeedSequence((int(spec.seed), int(index), 0x9E27))
    )
    offset = sample_perturbation(
        spec.perturb_mode,
        rng_perturb,
        reloc_translation=spec.reloc_translation,
        reloc_rotation_deg=spec.reloc_rotation_deg,
        full_reloc=spec.full_reloc,
    )
    init = compose(gt, offset)
    return Scenario(spec, vmap, gt, init, offset, index)


def scenario_grids(scn: Scenario) -> tuple:
    """(obs, occ, clean, map_window) grids for a scenario."""
    obs, occ, clean = synthesize_observation(
        scn.vmap, scn.gt_pose, scn.spec, scn.observation_rng()
    )
    map_window = rasterize(
        scn.vmap, scn.init_pose, scn.spec.window_size, scn.spec.resolution
    )
    return obs, occ, clean, map_window


def make_scenario_batch(spec: ScenarioSpec, count: int, start_index: int = 0) -> list:
    return [make_scenario(spec, index=start_index + i) for i in range(count)]


# --------------------------------------------------------------------------
# scenario file format (versioned JSON, lossless round-trip)
# --------------------------------------------------------------------------


def _pose_to_list(p: Pose2):
    return [p.x, p.y, p.phi]


def scenario_to_dict(scn: Scenario) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "kind": "scenario",
        "spec": asdict(scn.spec),
        "perturbation_bounds": perturbation_bounds(scn.spec),
        "map": {
            "bounds": list(scn.vmap.bounds),
            "junctions": [list(j) for j in scn.vmap.junctions],
            "elements": [
                {
                    "klass": el.klass,
                    "width": el.width,
                    "polyline": el.polyline.tolist(),
                }
                for el in scn.vmap.elements
            ],
        },
        "gt_pose": _pose_to_list(scn.gt_pose),
        "init_pose": _pose_to_list(scn.init_pose),
        "offset": _pose_to_list(scn.offset),
        "index": scn.index,
    }


def scenario_from_dict(d: dict) -> Scenario:
    if d.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported scenario format_version {d.get('format_version')!r}")
    spec = ScenarioSpec(**d["spec"])
    vmap = VectorMap(
        [
            MapElement(e["klass"], np.array(e["polyline"]), e["width"])
            for e in d["map"]["elements"]
        ],
        tuple(d["map"]["bounds"]),
        [tuple(j) for j in d["map"]["junctions"]],
    )
    return Scenario(
        spec,
        vmap,
        Pose2(*d["gt_pose"]),
        Pose2(*d["init_pose"]),
        Pose2(*d["offset"]),
        d.get("index", 0),
    )


def save_scenario(scn: Scenario, path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(scenario_to_dict(scn), f, sort_keys=True, indent=1)
        f.write("\n")


def load_scenario(path) -> Scenario:
    with open(path, "r", encoding="utf-8") as f:
        return scenario_from_dict(json.load(f))
