"""Procedural multi-object scenes and rigid-motion flow pairs.

Scenes pack 3-6 procedural shape primitives (sphere, box, cylinder, torus,
cone surfaces, sampled uniformly by surface area) inside a sphere-shaped
container, with a minimum separation between object centers. Pairs apply
an independent random rigid motion to every object; the second cloud is an
independent resampling of the same surfaces, so correspondence is only
through geometry, never through point identity.

On-disk formats: the "FPCP/1" pair format and a line-oriented key=value
manifest, both documented in the writer docstrings.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, GenerationError, InvalidArgumentError
from .geometry import PointCloud

SHAPE_KINDS = ("sphere", "box", "cylinder", "torus", "cone")


@dataclass
class SceneSpec:
    """Generation parameters for one multi-object scene."""

    object_count_range: tuple = (3, 6)
    container_radius: float = 3.0
    object_radius: float = 1.2
    min_separation: float = 2.0
    points_per_scene: int = 4096
    seed: int = 0

    def __post_init__(self):
        if self.min_separation <= 0 or self.object_radius <= 0:
            raise InvalidArgumentError("separation and object radius must be positive")
        lo, hi = self.object_count_range
        if lo < 1 or hi < lo:
            raise InvalidArgumentError("bad object count range")
        if self.points_per_scene < 1:
            raise InvalidArgumentError("points_per_scene must be >= 1")


@dataclass
class SceneObject:
    """Recipe for one placed primitive; enough to resample its surface."""

    kind: str
    shape_params: dict
    center: np.ndarray
    rotation: np.ndarray   # 3x3
    scale: float
    point_count: int


@dataclass
class Scene:
    """A labeled cloud plus the per-object recipes that produced it."""

    cloud: PointCloud
    objects: list
    spec: SceneSpec
    seed: int


@dataclass
class RigidMotion:
    rotation: np.ndarray     # 3x3, about the object center
    translation: np.ndarray  # (3,)

    def apply(self, points: np.ndarray, center: np.ndarray) -> np.ndarray:
        return (points - center) @ self.rotation.T + center + self.translation


@dataclass
class ScenePair:
    """Two frames of a scene with ground-truth flow and existence mask."""

    cloud1: PointCloud
    cloud2: PointCloud
    gt_flow: np.ndarray
    gt_mask: np.ndarray
    transforms: list | None
    seed: int


# ---------------------------------------------------------------------------
# primitive surface samplers (unit scale: the shape fits in the unit sphere)


def _sample_sphere(n, rng, params):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v


def _sample_box(n, rng, params):
    hx, hy, hz = params["half_extents"]
    areas = np.array([hy * hz, hx * hz, hx * hy]) * 8.0  # pairs of faces
    face_axis = rng.choice(3, size=n, p=areas / areas.sum())
    sign = rng.choice([-1.0, 1.0], size=n)
    u = rng.uniform(-1, 1, size=n)
    v = rng.uniform(-1, 1, size=n)
    half = np.array([hx, hy, hz])
    pts = np.empty((n, 3))
    for axis in range(3):
        mask = face_axis == axis
        others = [a for a in range(3) if a != axis]
        pts[mask, axis] = sign[mask] * half[axis]
        pts[mask, others[0]] = u[mask] * half[others[0]]
        pts[mask, others[1]] = v[mask] * half[others[1]]
    return pts


def _sample_cylinder(n, rng, params):
    a, h = params["radius"], params["half_height"]
    side_area = 2 * np.pi * a * (2 * h)
    cap_area = np.pi * a * a
    total = side_area + 2 * cap_area
    which = rng.uniform(size=n) * total
    theta = rng.uniform(0, 2 * np.pi, size=n)
    pts = np.empty((n, 3))
    side = which < side_area
    pts[side, 0] = a * np.cos(theta[side])
    pts[side, 1] = a * np.sin(theta[side])
    pts[side, 2] = rng.uniform(-h, h, size=int(side.sum()))
    cap = ~side
    rad = a * np.sqrt(rng.uniform(size=int(cap.sum())))
    top = which[cap] >= side_area + cap_area
    pts[cap, 0] = rad * np.cos(theta[cap])
    pts[cap, 1] = rad * np.sin(theta[cap])
    pts[cap, 2] = np.where(top, h, -h)
    return pts


def _sample_torus(n, rng, params):
    big, small = params["major_radius"], params["minor_radius"]
    pts = np.empty((n, 3))
    filled = 0
    while filled < n:
        m = (n - filled) * 2 + 8
        u = rng.uniform(0, 2 * np.pi, size=m)   # around the tube center line
        v = rng.uniform(0, 2 * np.pi, size=m)   # around the tube
        # area element is proportional to big + small*cos(v)
        keep = rng.uniform(size=m) < (big + small * np.cos(v)) / (big + small)
        u, v = u[keep], v[keep]
        take = min(len(u), n - filled)
        ring = big + small * np.cos(v[:take])
        pts[filled : filled + take, 0] = ring * np.cos(u[:take])
        pts[filled : filled + take, 1] = ring * np.sin(u[:take])
        pts[filled : filled + take, 2] = small * np.sin(v[:take])
        filled += take
    return pts


def _sample_cone(n, rng, params):
    a, h = params["base_radius"], params["height"]  # apex at +h/2, base at -h/2
    slant = np.sqrt(a * a + h * h)
    lateral = np.pi * a * slant
    base = np.pi * a * a
    which = rng.uniform(size=n) * (lateral + base)
    theta = rng.uniform(0, 2 * np.pi, size=n)
    pts = np.empty((n, 3))
    lat = which < lateral
    t = np.sqrt(rng.uniform(size=int(lat.sum())))  # distance fraction from apex
    pts[lat, 0] = t * a * np.cos(theta[lat])
    pts[lat, 1] = t * a * np.sin(theta[lat])
    pts[lat, 2] = h / 2 - t * h
    bot = ~lat
    rad = a * np.sqrt(rng.uniform(size=int(bot.sum())))
    pts[bot, 0] = rad * np.cos(theta[bot])
    pts[bot, 1] = rad * np.sin(theta[bot])
    pts[bot, 2] = -h / 2
    return pts


_SAMPLERS = {
    "sphere": _sample_sphere,
    "box": _sample_box,
    "cylinder": _sample_cylinder,
    "torus": _sample_torus,
    "cone": _sample_cone,
}


def _shape_params(kind: str, rng) -> dict:
    """Random shape parameters, normalized so the surface fits in the unit sphere."""
    if kind == "sphere":
        return {}
    if kind == "box":
        h = rng.uniform(0.4, 1.0, size=3)
        h /= np.linalg.norm(h)
        return {"half_extents": h.tolist()}
    if kind == "cylinder":
        a = rng.uniform(0.3, 0.8)
        h = np.sqrt(max(1.0 - a * a, 0.05))
        return {"radius": float(a), "half_height": float(h)}
    if kind == "torus":
        small = rng.uniform(0.15, 0.35)
        return {"major_radius": float(1.0 - small), "minor_radius": float(small)}
    if kind == "cone":
        a = rng.uniform(0.4, 0.8)
        h = 2 * np.sqrt(max(1.0 - a * a, 0.05))
        return {"base_radius": float(a), "height": float(h)}
    raise InvalidArgumentError(f"unknown shape kind {kind!r}")


def _random_rotation(rng) -> np.ndarray:
    """Uniform random rotation via QR of a Gaussian matrix."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def _axis_angle_rotation(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = axis / np.linalg.norm(axis)
    x, y, z = axis
    c, s = np.cos(angle), np.sin(angle)
    cc = 1 - c
    return np.array([
        [c + x * x * cc, x * y * cc - z * s, x * z * cc + y * s],
        [y * x * cc + z * s, c + y * y * cc, y * z * cc - x * s],
        [z * x * cc - y * s, z * y * cc + x * s, c + z * z * cc],
    ])


def _sample_object_surface(obj: SceneObject, n: int, rng) -> np.ndarray:
    unit = _SAMPLERS[obj.kind](n, rng, obj.shape_params)
    return (unit * obj.scale) @ obj.rotation.T + obj.center


# ---------------------------------------------------------------------------


def generate_scene(spec: SceneSpec) -> Scene:
    """Pack labeled primitives into the container; deterministic in the seed."""
    rng = np.random.default_rng(spec.seed)
    lo, hi = spec.object_count_range
    count = int(rng.integers(lo, hi + 1))

    centers = []
    attempts = 0
    while len(centers) < count:
        if attempts > 200 * count:
            raise GenerationError(
                f"could not place {count} centers with separation "
                f">= {spec.min_separation} inside radius {spec.container_radius}"
            )
        attempts += 1
        c = rng.uniform(-1, 1, size=3) * spec.container_radius
        if np.linalg.norm(c) > spec.container_radius:
            continue
        if all(np.linalg.norm(c - p) >= spec.min_separation for p in centers):
            centers.append(c)

    counts = np.full(count, spec.points_per_scene // count)
    counts[: spec.points_per_scene % count] += 1

    objects, chunks, labels = [], [], []
    for i in range(count):
        kind = SHAPE_KINDS[int(rng.integers(len(SHAPE_KINDS)))]
        obj = SceneObject(
            kind=kind,
            shape_params=_shape_params(kind, rng),
            center=centers[i],
            rotation=_random_rotation(rng),
            scale=spec.object_radius,
            point_count=int(counts[i]),
        )
        objects.append(obj)
        chunks.append(_sample_object_surface(obj, obj.point_count, rng))
        labels.append(np.full(obj.point_count, i, dtype=np.int64))
    cloud = PointCloud(points=np.concatenate(chunks), labels=np.concatenate(labels))
    return Scene(cloud=cloud, objects=objects, spec=spec, seed=spec.seed)


def generate_pair(scene: Scene, motion_scale: float, seed: int, *,
                  dropout_prob: float = 0.1, max_rotation_deg: float = 30.0) -> ScenePair:
    """Rigid-motion frame pair with ground-truth flow and existence mask.

    Every object moves by an independent rotation (bounded angle, about its
    center) plus a translation with magnitude uniform in [0, motion_scale].
    The second frame resamples each surviving object surface independently
    and drops points that leave the container region; the mask is false for
    first-frame points whose warped position exits that region or whose
    object was randomly occluded.
    """
    rng = np.random.default_rng(seed)
    spec = scene.spec
    bound = spec.container_radius + spec.object_radius

    motions = []
    for _ in scene.objects:
        if motion_scale > 0:
            angle = np.deg2rad(rng.uniform(0, max_rotation_deg))
            axis = rng.normal(size=3)
            rot = _axis_angle_rotation(axis, angle)
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            trans = direction * rng.uniform(0, motion_scale)
        else:
            rot = np.eye(3)
            trans = np.zeros(3)
        motions.append(RigidMotion(rotation=rot, translation=trans))
    dropped = (rng.uniform(size=len(scene.objects)) < dropout_prob) if dropout_prob > 0 else \
        np.zeros(len(scene.objects), dtype=bool)

    # ground truth on frame 1
    pts1 = scene.cloud.points
    labels1 = scene.cloud.labels
    gt_flow = np.empty_like(pts1)
    for i, (obj, mot) in enumerate(zip(scene.objects, motions)):
        sel = labels1 == i
        gt_flow[sel] = mot.apply(pts1[sel], obj.center) - pts1[sel]
    warped = pts1 + gt_flow
    gt_mask = (np.linalg.norm(warped, axis=1) <= bound) & ~dropped[labels1]

    # frame 2: independent resampling, transformed, clipped to the container
    chunks, labels2 = [], []
    for i, (obj, mot) in enumerate(zip(scene.objects, motions)):
        if dropped[i]:
            continue
        fresh = _sample_object_surface(obj, obj.point_count, rng)
        moved = mot.apply(fresh, obj.center)
        keep = np.linalg.norm(moved, axis=1) <= bound
        if keep.any():
            chunks.append(moved[keep])
            labels2.append(np.full(int(keep.sum()), i, dtype=np.int64))
    if not chunks:
        raise GenerationError("no points survived in the second frame")
    cloud2 = PointCloud(points=np.concatenate(chunks), labels=np.concatenate(labels2))
    return ScenePair(
        cloud1=scene.cloud,
        cloud2=cloud2,
        gt_flow=gt_flow,
        gt_mask=gt_mask,
        transforms=motions,
        seed=seed,
    )


def random_subsample(pair: ScenePair, n: int, seed: int) -> ScenePair:
    """Uniform random pick of n points from each frame (without replacement)."""
    if n > len(pair.cloud1) or n > len(pair.cloud2):
        raise InvalidArgumentError("subsample larger than the source clouds")
    rng = np.random.default_rng(seed)
    i1 = rng.choice(len(pair.cloud1), size=n, replace=False)
    i2 = rng.choice(len(pair.cloud2), size=n, replace=False)
    c1 = pair.cloud1
    c2 = pair.cloud2
    return ScenePair(
        cloud1=PointCloud(points=c1.points[i1],
                          labels=None if c1.labels is None else c1.labels[i1]),
        cloud2=PointCloud(points=c2.points[i2],
                          labels=None if c2.labels is None else c2.labels[i2]),
        gt_flow=pair.gt_flow[i1],
        gt_mask=pair.gt_mask[i1],
        transforms=pair.transforms,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# FPCP/1 pair format


def write_pair(path, pair: ScenePair, spec_echo: str = "") -> None:
    """Serialize a pair in the FPCP/1 text format.

    Layout (all reals at 9 significant digits):

        FPCP 1
        seed <int>
        spec <free-form echo, may be empty>
        cloud1 <N>           then N lines: x y z label
        cloud2 <M>           then M lines: x y z label
        flow <N>             then N lines: fx fy fz
        mask <N>             then N lines: 0 or 1
    """
    lines = ["FPCP 1", f"seed {pair.seed}", f"spec {spec_echo}"]
    lab1 = pair.cloud1.labels if pair.cloud1.labels is not None else \
        np.zeros(len(pair.cloud1), dtype=np.int64)
    lab2 = pair.cloud2.labels if pair.cloud2.labels is not None else \
        np.zeros(len(pair.cloud2), dtype=np.int64)
    lines.append(f"cloud1 {len(pair.cloud1)}")
    for p, l in zip(pair.cloud1.points, lab1):
        lines.append(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g} {l}")
    lines.append(f"cloud2 {len(pair.cloud2)}")
    for p, l in zip(pair.cloud2.points, lab2):
        lines.append(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g} {l}")
    lines.append(f"flow {len(pair.gt_flow)}")
    for fvec in pair.gt_flow:
        lines.append(f"{fvec[0]:.9g} {fvec[1]:.9g} {fvec[2]:.9g}")
    lines.append(f"mask {len(pair.gt_mask)}")
    for mv in pair.gt_mask:
        lines.append("1" if mv else "0")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


class _LineReader:
    def __init__(self, lines):
        self.lines = lines
        self.pos = 0

    def next(self, what: str) -> str:
        if self.pos >= len(self.lines):
            raise FormatError(f"unexpected end of file, expected {what}",
                              line=self.pos + 1)
        line = self.lines[self.pos]
        self.pos += 1
        return line

    @property
    def lineno(self):
        return self.pos


def read_pair(path) -> ScenePair:
    """Parse an FPCP/1 file; any structural problem raises FormatError with
    the offending line number."""
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    r = _LineReader(lines)
    magic = r.next("magic header")
    if magic.split() != ["FPCP", "1"]:
        raise FormatError(f"bad magic/version {magic!r}", line=1)
    seed_line = r.next("seed line").split()
    if len(seed_line) != 2 or seed_line[0] != "seed":
        raise FormatError("expected 'seed <int>'", line=r.lineno)
    try:
        seed = int(seed_line[1])
    except ValueError:
        raise FormatError(f"bad seed {seed_line[1]!r}", line=r.lineno) from None
    spec_line = r.next("spec line")
    if not spec_line.startswith("spec"):
        raise FormatError("expected 'spec ...'", line=r.lineno)

    def read_section(name: str, floats: int, with_label: bool):
        head = r.next(f"'{name} <count>' header").split()
        if len(head) != 2 or head[0] != name:
            raise FormatError(f"expected '{name} <count>' header", line=r.lineno)
        try:
            count = int(head[1])
        except ValueError:
            raise FormatError(f"bad count {head[1]!r}", line=r.lineno) from None
        if count < 0:
            raise FormatError(f"negative count in section {name}", line=r.lineno)
        vals = np.empty((count, floats))
        labels = np.empty(count, dtype=np.int64) if with_label else None
        for i in range(count):
            parts = r.next(f"record {i} of section {name}").split()
            expected = floats + (1 if with_label else 0)
            if len(parts) != expected:
                raise FormatError(
                    f"section {name}: expected {expected} fields, got {len(parts)}",
                    line=r.lineno,
                )
            try:
                vals[i] = [float(x) for x in parts[:floats]]
                if with_label:
                    labels[i] = int(parts[floats])
            except ValueError:
                raise FormatError(f"section {name}: unparsable record", line=r.lineno) from None
        return count, vals, labels

    n1, pts1, lab1 = read_section("cloud1", 3, True)
    n2, pts2, lab2 = read_section("cloud2", 3, True)
    nf, flow, _ = read_section("flow", 3, False)
    if nf != n1:
        raise FormatError(f"flow count {nf} != cloud1 count {n1}")
    nm, mask_vals, _ = read_section("mask", 1, False)
    if nm != n1:
        raise FormatError(f"mask count {nm} != cloud1 count {n1}")
    if not np.all(np.isin(mask_vals, (0.0, 1.0))):
        raise FormatError("mask values must be 0 or 1")
    if n1 == 0 or n2 == 0:
        raise FormatError("empty cloud section")
    return ScenePair(
        cloud1=PointCloud(points=pts1, labels=lab1),
        cloud2=PointCloud(points=pts2, labels=lab2),
        gt_flow=flow,
        gt_mask=mask_vals[:, 0].astype(bool),
        transforms=None,
        seed=seed,
    )


def write_scene_cloud(path, cloud: PointCloud, seed: int = 0) -> None:
    """Labeled scene cloud as text: 'FPCS 1', seed, count, then x y z label."""
    labels = cloud.labels if cloud.labels is not None else np.zeros(len(cloud), dtype=np.int64)
    lines = ["FPCS 1", f"seed {seed}", f"points {len(cloud)}"]
    for p, l in zip(cloud.points, labels):
        lines.append(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g} {l}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def read_scene_cloud(path) -> tuple[PointCloud, int]:
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    r = _LineReader(lines)
    if r.next("magic").split() != ["FPCS", "1"]:
        raise FormatError("bad scene magic/version", line=1)
    seed_parts = r.next("seed").split()
    if len(seed_parts) != 2 or seed_parts[0] != "seed":
        raise FormatError("expected 'seed <int>'", line=r.lineno)
    count_parts = r.next("count").split()
    if len(count_parts) != 2 or count_parts[0] != "points":
        raise FormatError("expected 'points <int>'", line=r.lineno)
    n = int(count_parts[1])
    pts = np.empty((n, 3))
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        parts = r.next(f"point {i}").split()
        if len(parts) != 4:
            raise FormatError("expected 'x y z label'", line=r.lineno)
        pts[i] = [float(x) for x in parts[:3]]
        labels[i] = int(parts[3])
    return PointCloud(points=pts, labels=labels), int(seed_parts[1])


# ---------------------------------------------------------------------------
# dataset manifest


def write_manifest(path, entries: list[dict], header: dict | None = None) -> None:
    """Line-oriented key=value manifest: header keys, then indexed
    ``pair.<i>.<field>=<value>`` lines for every pair file."""
    lines = ["manifest_version=1"]
    for k, v in (header or {}).items():
        lines.append(f"{k}={v}")
    lines.append(f"count={len(entries)}")
    for i, entry in enumerate(entries):
        for k, v in entry.items():
            lines.append(f"pair.{i}.{k}={v}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def read_manifest(path) -> tuple[dict, list[dict]]:
    header: dict = {}
    entries: dict[int, dict] = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise FormatError(f"expected key=value, got {line!r}", line=lineno)
            key, value = line.split("=", 1)
            if key.startswith("pair."):
                parts = key.split(".", 2)
                if len(parts) != 3:
                    raise FormatError(f"bad pair key {key!r}", line=lineno)
                try:
                    idx = int(parts[1])
                except ValueError:
                    raise FormatError(f"bad pair index in {key!r}", line=lineno) from None
                entries.setdefault(idx, {})[parts[2]] = value
            else:
                header[key] = value
    if "count" in header and int(header["count"]) != len(entries):
        raise FormatError(
            f"manifest count {header['count']} != {len(entries)} entries"
        )
    return header, [entries[i] for i in sorted(entries)]


def load_pairs(manifest_path) -> list[ScenePair]:
    """Read every pair referenced by a manifest (paths relative to it)."""
    base = os.path.dirname(os.path.abspath(manifest_path))
    _, entries = read_manifest(manifest_path)
    pairs = []
    for e in entries:
        p = e["path"]
        if not os.path.isabs(p):
            p = os.path.join(base, p)
        pairs.append(read_pair(p))
    return pairs
