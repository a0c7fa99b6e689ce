"""Synthetic shapes, viewpoint occlusion and point cloud files.

Shapes are sampled uniformly by surface area from simple primitives (or
a union of two), posed, and scaled into the cube ``[-0.5, 0.5]^3`` using
the posed primitive's analytic bounding box. Partial clouds are made by
dropping the points farthest from a viewpoint.
"""
import dataclasses
import math
import os

import numpy as np

from . import geometry
from .errors import ContractError, ParseError

PRIMITIVES = ("sphere", "box", "cylinder", "plane", "composite")
DIFFICULTY = {"simple": 0.25, "moderate": 0.5, "hard": 0.75}
VIEW_DISTANCE = 1.5  # viewpoint radius, in units of the cloud's bounding radius


@dataclasses.dataclass(frozen=True)
class Pose:
    rotation: np.ndarray
    translation: np.ndarray

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def random(cls, rng, max_shift=0.0):
        q = rng.normal(size=4)
        w, x, y, z = q / np.linalg.norm(q)
        rot = np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ]
        )
        return cls(rot, rng.uniform(-max_shift, max_shift, size=3))

    def apply(self, pts):
        return pts @ self.rotation.T + self.translation


@dataclasses.dataclass(frozen=True)
class SyntheticSpec:
    primitive: str
    n_points: int
    seed: int
    pose: Pose | None = None  # None: drawn from the seed


# Each part is (sampler(rng, n) -> local points, surface area, local half-extents).


def _sphere(rng):
    r = rng.uniform(0.3, 1.0)

    def sample(rng, n):
        v = rng.normal(size=(n, 3))
        return r * v / np.linalg.norm(v, axis=1, keepdims=True)

    return sample, 4 * math.pi * r * r, np.array([r, r, r])


def _box_faces(half):
    a, b, c = half
    # (axis, sign) per face and its area
    faces = [(0, -1), (0, 1), (1, -1), (1, 1), (2, -1), (2, 1)]
    areas = np.array([4 * b * c, 4 * b * c, 4 * a * c, 4 * a * c, 4 * a * b, 4 * a * b])
    return faces, areas


def _box(rng):
    half = rng.uniform(0.2, 1.0, size=3)
    faces, areas = _box_faces(half)

    def sample(rng, n):
        which = rng.choice(6, size=n, p=areas / areas.sum())
        pts = rng.uniform(-half, half, size=(n, 3))
        for f, (axis, sign) in enumerate(faces):
            pts[which == f, axis] = sign * half[axis]
        return pts

    return sample, float(areas.sum()), half


def _cylinder(rng):
    r = rng.uniform(0.2, 0.6)
    h = rng.uniform(0.2, 1.0)
    side, cap = 2 * math.pi * r * 2 * h, math.pi * r * r
    probs = np.array([side, cap, cap]) / (side + 2 * cap)

    def sample(rng, n):
        which = rng.choice(3, size=n, p=probs)
        theta = rng.uniform(0, 2 * math.pi, size=n)
        rad = np.where(which == 0, r, r * np.sqrt(rng.uniform(size=n)))
        z = np.where(which == 0, rng.uniform(-h, h, size=n), np.where(which == 1, h, -h))
        return np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)

    return sample, side + 2 * cap, np.array([r, r, h])


def _plane(rng):
    a, b = rng.uniform(0.3, 1.0, size=2)

    def sample(rng, n):
        return np.stack([rng.uniform(-a, a, n), rng.uniform(-b, b, n), np.zeros(n)], axis=1)

    return sample, 4 * a * b, np.array([a, b, 0.0])


_BASIC = {"sphere": _sphere, "box": _box, "cylinder": _cylinder, "plane": _plane}


def _corners(half):
    signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=float)
    return signs * half


def generate(spec):
    """Sample ``spec.n_points`` surface points; deterministic in ``spec``."""
    name = "composite" if spec.primitive == "composite-of-2" else spec.primitive
    if name not in PRIMITIVES:
        raise ContractError(f"unknown primitive {spec.primitive!r}; choose from {PRIMITIVES}")
    if spec.n_points < 8:
        raise ContractError(f"need at least 8 points, got {spec.n_points}")
    rng = np.random.default_rng(spec.seed)
    if name == "composite":
        kinds = rng.choice(sorted(_BASIC), size=2)
        parts = [(_BASIC[k](rng), Pose.random(rng, max_shift=0.6)) for k in kinds]
    else:
        parts = [(_BASIC[name](rng), Pose.identity())]
    pose = spec.pose if spec.pose is not None else Pose.random(rng)

    areas = np.array([p[0][1] for p in parts])
    counts = rng.multinomial(spec.n_points, areas / areas.sum()) if len(parts) > 1 else [spec.n_points]
    chunks, corners = [], []
    for ((sample, _, half), local), n in zip(parts, counts):
        chunks.append(pose.apply(local.apply(sample(rng, n))))
        corners.append(pose.apply(local.apply(_corners(half))))
    pts = np.concatenate(chunks)
    corners = np.concatenate(corners)
    lo, hi = corners.min(axis=0), corners.max(axis=0)
    center = (lo + hi) / 2
    scale = 0.5 / np.max((hi - lo) / 2)
    return (pts - center) * scale


def occlusion_count(n, fraction):
    """``ceil(fraction * n)`` without spurious round-up from binary fractions."""
    x = fraction * n
    r = round(x)
    return int(r) if abs(x - r) < 1e-9 else math.ceil(x)


def occlude(complete, viewpoint, fraction):
    """Drop the ``ceil(fraction * N)`` points farthest from ``viewpoint``.

    Survivors keep their original relative order. Distance ties are broken
    by coordinates, so the result does not depend on input order.
    """
    if not 0 < fraction < 1:
        raise ContractError(f"occlusion fraction must lie in (0, 1), got {fraction}")
    pts = np.asarray(complete, dtype=np.float64)
    n = pts.shape[0]
    n_remove = occlusion_count(n, fraction)
    v = np.asarray(viewpoint, dtype=np.float64)
    d = pts - v
    dist = d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]
    order = np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0], dist))
    keep = np.sort(order[: n - n_remove])
    return pts[keep]


def viewpoint_from_direction(direction, complete):
    """Place a viewpoint along ``direction`` at 1.5x the cloud's bounding radius."""
    d = np.asarray(direction, dtype=np.float64)
    radius = np.sqrt((np.asarray(complete) ** 2).sum(axis=1)).max()
    return d / np.linalg.norm(d) * VIEW_DISTANCE * radius


def random_direction(rng):
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def resample(points, n):
    """Fixed-size copy of ``points``: an FPS subset, or FPS order repeated cyclically if too few."""
    pts = np.asarray(points, dtype=np.float64)
    m = pts.shape[0]
    if m == 0:
        raise ContractError("cannot resample an empty cloud")
    order = geometry.fps(pts, min(n, m))
    if m < n:
        order = np.resize(order, n)
    return pts[order]


# -- files -------------------------------------------------------------------


def write_xyz(path, points):
    pts = np.asarray(points, dtype=np.float64)
    with open(path, "w", encoding="ascii") as fh:
        for x, y, z in pts:
            fh.write(f"{x:.17g} {y:.17g} {z:.17g}\n")


def read_xyz(path):
    rows = []
    with open(path, encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3:
                raise ParseError(f"expected 3 values, got {len(parts)}", line=lineno, path=path)
            try:
                rows.append([float(p) for p in parts])
            except ValueError:
                raise ParseError(f"not a number in {line.strip()!r}", line=lineno, path=path) from None
    if not rows:
        raise ParseError("no points in file", path=path)
    return np.array(rows, dtype=np.float64)


_PLY_PROPS = ("x", "y", "z")


def write_ply(path, points):
    pts = np.ascontiguousarray(points, dtype="<f8")
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {pts.shape[0]}\n"
        + "".join(f"property double {p}\n" for p in _PLY_PROPS)
        + "end_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(pts.tobytes())


def read_ply(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    pos, lineno, count, props = 0, 0, None, []
    expect = ["ply"]
    while True:
        end = blob.find(b"\n", pos)
        if end < 0:
            raise ParseError("header not terminated", line=lineno + 1, path=path)
        lineno += 1
        line = blob[pos:end].decode("ascii", errors="replace").strip()
        pos = end + 1
        if expect:
            if line != expect.pop():
                raise ParseError("missing 'ply' magic", line=lineno, path=path)
            continue
        words = line.split()
        if not words or words[0] == "comment":
            continue
        if words[0] == "format":
            if words[1:] != ["binary_little_endian", "1.0"]:
                raise ParseError(f"unsupported format {line!r}", line=lineno, path=path)
        elif words[0] == "element":
            if len(words) != 3 or words[1] != "vertex" or count is not None:
                raise ParseError(f"unsupported element {line!r}", line=lineno, path=path)
            count = int(words[2])
        elif words[0] == "property":
            if len(words) != 3 or words[1] not in ("double", "float64"):
                raise ParseError(f"only float64 properties are supported: {line!r}", line=lineno, path=path)
            props.append(words[2])
        elif words[0] == "end_header":
            break
        else:
            raise ParseError(f"unexpected header line {line!r}", line=lineno, path=path)
    if count is None or tuple(props) != _PLY_PROPS:
        raise ParseError("header must declare vertex x, y, z", line=lineno, path=path)
    if count == 0:
        raise ParseError("no points in file", path=path)
    need = count * 3 * 8
    if len(blob) - pos != need:
        raise ParseError(f"expected {need} data bytes, found {len(blob) - pos}", path=path)
    return np.frombuffer(blob, dtype="<f8", offset=pos).reshape(count, 3).astype(np.float64)


def read_points(path):
    return read_ply(path) if str(path).lower().endswith(".ply") else read_xyz(path)


def write_points(path, points):
    if str(path).lower().endswith(".ply"):
        write_ply(path, points)
    else:
        write_xyz(path, points)


# -- datasets ----------------------------------------------------------------

MANIFEST = "manifest.txt"
MANIFEST_HEADER = "# cra-pcn manifest v1: partial_path complete_path category difficulty"


@dataclasses.dataclass(frozen=True)
class Example:
    partial: str
    complete: str
    category: str
    difficulty: str


def write_manifest(path, examples):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(MANIFEST_HEADER + "\n")
        for ex in examples:
            fh.write(f"{ex.partial} {ex.complete} {ex.category} {ex.difficulty}\n")


def read_manifest(path):
    """Examples listed in a manifest; paths are resolved against its directory."""
    if os.path.isdir(path):
        path = os.path.join(path, MANIFEST)
    root = os.path.dirname(os.path.abspath(path))
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 4:
                raise ParseError("expected 4 fields", line=lineno, path=path)
            partial, complete, category, difficulty = parts
            out.append(Example(os.path.join(root, partial), os.path.join(root, complete), category, difficulty))
    return out


def make_example(seed, index, primitive, difficulty, n_complete, n_partial):
    """One (partial, complete, category, difficulty) tuple, deterministic in ``(seed, index)``."""
    rng = np.random.default_rng([seed, index])
    if primitive == "mixed":
        primitive = PRIMITIVES[int(rng.integers(len(PRIMITIVES)))]
    if difficulty == "mixed":
        difficulty = sorted(DIFFICULTY)[int(rng.integers(len(DIFFICULTY)))]
    if difficulty not in DIFFICULTY:
        raise ContractError(f"unknown difficulty {difficulty!r}")
    shape_seed = int(rng.integers(2**63 - 1))
    complete = generate(SyntheticSpec(primitive, n_complete, shape_seed))
    view = viewpoint_from_direction(random_direction(rng), complete)
    partial = occlude(complete, view, DIFFICULTY[difficulty])
    if n_partial:
        partial = resample(partial, n_partial)
    return partial, complete, primitive, difficulty


def generate_dataset(out_dir, count, seed=0, difficulty="mixed", primitive="mixed",
                     n_complete=2048, n_partial=2048, fmt="xyz"):
    """Write ``count`` examples plus a manifest under ``out_dir``; returns the manifest path."""
    for sub in ("partial", "complete"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    examples = []
    for i in range(count):
        partial, complete, category, diff = make_example(seed, i, primitive, difficulty, n_complete, n_partial)
        rel_p = os.path.join("partial", f"{i:05d}.{fmt}")
        rel_c = os.path.join("complete", f"{i:05d}.{fmt}")
        write_points(os.path.join(out_dir, rel_p), partial)
        write_points(os.path.join(out_dir, rel_c), complete)
        examples.append(Example(rel_p, rel_c, category, diff))
    path = os.path.join(out_dir, MANIFEST)
    write_manifest(path, examples)
    return path
