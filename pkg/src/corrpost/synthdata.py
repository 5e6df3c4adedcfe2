"""Deterministic synthetic scenes standing in for the vehicle and face corpora.

Two object families are rendered at the frame center over seeded value-noise
backgrounds:

* ``VEHICLE_SHAPES``: angular silhouettes built from hull, turret and barrel
  polygons (the tank role).
* ``FACE_BLOBS``: an elliptical head with Gaussian features (the face role).

Object size is a fixed fraction of the frame, so a class looks the same at
every resolution apart from sampling.
"""
from __future__ import annotations

import enum
import functools
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import GeometryError, ManifestError
from .imagefft import read_pgm, write_pgm

__all__ = [
    "Family",
    "ObjectClass",
    "DatasetManifest",
    "object_class",
    "render_scene",
    "value_noise",
    "plan_corpus",
    "generate_corpus",
    "load_manifest",
    "load_images",
    "ROLE_FILTER",
    "ROLE_TRAIN",
    "ROLE_TEST",
]

RESOLUTIONS = (256, 128, 64, 32)
ROLE_FILTER = "filter_train"
ROLE_TRAIN = "cnn_train"
ROLE_TEST = "cnn_test"

# fraction of the half-frame covered by one object unit
OBJECT_SCALE = 0.42
SUPERSAMPLE = 4
MIN_GEOMETRY_DISTANCE = 0.05


class Family(str, enum.Enum):
    VEHICLE_SHAPES = "VEHICLE_SHAPES"
    FACE_BLOBS = "FACE_BLOBS"


@dataclass(frozen=True)
class ObjectClass:
    """One renderable object class.

    For vehicles ``parts`` is a tuple of ``(vertices, albedo)`` polygons in
    object units (x to the right, y down); for faces ``parts`` holds Gaussian
    features ``(cx, cy, sx, sy, amplitude)`` and ``head`` the ellipse
    ``(sx, sy)``.
    """
    family: Family
    class_id: int
    parts: tuple
    albedo: float
    head: tuple = ()

    def signature(self) -> np.ndarray:
        """Flat geometry descriptor used for the distinctness check."""
        if self.family is Family.VEHICLE_SHAPES:
            vals = [np.asarray(v, dtype=float).ravel() for v, _ in self.parts]
        else:
            vals = [np.asarray(self.head, dtype=float)] + \
                   [np.asarray(p, dtype=float) for p in self.parts]
        return np.concatenate(vals)


def _box(x0, y0, x1, y1):
    return ((x0, y0), (x1, y0), (x1, y1), (x0, y1))


def _chamfered(length, width, cut):
    hl, hw = length / 2, width / 2
    return ((-hl + cut, -hw), (hl - cut, -hw), (hl, -hw + cut), (hl, hw - cut),
            (hl - cut, hw), (-hl + cut, hw), (-hl, hw - cut), (-hl, -hw + cut))


def _ngon(cx, cy, rx, ry, n, phase=0.0):
    t = phase + 2 * np.pi * np.arange(n) / n
    return tuple((cx + rx * np.cos(a), cy + ry * np.sin(a)) for a in t)


# (hull length, hull width, chamfer, turret x, turret rx, turret ry, turret sides,
#  barrel length, barrel width, side-skirt depth)
_VEHICLE_TABLE = [
    (1.60, 0.80, 0.10, -0.05, 0.36, 0.32, 12, 0.95, 0.08, 0.00),
    (1.60, 0.90, 0.02, 0.10, 0.42, 0.36, 6, 0.80, 0.10, 0.08),
    (1.50, 0.76, 0.18, -0.30, 0.30, 0.28, 5, 1.10, 0.07, 0.00),
    (1.44, 0.92, 0.06, 0.00, 0.40, 0.40, 4, 0.70, 0.11, 0.10),
]

# head (sx, sy); features (cx, cy, sx, sy, amplitude)
_FACE_TABLE = [
    ((0.70, 0.92), ((-0.28, -0.18, 0.10, 0.06, -0.35), (0.28, -0.18, 0.10, 0.06, -0.35),
                    (0.0, 0.10, 0.06, 0.16, 0.15), (0.0, 0.45, 0.22, 0.05, -0.30),
                    (0.0, -0.80, 0.50, 0.16, -0.25))),
    ((0.80, 0.85), ((-0.34, -0.25, 0.13, 0.07, -0.40), (0.34, -0.25, 0.13, 0.07, -0.40),
                    (0.0, 0.05, 0.08, 0.12, 0.20), (0.0, 0.38, 0.30, 0.07, -0.25),
                    (0.0, -0.70, 0.62, 0.22, -0.30))),
    ((0.62, 0.98), ((-0.22, -0.28, 0.08, 0.05, -0.30), (0.22, -0.28, 0.08, 0.05, -0.30),
                    (0.0, 0.12, 0.05, 0.20, 0.10), (0.0, 0.55, 0.16, 0.05, -0.35),
                    (-0.45, 0.0, 0.10, 0.30, -0.15))),
    ((0.75, 0.80), ((-0.30, -0.10, 0.11, 0.09, -0.45), (0.30, -0.10, 0.11, 0.09, -0.45),
                    (0.0, 0.15, 0.10, 0.08, 0.25), (0.0, 0.42, 0.26, 0.09, -0.20),
                    (0.0, -0.62, 0.70, 0.20, -0.20))),
]


def _vehicle(class_id: int) -> ObjectClass:
    if class_id < len(_VEHICLE_TABLE):
        row = _VEHICLE_TABLE[class_id]
    else:
        # extra classes come from a fixed per-class stream, independent of any corpus seed
        g = np.random.default_rng([7, class_id])
        row = (g.uniform(1.4, 1.7), g.uniform(0.7, 0.95), g.uniform(0.0, 0.2),
               g.uniform(-0.3, 0.15), g.uniform(0.28, 0.44), g.uniform(0.26, 0.4),
               int(g.integers(4, 13)), g.uniform(0.6, 1.1), g.uniform(0.06, 0.12),
               g.uniform(0.0, 0.1))
    length, width, cut, tx, trx, try_, sides, blen, bw, skirt = row
    hull = _chamfered(length, width, cut)
    turret = _ngon(tx, 0.0, trx, try_, sides, phase=np.pi / sides)
    barrel = _box(tx + trx * 0.6, -bw / 2, tx + trx * 0.6 + blen, bw / 2)
    parts = [(hull, 0.70), (turret, 0.85), (barrel, 0.80)]
    if skirt > 0:
        hl, hw = length / 2, width / 2
        parts.append((_box(-hl * 0.9, -hw - skirt, hl * 0.9, -hw), 0.55))
        parts.append((_box(-hl * 0.9, hw, hl * 0.9, hw + skirt), 0.55))
    # center the silhouette so the object sits on the frame center
    pts = np.concatenate([np.asarray(v) for v, _ in parts])
    mid = (pts.max(axis=0) + pts.min(axis=0)) / 2
    parts = tuple((tuple(map(tuple, np.asarray(v) - mid)), a) for v, a in parts)
    return ObjectClass(Family.VEHICLE_SHAPES, class_id, parts, 0.70)


def _face(class_id: int) -> ObjectClass:
    if class_id < len(_FACE_TABLE):
        head, feats = _FACE_TABLE[class_id]
    else:
        g = np.random.default_rng([11, class_id])
        head = (g.uniform(0.6, 0.85), g.uniform(0.8, 1.0))
        ex, ey = g.uniform(0.2, 0.36), g.uniform(-0.3, -0.05)
        feats = ((-ex, ey, 0.1, 0.07, -0.4), (ex, ey, 0.1, 0.07, -0.4),
                 (0.0, g.uniform(0.0, 0.15), 0.07, 0.14, 0.2),
                 (0.0, g.uniform(0.35, 0.55), g.uniform(0.15, 0.3), 0.06, -0.3),
                 (0.0, -0.7, g.uniform(0.4, 0.7), 0.2, -0.25))
    return ObjectClass(Family.FACE_BLOBS, class_id, tuple(tuple(f) for f in feats), 0.72,
                       head=tuple(head))


def object_class(family, class_id: int) -> ObjectClass:
    """Fixed geometry for ``class_id`` of ``family``; never depends on a corpus seed."""
    family = Family(family)
    if class_id < 0:
        raise GeometryError("class_id must be >= 0")
    return _vehicle(class_id) if family is Family.VEHICLE_SHAPES else _face(class_id)


def check_distinct(classes: Sequence[ObjectClass]) -> None:
    for i, a in enumerate(classes):
        for b in classes[i + 1:]:
            if a.family != b.family:
                continue
            sa, sb = a.signature(), b.signature()
            d = np.inf if sa.shape != sb.shape else float(np.max(np.abs(sa - sb)))
            if d < MIN_GEOMETRY_DISTANCE:
                raise GeometryError(
                    f"classes {a.class_id} and {b.class_id} have near-identical geometry")


# --- rendering ------------------------------------------------------------------

def _polygon_area(v: np.ndarray) -> float:
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _inside(px: np.ndarray, py: np.ndarray, verts: np.ndarray) -> np.ndarray:
    """Even-odd point-in-polygon test over arrays of points."""
    inside = np.zeros(px.shape, dtype=bool)
    x0, y0 = verts[-1]
    for x1, y1 in verts:
        crosses = (y1 > py) != (y0 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xi = x0 + (py - y0) * (x1 - x0) / (y1 - y0)
        inside ^= crosses & (px < xi)
        x0, y0 = x1, y1
    return inside


def _object_coords(resolution: int, rotation_deg: float, sub: int, lo: int = 0, hi=None):
    """Object-unit coordinates of (sub-sampled) pixel centers in rows/cols ``[lo, hi)``,
    rotated into the object frame."""
    hi = resolution if hi is None else hi
    axis = (np.arange(lo * sub, hi * sub) + 0.5) / sub - resolution / 2.0
    yy, xx = np.meshgrid(axis, axis, indexing="ij")
    unit = OBJECT_SCALE * resolution / 2.0
    xx, yy = xx / unit, yy / unit
    th = np.deg2rad(rotation_deg % 360.0)
    c, s = np.cos(th), np.sin(th)
    # inverse rotation maps frame points back into the object frame
    return c * xx + s * yy, -s * xx + c * yy


def _render_vehicle(cls: ObjectClass, resolution: int, rotation_deg: float):
    # only the central window that can contain the object is rasterized
    radius = max(float(np.max(np.hypot(*np.asarray(v, dtype=float).T))) for v, _ in cls.parts)
    half = int(np.ceil(radius * OBJECT_SCALE * resolution / 2.0)) + 1
    lo = max(resolution // 2 - half, 0)
    hi = min(resolution // 2 + half, resolution)
    ox, oy = _object_coords(resolution, rotation_deg, SUPERSAMPLE, lo, hi)
    value = np.zeros(ox.shape)
    cover = np.zeros(ox.shape, dtype=bool)
    for verts, albedo in cls.parts:
        v = np.asarray(verts, dtype=float)
        if len(v) < 3 or _polygon_area(v) <= 0:
            raise GeometryError(f"class {cls.class_id}: zero-area part")
        m = _inside(ox, oy, v)
        value[m] = albedo  # later parts paint over earlier ones
        cover |= m
    n = hi - lo
    shape = (n, SUPERSAMPLE, n, SUPERSAMPLE)
    alpha = np.zeros((resolution, resolution))
    paint = np.zeros((resolution, resolution))
    alpha[lo:hi, lo:hi] = cover.reshape(shape).mean(axis=(1, 3))
    paint[lo:hi, lo:hi] = value.reshape(shape).sum(axis=(1, 3)) / SUPERSAMPLE ** 2
    return alpha, paint


def _render_face(cls: ObjectClass, resolution: int, rotation_deg: float):
    ox, oy = _object_coords(resolution, rotation_deg, 1)
    sx, sy = cls.head
    if sx <= 0 or sy <= 0:
        raise GeometryError(f"class {cls.class_id}: zero-area head")
    rho = np.sqrt((ox / sx) ** 2 + (oy / sy) ** 2)
    # soft edge about one pixel wide at every resolution
    edge = 2.0 / (OBJECT_SCALE * resolution)
    alpha = np.clip((1.0 - rho) / edge + 0.5, 0.0, 1.0)
    shade = np.full(ox.shape, cls.albedo)
    for cx, cy, fx, fy, amp in cls.parts:
        shade += amp * np.exp(-0.5 * (((ox - cx) / fx) ** 2 + ((oy - cy) / fy) ** 2))
    shade = np.clip(shade, 0.0, 1.0)
    return alpha, alpha * shade


def value_noise(resolution: int, seed, cells: Sequence[int] = (4, 9), weights=(0.65, 0.35)):
    """Smooth lattice noise in [0, 1]; the lattice is tied to the frame, not the pixel grid."""
    rng = np.random.default_rng(seed)
    out = np.zeros((resolution, resolution))
    t = (np.arange(resolution) + 0.5) / resolution
    for n, wgt in zip(cells, weights):
        lattice = rng.random((n + 1, n + 1))
        pos = t * n
        i = np.minimum(pos.astype(int), n - 1)
        f = pos - i
        f = f * f * (3 - 2 * f)
        ry, rx = i[:, None], i[None, :]
        fy, fx = f[:, None], f[None, :]
        top = lattice[ry, rx] * (1 - fx) + lattice[ry, rx + 1] * fx
        bot = lattice[ry + 1, rx] * (1 - fx) + lattice[ry + 1, rx + 1] * fx
        out += wgt * (top * (1 - fy) + bot * fy)
    return out / sum(weights)


def _render_object(cls: ObjectClass, resolution: int, rotation_deg: float):
    if cls.family is Family.VEHICLE_SHAPES:
        return _render_vehicle(cls, resolution, rotation_deg)
    return _render_face(cls, resolution, rotation_deg)


@functools.lru_cache(maxsize=None)
def energy_gain(cls: ObjectClass) -> float:
    """Paint scale that gives ``cls`` the silhouette energy of class 0 of its family.

    With equal energies a false class can only out-correlate the true class
    through shape, never through being larger or brighter.
    """
    def energy(c):
        _, paint = _render_object(c, 256, 0.0)
        return float(np.sum(paint ** 2))
    own = energy(cls)
    if own <= 0:
        raise GeometryError(f"class {cls.class_id} renders to an empty image")
    return float(np.sqrt(energy(object_class(cls.family, 0)) / own))


def render_scene(cls: ObjectClass, resolution: int, rotation_deg: float, background_seed,
                 *, contrast: float = 0.3, base: float = 0.15) -> np.ndarray:
    """Render ``cls`` at the frame center over a value-noise background.

    Every class is painted with the silhouette energy of class 0 (see
    :func:`energy_gain`). The result lies in [0, 1] and depends only on the
    arguments.
    """
    if resolution not in RESOLUTIONS:
        raise GeometryError(f"resolution must be one of {RESOLUTIONS}")
    if not 0 <= contrast <= 0.3:
        raise GeometryError("background contrast must lie in [0, 0.3]")
    alpha, paint = _render_object(cls, resolution, rotation_deg)
    if not np.any(alpha > 0):
        raise GeometryError(f"class {cls.class_id} renders to an empty image")
    bg = base + contrast * value_noise(resolution, background_seed)
    return np.clip(bg * (1.0 - alpha) + energy_gain(cls) * paint, 0.0, 1.0)


# --- manifests and corpora ---------------------------------------------------------

@dataclass
class DatasetManifest:
    """Everything needed to regenerate a corpus bit-for-bit.

    ``counts`` maps class id to the number of scenes per resolution;
    ``filter_train_per_resolution`` extra true-class scenes at evenly spaced
    angles are reserved for filter synthesis. Non-true classes listed in
    ``heldout_classes`` go to the test role, the other false classes to the
    training role; true-class scenes alternate between the two. With
    ``split_false`` every false class is split the same way instead.
    """
    family: str = Family.VEHICLE_SHAPES.value
    true_class: int = 0
    counts: dict = field(default_factory=lambda: {0: 180, 1: 90, 2: 90, 3: 90})
    heldout_classes: list = field(default_factory=lambda: [3])
    split_false: bool = False
    resolutions: list = field(default_factory=lambda: list(RESOLUTIONS))
    rotation_range: list = field(default_factory=lambda: [-30.0, 30.0])
    filter_train_per_resolution: int = 30
    background_contrast: float = 0.3
    background_base: float = 0.15
    seed: int = 0
    crop_mode: str = "center"
    filters: dict = field(default_factory=dict)
    entries: list = field(default_factory=list)

    def __post_init__(self):
        self.family = Family(self.family).value
        self.counts = {int(k): int(v) for k, v in self.counts.items()}
        self.heldout_classes = [int(c) for c in self.heldout_classes]
        self.resolutions = [int(r) for r in self.resolutions]

    def validate(self) -> None:
        if not self.counts:
            raise ManifestError("manifest lists no classes")
        if any(v <= 0 for v in self.counts.values()):
            raise ManifestError("per-class counts must be positive")
        if self.true_class not in self.counts:
            raise ManifestError("true class missing from counts")
        bad = [r for r in self.resolutions if r not in RESOLUTIONS]
        if bad or not self.resolutions:
            raise ManifestError(f"unsupported resolutions {bad}")
        if len(set(self.resolutions)) != len(self.resolutions):
            raise ManifestError("duplicate resolutions")
        lo, hi = self.rotation_range
        if hi < lo:
            raise ManifestError("rotation range is reversed")
        if self.filter_train_per_resolution < 0:
            raise ManifestError("filter_train_per_resolution must be >= 0")
        try:
            c_lo, c_hi = self.contrast_range()
        except (TypeError, ValueError):
            raise ManifestError("background_contrast must be a number or a [lo, hi] pair")
        if not 0 <= c_lo <= c_hi:
            raise ManifestError("background contrast range must satisfy 0 <= lo <= hi")
        if self.true_class in self.heldout_classes:
            raise ManifestError("the true class cannot be held out")

    def contrast_range(self) -> tuple[float, float]:
        """Background contrast bounds; a scalar means every scene uses that value."""
        c = self.background_contrast
        lo, hi = (c, c) if np.isscalar(c) else c
        return float(lo), float(hi)

    def classes(self) -> list[ObjectClass]:
        return [object_class(self.family, c) for c in sorted(self.counts)]

    def to_json(self) -> str:
        d = asdict(self)
        d["counts"] = {str(k): v for k, v in self.counts.items()}
        return json.dumps(d, indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ManifestError(f"unknown manifest fields {sorted(extra)}")
        return cls(**d)


def parse_class_ids(pairs) -> dict:
    """Build a counts dict from ``(class_id, count)`` pairs, rejecting duplicate ids."""
    counts = {}
    for cid, n in pairs:
        if int(cid) in counts:
            raise ManifestError(f"duplicate class id {cid}")
        counts[int(cid)] = int(n)
    return counts


def _sample_seed(manifest_seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(manifest_seed), int(index)])


def plan_corpus(m: DatasetManifest) -> list[dict]:
    """Deterministic list of scene descriptors (without hashes) for a manifest."""
    m.validate()
    lo, hi = (float(v) for v in m.rotation_range)
    span = hi - lo
    c_lo, c_hi = m.contrast_range()
    plan = []

    def push(cid, res, rot, role):
        index = len(plan)
        ss = _sample_seed(m.seed, index)
        words = ss.generate_state(2)
        plan.append({
            "index": index,
            "sample_id": f"{m.family[:1].lower()}{index:06d}",
            "class_id": cid,
            "resolution": res,
            "rotation": rot,
            "background_seed": int(words[0]),
            "contrast": round(c_lo + (c_hi - c_lo) * float(words[1]) / 2 ** 32, 6),
            "role": role,
            "label": int(cid == m.true_class),
            "path": f"{m.family}/{cid}/{res}/{index}.pgm",
        })

    for res in m.resolutions:
        if m.filter_train_per_resolution:
            n_f = m.filter_train_per_resolution
            # a full turn is periodic; a partial range needs both endpoints covered
            step = span / n_f if span >= 360.0 or n_f == 1 else span / (n_f - 1)
            for k in range(n_f):
                push(m.true_class, res, lo + step * k, ROLE_FILTER)
        for cid in sorted(m.counts):
            n = m.counts[cid]
            for k in range(n):
                jitter = np.random.default_rng(_sample_seed(m.seed, len(plan))).random()
                rot = round(lo + span * (k + jitter) / n, 6)
                if cid == m.true_class or m.split_false:
                    role = ROLE_TRAIN if k % 2 == 0 else ROLE_TEST
                elif cid in m.heldout_classes:
                    role = ROLE_TEST
                else:
                    role = ROLE_TRAIN
                push(cid, res, rot, role)
    return plan


def _render_entry(m: DatasetManifest, classes: dict, e: dict) -> np.ndarray:
    return render_scene(classes[e["class_id"]], e["resolution"], e["rotation"],
                        e["background_seed"], contrast=e["contrast"],
                        base=m.background_base)


def generate_corpus(m: DatasetManifest, out_dir, threads: int = 1) -> DatasetManifest:
    """Render every scene to ``out_dir/data/<family>/<class>/<res>/<index>.pgm``.

    Writes ``manifest.json`` next to the family directory and returns the
    manifest with its ``entries`` (including SHA-256 content hashes) filled in.
    """
    plan = plan_corpus(m)
    classes = {c.class_id: c for c in m.classes()}
    check_distinct(list(classes.values()))
    root = Path(out_dir) / "data"

    def work(e):
        img = _render_entry(m, classes, e)
        path = root / e["path"]
        path.parent.mkdir(parents=True, exist_ok=True)
        write_pgm(path, img)
        e = dict(e)
        e["sha256"] = hashlib.sha256(path.read_bytes()).hexdigest()
        return e

    try:
        if threads > 1:
            from concurrent.futures import ThreadPoolExecutor
            with ThreadPoolExecutor(threads) as pool:
                entries = list(pool.map(work, plan))
        else:
            entries = [work(e) for e in plan]
    except OSError as exc:
        raise ManifestError(f"cannot write corpus under {root}: {exc}") from exc
    m.entries = entries
    (root / m.family).mkdir(parents=True, exist_ok=True)
    (root / m.family / "manifest.json").write_text(m.to_json())
    return m


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest {path} does not exist")
    return DatasetManifest.from_dict(json.loads(path.read_text()))


def load_images(m: DatasetManifest, data_root, entries=None, verify: bool = True) -> list:
    """Read the PGMs listed in ``entries`` (default: all), checking hashes."""
    out = []
    for e in (m.entries if entries is None else entries):
        path = Path(data_root) / e["path"]
        if not path.exists():
            raise ManifestError(f"missing corpus file {path}")
        if verify and e.get("sha256"):
            if hashlib.sha256(path.read_bytes()).hexdigest() != e["sha256"]:
                raise ManifestError(f"hash mismatch for {path}")
        out.append(read_pgm(path))
    return out
