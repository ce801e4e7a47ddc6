"""Synthetic shapes, partial-overlap pair construction, and point-cloud file I/O.

Supported cloud formats
-----------------------
``.xyz``  one point per line, three whitespace-separated decimals; ``#``
          starts a comment.  Written with 17 significant digits, which
          round-trips float64 exactly.
``.ply``  ASCII PLY (``format ascii 1.0``) with an ``element vertex N``
          carrying ``x``, ``y``, ``z`` properties; other properties and
          elements are skipped.

Transform files hold a row-major 4x4 homogeneous matrix, four decimals per
line.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, ParameterError, ParseError
from .geometry import PointCloud, RigidTransform, apply_transform, random_transform

SHAPE_KINDS = ("sphere", "cube-surface", "cylinder", "cone", "torus", "composite")
TORUS_MAJOR, TORUS_MINOR = 1.0, 0.35
CROP_ANCHOR_RADIUS = 500.0


@dataclass(frozen=True)
class DatasetConfig:
    n_points: int = 1024
    keep_points: int = 768
    rot_max_deg: float = 45.0
    trans_max: float = 0.5
    noise_sigma: float = 0.0
    noise_clip: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.keep_points > self.n_points:
            raise ParameterError("keep_points cannot exceed n_points")
        if min(self.n_points, self.keep_points) < 1:
            raise ParameterError("point counts must be positive")
        if min(self.rot_max_deg, self.trans_max, self.noise_sigma) < 0 or self.noise_clip <= 0:
            raise ParameterError("dataset bounds must be non-negative (noise_clip > 0)")


@dataclass(frozen=True, eq=False)
class PairSample:
    source: PointCloud
    target: PointCloud
    gt: RigidTransform
    metadata: dict = field(default_factory=dict)


# shapes ---------------------------------------------------------------------


def _sphere(n, rng):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _cube_faces(n, rng):
    face = rng.integers(0, 6, size=n)
    uv = rng.uniform(-1.0, 1.0, size=(n, 2))
    pts = np.empty((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    for a in range(3):
        rows = axis == a
        others = [b for b in range(3) if b != a]
        pts[rows, a] = sign[rows]
        pts[rows, others[0]] = uv[rows, 0]
        pts[rows, others[1]] = uv[rows, 1]
    return pts, face


def _cube(n, rng):
    return _cube_faces(n, rng)[0]


def _disk(n, rng, radius, z):
    r = radius * np.sqrt(rng.uniform(size=n))
    th = rng.uniform(0.0, 2 * np.pi, size=n)
    return np.column_stack([r * np.cos(th), r * np.sin(th), np.full(n, z)])


def _cylinder(n, rng):
    # radius 1, height 2: lateral area 4*pi, each cap pi
    part = rng.choice(3, size=n, p=[4 / 6, 1 / 6, 1 / 6])
    pts = np.empty((n, 3))
    lat = part == 0
    th = rng.uniform(0.0, 2 * np.pi, size=lat.sum())
    pts[lat] = np.column_stack([np.cos(th), np.sin(th), rng.uniform(-1.0, 1.0, size=lat.sum())])
    for p, z in ((1, 1.0), (2, -1.0)):
        rows = part == p
        pts[rows] = _disk(rows.sum(), rng, 1.0, z)
    return pts


def _cone(n, rng):
    # base radius 1 at z=-1, apex at z=1; lateral area pi*sqrt(5), base pi
    slant = np.sqrt(5.0)
    on_side = rng.uniform(size=n) < slant / (slant + 1.0)
    pts = np.empty((n, 3))
    m = on_side.sum()
    frac = np.sqrt(rng.uniform(size=m))  # distance from apex, area-uniform
    th = rng.uniform(0.0, 2 * np.pi, size=m)
    pts[on_side] = np.column_stack([frac * np.cos(th), frac * np.sin(th), 1.0 - 2.0 * frac])
    pts[~on_side] = _disk(n - m, rng, 1.0, -1.0)
    return pts


def _torus(n, rng):
    out = np.empty((0, 3))
    while len(out) < n:
        m = 2 * (n - len(out)) + 16
        u = rng.uniform(0.0, 2 * np.pi, size=m)
        v = rng.uniform(0.0, 2 * np.pi, size=m)
        # area element is proportional to R + r cos v
        keep = rng.uniform(size=m) < (TORUS_MAJOR + TORUS_MINOR * np.cos(v)) / (TORUS_MAJOR + TORUS_MINOR)
        u, v = u[keep], v[keep]
        ring = TORUS_MAJOR + TORUS_MINOR * np.cos(v)
        pts = np.column_stack([ring * np.cos(u), ring * np.sin(u), TORUS_MINOR * np.sin(v)])
        out = np.vstack([out, pts])
    return out[:n]


_PRIMITIVES = {
    "sphere": (_sphere, 4 * np.pi),
    "cube-surface": (_cube, 24.0),
    "cylinder": (_cylinder, 6 * np.pi),
    "cone": (_cone, np.pi * (1 + np.sqrt(5.0))),
    "torus": (_torus, 4 * np.pi**2 * TORUS_MAJOR * TORUS_MINOR),
}


def _random_rotation(rng):
    q = rng.normal(size=4)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def _composite(n, rng):
    """3-5 randomly scaled, rotated and offset primitives; points allocated by area."""
    count = int(rng.integers(3, 6))
    kinds = rng.choice(list(_PRIMITIVES), size=count)
    scales = rng.uniform(0.25, 0.7, size=(count, 3))
    areas = np.array([_PRIMITIVES[k][1] * np.prod(s) ** (2 / 3) for k, s in zip(kinds, scales)])
    alloc = rng.multinomial(n, areas / areas.sum())
    parts = []
    for kind, s, m in zip(kinds, scales, alloc):
        R = _random_rotation(rng)
        offset = rng.uniform(-0.8, 0.8, size=3)
        pts = _PRIMITIVES[kind][0](int(m), rng) * s
        parts.append(pts @ R.T + offset)
    return np.vstack(parts)


def normalize_unit_sphere(points: np.ndarray) -> np.ndarray:
    """Centre on the centroid and scale the farthest point to radius 1."""
    centred = points - points.mean(axis=0)
    radius = np.max(np.linalg.norm(centred, axis=1))
    return centred / radius if radius > 0 else centred


def synth_shape(kind: str, n: int, seed) -> PointCloud:
    """``n`` area-uniform surface samples of ``kind``, normalised into the unit sphere."""
    if kind not in SHAPE_KINDS:
        raise ParameterError(f"unknown shape kind {kind!r}; choose from {SHAPE_KINDS}")
    if n < 32:
        raise ParameterError(f"need at least 32 points, got {n}")
    rng = np.random.default_rng(seed)
    raw = _composite(n, rng) if kind == "composite" else _PRIMITIVES[kind][0](n, rng)
    return PointCloud(normalize_unit_sphere(raw))


# pair construction ------------------------------------------------------------


def crop_anchor(seed) -> np.ndarray:
    """Anchor point used by :func:`partial_crop` for ``seed``."""
    rng = np.random.default_rng(seed)
    direction = rng.normal(size=3)
    return CROP_ANCHOR_RADIUS * direction / np.linalg.norm(direction)


def partial_crop(cloud: PointCloud, keep: int, seed) -> PointCloud:
    """Keep the ``keep`` points nearest to a random far-away anchor.

    The anchor sits at a uniformly random direction, ``CROP_ANCHOR_RADIUS``
    from the origin, so the crop is close to a half-space cut.  Output is
    ordered by increasing anchor distance (ties by index); ``keep == N``
    returns the cloud unchanged.
    """
    n = len(cloud)
    if not 1 <= keep <= n:
        raise ParameterError(f"keep must lie in [1, {n}], got {keep}")
    if keep == n:
        return cloud
    d = np.linalg.norm(cloud.points - crop_anchor(seed), axis=1)
    order = np.lexsort((np.arange(n), d))[:keep]
    return PointCloud(cloud.points[order])


def add_noise(cloud: PointCloud, sigma: float, clip: float, seed) -> PointCloud:
    if sigma < 0 or clip <= 0:
        raise ParameterError("need sigma >= 0 and clip > 0")
    if sigma == 0:
        return cloud
    rng = np.random.default_rng(seed)
    noise = np.clip(rng.normal(0.0, sigma, size=cloud.points.shape), -clip, clip)
    return PointCloud(cloud.points + noise)


def make_pair(cloud: PointCloud, config: DatasetConfig, seed, shape: str = "") -> PairSample:
    """Source and target crops of ``cloud`` and of ``gt(cloud)``, with independent noise."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    s_gt, s_crop_src, s_crop_tgt, s_noise_src, s_noise_tgt = ss.spawn(5)
    gt = random_transform(config.rot_max_deg, config.trans_max, s_gt)
    moved = apply_transform(cloud, gt)
    source = partial_crop(cloud, config.keep_points, s_crop_src)
    target = partial_crop(moved, config.keep_points, s_crop_tgt)
    source = add_noise(source, config.noise_sigma, config.noise_clip, s_noise_src)
    target = add_noise(target, config.noise_sigma, config.noise_clip, s_noise_tgt)
    meta = {
        "shape": shape,
        "noise_sigma": config.noise_sigma,
        "seed": ss.entropy if not ss.spawn_key else list(ss.spawn_key),
        "order": "crop-then-noise",
    }
    return PairSample(source, target, gt, meta)


def sample_seed(base_seed: int, index: int) -> np.random.SeedSequence:
    """Per-sample seed so outputs do not depend on generation order."""
    return np.random.SeedSequence([int(base_seed), int(index)])


def generate_pairs(
    config: DatasetConfig, count: int, shapes: Sequence[str] = ("composite",)
) -> list[PairSample]:
    pairs = []
    for i in range(count):
        ss = sample_seed(config.seed, i)
        s_shape, s_pair = ss.spawn(2)
        kind = shapes[i % len(shapes)]
        cloud = synth_shape(kind, config.n_points, s_shape)
        sample = make_pair(cloud, config, s_pair, shape=kind)
        sample.metadata["seed"] = [int(config.seed), i]
        pairs.append(sample)
    return pairs


def overlap_fraction(sample: PairSample, th: float = 0.05) -> float:
    """Share of source points with a target point within ``th`` under the ground truth."""
    from .geometry import NeighborIndex

    mapped = sample.gt.apply(sample.source.points)
    _, d = NeighborIndex(sample.target.points).query(mapped, 1)
    return float(np.mean(d[:, 0] < th))


# file I/O ---------------------------------------------------------------------


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def save_cloud(cloud: PointCloud, path) -> None:
    path = Path(path)
    suffix = path.suffix.lower()
    lines = [" ".join(_fmt(v) for v in p) for p in cloud.points]
    if suffix == ".xyz":
        text = "\n".join(lines) + "\n"
    elif suffix == ".ply":
        header = [
            "ply",
            "format ascii 1.0",
            f"element vertex {len(cloud)}",
            "property double x",
            "property double y",
            "property double z",
            "end_header",
        ]
        text = "\n".join(header + lines) + "\n"
    else:
        raise FormatError(f"unsupported cloud format {suffix!r} (use .xyz or .ply)")
    path.write_text(text)


def _parse_floats(tokens, path, lineno, expected=None):
    try:
        values = [float(t) for t in tokens]
    except ValueError as exc:
        raise ParseError(f"not a number in {tokens!r}", path, lineno) from exc
    if expected is not None and len(values) != expected:
        raise ParseError(f"expected {expected} values, found {len(values)}", path, lineno)
    if not all(np.isfinite(values)):
        raise ParseError("non-finite coordinate", path, lineno)
    return values


def _load_xyz(path, text):
    pts = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if body:
            pts.append(_parse_floats(body.split(), path, lineno, expected=3))
    if not pts:
        raise ParseError("file contains no points", path)
    return np.array(pts)


def _load_ply(path, text):
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ParseError("missing 'ply' magic", path, 1)
    elements = []  # (name, count, [property names])
    lineno = 1
    fmt_seen = False
    while True:
        lineno += 1
        if lineno > len(lines):
            raise ParseError("header ends without 'end_header'", path, lineno - 1)
        tokens = lines[lineno - 1].split()
        if not tokens or tokens[0] in ("comment", "obj_info"):
            continue
        if tokens[0] == "format":
            if tokens[1:2] != ["ascii"]:
                raise FormatError(f"{path}: only ASCII PLY is supported, found {' '.join(tokens[1:])}")
            fmt_seen = True
        elif tokens[0] == "element":
            if len(tokens) != 3 or not tokens[2].isdigit():
                raise ParseError("malformed element line", path, lineno)
            elements.append((tokens[1], int(tokens[2]), []))
        elif tokens[0] == "property":
            if not elements:
                raise ParseError("property before any element", path, lineno)
            if tokens[1] == "list":
                if len(tokens) != 5:
                    raise ParseError("malformed list property", path, lineno)
                elements[-1][2].append(("list", tokens[4]))
            else:
                if len(tokens) != 3:
                    raise ParseError("malformed property line", path, lineno)
                elements[-1][2].append(("scalar", tokens[2]))
        elif tokens[0] == "end_header":
            break
        else:
            raise ParseError(f"unexpected header keyword {tokens[0]!r}", path, lineno)
    if not fmt_seen:
        raise ParseError("missing format line", path)
    body_start = lineno
    row = body_start
    points = None
    for name, count, props in elements:
        names = [p[1] for p in props]
        has_list = any(kind == "list" for kind, _ in props)
        if name == "vertex":
            if has_list or not {"x", "y", "z"} <= set(names):
                raise ParseError("vertex element needs scalar x, y, z properties", path)
            cols = [names.index(c) for c in ("x", "y", "z")]
            pts = np.empty((count, 3))
            for i in range(count):
                if row >= len(lines):
                    raise ParseError("unexpected end of vertex data", path, row)
                vals = _parse_floats(lines[row].split(), path, row + 1, expected=len(names))
                pts[i] = [vals[c] for c in cols]
                row += 1
            points = pts
        else:
            row += count  # skip other elements (one record per line in ASCII PLY)
    if points is None:
        raise ParseError("no vertex element", path)
    if len(points) == 0:
        raise ParseError("vertex element is empty", path)
    return points


def load_cloud(path) -> PointCloud:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix not in (".xyz", ".ply", ".txt"):
        raise FormatError(f"unsupported cloud format {suffix!r} (use .xyz or .ply)")
    text = path.read_text()
    pts = _load_ply(path, text) if suffix == ".ply" else _load_xyz(path, text)
    return PointCloud(pts)


def save_transform(T: RigidTransform, path) -> None:
    M = T.matrix()
    Path(path).write_text("\n".join(" ".join(_fmt(v) for v in row) for row in M) + "\n")


def load_transform(path) -> RigidTransform:
    path = Path(path)
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if body:
            rows.append(_parse_floats(body.split(), path, lineno, expected=4))
    if len(rows) != 4:
        raise ParseError(f"expected 4 rows, found {len(rows)}", path)
    return RigidTransform.from_matrix(np.array(rows))


# manifests --------------------------------------------------------------------

MANIFEST_NAME = "manifest.txt"
MANIFEST_VERSION = 1


@dataclass
class DatasetEntry:
    source: Path
    target: Path
    gt: Path
    shape: str = ""


@dataclass
class Dataset:
    config: dict
    entries: list[DatasetEntry]
    root: Path

    def __len__(self) -> int:
        return len(self.entries)

    def load(self, i: int) -> PairSample:
        e = self.entries[i]
        return PairSample(
            load_cloud(e.source),
            load_cloud(e.target),
            load_transform(e.gt),
            {"shape": e.shape, "index": i},
        )

    def samples(self) -> list[PairSample]:
        return [self.load(i) for i in range(len(self))]


def write_dataset(out_dir, pairs: Sequence[PairSample], config: DatasetConfig, shapes: Sequence[str]) -> Path:
    """Write clouds, ground-truth transforms and a manifest under ``out_dir``."""
    out = Path(out_dir)
    (out / "clouds").mkdir(parents=True, exist_ok=True)
    lines = ["# pcreg dataset manifest", f"format_version = {MANIFEST_VERSION}", "[config]"]
    cfg = asdict(config)
    cfg["shapes"] = ",".join(shapes)
    cfg["pairs"] = len(pairs)
    lines += [f"{k} = {v}" for k, v in cfg.items()]
    lines += ["[pairs]", "# source target gt shape"]
    for i, p in enumerate(pairs):
        stem = f"clouds/pair_{i:05d}"
        save_cloud(p.source, out / f"{stem}_src.xyz")
        save_cloud(p.target, out / f"{stem}_tgt.xyz")
        save_transform(p.gt, out / f"{stem}_gt.txt")
        lines.append(f"{stem}_src.xyz {stem}_tgt.xyz {stem}_gt.txt {p.metadata.get('shape', '') or '-'}")
    path = out / MANIFEST_NAME
    path.write_text("\n".join(lines) + "\n")
    return path


def read_dataset(path) -> Dataset:
    """Parse a manifest (or a directory holding ``manifest.txt``)."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise ParseError("manifest not found", path)
    root = path.parent
    config: dict = {}
    entries: list[DatasetEntry] = []
    section = None
    version = None
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line in ("[config]", "[pairs]"):
            section = line[1:-1]
            continue
        if section is None:
            key, sep, value = line.partition("=")
            if not sep or key.strip() != "format_version":
                raise ParseError("expected 'format_version = N' before sections", path, lineno)
            try:
                version = int(value)
            except ValueError as exc:
                raise ParseError(f"format_version must be an integer, got {value.strip()!r}", path, lineno) from exc
            if version != MANIFEST_VERSION:
                raise FormatError(f"{path}: unsupported manifest version {version}")
        elif section == "config":
            key, sep, value = line.partition("=")
            if not sep:
                raise ParseError("expected 'key = value'", path, lineno)
            config[key.strip()] = value.strip()
        else:
            tokens = line.split()
            if len(tokens) not in (3, 4):
                raise ParseError("expected 'source target gt [shape]'", path, lineno)
            shape = tokens[3] if len(tokens) == 4 and tokens[3] != "-" else ""
            entries.append(DatasetEntry(*(root / t for t in tokens[:3]), shape=shape))
    if version is None:
        raise ParseError("missing format_version", path)
    return Dataset(config, entries, root)
