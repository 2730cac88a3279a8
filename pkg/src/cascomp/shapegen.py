"""Procedural dataset generation and point-cloud file I/O.

Shapes are sampled area-uniformly from six parametric primitive families,
normalized once (centroid at origin, max norm 1), and turned into training
samples by the partial-view protocol: drop the points farthest from a random
viewpoint, then downsample to the input resolution. Every quantity derives
from a per-sample seed through named `rng.Stream`s, so regeneration is
byte-identical.

Sample layout for input resolution N: ground truth G has 4N points, the
privileged subsample G_s has 2N (farthest-point subset of G), the partial
input x has N.

File formats:
  - XYZ: one "x y z" text line per point at 17 significant digits (exact
    float64 round-trip).
  - PLY: binary_little_endian 1.0, single vertex element with float32 x,y,z.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, ParseError
from .geometry import fps, normalize, random_downsample, viewpoint_crop
from .rng import Stream, splitmix64

KINDS = ("sphere", "cuboid", "cylinder", "torus", "plane_union", "composite")
SETTINGS = ("simple", "moderate", "teacherB-random")


@dataclass
class ShapeSpec:
    kind: str
    params: dict
    category_label: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractViolation(f"unknown shape kind {self.kind!r}")
        if not self.category_label:
            self.category_label = self.kind


@dataclass
class Sample:
    id: int
    G: np.ndarray
    G_s: np.ndarray
    x: np.ndarray
    viewpoint: np.ndarray
    setting: str
    seed: int
    category: str = ""


def random_spec(kind: str, stream: Stream) -> ShapeSpec:
    """Draw kind-specific parameters from their documented ranges."""
    if kind == "sphere":
        return ShapeSpec(kind, {"radius": stream.uniform_range(0.5, 1.5)})
    if kind == "cuboid":
        return ShapeSpec(kind, {"half_extents": tuple(stream.uniform_range(0.3, 1.0, 3))})
    if kind == "cylinder":
        return ShapeSpec(kind, {"radius": stream.uniform_range(0.3, 0.8),
                                "height": stream.uniform_range(0.8, 2.0)})
    if kind == "torus":
        return ShapeSpec(kind, {"major": stream.uniform_range(0.6, 1.0),
                                "minor": stream.uniform_range(0.15, 0.35)})
    if kind == "plane_union":
        count = 2 + stream.below(2)
        planes = []
        for _ in range(count):
            planes.append({"axis": stream.below(3),
                           "offset": stream.uniform_range(-0.5, 0.5),
                           "half_u": stream.uniform_range(0.3, 0.8),
                           "half_v": stream.uniform_range(0.3, 0.8)})
        return ShapeSpec(kind, {"planes": planes})
    if kind == "composite":
        first = ShapeSpec("sphere", {"radius": stream.uniform_range(0.3, 0.6)})
        second = ShapeSpec("cuboid", {"half_extents": tuple(stream.uniform_range(0.2, 0.5, 3))})
        offset = stream.uniform_range(0.5, 1.2)
        direction = stream.unit_sphere_point()
        return ShapeSpec(kind, {"first": first, "second": second,
                                "offset": tuple(offset * direction)})
    raise ContractViolation(f"unknown shape kind {kind!r}")


def _sample_sphere(radius: float, n: int, stream: Stream) -> np.ndarray:
    pts = np.stack([stream.unit_sphere_point() for _ in range(n)])
    return pts * radius


def _sample_cuboid(half, n: int, stream: Stream) -> np.ndarray:
    a, b, c = half
    areas = np.array([b * c, b * c, a * c, a * c, a * b, a * b])
    cdf = np.cumsum(areas / areas.sum())
    out = np.empty((n, 3))
    for i in range(n):
        face = int(np.searchsorted(cdf, stream.uniform(1)[0], side="right"))
        u = stream.uniform_range(-1.0, 1.0)
        v = stream.uniform_range(-1.0, 1.0)
        axis = face // 2
        sign = 1.0 if face % 2 == 0 else -1.0
        p = np.empty(3)
        p[axis] = sign * half[axis]
        others = [k for k in range(3) if k != axis]
        p[others[0]] = u * half[others[0]]
        p[others[1]] = v * half[others[1]]
        out[i] = p
    return out


def _sample_cylinder(radius: float, height: float, n: int, stream: Stream) -> np.ndarray:
    side = 2.0 * np.pi * radius * height
    cap = np.pi * radius ** 2
    cdf = np.cumsum(np.array([side, cap, cap]) / (side + 2 * cap))
    out = np.empty((n, 3))
    for i in range(n):
        part = int(np.searchsorted(cdf, stream.uniform(1)[0], side="right"))
        theta = stream.uniform_range(0.0, 2.0 * np.pi)
        if part == 0:
            z = stream.uniform_range(-height / 2, height / 2)
            rho = radius
        else:
            z = height / 2 if part == 1 else -height / 2
            rho = radius * np.sqrt(stream.uniform(1)[0])
        out[i] = (rho * np.cos(theta), rho * np.sin(theta), z)
    return out


def _sample_torus(major: float, minor: float, n: int, stream: Stream) -> np.ndarray:
    # rejection on the minor angle makes the sampling area-uniform
    out = np.empty((n, 3))
    i = 0
    while i < n:
        u = stream.uniform_range(0.0, 2.0 * np.pi)
        v = stream.uniform_range(0.0, 2.0 * np.pi)
        accept = stream.uniform(1)[0]
        w = (major + minor * np.cos(v)) / (major + minor)
        if accept <= w:
            ring = major + minor * np.cos(v)
            out[i] = (ring * np.cos(u), ring * np.sin(u), minor * np.sin(v))
            i += 1
    return out


def _sample_planes(planes, n: int, stream: Stream) -> np.ndarray:
    areas = np.array([4.0 * p["half_u"] * p["half_v"] for p in planes])
    cdf = np.cumsum(areas / areas.sum())
    out = np.empty((n, 3))
    for i in range(n):
        k = int(np.searchsorted(cdf, stream.uniform(1)[0], side="right"))
        p = planes[k]
        u = stream.uniform_range(-p["half_u"], p["half_u"])
        v = stream.uniform_range(-p["half_v"], p["half_v"])
        coords = np.empty(3)
        coords[p["axis"]] = p["offset"]
        others = [a for a in range(3) if a != p["axis"]]
        coords[others[0]] = u
        coords[others[1]] = v
        out[i] = coords
    return out


def _surface_area(spec: ShapeSpec) -> float:
    p = spec.params
    if spec.kind == "sphere":
        return 4.0 * np.pi * p["radius"] ** 2
    if spec.kind == "cuboid":
        a, b, c = p["half_extents"]
        return 8.0 * (a * b + b * c + a * c)
    if spec.kind == "cylinder":
        return 2.0 * np.pi * p["radius"] * p["height"] + 2.0 * np.pi * p["radius"] ** 2
    raise ContractViolation(f"no area formula for {spec.kind}")


def sample_surface(spec: ShapeSpec, n: int, stream: Stream) -> np.ndarray:
    """n area-uniform surface points, before normalization."""
    p = spec.params
    if spec.kind == "sphere":
        return _sample_sphere(p["radius"], n, stream)
    if spec.kind == "cuboid":
        return _sample_cuboid(p["half_extents"], n, stream)
    if spec.kind == "cylinder":
        return _sample_cylinder(p["radius"], p["height"], n, stream)
    if spec.kind == "torus":
        return _sample_torus(p["major"], p["minor"], n, stream)
    if spec.kind == "plane_union":
        return _sample_planes(p["planes"], n, stream)
    if spec.kind == "composite":
        first, second = p["first"], p["second"]
        a1, a2 = _surface_area(first), _surface_area(second)
        n1 = int(round(n * a1 / (a1 + a2)))
        n1 = min(max(n1, 1), n - 1)
        pts1 = sample_surface(first, n1, stream)
        pts2 = sample_surface(second, n - n1, stream) + np.asarray(p["offset"])
        return np.concatenate([pts1, pts2], axis=0)
    raise ContractViolation(f"unknown shape kind {spec.kind!r}")


def make_shape(spec: ShapeSpec, n_points: int, seed: int) -> np.ndarray:
    """Area-uniform surface cloud, normalized to the unit sphere."""
    if n_points < 16:
        raise ContractViolation("make_shape needs n_points >= 16")
    stream = Stream(seed, "shape", spec.kind)
    cloud, _, _ = normalize(sample_surface(spec, n_points, stream))
    return cloud


def make_partial(G: np.ndarray, setting: str, seed: int, sample_id: int = 0,
                 category: str = "") -> Sample:
    """Build one training sample from a 4N ground-truth cloud.

    simple: drop the N points farthest from the viewpoint, downsample to N.
    moderate: drop 2N, downsample to N.
    teacherB-random: drop a uniform count in [N, 2N], downsample to N.
    G_s is the farthest-point 2N subset of G (start index from seed).
    """
    if setting not in SETTINGS:
        raise ContractViolation(f"unknown setting {setting!r}")
    if len(G) % 4 != 0:
        raise ContractViolation(f"|G| must be 4N, got {len(G)}")
    n = len(G) // 4
    base = Stream(seed, "partial", setting)
    viewpoint = base.spawn("viewpoint").unit_sphere_point()
    if setting == "simple":
        n_remove = n
    elif setting == "moderate":
        n_remove = 2 * n
    else:
        n_remove = base.spawn("nremove").randint(n, 2 * n)
    survivors = viewpoint_crop(G, viewpoint, n_remove)
    x = random_downsample(survivors, n, base.spawn("downsample"))
    start = base.spawn("fps").below(len(G))
    g_s = G[fps(G, 2 * n, start_index=start)]
    return Sample(sample_id, G, g_s, x, viewpoint, setting, seed, category)


def sample_seed_for(master_seed: int, sample_id: int) -> int:
    return splitmix64(splitmix64(master_seed) ^ (sample_id + 1))


def split_of(sample_id: int) -> str:
    """Deterministic 90/10 split by id hash."""
    return "test" if splitmix64(sample_id) % 10 == 0 else "train"


@dataclass
class ManifestEntry:
    id: int
    category: str
    seed: int
    setting: str
    path_g: str
    path_gs: str
    path_x: str

    @property
    def split(self) -> str:
        return split_of(self.id)


@dataclass
class Dataset:
    root: str
    n: int
    master_seed: int
    setting: str
    entries: list[ManifestEntry] = field(default_factory=list)

    def split_entries(self, split: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == split]

    def load_sample(self, entry: ManifestEntry) -> Sample:
        g = read_cloud(os.path.join(self.root, entry.path_g))
        g_s = read_cloud(os.path.join(self.root, entry.path_gs))
        x = read_cloud(os.path.join(self.root, entry.path_x))
        base = Stream(entry.seed, "partial", entry.setting)
        viewpoint = base.spawn("viewpoint").unit_sphere_point()
        return Sample(entry.id, g, g_s, x, viewpoint, entry.setting, entry.seed, entry.category)


def make_dataset(out_dir: str, count: int, categories, n: int, seed: int,
                 setting: str = "simple") -> str:
    """Generate `count` samples plus a manifest; returns the manifest path."""
    if count < 1:
        raise ContractViolation("make_dataset needs count >= 1")
    if setting not in SETTINGS:
        raise ContractViolation(f"unknown setting {setting!r}")
    categories = list(categories)
    for cat in categories:
        if cat not in KINDS:
            raise ContractViolation(f"unknown category {cat!r}")
    sample_dir = os.path.join(out_dir, "samples")
    os.makedirs(sample_dir, exist_ok=True)
    lines = [f"# cascomp dataset v1\tn={n}\tseed={seed}\tsetting={setting}\tcount={count}"]
    for sid in range(count):
        category = categories[sid % len(categories)]
        s_seed = sample_seed_for(seed, sid)
        spec = random_spec(category, Stream(s_seed, "spec", category))
        g = make_shape(spec, 4 * n, s_seed)
        sample = make_partial(g, setting, s_seed, sample_id=sid, category=category)
        rel_g = f"samples/{sid:06d}.G.xyz"
        rel_gs = f"samples/{sid:06d}.Gs.xyz"
        rel_x = f"samples/{sid:06d}.x.xyz"
        write_cloud(os.path.join(out_dir, rel_g), sample.G)
        write_cloud(os.path.join(out_dir, rel_gs), sample.G_s)
        write_cloud(os.path.join(out_dir, rel_x), sample.x)
        lines.append(f"{sid}\t{category}\t{s_seed}\t{setting}\t{rel_g}\t{rel_gs}\t{rel_x}")
    manifest = os.path.join(out_dir, "manifest.tsv")
    with open(manifest, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    return manifest


def load_dataset(manifest_path: str) -> Dataset:
    root = os.path.dirname(os.path.abspath(manifest_path))
    with open(manifest_path, encoding="utf-8") as fh:
        raw = fh.read().splitlines()
    if not raw or not raw[0].startswith("# cascomp dataset v1"):
        raise ParseError(f"{manifest_path}: not a cascomp dataset manifest")
    header = dict(kv.split("=", 1) for kv in raw[0].split("\t")[1:])
    ds = Dataset(root, int(header["n"]), int(header["seed"]), header["setting"])
    for ln, line in enumerate(raw[1:], start=2):
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 7:
            raise ParseError(f"{manifest_path}:{ln}: expected 7 tab-separated fields")
        ds.entries.append(ManifestEntry(int(parts[0]), parts[1], int(parts[2]),
                                        parts[3], parts[4], parts[5], parts[6]))
    return ds


# ---------------------------------------------------------------------------
# cloud file I/O

def write_xyz(path: str, cloud: np.ndarray) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        for x, y, z in np.asarray(cloud, dtype=np.float64):
            fh.write(f"{x:.17g} {y:.17g} {z:.17g}\n")


def read_xyz(path: str) -> np.ndarray:
    rows = []
    with open(path, encoding="ascii") as fh:
        for ln, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped:
                continue
            parts = stripped.split()
            if len(parts) != 3:
                raise ParseError(f"{path}:{ln}: expected 3 coordinates, got {len(parts)}")
            try:
                rows.append([float(v) for v in parts])
            except ValueError as exc:
                raise ParseError(f"{path}:{ln}: {exc}") from exc
    if not rows:
        raise ParseError(f"{path}: no points")
    return np.array(rows, dtype=np.float64)


def write_ply(path: str, cloud: np.ndarray) -> None:
    pts = np.asarray(cloud, dtype=np.float32)
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {len(pts)}\n"
        "property float x\n"
        "property float y\n"
        "property float z\n"
        "end_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(pts.astype("<f4").tobytes())


def read_ply(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    lines = []
    offset = 0
    while True:
        end = blob.find(b"\n", offset)
        if end < 0:
            raise ParseError(f"{path}: truncated header (no end_header before byte {len(blob)})")
        lines.append(blob[offset:end].decode("ascii", errors="replace"))
        offset = end + 1
        if lines[-1] == "end_header":
            break
        if len(lines) > 100:
            raise ParseError(f"{path}: header too long")
    if lines[0] != "ply":
        raise ParseError(f"{path}:1: missing 'ply' magic")
    if lines[1] != "format binary_little_endian 1.0":
        raise ParseError(f"{path}:2: unsupported format {lines[1]!r}")
    body = [ln for ln in lines[2:-1] if not ln.startswith("comment")]
    if len(body) != 4 or not body[0].startswith("element vertex "):
        raise ParseError(f"{path}: expected a single vertex element with x,y,z floats")
    try:
        count = int(body[0].split()[-1])
    except ValueError as exc:
        raise ParseError(f"{path}: bad vertex count {body[0]!r}") from exc
    if body[1:] != ["property float x", "property float y", "property float z"]:
        raise ParseError(f"{path}: vertex properties must be float x,y,z")
    need = count * 12
    if len(blob) - offset < need:
        raise ParseError(f"{path}: payload truncated at byte {len(blob)} (need {offset + need})")
    flat = struct.unpack_from(f"<{count * 3}f", blob, offset)
    return np.array(flat, dtype=np.float64).reshape(count, 3)


def write_cloud(path: str, cloud: np.ndarray, fmt: str | None = None) -> None:
    fmt = fmt or os.path.splitext(path)[1].lstrip(".").lower()
    if fmt == "xyz":
        write_xyz(path, cloud)
    elif fmt == "ply":
        write_ply(path, cloud)
    else:
        raise ContractViolation(f"unknown cloud format {fmt!r}")


def read_cloud(path: str, fmt: str | None = None) -> np.ndarray:
    fmt = fmt or os.path.splitext(path)[1].lstrip(".").lower()
    if fmt == "xyz":
        return read_xyz(path)
    if fmt == "ply":
        return read_ply(path)
    raise ContractViolation(f"unknown cloud format {fmt!r}")
