"""Synthetic dataset generation and the ASCII point-cloud file format."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .geometry import PointCloud
from . import rng as rngmod

FAMILIES = ("sphere", "cube", "cylinder", "cone", "torus")


@dataclass
class ShapeSpec:
    family: str
    points: int = 512
    scale_jitter: float = 0.2

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown shape family {self.family!r}; choose from {FAMILIES}")
        if self.points < 32:
            raise ValueError("need at least 32 points per cloud")


def _surface_points(family: str, n: int, rng: np.random.Generator) -> np.ndarray:
    """n points exactly on the nominal surface of the unit-scale shape."""
    u = rng.random(n)
    v = rng.random(n)
    if family == "sphere":
        z = 2.0 * u - 1.0
        phi = 2.0 * np.pi * v
        r = np.sqrt(1.0 - z * z)
        return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    if family == "cube":
        face = rng.integers(0, 6, size=n)
        a = 2.0 * u - 1.0
        b = 2.0 * v - 1.0
        sign = np.where(face % 2 == 0, 1.0, -1.0)
        pts = np.empty((n, 3))
        axis = face // 2
        for ax in range(3):
            m = axis == ax
            others = [o for o in range(3) if o != ax]
            pts[m, ax] = sign[m]
            pts[m, others[0]] = a[m]
            pts[m, others[1]] = b[m]
        return pts
    if family == "cylinder":
        phi = 2.0 * np.pi * u
        pts = np.stack([np.cos(phi), np.sin(phi), 2.0 * v - 1.0], axis=1)
        # put ~1/4 of the points on the end caps
        cap = rng.random(n) < 0.25
        r = np.sqrt(rng.random(n))
        pts[cap, 0] = r[cap] * np.cos(phi[cap])
        pts[cap, 1] = r[cap] * np.sin(phi[cap])
        pts[cap, 2] = np.where(rng.random(cap.sum()) < 0.5, 1.0, -1.0)
        return pts
    if family == "cone":
        phi = 2.0 * np.pi * u
        h = np.sqrt(v)  # area-uniform along the slant
        pts = np.stack([(1.0 - h) * np.cos(phi), (1.0 - h) * np.sin(phi), 2.0 * h - 1.0], axis=1)
        base = rng.random(n) < 0.25
        r = np.sqrt(rng.random(n))
        pts[base, 0] = r[base] * np.cos(phi[base])
        pts[base, 1] = r[base] * np.sin(phi[base])
        pts[base, 2] = -1.0
        return pts
    if family == "torus":
        major, minor = 1.0, 0.4
        phi = 2.0 * np.pi * u
        theta = 2.0 * np.pi * v
        ring = major + minor * np.cos(theta)
        return np.stack([ring * np.cos(phi), ring * np.sin(phi), minor * np.sin(theta)], axis=1)
    raise ValueError(family)


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform random rotation matrix from a normalized quaternion."""
    q = rng.normal(size=4)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def make_cloud(spec: ShapeSpec, rng: np.random.Generator, label: int, cloud_id: str) -> PointCloud:
    pts = _surface_points(spec.family, spec.points, rng)
    scale = 1.0 + spec.scale_jitter * (2.0 * rng.random() - 1.0)
    pts = (pts * scale) @ _random_rotation(rng).T
    return PointCloud(pts, label=label, id=cloud_id)


def generate_dataset(specs: list[ShapeSpec], count_per_class: int, seed: int, out_dir: str) -> str:
    """Write one cloud file per sample plus manifest.csv; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    manifest_path = os.path.join(out_dir, "manifest.csv")
    rows = []
    for label, spec in enumerate(specs):
        for i in range(count_per_class):
            cloud_id = f"{spec.family}_{i:04d}"
            gen = rngmod.stream(seed, f"data/{spec.family}/{i}")
            cloud = make_cloud(spec, gen, label, cloud_id)
            fname = cloud_id + ".xyz"
            write_cloud(os.path.join(out_dir, fname), cloud)
            rows.append(f"{fname},{label},{seed}")
    with open(manifest_path, "w") as fh:
        fh.write("file,class,seed\n")
        fh.write("\n".join(rows) + "\n")
    return manifest_path


def write_cloud(path: str, cloud: PointCloud):
    with open(path, "w") as fh:
        if cloud.id:
            fh.write(f"# id {cloud.id}\n")
        if cloud.label is not None:
            fh.write(f"# class {cloud.label}\n")
        for x, y, z in cloud.points:
            fh.write(f"{float(x)!r} {float(y)!r} {float(z)!r}\n")


def read_cloud(path: str) -> PointCloud:
    pts, label, cloud_id = [], None, ""
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                fields = line[1:].split()
                if len(fields) == 2 and fields[0] == "id":
                    cloud_id = fields[1]
                elif len(fields) == 2 and fields[0] == "class":
                    label = int(fields[1])
                continue
            parts = line.split(" ")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 coordinates, got {len(parts)}")
            try:
                xyz = [float(p) for p in parts]
            except ValueError:
                raise ValueError(f"{path}:{lineno}: malformed coordinate") from None
            if not all(np.isfinite(xyz)):
                raise ValueError(f"{path}:{lineno}: non-finite coordinate")
            pts.append(xyz)
    if not pts:
        raise ValueError(f"{path}: no points found")
    return PointCloud(np.array(pts), label=label, id=cloud_id)


def load_dataset(dataset_dir: str, normalize: bool = True) -> list[PointCloud]:
    """Read every cloud listed in the dataset manifest (normalized by default)."""
    manifest = os.path.join(dataset_dir, "manifest.csv")
    if not os.path.exists(manifest):
        raise FileNotFoundError(f"no manifest.csv in {dataset_dir}")
    clouds = []
    with open(manifest) as fh:
        next(fh)  # header
        for line in fh:
            line = line.strip()
            if not line:
                continue
            fname, label, _ = line.split(",")
            cloud = read_cloud(os.path.join(dataset_dir, fname))
            cloud.label = int(label)
            clouds.append(cloud.normalize() if normalize else cloud)
    return clouds
