"""Synthetic datasets, denoising perturbations and point-set file IO.

Point-set file format: the first non-comment line is ``n d``, followed by
``n`` rows of ``d`` whitespace-separated floats.  Lines starting with ``#``
are ignored.  Values are written with 17 significant digits, so a round trip
is lossless in double precision.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

SHAPES = ("sphere", "cube-surface", "torus")


class PointSetFormatError(ValueError):
    def __init__(self, path, line, msg):
        super().__init__(f"{path}:{line}: {msg}")
        self.path, self.line = path, line


# -- two-sine regression ----------------------------------------------------
def two_sine_mean(t, mode):
    """Branch means ``sin(2 pi t)`` (mode 0) and ``-sin(2 pi t)`` (mode 1)."""
    s = np.sin(2.0 * np.pi * np.asarray(t, dtype=np.float64))
    return np.where(np.asarray(mode) == 0, s, -s)


def gen_two_sine(count, seed=0, noise_var=0.1, noise_std=None, t=None):
    """Draw ``count`` pairs from the two-branch sine mixture.

    Returns arrays ``(t, x, mode)``.  ``t`` is uniform on [0, 1] unless fixed.
    Noise has variance ``noise_var`` unless ``noise_std`` is given.
    """
    if count < 1:
        raise ValueError("count must be at least 1")
    rng = np.random.default_rng(seed)
    std = np.sqrt(noise_var) if noise_std is None else float(noise_std)
    tt = rng.uniform(0.0, 1.0, count) if t is None else np.full(count, float(t))
    mode = rng.integers(0, 2, count)
    x = two_sine_mean(tt, mode) + std * rng.standard_normal(count)
    return tt, x, mode


def two_sine_tasks(n_tasks, n_points, seed=0, noise_var=0.1):
    """Tasks for conditional training: lists of ``(t (n,1), x (n,1))`` pairs."""
    rng = np.random.default_rng(seed)
    seeds = rng.integers(0, 2**63 - 1, n_tasks)
    out = []
    for s in seeds:
        t, x, _ = gen_two_sine(n_points, int(s), noise_var)
        out.append((t[:, None], x[:, None]))
    return out


def write_two_sine_csv(path, t, x, mode):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("t", "x", "mode"))
        for row in zip(t, x, mode):
            w.writerow((repr(float(row[0])), repr(float(row[1])), int(row[2])))


def read_two_sine_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0]] != ["t", "x", "mode"]:
        raise PointSetFormatError(path, 1, "expected header 't,x,mode'")
    try:
        body = [(float(a), float(b), int(c)) for a, b, c in rows[1:]]
    except ValueError as exc:
        raise PointSetFormatError(path, 0, str(exc)) from exc
    arr = np.array(body, dtype=np.float64).reshape(-1, 3)
    return arr[:, 0], arr[:, 1], arr[:, 2].astype(int)


# -- parametric shapes ------------------------------------------------------
@dataclass(frozen=True)
class ShapeSpec:
    """A surface to sample: sphere of radius ``scale``, cube with corners at
    distance ``scale`` from the origin, or torus with radii ``0.7 scale`` and
    ``0.3 scale``."""

    kind: str
    n: int
    scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SHAPES:
            raise ValueError(f"unknown shape {self.kind!r}; choose from {SHAPES}")
        if self.n < 1:
            raise ValueError("a shape needs at least one point")
        if not self.scale > 0:
            raise ValueError("scale must be positive")


def gen_shape(spec):
    rng = np.random.default_rng(spec.seed)
    n = spec.n
    if spec.kind == "sphere":
        g = rng.standard_normal((n, 3))
        return spec.scale * g / np.linalg.norm(g, axis=1, keepdims=True)
    if spec.kind == "cube-surface":
        h = spec.scale / np.sqrt(3.0)
        # all six faces have equal area, so the face is uniform
        face = rng.integers(0, 6, n)
        p = rng.uniform(-h, h, (n, 3))
        axis = face // 2
        p[np.arange(n), axis] = np.where(face % 2 == 0, -h, h)
        return p
    big, small = 0.7 * spec.scale, 0.3 * spec.scale
    out = np.empty((0, 3))
    while len(out) < n:
        m = 2 * (n - len(out)) + 16
        u = rng.uniform(0.0, 2.0 * np.pi, m)
        v = rng.uniform(0.0, 2.0 * np.pi, m)
        # surface element is proportional to big + small cos v
        keep = rng.uniform(0.0, big + small, m) < big + small * np.cos(v)
        u, v = u[keep], v[keep]
        ring = big + small * np.cos(v)
        pts = np.stack([ring * np.cos(u), ring * np.sin(u), small * np.sin(v)], axis=1)
        out = np.concatenate([out, pts])
    return out[:n]


def surface_residual(points, kind, scale=1.0):
    """Distance-like residual of ``points`` from the named surface (0 on it)."""
    p = np.asarray(points, dtype=np.float64)
    if kind == "sphere":
        return np.abs(np.linalg.norm(p, axis=1) - scale)
    if kind == "cube-surface":
        return np.abs(np.abs(p).max(axis=1) - scale / np.sqrt(3.0))
    big, small = 0.7 * scale, 0.3 * scale
    ring = np.hypot(p[:, 0], p[:, 1]) - big
    return np.abs(np.hypot(ring, p[:, 2]) - small)


def shape_dataset(kinds, count, n, seed=0, scale=1.0):
    """``count`` clouds cycling through ``kinds``; returns ``(N, n, 3)`` and labels."""
    rng = np.random.default_rng(seed)
    seeds = rng.integers(0, 2**63 - 1, count)
    labels = [kinds[i % len(kinds)] for i in range(count)]
    clouds = np.stack([gen_shape(ShapeSpec(k, n, scale, int(s))) for k, s in zip(labels, seeds)])
    return clouds, labels


def perturb(x, radius=0.25, noise=0.05, seed=0):
    """Add ``N(0, noise^2)`` to every point within ``radius`` of a random anchor.

    Returns the perturbed copy and the boolean mask of perturbed points.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise ValueError("perturb needs a nonempty (n, d) point set")
    rng = np.random.default_rng(seed)
    anchor = x[rng.integers(len(x))]
    mask = np.linalg.norm(x - anchor, axis=1) <= radius
    out = x.copy()
    out[mask] += noise * rng.standard_normal((int(mask.sum()), x.shape[1]))
    return out, mask


# -- point-set files --------------------------------------------------------
def write_point_set(path, points):
    p = np.asarray(points, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] < 1:
        raise ValueError("point set must be a nonempty (n, d) array")
    with open(path, "w") as fh:
        fh.write(f"{p.shape[0]} {p.shape[1]}\n")
        for row in p:
            fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")


def read_point_set(path):
    with open(path) as fh:
        lines = [(i + 1, ln.split()) for i, ln in enumerate(fh)
                 if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        raise PointSetFormatError(path, 1, "missing 'n d' header")
    hline, head = lines[0]
    try:
        if len(head) != 2:
            raise ValueError
        n, d = int(head[0]), int(head[1])
        if n < 1 or d < 1:
            raise ValueError
    except ValueError:
        raise PointSetFormatError(path, hline, f"malformed header {' '.join(head)!r}") from None
    rows = lines[1:]
    if len(rows) != n:
        where = rows[n][0] if len(rows) > n else (rows[-1][0] + 1 if rows else hline + 1)
        raise PointSetFormatError(path, where, f"header says {n} rows, found {len(rows)}")
    out = np.empty((n, d))
    for k, (line, toks) in enumerate(rows):
        if len(toks) != d:
            raise PointSetFormatError(path, line, f"expected {d} values, found {len(toks)}")
        try:
            out[k] = [float(v) for v in toks]
        except ValueError:
            bad = next(v for v in toks if not _is_float(v))
            raise PointSetFormatError(path, line, f"non-numeric token {bad!r}") from None
    if not np.all(np.isfinite(out)):
        raise PointSetFormatError(path, rows[int(np.argmax(~np.isfinite(out).all(1)))][0],
                                  "non-finite coordinate")
    return out


def _is_float(s):
    try:
        float(s)
        return True
    except ValueError:
        return False


def write_point_sets(directory, clouds, prefix="cloud"):
    os.makedirs(directory, exist_ok=True)
    paths = []
    for i, c in enumerate(clouds):
        p = os.path.join(directory, f"{prefix}_{i:05d}.pts")
        write_point_set(p, c)
        paths.append(p)
    return paths


def read_point_sets(directory):
    names = sorted(f for f in os.listdir(directory) if f.endswith(".pts"))
    if not names:
        raise FileNotFoundError(f"no .pts files in {directory}")
    return [read_point_set(os.path.join(directory, f)) for f in names]
