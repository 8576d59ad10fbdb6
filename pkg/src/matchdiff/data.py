"""Synthetic scene pairs and dataset I/O.

Rigid pairs: a mixed-primitive base cloud in a ~3 m box, a uniform random
rigid motion, half-space crops on both sides retried until the mutual overlap
lands within +/-5% of the target, Gaussian jitter on the target, and ground
truth from mutual nearest neighbors under the true warp. Deformable pairs
displace the base cloud by a sum of Gaussian RBF bumps and keep the identity
pairing. All randomness flows through Philox streams keyed by (seed, stream),
so generation is reproducible across platforms.

Datasets are directories of ASCII PLY clouds plus a JSON manifest
({"schema": 1, ...}) holding per-pair ground truth: a row-major 3x4 rigid
transform or a flow CSV, the pairing CSV, sigma, and overlap.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import dsm, geometry
from .errors import DataError, DimensionError, NumericError
from .geometry import PointCloud, RigidTransform

_BOX_HALF = 1.5  # scene half-extent in meters
SIGMA_RIGID = 0.1
SIGMA_DEFORM = 0.04


@dataclass(frozen=True)
class ScenePair:
    """Source/target clouds with ground truth: a rigid transform or a per-
    source-point flow, the (i, j) index pairing, the inlier radius sigma, and
    the realized overlap fraction."""

    src: PointCloud
    tgt: PointCloud
    gt_pairs: np.ndarray
    sigma: float
    overlap: float
    gt_transform: RigidTransform | None = None
    gt_flow: np.ndarray | None = None

    def __post_init__(self):
        pairs = np.asarray(self.gt_pairs, dtype=np.int64).reshape(-1, 2)
        object.__setattr__(self, "gt_pairs", pairs)
        if (self.gt_transform is None) == (self.gt_flow is None):
            raise DataError("pair needs exactly one of gt_transform or gt_flow")
        if self.gt_flow is not None:
            flow = np.asarray(self.gt_flow, dtype=np.float64)
            if flow.shape != self.src.coords.shape:
                raise DimensionError(f"flow {flow.shape} must match src {self.src.coords.shape}")
            object.__setattr__(self, "gt_flow", flow)

    def warp_src(self, x: np.ndarray) -> np.ndarray:
        """Ground-truth warp at arbitrary points (flow is interpolated)."""
        if self.gt_transform is not None:
            return geometry.rigid_warp(x, self.gt_transform)
        anchors = self.src.coords
        return x + np.stack([geometry.interpolate_flow(u, anchors, self.gt_flow) for u in x])


def rng_for(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based Philox generator keyed by (seed, stream)."""
    key = np.array([np.uint64(seed), np.uint64(stream)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _mixed_primitives(n: int, rng: np.random.Generator) -> np.ndarray:
    """Base cloud: 2-4 primitives (Gaussian blob, sphere shell, plane patch)
    scattered inside the scene box."""
    n_prims = int(rng.integers(2, 5))
    counts = np.full(n_prims, n // n_prims)
    counts[: n % n_prims] += 1
    parts = []
    for count in counts:
        kind = int(rng.integers(0, 3))
        center = rng.uniform(-0.8 * _BOX_HALF, 0.8 * _BOX_HALF, size=3)
        if kind == 0:
            pts = center + rng.standard_normal((count, 3)) * rng.uniform(0.2, 0.5)
        elif kind == 1:
            raw = rng.standard_normal((count, 3))
            raw /= np.linalg.norm(raw, axis=1, keepdims=True)
            pts = center + raw * rng.uniform(0.3, 0.8)
        else:
            basis = geometry.random_rotation(rng)[:, :2]
            extent = rng.uniform(0.5, 1.0, size=2)
            uv = rng.uniform(-1.0, 1.0, size=(count, 2)) * extent
            pts = center + uv @ basis.T + rng.standard_normal((count, 3)) * 0.01
        parts.append(pts)
    cloud = np.concatenate(parts)
    return np.clip(cloud, -_BOX_HALF, _BOX_HALF)


def mutual_nn_pairs(warped_src: np.ndarray, tgt: np.ndarray, sigma: float) -> np.ndarray:
    """(i, j) pairs that are mutual nearest neighbors within sigma."""
    if len(warped_src) == 0 or len(tgt) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    diff = warped_src[:, None, :] - tgt[None, :, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    nn_of_src = dist.argmin(axis=1)
    nn_of_tgt = dist.argmin(axis=0)
    src_idx = np.arange(len(warped_src))
    mutual = nn_of_tgt[nn_of_src] == src_idx
    close = dist[src_idx, nn_of_src] < sigma
    keep = mutual & close
    return np.stack([src_idx[keep], nn_of_src[keep]], axis=1).astype(np.int64)


def gen_rigid_pair(
    n_points: int,
    overlap_target: float,
    noise_std: float,
    seed: int,
    sigma: float = SIGMA_RIGID,
) -> ScenePair:
    """Rigid scene pair with overlap within +/-5% of overlap_target.

    Overlap is measured as shared base points over the larger cropped side.
    Raises after 50 failed crop attempts (infeasible targets).
    """
    if not 0.0 < overlap_target <= 1.0:
        raise NumericError(f"overlap_target must be in (0, 1], got {overlap_target}")
    if n_points < 10:
        raise NumericError(f"need at least 10 points, got {n_points}")
    rng = rng_for(seed, stream=0)
    base = _mixed_primitives(n_points, rng)
    rot = geometry.random_rotation(rng)
    trans = rng.uniform(-1.0, 1.0, size=3)
    gt = RigidTransform(r=rot, t=trans)
    if overlap_target >= 1.0:
        keep_p = keep_q = np.ones(n_points, dtype=bool)
        overlap = 1.0
    else:
        for attempt in range(50):
            keep_p = _halfspace_keep(base, rng, rng.uniform(overlap_target, 1.0))
            keep_q = _halfspace_keep(base, rng, rng.uniform(overlap_target, 1.0))
            shared = np.count_nonzero(keep_p & keep_q)
            larger = max(np.count_nonzero(keep_p), np.count_nonzero(keep_q))
            overlap = shared / larger if larger else 0.0
            if abs(overlap - overlap_target) <= 0.05:
                break
        else:
            raise DataError(
                f"could not reach overlap {overlap_target} within 50 crop attempts (seed {seed})"
            )
    src = base[keep_p]
    tgt = geometry.rigid_warp(base[keep_q], gt) + noise_std * rng.standard_normal((np.count_nonzero(keep_q), 3))
    pairs = mutual_nn_pairs(geometry.rigid_warp(src, gt), tgt, sigma)
    return ScenePair(
        src=PointCloud(src),
        tgt=PointCloud(tgt),
        gt_pairs=pairs,
        sigma=sigma,
        overlap=float(overlap),
        gt_transform=gt,
    )


def _halfspace_keep(points: np.ndarray, rng: np.random.Generator, frac: float) -> np.ndarray:
    """Keep the frac fraction of points on one side of a random plane."""
    normal = rng.standard_normal(3)
    normal /= np.linalg.norm(normal)
    proj = points @ normal
    return proj <= np.quantile(proj, frac)


def rbf_flow(
    x: np.ndarray, centers: np.ndarray, widths: np.ndarray, amps: np.ndarray
) -> np.ndarray:
    """Sum-of-Gaussian-bumps displacement field:
    flow(x) = sum_k amps[k] * exp(-||x - centers[k]||^2 / (2 widths[k]^2))."""
    x = np.asarray(x, dtype=np.float64)
    d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    w = np.exp(-d2 / (2.0 * widths[None, :] ** 2))
    return w @ amps


def gen_deformable_pair(
    n_points: int,
    n_rbf: int,
    max_disp: float,
    seed: int,
    sigma: float = SIGMA_DEFORM,
) -> ScenePair:
    """Deformable pair: target = source + smooth RBF displacement field.

    Bump widths are drawn in [0.3, 1.0] m and each bump's amplitude vector
    has norm at most max_disp; the pairing is the identity bijection.
    """
    if n_rbf < 1:
        raise NumericError(f"n_rbf must be >= 1, got {n_rbf}")
    if max_disp < 0.0:
        raise NumericError(f"max_disp must be >= 0, got {max_disp}")
    rng = rng_for(seed, stream=1)
    src = _mixed_primitives(n_points, rng)
    centers = rng.uniform(-_BOX_HALF, _BOX_HALF, size=(n_rbf, 3))
    widths = rng.uniform(0.3, 1.0, size=n_rbf)
    dirs = rng.standard_normal((n_rbf, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    amps = dirs * rng.uniform(0.0, max_disp, size=(n_rbf, 1))
    flow = rbf_flow(src, centers, widths, amps)
    idx = np.arange(n_points, dtype=np.int64)
    return ScenePair(
        src=PointCloud(src),
        tgt=PointCloud(src + flow),
        gt_pairs=np.stack([idx, idx], axis=1),
        sigma=sigma,
        overlap=1.0,
        gt_flow=flow,
    )


def gt_matching_matrix(pair: ScenePair) -> np.ndarray:
    """Binary N x M matrix with ones at the ground-truth pairs."""
    e0 = np.zeros((len(pair.src), len(pair.tgt)))
    if len(pair.gt_pairs):
        e0[pair.gt_pairs[:, 0], pair.gt_pairs[:, 1]] = 1.0
    return e0


def write_ply(path: str, coords: np.ndarray) -> None:
    """ASCII PLY with double x/y/z vertex properties."""
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 3:
        raise DimensionError(f"expected (n, 3) coords, got {coords.shape}")
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(coords)}\n")
        fh.write("property double x\nproperty double y\nproperty double z\n")
        fh.write("end_header\n")
        for row in coords:
            fh.write(f"{float(row[0])!r} {float(row[1])!r} {float(row[2])!r}\n")


def read_ply(path: str) -> np.ndarray:
    """Parse an ASCII PLY of vertices; errors cite the offending line."""
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e

    def fail(lineno: int, msg: str):
        raise DataError(f"{path}:{lineno + 1}: {msg}")

    if not lines or lines[0].strip() != "ply":
        fail(0, "missing 'ply' magic")
    n_vertex = None
    props: list[str] = []
    body_start = None
    saw_format = False
    for i, line in enumerate(lines[1:], start=1):
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            if tok[1:] != ["ascii", "1.0"]:
                fail(i, f"unsupported format {' '.join(tok[1:])!r}")
            saw_format = True
        elif tok[0] == "element":
            if tok[1] == "vertex":
                try:
                    n_vertex = int(tok[2])
                except (IndexError, ValueError):
                    fail(i, "malformed vertex element")
            else:
                fail(i, f"unsupported element {tok[1]!r}")
        elif tok[0] == "property":
            if len(tok) != 3:
                fail(i, "malformed property")
            props.append(tok[2])
        elif tok[0] == "end_header":
            body_start = i + 1
            break
        elif tok[0] == "comment":
            continue
        else:
            fail(i, f"unexpected header line {line!r}")
    if not saw_format:
        fail(0, "missing format line")
    if body_start is None:
        fail(len(lines) - 1, "missing end_header")
    if n_vertex is None:
        fail(body_start - 1, "missing vertex element")
    for axis in ("x", "y", "z"):
        if axis not in props:
            fail(body_start - 1, f"missing {axis!r} property")
    cols = [props.index(a) for a in ("x", "y", "z")]
    body = lines[body_start : body_start + n_vertex]
    if len(body) < n_vertex:
        fail(len(lines) - 1, f"expected {n_vertex} vertices, file has {len(body)}")
    coords = np.zeros((n_vertex, 3))
    for r, line in enumerate(body):
        tok = line.split()
        if len(tok) != len(props):
            fail(body_start + r, f"expected {len(props)} values, got {len(tok)}")
        try:
            coords[r] = [float(tok[c]) for c in cols]
        except ValueError:
            fail(body_start + r, f"non-numeric vertex {line!r}")
    return coords


def _write_pairs_csv(path: str, pairs: np.ndarray) -> None:
    with open(path, "w") as fh:
        fh.write("i,j\n")
        for i, j in pairs:
            fh.write(f"{int(i)},{int(j)}\n")


def _read_pairs_csv(path: str) -> np.ndarray:
    try:
        with open(path) as fh:
            lines = [ln.strip() for ln in fh if ln.strip()]
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
    if not lines or lines[0] != "i,j":
        raise DataError(f"{path}: expected 'i,j' header")
    try:
        rows = [[int(v) for v in ln.split(",")] for ln in lines[1:]]
    except ValueError as e:
        raise DataError(f"{path}: malformed pair row: {e}") from e
    return np.asarray(rows, dtype=np.int64).reshape(-1, 2)


def save_dataset(out_dir: str, pairs: list[ScenePair], mode: str, seed: int) -> str:
    """Write clouds, ground truth, and the manifest; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for idx, pair in enumerate(pairs):
        tag = f"pair_{idx:04d}"
        write_ply(os.path.join(out_dir, f"{tag}_src.ply"), pair.src.coords)
        write_ply(os.path.join(out_dir, f"{tag}_tgt.ply"), pair.tgt.coords)
        _write_pairs_csv(os.path.join(out_dir, f"{tag}_gt.csv"), pair.gt_pairs)
        entry = {
            "src": f"{tag}_src.ply",
            "tgt": f"{tag}_tgt.ply",
            "pairs_file": f"{tag}_gt.csv",
            "sigma": pair.sigma,
            "overlap": pair.overlap,
            "transform": None,
            "flow": None,
        }
        if pair.gt_transform is not None:
            rt = np.hstack([pair.gt_transform.r, pair.gt_transform.t[:, None]])
            entry["transform"] = [[float(v) for v in row] for row in rt]
        if pair.gt_flow is not None:
            flow_file = f"{tag}_flow.csv"
            dsm.dump_csv(pair.gt_flow, os.path.join(out_dir, flow_file))
            entry["flow"] = flow_file
        entries.append(entry)
    manifest = {"schema": 1, "mode": mode, "seed": seed, "pairs": entries}
    path = os.path.join(out_dir, "manifest.json")
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)
    return path


def load_pair(dataset_dir: str, entry: dict) -> ScenePair:
    """Reconstruct one ScenePair from its manifest entry."""
    src = read_ply(os.path.join(dataset_dir, entry["src"]))
    tgt = read_ply(os.path.join(dataset_dir, entry["tgt"]))
    pairs = _read_pairs_csv(os.path.join(dataset_dir, entry["pairs_file"]))
    transform = entry.get("transform")
    flow_file = entry.get("flow")
    gt_transform = None
    gt_flow = None
    if transform is not None:
        mat = np.asarray(transform, dtype=np.float64)
        if mat.shape != (3, 4):
            raise DataError(f"transform must be 3x4, got {mat.shape}")
        gt_transform = RigidTransform(r=mat[:, :3], t=mat[:, 3])
    if flow_file is not None:
        gt_flow = dsm.load_csv(os.path.join(dataset_dir, flow_file))
    return ScenePair(
        src=PointCloud(src),
        tgt=PointCloud(tgt),
        gt_pairs=pairs,
        sigma=float(entry["sigma"]),
        overlap=float(entry["overlap"]),
        gt_transform=gt_transform,
        gt_flow=gt_flow,
    )


def load_dataset(dataset_dir: str) -> tuple[str, list[ScenePair]]:
    """Read a dataset directory; returns (mode, pairs)."""
    path = os.path.join(dataset_dir, "manifest.json")
    try:
        with open(path) as fh:
            manifest = json.load(fh)
    except OSError as e:
        raise DataError(f"cannot read manifest {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"malformed manifest {path}: {e}") from e
    if manifest.get("schema") != 1:
        raise DataError(f"unsupported manifest schema {manifest.get('schema')!r} in {path}")
    for key in ("mode", "pairs"):
        if key not in manifest:
            raise DataError(f"manifest {path} missing key {key!r}")
    return manifest["mode"], [load_pair(dataset_dir, e) for e in manifest["pairs"]]
