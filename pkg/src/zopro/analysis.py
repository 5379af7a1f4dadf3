"""Trajectory analytics over policy and reward checkpoint series.

Every statistic works on raw flattened parameter vectors. Two-series
statistics pair snapshots by iteration tag and refuse mismatched series.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .params import DEGENERACY_EPS, load_checkpoint


class Measure(NamedTuple):
    value: float
    flag: str | None = None


class UndefinedAngle(ValueError):
    pass


class SeriesMismatch(ValueError):
    pass


@dataclass
class CheckpointSeries:
    label: str
    snapshots: list[np.ndarray]
    tags: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.snapshots = [np.asarray(s, dtype=np.float64) for s in self.snapshots]
        if not self.tags:
            self.tags = list(range(len(self.snapshots)))
        if len(self.tags) != len(self.snapshots):
            raise SeriesMismatch("one tag per snapshot required")
        if len({s.shape for s in self.snapshots}) > 1:
            raise SeriesMismatch(f"{self.label}: snapshots differ in dimension")

    def __len__(self) -> int:
        return len(self.snapshots)

    def matrix(self) -> np.ndarray:
        return np.stack(self.snapshots)

    def delta(self, tag: int) -> np.ndarray:
        i = self.tags.index(tag)
        if i == 0:
            raise SeriesMismatch(f"{self.label}: no snapshot before tag {tag}")
        return self.snapshots[i] - self.snapshots[i - 1]


def _paired(X: CheckpointSeries, Y: CheckpointSeries) -> None:
    if X.tags != Y.tags:
        raise SeriesMismatch(f"tags differ: {X.tags} vs {Y.tags}")


def _as_matrix(X) -> np.ndarray:
    return X.matrix() if isinstance(X, CheckpointSeries) else np.atleast_2d(np.asarray(X, dtype=np.float64))


def procrustes_disparity(X, Y) -> Measure:
    """Residual after aligning Y to X by translation, scaling and rotation.

    Both snapshot matrices (rows = snapshots) are centred and scaled to unit
    Frobenius norm; the disparity is ``1 - (sum of singular values of X^T Y)^2``.
    """
    if isinstance(X, CheckpointSeries) and isinstance(Y, CheckpointSeries):
        _paired(X, Y)
    A, B = _as_matrix(X), _as_matrix(Y)
    if A.shape != B.shape:
        raise SeriesMismatch(f"shape mismatch {A.shape} vs {B.shape}")
    A = A - A.mean(axis=0)
    B = B - B.mean(axis=0)
    na, nb = np.linalg.norm(A), np.linalg.norm(B)
    if na < DEGENERACY_EPS or nb < DEGENERACY_EPS:
        return Measure(0.0, "degenerate")
    A /= na
    B /= nb
    # singular values of A^T B (d x d) equal those of R_a R_b^T from thin QRs
    _, ra = np.linalg.qr(A.T)
    _, rb = np.linalg.qr(B.T)
    s = np.linalg.svd(ra @ rb.T, compute_uv=False)
    return Measure(float(max(0.0, 1.0 - s.sum() ** 2)))


def _double_centred(M: np.ndarray) -> np.ndarray:
    diff = M[:, None, :] - M[None, :, :]
    D = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    return D - D.mean(axis=0) - D.mean(axis=1)[:, None] + D.mean()


def distance_correlation(X, Y) -> Measure:
    """Sample distance correlation between paired snapshot sets, in [0, 1]."""
    if isinstance(X, CheckpointSeries) and isinstance(Y, CheckpointSeries):
        _paired(X, Y)
    A, B = _as_matrix(X), _as_matrix(Y)
    if A.shape[0] != B.shape[0] or A.shape[0] < 2:
        raise SeriesMismatch("distance correlation needs equal snapshot counts >= 2")
    a, b = _double_centred(A), _double_centred(B)
    dcov = np.mean(a * b)
    dvar = np.mean(a * a) * np.mean(b * b)
    if dvar <= 0.0:
        return Measure(0.0, "constant-series")
    return Measure(float(np.sqrt(min(1.0, max(0.0, dcov / np.sqrt(dvar))))))


def relative_angle(v1: np.ndarray, v2: np.ndarray) -> float:
    """Angle between two vectors in degrees."""
    v1, v2 = np.asarray(v1, dtype=np.float64), np.asarray(v2, dtype=np.float64)
    if v1.shape != v2.shape:
        raise SeriesMismatch("vectors differ in dimension")
    n1, n2 = np.linalg.norm(v1), np.linalg.norm(v2)
    if n1 < DEGENERACY_EPS or n2 < DEGENERACY_EPS:
        raise UndefinedAngle("angle undefined for a (near-)zero vector")
    # half-angle form: same value as arccos of the cosine, but well conditioned
    # near 0 and 180 degrees where arccos loses about half the digits
    a, b = v1 / n1, v2 / n2
    return math.degrees(2.0 * math.atan2(np.linalg.norm(a - b), np.linalg.norm(a + b)))


def pearson_delta_correlation(X: CheckpointSeries, Y: CheckpointSeries, tag: int) -> Measure:
    _paired(X, Y)
    dx, dy = X.delta(tag), Y.delta(tag)
    if dx.shape != dy.shape:
        raise SeriesMismatch("deltas differ in dimension")
    dx = dx - dx.mean()
    dy = dy - dy.mean()
    sx, sy = np.linalg.norm(dx), np.linalg.norm(dy)
    if sx < DEGENERACY_EPS or sy < DEGENERACY_EPS:
        return Measure(0.0, "zero-variance")
    return Measure(float(np.clip(np.dot(dx, dy) / (sx * sy), -1.0, 1.0)))


def angle_from_blocks(v1: np.ndarray, v2: np.ndarray, layer_map: Sequence[np.ndarray]) -> float:
    """Global angle rebuilt from per-block dot products and squared norms."""
    dot = sum(float(np.dot(v1[b], v2[b])) for b in layer_map)
    n1 = math.sqrt(sum(float(np.dot(v1[b], v1[b])) for b in layer_map))
    n2 = math.sqrt(sum(float(np.dot(v2[b], v2[b])) for b in layer_map))
    if n1 < DEGENERACY_EPS or n2 < DEGENERACY_EPS:
        raise UndefinedAngle("angle undefined for a (near-)zero vector")
    return math.degrees(math.acos(min(1.0, max(-1.0, dot / (n1 * n2)))))


def _check_partition(layer_map: Sequence[np.ndarray], dim: int) -> None:
    idx = np.sort(np.concatenate([np.asarray(b) for b in layer_map]))
    if idx.shape != (dim,) or not np.array_equal(idx, np.arange(dim)):
        raise ValueError("layer map must partition the parameter indices exactly")


def layerwise_angles(policy_series: CheckpointSeries, reward_series: CheckpointSeries,
                     layer_map: Sequence[np.ndarray]):
    """Angles (degrees) between per-iteration deltas, one column per layer block.

    Returns ``(tags, matrix, flags)``; degenerate cells hold NaN and are listed
    in ``flags`` as ``(tag, layer)`` pairs.
    """
    _paired(policy_series, reward_series)
    _check_partition(layer_map, policy_series.snapshots[0].size)
    tags = policy_series.tags[1:]
    out = np.full((len(tags), len(layer_map)), np.nan)
    flags = []
    for r, tag in enumerate(tags):
        dp, dr = policy_series.delta(tag), reward_series.delta(tag)
        for c, block in enumerate(layer_map):
            try:
                out[r, c] = relative_angle(dp[block], dr[block])
            except UndefinedAngle:
                flags.append((tag, c))
    return tags, out, flags


@dataclass
class PcaResult:
    coords: np.ndarray
    eigenvalues: np.ndarray
    components: np.ndarray
    mean: np.ndarray
    flag: str | None = None


def pca_project(*series, dims: int = 2) -> PcaResult:
    """Principal-component coordinates of all snapshots stacked together.

    Each component's sign is chosen so that its largest-magnitude coordinate is
    positive. ``eigenvalues`` are those of the (unnormalised) scatter matrix.
    """
    if dims not in (2, 3):
        raise ValueError("dims must be 2 or 3")
    mats = [_as_matrix(s) for s in series]
    M = np.concatenate(mats)
    if M.shape[0] < dims + 1:
        raise ValueError(f"need at least {dims + 1} snapshots for a {dims}-D projection")
    mean = M.mean(axis=0)
    C = M - mean
    U, S, Vt = np.linalg.svd(C, full_matrices=False)
    tol = S.max(initial=0.0) * max(C.shape) * np.finfo(float).eps
    rank = int(np.sum(S > tol))
    k = min(dims, rank)
    flag = None if k == dims else "rank-deficient"
    coords = U[:, :k] * S[:k]
    comps = Vt[:k].copy()
    for j in range(k):
        if coords[np.argmax(np.abs(coords[:, j])), j] < 0:
            coords[:, j] *= -1
            comps[j] *= -1
    return PcaResult(coords, S ** 2, comps, mean, flag)


# --- run directory analysis -------------------------------------------------


def load_run_series(run_dir) -> tuple[CheckpointSeries, CheckpointSeries, list, int]:
    """Per-iteration policy and reward-trunk series from a run directory.

    Returns ``(policy, reward_trunk, layer_map, n_iterations)``; iteration 0
    (the shared starting point) is kept as tag 0.
    """
    ck = Path(run_dir) / "checkpoints"
    pol_files = sorted(ck.glob("policy_*.ckpt"))
    rew_files = sorted(ck.glob("reward_*.ckpt"))
    if not pol_files or len(pol_files) != len(rew_files):
        raise FileNotFoundError(
            f"{ck}: found {len(pol_files)} policy and {len(rew_files)} reward checkpoints")
    pol, rew, tags = [], [], []
    dims = None
    for pf, rf in zip(pol_files, rew_files):
        p, r = load_checkpoint(pf), load_checkpoint(rf)
        if p.iteration != r.iteration:
            raise ValueError(f"checkpoint mismatch: {pf.name} vs {rf.name}")
        trunk = int((r.extra or {}).get("trunk_dim", p.values.size))
        pol.append(p.values)
        rew.append(r.values[:trunk])
        tags.append(p.iteration)
        dims = p.arch[0] if p.arch else None
    if tags != list(range(len(tags))):
        raise ValueError(f"{ck}: iterations {tags} are not contiguous from 0")
    from .models import layer_blocks

    layer_map = layer_blocks(dims) if dims else [np.arange(pol[0].size)]
    return (CheckpointSeries("policy", pol, tags), CheckpointSeries("reward", rew, tags),
            layer_map, len(tags) - 1)


def _snapshot_rows(run_dir, policy: CheckpointSeries):
    """(series, kind, iteration, step, vector) rows in trajectory order.

    Iteration checkpoint t closes iteration t; intra-iteration snapshot
    (t, i) was taken after step i of iteration t.
    """
    rows = [("policy", "checkpoint", t, None, v) for t, v in zip(policy.tags, policy.snapshots)]
    for f in sorted((Path(run_dir) / "checkpoints" / "snapshots").glob("policy_*.ckpt")):
        ck = load_checkpoint(f)
        rows.append(("policy", "snapshot", ck.iteration, int((ck.extra or {}).get("step", 0)), ck.values))
    rows.sort(key=lambda r: (r[2], math.inf if r[3] is None else r[3]))
    return rows


def analyze_run(run_dir) -> dict:
    """Compute the full analytics report for a persisted run.

    Iteration checkpoints 1..N are analysed (the outputs of the training
    loop); delta statistics therefore have N-1 entries.
    """
    policy_all, reward_all, layer_map, n_iter = load_run_series(run_dir)
    policy = CheckpointSeries("policy", policy_all.snapshots[1:], policy_all.tags[1:])
    reward = CheckpointSeries("reward", reward_all.snapshots[1:], reward_all.tags[1:])
    report: dict = {"n_iterations": n_iter, "flags": []}
    if n_iter < 2:
        report["flags"].append("insufficient-iterations")
        for key in ("procrustes_disparity", "distance_correlation", "relative_angle_deg",
                    "pearson_delta_corr", "layerwise_angles"):
            report[key] = None
    else:
        proc = procrustes_disparity(policy, reward)
        report["procrustes_disparity"] = proc.value
        if proc.flag:
            report["flags"].append(f"procrustes:{proc.flag}")
        dcor, angles, pearson = [], [], []
        for i, tag in enumerate(policy.tags[1:], start=2):
            sub_p = CheckpointSeries("policy", policy.snapshots[:i], policy.tags[:i])
            sub_r = CheckpointSeries("reward", reward.snapshots[:i], reward.tags[:i])
            m = distance_correlation(sub_p, sub_r)
            dcor.append({"iteration": tag, "value": m.value, "flag": m.flag})
            try:
                ang = relative_angle(policy.delta(tag), reward.delta(tag))
                angles.append({"iteration": tag, "value": ang, "flag": None})
            except UndefinedAngle:
                angles.append({"iteration": tag, "value": None, "flag": "undefined-angle"})
            pm = pearson_delta_correlation(policy, reward, tag)
            pearson.append({"iteration": tag, "value": pm.value, "flag": pm.flag})
        tags, mat, flags = layerwise_angles(policy, reward, layer_map)
        report["distance_correlation"] = dcor
        report["relative_angle_deg"] = angles
        report["pearson_delta_corr"] = pearson
        report["layerwise_angles"] = {
            "layers": [f"layer_{j}" for j in range(len(layer_map))],
            "rows": [{"iteration": t, "angles": [None if np.isnan(a) else float(a) for a in row]}
                     for t, row in zip(tags, mat)],
            "degenerate_cells": [list(f) for f in flags],
        }
    rows = _snapshot_rows(run_dir, policy_all)
    rows += [("reward", "checkpoint", t, None, v) for t, v in zip(reward_all.tags, reward_all.snapshots)]
    pca_dims = 3 if len(rows) >= 4 else 2
    if len(rows) >= pca_dims + 1:
        pca = pca_project(np.stack([r[4] for r in rows]), dims=pca_dims)
        report["pca"] = {
            "dims": pca.coords.shape[1],
            "flag": pca.flag,
            "points": [{"series": s, "kind": kind, "iteration": t, "step": st,
                        "coords": [float(c) for c in xy]}
                       for (s, kind, t, st, _), xy in zip(rows, pca.coords)],
        }
    else:
        report["pca"] = None
        report["flags"].append("pca:too-few-snapshots")
    return report


def write_report(report: dict, out_dir) -> None:
    """``report.json`` plus one CSV per plot under ``plotdata/``."""
    out = Path(out_dir)
    (out / "plotdata").mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")

    with open(out / "plotdata" / "trajectory.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        pca = report.get("pca")
        ndim = pca["dims"] if pca else 0
        w.writerow(["series", "kind", "iteration", "step"] + [f"pc{j + 1}" for j in range(ndim)])
        for p in (pca or {}).get("points", []):
            step = "" if p["step"] is None else p["step"]
            w.writerow([p["series"], p["kind"], p["iteration"], step] + [repr(c) for c in p["coords"]])

    with open(out / "plotdata" / "angles.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        lw = report.get("layerwise_angles") or {"layers": [], "rows": []}
        w.writerow(["iteration", "global_angle_deg"] + [f"{name}_deg" for name in lw["layers"]])
        glob = {e["iteration"]: e["value"] for e in report.get("relative_angle_deg") or []}
        for row in lw["rows"]:
            vals = [glob.get(row["iteration"])] + row["angles"]
            w.writerow([row["iteration"]] + ["" if v is None else repr(v) for v in vals])

    with open(out / "plotdata" / "correlations.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "distance_correlation", "pearson_delta_corr"])
        dc = report.get("distance_correlation") or []
        pc = {e["iteration"]: e["value"] for e in report.get("pearson_delta_corr") or []}
        for e in dc:
            w.writerow([e["iteration"], repr(e["value"]), repr(pc.get(e["iteration"]))])
