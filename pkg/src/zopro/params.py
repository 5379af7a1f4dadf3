"""Flat parameter-vector algebra, seeded noise and checkpoint files.

Parameter vectors are plain 1-D ``float64`` numpy arrays. The helpers here
add dimension checks and the two geometric primitives the direction sampler
is built from: orthogonal projection and norm-matched composition.
"""

from __future__ import annotations

import io
import os
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

# Absolute threshold on norms below which a vector is treated as zero.
DEGENERACY_EPS = 1e-12

CHECKPOINT_MAGIC = "ZOPRO1"


class DimensionError(ValueError):
    """Raised when vector dimensions are invalid or do not match."""


class InvalidNoiseError(ValueError):
    """Raised when a noise direction is (numerically) zero."""


@dataclass(frozen=True)
class NoiseSpec:
    seed: int
    dim: int


class Flagged(NamedTuple):
    vector: np.ndarray
    flag: str | None


def as_param_vector(values, dim: int | None = None) -> np.ndarray:
    """Validate ``values`` as a finite 1-D float64 vector (copying if needed)."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise DimensionError(f"expected a non-empty 1-D vector, got shape {v.shape}")
    if dim is not None and v.size != dim:
        raise DimensionError(f"expected dim {dim}, got {v.size}")
    if not np.all(np.isfinite(v)):
        raise ValueError("parameter vector contains non-finite entries")
    return v


def _check_pair(x: np.ndarray, y: np.ndarray) -> None:
    if x.shape != y.shape or x.ndim != 1:
        raise DimensionError(f"dimension mismatch: {x.shape} vs {y.shape}")


def derive_seed(*keys: int) -> int:
    """Mix integer keys into one 64-bit seed, stable across processes."""
    ss = np.random.SeedSequence([int(k) & 0xFFFFFFFFFFFFFFFF for k in keys])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def sample_gaussian(spec: NoiseSpec) -> np.ndarray:
    if spec.dim < 1:
        raise DimensionError(f"noise dimension must be positive, got {spec.dim}")
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    return rng.standard_normal(spec.dim)


def dot(x: np.ndarray, y: np.ndarray) -> float:
    _check_pair(x, y)
    return float(np.dot(x, y))


def norm(x: np.ndarray) -> float:
    return float(np.sqrt(np.dot(x, x)))


def axpy(a: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Return ``y + a*x`` as a new vector."""
    _check_pair(x, y)
    return y + a * x


def project_orthogonal(v: np.ndarray, r: np.ndarray) -> Flagged:
    """Remove the component of ``v`` along ``r``.

    When ``r`` is numerically zero there is nothing to project out; ``v`` is
    returned unchanged with the flag ``"no-projection"``.
    """
    _check_pair(v, r)
    rr = float(np.dot(r, r))
    if np.sqrt(rr) < DEGENERACY_EPS:
        return Flagged(v.copy(), "no-projection")
    out = v - (float(np.dot(v, r)) / rr) * r
    # one refinement pass keeps <out, r> at round-off level for large |v.r|
    out -= (float(np.dot(out, r)) / rr) * r
    return Flagged(out, None)


def compose_perturbation(delta_pi: np.ndarray, u: np.ndarray, alpha: float) -> Flagged:
    """Blend the previous policy update with noise rescaled to its norm.

    ``z = alpha*delta_pi + sqrt(1 - alpha**2) * (u/|u|) * |delta_pi|``.
    Without a usable ``delta_pi`` (first iteration) ``u`` is returned as is,
    flagged ``"cold-start"``.
    """
    _check_pair(delta_pi, u)
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    dp_norm = norm(delta_pi)
    if dp_norm < DEGENERACY_EPS:
        return Flagged(u.copy(), "cold-start")
    if alpha == 1.0:
        return Flagged(delta_pi.copy(), None)
    u_norm = norm(u)
    if u_norm < DEGENERACY_EPS:
        raise InvalidNoiseError("noise direction has zero norm")
    z = alpha * delta_pi + (np.sqrt(1.0 - alpha * alpha) * dp_norm / u_norm) * u
    return Flagged(z, None)


def cosine(x: np.ndarray, y: np.ndarray) -> float:
    _check_pair(x, y)
    nx, ny = norm(x), norm(y)
    if nx < DEGENERACY_EPS or ny < DEGENERACY_EPS:
        raise ValueError("cosine undefined for a zero vector")
    return float(np.dot(x, y)) / (nx * ny)


# --- checkpoint files -------------------------------------------------------
#
# Layout (all header lines ASCII, newline-terminated):
#
#   ZOPRO1
#   dim <d>
#   iteration <t>
#   seed <s>
#   [arch <comma-separated layer dims> <activation>]
#   [<key> <value>]...
#   END
#   <d little-endian IEEE-754 float64 values>


@dataclass
class Checkpoint:
    values: np.ndarray
    iteration: int = 0
    seed: int = 0
    arch: tuple[tuple[int, ...], str] | None = None
    extra: dict[str, str] | None = None


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    values = as_param_vector(ckpt.values)
    lines = [
        CHECKPOINT_MAGIC,
        f"dim {values.size}",
        f"iteration {int(ckpt.iteration)}",
        f"seed {int(ckpt.seed)}",
    ]
    if ckpt.arch is not None:
        dims, activation = ckpt.arch
        lines.append(f"arch {','.join(str(int(d)) for d in dims)} {activation}")
    for key, value in sorted((ckpt.extra or {}).items()):
        if " " in key or "\n" in key + str(value):
            raise ValueError(f"invalid checkpoint header entry {key!r}")
        lines.append(f"{key} {value}")
    lines.append("END")
    header = ("\n".join(lines) + "\n").encode("ascii")
    return header + values.astype("<f8").tobytes()


def parse_checkpoint(data: bytes) -> Checkpoint:
    stream = io.BytesIO(data)
    magic = stream.readline().decode("ascii").rstrip("\n")
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"not a checkpoint file (magic {magic!r})")
    fields: dict[str, str] = {}
    while True:
        raw = stream.readline()
        if not raw:
            raise ValueError("truncated checkpoint header")
        line = raw.decode("ascii").rstrip("\n")
        if line == "END":
            break
        key, _, value = line.partition(" ")
        fields[key] = value
    try:
        dim = int(fields.pop("dim"))
        iteration = int(fields.pop("iteration"))
        seed = int(fields.pop("seed"))
    except KeyError as exc:
        raise ValueError(f"checkpoint header missing {exc.args[0]!r}") from None
    arch = None
    if "arch" in fields:
        dims_text, activation = fields.pop("arch").split(" ")
        arch = (tuple(int(d) for d in dims_text.split(",")), activation)
    payload = stream.read()
    if len(payload) != 8 * dim:
        raise ValueError(f"checkpoint payload has {len(payload)} bytes, expected {8 * dim}")
    values = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return Checkpoint(values, iteration, seed, arch, fields or None)


def save_checkpoint(path: str | os.PathLike, ckpt: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ckpt))
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())
