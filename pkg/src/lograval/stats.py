"""Dataset-level curvature statistics.

Covers the forward/backward activation covariances behind KFAC, the EKFAC
eigenvalue correction, and the (projected) empirical Fisher used as the
Hessian for influence scoring. Accumulators stream over batches and can be
merged across shards.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .binio import Reader, pack_name
from .errors import DimensionError, FormatError, PreconditionError
from .nn import LayerTrace
from .numerics import EigenDecomposition, sym_eig

DAMPING_FACTOR = 0.1
DAMPING_FLOOR = 1e-12


@dataclass
class KroneckerFactors:
    """Running sums for the uncentered covariances of one layer.

    ``cov_forward = sum_t x_t x_t^T / M`` and ``cov_backward`` likewise over the
    output gradients, with ``M`` the number of unmasked tokens seen.
    """

    layer_name: str
    n_in: int
    n_out: int
    forward_sum: np.ndarray = None
    backward_sum: np.ndarray = None
    token_count: int = 0
    eig_forward: EigenDecomposition | None = None
    eig_backward: EigenDecomposition | None = None

    def __post_init__(self):
        if self.forward_sum is None:
            self.forward_sum = np.zeros((self.n_in, self.n_in))
        if self.backward_sum is None:
            self.backward_sum = np.zeros((self.n_out, self.n_out))

    def update(self, trace: LayerTrace) -> "KroneckerFactors":
        if trace.bwd_outgrads is None:
            raise PreconditionError(f"trace for {trace.layer_name!r} has no backward pass")
        if trace.fwd_inputs.shape[2] != self.n_in or trace.bwd_outgrads.shape[2] != self.n_out:
            raise DimensionError(
                f"{self.layer_name}: trace dims ({trace.fwd_inputs.shape[2]}, "
                f"{trace.bwd_outgrads.shape[2]}) differ from ({self.n_in}, {self.n_out})"
            )
        mask = trace.mask
        x = trace.fwd_inputs[mask]
        d = trace.bwd_outgrads[mask]
        self.forward_sum += x.T @ x
        self.backward_sum += d.T @ d
        self.token_count += int(mask.sum())
        self.eig_forward = self.eig_backward = None
        return self

    def merge(self, other: "KroneckerFactors") -> "KroneckerFactors":
        if (other.n_in, other.n_out) != (self.n_in, self.n_out):
            raise DimensionError(f"cannot merge factors of {self.layer_name} with mismatched dims")
        return KroneckerFactors(
            self.layer_name,
            self.n_in,
            self.n_out,
            self.forward_sum + other.forward_sum,
            self.backward_sum + other.backward_sum,
            self.token_count + other.token_count,
        )

    @property
    def cov_forward(self) -> np.ndarray:
        return self.forward_sum / max(self.token_count, 1)

    @property
    def cov_backward(self) -> np.ndarray:
        return self.backward_sum / max(self.token_count, 1)

    def fit(self) -> "KroneckerFactors":
        if self.token_count == 0:
            raise PreconditionError(f"no tokens accumulated for {self.layer_name!r}")
        self.eig_forward = sym_eig(self.cov_forward)
        self.eig_backward = sym_eig(self.cov_backward)
        return self

    @property
    def fitted(self) -> bool:
        return self.eig_forward is not None and self.eig_backward is not None


def accumulate_covariances(
    traces_per_batch, factors: dict[str, KroneckerFactors] | None = None
) -> dict[str, KroneckerFactors]:
    """Fold an iterable of ``{layer: LayerTrace}`` dicts into KFAC factors."""
    factors = {} if factors is None else factors
    for traces in traces_per_batch:
        for name, trace in traces.items():
            if name not in factors:
                factors[name] = KroneckerFactors(
                    name, trace.fwd_inputs.shape[2], trace.bwd_outgrads.shape[2]
                )
            factors[name].update(trace)
    return factors


def kfac_eigenstructure(factors: KroneckerFactors) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues of ``C_F kron C_B`` without forming it.

    Returns the descending products ``lam_F[a] * lam_B[b]`` and an ``(n, 2)``
    array of ``(a, b)`` pairs; eigenvector ``j`` is
    ``kron(Q_F[:, a_j], Q_B[:, b_j])``.
    """
    if not factors.fitted:
        raise PreconditionError(f"eigendecompositions of {factors.layer_name!r} not fitted")
    products = np.outer(factors.eig_forward.values, factors.eig_backward.values).ravel()
    order = np.argsort(-products, kind="stable")
    pairs = np.stack(np.unravel_index(order, (factors.n_in, factors.n_out)), axis=1)
    return products[order], pairs


def damping_from(eig: EigenDecomposition, factor: float = DAMPING_FACTOR) -> float:
    """``factor * mean(eigenvalues)``, floored at 1e-12."""
    if eig.dim == 0:
        return DAMPING_FLOOR
    return float(max(factor * float(np.mean(eig.values)), DAMPING_FLOOR))


@dataclass
class EkfacEigenvalues:
    layer_name: str
    corrected: np.ndarray  # (n_out, n_in)
    sample_count: int = 0


class EkfacAccumulator:
    """Second moments of per-sample gradients in the KFAC eigenbasis."""

    def __init__(self, factors: KroneckerFactors):
        if not factors.fitted:
            raise PreconditionError(
                f"EKFAC needs fitted eigendecompositions for {factors.layer_name!r}"
            )
        self.factors = factors
        self.sums = np.zeros((factors.n_out, factors.n_in))
        self.count = 0

    def update(self, grads: np.ndarray) -> "EkfacAccumulator":
        grads = np.asarray(grads, dtype=np.float64)
        if grads.ndim == 2:
            grads = grads[None]
        rotated = self.factors.eig_backward.vectors.T @ grads @ self.factors.eig_forward.vectors
        self.sums += np.sum(rotated * rotated, axis=0)
        self.count += grads.shape[0]
        return self

    def result(self) -> EkfacEigenvalues:
        return EkfacEigenvalues(
            self.factors.layer_name, self.sums / max(self.count, 1), self.count
        )


def ekfac_correct(factors: KroneckerFactors, per_sample_grads) -> EkfacEigenvalues:
    """``corrected[j, k] = mean_n ((Q_B^T dW_n Q_F)[j, k])**2``."""
    return EkfacAccumulator(factors).update(per_sample_grads).result()


# --- projected Hessian -------------------------------------------------------


@dataclass
class HessianBlock:
    layer_name: str
    offset: int
    matrix: np.ndarray
    sample_count: int
    eig: EigenDecomposition
    damping: float

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]


@dataclass
class ProjectedHessian:
    """Block-diagonal projected empirical Fisher, one block per layer.

    A single block named ``"global"`` is the dense variant.
    """

    blocks: list[HessianBlock]

    @property
    def dim(self) -> int:
        return sum(b.dim for b in self.blocks)

    @property
    def sample_count(self) -> int:
        return self.blocks[0].sample_count if self.blocks else 0

    def dense(self) -> np.ndarray:
        out = np.zeros((self.dim, self.dim))
        for b in self.blocks:
            out[b.offset : b.offset + b.dim, b.offset : b.offset + b.dim] = b.matrix
        return out

    def with_damping(self, damping: float | dict[str, float]) -> "ProjectedHessian":
        blocks = []
        for b in self.blocks:
            lam = damping[b.layer_name] if isinstance(damping, dict) else damping
            blocks.append(HessianBlock(b.layer_name, b.offset, b.matrix, b.sample_count, b.eig, float(lam)))
        return ProjectedHessian(blocks)

    def block(self, name: str) -> HessianBlock:
        for b in self.blocks:
            if b.layer_name == name:
                return b
        raise KeyError(name)


class HessianAccumulator:
    """Streams projected gradients into per-layer outer-product sums."""

    def __init__(self, layout: list[tuple[str, int]], dense: bool = False):
        self.layout = list(layout)
        self.dense = dense
        total = sum(d for _, d in self.layout)
        if dense:
            self.sums = {"global": np.zeros((total, total))}
        else:
            self.sums = {name: np.zeros((d, d)) for name, d in self.layout}
        self.count = 0

    @property
    def total_dim(self) -> int:
        return sum(d for _, d in self.layout)

    def update(self, grads) -> "HessianAccumulator":
        grads = np.asarray(grads, dtype=np.float64)
        if grads.ndim == 1:
            grads = grads[None]
        if grads.shape[1] != self.total_dim:
            raise DimensionError(f"records of width {grads.shape[1]}, layout needs {self.total_dim}")
        if self.dense:
            self.sums["global"] += grads.T @ grads
        else:
            offset = 0
            for name, d in self.layout:
                part = grads[:, offset : offset + d]
                self.sums[name] += part.T @ part
                offset += d
        self.count += grads.shape[0]
        return self

    def merge(self, other: "HessianAccumulator") -> "HessianAccumulator":
        if other.layout != self.layout or other.dense != self.dense:
            raise DimensionError("cannot merge accumulators with different layouts")
        out = HessianAccumulator(self.layout, self.dense)
        out.sums = {k: self.sums[k] + other.sums[k] for k in self.sums}
        out.count = self.count + other.count
        return out

    def finalize(self, damping_factor: float = DAMPING_FACTOR) -> ProjectedHessian:
        if self.count < 1:
            raise PreconditionError("projected Hessian needs at least one record")
        if self.dense:
            parts = [("global", self.total_dim)]
        else:
            parts = self.layout
        blocks, offset = [], 0
        for name, d in parts:
            matrix = self.sums[name] / self.count
            matrix = 0.5 * (matrix + matrix.T)
            eig = sym_eig(matrix)
            blocks.append(
                HessianBlock(name, offset, matrix, self.count, eig, damping_from(eig, damping_factor))
            )
            offset += d
        return ProjectedHessian(blocks)


def fit_projected_hessian(
    records,
    layout: list[tuple[str, int]],
    dense: bool = False,
    damping_factor: float = DAMPING_FACTOR,
) -> ProjectedHessian:
    """``H = mean_n g_n g_n^T`` restricted to per-layer diagonal blocks."""
    return HessianAccumulator(layout, dense).update(records).finalize(damping_factor)


# --- LGST statistics file ----------------------------------------------------

STATS_MAGIC = b"LGST"
STATS_VERSION = 1


def _pack_array(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def _pack_eig(e: EigenDecomposition) -> bytes:
    return _pack_array(e.values) + _pack_array(e.vectors)


def stats_bytes(
    factors: dict[str, KroneckerFactors], hessian: ProjectedHessian, fingerprint: bytes
) -> bytes:
    """Serialize KFAC factors and the projected Hessian.

    Layout: magic, version u32, fingerprint (32 bytes), factor count u32, per
    factor {name, n_in u32, n_out u32, tokens u64, C_F, C_B, eig_F, eig_B},
    block count u32, per block {name, offset u32, k u32, N u64, lambda f64,
    H, eig}. Arrays are row-major little-endian float64.
    """
    if len(fingerprint) != 32:
        raise ValueError("fingerprint must be 32 bytes")
    parts = [STATS_MAGIC, struct.pack("<I", STATS_VERSION), fingerprint]
    parts.append(struct.pack("<I", len(factors)))
    for f in factors.values():
        if not f.fitted:
            f.fit()
        parts += [
            pack_name(f.layer_name),
            struct.pack("<IIQ", f.n_in, f.n_out, f.token_count),
            _pack_array(f.cov_forward),
            _pack_array(f.cov_backward),
            _pack_eig(f.eig_forward),
            _pack_eig(f.eig_backward),
        ]
    parts.append(struct.pack("<I", len(hessian.blocks)))
    for b in hessian.blocks:
        parts += [
            pack_name(b.layer_name),
            struct.pack("<IIQd", b.offset, b.dim, b.sample_count, b.damping),
            _pack_array(b.matrix),
            _pack_eig(b.eig),
        ]
    return b"".join(parts)


@dataclass
class StatsFile:
    fingerprint: bytes
    factors: dict[str, KroneckerFactors] = field(default_factory=dict)
    hessian: ProjectedHessian | None = None


def stats_from_bytes(data: bytes) -> StatsFile:
    r = Reader(data, "statistics file")
    magic = r.take(4)
    if magic != STATS_MAGIC:
        raise FormatError(f"bad statistics magic {magic!r}, expected {STATS_MAGIC!r}")
    (version,) = r.unpack("<I")
    if version != STATS_VERSION:
        raise FormatError(f"unsupported statistics version {version}")
    fingerprint = r.take(32)
    (count,) = r.unpack("<I")
    factors = {}
    for _ in range(count):
        name = r.name()
        n_in, n_out, tokens = r.unpack("<IIQ")
        cf = r.array((n_in, n_in))
        cb = r.array((n_out, n_out))
        ef = EigenDecomposition(r.array((n_in,)), r.array((n_in, n_in)))
        eb = EigenDecomposition(r.array((n_out,)), r.array((n_out, n_out)))
        f = KroneckerFactors(name, n_in, n_out, cf * tokens, cb * tokens, tokens, ef, eb)
        factors[name] = f
    (nblocks,) = r.unpack("<I")
    blocks = []
    for _ in range(nblocks):
        name = r.name()
        offset, k, n, lam = r.unpack("<IIQd")
        h = r.array((k, k))
        eig = EigenDecomposition(r.array((k,)), r.array((k, k)))
        blocks.append(HessianBlock(name, offset, h, n, eig, lam))
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes in statistics file")
    return StatsFile(fingerprint, factors, ProjectedHessian(blocks))


def save_stats(path, factors, hessian, fingerprint: bytes) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(stats_bytes(factors, hessian, fingerprint))
    tmp.replace(path)
    return path


def load_stats(path) -> StatsFile:
    return stats_from_bytes(Path(path).read_bytes())


def digest(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()
