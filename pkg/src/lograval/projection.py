"""Kronecker-factored gradient projection.

A projection ``P = kron(P_i, P_o)`` is never materialized. Because a linear
layer's per-sample gradient is ``vec(dW) = sum_t kron(x_t, dx_t)``, the
projected gradient is ``sum_t kron(P_i x_t, P_o dx_t)``: project the two
activations first, then take the small outer product.

Vectorization is column-major throughout (``numerics.vec``), so a projected
gradient is ``vec(P_o dW P_i^T)`` of shape ``(k_o, k_i)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .binio import Reader
from .errors import DimensionError, FormatError, NumericError, PreconditionError, RankError
from .nn import Batch, Bottleneck, LayerTrace, Model, adapter_name, forward_backward
from .numerics import kron, vec
from .stats import KroneckerFactors

DEFAULT_RANK = 16
ORTHO_RETRIES = 3
NAIVE_MAX_ELEMENTS = 50_000_000


@dataclass(frozen=True)
class ProjectionPair:
    layer_name: str
    p_in: np.ndarray  # (k_i, n_i)
    p_out: np.ndarray  # (k_o, n_o)
    init_kind: str = "random"

    @property
    def k_in(self) -> int:
        return self.p_in.shape[0]

    @property
    def k_out(self) -> int:
        return self.p_out.shape[0]

    @property
    def n_in(self) -> int:
        return self.p_in.shape[1]

    @property
    def n_out(self) -> int:
        return self.p_out.shape[1]

    @property
    def dim(self) -> int:
        return self.k_in * self.k_out

    @property
    def stored_elements(self) -> int:
        return self.p_in.size + self.p_out.size

    @property
    def naive_elements(self) -> int:
        return self.dim * self.n_in * self.n_out


@dataclass(frozen=True)
class ProjectionSet:
    pairs: tuple[ProjectionPair, ...]

    def __post_init__(self):
        names = [p.layer_name for p in self.pairs]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate layer in projection set: {names}")

    @property
    def layout(self) -> list[tuple[str, int]]:
        return [(p.layer_name, p.dim) for p in self.pairs]

    @property
    def total_dim(self) -> int:
        return sum(p.dim for p in self.pairs)

    def pair(self, name: str) -> ProjectionPair:
        for p in self.pairs:
            if p.layer_name == name:
                return p
        raise KeyError(f"no projection for layer {name!r}")

    def offsets(self) -> dict[str, int]:
        out, offset = {}, 0
        for p in self.pairs:
            out[p.layer_name] = offset
            offset += p.dim
        return out

    def check_model(self, model: Model):
        for p in self.pairs:
            layer = model.layer(p.layer_name)
            if (layer.n_in, layer.n_out) != (p.n_in, p.n_out):
                raise DimensionError(
                    f"projection for {p.layer_name} is ({p.n_in}, {p.n_out}), "
                    f"layer is ({layer.n_in}, {layer.n_out})"
                )


def _per_layer(value, name: str) -> int:
    return int(value[name]) if isinstance(value, dict) else int(value)


def orthonormalize_rows(m: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Modified Gram-Schmidt on the rows of ``m``; raises if they are dependent."""
    q = np.array(m, dtype=np.float64)
    for i in range(q.shape[0]):
        norm0 = np.linalg.norm(q[i])
        for j in range(i):
            q[i] -= np.dot(q[j], q[i]) * q[j]
        # second pass restores orthogonality lost to cancellation
        for j in range(i):
            q[i] -= np.dot(q[j], q[i]) * q[j]
        norm = np.linalg.norm(q[i])
        if norm0 == 0.0 or norm <= tol * norm0:
            raise NumericError(f"row {i} is linearly dependent on earlier rows")
        q[i] /= norm
    return q


def _random_orthonormal(rng: np.random.Generator, k: int, n: int) -> np.ndarray:
    for _ in range(ORTHO_RETRIES + 1):
        try:
            return orthonormalize_rows(rng.standard_normal((k, n)))
        except NumericError:
            continue
    raise NumericError(f"could not draw {k} independent rows in R^{n} after {ORTHO_RETRIES} retries")


def init_random(model: Model, k_in, k_out, seed: int = 0, layers=None) -> ProjectionSet:
    """Gaussian projections with orthonormal rows, drawn in layer order.

    ``k_in``/``k_out`` are ints or ``{layer: int}`` dicts.
    """
    names = model.layer_names if layers is None else list(layers)
    rng = np.random.default_rng(seed)
    pairs = []
    for name in names:
        layer = model.layer(name)
        ki, ko = _per_layer(k_in, name), _per_layer(k_out, name)
        if not (1 <= ki <= layer.n_in and 1 <= ko <= layer.n_out):
            raise DimensionError(
                f"{name}: need 1 <= k_i <= {layer.n_in} and 1 <= k_o <= {layer.n_out}, "
                f"got k_i={ki}, k_o={ko}"
            )
        p_in = _random_orthonormal(rng, ki, layer.n_in)
        p_out = _random_orthonormal(rng, ko, layer.n_out)
        pairs.append(ProjectionPair(name, p_in, p_out, "random"))
    return ProjectionSet(tuple(pairs))


def identity_projections(model: Model, layers=None) -> ProjectionSet:
    names = model.layer_names if layers is None else list(layers)
    pairs = []
    for name in names:
        layer = model.layer(name)
        pairs.append(ProjectionPair(name, np.eye(layer.n_in), np.eye(layer.n_out), "identity"))
    return ProjectionSet(tuple(pairs))


def effective_rank(values: np.ndarray, rel_tol: float = 1e-10) -> int:
    if values.size == 0 or values[0] <= 0:
        return 0
    return int(np.sum(values > rel_tol * values[0]))


def init_pca(factors: dict[str, KroneckerFactors], k_in, k_out, layers=None) -> ProjectionSet:
    """Top eigenvectors of the forward / backward covariances as projection rows."""
    names = list(factors) if layers is None else list(layers)
    pairs = []
    for name in names:
        f = factors.get(name)
        if f is None or not f.fitted:
            raise PreconditionError(
                f"PCA initialization needs fitted covariances for layer {name!r}; "
                "run the covariance pass first"
            )
        ki, ko = _per_layer(k_in, name), _per_layer(k_out, name)
        rank_f = effective_rank(f.eig_forward.values)
        rank_b = effective_rank(f.eig_backward.values)
        if ki > rank_f:
            raise RankError(f"{name}: k_i={ki} exceeds forward covariance rank", rank_f)
        if ko > rank_b:
            raise RankError(f"{name}: k_o={ko} exceeds backward covariance rank", rank_b)
        p_in = f.eig_forward.vectors[:, :ki].T.copy()
        p_out = f.eig_backward.vectors[:, :ko].T.copy()
        pairs.append(ProjectionPair(name, p_in, p_out, "pca"))
    return ProjectionSet(tuple(pairs))


def _check_trace(trace: LayerTrace, pair: ProjectionPair):
    if trace.bwd_outgrads is None:
        raise PreconditionError(f"trace for {trace.layer_name!r} has no backward pass")
    if trace.fwd_inputs.shape[2] != pair.n_in or trace.bwd_outgrads.shape[2] != pair.n_out:
        raise DimensionError(
            f"trace dims ({trace.fwd_inputs.shape[2]}, {trace.bwd_outgrads.shape[2]}) "
            f"do not match projection ({pair.n_in}, {pair.n_out})"
        )


def project_batch(trace: LayerTrace, pair: ProjectionPair) -> np.ndarray:
    """Projected per-sample gradients ``(B, k_i * k_o)`` from one layer trace."""
    _check_trace(trace, pair)
    mask = trace.mask[..., None]
    a = (trace.fwd_inputs * mask) @ pair.p_in.T  # (B, T, k_i)
    b = trace.bwd_outgrads @ pair.p_out.T  # (B, T, k_o)
    out = np.einsum("bti,bto->bio", a, b)
    return out.reshape(trace.batch_size, pair.dim)


def project_per_sample(trace: LayerTrace, pair: ProjectionPair) -> np.ndarray:
    """``sum_t kron(P_i x_t, P_o dx_t)`` for a single-sample trace."""
    if trace.batch_size != 1:
        raise DimensionError(f"expected a single-sample trace, got batch of {trace.batch_size}")
    return project_batch(trace, pair)[0]


def naive_project_oracle(
    grad: np.ndarray, pair: ProjectionPair, max_elements: int = NAIVE_MAX_ELEMENTS
) -> np.ndarray:
    """Materialize ``kron(P_i, P_o)`` and apply it to ``vec(grad)``.

    Only meant as a reference for testing; refuses projections larger than
    ``max_elements`` entries.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != (pair.n_out, pair.n_in):
        raise DimensionError(f"gradient {grad.shape} vs projection ({pair.n_out}, {pair.n_in})")
    if pair.naive_elements > max_elements:
        raise MemoryError(
            f"naive projection needs {pair.naive_elements} elements (cap {max_elements})"
        )
    return kron(pair.p_in, pair.p_out) @ vec(grad)


def project_model(
    model: Model, batch: Batch, projections: ProjectionSet
) -> tuple[np.ndarray, dict[str, LayerTrace]]:
    """Forward + backward on ``batch``; returns ``(B, total_dim)`` projected grads."""
    _, _, traces = forward_backward(model, batch)
    parts = [project_batch(traces[p.layer_name], p) for p in projections.pairs]
    return np.concatenate(parts, axis=1), traces


def attach_bottleneck(model: Model, pair: ProjectionPair) -> Model:
    """Copy of ``model`` with an encoder/zero-core/decoder add-on on one layer.

    The decoder is stored as ``P_o^T`` so the core's gradient is exactly
    ``P_o dW P_i^T``.
    """
    layer = model.layer(pair.layer_name)
    if (layer.n_in, layer.n_out) != (pair.n_in, pair.n_out):
        raise DimensionError(
            f"projection ({pair.n_in}, {pair.n_out}) does not fit layer "
            f"{layer.name} ({layer.n_in}, {layer.n_out})"
        )
    out = model.copy()
    out.adapters[pair.layer_name] = Bottleneck(
        encoder=pair.p_in.copy(),
        core=np.zeros((pair.k_out, pair.k_in)),
        decoder=pair.p_out.T.copy(),
    )
    return out


def bottleneck_grad(model: Model, batch: Batch, layer_name: str) -> np.ndarray:
    """Per-sample gradients of the bottleneck core, column-major ``(B, k_i*k_o)``."""
    if layer_name not in model.adapters:
        raise PreconditionError(f"no bottleneck attached to {layer_name!r}")
    _, _, traces = forward_backward(model, batch)
    trace = traces[adapter_name(layer_name)]
    per_sample = np.einsum("bto,bti->boi", trace.bwd_outgrads, trace.fwd_inputs)
    return per_sample.transpose(0, 2, 1).reshape(len(batch), -1)


def parameter_report(projections: ProjectionSet) -> list[dict]:
    """Stored projection size versus a materialized ``k x n`` projection."""
    rows = []
    for p in projections.pairs:
        rows.append(
            {
                "layer": p.layer_name,
                "stored": p.stored_elements,
                "naive": p.naive_elements,
                "ratio": p.stored_elements / p.naive_elements,
            }
        )
    return rows


# --- LGPJ projection file ----------------------------------------------------

PROJ_MAGIC = b"LGPJ"
PROJ_VERSION = 1
_INIT_CODES = {"random": 0, "pca": 1, "identity": 2}
_INIT_NAMES = {v: k for k, v in _INIT_CODES.items()}


def projection_bytes(projections: ProjectionSet, fingerprint: bytes = b"\0" * 32) -> bytes:
    """Layout: magic, version u32, fingerprint (32 bytes), pair count u32, per
    pair {name len u16, name, init u8, k_i u32, n_i u32, k_o u32, n_o u32,
    P_i, P_o}; matrices row-major little-endian float64."""
    if len(fingerprint) != 32:
        raise ValueError("fingerprint must be 32 bytes")
    parts = [PROJ_MAGIC, struct.pack("<I", PROJ_VERSION), fingerprint]
    parts.append(struct.pack("<I", len(projections.pairs)))
    for p in projections.pairs:
        name = p.layer_name.encode("utf-8")
        parts.append(struct.pack("<H", len(name)) + name)
        parts.append(struct.pack("<BIIII", _INIT_CODES[p.init_kind], p.k_in, p.n_in, p.k_out, p.n_out))
        parts.append(np.ascontiguousarray(p.p_in, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(p.p_out, dtype="<f8").tobytes())
    return b"".join(parts)


def projection_payload(projections: ProjectionSet) -> bytes:
    """Fingerprint-free serialization, used to hash the projection itself."""
    return projection_bytes(projections)[4 + 4 + 32 :]


def projections_from_bytes(data: bytes) -> tuple[ProjectionSet, bytes]:
    r = Reader(data, "projection file")
    magic = r.take(4)
    if magic != PROJ_MAGIC:
        raise FormatError(f"bad projection magic {magic!r}, expected {PROJ_MAGIC!r}")
    (version,) = r.unpack("<I")
    if version != PROJ_VERSION:
        raise FormatError(f"unsupported projection version {version}")
    fingerprint = r.take(32)
    (count,) = r.unpack("<I")
    pairs = []
    for _ in range(count):
        name = r.name()
        code, ki, ni, ko, no = r.unpack("<BIIII")
        if code not in _INIT_NAMES:
            raise FormatError(f"unknown init kind code {code}")
        pairs.append(ProjectionPair(name, r.array((ki, ni)), r.array((ko, no)), _INIT_NAMES[code]))
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes in projection file")
    return ProjectionSet(tuple(pairs)), fingerprint


def save_projections(path, projections: ProjectionSet, fingerprint: bytes = b"\0" * 32) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(projection_bytes(projections, fingerprint))
    tmp.replace(path)
    return path


def load_projections(path) -> tuple[ProjectionSet, bytes]:
    return projections_from_bytes(Path(path).read_bytes())
