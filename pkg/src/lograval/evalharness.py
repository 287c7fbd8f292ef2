"""Counterfactual evaluation of data valuations.

Two checks, both driven by actual retraining:

* brittleness: drop the top-k examples a method ranks as most valuable for a
  test point, retrain, and see whether the point gets misclassified;
* linear datamodeling score (LDS): rank-correlate value sums over random
  half-size subsets with the test utility of models retrained on them.

Identification (computing values) only ever uses the final trained model;
retraining happens exclusively in the evaluation step.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .errors import ConfigError, DimensionError, PreconditionError
from .influence import score
from .nn import Batch, Model, TrainConfig
from .numerics import spearman
from .projection import (
    ProjectionSet,
    effective_rank,
    init_pca,
    init_random,
    project_model,
)
from .stats import (
    DAMPING_FACTOR,
    EkfacAccumulator,
    KroneckerFactors,
    accumulate_covariances,
    fit_projected_hessian,
)


METHODS = ("logra_random", "logra_pca", "grad_dot", "rep_sim", "ekfac")


# --- data --------------------------------------------------------------------


def make_synthetic(
    n_train: int = 200,
    n_test: int = 100,
    label_noise: float = 0.1,
    separation: float = 1.0,
    seed: int = 0,
) -> tuple[Batch, Batch]:
    """Two isotropic 2-D Gaussians at ``(+-separation, 0)``, balanced classes.

    ``label_noise`` of the training labels are flipped; test labels are clean.
    """
    rng = np.random.default_rng(seed)

    def draw(n):
        y = np.arange(n) % 2
        rng.shuffle(y)
        centers = np.stack([np.where(y == 1, separation, -separation), np.zeros(n)], axis=1)
        return centers + rng.standard_normal((n, 2)), y

    x_tr, y_tr = draw(n_train)
    x_te, y_te = draw(n_test)
    flip = rng.permutation(n_train)[: int(round(label_noise * n_train))]
    y_tr[flip] = 1 - y_tr[flip]
    return Batch.from_arrays(x_tr, y_tr), Batch.from_arrays(x_te, y_te)


def load_csv(path) -> Batch:
    """Numeric CSV with a header row; the last column holds integer labels."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"data file not found: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise ConfigError(f"{path} has no data rows")
    try:
        data = np.array([[float(v) for v in row] for row in rows[1:] if row], dtype=np.float64)
    except ValueError as exc:
        raise ConfigError(f"{path}: non-numeric value ({exc})") from exc
    return Batch.from_arrays(data[:, :-1], data[:, -1].astype(np.intp))


def batch_digest(batch: Batch) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(batch.inputs, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(batch.targets).astype("<f8").tobytes())
    if batch.mask is not None:
        h.update(np.ascontiguousarray(batch.mask).tobytes())
    return h.hexdigest()


@dataclass(frozen=True)
class ModelSpec:
    widths: tuple[int, ...]
    activations: tuple[str, ...] | None = None
    loss: str = "cross_entropy"

    def build(self, seed: int) -> Model:
        acts = None if self.activations is None else list(self.activations)
        return nn.init_model(list(self.widths), acts, self.loss, seed)


def fit_model(spec: ModelSpec, data: Batch, cfg: TrainConfig, seed: int) -> Model:
    """Initialize with ``seed`` and train with shuffling seed ``seed`` too."""
    return nn.train(spec.build(seed), data, TrainConfig(**{**asdict(cfg), "seed": seed}))


# --- valuation methods -------------------------------------------------------


@dataclass
class ValuationResult:
    """``values[t, j]``: value of train example ``j`` for test target ``t``."""

    method: str
    values: np.ndarray
    fingerprint: str = ""

    def for_target(self, t: int) -> np.ndarray:
        return self.values[t]


def clamp_ranks(model: Model, k_in: int, k_out: int, factors=None) -> tuple[dict, dict]:
    """Per-layer ranks ``min(k, width)``; with KFAC factors also ``<= rank``."""
    ki, ko = {}, {}
    for layer in model.layers:
        a, b = min(k_in, layer.n_in), min(k_out, layer.n_out)
        if factors is not None:
            f = factors[layer.name]
            a = min(a, max(effective_rank(f.eig_forward.values), 1))
            b = min(b, max(effective_rank(f.eig_backward.values), 1))
        ki[layer.name], ko[layer.name] = a, b
    return ki, ko


def fit_factors(model: Model, train: Batch, batch_size: int = 256) -> dict[str, KroneckerFactors]:
    def traces():
        for start in range(0, len(train), batch_size):
            _, _, tr = nn.forward_backward(model, train.subset(np.arange(start, min(start + batch_size, len(train)))))
            yield tr

    factors = accumulate_covariances(traces())
    for f in factors.values():
        f.fit()
    return factors


class LograValuer:
    """Projected influence with random or PCA-initialized Kronecker projections."""

    def __init__(
        self,
        model: Model,
        train: Batch,
        init: str = "random",
        k_in: int = 8,
        k_out: int = 8,
        seed: int = 0,
        damping_factor: float = DAMPING_FACTOR,
        projections: ProjectionSet | None = None,
    ):
        self.model = model
        if projections is None:
            if init == "pca":
                factors = fit_factors(model, train)
                ki, ko = clamp_ranks(model, k_in, k_out, factors)
                projections = init_pca(factors, ki, ko, layers=model.layer_names)
            elif init == "random":
                ki, ko = clamp_ranks(model, k_in, k_out)
                projections = init_random(model, ki, ko, seed)
            else:
                raise ValueError(f"unknown projection init {init!r}")
        self.projections = projections
        self.train_grads, _ = project_model(model, train, projections)
        self.hessian = fit_projected_hessian(self.train_grads, projections.layout, damping_factor=damping_factor)

    def test_grads(self, test: Batch) -> np.ndarray:
        return project_model(self.model, test, self.projections)[0]

    def values(self, test: Batch, mode: str = "influence") -> np.ndarray:
        return score(self.test_grads(test), self.train_grads, self.hessian, mode).scores


class GradDotValuer:
    def __init__(self, model: Model, train: Batch):
        self.model = model
        self.train_grads = nn.flat_per_sample_grads(model, train)

    def values(self, test: Batch) -> np.ndarray:
        return nn.flat_per_sample_grads(self.model, test) @ self.train_grads.T


class RepSimValuer:
    """Dot product of the inputs to the final linear layer."""

    def __init__(self, model: Model, train: Batch):
        self.model = model
        self.train_reps = self.representations(train)

    def representations(self, data: Batch) -> np.ndarray:
        _, traces = nn.forward(self.model, data)
        x = traces[self.model.layers[-1].name].fwd_inputs * data.token_mask()[..., None]
        return x.sum(axis=1)

    def values(self, test: Batch) -> np.ndarray:
        return self.representations(test) @ self.train_reps.T


class EkfacValuer:
    """Layerwise influence with the KFAC eigenbasis and corrected eigenvalues."""

    def __init__(self, model: Model, train: Batch, damping_factor: float = DAMPING_FACTOR):
        self.model = model
        self.factors = fit_factors(model, train)
        grads = nn.per_sample_grads(model, train)
        self.train_grads = {name: grads[name] for name in model.layer_names}
        self.corrected = {}
        self.damping = {}
        for name in model.layer_names:
            ek = EkfacAccumulator(self.factors[name]).update(self.train_grads[name]).result()
            self.corrected[name] = ek.corrected
            self.damping[name] = max(damping_factor * float(ek.corrected.mean()), 1e-12)

    def precondition(self, name: str, grads: np.ndarray) -> np.ndarray:
        f = self.factors[name]
        qb, qf = f.eig_backward.vectors, f.eig_forward.vectors
        rotated = qb.T @ grads @ qf
        rotated = rotated / (self.corrected[name] + self.damping[name])
        return qb @ rotated @ qf.T

    def values(self, test: Batch) -> np.ndarray:
        grads = nn.per_sample_grads(self.model, test)
        total = 0.0
        for name in self.model.layer_names:
            pre = self.precondition(name, grads[name])
            total = total + np.einsum("aoi,boi->ab", pre, self.train_grads[name])
        return total


def fit_valuer(method: str, model: Model, train: Batch, **opts):
    if method == "logra_random":
        return LograValuer(model, train, "random", **opts)
    if method == "logra_pca":
        return LograValuer(model, train, "pca", **opts)
    if method == "grad_dot":
        return GradDotValuer(model, train)
    if method == "rep_sim":
        return RepSimValuer(model, train)
    if method == "ekfac":
        return EkfacValuer(model, train, opts.get("damping_factor", DAMPING_FACTOR))
    raise ConfigError(f"unknown valuation method {method!r}; choose from {METHODS}")


def value_all(method: str, model: Model, train: Batch, test: Batch, valuer=None, **opts) -> ValuationResult:
    """Values of every train example for each test target, from ``model`` alone.

    A previously fitted ``valuer`` for the same model and train set is reused.
    """
    before = nn.train_calls.value
    if valuer is None:
        valuer = fit_valuer(method, model, train, **opts)
    values = np.atleast_2d(valuer.values(test))
    if nn.train_calls.value != before:
        raise PreconditionError("valuation must not retrain; only evaluation may")
    if values.shape != (len(test), len(train)):
        raise DimensionError(f"{method} produced values of shape {values.shape}")
    fp = hashlib.sha256(
        json.dumps({"method": method, "opts": opts}, sort_keys=True, default=str).encode()
        + nn.checkpoint_bytes(model)
    ).hexdigest()[:16]
    return ValuationResult(method, values, fp)


def random_values(n_targets: int, n_train: int, seed: int) -> ValuationResult:
    rng = np.random.default_rng(seed)
    return ValuationResult("random", rng.standard_normal((n_targets, n_train)), f"random-{seed}")


# --- retraining with a content-addressed cache -------------------------------


def _job_key(spec, data_digest, subset, cfg, seed, test_digest) -> str:
    payload = json.dumps(
        {
            "spec": asdict(spec),
            "data": data_digest,
            "subset": hashlib.sha256(np.asarray(subset, dtype="<i8").tobytes()).hexdigest(),
            "cfg": {**asdict(cfg), "seed": seed},
            "test": test_digest,
        },
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode()).hexdigest()


def _retrain_job(args):
    spec, train, subset, cfg, seed, test = args
    model = fit_model(spec, train.subset(subset), cfg, seed)
    outputs, _ = nn.forward(model, test)
    losses, _ = nn.loss_and_grad(model, outputs, test)
    preds = outputs.argmax(axis=2)[:, 0] if model.loss == "cross_entropy" else np.zeros(len(test))
    return losses, preds


@dataclass
class RetrainResult:
    losses: np.ndarray  # (n_test,)
    predictions: np.ndarray  # (n_test,)


class RetrainCache:
    """Retrained-model test outcomes keyed by (subset, seed, config, data).

    Without a directory the cache lives in memory only. Files are written to a
    temporary name and renamed, so concurrent readers never see partial data.
    """

    def __init__(self, directory=None):
        self.directory = None if directory is None else Path(directory)
        if self.directory is not None:
            self.directory.mkdir(parents=True, exist_ok=True)
        self._memory: dict[str, RetrainResult] = {}
        self.hits = 0
        self.misses = 0

    @classmethod
    def from_env(cls, default=None) -> "RetrainCache":
        return cls(os.environ.get("LOGRA_CACHE_DIR", default))

    def _path(self, key: str) -> Path:
        return self.directory / f"{key}.npz"

    def lookup(self, key: str) -> RetrainResult | None:
        if key in self._memory:
            return self._memory[key]
        if self.directory is not None and self._path(key).exists():
            with np.load(self._path(key)) as z:
                res = RetrainResult(z["losses"], z["predictions"])
            self._memory[key] = res
            return res
        return None

    def store(self, key: str, res: RetrainResult):
        self._memory[key] = res
        if self.directory is not None:
            tmp = self.directory / f"{key}.{os.getpid()}.tmp.npz"
            np.savez(tmp, losses=res.losses, predictions=res.predictions)
            os.replace(tmp, self._path(key))

    def run(self, spec, train, subsets, cfg, seeds, test, workers: int = 1) -> list[list[RetrainResult]]:
        """Outcomes for every ``(subset, seed)`` pair, retraining only on misses."""
        d_train, d_test = batch_digest(train), batch_digest(test)
        keys = [[_job_key(spec, d_train, s, cfg, seed, d_test) for seed in seeds] for s in subsets]
        pending = []
        for i, row in enumerate(keys):
            for j, key in enumerate(row):
                if self.lookup(key) is None:
                    pending.append((i, j, key))
                else:
                    self.hits += 1
        jobs = [(spec, train, subsets[i], cfg, seeds[j], test) for i, j, _ in pending]
        if workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                outcomes = list(pool.map(_retrain_job, jobs, chunksize=4))
        else:
            outcomes = [_retrain_job(job) for job in jobs]
        for (_, _, key), (losses, preds) in zip(pending, outcomes):
            self.store(key, RetrainResult(losses, preds))
            self.misses += 1
        return [[self.lookup(key) for key in row] for row in keys]


# --- LDS ---------------------------------------------------------------------


@dataclass
class LdsConfig:
    subset_count: int = 100
    subset_fraction: float = 0.5
    seeds: tuple[int, ...] = (0, 1, 2)
    train: TrainConfig = field(default_factory=TrainConfig)
    subset_seed: int = 0

    def __post_init__(self):
        if self.subset_count < 2:
            raise ConfigError("LDS needs at least 2 subsets")
        if not 0.0 < self.subset_fraction < 1.0:
            raise ConfigError("subset_fraction must be in (0, 1)")
        if not self.seeds:
            raise ConfigError("LDS needs at least one retraining seed")


def make_subsets(n_train: int, cfg: LdsConfig) -> np.ndarray:
    """``(M, n_train * fraction)`` sorted index sets, reproducible from the seed."""
    rng = np.random.default_rng(cfg.subset_seed)
    size = max(1, int(round(cfg.subset_fraction * n_train)))
    return np.stack([np.sort(rng.permutation(n_train)[:size]) for _ in range(cfg.subset_count)])


def measure_utilities(
    spec: ModelSpec,
    train: Batch,
    test: Batch,
    subsets: np.ndarray,
    cfg: LdsConfig,
    cache: RetrainCache | None = None,
    workers: int = 1,
) -> np.ndarray:
    """Negative test loss ``(M, n_test)`` of models retrained on each subset,
    averaged over the retraining seeds."""
    cache = RetrainCache() if cache is None else cache
    results = cache.run(spec, train, list(subsets), cfg.train, list(cfg.seeds), test, workers)
    return -np.array([[np.mean([r.losses[t] for r in row]) for t in range(len(test))] for row in results])


def _membership(subsets: np.ndarray, n_train: int) -> np.ndarray:
    m = np.zeros((len(subsets), n_train))
    for i, s in enumerate(subsets):
        m[i, s] = 1.0
    return m


def lds_per_target(values: np.ndarray, subsets: np.ndarray, utilities: np.ndarray) -> np.ndarray:
    """Spearman between predicted and measured utility for each test target."""
    values = np.atleast_2d(values)
    predicted = _membership(subsets, values.shape[1]) @ values.T  # (M, n_targets)
    out = np.empty(values.shape[0])
    for t in range(values.shape[0]):
        out[t] = spearman(predicted[:, t], utilities[:, t])
    return out


@dataclass
class LdsResult:
    method: str
    mean: float
    std: float
    per_model: list[float]


def lds(valuations: list[ValuationResult], subsets: np.ndarray, utilities: np.ndarray) -> LdsResult:
    """Mean and std of LDS across valuations from independently trained models."""
    if not valuations:
        raise ValueError("need at least one valuation")
    per_model = [float(np.mean(lds_per_target(v.values, subsets, utilities))) for v in valuations]
    return LdsResult(valuations[0].method, float(np.mean(per_model)), float(np.std(per_model)), per_model)


def permutation_null(
    values: np.ndarray, subsets: np.ndarray, utilities: np.ndarray, draws: int = 200, seed: int = 0
) -> np.ndarray:
    """LDS of the given values with train examples randomly relabelled."""
    rng = np.random.default_rng(seed)
    values = np.atleast_2d(values)
    out = np.empty(draws)
    for d in range(draws):
        perm = rng.permutation(values.shape[1])
        out[d] = np.mean(lds_per_target(values[:, perm], subsets, utilities))
    return out


# --- brittleness -------------------------------------------------------------


def select_tracked(
    spec: ModelSpec,
    train: Batch,
    test: Batch,
    cfg: TrainConfig,
    seeds,
    count: int,
    cache: RetrainCache | None = None,
    rng_seed: int = 0,
) -> np.ndarray:
    """Test indices classified correctly by full-data models for every seed."""
    cache = RetrainCache() if cache is None else cache
    full = np.arange(len(train))
    row = cache.run(spec, train, [full], cfg, list(seeds), test)[0]
    labels = np.asarray(test.targets)[:, 0]
    ok = np.all([r.predictions == labels for r in row], axis=0)
    candidates = np.flatnonzero(ok)
    rng = np.random.default_rng(rng_seed)
    return np.sort(rng.permutation(candidates)[: min(count, len(candidates))])


@dataclass
class BrittlenessCurve:
    method: str
    sizes: list[int]
    fractions: list[float]
    per_target: np.ndarray  # (len(sizes), n_tracked) misclassification rate over seeds


def brittleness(
    valuation: ValuationResult,
    spec: ModelSpec,
    train: Batch,
    test: Batch,
    tracked: np.ndarray,
    removal_sizes,
    seeds,
    cfg: TrainConfig,
    cache: RetrainCache | None = None,
) -> BrittlenessCurve:
    """Fraction of tracked test points misclassified after removing their
    top-k most valuable training examples and retraining.

    ``valuation.values`` rows correspond to ``tracked``; each point's flip rate
    is averaged over the retraining ``seeds``.
    """
    cache = RetrainCache() if cache is None else cache
    values = np.atleast_2d(valuation.values)
    if values.shape[0] != len(tracked):
        raise DimensionError("need one value row per tracked test point")
    n = len(train)
    sizes = [int(k) for k in removal_sizes]
    labels = np.asarray(test.targets)[:, 0]
    full = cache.run(spec, train, [np.arange(n)], cfg, list(seeds), test)[0]
    for t in tracked:
        if any(r.predictions[t] != labels[t] for r in full):
            raise PreconditionError(f"test point {int(t)} is not correctly classified by every full-data model")
    per_target = np.zeros((len(sizes), len(tracked)))
    for si, k in enumerate(sizes):
        if k >= n:
            raise ValueError(f"removal size {k} must be smaller than the training set ({n})")
        if k == 0:
            continue
        subsets = []
        for row in values:
            order = np.lexsort((np.arange(n), -row))
            subsets.append(np.sort(order[k:]))
        for ti, (t, subset) in enumerate(zip(tracked, subsets)):
            results = cache.run(spec, train, [subset], cfg, list(seeds), test)[0]
            per_target[si, ti] = np.mean([r.predictions[t] != labels[t] for r in results])
    return BrittlenessCurve(valuation.method, sizes, per_target.mean(axis=1).tolist(), per_target)


# --- reporting ---------------------------------------------------------------


def summary_json(lds_results: dict, curves: dict, extra: dict | None = None) -> str:
    out = {"methods": {}}
    for method in sorted(set(lds_results) | set(curves)):
        entry = {}
        if method in lds_results:
            r = lds_results[method]
            entry.update(lds_mean=r.mean, lds_std=r.std, lds_per_model=r.per_model)
        if method in curves:
            c = curves[method]
            entry["brittleness"] = {"sizes": c.sizes, "fractions": c.fractions}
        out["methods"][method] = entry
    if extra:
        out.update(extra)
    return json.dumps(out, indent=2, sort_keys=True)


def lds_table(lds_results: dict, delimiter: str = "\t") -> str:
    lines = [delimiter.join(["method", "lds_mean", "lds_std"])]
    for method, r in lds_results.items():
        lines.append(delimiter.join([method, repr(r.mean), repr(r.std)]))
    return "\n".join(lines) + "\n"


def brittleness_table(curves: dict, delimiter: str = "\t") -> str:
    lines = [delimiter.join(["method", "removed", "fraction_flipped"])]
    for method, c in curves.items():
        for k, frac in zip(c.sizes, c.fractions):
            lines.append(delimiter.join([method, str(k), repr(frac)]))
    return "\n".join(lines) + "\n"
