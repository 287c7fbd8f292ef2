"""Train, extract, query, evaluate and inspect, driven by one JSON config.

Artifacts live in ``workdir``::

    checkpoint.lgck (+ .meta.json)   trained model
    projections.lgpj                 per-layer projection pairs
    stats.lgst                       KFAC factors and projected Hessian
    grads.lggs (+ .meta.json)        projected train gradients

Every derived artifact carries a fingerprint of the config sections it depends
on plus the digests of its inputs; loading checks it and refuses mismatches.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from . import evalharness as eh
from . import gradstore, nn
from .errors import ArtifactMismatchError, ConfigError, FormatError
from .influence import MODES, score, score_stream, topk, write_report
from .nn import Batch, TrainConfig
from .projection import (
    init_pca,
    init_random,
    load_projections,
    project_model,
    projection_payload,
    save_projections,
)
from .stats import HessianAccumulator, load_stats, save_stats

CHECKPOINT = "checkpoint.lgck"
PROJECTIONS = "projections.lgpj"
STATS = "stats.lgst"
STORE = "grads.lggs"
META_SUFFIX = ".meta.json"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ModelSection(_Section):
    widths: list[int] = [2, 128, 128, 128, 2]
    activations: list[Literal["relu", "identity"]] | None = None
    loss: Literal["cross_entropy", "mse"] = "cross_entropy"

    @field_validator("widths")
    @classmethod
    def _widths(cls, v):
        if len(v) < 2 or any(w < 1 for w in v):
            raise ValueError("widths needs at least two positive entries")
        return v


class DataSection(_Section):
    kind: Literal["synthetic", "csv"] = "synthetic"
    n_train: int = Field(200, ge=2)
    n_test: int = Field(100, ge=1)
    label_noise: float = Field(0.1, ge=0.0, le=1.0)
    separation: float = 1.0
    seed: int = 0
    train_path: str | None = None
    test_path: str | None = None


class TrainSection(_Section):
    learning_rate: float = Field(0.05, gt=0)
    momentum: float = Field(0.9, ge=0)
    weight_decay: float = Field(1e-3, ge=0)
    batch_size: int = Field(32, ge=1)
    epochs: int = Field(30, ge=0)


class ProjectionSection(_Section):
    k_in: int = Field(32, ge=1)
    k_out: int = Field(32, ge=1)
    init: Literal["random", "pca"] = "random"
    seed: int | None = None


class DampingSection(_Section):
    factor: float = Field(0.1, gt=0)
    dense: bool = False


class StoreSection(_Section):
    path: str | None = None
    precision: Literal["float32", "float64"] = "float32"
    batch_size: int = Field(256, ge=1)


class EvalSection(_Section):
    methods: list[Literal["logra_random", "logra_pca", "grad_dot", "rep_sim", "ekfac"]] = [
        "logra_random",
        "logra_pca",
        "grad_dot",
        "rep_sim",
        "ekfac",
    ]
    subset_count: int = Field(100, ge=2)
    subset_fraction: float = Field(0.5, gt=0, lt=1)
    retrain_seeds: list[int] = [0, 1, 2]
    reference_models: int = Field(5, ge=1)
    removal_sizes: list[int] = [0, 5, 10, 20]
    brittleness_seeds: list[int] = [0, 1, 2, 3, 4]
    tracked_count: int = Field(30, ge=1)
    null_draws: int = Field(200, ge=1)
    workers: int = Field(1, ge=1)


class RunConfig(_Section):
    project: str = "lograval"
    seed: int = 0
    workdir: str = "run"
    model: ModelSection = ModelSection()
    data: DataSection = DataSection()
    train: TrainSection = TrainSection()
    projection: ProjectionSection = ProjectionSection()
    damping: DampingSection = DampingSection()
    store: StoreSection = StoreSection()
    eval: EvalSection = EvalSection()

    @property
    def projection_seed(self) -> int:
        return self.seed if self.projection.seed is None else self.projection.seed

    @property
    def store_path(self) -> Path:
        return Path(self.store.path) if self.store.path else Path(self.workdir) / STORE

    def path(self, name: str) -> Path:
        return Path(self.workdir) / name

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.train.model_dump(), seed=self.seed)

    def model_spec(self) -> eh.ModelSpec:
        acts = None if self.model.activations is None else tuple(self.model.activations)
        return eh.ModelSpec(tuple(self.model.widths), acts, self.model.loss)


def _merge(base: dict, overrides: dict) -> dict:
    out = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def build_config(document: dict | None = None, overrides: dict | None = None) -> RunConfig:
    """Validate ``document`` with ``overrides`` applied on top; flags win."""
    merged = _merge(document or {}, overrides or {})
    try:
        return RunConfig.model_validate(merged)
    except ValidationError as exc:
        raise ConfigError(f"invalid config: {exc}") from exc


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    document = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            document = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
        if not isinstance(document, dict):
            raise ConfigError(f"{path} must hold a JSON object")
    return build_config(document, overrides)


# --- fingerprints ------------------------------------------------------------


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def training_fingerprint(cfg: RunConfig) -> str:
    return hashlib.sha256(
        _canonical(
            {
                "seed": cfg.seed,
                "model": cfg.model.model_dump(),
                "data": cfg.data.model_dump(),
                "train": cfg.train.model_dump(),
            }
        )
    ).hexdigest()


def artifact_fingerprint(cfg: RunConfig, checkpoint_digest: bytes, projection_digest: bytes) -> bytes:
    """Hash of the config sections, checkpoint and projection behind an artifact."""
    h = hashlib.sha256()
    h.update(training_fingerprint(cfg).encode())
    h.update(
        _canonical(
            {
                "projection": cfg.projection.model_dump(),
                "projection_seed": cfg.projection_seed,
                "damping": cfg.damping.model_dump(),
                "precision": cfg.store.precision,
            }
        )
    )
    h.update(checkpoint_digest)
    h.update(projection_digest)
    return h.digest()


def _write_meta(path: Path, meta: dict):
    meta_path = path.with_name(path.name + META_SUFFIX)
    tmp = meta_path.with_name(meta_path.name + ".tmp")
    tmp.write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    tmp.replace(meta_path)


def _read_meta(path: Path) -> dict:
    meta_path = path.with_name(path.name + META_SUFFIX)
    if not meta_path.exists():
        raise ArtifactMismatchError(f"missing fingerprint sidecar {meta_path}")
    return json.loads(meta_path.read_text())


# --- data --------------------------------------------------------------------


def load_data(cfg: RunConfig) -> tuple[Batch, Batch]:
    d = cfg.data
    if d.kind == "synthetic":
        return eh.make_synthetic(d.n_train, d.n_test, d.label_noise, d.separation, d.seed)
    if not d.train_path or not d.test_path:
        raise ConfigError("csv data needs train_path and test_path")
    return eh.load_csv(d.train_path), eh.load_csv(d.test_path)


def _check_widths(cfg: RunConfig, train: Batch):
    if train.inputs.shape[2] != cfg.model.widths[0]:
        raise ConfigError(
            f"data has {train.inputs.shape[2]} features but the model expects {cfg.model.widths[0]}"
        )


# --- commands ----------------------------------------------------------------


def cmd_train(cfg: RunConfig) -> dict:
    train, _ = load_data(cfg)
    _check_widths(cfg, train)
    model = eh.fit_model(cfg.model_spec(), train, cfg.train_config(), cfg.seed)
    path = cfg.path(CHECKPOINT)
    path.parent.mkdir(parents=True, exist_ok=True)
    nn.save_checkpoint(model, path)
    data = path.read_bytes()
    _write_meta(path, {"training": training_fingerprint(cfg), "sha256": hashlib.sha256(data).hexdigest()})
    return {
        "checkpoint": str(path),
        "sha256": hashlib.sha256(data).hexdigest(),
        "train_loss": nn.mean_loss(model, train),
        "parameters": model.num_weights(),
    }


def _load_checkpoint(cfg: RunConfig):
    path = cfg.path(CHECKPOINT)
    if not path.exists():
        raise ArtifactMismatchError(f"no checkpoint at {path}; run train first")
    data = path.read_bytes()
    meta = _read_meta(path)
    digest = hashlib.sha256(data).digest()
    if meta.get("sha256") != digest.hex():
        raise ArtifactMismatchError(f"{path} does not match its recorded digest")
    if meta.get("training") != training_fingerprint(cfg):
        raise ArtifactMismatchError(f"{path} was trained with a different model/data/train config")
    return nn.checkpoint_from_bytes(data), digest


def _batches(n: int, size: int):
    for start in range(0, n, size):
        yield np.arange(start, min(start + size, n))


def cmd_extract(cfg: RunConfig) -> dict:
    model, ck_digest = _load_checkpoint(cfg)
    train, _ = load_data(cfg)
    size = cfg.store.batch_size

    # covariance pass first: PCA projections are built from it
    factors = eh.fit_factors(model, train, size)
    if cfg.projection.init == "pca":
        ki, ko = eh.clamp_ranks(model, cfg.projection.k_in, cfg.projection.k_out, factors)
        projections = init_pca(factors, ki, ko, layers=model.layer_names)
    else:
        ki, ko = eh.clamp_ranks(model, cfg.projection.k_in, cfg.projection.k_out)
        projections = init_random(model, ki, ko, cfg.projection_seed)
    fingerprint = artifact_fingerprint(cfg, ck_digest, hashlib.sha256(projection_payload(projections)).digest())

    schema = gradstore.StoreSchema.from_projections(projections, cfg.store.precision)
    store_path = cfg.store_path
    if store_path.exists():
        try:
            existing = gradstore.GradStore(store_path).schema
        except FormatError:
            existing = None
        if existing is not None and existing != schema:
            raise ArtifactMismatchError(
                f"existing store {store_path} has a different schema; remove it or change store.path"
            )
    store_path.parent.mkdir(parents=True, exist_ok=True)

    acc = HessianAccumulator(projections.layout, cfg.damping.dense)
    with gradstore.create(store_path, schema) as writer:
        for idx in _batches(len(train), size):
            grads, _ = project_model(model, train.subset(idx), projections)
            acc.update(grads)
            writer.append_batch(idx, grads.astype(schema.dtype))
    hessian = acc.finalize(cfg.damping.factor)

    save_projections(cfg.path(PROJECTIONS), projections, fingerprint)
    save_stats(cfg.path(STATS), factors, hessian, fingerprint)
    _write_meta(store_path, {"fingerprint": fingerprint.hex()})
    return {
        "store": str(store_path),
        "records": len(train),
        "dim": projections.total_dim,
        "fingerprint": fingerprint.hex(),
        "damping": {b.layer_name: b.damping for b in hessian.blocks},
    }


def _load_extracted(cfg: RunConfig):
    model, ck_digest = _load_checkpoint(cfg)
    for name in (PROJECTIONS, STATS):
        if not cfg.path(name).exists():
            raise ArtifactMismatchError(f"missing {cfg.path(name)}; run extract first")
    projections, proj_fp = load_projections(cfg.path(PROJECTIONS))
    expected = artifact_fingerprint(cfg, ck_digest, hashlib.sha256(projection_payload(projections)).digest())
    stats = load_stats(cfg.path(STATS))
    store = gradstore.GradStore(cfg.store_path)
    store_fp = bytes.fromhex(_read_meta(cfg.store_path).get("fingerprint", ""))
    for what, fp in (("projections", proj_fp), ("statistics", stats.fingerprint), ("store", store_fp)):
        if fp != expected:
            raise ArtifactMismatchError(
                f"{what} fingerprint does not match the current config/checkpoint; re-run extract"
            )
    if store.schema != gradstore.StoreSchema.from_projections(projections, cfg.store.precision):
        raise ArtifactMismatchError("store schema does not match the projections")
    return model, projections, stats, store


def cmd_query(
    cfg: RunConfig,
    mode: str = "l_relatif",
    k: int = 10,
    test_ids: list[int] | None = None,
    train_ids: list[int] | None = None,
    workers: int = 1,
    output=None,
) -> dict:
    """Rank stored train examples for test (or train) queries.

    ``train_ids`` queries training examples themselves, which is how
    self-retrieval is checked.
    """
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}")
    model, projections, stats, store = _load_extracted(cfg)
    if k > len(store):
        raise ConfigError(f"k={k} exceeds the {len(store)} stored records")
    train, test = load_data(cfg)
    if train_ids is not None:
        source, ids = train, np.asarray(train_ids, dtype=np.int64)
    else:
        source = test
        ids = np.arange(len(test)) if test_ids is None else np.asarray(test_ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= len(source)):
        raise ConfigError(f"query ids must lie in [0, {len(source)})")
    grads, _ = project_model(model, source.subset(ids), projections)
    scores = score_stream(
        grads, store.scan(cfg.store.batch_size), stats.hessian, mode, test_ids=ids, workers=workers
    )
    text = write_report(scores, k, output)
    return {
        "mode": mode,
        "k": k,
        "queries": ids.tolist(),
        "results": [
            [{"train_id": int(t), "score": s} for t, s in row] for row in topk(scores, k)
        ],
        "report": text,
    }


def cmd_eval(cfg: RunConfig, methods: list[str] | None = None, output_dir=None) -> dict:
    """LDS and brittleness for each method, plus logra self-retrieval."""
    ev = cfg.eval
    methods = list(methods or ev.methods)
    unknown = sorted(set(methods) - set(eh.METHODS))
    if unknown:
        raise ConfigError(f"unknown methods {unknown}; choose from {list(eh.METHODS)}")
    train, test = load_data(cfg)
    _check_widths(cfg, train)
    spec, tcfg = cfg.model_spec(), cfg.train_config()
    cache = eh.RetrainCache.from_env(Path(cfg.workdir) / "cache")
    opts = {
        "k_in": cfg.projection.k_in,
        "k_out": cfg.projection.k_out,
        "seed": cfg.projection_seed,
        "damping_factor": cfg.damping.factor,
    }

    def method_opts(m):
        if m.startswith("logra"):
            return opts
        if m == "ekfac":
            return {"damping_factor": cfg.damping.factor}
        return {}

    references = [eh.fit_model(spec, train, tcfg, cfg.seed + r) for r in range(ev.reference_models)]
    lds_cfg = eh.LdsConfig(ev.subset_count, ev.subset_fraction, tuple(ev.retrain_seeds), tcfg, cfg.seed)
    subsets = eh.make_subsets(len(train), lds_cfg)
    misses_before = cache.misses
    utilities = eh.measure_utilities(spec, train, test, subsets, lds_cfg, cache, ev.workers)

    lds_results, nulls, self_retrieval = {}, {}, {}
    first_valuers = {}
    for m in methods:
        vals, rates = [], []
        for r, ref in enumerate(references):
            valuer = eh.fit_valuer(m, ref, train, **method_opts(m))
            if r == 0:
                first_valuers[m] = valuer
            vals.append(eh.value_all(m, ref, train, test, valuer=valuer))
            if m.startswith("logra"):
                s = score(valuer.train_grads, valuer.train_grads, valuer.hessian, "influence").scores
                rates.append(float(np.mean(s.argmax(axis=1) == np.arange(len(train)))))
        lds_results[m] = eh.lds(vals, subsets, utilities)
        null = eh.permutation_null(vals[0].values, subsets, utilities, ev.null_draws, cfg.seed)
        nulls[m] = float(np.percentile(null, 95))
        if rates:
            self_retrieval[m] = {"mean": float(np.mean(rates)), "per_model": rates}

    curves = {}
    if spec.loss == "cross_entropy":
        tracked = eh.select_tracked(spec, train, test, tcfg, ev.brittleness_seeds, ev.tracked_count, cache, cfg.seed)
        targets = test.subset(tracked)
        valuations = [
            eh.value_all(m, references[0], train, targets, valuer=first_valuers[m]) for m in methods
        ]
        valuations.append(eh.random_values(len(tracked), len(train), cfg.seed))
        for v in valuations:
            curves[v.method] = eh.brittleness(
                v, spec, train, test, tracked, ev.removal_sizes, ev.brittleness_seeds, tcfg, cache
            )

    extra = {
        "lds_null_p95": nulls,
        "self_retrieval": self_retrieval,
        "retrained": cache.misses - misses_before,
        "cache_hits": cache.hits,
    }
    summary = eh.summary_json(lds_results, curves, extra)
    out = Path(output_dir) if output_dir else Path(cfg.workdir) / "eval"
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.json").write_text(summary + "\n")
    (out / "lds.tsv").write_text(eh.lds_table(lds_results))
    (out / "brittleness.tsv").write_text(eh.brittleness_table(curves))
    return json.loads(summary)


# --- inspect -----------------------------------------------------------------


def inspect_file(path) -> dict:
    """Headers of any artifact, recognized by its magic bytes."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"no such file: {path}")
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == gradstore.STORE_MAGIC:
        store = gradstore.GradStore(path)
        ids = store.ids
        return {
            "kind": "store",
            "version": gradstore.STORE_VERSION,
            "layers": [{"name": n, "k_in": a, "k_out": b} for n, a, b in store.schema.layers],
            "precision": store.schema.precision,
            "records": len(store),
            "payload_dim": store.schema.payload_dim,
            "file_bytes": os.path.getsize(path),
            "id_range": [int(ids.min()), int(ids.max())] if len(ids) else None,
        }
    if magic == b"LGST":
        st = load_stats(path)
        return {
            "kind": "statistics",
            "fingerprint": st.fingerprint.hex(),
            "factors": [
                {"layer": f.layer_name, "n_in": f.n_in, "n_out": f.n_out, "tokens": f.token_count}
                for f in st.factors.values()
            ],
            "blocks": [
                {"name": b.layer_name, "offset": b.offset, "dim": b.dim, "samples": b.sample_count,
                 "damping": b.damping}
                for b in st.hessian.blocks
            ],
        }
    if magic == b"LGPJ":
        projections, fp = load_projections(path)
        return {
            "kind": "projections",
            "fingerprint": fp.hex(),
            "pairs": [
                {"layer": p.layer_name, "init": p.init_kind, "k_in": p.k_in, "n_in": p.n_in,
                 "k_out": p.k_out, "n_out": p.n_out}
                for p in projections.pairs
            ],
        }
    if magic == b"LGCK":
        model = nn.load_checkpoint(path)
        return {
            "kind": "checkpoint",
            "layers": [
                {"name": l.name, "n_in": l.n_in, "n_out": l.n_out, "bias": l.bias is not None}
                for l in model.layers
            ],
            "activations": list(model.activations),
            "loss": model.loss,
        }
    raise FormatError(f"{path}: unrecognized magic {magic!r}")
