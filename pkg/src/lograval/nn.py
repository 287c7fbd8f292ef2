"""Feed-forward networks with explicit, inspectable backpropagation.

The forward pass records, for every linear layer, the per-sample per-token
inputs and pre-activation outputs; the backward pass fills in the matching
output gradients. These :class:`LayerTrace` objects are what the projection
and statistics code consume.

Shapes follow ``(batch, tokens, features)``. Classification samples carry a
single token.
"""

from __future__ import annotations

import copy
import struct
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .binio import Reader
from .errors import DimensionError, FormatError, PreconditionError, TrainingDivergedError

ACTIVATIONS = ("relu", "identity")
LOSSES = ("cross_entropy", "mse")


@dataclass
class LinearLayer:
    name: str
    weight: np.ndarray  # (n_out, n_in)
    bias: np.ndarray | None = None

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]

    @property
    def has_bias(self) -> bool:
        return self.bias is not None


@dataclass
class Bottleneck:
    """Encoder / bottleneck / decoder add-on attached next to a linear layer.

    The add-on contributes ``decoder @ core @ encoder @ x`` to the layer output.
    ``core`` starts at zero, so the host network is unchanged, yet the gradient
    of ``core`` is the projected gradient of the host layer.
    """

    encoder: np.ndarray  # (k_i, n_in)
    core: np.ndarray  # (k_o, k_i)
    decoder: np.ndarray  # (n_out, k_o)


@dataclass
class Model:
    layers: list[LinearLayer]
    activations: list[str]
    loss: str = "cross_entropy"
    adapters: dict[str, Bottleneck] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.activations) != len(self.layers):
            raise DimensionError("need exactly one activation per layer")
        for act in self.activations:
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise ValueError(f"layer names must be unique: {names}")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.n_out != nxt.n_in:
                raise DimensionError(
                    f"{prev.name} outputs {prev.n_out} but {nxt.name} expects {nxt.n_in}"
                )

    @property
    def layer_names(self) -> list[str]:
        return [layer.name for layer in self.layers]

    def layer(self, name: str) -> LinearLayer:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(f"no layer named {name!r}")

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    def num_weights(self) -> int:
        return sum(layer.weight.size for layer in self.layers)


def init_model(
    widths: list[int],
    activations: list[str] | None = None,
    loss: str = "cross_entropy",
    seed: int = 0,
    bias: bool = True,
) -> Model:
    """Build an MLP with weights drawn uniformly from ``+-1/sqrt(n_in)``.

    Layers are named ``fc0, fc1, ...``; by default hidden layers use ReLU and
    the last layer is linear.
    """
    if len(widths) < 2:
        raise ValueError("need at least input and output widths")
    n_layers = len(widths) - 1
    if activations is None:
        activations = ["relu"] * (n_layers - 1) + ["identity"]
    rng = np.random.default_rng(seed)
    layers = []
    for i, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
        bound = 1.0 / np.sqrt(n_in)
        weight = rng.uniform(-bound, bound, size=(n_out, n_in))
        b = rng.uniform(-bound, bound, size=n_out) if bias else None
        layers.append(LinearLayer(f"fc{i}", weight, b))
    return Model(layers, list(activations), loss)


@dataclass
class Batch:
    """Inputs ``(B, T, d)``, targets and an optional token mask ``(B, T)``.

    Cross-entropy targets are integer class ids ``(B, T)``; MSE targets are
    ``(B, T, n_out)``. Masked-out tokens (mask False) contribute no loss.
    """

    inputs: np.ndarray
    targets: np.ndarray
    mask: np.ndarray | None = None

    @classmethod
    def from_arrays(cls, x, y, mask=None) -> "Batch":
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y)
        if x.ndim == 2:
            x = x[:, None, :]
            if y.ndim == 1:
                y = y[:, None]
            elif y.ndim == 2 and y.shape[0] == x.shape[0] and y.dtype.kind == "f":
                y = y[:, None, :]
        if x.ndim != 3:
            raise DimensionError(f"inputs must be (B, d) or (B, T, d), got {x.shape}")
        if mask is not None:
            mask = np.asarray(mask, dtype=bool).reshape(x.shape[:2])
        return cls(x, y, mask)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def tokens(self) -> int:
        return self.inputs.shape[1]

    def subset(self, index) -> "Batch":
        index = np.asarray(index)
        mask = None if self.mask is None else self.mask[index]
        return Batch(self.inputs[index], self.targets[index], mask)

    def token_mask(self) -> np.ndarray:
        if self.mask is None:
            return np.ones(self.inputs.shape[:2], dtype=bool)
        return self.mask


@dataclass
class LayerTrace:
    """Activations captured for one linear layer over one batch."""

    layer_name: str
    fwd_inputs: np.ndarray  # (B, T, n_in)
    outputs: np.ndarray  # (B, T, n_out), pre-activation
    mask: np.ndarray  # (B, T) bool
    bwd_outgrads: np.ndarray | None = None  # (B, T, n_out)

    @property
    def batch_size(self) -> int:
        return self.fwd_inputs.shape[0]

    @property
    def token_counts(self) -> np.ndarray:
        return self.mask.sum(axis=1)

    def sample(self, i: int) -> "LayerTrace":
        bwd = None if self.bwd_outgrads is None else self.bwd_outgrads[i : i + 1]
        return LayerTrace(
            self.layer_name,
            self.fwd_inputs[i : i + 1],
            self.outputs[i : i + 1],
            self.mask[i : i + 1],
            bwd,
        )


def adapter_name(layer_name: str) -> str:
    return f"{layer_name}.bottleneck"


def forward(model: Model, batch: Batch) -> tuple[np.ndarray, dict[str, LayerTrace]]:
    """Run the network; returns outputs ``(B, T, n_out)`` and per-layer traces.

    Layers with an attached bottleneck produce an extra trace under
    ``adapter_name(layer)`` whose inputs are the encoded activations.
    """
    h = np.asarray(batch.inputs, dtype=np.float64)
    if h.ndim != 3 or h.shape[2] != model.layers[0].n_in:
        raise DimensionError(
            f"inputs of shape {h.shape} do not match first layer width {model.layers[0].n_in}"
        )
    mask = batch.token_mask()
    traces: dict[str, LayerTrace] = {}
    for layer, act in zip(model.layers, model.activations):
        x = h
        out = x @ layer.weight.T
        if layer.bias is not None:
            out = out + layer.bias
        adapter = model.adapters.get(layer.name)
        if adapter is not None:
            encoded = x @ adapter.encoder.T
            core_out = encoded @ adapter.core.T
            out = out + core_out @ adapter.decoder.T
            traces[adapter_name(layer.name)] = LayerTrace(
                adapter_name(layer.name), encoded, core_out, mask
            )
        traces[layer.name] = LayerTrace(layer.name, x, out, mask)
        h = np.maximum(out, 0.0) if act == "relu" else out
    return h, traces


def loss_and_grad(model: Model, outputs: np.ndarray, batch: Batch) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample loss (token-summed) and its gradient w.r.t. ``outputs``."""
    mask = batch.token_mask()
    if model.loss == "cross_entropy":
        labels = np.asarray(batch.targets).astype(np.intp).reshape(outputs.shape[:2])
        shifted = outputs - outputs.max(axis=2, keepdims=True)
        logsumexp = np.log(np.exp(shifted).sum(axis=2, keepdims=True))
        logp = shifted - logsumexp
        safe = np.where(mask, labels, 0)
        token_loss = -np.take_along_axis(logp, safe[..., None], axis=2)[..., 0]
        grad = np.exp(logp)
        np.put_along_axis(
            grad, safe[..., None], np.take_along_axis(grad, safe[..., None], axis=2) - 1.0, axis=2
        )
    else:
        targets = np.asarray(batch.targets, dtype=np.float64).reshape(outputs.shape)
        diff = outputs - targets
        token_loss = 0.5 * np.sum(diff * diff, axis=2)
        grad = diff
    token_loss = np.where(mask, token_loss, 0.0)
    grad = np.where(mask[..., None], grad, 0.0)
    return token_loss.sum(axis=1), grad


@dataclass
class LayerGrad:
    weight: np.ndarray
    bias: np.ndarray | None = None


def backward(
    model: Model, traces: dict[str, LayerTrace], loss_grads: np.ndarray
) -> tuple[dict[str, LayerGrad], dict[str, LayerTrace]]:
    """Backpropagate ``loss_grads`` (gradient w.r.t. network outputs).

    Fills ``bwd_outgrads`` on every trace in place and returns the batch-summed
    gradient of every layer (and of every attached bottleneck core).
    """
    grads: dict[str, LayerGrad] = {}
    g = np.asarray(loss_grads, dtype=np.float64)
    for layer, act in zip(reversed(model.layers), reversed(model.activations)):
        trace = traces.get(layer.name)
        if trace is None:
            raise PreconditionError(f"no forward trace for layer {layer.name!r}")
        if g.shape != trace.outputs.shape:
            raise DimensionError(
                f"gradient shape {g.shape} does not match {layer.name} outputs {trace.outputs.shape}"
            )
        d_out = g * (trace.outputs > 0) if act == "relu" else g
        trace.bwd_outgrads = d_out
        grads[layer.name] = LayerGrad(
            np.einsum("bto,bti->oi", d_out, trace.fwd_inputs),
            d_out.sum(axis=(0, 1)) if layer.bias is not None else None,
        )
        g = d_out @ layer.weight
        adapter = model.adapters.get(layer.name)
        if adapter is not None:
            a_trace = traces[adapter_name(layer.name)]
            d_core = d_out @ adapter.decoder
            a_trace.bwd_outgrads = d_core
            grads[adapter_name(layer.name)] = LayerGrad(
                np.einsum("bto,bti->oi", d_core, a_trace.fwd_inputs)
            )
            g = g + (d_core @ adapter.core) @ adapter.encoder
    return grads, traces


def forward_backward(model: Model, batch: Batch):
    """Full pass; returns ``(per-sample losses, summed grads, traces)``."""
    outputs, traces = forward(model, batch)
    losses, dout = loss_and_grad(model, outputs, batch)
    grads, traces = backward(model, traces, dout)
    return losses, grads, traces


def per_sample_grads(model: Model, batch: Batch) -> dict[str, np.ndarray]:
    """Weight gradient of every sample's own loss, ``{name: (B, n_out, n_in)}``."""
    _, _, traces = forward_backward(model, batch)
    return {
        name: np.einsum("bto,bti->boi", tr.bwd_outgrads, tr.fwd_inputs)
        for name, tr in traces.items()
    }


def per_sample_grad(model: Model, x, y, mask=None) -> dict[str, np.ndarray]:
    """Gradient of one sample's loss; ``x`` is ``(d,)`` or ``(T, d)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    y = np.asarray(y)
    if model.loss == "cross_entropy":
        y = y.reshape(1, x.shape[0])
    else:
        y = y.reshape(1, x.shape[0], -1)
    m = None if mask is None else np.asarray(mask, dtype=bool).reshape(1, -1)
    grads = per_sample_grads(model, Batch(x[None], y, m))
    return {name: g[0] for name, g in grads.items()}


def flat_per_sample_grads(model: Model, batch: Batch) -> np.ndarray:
    """Per-sample weight gradients concatenated layer by layer, column-major."""
    grads = per_sample_grads(model, batch)
    parts = [
        grads[layer.name].transpose(0, 2, 1).reshape(len(batch), -1)
        for layer in model.layers
    ]
    return np.concatenate(parts, axis=1)


def predict(model: Model, inputs) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == 2:
        x = x[:, None, :]
    outputs, _ = forward(model, Batch(x, np.zeros(x.shape[:2], dtype=np.intp)))
    return outputs


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-3
    batch_size: int = 32
    epochs: int = 30
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


class CallCounter:
    """Thread-safe counter used to instrument how often models get retrained."""

    def __init__(self):
        self._lock = threading.Lock()
        self.value = 0

    def increment(self):
        with self._lock:
            self.value += 1


train_calls = CallCounter()


def train(model: Model, data: Batch, cfg: TrainConfig) -> Model:
    """SGD with momentum on the mean per-sample loss; returns a new model.

    Shuffling is driven by ``cfg.seed`` only, so two calls with equal inputs
    give bit-identical weights.
    """
    train_calls.increment()
    model = model.copy()
    if cfg.epochs == 0 or len(data) == 0:
        return model
    rng = np.random.default_rng(cfg.seed)
    velocity = {
        layer.name: (
            np.zeros_like(layer.weight),
            None if layer.bias is None else np.zeros_like(layer.bias),
        )
        for layer in model.layers
    }
    n = len(data)
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            losses, grads, _ = forward_backward(model, data.subset(idx))
            loss = float(losses.mean())
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch, step, loss)
            scale = 1.0 / len(idx)
            for layer in model.layers:
                vw, vb = velocity[layer.name]
                gw = grads[layer.name].weight * scale + cfg.weight_decay * layer.weight
                vw *= cfg.momentum
                vw += gw
                layer.weight -= cfg.learning_rate * vw
                if layer.bias is not None:
                    gb = grads[layer.name].bias * scale + cfg.weight_decay * layer.bias
                    vb *= cfg.momentum
                    vb += gb
                    layer.bias -= cfg.learning_rate * vb
            step += 1
    return model


def mean_loss(model: Model, data: Batch) -> float:
    outputs, _ = forward(model, data)
    losses, _ = loss_and_grad(model, outputs, data)
    return float(losses.mean())


# --- checkpoint format -------------------------------------------------------

CHECKPOINT_MAGIC = b"LGCK"
CHECKPOINT_VERSION = 1
_ACT_CODES = {name: i for i, name in enumerate(ACTIVATIONS)}
_LOSS_CODES = {name: i for i, name in enumerate(LOSSES)}


def checkpoint_bytes(model: Model) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(model.layers))]
    for layer in model.layers:
        name = layer.name.encode("utf-8")
        parts.append(struct.pack("<H", len(name)) + name)
        parts.append(struct.pack("<IIB", layer.n_out, layer.n_in, int(layer.has_bias)))
        parts.append(np.ascontiguousarray(layer.weight, dtype="<f8").tobytes())
        if layer.has_bias:
            parts.append(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())
    # trailer: activation per layer, then loss kind
    parts.append(bytes(_ACT_CODES[a] for a in model.activations))
    parts.append(bytes([_LOSS_CODES[model.loss]]))
    return b"".join(parts)


def save_checkpoint(model: Model, path) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(model))
    tmp.replace(path)
    return path


def checkpoint_from_bytes(data: bytes) -> Model:
    r = Reader(data, "checkpoint")
    magic = r.take(4)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    version, count = r.unpack("<II")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    layers = []
    for _ in range(count):
        name = r.name()
        rows, cols, has_bias = r.unpack("<IIB")
        weight = r.array((rows, cols))
        bias = r.array((rows,)) if has_bias else None
        layers.append(LinearLayer(name, weight, bias))
    codes = r.take(count)
    (loss_code,) = r.take(1)
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes in checkpoint")
    try:
        activations = [ACTIVATIONS[c] for c in codes]
        loss = LOSSES[loss_code]
    except IndexError as exc:
        raise FormatError("invalid activation or loss code in checkpoint") from exc
    return Model(layers, activations, loss)


def load_checkpoint(path) -> Model:
    return checkpoint_from_bytes(Path(path).read_bytes())


def with_weights(model: Model, name: str, weight: np.ndarray) -> Model:
    """Copy of ``model`` with one layer's weight replaced."""
    out = model.copy()
    layer = out.layer(name)
    out.layers[out.layers.index(layer)] = replace(layer, weight=np.array(weight, dtype=np.float64))
    return out
