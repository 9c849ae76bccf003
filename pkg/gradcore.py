# gradcore.py
"""Fixed-chain dense network engine: init, forward, exact backward, SGD, grad check,
the shared mini-batch loop and binary checkpoints."""
from __future__ import annotations
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from binarize import BinaryDenseLayer, clip_latent, sign_activation, ste_backward
from config import TrainConfig
from errors import CacheError, DivergenceError, ShapeError, SpecError

logger = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "tanh", "none", "binary-sign")
CHECKPOINT_MAGIC = b"LSDISTILL-CKPT 1\n"
PARAM_ORDERING = "layer-major; weight (out_dim, in_dim) row-major, then bias; little-endian float64"


# ---------- Specs ----------

@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = "relu"
    binary_weights: bool = False
    clip_bound: float = 1.0


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    num_classes: int
    layers: Tuple[LayerSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.num_classes < 2:
            raise SpecError(f"need at least 2 classes, got {self.num_classes}")
        if len(self.layers) < 2:
            raise SpecError("need at least one hidden layer so a penultimate activation exists")
        prev = self.input_dim
        for i, layer in enumerate(self.layers):
            if layer.activation not in ACTIVATIONS:
                raise SpecError(f"layer {i}: unknown activation {layer.activation!r}")
            if layer.in_dim != prev or layer.in_dim < 1 or layer.out_dim < 1:
                raise SpecError(f"layer {i}: dims do not chain ({prev} -> {layer.in_dim}x{layer.out_dim})")
            if layer.clip_bound <= 0:
                raise SpecError(f"layer {i}: clip_bound must be > 0")
            prev = layer.out_dim
        last = self.layers[-1]
        if last.out_dim != self.num_classes or last.activation != "none":
            raise SpecError("final layer must emit num_classes logits with activation 'none'")
        if self.layers[0].binary_weights or last.binary_weights:
            raise SpecError("first and last layers stay real-valued")

    @classmethod
    def mlp(cls, input_dim: int, hidden: Sequence[int], num_classes: int, activation: str = "relu",
            binary_weights: bool = False, clip_bound: float = 1.0) -> "NetworkSpec":
        dims = [input_dim, *hidden]
        layers = [
            LayerSpec(dims[i], dims[i + 1], activation,
                      binary_weights=binary_weights and i > 0, clip_bound=clip_bound)
            for i in range(len(hidden))
        ]
        layers.append(LayerSpec(dims[-1], num_classes, "none"))
        return cls(input_dim, num_classes, tuple(layers))

    @property
    def penultimate_dim(self) -> int:
        return self.layers[-1].in_dim

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "num_classes": self.num_classes,
            "layers": [asdict(layer) for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(d["input_dim"], d["num_classes"], tuple(LayerSpec(**l) for l in d["layers"]))


# ---------- Model / records ----------

def _readonly(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=np.float64)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Model:
    spec: NetworkSpec
    weights: Tuple[np.ndarray, ...]
    biases: Tuple[np.ndarray, ...]
    seed: int
    version: int = 0
    velocity: Optional[Tuple[np.ndarray, ...]] = None  # momentum buffers, parameter order

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(_readonly(w) for w in self.weights))
        object.__setattr__(self, "biases", tuple(_readonly(b) for b in self.biases))
        for i, (layer, w, b) in enumerate(zip(self.spec.layers, self.weights, self.biases)):
            if w.shape != (layer.out_dim, layer.in_dim) or b.shape != (layer.out_dim,):
                raise ShapeError(f"layer {i}: parameter shapes {w.shape}/{b.shape} do not match spec")
        if len(self.weights) != len(self.spec.layers) or len(self.biases) != len(self.spec.layers):
            raise ShapeError("parameter count does not match spec")

    def parameters(self) -> List[np.ndarray]:
        """Checkpoint order: W0, b0, W1, b1, ..."""
        out: List[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    @property
    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def with_parameters(self, params: Sequence[np.ndarray], **changes) -> "Model":
        return replace(self, weights=tuple(params[0::2]), biases=tuple(params[1::2]), **changes)

    def effective_weights(self, i: int) -> np.ndarray:
        layer = self.spec.layers[i]
        if layer.binary_weights:
            return BinaryDenseLayer(self.weights[i], layer.clip_bound).binary_weights()
        return self.weights[i]


@dataclass(frozen=True)
class ForwardRecord:
    logits: np.ndarray
    penultimate: np.ndarray
    inputs: Tuple[np.ndarray, ...]        # input of each layer
    pre_activations: Tuple[np.ndarray, ...]
    effective_weights: Tuple[np.ndarray, ...]
    source: Tuple[np.ndarray, ...] = field(repr=False, default=())  # identity of the model's weights


@dataclass(frozen=True)
class Gradients:
    weights: Tuple[np.ndarray, ...]
    biases: Tuple[np.ndarray, ...]

    def as_list(self) -> List[np.ndarray]:
        out: List[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out


# ---------- Operations ----------

def init_model(spec: NetworkSpec, seed: int) -> Model:
    if not isinstance(spec, NetworkSpec):
        raise SpecError(f"expected a NetworkSpec, got {type(spec).__name__}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for layer in spec.layers:
        limit = np.sqrt(6.0 / (layer.in_dim + layer.out_dim))
        weights.append(rng.uniform(-limit, limit, size=(layer.out_dim, layer.in_dim)))
        biases.append(np.zeros(layer.out_dim))
    return Model(spec, tuple(weights), tuple(biases), seed=seed)


def _activate(h: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(h, 0.0)
    if activation == "tanh":
        return np.tanh(h)
    if activation == "binary-sign":
        return sign_activation(h)
    return h


def _activation_backward(g: np.ndarray, h: np.ndarray, layer: LayerSpec) -> np.ndarray:
    if layer.activation == "relu":
        return g * (h > 0.0)
    if layer.activation == "tanh":
        t = np.tanh(h)
        return g * (1.0 - t * t)
    if layer.activation == "binary-sign":
        return ste_backward(g, h, layer.clip_bound)
    return g


def forward(model: Model, batch: np.ndarray) -> ForwardRecord:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.spec.input_dim:
        raise ShapeError(f"expected inputs of width {model.spec.input_dim}, got shape {x.shape}")
    inputs, pres, effs = [], [], []
    for i, layer in enumerate(model.spec.layers):
        w = model.effective_weights(i)
        h = x @ w.T + model.biases[i]
        inputs.append(x)
        pres.append(h)
        effs.append(w)
        x = _activate(h, layer.activation)
    return ForwardRecord(
        logits=x,
        penultimate=inputs[-1],
        inputs=tuple(inputs),
        pre_activations=tuple(pres),
        effective_weights=tuple(effs),
        source=model.weights,
    )


def backward(model: Model, record: ForwardRecord, loss_grad_on_logits: np.ndarray) -> Gradients:
    """Gradients of the scalar batch loss whose logit-gradient is `loss_grad_on_logits`."""
    if record.source is not model.weights:
        raise CacheError("forward record was produced by a different model")
    g = np.asarray(loss_grad_on_logits, dtype=np.float64)
    if g.shape != record.logits.shape:
        raise ShapeError(f"logit gradient shape {g.shape} != logits shape {record.logits.shape}")
    n_layers = len(model.spec.layers)
    dW: List[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    db: List[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    for i in reversed(range(n_layers)):
        layer = model.spec.layers[i]
        g_h = _activation_backward(g, record.pre_activations[i], layer)
        grad_w = g_h.T @ record.inputs[i]
        if layer.binary_weights:
            grad_w = BinaryDenseLayer(model.weights[i], layer.clip_bound).latent_gradient(grad_w)
        dW[i] = grad_w
        db[i] = g_h.sum(axis=0)
        g = g_h @ record.effective_weights[i]
    return Gradients(tuple(dW), tuple(db))


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    if cfg.schedule == "linear":
        return cfg.learning_rate * (1.0 - epoch / cfg.epochs)
    drops = sum(1 for e in cfg.decay_epochs if epoch >= e)
    return cfg.learning_rate * cfg.decay_factor ** drops


def sgd_step(model: Model, grads: Gradients, cfg: TrainConfig, epoch: int) -> Model:
    """w <- w - lr * v with v <- momentum * v + (grad + weight_decay * w); biases are not decayed."""
    lr = lr_at(cfg, epoch)
    params = model.parameters()
    gs = grads.as_list()
    if len(gs) != len(params):
        raise ShapeError("gradient list does not match model parameters")
    old_v = model.velocity or tuple(np.zeros_like(p) for p in params)
    new_params, new_v = [], []
    for k, (p, g, v) in enumerate(zip(params, gs, old_v)):
        if g.shape != p.shape:
            raise ShapeError(f"gradient {k} has shape {g.shape}, parameter has {p.shape}")
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient in parameter block {k}")
        d = g + cfg.weight_decay * p if k % 2 == 0 else g
        v = cfg.momentum * v + d
        updated = p - lr * v
        if k % 2 == 0 and model.spec.layers[k // 2].binary_weights:
            updated = clip_latent(updated)
        if not np.all(np.isfinite(updated)):
            raise DivergenceError(f"parameter block {k} became non-finite")
        new_params.append(updated)
        new_v.append(v)
    return model.with_parameters(new_params, version=model.version + 1, velocity=tuple(new_v))


LossFn = Callable[[np.ndarray], Tuple[float, np.ndarray]]


def _perturbed(model: Model, block: int, index: Tuple[int, ...], delta: float) -> Model:
    params = [np.array(p) for p in model.parameters()]
    params[block][index] += delta
    return model.with_parameters(params)


def grad_check(model: Model, loss: LossFn, batch: np.ndarray, eps: float = 1e-5,
               num_samples: int = 50, seed: int = 0) -> float:
    """Max relative error between backward and central differences over random parameters."""
    record = forward(model, batch)
    _, dlogits = loss(record.logits)
    analytic = backward(model, record, dlogits).as_list()

    sizes = [p.size for p in model.parameters()]
    total = sum(sizes)
    rng = np.random.default_rng(seed)
    picks = rng.choice(total, size=min(num_samples, total), replace=False)
    offsets = np.cumsum([0] + sizes)

    worst = 0.0
    for flat in np.sort(picks):
        block = int(np.searchsorted(offsets, flat, side="right") - 1)
        index = np.unravel_index(int(flat - offsets[block]), model.parameters()[block].shape)
        f_plus, _ = loss(forward(_perturbed(model, block, index, eps), batch).logits)
        f_minus, _ = loss(forward(_perturbed(model, block, index, -eps), batch).logits)
        numeric = (f_plus - f_minus) / (2.0 * eps)
        a = float(analytic[block][index])
        worst = max(worst, abs(a - numeric) / max(abs(a) + abs(numeric), 1e-8))
    return worst


BatchLoss = Callable[[np.ndarray, np.ndarray], Tuple[float, np.ndarray]]
EpochHook = Callable[[int, Model, float], None]


def fit(model: Model, features: np.ndarray, batch_loss: BatchLoss, cfg: TrainConfig,
        on_epoch: Optional[EpochHook] = None, stream: int = 0) -> Model:
    """Mini-batch SGD. `batch_loss(indices, logits)` returns the batch-mean loss and its
    logit gradient; `on_epoch` sees the per-example mean training loss of each epoch."""
    n = features.shape[0]
    for epoch in range(cfg.epochs):
        order = np.random.default_rng((cfg.seed, stream, epoch)).permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            record = forward(model, features[idx])
            if not np.all(np.isfinite(record.logits)):
                raise DivergenceError(f"logits became non-finite at epoch {epoch}")
            value, dlogits = batch_loss(idx, record.logits)
            if not np.isfinite(value):
                raise DivergenceError(f"loss became non-finite at epoch {epoch}")
            model = sgd_step(model, backward(model, record, dlogits), cfg, epoch)
            total += value * idx.size
        mean_loss = total / n
        logger.debug("epoch %d lr=%.5f train_loss=%.6f", epoch, lr_at(cfg, epoch), mean_loss)
        if on_epoch is not None:
            on_epoch(epoch, model, mean_loss)
    return model


# ---------- Checkpoints ----------

def _param_block(model: Model) -> bytes:
    return b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in model.parameters())


def parameter_hash(model: Model) -> str:
    return hashlib.sha256(_param_block(model)).hexdigest()


def save_checkpoint(path: str | Path, model: Model, epoch: int) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "spec": model.spec.to_dict(),
        "seed": model.seed,
        "epoch": epoch,
        "num_parameters": model.num_parameters,
        "ordering": PARAM_ORDERING,
    }
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        f.write(_param_block(model))
    return path


def load_checkpoint(path: str | Path) -> Tuple[Model, dict]:
    with open(path, "rb") as f:
        if f.readline() != CHECKPOINT_MAGIC:
            raise SpecError(f"{path} is not a checkpoint file")
        header = json.loads(f.readline().decode("utf-8"))
        flat = np.frombuffer(f.read(), dtype="<f8").astype(np.float64)
    spec = NetworkSpec.from_dict(header["spec"])
    if flat.size != header["num_parameters"]:
        raise ShapeError(f"checkpoint holds {flat.size} values, header says {header['num_parameters']}")
    params, pos = [], 0
    for layer in spec.layers:
        for shape in ((layer.out_dim, layer.in_dim), (layer.out_dim,)):
            size = int(np.prod(shape))
            params.append(flat[pos:pos + size].reshape(shape))
            pos += size
    model = Model(spec, tuple(params[0::2]), tuple(params[1::2]), seed=header["seed"])
    return model, header
