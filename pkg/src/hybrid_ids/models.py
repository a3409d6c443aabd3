"""Base models, the stacked ensemble, training and model files.

Architectures (``F`` = encoded feature width, ``o`` = head width, 1 or 10):

ann       dense layers ``F -> u1 -> ... -> o``; ``layers == len(units)``
cnn       the record as a length-``F`` one-channel sequence ->
          conv(``conv_channels``, k) -> maxpool -> conv(``units[0]``, k) ->
          maxpool -> mean over time -> dense(``units[1]``) -> dense(o);
          ``layers == len(units) + 3`` (6 for the Table III rows)
rnn/lstm/gru
          the record as a sequence -> cell(``units[0]``) -> last state ->
          dense(o); ``layers == len(units)``
bilstm/bigru
          as above with a bidirectional cell (final-state width ``2h``)
stacked   base models -> concatenated probabilities -> dense meta-learner
          ``units`` (e.g. 64, 32, o); ``layers`` counts base layers, meta
          layers and the two adapters (input and concatenation)

The last entry of ``units`` is always the head width. The head activation is
sigmoid for ``sigmoid-binary`` and softmax for ``softmax-multiclass``.

Hidden activations come from ``activations``. When there are two or more
entries and the last one is ``sigmoid`` or ``softmax``, that entry names the
head and is dropped. The rest are assigned to the hidden stages in order,
and the final entry is repeated if there are more stages than entries.
Stages are the dense layers of an ann; (both convs, the dense layer) of a
cnn; and the recurrent output of the recurrent kinds.

Model file (little-endian)::

    magic b"HYIDSMDL" | uint32 version | uint64 n | n bytes of JSON
    | uint32 tensor count
    | per tensor: uint16 name length, name (utf-8), uint32 ndim,
      ndim x uint64 extents, float64 data (row-major)
    | 32-byte SHA-256 of everything before it
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import layers as L
from . import tensor as T
from .errors import (
    ConfigurationError,
    DimensionError,
    DivergenceError,
    FoldError,
    HybridIDSError,
    IntegrityError,
    NumericError,
    UsageError,
    VersionError,
)
from .optim import OPTIMIZERS, OptimizerState
from .pipeline import EncodedMatrix, Preprocessor, label_targets
from .tensor import GradTape, Tensor

logger = logging.getLogger(__name__)

MODEL_KINDS = ("ann", "cnn", "lstm", "gru", "rnn", "bilstm", "bigru", "stacked")
HEADS = {"sigmoid-binary": 1, "softmax-multiclass": 10}
RECURRENT = {"rnn": "rnn", "lstm": "lstm", "gru": "gru", "bilstm": "lstm", "bigru": "gru"}
PROB_HEADS = ("sigmoid", "softmax")


@dataclass
class ModelConfig:
    kind: str
    layers: int
    units: tuple[int, ...]
    activations: tuple[str, ...] = ()
    optimizer: str = "adagrad"
    lr: float | None = None
    epochs: int = 20
    batch_size: int = 128
    head: str = "sigmoid-binary"
    seed: int = 0
    dtype: str = "float64"
    conv_channels: int = 32
    kernel_size: int = 3
    pool: int = 2
    folds: int = 5
    bases: tuple["ModelConfig", ...] = ()
    name: str = ""

    def __post_init__(self):
        self.units = tuple(int(u) for u in self.units)
        self.activations = tuple(self.activations)
        self.bases = tuple(b if isinstance(b, ModelConfig) else ModelConfig.from_dict(b) for b in self.bases)

    @property
    def head_width(self) -> int:
        return HEADS[self.head]

    @property
    def label_mode(self) -> str:
        return "binary" if self.head == "sigmoid-binary" else "multiclass"

    def validate(self) -> "ModelConfig":
        if self.kind not in MODEL_KINDS:
            raise ConfigurationError(f"unknown model kind {self.kind!r}; expected one of {MODEL_KINDS}")
        if self.head not in HEADS:
            raise ConfigurationError(f"unknown head {self.head!r}; expected one of {tuple(HEADS)}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}; expected one of {OPTIMIZERS}")
        if not self.units or any(u < 1 for u in self.units):
            raise ConfigurationError(f"unit stack must be non-empty and positive, got {self.units}")
        if self.units[-1] != self.head_width:
            raise ConfigurationError(
                f"unit stack {self.units} ends in {self.units[-1]} but head {self.head!r} needs width {self.head_width}"
            )
        for a in self.activations:
            if a not in L.ACTIVATIONS:
                raise ConfigurationError(f"unknown activation {a!r}; expected one of {L.ACTIVATIONS}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs must be >= 0 and batch size >= 1")
        if self.dtype not in ("float64", "float32"):
            raise ConfigurationError(f"dtype must be float64 or float32, got {self.dtype!r}")
        expected = self.expected_layers()
        if self.layers != expected:
            raise ConfigurationError(
                f"{self.kind} with units {self.units} has {expected} layers, config declares {self.layers}"
            )
        if self.kind == "cnn" and len(self.units) != 3:
            raise ConfigurationError(f"cnn unit stack must be (channels, dense, head), got {self.units}")
        if self.kind in RECURRENT and len(self.units) != 2:
            raise ConfigurationError(f"{self.kind} unit stack must be (hidden, head), got {self.units}")
        if self.kind == "stacked":
            if len(self.bases) < 2:
                raise ConfigurationError("a stacked model needs at least two base models")
            if self.folds < 2:
                raise ConfigurationError(f"stacking needs at least 2 folds, got {self.folds}")
            for b in self.bases:
                if b.kind == "stacked":
                    raise ConfigurationError("stacked models cannot be nested")
                if b.head != self.head:
                    raise ConfigurationError(f"base {b.name or b.kind} head {b.head!r} differs from {self.head!r}")
                b.validate()
        return self

    def expected_layers(self) -> int:
        if self.kind == "cnn":
            return len(self.units) + 3
        if self.kind == "stacked":
            return sum(b.layers for b in self.bases) + len(self.units) + 2
        return len(self.units)

    def hidden_activations(self, stages: int) -> list[str | None]:
        acts = list(self.activations)
        if len(acts) >= 2 and acts[-1] in PROB_HEADS:
            acts = acts[:-1]
        if not acts:
            return [None] * stages
        return [acts[min(i, len(acts) - 1)] for i in range(stages)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["units"] = list(self.units)
        d["activations"] = list(self.activations)
        d["bases"] = [b.to_dict() for b in self.bases]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown model config fields {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from None


# ---------------------------------------------------------------------------
# Table III presets


# name, kind, layers, units (head appended for cnn), activations, optimizer, epochs, reported accuracy (%)
_TABLE_III = [
    ("ann-adagrad-20", "ann", 3, (64, 32), ("relu", "tanh"), "adagrad", 20, 80.25),
    ("ann-sgd-20", "ann", 3, (64, 32), ("softmax", "sigmoid"), "sgd", 20, 72.21),
    ("ann-adam-20", "ann", 3, (64, 32), ("softmax", "relu"), "adam", 20, 73.89),
    ("cnn-adagrad-30", "cnn", 6, (64, 32), ("tanh", "relu"), "adagrad", 30, 93.55),
    ("cnn-rmsprop-30", "cnn", 6, (64, 32), ("softmax", "relu"), "rmsprop", 30, 80.25),
    ("cnn-adam-30", "cnn", 6, (64, 32), ("tanh", "relu"), "adam", 30, 91.27),
    ("lstm-adamax-30", "lstm", 2, (64,), ("sigmoid",), "adamax", 30, 95.03),
    ("lstm-relu-adamax-30", "lstm", 2, (64,), ("relu",), "adamax", 30, 94.57),
    ("lstm-rmsprop-30", "lstm", 2, (64,), ("tanh",), "rmsprop", 30, 96.88),
    ("rnn-sgd-25", "rnn", 2, (64,), ("softmax",), "sgd", 25, 93.38),
    ("rnn-rmsprop-25", "rnn", 2, (64,), ("tanh",), "rmsprop", 25, 91.25),
    ("rnn-adam-25", "rnn", 2, (64,), ("sigmoid",), "adam", 25, 92.58),
    ("proposed-adagrad-25", "stacked", 18, (64, 32), ("relu", "sigmoid"), "adagrad", 25, 99.76),
    ("proposed-adamax-25", "stacked", 18, (64, 32), ("tanh", "sigmoid"), "adamax", 25, 95.41),
    ("proposed-adam-25", "stacked", 18, (64, 32), ("relu", "tanh"), "adam", 25, 93.37),
]
PRESET_NAMES = tuple(row[0] for row in _TABLE_III)
REPORTED_ACCURACY = {row[0]: row[7] for row in _TABLE_III}

DEFAULT_BASES = ("ann", "cnn", "bilstm", "rnn")


def base_config(kind: str, head: str, optimizer: str, epochs: int, lr: float | None = None, seed: int = 0) -> ModelConfig:
    """Default ensemble member of the given kind."""
    w = HEADS[head]
    if kind == "ann":
        return ModelConfig("ann", 3, (64, 32, w), ("relu",), optimizer, lr, epochs, head=head, seed=seed, name="ann")
    if kind == "cnn":
        return ModelConfig("cnn", 6, (64, 32, w), ("tanh", "relu"), optimizer, lr, epochs, head=head, seed=seed, name="dcnn")
    if kind in RECURRENT:
        return ModelConfig(kind, 2, (64, w), (), optimizer, lr, epochs, head=head, seed=seed, name=kind)
    raise ConfigurationError(f"no default base model for kind {kind!r}")


def preset(name: str, label_mode: str = "binary", seed: int = 0) -> ModelConfig:
    rows = {row[0]: row for row in _TABLE_III}
    if name not in rows:
        raise ConfigurationError(f"unknown preset {name!r}; valid presets: {', '.join(PRESET_NAMES)}")
    _, kind, layers, units, acts, opt, epochs, _ = rows[name]
    head = "sigmoid-binary" if label_mode == "binary" else "softmax-multiclass"
    w = HEADS[head]
    bases = ()
    if kind == "stacked":
        bases = tuple(base_config(k, head, opt, epochs) for k in DEFAULT_BASES)
    cfg = ModelConfig(kind, layers, (*units, w), acts, opt, None, epochs, head=head, seed=seed, bases=bases, name=name)
    return cfg.validate()


# ---------------------------------------------------------------------------
# base models


@dataclass
class LayerSpec:
    name: str
    kind: str
    shapes: dict[str, tuple]

    @property
    def n_params(self) -> int:
        return int(sum(np.prod(s) for s in self.shapes.values()))


class Model:
    """A built base model: configuration, input width and parameters."""

    def __init__(self, cfg: ModelConfig, input_dim: int, params: dict[str, np.ndarray] | None = None):
        cfg.validate()
        if cfg.kind == "stacked":
            raise ConfigurationError("use train_stacked for stacked models")
        self.cfg = cfg
        self.input_dim = int(input_dim)
        self.layers = _layout(cfg, self.input_dim)
        self.dtype = np.dtype(cfg.dtype)
        self.rng = np.random.default_rng(cfg.seed)
        if params is None:
            params = _init_params(self.layers, self.rng)
        self.params = {k: np.ascontiguousarray(v, dtype=self.dtype) for k, v in params.items()}
        expected = {f"{l.name}.{p}": s for l in self.layers for p, s in l.shapes.items()}
        got = {k: v.shape for k, v in self.params.items()}
        if got != expected:
            raise DimensionError(f"parameter shapes {got} do not match architecture {expected}")
        self.preprocessor: Preprocessor | None = None
        self.metadata: dict = {}

    @property
    def output_width(self) -> int:
        return self.cfg.head_width

    @property
    def n_params(self) -> int:
        return sum(l.n_params for l in self.layers)

    def summary(self) -> dict:
        return {
            "kind": self.cfg.kind,
            "input_dim": self.input_dim,
            "layers": [{"name": l.name, "kind": l.kind, "shapes": {k: list(v) for k, v in l.shapes.items()}} for l in self.layers],
            "total_params": self.n_params,
        }

    def checksum(self) -> str:
        return params_checksum(self.params)

    def forward(self, x: Tensor, p: dict[str, Tensor]) -> Tensor:
        """Probabilities for a ``(batch, F)`` input, as a differentiable tensor."""
        return _forward(self, x, p)

    def predict_proba(self, X: np.ndarray, batch_size: int = 2048) -> np.ndarray:
        return predict_proba(self, X, batch_size)


def _layout(cfg: ModelConfig, f: int) -> list[LayerSpec]:
    o = cfg.head_width
    if f < 1:
        raise DimensionError(f"input width must be positive, got {f}")
    if cfg.kind == "ann":
        dims = (f, *cfg.units)
        return [LayerSpec(f"dense{i}", "dense", L.param_shapes("dense", dims[i], dims[i + 1])) for i in range(len(cfg.units))]
    if cfg.kind == "cnn":
        c2, d, _ = cfg.units
        k = cfg.kernel_size
        t = f
        for _ in range(2):
            t = L.conv_output_length(t, k, 1, k // 2)
            if t < cfg.pool:
                raise DimensionError(f"input width {f} is too short for the cnn (kernel {k}, pool {cfg.pool})")
            t = (t - cfg.pool) // cfg.pool + 1
        return [
            LayerSpec("conv0", "conv1d", L.param_shapes("conv1d", 1, cfg.conv_channels, k)),
            LayerSpec("conv1", "conv1d", L.param_shapes("conv1d", cfg.conv_channels, c2, k)),
            LayerSpec("dense0", "dense", L.param_shapes("dense", c2, d)),
            LayerSpec("dense1", "dense", L.param_shapes("dense", d, o)),
        ]
    if cfg.kind in RECURRENT:
        cell, h = RECURRENT[cfg.kind], cfg.units[0]
        if cfg.kind.startswith("bi"):
            specs = [LayerSpec(f"{cell}_fwd", cell, L.param_shapes(cell, 1, h)), LayerSpec(f"{cell}_bwd", cell, L.param_shapes(cell, 1, h))]
            width = 2 * h
        else:
            specs = [LayerSpec(cell, cell, L.param_shapes(cell, 1, h))]
            width = h
        return specs + [LayerSpec("dense0", "dense", L.param_shapes("dense", width, o))]
    raise ConfigurationError(f"no layout for kind {cfg.kind!r}")


def _init_params(specs: list[LayerSpec], rng: np.random.Generator) -> dict[str, np.ndarray]:
    out = {}
    for s in specs:
        if s.kind == "dense":
            n_in, n_out = s.shapes["W"]
            p = L.init_dense(rng, n_in, n_out)
        elif s.kind == "conv1d":
            c_out, c_in, k = s.shapes["W"]
            p = L.init_conv1d(rng, c_in, c_out, k)
        else:
            p = L.init_cell(rng, s.kind, s.shapes["Wx"][0], s.shapes["Wh"][0])
        out.update({f"{s.name}.{k}": v for k, v in p.items()})
    return out


def _sub(p: dict[str, Tensor], layer: str) -> dict[str, Tensor]:
    prefix = layer + "."
    return {k[len(prefix) :]: v for k, v in p.items() if k.startswith(prefix)}


def _head(z: Tensor, cfg: ModelConfig) -> Tensor:
    return T.sigmoid(z) if cfg.head == "sigmoid-binary" else T.softmax(z)


def _maybe(act: str | None, x: Tensor) -> Tensor:
    return L.activation(act, x) if act else x


def _forward(model: Model, x: Tensor, p: dict[str, Tensor]) -> Tensor:
    cfg = model.cfg
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise DimensionError(f"model expects (batch, {model.input_dim}) input, got {x.shape}")
    if cfg.kind == "ann":
        n = len(cfg.units)
        acts = cfg.hidden_activations(n - 1)
        h = x
        for i in range(n - 1):
            h = _maybe(acts[i], L.dense_forward(h, _sub(p, f"dense{i}")))
        return _head(L.dense_forward(h, _sub(p, f"dense{n - 1}")), cfg)
    if cfg.kind == "cnn":
        conv_act, dense_act = cfg.hidden_activations(2)
        pad = cfg.kernel_size // 2
        h = L.as_sequence(x)
        for i in range(2):
            h = _maybe(conv_act, L.conv1d_forward(h, _sub(p, f"conv{i}"), stride=1, padding=pad))
            h = L.maxpool1d(h, cfg.pool, cfg.pool)
        h = T.mean(h, axis=1)
        h = _maybe(dense_act, L.dense_forward(h, _sub(p, "dense0")))
        return _head(L.dense_forward(h, _sub(p, "dense1")), cfg)
    cell = RECURRENT[cfg.kind]
    (act,) = cfg.hidden_activations(1)
    seq = L.as_sequence(x)
    if cfg.kind.startswith("bi"):
        h = L.bidirectional(cell, seq, _sub(p, f"{cell}_fwd"), _sub(p, f"{cell}_bwd"))
    else:
        _, h = L.cell_forward(cell, seq, _sub(p, cell))
    h = _maybe(act, h)
    return _head(L.dense_forward(h, _sub(p, "dense0")), cfg)


def build_base_model(cfg: ModelConfig, input_dim: int) -> Model:
    """Allocate and initialise a base model from ``cfg.seed``."""
    return Model(cfg, input_dim)


def params_checksum(params: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in params:
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name], dtype="<f8").tobytes())
    return h.hexdigest()


def predict_proba(model: Model, X: np.ndarray, batch_size: int = 2048) -> np.ndarray:
    """``(N, 1)`` P(attack) for a binary head, ``(N, 10)`` rows for multiclass."""
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise DimensionError(f"model expects {model.input_dim} features, got input of shape {X.shape}")
    params = {k: Tensor(v) for k, v in model.params.items()}
    out = np.empty((X.shape[0], model.output_width))
    for start in range(0, X.shape[0], batch_size):
        xb = Tensor(X[start : start + batch_size], dtype=model.dtype)
        out[start : start + batch_size] = _forward(model, xb, params).data
    return out


def predicted_labels(proba: np.ndarray) -> np.ndarray:
    if proba.shape[1] == 1:
        return (proba[:, 0] >= 0.5).astype(np.int64)
    return np.argmax(proba, axis=1)


def _accuracy(proba: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(predicted_labels(proba) == y)) if y.size else 0.0


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainReport:
    epochs: list[dict] = field(default_factory=list)
    seconds: float = 0.0
    checksum: str = ""
    seed: int = 0
    config: dict = field(default_factory=dict)
    dtype: str = "float64"
    final_accuracy: float | None = None
    bases: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainReport":
        return cls(**d)

    @property
    def losses(self) -> list[float]:
        return [e["loss"] for e in self.epochs]


def loss_fn(prob: Tensor, target: np.ndarray, head: str) -> Tensor:
    if head == "sigmoid-binary":
        return L.binary_cross_entropy(prob, target)
    return L.cross_entropy(prob, target)


def train(
    model: Model,
    data: EncodedMatrix,
    cfg: ModelConfig | None = None,
    on_epoch: Callable[[dict], None] | None = None,
    track_accuracy: bool = True,
) -> TrainReport:
    """Mini-batch training with a fresh shuffle per epoch from the model's generator.

    With ``track_accuracy=False`` the per-epoch full pass over the data is
    skipped (epoch rows carry ``accuracy: None``); the final accuracy is still
    measured once at the end.
    """
    cfg = cfg or model.cfg
    if data.label_mode != cfg.label_mode:
        raise UsageError(f"data label mode {data.label_mode!r} does not match head {cfg.head!r}")
    X = np.ascontiguousarray(data.X, dtype=model.dtype)
    if X.shape[1] != model.input_dim:
        raise DimensionError(f"model expects {model.input_dim} features, data has {X.shape[1]}")
    targets = label_targets(data.y, data.label_mode).astype(model.dtype)
    opt = OptimizerState(cfg.optimizer, cfg.lr)
    n = X.shape[0]
    report = TrainReport(seed=cfg.seed, config=cfg.to_dict(), dtype=cfg.dtype)
    start = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        order = model.rng.permutation(n)
        total = 0.0
        for b, lo in enumerate(range(0, n, cfg.batch_size), start=1):
            idx = order[lo : lo + cfg.batch_size]
            tape = GradTape()
            leaves = {k: tape.leaf(v, name=k) for k, v in model.params.items()}
            prob = _forward(model, Tensor(X[idx]), leaves)
            loss = loss_fn(prob, targets[idx], cfg.head)
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(epoch, b, value)
            grads = tape.backward(loss)
            try:
                opt.step(model.params, {k: grads[t].data for k, t in leaves.items()})
            except NumericError as exc:
                raise DivergenceError(epoch, b, value) from exc
            total += value * idx.size
        acc = _accuracy(predict_proba(model, X), data.y) if track_accuracy or epoch == cfg.epochs else None
        row = {"epoch": epoch, "loss": total / n if n else 0.0, "accuracy": acc}
        report.epochs.append(row)
        if on_epoch:
            on_epoch(row)
    report.seconds = time.perf_counter() - start
    report.checksum = model.checksum()
    report.final_accuracy = report.epochs[-1]["accuracy"] if report.epochs else _accuracy(predict_proba(model, X), data.y)
    return report


# ---------------------------------------------------------------------------
# stacking


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def stratified_folds(y: np.ndarray, k: int, rng: np.random.Generator, groups: np.ndarray | None = None) -> np.ndarray:
    """Fold id per row. Rows sharing a group id (oversampled copies) share a fold."""
    y = np.asarray(y)
    groups = np.arange(y.size) if groups is None else np.asarray(groups)
    uniq, first = np.unique(groups, return_index=True)
    g_label = y[first]
    classes, counts = np.unique(g_label, return_counts=True)
    if counts.size and k > counts.min():
        c = classes[np.argmin(counts)]
        raise FoldError(f"{k} folds exceed the {counts.min()} distinct rows of class {c}")
    g_fold = np.empty(uniq.size, dtype=np.int64)
    for c in classes:
        members = np.flatnonzero(g_label == c)
        members = members[rng.permutation(members.size)]
        g_fold[members] = np.arange(members.size) % k
    return g_fold[np.searchsorted(uniq, groups)]


class StackedModel:
    def __init__(self, cfg: ModelConfig, bases: list[Model], meta: Model):
        self.cfg = cfg
        self.bases = bases
        self.meta = meta
        self.fold_of: np.ndarray | None = None
        self.groups: np.ndarray | None = None
        self.fold_log: list[dict] = []
        self.preprocessor: Preprocessor | None = None
        self.metadata: dict = {}
        width = sum(b.output_width for b in bases)
        if meta.input_dim != width:
            raise DimensionError(f"meta-learner expects {meta.input_dim} inputs, bases produce {width}")

    @property
    def input_dim(self) -> int:
        return self.bases[0].input_dim

    @property
    def output_width(self) -> int:
        return self.meta.output_width

    def checksum(self) -> str:
        h = hashlib.sha256()
        for m in [*self.bases, self.meta]:
            h.update(m.checksum().encode())
        return h.hexdigest()

    def meta_features(self, X: np.ndarray) -> np.ndarray:
        return np.hstack([predict_proba(b, X) for b in self.bases])

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return predict_stacked(self, X)

    def summary(self) -> dict:
        return {
            "kind": "stacked",
            "bases": [b.summary() for b in self.bases],
            "meta": self.meta.summary(),
            "declared_layers": self.cfg.layers,
            "layer_accounting": {
                "bases": {b.cfg.name or b.cfg.kind: b.cfg.layers for b in self.bases},
                "meta": len(self.cfg.units),
                "adapters": 2,
            },
            "total_params": sum(b.n_params for b in self.bases) + self.meta.n_params,
        }


def meta_config(cfg: ModelConfig, input_width: int) -> ModelConfig:
    return ModelConfig(
        "ann",
        len(cfg.units),
        cfg.units,
        cfg.activations,
        cfg.optimizer,
        cfg.lr,
        cfg.epochs,
        cfg.batch_size,
        cfg.head,
        derive_seed(cfg.seed, 999),
        cfg.dtype,
        name="meta",
    )


def _member(cfg: ModelConfig, i: int, fold: int) -> ModelConfig:
    b = cfg.bases[i]
    return replace(b, seed=derive_seed(cfg.seed, i, fold), dtype=cfg.dtype, head=cfg.head)


def train_stacked(cfg: ModelConfig, data: EncodedMatrix, groups: np.ndarray | None = None, on_event: Callable[[str], None] | None = None) -> tuple[StackedModel, TrainReport]:
    """K-fold out-of-fold stacking.

    Each base is trained K times on K-1 folds and predicts the held-out fold;
    the out-of-fold probabilities train the meta-learner; then every base is
    retrained on all rows for inference. ``groups`` ties duplicated rows
    (oversampling) to one fold.
    """
    cfg.validate()
    if cfg.kind != "stacked":
        raise ConfigurationError(f"train_stacked needs a stacked config, got {cfg.kind!r}")
    if data.label_mode != cfg.label_mode:
        raise UsageError(f"data label mode {data.label_mode!r} does not match head {cfg.head!r}")
    say = on_event or (lambda msg: None)
    start = time.perf_counter()
    n, f = data.X.shape
    rng = np.random.default_rng(cfg.seed)
    fold_of = stratified_folds(data.y, cfg.folds, rng, groups)
    g = np.arange(n) if groups is None else np.asarray(groups)
    widths = [HEADS[b.head] for b in cfg.bases]
    offsets = np.r_[0, np.cumsum(widths)]
    oof = np.full((n, offsets[-1]), np.nan)
    fold_log = []
    base_reports = []

    for i, bcfg in enumerate(cfg.bases):
        label = bcfg.name or bcfg.kind
        for k in range(cfg.folds):
            tr, te = np.flatnonzero(fold_of != k), np.flatnonzero(fold_of == k)
            mcfg = _member(cfg, i, k)
            try:
                m = Model(mcfg, f)
                train(m, _rows(data, tr), mcfg, track_accuracy=False)
                oof[te, offsets[i] : offsets[i + 1]] = predict_proba(m, data.X[te])
            except HybridIDSError as exc:
                exc.args = (f"base model {label!r} (fold {k}): {exc}",)
                raise
            fold_log.append({"base": i, "fold": k, "train_rows": tr, "predicted_rows": te})
            say(f"base {label} fold {k + 1}/{cfg.folds} done")

    mcfg = meta_config(cfg, oof.shape[1])
    meta = Model(mcfg, oof.shape[1])
    meta_data = EncodedMatrix(oof, data.y, data.label_mode, [f"p{j}" for j in range(oof.shape[1])])
    meta_report = train(meta, meta_data, mcfg)
    say("meta-learner trained")

    bases = []
    for i, bcfg in enumerate(cfg.bases):
        mcfg = _member(cfg, i, cfg.folds)
        m = Model(mcfg, f)
        rep = train(m, data, mcfg)
        bases.append(m)
        base_reports.append({"name": bcfg.name or bcfg.kind, "final_accuracy": rep.final_accuracy, "seconds": rep.seconds, "epochs": rep.epochs})
        say(f"base {bcfg.name or bcfg.kind} retrained on all rows")

    sm = StackedModel(cfg, bases, meta)
    sm.fold_of = fold_of
    sm.groups = g
    sm.fold_log = fold_log
    report = TrainReport(
        epochs=meta_report.epochs,
        seconds=time.perf_counter() - start,
        checksum=sm.checksum(),
        seed=cfg.seed,
        config=cfg.to_dict(),
        dtype=cfg.dtype,
        final_accuracy=_accuracy(predict_stacked(sm, data.X), data.y),
        bases=base_reports,
    )
    return sm, report


def check_out_of_fold(sm: StackedModel) -> None:
    """Raise FoldError unless no held-out prediction came from a model that saw that row (or a copy)."""
    if not sm.fold_log:
        raise FoldError("stacked model has no fold bookkeeping")
    groups = sm.groups
    for entry in sm.fold_log:
        tr, te = entry["train_rows"], entry["predicted_rows"]
        if np.intersect1d(tr, te).size:
            raise FoldError(f"base {entry['base']} fold {entry['fold']}: predicted rows it trained on")
        if np.intersect1d(groups[tr], groups[te]).size:
            raise FoldError(f"base {entry['base']} fold {entry['fold']}: predicted copies of rows it trained on")
    for i in range(len(sm.cfg.bases)):
        covered = np.concatenate([e["predicted_rows"] for e in sm.fold_log if e["base"] == i])
        if np.sort(covered).tolist() != list(range(groups.size)):
            raise FoldError(f"base {i}: held-out folds do not cover every row exactly once")


def _rows(data: EncodedMatrix, idx: np.ndarray) -> EncodedMatrix:
    return EncodedMatrix(data.X[idx], data.y[idx], data.label_mode, data.feature_names, data.preprocessor)


def predict_stacked(sm: StackedModel, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[1] != sm.input_dim:
        raise DimensionError(f"model expects {sm.input_dim} features, got input of shape {X.shape}")
    return predict_proba(sm.meta, sm.meta_features(X))


def predict(model, X: np.ndarray) -> np.ndarray:
    return predict_stacked(model, X) if isinstance(model, StackedModel) else predict_proba(model, X)


# ---------------------------------------------------------------------------
# model files

MODEL_MAGIC = b"HYIDSMDL"
MODEL_VERSION = 1


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode()
    arr = np.ascontiguousarray(arr, dtype="<f8")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes()


def save_model(model, path) -> None:
    """Write a base or stacked model, its preprocessor and metadata."""
    tensors: dict[str, np.ndarray] = {}
    if isinstance(model, StackedModel):
        header = {
            "format": "hybrid-ids-model",
            "type": "stacked",
            "config": model.cfg.to_dict(),
            "input_dim": model.input_dim,
            "bases": [{"config": b.cfg.to_dict(), "input_dim": b.input_dim} for b in model.bases],
            "meta": {"config": model.meta.cfg.to_dict(), "input_dim": model.meta.input_dim},
        }
        for i, b in enumerate(model.bases):
            tensors.update({f"base{i}/{k}": v for k, v in b.params.items()})
        tensors.update({f"meta/{k}": v for k, v in model.meta.params.items()})
    else:
        header = {"format": "hybrid-ids-model", "type": "base", "config": model.cfg.to_dict(), "input_dim": model.input_dim}
        tensors.update({f"model/{k}": v for k, v in model.params.items()})
    header["metadata"] = model.metadata
    pre = model.preprocessor
    header["preprocessor"] = pre.to_dict() if pre is not None else None
    if pre is not None:
        tensors["pre/mean"] = pre.normalizer.mean
        tensors["pre/std"] = pre.normalizer.std

    blob = json.dumps(header, sort_keys=True).encode()
    body = bytearray(MODEL_MAGIC + struct.pack("<IQ", MODEL_VERSION, len(blob)) + blob)
    body += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        body += _pack_tensor(name, arr)
    body += hashlib.sha256(body).digest()
    Path(path).write_bytes(bytes(body))


def load_model(path):
    blob = Path(path).read_bytes()
    if len(blob) < 20 + 32 or blob[:8] != MODEL_MAGIC:
        raise IntegrityError(f"{path}: not a model file or truncated")
    (version,) = struct.unpack_from("<I", blob, 8)
    if version != MODEL_VERSION:
        raise VersionError(f"{path}: unsupported model file version {version} (expected {MODEL_VERSION})")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError(f"{path}: checksum mismatch")
    try:
        (n,) = struct.unpack_from("<Q", body, 12)
        header = json.loads(body[20 : 20 + n])
        pos = 20 + n
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", body, pos)
            name = body[pos + 2 : pos + 2 + ln].decode()
            pos += 2 + ln
            (ndim,) = struct.unpack_from("<I", body, pos)
            shape = struct.unpack_from(f"<{ndim}Q", body, pos + 4)
            pos += 4 + 8 * ndim
            size = int(np.prod(shape)) if ndim else 1
            tensors[name] = np.frombuffer(body, dtype="<f8", count=size, offset=pos).astype(np.float64).reshape(shape)
            pos += 8 * size
        if pos != len(body):
            raise IntegrityError(f"{path}: {len(body) - pos} trailing bytes")
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise IntegrityError(f"{path}: malformed model file ({exc})") from None

    def params(prefix: str) -> dict[str, np.ndarray]:
        return {k[len(prefix) :]: v for k, v in tensors.items() if k.startswith(prefix)}

    if header["type"] == "stacked":
        bases = [
            Model(ModelConfig.from_dict(b["config"]), b["input_dim"], params(f"base{i}/"))
            for i, b in enumerate(header["bases"])
        ]
        meta = Model(ModelConfig.from_dict(header["meta"]["config"]), header["meta"]["input_dim"], params("meta/"))
        model = StackedModel(ModelConfig.from_dict(header["config"]), bases, meta)
    else:
        model = Model(ModelConfig.from_dict(header["config"]), header["input_dim"], params("model/"))
    model.metadata = header.get("metadata") or {}
    if header.get("preprocessor") is not None:
        model.preprocessor = Preprocessor.from_dict(header["preprocessor"], tensors["pre/mean"], tensors["pre/std"])
    return model


def parameter_count(cfg: ModelConfig, input_dim: int) -> int:
    """Closed-form parameter count, independent of the layer layout code."""
    o = cfg.head_width
    if cfg.kind == "ann":
        dims = (input_dim, *cfg.units)
        return sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))
    if cfg.kind == "cnn":
        c1, (c2, d, _), k = cfg.conv_channels, cfg.units, cfg.kernel_size
        return (c1 * k + c1) + (c2 * c1 * k + c2) + (c2 * d + d) + (d * o + o)
    if cfg.kind in RECURRENT:
        gates = {"rnn": 1, "lstm": 4, "gru": 3}[RECURRENT[cfg.kind]]
        h = cfg.units[0]
        cell = gates * (h + h * h + h)
        if cfg.kind.startswith("bi"):
            return 2 * cell + 2 * h * o + o
        return cell + h * o + o
    if cfg.kind == "stacked":
        width = sum(HEADS[b.head] for b in cfg.bases)
        return sum(parameter_count(b, input_dim) for b in cfg.bases) + parameter_count(meta_config(cfg, width), width)
    raise ConfigurationError(f"unknown kind {cfg.kind!r}")
