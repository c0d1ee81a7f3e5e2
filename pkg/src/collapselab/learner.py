"""A small MLP feature map with linear task heads, trained by plain SGD.

Backpropagation is written out by hand for this fixed architecture so that
every update is deterministic and can be checked against finite differences.

Head routing per scenario:

* ``DIL`` - one shared head, softmax over its ``K`` outputs;
* ``CIL`` - one head block per task seen so far, one softmax over all of them;
* ``TIL`` - one head block per task, softmax only over the sample's own block.
"""

from __future__ import annotations

import json
import math
import struct
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

SCENARIOS = ("CIL", "DIL", "TIL")
NOT_REACHED = -1


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    hidden_widths: tuple = (64, 64)
    feature_dim: int = 32
    activation: str = "relu"
    head_mode: str = "multi"
    K_per_task: int = 5
    n_tasks: int = 1
    init_scheme: str = "standard"
    feature_activation: bool = True
    center_heads: bool = False
    bias: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.head_mode not in ("single", "multi"):
            raise ValueError(f"unknown head mode {self.head_mode!r}")
        if self.init_scheme not in ("standard", "norm-matching"):
            raise ValueError(f"unknown init scheme {self.init_scheme!r}")
        if min(self.input_dim, self.feature_dim, self.K_per_task, self.n_tasks) < 1:
            raise ValueError("dimensions and counts must be positive")
        k_total = self.K_per_task * (self.n_tasks if self.head_mode == "multi" else 1)
        if self.feature_dim < k_total - 1:
            warnings.warn(
                f"feature_dim={self.feature_dim} < K_total-1={k_total - 1}: a simplex ETF does not fit, "
                "expect degraded NC2 geometry",
                stacklevel=2,
            )


@dataclass
class Model:
    cfg: ModelConfig
    layers: list  # [(W (out, in), b (out,))] for the feature map
    heads: list = field(default_factory=list)  # [(W (K, d), b (K,))]

    @property
    def n_heads(self) -> int:
        return len(self.heads)

    def parameters(self) -> list:
        """All parameter arrays in declaration order (layers, then heads)."""
        out = []
        for W, b in self.layers + self.heads:
            out.extend([W, b])
        return out

    def copy(self) -> "Model":
        return Model(
            self.cfg,
            [(W.copy(), b.copy()) for W, b in self.layers],
            [(W.copy(), b.copy()) for W, b in self.heads],
        )

    def head_weights(self, heads=None) -> tuple[np.ndarray, np.ndarray]:
        """Stacked weights and biases of the selected heads (default: all)."""
        sel = range(self.n_heads) if heads is None else heads
        return (
            np.concatenate([self.heads[i][0] for i in sel]),
            np.concatenate([self.heads[i][1] for i in sel]),
        )


def _gain(activation: str) -> float:
    return math.sqrt(2.0) if activation == "relu" else 1.0


def init_model(cfg: ModelConfig) -> Model:
    """Fan-in scaled uniform init of the feature map plus the first head."""
    rng = np.random.default_rng([cfg.seed, 0])
    dims = [cfg.input_dim, *cfg.hidden_widths, cfg.feature_dim]
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = _gain(cfg.activation) * math.sqrt(3.0 / fan_in)
        layers.append((rng.uniform(-bound, bound, (fan_out, fan_in)), np.zeros(fan_out)))
    model = Model(cfg, layers, [])
    add_head(model)
    return model


def add_head(model: Model) -> int:
    """Append a new head block; returns its index.

    Single-head models accept only one head. Under ``norm-matching`` the new
    block is rescaled to the mean Frobenius norm of the existing blocks.
    """
    cfg = model.cfg
    if cfg.head_mode == "single" and model.n_heads >= 1:
        raise ValueError("single-head model already has its head")
    idx = model.n_heads
    rng = np.random.default_rng([cfg.seed, 1, idx])
    bound = 1.0 / math.sqrt(cfg.feature_dim)
    W = rng.uniform(-bound, bound, (cfg.K_per_task, cfg.feature_dim))
    if cfg.center_heads:
        W -= W.mean(axis=0)
    if cfg.init_scheme == "norm-matching" and model.heads:
        target = float(np.mean([np.linalg.norm(Wh) for Wh, _ in model.heads]))
        W *= target / np.linalg.norm(W)
    model.heads.append((W, np.zeros(cfg.K_per_task)))
    return idx


# --- forward / backward -------------------------------------------------------


def _act(z, kind):
    return np.maximum(z, 0.0) if kind == "relu" else np.tanh(z)


def _act_grad(z, h, kind):
    return (z > 0).astype(float) if kind == "relu" else 1.0 - h * h


def _forward(model: Model, x: np.ndarray):
    cfg = model.cfg
    h = np.asarray(x, dtype=float)
    cache = []
    n_layers = len(model.layers)
    for i, (W, b) in enumerate(model.layers):
        z = h @ W.T + b
        use_act = i < n_layers - 1 or cfg.feature_activation
        out = _act(z, cfg.activation) if use_act else z
        cache.append((h, z, out, use_act))
        h = out
    return h, cache


def features(model: Model, inputs: np.ndarray) -> np.ndarray:
    return _forward(model, inputs)[0]


def logits(model: Model, inputs: np.ndarray, head_selector="all") -> np.ndarray:
    """Logits of all heads concatenated, or of a single head index."""
    phi = features(model, inputs)
    if head_selector == "all":
        W, b = model.head_weights()
    else:
        if not isinstance(head_selector, (int, np.integer)) or not 0 <= head_selector < model.n_heads:
            raise ValueError(f"unknown head {head_selector!r}")
        W, b = model.heads[head_selector]
    return phi @ W.T + b


def _logit_mask(model: Model, tasks: np.ndarray, scenario: str, active: int) -> np.ndarray | None:
    """Allowed-logit mask for TIL (own block only); None means all active logits."""
    if scenario != "TIL":
        return None
    K = model.cfg.K_per_task
    owner = np.repeat(np.arange(active), K)
    return owner[None, :] == tasks[:, None]


def _targets(model: Model, y_local, tasks, scenario: str) -> np.ndarray:
    if scenario == "DIL" or model.cfg.head_mode == "single":
        return np.asarray(y_local)
    return np.asarray(tasks) * model.cfg.K_per_task + np.asarray(y_local)


def loss_and_grad(model: Model, x, y_local, tasks, scenario: str, active: int | None = None, need_grad: bool = True):
    """Mean cross-entropy over a batch and its gradient per parameter array.

    ``y_local`` is the label inside the sample's task head (the class index for
    DIL); ``active`` is the number of heads taking part (default: all).
    """
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}")
    active = model.n_heads if active is None else active
    tasks = np.asarray(tasks, dtype=int)
    if scenario != "DIL" and model.cfg.head_mode == "multi" and tasks.size and (tasks.min() < 0 or tasks.max() >= active):
        raise ValueError(f"task ids must lie in [0, {active}) for {active} active head(s)")
    phi, cache = _forward(model, x)
    W, b = model.head_weights(range(active))
    Z = phi @ W.T + b
    mask = _logit_mask(model, tasks, scenario, active)
    if mask is not None:
        Z = np.where(mask, Z, -np.inf)
    target = _targets(model, y_local, tasks, scenario)
    lse = logsumexp(Z, axis=1)
    n = Z.shape[0]
    loss = float(np.mean(lse - Z[np.arange(n), target]))
    if not need_grad:
        return loss, None
    P = np.exp(Z - lse[:, None])
    P[np.arange(n), target] -= 1.0
    R = P / n
    grads_heads = []
    K = model.cfg.K_per_task
    for i in range(active):
        Ri = R[:, i * K : (i + 1) * K]
        grads_heads.append((Ri.T @ phi, Ri.sum(axis=0)))
    for i in range(active, model.n_heads):
        grads_heads.append((np.zeros_like(model.heads[i][0]), np.zeros_like(model.heads[i][1])))
    delta = R @ W
    grads_layers = []
    for (Wl, _), (h_in, z, out, use_act) in zip(reversed(model.layers), reversed(cache)):
        if use_act:
            delta = delta * _act_grad(z, out, model.cfg.activation)
        grads_layers.append((delta.T @ h_in, delta.sum(axis=0)))
        delta = delta @ Wl
    grads_layers.reverse()
    grads = []
    for gW, gb in grads_layers + grads_heads:
        grads.extend([gW, gb])
    return loss, grads


def sgd_step(model: Model, grads, lr: float, wd: float) -> None:
    """``theta <- (1 - lr*wd) theta - lr * grad`` for every parameter, in place.

    Bias-free models keep their (zero) biases frozen.
    """
    shrink = 1.0 - lr * wd
    for k, (p, g) in enumerate(zip(model.parameters(), grads)):
        if k % 2 and not model.cfg.bias:
            continue
        p *= shrink
        p -= lr * g


def predict(model: Model, x, scenario: str, tasks=None, active: int | None = None) -> np.ndarray:
    """Predicted labels: global class index for CIL, local index for DIL/TIL."""
    active = model.n_heads if active is None else active
    W, b = model.head_weights(range(active))
    Z = features(model, x) @ W.T + b
    if scenario == "TIL":
        if tasks is None:
            raise ValueError("TIL prediction needs the task id of every sample")
        mask = _logit_mask(model, np.asarray(tasks, dtype=int), scenario, active)
        Z = np.where(mask, Z, -np.inf)
        return np.argmax(Z, axis=1) % model.cfg.K_per_task
    return np.argmax(Z, axis=1)


def accuracy(model: Model, x, y_local, tasks, scenario: str, active: int | None = None) -> float:
    pred = predict(model, x, scenario, tasks, active)
    if scenario == "TIL" or scenario == "DIL":
        target = np.asarray(y_local)
    else:
        target = _targets(model, y_local, tasks, scenario)
    return float(np.mean(pred == target))


# --- sessions -----------------------------------------------------------------


@dataclass(frozen=True)
class Hyper:
    lr: float = 0.05
    wd: float = 5e-4
    batch: int = 64
    steps: int = 2000
    log_every: int = 50
    seed: int = 0


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    accuracy: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    tpt_onset: int = NOT_REACHED

    def record(self, step, loss, acc):
        self.steps.append(int(step))
        self.loss.append(float(loss))
        self.accuracy.append(float(acc))


@dataclass
class SessionData:
    """Inputs with per-sample task id and label local to the task head."""

    x: np.ndarray
    y_local: np.ndarray
    tasks: np.ndarray

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        self.y_local = np.asarray(self.y_local, dtype=int)
        self.tasks = np.asarray(self.tasks, dtype=int)
        if not (len(self.x) == len(self.y_local) == len(self.tasks)):
            raise ValueError("session arrays must have equal length")

    def __len__(self):
        return len(self.x)

    @staticmethod
    def concat(parts) -> "SessionData":
        parts = [p for p in parts if len(p)]
        return SessionData(
            np.concatenate([p.x for p in parts]),
            np.concatenate([p.y_local for p in parts]),
            np.concatenate([p.tasks for p in parts]),
        )


def batch_quotas(batch: int, n_groups: int, step: int) -> list[int]:
    """Equal per-group quotas; the remainder rotates round-robin with the step."""
    base, rem = divmod(batch, n_groups)
    quotas = [base] * n_groups
    for j in range(rem):
        quotas[(step + j) % n_groups] += 1
    return quotas


def detect_tpt(log: TrainLog, loss_threshold: float = 1e-3) -> int:
    """First logged step with zero training error and loss below the threshold."""
    for s, loss, acc in zip(log.steps, log.loss, log.accuracy):
        if acc >= 1.0 and loss < loss_threshold:
            return s
    return NOT_REACHED


def train_session(model: Model, train_data: SessionData, buffer: list | None, hyper: Hyper, scenario: str, callback=None, tpt_loss: float = 1e-3):
    """Train on the current task plus replay buffer, in place.

    Each batch draws an equal share from the current task and from every
    buffered task (task-balanced replay). A group smaller than its quota is
    sampled with replacement. Returns ``(model, log)``; the log holds full
    training-set loss and accuracy every ``hyper.log_every`` steps.
    """
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}")
    if len(train_data) == 0:
        raise ValueError("empty training data")
    groups = [train_data] + [g for g in (buffer or []) if len(g)]
    full = SessionData.concat(groups)
    rng = np.random.default_rng([hyper.seed, 2, int(train_data.tasks[0])])
    log = TrainLog()

    def _log(step):
        loss, _ = loss_and_grad(model, full.x, full.y_local, full.tasks, scenario, need_grad=False)
        acc = accuracy(model, full.x, full.y_local, full.tasks, scenario)
        log.record(step, loss, acc)
        if callback is not None:
            out = callback(step, model)
            if out is not None:
                log.snapshots.append((step, out))

    for step in range(hyper.steps):
        if step % hyper.log_every == 0:
            _log(step)
        quotas = batch_quotas(hyper.batch, len(groups), step)
        idx_parts = []
        for g, q in zip(groups, quotas):
            if q:
                idx_parts.append((g, rng.choice(len(g), size=q, replace=q > len(g))))
        xb = np.concatenate([g.x[i] for g, i in idx_parts])
        yb = np.concatenate([g.y_local[i] for g, i in idx_parts])
        tb = np.concatenate([g.tasks[i] for g, i in idx_parts])
        _, grads = loss_and_grad(model, xb, yb, tb, scenario)
        sgd_step(model, grads, hyper.lr, hyper.wd)
    _log(hyper.steps)
    log.tpt_onset = detect_tpt(log, tpt_loss)
    return model, log


# --- checkpoints --------------------------------------------------------------

MAGIC = b"CLABMDL\x00"
VERSION = 1


def save_model(model: Model, path) -> None:
    """Binary checkpoint.

    Layout: 8-byte magic, uint32 version, uint32 header length, UTF-8 JSON
    header (config and array shapes), then every parameter array as
    little-endian float64 in declaration order (row-major).
    """
    params = model.parameters()
    header = json.dumps({"config": asdict(model.cfg), "n_heads": model.n_heads, "shapes": [list(p.shape) for p in params]}).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(header)))
        fh.write(header)
        for p in params:
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())
    tmp.replace(path)


def load_model(path) -> Model:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError("not a collapselab checkpoint")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(raw[16 : 16 + hlen])
    cfg = ModelConfig(**header["config"])
    offset = 16 + hlen
    arrays = []
    for shape in header["shapes"]:
        count = int(np.prod(shape))
        arrays.append(np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).astype(float))
        offset += 8 * count
    if offset != len(raw):
        raise ValueError("checkpoint size does not match its header")
    n_layers = len(cfg.hidden_widths) + 1
    pairs = list(zip(arrays[::2], arrays[1::2]))
    return Model(cfg, pairs[:n_layers], pairs[n_layers:])
