"""Trainable desk-scale model: a small MLP encoder, a two-layer projection
head whose normalized outputs feed the supervised contrastive loss, and a
linear classifier fit on the pre-projection features.

All math runs in float64 with hand-written forward/backward passes; training
is plain SGD with momentum and weight decay. Every encoder forward batch
bumps a thread-safe counter so query strategies can be cost-accounted by
forward passes rather than wall time.
"""

from __future__ import annotations

import math
import threading
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .data import FeatureMatrix
from .errors import ConfigError, DataError, UsageError
from .io import read_container, write_container
from .seeding import rng_for

LOSS_KINDS = ("contrastive", "cross_entropy")


@dataclass(frozen=True)
class ModelConfig:
    d_in: int
    n_classes: int
    d_hidden: int = 64
    d_feat: int = 32
    d_proj: int = 16
    temperature: float = 0.07
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 60
    batch_size: int = 64
    aug_sigma: float = 0.05
    dropout_rate: float = 0.3
    seed: int = 0
    loss_kind: str = "contrastive"
    lr_decay_epoch: int | None = None  # None: decay x0.1 at 80% of epochs
    classifier_steps: int = 200
    classifier_lr: float = 1.0

    def validate(self) -> None:
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        if self.d_proj > self.d_feat:
            raise ConfigError("d_proj must not exceed d_feat")
        if min(self.d_in, self.d_hidden, self.d_feat, self.d_proj) < 1:
            raise ConfigError("all layer widths must be positive")
        if self.n_classes < 2:
            raise ConfigError("need at least 2 classes")
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"loss_kind must be one of {LOSS_KINDS}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")

    @property
    def decay_epoch(self) -> int:
        if self.lr_decay_epoch is not None:
            return self.lr_decay_epoch
        return int(math.floor(0.8 * self.epochs))


class _ForwardCounter:
    """Monotone, thread-safe forward-pass counter."""

    __slots__ = ("_value", "_lock")

    def __init__(self):
        self._value = 0
        self._lock = threading.Lock()

    def add(self, amount: int) -> None:
        if amount < 0:
            raise ValueError("counter can only increase")
        with self._lock:
            self._value += amount

    @property
    def value(self) -> int:
        return self._value


@dataclass
class ModelState:
    config: ModelConfig
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    v1: np.ndarray
    c1: np.ndarray
    v2: np.ndarray
    c2: np.ndarray
    wc: np.ndarray | None = None
    bc: np.ndarray | None = None
    trained_loss_kind: str | None = None
    training_loss: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)
    counter: _ForwardCounter = field(default_factory=_ForwardCounter)

    @property
    def forward_pass_count(self) -> int:
        return self.counter.value

    def encoder_projection_params(self) -> dict[str, np.ndarray]:
        return {
            "w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2,
            "v1": self.v1, "c1": self.c1, "v2": self.v2, "c2": self.c2,
        }


def init_model(config: ModelConfig) -> ModelState:
    """Fresh state with Glorot-scaled weights drawn from ``config.seed``."""
    config.validate()
    rng = rng_for(config.seed, "init")

    def glorot(fan_in, fan_out):
        return rng.standard_normal((fan_in, fan_out)) * math.sqrt(2.0 / (fan_in + fan_out))

    return ModelState(
        config=config,
        w1=glorot(config.d_in, config.d_hidden),
        b1=np.zeros(config.d_hidden),
        w2=glorot(config.d_hidden, config.d_feat),
        b2=np.zeros(config.d_feat),
        v1=glorot(config.d_feat, config.d_feat),
        c1=np.zeros(config.d_feat),
        v2=glorot(config.d_feat, config.d_proj),
        c2=np.zeros(config.d_proj),
    )


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def _check_d_in(state: ModelState, values: np.ndarray) -> None:
    if values.ndim != 2 or values.shape[1] != state.config.d_in:
        raise DataError(
            f"input has shape {values.shape}, expected (*, {state.config.d_in})"
        )


def encode_values(state: ModelState, values: np.ndarray, hidden_mask: np.ndarray | None = None,
                  count: bool = True) -> np.ndarray:
    """Encoder features (n, d_feat) in float64; counts one pass per batch."""
    values = np.asarray(values, dtype=np.float64)
    _check_d_in(state, values)
    n = values.shape[0]
    b = state.config.batch_size
    out = np.empty((n, state.config.d_feat))
    n_batches = math.ceil(n / b)
    for i in range(n_batches):
        block = values[i * b : (i + 1) * b]
        h = np.tanh(block @ state.w1 + state.b1)
        if hidden_mask is not None:
            h = h * hidden_mask[i * b : (i + 1) * b]
        out[i * b : (i + 1) * b] = h @ state.w2 + state.b2
    if count:
        state.counter.add(n_batches)
    return out


def encode(state: ModelState, x: FeatureMatrix) -> FeatureMatrix:
    """Feature matrix of encoder outputs; ids (and labels) carry over."""
    z = encode_values(state, x.values)
    return FeatureMatrix(z.astype(np.float32), x.ids.copy(),
                         None if x.labels is None else x.labels.copy())


def project_values(state: ModelState, z: np.ndarray) -> np.ndarray:
    """L2-normalized projection-head outputs (n, d_proj).

    Rows that are exactly zero before normalization are replaced by the first
    unit basis vector and tallied in ``state.diagnostics``.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != state.config.d_feat:
        raise DataError(f"features have shape {z.shape}, expected (*, {state.config.d_feat})")
    q = np.tanh(z @ state.v1 + state.c1)
    p = q @ state.v2 + state.c2
    norms = np.linalg.norm(p, axis=1)
    dead = norms < 1e-300
    if np.any(dead):
        state.diagnostics["zero_projection_rows"] = (
            state.diagnostics.get("zero_projection_rows", 0) + int(dead.sum())
        )
        p[dead] = 0.0
        p[dead, 0] = 1.0
        norms[dead] = 1.0
    return p / norms[:, None]


def project(state: ModelState, z: FeatureMatrix) -> FeatureMatrix:
    p = project_values(state, z.values)
    return FeatureMatrix(p.astype(np.float32), z.ids.copy(),
                         None if z.labels is None else z.labels.copy())


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)
    p = np.clip(p, 1e-12, None)
    return p / p.sum(axis=1, keepdims=True)


def predict_proba_from_features(state: ModelState, z: np.ndarray) -> np.ndarray:
    """Class probabilities from precomputed features; no encoder pass."""
    if state.wc is None:
        raise UsageError("classifier not trained; call train() first")
    z = np.asarray(z, dtype=np.float64)
    return _softmax(z @ state.wc + state.bc)


def predict_proba(state: ModelState, x: FeatureMatrix | np.ndarray) -> np.ndarray:
    """Row-stochastic (n, K) class probabilities."""
    if state.wc is None:
        raise UsageError("classifier not trained; call train() first")
    values = x.values if isinstance(x, FeatureMatrix) else x
    z = encode_values(state, values)
    return predict_proba_from_features(state, z)


def stochastic_proba(state: ModelState, x: FeatureMatrix | np.ndarray, tau: int,
                     dropout_rate: float | None = None, seed: int = 0) -> np.ndarray:
    """(tau, n, K) probabilities from tau dropout-masked encoder passes.

    Each pass multiplies the encoder hidden layer by an i.i.d. Bernoulli keep
    mask scaled by 1/(1-rate), then classifies as usual.
    """
    if tau < 2:
        raise UsageError(f"tau must be >= 2, got {tau}")
    if state.wc is None:
        raise UsageError("classifier not trained; call train() first")
    rate = state.config.dropout_rate if dropout_rate is None else dropout_rate
    if not 0 <= rate < 1:
        raise ConfigError("dropout_rate must lie in [0, 1)")
    if rate == 0.0 and tau > 1:
        warnings.warn("dropout_rate is 0: all stochastic passes are identical",
                      stacklevel=2)
    values = x.values if isinstance(x, FeatureMatrix) else x
    values = np.asarray(values, dtype=np.float64)
    _check_d_in(state, values)
    n = values.shape[0]
    rng = rng_for(seed, "stochastic")
    out = np.empty((tau, n, state.config.n_classes))
    for t in range(tau):
        if rate == 0.0:
            mask = None
        else:
            keep = rng.random((n, state.config.d_hidden)) >= rate
            mask = keep / (1.0 - rate)
        z = encode_values(state, values, hidden_mask=mask)
        out[t] = predict_proba_from_features(state, z)
    return out


# ---------------------------------------------------------------------------
# supervised contrastive loss
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentedBatch:
    """Two jittered views per source row, stacked; labels repeat per view."""

    values: np.ndarray
    labels: np.ndarray
    view_of: np.ndarray

    def __post_init__(self):
        n = self.values.shape[0]
        if n % 2 or self.labels.shape != (n,) or self.view_of.shape != (n,):
            raise DataError("augmented batch must hold exactly 2 views per source row")


def make_augmented_batch(values: np.ndarray, labels: np.ndarray, aug_sigma: float,
                         rng: np.random.Generator) -> AugmentedBatch:
    values = np.asarray(values, dtype=np.float64)
    jitter = rng.standard_normal((2,) + values.shape)
    stacked = np.concatenate([values + aug_sigma * jitter[0], values + aug_sigma * jitter[1]])
    idx = np.arange(values.shape[0])
    return AugmentedBatch(stacked, np.concatenate([labels, labels]),
                          np.concatenate([idx, idx]))


def supcon_loss(projections: np.ndarray, labels: np.ndarray, temperature: float) -> float:
    """Supervised contrastive loss over L2-normalized projection rows.

    For each anchor, positives are all other rows sharing its label and the
    softmax denominator runs over every other row. Log-sum-exp is stabilized
    by per-anchor max subtraction; anchors are accumulated in index order.
    """
    loss, _ = _supcon_loss_grad(np.asarray(projections, dtype=np.float64),
                                np.asarray(labels), temperature)
    return loss


def _supcon_loss_grad(p: np.ndarray, labels: np.ndarray, temperature: float):
    if temperature <= 0:
        raise ConfigError("temperature must be positive")
    m = p.shape[0]
    if m < 2:
        raise DataError("contrastive batch needs at least 2 rows")
    sims = (p @ p.T) / temperature
    off_diag = ~np.eye(m, dtype=bool)
    pos = (labels[:, None] == labels[None, :]) & off_diag
    pos_counts = pos.sum(axis=1)
    if np.any(pos_counts == 0):
        row = int(np.argmin(pos_counts))
        raise DataError(f"row {row} has no positive in the batch (label {labels[row]})")

    neg_inf_diag = np.where(off_diag, sims, -np.inf)
    row_max = neg_inf_diag.max(axis=1)
    exp_shift = np.where(off_diag, np.exp(sims - row_max[:, None]), 0.0)
    denom = exp_shift.sum(axis=1)
    log_z = row_max + np.log(denom)

    per_anchor = log_z - (sims * pos).sum(axis=1) / pos_counts
    loss = max(float(np.sum(per_anchor)), 0.0)

    softmax = exp_shift / denom[:, None]
    grad_sims = softmax - pos / pos_counts[:, None]
    grad_p = ((grad_sims + grad_sims.T) @ p) / temperature
    return loss, grad_p


# ---------------------------------------------------------------------------
# full forward/backward through projection + encoder
# ---------------------------------------------------------------------------


def contrastive_loss_and_grads(state: ModelState, values: np.ndarray, labels: np.ndarray):
    """Loss and analytic gradients w.r.t. every encoder/projection weight."""
    x = np.asarray(values, dtype=np.float64)
    _check_d_in(state, x)
    h_pre = x @ state.w1 + state.b1
    h = np.tanh(h_pre)
    z = h @ state.w2 + state.b2
    q = np.tanh(z @ state.v1 + state.c1)
    p_raw = q @ state.v2 + state.c2
    norms = np.linalg.norm(p_raw, axis=1)
    dead = norms < 1e-300
    if np.any(dead):
        p_raw = p_raw.copy()
        p_raw[dead] = 0.0
        p_raw[dead, 0] = 1.0
        norms = np.where(dead, 1.0, norms)
    p = p_raw / norms[:, None]

    loss, grad_p = _supcon_loss_grad(p, labels, state.config.temperature)

    # through row normalization: d(p_raw) = (g - p (p.g)) / ||p_raw||
    inner = (p * grad_p).sum(axis=1, keepdims=True)
    grad_p_raw = (grad_p - p * inner) / norms[:, None]
    if np.any(dead):
        grad_p_raw[dead] = 0.0

    grad_v2 = q.T @ grad_p_raw
    grad_c2 = grad_p_raw.sum(axis=0)
    grad_q = grad_p_raw @ state.v2.T
    grad_q_pre = grad_q * (1.0 - q * q)
    grad_v1 = z.T @ grad_q_pre
    grad_c1 = grad_q_pre.sum(axis=0)
    grad_z = grad_q_pre @ state.v1.T
    grad_w2 = h.T @ grad_z
    grad_b2 = grad_z.sum(axis=0)
    grad_h = grad_z @ state.w2.T
    grad_h_pre = grad_h * (1.0 - h * h)
    grad_w1 = x.T @ grad_h_pre
    grad_b1 = grad_h_pre.sum(axis=0)

    grads = {
        "w1": grad_w1, "b1": grad_b1, "w2": grad_w2, "b2": grad_b2,
        "v1": grad_v1, "c1": grad_c1, "v2": grad_v2, "c2": grad_c2,
    }
    return loss, grads


def _cross_entropy_loss_and_grads(state: ModelState, values: np.ndarray, labels: np.ndarray):
    x = np.asarray(values, dtype=np.float64)
    n = x.shape[0]
    h_pre = x @ state.w1 + state.b1
    h = np.tanh(h_pre)
    z = h @ state.w2 + state.b2
    probs = _softmax(z @ state.wc + state.bc)
    loss = float(-np.log(probs[np.arange(n), labels]).mean())

    grad_logits = probs.copy()
    grad_logits[np.arange(n), labels] -= 1.0
    grad_logits /= n
    grad_wc = z.T @ grad_logits
    grad_bc = grad_logits.sum(axis=0)
    grad_z = grad_logits @ state.wc.T
    grad_w2 = h.T @ grad_z
    grad_b2 = grad_z.sum(axis=0)
    grad_h = grad_z @ state.w2.T
    grad_h_pre = grad_h * (1.0 - h * h)
    grad_w1 = x.T @ grad_h_pre
    grad_b1 = grad_h_pre.sum(axis=0)
    grads = {
        "w1": grad_w1, "b1": grad_b1, "w2": grad_w2, "b2": grad_b2,
        "wc": grad_wc, "bc": grad_bc,
    }
    return loss, grads


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

_BIAS_NAMES = {"b1", "b2", "c1", "c2", "bc"}


class _SgdMomentum:
    def __init__(self, lr, momentum, weight_decay):
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, grad in grads.items():
            g = grad if name in _BIAS_NAMES else grad + self.weight_decay * params[name]
            v = self.velocity.get(name)
            v = g if v is None else self.momentum * v + g
            self.velocity[name] = v
            params[name] -= self.lr * v


def _apply_params(state: ModelState, params: dict[str, np.ndarray]) -> None:
    for name, value in params.items():
        setattr(state, name, value)


def _warn_singleton_classes(labels: np.ndarray) -> None:
    classes, counts = np.unique(labels, return_counts=True)
    singles = classes[counts == 1]
    if singles.size:
        warnings.warn(
            f"classes {singles.tolist()} have a single labeled sample; their two "
            "jittered views pair with each other as the only positive",
            stacklevel=3,
        )


def train(state: ModelState, labeled: FeatureMatrix, config: ModelConfig | None = None) -> ModelState:
    """Train in place on a labeled feature matrix and return the state.

    Contrastive mode runs minibatch SGD on the contrastive loss through the
    encoder and projection head, then fits the linear classifier on frozen
    features with full-batch cross-entropy descent. Cross-entropy mode trains
    encoder and classifier jointly. Deterministic given ``config.seed``.
    """
    if config is not None:
        state.config = config
    cfg = state.config
    cfg.validate()
    if labeled.labels is None:
        raise DataError("training data must be labeled")
    if labeled.labels.max(initial=0) >= cfg.n_classes:
        raise DataError("labels exceed configured class count")
    rng = rng_for(cfg.seed, "train")
    x = labeled.values.astype(np.float64)
    y = labeled.labels

    if cfg.loss_kind == "contrastive":
        _warn_singleton_classes(y)
        _train_contrastive(state, x, y, rng)
        _fit_classifier(state, encode_values(state, x), y)
    else:
        _train_cross_entropy(state, x, y, rng)
    state.trained_loss_kind = cfg.loss_kind
    _assert_finite(state)
    return state


def _train_contrastive(state: ModelState, x, y, rng) -> None:
    cfg = state.config
    params = state.encoder_projection_params()
    opt = _SgdMomentum(cfg.lr, cfg.momentum, cfg.weight_decay)
    n = x.shape[0]
    for epoch in range(cfg.epochs):
        if epoch == cfg.decay_epoch and epoch > 0:
            opt.lr = cfg.lr * 0.1
        order = rng.permutation(n)
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            batch = make_augmented_batch(x[idx], y[idx], cfg.aug_sigma, rng)
            loss, grads = contrastive_loss_and_grads(state, batch.values, batch.labels)
            state.counter.add(1)
            # the loss is a sum over anchors; step with the per-anchor mean so
            # the step size is independent of batch size
            rows = batch.values.shape[0]
            opt.step(params, {k: g / rows for k, g in grads.items()})
            _apply_params(state, params)
            epoch_loss += loss
            n_batches += 1
        state.training_loss.append(epoch_loss / max(n_batches, 1))


def _train_cross_entropy(state: ModelState, x, y, rng) -> None:
    cfg = state.config
    state.wc = np.zeros((cfg.d_feat, cfg.n_classes))
    state.bc = np.zeros(cfg.n_classes)
    params = state.encoder_projection_params()
    params.update({"wc": state.wc, "bc": state.bc})
    opt = _SgdMomentum(cfg.lr, cfg.momentum, cfg.weight_decay)
    n = x.shape[0]
    for epoch in range(cfg.epochs):
        if epoch == cfg.decay_epoch and epoch > 0:
            opt.lr = cfg.lr * 0.1
        order = rng.permutation(n)
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            batch = x[idx] + cfg.aug_sigma * rng.standard_normal((idx.size, x.shape[1]))
            loss, grads = _cross_entropy_loss_and_grads(state, batch, y[idx])
            state.counter.add(1)
            opt.step(params, grads)
            _apply_params(state, params)
            epoch_loss += loss
            n_batches += 1
        state.training_loss.append(epoch_loss / max(n_batches, 1))


def _fit_classifier(state: ModelState, z: np.ndarray, y: np.ndarray) -> None:
    """Full-batch softmax regression on frozen features (deterministic)."""
    cfg = state.config
    n = z.shape[0]
    onehot = np.zeros((n, cfg.n_classes))
    onehot[np.arange(n), y] = 1.0
    wc = np.zeros((cfg.d_feat, cfg.n_classes))
    bc = np.zeros(cfg.n_classes)
    vel_w = np.zeros_like(wc)
    vel_b = np.zeros_like(bc)
    for _ in range(cfg.classifier_steps):
        probs = _softmax(z @ wc + bc)
        grad_logits = (probs - onehot) / n
        grad_w = z.T @ grad_logits + cfg.weight_decay * wc
        grad_b = grad_logits.sum(axis=0)
        vel_w = cfg.momentum * vel_w + grad_w
        vel_b = cfg.momentum * vel_b + grad_b
        wc -= cfg.classifier_lr * vel_w
        bc -= cfg.classifier_lr * vel_b
    state.wc = wc
    state.bc = bc


def _assert_finite(state: ModelState) -> None:
    for name, value in state.encoder_projection_params().items():
        if not np.all(np.isfinite(value)):
            raise DataError(f"non-finite weights in {name} after training")
    if state.wc is not None and not (np.all(np.isfinite(state.wc)) and np.all(np.isfinite(state.bc))):
        raise DataError("non-finite classifier weights after training")


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_model(state: ModelState, path) -> None:
    from dataclasses import asdict

    meta = {
        "kind": "model",
        "config": asdict(state.config),
        "trained_loss_kind": state.trained_loss_kind,
        "forward_pass_count": state.forward_pass_count,
    }
    arrays = dict(state.encoder_projection_params())
    if state.wc is not None:
        arrays["wc"] = state.wc
        arrays["bc"] = state.bc
    write_container(path, meta, arrays)


def load_model(path) -> ModelState:
    meta, arrays = read_container(path)
    if meta.get("kind") != "model":
        raise DataError(f"{path}: container holds {meta.get('kind')!r}, not a model")
    raw = dict(meta["config"])
    config = ModelConfig(**raw)
    state = ModelState(
        config=config,
        w1=arrays["w1"], b1=arrays["b1"], w2=arrays["w2"], b2=arrays["b2"],
        v1=arrays["v1"], c1=arrays["c1"], v2=arrays["v2"], c2=arrays["c2"],
        wc=arrays.get("wc"), bc=arrays.get("bc"),
        trained_loss_kind=meta.get("trained_loss_kind"),
    )
    return state
