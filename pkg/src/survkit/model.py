"""MLP risk model g(x) for Cox regression, trained with AdamW and warm restarts.

Hidden blocks are ``linear -> batch norm -> ReLU -> dropout``; the output is a
single linear node. With zero hidden layers the network is the linear Cox
model ``g(x) = w.x + b``. Everything is plain numpy with hand-written
backpropagation in float64.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .cox import cox_nll, cox_nll_and_grad
from .dataset import SurvivalDataset
from .errors import DataError, NumericalError, TrainingDivergence
from .preprocess import PreprocessPlan, apply_plan

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
FORMAT_VERSION = 1


@dataclass(frozen=True)
class NetworkConfig:
    hidden_layers: int = 3
    nodes_per_layer: int = 75
    dropout: float = 0.3
    weight_decay: float = 0.01
    batch_size: int = 16
    initial_lr: float = 1e-3
    lr_decay_per_cycle: float = 0.8
    initial_cycle_epochs: int = 1
    max_epochs: int = 100
    early_stop_patience: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.hidden_layers < 0:
            raise ValueError("hidden_layers must be >= 0")
        if self.nodes_per_layer < 1:
            raise ValueError("nodes_per_layer must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if not self.initial_lr > 0:
            raise ValueError("initial_lr must be positive")
        if self.initial_cycle_epochs < 1:
            raise ValueError("initial_cycle_epochs must be >= 1")
        if self.max_epochs < 0 or self.early_stop_patience < 1:
            raise ValueError("max_epochs must be >= 0 and early_stop_patience >= 1")

    def replace(self, **changes) -> "NetworkConfig":
        return NetworkConfig(**{**asdict(self), **changes})

    @property
    def effective_dropout(self) -> float:
        return 0.0 if self.hidden_layers == 0 else self.dropout


# reference architecture: 3 x 75, dropout 0.3, weight decay 0.01, batch 16
DEFAULT_CONFIG = NetworkConfig(
    hidden_layers=3, nodes_per_layer=75, dropout=0.3, weight_decay=0.01, batch_size=16
)


class CoxMLP:
    """Network weights, batch-norm state and the dropout random stream.

    Attributes
    ----------
    weights, biases : list of ndarray
        One entry per linear layer; the last one maps to the single output.
    gamma, beta : list of ndarray
        Batch-norm scale and shift, one per hidden layer.
    running_mean, running_var : list of ndarray
        Batch-norm statistics used in eval mode.
    """

    def __init__(self, n_features: int, config: NetworkConfig, feature_names=None):
        self.n_features = int(n_features)
        self.config = config
        self.feature_names = tuple(feature_names) if feature_names is not None else None
        self.training = False
        init_seq, drop_seq = np.random.SeedSequence(config.seed).spawn(2)
        rng = np.random.default_rng(init_seq)
        self._dropout_rng = np.random.default_rng(drop_seq)
        sizes = [self.n_features] + [config.nodes_per_layer] * config.hidden_layers + [1]
        self.weights, self.biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            limit = math.sqrt(6.0 / fan_in)  # He-uniform
            self.weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))
        h = config.hidden_layers
        self.gamma = [np.ones(config.nodes_per_layer) for _ in range(h)]
        self.beta = [np.zeros(config.nodes_per_layer) for _ in range(h)]
        self.running_mean = [np.zeros(config.nodes_per_layer) for _ in range(h)]
        self.running_var = [np.ones(config.nodes_per_layer) for _ in range(h)]
        self._cache = None

    @property
    def n_hidden(self) -> int:
        return self.config.hidden_layers

    def train_mode(self) -> "CoxMLP":
        self.training = True
        return self

    def eval_mode(self) -> "CoxMLP":
        self.training = False
        return self

    def parameters(self):
        """Yield ``(key, array, decayed)`` for every trainable array."""
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            yield ("W", l), W, True
            yield ("b", l), b, False
        for l in range(self.n_hidden):
            yield ("gamma", l), self.gamma[l], False
            yield ("beta", l), self.beta[l], False

    def n_parameters(self) -> int:
        return sum(a.size for _, a, _ in self.parameters())

    def copy(self) -> "CoxMLP":
        return copy.deepcopy(self)

    # -- forward / backward ------------------------------------------------

    def forward(self, X) -> np.ndarray:
        """Risk scores for the rows of ``X``.

        In train mode batch statistics are used (and running statistics
        updated) and dropout masks are drawn; in eval mode the running
        statistics are used and the output is deterministic.
        """
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise DataError(
                f"expected a matrix with {self.n_features} columns, got shape {X.shape}"
            )
        p_drop = self.config.effective_dropout
        cache = []
        h = X
        for l in range(self.n_hidden):
            z = h @ self.weights[l] + self.biases[l]
            if self.training:
                mu = z.mean(axis=0)
                var = z.var(axis=0)
                m = z.shape[0]
                self.running_mean[l] = (1 - BN_MOMENTUM) * self.running_mean[l] + BN_MOMENTUM * mu
                unbiased = var * m / (m - 1) if m > 1 else var
                self.running_var[l] = (1 - BN_MOMENTUM) * self.running_var[l] + BN_MOMENTUM * unbiased
            else:
                mu, var = self.running_mean[l], self.running_var[l]
            inv_std = 1.0 / np.sqrt(var + BN_EPS)
            zhat = (z - mu) * inv_std
            y = self.gamma[l] * zhat + self.beta[l]
            a = np.maximum(y, 0.0)
            mask = None
            if self.training and p_drop > 0:
                mask = (self._dropout_rng.random(a.shape) >= p_drop) / (1.0 - p_drop)
                a = a * mask
            if not np.all(np.isfinite(a)):
                raise NumericalError(f"non-finite activations in hidden layer {l}")
            cache.append((h, zhat, inv_std, y, mask))
            h = a
        out = h @ self.weights[-1] + self.biases[-1]
        if not np.all(np.isfinite(out)):
            raise NumericalError(f"non-finite activations in output layer {self.n_hidden}")
        self._cache = (cache, h, self.training)
        return out[:, 0]

    def backward(self, grad_out) -> dict:
        """Backpropagate d loss / d output through the last forward pass."""
        cache, h_last, training = self._cache
        grad_out = np.asarray(grad_out, dtype=float).reshape(-1, 1)
        grads = {}
        L = self.n_hidden
        grads[("W", L)] = h_last.T @ grad_out
        grads[("b", L)] = grad_out.sum(axis=0)
        dh = grad_out @ self.weights[L].T
        for l in reversed(range(L)):
            h_in, zhat, inv_std, y, mask = cache[l]
            if mask is not None:
                dh = dh * mask
            dy = dh * (y > 0)
            grads[("gamma", l)] = (dy * zhat).sum(axis=0)
            grads[("beta", l)] = dy.sum(axis=0)
            dzhat = dy * self.gamma[l]
            if training:
                m = zhat.shape[0]
                dz = (inv_std / m) * (
                    m * dzhat - dzhat.sum(axis=0) - zhat * (dzhat * zhat).sum(axis=0)
                )
            else:
                dz = dzhat * inv_std
            grads[("W", l)] = h_in.T @ dz
            grads[("b", l)] = dz.sum(axis=0)
            dh = dz @ self.weights[l].T
        return grads

    # -- serialization -----------------------------------------------------

    def to_dict(self, schema_hash: str | None = None) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "schema_hash": schema_hash,
            "n_features": self.n_features,
            "feature_names": list(self.feature_names) if self.feature_names else None,
            "config": asdict(self.config),
            "layers": [
                {"weight": W.tolist(), "bias": b.tolist()}
                for W, b in zip(self.weights, self.biases)
            ],
            "batch_norm": [
                {
                    "gamma": self.gamma[l].tolist(),
                    "beta": self.beta[l].tolist(),
                    "running_mean": self.running_mean[l].tolist(),
                    "running_var": self.running_var[l].tolist(),
                }
                for l in range(self.n_hidden)
            ],
        }

    def to_json(self, schema_hash: str | None = None) -> str:
        return json.dumps(self.to_dict(schema_hash))

    @classmethod
    def from_dict(cls, d: dict, expected_schema_hash: str | None = None) -> "CoxMLP":
        if d.get("format_version") != FORMAT_VERSION:
            raise DataError(f"unsupported model format version {d.get('format_version')!r}")
        if expected_schema_hash is not None and d.get("schema_hash") != expected_schema_hash:
            raise DataError("model was trained on a different feature schema")
        net = cls(d["n_features"], NetworkConfig(**d["config"]), d.get("feature_names"))
        shapes = [W.shape for W in net.weights]
        net.weights = [np.array(layer["weight"], dtype=float).reshape(s) for layer, s in zip(d["layers"], shapes)]
        net.biases = [np.array(layer["bias"], dtype=float) for layer in d["layers"]]
        for l, bn in enumerate(d["batch_norm"]):
            net.gamma[l] = np.array(bn["gamma"], dtype=float)
            net.beta[l] = np.array(bn["beta"], dtype=float)
            net.running_mean[l] = np.array(bn["running_mean"], dtype=float)
            net.running_var[l] = np.array(bn["running_var"], dtype=float)
        return net

    @classmethod
    def from_json(cls, text: str, expected_schema_hash: str | None = None) -> "CoxMLP":
        return cls.from_dict(json.loads(text), expected_schema_hash)

    def digest(self) -> str:
        h = hashlib.sha256()
        for _, a, _ in self.parameters():
            h.update(np.ascontiguousarray(a).tobytes())
        for l in range(self.n_hidden):
            h.update(self.running_mean[l].tobytes())
            h.update(self.running_var[l].tobytes())
        return h.hexdigest()


def cox_nll_grad(net: CoxMLP, X, durations, events):
    """Loss of ``net`` on a batch and the gradient for every parameter.

    Uses the network's current mode (train: batch-norm batch statistics and
    dropout; eval: running statistics, no dropout).
    """
    g = net.forward(X)
    loss, dg = cox_nll_and_grad(g, durations, events)
    return loss, net.backward(dg)


# -- optimizer -------------------------------------------------------------


class AdamWR:
    """Adam with decoupled weight decay and cosine warm restarts.

    Cycle ``k`` (0-based) lasts ``initial_cycle_epochs * 2**k`` epochs and
    starts at ``initial_lr * lr_decay**k``; within a cycle the learning rate
    follows half a cosine down to 0. Decay ``lr_t * weight_decay * w`` is
    applied to weight matrices only.
    """

    def __init__(self, net: CoxMLP, initial_lr, weight_decay, lr_decay=0.8,
                 initial_cycle_epochs=1, betas=(0.9, 0.999), eps=1e-8):
        self.net = net
        self.initial_lr = initial_lr
        self.weight_decay = weight_decay
        self.lr_decay = lr_decay
        self.initial_cycle_epochs = initial_cycle_epochs
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(a) for k, a, _ in net.parameters()}
        self.v = {k: np.zeros_like(a) for k, a, _ in net.parameters()}

    def cycle_at(self, epoch: int):
        """``(cycle index, epoch within cycle, cycle length)`` for an epoch."""
        k, start, length = 0, 0, self.initial_cycle_epochs
        while epoch >= start + length:
            start += length
            length *= 2
            k += 1
        return k, epoch - start, length

    def cycle_start_lr(self, cycle: int) -> float:
        return self.initial_lr * self.lr_decay**cycle

    def lr_at(self, epoch_progress: float) -> float:
        """Learning rate at a fractional epoch position."""
        k, pos, length = self.cycle_at(int(epoch_progress))
        frac = (pos + epoch_progress - int(epoch_progress)) / length
        return self.cycle_start_lr(k) * 0.5 * (1.0 + math.cos(math.pi * frac))

    def step(self, grads: dict, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for key, param, decayed in self.net.parameters():
            g = grads[key]
            m = self.m[key]
            v = self.v[key]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if decayed and self.weight_decay:
                param -= lr * self.weight_decay * param
            param -= lr * update


# -- training --------------------------------------------------------------


@dataclass
class TrainReport:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)  # learning rate at the start of each epoch
    cycle_lengths: list = field(default_factory=list)
    cycle_start_lrs: list = field(default_factory=list)
    best_epoch: int | None = None
    stopped_early: bool = False
    weight_decay: float = 0.0

    @property
    def n_epochs(self) -> int:
        return len(self.val_loss)

    @property
    def best_val_loss(self) -> float:
        return self.val_loss[self.best_epoch] if self.best_epoch is not None else math.inf

    def to_dict(self) -> dict:
        d = asdict(self)
        d["n_epochs"] = self.n_epochs
        d["best_val_loss"] = self.best_val_loss if self.best_epoch is not None else None
        return d


def make_batches(events: np.ndarray, batch_size: int, rng: np.random.Generator):
    """Shuffle and chunk indices so that every batch holds at least one event.

    Event-free chunks are merged into the following one (the last into the
    previous one), and so is a trailing single-subject chunk.
    """
    n = len(events)
    order = rng.permutation(n)
    chunks = [order[s:s + batch_size] for s in range(0, n, batch_size)]
    merged, carry = [], None
    for chunk in chunks:
        if carry is not None:
            chunk = np.concatenate([carry, chunk])
            carry = None
        if events[chunk].any():
            merged.append(chunk)
        else:
            carry = chunk
    if carry is not None:
        if merged:
            merged[-1] = np.concatenate([merged[-1], carry])
        else:
            merged.append(carry)
    if len(merged) > 1 and len(merged[-1]) < 2:
        merged[-2] = np.concatenate([merged[-2], merged.pop()])
    return merged


def train(config: NetworkConfig, train_ds: SurvivalDataset, val_ds: SurvivalDataset,
          plan: PreprocessPlan):
    """Fit a :class:`CoxMLP` by mini-batch minimization of the Cox loss.

    Risk sets are formed within each mini-batch. After every epoch the
    exact loss on the full validation set (eval mode) is recorded; training
    stops once it has not improved for ``early_stop_patience`` epochs and
    the best-scoring state is returned.

    Returns
    -------
    net : CoxMLP
        In eval mode.
    report : TrainReport
    """
    train_ds.require_events()
    val_ds.require_events()
    X = apply_plan(plan, train_ds)
    Xv = apply_plan(plan, val_ds)
    T, D = np.asarray(train_ds.durations), np.asarray(train_ds.events)
    Tv, Dv = np.asarray(val_ds.durations), np.asarray(val_ds.events)

    net = CoxMLP(X.shape[1], config, feature_names=plan.names)
    opt = AdamWR(net, config.initial_lr, config.weight_decay,
                 config.lr_decay_per_cycle, config.initial_cycle_epochs)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(3)[2])
    report = TrainReport(weight_decay=config.weight_decay)
    best_net, best_loss, since_best = net.copy(), math.inf, 0

    for epoch in range(config.max_epochs):
        k, pos, length = opt.cycle_at(epoch)
        if pos == 0:
            report.cycle_lengths.append(length)
            report.cycle_start_lrs.append(opt.cycle_start_lr(k))
        report.lr.append(opt.lr_at(epoch))
        batches = make_batches(D, config.batch_size, shuffle_rng)
        net.train_mode()
        total = 0.0
        try:
            for b, idx in enumerate(batches):
                loss, grads = cox_nll_grad(net, X[idx], T[idx], D[idx])
                if not math.isfinite(loss):
                    raise TrainingDivergence(epoch)
                total += loss
                opt.step(grads, opt.lr_at(epoch + b / len(batches)))
            net.eval_mode()
            val_loss = cox_nll(net.forward(Xv), Tv, Dv)
        except NumericalError as exc:
            if isinstance(exc, TrainingDivergence):
                raise
            raise TrainingDivergence(epoch, str(exc)) from exc
        if not math.isfinite(val_loss):
            raise TrainingDivergence(epoch, "non-finite validation loss")
        report.train_loss.append(total)
        report.val_loss.append(val_loss)
        if val_loss < best_loss:
            best_loss, best_net, since_best = val_loss, net.copy(), 0
            report.best_epoch = epoch
        else:
            since_best += 1
            if since_best >= config.early_stop_patience:
                report.stopped_early = True
                break
    return best_net.eval_mode(), report


def predict_risk(net: CoxMLP, plan: PreprocessPlan, ds: SurvivalDataset) -> np.ndarray:
    """Eval-mode risk scores g(x) for every subject of ``ds``."""
    was_training = net.training
    net.eval_mode()
    try:
        return net.forward(apply_plan(plan, ds))
    finally:
        net.training = was_training


def lr_range_test(config: NetworkConfig, ds: SurvivalDataset, plan: PreprocessPlan,
                  lr_min: float = 1e-6, lr_max: float = 1.0, n_steps: int = 100):
    """Learning-rate sweep: one mini-batch step per log-spaced rate.

    Returns the rates and the batch loss recorded at each; reading off a
    good initial rate is left to the caller.
    """
    ds.require_events()
    X = apply_plan(plan, ds)
    T, D = np.asarray(ds.durations), np.asarray(ds.events)
    net = CoxMLP(X.shape[1], config, feature_names=plan.names).train_mode()
    opt = AdamWR(net, 1.0, config.weight_decay)
    rng = np.random.default_rng(config.seed)
    lrs = np.geomspace(lr_min, lr_max, n_steps)
    losses = np.full(n_steps, np.nan)
    batches = []
    for s, lr in enumerate(lrs):
        if not batches:
            batches = make_batches(D, config.batch_size, rng)
        idx = batches.pop()
        try:
            loss, grads = cox_nll_grad(net, X[idx], T[idx], D[idx])
        except NumericalError:
            break
        losses[s] = loss
        if not math.isfinite(loss):
            break
        opt.step(grads, lr)
    return lrs, losses
