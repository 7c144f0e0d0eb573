"""Training orchestration: epochs, accumulation windows, and events.

The epoch whose index e satisfies e % e_mod == e_mod - 1 is an accumulation
window: the ledger collects batch-weighted gradient magnitudes over all of
its mini-batches, and at the window's end (after that epoch's evaluation)
one paired modification event runs. Optimizer moment arrays are keyed by
stable neuron ids, so surgery drops the slots of deleted neurons and
zero-fills slots for new ones.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .data import LabeledDataset
from .errors import ConfigError, InputError, StateError, TrainingAbort
from .ledger import Criterion, GradLedger, batch_weight, dump_scores_csv
from .model import NetworkState, build_mlp, build_small_cnn
from .plasticity import PlasticityConfig, apply_modification, plan_modification
from .report import (EpochMetrics, RunReport, group_accuracy, per_class_accuracy)


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 64
    optimizer: str = "adamw"          # adamw | sgd
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    momentum: float = 0.9             # sgd only
    weight_decay: float = 1e-4
    class_weighted_loss: bool = False  # weight the loss itself, not just the ledger
    criterion: str = Criterion.ACCUMULATED_GRADIENT.value
    ledger_mode: str = "mean"         # mean | ema
    ema_decay: float = 0.9
    magnitude_norm: str = "l2"
    arch: str = "mlp"                 # mlp | cnn
    hidden_widths: tuple = (128, 64)
    channel_widths: tuple = (8, 16)
    plasticity: PlasticityConfig = field(default_factory=PlasticityConfig)
    seed: int = 0
    score_dump: str = ""

    def __post_init__(self):
        if self.epochs < 1:
            raise InputError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise InputError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.plasticity.e_mod > self.epochs:
            raise InputError(
                f"e_mod {self.plasticity.e_mod} exceeds epochs {self.epochs}")
        if self.optimizer not in ("adamw", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.arch not in ("mlp", "cnn"):
            raise ConfigError(f"unknown arch {self.arch!r}")
        Criterion(self.criterion)

    def flat_dict(self) -> dict:
        out = asdict(self)
        plast = out.pop("plasticity")
        out.update(plast)
        out["hidden_widths"] = list(self.hidden_widths)
        out["channel_widths"] = list(self.channel_widths)
        return out


class _OptimizerBase:
    """Shared bookkeeping: per-parameter state arrays plus the stable-id
    rows they correspond to in mutable layers."""

    def __init__(self, net: NetworkState, lr: float, weight_decay: float):
        self.lr = lr
        self.weight_decay = weight_decay
        self.state: dict[str, dict] = {}
        for name, p in net.parameters():
            self.state[name] = self._fresh_state(p.data)
        self.row_ids: dict[int, list[int]] = {
            i: list(net.ids[i]) for i in net.mutable_layers()}

    def _fresh_state(self, data: np.ndarray) -> dict:
        raise NotImplementedError

    def zero_grad(self, net: NetworkState) -> None:
        net.zero_grad()

    def apply_event(self, record: dict) -> None:
        """Replay an event's id changes on the tracked row ids."""
        for entry in record["layers"]:
            layer = entry["layer"]
            dead = set(entry["pruned_ids"])
            ids = [uid for uid in self.row_ids.get(layer, []) if uid not in dead]
            ids.extend(entry["added_ids"])
            self.row_ids[layer] = ids

    def tracked_ids(self) -> dict[int, list[int]]:
        return {k: list(v) for k, v in self.row_ids.items()}


class AdamW(_OptimizerBase):
    """Adam with decoupled weight decay."""

    def __init__(self, net, lr=1e-3, beta1=0.9, beta2=0.999,
                 weight_decay=1e-4, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        super().__init__(net, lr, weight_decay)

    def _fresh_state(self, data):
        return {"m": np.zeros_like(data), "v": np.zeros_like(data), "t": 0}

    def step(self, net: NetworkState) -> None:
        for name, p in net.parameters():
            g = p.grad
            if g is None:
                continue
            st = self.state[name]
            st["t"] += 1
            m, v = st["m"], st["v"]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            mhat = m / (1.0 - self.beta1 ** st["t"])
            vhat = v / (1.0 - self.beta2 ** st["t"])
            p.data -= self.lr * (mhat / (np.sqrt(vhat) + self.eps)
                                 + self.weight_decay * p.data)


class SGDM(_OptimizerBase):
    """SGD with classical momentum; weight decay folds into the gradient."""

    def __init__(self, net, lr=0.1, momentum=0.9, weight_decay=0.0):
        self.momentum = momentum
        super().__init__(net, lr, weight_decay)

    def _fresh_state(self, data):
        return {"mom": np.zeros_like(data)}

    def step(self, net: NetworkState) -> None:
        for name, p in net.parameters():
            g = p.grad
            if g is None:
                continue
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            buf = self.state[name]["mom"]
            buf *= self.momentum
            buf += g
            p.data -= self.lr * buf


def make_optimizer(config: TrainConfig, net: NetworkState):
    if config.optimizer == "adamw":
        return AdamW(net, lr=config.lr, beta1=config.beta1, beta2=config.beta2,
                     weight_decay=config.weight_decay)
    if config.optimizer == "sgd":
        return SGDM(net, lr=config.lr, momentum=config.momentum,
                    weight_decay=config.weight_decay)
    raise ConfigError(f"unknown optimizer {config.optimizer!r}")


@dataclass
class RunState:
    epoch: int
    net: NetworkState
    optimizer: object
    ledger: GradLedger
    rngs: dict[str, np.random.Generator]


def event_epochs(epochs: int, e_mod: int) -> list[int]:
    """Epoch indices that end with a modification event."""
    return [e for e in range(epochs) if e % e_mod == e_mod - 1]


def _prep_features(features: np.ndarray, arch: str) -> np.ndarray:
    if arch == "mlp":
        return features.reshape(features.shape[0], -1)
    if features.ndim == 2:
        side = int(round(features.shape[1] ** 0.5))
        if side * side != features.shape[1]:
            raise InputError(
                f"cnn arch needs square feature dim, got {features.shape[1]}")
        return features.reshape(features.shape[0], 1, side, side)
    return features


def build_network(config: TrainConfig, input_shape: tuple[int, ...],
                  num_classes: int, rng: np.random.Generator) -> NetworkState:
    if config.arch == "mlp":
        return build_mlp(input_shape[0], list(config.hidden_widths), num_classes, rng=rng)
    return build_small_cnn(input_shape, list(config.channel_widths), num_classes, rng=rng)


def train_epoch(state: RunState, train: LabeledDataset, features: np.ndarray,
                config: TrainConfig, class_w: np.ndarray,
                in_window: bool) -> tuple[float, float]:
    """One pass over seeded-shuffled mini-batches; returns (loss, accuracy)."""
    n = len(train)
    order = state.rngs["data"].permutation(n)
    total_loss = 0.0
    correct = 0
    gradient_criterion = state.ledger is not None and Criterion(config.criterion) in (
        Criterion.ACCUMULATED_GRADIENT, Criterion.FINAL_BATCH_GRADIENT)
    for start in range(0, n, config.batch_size):
        idx = order[start:start + config.batch_size]
        xb = T.Tensor(features[idx])
        yb = train.labels[idx]
        logits = state.net.forward(xb, training=True)
        weights = class_w[yb] if config.class_weighted_loss else None
        loss = T.softmax_cross_entropy(logits, yb, weights)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingAbort("non-finite loss", state.epoch, start // config.batch_size)
        state.net.zero_grad()
        loss.backward()
        if in_window and gradient_criterion:
            state.ledger.accumulate(
                state.net, batch_weight(yb, class_w, config.plasticity.gr))
        state.optimizer.step(state.net)
        total_loss += value * len(idx)
        correct += int((logits.data.argmax(axis=1) == yb).sum())
    return total_loss / n, correct / n


def evaluate_logits(net: NetworkState, features: np.ndarray,
                    batch_size: int = 512) -> np.ndarray:
    chunks = []
    with T.no_grad():
        for start in range(0, features.shape[0], batch_size):
            chunks.append(net.forward(T.Tensor(features[start:start + batch_size]),
                                      training=False).data)
    return np.concatenate(chunks) if chunks else np.zeros((0, net.num_classes))


def _check_event_invariants(net: NetworkState, optimizer, event: dict,
                            widths_before: dict[int, int]) -> None:
    """Structural assertions run after every modification event."""
    for layer_idx, width in widths_before.items():
        now = net.layers[layer_idx].spec.width
        if now != width:
            raise StateError(f"L{layer_idx} width drifted {width} -> {now}")
    net.validate()
    for entry in event["layers"]:
        if set(entry["pruned_ids"]) & set(entry["added_ids"]):
            raise StateError("an id was both pruned and added in one event")
    for layer_idx in net.mutable_layers():
        if optimizer.tracked_ids().get(layer_idx) != net.ids[layer_idx]:
            raise StateError(f"optimizer rows for L{layer_idx} differ from live ids")
    for name, p in net.parameters():
        for arr in optimizer.state[name].values():
            if isinstance(arr, np.ndarray) and arr.shape != p.data.shape:
                raise StateError(f"optimizer state for {name} is misshapen")


def run(config: TrainConfig, dataset: tuple[LabeledDataset, LabeledDataset],
        config_echo: dict | None = None) -> RunReport:
    """Train per the config on (train, test) and return the full report."""
    train, test = dataset
    seq = np.random.SeedSequence(config.seed)
    init_s, data_s, plast_s, score_s = seq.spawn(4)
    rngs = {
        "init": np.random.default_rng(init_s),
        "data": np.random.default_rng(data_s),
        "plasticity": np.random.default_rng(plast_s),
        "scores": np.random.default_rng(score_s),
    }

    train_feats = _prep_features(train.features, config.arch)
    test_feats = _prep_features(test.features, config.arch)
    net = build_network(config, train_feats.shape[1:], train.num_classes, rngs["init"])
    optimizer = make_optimizer(config, net)
    ledger = GradLedger(mode=config.ledger_mode, ema_decay=config.ema_decay,
                        magnitude_norm=config.magnitude_norm)
    if train.profile is not None:
        class_w = train.profile.weights
    else:
        class_w = np.ones(train.num_classes)
    state = RunState(epoch=0, net=net, optimizer=optimizer, ledger=ledger, rngs=rngs)

    pcfg = config.plasticity
    windows = set(event_epochs(config.epochs, pcfg.e_mod)) if pcfg.nam else set()
    report = RunReport(config=config_echo or config.flat_dict(), seed=config.seed)
    report.train_counts = np.bincount(train.labels, minlength=train.num_classes).tolist()
    per_class = np.full(train.num_classes, np.nan)

    for epoch in range(config.epochs):
        state.epoch = epoch
        in_window = epoch in windows
        if in_window:
            ledger.reset()
        train_loss, train_acc = train_epoch(state, train, train_feats, config,
                                            class_w, in_window)
        logits = evaluate_logits(net, test_feats)
        preds = logits.argmax(axis=1)
        overall = float((preds == test.labels).mean())
        per_class = per_class_accuracy(logits, test.labels, train.num_classes)
        mean_class = float(np.nanmean(per_class))
        report.epochs.append(EpochMetrics(epoch, train_loss, train_acc,
                                          overall, mean_class))
        if in_window:
            scores = ledger.finalize_scores(net, config.criterion, rngs["scores"])
            if config.score_dump:
                dump_scores_csv(config.score_dump, len(report.events), scores,
                                config.criterion)
            plan = plan_modification(scores, net, pcfg.alpha, event_epoch=epoch,
                                     criterion=config.criterion)
            widths_before = {i: net.layers[i].spec.width for i in net.mutable_layers()}
            event = apply_modification(net, plan, pcfg, rngs["plasticity"], optimizer)
            _check_event_invariants(net, optimizer, event, widths_before)
            report.events.append(event)

    report.overall_accuracy = report.epochs[-1].test_accuracy
    report.mean_class_accuracy = report.epochs[-1].test_mean_class_accuracy
    report.final_per_class = [float(a) for a in per_class]
    report.groups = group_accuracy(per_class, np.array(report.train_counts))
    return report
