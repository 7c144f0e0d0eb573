"""Per-neuron importance accumulated across an epoch of batches.

A neuron's per-batch magnitude is the Euclidean norm of the gradients of
everything it owns: its weight row (dense) or output-channel kernel slice
(conv), its bias entry, and the affine pair of an attached norm layer.
Batch magnitudes enter the running score scaled by the batch weight, which
under gradient reweighting is the summed class weight of the batch's
samples, so batches rich in minority samples count for more.
"""

from __future__ import annotations

import csv
import enum
import os

import numpy as np

from .errors import InputError, StateError
from .model import NetworkState, NeuronRef


class Criterion(str, enum.Enum):
    """How final scores are produced for neuron selection."""
    ACCUMULATED_GRADIENT = "accumulated_gradient"
    FINAL_BATCH_GRADIENT = "final_batch_gradient"
    L1_NORM = "l1_norm"
    RANDOM = "random"


def batch_weight(labels: np.ndarray, weights: np.ndarray, gr_enabled: bool) -> float:
    """Summed per-sample class weight of a batch, or 1.0 with GR disabled."""
    if not gr_enabled:
        return 1.0
    labels = np.asarray(labels)
    weights = np.asarray(weights, dtype=np.float64)
    if labels.size and (labels.min() < 0 or labels.max() >= weights.size):
        raise InputError(f"labels out of range for {weights.size} class weights")
    return float(weights[labels].sum())


def _owned_grad_blocks(net: NetworkState, layer_idx: int) -> list[np.ndarray]:
    """Per-parameter gradient arrays whose axis 0 indexes this layer's slots."""
    layer = net.layers[layer_idx]
    blocks = []
    for name in ("weight", "bias"):
        grad = layer.params[name].grad
        if grad is None:
            raise StateError(f"L{layer_idx}.{name} has no gradient; run backward first")
        blocks.append(grad)
    norm_idx = net.norm_of(layer_idx)
    if norm_idx is not None:
        for name in ("gamma", "beta"):
            grad = net.layers[norm_idx].params[name].grad
            if grad is None:
                raise StateError(f"L{norm_idx}.{name} has no gradient; run backward first")
            blocks.append(grad)
    return blocks


def layer_grad_magnitudes(net: NetworkState, layer_idx: int,
                          norm: str = "l2") -> np.ndarray:
    """Vector of per-slot gradient magnitudes for one parametric layer."""
    width = net.layers[layer_idx].spec.width
    if norm == "l2":
        acc = np.zeros(width)
        for block in _owned_grad_blocks(net, layer_idx):
            acc += (block.reshape(width, -1) ** 2).sum(axis=1)
        return np.sqrt(acc)
    if norm == "l1":
        acc = np.zeros(width)
        for block in _owned_grad_blocks(net, layer_idx):
            acc += np.abs(block.reshape(width, -1)).sum(axis=1)
        return acc
    raise InputError(f"unknown magnitude norm {norm!r}")


def neuron_grad_magnitude(net: NetworkState, ref: NeuronRef, norm: str = "l2") -> float:
    """Gradient magnitude over all parameters owned by one neuron."""
    return float(layer_grad_magnitudes(net, ref.layer, norm=norm)[ref.slot])


def layer_l1_weight_norms(net: NetworkState, layer_idx: int) -> np.ndarray:
    """Per-slot L1 norm of the current weight row/kernel slice (no bias)."""
    w = net.layers[layer_idx].params["weight"].data
    return np.abs(w.reshape(w.shape[0], -1)).sum(axis=1)


class GradLedger:
    """Running per-neuron scores over the batches of one accumulation window."""

    def __init__(self, mode: str = "mean", ema_decay: float = 0.9,
                 magnitude_norm: str = "l2"):
        if mode not in ("mean", "ema"):
            raise InputError(f"ledger mode must be 'mean' or 'ema', got {mode!r}")
        if not 0.0 < ema_decay < 1.0:
            raise InputError(f"ema decay must lie in (0, 1), got {ema_decay}")
        self.mode = mode
        self.ema_decay = ema_decay
        self.magnitude_norm = magnitude_norm
        self.batch_count = 0
        self._sums: dict[int, np.ndarray] = {}
        self._ema: dict[int, np.ndarray] = {}
        self._last: dict[int, np.ndarray] = {}

    def reset(self) -> None:
        self.batch_count = 0
        self._sums.clear()
        self._ema.clear()
        self._last.clear()

    def accumulate(self, net: NetworkState, batch_weight: float) -> None:
        """Fold one batch's gradients into the running scores."""
        if batch_weight <= 0:
            raise InputError(f"batch weight must be > 0, got {batch_weight}")
        for layer_idx in net.mutable_layers():
            mags = layer_grad_magnitudes(net, layer_idx, norm=self.magnitude_norm)
            if layer_idx in self._sums and self._sums[layer_idx].shape != mags.shape:
                raise StateError(
                    f"L{layer_idx} width changed mid-window; reset the ledger first")
            weighted = batch_weight * mags
            self._sums[layer_idx] = self._sums.get(layer_idx, 0.0) + weighted
            prev = self._ema.get(layer_idx)
            if prev is None:
                self._ema[layer_idx] = (1.0 - self.ema_decay) * weighted
            else:
                self._ema[layer_idx] = self.ema_decay * prev + (1.0 - self.ema_decay) * weighted
            self._last[layer_idx] = mags
        self.batch_count += 1

    def finalize_scores(self, net: NetworkState, criterion: Criterion | str,
                        rng: np.random.Generator | int | None = None
                        ) -> dict[NeuronRef, float]:
        """Scores for every live mutable neuron under the chosen criterion."""
        criterion = Criterion(criterion)
        refs = net.enumerate_neurons()
        if criterion in (Criterion.ACCUMULATED_GRADIENT, Criterion.FINAL_BATCH_GRADIENT):
            if self.batch_count == 0:
                raise StateError(f"criterion {criterion.value} needs at least one batch")
        if criterion is Criterion.RANDOM:
            gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
            return {ref: float(gen.uniform()) for ref in refs}
        if criterion is Criterion.L1_NORM:
            per_layer = {i: layer_l1_weight_norms(net, i) for i in net.mutable_layers()}
            return {ref: float(per_layer[ref.layer][ref.slot]) for ref in refs}
        if criterion is Criterion.FINAL_BATCH_GRADIENT:
            return {ref: float(self._last[ref.layer][ref.slot]) for ref in refs}
        if self.mode == "ema":
            return {ref: float(self._ema[ref.layer][ref.slot]) for ref in refs}
        return {ref: float(self._sums[ref.layer][ref.slot]) / self.batch_count
                for ref in refs}


def dump_scores_csv(path, event_index: int, scores: dict[NeuronRef, float],
                    criterion: Criterion | str) -> None:
    """Append one event's scores to a CSV (header written on first use)."""
    criterion = Criterion(criterion).value
    path = str(path)
    new_file = not os.path.exists(path)
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new_file:
            writer.writerow(["event", "layer", "slot", "stable_id", "criterion", "score"])
        for ref in sorted(scores):
            writer.writerow([event_index, ref.layer, ref.slot, ref.uid,
                             criterion, repr(scores[ref])])
