"""Paired neuron addition/removal with weight scaling and norm randomization.

Each modification event is paired per layer: the k lowest-score slots are
pruned and exactly k fresh slots are appended, so layer widths never drift.
Growth runs before pruning; when weight scaling is on, the consumer layer
is rescaled by sqrt(N/(N+k)) at growth and sqrt((N+k)/N) at pruning, which
keeps the composite event near-identity while damping the variance shift
at each intermediate width.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, PlanError
from .ledger import Criterion
from .model import Edit, NetworkState, NeuronRef, apply_edit_to_array


@dataclass
class PlasticityConfig:
    alpha: float = 0.3          # fraction of each layer modified per event
    e_mod: int = 10             # epochs between modification events
    sigma: float = 0.1          # std of the norm-parameter perturbation
    nam: bool = True            # structural modification on/off
    gr: bool = True             # gradient reweighting in the ledger
    ws: bool = True             # consumer weight scaling at width changes
    gda: bool = True            # randomize new neurons' norm parameters
    init_scheme: str = "fresh"  # fresh | clone

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise InputError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.e_mod < 1:
            raise InputError(f"e_mod must be >= 1, got {self.e_mod}")
        if self.sigma <= 0:
            raise InputError(f"sigma must be > 0, got {self.sigma}")
        if self.init_scheme not in ("fresh", "clone"):
            raise InputError(f"unknown init scheme {self.init_scheme!r}")


@dataclass
class LayerPlan:
    prune_slots: tuple[int, ...]
    add_count: int
    clone_sources: tuple[int, ...] = ()   # highest-score slots, used by "clone"


@dataclass
class ModificationPlan:
    event_epoch: int
    criterion: str
    entries: dict[int, LayerPlan] = field(default_factory=dict)


def weight_scale_factor(c_old: int, c_new: int) -> float:
    """sqrt(C_old / C_new), applied to weights whose fan-in count changed."""
    if c_old < 1 or c_new < 1:
        raise InputError(f"channel counts must be >= 1, got {c_old}, {c_new}")
    return math.sqrt(c_old / c_new)


def plan_modification(scores: dict[NeuronRef, float], net: NetworkState,
                      alpha: float, event_epoch: int = 0,
                      criterion: Criterion | str = Criterion.ACCUMULATED_GRADIENT
                      ) -> ModificationPlan:
    """Mark the floor(alpha * width) lowest-score slots of each mutable layer.

    Ties break toward the lower slot index on the prune side. Scores must
    cover every live mutable neuron. The plan is rank-based: rescaling all
    scores by a positive constant yields the identical plan.
    """
    if not 0.0 <= alpha <= 1.0:
        raise InputError(f"alpha must lie in [0, 1], got {alpha}")
    refs = net.enumerate_neurons()
    missing = [r for r in refs if r not in scores]
    if missing:
        raise PlanError(f"scores missing for {len(missing)} live neurons, e.g. {missing[0]}")
    plan = ModificationPlan(event_epoch=event_epoch, criterion=Criterion(criterion).value)
    for layer_idx in net.mutable_layers():
        width = net.layers[layer_idx].spec.width
        k = int(math.floor(alpha * width))
        if k == 0:
            continue
        layer_refs = [r for r in refs if r.layer == layer_idx]
        by_score = sorted(layer_refs, key=lambda r: (scores[r], r.slot))
        prune = tuple(sorted(r.slot for r in by_score[:k]))
        top = sorted(layer_refs, key=lambda r: (-scores[r], r.slot))
        plan.entries[layer_idx] = LayerPlan(prune_slots=prune, add_count=k,
                                            clone_sources=tuple(r.slot for r in top[:k]))
    return plan


def _validate_plan(net: NetworkState, plan: ModificationPlan) -> None:
    for layer_idx, entry in plan.entries.items():
        layer = net.layers[layer_idx] if 0 <= layer_idx < len(net.layers) else None
        if layer is None or not layer.spec.mutable:
            raise PlanError(f"plan targets non-mutable layer {layer_idx}")
        width = layer.spec.width
        slots = entry.prune_slots
        if len(set(slots)) != len(slots):
            raise PlanError(f"L{layer_idx}: duplicate prune slots {slots}")
        if any(s < 0 or s >= width for s in slots):
            raise PlanError(f"L{layer_idx}: prune slots {slots} outside width {width}")
        if entry.add_count != len(slots):
            raise PlanError(f"L{layer_idx}: add count {entry.add_count} != "
                            f"{len(slots)} pruned (must be paired)")


def _edit_optimizer(optimizer, edits: list[Edit]) -> None:
    if optimizer is None:
        return
    for edit in edits:
        state = optimizer.state.get(edit.param)
        if not state:
            continue
        for key, arr in state.items():
            if isinstance(arr, np.ndarray):
                state[key] = apply_edit_to_array(arr, edit)


def _clone_rows(net: NetworkState, layer_idx: int, sources: tuple[int, ...],
                rng: np.random.Generator) -> np.ndarray:
    w = net.layers[layer_idx].params["weight"].data
    rows = w[list(sources)].copy()
    noise = rng.normal(0.0, 0.01, size=rows.shape)
    return rows + noise


def randomize_norm_params(net: NetworkState, new_refs: list[NeuronRef],
                          sigma: float, rng: np.random.Generator | int
                          ) -> list[NeuronRef]:
    """Set new neurons' norm affine params to base values plus N(0, sigma^2).

    Base values are the fresh-layer defaults (gamma 1, beta 0); existing
    neurons are untouched. Returns refs skipped for lack of a norm layer.
    """
    if sigma <= 0:
        raise InputError(f"sigma must be > 0, got {sigma}")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    skipped = []
    for ref in new_refs:
        norm_idx = net.norm_of(ref.layer)
        if norm_idx is None:
            skipped.append(ref)
            continue
        norm = net.layers[norm_idx]
        norm.params["gamma"].data[ref.slot] = 1.0 + rng.normal(0.0, sigma)
        norm.params["beta"].data[ref.slot] = rng.normal(0.0, sigma)
    return skipped


def apply_modification(net: NetworkState, plan: ModificationPlan,
                       config: PlasticityConfig,
                       rng: np.random.Generator | int = 0,
                       optimizer=None) -> dict:
    """Execute one paired grow/prune event and return its log record.

    Per layer: grow add_count fresh slots (He incoming, zero outgoing),
    then delete the planned slots, which predate the growth and therefore
    never include a new neuron. Optimizer moment arrays follow every
    structural edit (dropped rows for deletions, zeros for additions).
    """
    _validate_plan(net, plan)
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    record = {"epoch": plan.event_epoch, "criterion": plan.criterion,
              "alpha": config.alpha, "layers": []}
    all_new_refs: list[NeuronRef] = []
    for layer_idx in sorted(plan.entries):
        entry = plan.entries[layer_idx]
        k = entry.add_count
        width = net.layers[layer_idx].spec.width
        incoming = None
        if config.init_scheme == "clone" and entry.clone_sources:
            incoming = _clone_rows(net, layer_idx, entry.clone_sources, rng)
        new_ids, grow_edits = net.grow_slots(layer_idx, k, rng, incoming=incoming)
        scale_grow = scale_prune = None
        cons_idx, _ = net.consumer_of(layer_idx)
        if config.ws and cons_idx is not None:
            scale_grow = weight_scale_factor(width, width + k)
            net.layers[cons_idx].params["weight"].data *= scale_grow
        pruned_ids, prune_edits = net.delete_slots(layer_idx, list(entry.prune_slots))
        if config.ws and cons_idx is not None:
            scale_prune = weight_scale_factor(width + k, width)
            net.layers[cons_idx].params["weight"].data *= scale_prune
        _edit_optimizer(optimizer, grow_edits + prune_edits)

        # New slots sit at the tail; pruning removed only pre-growth slots.
        new_width = net.layers[layer_idx].spec.width
        new_refs = [NeuronRef(layer_idx, new_width - k + j, uid)
                    for j, uid in enumerate(new_ids)]
        all_new_refs.extend(new_refs)
        record["layers"].append({
            "layer": layer_idx,
            "pruned_slots": list(entry.prune_slots),
            "pruned_ids": pruned_ids,
            "added_ids": new_ids,
            "scale_grow": scale_grow,
            "scale_prune": scale_prune,
        })

    skipped = []
    if config.gda and all_new_refs:
        skipped = randomize_norm_params(net, all_new_refs, config.sigma, rng)
    record["norm_randomized"] = bool(config.gda and all_new_refs)
    record["norm_skipped"] = [[r.layer, r.slot, r.uid] for r in skipped]

    if optimizer is not None:
        optimizer.apply_event(record)
    net.validate()
    return record
