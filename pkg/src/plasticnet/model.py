"""Mutable-width sequential networks (MLP and small CNN).

Every dense/conv output slot ("neuron") carries a stable integer id that
survives structural surgery, so optimizer state and event logs can follow
individual neurons across grow/prune events. Surgery itself lives in the
plasticity module; this module owns the representation: building, forward,
validation, slot-level editing primitives, and checkpointing.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from typing import Iterator, NamedTuple

import numpy as np

from . import tensor as T
from .errors import DimensionError, InputError, StateError

PARAMETRIC = ("dense", "conv")

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


class NeuronRef(NamedTuple):
    """Resolvable address of one live neuron."""
    layer: int
    slot: int
    uid: int


@dataclass
class LayerSpec:
    kind: str                 # dense | conv | norm | relu | pool | flatten
    width: int = 0            # neurons / channels for dense, conv, norm
    kernel: int = 0           # conv kernel or pool window
    stride: int = 1
    padding: int = 0
    mutable: bool = False


class Layer:
    """One layer: its spec, parameter tensors, and non-learned buffers."""

    def __init__(self, spec: LayerSpec):
        self.spec = spec
        self.params: dict[str, T.Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def param_items(self) -> Iterator[tuple[str, T.Tensor]]:
        return iter(self.params.items())


@dataclass
class Edit:
    """One structural change to a parameter array, replayable on companion
    arrays (optimizer moments) that must stay aligned with it."""
    param: str                # e.g. "L0.weight"
    op: str                   # "append" | "delete"
    axis: int
    count: int = 0            # append: number of new entries
    indices: tuple = ()       # delete: indices removed


def _append_zeros(arr: np.ndarray, axis: int, count: int) -> np.ndarray:
    shape = list(arr.shape)
    shape[axis] = count
    return np.concatenate([arr, np.zeros(shape, dtype=arr.dtype)], axis=axis)


def apply_edit_to_array(arr: np.ndarray, edit: Edit) -> np.ndarray:
    """Replay a structural edit on a companion array (zeros for new slots)."""
    if edit.op == "append":
        return _append_zeros(arr, edit.axis, edit.count)
    if edit.op == "delete":
        return np.delete(arr, list(edit.indices), axis=edit.axis)
    raise ValueError(f"unknown edit op {edit.op!r}")


class NetworkState:
    """Ordered layers plus the stable-id map for live neurons."""

    def __init__(self, layers: list[Layer], input_shape: tuple[int, ...],
                 num_classes: int, joins: dict[int, int] | None = None):
        self.layers = layers
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        # joins[dst] = src: output of layer `src` (or the network input for
        # src == -1) is added to the output of layer `dst`.
        self.joins = dict(joins or {})
        self.ids: dict[int, list[int]] = {}
        self._next_id = 0
        for idx, layer in enumerate(layers):
            if layer.spec.kind in PARAMETRIC:
                self.ids[idx] = list(range(self._next_id,
                                           self._next_id + layer.spec.width))
                self._next_id += layer.spec.width

    # ---------------------------------------------------------------- ids

    def allocate_ids(self, count: int) -> list[int]:
        out = list(range(self._next_id, self._next_id + count))
        self._next_id += count
        return out

    def live_ids(self) -> set[int]:
        return {uid for ids in self.ids.values() for uid in ids}

    def mutable_layers(self) -> list[int]:
        return [i for i, l in enumerate(self.layers)
                if l.spec.kind in PARAMETRIC and l.spec.mutable]

    def enumerate_neurons(self) -> list[NeuronRef]:
        """All live neurons in mutable layers, layer-major then slot order."""
        refs = []
        for idx in self.mutable_layers():
            for slot, uid in enumerate(self.ids[idx]):
                refs.append(NeuronRef(idx, slot, uid))
        return refs

    # ------------------------------------------------------------ topology

    def norm_of(self, layer_idx: int) -> int | None:
        """Index of the norm layer attached to a parametric layer, if any."""
        nxt = layer_idx + 1
        if nxt < len(self.layers) and self.layers[nxt].spec.kind == "norm":
            return nxt
        return None

    def consumer_of(self, layer_idx: int) -> tuple[int | None, int]:
        """Next parametric layer fed by `layer_idx` and the fan-in block size.

        The block size is 1 except across a flatten, where one producer
        channel occupies a contiguous block of H*W consumer columns.
        """
        shapes = self.output_shapes()
        block = 1
        for j in range(layer_idx + 1, len(self.layers)):
            kind = self.layers[j].spec.kind
            if kind in PARAMETRIC:
                return j, block
            if kind == "flatten":
                pre = shapes[j - 1]
                block = int(np.prod(pre[1:])) if len(pre) == 3 else 1
        return None, block

    def output_shapes(self) -> list[tuple[int, ...]]:
        """Per-layer output shapes (batch dimension omitted)."""
        return propagate_shapes(self.input_shape, [l.spec for l in self.layers])

    # ------------------------------------------------------------- forward

    def forward(self, batch: T.Tensor | np.ndarray, training: bool = False) -> T.Tensor:
        """Run the network; returns logits [N, num_classes]."""
        x = batch if isinstance(batch, T.Tensor) else T.Tensor(batch)
        expected = (x.shape[0],) + self.input_shape
        if x.shape != expected:
            raise DimensionError(f"batch shape {x.shape} != expected {expected}")
        saved: dict[int, T.Tensor] = {-1: x}
        for idx, layer in enumerate(self.layers):
            spec = layer.spec
            if spec.kind == "dense":
                x = T.linear(x, layer.params["weight"], layer.params["bias"])
            elif spec.kind == "conv":
                x = T.conv2d(x, layer.params["weight"], layer.params["bias"],
                             stride=spec.stride, padding=spec.padding)
            elif spec.kind == "norm":
                x = T.batchnorm(x, layer.params["gamma"], layer.params["beta"],
                                layer.buffers["running_mean"],
                                layer.buffers["running_var"],
                                training=training,
                                momentum=BN_MOMENTUM, eps=BN_EPS)
            elif spec.kind == "relu":
                x = T.relu(x)
            elif spec.kind == "pool":
                x = T.maxpool2d(x, spec.kernel)
            elif spec.kind == "flatten":
                x = T.flatten(x)
            else:
                raise StateError(f"unknown layer kind {spec.kind!r}")
            if idx in self.joins:
                x = T.add(x, saved[self.joins[idx]])
            saved[idx] = x
        return x

    # ---------------------------------------------------------- parameters

    def parameters(self) -> list[tuple[str, T.Tensor]]:
        out = []
        for idx, layer in enumerate(self.layers):
            for name, p in layer.param_items():
                out.append((f"L{idx}.{name}", p))
        return out

    def param_count(self) -> int:
        return sum(p.size for _, p in self.parameters())

    def zero_grad(self) -> None:
        for _, p in self.parameters():
            p.zero_grad()

    # ---------------------------------------------------------- validation

    def validate(self) -> None:
        """Walk all layer pairs and invariants; raise StateError on damage."""
        shapes = self.output_shapes()
        prev = self.input_shape
        for idx, layer in enumerate(self.layers):
            spec = layer.spec
            if spec.kind == "dense":
                want = (spec.width, prev[0])
                if layer.params["weight"].shape != want:
                    raise StateError(f"L{idx}: dense weight {layer.params['weight'].shape} != {want}")
                if layer.params["bias"].shape != (spec.width,):
                    raise StateError(f"L{idx}: dense bias shape mismatch")
            elif spec.kind == "conv":
                want = (spec.width, prev[0], spec.kernel, spec.kernel)
                if layer.params["weight"].shape != want:
                    raise StateError(f"L{idx}: conv weight {layer.params['weight'].shape} != {want}")
                if layer.params["bias"].shape != (spec.width,):
                    raise StateError(f"L{idx}: conv bias shape mismatch")
            elif spec.kind == "norm":
                if spec.width != prev[0]:
                    raise StateError(f"L{idx}: norm width {spec.width} != producer width {prev[0]}")
                for name in ("gamma", "beta"):
                    if layer.params[name].shape != (spec.width,):
                        raise StateError(f"L{idx}: norm {name} shape mismatch")
                for name in ("running_mean", "running_var"):
                    if layer.buffers[name].shape != (spec.width,):
                        raise StateError(f"L{idx}: norm buffer {name} shape mismatch")
            if spec.kind in PARAMETRIC:
                if len(self.ids.get(idx, [])) != spec.width:
                    raise StateError(f"L{idx}: {len(self.ids.get(idx, []))} ids for width {spec.width}")
            prev = shapes[idx]
        all_ids = [uid for ids in self.ids.values() for uid in ids]
        if len(all_ids) != len(set(all_ids)):
            raise StateError("duplicate stable neuron ids")
        for dst, src in self.joins.items():
            dst_w = shapes[dst][0]
            src_w = shapes[src][0] if src >= 0 else self.input_shape[0]
            if dst_w != src_w:
                raise StateError(f"residual join {src}->{dst}: widths {src_w} != {dst_w}")
        last = self.layers[-1].spec
        if last.kind == "dense" and last.width != self.num_classes:
            raise StateError("classifier width != num_classes")

    # -------------------------------------------------------- slot surgery

    def _he_rows(self, layer_idx: int, count: int, rng: np.random.Generator) -> np.ndarray:
        spec = self.layers[layer_idx].spec
        w = self.layers[layer_idx].params["weight"].data
        if spec.kind == "dense":
            fan_in = w.shape[1]
            shape = (count, fan_in)
        else:
            fan_in = w.shape[1] * spec.kernel * spec.kernel
            shape = (count, w.shape[1], spec.kernel, spec.kernel)
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(w.dtype)

    def grow_slots(self, layer_idx: int, count: int, rng: np.random.Generator,
                   incoming: np.ndarray | None = None) -> tuple[list[int], list[Edit]]:
        """Append `count` fresh slots to a parametric layer.

        Incoming weights default to He-normal draws; outgoing weights in the
        consumer layer start at zero, so new slots cannot move the logits
        until they are trained. Returns (new ids, replayable edits).
        """
        layer = self.layers[layer_idx]
        if layer.spec.kind not in PARAMETRIC:
            raise InputError(f"L{layer_idx} is not parametric")
        edits: list[Edit] = []
        w = layer.params["weight"]
        rows = self._he_rows(layer_idx, count, rng) if incoming is None else incoming
        w.data = np.concatenate([w.data, rows], axis=0)
        edits.append(Edit(f"L{layer_idx}.weight", "append", 0, count=count))
        b = layer.params["bias"]
        b.data = _append_zeros(b.data, 0, count)
        edits.append(Edit(f"L{layer_idx}.bias", "append", 0, count=count))

        norm_idx = self.norm_of(layer_idx)
        if norm_idx is not None:
            norm = self.layers[norm_idx]
            gamma, beta = norm.params["gamma"], norm.params["beta"]
            gamma.data = np.concatenate([gamma.data, np.ones(count, dtype=gamma.data.dtype)])
            beta.data = _append_zeros(beta.data, 0, count)
            edits.append(Edit(f"L{norm_idx}.gamma", "append", 0, count=count))
            edits.append(Edit(f"L{norm_idx}.beta", "append", 0, count=count))
            norm.buffers["running_mean"] = _append_zeros(norm.buffers["running_mean"], 0, count)
            norm.buffers["running_var"] = np.concatenate(
                [norm.buffers["running_var"], np.ones(count)])
            norm.spec.width += count

        cons_idx, block = self.consumer_of(layer_idx)
        if cons_idx is not None:
            cw = self.layers[cons_idx].params["weight"]
            cw.data = _append_zeros(cw.data, 1, count * block)
            edits.append(Edit(f"L{cons_idx}.weight", "append", 1, count=count * block))

        layer.spec.width += count
        new_ids = self.allocate_ids(count)
        self.ids[layer_idx].extend(new_ids)
        return new_ids, edits

    def delete_slots(self, layer_idx: int, slots: list[int]) -> tuple[list[int], list[Edit]]:
        """Remove the given slots (and their fan-in in the consumer layer)."""
        layer = self.layers[layer_idx]
        if layer.spec.kind not in PARAMETRIC:
            raise InputError(f"L{layer_idx} is not parametric")
        width = layer.spec.width
        slots = sorted(slots)
        if len(set(slots)) != len(slots) or any(s < 0 or s >= width for s in slots):
            raise InputError(f"L{layer_idx}: invalid slots {slots} for width {width}")
        edits: list[Edit] = []
        w = layer.params["weight"]
        w.data = np.delete(w.data, slots, axis=0)
        edits.append(Edit(f"L{layer_idx}.weight", "delete", 0, indices=tuple(slots)))
        b = layer.params["bias"]
        b.data = np.delete(b.data, slots, axis=0)
        edits.append(Edit(f"L{layer_idx}.bias", "delete", 0, indices=tuple(slots)))

        norm_idx = self.norm_of(layer_idx)
        if norm_idx is not None:
            norm = self.layers[norm_idx]
            for name in ("gamma", "beta"):
                p = norm.params[name]
                p.data = np.delete(p.data, slots, axis=0)
                edits.append(Edit(f"L{norm_idx}.{name}", "delete", 0, indices=tuple(slots)))
            for name in ("running_mean", "running_var"):
                norm.buffers[name] = np.delete(norm.buffers[name], slots, axis=0)
            norm.spec.width -= len(slots)

        cons_idx, block = self.consumer_of(layer_idx)
        if cons_idx is not None:
            cols = [s * block + j for s in slots for j in range(block)]
            cw = self.layers[cons_idx].params["weight"]
            cw.data = np.delete(cw.data, cols, axis=1)
            edits.append(Edit(f"L{cons_idx}.weight", "delete", 1, indices=tuple(cols)))

        layer.spec.width -= len(slots)
        dead = set(slots)
        removed = [self.ids[layer_idx][s] for s in slots]
        self.ids[layer_idx] = [uid for s, uid in enumerate(self.ids[layer_idx])
                               if s not in dead]
        return removed, edits

    def permute_slots(self, layer_idx: int, perm: list[int]) -> None:
        """Reorder slots together with their fan-out; logits-invariant."""
        layer = self.layers[layer_idx]
        width = layer.spec.width
        if sorted(perm) != list(range(width)):
            raise InputError(f"perm must be a permutation of range({width})")
        layer.params["weight"].data = layer.params["weight"].data[perm]
        layer.params["bias"].data = layer.params["bias"].data[perm]
        norm_idx = self.norm_of(layer_idx)
        if norm_idx is not None:
            norm = self.layers[norm_idx]
            for name in ("gamma", "beta"):
                norm.params[name].data = norm.params[name].data[perm]
            for name in ("running_mean", "running_var"):
                norm.buffers[name] = norm.buffers[name][perm]
        cons_idx, block = self.consumer_of(layer_idx)
        if cons_idx is not None:
            cols = [s * block + j for s in perm for j in range(block)]
            cw = self.layers[cons_idx].params["weight"]
            cw.data = cw.data[:, cols]
        self.ids[layer_idx] = [self.ids[layer_idx][s] for s in perm]

    # --------------------------------------------------------- checkpoints

    CHECKPOINT_VERSION = 1

    def save(self, path) -> None:
        """Versioned dump of specs, parameters, buffers and the id map."""
        meta = {
            "version": self.CHECKPOINT_VERSION,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "joins": sorted(self.joins.items()),
            "specs": [asdict(l.spec) for l in self.layers],
            "ids": {str(k): v for k, v in self.ids.items()},
            "next_id": self._next_id,
        }
        arrays: dict[str, np.ndarray] = {}
        for idx, layer in enumerate(self.layers):
            for name, p in layer.param_items():
                arrays[f"L{idx}.{name}"] = p.data
            for name, buf in layer.buffers.items():
                arrays[f"L{idx}.{name}"] = buf
        np.savez(path, __meta__=np.array(json.dumps(meta)), **arrays)

    @classmethod
    def load(cls, path) -> "NetworkState":
        with np.load(path, allow_pickle=False) as blob:
            meta = json.loads(str(blob["__meta__"]))
            if meta["version"] != cls.CHECKPOINT_VERSION:
                raise InputError(f"unsupported checkpoint version {meta['version']}")
            layers = []
            for idx, spec_dict in enumerate(meta["specs"]):
                layer = Layer(LayerSpec(**spec_dict))
                if layer.spec.kind in PARAMETRIC:
                    layer.params["weight"] = T.Tensor(blob[f"L{idx}.weight"], requires_grad=True)
                    layer.params["bias"] = T.Tensor(blob[f"L{idx}.bias"], requires_grad=True)
                elif layer.spec.kind == "norm":
                    layer.params["gamma"] = T.Tensor(blob[f"L{idx}.gamma"], requires_grad=True)
                    layer.params["beta"] = T.Tensor(blob[f"L{idx}.beta"], requires_grad=True)
                    layer.buffers["running_mean"] = np.array(blob[f"L{idx}.running_mean"])
                    layer.buffers["running_var"] = np.array(blob[f"L{idx}.running_var"])
                layers.append(layer)
        net = cls(layers, tuple(meta["input_shape"]), meta["num_classes"],
                  joins={int(d): int(s) for d, s in meta["joins"]})
        net.ids = {int(k): list(v) for k, v in meta["ids"].items()}
        net._next_id = meta["next_id"]
        return net


def propagate_shapes(input_shape: tuple[int, ...],
                     specs: list[LayerSpec]) -> list[tuple[int, ...]]:
    """Per-layer output shapes; raises DimensionError where layers cannot fit."""
    shape = tuple(input_shape)
    out: list[tuple[int, ...]] = []
    for idx, spec in enumerate(specs):
        if spec.kind == "dense":
            if len(shape) != 1:
                raise DimensionError(f"L{idx}: dense layer fed {shape}")
            shape = (spec.width,)
        elif spec.kind == "conv":
            if len(shape) != 3:
                raise DimensionError(f"L{idx}: conv layer fed {shape}")
            c, h, w = shape
            k, s, p = spec.kernel, spec.stride, spec.padding
            if k > h + 2 * p or k > w + 2 * p:
                raise DimensionError(f"L{idx}: kernel {k} exceeds padded input {shape}")
            shape = (spec.width, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)
        elif spec.kind == "pool":
            c, h, w = shape
            k = spec.kernel
            if h < k or w < k or h % k or w % k:
                raise DimensionError(f"L{idx}: cannot pool {h}x{w} by {k}")
            shape = (c, h // k, w // k)
        elif spec.kind == "flatten":
            shape = (int(np.prod(shape)),)
        # norm / relu keep the shape
        out.append(shape)
    return out


# ------------------------------------------------------------------ builders

def _dense_layer(fan_in: int, width: int, mutable: bool, rng: np.random.Generator) -> Layer:
    layer = Layer(LayerSpec("dense", width=width, mutable=mutable))
    std = np.sqrt(2.0 / fan_in)
    layer.params["weight"] = T.Tensor(rng.normal(0.0, std, size=(width, fan_in)),
                                      requires_grad=True)
    layer.params["bias"] = T.Tensor(np.zeros(width), requires_grad=True)
    return layer


def _conv_layer(c_in: int, width: int, kernel: int, padding: int,
                mutable: bool, rng: np.random.Generator) -> Layer:
    layer = Layer(LayerSpec("conv", width=width, kernel=kernel, stride=1,
                            padding=padding, mutable=mutable))
    std = np.sqrt(2.0 / (c_in * kernel * kernel))
    layer.params["weight"] = T.Tensor(
        rng.normal(0.0, std, size=(width, c_in, kernel, kernel)), requires_grad=True)
    layer.params["bias"] = T.Tensor(np.zeros(width), requires_grad=True)
    return layer


def _norm_layer(width: int) -> Layer:
    layer = Layer(LayerSpec("norm", width=width))
    layer.params["gamma"] = T.Tensor(np.ones(width), requires_grad=True)
    layer.params["beta"] = T.Tensor(np.zeros(width), requires_grad=True)
    layer.buffers["running_mean"] = np.zeros(width)
    layer.buffers["running_var"] = np.ones(width)
    return layer


def build_mlp(input_dim: int, hidden_widths: list[int], num_classes: int,
              rng: np.random.Generator | int | None = None,
              with_norm: bool = True) -> NetworkState:
    """dense->norm->relu stacks plus an immutable dense classifier."""
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    if not hidden_widths:
        raise InputError("hidden_widths must be non-empty")
    if input_dim < 1 or num_classes < 1 or any(w < 1 for w in hidden_widths):
        raise InputError("all widths must be >= 1")
    layers: list[Layer] = []
    fan_in = input_dim
    for width in hidden_widths:
        layers.append(_dense_layer(fan_in, width, mutable=True, rng=rng))
        if with_norm:
            layers.append(_norm_layer(width))
        layers.append(Layer(LayerSpec("relu")))
        fan_in = width
    layers.append(_dense_layer(fan_in, num_classes, mutable=False, rng=rng))
    net = NetworkState(layers, (input_dim,), num_classes)
    net.validate()
    return net


def build_small_cnn(input_shape: tuple[int, int, int], channel_widths: list[int],
                    num_classes: int, rng: np.random.Generator | int | None = None,
                    kernel: int = 3, padding: int = 1,
                    residual: bool = False) -> NetworkState:
    """conv->norm->relu->pool blocks, then flatten and a dense classifier.

    With residual=True, blocks whose input and output channel counts match
    get a skip connection from the block input to the relu output; the conv
    at such a join point is marked immutable.
    """
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    if not channel_widths:
        raise InputError("channel_widths must be non-empty")
    if any(w < 1 for w in channel_widths) or num_classes < 1:
        raise InputError("all widths must be >= 1")
    c, h, w = input_shape
    layers: list[Layer] = []
    joins: dict[int, int] = {}
    block_input = -1  # layer index whose output feeds the current block
    c_in = c
    for width in channel_widths:
        joined = residual and c_in == width
        layers.append(_conv_layer(c_in, width, kernel, padding,
                                  mutable=not joined, rng=rng))
        layers.append(_norm_layer(width))
        layers.append(Layer(LayerSpec("relu")))
        if joined:
            joins[len(layers) - 1] = block_input
        layers.append(Layer(LayerSpec("pool", kernel=2)))
        block_input = len(layers) - 1
        c_in = width
    layers.append(Layer(LayerSpec("flatten")))
    # Raises DimensionError when the pooling cascade does not fit the input.
    feat = propagate_shapes(input_shape, [l.spec for l in layers])[-1][0]
    layers.append(_dense_layer(feat, num_classes, mutable=False, rng=rng))
    net = NetworkState(layers, input_shape, num_classes, joins=joins)
    net.validate()
    return net
