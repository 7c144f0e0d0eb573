"""Planning and executing paired grow/prune events."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from plasticnet import tensor as T
from plasticnet.errors import InputError, PlanError
from plasticnet.ledger import Criterion, GradLedger
from plasticnet.model import build_mlp, build_small_cnn
from plasticnet.plasticity import (ModificationPlan, LayerPlan, PlasticityConfig,
                                   apply_modification, plan_modification,
                                   randomize_norm_params, weight_scale_factor)


def uniform_scores(net, value=1.0):
    return {ref: value for ref in net.enumerate_neurons()}


def slot_scores(net):
    """Score equal to the slot index: lowest slots prune first, no ties."""
    return {ref: float(ref.slot) for ref in net.enumerate_neurons()}


def snapshot(net):
    return {name: p.data.copy() for name, p in net.parameters()}


class TestWeightScaleFactor:
    def test_identity(self):
        assert weight_scale_factor(64, 64) == 1.0

    def test_direct_value(self):
        assert math.isclose(weight_scale_factor(64, 83), math.sqrt(64 / 83),
                            rel_tol=1e-15)
        assert round(weight_scale_factor(64, 83), 4) == 0.878

    def test_inverse_pair(self):
        w = np.random.default_rng(0).standard_normal((5, 5))
        out = w * weight_scale_factor(64, 83) * weight_scale_factor(83, 64)
        assert np.max(np.abs(out - w)) < 1e-12

    def test_zero_counts_rejected(self):
        with pytest.raises(InputError):
            weight_scale_factor(0, 10)


class TestPlanModification:
    def test_floor_rule(self):
        net = build_mlp(8, [64, 64], 4, rng=0)
        plan = plan_modification(slot_scores(net), net, 0.3)
        for entry in plan.entries.values():
            assert entry.add_count == 19  # floor(0.3 * 64)
            assert len(entry.prune_slots) == 19

    def test_alpha_zero_empty_plan(self):
        net = build_mlp(8, [16], 4, rng=0)
        plan = plan_modification(slot_scores(net), net, 0.0)
        assert plan.entries == {}

    def test_alpha_one_prunes_every_slot(self):
        net = build_mlp(8, [16], 4, rng=0)
        plan = plan_modification(slot_scores(net), net, 1.0)
        entry = plan.entries[0]
        assert entry.prune_slots == tuple(range(16))
        assert entry.add_count == 16

    def test_lowest_scores_pruned(self):
        net = build_mlp(8, [10], 4, rng=0)
        scores = {ref: float(10 - ref.slot) for ref in net.enumerate_neurons()}
        plan = plan_modification(scores, net, 0.3)
        assert plan.entries[0].prune_slots == (7, 8, 9)

    def test_ties_break_toward_lower_slot(self):
        net = build_mlp(8, [10], 4, rng=0)
        plan = plan_modification(uniform_scores(net), net, 0.3)
        assert plan.entries[0].prune_slots == (0, 1, 2)

    def test_alpha_out_of_range(self):
        net = build_mlp(8, [10], 4, rng=0)
        with pytest.raises(InputError):
            plan_modification(uniform_scores(net), net, 1.5)

    def test_missing_scores_rejected(self):
        net = build_mlp(8, [10], 4, rng=0)
        scores = uniform_scores(net)
        scores.pop(next(iter(scores)))
        with pytest.raises(PlanError):
            plan_modification(scores, net, 0.3)

    @settings(max_examples=40, deadline=None)
    @given(scale=st.floats(1e-6, 1e6, allow_nan=False, allow_infinity=False),
           seed=st.integers(0, 9999))
    def test_invariant_under_positive_rescaling(self, scale, seed):
        net = build_mlp(6, [12, 7], 3, rng=1)
        rng = np.random.default_rng(seed)
        scores = {ref: float(rng.random()) for ref in net.enumerate_neurons()}
        scaled = {ref: scale * val for ref, val in scores.items()}
        a = plan_modification(scores, net, 0.3)
        b = plan_modification(scaled, net, 0.3)
        assert a.entries.keys() == b.entries.keys()
        for layer in a.entries:
            assert a.entries[layer].prune_slots == b.entries[layer].prune_slots


class TestApplyModification:
    def test_empty_plan_leaves_network_bitwise_unchanged(self):
        net = build_mlp(8, [16], 4, rng=2)
        before = snapshot(net)
        plan = ModificationPlan(event_epoch=0, criterion="accumulated_gradient")
        apply_modification(net, plan, PlasticityConfig(), rng=0)
        after = snapshot(net)
        assert before.keys() == after.keys()
        for name in before:
            assert np.array_equal(before[name], after[name])

    def test_null_neuron_prune_is_logits_invariant(self):
        net = build_mlp(8, [16], 4, rng=3)
        x = np.random.default_rng(4).standard_normal((12, 8))
        # neutralize slot 5: zero weights, bias, fan-out; norm beta 0 keeps
        # relu(BN) output irrelevant because the consumer column is zero.
        cons, _ = net.consumer_of(0)
        net.layers[0].params["weight"].data[5] = 0.0
        net.layers[0].params["bias"].data[5] = 0.0
        net.layers[cons].params["weight"].data[:, 5] = 0.0
        before = net.forward(x, training=False).data.copy()
        scores = {r: (0.0 if r.slot == 5 else 1.0) for r in net.enumerate_neurons()}
        plan = ModificationPlan(0, "accumulated_gradient",
                                {0: LayerPlan((5,), 1)})
        apply_modification(net, plan, PlasticityConfig(ws=False, gda=False), rng=5)
        after = net.forward(x, training=False).data
        assert np.max(np.abs(after - before)) < 1e-10

    def test_fresh_neurons_are_logits_invariant(self):
        net = build_mlp(8, [16], 4, rng=6)
        x = np.random.default_rng(7).standard_normal((12, 8))
        before = net.forward(x, training=False).data.copy()
        net.grow_slots(0, 3, np.random.default_rng(8))
        net.validate()
        after = net.forward(x, training=False).data
        assert np.max(np.abs(after - before)) < 1e-10

    @pytest.mark.parametrize("alpha", [0.0, 0.1, 0.3, 1.0])
    def test_width_conservation(self, alpha):
        net = build_mlp(8, [16, 9], 4, rng=9)
        widths = [net.layers[i].spec.width for i in net.mutable_layers()]
        plan = plan_modification(slot_scores(net), net, alpha)
        apply_modification(net, plan, PlasticityConfig(), rng=10)
        assert [net.layers[i].spec.width for i in net.mutable_layers()] == widths
        net.validate()

    def test_paired_event_with_ws_keeps_logits_near_identity(self):
        # grow scale * prune scale == 1 up to rounding, and the pruned slot
        # is made inert first, so the whole event barely moves the logits.
        net = build_mlp(8, [16], 4, rng=11)
        cons, _ = net.consumer_of(0)
        net.layers[0].params["weight"].data[0] = 0.0
        net.layers[0].params["bias"].data[0] = 0.0
        net.layers[cons].params["weight"].data[:, 0] = 0.0
        x = np.random.default_rng(12).standard_normal((9, 8))
        before = net.forward(x, training=False).data.copy()
        plan = ModificationPlan(0, "accumulated_gradient", {0: LayerPlan((0,), 1)})
        event = apply_modification(net, plan, PlasticityConfig(ws=True, gda=False),
                                   rng=13)
        after = net.forward(x, training=False).data
        assert np.max(np.abs(after - before)) < 1e-10
        layer_rec = event["layers"][0]
        assert math.isclose(layer_rec["scale_grow"], math.sqrt(16 / 17), rel_tol=1e-15)
        assert math.isclose(layer_rec["scale_prune"], math.sqrt(17 / 16), rel_tol=1e-15)

    def test_pruned_and_added_ids_disjoint(self):
        net = build_mlp(8, [16, 9], 4, rng=14)
        plan = plan_modification(slot_scores(net), net, 0.5)
        event = apply_modification(net, plan, PlasticityConfig(), rng=15)
        for entry in event["layers"]:
            assert not set(entry["pruned_ids"]) & set(entry["added_ids"])

    def test_new_neurons_never_pruned_in_same_event(self):
        net = build_mlp(8, [16], 4, rng=16)
        ids_before = set(net.ids[0])
        plan = plan_modification(slot_scores(net), net, 1.0)
        event = apply_modification(net, plan, PlasticityConfig(), rng=17)
        entry = event["layers"][0]
        assert set(entry["pruned_ids"]) == ids_before
        assert set(net.ids[0]) == set(entry["added_ids"])

    def test_dead_slot_rejected(self):
        net = build_mlp(8, [16], 4, rng=18)
        plan = ModificationPlan(0, "accumulated_gradient", {0: LayerPlan((99,), 1)})
        with pytest.raises(PlanError):
            apply_modification(net, plan, PlasticityConfig(), rng=0)

    def test_unpaired_plan_rejected(self):
        net = build_mlp(8, [16], 4, rng=18)
        plan = ModificationPlan(0, "accumulated_gradient", {0: LayerPlan((1, 2), 5)})
        with pytest.raises(PlanError):
            apply_modification(net, plan, PlasticityConfig(), rng=0)

    def test_cnn_surgery_across_flatten(self):
        net = build_small_cnn((1, 8, 8), [4, 6], 3, rng=19)
        x = np.random.default_rng(20).standard_normal((5, 1, 8, 8))
        plan = plan_modification(slot_scores(net), net, 0.5)
        apply_modification(net, plan, PlasticityConfig(), rng=21)
        net.validate()
        assert net.forward(x).shape == (5, 3)

    def test_clone_scheme(self):
        net = build_mlp(8, [16], 4, rng=22)
        top = net.enumerate_neurons()[10]
        source_row = net.layers[0].params["weight"].data[top.slot].copy()
        scores = {r: (2.0 if r.slot == top.slot else 1.0)
                  for r in net.enumerate_neurons()}
        scores[net.enumerate_neurons()[0]] = 0.0
        plan = plan_modification(scores, net, 1.0 / 16.0)
        assert plan.entries[0].clone_sources == (top.slot,)
        cfg = PlasticityConfig(init_scheme="clone", ws=False, gda=False)
        apply_modification(net, plan, cfg, rng=23)
        new_row = net.layers[0].params["weight"].data[-1]
        assert np.allclose(new_row, source_row, atol=0.1)
        assert not np.array_equal(new_row, source_row)  # symmetric noise added


class TestRandomizeNormParams:
    def test_sigma_limit_keeps_base_values(self):
        net = build_mlp(8, [16], 4, rng=24)
        new_ids, _ = net.grow_slots(0, 2, np.random.default_rng(25))
        refs = [r for r in net.enumerate_neurons() if r.uid in new_ids]
        randomize_norm_params(net, refs, sigma=1e-12, rng=26)
        norm = net.layers[net.norm_of(0)]
        assert np.allclose(norm.params["gamma"].data[-2:], 1.0, atol=1e-9)
        assert np.allclose(norm.params["beta"].data[-2:], 0.0, atol=1e-9)

    def test_sample_std_matches_sigma(self):
        net = build_mlp(4, [1200], 2, rng=27)
        new_ids, _ = net.grow_slots(0, 1000, np.random.default_rng(28))
        refs = [r for r in net.enumerate_neurons() if r.uid in new_ids]
        randomize_norm_params(net, refs, sigma=0.1, rng=29)
        gamma = net.layers[net.norm_of(0)].params["gamma"].data[-1000:]
        assert 0.08 <= np.std(gamma - 1.0) <= 0.12

    def test_existing_neurons_untouched(self):
        net = build_mlp(8, [16], 4, rng=30)
        norm = net.layers[net.norm_of(0)]
        norm.params["gamma"].data[:] = 7.0
        new_ids, _ = net.grow_slots(0, 2, np.random.default_rng(31))
        refs = [r for r in net.enumerate_neurons() if r.uid in new_ids]
        randomize_norm_params(net, refs, sigma=0.5, rng=32)
        assert np.all(norm.params["gamma"].data[:16] == 7.0)

    def test_seed_determinism(self):
        draws = []
        for _ in range(2):
            net = build_mlp(8, [16], 4, rng=33)
            new_ids, _ = net.grow_slots(0, 3, np.random.default_rng(34))
            refs = [r for r in net.enumerate_neurons() if r.uid in new_ids]
            randomize_norm_params(net, refs, sigma=0.2, rng=35)
            draws.append(net.layers[net.norm_of(0)].params["gamma"].data[-3:].copy())
        assert np.array_equal(draws[0], draws[1])

    def test_layer_without_norm_skipped(self):
        net = build_mlp(8, [16], 4, rng=36, with_norm=False)
        new_ids, _ = net.grow_slots(0, 1, np.random.default_rng(37))
        refs = [r for r in net.enumerate_neurons() if r.uid in new_ids]
        skipped = randomize_norm_params(net, refs, sigma=0.1, rng=38)
        assert skipped == refs

    def test_bad_sigma(self):
        net = build_mlp(8, [16], 4, rng=39)
        with pytest.raises(InputError):
            randomize_norm_params(net, [], sigma=0.0, rng=0)


class TestNamOffBitwise:
    def test_flag_off_means_no_structural_change(self):
        # The trainer gates events on the flag; this asserts the contract at
        # module level: no plan is ever applied, so the net stays bitwise equal.
        net = build_mlp(8, [16, 9], 4, rng=40)
        before = snapshot(net)
        cfg = PlasticityConfig(nam=False)
        for _ in range(3):
            if cfg.nam:
                plan = plan_modification(slot_scores(net), net, cfg.alpha)
                apply_modification(net, plan, cfg, rng=41)
        after = snapshot(net)
        for name in before:
            assert np.array_equal(before[name], after[name])
