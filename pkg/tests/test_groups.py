"""Learning-rate choices: layer partitioning and per-parameter rates."""

from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest

from forgetlab.groups import (
    EMBEDDINGS_CHOICE,
    HEAD_CHOICE,
    LR_MAX,
    LR_MIN,
    NUM_CHOICES,
    LrDistribution,
    choice_of_param,
    layer_choice_map,
    param_choices,
)
from forgetlab.model import ModelConfig, param_names


class TestLayerChoiceMap:
    def test_twelve_layers(self):
        assert layer_choice_map(12) == {
            1: 1, 2: 2, 3: 2, 4: 3, 5: 4, 6: 4,
            7: 5, 8: 6, 9: 6, 10: 7, 11: 8, 12: 8,
        }

    def test_eight_layers_one_to_one(self):
        assert layer_choice_map(8) == {i: i for i in range(1, 9)}

    def test_two_layers(self):
        assert layer_choice_map(2) == {1: 2, 2: 4}

    def test_nine_layers(self):
        m = layer_choice_map(9)
        assert m == {1: 1, 2: 2, 3: 2, 4: 3, 5: 4, 6: 5, 7: 6, 8: 7, 9: 8}

    def test_sixteen_layers_two_each(self):
        m = layer_choice_map(16)
        counts = {c: 0 for c in range(1, 9)}
        for c in m.values():
            counts[c] += 1
        assert all(v == 2 for v in counts.values())

    @pytest.mark.parametrize("n", [1, 3, 7, 8, 11, 25])
    def test_blocks_contiguous_and_nondecreasing(self, n):
        m = layer_choice_map(n)
        assert sorted(m) == list(range(1, n + 1))
        choices = [m[i] for i in range(1, n + 1)]
        assert choices == sorted(choices)
        assert set(choices) <= set(range(1, 9))

    def test_rejects_zero_layers(self):
        with pytest.raises(ValueError, match="positive"):
            layer_choice_map(0)


class TestChoiceOfParam:
    def test_embeddings_and_head(self):
        m = layer_choice_map(12)
        assert choice_of_param("embeddings.token", m) == EMBEDDINGS_CHOICE
        assert choice_of_param("embeddings.position", m) == EMBEDDINGS_CHOICE
        assert choice_of_param("head.w", m) == HEAD_CHOICE
        assert choice_of_param("head.b", m) == HEAD_CHOICE

    def test_layer_params_follow_map(self):
        m = layer_choice_map(12)
        assert choice_of_param("layer_3.ff1_w", m) == m[3]
        assert choice_of_param("layer_12.ln2_b", m) == m[12]

    def test_unknown_name_rejected(self):
        with pytest.raises(ValueError, match="mystery"):
            choice_of_param("mystery.w", layer_choice_map(2))

    def test_param_choices_covers_model(self, toy_cfg):
        choices = param_choices(toy_cfg)
        assert set(choices) == set(param_names(toy_cfg))
        assert set(choices.values()) <= set(range(NUM_CHOICES))
        # norms and biases share their layer's choice
        assert choices["layer_1.ln1_g"] == choices["layer_1.attn_q_w"]
        assert choices["layer_2.ff1_b"] == choices["layer_2.ff1_w"]

    def test_default_model_uses_all_choices(self):
        used = set(param_choices(ModelConfig()).values())
        assert used == set(range(NUM_CHOICES))


class TestLrDistribution:
    def test_box_bounds(self):
        assert (LR_MIN, LR_MAX) == (1e-7, 1e-3)
        assert NUM_CHOICES == 10

    def test_flat_and_getitem(self):
        d = LrDistribution.flat(3e-4)
        assert len(d.rates) == NUM_CHOICES
        assert all(d[i] == 3e-4 for i in range(NUM_CHOICES))

    def test_wrong_length_rejected(self):
        with pytest.raises(ValueError, match="10 rates, got 3"):
            LrDistribution((1e-4, 1e-4, 1e-4))

    @pytest.mark.parametrize("bad", [0.0, -1e-4, float("nan"), float("inf")])
    def test_bad_rate_rejected(self, bad):
        rates = [1e-4] * NUM_CHOICES
        rates[4] = bad
        with pytest.raises(ValueError, match="choice 4"):
            LrDistribution(tuple(rates))

    def test_rates_coerced_to_float(self):
        d = LrDistribution(tuple(np.full(NUM_CHOICES, 1e-4)))
        assert all(type(r) is float for r in d.rates)

    def test_param_rates(self, toy_cfg):
        rates = tuple(float(f"{(i + 1)}e-5") for i in range(NUM_CHOICES))
        d = LrDistribution(rates)
        per_param = d.param_rates(toy_cfg)
        choices = param_choices(toy_cfg)
        assert per_param == {k: rates[c] for k, c in choices.items()}

    def test_param_rates_respect_layer_count(self, toy_cfg):
        d = LrDistribution(tuple(float(f"{(i + 1)}e-5") for i in range(NUM_CHOICES)))
        deep = replace(toy_cfg, n_layers=8)
        # with 8 layers each layer owns its own choice
        per_param = d.param_rates(deep)
        assert per_param["layer_5.ff1_w"] == d[5]
