"""Variant ladder mechanics: switch wiring, budget parity, cold-module
verification, table shapes. The mAP ordering itself is an acceptance-level
property; here the harness is exercised at toy scale."""
import dataclasses
import logging

import pytest

from cmac.ablation import (ABLATION_DEFAULTS, VARIANTS, AblationResult,
                           Variant, ablation_config, evaluate_split,
                           run_ablation, run_sweep, train_variant,
                           _verify_cold_modules)
from cmac.config import RunConfig
from cmac.errors import CheckFailure
from cmac.instrumentation import counters
from cmac.model import AveragedStreams, CmacModel
from cmac.training import build_split

TOY = dict(image_size=32, k=8, s=4, backbone_width=3, d_embed=6,
           d_hidden=6, d_fc=12, t_steps=2, n_stn=1, batch_size=8,
           proposals_per_gt=3, background_proposals=3,
           train_scenes=2, test_scenes=2, epochs=1)


def toy_cfg(**kw):
    return RunConfig(**{**TOY, **kw})


class TestVariantTable:
    def test_five_variants_in_ladder_order(self):
        assert [v.name for v in VARIANTS] == [
            "baseline", "+L", "+G", "+G+L", "+G+L+fusion"]

    def test_switch_wiring(self):
        by_name = {v.name: v for v in VARIANTS}
        assert by_name["baseline"] == Variant("baseline", False, False, False)
        assert by_name["+L"].use_part and not by_name["+L"].use_global
        assert by_name["+G"].use_global and not by_name["+G"].use_part
        assert by_name["+G+L"].use_global and by_name["+G+L"].use_part
        assert not by_name["+G+L"].fused
        full = by_name["+G+L+fusion"]
        assert full.use_global and full.use_part and full.fused

    def test_ablation_config_overrides(self):
        cfg = ablation_config(seed=7)
        for key, val in ABLATION_DEFAULTS.items():
            assert getattr(cfg, key) == val
        assert cfg.seed == 7
        assert ablation_config(lr=0.5).lr == 0.5


class TestTrainVariant:
    def test_fused_variant_is_single_fused_model(self):
        cfg = toy_cfg()
        samples = build_split(cfg, "train")
        counters.reset()
        model = train_variant(cfg, samples, VARIANTS[-1])
        assert isinstance(model, CmacModel)
        assert model.config.use_rgb_stream and model.config.use_depth_stream
        assert counters.fusion_calls > 0

    def test_unfused_variant_is_averaged_streams(self):
        cfg = toy_cfg()
        samples = build_split(cfg, "train")
        counters.reset()
        model = train_variant(cfg, samples, VARIANTS[0])
        assert isinstance(model, AveragedStreams)
        snap = counters.snapshot()
        assert snap["fusion_calls"] == 0
        assert snap["global_attention_steps"] == 0
        assert snap["stn_transforms"] == 0

    def test_budget_parity_doubles_fused_epochs(self, caplog):
        caplog.set_level(logging.INFO, logger="cmac")
        cfg = toy_cfg(epochs=2, decay_every_epochs=1)
        samples = build_split(cfg, "train")
        train_variant(cfg, samples, VARIANTS[-1])
        fused_epochs = {l.split()[1] for l in
                        (r.getMessage() for r in caplog.records)
                        if l.startswith("epoch ")}
        assert fused_epochs == {"0", "1", "2", "3"}
        caplog.clear()
        train_variant(cfg, samples, VARIANTS[0])
        # two separate single-stream trainings of cfg.epochs each
        stream_epochs = [l.split()[1] for l in
                         (r.getMessage() for r in caplog.records)
                         if l.startswith("epoch ")]
        assert stream_epochs == ["0", "1", "0", "1"]


class TestColdModules:
    def test_all_zero_passes(self):
        checked = _verify_cold_modules(
            VARIANTS[0], {"global_attention_steps": 0, "stn_transforms": 0,
                          "fusion_calls": 0})
        assert set(checked) == {"global_attention_steps", "stn_transforms",
                                "fusion_calls"}

    def test_hot_disabled_module_raises(self):
        snap = {"global_attention_steps": 3, "stn_transforms": 0,
                "fusion_calls": 0}
        with pytest.raises(CheckFailure, match="baseline"):
            _verify_cold_modules(VARIANTS[0], snap)

    def test_enabled_modules_not_constrained(self):
        snap = {"global_attention_steps": 10, "stn_transforms": 10,
                "fusion_calls": 10}
        _verify_cold_modules(VARIANTS[-1], snap)  # everything enabled

    def test_fault_injection_through_counters(self):
        cfg = toy_cfg()
        samples = build_split(cfg, "train")
        counters.reset()
        train_variant(cfg, samples, VARIANTS[0])
        counters.stn_transforms += 1  # simulate a leaked STN execution
        with pytest.raises(CheckFailure, match="stn_transforms"):
            _verify_cold_modules(VARIANTS[0], counters.snapshot())


class TestEvaluateSplit:
    def test_returns_per_class_and_map(self):
        cfg = toy_cfg()
        model = CmacModel(cfg.model_config(), seed=0)
        per_class, map_value = evaluate_split(
            model, build_split(cfg, "test"), cfg)
        assert set(per_class) == {1, 2, 3}
        assert 0.0 <= map_value <= 1.0


class TestRunAblation:
    def test_table_shape_and_format(self):
        cfg = toy_cfg()
        result = run_ablation(cfg, seeds=[0])
        assert isinstance(result, AblationResult)
        assert result.seeds == [0]
        assert set(result.table) == {v.name for v in VARIANTS}
        assert all(len(row) == 1 for row in result.table.values())
        assert set(result.means) == set(result.table)
        assert all(0.0 <= m <= 1.0 for m in result.means.values())
        # every variant's cold-module check ran
        assert set(result.cold_checks) == set(result.table)
        text = result.format()
        lines = text.splitlines()
        assert lines[0].split() == ["variant", "seed0", "mean"]
        assert len(lines) == 1 + len(VARIANTS)
        for v in VARIANTS:
            assert any(l.startswith(v.name) for l in lines[1:])


class TestRunSweep:
    def test_sweep_rows_per_value(self):
        cfg = toy_cfg()
        result = run_sweep(cfg, "t_steps", [2, 3], seeds=[0])
        assert result.field == "t_steps"
        assert result.values == [2, 3]
        assert set(result.table) == {2, 3}
        assert all(0.0 <= m <= 1.0 for m in result.means.values())
        lines = result.format().splitlines()
        assert lines[0].split() == ["t_steps", "seed0", "mean"]
        assert len(lines) == 3

    def test_sweep_rejects_unknown_field(self):
        with pytest.raises(TypeError):
            run_sweep(toy_cfg(), "no_such_field", [1], seeds=[0])
