import json
from fractions import Fraction

import numpy as np
import pytest

from tscnet.complexity import (
    appendix_b_table,
    complexity_report,
    exact_overhead,
    inference_overhead,
    resnet_flops,
    resnet_params,
    table1_estimate,
)
from tscnet.controllers import ControllerConfig
from tscnet.resnet import NetworkSpec, StageSpec, build_network, preset, toy_spec

PRESETS = ("resnet18", "resnet34", "resnet50", "resnet101")


def test_table1_examples():
    assert table1_estimate("indp", [9, 9, 9], [16, 32, 64]) == 1008
    assert table1_estimate("lstm", [5], [64], r=4) == 12288
    assert table1_estimate("2fc", [1], [64], r=4) == 64 * 64 // 4 * 10
    # removing the 8/r term from the lstm stage cost leaves the per-block 2fc cost
    for C, r in ((16, 4), (64, 8), (256, 16)):
        lstm = table1_estimate("lstm", [1], [C], r=r)
        assert lstm - Fraction(C * C, r) * Fraction(8, r) == table1_estimate("2fc", [1], [C], r=r)
        assert table1_estimate("2fc", [7], [C], r=r) == 7 * table1_estimate("2fc", [1], [C], r=r)


def test_table1_errors_and_fractions():
    with pytest.raises(ValueError):
        table1_estimate("lstm", [1], [18], r=4)
    with pytest.raises(ValueError):
        table1_estimate("lstm", [1, 2], [16])
    with pytest.raises(ValueError):
        table1_estimate("gru", [1], [16])
    assert isinstance(table1_estimate("lstm", [1], [12], r=12, k1=1, k2=1), (int, Fraction))


def test_table1_within_15_percent_of_exact_for_basic_blocks():
    for spec in (preset("resnet18"), preset("resnet34"), toy_spec(4, (16, 32, 64))):
        blocks = [s.num_blocks for s in spec.stages]
        chans = [s.channels for s in spec.stages]
        for kind in ("lstm", "2fc"):
            est = table1_estimate(kind, blocks, chans, r=4, concat=2)
            exact = exact_overhead(kind, spec, r=4)
            assert abs(est - exact) / exact < 0.15, (kind, est, exact)


def test_table1_verbatim_undercounts_basic_blocks():
    spec = preset("resnet34")
    est = table1_estimate("lstm", [3, 4, 6, 3], [64, 128, 256, 512], r=4)
    assert est < 0.7 * exact_overhead("lstm", spec, r=4)


def test_exact_overhead_resnet50():
    spec = preset("resnet50")
    assert exact_overhead("lstm", spec, r=8) == 2_269_280
    rep = complexity_report(spec, "lstm", 8)
    assert [s["overhead_train"] for s in rep.per_stage] == [27_040, 107_328, 427_648, 1_707_264]
    assert exact_overhead("indp", spec) == 15_104
    assert exact_overhead("fixed", spec) == 0


@pytest.mark.parametrize("name", PRESETS)
@pytest.mark.parametrize("kind", ["lstm", "2fc", "indp"])
def test_inference_overhead_is_one_vector_per_block(name, kind):
    spec = preset(name)
    assert exact_overhead(kind, spec, phase="infer") == sum(s.num_blocks * s.channels for s in spec.stages)
    rep = complexity_report(spec, kind)
    assert rep.params_infer == rep.params_base + inference_overhead(spec)
    assert rep.params_train >= rep.params_infer


@pytest.mark.parametrize("name", PRESETS)
def test_lstm_cheaper_than_2fc(name):
    spec = preset(name)
    assert exact_overhead("lstm", spec) < exact_overhead("2fc", spec)


def test_exact_overhead_errors():
    with pytest.raises(ValueError):
        exact_overhead("gru", preset("resnet18"), phase="infer")
    with pytest.raises(ValueError):
        exact_overhead("lstm", preset("resnet18"), phase="eval")
    with pytest.raises(ValueError):
        exact_overhead("lstm", preset("resnet18"), r=3)


@pytest.mark.parametrize(
    "name,expected", [("resnet18", 11_689_512), ("resnet34", 21_797_672), ("resnet50", 25_557_032), ("resnet101", 44_549_160)]
)
def test_resnet_params_presets(name, expected):
    assert resnet_params(preset(name)) == expected


@pytest.mark.parametrize("kind", ["lstm", "2fc", "indp"])
@pytest.mark.parametrize("block_kind", ["basic", "bottleneck", "plain"])
def test_overhead_matches_built_controllers(kind, block_kind):
    spec = toy_spec(3, (8, 16), block_kind)
    net = build_network(spec, ControllerConfig(kind))
    built = sum(t.size for n, t in net.named_parameters() if n.startswith("controller"))
    assert built == exact_overhead(kind, spec)
    assert net.count_params(include_controller=False) == resnet_params(spec)


def test_flops_presets():
    assert resnet_flops(preset("resnet50")) == pytest.approx(3.86e9, rel=0.10)
    assert resnet_flops(preset("resnet18")) == pytest.approx(1.81e9, rel=0.10)


def test_flops_hand_count():
    # 1x1 image, 2 input channels, one plain block of width 3, 4 classes
    spec = NetworkSpec((StageSpec(1, 3, "plain"),), input_channels=2, num_classes=4)
    stem = 3 * 2 * 9  # 3x3 conv on a 1x1 padded input: every tap is still a MAC
    block = 3 * 3 * 9
    fc = 4 * 3
    assert resnet_flops(spec, 1) == stem + block + fc
    # a stride-2 entry block with projection on a 4x4 input
    spec = NetworkSpec((StageSpec(1, 2, "plain"), StageSpec(1, 4, "plain", True)), input_channels=1, num_classes=1)
    expect = 2 * 1 * 9 * 16 + 2 * 2 * 9 * 16 + 4 * 2 * 9 * 4 + 4 * 2 * 4 + 4
    assert resnet_flops(spec, 4) == expect


def test_appendix_b_resnet50():
    assert appendix_b_table(preset("resnet50")) == [
        ["[320,32]×1", "[64,32]×4", "[32,256]×1"],
        ["[640,64]×1", "[128,64]×4", "[64,512]×1"],
        ["[1280,128]×1", "[256,128]×4", "[128,1024]×1"],
        ["[2560,256]×1", "[512,256]×4", "[256,2048]×1"],
    ]


def test_appendix_b_resnet34():
    rows = appendix_b_table(preset("resnet34"))
    assert rows[0] == ["[3×3×128,16]×1", "[32,16]×4", "[16,64]×1"]
    assert rows[3] == ["[3×3×1024,128]×1", "[256,128]×4", "[128,512]×1"]


def test_report_json_serialisable():
    d = complexity_report(preset("resnet18"), "2fc").to_dict()
    assert json.loads(json.dumps(d))["params_base"] == 11_689_512
    assert np.isclose(d["flops_infer"], resnet_flops(preset("resnet18")))
