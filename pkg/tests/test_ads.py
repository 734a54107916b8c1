import math

import numpy as np
import pytest

from ddnkit.ads import (
    AdsPlacement,
    attach_aux_branch,
    auto_place,
    detach_aux_branch,
    parse_directive,
    place_ads,
    placement_from_directive,
    resolve_link,
    total_loss,
)
from ddnkit.erf_probe import LerfEntry, LerfReport
from ddnkit.netspec import build_graph, parameter_count, parse_spec
from ddnkit.gradcheck import project
from ddnkit.tensor import Tape, Tensor, backward

SIX = [5.0, 9.0, 14.0, 22.0, 38.0, 70.0]


def scalar(v):
    return Tensor(np.full((1, 1, 1, 1), v))


def report(means):
    return LerfReport([LerfEntry(h, 0, m, 0.0, 1) for h, m in enumerate(means, start=1)])


def spec(icc="full", occ="all"):
    return parse_spec(
        f"stages 3\nstage 1 convs=2 channels=4\nstage 2 convs=2 channels=8\nstage 3 convs=2 channels=16\nicc {icc}\nocc {occ}\n"
    )


def oracle_case1(means, obj):
    """Exhaustive scan, ties to the shallower layer."""
    best = None
    for h, m in enumerate(means, start=1):
        d = abs(obj - m)
        if best is None or d < best[1]:
            best = (h, d)
    return best[0]


# --------------------------------------------------------------- routing


@pytest.mark.parametrize("obj,layer", [(51.0, 5), (16.0, 3), (5.0, 1), (70.0, 6), (1.0, 1), (30.0, 4)])
def test_case1_examples(obj, layer):
    p = place_ads(report(SIX), obj)
    assert p.case == 1 and p.target_layer == layer
    assert p.match_residual == abs(obj - SIX[layer - 1])


def test_tie_goes_to_shallower_layer():
    assert place_ads(report(SIX), 30.0).target_layer == 4   # |30-22| == |30-38|


def test_equality_boundary_is_case1():
    assert place_ads(report(SIX), 70.0).case == 1
    assert place_ads(report(SIX), 70.0 + 1e-9, lambda k: 70.0 + 5 * k).case == 2


def test_case1_exhaustive_grid():
    rng = np.random.default_rng(0)
    for _ in range(200):
        means = np.sort(rng.uniform(1, 100, size=rng.integers(2, 11))).tolist()
        obj = float(rng.uniform(0.5, means[-1]))
        assert place_ads(report(means), obj).target_layer == oracle_case1(means, obj)


@pytest.mark.parametrize("s", [0.5, 2.0, 3.0])
def test_scale_invariance(s):
    rng = np.random.default_rng(1)
    for _ in range(50):
        means = np.sort(rng.uniform(1, 100, size=6)).tolist()
        obj = float(rng.uniform(1, means[-1]))
        a = place_ads(report(means), obj).target_layer
        b = place_ads(report([s * m for m in means]), s * obj).target_layer
        assert a == b


@pytest.mark.parametrize("k_star", [1, 2, 3, 7])
def test_case2_stops_at_first_local_minimum(k_star):
    base = 70.0
    obj = base + 10.0 * k_star + 1.0    # probe(k) = 70 + 10k, best k is k_star
    calls = []

    def probe(k):
        calls.append(k)
        return base + 10.0 * k

    p = place_ads(report(SIX), obj, probe)
    assert p.case == 2 and p.stacked_layers == k_star
    assert p.match_residual == pytest.approx(1.0)
    assert sorted(set(calls)) == list(range(1, k_star + 2))   # never probes past k*+1
    assert len(calls) == len(set(calls))                      # each k probed once


def test_case2_rows_of_probe_table():
    p = place_ads(report(SIX), 95.0, lambda k: {1: 80.0, 2: 92.0, 3: 97.0, 4: 99.0}[k])
    # residuals 15, 3, 2, 4
    assert p.stacked_layers == 3 and p.probes == {1: 80.0, 2: 92.0, 3: 97.0, 4: 99.0}


def test_case2_needs_probe():
    with pytest.raises(ValueError, match="Case-2"):
        place_ads(report(SIX), 100.0)


@pytest.mark.parametrize("obj", [math.nan, math.inf, -1.0, 0.0])
def test_bad_obj(obj):
    with pytest.raises(ValueError):
        place_ads(report(SIX), obj)


def test_rationale_and_directive():
    p = place_ads(report(SIX), 51.0)
    assert "Case-1" in p.rationale() and "layer 5" in p.rationale()
    assert p.directive() == "case1:5"
    q = place_ads(report(SIX), 90.0, lambda k: 70.0 + 10 * k)
    assert "Case-2" in q.rationale() and q.directive() == "case2:2"
    assert len(q.csv_row()) == len(AdsPlacement.CSV_HEADER)


# ------------------------------------------------------------- wiring


@pytest.mark.parametrize("layer,linked,stage", [(1, 2, 1), (2, 2, 1), (3, 4, 2), (5, 6, 3), (6, 6, 3)])
def test_resolve_link_full_graph(layer, linked, stage):
    assert resolve_link(build_graph(spec(), np.random.default_rng(0)), layer) == (linked, stage)


def test_resolve_link_bad_layer():
    with pytest.raises(ValueError):
        resolve_link(build_graph(spec(), np.random.default_rng(0)), 7)


def test_case1_on_full_occ_adds_no_parameters():
    g = build_graph(spec(), np.random.default_rng(0))
    before = parameter_count(g)
    attach_aux_branch(g, place_ads(report(SIX), 16.0, graph=g))
    assert parameter_count(g) == before


def test_case1_on_unet_creates_head():
    g = build_graph(spec("commensurate", "last"), np.random.default_rng(0))
    before = parameter_count(g)
    p = placement_from_directive(g, 1, 3)
    assert p.attachment == "occ:2"
    attach_aux_branch(g, p)
    assert parameter_count(g) - before == 8 * 1 + 1
    _, outs = g.forward(Tensor(np.random.default_rng(1).random((1, 1, 16, 16))))
    assert outs["aux"].shape == (1, 1, 16, 16)


@pytest.mark.parametrize("k", [1, 2, 3])
def test_case2_parameter_delta(k):
    g = build_graph(spec(), np.random.default_rng(0))
    before = parameter_count(g)
    attach_aux_branch(g, placement_from_directive(g, 2, k))
    C, classes = 16, 1
    assert parameter_count(g) - before == k * (C * C * 9 + C + 2 * C) + C * classes + classes


@pytest.mark.parametrize("directive", ["case1:3", "case2:2"])
def test_aux_branch_never_changes_main_output(directive, rng):
    g = build_graph(spec(), np.random.default_rng(0))
    x = Tensor(rng.random((2, 1, 16, 16)))
    plain = g.forward(x)[0].data.copy()
    attach_aux_branch(g, placement_from_directive(g, *parse_directive(directive)))
    probs, outs = g.forward(x)
    assert probs.data.tobytes() == plain.tobytes() and "aux" in outs
    detach_aux_branch(g)
    probs, outs = g.forward(x)
    assert probs.data.tobytes() == plain.tobytes() and "aux" not in outs


def test_stacked_branch_reads_tail(rng):
    g = build_graph(spec(), np.random.default_rng(0))
    attach_aux_branch(g, placement_from_directive(g, 2, 1))
    _, outs = g.forward(Tensor(rng.random((1, 1, 16, 16))))
    assert outs["tail"].shape == (1, 16, 4, 4)
    assert outs["aux_logits"].shape == (1, 1, 16, 16)


def test_auto_place_on_small_graph(small_graph):
    p, rep = auto_place(small_graph, 16.0, trials=3)
    assert p.case == 1 and p.target_layer == oracle_case1(rep.lerf_means, 16.0)
    again, _ = auto_place(small_graph, 16.0, trials=3)
    assert again.csv_row() == p.csv_row()


def test_auto_place_case2_probes_grown_encoder(small_graph):
    p, rep = auto_place(small_graph, 40.0, trials=2)
    assert p.case == 2 and p.stacked_layers >= 1
    assert all(v > rep.network_lerf for v in p.probes.values())


# ----------------------------------------------------------- directives


@pytest.mark.parametrize(
    "text,value", [("off", None), ("auto", ("auto",)), ("case1:4", (1, 4)), ("case2:12", (2, 12))]
)
def test_parse_directive(text, value):
    assert parse_directive(text) == value


@pytest.mark.parametrize("text", ["on", "case1:0", "case3:1", "case2:", "case1:-2", "case1:x"])
def test_parse_directive_errors(text):
    with pytest.raises(ValueError):
        parse_directive(text)


# ------------------------------------------------------------------ loss


def test_total_loss_adds_aux_unweighted():
    loss = total_loss(scalar(0.7), scalar(0.3), [], 0.0)
    assert loss.item() == pytest.approx(1.0)


def test_total_loss_without_aux_is_main():
    assert total_loss(scalar(0.7), None, [], 0.0).item() == 0.7


def test_total_loss_weight_decay():
    w = Tensor(np.array([1.0, 2.0]))
    assert total_loss(scalar(0.5), None, [w], 0.1).item() == pytest.approx(1.0)


def test_total_loss_gradient_is_sum_of_parts(rng):
    w = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    a, b, lam = rng.normal(size=(3, 4)), rng.normal(size=(3, 4)), 0.01
    with Tape() as tape:
        loss = total_loss(project(w, a), project(w, b), [w], lam)
        backward(tape, loss)
    np.testing.assert_allclose(w.grad, a + b + 2 * lam * w.data, rtol=1e-12, atol=1e-14)


def test_total_loss_rejects_non_finite():
    with pytest.raises(FloatingPointError):
        total_loss(scalar(np.nan), None, [], 0.0)
