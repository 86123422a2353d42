from pathlib import Path

import numpy as np
import pytest

from active.ccfpn import CCFPN, ccfpn_apply, ccfpn_graph_dump, parse_variant, variant_graph
from active.dbfen import PyramidSet
from active.tensor import ShapeError, Tensor, add, check_gradients, dot_all

from gradtools import he_rescale

GOLDEN = Path(__file__).parent / "golden"
SIZES = {1: 2, 2: 4, 3: 8}  # spatial extent per level, coarsest first
IN_WIDTHS = (5, 4, 3)  # j = 1, 2, 3


# ---------------------------------------------------------------------------
# straight-line transcription of the fusion equations, plain numpy


def _conv3(x, conv):
    w, b = conv.weight.data, conv.bias.data
    n, c, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((n, w.shape[0], h, wd)) + b[None, :, None, None]
    for dy in range(3):
        for dx in range(3):
            out += np.einsum("oc,nchw->nohw", w[:, :, dy, dx], xp[:, :, dy : dy + h, dx : dx + wd])
    return np.where(out > 0, out, 0.1 * out)


def _lat(x, conv):
    return np.einsum("oc,nchw->nohw", conv.weight.data[:, :, 0, 0], x) + conv.bias.data[None, :, None, None]


def _up(x):
    return x.repeat(2, axis=2).repeat(2, axis=3)


def _down(x):
    n, c, h, w = x.shape
    return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def transcribe(net, pin, variant, eq3_literal=False):
    """Fusion equations evaluated line by line; returns (P1out, P2out, P3out)."""
    L = {f"{i}{j}": _lat(pin[(i, j)], net.lateral[f"P{i}{j}"]) for i in (1, 2) for j in (1, 2, 3)}
    C = net.fuse
    if variant in (1, 2):
        I1 = _conv3(L["11"] + L["21"], C["I.P1"])
        I2 = _conv3(L["12"] + L["22"] + _up(I1), C["I.P2"])
        I3 = _conv3(L["13"] + L["23"] + _up(I2), C["I.P3"])
        if variant == 1:
            return I1, I2, I3
        II3 = _conv3(I3, C["II.P3"])
        II2 = _conv3(I2 + _down(II3), C["II.P2"])
        II1 = _conv3(I1 + _down(II2), C["II.P1"])
        return II1, II2, II3
    T11 = _conv3(L["11"], C["III.P11"])
    T12 = _conv3(L["12"] + _up(T11), C["III.P12"])
    if eq3_literal:
        T13 = _conv3(_up(L["12"]) + _up(T12), C["III.P13"])
    else:
        T13 = _conv3(L["13"] + _up(T12), C["III.P13"])
    T1 = _conv3(T11 + L["21"], C["III.P1"])
    T2 = _conv3(T12 + L["22"] + _up(T1), C["III.P2"])
    T3 = _conv3(T13 + L["23"] + _up(T2), C["III.P3"])
    if variant == 3:
        return T1, T2, T3
    IV3 = _conv3(T3, C["IV.P3"])
    IV2 = _conv3(T2 + _down(IV3), C["IV.P2"])
    IV1 = _conv3(T1 + _down(IV2), C["IV.P1"])
    return IV1, IV2, IV3


def random_pyramid(rng, n=1):
    return {(i, j): rng.normal(size=(n, IN_WIDTHS[j - 1], SIZES[j], SIZES[j])) for i in (1, 2) for j in (1, 2, 3)}


def as_set(arrays, requires_grad=False):
    return PyramidSet({k: Tensor(v, requires_grad=requires_grad) for k, v in arrays.items()})


class TestTranscriptionOracle:
    @pytest.mark.parametrize("variant", [1, 2, 3, 4])
    def test_hundred_random_pyramids(self, variant):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            net = CCFPN(variant, IN_WIDTHS, 3, rng)
            he_rescale(net, rng)  # O(1) values, nonzero biases exercise every term
            pin = random_pyramid(rng, n=2)
            got = ccfpn_apply(net, as_set(pin)).outputs()
            for g, r in zip(got, transcribe(net, pin, variant)):
                np.testing.assert_allclose(g.data, r, rtol=0, atol=1e-12)

    def test_eq3_literal_reading(self):
        rng = np.random.default_rng(7)
        for variant in (3, 4):
            net = CCFPN(variant, IN_WIDTHS, 3, rng, eq3_literal=True)
            pin = random_pyramid(rng)
            got = ccfpn_apply(net, as_set(pin)).outputs()
            for g, r in zip(got, transcribe(net, pin, variant, eq3_literal=True)):
                np.testing.assert_allclose(g.data, r, rtol=1e-12, atol=1e-12)


class TestIdentityExamples:
    def _identity_net(self, variant):
        net = CCFPN(variant, (1, 1, 1), 1, np.random.default_rng(0))
        for conv in net.lateral.values():
            conv.weight.data[:] = 1.0
        for conv in net.fuse.values():
            conv.weight.data[:] = 0.0
            conv.weight.data[0, 0, 1, 1] = 1.0
        return net

    def test_variant_one_scalar_sums(self):
        net = self._identity_net(1)
        pin = {(1, 1): 1.0, (2, 1): 2.0, (1, 2): 1.0, (2, 2): 1.0, (1, 3): 0.0, (2, 3): 0.0}
        pyr = as_set({(i, j): np.full((1, 1, SIZES[j], SIZES[j]), v) for (i, j), v in pin.items()})
        out = ccfpn_apply(net, pyr).outputs()
        np.testing.assert_array_equal(out[0].data, 3.0)
        np.testing.assert_array_equal(out[1].data, 5.0)
        np.testing.assert_array_equal(out[2].data, 5.0)

    def test_variant_two_substitution(self):
        net = self._identity_net(2)
        rng = np.random.default_rng(3)
        pyr = as_set({(i, j): rng.uniform(0, 1, size=(1, 1, SIZES[j], SIZES[j])) for i in (1, 2) for j in (1, 2, 3)})
        res = ccfpn_apply(net, pyr)
        i1, i2, i3 = (res[("node", f"I.P{k}")].data for k in (1, 2, 3))
        np.testing.assert_allclose(res[("out", 3)].data, i3)
        np.testing.assert_allclose(res[("out", 2)].data, i2 + _down(i3))
        np.testing.assert_allclose(res[("out", 1)].data, i1 + _down(i2 + _down(i3)))


class TestStructure:
    @pytest.mark.parametrize("variant", [1, 2, 3, 4])
    def test_resolution_contract(self, variant):
        rng = np.random.default_rng(0)
        pin = random_pyramid(rng)
        out = CCFPN(variant, IN_WIDTHS, 4, rng)(as_set(pin)).outputs()
        for k, o in zip((1, 2, 3), out):
            assert o.shape == (1, 4, SIZES[k], SIZES[k])

    @pytest.mark.parametrize("outer,inner,prefix", [(2, 1, "I"), (4, 3, "III")])
    def test_nested_variant_consistency(self, outer, inner, prefix):
        rng = np.random.default_rng(11)
        big = CCFPN(outer, IN_WIDTHS, 3, rng)
        small = CCFPN(inner, IN_WIDTHS, 3, rng)
        small.load_state_dict({k: v for k, v in big.state_dict().items() if k in dict(small.named_parameters())})
        pin = as_set(random_pyramid(rng))
        res_big = ccfpn_apply(big, pin)
        res_small = ccfpn_apply(small, pin)
        for k in (1, 2, 3):
            np.testing.assert_array_equal(res_big[("node", f"{prefix}.P{k}")].data, res_small[("out", k)].data)

    @pytest.mark.parametrize("outer,inner", [(2, 1), (4, 3)])
    def test_graph_prefix(self, outer, inner):
        big, _ = variant_graph(outer)
        small, _ = variant_graph(inner)
        assert big[: len(small)] == small

    @pytest.mark.parametrize("variant", [1, 2, 3, 4])
    def test_zero_input_zero_bias(self, variant):
        rng = np.random.default_rng(0)
        net = CCFPN(variant, IN_WIDTHS, 3, rng)
        pin = {k: np.zeros_like(v) for k, v in random_pyramid(rng).items()}
        for o in ccfpn_apply(net, as_set(pin)).outputs():
            np.testing.assert_array_equal(o.data, 0.0)

    def test_up_down_connect_adjacent_levels(self):
        for variant in (1, 2, 3, 4):
            nodes, _ = variant_graph(variant)
            level = {}
            for node in nodes:
                level[node.name] = int(node.name[-1])
            for node in nodes:
                for t in node.terms:
                    if t[0] in ("up", "down") and t[1][0] == "node":
                        src = level[t[1][1]]
                        assert level[node.name] - src == (1 if t[0] == "up" else -1)

    def test_missing_level_rejected(self):
        rng = np.random.default_rng(0)
        pin = random_pyramid(rng)
        del pin[(2, 3)]
        with pytest.raises(ShapeError):
            ccfpn_apply(CCFPN(1, IN_WIDTHS, 3, rng), as_set(pin))

    @pytest.mark.parametrize("text,num", [("I", 1), ("iv", 4), ("3", 3), (2, 2)])
    def test_parse_variant(self, text, num):
        assert parse_variant(text) == num

    @pytest.mark.parametrize("bad", ["V", 0, 5, "x"])
    def test_parse_variant_rejects(self, bad):
        with pytest.raises(ValueError):
            parse_variant(bad)


class TestGraphDump:
    @pytest.mark.parametrize("variant,nodes,ups,downs", [(1, 3, 2, 0), (2, 6, 2, 2), (3, 6, 4, 0), (4, 9, 4, 2)])
    def test_counts(self, variant, nodes, ups, downs):
        footer = ccfpn_graph_dump(variant).strip().splitlines()[-1]
        assert footer == f"# fusion_nodes={nodes} up_edges={ups} down_edges={downs}"

    @pytest.mark.parametrize("variant", [1, 2, 3, 4])
    def test_golden(self, variant):
        assert ccfpn_graph_dump(variant) == (GOLDEN / f"ccfpn_{variant}.txt").read_text()

    def test_golden_eq3_literal(self):
        assert ccfpn_graph_dump(3, eq3_literal=True) == (GOLDEN / "ccfpn_3_eq3_literal.txt").read_text()


@pytest.mark.gradcheck
class TestGradients:
    @pytest.mark.parametrize("seed", range(20))
    @pytest.mark.parametrize("variant", [1, 2, 3, 4])
    def test_variant(self, seed, variant):
        rng = np.random.default_rng(seed)
        net = CCFPN(variant, IN_WIDTHS, 3, rng)
        he_rescale(net, rng)
        pin = as_set(random_pyramid(rng), requires_grad=True)
        projs = [rng.normal(size=(1, 3, SIZES[k], SIZES[k])) for k in (1, 2, 3)]

        def fn():
            return add([dot_all(o, w) for o, w in zip(ccfpn_apply(net, pin).outputs(), projs)])

        named = dict(net.named_parameters())
        picks = [pin[(1, 1)], pin[(2, 3)]] + [named[k] for k in sorted(named)[seed % 5 :: 5]]
        worst = 0.0
        for t in picks:
            idx = [np.unravel_index(i, t.shape) for i in rng.choice(t.data.size, min(3, t.data.size), replace=False)]
            worst = max(worst, check_gradients(fn, t, indices=idx))
        assert worst < 1e-4
