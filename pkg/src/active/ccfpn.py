"""Cross-conjugate feature pyramid fusion, variants I-IV.

Each variant is a small dataflow graph described as data (see :func:`variant_graph`).
A fusion node is ``Conv(sum of terms)`` where a term is a lateral-projected
backbone tap, another fusion node, or an ``Up``/``Down`` of one of those.
Variant II extends variant I and variant IV extends variant III, so their
graphs literally contain the smaller graph as a prefix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dbfen import LEVELS, PyramidSet
from .nn import Conv, Module
from .tensor import ShapeError, Tensor, add, downsample2x, upsample2x

# term grammar: ("in", i, j) | ("node", name) | ("up", term) | ("down", term)

ROMAN = {1: "I", 2: "II", 3: "III", 4: "IV"}


@dataclass(frozen=True)
class FusionNode:
    name: str
    terms: tuple


def _in(i, j):
    return ("in", i, j)


def _node(name):
    return ("node", name)


def _up(t):
    return ("up", t)


def _down(t):
    return ("down", t)


def _top_down(prefix: str, left: list, right: list) -> list[FusionNode]:
    """``P1 = Conv(l1 + r1)``, ``Pk = Conv(lk + rk + Up(P{k-1}))``."""
    nodes = [FusionNode(f"{prefix}.P1", (left[0], right[0]))]
    for k in (2, 3):
        nodes.append(FusionNode(f"{prefix}.P{k}", (left[k - 1], right[k - 1], _up(_node(f"{prefix}.P{k-1}")))))
    return nodes


def _bottom_up(prefix: str, src: str) -> list[FusionNode]:
    """``P3 = Conv(src.P3)``, ``Pk = Conv(src.Pk + Down(P{k+1}))``."""
    nodes = [FusionNode(f"{prefix}.P3", (_node(f"{src}.P3"),))]
    for k in (2, 1):
        nodes.append(FusionNode(f"{prefix}.P{k}", (_node(f"{src}.P{k}"), _down(_node(f"{prefix}.P{k+1}")))))
    return nodes


def _variant_three(eq3_literal: bool) -> list[FusionNode]:
    third = (
        (_up(_in(1, 2)), _up(_node("III.P12")))
        if eq3_literal
        else (_in(1, 3), _up(_node("III.P12")))
    )
    inner = [
        FusionNode("III.P11", (_in(1, 1),)),
        FusionNode("III.P12", (_in(1, 2), _up(_node("III.P11")))),
        FusionNode("III.P13", third),
    ]
    left = [_node("III.P11"), _node("III.P12"), _node("III.P13")]
    right = [_in(2, 1), _in(2, 2), _in(2, 3)]
    return inner + _top_down("III", left, right)


def variant_graph(variant, eq3_literal: bool = False) -> tuple[list[FusionNode], tuple[str, str, str]]:
    """Fusion nodes in evaluation order plus the node names feeding ``P1out..P3out``."""
    v = parse_variant(variant)
    if v in (1, 2):
        nodes = _top_down("I", [_in(1, k) for k in LEVELS], [_in(2, k) for k in LEVELS])
        base = "I"
    else:
        nodes = _variant_three(eq3_literal)
        base = "III"
    top = base
    if v in (2, 4):
        top = ROMAN[v]
        nodes = nodes + _bottom_up(top, base)
    return nodes, tuple(f"{top}.P{k}" for k in LEVELS)


def parse_variant(variant) -> int:
    if isinstance(variant, str):
        key = variant.strip().upper()
        for num, roman in ROMAN.items():
            if key == roman or key == str(num):
                return num
        raise ValueError(f"unknown CCFPN variant {variant!r}")
    v = int(variant)
    if v not in ROMAN:
        raise ValueError(f"CCFPN variant must be 1-4, got {variant}")
    return v


class CCFPN(Module):
    """Lateral 1x1 projections plus one 3x3 conv per fusion node."""

    def __init__(self, variant, in_widths: tuple[int, int, int], width: int,
                 rng: np.random.Generator, eq3_literal: bool = False, dtype=np.float64):
        self._variant = parse_variant(variant)
        self._eq3_literal = eq3_literal
        self._nodes, self._outputs = variant_graph(self._variant, eq3_literal)
        # in_widths are given for j = 1, 2, 3 and shared by both branches
        self.lateral = {
            f"P{i}{j}": Conv(rng, in_widths[j - 1], width, 1, act="linear", dtype=dtype)
            for i in (1, 2) for j in LEVELS
        }
        self.fuse = {node.name: Conv(rng, width, width, 3, act="leaky_relu", dtype=dtype) for node in self._nodes}

    @property
    def variant(self) -> int:
        return self._variant

    @property
    def nodes(self) -> list[FusionNode]:
        return list(self._nodes)

    def __call__(self, pin: PyramidSet) -> PyramidSet:
        return ccfpn_apply(self, pin)


def ccfpn_apply(net: CCFPN, pin: PyramidSet) -> PyramidSet:
    """Evaluate the variant graph; the result holds ``("out", k)`` and every ``("node", name)``."""
    for i in (1, 2):
        for j in LEVELS:
            if (i, j) not in pin:
                raise ShapeError(f"CCFPN input P{i}{j} missing")
    lat = {(i, j): net.lateral[f"P{i}{j}"](pin[(i, j)]) for i in (1, 2) for j in LEVELS}
    values: dict[str, Tensor] = {}

    def term(t) -> Tensor:
        kind = t[0]
        if kind == "in":
            return lat[(t[1], t[2])]
        if kind == "node":
            return values[t[1]]
        if kind == "up":
            return upsample2x(term(t[1]))
        if kind == "down":
            return downsample2x(term(t[1]))
        raise ValueError(f"bad term {t!r}")

    for node in net._nodes:
        parts = [term(t) for t in node.terms]
        summed = parts[0] if len(parts) == 1 else add(parts)
        values[node.name] = net.fuse[node.name](summed)

    out = PyramidSet()
    for k, name in zip(LEVELS, net._outputs):
        out[("out", k)] = values[name]
    for name, v in values.items():
        out[("node", name)] = v
    return out


def _term_label(t) -> str:
    kind = t[0]
    if kind == "in":
        return f"L{t[1]}{t[2]}"
    if kind == "node":
        return t[1]
    return f"{kind.capitalize()}({_term_label(t[1])})"


def ccfpn_graph_dump(variant, eq3_literal: bool = False) -> str:
    """Deterministic topological listing of the fusion graph."""
    v = parse_variant(variant)
    nodes, outputs = variant_graph(v, eq3_literal)
    lines = [f"# CCFPN-{ROMAN[v]} eq3_literal={str(eq3_literal).lower()}"]
    for i in (1, 2):
        for j in LEVELS:
            lines.append(f"input P{i}{j}")
    for i in (1, 2):
        for j in LEVELS:
            lines.append(f"lateral L{i}{j} <- P{i}{j}")
    n_up = n_down = 0
    for node in nodes:
        labels = []
        for t in node.terms:
            if t[0] in ("up", "down"):
                label = _term_label(t)
                lines.append(f"{t[0]} {label} <- {_term_label(t[1])}")
                if t[0] == "up":
                    n_up += 1
                else:
                    n_down += 1
            labels.append(_term_label(t))
        if len(labels) > 1:
            lines.append(f"add Sum({node.name}) <- {', '.join(labels)}")
            lines.append(f"conv {node.name} <- Sum({node.name})")
        else:
            lines.append(f"conv {node.name} <- {labels[0]}")
    for k, name in zip(LEVELS, outputs):
        lines.append(f"output P{k}out <- {name}")
    lines.append(f"# fusion_nodes={len(nodes)} up_edges={n_up} down_edges={n_down}")
    return "\n".join(lines) + "\n"
