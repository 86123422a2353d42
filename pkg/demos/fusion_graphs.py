"""Print the four fusion variants and the nesting between them.

Variant II runs variant I and then a coarse-to-fine pass of Down connections on
top of its outputs; IV does the same on top of III. The dumps below list every
node in evaluation order, so the prefix relation is visible directly.
"""

from active.ccfpn import ccfpn_graph_dump, variant_graph

for variant in (1, 2, 3, 4):
    nodes, _ = variant_graph(variant)
    print(f"=== variant {variant}: {len(nodes)} fusion nodes")
    print(ccfpn_graph_dump(variant))

for outer, inner in ((2, 1), (4, 3)):
    big, _ = variant_graph(outer)
    small, _ = variant_graph(inner)
    print(f"variant {outer} starts with the {len(small)} nodes of variant {inner}: {big[:len(small)] == small}")
