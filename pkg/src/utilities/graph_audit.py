"""
Inspection helpers for the autograd graph and for the tensors an op sequence touches.
"""
from contextlib import contextmanager
from typing import List, Set, Tuple

import torch


def graph_nodes(root: torch.Tensor, include_leaves: bool = False) -> Set:
    """All grad_fn nodes reachable from root. AccumulateGrad (parameter leaves) skipped by default."""
    seen = set()
    if root.grad_fn is None:
        return seen
    stack = [root.grad_fn]
    while stack:
        node = stack.pop()
        if node is None or node in seen:
            continue
        if not include_leaves and type(node).__name__ == 'AccumulateGrad':
            continue
        seen.add(node)
        for parent, _ in node.next_functions:
            if parent is not None and parent not in seen:
                stack.append(parent)
    return seen


def graph_size(root: torch.Tensor) -> int:
    return len(graph_nodes(root))


def shares_graph(root_a: torch.Tensor, root_b: torch.Tensor) -> bool:
    """True when any non-leaf node is reachable from both roots."""
    return len(graph_nodes(root_a) & graph_nodes(root_b)) > 0


class ShapeAudit:
    def __init__(self):
        self.shapes: List[Tuple[int, ...]] = []

    def saw_trailing_extent(self, a: int, b: int) -> bool:
        pairs = {(a, b), (b, a)}
        return any(len(s) >= 2 and tuple(s[-2:]) in pairs for s in self.shapes)


@contextmanager
def shape_audit():
    """
    Record operand shapes of every op dispatched inside the block.
    Any materialized matrix reaches a later op as an operand, so it shows up here.
    """
    audit = ShapeAudit()
    with torch.profiler.profile(activities=[torch.profiler.ProfilerActivity.CPU], record_shapes=True) as prof:
        yield audit
    for event in prof.events():
        for shape in event.input_shapes:
            if shape:
                audit.shapes.append(tuple(shape))
