"""Binary latent-tree topology: node records, validation, and serialization.

Node ids are assigned once and never reused within a model's lifetime, with
one exception: a child promoted into the root slot takes over id 0 so the
root-id invariant survives pruning.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

from ..errors import ValidationError

ROOT_ID = 0


@dataclass(frozen=True)
class NodeRecord:
    id: int
    parent: int | None
    left: int | None
    right: int | None
    depth: int

    @property
    def is_leaf(self) -> bool:
        return self.left is None and self.right is None


class TreeTopology:
    """Structure-only view of the latent tree (no parameters)."""

    def __init__(self, nodes: dict[int, NodeRecord], max_depth: int, next_id: int | None = None):
        self.nodes = dict(nodes)
        self.max_depth = max_depth
        self.next_id = max(self.nodes) + 1 if next_id is None else next_id

    @classmethod
    def initial(cls, max_depth: int) -> "TreeTopology":
        """Root plus two leaf children, the starting structure for training."""
        nodes = {
            0: NodeRecord(0, None, 1, 2, 0),
            1: NodeRecord(1, 0, None, None, 1),
            2: NodeRecord(2, 0, None, None, 1),
        }
        return cls(nodes, max_depth)

    # -- queries -----------------------------------------------------------

    def leaves(self) -> list[int]:
        """Leaf ids in left-to-right order."""
        out: list[int] = []

        def visit(nid: int) -> None:
            node = self.nodes[nid]
            if node.is_leaf:
                out.append(nid)
                return
            visit(node.left)
            visit(node.right)

        visit(ROOT_ID)
        return out

    def internal_nodes(self) -> list[int]:
        return [nid for nid in self.iter_ids() if not self.nodes[nid].is_leaf]

    def iter_ids(self) -> list[int]:
        """All node ids in breadth-first order from the root."""
        out, queue = [], [ROOT_ID]
        while queue:
            nid = queue.pop(0)
            out.append(nid)
            node = self.nodes[nid]
            if node.left is not None:
                queue.append(node.left)
            if node.right is not None:
                queue.append(node.right)
        return out

    def path_to(self, leaf: int) -> list[int]:
        """Node ids from the root down to ``leaf`` inclusive."""
        if leaf not in self.nodes:
            raise ValidationError(f"unknown node id {leaf}")
        path = [leaf]
        while self.nodes[path[-1]].parent is not None:
            path.append(self.nodes[path[-1]].parent)
        return path[::-1]

    def depth(self) -> int:
        return max(node.depth for node in self.nodes.values())

    # -- edits -------------------------------------------------------------

    def split_leaf(self, leaf: int) -> tuple["TreeTopology", int, int]:
        """Attach two fresh children under ``leaf``; returns the new child ids."""
        node = self.nodes[leaf]
        if not node.is_leaf:
            raise ValidationError(f"node {leaf} is not a leaf")
        left_id, right_id = self.next_id, self.next_id + 1
        nodes = dict(self.nodes)
        nodes[leaf] = replace(node, left=left_id, right=right_id)
        nodes[left_id] = NodeRecord(left_id, leaf, None, None, node.depth + 1)
        nodes[right_id] = NodeRecord(right_id, leaf, None, None, node.depth + 1)
        return TreeTopology(nodes, self.max_depth, self.next_id + 2), left_id, right_id

    def remove_leaves(self, doomed: set[int]) -> tuple["TreeTopology", dict[int, int]]:
        """Drop the given leaves, collapsing single-child parents.

        Returns the new topology and a rename map (old id -> new id); renames
        only happen when a node is promoted into the root slot.
        """
        for nid in doomed:
            if not self.nodes[nid].is_leaf:
                raise ValidationError(f"cannot prune internal node {nid}")
        survivors = [l for l in self.leaves() if l not in doomed]
        if not survivors:
            raise ValidationError("pruning would remove every leaf")

        nodes = {nid: node for nid, node in self.nodes.items()}
        renames: dict[int, int] = {}

        def detach(nid: int) -> None:
            node = nodes.pop(nid)
            parent = nodes[node.parent]
            if parent.left == nid:
                nodes[node.parent] = replace(parent, left=None)
            else:
                nodes[node.parent] = replace(parent, right=None)

        def collapse(pid: int) -> None:
            """Promote the single remaining child of ``pid`` into its slot."""
            parent = nodes[pid]
            child_id = parent.left if parent.left is not None else parent.right
            child = nodes[child_id]
            grand = parent.parent
            if grand is None:
                # the promoted child becomes the root and takes over id 0
                nodes.pop(pid)
                nodes.pop(child_id)
                renames[child_id] = ROOT_ID
                nodes[ROOT_ID] = replace(child, id=ROOT_ID, parent=None)
                _relink_children(nodes, ROOT_ID, child_id)
            else:
                nodes.pop(pid)
                gnode = nodes[grand]
                if gnode.left == pid:
                    nodes[grand] = replace(gnode, left=child_id)
                else:
                    nodes[grand] = replace(gnode, right=child_id)
                nodes[child_id] = replace(child, parent=grand)
            _reset_depths(nodes)

        for nid in doomed:
            if nid not in nodes:
                continue
            parent_id = nodes[nid].parent
            if parent_id is None:
                raise ValidationError("cannot prune the root")
            detach(nid)
            while parent_id is not None and parent_id in nodes:
                parent = nodes[parent_id]
                n_children = (parent.left is not None) + (parent.right is not None)
                if n_children != 1:
                    break
                grand = parent.parent
                collapse(parent_id)
                parent_id = grand

        _reset_depths(nodes)
        topo = TreeTopology(nodes, self.max_depth, self.next_id)
        return topo, renames

    # -- validation and serialization ---------------------------------------

    def validate(self, max_leaves: int | None = None) -> None:
        if ROOT_ID not in self.nodes:
            raise ValidationError("tree has no root (id 0)")
        root = self.nodes[ROOT_ID]
        if root.parent is not None or root.depth != 0:
            raise ValidationError("root must have no parent and depth 0")
        seen = set()
        queue = [ROOT_ID]
        while queue:
            nid = queue.pop()
            if nid in seen:
                raise ValidationError(f"node {nid} reached twice")
            seen.add(nid)
            node = self.nodes[nid]
            if node.id != nid:
                raise ValidationError(f"node {nid} has inconsistent id field {node.id}")
            children = [c for c in (node.left, node.right) if c is not None]
            if len(children) == 1:
                raise ValidationError(f"node {nid} has exactly one child; tree must be binary")
            for child in children:
                if child not in self.nodes:
                    raise ValidationError(f"node {nid} points at missing child {child}")
                cnode = self.nodes[child]
                if cnode.parent != nid:
                    raise ValidationError(f"child {child} does not point back at parent {nid}")
                if cnode.depth != node.depth + 1:
                    raise ValidationError(f"child {child} has depth {cnode.depth}, expected {node.depth + 1}")
                if cnode.depth > self.max_depth:
                    raise ValidationError(f"node {child} exceeds max depth {self.max_depth}")
                queue.append(child)
        if seen != set(self.nodes):
            raise ValidationError("tree contains unreachable nodes")
        if max_leaves is not None and len(self.leaves()) > max_leaves:
            raise ValidationError(f"tree has {len(self.leaves())} leaves, budget is {max_leaves}")

    def to_adjacency(self) -> list[list]:
        return [
            [n.id, n.parent, n.left, n.right, n.depth]
            for n in (self.nodes[i] for i in sorted(self.nodes))
        ]

    @classmethod
    def from_adjacency(cls, rows: list[list], max_depth: int) -> "TreeTopology":
        nodes = {int(r[0]): NodeRecord(int(r[0]), _opt(r[1]), _opt(r[2]), _opt(r[3]), int(r[4])) for r in rows}
        topo = cls(nodes, max_depth)
        topo.validate()
        return topo

    def dump(self) -> str:
        """Debug format: one line per node, ``id parent depth kind``."""
        lines = []
        for nid in self.iter_ids():
            node = self.nodes[nid]
            kind = "leaf" if node.is_leaf else ("root" if nid == ROOT_ID else "internal")
            parent = "-" if node.parent is None else str(node.parent)
            lines.append(f"{nid} {parent} {node.depth} {kind}")
        return "\n".join(lines)


def _opt(v) -> int | None:
    return None if v is None else int(v)


def _relink_children(nodes: dict[int, NodeRecord], new_id: int, old_id: int) -> None:
    node = nodes[new_id]
    for child_id in (node.left, node.right):
        if child_id is not None:
            nodes[child_id] = replace(nodes[child_id], parent=new_id)


def _reset_depths(nodes: dict[int, NodeRecord]) -> None:
    if ROOT_ID not in nodes:
        return
    queue = [(ROOT_ID, 0)]
    while queue:
        nid, depth = queue.pop()
        nodes[nid] = replace(nodes[nid], depth=depth)
        node = nodes[nid]
        for child in (node.left, node.right):
            if child is not None:
                queue.append((child, depth + 1))
