"""SWC morphology trees, reconstruction distances, and a skeleton tracer.

Each SWC record has seven whitespace-separated fields::

    id type x y z radius parent

with ``parent == -1`` for roots and ``#`` starting a comment line. Coordinates
here are voxel units with x = column, y = row, z = slice.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components, minimum_spanning_tree
from scipy.spatial import cKDTree

from .errors import EmptyTraceError, SwcParseError


@dataclass(frozen=True)
class SwcNode:
    id: int
    type: int
    x: float
    y: float
    z: float
    radius: float
    parent: int


class SwcTree:
    """Validated, immutable list of SWC nodes (file order kept)."""

    def __init__(self, nodes, comments=()):
        self.nodes = tuple(nodes)
        self.comments = tuple(comments)
        lines = list(range(1, len(self.nodes) + 1))
        _validate(self.nodes, lines)
        self._index = {n.id: i for i, n in enumerate(self.nodes)}

    def __len__(self):
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)

    def __eq__(self, other):
        return isinstance(other, SwcTree) and self.nodes == other.nodes

    def __repr__(self):
        return f"SwcTree({len(self.nodes)} nodes, {len(self.roots())} roots)"

    @property
    def xyz(self):
        return np.array([(n.x, n.y, n.z) for n in self.nodes], dtype=np.float64).reshape(-1, 3)

    @property
    def radii(self):
        return np.array([n.radius for n in self.nodes], dtype=np.float64)

    def node(self, nid):
        return self.nodes[self._index[nid]]

    def roots(self):
        return [n for n in self.nodes if n.parent == -1]

    def edges(self):
        """(parent_index, child_index) pairs."""
        return [(self._index[n.parent], i) for i, n in enumerate(self.nodes) if n.parent != -1]

    def children(self):
        kids = {n.id: [] for n in self.nodes}
        for n in self.nodes:
            if n.parent != -1:
                kids[n.parent].append(n.id)
        return kids

    def total_length(self):
        xyz = self.xyz
        return float(sum(np.linalg.norm(xyz[c] - xyz[p]) for p, c in self.edges()))

    def translated(self, dx, dy, dz):
        return SwcTree([SwcNode(n.id, n.type, n.x + dx, n.y + dy, n.z + dz, n.radius, n.parent)
                        for n in self.nodes], self.comments)


def _validate(nodes, lines):
    seen = {}
    for n, ln in zip(nodes, lines):
        if n.id in seen:
            raise SwcParseError(f"duplicate id {n.id} (first defined on line {seen[n.id]})", ln)
        seen[n.id] = ln
    if nodes and not any(n.parent == -1 for n in nodes):
        raise SwcParseError("tree has no root (parent -1)", lines[0])
    parent = {n.id: n.parent for n in nodes}
    for n, ln in zip(nodes, lines):
        if n.parent != -1 and n.parent not in parent:
            raise SwcParseError(f"parent {n.parent} of node {n.id} does not exist", ln)
    line_of = dict(zip((n.id for n in nodes), lines))
    state = {}
    for n in nodes:
        path = []
        cur = n.id
        while cur != -1 and cur not in state:
            state[cur] = 1
            path.append(cur)
            cur = parent[cur]
        if cur != -1 and state[cur] == 1 and cur in path:
            raise SwcParseError(f"cycle through node {cur}", line_of[cur])
        for p in path:
            state[p] = 2


def parse_swc(text: str) -> SwcTree:
    nodes, lines, comments = [], [], []
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            comments.append(line)
            continue
        fields = line.split()
        if len(fields) != 7:
            raise SwcParseError(f"expected 7 fields, got {len(fields)}", ln)
        try:
            nid, typ, parent = int(fields[0]), int(fields[1]), int(fields[6])
            x, y, z, r = (float(f) for f in fields[2:6])
        except ValueError as e:
            raise SwcParseError(f"malformed field ({e})", ln) from None
        if not all(math.isfinite(v) for v in (x, y, z, r)):
            raise SwcParseError("non-finite coordinate or radius", ln)
        if parent < -1:
            raise SwcParseError(f"invalid parent id {parent}", ln)
        nodes.append(SwcNode(nid, typ, x, y, z, r, parent))
        lines.append(ln)
    _validate(nodes, lines)
    tree = SwcTree.__new__(SwcTree)
    tree.nodes = tuple(nodes)
    tree.comments = tuple(comments)
    tree._index = {n.id: i for i, n in enumerate(nodes)}
    return tree


def _num(v: float) -> str:
    s = repr(float(v))
    return s[:-2] if s.endswith(".0") else s


def write_swc(tree: SwcTree) -> str:
    """Canonical text: comments first, then single-space records, trailing newline."""
    out = list(tree.comments)
    for n in tree.nodes:
        out.append(f"{n.id} {n.type} {_num(n.x)} {_num(n.y)} {_num(n.z)} {_num(n.radius)} {n.parent}")
    return "\n".join(out) + "\n"


def read_swc(path) -> SwcTree:
    with open(path, encoding="utf-8") as fh:
        return parse_swc(fh.read())


def save_swc(path, tree: SwcTree) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(write_swc(tree))


def resample(tree: SwcTree, step: float = 1.0) -> SwcTree:
    """Subdivide every edge into equal pieces no longer than ``step``."""
    if step <= 0:
        raise ValueError("step must be positive")
    next_id = max((n.id for n in tree.nodes), default=0) + 1
    out = []
    for n in tree.nodes:
        if n.parent == -1:
            out.append(n)
            continue
        p = tree.node(n.parent)
        length = math.dist((p.x, p.y, p.z), (n.x, n.y, n.z))
        pieces = max(1, math.ceil(length / step - 1e-9))
        prev = p.id
        for k in range(1, pieces):
            t = k / pieces
            out.append(SwcNode(next_id, n.type,
                               p.x + t * (n.x - p.x), p.y + t * (n.y - p.y), p.z + t * (n.z - p.z),
                               p.radius + t * (n.radius - p.radius), prev))
            prev = next_id
            next_id += 1
        out.append(SwcNode(n.id, n.type, n.x, n.y, n.z, n.radius, prev))
    return SwcTree(out, tree.comments)


@dataclass(frozen=True)
class NeuronDistance:
    esa: float
    dsa: float
    pds: float
    threshold: float

    def __iter__(self):
        return iter((self.esa, self.dsa, self.pds))


def neuron_distance(a: SwcTree, b: SwcTree, threshold=2.0, step=1.0) -> NeuronDistance:
    """Bidirectional nearest-node distances between two trees after resampling.

    ESA is the mean over the pooled distances, DSA the mean over those above
    ``threshold`` (0 when there are none), PDS the fraction above ``threshold``.
    """
    if len(a) == 0 or len(b) == 0:
        raise ValueError("neuron_distance needs two non-empty trees")
    pa = resample(a, step).xyz
    pb = resample(b, step).xyz
    d = np.concatenate([cKDTree(pb).query(pa)[0], cKDTree(pa).query(pb)[0]])
    far = d[d > threshold]
    dsa = float(far.mean()) if far.size else 0.0
    return NeuronDistance(float(d.mean()), dsa, far.size / d.size, float(threshold))


# ---- tracing ---------------------------------------------------------------

_OFFSETS = np.array([(dz, dy, dx) for dz in (-1, 0, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1)
                     if (dz, dy, dx) > (0, 0, 0)])


def _skeleton(mask):
    from skimage.morphology import skeletonize

    return skeletonize(mask.astype(np.uint8)).astype(bool)


def trace(prob, binarize=0.5, prune_len=5) -> SwcTree:
    """Reconstruct a tree from a probability volume.

    Skeleton voxels of the binarized mask become graph nodes joined to their
    26-neighbours; a minimum spanning tree of the component holding the
    widest voxel is rooted there, short terminal branches are pruned and
    radii come from the Euclidean distance transform.
    """
    prob = np.asarray(prob)
    mask = prob >= binarize
    if not mask.any():
        raise EmptyTraceError("no foreground voxels at the given threshold")
    dist = ndimage.distance_transform_edt(mask)
    skel = _skeleton(mask)
    if not skel.any():
        skel = dist == dist.max()
    pts = np.argwhere(skel)
    n = len(pts)
    lookup = -np.ones(mask.shape, dtype=np.int64)
    lookup[tuple(pts.T)] = np.arange(n)

    rows, cols, wts = [], [], []
    shape = np.array(mask.shape)
    for off in _OFFSETS:
        nb = pts + off
        ok = np.all((nb >= 0) & (nb < shape), axis=1)
        j = np.full(n, -1)
        j[ok] = lookup[tuple(nb[ok].T)]
        hit = j >= 0
        rows.append(np.nonzero(hit)[0])
        cols.append(j[hit])
        wts.append(np.full(hit.sum(), float(np.linalg.norm(off))))
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    wts = np.concatenate(wts)
    graph = coo_matrix((wts, (rows, cols)), shape=(n, n)).tocsr()

    radius = dist[tuple(pts.T)]
    root = int(np.lexsort((np.arange(n), -radius))[0])
    _, comp = connected_components(graph, directed=False)
    keep = np.nonzero(comp == comp[root])[0]
    sub = graph[keep][:, keep]
    mst = minimum_spanning_tree(sub)
    mst = (mst + mst.T).tocsr()
    local_root = int(np.nonzero(keep == root)[0][0])

    parent = {local_root: -1}
    order = [local_root]
    queue = deque([local_root])
    while queue:
        u = queue.popleft()
        for v in sorted(mst.indices[mst.indptr[u]:mst.indptr[u + 1]]):
            if v not in parent:
                parent[v] = u
                order.append(v)
                queue.append(v)

    parent = _prune(parent, order, pts[keep], prune_len)
    kept = [u for u in order if u in parent]
    ids = {u: i + 1 for i, u in enumerate(kept)}
    nodes = []
    for u in kept:
        z, y, x = pts[keep[u]]
        p = parent[u]
        nodes.append(SwcNode(ids[u], 3 if p != -1 else 1, float(x), float(y), float(z),
                             float(radius[keep[u]]), ids[p] if p != -1 else -1))
    return SwcTree(nodes)


def _prune(parent, order, pts, prune_len):
    """Drop terminal branches whose path length to a branch point is below ``prune_len``."""
    kids = {u: [] for u in parent}
    for u, p in parent.items():
        if p != -1:
            kids[p].append(u)
    removed = set()
    for leaf in order:
        if kids[leaf]:
            continue
        path = [leaf]
        length = 0.0
        cur = leaf
        while parent[cur] != -1 and len(kids[parent[cur]]) == 1:
            length += float(np.linalg.norm(pts[cur] - pts[parent[cur]]))
            cur = parent[cur]
            path.append(cur)
        if parent[cur] == -1:
            continue  # reaches the root: this is the trunk
        length += float(np.linalg.norm(pts[cur] - pts[parent[cur]]))
        if length < prune_len:
            removed.update(path)
    return {u: p for u, p in parent.items() if u not in removed}
