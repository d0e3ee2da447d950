"""Max-flow / min-cut on capacitated graphs with terminal links.

The solver is a Boykov-Kolmogorov augmenting-path search: two search trees
grown from the terminals and reused between augmentations, which suits the
shallow, highly regular graphs that image grids produce.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import DataError

INF = 1e18

SOURCE = 1
SINK = 0

_FREE, _S, _T = 0, 1, 2
_NONE, _TERMINAL, _ORPHAN = -1, -2, -3


@dataclass(frozen=True, eq=False)
class FlowNetwork:
    """``arcs`` is an (m, 2) array of node pairs with capacities ``cap_uv``
    (u->v) and ``cap_vu`` (v->u); ``to_source`` / ``to_sink`` are the
    terminal capacities. ``INF`` marks a hard clamp."""

    n_nodes: int
    arcs: np.ndarray
    cap_uv: np.ndarray
    cap_vu: np.ndarray
    to_source: np.ndarray
    to_sink: np.ndarray

    def __post_init__(self):
        arcs = np.asarray(self.arcs, dtype=np.int64).reshape(-1, 2)
        fields = {
            "arcs": arcs,
            "cap_uv": np.asarray(self.cap_uv, dtype=np.float64).ravel(),
            "cap_vu": np.asarray(self.cap_vu, dtype=np.float64).ravel(),
            "to_source": np.asarray(self.to_source, dtype=np.float64).ravel(),
            "to_sink": np.asarray(self.to_sink, dtype=np.float64).ravel(),
        }
        for k, v in fields.items():
            object.__setattr__(self, k, v)
        n = int(self.n_nodes)
        if len(self.to_source) != n or len(self.to_sink) != n:
            raise DataError("terminal capacity arrays must have one entry per node")
        if len(self.cap_uv) != len(arcs) or len(self.cap_vu) != len(arcs):
            raise DataError("one capacity pair per arc required")
        if len(arcs) and (arcs.min() < 0 or arcs.max() >= n):
            raise DataError("arc endpoint out of range")
        for k in ("cap_uv", "cap_vu", "to_source", "to_sink"):
            v = getattr(self, k)
            if (v < 0).any() or np.isnan(v).any():
                raise DataError(f"{k} must be non-negative")
        object.__setattr__(self, "n_nodes", n)

    @property
    def n_arcs(self) -> int:
        return len(self.arcs)

    def cut_value(self, side: np.ndarray) -> float:
        """Capacity of the s/t cut given by ``side`` (1 = source side)."""
        s = np.asarray(side).astype(bool)
        val = self.to_sink[s].sum() + self.to_source[~s].sum()
        u, v = self.arcs[:, 0], self.arcs[:, 1]
        val += self.cap_uv[s[u] & ~s[v]].sum() + self.cap_vu[s[v] & ~s[u]].sum()
        return float(val)


@njit(cache=True, nogil=True)
def _bk_maxflow(n, first, head, sister, rcap, tr):
    tree = np.zeros(n, np.int8)
    parent = np.full(n, _NONE, np.int64)
    queue = np.empty(n + 1, np.int64)
    in_queue = np.zeros(n, np.bool_)
    qh = 0
    qt = 0
    qcap = n + 1
    orphans = np.empty(n + 1, np.int64)
    flow = 0.0

    for v in range(n):
        if tr[v] > 0:
            tree[v] = _S
            parent[v] = _TERMINAL
        elif tr[v] < 0:
            tree[v] = _T
            parent[v] = _TERMINAL
        if tree[v] != _FREE:
            queue[qt] = v
            qt = (qt + 1) % qcap
            in_queue[v] = True

    while qh != qt:
        v = queue[qh]
        qh = (qh + 1) % qcap
        in_queue[v] = False
        if tree[v] == _FREE:
            continue
        # --- growth
        bridge = -1
        for a in range(first[v], first[v + 1]):
            w = head[a]
            if tree[v] == _S:
                if rcap[a] <= 0:
                    continue
                if tree[w] == _FREE:
                    tree[w] = _S
                    parent[w] = sister[a]
                    if not in_queue[w]:
                        queue[qt] = w
                        qt = (qt + 1) % qcap
                        in_queue[w] = True
                elif tree[w] == _T:
                    bridge = a
                    break
            else:
                if rcap[sister[a]] <= 0:
                    continue
                if tree[w] == _FREE:
                    tree[w] = _T
                    parent[w] = sister[a]
                    if not in_queue[w]:
                        queue[qt] = w
                        qt = (qt + 1) % qcap
                        in_queue[w] = True
                elif tree[w] == _S:
                    bridge = sister[a]
                    break
        if bridge < 0:
            continue

        # --- augmentation along S-root ... u -> w ... T-root
        u = head[sister[bridge]]
        w = head[bridge]
        b = rcap[bridge]
        x = u
        while parent[x] != _TERMINAL:
            a = parent[x]
            if rcap[sister[a]] < b:
                b = rcap[sister[a]]
            x = head[a]
        if tr[x] < b:
            b = tr[x]
        x = w
        while parent[x] != _TERMINAL:
            a = parent[x]
            if rcap[a] < b:
                b = rcap[a]
            x = head[a]
        if -tr[x] < b:
            b = -tr[x]

        rcap[bridge] -= b
        rcap[sister[bridge]] += b
        no = 0
        x = u
        while parent[x] != _TERMINAL:
            a = parent[x]
            rcap[a] += b
            rcap[sister[a]] -= b
            if rcap[sister[a]] <= 0:
                parent[x] = _ORPHAN
                orphans[no] = x
                no += 1
            x = head[a]
        tr[x] -= b
        if tr[x] <= 0:
            tr[x] = 0.0
            parent[x] = _ORPHAN
            orphans[no] = x
            no += 1
        x = w
        while parent[x] != _TERMINAL:
            a = parent[x]
            rcap[sister[a]] += b
            rcap[a] -= b
            if rcap[a] <= 0:
                parent[x] = _ORPHAN
                orphans[no] = x
                no += 1
            x = head[a]
        tr[x] += b
        if tr[x] >= 0:
            tr[x] = 0.0
            parent[x] = _ORPHAN
            orphans[no] = x
            no += 1
        flow += b

        # --- adoption
        while no > 0:
            no -= 1
            x = orphans[no]
            t = tree[x]
            found = -1
            for a in range(first[x], first[x + 1]):
                y = head[a]
                if tree[y] != t:
                    continue
                if t == _S:
                    if rcap[sister[a]] <= 0:
                        continue
                else:
                    if rcap[a] <= 0:
                        continue
                # y must trace back to a terminal without meeting an orphan
                z = y
                ok = True
                while True:
                    pz = parent[z]
                    if pz == _TERMINAL:
                        break
                    if pz == _ORPHAN or pz == _NONE:
                        ok = False
                        break
                    z = head[pz]
                if ok:
                    found = a
                    break
            if found >= 0:
                parent[x] = found
                continue
            for a in range(first[x], first[x + 1]):
                y = head[a]
                if tree[y] != t:
                    continue
                if t == _S:
                    active = rcap[sister[a]] > 0
                else:
                    active = rcap[a] > 0
                if active and not in_queue[y]:
                    queue[qt] = y
                    qt = (qt + 1) % qcap
                    in_queue[y] = True
                pa = parent[y]
                if pa >= 0 and head[pa] == x:
                    parent[y] = _ORPHAN
                    orphans[no] = y
                    no += 1
            tree[x] = _FREE
            parent[x] = _NONE

        if tree[v] != _FREE and not in_queue[v]:
            queue[qt] = v
            qt = (qt + 1) % qcap
            in_queue[v] = True

    return flow, tree


def max_flow(net: FlowNetwork) -> tuple[float, np.ndarray]:
    """Solve max-flow; returns (flow value, side per node) with 1 = source side."""
    flow, side, _, _ = solve(net)
    return flow, side


def solve(net: FlowNetwork):
    """Max-flow with residual accounting.

    Returns ``(flow, side, arc_flow, terminal_excess)`` where ``arc_flow[i]``
    is the net flow along arc i from its first to its second node and
    ``terminal_excess[v]`` is the net flow v receives from the terminals
    beyond the trivially saturated source->v->sink part.
    """
    n = net.n_nodes
    hard_s = net.to_source >= INF
    hard_t = net.to_sink >= INF
    if (hard_s & hard_t).any():
        raise DataError("contradictory clamp: node tied to both terminals")
    m = net.n_arcs
    u, v = net.arcs[:, 0], net.arcs[:, 1]
    tails = np.concatenate([u, v])
    heads = np.concatenate([v, u])
    caps = np.concatenate([net.cap_uv, net.cap_vu])
    order = np.argsort(tails, kind="stable")
    pos = np.empty(2 * m, np.int64)
    pos[order] = np.arange(2 * m)
    partner = np.concatenate([np.arange(m, 2 * m), np.arange(m)])
    head = heads[order].astype(np.int64)
    rcap = caps[order].astype(np.float64)
    sister = pos[partner[order]]
    first = np.zeros(n + 1, np.int64)
    np.cumsum(np.bincount(tails, minlength=n), out=first[1:])

    cs, ct = net.to_source, net.to_sink
    base = float(np.minimum(cs, ct).sum())
    tr0 = (cs - ct).astype(np.float64)
    tr = tr0.copy()
    flow, tree = _bk_maxflow(n, first, head, sister, rcap, tr)
    side = (tree == _S).astype(np.int8)
    arc_flow = net.cap_uv - rcap[pos[:m]]
    return base + float(flow), side, arc_flow, tr0 - tr


def build_grid(dims, unary_source, unary_sink, pairwise_weights=None, connectivity: int = 8) -> FlowNetwork:
    """Grid network with one node per pixel (row-major over (ny, nx)).

    ``unary_source`` / ``unary_sink`` are the t-link capacities. Pairwise
    weights are either a scalar, or a dict mapping each neighbour offset
    ``(dy, dx)`` to an (ny, nx) array holding the weight of the link from
    pixel (y, x) to (y + dy, x + dx).
    """
    if connectivity not in (4, 8):
        raise ValueError("connectivity must be 4 or 8")
    nx, ny = int(dims[0]), int(dims[1])
    us, ut = np.asarray(unary_source, float), np.asarray(unary_sink, float)
    if us.shape != (ny, nx) or ut.shape != (ny, nx):
        raise DataError(f"unary shape {us.shape}/{ut.shape} does not match dims {(ny, nx)}")
    idx = np.arange(nx * ny).reshape(ny, nx)
    arcs, caps = [], []
    for dy, dx in neighbour_offsets(connectivity):
        a = idx[: ny - dy, max(0, -dx): nx - max(0, dx)]
        b = idx[dy:, max(0, -dx) + dx: nx - max(0, dx) + dx]
        if pairwise_weights is None:
            w = np.zeros(a.shape)
        elif np.isscalar(pairwise_weights):
            w = np.full(a.shape, float(pairwise_weights))
        else:
            full = np.asarray(pairwise_weights[(dy, dx)], float)
            if full.shape != (ny, nx):
                raise DataError(f"pairwise weights for {(dy, dx)} have shape {full.shape}, expected {(ny, nx)}")
            w = full[: ny - dy, max(0, -dx): nx - max(0, dx)]
        arcs.append(np.stack([a.ravel(), b.ravel()], axis=1))
        caps.append(w.ravel())
    arcs = np.concatenate(arcs) if arcs else np.zeros((0, 2), int)
    caps = np.concatenate(caps) if caps else np.zeros(0)
    return FlowNetwork(nx * ny, arcs, caps, caps, us.ravel(), ut.ravel())


def neighbour_offsets(connectivity: int) -> list[tuple[int, int]]:
    """Forward half of the neighbourhood, so every unordered pair appears once."""
    if connectivity == 4:
        return [(0, 1), (1, 0)]
    return [(0, 1), (1, 0), (1, 1), (1, -1)]
