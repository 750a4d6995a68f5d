"""Search tree over system states with exact metric nearest-neighbor queries.

The index answers nearest / radius queries under ``system.distance``.  Below
``linear_threshold`` active points it brute-forces the metric over the active
set.  Above it, candidates come from a k-d tree built on a metric-consistent
embedding and are re-ranked with the true metric, so both code paths return
identical answers (same node, same distance, same lowest-id tie-break).

Embedding: linear components map to w*x; wrapped angles map to the pair
(w*sin, w*cos); a unit quaternion maps to w*q with a second sign-flipped row
per point so that antipodal quaternions (the same rotation) stay close.  With
``e`` the embedding distance and ``t`` the true metric, e <= t <= kappa*e
componentwise, where kappa = pi/2 for an angle pair and pi/sqrt(2) for the
quaternion chord, which yields an exact candidate ball of radius kappa*e_nn.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.spatial import cKDTree

from ..errors import ContractViolation
from ..systems.base import TWO_PI, System, Trajectory


def metric_rows(system: System, x, pts):
    """distance(x, pts[i]) for every row, with a fixed accumulation order.

    numpy's axis reduction can associate differently depending on how many
    rows are evaluated at once, which shifts results by an ulp and would make
    nearest-neighbor answers depend on the candidate subset.  Accumulating
    column by column keeps each row's value independent of the batch, so the
    brute-force and k-d query paths rank candidates identically.
    """
    x = np.asarray(x, dtype=float)
    pts = np.asarray(pts, dtype=float)
    w = system.distance_weights
    q0 = system.quat_block
    acc = np.zeros(pts.shape[0])
    for j in range(system.state_dim):
        if q0 is not None and q0 <= j < q0 + 4:
            continue
        c = x[j] - pts[:, j]
        if system.angular_mask[j]:
            c = np.remainder(c + math.pi, TWO_PI) - math.pi
        c = w[j] * c
        acc += c * c
    if q0 is not None:
        dm = np.zeros(pts.shape[0])
        dp = np.zeros(pts.shape[0])
        for j in range(q0, q0 + 4):
            cm = x[j] - pts[:, j]
            dm += cm * cm
            cp = x[j] + pts[:, j]
            dp += cp * cp
        half = 0.5 * np.sqrt(np.minimum(dm, dp))
        ang = 4.0 * np.arcsin(np.clip(half, 0.0, 1.0))
        c = w[q0] * ang
        acc += c * c
    return np.sqrt(acc)


class MetricIndex:
    """Exact nearest-neighbor structure under a system's metric."""

    def __init__(self, system: System, linear_threshold: int = 2000):
        self.system = system
        self.linear_threshold = int(linear_threshold)
        d = system.state_dim
        quat_cols = np.zeros(d, dtype=bool)
        if system.quat_block is not None:
            quat_cols[system.quat_block:system.quat_block + 4] = True
        self._lin_cols = np.flatnonzero(~system.angular_mask & ~quat_cols)
        self._ang_cols = np.flatnonzero(system.angular_mask)
        self._quat0 = system.quat_block
        w = system.distance_weights
        self._w_lin = w[self._lin_cols]
        self._w_ang = w[self._ang_cols]
        kappa = 1.0
        if len(self._ang_cols):
            kappa = max(kappa, math.pi / 2.0)
        if self._quat0 is not None:
            kappa = max(kappa, math.pi / math.sqrt(2.0))
        self._kappa = kappa
        self._edim = len(self._lin_cols) + 2 * len(self._ang_cols) + \
            (4 if self._quat0 is not None else 0)

        self._cap = 256
        self._pts = np.empty((self._cap, d))
        self._emb = np.empty((self._cap, self._edim))
        self._act = np.zeros(self._cap, dtype=bool)
        self._n = 0
        self._n_active = 0

        # lazily rebuilt k-d tree over the embedding of nodes [0, covered)
        # that were active at build time; two rows per node when a quaternion
        # block is present (the +q and -q images)
        self._tree = None
        self._entry_node = None
        self._covered = 0
        self._stale = 0

    def __len__(self) -> int:
        return self._n

    @property
    def n_active(self) -> int:
        return self._n_active

    def state(self, i: int):
        self._check_id(i)
        return self._pts[i]

    def is_active(self, i: int) -> bool:
        self._check_id(i)
        return bool(self._act[i])

    def _check_id(self, i):
        if not 0 <= i < self._n:
            raise ContractViolation(f"node id {i} out of range (n={self._n})")

    def _embed(self, pts):
        """Map (k, d) states to (k, edim) embedding rows (+q image)."""
        parts = []
        if len(self._lin_cols):
            parts.append(self._w_lin * pts[:, self._lin_cols])
        if len(self._ang_cols):
            a = pts[:, self._ang_cols]
            parts.append(self._w_ang * np.sin(a))
            parts.append(self._w_ang * np.cos(a))
        if self._quat0 is not None:
            wq = self.system.distance_weights[self._quat0]
            parts.append(wq * pts[:, self._quat0:self._quat0 + 4])
        return parts[0].copy() if len(parts) == 1 else np.concatenate(parts, axis=1)

    def add(self, state) -> int:
        state = np.asarray(state, dtype=float)
        if state.shape != (self.system.state_dim,):
            raise ContractViolation(f"bad state shape {state.shape}")
        if self._n == self._cap:
            self._cap *= 2
            for name in ("_pts", "_emb"):
                buf = np.empty((self._cap,) + getattr(self, name).shape[1:])
                buf[:self._n] = getattr(self, name)[:self._n]
                setattr(self, name, buf)
            act = np.zeros(self._cap, dtype=bool)
            act[:self._n] = self._act[:self._n]
            self._act = act
        i = self._n
        self._pts[i] = state
        self._emb[i] = self._embed(state[None, :])[0]
        self._act[i] = True
        self._n += 1
        self._n_active += 1
        return i

    def deactivate(self, i: int):
        self._check_id(i)
        if self._act[i]:
            self._act[i] = False
            self._n_active -= 1
            if i < self._covered:
                self._stale += 1

    # -- queries ------------------------------------------------------------

    def _use_tree(self) -> bool:
        return self._n_active >= self.linear_threshold

    def _ensure_tree(self):
        pending = self._n - self._covered
        if self._tree is not None and pending <= max(256, self._covered // 4) \
                and self._stale <= self._covered // 2:
            return
        ids = np.flatnonzero(self._act[:self._n])
        emb = self._emb[ids]
        if self._quat0 is not None:
            flipped = emb.copy()
            flipped[:, -4:] *= -1.0
            entries = np.concatenate([emb, flipped], axis=0)
            self._entry_node = np.concatenate([ids, ids])
        else:
            entries = emb
            self._entry_node = ids
        self._tree = cKDTree(entries)
        self._covered = self._n
        self._stale = 0

    def _rank(self, x, ids):
        """Exact re-rank: (best id, best distance) with lowest-id ties."""
        dd = metric_rows(self.system, x, self._pts[ids])
        j = np.lexsort((ids, dd))[0]
        return int(ids[j]), float(dd[j])

    def nearest(self, x):
        """Active node closest to x under the system metric: (id, distance)."""
        if self._n_active == 0:
            raise ContractViolation("nearest() on an index with no active points")
        x = np.asarray(x, dtype=float)
        if not self._use_tree():
            ids = np.flatnonzero(self._act[:self._n])
            return self._rank(x, ids)

        self._ensure_tree()
        pend = np.flatnonzero(self._act[self._covered:self._n]) + self._covered
        bound = np.inf
        if len(pend):
            bound = float(metric_rows(self.system, x, self._pts[pend]).min())
        xq = self._embed(x[None, :])[0]
        tree_ids = np.empty(0, dtype=int)
        n_entries = self._tree.n
        if n_entries and self._entry_node is not None:
            # smallest embedding distance among still-active tree nodes: walk
            # the k-NN list outward until one active node appears
            k = 1
            r_emb = None
            while True:
                de, ie = self._tree.query(xq, k=min(k, n_entries))
                de = np.atleast_1d(de)
                ie = np.atleast_1d(ie)
                for dist_e, ent in zip(de, ie):
                    if self._act[self._entry_node[ent]]:
                        r_emb = float(dist_e)
                        break
                if r_emb is not None or k >= n_entries:
                    break
                k *= 2
            if r_emb is not None:
                bound = min(bound, self._kappa * r_emb)
                ents = self._tree.query_ball_point(xq, bound * (1.0 + 1e-12))
                cand = np.unique(self._entry_node[np.asarray(ents, dtype=int)])
                tree_ids = cand[self._act[cand]]
        ids = np.concatenate([tree_ids, pend])
        return self._rank(x, ids)

    def nearest_within(self, x, radius: float):
        """(id, distance) of the closest active node within radius, or None."""
        ids, dd = self.within(x, radius)
        if not len(ids):
            return None
        j = np.lexsort((ids, dd))[0]
        return int(ids[j]), float(dd[j])

    def within(self, x, radius: float):
        """Active nodes with true distance <= radius: (ids ascending, distances)."""
        x = np.asarray(x, dtype=float)
        if self._n_active == 0:
            return np.empty(0, dtype=int), np.empty(0)
        if not self._use_tree():
            ids = np.flatnonzero(self._act[:self._n])
        else:
            self._ensure_tree()
            pend = np.flatnonzero(self._act[self._covered:self._n]) + self._covered
            tree_ids = np.empty(0, dtype=int)
            if self._tree.n:
                xq = self._embed(x[None, :])[0]
                ents = self._tree.query_ball_point(xq, radius * (1.0 + 1e-12))
                cand = np.unique(self._entry_node[np.asarray(ents, dtype=int)])
                tree_ids = cand[self._act[cand]]
            ids = np.concatenate([tree_ids, pend])
            ids.sort()
        if not len(ids):
            return np.empty(0, dtype=int), np.empty(0)
        dd = metric_rows(self.system, x, self._pts[ids])
        keep = dd <= radius
        return ids[keep], dd[keep]


class SearchTree:
    """Kinodynamic search tree: nodes carry full piecewise-control edges.

    A node is *active* while it is selectable (present in the NN index) and
    *removed* once physically pruned; removed implies inactive.  The root is
    node 0, never deactivated (its cost 0 cannot be dominated).
    """

    def __init__(self, system: System, root_state, linear_threshold: int = 2000):
        self.system = system
        self.index = MetricIndex(system, linear_threshold)
        root = np.asarray(root_state, dtype=float).copy()
        self.index.add(root)
        self.parent: list = [None]
        self.edge: list = [None]           # Trajectory from parent, None at root
        self.cost: list = [0.0]            # seconds from root
        self.children: list = [0]          # live child count
        self.removed: list = [False]

    def __len__(self) -> int:
        return len(self.parent)

    @property
    def n_nodes(self) -> int:
        """Live (not pruned) node count."""
        return sum(1 for r in self.removed if not r)

    @property
    def n_active(self) -> int:
        return self.index.n_active

    def state(self, i: int):
        return self.index.state(i)

    def is_live(self, i: int) -> bool:
        return 0 <= i < len(self.parent) and not self.removed[i]

    def add_child(self, parent_id: int, traj: Trajectory) -> int:
        if not self.is_live(parent_id):
            raise ContractViolation(f"parent {parent_id} is not a live node")
        if traj.num_steps < 1:
            raise ContractViolation("edge trajectory must have at least one segment")
        if not np.array_equal(traj.states[0], self.state(parent_id)):
            raise ContractViolation("edge does not start at the parent state")
        i = self.index.add(traj.terminal_state.copy())
        self.parent.append(parent_id)
        self.edge.append(traj)
        self.cost.append(self.cost[parent_id] + traj.total_duration)
        self.children.append(0)
        self.removed.append(False)
        self.children[parent_id] += 1
        return i

    def deactivate(self, i: int):
        self.index.deactivate(i)

    def prune_orphans(self, i: int) -> int:
        """Remove node i and its childless inactive ancestors; returns count."""
        pruned = 0
        while i is not None and self.parent[i] is not None \
                and not self.removed[i] and self.children[i] == 0 \
                and not self.index.is_active(i):
            self.removed[i] = True
            p = self.parent[i]
            self.children[p] -= 1
            pruned += 1
            i = p
        return pruned

    def nearest(self, x) -> int:
        return self.index.nearest(x)[0]

    def best_near(self, x, radius: float) -> int:
        """Lowest-cost active node within radius; nearest active as fallback."""
        ids, _ = self.index.within(x, radius)
        if len(ids):
            return min(ids, key=lambda i: (self.cost[i], i))
        return self.nearest(x)

    def random_active(self, rng: np.random.Generator) -> int:
        ids = np.flatnonzero(self.index._act[:len(self.parent)])
        if not len(ids):
            raise ContractViolation("tree has no active nodes")
        return int(ids[int(rng.integers(len(ids)))])

    def path_ids(self, i: int):
        """Node ids root -> i along parent links."""
        if not self.is_live(i):
            raise ContractViolation(f"node {i} is not in the tree")
        chain = []
        while i is not None:
            chain.append(i)
            i = self.parent[i]
        return chain[::-1]


class WitnessSet:
    """Sparse witnesses: each holds the best-cost node ever offered nearby.

    ``offer`` implements the dominance rule: a candidate within ``radius`` of
    an existing witness is accepted only if it beats that witness's
    representative cost; otherwise a new witness is created at the candidate.
    """

    def __init__(self, system: System, radius: float, linear_threshold: int = 2000):
        if radius <= 0:
            raise ContractViolation("witness radius must be positive")
        self.radius = float(radius)
        self.index = MetricIndex(system, linear_threshold)
        self.rep: list = []        # node id or None
        self.rep_cost: list = []   # inf until a representative is assigned

    def __len__(self) -> int:
        return len(self.rep)

    def locate(self, x) -> int:
        """Witness in charge of x: nearest within radius, else a new one at x."""
        if len(self.rep):
            hit = self.index.nearest_within(x, self.radius)
            if hit is not None:
                return hit[0]
        w = self.index.add(np.asarray(x, dtype=float).copy())
        self.rep.append(None)
        self.rep_cost.append(math.inf)
        return w

    def dominated(self, w: int, cost: float) -> bool:
        return cost >= self.rep_cost[w]

    def assign(self, w: int, node: int, cost: float):
        """Install a new representative; returns the displaced node id or None."""
        old = self.rep[w]
        self.rep[w] = node
        self.rep_cost[w] = cost
        return old


def replay_node_state(tree: SearchTree, i: int):
    """Re-propagate every edge root -> i; the result should match tree.state(i)."""
    chain = tree.path_ids(i)
    x = tree.state(chain[0]).copy()
    for j in chain[1:]:
        e = tree.edge[j]
        for k in range(e.num_steps):
            x = tree.system.propagate(x, e.controls[k], float(e.durations[k]))
    return x


def reached(tree: SearchTree, x_goal, goal_radius: float):
    """Minimum-cost active node within goal_radius of x_goal, or None."""
    ids, _ = tree.index.within(np.asarray(x_goal, dtype=float), goal_radius)
    if not len(ids):
        return None
    return min(ids, key=lambda i: (tree.cost[i], i))


def extract_path(tree: SearchTree, goal_node: int) -> Trajectory:
    """Concatenate the edges root -> goal_node into one trajectory."""
    chain = tree.path_ids(goal_node)
    if len(chain) == 1:
        traj = Trajectory.point(tree.state(goal_node),
                                control_dim=tree.system.control_dim)
        return traj
    states = np.concatenate([tree.edge[i].states for i in chain[1:]])
    controls = np.concatenate([tree.edge[i].controls for i in chain[1:]])
    durations = np.concatenate([tree.edge[i].durations for i in chain[1:]])
    return Trajectory(states, controls, durations,
                      tree.state(goal_node).copy())
