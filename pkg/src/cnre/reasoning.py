"""Three-path causal reasoning over user behavior chains.

A (user, item) pair's chain observation (one flag per behavior, from
train edges only) is dispatched to exactly one preference strength:

  - Strong: the target flag is set (complete or skip chains) -> direct
    concatenation of target-behavior user/item embeddings.
  - Medium: >= 2 auxiliary flags -> purchase-confidence gate; below the
    threshold, collaborative retrieval feeds a neural conjunction MLP.
  - Weak: exactly 1 auxiliary flag -> semantic (hypergraph) retrieval
    feeds a neural disjunction MLP, no confidence computed.
  - Default: empty chain -> concatenation of the final cascaded
    embeddings (needed to rank never-touched items).

Every path emits a width-2d mediator for the shared prediction head and
a trace recording each step of the dispatch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.sparse as sp

from . import retrieval, tensorgrad as tg


class PreferenceStrength(Enum):
    STRONG = "strong"
    MEDIUM = "medium"
    WEAK = "weak"
    DEFAULT = "default"


# ordering used by the counterfactual monotonicity checks
STRENGTH_RANK = {
    PreferenceStrength.DEFAULT: 0,
    PreferenceStrength.WEAK: 1,
    PreferenceStrength.MEDIUM: 2,
    PreferenceStrength.STRONG: 3,
}


@dataclass
class ReasoningTrace:
    """Full record of one dispatch decision and its retrievals."""

    flags: tuple
    path: PreferenceStrength
    threshold: float
    behavior: int | None = None          # chain behavior whose embeddings were used
    confidence: float | None = None      # medium path only
    neighbor_ids: list | None = None     # retrieval paths only
    space: str | None = None             # 'collaborative' | 'semantic'
    mediator: np.ndarray | None = None
    score: float | None = None


def observe_chain(train, u, i):
    """One flag per behavior: 1 iff (u, i) is a train edge of that behavior."""
    return tuple(int((u, i) in edges) for edges in train.per_behavior_edges)


def dispatch(flags):
    """Total, deterministic truth table over chain observations."""
    if flags[-1]:
        return PreferenceStrength.STRONG
    n_aux = sum(flags[:-1])
    if n_aux >= 2:
        return PreferenceStrength.MEDIUM
    if n_aux == 1:
        return PreferenceStrength.WEAK
    return PreferenceStrength.DEFAULT


def chain_behavior(flags):
    """Highest-ranked set auxiliary behavior (the chain's final behavior)."""
    aux = [k for k, f in enumerate(flags[:-1]) if f]
    return max(aux) if aux else None


def confidence_score(vec_u, vec_i):
    """Purchase confidence: logistic of the user-item dot product."""
    return float(tg._sigmoid(np.array(float(np.dot(np.ravel(vec_u), np.ravel(vec_i))))))


def strong_mediator(e_u_rows, e_i_rows):
    """f_strong is plain concatenation (width 2d)."""
    return tg.concat_cols([e_u_rows, e_i_rows])


def _logic_mlp(x, params, prefix):
    h = tg.relu(tg.add(tg.matmul(x, params[f"{prefix}_w1"]), params[f"{prefix}_b1"]))
    return tg.add(tg.matmul(h, params[f"{prefix}_w2"]), params[f"{prefix}_b2"])


def conjunction_mediator(e_u_rows, e_i_col_rows, s_col_rows, params):
    """Neural conjunction over (e_u ++ e_i_col ++ S_col)."""
    return _logic_mlp(tg.concat_cols([e_u_rows, e_i_col_rows, s_col_rows]), params, "conj")


def disjunction_mediator(e_u_rows, e_i_sem_rows, s_sem_rows, params):
    """Neural disjunction, structurally identical but independent parameters."""
    return _logic_mlp(tg.concat_cols([e_u_rows, e_i_sem_rows, s_sem_rows]), params, "disj")


@dataclass
class GateSnapshot:
    """Frozen embedding arrays used for gating decisions only.

    Confidence scores and retrieval queries are evaluated on this snapshot
    (the same one the epoch's indices were built from) so that dispatch
    decisions are piecewise constant within a training step; gradients
    still flow through the live cascade tensors.
    """

    per_behavior: list  # dicts with 'e_u', 'e_i', 'e_col_i', 'e_sem_i' arrays

    @classmethod
    def from_cascade(cls, cascade):
        return cls(per_behavior=[
            {"e_u": b.e_u.data.copy(), "e_i": b.e_i.data.copy(),
             "e_col_i": b.e_col_i.data.copy(), "e_sem_i": b.e_sem_i.data.copy()}
            for b in cascade.per_behavior
        ])


def _pooling_matrix(id_lists, n_items):
    """g x N averaging matrix: row p puts 1/len(ids) on each neighbor id."""
    rows, cols, vals = [], [], []
    for p, ids in enumerate(id_lists):
        if not ids:
            continue
        w = 1.0 / len(ids)
        for i in ids:
            rows.append(p)
            cols.append(i)
            vals.append(w)
    return sp.csr_matrix((vals, (rows, cols)), shape=(len(id_lists), n_items))


def reason_batch(users, items, train, cascade, indices, params, tau,
                 n_c=10, disable_rea=False, disable_cnj=False,
                 disable_dsj=False, collect_traces=False, flags_fn=None,
                 gate=None):
    """Route a batch of (u, i) pairs through the reasoner.

    Returns (mediators, traces) where mediators is an (n x 2d) tensor in
    batch order and traces is a list of ReasoningTrace (always built; the
    mediator snapshot inside each trace is filled only when
    collect_traces is True). When a GateSnapshot is given, confidence and
    retrieval queries read it instead of the live cascade values.
    """
    if gate is None:
        gate = GateSnapshot.from_cascade(cascade)
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    n = users.shape[0]
    t_idx = len(train.per_behavior_edges) - 1

    traces = []
    groups = {}  # key -> dict(positions, users, items, id_lists)

    def put(key, pos, u, i, ids=None):
        g = groups.setdefault(key, {"pos": [], "u": [], "i": [], "ids": []})
        g["pos"].append(pos)
        g["u"].append(u)
        g["i"].append(i)
        g["ids"].append(ids)

    for p in range(n):
        u, i = int(users[p]), int(items[p])
        flags = observe_chain(train, u, i) if flags_fn is None else flags_fn(u, i)
        path = PreferenceStrength.DEFAULT if disable_rea else dispatch(flags)
        trace = ReasoningTrace(flags=flags, path=path, threshold=tau)

        if path is PreferenceStrength.STRONG:
            trace.behavior = t_idx
            put(("concat", t_idx), p, u, i)
        elif path is PreferenceStrength.DEFAULT:
            trace.behavior = t_idx
            put(("concat", t_idx), p, u, i)
        elif path is PreferenceStrength.MEDIUM:
            b = chain_behavior(flags)
            trace.behavior = b
            gb = gate.per_behavior[b]
            if disable_cnj:
                put(("concat", b), p, u, i)
            else:
                conf = confidence_score(gb["e_u"][u], gb["e_i"][i])
                trace.confidence = conf
                if conf >= tau:
                    put(("concat", b), p, u, i)
                else:
                    hood = retrieval.query(indices[(b, "col")],
                                           gb["e_col_i"][i], n_c, exclude_id=i)
                    trace.neighbor_ids = list(hood.ids)
                    trace.space = "collaborative"
                    put(("conj", b), p, u, i, hood.ids)
        else:  # WEAK
            b = chain_behavior(flags)
            trace.behavior = b
            gb = gate.per_behavior[b]
            if disable_dsj:
                put(("concat", b), p, u, i)
            else:
                hood = retrieval.query(indices[(b, "sem")],
                                       gb["e_sem_i"][i], n_c, exclude_id=i)
                trace.neighbor_ids = list(hood.ids)
                trace.space = "semantic"
                put(("disj", b), p, u, i, hood.ids)
        traces.append(trace)

    parts = []
    positions = []
    for key in sorted(groups, key=lambda k: (k[0], k[1])):
        g = groups[key]
        kind, b = key
        bundle = cascade.per_behavior[b]
        us = np.array(g["u"], dtype=np.int64)
        its = np.array(g["i"], dtype=np.int64)
        e_u_rows = tg.index_rows(bundle.e_u, us)
        if kind == "concat":
            med = strong_mediator(e_u_rows, tg.index_rows(bundle.e_i, its))
        elif kind == "conj":
            pool = _pooling_matrix(g["ids"], train.num_items)
            s_col = tg.spmm(pool, bundle.e_col_i)
            med = conjunction_mediator(e_u_rows, tg.index_rows(bundle.e_col_i, its),
                                       s_col, params)
        else:  # disj
            pool = _pooling_matrix(g["ids"], train.num_items)
            s_sem = tg.spmm(pool, bundle.e_sem_i)
            med = disjunction_mediator(e_u_rows, tg.index_rows(bundle.e_sem_i, its),
                                       s_sem, params)
        parts.append(med)
        positions.extend(g["pos"])

    stacked = tg.concat_rows(parts) if len(parts) > 1 else parts[0]
    inv = np.empty(n, dtype=np.int64)
    inv[np.array(positions, dtype=np.int64)] = np.arange(n)
    mediators = tg.index_rows(stacked, inv)

    if collect_traces:
        for p, trace in enumerate(traces):
            trace.mediator = mediators.data[p].copy()
    return mediators, traces


def reason(u, i, train, cascade, indices, params, tau, n_c=10, **flags):
    """Single-pair wrapper around reason_batch."""
    mediators, traces = reason_batch([u], [i], train, cascade, indices, params,
                                     tau, n_c=n_c, collect_traces=True, **flags)
    return mediators, traces[0]
