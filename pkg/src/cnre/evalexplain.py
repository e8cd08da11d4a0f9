"""Ranking metrics, analytics, explanation traces and counterfactual edits.

Evaluation follows the leave-one-out protocol: each test user's held-out
target item is ranked against all items the user has not interacted with
under the target behavior (full ranking, no sampled negatives). HR@K and
NDCG@K use the single-relevant-item closed forms. Explanations convert a
reasoning trace into a lossless, line-serializable record; counterfactual
edits perturb the chain observation only, never the parameters.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import dataio, training, tensorgrad as tg
from .reasoning import PreferenceStrength, STRENGTH_RANK, observe_chain


@dataclass
class MetricsReport:
    ks: list
    hr: dict                 # K -> mean HR@K
    ndcg: dict               # K -> mean NDCG@K
    group_metrics: list      # per sparsity group: {"group", "users", "hr", "ndcg"}
    path_fractions: dict     # path label -> fraction over test pairs
    user_count: int

    def to_json_line(self):
        payload = {
            "ks": self.ks,
            "hr": {str(k): v for k, v in self.hr.items()},
            "ndcg": {str(k): v for k, v in self.ndcg.items()},
            "group_metrics": self.group_metrics,
            "path_fractions": self.path_fractions,
            "user_count": self.user_count,
        }
        return json.dumps(payload, sort_keys=True)


@dataclass
class ExplanationRecord:
    user: object             # raw id
    item: object             # raw id
    flags: tuple
    path: str
    steps: list              # ordered step dicts, execution order
    score: float

    def to_json_line(self):
        payload = {
            "user": self.user,
            "item": self.item,
            "flags": list(self.flags),
            "path": self.path,
            "steps": self.steps,
            "score": self.score,
        }
        return json.dumps(payload, sort_keys=True)

    @staticmethod
    def from_json_line(line):
        d = json.loads(line)
        return ExplanationRecord(user=d["user"], item=d["item"],
                                 flags=tuple(d["flags"]), path=d["path"],
                                 steps=d["steps"], score=d["score"])


@dataclass(frozen=True)
class CounterfactualEdit:
    """Exactly one of drop/add, naming a behavior label."""

    drop: str | None = None
    add: str | None = None

    def __post_init__(self):
        if (self.drop is None) == (self.add is None):
            raise ValueError("exactly one of drop/add must be given")


def hr_at_k(rank, k):
    if rank < 1:
        raise ValueError("rank is 1-based")
    return 1 if rank <= k else 0


def ndcg_at_k(rank, k):
    if rank < 1:
        raise ValueError("rank is 1-based")
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


def _score_pairs(model, users, items, cascade, indices):
    """Returns (probabilities, logits, traces) for a batch of pairs.

    Rankings sort on the logits: the logistic saturates to exactly 1.0 in
    float once logits are large, which would collapse well-separated pairs
    into ties.
    """
    mediators, traces = model.reason_batch(users, items, cascade, indices)
    logits = training.predict_logit(mediators, model.store)
    probs = tg._sigmoid(logits.data[:, 0])
    return probs.copy(), logits.data[:, 0].copy(), traces


def rank_items(u, model, candidates=None, cascade=None, indices=None):
    """Score and sort candidates for one user.

    Returns [(item, score, path_label)] sorted by descending score, ties
    broken by ascending item index. Candidates default to all items minus
    the user's train-target items.
    """
    ds = model.train_dataset
    if cascade is None:
        cascade = model.cascade()
    if indices is None:
        indices = model.build_indices(cascade)
    if candidates is None:
        owned = {i for (uu, i) in ds.target_edges() if uu == u}
        candidates = [i for i in range(ds.num_items) if i not in owned]
    candidates = np.asarray(list(candidates), dtype=np.int64)
    users = np.full(candidates.shape[0], u, dtype=np.int64)
    probs, logits, traces = _score_pairs(model, users, candidates, cascade, indices)
    order = np.lexsort((candidates, -logits))
    return [(int(candidates[k]), float(probs[k]), traces[k].path.value)
            for k in order]


def evaluate(model, split, ks=(10, 50), n_groups=4):
    """Mean HR/NDCG over test users plus path and sparsity analytics."""
    ds = model.train_dataset
    if (ds.num_users, ds.num_items) != (split.train.num_users, split.train.num_items):
        raise ValueError("model and split dimensions differ")
    ks = list(ks)
    target_items = ds.user_items(ds.spec.target_index)
    test_users = sorted(split.test_positives)

    cascade = model.cascade()
    indices = model.build_indices(cascade)

    def rank_of_held_out(u):
        held = split.test_positives[u]
        cands = [i for i in range(ds.num_items) if i not in target_items[u]]
        arr = np.asarray(cands, dtype=np.int64)
        users = np.full(arr.shape[0], u, dtype=np.int64)
        _, logits, traces = _score_pairs(model, users, arr, cascade, indices)
        order = np.lexsort((arr, -logits))
        ranked = arr[order]
        rank = int(np.nonzero(ranked == held)[0][0]) + 1
        path = traces[int(np.nonzero(arr == held)[0][0])].path.value
        return rank, path

    workers = int(os.environ.get("CNRE_THREADS", "1"))
    results = {}
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for u, res in zip(test_users, pool.map(rank_of_held_out, test_users)):
                results[u] = res
    else:
        for u in test_users:
            results[u] = rank_of_held_out(u)

    hr = {k: float(np.mean([hr_at_k(results[u][0], k) for u in test_users]))
          for k in ks}
    ndcg = {k: float(np.mean([ndcg_at_k(results[u][0], k) for u in test_users]))
            for k in ks}

    path_counts = {}
    for u in test_users:
        path_counts[results[u][1]] = path_counts.get(results[u][1], 0) + 1
    total = max(len(test_users), 1)
    path_fractions = {p: c / total for p, c in path_counts.items()}

    groups = dataio.group_users_by_sparsity(ds, n_groups=n_groups)
    group_metrics = []
    for g_idx, members in enumerate(groups):
        in_test = [u for u in members if u in results]
        entry = {"group": g_idx + 1, "users": len(in_test)}
        if in_test:
            entry["hr"] = {str(k): float(np.mean([hr_at_k(results[u][0], k)
                                                  for u in in_test])) for k in ks}
            entry["ndcg"] = {str(k): float(np.mean([ndcg_at_k(results[u][0], k)
                                                    for u in in_test])) for k in ks}
        else:
            entry["hr"] = {str(k): None for k in ks}
            entry["ndcg"] = {str(k): None for k in ks}
        group_metrics.append(entry)

    return MetricsReport(ks=ks, hr=hr, ndcg=ndcg, group_metrics=group_metrics,
                         path_fractions=path_fractions, user_count=len(test_users))


def _trace_to_record(model, trace, u, i, score):
    ds = model.train_dataset
    steps = [
        {"step": "observe_chain", "flags": list(trace.flags)},
        {"step": "dispatch", "path": trace.path.value},
    ]
    if trace.confidence is not None:
        steps.append({"step": "confidence", "value": trace.confidence,
                      "threshold": trace.threshold,
                      "below_threshold": trace.confidence < trace.threshold})
    if trace.neighbor_ids is not None:
        steps.append({"step": "retrieve", "space": trace.space,
                      "neighbor_ids": [ds.decode_item(j) for j in trace.neighbor_ids]})
    operator = {
        PreferenceStrength.STRONG: "concatenation",
        PreferenceStrength.DEFAULT: "concatenation",
        PreferenceStrength.MEDIUM: "neural_conjunction"
                                   if trace.neighbor_ids is not None else "concatenation",
        PreferenceStrength.WEAK: "neural_disjunction"
                                 if trace.neighbor_ids is not None else "concatenation",
    }[trace.path]
    steps.append({"step": "operator", "name": operator,
                  "behavior": ds.spec.names[trace.behavior]})
    steps.append({"step": "predict", "score": score})
    return ExplanationRecord(user=ds.decode_user(u), item=ds.decode_item(i),
                             flags=trace.flags, path=trace.path.value,
                             steps=steps, score=score)


def explain(user_raw, item_raw, model, cascade=None, indices=None, flags_fn=None):
    """Run the reasoner once for a raw (user, item) pair and record the trace."""
    ds = model.train_dataset
    u = ds.encode_user(user_raw)
    i = ds.encode_item(item_raw)
    if cascade is None:
        cascade = model.cascade()
    if indices is None:
        indices = model.build_indices(cascade)
    cfg = model.config
    from . import reasoning
    mediators, traces = reasoning.reason_batch(
        [u], [i], ds, cascade, indices, model.store, cfg.tau, n_c=cfg.n_c,
        disable_rea=cfg.disable_rea, disable_cnj=cfg.disable_cnj,
        disable_dsj=cfg.disable_dsj, collect_traces=True, flags_fn=flags_fn)
    score = float(training.predict(mediators, model.store).data[0, 0])
    trace = traces[0]
    trace.score = score
    return _trace_to_record(model, trace, u, i, score)


def counterfactual(user_raw, item_raw, edit, model, cascade=None, indices=None):
    """Re-run the reasoner with an edited chain observation.

    Returns (base_record, edited_record, diff); model parameters and train
    edges are untouched, only the observation seen by the dispatcher changes.
    """
    ds = model.train_dataset
    u = ds.encode_user(user_raw)
    i = ds.encode_item(item_raw)
    if cascade is None:
        cascade = model.cascade()
    if indices is None:
        indices = model.build_indices(cascade)

    base_flags = observe_chain(ds, u, i)
    label = edit.drop if edit.drop is not None else edit.add
    if label not in ds.spec.names:
        raise ValueError(f"unknown behavior label {label!r}")
    b = ds.spec.index_of(label)
    if edit.drop is not None and not base_flags[b]:
        raise ValueError(f"cannot drop absent behavior '{label}'")
    if edit.add is not None and base_flags[b]:
        raise ValueError(f"cannot add already-present behavior '{label}'")
    edited_flags = list(base_flags)
    edited_flags[b] = 0 if edit.drop is not None else 1
    edited_flags = tuple(edited_flags)

    base = explain(user_raw, item_raw, model, cascade=cascade, indices=indices)
    edited = explain(user_raw, item_raw, model, cascade=cascade, indices=indices,
                     flags_fn=lambda uu, ii: edited_flags)

    def neighbors(rec):
        for step in rec.steps:
            if step["step"] == "retrieve":
                return step["neighbor_ids"]
        return None

    diff = {
        "path_before": base.path,
        "path_after": edited.path,
        "score_delta": edited.score - base.score,
        "neighbors_before": neighbors(base),
        "neighbors_after": neighbors(edited),
    }
    return base, edited, diff


def layer_sweep(split, config, grids, ks=(10,), log=None):
    """Train and evaluate one run per layer-count combination."""
    if not grids:
        raise ValueError("layer-count grid is empty")
    rows = []
    for counts in grids:
        cfg = training.TrainConfig(**{**_cfg_dict(config), "layer_counts": list(counts)})
        model, _ = training.train(split, cfg, log=log)
        report = evaluate(model, split, ks=ks)
        rows.append({"layer_counts": list(counts),
                     "hr": dict(report.hr), "ndcg": dict(report.ndcg)})
    return rows


def robustness_sweep(split, config, drop_fractions, ks=(10,), user_fraction=0.5,
                     log=None):
    """Retrain and evaluate after dropping history at each fraction."""
    rows = []
    for frac in drop_fractions:
        dropped = dataio.drop_history(split.train, user_fraction, frac,
                                      seed=config.seed)
        sub_split = dataio.SplitDataset(train=dropped,
                                        test_positives=dict(split.test_positives))
        model, _ = training.train(sub_split, config, log=log)
        report = evaluate(model, sub_split, ks=ks)
        rows.append({"drop_fraction": frac,
                     "hr": dict(report.hr), "ndcg": dict(report.ndcg)})
    return rows


def _cfg_dict(config):
    from dataclasses import asdict
    return asdict(config)


def rows_to_tsv(rows):
    """Tab-separated rendering of sweep rows (plot-ready)."""
    if not rows:
        return ""
    lines = []
    keys = list(rows[0].keys())
    lines.append("\t".join(keys))
    for row in rows:
        lines.append("\t".join(json.dumps(row[k]) if isinstance(row[k], (dict, list))
                               else str(row[k]) for k in keys))
    return "\n".join(lines) + "\n"
