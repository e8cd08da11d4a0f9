"""Prediction head, BPR multi-task losses, training loop and checkpoints."""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import dataio, propagation, reasoning, retrieval, tensorgrad as tg


class CheckpointError(ValueError):
    """Unreadable or inconsistent checkpoint file."""


@dataclass
class TrainConfig:
    embedding_dim: int = 64
    hyperedges: int = 32
    layer_counts: list | None = None   # default: 1 per auxiliary behavior, 3 for target
    lr: float = 1e-3
    l2: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    tau: float = 0.5
    n_c: int = 10
    batch_size: int = 1024
    epochs: int = 10
    seed: int = 0
    index_mode: str = "exact"
    eps_project: float = 1e-8
    hypergraph_normalize: bool = True  # printed (raw) affinity diverges at depth
    samples_per_epoch: int | None = None  # per behavior; default = edge count
    disable_hpp: bool = False
    disable_par: bool = False
    disable_prj: bool = False
    disable_rea: bool = False
    disable_cnj: bool = False
    disable_dsj: bool = False

    def resolved_layer_counts(self, n_behaviors):
        if self.layer_counts is not None:
            if len(self.layer_counts) != n_behaviors:
                raise ValueError("layer_counts length must equal behavior count")
            return list(self.layer_counts)
        return [1] * (n_behaviors - 1) + [3]


def predict_logit(mediators, params):
    """Pre-activation of the head MLP: relu(m @ W_h + b_h) @ w_o + b_o."""
    hidden = tg.relu(tg.add(tg.matmul(mediators, params["head_wh"]), params["head_bh"]))
    return tg.add(tg.matmul(hidden, params["head_wo"]), params["head_bo"])


def predict(mediators, params):
    """Head MLP probability: logistic of the head logit, output in (0, 1)."""
    return tg.sigmoid(predict_logit(mediators, params))


def bpr_loss(y_pos, y_neg):
    """-log sigmoid(y_pos - y_neg), summed over the batch (stable form)."""
    return tg.sum_all(tg.softplus(tg.sub(y_neg, y_pos)))


def multi_task_loss(per_behavior_bpr, l2_weight, store):
    """Sum of the per-behavior BPR terms plus L2 over every parameter slot."""
    if not per_behavior_bpr:
        raise ValueError("at least one BPR term required")
    total = per_behavior_bpr[0]
    for term in per_behavior_bpr[1:]:
        total = tg.add(total, term)
    if l2_weight > 0.0:
        reg = None
        for _, p in store.items():
            sq = tg.l2_norm_sq(p)
            reg = sq if reg is None else tg.add(reg, sq)
        total = tg.add(total, tg.mul(tg.Tensor(np.array(l2_weight)), reg))
    return total


def auxiliary_task_score(users, items, behavior, cascade, params, logits=False):
    """Score auxiliary pairs via a strong-style mediator through the shared head."""
    bundle = cascade.per_behavior[behavior]
    med = reasoning.strong_mediator(
        tg.index_rows(bundle.e_u, np.asarray(users, dtype=np.int64)),
        tg.index_rows(bundle.e_i, np.asarray(items, dtype=np.int64)),
    )
    return predict_logit(med, params) if logits else predict(med, params)


class CnreModel:
    """All trainable state plus the graphs needed to run the architecture."""

    def __init__(self, train_dataset, config):
        self.train_dataset = train_dataset
        self.config = config
        self.behavior_names = list(train_dataset.spec.names)
        self.layer_counts = config.resolved_layer_counts(len(self.behavior_names))
        self.rng = np.random.default_rng(config.seed)
        self.store = tg.ParameterStore()
        self._init_parameters()
        self._build_adjacencies()

    def _init_parameters(self):
        d = self.config.embedding_dim
        k = self.config.hyperedges
        h = 2 * d  # hidden width of both logic operators
        rng = self.rng
        M, N = self.train_dataset.num_users, self.train_dataset.num_items
        add = self.store.add
        add("base_user", tg.xavier_uniform(rng, M, d))
        add("base_item", tg.xavier_uniform(rng, N, d))
        for name in self.behavior_names:
            add(f"hyp_u_{name}", tg.xavier_uniform(rng, d, k))
            add(f"hyp_i_{name}", tg.xavier_uniform(rng, d, k))
        for prefix in ("conj", "disj"):
            add(f"{prefix}_w1", tg.xavier_uniform(rng, 3 * d, h))
            add(f"{prefix}_b1", np.zeros((1, h)))
            add(f"{prefix}_w2", tg.xavier_uniform(rng, h, 2 * d))
            add(f"{prefix}_b2", np.zeros((1, 2 * d)))
        add("head_wh", tg.xavier_uniform(rng, 2 * d, d))
        add("head_bh", np.zeros((1, d)))
        add("head_wo", tg.xavier_uniform(rng, d, 1))
        add("head_bo", np.zeros((1, 1)))

    def _build_adjacencies(self):
        ds = self.train_dataset
        self.adjacencies = [
            propagation.build_normalized_adjacency(edges, ds.num_users, ds.num_items)
            for edges in ds.per_behavior_edges
        ]
        self.unified_adj = propagation.build_normalized_adjacency(
            ds.union_edges(), ds.num_users, ds.num_items)

    def cascade(self):
        cfg = self.config
        return propagation.cascade_forward(
            self.adjacencies, self.unified_adj, self.store,
            self.behavior_names, self.layer_counts,
            eps=cfg.eps_project, hypergraph_normalize=cfg.hypergraph_normalize,
            disable_hpp=cfg.disable_hpp, disable_par=cfg.disable_par,
            disable_prj=cfg.disable_prj)

    def build_indices(self, cascade):
        """Fresh retrieval indices over the auxiliary item embedding spaces."""
        cfg = self.config
        indices = {}
        for b in range(len(self.behavior_names) - 1):
            bundle = cascade.per_behavior[b]
            indices[(b, "col")] = retrieval.build_index(
                bundle.e_col_i.data, mode=cfg.index_mode, seed=cfg.seed)
            indices[(b, "sem")] = retrieval.build_index(
                bundle.e_sem_i.data, mode=cfg.index_mode, seed=cfg.seed)
        return indices

    def reason_batch(self, users, items, cascade, indices, collect_traces=False,
                     gate=None):
        cfg = self.config
        return reasoning.reason_batch(
            users, items, self.train_dataset, cascade, indices, self.store,
            cfg.tau, n_c=cfg.n_c, disable_rea=cfg.disable_rea,
            disable_cnj=cfg.disable_cnj, disable_dsj=cfg.disable_dsj,
            collect_traces=collect_traces, gate=gate)

    def batch_loss(self, per_behavior_triples, cascade, indices, gate=None):
        """Multi-task loss over one step's triples; returns (loss, n_pairs)."""
        terms = []
        n_pairs = 0
        t_idx = len(self.behavior_names) - 1
        for b, triples in enumerate(per_behavior_triples):
            if not triples:
                continue
            users = np.array([t.user for t in triples], dtype=np.int64)
            pos = np.array([t.pos_item for t in triples], dtype=np.int64)
            neg = np.array([t.neg_item for t in triples], dtype=np.int64)
            # BPR margins use the head logits; the logistic squash would cap
            # the achievable margin at 1 and stall the pairwise objective
            if b == t_idx:
                med_pos, _ = self.reason_batch(users, pos, cascade, indices, gate=gate)
                med_neg, _ = self.reason_batch(users, neg, cascade, indices, gate=gate)
                y_pos = predict_logit(med_pos, self.store)
                y_neg = predict_logit(med_neg, self.store)
            else:
                y_pos = auxiliary_task_score(users, pos, b, cascade, self.store,
                                             logits=True)
                y_neg = auxiliary_task_score(users, neg, b, cascade, self.store,
                                             logits=True)
            terms.append(bpr_loss(y_pos, y_neg))
            n_pairs += len(triples)
        loss = multi_task_loss(terms, self.config.l2, self.store)
        return loss, n_pairs

    def fit(self, log=None):
        """Run the configured number of epochs; returns per-epoch mean BPR."""
        cfg = self.config
        ds = self.train_dataset
        history = []
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            cascade_snapshot = self.cascade()
            indices = self.build_indices(cascade_snapshot)
            gate = reasoning.GateSnapshot.from_cascade(cascade_snapshot)
            per_behavior = []
            for b, edges in enumerate(ds.per_behavior_edges):
                if not edges:
                    per_behavior.append([])
                    continue
                count = cfg.samples_per_epoch or len(edges)
                per_behavior.append(dataio.sample_bpr_triples(ds, b, count, self.rng))
            n_steps = max(1, -(-max(len(t) for t in per_behavior) // cfg.batch_size))
            epoch_loss = 0.0
            epoch_pairs = 0
            for step in range(n_steps):
                lo, hi = step * cfg.batch_size, (step + 1) * cfg.batch_size
                batch = [t[lo:hi] for t in per_behavior]
                if not any(batch):
                    continue
                cascade = self.cascade()
                loss, n_pairs = self.batch_loss(batch, cascade, indices, gate=gate)
                self.store.zero_grad()
                loss.backward()
                self.store.adam_step(cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
                epoch_loss += loss.item()
                epoch_pairs += n_pairs
            mean_bpr = epoch_loss / max(epoch_pairs, 1)
            history.append(mean_bpr)
            if log is not None:
                log(f"{epoch}\t{epoch_loss:.6f}\t{time.perf_counter() - t0:.3f}")
        return history

    def checkpoint_header(self):
        ds = self.train_dataset
        return {
            "format_version": 1,
            "num_users": ds.num_users,
            "num_items": ds.num_items,
            "behaviors": list(self.behavior_names),
            "layer_counts": list(self.layer_counts),
            "step": self.store.step_count,
            "config": asdict(self.config),
            "slots": [{"name": n, "shape": list(self.store[n].data.shape)}
                      for n in self.store.names()],
        }

    def save(self, path):
        save_checkpoint(path, self.store, self.checkpoint_header())

    @classmethod
    def from_checkpoint(cls, path, train_dataset):
        ckpt = load_checkpoint(path)
        h = ckpt.header
        if (h["num_users"], h["num_items"]) != (train_dataset.num_users,
                                                train_dataset.num_items):
            raise CheckpointError("checkpoint dimensions do not match the dataset")
        if list(train_dataset.spec.names) != h["behaviors"]:
            raise CheckpointError("checkpoint behavior chain does not match the dataset")
        config = TrainConfig(**h["config"])
        model = cls(train_dataset, config)
        model.store.load_arrays(ckpt.arrays)
        model.store.step_count = h["step"]
        return model


@dataclass
class Checkpoint:
    header: dict
    arrays: dict  # slot name -> float64 array (restored from f32 payload)


_MAGIC = b"CNRE"
_VERSION = 1


def save_checkpoint(path, store, header):
    """magic + version byte + u32-LE header length + JSON header + f32-LE slots."""
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(bytes([_VERSION]))
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for slot in header["slots"]:
            arr = store[slot["name"]].data.astype("<f4")
            if list(arr.shape) != slot["shape"]:
                raise CheckpointError(f"slot '{slot['name']}' shape drifted")
            fh.write(arr.tobytes(order="C"))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise CheckpointError("bad magic: not a CNRE checkpoint")
    if len(blob) < 9:
        raise CheckpointError("truncated checkpoint header")
    if blob[4] != _VERSION:
        raise CheckpointError(f"unsupported checkpoint version {blob[4]}")
    (hlen,) = struct.unpack("<I", blob[5:9])
    if len(blob) < 9 + hlen:
        raise CheckpointError("truncated checkpoint header")
    header = json.loads(blob[9:9 + hlen].decode("utf-8"))
    off = 9 + hlen
    arrays = {}
    for slot in header["slots"]:
        shape = tuple(slot["shape"])
        nbytes = 4 * int(np.prod(shape))
        chunk = blob[off:off + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"truncated payload for slot '{slot['name']}'")
        arrays[slot["name"]] = np.frombuffer(chunk, dtype="<f4").reshape(shape).astype(np.float64)
        off += nbytes
    if off != len(blob):
        raise CheckpointError("trailing bytes after declared payload")
    return Checkpoint(header=header, arrays=arrays)


def train(split, config, log=None):
    """Build a model on the train split and fit it; returns (model, history)."""
    model = CnreModel(split.train, config)
    history = model.fit(log=log)
    return model, history
