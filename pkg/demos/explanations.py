"""Explain individual recommendations and probe them with chain edits.

Trains a small model, then for a handful of user-item pairs prints the
full reasoning trace — which behavior chain was observed, which path the
dispatcher took, what was retrieved — and shows how the answer changes
under counterfactual edits ("what if this user had never carted it?").

Run from the repository root:

    python3 demos/explanations.py
"""

import json

from cnre import dataio, evalexplain, training
from cnre.synthetic import make_planted_dataset


def show(record, title):
    print(f"--- {title} ---")
    print(f"user={record.user} item={record.item} "
          f"flags={record.flags} path={record.path} score={record.score:.4f}")
    for step in record.steps:
        print(f"  {json.dumps(step)}")
    print()


def main():
    ds = make_planted_dataset(num_users=30, num_items=20, n_groups=4, seed=0)
    split = dataio.leave_one_out_split(ds, seed=0)
    cfg = training.TrainConfig(embedding_dim=12, hyperedges=4, epochs=40,
                               seed=0, lr=0.01, n_c=5)
    model, _ = training.train(split, cfg)
    cascade = model.cascade()
    indices = model.build_indices(cascade)

    view, cart, buy = ds.per_behavior_edges
    # one pair per chain shape: purchased, viewed+carted, viewed only
    picks = [
        ("purchased", next(iter(sorted(buy)))),
        ("carted but not bought", next(iter(sorted(cart - buy)))),
        ("viewed only", next(iter(sorted(view - cart - buy)))),
    ]
    for label, (u, i) in picks:
        record = evalexplain.explain(ds.decode_user(u), ds.decode_item(i),
                                     model, cascade, indices)
        show(record, label)

    # counterfactual: remove the cart event from the middle pair
    u, i = picks[1][1]
    base, edited, diff = evalexplain.counterfactual(
        ds.decode_user(u), ds.decode_item(i),
        evalexplain.CounterfactualEdit(drop="cart"),
        model, cascade, indices)
    show(edited, "same pair, cart event removed")
    print(f"path {base.path} -> {edited.path}, "
          f"score moved by {diff['score_delta']:+.4f}")

    # and the reverse direction: grant the purchase itself
    base, edited, diff = evalexplain.counterfactual(
        ds.decode_user(u), ds.decode_item(i),
        evalexplain.CounterfactualEdit(add="buy"),
        model, cascade, indices)
    print(f"granting a purchase instead: {base.path} -> {edited.path}, "
          f"score moved by {diff['score_delta']:+.4f}")


if __name__ == "__main__":
    main()
