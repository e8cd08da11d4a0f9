"""Seeded synthetic datasets with planted chain and group structure.

Used by the test suite and the demo scripts: users and items fall into
matching taste groups; buys stay in-group and come with full (or
occasionally skipped) chains, extra cart chains give medium-strength
observations, and broad view-only edges give weak ones.
"""

from __future__ import annotations

import numpy as np

from .dataio import BehaviorSpec, build_dataset_from_pairs


def make_planted_dataset(num_users=50, num_items=30, n_groups=5, seed=0,
                         buys_per_user=3, carts_extra=2, views_extra=4,
                         skip_chain_prob=0.15):
    """Three-behavior (view/cart/buy) dataset with planted taste groups."""
    rng = np.random.default_rng(seed)
    view, cart, buy = set(), set(), set()
    group_items = [[i for i in range(num_items) if i % n_groups == g]
                   for g in range(n_groups)]
    for u in range(num_users):
        g = u % n_groups
        mine = group_items[g]
        n_buy = min(buys_per_user, len(mine))
        bought = rng.choice(mine, size=n_buy, replace=False)
        for i in bought:
            i = int(i)
            buy.add((u, i))
            view.add((u, i))
            if rng.random() >= skip_chain_prob:  # skip chains omit the cart step
                cart.add((u, i))
        rest = [i for i in mine if (u, i) not in buy]
        for i in rng.permutation(rest)[:carts_extra]:
            i = int(i)
            cart.add((u, i))
            view.add((u, i))
        outside = [i for i in range(num_items) if (u, i) not in view]
        for i in rng.permutation(outside)[:views_extra]:
            view.add((u, int(i)))
    spec = BehaviorSpec(("view", "cart", "buy"))
    return build_dataset_from_pairs([view, cart, buy], spec)
