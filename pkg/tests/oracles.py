"""Slow, obviously-correct reference implementations used as test oracles."""

import itertools
from fractions import Fraction

import numpy as np


def exhaustive_wcss(X, k):
    """Global k-means optimum over every labelling of the rows into at most k groups."""
    n = len(X)
    labels = np.array(list(itertools.product(range(k), repeat=n)))
    onehot = labels[:, :, None] == np.arange(k)[None, None, :]
    counts = onehot.sum(axis=1)
    sums = np.einsum("lnk,nd->lkd", onehot, X)
    with np.errstate(invalid="ignore", divide="ignore"):
        between = np.where(counts > 0, (sums ** 2).sum(axis=2) / counts, 0.0)
    return float(((X ** 2).sum() - between.sum(axis=1)).min())


def brute_force_counts(baskets, antecedent_items, consequents, max_len=3, dimension=lambda item: item):
    """Basket counts for every candidate rule, found by scanning each basket.

    Returns {(antecedent, consequent): (n_antecedent, n_rule, n_consequent)}.
    """
    items = sorted(set(antecedent_items) - set(consequents))
    n_cons = {c: sum(1 for b in baskets if c in b) for c in consequents}
    out = {}
    for size in range(1, max_len + 1):
        for ant in itertools.combinations(items, size):
            if len({dimension(i) for i in ant}) != size:
                continue
            matching = [b for b in baskets if set(ant) <= b]
            for cons in consequents:
                out[ant, cons] = (len(matching), sum(1 for b in matching if cons in b), n_cons[cons])
    return out


def filter_rules(counts, n, min_left_support, lift_floor):
    """Apply the rule thresholds in exact arithmetic.

    Returns {(antecedent, consequent): (left_support, support, confidence, lift)} as fractions.
    """
    floor_ls = Fraction(str(min_left_support))
    floor_lift = Fraction(str(lift_floor))
    out = {}
    for key, (n_ant, n_rule, n_cons) in counts.items():
        if n_ant == 0 or n_cons == 0 or Fraction(n_ant, n) < floor_ls:
            continue
        conf = Fraction(n_rule, n_ant)
        lift = conf / Fraction(n_cons, n)
        if conf < Fraction(n_cons, n) or not lift > floor_lift:
            continue
        out[key] = (Fraction(n_ant, n), Fraction(n_rule, n), conf, lift)
    return out


def brute_force_rules(baskets, antecedent_items, consequents, min_left_support, lift_floor,
                      max_len=3, dimension=lambda item: item):
    """Every qualifying rule by exhaustive antecedent enumeration."""
    counts = brute_force_counts(baskets, antecedent_items, consequents, max_len, dimension)
    return filter_rules(counts, len(baskets), min_left_support, lift_floor)


def best_subset_coverage(covers, n):
    """Largest coverage reachable by any subset of rules, by enumerating all subsets."""
    best = 0
    for r in range(1, len(covers) + 1):
        for combo in itertools.combinations(covers, r):
            best = max(best, len(set().union(*combo)))
    return best / n
