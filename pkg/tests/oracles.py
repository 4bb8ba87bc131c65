"""Independent oracles shared by the selector and acceptance tests."""

import math

import numpy as np


def oracle_pareto(table):
    kept = [k for k, (t, m) in table.items()
            if not any(t2 <= t and m2 <= m and (t2, m2) != (t, m) for t2, m2 in table.values())]
    return sorted(kept, key=lambda k: (table[k][0], table[k][1], k))


def fold(plan, table, idx):
    acc = 0.0
    for st in plan:
        acc = acc + table[st][idx]
    return acc


def oracle_select(table, L, cap):
    P = oracle_pareto(table)
    fits = lambda plan: fold(plan, table, 1) < cap
    if fits([P[0]] * L):
        return [P[0]] * L
    space = []
    for i in range(len(P)):
        if fits([P[i]] * L):
            space.append([P[i]] * L)
            continue
        # the tail strategy for k is mixed into what the sweep for k - 1 left
        # behind: P[i] for the first sweep, P[k - 1] afterwards
        for k in range(i + 1, len(P)):
            head = P[i] if k == i + 1 else P[k - 1]
            for l in range(L):
                plan = [head] * (L - l - 1) + [P[k]] * (l + 1)
                if fits(plan):
                    space.append(plan)
    if not space:
        light = min(P, key=lambda k: (table[k][1], P.index(k)))
        return [light] * L
    best = min(range(len(space)), key=lambda j: fold(space[j], table, 0))
    return space[best]



def hand_aic(s, y, deg):
    """AIC of a least-squares polynomial, computed directly from np.polyfit."""
    coef = np.polyfit(s, y, deg)
    rss = float(((np.polyval(coef, s) - y) ** 2).sum())
    floor = len(y) * (1e-10 * np.abs(y).max()) ** 2
    rss = max(rss, floor)
    return len(y) * math.log(rss / len(y)) + 2 * (deg + 1)
