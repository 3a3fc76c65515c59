"""Numba kernels for the latency-critical paths (prediction, geometric median)."""

import math

import numpy as np
from numba import njit

_SQRT2 = math.sqrt(2.0)

# Node kind codes shared with the flat tree layout.
KIND_REGULAR = 0
KIND_DICHOTOMOUS = 1
KIND_LEAF = 2

_STACK_SIZE = 64  # max tree depth is 21, one pending branch per level


@njit(cache=True)
def geometric_median(pts):
    """Weiszfeld iteration: 100 steps or movement < 1e-9, seeded at the centroid."""
    n = pts.shape[0]
    x = 0.0
    y = 0.0
    for i in range(n):
        x += pts[i, 0]
        y += pts[i, 1]
    x /= n
    y /= n
    for _ in range(100):
        num_x = 0.0
        num_y = 0.0
        denom = 0.0
        anchor = -1
        for i in range(n):
            d = math.hypot(pts[i, 0] - x, pts[i, 1] - y)
            if d < 1e-12:
                anchor = i
                break
            inv = 1.0 / d
            num_x += pts[i, 0] * inv
            num_y += pts[i, 1] * inv
            denom += inv
        if anchor >= 0:
            return pts[anchor, 0], pts[anchor, 1]
        nx = num_x / denom
        ny = num_y / denom
        moved = math.hypot(nx - x, ny - y)
        x = nx
        y = ny
        if moved < 1e-9:
            break
    return x, y


@njit(cache=True)
def soft_threshold_scan(values, is_pos, weights, taus, sigma):
    """Index and value of the minimal soft-split objective over the tau grid."""
    n = values.size
    w_total = 0.0
    wp_total = 0.0
    for i in range(n):
        w_total += weights[i]
        if is_pos[i]:
            wp_total += weights[i]
    inv = 1.0 / (sigma * _SQRT2)
    best_i = 0
    best_obj = np.inf
    for t in range(taus.size):
        w_left = 0.0
        wp_left = 0.0
        for i in range(n):
            c = 0.5 * math.erfc((values[i] - taus[t]) * inv)
            w_left += weights[i] * c
            if is_pos[i]:
                wp_left += weights[i] * c
        obj = 0.0
        if w_left > 0.0:
            obj += 2.0 * wp_left * (w_left - wp_left) / w_left
        w_right = w_total - w_left
        wp_right = wp_total - wp_left
        if w_right > 0.0:
            obj += 2.0 * wp_right * (w_right - wp_right) / w_right
        if obj < best_obj:
            best_obj = obj
            best_i = t
    return best_i, best_obj


@njit(cache=True)
def tree_score(kind, feature, tau, sigma, left, right, leaf_label, root, x):
    """Single-tree traversal: (leg score, total leaf mass, nodes visited)."""
    stack_n = np.empty(_STACK_SIZE, np.int64)
    stack_w = np.empty(_STACK_SIZE, np.float64)
    stack_n[0] = root
    stack_w[0] = 1.0
    top = 1
    score = 0.0
    mass = 0.0
    visits = 0
    while top > 0:
        top -= 1
        n = stack_n[top]
        w = stack_w[top]
        while True:
            visits += 1
            k = kind[n]
            if k == KIND_LEAF:
                mass += w
                if leaf_label[n] == 1:
                    score += w
                break
            v = x[feature[n]]
            if k == KIND_REGULAR:
                n = left[n] if v < tau[n] else right[n]
            else:
                wl = 0.5 * math.erfc((v - tau[n]) / (sigma[n] * _SQRT2))
                stack_n[top] = right[n]
                stack_w[top] = w * (1.0 - wl)
                top += 1
                w = w * wl
                n = left[n]
    return score, mass, visits


@njit(cache=True)
def forest_votes(kind, feature, tau, sigma, left, right, leaf_label, offsets, X, votes, visits):
    """Mean binary tree vote per sample, plus total nodes visited per sample."""
    n_trees = offsets.size - 1
    stack_n = np.empty(_STACK_SIZE, np.int64)
    stack_w = np.empty(_STACK_SIZE, np.float64)
    for s in range(X.shape[0]):
        ones = 0
        nodes = 0
        for t in range(n_trees):
            stack_n[0] = offsets[t]
            stack_w[0] = 1.0
            top = 1
            score = 0.0
            while top > 0:
                top -= 1
                n = stack_n[top]
                w = stack_w[top]
                while True:
                    nodes += 1
                    k = kind[n]
                    if k == KIND_LEAF:
                        if leaf_label[n] == 1:
                            score += w
                        break
                    v = X[s, feature[n]]
                    if k == KIND_REGULAR:
                        n = left[n] if v < tau[n] else right[n]
                    else:
                        wl = 0.5 * math.erfc((v - tau[n]) / (sigma[n] * _SQRT2))
                        stack_n[top] = right[n]
                        stack_w[top] = w * (1.0 - wl)
                        top += 1
                        w = w * wl
                        n = left[n]
            if score > 0.5:
                ones += 1
        votes[s] = ones / n_trees
        visits[s] = nodes
