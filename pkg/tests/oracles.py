"""Independent reference implementations used only by the tests."""

import numpy as np
import scipy.linalg


def lu_inverse(A):
    lu, piv = scipy.linalg.lu_factor(A)
    return scipy.linalg.lu_solve((lu, piv), np.eye(A.shape[0]))


def influence_dense(train_blocks, query_blocks, lams):
    """Per-layer  -v^T (G^T G / n + lam I)^-1 g_k  by explicit inversion."""
    n = train_blocks[0].shape[0]
    total = np.zeros(n)
    for G, v, lam in zip(train_blocks, query_blocks, lams):
        H = G.T @ G / n + lam * np.eye(G.shape[1])
        total += -G @ lu_inverse(H) @ v
    return total


def default_damping(train_blocks):
    return [0.1 * float(np.sum(G**2)) / (G.shape[0] * G.shape[1]) for G in train_blocks]


def auc_pairwise(scores, flipped):
    pos = scores[flipped]
    neg = scores[~flipped]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return wins / (len(pos) * len(neg))


def delta_h_lu(H, lam, P):
    d, r = H.shape[0], P.shape[0]
    return lu_inverse(lam * np.eye(d) + H) - P.T @ lu_inverse(lam * np.eye(r) + P @ H @ P.T) @ P
