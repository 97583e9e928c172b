"""Sigmoid dot-product scores and the BPR loss over them, with gradients."""

from __future__ import annotations

import numpy as np

from .nn import log_sigmoid, sigmoid


def score(z_u, z_i):
    """``sigmoid(z_u . z_i)`` along the last axis."""
    return sigmoid(np.sum(np.asarray(z_u) * np.asarray(z_i), axis=-1))


def bpr_loss(y_pos, y_neg):
    """``-ln sigmoid(y_pos - y_neg)``."""
    return -log_sigmoid(np.asarray(y_pos, dtype=np.float64) - np.asarray(y_neg, dtype=np.float64))


def bpr_triplet(z_u, z_pos, z_neg):
    """Mean BPR loss of a batch of triplets and its gradients w.r.t. the three embeddings."""
    y_pos = score(z_u, z_pos)
    y_neg = score(z_u, z_neg)
    loss = bpr_loss(y_pos, y_neg)
    n = len(loss)
    g_delta = (sigmoid(y_pos - y_neg) - 1.0) / n
    g_pos = (g_delta * y_pos * (1.0 - y_pos))[:, None]
    g_neg = (-g_delta * y_neg * (1.0 - y_neg))[:, None]
    g_u = g_pos * z_pos + g_neg * z_neg
    return float(loss.mean()), g_u, g_pos * z_u, g_neg * z_u
