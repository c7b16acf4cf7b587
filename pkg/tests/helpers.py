"""Shared test fixtures: independent oracles and tiny model builders."""

from __future__ import annotations

import numpy as np

from normaug.model import ModelConfig, TwoPathNetwork, init_model


def two_pass_stats(block: np.ndarray, eps: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Independent two-pass mean/std oracle over rows (and space for rank 4).

    Deliberately written with explicit loops over channels; the production
    path must agree with this to 1e-12.
    """
    if block.ndim == 2:
        cols = [block[:, c].ravel() for c in range(block.shape[1])]
    elif block.ndim == 4:
        cols = [block[:, c].ravel() for c in range(block.shape[1])]
    else:
        raise ValueError("oracle expects rank-2 or rank-4 input")
    mu = np.empty(len(cols))
    sigma = np.empty(len(cols))
    for c, col in enumerate(cols):
        m = col.sum() / col.size
        var = ((col - m) ** 2).sum() / col.size
        mu[c] = m
        sigma[c] = np.sqrt(var + eps)
    return mu, sigma


def tiny_config(input_dim: int = 6, hidden=(8, 4), num_classes: int = 3,
                num_domains: int = 3, **kw) -> ModelConfig:
    return ModelConfig(input_dim=input_dim, hidden_sizes=tuple(hidden),
                       num_classes=num_classes, num_domains=num_domains, **kw)


def tiny_model(seed: int = 0, **kw) -> TwoPathNetwork:
    return init_model(tiny_config(**kw), seed=seed)


def toy_batch(rng: np.random.Generator, per_domain: int = 4, num_domains: int = 3,
              input_dim: int = 6, num_classes: int = 3):
    n = per_domain * num_domains
    x = rng.standard_normal((n, input_dim))
    labels = rng.integers(0, num_classes, size=n)
    domains = np.repeat(np.arange(num_domains), per_domain)
    return x, labels.astype(np.int64), domains.astype(np.int64)
