"""Partition-aware batch normalization.

A normalization site owns a main unit (plain BN, or a BN/IN mixture) plus a
bank of BN units keyed by domain subsets. During training a batch is split
by a sampled partition of the source domains and each group is normalized
with its own statistics through its own unit; the units keep standard
running averages for evaluation.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True, order=True)
class DomainSubset:
    """Nonempty set of domain indices, stored as a bitmask."""

    mask: int

    def __post_init__(self):
        if self.mask <= 0:
            raise ValueError("DomainSubset: empty subset")

    @classmethod
    def of(cls, *indices: int) -> "DomainSubset":
        mask = 0
        for i in indices:
            if i < 0:
                raise ValueError(f"DomainSubset: negative domain index {i}")
            mask |= 1 << i
        return cls(mask)

    @property
    def indices(self) -> tuple[int, ...]:
        out, m, i = [], self.mask, 0
        while m:
            if m & 1:
                out.append(i)
            m >>= 1
            i += 1
        return tuple(out)

    @property
    def size(self) -> int:
        return self.mask.bit_count()

    @property
    def lowest(self) -> int:
        return (self.mask & -self.mask).bit_length() - 1

    def contains(self, domain: int) -> bool:
        return bool(self.mask >> domain & 1)

    def label(self) -> str:
        return "+".join(str(i) for i in self.indices)

    def validate(self, num_domains: int) -> None:
        if self.mask >= 1 << num_domains:
            raise ValueError(
                f"DomainSubset {self.label()}: domain index >= {num_domains}")


class Partition:
    """Disjoint cover of all source domains by subsets, in canonical order
    (ascending lowest member)."""

    __slots__ = ("groups", "num_domains")

    def __init__(self, groups, num_domains: int):
        groups = tuple(sorted(groups, key=lambda s: s.lowest))
        union = 0
        for g in groups:
            g.validate(num_domains)
            if union & g.mask:
                raise ValueError("Partition: subsets overlap")
            union |= g.mask
        if union != (1 << num_domains) - 1:
            raise ValueError("Partition: subsets do not cover all domains")
        self.groups = groups
        self.num_domains = num_domains

    def __len__(self) -> int:
        return len(self.groups)

    def __iter__(self):
        return iter(self.groups)

    def __eq__(self, other) -> bool:
        return (isinstance(other, Partition)
                and self.groups == other.groups
                and self.num_domains == other.num_domains)

    def __hash__(self) -> int:
        return hash((self.groups, self.num_domains))

    def __repr__(self) -> str:
        inner = ", ".join("{" + g.label() + "}" for g in self.groups)
        return f"Partition[{inner}]"

    def is_all_singletons(self) -> bool:
        return len(self.groups) == self.num_domains

    def group_of(self, domain: int) -> DomainSubset:
        for g in self.groups:
            if g.contains(domain):
                return g
        raise ValueError(f"Partition: domain {domain} not covered")

    def sort_key(self) -> tuple:
        return (-len(self.groups), tuple(g.mask for g in self.groups))


def all_singletons(num_domains: int) -> Partition:
    return Partition([DomainSubset.of(i) for i in range(num_domains)], num_domains)


def enumerate_reduced_combinations(num_domains: int) -> list[Partition]:
    """The N+1 partition family: all singletons, plus {all-but-i, {i}} for
    each domain i. For N = 2 the complement partitions duplicate the
    singleton one and are removed."""
    n = num_domains
    if n < 2:
        raise ValueError(f"enumerate_reduced_combinations: need >= 2 domains, got {n}")
    full = (1 << n) - 1
    parts = [all_singletons(n)]
    for i in range(n):
        rest = full & ~(1 << i)
        p = Partition([DomainSubset(rest), DomainSubset.of(i)], n)
        if p not in parts:
            parts.append(p)
    parts.sort(key=Partition.sort_key)
    return parts


def enumerate_full_combinations(num_domains: int) -> list[Partition]:
    """All partitions made of one merged group of size 2..N-1 plus
    singletons, plus the all-singletons partition."""
    n = num_domains
    if n < 3:
        raise ValueError(f"enumerate_full_combinations: need >= 3 domains, got {n}")
    parts = [all_singletons(n)]
    for k in range(2, n):
        for combo in itertools.combinations(range(n), k):
            merged = DomainSubset.of(*combo)
            singles = [DomainSubset.of(i) for i in range(n) if not merged.contains(i)]
            parts.append(Partition([merged] + singles, n))
    parts.sort(key=Partition.sort_key)
    return parts


# ---------------------------------------------------------------------------
# normalization units


class BNUnit:
    """Per-channel affine parameters plus running statistics for one
    normalization route."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        if not 0.0 < momentum <= 1.0:
            raise ValueError(f"BNUnit: momentum {momentum} outside (0, 1]")
        if eps <= 0.0:
            raise ValueError(f"BNUnit: eps must be positive, got {eps}")
        self.channels = channels
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps
        self.update_count = 0

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [("gamma", self.gamma), ("beta", self.beta)]

    def update_running(self, batch_mean: np.ndarray, batch_var: np.ndarray) -> None:
        m = self.momentum
        self.running_mean = (1.0 - m) * self.running_mean + m * batch_mean
        self.running_var = (1.0 - m) * self.running_var + m * batch_var
        self.update_count += 1


class ONUnit(BNUnit):
    """BN unit extended with a learned softmax mixture between batch and
    instance standardization (main-path variant)."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__(channels, momentum, eps)
        self.mix_logits = Tensor(np.zeros(2), requires_grad=True)

    def parameters(self) -> list[tuple[str, Tensor]]:
        return super().parameters() + [("mix", self.mix_logits)]

    def mixture_weights(self) -> np.ndarray:
        z = self.mix_logits.data - self.mix_logits.data.max()
        e = np.exp(z)
        return e / e.sum()


def _reduce_axes(ndim: int) -> tuple[int, ...]:
    # batch statistics: over rows for rank-2, over rows and space for rank-4
    if ndim == 2:
        return (0,)
    if ndim == 4:
        return (0, 2, 3)
    raise T.ShapeError(f"normalization expects rank-2 or rank-4 features, got rank {ndim}")


def _instance_axes(ndim: int) -> tuple[int, ...]:
    if ndim == 2:
        return (1,)
    if ndim == 4:
        return (2, 3)
    raise T.ShapeError(f"normalization expects rank-2 or rank-4 features, got rank {ndim}")


def _channel_view(v: Tensor, ndim: int) -> Tensor:
    # reshape a (C,) parameter for broadcasting against rank-4 features
    if ndim == 4:
        return T.reshape(v, (1, v.shape[0], 1, 1))
    return v


def _channel_stats(arr: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    axes = _reduce_axes(arr.ndim)
    mu = arr.mean(axis=axes)
    var = ((arr - arr.mean(axis=axes, keepdims=True)) ** 2).mean(axis=axes)
    return mu, var


def compute_batch_stats(features: np.ndarray, rows: np.ndarray | None = None,
                        eps: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and standard deviation of the selected rows.

    The returned sigma is sqrt(population variance + eps). Statistics pool
    over the batch axis, and over spatial positions for rank-4 features.
    """
    arr = np.asarray(features, dtype=np.float64)
    if rows is not None:
        rows = np.asarray(rows, dtype=np.intp)
        if rows.size == 0:
            raise ValueError("compute_batch_stats: empty sub-batch")
        arr = arr[rows]
    elif arr.shape[0] == 0:
        raise ValueError("compute_batch_stats: empty sub-batch")
    mu, var = _channel_stats(arr)
    return mu, np.sqrt(var + eps)


def pooled_moments(mu_a: np.ndarray, var_a: np.ndarray, count_a: int,
                   mu_b: np.ndarray, var_b: np.ndarray, count_b: int
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Exact merge of two groups' population moments.

    Uses the two-group decomposition, so merging a group with a bitwise
    copy of itself reproduces the original moments exactly.
    """
    total = count_a + count_b
    w = count_a / total
    mu = w * mu_a + (1.0 - w) * mu_b
    diff = mu_a - mu_b
    var = w * var_a + (1.0 - w) * var_b + w * (1.0 - w) * diff * diff
    return mu, var


def _standardize_batch(x: Tensor, unit: BNUnit, mode: str,
                       update: bool = True) -> Tensor:
    """(x - mu) / sigma with batch statistics (train) or running statistics
    (eval). Gradients flow through the batch statistics."""
    axes = _reduce_axes(x.ndim)
    if mode == "train":
        mu = T.mean(x, axis=axes, keepdims=True)
        var = T.mean((x - mu) ** 2, axis=axes, keepdims=True)
        sigma = T.sqrt(var + unit.eps)
        out = (x - mu) / sigma
        if update:
            with T.no_grad():
                unit.update_running(mu.data.reshape(unit.channels).copy(),
                                    var.data.reshape(unit.channels).copy())
        return out
    rm = unit.running_mean
    rv = unit.running_var
    if x.ndim == 4:
        rm = rm[None, :, None, None]
        rv = rv[None, :, None, None]
    return (x - Tensor(rm)) / Tensor(np.sqrt(rv + unit.eps))


def _standardize_instance(x: Tensor, eps: float) -> Tensor:
    """Per-sample standardization: across channels for rank-2 features, per
    channel across space for rank-4."""
    if x.ndim == 2 and x.shape[1] == 1:
        raise T.ShapeError("IN undefined for single-feature rows")
    axes = _instance_axes(x.ndim)
    mu = T.mean(x, axis=axes, keepdims=True)
    var = T.mean((x - mu) ** 2, axis=axes, keepdims=True)
    return (x - mu) / T.sqrt(var + eps)


def _affine(xhat: Tensor, unit: BNUnit) -> Tensor:
    g = _channel_view(unit.gamma, xhat.ndim)
    b = _channel_view(unit.beta, xhat.ndim)
    return xhat * g + b


def _check_channels(unit: BNUnit, features: Tensor) -> None:
    c = features.shape[1]
    if c != unit.channels:
        raise T.ShapeError(
            f"bn_forward: unit has {unit.channels} channels, features have {c}")


def bn_forward(unit: BNUnit, features: Tensor, rows: np.ndarray | None = None,
               mode: str = "train") -> Tensor:
    """Normalize the selected rows with this unit.

    Train mode computes statistics over exactly those rows and updates the
    running averages; eval mode uses the running averages. The result holds
    the selected rows in the order given.
    """
    _check_mode(mode)
    _check_channels(unit, features)
    x = features if rows is None else T.gather_rows(features, np.asarray(rows, dtype=np.intp))
    if mode == "train" and x.shape[0] == 0:
        raise ValueError("bn_forward: empty sub-batch")
    return _affine(_standardize_batch(x, unit, mode), unit)


def on_forward(unit: ONUnit, features: Tensor, mode: str = "train") -> Tensor:
    """Mixture normalization: a softmax-weighted convex combination of batch
    and instance standardizations, then the affine transform."""
    _check_mode(mode)
    _check_channels(unit, features)
    w = T.softmax(unit.mix_logits, axis=0)
    w_bn = T.gather_rows(w, np.array([0]))
    w_in = T.gather_rows(w, np.array([1]))
    bn_hat = _standardize_batch(features, unit, mode)
    in_hat = _standardize_instance(features, unit.eps)
    return _affine(bn_hat * w_bn + in_hat * w_in, unit)


def _check_mode(mode: str) -> None:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")


# ---------------------------------------------------------------------------
# the bank


class BNBank:
    """Maps domain subsets to BN units for one normalization site.

    The default construction holds the units of the reduced combination
    scheme: every singleton plus every size-(N-1) subset. A subset key maps
    to exactly one unit, so partitions that share a subset share parameters.
    """

    def __init__(self, num_domains: int, channels: int,
                 momentum: float = 0.1, eps: float = 1e-5):
        if num_domains < 2:
            raise ValueError(f"BNBank: need >= 2 domains, got {num_domains}")
        self.num_domains = num_domains
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.units: dict[DomainSubset, BNUnit] = {}
        for s in scheme_subsets(num_domains):
            self.units[s] = BNUnit(channels, momentum, eps)

    def unit(self, subset: DomainSubset) -> BNUnit:
        try:
            return self.units[subset]
        except KeyError:
            raise ValueError(f"BNBank: no unit for subset {{{subset.label()}}}") from None

    def ensure_unit(self, subset: DomainSubset) -> BNUnit:
        subset.validate(self.num_domains)
        if subset not in self.units:
            self.units[subset] = BNUnit(self.channels, self.momentum, self.eps)
        return self.units[subset]

    def subsets(self) -> list[DomainSubset]:
        return sorted(self.units, key=lambda s: (s.size, s.mask))

    def singletons(self) -> list[DomainSubset]:
        return [s for s in self.subsets() if s.size == 1]


def scheme_subsets(num_domains: int) -> list[DomainSubset]:
    """Subsets the reduced combination scheme requires: all singletons and
    all size-(N-1) subsets (identical for N = 2), in canonical order."""
    n = num_domains
    full = (1 << n) - 1
    keys = {DomainSubset.of(i) for i in range(n)}
    if n >= 3:
        keys |= {DomainSubset(full & ~(1 << i)) for i in range(n)}
    return sorted(keys, key=lambda s: (s.size, s.mask))


def partitioned_forward(bank: BNBank, partition: Partition, features: Tensor,
                        domain_ids: np.ndarray, mode: str = "train") -> Tensor:
    """Normalize each partition group's rows with that group's unit.

    Statistics are computed only within each group; the output preserves
    the input row order.
    """
    _check_mode(mode)
    domain_ids = np.asarray(domain_ids)
    if domain_ids.shape[0] != features.shape[0]:
        raise T.ShapeError(
            f"partitioned_forward: {domain_ids.shape[0]} domain ids for "
            f"{features.shape[0]} rows")
    present = np.unique(domain_ids)
    for d in present:
        partition.group_of(int(d))  # raises if a domain is not covered
    units = {group: bank.unit(group) for group in partition}
    num_rows = features.shape[0]
    out: Tensor | None = None
    for group, unit in units.items():
        sel = np.isin(domain_ids, group.indices)
        idx = np.flatnonzero(sel)
        if mode == "train" and idx.size < 2:
            raise ValueError(
                f"partitioned_forward: degenerate sub-batch for {{{group.label()}}} "
                f"({idx.size} rows)")
        if idx.size == 0:
            continue
        block = bn_forward(unit, features, idx, mode)
        placed = T.scatter_rows(block, idx, num_rows)
        out = placed if out is None else out + placed
    if out is None:
        raise ValueError("partitioned_forward: empty batch")
    return out
