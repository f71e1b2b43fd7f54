"""Spatial dependence estimation on feature maps.

For every displacement (i, j) inside a kernel's receptive field we ask how
much a pixel tells us about its (i, j)-shifted neighbour. Pixel/neighbour
pairs are pooled over samples, channels, and positions from one or more
feature-map batches, then scored either by normalized mutual information over
a discrete joint histogram (primary) or by absolute Pearson autocorrelation
(ablation). Scores land in a kernel-shaped matrix with entries in [0, 1],
entry (a, b) holding the displacement (a - kx//2, b - ky//2).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .scaling import ScalingMatrix


class EstimatorError(RuntimeError):
    """A dependence estimate could not be formed from the given feature maps."""


@dataclass(frozen=True)
class BinningConfig:
    """Histogram settings for the mutual-information estimator.

    ``value_range`` fixes the bin edges; when ``None`` it is taken from the
    pooled min/max of the sampled activations (recomputed per layer per
    refresh, since activations drift during training). ``redundancy_filter``
    drops pairs whose values are closer than a threshold: ``None`` is off,
    ``"auto"`` uses one bin width, a float is an explicit threshold.
    """

    bins: int = 32
    value_range: tuple[float, float] | None = None
    redundancy_filter: float | str | None = None

    def __post_init__(self) -> None:
        if self.bins < 2:
            raise ValueError(f"bins must be >= 2, got {self.bins}")
        rf = self.redundancy_filter
        if isinstance(rf, str) and rf != "auto":
            raise ValueError(f"redundancy_filter must be None, 'auto', or a float, got {rf!r}")
        if isinstance(rf, (int, float)) and not isinstance(rf, bool) and rf <= 0:
            raise ValueError("redundancy_filter threshold must be positive")


@dataclass(frozen=True)
class SpatialDependenceMatrix:
    """Per-displacement dependence scores in [0, 1], kernel-shaped."""

    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError(f"dependence values must be 2-D, got shape {values.shape}")
        if np.any(values < 0) or np.any(values > 1):
            raise ValueError("dependence values must lie in [0, 1]")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def kernel(self) -> tuple[int, int]:
        return self.values.shape  # type: ignore[return-value]

    def to_record(self, layer: str, epoch: int) -> dict:
        kx, ky = self.kernel
        return {
            "kind": "dependence",
            "layer": layer,
            "epoch": int(epoch),
            "kernel": [int(kx), int(ky)],
            "values": [float(v) for v in self.values.ravel()],
        }


def _check_maps(feature_maps: Sequence[np.ndarray]) -> list[np.ndarray]:
    if len(feature_maps) == 0:
        raise EstimatorError("no feature maps supplied")
    maps = []
    channels = None
    for idx, fm in enumerate(feature_maps):
        fm = np.asarray(fm)
        if fm.ndim != 4:
            raise ValueError(f"feature map {idx} must be rank-4, got shape {fm.shape}")
        if channels is None:
            channels = fm.shape[1]
        elif fm.shape[1] != channels:
            raise ValueError("feature maps must share a channel count")
        maps.append(fm)
    return maps


def _pooled_range(maps: Sequence[np.ndarray]) -> tuple[float, float]:
    lo = min(float(fm.min()) for fm in maps)
    hi = max(float(fm.max()) for fm in maps)
    return lo, hi


def _displaced_pairs(fm: np.ndarray, i: int, j: int) -> tuple[np.ndarray, np.ndarray]:
    """All in-bounds (pixel, neighbour) value pairs for displacement (i, j)."""
    h, w = fm.shape[2], fm.shape[3]
    if abs(i) >= h or abs(j) >= w:
        raise EstimatorError(
            f"displacement ({i}, {j}) exceeds spatial extent {h}x{w}"
        )
    hs, he = max(0, -i), h - max(0, i)
    ws, we = max(0, -j), w - max(0, j)
    p = fm[:, :, hs:he, ws:we]
    q = fm[:, :, hs + i : he + i, ws + j : we + j]
    return p.ravel(), q.ravel()


def _bin_indices(values: np.ndarray, lo: float, hi: float, bins: int) -> np.ndarray:
    """Uniform bin index per value over [lo, hi]; hi lands in the last bin.

    A degenerate range (hi <= lo) maps everything to bin 0.
    """
    if hi <= lo:
        return np.zeros(values.shape, dtype=np.int64)
    idx = ((values - lo) * (bins / (hi - lo))).astype(np.int64)
    return np.clip(idx, 0, bins - 1)


def _resolve_delta(cfg: BinningConfig, lo: float, hi: float) -> float | None:
    if cfg.redundancy_filter == "auto":
        return (hi - lo) / cfg.bins
    return cfg.redundancy_filter


def collect_pairs(feature_maps: Sequence[np.ndarray], displacement: tuple[int, int],
                  cfg: BinningConfig) -> np.ndarray:
    """Joint (bins x bins) histogram of pixel/neighbour pairs over all maps.

    Pairs are accumulated map by map in input order. With the redundancy
    filter on, pairs with |p - q| below the threshold are dropped before
    binning; an empty surviving pair set is an error.
    """
    maps = _check_maps(feature_maps)
    i, j = displacement
    lo, hi = cfg.value_range if cfg.value_range is not None else _pooled_range(maps)
    delta = _resolve_delta(cfg, lo, hi)
    counts = np.zeros(cfg.bins * cfg.bins, dtype=np.int64)
    for fm in maps:
        p, q = _displaced_pairs(fm, i, j)
        if delta is not None:
            keep = np.abs(p - q) >= delta
            p, q = p[keep], q[keep]
        if p.size == 0:
            continue
        joint = _bin_indices(p, lo, hi, cfg.bins) * cfg.bins + _bin_indices(q, lo, hi, cfg.bins)
        counts += np.bincount(joint, minlength=cfg.bins * cfg.bins)
    if counts.sum() == 0:
        raise EstimatorError(
            f"no pairs collected for displacement ({i}, {j})"
            + (" after redundancy filtering" if delta is not None else "")
        )
    return counts.reshape(cfg.bins, cfg.bins).astype(np.float64)


def _entropy(p: np.ndarray) -> float:
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def normalized_mi(joint: np.ndarray) -> float:
    """Normalized mutual information (H(P) + H(Q) - H(P,Q)) / H(P,Q) of a joint histogram.

    Entropies are in nats; the unit cancels. A deterministic joint (all mass
    in one cell, H(P,Q) = 0) scores 0 by convention. The result is clamped to
    [0, 1].
    """
    joint = np.asarray(joint, dtype=np.float64)
    if joint.ndim != 2:
        raise ValueError(f"joint histogram must be 2-D, got shape {joint.shape}")
    if np.any(joint < 0):
        raise ValueError("joint histogram counts must be non-negative")
    total = joint.sum()
    if total == 0:
        raise ValueError("joint histogram is empty")
    p = joint / total
    h_joint = _entropy(p.ravel())
    if h_joint == 0.0:
        return 0.0
    h_p = _entropy(p.sum(axis=1))
    h_q = _entropy(p.sum(axis=0))
    return float(np.clip((h_p + h_q - h_joint) / h_joint, 0.0, 1.0))


def _displacements(kernel_shape: tuple[int, int]):
    kx, ky = kernel_shape
    if kx < 1 or ky < 1:
        raise ValueError(f"kernel dims must be >= 1, got {kernel_shape}")
    for a in range(kx):
        for b in range(ky):
            yield a, b, a - kx // 2, b - ky // 2


def spatial_dependence_mi(feature_maps: Sequence[np.ndarray], kernel_shape: tuple[int, int],
                          cfg: BinningConfig) -> SpatialDependenceMatrix:
    """Normalized-MI dependence matrix over the kernel's receptive field.

    The bin range is fixed once from the pooled activations and reused for
    every displacement. The redundancy filter is skipped at displacement
    (0, 0): those pairs are self-pairs and would all be dropped, while their
    dependence is what anchors the center of the matrix.

    With the filter off, each map is digitized once and the per-displacement
    joints are bincounts over the shared index arrays; the counts are
    identical to per-displacement ``collect_pairs`` calls, just cheaper.
    """
    maps = _check_maps(feature_maps)
    if cfg.value_range is None:
        cfg = replace(cfg, value_range=_pooled_range(maps))
    lo, hi = cfg.value_range
    delta = _resolve_delta(cfg, lo, hi)
    index_maps = [_bin_indices(fm, lo, hi, cfg.bins) for fm in maps]
    values = np.zeros(kernel_shape, dtype=np.float64)
    for a, b, i, j in _displacements(kernel_shape):
        if delta is not None and (i, j) != (0, 0):
            values[a, b] = normalized_mi(collect_pairs(maps, (i, j), cfg))
            continue
        counts = np.zeros(cfg.bins * cfg.bins, dtype=np.int64)
        got = 0
        for im in index_maps:
            ip, iq = _displaced_pairs(im, i, j)
            counts += np.bincount(ip * cfg.bins + iq, minlength=cfg.bins * cfg.bins)
            got += ip.size
        if got == 0:
            raise EstimatorError(f"no pairs collected for displacement ({i}, {j})")
        values[a, b] = normalized_mi(counts.reshape(cfg.bins, cfg.bins).astype(np.float64))
    return SpatialDependenceMatrix(values)


def spatial_dependence_autocorr(feature_maps: Sequence[np.ndarray],
                                kernel_shape: tuple[int, int]) -> SpatialDependenceMatrix:
    """Absolute-Pearson-correlation dependence matrix over the receptive field.

    Pairs are pooled unfiltered. The absolute value keeps the score usable as
    a scaling source (raw correlation may be negative); a zero-variance
    marginal yields 0 by convention.
    """
    maps = _check_maps(feature_maps)
    values = np.zeros(kernel_shape, dtype=np.float64)
    for a, b, i, j in _displacements(kernel_shape):
        ps, qs = [], []
        for fm in maps:
            p, q = _displaced_pairs(fm, i, j)
            ps.append(p)
            qs.append(q)
        p = np.concatenate(ps)
        q = np.concatenate(qs)
        if p.size == 0:
            raise EstimatorError(f"no pairs collected for displacement ({i}, {j})")
        var_p = p.var()
        var_q = q.var()
        if var_p <= 0 or var_q <= 0:
            values[a, b] = 0.0
            continue
        cov = ((p - p.mean()) * (q - q.mean())).mean()
        values[a, b] = min(abs(cov / np.sqrt(var_p * var_q)), 1.0)
    return SpatialDependenceMatrix(values)


def alpha_beta_scaling(alpha: float, beta: float) -> ScalingMatrix:
    """Two-parameter 3x3 scaling: center 1, edges 1/alpha, corners 1/beta.

    The closing factor 9 / (1 + 4/alpha + 4/beta) makes the mean exactly 1,
    so alpha and beta read as center-to-edge and center-to-corner ratios.
    """
    if alpha <= 0 or beta <= 0:
        raise ValueError(f"alpha and beta must be positive, got alpha={alpha}, beta={beta}")
    e, c = 1.0 / alpha, 1.0 / beta
    base = np.array([
        [c, e, c],
        [e, 1.0, e],
        [c, e, c],
    ])
    factor = 9.0 / (1.0 + 4.0 * e + 4.0 * c)
    return ScalingMatrix(base * factor)
