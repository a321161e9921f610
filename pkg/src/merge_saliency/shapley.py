"""Exact Shapley-value feature attribution for the trained predictor.

A coalition is a subset of input features treated as present. The exact
Shapley value of feature i is the gamma-weighted average of its marginal
contribution v(S + i) - v(S) over all coalitions S of the remaining
features, with gamma(|S|) = |S|! (M - |S| - 1)! / M!. Enumeration is exact
(2^M coalition values, each evaluated once) and guarded to M <= 20.

Two value functions are provided. The masking variant replaces absent
features, across the whole window, by background reference values and
queries the one trained model. The retraining variant trains one model per
feature subset (cached, deterministic sub-seeds) and queries the subset
model; its empty-coalition value is the training-target mean.

Attributions satisfy the additive-explanation guarantees by construction:
base value plus attributions equals the explained output (checked to 1e-9),
features the value function ignores get exactly zero, and interchangeable
features get equal attributions.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from math import factorial
from typing import Callable, Sequence

import numpy as np

from .errors import ContractViolation, NumericFault, RejectionError
from .ingest import FEATURE_NAMES, AlignedDemonstration
from .lstm import (NetworkParams, TrainConfig, padded_window, predict_batch,
                   select_series, train)

CoalitionMask = tuple[bool, ...]

MAX_ENUM_FEATURES = 20
LOCAL_ACCURACY_TOL = 1e-9


def mask_bits(mask_int: int, m: int) -> CoalitionMask:
    return tuple(bool(mask_int >> i & 1) for i in range(m))


@lru_cache(maxsize=None)
def _combination_matrix(m: int) -> np.ndarray:
    """C with phi = C @ v over all 2^m coalition values (feature i = bit i)."""
    gamma = [factorial(k) * factorial(m - k - 1) / factorial(m) for k in range(m)]
    c = np.zeros((m, 1 << m))
    for s in range(1 << m):
        size = bin(s).count("1")
        for i in range(m):
            if not s >> i & 1:
                w = gamma[size]
                c[i, s | 1 << i] += w
                c[i, s] -= w
    return c


def shapley_exact(value_fn: Callable[[CoalitionMask], float], m: int) -> tuple[float, np.ndarray]:
    """Exact Shapley attribution of an m-feature value function.

    Returns (phi0, phi) with phi0 = v(empty coalition). value_fn is called
    exactly once per coalition, 2^m calls in total.
    """
    if m < 1 or m > MAX_ENUM_FEATURES:
        raise RejectionError(f"exact enumeration supports 1..{MAX_ENUM_FEATURES} features, got {m}")
    table = np.array([float(value_fn(mask_bits(s, m))) for s in range(1 << m)])
    phi = _combination_matrix(m) @ table
    return float(table[0]), phi


def shapley_from_table(table: np.ndarray, m: int) -> np.ndarray:
    """Vectorized combination for precomputed value tables (..., 2^m) -> (..., m)."""
    table = np.asarray(table, dtype=float)
    if table.shape[-1] != 1 << m:
        raise ContractViolation(f"value table must have {1 << m} entries, got {table.shape[-1]}")
    return table @ _combination_matrix(m).T


class Background:
    """Reference windows representing feature absence, one set per grid moment.

    Holds K aligned reference series; refs(index) stacks their windows ending
    at that grid index. The default is K = 1 with the training-mean series.
    """

    def __init__(self, series: np.ndarray, window: int):
        series = np.asarray(series, dtype=float)
        if series.ndim == 2:
            series = series[None, :, :]
        if series.shape[0] < 1:
            raise ContractViolation("background needs at least one reference series")
        self.series = series  # (K, A, M)
        self.window = window

    @property
    def k(self) -> int:
        return int(self.series.shape[0])

    def refs(self, index: int) -> np.ndarray:
        return np.stack([padded_window(s, index, self.window) for s in self.series])


def mean_background(train_demos: Sequence[AlignedDemonstration],
                    input_features: Sequence[str], window: int) -> Background:
    """K = 1 background: the per-moment mean of the training split."""
    stacks = [select_series(d, input_features, input_features[0])[0] for d in train_demos]
    return Background(np.mean(np.stack(stacks), axis=0), window)


def sampled_background(train_demos: Sequence[AlignedDemonstration],
                       input_features: Sequence[str], window: int,
                       k: int, seed: int) -> Background:
    """K reference series drawn without replacement from the training split."""
    if k < 1:
        raise ContractViolation("background size k must be >= 1")
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(train_demos), size=min(k, len(train_demos)), replace=False)
    stacks = [select_series(train_demos[i], input_features, input_features[0])[0]
              for i in sorted(pick)]
    return Background(np.stack(stacks), window)


def value_mask(predict_fn: Callable[[np.ndarray], np.ndarray], window: np.ndarray,
               mask: CoalitionMask, refs: np.ndarray) -> float:
    """Masking value function: absent features take background values window-wide."""
    window = np.asarray(window, dtype=float)
    refs = np.asarray(refs, dtype=float)
    if refs.ndim == 2:
        refs = refs[None, :, :]
    if refs.shape[1:] != window.shape or len(mask) != window.shape[1]:
        raise ContractViolation(
            f"mask/window/refs disagree: {len(mask)} bits, window {window.shape}, refs {refs.shape}"
        )
    bits = np.asarray(mask, dtype=bool)
    masked = np.where(bits[None, None, :], window[None, :, :], refs)
    return float(np.mean(predict_fn(masked)))


@dataclass(frozen=True)
class ShapAttribution:
    phi0: float
    phi: np.ndarray  # (M,)
    fx: float        # model output being explained


@dataclass
class SaliencyTensor:
    """Shapley values for every (demonstration, grid moment, feature)."""

    values: np.ndarray          # (D, A, M) attributions
    feature_values: np.ndarray  # (D, A, M) raw inputs at the explained moment
    fx: np.ndarray              # (D, A)
    phi0: np.ndarray            # (D, A)
    demo_ids: tuple[int, ...]
    alphas: np.ndarray          # (A,)
    feature_names: tuple[str, ...]
    variant: str


@dataclass
class SaliencySummary:
    alpha: float
    feature_names: tuple[str, ...]
    mean_abs_phi: np.ndarray  # (M,)
    mean_phi: np.ndarray      # (M,)
    phis: np.ndarray          # (D, M) raw attribution samples
    values: np.ndarray        # (D, M) matching feature values


def _check_local_accuracy(phi0, phi, fx) -> None:
    gap = np.max(np.abs(phi0 + phi.sum(axis=-1) - fx))
    if gap > LOCAL_ACCURACY_TOL:
        raise NumericFault(f"additivity violated: |phi0 + sum(phi) - fx| = {gap:.3e}")


def _alpha_index(alphas: np.ndarray, alpha: float) -> int:
    hits = np.where(np.isclose(alphas, alpha, rtol=0.0, atol=1e-9))[0]
    if hits.shape[0] != 1:
        raise ContractViolation(f"alpha {alpha} is not on the grid")
    return int(hits[0])


def _mask_table(net: NetworkParams, windows: np.ndarray, refs: np.ndarray) -> np.ndarray:
    """Coalition values for a batch of windows: (D, W, M) -> (D, 2^M)."""
    d, w, m = windows.shape
    bits = np.array([[s >> i & 1 for i in range(m)] for s in range(1 << m)], dtype=bool)
    table = np.zeros((d, 1 << m))
    for ref in refs:  # average the model output over the K references
        masked = np.where(bits[None, :, None, :], windows[:, None, :, :], ref[None, None, :, :])
        table += predict_batch(net, masked.reshape(d * (1 << m), w, m)).reshape(d, 1 << m)
    return table / refs.shape[0]


class SubsetRetrainer:
    """Trains and caches one model per feature coalition.

    The sub-seed flips the seed bits of the absent features, so the full
    coalition reproduces the main model exactly. The empty coalition is the
    constant training-target mean.
    """

    def __init__(self, train_demos: Sequence[AlignedDemonstration], config: TrainConfig):
        self.demos = list(train_demos)
        self.config = config
        self.m = len(config.input_features)
        targets = [select_series(d, config.input_features, config.output_feature)[1]
                   for d in self.demos]
        self.target_mean = float(np.concatenate(targets).mean())
        self._cache: dict[int, NetworkParams] = {}

    def model_for(self, mask: CoalitionMask) -> NetworkParams | None:
        mask_int = sum(1 << i for i, b in enumerate(mask) if b)
        if mask_int == 0:
            return None
        if mask_int not in self._cache:
            full = (1 << self.m) - 1
            subset = tuple(n for n, b in zip(self.config.input_features, mask) if b)
            cfg = TrainConfig(
                input_features=subset,
                output_feature=self.config.output_feature,
                window=self.config.window,
                hidden=self.config.hidden,
                dense=self.config.dense,
                epochs=self.config.epochs,
                batch_size=self.config.batch_size,
                lr=self.config.lr,
                seed=self.config.seed ^ (full ^ mask_int),
            )
            self._cache[mask_int], _ = train(self.demos, cfg)
        return self._cache[mask_int]

    def value(self, mask: CoalitionMask, window: np.ndarray) -> float:
        model = self.model_for(mask)
        if model is None:
            return self.target_mean
        cols = [i for i, b in enumerate(mask) if b]
        return float(predict_batch(model, window[None, :, cols])[0])


def explain_moment(net: NetworkParams, demo: AlignedDemonstration, alpha: float,
                   background: Background, variant: str = "mask",
                   retrainer: SubsetRetrainer | None = None) -> ShapAttribution:
    """Attribution of the prediction at one grid moment of one demonstration."""
    m = len(net.input_features)
    idx = _alpha_index(demo.alphas, alpha)
    series, _ = select_series(demo, net.input_features, net.output_feature)
    window = padded_window(series, idx, net.window)
    if variant == "mask":
        refs = background.refs(idx)
        phi0, phi = shapley_exact(
            lambda mask: value_mask(lambda x: predict_batch(net, x), window, mask, refs), m)
    elif variant == "retrain":
        if retrainer is None:
            raise ContractViolation("retrain variant needs a SubsetRetrainer")
        phi0, phi = shapley_exact(lambda mask: retrainer.value(mask, window), m)
    else:
        raise ContractViolation(f"unknown variant {variant!r}")
    fx = float(phi0 + phi.sum())
    _check_local_accuracy(phi0, phi, fx)
    return ShapAttribution(phi0=phi0, phi=phi, fx=fx)


def explain_split(net: NetworkParams, demos: Sequence[AlignedDemonstration],
                  background: Background, variant: str = "mask",
                  retrainer: SubsetRetrainer | None = None,
                  threads: int = 1) -> SaliencyTensor:
    """Shapley values for every demo at every grid moment, batched per moment."""
    if not demos:
        raise RejectionError("nothing to explain")
    m = len(net.input_features)
    alphas = demos[0].alphas
    for d in demos:
        if not np.array_equal(d.alphas, alphas):
            raise ContractViolation("demonstrations are on different grids")
    series = np.stack([select_series(d, net.input_features, net.output_feature)[0]
                       for d in demos])  # (D, A, M)
    n_demos, n_alpha = series.shape[0], alphas.shape[0]

    def one_moment(idx: int):
        windows = np.stack([padded_window(series[d], idx, net.window)
                            for d in range(n_demos)])
        if variant == "mask":
            table = _mask_table(net, windows, background.refs(idx))
        elif variant == "retrain":
            table = np.empty((n_demos, 1 << m))
            for s in range(1 << m):
                mask = mask_bits(s, m)
                model = retrainer.model_for(mask)
                if model is None:
                    table[:, s] = retrainer.target_mean
                else:
                    cols = [i for i, b in enumerate(mask) if b]
                    table[:, s] = predict_batch(model, windows[:, :, cols])
        else:
            raise ContractViolation(f"unknown variant {variant!r}")
        phi = shapley_from_table(table, m)
        return table[:, 0], phi, table[:, (1 << m) - 1]

    if variant == "retrain" and retrainer is None:
        raise ContractViolation("retrain variant needs a SubsetRetrainer")

    results: list = [None] * n_alpha
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for idx, res in enumerate(pool.map(one_moment, range(n_alpha))):
                results[idx] = res
    else:
        for idx in range(n_alpha):
            results[idx] = one_moment(idx)

    values = np.empty((n_demos, n_alpha, m))
    phi0 = np.empty((n_demos, n_alpha))
    fx = np.empty((n_demos, n_alpha))
    for idx, (p0, phi, f) in enumerate(results):
        values[:, idx, :] = phi
        phi0[:, idx] = p0
        fx[:, idx] = f
    _check_local_accuracy(phi0, values, fx)
    return SaliencyTensor(
        values=values,
        feature_values=series.copy(),
        fx=fx,
        phi0=phi0,
        demo_ids=tuple(d.demo_id for d in demos),
        alphas=alphas.copy(),
        feature_names=tuple(net.input_features),
        variant=variant,
    )


def saliency_summary(tensor: SaliencyTensor, alpha: float) -> SaliencySummary:
    """Per-feature attribution summary at one moment: means plus raw pairs."""
    idx = _alpha_index(tensor.alphas, alpha)
    phis = tensor.values[:, idx, :]
    return SaliencySummary(
        alpha=float(tensor.alphas[idx]),
        feature_names=tensor.feature_names,
        mean_abs_phi=np.mean(np.abs(phis), axis=0),
        mean_phi=np.mean(phis, axis=0),
        phis=phis.copy(),
        values=tensor.feature_values[:, idx, :].copy(),
    )
