"""Synthetic merge demonstrations with known feature-saliency dynamics.

The generator draws per-demonstration feature series for the six model input
features and produces the target (``dx_end``) as a weight-scheduled linear
combination of them plus Gaussian noise. The weight schedule w(alpha) is the
ground truth: because the generator is linear in the features at every
moment, the exact Shapley attribution of the *true* generator model against a
mean background is w_i(alpha) * (x_i - mean(x_i)) in closed form, which
downstream tests use as an oracle.

A converging schedule (near-uniform weights early, two or three dominant
features late) together with early-heavy temporal feature noise yields a
dataset on which a correct pipeline must measure decreasing KL divergence and
increasing mutual information across the decision process.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, RejectionError
from .ingest import FEATURE_NAMES, MergeDemonstration

# The six generated input features (dx_end is the target, dy_bdry is geometry).
INPUT_FEATURES = FEATURE_NAMES[:6]
N_INPUTS = len(INPUT_FEATURES)

# Per-feature base level mean/std across demonstrations, and the deterministic
# per-process drift added on top (units as in ingest.FEATURE_NAMES).
BASE_MEAN = np.array([25.0, 0.0, 8.0, 1.0, 18.0, 0.0])
BASE_STD = np.array([8.0, 2.0, 1.5, 0.4, 6.0, 2.0])
DRIFT = np.array([-6.0, 1.5, 4.0, -0.8, -4.0, 1.0])

# AR(1) temporal noise on the features; innovations shrink exponentially with
# alpha so early moments are noisy and late moments are steady.
AR_COEFF = 0.2
FRAME_MS = 100


def uniform_schedule(n_points: int = 21, n_features: int = N_INPUTS) -> np.ndarray:
    """Constant schedule: every feature carries equal weight at every moment."""
    return np.full((n_points, n_features), 1.0 / n_features)


def converging_schedule(
    n_points: int = 21,
    final_weights=None,
    rate: float = 4.0,
    n_features: int = N_INPUTS,
) -> np.ndarray:
    """Schedule that decays from uniform toward ``final_weights``.

    w(alpha) = final + (uniform - final) * exp(-rate * alpha). Both endpoints
    sum to one, so every row does. Default final weights concentrate on
    vx_ego, dv_lead and dv_lag.
    """
    if final_weights is None:
        final_weights = np.array([0.04, 0.30, 0.45, 0.03, 0.03, 0.15])
    final = np.asarray(final_weights, dtype=float)
    if final.shape != (n_features,):
        raise ConfigError(f"final_weights must have {n_features} entries")
    alphas = np.linspace(0.0, 1.0, n_points)[:, None]
    uniform = np.full(n_features, 1.0 / n_features)
    return final[None, :] + (uniform - final)[None, :] * np.exp(-rate * alphas)


@dataclass
class SynthConfig:
    """Knobs of the synthetic generator.

    ``schedule`` holds per-moment weight rows sampled at evenly spaced alphas;
    rows are interpolated to each demonstration's own frame grid. noise_std is
    the Gaussian noise on the target. temporal_noise_std and its decay rate
    control the AR(1) feature noise; drift_scale scales the deterministic
    per-process feature trends (0 makes features stationary per demo).
    """

    n_demos: int = 100
    duration_range: tuple[float, float] = (4.0, 8.0)  # seconds
    schedule: np.ndarray = field(default_factory=converging_schedule)
    noise_std: float = 0.0
    drift_scale: float = 1.0
    temporal_noise_std: float = 1.0
    temporal_noise_decay: float = 3.0
    seed: int = 0

    def validate(self) -> None:
        sched = np.asarray(self.schedule, dtype=float)
        if sched.ndim != 2 or sched.shape[0] < 2 or sched.shape[1] != N_INPUTS:
            raise ConfigError(
                f"schedule must be (n_points >= 2, {N_INPUTS}), got {sched.shape}"
            )
        if np.any(sched < 0.0):
            raise ConfigError("schedule weights must be nonnegative")
        if np.max(np.abs(sched.sum(axis=1) - 1.0)) > 1e-9:
            raise ConfigError("schedule rows must sum to 1")
        if self.n_demos < 2:
            raise RejectionError("n_demos must be >= 2")
        lo, hi = self.duration_range
        if not (0.0 < lo <= hi):
            raise ConfigError("duration_range must satisfy 0 < lo <= hi")
        if self.noise_std < 0.0 or self.temporal_noise_std < 0.0:
            raise ConfigError("noise levels must be >= 0")


def schedule_at(schedule: np.ndarray, alpha_fracs: np.ndarray) -> np.ndarray:
    """Interpolate schedule rows at process fractions in [0, 1]."""
    sched = np.asarray(schedule, dtype=float)
    knots = np.linspace(0.0, 1.0, sched.shape[0])
    out = np.empty((len(alpha_fracs), sched.shape[1]))
    for m in range(sched.shape[1]):
        out[:, m] = np.interp(alpha_fracs, knots, sched[:, m])
    return out


def true_target(inputs: np.ndarray, alpha_fracs: np.ndarray, schedule: np.ndarray) -> np.ndarray:
    """Noise-free target: per-moment schedule weights applied to the inputs."""
    w = schedule_at(schedule, np.asarray(alpha_fracs, dtype=float))
    return np.einsum("nm,nm->n", w, np.asarray(inputs, dtype=float))


def _one_demo(demo_id: int, config: SynthConfig) -> MergeDemonstration:
    rng = np.random.default_rng(config.seed ^ demo_id)
    lo, hi = config.duration_range
    duration = rng.uniform(lo, hi)
    n = int(round(duration * 10.0)) + 1
    alphas = np.arange(n) / (n - 1)

    base = BASE_MEAN + BASE_STD * rng.standard_normal(N_INPUTS)
    x = base[None, :] + config.drift_scale * DRIFT[None, :] * alphas[:, None]

    if config.temporal_noise_std > 0.0:
        sigma = config.temporal_noise_std * np.exp(-config.temporal_noise_decay * alphas)
        noise = np.empty((n, N_INPUTS))
        noise[0] = sigma[0] * rng.standard_normal(N_INPUTS)
        for j in range(1, n):
            noise[j] = AR_COEFF * noise[j - 1] + sigma[j] * rng.standard_normal(N_INPUTS)
        x = x + noise

    target = true_target(x, alphas, config.schedule)
    if config.noise_std > 0.0:
        target = target + config.noise_std * rng.standard_normal(n)

    # Boundary offset: positive until the final frame, negative there, so the
    # crossing lands exactly on the last index.
    d0 = rng.uniform(2.0, 4.0)
    dy = d0 * ((n - 1 - np.arange(n)) - 0.5) / (n - 1)

    features = np.empty((n, len(FEATURE_NAMES)))
    features[:, :N_INPUTS] = x
    features[:, FEATURE_NAMES.index("dx_end")] = target
    features[:, FEATURE_NAMES.index("dy_bdry")] = dy
    return MergeDemonstration(
        demo_id=demo_id,
        ego_track_id=demo_id,
        timestamps_ms=np.arange(n, dtype=np.int64) * FRAME_MS,
        features=features,
        crossing_index=n - 1,
    )


def generate_synthetic_dataset(config: SynthConfig) -> list[MergeDemonstration]:
    """Deterministic synthetic dataset; demo substreams are seed ^ demo_id."""
    config.validate()
    return [_one_demo(i, config) for i in range(config.n_demos)]
