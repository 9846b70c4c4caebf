"""Synthetic task generators.

Two task families:

* QPSK symbol demodulation with per-task receiver impairments (phase
  rotation, IQ amplitude/phase imbalance, AWGN).  Complex samples are
  carried as real 2-vectors (I, Q).
* A toy Gaussian-blob classification task used for fast, well-separated
  property tests.

All sampling is driven by numpy Generators; helpers derive per-task
generators from (seed, domain, index) keys so parallel generation stays
reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

# Stream domains for train / validation / test task streams.
DOMAIN_TRAIN = 0
DOMAIN_VAL = 1
DOMAIN_TEST = 2

# QPSK constellation {-1-j, -1+j, 1+j, 1-j} as (I, Q) rows, indexed 0..3.
CONSTELLATION = np.array(
    [[-1.0, -1.0], [-1.0, 1.0], [1.0, 1.0], [1.0, -1.0]], dtype=np.float64
)
NUM_SYMBOLS = 4


def rng_for(seed: int, *key: int) -> np.random.Generator:
    """Deterministic generator for a (seed, key...) coordinate."""
    return np.random.default_rng([int(seed), *[int(k) for k in key]])


@dataclass
class Episode:
    """One task realization: n context pairs plus a single query pair."""

    context_x: np.ndarray  # (n, input_dim)
    context_y: np.ndarray  # (n,) int labels
    query_x: np.ndarray  # (input_dim,)
    query_y: int

    @property
    def n(self) -> int:
        return len(self.context_y)


@dataclass
class QpskTaskParams:
    """Receiver state for one demodulation task.

    phi: carrier phase offset (rad); epsilon: IQ amplitude imbalance;
    delta: IQ phase imbalance (rad); snr_db: SNR in dB (gamma = linear SNR).
    """

    phi: float
    epsilon: float
    delta: float
    snr_db: float

    @property
    def gamma(self) -> float:
        return float(10.0 ** (self.snr_db / 10.0))


def sample_task(rng: np.random.Generator) -> QpskTaskParams:
    """Draw task parameters: phi~U(0,2pi), eps~U(0,0.3), delta~U(0,pi/6), SNR~U(0,10) dB."""
    return QpskTaskParams(
        phi=float(rng.uniform(0.0, 2.0 * np.pi)),
        epsilon=float(rng.uniform(0.0, 0.3)),
        delta=float(rng.uniform(0.0, np.pi / 6.0)),
        snr_db=float(rng.uniform(0.0, 10.0)),
    )


def impair(y_index: int, params: QpskTaskParams) -> np.ndarray:
    """Deterministic IQ impairment of constellation point y_index.

    Applies diag(1+eps, 1-eps) @ [[cos d, -sin d], [-sin d, cos d]] to the
    (I, Q) vector.  Note both off-diagonal entries are -sin(d): the mixing
    matrix is deliberately not a rotation.
    """
    if not 0 <= y_index < NUM_SYMBOLS:
        raise ValueError(f"symbol index {y_index} out of range")
    c, s = np.cos(params.delta), np.sin(params.delta)
    mix = np.array([[c, -s], [-s, c]])
    scale = np.diag([1.0 + params.epsilon, 1.0 - params.epsilon])
    return scale @ mix @ CONSTELLATION[y_index]


def sample_observation(
    y_index: int,
    params: QpskTaskParams,
    rng: np.random.Generator,
    noiseless: bool = False,
) -> np.ndarray:
    """Received sample x = e^{j phi} f(y) + v, v ~ CN(0, 1/gamma), as (I, Q).

    noiseless=True drops v (the gamma -> inf limit used in tests).
    """
    yi, yq = impair(y_index, params)
    c, s = np.cos(params.phi), np.sin(params.phi)
    x = np.array([c * yi - s * yq, s * yi + c * yq])
    if not noiseless:
        # circular complex noise: per-component variance 1/(2 gamma)
        x = x + rng.normal(0.0, np.sqrt(0.5 / params.gamma), size=2)
    return x


def sample_episode(
    params: QpskTaskParams, n: int, rng: np.random.Generator
) -> Episode:
    """n i.i.d. (x, y) context pairs plus one query pair, labels uniform."""
    ys = rng.integers(0, NUM_SYMBOLS, size=n + 1)
    xs = np.stack([sample_observation(int(y), params, rng) for y in ys])
    return Episode(
        context_x=xs[:n],
        context_y=ys[:n].astype(np.int64),
        query_x=xs[n],
        query_y=int(ys[n]),
    )


@dataclass
class GaussianTaskParams:
    means: np.ndarray  # (K, 2)
    sigma: float
    num_classes: int = field(init=False)

    def __post_init__(self):
        self.num_classes = len(self.means)


def sample_gaussian_task(
    rng: np.random.Generator,
    num_classes: int = 4,
    box: float = 4.0,
    sigma: float = 0.25,
    min_separation: float | None = None,
) -> GaussianTaskParams:
    """K blob means drawn uniformly in [-box, box]^2.

    With min_separation set, rejection-samples until all pairwise mean
    distances meet it (use ~10*sigma for a near-separable testbed).
    """
    while True:
        means = rng.uniform(-box, box, size=(num_classes, 2))
        if min_separation is None:
            break
        d = np.linalg.norm(means[:, None] - means[None, :], axis=-1)
        if (d + np.eye(num_classes) * 1e9 >= min_separation).all():
            break
    return GaussianTaskParams(means=means, sigma=float(sigma))


def sample_gaussian_episode(
    params: GaussianTaskParams, n: int, rng: np.random.Generator
) -> Episode:
    k = params.num_classes
    ys = rng.integers(0, k, size=n + 1)
    xs = params.means[ys] + rng.normal(0.0, params.sigma, size=(n + 1, 2))
    return Episode(
        context_x=xs[:n],
        context_y=ys[:n].astype(np.int64),
        query_x=xs[n],
        query_y=int(ys[n]),
    )


def dump_episodes(path, episodes: list[Episode]) -> None:
    """Write episodes as one JSON record per line."""
    with open(path, "w") as fh:
        for ep in episodes:
            rec = {
                "context_x": ep.context_x.tolist(),
                "context_y": ep.context_y.tolist(),
                "query_x": ep.query_x.tolist(),
                "query_y": int(ep.query_y),
            }
            fh.write(json.dumps(rec) + "\n")


def load_episodes(path) -> list[Episode]:
    out = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            out.append(
                Episode(
                    context_x=np.asarray(rec["context_x"], dtype=np.float64),
                    context_y=np.asarray(rec["context_y"], dtype=np.int64),
                    query_x=np.asarray(rec["query_x"], dtype=np.float64),
                    query_y=int(rec["query_y"]),
                )
            )
    return out
