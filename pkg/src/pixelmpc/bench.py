"""Wall-clock microbenchmarks of the flow model's batched inference."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .dof import BatchFlowPredictor
from .neural import NetworkSpec, NetworkWeights

CONTROL_PERIOD_MS = 25.0


@dataclass(frozen=True)
class BenchRow:
    batch: int
    horizon: int
    mean_ms: float
    two_sigma_ms: float
    max_ms: float


def bench_dof(weights: NetworkWeights, spec: NetworkSpec,
              batch_sizes=(1, 512), horizons=(1, 80), reps: int = 200,
              seed: int = 0):
    """Latency of batch x sequential-horizon inference; returns rows + verdict.

    The verdict is whether the largest (batch, horizon) cell fits inside
    one control period (25 ms).
    """
    rng = np.random.default_rng(seed)
    rows = []
    for batch in batch_sizes:
        predictor = BatchFlowPredictor(weights, spec, batch)
        x = rng.standard_normal((batch, 10)).astype(np.float32)
        x[:, 0] = 1.0  # plausible attitude scale; values don't affect timing
        for horizon in horizons:
            for _ in range(3):  # warmup
                for _t in range(horizon):
                    predictor(x)
            times = np.empty(reps)
            for r in range(reps):
                t0 = time.perf_counter()
                for _t in range(horizon):
                    predictor(x)
                times[r] = time.perf_counter() - t0
            times *= 1e3
            rows.append(BenchRow(batch, horizon, float(times.mean()),
                                 float(2 * times.std(ddof=1)), float(times.max())))
    big = max(rows, key=lambda r: (r.batch, r.horizon))
    fits_budget = big.mean_ms <= CONTROL_PERIOD_MS
    return rows, fits_budget
