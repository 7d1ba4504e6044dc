import numpy as np
import pytest

from equirouter.dataset import ModelInfo, RoutingTable, SynthConfig, generate_synthetic


def make_table(perf, cost, embeddings=None) -> RoutingTable:
    """Hand-built table from perf/cost matrices (embeddings optional noise)."""
    perf = np.asarray(perf, dtype=np.float64)
    cost = np.asarray(cost, dtype=np.float64)
    n, k = perf.shape
    if embeddings is None:
        rng = np.random.Generator(np.random.Philox(7))
        embeddings = rng.standard_normal((n, 3))
    models = tuple(ModelInfo(j, f"m{j}", float(j)) for j in range(k))
    return RoutingTable(
        models=models,
        query_ids=tuple(f"q{i}" for i in range(n)),
        embeddings=np.asarray(embeddings, dtype=np.float64),
        perf=perf,
        cost=cost,
    )


@pytest.fixture(scope="session")
def small_synth() -> RoutingTable:
    return generate_synthetic(
        SynthConfig(
            n_queries=400,
            n_models=4,
            embed_dim=12,
            tie_fraction=0.8,
            margin_scale=0.2,
            cost_spread=10.0,
            noise_seed=11,
        )
    )
