import numpy as np
import pytest

from feedloc.feedbackgen import FeedbackConfig, build_qnf_dataset
from feedloc.refsample import fit_beta, sample_reference_pools
from feedloc.synthworld import WorldConfig, embedder_for, generate_splits


@pytest.fixture(scope="session")
def world_cfg():
    return WorldConfig(seed=11)


@pytest.fixture(scope="session")
def emb(world_cfg):
    return embedder_for(world_cfg)


@pytest.fixture(scope="session")
def small_world(world_cfg, emb):
    return generate_splits(world_cfg, {"train": 12, "test": 6}, emb)


@pytest.fixture(scope="session")
def small_qnf(small_world, emb):
    """Feedback samples per split for the small world."""
    beta = fit_beta([q.gt_span.duration for ep in small_world["train"] for q in ep.queries])
    out = {}
    for split, eps in small_world.items():
        pools = sample_reference_pools(eps, beta, 0)
        out[split] = build_qnf_dataset(eps, pools, emb, FeedbackConfig(), split=split)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
