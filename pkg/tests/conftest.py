import numpy as np
import pytest

from zomg.model import AttentionPoolParams, PretrainConfig, pretrain
from zomg.numerics import Rng, l2_normalize
from zomg.synth import SynthSpec, generate_instance


def make_instances(spec: SynthSpec, count: int, base_seed: int = 7):
    rng = Rng(base_seed)
    return [generate_instance(spec, rng, f"inst-{i:04d}") for i in range(count)]


def pretrain_pairs(instances):
    return [
        (inst.frames, l2_normalize(np.mean([q.embedding for q in inst.queries], axis=0)))
        for inst in instances
    ]


def random_pool_params(rng: Rng, d: int) -> AttentionPoolParams:
    return AttentionPoolParams(
        np.eye(d) + 0.5 * rng.normal((d, d)),
        np.eye(d) + 0.5 * rng.normal((d, d)),
        0.5 * rng.normal(d),
    )


@pytest.fixture(scope="session")
def small_world():
    """A handful of default-spec instances plus weights pretrained on them."""
    instances = make_instances(SynthSpec(), count=8, base_seed=7)
    params, trace = pretrain(pretrain_pairs(instances), PretrainConfig(steps=60, seed=0))
    return instances, params, trace
