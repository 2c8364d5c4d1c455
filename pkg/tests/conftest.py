import pytest

from moe_planner import (
    WorkloadSpec,
    a5000_like,
    preset,
    synth_profile,
    tiny_test_hw,
)


@pytest.fixture(scope="session")
def tiny_model():
    return preset("tiny-test")


@pytest.fixture(scope="session")
def tiny_hw():
    return tiny_test_hw()


@pytest.fixture(scope="session")
def tiny_tables(tiny_hw, tiny_model):
    return synth_profile(tiny_hw, tiny_model)


@pytest.fixture(scope="session")
def tiny_workload():
    return WorkloadSpec(prompt_len=64, decode_len=32, num_sequences=1024, phase="decode")


@pytest.fixture(scope="session")
def mixtral_model():
    return preset("mixtral-8x7b")


@pytest.fixture(scope="session")
def mixtral_hw():
    # C1-shaped host: 256 GB
    return a5000_like(256_000_000_000)


@pytest.fixture(scope="session")
def mixtral_tables(mixtral_hw, mixtral_model):
    return synth_profile(mixtral_hw, mixtral_model)


@pytest.fixture(scope="session")
def mixtral_workload():
    return WorkloadSpec(prompt_len=512, decode_len=256, num_sequences=10_000, phase="decode")


@pytest.fixture(scope="session")
def deepseek_model():
    return preset("deepseek-v2-like")


@pytest.fixture(scope="session")
def deepseek_hw():
    # C2-shaped host: 512 GB
    return a5000_like(512_000_000_000)


@pytest.fixture(scope="session")
def deepseek_tables(deepseek_hw, deepseek_model):
    return synth_profile(deepseek_hw, deepseek_model)
