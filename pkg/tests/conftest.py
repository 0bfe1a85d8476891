import pytest

from crosskv.model import ModelConfig, PerturbationSpec, build_model, make_synthetic_dataset

TOY = ModelConfig(
    n_layers=8,
    d_model=64,
    n_heads=4,
    n_kv_heads=2,
    head_dim=16,
    d_ff=128,
    vocab_size=256,
    max_seq=128,
    base_seed=7,
)

# n_kv_heads = n_heads / 4, the shape where E is exactly twice KV per layer.
TOY_GQA4 = ModelConfig(
    n_layers=8,
    d_model=64,
    n_heads=4,
    n_kv_heads=1,
    head_dim=16,
    d_ff=128,
    vocab_size=256,
    max_seq=128,
    base_seed=7,
)


@pytest.fixture(scope="session")
def toy_config():
    return TOY


@pytest.fixture(scope="session")
def base_model():
    return build_model(TOY)


@pytest.fixture(scope="session")
def perturbed_receiver():
    # Perturbation concentrated on layers 4-5: the pair's critical block.
    return build_model(TOY, PerturbationSpec.block(TOY.n_layers, [4, 5], 1.0, noise_seed=1000))


@pytest.fixture(scope="session")
def sample_tokens():
    return make_synthetic_dataset(42, 1, 40, TOY.vocab_size)[0]
