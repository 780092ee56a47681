import pytest

from toptd.mdp import MdpGenSpec, build_token_mdp
from toptd.soft_rl import soft_value_iteration


@pytest.fixture
def small_mdp():
    return build_token_mdp(MdpGenSpec(vocab_size=3, horizon=2, n_prompts=1, gamma=0.9, seed=11))


@pytest.fixture
def medium_mdp():
    return build_token_mdp(MdpGenSpec(vocab_size=8, horizon=3, n_prompts=2, gamma=0.9, seed=5))


@pytest.fixture
def medium_teacher(medium_mdp):
    _, teacher = soft_value_iteration(medium_mdp)
    return teacher
