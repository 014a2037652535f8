import numpy as np
import pytest
import torch

from partfield.policy import PolicyConfig

CRITERIA: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])


def small_config(**kw) -> PolicyConfig:
    base = dict(feat_dim=3, joint_dim=3, horizon=4, action_dim=2, k=3, d_g=6, d_r=4, d_e=5,
                encoder_hidden=(6,), robot_hidden=(5,), attn_dim=4, heads=2, channels=(4, 6),
                step_dim=4, groups=2, num_steps=10, zero_init=False)
    base.update(kw)
    return PolicyConfig(**base)


def random_obs(cfg: PolicyConfig, B: int = 2, n_per_part: int = 4, seed: int = 0,
               dtype=torch.float64) -> dict:
    g = torch.Generator().manual_seed(seed)
    N = cfg.k * n_per_part
    perm = torch.stack([torch.randperm(N, generator=g) for _ in range(B)])
    return {
        "points": torch.randn(B, N, 3, generator=g, dtype=dtype),
        "feat_a": torch.randn(B, N, cfg.feat_dim, generator=g, dtype=dtype),
        "feat_b": torch.randn(B, N, cfg.feat_dim, generator=g, dtype=dtype),
        "part_index": perm.reshape(B, cfg.k, n_per_part),
        "pose": torch.randn(B, 9, generator=g, dtype=dtype),
        "robot": torch.randn(B, cfg.joint_dim, generator=g, dtype=dtype),
        "part_origin": torch.randn(B, cfg.k, 3, generator=g, dtype=dtype),
    }


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
