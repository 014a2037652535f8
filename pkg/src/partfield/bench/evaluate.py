"""Closed-loop evaluation of policies on the toy task."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np

from ..checkpoint import load_checkpoint
from ..errors import ConfigError, PersistenceError
from ..policy import HierarchicalPolicy, PolicyConfig, config_hash
from .data import env_observation, perceive, stack_obs
from .env import TaskSpec, ToyEnv, make_env, scripted_expert
from .train import to_tensors

EVAL_STREAM = 7919  # keeps evaluation resets disjoint from demo resets


@dataclass(frozen=True)
class EvalReport:
    task: str
    seeds: list[int]
    success_rates: list[float]
    mean: float
    std: float
    episodes_per_seed: int
    config_hash: str

    def __post_init__(self):
        if self.episodes_per_seed <= 0:
            raise ConfigError("episode count must be positive")
        if any(not 0.0 <= r <= 1.0 for r in self.success_rates):
            raise ConfigError("success rates must lie in [0, 1]")

    @classmethod
    def from_rates(cls, task: str, seeds, rates, episodes: int, chash: str) -> "EvalReport":
        r = np.asarray(rates, dtype=float)
        return cls(task, [int(s) for s in seeds], r.tolist(), float(r.mean()), float(r.std()),
                   int(episodes), chash)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def save(self, path) -> Path:
        p = Path(path)
        try:
            p.parent.mkdir(parents=True, exist_ok=True)
            p.write_text(json.dumps(self.to_dict(), indent=1))
        except OSError as exc:
            raise PersistenceError(f"cannot write report {p}: {exc}") from exc
        return p


class Policy(Protocol):
    def plan(self, envs: list[ToyEnv], chunk: int) -> np.ndarray:
        """(B, H, 4) action chunk for the current states."""


class ExpertPolicy:
    def plan(self, envs, chunk):
        return np.stack([scripted_expert(e) for e in envs])


class RandomPolicy:
    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)

    def plan(self, envs, chunk):
        H = envs[0].spec.horizon
        return self.rng.uniform(-1.0, 1.0, size=(len(envs), H, 4))


class LearnedPolicy:
    """Wraps a trained model; perception runs once per episode on the first frame."""

    def __init__(self, model: HierarchicalPolicy, seed: int = 0, deterministic: bool = False):
        self.model = model.eval()
        self.seed = seed
        self.deterministic = deterministic
        self._perc: dict[int, object] = {}

    def plan(self, envs, chunk):
        cfg = self.model.cfg
        obs = []
        for i, env in enumerate(envs):
            if chunk == 0:
                self._perc[i] = perceive(env, cfg.feat_dim, cfg.k)
            obs.append(env_observation(env, self._perc[i], semantic_parts=cfg.dense_semantic))
        dtype = next(self.model.denoiser.parameters()).dtype
        out = self.model.act(to_tensors(stack_obs(obs), dtype), seed=self.seed * 1000 + chunk,
                             deterministic=self.deterministic)
        return out.double().numpy()


def eval_env_seeds(seed: int, n: int) -> list[int]:
    ss = np.random.SeedSequence([EVAL_STREAM, int(seed)])
    return [int(s) for s in ss.generate_state(n, dtype=np.uint32)]


def rollout(policy: Policy, spec: TaskSpec, env_seeds: list[int]) -> np.ndarray:
    """Run all episodes in lockstep; returns per-episode success at the final step."""
    envs = [make_env(spec, s) for s in env_seeds]
    for c in range(spec.n_chunks):
        chunk = np.asarray(policy.plan(envs, c))
        for h in range(min(spec.horizon, chunk.shape[1])):
            for env, a in zip(envs, chunk[:, h]):
                env.step(a)
        for _ in range(chunk.shape[1], spec.horizon):
            for env in envs:
                env.step(np.array([0.0, 0.0, 0.0, 1.0]))
    return np.array([e.is_success() for e in envs])


def evaluate_policies(policies: dict[int, Policy], spec: TaskSpec, n_episodes: int,
                      chash: str = "") -> EvalReport:
    """One policy per seed; each is rolled out on ``n_episodes`` seeded resets."""
    if not policies:
        raise ConfigError("need at least one seed")
    if n_episodes < 1:
        raise ConfigError("need at least one episode")
    seeds = sorted(policies)
    rates = [rollout(policies[s], spec, eval_env_seeds(s, n_episodes)).mean() for s in seeds]
    return EvalReport.from_rates(spec.name, seeds, rates, n_episodes,
                                 chash or config_hash(spec.to_dict()))


def evaluate(checkpoint, spec: TaskSpec, n_episodes: int = 100, seeds=(0, 1, 2),
             expect: PolicyConfig | None = None) -> EvalReport:
    model, manifest = load_checkpoint(checkpoint, expect=expect)
    return evaluate_policies({s: LearnedPolicy(model, s) for s in seeds}, spec, n_episodes,
                             manifest["config_hash"])

