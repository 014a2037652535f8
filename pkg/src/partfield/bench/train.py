"""Behaviour-cloning loop for the hierarchical policy."""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from ..checkpoint import save_checkpoint
from ..errors import ConfigError, PersistenceError
from ..policy import HierarchicalPolicy, PolicyConfig


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 64
    lr: float = 2e-3
    weight_decay: float = 0.0
    log_every: int = 50

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1 or self.lr <= 0 or self.log_every < 1:
            raise ConfigError("steps, batch_size, lr and log_every must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad train config: {exc}") from exc

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def to_tensors(obs: dict, dtype=torch.float32) -> dict:
    return {k: torch.as_tensor(v, dtype=torch.long if k == "part_index" else dtype)
            for k, v in obs.items()}


def index_obs(obs: dict, idx) -> dict:
    return {k: v[idx] for k, v in obs.items()}


def train_policy(obs: dict, actions, policy_cfg: PolicyConfig, train_cfg: TrainConfig,
                 seed: int = 0, metrics_path=None, checkpoint_path=None,
                 extra: dict | None = None) -> tuple[HierarchicalPolicy, list[dict]]:
    """Adam with cosine decay on uniformly drawn minibatches.

    ``obs``/``actions`` are stacked numpy arrays from ``training_samples``.
    Writes a JSON line ``{step, loss, lr, alpha, beta}`` every ``log_every`` steps.
    """
    torch.manual_seed(seed)
    model = HierarchicalPolicy(policy_cfg)
    data = to_tensors(obs)
    acts = torch.as_tensor(np.asarray(actions), dtype=torch.float32)
    n = len(acts)
    if n == 0:
        raise ConfigError("empty training set")
    opt = torch.optim.AdamW(model.parameters(), lr=train_cfg.lr, weight_decay=train_cfg.weight_decay)
    total = train_cfg.steps
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: 0.5 * (1 + math.cos(math.pi * s / total)))
    gen = torch.Generator().manual_seed(seed)
    log, window = [], []
    sink = None
    if metrics_path is not None:
        try:
            Path(metrics_path).parent.mkdir(parents=True, exist_ok=True)
            sink = open(metrics_path, "w")
        except OSError as exc:
            raise PersistenceError(f"cannot open metrics file {metrics_path}: {exc}") from exc
    try:
        for step in range(1, total + 1):
            idx = torch.randint(n, (train_cfg.batch_size,), generator=gen)
            loss = model.loss(index_obs(data, idx), acts[idx], generator=gen)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            window.append(loss.item())
            if step % train_cfg.log_every == 0 or step == total:
                rec = {"step": step, "loss": float(np.mean(window)),
                       "lr": opt.param_groups[0]["lr"],
                       "alpha": model.fusion.alpha.item(), "beta": model.fusion.beta.item()}
                window = []
                log.append(rec)
                if sink:
                    sink.write(json.dumps(rec) + "\n")
                    sink.flush()
    finally:
        if sink:
            sink.close()
    model.eval()
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model, dict(extra or {}, train=train_cfg.to_dict(), seed=seed))
    return model, log
