"""Component ablation over the three conditioning toggles."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from ..errors import ConfigError, InvalidArgument, PersistenceError
from ..policy import PolicyConfig
from .data import EpisodeRecord, training_samples
from .env import TaskSpec
from .evaluate import EvalReport, LearnedPolicy, evaluate_policies
from .train import TrainConfig, train_policy

TOGGLES = ("dense_semantic", "global_pose_condition", "part_refine")

# baseline, one toggle at a time, everything on
DEFAULT_GRID = (
    ("baseline", (False, False, False)),
    ("+dense_semantic", (True, False, False)),
    ("+global_pose_condition", (False, True, False)),
    ("+part_refine", (False, False, True)),
    ("full", (True, True, True)),
)


def grid_from_config(rows) -> tuple[tuple[str, tuple[bool, bool, bool]], ...]:
    """Rows as ``[{"name": ..., "dense_semantic": bool, ...}, ...]``."""
    out = []
    for r in rows:
        try:
            out.append((str(r["name"]), tuple(bool(r[t]) for t in TOGGLES)))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"bad ablation row {r!r}: {exc}") from exc
    if not out:
        raise ConfigError("empty ablation grid")
    return tuple(out)


@dataclass
class AblationRow:
    name: str
    toggles: dict
    report: EvalReport

    def to_dict(self) -> dict:
        return {"name": self.name, "toggles": self.toggles, "report": self.report.to_dict()}


@dataclass
class AblationTable:
    rows: list[AblationRow] = field(default_factory=list)

    def by_toggles(self, flags: tuple[bool, bool, bool]) -> AblationRow | None:
        for r in self.rows:
            if tuple(r.toggles[t] for t in TOGGLES) == tuple(flags):
                return r
        return None

    def single_toggle_gains(self) -> dict[str, float]:
        """Mean success gained by switching one toggle on over the all-off row."""
        base = self.by_toggles((False, False, False))
        if base is None:
            return {}
        gains = {}
        for i, t in enumerate(TOGGLES):
            flags = tuple(j == i for j in range(3))
            row = self.by_toggles(flags)
            if row is not None:
                gains[t] = row.report.mean - base.report.mean
        return gains

    def directional_check(self, margin: float = 0.10) -> dict:
        base = self.by_toggles((False, False, False))
        full = self.by_toggles((True, True, True))
        gains = self.single_toggle_gains()
        out = {"gains": gains}
        if base is not None and full is not None:
            out["full_minus_baseline"] = full.report.mean - base.report.mean
            out["full_beats_baseline"] = bool(out["full_minus_baseline"] >= margin - 1e-12)
        if len(gains) == 3:
            others = [g for t, g in gains.items() if t != "part_refine"]
            out["refine_largest_gain"] = bool(all(gains["part_refine"] > g for g in others))
        return out

    def to_dict(self) -> dict:
        return {"rows": [r.to_dict() for r in self.rows], "check": self.directional_check()}

    def text(self) -> str:
        head = f"{'row':<24}{'sem':>5}{'pose':>6}{'refine':>8}{'mean':>9}{'std':>8}   per-seed"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            rep = r.report
            mark = ["x" if r.toggles[t] else "." for t in TOGGLES]
            rates = " ".join(f"{v:.2f}" for v in rep.success_rates)
            lines.append(f"{r.name:<24}{mark[0]:>5}{mark[1]:>6}{mark[2]:>8}"
                         f"{100 * rep.mean:>8.1f}%{100 * rep.std:>7.1f}%   {rates}")
        return "\n".join(lines)

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["name", *TOGGLES, "mean", "std", "success_rates", "episodes_per_seed"])
        for r in self.rows:
            rep = r.report
            w.writerow([r.name, *(int(r.toggles[t]) for t in TOGGLES), f"{rep.mean:.4f}",
                        f"{rep.std:.4f}", " ".join(f"{v:.4f}" for v in rep.success_rates),
                        rep.episodes_per_seed])
        return buf.getvalue()

    def save(self, out_dir) -> dict[str, Path]:
        d = Path(out_dir)
        paths = {"json": d / "ablation.json", "text": d / "ablation.txt",
                 "csv": d / "ablation.csv", "figure": d / "ablation.png"}
        try:
            d.mkdir(parents=True, exist_ok=True)
            paths["json"].write_text(json.dumps(self.to_dict(), indent=1))
            paths["text"].write_text(self.text() + "\n")
            paths["csv"].write_text(self.csv())
            plot_ablation(self, paths["figure"])
        except OSError as exc:
            raise PersistenceError(f"cannot write ablation outputs under {d}: {exc}") from exc
        return paths


def plot_ablation(table: AblationTable, path) -> Path:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = [r.name for r in table.rows]
    means = np.array([r.report.mean for r in table.rows]) * 100
    stds = np.array([r.report.std for r in table.rows]) * 100
    fig, ax = plt.subplots(figsize=(7, 3.5))
    ax.bar(range(len(names)), means, yerr=stds, capsize=4, color="#4c72b0")
    ax.set_xticks(range(len(names)), names, rotation=20, ha="right")
    ax.set_ylabel("success rate (%)")
    ax.set_ylim(0, 105)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def run_ablation(grid, spec: TaskSpec, episodes: list[EpisodeRecord], policy_base: dict,
                 train_cfg: TrainConfig, seeds=(0, 1, 2), n_eval: int = 100, out_dir=None,
                 log: Callable[[str], None] | None = None) -> AblationTable:
    """Train one policy per (row, seed) on the demos and evaluate it closed loop."""
    if not seeds:
        raise ConfigError("need at least one seed")
    table = AblationTable()
    samples = {}
    for name, flags in grid:
        toggles = dict(zip(TOGGLES, flags))
        try:
            cfg = PolicyConfig.from_dict({**policy_base, **toggles})
        except (TypeError, InvalidArgument) as exc:
            raise ConfigError(f"bad policy config: {exc}") from exc
        sem = cfg.dense_semantic
        if sem not in samples:
            samples[sem] = training_samples(episodes, cfg.horizon, semantic_parts=sem)
        obs, acts = samples[sem]
        policies = {}
        for s in seeds:
            ck = mt = None
            if out_dir is not None:
                stem = Path(out_dir) / "runs" / f"{name.strip('+')}_s{s}"
                ck, mt = stem.with_suffix(".zip"), stem.with_suffix(".jsonl")
            model, _ = train_policy(obs, acts, cfg, train_cfg, seed=s, metrics_path=mt,
                                    checkpoint_path=ck, extra={"row": name})
            policies[s] = LearnedPolicy(model, s)
        report = evaluate_policies(policies, spec, n_eval, cfg.hash())
        table.rows.append(AblationRow(name, toggles, report))
        if log:
            log(f"{name}: mean={report.mean:.3f} std={report.std:.3f} rates={report.success_rates}")
    return table
