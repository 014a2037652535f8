"""Command-line entry point.

Every subcommand takes ``--config <json>``, ``--seed`` and ``--out``.
Exit status: 0 success, 2 configuration error, 3 I/O error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import ConfigError, IngestionError, InvalidArgument, LoadError, PersistenceError

EXIT_OK, EXIT_CONFIG, EXIT_IO = 0, 2, 3


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        cfg = json.loads(text)
    except ValueError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    return cfg


def task_from_config(d) -> "TaskSpec":
    from .bench.env import TaskSpec, dual_shoe_spec

    presets = {"place_shoe": TaskSpec, "place_dual_shoes": dual_shoe_spec}
    if d is None:
        return TaskSpec()
    if isinstance(d, str):
        d = {"preset": d}
    d = dict(d)
    preset = d.pop("preset", "place_shoe")
    if preset not in presets:
        raise ConfigError(f"unknown task preset {preset!r}; choose from {sorted(presets)}")
    return TaskSpec.from_dict({**presets[preset]().to_dict(), **d})


def _known(cfg: dict, keys: set, where: str) -> None:
    extra = set(cfg) - keys
    if extra:
        raise ConfigError(f"unknown keys in {where} config: {sorted(extra)}")


def policy_config(base: dict, dataset_manifest: dict, spec) -> dict:
    """Fill shape fields from the dataset and task so users only set sizes/toggles."""
    d = {"feat_dim": dataset_manifest["feat_dim"], "k": dataset_manifest["k"],
         "joint_dim": 4, "action_dim": 4, "horizon": spec.horizon, "object_frame_parts": True}
    d.update(base or {})
    return d


def _emit(rows: list[list]) -> None:
    """Delimited (tab-separated) report on stdout."""
    for r in rows:
        print("\t".join(str(x) for x in r))


# -- subcommands -----------------------------------------------------------------

def cmd_gen_demos(cfg: dict, seed: int, out: Path) -> None:
    from .bench.data import generate_dataset

    _known(cfg, {"task", "n_episodes", "feat_dim", "k"}, "gen-demos")
    spec = task_from_config(cfg.get("task"))
    root = generate_dataset(spec, int(cfg.get("n_episodes", 100)), seed, out,
                            int(cfg.get("feat_dim", 4)), int(cfg.get("k", 8)))
    man = json.loads((root / "manifest.json").read_text())
    _emit([["dataset", "episodes", "discarded", "config_hash"],
           [root, man["n_episodes"], man["discarded"], man["config_hash"]]])


def cmd_train(cfg: dict, seed: int, out: Path) -> None:
    from .bench.data import load_dataset, training_samples
    from .bench.train import TrainConfig, train_policy
    from .policy import PolicyConfig

    _known(cfg, {"dataset", "policy", "train"}, "train")
    if "dataset" not in cfg:
        raise ConfigError("train config needs a 'dataset' path")
    man, eps = load_dataset(cfg["dataset"])
    spec = task_from_config(man["spec"])
    try:
        pcfg = PolicyConfig.from_dict(policy_config(cfg.get("policy", {}), man, spec))
    except (TypeError, InvalidArgument) as exc:
        raise ConfigError(f"bad policy config: {exc}") from exc
    tcfg = TrainConfig.from_dict(cfg.get("train", {}))
    obs, acts = training_samples(eps, pcfg.horizon, semantic_parts=pcfg.dense_semantic)
    out.mkdir(parents=True, exist_ok=True)
    _, log = train_policy(obs, acts, pcfg, tcfg, seed, out / "metrics.jsonl", out / "checkpoint.zip",
                          {"dataset": str(cfg["dataset"]), "task": spec.to_dict()})
    _emit([["step", "loss", "lr", "alpha", "beta"]] +
          [[r["step"], f"{r['loss']:.6f}", f"{r['lr']:.3g}", f"{r['alpha']:.4f}", f"{r['beta']:.4f}"]
           for r in log])
    _plot_curve(log, out / "loss.png")


def _plot_curve(log: list[dict], path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot([r["step"] for r in log], [r["loss"] for r in log])
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("training loss")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_eval(cfg: dict, seed: int, out: Path) -> None:
    from .bench.evaluate import ExpertPolicy, RandomPolicy, evaluate, evaluate_policies

    _known(cfg, {"checkpoint", "policy", "task", "episodes", "seeds"}, "eval")
    n = int(cfg.get("episodes", 100))
    seeds = [int(s) for s in cfg.get("seeds", [seed, seed + 1, seed + 2])]
    kind = cfg.get("policy", "learned")
    if kind == "learned":
        if "checkpoint" not in cfg:
            raise ConfigError("eval of a learned policy needs 'checkpoint'")
        from .checkpoint import read_manifest
        extra = read_manifest(cfg["checkpoint"]).get("extra", {})
        spec = task_from_config(cfg.get("task", extra.get("task")))
        report = evaluate(cfg["checkpoint"], spec, n, seeds)
    elif kind in ("expert", "random"):
        spec = task_from_config(cfg.get("task"))
        make = (lambda s: ExpertPolicy()) if kind == "expert" else RandomPolicy
        report = evaluate_policies({s: make(s) for s in seeds}, spec, n)
    else:
        raise ConfigError(f"unknown policy kind {kind!r}")
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / "report.json")
    _emit([["seed", "success_rate"]] + [[s, f"{r:.4f}"] for s, r in zip(report.seeds, report.success_rates)]
          + [["mean", f"{report.mean:.4f}"], ["std", f"{report.std:.4f}"]])
    _plot_seeds(report, out / "report.png")


def _plot_seeds(report, path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 3))
    ax.bar([str(s) for s in report.seeds], [100 * r for r in report.success_rates])
    ax.axhline(100 * report.mean, color="k", ls="--", lw=1)
    ax.set_xlabel("seed")
    ax.set_ylabel("success rate (%)")
    ax.set_ylim(0, 105)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_ablate(cfg: dict, seed: int, out: Path) -> None:
    from .bench.ablation import DEFAULT_GRID, grid_from_config, run_ablation
    from .bench.data import generate_dataset, load_dataset
    from .bench.train import TrainConfig

    _known(cfg, {"task", "dataset", "n_demos", "feat_dim", "k", "policy", "train", "seeds",
                 "episodes", "grid"}, "ablate")
    if "dataset" in cfg and Path(cfg["dataset"], "manifest.json").exists():
        man, eps = load_dataset(cfg["dataset"])
        spec = task_from_config(man["spec"])
    else:
        spec = task_from_config(cfg.get("task"))
        root = Path(cfg.get("dataset", out / "demos"))
        generate_dataset(spec, int(cfg.get("n_demos", 100)), seed, root,
                         int(cfg.get("feat_dim", 4)), int(cfg.get("k", 8)))
        man, eps = load_dataset(root)
    grid = grid_from_config(cfg["grid"]) if "grid" in cfg else DEFAULT_GRID
    table = run_ablation(grid, spec, eps, policy_config(cfg.get("policy", {}), man, spec),
                         TrainConfig.from_dict(cfg.get("train", {})),
                         tuple(int(s) for s in cfg.get("seeds", [0, 1, 2])),
                         int(cfg.get("episodes", 100)), out,
                         log=lambda m: print(m, file=sys.stderr))
    table.save(out)
    sys.stdout.write(table.csv())


def cmd_viz_field(cfg: dict, seed: int, out: Path) -> None:
    from .bench.viz import visualize_field

    _known(cfg, {"field"}, "viz-field")
    if "field" not in cfg:
        raise ConfigError("viz-field config needs a 'field' path")
    paths = visualize_field(cfg["field"], out)
    _emit([["artifact", "path"]] + [[k, v] for k, v in paths.items()])


COMMANDS = {"gen-demos": cmd_gen_demos, "train": cmd_train, "eval": cmd_eval,
            "ablate": cmd_ablate, "viz-field": cmd_viz_field}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="partfield", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON config file (see docs/config.md)")
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--out", required=True, help="output directory or path prefix")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        COMMANDS[args.command](cfg, args.seed, Path(args.out))
    except (ConfigError, InvalidArgument, KeyError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PersistenceError, IngestionError, LoadError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
