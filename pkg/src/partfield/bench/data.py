"""Perception for the toy task, expert demonstrations and their on-disk layout.

Dataset layout::

    <root>/manifest.json
    <root>/ep0000/manifest.json          seed, success, lengths, feature split
    <root>/ep0000/dino_frame0000.{npy,json}, sd_frame0000.{npy,json}
    <root>/ep0000/pca.json               projectors fitted on frame 0
    <root>/ep0000/obj0/field_t0000.txt   one field per object and step; features = [dino' | sd']
    <root>/ep0000/partition.json         semantic partition (fused at alpha = beta = 0.5)
    <root>/ep0000/partition_geom.json    geometry-only partition
    <root>/ep0000/actions.npy            (T, 4) executed expert actions
    <root>/ep0000/states.json            per-step object poses and robot state
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import ConfigError, PersistenceError
from ..geometry import RigidTransform
from ..partition import LocalFieldSet, load_partition, partition_pca, save_partition
from ..policy import config_hash
from ..semlift import (PcaProjector, SemanticField, SyntheticOracleExtractor, build_field_sequence,
                       extract_features, fit_pca, label_image, lift, load_feature_map, load_field,
                       reduce_map, save_feature_map, save_field_sequence)
from .env import (HOLD, N_LABELS, TaskSpec, ToyEnv, expert_can_solve, expert_step, make_env,
                  motion_between)

POS_SCALE = 5.0


def extractors() -> tuple[SyntheticOracleExtractor, SyntheticOracleExtractor]:
    """Sharp per-pixel labels stand in for DINOv2, blurred ones for SD."""
    return (SyntheticOracleExtractor(N_LABELS, 0.0, "dino"),
            SyntheticOracleExtractor(N_LABELS, 1.5, "sd"))


@dataclass(frozen=True)
class Perception:
    """Everything derived from frame 0 of an episode. Points are stacked per object."""
    points0: np.ndarray        # (N, 3) world positions at t=0
    feat_a: np.ndarray         # (N, d) lifted reduced dino features
    feat_b: np.ndarray         # (N, d) lifted reduced sd features
    point_object: np.ndarray   # (N,) owning object of each point
    parts: LocalFieldSet       # semantic partition at t=0, K/M parts per object
    parts_geom: LocalFieldSet  # same, from positions alone
    maps: tuple[np.ndarray, np.ndarray]
    projectors: tuple[PcaProjector, PcaProjector]

    @property
    def n_objects(self) -> int:
        return int(self.point_object.max()) + 1

    def field(self) -> SemanticField:
        return SemanticField(self.points0, np.hstack([self.feat_a, self.feat_b]), 0)

    def object_field(self, m: int) -> SemanticField:
        return self.field().subset(np.flatnonzero(self.point_object == m))

    def part_object(self, semantic: bool = True) -> np.ndarray:
        parts = self.parts if semantic else self.parts_geom
        return np.array([self.point_object[ix[0]] for ix in parts.parent_indices])


def partition_objects(fld: SemanticField, point_object: np.ndarray, k: int) -> LocalFieldSet:
    """Split each object's field into ``k / M`` parts; part ids are grouped by object."""
    M = int(point_object.max()) + 1
    if k % M:
        raise ConfigError(f"k={k} is not divisible by the object count {M}")
    per = k // M
    assign = np.empty(len(fld), dtype=np.int64)
    for m in range(M):
        ix = np.flatnonzero(point_object == m)
        assign[ix] = m * per + partition_pca(fld.subset(ix), per).assignments()
    return LocalFieldSet.from_assignments(fld, assign, k)


def perceive(env: ToyEnv, feat_dim: int, k: int) -> Perception:
    spec = env.spec
    cam = spec.camera()
    img = label_image(env.render_labels())
    pts = env.world_points()
    maps, projs, lifted = [], [], []
    for ext in extractors():
        fmap = extract_features(ext, img)
        proj = fit_pca(fmap, feat_dim)
        # lift is linear in the map, so lifting each reduced map separately lets
        # the fusion weights be applied (and trained) after lifting
        lifted.append(lift(pts, cam, reduce_map(proj, fmap)).features)
        maps.append(fmap)
        projs.append(proj)
    owner = np.repeat(np.arange(spec.n_objects), spec.n_points)
    fused = SemanticField(pts, 0.5 * lifted[0] + 0.5 * lifted[1])
    geom = SemanticField(pts, np.zeros((len(pts), 0)))
    return Perception(pts, lifted[0], lifted[1], owner, partition_objects(fused, owner, k),
                      partition_objects(geom, owner, k), tuple(maps), tuple(projs))


def padded_part_index(parts: LocalFieldSet) -> np.ndarray:
    """(K, max_size) index array; short parts repeat their first index,
    which leaves a max-pool unchanged."""
    width = max(len(ix) for ix in parts.parent_indices)
    return np.stack([np.r_[ix, np.full(width - len(ix), ix[0])] for ix in parts.parent_indices])


def moved_points(perc: Perception, motions: list[RigidTransform]) -> np.ndarray:
    out = np.empty_like(perc.points0)
    for m, T in enumerate(motions):
        ix = perc.point_object == m
        out[ix] = perc.points0[ix] @ T.rotation.T + T.translation
    return out


def pose_code(T: RigidTransform) -> np.ndarray:
    code = T.encode().copy()
    code[6:] *= POS_SCALE
    return code


def observation(perc: Perception, motions: list[RigidTransform], robot: np.ndarray,
                semantic_parts: bool = True) -> dict:
    """Policy input at one step. Each part carries its own object's motion code and
    that object's observed centroid as the origin for its local coordinates."""
    parts = perc.parts if semantic_parts else perc.parts_geom
    owner = perc.part_object(semantic_parts)
    codes = np.stack([pose_code(T) for T in motions])
    pts = moved_points(perc, motions) * POS_SCALE
    centres = np.stack([pts[perc.point_object == m].mean(axis=0) for m in range(len(motions))])
    rs = np.asarray(robot, dtype=float).copy()
    rs[:2] *= POS_SCALE
    return {"points": pts, "feat_a": perc.feat_a, "feat_b": perc.feat_b,
            "part_index": padded_part_index(parts), "pose": codes[owner],
            "part_origin": centres[owner], "robot": rs}


def env_observation(env: ToyEnv, perc: Perception, semantic_parts: bool = True) -> dict:
    return observation(perc, env.motions_since_reset(), env.robot_state(), semantic_parts)


def stack_obs(obs: list[dict]) -> dict:
    return {k: np.stack([o[k] for o in obs]) for k in obs[0]}


# -- demonstrations -------------------------------------------------------------

@dataclass
class EpisodeRecord:
    seed: int
    perception: Perception
    poses: np.ndarray          # (T+1, M, 3) object poses per step
    robot: np.ndarray          # (T+1, 4)
    actions: np.ndarray        # (T, 4)
    success: bool

    @property
    def length(self) -> int:
        return len(self.actions)

    def motions(self, t: int) -> list[RigidTransform]:
        return [motion_between(a, b) for a, b in zip(self.poses[0], self.poses[t])]

    def fields(self, m: int) -> list[SemanticField]:
        """Field sequence of object ``m`` over the whole episode."""
        return build_field_sequence(self.perception.object_field(m),
                                    [self.motions(t)[m] for t in range(1, self.length + 1)])


def run_expert_episode(spec: TaskSpec, seed: int, feat_dim: int, k: int) -> EpisodeRecord | None:
    env = make_env(spec, seed)
    if not expert_can_solve(env):
        return None
    perc = perceive(env, feat_dim, k)
    poses, robot, actions = [env.poses.copy()], [env.robot_state()], []
    for _ in range(spec.episode_len):
        a = expert_step(env)
        env.step(a)
        actions.append(a)
        poses.append(env.poses.copy())
        robot.append(env.robot_state())
    return EpisodeRecord(seed, perc, np.array(poses), np.array(robot), np.array(actions),
                         env.is_success())


def episode_seeds(seed: int, n: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n, dtype=np.uint32)]


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True))


def save_episode(directory, ep: EpisodeRecord, spec_hash: str) -> Path:
    d = Path(directory)
    try:
        d.mkdir(parents=True, exist_ok=True)
        perc = ep.perception
        for fmap, name in zip(perc.maps, ("dino", "sd")):
            save_feature_map(d / f"{name}_frame0000", fmap, name,
                             layers=[2, 5, 8] if name == "sd" else None)
        _dump(d / "pca.json", {"dino": perc.projectors[0].to_dict(), "sd": perc.projectors[1].to_dict()})
        for m in range(perc.n_objects):
            save_field_sequence(d / f"obj{m}", ep.fields(m))
        save_partition(d / "partition.json", perc.parts)
        save_partition(d / "partition_geom.json", perc.parts_geom)
        np.save(d / "actions.npy", ep.actions)
        _dump(d / "states.json", {"poses": ep.poses.tolist(), "robot": ep.robot.tolist()})
        _dump(d / "manifest.json", {"seed": ep.seed, "success": ep.success, "length": ep.length,
                                    "feature_blocks": ["dino", "sd"], "n_objects": perc.n_objects,
                                    "feat_dim": perc.feat_a.shape[1], "k": perc.parts.k,
                                    "spec_hash": spec_hash})
    except OSError as exc:
        raise PersistenceError(f"cannot write episode to {d}: {exc}") from exc
    return d


def load_episode(directory) -> EpisodeRecord:
    d = Path(directory)
    try:
        man = json.loads((d / "manifest.json").read_text())
        states = json.loads((d / "states.json").read_text())
        pca = json.loads((d / "pca.json").read_text())
        actions = np.load(d / "actions.npy")
        per_obj = [load_field(d / f"obj{m}" / "field_t0000.txt") for m in range(int(man["n_objects"]))]
        maps = tuple(load_feature_map(d / f"{n}_frame0000")[0] for n in ("dino", "sd"))
    except (OSError, ValueError, KeyError) as exc:
        raise PersistenceError(f"cannot read episode {d}: {exc}") from exc
    f0 = SemanticField(np.concatenate([f.points for f in per_obj]),
                       np.concatenate([f.features for f in per_obj]), 0)
    owner = np.concatenate([np.full(len(f), m) for m, f in enumerate(per_obj)])
    fd = int(man["feat_dim"])
    perc = Perception(f0.points, f0.features[:, :fd], f0.features[:, fd:], owner,
                      load_partition(d / "partition.json", f0),
                      load_partition(d / "partition_geom.json", f0), maps,
                      (PcaProjector.from_dict(pca["dino"]), PcaProjector.from_dict(pca["sd"])))
    return EpisodeRecord(int(man["seed"]), perc, np.array(states["poses"]),
                         np.array(states["robot"]), actions, bool(man["success"]))


def generate_dataset(spec: TaskSpec, n_episodes: int, seed: int, out_path, feat_dim: int = 4,
                     k: int = 8) -> Path:
    """Write ``n_episodes`` successful expert demos; failed or unsolvable resets are skipped."""
    if n_episodes < 1:
        raise ConfigError("need at least one episode")
    root = Path(out_path)
    spec_hash = config_hash(spec.to_dict())
    kept, tried = [], 0
    candidates = episode_seeds(seed, 10 * n_episodes + 10)
    for s in candidates:
        if len(kept) == n_episodes:
            break
        tried += 1
        ep = run_expert_episode(spec, s, feat_dim, k)
        if ep is None or not ep.success:
            continue
        save_episode(root / f"ep{len(kept):04d}", ep, spec_hash)
        kept.append(s)
    if len(kept) < n_episodes:
        raise ConfigError(f"expert solved only {len(kept)} of {tried} resets")
    try:
        _dump(root / "manifest.json", {"task": spec.name, "spec": spec.to_dict(), "seed": seed,
                                       "n_episodes": n_episodes, "episode_seeds": kept,
                                       "feat_dim": feat_dim, "k": k, "config_hash": spec_hash,
                                       "discarded": tried - len(kept)})
    except OSError as exc:
        raise PersistenceError(f"cannot write manifest under {root}: {exc}") from exc
    return root


def load_dataset(path) -> tuple[dict, list[EpisodeRecord]]:
    root = Path(path)
    try:
        man = json.loads((root / "manifest.json").read_text())
    except (OSError, ValueError) as exc:
        raise PersistenceError(f"cannot read dataset manifest under {root}: {exc}") from exc
    eps = [load_episode(root / f"ep{i:04d}") for i in range(int(man["n_episodes"]))]
    return man, eps


def training_samples(episodes: list[EpisodeRecord], horizon: int,
                     semantic_parts: bool = True) -> tuple[dict, np.ndarray]:
    """Every step of every demo paired with the next ``horizon`` expert actions."""
    obs, acts = [], []
    for ep in episodes:
        padded = np.vstack([ep.actions, np.tile(HOLD, (horizon, 1))])
        for t in range(ep.length):
            obs.append(observation(ep.perception, ep.motions(t), ep.robot[t], semantic_parts))
            acts.append(padded[t:t + horizon])
    return stack_obs(obs), np.stack(acts)
