import filecmp
import json
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from scipy import stats

from partfield.bench.ablation import AblationRow, AblationTable, DEFAULT_GRID, run_ablation
from partfield.bench.data import (generate_dataset, load_dataset, load_episode, perceive,
                                  run_expert_episode, training_samples)
from partfield.bench.env import (HEAD, TAIL, TaskSpec, ToyObject, dual_shoe_spec, expert_can_solve,
                                 make_env, scripted_expert, success, wrap_angle)
from partfield.bench.evaluate import (EvalReport, ExpertPolicy, LearnedPolicy, RandomPolicy,
                                      evaluate, evaluate_policies)
from partfield.bench.train import TrainConfig, train_policy
from partfield.checkpoint import load_checkpoint
from partfield.errors import ConfigError, LoadError, PersistenceError
from partfield.partition import partition_consistency_check
from partfield.policy import PolicyConfig
from partfield.semlift import load_field

TINY_POLICY = dict(feat_dim=4, joint_dim=4, horizon=8, action_dim=4, k=8, d_g=8, d_r=4, d_e=8,
                   encoder_hidden=(8,), robot_hidden=(8,), attn_dim=8, channels=(8, 16),
                   step_dim=8, groups=4, num_steps=10)


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("demos")
    generate_dataset(TaskSpec(), 3, 11, root)
    return root


# -- environment -----------------------------------------------------------------

def test_same_seed_same_state():
    a, b = make_env(TaskSpec(), 5), make_env(TaskSpec(), 5)
    assert np.array_equal(a.initial, b.initial)
    assert all(np.array_equal(p, q) for p, q in zip(a.local_points, b.local_points))
    assert not np.array_equal(a.initial, make_env(TaskSpec(), 6).initial)


def test_zero_ranges_give_canonical_poses():
    spec = dual_shoe_spec(x_range=(0, 0), y_range=(0, 0), theta_range=(0, 0))
    env = make_env(spec, 3)
    np.testing.assert_array_equal(env.initial, [[0, 0.1, 0], [0, -0.1, 0]])


def test_reset_poses_uniform_ks():
    spec = TaskSpec()
    poses = np.array([make_env(spec, s).initial[0] for s in range(1000)])
    for col, (lo, hi) in zip(poses.T, (spec.x_range, spec.y_range, spec.theta_range)):
        assert stats.kstest(col, stats.uniform(loc=lo, scale=hi - lo).cdf).pvalue > 0.01


@pytest.mark.parametrize("kw", [dict(delta_pos=0.0), dict(delta_ang=-1.0),
                                dict(targets=((0, 0, 0), (1, 1, 0))), dict(n_points=0),
                                dict(x_range=(1.0, -1.0))])
def test_invalid_spec(kw):
    with pytest.raises(ConfigError):
        TaskSpec(**kw)


def test_invalid_object():
    with pytest.raises(ConfigError):
        ToyObject(outline=((0, 0), (1, 1), (2, 2)))
    with pytest.raises(ConfigError):
        ToyObject(head_vertex=3, tail_vertex=3)
    with pytest.raises(ConfigError):
        make_env("not a spec", 0)


def test_object_has_head_and_tail_points():
    env = make_env(TaskSpec(), 0)
    labels = set(env.local_labels[0].tolist())
    assert labels == {HEAD, TAIL}


def test_spec_dict_roundtrip():
    for spec in (TaskSpec(), dual_shoe_spec()):
        back = TaskSpec.from_dict(json.loads(json.dumps(spec.to_dict())))
        assert back == spec
    with pytest.raises(ConfigError):
        TaskSpec.from_dict({"bogus": 1})


def test_render_labels_match_point_labels():
    env = make_env(TaskSpec(), 2)
    lab = env.render_labels()
    assert set(np.unique(lab)) == {0, 1, 2}
    cam = env.spec.camera()
    from partfield.geometry import project_points
    uv = np.rint(project_points(cam, env.world_points())[:, :2]).astype(int)
    seen = lab[uv[:, 1], uv[:, 0]]
    fg = seen != 0                    # boundary samples can round onto a background pixel
    assert fg.mean() > 0.8
    assert (seen[fg] == env.point_labels()[fg]).mean() > 0.95


# -- expert ----------------------------------------------------------------------

def test_expert_at_target_is_idle_and_successful():
    spec = TaskSpec(x_range=(0, 0), y_range=(0, 0), theta_range=(np.pi, np.pi))
    env = make_env(spec, 0)
    assert env.is_success()
    chunk = scripted_expert(env)
    np.testing.assert_allclose(chunk[:, :3], 0, atol=1e-12)
    for a in chunk:
        env.step(a)
    assert env.is_success()


def test_expert_rotates_half_turn():
    spec = TaskSpec(x_range=(0, 0), y_range=(0, 0), theta_range=(0, 0))
    env = make_env(spec, 0)
    turned = 0.0
    for _ in range(spec.n_chunks):
        chunk = scripted_expert(env)
        turned += chunk[:, 2].sum() * spec.max_step_ang
        for a in chunk:
            env.step(a)
    assert abs(abs(turned) - np.pi) < 1e-9
    assert env.is_success()


@pytest.mark.parametrize("spec", [TaskSpec(), dual_shoe_spec()], ids=["single", "dual"])
def test_expert_success_rate(spec):
    report = evaluate_policies({0: ExpertPolicy()}, spec, 500)
    assert report.mean >= 0.99


def test_unsolvable_reset_detected():
    spec = TaskSpec(n_chunks=1, horizon=2, x_range=(0.2, 0.2), y_range=(0, 0), theta_range=(0, 0))
    assert not expert_can_solve(make_env(spec, 0))
    with pytest.raises(ConfigError):
        generate_dataset(spec, 1, 0, "/nonexistent-but-unused")


def test_random_policy_rarely_succeeds():
    assert evaluate_policies({0: RandomPolicy(0)}, TaskSpec(), 500).mean <= 0.05


@settings(max_examples=200, deadline=None)
@given(st.floats(-0.3, 0.3), st.floats(-0.3, 0.3), st.floats(-4, 4),
       st.floats(-0.3, 0.3), st.floats(-0.3, 0.3), st.floats(-4, 4), st.floats(-np.pi, np.pi))
def test_success_invariant_to_scene_rotation(x, y, th, tx, ty, tth, phi):
    spec = TaskSpec()
    d = np.hypot(x - tx, y - ty)
    da = abs(float(wrap_angle(th - tth)))
    assume(abs(d - spec.delta_pos) > 1e-9 and abs(da - spec.delta_ang) > 1e-9)
    c, s = np.cos(phi), np.sin(phi)

    def rot(px, py, pth):
        return (c * px - s * py, s * px + c * py, pth + phi)

    assert success((x, y, th), (tx, ty, tth), spec) == \
        success(rot(x, y, th), rot(tx, ty, tth), spec)


# -- dataset ---------------------------------------------------------------------

def test_dataset_layout(tiny_dataset):
    man = json.loads((tiny_dataset / "manifest.json").read_text())
    assert man["n_episodes"] == 3 and len(man["config_hash"]) == 16
    ep = tiny_dataset / "ep0000"
    for name in ("manifest.json", "pca.json", "partition.json", "partition_geom.json",
                 "actions.npy", "states.json", "dino_frame0000.npy", "sd_frame0000.json",
                 "obj0/field_t0000.txt", "obj0/field_t0032.txt"):
        assert (ep / name).exists(), name


def test_single_episode_dataset(tmp_path):
    generate_dataset(TaskSpec(), 1, 0, tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["ep0000", "manifest.json"]


def test_regeneration_bit_identical(tiny_dataset, tmp_path):
    generate_dataset(TaskSpec(), 3, 11, tmp_path)
    cmp = filecmp.dircmp(tiny_dataset, tmp_path)

    def same(c):
        if c.left_only or c.right_only or c.diff_files or c.funny_files:
            return False
        _, mismatch, errors = filecmp.cmpfiles(c.left, c.right, c.common_files, shallow=False)
        return not mismatch and not errors and all(same(s) for s in c.subdirs.values())

    assert same(cmp)


def test_episode_roundtrip(tmp_path):
    spec = dual_shoe_spec()
    ep = run_expert_episode(spec, 4, 4, 8)
    from partfield.bench.data import save_episode
    save_episode(tmp_path / "e", ep, "x")
    back = load_episode(tmp_path / "e")
    p, q = ep.perception, back.perception
    assert np.abs(p.points0 - q.points0).max() <= 1e-12
    assert np.array_equal(p.feat_a, q.feat_a) and np.array_equal(p.feat_b, q.feat_b)
    assert len(p.parts.parent_indices) == len(q.parts.parent_indices)
    assert all(np.array_equal(a, b) for a, b in zip(p.parts.parent_indices, q.parts.parent_indices))
    assert np.array_equal(ep.actions, back.actions) and back.success
    assert np.abs(ep.poses - back.poses).max() <= 1e-12


def test_stored_fields_follow_poses(tiny_dataset):
    ep = load_episode(tiny_dataset / "ep0001")
    f0 = load_field(tiny_dataset / "ep0001" / "obj0" / "field_t0000.txt")
    for t in (5, 17, 32):
        ft = load_field(tiny_dataset / "ep0001" / "obj0" / f"field_t{t:04d}.txt")
        assert np.array_equal(ft.features, f0.features)
        T = ep.motions(t)[0]
        np.testing.assert_allclose(ft.points, f0.points @ T.rotation.T + T.translation, atol=1e-12)


def test_stored_demos_replay_to_success(tiny_dataset):
    man, eps = load_dataset(tiny_dataset)
    spec = TaskSpec.from_dict(man["spec"])
    for ep in eps:
        env = make_env(spec, ep.seed)
        for a in ep.actions:
            env.step(a)
        assert env.is_success()
        np.testing.assert_allclose(env.poses, ep.poses[-1], atol=1e-12)


def test_partition_carried_from_first_frame(tiny_dataset):
    ep = load_episode(tiny_dataset / "ep0000")
    parts = ep.perception.parts
    moved = ep.fields(0)[20]
    assert partition_consistency_check(parts, parts.carry(moved)) == 1.0


def test_training_samples_shapes(tiny_dataset):
    _, eps = load_dataset(tiny_dataset)
    obs, acts = training_samples(eps, 8)
    n = 3 * eps[0].length
    assert acts.shape == (n, 8, 4)
    assert obs["points"].shape == (n, 128, 3) and obs["part_index"].shape == (n, 8, 16)
    assert obs["pose"].shape == (n, 8, 9)
    # the action chunk at step t is the executed expert suffix, padded with holds
    np.testing.assert_array_equal(acts[eps[0].length - 1][0], eps[0].actions[-1])
    np.testing.assert_array_equal(acts[eps[0].length - 1][1:], np.tile([0, 0, 0, 1.0], (7, 1)))


def test_load_missing_dataset(tmp_path):
    with pytest.raises(PersistenceError):
        load_dataset(tmp_path / "nope")


def test_perceive_rejects_indivisible_k():
    with pytest.raises(ConfigError):
        perceive(make_env(dual_shoe_spec(), 0), 4, 7)


# -- training / evaluation -------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_checkpoint(tiny_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    _, eps = load_dataset(tiny_dataset)
    obs, acts = training_samples(eps, 8)
    cfg = PolicyConfig(**TINY_POLICY)
    train_policy(obs, acts, cfg, TrainConfig(steps=6, batch_size=8, log_every=2), seed=1,
                 metrics_path=out / "m.jsonl", checkpoint_path=out / "c.zip")
    return out, cfg


def test_metrics_log(tiny_checkpoint):
    out, _ = tiny_checkpoint
    recs = [json.loads(l) for l in (out / "m.jsonl").read_text().splitlines()]
    assert [r["step"] for r in recs] == [2, 4, 6]
    assert set(recs[0]) == {"step", "loss", "lr", "alpha", "beta"}


def test_evaluation_deterministic(tiny_checkpoint):
    out, cfg = tiny_checkpoint
    a = evaluate(out / "c.zip", TaskSpec(), 4, seeds=(0, 1))
    b = evaluate(out / "c.zip", TaskSpec(), 4, seeds=(0, 1))
    assert a == b and a.config_hash == cfg.hash() and a.episodes_per_seed == 4
    assert 0 <= a.mean <= 1


def test_loaded_policy_matches_trained(tiny_dataset):
    _, eps = load_dataset(tiny_dataset)
    obs, acts = training_samples(eps, 8)
    cfg = PolicyConfig(**TINY_POLICY)
    model, _ = train_policy(obs, acts, cfg, TrainConfig(steps=3, batch_size=4), seed=2)
    from partfield.checkpoint import save_checkpoint
    import tempfile
    with tempfile.TemporaryDirectory() as d:
        save_checkpoint(Path(d) / "c.zip", model)
        loaded, _ = load_checkpoint(Path(d) / "c.zip")
    spec = TaskSpec()
    r1 = evaluate_policies({0: LearnedPolicy(model, 0)}, spec, 3)
    r2 = evaluate_policies({0: LearnedPolicy(loaded, 0)}, spec, 3)
    assert r1.success_rates == r2.success_rates
    assert loaded.fusion.alpha.dtype == torch.float64


def test_eval_config_mismatch(tiny_checkpoint):
    out, _ = tiny_checkpoint
    with pytest.raises(LoadError):
        evaluate(out / "c.zip", TaskSpec(), 2, seeds=(0,), expect=PolicyConfig())


def test_eval_report_validation():
    with pytest.raises(ConfigError):
        EvalReport.from_rates("t", [0], [0.5], 0, "h")
    with pytest.raises(ConfigError):
        EvalReport.from_rates("t", [0], [1.5], 3, "h")
    with pytest.raises(ConfigError):
        evaluate_policies({}, TaskSpec(), 3)
    r = EvalReport.from_rates("t", [0, 1, 2], [0.2, 0.4, 0.6], 10, "h")
    assert r.mean == pytest.approx(0.4) and r.std == pytest.approx(np.std([0.2, 0.4, 0.6]))
    assert set(r.to_dict()) == {"task", "seeds", "success_rates", "mean", "std",
                                "episodes_per_seed", "config_hash"}


# -- ablation --------------------------------------------------------------------

def fake_table(means):
    rows = []
    for (name, flags), m in zip(DEFAULT_GRID, means):
        toggles = dict(zip(("dense_semantic", "global_pose_condition", "part_refine"), flags))
        rows.append(AblationRow(name, toggles, EvalReport.from_rates("t", [0], [m], 10, "h")))
    return AblationTable(rows)


def test_ablation_gains_and_check():
    t = fake_table([0.2, 0.25, 0.22, 0.3, 0.4])
    g = t.single_toggle_gains()
    assert g["part_refine"] == pytest.approx(0.1) and g["dense_semantic"] == pytest.approx(0.05)
    chk = t.directional_check()
    assert chk["full_beats_baseline"] and chk["refine_largest_gain"]
    chk = fake_table([0.2, 0.5, 0.2, 0.2, 0.25]).directional_check()
    assert not chk["full_beats_baseline"] and not chk["refine_largest_gain"]
    assert "x" in t.text() and t.csv().count("\n") == 6


def test_ablation_run_writes_outputs(tiny_dataset, tmp_path):
    _, eps = load_dataset(tiny_dataset)
    grid = (DEFAULT_GRID[0], DEFAULT_GRID[-1])
    table = run_ablation(grid, TaskSpec(), eps, TINY_POLICY, TrainConfig(steps=2, batch_size=4),
                         seeds=(0,), n_eval=2, out_dir=tmp_path)
    paths = table.save(tmp_path)
    assert all(p.exists() for p in paths.values())
    data = json.loads(paths["json"].read_text())
    assert [r["name"] for r in data["rows"]] == ["baseline", "full"]
    assert (tmp_path / "runs" / "full_s0.zip").exists()
