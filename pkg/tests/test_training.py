import json
import math

import numpy as np
import pytest

from mtut import data as D
from mtut import training as T
from mtut.alignment import focal_rho
from mtut.numerics import RngStream, ShapeError

TINY = dict(classes=4, train_count=16, test_count=8, extents=(8, 8, 8))


def tiny_cfg(**kw):
    base = dict(pretrain_epochs=2, ssa_epochs=2, widths=(2, 3, 4), batch_size=4, seed=3)
    base.update(kw)
    return T.TrainConfig(**base)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    D.generate_dataset(D.DatasetSpec(**TINY, seed=1), root)
    return root


def read_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


def metrics(out):
    return [json.loads(ln) for ln in (out / "metrics.jsonl").read_text().splitlines()]


# -- optimizer --------------------------------------------------------------

def one_param():
    return [{"w": np.array([1.0, -2.0, 3.0])}]


def test_sgd_mu_zero_is_vanilla():
    p = one_param()
    g = [{"w": np.array([0.5, 0.5, -1.0])}]
    st = T.OptimizerState([{"w": np.zeros(3)}], 0.1)
    T.sgd_momentum_step(p, g, st, 0.1, 0.0)
    assert np.array_equal(p[0]["w"], np.array([1.0, -2.0, 3.0]) - 0.1 * g[0]["w"])


def test_sgd_zero_gradient_is_noop():
    p = one_param()
    st = T.OptimizerState([{"w": np.zeros(3)}], 0.1)
    T.sgd_momentum_step(p, [{"w": np.zeros(3)}], st, 0.1, 0.9)
    assert np.array_equal(p[0]["w"], one_param()[0]["w"])


def test_sgd_momentum_recurrence():
    p = one_param()
    g = [{"w": np.array([1.0, 2.0, 4.0])}]
    st = T.OptimizerState([{"w": np.zeros(3)}], 0.1)
    T.sgd_momentum_step(p, g, st, 0.1, 0.9)
    assert np.array_equal(st.velocity[0]["w"], g[0]["w"])
    T.sgd_momentum_step(p, g, st, 0.1, 0.9)
    np.testing.assert_allclose(st.velocity[0]["w"], 1.9 * g[0]["w"], rtol=0, atol=1e-15)
    np.testing.assert_allclose(p[0]["w"], one_param()[0]["w"] - 0.1 * 2.9 * g[0]["w"],
                               rtol=0, atol=1e-15)


def test_sgd_shape_mismatch():
    st = T.OptimizerState([{"w": np.zeros(3)}], 0.1)
    with pytest.raises(ShapeError):
        T.sgd_momentum_step(one_param(), [{"w": np.zeros(4)}], st, 0.1, 0.9)
    with pytest.raises(ShapeError):
        T.sgd_momentum_step(one_param(), [{"v": np.zeros(3)}], st, 0.1, 0.9)


def lr_trace(losses, patience=5, max_drops=2):
    st = T.OptimizerState([], 1e-2)
    out = []
    for loss in losses:
        T.lr_schedule_update(st, loss, patience, 1e-3, max_drops)
        out.append(st.lr)
    return out, st


def test_schedule_decreasing_losses_keep_lr():
    lrs, st = lr_trace([1.0 - 0.01 * i for i in range(30)])
    assert set(lrs) == {1e-2} and st.drops == 0


def test_schedule_one_drop_after_patience_plus_one():
    lrs, st = lr_trace([1.0] * 6)
    assert st.drops == 1 and lrs[-1] == pytest.approx(1e-3) and lrs[-2] == 1e-2


def test_schedule_caps_at_max_drops():
    lrs, st = lr_trace([1.0] * 15)
    assert st.drops == 2 and lrs[-1] == pytest.approx(1e-4)
    lrs, st = lr_trace([1.0] * 40)
    assert st.drops == 2


def test_schedule_small_improvements_do_not_count():
    lrs, st = lr_trace([1.0 - 1e-4 * i for i in range(6)])
    assert st.drops == 1


def test_clip_grad_norm():
    g = [{"w": np.array([3.0, 4.0])}]
    assert T.clip_grad_norm(g, 10.0) is g
    out = T.clip_grad_norm(g, 1.0)
    np.testing.assert_allclose(out[0]["w"], [0.6, 0.8])


def test_config_validation():
    for bad in (dict(mode="x"), dict(lam=-1), dict(base_lr=0), dict(momentum=1.0),
                dict(batch_size=0), dict(grad_clip=0.0), dict(pretrain_epochs=-1)):
        with pytest.raises(ValueError):
            T.TrainConfig(**bad)
    with pytest.raises(ValueError):
        T.TrainConfig.from_dict({"lambda": 0.1})
    cfg = T.TrainConfig()
    assert (cfg.lam, cfg.beta, cfg.pretrain_epochs, cfg.ssa_epochs) == (0.05, 2.0, 30, 15)
    assert (cfg.base_lr, cfg.momentum, cfg.batch_size) == (1e-2, 0.9, 8)
    assert T.TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


# -- co-training step -------------------------------------------------------

def step_fixture(seed=0, b_noise=0.0):
    cfg = tiny_cfg(lam=0.5)
    rng = RngStream(seed)
    nets = T.build_networks(cfg, ["a", "b"], {"a": (8, 8, 8, 1), "b": (8, 8, 8, 1)}, 4)
    x = rng.uniform((4, 8, 8, 8, 1))
    inputs = {"a": x, "b": x + rng.normal(x.shape, b_noise)}
    labels = np.array([0, 1, 2, 3])
    return cfg, nets, inputs, labels


def run_step(cfg, nets, inputs, labels, phase):
    nets = [n.copy() for n in nets]
    states = [T.new_optimizer_state(n, cfg.base_lr) for n in nets]
    res = T.cotrain_step(nets, states, inputs, labels, cfg, phase)
    return nets, res


def same_params(n1, n2):
    return all(np.array_equal(p[k], q[k]) for p, q in zip(n1.params, n2.params) for k in p)


def test_pretrain_step_equals_baseline_step():
    cfg, nets, inputs, labels = step_fixture(b_noise=0.5)
    a, _ = run_step(cfg, nets, inputs, labels, "pretrain")
    b, _ = run_step(tiny_cfg(lam=0.5, mode="baseline"), nets, inputs, labels, "ssa")
    assert all(same_params(x, y) for x, y in zip(a, b))


def test_identical_networks_have_zero_gates():
    cfg, nets, inputs, labels = step_fixture()
    twin = nets[0].copy()
    twin.modality = "b"
    nets = [nets[0], twin]
    inputs["b"] = inputs["a"]
    mt, res = run_step(cfg, nets, inputs, labels, "ssa")
    bl, _ = run_step(tiny_cfg(lam=0.5, mode="baseline"), nets, inputs, labels, "ssa")
    assert res.gates == {("a", "b"): 0.0, ("b", "a"): 0.0}
    assert all(same_params(x, y) for x, y in zip(mt, bl))


def test_only_the_worse_network_moves():
    cfg, nets, inputs, labels = step_fixture(b_noise=0.8)
    mt, res = run_step(cfg, nets, inputs, labels, "ssa")
    bl, _ = run_step(tiny_cfg(lam=0.5, mode="baseline"), nets, inputs, labels, "ssa")
    cls = {m: bd.cls_loss for m, bd in res.breakdowns.items()}
    worse, better = ("b", "a") if cls["b"] > cls["a"] else ("a", "b")
    idx = {"a": 0, "b": 1}
    assert res.gates[(better, worse)] == 0.0 and res.gates[(worse, better)] > 0
    assert same_params(mt[idx[better]], bl[idx[better]])
    assert not same_params(mt[idx[worse]], bl[idx[worse]])
    assert res.violations == 0


def test_gate_antisymmetry_in_step():
    for seed in range(4):
        cfg, nets, inputs, labels = step_fixture(seed, b_noise=0.3)
        _, res = run_step(cfg, nets, inputs, labels, "ssa")
        assert res.gates[("a", "b")] * res.gates[("b", "a")] == 0.0
        bd = res.breakdowns
        for m in "ab":
            want = bd[m].cls_loss + cfg.lam * sum(t.value for t in bd[m].ssa_terms)
            assert abs(bd[m].total - want) <= 1e-9


def test_divergence_raises():
    cfg, nets, inputs, labels = step_fixture()
    inputs["a"] = inputs["a"].copy()
    inputs["a"][0, 0, 0, 0, 0] = np.nan
    with pytest.raises(T.TrainingDivergedError):
        run_step(cfg, nets, inputs, labels, "pretrain")


def test_alignment_extent_mismatch_rejected():
    cfg = tiny_cfg()
    with pytest.raises(ShapeError):
        T.build_networks(cfg, ["a", "b"], {"a": (8, 8, 8, 1), "b": (16, 16, 16, 1)}, 4)


# -- full runs ----------------------------------------------------------------

@pytest.fixture(scope="module")
def runs(dataset, tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    out = {}
    for name, cfg in {
        "mtut": tiny_cfg(),
        "mtut2": tiny_cfg(),
        "baseline": tiny_cfg(mode="baseline"),
        "lam0": tiny_cfg(lam=0.0),
        "only_a": tiny_cfg(mode="baseline", modalities=["a"]),
        "only_b": tiny_cfg(mode="baseline", modalities=["b"]),
    }.items():
        out[name] = T.train(cfg, dataset, root / name)
    return out


def test_metrics_log_shape(runs):
    recs = metrics(runs["mtut"])
    assert len(recs) == 4 and [r["epoch"] for r in recs] == [1, 2, 3, 4]
    assert [r["phase"] for r in recs] == ["pretrain"] * 2 + ["ssa"] * 2
    assert set(recs[-1]["rho_mean"]) == {"a,b", "b,a"}
    for r in recs:
        assert r["one_way_violations"] == 0
        for m in "ab":
            ssa = sum(v for k, v in r["ssa_loss_mean"].items() if k.startswith(m + ","))
            assert abs(r["total_loss"][m] - (r["cls_loss"][m] + 0.05 * ssa)) <= 1e-9
    for sub in ("pretrain", "final"):
        assert (runs["mtut"] / "checkpoints" / sub / "index.json").is_file()


def test_same_seed_byte_identical(runs):
    assert read_bytes(runs["mtut"]) == read_bytes(runs["mtut2"])


def test_logs_identical_through_pretrain(runs):
    mt = (runs["mtut"] / "metrics.jsonl").read_text().splitlines()
    bl = (runs["baseline"] / "metrics.jsonl").read_text().splitlines()
    assert mt[:2] == bl[:2]
    pre = lambda r: read_bytes(r / "checkpoints" / "pretrain")
    assert {k: v for k, v in pre(runs["mtut"]).items() if k != "index.json"} == \
        {k: v for k, v in pre(runs["baseline"]).items() if k != "index.json"}


def test_lambda_zero_equals_independent_trainings(runs):
    lam0 = read_bytes(runs["lam0"] / "checkpoints" / "final")
    for m in "ab":
        solo = read_bytes(runs[f"only_{m}"] / "checkpoints" / "final")
        for k, v in solo.items():
            if k.startswith(f"{m}/"):
                assert lam0[k] == v, k


def test_resume_matches_unbroken_run(runs, dataset, tmp_path):
    out = T.train(tiny_cfg(), dataset, tmp_path / "r",
                  resume_from=runs["mtut"] / "checkpoints" / "pretrain")
    assert read_bytes(out) == read_bytes(runs["mtut"])


def test_subset_resume(runs, dataset, tmp_path):
    out = T.train(tiny_cfg(mode="baseline", modalities=["b"]), dataset, tmp_path / "b",
                  resume_from=runs["baseline"] / "checkpoints" / "pretrain")
    mine = read_bytes(out / "checkpoints" / "final")
    ref = read_bytes(runs["only_b"] / "checkpoints" / "final")
    assert {k: v for k, v in mine.items() if k.startswith("b/")} == \
        {k: v for k, v in ref.items() if k.startswith("b/")}
    assert all(set(r["cls_loss"]) == {"b"} for r in metrics(out))
    with pytest.raises(T.CheckpointError):
        T.train(tiny_cfg(modalities=["b"]), dataset, tmp_path / "c",
                resume_from=runs["mtut"] / "checkpoints" / "pretrain")


def test_checkpoint_roundtrip_bytes(runs, tmp_path):
    src = runs["mtut"] / "checkpoints" / "final"
    nets, states, meta = T.load_checkpoint(src)
    cfg = T.TrainConfig.from_dict(meta["config"])
    T.save_checkpoint(nets, states, tmp_path / "again", epoch=meta["epoch"], config=cfg)
    assert read_bytes(src) == read_bytes(tmp_path / "again")


def test_checkpoint_tamper_rejected(runs, tmp_path):
    import shutil
    dst = tmp_path / "ck"
    shutil.copytree(runs["mtut"] / "checkpoints" / "final", dst)
    idx = json.loads((dst / "a" / "index.json").read_text())
    idx["params"][0]["w"]["shape"][0] += 1
    (dst / "a" / "index.json").write_text(json.dumps(idx))
    with pytest.raises(T.CheckpointError, match="shape"):
        T.load_checkpoint(dst)
    (dst / "index.json").write_text("{not json")
    with pytest.raises(T.CheckpointError):
        T.load_checkpoint(dst)


def test_missing_dataset(tmp_path):
    with pytest.raises(FileNotFoundError, match="train.jsonl"):
        T.train(tiny_cfg(), tmp_path / "nope", tmp_path / "out")


def test_gate_matches_focal_rho():
    assert focal_rho(1.0, 0.5, 2.0).rho == pytest.approx(math.e - 1)
