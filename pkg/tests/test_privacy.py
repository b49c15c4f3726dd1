import math

import numpy as np
import pytest

from gpfl import autodiff as ad
from gpfl import model as gm
from gpfl import privacy as pv
from gpfl.nn import EmbeddingTable, ModelSpec, init_parameters


def random_target(kind, seed=0, scale=0.01):
    m = init_parameters(ModelSpec(6, 5, 4, (7,)), seed)
    P = m.state()
    r = np.random.default_rng(seed)
    upd = {k: r.normal(size=v.shape) * scale for k, v in P.items()}
    return pv.AttackTarget(kind, P, upd, 0.1)


@pytest.mark.parametrize("kind", pv.TARGET_KINDS)
def test_batched_objective_matches_autodiff(kind):
    for seed in range(5):
        t = random_target(kind, seed)
        r = np.random.default_rng(100 + seed)
        X, Z = r.normal(size=(4, t.in_dim)), r.normal(size=(4, t.out_dim))
        got = pv.dlg_objective(t, X, Z)
        G = t.observed_grad
        for i in range(4):
            ref = pv.reference_param_grads(t, X[i], Z[i])
            want = sum(((ref[k] - G[k]) ** 2).sum() for k in G)
            assert abs(got[i] - want) <= 1e-10 * max(1.0, want)


def test_exposed_parameters_per_target():
    names = list(init_parameters(ModelSpec(3, 2, 2), 0).named_parameters())
    fe = pv.exposed_names("feature-extractor", names)
    assert fe and all(k.startswith("fe.") for k in fe)
    for kind in ("pseudo-feature-extractor", "pseudo-model"):
        assert not any(k.startswith("head.") for k in pv.exposed_names(kind, names))
    assert "gce.rows" in pv.exposed_names("pseudo-model", names)
    with pytest.raises(ValueError):
        pv.exposed_names("head", names)


def _linear_target(x, y, eta=0.1, w=0.8, b=-0.3):
    """One SGD step of MSE(w x + b, y) on a scalar linear model; two parameters."""
    params = {"fe.0.weight": np.array([[w]]), "fe.0.bias": np.array([b])}
    e = 2.0 * (w * x + b - y)
    upd = {"fe.0.weight": np.array([[-eta * e * x]]), "fe.0.bias": np.array([-eta * e])}
    return pv.AttackTarget("feature-extractor", params, upd, eta)


def test_linear_model_input_is_recovered():
    for x, y in ((0.7, 0.1), (0.2, 0.9), (0.45, -0.5)):
        res = pv.run_dlg(_linear_target(x, y), steps=300, lr=0.1, seed=0)
        assert abs(res.x[0] - x) <= 0.05


def test_zero_update_drives_loss_to_zero():
    t = random_target("full-model", 0, scale=0.0)
    res = pv.run_dlg(t, steps=300, lr=0.05, seed=1)
    assert res.dlg_loss < 1e-6


def test_best_of_seeds_reports_lower_loss():
    t = random_target("feature-extractor", 2)
    a, b = pv.run_dlg(t, 40, seed=0), pv.run_dlg(t, 40, seed=1)
    best = pv.best_of([a, b])
    assert best.dlg_loss == min(a.dlg_loss, b.dlg_loss)
    assert best.dlg_loss == min(best.history)


def test_run_dlg_is_seed_deterministic():
    t = random_target("pseudo-model", 3)
    a, b = pv.run_dlg(t, 20, seed=4), pv.run_dlg(t, 20, seed=4)
    np.testing.assert_array_equal(a.x, b.x)


def test_pseudo_model_logits_examples():
    C = EmbeddingTable([[1.0, 0.0], [0.0, 1.0]])
    np.testing.assert_array_equal(pv.pseudo_model_logits([1.0, 0.0], C), [1.0, 0.0])
    r = np.random.default_rng(0)
    rows = r.normal(size=(5, 3))
    for _ in range(20):
        f = r.normal(size=3)
        z = pv.pseudo_model_logits(f, rows)
        assert np.all(np.abs(z) <= 1.0)
        internal = gm.alg_logits(ad.tensor(f[None]), EmbeddingTable(rows)).data[0]
        np.testing.assert_allclose(z, internal, rtol=0, atol=1e-12)


def test_psnr_examples():
    a = np.zeros((4, 4))
    assert pv.psnr(a, a) == math.inf
    assert math.isclose(pv.psnr(a, np.full((4, 4), 0.1)), 20.0, rel_tol=1e-12)
    assert math.isclose(pv.psnr(a, np.full((4, 4), 0.5)), 10 * math.log10(4), rel_tol=1e-12)
    assert round(pv.psnr(a, np.full((4, 4), 0.5)), 2) == 6.02
    assert pv.psnr(np.full(3, -5.0), np.zeros(3)) == math.inf  # clamped to [0, 1] first
    with pytest.raises(ad.DimensionError):
        pv.psnr(np.zeros(3), np.zeros(4))


def test_update_shape_mismatch_rejected():
    P = {"fe.0.weight": np.ones((2, 3)), "fe.0.bias": np.zeros(2)}
    with pytest.raises(ad.DimensionError):
        pv.AttackTarget("feature-extractor", P, {"fe.0.weight": np.ones((3, 2)), "fe.0.bias": np.zeros(2)}, 0.1)


# --- capture ----------------------------------------------------------------

def _run(method, **kw):
    from gpfl.config import ExperimentConfig
    from gpfl.experiment import run_experiment

    cfg = ExperimentConfig(method=method, D=6, K=4, U=3, hidden=8, rounds=1, clients=3, n_samples=150,
                           partition="pathological", eta=0.05, capture_updates=True, capture_count=4,
                           **kw).validate()
    return cfg, run_experiment(cfg, write=False)


def test_captures_hold_only_uploaded_groups():
    _, out = _run("gpfl")
    caps = out.result.captures
    assert len(caps) == 4
    for c in caps:
        assert not any(k.startswith("head.") for k in c["before"])
        assert "gce.rows" in c["update"]
    _, out = _run("fedavg")
    assert all("head.weight" in c["update"] for c in out.result.captures)


def test_fedavg_capture_is_one_sgd_step():
    cfg, out = _run("fedavg")
    c = out.result.captures[0]
    m = init_parameters(ModelSpec(cfg.D, cfg.K, cfg.U, (cfg.hidden,)), cfg.seed_init)
    m.load_state(c["before"])
    from gpfl.federation import _ce_forward

    with ad.Graph() as g:
        loss = ad.softmax_cross_entropy(_ce_forward(m, c["ground_truth"][None]), [c["label"]])
    g.backward(loss)
    for k, v in c["update"].items():
        np.testing.assert_allclose(v, -cfg.eta * m.named_parameters()[k].grad, rtol=0, atol=1e-14)


def test_capture_save_load_round_trip(tmp_path):
    _, out = _run("gpfl")
    pv.save_captures(out.result.captures, tmp_path / "c.npz")
    back = pv.load_captures(tmp_path / "c.npz")
    for a, b in zip(out.result.captures, back):
        assert a["victim"] == b["victim"] and a["method"] == b["method"]
        for k in a["update"]:
            np.testing.assert_array_equal(a["update"][k], b["update"][k])
        np.testing.assert_array_equal(a["ground_truth"], b["ground_truth"])


def test_attack_entries_per_target_and_seed():
    _, out = _run("gpfl")
    entries = pv.attack_captures(out.result.captures, seeds=range(3), steps=5)
    kinds = pv.method_targets("gpfl")
    assert len(entries) == 3 * len(kinds)
    for kind in kinds:
        assert sorted(e["seed"] for e in entries if e["target_kind"] == kind) == [0, 1, 2]
    assert all(isinstance(e["psnr_db"], float) for e in entries)
    with pytest.raises(ValueError):
        pv.attack_captures([], seeds=range(1))
