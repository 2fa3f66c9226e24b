import numpy as np
import pytest

import ilalab


@pytest.fixture(scope="module")
def data():
    return ilalab.synthetic_dataset(seed=3, train_count=40, test_count=8)


@pytest.fixture(scope="module")
def source():
    return ilalab.SplitModel(ilalab.Model.build("cnn-small", 1))


def test_dataset_shapes_and_range(data):
    tx, ty, sx, sy = data
    assert tx.shape == (40, 256) and sx.shape == (8, 256)
    assert tx.dtype == np.float32
    assert tx.min() >= 0.0 and tx.max() <= 1.0
    assert set(np.unique(ty)) <= set(range(10))


def test_predict_batch_matches_single(data):
    _, _, sx, _ = data
    m = ilalab.Model.build("mlp-2", 4)
    batch = m.predict(sx)
    assert [int(m.predict(x)[0]) for x in sx] == list(batch)


def test_attack_trajectory_and_feasible_refinement(data, source):
    _, _, sx, sy = data
    x, y = sx[0], int(sy[0])
    t = ilalab.ifgsm(source, x, y, iterations=10, samples=5)
    assert t.times == [0, 2, 4, 6, 8, 10]
    assert t.features.shape == (6, source.feature_dim)
    assert np.abs(t.final_input - x).max() <= 8 / 255 + 1e-6

    guide = ilalab.fit_rr_woodbury(ilalab.build_dataset([t]))
    assert guide.w.shape == (source.feature_dim,)
    for norm, eps in (("linf", 8 / 255), ("l2", 0.25)):
        xa = ilalab.refine(source, x, guide, norm=norm, epsilon=eps, iterations=5)
        assert xa.min() >= 0.0 and xa.max() <= 1.0
        delta = xa - x
        bound = np.abs(delta).max() if norm == "linf" else np.linalg.norm(delta)
        assert bound <= eps * (1 + 1e-5) + 1e-7


def test_regressors_agree_at_large_lambda(data, source):
    _, _, sx, sy = data
    runs = ilalab.pgd(source, sx[1], int(sy[1]), runs=2, iterations=10, samples=5)
    assert len(runs) == 2
    ds = ilalab.build_dataset(runs)
    w = ilalab.fit_rr(ds).w
    approx = ilalab.fit_rr_approx(ds).w
    cos = w @ approx / (np.linalg.norm(w) * np.linalg.norm(approx))
    assert cos > 0.999


def test_pgd_is_seed_deterministic(data, source):
    _, _, sx, sy = data
    a = ilalab.pgd(source, sx[2], int(sy[2]), runs=2, seed=9, iterations=5, samples=5)
    b = ilalab.pgd(source, sx[2], int(sy[2]), runs=2, seed=9, iterations=5, samples=5)
    for ra, rb in zip(a, b):
        np.testing.assert_array_equal(ra.final_input, rb.final_input)


def test_pearson_and_errors():
    x = np.array([1.0, 2.0, 4.0])
    assert ilalab.pearson(x, 2 * x + 1) == pytest.approx(1.0)
    with pytest.raises(ilalab.DegenerateError):
        ilalab.pearson(np.ones(3), x)
    with pytest.raises(ilalab.ConfigError):
        ilalab.run_campaign({"attack.epsilonn": "0.1"})
    assert issubclass(ilalab.ConfigError, ilalab.Error)


def test_tiny_campaign(tmp_path):
    cfg = {
        "data.train_count": "400",
        "data.test_count": "80",
        "zoo.dir": str(tmp_path / "zoo"),
        "zoo.archs": "mlp-2",
        "campaign.source": "mlp-2-s1",
        "campaign.methods": "ifgsm,ifgsm+rr",
        "campaign.epsilons": "0.03137254901960784",
        "campaign.n_inputs": "4",
        "campaign.save_batches": "false",
        "campaign.out": str(tmp_path / "out"),
        "attack.iterations": "10",
        "refine.iterations": "10",
    }
    out = ilalab.run_campaign(cfg, write_reports=True)
    assert out["victims"] == ["mlp-2-s2"]
    assert out["csv"].count("\n") == 1 + 2
    assert (tmp_path / "out" / "transfer.csv").read_text() == out["csv"]
    again = ilalab.run_campaign(cfg)
    assert again["csv"] == out["csv"]
