import csv
import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from odcwa.model import init_params
from odcwa.numerics import NumericalError, make_rng
from odcwa.pipeline import (
    TrainConfig,
    config_hash,
    detection_records,
    evaluate,
    expand_grid,
    export_embeddings,
    generate_dataset,
    run,
    SyntheticDataset,
    stratified_batch,
    sweep,
    train,
    write_sweep_csv,
)

FAST = dict(k_max=60, samples_per_class=40, test_samples_per_class=20, background_samples=80, test_background_samples=40)


def test_shipped_defaults():
    cfg = TrainConfig()
    assert (cfg.delta0, cfg.lam, cfg.blur, cfg.beta, cfg.alpha_w, cfg.alpha_scale) == (0.21, 1.7e-3, 0.1, 0.5, 1.0, 20.0)
    assert (cfg.lr, cfg.momentum, cfg.weight_decay) == (0.02, 0.9, 1e-4)
    assert (cfg.k_fg, cfg.k_bg, cfg.p, cfg.k_max, cfg.batch_size) == (3, 3, 1.0, 3000, 128)
    assert cfg.num_known == 5 and cfg.num_unknown == 3 and cfg.num_classes == 7


def test_config_validation_and_baseline_forcing():
    with pytest.raises(ValueError):
        TrainConfig(blur=0.0)
    with pytest.raises(ValueError):
        TrainConfig(p=0.5)
    with pytest.raises(ValueError):
        TrainConfig(lam=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(mode="OD")
    ce = TrainConfig(mode="CE-baseline")
    assert ce.lam == ce.beta == ce.delta0 == 0.0 and not ce.spectral_norm
    assert TrainConfig.from_dict(ce.to_dict()) == ce
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"nope": 1})


def test_config_hash_is_stable_and_sensitive():
    assert config_hash(TrainConfig()) == config_hash(TrainConfig())
    assert config_hash(TrainConfig()) != config_hash(TrainConfig(seed=1))


def test_dataset_counts_and_determinism():
    cfg = TrainConfig(samples_per_class=200)
    a, b = generate_dataset(cfg), generate_dataset(cfg)
    assert a.to_json() == b.to_json()
    assert np.sum(a.y_train < 5) == 1000
    assert np.sum(a.y_train == 6) == cfg.background_samples
    assert not np.any(a.y_train == 5)
    assert np.sum(a.y_test == 5) == 3 * cfg.test_samples_per_class
    assert len(a.meta["unknown_means"]) == 3 and len(a.meta["known_means"]) == 5


def test_dataset_without_unknowns():
    ds = generate_dataset(TrainConfig(num_unknown=0, **FAST))
    assert not np.any(ds.y_test == 5)


def test_dataset_geometry():
    ds = generate_dataset(TrainConfig())
    means = np.array(ds.meta["known_means"] + ds.meta["unknown_means"])
    np.testing.assert_allclose(np.linalg.norm(means, axis=1), 2.5)
    assert len({tuple(np.round(m, 9)) for m in means}) == 8
    lo, hi = ds.meta["box"]
    bg = ds.x_train[ds.y_train == 6]
    assert bg.min() >= lo and bg.max() <= hi


def test_dataset_json_round_trip():
    ds = generate_dataset(TrainConfig(**FAST))
    back = SyntheticDataset.from_json(ds.to_json())
    np.testing.assert_array_equal(back.x_test, ds.x_test)
    np.testing.assert_array_equal(back.y_train, ds.y_train)


def test_stratified_batch():
    y = np.repeat(np.arange(6), [50, 50, 50, 50, 50, 100])
    idx = stratified_batch(make_rng(0), y, 128)
    counts = np.bincount(y[idx])
    assert idx.size == 128 and len(set(idx.tolist())) == 128
    assert counts.max() - counts.min() <= 1


def test_train_series_and_modes():
    cfg = TrainConfig(mode="CE-baseline", **FAST)
    _, rep = train(cfg, generate_dataset(cfg))
    assert len(rep.loss_series) == cfg.k_max
    assert all(e["l_ic"] == e["l_up"] == e["l_cwa"] == 0.0 for e in rep.loss_series)
    assert all(e["l_ce"] > 0 for e in rep.loss_series)

    cfg = TrainConfig(mode="OD-CWA", **FAST)
    _, rep = train(cfg, generate_dataset(cfg))
    assert any(e["l_cwa"] > 0 for e in rep.loss_series)
    assert rep.loss_series[0]["delta"] == pytest.approx(0.21)
    assert rep.loss_series[-1]["delta"] == pytest.approx(0.21 / cfg.k_max)


def test_od_sn_without_extras_equals_ce_baseline():
    base = dict(FAST, seed=3)
    ds = generate_dataset(TrainConfig(**base))
    p1, r1 = train(TrainConfig(mode="OD-SN", beta=0.0, delta0=0.0, spectral_norm=False, **base), ds)
    p2, r2 = train(TrainConfig(mode="CE-baseline", **base), ds)
    np.testing.assert_array_equal(p1.flat(), p2.flat())
    assert [e["total"] for e in r1.loss_series] == [e["total"] for e in r2.loss_series]


def test_nan_abort_names_component():
    cfg = TrainConfig(**FAST)
    ds = generate_dataset(cfg)
    ds.x_train[:] = np.nan
    with pytest.raises(NumericalError, match="features"):
        train(cfg, ds)


def test_training_makes_progress():
    cfg = TrainConfig(k_max=300, **{k: v for k, v in FAST.items() if k != "k_max"})
    _, rep = train(cfg, generate_dataset(cfg))
    tot = [e["total"] for e in rep.loss_series]
    n = len(tot) // 10
    assert np.mean(tot[-n:]) <= np.mean(tot[:n])


def test_untrained_model_is_near_chance():
    cfg = TrainConfig()
    ds = generate_dataset(cfg)
    scores = []
    for seed in range(3):
        params = init_params(make_rng(100 + seed), 2, cfg.hidden, cfg.feature_dim, cfg.embed_dim, cfg.num_classes)
        scores.append(evaluate(params, ds, cfg)["metrics"]["mAP_K"])
    assert np.mean(scores) < 2 / cfg.num_known * 100


def test_evaluate_fields_and_records():
    cfg = TrainConfig(**FAST)
    params, rep = run(cfg)
    for k in ("WI", "AOSE", "mAP_K", "AP_U", "accuracy"):
        assert k in rep.metrics
    assert set(rep.cluster_indices) == {"DI", "CHI", "HI", "DBI", "XBI"}
    assert rep.compactness_ratio >= 0
    recs = detection_records(params, generate_dataset(cfg), cfg)
    assert all(r.pred != -1 for r in recs)


def test_evaluate_without_unknowns_has_no_ap_u():
    cfg = TrainConfig(num_unknown=0, **FAST)
    _, rep = run(cfg)
    assert rep.metrics["AP_U"] is None


def test_report_canonical_form_ignores_wall_clock():
    cfg = TrainConfig(**FAST)
    _, a = run(cfg)
    _, b = run(cfg)
    assert a.canonical() == b.canonical()
    b.wall_clock_seconds += 5
    assert a.canonical() == b.canonical()
    assert json.loads(a.to_json())["config_hash"] == config_hash(cfg)


def test_grid_expansion():
    assert len(expand_grid({"lam": [0, 1e-3], "blur": [0.1, 0.5]})) == 4
    with pytest.raises(ValueError):
        expand_grid({})
    with pytest.raises(ValueError):
        expand_grid({"lam": []})


def test_sweep_records_failures(tmp_path):
    rows = sweep(TrainConfig(**FAST), {"lam": [0.0, 1e-3], "blur": [0.1, -1.0]})
    assert len(rows) == 4
    assert [r["status"] for r in rows] == ["ok", "failed", "ok", "failed"]
    path = tmp_path / "s.csv"
    write_sweep_csv(rows, path)
    got = list(csv.DictReader(path.open()))
    assert len(got) == 4 and got[0]["WI"] != ""


def test_lambda_zero_sweep_row_matches_od_sn():
    base = TrainConfig(**FAST)
    rows = sweep(base, {"lam": [0.0]})
    _, rep = run(base.replace(mode="OD-SN"))
    assert rows[0]["AOSE"] == rep.metrics["AOSE"]
    assert rows[0]["mAP_K"] == rep.metrics["mAP_K"]


def test_export_embeddings(tmp_path):
    cfg = TrainConfig(**FAST)
    ds = generate_dataset(cfg)
    params, _ = train(cfg, ds)
    csv_path, svg_path = export_embeddings(params, ds, tmp_path / "emb.csv", cfg)
    rows = list(csv.reader(csv_path.open()))
    assert rows[0][:2] == ["x", "y"] and rows[0][-1] == "class_id"
    assert len(rows) - 1 == len(ds.y_test)
    codes = [int(r[-1]) for r in rows[1:]]
    assert codes.count(-2) == int(np.sum(ds.y_test == 5))
    assert codes.count(-1) == int(np.sum(ds.y_test == 6))
    ET.parse(svg_path)


def test_export_unwritable_path(tmp_path):
    cfg = TrainConfig(**FAST)
    ds = generate_dataset(cfg)
    params = init_params(make_rng(0), 2, cfg.hidden, cfg.feature_dim, cfg.embed_dim, cfg.num_classes)
    with pytest.raises(OSError):
        export_embeddings(params, ds, tmp_path / "missing" / "emb.csv", cfg)
