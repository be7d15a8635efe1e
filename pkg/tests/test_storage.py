import json

import numpy as np
import pytest

from qrfvar.conformal import fit_conformal_forest
from qrfvar.errors import ConfigError, ModelFormatError
from qrfvar.forest import Forest, ForestConfig
from qrfvar.market import generate_offline_dataset, paper_market_config
from qrfvar.storage import (
    MAGIC,
    load_dataset,
    load_market_config,
    load_model,
    metadata_path,
    save_dataset,
    save_model,
    write_manifest,
)


@pytest.fixture(scope="module")
def data():
    return generate_offline_dataset(paper_market_config(), 300, m_inner=20, seed=1)


def test_dataset_round_trip_is_exact(tmp_path, data):
    path = tmp_path / "d.csv"
    save_dataset(data, path, {"seed": 1})
    back = load_dataset(path)
    np.testing.assert_array_equal(back.x, data.x)
    np.testing.assert_array_equal(back.loss, data.loss)
    assert back.seed == 1
    assert path.read_text().splitlines()[0] == "x1,x2,x3,x4,loss"
    assert json.loads(metadata_path(path).read_text()) == {"seed": 1}


def test_dataset_bad_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b\n1,2\n")
    with pytest.raises(ConfigError):
        load_dataset(path)


def test_config_errors_name_the_file(tmp_path):
    path = tmp_path / "m.json"
    path.write_text("{ not json")
    with pytest.raises(ConfigError, match="not valid JSON"):
        load_market_config(path)
    with pytest.raises(ConfigError, match="not found"):
        load_market_config(tmp_path / "missing.json")


@pytest.mark.parametrize("honest", [False, True])
def test_model_round_trip_preserves_predictions(tmp_path, data, honest):
    forest, _, models = fit_conformal_forest(data, ForestConfig(n_trees=15, honest=honest, seed=3), [0.9, 0.95])
    path = tmp_path / "m.qrf"
    save_model(path, forest, models, {"note": "x"})
    bundle = load_model(path)
    q = data.x[:25]
    for a in (0.9, 0.95):
        np.testing.assert_array_equal(bundle.forest.predict_quantile(q, a), forest.predict_quantile(q, a))
        assert bundle.conformal[a].offset == models[a].offset
        np.testing.assert_array_equal(bundle.conformal[a].scores, models[a].scores)
        np.testing.assert_array_equal(bundle.conformal[a].predict(q), models[a].predict(q))
    assert bundle.forest.config == forest.config
    assert bundle.meta["note"] == "x"
    np.testing.assert_array_equal(bundle.forest.tree(2).structure, forest.tree(2).structure)


def test_uncalibrated_model_has_no_calibration_block(tmp_path, data):
    forest = Forest.fit(data.x, data.loss, ForestConfig(n_trees=3))
    path = tmp_path / "plain.qrf"
    save_model(path, forest)
    assert load_model(path).conformal == {}
    raw = path.read_bytes()
    assert raw.startswith(MAGIC) and raw[len(MAGIC)] == 1
    assert b"calib_offsets" not in raw


def test_bad_magic_and_version(tmp_path, data):
    forest = Forest.fit(data.x, data.loss, ForestConfig(n_trees=2))
    path = tmp_path / "m.qrf"
    save_model(path, forest)
    raw = path.read_bytes()
    (tmp_path / "magic.qrf").write_bytes(b"NOTAMODEL" + raw[9:])
    with pytest.raises(ModelFormatError, match="magic"):
        load_model(tmp_path / "magic.qrf")
    (tmp_path / "ver.qrf").write_bytes(raw[:8] + bytes([9]) + raw[9:])
    with pytest.raises(ModelFormatError, match="version 9"):
        load_model(tmp_path / "ver.qrf")
    (tmp_path / "trunc.qrf").write_bytes(raw[:200])
    with pytest.raises(ModelFormatError, match="corrupt"):
        load_model(tmp_path / "trunc.qrf")


def test_manifest_checksums(tmp_path):
    art = tmp_path / "a.txt"
    art.write_text("hello")
    m = write_manifest(tmp_path / "m.json", "simulate", {"n": 1}, {"dataset": art}, seeds={"seed": 4})
    assert m["artifacts"]["dataset"]["sha256"] == "2cf24dba5fb0a30e26e83b2ac5b9e29e1b161e5c1fa7425e73043362938b9824"
    assert json.loads((tmp_path / "m.json").read_text())["seeds"] == {"seed": 4}
