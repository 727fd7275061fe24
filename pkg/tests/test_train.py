"""Training loop: CSV contract, determinism, freezing, failure modes."""

import numpy as np
import pytest

from partreid.config import RunConfig, with_overrides
from partreid.datasynth import generate_synthetic
from partreid.errors import ConfigurationError, NumericError
from partreid.model import build_model
from partreid.train import identity_class_map, run_training

SMALL = dict(
    input_height=32,
    input_width=16,
    appearance_layers="4:3:2:1,8:3:2:1,8:3:1:1",
    backbone_layers="8:3:2:1,8:3:2:1",
    batch_p=2,
    batch_k=2,
    steps=3,
    learning_rate=1e-3,
)


def small_cfg(**kw):
    return with_overrides(RunConfig(), **{**SMALL, **kw})


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("train_data")
    manifest = generate_synthetic(2, 2, 4, (3, 32, 16), seed=5, out_dir=root)
    return root, manifest


class TestRunTraining:
    def test_outputs_and_csv_contract(self, data, tmp_path):
        root, manifest = data
        result = run_training(small_cfg(), manifest, root, tmp_path / "run")
        assert result.steps == 3
        assert len(result.loss_rows) == 3
        assert result.first_loss == result.loss_rows[0]["total"]
        assert result.final_loss == result.loss_rows[-1]["total"]
        assert result.weights_dir.is_dir()
        lines = result.loss_csv.read_text().strip().split("\n")
        assert lines[0] == "step,total,triplet,identity"
        assert len(lines) == 4
        for i, line in enumerate(lines[1:], start=1):
            cells = line.split(",")
            assert int(cells[0]) == i
            assert np.isfinite(float(cells[1]))

    def test_rerun_is_bit_identical(self, data, tmp_path):
        root, manifest = data
        r1 = run_training(small_cfg(), manifest, root, tmp_path / "a")
        r2 = run_training(small_cfg(), manifest, root, tmp_path / "b")
        assert r1.loss_csv.read_bytes() == r2.loss_csv.read_bytes()
        for p in sorted(r1.weights_dir.glob("*.tsr")):
            assert p.read_bytes() == (r2.weights_dir / p.name).read_bytes(), p.name

    def test_weights_move_under_positive_lr(self, data, tmp_path):
        root, manifest = data
        cfg = small_cfg(steps=1)
        init = build_model(cfg)
        result = run_training(cfg, manifest, root, tmp_path / "run")
        from partreid.model import load_model

        trained = load_model(result.weights_dir)
        moved = sum(
            np.abs(trained.params[n].array - init.params[n].array).max() > 0
            for n in init.params
        )
        assert moved == len(init.params)

    def test_freeze_prefixes_pin_parameters(self, data, tmp_path):
        root, manifest = data
        cfg = small_cfg()
        init = build_model(cfg)
        result = run_training(cfg, manifest, root, tmp_path / "run",
                              freeze_prefixes=("backbone.", "paf.", "conf."))
        from partreid.model import load_model

        trained = load_model(result.weights_dir)
        for name in trained.params:
            delta = np.abs(trained.params[name].array - init.params[name].array).max()
            if name.startswith(("backbone.", "paf.", "conf.")):
                assert delta == 0.0, name
            else:
                assert delta > 0.0, name

    def test_freezing_everything_rejected(self, data, tmp_path):
        root, manifest = data
        with pytest.raises(ConfigurationError):
            run_training(small_cfg(), manifest, root, tmp_path / "run",
                         freeze_prefixes=("appearance.", "backbone.", "paf.",
                                          "conf."))

    def test_identity_term_trains_classifier(self, data, tmp_path):
        root, manifest = data
        cfg = small_cfg(lambda_id=0.5)
        result = run_training(cfg, manifest, root, tmp_path / "run")
        assert all(row["identity"] > 0.0 for row in result.loss_rows)
        header = result.loss_csv.read_text().split("\n")[0]
        assert header == "step,total,triplet,identity"
        from partreid.model import load_model

        trained = load_model(result.weights_dir)
        assert trained.params["classifier.weight"].shape == (4, 64)

    def test_layerwise_adds_tap_columns(self, data, tmp_path):
        root, manifest = data
        cfg = small_cfg(layerwise=True, tap_proj_dim=8)
        result = run_training(cfg, manifest, root, tmp_path / "run")
        header = result.loss_csv.read_text().split("\n")[0]
        assert header == "step,total,triplet,identity,tap_1,tap_2"
        for row in result.loss_rows:
            assert np.isfinite(row["tap_1"]) and np.isfinite(row["tap_2"])
            recombined = row["triplet"] + 0.5 * row["tap_1"] + 0.5 * row["tap_2"]
            np.testing.assert_allclose(row["total"], recombined, rtol=1e-12)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_exploding_updates_raise_numeric_error(self, data, tmp_path):
        root, manifest = data
        with pytest.raises(NumericError) as err:
            run_training(small_cfg(learning_rate=1e150, steps=4), manifest,
                         root, tmp_path / "run")
        assert "non-finite loss" in str(err.value)


class TestIdentityClassMap:
    def test_stable_sorted_indices(self, data):
        _, manifest = data
        cmap = identity_class_map(manifest)
        keys = list(cmap.keys())
        assert keys == sorted(keys)
        assert sorted(cmap.values()) == list(range(len(keys)))
        assert identity_class_map(manifest) == cmap
