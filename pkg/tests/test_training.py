import numpy as np
import pytest

from bonecheck import data as dat
from bonecheck import training as tr
from bonecheck.autograd import Tensor, finite_difference_check, tsum
from bonecheck.models import ArchConfig, build_micro_mobile


class TestBceLoss:
    def test_perfect_prediction_vanishes(self):
        loss = tr.bce_loss(Tensor(np.array([[1 - 1e-9]], dtype=np.float64)),
                           np.array([1]))
        assert loss.item() == pytest.approx(0.0, abs=1e-8)

    def test_wrong_half_is_ln2(self):
        loss = tr.bce_loss(Tensor(np.array([[0.5]], dtype=np.float64)), np.array([0]))
        assert loss.item() == pytest.approx(np.log(2), abs=1e-9)

    def test_batch_mean(self):
        p = Tensor(np.array([[0.9], [0.1]], dtype=np.float64))
        loss = tr.bce_loss(p, np.array([1, 0]))
        assert loss.item() == pytest.approx(-np.log(0.9), abs=1e-5)

    def test_length_mismatch(self):
        with pytest.raises(Exception, match="labels"):
            tr.bce_loss(Tensor(np.zeros((2, 1)) + 0.5), np.array([1]))

    def test_weights_scale_loss(self):
        p = Tensor(np.array([[0.3]], dtype=np.float64))
        base = tr.bce_loss(p, np.array([0])).item()
        weighted = tr.bce_loss(p, np.array([0]), np.array([2.0])).item()
        assert weighted == pytest.approx(2 * base)

    def test_gradient_matches_finite_differences(self):
        y = np.array([1, 0, 1, 0])
        w = np.array([0.8, 1.3, 1.0, 0.5])

        def f(p):
            return tr.bce_loss(p, y, w)

        point = np.array([0.3, 0.6, 0.9, 0.2])
        assert finite_difference_check(f, point, eps=1e-5) < 1e-6


class TestAdam:
    def _params(self, value):
        return {"w": Tensor(np.array([value], dtype=np.float32), requires_grad=True)}

    def test_zero_gradient_is_noop(self):
        params = self._params(1.5)
        state = tr.AdamState()
        tr.adam_step(params, {"w": np.zeros(1)}, state)
        tr.adam_step(params, {}, state)
        np.testing.assert_array_equal(params["w"].data, [1.5])

    def test_first_step_magnitude(self):
        # bias-corrected first step collapses to lr * g/(|g| + eps')
        params = self._params(0.0)
        state = tr.AdamState(lr=1e-4, decay=0.0)
        tr.adam_step(params, {"w": np.ones(1)}, state)
        expected = -1e-4 * (1.0 / (1.0 + 1e-7))
        assert params["w"].data[0] == pytest.approx(expected, rel=1e-6)

    def test_constant_gradient_update_approaches_lr(self):
        params = {"w": Tensor(np.array([0.0], dtype=np.float64), requires_grad=True)}
        state = tr.AdamState(lr=1e-3, decay=0.0)
        prev = params["w"].data.copy()
        for _ in range(3000):
            prev = params["w"].data.copy()
            tr.adam_step(params, {"w": np.full(1, 2.0)}, state)
        assert abs(prev[0] - params["w"].data[0]) == pytest.approx(1e-3, rel=1e-3)

    def test_lr_decay_schedule(self):
        params = {"w": Tensor(np.array([0.0], dtype=np.float64), requires_grad=True)}
        state = tr.AdamState(lr=1e-2, decay=0.5)
        tr.adam_step(params, {"w": np.ones(1)}, state)
        # t=1: lr_t = lr / 1.5
        assert params["w"].data[0] == pytest.approx(-(1e-2 / 1.5), rel=1e-5)

    def test_non_finite_gradient_names_parameter(self):
        params = self._params(0.0)
        with pytest.raises(tr.NonFiniteGradientError, match="'w'"):
            tr.adam_step(params, {"w": np.array([np.nan])}, tr.AdamState())


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("train_ds")
    spec = dat.SyntheticSpec(studies_per_type_per_label=2, views_min=1, views_max=1,
                             image_size=(32, 32), study_types=("hand", "wrist"))
    dat.generate_synthetic_dataset(spec, 21, root)
    return dat.scan_dataset(root, "train")


class TestTrainLoop:
    def test_zero_epochs_rejected(self):
        with pytest.raises(ValueError):
            tr.TrainConfig(epochs=0)

    def test_determinism(self, tiny_dataset):
        def run():
            model = build_micro_mobile(ArchConfig(input_size=(1, 32, 32), seed=4))
            cfg = tr.TrainConfig(epochs=3, seed=4, target_size=(32, 32))
            _, log = tr.train(model, tiny_dataset, tiny_dataset, cfg)
            return [(r.epoch, r.train_loss, r.valid_loss, r.valid_acc) for r in log]

        assert run() == run()

    def test_loss_trend_on_overfit_set(self, tiny_dataset):
        model = build_micro_mobile(ArchConfig(input_size=(1, 32, 32), seed=4))
        cfg = tr.TrainConfig(epochs=5, seed=4, lr=3e-3, decay=0.0,
                             target_size=(32, 32), augment=False)
        _, log = tr.train(model, tiny_dataset, tiny_dataset, cfg)
        assert log[4].train_loss < log[0].train_loss

    def test_equal_counts_weighting_collapses_to_one(self, tiny_dataset):
        assert dat.compute_class_weights(tiny_dataset) == (1.0, 1.0)
        m1 = build_micro_mobile(ArchConfig(input_size=(1, 32, 32), seed=4))
        m2 = build_micro_mobile(ArchConfig(input_size=(1, 32, 32), seed=4))
        cfg_w = tr.TrainConfig(epochs=2, seed=4, target_size=(32, 32))
        cfg_u = tr.TrainConfig(epochs=2, seed=4, target_size=(32, 32),
                               use_class_weights=False)
        _, log_w = tr.train(m1, tiny_dataset, tiny_dataset, cfg_w)
        _, log_u = tr.train(m2, tiny_dataset, tiny_dataset, cfg_u)
        assert log_w[-1].train_loss == pytest.approx(log_u[-1].train_loss, abs=1e-9)

    def test_checkpoint_written_and_log_csv(self, tiny_dataset, tmp_path):
        model = build_micro_mobile(ArchConfig(input_size=(1, 32, 32), seed=4))
        ckpt = tmp_path / "m.ckpt"
        cfg = tr.TrainConfig(epochs=2, seed=4, target_size=(32, 32),
                             checkpoint_path=str(ckpt))
        _, log = tr.train(model, tiny_dataset, tiny_dataset, cfg)
        assert ckpt.exists()
        log_path = tmp_path / "log.csv"
        tr.write_train_log(log, log_path)
        lines = log_path.read_text().strip().splitlines()
        assert lines[0] == "epoch,train_loss,valid_loss,valid_acc,seconds"
        assert len(lines) == len(log) + 1
