"""Gradient audit suite: coverage, tolerance, runtime, mutation sensitivity."""

import time

import pytest

import tsnet.selfcheck as selfcheck
from tsnet.selfcheck import GRADCHECK_THRESHOLD, gradcheck_suite, suite_passes
from tsnet.tensor import Tensor, conv2d


@pytest.fixture(scope="module")
def results():
    started = time.monotonic()
    res = gradcheck_suite()
    elapsed = time.monotonic() - started
    return res, elapsed


class TestSuite:
    def test_all_below_threshold(self, results):
        res, _ = results
        worst = max(res.values())
        assert suite_passes(res)
        assert worst < GRADCHECK_THRESHOLD == 1e-6

    def test_covers_every_op_and_model_params(self, results):
        res, _ = results
        for prefix in ("conv2d/", "relu/", "global_avg_pool/", "dense/",
                       "elementwise_mul/", "dropout/", "mse/", "tsum/",
                       "add/", "scale/", "take_column/"):
            assert any(k.startswith(prefix) for k in res), prefix
        model_keys = [k for k in res if k.startswith("model/")]
        assert any("spatial.conv0.weight" in k for k in model_keys)
        assert any("temporal.conv0.weight" in k for k in model_keys)
        assert any("mlp.out.weight" in k for k in model_keys)
        assert len(res) >= 20

    def test_runtime_under_a_minute(self, results):
        _, elapsed = results
        assert elapsed < 60.0

    def test_deterministic(self, results):
        res, _ = results
        assert gradcheck_suite() == res


class TestMutation:
    def test_sign_flipped_conv_gradient_detected(self, monkeypatch):
        def flipped_conv2d(*args, **kwargs):
            out = conv2d(*args, **kwargs)
            return Tensor(out.data, _parents=(out,),
                          _grad_fn=lambda g: (-g,))

        monkeypatch.setattr(selfcheck, "conv2d", flipped_conv2d)
        res = gradcheck_suite(seeds=(0,), model_seeds=(2,))
        assert not suite_passes(res)
        assert res["conv2d/x"] > 0.9  # sign flip: relative error near 1
