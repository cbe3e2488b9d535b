import numpy as np
import pytest

from pvigcaps import gradcheck, ops
from pvigcaps.exceptions import ContractError
from pvigcaps.gradcheck import OP_CASES, check_op, grad_check
from pvigcaps.tensor import OPS, Tensor, precision


def test_quadratic_is_exact(rng):
    x = Tensor(rng.normal(size=(3, 4)))
    assert grad_check(lambda x: ops.sum(ops.mul(x, x)), [x]) <= 1e-9


def test_constant_function_has_zero_error():
    x = Tensor(np.ones(3))
    assert grad_check(lambda x: Tensor(np.array(2.0)), [x]) == 0.0


def test_sum_gelu_conv_matches_finite_differences(rng):
    x, w = Tensor(rng.normal(size=(1, 2, 5, 5))), Tensor(rng.normal(size=(3, 2, 3, 3)))
    err = grad_check(lambda x, w: ops.sum(ops.gelu(ops.conv2d(x, w, np.zeros(3), 1, 1))), [x, w])
    assert err <= 1e-4


def test_refuses_single_precision():
    with precision("f32"), pytest.raises(ContractError):
        grad_check(lambda x: ops.sum(x), [Tensor(np.ones(2))])


def test_every_differentiable_op_has_a_case():
    assert {n for n, op in OPS.items() if op.differentiable} <= set(OP_CASES)


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_passes_twenty_instances(name):
    assert check_op(name, instances=20, seed=3) <= gradcheck.OP_THRESHOLD


def test_corrupted_backward_rule_is_caught(monkeypatch):
    op = OPS["gelu"]
    monkeypatch.setattr(op, "backward", lambda ctx, g: (g * 0.5,))
    assert check_op("gelu", instances=3) > gradcheck.OP_THRESHOLD


def test_blocks_pass():
    for name, err in gradcheck.check_blocks(seed=1).items():
        assert err <= gradcheck.OP_THRESHOLD, name


@pytest.mark.slow
def test_end_to_end_micro_margin_loss():
    assert gradcheck.check_end_to_end("micro", batch=2, seed=0, coords_per_tensor=2) <= gradcheck.MODEL_THRESHOLD
