import pytest
import torch

import gradcases as G
from molm import engine as E


@pytest.mark.parametrize("name", sorted(G.CASES))
def test_finite_differences(name):
    for seed in range(10):
        err, _ = G.run_case(name, seed)
        assert err < G.RTOL, f"{name} seed {seed}: relative error {err:.3e}"


def test_checker_catches_a_wrong_gradient():
    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            ctx.save_for_backward(x)
            return x ** 3

        @staticmethod
        def backward(ctx, g):
            (x,) = ctx.saved_tensors
            return g * 2.9 * x ** 2

    x = torch.linspace(0.5, 1.5, 4, dtype=torch.float64)
    err, _ = G.check(Wrong.apply, [x], 0)
    assert err > 1e-2


def test_kink_detector_shrinks_step():
    # 0.0004 sits within 1e-3 of the kink at 0
    x = torch.tensor([0.0004, 0.5], dtype=torch.float64)
    err, shrunk = G.check(lambda v: E.leaky_relu(v), [x], 0)
    assert shrunk == 1
    assert err < 1e-9


def test_leaky_relu_restored_after_check():
    orig = E.leaky_relu
    G.check(E.leaky_relu, [torch.tensor([0.3], dtype=torch.float64)], 0)
    assert E.leaky_relu is orig
