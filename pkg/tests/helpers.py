"""Shared builders for tests: random small networks and tiny synthetic data."""

from __future__ import annotations

import numpy as np

from invisnet.core import Parameter, Tensor, backward
from invisnet.core import functional as F
from invisnet.core.tensor import concat, mean, mul, square, sum_

from oracles import finite_difference, max_relative_error


def random_network(seed: int):
    """A random composition of conv2d, activation, pooling, upsampling, concat and reductions.

    Returns (params, x, loss_fn) where loss_fn(x_tensor) builds the scalar loss.
    """
    rng = np.random.default_rng(seed)
    cin = int(rng.integers(1, 4))
    width = int(rng.integers(2, 5))
    size = int(rng.choice([6, 8]))
    stride = int(rng.choice([1, 2]))
    act = rng.choice(["leaky", "tanh", "sigmoid"])
    k1 = Parameter(rng.normal(0, 0.5, (width, cin, 3, 3)), "k1")
    b1 = Parameter(rng.normal(0, 0.1, width), "b1")
    k2 = Parameter(rng.normal(0, 0.5, (width, width, 3, 3)), "k2")
    b2 = Parameter(rng.normal(0, 0.1, width), "b2")
    k3 = Parameter(rng.normal(0, 0.5, (1, 2 * width, 1, 1)), "k3")
    w_out = rng.normal(size=(1, size, size))
    x = rng.normal(size=(cin, size, size))
    activate = {"leaky": F.leaky_relu, "tanh": F.tanh, "sigmoid": F.sigmoid}[act]

    def loss_fn(xt: Tensor) -> Tensor:
        h1 = activate(F.conv2d(xt, k1, b1, stride=1, pad=1))
        h2 = F.leaky_relu(F.conv2d(h1, k2, b2, stride=stride, pad=1))
        if stride == 1:
            h2 = F.bilinear_upsample(F.max_pool2d(h2, 2), 2)
        else:
            h2 = F.bilinear_upsample(h2, 2)
        out = F.conv2d(concat([h1, h2], axis=0), k3, None, stride=1, pad=0)
        return sum_(mul(out, w_out)) + mean(square(h2)) * 0.5

    return [k1, b1, k2, b2, k3], x, loss_fn


def gradcheck_network(seed: int) -> tuple[float, int]:
    params, x, loss_fn = random_network(seed)
    xt = Tensor(x.copy(), requires_grad=True)
    backward(loss_fn(xt))
    analytic = [p.grad for p in params] + [xt.grad]

    def f():
        return loss_fn(Tensor(x)).item()

    numeric = finite_difference(f, [p.data for p in params] + [x])
    n_params = sum(p.data.size for p in params)
    return max_relative_error(analytic, numeric), n_params
