"""Finite-difference oracles shared by the unit and acceptance suites."""

import numpy as np

from zorl import nn
from zorl.numerics import RngStream


def rel_err(a, b) -> float:
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def central_diff(fn, arr: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. every entry of ``arr`` (mutated in place, restored)."""
    out = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + h
        fp = fn()
        arr[i] = old - h
        fm = fn()
        arr[i] = old
        out[i] = (fp - fm) / (2 * h)
    return out


def net_gradient_error(spec: nn.NetworkSpec, params: nn.NetworkParameters, x: np.ndarray, mode: str, rng: RngStream):
    """Worst relative error over every trainable array and the input gradient."""
    out, _ = nn.forward(params.copy(), spec, x, mode)
    upstream = rng.normal(out.shape)

    def loss_at(p, inp):
        return float(np.sum(upstream * nn.forward(p.copy(), spec, inp, mode)[0]))

    work = params.copy()
    _, tape = nn.forward(work, spec, x, mode)
    grads, dx = nn.backward(tape, upstream)
    errs = []
    for i, layer in enumerate(spec.layers):
        for name in nn.trainable_names(layer):
            probe = params.copy()
            fd = central_diff(lambda: loss_at(probe, x), probe.layers[i][name])
            errs.append(rel_err(grads[i][name], fd))
    xx = x.copy()
    fd_x = central_diff(lambda: loss_at(params, xx), xx)
    errs.append(rel_err(dx, fd_x))
    return max(errs)


def random_net(rng: RngStream, max_layers: int = 4, max_width: int = 16):
    """A random composed network of at most ``max_layers`` parametrized layers and its input batch."""
    kind = int(rng.integers(0, 2))
    n_param = int(rng.integers(1, max_layers + 1))
    layers = []
    if kind == 0:
        width = int(rng.integers(1, max_width + 1))
        shape = (width,)
        for j in range(n_param):
            choice = int(rng.integers(0, 3)) if j < n_param - 1 else 0
            if choice == 2:
                layers.append(nn.BatchNorm(width))
            else:
                nxt = int(rng.integers(1, max_width + 1))
                layers.append(nn.Dense(width, nxt))
                width = nxt
            if j < n_param - 1:
                layers.append(nn.Activation("tanh" if rng.integers(0, 2) else "relu"))
    else:
        c = int(rng.integers(1, 5))
        length = int(rng.integers(4, 9))
        shape = (c, length)
        layers.append(nn.BatchNorm(c))
        k = int(rng.integers(1, 4))
        stride = int(rng.integers(1, 3))
        c_out = int(rng.integers(1, 5))
        layers.append(nn.Conv1d(c, c_out, k, stride))
        layers.append(nn.Activation("tanh"))
        layers.append(nn.Flatten())
        flat = c_out * ((length - k) // stride + 1)
        layers.append(nn.Dense(flat, int(rng.integers(1, max_width + 1))))
    spec = nn.NetworkSpec(shape, tuple(layers), seed=int(rng.integers(0, 2**31)))
    params = nn.init_params(spec)
    # non-trivial BN affine and running statistics
    for d, layer in zip(params.layers, spec.layers):
        if isinstance(layer, nn.BatchNorm):
            d["gamma"] = 1.0 + 0.3 * rng.normal(layer.width)
            d["beta"] = 0.3 * rng.normal(layer.width)
            d["running_mean"] = 0.2 * rng.normal(layer.width)
            d["running_var"] = 1.0 + rng.uniform(0, 0.5, layer.width)
    batch = int(rng.integers(2, 6))
    x = rng.normal((batch, *shape))
    return spec, params, x
