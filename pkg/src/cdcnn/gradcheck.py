"""Random-configuration gradient checks against central differences."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nncore
from .model import HOURS, ModelConfig, Network

PRIMITIVES = ("conv2d", "conv1d", "pool2d", "pool1d", "dense")
NETWORKS = ("cdcnn", "ln", "cn")
TARGETS = PRIMITIVES + NETWORKS


@dataclass(frozen=True)
class CheckResult:
    target: str
    detail: str
    error: float          # per-tensor norm-relative error
    entry_error: float    # worst single entry, for diagnostics


def _result(target, detail, analytic, numeric) -> CheckResult:
    return CheckResult(target, detail, nncore.tensor_relative_error(analytic, numeric),
                       nncore.max_relative_error(analytic, numeric))


def _scalar(out, probe):
    return float(np.sum(out * probe))


def _act(rng):
    return str(rng.choice(nncore.ACTIVATIONS))


def check_primitive(name: str, rng: np.random.Generator, epsilon: float = 1e-5) -> CheckResult:
    """Compare analytic and numerical gradients of one layer primitive
    (parameters and input) under the loss ``sum(probe * output)``."""
    B = int(rng.integers(1, 4))
    if name == "conv2d":
        I, J = rng.integers(3, 8, 2)
        M, N = int(rng.integers(1, min(I, 4) + 1)), int(rng.integers(1, min(J, 4) + 1))
        K, act = int(rng.integers(1, 4)), _act(rng)
        R = rng.normal(size=(B, 2, I, J))
        theta = {"W": rng.normal(0, 0.5, (K, 2, M, N)), "b": rng.normal(0, 0.5, K), "x": R}
        out = nncore.conv2d_two_channel(R, theta["W"], theta["b"], act)
        probe = rng.normal(size=out.shape)
        g = nncore.conv2d_two_channel_backward(R, theta["W"], out, probe, act)
        analytic = {**g.params, "x": g.input}
        f = lambda p: _scalar(nncore.conv2d_two_channel(p["x"], p["W"], p["b"], act), probe)
        detail = f"B={B} I={I} J={J} K={K} M={M} N={N} {act}"
    elif name == "conv1d":
        H, K, act = int(rng.integers(1, 6)), int(rng.integers(1, 4)), _act(rng)
        U = rng.normal(size=(B, 2, HOURS))
        theta = {"W": rng.normal(0, 0.5, (K, 2, H)), "b": rng.normal(0, 0.5, K), "x": U}
        out = nncore.conv1d_two_row(U, theta["W"], theta["b"], act)
        probe = rng.normal(size=out.shape)
        g = nncore.conv1d_two_row_backward(U, theta["W"], out, probe, act)
        analytic = {**g.params, "x": g.input}
        f = lambda p: _scalar(nncore.conv1d_two_row(p["x"], p["W"], p["b"], act), probe)
        detail = f"B={B} K={K} H={H} {act}"
    elif name == "pool2d":
        K, P, Q, D = int(rng.integers(1, 4)), int(rng.integers(1, 8)), int(rng.integers(1, 8)), int(rng.integers(1, 4))
        C = rng.normal(size=(B, K, P, Q))
        theta = {"x": C}
        out = nncore.avg_pool2d(C, D)
        probe = rng.normal(size=out.shape)
        analytic = {"x": nncore.avg_pool2d_backward(C.shape, D, probe).input}
        f = lambda p: _scalar(nncore.avg_pool2d(p["x"], D), probe)
        detail = f"B={B} K={K} P={P} Q={Q} D={D}"
    elif name == "pool1d":
        K, L, D = int(rng.integers(1, 4)), int(rng.integers(1, 25)), int(rng.integers(1, 5))
        b = rng.normal(size=(B, K, L))
        theta = {"x": b}
        out = nncore.avg_pool1d(b, D)
        probe = rng.normal(size=out.shape)
        analytic = {"x": nncore.avg_pool1d_backward(b.shape, D, probe).input}
        f = lambda p: _scalar(nncore.avg_pool1d(p["x"], D), probe)
        detail = f"B={B} K={K} L={L} D1={D}"
    elif name == "dense":
        n_in, n_out, act = int(rng.integers(1, 9)), int(rng.integers(1, 9)), _act(rng)
        x = rng.normal(size=(B, n_in))
        theta = {"W": rng.normal(0, 0.5, (n_out, n_in)), "b": rng.normal(0, 0.5, n_out), "x": x}
        out = nncore.dense_forward(x, theta["W"], theta["b"], act)
        probe = rng.normal(size=out.shape)
        g = nncore.dense_backward(x, theta["W"], out, probe, act)
        analytic = {**g.params, "x": g.input}
        f = lambda p: _scalar(nncore.dense_forward(p["x"], p["W"], p["b"], act), probe)
        detail = f"B={B} in={n_in} out={n_out} {act}"
    else:
        raise ValueError(f"unknown primitive {name!r}")
    numeric = nncore.finite_difference_grad(f, theta, epsilon)
    return _result(name, detail, analytic, numeric)


def random_model_config(rng: np.random.Generator) -> ModelConfig:
    I, J = (int(v) for v in rng.integers(4, 9, 2))
    return ModelConfig(
        I=I, J=J, K1=int(rng.integers(1, 3)), M=int(rng.integers(1, 4)), N=int(rng.integers(1, 4)),
        D=int(rng.integers(1, 4)), K2=int(rng.integers(1, 3)), H=int(rng.integers(1, 5)),
        D1=int(rng.integers(1, 4)), fusion_width=int(rng.integers(2, 5)),
        hidden_activation=str(rng.choice(("sigmoid", "tanh"))),
        input_scale=float(rng.uniform(0.5, 3.0)),
    )


def check_network(kind: str, rng: np.random.Generator, epsilon: float = 1e-5) -> CheckResult:
    """Parameter gradients of an assembled network on a random config."""
    config = random_model_config(rng)
    balanced = bool(rng.integers(2))
    net = Network(config, kind, balanced)
    params = {k: v for k, v in net.init_params(int(rng.integers(2 ** 31))).items()}
    params = {k: v + rng.normal(0, 0.1, v.shape) for k, v in params.items()}
    B = int(rng.integers(1, 4))
    R = rng.random((B, 2, config.I, config.J))
    U = rng.random((B, 2, HOURS))
    probe = rng.normal(size=B)
    y, cache = net.forward(params, R, U)
    analytic = net.backward(params, cache, probe)
    numeric = nncore.finite_difference_grad(lambda p: _scalar(net.forward(p, R, U)[0], probe), params, epsilon)
    detail = f"{'balanced' if balanced else 'raw'} {config}"
    return _result(kind, detail, analytic, numeric)


def run_checks(trials: int, seed: int = 0, epsilon: float = 1e-5, targets=TARGETS) -> list[CheckResult]:
    """``trials`` random configurations for every target."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(trials):
        for target in targets:
            check = check_network if target in NETWORKS else check_primitive
            out.append(check(target, rng, epsilon))
    return out
