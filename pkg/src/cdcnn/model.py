"""CD-CNN assembly: location and communication CNNs, balancer, fusion head.

Parameters live in a flat ``dict[str, ndarray]`` keyed by layer name, e.g.
``"loc.conv.W"`` or ``"out.fuse.b"``. The prefix tells the domain a tensor
belongs to: ``loc.`` (location side), ``com.`` (communication side),
``out.`` (fusion + logistic output), ``ln.`` / ``cn.`` (private heads of the
standalone location / communication predictors).
"""

from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nncore
from .nncore import ShapeError

HOURS = 24
DOMAINS = ("loc", "com", "out", "ln", "cn")


@dataclass(frozen=True)
class ModelConfig:
    I: int = 24
    J: int = 24
    K1: int = 4
    M: int = 3
    N: int = 3
    D: int = 2
    K2: int = 4
    H: int = 3
    D1: int = 2
    fusion_width: int = 32
    hidden_activation: str = "tanh"
    # constant gain on both inputs; presence fractions are spread thin over
    # many zones and feed a near-flat signal into the conv layers otherwise
    input_scale: float = 10.0

    def __post_init__(self):
        if self.hidden_activation not in nncore.ACTIVATIONS:
            raise ValueError(f"hidden_activation must be one of {nncore.ACTIVATIONS}")
        if not (isinstance(self.input_scale, (int, float)) and math.isfinite(self.input_scale) and self.input_scale > 0):
            raise ValueError(f"ModelConfig.input_scale must be a positive real, got {self.input_scale!r}")
        for name, value in asdict(self).items():
            if name in ("hidden_activation", "input_scale"):
                continue
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise ValueError(f"ModelConfig.{name} must be a positive integer, got {value!r}")
        if self.M > self.I or self.N > self.J:
            raise ValueError(f"location filter {self.M}x{self.N} exceeds grid {self.I}x{self.J}")
        if self.H > HOURS:
            raise ValueError(f"communication filter length {self.H} exceeds {HOURS}")

    @property
    def conv_loc_shape(self) -> tuple[int, int]:
        return self.I - self.M + 1, self.J - self.N + 1

    @property
    def conv_com_length(self) -> int:
        return HOURS - self.H + 1

    @property
    def loc_dim(self) -> int:
        P, Q = self.conv_loc_shape
        return self.K1 * nncore.pooled_size(P, self.D) * nncore.pooled_size(Q, self.D)

    @property
    def com_dim(self) -> int:
        return self.K2 * nncore.pooled_size(self.conv_com_length, self.D1)


@dataclass(frozen=True)
class BalancerSpec:
    loc_widths: tuple[int, ...]
    com_widths: tuple[int, ...]
    shared_width: int


def build_balancer(loc_dim: int, com_dim: int) -> BalancerSpec:
    """Width chains that halve the location features and double the
    communication features until both meet at a common power of two."""
    if com_dim < 1 or loc_dim < 1:
        raise ValueError("feature dimensions must be positive")
    if loc_dim < com_dim:
        raise ValueError(f"loc_dim {loc_dim} < com_dim {com_dim}; swap the roles")
    exponent = (math.floor(math.log2(loc_dim)) + math.ceil(math.log2(com_dim))) // 2
    # clamp so neither chain has to run the wrong way on near-equal dims
    shared = min(max(2 ** exponent, com_dim), loc_dim)
    loc = [loc_dim]
    while loc[-1] // 2 > shared:
        loc.append(loc[-1] // 2)
    if loc[-1] != shared:
        loc.append(shared)
    com = [com_dim]
    while com[-1] * 2 < shared:
        com.append(com[-1] * 2)
    if com[-1] != shared:
        com.append(shared)
    return BalancerSpec(tuple(loc), tuple(com), shared)


def balancer_for(config: ModelConfig) -> BalancerSpec:
    if config.loc_dim >= config.com_dim:
        return build_balancer(config.loc_dim, config.com_dim)
    swapped = build_balancer(config.com_dim, config.loc_dim)
    return BalancerSpec(swapped.com_widths, swapped.loc_widths, swapped.shared_width)


# ----------------------------------------------------------------------------
# layers: hold structure only, parameters are looked up by name
# ----------------------------------------------------------------------------

def _gain(activation: str) -> float:
    # logistic units have slope 1/4 at the origin
    return 4.0 if activation == "sigmoid" else 1.0


class _Layer:
    name = ""
    param_shapes: dict[str, tuple[int, ...]] = {}

    def init(self, rng, out):
        pass


class _Conv2D(_Layer):
    def __init__(self, name, K, M, N, activation="sigmoid"):
        self.name, self.activation = name, activation
        self.fan_in, self.fan_out = 2 * M * N, K * M * N
        self.param_shapes = {f"{name}.W": (K, 2, M, N), f"{name}.b": (K,)}

    def init(self, rng, out):
        W, b = self.param_shapes
        out[W] = nncore.glorot_uniform(rng, self.param_shapes[W], self.fan_in, self.fan_out, _gain(self.activation))
        out[b] = np.zeros(self.param_shapes[b])

    def forward(self, params, x):
        y, cols = nncore.conv2d_two_channel(
            x, params[f"{self.name}.W"], params[f"{self.name}.b"], self.activation, return_cols=True
        )
        return y, (x, y, cols)

    def backward(self, params, cache, g, need_input):
        x, y, cols = cache
        bundle = nncore.conv2d_two_channel_backward(
            x, params[f"{self.name}.W"], y, g, self.activation, need_input, cols=cols
        )
        return {f"{self.name}.{k}": v for k, v in bundle.params.items()}, bundle.input


class _Conv1D(_Conv2D):
    def __init__(self, name, K, H, activation="sigmoid"):
        self.name, self.activation = name, activation
        self.fan_in, self.fan_out = 2 * H, K * H
        self.param_shapes = {f"{name}.W": (K, 2, H), f"{name}.b": (K,)}

    def forward(self, params, x):
        y = nncore.conv1d_two_row(x, params[f"{self.name}.W"], params[f"{self.name}.b"], self.activation)
        return y, (x, y)

    def backward(self, params, cache, g, need_input):
        x, y = cache
        bundle = nncore.conv1d_two_row_backward(x, params[f"{self.name}.W"], y, g, self.activation, need_input)
        return {f"{self.name}.{k}": v for k, v in bundle.params.items()}, bundle.input


class _Pool(_Layer):
    def __init__(self, window, naxes):
        self.window, self.naxes = window, naxes
        self.param_shapes = {}

    def forward(self, params, x):
        pool = nncore.avg_pool2d if self.naxes == 2 else nncore.avg_pool1d
        return pool(x, self.window), x.shape

    def backward(self, params, cache, g, need_input):
        back = nncore.avg_pool2d_backward if self.naxes == 2 else nncore.avg_pool1d_backward
        return {}, back(cache, self.window, g).input


class _Flatten(_Layer):
    param_shapes = {}

    def forward(self, params, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, params, cache, g, need_input):
        return {}, g.reshape(cache)


class _Dense(_Layer):
    def __init__(self, name, n_in, n_out, activation="sigmoid"):
        self.name, self.activation = name, activation
        self.n_in, self.n_out = n_in, n_out
        self.param_shapes = {f"{name}.W": (n_out, n_in), f"{name}.b": (n_out,)}

    def init(self, rng, out):
        out[f"{self.name}.W"] = nncore.glorot_uniform(rng, (self.n_out, self.n_in), self.n_in, self.n_out, _gain(self.activation))
        out[f"{self.name}.b"] = np.zeros(self.n_out)

    def forward(self, params, x):
        y = nncore.dense_forward(x, params[f"{self.name}.W"], params[f"{self.name}.b"], self.activation)
        return y, (x, y)

    def backward(self, params, cache, g, need_input):
        x, y = cache
        bundle = nncore.dense_backward(x, params[f"{self.name}.W"], y, g, self.activation, need_input)
        return {f"{self.name}.{k}": v for k, v in bundle.params.items()}, bundle.input


def _run(layers, params, x):
    caches = []
    for layer in layers:
        x, cache = layer.forward(params, x)
        caches.append(cache)
    return x, caches


def _unrun(layers, params, caches, g, grads, need_input=False):
    for i in range(len(layers) - 1, -1, -1):
        wants_input = need_input or i > 0
        layer_grads, g = layers[i].backward(params, caches[i], g, wants_input)
        grads.update(layer_grads)
    return g


# ----------------------------------------------------------------------------
# networks
# ----------------------------------------------------------------------------

@dataclass
class ForwardCache:
    params_ref: dict
    loc: list | None = None
    com: list | None = None
    head: list = field(default_factory=list)
    split: int = 0


class Network:
    """One of the three predictors built from a :class:`ModelConfig`.

    ``kind="cdcnn"`` is the fused model, ``"ln"`` and ``"cn"`` the standalone
    location and communication predictors (domain path + private logistic
    head). ``balanced=False`` drops the balancing chains (the NoBal ablation);
    fusion then sees the raw pooled features.
    """

    def __init__(self, config: ModelConfig, kind: str = "cdcnn", balanced: bool = True):
        if kind not in ("cdcnn", "ln", "cn"):
            raise ValueError(f"unknown network kind {kind!r}")
        self.config, self.kind, self.balanced = config, kind, balanced
        self.balancer = balancer_for(config) if balanced else None
        c = config
        act = c.hidden_activation
        self.loc: list[_Layer] = []
        self.com: list[_Layer] = []
        if kind in ("cdcnn", "ln"):
            self.loc = [_Conv2D("loc.conv", c.K1, c.M, c.N, act), _Pool(c.D, 2), _Flatten()]
            if balanced:
                widths = self.balancer.loc_widths
                self.loc += [_Dense(f"loc.bal{i}", a, b, act) for i, (a, b) in enumerate(zip(widths, widths[1:]))]
        if kind in ("cdcnn", "cn"):
            self.com = [_Conv1D("com.conv", c.K2, c.H, act), _Pool(c.D1, 1), _Flatten()]
            if balanced:
                widths = self.balancer.com_widths
                self.com += [_Dense(f"com.bal{i}", a, b, act) for i, (a, b) in enumerate(zip(widths, widths[1:]))]
        loc_out = self.balancer.shared_width if balanced else c.loc_dim
        com_out = self.balancer.shared_width if balanced else c.com_dim
        if kind == "cdcnn":
            self.head = [_Dense("out.fuse", loc_out + com_out, c.fusion_width, act), _Dense("out.lr", c.fusion_width, 1)]
        elif kind == "ln":
            self.head = [_Dense("ln.lr", loc_out, 1)]
        else:
            self.head = [_Dense("cn.lr", com_out, 1)]
        self.loc_out_dim, self.com_out_dim = loc_out, com_out

    @property
    def layers(self) -> list[_Layer]:
        return self.loc + self.com + self.head

    @property
    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for layer in self.layers:
            shapes.update(layer.param_shapes)
        return shapes

    @property
    def param_names(self) -> list[str]:
        return list(self.param_shapes)

    def init_params(self, seed: int) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for layer in self.layers:
            if layer.param_shapes:
                layer.init(_layer_rng(seed, layer.name), out)
        return out

    def check_params(self, params):
        for name, shape in self.param_shapes.items():
            if name not in params:
                raise KeyError(f"missing parameter {name!r}")
            if params[name].shape != shape:
                raise ShapeError(f"parameter {name!r} has shape {params[name].shape}, expected {shape}")

    def _check_inputs(self, R, U):
        c = self.config
        if self.loc:
            if R is None or R.ndim != 4 or R.shape[1:] != (2, c.I, c.J):
                raise ShapeError(f"location input must be (B, 2, {c.I}, {c.J}), got {None if R is None else R.shape}")
        if self.com:
            if U is None or U.ndim != 3 or U.shape[1:] != (2, HOURS):
                raise ShapeError(f"communication input must be (B, 2, {HOURS}), got {None if U is None else U.shape}")
        if self.loc and self.com and R.shape[0] != U.shape[0]:
            raise ShapeError("location and communication batches differ in size")

    def _scaled(self, R, U):
        s = float(self.config.input_scale)
        R = None if R is None else np.asarray(R, dtype=np.float64) * s
        U = None if U is None else np.asarray(U, dtype=np.float64) * s
        return R, U

    def forward(self, params, R=None, U=None):
        """Batched forward pass; returns ``(yhat of shape (B,), cache)``."""
        R, U = self._scaled(R if self.loc else None, U if self.com else None)
        self._check_inputs(R, U)
        cache = ForwardCache(params_ref={k: params[k] for k in self.param_names})
        parts = []
        if self.loc:
            oL, cache.loc = _run(self.loc, params, R)
            parts.append(oL)
            cache.split = oL.shape[1]
        if self.com:
            oC, cache.com = _run(self.com, params, U)
            parts.append(oC)
        x = parts[0] if len(parts) == 1 else np.concatenate(parts, axis=1)
        y, cache.head = _run(self.head, params, x)
        return y[:, 0], cache

    def backward(self, params, cache: ForwardCache, grad_y) -> dict[str, np.ndarray]:
        """Gradients of a scalar loss w.r.t. every parameter of this network,
        given ``dloss/dyhat`` for each sample in the batch."""
        for name in self.param_names:
            if cache.params_ref.get(name) is not params[name]:
                raise RuntimeError(f"stale forward cache: parameter {name!r} changed since the forward pass")
        grad_y = np.asarray(grad_y, dtype=np.float64).reshape(-1, 1)
        grads: dict[str, np.ndarray] = {}
        g = _unrun(self.head, params, cache.head, grad_y, grads, need_input=True)
        if self.loc and self.com:
            _unrun(self.loc, params, cache.loc, g[:, :cache.split], grads)
            _unrun(self.com, params, cache.com, g[:, cache.split:], grads)
        elif self.loc:
            _unrun(self.loc, params, cache.loc, g, grads)
        else:
            _unrun(self.com, params, cache.com, g, grads)
        return {name: grads[name] for name in self.param_names}

    def predict(self, params, R=None, U=None, index=None, chunk: int = 1024) -> np.ndarray:
        """Outputs for all rows (or the rows in ``index``), in chunks."""
        if not self.loc:
            R = None
        if not self.com:
            U = None
        n = (R if R is not None else U).shape[0] if index is None else len(index)
        out = np.empty(n)
        for start in range(0, n, chunk):
            rows = slice(start, start + chunk) if index is None else index[start:start + chunk]
            out[start:start + chunk] = self.forward(params, None if R is None else R[rows],
                                                    None if U is None else U[rows])[0]
        return out

    def features(self, params, R=None, U=None):
        """Balanced (or raw, for NoBal) domain features ``(o^L, o^C)``."""
        R, U = self._scaled(R if self.loc else None, U if self.com else None)
        oL = _run(self.loc, params, R)[0] if self.loc else None
        oC = _run(self.com, params, U)[0] if self.com else None
        return oL, oC


def _layer_rng(seed: int, name: str) -> np.random.Generator:
    # one stream per (seed, layer) so a layer's init never depends on which others exist
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(zlib.crc32(name.encode()),)))


def init_params(config: ModelConfig, seed: int, balanced: bool = True) -> dict[str, np.ndarray]:
    """All parameters of CD-CNN plus the LN and CN private heads."""
    params: dict[str, np.ndarray] = {}
    for kind in ("cdcnn", "ln", "cn"):
        for name, value in Network(config, kind, balanced).init_params(seed).items():
            params.setdefault(name, value)
    return {name: params[name] for name in sorted(params, key=_declaration_key)}


def _declaration_key(name: str):
    domain = name.split(".", 1)[0]
    return DOMAINS.index(domain), name


def partition(params: dict[str, np.ndarray]) -> dict[str, dict[str, np.ndarray]]:
    """Split parameters into ``theta_L``, ``theta_C``, ``theta_O`` and heads."""
    out: dict[str, dict[str, np.ndarray]] = {d: {} for d in DOMAINS}
    for name, value in params.items():
        out[name.split(".", 1)[0]][name] = value
    return out


def cdcnn_forward(params, R, U, config: ModelConfig, balanced: bool = True):
    return Network(config, "cdcnn", balanced).forward(params, R, U)


def ln_forward(params, R, config: ModelConfig, balanced: bool = True):
    return Network(config, "ln", balanced).forward(params, R=R)[0]


def cn_forward(params, U, config: ModelConfig, balanced: bool = True):
    return Network(config, "cn", balanced).forward(params, U=U)[0]


def param_norm(params, names=None) -> float:
    names = params.keys() if names is None else names
    return math.sqrt(sum(float(np.sum(params[k] ** 2)) for k in names))
