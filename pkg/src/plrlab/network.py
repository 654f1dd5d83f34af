"""Layer chains: node composition (preactivation, then optional batch
norm, then activation, then any pooling/dropout attachments), builders
for the toy MLPs and the three-block maxout convolutional classifier,
parameter initialisation, reverse-mode gradients, and snapshot I/O.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DimensionError, FormatError, StateError
from .layers import (
    INFER,
    TRAIN,
    ActivationSpec,
    BatchNormState,
    ConvParams,
    DropoutSpec,
    LinearParams,
    PoolSpec,
    activation_backward,
    activation_forward,
    batchnorm_backward,
    batchnorm_forward,
    conv2d_backward,
    conv2d_forward,
    dropout_backward,
    dropout_forward,
    linear_backward,
    linear_forward,
    pool_backward,
    pool_forward,
)
from .numerics import SeededRng, normal_sample

__all__ = [
    "LayerNode",
    "NetworkSpec",
    "InitScheme",
    "build_mlp",
    "build_mim",
    "mlp_init_scheme",
    "mim_init_scheme",
    "init_params",
    "forward",
    "backward",
    "parameters",
    "calibrate_running_moments",
    "save_snapshot",
    "load_snapshot",
]

SNAPSHOT_MAGIC = b"PLR1\n"


@dataclass
class LayerNode:
    """One network node. The field order is the composition order:
    preactivation -> optional batch norm -> activation, and the
    structure cannot express anything else. Pooling and dropout, when
    present, attach after the activation in that order."""

    preact: LinearParams | ConvParams
    bn: BatchNormState | None
    act: ActivationSpec
    pool: PoolSpec | None = None
    dropout: DropoutSpec | None = None


@dataclass
class NetworkSpec:
    """A chain of nodes plus the classifier head.

    head is a plain linear classifier; when it is None the last node
    must already emit one feature per class (global average pooling
    down to 1x1 maps), and the logits are those features flattened.
    """

    input_dims: tuple[int, ...]
    nodes: list[LayerNode]
    head: LinearParams | None


@dataclass(frozen=True)
class InitScheme:
    """Per-weight-layer scale multipliers for Normal draws plus an
    additive bias offset. scales has one entry per weight-bearing layer:
    every node, then the head if present. Biases draw from the same
    scaled Normal as their layer's weights, shifted by the offset."""

    scales: tuple[float, ...]
    bias: float = 0.0

    def __post_init__(self):
        if any(s <= 0 for s in self.scales):
            raise ConfigError(f"init scales must be positive, got {self.scales}")


def _weight_layer_count(spec: NetworkSpec) -> int:
    return len(spec.nodes) + (1 if spec.head is not None else 0)


def mlp_init_scheme(spec: NetworkSpec, scale: float = 0.01) -> InitScheme:
    """Same Normal scale for every layer (the toy-study recipe)."""
    return InitScheme(scales=(scale,) * _weight_layer_count(spec))


def mim_init_scheme(spec: NetworkSpec, first: float = 0.01, rest: float = 0.05) -> InitScheme:
    """First layer of the first block at one scale, all remaining layers
    at another."""
    n = _weight_layer_count(spec)
    return InitScheme(scales=(first,) + (rest,) * (n - 1))


# ---------------------------------------------------------------------------
# builders


def build_mlp(
    n0: int,
    L: int,
    width: int,
    act: ActivationSpec,
    with_bn: bool,
    dropout_p: float | None = None,
) -> NetworkSpec:
    """L hidden nodes of the given width and activation over an
    n0-dimensional input, optional batch norm before each activation,
    and a 2-class linear head."""
    if n0 < 1 or L < 1 or width < 1:
        raise ConfigError(f"bad MLP extents: n0={n0}, L={L}, width={width}")
    nodes = []
    in_dim = n0
    for _ in range(L):
        out_features = width * act.k
        node = LayerNode(
            preact=LinearParams.zeros(out_features, in_dim),
            bn=BatchNormState.identity(out_features) if with_bn else None,
            act=replace(act),
            pool=None,
            dropout=DropoutSpec(dropout_p) if dropout_p else None,
        )
        nodes.append(node)
        in_dim = width
    head = LinearParams.zeros(2, width)
    return NetworkSpec(input_dims=(n0,), nodes=nodes, head=head)


_MIM_WIDTHS = {
    "cifar": ((192, 160, 96), (192, 192, 192), (192, 160)),
    "mnist": ((128, 96, 48), (128, 96, 48), (128, 96)),
}
_MIM_INPUT = {"cifar": (3, 32, 32), "mnist": (1, 28, 28)}
_MIM_AVG_WINDOW = {"cifar": 8, "mnist": 7}


def build_mim(
    variant: str,
    width_scale: float = 1.0,
    classes: int = 10,
    dropout_p: float = 0.5,
) -> NetworkSpec:
    """Three-block maxout convolutional classifier.

    Each block is one 5x5 (or final 3x3) maxout conv followed by two 1x1
    maxout mlp sublayers, every sublayer with k=2 lanes and batch norm.
    Blocks 1-2 end in a 3-window/stride-2 max pool plus dropout; block 3
    ends in a global average pool over the remaining map, whose class
    channels are the logits (no extra linear head).

    The final conv uses pad 1 so the map entering the average pool is
    8x8 (32x32 inputs) or 7x7 (28x28 inputs); pad 0 would shrink it
    below the pool window.

    width_scale shrinks every filter count (class channels are never
    scaled) for desk-size runs.
    """
    variant = variant.lower()
    if variant not in _MIM_WIDTHS:
        raise ConfigError(f"unknown variant {variant!r}; expected cifar or mnist")
    if width_scale <= 0:
        raise ConfigError(f"width_scale must be positive, got {width_scale}")

    def scaled(w: int) -> int:
        return max(1, int(round(w * width_scale)))

    b1, b2, b3 = _MIM_WIDTHS[variant]
    in_ch = _MIM_INPUT[variant][0]
    k = 2
    nodes: list[LayerNode] = []

    def add(out_units, in_units, kh, pad, pool=None, dropout=None):
        out_ch = out_units * k
        nodes.append(
            LayerNode(
                preact=ConvParams.zeros(out_ch, in_units, kh, kh, stride=1, pad=pad),
                bn=BatchNormState.identity(out_ch),
                act=ActivationSpec("maxout", k=k),
                pool=pool,
                dropout=dropout,
            )
        )
        return out_units

    max_pool = PoolSpec("max", window=3, stride=2, pad=1)
    drop = DropoutSpec(dropout_p) if dropout_p else None

    c = add(scaled(b1[0]), in_ch, 5, 2)
    c = add(scaled(b1[1]), c, 1, 0)
    c = add(scaled(b1[2]), c, 1, 0, pool=max_pool, dropout=drop)
    c = add(scaled(b2[0]), c, 5, 2)
    c = add(scaled(b2[1]), c, 1, 0)
    c = add(scaled(b2[2]), c, 1, 0, pool=max_pool, dropout=drop)
    c = add(scaled(b3[0]), c, 3, 1)
    c = add(scaled(b3[1]), c, 1, 0)
    avg = PoolSpec("avg", window=_MIM_AVG_WINDOW[variant], stride=1, pad=0)
    add(classes, c, 1, 0, pool=avg)

    return NetworkSpec(input_dims=_MIM_INPUT[variant], nodes=nodes, head=None)


# ---------------------------------------------------------------------------
# initialisation


def init_params(spec: NetworkSpec, rng: SeededRng, scheme: InitScheme) -> NetworkSpec:
    """Fill every affine parameter with scale * N(0,1) draws in
    declaration order (weights then bias per layer), gamma=1 / beta=0,
    running moments (0, 1), and prelu slopes 0.25. Returns the same
    spec object.

    Biases get the same scaled draw as their layer's weights. Deeper
    layers see input variation that shrinks geometrically with depth
    while these bias offsets do not, so without batch norm one lane of a
    deep unit tends to win everywhere; batch norm's mean subtraction
    removes constant offsets exactly, which is the balanced-lane-usage
    property the normalisation study measures.
    """
    n_layers = _weight_layer_count(spec)
    if len(scheme.scales) != n_layers:
        raise ConfigError(
            f"scheme has {len(scheme.scales)} scales for {n_layers} weight layers"
        )
    for i, node in enumerate(spec.nodes):
        scale = scheme.scales[i]
        p = node.preact
        if isinstance(p, LinearParams):
            p.W[...] = normal_sample(rng, p.W.shape, scale)
            p.b[...] = normal_sample(rng, p.b.shape, scale) + scheme.bias
            units = p.W.shape[0] // node.act.k
        else:
            p.kernels[...] = normal_sample(rng, p.kernels.shape, scale)
            p.bias[...] = normal_sample(rng, p.bias.shape, scale) + scheme.bias
            units = p.kernels.shape[0] // node.act.k
        if node.bn is not None:
            node.bn.gamma[...] = 1.0
            node.bn.beta[...] = 0.0
            node.bn.running_mean[...] = 0.0
            node.bn.running_var[...] = 1.0
        if node.act.kind == "prelu":
            node.act.alpha = np.full(units, 0.25)
    if spec.head is not None:
        spec.head.W[...] = normal_sample(rng, spec.head.W.shape, scheme.scales[-1])
        spec.head.b[...] = normal_sample(rng, spec.head.b.shape, scheme.scales[-1]) + scheme.bias
    return spec


def parameters(spec: NetworkSpec) -> dict[str, np.ndarray]:
    """Trainable arrays keyed by stable names, in declaration order.
    The arrays are the live objects, so in-place optimizer updates are
    visible to the network."""
    out: dict[str, np.ndarray] = {}
    for i, node in enumerate(spec.nodes):
        tag = f"node{i}"
        if isinstance(node.preact, LinearParams):
            out[f"{tag}.W"] = node.preact.W
            out[f"{tag}.b"] = node.preact.b
        else:
            out[f"{tag}.kernels"] = node.preact.kernels
            out[f"{tag}.bias"] = node.preact.bias
        if node.bn is not None:
            out[f"{tag}.gamma"] = node.bn.gamma
            out[f"{tag}.beta"] = node.bn.beta
        if node.act.kind == "prelu" and isinstance(node.act.alpha, np.ndarray):
            out[f"{tag}.alpha"] = node.act.alpha
    if spec.head is not None:
        out["head.W"] = spec.head.W
        out["head.b"] = spec.head.b
    return out


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class NetCache:
    spec: NetworkSpec
    mode: str
    node_caches: list
    patterns: list
    pre_head_shape: tuple[int, ...] | None
    head_cache: object | None


def forward(
    spec: NetworkSpec,
    x: np.ndarray,
    mode: str,
    rng: SeededRng | None = None,
    want_patterns: bool = True,
):
    """Run the chain; returns (logits, cache). The cache keeps every
    activation pattern for region analysis and everything backward
    needs. Infer mode mutates no state.

    want_patterns=False (infer only) skips pattern extraction and the
    gradient bookkeeping, for cheap evaluation passes."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != tuple(spec.input_dims):
        raise DimensionError(
            f"input dims {x.shape[1:]} do not match spec {spec.input_dims}"
        )
    if not want_patterns and mode == TRAIN:
        raise StateError("train-mode forward always needs patterns for backward")
    node_caches = []
    patterns = []
    for node in spec.nodes:
        if isinstance(node.preact, LinearParams):
            f, pre_cache = linear_forward(x, node.preact)
        else:
            f, pre_cache = conv2d_forward(x, node.preact)
        if node.bn is not None:
            h, bn_cache = batchnorm_forward(f, node.bn, mode)
        else:
            h, bn_cache = f, None
        y, pattern, act_cache = activation_forward(h, node.act, want_pattern=want_patterns)
        if node.pool is not None:
            y, pool_cache = pool_forward(
                y,
                node.pool.kind,
                node.pool.window,
                node.pool.stride,
                node.pool.pad,
                need_grad=(mode == TRAIN),
            )
        else:
            pool_cache = None
        if node.dropout is not None:
            y, drop_cache = dropout_forward(y, node.dropout, mode, rng)
        else:
            drop_cache = None
        node_caches.append((pre_cache, bn_cache, act_cache, pool_cache, drop_cache))
        patterns.append(pattern)
        x = y
    pre_head_shape = None
    head_cache = None
    if spec.head is not None:
        if x.ndim > 2:
            pre_head_shape = x.shape
            x = x.reshape(x.shape[0], -1)
        logits, head_cache = linear_forward(x, spec.head)
    else:
        if x.ndim == 4:
            if x.shape[2] != 1 or x.shape[3] != 1:
                raise DimensionError(
                    f"headless network must end in 1x1 maps, got {x.shape}"
                )
            logits = x.reshape(x.shape[0], x.shape[1])
        elif x.ndim == 2:
            logits = x
        else:
            raise DimensionError(f"cannot read logits from shape {x.shape}")
        pre_head_shape = x.shape
    cache = NetCache(spec, mode, node_caches, patterns, pre_head_shape, head_cache)
    return logits, cache


def backward(spec: NetworkSpec, cache: NetCache, loss_grad: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients for every trainable array, keyed like parameters()."""
    if cache.spec is not spec:
        raise StateError("cache was produced by a different network")
    if cache.mode != TRAIN:
        raise StateError("backward needs a train-mode cache")
    grads: dict[str, np.ndarray] = {}
    if spec.head is not None:
        dx, dW, db = linear_backward(loss_grad, cache.head_cache)
        grads["head.W"] = dW
        grads["head.b"] = db
        if cache.pre_head_shape is not None:
            dx = dx.reshape(cache.pre_head_shape)
    else:
        dx = loss_grad.reshape(cache.pre_head_shape)
    for i in range(len(spec.nodes) - 1, -1, -1):
        node = spec.nodes[i]
        pre_cache, bn_cache, act_cache, pool_cache, drop_cache = cache.node_caches[i]
        tag = f"node{i}"
        if drop_cache is not None:
            dx = dropout_backward(dx, drop_cache)
        if pool_cache is not None:
            dx = pool_backward(dx, pool_cache)
        dx, dalpha = activation_backward(dx, act_cache)
        if dalpha is not None:
            grads[f"{tag}.alpha"] = dalpha
        if bn_cache is not None:
            dx, dgamma, dbeta = batchnorm_backward(dx, bn_cache)
            grads[f"{tag}.gamma"] = dgamma
            grads[f"{tag}.beta"] = dbeta
        if isinstance(node.preact, LinearParams):
            dx, dW, db = linear_backward(dx, pre_cache)
            grads[f"{tag}.W"] = dW
            grads[f"{tag}.b"] = db
        else:
            dx, dk, dbias = conv2d_backward(dx, pre_cache)
            grads[f"{tag}.kernels"] = dk
            grads[f"{tag}.bias"] = dbias
    return grads


def calibrate_running_moments(spec: NetworkSpec, x: np.ndarray) -> None:
    """Set every batch-norm node's running moments to the statistics of
    this batch as it flows through the network (dropout skipped, exactly
    as at inference). After this, infer-mode behaviour on the batch
    matches train-mode standardisation, which is what pattern censuses
    at initialisation need."""
    x = np.asarray(x, dtype=np.float64)
    for node in spec.nodes:
        if isinstance(node.preact, LinearParams):
            f, _ = linear_forward(x, node.preact)
        else:
            f, _ = conv2d_forward(x, node.preact)
        if node.bn is not None:
            saved = node.bn.momentum
            node.bn.momentum = 1.0
            try:
                h, _ = batchnorm_forward(f, node.bn, TRAIN)
            finally:
                node.bn.momentum = saved
        else:
            h = f
        y, _, _ = activation_forward(h, node.act)
        if node.pool is not None:
            y, _ = pool_forward(
                y, node.pool.kind, node.pool.window, node.pool.stride, node.pool.pad
            )
        x = y


# ---------------------------------------------------------------------------
# snapshots


def _spec_descriptor(spec: NetworkSpec, arrays: list[tuple[str, np.ndarray]]) -> dict:
    nodes = []
    for node in spec.nodes:
        if isinstance(node.preact, LinearParams):
            pre = {"type": "linear", "out": node.preact.W.shape[0], "in": node.preact.W.shape[1]}
        else:
            k = node.preact.kernels
            pre = {
                "type": "conv",
                "out": k.shape[0],
                "in": k.shape[1],
                "kh": k.shape[2],
                "kw": k.shape[3],
                "stride": node.preact.stride,
                "pad": node.preact.pad,
            }
        bn = None
        if node.bn is not None:
            bn = {"epsilon": node.bn.epsilon, "momentum": node.bn.momentum}
        act = {"kind": node.act.kind, "k": node.act.k}
        if node.act.kind == "lrelu":
            act["alpha"] = float(node.act.alpha)
        pool = None
        if node.pool is not None:
            pool = {
                "kind": node.pool.kind,
                "window": node.pool.window,
                "stride": node.pool.stride,
                "pad": node.pool.pad,
            }
        dropout = node.dropout.p if node.dropout is not None else None
        nodes.append({"preact": pre, "bn": bn, "act": act, "pool": pool, "dropout": dropout})
    head = None
    if spec.head is not None:
        head = {"out": spec.head.W.shape[0], "in": spec.head.W.shape[1]}
    return {
        "input_dims": list(spec.input_dims),
        "nodes": nodes,
        "head": head,
        "arrays": [[name, list(a.shape)] for name, a in arrays],
    }


def _snapshot_arrays(spec: NetworkSpec) -> list[tuple[str, np.ndarray]]:
    """Every persistent array in declaration order: trainable parameters
    plus batch-norm running moments."""
    out = []
    for i, node in enumerate(spec.nodes):
        tag = f"node{i}"
        if isinstance(node.preact, LinearParams):
            out.append((f"{tag}.W", node.preact.W))
            out.append((f"{tag}.b", node.preact.b))
        else:
            out.append((f"{tag}.kernels", node.preact.kernels))
            out.append((f"{tag}.bias", node.preact.bias))
        if node.bn is not None:
            out.append((f"{tag}.gamma", node.bn.gamma))
            out.append((f"{tag}.beta", node.bn.beta))
            out.append((f"{tag}.running_mean", node.bn.running_mean))
            out.append((f"{tag}.running_var", node.bn.running_var))
        if node.act.kind == "prelu" and isinstance(node.act.alpha, np.ndarray):
            out.append((f"{tag}.alpha", node.act.alpha))
    if spec.head is not None:
        out.append(("head.W", spec.head.W))
        out.append(("head.b", spec.head.b))
    return out


def save_snapshot(spec: NetworkSpec, path) -> None:
    """Write magic, a text header describing the architecture and array
    shapes, then the arrays as little-endian 64-bit floats in
    declaration order. Round-trips bit-exactly."""
    arrays = _snapshot_arrays(spec)
    header = json.dumps(_spec_descriptor(spec, arrays)).encode()
    with open(path, "wb") as fh:
        fh.write(SNAPSHOT_MAGIC)
        fh.write(f"header {len(header)}\n".encode())
        fh.write(header)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def _spec_from_descriptor(desc: dict) -> NetworkSpec:
    nodes = []
    for nd in desc["nodes"]:
        pre = nd["preact"]
        if pre["type"] == "linear":
            preact = LinearParams.zeros(pre["out"], pre["in"])
        elif pre["type"] == "conv":
            preact = ConvParams.zeros(
                pre["out"], pre["in"], pre["kh"], pre["kw"],
                stride=pre["stride"], pad=pre["pad"],
            )
        else:
            raise FormatError(f"unknown preactivation type {pre['type']!r}")
        bn = None
        if nd["bn"] is not None:
            n_features = pre["out"]
            bn = BatchNormState.identity(
                n_features, epsilon=nd["bn"]["epsilon"], momentum=nd["bn"]["momentum"]
            )
        act_desc = nd["act"]
        act = ActivationSpec(act_desc["kind"], k=act_desc["k"], alpha=act_desc.get("alpha"))
        if act.kind == "prelu":
            act.alpha = np.zeros(pre["out"] // act.k)
        pool = None
        if nd["pool"] is not None:
            pool = PoolSpec(**nd["pool"])
        dropout = DropoutSpec(nd["dropout"]) if nd["dropout"] is not None else None
        nodes.append(LayerNode(preact=preact, bn=bn, act=act, pool=pool, dropout=dropout))
    head = None
    if desc["head"] is not None:
        head = LinearParams.zeros(desc["head"]["out"], desc["head"]["in"])
    return NetworkSpec(input_dims=tuple(desc["input_dims"]), nodes=nodes, head=head)


def load_snapshot(path) -> NetworkSpec:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(SNAPSHOT_MAGIC):
        raise FormatError(
            f"bad magic at byte 0: expected {SNAPSHOT_MAGIC!r}, got {blob[:5]!r}"
        )
    offset = len(SNAPSHOT_MAGIC)
    newline = blob.find(b"\n", offset)
    if newline < 0:
        raise FormatError(f"truncated header line at byte {offset}")
    line = blob[offset:newline]
    if not line.startswith(b"header "):
        raise FormatError(f"expected 'header <bytes>' at byte {offset}, got {line!r}")
    try:
        header_len = int(line.split()[1])
    except (IndexError, ValueError) as exc:
        raise FormatError(f"bad header length in {line!r}") from exc
    start = newline + 1
    if len(blob) < start + header_len:
        raise FormatError(f"truncated header: file ends at byte {len(blob)}")
    try:
        desc = json.loads(blob[start : start + header_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unparseable header at byte {start}: {exc}") from exc
    spec = _spec_from_descriptor(desc)
    arrays = _snapshot_arrays(spec)
    declared = [(name, tuple(shape)) for name, shape in desc["arrays"]]
    actual = [(name, a.shape) for name, a in arrays]
    if declared != actual:
        raise FormatError("array manifest does not match the declared architecture")
    pos = start + header_len
    for name, a in arrays:
        nbytes = a.size * 8
        if len(blob) < pos + nbytes:
            raise FormatError(
                f"truncated array {name!r}: need {nbytes} bytes at byte {pos}, "
                f"file ends at {len(blob)}"
            )
        a[...] = np.frombuffer(blob[pos : pos + nbytes], dtype="<f8").reshape(a.shape)
        pos += nbytes
    if pos != len(blob):
        raise FormatError(f"{len(blob) - pos} trailing bytes after arrays at byte {pos}")
    return spec
