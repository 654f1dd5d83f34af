"""Independent derivative verification: every layer kernel's hand-coded
backward pass is compared against central finite differences of its own
forward pass on randomized instances.

Piecewise-linear kernels get margin hygiene: sample points are nudged or
rejected until every selection (sign, winning lane, window max) has
clearance well above the probe step, so both probes stay inside one
linear piece.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DomainError
from .layers import (
    TRAIN,
    ActivationSpec,
    BatchNormState,
    ConvParams,
    DropoutSpec,
    LinearParams,
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
    softmax_xent,
)
from .numerics import SeededRng, finite_diff_grad

__all__ = ["TOLERANCE", "LAYER_TYPES", "run_gradcheck", "relative_error"]

TOLERANCE = 1e-4
_MARGIN = 1e-3  # minimum clearance from any selection boundary


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-based relative disagreement, safe near zero."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / denom)


def _instance_error(build_loss, tensors: dict, analytic: dict, eps: float = 1e-5) -> float:
    """Worst relative error over the instance's tensors.

    build_loss maps a {name: array} dict to a scalar; analytic holds the
    hand-derived gradient for each name to be checked.
    """
    worst = 0.0
    for name, grad in analytic.items():
        def loss_of(t, _name=name):
            probe = dict(tensors)
            probe[_name] = t
            return build_loss(probe)

        numeric = finite_diff_grad(loss_of, tensors[name], eps=eps)
        worst = max(worst, relative_error(grad, numeric))
    return worst


# ---------------------------------------------------------------------------
# per-type instance generators


def _suite_linear(rng: SeededRng, instances: int) -> float:
    worst = 0.0
    for _ in range(instances):
        b = int(rng.integers(2, 5))
        n_in = int(rng.integers(2, 6))
        n_out = int(rng.integers(2, 6))
        x = rng.normal((b, n_in))
        p = LinearParams(W=rng.normal((n_out, n_in)), b=rng.normal((n_out,)))
        proj = rng.normal((b, n_out))
        _, cache = linear_forward(x, p)
        dx, dW, db = linear_backward(proj, cache)

        def build(d):
            y, _ = linear_forward(d["x"], LinearParams(W=d["W"], b=d["b"]))
            return float((y * proj).sum())

        worst = max(
            worst,
            _instance_error(build, {"x": x, "W": p.W, "b": p.b}, {"x": dx, "W": dW, "b": db}),
        )
    return worst


def _suite_conv(rng: SeededRng, instances: int) -> float:
    worst = 0.0
    for _ in range(instances):
        c_in = int(rng.integers(1, 4))
        c_out = int(rng.integers(1, 4))
        kh = int(rng.integers(1, 4))
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, 2))
        x = rng.normal((2, c_in, 5, 5))
        p = ConvParams(
            kernels=rng.normal((c_out, c_in, kh, kh)),
            bias=rng.normal((c_out,)),
            stride=stride,
            pad=pad,
        )
        y, cache = conv2d_forward(x, p)
        proj = rng.normal(y.shape)
        dx, dk, db = conv2d_backward(proj, cache)

        def build(d):
            pp = ConvParams(kernels=d["kernels"], bias=d["bias"], stride=stride, pad=pad)
            out, _ = conv2d_forward(d["x"], pp)
            return float((out * proj).sum())

        worst = max(
            worst,
            _instance_error(
                build,
                {"x": x, "kernels": p.kernels, "bias": p.bias},
                {"x": dx, "kernels": dk, "bias": db},
            ),
        )
    return worst


def _suite_batchnorm(rng: SeededRng, instances: int) -> float:
    worst = 0.0
    for i in range(instances):
        if i % 2 == 0:
            feats = int(rng.integers(2, 6))
            f = rng.normal((int(rng.integers(3, 7)), feats))
        else:
            feats = int(rng.integers(1, 4))
            f = rng.normal((3, feats, 4, 4))
        gamma = rng.normal((feats,)) + 2.0  # keep the scale away from zero
        beta = rng.normal((feats,))

        def make_state(g, b_):
            return BatchNormState(
                gamma=g,
                beta=b_,
                running_mean=np.zeros(feats),
                running_var=np.ones(feats),
            )

        h, cache = batchnorm_forward(f, make_state(gamma, beta), TRAIN, update_running=False)
        proj = rng.normal(h.shape)
        df, dgamma, dbeta = batchnorm_backward(proj, cache)

        def build(d):
            out, _ = batchnorm_forward(
                d["f"], make_state(d["gamma"], d["beta"]), TRAIN, update_running=False
            )
            return float((out * proj).sum())

        worst = max(
            worst,
            _instance_error(
                build,
                {"f": f, "gamma": gamma, "beta": beta},
                {"f": df, "gamma": dgamma, "beta": dbeta},
            ),
        )
    return worst


def _maxout_safe_preact(rng: SeededRng, shape, k: int, lane_axis_last: bool) -> np.ndarray:
    """Resample until every unit's best lane beats the runner-up by a
    margin, so finite differences cannot flip the winner."""
    for _ in range(200):
        h = rng.normal(shape)
        if lane_axis_last:
            lanes = h.reshape(shape[0], shape[1] // k, k)
        else:
            lanes = h.reshape(shape[0], shape[1] // k, k, *shape[2:])
            lanes = np.moveaxis(lanes, 2, -1)
        top2 = np.sort(lanes, axis=-1)[..., -2:]
        if (top2[..., 1] - top2[..., 0]).min() > _MARGIN:
            return h
    raise DomainError("could not sample a margin-safe maxout instance")


def _suite_maxout(rng: SeededRng, instances: int) -> float:
    worst = 0.0
    for i in range(instances):
        k = int(rng.integers(2, 5))
        spec = ActivationSpec("maxout", k=k)
        if i % 2 == 0:
            units = int(rng.integers(2, 5))
            h = _maxout_safe_preact(rng, (3, units * k), k, lane_axis_last=True)
        else:
            units = int(rng.integers(1, 3))
            h = _maxout_safe_preact(rng, (2, units * k, 3, 3), k, lane_axis_last=False)
        y, _, cache = activation_forward(h, spec)
        proj = rng.normal(y.shape)
        dh, _ = activation_backward(proj, cache)

        def build(d):
            out, _, _ = activation_forward(d["h"], spec)
            return float((out * proj).sum())

        worst = max(worst, _instance_error(build, {"h": h}, {"h": dh}))
    return worst


def _signed_margin(h: np.ndarray) -> np.ndarray:
    return h + np.where(h >= 0, _MARGIN * 10, -_MARGIN * 10)


def _suite_rectifier(kind: str):
    def suite(rng: SeededRng, instances: int) -> float:
        worst = 0.0
        for i in range(instances):
            if i % 2 == 0:
                units = int(rng.integers(2, 7))
                h = _signed_margin(rng.normal((4, units)))
            else:
                units = int(rng.integers(1, 4))
                h = _signed_margin(rng.normal((2, units, 3, 3)))
            if kind == "prelu":
                spec = ActivationSpec("prelu", alpha=rng.uniform(0.1, 0.5, (units,)))
            else:
                spec = ActivationSpec(kind)
            y, _, cache = activation_forward(h, spec)
            proj = rng.normal(y.shape)
            dh, dalpha = activation_backward(proj, cache)

            tensors = {"h": h}
            analytic = {"h": dh}
            if kind == "prelu":
                tensors["alpha"] = spec.alpha
                analytic["alpha"] = dalpha

            def build(d):
                s = (
                    ActivationSpec("prelu", alpha=d["alpha"])
                    if kind == "prelu"
                    else spec
                )
                out, _, _ = activation_forward(d["h"], s)
                return float((out * proj).sum())

            worst = max(worst, _instance_error(build, tensors, analytic))
        return worst

    return suite


def _suite_dropout_off(rng: SeededRng, instances: int) -> float:
    spec = DropoutSpec(p=0.0)
    worst = 0.0
    for _ in range(instances):
        x = rng.normal((3, int(rng.integers(2, 7))))
        y, cache = dropout_forward(x, spec, TRAIN)
        proj = rng.normal(y.shape)
        dx = dropout_backward(proj, cache)

        def build(d):
            out, _ = dropout_forward(d["x"], spec, TRAIN)
            return float((out * proj).sum())

        worst = max(worst, _instance_error(build, {"x": x}, {"x": dx}))
    return worst


def _maxpool_safe_input(rng: SeededRng, shape, window: int, stride: int, pad: int) -> np.ndarray:
    """Resample until each pooling window's max has clear margin over the
    runner-up (padding counts as minus infinity, so it never competes)."""
    for _ in range(200):
        x = rng.normal(shape)
        padded = np.pad(
            x,
            ((0, 0), (0, 0), (pad, pad), (pad, pad)),
            constant_values=-np.inf,
        )
        wins = sliding_window_view(padded, (window, window), axis=(2, 3))[
            :, :, ::stride, ::stride, :, :
        ]
        flat = wins.reshape(*wins.shape[:4], -1)
        top2 = np.sort(flat, axis=-1)[..., -2:]
        gap = top2[..., 1] - top2[..., 0]
        gap = np.where(np.isfinite(gap), gap, np.inf)  # single-finite windows are safe
        if gap.min() > _MARGIN:
            return x
    raise DomainError("could not sample a margin-safe max-pool instance")


def _suite_pool(kind: str):
    def suite(rng: SeededRng, instances: int) -> float:
        worst = 0.0
        for _ in range(instances):
            c = int(rng.integers(1, 4))
            window = int(rng.integers(2, 4))
            stride = int(rng.integers(1, 3))
            pad = int(rng.integers(0, 2))
            shape = (2, c, 5, 5)
            if kind == "max":
                x = _maxpool_safe_input(rng, shape, window, stride, pad)
            else:
                x = rng.normal(shape)
            y, cache = pool_forward(x, kind, window, stride, pad)
            proj = rng.normal(y.shape)
            dx = pool_backward(proj, cache)

            def build(d):
                out, _ = pool_forward(d["x"], kind, window, stride, pad)
                return float((out * proj).sum())

            worst = max(worst, _instance_error(build, {"x": x}, {"x": dx}))
        return worst

    return suite


def _suite_softmax_xent(rng: SeededRng, instances: int) -> float:
    worst = 0.0
    for _ in range(instances):
        b = int(rng.integers(2, 6))
        classes = int(rng.integers(2, 8))
        logits = rng.normal((b, classes))
        labels = rng.integers(0, classes, (b,))
        _, grad = softmax_xent(logits, labels)

        def build(d):
            loss, _ = softmax_xent(d["logits"], labels)
            return float(loss)

        worst = max(worst, _instance_error(build, {"logits": logits}, {"logits": grad}))
    return worst


LAYER_TYPES = {
    "linear": _suite_linear,
    "conv": _suite_conv,
    "batchnorm": _suite_batchnorm,
    "maxout": _suite_maxout,
    "relu": _suite_rectifier("relu"),
    "lrelu": _suite_rectifier("lrelu"),
    "prelu": _suite_rectifier("prelu"),
    "dropout_off": _suite_dropout_off,
    "maxpool": _suite_pool("max"),
    "avgpool": _suite_pool("avg"),
    "softmax_xent": _suite_softmax_xent,
}


def run_gradcheck(seed: int = 0, instances: int = 20) -> dict[str, float]:
    """Worst finite-difference relative error per layer type, over the
    requested number of randomized instances each."""
    if instances < 1:
        raise DomainError(f"instances must be >= 1, got {instances}")
    results = {}
    base = SeededRng(seed)
    for index, (name, suite) in enumerate(LAYER_TYPES.items()):
        results[name] = suite(base.spawn(index), instances)
    return results
