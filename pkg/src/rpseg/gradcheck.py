"""Double-precision finite-difference verification of every layer type.

Each check builds a tiny random instance of one operation, reduces its output
to a scalar through a fixed weighting, and compares analytic gradients
against central differences.  The end-to-end check drives a two-level
encoder/decoder network with the focal loss on a 16-point cloud.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import MlpSpec, ParamStore, finite_diff_check
from .cloud import InputLayout, PointCloud
from .network import (
    NetworkSpec,
    XConvLayerSpec,
    build_plan,
    forward,
    init_network_params,
    init_xconv_params,
    x_transform,
)
from .training import FocalLossParams, focal_loss

TOLERANCE = 1e-4


def _weighted_sum(t: ad.Tensor, weights: np.ndarray) -> ad.Tensor:
    return ad.mean_all(ad.mul(t, ad.constant(weights, dtype=t.data.dtype)))


def _check_dense(rng) -> float:
    store = ParamStore(np.float64)
    w, b = store.add_dense("lin", 4, 3, rng)
    x = ad.constant(rng.standard_normal((5, 4)))
    weights = rng.standard_normal((5, 3))
    return finite_diff_check(lambda: _weighted_sum(ad.dense(x, w, b), weights), store)


def _check_shared_mlp(rng) -> float:
    store = ParamStore(np.float64)
    mlp = MlpSpec((3, 6, 4))
    for i in range(mlp.n_layers):
        store.add_dense(f"mlp.{i}", mlp.widths[i], mlp.widths[i + 1], rng)
    x = ad.constant(rng.standard_normal((2, 5, 3)))
    weights = rng.standard_normal((2, 5, 4))
    return finite_diff_check(
        lambda: _weighted_sum(ad.shared_mlp(x, store.mlp_layers("mlp", 2), mlp), weights),
        store)


def _check_batched_matmul(rng) -> float:
    store = ParamStore(np.float64)
    a = store.add("a", rng.standard_normal((3, 4, 4)))
    f = store.add("f", rng.standard_normal((3, 4, 5)))
    weights = rng.standard_normal((3, 4, 5))
    return finite_diff_check(lambda: _weighted_sum(ad.matmul(a, f), weights), store)


def _check_concat(rng) -> float:
    store = ParamStore(np.float64)
    a = store.add("a", rng.standard_normal((2, 3, 4)))
    b = store.add("b", rng.standard_normal((2, 3, 2)))
    weights = rng.standard_normal((2, 3, 6))
    return finite_diff_check(lambda: _weighted_sum(ad.concat_last(a, b), weights), store)


def _check_sigmoid(rng) -> float:
    store = ParamStore(np.float64)
    x = store.add("x", rng.standard_normal((4, 3)))
    weights = rng.standard_normal((4, 3))
    return finite_diff_check(lambda: _weighted_sum(ad.sigmoid(x), weights), store)


def _check_lift(rng) -> float:
    store = ParamStore(np.float64)
    mlp = MlpSpec((2, 5, 5))
    for i in range(mlp.n_layers):
        store.add_dense(f"lift.{i}", mlp.widths[i], mlp.widths[i + 1], rng)
    offsets = ad.constant(rng.standard_normal((3, 4, 2)))
    weights = rng.standard_normal((3, 4, 5))
    return finite_diff_check(
        lambda: _weighted_sum(ad.shared_mlp(offsets, store.mlp_layers("lift", 2), mlp),
                              weights),
        store)


def _check_x_transform(rng) -> float:
    store = ParamStore(np.float64)
    k, d = 4, 2
    mlp = MlpSpec((k * d, 10, k * k), final_activation=False)
    for i in range(mlp.n_layers):
        store.add_dense(f"xm.{i}", mlp.widths[i], mlp.widths[i + 1], rng)
    offsets = ad.constant(rng.standard_normal((3, k, d)))
    weights = rng.standard_normal((3, k, k))
    return finite_diff_check(
        lambda: _weighted_sum(x_transform(offsets, store.mlp_layers("xm", 2), mlp, k),
                              weights),
        store)


def _check_aggregate(rng) -> float:
    store = ParamStore(np.float64)
    k, c_star, c_out = 4, 3, 5
    w, b = store.add_dense("agg", k * c_star, c_out, rng)
    f_x = ad.constant(rng.standard_normal((3, k, c_star)))
    weights = rng.standard_normal((3, c_out))

    def f():
        flat = ad.reshape(f_x, (3, k * c_star))
        return _weighted_sum(ad.elu(ad.dense(flat, w, b)), weights)

    return finite_diff_check(f, store)


def _check_focal_loss(rng) -> float:
    store = ParamStore(np.float64)
    logits = store.add("logits", rng.standard_normal((6, 2)))
    labels = rng.integers(0, 3, size=6)
    params = FocalLossParams()
    return finite_diff_check(lambda: focal_loss(ad.sigmoid(logits), labels, params), store)


def toy_network_spec() -> NetworkSpec:
    layout = InputLayout(coords=("x", "y"), features=("v_r", "sigma"))
    encoder = (
        XConvLayerSpec(n_rep=8, k=4, grouping="ball", radii=(1.5, 3.0),
                       c_delta=4, delta_depth=2, x_mlp_widths=(8,), c_out=4),
        XConvLayerSpec(n_rep=4, k=3, grouping="knn",
                       c_delta=4, delta_depth=1, x_mlp_widths=(6,), c_out=6),
    )
    decoder = (
        XConvLayerSpec(n_rep=8, k=3, grouping="knn",
                       c_delta=4, delta_depth=1, x_mlp_widths=(6,), c_out=6),
        XConvLayerSpec(n_rep=16, k=4, grouping="ball", radii=(2.0,),
                       c_delta=4, delta_depth=1, x_mlp_widths=(8,), c_out=4),
    )
    return NetworkSpec(input_layout=layout, pp_widths=(6, 4), encoder=encoder,
                       decoder=decoder, head_widths=(8, 2))


def toy_cloud(rng, n: int = 16) -> PointCloud:
    return PointCloud(
        x=rng.uniform(-4, 4, n), y=rng.uniform(-4, 4, n),
        v_r=rng.standard_normal(n), sigma=rng.standard_normal(n) * 3.0,
        labels=rng.integers(0, 3, size=n),
    )


def _check_end_to_end(rng) -> float:
    spec = toy_network_spec()
    cloud = toy_cloud(rng, spec.input_size)
    store = init_network_params(spec, rng, dtype=np.float64)
    plan = build_plan(cloud.coord_view(spec.input_layout), spec, rng)
    params = FocalLossParams()

    def f():
        logits = forward(cloud, spec, store, plan=plan)
        return focal_loss(ad.sigmoid(logits), cloud.labels, params)

    return finite_diff_check(f, store)


CHECKS = {
    "dense": _check_dense,
    "shared_mlp": _check_shared_mlp,
    "lift": _check_lift,
    "x_transform": _check_x_transform,
    "batched_matmul": _check_batched_matmul,
    "concat": _check_concat,
    "aggregate": _check_aggregate,
    "sigmoid": _check_sigmoid,
    "focal_loss": _check_focal_loss,
    "end_to_end": _check_end_to_end,
}


def gradcheck_suite(seed: int = 0) -> dict[str, float]:
    """Max relative gradient error per operation, keyed by op name."""
    results = {}
    for i, (name, check) in enumerate(CHECKS.items()):
        results[name] = check(np.random.default_rng(seed + i))
    return results
