"""Point-cloud segmentation network built from X-Convolution layers.

Each layer picks representative points by farthest point sampling, groups
neighbours (k-NN or radius with random doubling, optionally at several
radii), shifts every cluster into its RP frame, lifts the local coordinates
into features, learns a K x K transform that weights and permutes the
cluster's feature rows, and convolves the transformed block down to the RP.
An encoder stack of such layers feeds a mirrored decoder with skip links,
followed by a shared per-point classification head with two sigmoid
channels (vehicle, pedestrian).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import MlpSpec, ParamStore, Tensor
from .cloud import (
    InputLayout,
    Label,
    PointCloud,
    ball_query,
    farthest_point_sampling,
    knn_query,
)

GROUPINGS = ("knn", "ball")


@dataclass(frozen=True)
class XConvLayerSpec:
    """Hyperparameters of one X-Convolution layer.

    Ball grouping runs one complete branch per radius and concatenates the
    branch outputs, so the layer's total output width is
    ``len(radii) * c_out``.
    """

    n_rep: int
    k: int
    grouping: str = "ball"
    radii: tuple[float, ...] = ()
    c_delta: int = 16
    delta_depth: int = 2
    x_mlp_widths: tuple[int, ...] = (48,)
    c_out: int = 24

    def __post_init__(self):
        if self.grouping not in GROUPINGS:
            raise ValueError(f"unknown grouping {self.grouping!r}")
        if min(self.n_rep, self.k, self.c_delta, self.delta_depth, self.c_out) < 1:
            raise ValueError("layer sizes must be positive")
        if any(w < 1 for w in self.x_mlp_widths):
            raise ValueError("x_mlp_widths must be positive")
        if self.grouping == "knn":
            if self.radii:
                raise ValueError("knn grouping takes no radii")
        else:
            if not self.radii:
                raise ValueError("ball grouping needs at least one radius")
            if any(r <= 0 for r in self.radii):
                raise ValueError("radii must be positive")
            if any(b <= a for a, b in zip(self.radii, self.radii[1:])):
                raise ValueError("radii must be strictly increasing")

    @property
    def n_branches(self) -> int:
        return len(self.radii) if self.grouping == "ball" else 1

    @property
    def c_out_total(self) -> int:
        return self.n_branches * self.c_out


@dataclass(frozen=True)
class NetworkSpec:
    """Complete architecture: pre-processing MLP, encoder, mirrored decoder, head."""

    input_layout: InputLayout
    pp_widths: tuple[int, ...]
    encoder: tuple[XConvLayerSpec, ...]
    decoder: tuple[XConvLayerSpec, ...]
    head_widths: tuple[int, ...] = (96, 2)
    threshold: float = 0.5

    def __post_init__(self):
        if not self.encoder or len(self.decoder) != len(self.encoder):
            raise ValueError("decoder must mirror the encoder depth")
        if not self.head_widths or self.head_widths[-1] != 2:
            raise ValueError("head must end in 2 output channels")
        reps = [l.n_rep for l in self.encoder]
        if any(b >= a for a, b in zip(reps, reps[1:])):
            raise ValueError("encoder n_rep must be strictly decreasing")
        levels = self.levels
        if reps[0] >= levels[0]:
            raise ValueError("first encoder layer must downsample the input")
        for d, l in enumerate(self.decoder):
            want = levels[len(self.encoder) - 1 - d]
            if l.n_rep != want:
                raise ValueError(
                    f"decoder layer {d} targets {l.n_rep} points, expected {want}")

    @property
    def input_size(self) -> int:
        # the final decoder resolution restores the input cloud size
        return self.decoder[-1].n_rep

    @property
    def levels(self) -> tuple[int, ...]:
        """Cloud size at every encoder level, input first."""
        return (self.input_size,) + tuple(l.n_rep for l in self.encoder)

    @property
    def feature_width(self) -> int:
        if self.pp_widths:
            return self.pp_widths[-1]
        return self.input_layout.feature_dims

    def with_layout(self, layout: InputLayout) -> "NetworkSpec":
        return replace(self, input_layout=layout)


def _encoder_in_channels(spec: NetworkSpec) -> list[int]:
    chans = [spec.feature_width]
    for l in spec.encoder[:-1]:
        chans.append(l.c_out_total)
    return chans


def _decoder_in_channels(spec: NetworkSpec) -> list[int]:
    enc_out = [spec.feature_width] + [l.c_out_total for l in spec.encoder]
    chans = []
    source = enc_out[-1]
    for d, l in enumerate(spec.decoder):
        chans.append(source)
        skip = enc_out[len(spec.encoder) - 1 - d]
        source = l.c_out_total + skip
    return chans


def head_in_channels(spec: NetworkSpec) -> int:
    enc_out = [spec.feature_width] + [l.c_out_total for l in spec.encoder]
    source = enc_out[-1]
    for d, l in enumerate(spec.decoder):
        source = l.c_out_total + enc_out[len(spec.encoder) - 1 - d]
    return source


def _layer_mlps(layer: XConvLayerSpec, d: int, c_in: int):
    c_star = layer.c_delta + c_in
    lift = MlpSpec((d,) + (layer.c_delta,) * layer.delta_depth)
    xmlp = MlpSpec((layer.k * d,) + layer.x_mlp_widths + (layer.k * layer.k,),
                   final_activation=False)
    agg = MlpSpec((layer.k * c_star, layer.c_out))
    return lift, xmlp, agg


def _iter_mlps(spec: NetworkSpec):
    """Every dense stack in the network as (prefix, MlpSpec, row multiplier).

    The row multiplier is the number of rows the stack processes in one
    forward pass over a full-size cloud; "input" marks full-resolution stacks.
    """
    layout = spec.input_layout
    d = layout.coord_dims
    if spec.pp_widths:
        yield "pp", MlpSpec((len(layout.preprocess_fields()),) + spec.pp_widths), spec.input_size
    enc_in = _encoder_in_channels(spec)
    for e, layer in enumerate(spec.encoder):
        lift, xmlp, agg = _layer_mlps(layer, d, enc_in[e])
        for r in range(layer.n_branches):
            yield f"enc{e}.b{r}.lift", lift, layer.n_rep * layer.k
            yield f"enc{e}.b{r}.xmlp", xmlp, layer.n_rep
            yield f"enc{e}.b{r}.agg", agg, layer.n_rep
    dec_in = _decoder_in_channels(spec)
    for i, layer in enumerate(spec.decoder):
        lift, xmlp, agg = _layer_mlps(layer, d, dec_in[i])
        for r in range(layer.n_branches):
            yield f"dec{i}.b{r}.lift", lift, layer.n_rep * layer.k
            yield f"dec{i}.b{r}.xmlp", xmlp, layer.n_rep
            yield f"dec{i}.b{r}.agg", agg, layer.n_rep
    yield "head", MlpSpec((head_in_channels(spec),) + spec.head_widths,
                          final_activation=False), spec.input_size


def init_network_params(spec: NetworkSpec, rng: np.random.Generator,
                        dtype=ad.DEFAULT_DTYPE) -> ParamStore:
    """Glorot-uniform weights and zero biases for every stack, in a fixed order."""
    store = ParamStore(dtype)
    for prefix, mlp, _rows in _iter_mlps(spec):
        for i in range(mlp.n_layers):
            store.add_dense(f"{prefix}.{i}", mlp.widths[i], mlp.widths[i + 1], rng)
    return store


def count_params(spec: NetworkSpec) -> int:
    """Trainable scalar count: (I + 1) * O summed over every dense layer."""
    total = 0
    for _prefix, mlp, _rows in _iter_mlps(spec):
        for i in range(mlp.n_layers):
            total += (mlp.widths[i] + 1) * mlp.widths[i + 1]
    return total


def count_flops(spec: NetworkSpec, n_points: int) -> int:
    """FLOPs of one forward pass at cloud size ``n_points``.

    Convention: one multiply-add counts as 2 FLOPs; each dense layer costs
    2*I*O per processed row and each cluster transform product costs
    2*K^2*C_star.  Full-resolution stacks (pre-processing, head) run over
    ``n_points`` rows; interior multiplicities come from the layer specs.
    """
    total = 0
    for prefix, mlp, rows in _iter_mlps(spec):
        if prefix == "pp" or prefix == "head":
            rows = n_points
        for i in range(mlp.n_layers):
            total += 2 * mlp.widths[i] * mlp.widths[i + 1] * rows
    enc_in = _encoder_in_channels(spec)
    dec_in = _decoder_in_channels(spec)
    for layers, c_ins in ((spec.encoder, enc_in), (spec.decoder, dec_in)):
        for layer, c_in in zip(layers, c_ins):
            c_star = layer.c_delta + c_in
            total += layer.n_branches * 2 * layer.k * layer.k * c_star * layer.n_rep
    return total


# ---------------------------------------------------------------------------
# geometry plan: FPS and grouping decisions, computed once per cloud


@dataclass
class BranchPlan:
    members: np.ndarray  # (M, K) indices into the source level
    offsets: np.ndarray  # (M, K, D) member minus center, float64


@dataclass
class LayerPlan:
    rp: np.ndarray | None  # encoder only: RP indices into the source level
    branches: list[BranchPlan]


@dataclass
class ForwardPlan:
    level_coords: list[np.ndarray]
    enc: list[LayerPlan]
    dec: list[LayerPlan]


def _branch_plans(source: np.ndarray, centers: np.ndarray, layer: XConvLayerSpec,
                  rng: np.random.Generator | None) -> list[BranchPlan]:
    branches = []
    if layer.grouping == "ball":
        if rng is None:
            raise ValueError("ball grouping needs an RNG")
        for radius in layer.radii:
            members = ball_query(source, centers, layer.k, radius, rng)
            branches.append(BranchPlan(members, source[members] - centers[:, None, :]))
    else:
        members = knn_query(source, centers, layer.k)
        branches.append(BranchPlan(members, source[members] - centers[:, None, :]))
    return branches


def build_plan(coords: np.ndarray, spec: NetworkSpec,
               rng: np.random.Generator | None = None,
               fps_start: int = 0) -> ForwardPlan:
    """All sampling and grouping decisions for one forward pass.

    The plan is independent of trainable parameters, so it can be cached per
    cloud and reused across training epochs.
    """
    coords = np.asarray(coords, dtype=np.float64)
    if coords.shape[0] != spec.input_size:
        raise ValueError(
            f"cloud has {coords.shape[0]} points, network expects {spec.input_size}")
    levels = [coords]
    enc_plans = []
    cur = coords
    for layer in spec.encoder:
        rp = farthest_point_sampling(cur, layer.n_rep, start=fps_start)
        centers = cur[rp]
        enc_plans.append(LayerPlan(rp, _branch_plans(cur, centers, layer, rng)))
        cur = centers
        levels.append(cur)
    dec_plans = []
    depth = len(spec.encoder)
    for i, layer in enumerate(spec.decoder):
        target = levels[depth - 1 - i]
        source = levels[depth - i]
        dec_plans.append(LayerPlan(None, _branch_plans(source, target, layer, rng)))
    return ForwardPlan(level_coords=levels, enc=enc_plans, dec=dec_plans)


def shuffle_plan(plan: ForwardPlan, rng: np.random.Generator) -> ForwardPlan:
    """Randomly reorder each cluster's member rows, keeping membership fixed."""
    out = copy.deepcopy(plan)
    for lp in out.enc + out.dec:
        for bp in lp.branches:
            m, k = bp.members.shape
            for i in range(m):
                perm = rng.permutation(k)
                bp.members[i] = bp.members[i][perm]
                bp.offsets[i] = bp.offsets[i][perm]
    return out


# ---------------------------------------------------------------------------
# differentiable layer ops


def lift_coords(p_prime: Tensor, layers, mlp: MlpSpec) -> Tensor:
    """Lift (M, K, D) local coordinates into per-point features (M, K, C)."""
    return ad.shared_mlp(p_prime, layers, mlp)


def merge_features(f_lifted: Tensor, f_in: Tensor | None) -> Tensor:
    """Concatenate lifted-coordinate features with the cluster's input features."""
    if f_in is None or f_in.data.shape[-1] == 0:
        return f_lifted
    return ad.concat_last(f_lifted, f_in)


def x_transform(p_prime: Tensor, layers, mlp: MlpSpec, k: int) -> Tensor:
    """Learn one K x K matrix per cluster from the flattened local coordinates.

    The output is deliberately order-sensitive: reordering a cluster's rows
    changes the matrix, which is what lets it weight and permute features
    into a canonical arrangement.
    """
    m = p_prime.data.shape[0]
    flat = ad.reshape(p_prime, (m, -1))
    raw = ad.shared_mlp(flat, layers, mlp)
    return ad.reshape(raw, (m, k, k))


def apply_x_transform(x_mat: Tensor, f_star: Tensor) -> Tensor:
    """Weight and permute each cluster's feature rows with its learned matrix."""
    return ad.matmul(x_mat, f_star)


def aggregate_clusters(f_x: Tensor, layers, mlp: MlpSpec) -> Tensor:
    """Convolve the transformed (M, K, C) blocks down to one vector per RP."""
    m = f_x.data.shape[0]
    return ad.shared_mlp(ad.reshape(f_x, (m, -1)), layers, mlp)


def preprocess_features(pc: PointCloud, spec: NetworkSpec, store: ParamStore) -> Tensor:
    """Shared per-detection MLP over the raw input fields (x, y, v_r, sigma)."""
    if not spec.pp_widths:
        raise ValueError("pre-processing network is disabled in this spec")
    fields = spec.input_layout.preprocess_fields()
    raw = ad.constant(pc.raw_fields(fields), dtype=store.dtype)
    mlp = MlpSpec((len(fields),) + spec.pp_widths)
    return ad.shared_mlp(raw, store.mlp_layers("pp", mlp.n_layers), mlp)


def init_xconv_params(store: ParamStore, prefix: str, layer: XConvLayerSpec,
                      c_in: int, d: int, rng: np.random.Generator) -> None:
    """Allocate one layer's parameter stacks under ``prefix``."""
    lift, xmlp, agg = _layer_mlps(layer, d, c_in)
    for r in range(layer.n_branches):
        for name, mlp in ((f"{prefix}.b{r}.lift", lift), (f"{prefix}.b{r}.xmlp", xmlp),
                          (f"{prefix}.b{r}.agg", agg)):
            for i in range(mlp.n_layers):
                store.add_dense(f"{name}.{i}", mlp.widths[i], mlp.widths[i + 1], rng)


def _run_branches(features: Tensor | None, branches, layer: XConvLayerSpec,
                  d: int, store: ParamStore, prefix: str) -> Tensor:
    c_in = 0 if features is None else features.data.shape[-1]
    lift, xmlp, agg = _layer_mlps(layer, d, c_in)
    outs = []
    for r, bp in enumerate(branches):
        pre = f"{prefix}.b{r}"
        p_prime = ad.constant(bp.offsets, dtype=store.dtype)
        f_delta = lift_coords(p_prime, store.mlp_layers(f"{pre}.lift", lift.n_layers), lift)
        f_in = None if features is None else ad.take_rows(features, bp.members)
        f_star = merge_features(f_delta, f_in)
        x_mat = x_transform(p_prime, store.mlp_layers(f"{pre}.xmlp", xmlp.n_layers),
                            xmlp, layer.k)
        f_x = apply_x_transform(x_mat, f_star)
        outs.append(aggregate_clusters(f_x, store.mlp_layers(f"{pre}.agg", agg.n_layers), agg))
    out = outs[0]
    for extra in outs[1:]:
        out = ad.concat_last(out, extra)
    return out


def xconv_layer(coords: np.ndarray, features: Tensor | None, layer: XConvLayerSpec,
                store: ParamStore, rng: np.random.Generator | None = None,
                prefix: str = "enc0",
                fps_start: int = 0) -> tuple[np.ndarray, Tensor]:
    """One encoding step: FPS, group, localize, transform, convolve.

    Returns the downsampled cloud as (RP coordinates, RP feature tensor).
    """
    coords = np.asarray(coords, dtype=np.float64)
    if layer.n_rep > coords.shape[0]:
        raise ValueError(f"cannot sample {layer.n_rep} RPs from {coords.shape[0]} points")
    rp = farthest_point_sampling(coords, layer.n_rep, start=fps_start)
    centers = coords[rp]
    branches = _branch_plans(coords, centers, layer, rng)
    out = _run_branches(features, branches, layer, coords.shape[1], store, prefix)
    return centers, out


def decode_layer(source: tuple[np.ndarray, Tensor], target_coords: np.ndarray,
                 skip_features: Tensor | None, layer: XConvLayerSpec,
                 store: ParamStore, rng: np.random.Generator | None = None,
                 prefix: str = "dec0") -> Tensor:
    """Propagate features from a low-resolution cloud back onto ``target_coords``.

    The targets act as RPs, neighbours come from the lower-resolution cloud,
    and the X-Conv output is concatenated with the matching skip features.
    """
    source_coords, source_feats = source
    target_coords = np.asarray(target_coords, dtype=np.float64)
    if target_coords.shape[0] != layer.n_rep:
        raise ValueError(
            f"decoder expects {layer.n_rep} target points, got {target_coords.shape[0]}")
    branches = _branch_plans(np.asarray(source_coords, dtype=np.float64),
                             target_coords, layer, rng)
    out = _run_branches(source_feats, branches, layer, target_coords.shape[1],
                        store, prefix)
    if skip_features is not None and skip_features.data.shape[-1] > 0:
        out = ad.concat_last(out, skip_features)
    return out


def forward(pc: PointCloud, spec: NetworkSpec, store: ParamStore,
            rng: np.random.Generator | None = None,
            plan: ForwardPlan | None = None) -> Tensor:
    """Per-detection logits (N, 2) for the vehicle and pedestrian channels."""
    layout = spec.input_layout
    coords = pc.coord_view(layout)
    if plan is None:
        plan = build_plan(coords, spec, rng)
    depth = len(spec.encoder)
    if len(plan.enc) != depth or len(plan.dec) != depth:
        raise ValueError("plan depth does not match the network spec")

    if spec.pp_widths:
        feats = preprocess_features(pc, spec, store)
    elif layout.feature_dims > 0:
        feats = ad.constant(pc.feature_view(layout), dtype=store.dtype)
    else:
        feats = None

    enc_feats: list[Tensor | None] = [feats]
    f = feats
    for e, layer in enumerate(spec.encoder):
        if plan.level_coords[e + 1].shape[0] != layer.n_rep:
            raise ValueError(f"encoder level {e + 1} resolution mismatch")
        f = _run_branches(f, plan.enc[e].branches, layer, layout.coord_dims,
                          store, f"enc{e}")
        enc_feats.append(f)

    for i, layer in enumerate(spec.decoder):
        target_level = depth - 1 - i
        target = plan.level_coords[target_level]
        # decoder layers must consume exactly the coordinates their encoder
        # counterpart produced
        if target.shape[0] != layer.n_rep:
            raise ValueError(f"decoder layer {i} resolution mismatch")
        x = _run_branches(f, plan.dec[i].branches, layer, layout.coord_dims,
                          store, f"dec{i}")
        skip = enc_feats[target_level]
        f = ad.concat_last(x, skip) if skip is not None else x

    head = MlpSpec((f.data.shape[-1],) + spec.head_widths, final_activation=False)
    return ad.shared_mlp(f, store.mlp_layers("head", head.n_layers), head)


# ---------------------------------------------------------------------------
# decision rule and diagnostics


def sigmoid_scores(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    out = np.empty_like(logits)
    pos = logits >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-logits[pos]))
    e = np.exp(logits[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def classify_scores(scores: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Background unless a confidence exceeds the threshold, else the argmax class.

    Exact ties above the threshold resolve to the vehicle channel.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.full(scores.shape[0], int(Label.STATIC), dtype=np.int64)
    above = scores.max(axis=1) > threshold
    vehicle = scores[:, 0] >= scores[:, 1]
    labels[above & vehicle] = int(Label.VEHICLE)
    labels[above & ~vehicle] = int(Label.PEDESTRIAN)
    return labels


def decide(logits: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Map (N, 2) logits to per-detection labels via the sigmoid decision rule."""
    return classify_scores(sigmoid_scores(logits), threshold)


def permutation_sensitivity(pc: PointCloud, spec: NetworkSpec, store: ParamStore,
                            trials: int, rng: np.random.Generator) -> float:
    """Max per-point score spread when cluster member rows are reordered.

    Cluster membership and FPS picks stay fixed; only the within-cluster
    ordering varies, which isolates how order-sensitive the learned
    transforms actually are.  Purely a diagnostic.
    """
    if trials < 1:
        raise ValueError("need at least one trial")
    coords = pc.coord_view(spec.input_layout)
    plan = build_plan(coords, spec, rng)
    runs = []
    for t in range(trials):
        trial_plan = plan if t == 0 else shuffle_plan(plan, rng)
        logits = forward(pc, spec, store, plan=trial_plan)
        runs.append(sigmoid_scores(logits.data))
    stacked = np.stack(runs)
    return float((stacked.max(axis=0) - stacked.min(axis=0)).max())
