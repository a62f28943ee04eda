"""Run configuration: a small sectioned key/value text format.

Sections are ``[dotted.names]``, entries ``key = value``, comments start
with ``#``.  Unknown keys are rejected and parse errors always name the
file, line and key.  A fully resolved copy of the configuration is written
into every output directory for provenance.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .cloud import InputLayout
from .network import NetworkSpec, XConvLayerSpec
from .scenes import SceneTemplate
from .training import FocalLossParams, TrainConfig


class ConfigError(ValueError):
    """Config file problem; the message carries file, line and key."""


def parse_sections(text: str, source: str = "<config>") -> dict[str, dict[str, tuple[int, str]]]:
    """Raw sections mapping key -> (line number, value string)."""
    sections: dict[str, dict[str, tuple[int, str]]] = {}
    current = None
    for ln, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]") or len(line) < 3:
                raise ConfigError(f"{source}:{ln}: malformed section header {line!r}")
            current = line[1:-1].strip()
            sections.setdefault(current, {})
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{ln}: expected 'key = value', got {line!r}")
        if current is None:
            raise ConfigError(f"{source}:{ln}: key outside any section")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{ln}: empty key")
        if key in sections[current]:
            raise ConfigError(f"{source}:{ln}: duplicate key {current}.{key}")
        sections[current][key] = (ln, value)
    return sections


class _SectionReader:
    def __init__(self, source: str, name: str, entries: dict[str, tuple[int, str]]):
        self.source = source
        self.name = name
        self.entries = dict(entries)
        self.used: set[str] = set()

    def _raw(self, key: str):
        if key not in self.entries:
            return None
        self.used.add(key)
        return self.entries[key]

    def _convert(self, key: str, caster, default):
        raw = self._raw(key)
        if raw is None:
            return default
        ln, value = raw
        try:
            return caster(value)
        except (TypeError, ValueError):
            raise ConfigError(
                f"{self.source}:{ln}: bad value for {self.name}.{key}: {value!r}") from None

    def get_int(self, key, default=None):
        return self._convert(key, int, default)

    def get_float(self, key, default=None):
        return self._convert(key, float, default)

    def get_str(self, key, default=None):
        return self._convert(key, str, default)

    def get_bool(self, key, default=None):
        def cast(v):
            lowered = v.lower()
            if lowered in ("true", "1", "yes"):
                return True
            if lowered in ("false", "0", "no"):
                return False
            raise ValueError(v)

        return self._convert(key, cast, default)

    def get_floats(self, key, default=()):
        return self._convert(
            key, lambda v: tuple(float(p) for p in v.split(",") if p.strip()), tuple(default))

    def get_ints(self, key, default=()):
        return self._convert(
            key, lambda v: tuple(int(p) for p in v.split(",") if p.strip()), tuple(default))

    def get_strs(self, key, default=()):
        return self._convert(
            key, lambda v: tuple(p.strip() for p in v.split(",") if p.strip()), tuple(default))

    def get_optional_float(self, key, default=None):
        raw = self._raw(key)
        if raw is None:
            return default
        ln, value = raw
        if value.strip().lower() in ("", "none"):
            return None
        try:
            return float(value)
        except ValueError:
            raise ConfigError(
                f"{self.source}:{ln}: bad value for {self.name}.{key}: {value!r}") from None

    def reject_unknown(self):
        for key, (ln, _v) in self.entries.items():
            if key not in self.used:
                raise ConfigError(f"{self.source}:{ln}: unknown key {self.name}.{key}")


@dataclass(frozen=True)
class RunConfig:
    seed: int
    layout: InputLayout
    network: NetworkSpec
    train: TrainConfig
    template: SceneTemplate

    def with_layout(self, layout: InputLayout) -> "RunConfig":
        from dataclasses import replace

        return replace(self, layout=layout, network=self.network.with_layout(layout))


# default architecture: three encoder levels with multi-scale radius grouping,
# a mirrored decoder, and a per-detection pre-processing MLP
DEFAULT_ENCODER = (
    XConvLayerSpec(n_rep=384, k=8, grouping="ball", radii=(2.0, 4.0),
                   c_delta=16, delta_depth=2, x_mlp_widths=(48,), c_out=24),
    XConvLayerSpec(n_rep=96, k=12, grouping="ball", radii=(4.0, 8.0),
                   c_delta=16, delta_depth=2, x_mlp_widths=(64,), c_out=48),
    XConvLayerSpec(n_rep=24, k=16, grouping="ball", radii=(8.0, 16.0),
                   c_delta=16, delta_depth=2, x_mlp_widths=(96,), c_out=96),
)
DEFAULT_DECODER = (
    XConvLayerSpec(n_rep=96, k=12, grouping="ball", radii=(12.0,),
                   c_delta=16, delta_depth=2, x_mlp_widths=(64,), c_out=96),
    XConvLayerSpec(n_rep=384, k=8, grouping="ball", radii=(6.0,),
                   c_delta=16, delta_depth=2, x_mlp_widths=(48,), c_out=48),
    XConvLayerSpec(n_rep=1200, k=8, grouping="ball", radii=(3.0,),
                   c_delta=16, delta_depth=2, x_mlp_widths=(48,), c_out=48),
)

DEFAULT_LAYOUT = InputLayout(coords=("x", "y", "v_r"), features=("sigma",))
VANILLA_LAYOUT = InputLayout(coords=("x", "y"), features=("v_r", "sigma"))


def default_network_spec() -> NetworkSpec:
    """The pre-processing + multi-scale-grouping configuration."""
    return NetworkSpec(input_layout=DEFAULT_LAYOUT, pp_widths=(32, 16),
                       encoder=DEFAULT_ENCODER, decoder=DEFAULT_DECODER,
                       head_widths=(96, 2), threshold=0.5)


def vanilla_network_spec() -> NetworkSpec:
    """Baseline: k-NN grouping, no pre-processing, Doppler kept as a feature."""
    def knn(layer: XConvLayerSpec) -> XConvLayerSpec:
        from dataclasses import replace

        # keep the total output width when collapsing radius branches
        return replace(layer, grouping="knn", radii=(), c_out=layer.c_out_total)

    return NetworkSpec(input_layout=VANILLA_LAYOUT, pp_widths=(),
                       encoder=tuple(knn(l) for l in DEFAULT_ENCODER),
                       decoder=tuple(knn(l) for l in DEFAULT_DECODER),
                       head_widths=(96, 2), threshold=0.5)


def default_run_config() -> RunConfig:
    return RunConfig(seed=0, layout=DEFAULT_LAYOUT, network=default_network_spec(),
                     train=TrainConfig(), template=SceneTemplate())


def _layer_from_section(sec: _SectionReader, default: XConvLayerSpec | None) -> XConvLayerSpec:
    base = default or XConvLayerSpec(n_rep=1, k=1, grouping="knn")
    grouping = sec.get_str("grouping", base.grouping)
    radii = sec.get_floats("radii", base.radii if grouping == "ball" else ())
    if grouping == "knn":
        radii = ()
    layer = XConvLayerSpec(
        n_rep=sec.get_int("n_rep", base.n_rep),
        k=sec.get_int("k", base.k),
        grouping=grouping,
        radii=radii,
        c_delta=sec.get_int("c_delta", base.c_delta),
        delta_depth=sec.get_int("delta_depth", base.delta_depth),
        x_mlp_widths=sec.get_ints("x_mlp_widths", base.x_mlp_widths),
        c_out=sec.get_int("c_out", base.c_out),
    )
    sec.reject_unknown()
    return layer


def load_config_text(text: str, source: str = "<config>") -> RunConfig:
    sections = parse_sections(text, source)
    known = {"run", "layout", "network", "train", "loss", "scene"}
    defaults = default_run_config()

    def reader(name: str) -> _SectionReader:
        return _SectionReader(source, name, sections.get(name, {}))

    run = reader("run")
    seed = run.get_int("seed", defaults.seed)
    run.reject_unknown()

    lay = reader("layout")
    layout = InputLayout(
        coords=lay.get_strs("coords", defaults.layout.coords),
        features=lay.get_strs("features", defaults.layout.features),
        doppler_scale=lay.get_float("doppler_scale", defaults.layout.doppler_scale),
    )
    lay.reject_unknown()

    net = reader("network")
    pp_widths = net.get_ints("pp_widths", defaults.network.pp_widths)
    head_widths = net.get_ints("head_widths", defaults.network.head_widths)
    threshold = net.get_float("threshold", defaults.network.threshold)
    n_enc = net.get_int("depth", len(defaults.network.encoder))
    net.reject_unknown()

    encoder, decoder = [], []
    for side, count, base_layers in (("encoder", n_enc, defaults.network.encoder),
                                     ("decoder", n_enc, defaults.network.decoder)):
        for i in range(count):
            name = f"network.{side}.{i}"
            base = base_layers[i] if i < len(base_layers) else None
            sec = _SectionReader(source, name, sections.get(name, {}))
            try:
                layer = _layer_from_section(sec, base)
            except ValueError as exc:
                if isinstance(exc, ConfigError):
                    raise
                raise ConfigError(f"{source}: [{name}]: {exc}") from None
            (encoder if side == "encoder" else decoder).append(layer)
            known.add(name)

    trn = reader("train")
    loss_sec = reader("loss")
    loss = FocalLossParams(
        alpha_vehicle=loss_sec.get_float("alpha_vehicle", 0.8),
        alpha_pedestrian=loss_sec.get_float("alpha_pedestrian", 0.95),
        gamma=loss_sec.get_float("gamma", 2.0),
    )
    loss_sec.reject_unknown()
    train_cfg = TrainConfig(
        epochs=trn.get_int("epochs", defaults.train.epochs),
        lr=trn.get_float("lr", defaults.train.lr),
        batch_size=trn.get_int("batch_size", defaults.train.batch_size),
        seed=seed,
        normalize_target=trn.get_int("normalize_target", defaults.train.normalize_target),
        val_fraction=trn.get_float("val_fraction", defaults.train.val_fraction),
        stop_at_macro_f1=trn.get_optional_float("stop_at_macro_f1",
                                                defaults.train.stop_at_macro_f1),
        loss=loss,
    )
    trn.reject_unknown()

    scn = reader("scene")
    t = defaults.template
    template = SceneTemplate(
        n_vehicles=(scn.get_int("vehicles_min", t.n_vehicles[0]),
                    scn.get_int("vehicles_max", t.n_vehicles[1])),
        n_pedestrians=(scn.get_int("pedestrians_min", t.n_pedestrians[0]),
                       scn.get_int("pedestrians_max", t.n_pedestrians[1])),
        vehicle_speed=(scn.get_float("vehicle_speed_min", t.vehicle_speed[0]),
                       scn.get_float("vehicle_speed_max", t.vehicle_speed[1])),
        pedestrian_speed=(scn.get_float("pedestrian_speed_min", t.pedestrian_speed[0]),
                          scn.get_float("pedestrian_speed_max", t.pedestrian_speed[1])),
        vehicle_points=scn.get_int("vehicle_points", t.vehicle_points),
        pedestrian_points=scn.get_int("pedestrian_points", t.pedestrian_points),
        clutter_density=scn.get_float("clutter_density", t.clutter_density),
        n_walls=(scn.get_int("walls_min", t.n_walls[0]),
                 scn.get_int("walls_max", t.n_walls[1])),
        wall_points=scn.get_int("wall_points", t.wall_points),
        ego_speed=(scn.get_float("ego_speed_min", t.ego_speed[0]),
                   scn.get_float("ego_speed_max", t.ego_speed[1])),
        field=(scn.get_float("field_x_min", t.field[0]),
               scn.get_float("field_x_max", t.field[1]),
               scn.get_float("field_y_half", t.field[2])),
        pos_noise=scn.get_float("pos_noise", t.pos_noise),
        doppler_noise=scn.get_float("doppler_noise", t.doppler_noise),
        frames=scn.get_int("frames", t.frames),
    )
    scn.reject_unknown()

    for name, entries in sections.items():
        if name not in known:
            first_line = min(ln for ln, _v in entries.values()) if entries else 0
            raise ConfigError(f"{source}:{first_line}: unknown section [{name}]")

    try:
        network = NetworkSpec(input_layout=layout, pp_widths=pp_widths,
                              encoder=tuple(encoder), decoder=tuple(decoder),
                              head_widths=head_widths, threshold=threshold)
    except ValueError as exc:
        raise ConfigError(f"{source}: invalid network: {exc}") from None
    return RunConfig(seed=seed, layout=layout, network=network, train=train_cfg,
                     template=template)


def load_config_file(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return load_config_text(text, str(path))


def _fmt_tuple(values) -> str:
    return ",".join(str(v) for v in values)


def config_to_text(cfg: RunConfig) -> str:
    """Fully resolved configuration, parseable by :func:`load_config_text`."""
    lines = ["[run]", f"seed = {cfg.seed}", ""]
    lines += [
        "[layout]",
        f"coords = {_fmt_tuple(cfg.layout.coords)}",
        f"features = {_fmt_tuple(cfg.layout.features)}",
        f"doppler_scale = {cfg.layout.doppler_scale!r}",
        "",
        "[network]",
        f"pp_widths = {_fmt_tuple(cfg.network.pp_widths)}",
        f"head_widths = {_fmt_tuple(cfg.network.head_widths)}",
        f"threshold = {cfg.network.threshold!r}",
        f"depth = {len(cfg.network.encoder)}",
        "",
    ]
    for side, layers in (("encoder", cfg.network.encoder), ("decoder", cfg.network.decoder)):
        for i, layer in enumerate(layers):
            lines += [
                f"[network.{side}.{i}]",
                f"n_rep = {layer.n_rep}",
                f"k = {layer.k}",
                f"grouping = {layer.grouping}",
            ]
            if layer.grouping == "ball":
                lines.append(f"radii = {_fmt_tuple(repr(r) for r in layer.radii)}")
            lines += [
                f"c_delta = {layer.c_delta}",
                f"delta_depth = {layer.delta_depth}",
                f"x_mlp_widths = {_fmt_tuple(layer.x_mlp_widths)}",
                f"c_out = {layer.c_out}",
                "",
            ]
    t = cfg.train
    lines += [
        "[train]",
        f"epochs = {t.epochs}",
        f"lr = {t.lr!r}",
        f"batch_size = {t.batch_size}",
        f"normalize_target = {t.normalize_target}",
        f"val_fraction = {t.val_fraction!r}",
        f"stop_at_macro_f1 = {'none' if t.stop_at_macro_f1 is None else repr(t.stop_at_macro_f1)}",
        "",
        "[loss]",
        f"alpha_vehicle = {t.loss.alpha_vehicle!r}",
        f"alpha_pedestrian = {t.loss.alpha_pedestrian!r}",
        f"gamma = {t.loss.gamma!r}",
        "",
    ]
    tm = cfg.template
    lines += [
        "[scene]",
        f"vehicles_min = {tm.n_vehicles[0]}",
        f"vehicles_max = {tm.n_vehicles[1]}",
        f"pedestrians_min = {tm.n_pedestrians[0]}",
        f"pedestrians_max = {tm.n_pedestrians[1]}",
        f"vehicle_speed_min = {tm.vehicle_speed[0]!r}",
        f"vehicle_speed_max = {tm.vehicle_speed[1]!r}",
        f"pedestrian_speed_min = {tm.pedestrian_speed[0]!r}",
        f"pedestrian_speed_max = {tm.pedestrian_speed[1]!r}",
        f"vehicle_points = {tm.vehicle_points}",
        f"pedestrian_points = {tm.pedestrian_points}",
        f"clutter_density = {tm.clutter_density!r}",
        f"walls_min = {tm.n_walls[0]}",
        f"walls_max = {tm.n_walls[1]}",
        f"wall_points = {tm.wall_points}",
        f"ego_speed_min = {tm.ego_speed[0]!r}",
        f"ego_speed_max = {tm.ego_speed[1]!r}",
        f"field_x_min = {tm.field[0]!r}",
        f"field_x_max = {tm.field[1]!r}",
        f"field_y_half = {tm.field[2]!r}",
        f"pos_noise = {tm.pos_noise!r}",
        f"doppler_noise = {tm.doppler_noise!r}",
        f"frames = {tm.frames}",
        "",
    ]
    return "\n".join(lines)
