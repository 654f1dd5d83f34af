"""Experiment harnesses at desk scale: the toy 2-D sweep over depth,
width, activation, batch norm and dropout; the learning-rate
ill-conditioning sweep; the four-variant ablation; and a reduced
three-block convolutional run on an MNIST subset. Also owns toy data
generation, IDX ingestion, and the experiment config-file format.
"""

from __future__ import annotations

import hashlib
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, GenerationError
from .layers import ActivationSpec
from .network import (
    NetworkSpec,
    build_mim,
    build_mlp,
    init_params,
    mim_init_scheme,
    mlp_init_scheme,
    save_snapshot,
)
from .numerics import SeededRng
from .regions import census
from .training import MultiRunReport, RunReport, TrainConfig, multi_run, train

__all__ = [
    "ToyPartitionSpec",
    "ToyDataset",
    "LabeledDataset",
    "gen_toy_dataset",
    "SweepConfig",
    "CellResult",
    "SweepReport",
    "toy_sweep",
    "IllCondConfig",
    "RateSetting",
    "IllCondReport",
    "illcond_sweep",
    "AblationReport",
    "ablation",
    "load_mnist_idx",
    "MimConfig",
    "mnist_mini",
    "parse_config_text",
    "load_config",
    "worker_count",
]

BOX_LOW, BOX_HIGH = -10.0, 10.0
TRAIN_POINTS, TEST_POINTS = 12000, 2000
BALANCE_LOW, BALANCE_HIGH = 0.3, 0.7
# The generator accepts a candidate partition only if a large fixed
# probe sample lands inside this much tighter window. Keeping the
# underlying partition essentially balanced does two things: sampled
# datasets stay far inside [BALANCE_LOW, BALANCE_HIGH], and the
# divergence flag stays reliable: even a run that starts out predicting
# the minority class everywhere and collapses to the majority class
# moves by only |1 - 2 * majority|, well under the 0.02 margin, so a
# collapsed run cannot masquerade as an improving one.
_PROBE_LOW, _PROBE_HIGH = 0.495, 0.505
_PROBE_POINTS = 65536
_MAX_ATTEMPTS = 100

CONVERGENCE_DROP = 0.1  # train-error drop that counts as converged


# ---------------------------------------------------------------------------
# toy ground truth: a labelled partition of the box


@dataclass(frozen=True)
class ToyPartitionSpec:
    """Deterministic labelled partition of the square: n_chords random
    lines and n_arcs random circles slice the box into cells, and each
    cell gets a 0/1 label from a keyed hash of its cell signature.

    The partition depends only on these fields, never on the seed used
    to sample points from it, so repeated samplings share one ground
    truth.
    """

    seed: int = 1
    n_chords: int = 6
    n_arcs: int = 5

    def __post_init__(self):
        if self.n_chords < 0 or self.n_arcs < 0:
            raise ConfigError("chord and arc counts must be >= 0")
        if self.n_chords + self.n_arcs > 16:
            raise ConfigError("at most 16 boundary elements are supported")


@dataclass(frozen=True)
class _Partition:
    normals: tuple
    offsets: tuple
    centers: tuple
    radii: tuple
    label_key: bytes

    def cell_ids(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        bits = []
        if self.normals:
            normals = np.asarray(self.normals)
            offsets = np.asarray(self.offsets)
            bits.append(pts @ normals.T > offsets)
        if self.centers:
            centers = np.asarray(self.centers)
            radii = np.asarray(self.radii)
            d2 = ((pts[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
            bits.append(d2 < radii**2)
        if not bits:
            return np.zeros(len(pts), dtype=np.int64)
        stacked = np.concatenate(bits, axis=1)
        weights = 1 << np.arange(stacked.shape[1], dtype=np.int64)
        return stacked @ weights

    def label(self, pts: np.ndarray) -> np.ndarray:
        ids = self.cell_ids(pts)
        n_bits = len(self.normals) + len(self.radii)
        table = np.array(
            [self._cell_label(c) for c in range(1 << n_bits)], dtype=np.int64
        )
        return table[ids]

    def _cell_label(self, cell_id: int) -> int:
        digest = hashlib.blake2b(
            cell_id.to_bytes(8, "little"), digest_size=1, key=self.label_key
        ).digest()
        return digest[0] & 1


@lru_cache(maxsize=64)
def _build_partition(spec: ToyPartitionSpec) -> _Partition:
    """Draw candidate partitions from streams derived from the spec seed
    until the probe sample's class balance is acceptable."""
    base = SeededRng(spec.seed)
    for attempt in range(_MAX_ATTEMPTS):
        stream = base.spawn(attempt)
        angles = stream.uniform(0.0, np.pi, spec.n_chords)
        normals = np.stack([np.cos(angles), np.sin(angles)], axis=1) if spec.n_chords else np.zeros((0, 2))
        offsets = stream.uniform(-8.0, 8.0, spec.n_chords)
        centers = stream.uniform(-7.0, 7.0, (spec.n_arcs, 2))
        radii = stream.uniform(2.5, 7.0, spec.n_arcs)
        part = _Partition(
            normals=tuple(map(tuple, normals)),
            offsets=tuple(offsets),
            centers=tuple(map(tuple, centers)),
            radii=tuple(radii),
            label_key=hashlib.blake2b(
                f"{spec.seed}:{attempt}".encode(), digest_size=16
            ).digest(),
        )
        probe = stream.uniform(BOX_LOW, BOX_HIGH, (_PROBE_POINTS, 2))
        balance = float(part.label(probe).mean())
        if _PROBE_LOW <= balance <= _PROBE_HIGH:
            return part
    raise GenerationError(
        f"no balanced partition for {spec} within {_MAX_ATTEMPTS} attempts"
    )


@dataclass
class LabeledDataset:
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray

    @property
    def train(self):
        return self.train_x, self.train_y

    @property
    def test(self):
        return self.test_x, self.test_y


@dataclass
class ToyDataset(LabeledDataset):
    """12000 train and 2000 test points uniform on the box, labelled by
    the partition function."""


def gen_toy_dataset(spec: ToyPartitionSpec, seed: int) -> ToyDataset:
    """Deterministic per (spec, seed). The partition is fixed by spec
    alone; seed only moves the sampled points."""
    part = _build_partition(spec)
    rng = SeededRng(seed)
    train_x = rng.uniform(BOX_LOW, BOX_HIGH, (TRAIN_POINTS, 2))
    train_y = part.label(train_x)
    test_x = rng.uniform(BOX_LOW, BOX_HIGH, (TEST_POINTS, 2))
    test_y = part.label(test_x)
    balance = float(train_y.mean())
    if not (BALANCE_LOW <= balance <= BALANCE_HIGH):
        raise GenerationError(
            f"sampled class balance {balance:.3f} outside "
            f"[{BALANCE_LOW}, {BALANCE_HIGH}] for seed {seed}"
        )
    return ToyDataset(train_x, train_y, test_x, test_y)


def partition_for(spec: ToyPartitionSpec) -> _Partition:
    """The accepted partition itself, for label re-evaluation."""
    return _build_partition(spec)


# ---------------------------------------------------------------------------
# worker pool sizing


def worker_count() -> int:
    """Workers for sweep cells: PLRLAB_THREADS caps the count, 0 means
    one per CPU, unset means sequential."""
    raw = os.environ.get("PLRLAB_THREADS", "").strip()
    if not raw:
        return 1
    try:
        v = int(raw)
    except ValueError as exc:
        raise ConfigError(f"PLRLAB_THREADS must be an integer, got {raw!r}") from exc
    if v < 0:
        raise ConfigError(f"PLRLAB_THREADS must be >= 0, got {v}")
    if v == 0:
        return os.cpu_count() or 1
    return v


# ---------------------------------------------------------------------------
# toy sweep


def _act_label(kind: str, k: int) -> str:
    return kind if kind != "maxout" else f"maxout{k}"


@dataclass
class SweepConfig:
    partition: ToyPartitionSpec = field(default_factory=ToyPartitionSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    widths: tuple[int, ...] = (2, 4)
    layers: tuple[int, ...] = (2, 3, 4, 5, 6)
    activations: tuple[tuple[str, int], ...] = (
        ("relu", 1),
        ("maxout", 2),
        ("maxout", 4),
    )
    bn: tuple[bool, ...] = (True, False)
    dropout: tuple[float | None, ...] = (None, 0.2)
    runs: int = 5

    def __post_init__(self):
        if not (self.widths and self.layers and self.activations and self.bn and self.dropout):
            raise ConfigError("sweep grid must be nonempty on every axis")
        if self.runs < 1:
            raise ConfigError(f"runs must be >= 1, got {self.runs}")

    def cells(self):
        for kind, k in self.activations:
            for width in self.widths:
                for L in self.layers:
                    for bn in self.bn:
                        for dropout in self.dropout:
                            yield kind, k, L, width, bn, dropout


@dataclass
class CellResult:
    kind: str
    k: int
    layers: int
    width: int
    bn: bool
    dropout: float | None
    report: MultiRunReport
    region_counts: list[int]
    best_run: int
    best_spec: NetworkSpec

    @property
    def label(self) -> str:
        return _act_label(self.kind, self.k)


@dataclass
class SweepReport:
    config: SweepConfig
    cells: list[CellResult]

    def find(self, **match) -> list[CellResult]:
        out = []
        for cell in self.cells:
            if all(getattr(cell, key) == val for key, val in match.items()):
                out.append(cell)
        return out

    def best(self, **match) -> CellResult:
        candidates = self.find(**match)
        if not candidates:
            raise ConfigError(f"no sweep cell matches {match}")
        return min(candidates, key=lambda c: c.report.mean_test)

    def csv_text(self) -> str:
        lines = ["activation,k,layers,width,bn,dropout,run,train_err,test_err,regions,diverged"]
        for c in self.cells:
            bn = "on" if c.bn else "off"
            dropout = "off" if c.dropout is None else f"{c.dropout:g}"
            stem = f"{c.kind},{c.k},{c.layers},{c.width},{bn},{dropout}"
            for i, run in enumerate(c.report.runs):
                lines.append(
                    f"{stem},{i},{run.final_train_error:.6f},"
                    f"{run.final_test_error:.6f},{c.region_counts[i]},{int(run.diverged)}"
                )
            lines.append(
                f"{stem},mean,{c.report.mean_train:.6f},{c.report.mean_test:.6f},,"
            )
        return "\n".join(lines) + "\n"


def _sweep_cell(cfg: SweepConfig, datasets: dict, cell) -> CellResult:
    kind, k, L, width, bn, dropout = cell

    def spec_builder(seed: int) -> NetworkSpec:
        act = ActivationSpec(kind, k=k)
        spec = build_mlp(2, L, width, act, with_bn=bn, dropout_p=dropout)
        return init_params(spec, SeededRng(seed), mlp_init_scheme(spec))

    def post_run(spec, dataset, report):
        counted = census(spec, dataset.train_x)
        return counted.region_count, spec

    report = multi_run(
        spec_builder, datasets.__getitem__, cfg.train, cfg.runs, post_run=post_run
    )
    region_counts = [extra[0] for extra in report.extras]
    finals = [r.final_test_error for r in report.runs]
    best_run = int(np.argmin(finals))
    best_spec = report.extras[best_run][1]
    report.extras = []  # the specs served their purpose; keep the report light
    return CellResult(kind, k, L, width, bn, dropout, report, region_counts, best_run, best_spec)


def toy_sweep(cfg: SweepConfig, out=None) -> SweepReport:
    """Train every grid cell with the repeated-run protocol, recording
    mean/std errors and a trained-network region census per run. Writes
    toy_sweep.csv under `out` when given. Cells may run on a worker pool
    (PLRLAB_THREADS); results are assembled in grid order either way."""
    run_seeds = [cfg.train.seed + i for i in range(cfg.runs)]
    datasets = {s: gen_toy_dataset(cfg.partition, s) for s in run_seeds}
    cells = list(cfg.cells())
    workers = worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda c: _sweep_cell(cfg, datasets, c), cells))
    else:
        results = [_sweep_cell(cfg, datasets, c) for c in cells]
    report = SweepReport(cfg, results)
    if out is not None:
        out_dir = Path(out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "toy_sweep.csv").write_text(report.csv_text())
    return report


# ---------------------------------------------------------------------------
# ill-conditioning sweep


@dataclass
class IllCondConfig:
    """Learning-rate sweep on a fixed toy network; the rate is the only
    thing that varies between settings."""

    partition: ToyPartitionSpec = field(default_factory=ToyPartitionSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    rates: tuple[float, ...] = (0.0001, 0.0005, 0.002, 0.01, 0.05)
    epochs: int = 15
    runs: int = 5
    layers: int = 5
    width: int = 4
    activation: tuple[str, int] = ("maxout", 2)

    def __post_init__(self):
        if not self.rates:
            raise ConfigError("rate list must be nonempty")
        if any(r <= 0 for r in self.rates):
            raise ConfigError("rates must be > 0")
        if list(self.rates) != sorted(self.rates):
            raise ConfigError("rates must be sorted ascending")
        if self.epochs < 1 or self.runs < 1:
            raise ConfigError("epochs and runs must be >= 1")


@dataclass
class RateSetting:
    lr: float
    bn: bool
    report: MultiRunReport
    converged: list[bool]  # per run: train error dropped more than CONVERGENCE_DROP


@dataclass
class IllCondReport:
    config: IllCondConfig
    settings: list[RateSetting]

    def setting(self, lr: float, bn: bool) -> RateSetting:
        for s in self.settings:
            if s.lr == lr and s.bn == bn:
                return s
        raise ConfigError(f"no setting lr={lr}, bn={bn}")

    def csv_text(self) -> str:
        lines = ["lr,bn,run,train_err,test_err,diverged"]
        for s in self.settings:
            bn = "on" if s.bn else "off"
            for i, run in enumerate(s.report.runs):
                lines.append(
                    f"{s.lr:g},{bn},{i},{run.final_train_error:.6f},"
                    f"{run.final_test_error:.6f},{int(run.diverged)}"
                )
        return "\n".join(lines) + "\n"


def illcond_sweep(cfg: IllCondConfig) -> IllCondReport:
    run_seeds = [cfg.train.seed + i for i in range(cfg.runs)]
    datasets = {s: gen_toy_dataset(cfg.partition, s) for s in run_seeds}
    kind, k = cfg.activation
    settings = []
    for lr in cfg.rates:
        for bn in (True, False):
            def spec_builder(seed: int, _bn=bn) -> NetworkSpec:
                act = ActivationSpec(kind, k=k)
                spec = build_mlp(2, cfg.layers, cfg.width, act, with_bn=_bn)
                return init_params(spec, SeededRng(seed), mlp_init_scheme(spec))

            train_cfg = replace(cfg.train, schedule=((lr, cfg.epochs),))
            report = multi_run(spec_builder, datasets.__getitem__, train_cfg, cfg.runs)
            converged = [
                (r.train_errors[0] - r.final_train_error) > CONVERGENCE_DROP
                for r in report.runs
            ]
            settings.append(RateSetting(lr, bn, report, converged))
    return IllCondReport(cfg, settings)


# ---------------------------------------------------------------------------
# ablation


_ABLATION_VARIANTS = (
    ("relu-no-bn", "relu", 1, False),
    ("maxout-no-bn", "maxout", None, False),
    ("relu-bn", "relu", 1, True),
    ("maxout-bn", "maxout", None, True),
)


@dataclass
class AblationReport:
    rows: list[tuple[str, MultiRunReport]]

    def row(self, name: str) -> MultiRunReport:
        for row_name, report in self.rows:
            if row_name == name:
                return report
        raise ConfigError(f"no ablation row named {name!r}")

    def csv_text(self) -> str:
        lines = ["variant,run,train_err,test_err,diverged"]
        for name, report in self.rows:
            for i, run in enumerate(report.runs):
                lines.append(
                    f"{name},{i},{run.final_train_error:.6f},"
                    f"{run.final_test_error:.6f},{int(run.diverged)}"
                )
            lines.append(f"{name},mean,{report.mean_train:.6f},{report.mean_test:.6f},")
        return "\n".join(lines) + "\n"


def ablation(
    dataset: LabeledDataset,
    runs: int = 5,
    train_cfg: TrainConfig | None = None,
    layers: int = 5,
    width: int = 4,
    maxout_k: int = 4,
) -> AblationReport:
    """Train the four activation/normalisation variants on one dataset
    with identical budgets: plain rectifier baseline, maxout without
    batch norm, rectifier with batch norm, and maxout with batch norm."""
    cfg = train_cfg if train_cfg is not None else TrainConfig()
    rows = []
    for name, kind, k, bn in _ABLATION_VARIANTS:
        k = maxout_k if k is None else k

        def spec_builder(seed: int, _kind=kind, _k=k, _bn=bn) -> NetworkSpec:
            act = ActivationSpec(_kind, k=_k)
            spec = build_mlp(2, layers, width, act, with_bn=_bn)
            return init_params(spec, SeededRng(seed), mlp_init_scheme(spec))

        report = multi_run(spec_builder, lambda s: dataset, cfg, runs)
        rows.append((name, report))
    return AblationReport(rows)


# ---------------------------------------------------------------------------
# MNIST ingestion and the reduced convolutional run


_IDX_IMAGES_MAGIC = 2051
_IDX_LABELS_MAGIC = 2049


def _read_idx(path, magic_want: int, n_dims: int) -> np.ndarray:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    if len(blob) < 4:
        raise FormatError(f"{path}: truncated magic at byte 0 (file has {len(blob)} bytes)")
    magic = int.from_bytes(blob[0:4], "big")
    if magic != magic_want:
        raise FormatError(
            f"{path}: bad magic {magic:#010x} at byte 0, expected {magic_want:#010x}"
        )
    header_end = 4 + 4 * n_dims
    if len(blob) < header_end:
        raise FormatError(
            f"{path}: truncated dimension header at byte {len(blob)} "
            f"(need {header_end} bytes)"
        )
    dims = [
        int.from_bytes(blob[4 + 4 * i : 8 + 4 * i], "big") for i in range(n_dims)
    ]
    expected = int(np.prod(dims))
    if len(blob) - header_end < expected:
        raise FormatError(
            f"{path}: truncated data at byte {len(blob)}: need {expected} bytes "
            f"from byte {header_end}"
        )
    data = np.frombuffer(blob, dtype=np.uint8, count=expected, offset=header_end)
    return data.reshape(dims)


def load_mnist_idx(images_path, labels_path, limit: int | None = None):
    """Parse big-endian IDX image/label files into (x, y): pixels scaled
    to [0, 1] then per-channel mean-subtracted over the loaded examples;
    labels as integers. limit keeps only the first examples."""
    images = _read_idx(images_path, _IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, _IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(
            f"{images_path} holds {images.shape[0]} images but "
            f"{labels_path} holds {labels.shape[0]} labels"
        )
    if limit is not None:
        images = images[:limit]
        labels = labels[:limit]
    x = images.astype(np.float64)[:, None, :, :] / 255.0
    x -= x.mean(axis=(0, 2, 3), keepdims=True)
    y = labels.astype(np.int64)
    return x, y


@dataclass
class MimConfig:
    """Reduced-scale convolutional run: quarter-width three-block
    classifier on an MNIST-format subset. The training defaults here are
    desk-scale choices, not a published recipe."""

    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    variant: str = "mnist"
    width_scale: float = 0.25
    train_limit: int | None = 10000
    classes: int = 10
    dropout_p: float = 0.5
    train: TrainConfig = field(
        default_factory=lambda: TrainConfig(schedule=((0.1, 6), (0.01, 4)))
    )


def mnist_mini(cfg: MimConfig, snapshot_path=None) -> RunReport:
    """Train the reduced classifier on the subset and evaluate on the
    full test set; deterministic per seed. Writes a weight snapshot when
    a path is given."""
    for field_name in ("train_images", "train_labels", "test_images", "test_labels"):
        if not getattr(cfg, field_name):
            raise ConfigError(f"mim config is missing {field_name}")
    train_x, train_y = load_mnist_idx(cfg.train_images, cfg.train_labels, cfg.train_limit)
    test_x, test_y = load_mnist_idx(cfg.test_images, cfg.test_labels)
    dataset = LabeledDataset(train_x, train_y, test_x, test_y)
    spec = build_mim(
        cfg.variant,
        width_scale=cfg.width_scale,
        classes=cfg.classes,
        dropout_p=cfg.dropout_p,
    )
    init_params(spec, SeededRng(cfg.train.seed), mim_init_scheme(spec))
    report = train(spec, dataset, cfg.train)
    if snapshot_path is not None:
        save_snapshot(spec, snapshot_path)
    return report


# ---------------------------------------------------------------------------
# config files: line-based `key = value` with [section] headers


def parse_config_text(text: str, origin: str = "<config>") -> dict[str, dict[str, str]]:
    """Strict sectioned key=value parser. Blank lines and # comments are
    skipped; duplicate sections, duplicate keys, and keys outside a
    section are errors."""
    sections: dict[str, dict[str, str]] = {}
    current: dict[str, str] | None = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip()
            if not name:
                raise ConfigError(f"{origin}:{lineno}: empty section name")
            if name in sections:
                raise ConfigError(f"{origin}:{lineno}: duplicate section [{name}]")
            current = {}
            sections[name] = current
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {line!r}")
        if current is None:
            raise ConfigError(f"{origin}:{lineno}: key outside any [section]")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not key:
            raise ConfigError(f"{origin}:{lineno}: empty key")
        if key in current:
            raise ConfigError(f"{origin}:{lineno}: duplicate key {key!r}")
        current[key] = value
    return sections


def load_config(path) -> dict[str, dict[str, str]]:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    return parse_config_text(text, origin=str(p))


def _parse_bool(value: str) -> bool:
    low = value.lower()
    if low in ("on", "true", "yes", "1"):
        return True
    if low in ("off", "false", "no", "0"):
        return False
    raise ConfigError(f"expected on/off, got {value!r}")


def _parse_int(value: str) -> int:
    try:
        return int(value)
    except ValueError as exc:
        raise ConfigError(f"expected an integer, got {value!r}") from exc


def _parse_float(value: str) -> float:
    try:
        return float(value)
    except ValueError as exc:
        raise ConfigError(f"expected a number, got {value!r}") from exc


def _parse_int_list(value: str) -> tuple[int, ...]:
    return tuple(_parse_int(v) for v in value.split(","))


def _parse_float_list(value: str) -> tuple[float, ...]:
    return tuple(_parse_float(v) for v in value.split(","))


def _parse_schedule(value: str) -> tuple[tuple[float, int], ...]:
    out = []
    for item in value.split(","):
        rate, sep, epochs = item.partition(":")
        if not sep:
            raise ConfigError(f"schedule items are rate:epochs, got {item!r}")
        out.append((_parse_float(rate.strip()), _parse_int(epochs.strip())))
    return tuple(out)


def _parse_activation(value: str) -> tuple[str, int]:
    kind, sep, k = value.partition(":")
    kind = kind.strip()
    if kind == "maxout":
        if not sep:
            raise ConfigError("maxout needs a rank, like maxout:2")
        return kind, _parse_int(k.strip())
    if sep:
        raise ConfigError(f"{kind} takes no rank, got {value!r}")
    return kind, 1


def _parse_activations(value: str) -> tuple[tuple[str, int], ...]:
    return tuple(_parse_activation(v.strip()) for v in value.split(","))


def _parse_bool_list(value: str) -> tuple[bool, ...]:
    return tuple(_parse_bool(v.strip()) for v in value.split(","))


def _parse_dropout_list(value: str) -> tuple[float | None, ...]:
    out: list[float | None] = []
    for item in value.split(","):
        item = item.strip()
        out.append(None if item.lower() == "off" else _parse_float(item))
    return tuple(out)


def _apply_schema(doc, section: str, schema: dict, origin: str) -> dict:
    raw = doc.get(section, {})
    unknown = set(raw) - set(schema)
    if unknown:
        raise ConfigError(
            f"{origin}: unknown key(s) in [{section}]: {', '.join(sorted(unknown))}"
        )
    out = {}
    for key, (parser, default) in schema.items():
        if key in raw:
            try:
                out[key] = parser(raw[key])
            except ConfigError as exc:
                raise ConfigError(f"{origin}: [{section}] {key}: {exc}") from exc
        else:
            out[key] = default
    return out


_PARTITION_SCHEMA = {
    "seed": (_parse_int, 1),
    "chords": (_parse_int, 6),
    "arcs": (_parse_int, 5),
}

_TRAIN_SCHEMA = {
    "seed": (_parse_int, 0),
    "batch_size": (_parse_int, 100),
    "schedule": (_parse_schedule, ((0.0005, 20), (0.0001, 20))),
    "momentum": (_parse_float, 0.9),
    "weight_decay": (_parse_float, 0.0001),
}


def _check_sections(doc, allowed, origin):
    unknown = set(doc) - set(allowed)
    if unknown:
        raise ConfigError(
            f"{origin}: unknown section(s): {', '.join(sorted(unknown))}"
        )


def _partition_from(doc, origin) -> ToyPartitionSpec:
    vals = _apply_schema(doc, "partition", _PARTITION_SCHEMA, origin)
    return ToyPartitionSpec(seed=vals["seed"], n_chords=vals["chords"], n_arcs=vals["arcs"])


def _train_from(doc, origin, seed_override=None) -> TrainConfig:
    vals = _apply_schema(doc, "train", _TRAIN_SCHEMA, origin)
    if seed_override is not None:
        vals["seed"] = seed_override
    return TrainConfig(
        batch_size=vals["batch_size"],
        schedule=vals["schedule"],
        momentum=vals["momentum"],
        weight_decay=vals["weight_decay"],
        seed=vals["seed"],
    )


def sweep_config_from(doc, origin="<config>", seed_override=None) -> SweepConfig:
    _check_sections(doc, ("partition", "train", "sweep"), origin)
    schema = {
        "widths": (_parse_int_list, (2, 4)),
        "layers": (_parse_int_list, (2, 3, 4, 5, 6)),
        "activations": (_parse_activations, (("relu", 1), ("maxout", 2), ("maxout", 4))),
        "bn": (_parse_bool_list, (True, False)),
        "dropout": (_parse_dropout_list, (None, 0.2)),
        "runs": (_parse_int, 5),
    }
    vals = _apply_schema(doc, "sweep", schema, origin)
    return SweepConfig(
        partition=_partition_from(doc, origin),
        train=_train_from(doc, origin, seed_override),
        widths=vals["widths"],
        layers=vals["layers"],
        activations=vals["activations"],
        bn=vals["bn"],
        dropout=vals["dropout"],
        runs=vals["runs"],
    )


def illcond_config_from(doc, origin="<config>", seed_override=None) -> IllCondConfig:
    _check_sections(doc, ("partition", "train", "illcond"), origin)
    schema = {
        "rates": (_parse_float_list, (0.0001, 0.0005, 0.002, 0.01, 0.05)),
        "epochs": (_parse_int, 15),
        "runs": (_parse_int, 5),
        "layers": (_parse_int, 5),
        "width": (_parse_int, 4),
        "activation": (_parse_activation, ("maxout", 2)),
    }
    vals = _apply_schema(doc, "illcond", schema, origin)
    return IllCondConfig(
        partition=_partition_from(doc, origin),
        train=_train_from(doc, origin, seed_override),
        rates=vals["rates"],
        epochs=vals["epochs"],
        runs=vals["runs"],
        layers=vals["layers"],
        width=vals["width"],
        activation=vals["activation"],
    )


def ablation_config_from(doc, origin="<config>", seed_override=None):
    """Returns (partition, train config, runs, layers, width, maxout_k)."""
    _check_sections(doc, ("partition", "train", "ablation"), origin)
    schema = {
        "runs": (_parse_int, 5),
        "layers": (_parse_int, 5),
        "width": (_parse_int, 4),
        "maxout_k": (_parse_int, 4),
    }
    vals = _apply_schema(doc, "ablation", schema, origin)
    return (
        _partition_from(doc, origin),
        _train_from(doc, origin, seed_override),
        vals["runs"],
        vals["layers"],
        vals["width"],
        vals["maxout_k"],
    )


def mim_config_from(doc, origin="<config>", seed_override=None) -> MimConfig:
    _check_sections(doc, ("data", "train", "mim"), origin)
    data_schema = {
        "train_images": (str, ""),
        "train_labels": (str, ""),
        "test_images": (str, ""),
        "test_labels": (str, ""),
    }
    data = _apply_schema(doc, "data", data_schema, origin)
    mim_schema = {
        "variant": (str, "mnist"),
        "width_scale": (_parse_float, 0.25),
        "train_limit": (_parse_int, 10000),
        "classes": (_parse_int, 10),
        "dropout": (_parse_float, 0.5),
    }
    vals = _apply_schema(doc, "mim", mim_schema, origin)
    train_schema = dict(_TRAIN_SCHEMA)
    train_schema["schedule"] = (_parse_schedule, ((0.1, 6), (0.01, 4)))
    tvals = _apply_schema(doc, "train", train_schema, origin)
    if seed_override is not None:
        tvals["seed"] = seed_override
    train_cfg = TrainConfig(
        batch_size=tvals["batch_size"],
        schedule=tvals["schedule"],
        momentum=tvals["momentum"],
        weight_decay=tvals["weight_decay"],
        seed=tvals["seed"],
    )
    return MimConfig(
        train_images=data["train_images"],
        train_labels=data["train_labels"],
        test_images=data["test_images"],
        test_labels=data["test_labels"],
        variant=vals["variant"],
        width_scale=vals["width_scale"],
        train_limit=vals["train_limit"] if vals["train_limit"] > 0 else None,
        classes=vals["classes"],
        dropout_p=vals["dropout"],
        train=train_cfg,
    )
