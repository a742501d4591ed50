"""Training, evaluation and reporting for STAM and its baselines."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .autodiff import AdamState, ParamStore, Tensor, adam_step, derive_rng, no_grad
from .errors import ConfigError, NumericalError
from .heads import LossWeights, classify
from .initializers import INITIALIZER_KINDS
from .model import StamModel, VanillaStackModel
from .synthetic import NeedleSplit, NeedleTaskSpec, generate

log = logging.getLogger(__name__)

BASELINES = ("avg_consensus", "vanilla_stack")


@dataclass(frozen=True)
class ModelConfig:
    initializer: str = "selfatt"
    layers: int = 2
    d: int | None = None
    normalize_global: bool = True
    zero_query: bool = False


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    learning_rate: float = 3e-4
    batch_size: int = 32
    lambdas: tuple[float, ...] | None = None
    seed: int = 0


@dataclass(frozen=True)
class OutputConfig:
    metrics_path: str = "metrics.csv"
    trace_path: str = "trace.json"


@dataclass(frozen=True)
class ExperimentConfig:
    task: NeedleTaskSpec = field(default_factory=NeedleTaskSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    baseline: str | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def validate(self) -> None:
        self.task.validate()
        if self.model.initializer not in INITIALIZER_KINDS:
            raise ConfigError(
                f"unknown initializer {self.model.initializer!r}; choose from {', '.join(INITIALIZER_KINDS)}"
            )
        if self.model.layers < 0:
            raise ConfigError(f"layers must be >= 0, got {self.model.layers}")
        if self.model.d is not None and self.model.d < 1:
            raise ConfigError(f"d must be >= 1, got {self.model.d}")
        if self.baseline is not None and self.baseline not in BASELINES:
            raise ConfigError(f"unknown baseline {self.baseline!r}; choose from {', '.join(BASELINES)}")
        if self.train.epochs < 0 or self.train.batch_size < 1 or self.train.learning_rate <= 0:
            raise ConfigError("need epochs >= 0, batch_size >= 1 and learning_rate > 0")
        if not 0 <= self.train.seed < 2**64:
            raise ConfigError(f"seed must fit in an unsigned 64-bit integer, got {self.train.seed}")
        if self.baseline is None and self.train.lambdas is not None:
            LossWeights(self.train.lambdas)
            if len(self.train.lambdas) != self.model.layers + 1:
                raise ConfigError(
                    f"{len(self.train.lambdas)} loss weights given for {self.model.layers + 1} stages"
                )

    def to_dict(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        if out["train"]["lambdas"] is not None:
            out["train"]["lambdas"] = list(out["train"]["lambdas"])
        return out

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "ExperimentConfig":
        sections = {"task": NeedleTaskSpec, "model": ModelConfig, "train": TrainConfig, "output": OutputConfig}
        unknown = set(raw) - set(sections) - {"baseline"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        kwargs: dict[str, Any] = {"baseline": raw.get("baseline")}
        for name, kind in sections.items():
            values = dict(raw.get(name) or {})
            allowed = {f.name for f in dataclasses.fields(kind)}
            extra = set(values) - allowed
            if extra:
                raise ConfigError(f"unknown keys in [{name}]: {sorted(extra)}")
            if name == "train" and values.get("lambdas") is not None:
                values["lambdas"] = tuple(float(x) for x in values["lambdas"])
            try:
                kwargs[name] = kind(**values)
            except TypeError as exc:
                raise ConfigError(f"[{name}]: {exc}") from exc
        config = cls(**kwargs)
        config.validate()
        return config

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(raw)

    def config_hash(self) -> str:
        """Hash of everything that affects results (output paths excluded)."""
        payload = self.to_dict()
        payload.pop("output")
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def replace(self, **sections) -> "ExperimentConfig":
        return dataclasses.replace(self, **sections)

    def with_layers(self, layers: int) -> "ExperimentConfig":
        """Same config with ``layers`` global layers; a lambda vector of the wrong length falls back to all ones."""
        train = self.train
        if train.lambdas is not None and len(train.lambdas) != layers + 1:
            log.warning("dropping %d loss weights for a %d-stage model", len(train.lambdas), layers + 1)
            train = dataclasses.replace(train, lambdas=None)
        return self.replace(model=dataclasses.replace(self.model, layers=layers), train=train)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return self.replace(train=dataclasses.replace(self.train, seed=seed))

    def with_baseline(self, baseline: str | None) -> "ExperimentConfig":
        return self.replace(baseline=baseline)


@dataclass
class RunReport:
    kind: str
    config_hash: str
    seed: int
    initializer: str
    layers: int
    epoch_losses: list[float]
    test_accuracy: float
    head_accuracies: list[float]
    attention_mass: list[float | None]
    attention_mass_median: list[float | None]
    attention_entropy: list[float | None]
    wall_seconds: float = 0.0

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "RunReport":
        return cls(**raw)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        return cls.from_dict(json.loads(text))

    def comparable(self) -> dict[str, Any]:
        """Everything except wall-clock time, which is the only nondeterministic field."""
        out = self.to_dict()
        out.pop("wall_seconds")
        return out

    @property
    def final_mass(self) -> float | None:
        return self.attention_mass[-1]


@dataclass
class TrainedRun:
    config: ExperimentConfig
    model: StamModel | VanillaStackModel
    store: ParamStore
    report: RunReport
    test: NeedleSplit


def _kind(config: ExperimentConfig) -> str:
    return config.baseline or "stam"


def build_model(config: ExperimentConfig, store: ParamStore) -> StamModel | VanillaStackModel:
    task, m = config.task, config.model
    if config.baseline == "avg_consensus":
        return StamModel(store, task.feature_dim, task.clip_count, task.num_classes, "avg", 0, m.d)
    if config.baseline == "vanilla_stack":
        # self-attention init counts as one attention layer, so match M global layers with M + 1
        return VanillaStackModel(store, task.feature_dim, task.num_classes, m.layers + 1, m.d)
    return StamModel(
        store,
        task.feature_dim,
        task.clip_count,
        task.num_classes,
        m.initializer,
        m.layers,
        m.d,
        m.normalize_global,
        m.zero_query,
    )


def loss_weights(config: ExperimentConfig, stages: int) -> LossWeights:
    if config.baseline is None and config.train.lambdas is not None:
        return LossWeights(config.train.lambdas)
    return LossWeights.ones(stages - 1)


def _entropy(weights: np.ndarray) -> np.ndarray:
    safe = np.where(weights > 0, weights, 1.0)
    return -(weights * np.log(safe)).sum(axis=-1)


def evaluate(model, split: NeedleSplit) -> dict[str, list]:
    """Per-stage accuracy and attention statistics on ``split``."""
    with no_grad():
        trace = model.forward(Tensor(split.clips))
        accuracies, masses, medians, entropies = [], [], [], []
        for g, head, w in zip(trace.per_layer_globals, model.heads, trace.per_layer_weights):
            predicted = np.argmax(classify(g, head).values, axis=-1)
            accuracies.append(int(np.count_nonzero(predicted == split.labels)) / len(split))
            if w is None:
                masses.append(None)
                medians.append(None)
                entropies.append(None)
                continue
            mass = (w.values * split.signal_masks).sum(axis=-1)
            masses.append(float(mass.mean()))
            medians.append(float(np.median(mass)))
            entropies.append(float(_entropy(w.values).mean()))
    return {"accuracy": accuracies, "mass": masses, "median": medians, "entropy": entropies}


def fit(config: ExperimentConfig, data: tuple[NeedleSplit, NeedleSplit] | None = None) -> TrainedRun:
    """Train the configured model and evaluate it on the held-out split."""
    config.validate()
    start = time.perf_counter()
    train_split, test_split = generate(config.task) if data is None else data
    store = ParamStore(config.train.seed)
    model = build_model(config, store)
    weights = loss_weights(config, model.num_stages)
    state = AdamState(learning_rate=config.train.learning_rate)
    shuffle_rng = derive_rng(config.train.seed, "shuffle")
    n, batch = len(train_split), config.train.batch_size

    epoch_losses: list[float] = []
    for epoch in range(config.train.epochs):
        order = shuffle_rng.permutation(n)
        total = 0.0
        for b, lo in enumerate(range(0, n, batch)):
            idx = order[lo : lo + batch]
            store.zero_grad()
            loss = model.loss(Tensor(train_split.clips[idx]), train_split.labels[idx], weights)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericalError(f"non-finite loss {value} at epoch {epoch}, batch {b}")
            loss.backward()
            adam_step(store, state)
            total += value * len(idx)
        epoch_losses.append(total / n)
        log.debug("epoch %d loss %.6f", epoch, epoch_losses[-1])

    metrics = evaluate(model, test_split)
    report = RunReport(
        kind=_kind(config),
        config_hash=config.config_hash(),
        seed=config.train.seed,
        initializer="avg" if config.baseline == "avg_consensus" else config.model.initializer,
        layers=config.model.layers,
        epoch_losses=epoch_losses,
        test_accuracy=metrics["accuracy"][-1],
        head_accuracies=metrics["accuracy"],
        attention_mass=metrics["mass"],
        attention_mass_median=metrics["median"],
        attention_entropy=metrics["entropy"],
        wall_seconds=time.perf_counter() - start,
    )
    return TrainedRun(config, model, store, report, test_split)


def train(config: ExperimentConfig, data: tuple[NeedleSplit, NeedleSplit] | None = None) -> RunReport:
    return fit(config, data).report


def run_vanilla_stack(config: ExperimentConfig, data=None) -> RunReport:
    return train(config.with_baseline("vanilla_stack"), data)


def run_avg_consensus(config: ExperimentConfig, data=None) -> RunReport:
    return train(config.with_baseline("avg_consensus"), data)


def sweep_layers(
    config: ExperimentConfig,
    layer_counts: Sequence[int],
    seeds: Sequence[int] | None = None,
) -> list[RunReport]:
    """One STAM run per layer count (and per seed), all on the same task data."""
    data = generate(config.task)
    seeds = [config.train.seed] if seeds is None else list(seeds)
    return [train(config.with_layers(m).with_seed(s), data) for m in layer_counts for s in seeds]


def compare_baselines(config: ExperimentConfig, seeds: Sequence[int]) -> list[RunReport]:
    """STAM, average consensus and the layer-matched vanilla stack, per seed."""
    data = generate(config.task)
    reports = []
    for seed in seeds:
        cfg = config.with_seed(seed)
        reports.append(train(cfg.with_baseline(None), data))
        reports.append(run_avg_consensus(cfg, data))
        reports.append(run_vanilla_stack(cfg, data))
    return reports


def median_accuracy(reports: Sequence[RunReport]) -> float:
    return statistics.median(r.test_accuracy for r in reports)


def summarize(reports: Sequence[RunReport]) -> list[dict[str, Any]]:
    """Median accuracy and final-stage attention mass per (kind, layers) group."""
    groups: dict[tuple[str, int], list[RunReport]] = {}
    for r in reports:
        groups.setdefault((r.kind, r.layers), []).append(r)
    rows = []
    for (kind, layers), runs in groups.items():
        masses = [r.final_mass for r in runs if r.final_mass is not None]
        rows.append(
            {
                "kind": kind,
                "layers": layers,
                "seeds": [r.seed for r in runs],
                "median_accuracy": median_accuracy(runs),
                "median_final_mass": statistics.median(masses) if masses else None,
            }
        )
    return rows


# -- exports ---------------------------------------------------------------------------

METRICS_COLUMNS = (
    "kind",
    "config_hash",
    "seed",
    "initializer",
    "layers",
    "test_accuracy",
    "head_accuracies",
    "attention_mass",
    "attention_mass_median",
    "attention_entropy",
    "loss_first",
    "loss_last",
    "loss_min",
)


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (list, tuple)):
        return ";".join(_cell(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def metrics_row(report: RunReport) -> dict[str, str]:
    losses = report.epoch_losses
    row = {
        "kind": report.kind,
        "config_hash": report.config_hash,
        "seed": report.seed,
        "initializer": report.initializer,
        "layers": report.layers,
        "test_accuracy": report.test_accuracy,
        "head_accuracies": report.head_accuracies,
        "attention_mass": report.attention_mass,
        "attention_mass_median": report.attention_mass_median,
        "attention_entropy": report.attention_entropy,
        "loss_first": losses[0] if losses else None,
        "loss_last": losses[-1] if losses else None,
        "loss_min": min(losses) if losses else None,
    }
    return {k: _cell(v) for k, v in row.items()}


def write_metrics(path: str | Path, reports: Sequence[RunReport]) -> None:
    """One CSV row per run; wall-clock time is left out so reruns are byte-identical."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRICS_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for report in reports:
            writer.writerow(metrics_row(report))


def export_attention_trace(run: TrainedRun, sample_ids: Sequence[int]) -> dict[str, Any]:
    """Per-sample, per-stage attention weights of a trained run on its test split."""
    size = len(run.test)
    for i in sample_ids:
        if not 0 <= int(i) < size:
            raise ConfigError(f"unknown sample id {i}; test split has {size} samples")
    ids = np.asarray(sample_ids, dtype=np.int64)
    with no_grad():
        trace = run.model.forward(Tensor(run.test.clips[ids]))
        stage_predictions = [
            np.argmax(classify(g, head).values, axis=-1)
            for g, head in zip(trace.per_layer_globals, run.model.heads)
        ]
    predicted = stage_predictions[-1]
    samples = []
    for row, sid in enumerate(ids):
        stages = []
        for layer, w in enumerate(trace.per_layer_weights):
            if w is None:
                continue
            weights = w.values[row]
            stages.append(
                {
                    "layer": layer,
                    "predicted": int(stage_predictions[layer][row]),
                    "weights": [float(x) for x in weights],
                    "signal_mass": float((weights * run.test.signal_masks[sid]).sum()),
                }
            )
        samples.append(
            {
                "sample_id": int(sid),
                "label": int(run.test.labels[sid]),
                "predicted": int(predicted[row]),
                "signal_mask": [int(x) for x in run.test.signal_masks[sid]],
                "layers": stages,
            }
        )
    return {
        "kind": run.report.kind,
        "config_hash": run.report.config_hash,
        "seed": run.report.seed,
        "layers": run.report.layers,
        "samples": samples,
    }


def write_json(path: str | Path, payload: Any) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2) + "\n")


# -- gradient checks -------------------------------------------------------------------


def gradient_check_suite(
    kinds: Sequence[str] = INITIALIZER_KINDS,
    layer_counts: Sequence[int] = (1, 2, 3),
    d: int = 8,
    feature_dim: int = 16,
    clip_count: int = 6,
    num_classes: int = 4,
    batch: int = 2,
    seed: int = 0,
    h: float = 1e-6,
) -> list[dict[str, Any]]:
    """Finite-difference check of the combined loss for every (initializer, M) pair."""
    from .autodiff import check_gradients

    spec = NeedleTaskSpec(
        num_classes=num_classes,
        clip_count=clip_count,
        feature_dim=feature_dim,
        train_size=batch,
        test_size=0,
        seed=seed,
    )
    train_split, _ = generate(spec)
    clips = Tensor(train_split.clips)
    rows = []
    for kind in kinds:
        for m in layer_counts:
            store = ParamStore(seed)
            model = StamModel(store, feature_dim, clip_count, num_classes, kind, m, d)
            weights = LossWeights.ones(m)
            start = time.perf_counter()
            report = check_gradients(lambda _: model.loss(clips, train_split.labels, weights), store, h=h)
            rows.append(
                {
                    "initializer": kind,
                    "layers": m,
                    "num_values": store.num_values(),
                    "max_relative_error": report.overall,
                    "per_parameter": report.max_relative_error,
                    "seconds": time.perf_counter() - start,
                }
            )
    return rows
