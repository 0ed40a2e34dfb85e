"""Training loop, evaluation metrics, ablations and experiment directories."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .cstr import MODE_IDS, CstrParams
from .datasets import (HEALTH_STATES, DatasetManifest, RunRegistry, TaskConfig, WindowSet,
                       build_task, label_index, simulate_registry)
from .diffcore import Adam
from .errors import ConfigurationError, TrainingError
from .network import SAIN_MODES, ArchConfig, ModelCheckpoint, TSASAN, loss
from .samplegen import GenConfig, expand_training_set, save_stats, to_latent

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class Ablation:
    dasg: bool = True
    iss: bool = True
    sain: str = "adaptive"
    tsam: bool = True

    def __post_init__(self):
        if self.sain not in SAIN_MODES:
            raise ConfigurationError(f"ablation sain must be one of {SAIN_MODES}, got {self.sain!r}")


ABLATIONS = {
    "full": Ablation(),
    "A1": Ablation(dasg=False),
    "A2": Ablation(iss=False),
    "A3": Ablation(sain="none"),
    "A4": Ablation(sain="plain_in"),
    "A5": Ablation(tsam=False),
}


def ablation(name: str) -> Ablation:
    if name not in ABLATIONS:
        raise ConfigurationError(f"unknown ablation {name!r}; valid: {', '.join(ABLATIONS)}")
    return ABLATIONS[name]


@dataclass
class TrainConfig:
    batch_size: int = 512
    base_lr: float = 0.01
    lr_decay: float = 0.3
    decay_every: int = 3
    epochs: int = 30
    seed: int = 0
    ablation: Ablation = field(default_factory=Ablation)

    def lr(self, epoch: int) -> float:
        return self.base_lr * self.lr_decay ** (epoch // self.decay_every)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["ablation"] = Ablation(**d.get("ablation", {}))
        return cls(**d)


def _stream(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), tag]))


def init_model(arch: ArchConfig, seed: int) -> TSASAN:
    """Model whose initial weights depend only on the experiment seed."""
    return TSASAN(arch, seed=int(_stream(seed, 2).integers(2 ** 31)))


@dataclass
class TrainResult:
    checkpoint: ModelCheckpoint
    loss_curve: list


def train(model: TSASAN, train_set: WindowSet, config: TrainConfig, log=None) -> TrainResult:
    """Mini-batch Adam over latent windows; the last partial batch is kept."""
    n = len(train_set)
    if n == 0:
        raise TrainingError("training set is empty")
    if config.batch_size < 1 or config.epochs < 0:
        raise ConfigurationError(f"bad batch_size/epochs: {config.batch_size}/{config.epochs}")
    rng = _stream(config.seed, 1)
    opt = Adam(model.params, lr=config.base_lr)
    curve = []
    for epoch in range(config.epochs):
        lr = config.lr(epoch)
        order = rng.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            opt.zero_grad()
            value = loss(model(train_set.features[idx]), train_set.labels[idx])
            if not math.isfinite(value.item()):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            value.backward()
            opt.step(lr)
            total += value.item() * len(idx)
        curve.append(total / n)
        if log:
            log(f"epoch {epoch + 1}/{config.epochs} lr={lr:.3g} loss={curve[-1]:.4f}")
    return TrainResult(ModelCheckpoint.from_model(model), curve)


# -- metrics --------------------------------------------------------------------------------

@dataclass
class EvalReport:
    confusion: np.ndarray       # rows true class, columns predicted
    acc: float
    fdr: np.ndarray             # NaN for classes absent from the test set
    fpr: np.ndarray
    per_pair_acc: dict = field(default_factory=dict)   # "domain/category" -> accuracy

    @property
    def n(self) -> int:
        return int(self.confusion.sum())

    def to_dict(self) -> dict:
        def clean(a):
            return [None if not np.isfinite(x) else float(x) for x in a]
        return {"acc": float(self.acc), "n_test": self.n, "classes": list(HEALTH_STATES[:len(self.fdr)]),
                "fdr": clean(self.fdr), "fpr": clean(self.fpr),
                "mean_fdr": _nanmean(self.fdr), "mean_fpr": _nanmean(self.fpr),
                "per_pair_acc": dict(self.per_pair_acc)}

    def table(self) -> str:
        lines = [f"{'class':>6} {'FDR':>8} {'FPR':>8}"]
        for c, d, p in zip(HEALTH_STATES, self.fdr, self.fpr):
            lines.append(f"{c:>6} {_fmt(d):>8} {_fmt(p):>8}")
        return "\n".join(lines)


def _fmt(x):
    return "n/a" if not np.isfinite(x) else f"{x:.4f}"


def _nanmean(a):
    a = np.asarray(a, dtype=float)
    return float(np.nanmean(a)) if np.isfinite(a).any() else None


def confusion_matrix(pred, labels, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels, int), np.asarray(pred, int)), 1)
    return cm


def metrics_from_predictions(pred, labels, n_classes: int = len(HEALTH_STATES)) -> EvalReport:
    cm = confusion_matrix(pred, labels, n_classes)
    n = cm.sum()
    tp = np.diag(cm).astype(float)
    fn = cm.sum(axis=1) - tp
    fp = cm.sum(axis=0) - tp
    tn = n - tp - fn - fp
    with np.errstate(invalid="ignore", divide="ignore"):
        fdr = np.where(tp + fn > 0, tp / (tp + fn), np.nan)
        fpr = np.where(fp + tn > 0, fp / (fp + tn), np.nan)
    acc = float(tp.sum() / n) if n else float("nan")
    return EvalReport(cm, acc, fdr, fpr)


def predict_labels(probabilities: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest index
    return np.argmax(probabilities, axis=1)


def evaluate(model: TSASAN, test_set: WindowSet) -> EvalReport:
    if len(test_set) == 0:
        raise TrainingError("test set is empty")
    pred = predict_labels(model.predict(test_set.features))
    report = metrics_from_predictions(pred, test_set.labels, model.arch.n_classes)
    order = {m: i for i, m in enumerate(MODE_IDS)}
    for d in sorted(set(test_set.domains), key=lambda m: (order.get(m, 99), m)):
        for ci, c in enumerate(HEALTH_STATES):
            mask = (test_set.domains == d) & (test_set.labels == ci)
            if mask.any():
                report.per_pair_acc[f"{d}/{c}"] = float((pred[mask] == ci).mean())
    return report


def compare_reports(reports) -> list:
    """Accuracy table: one row per model label, one column per task, then the average.

    ``reports`` is a list of dicts with ``task_id``, ``acc`` and optionally
    ``label`` (defaults to the ablation name or "full").
    """
    reports = list(reports)
    if not reports:
        raise ConfigurationError("compare_reports needs at least one report")
    tasks, labels, acc = [], [], {}
    for r in reports:
        t, lab = r["task_id"], r.get("label") or r.get("ablation") or "full"
        if t not in tasks:
            tasks.append(t)
        if lab not in labels:
            labels.append(lab)
        acc[lab, t] = float(r["acc"])
    rows = [["model", *tasks, "average"]]
    for lab in labels:
        vals = [acc.get((lab, t)) for t in tasks]
        present = [v for v in vals if v is not None]
        rows.append([lab, *vals, sum(present) / len(present)])
    return rows


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for row in rows:
        w.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in row])
    return buf.getvalue()


# -- experiments -------------------------------------------------------------------------------

@dataclass
class DataConfig:
    runs_per_class: int = 2
    stride: int = 4
    jobs: int = 1


def config_hash(doc: dict) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def _dump(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, allow_nan=False) + "\n")


@dataclass
class ExperimentResult:
    out_dir: Path
    report: EvalReport
    loss_curve: list
    manifest: dict


def prepare_data(task: TaskConfig, data_cfg: DataConfig, seed: int, params: CstrParams | None = None,
                 registry: RunRegistry | None = None):
    registry = registry or simulate_registry(task, params, data_cfg.runs_per_class, seed, data_cfg.jobs)
    return build_task(task, registry, data_cfg.stride, seed)


def run_experiment(task: TaskConfig, train_cfg: TrainConfig, gen_cfg: GenConfig | None = None,
                   out_dir=None, data_cfg: DataConfig | None = None, params: CstrParams | None = None,
                   data=None, label: str | None = None, log=None,
                   run_spec: dict | None = None) -> ExperimentResult:
    """build -> DASG/ISS (per ablation) -> train -> evaluate, persisted to ``out_dir``.

    ``data`` may carry a pre-built ``(train, test, DatasetManifest)`` triple so
    ablations of one task share the same windows.
    """
    data_cfg = data_cfg or DataConfig()
    ab = train_cfg.ablation
    gen_cfg = replace(gen_cfg or GenConfig(seed=train_cfg.seed), dasg=ab.dasg, iss=ab.iss)
    params = params or CstrParams()
    if data is None:
        data = prepare_data(task, data_cfg, train_cfg.seed, params)
    train_raw, test_raw, ds_manifest = data

    expanded, stats = expand_training_set(train_raw, task, gen_cfg)
    train_set = to_latent(expanded, stats)
    test_set = to_latent(test_raw, stats)

    arch = ArchConfig(v=train_set.n_vars, n_classes=len(HEALTH_STATES), T=train_set.features.shape[2],
                      sain=ab.sain, tsam=ab.tsam)
    model = init_model(arch, train_cfg.seed)
    result = train(model, train_set, train_cfg, log=log)
    report = evaluate(model, test_set)

    config = {"task": task.to_dict(), "trainer": train_cfg.to_dict(), "generation": asdict(gen_cfg),
              "data": asdict(data_cfg), "plant": params.to_dict(), "label": label}
    gen_counts = {}
    for (d, c, s), n in sorted(_pair_source_counts(expanded).items()):
        gen_counts[f"{d}/{c}/{s}"] = n
    manifest = {"schema_version": SCHEMA_VERSION, "task_id": task.task_id, "label": label,
                "seeds": {"global": train_cfg.seed, "generation": gen_cfg.seed, "init": "derived(global, 2)",
                          "shuffle": "derived(global, 1)"},
                "config_sha256": config_hash(config), "dataset": ds_manifest.to_dict(),
                "training_windows": gen_counts, "alignment": gen_cfg.alignment}
    if run_spec is not None:
        manifest["run_spec"] = run_spec
    result.checkpoint.manifest = {"task_id": task.task_id, "label": label, "seed": train_cfg.seed,
                                  "epochs": train_cfg.epochs, "acc": report.acc,
                                  "final_loss": result.loss_curve[-1] if result.loss_curve else None}
    metrics = {"task_id": task.task_id, "label": label, **report.to_dict(),
               "final_loss": result.loss_curve[-1] if result.loss_curve else None}

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _dump(out / "config.json", config)
        _dump(out / "manifest.json", manifest)
        (out / "loss_curve.csv").write_text(
            "epoch,loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(result.loss_curve)))
        (out / "confusion.csv").write_text(rows_to_csv(
            [["true\\pred", *HEALTH_STATES]] +
            [[HEALTH_STATES[i], *map(int, row)] for i, row in enumerate(report.confusion)]))
        save_stats(stats, out / "domain_stats.json", gen_cfg.alignment)
        result.checkpoint.save(out / "checkpoint.json")
        _dump(out / "metrics.json", metrics)
    return ExperimentResult(Path(out_dir) if out_dir else None, report, result.loss_curve, manifest)


def _pair_source_counts(ws: WindowSet) -> dict:
    out = {}
    for d, l, s in zip(ws.domains, ws.labels, ws.sources):
        key = (str(d), HEALTH_STATES[int(l)], str(s))
        out[key] = out.get(key, 0) + 1
    return out


__all__ = ["Ablation", "ABLATIONS", "ablation", "TrainConfig", "TrainResult", "train", "EvalReport",
           "evaluate", "metrics_from_predictions", "confusion_matrix", "compare_reports",
           "run_experiment", "DataConfig", "DatasetManifest", "label_index"]
