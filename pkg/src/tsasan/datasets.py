"""Sliding-window samples and heterogeneous-domain task splits."""

from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cstr import FAULT_IDS, MODE_IDS, VARIABLES, CstrParams, SimRun, simulate_many
from .errors import ConfigurationError, DatasetError, ParseError

SCHEMA_VERSION = 1
WINDOW = 64
HEALTH_STATES = FAULT_IDS           # class index == position in this tuple
SOURCES = ("real", "dasg", "iss")
SPLITS = ("train", "test")


def label_index(category: str) -> int:
    try:
        return HEALTH_STATES.index(category)
    except ValueError:
        raise ConfigurationError(
            f"unknown health state {category!r}; valid: {', '.join(HEALTH_STATES)}") from None


@dataclass
class WindowSample:
    features: np.ndarray    # (v, WINDOW)
    label: int
    domain_id: str
    source: str = "real"

    @property
    def category(self) -> str:
        return HEALTH_STATES[self.label]


class WindowSet:
    """Column-oriented collection of windows.

    Stores ``features`` (N, v, T), integer ``labels``, and string arrays
    ``domains`` and ``sources``. Indexing with an int gives a WindowSample,
    with anything else a new WindowSet.
    """

    def __init__(self, features, labels, domains, sources=None):
        self.features = np.asarray(features, dtype=np.float64)
        n = self.features.shape[0]
        if self.features.ndim != 3:
            raise DatasetError(f"window features must be (N, v, T), got {self.features.shape}")
        self.labels = np.asarray(labels, dtype=np.int64).reshape(n)
        self.domains = np.asarray(domains, dtype=object).reshape(n)
        if sources is None:
            sources = ["real"] * n
        self.sources = np.asarray(sources, dtype=object).reshape(n)

    @classmethod
    def empty(cls, v: int = len(VARIABLES), T: int = WINDOW) -> "WindowSet":
        return cls(np.zeros((0, v, T)), [], [], [])

    @classmethod
    def from_samples(cls, samples, v: int | None = None, T: int = WINDOW) -> "WindowSet":
        samples = list(samples)
        if not samples:
            return cls.empty(v or len(VARIABLES), T)
        return cls(np.stack([s.features for s in samples]), [s.label for s in samples],
                   [s.domain_id for s in samples], [s.source for s in samples])

    @classmethod
    def concat(cls, sets) -> "WindowSet":
        sets = [s for s in sets if s is not None]
        nonempty = [s for s in sets if len(s)]
        if not nonempty:
            return sets[0] if sets else cls.empty()
        return cls(np.concatenate([s.features for s in nonempty]),
                   np.concatenate([s.labels for s in nonempty]),
                   np.concatenate([s.domains for s in nonempty]),
                   np.concatenate([s.sources for s in nonempty]))

    def __len__(self) -> int:
        return self.features.shape[0]

    def __getitem__(self, idx):
        if isinstance(idx, (int, np.integer)):
            return WindowSample(self.features[idx], int(self.labels[idx]),
                                str(self.domains[idx]), str(self.sources[idx]))
        return WindowSet(self.features[idx], self.labels[idx], self.domains[idx], self.sources[idx])

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    @property
    def n_vars(self) -> int:
        return self.features.shape[1]

    def select(self, domain=None, category=None, source=None) -> "WindowSet":
        mask = np.ones(len(self), dtype=bool)
        if domain is not None:
            mask &= self.domains == domain
        if category is not None:
            mask &= self.labels == (label_index(category) if isinstance(category, str) else category)
        if source is not None:
            mask &= self.sources == source
        return self[mask]

    def pairs(self) -> set:
        return {(str(d), HEALTH_STATES[int(l)]) for d, l in zip(self.domains, self.labels)}


def window_run(run: SimRun, stride: int = 4, window: int = WINDOW) -> WindowSet:
    """Cut a run into windows labelled by their position relative to fault onset.

    Windows entirely before onset are healthy, windows entirely at or after
    onset carry the run's fault id, and windows straddling onset are dropped.
    """
    if stride < 1:
        raise ConfigurationError(f"stride must be >= 1, got {stride}")
    x = run.measurements
    n = x.shape[0]
    if n < window:
        raise DatasetError(f"run {run.mode_id}/{run.fault_id} has {n} samples, needs >= {window}")
    starts = np.arange(0, n - window + 1, stride)
    fault = label_index(run.fault_id)
    h = label_index("H")
    if fault == h:
        keep = starts
        labels = np.full(len(starts), h)
    else:
        before = starts + window <= run.onset_index
        after = starts >= run.onset_index
        keep = starts[before | after]
        labels = np.where(after[before | after], fault, h)
    feats = np.stack([x[s:s + window].T for s in keep]) if len(keep) else np.zeros((0, x.shape[1], window))
    return WindowSet(feats, labels, [run.mode_id] * len(keep))


# -- tasks ----------------------------------------------------------------------------

@dataclass(frozen=True)
class TaskConfig:
    task_id: str
    modes: tuple
    train_categories: dict      # domain -> tuple of categories
    test_categories: dict

    def validate(self) -> None:
        union = set()
        for d in self.modes:
            cats = self.train_categories.get(d)
            if not cats:
                raise ConfigurationError(f"{self.task_id}: no training categories for {d}")
            if "H" not in cats:
                raise ConfigurationError(f"{self.task_id}: {d} training set lacks the healthy class")
            union |= set(cats)
        if union != set(HEALTH_STATES):
            raise ConfigurationError(
                f"{self.task_id}: training categories cover {sorted(union)}, not every health state")

    def missing_pairs(self) -> list:
        """(domain, category) pairs absent from training, in grid order."""
        return [(d, c) for d in self.modes for c in HEALTH_STATES if c not in self.train_categories[d]]

    def to_dict(self) -> dict:
        return {"task_id": self.task_id, "modes": list(self.modes),
                "train_categories": {d: list(c) for d, c in self.train_categories.items()},
                "test_categories": {d: list(c) for d, c in self.test_categories.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "TaskConfig":
        cfg = cls(d["task_id"], tuple(d["modes"]),
                  {k: tuple(v) for k, v in d["train_categories"].items()},
                  {k: tuple(v) for k, v in d["test_categories"].items()})
        cfg.validate()
        return cfg


def _cats(*faults):
    return ("H",) + tuple(f"F{i}" for i in faults)


_ALL = tuple(range(1, 10))
_LOW, _HIGH = (1, 2, 3, 4), (5, 6, 7, 8, 9)
_TASK_TABLE = {
    "T1": {"M1": _cats(*_ALL[:8]), "M2": _cats(1, 2, 3, 4, 5, 6, 7, 9)},
    "T2": {"M1": _cats(1, 2, 3, 4, 5, 6, 7, 9), "M3": _cats(3, 4, 6, 7, 8)},
    "T3": {"M2": _cats(1, 3, 9), "M3": _cats(1, 2, 4, 5, 6, 7, 8)},
    "T4": {"M1": _cats(*_LOW), "M2": _cats(*_HIGH)},
    "T5": {"M1": _cats(*_LOW), "M3": _cats(*_HIGH)},
    "T6": {"M2": _cats(*_LOW), "M3": _cats(*_HIGH)},
    "T7": {"M1": _cats(*_LOW), "M2": _cats(*_HIGH), "M3": _cats()},
    "T8": {"M1": _cats(*_LOW), "M3": _cats(*_HIGH), "M2": _cats()},
    "T9": {"M2": _cats(*_LOW), "M3": _cats(*_HIGH), "M1": _cats()},
}
TASK_IDS = tuple(_TASK_TABLE)


def task_config(task_id: str) -> TaskConfig:
    if task_id not in _TASK_TABLE:
        raise ConfigurationError(f"unknown task {task_id!r}; valid tasks: {', '.join(TASK_IDS)}")
    train = _TASK_TABLE[task_id]
    modes = tuple(m for m in MODE_IDS if m in train)
    cfg = TaskConfig(task_id, modes, dict(train), {m: HEALTH_STATES for m in modes})
    cfg.validate()
    return cfg


# -- run registry -----------------------------------------------------------------------

def derive_seed(base_seed: int, mode_id: str, category: str, split: str, rep: int) -> int:
    ss = np.random.SeedSequence([int(base_seed), MODE_IDS.index(mode_id) if mode_id in MODE_IDS else 99,
                                 label_index(category), SPLITS.index(split), int(rep)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


@dataclass
class RunRegistry:
    runs: dict = field(default_factory=dict)    # (domain, category, split) -> [SimRun]

    def add(self, run: SimRun, split: str) -> None:
        if split not in SPLITS:
            raise ConfigurationError(f"split must be one of {SPLITS}, got {split!r}")
        self.runs.setdefault((run.mode_id, run.fault_id, split), []).append(run)

    def get(self, domain: str, category: str, split: str) -> list:
        return self.runs.get((domain, category, split), [])

    def seeds(self, split: str) -> set:
        return {r.seed for (_, _, s), runs in self.runs.items() if s == split for r in runs}

    def required(self, task: TaskConfig) -> list:
        need = [(d, c, "train") for d in task.modes for c in task.train_categories[d]]
        need += [(d, c, "test") for d in task.modes for c in task.test_categories[d]]
        return need

    def gaps(self, task: TaskConfig) -> list:
        return [key for key in self.required(task) if not self.runs.get(key)]

    def save(self, directory) -> None:
        from .cstr import export_run, run_filename

        directory = Path(directory)
        for (_, _, split), runs in sorted(self.runs.items()):
            for r in runs:
                export_run(r, directory / split / run_filename(r.mode_id, r.fault_id, r.seed))

    @classmethod
    def load(cls, directory) -> "RunRegistry":
        from .cstr import load_run

        directory = Path(directory)
        reg = cls()
        for split in SPLITS:
            for path in sorted((directory / split).glob("*.csv")):
                reg.add(load_run(path), split)
        if not reg.runs:
            raise DatasetError(f"no run files found under {directory}/train or {directory}/test")
        return reg


def simulate_registry(task: TaskConfig, params: CstrParams | None = None, runs_per_class: int = 2,
                      base_seed: int = 0, jobs: int = 1) -> RunRegistry:
    """Simulate every run the task needs; train and test seeds never coincide."""
    params = params or CstrParams()
    keys = sorted(set(RunRegistry().required(task)),
                  key=lambda k: (MODE_IDS.index(k[0]), label_index(k[1]), SPLITS.index(k[2])))
    specs, splits = [], []
    for d, c, split in keys:
        for rep in range(runs_per_class):
            specs.append((d, c, derive_seed(base_seed, d, c, split, rep)))
            splits.append(split)
    reg = RunRegistry()
    for run, split in zip(simulate_many(params, specs, jobs), splits):
        reg.add(run, split)
    return reg


# -- building -----------------------------------------------------------------------------

@dataclass
class DatasetManifest:
    task_id: str
    stride: int
    split_seed: int
    runs: list                  # dicts: split, domain, category, seed, windows
    counts: dict                # "split/domain/category/source" -> windows
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return {"schema_version": self.schema_version, "task_id": self.task_id,
                "stride": self.stride, "split_seed": self.split_seed,
                "runs": self.runs, "counts": dict(sorted(self.counts.items()))}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        return cls(d["task_id"], d["stride"], d["split_seed"], d["runs"], d["counts"],
                   d.get("schema_version", SCHEMA_VERSION))

    def record(self, split: str, ws: WindowSet) -> None:
        for (dom, cat, src), n in _counts(ws).items():
            key = f"{split}/{dom}/{cat}/{src}"
            self.counts[key] = self.counts.get(key, 0) + n


def _counts(ws: WindowSet) -> Counter:
    return Counter((str(d), HEALTH_STATES[int(l)], str(s))
                   for d, l, s in zip(ws.domains, ws.labels, ws.sources))


def build_task(config: TaskConfig, runs: RunRegistry, stride: int = 4, seed: int = 0):
    """Window every registered run into (train, test, manifest)."""
    config.validate()
    gaps = runs.gaps(config)
    if gaps:
        listing = ", ".join(f"({d}, {c}, {s})" for d, c, s in gaps)
        raise DatasetError(f"task {config.task_id} is missing runs for: {listing}")
    overlap = runs.seeds("train") & runs.seeds("test") - {None}
    if overlap:
        raise DatasetError(f"train and test runs share seeds {sorted(overlap)}")

    manifest = DatasetManifest(config.task_id, stride, seed, [], {})
    out = {}
    for split, cats in (("train", config.train_categories), ("test", config.test_categories)):
        parts = []
        for d in config.modes:
            allowed = [label_index(c) for c in cats[d]]
            for c in cats[d]:
                for run in runs.get(d, c, split):
                    ws = window_run(run, stride)
                    ws = ws[np.isin(ws.labels, allowed)]
                    parts.append(ws)
                    manifest.runs.append({"split": split, "domain": d, "category": c,
                                          "seed": run.seed, "windows": len(ws)})
        out[split] = WindowSet.concat(parts)
        manifest.record(split, out[split])
    return out["train"], out["test"], manifest


def class_balance_report(ws: WindowSet) -> dict:
    """Exact window counts keyed by (domain, category), in grid order."""
    counts = Counter((str(d), HEALTH_STATES[int(l)]) for d, l in zip(ws.domains, ws.labels))
    order = {m: i for i, m in enumerate(MODE_IDS)}
    return dict(sorted(counts.items(), key=lambda kv: (order.get(kv[0][0], 99), kv[0][0],
                                                       label_index(kv[0][1]))))


# -- external data and persistence -----------------------------------------------------------

def import_external_csv(path, domain_id: str, label: str, onset_index: int) -> SimRun:
    """Read a run CSV (header row, then numeric rows) into a SimRun.

    A leading ``time_min`` column is used as the time axis when present;
    every other column is a monitored variable.
    """
    path = Path(path)
    label_index(label)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DatasetError(f"cannot open {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(path, 1, "empty file") from None
        header = [h.strip() for h in header]
        rows = []
        for row in reader:
            line = reader.line_num
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise ParseError(path, line, f"expected {len(header)} columns, found {len(row)}")
            try:
                vals = [float(cell) for cell in row]
            except ValueError:
                bad = next(c for c in row if not _is_float(c))
                raise ParseError(path, line, f"non-numeric value {bad!r}") from None
            if not all(np.isfinite(vals)):
                raise ParseError(path, line, "non-finite value")
            rows.append(vals)
    if not rows:
        raise ParseError(path, 2, "no data rows")
    data = np.asarray(rows)
    if header[0] == "time_min":
        times, data, variables = data[:, 0], data[:, 1:], tuple(header[1:])
    else:
        times, variables = None, tuple(header)
    if onset_index < 0:
        raise ConfigurationError(f"onset_index must be >= 0, got {onset_index}")
    return SimRun(domain_id, label, data, int(onset_index), variables=variables, time_min=times)


def _is_float(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def write_windows(ws: WindowSet, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    N, v, T = ws.features.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["domain_id", "label", "source", *(f"x{j}_{t}" for j in range(v) for t in range(T))])
        flat = ws.features.reshape(N, v * T)
        for i in range(N):
            w.writerow([ws.domains[i], HEALTH_STATES[ws.labels[i]], ws.sources[i],
                        *(repr(float(x)) for x in flat[i])])
    return path


def read_windows(path, T: int = WINDOW) -> WindowSet:
    path = Path(path)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DatasetError(f"cannot open {path}: {exc}") from exc
    doms, labels, srcs, feats = [], [], [], []
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:3] != ["domain_id", "label", "source"]:
            raise ParseError(path, 1, "expected header starting domain_id,label,source")
        width = len(header) - 3
        if width % T:
            raise ParseError(path, 1, f"{width} feature columns is not a multiple of {T}")
        for row in reader:
            line = reader.line_num
            if len(row) != len(header):
                raise ParseError(path, line, f"expected {len(header)} columns, found {len(row)}")
            if row[1] not in HEALTH_STATES or row[2] not in SOURCES:
                raise ParseError(path, line, f"bad label/source {row[1]!r}/{row[2]!r}")
            try:
                feats.append(np.array(row[3:], dtype=np.float64))
            except ValueError:
                raise ParseError(path, line, "non-numeric feature value") from None
            doms.append(row[0])
            labels.append(HEALTH_STATES.index(row[1]))
            srcs.append(row[2])
    v = width // T
    arr = np.stack(feats).reshape(-1, v, T) if feats else np.zeros((0, v, T))
    return WindowSet(arr, labels, doms, srcs)


def save_dataset(directory, train: WindowSet, test: WindowSet, manifest: DatasetManifest) -> Path:
    directory = Path(directory)
    write_windows(train, directory / "train" / "windows.csv")
    write_windows(test, directory / "test" / "windows.csv")
    (directory / "manifest.json").write_text(json.dumps(manifest.to_dict(), indent=2) + "\n")
    return directory


def load_dataset(directory):
    directory = Path(directory)
    try:
        manifest = DatasetManifest.from_dict(json.loads((directory / "manifest.json").read_text()))
    except (OSError, ValueError, KeyError) as exc:
        raise DatasetError(f"cannot read dataset manifest in {directory}: {exc}") from exc
    return (read_windows(directory / "train" / "windows.csv"),
            read_windows(directory / "test" / "windows.csv"), manifest)
