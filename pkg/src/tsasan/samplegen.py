"""Cross-domain sample generation.

Each domain gets a per-variable standardization g_i(x) = (x - mu_i) / sigma_i
fitted on its healthy windows. Fault windows that exist only in domain i are
carried into domain j with g_j^{-1}(g_i(x)) (DASG). Extra fault windows are
then synthesized by mixing fault and healthy windows of the same domain in
the standardized space (ISS).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cstr import MODE_IDS
from .datasets import HEALTH_STATES, TaskConfig, WindowSet, label_index
from .errors import DimensionError, GenerationError

SIGMA_FLOOR_REL = 1e-6
LAMBDA_LOW = 0.2
ALIGNMENTS = ("per_domain", "pooled")


@dataclass
class DomainStats:
    domain_id: str
    mu: np.ndarray
    sigma: np.ndarray
    n_samples: int
    sigma_floor: np.ndarray

    def to_dict(self) -> dict:
        return {"domain_id": self.domain_id, "n_samples": int(self.n_samples),
                "mu": self.mu.tolist(), "sigma": self.sigma.tolist(),
                "sigma_floor": self.sigma_floor.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "DomainStats":
        return cls(d["domain_id"], np.asarray(d["mu"], float), np.asarray(d["sigma"], float),
                   int(d["n_samples"]), np.asarray(d["sigma_floor"], float))


def _as_array(windows) -> np.ndarray:
    if isinstance(windows, WindowSet):
        return windows.features
    return np.asarray(windows, dtype=np.float64)


def fit_domain_stats(healthy, domain_id: str) -> DomainStats:
    """Pooled per-variable mean/std over every timestep of every healthy window."""
    x = _as_array(healthy)
    if x.ndim != 3 or x.shape[0] < 2:
        raise GenerationError(
            f"domain {domain_id}: need at least 2 healthy windows to fit statistics, got "
            f"{x.shape[0] if x.ndim == 3 else 0}")
    flat = x.transpose(1, 0, 2).reshape(x.shape[1], -1)
    mu = flat.mean(axis=1)
    sd = flat.std(axis=1)
    floor = SIGMA_FLOOR_REL * np.maximum(np.abs(mu), 1.0)
    return DomainStats(domain_id, mu, np.maximum(sd, floor), x.shape[0], floor)


def fit_all_stats(train: WindowSet, modes, alignment: str = "per_domain") -> dict:
    """Stats for every task domain.

    ``pooled`` fits one standardization on the healthy windows of all domains
    together and shares it, i.e. no cross-domain alignment.
    """
    if alignment not in ALIGNMENTS:
        raise GenerationError(f"alignment must be one of {ALIGNMENTS}, got {alignment!r}")
    h = label_index("H")
    if alignment == "pooled":
        pooled = fit_domain_stats(train.features[train.labels == h], "pooled")
        return {m: DomainStats(m, pooled.mu, pooled.sigma, pooled.n_samples, pooled.sigma_floor)
                for m in modes}
    return {m: fit_domain_stats(train.select(domain=m, category=h).features, m) for m in modes}


def standardize(x, stats: DomainStats) -> np.ndarray:
    return (np.asarray(x) - stats.mu[:, None]) / stats.sigma[:, None]


def destandardize(z, stats: DomainStats) -> np.ndarray:
    return np.asarray(z) * stats.sigma[:, None] + stats.mu[:, None]


def map_domain(x, src: DomainStats, dst: DomainStats) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if src.mu.shape != dst.mu.shape or x.shape[-2] != src.mu.shape[0]:
        raise DimensionError(
            f"variable count mismatch: window has {x.shape[-2]}, stats have "
            f"{src.mu.shape[0]} and {dst.mu.shape[0]}")
    if src is dst:
        return x.copy()
    return destandardize(standardize(x, src), dst)


def _per_domain(ws: WindowSet, stats: dict, fn) -> WindowSet:
    out = np.empty_like(ws.features)
    for d in np.unique(ws.domains):
        if d not in stats:
            raise GenerationError(f"no domain statistics for {d}")
        mask = ws.domains == d
        out[mask] = fn(ws.features[mask], stats[d])
    return WindowSet(out, ws.labels, ws.domains, ws.sources)


def to_latent(ws: WindowSet, stats: dict) -> WindowSet:
    return _per_domain(ws, stats, standardize)


def from_latent(ws: WindowSet, stats: dict) -> WindowSet:
    return _per_domain(ws, stats, destandardize)


def dasg_expand(train: WindowSet, task: TaskConfig, stats: dict) -> WindowSet:
    """Map real fault windows into every task domain whose training set lacks that category."""
    missing = [m for m in task.modes if m not in stats]
    if missing:
        raise GenerationError(f"no domain statistics for {', '.join(missing)}")
    h = label_index("H")
    parts = []
    for j in task.modes:
        for c in HEALTH_STATES:
            if c in task.train_categories[j]:
                continue
            ci = label_index(c)
            for i in task.modes:
                if i == j:
                    continue
                src = train[(train.domains == i) & (train.labels == ci) & (train.sources == "real")]
                if not len(src) or ci == h:
                    continue
                mapped = map_domain(src.features, stats[i], stats[j])
                parts.append(WindowSet(mapped, src.labels, [j] * len(src), ["dasg"] * len(src)))
    return WindowSet.concat(parts) if parts else WindowSet.empty(train.n_vars, train.features.shape[2])


def sample_lambda(rng: np.random.Generator, size=None, alpha: float = 2.0,
                  low: float = LAMBDA_LOW) -> np.ndarray:
    """lambda = low + (1 - low) * Beta(alpha, alpha)."""
    return low + (1.0 - low) * rng.beta(alpha, alpha, size=size)


@dataclass
class MixSample:
    features: np.ndarray
    label: int
    lam: float
    parents: tuple      # (fault index, healthy index) into the pools


def iss_synthesize(fault_windows, healthy_windows, count: int, alpha: float = 2.0, seed: int = 0,
                   fault_labels=None, lam: float | None = None) -> list:
    """Mix randomly paired fault and healthy latent windows.

    Output windows keep the fault parent's label. ``lam`` pins the mixing
    coefficient (used to test the endpoints).
    """
    zf = _as_array(fault_windows)
    zn = _as_array(healthy_windows)
    if fault_labels is None:
        fault_labels = fault_windows.labels if isinstance(fault_windows, WindowSet) else np.zeros(len(zf), int)
    if count < 0:
        raise GenerationError(f"count must be >= 0, got {count}")
    if count and (len(zf) == 0 or len(zn) == 0):
        raise GenerationError(f"cannot mix from empty pools ({len(zf)} fault, {len(zn)} healthy)")
    rng = np.random.default_rng(seed)
    lams = sample_lambda(rng, count, alpha) if lam is None else np.full(count, float(lam))
    fi = rng.integers(0, len(zf), size=count) if count else np.zeros(0, int)
    hi = rng.integers(0, len(zn), size=count) if count else np.zeros(0, int)
    return [MixSample(lams[k] * zf[fi[k]] + (1.0 - lams[k]) * zn[hi[k]], int(fault_labels[fi[k]]),
                      float(lams[k]), (int(fi[k]), int(hi[k]))) for k in range(count)]


def iss_expand(latent: WindowSet, ratio: float = 0.5, alpha: float = 2.0, seed: int = 0) -> WindowSet:
    """ISS for every (domain, fault category) in a latent training set.

    Pools are the real plus DASG windows of the pair; the healthy partner
    comes from the same domain. Emits ``round(ratio * pool size)`` windows.
    """
    h = label_index("H")
    parts = []
    for d in sorted(set(latent.domains), key=lambda m: (MODE_IDS.index(m) if m in MODE_IDS else 99, m)):
        healthy = latent[(latent.domains == d) & (latent.labels == h) & (latent.sources != "iss")]
        for ci in range(len(HEALTH_STATES)):
            if ci == h:
                continue
            pool = latent[(latent.domains == d) & (latent.labels == ci) & (latent.sources != "iss")]
            count = int(round(ratio * len(pool)))
            if count == 0:
                continue
            sub_seed = np.random.SeedSequence(
                [seed, MODE_IDS.index(d) if d in MODE_IDS else 99, ci]).generate_state(1)[0]
            mixes = iss_synthesize(pool, healthy, count, alpha, int(sub_seed))
            parts.append(WindowSet(np.stack([m.features for m in mixes]), [m.label for m in mixes],
                                   [d] * count, ["iss"] * count))
    return WindowSet.concat(parts) if parts else WindowSet.empty(latent.n_vars, latent.features.shape[2])


@dataclass
class GenConfig:
    dasg: bool = True
    iss: bool = True
    iss_ratio: float = 0.5
    alpha: float = 2.0
    seed: int = 0

    @property
    def alignment(self) -> str:
        # without DASG there are no per-domain maps; one shared scaling instead
        return "per_domain" if self.dasg else "pooled"


def expand_training_set(train: WindowSet, task: TaskConfig, cfg: GenConfig):
    """Real windows plus DASG/ISS windows, all in raw units, and the domain stats."""
    stats = fit_all_stats(train, task.modes, cfg.alignment)
    parts = [train]
    if cfg.dasg:
        parts.append(dasg_expand(train, task, stats))
    expanded = WindowSet.concat(parts)
    if cfg.iss:
        mixed = iss_expand(to_latent(expanded, stats), cfg.iss_ratio, cfg.alpha, cfg.seed)
        if len(mixed):
            expanded = WindowSet.concat([expanded, from_latent(mixed, stats)])
    return expanded, stats


def save_stats(stats: dict, path, alignment: str = "per_domain") -> Path:
    path = Path(path)
    doc = {"alignment": alignment, "domains": {k: s.to_dict() for k, s in stats.items()}}
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path


def load_stats(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise GenerationError(f"cannot read domain statistics {path}: {exc}") from exc
    return {k: DomainStats.from_dict(v) for k, v in doc["domains"].items()}
