"""TSA-SAN forward model: MSDC -> SAIN -> GRU -> TSAM -> classifier.

Inputs are batches of standardized windows with shape (N, v, T). Channel
bookkeeping is v -> 4v (multi-scale depthwise convs) -> 4v (self-adaptive
instance norm) -> 2v (GRU) -> 2v (attention-weighted time sum) -> classes.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffcore import (GRUParams, Tensor, affine, concat, cross_entropy, depthwise_conv1d,
                       gru_forward, instance_stats, mean_axis, relu, softmax, sqrt, std_axis)
from .errors import ConfigurationError, DatasetError, DimensionError, InferenceError

SCHEMA_VERSION = 1
SAIN_MODES = ("adaptive", "plain_in", "none")


@dataclass(frozen=True)
class ArchConfig:
    v: int
    n_classes: int = 10
    T: int = 64
    kernel_sizes: tuple = (3, 5, 7, 9)
    gru_hidden: int | None = None
    tsam_reduction: int = 16
    sain_epsilon: float = 1e-5
    sain: str = "adaptive"
    tsam: bool = True

    def __post_init__(self):
        if self.gru_hidden is None:
            object.__setattr__(self, "gru_hidden", 2 * self.v)
        object.__setattr__(self, "kernel_sizes", tuple(self.kernel_sizes))
        if self.v < 1 or self.T < 1 or self.n_classes < 2 or self.gru_hidden < 1:
            raise ConfigurationError(f"invalid architecture sizes: {self}")
        if any(k % 2 == 0 or k < 1 for k in self.kernel_sizes):
            raise ConfigurationError(f"kernel sizes must be odd, got {self.kernel_sizes}")
        if self.sain not in SAIN_MODES:
            raise ConfigurationError(f"sain must be one of {SAIN_MODES}, got {self.sain!r}")

    @property
    def msdc_channels(self) -> int:
        return self.v * len(self.kernel_sizes)

    def reduced(self, n: int) -> int:
        return max(1, n // self.tsam_reduction)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["kernel_sizes"] = list(self.kernel_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        return cls(**d)


def _finite(t: Tensor, stage: str) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise InferenceError(f"non-finite activation after {stage}")
    return t


class TSASAN:
    """Parameters live in ``self.params`` (ordered name -> Tensor)."""

    def __init__(self, arch: ArchConfig, seed: int = 0):
        self.arch = arch
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        self._build(rng)

    # -- parameters -------------------------------------------------------------

    def _weight(self, name, shape, fan_in, rng):
        s = 1.0 / np.sqrt(fan_in)
        self.params[name] = Tensor(rng.uniform(-s, s, size=shape), requires_grad=True)

    def _const(self, name, shape, value=0.0):
        self.params[name] = Tensor(np.full(shape, value, dtype=np.float64), requires_grad=True)

    def _fc(self, prefix, d_in, d_out, rng):
        self._weight(f"{prefix}.weight", (d_in, d_out), d_in, rng)
        self._const(f"{prefix}.bias", (d_out,))

    def _build(self, rng):
        a = self.arch
        v, C, H, T = a.v, a.msdc_channels, a.gru_hidden, a.T
        for k in a.kernel_sizes:
            self._weight(f"msdc.k{k}.kernel", (v, k), k, rng)
            self._const(f"msdc.k{k}.bias", (v,))
        if a.sain == "adaptive":
            for branch in ("gamma", "beta"):
                self._fc(f"sain.{branch}.fc1", C, C, rng)
                self._fc(f"sain.{branch}.fc2", C, C, rng)
        elif a.sain == "plain_in":
            self._const("sain.in.weight", (C,), 1.0)
            self._const("sain.in.bias", (C,))
        self._weight("gru.weight_ih", (C, 3 * H), C, rng)
        self._weight("gru.weight_hh", (H, 3 * H), H, rng)
        self._const("gru.bias_ih", (3 * H,))
        self._const("gru.bias_hh", (3 * H,))
        if a.tsam:
            for branch, n in (("temporal_avg", T), ("temporal_std", T),
                              ("spatial_avg", H), ("spatial_std", H)):
                self._fc(f"tsam.{branch}.fc1", n, a.reduced(n), rng)
                self._fc(f"tsam.{branch}.fc2", a.reduced(n), n, rng)
            self._fc("tsam.conv_t", 2, 1, rng)
            self._fc("tsam.conv_s", 2, 1, rng)
        self._fc("classifier", H, a.n_classes, rng)

    def expected_shapes(self) -> dict:
        return {name: p.shape for name, p in self.params.items()}

    def _p(self, name):
        return self.params[name]

    def _mlp(self, x, prefix):
        h = relu(affine(x, self._p(f"{prefix}.fc1.weight"), self._p(f"{prefix}.fc1.bias")))
        return affine(h, self._p(f"{prefix}.fc2.weight"), self._p(f"{prefix}.fc2.bias"))

    # -- stages -----------------------------------------------------------------

    def msdc(self, x) -> Tensor:
        branches = [depthwise_conv1d(x, self._p(f"msdc.k{k}.kernel"), self._p(f"msdc.k{k}.bias"))
                    for k in self.arch.kernel_sizes]
        return concat(branches, axis=-2)

    def sain(self, f) -> Tensor:
        mode = self.arch.sain
        if mode == "none":
            return f
        mu, sd = instance_stats(f)
        denom = sqrt(sd * sd + self.arch.sain_epsilon)
        normed = (f - mu.unsqueeze(-1)) / denom.unsqueeze(-1)
        if mode == "plain_in":
            w = self._p("sain.in.weight").unsqueeze(-1)
            b = self._p("sain.in.bias").unsqueeze(-1)
            return normed * w + b
        gamma = self._mlp(mu, "sain.gamma")
        beta = self._mlp(sd, "sain.beta")
        return normed * gamma.unsqueeze(-1) + beta.unsqueeze(-1)

    def gru(self, f) -> Tensor:
        return gru_forward(f, GRUParams(self._p("gru.weight_ih"), self._p("gru.weight_hh"),
                                        self._p("gru.bias_ih"), self._p("gru.bias_hh")))

    def tsam(self, f) -> tuple[Tensor, Tensor | None]:
        """Return (fused features (N, C), attention map (N, C, T) or None)."""
        if not self.arch.tsam:
            return f.sum(axis=-1), None
        c_ax, t_ax = f.ndim - 2, f.ndim - 1
        a_tap = self._mlp(mean_axis(f, c_ax), "tsam.temporal_avg")
        a_tsd = self._mlp(std_axis(f, c_ax), "tsam.temporal_std")
        a_sap = self._mlp(mean_axis(f, t_ax), "tsam.spatial_avg")
        a_ssd = self._mlp(std_axis(f, t_ax), "tsam.spatial_std")
        a_t = self._fuse(a_tap, a_tsd, "tsam.conv_t")
        a_s = self._fuse(a_sap, a_ssd, "tsam.conv_s")
        a_ts = a_s.unsqueeze(-1) * a_t.unsqueeze(-2)
        return (a_ts * f).sum(axis=-1), a_ts

    def _fuse(self, steady, variability, prefix):
        # kernel-1 convolution over the two stacked maps
        stacked = concat([steady.unsqueeze(-1), variability.unsqueeze(-1)], axis=-1)
        out = affine(stacked, self._p(f"{prefix}.weight"), self._p(f"{prefix}.bias"))
        return out.reshape(out.shape[:-1])

    def logits(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        a = self.arch
        if x.ndim != 3 or x.shape[1:] != (a.v, a.T):
            raise DimensionError(f"expected input (N, {a.v}, {a.T}), got {x.shape}")
        f = _finite(self.msdc(x), "msdc")
        f = _finite(self.sain(f), "sain")
        f = _finite(self.gru(f), "gru")
        fused, _ = self.tsam(f)
        fused = _finite(fused, "tsam")
        return _finite(affine(fused, self._p("classifier.weight"), self._p("classifier.bias")),
                       "classifier")

    def forward(self, x) -> Tensor:
        return softmax(self.logits(x))

    __call__ = forward

    def predict(self, x, batch_size: int = 1024) -> np.ndarray:
        """Class probabilities for an array of windows, evaluated in batches."""
        x = np.asarray(x, dtype=np.float64)
        out = [self.forward(x[i:i + batch_size]).data for i in range(0, x.shape[0], batch_size)]
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.arch.n_classes))

    # -- persistence --------------------------------------------------------------

    def state_dict(self) -> dict:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, state: dict) -> None:
        expected = self.expected_shapes()
        missing = set(expected) - set(state)
        extra = set(state) - set(expected)
        if missing or extra:
            raise DatasetError(f"checkpoint parameters mismatch: missing {sorted(missing)}, "
                               f"unexpected {sorted(extra)}")
        for name, arr in state.items():
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != expected[name]:
                raise DatasetError(f"parameter {name!r} has shape {arr.shape}, expected {expected[name]}")
            self.params[name].data[...] = arr


def loss(probabilities: Tensor, labels) -> Tensor:
    return cross_entropy(probabilities, labels)


@dataclass
class ModelCheckpoint:
    arch: ArchConfig
    params: dict
    manifest: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    @classmethod
    def from_model(cls, model: TSASAN, manifest: dict | None = None) -> "ModelCheckpoint":
        return cls(model.arch, model.state_dict(), dict(manifest or {}))

    def to_model(self) -> TSASAN:
        model = TSASAN(self.arch, seed=0)
        model.load_state_dict(self.params)
        return model

    def to_json(self) -> str:
        doc = {
            "schema_version": self.schema_version,
            "arch": self.arch.to_dict(),
            "params": {name: {"shape": list(arr.shape), "values": arr.reshape(-1).tolist()}
                       for name, arr in self.params.items()},
            "manifest": self.manifest,
        }
        return json.dumps(doc, indent=1, sort_keys=False) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_json())
        return path

    @classmethod
    def load(cls, path) -> "ModelCheckpoint":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, ValueError) as exc:
            raise DatasetError(f"cannot read checkpoint {path}: {exc}") from exc
        params = {name: np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
                  for name, entry in doc["params"].items()}
        return cls(ArchConfig.from_dict(doc["arch"]), params, doc.get("manifest", {}),
                   doc.get("schema_version", SCHEMA_VERSION))
