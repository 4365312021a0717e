"""Run configuration: one JSON document validated before any work starts.

Example::

    {
      "arch": "mnist_cnn",
      "data": {"kind": "idx", "train_images": "data/mnist/train-images-idx3-ubyte", ...},
      "train": {"max_epochs": 100, "patience": 10},
      "kernel": {"tau1": 1.0, "tau2": 1.0},
      "bundle": "runs/ctx",
      "seeds": [0, 1, 2],
      "ood": ["noise"],
      "out": "runs/mnist"
    }

Every key is optional; unknown keys anywhere are rejected.
"""

import json
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .context import ServiceEndpoint
from .data import SynthSpec, load_idx, subsample, synth_dataset, uniform_noise
from .errors import ConfigError
from .nn import PRESET_RATES
from .prior import KernelConfig
from .rng import derive_seed
from .trainer import SearchSpace, TrainConfig

CONTEXT_MODES = ("bundle", "train_batch", "none")
DEFAULT_STUB = "stub://hash"


def _check_keys(d, allowed, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be a JSON object")
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")


@dataclass(frozen=True)
class DataConfig:
    kind: str = "synth"
    name: str = ""
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    n_classes: int = 10
    subsample: float = 1.0
    synth: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("idx", "synth"):
            raise ConfigError(f"data.kind must be 'idx' or 'synth', got {self.kind!r}")
        if self.kind == "idx":
            for k in ("train_images", "train_labels", "test_images", "test_labels"):
                if not getattr(self, k):
                    raise ConfigError(f"data.{k} is required for IDX data")
        else:
            SynthSpec.from_dict(self.synth)
        if not 0.0 < self.subsample <= 1.0:
            raise ConfigError(f"data.subsample must lie in (0, 1], got {self.subsample}")

    @property
    def synth_spec(self):
        return SynthSpec.from_dict(self.synth)


@dataclass(frozen=True)
class GenerationConfig:
    requirements: str = "Generate variations that keep the visual style of the reference images."
    descriptors: tuple = ()
    n_total: int = 256
    n_references: int = 8

    def __post_init__(self):
        if self.n_total < 1 or self.n_references < 1:
            raise ConfigError("generation.n_total and generation.n_references must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    arch: str = "desk_mlp"
    dropout_rate: float = None
    hidden: int = None
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    kernel: KernelConfig = field(default_factory=KernelConfig)
    context: str = "bundle"
    bundle: str = None
    providers: dict = field(default_factory=dict)
    random_embedder: str = "stub://randproj"
    generation: GenerationConfig = field(default_factory=GenerationConfig)
    search: dict = field(default_factory=dict)
    S_eval: int = 32
    seeds: tuple = (0,)
    ood: tuple = ("noise",)
    n_ood: int = 1000
    out: str = "runs/default"
    report_format: str = "json"
    figures: bool = True

    def __post_init__(self):
        if self.arch not in PRESET_RATES:
            raise ConfigError(f"unknown arch {self.arch!r}; choose from {sorted(PRESET_RATES)}")
        if self.dropout_rate is not None and not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.context not in CONTEXT_MODES:
            raise ConfigError(f"context must be one of {CONTEXT_MODES}, got {self.context!r}")
        _check_keys(self.providers, ("summarizer", "generator", "embedder"), "providers")
        for v in self.providers.values():
            ServiceEndpoint.from_dict(v)
        ServiceEndpoint.from_dict(self.random_embedder)
        _check_keys(self.search, ("trials", "workers", "weight_decay", "tau1", "tau2"), "search")
        self.search_space()
        if self.S_eval < 1:
            raise ConfigError(f"S_eval must be >= 1, got {self.S_eval}")
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be a non-empty list of distinct integers")
        if self.n_ood < 1:
            raise ConfigError(f"n_ood must be >= 1, got {self.n_ood}")
        if self.report_format not in ("json", "csv"):
            raise ConfigError(f"report_format must be json or csv, got {self.report_format!r}")
        for name in self.ood:
            if name not in ("noise", "synth") and not name.startswith("idx:"):
                raise ConfigError(f"unknown OOD set {name!r}; use noise, synth or idx:<images>:<labels>")
            if name == "synth" and self.data.kind != "synth":
                raise ConfigError("the 'synth' OOD set needs synthetic data")

    # -- (de)serialisation

    @classmethod
    def from_dict(cls, d):
        _check_keys(d, [f.name for f in fields(cls)], "config")
        d = dict(d)
        if "data" in d:
            _check_keys(d["data"], [f.name for f in fields(DataConfig)], "data")
            d["data"] = DataConfig(**d["data"])
        if "train" in d:
            d["train"] = TrainConfig.from_dict(d["train"])
        if "kernel" in d:
            _check_keys(d["kernel"], [f.name for f in fields(KernelConfig)], "kernel")
            d["kernel"] = KernelConfig(**d["kernel"])
        if "generation" in d:
            _check_keys(d["generation"], [f.name for f in fields(GenerationConfig)], "generation")
            g = dict(d["generation"])
            g["descriptors"] = tuple(g.get("descriptors", ()))
            d["generation"] = GenerationConfig(**g)
        for k in ("seeds", "ood"):
            if k in d:
                d[k] = tuple(d[k])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self):
        d = asdict(self)
        for k in ("seeds", "ood"):
            d[k] = list(d[k])
        d["generation"]["descriptors"] = list(d["generation"]["descriptors"])
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(doc)

    def override(self, assignments):
        """Apply ``key.sub=value`` strings (values parsed as JSON when possible)."""
        d = self.to_dict()
        for a in assignments:
            if "=" not in a:
                raise ConfigError(f"override {a!r} is not of the form key=value")
            key, raw = a.split("=", 1)
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            node, parts = d, key.split(".")
            for p in parts[:-1]:
                if not isinstance(node.get(p), dict):
                    raise ConfigError(f"override {key!r}: {p!r} is not a section")
                node = node[p]
            node[parts[-1]] = value
        return RunConfig.from_dict(d)

    # -- derived objects

    def endpoint(self, role):
        return ServiceEndpoint.from_dict(self.providers.get(role, DEFAULT_STUB))

    def search_space(self):
        kw = {k: (tuple(float(x) for x in v) if k != "trials" else int(v))
              for k, v in self.search.items() if k != "workers"}
        return SearchSpace(**kw)

    def net_spec(self, seed, input_shape, n_classes):
        return {"preset": self.arch, "n_classes": n_classes, "seed": seed, "input_shape": tuple(input_shape),
                "rate": self.dropout_rate, "hidden": self.hidden}

    def train_config(self, seed):
        return replace(self.train, seed=seed)


# ---------------------------------------------------------------------------
# datasets


def load_datasets(cfg, seed):
    """(train, test, synth_ood_or_None) for run ``seed``.

    Synthetic data are redrawn per seed; IDX data are fixed files whose
    optional subsample is drawn per seed.
    """
    dc = cfg.data
    if dc.kind == "synth":
        spec = dc.synth_spec
        spec = replace(spec, seed=derive_seed(spec.seed, "run", str(seed)) % (2 ** 31))
        train, ood = synth_dataset(spec)
        test, _ = synth_dataset(replace(spec, seed=derive_seed(spec.seed, "test") % (2 ** 31)))
        name = dc.name or f"synth-{spec.kind}"
        train.name = test.name = name
        return train, test, ood
    name = dc.name or "idx"
    train = load_idx(dc.train_images, dc.train_labels, name, dc.n_classes)
    test = load_idx(dc.test_images, dc.test_labels, name, dc.n_classes)
    if dc.subsample < 1.0:
        train = subsample(train, dc.subsample, seed)
    return train, test, None


def ood_sets(cfg, names, test, synth_ood, seed):
    out = []
    for name in names:
        if name == "noise":
            out.append(uniform_noise(cfg.n_ood, test.input_shape, test.n_classes, derive_seed(seed, "ood") % (2 ** 31)))
        elif name == "synth":
            if synth_ood is None:
                raise ConfigError("the 'synth' OOD set needs synthetic data")
            out.append(synth_ood)
        elif name.startswith("idx:"):
            parts = name.split(":")
            if len(parts) != 3:
                raise ConfigError(f"OOD spec {name!r} must be idx:<images>:<labels>")
            ds = load_idx(parts[1], parts[2], name=parts[1].rsplit("/", 1)[-1])
            ds.n_classes = test.n_classes
            if ds.input_shape != test.input_shape:
                raise ConfigError(f"OOD set {name!r} has shape {ds.input_shape}, expected {test.input_shape}")
            out.append(ds)
        else:
            raise ConfigError(f"unknown OOD set {name!r}")
    return out


def reference_images(ds, n):
    """First ``n`` images in class-round-robin order (one per class first)."""
    order = []
    per_class = [np.flatnonzero(ds.labels == c) for c in range(ds.n_classes)]
    depth = 0
    while len(order) < min(n, len(ds)):
        for idx in per_class:
            if depth < len(idx) and len(order) < n:
                order.append(idx[depth])
        depth += 1
    return ds.images[np.asarray(order)]
