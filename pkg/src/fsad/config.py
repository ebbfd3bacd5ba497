"""Flat key=value run configuration with a typed schema and a content hash.

The file format is one `section.key = value` assignment per line, with `#`
comments and blank lines ignored. Every key has a documented default below;
unknown keys and duplicate assignments are hard errors so configs stay
diff-friendly and typo-proof. The effective (fully merged) config can be
rendered back to canonical text, and its sha256 hash excludes the output
directory so relocating results does not change run identity.
"""

from __future__ import annotations

import hashlib

from .backbone import BackboneSpec
from .clsa import STRATEGIES
from .errors import ConfigError
from .synthdata import DatasetSpec
from .training import TrainConfig

OUT_KEY = "run.out"


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_ints(raw: str) -> tuple[int, ...]:
    parts = [p.strip() for p in raw.split(",") if p.strip()]
    if not parts:
        raise ValueError("empty integer list")
    return tuple(int(p) for p in parts)


_PARSERS = {
    "int": int,
    "float": float,
    "bool": _parse_bool,
    "str": lambda raw: raw.strip(),
    "ints": _parse_ints,
}

# key -> (type name, default). The authoritative list of every config key.
SCHEMA: dict[str, tuple[str, object]] = {
    # frozen encoder pair
    "backbone.d": ("int", 32),
    "backbone.vision_layers": ("int", 8),
    "backbone.text_layers": ("int", 4),
    "backbone.visual_taps": ("ints", (2, 4, 6, 8)),
    "backbone.text_taps": ("ints", (1, 2, 3, 4)),
    "backbone.patch_grid": ("ints", (4, 4)),
    "backbone.heads": ("int", 4),
    "backbone.seed": ("int", 0),
    # synthetic corpus
    "data.seed": ("int", 0),
    "data.height": ("int", 32),
    "data.width": ("int", 32),
    "data.freq_min": ("float", 2.0),
    "data.freq_max": ("float", 4.0),
    "data.noise_std": ("float", 0.05),
    "data.blob_radius_min": ("float", 4.0),
    "data.blob_radius_max": ("float", 8.0),
    "data.contrast_shift": ("float", 0.3),
    "data.anomaly_freq_factor": ("float", 2.0),
    "data.n_normal": ("int", 200),
    "data.n_abnormal": ("int", 200),
    # episode protocol
    "episode.k": ("int", 4),
    "episode.query_per_class": ("int", 50),
    "episode.count": ("int", 20),
    "episode.seed": ("int", 0),
    # learnable stack
    "model.seed": ("int", 1000),
    "adapt.prompt_len": ("int", 8),
    "adapt.reduction": ("int", 4),
    "adapt.alpha_init": ("float", 0.1),
    "clsa.strategy": ("str", "seq"),
    "clsa.heads": ("int", 4),
    "clsa.gate_init": ("float", 0.0),
    "clsa.gates_learnable": ("bool", True),
    # dual-branch scoring
    "infer.lam": ("float", 0.5),
    "infer.eps": ("float", 1e-8),
    # episode optimization
    "train.epochs": ("int", 50),
    "train.batch_size": ("int", 16),
    "train.lr_fast": ("float", 1e-4),
    "train.lr_slow": ("float", 1e-5),
    "train.weight_decay": ("float", 0.01),
    "train.beta1": ("float", 0.9),
    "train.beta2": ("float", 0.999),
    "train.eps": ("float", 1e-8),
    # artifacts
    "run.out": ("str", "out"),
}


def defaults() -> dict[str, object]:
    return {key: default for key, (_, default) in SCHEMA.items()}


def parse_assignment(line: str, where: str) -> tuple[str, object]:
    """One `key = value` assignment, typed against the schema."""
    if "=" not in line:
        raise ConfigError(f"{where}: expected key=value, got {line!r}")
    key, raw = line.split("=", 1)
    key = key.strip()
    if key not in SCHEMA:
        raise ConfigError(f"{where}: unknown config key {key!r}")
    kind, _ = SCHEMA[key]
    try:
        value = _PARSERS[kind](raw.strip())
    except ValueError as exc:
        raise ConfigError(f"{where}: bad value for {key}: {exc}") from exc
    return key, value


def parse_config_text(text: str, source: str = "<config>") -> dict[str, object]:
    """Assignments from one config document; duplicates are errors."""
    seen: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, value = parse_assignment(stripped, f"{source}:{lineno}")
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        seen[key] = value
    return seen


def _format_value(kind: str, value) -> str:
    if kind == "ints":
        return ",".join(str(v) for v in value)
    if kind == "bool":
        return "true" if value else "false"
    return repr(value) if kind == "float" else str(value)


def effective_text(values: dict[str, object]) -> str:
    """Canonical rendering of a fully merged config, one key per line."""
    lines = [f"{key} = {_format_value(SCHEMA[key][0], values[key])}"
             for key in sorted(SCHEMA)]
    return "\n".join(lines) + "\n"


def config_hash(values: dict[str, object]) -> str:
    """sha256 of the canonical text, ignoring where outputs are written."""
    lines = [f"{key} = {_format_value(SCHEMA[key][0], values[key])}"
             for key in sorted(SCHEMA) if key != OUT_KEY]
    return hashlib.sha256("\n".join(lines).encode()).hexdigest()


class RunConfig:
    """Fully merged, validated view over the flat key space."""

    def __init__(self, values: dict[str, object]):
        merged = defaults()
        for key, value in values.items():
            if key not in SCHEMA:
                raise ConfigError(f"unknown config key {key!r}")
            merged[key] = value
        self.values = merged
        self._validate()

    def __getitem__(self, key: str):
        if key not in self.values:
            raise ConfigError(f"unknown config key {key!r}")
        return self.values[key]

    def _validate(self) -> None:
        self.backbone_spec()  # spec constructors own the structural checks
        self.dataset_spec()
        self.train_config()
        if self["clsa.strategy"] not in STRATEGIES:
            raise ConfigError(f"clsa.strategy must be one of {STRATEGIES}, "
                              f"got {self['clsa.strategy']!r}")
        if not 0.0 <= self["infer.lam"] <= 1.0:
            raise ConfigError(f"infer.lam must lie in [0, 1], got {self['infer.lam']}")
        if self["infer.eps"] <= 0:
            raise ConfigError(f"infer.eps must be positive, got {self['infer.eps']}")
        for key in ("episode.k", "episode.query_per_class", "episode.count"):
            if self[key] < 1:
                raise ConfigError(f"{key} must be >= 1, got {self[key]}")
        if self["adapt.prompt_len"] < 0:
            raise ConfigError("adapt.prompt_len must be >= 0")

    def backbone_spec(self) -> BackboneSpec:
        grid = self["backbone.patch_grid"]
        if len(grid) != 2:
            raise ConfigError(f"backbone.patch_grid needs two entries, got {grid}")
        return BackboneSpec(
            d=self["backbone.d"],
            vision_layers=self["backbone.vision_layers"],
            text_layers=self["backbone.text_layers"],
            selected_visual=self["backbone.visual_taps"],
            selected_text=self["backbone.text_taps"],
            patch_grid=(grid[0], grid[1]),
            heads=self["backbone.heads"],
            seed=self["backbone.seed"],
        )

    def dataset_spec(self) -> DatasetSpec:
        return DatasetSpec(
            seed=self["data.seed"],
            height=self["data.height"],
            width=self["data.width"],
            freq_min=self["data.freq_min"],
            freq_max=self["data.freq_max"],
            noise_std=self["data.noise_std"],
            blob_radius_min=self["data.blob_radius_min"],
            blob_radius_max=self["data.blob_radius_max"],
            contrast_shift=self["data.contrast_shift"],
            anomaly_freq_factor=self["data.anomaly_freq_factor"],
            n_normal=self["data.n_normal"],
            n_abnormal=self["data.n_abnormal"],
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self["train.epochs"],
            batch_size=self["train.batch_size"],
            lr_fast=self["train.lr_fast"],
            lr_slow=self["train.lr_slow"],
            weight_decay=self["train.weight_decay"],
            beta1=self["train.beta1"],
            beta2=self["train.beta2"],
            eps=self["train.eps"],
        )

    def text(self) -> str:
        return effective_text(self.values)

    def hash(self) -> str:
        return config_hash(self.values)


def load_config(path: str | None = None,
                overrides: list[str] | None = None) -> RunConfig:
    """Defaults, then the file (if any), then `key=value` override strings."""
    values: dict[str, object] = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        values.update(parse_config_text(text, source=path))
    for item in overrides or []:
        key, value = parse_assignment(item, "override")
        values[key] = value
    return RunConfig(values)
