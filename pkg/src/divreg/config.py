"""Experiment configuration: JSON-friendly parsing with field-naming
validation errors, so a bad config dies loudly before any compute."""

from __future__ import annotations

from dataclasses import dataclass, field, fields

MODEL_FAMILIES = ("ensemble", "dual_branch")

# JSON documents use "lambda"; the attribute needs a non-keyword name
_KEY_TO_ATTR = {"lambda": "lambda_balance"}
_ATTR_TO_KEY = {v: k for k, v in _KEY_TO_ATTR.items()}


class ConfigError(ValueError):
    """Invalid configuration; message names the offending field."""

    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"config field '{field_name}': {message}")


@dataclass
class ExperimentConfig:
    model_family: str
    class_count: int = 8
    branch_max: int = 3
    branch_add_epochs: int = 2
    attention_enabled: bool = True
    diversity_spatial: bool = True
    diversity_channel: bool = True
    diversity_weight: float = 1.0
    gamma: float | None = None  # None means auto (1 / pooled length)
    lambda_balance: float = 0.6
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    dataset_path: str | None = None
    output_dir: str = "out"
    diversity_tap: str = "last"  # "last" or "all" attended layers
    pool_op: str = "mean"  # "mean" or "max" diversity pooling
    normalize_features: bool = False  # unit-norm pooled rows before similarity
    source: dict = field(default_factory=dict, repr=False)  # raw config echo

    def __post_init__(self):
        if self.model_family not in MODEL_FAMILIES:
            raise ConfigError("model_family",
                              f"must be one of {list(MODEL_FAMILIES)}, got {self.model_family!r}")
        if self.class_count < 2:
            raise ConfigError("class_count", f"must be >= 2, got {self.class_count}")
        if self.branch_max < 1:
            raise ConfigError("branch_max", f"must be >= 1, got {self.branch_max}")
        if self.branch_add_epochs < 1:
            raise ConfigError("branch_add_epochs",
                              f"must be >= 1, got {self.branch_add_epochs}")
        if not self.diversity_weight >= 0:
            raise ConfigError("diversity_weight",
                              f"must be non-negative, got {self.diversity_weight}")
        if self.gamma is not None and not self.gamma > 0:
            raise ConfigError("gamma", f"must be positive or \"auto\", got {self.gamma}")
        if not 0.0 <= self.lambda_balance <= 1.0:
            raise ConfigError("lambda", f"must be in [0, 1], got {self.lambda_balance}")
        if self.epochs < 1:
            raise ConfigError("epochs", f"must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError("batch_size", f"must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate",
                              f"must be positive, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum", f"must be in [0, 1), got {self.momentum}")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed", f"must be an unsigned 64-bit integer, got {self.seed}")
        if self.diversity_tap not in ("last", "all"):
            raise ConfigError("diversity_tap",
                              f"must be 'last' or 'all', got {self.diversity_tap!r}")
        if self.pool_op not in ("mean", "max"):
            raise ConfigError("pool_op", f"must be 'mean' or 'max', got {self.pool_op!r}")
        if (self.model_family == "ensemble" and not self.attention_enabled
                and (self.diversity_spatial or self.diversity_channel)):
            raise ConfigError("attention_enabled",
                              "ensemble diversity taps attention maps; enable attention "
                              "or turn both diversity switches off")

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        """Parse a JSON document; rejects unknown fields and combinations
        that contradict the model family."""
        attr_names = {f.name for f in fields(cls)} - {"source"}
        known_keys = {_ATTR_TO_KEY.get(a, a) for a in attr_names}
        unknown = set(doc) - known_keys
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown field")
        if "model_family" not in doc:
            raise ConfigError("model_family", "required")
        family = doc["model_family"]
        if family == "ensemble" and "lambda" in doc:
            raise ConfigError("lambda", "only meaningful for model_family dual_branch")
        if family == "dual_branch":
            for key in ("branch_max", "branch_add_epochs"):
                if key in doc:
                    raise ConfigError(key, "only meaningful for model_family ensemble")
        kwargs = {}
        for key, value in doc.items():
            attr = _KEY_TO_ATTR.get(key, key)
            if key == "gamma":
                if value == "auto":
                    value = None
                elif not isinstance(value, (int, float)) or isinstance(value, bool):
                    raise ConfigError("gamma", f"must be a number or \"auto\", got {value!r}")
            kwargs[attr] = value
        cfg = cls(**kwargs)
        cfg.source = dict(doc)
        return cfg

    def to_dict(self) -> dict:
        """Echo of the config, defaults filled in; omits keys the model
        family rejects so the echo always re-parses."""
        if self.model_family == "ensemble":
            skip = {"lambda_balance"}
        else:
            skip = {"branch_max", "branch_add_epochs"}
        out = {}
        for f in fields(type(self)):
            if f.name == "source" or f.name in skip:
                continue
            key = _ATTR_TO_KEY.get(f.name, f.name)
            value = getattr(self, f.name)
            if f.name == "gamma" and value is None:
                value = "auto"
            out[key] = value
        return out
