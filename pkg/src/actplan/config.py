"""Model and hardware configuration.

Configs are frozen dataclasses. JSON config files hold two objects,
``"model"`` and ``"hardware"``, whose keys are exactly the dataclass field
names below; a ``"preset"`` key inside ``"model"`` starts from one of the
built-in model shapes and lets the remaining keys override it.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

GiB = 1024**3
MiB = 1024**2

# Split of the 16 b*s*h skeletal elements of one layer into named tensors,
# in units of b*s*h elements. "input" and "attn_out" are the two tensors that
# are always offloaded; the rest are swapped token-wise.
DEFAULT_SKELETAL_UNITS: dict[str, int] = {
    "input": 2,
    "input_norm": 1,
    "q": 1,
    "k": 1,
    "v": 1,
    "attn_out": 1,
    "post_attn_norm": 1,
    "fc1_out": 4,
    "fc1_act": 4,
}

MANDATORY_TENSORS = ("input", "attn_out")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 32
    hidden: int = 4096
    ffn_hidden: int = 16384
    n_heads: int = 32
    vocab: int = 50257
    batch: int = 1
    seq_len: int = 131072
    dtype_bytes: int = 2
    tp_degree: int = 8
    sp_or_cp_degree: int = 1
    tied_embeddings: bool = True
    skeletal_units: Mapping[str, int] = field(
        default_factory=lambda: dict(DEFAULT_SKELETAL_UNITS)
    )

    def __post_init__(self):
        for name in ("n_layers", "hidden", "ffn_hidden", "n_heads", "vocab",
                     "batch", "seq_len", "dtype_bytes", "tp_degree",
                     "sp_or_cp_degree"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"{name} must be an integer >= 1, got {value!r}")
        if self.seq_len % self.sp_or_cp_degree:
            raise ConfigError("seq_len must be divisible by sp_or_cp_degree")
        if self.hidden % self.tp_degree:
            raise ConfigError("hidden must be divisible by tp_degree")
        for name in MANDATORY_TENSORS:
            if name not in self.skeletal_units:
                raise ConfigError(f"skeletal_units must contain {name!r}")
        for name, units in self.skeletal_units.items():
            if not isinstance(units, int) or units < 1:
                raise ConfigError(f"skeletal_units[{name!r}] must be a positive integer")

    @property
    def local_seq(self) -> int:
        return self.seq_len // self.sp_or_cp_degree

    @property
    def local_hidden(self) -> int:
        return self.hidden // self.tp_degree

    @property
    def n_gpus(self) -> int:
        return self.tp_degree * self.sp_or_cp_degree

    @property
    def unit_bytes(self) -> int:
        """Bytes of one b*s'*h' activation on one device."""
        return self.batch * self.local_seq * self.local_hidden * self.dtype_bytes

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["skeletal_units"] = dict(self.skeletal_units)
        return d


@dataclass(frozen=True)
class HardwareConfig:
    """Per-device hardware numbers. Defaults describe an A800 node slot."""

    pcie_bandwidth: float = 25e9
    cpu_mem: float = 256 * GiB
    gpu_mem: float = 80 * GiB
    peak_flops: float = 312e12
    efficiency: float = 0.5
    bwd_ratio: float = 2.0
    comm_per_layer: float = 0.0

    def __post_init__(self):
        for name in ("pcie_bandwidth", "cpu_mem", "gpu_mem", "peak_flops",
                     "efficiency", "bwd_ratio"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.efficiency > 1:
            raise ConfigError("efficiency must be <= 1")
        if self.comm_per_layer < 0:
            raise ConfigError("comm_per_layer must be >= 0")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


# n_layers, hidden, ffn_hidden, n_heads, vocab
MODEL_PRESETS: dict[str, tuple[int, int, int, int, int]] = {
    "7b": (32, 4096, 16384, 32, 50257),
    "13b": (40, 5120, 20480, 40, 50257),
    "30b": (48, 7168, 28672, 56, 50257),
    "65b": (80, 8192, 32768, 64, 50257),
}


def model_preset(name: str, **overrides) -> ModelConfig:
    try:
        n, h, h_ffn, heads, vocab = MODEL_PRESETS[name.lower()]
    except KeyError:
        raise ConfigError(f"unknown model preset {name!r}") from None
    base = dict(n_layers=n, hidden=h, ffn_hidden=h_ffn, n_heads=heads, vocab=vocab)
    base.update(overrides)
    return ModelConfig(**base)


def toy_model(**overrides) -> ModelConfig:
    """A tiny model whose traces plan in well under a second."""
    base = dict(n_layers=2, hidden=64, ffn_hidden=256, n_heads=4, vocab=512,
                batch=1, seq_len=256, dtype_bytes=2, tp_degree=1, sp_or_cp_degree=1)
    base.update(overrides)
    return ModelConfig(**base)


def _build(cls, data: Mapping[str, Any]):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def model_from_dict(data: Mapping[str, Any]) -> ModelConfig:
    data = dict(data)
    preset = data.pop("preset", None)
    if preset is not None:
        base = model_preset(preset)
        try:
            return replace(base, **data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
    return _build(ModelConfig, data)


def hardware_from_dict(data: Mapping[str, Any]) -> HardwareConfig:
    return _build(HardwareConfig, data)


def load_config(path: str | Path) -> tuple[ModelConfig, HardwareConfig]:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    model = model_from_dict(raw.get("model", {}))
    hardware = hardware_from_dict(raw.get("hardware", {}))
    return model, hardware


def config_to_dict(model: ModelConfig, hardware: HardwareConfig) -> dict[str, Any]:
    return {"model": model.to_dict(), "hardware": hardware.to_dict()}
