"""Run configuration: defaults, validation, and the key=value file format."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError


@dataclass
class TrainConfig:
    # model dims
    c: int = 64
    n_layers: int = 3
    n_heads: int = 4
    s: int = 16
    max_len: int = 16
    # visual dictionary
    k: int = 128
    gamma: float = 0.99
    # objectives
    m_idx: int = 1
    mlm_p: float = 0.15
    # optimizers (encoder on SGD, everything else on AdamW)
    lr_encoder: float = 1e-2
    wd_encoder: float = 5e-4
    lr_transformer: float = 1e-4
    wd_transformer: float = 1e-2
    # schedule
    batch_images: int = 8
    epochs: int = 30
    decay_epochs: tuple[int, ...] = (20, 26)
    freeze_epochs: int = 2
    # reproducibility and io
    seed: int = 0
    dtype: str = "f32"
    use_vd: bool = True
    data_dir: str = ""
    out_dir: str = ""
    # retrieval fine-tuning
    ft_epochs: int = 10
    ft_halve_epochs: tuple[int, ...] = (2, 4, 6)
    ft_batch_pairs: int = 8
    ft_max_pairs: int = 1800
    # bench
    bench_height: int = 64
    bench_width: int = 64
    bench_runs: int = 20

    def validate(self) -> "TrainConfig":
        checks = [
            (self.c > 0 and self.c % 4 == 0, "c must be positive and divisible by 4"),
            (self.c % self.n_heads == 0, "c must be divisible by n_heads"),
            (self.n_layers > 0 and self.n_heads > 0, "layer and head counts must be positive"),
            (self.max_len >= 3, "max_len must be >= 3"),
            (self.k >= 2, "k must be >= 2"),
            (0.0 <= self.gamma <= 1.0, "gamma must lie in [0, 1]"),
            (self.m_idx >= 1, "m_idx must be >= 1"),
            (0.0 <= self.mlm_p <= 1.0, "mlm_p must lie in [0, 1]"),
            (
                min(self.lr_encoder, self.wd_encoder, self.lr_transformer, self.wd_transformer) > 0,
                "learning rates and weight decays must be positive",
            ),
            (self.batch_images >= 1, "batch_images must be >= 1"),
            (self.epochs >= 1, "epochs must be >= 1"),
            (
                all(a < b for a, b in zip(self.decay_epochs, self.decay_epochs[1:]))
                and all(0 < e < self.epochs for e in self.decay_epochs),
                "decay_epochs must be strictly increasing and < epochs",
            ),
            (0 <= self.freeze_epochs < self.epochs, "freeze_epochs must be < epochs"),
            (self.dtype in ("f32", "f64"), "dtype must be f32 or f64"),
            (self.ft_batch_pairs >= 2, "ft_batch_pairs must be >= 2"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        return self

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"


def paper_scale_config() -> TrainConfig:
    """The full-scale recipe, retained for documentation and the bench math."""
    return TrainConfig(
        c=768,
        n_layers=12,
        n_heads=12,
        s=64,
        k=2048,
        batch_images=1024,  # 4096 pairs
        epochs=40,
        decay_epochs=(25, 35),
        freeze_epochs=10,
        ft_batch_pairs=24,
        ft_epochs=20,
        ft_halve_epochs=(3, 5, 9, 13),
        bench_height=600,
        bench_width=1000,
    )


def _parse_value(name: str, raw: str, current):
    if isinstance(current, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    if isinstance(current, tuple):
        return tuple(int(v.strip()) for v in raw.split(",") if v.strip())
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    return raw


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Line-oriented "key = value" with '#' comments; unknown keys rejected."""
    cfg = base or TrainConfig()
    known = {f.name for f in fields(cfg)}
    updates = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key = key.strip()
        raw = raw.strip()
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        updates[key] = _parse_value(key, raw, getattr(cfg, key))
    return replace(cfg, **updates).validate()


def load_config(path: Path, base: TrainConfig | None = None) -> TrainConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"), base)
