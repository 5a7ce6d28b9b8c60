"""Training configuration and the flat ``key = value`` config file format."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from ..decoder import DecoderConfig
from ..encoder import EncoderConfig
from ..model import ModelConfig
from ..shrink import ShrinkConfig


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    lr: float = 5e-5
    batch_size: int = 16
    weight_decay: float = 0.01
    warmup_steps: int = 0
    grad_clip: float = 1.0
    lambda_ed: float = 1.0
    lambda_cl: float = 1.0
    tau: float = 0.1
    no_cl: bool = False
    no_su: bool = False
    no_ed: bool = False
    seed: int = 0
    eval_every: int = 1
    # probability of hiding a teacher-forced decoder input token behind <unk>
    token_dropout: float = 0.0
    # epochs of frame-level word classification warming up the speech encoder
    pretrain_epochs: int = 0
    # learning-rate multiplier for the speech encoder in the main phase
    encoder_lr_scale: float = 1.0
    # model size
    mel_channels: int = 80
    model_dim: int = 256
    enc_layers: int = 4
    dec_layers: int = 2
    heads: int = 4
    ff_mult: int = 4
    dropout: float = 0.1
    d_att: int = 64
    shrink_layers: int = 2
    shrink_stride: int = 2
    shrink_kernel: int = 3
    retrieval_threshold: float = 0.5
    max_len: int = 64

    def __post_init__(self):
        for name in ("epochs", "batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0 or self.tau <= 0:
            raise ValueError("learning rate and temperature must be positive")

    def model_config(self, source: str = "speech") -> ModelConfig:
        enc = EncoderConfig(
            mel_channels=self.mel_channels, model_dim=self.model_dim, layers=self.enc_layers,
            heads=self.heads, ff_mult=self.ff_mult, dropout=self.dropout,
        )
        dec = DecoderConfig(
            model_dim=self.model_dim, layers=self.dec_layers, heads=self.heads,
            ff_mult=self.ff_mult, dropout=self.dropout, d_att=self.d_att,
        )
        layers = 0 if self.no_su or source == "text" else self.shrink_layers
        return ModelConfig(
            source=source,
            encoder=enc,
            shrink=ShrinkConfig(layers, self.shrink_stride, self.shrink_kernel),
            decoder=dec,
            use_dictionary=not self.no_ed and source == "speech",
            retrieval_threshold=self.retrieval_threshold,
            max_len=self.max_len,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    def with_overrides(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


# desk-scale preset used by the tests and the acceptance suite
TOY = dict(
    epochs=30, lr=2e-3, batch_size=16, warmup_steps=100, mel_channels=80, model_dim=64,
    enc_layers=2, dec_layers=2, heads=4, ff_mult=2, dropout=0.1, d_att=32, tau=0.1,
    lambda_cl=0.1, pretrain_epochs=4, encoder_lr_scale=0.1,
)


def toy_config(**overrides) -> TrainConfig:
    return TrainConfig(**{**TOY, **overrides})


_ALIASES = {
    "shrink.layers": "shrink_layers",
    "shrink.stride": "shrink_stride",
    "shrink.kernel": "shrink_kernel",
    "cl.tau": "tau",
    "cl.weight": "lambda_cl",
    "ed.weight": "lambda_ed",
    "learning_rate": "lr",
}


def _key(k: str) -> str:
    k = k.strip()
    return _ALIASES.get(k, k.replace(".", "_").replace("-", "_"))


def _coerce(name: str, value):
    types = {f.name: f.type for f in fields(TrainConfig)}
    if name not in types:
        raise KeyError(f"unknown config key {name!r}")
    t = types[name]
    if not isinstance(value, str):
        return value
    if t in (bool, "bool"):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: not a boolean: {value!r}")
    if t in (int, "int"):
        return int(value)
    if t in (float, "float"):
        return float(value)
    return value


def read_config_file(path) -> dict:
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        k, v = line.split("=", 1)
        out[_key(k)] = v.strip()
    return out


def load_config(path=None, overrides: dict | None = None, base: dict | None = None) -> TrainConfig:
    """Defaults < ``base`` < config file < ``overrides``; SPEECHEE_SEED fills a missing seed."""
    values = dict(base or {})
    if path is not None:
        values.update(read_config_file(path))
    for k, v in (overrides or {}).items():
        if v is not None:
            values[_key(k)] = v
    if "seed" not in values and os.environ.get("SPEECHEE_SEED"):
        values["seed"] = os.environ["SPEECHEE_SEED"]
    return TrainConfig(**{k: _coerce(k, v) for k, v in values.items()})
