"""Flat key = value configuration files.

One file configures a whole training run; keys are exactly the field names
of TrainConfig, ModelConfig and LossConfig (lower_snake), '#' starts a
comment, blank lines are ignored.  attention_stages is a comma list
("3,4,5"; empty means no attention).  Unknown and duplicate keys are
rejected with the offending name.
"""

from dataclasses import dataclass, field, fields

from canet.losses import LossConfig
from canet.model import ModelConfig


@dataclass
class TrainConfig:
    shapes_dir: str = ""
    skeletons_dir: str = ""
    split_ratio: float = 0.8
    split_seed: int = 0
    input_mode: str = "repaired_distance"
    batch_size: int = 4
    total_steps: int = 1000
    lr_max: float = 0.02
    lr_min: float = 0.0
    momentum: float = 0.9
    checkpoint_path: str = "canet.ckpt"
    eval_interval: int = 100
    eval_aggregate: str = "per_image"
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def validate(self):
        if not 0.0 < self.split_ratio < 1.0:
            raise ValueError(
                f"split_ratio must lie in (0, 1), got {self.split_ratio}"
            )
        if self.input_mode not in INPUT_MODES:
            raise ValueError(
                f"input_mode must be one of {INPUT_MODES}, got {self.input_mode!r}"
            )
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be >= 1, got {self.total_steps}")
        if self.eval_interval < 1:
            raise ValueError(
                f"eval_interval must be >= 1, got {self.eval_interval}"
            )
        if self.eval_aggregate not in ("per_image", "global"):
            raise ValueError(
                f"eval_aggregate must be 'per_image' or 'global', "
                f"got {self.eval_aggregate!r}"
            )
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if not 0.0 <= self.lr_min <= self.lr_max:
            raise ValueError(
                f"need 0 <= lr_min <= lr_max, got {self.lr_min} and {self.lr_max}"
            )
        self.model.validate()
        self.loss.validate()


INPUT_MODES = ("raw_shape", "distance", "repaired_distance")

_TRAIN_FIELDS = {f.name: f.type for f in fields(TrainConfig)
                 if f.name not in ("model", "loss")}
_MODEL_FIELDS = {f.name: f.type for f in fields(ModelConfig)}
_LOSS_FIELDS = {f.name: f.type for f in fields(LossConfig)}

# flat files only work while the three namespaces stay disjoint
assert not (_TRAIN_FIELDS.keys() & _MODEL_FIELDS.keys())
assert not (_TRAIN_FIELDS.keys() & _LOSS_FIELDS.keys())
assert not (_MODEL_FIELDS.keys() & _LOSS_FIELDS.keys())


def _parse_value(key, ftype, raw):
    if key == "attention_stages":
        raw = raw.strip()
        if not raw:
            return ()
        try:
            return tuple(int(part.strip()) for part in raw.split(","))
        except ValueError:
            raise ValueError(
                f"config key {key!r}: expected a comma list of integers, "
                f"got {raw!r}"
            ) from None
    if ftype is bool:
        if raw == "true":
            return True
        if raw == "false":
            return False
        raise ValueError(
            f"config key {key!r}: expected 'true' or 'false', got {raw!r}"
        )
    if ftype is int:
        try:
            return int(raw)
        except ValueError:
            raise ValueError(
                f"config key {key!r}: expected an integer, got {raw!r}"
            ) from None
    if ftype is float:
        try:
            return float(raw)
        except ValueError:
            raise ValueError(
                f"config key {key!r}: expected a number, got {raw!r}"
            ) from None
    return raw


def parse_config(text, extra_keys=()):
    """Parse config text into (TrainConfig, extras dict for `extra_keys`)."""
    seen = set()
    train_kw, model_kw, loss_kw, extras = {}, {}, {}, {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValueError(
                f"config line {lineno}: expected 'key = value', got {line!r}"
            )
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key in seen:
            raise ValueError(f"config line {lineno}: duplicate key {key!r}")
        seen.add(key)
        if key in extra_keys:
            extras[key] = raw
        elif key in _TRAIN_FIELDS:
            train_kw[key] = _parse_value(key, _TRAIN_FIELDS[key], raw)
        elif key in _MODEL_FIELDS:
            model_kw[key] = _parse_value(key, _MODEL_FIELDS[key], raw)
        elif key in _LOSS_FIELDS:
            loss_kw[key] = _parse_value(key, _LOSS_FIELDS[key], raw)
        else:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
    cfg = TrainConfig(
        model=ModelConfig(**model_kw), loss=LossConfig(**loss_kw), **train_kw
    )
    return cfg, extras


def load_config(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise IOError(f"{path}: cannot read config ({exc})") from exc
    cfg, _ = parse_config(text)
    cfg.validate()
    return cfg


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize_config(cfg, extras=None):
    """Round-trippable text form; `extras` append as additional keys."""
    lines = []
    for f in fields(TrainConfig):
        if f.name in ("model", "loss"):
            continue
        lines.append(f"{f.name} = {_format_value(getattr(cfg, f.name))}")
    for f in fields(ModelConfig):
        lines.append(f"{f.name} = {_format_value(getattr(cfg.model, f.name))}")
    for f in fields(LossConfig):
        lines.append(f"{f.name} = {_format_value(getattr(cfg.loss, f.name))}")
    for key, value in (extras or {}).items():
        lines.append(f"{key} = {_format_value(value)}")
    return "\n".join(lines) + "\n"
