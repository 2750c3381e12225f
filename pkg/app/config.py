import hashlib
import logging
import os
from dataclasses import asdict, dataclass, fields, replace

from dotenv import load_dotenv

from tkan.errors import ContractError

load_dotenv()

logger = logging.getLogger(__name__)

try:
    SEED = int(os.environ.get("TKAN_SEED", "0"))
except ValueError:
    SEED = 0
OUTPUT_DIR = os.environ.get("TKAN_OUTPUT_DIR") or "runs"
EMBED_DB_PATH = os.environ.get("TKAN_EMBED_DB_PATH") or (
    "/tmp/embeddings.db" if os.environ.get("TKAN_TMP_ONLY") else "embeddings.db"
)
LOG_LEVEL = (os.environ.get("TKAN_LOG_LEVEL") or "INFO").upper()

HEAD_CHOICES = ("tkan", "lstm", "transformer")
INPUT_MODES = ("frames", "features")
RHO_CHOICES = ("identity", "silu")
TRUE_WORDS = {"1", "true", "yes", "on"}
FALSE_WORDS = {"0", "false", "no", "off"}


@dataclass(frozen=True)
class TrainConfig:
    head: str = "tkan"
    lr: float = 1e-4
    batch_size: int = 8
    dropout: float = 0.3
    clip_length: int = 50
    width: int = 256
    sub_width: int = 0
    sublayers: int = 2
    seed: int = SEED
    max_epochs: int = 100
    stop_patience: int = 10
    min_epochs: int = 0
    plateau_patience: int = 5
    lr_factor: float = 0.5
    min_lr: float = 1e-7
    plateau_threshold: float = 1e-4
    val_fraction: float = 0.1
    grid_min: float = -1.0
    grid_max: float = 1.0
    grid_size: int = 5
    spline_degree: int = 3
    rho: str = "identity"
    forget_bias: float = 1.0
    input_mode: str = "frames"
    frame_size: int = 64
    encoder_channels: tuple = (32, 64, 128, 256)
    lstm_widths: tuple = (256, 128)
    transformer_heads: int = 4
    transformer_ff: int = 1024
    transformer_layers: int = 2
    norm_first: bool = True
    track_auc: bool = False

    def __post_init__(self):
        validate(self)

    @property
    def effective_sub_width(self):
        return self.sub_width or max(1, self.width // 2)

    def to_dict(self):
        data = asdict(self)
        data["encoder_channels"] = list(self.encoder_channels)
        data["lstm_widths"] = list(self.lstm_widths)
        return data

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ContractError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**{key: coerce_value(key, value) for key, value in data.items()})


# Fields that change the parameter layout or the forward computation.
ARCHITECTURE_FIELDS = (
    "head",
    "width",
    "sub_width",
    "sublayers",
    "clip_length",
    "grid_min",
    "grid_max",
    "grid_size",
    "spline_degree",
    "rho",
    "input_mode",
    "frame_size",
    "encoder_channels",
    "lstm_widths",
    "transformer_heads",
    "transformer_ff",
    "transformer_layers",
    "norm_first",
)


def validate(config):
    problems = []
    if config.head not in HEAD_CHOICES:
        problems.append(f"head must be one of {HEAD_CHOICES}")
    if config.input_mode not in INPUT_MODES:
        problems.append(f"input_mode must be one of {INPUT_MODES}")
    if config.rho not in RHO_CHOICES:
        problems.append(f"rho must be one of {RHO_CHOICES}")
    if config.lr <= 0:
        problems.append("lr must be positive")
    if config.batch_size < 2:
        problems.append("batch_size must be at least 2 for batch normalisation")
    if not 0.0 <= config.dropout < 1.0:
        problems.append("dropout must lie in [0, 1)")
    if config.clip_length < 1 or config.width < 1 or config.sublayers < 1:
        problems.append("clip_length, width and sublayers must be positive")
    if config.max_epochs < 0 or config.min_epochs < 0:
        problems.append("max_epochs and min_epochs must be non-negative")
    if not 0.0 <= config.val_fraction < 1.0:
        problems.append("val_fraction must lie in [0, 1)")
    if not 0.0 < config.lr_factor < 1.0:
        problems.append("lr_factor must lie in (0, 1)")
    if config.width % config.transformer_heads:
        problems.append("width must be divisible by transformer_heads")
    if problems:
        raise ContractError("invalid config: " + "; ".join(problems))


def _as_bool(value):
    text = str(value).strip().lower()
    if text in TRUE_WORDS:
        return True
    if text in FALSE_WORDS:
        return False
    raise ValueError(f"not a boolean: {value!r}")


def _as_int_tuple(value):
    if isinstance(value, (list, tuple)):
        return tuple(int(item) for item in value)
    return tuple(int(item) for item in str(value).replace(" ", "").split(",") if item)


def coerce_value(key, value):
    """Convert a string (or already typed) value to the type of ``TrainConfig.<key>``."""
    kinds = {f.name: f.default for f in fields(TrainConfig)}
    if key not in kinds:
        raise ContractError(f"unknown config key {key!r}")
    default = kinds[key]
    try:
        if isinstance(default, bool):
            return value if isinstance(value, bool) else _as_bool(value)
        if isinstance(default, tuple):
            return _as_int_tuple(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    except (TypeError, ValueError) as exc:
        raise ContractError(f"bad value for {key}: {value!r} ({exc})") from exc
    return str(value).strip()


PRESETS = {
    "full": {},
    # Laptop-sized run on the synthetic set: smaller frames and widths, a larger
    # step size and a floor on epochs before early stopping may fire.
    "desk": {
        "width": 64,
        "sub_width": 32,
        "frame_size": 32,
        "encoder_channels": (8, 16, 32, 64),
        "lstm_widths": (64, 32),
        "transformer_ff": 256,
        "lr": 1e-3,
        "max_epochs": 60,
        "min_epochs": 25,
    },
    "lr-5e-5": {"lr": 5e-5},
    "lr-2e-4": {"lr": 2e-4},
    "dropout-0.2": {"dropout": 0.2},
    "dropout-0.4": {"dropout": 0.4},
}


def load_config_file(path):
    values = {}
    with open(path, encoding="utf-8") as handle:
        for line_number, raw in enumerate(handle, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ContractError(f"{path}:{line_number}: expected key=value, got {raw.strip()!r}")
            key, value = line.split("=", 1)
            key = key.strip().replace("-", "_")
            values[key] = coerce_value(key, value.strip())
    return values


def build_config(preset="full", path=None, overrides=None):
    """Defaults, then the preset, then the config file, then explicit overrides."""
    if preset not in PRESETS:
        raise ContractError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
    values = dict(PRESETS[preset])
    if path:
        values.update(load_config_file(path))
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key.replace("-", "_")] = value
    config = TrainConfig.from_dict(values)
    logger.debug("config resolved from preset %s%s", preset, f" and {path}" if path else "")
    return config


def with_head(config, head):
    return replace(config, head=head)


def _render(value):
    if isinstance(value, (list, tuple)):
        return ",".join(str(item) for item in value)
    return repr(value) if isinstance(value, float) else str(value)


def config_hash(config):
    canonical = "\n".join(
        f"{key}={_render(getattr(config, key))}" for key in sorted(ARCHITECTURE_FIELDS)
    )
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
