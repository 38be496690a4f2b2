# tumor_shared.py
import os, json, time, csv, datetime, hashlib, platform
from typing import Optional, Dict, Literal, Tuple
import yaml
from pydantic import BaseModel, Field

# --- Constants ---
VERSION = "0.3.0"
CONFIG_FILE = os.getenv("TMF_CONFIG", "config.yaml")
FRAME_RATE_HZ = 5.0
T_OBS = 16
T_PRED = 5
IMAGE_SIZE = 64

def runtime_dir() -> str:
    return os.getenv("TMF_RUNTIME_DIR", run_settings().runtime_dir)


# --- Errors ---
class ForecastError(Exception):
    category = "internal"
    exit_code = 1


class ParameterError(ForecastError, ValueError):
    category = "parameter"
    exit_code = 6


class GeometryError(ParameterError):
    category = "geometry"


class DegenerateInputError(ParameterError):
    category = "degenerate-input"


class ShapeError(ForecastError, ValueError):
    category = "shape"
    exit_code = 6

    def __init__(self, msg: str, *shapes):
        if shapes:
            msg = f"{msg}: " + " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(msg)


class ContractError(ForecastError, RuntimeError):
    category = "contract"
    exit_code = 6


class NumericError(ForecastError, ArithmeticError):
    category = "numeric"
    exit_code = 7


class FormatError(ForecastError, ValueError):
    category = "format"
    exit_code = 4

    def __init__(self, msg: str, offset: Optional[int] = None):
        self.offset = offset
        if offset is not None:
            msg = f"{msg} (at byte {offset})"
        super().__init__(msg)


class ConfigMismatchError(FormatError):
    category = "config-mismatch"


class ManifestError(ForecastError, ValueError):
    category = "manifest"
    exit_code = 5


class InputNotFoundError(ForecastError, FileNotFoundError):
    category = "input-not-found"
    exit_code = 3


class UsageError(ForecastError):
    category = "usage"
    exit_code = 2


class GradcheckFailedError(ForecastError):
    category = "gradcheck-failed"
    exit_code = 8


# --- Models ---
class Settings(BaseModel):
    runtime_dir: str = "runtime"
    render_mode: Literal["fast", "exact"] = "fast"
    label_reference: Literal["planning", "session"] = "planning"
    divisor_floor_mm: float = 1.0
    drr_noise_sd: float = 0.0
    workers: int = 1
    emit_events: bool = True


class ModelConfig(BaseModel):
    d_model: int = 64
    n_heads: int = 4
    n_layers_enc: int = 2
    n_layers_dec: int = 2
    d_ff: int = 128
    patch_size: int = 16
    T_obs: int = T_OBS
    T_pred: int = T_PRED
    dropout: float = 0.1
    image_size: int = IMAGE_SIZE
    activation: Literal["gelu", "relu"] = "gelu"

    @classmethod
    def large(cls) -> "ModelConfig":
        return cls(d_model=512, n_heads=8, n_layers_enc=6, n_layers_dec=6, d_ff=2048)

    @classmethod
    def toy(cls) -> "ModelConfig":
        return cls()

    @classmethod
    def tiny(cls) -> "ModelConfig":
        # gradient audit size
        return cls(d_model=8, n_heads=2, n_layers_enc=1, n_layers_dec=1, d_ff=16,
                   patch_size=8, image_size=16, T_obs=4, T_pred=2, dropout=0.0)

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    def validate_shape(self):
        if self.d_model <= 0 or self.d_model % self.n_heads != 0:
            raise ParameterError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.d_model % 4 != 0:
            raise ParameterError(f"d_model {self.d_model} must be a multiple of 4")
        if self.image_size % self.patch_size != 0:
            raise ParameterError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.T_obs < 1 or self.T_pred < 1:
            raise ParameterError("T_obs and T_pred must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ParameterError(f"dropout {self.dropout} outside [0, 1)")
        return self


class TrainConfig(BaseModel):
    epochs: int = 100
    batch_size: int = 16
    lr_min: float = 5e-7
    lr_max: float = 5e-5
    warmup_epochs: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def validate_schedule(self):
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ParameterError(f"warmup_epochs {self.warmup_epochs} must be < epochs {self.epochs}")
        if not 0 < self.lr_min <= self.lr_max:
            raise ParameterError(f"need 0 < lr_min <= lr_max, got {self.lr_min}, {self.lr_max}")
        if self.batch_size < 1:
            raise ParameterError("batch_size must be >= 1")
        return self


class RunConfig(BaseModel):
    subcommand: str
    seed: int = 0
    out: Optional[str] = None
    workers: int = 1
    args: Dict[str, object] = Field(default_factory=dict)


# --- Config Helpers ---
def read_settings() -> Settings:
    try:
        with open(CONFIG_FILE, "r", encoding="utf-8") as f:
            return Settings(**(yaml.safe_load(f) or {}))
    except Exception:
        # Return defaults if file missing or broken
        return Settings()


_run_settings: Optional[Settings] = None


def use_settings(settings: Optional[Settings] = None) -> Settings:
    """Pin the settings for this run; reads CONFIG_FILE once when none are given."""
    global _run_settings
    _run_settings = settings if settings is not None else read_settings()
    return _run_settings


def run_settings() -> Settings:
    return _run_settings if _run_settings is not None else use_settings()


def read_json_config(path: str, base_model: Optional[ModelConfig] = None) -> Tuple[ModelConfig, TrainConfig]:
    """Parse a --config file with optional `model` and `train` sections over `base_model`."""
    if not os.path.exists(path):
        raise InputNotFoundError(f"config not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        try:
            raw = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ManifestError(f"unparsable config {path}: {e}")
    try:
        model = ModelConfig(**{**(base_model or ModelConfig()).model_dump(), **raw.get("model", {})})
        train = TrainConfig(**raw.get("train", {}))
    except Exception as e:
        raise ManifestError(f"invalid config {path}: {e}")
    return model.validate_shape(), train.validate_schedule()


def emit(event_type: str, payload: dict):
    """Append a compact JSON line to the run event stream."""
    if not run_settings().emit_events:
        return
    line = {"ts": int(time.time()), "type": event_type, **payload}
    try:
        os.makedirs(runtime_dir(), exist_ok=True)
        with open(os.path.join(runtime_dir(), "events.jsonl"), "a", encoding="utf-8") as f:
            f.write(json.dumps(line, ensure_ascii=False, default=str) + "\n")
    except Exception as e:
        print(f"Error emitting event: {e}")


def log_error(msg: str):
    ts = datetime.datetime.now(datetime.timezone.utc).strftime("%Y-%m-%d %H:%M:%S")
    os.makedirs(runtime_dir(), exist_ok=True)
    with open(os.path.join(runtime_dir(), "errors.log"), "a", encoding="utf-8") as f:
        f.write(f"[{ts}] {msg}\n")


def append_csv_row(path: str, header: list, row: list):
    exists = os.path.exists(path)
    with open(path, "a", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        if not exists:
            w.writerow(header)
        w.writerow(row)


def stable_hash(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def write_provenance(out_dir: str, run: RunConfig, argv: list, extra: Optional[dict] = None) -> str:
    os.makedirs(out_dir, exist_ok=True)
    record = {
        "version": VERSION,
        "created_utc": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "python": platform.python_version(),
        "argv": argv,
        "run": run.model_dump(),
        "settings": run_settings().model_dump(),
        **(extra or {}),
    }
    path = os.path.join(out_dir, "provenance.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(record, f, ensure_ascii=False, indent=2, default=str)
    return path
