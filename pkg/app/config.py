import os
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from app.errors import ConfigError
from app.models import Arm, EvalOptions, ModelConfig, PhantomSpec, Precision, Split, TrainConfig


load_dotenv()


@dataclass(frozen=True)
class Settings:
    run_name: str
    log_level: str
    audit_log_path: str
    data_dir: str
    debug_numerics: bool
    workers: int


def _get_env_int(name: str, default: str) -> int:
    return int(os.getenv(name, default).strip())


def _get_env_bool(name: str, default: str) -> bool:
    value = os.getenv(name, default).strip().lower()
    return value in {"1", "true", "yes", "y", "on"}


def get_settings() -> Settings:
    base_dir = os.path.dirname(os.path.dirname(__file__))
    data_dir = os.path.join(base_dir, "data")

    return Settings(
        run_name=os.getenv("TCTRANS_RUN_NAME", "tctrans_dose"),
        log_level=os.getenv("TCTRANS_LOG_LEVEL", "INFO").strip().upper(),
        audit_log_path=os.getenv("TCTRANS_AUDIT_LOG", os.path.join(data_dir, "audit.jsonl")).strip(),
        data_dir=data_dir,
        debug_numerics=_get_env_bool("TCTRANS_DEBUG_NUMERICS", "false"),
        workers=_get_env_int("TCTRANS_WORKERS", "4"),
    )


class RunConfig(BaseModel):
    """Flat run configuration; every field is also a command-line flag of the same name."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    seed: int = 0
    size: str = "64x64"
    count: int = Field(default=64, ge=0)
    n_oar: int = 5
    ptv_axis_min: float = 0.12
    ptv_axis_max: float = 0.22
    oar_axis_min: float = 0.05
    oar_axis_max: float = 0.10
    falloff_sigma: float = 4.0
    noise_std: float = 0.02

    base_width: int = 8
    num_enc_layers: int = 3
    num_transformer_layers: int = 2
    num_heads: int = 4
    mlp_ratio: float = 4.0

    arm: Arm = "D"
    omega: float = 0.01
    margin: float = 0.3
    patch_S: int = 5
    lr0: float = 1e-4
    poly_power: float = 0.9
    epochs: int = 1
    effective_batch: int = 12
    steps: Optional[int] = None
    triplet_on_prediction: bool = False
    normalize_triplet: bool = False
    precision: Precision = "single"

    dvh_bins: int = 256
    prescription_gy: float = 1.0
    split: Split = "test"
    gradcheck_precision: Precision = "double"
    ops: str = ""

    out: str = ""
    data_dir: str = ""
    checkpoint: str = ""
    pred_dir: str = ""

    @field_validator("size")
    @classmethod
    def _check_size(cls, value: str) -> str:
        parts = value.lower().replace(" ", "").split("x")
        if len(parts) != 2 or not all(p.isdigit() and int(p) > 0 for p in parts):
            raise ValueError(f"size must look like HxW, got {value!r}")
        return f"{int(parts[0])}x{int(parts[1])}"

    @property
    def size_hw(self) -> Tuple[int, int]:
        height, width = self.size.split("x")
        return int(height), int(width)

    def to_phantom_spec(self) -> PhantomSpec:
        return PhantomSpec(
            size=self.size_hw,
            n_oar=self.n_oar,
            ptv_axes=(self.ptv_axis_min, self.ptv_axis_max),
            oar_axes=(self.oar_axis_min, self.oar_axis_max),
            falloff_sigma=self.falloff_sigma,
            noise_std=self.noise_std,
            seed=self.seed,
        )

    def to_model_config(self) -> ModelConfig:
        return ModelConfig(
            in_channels=2 + self.n_oar,
            base_width=self.base_width,
            num_enc_layers=self.num_enc_layers,
            num_transformer_layers=self.num_transformer_layers,
            num_heads=self.num_heads,
            mlp_ratio=self.mlp_ratio,
            input_size=self.size_hw,
            use_transformer=self.arm != "A",
        )

    def to_train_config(self) -> TrainConfig:
        return TrainConfig(
            omega=self.omega,
            margin=self.margin,
            patch_S=self.patch_S,
            lr0=self.lr0,
            poly_power=self.poly_power,
            epochs=self.epochs,
            effective_batch=self.effective_batch,
            seed=self.seed,
            ablation_arm=self.arm,
            max_steps=self.steps,
            triplet_on_prediction=self.triplet_on_prediction,
            normalize_triplet=self.normalize_triplet,
        )

    def to_eval_options(self, workers: int = 4) -> EvalOptions:
        return EvalOptions(dvh_bins=self.dvh_bins, prescription_gy=self.prescription_gy, workers=workers)


def parse_key_value_text(text: str) -> Dict[str, str]:
    values: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        values[key] = value.strip()
    return values


def build_run_config(file_values: Dict[str, str], flag_values: Dict[str, str]) -> RunConfig:
    merged = {**file_values, **flag_values}
    unknown = sorted(set(merged) - set(RunConfig.model_fields))
    if unknown:
        raise ConfigError(f"unknown configuration keys: {unknown}")
    # an empty value resets the key to its default
    cleaned = {key: value for key, value in merged.items() if value != ""}
    try:
        return RunConfig.model_validate(cleaned)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def load_run_config(path: Optional[str], flag_values: Dict[str, str]) -> RunConfig:
    file_values: Dict[str, str] = {}
    if path:
        if not os.path.isfile(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path, "r", encoding="utf-8") as handle:
            file_values = parse_key_value_text(handle.read())
    return build_run_config(file_values, flag_values)


def dump_run_config(config: RunConfig) -> str:
    lines = []
    for key in RunConfig.model_fields:
        value = getattr(config, key)
        if value is None:
            value = ""
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


def read_snapshot(directory: str) -> Optional[RunConfig]:
    path = os.path.join(directory, "resolved_config.txt")
    if not os.path.isfile(path):
        return None
    return load_run_config(path, {})
