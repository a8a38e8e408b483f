from __future__ import annotations

from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator


Arm = Literal["A", "B", "C", "D"]
Precision = Literal["single", "double"]
Split = Literal["train", "val", "test", "all"]

ARM_LABELS: Dict[str, str] = {
    "A": "Baseline",
    "B": "Baseline + Trans",
    "C": "Baseline + Trans + TL",
    "D": "Baseline + Trans + TL + MSR",
}

DEFAULT_OAR_NAMES = ("small_intestine", "femoral_head_r", "femoral_head_l", "bladder", "rectum")


def oar_names(n_oar: int) -> List[str]:
    names = list(DEFAULT_OAR_NAMES[:n_oar])
    names.extend(f"oar_{k + 1}" for k in range(len(names), n_oar))
    return names


class PhantomSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    size: Tuple[int, int] = (64, 64)
    n_oar: int = Field(default=5, ge=0)
    # semi-axes as fractions of the shorter plane side
    ptv_axes: Tuple[float, float] = (0.12, 0.22)
    oar_axes: Tuple[float, float] = (0.05, 0.10)
    falloff_sigma: float = Field(default=4.0, gt=0.0)
    prescription: float = 1.0
    noise_std: float = Field(default=0.02, ge=0.0)
    seed: int = 0

    @model_validator(mode="after")
    def _check_geometry(self) -> "PhantomSpec":
        height, width = self.size
        if height < 8 or width < 8:
            raise ValueError(f"phantom size {self.size} too small")
        for name, (low, high) in (("ptv_axes", self.ptv_axes), ("oar_axes", self.oar_axes)):
            if not 0.0 < low <= high:
                raise ValueError(f"{name} must satisfy 0 < low <= high, got {(low, high)}")
        if self.prescription != 1.0:
            raise ValueError("prescription is normalized to 1.0")
        half = min(height, width) / 2.0
        if self.ptv_axes[1] * min(height, width) + 2.0 * self.falloff_sigma >= half:
            raise ValueError(
                "PTV ellipse cannot fit with a 2*falloff_sigma border: "
                f"max axis {self.ptv_axes[1] * min(height, width):.1f}px, sigma {self.falloff_sigma}, size {self.size}"
            )
        return self

    @property
    def organ_names(self) -> List[str]:
        return oar_names(self.n_oar)


class ModelConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    in_channels: int = Field(default=7, ge=1)
    base_width: int = Field(default=8, ge=1)
    num_enc_layers: int = Field(default=3, ge=1)
    num_transformer_layers: int = Field(default=2, ge=0)
    num_heads: int = Field(default=4, ge=1)
    mlp_ratio: float = Field(default=4.0, gt=0.0)
    input_size: Tuple[int, int] = (64, 64)
    use_transformer: bool = True
    max_groups: int = Field(default=8, ge=1)

    @model_validator(mode="after")
    def _check_shapes(self) -> "ModelConfig":
        factor = 2 ** self.num_enc_layers
        height, width = self.input_size
        if height % factor or width % factor:
            raise ValueError(f"input_size {self.input_size} not divisible by 2^{self.num_enc_layers}")
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embedding dimension {self.embed_dim} not divisible by num_heads {self.num_heads}")
        return self

    @property
    def encoder_widths(self) -> List[int]:
        return [self.base_width * 2**i for i in range(self.num_enc_layers)]

    @property
    def decoder_widths(self) -> List[int]:
        return list(reversed(self.encoder_widths))

    @property
    def embed_dim(self) -> int:
        return self.base_width * 2 ** (self.num_enc_layers - 1)

    @property
    def bottleneck_size(self) -> Tuple[int, int]:
        factor = 2 ** self.num_enc_layers
        return self.input_size[0] // factor, self.input_size[1] // factor

    @property
    def num_tokens(self) -> int:
        height, width = self.bottleneck_size
        return height * width


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    omega: float = Field(default=0.01, ge=0.0)
    margin: float = Field(default=0.3, ge=0.0)
    patch_S: int = Field(default=5, ge=1)
    lr0: float = Field(default=1e-4, gt=0.0)
    poly_power: float = Field(default=0.9, ge=0.0)
    epochs: int = Field(default=1, ge=1)
    effective_batch: int = Field(default=12, ge=1)
    seed: int = 0
    ablation_arm: Arm = "D"
    max_steps: Optional[int] = Field(default=None, ge=1)
    triplet_on_prediction: bool = False
    normalize_triplet: bool = False

    @model_validator(mode="after")
    def _check_patch(self) -> "TrainConfig":
        if self.patch_S % 2 == 0:
            raise ValueError(f"patch_S must be odd, got {self.patch_S}")
        return self

    @property
    def uses_transformer(self) -> bool:
        return self.ablation_arm != "A"

    @property
    def uses_triplet(self) -> bool:
        return self.ablation_arm in ("C", "D")


class EvalOptions(BaseModel):
    model_config = ConfigDict(frozen=True)

    dvh_bins: int = Field(default=256, ge=2)
    prescription_gy: float = Field(default=1.0, gt=0.0)
    workers: int = Field(default=4, ge=1)


class TrainStepRecord(BaseModel):
    step: int
    update: int
    lr: float
    l_dose: float
    l_mtp: float
    l_total: float
    separation: List[float]


class DatasetManifest(BaseModel):
    format: str = "TCTD"
    version: int = 1
    count: int
    files: List[str]
    splits: Dict[str, str] = Field(default_factory=dict)
    organs: List[str] = Field(default_factory=list)
    spec: Dict[str, object] = Field(default_factory=dict)
    seed: int = 0
    checksum: str = ""


class GradCheckRow(BaseModel):
    name: str
    precision: Precision
    max_relative_error: float
    checked: int
    skipped: int
    tolerance: float
    passed: bool


class MetricRow(BaseModel):
    case: str
    structure: str
    metric: str
    predicted: float
    ground_truth: float
    abs_error: float


class SummaryRow(BaseModel):
    metric: str
    mean: float
    sd: float
    p: Optional[float] = None
