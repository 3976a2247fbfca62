"""Request/response models for the HTTP service.

Defaults mirror the training recipe (lr 1e-4, weight decay 1e-3, batch 200,
epochs 250, plateau factor 0.1 / patience 10 / threshold 1e-4) and the
default synthetic scene.
"""

from pydantic import BaseModel, Field


class SynthRequest(BaseModel):
    out_dir: str
    n_objects: int = Field(default=200, ge=0)
    image_w: int = Field(default=1242, ge=1)
    image_h: int = Field(default=375, ge=1)
    fu: float = 721.5377
    fv: float = 721.5377
    cu: float = 609.5593
    cv: float = 172.854
    camera_height: float = 1.65
    class_name: str = "Car"
    dims_mean: tuple[float, float, float] = (1.5, 1.6, 3.9)
    dims_sigma: tuple[float, float, float] = (0.1, 0.1, 0.4)
    x_range: tuple[float, float] = (-6.0, 6.0)
    z_range: tuple[float, float] = (8.0, 35.0)
    feature_dim: int = Field(default=64, ge=1)
    noise_sigma: float = Field(default=0.05, ge=0.0)
    seed: int = 0


class SynthResponse(BaseModel):
    out_dir: str
    n_objects: int
    seed: int
    files: list[str]


class StatsRequest(BaseModel):
    labels: str
    out: str
    classes: list[str] = ["Car"]


class StatsResponse(BaseModel):
    out: str
    means: dict[str, list[float]]
    counts: dict[str, int]


class TrainRequest(BaseModel):
    dataset: str
    stats: str
    weights_out: str
    history_out: str | None = None
    hidden_dim: int = Field(default=256, ge=1)
    n_bins: int = Field(default=2, ge=1)
    overlap_fraction: float = Field(default=0.1, ge=0.0, lt=1.0)
    lr: float = Field(default=1e-4, gt=0.0)
    weight_decay: float = Field(default=1e-3, ge=0.0)
    batch_size: int = Field(default=200, ge=1)
    epochs: int = Field(default=250, ge=0)
    seed: int = 0
    alpha_residual: float = Field(default=1.0, ge=0.0)
    w_orientation: float = Field(default=1.0, ge=0.0)
    factor: float = Field(default=0.1, gt=0.0, le=1.0)
    patience: int = Field(default=10, ge=1)
    threshold: float = Field(default=1e-4, ge=0.0)


class TrainResponse(BaseModel):
    weights: str
    history: str | None
    epochs: int
    final_loss: float | None
    reduction_epochs: list[int]


class PredictRequest(BaseModel):
    weights: str
    features: str
    boxes: str
    calib: str
    out: str


class PredictResponse(BaseModel):
    out: str
    n_objects: int


class EvalRequest(BaseModel):
    gt: str
    det: str
    class_name: str = "Car"
    points: int = 40
    iou_threshold: float | None = None
    out: str | None = None
    threads: int = Field(default=1, ge=1)


class EvalResponse(BaseModel):
    table: str
    values: dict[str, str]
    out: str | None


class BenchRequest(BaseModel):
    weights: str
    batch: int = Field(default=200, ge=1)
    repetitions: int = Field(default=50, ge=1)
    seed: int = 0


class BenchResponse(BaseModel):
    batch: int
    feature_dim: int
    repetitions: int
    mean_s: float
    p50_s: float
    p95_s: float
    per_object_mean_s: float


class HealthResponse(BaseModel):
    status: str
    version: str
