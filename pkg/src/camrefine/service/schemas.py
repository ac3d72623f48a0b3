"""Pydantic request/response models for the HTTP API."""
from __future__ import annotations

from typing import Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field


class ModelSpec(BaseModel):
    model_config = ConfigDict(protected_namespaces=())

    model_path: str
    manifest_path: str


class DatasetSpec(BaseModel):
    list_file: str
    image_dir: str
    label_dir: Optional[str] = None
    saliency_dir: Optional[str] = None
    class_file: Optional[str] = None
    class_names: Optional[List[str]] = None  # defaults to the VOC-20 vocabulary


class RefinementParams(BaseModel):
    erase_threshold: float = 0.7
    stop_fraction: float = 0.01
    max_iterations: int = 8
    activation_floor: float = 0.0
    use_split: bool = True


class CamJobRequest(BaseModel):
    classifier: ModelSpec
    dataset: DatasetSpec
    output_dir: str
    workers: int = 1


class InferJobRequest(CamJobRequest):
    refinement: RefinementParams = Field(default_factory=RefinementParams)


class PseudoJobRequest(BaseModel):
    maps_dir: str
    dataset: DatasetSpec
    bg_threshold: float
    output_dir: str
    workers: int = 1


class EvalJobRequest(BaseModel):
    maps_dir: str
    dataset: DatasetSpec
    thresholds: Optional[List[float]] = None  # defaults to 0.05..0.95 step 0.05
    output_dir: Optional[str] = None
    workers: int = 1


class OverlayJobRequest(BaseModel):
    maps_dir: str
    dataset: DatasetSpec
    output_dir: str
    opacity: float = 0.5
    workers: int = 1


class LossCheckRequest(BaseModel):
    seed: int = 0
    trials: int = 20
    class_counts: List[int] = Field(default_factory=lambda: [2, 20])
    height: int = 4
    width: int = 4
    alpha: float = 0.08
    fd_step: float = 1e-3


class FailureModel(BaseModel):
    entry_id: str
    message: str


class JobReportModel(BaseModel):
    job: str
    config_digest: str
    processed: List[str]
    failures: List[FailureModel]
    outputs: List[str]
    output_digest: str
    partial: bool
    extra: Dict = Field(default_factory=dict)


class ModelInfo(BaseModel):
    model_config = ConfigDict(protected_namespaces=())

    model_path: str
    manifest_path: str
    class_count: int
    feature_unit_count: int
    classification_threshold: float


class LossCheckReport(BaseModel):
    seed: int
    trials: int
    fd_step: float
    max_rel_error: float
    cases: List[Dict]


class HealthResponse(BaseModel):
    status: str
    version: str
