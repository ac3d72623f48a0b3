"""FastAPI application wrapping the batch pipeline.

The service holds a registry of loaded classifier sessions so repeated jobs
against one model skip re-deserialization. Path fields refer to the
server's filesystem: the expected deployment is a local daemon (or the
in-process client the CLI uses by default).
"""
from __future__ import annotations

import threading
from typing import Dict, Tuple

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__, jobs
from ..backend import ClassifierHandle, load_model
from ..condinfer import RefinementConfig
from ..dataio import VOC_CLASSES, load_dataset
from ..errors import CamRefineError
from ..pseudo import DEFAULT_THRESHOLDS
from . import schemas


class ModelRegistry:
    """Thread-safe cache of loaded classifiers keyed by (model, manifest) paths."""

    def __init__(self):
        self._lock = threading.Lock()
        self._handles: Dict[Tuple[str, str], ClassifierHandle] = {}

    def get(self, spec: schemas.ModelSpec) -> ClassifierHandle:
        key = (spec.model_path, spec.manifest_path)
        with self._lock:
            handle = self._handles.get(key)
        if handle is not None:
            return handle
        handle = load_model(spec.model_path, spec.manifest_path)
        with self._lock:
            self._handles.setdefault(key, handle)
        return handle

    def infos(self):
        with self._lock:
            items = list(self._handles.items())
        return [
            schemas.ModelInfo(
                model_path=key[0], manifest_path=key[1],
                class_count=h.class_count,
                feature_unit_count=h.feature_unit_count,
                classification_threshold=h.classification_threshold,
            )
            for key, h in items
        ]


def _dataset_from_spec(spec: schemas.DatasetSpec):
    return load_dataset(
        list_file=spec.list_file,
        image_dir=spec.image_dir,
        label_dir=spec.label_dir,
        saliency_dir=spec.saliency_dir,
        class_file=spec.class_file,
        class_names=tuple(spec.class_names) if spec.class_names else VOC_CLASSES,
    )


def _report_model(report: jobs.JobReport) -> schemas.JobReportModel:
    return schemas.JobReportModel(
        job=report.job,
        config_digest=report.config_digest,
        processed=report.processed,
        failures=[schemas.FailureModel(entry_id=f.entry_id, message=f.message)
                  for f in report.failures],
        outputs=report.outputs,
        output_digest=report.output_digest,
        partial=report.partial,
        extra=report.extra,
    )


def _digest_params(request) -> dict:
    return request.model_dump(exclude={"workers", "output_dir"})


def create_app() -> FastAPI:
    app = FastAPI(title="camrefine", version=__version__)
    registry = ModelRegistry()

    @app.exception_handler(CamRefineError)
    async def _domain_error(request: Request, exc: CamRefineError):
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.get("/health", response_model=schemas.HealthResponse)
    def health():
        return schemas.HealthResponse(status="ok", version=__version__)

    @app.post("/models/load", response_model=schemas.ModelInfo)
    def models_load(spec: schemas.ModelSpec):
        handle = registry.get(spec)
        return schemas.ModelInfo(
            model_path=spec.model_path, manifest_path=spec.manifest_path,
            class_count=handle.class_count,
            feature_unit_count=handle.feature_unit_count,
            classification_threshold=handle.classification_threshold,
        )

    @app.get("/models", response_model=list[schemas.ModelInfo])
    def models_list():
        return registry.infos()

    @app.post("/jobs/cam", response_model=schemas.JobReportModel)
    def jobs_cam(request: schemas.CamJobRequest):
        handle = registry.get(request.classifier)
        dataset = _dataset_from_spec(request.dataset)
        report = jobs.run_cam_job(handle, dataset, request.output_dir,
                                  workers=request.workers,
                                  digest_params=_digest_params(request))
        return _report_model(report)

    @app.post("/jobs/infer", response_model=schemas.JobReportModel)
    def jobs_infer(request: schemas.InferJobRequest):
        handle = registry.get(request.classifier)
        dataset = _dataset_from_spec(request.dataset)
        r = request.refinement
        refinement = RefinementConfig(
            erase_threshold=r.erase_threshold, stop_fraction=r.stop_fraction,
            max_iterations=r.max_iterations, activation_floor=r.activation_floor)
        report = jobs.run_infer_job(handle, dataset, request.output_dir, refinement,
                                    use_split=r.use_split, workers=request.workers,
                                    digest_params=_digest_params(request))
        return _report_model(report)

    @app.post("/jobs/pseudo", response_model=schemas.JobReportModel)
    def jobs_pseudo(request: schemas.PseudoJobRequest):
        dataset = _dataset_from_spec(request.dataset)
        report = jobs.run_pseudo_job(request.maps_dir, dataset, request.bg_threshold,
                                     request.output_dir, workers=request.workers,
                                     digest_params=_digest_params(request))
        return _report_model(report)

    @app.post("/jobs/eval", response_model=schemas.JobReportModel)
    def jobs_eval(request: schemas.EvalJobRequest):
        dataset = _dataset_from_spec(request.dataset)
        thresholds = request.thresholds or list(DEFAULT_THRESHOLDS)
        report = jobs.run_eval_job(request.maps_dir, dataset, thresholds=thresholds,
                                   output_dir=request.output_dir, workers=request.workers,
                                   digest_params=_digest_params(request))
        return _report_model(report)

    @app.post("/jobs/overlay", response_model=schemas.JobReportModel)
    def jobs_overlay(request: schemas.OverlayJobRequest):
        dataset = _dataset_from_spec(request.dataset)
        report = jobs.run_overlay_job(request.maps_dir, dataset, request.output_dir,
                                      opacity=request.opacity, workers=request.workers,
                                      digest_params=_digest_params(request))
        return _report_model(report)

    @app.post("/loss/check", response_model=schemas.LossCheckReport)
    def loss_check(request: schemas.LossCheckRequest):
        result = jobs.run_loss_check(
            seed=request.seed, trials=request.trials,
            class_counts=request.class_counts, height=request.height,
            width=request.width, alpha=request.alpha, fd_step=request.fd_step)
        return schemas.LossCheckReport(**result)

    return app
