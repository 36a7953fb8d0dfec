import logging
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data_manager import DataManager, load_reference_points
from .face_model import FaceModel, serialize
from .lm_trainer import LmConfig, TrainReport, train_lm
from .point_cloud import NormalizationParams, PointCloud, cloud_hash, normalize
from .registration import IcpConfig, IcpResult, Registrar, RigidTransform

logger = logging.getLogger(__name__)


@dataclass
class FitResult:
    model: FaceModel
    report: TrainReport
    normalization: NormalizationParams
    transform: RigidTransform
    icp_result: Optional[IcpResult] = None
    source: str = ""
    source_hash: str = ""


class FaceFitter:
    def __init__(self, lm_config: LmConfig, icp_config: Optional[IcpConfig] = None):
        self.lm_config = lm_config
        self.icp_config = icp_config or IcpConfig()

    def prepare(
        self,
        cloud: PointCloud,
        reference_landmarks: Optional[np.ndarray] = None,
        icp_reference: Optional[PointCloud] = None,
    ):
        """Canonical pose: normalized, landmark-registered, optionally ICP-refined."""
        normalized, params = normalize(cloud)
        registrar = Registrar(self.icp_config)
        registered = registrar.register(normalized, reference_landmarks, icp_reference)
        return registered, params, registrar.get_transform(), registrar.get_icp_result()

    def fit(
        self,
        cloud: PointCloud,
        reference_landmarks: Optional[np.ndarray] = None,
        icp_reference: Optional[PointCloud] = None,
    ) -> FitResult:
        registered, params, transform, icp_result = self.prepare(
            cloud, reference_landmarks, icp_reference
        )
        model, report = train_lm(registered, self.lm_config)
        return FitResult(model, report, params, transform, icp_result)


@dataclass(frozen=True)
class FitJob:
    """One file-to-file fit; picklable so batches can fan out to worker processes."""

    cloud_path: str
    model_path: str
    lm_config: LmConfig
    icp_config: IcpConfig
    landmark_path: Optional[str] = None
    reference_path: Optional[str] = None
    icp_reference_path: Optional[str] = None
    use_cache: bool = False


def run_fit_job(job: FitJob) -> FitResult:
    manager = DataManager(use_cache=job.use_cache)
    cloud = manager.load(job.cloud_path, job.landmark_path)
    reference = load_reference_points(job.reference_path) if job.reference_path else None
    icp_reference = manager.load(job.icp_reference_path) if job.icp_reference_path else None

    result = FaceFitter(job.lm_config, job.icp_config).fit(cloud, reference, icp_reference)
    directory = os.path.dirname(job.model_path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    serialize(result.model, job.model_path)
    result.source = job.cloud_path
    result.source_hash = cloud_hash(cloud)
    logger.info("Wrote %s (mse %.3e)", job.model_path, result.report.final_mse)
    return result
