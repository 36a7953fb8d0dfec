from .point_cloud import PointCloud, NormalizationParams, normalize, denormalize
from .data_manager import DataManager, load_cloud, save_cloud
from .registration import RigidTransform, IcpConfig, IcpResult, Registrar, icp, register_landmarks
from .face_model import FaceModel, FlatWeights, Permutation, GridSpec
from .lm_trainer import LmConfig, LmTrainer, StopReason, TrainReport, train_lm
from .face_fitter import FaceFitter, FitJob, FitResult, run_fit_job
from .siamese import SiameseConfig, SiameseNet, SiameseTrainer, LabeledPair, train_siamese, verify
from .pair_generator import PairGenerator, generate_pairs
from .evaluation import EvalReport, eval_roc
from .gallery import Gallery, GalleryEntry, EnrollmentMeta
from .config import CliConfig, build_config
from .report_generator import ReportGenerator

__all__ = [
    'PointCloud',
    'NormalizationParams',
    'normalize',
    'denormalize',
    'DataManager',
    'load_cloud',
    'save_cloud',
    'RigidTransform',
    'IcpConfig',
    'IcpResult',
    'Registrar',
    'icp',
    'register_landmarks',
    'FaceModel',
    'FlatWeights',
    'Permutation',
    'GridSpec',
    'LmConfig',
    'LmTrainer',
    'StopReason',
    'TrainReport',
    'train_lm',
    'FaceFitter',
    'FitJob',
    'FitResult',
    'run_fit_job',
    'SiameseConfig',
    'SiameseNet',
    'SiameseTrainer',
    'LabeledPair',
    'train_siamese',
    'verify',
    'PairGenerator',
    'generate_pairs',
    'EvalReport',
    'eval_roc',
    'Gallery',
    'GalleryEntry',
    'EnrollmentMeta',
    'CliConfig',
    'build_config',
    'ReportGenerator',
]
