import glob
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from Models.config import CliConfig, config_from_args
from Models.data_manager import DataManager, load_reference_points, save_cloud, save_landmarks
from Models.errors import CloudFormatError, FaceModelingError, ModelFormatError, UsageError
from Models.evaluation import eval_roc
from Models.face_fitter import FaceFitter, FitJob, FitResult, run_fit_job
from Models.face_model import (
    FlatWeights,
    GridSpec,
    deserialize,
    flatten,
    grid_for_cloud,
    random_augmentations,
    resample,
    serialize,
    unflatten,
)
from Models.gallery import EnrollmentMeta, Gallery
from Models.lm_trainer import StopReason, TrainReport
from Models.pair_generator import (
    generate_pairs,
    group_by_identity,
    load_pairs,
    save_pairs,
    split_identities,
    split_pairs,
)
from Models.point_cloud import normalize
from Models.report_generator import ReportGenerator
from Models.siamese import SiameseTrainer, load_net, save_net
from Models.siamese import verify as verify_pair
from Models.synthetic import gaussian_bump, reference_landmarks, sample_cloud, toy_identities

logger = logging.getLogger(__name__)

# Stop reasons that count as a finished fit; the others exit with a numerical-failure code.
SUCCESSFUL_STOPS = (StopReason.TARGET_MSE, StopReason.MAX_EPOCHS)
NUMERICAL_FAILURE = 3


def _sibling(path: str, suffix: str) -> str:
    return os.path.splitext(path)[0] + suffix


def _fit_exit_code(reports: Sequence[TrainReport]) -> int:
    if any(r.stop_reason not in SUCCESSFUL_STOPS for r in reports):
        return NUMERICAL_FAILURE
    return 0


class MainController:

    def __init__(self, view):
        self.view = view
        self.report_generator = ReportGenerator()

    def run_command(self, handler: str, args) -> int:
        """Run one subcommand; model errors become a message and an exit code."""
        try:
            config = config_from_args(args)
            return getattr(self, handler)(args, config) or 0
        except FaceModelingError as e:
            self.view.show_error(str(e))
            return e.exit_code
        except OSError as e:
            self.view.show_error(f"io: {e}")
            return 2

    # ==================== FITTING ====================

    def _fit_job(self, cloud_path: str, model_path: str, args, config: CliConfig,
                 landmark_path: Optional[str] = None) -> FitJob:
        if args.reference and landmark_path is None:
            landmark_path = _sibling(cloud_path, ".lm")
        return FitJob(
            cloud_path=cloud_path,
            model_path=model_path,
            lm_config=config.lm,
            icp_config=config.icp,
            landmark_path=landmark_path,
            reference_path=args.reference,
            icp_reference_path=args.icp_reference,
            use_cache=not args.no_cache,
        )

    def _record_fit(self, result: FitResult, job: FitJob) -> None:
        self.report_generator.write_train_report(
            result.report, job.model_path, source=job.cloud_path, source_hash=result.source_hash
        )

    def fit(self, args, config: CliConfig) -> int:
        if os.path.isdir(args.cloud):
            return self._fit_batch(args, config)

        self.view.show_status(f"Fitting {args.cloud}...")
        job = self._fit_job(args.cloud, args.out, args, config, args.landmarks)
        result = run_fit_job(job)
        self._record_fit(result, job)
        self.view.show_report(
            self.report_generator.train_report_text(result.report, job.cloud_path, result.source_hash)
        )
        return _fit_exit_code([result.report])

    def _fit_batch(self, args, config: CliConfig) -> int:
        # Reference files may sit next to the clouds; they are not fitted.
        references = {os.path.abspath(p) for p in (args.reference, args.icp_reference) if p}
        clouds = sorted(
            path for path in glob.glob(os.path.join(args.cloud, "*.xyz"))
            if os.path.abspath(path) not in references
        )
        if not clouds:
            raise CloudFormatError(f"cloud: no .xyz files in {args.cloud}")
        os.makedirs(args.out, exist_ok=True)
        jobs = [
            self._fit_job(path, os.path.join(args.out, os.path.basename(_sibling(path, ".nf3d"))), args, config)
            for path in clouds
        ]

        workers = config.general.jobs
        self.view.show_status(f"Fitting {len(jobs)} clouds with {workers} worker(s)...")
        completed: List[Tuple[FitJob, FitResult]] = []
        exit_code = 0

        if workers == 1:
            outcomes = []
            for job in jobs:
                try:
                    outcomes.append((job, run_fit_job(job), None))
                except FaceModelingError as e:
                    outcomes.append((job, None, e))
        else:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                futures = [(job, pool.submit(run_fit_job, job)) for job in jobs]
                outcomes = []
                for job, future in futures:
                    try:
                        outcomes.append((job, future.result(), None))
                    except FaceModelingError as e:
                        outcomes.append((job, None, e))

        for job, result, error in outcomes:
            if error is not None:
                self.view.show_error(f"{job.cloud_path}: {error}")
                exit_code = max(exit_code, error.exit_code)
                continue
            self._record_fit(result, job)
            completed.append((job, result))

        if completed:
            reports = [result.report for _, result in completed]
            census = self.report_generator.census(reports)
            self.report_generator.write_census(census, os.path.join(args.out, "census.csv"))
            self.view.show_data(census)
            exit_code = max(exit_code, _fit_exit_code(reports))

        self.view.show_info("fit", f"{len(completed)} of {len(jobs)} models written to {args.out}")
        return exit_code

    def reconstruct(self, args, config: CliConfig) -> int:
        model = deserialize(args.model)
        if args.like:
            cloud, _ = normalize(DataManager(use_cache=False).load(args.like))
            grid = grid_for_cloud(cloud, args.factor)
        else:
            grid = GridSpec(args.x_min, args.x_max, args.y_min, args.y_max, args.nx, args.ny)

        cloud = resample(model, grid)
        save_cloud(cloud, args.out)
        self.view.show_info("reconstruct", f"{cloud.count} points ({grid.nx}x{grid.ny}) written to {args.out}")
        return 0

    def register(self, args, config: CliConfig) -> int:
        landmark_path = args.landmarks or _sibling(args.cloud, ".lm")
        manager = DataManager(use_cache=False)
        cloud = manager.load(args.cloud, landmark_path)
        reference = load_reference_points(args.reference)
        icp_reference = manager.load(args.icp_reference) if args.icp_reference else None

        registered, params, transform, icp_result = FaceFitter(config.lm, config.icp).prepare(
            cloud, reference, icp_reference
        )
        save_cloud(registered, args.out)
        save_landmarks(registered.landmark_indices, _sibling(args.out, ".lm"))

        lines = [
            f"centroid: {' '.join(f'{v:.9g}' for v in params.centroid)}",
            f"scale: {params.scale:.9g}",
            f"rotation_degrees: {transform.angle_degrees:.6f}",
            f"translation: {' '.join(f'{v:.9g}' for v in transform.translation)}",
            "matrix:",
            np.array2string(transform.as_matrix(), precision=9, suppress_small=True),
        ]
        if icp_result is not None:
            lines.append(f"icp_iterations: {icp_result.iterations_used}")
            lines.append(f"icp_residual: {icp_result.final_residual:.9g}")
        self.view.show_report("\n".join(lines))
        return 0

    def augment(self, args, config: CliConfig) -> int:
        model = deserialize(args.model)
        flats = random_augmentations(model, args.count, config.seed, exclude_identity=True)
        os.makedirs(args.out_dir, exist_ok=True)
        stem = os.path.basename(os.path.splitext(args.model)[0])
        for index, flat in enumerate(flats):
            serialize(unflatten(flat), os.path.join(args.out_dir, f"{stem}_p{index:03d}.nf3d"))
        self.view.show_info("augment", f"{len(flats)} permuted models written to {args.out_dir}")
        return 0

    # ==================== VERIFICATION ====================

    def _gallery_vectors(self, args) -> List[Tuple[str, List[FlatWeights]]]:
        if args.gallery:
            models = Gallery(args.gallery).load_models()
            return [(identity, [flatten(m) for m in models[identity]]) for identity in sorted(models)]

        paths = sorted(glob.glob(os.path.join(args.models, "*.nf3d")))
        if not paths:
            raise ModelFormatError(f"siamese: no .nf3d files in {args.models}")
        labeled = [
            (os.path.basename(path).split("_", 1)[0], flatten(deserialize(path)))
            for path in paths
        ]
        return group_by_identity(labeled)

    def pairs(self, args, config: CliConfig) -> int:
        if args.split != "none" and not args.test_out:
            raise UsageError(f"pairs: --test-out is required with --split {args.split}")
        if not 0 < args.train_fraction < 1 and args.split != "none":
            raise UsageError("pairs: --train-fraction must be in (0, 1)")

        gallery = self._gallery_vectors(args)
        seed = config.seed
        test = []

        if args.split == "identities":
            train_gallery, test_gallery = split_identities(gallery, args.train_fraction, seed)
            train_positives = int(round(args.positives * args.train_fraction))
            train_negatives = int(round(args.negatives * args.train_fraction))
            train = generate_pairs(train_gallery, train_positives, train_negatives, args.augment, seed)
            test = generate_pairs(test_gallery, args.positives - train_positives,
                                  args.negatives - train_negatives, args.augment, seed)
        else:
            train = generate_pairs(gallery, args.positives, args.negatives, args.augment, seed)
            if args.split == "pairs":
                train, test = split_pairs(train, args.train_fraction, seed)

        save_pairs(train, args.out)
        message = f"{len(train)} pairs written to {args.out}"
        if test:
            save_pairs(test, args.test_out)
            message += f", {len(test)} held-out pairs to {args.test_out}"
        self.view.show_info("pairs", message)
        return 0

    def train_verifier(self, args, config: CliConfig) -> int:
        pairs = load_pairs(args.pairs)
        test_pairs = load_pairs(args.test) if args.test else None
        self.view.show_status(f"Training on {len(pairs)} pairs...")

        trainer = SiameseTrainer(config.siamese)
        net = trainer.train(pairs, test_pairs)
        history = trainer.get_history()
        save_net(net, args.out)
        if args.history:
            self.report_generator.write_siamese_history(history, args.history)

        lines = [
            f"network: {args.out}",
            f"layer_sizes: {','.join(str(s) for s in net.layer_sizes)}",
            f"final_train_loss: {history.train_loss[-1]:.6g}",
            f"threshold: {net.threshold:.6g}",
        ]
        if history.test_accuracy:
            lines.append(f"final_test_loss: {history.test_loss[-1]:.6g}")
            lines.append(f"final_test_accuracy: {history.test_accuracy[-1]:.6f}")
        self.view.show_report("\n".join(lines))
        return 0

    def verify(self, args, config: CliConfig) -> int:
        net = load_net(args.net)
        first = flatten(deserialize(args.model_a))
        second = flatten(deserialize(args.model_b))
        threshold = net.threshold if args.threshold is None else args.threshold
        same, score = verify_pair(net, first, second, threshold)
        self.view.show_report(
            f"decision: {'same' if same else 'different'}\nscore: {score:.9g}\nthreshold: {threshold:.9g}"
        )
        return 0

    def evaluate(self, args, config: CliConfig) -> int:
        report = eval_roc(load_net(args.net), load_pairs(args.pairs))
        self.report_generator.write_eval_report(report, args.out)
        self.view.show_report(self.report_generator.eval_summary(report))
        return 0

    # ==================== GALLERY ====================

    def enroll(self, args, config: CliConfig) -> int:
        gallery = Gallery(args.gallery)
        entry = None
        for path in args.models:
            model = deserialize(path)
            values = self.report_generator.read_train_report(path) or {}
            meta = EnrollmentMeta(
                point_count=int(values.get("point_count", 0)),
                final_mse=float(values.get("final_mse", "nan")),
                source_hash=values.get("source_hash", ""),
            )
            entry = gallery.enroll(args.identity, model, meta)
        self.view.show_info("enroll", f"{entry.identity} now has {len(entry.model_paths)} model(s)")
        return 0

    def match(self, args, config: CliConfig) -> int:
        results = Gallery(args.gallery).match_probe(deserialize(args.probe), load_net(args.net), args.top_k)
        self.view.show_data(pd.DataFrame({
            "rank": range(1, len(results) + 1),
            "identity": [r.identity for r in results],
            "score": [r.score for r in results],
        }))
        return 0

    # ==================== SYNTHETIC DATA ====================

    def _write_cloud(self, cloud, path: str) -> None:
        save_cloud(cloud, path)
        save_landmarks(cloud.landmark_indices, _sibling(path, ".lm"))

    def synth(self, args, config: CliConfig) -> int:
        os.makedirs(args.out_dir, exist_ok=True)
        reference_path = os.path.join(args.out_dir, "reference.xyz")
        np.savetxt(reference_path, reference_landmarks(), fmt="%.17g")

        if args.kind == "benchmark":
            cloud = sample_cloud(gaussian_bump(), args.points, args.noise, config.seed, args.pose_degrees)
            self._write_cloud(cloud, os.path.join(args.out_dir, "benchmark.xyz"))
            written = 1
        else:
            identities = toy_identities(args.identities, args.samples, args.points, args.noise,
                                        args.pose_degrees, seed=config.seed)
            written = 0
            for identity, clouds in identities:
                for index, cloud in enumerate(clouds):
                    self._write_cloud(cloud, os.path.join(args.out_dir, f"{identity}_s{index}.xyz"))
                    written += 1

        self.view.show_info("synth", f"{written} cloud(s) and reference.xyz written to {args.out_dir}")
        return 0
