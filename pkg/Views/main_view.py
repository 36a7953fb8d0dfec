"""
MainView: command-line front end for the face modeling pipeline.
"""

import argparse
import logging
import sys
from typing import List, Optional

import pandas as pd

from Models.config import add_config_flags

logger = logging.getLogger("facemodels")

LOG_FORMAT = "%(asctime)s [%(levelname)s] %(name)s: %(message)s"


class _ArgumentParser(argparse.ArgumentParser):
    """Usage errors exit with status 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


class MainView:
    """
    Parses the command line, hands the parsed command to the presenter and
    renders whatever the presenter sends back.
    """

    def __init__(self):
        self.presenter = None
        self.parser = self._build_parser()

    def set_presenter(self, presenter) -> None:
        self.presenter = presenter

    # ==================== PARSER SETUP ====================

    def _common_options(self) -> argparse.ArgumentParser:
        common = _ArgumentParser(add_help=False)
        verbosity = common.add_mutually_exclusive_group()
        verbosity.add_argument("-v", "--verbose", action="store_true", help="debug logging")
        verbosity.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")
        add_config_flags(common)
        return common

    def _build_parser(self) -> argparse.ArgumentParser:
        parser = _ArgumentParser(
            prog="facemodels",
            description="Compact neural face models: fitting, registration and verification.",
        )
        common = self._common_options()
        commands = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

        def command(name: str, handler: str, help_text: str) -> argparse.ArgumentParser:
            sub = commands.add_parser(name, parents=[common], help=help_text, description=help_text)
            sub.set_defaults(handler=handler)
            return sub

        fit = command("fit", "fit", "fit a face model to a cloud, or to every cloud in a directory")
        fit.add_argument("cloud", help="XYZ cloud file or directory of .xyz files")
        fit.add_argument("--out", required=True, help="model file, or output directory in batch mode")
        fit.add_argument("--landmarks", help="landmark index file (default: <cloud>.lm next to the cloud)")
        fit.add_argument("--reference", help="reference landmark coordinates; enables landmark registration")
        fit.add_argument("--icp-reference", help="reference cloud; enables ICP refinement")
        fit.add_argument("--no-cache", action="store_true", help="do not read or write parsed-cloud caches")

        reconstruct = command("reconstruct", "reconstruct", "evaluate a model on a regular grid")
        reconstruct.add_argument("model")
        reconstruct.add_argument("--out", required=True, help="XYZ output file")
        reconstruct.add_argument("--x-min", type=float, default=-1.0)
        reconstruct.add_argument("--x-max", type=float, default=1.0)
        reconstruct.add_argument("--y-min", type=float, default=-1.0)
        reconstruct.add_argument("--y-max", type=float, default=1.0)
        reconstruct.add_argument("--nx", type=int, default=100)
        reconstruct.add_argument("--ny", type=int, default=100)
        reconstruct.add_argument("--like", metavar="CLOUD",
                                 help="cover this normalized cloud's extent instead of the explicit bounds")
        reconstruct.add_argument("--factor", type=float, default=4.0,
                                 help="grid nodes per cloud point with --like")

        register = command("register", "register", "bring a cloud into the canonical pose")
        register.add_argument("cloud")
        register.add_argument("--landmarks", help="landmark index file (default: <cloud>.lm)")
        register.add_argument("--reference", required=True, help="reference landmark coordinates")
        register.add_argument("--icp-reference", help="reference cloud for ICP refinement")
        register.add_argument("--out", required=True, help="registered XYZ output file")

        augment = command("augment", "augment", "write hidden-unit permutations of a model")
        augment.add_argument("model")
        augment.add_argument("--count", type=int, required=True)
        augment.add_argument("--out-dir", required=True)

        pairs = command("pairs", "pairs", "generate labeled same/different model pairs")
        source = pairs.add_mutually_exclusive_group(required=True)
        source.add_argument("--gallery", help="gallery directory")
        source.add_argument("--models", help="directory of <identity>_<name>.nf3d model files")
        pairs.add_argument("--positives", type=int, required=True)
        pairs.add_argument("--negatives", type=int, required=True)
        pairs.add_argument("--augment", type=int, default=0, help="permutations per model")
        pairs.add_argument("--split", choices=["none", "pairs", "identities"], default="none")
        pairs.add_argument("--train-fraction", type=float, default=0.5)
        pairs.add_argument("--out", required=True, help="pair file (training pairs when splitting)")
        pairs.add_argument("--test-out", help="held-out pair file when splitting")

        train = command("train-verifier", "train_verifier", "train the Siamese verifier on a pair file")
        train.add_argument("pairs")
        train.add_argument("--out", required=True, help="network file")
        train.add_argument("--test", help="held-out pair file tracked during training")
        train.add_argument("--history", help="CSV of per-epoch loss and accuracy")

        verify = command("verify", "verify", "decide whether two models show the same person")
        verify.add_argument("net")
        verify.add_argument("model_a")
        verify.add_argument("model_b")
        verify.add_argument("--threshold", type=float, help="default: the threshold stored in the network")

        evaluate = command("eval", "evaluate", "ROC and precision-recall of a network on a pair file")
        evaluate.add_argument("net")
        evaluate.add_argument("pairs")
        evaluate.add_argument("--out", required=True, help="CSV of threshold, fpr, tpr, precision, recall")

        enroll = command("enroll", "enroll", "add models of one identity to a gallery")
        enroll.add_argument("gallery")
        enroll.add_argument("identity")
        enroll.add_argument("models", nargs="+")

        match = command("match", "match", "rank gallery identities against a probe model")
        match.add_argument("gallery")
        match.add_argument("net")
        match.add_argument("probe")
        match.add_argument("--top-k", type=int, default=5)

        synth = command("synth", "synth", "write synthetic clouds with landmark files")
        synth.add_argument("out_dir")
        synth.add_argument("--kind", choices=["benchmark", "toy"], default="benchmark")
        synth.add_argument("--points", type=int, default=5000)
        synth.add_argument("--noise", type=float, default=0.005)
        synth.add_argument("--identities", type=int, default=10)
        synth.add_argument("--samples", type=int, default=4)
        synth.add_argument("--pose-degrees", type=float, default=0.0)

        return parser

    def _configure_logging(self, args: argparse.Namespace) -> None:
        level = logging.INFO
        if args.verbose:
            level = logging.DEBUG
        elif args.quiet:
            level = logging.WARNING
        logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr, force=True)

    # ==================== DISPLAY METHODS ====================

    def show_status(self, message: str) -> None:
        logger.info(message)

    def show_info(self, title: str, message: str) -> None:
        print(f"{title}: {message}")

    def show_error(self, message: str) -> None:
        print(f"error: {message}", file=sys.stderr)

    def show_data(self, data: pd.DataFrame, max_rows: int = 1000) -> None:
        print(data.head(max_rows).to_string(index=False))
        if len(data) > max_rows:
            self.show_status(f"Showing {max_rows} of {len(data)} rows")

    def show_report(self, report_text: str) -> None:
        print(report_text.rstrip("\n"))

    # ==================== RUN ====================

    def run(self, argv: Optional[List[str]] = None) -> int:
        if not self.presenter:
            self.show_error("Presenter not set")
            return 1
        try:
            args = self.parser.parse_args(argv)
        except SystemExit as exc:
            return exc.code if isinstance(exc.code, int) else 1
        self._configure_logging(args)
        return self.presenter.run_command(args.handler, args)
