import logging
import os
from typing import Dict, Optional, Sequence

import pandas as pd

from .evaluation import EvalReport
from .lm_trainer import StopReason, TrainReport
from .siamese import SiameseHistory

logger = logging.getLogger(__name__)

REPORT_SUFFIX = ".report.txt"
HISTORY_SUFFIX = ".history.csv"


def report_path(model_path: str) -> str:
    return os.path.splitext(model_path)[0] + REPORT_SUFFIX


class ReportGenerator:
    """
    Writes training and evaluation reports next to the artifacts they describe.
    """

    def __init__(self):
        self.report_paths: Dict[str, str] = {}

    def train_report_text(self, report: TrainReport, source: str = "", source_hash: str = "") -> str:
        lines = [
            f"source: {source}",
            f"source_hash: {source_hash}",
            f"point_count: {report.point_count}",
            f"hidden_count: {report.hidden_count}",
            f"stop_reason: {report.stop_reason.value}",
            f"epochs_used: {report.epochs_used}",
            f"final_mse: {report.final_mse:.9g}",
            f"final_mu: {report.final_mu:.6g}",
            f"gradient_norm: {report.gradient_norm:.6g}",
            f"regression_r: {report.regression_r:.9f}",
        ]
        return "\n".join(lines) + "\n"

    def train_history_frame(self, report: TrainReport) -> pd.DataFrame:
        # Step 0 is the initial weights, then one row per accepted step.
        return pd.DataFrame({
            "step": range(len(report.mse_history)),
            "mse": report.mse_history,
        })

    def write_train_report(self, report: TrainReport, model_path: str,
                           source: str = "", source_hash: str = "") -> str:
        text_path = report_path(model_path)
        with open(text_path, "w") as f:
            f.write(self.train_report_text(report, source, source_hash))
        history_path = os.path.splitext(model_path)[0] + HISTORY_SUFFIX
        self.train_history_frame(report).to_csv(history_path, index=False)
        self.report_paths["train_report"] = text_path
        self.report_paths["train_history"] = history_path
        return text_path

    def read_train_report(self, model_path: str) -> Optional[Dict[str, str]]:
        path = report_path(model_path)
        if not os.path.exists(path):
            return None
        values = {}
        with open(path, "r") as f:
            for line in f:
                key, sep, value = line.partition(":")
                if sep:
                    values[key.strip()] = value.strip()
        return values

    def census(self, reports: Sequence[TrainReport]) -> pd.DataFrame:
        """How many fits stopped on each criterion, and how well they fit."""
        frame = pd.DataFrame({
            "stop_reason": [r.stop_reason.value for r in reports],
            "final_mse": [r.final_mse for r in reports],
            "epochs_used": [r.epochs_used for r in reports],
        })
        order = {reason.value: position for position, reason in enumerate(StopReason)}
        table = (
            frame.groupby("stop_reason")
            .agg(models=("final_mse", "size"),
                 mean_final_mse=("final_mse", "mean"),
                 max_final_mse=("final_mse", "max"),
                 mean_epochs=("epochs_used", "mean"))
            .reset_index()
        )
        return table.sort_values("stop_reason", key=lambda s: s.map(order)).reset_index(drop=True)

    def write_census(self, table: pd.DataFrame, path: str) -> str:
        table.to_csv(path, index=False)
        self.report_paths["census"] = path
        return path

    def eval_summary(self, report: EvalReport) -> str:
        return (
            f"pairs={report.positives + report.negatives} positives={report.positives} "
            f"negatives={report.negatives} auc={report.auc:.6f} "
            f"accuracy={report.accuracy_at_threshold:.6f} threshold={report.threshold:.6g}"
        )

    def write_eval_report(self, report: EvalReport, path: str) -> str:
        report.table.to_csv(path, index=False)
        summary_path = os.path.splitext(path)[0] + ".summary.txt"
        with open(summary_path, "w") as f:
            f.write(self.eval_summary(report) + "\n")
        self.report_paths["eval_csv"] = path
        self.report_paths["eval_summary"] = summary_path
        return path

    def siamese_history_frame(self, history: SiameseHistory) -> pd.DataFrame:
        frame = pd.DataFrame({
            "epoch": range(1, len(history.train_loss) + 1),
            "train_loss": history.train_loss,
        })
        if history.test_loss:
            frame["test_loss"] = history.test_loss
            frame["test_accuracy"] = history.test_accuracy
        return frame

    def write_siamese_history(self, history: SiameseHistory, path: str) -> str:
        self.siamese_history_frame(history).to_csv(path, index=False)
        self.report_paths["siamese_history"] = path
        return path

    def get_report_paths(self) -> Dict[str, str]:
        return self.report_paths.copy()
