"""Optional MLflow run tracking."""

import logging
from typing import Any, Dict, Optional

logger = logging.getLogger(__name__)


class RunTracker:
    """Logs params and metrics to MLflow when an experiment name is given.

    MLflow is imported lazily; without an experiment every call is a no-op.
    """

    def __init__(self, experiment: Optional[str] = None, run_name: Optional[str] = None):
        self.experiment = experiment
        self.run_name = run_name
        self._mlflow: Any = None
        self._run: Any = None

    @property
    def active(self) -> bool:
        return self._run is not None

    def __enter__(self) -> "RunTracker":
        if self.experiment:
            try:
                import mlflow
            except ImportError:
                logger.warning("mlflow is not installed, run tracking disabled")
                return self
            mlflow.set_experiment(self.experiment)
            self._mlflow = mlflow
            self._run = mlflow.start_run(run_name=self.run_name)
            logger.info(f"Tracking run in MLflow experiment '{self.experiment}'")
        return self

    def __exit__(self, *exc_info: object) -> None:
        if self._run is not None:
            self._mlflow.end_run()
            self._run = None

    def log_params(self, params: Dict[str, Any]) -> None:
        if self.active:
            self._mlflow.log_params({k: str(v) for k, v in params.items()})

    def log_metrics(self, metrics: Dict[str, float], step: Optional[int] = None) -> None:
        if self.active:
            self._mlflow.log_metrics({k: float(v) for k, v in metrics.items()}, step=step)

    def log_artifact(self, path: str) -> None:
        if self.active:
            self._mlflow.log_artifact(path)
