"""Result emission: long-format CSV plus a JSON metadata sidecar per run."""

import json
import logging
import threading
from pathlib import Path
from typing import List, Optional, Tuple

import pandas as pd

from app.config import settings
from app.schemas import ExperimentConfig, ExperimentResponse, ResultRecord

logger = logging.getLogger(__name__)

CSV_COLUMNS = list(ResultRecord.model_fields)


class OutputService:
    """Writes experiment runs under one output directory.

    A single lock serializes writes so runs finishing on different threads never interleave.
    """

    def __init__(self, output_dir: Optional[Path] = None):
        self.output_dir = Path(output_dir or settings.output_dir)
        self._lock = threading.Lock()

    def paths_for(self, experiment_id: str) -> Tuple[Path, Path]:
        return self.output_dir / f"{experiment_id}.csv", self.output_dir / f"{experiment_id}.json"

    def emit(self, run: ExperimentResponse, config: ExperimentConfig) -> Tuple[Path, Path]:
        """Write the records as CSV (header only when empty) and the sidecar as JSON.

        Args:
            run: Finished experiment with its records and metadata
            config: The validated configuration, echoed into the sidecar

        Returns:
            Paths of the CSV file and the JSON sidecar
        """
        csv_path, json_path = self.paths_for(run.experiment_id)
        frame = records_frame(run.records)
        sidecar = {
            "experiment_id": run.experiment_id,
            "config_hash": run.config_hash,
            "config": config.model_dump(mode="json"),
            "seeds": list(config.seeds[: config.replicas]),
            "metadata": run.metadata,
            "records": [record.model_dump() for record in run.records],
        }
        with self._lock:
            try:
                self.output_dir.mkdir(parents=True, exist_ok=True)
                frame.to_csv(csv_path, index=False, encoding="utf-8", lineterminator="\n")
                json_path.write_text(json.dumps(sidecar, indent=2, sort_keys=True), encoding="utf-8")
            except Exception as e:
                logger.error(f"Error writing results for {run.experiment_id} to {self.output_dir}: {e}")
                raise
        logger.info(f"Wrote {len(run.records)} records to {csv_path}")
        return csv_path, json_path


def records_frame(records: List[ResultRecord]) -> pd.DataFrame:
    """Long-format table with the fixed column order."""
    rows = [record.model_dump() for record in records]
    return pd.DataFrame(rows, columns=CSV_COLUMNS)


def load_records(json_path: Path) -> List[ResultRecord]:
    """Records stored in a JSON sidecar."""
    try:
        payload = json.loads(Path(json_path).read_text(encoding="utf-8"))
    except Exception as e:
        logger.error(f"Error reading sidecar {json_path}: {e}")
        raise
    return [ResultRecord.model_validate(row) for row in payload["records"]]


def load_csv(csv_path: Path) -> pd.DataFrame:
    """Read a results CSV back; null values come back as NaN."""
    return pd.read_csv(csv_path, encoding="utf-8")
