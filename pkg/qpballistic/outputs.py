import csv
import json
import logging
import os
import tempfile
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from qpballistic.components import Component  # noqa: E402
from qpballistic.enums import StageStatus  # noqa: E402

__all__ = [
    "TOOL_VERSION",
    "MANIFEST_NAME",
    "RunManifest",
    "OutputWriter",
    "previous_manifest",
    "find_orphans",
    "utc_now",
]

logger = logging.getLogger(__name__)

TOOL_VERSION = "0.1.0"
MANIFEST_NAME = "manifest.json"


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _format(value) -> str:
    if isinstance(value, (float, np.floating)):
        return "%.17g" % value
    if hasattr(value, "value"):
        return str(value.value)
    return str(value)


class RunManifest(Component):
    command: str
    config_hash: str
    tool_version: str = TOOL_VERSION
    started: str
    finished: Optional[str] = None
    stages: Dict[str, StageStatus] = {}
    metrics: Dict[str, Optional[Union[float, int, str]]] = {}
    flags: List[str] = []
    files: List[str] = []

    @property
    def failed(self) -> bool:
        return any(s == StageStatus.failed for s in self.stages.values())


class OutputWriter:
    """Single writer for one command's output directory."""

    def __init__(self, root: Union[str, Path], command: str):
        self.directory = Path(root) / command
        self.directory.mkdir(parents=True, exist_ok=True)
        self.files: List[str] = []

    def clear_previous(self) -> None:
        """Remove the files listed by an earlier run's manifest."""
        manifest = previous_manifest(self.directory)
        if manifest is None:
            return
        for name in manifest.files:
            (self.directory / name).unlink(missing_ok=True)
        (self.directory / MANIFEST_NAME).unlink()

    def _path(self, name: str) -> Path:
        if name == MANIFEST_NAME:
            raise ValueError(f"{MANIFEST_NAME} is reserved for the manifest")
        if name not in self.files:
            self.files.append(name)
        return self.directory / name

    def write_csv(self, name: str, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
        path = self._path(name)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                writer.writerow([_format(v) for v in row])
        logger.debug("Wrote %s", path)
        return path

    def write_plot_data(self, name: str, header: Sequence[str], columns: Sequence[np.ndarray]) -> Path:
        path = self._path(name)
        np.savetxt(path, np.column_stack(columns), fmt="%.17g", header=" ".join(header))
        return path

    def write_svg(
        self,
        name: str,
        x: np.ndarray,
        series: Dict[str, np.ndarray],
        xlabel: str,
        ylabel: str,
    ) -> Path:
        path = self._path(name)
        with plt.rc_context({"svg.hashsalt": "qpballistic", "svg.fonttype": "none"}):
            fig, ax = plt.subplots(figsize=(6, 4))
            for label, y in series.items():
                ax.plot(x, y, label=label, linewidth=1)
            ax.set_xlabel(xlabel)
            ax.set_ylabel(ylabel)
            if len(series) > 1:
                ax.legend()
            fig.tight_layout()
            fig.savefig(path, format="svg", metadata={"Date": None})
            plt.close(fig)
        return path

    def write_json(self, name: str, data) -> Path:
        path = self._path(name)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(data, f, indent=2, sort_keys=True)
        return path

    def write_manifest(self, manifest: RunManifest) -> Path:
        manifest = manifest.model_copy(update={"files": list(self.files), "finished": utc_now()})
        fd, tmp = tempfile.mkstemp(dir=self.directory, prefix=".manifest-", suffix=".json")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as f:
                json.dump(manifest.build(), f, indent=2, sort_keys=True)
            os.replace(tmp, self.directory / MANIFEST_NAME)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        logger.info("Manifest written to %s", self.directory / MANIFEST_NAME)
        return self.directory / MANIFEST_NAME


def previous_manifest(directory: Union[str, Path]) -> Optional[RunManifest]:
    path = Path(directory) / MANIFEST_NAME
    if not path.is_file():
        return None
    try:
        return RunManifest.model_validate_json(path.read_text(encoding="utf-8"))
    except ValueError:
        logger.warning("Ignoring unreadable manifest %s", path)
        return None


def find_orphans(root: Union[str, Path]) -> List[str]:
    """Output files not referenced by the manifest of their directory."""
    root = Path(root)
    orphans = []
    for directory in sorted(p for p in root.iterdir() if p.is_dir()):
        manifest = previous_manifest(directory)
        listed = set(manifest.files) if manifest else set()
        for path in sorted(directory.iterdir()):
            if path.name == MANIFEST_NAME or path.name.startswith(".manifest-"):
                continue
            if path.name not in listed:
                orphans.append(str(path.relative_to(root)))
    return orphans
