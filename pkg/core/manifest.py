import json
import logging
import os
import shutil
import tempfile
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional

from core.config import dump_config
from core.errors import OverwriteRefusedError
from core.storage import atomic_write_text
from ontology.config import ExperimentConfig

MANIFEST_FILE = "manifest.json"
RESOLVED_CONFIG_FILE = "config.resolved.json"


class RunManifest:
    """Owns one run directory and records every artifact written into it.

    Artifacts go to a hidden staging sibling of the run directory. ``finalize``
    writes the manifest and moves the staged files into place; leaving the
    ``with`` block without finalizing (an exception included) discards them.
    """

    def __init__(self, output_dir: str, command: str, force: bool = False):
        self._target = Path(output_dir)
        self._command = command
        self._force = force
        self._artifacts: List[Dict[str, str]] = []
        self._extra: Dict[str, Any] = {}
        self._published = False

        if self._target.exists() and any(self._target.iterdir()) and not force:
            logging.warning(f"Run directory {self._target} already holds files, not overwriting")
            raise OverwriteRefusedError(self._target)
        self._target.parent.mkdir(parents=True, exist_ok=True)
        self._dir = Path(tempfile.mkdtemp(prefix=f".{self._target.name}.", suffix=".staging",
            dir=self._target.parent))

    def __enter__(self) -> "RunManifest":
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        if not self._published:
            self.discard()
        return False

    @property
    def output_dir(self) -> Path:
        """Where artifacts are written until the run is finalized."""
        return self._dir

    @property
    def target_dir(self) -> Path:
        return self._target

    def path(self, name: str) -> Path:
        return self._dir / name

    def record(self, path: Path, kind: str) -> Path:
        rel = os.path.relpath(path, self._dir)
        self._artifacts.append({"path": rel, "kind": kind})
        logging.info(f"Wrote {kind} artifact {rel}")
        return path

    def write_json(self, name: str, data: Any, kind: str = "json") -> Path:
        path = atomic_write_text(self.path(name), json.dumps(data, indent=2, sort_keys=True) + "\n")
        return self.record(path, kind)

    def write_text(self, name: str, text: str, kind: str = "text") -> Path:
        return self.record(atomic_write_text(self.path(name), text), kind)

    def write_config(self, config: ExperimentConfig) -> Path:
        return self.write_json(RESOLVED_CONFIG_FILE, dump_config(config), kind="config")

    def note(self, key: str, value: Any) -> None:
        self._extra[key] = value

    def discard(self) -> None:
        if self._dir.exists():
            shutil.rmtree(self._dir, ignore_errors=True)
            logging.warning(f"Discarded unfinished run staged for {self._target}")

    def _publish(self) -> None:
        if not self._target.exists():
            os.replace(self._dir, self._target)
            return
        # forced run into an existing directory: staged files replace same-named ones
        for entry in sorted(self._dir.iterdir()):
            destination = self._target / entry.name
            if destination.is_dir():
                shutil.rmtree(destination)
            os.replace(entry, destination)
        self._dir.rmdir()

    def finalize(self, config: Optional[ExperimentConfig] = None) -> Path:
        manifest = {
            "command": self._command,
            "timestamp": datetime.now().isoformat(),
            "config": dump_config(config) if config is not None else None,
            "artifacts": list(self._artifacts),
        }
        manifest.update(self._extra)
        atomic_write_text(self.path(MANIFEST_FILE), json.dumps(manifest, indent=2) + "\n")
        self._publish()
        self._published = True
        path = self._target / MANIFEST_FILE
        logging.info(f"Run manifest with {len(self._artifacts)} artifacts saved to {path}")
        return path


def read_manifest(run_dir: str) -> Dict[str, Any]:
    with open(Path(run_dir) / MANIFEST_FILE, "r", encoding="utf-8") as f:
        return json.load(f)
