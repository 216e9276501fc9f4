import logging
from pathlib import Path
from typing import List, Optional, Tuple

from pydantic import ValidationError

from ..core.config import settings
from ..core.manifest import MANIFEST_NAME, load_manifest
from ..models.schemas import RunManifest, SearchCheckpoint, SearchResult

logger = logging.getLogger(__name__)


class RunStore:
    """Read-only view over the run directories under one output root"""

    def __init__(self, root=None):
        self.root: Optional[Path] = Path(root) if root is not None else None

    def _run_dirs(self) -> List[Path]:
        if self.root is None or not self.root.is_dir():
            return []
        return [d for d in self.root.iterdir() if (d / MANIFEST_NAME).is_file()]

    def list_runs(self) -> List[Tuple[Path, RunManifest]]:
        runs = []
        for run_dir in self._run_dirs():
            try:
                runs.append((run_dir, load_manifest(run_dir)))
            except (ValidationError, ValueError) as e:
                logger.warning(f"Skipping unreadable manifest in {run_dir}: {e}")
        return sorted(runs, key=lambda r: r[1].created_at, reverse=True)

    def get_run(self, run_id: str) -> Optional[Tuple[Path, RunManifest]]:
        for run_dir, manifest in self.list_runs():
            if manifest.run_id == run_id or run_dir.name == run_id:
                return run_dir, manifest
        return None

    def search_result(self, run_id: str) -> Optional[SearchResult]:
        """Final search result, or the trials of an unfinished search's checkpoint"""
        found = self.get_run(run_id)
        if found is None:
            return None
        run_dir = found[0]
        if (run_dir / "search_result.json").is_file():
            return SearchResult.model_validate_json((run_dir / "search_result.json").read_text(encoding="utf-8"))
        if (run_dir / "search_checkpoint.json").is_file():
            checkpoint = SearchCheckpoint.model_validate_json((run_dir / "search_checkpoint.json").read_text(encoding="utf-8"))
            return SearchResult(trials=checkpoint.trials)
        return None


store = RunStore()


async def get_run_store() -> RunStore:
    return store


async def open_run_store():
    """Point the store at the configured output root"""
    store.root = Path(settings.output_root)
    logger.info(f"Serving runs from {store.root.resolve()}")


async def close_run_store():
    store.root = None
