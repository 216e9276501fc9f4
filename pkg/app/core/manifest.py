"""Run manifests: canonical config digests and library versions beside every output"""

import hashlib
import json
import logging
import platform
from datetime import datetime
from importlib import metadata
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from pydantic import BaseModel

from ..models.schemas import RunConfig, RunManifest

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
TRACKED_PACKAGES = ("numpy", "scipy", "torch", "pandas", "pydantic", "curriculum-bo")


def canonical_json(obj: Union[BaseModel, Dict[str, Any]]) -> str:
    if isinstance(obj, BaseModel):
        obj = obj.model_dump(mode="json")
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_digest(obj: Union[BaseModel, Dict[str, Any]]) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def library_versions() -> Dict[str, str]:
    versions = {"python": platform.python_version()}
    for name in TRACKED_PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = "unknown"
    return versions


def make_run_id(config: RunConfig, created_at: Optional[datetime] = None) -> str:
    created_at = created_at or datetime.utcnow()
    return f"{config.mode.value}-{created_at:%Y%m%dT%H%M%S}-{config_digest(config)[:8]}"


def write_manifest(out_dir, config: RunConfig, outputs: List[str], digest: Optional[str] = None) -> RunManifest:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(
        run_id=make_run_id(config),
        mode=config.mode,
        profile=config.profile,
        seed=config.seed,
        config_digest=digest or config_digest(config),
        config=config,
        versions=library_versions(),
        outputs=sorted(outputs),
    )
    (out_dir / MANIFEST_NAME).write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
    logger.info(f"Wrote manifest {manifest.run_id} to {out_dir / MANIFEST_NAME}")
    return manifest


def load_manifest(path) -> RunManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    return RunManifest.model_validate_json(path.read_text(encoding="utf-8"))
