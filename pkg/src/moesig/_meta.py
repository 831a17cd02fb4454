"""Provenance metadata embedded into every output artifact."""

from __future__ import annotations

import hashlib
import json
from typing import Mapping


def config_digest(config: Mapping) -> str:
    """Short stable digest of a JSON-serializable configuration."""
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def artifact_meta(seed: int | None, digest: str | None) -> dict:
    """The (seed, config digest, version) block written into artifacts."""
    from moesig import __version__

    meta: dict[str, object] = {"tool_version": __version__}
    if seed is not None:
        meta["seed"] = int(seed)
    if digest is not None:
        meta["config_digest"] = digest
    return meta
