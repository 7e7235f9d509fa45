from __future__ import annotations

import sys
from functools import lru_cache
from pathlib import Path

PRESET_DIR = ("data", "configs")


@lru_cache(maxsize=1)
def _package_root() -> Path:
    """Return the base directory for bundled presets."""

    base = getattr(sys, "_MEIPASS", None)
    if base:
        # PyInstaller で固めた場合は一時展開ディレクトリを指す
        return Path(base).resolve()
    return Path(__file__).resolve().parent.parent


def resource_path(*relative_parts: str) -> Path:
    """Resolve a bundled resource path (also inside PyInstaller bundles)."""

    if not relative_parts:
        return _package_root()
    return _package_root().joinpath(*relative_parts)


def preset_names() -> list[str]:
    """Names accepted by ``--config NAME`` without a path."""

    directory = resource_path(*PRESET_DIR)
    if not directory.is_dir():
        return []
    return sorted(path.stem for path in directory.glob("*.toml"))
