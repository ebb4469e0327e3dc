"""Bundled example scenarios."""

from pathlib import Path

DIR = Path(__file__).resolve().parent


def path(name: str) -> Path:
    """Absolute path of a bundled scenario, e.g. ``path("fig1.cfg")``."""
    p = DIR / name
    if not p.is_file():
        raise FileNotFoundError(f"no bundled scenario {name!r}")
    return p


def names() -> list[str]:
    return sorted(p.name for p in DIR.glob("*.cfg"))
