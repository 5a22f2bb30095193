"""Select the ray-marching kernel backend at import time.

The compiled extension is used when it imports; ``OCCRENDER_BACKEND=python``
forces the numpy implementation.
"""

from __future__ import annotations

import os

from . import _fallback

BACKENDS = {"python": _fallback}

try:
    from . import _kernels
except ImportError:  # extension not built
    _kernels = None
else:
    BACKENDS["compiled"] = _kernels


def _default() -> str:
    requested = os.environ.get("OCCRENDER_BACKEND", "").strip().lower()
    if requested:
        if requested not in BACKENDS:
            raise ImportError(f"OCCRENDER_BACKEND={requested!r} unavailable; have {sorted(BACKENDS)}")
        return requested
    return "compiled" if "compiled" in BACKENDS else "python"


ACTIVE = _default()


def get(name: str | None = None):
    return BACKENDS[name or ACTIVE]


def available() -> list[str]:
    return sorted(BACKENDS)
