"""Kernel backend selection.

The compiled extension is preferred when importable; the numpy reference
implementation is the fallback. Set POISONLAB_PURE_PYTHON=1 to force the
fallback (useful for benchmarking and parity debugging).
"""

from __future__ import annotations

import os

if os.environ.get("POISONLAB_PURE_PYTHON", "") not in ("", "0"):
    from . import purepy as _impl

    BACKEND = "python"
else:
    try:
        from . import _core as _impl  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:
        from . import purepy as _impl

        BACKEND = "python"

td_adam_train = _impl.td_adam_train

__all__ = ["td_adam_train", "BACKEND"]
