"""Backend selection for the decode hot path.

The compiled extension is preferred when importable; the numpy fallback
is always available. ``MICROVLM_BACKEND=python`` or ``=compiled`` in the
environment pins a backend explicitly (the latter raises if the
extension was not built).
"""

from __future__ import annotations

import os

from . import _pykernels

_FORCED = os.environ.get("MICROVLM_BACKEND", "").strip().lower()

if _FORCED == "python":
    _impl = _pykernels
else:
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]
    except ImportError:
        if _FORCED == "compiled":
            raise ImportError(
                "MICROVLM_BACKEND=compiled but the microvlm._ckernels extension "
                "is not built; reinstall the package with a C compiler available"
            ) from None
        _impl = _pykernels

BACKEND: str = _impl.BACKEND
layer_decode = _impl.layer_decode


def available_backends() -> dict[str, object]:
    """All importable kernel modules, keyed by backend name (for benchmarks)."""
    impls: dict[str, object] = {_pykernels.BACKEND: _pykernels}
    try:
        from . import _ckernels

        impls[_ckernels.BACKEND] = _ckernels
    except ImportError:
        pass
    return impls
