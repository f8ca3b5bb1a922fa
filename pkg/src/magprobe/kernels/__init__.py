"""Hot evaluation kernels with backend selection.

The compiled Cython core is preferred when it was built; otherwise the
vectorized numpy fallback is used. Set MAGPROBE_KERNELS=python (or =compiled)
to force a backend, e.g. for the comparison benchmark.

Both backends expose the same five callables:

    cel_batch, dipole_field_batch, measurement_model,
    cylinder_field_batch, dipole_wrench_fast
"""

from __future__ import annotations

import os

from . import _core_py

_requested = os.environ.get("MAGPROBE_KERNELS", "").strip().lower()

_impl = None
if _requested in ("", "compiled"):
    try:
        from . import _core as _impl  # type: ignore[attr-defined]
    except ImportError:
        _impl = None
        if _requested == "compiled":
            raise ImportError(
                "MAGPROBE_KERNELS=compiled but the extension is not built; "
                "run `pip install -e . --no-build-isolation`"
            )
if _impl is None:
    _impl = _core_py

BACKEND = "compiled" if _impl is not _core_py else "python"

cel_batch = _impl.cel_batch
dipole_field_batch = _impl.dipole_field_batch
measurement_model = _impl.measurement_model
cylinder_field_batch = _impl.cylinder_field_batch
dipole_wrench_fast = _impl.dipole_wrench_fast


def available_backends() -> dict[str, object]:
    """Importable backend modules keyed by name (for tests and benchmarks)."""
    backends: dict[str, object] = {"python": _core_py}
    try:
        from . import _core  # type: ignore[attr-defined]

        backends["compiled"] = _core
    except ImportError:
        pass
    return backends
