"""Hot-kernel backend (attention and sampled-softmax head), chosen once at import.

``DRIFTSELECT_BACKEND=python`` forces the NumPy kernels; ``compiled``
requires the Cython extension; anything else (the default) uses the
extension when it is importable.
"""

import os

from . import _kernels_py

_requested = os.environ.get("DRIFTSELECT_BACKEND", "auto").lower()

try:
    from . import _kernels_c
except ImportError:  # extension not built
    _kernels_c = None
    if _requested == "compiled":
        raise

if _kernels_c is not None and _requested != "python":
    BACKEND = "compiled"
    _impl = _kernels_c
else:
    BACKEND = "python"
    _impl = _kernels_py

_NAMES = ("attention_forward", "attention_backward", "sampled_logits", "sampled_backward")
attention_forward = _impl.attention_forward
attention_backward = _impl.attention_backward
sampled_logits = _impl.sampled_logits
sampled_backward = _impl.sampled_backward


def available_backends():
    return {"python": _kernels_py, **({"compiled": _kernels_c} if _kernels_c is not None else {})}


def use_backend(name: str) -> str:
    """Switch the active kernels; returns the previous backend name."""
    global BACKEND, _impl
    impls = available_backends()
    if name not in impls:
        raise ValueError(f"backend {name!r} unavailable (have {sorted(impls)})")
    prev, BACKEND, _impl = BACKEND, name, impls[name]
    for fn in _NAMES:
        globals()[fn] = getattr(_impl, fn)
    return prev
