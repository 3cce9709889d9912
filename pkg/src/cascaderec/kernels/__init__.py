"""Hot-kernel backend selection.

Uses the compiled Cython extension when importable, the numpy fallback
otherwise. Set ``CASCADEREC_NO_EXT=1`` to force the fallback (golden tests
and benchmarks rely on this).
"""

import os

from . import fallback

if os.environ.get("CASCADEREC_NO_EXT"):
    _impl = fallback
    BACKEND = "fallback"
else:
    try:
        from . import _core as _impl  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:
        _impl = fallback
        BACKEND = "fallback"

nearest_centroid = _impl.nearest_centroid
gated_attention = _impl.gated_attention
gated_attention_backward = _impl.gated_attention_backward
attention_mask = fallback.attention_mask


def backend_name() -> str:
    return BACKEND
