"""Backend selection for the hot kernels.

The compiled extension is preferred; set ``HONEYDOC_PURE=1`` to force the
pure-Python implementation.
"""

import os

if os.environ.get("HONEYDOC_PURE") == "1":
    from honeydoc import _kernels_py as _impl
else:
    try:
        from honeydoc import _kernels as _impl
    except ImportError:  # extension not built
        from honeydoc import _kernels_py as _impl

BACKEND = _impl.BACKEND
HEADER_WIDTH = _impl.HEADER_WIDTH

seq_add = _impl.seq_add
pack_rows = _impl.pack_rows
match_first = _impl.match_first
first_rule_match = _impl.first_rule_match
bin_counts = _impl.bin_counts

__all__ = [
    "BACKEND",
    "HEADER_WIDTH",
    "seq_add",
    "pack_rows",
    "match_first",
    "first_rule_match",
    "bin_counts",
]
