"""Backend selection for the clustering hot loops.

The compiled Cython module is used when it was built; otherwise the numpy
fallback. Set ``REID_UDA_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _kernels_py

python_backend = _kernels_py

compiled_backend = None
if os.environ.get("REID_UDA_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as compiled_backend  # type: ignore[no-redef]
    except ImportError:  # extension not built
        compiled_backend = None

backend = compiled_backend if compiled_backend is not None else python_backend
BACKEND = backend.BACKEND

nearest_centroid = backend.nearest_centroid
candidate_costs = backend.candidate_costs
minibatch_step = backend.minibatch_step


def available_backends():
    out = {"python": python_backend}
    if compiled_backend is not None:
        out["cython"] = compiled_backend
    return out
