"""Hot loops: batched log-posterior evaluation and random-walk Metropolis.

The compiled extension ``afin.kernels._ckernels`` is used when it imports;
otherwise (or when ``AFIN_PURE_PYTHON=1``) the numpy versions in
``_pykernels`` are used. ``BACKEND`` names the active implementation.
"""
import os

from . import _pykernels
from .packing import LIKELIHOOD_CODES, PRIOR_CODES, PackedTask, pack_task

_compiled = None
if os.environ.get("AFIN_PURE_PYTHON") != "1":
    try:
        from . import _ckernels as _compiled
    except ImportError:
        _compiled = None

if _compiled is not None:
    BACKEND = "compiled"
    log_posterior_batch = _compiled.log_posterior_batch
    rwm_run = _compiled.rwm_run
else:
    BACKEND = "python"
    log_posterior_batch = _pykernels.log_posterior_batch
    rwm_run = _pykernels.rwm_run

__all__ = [
    "BACKEND",
    "LIKELIHOOD_CODES",
    "PRIOR_CODES",
    "PackedTask",
    "log_posterior_batch",
    "pack_task",
    "rwm_run",
]
