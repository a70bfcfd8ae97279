"""Pin BLAS/OpenMP thread pools to one thread before numpy loads.

Several timing-sensitive tests assume single-threaded execution, and the
kernels are deterministic only modulo reduction order, which thread pools
could otherwise change.
"""

import os

for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
    os.environ.setdefault(_var, "1")
