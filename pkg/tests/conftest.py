"""Pin BLAS to one thread before numpy loads: the timing bars in the
acceptance tests are single-core figures, and threaded kernels can
reorder float reductions."""

import os

for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
            "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(var, "1")
