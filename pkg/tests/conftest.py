"""Shared test setup.

Thread caps for the numeric libraries are pinned to 1 before numpy is
first imported anywhere in the test process, mirroring `--threads 1` on
the command line. Multi-threaded BLAS reductions reorder sums, and the
determinism tests compare results bit for bit.
"""

import os

for _var in (
    "OPENBLAS_NUM_THREADS",
    "OMP_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
):
    os.environ[_var] = "1"
