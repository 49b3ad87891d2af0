"""Pin the BLAS thread pools before numpy loads anywhere in the suite.

The acceptance timing budgets are stated for 8 CPU threads; setting the env
here (conftest imports before any test module) makes the pools deterministic
instead of inheriting whatever the machine defaults to.
"""

import os

for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "8")
