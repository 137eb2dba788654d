import os
import sys

# Honor --threads before numpy initializes its BLAS thread pool.
if "--threads" in sys.argv:
    try:
        n = sys.argv[sys.argv.index("--threads") + 1]
        int(n)
    except (IndexError, ValueError):
        pass
    else:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, n)

from nap.cli import main

sys.exit(main())
