"""Console entry point.

Applies the FIELDFUSE_THREADS override before numpy is imported, since BLAS
thread pools are sized at import time.
"""

import os
import sys


def main() -> int:
    threads = os.environ.get("FIELDFUSE_THREADS")
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, threads)
    from .cli import main as cli_main

    return cli_main()


if __name__ == "__main__":
    sys.exit(main())
