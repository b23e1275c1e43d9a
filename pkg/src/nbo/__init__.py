"""Low-latency next-best-offer serving: cached-state LSTM + tree ensemble."""

import os

# Inference must stay single-threaded per call; only effective before numpy loads BLAS.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

__version__ = "0.1.0"
