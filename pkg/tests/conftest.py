# Pin BLAS/OpenMP to one thread before numpy loads anywhere; the engine's
# determinism contract assumes single-threaded kernels.
import os

for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
    os.environ.setdefault(_var, "1")
