import os

# Single-threaded BLAS: fixed reduction order for the determinism checks and
# no oversubscription when the benchmark harness forks worker processes.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")
