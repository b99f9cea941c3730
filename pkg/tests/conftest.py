import os

# Pin BLAS threading before numpy loads: keeps timings sane on small boxes
# and removes the one environment knob that could vary between runs.
for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")
