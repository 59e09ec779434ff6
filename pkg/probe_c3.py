"""Probe: matrix-vs-stacked model comparison, one replication per direction."""
import resource
import time

from matrixdfm.simulate import run_experiment


def rss():
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0


for truth in ("matrix", "vector"):
    t0 = time.perf_counter()
    rep = run_experiment("mdfm-vs-vdfm", replications=1, seed=0,
                         burn_in=500, draws=1200, thin=3, n_is=2000,
                         truth=truth)
    t1 = time.perf_counter()
    print(f"{truth}-truth rep took {t1 - t0:.0f}s, peak RSS {rss():.0f} MB",
          flush=True)
    print(rep, flush=True)
