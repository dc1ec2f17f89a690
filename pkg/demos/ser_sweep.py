"""Small SER/NMSE sweep of every receiver, written to demos/ser_sweep.csv.

    python demos/ser_sweep.py && python demos/plot_results.py demos/ser_sweep.csv
"""
from pathlib import Path

from vbjed.harness import SimConfig, emit_results, run_experiment

cfg = SimConfig(
    M=16,
    K=4,
    snr_grid_db=(0.0, 5.0, 10.0, 15.0, 20.0),
    methods=("vb-online", "vb-online-interleaved(2)", "kf", "lmmse", "genie"),
    trials=20,
    I_tr=30,
    seed=1,
)
out = emit_results(run_experiment(cfg), Path(__file__).with_name("ser_sweep.csv"), cfg)
print(out.read_text())
