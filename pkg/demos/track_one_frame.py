"""Track one frame with the online solver and watch eta and the channel error.

    python demos/track_one_frame.py
"""
import numpy as np

from vbjed.channel import (
    Constellation,
    CorrelationSpec,
    FrameLayout,
    GaussMarkovParams,
    generate_frame,
    make_correlation,
    noise_variance_from_snr,
)
from vbjed.harness import compute_ser
from vbjed.numerics import rng_stream
from vbjed.vb_online import VBConfig, run_frame_online

M, K, SNR_DB, ETA = 16, 4, 15.0, 0.985

R = make_correlation(CorrelationSpec("exponential", M, 0.5 + 0.5j))
params = GaussMarkovParams(np.full(K, ETA), R)
qpsk = Constellation.from_name("QPSK")
frame = generate_frame(rng_stream(1), params, qpsk, FrameLayout.interleaved(8, 128), noise_variance_from_snr(SNR_DB, M, K))

res = run_frame_online(frame, qpsk, VBConfig(I_tr=50))

err = np.sum(np.abs(frame.H - res.H_est) ** 2, axis=(1, 2)) / np.sum(np.abs(frame.H) ** 2, axis=(1, 2))
for t in (0, 7, 8, 16, 32, 64, 100, 135):
    print(f"slot {t + 1:3d}  NMSE {10 * np.log10(err[t]):6.2f} dB  <eta> " + " ".join(f"{e:.4f}" for e in res.eta_mean[t]))
print(f"SER {compute_ser(res.decisions, frame.x_index, frame.pilot_mask):.4f}   1/<gamma> / N0 = {np.mean(1 / res.gamma_mean) / frame.n0:.2f}")
