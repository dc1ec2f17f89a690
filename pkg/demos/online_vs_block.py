"""Compare the online filter and the block smoother on the same frames.

    python demos/online_vs_block.py
"""
import numpy as np

from vbjed.channel import Constellation
from vbjed.harness import SimConfig, compute_nmse_db, compute_ser, make_frames
from vbjed.channel import noise_variance_from_snr
from vbjed.vb_block import run_block

cfg = SimConfig(M=16, K=4, constellation="QPSK", eta=0.985, I_tr=30)
cons = Constellation.from_name(cfg.constellation)
unit = make_frames(cfg, range(10))

for snr in (10.0, 20.0):
    frame = unit.with_noise_variance(noise_variance_from_snr(snr, cfg.M, cfg.K))
    res = run_block(frame, cons, cfg.vb_config())
    on, bl = res.online, res
    print(
        f"{snr:4.0f} dB  online NMSE {compute_nmse_db(frame.H, on.H_est):6.2f} dB  SER {compute_ser(on.decisions, frame.x_index, frame.pilot_mask):.4f}"
        f"  |  block NMSE {compute_nmse_db(frame.H, bl.H_est):6.2f} dB  SER {compute_ser(bl.decisions, frame.x_index, frame.pilot_mask):.4f}"
        f"  <nu>(1-<eta>^2) {np.mean(bl.nu_mean * (1 - bl.eta_mean ** 2)):.2f}"
    )
