"""Plot SER and NMSE against SNR from a results CSV.

    python demos/plot_results.py results.csv [figure.png]

Needs matplotlib (``pip install artifact[plot]``).
"""
import sys
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from vbjed.harness import read_results  # noqa: E402


def main(argv):
    if not argv:
        print(__doc__)
        return 2
    src = argv[0]
    dst = argv[1] if len(argv) > 1 else src.rsplit(".", 1)[0] + ".png"
    by_method = defaultdict(list)
    for row in read_results(src):
        by_method[row.method].append(row)

    fig, (ax_ser, ax_nmse) = plt.subplots(1, 2, figsize=(10, 4))
    for method, rows in by_method.items():
        rows.sort(key=lambda r: r.snr_db)
        snr = [r.snr_db for r in rows]
        # a zero SER cannot be drawn on a log axis
        ser = [max(r.ser, 1e-5) for r in rows]
        ax_ser.errorbar(snr, ser, yerr=[r.ser_stderr for r in rows], marker="o", capsize=2, label=method)
        if method != "genie":
            ax_nmse.plot(snr, [r.nmse_db for r in rows], marker="o", label=method)
    ax_ser.set(yscale="log", xlabel="SNR (dB)", ylabel="SER")
    ax_nmse.set(xlabel="SNR (dB)", ylabel="NMSE (dB)")
    for ax in (ax_ser, ax_nmse):
        ax.grid(True, which="both", alpha=0.3)
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(dst, dpi=120)
    print(f"wrote {dst}")
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
