"""
Monte-Carlo experiment runner, metrics and result files.

Every trial owns a counter-based random stream addressed by
``(seed, trial)``. A trial's frame is drawn once with unit noise and then
re-scaled for each SNR point, so all methods and all SNR points see the same
channels, symbols and noise directions. Trials are processed in batches that
are vectorized along a leading axis; batches can run in parallel worker
processes (``VBJED_NUM_THREADS``).

Frame dump layout (one file per trial, all little-endian)::

    magic      4 bytes   b"VBJF"
    version    uint32    1
    M, K, T    uint32 x 3
    T_p        uint32
    pilot_mask uint8  x T
    x_index    int64  x T*K          (-1 on pilot slots)
    H          f64    x 2*T*M*K      (re, im interleaved; C order (T, M, K))
    X          f64    x 2*T*K
    noise      f64    x 2*T*M        unit-variance draw, y = H x + sqrt(N0) noise
    eta        f64    x T*K
    R          f64    x 2*K*M*M
"""

from __future__ import annotations

import configparser
import csv
import json
import math
import os
import re
import struct
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import genie_detect, kf_track, lmmse_baseline
from .channel import (
    ChannelFrame,
    Constellation,
    CorrelationSpec,
    FrameLayout,
    GaussMarkovParams,
    eta_from_doppler,
    generate_frame,
    make_correlation,
    noise_variance_from_snr,
    stack_frames,
)
from .errors import ConfigError, DegenerateTruthError, DimensionMismatchError
from .numerics import rng_stream
from .vb_block import run_block
from .vb_online import VBConfig, run_frame_interleaved, run_frame_online

CSV_HEADER = ("method", "snr_db", "ser", "ser_stderr", "nmse_db", "eta_mean", "nu_consistency", "trials", "wall_time_s")
NMSE_FLOOR_DB = -300.0
THREADS_ENV = "VBJED_NUM_THREADS"

_METHOD_RE = re.compile(r"^(vb-online|vb-online-interleaved\((\d+)\)|vb-block|lmmse|kf|genie)$")


# ----------------------------------------------------------------------------
# configuration
# ----------------------------------------------------------------------------


def parse_method(name: str) -> tuple[str, int]:
    """Split a method name into ``(kind, sections)``.

    >>> parse_method("vb-online-interleaved(2)")
    ('vb-online-interleaved', 2)
    """
    m = _METHOD_RE.match(name.strip())
    if m is None:
        raise ConfigError(f"unknown method {name!r}")
    if m.group(2) is not None:
        L = int(m.group(2))
        if L < 1:
            raise ConfigError("interleaving needs L >= 1")
        return "vb-online-interleaved", L
    return m.group(1), 1


def parse_snr_grid(text: str) -> tuple[float, ...]:
    """``"0:20:5"`` (inclusive range) or a comma separated list."""
    text = text.strip()
    if ":" in text:
        parts = [float(p) for p in text.split(":")]
        if len(parts) != 3 or parts[2] <= 0:
            raise ConfigError(f"bad SNR range {text!r}, expected start:stop:step")
        start, stop, step = parts
        n = int(math.floor((stop - start) / step + 1e-9)) + 1
        return tuple(float(start + k * step) for k in range(max(n, 0)))
    return tuple(float(p) for p in text.split(",") if p.strip())


@dataclass(frozen=True)
class SimConfig:
    """One experiment: system size, channel model, methods and priors.

    ``eta_mode`` is ``"fixed"`` (``eta`` for every user), ``"doppler"``
    (``J0(2 pi fd Ts)``) or ``"slowly-varying"`` (per-slot draws from
    ``N(eta, eta_var)``).
    """

    M: int = 16
    K: int = 4
    T_p: int = 8
    T_d: int = 128
    snr_grid_db: tuple = (5.0, 10.0, 15.0)
    constellation: str = "QPSK"
    correlation: str = "exponential"
    alpha: complex = 0.5 + 0.5j
    eta_mode: str = "fixed"
    eta: float = 0.985
    eta_var: float = 5e-5
    fd: float = 0.0
    Ts: float = 1e-3
    methods: tuple = ("vb-online",)
    I_tr: int = 50
    trials: int = 200
    seed: int = 42
    eta0: float = 0.95
    tau_eta0: float = 1e-3
    nu_a0: float = 1e-4
    nu_b0: float = 1e-4
    a0: float = 1e-4
    b0: float = 1e-4
    known_eta: bool = False
    block_boundary: str = "pseudo"
    nu_rate: str = "lemma"
    batch_size: int = 50
    record_time: bool = True

    def __post_init__(self):
        object.__setattr__(self, "snr_grid_db", tuple(float(s) for s in self.snr_grid_db))
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "alpha", complex(self.alpha))
        if self.M < 1 or self.K < 1 or self.T_d < 0:
            raise ConfigError("M, K must be positive and T_d non-negative")
        if self.T_p < self.K:
            raise ConfigError(f"T_p = {self.T_p} < K = {self.K}: pilots cannot be orthogonal")
        if self.trials < 1 or self.batch_size < 1:
            raise ConfigError("trials and batch_size must be >= 1")
        for name in ("tau_eta0", "nu_a0", "nu_b0", "a0", "b0"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"prior {name} must be positive")
        if not 0 < self.eta0 <= 1:
            raise ConfigError("eta0 must lie in (0, 1]")
        if self.eta_mode not in ("fixed", "doppler", "slowly-varying"):
            raise ConfigError(f"unknown eta_mode {self.eta_mode!r}")
        if not self.methods:
            raise ConfigError("no methods selected")
        for m in self.methods:
            kind, L = parse_method(m)
            if kind == "vb-online-interleaved" and (self.T_p // L < self.K or L > max(self.T_d, 1)):
                raise ConfigError(f"{m}: each section needs at least K pilot slots and one data slot")
        Constellation.from_name(self.constellation)
        make_correlation(self.correlation_spec)
        self.vb_config()

    @property
    def correlation_spec(self) -> CorrelationSpec:
        return CorrelationSpec(self.correlation, self.M, self.alpha)

    @property
    def nominal_eta(self) -> float:
        if self.eta_mode == "doppler":
            return eta_from_doppler(self.fd, self.Ts)
        return float(self.eta)

    def channel_params(self) -> GaussMarkovParams:
        R = make_correlation(self.correlation_spec)
        mode = "slowly-varying" if self.eta_mode == "slowly-varying" else "fixed"
        return GaussMarkovParams(np.full(self.K, self.nominal_eta), R, eta_mode=mode, eta_var=self.eta_var)

    def vb_config(self) -> VBConfig:
        return VBConfig(
            I_tr=self.I_tr,
            eta0=self.eta0,
            tau_eta0=self.tau_eta0,
            a0=self.a0,
            b0=self.b0,
            nu_a0=self.nu_a0,
            nu_b0=self.nu_b0,
            known_eta=self.nominal_eta if self.known_eta else None,
            block_boundary=self.block_boundary,
            nu_rate=self.nu_rate,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["alpha"] = [self.alpha.real, self.alpha.imag]
        d["snr_grid_db"] = list(self.snr_grid_db)
        d["methods"] = list(self.methods)
        return d

    @classmethod
    def from_ini(cls, path, **overrides) -> "SimConfig":
        """Read a ``key = value`` file; section names are ignored.

        ``snr`` accepts a range or list, ``methods`` a comma separated list
        and ``alpha`` any Python complex literal such as ``0.5+0.5j``.
        """
        parser = configparser.ConfigParser()
        parser.optionxform = str
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        values = {}
        for section in parser.sections():
            values.update(parser[section])
        return cls.from_mapping(values, **overrides)

    @classmethod
    def from_mapping(cls, values: dict, **overrides) -> "SimConfig":
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for key, raw in values.items():
            key = {"snr": "snr_grid_db", "method": "methods"}.get(key, key)
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            kw[key] = _coerce(key, raw, types[key])
        kw.update({k: v for k, v in overrides.items() if v is not None})
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def _coerce(key, raw, typ):
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    try:
        if key == "snr_grid_db":
            return parse_snr_grid(raw)
        if key == "methods":
            return tuple(m.strip() for m in _split_methods(raw))
        if typ == "bool":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
        if typ == "complex":
            return complex(raw.replace(" ", ""))
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return raw


def _split_methods(text: str) -> list[str]:
    # commas inside "(L)" never occur, so a plain split is enough
    return [m for m in (p.strip() for p in text.split(",")) if m]


# ----------------------------------------------------------------------------
# metrics
# ----------------------------------------------------------------------------


def compute_ser(decisions, truth, pilot_mask) -> float:
    """Fraction of wrong decisions over all (user, data slot) pairs.

    ``decisions`` and ``truth`` are ``(..., T, K)`` index arrays and
    ``pilot_mask`` is ``(T,)``.
    """
    decisions, truth = np.asarray(decisions), np.asarray(truth)
    mask = np.asarray(pilot_mask, dtype=bool)
    if decisions.shape != truth.shape or decisions.ndim < 2 or decisions.shape[-2] != mask.size:
        raise DimensionMismatchError(f"decisions {decisions.shape}, truth {truth.shape}, mask {mask.shape}")
    d, t = decisions[..., ~mask, :], truth[..., ~mask, :]
    if t.size == 0:
        return 0.0
    return float(np.mean(d != t))


def compute_nmse_db(H_true, H_est) -> float:
    """``10 log10(||H - H_hat||_F^2 / ||H||_F^2)`` over the whole stack.

    Exact recovery is reported as -300 dB.
    """
    H_true, H_est = np.asarray(H_true), np.asarray(H_est)
    if H_true.shape != H_est.shape:
        raise DimensionMismatchError(f"truth {H_true.shape} vs estimate {H_est.shape}")
    power = float(np.sum(np.abs(H_true) ** 2))
    if not power > 0:
        raise DegenerateTruthError("reference channel has zero norm")
    err = float(np.sum(np.abs(H_true - H_est) ** 2))
    if err == 0:
        return NMSE_FLOOR_DB
    return max(10.0 * math.log10(err / power), NMSE_FLOOR_DB)


@dataclass
class MetricsRow:
    """Aggregated result of one (method, SNR) point.

    The per-user arrays and raw counts are kept for analysis but are not
    written to the CSV.
    """

    method: str
    snr_db: float
    ser: float
    ser_stderr: float
    nmse_db: float
    eta_mean: float
    nu_consistency: float
    trials: int
    wall_time_s: float
    errors: int = field(default=0, compare=False)
    symbols: int = field(default=0, compare=False)
    eta_per_user: tuple = field(default=(), compare=False)
    nu_consistency_per_user: tuple = field(default=(), compare=False)


# ----------------------------------------------------------------------------
# running
# ----------------------------------------------------------------------------


@dataclass
class _Acc:
    """Sums over trials for one (method, SNR) point."""

    errors: int = 0
    symbols: int = 0
    err_energy: float = 0.0
    energy: float = 0.0
    eta_sum: np.ndarray | None = None
    nu_sum: np.ndarray | None = None
    trials: int = 0
    seconds: float = 0.0

    def add(self, other: "_Acc") -> None:
        self.errors += other.errors
        self.symbols += other.symbols
        self.err_energy += other.err_energy
        self.energy += other.energy
        self.trials += other.trials
        self.seconds += other.seconds
        for name in ("eta_sum", "nu_sum"):
            a, b = getattr(self, name), getattr(other, name)
            if b is not None:
                setattr(self, name, b.copy() if a is None else a + b)


class TrialError(RuntimeError):
    """A method failed on a trial; carries the seed and trial index."""

    def __init__(self, method, snr_db, seed, trial, cause):
        super().__init__(f"{method} failed at SNR {snr_db} dB on trial {trial} (seed {seed}): {cause!r}")
        self.method, self.snr_db, self.seed, self.trial = method, snr_db, seed, trial


def _layout(config: SimConfig, L: int) -> FrameLayout:
    return FrameLayout.interleaved(config.T_p, config.T_d, L)


def make_frames(config: SimConfig, trials, L: int = 1) -> ChannelFrame:
    """Unit-noise frames for the given trial indices, stacked on axis 0."""
    params = config.channel_params()
    cons = Constellation.from_name(config.constellation)
    layout = _layout(config, L)
    return stack_frames([generate_frame(rng_stream(config.seed, t), params, cons, layout, 1.0) for t in trials])


def _run_method(kind: str, frame: ChannelFrame, L: int, config: SimConfig, cons, cache: dict):
    vb = config.vb_config()
    if kind == "vb-online":
        res = run_frame_online(frame, cons, vb)
        cache["vb-online"] = res
        return res.H_est, res.decisions, res.eta_mean[..., -1, :], None
    if kind == "vb-online-interleaved":
        res = run_frame_interleaved(frame, _layout(config, L), cons, vb)
        return res.H_est, res.decisions, res.eta_mean[..., -1, :], None
    if kind == "vb-block":
        res = run_block(frame, cons, vb, online=cache.get("vb-online"))
        nu_cons = np.abs(res.nu_mean * (1.0 - res.eta_mean**2) - 1.0)
        return res.H_est, res.decisions, res.eta_mean, nu_cons
    if kind == "lmmse":
        res = lmmse_baseline(frame, cons)
        return res.H_est, res.decisions, None, None
    if kind == "kf":
        res = kf_track(frame, config.nominal_eta, cons)
        return res.H_est, res.decisions, None, None
    if kind == "genie":
        return frame.H, genie_detect(frame, cons), None, None
    raise ConfigError(f"unknown method {kind!r}")


def _method_order(methods):
    # the block solver reuses the online pass when both are requested
    return sorted(methods, key=lambda m: parse_method(m)[0] == "vb-block")


def _run_batch(config: SimConfig, trials: list[int], dump_dir: str | None = None) -> dict:
    from threadpoolctl import threadpool_limits

    cons = Constellation.from_name(config.constellation)
    frames: dict[int, ChannelFrame] = {}
    out: dict = {}
    with threadpool_limits(limits=1) if _workers() > 1 else _null():
        for snr in config.snr_grid_db:
            n0 = noise_variance_from_snr(snr, config.M, config.K)
            cache: dict = {}
            online_seconds = 0.0
            for method in _method_order(config.methods):
                kind, L = parse_method(method)
                if L not in frames:
                    frames[L] = make_frames(config, trials, L)
                    if dump_dir is not None and L == 1:
                        for j, t in enumerate(trials):
                            write_frame(Path(dump_dir) / f"trial_{t:06d}.vbf", _index(frames[L], j))
                frame = frames[L].with_noise_variance(n0)
                t0 = time.perf_counter()
                try:
                    H_est, dec, eta, nu_cons = _run_method(kind, frame, L, config, cons, cache)
                except Exception as exc:  # noqa: BLE001  pinpoint the trial, then re-raise
                    _locate_failure(kind, frames[L], n0, L, config, cons, trials, method, snr, exc)
                    raise
                seconds = time.perf_counter() - t0
                if kind == "vb-online":
                    online_seconds = seconds
                elif kind == "vb-block" and "vb-online" in cache:
                    seconds += online_seconds
                mask = frame.pilot_mask
                acc = _Acc(
                    errors=int(np.sum(dec[..., ~mask, :] != frame.x_index[..., ~mask, :])),
                    symbols=int(dec[..., ~mask, :].size),
                    err_energy=float(np.sum(np.abs(frame.H - H_est) ** 2)),
                    energy=float(np.sum(np.abs(frame.H) ** 2)),
                    eta_sum=None if eta is None else np.sum(eta, axis=0),
                    nu_sum=None if nu_cons is None else np.sum(nu_cons, axis=0),
                    trials=len(trials),
                    seconds=seconds,
                )
                out[(method, snr)] = acc
    return out


class _null:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def _index(frame: ChannelFrame, j: int) -> ChannelFrame:
    return replace(
        frame, H=frame.H[j], X=frame.X[j], x_index=frame.x_index[j], noise=frame.noise[j], eta=frame.eta[j],
        H0=None if frame.H0 is None else frame.H0[j],
    )


def _locate_failure(kind, frames, n0, L, config, cons, trials, method, snr, exc):
    for j, t in enumerate(trials):
        single = stack_frames([_index(frames, j)]).with_noise_variance(n0)
        try:
            _run_method(kind, single, L, config, cons, {})
        except Exception as inner:  # noqa: BLE001
            raise TrialError(method, snr, config.seed, t, inner) from inner
    raise TrialError(method, snr, config.seed, trials[0], exc) from exc


def _workers() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from exc
    return max(n, 1)


def run_experiment(config: SimConfig, dump_dir: str | os.PathLike | None = None) -> list[MetricsRow]:
    """Run every method at every SNR on ``config.trials`` paired trials.

    Rows come out ordered by method (as configured), then SNR. Results do
    not depend on the number of workers.
    """
    if dump_dir is not None:
        Path(dump_dir).mkdir(parents=True, exist_ok=True)
        dump_dir = str(dump_dir)
    ids = list(range(config.trials))
    batches = [ids[i : i + config.batch_size] for i in range(0, len(ids), config.batch_size)]
    workers = min(_workers(), len(batches))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_run_batch, [config] * len(batches), batches, [dump_dir] * len(batches)))
    else:
        parts = [_run_batch(config, b, dump_dir) for b in batches]

    rows = []
    for method in config.methods:
        for snr in config.snr_grid_db:
            acc = _Acc()
            for part in parts:
                acc.add(part[(method, snr)])
            rows.append(_row(method, snr, acc, config.record_time))
    return rows


def _row(method, snr, acc: _Acc, record_time: bool) -> MetricsRow:
    p = acc.errors / acc.symbols if acc.symbols else 0.0
    stderr = math.sqrt(p * (1.0 - p) / acc.symbols) if acc.symbols else 0.0
    if acc.err_energy == 0:
        nmse = NMSE_FLOOR_DB
    else:
        nmse = max(10.0 * math.log10(acc.err_energy / acc.energy), NMSE_FLOOR_DB)
    eta_user = () if acc.eta_sum is None else tuple(float(v) for v in acc.eta_sum / acc.trials)
    nu_user = () if acc.nu_sum is None else tuple(float(v) for v in acc.nu_sum / acc.trials)
    return MetricsRow(
        method=method,
        snr_db=float(snr),
        ser=p,
        ser_stderr=stderr,
        nmse_db=nmse,
        eta_mean=float(np.mean(eta_user)) if eta_user else math.nan,
        nu_consistency=float(np.mean(nu_user)) if nu_user else math.nan,
        trials=acc.trials,
        wall_time_s=acc.seconds if record_time else 0.0,
        errors=acc.errors,
        symbols=acc.symbols,
        eta_per_user=eta_user,
        nu_consistency_per_user=nu_user,
    )


# ----------------------------------------------------------------------------
# result files
# ----------------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def emit_results(rows, path, config: SimConfig | None = None) -> Path:
    """Write the CSV and a ``<name>.manifest.json`` next to it."""
    path = Path(path)
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(",".join(CSV_HEADER) + "\n")
            for r in rows:
                fh.write(",".join(_fmt(getattr(r, k)) for k in CSV_HEADER) + "\n")
        manifest = {
            "library": "vbjed",
            "version": __version__,
            "numpy": np.__version__,
            "seed": None if config is None else config.seed,
            "config": None if config is None else config.to_dict(),
            "columns": list(CSV_HEADER),
        }
        with open(manifest_path(path), "w", encoding="utf-8", newline="\n") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise OSError(f"cannot write results to {path}: {exc}") from exc
    return path


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".manifest.json")


def read_results(path) -> list[MetricsRow]:
    """Read a CSV written by :func:`emit_results`."""
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        rows = []
        for rec in reader:
            d = dict(zip(header, rec))
            rows.append(
                MetricsRow(
                    method=d["method"],
                    snr_db=float(d["snr_db"]),
                    ser=float(d["ser"]),
                    ser_stderr=float(d["ser_stderr"]),
                    nmse_db=float(d["nmse_db"]),
                    eta_mean=float(d["eta_mean"]),
                    nu_consistency=float(d["nu_consistency"]),
                    trials=int(d["trials"]),
                    wall_time_s=float(d["wall_time_s"]),
                )
            )
    return rows


_HEAD = struct.Struct("<4sIIIII")
_MAGIC = b"VBJF"


def write_frame(path, frame: ChannelFrame) -> None:
    """Write one trial in the binary dump layout (see the module docstring)."""
    if frame.H.ndim != 3:
        raise DimensionMismatchError("write_frame expects a single trial")
    T, M, K = frame.H.shape
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(_MAGIC, 1, M, K, T, int(frame.pilot_mask.sum())))
        fh.write(np.asarray(frame.pilot_mask, dtype="u1").tobytes())
        fh.write(np.asarray(frame.x_index, dtype="<i8").tobytes())
        for a in (frame.H, frame.X, frame.noise):
            fh.write(np.ascontiguousarray(a, dtype="<c16").tobytes())
        fh.write(np.ascontiguousarray(frame.eta, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(frame.R, dtype="<c16").tobytes())


def read_frame(path, n0: float = 1.0) -> ChannelFrame:
    """Inverse of :func:`write_frame`; the returned frame has noise variance ``n0``."""
    data = Path(path).read_bytes()
    magic, version, M, K, T, _ = _HEAD.unpack_from(data)
    if magic != _MAGIC or version != 1:
        raise ValueError(f"{path}: not a frame dump")
    off = _HEAD.size

    def take(dtype, shape):
        nonlocal off
        n = int(np.prod(shape)) * np.dtype(dtype).itemsize
        a = np.frombuffer(data, dtype=dtype, count=int(np.prod(shape)), offset=off).reshape(shape).copy()
        off += n
        return a

    mask = take("u1", (T,)).astype(bool)
    x_index = take("<i8", (T, K))
    H = take("<c16", (T, M, K))
    X = take("<c16", (T, K))
    noise = take("<c16", (T, M))
    eta = take("<f8", (T, K))
    R = take("<c16", (K, M, M))
    return ChannelFrame(H=H, X=X, x_index=x_index, noise=noise, n0=float(n0), pilot_mask=mask, eta=eta, R=R)
