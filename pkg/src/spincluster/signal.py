"""Multi-resonance double-resonance traces, spectra and fits.

Single-line model:

    S(t) = a + A exp(-(t/T2)^n) cos(2 pi f t + phi) + B exp(-(t/T2)^n)

A multi-resonance trace replaces the cosine by a weighted comb of lines.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
import itertools
import math
from pathlib import Path

import numpy as np
from scipy.optimize import curve_fit, least_squares


class FitError(RuntimeError):
    def __init__(self, msg: str, residual_norm: float = float("nan")):
        super().__init__(msg)
        self.residual_norm = residual_norm


@dataclass
class SignalModel:
    a: float = 0.0
    A: float = 1.0
    B: float = 0.0
    T2: float = math.inf
    n: float = 2.0
    f: float = 1.0
    phi: float = 0.0

    def __post_init__(self):
        if not self.T2 > 0:
            raise ValueError("T2 must be positive")
        if self.n < 1:
            raise ValueError("decay exponent n must be >= 1")

    def as_array(self) -> np.ndarray:
        return np.array([self.a, self.A, self.B, self.T2, self.n, self.f, self.phi], dtype=float)

    @classmethod
    def from_array(cls, p) -> "SignalModel":
        return cls(*map(float, p))

    def envelope(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if math.isinf(self.T2):
            return np.ones_like(t)
        return np.exp(-np.abs(t / self.T2) ** self.n)

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        env = self.envelope(t)
        return self.a + env * (self.A * np.cos(2 * np.pi * self.f * t + self.phi) + self.B)


PARAM_NAMES = ("a", "A", "B", "T2", "n", "f", "phi")


@dataclass
class MultiResonanceSpec:
    couplings: list
    inversion_probabilities: list | None = None
    evolution_times: np.ndarray = field(default_factory=lambda: np.linspace(0, 1, 1001))

    def __post_init__(self):
        self.couplings = [float(c) for c in self.couplings]
        if not self.couplings:
            raise ValueError("at least one coupling is required")
        if self.inversion_probabilities is None:
            self.inversion_probabilities = [1.0] * len(self.couplings)
        self.inversion_probabilities = [float(p) for p in self.inversion_probabilities]
        if len(self.inversion_probabilities) != len(self.couplings):
            raise ValueError("one inversion probability per coupling")
        if any(not 0.0 <= p <= 1.0 for p in self.inversion_probabilities):
            raise ValueError("inversion probabilities must lie in [0, 1]")
        self.evolution_times = np.asarray(self.evolution_times, dtype=float)
        if self.evolution_times.ndim != 1 or np.any(np.diff(self.evolution_times) <= 0):
            raise ValueError("evolution times must be strictly increasing")


def frequency_comb(couplings, failure_branches: bool = False, inversion_probabilities=None,
                   decimals: int = 9) -> list[tuple[float, float]]:
    """Signed comb lines (frequency Hz, weight) of prod_k cos(2 pi f_k t).

    Each product of N cosines expands into 2^N lines s.f with weight 2^-N.
    With ``failure_branches`` every target inverts independently with probability p_k; a failed
    inversion drops that coupling from the product. Lines at equal frequency are merged.
    """
    f = [float(c) for c in couplings]
    if not f:
        raise ValueError("at least one coupling is required")
    p = [1.0] * len(f) if inversion_probabilities is None else [float(x) for x in inversion_probabilities]
    if not failure_branches:
        p = [1.0] * len(f)
    lines: dict[float, float] = {}
    for pattern in itertools.product((True, False), repeat=len(f)):
        w = math.prod(pk if ok else 1.0 - pk for pk, ok in zip(p, pattern))
        if w == 0.0:
            continue
        active = [fk for fk, ok in zip(f, pattern) if ok]
        share = w / 2 ** len(active)
        for signs in itertools.product((1, -1), repeat=len(active)):
            nu = round(sum(s * fk for s, fk in zip(signs, active)), decimals) + 0.0
            lines[nu] = lines.get(nu, 0.0) + share
    return sorted(lines.items())


def synthesize_trace(spec: MultiResonanceSpec, model: SignalModel, noise_sigma: float = 0.0,
                     rng: np.random.Generator | int | None = None, failure_branches: bool = True) -> np.ndarray:
    """S(t) on the trace's time grid; the comb replaces the single cosine (model.f is ignored)."""
    t = spec.evolution_times
    comb = frequency_comb(spec.couplings, failure_branches, spec.inversion_probabilities)
    osc = np.zeros_like(t)
    for nu, w in comb:
        osc += w * np.cos(2 * np.pi * nu * t + model.phi)
    s = model.a + model.envelope(t) * (model.A * osc + model.B)
    if noise_sigma > 0:
        rng = np.random.default_rng(rng)
        s = s + rng.normal(0.0, noise_sigma, size=t.shape)
    return s


def _uniform_step(t) -> float:
    t = np.asarray(t, dtype=float)
    if t.ndim != 1 or len(t) < 2:
        raise ValueError("need at least two samples")
    d = np.diff(t)
    dt = float(d.mean())
    if np.any(np.abs(d - dt) > 1e-9 * max(abs(dt), 1e-300) + 1e-12 * np.abs(t).max()):
        raise ValueError("time grid is not uniform")
    return dt


@dataclass
class Spectrum:
    freq: np.ndarray  # Hz
    power: np.ndarray

    def peaks(self, threshold: float = 0.05, min_sep_bins: int = 3) -> np.ndarray:
        """Local maxima above threshold * max power."""
        p = self.power
        if p.max() <= 0:
            return np.array([])
        idx = [i for i in range(1, len(p) - 1) if p[i] >= p[i - 1] and p[i] > p[i + 1] and p[i] > threshold * p.max()]
        keep: list[int] = []
        for i in sorted(idx, key=lambda i: -p[i]):
            if all(abs(i - j) >= min_sep_bins for j in keep):
                keep.append(i)
        return np.sort(self.freq[keep])


def psd(t, s, zero_fill_factor: int = 1) -> Spectrum:
    """One-sided power spectral density of a uniformly sampled trace.

    The mean is removed and the trace zero-filled to ``zero_fill_factor`` times its length.
    Normalised so that sum(power) * df equals sum((s - mean)^2) * dt.
    """
    if zero_fill_factor < 1:
        raise ValueError("zero_fill_factor must be >= 1")
    dt = _uniform_step(t)
    x = np.asarray(s, dtype=float)
    x = x - x.mean()
    nfft = len(x) * int(zero_fill_factor)
    X = np.fft.rfft(x, n=nfft)
    p = np.abs(X) ** 2 * dt * dt
    # fold negative frequencies onto positive ones
    if nfft % 2 == 0:
        p[1:-1] *= 2
    else:
        p[1:] *= 2
    return Spectrum(np.fft.rfftfreq(nfft, dt), p)


def parseval_ratio(t, s, zero_fill_factor: int = 1) -> float:
    """sum(PSD) df over the mean-removed signal energy; 1 up to rounding."""
    dt = _uniform_step(t)
    sp = psd(t, s, zero_fill_factor)
    x = np.asarray(s, float) - np.mean(s)
    nfft = len(x) * int(zero_fill_factor)
    df = 1.0 / (nfft * dt)
    return float(sp.power.sum() * df / (np.sum(x ** 2) * dt))


@dataclass
class FitResult:
    model: SignalModel
    covariance: np.ndarray  # 7x7 in PARAM_NAMES order; fixed parameters have zero rows
    sigma: dict
    residual_norm: float
    nfev: int


def _initial_guess(t, s) -> SignalModel:
    sp = psd(t, s, 4)
    k = int(np.argmax(sp.power[1:]) + 1)
    span = float(np.ptp(s))
    T2 = float(t[-1] - t[0]) / 2 or 1.0
    return SignalModel(a=float(np.mean(s)), A=span / 2, B=0.0, T2=T2, n=2.0, f=float(sp.freq[k]), phi=0.0)


def fit_signal(t, s, init: SignalModel | None = None, fix_n: float | None = 2.0, max_nfev: int = 2000,
               xtol: float = 1e-14) -> FitResult:
    """Least-squares fit of the single-line model.

    ``fix_n`` holds the decay exponent fixed (None fits it). Uncertainties are scaled by the
    residual variance RSS / (N - p).
    """
    t = np.asarray(t, dtype=float)
    s = np.asarray(s, dtype=float)
    if len(t) < 8:
        raise ValueError("need at least 8 samples")
    dt = _uniform_step(t)
    nyq = 0.5 / dt
    if init is None:
        init = _initial_guess(t, s)
    if not 0 <= init.f <= nyq:
        raise ValueError("initial frequency outside the Nyquist band")
    p0 = init.as_array()
    if fix_n is not None:
        p0[4] = fix_n
    if math.isinf(p0[3]):
        p0[3] = 1e6 * (t[-1] - t[0] + 1.0)
    free = np.array([True] * 7)
    if fix_n is not None:
        free[4] = False

    def full(x):
        p = p0.copy()
        p[free] = x
        return p

    def model_of(p):
        env = np.exp(-np.abs(t / p[3]) ** p[4])
        return p[0] + env * (p[1] * np.cos(2 * np.pi * p[5] * t + p[6]) + p[2])

    def resid(x):
        return model_of(full(x)) - s

    lo = np.full(7, -np.inf)
    hi = np.full(7, np.inf)
    lo[3], lo[4] = 1e-12, 1.0
    res = least_squares(resid, p0[free], bounds=(lo[free], hi[free]), x_scale="jac", xtol=xtol, ftol=xtol,
                        gtol=xtol, max_nfev=max_nfev, method="trf")
    if res.status <= 0:
        raise FitError(f"fit did not converge: {res.message}", float(np.linalg.norm(res.fun)))
    p = full(res.x)
    N, k = len(s), int(free.sum())
    rss = float(res.fun @ res.fun)
    J = res.jac
    cov_free = np.linalg.pinv(J.T @ J) * (rss / max(N - k, 1))
    cov = np.zeros((7, 7))
    cov[np.ix_(free, free)] = cov_free
    if p[1] < 0:  # canonical sign: positive contrast
        p[1] = -p[1]
        p[6] += np.pi
    p[6] = (p[6] + np.pi) % (2 * np.pi) - np.pi
    sig = {n: float(np.sqrt(max(cov[i, i], 0.0))) for i, n in enumerate(PARAM_NAMES)}
    return FitResult(SignalModel.from_array(p), cov, sig, float(np.sqrt(rss)), int(res.nfev))


def fwhm_resolution(T2: float, mode: str = "time_domain", n: float = 2.0, zero_fill_factor: int = 16,
                    samples: int = 4096) -> float:
    """Spectral resolution (Hz) of a Gaussian-decaying line.

    ``time_domain``: 2 sqrt(ln 2) / (pi T2). ``psd_fit``: FWHM of a Gaussian fitted to the PSD peak
    of a synthetic decaying cosine sampled over 4 T2.
    """
    if not T2 > 0:
        raise ValueError("T2 must be positive")
    if mode == "time_domain":
        return 2.0 * math.sqrt(math.log(2.0)) / (math.pi * T2)
    if mode != "psd_fit":
        raise ValueError(f"unknown mode {mode!r}")
    t = np.linspace(0, 4 * T2, samples, endpoint=False)
    f0 = 50.0 / T2
    s = SignalModel(T2=T2, n=n, f=f0)(t)
    sp = psd(t, s, zero_fill_factor)
    k = int(np.argmax(sp.power))
    width = 2.0 / T2
    sel = np.abs(sp.freq - sp.freq[k]) < width

    def gauss(x, h, mu, w):
        return h * np.exp(-4 * math.log(2) * (x - mu) ** 2 / w ** 2)

    (h, mu, w), _ = curve_fit(gauss, sp.freq[sel], sp.power[sel], p0=(sp.power[k], sp.freq[k], 1.0 / T2))
    return float(abs(w))


# ---------------------------------------------------------------------------
# text I/O


def write_trace(path, t, s) -> None:
    np.savetxt(Path(path), np.column_stack([t, s]), delimiter=",", header="t_s,S", comments="# ", fmt="%.17g")


def read_trace(path) -> tuple[np.ndarray, np.ndarray]:
    d = np.loadtxt(Path(path), delimiter=",", comments="#", ndmin=2)
    return d[:, 0], d[:, 1]


def write_spectrum(path, spectrum: Spectrum) -> None:
    np.savetxt(Path(path), np.column_stack([spectrum.freq, spectrum.power]), delimiter=",",
               header="f_Hz,PSD", comments="# ", fmt="%.17g")


def read_spectrum(path) -> Spectrum:
    d = np.loadtxt(Path(path), delimiter=",", comments="#", ndmin=2)
    return Spectrum(d[:, 0], d[:, 1])


def shifted(model: SignalModel, t0: float) -> SignalModel:
    """Model for the time axis t' = t - t0 with the same oscillation (decay envelope excluded)."""
    return replace(model, phi=model.phi + 2 * np.pi * model.f * t0)
