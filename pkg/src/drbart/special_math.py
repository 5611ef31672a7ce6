"""Special functions and non-standard samplers for the variance-tree updates.

Everything that the sampler calls from compiled code is written as a numba
kernel (``_name``) with a thin Python wrapper that validates its arguments.
Random number generators are ``numpy.random.Generator`` instances, which
numba accepts directly, so the compiled and interpreted paths consume the
same stream.
"""

from __future__ import annotations

import math

import numba
import numpy as np
from scipy.special import zeta

__all__ = [
    'log_bessel_k',
    'sample_gig',
    'sample_gamma',
    'sample_inverse_gamma',
    'log_sum_exp',
    'GigParams',
]

_EULER_GAMMA = 0.5772156649015329
_EPS = 1e-16
# Orders at or above this use the uniform (Debye) expansion.
_DEBYE_ORDER = 200.0

# zeta(k) for odd k = 3, 5, ..., used in the log-gamma series of the Temme
# coefficients; 30 terms give full double precision for |mu| <= 1/2.
_ZETA_ODD = np.array([zeta(k) for k in range(3, 63, 2)], dtype=np.float64)


@numba.njit(cache=True)
def _temme_gammas(mu):
    """Return gam1, gam2, 1/Gamma(1+mu), 1/Gamma(1-mu) for |mu| <= 1/2.

    gam1 = (1/Gamma(1-mu) - 1/Gamma(1+mu)) / (2 mu) is evaluated without
    cancellation through the odd part of the log-gamma Maclaurin series.
    """
    # odd part: lgamma(1+mu) - lgamma(1-mu) = mu * odd_over_mu
    odd_over_mu = -2.0 * _EULER_GAMMA
    mu2 = mu * mu
    pw = mu2
    for j in range(_ZETA_ODD.shape[0]):
        k = 3 + 2 * j
        odd_over_mu -= 2.0 * _ZETA_ODD[j] * pw / k
        pw *= mu2
    # even part: lgamma(1+mu) + lgamma(1-mu) = log(pi mu / sin(pi mu))
    pm = math.pi * mu
    if abs(pm) < 1e-4:
        even = pm * pm / 6.0 + pm**4 / 180.0
    else:
        even = math.log(pm / math.sin(pm))
    half_odd = 0.5 * mu * odd_over_mu
    scale = math.exp(-0.5 * even)
    if abs(half_odd) < 1e-8:
        sinhc = 1.0 + half_odd * half_odd / 6.0
    else:
        sinhc = math.sinh(half_odd) / half_odd
    gam1 = scale * sinhc * 0.5 * odd_over_mu
    gam2 = scale * math.cosh(half_odd)
    gampl = math.exp(-0.5 * (even + mu * odd_over_mu))
    gammi = math.exp(-0.5 * (even - mu * odd_over_mu))
    return gam1, gam2, gampl, gammi


@numba.njit(cache=True)
def _bessel_k_start(mu, x):
    """Return (log K_mu(x), K_{mu+1}(x)/K_mu(x)) for |mu| <= 1/2."""
    if x < 2.0:
        # Temme's series
        x2 = 0.5 * x
        pimu = math.pi * mu
        fact = 1.0 if abs(pimu) < _EPS else pimu / math.sin(pimu)
        d = -math.log(x2)
        e = mu * d
        fact2 = 1.0 if abs(e) < _EPS else math.sinh(e) / e
        gam1, gam2, gampl, gammi = _temme_gammas(mu)
        ff = fact * (gam1 * math.cosh(e) + gam2 * fact2 * d)
        total = ff
        e = math.exp(e)
        p = 0.5 * e / gampl
        q = 0.5 / (e * gammi)
        c = 1.0
        d = x2 * x2
        total1 = p
        for i in range(1, 10000):
            ff = (i * ff + p + q) / (i * i - mu * mu)
            c *= d / i
            p /= i - mu
            q /= i + mu
            delta = c * ff
            total += delta
            total1 += c * (p - i * ff)
            if abs(delta) < abs(total) * _EPS:
                break
        log_k = math.log(total)
        log_k1 = math.log(total1) + math.log(2.0 / x)
        return log_k, math.exp(log_k1 - log_k)
    # Steed's continued fraction
    b = 2.0 * (1.0 + x)
    d = 1.0 / b
    h = d
    delh = d
    q1 = 0.0
    q2 = 1.0
    a1 = 0.25 - mu * mu
    q = a1
    c = a1
    a = -a1
    s = 1.0 + q * delh
    for i in range(1, 100000):
        a -= 2 * i
        c = -a * c / (i + 1.0)
        qnew = (q1 - b * q2) / a
        q1 = q2
        q2 = qnew
        q += c * qnew
        b += 2.0
        d = 1.0 / (b + a * d)
        delh = (b * d - 1.0) * delh
        h += delh
        dels = q * delh
        s += dels
        if abs(dels / s) < _EPS:
            break
    h = a1 * h
    log_k = 0.5 * math.log(math.pi / (2.0 * x)) - x - math.log(s)
    return log_k, (mu + x + 0.5 - h) / x


@numba.njit(cache=True)
def _log_bessel_k_debye(nu, x):
    z = x / nu
    sq = math.sqrt(1.0 + z * z)
    t = 1.0 / sq
    eta = sq + math.log(z / (1.0 + sq))
    t2 = t * t
    u1 = t * (3.0 - 5.0 * t2) / 24.0
    u2 = t2 * (81.0 - 462.0 * t2 + 385.0 * t2 * t2) / 1152.0
    u3 = t * t2 * (30375.0 - 369603.0 * t2 + 765765.0 * t2**2 - 425425.0 * t2**3) / 414720.0
    u4 = (
        t2
        * t2
        * (
            4465125.0
            - 94121676.0 * t2
            + 349922430.0 * t2**2
            - 446185740.0 * t2**3
            + 185910725.0 * t2**4
        )
        / 39813120.0
    )
    series = 1.0 - u1 / nu + u2 / nu**2 - u3 / nu**3 + u4 / nu**4
    return (
        0.5 * math.log(math.pi / (2.0 * nu))
        - nu * eta
        - 0.5 * math.log(sq)
        + math.log(series)
    )


@numba.njit(cache=True)
def _log_bessel_k(nu, x):
    if not x > 0.0:
        return math.nan
    nu = abs(nu)
    if nu >= _DEBYE_ORDER:
        return _log_bessel_k_debye(nu, x)
    nl = int(nu + 0.5)
    mu = nu - nl
    log_k, ratio = _bessel_k_start(mu, x)
    if nl == 0:
        return log_k
    xi2 = 2.0 / x
    if nu * xi2 < 1e250:
        for i in range(1, nl + 1):
            log_k += math.log(ratio)
            ratio = (mu + i) * xi2 + 1.0 / ratio
    else:
        # ratios beyond double range: carry them on the log scale
        log_ratio = math.log(ratio)
        log_xi2 = math.log(xi2)
        for i in range(1, nl + 1):
            log_k += log_ratio
            a = math.log(mu + i) + log_xi2
            b = -log_ratio
            log_ratio = max(a, b) + math.log1p(math.exp(-abs(a - b)))
    return log_k


def log_bessel_k(order, x):
    """Logarithm of the modified Bessel function of the second kind.

    Parameters
    ----------
    order : float
        Order of the function, any real. ``K_{-p} = K_p``.
    x : float
        Argument, strictly positive.

    Returns
    -------
    float
        ``log K_order(x)``. Finite for orders far beyond the range where
        ``K`` itself overflows.
    """
    x = float(x)
    if not x > 0.0:
        raise ValueError(f'log_bessel_k requires x > 0, got {x}')
    return _log_bessel_k(float(order), x)


class GigParams:
    """Parameters of a generalized inverse Gaussian law.

    The density is proportional to ``t**(lam-1) * exp(-(psi*t + chi/t)/2)``.
    """

    __slots__ = ('lam', 'psi', 'chi')

    def __init__(self, lam: float, psi: float, chi: float):
        if not (psi > 0 and chi > 0):
            raise ValueError(f'GIG needs psi > 0 and chi > 0, got psi={psi}, chi={chi}')
        self.lam = float(lam)
        self.psi = float(psi)
        self.chi = float(chi)

    def __repr__(self):
        return f'GigParams(lam={self.lam!r}, psi={self.psi!r}, chi={self.chi!r})'

    def log_normalizer(self) -> float:
        """Log of the integral of the unnormalized density."""
        omega = math.sqrt(self.psi * self.chi)
        return (
            math.log(2.0)
            + log_bessel_k(self.lam, omega)
            + 0.5 * self.lam * (math.log(self.chi) - math.log(self.psi))
        )

    def mean(self) -> float:
        omega = math.sqrt(self.psi * self.chi)
        return math.sqrt(self.chi / self.psi) * math.exp(
            log_bessel_k(self.lam + 1, omega) - log_bessel_k(self.lam, omega)
        )

    def second_moment(self) -> float:
        omega = math.sqrt(self.psi * self.chi)
        return (self.chi / self.psi) * math.exp(
            log_bessel_k(self.lam + 2, omega) - log_bessel_k(self.lam, omega)
        )


@numba.njit(cache=True)
def _gig_logkernel(t, lam, omega):
    return lam * t - omega * math.cosh(t)


@numba.njit(cache=True)
def _gig_drop_point(m, gm, lam, omega, direction):
    """Point on one side of the mode where the log kernel is about gm - 1.

    The log kernel of ``log(tau)`` is concave, so Newton started beyond the
    root approaches it monotonically from outside; exactness is not needed,
    any point past the mode gives a valid envelope.
    """
    step = 1.0 / math.sqrt(omega * math.cosh(m) + 1e-300)
    target = gm - 1.0
    t = m + direction * step
    while _gig_logkernel(t, lam, omega) > target:
        step *= 2.0
        t = m + direction * step
    for _ in range(8):
        h = _gig_logkernel(t, lam, omega) - target
        dh = lam - omega * math.sinh(t)
        if dh == 0.0:
            break
        t_new = t - h / dh
        if (t_new - m) * direction <= 0.0 or abs(t_new - t) < 1e-10 * (1.0 + abs(t)):
            break
        t = t_new
    return t


@numba.njit(cache=True)
def _sample_log_gig(rng, lam, psi, chi):
    """Draw log(tau) for tau ~ GIG(lam, psi, chi).

    With tau = sqrt(chi/psi) * exp(t), t has log density
    lam*t - omega*cosh(t), omega = sqrt(psi*chi), which is concave for every
    lam. Rejection from a three-piece envelope (flat around the mode,
    exponential tails along the secants through the mode) is valid for all
    parameters, including |lam| < 1 with tiny omega.
    """
    omega = math.sqrt(psi * chi)
    m = math.asinh(lam / omega)
    gm = _gig_logkernel(m, lam, omega)
    a = _gig_drop_point(m, gm, lam, omega, -1.0)
    b = _gig_drop_point(m, gm, lam, omega, 1.0)
    ha = _gig_logkernel(a, lam, omega) - gm
    hb = _gig_logkernel(b, lam, omega) - gm
    ka = -ha / (m - a)
    kb = -hb / (b - m)
    mass_left = math.exp(ha) / ka
    mass_mid = b - a
    mass_right = math.exp(hb) / kb
    total = mass_left + mass_mid + mass_right
    shift = 0.5 * (math.log(chi) - math.log(psi))
    while True:
        pick = rng.random() * total
        if pick < mass_left:
            t = a + math.log(1.0 - rng.random()) / ka
            log_hat = ha + ka * (t - a)
        elif pick < mass_left + mass_mid:
            t = a + rng.random() * mass_mid
            log_hat = 0.0
        else:
            t = b - math.log(1.0 - rng.random()) / kb
            log_hat = hb - kb * (t - b)
        log_target = _gig_logkernel(t, lam, omega) - gm
        if math.log(1.0 - rng.random()) < log_target - log_hat:
            return t + shift


@numba.njit(cache=True)
def _sample_gig_many(rng, lam, psi, chi, n):
    out = np.empty(n)
    for i in range(n):
        out[i] = math.exp(_sample_log_gig(rng, lam, psi, chi))
    return out


def sample_gig(rng: np.random.Generator, params: GigParams, size: int | None = None):
    """Draw from the generalized inverse Gaussian distribution.

    Returns a float when ``size`` is None, else an array of ``size`` draws.
    """
    if size is None:
        return math.exp(_sample_log_gig(rng, params.lam, params.psi, params.chi))
    return _sample_gig_many(rng, params.lam, params.psi, params.chi, int(size))


def _check_shape_rate(shape, rate):
    if not (np.all(np.asarray(shape) > 0) and np.all(np.asarray(rate) > 0)):
        raise ValueError(f'shape and rate must be positive, got {shape}, {rate}')


def sample_gamma(rng: np.random.Generator, shape, rate, size=None):
    """Gamma draws parametrized by shape and rate."""
    _check_shape_rate(shape, rate)
    return rng.gamma(shape, 1.0 / np.asarray(rate, dtype=float), size=size)


def sample_inverse_gamma(rng: np.random.Generator, shape, rate, size=None):
    """Inverse-gamma draws: density proportional to t**(-shape-1) exp(-rate/t)."""
    _check_shape_rate(shape, rate)
    return 1.0 / rng.gamma(shape, 1.0 / np.asarray(rate, dtype=float), size=size)


def log_sum_exp(values) -> float:
    """Stable ``log(sum(exp(values)))``; ``-inf`` for an empty or all ``-inf`` input."""
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        return -math.inf
    top = v.max()
    if not np.isfinite(top):
        return float(top)
    return float(top + math.log(np.exp(v - top).sum()))
