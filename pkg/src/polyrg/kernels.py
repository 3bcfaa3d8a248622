"""Field functionals with exact Gaussian calculus where the class allows.

A kernel is a real functional of a full-lattice field vector psi.  Three
flavors: quadratic (constant + linear + quadratic form), trigonometric
(finite sums of cosines of linear forms), and black-box callables.  The
first two are closed under directional differentiation and under Gaussian
expectation of a shifted argument, which is what one-step coarse graining
needs; callables fall back to finite differences and Monte Carlo.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "QuadraticKernel",
    "TrigKernel",
    "CallableKernel",
    "mixed_directional_derivative",
]


class FieldKernel:
    """Interface: value, directional derivatives, shifted Gaussian mean."""

    exact = False

    def value(self, psi):
        raise NotImplementedError

    def value_batch(self, psis):
        return np.array([self.value(p) for p in np.atleast_2d(psis)])

    def derivative(self, psi, directions):
        """Mixed directional derivative d^n/dt1..dtn F(psi + sum t_i d_i)."""
        raise NotImplementedError

    def shifted_expectation(self, cov, pre=None, rng=None, samples=None):
        """Kernel psi -> E_zeta F(psi + pre zeta), zeta ~ N(0, cov).

        cov is a full-lattice covariance (embedded by zeros off its
        support); pre an optional full-lattice matrix applied to zeta.
        """
        raise NotImplementedError

    def taylor2_value(self, psi):
        """F(0) + F'(0; psi) + (1/2) F''(0; psi, psi)."""
        zero = np.zeros_like(psi)
        return (
            self.value(zero)
            + self.derivative(zero, [psi])
            + 0.5 * self.derivative(zero, [psi, psi])
        )


def _push_cov(cov, pre):
    if pre is None:
        return cov
    return pre @ cov @ pre.T


@dataclass
class QuadraticKernel(FieldKernel):
    """c + a . psi + psi^T Q psi with Q symmetric."""

    const: float
    linear: np.ndarray
    quad: np.ndarray

    exact = True

    def __post_init__(self):
        self.linear = np.asarray(self.linear, dtype=float)
        self.quad = np.asarray(self.quad, dtype=float)
        self.quad = 0.5 * (self.quad + self.quad.T)

    @classmethod
    def zero(cls, n):
        return cls(0.0, np.zeros(n), np.zeros((n, n)))

    @classmethod
    def gradient_square(cls, lat, mask, coefficient=1.0):
        """coefficient * sum_{x in X, e} (d_e psi(x))^2 as a kernel."""
        from .gaussian import gradient_square_matrix

        S = gradient_square_matrix(lat, mask)
        return cls(0.0, np.zeros(lat.site_count), coefficient * S)

    def value(self, psi):
        psi = np.asarray(psi, dtype=float)
        return float(self.const + self.linear @ psi + psi @ self.quad @ psi)

    def value_batch(self, psis):
        psis = np.atleast_2d(np.asarray(psis, dtype=float))
        return (
            self.const
            + psis @ self.linear
            + np.einsum("ij,jk,ik->i", psis, self.quad, psis)
        )

    def derivative(self, psi, directions):
        n = len(directions)
        if n == 1:
            d = np.asarray(directions[0], dtype=float)
            return float(self.linear @ d + 2.0 * (np.asarray(psi) @ self.quad @ d))
        if n == 2:
            d1 = np.asarray(directions[0], dtype=float)
            d2 = np.asarray(directions[1], dtype=float)
            return float(2.0 * d1 @ self.quad @ d2)
        return 0.0

    def shifted_expectation(self, cov, pre=None, rng=None, samples=None):
        sigma = _push_cov(cov, pre)
        return QuadraticKernel(
            self.const + float(np.tensordot(self.quad, sigma)),
            self.linear.copy(),
            self.quad.copy(),
        )

    def shift(self, v):
        v = np.asarray(v, dtype=float)
        return QuadraticKernel(
            self.value(v), self.linear + 2.0 * self.quad @ v, self.quad
        )


@dataclass
class TrigKernel(FieldKernel):
    """const + sum_k coef_k cos(l_k . psi + theta_k)."""

    const: float
    coefs: np.ndarray
    waves: np.ndarray  # (n_terms, site_count)
    phases: np.ndarray

    exact = True

    def __post_init__(self):
        self.coefs = np.atleast_1d(np.asarray(self.coefs, dtype=float))
        self.waves = np.atleast_2d(np.asarray(self.waves, dtype=float))
        self.phases = np.atleast_1d(np.asarray(self.phases, dtype=float))

    @classmethod
    def single(cls, coef, wave, phase=0.0, const=0.0):
        return cls(const, [coef], [wave], [phase])

    def value(self, psi):
        args = self.waves @ np.asarray(psi, dtype=float) + self.phases
        return float(self.const + self.coefs @ np.cos(args))

    def value_batch(self, psis):
        psis = np.atleast_2d(np.asarray(psis, dtype=float))
        args = psis @ self.waves.T + self.phases
        return self.const + np.cos(args) @ self.coefs

    def derivative(self, psi, directions):
        args = self.waves @ np.asarray(psi, dtype=float) + self.phases
        n = len(directions)
        gains = np.ones_like(self.coefs)
        for d in directions:
            gains = gains * (self.waves @ np.asarray(d, dtype=float))
        return float(self.coefs @ (gains * np.cos(args + n * np.pi / 2.0)))

    def shifted_expectation(self, cov, pre=None, rng=None, samples=None):
        sigma = _push_cov(cov, pre)
        live = np.flatnonzero(np.abs(self.waves).sum(axis=0) > 0)
        sub = self.waves[:, live]
        damp = np.exp(
            -0.5
            * np.einsum("ki,ij,kj->k", sub, sigma[np.ix_(live, live)], sub)
        )
        return TrigKernel(self.const, self.coefs * damp, self.waves.copy(),
                          self.phases.copy())

    def shift(self, v):
        return TrigKernel(
            self.const,
            self.coefs.copy(),
            self.waves.copy(),
            self.phases + self.waves @ np.asarray(v, dtype=float),
        )

    def multiply(self, other):
        """Product with another cosine sum, via the product-to-sum rule."""
        if not isinstance(other, TrigKernel):
            raise TypeError("can only multiply TrigKernel by TrigKernel")
        na, nb = len(self.coefs), len(other.coefs)
        cross = 0.5 * np.outer(self.coefs, other.coefs).ravel()
        w_sum = (self.waves[:, None, :] + other.waves[None, :, :]).reshape(
            na * nb, -1
        )
        w_dif = (self.waves[:, None, :] - other.waves[None, :, :]).reshape(
            na * nb, -1
        )
        p_sum = (self.phases[:, None] + other.phases[None, :]).ravel()
        p_dif = (self.phases[:, None] - other.phases[None, :]).ravel()
        coefs = [cross, cross]
        waves = [w_sum, w_dif]
        phases = [p_sum, p_dif]
        if self.const:
            coefs.append(self.const * other.coefs)
            waves.append(other.waves)
            phases.append(other.phases)
        if other.const:
            coefs.append(other.const * self.coefs)
            waves.append(self.waves)
            phases.append(self.phases)
        return TrigKernel(
            self.const * other.const,
            np.concatenate(coefs),
            np.concatenate(waves, axis=0),
            np.concatenate(phases),
        )


def mixed_directional_derivative(fn, psi, directions, step=1e-3):
    """Central-difference mixed derivative along the given directions."""
    psi = np.asarray(psi, dtype=float)
    n = len(directions)
    if n == 0:
        return float(fn(psi))
    total = 0.0
    for signs in np.ndindex(*(2,) * n):
        s = np.array([1.0 if b == 0 else -1.0 for b in signs])
        point = psi.copy()
        for si, d in zip(s, directions):
            point = point + si * step * np.asarray(d, dtype=float)
        total += np.prod(s) * fn(point)
    return float(total / (2.0 * step) ** n)


@dataclass
class CallableKernel(FieldKernel):
    """Black-box functional; derivatives by finite differences."""

    fn: callable
    fd_step: float = 1e-3
    batch_fn: callable = field(default=None)

    def value(self, psi):
        return float(self.fn(np.asarray(psi, dtype=float)))

    def value_batch(self, psis):
        psis = np.atleast_2d(np.asarray(psis, dtype=float))
        if self.batch_fn is not None:
            return np.asarray(self.batch_fn(psis), dtype=float)
        return np.array([self.fn(p) for p in psis])

    def derivative(self, psi, directions):
        # two Richardson refinements of the central stencil
        d1 = mixed_directional_derivative(
            self.fn, psi, directions, step=self.fd_step
        )
        d2 = mixed_directional_derivative(
            self.fn, psi, directions, step=self.fd_step / 2.0
        )
        d4 = mixed_directional_derivative(
            self.fn, psi, directions, step=self.fd_step / 4.0
        )
        r1 = (4.0 * d2 - d1) / 3.0
        r2 = (4.0 * d4 - d2) / 3.0
        return (16.0 * r2 - r1) / 15.0

    def shifted_expectation(self, cov, pre=None, rng=None, samples=None):
        if rng is None or samples is None:
            raise ValueError("black-box expectation needs rng and samples")
        chol = _masked_cholesky(cov)
        draws = rng.standard_normal(size=(samples, cov.shape[0]))
        zetas = draws @ chol.T
        if pre is not None:
            zetas = zetas @ pre.T
        batch = self.value_batch

        def averaged(psi):
            return float(np.mean(batch(psi + zetas)))

        def averaged_batch(psis):
            return np.array(
                [np.mean(batch(p + zetas)) for p in np.atleast_2d(psis)]
            )

        return CallableKernel(averaged, fd_step=self.fd_step,
                              batch_fn=averaged_batch)


def _masked_cholesky(cov):
    """Cholesky factor of a PSD matrix supported on a subset of indices."""
    cov = np.asarray(cov, dtype=float)
    live = np.flatnonzero(np.abs(cov).sum(axis=0) > 0)
    out = np.zeros_like(cov)
    if len(live):
        sub = cov[np.ix_(live, live)]
        # tolerate tiny negative eigenvalues from embedding
        w, V = np.linalg.eigh(0.5 * (sub + sub.T))
        w = np.clip(w, 0.0, None)
        out[np.ix_(live, live)] = V * np.sqrt(w) @ V.T
    return out
