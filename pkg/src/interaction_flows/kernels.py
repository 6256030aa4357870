'''
Coefficients of the SDE with interaction.

The drift is a mean-field convolution a(u, mu) = int phi(u - v) mu(dv), evaluated
against a particle ensemble as (1/N) sum_i phi(u - v_i). The noise is a finite
family b_0, ..., b_K of d x d matrix fields; column p of b_k multiplies the p-th
coordinate of the Brownian motion B_k.

All evaluators are vectorised over a leading batch shape. The batched entry points
used by the integrator take tracked positions x of shape (b, P, d), particle
positions of shape (b, N, d) and ensemble means of shape (b, d), b being the
number of replicas integrated together.

Array layout of the noise derivatives: ``jac[..., k, p, i, j]`` is the derivative
of entry (i, p) of b_k with respect to u_j, i.e. the matrix Db_k^{., p}.
'''

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from interaction_flows.ensemble import ParticleEnsemble
from interaction_flows.errors import (
    ConfigurationError,
    IndexRangeError,
    InvalidModelError,
)


def _square(matrix, d: int | None = None, name: str = 'matrix') -> np.ndarray:
    matrix = np.array(matrix, dtype=np.float64)
    if matrix.ndim == 0:
        matrix = matrix.reshape(1, 1)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise InvalidModelError(f'{name} must be square, got shape {matrix.shape}')
    if d is not None and matrix.shape[0] != d:
        raise InvalidModelError(f'{name} must be {d}x{d}, got {matrix.shape}')
    if not np.all(np.isfinite(matrix)):
        raise InvalidModelError(f'{name} has non-finite entries')
    return matrix


def _stack(matrices, d: int, name: str) -> np.ndarray:
    stack = np.array(matrices, dtype=np.float64)
    if stack.ndim == 2:
        stack = stack[None]
    if stack.ndim != 3 or stack.shape[1:] != (d, d):
        raise InvalidModelError(f'{name} must be a list of {d}x{d} matrices, got {stack.shape}')
    if not np.all(np.isfinite(stack)):
        raise InvalidModelError(f'{name} has non-finite entries')
    return stack


def liouville_integrand(drift_jac: np.ndarray, noise_jac: np.ndarray) -> np.ndarray:
    '''
    div a - 1/2 sum_k sum_p tr((Db_k^{., p})^2) from precomputed derivatives.

    drift_jac has shape (..., d, d) and noise_jac shape (..., K+1, d, d, d).
    '''
    div_a = np.trace(drift_jac, axis1=-2, axis2=-1)
    quadratic = np.einsum('...kpij,...kpji->...', noise_jac, noise_jac)
    return div_a - 0.5 * quadratic


def _central_difference(f, u: np.ndarray, h: float) -> np.ndarray:
    '''Jacobian of a vector (or matrix) valued f at u; last axis is the derivative axis.'''
    columns = []
    for j in range(u.shape[0]):
        step = np.zeros_like(u)
        step[j] = h
        columns.append((f(u + step) - f(u - step)) / (2.0 * h))
    return np.stack(columns, axis=-1)


#
# Interaction kernels
#


class InteractionKernel:
    '''
    Base class of the interaction kernels phi.

    Subclasses implement phi, dphi and div_phi over a trailing axis of length d,
    and declare the metadata used by the well-posedness report.
    '''

    variant = 'abstract'
    # Kernels with mean_field_only = True evaluate the empirical drift from the
    # ensemble mean alone, in O(1) per point.
    mean_field_only = False

    def __init__(self, A, alpha: float | None = None):
        self.A = _square(A, name='A')
        self.d = self.A.shape[0]
        bound = self.alpha_bound()
        self.alpha = float(bound if alpha is None else alpha)
        if self.alpha < 0:
            raise InvalidModelError(f'Dissipativity constant alpha must be >= 0, got {self.alpha}')
        if self.alpha > bound + 1e-12:
            raise InvalidModelError(
                f'Declared alpha = {self.alpha} exceeds the analytic bound {bound:.6g} of the kernel'
            )

    def phi(self, z: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def dphi(self, z: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def div_phi(self, z: np.ndarray) -> np.ndarray:
        return np.trace(self.dphi(z), axis1=-2, axis2=-1)

    def alpha_bound(self) -> float:
        '''Largest alpha for which the dissipativity inequality holds analytically.'''
        raise NotImplementedError

    @property
    def lipschitz(self) -> float:
        raise NotImplementedError

    @property
    def dphi_bound(self) -> float:
        return self.lipschitz

    @property
    def holder_exponent(self) -> float:
        # The shipped kernels have Lipschitz derivatives
        return 1.0

    def drift(self, x: np.ndarray, particles: np.ndarray, means: np.ndarray) -> np.ndarray:
        '''Empirical drift (1/N) sum_i phi(x - v_i) for x (b, P, d).'''
        z = x[:, :, None, :] - particles[:, None, :, :]
        return self.phi(z).mean(axis=2)

    def drift_jacobian(
        self, x: np.ndarray, particles: np.ndarray, means: np.ndarray
    ) -> np.ndarray:
        z = x[:, :, None, :] - particles[:, None, :, :]
        return self.dphi(z).mean(axis=2)

    def to_dict(self) -> dict:
        return {'variant': self.variant, 'A': self.A.tolist(), 'alpha': self.alpha}


class LinearKernel(InteractionKernel):
    '''phi(z) = -A z.'''

    variant = 'linear'
    mean_field_only = True

    def phi(self, z):
        return -np.einsum('ij,...j->...i', self.A, z)

    def dphi(self, z):
        return np.broadcast_to(-self.A, z.shape[:-1] + (self.d, self.d))

    def div_phi(self, z):
        return np.full(z.shape[:-1], -np.trace(self.A))

    def alpha_bound(self):
        return float(np.linalg.eigvalsh(0.5 * (self.A + self.A.T)).min())

    @property
    def lipschitz(self):
        return float(np.linalg.norm(self.A, 2))

    def drift(self, x, particles, means):
        return self.phi(x - means[:, None, :])

    def drift_jacobian(self, x, particles, means):
        return np.broadcast_to(-self.A, x.shape[:-1] + (self.d, self.d)).copy()


class SaturatingKernel(InteractionKernel):
    '''
    phi(z) = -A z - beta z / (1 + |z|^2 / s^2).

    The saturating part is not monotone: its radial derivative (1 - r)/(1 + r)^2,
    r = |z|^2/s^2, reaches -1/8 at r = 3, which costs beta/8 of dissipativity.
    '''

    variant = 'saturating'

    def __init__(self, A, beta: float, s: float = 1.0, alpha: float | None = None):
        if s <= 0:
            raise InvalidModelError(f'Saturation scale s must be > 0, got {s}')
        if beta < 0:
            raise InvalidModelError(f'Amplitude beta must be >= 0, got {beta}')
        self.beta = float(beta)
        self.s = float(s)
        super().__init__(A, alpha=alpha)

    def _r(self, z):
        return np.sum(z * z, axis=-1) / self.s**2

    def phi(self, z):
        r = self._r(z)
        return -np.einsum('ij,...j->...i', self.A, z) - self.beta * z / (1.0 + r)[..., None]

    def dphi(self, z):
        r = self._r(z)[..., None, None]
        eye = np.eye(self.d)
        outer = z[..., :, None] * z[..., None, :]
        saturation = eye / (1.0 + r) - 2.0 * outer / (self.s**2 * (1.0 + r) ** 2)
        return -self.A - self.beta * saturation

    def div_phi(self, z):
        r = self._r(z)
        return -np.trace(self.A) - self.beta * (self.d / (1.0 + r) - 2.0 * r / (1.0 + r) ** 2)

    def alpha_bound(self):
        sym_min = float(np.linalg.eigvalsh(0.5 * (self.A + self.A.T)).min())
        return sym_min - self.beta / 8.0

    @property
    def lipschitz(self):
        return float(np.linalg.norm(self.A, 2)) + self.beta

    def to_dict(self):
        out = super().to_dict()
        out.update({'beta': self.beta, 's': self.s})
        return out


#
# Diffusion families
#


class DiffusionFamily:
    '''
    Finite family b_0, ..., b_K of d x d diffusion coefficients.

    B is the l2-aggregate Lipschitz constant of the family (declared, or the
    analytic value of the variant when not given).
    '''

    variant = 'abstract'
    # True when every Db_k^{., p} is independent of u and of the measure.
    constant_derivative = False

    def __init__(self, d: int, count: int, B: float | None = None):
        self.d = d
        self.count = count
        bound = self.lipschitz_bound()
        self.B = float(bound if B is None else B)
        if self.B < bound - 1e-12:
            raise InvalidModelError(
                f'Declared B = {self.B} is below the analytic Lipschitz constant {bound:.6g}'
            )

    @property
    def K(self) -> int:
        return self.count - 1

    def values(self, x: np.ndarray, means: np.ndarray) -> np.ndarray:
        '''b_k(x, mu) for x (b, P, d); shape (b, P, K+1, d, d).'''
        raise NotImplementedError

    def column_jacobians(self, x: np.ndarray, means: np.ndarray) -> np.ndarray:
        '''Db_k^{., p}(x, mu) for x (b, P, d); shape (b, P, K+1, d, d, d).'''
        raise NotImplementedError

    def lipschitz_bound(self) -> float:
        raise NotImplementedError

    def derivative_bound(self) -> float:
        '''sup_u (sum_k ||Db_k(u)||_HS^2)^(1/2).'''
        raise NotImplementedError

    def to_dict(self) -> dict:
        return {'variant': self.variant, 'K': self.K, 'B': self.B}


class MeanRevertingDiffusion(DiffusionFamily):
    '''
    Column p of b_k is C_k (m_mu - u) + D_k^{., p}, m_mu the ensemble mean.

    The derivative of every column is -C_k, independent of u and of mu.
    '''

    variant = 'mean_reverting'
    constant_derivative = True

    def __init__(self, C, D=None, B: float | None = None):
        C = np.array(C, dtype=np.float64)
        d = C.shape[-1] if C.ndim >= 2 else 1
        self.C = _stack(C.reshape(-1, d, d) if C.ndim else C.reshape(1, 1, 1), d, 'C')
        self.D = np.zeros_like(self.C) if D is None else _stack(D, d, 'D')
        if self.D.shape != self.C.shape:
            raise InvalidModelError(
                f'C and D must have the same shape, got {self.C.shape} and {self.D.shape}'
            )
        super().__init__(d, self.C.shape[0], B=B)

    def values(self, x, means):
        reversion = np.einsum('kij,bxj->bxki', self.C, means[:, None, :] - x)
        return reversion[..., None] + self.D

    def column_jacobians(self, x, means):
        jac = np.broadcast_to(-self.C[:, None, :, :], (self.count, self.d, self.d, self.d))
        return np.broadcast_to(jac, x.shape[:-1] + jac.shape).copy()

    def lipschitz_bound(self):
        norms = [np.linalg.norm(c, 2) ** 2 for c in self.C]
        return math.sqrt(self.d * float(np.sum(norms)))

    def derivative_bound(self):
        return math.sqrt(self.d * float(np.sum(self.C**2)))

    def to_dict(self):
        out = super().to_dict()
        out.update({'C': self.C.tolist(), 'D': self.D.tolist()})
        return out


class FrozenDiffusion(DiffusionFamily):
    '''
    b_k(u) = D_k + S_k diag(tanh(u)), independent of the measure.

    Column p is D_k^{., p} + S_k^{., p} tanh(u_p), so Db_k^{., p} has the single
    non-zero column S_k^{., p} sech^2(u_p) at position p.
    '''

    variant = 'frozen'

    def __init__(self, S, D=None, B: float | None = None):
        S = np.array(S, dtype=np.float64)
        d = S.shape[-1] if S.ndim >= 2 else 1
        self.S = _stack(S.reshape(-1, d, d) if S.ndim else S.reshape(1, 1, 1), d, 'S')
        self.D = np.zeros_like(self.S) if D is None else _stack(D, d, 'D')
        if self.D.shape != self.S.shape:
            raise InvalidModelError(
                f'S and D must have the same shape, got {self.S.shape} and {self.D.shape}'
            )
        super().__init__(d, self.S.shape[0], B=B)
        self.constant_derivative = not np.any(self.S)

    def values(self, x, means):
        profile = np.tanh(x)[:, :, None, None, :]
        return self.D + self.S * profile

    def column_jacobians(self, x, means):
        sech2 = 1.0 / np.cosh(x) ** 2
        return np.einsum('kip,bxp,pj->bxkpij', self.S, sech2, np.eye(self.d))

    def lipschitz_bound(self):
        column_norms = np.sqrt(np.sum(self.S**2, axis=1))  # (K+1, d)
        return math.sqrt(float(np.sum(column_norms.max(axis=1) ** 2)))

    def derivative_bound(self):
        return math.sqrt(float(np.sum(self.S**2)))

    def to_dict(self):
        out = super().to_dict()
        out.update({'S': self.S.tolist(), 'D': self.D.tolist()})
        return out


def zero_diffusion(d: int) -> MeanRevertingDiffusion:
    '''A single identically vanishing noise kernel.'''
    return MeanRevertingDiffusion(np.zeros((1, d, d)))


#
# Model
#


@dataclass(frozen=True)
class ModelSpec:
    '''
    Coefficients of one SDE with interaction in dimension d.

    The single-point evaluators take a point u and a ParticleEnsemble standing in
    for the measure. Diffusion indices follow the usual conventions: k is 0-based
    (0 <= k <= K) and the column index p is 1-based (1 <= p <= d).
    '''

    d: int
    kernel: InteractionKernel
    diffusion: DiffusionFamily = field(default=None)

    def __post_init__(self):
        if self.d < 1:
            raise InvalidModelError(f'Dimension must be >= 1, got {self.d}')
        if self.diffusion is None:
            object.__setattr__(self, 'diffusion', zero_diffusion(self.d))
        if self.kernel.d != self.d or self.diffusion.d != self.d:
            raise InvalidModelError(
                f'Model dimension {self.d} does not match kernel ({self.kernel.d}) '
                f'or diffusion ({self.diffusion.d})'
            )

    @property
    def K(self) -> int:
        return self.diffusion.K

    def _batch(self, u, ensemble: ParticleEnsemble):
        if ensemble.d != self.d:
            raise ConfigurationError(
                f'Ensemble dimension {ensemble.d} does not match model dimension {self.d}'
            )
        u = ensemble.check_point(u)
        return u[None, None, :], ensemble.positions[None], ensemble.mean[None]

    def _check_index(self, k: int, p: int | None = None):
        if not 0 <= k <= self.K:
            raise IndexRangeError(f'Diffusion index k = {k} outside 0..{self.K}')
        if p is not None and not 1 <= p <= self.d:
            raise IndexRangeError(f'Column index p = {p} outside 1..{self.d}')

    def drift_eval(self, u, ensemble: ParticleEnsemble) -> np.ndarray:
        x, particles, means = self._batch(u, ensemble)
        return self.kernel.drift(x, particles, means)[0, 0]

    def drift_jacobian(self, u, ensemble: ParticleEnsemble) -> np.ndarray:
        x, particles, means = self._batch(u, ensemble)
        return self.kernel.drift_jacobian(x, particles, means)[0, 0]

    def drift_divergence(self, u, ensemble: ParticleEnsemble) -> float:
        return float(np.trace(self.drift_jacobian(u, ensemble)))

    def diffusion_eval(self, k: int, u, ensemble: ParticleEnsemble) -> np.ndarray:
        self._check_index(k)
        x, _, means = self._batch(u, ensemble)
        return self.diffusion.values(x, means)[0, 0, k]

    def diffusion_jacobian(self, k: int, p: int, u, ensemble: ParticleEnsemble) -> np.ndarray:
        self._check_index(k, p)
        x, _, means = self._batch(u, ensemble)
        return self.diffusion.column_jacobians(x, means)[0, 0, k, p - 1]

    def diffusion_divergence(self, k: int, p: int, u, ensemble: ParticleEnsemble) -> float:
        return float(np.trace(self.diffusion_jacobian(k, p, u, ensemble)))

    def liouville_drift_integrand(self, u, ensemble: ParticleEnsemble) -> float:
        x, particles, means = self._batch(u, ensemble)
        drift_jac = self.kernel.drift_jacobian(x, particles, means)
        noise_jac = self.diffusion.column_jacobians(x, means)
        return float(liouville_integrand(drift_jac, noise_jac)[0, 0])

    def to_dict(self) -> dict:
        return {'d': self.d, 'kernel': self.kernel.to_dict(), 'diffusion': self.diffusion.to_dict()}


#
# Well-posedness and dissipativity
#


@dataclass
class WellPosednessReport:
    '''
    Constants of the model and the outcome of the numerical spot checks.

    p_max is the largest integer p >= 1 with 2 alpha - B^2 (2p - 1) > 0
    (math.inf when B = 0, 0 when no such p exists).
    '''

    alpha: float
    B: float
    d: int
    q: float
    p_max: float
    order_margin: float
    order_margin_ok: bool
    lipschitz_ok: bool
    derivative_bound_ok: bool
    dissipativity_ok: bool
    divergence_ok: bool
    derivatives_ok: bool
    lyapunov_bound: float
    messages: list[str] = field(default_factory=list)

    @property
    def in_lemma_range(self) -> bool:
        return self.p_max >= 1

    @property
    def passed(self) -> bool:
        return all(
            (
                self.in_lemma_range,
                self.order_margin_ok,
                self.lipschitz_ok,
                self.derivative_bound_ok,
                self.dissipativity_ok,
                self.divergence_ok,
                self.derivatives_ok,
            )
        )

    def admits(self, p: float) -> bool:
        '''True when the moment contraction lemma applies to order p.'''
        if p < 1:
            return False
        if self.B == 0:
            return True
        return 2 * Fraction(self.alpha) - Fraction(self.B) ** 2 * (2 * Fraction(p) - 1) > 0

    def to_dict(self) -> dict:
        return {
            'alpha': self.alpha,
            'B': self.B,
            'd': self.d,
            'q': self.q,
            'p_max': 'inf' if math.isinf(self.p_max) else int(self.p_max),
            'order_margin': self.order_margin,
            'order_margin_ok': self.order_margin_ok,
            'lipschitz_ok': self.lipschitz_ok,
            'derivative_bound_ok': self.derivative_bound_ok,
            'dissipativity_ok': self.dissipativity_ok,
            'divergence_ok': self.divergence_ok,
            'derivatives_ok': self.derivatives_ok,
            'lyapunov_bound': self.lyapunov_bound,
            'in_lemma_range': self.in_lemma_range,
            'passed': self.passed,
            'messages': list(self.messages),
        }


def moment_order_limit(alpha: float, B: float) -> float:
    '''
    Largest integer p >= 1 with 2 alpha - B^2 (2p - 1) > 0, in exact arithmetic.

    Returns math.inf for B = 0 and 0 when not even p = 1 qualifies.
    '''
    if B == 0:
        return math.inf
    threshold = (2 * Fraction(alpha) / Fraction(B) ** 2 + 1) / 2
    # Strict inequality p < threshold
    p_max = math.ceil(threshold) - 1
    return max(p_max, 0)


def dissipativity_report(
    model: ModelSpec,
    q: float | None = None,
    n_samples: int = 1000,
    seed: int = 0,
    scale: float = 3.0,
) -> WellPosednessReport:
    '''
    Check the declared constants of a model and derive the admissible moment orders.

    Parameters
    ----------
    model : ModelSpec
        The model to check.
    q : float, optional
        Order at which the margin 2 alpha - B^2 (4q - 1) is evaluated.
        Defaults to d + 1.
    n_samples : int, optional
        Number of random points (and pairs) used by the spot checks.
    seed : int, optional
        Seed of the spot-check sample.
    scale : float, optional
        Standard deviation of the Gaussian sample points.

    Returns
    -------
    WellPosednessReport

    Raises
    ------
    InvalidModelError
        If the declared alpha is not positive.
    '''
    kernel, diffusion, d = model.kernel, model.diffusion, model.d
    alpha, B = kernel.alpha, diffusion.B
    if alpha <= 0:
        raise InvalidModelError(f'Dissipativity constant alpha must be > 0, got {alpha}')
    q = float(d + 1 if q is None else q)

    rng = np.random.default_rng(seed)
    u = scale * rng.standard_normal((n_samples, d))
    v = scale * rng.standard_normal((n_samples, d))
    h = u - v
    h2 = np.sum(h * h, axis=-1)
    messages = []

    inner = np.sum(h * (kernel.phi(u) - kernel.phi(v)), axis=-1)
    dissipativity_ok = bool(np.all(inner <= -alpha * h2 + 1e-12 * (1.0 + h2)))
    if not dissipativity_ok:
        messages.append(f'dissipativity inequality violated for declared alpha = {alpha}')

    divergence_ok = bool(np.all(kernel.div_phi(u) <= -d * alpha + 1e-12))
    if not divergence_ok:
        messages.append(f'div phi exceeds -d alpha = {-d * alpha}')

    # Lipschitz property of phi and of the noise family at a frozen measure
    means = np.zeros((1, d))
    phi_lip = np.linalg.norm(kernel.phi(u) - kernel.phi(v), axis=-1)
    b_u = diffusion.values(u[None], means)[0]
    b_v = diffusion.values(v[None], means)[0]
    b_lip = np.sqrt(np.sum((b_u - b_v) ** 2, axis=(-3, -2, -1)))
    dist = np.sqrt(h2)
    lipschitz_ok = bool(
        np.all(phi_lip <= kernel.lipschitz * dist * (1 + 1e-12) + 1e-12)
        and np.all(b_lip <= B * dist * (1 + 1e-12) + 1e-12)
    )
    if not lipschitz_ok:
        messages.append('Lipschitz bound violated on sample points')

    # Derivative bounds
    dphi_norms = np.linalg.norm(kernel.dphi(u), 2, axis=(-2, -1))
    jac = diffusion.column_jacobians(u[None], means)[0]
    aggregate = np.sqrt(np.sum(jac**2, axis=(-4, -3, -2, -1)))
    derivative_bound_ok = bool(
        np.all(dphi_norms <= kernel.dphi_bound * (1 + 1e-12) + 1e-12)
        and np.all(aggregate <= B * math.sqrt(d) * (1 + 1e-12) + 1e-12)
    )
    if not derivative_bound_ok:
        messages.append('derivative bound violated on sample points')

    derivatives_ok = _derivatives_match(model, u[:16])
    if not derivatives_ok:
        messages.append('analytic derivatives disagree with central differences')

    p_max = moment_order_limit(alpha, B)
    if p_max < 1:
        messages.append(
            f'2 alpha - B^2 (2p - 1) > 0 has no solution p >= 1 (alpha = {alpha}, B = {B}); '
            'the moment contraction lemma does not apply'
        )
    order_margin = 2 * alpha - B**2 * (4 * q - 1)

    return WellPosednessReport(
        alpha=alpha,
        B=B,
        d=d,
        q=q,
        p_max=p_max,
        order_margin=order_margin,
        order_margin_ok=order_margin > 0,
        lipschitz_ok=lipschitz_ok,
        derivative_bound_ok=derivative_bound_ok,
        dissipativity_ok=dissipativity_ok,
        divergence_ok=divergence_ok,
        derivatives_ok=derivatives_ok,
        lyapunov_bound=d * (-alpha + B**2 / 2),
        messages=messages,
    )


def _derivatives_match(model: ModelSpec, points: np.ndarray, h: float = 1e-5) -> bool:
    '''Compare analytic derivatives with central differences at a few points.'''
    kernel, diffusion = model.kernel, model.diffusion
    means = np.zeros((1, model.d))
    for u in points:
        fd = _central_difference(kernel.phi, u, h)
        if not np.allclose(kernel.dphi(u), fd, rtol=1e-5, atol=1e-5):
            return False

        def columns(w):
            return diffusion.values(w[None, None, :], means)[0, 0]

        fd = _central_difference(columns, u, h)  # (K+1, i, p, j)
        analytic = diffusion.column_jacobians(u[None, None, :], means)[0, 0]  # (K+1, p, i, j)
        if not np.allclose(analytic, np.swapaxes(fd, 1, 2), rtol=1e-5, atol=1e-5):
            return False
    return True
