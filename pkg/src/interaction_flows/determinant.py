'''
Derivatives of the determinant and the Liouville consistency check.

For a square matrix A the gradient of det is the matrix of signed cofactors, and
for any B of the same size

    sum_ij d det / dA_ij (BA)_ij = det(A) tr(B)
    sum_ijkl d^2 det / dA_ij dA_kl (BA)_ij (BA)_kl = (tr(B)^2 - tr(B^2)) det(A)

These identities are what turns the variational equation of the flow into the
exponential formula for det Dx. The functions below evaluate both sides so that
the identities can be property tested on random matrices.
'''

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from interaction_flows.errors import ConfigurationError, DeterminantSignError, PreconditionError

# Relative tolerances of the identity suite
FIRST_ORDER_TOL = 1e-8
SECOND_ORDER_TOL = 1e-5
GRADIENT_TOL = 1e-6


def _square(A, name: str = 'A') -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] == 0:
        raise ConfigurationError(f'{name} must be a non-empty square matrix, got shape {A.shape}')
    return A


def _pair(A, B) -> tuple[np.ndarray, np.ndarray]:
    A, B = _square(A, 'A'), _square(B, 'B')
    if A.shape != B.shape:
        raise ConfigurationError(f'A and B must have equal sizes, got {A.shape} and {B.shape}')
    return A, B


def _minor(A: np.ndarray, rows, cols) -> float:
    sub = np.delete(np.delete(A, rows, axis=0), cols, axis=1)
    if sub.size == 0:
        return 1.0
    return float(np.linalg.det(sub))


@dataclass(frozen=True)
class CofactorMatrix:
    '''Signed cofactors (-1)^(i+j) M_ij(A) of a square matrix A.'''

    matrix: np.ndarray
    cofactors: np.ndarray = field(repr=False)

    @classmethod
    def of(cls, A) -> 'CofactorMatrix':
        A = _square(A)
        d = A.shape[0]
        cof = np.empty_like(A)
        for i in range(d):
            for j in range(d):
                cof[i, j] = (-1) ** (i + j) * _minor(A, i, j)
        return cls(A, cof)

    @property
    def adjugate(self) -> np.ndarray:
        return self.cofactors.T

    def residual(self) -> float:
        '''max |A adj(A) - det(A) I| relative to max(|det A|, tiny).'''
        det = np.linalg.det(self.matrix)
        error = self.matrix @ self.adjugate - det * np.eye(self.matrix.shape[0])
        return float(np.abs(error).max() / max(abs(det), np.finfo(float).tiny))


def det_gradient(A) -> np.ndarray:
    '''Gradient of det at A: entry (i, j) is d det / dA_ij, the signed cofactor.'''
    return CofactorMatrix.of(A).cofactors


def det_gradient_fd(A, h: float | None = None) -> np.ndarray:
    '''Central finite-difference gradient of det, for testing det_gradient.'''
    A = _square(A)
    d = A.shape[0]
    h = 1e-4 * (1.0 + np.linalg.norm(A, 2)) if h is None else h
    steps = np.eye(d * d).reshape(d * d, d, d) * h
    plus = np.linalg.det(A + steps)
    minus = np.linalg.det(A - steps)
    return ((plus - minus) / (2.0 * h)).reshape(d, d)


def first_order_identity(A, B) -> tuple[float, float]:
    '''Both sides of sum_ij d det/dA_ij (BA)_ij = det(A) tr(B).'''
    A, B = _pair(A, B)
    lhs = float(np.sum(det_gradient(A) * (B @ A)))
    rhs = float(np.linalg.det(A) * np.trace(B))
    return lhs, rhs


def det_hessian_fd(A, h: float | None = None) -> np.ndarray:
    '''
    Hessian of det by nested central differences, shape (d, d, d, d).

    Uses h = 1e-4 (1 + ||A||_2) by default.
    '''
    A = _square(A)
    d = A.shape[0]
    n = d * d
    h = 1e-4 * (1.0 + np.linalg.norm(A, 2)) if h is None else h
    E = np.eye(n).reshape(n, d, d) * h
    first = E[:, None]
    second = E[None, :]
    pp = np.linalg.det(A + first + second)
    pm = np.linalg.det(A + first - second)
    mp = np.linalg.det(A - first + second)
    mm = np.linalg.det(A - first - second)
    return ((pp - pm - mp + mm) / (4.0 * h * h)).reshape(d, d, d, d)


def det_hessian_analytic(A) -> np.ndarray:
    '''
    Hessian of det from second cofactors, shape (d, d, d, d).

    d^2 det / dA_ij dA_kl vanishes when i = k or j = l; otherwise it is the minor
    with rows i, k and columns j, l removed, times (-1)^(i+j+k+l) and a further
    -1 when the removed rows and columns are in opposite order.
    '''
    A = _square(A)
    d = A.shape[0]
    H = np.zeros((d, d, d, d))
    for i in range(d):
        for k in range(d):
            if i == k:
                continue
            for j in range(d):
                for l in range(d):  # noqa: E741
                    if j == l:
                        continue
                    order = 1.0 if (i < k) == (j < l) else -1.0
                    H[i, j, k, l] = (-1) ** (i + j + k + l) * order * _minor(A, [i, k], [j, l])
    return H


def second_order_identity(A, B, method: str = 'fd') -> tuple[float, float]:
    '''
    Both sides of sum_ijkl d^2 det (BA)_ij (BA)_kl = (tr(B)^2 - tr(B^2)) det(A).

    Parameters
    ----------
    A, B : array-like
        Square matrices of equal size.
    method : {'fd', 'analytic'}
        How the Hessian of det is obtained: nested central differences (default)
        or second cofactors.

    Returns
    -------
    (lhs, rhs) : tuple of float
    '''
    A, B = _pair(A, B)
    if method == 'fd':
        H = det_hessian_fd(A)
    elif method == 'analytic':
        H = det_hessian_analytic(A)
    else:
        raise ConfigurationError(f'Unknown Hessian method {method!r}; use "fd" or "analytic"')
    C = B @ A
    lhs = float(np.einsum('ijkl,ij,kl->', H, C, C))
    rhs = float((np.trace(B) ** 2 - np.trace(B @ B)) * np.linalg.det(A))
    return lhs, rhs


def liouville_consistency(J, bv: float, mart: float) -> float:
    '''
    Relative discrepancy |det J - exp(bv + mart)| / exp(bv + mart).

    Raises
    ------
    DeterminantSignError
        If det J <= 0.
    '''
    J = _square(J, 'J')
    sign, logdet = np.linalg.slogdet(J)
    if sign <= 0:
        raise DeterminantSignError(detail=f'det J = {np.linalg.det(J):.3e}')
    return float(abs(math.expm1(logdet - (bv + mart))))


def liouville_discrepancies(trajectory, t: float | None = None) -> np.ndarray:
    '''
    Liouville discrepancy of every replica and tracked point at snapshot t.

    Defaults to the final snapshot. Returns an array of shape (replica, point).
    '''
    i = len(trajectory.times) - 1 if t is None else trajectory.time_index(t)
    J = trajectory.ds['jacobian'].values[:, i]
    L = trajectory.log_det()[:, i]
    sign, logdet = np.linalg.slogdet(J)
    if np.any(sign <= 0):
        r, g = np.argwhere(sign <= 0)[0]
        raise DeterminantSignError(
            time=float(trajectory.times[i]),
            replicas=[int(trajectory.replicas[r])],
            point=int(trajectory.point_ids[g]),
        )
    return np.abs(np.expm1(logdet - L))


def random_test_matrix(d: int, rng: np.random.Generator, min_abs_det: float = 1e-3) -> np.ndarray:
    '''Entries uniform in [-1, 1], redrawn until |det| >= min_abs_det.'''
    if d < 1:
        raise PreconditionError(f'Matrix size must be >= 1, got {d}')
    while True:
        A = rng.uniform(-1.0, 1.0, size=(d, d))
        if abs(np.linalg.det(A)) >= min_abs_det:
            return A


@dataclass(frozen=True)
class IdentityCheck:
    '''One row of the identity suite.'''

    identity: str
    d: int
    n_pairs: int
    max_abs_deviation: float
    max_rel_deviation: float
    tolerance: float
    method: str = 'direct'

    @property
    def passed(self) -> bool:
        return self.max_rel_deviation <= self.tolerance

    def to_dict(self) -> dict:
        out = asdict(self)
        out['passed'] = self.passed
        return out


def _check(name, d, values, tolerance, method='direct') -> IdentityCheck:
    lhs, rhs = np.asarray(values, dtype=np.float64).T
    deviation = np.abs(lhs - rhs)
    return IdentityCheck(
        identity=name,
        d=d,
        n_pairs=len(values),
        max_abs_deviation=float(deviation.max()),
        max_rel_deviation=float((deviation / (1.0 + np.abs(rhs))).max()),
        tolerance=tolerance,
        method=method,
    )


def identity_suite(
    n_pairs: int = 100,
    dims=(2, 3, 4, 5),
    seed: int = 0,
    method: str = 'fd',
) -> list[IdentityCheck]:
    '''
    Check the determinant identities on random matrix pairs.

    For every d, draws ``n_pairs`` pairs (A, B) with the rejection rule of
    random_test_matrix and reports the worst deviation of the cofactor
    gradient (against finite differences), of the first-order identity and of
    the second-order identity. Deviations are relative to 1 + |rhs|.
    '''
    rng = np.random.default_rng(seed)
    rows = []
    for d in dims:
        pairs = [(random_test_matrix(d, rng), random_test_matrix(d, rng)) for _ in range(n_pairs)]
        gradient = []
        for A, _ in pairs:
            exact, fd = det_gradient(A), det_gradient_fd(A)
            scale = 1.0 + np.abs(fd).max()
            # Compare as scalars so that _check can reuse the lhs/rhs layout
            gradient.append((np.abs(exact - fd).max() / scale, 0.0))
        rows.append(_check('cofactor_gradient', d, gradient, GRADIENT_TOL, 'fd'))
        rows.append(
            _check('first_order', d, [first_order_identity(A, B) for A, B in pairs], FIRST_ORDER_TOL)
        )
        rows.append(
            _check(
                'second_order',
                d,
                [second_order_identity(A, B, method) for A, B in pairs],
                SECOND_ORDER_TOL,
                method,
            )
        )
    return rows
