"""Complex Gaussian density algebra.

Every message, prior and belief in the package is a circularly-symmetric
complex Gaussian described by a mean and a Hermitian covariance.  The
functions here multiply, divide, evaluate and project such densities.

Public kernels work on single densities (`GaussianStats`,
`ScalarGaussian`, `BlockDiagGaussianStats`).  The underscore-free batched
helpers (`cholesky`, `solve_psd`, `inv_psd`, `posterior_cov_form`,
`combine_cov_info`, `ratio_blocks`) operate on stacks of matrices with
arbitrary leading dimensions and are what the inference modules call in
their inner loops.

Log-densities never include a ``-d ln(pi)`` term unless stated: callers
that need the normalised value use `log_gaussian_pdf`.
"""

from dataclasses import dataclass

import numpy as np

from gfcf.exceptions import ContractViolation, NumericalFailure

JITTER_START = 1e-10
JITTER_MAX = 1e-6
HERMITIAN_RTOL = 1e-10
PSD_RTOL = 1e-9
RATIO_FLOOR = 1e-8
_ZERO_PRECISION_TOL = 1e-12


def hermitize(C):
    return 0.5 * (C + np.conj(np.swapaxes(C, -1, -2)))


def _condition(C):
    try:
        return float(np.linalg.cond(C))
    except np.linalg.LinAlgError:
        return float("inf")


def _cholesky_single(C):
    try:
        return np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        pass
    d = C.shape[-1]
    scale = float(np.real(np.trace(C))) / d
    if scale > 0 and np.isfinite(scale):
        eps = JITTER_START
        while eps <= JITTER_MAX * (1 + 1e-9):
            try:
                return np.linalg.cholesky(C + eps * scale * np.eye(d))
            except np.linalg.LinAlgError:
                eps *= 10
    raise NumericalFailure("Cholesky factorization failed after maximum jitter", _condition(C))


def cholesky(C):
    """Lower Cholesky factor of a (stack of) Hermitian PSD matrices.

    The plain factorization is tried first.  Matrices that fail receive a
    diagonal load of ``eps * trace/d`` with ``eps`` escalating by 10x from
    1e-10 to 1e-6; only the failing members of a stack are loaded.
    """
    C = np.asarray(C)
    try:
        return np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        pass
    if C.ndim == 2:
        return _cholesky_single(C)
    d = C.shape[-1]
    flat = C.reshape(-1, d, d)
    out = np.empty_like(flat)
    for i, Ci in enumerate(flat):
        out[i] = _cholesky_single(Ci)
    return out.reshape(C.shape)


def _ctrans(A):
    return np.conj(np.swapaxes(A, -1, -2))


def solve_psd(C, B):
    """Solve ``C X = B`` for Hermitian PSD ``C`` via its Cholesky factor."""
    L = cholesky(C)
    Z = np.linalg.solve(L, B)
    return np.linalg.solve(_ctrans(L), Z)


def inv_psd(C):
    C = np.asarray(C)
    L = cholesky(C)
    eye = np.broadcast_to(np.eye(C.shape[-1], dtype=L.dtype), C.shape)
    Linv = np.linalg.solve(L, eye)
    return hermitize(_ctrans(Linv) @ Linv)


def logdet_psd(C):
    L = cholesky(C)
    return 2.0 * np.sum(np.log(np.real(np.diagonal(L, axis1=-2, axis2=-1))), axis=-1)


def logdet_and_inv(C):
    """Return ``(ln det C, C^-1)`` from a single factorization."""
    C = np.asarray(C)
    L = cholesky(C)
    logdet = 2.0 * np.sum(np.log(np.real(np.diagonal(L, axis1=-2, axis2=-1))), axis=-1)
    eye = np.broadcast_to(np.eye(C.shape[-1], dtype=L.dtype), C.shape)
    Linv = np.linalg.solve(L, eye)
    return logdet, hermitize(_ctrans(Linv) @ Linv)


def _check_hermitian(C, name):
    C = np.asarray(C)
    if C.ndim < 2 or C.shape[-1] != C.shape[-2]:
        raise ContractViolation(f"{name} must be square, got shape {C.shape}")
    if not np.all(np.isfinite(C)):
        return
    norm = np.linalg.norm(C)
    if np.linalg.norm(C - _ctrans(C)) > HERMITIAN_RTOL * max(norm, 1e-300):
        raise ContractViolation(f"{name} is not Hermitian")


def _check_psd(C, name):
    if not np.all(np.isfinite(C)):
        return
    d = C.shape[-1]
    w = np.linalg.eigvalsh(hermitize(C))
    tr = np.real(np.trace(C, axis1=-2, axis2=-1))
    if np.any(w.min(axis=-1) < -PSD_RTOL * np.maximum(tr, 0) / d - 1e-300):
        raise ContractViolation(f"{name} is not positive semidefinite")


@dataclass(frozen=True)
class GaussianStats:
    """Mean vector and Hermitian covariance of a complex Gaussian.

    A vacuous (flat) density is represented by an all-``inf`` diagonal
    covariance; use `GaussianStats.vacuous` to build one.
    """

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=complex))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=complex))
        if mean.ndim != 1 or cov.shape != (mean.size, mean.size):
            raise ContractViolation(
                f"inconsistent shapes: mean {mean.shape}, cov {cov.shape}"
            )
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        if not self.is_vacuous:
            _check_hermitian(cov, "cov")

    @classmethod
    def vacuous(cls, dim):
        cov = np.zeros((dim, dim), dtype=complex)
        np.fill_diagonal(cov, np.inf)
        return cls(np.zeros(dim, dtype=complex), cov)

    @property
    def dim(self):
        return self.mean.size

    @property
    def is_vacuous(self):
        return bool(np.any(np.isinf(np.real(np.diagonal(self.cov)))))


@dataclass(frozen=True)
class ScalarGaussian:
    mean: complex
    var: float

    def __post_init__(self):
        var = float(np.real(self.var))
        if not var >= 0:
            raise ContractViolation(f"variance must be >= 0, got {self.var}")
        object.__setattr__(self, "var", var)
        object.__setattr__(self, "mean", complex(self.mean))

    @classmethod
    def vacuous(cls):
        return cls(0.0, np.inf)

    @property
    def is_vacuous(self):
        return np.isinf(self.var)


@dataclass(frozen=True)
class BlockDiagGaussianStats:
    """Gaussian over ``T`` stacked length-``N`` blocks, independent across blocks.

    ``mean`` has length ``T*N`` (block ``t`` occupies ``[t*N, (t+1)*N)``) and
    ``blocks`` has shape ``(T, N, N)``.
    """

    mean: np.ndarray
    blocks: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=complex).reshape(-1)
        blocks = np.asarray(self.blocks, dtype=complex)
        if blocks.ndim != 3 or blocks.shape[1] != blocks.shape[2]:
            raise ContractViolation(f"blocks must be (T, N, N), got {blocks.shape}")
        if mean.size != blocks.shape[0] * blocks.shape[1]:
            raise ContractViolation("mean length must equal T*N")
        for t, B in enumerate(blocks):
            _check_hermitian(B, f"block {t}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "blocks", blocks)

    @property
    def n_blocks(self):
        return self.blocks.shape[0]

    @property
    def block_size(self):
        return self.blocks.shape[1]

    def dense_cov(self):
        T, N = self.n_blocks, self.block_size
        C = np.zeros((T * N, T * N), dtype=complex)
        for t in range(T):
            C[t * N:(t + 1) * N, t * N:(t + 1) * N] = self.blocks[t]
        return C


def log_gaussian_pdf(x, mean, cov):
    """``ln CN(x | mean, cov)`` including the ``-d ln(pi)`` constant.

    Uses a Cholesky factorization for both the log-determinant and the
    quadratic form.
    """
    x = np.atleast_1d(np.asarray(x, dtype=complex))
    mean = np.atleast_1d(np.asarray(mean, dtype=complex))
    cov = np.atleast_2d(np.asarray(cov, dtype=complex))
    _check_hermitian(cov, "cov")
    d = x.size
    L = cholesky(cov)
    w = np.linalg.solve(L, x - mean)
    logdet = 2.0 * np.sum(np.log(np.real(np.diag(L))))
    return float(-d * np.log(np.pi) - logdet - np.real(np.vdot(w, w)))


def gaussian_product(m1, A, C1, prior):
    """Combine a linear-Gaussian observation with a Gaussian prior.

    Evaluates ``CN(m1 | A x, C1) CN(x | m2, C2) = CN(x | m3, C3) Z`` and
    returns ``(GaussianStats(m3, C3), ln Z)`` where
    ``ln Z = ln CN(m1 | A m2, C1 + A C2 A^H)``.

    The posterior is formed in gain form, so ``C2`` may be singular and
    ``C1`` only needs ``C1 + A C2 A^H`` to be invertible.
    """
    m1 = np.atleast_1d(np.asarray(m1, dtype=complex))
    A = np.atleast_2d(np.asarray(A, dtype=complex))
    C1 = np.atleast_2d(np.asarray(C1, dtype=complex))
    if prior.is_vacuous:
        raise ContractViolation("gaussian_product needs a proper prior")
    _check_hermitian(C1, "C1")
    _check_psd(C1, "C1")
    _check_psd(prior.cov, "prior cov")
    m2, C2 = prior.mean, prior.cov
    if A.shape != (m1.size, m2.size) or C1.shape != (m1.size, m1.size):
        raise ContractViolation("dimension mismatch in gaussian_product")
    S = hermitize(C1 + A @ C2 @ A.conj().T)
    AC2 = A @ C2
    K = solve_psd(S, AC2).conj().T  # C2 A^H S^-1
    resid = m1 - A @ m2
    m3 = m2 + K @ resid
    C3 = hermitize(C2 - K @ AC2)
    evidence = log_gaussian_pdf(m1, A @ m2, S)
    return GaussianStats(m3, C3), evidence


def gaussian_multiply(g1, g2):
    """Normalised product of two Gaussians over the same variable."""
    if g1.is_vacuous:
        return g2
    if g2.is_vacuous:
        return g1
    post, _ = gaussian_product(g1.mean, np.eye(g1.dim), g1.cov, g2)
    return post


def _scalar_ratio(num, den, floor):
    if den.is_vacuous or num.is_vacuous:
        return num
    if den.var == 0:
        raise ContractViolation("cannot divide by a point mass")
    den_prec = 1.0 / den.var
    if num.var == 0:
        return ScalarGaussian(num.mean, 0.0)
    beta = num.var / den.var
    gap = 1.0 - beta
    if abs(gap) <= _ZERO_PRECISION_TOL:
        return ScalarGaussian.vacuous()
    prec = num.var ** -1 - den_prec
    if prec < floor * den_prec:
        prec = floor * den_prec
        mean = (num.mean / num.var - den.mean / den.var) / prec
        return ScalarGaussian(mean, 1.0 / prec)
    return ScalarGaussian((num.mean - beta * den.mean) / gap, num.var / gap)


def ratio_blocks(num_mean, num_cov, den_mean, den_cov, floor=RATIO_FLOOR):
    """Batched Gaussian division ``CN(num) / CN(den)`` in covariance form.

    Works in the basis whitened by ``den_cov`` (which must be positive
    definite); ``num_cov`` may be singular.  With ``beta_i`` the whitened
    eigenvalues of ``num_cov`` the quotient precision along that direction
    is ``1/beta_i - 1``.  Directions whose precision falls below
    ``floor`` (relative to the denominator precision) are clamped to
    ``floor``, which keeps every returned covariance finite and PSD.

    Returns ``(mean, cov, floored)`` where ``floored`` is a boolean array
    over the batch marking quotients that needed the clamp.
    """
    num_mean = np.asarray(num_mean)
    den_mean = np.asarray(den_mean)
    Ld = cholesky(den_cov)
    Bt = np.linalg.solve(Ld, num_cov)
    Bt = hermitize(np.linalg.solve(Ld, _ctrans(Bt)))
    a_w = np.linalg.solve(Ld, num_mean[..., None])[..., 0]
    c_w = np.linalg.solve(Ld, den_mean[..., None])[..., 0]
    beta, U = np.linalg.eigh(Bt)
    beta = np.maximum(beta, 0.0)
    a = np.einsum("...ji,...j->...i", U.conj(), a_w)
    c = np.einsum("...ji,...j->...i", U.conj(), c_w)
    gap = 1.0 - beta
    clamp = gap < floor * beta
    safe_gap = np.where(clamp, 1.0, gap)
    var = np.where(clamp, 1.0 / floor, beta / safe_gap)
    safe_beta = np.where(beta > 0, beta, 1.0)
    mean_e = np.where(
        clamp,
        (a / safe_beta - c) / floor,
        (a - beta * c) / safe_gap,
    )
    LU = Ld @ U
    mean = np.einsum("...ij,...j->...i", LU, mean_e)
    cov = hermitize((LU * var[..., None, :]) @ _ctrans(LU))
    return mean, cov, np.any(clamp, axis=-1)


def gaussian_ratio(numerator, denominator, floor=RATIO_FLOOR):
    """EP division of two Gaussians: precision(num) - precision(den).

    Dividing by a vacuous density returns the numerator; dividing a
    density by itself returns the vacuous density.  Directions where the
    quotient precision would be negative are clamped to ``floor`` times
    the denominator precision (see `ratio_blocks`).
    """
    if isinstance(numerator, ScalarGaussian):
        return _scalar_ratio(numerator, denominator, floor)
    if denominator.is_vacuous or numerator.is_vacuous:
        return numerator
    # exact self-cancellation has zero precision in every direction
    Ld = cholesky(denominator.cov)
    Bt = np.linalg.solve(Ld, numerator.cov)
    Bt = hermitize(np.linalg.solve(Ld, Bt.conj().T))
    beta = np.linalg.eigvalsh(Bt)
    if np.all(np.abs(1.0 - beta) <= _ZERO_PRECISION_TOL):
        return GaussianStats.vacuous(numerator.dim)
    mean, cov, _ = ratio_blocks(
        numerator.mean, numerator.cov, denominator.mean, denominator.cov, floor
    )
    return GaussianStats(mean, cov)


def project_blockdiag(mean, cov, block_size):
    """Moment-match a Gaussian onto the block-diagonal family.

    Keeps the mean and the ``(t, t)`` diagonal blocks of size
    ``block_size``; all cross-block covariance is dropped.
    """
    mean = np.asarray(mean, dtype=complex).reshape(-1)
    cov = np.asarray(cov, dtype=complex)
    n = mean.size
    if n % block_size or cov.shape != (n, n):
        raise ContractViolation("covariance does not split into equal blocks")
    T = n // block_size
    blocks = np.stack(
        [cov[t * block_size:(t + 1) * block_size, t * block_size:(t + 1) * block_size]
         for t in range(T)]
    ) if T else np.zeros((0, block_size, block_size), dtype=complex)
    return BlockDiagGaussianStats(mean, blocks)


# ---------------------------------------------------------------------------
# batched kernels used by the inference loops
# ---------------------------------------------------------------------------


def posterior_cov_form(obs_mean, obs_cov, prior_mean, prior_cov):
    """Batched ``CN(obs | x, obs_cov) CN(x | prior)`` posterior, identity map.

    Gain form; ``prior_cov`` may be singular (including zero).
    """
    S = hermitize(obs_cov + prior_cov)
    # K = prior_cov S^-1  ->  K^H = S^-1 prior_cov
    KH = solve_psd(S, prior_cov)
    K = _ctrans(KH)
    resid = obs_mean - prior_mean
    mean = prior_mean + np.einsum("...ij,...j->...i", K, resid)
    cov = hermitize(prior_cov - K @ prior_cov)
    return mean, cov


def combine_cov_info(mean, cov, prec, info):
    """Product of ``CN(mean, cov)`` with a Gaussian given in information form.

    The second factor is ``exp(-x^H prec x + 2 Re(x^H info))``; a zero
    ``prec`` is a flat factor.  ``cov`` may be singular.  Returns the
    normalised ``(mean, cov)``.
    """
    d = cov.shape[-1]
    M = np.eye(d) + cov @ prec
    new_cov = hermitize(np.linalg.solve(M, cov))
    rhs = mean + np.einsum("...ij,...j->...i", cov, info)
    new_mean = np.linalg.solve(M, rhs[..., None])[..., 0]
    return new_mean, new_cov
