"""Exchangeable Gaussian latent law with O(1) predictive updates.

Each latent dimension d carries a zero-mean Gaussian sequence in which
every element has the same marginal variance v_d and every pair the same
covariance c_d, with 0 < c_d < v_d. Conditioning such a sequence on its
first n elements depends on them only through their count and sum, so the
predictive for the next element is available in constant time:

    mean = c * S / (v + (n - 1) * c)
    var  = v - n * c^2 / (v + (n - 1) * c)

(both valid at n = 0, giving mean 0 and var v). The variance stays
strictly positive because v*(v+(n-1)c) - n*c^2 factors as (v-c)*(v+n*c).

Constraint handling: v = softplus(raw_var) + 1e-4 and
c = v * squash(raw_cov) where squash maps onto the open interval
(eps, 1-eps) with eps = 1e-12. A bare logistic saturates to exactly 0.0
or 1.0 in float64 once |raw_cov| exceeds ~37, which would break the
strict inequalities; the shifted squash keeps them for every real input.
"""

from __future__ import annotations

import math

import numpy as np

from exflow import autodiff as ad
from exflow.autodiff import Parameter, Tensor
from exflow.errors import DataError, DimensionError

VAR_FLOOR = 1e-4
_EDGE = 1e-12
_LOG_2PI = math.log(2.0 * math.pi)

INIT_VAR = 1.0
INIT_COV = 0.1


class LatentParams:
    """Per-dimension (marginal variance, pairwise covariance), stored raw.

    The raw leaves are unconstrained trainable vectors; the constrained
    pair is derived on demand, either as numpy arrays (frozen evaluation)
    or as tape tensors (training).
    """

    def __init__(self, name: str, dim: int):
        raw_v = math.log(math.expm1(INIT_VAR - VAR_FLOOR))
        frac = INIT_COV / INIT_VAR
        raw_c = math.log(frac / (1.0 - frac))
        self.raw_var = Parameter(f"{name}.raw_var", np.full(dim, raw_v))
        self.raw_cov = Parameter(f"{name}.raw_cov", np.full(dim, raw_c))
        self.dim = dim

    @classmethod
    def from_arrays(cls, name: str, raw_var, raw_cov) -> "LatentParams":
        obj = cls.__new__(cls)
        obj.raw_var = Parameter(f"{name}.raw_var", raw_var)
        obj.raw_cov = Parameter(f"{name}.raw_cov", raw_cov)
        if obj.raw_var.shape != obj.raw_cov.shape or obj.raw_var.data.ndim != 1:
            raise DimensionError("latent raw parameter vectors must be 1-D and equal length")
        obj.dim = obj.raw_var.shape[0]
        return obj

    def parameters(self):
        return [self.raw_var, self.raw_cov]

    def values(self):
        """Constrained (var, cov) as numpy vectors."""
        var = _softplus(self.raw_var.data) + VAR_FLOOR
        cov = var * (_EDGE + (1.0 - 2.0 * _EDGE) * _logistic(self.raw_cov.data))
        return var, cov

    def tensors(self):
        """Constrained (var, cov) as tape tensors."""
        var = ad.add_scalar(ad.softplus(self.raw_var), VAR_FLOOR)
        squash = ad.add_scalar(
            ad.mul_scalar(ad.sigmoid(self.raw_cov), 1.0 - 2.0 * _EDGE), _EDGE
        )
        cov = ad.mul(var, squash)
        return var, cov

    def copy(self, name=None) -> "LatentParams":
        return LatentParams.from_arrays(
            name or self.raw_var.name.rsplit(".raw_var", 1)[0],
            self.raw_var.data.copy(),
            self.raw_cov.data.copy(),
        )


def _softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _logistic(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


class LatentState:
    """Sufficient statistics of an absorbed latent prefix: count and sum."""

    __slots__ = ("count", "total")

    def __init__(self, count: int, total: np.ndarray):
        self.count = int(count)
        self.total = np.asarray(total, dtype=np.float64)

    @classmethod
    def empty(cls, dim: int) -> "LatentState":
        return cls(0, np.zeros(dim))

    @property
    def dim(self) -> int:
        return self.total.shape[0]

    def absorb(self, z) -> "LatentState":
        z = np.asarray(z, dtype=np.float64)
        if not np.isfinite(z).all():
            raise DataError("cannot absorb non-finite latent vector")
        if z.shape != self.total.shape:
            raise DimensionError(f"latent vector shape {z.shape} != state dim {self.total.shape}")
        return LatentState(self.count + 1, self.total + z)

    def absorb_batch(self, zs: np.ndarray) -> "LatentState":
        zs = np.asarray(zs, dtype=np.float64)
        if not np.isfinite(zs).all():
            raise DataError("cannot absorb non-finite latent vectors")
        if zs.ndim != 2 or zs.shape[1] != self.dim:
            raise DimensionError(f"latent batch shape {zs.shape} != state dim {self.dim}")
        return LatentState(self.count + zs.shape[0], self.total + zs.sum(axis=0))

    def copy(self) -> "LatentState":
        return LatentState(self.count, self.total.copy())


def predictive(params: LatentParams, state: LatentState):
    """Per-dimension (mean, variance) of the next element given the state."""
    var, cov = params.values()
    n = state.count
    denom = var + (n - 1) * cov
    mean = cov * state.total / denom
    pvar = var - n * cov * cov / denom
    return mean, pvar


def sample_predictive(params: LatentParams, state: LatentState, rng, size=None):
    """Independent draws from the current predictive; the state is not advanced.

    size=None gives one vector, size=k gives a k-row matrix of i.i.d.
    draws from the same fixed predictive.
    """
    mean, pvar = predictive(params, state)
    sd = np.sqrt(pvar)
    if size is None:
        return mean + sd * rng.standard_normal(params.dim)
    return mean + sd * rng.standard_normal((int(size), params.dim))


def sequence_log_density(params: LatentParams, state: LatentState, zs):
    """log p(z_1, ..., z_n | state) with the state threaded through the rows.

    The joint factors into one-step predictives; row i sees the initial
    state plus rows 0..i-1. Accepts a numpy matrix (returns a float) or a
    tape Tensor (returns a scalar Tensor differentiable w.r.t. the raw
    parameters and the rows).
    """
    if isinstance(zs, Tensor):
        return _sequence_ld_tensor(params, state, zs)
    zs = np.asarray(zs, dtype=np.float64)
    if zs.ndim != 2 or zs.shape[1] != params.dim:
        raise DimensionError(f"latent batch shape {zs.shape} != dim {params.dim}")
    var, cov = params.values()
    n = zs.shape[0]
    counts = state.count + np.arange(n, dtype=np.float64)[:, None]
    sums = state.total + np.vstack([np.zeros(params.dim), np.cumsum(zs[:-1], axis=0)])
    denom = var + (counts - 1.0) * cov
    mean = cov * sums / denom
    pvar = var - counts * (cov * cov) / denom
    resid = zs - mean
    ll = -0.5 * (_LOG_2PI + np.log(pvar)) - 0.5 * resid * resid / pvar
    return float(ll.sum())


def _sequence_ld_tensor(params: LatentParams, state: LatentState, zs: Tensor):
    n, dim = zs.shape
    var, cov = params.tensors()
    var_row = ad.reshape(var, (1, dim))
    cov_row = ad.reshape(cov, (1, dim))
    ones_col = Tensor(np.ones((n, 1)))
    counts_col = Tensor((state.count + np.arange(n, dtype=np.float64))[:, None])
    cm1_col = Tensor((state.count + np.arange(n, dtype=np.float64) - 1.0)[:, None])
    base_row = Tensor(state.total[None, :])

    var_mat = ad.matmul(ones_col, var_row)
    cov_mat = ad.matmul(ones_col, cov_row)
    denom = ad.add(var_mat, ad.matmul(cm1_col, cov_row))
    sums = ad.add(ad.matmul(ones_col, base_row), ad.prevsum_rows(zs))
    mean = ad.div(ad.mul(cov_mat, sums), denom)
    cov_sq_row = ad.mul(cov_row, cov_row)
    pvar = ad.sub(var_mat, ad.div(ad.matmul(counts_col, cov_sq_row), denom))
    resid = ad.sub(zs, mean)
    quad = ad.div(ad.mul(resid, resid), pvar)
    ll = ad.mul_scalar(ad.add(ad.add_scalar(ad.log(pvar), _LOG_2PI), quad), -0.5)
    return ad.sum_all(ll)


def conditional_log_density(params: LatentParams, state: LatentState, zs):
    """Per-row log p(z_i | state) at a FIXED state (rows not threaded).

    Used when many candidates are scored against the same conditioning
    history: label scoring and generative-replay targets. Numpy in gives a
    numpy vector; a tape Tensor in gives a per-row Tensor of shape [n].
    """
    if isinstance(zs, Tensor):
        return _conditional_ld_tensor(params, state, zs)
    zs = np.asarray(zs, dtype=np.float64)
    mean, pvar = predictive(params, state)
    resid = zs - mean
    ll = -0.5 * (_LOG_2PI + np.log(pvar)) - 0.5 * resid * resid / pvar
    return ll.sum(axis=1)


def _conditional_ld_tensor(params: LatentParams, state: LatentState, zs: Tensor):
    n, dim = zs.shape
    var, cov = params.tensors()
    nobs = float(state.count)
    denom = ad.add(var, ad.mul_scalar(cov, nobs - 1.0))
    mean = ad.div(ad.mul(cov, Tensor(state.total)), denom)
    pvar = ad.sub(var, ad.div(ad.mul_scalar(ad.mul(cov, cov), nobs), denom))
    ones_col = Tensor(np.ones((n, 1)))
    mean_mat = ad.matmul(ones_col, ad.reshape(mean, (1, dim)))
    pvar_mat = ad.matmul(ones_col, ad.reshape(pvar, (1, dim)))
    resid = ad.sub(zs, mean_mat)
    quad = ad.div(ad.mul(resid, resid), pvar_mat)
    ll = ad.mul_scalar(ad.add(ad.add_scalar(ad.log(pvar_mat), _LOG_2PI), quad), -0.5)
    return ad.sum_rows(ll)
