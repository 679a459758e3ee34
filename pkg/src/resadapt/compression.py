"""Low-rank adapter compression: per-domain truncated SVD and the joint cross-domain factorization.

For ``T`` domains sharing an adapted layer, the adapters are stacked side by side
into ``M = [alpha_1 ... alpha_T]`` (shape ``C_in x T*C_out``).  Keeping the top
``K`` singular triplets gives ``beta = U_K diag(s_K)`` shared by all domains and
``gamma_t`` = the ``t``-th ``C_out x K`` row block of ``V_K``, so that
``alpha_t ~= beta @ gamma_t.T``.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import ConfigError, NumericError

MAX_SWEEPS = 100
OFF_TOL = 1e-12


@dataclass
class SvdResult:
    U: np.ndarray
    s: np.ndarray
    V: np.ndarray
    sweeps: int = 0

    def reconstruct(self, k: int | None = None) -> np.ndarray:
        k = len(self.s) if k is None else k
        return (self.U[:, :k] * self.s[:k]) @ self.V[:, :k].T


def _round_robin(n: int):
    """Yield ``n - 1`` rounds (``n`` even) of disjoint index pairs covering every pair once."""
    idx = list(range(n))
    for _ in range(n - 1):
        p = np.array(idx[: n // 2])
        q = np.array(idx[n // 2:][::-1])
        yield np.minimum(p, q), np.maximum(p, q)
        idx = [idx[0]] + [idx[-1]] + idx[1:-1]


def _complete_basis(U: np.ndarray, good: np.ndarray) -> np.ndarray:
    """Replace columns flagged ``~good`` with unit vectors orthogonal to the rest."""
    U = U.copy()
    m = U.shape[0]
    basis = [U[:, j] for j in np.flatnonzero(good)]
    cand = iter(np.eye(m))
    for j in np.flatnonzero(~good):
        while True:
            v = next(cand).astype(U.dtype)
            for b in basis:
                v = v - (b @ v) * b
            for b in basis:  # second pass for numerical orthogonality
                v = v - (b @ v) * b
            nv = np.linalg.norm(v)
            if nv > 1e-8:
                break
        v /= nv
        U[:, j] = v
        basis.append(v)
    return U


def _jacobi_tall(A: np.ndarray, max_sweeps: int, tol: float):
    m, n = A.shape
    A = A.copy()
    V = np.eye(n, dtype=A.dtype)
    npad = n + (n % 2)
    if npad != n:
        A = np.hstack([A, np.zeros((m, 1), A.dtype)])
        V = np.pad(V, ((0, 1), (0, 1)))
    off = np.inf
    for sweep in range(1, max_sweeps + 1):
        off = 0.0
        for p, q in _round_robin(npad):
            ap, aq = A[:, p], A[:, q]
            a = np.einsum("ij,ij->j", ap, ap)
            b = np.einsum("ij,ij->j", aq, aq)
            g = np.einsum("ij,ij->j", ap, aq)
            denom = np.sqrt(a * b)
            with np.errstate(divide="ignore", invalid="ignore"):
                rel = np.where(denom > 0, np.abs(g) / denom, 0.0)
            off = max(off, float(rel.max(initial=0.0)))
            act = rel > tol
            if not act.any():
                continue
            p, q, a, b, g = p[act], q[act], a[act], b[act], g[act]
            zeta = (b - a) / (2.0 * g)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            ap, aq = A[:, p], A[:, q]
            A[:, p], A[:, q] = c * ap - s * aq, s * ap + c * aq
            vp, vq = V[:, p], V[:, q]
            V[:, p], V[:, q] = c * vp - s * vq, s * vp + c * vq
        if off <= tol:
            return A[:, :n], V[:n, :n], sweep
    raise NumericError(f"Jacobi SVD did not converge in {max_sweeps} sweeps "
                       f"(max relative off-diagonal {off:.3e}, shape {A.shape})")


def svd(M: np.ndarray, max_sweeps: int = MAX_SWEEPS, tol: float = OFF_TOL) -> SvdResult:
    """Thin SVD ``M = U diag(s) V.T`` by one-sided Jacobi rotations.

    Singular values are non-increasing and each column of ``U`` has its
    largest-magnitude entry positive.
    """
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2:
        raise ConfigError(f"svd expects a matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise NumericError("svd input contains non-finite entries")
    wide = M.shape[0] < M.shape[1]
    A = M.T if wide else M
    B, W, sweeps = _jacobi_tall(A, max_sweeps, tol)
    s = np.linalg.norm(B, axis=0)
    order = np.argsort(-s, kind="stable")
    s, B, W = s[order], B[:, order], W[:, order]
    good = s > max(s[0] if s.size else 0.0, 1e-300) * 1e-14 * max(A.shape)
    Ul = np.zeros_like(B)
    Ul[:, good] = B[:, good] / s[good]
    if not good.all():
        s = np.where(good, s, 0.0)
        Ul = _complete_basis(Ul, good)
    # Ul spans columns of A; W are A's right vectors
    U, V = (W, Ul) if wide else (Ul, W)
    lead = np.argmax(np.abs(U), axis=0)
    sign = np.where(U[lead, np.arange(U.shape[1])] < 0, -1.0, 1.0)
    return SvdResult(U * sign, s, V * sign, sweeps)


def lowrank_single(alpha: np.ndarray, K: int):
    """Best rank-``K`` Frobenius approximation ``alpha ~= beta @ gamma.T``."""
    C = min(alpha.shape)
    if not 1 <= K <= C:
        raise ConfigError(f"rank must lie in [1, {C}], got {K}")
    r = svd(alpha)
    return r.U[:, :K] * r.s[:K], r.V[:, :K].copy()


def single_param_fraction(C: int, K: int) -> Fraction:
    return Fraction(2 * K * C, C * C)


@dataclass
class JointFactorization:
    beta: np.ndarray
    gammas: list
    K: int
    singular_values: np.ndarray | None = None

    @property
    def T(self) -> int:
        return len(self.gammas)

    def reconstruct(self, t: int) -> np.ndarray:
        if not 0 <= t < self.T:
            raise ConfigError(f"domain index {t} out of range for {self.T} domains")
        return self.beta @ self.gammas[t].T

    def stored_elements(self) -> int:
        return int(self.beta.size + sum(g.size for g in self.gammas))


def stack_adapters(alphas) -> np.ndarray:
    alphas = [np.asarray(a, dtype=np.float64) for a in alphas]
    if not alphas:
        raise ConfigError("need at least one adapter to factorize")
    shape = alphas[0].shape
    if any(a.shape != shape for a in alphas):
        raise ConfigError(f"adapters must share a shape, got {[a.shape for a in alphas]}")
    return np.hstack(alphas)


def joint_factorize(alphas, K: int) -> JointFactorization:
    M = stack_adapters(alphas)
    cin, cout = np.shape(alphas[0])
    if not 1 <= K <= min(M.shape):
        raise ConfigError(f"rank must lie in [1, {min(M.shape)}], got {K}")
    r = svd(M)
    beta = r.U[:, :K] * r.s[:K]
    V = r.V[:, :K]
    gammas = [V[t * cout:(t + 1) * cout].copy() for t in range(len(alphas))]
    return JointFactorization(beta, gammas, K, r.s)


def compression_ratio(T: int, C: int, K: int):
    """``(T C K + C K) / (T C^2)`` and its large-``T`` limit ``K / C``."""
    if min(T, C, K) < 1:
        raise ConfigError("T, C and K must be positive integers")
    return Fraction(T * C * K + C * K, T * C * C), Fraction(K, C)


def half_rank(cin: int, cout: int) -> int:
    return max(1, min(cin, cout) // 2)


def compress_network(net, domains, rank="half") -> dict:
    """Jointly factorize every adapted layer shared by ``domains`` in place.

    Each layer gets its own ``shared/layer/<i>/beta``; each domain's
    ``alpha`` is replaced by ``gamma``.  ``rank`` is an int, ``"half"`` or
    ``"full"`` (the last two are per layer).  Returns ``{layer index: JointFactorization}``.
    """
    domains = [str(d) for d in domains]
    placements = [net.domains[d].placement for d in domains]
    if None in placements:
        raise ConfigError("every domain to compress needs adapters")
    # dropout and series BN do not change which matrices exist or their shapes
    layouts = {(tuple(l.index for l in net.adapted_layers(p)), p.topology) for p in placements}
    if len(layouts) != 1:
        raise ConfigError("domains must share adapted layers and topology to be compressed jointly")
    facts = {}
    for layer in net.adapted_layers(placements[0]):
        i = layer.index
        names = [f"domain/{d}/layer/{i}/alpha" for d in domains]
        missing = [n for n in names if n not in net.params]
        if missing:
            raise ConfigError(f"missing uncompressed adapters: {missing}")
        alphas = [net.params[n] for n in names]
        if rank == "half":
            K = half_rank(*alphas[0].shape)
        elif rank == "full":
            K = min(alphas[0].shape)
        else:
            K = int(rank)
        fact = joint_factorize(alphas, K)
        dtype = alphas[0].dtype
        net.params[f"shared/layer/{i}/beta"] = fact.beta.astype(dtype)
        for d, n, g in zip(domains, names, fact.gammas):
            del net.params[n]
            net.params[f"domain/{d}/layer/{i}/gamma"] = g.astype(dtype)
        facts[i] = fact
    return facts
