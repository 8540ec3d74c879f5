"""Proxy precision matrix, fixed-design projection, and proxy diagnostics.

The precision of the stacked response under the mixed model is
``(I + Z M_all Z')^{-1}`` for a per-subject prior scale matrix ``M``.
Because ``Z`` is block diagonal this inverse factors by subject, so the
whitening transform costs one small Cholesky solve per subject and the
full matrix is never formed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .base import DimensionError, FactorizationError
from .data import LongitudinalDataset

PROXY_KINDS = ("logn", "true-g", "custom")


@dataclass(frozen=True)
class ProxyConfig:
    """Recipe for the per-subject prior scale matrix M.

    kind "logn" expands to ``log(n) * I`` at build time (the default,
    which ignores correlations between random effects), "true-g" uses
    ``matrix / sigma2``, and "custom" uses ``matrix`` as given.
    """

    kind: str = "logn"
    matrix: np.ndarray | None = None
    sigma2: float | None = None

    def __post_init__(self):
        kind = self.kind.lower()
        object.__setattr__(self, "kind", kind)
        if kind not in PROXY_KINDS:
            raise ValueError(f"unknown proxy kind {self.kind!r}; use one of {PROXY_KINDS}")
        if self.matrix is not None:
            m = np.atleast_2d(np.asarray(self.matrix, dtype=float))
            if m.shape[0] != m.shape[1] or not np.allclose(m, m.T, atol=1e-12):
                raise ValueError("proxy matrix must be square symmetric")
            object.__setattr__(self, "matrix", m)
        if kind == "true-g":
            if self.matrix is None:
                raise ValueError("true-g proxy requires the covariance matrix")
            if self.sigma2 is None or self.sigma2 <= 0:
                raise ValueError("true-g proxy requires sigma2 > 0")
        if kind == "custom" and self.matrix is None:
            raise ValueError("custom proxy requires a matrix")

    def materialize(self, q: int, n_total: int) -> np.ndarray:
        """The q x q matrix M for a model with n_total stacked rows."""
        if self.kind == "logn":
            return np.log(n_total) * np.eye(q)
        m = self.matrix
        if m.shape[0] != q:
            raise DimensionError(f"proxy matrix is {m.shape[0]}x{m.shape[0]}, expected {q}x{q}")
        return m / self.sigma2 if self.kind == "true-g" else m.copy()

    def restrict(self, idx) -> "ProxyConfig":
        """Proxy for a model keeping only the random-effect columns in idx."""
        if self.kind == "logn":
            return self
        idx = list(idx)
        sub = self.matrix[np.ix_(idx, idx)]
        return ProxyConfig(self.kind, sub, self.sigma2)


@dataclass(frozen=True)
class ProxyPrecision:
    """Per-subject Cholesky factors L_i with L_i L_i' = I + Z_i M Z_i'."""

    factors: tuple[np.ndarray, ...]
    m_matrix: np.ndarray
    n_obs: tuple[int, ...] = field(default=(), compare=False)

    def __post_init__(self):
        object.__setattr__(self, "factors", tuple(self.factors))
        object.__setattr__(self, "n_obs", tuple(f.shape[0] for f in self.factors))

    @property
    def n_total(self) -> int:
        return sum(self.n_obs)

    def whiten(self, r: np.ndarray) -> np.ndarray:
        """Apply L^{-1} block-wise to a stacked vector or matrix.

        The result satisfies ``whiten(r).T @ whiten(s) = r.T P s`` where P
        is the proxy precision.
        """
        r = np.asarray(r, dtype=float)
        vec = r.ndim == 1
        if r.shape[0] != self.n_total:
            raise DimensionError(f"input has {r.shape[0]} rows, expected {self.n_total}")
        out = np.empty_like(r, dtype=float)
        pos = 0
        for L in self.factors:
            ni = L.shape[0]
            seg = r[pos:pos + ni]
            out[pos:pos + ni] = scipy.linalg.solve_triangular(L, seg, lower=True)
            pos += ni
        return out if not vec else out.ravel()

    def quad_form(self, r: np.ndarray) -> float:
        """r' P r via the whitened representation."""
        w = self.whiten(r)
        return float(w @ w)

    def dense(self) -> np.ndarray:
        """Materialize the full precision (tests and diagnostics only)."""
        blocks = []
        for L in self.factors:
            inv = scipy.linalg.solve_triangular(L, np.eye(L.shape[0]), lower=True)
            blocks.append(inv.T @ inv)
        return scipy.linalg.block_diag(*blocks)


def build_proxy(ds: LongitudinalDataset, cfg: ProxyConfig) -> ProxyPrecision:
    """Factor I + Z_i M Z_i' per subject for the configured proxy."""
    M = cfg.materialize(ds.n_random, ds.n_total)
    factors = []
    for i, blk in enumerate(ds.subjects):
        A = np.eye(blk.n_obs)
        if blk.Z.shape[1]:
            A = A + blk.Z @ M @ blk.Z.T
            A = 0.5 * (A + A.T)
        try:
            factors.append(np.linalg.cholesky(A))
        except np.linalg.LinAlgError as exc:
            raise FactorizationError(
                f"I + Z M Z' is not positive definite for subject {i}; "
                "check the proxy matrix"
            ) from exc
    return ProxyPrecision(tuple(factors), M)


def whiten_residual(proxy: ProxyPrecision, r: np.ndarray) -> np.ndarray:
    """Whitened residual; the squared norm equals the precision quadratic form."""
    return proxy.whiten(r)


@dataclass(frozen=True)
class FixedProjection:
    """Projector onto the orthogonal complement of a design's column space.

    Held as a thin orthonormal basis Q; applying the projector is
    ``v - Q (Q' v)`` so the n x n matrix is never formed.
    """

    basis: np.ndarray
    n_rows: int

    @property
    def rank(self) -> int:
        return self.basis.shape[1]

    def apply(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if v.shape[0] != self.n_rows:
            raise DimensionError(f"input has {v.shape[0]} rows, expected {self.n_rows}")
        if self.rank == 0:
            return v.copy()
        return v - self.basis @ (self.basis.T @ v)

    def quad_form(self, r: np.ndarray) -> float:
        """r' P r computed as the squared norm of the projected vector."""
        pr = self.apply(r)
        return float(pr @ pr)

    def dense(self) -> np.ndarray:
        return np.eye(self.n_rows) - self.basis @ self.basis.T


def build_projection(X: np.ndarray, rcond: float = 1e-10) -> FixedProjection:
    """Thin orthonormal basis of col(X) with a relative singular-value cutoff."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n, d = X.shape
    if d >= n and d > 0:
        raise DimensionError(
            f"projection needs fewer columns than rows (got {d} >= {n}); "
            "screen the fixed effects first via the iterative pipeline"
        )
    if d == 0:
        return FixedProjection(np.zeros((n, 0)), n)
    U, s, _ = np.linalg.svd(X, full_matrices=False)
    keep = s > rcond * (s[0] if s.size else 0.0)
    return FixedProjection(U[:, keep], n)


def verify_precision_identity(ds: LongitudinalDataset, G: np.ndarray, sigma2: float) -> float:
    """Max-norm gap between the two algebraic forms of the profile precision.

    Evaluates, densely and at test scale only, the residual-plus-prior
    form against ``(I + Z G_all Z' / sigma2)^{-1}`` and returns the largest
    absolute entry of their difference.
    """
    G = np.atleast_2d(np.asarray(G, dtype=float))
    q, N = ds.n_random, ds.n_subjects
    if G.shape != (q, q):
        raise DimensionError(f"G must be {q}x{q}")
    Z = ds.z_blocks().dense()
    n = ds.n_total
    G_all = scipy.linalg.block_diag(*([G] * N))
    try:
        G_all_inv = np.linalg.inv(G_all)
    except np.linalg.LinAlgError as exc:
        raise FactorizationError("random-effect covariance is singular") from exc
    B = np.linalg.solve(Z.T @ Z + sigma2 * G_all_inv, Z.T)
    resid = np.eye(n) - Z @ B
    lhs = resid.T @ resid + sigma2 * (B.T @ G_all_inv @ B)
    rhs = np.linalg.inv(np.eye(n) + Z @ G_all @ Z.T / sigma2)
    return float(np.max(np.abs(lhs - rhs)))


@dataclass(frozen=True)
class ProxyDiagnostics:
    """Spectral gaps between proxy-based and reference-based curvature.

    All discrepancies are zero when the proxy equals the reference
    ``G / sigma2`` exactly.  The eigenvalue gaps report how far the proxy
    is from dominating (or being dominated by) the reference on each side;
    nonnegative gaps correspond to the domination flags.
    """

    fixed_whitened_gap: float
    fixed_gram_gap: float
    random_restricted_gap: float
    min_eig_proxy_minus_ref: float
    min_eig_logn_ref_minus_proxy: float

    @property
    def proxy_dominates_ref(self) -> bool:
        return self.min_eig_proxy_minus_ref >= -1e-10

    @property
    def logn_ref_dominates_proxy(self) -> bool:
        return self.min_eig_logn_ref_minus_proxy >= -1e-10


def _sym_inv_sqrt(A: np.ndarray, label: str) -> np.ndarray:
    w, V = np.linalg.eigh(0.5 * (A + A.T))
    if np.min(w) <= 0:
        raise FactorizationError(f"{label} is singular or indefinite")
    return V @ np.diag(1.0 / np.sqrt(w)) @ V.T


def proxy_diagnostics(
    ds: LongitudinalDataset,
    cfg: ProxyConfig,
    reference_G: np.ndarray,
    sigma2: float,
    active_fixed=None,
    active_random=None,
) -> ProxyDiagnostics:
    """Compare the configured proxy against a reference covariance.

    ``active_fixed`` indexes the fixed columns spanning the projection;
    ``active_random`` indexes the random effects entering the restricted
    gap.  Dense eigen-decompositions throughout: diagnostic scale only.
    """
    q, N, n = ds.n_random, ds.n_subjects, ds.n_total
    G = np.atleast_2d(np.asarray(reference_G, dtype=float))
    if G.shape != (q, q):
        raise DimensionError(f"reference covariance must be {q}x{q}")
    af = list(range(ds.n_fixed)) if active_fixed is None else sorted(active_fixed)
    ar = list(range(q)) if active_random is None else sorted(active_random)
    if not ar:
        raise DimensionError("active random set must be nonempty for restricted diagnostics")

    M = cfg.materialize(q, n)
    X1 = ds.stacked_X()[:, af]
    proj = build_projection(X1) if af else FixedProjection(np.zeros((n, 0)), n)
    Z = ds.z_blocks().dense()
    PZ = proj.apply(Z)
    ZtPZ = Z.T @ PZ
    ZtZ = Z.T @ Z

    G_all_inv = scipy.linalg.block_diag(*([np.linalg.inv(G)] * N)) * sigma2
    M_all_inv = scipy.linalg.block_diag(*([np.linalg.inv(M)] * N))

    T_ref = G_all_inv + ZtPZ
    T_proxy = M_all_inv + ZtPZ
    E_ref = G_all_inv + ZtZ
    E_proxy = M_all_inv + ZtZ

    Ti = _sym_inv_sqrt(T_ref, "reference projected curvature")
    Ei = _sym_inv_sqrt(E_ref, "reference Gram curvature")
    gap_T = float(np.linalg.norm(Ti @ T_proxy @ Ti - np.eye(N * q), 2))
    gap_E = float(np.linalg.norm(Ei @ E_proxy @ Ei - np.eye(N * q), 2))

    # restricted (selected random effects) comparison, submatrix-inverse prior
    idx = [i * q + k for i in range(N) for k in ar]
    Zr = Z[:, idx]
    ZtPZr = Zr.T @ proj.apply(Zr)
    Gr = G[np.ix_(ar, ar)]
    Mr = M[np.ix_(ar, ar)]
    T11_ref = scipy.linalg.block_diag(*([np.linalg.inv(Gr)] * N)) * sigma2 + ZtPZr
    T11_proxy = scipy.linalg.block_diag(*([np.linalg.inv(Mr)] * N)) + ZtPZr
    try:
        gap_11 = float(np.linalg.norm(T11_ref @ np.linalg.inv(T11_proxy) - np.eye(len(idx)), 2))
    except np.linalg.LinAlgError as exc:
        raise FactorizationError("restricted proxy curvature is singular") from exc

    ref_scaled = G / sigma2
    eig_lo = float(np.min(np.linalg.eigvalsh(M - ref_scaled)))
    eig_hi = float(np.min(np.linalg.eigvalsh(np.log(n) * ref_scaled - M)))
    return ProxyDiagnostics(
        fixed_whitened_gap=gap_T,
        fixed_gram_gap=gap_E,
        random_restricted_gap=gap_11,
        min_eig_proxy_minus_ref=eig_lo,
        min_eig_logn_ref_minus_proxy=eig_hi,
    )
