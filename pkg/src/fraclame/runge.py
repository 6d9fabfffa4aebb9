"""Constructive Runge approximation: exterior controls whose solutions approximate
a target field on omega in a discrete H^1 norm.

The control space is a finite dictionary of bump atoms placed in an exterior
region.  Responses (the solutions generated by single atoms) are computed once
per parameter set and may be cached on disk.  Coefficients come from
Tikhonov-regularized least squares, solved through an SVD of the feature matrix.
"""
from __future__ import annotations

import hashlib
import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .forms import LameParameters
from .fractional import FracContext, difference_gradient
from .grid import BoxGrid, GeometryError, NodePartition, scalar_bump
from .solvers import DirectSolver, SolverError, _linear_solve

log = logging.getLogger(__name__)

CACHE_MAGIC = b"FRLRESP1"
_HEADER = struct.Struct("<8s64sIdddQQ")  # magic, hash, N, L, s, reserved, M, row length


@dataclass(frozen=True)
class ControlDictionary:
    """Bump atoms ``bump(center_k) * e_d`` indexed by ``a = 3 k + d``."""

    grid: BoxGrid
    centers: np.ndarray
    radius: float
    support: np.ndarray = field(repr=False)

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=float).reshape(-1, 3)
        object.__setattr__(self, "centers", c)
        if not self.radius > 0:
            raise ValueError("atom radius must be positive")

    @property
    def size(self) -> int:
        return 3 * len(self.centers)

    def profile(self, k: int) -> np.ndarray:
        return scalar_bump(self.grid, self.centers[k], self.radius)

    def atoms(self, start: int = 0, stop: int | None = None) -> np.ndarray:
        stop = self.size if stop is None else min(stop, self.size)
        out = np.zeros((max(stop - start, 0), 3) + self.grid.shape)
        cache: dict = {}
        for i, a in enumerate(range(start, stop)):
            k, d = divmod(a, 3)
            if k not in cache:
                cache[k] = self.profile(k)
            out[i, d] = cache[k]
        return out

    def combine(self, coeffs: np.ndarray) -> np.ndarray:
        """Exterior control field ``sum_a c_a g_a``."""
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.shape != (self.size,):
            raise ValueError(f"expected {self.size} coefficients, got {coeffs.shape}")
        out = np.zeros((3,) + self.grid.shape)
        for k in range(len(self.centers)):
            c = coeffs[3 * k:3 * k + 3]
            if np.any(c):
                out += c[:, None, None, None] * self.profile(k)
        return out

    def profiles(self) -> np.ndarray:
        """Scalar bump profiles, shape (K, N^3)."""
        cached = self.__dict__.get("_profiles")
        if cached is None:
            cached = np.array([self.profile(k).ravel() for k in range(len(self.centers))]).reshape(
                len(self.centers), -1)
            object.__setattr__(self, "_profiles", cached)
        return cached

    def project(self, fields: np.ndarray) -> np.ndarray:
        """``h^3 sum_x F(x) . g_a(x)`` for every atom; batch axes of ``fields`` kept in front."""
        f = np.asarray(fields)
        lead = f.shape[:-4]
        flat = f.reshape(lead + (3, -1))
        out = np.einsum("...dn,kn->...kd", flat, self.profiles())
        return self.grid.cell_volume * out.reshape(lead + (-1,))

    def fingerprint(self) -> bytes:
        return (np.ascontiguousarray(self.centers).tobytes() + struct.pack("<d", self.radius)
                + np.packbits(self.support).tobytes())

    def to_dict(self) -> dict:
        return {"size": self.size, "radius": self.radius, "centers": self.centers.tolist()}


def _validate_dictionary(d: ControlDictionary):
    if d.size == 0:
        return
    profiles = np.array([d.profile(k) for k in range(len(d.centers))])
    if np.any(profiles[:, ~d.support] != 0):
        raise GeometryError("dictionary atom leaves its exterior support region")
    used = np.any(profiles != 0, axis=0)
    P = profiles[:, used]
    if np.linalg.matrix_rank(P) < len(d.centers):
        raise GeometryError("dictionary atoms are linearly dependent")


def farthest_point_order(points: np.ndarray) -> np.ndarray:
    """Greedy farthest-point ordering starting from the first point; prefixes are nested
    and spread out, which makes them good dictionaries of increasing size."""
    n = len(points)
    order = np.zeros(n, dtype=int)
    if n == 0:
        return order
    dist = np.sum((points - points[0]) ** 2, axis=1)
    for i in range(1, n):
        order[i] = int(np.argmax(dist))
        dist = np.minimum(dist, np.sum((points - points[order[i]]) ** 2, axis=1))
    return order


def build_dictionary(grid: BoxGrid, support: np.ndarray, radius: float | None = None,
                     stride: int = 1, centers: np.ndarray | None = None,
                     count: int | None = None) -> ControlDictionary:
    """Atoms centred on support nodes (every ``stride``-th index per axis) whose bump
    stays inside ``support``; explicit ``centers`` override the node sweep.

    ``count`` keeps the first centers of a farthest-point ordering, so smaller
    dictionaries are subsets of larger ones.
    """
    support = np.asarray(support, dtype=bool)
    radius = grid.h if radius is None else float(radius)
    if centers is None:
        x = grid.coordinates()
        idx = np.argwhere(support)
        idx = idx[np.all(idx % stride == 0, axis=1)]
        chosen = []
        for i, j, k in idx:
            q = x[:, i, j, k]
            try:
                b = scalar_bump(grid, q, radius)
            except GeometryError:
                continue
            if np.all(support[b != 0]):
                chosen.append(q)
        centers = np.array(chosen).reshape(-1, 3)
    if count is not None:
        if count > len(centers):
            raise GeometryError(f"support holds only {len(centers)} admissible centers, {count} requested")
        centers = np.asarray(centers)[np.sort(farthest_point_order(np.asarray(centers))[:count])]
    d = ControlDictionary(grid, np.asarray(centers, dtype=float), radius, support)
    _validate_dictionary(d)
    return d


def response_key(d: ControlDictionary, p: LameParameters, ctx: FracContext, free: np.ndarray) -> str:
    """Content hash of everything a response set depends on."""
    h = hashlib.sha256()
    h.update(struct.pack("<dId", ctx.grid.L, ctx.grid.N, ctx.s))
    h.update(struct.pack("<dd", p.lambda0, p.mu0))
    h.update(np.ascontiguousarray(p.lambda_field, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(p.mu_field, dtype="<f8").tobytes())
    h.update(np.packbits(np.asarray(free, dtype=bool)).tobytes())
    h.update(d.fingerprint())
    return h.hexdigest()


@dataclass
class ResponseSet:
    """Solutions generated by every atom, stored as their values on the free nodes.

    Outside the free set each solution equals its atom, so these values determine
    the full fields.
    """

    dictionary: ControlDictionary
    ctx: FracContext
    free: np.ndarray
    values: np.ndarray  # (M, 3 n_free)
    key: str = ""
    build_time: float = 0.0
    _features: np.ndarray | None = field(default=None, repr=False)
    _svd: tuple | None = field(default=None, repr=False)

    @property
    def size(self) -> int:
        return self.values.shape[0]

    def _extend(self, vals: np.ndarray, base: np.ndarray) -> np.ndarray:
        n = int(self.free.sum())
        base = np.asarray(base, dtype=float)
        out = np.array(np.broadcast_to(base, vals.shape[:-1] + base.shape[-4:]))
        for k in range(3):
            out[..., k, :, :, :][..., self.free] = vals[..., k * n:(k + 1) * n]
        return out

    def fields(self, start: int = 0, stop: int | None = None) -> np.ndarray:
        stop = self.size if stop is None else min(stop, self.size)
        return self._extend(self.values[start:stop], self.dictionary.atoms(start, stop))

    def field(self, coeffs: np.ndarray) -> np.ndarray:
        """Solution for the control ``sum_a c_a g_a``."""
        coeffs = np.asarray(coeffs, dtype=float)
        return self._extend(coeffs @ self.values, self.dictionary.combine(coeffs))

    def control(self, coeffs: np.ndarray) -> np.ndarray:
        return self.dictionary.combine(coeffs)

    def features(self, batch: int = 64) -> np.ndarray:
        """Feature matrix whose columns are the discrete H^1(omega) embeddings of the responses."""
        if self._features is None:
            omega = self.omega
            cols = [h1_features(self.fields(s0, s0 + batch), omega, self.ctx)
                    for s0 in range(0, self.size, batch)]
            n = 12 * int(omega.sum())
            self._features = np.concatenate(cols, axis=0).T if cols else np.zeros((n, 0))
        return self._features

    @property
    def omega(self) -> np.ndarray:
        return self.free

    def svd(self) -> tuple:
        if self._svd is None:
            self._svd = np.linalg.svd(self.features(), full_matrices=False)
        return self._svd

    def condition_number(self) -> float:
        s = self.svd()[1]
        return float(s[0] / s[-1]) if len(s) and s[-1] > 0 else float("inf")

    def save(self, path: str | Path):
        """Binary cache: fixed header then row-major little-endian float64 values."""
        M, row = self.values.shape
        g = self.ctx.grid
        head = _HEADER.pack(CACHE_MAGIC, self.key.encode("ascii").ljust(64, b"0"), g.N, g.L,
                            self.ctx.s, 0.0, M, row)
        with open(path, "wb") as fh:
            fh.write(head)
            fh.write(np.ascontiguousarray(self.values, dtype="<f8").tobytes())


def load_responses(path: str | Path, d: ControlDictionary, ctx: FracContext, free: np.ndarray,
                   key: str) -> ResponseSet | None:
    """Read a cache file; returns None unless the header matches ``key`` and the grid exactly."""
    path = Path(path)
    if not path.exists():
        return None
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        return None
    magic, hkey, N, L, s, _, M, row = _HEADER.unpack_from(raw)
    if magic != CACHE_MAGIC or hkey.decode("ascii") != key or N != ctx.grid.N or L != ctx.grid.L or s != ctx.s:
        return None
    if M != d.size or row != 3 * int(np.sum(free)) or len(raw) != _HEADER.size + 8 * M * row:
        return None
    vals = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).reshape(M, row).astype(float)
    return ResponseSet(d, ctx, np.asarray(free, dtype=bool), vals, key)


def build_response_matrix(d: ControlDictionary, p: LameParameters, ctx: FracContext,
                          partition: NodePartition, solver: DirectSolver | None = None,
                          method: str = "auto", tol: float = 1e-11, batch: int = 64,
                          cache: str | Path | None = None) -> ResponseSet:
    """One exterior solve per atom.

    ``method`` selects a dense factorization ("direct"), batched conjugate
    gradients ("cg"), or the former whenever the free set is small ("auto").
    """
    free = partition.free
    key = response_key(d, p, ctx, free)
    if cache is not None:
        hit = load_responses(cache, d, ctx, free, key)
        if hit is not None:
            log.info("response cache hit %s", cache)
            return hit
    t0 = time.perf_counter()
    n = int(free.sum())
    if method == "auto":
        method = "direct" if 3 * n <= 6000 else "cg"
    if d.size == 0:
        vals = np.zeros((0, 3 * n))
    elif method == "direct":
        solver = solver if solver is not None else DirectSolver(p, ctx, free)
        vals = np.concatenate([solver.exterior_correction(d.atoms(s0, s0 + batch))
                               for s0 in range(0, d.size, batch)])
    elif method == "cg":
        rows = []
        for s0 in range(0, d.size, batch):
            u, _, _ = _linear_solve(d.atoms(s0, s0 + batch), p, ctx, free, tol, 4000)
            rows.append(np.concatenate([u[:, k][:, free] for k in range(3)], axis=1))
        vals = np.concatenate(rows)
    else:
        raise ValueError(f"unknown response method {method!r}")
    if not np.all(np.isfinite(vals)):
        raise SolverError("non-finite atom response")
    rs = ResponseSet(d, ctx, free.copy(), vals, key, time.perf_counter() - t0)
    if cache is not None:
        rs.save(cache)
    return rs


def h1_features(u: np.ndarray, omega: np.ndarray, ctx: FracContext) -> np.ndarray:
    """Flattened ``sqrt(h^3) [u, Du]`` on omega nodes; batch axes are kept in front."""
    u = np.asarray(u, dtype=float)
    lead = u.shape[:-4]
    G = difference_gradient(u, ctx)
    w = np.sqrt(ctx.grid.cell_volume)
    vals = u[..., omega].reshape(lead + (-1,))
    grads = G[..., omega].reshape(lead + (-1,))
    return w * np.concatenate([vals, grads], axis=-1)


def h1_norm(u: np.ndarray, omega: np.ndarray, ctx: FracContext) -> float:
    return float(np.linalg.norm(h1_features(u, omega, ctx)))


@dataclass
class RungeSolution:
    coefficients: np.ndarray
    residual: float
    relative_residual: float
    alpha: float
    objective: float
    gradient_norm: float
    target_norm: float
    condition_number: float

    def to_dict(self) -> dict:
        return {"residual": self.residual, "relative_residual": self.relative_residual,
                "alpha": self.alpha, "objective": self.objective,
                "gradient_norm": self.gradient_norm, "coefficient_norm": float(np.linalg.norm(self.coefficients)),
                "condition_number": self.condition_number}


def runge_approximate(target: np.ndarray, responses: ResponseSet, alpha: float | None = None,
                      alpha_rel: float = 1e-8) -> RungeSolution:
    """Minimize ``|F c - f|^2 + alpha |c|^2`` with F the response features.

    ``alpha`` defaults to ``alpha_rel * sigma_max(F)^2``.  With ``alpha = 0`` the
    responses must have full column rank.
    """
    omega = responses.omega
    target = np.asarray(target, dtype=float)
    if target.shape != (3,) + responses.ctx.grid.shape:
        raise ValueError("target must be a vector field on the grid")
    if np.any(target[:, ~omega] != 0):
        raise GeometryError("Runge target must vanish outside omega")
    f = h1_features(target, omega, responses.ctx)
    fn = float(np.linalg.norm(f))
    M = responses.size
    if M == 0:
        return RungeSolution(np.zeros(0), fn, 1.0 if fn else 0.0, 0.0, fn ** 2, 0.0, fn, float("inf"))
    U, sig, Vt = responses.svd()
    if alpha is None:
        alpha = alpha_rel * float(sig[0]) ** 2
    if alpha < 0:
        raise ValueError("regularization weight must be nonnegative")
    rank = int(np.sum(sig > sig[0] * max(U.shape) * np.finfo(float).eps))
    if alpha == 0 and rank < M:
        raise ValueError(f"responses have rank {rank} < {M}; a positive regularization weight is required")
    coeffs = Vt.T @ ((sig / (sig ** 2 + alpha)) * (U.T @ f))
    # residual from the reconstructed field, independently of the factorization
    u = responses.field(coeffs)
    resid = float(h1_norm(u - target, omega, responses.ctx))
    F = responses.features()
    r = F @ coeffs - f
    grad = 2.0 * (F.T @ r + alpha * coeffs)
    return RungeSolution(coeffs, resid, resid / fn if fn > 0 else 0.0, float(alpha),
                         float(r @ r + alpha * coeffs @ coeffs), float(np.linalg.norm(grad)), fn,
                         responses.condition_number())
