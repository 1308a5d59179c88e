"""Norm and seminorm specifications on R^n.

Every spec is immutable after construction and evaluates in batch:
``eval`` accepts a single point ``(n,)`` or a sample block ``(N, n)``.
``subgradient`` returns a deterministic member of the subdifferential
(lowest stored index wins ties, plus sign preferred at zero).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "NormError",
    "DimensionMismatch",
    "UndefinedGradient",
    "FunctionalSet",
    "NormSpec",
    "LpNorm",
    "SupNorm",
    "WeightedSup",
    "PolytopeNorm",
    "DirectSumSup",
    "LinearImage",
    "evaluate",
    "subgradient",
    "signed_sup",
    "unc_constant_lower",
    "lift_map",
    "lip_exact",
    "spec_to_dict",
    "spec_from_dict",
    "spec_to_json",
    "spec_from_json",
]


class NormError(ValueError):
    """Invalid norm specification or argument."""


class DimensionMismatch(NormError):
    """Input vector length does not match the spec dimension."""


class UndefinedGradient(NormError):
    """Subgradient requested where none is defined (the origin)."""


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class FunctionalSet:
    """Finite symmetric set of linear functionals, one row per +/- pair.

    Evaluation always runs over both signs, so storing one representative
    per pair halves memory without losing symmetry.
    """

    vectors: np.ndarray
    symmetric: bool = True

    def __post_init__(self):
        v = np.atleast_2d(np.asarray(self.vectors, dtype=float))
        if v.ndim != 2 or v.shape[0] == 0:
            raise NormError("functional set needs a nonempty (m, n) array")
        if not np.all(np.isfinite(v)):
            raise NormError("functional set entries must be finite")
        if np.any(np.all(v == 0.0, axis=1)):
            raise NormError("zero functional not allowed")
        object.__setattr__(self, "vectors", _freeze(v))

    @property
    def count(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def max_l1(self) -> float:
        return float(np.abs(self.vectors).sum(axis=1).max())

    def to_dict(self) -> dict:
        return {
            "vectors": self.vectors.tolist(),
            "symmetric": bool(self.symmetric),
        }

    @staticmethod
    def from_dict(d: dict) -> "FunctionalSet":
        _check_keys(d, {"vectors", "symmetric"}, {"vectors"})
        return FunctionalSet(np.asarray(d["vectors"], dtype=float),
                             symmetric=bool(d.get("symmetric", True)))


class NormSpec:
    """Base for all norm/seminorm specs."""

    family: str = "abstract"

    @property
    def dim(self) -> int:  # pragma: no cover - overridden
        raise NotImplementedError

    @property
    def is_seminorm(self) -> bool:
        return False

    def eval(self, x: np.ndarray):
        raise NotImplementedError

    def subgradient(self, x: np.ndarray):
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError

    # shared plumbing -------------------------------------------------

    def _check(self, x) -> tuple[np.ndarray, bool]:
        """Coerce to (N, n); second value marks a single-point input."""
        a = np.asarray(x, dtype=float)
        single = a.ndim == 1
        if single:
            a = a[None, :]
        if a.ndim != 2 or a.shape[1] != self.dim:
            raise DimensionMismatch(
                f"expected dimension {self.dim}, got shape {np.shape(x)}")
        return a, single

    def _guard_origin(self, a: np.ndarray, single: bool) -> None:
        if single and not np.any(a):
            raise UndefinedGradient("subgradient undefined at the origin")

    def __repr__(self):  # compact, stable
        return json.dumps(self.to_dict(), separators=(",", ":"))


@dataclass(frozen=True, eq=False)
class LpNorm(NormSpec):
    """l_p norm on R^n, p >= 1."""

    p: float
    n: int
    family = "lp"

    def __post_init__(self):
        if not (self.p >= 1.0) or not math.isfinite(self.p):
            raise NormError("p must be a finite real >= 1")
        if self.n < 1:
            raise NormError("dimension must be >= 1")

    @property
    def dim(self) -> int:
        return self.n

    def eval(self, x):
        a, single = self._check(x)
        if self.p == 1.0:
            r = np.abs(a).sum(axis=1)
        elif self.p == 2.0:
            r = np.sqrt(np.einsum("ij,ij->i", a, a))
        else:
            r = np.power(np.abs(a), self.p).sum(axis=1) ** (1.0 / self.p)
        return float(r[0]) if single else r

    def subgradient(self, x):
        a, single = self._check(x)
        self._guard_origin(a, single)
        if self.p == 1.0:
            g = np.sign(a)
        else:
            r = self.eval(a)
            r = np.where(r > 0.0, r, 1.0)[:, None]
            g = np.sign(a) * (np.abs(a) / r) ** (self.p - 1.0)
        return g[0] if single else g

    def to_dict(self):
        return {"family": "lp", "p": self.p, "n": self.n}


@dataclass(frozen=True, eq=False)
class SupNorm(NormSpec):
    """l_infinity norm on R^n."""

    n: int
    family = "sup"

    def __post_init__(self):
        if self.n < 1:
            raise NormError("dimension must be >= 1")

    @property
    def dim(self) -> int:
        return self.n

    def eval(self, x):
        a, single = self._check(x)
        r = np.abs(a).max(axis=1)
        return float(r[0]) if single else r

    def subgradient(self, x):
        a, single = self._check(x)
        self._guard_origin(a, single)
        idx = np.abs(a).argmax(axis=1)
        g = np.zeros_like(a)
        rows = np.arange(a.shape[0])
        s = np.sign(a[rows, idx])
        g[rows, idx] = np.where(s == 0.0, 1.0, s)
        return g[0] if single else g

    def to_dict(self):
        return {"family": "sup", "n": self.n}


@dataclass(frozen=True, eq=False)
class WeightedSup(NormSpec):
    """max_i w_i |x_i| with positive weights."""

    weights: np.ndarray
    family = "weighted_sup"

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).ravel()
        if w.size == 0 or not np.all(np.isfinite(w)) or np.any(w <= 0.0):
            raise NormError("weights must be finite and positive")
        object.__setattr__(self, "weights", _freeze(w))

    @property
    def dim(self) -> int:
        return self.weights.size

    def eval(self, x):
        a, single = self._check(x)
        r = (np.abs(a) * self.weights).max(axis=1)
        return float(r[0]) if single else r

    def subgradient(self, x):
        a, single = self._check(x)
        self._guard_origin(a, single)
        scaled = np.abs(a) * self.weights
        idx = scaled.argmax(axis=1)
        g = np.zeros_like(a)
        rows = np.arange(a.shape[0])
        s = np.sign(a[rows, idx])
        g[rows, idx] = self.weights[idx] * np.where(s == 0.0, 1.0, s)
        return g[0] if single else g

    def to_dict(self):
        return {"family": "weighted_sup", "weights": self.weights.tolist()}


@dataclass(frozen=True, eq=False)
class PolytopeNorm(NormSpec):
    """max over +/- functionals of <v, x>; a seminorm if the set has a kernel."""

    functionals: FunctionalSet
    family = "polytope"

    @property
    def dim(self) -> int:
        return self.functionals.dim

    @property
    def is_seminorm(self) -> bool:
        v = self.functionals.vectors
        return v.shape[0] < v.shape[1] or np.linalg.matrix_rank(v) < v.shape[1]

    def eval(self, x):
        a, single = self._check(x)
        r = np.abs(a @ self.functionals.vectors.T).max(axis=1)
        return float(r[0]) if single else r

    def subgradient(self, x):
        a, single = self._check(x)
        self._guard_origin(a, single)
        scores = a @ self.functionals.vectors.T
        idx = np.abs(scores).argmax(axis=1)
        rows = np.arange(a.shape[0])
        s = np.sign(scores[rows, idx])
        s = np.where(s == 0.0, 1.0, s)
        g = s[:, None] * self.functionals.vectors[idx]
        return g[0] if single else g

    def to_dict(self):
        return {"family": "polytope", "functionals": self.functionals.to_dict()}


@dataclass(frozen=True, eq=False)
class DirectSumSup(NormSpec):
    """max(left(x_head), right(x_tail)) on the concatenated coordinates."""

    left: NormSpec
    right: NormSpec
    family = "direct_sum_sup"

    @property
    def dim(self) -> int:
        return self.left.dim + self.right.dim

    @property
    def is_seminorm(self) -> bool:
        return self.left.is_seminorm or self.right.is_seminorm

    def _split(self, a):
        k = self.left.dim
        return a[:, :k], a[:, k:]

    def eval(self, x):
        a, single = self._check(x)
        xl, xr = self._split(a)
        r = np.maximum(self.left.eval(xl), self.right.eval(xr))
        return float(r[0]) if single else r

    def subgradient(self, x):
        a, single = self._check(x)
        self._guard_origin(a, single)
        xl, xr = self._split(a)
        vl = np.atleast_1d(self.left.eval(xl))
        vr = np.atleast_1d(self.right.eval(xr))
        g = np.zeros_like(a)
        k = self.left.dim
        take_left = vl >= vr  # tie goes left
        if np.any(take_left):
            g[take_left, :k] = np.atleast_2d(self.left.subgradient(xl[take_left]))
        if np.any(~take_left):
            g[~take_left, k:] = np.atleast_2d(self.right.subgradient(xr[~take_left]))
        return g[0] if single else g

    def to_dict(self):
        return {
            "family": "direct_sum_sup",
            "left": self.left.to_dict(),
            "right": self.right.to_dict(),
        }


@dataclass(frozen=True, eq=False)
class LinearImage(NormSpec):
    """x -> inner(A x); a seminorm when A is singular."""

    matrix: np.ndarray
    inner: NormSpec
    family = "linear_image"

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != self.inner.dim:
            raise NormError("matrix must map R^n into the inner spec's space")
        if not np.all(np.isfinite(m)):
            raise NormError("matrix entries must be finite")
        object.__setattr__(self, "matrix", _freeze(m))

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    @property
    def is_seminorm(self) -> bool:
        m = self.matrix
        if m.shape[0] < m.shape[1]:
            return True
        return bool(np.linalg.matrix_rank(m) < m.shape[1]) or self.inner.is_seminorm

    def eval(self, x):
        a, single = self._check(x)
        r = np.atleast_1d(self.inner.eval(a @ self.matrix.T))
        return float(r[0]) if single else r

    def subgradient(self, x):
        a, single = self._check(x)
        self._guard_origin(a, single)
        z = a @ self.matrix.T
        vals = np.atleast_1d(self.inner.eval(z))
        g = np.zeros_like(a)
        live = vals > 0.0
        if np.any(live):
            gi = np.atleast_2d(self.inner.subgradient(z[live]))
            g[live] = gi @ self.matrix
        # rows in the kernel (seminorm value 0): the zero vector is a
        # valid subgradient there
        return g[0] if single else g

    def to_dict(self):
        return {
            "family": "linear_image",
            "matrix": self.matrix.tolist(),
            "inner": self.inner.to_dict(),
        }


# ---------------------------------------------------------------------------
# module-level operations

def evaluate(spec: NormSpec, x) -> float | np.ndarray:
    """Evaluate the spec at a point or sample block."""
    return spec.eval(x)


def subgradient(spec: NormSpec, x) -> np.ndarray:
    """Deterministic subgradient at a point or sample block."""
    return spec.subgradient(x)


def signed_sup(spec: NormSpec, x) -> float | np.ndarray:
    """max over sign patterns eps of spec(eps * x).

    Exact for the sign-invariant families and for polytopes
    (per functional: sum_i |v_i x_i|); a sampled lower bound for
    linear images in dimension above 16.
    """
    a = np.asarray(x, dtype=float)
    single = a.ndim == 1
    a2 = a[None, :] if single else a
    r = _signed_sup_block(spec, a2)
    return float(r[0]) if single else r


def _signed_sup_block(spec: NormSpec, a: np.ndarray) -> np.ndarray:
    if isinstance(spec, (LpNorm, SupNorm, WeightedSup)):
        return np.atleast_1d(spec.eval(a))
    if isinstance(spec, PolytopeNorm):
        return (np.abs(a) @ np.abs(spec.functionals.vectors).T).max(axis=1)
    if isinstance(spec, DirectSumSup):
        k = spec.left.dim
        return np.maximum(_signed_sup_block(spec.left, a[:, :k]),
                          _signed_sup_block(spec.right, a[:, k:]))
    n = spec.dim
    if n <= 14:
        # enumerate half the sign patterns (the spec is even); last sign fixed
        m = np.arange(1 << (n - 1))[:, None]
        signs = np.where((m >> np.arange(n)) & 1, 1.0, -1.0)
    else:
        rng = np.random.default_rng(
            np.random.SeedSequence(20260816, spawn_key=(7,)))
        signs = rng.integers(0, 2, size=(512, n)) * 2.0 - 1.0
        signs[0] = 1.0  # always include the identity pattern
    best = np.full(a.shape[0], -np.inf)
    step = max(1, 1 << 17 >> max(1, a.shape[0]).bit_length())
    for lo in range(0, signs.shape[0], step):
        s = signs[lo:lo + step]
        tiled = (a[None, :, :] * s[:, None, :]).reshape(-1, n)
        vals = np.atleast_1d(spec.eval(tiled)).reshape(s.shape[0], a.shape[0])
        best = np.maximum(best, vals.max(axis=0))
    return best


def unc_constant_lower(spec: NormSpec, cfg) -> float:
    """Lower estimate of the unconditionality constant in the coordinate basis.

    Max over Gaussian samples of signed_sup(x)/spec(x); exact inner sign
    maximization where the family allows it, so the result is a statistically
    valid lower bound on unc(spec).
    """
    from .gstats import gaussian_batches

    best = 1.0
    for _, block in gaussian_batches(cfg, spec.dim):
        vals = np.atleast_1d(spec.eval(block))
        tops = _signed_sup_block(spec, block)
        ok = vals > 0.0
        if np.any(ok):
            best = max(best, float((tops[ok] / vals[ok]).max()))
    return best


def lift_map(inner: NormSpec, subspace: list[int], block: np.ndarray,
             a: float) -> LinearImage:
    """Extend an invertible map on a coordinate subspace by a * identity.

    ``block`` acts on the listed coordinates; every other coordinate is
    scaled by the small positive constant ``a``. Returns inner composed
    with the extended map.
    """
    if not (a > 0.0) or not math.isfinite(a):
        raise NormError("a must be a positive real")
    idx = list(subspace)
    n = inner.dim
    if len(set(idx)) != len(idx) or any(i < 0 or i >= n for i in idx):
        raise NormError("subspace indices must be distinct and in range")
    b = np.asarray(block, dtype=float)
    if b.shape != (len(idx), len(idx)):
        raise NormError("block shape must match the subspace size")
    if abs(np.linalg.det(b)) == 0.0:
        raise NormError("subspace map must be invertible")
    t = np.eye(n) * a
    t[np.ix_(idx, idx)] = b
    return LinearImage(t, inner)


def lip_exact(spec: NormSpec) -> float | None:
    """Exact Lipschitz constant (euclidean) where the family has one."""
    if isinstance(spec, LpNorm):
        if spec.p >= 2.0:
            return 1.0
        return float(spec.n ** (1.0 / spec.p - 0.5))
    if isinstance(spec, SupNorm):
        return 1.0
    if isinstance(spec, WeightedSup):
        return float(spec.weights.max())
    if isinstance(spec, PolytopeNorm):
        v = spec.functionals.vectors
        return float(np.sqrt((v * v).sum(axis=1).max()))
    if isinstance(spec, DirectSumSup):
        a, b = lip_exact(spec.left), lip_exact(spec.right)
        if a is None or b is None:
            return None
        return max(a, b)
    if isinstance(spec, LinearImage):
        inner, m = spec.inner, spec.matrix
        if isinstance(inner, PolytopeNorm):
            u = inner.functionals.vectors @ m
            return float(np.sqrt((u * u).sum(axis=1).max()))
        if isinstance(inner, SupNorm):
            return float(np.sqrt((m * m).sum(axis=1).max()))
        if isinstance(inner, WeightedSup):
            u = inner.weights[:, None] * m
            return float(np.sqrt((u * u).sum(axis=1).max()))
        if isinstance(inner, LpNorm) and inner.p == 2.0:
            return float(np.linalg.svd(m, compute_uv=False).max())
        return None
    return None


# ---------------------------------------------------------------------------
# serialization

_FAMILIES = {}


def _check_keys(d: dict, allowed: set, required: set) -> None:
    extra = set(d) - allowed
    if extra:
        raise NormError(f"unknown keys: {sorted(extra)}")
    missing = required - set(d)
    if missing:
        raise NormError(f"missing keys: {sorted(missing)}")


def spec_to_dict(spec: NormSpec) -> dict:
    return spec.to_dict()


def spec_from_dict(d: dict) -> NormSpec:
    if not isinstance(d, dict) or "family" not in d:
        raise NormError("spec dict needs a 'family' key")
    fam = d["family"]
    if fam not in _FAMILIES:
        raise NormError(f"unknown family {fam!r}")
    return _FAMILIES[fam](d)


def spec_to_json(spec: NormSpec) -> str:
    return json.dumps(spec.to_dict(), separators=(",", ":"))


def spec_from_json(s: str) -> NormSpec:
    return spec_from_dict(json.loads(s))


def _load_lp(d):
    _check_keys(d, {"family", "p", "n"}, {"p", "n"})
    return LpNorm(float(d["p"]), int(d["n"]))


def _load_sup(d):
    _check_keys(d, {"family", "n"}, {"n"})
    return SupNorm(int(d["n"]))


def _load_wsup(d):
    _check_keys(d, {"family", "weights"}, {"weights"})
    return WeightedSup(np.asarray(d["weights"], dtype=float))


def _load_poly(d):
    _check_keys(d, {"family", "functionals"}, {"functionals"})
    return PolytopeNorm(FunctionalSet.from_dict(d["functionals"]))


def _load_dsum(d):
    _check_keys(d, {"family", "left", "right"}, {"left", "right"})
    return DirectSumSup(spec_from_dict(d["left"]), spec_from_dict(d["right"]))


def _load_limg(d):
    _check_keys(d, {"family", "matrix", "inner"}, {"matrix", "inner"})
    return LinearImage(np.asarray(d["matrix"], dtype=float),
                       spec_from_dict(d["inner"]))


_FAMILIES.update({
    "lp": _load_lp,
    "sup": _load_sup,
    "weighted_sup": _load_wsup,
    "polytope": _load_poly,
    "direct_sum_sup": _load_dsum,
    "linear_image": _load_limg,
})
