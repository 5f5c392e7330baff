"""Coefficient families for the generator: diffusion matrix, potential, jump kernel.

Every family is identified by an integer code plus a float parameter vector so
that the numba path kernel and the grid assembler evaluate the exact same
function.  Arbitrary Python callables are accepted through the ``custom``
constructors; those work everywhere except inside the compiled simulator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numba as nb
import numpy as np

from .errors import MissingDerivatives, UnsupportedKernel

CUSTOM = -1

# diffusion codes
A_SCALED_IDENTITY = 0
A_CONSTANT = 1
A_VARIABLE_SPD = 2
A_SIN_OFFDIAG = 3
A_DIAG_QUADRATIC = 4

# potential codes
Q_ZERO = 0
Q_CONST = 1
Q_GAUSS_BUMP = 2
Q_BALL_INDICATOR = 3

# kernel codes
J_DEFAULT = 0
J_SIN_MODULATED = 1


@nb.njit(cache=True, inline="always")
def diffusion_eval(code, p, x, out):
    d = x.shape[0]
    for i in range(d):
        for j in range(d):
            out[i, j] = 0.0
    if code == A_SCALED_IDENTITY:
        for i in range(d):
            out[i, i] = p[0]
    elif code == A_CONSTANT:
        for i in range(d):
            for j in range(d):
                out[i, j] = p[i * d + j]
    elif code == A_VARIABLE_SPD:
        s = 1.0
        for i in range(d):
            s += x[i] * x[i]
        for i in range(d):
            for j in range(d):
                out[i, j] = p[0] * x[i] * x[j] / s
            out[i, i] += 1.0
    elif code == A_SIN_OFFDIAG:
        for i in range(d):
            out[i, i] = 1.0
        v = p[0] * math.sin(x[0])
        out[0, 1] = v
        out[1, 0] = v
    elif code == A_DIAG_QUADRATIC:
        for i in range(d):
            out[i, i] = 1.0
        out[0, 0] = 1.0 + p[0] * x[0] * x[0]


@nb.njit(cache=True, inline="always")
def diffusion_grad(code, p, x, out):
    """out[k, i, j] = d a_ij / d x_k."""
    d = x.shape[0]
    for k in range(d):
        for i in range(d):
            for j in range(d):
                out[k, i, j] = 0.0
    if code == A_VARIABLE_SPD:
        s = 1.0
        for i in range(d):
            s += x[i] * x[i]
        for k in range(d):
            for i in range(d):
                for j in range(d):
                    g = -x[i] * x[j] * 2.0 * x[k] / (s * s)
                    if i == k:
                        g += x[j] / s
                    if j == k:
                        g += x[i] / s
                    out[k, i, j] = p[0] * g
    elif code == A_SIN_OFFDIAG:
        v = p[0] * math.cos(x[0])
        out[0, 0, 1] = v
        out[0, 1, 0] = v
    elif code == A_DIAG_QUADRATIC:
        out[0, 0, 0] = 2.0 * p[0] * x[0]


@nb.njit(cache=True, inline="always")
def potential_eval(code, p, x):
    if code == Q_ZERO:
        return 0.0
    if code == Q_CONST:
        return p[0]
    d = x.shape[0]
    r2 = 0.0
    for i in range(d):
        t = x[i] - p[2 + i]
        r2 += t * t
    if code == Q_GAUSS_BUMP:
        return p[0] * math.exp(-r2 / (p[1] * p[1]))
    if code == Q_BALL_INDICATOR:
        if r2 < p[1] * p[1]:
            return p[0]
        return 0.0
    return math.nan


@nb.njit(cache=True, inline="always")
def kernel_eval(code, p, x, y):
    d = x.shape[0]
    r2 = 0.0
    for i in range(d):
        t = x[i] - y[i]
        r2 += t * t
    r = math.sqrt(r2)
    base = r ** (-(d + p[1]))
    if code == J_DEFAULT:
        return p[0] * base
    if code == J_SIN_MODULATED:
        return p[0] * (1.0 + p[2] * math.sin(x[0] + y[0])) * base
    return math.nan


@nb.njit(cache=True)
def _diffusion_many(code, p, X, out):
    for n in range(X.shape[0]):
        diffusion_eval(code, p, X[n], out[n])


@nb.njit(cache=True)
def _diffusion_grad_many(code, p, X, out):
    for n in range(X.shape[0]):
        diffusion_grad(code, p, X[n], out[n])


@nb.njit(cache=True)
def _potential_many(code, p, X, out):
    for n in range(X.shape[0]):
        out[n] = potential_eval(code, p, X[n])


@nb.njit(cache=True)
def _kernel_many(code, p, X, Y, out):
    for n in range(X.shape[0]):
        out[n] = kernel_eval(code, p, X[n], Y[n])


def _as_points(x) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 1:
        return arr[None, :], True
    return arr, False


@dataclass(frozen=True, eq=False)
class Diffusion:
    """Diffusion matrix field a(x) with optional derivative field."""

    code: int
    params: np.ndarray
    name: str
    fn: Optional[Callable] = None
    grad_fn: Optional[Callable] = None

    @classmethod
    def identity(cls, scale: float = 1.0) -> "Diffusion":
        return cls(A_SCALED_IDENTITY, np.array([float(scale)]), f"identity:{scale!r}")

    @classmethod
    def constant(cls, matrix) -> "Diffusion":
        m = np.asarray(matrix, dtype=float)
        return cls(A_CONSTANT, m.ravel().copy(), "constant")

    @classmethod
    def variable_spd(cls, eps: float = 0.1) -> "Diffusion":
        """a(x) = I + eps * x x^T / (1 + |x|^2)."""
        return cls(A_VARIABLE_SPD, np.array([float(eps)]), f"variable-spd:{eps!r}")

    @classmethod
    def sin_offdiag(cls, eps: float = 0.1) -> "Diffusion":
        """a(x) = I + eps * sin(x_1) (E_12 + E_21)."""
        return cls(A_SIN_OFFDIAG, np.array([float(eps)]), f"sin-offdiag:{eps!r}")

    @classmethod
    def diag_quadratic(cls, k: float = 1.0) -> "Diffusion":
        """a(x) = diag(1 + k x_1^2, 1, ..., 1)."""
        return cls(A_DIAG_QUADRATIC, np.array([float(k)]), f"diag-quadratic:{k!r}")

    @classmethod
    def custom(cls, fn: Callable, grad_fn: Optional[Callable] = None, name: str = "custom") -> "Diffusion":
        return cls(CUSTOM, np.zeros(1), name, fn, grad_fn)

    @property
    def compiled(self) -> bool:
        return self.code != CUSTOM

    @property
    def has_derivatives(self) -> bool:
        return self.compiled or self.grad_fn is not None

    def matrix(self, x) -> np.ndarray:
        X, single = _as_points(x)
        out = self.matrices(X)
        return out[0] if single else out

    def matrices(self, X) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=float)
        if not self.compiled:
            return np.array([np.asarray(self.fn(xi), dtype=float) for xi in X])
        out = np.empty((X.shape[0], X.shape[1], X.shape[1]))
        _diffusion_many(self.code, self.params, X, out)
        return out

    def gradient(self, x) -> np.ndarray:
        X, single = _as_points(x)
        X = np.ascontiguousarray(X)
        if not self.compiled:
            if self.grad_fn is None:
                raise MissingDerivatives(f"diffusion field {self.name!r} has no derivative field")
            out = np.array([np.asarray(self.grad_fn(xi), dtype=float) for xi in X])
        else:
            d = X.shape[1]
            out = np.empty((X.shape[0], d, d, d))
            _diffusion_grad_many(self.code, self.params, X, out)
        return out[0] if single else out


@dataclass(frozen=True, eq=False)
class Potential:
    """Potential q(x)."""

    code: int
    params: np.ndarray
    name: str
    fn: Optional[Callable] = None

    @classmethod
    def zero(cls) -> "Potential":
        return cls(Q_ZERO, np.zeros(1), "zero")

    @classmethod
    def const(cls, v: float) -> "Potential":
        return cls(Q_CONST, np.array([float(v)]), f"const:{float(v)!r}")

    @classmethod
    def bump(cls, center, radius: float, height: float) -> "Potential":
        """Gaussian bump: height * exp(-|y - center|^2 / radius^2)."""
        c = np.asarray(center, dtype=float)
        p = np.concatenate([[float(height), float(radius)], c])
        return cls(Q_GAUSS_BUMP, p, f"bump:{_fmt_point(c)}:{float(radius)!r}:{float(height)!r}")

    @classmethod
    def ball_indicator(cls, center, radius: float, height: float = 1.0) -> "Potential":
        c = np.asarray(center, dtype=float)
        p = np.concatenate([[float(height), float(radius)], c])
        return cls(Q_BALL_INDICATOR, p, f"ball:{_fmt_point(c)}:{float(radius)!r}:{float(height)!r}")

    @classmethod
    def custom(cls, fn: Callable, name: str = "custom") -> "Potential":
        return cls(CUSTOM, np.zeros(1), name, fn)

    @property
    def compiled(self) -> bool:
        return self.code != CUSTOM

    @property
    def is_zero(self) -> bool:
        return self.code == Q_ZERO

    def scaled(self, lam: float) -> "Potential":
        lam = float(lam)
        if self.code == Q_ZERO:
            return self
        if self.code == Q_CONST:
            return Potential.const(lam * self.params[0])
        if self.code in (Q_GAUSS_BUMP, Q_BALL_INDICATOR):
            c = self.params[2:]
            if self.code == Q_GAUSS_BUMP:
                return Potential.bump(c, self.params[1], lam * self.params[0])
            return Potential.ball_indicator(c, self.params[1], lam * self.params[0])
        fn = self.fn
        return Potential.custom(lambda y: lam * fn(y), f"{lam!r}*{self.name}")

    def __call__(self, x) -> np.ndarray:
        X, single = _as_points(x)
        X = np.ascontiguousarray(X)
        if not self.compiled:
            out = np.array([float(self.fn(xi)) for xi in X])
        else:
            out = np.empty(X.shape[0])
            _potential_many(self.code, self.params, X, out)
        return out[0] if single else out


@dataclass(frozen=True, eq=False)
class JumpKernel:
    """Jump kernel J(x, y) with sandwich constant ``c`` and index ``alpha``.

    The default kernel is J = c |x - y|^(-d - alpha).  Custom kernels carry an
    ``envelope`` constant C with J <= C |x - y|^(-d - alpha), needed for thinning.
    """

    c: float
    alpha: float
    code: int = J_DEFAULT
    params: np.ndarray = field(default_factory=lambda: np.zeros(3))
    fn: Optional[Callable] = None
    envelope: Optional[float] = None
    name: str = "default"

    @classmethod
    def default(cls, c: float = 1.0, alpha: float = 1.0) -> "JumpKernel":
        return cls(float(c), float(alpha), J_DEFAULT, np.array([float(c), float(alpha), 0.0]),
                   envelope=float(c), name="default")

    @classmethod
    def sin_modulated(cls, c: float, alpha: float, amp: float = 0.1, base: float = 1.0) -> "JumpKernel":
        """J = base * (1 + amp sin(x_1 + y_1)) |x - y|^(-d - alpha)."""
        return cls(float(c), float(alpha), J_SIN_MODULATED,
                   np.array([float(base), float(alpha), float(amp)]),
                   envelope=float(base) * (1.0 + abs(amp)), name=f"sin-modulated:{amp!r}")

    @classmethod
    def custom(cls, fn: Callable, c: float, alpha: float, envelope: Optional[float] = None,
               name: str = "custom") -> "JumpKernel":
        return cls(float(c), float(alpha), CUSTOM, np.zeros(3), fn, envelope, name)

    @property
    def is_default(self) -> bool:
        return self.code == J_DEFAULT

    @property
    def compiled(self) -> bool:
        return self.code != CUSTOM

    def __call__(self, x, y) -> np.ndarray:
        X, single = _as_points(x)
        Y, _ = _as_points(y)
        X, Y = np.broadcast_arrays(X, Y)
        X = np.ascontiguousarray(X)
        Y = np.ascontiguousarray(Y)
        if not self.compiled:
            out = np.array([float(self.fn(a, b)) for a, b in zip(X, Y)])
        else:
            out = np.empty(X.shape[0])
            _kernel_many(self.code, self.params, X, Y, out)
        return out[0] if single else out

    def require_envelope(self) -> float:
        if self.envelope is None:
            raise UnsupportedKernel(f"kernel {self.name!r} has no thinning envelope constant")
        return self.envelope


def _fmt_point(c: np.ndarray) -> str:
    return ",".join(repr(float(v)) for v in c)
