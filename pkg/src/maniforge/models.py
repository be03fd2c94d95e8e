"""Semiflows, their time-tau maps and Fréchet differentials.

Every model is written as ``du/dt = -Λu - B(u) + f`` with a diagonal linear
part ``Λ`` (eigenvalues of ``νA``), a nonlinearity ``B`` and a constant
forcing ``f``.  That split is what the IMEX Euler scheme needs; RK4 only uses
the full right-hand side.  Differentials are computed by integrating the
variational system with the same scheme, so they are exact derivatives of the
discrete maps.

Arrays are batched: states are ``(B, n)`` and tangent bundles ``(B, n, r)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Literal, Sequence

import numpy as np
import scipy.fft as sfft

from .spectral import SpectralOperator, StateVector, graph_norm

SchemeKind = Literal["ExactDuhamel", "RK4", "IMEXEuler"]
MODEL_NAMES = ("Saddle2", "AppendixPolar", "KuramotoSivashinsky", "NSETorus")


class ModelError(ValueError):
    """Unknown model, incomplete parameters or an inconsistent scheme."""


class DivergenceError(RuntimeError):
    def __init__(self, message, step=None, norm=None, history=None):
        super().__init__(message)
        self.step = step
        self.norm = norm
        self.history = list(history) if history is not None else None


class HyperbolicityError(RuntimeError):
    """``DG - Id`` is singular, so the fixed point is not isolated/hyperbolic."""


# ---------------------------------------------------------------------------
# schemes and perturbations


@dataclass(frozen=True)
class TimeStepScheme:
    kind: SchemeKind
    dt: float
    substeps: int

    def __post_init__(self):
        if self.kind not in ("ExactDuhamel", "RK4", "IMEXEuler"):
            raise ModelError(f"unknown scheme {self.kind!r}")
        if not self.dt > 0 or self.substeps < 1:
            raise ModelError("scheme needs dt > 0 and substeps >= 1")

    @classmethod
    def for_tau(cls, kind: SchemeKind, tau: float, dt: float | None = None) -> "TimeStepScheme":
        """Pick ``substeps = round(tau/dt)`` and adjust dt so that dt*substeps == tau."""
        if kind == "ExactDuhamel":
            return cls(kind, tau, 1)
        if dt is None:
            raise ModelError(f"{kind} needs a step size")
        steps = max(1, int(round(tau / dt)))
        return cls(kind, tau / steps, steps)

    def check(self, tau: float):
        if abs(self.dt * self.substeps - tau) > 1e-12 * tau:
            raise ModelError(f"dt*substeps = {self.dt * self.substeps} does not match tau = {tau}")


@dataclass(frozen=True)
class PerturbationSpec:
    kind: Literal["ModeTruncation", "TimeDiscretization", "AnalyticE"]
    h: float
    truncation_modes: int | None = None
    dt: float | None = None
    analytic_form: str | None = None

    def __post_init__(self):
        if self.kind not in ("ModeTruncation", "TimeDiscretization", "AnalyticE"):
            raise ModelError(f"unknown perturbation kind {self.kind!r}")
        if not self.h >= 0:
            raise ModelError("perturbation size h must be >= 0")
        if self.kind == "ModeTruncation" and (self.truncation_modes is None or self.truncation_modes < 1):
            raise ModelError("ModeTruncation needs truncation_modes >= 1")
        if self.kind == "TimeDiscretization" and not (self.dt or 0) > 0:
            raise ModelError("TimeDiscretization needs dt > 0")
        if self.kind == "AnalyticE" and not self.analytic_form:
            raise ModelError("AnalyticE needs an analytic_form")


# ---------------------------------------------------------------------------
# models


class SemiflowModel:
    """Base class: ``du/dt = -linear*u - nonlinear(u) + forcing``."""

    name: str = "abstract"
    schemes: tuple[str, ...] = ("RK4", "IMEXEuler")

    def __init__(self, params: dict, tau: float, gamma: float = 0.0):
        if not tau > 0:
            raise ModelError("tau must be positive")
        if not 0.0 <= gamma <= 1.0:
            raise ModelError("gamma must lie in [0, 1]")
        beta = params.get("beta", 0.0)
        if not 0.0 <= beta < 1.0:
            raise ModelError("beta must lie in [0, 1)")
        self.params = dict(params)
        self.tau = float(tau)
        self.gamma = float(gamma)

    # subclasses set: self.linear (n,), self.forcing (n,), self.operator
    @property
    def dim(self) -> int:
        return self.linear.size

    def nonlinear(self, v: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def nonlinear_jvp(self, v: np.ndarray, w: np.ndarray) -> np.ndarray:
        """``DB(v) w`` for ``v`` (B, n) and ``w`` (B, n, r)."""
        raise NotImplementedError

    def rhs(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        return -self.linear * v - self.nonlinear(v) + self.forcing

    def rhs_jvp(self, v: np.ndarray, w: np.ndarray) -> np.ndarray:
        return -self.linear[None, :, None] * w - self.nonlinear_jvp(v, w)

    def jacobian(self, v) -> np.ndarray:
        """Dense Jacobian of the vector field at a single state."""
        v = np.asarray(v, dtype=float).reshape(1, -1)
        return self.rhs_jvp(v, np.eye(self.dim)[None])[0]

    def norm(self, v) -> np.ndarray:
        return graph_norm(self.operator, self.gamma, v)

    # mode bookkeeping for Galerkin models; None means "not a Galerkin model"
    mode_keys: list | None = None

    def with_modes(self, modes: int) -> "SemiflowModel":
        raise ModelError(f"{self.name} has no Galerkin truncation")

    def __repr__(self):
        return f"{type(self).__name__}(n={self.dim}, tau={self.tau}, params={self.params})"


class Saddle2(SemiflowModel):
    """``x' = x``, ``y' = -y + x^2``; the unstable manifold is ``y = x^2/3``."""

    name = "Saddle2"
    schemes = ("ExactDuhamel", "RK4", "IMEXEuler")

    def __init__(self, params: dict, tau: float, gamma: float = 0.0):
        super().__init__(params, tau, gamma)
        self.linear = np.array([-1.0, 1.0])
        self.forcing = np.zeros(2)
        self.operator = SpectralOperator(self.linear)

    def nonlinear(self, v):
        out = np.zeros_like(v)
        out[..., 1] = -v[..., 0] ** 2
        return out

    def nonlinear_jvp(self, v, w):
        out = np.zeros_like(w)
        out[:, 1, :] = -2.0 * v[:, 0, None] * w[:, 0, :]
        return out

    def exact(self, v, w=None):
        t = self.tau
        c = (math.exp(2 * t) - math.exp(-t)) / 3.0
        x, y = v[:, 0], v[:, 1]
        gv = np.stack([x * math.exp(t), y * math.exp(-t) + c * x**2], axis=1)
        if w is None:
            return gv, None
        dw = np.empty_like(w)
        dw[:, 0, :] = math.exp(t) * w[:, 0, :]
        dw[:, 1, :] = 2.0 * c * x[:, None] * w[:, 0, :] + math.exp(-t) * w[:, 1, :]
        return gv, dw


def _appendix_functions(prepared: bool, r_cap: float):
    import sympy as sp

    x, y, h = sp.symbols("x y h", real=True)
    r = sp.sqrt(x**2 + y**2)
    s = (1 - x / r) / 2  # sin^2(theta/2)
    rdot = (r - 1) * (r * s - 1) + h * r * s
    if prepared:
        # equals 1 on the unit circle, so fixed points and their Jacobians are untouched
        rdot = rdot * (r_cap - r) / (r_cap - 1)
    fx = rdot * x / r - y**2 / r
    fy = (rdot + x) * y / r
    field_ = sp.Matrix([fx, fy])
    jac = field_.jacobian([x, y])
    f_num = sp.lambdify((x, y, h), [fx, fy], "numpy", cse=True)
    j_num = sp.lambdify((x, y, h), [[jac[0, 0], jac[0, 1]], [jac[1, 0], jac[1, 1]]], "numpy", cse=True)
    return f_num, j_num


class AppendixPolar(SemiflowModel):
    """The two-dimensional lower-semicontinuity example, integrated in Cartesian form.

    ``r' = (r-1)(r sin^2(θ/2) - 1) + h r sin^2(θ/2)``, ``θ' = sin θ``.  With
    ``prepared`` the radial speed is multiplied by ``(r_cap - r)/(r_cap - 1)``
    so that the escaping branch of the perturbed unstable manifold ends on the
    equilibrium ``r = r_cap`` instead of running off to infinity.
    """

    name = "AppendixPolar"
    schemes = ("RK4", "IMEXEuler")

    def __init__(self, params: dict, tau: float, gamma: float = 0.0):
        super().__init__(params, tau, gamma)
        self.h = float(params.get("h", 0.0))
        self.prepared = bool(params.get("prepared", 0.0))
        self.r_cap = float(params.get("r_cap", 2.0))
        if self.prepared and self.r_cap <= 1.0:
            raise ModelError("r_cap must exceed 1")
        self.linear = np.zeros(2)
        self.forcing = np.zeros(2)
        self.operator = SpectralOperator(self.linear)
        self._f, self._j = _appendix_functions(self.prepared, self.r_cap)

    def rhs(self, v):
        v = np.asarray(v, dtype=float)
        fx, fy = self._f(v[..., 0], v[..., 1], self.h)
        return np.stack(np.broadcast_arrays(fx, fy), axis=-1).astype(float)

    def nonlinear(self, v):
        return -self.rhs(v)

    def rhs_jvp(self, v, w):
        jac = self._j(v[:, 0], v[:, 1], self.h)
        jm = np.empty((v.shape[0], 2, 2))
        for i in range(2):
            for j in range(2):
                jm[:, i, j] = jac[i][j]
        return jm @ w

    def nonlinear_jvp(self, v, w):
        return -self.rhs_jvp(v, w)

    @staticmethod
    def to_cartesian(r, theta):
        return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=-1)

    @staticmethod
    def to_polar(v):
        v = np.asarray(v, dtype=float)
        return np.hypot(v[..., 0], v[..., 1]), np.arctan2(v[..., 1], v[..., 0])

    def polar_jacobian(self, r: float, theta: float) -> np.ndarray:
        """Jacobian of the (r, θ) field, from the same formulas as :meth:`rhs`."""
        s, ds = math.sin(theta / 2) ** 2, math.sin(theta) / 2
        g = (self.r_cap - r) / (self.r_cap - 1) if self.prepared else 1.0
        dg = -1.0 / (self.r_cap - 1) if self.prepared else 0.0
        F = (r - 1) * (r * s - 1) + self.h * r * s
        Fr = (r * s - 1) + (r - 1) * s + self.h * s
        Ft = (r - 1) * r * ds + self.h * r * ds
        return np.array([[Fr * g + F * dg, Ft * g], [0.0, math.cos(theta)]])


def _grid_size(minimum: int) -> int:
    """Smallest even FFT-friendly length >= minimum (``M > 3N`` removes aliasing)."""
    m = sfft.next_fast_len(minimum, real=True)
    while m % 2:
        m = sfft.next_fast_len(m + 1, real=True)
    return m


class _Galerkin(SemiflowModel):
    """Shared plumbing for the pseudospectral Fourier-Galerkin models."""

    def with_modes(self, modes):
        params = dict(self.params, N=modes)
        return type(self)(params, self.tau, self.gamma)

    def transfer(self, v: np.ndarray, target: "_Galerkin") -> np.ndarray:
        """Map coefficients into ``target``'s mode ordering (zero where absent)."""
        index = {key: i for i, key in enumerate(target.mode_keys)}
        src, dst = [], []
        for i, key in enumerate(self.mode_keys):
            j = index.get(key)
            if j is not None:
                src.append(i)
                dst.append(j)
        v = np.asarray(v, dtype=float)
        out = np.zeros(v.shape[:-1] + (target.dim,))
        out[..., dst] = v[..., src]
        return out


class KuramotoSivashinsky(_Galerkin):
    """``u_t + u_xxxx + u_xx + u u_x = 0`` on ``[0, L]`` periodic, real Fourier basis.

    Coefficients multiply ``cos(q_k x)`` and ``sin(q_k x)`` with ``q_k = 2πk/L``,
    ``k = 1..N``; the mean is zero and stays zero.  ``symmetry='odd'`` keeps
    only the sine modes (an invariant subspace).  Coordinates are ordered by
    eigenvalue ``q^4 - q^2``.  The quadratic term is evaluated on ``M > 3N``
    points, which is the 2/3 rule.
    """

    name = "KuramotoSivashinsky"

    def __init__(self, params: dict, tau: float, gamma: float = 0.0):
        super().__init__(params, tau, gamma)
        try:
            self.L = float(params["L"])
            self.N = int(params["N"])
        except KeyError as exc:
            raise ModelError(f"KuramotoSivashinsky needs parameter {exc.args[0]!r}") from None
        self.symmetry = {0.0: "odd", 1.0: "full", "odd": "odd", "full": "full"}.get(params.get("symmetry", "odd"))
        if self.symmetry is None or self.N < 1 or self.L <= 0:
            raise ModelError("KuramotoSivashinsky needs N >= 1, L > 0, symmetry odd|full")
        kinds = (1,) if self.symmetry == "odd" else (0, 1)
        keys = [(k, kind) for k in range(1, self.N + 1) for kind in kinds]
        q = np.array([2 * np.pi * k / self.L for k, _ in keys])
        lam = q**4 - q**2
        order = np.argsort(lam, kind="stable")
        self.mode_keys = [keys[i] for i in order]
        self.k = np.array([keys[i][0] for i in order])
        self.kind = np.array([keys[i][1] for i in order])
        self.q = q[order]
        self.linear = lam[order]
        self.forcing = np.zeros(self.dim)
        self.operator = SpectralOperator(self.linear)
        self.M = _grid_size(3 * self.N + 1)
        self._cos = self.kind == 0
        self._sin = self.kind == 1

    def to_grid(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        spec = np.zeros(v.shape[:-1] + (self.M // 2 + 1,), dtype=complex)
        half = self.M / 2.0
        spec[..., self.k[self._cos]] += half * v[..., self._cos]
        spec[..., self.k[self._sin]] += -1j * half * v[..., self._sin]
        return np.fft.irfft(spec, n=self.M, axis=-1)

    def _cos_sin(self, w_grid: np.ndarray):
        spec = np.fft.rfft(w_grid, axis=-1)[..., self.k] * (2.0 / self.M)
        return spec.real, -spec.imag

    def _derivative_of(self, w_grid: np.ndarray, scale: float) -> np.ndarray:
        """Coefficients of ``scale * d/dx w`` projected onto the retained modes."""
        a, b = self._cos_sin(w_grid)
        return np.where(self._cos, scale * self.q * b, -scale * self.q * a)

    def nonlinear(self, v):
        u = self.to_grid(v)
        return self._derivative_of(u * u, 0.5)

    def nonlinear_jvp(self, v, w):
        u = self.to_grid(v)  # (B, M)
        wg = self.to_grid(np.swapaxes(w, 1, 2))  # (B, r, M)
        out = self._derivative_of(u[:, None, :] * wg, 1.0)  # (B, r, n)
        return np.swapaxes(out, 1, 2)

    def nonlinear_direct(self, v: np.ndarray) -> np.ndarray:
        """``u u_x`` by explicit convolution of complex Fourier coefficients (test oracle)."""
        v = np.asarray(v, dtype=float)
        c = np.zeros(2 * self.N + 1, dtype=complex)  # index k + N
        for i, (k, kind) in enumerate(self.mode_keys):
            z = v[i] / 2.0 if kind == 0 else -1j * v[i] / 2.0
            c[k + self.N] += z
            c[-k + self.N] += np.conj(z)
        qk = 2 * np.pi / self.L
        out = np.zeros(self.dim)
        for i, (k, kind) in enumerate(self.mode_keys):
            total = 0j
            for j in range(-self.N, self.N + 1):
                l = k - j
                if -self.N <= l <= self.N:
                    total += c[j + self.N] * 1j * l * qk * c[l + self.N]
            out[i] = 2 * total.real if kind == 0 else -2 * total.imag
        return out


class NSETorus(_Galerkin):
    """Vorticity form of the forced 2D Navier-Stokes equations on ``[0, 2π]^2``.

    ``ω_t + u·∇ω = ν Δω + f`` with ``u = (ψ_y, -ψ_x)`` and ``-Δψ = ω``.  The
    basis is ``cos(k·x)``, ``sin(k·x)`` over a half plane of wavevectors with
    ``|k_1|, |k_2| <= N/2``.  Linear part ``ν|k|^2``; coordinates ordered by
    ``|k|^2``.  Forcing is Kolmogorov-like, ``amplitude * cos(k_f·x)`` with
    ``k_f = (forcing_k1, forcing_k2)``, plus ``symmetry_breaking`` times
    ``sin(x + y) + 0.7 cos(y)``.  Without the extra terms the translation
    symmetry makes every unstable eigenvalue of the laminar state double.
    """

    name = "NSETorus"

    def __init__(self, params: dict, tau: float, gamma: float = 0.0):
        super().__init__(params, tau, gamma)
        try:
            self.nu = float(params["nu"])
            self.N = int(params["N"])
        except KeyError as exc:
            raise ModelError(f"NSETorus needs parameter {exc.args[0]!r}") from None
        if self.nu <= 0 or self.N < 2:
            raise ModelError("NSETorus needs nu > 0 and N >= 2")
        K = self.N // 2
        keys = []
        for k1 in range(-K, K + 1):
            for k2 in range(0, K + 1):
                if k2 == 0 and k1 <= 0:
                    continue
                keys.extend([((k1, k2), 0), ((k1, k2), 1)])
        ksq = np.array([k[0] ** 2 + k[1] ** 2 for k, _ in keys], dtype=float)
        order = np.argsort(ksq, kind="stable")
        self.mode_keys = [keys[i] for i in order]
        self.k1 = np.array([keys[i][0][0] for i in order])
        self.k2 = np.array([keys[i][0][1] for i in order])
        self.kind = np.array([keys[i][1] for i in order])
        self.ksq = ksq[order]
        self.linear = self.nu * self.ksq
        self.operator = SpectralOperator(self.ksq)
        self.M = _grid_size(3 * K + 1)
        self._cos = self.kind == 0
        self._rows = np.mod(self.k1, self.M)
        self._setup_fft()
        self.forcing = self._build_forcing(params)

    def _build_forcing(self, params):
        amp = float(params.get("amplitude", 0.0))
        eps = float(params.get("symmetry_breaking", 0.2))
        kf = (int(params.get("forcing_k1", 4)), int(params.get("forcing_k2", 0)))
        terms = [(kf, 0, 1.0), ((1, 1), 1, eps), ((0, 1), 0, 0.7 * eps)]
        index = {key: i for i, key in enumerate(self.mode_keys)}
        f = np.zeros(self.dim)
        for (a, b), kind, weight in terms:
            sign = 1.0
            if b < 0 or (b == 0 and a < 0):
                a, b = -a, -b
                sign = -1.0 if kind == 1 else 1.0  # sin(-k.x) = -sin(k.x)
            i = index.get(((a, b), kind))
            if i is None:
                raise ModelError(f"forcing mode {(a, b)} is not resolved with N={self.N}")
            f[i] += amp * weight * sign
        return f

    def _spectrum(self, v: np.ndarray) -> np.ndarray:
        """Coefficients (..., n) -> rfft2 layout (..., M, M//2+1)."""
        z = (v[..., self._pc] - 1j * v[..., self._ps]) * (self.M**2 / 2.0)
        half = np.zeros(v.shape[:-1] + (self.M, self.M // 2 + 1), dtype=complex)
        half[..., self._prow, self._pk2] = z
        half[..., self._pconj, 0] = np.conj(z[..., self._paxis])
        return half

    def _coefficients(self, spec: np.ndarray) -> np.ndarray:
        vals = spec[..., self._rows, self.k2] * (2.0 / self.M**2)
        return np.where(self._cos, vals.real, -vals.imag)

    def _fields(self, spec):
        """Grid values of ``(ψ_y, -ψ_x, ω_x, ω_y)`` stacked on a new leading axis."""
        stack = np.stack([self._dy_inv * spec, self._mdx_inv * spec, self._dx * spec, self._dy * spec])
        return sfft.irfft2(stack, s=(self.M, self.M), axes=(-2, -1))

    def _setup_fft(self):
        k1 = np.fft.fftfreq(self.M, 1.0 / self.M)[:, None]
        k2 = np.arange(self.M // 2 + 1)[None, :]
        ksq = k1**2 + k2**2
        inv = np.where(ksq > 0, 1.0 / np.where(ksq > 0, ksq, 1.0), 0.0)
        self._dx, self._dy = 1j * k1, 1j * k2
        self._dy_inv, self._mdx_inv = 1j * k2 * inv, -1j * k1 * inv
        # one entry per distinct wavevector: (cos index, sin index)
        pos = {}
        for i, (kv, kind) in enumerate(self.mode_keys):
            pos.setdefault(kv, [0, 0])[kind] = i
        kvs = list(pos)
        self._pc = np.array([pos[k][0] for k in kvs])
        self._ps = np.array([pos[k][1] for k in kvs])
        self._prow = np.array([k[0] % self.M for k in kvs])
        self._pk2 = np.array([k[1] for k in kvs])
        self._paxis = self._pk2 == 0
        self._pconj = np.array([(-k[0]) % self.M for k in kvs if k[1] == 0], dtype=int)

    def nonlinear(self, v):
        spec = self._spectrum(np.asarray(v, dtype=float))
        u, w, wx, wy = self._fields(spec)
        return self._coefficients(sfft.rfft2(u * wx + w * wy, axes=(-2, -1)))

    def nonlinear_jvp(self, v, w):
        both = np.concatenate([v[:, None, :], np.swapaxes(w, 1, 2)], axis=1)  # (B, 1+r, n)
        u, vel, wx, wy = self._fields(self._spectrum(both))
        u0, w0, wx0, wy0 = u[:, :1], vel[:, :1], wx[:, :1], wy[:, :1]
        prod = u[:, 1:] * wx0 + vel[:, 1:] * wy0 + u0 * wx[:, 1:] + w0 * wy[:, 1:]
        out = self._coefficients(sfft.rfft2(prod, axes=(-2, -1)))
        return np.swapaxes(out, 1, 2)

    def nonlinear_direct(self, v: np.ndarray) -> np.ndarray:
        """``u·∇ω`` by an explicit sum over interacting wavevector pairs (test oracle)."""
        v = np.asarray(v, dtype=float)
        coef = {}
        for i, ((a, b), kind) in enumerate(self.mode_keys):
            z = v[i] / 2.0 if kind == 0 else -1j * v[i] / 2.0
            coef[(a, b)] = coef.get((a, b), 0) + z
            coef[(-a, -b)] = coef.get((-a, -b), 0) + np.conj(z)
        out = np.zeros(self.dim)
        for i, ((a, b), kind) in enumerate(self.mode_keys):
            total = 0j
            for (p1, p2), cp in coef.items():
                l1, l2 = a - p1, b - p2
                cl = coef.get((l1, l2))
                if cl is None:
                    continue
                # velocity from mode p, gradient from mode l
                psi = cp / (p1 * p1 + p2 * p2)
                ux, uy = 1j * p2 * psi, -1j * p1 * psi
                total += (ux * 1j * l1 + uy * 1j * l2) * cl
            out[i] = 2 * total.real if kind == 0 else -2 * total.imag
        return out


class LinearPart(SemiflowModel):
    """``du/dt = -Λu``: the linear semigroup of another model (no forcing, no nonlinearity)."""

    schemes = ("RK4", "IMEXEuler")

    def __init__(self, model: SemiflowModel):
        self.params = dict(model.params)
        self.tau = model.tau
        self.gamma = model.gamma
        self.linear = model.linear.copy()
        self.forcing = np.zeros(model.dim)
        self.operator = model.operator
        self.mode_keys = model.mode_keys
        self.name = f"{model.name}:linear"

    def nonlinear(self, v):
        return np.zeros_like(np.asarray(v, dtype=float))

    def nonlinear_jvp(self, v, w):
        return np.zeros_like(w)


_REGISTRY: dict[str, type[SemiflowModel]] = {
    "Saddle2": Saddle2,
    "AppendixPolar": AppendixPolar,
    "KuramotoSivashinsky": KuramotoSivashinsky,
    "NSETorus": NSETorus,
}


def build_model(name: str, parameters: dict | None = None, tau: float = 1.0, gamma: float = 0.0) -> SemiflowModel:
    try:
        cls = _REGISTRY[name]
    except KeyError:
        raise ModelError(f"unknown model {name!r}; choose one of {', '.join(MODEL_NAMES)}") from None
    return cls(dict(parameters or {}), tau, gamma)


# ---------------------------------------------------------------------------
# integrators


def _as_batch(v) -> tuple[np.ndarray, bool]:
    if isinstance(v, StateVector):
        v = v.coefficients
    arr = np.asarray(v, dtype=float)
    if arr.ndim == 1:
        return arr[None, :], True
    return arr, False


def _check(model: SemiflowModel, v: np.ndarray, step: int, bound: float):
    if not np.all(np.isfinite(v)):
        raise DivergenceError(f"non-finite state at step {step}", step=step, norm=math.inf)
    nrm = float(np.max(model.norm(v)))
    if nrm > bound:
        raise DivergenceError(f"|v|_gamma = {nrm:.3e} exceeds {bound:.1e} at step {step}", step=step, norm=nrm)


def _rk4(model, v, w, dt, steps, bound):
    for i in range(1, steps + 1):
        k1 = model.rhs(v)
        if w is None:
            k2 = model.rhs(v + 0.5 * dt * k1)
            k3 = model.rhs(v + 0.5 * dt * k2)
            k4 = model.rhs(v + dt * k3)
        else:
            v2 = v + 0.5 * dt * k1
            k2 = model.rhs(v2)
            v3 = v + 0.5 * dt * k2
            k3 = model.rhs(v3)
            v4 = v + dt * k3
            k4 = model.rhs(v4)
            K1 = model.rhs_jvp(v, w)
            K2 = model.rhs_jvp(v2, w + 0.5 * dt * K1)
            K3 = model.rhs_jvp(v3, w + 0.5 * dt * K2)
            K4 = model.rhs_jvp(v4, w + dt * K3)
            w = w + (dt / 6.0) * (K1 + 2 * K2 + 2 * K3 + K4)
        v = v + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        _check(model, v, i, bound)
    return v, w


def imex_euler_step(op_eigenvalues, nu, dt, forcing, nonlinear: Callable, u):
    """One step of ``u' = [u + dt (f - B(u))] / (1 + dt ν λ)``.

    ``op_eigenvalues`` may be a :class:`SpectralOperator` or an array of λ.
    """
    lam = op_eigenvalues.eigenvalues if isinstance(op_eigenvalues, SpectralOperator) else np.asarray(op_eigenvalues)
    u = np.asarray(u, dtype=float)
    return (u + dt * (forcing - nonlinear(u))) / (1.0 + dt * nu * lam)


def _imex(model, v, w, dt, steps, bound):
    denom = 1.0 + dt * model.linear
    for i in range(1, steps + 1):
        if w is not None:
            w = (w - dt * model.nonlinear_jvp(v, w)) / denom[None, :, None]
        v = (v + dt * (model.forcing - model.nonlinear(v))) / denom
        _check(model, v, i, bound)
    return v, w


def integrate(model: SemiflowModel, scheme: TimeStepScheme, v, w=None, bound: float = 1e8):
    """Advance ``v`` (B, n) and optional tangents ``w`` (B, n, r) by ``dt*substeps``."""
    if scheme.kind == "ExactDuhamel":
        if not isinstance(model, Saddle2):
            raise ModelError("ExactDuhamel is only available for Saddle2")
        gv, gw = model.exact(v, w)
        _check(model, gv, 1, bound)
        return gv, gw
    if scheme.kind == "RK4":
        return _rk4(model, v, w, scheme.dt, scheme.substeps, bound)
    return _imex(model, v, w, scheme.dt, scheme.substeps, bound)


# ---------------------------------------------------------------------------
# maps


class TimeMap:
    """The time-τ map ``G`` of a model under a scheme, with its differential.

    Call with a state ``(n,)`` or a batch ``(B, n)``.  ``differential(v, w)``
    takes tangents ``(n,)``, ``(n, r)`` or ``(B, n, r)``.
    """

    def __init__(self, model: SemiflowModel, scheme: TimeStepScheme, bound: float = 1e8):
        if scheme.kind not in model.schemes:
            raise ModelError(f"scheme {scheme.kind} is not offered for {model.name}")
        scheme.check(model.tau)
        self.model = model
        self.scheme = scheme
        self.bound = bound

    @property
    def dim(self) -> int:
        return self.model.dim

    def _evaluate(self, v, w):
        return integrate(self.model, self.scheme, v, w, self.bound)

    def __call__(self, v):
        vb, single = _as_batch(v)
        out, _ = self._evaluate(vb, None)
        return out[0] if single else out

    def with_tangent(self, v, w):
        vb, single = _as_batch(v)
        w = np.asarray(w, dtype=float)
        w_single_vec = False
        if single:
            if w.ndim == 1:
                w = w[:, None]
                w_single_vec = True
            w = w[None]
        elif w.ndim == 2:
            w = np.broadcast_to(w, (vb.shape[0],) + w.shape)
        gv, gw = self._evaluate(vb, np.array(w, dtype=float))
        if single:
            gv, gw = gv[0], gw[0]
            if w_single_vec:
                gw = gw[:, 0]
        return gv, gw

    def differential(self, v, w):
        return self.with_tangent(v, w)[1]

    def jacobian(self, v) -> np.ndarray:
        return self.differential(np.asarray(v, dtype=float), np.eye(self.dim))

    def norm(self, v):
        return self.model.norm(v)


class _ComposedMap(TimeMap):
    def __init__(self, base: TimeMap):
        self.base = base
        self.model = base.model
        self.scheme = base.scheme
        self.bound = base.bound


class GalerkinTruncatedMap(_ComposedMap):
    """``G_h = P_N ∘ G_N ∘ P_N``: the Galerkin model on the first ``N`` modes, embedded."""

    def __init__(self, base: TimeMap, modes: int):
        super().__init__(base)
        model = base.model
        if model.mode_keys is not None:
            self.coarse_model = model.with_modes(modes)
            self.coarse = TimeMap(self.coarse_model, base.scheme, base.bound)
        else:
            if not 1 <= modes < model.dim:
                raise ModelError("truncation_modes must be smaller than the dimension")
            self.coarse_model = None
            self.coarse = None
        self.modes = modes

    def _evaluate(self, v, w):
        if self.coarse is None:
            mask = np.zeros(self.dim)
            mask[: self.modes] = 1.0
            gv, gw = self.base._evaluate(v * mask, None if w is None else w * mask[None, :, None])
            return gv * mask, None if gw is None else gw * mask[None, :, None]
        cm, fm = self.coarse_model, self.model
        vc = fm.transfer(v, cm)
        wc = None if w is None else np.swapaxes(fm.transfer(np.swapaxes(w, 1, 2), cm), 1, 2)
        gv, gw = self.coarse._evaluate(vc, wc)
        gv = cm.transfer(gv, fm)
        if gw is not None:
            gw = np.swapaxes(cm.transfer(np.swapaxes(gw, 1, 2), fm), 1, 2)
        return gv, gw


class AnalyticPerturbationMap(_ComposedMap):
    """``G_h(v) = G(v) + h e(v)`` with ``e`` a closed-form expression.

    ``form`` lists the components of ``e`` separated by ``;`` in the variables
    ``c1 .. cn`` (any sympy expression, e.g. ``"c1**2; sin(c1)"``).
    """

    def __init__(self, base: TimeMap, h: float, form: str):
        import sympy as sp

        super().__init__(base)
        n = base.dim
        syms = sp.symbols(" ".join(f"c{i}" for i in range(1, n + 1)), real=True)
        syms = (syms,) if n == 1 else tuple(syms)
        parts = [p.strip() for p in form.split(";")]
        if len(parts) != n:
            raise ModelError(f"analytic form has {len(parts)} components, model dimension is {n}")
        namespace = {f"c{i}": s for i, s in enumerate(syms, 1)}
        try:
            exprs = [sp.sympify(p, locals=namespace) for p in parts]
        except (sp.SympifyError, SyntaxError) as exc:
            raise ModelError(f"cannot parse analytic form {form!r}: {exc}") from None
        jac = sp.Matrix(exprs).jacobian(list(syms))
        self._e = sp.lambdify(syms, exprs, "numpy")
        self._je = sp.lambdify(syms, jac.tolist(), "numpy")
        self.h = float(h)
        self.form = form

    def perturbation(self, v):
        cols = [v[:, i] for i in range(v.shape[1])]
        vals = self._e(*cols)
        return np.stack([np.broadcast_to(np.asarray(x, dtype=float), (v.shape[0],)) for x in vals], axis=1)

    def perturbation_jacobian(self, v):
        cols = [v[:, i] for i in range(v.shape[1])]
        rows = self._je(*cols)
        n = v.shape[1]
        out = np.empty((v.shape[0], n, n))
        for i in range(n):
            for j in range(n):
                out[:, i, j] = np.broadcast_to(np.asarray(rows[i][j], dtype=float), (v.shape[0],))
        return out

    def _evaluate(self, v, w):
        gv, gw = self.base._evaluate(v, w)
        gv = gv + self.h * self.perturbation(v)
        if w is not None:
            gw = gw + self.h * (self.perturbation_jacobian(v) @ w)
        return gv, gw


def time_tau_map(model: SemiflowModel, scheme: TimeStepScheme, v):
    """``G(v) = S(τ)v`` under ``scheme``; returns the same kind it was given."""
    out = TimeMap(model, scheme)(v)
    if isinstance(v, StateVector):
        return StateVector(out, v.space)
    return out


def frechet_differential(model: SemiflowModel, scheme: TimeStepScheme, v, w):
    if isinstance(v, StateVector):
        v = v.coefficients
    if isinstance(w, StateVector):
        w = w.coefficients
    return TimeMap(model, scheme).differential(v, w)


def perturbed_map(base: TimeMap, spec: PerturbationSpec) -> TimeMap:
    """Build ``G_h`` from ``G`` for one of the three perturbation classes."""
    if spec.kind == "AnalyticE":
        return AnalyticPerturbationMap(base, spec.h, spec.analytic_form)
    if spec.kind == "ModeTruncation":
        return GalerkinTruncatedMap(base, spec.truncation_modes)
    scheme = TimeStepScheme.for_tau("IMEXEuler", base.model.tau, spec.dt)
    return TimeMap(base.model, scheme, base.bound)


# ---------------------------------------------------------------------------
# fixed points


@dataclass
class FixedPointResult:
    state: np.ndarray
    iterations: int
    residual: float
    residual_history: list[float] = field(default_factory=list)
    method: str = "map"


def newton_fixed_point(
    tmap: TimeMap,
    guess,
    tol: float = 1e-10,
    max_iter: int = 50,
    method: Literal["map", "generator"] = "map",
) -> FixedPointResult:
    """Solve ``G(u) = u`` by Newton with a dense ``DG - Id``.

    ``method='generator'`` solves the vector field instead, which has the same
    roots for both RK4 and IMEX maps and avoids integrating ``n`` tangents.
    The reported residual is always ``|G(u) - u|_γ``.
    """
    u, _ = _as_batch(guess)
    u = u[0].copy()
    n = u.size
    model = tmap.model
    history = []

    def residual(state):
        if method == "generator":
            return model.rhs(state[None])[0]
        return tmap(state) - state

    def jac(state):
        if method == "generator":
            return model.jacobian(state)
        return tmap.jacobian(state) - np.eye(n)

    # the generator residual is driven well below tol before the map residual is checked
    inner_tol = tol if method == "map" else 1e-2 * tol / max(1.0, model.tau)
    r = residual(u)
    for it in range(max_iter + 1):
        res = float(model.norm(r))
        history.append(res)
        if res <= inner_tol:
            map_res = res if method == "map" else float(model.norm(tmap(u) - u))
            if map_res <= tol:
                return FixedPointResult(u, it, map_res, history, method)
        if it == max_iter:
            break
        J = jac(u)
        if not np.all(np.isfinite(J)) or np.linalg.cond(J) > 1e14:
            raise HyperbolicityError(f"DG - Id is singular to working precision at iteration {it}")
        step = np.linalg.solve(J, -r)
        t = 1.0
        base = np.linalg.norm(r)
        for _ in range(30):
            trial = u + t * step
            try:
                rt = residual(trial)
            except DivergenceError:
                rt = None
            if rt is not None and np.linalg.norm(rt) < base * (1 - 1e-4 * t):
                break
            t *= 0.5
        else:
            if rt is None:
                raise DivergenceError(f"Newton line search failed at iteration {it}", history=history)
        u, r = trial, rt
    raise DivergenceError(
        f"Newton did not reach |G(u)-u| <= {tol} in {max_iter} iterations", history=history, norm=history[-1]
    )


def with_tau(model: SemiflowModel, tau: float) -> SemiflowModel:
    """Same model with a different map time."""
    return type(model)(model.params, tau, model.gamma)


def trajectory(tmap: TimeMap, v0, steps: int) -> np.ndarray:
    """Orbit ``v0, G(v0), ..., G^steps(v0)`` as an array ``(steps+1, n)``."""
    out = [np.asarray(v0, dtype=float)]
    for _ in range(steps):
        out.append(tmap(out[-1]))
    return np.array(out)


def continuation_guess(model: SemiflowModel, steps: int = 40, tol: float = 1e-11) -> np.ndarray:
    """Steady state reached by ramping the forcing from zero in ``steps`` stages.

    Plain Newton from the Stokes solution can stall once the forcing is strong;
    following the branch keeps every Newton solve in its basin.
    """
    u = np.zeros(model.dim)
    for s in np.linspace(1.0 / steps, 1.0, steps):
        f = s * model.forcing
        for _ in range(50):
            r = -model.linear * u - model.nonlinear(u[None])[0] + f
            if np.linalg.norm(r) < tol:
                break
            u = u - np.linalg.solve(model.jacobian(u), r)
        else:
            raise DivergenceError(f"continuation lost the branch at forcing fraction {s:.3f}")
    return u
