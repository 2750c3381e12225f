"""B-spline edge functions and the KAN layers built from them.

Each edge carries ``phi(u) = alpha * u + sum_k a_k * b_k(u)`` on an open-uniform
knot vector. The basis term sees ``u`` clamped to the grid domain while the
linear skip sees the raw value, so extrapolation stays linear and the basis
contributes no input gradient outside the domain.
"""

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import ContractError
from .numerics import Module, check_finite, init_normal, init_params, silu, silu_grad

RHO_CHOICES = ("identity", "silu")


@dataclass(frozen=True)
class SplineGrid:
    u_min: float = -1.0
    u_max: float = 1.0
    size: int = 5
    degree: int = 3

    def __post_init__(self):
        if int(self.size) < 1:
            raise ContractError(f"spline grid needs at least one interval, got {self.size}")
        if int(self.degree) < 0:
            raise ContractError(f"spline degree must be non-negative, got {self.degree}")
        if not self.u_max > self.u_min:
            raise ContractError(f"empty spline domain [{self.u_min}, {self.u_max}]")

    @cached_property
    def knots(self):
        interior = np.linspace(self.u_min, self.u_max, self.size + 1)
        return np.concatenate(
            [
                np.full(self.degree, float(self.u_min)),
                interior,
                np.full(self.degree, float(self.u_max)),
            ]
        )

    @property
    def num_basis(self):
        return self.size + self.degree

    def metadata(self):
        return {
            "u_min": float(self.u_min),
            "u_max": float(self.u_max),
            "size": int(self.size),
            "degree": int(self.degree),
        }


def _cox_de_boor(u, knots, degree):
    """Basis tables for degrees ``degree - 1`` and ``degree`` at points ``u`` (1-D)."""
    n_spans = len(knots) - 1
    table = np.zeros((u.size, n_spans))
    last_span = max(i for i in range(n_spans) if knots[i + 1] > knots[i])
    for i in range(n_spans):
        if knots[i + 1] > knots[i]:
            table[:, i] = (u >= knots[i]) & (u < knots[i + 1])
    # the closed right end belongs to the last non-empty span
    table[u >= knots[last_span + 1], last_span] = 1.0
    previous = None
    for q in range(1, degree + 1):
        count = len(knots) - q - 1
        current = np.zeros((u.size, count))
        for i in range(count):
            left = knots[i + q] - knots[i]
            right = knots[i + q + 1] - knots[i + 1]
            if left > 0:
                current[:, i] += (u - knots[i]) / left * table[:, i]
            if right > 0:
                current[:, i] += (knots[i + q + 1] - u) / right * table[:, i + 1]
        previous, table = table, current
    return previous, table


def bspline_basis(u, grid):
    basis, _ = bspline_basis_with_derivative(u, grid)
    return basis


def bspline_basis_with_derivative(u, grid):
    """Values and ``d/du`` of every basis function, shape ``u.shape + (K,)``.

    ``u`` is clamped to the domain first; the derivative is that of the
    clamped argument's basis, callers mask it outside the domain.
    """
    u = np.asarray(u, dtype=np.float64)
    flat = np.clip(u.reshape(-1), grid.u_min, grid.u_max)
    knots = grid.knots
    p = grid.degree
    lower, basis = _cox_de_boor(flat, knots, p)
    derivative = np.zeros_like(basis)
    if p > 0:
        for i in range(basis.shape[1]):
            left = knots[i + p] - knots[i]
            right = knots[i + p + 1] - knots[i + 1]
            if left > 0:
                derivative[:, i] += p / left * lower[:, i]
            if right > 0:
                derivative[:, i] -= p / right * lower[:, i + 1]
    shape = u.shape + (grid.num_basis,)
    return basis.reshape(shape), derivative.reshape(shape)


@dataclass
class KanEdgeFunction:
    alpha: float
    coef: np.ndarray
    grid: SplineGrid

    def __post_init__(self):
        self.coef = np.asarray(self.coef, dtype=np.float64)
        if self.coef.shape != (self.grid.num_basis,):
            raise ContractError(
                f"edge needs {self.grid.num_basis} spline coefficients, got {self.coef.shape}"
            )
        check_finite("edge coefficients", self.coef)


def kan_edge_eval(edge, u):
    u = np.asarray(u, dtype=np.float64)
    return edge.alpha * u + bspline_basis(u, edge.grid) @ edge.coef


def kan_edge_grad(edge, u):
    """Return ``(d/du, d/dalpha, d/dcoef)`` at a scalar ``u``."""
    u = float(u)
    basis, derivative = bspline_basis_with_derivative(np.array([u]), edge.grid)
    inside = edge.grid.u_min <= u <= edge.grid.u_max
    du = edge.alpha + (float(derivative[0] @ edge.coef) if inside else 0.0)
    return du, u, basis[0].copy()


class KanLayer(Module):
    """``n_in * n_out`` edge functions; ``z_j = sum_i phi_ji(x_i)``, ``x_j = rho(z_j)``."""

    def __init__(self, in_width, out_width, rng, grid=None, rho="identity"):
        super().__init__()
        if rho not in RHO_CHOICES:
            raise ContractError(f"unknown rho {rho!r}; expected one of {RHO_CHOICES}")
        self.in_width = in_width
        self.out_width = out_width
        self.grid = grid or SplineGrid()
        self.rho = rho
        k = self.grid.num_basis
        self.alpha = self.add_param("alpha", init_params((out_width, in_width), "fan_avg", rng))
        self.coef = self.add_param(
            "coef", init_normal((out_width, in_width, k), 0.1 / np.sqrt(k), rng)
        )

    def edge(self, j, i):
        return KanEdgeFunction(float(self.alpha[j, i]), self.coef[j, i].copy(), self.grid)

    def forward(self, x):
        if x.shape[-1] != self.in_width:
            raise ContractError(f"KAN layer expects width {self.in_width}, got {x.shape[-1]}")
        lead = x.shape[:-1]
        flat = x.reshape(-1, self.in_width)
        basis, derivative = bspline_basis_with_derivative(flat, self.grid)
        inside = (flat >= self.grid.u_min) & (flat <= self.grid.u_max)
        z = flat @ self.alpha.T + np.einsum("nik,oik->no", basis, self.coef)
        y = silu(z) if self.rho == "silu" else z
        return y.reshape(lead + (self.out_width,)), (flat, basis, derivative, inside, z, lead)

    def backward(self, grad_out, cache):
        flat, basis, derivative, inside, z, lead = cache
        dz = grad_out.reshape(-1, self.out_width)
        if self.rho == "silu":
            dz = dz * silu_grad(z)
        self.grads["alpha"] += dz.T @ flat
        self.grads["coef"] += np.einsum("no,nik->oik", dz, basis)
        spline_part = np.einsum("no,oik->nik", dz, self.coef)
        dx = dz @ self.alpha + np.sum(spline_part * derivative, axis=-1) * inside
        return dx.reshape(lead + (self.in_width,))


class DeepKan(Module):
    def __init__(self, layers):
        super().__init__()
        if not layers:
            raise ContractError("a KAN stack needs at least one layer")
        for index in range(len(layers) - 1):
            if layers[index].out_width != layers[index + 1].in_width:
                raise ContractError(
                    f"layer {index} emits width {layers[index].out_width} but layer "
                    f"{index + 1} expects {layers[index + 1].in_width}"
                )
        self.layers = list(layers)
        for index, layer in enumerate(self.layers):
            self.add_child(f"layer{index}", layer)

    @classmethod
    def from_widths(cls, widths, rng, grid=None, rho="identity"):
        if len(widths) < 2:
            raise ContractError(f"need at least two widths, got {widths}")
        return cls(
            [KanLayer(widths[i], widths[i + 1], rng, grid=grid, rho=rho) for i in range(len(widths) - 1)]
        )

    def forward(self, x):
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x)
            caches.append(cache)
        return x, caches

    def backward(self, grad_out, caches):
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            grad_out = layer.backward(grad_out, cache)
        return grad_out


def kan_layer_forward(layer, x):
    return layer.forward(np.asarray(x, dtype=np.float64))[0]


def deep_kan_forward(net, x):
    return net.forward(np.asarray(x, dtype=np.float64))[0]
