import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.interpolate import BSpline

from app.gradcheck import numeric_gradient, relative_error
from tkan.errors import ContractError
from tkan.spline import (
    DeepKan,
    KanEdgeFunction,
    KanLayer,
    SplineGrid,
    bspline_basis,
    bspline_basis_with_derivative,
    deep_kan_forward,
    kan_edge_eval,
    kan_edge_grad,
    kan_layer_forward,
)


@pytest.fixture
def grid():
    return SplineGrid()


class TestGrid:
    def test_knot_vector(self, grid):
        assert grid.knots.shape == (grid.size + 2 * grid.degree + 1,)
        assert grid.num_basis == 8
        assert np.all(np.diff(grid.knots) >= 0)
        assert grid.metadata() == {"u_min": -1.0, "u_max": 1.0, "size": 5, "degree": 3}

    @pytest.mark.parametrize("kwargs", [{"size": 0}, {"degree": -1}, {"u_min": 1.0, "u_max": 1.0}])
    def test_invalid_grid(self, kwargs):
        with pytest.raises(ContractError):
            SplineGrid(**kwargs)


class TestBasis:
    def test_partition_of_unity_and_local_support(self, grid):
        u = np.linspace(grid.u_min, grid.u_max, 10001)
        basis = bspline_basis(u, grid)
        assert np.max(np.abs(basis.sum(axis=-1) - 1.0)) <= 1e-12
        assert basis.min() >= 0.0
        assert np.all((basis > 0).sum(axis=-1) <= grid.degree + 1)
        knots = grid.knots
        for k in range(grid.num_basis):
            outside = (u < knots[k]) | (u > knots[k + grid.degree + 1])
            assert np.all(basis[outside, k] == 0.0)

    def test_matches_scipy(self, grid):
        u = np.linspace(-1.0, 0.999, 301)
        basis, derivative = bspline_basis_with_derivative(u, grid)
        for k in range(grid.num_basis):
            spline = BSpline(grid.knots, np.eye(grid.num_basis)[k], grid.degree)
            assert_allclose(basis[:, k], spline(u), atol=1e-12)
            assert_allclose(derivative[:, k], spline.derivative()(u), atol=1e-10)

    def test_input_is_clamped(self, grid):
        assert_allclose(bspline_basis(np.array([-3.0, 7.0]), grid), bspline_basis(np.array([-1.0, 1.0]), grid))

    def test_degree_zero(self):
        basis = bspline_basis(np.array([-0.95, 0.05, 1.0]), SplineGrid(size=4, degree=0))
        assert_allclose(basis.sum(axis=-1), 1.0)
        assert basis[2, -1] == 1.0


class TestEdgeFunction:
    def test_linear_extrapolation(self, grid, rng):
        edge = KanEdgeFunction(0.7, rng.normal(size=grid.num_basis), grid)
        assert kan_edge_eval(edge, 2.5) - kan_edge_eval(edge, 2.0) == pytest.approx(0.35, abs=1e-12)
        du, dalpha, dcoef = kan_edge_grad(edge, 3.0)
        assert du == 0.7
        assert dalpha == 3.0
        assert_allclose(dcoef, bspline_basis(np.array([1.0]), grid)[0])

    def test_gradient_inside_domain(self, grid, rng):
        edge = KanEdgeFunction(-0.2, rng.normal(size=grid.num_basis), grid)
        du, _, _ = kan_edge_grad(edge, 0.3)
        numeric = (kan_edge_eval(edge, 0.3 + 1e-6) - kan_edge_eval(edge, 0.3 - 1e-6)) / 2e-6
        assert du == pytest.approx(float(numeric), abs=1e-8)

    def test_wrong_coefficient_count(self, grid):
        with pytest.raises(ContractError):
            KanEdgeFunction(1.0, np.zeros(3), grid)


class TestKanLayer:
    def test_zero_coefficients_collapse_to_linear_map(self, rng):
        layer = KanLayer(6, 4, rng)
        layer.coef[...] = 0.0
        x = rng.normal(0.0, 2.0, size=(100, 6))
        assert_allclose(kan_layer_forward(layer, x), x @ layer.alpha.T, atol=1e-12)

    def test_edge_view_matches_layer(self, rng):
        layer = KanLayer(3, 2, rng)
        x = rng.uniform(-1, 1, size=3)
        expected = sum(kan_edge_eval(layer.edge(1, i), x[i]) for i in range(3))
        assert kan_layer_forward(layer, x[None])[0, 1] == pytest.approx(float(expected), abs=1e-12)

    def test_backward_matches_finite_differences(self, rng):
        layer = KanLayer(3, 2, rng, rho="silu")
        x = rng.uniform(-0.9, 0.9, size=(4, 3))
        direction = rng.normal(size=(4, 2))
        y, cache = layer.forward(x)
        grad_x = layer.backward(direction, cache)
        loss = lambda: float(np.sum(layer.forward(x)[0] * direction))
        assert relative_error(grad_x, numeric_gradient(loss, x)) < 1e-6
        assert relative_error(layer.grads["coef"].copy(), numeric_gradient(loss, layer.coef)) < 1e-6

    def test_contracts(self, rng):
        with pytest.raises(ContractError):
            KanLayer(2, 2, rng, rho="tanh")
        with pytest.raises(ContractError):
            kan_layer_forward(KanLayer(2, 2, rng), np.zeros((1, 3)))


class TestDeepKan:
    def test_chain_and_shapes(self, rng):
        net = DeepKan.from_widths((4, 5, 3), rng)
        assert deep_kan_forward(net, rng.normal(size=(7, 4))).shape == (7, 3)
        assert [name.split(".")[0] for name, _, _ in net.named_parameters()][:2] == ["layer0", "layer0"]

    def test_width_mismatch(self, rng):
        with pytest.raises(ContractError):
            DeepKan([KanLayer(2, 3, rng), KanLayer(4, 1, rng)])
        with pytest.raises(ContractError):
            DeepKan.from_widths((3,), rng)


def _second_difference(edge, u, h):
    return (kan_edge_eval(edge, u + h) - 2.0 * kan_edge_eval(edge, u) + kan_edge_eval(edge, u - h)) / h**2


def test_cubic_edges_have_continuous_second_derivative(grid, rng):
    edge = KanEdgeFunction(0.4, rng.normal(size=grid.num_basis), grid)
    h = 1e-3
    # second differences are exact on each cubic piece, so extrapolate each side to the knot
    for knot in grid.knots[grid.degree + 1 : grid.degree + grid.size]:
        left = 2.0 * _second_difference(edge, knot - 2 * h, h) - _second_difference(edge, knot - 4 * h, h)
        right = 2.0 * _second_difference(edge, knot + 2 * h, h) - _second_difference(edge, knot + 4 * h, h)
        assert abs(float(left) - float(right)) < 1e-4
