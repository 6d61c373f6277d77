import numpy as np
import pytest
import scipy.sparse as sp

from geoxray.fields import DofSpace, component_degrees, Grid, OneForm, SymmetricTensorField, eval_field, sample_field
from geoxray.formats import read_csv, read_gxrt1, read_triplets, write_csv, write_gxrt1, write_triplets


@pytest.fixture
def grid(disc):
    return Grid.over(disc, 24)


def test_constant_field_and_zero_extension(disc, grid):
    f = sample_field(lambda p: np.ones(p.shape[:-1] + (1,)), 0, grid, disc)
    assert f(np.array([[0.1, 0.2]]))[0, 0] == pytest.approx(1.0)
    assert f(np.array([[1.1, 0.0]]))[0, 0] == 0.0


@pytest.mark.parametrize("layout", ["cubic", "spline", "spline2"])
@pytest.mark.parametrize("order", [0, 1, 2])
def test_linear_reproduction(disc, grid, layout, order):
    # each component is linear along the axes where its spline degree is at least one
    kinds = component_degrees(order, 2, layout)
    a = np.array([0.3, -1.2])

    def fn(p):
        return np.stack([0.5 + sum(a[k] * p[..., k] for k in range(2) if kd[k] == "cubic" or kd[k] >= 1) for kd in kinds], -1)

    f = sample_field(fn, order, grid, disc, interp=layout, domain="none")
    x = np.random.default_rng(0).uniform(-0.8, 0.8, (20, 2))
    np.testing.assert_allclose(f(x), fn(x), atol=1e-12)


def test_field_arithmetic_and_validation(disc, grid):
    f = sample_field(lambda p: p[..., :1] ** 2, 0, grid, disc)
    np.testing.assert_allclose((f * 2 - f).components, f.components)
    with pytest.raises(ValueError, match="shape"):
        SymmetricTensorField(2, grid, np.zeros((2,) + grid.shape))
    with pytest.raises(ValueError, match="finite"):
        SymmetricTensorField(0, grid, np.full((1,) + grid.shape, np.nan))


def test_derivative_evaluation(disc, grid):
    f = sample_field(lambda p: (p[..., 0] ** 2 * p[..., 1])[..., None], 0, grid, disc, interp="cubic",
                     domain="none")
    x = np.array([[0.2, 0.3]])
    np.testing.assert_allclose(eval_field(f, x, deriv=(1, 0))[0, 0], 2 * 0.2 * 0.3, atol=1e-10)


def test_dof_space_roundtrip(disc, grid):
    space = DofSpace(grid, 2, disc, "spline", "M")
    v = np.random.default_rng(1).standard_normal(space.size)
    np.testing.assert_allclose(space.to_vector(space.to_field(v)), v)
    assert space.inner(v, v) == pytest.approx(space.norm(v) ** 2)


def test_gxrt1_roundtrip(tmp_path, disc, grid):
    f = sample_field(lambda p: np.stack([p[..., 0], p[..., 1], p[..., 0] * p[..., 1]], -1), 2, grid, disc)
    write_gxrt1(tmp_path / "f.gxrt1", f)
    g = read_gxrt1(tmp_path / "f.gxrt1", disc)
    assert g.order == 2 and g.grid == f.grid
    np.testing.assert_array_equal(g.components, f.components)
    (tmp_path / "bad").write_bytes(b"nothing")
    with pytest.raises(ValueError, match="GXRT1"):
        read_gxrt1(tmp_path / "bad")
    (tmp_path / "short").write_bytes((tmp_path / "f.gxrt1").read_bytes()[:-8])
    with pytest.raises(ValueError, match="truncated"):
        read_gxrt1(tmp_path / "short")


def test_triplet_roundtrip(tmp_path):
    A = sp.random(40, 30, density=0.1, random_state=2, format="csr")
    write_triplets(tmp_path / "A.gxtri", A, 2, "fan:1600")
    B, order, h = read_triplets(tmp_path / "A.gxtri")
    assert order == 2 and len(h) == 32
    assert abs(A - B).max() == 0


def test_csv_roundtrip(tmp_path):
    write_csv(tmp_path / "t.csv", ["a", "b"], [[1, 0.1], [2, 1 / 3]])
    header, rows = read_csv(tmp_path / "t.csv")
    assert header == ["a", "b"] and float(rows[1][1]) == 1 / 3


def test_oneform_type(disc, grid):
    v = OneForm(grid, np.zeros((2,) + grid.shape), "cubic", disc)
    assert v.order == 1 and isinstance(v * 2.0, OneForm)
