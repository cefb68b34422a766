import json

import numpy as np
import pytest

from relay_steer import DiffusionSpec, MatrixFunction, Scenario, load_scenario, scenario_from_dict
from relay_steer.exceptions import HypothesisError, InvalidInputError, ShapeError

from conftest import REFERENCE

TOML = """
n = 2
m = 2
d = 2
A = [[1.0, 0.0], [0.0, 1.0]]
B = { times = [0.0, 1.0], values = [[[1.0, 0.0], [0.0, 1.0]], [[2.0, 0.0], [0.0, 2.0]]] }
x = [1.0, 1.0]
y = [0.5, 0.0]
T = 1.0
rho = 3.0

[sigma]
kind = "affine_zero"
y_zero = [0.5, 0.0]
matrices = [[[0.5, 0.0], [0.0, 0.5]], [[0.5, 0.0], [0.0, 0.5]]]

[solver]
dt = 1e-3
epsilon = "auto"
"""


def test_matrix_function_interpolates():
    f = MatrixFunction.coerce({"times": [0.0, 1.0], "values": [np.eye(2), 3 * np.eye(2)]})
    assert not f.is_constant
    np.testing.assert_allclose(f(0.5), 2 * np.eye(2))
    np.testing.assert_allclose(f(2.0), 3 * np.eye(2))
    g = MatrixFunction.coerce(f.to_dict())
    assert g == f


def test_matrix_function_constant_round_trip():
    f = MatrixFunction.coerce([[1.0, 2.0], [3.0, 4.0]])
    assert f.is_constant and f.shape == (2, 2)
    assert MatrixFunction.coerce(f.to_dict()) == f


def test_diffusion_kinds():
    S = [np.array([[1.0, 0.0], [0.0, 2.0]])]
    lin = DiffusionSpec.linear(S)
    np.testing.assert_allclose(lin([1.0, 1.0]), [[1.0], [2.0]])
    aff = DiffusionSpec.affine_zero([1.0, 1.0], S)
    np.testing.assert_allclose(aff([1.0, 1.0]), [[0.0], [0.0]])
    X = np.array([[1.0, 1.0], [2.0, 0.0]])
    dW = np.array([[0.1], [0.2]])
    np.testing.assert_allclose(lin.noise(X, dW), [[0.1, 0.2], [0.4, 0.0]])
    cust = DiffusionSpec.custom(lambda x: np.array([[x[0]], [0.0]]), 1.0, [0.0, 0.0], d=1)
    np.testing.assert_allclose(cust.noise(X, dW), [[0.1, 0.0], [0.4, 0.0]])
    with pytest.raises(InvalidInputError):
        cust.to_dict()
    with pytest.raises(InvalidInputError):
        DiffusionSpec("quadratic", tuple(S))


def test_hypothesis_i_and_ii():
    with pytest.raises(HypothesisError) as err:
        Scenario(A=np.eye(1), B=np.eye(1), sigma=DiffusionSpec.linear([np.eye(1)]), x=[1.0], y=[0.5], T=1.0, rho=1.0)
    assert err.value.hypothesis == "i"
    assert "hypothesis (i)" in str(err.value)
    with pytest.raises(HypothesisError) as err:
        Scenario(A=np.eye(2), B=[[1.0], [0.0]], sigma=DiffusionSpec.linear([np.eye(2)]), x=[1.0, 0.0],
                 y=[0.0, 0.0], T=1.0, rho=1.0)
    assert err.value.hypothesis == "ii"
    assert "gamma_lower_bound(B) = 0" in str(err.value)


def test_shape_and_value_errors():
    sig = DiffusionSpec.linear([np.eye(2)])
    with pytest.raises(ShapeError):
        Scenario(A=np.eye(3), B=np.eye(2), sigma=sig, x=[1.0, 0.0], y=[0.0, 0.0], T=1.0, rho=1.0)
    with pytest.raises(InvalidInputError):
        Scenario(A=np.eye(2), B=np.eye(2), sigma=sig, x=[1.0, 0.0], y=[0.0, 0.0], T=-1.0, rho=1.0)
    with pytest.raises(InvalidInputError):
        Scenario(A=np.eye(2), B=np.eye(2), sigma=sig, x=[1.0, 0.0], y=[0.0, 0.0], T=1.0, rho=-1.0)
    bad = dict(REFERENCE, n=3)
    with pytest.raises(ShapeError):
        scenario_from_dict(bad)
    with pytest.raises(InvalidInputError):
        scenario_from_dict({k: v for k, v in REFERENCE.items() if k != "T"})


def test_confidence_rho(reference_scenario):
    assert reference_scenario.rho == pytest.approx(22.687, abs=1e-3)


def test_load_toml_and_json(tmp_path):
    p = tmp_path / "s.toml"
    p.write_text(TOML)
    sc, raw = load_scenario(p)
    assert sc.n == 2 and sc.m == 2 and sc.d == 2
    assert sc.solver.dt == 1e-3 and sc.solver.epsilon is None
    np.testing.assert_allclose(sc.B(0.5), 1.5 * np.eye(2))
    q = tmp_path / "s.json"
    q.write_text(json.dumps(sc.to_dict()))
    sc2, _ = load_scenario(q)
    assert sc2.to_dict() == sc.to_dict()


def test_with_revalidates(reference_scenario):
    with pytest.raises(HypothesisError):
        reference_scenario.with_(y=np.array([0.0, 0.0]))
    assert reference_scenario.with_(rho=5.0).rho == 5.0
