import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relay_steer.exceptions import NumericalError, ShapeError
from relay_steer.linear_noise import (
    adapted_variant_bound,
    fundamental_solution,
    integrate_transformed,
    pathwise_steer,
    pathwise_steer_batch,
    resolve_terminal,
    steering_constants,
    transformation_discrepancy,
    transformed_drift,
)
from relay_steer.sde_sim import BrownianPath, TimeGrid, sample_brownian

NILPOTENT = np.array([[0.0, 1.0], [0.0, 0.0]])


def test_zero_noise_gives_identity():
    p = sample_brownian(TimeGrid(1.0, 100), 1, 0)
    fs = fundamental_solution([np.zeros((2, 2))], p)
    assert np.allclose(fs.gammas, np.eye(2))
    assert np.allclose(fs.inverses, np.eye(2))


def test_scalar_gbm_closed_form():
    s = 0.3
    p = sample_brownian(TimeGrid(1.0, 1000), 1, 1)
    fs = fundamental_solution([[[s]]], p)
    assert fs.method == "closed_form_commuting"
    expected = np.exp(s * p.values[:, 0] - 0.5 * s * s * p.grid.times)
    assert np.allclose(fs.gammas[:, 0, 0], expected, rtol=1e-12)


def test_nilpotent_exact_and_euler_agree():
    p = sample_brownian(TimeGrid(1.0, 500), 1, 2)
    closed = fundamental_solution([NILPOTENT], p)
    euler = fundamental_solution([NILPOTENT], p, method="euler_sde")
    exact = np.eye(2) + p.values[:, 0, None, None] * NILPOTENT
    assert np.allclose(closed.gammas, exact, atol=1e-12)
    # sigma^2 = 0 makes the Euler product exact as well
    assert np.allclose(euler.gammas, exact, atol=1e-12)


def test_gbm_euler_converges_to_closed_form():
    s = 0.3
    p = sample_brownian(TimeGrid(1.0, 20000), 1, 5)
    closed = fundamental_solution([[[s]]], p)
    euler = fundamental_solution([[[s]]], p, method="euler_sde")
    assert np.max(np.abs(closed.gammas - euler.gammas)) < 0.02


def test_noncommuting_uses_euler_and_inverse_is_accurate():
    s1 = np.array([[0.0, 0.4], [0.0, 0.0]])
    s2 = np.array([[0.0, 0.0], [0.4, 0.0]])
    p = sample_brownian(TimeGrid(1.0, 2000), 2, 3)
    fs = fundamental_solution([s1, s2], p)
    assert fs.method == "euler_sde"
    prod = fs.gammas @ fs.inverses
    assert np.max(np.abs(prod - np.eye(2))) < 1e-8


def test_near_singular_gamma_raises():
    # one increment of -1/50 annihilates the first component in a single Euler step
    inc = np.array([[-1.0 / 50.0], [0.0]])
    p = BrownianPath(TimeGrid(1.0, 2), 1, inc)
    with pytest.raises(NumericalError):
        fundamental_solution([np.diag([50.0, 0.0])], p, method="euler_sde")


def test_path_dimension_mismatch():
    p = sample_brownian(TimeGrid(1.0, 10), 2, 0)
    with pytest.raises(ShapeError):
        fundamental_solution([NILPOTENT], p)


def test_transformed_drift_cases():
    A = np.array([[1.0, 2.0], [0.0, 3.0]])
    B = np.array([[1.0], [1.0]])
    At, Bt = transformed_drift(0.0, np.eye(2), np.eye(2), A, B)
    assert np.allclose(At, A) and np.allclose(Bt, B)
    # Gamma a function of A commutes with A
    G = np.eye(2) + 0.3 * A
    At, _ = transformed_drift(0.0, G, np.linalg.inv(G), A, B)
    assert np.allclose(At, A)
    D = np.diag([2.0, 0.5])
    Ad = np.diag([1.0, -1.0])
    At, Bt = transformed_drift(0.0, D, np.linalg.inv(D), Ad, B)
    assert np.allclose(At, Ad)
    assert np.allclose(Bt, np.linalg.inv(D) @ B)


def test_constants_without_noise():
    A = np.array([[0.0, 1.0], [-2.0, 0.0]])
    p = sample_brownian(TimeGrid(1.0, 100), 1, 0)
    fs = fundamental_solution([np.zeros((2, 2))], p)
    x, yT = np.array([1.0, 0.0]), np.array([0.0, 0.5])
    c = steering_constants(fs, A, 0.5, x, yT, rule="literal")
    assert c.C1_star == pytest.approx(1.0)
    assert c.C2_star == pytest.approx(np.linalg.norm(A, 2))
    assert c.rho_tilde == pytest.approx((np.linalg.norm(A, 2) * 0.5 + np.linalg.norm(x - yT)) / 0.5)
    zero = steering_constants(fs, A, 0.5, np.zeros(2), np.zeros(2), rule="sufficient")
    assert zero.rho_tilde == 0.0


def test_constants_stable_under_grid_refinement():
    p = sample_brownian(TimeGrid(1.0, 100000), 1, 7)
    coarse = p.coarsen(10)
    x, yT = np.array([1.0]), np.array([0.2])
    fine_c = steering_constants(fundamental_solution([[[0.3]]], p), [[1.0]], 1.0, x, yT)
    coarse_c = steering_constants(fundamental_solution([[[0.3]]], coarse), [[1.0]], 1.0, x, yT)
    assert abs(fine_c.rho_tilde - coarse_c.rho_tilde) / fine_c.rho_tilde < 0.05


@settings(max_examples=30, deadline=None)
@given(st.floats(0.1, 10.0), st.sampled_from(["literal", "sufficient"]))
def test_gain_is_homogeneous(c, rule):
    p = sample_brownian(TimeGrid(1.0, 200), 1, 11)
    fs = fundamental_solution([[[0.3]]], p)
    x, yT = np.array([1.0]), np.array([0.4])
    base = steering_constants(fs, [[1.0]], 1.0, x, yT, rule=rule)
    scaled = steering_constants(fs, [[1.0]], 1.0, c * x, c * yT, rule=rule)
    assert scaled.rho_tilde == pytest.approx(c * base.rho_tilde, rel=1e-10)
    assert base.rho_tilde >= base.C2_star * np.linalg.norm(yT) / (base.gamma * base.C1_star) - 1e-12


def test_sufficient_gain_meets_reaching_inequality():
    for seed in range(5):
        p = sample_brownian(TimeGrid(1.0, 1000), 1, seed)
        c = steering_constants(fundamental_solution([[[0.5]]], p), [[1.0]], 1.0, [1.0], [0.3], rule="sufficient")
        assert c.reach_margin([1.0], [0.3]) >= -1e-9


def test_sliding_without_noise_or_drift():
    p = sample_brownian(TimeGrid(1.0, 10000), 1, 0)
    res = pathwise_steer(np.zeros((2, 2)), np.eye(2), [np.zeros((2, 2))], [1.0, 0.0], [0.0, 0.0], p)
    assert res.success and res.sufficiency_ok
    # constant-speed approach at rate rho: distance |x| - rho t before arrival
    rho = res.rho_used
    k = int(0.5 / rho / p.grid.dt)
    assert np.linalg.norm(res.y_path[k]) == pytest.approx(1.0 - rho * k * p.grid.dt, abs=1e-3)
    assert res.terminal_error < 1e-3


def test_already_at_target_without_drift():
    s = np.array([[0.2, 0.0], [0.0, -0.1]])
    p = sample_brownian(TimeGrid(1.0, 1000), 1, 4)
    x = np.array([1.0, -0.5])
    res = pathwise_steer(np.zeros((2, 2)), np.eye(2), [s], x, {"gamma_terminal_of": x}, p)
    assert np.allclose(res.y_T, x)
    assert np.allclose(res.y_path, x, atol=1e-12)
    assert res.success


def test_resolve_terminal_forms():
    p = sample_brownian(TimeGrid(1.0, 10), 1, 0)
    fs = fundamental_solution([np.eye(2) * 0.1], p)
    v = np.array([1.0, 2.0])
    assert np.allclose(resolve_terminal(v, fs, p), v)
    assert np.allclose(resolve_terminal({"X_T": v}, fs, p), v)
    assert np.allclose(resolve_terminal({"gamma_terminal_of": v}, fs, p), fs.terminal @ v)
    assert np.allclose(resolve_terminal(lambda path: v * path.d, fs, p), v)


def test_gbm_batch_succeeds():
    grid = TimeGrid(1.0, 2000)
    paths = [sample_brownian(grid, 1, 21, i) for i in range(20)]
    res = pathwise_steer_batch([[1.0]], [[1.0]], [[[0.3]]], [1.0], [0.2], paths)
    assert all(r.success for r in res)
    assert all(r.sufficiency_ok for r in res)


def test_literal_rule_warns_when_insufficient():
    p = sample_brownian(TimeGrid(1.0, 1000), 1, 0)
    with pytest.warns(RuntimeWarning):
        res = pathwise_steer([[1.0]], [[1.0]], [[[0.3]]], [1.0], [0.2], p, rule="literal")
    assert not res.sufficiency_ok and res.notes


def test_transformation_discrepancy_shrinks():
    ratios = []
    for steps in (1000, 10000):
        grid = TimeGrid(1.0, steps)
        paths = [sample_brownian(grid, 1, 31, i) for i in range(5)]
        disc = transformation_discrepancy([[1.0]], [[1.0]], [[[0.3]]], [1.0], [0.2], paths)
        ratios.append(disc.max())
    assert ratios[1] < ratios[0]


def test_adapted_bound_limits():
    grid = TimeGrid(1.0, 500)
    fss = [fundamental_solution([[[0.3]]], sample_brownian(grid, 1, 5, i)) for i in range(50)]
    x, yT = np.array([1.0]), np.array([0.2])
    consts = [steering_constants(f, [[1.0]], 1.0, x, yT, rule="sufficient") for f in fss]
    assert adapted_variant_bound(consts, 1e8, x, yT) < 1e-6
    assert adapted_variant_bound(consts, 1.0, np.zeros(1), np.zeros(1)) == 0.0
    values = [adapted_variant_bound(consts, r, x, yT) for r in (3.0, 6.0, 12.0)]
    assert values == sorted(values, reverse=True)


def test_adapted_bound_dominates_empirical_failure():
    P, grid = 2000, TimeGrid(1.0, 1000)
    fss = [fundamental_solution([[[0.3]]], sample_brownian(grid, 1, 3, i)) for i in range(P)]
    x, yT = np.array([1.0]), np.array([0.2])
    consts = [steering_constants(f, [[1.0]], 1.0, x, yT, rule="sufficient") for f in fss]
    rho = 12.0
    bound = adapted_variant_bound(consts, rho, x, yT)
    Gam = np.stack([f.gammas for f in fss])
    Ginv = np.stack([f.inverses for f in fss])
    y = integrate_transformed(Gam, Ginv, np.array([[[1.0]]]), np.eye(1), x, np.tile(yT, (P, 1)),
                              np.full(P, rho), np.full(P, np.nan), grid.dt)
    failure = 1 - (np.abs(y[:, :, 0] - yT[0]) <= 1e-3).any(axis=1).mean()
    assert bound < 1.0
    assert failure <= bound
