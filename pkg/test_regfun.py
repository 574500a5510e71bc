import numpy as np
import pytest
from numpy.testing import assert_allclose

from banach import DomainError, SpaceSpec, Tolerances
from linop import diagonal, dense
from regfun import (
    RegSpec,
    SourceConditionError,
    SubgradientChoice,
    SubgradientError,
    check_source_condition,
    conjugate_subgradient,
    dual_bregman,
    fenchel_young_gap,
    is_subgradient,
    primal_bregman,
    reg_conjugate_eval,
    reg_eval,
    subgradient,
    sym_bregman,
)


def quadratic(dim=2):
    return RegSpec.power_norm(SpaceSpec(dim, 2.0), 2.0)


def test_regspec_validation():
    with pytest.raises(DomainError):
        RegSpec.power_norm(SpaceSpec(2, 2.0), 1.0)
    with pytest.raises(DomainError):
        RegSpec('lasso', SpaceSpec(2, 2.0))
    assert quadratic().is_quadratic
    assert not RegSpec.power_norm(SpaceSpec(2, 3.0), 2.0).is_quadratic


def test_reg_eval_examples():
    assert reg_eval(quadratic(), [3.0, 4.0]) == pytest.approx(12.5)
    entropy = RegSpec.neg_entropy(SpaceSpec(3, 2.0))
    assert reg_eval(entropy, [1.0, 1.0, 1.0]) == 0.0
    assert reg_eval(RegSpec.power_norm(SpaceSpec(3, 3.0), 3.0), [1.0, -2.0, 2.0]) == pytest.approx(17 / 3)


def test_neg_entropy_domain():
    entropy = RegSpec.neg_entropy(SpaceSpec(2, 2.0))
    assert reg_eval(entropy, [-0.1, 1.0]) == np.inf
    # 0 ln 0 = 0
    assert reg_eval(entropy, [0.0, 1.0]) == pytest.approx(1.0)


def test_reg_conjugate_eval_examples():
    assert reg_conjugate_eval(quadratic(), [3.0, 4.0]) == pytest.approx(12.5)
    assert reg_conjugate_eval(RegSpec.neg_entropy(SpaceSpec(2, 2.0)), [0.0, 0.0]) == 0.0
    cubic = RegSpec.power_norm(SpaceSpec(2, 3.0), 3.0)
    assert reg_conjugate_eval(cubic, [1.0, 1.0]) == pytest.approx(4.0 / 3.0)


def test_conjugate_matches_grid_supremum():
    cubic = RegSpec.power_norm(SpaceSpec(2, 3.0), 3.0)
    xi = np.array([1.0, 1.0])
    g = np.linspace(0.0, 1.5, 601)
    X1, X2 = np.meshgrid(g, g)
    values = xi[0] * X1 + xi[1] * X2 - (np.abs(X1) ** 3 + np.abs(X2) ** 3) / 3
    assert np.max(values) == pytest.approx(reg_conjugate_eval(cubic, xi), abs=1e-4)


def test_subgradient_examples():
    assert_allclose(subgradient(quadratic(), [3.0, 4.0]), [3.0, 4.0])
    entropy = RegSpec.neg_entropy(SpaceSpec(2, 2.0))
    xi = subgradient(entropy, [1.0, np.e])
    assert_allclose(xi, [0.0, 1.0], atol=1e-15)
    assert is_subgradient(entropy, [1.0, np.e], xi)
    assert_allclose(subgradient(quadratic(), [0.0, 0.0]), [0.0, 0.0])


def test_entropy_has_no_subgradient_on_boundary():
    with pytest.raises(SubgradientError):
        subgradient(RegSpec.neg_entropy(SpaceSpec(2, 2.0)), [0.0, 1.0])


@pytest.mark.parametrize("R", [
    RegSpec.power_norm(SpaceSpec(5, 1.5), 2.0),
    RegSpec.power_norm(SpaceSpec(5, 3.0), 1.7),
    RegSpec.neg_entropy(SpaceSpec(5, 2.0)),
])
def test_fenchel_young(R):
    rng = np.random.default_rng(21)
    for _ in range(20):
        x = rng.uniform(0.1, 2.0, size=5) if R.kind == 'neg_entropy' else rng.standard_normal(5)
        xi = rng.standard_normal(5)
        assert fenchel_young_gap(R, x, xi) >= -1e-12
        assert is_subgradient(R, x, subgradient(R, x))
        assert_allclose(conjugate_subgradient(R, subgradient(R, x)), x, rtol=1e-10)


def test_biconjugate_on_a_slice():
    R = RegSpec.power_norm(SpaceSpec(1, 2.0), 3.0)
    x = np.array([0.7])
    sup = max(float(xi * x[0]) - reg_conjugate_eval(R, [xi]) for xi in np.linspace(-3, 3, 6001))
    assert sup <= reg_eval(R, x) + 1e-12
    assert sup == pytest.approx(reg_eval(R, x), abs=1e-6)


def test_primal_bregman_examples():
    R = quadratic()
    assert primal_bregman(R, [0.3, 0.4], [0.3, 0.4], [0.3, 0.4]) == 0.0
    assert primal_bregman(R, [0.0, 1.0], [1.0, 0.0], [1.0, 0.0]) == pytest.approx(1.0)
    entropy = RegSpec.neg_entropy(SpaceSpec(1, 2.0))
    assert primal_bregman(entropy, [np.e], [1.0], [0.0]) == pytest.approx(1.0)


def test_primal_bregman_rejects_wrong_subgradient():
    with pytest.raises(SubgradientError):
        primal_bregman(quadratic(), [0.0, 1.0], [1.0, 0.0], [0.0, 0.0])


def test_subgradient_choice_checks_membership():
    R = quadratic()
    choice = SubgradientChoice.designated(R, [1.0, -2.0])
    assert_allclose(choice.xi, [1.0, -2.0])
    with pytest.raises(SubgradientError):
        SubgradientChoice(np.array([1.0, 0.0]), np.array([0.0, 1.0]), R)


def test_is_subgradient_follows_tolerances(monkeypatch):
    R = quadratic()
    x, xi = [1.0, 0.0], [1.0, 1e-3]
    assert not is_subgradient(R, x, xi)
    assert is_subgradient(R, x, xi, Tolerances(abs_tol=1e-6, rel_tol=0.0))
    monkeypatch.setenv('TIKRATES_ABS_TOL', '1e-6')
    monkeypatch.setenv('TIKRATES_REL_TOL', '0')
    assert is_subgradient(R, x, xi, Tolerances.from_env())


def test_quadratic_bregman_is_half_squared_distance():
    rng = np.random.default_rng(22)
    R = quadratic(6)
    for _ in range(10):
        x, xt = rng.standard_normal(6), rng.standard_normal(6)
        assert primal_bregman(R, xt, x, x) == pytest.approx(0.5 * np.sum((xt - x) ** 2), rel=1e-12)


def test_sym_bregman():
    R = quadratic()
    assert sym_bregman(R, [1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [1.0, 0.0]) == 0.0
    assert sym_bregman(R, [1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]) == pytest.approx(2.0)
    rng = np.random.default_rng(23)
    Rp = RegSpec.power_norm(SpaceSpec(4, 3.0), 2.5)
    for _ in range(10):
        x, xt = rng.standard_normal(4), rng.standard_normal(4)
        xi, xit = subgradient(Rp, x), subgradient(Rp, xt)
        total = primal_bregman(Rp, xt, x, xi) + primal_bregman(Rp, x, xt, xit)
        assert sym_bregman(Rp, x, xt, xi, xit) == pytest.approx(total, rel=1e-10, abs=1e-12)


def test_dual_bregman_examples():
    A = diagonal([1.0, 0.5])
    R = quadratic()
    omega_true = np.array([1.0, 1.0])
    x_true = A.adjoint(omega_true)
    assert dual_bregman(R, A, omega_true, omega_true, x_true) == 0.0
    assert dual_bregman(R, A, omega_true + 2.0, omega_true, x_true) == pytest.approx(2.5)


def test_dual_bregman_equals_reversed_primal():
    rng = np.random.default_rng(24)
    A = dense(rng.standard_normal((4, 3)), r_x=3.0, r_y=2.0)
    R = RegSpec.power_norm(A.domain, 2.0)
    omega_true = rng.standard_normal(4)
    x_true = conjugate_subgradient(R, A.adjoint(omega_true))
    omega = rng.standard_normal(4)
    x = conjugate_subgradient(R, A.adjoint(omega))
    assert dual_bregman(R, A, omega, omega_true, x_true) == pytest.approx(
        primal_bregman(R, x_true, x, A.adjoint(omega)), rel=1e-8)


def test_source_condition_check():
    A = diagonal([1.0, 0.5])
    R = quadratic()
    with pytest.raises(SourceConditionError):
        check_source_condition(R, A, [1.0, 1.0], [0.0, 0.0])
    assert_allclose(check_source_condition(R, A, [1.0, 1.0], [1.0, 0.5]), [1.0, 0.5])
