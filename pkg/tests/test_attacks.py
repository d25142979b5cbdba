import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advlab.attacks import (AttackSpec, average_robustness, carlini_wagner, deepfool, fgsm, lp_norm, pgd,
                            project_ball, random_ball, run_attack, steepest_direction)
from advlab.models import mlp

from oracles import (affine_binary_model, affine_margin, brute_force_l1_projection_2d, project_l1_bisection,
                     project_l2_analytic, project_linf_analytic)


def xent(model, x, y):
    logits = model.forward_logits(x)
    z = logits - logits.max(1, keepdims=True)
    return -(z[np.arange(len(y)), y] - np.log(np.exp(z).sum(1)))


# -- projections -------------------------------------------------------------------


def test_project_l2_example():
    np.testing.assert_allclose(project_ball(np.array([3.0, 4.0]), 2, 1.0), [0.6, 0.8])


def test_project_linf_example():
    np.testing.assert_allclose(project_ball(np.array([0.3, -0.7]), np.inf, 0.5), [0.3, -0.5])


def test_project_l1_example_against_grid():
    v = np.array([0.8, 0.4])
    out = project_ball(v, 1, 1.0)
    np.testing.assert_allclose(out, [0.7, 0.3], atol=1e-12)
    np.testing.assert_allclose(brute_force_l1_projection_2d(v, 1.0), [0.7, 0.3], atol=1e-4)


@pytest.mark.parametrize("p,oracle", [(1, project_l1_bisection), (2, project_l2_analytic),
                                      (np.inf, project_linf_analytic)])
def test_projection_matches_oracle(p, oracle):
    rng = np.random.default_rng(0)
    v = rng.normal(scale=rng.uniform(0.1, 3.0, (200, 1)), size=(200, 17))
    eps = 1.0
    out = project_ball(v, p, eps)
    for row, res in zip(v, out):
        np.testing.assert_allclose(res, oracle(row, eps), atol=1e-9)


def test_projection_inside_ball_is_identity():
    v = np.array([[0.1, -0.2, 0.05]])
    for p in (1, 2, np.inf):
        np.testing.assert_array_equal(project_ball(v, p, 1.0), v)


def test_projection_zero_radius():
    v = np.array([[0.3, -0.4]])
    for p in (1, 2, np.inf):
        np.testing.assert_array_equal(project_ball(v, p, 0.0), 0.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=12), st.floats(0, 5), st.sampled_from([1, 2, np.inf]))
def test_projection_lands_in_ball_and_is_idempotent(values, eps, p):
    v = np.array(values)
    out = project_ball(v, p, eps)
    assert lp_norm(out[None], p)[0] <= eps * (1 + 1e-12) + 1e-12
    np.testing.assert_allclose(project_ball(out, p, eps), out, atol=1e-12)


@pytest.mark.parametrize("p", [1, 2, np.inf])
def test_random_ball_draws_stay_inside(p):
    rngs = [np.random.default_rng([3, i]) for i in range(50)]
    draws = random_ball((50, 10), p, 0.3, rngs)
    assert np.all(lp_norm(draws, p) <= 0.3 + 1e-12)


def test_steepest_direction_shapes():
    g = np.array([[1.0, -2.0, 0.5]])
    d, _ = steepest_direction(g, np.inf)
    np.testing.assert_array_equal(d, [[1, -1, 1]])
    d, _ = steepest_direction(g, 1)
    np.testing.assert_array_equal(d, [[0, -1, 0]])
    d, _ = steepest_direction(g, 2)
    assert np.isclose(np.linalg.norm(d), 1.0)
    _, still = steepest_direction(np.zeros((2, 3)), 2)
    assert still.all()


# -- fgsm / pgd --------------------------------------------------------------------------


@pytest.fixture(scope="module")
def small_mlp():
    return mlp(6, (16,), num_classes=3, seed=4)


@pytest.fixture(scope="module")
def batch():
    rng = np.random.default_rng(1)
    return rng.random((40, 6)), rng.integers(0, 3, 40)


def test_fgsm_zero_budget(small_mlp, batch):
    x, y = batch
    for p in (1, 2, np.inf):
        adv = fgsm(small_mlp, x, y, AttackSpec("fgsm", p, 0.0))
        assert np.array_equal(adv.adversarials, x)


def test_fgsm_sign_step_example():
    model = affine_binary_model([1.0, -2.0], 0.0)
    x = np.array([[0.5, 0.5]])
    adv = fgsm(model, x, np.array([0]), AttackSpec("fgsm", np.inf, 0.1))
    np.testing.assert_allclose(adv.adversarials - x, [[0.1, -0.1]], atol=1e-15)


def test_fgsm_linf_increases_loss_on_linear_models():
    rng = np.random.default_rng(2)
    for trial in range(20):
        w = rng.normal(size=5)
        model = affine_binary_model(w, rng.normal())
        x = rng.uniform(0.2, 0.8, (10, 5))
        y = rng.integers(0, 2, 10)
        eps = rng.uniform(0.01, 0.2)
        adv = fgsm(model, x, y, AttackSpec("fgsm", np.inf, eps))
        assert np.all(xent(model, adv.adversarials, y) >= xent(model, x, y) - 1e-12)


def test_fgsm_zero_gradient_flagged():
    model = affine_binary_model([0.0, 0.0], 1.0)
    adv = fgsm(model, np.array([[0.5, 0.5]]), np.array([1]), AttackSpec("fgsm", 2, 0.1))
    assert adv.stationary[0]
    assert np.array_equal(adv.adversarials, [[0.5, 0.5]])


def test_pgd_single_step_equals_fgsm(small_mlp, batch):
    x, y = batch
    a = pgd(small_mlp, x, y, AttackSpec("pgd", np.inf, 0.1, steps=1, step_size=0.1, random_start=False))
    b = fgsm(small_mlp, x, y, AttackSpec("fgsm", np.inf, 0.1))
    assert np.array_equal(a.adversarials, b.adversarials)


def test_pgd_zero_budget(small_mlp, batch):
    x, y = batch
    for p in (1, 2, np.inf):
        adv = pgd(small_mlp, x, y, AttackSpec("pgd", p, 0.0, steps=7))
        assert np.array_equal(adv.adversarials, x)


@settings(max_examples=25, deadline=None)
@given(st.sampled_from([1, 2, np.inf]), st.floats(0.0, 2.0), st.integers(1, 6), st.booleans(),
       st.integers(0, 10_000))
def test_pgd_box_and_budget_invariants(p, eps, steps, start, seed):
    model = mlp(6, (8,), num_classes=3, seed=seed % 17)
    rng = np.random.default_rng(seed)
    x = rng.random((12, 6))
    y = rng.integers(0, 3, 12)
    adv = pgd(model, x, y, AttackSpec("pgd", p, eps, steps=steps, random_start=start, seed=seed))
    assert adv.adversarials.min() >= 0.0 and adv.adversarials.max() <= 1.0
    assert np.all(lp_norm(adv.adversarials - x, p) <= eps + 1e-9)
    f = fgsm(model, x, y, AttackSpec("fgsm", p, eps))
    assert f.adversarials.min() >= 0.0 and f.adversarials.max() <= 1.0
    assert np.all(lp_norm(f.adversarials - x, p) <= eps + 1e-9)


def test_pgd_deterministic_and_chunk_invariant(small_mlp, batch):
    x, y = batch
    spec = AttackSpec("pgd", 2, 0.5, steps=5, seed=11)
    a = pgd(small_mlp, x, y, spec)
    b = pgd(small_mlp, x, y, spec)
    assert np.array_equal(a.adversarials, b.adversarials)
    half = pgd(small_mlp, x[20:], y[20:], spec, indices=np.arange(20, 40))
    assert np.array_equal(half.adversarials, a.adversarials[20:])


def test_success_flag_definition(small_mlp, batch):
    x, y = batch
    adv = pgd(small_mlp, x, y, AttackSpec("pgd", np.inf, 0.3, steps=5))
    expect = (adv.clean_pred == y) & (adv.adv_pred != y)
    assert np.array_equal(adv.success, expect)


def test_attack_spec_validation():
    with pytest.raises(ValueError):
        AttackSpec("bim")
    with pytest.raises(ValueError):
        AttackSpec("pgd", 3, 0.1)
    with pytest.raises(ValueError):
        AttackSpec("pgd", 2, -0.1)
    with pytest.raises(ValueError):
        AttackSpec("pgd", 2, 0.1, steps=0)
    assert AttackSpec("pgd", "Linf", 0.1, steps=4).alpha == pytest.approx(2.5 * 0.1 / 4)
    spec = AttackSpec("pgd", "l2", 0.5, steps=3, seed=9)
    assert AttackSpec.from_dict(spec.to_dict()) == spec


# -- Carlini-Wagner --------------------------------------------------------------------------


def test_cw_already_misclassified_returns_zero_perturbation():
    model = affine_binary_model([1.0, 1.0], -0.5)
    x = np.array([[0.6, 0.6]])  # predicted class 1
    adv = carlini_wagner(model, x, np.array([0]), AttackSpec("cw", 2, steps=20, cw_penalty=1.0))
    assert lp_norm(adv.adversarials - x, 2)[0] == 0.0


def test_cw_without_penalty_returns_input():
    model = affine_binary_model([1.0, -1.0], 0.0)
    rng = np.random.default_rng(3)
    x = rng.uniform(0.1, 0.9, (5, 2))
    y = model.predict(x)
    adv = carlini_wagner(model, x, y, AttackSpec("cw", 2, steps=30, cw_penalty=0.0))
    assert np.array_equal(adv.adversarials, x)


def test_cw_linear_model_reaches_margin_distance():
    rng = np.random.default_rng(4)
    for _ in range(5):
        w = rng.normal(size=4)
        x = rng.uniform(0.4, 0.6, (1, 4))
        b = -(x @ w)[0] + np.sign(rng.normal()) * rng.uniform(0.05, 0.15) * np.linalg.norm(w)
        model = affine_binary_model(w, b)
        y = model.predict(x)
        adv = carlini_wagner(model, x, y, AttackSpec("cw", 2, steps=300, step_size=0.005, cw_penalty=10.0))
        assert adv.success[0]
        dist = lp_norm(adv.adversarials - x, 2)[0]
        assert abs(dist - affine_margin(w, b, x)[0]) <= 0.05 * affine_margin(w, b, x)[0]


def test_cw_box_constraint(small_mlp, batch):
    x, y = batch
    adv = carlini_wagner(small_mlp, x, y, AttackSpec("cw", 2, steps=30, step_size=0.05, cw_penalty=5.0))
    assert adv.adversarials.min() >= 0.0 and adv.adversarials.max() <= 1.0


# -- DeepFool -----------------------------------------------------------------------------------


def test_deepfool_skips_misclassified_inputs():
    model = affine_binary_model([1.0, 1.0], -0.5)
    x = np.array([[0.6, 0.6]])
    adv = deepfool(model, x, AttackSpec("deepfool", 2, steps=10), y=np.array([0]))
    assert adv.iterations[0] == 0
    assert np.array_equal(adv.adversarials, x)


def test_deepfool_affine_is_exact_in_one_step():
    rng = np.random.default_rng(5)
    for eta in (0.0, 0.02):
        for _ in range(10):
            w = rng.normal(size=6)
            x = rng.uniform(0.4, 0.6, (1, 6))
            b = -(x @ w)[0] + rng.uniform(-0.2, 0.2) * np.linalg.norm(w)
            model = affine_binary_model(w, b)
            adv = deepfool(model, x, AttackSpec("deepfool", 2, steps=10, overshoot=eta))
            assert adv.iterations[0] == 1 and adv.success[0]
            expect = (1 + eta) * affine_margin(w, b, x)[0]
            assert abs(adv.norms["l2"][0] - expect) <= 1e-6 * expect


def test_deepfool_on_boundary_needs_tiny_step():
    model = affine_binary_model([1.0, -1.0], 0.0)
    x = np.array([[0.5, 0.5]])
    adv = deepfool(model, x, AttackSpec("deepfool", 2, steps=5, overshoot=0.0))
    assert adv.success[0]
    assert adv.norms["l2"][0] < 1e-6


def test_deepfool_multiclass_flips_prediction(small_mlp, batch):
    x, _ = batch
    adv = deepfool(small_mlp, x, AttackSpec("deepfool", 2, steps=50))
    assert adv.success.mean() > 0.9
    assert np.all(adv.adv_pred[adv.success] != adv.clean_pred[adv.success])
    assert adv.adversarials.min() >= 0.0 and adv.adversarials.max() <= 1.0


def test_run_attack_dispatch(small_mlp, batch):
    x, y = batch
    for spec in (AttackSpec("fgsm", 2, 0.1), AttackSpec("pgd", 1, 0.5, steps=2),
                 AttackSpec("cw", 2, steps=3), AttackSpec("deepfool", 2, steps=3)):
        assert run_attack(small_mlp, x, y, spec).adversarials.shape == x.shape


# -- average robustness ----------------------------------------------------------------------------


def test_average_robustness_constant_ratio():
    # boundary through the origin: the DeepFool step is the projection of x onto w
    w = np.array([1.0, 0.0])
    rng = np.random.default_rng(6)
    x = np.array([[0.1, np.sqrt(0.99)]]) * rng.uniform(0.3, 1.0, (8, 1))
    model = affine_binary_model(w, 0.0)
    rho = average_robustness(model, x, AttackSpec("deepfool", 2, steps=5, overshoot=0.0))
    assert rho == pytest.approx(0.1, rel=1e-6)


def test_average_robustness_single_sample():
    x = np.full((1, 64), 0.5)  # ||x||_2 = 4
    w = np.full(64, 1 / 8.0)  # unit norm
    model = affine_binary_model(w, 1.0 - w @ x[0])
    rho = average_robustness(model, x, AttackSpec("deepfool", 2, steps=5, overshoot=0.0))
    assert rho == pytest.approx(0.25, rel=1e-6)


def test_average_robustness_matches_affine_oracle_on_gaussian_data():
    rng = np.random.default_rng(7)
    w = rng.normal(size=10)
    x = np.clip(rng.normal(0.5, 0.08, (200, 10)), 0, 1)
    b = -(x.mean(0) @ w)
    model = affine_binary_model(w, b)
    rho = average_robustness(model, x, AttackSpec("deepfool", 2, steps=10, overshoot=0.0))
    oracle = np.mean(affine_margin(w, b, x) / np.linalg.norm(x, axis=1))
    assert abs(rho - oracle) <= 0.05 * oracle


def test_average_robustness_skips_zero_images():
    model = affine_binary_model([1.0, 1.0], -0.5)
    x = np.array([[0.0, 0.0], [0.1, 0.1]])
    rep = average_robustness(model, x, AttackSpec("deepfool", 2, steps=5, overshoot=0.0), return_report=True)
    assert rep.skipped_zero == 1 and rep.used == 1
    with pytest.raises(ValueError):
        average_robustness(model, np.zeros((0, 2)), AttackSpec("deepfool", 2))
