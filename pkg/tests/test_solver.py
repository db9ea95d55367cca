import numpy as np
import pytest
from scipy import linalg

from jmcr.equations import psi_beta, q_loss_from_eps
from jmcr.errors import CollinearBasisError, ConvergenceError, InvalidInputError
from jmcr.model import Dataset, ParameterState, correlation_matrix, sigma_matrix
from jmcr.simulation import generate, make_design
from jmcr.solver import (
    SolverConfig,
    check_A_plus,
    eigen_clip,
    fit,
    solve_alpha_admm,
    solve_alpha_unconstrained,
    update_beta,
    update_dispersion,
)

from oracles import bisect_boundary, eigen_interval


def compound_symmetry(p, c=1.0):
    return c * (np.ones((p, p)) - np.eye(p))


def tridiagonal(p, c=1.0):
    return c * (np.eye(p, k=1) + np.eye(p, k=-1))


def profile_grid_q(eps, W, lo, hi, m=200001):
    """Minimum of Q over rho on a grid of the open interval, alpha_0 profiled out."""
    n = eps.shape[0]
    S = eps.T @ eps / n
    rho = np.linspace(lo, hi, m)[1:-1]
    best = np.inf
    for chunk in np.array_split(rho, 50):
        R = np.eye(W.shape[0])[None] + chunk[:, None, None] * W[None]
        a0 = np.einsum("kij,ij->k", R, S) / np.einsum("kij,kij->k", R, R)
        a0 = np.maximum(a0, 0.0)
        for r, a in zip(chunk, a0):
            best = min(best, q_loss_from_eps(eps, [a, a * r], W[None]) / n)
    return best


# --------------------------------------------------------------------------
# parameter space


def test_check_A_plus_examples():
    W = compound_symmetry(4)
    res = check_A_plus([1.0, 0.0], W[None])
    assert res.inside and res.min_eig == pytest.approx(1.0)
    assert check_A_plus([1.0, 0.99], W[None]).inside
    assert not check_A_plus([1.0, 1.01], W[None]).inside
    assert check_A_plus([1.0, -0.33], W[None]).inside
    assert not check_A_plus([1.0, -0.34], W[None]).inside
    T = tridiagonal(3)
    assert check_A_plus([1.0, 0.7], T[None]).inside
    assert not check_A_plus([1.0, 0.72], T[None]).inside
    lo, hi = eigen_interval(T)
    assert (lo, hi) == pytest.approx((-0.70711, 0.70711), abs=1e-5)


@pytest.mark.parametrize("p", [3, 4, 10])
@pytest.mark.parametrize("c", [0.5, 1.0, 2.0])
def test_parameter_space_intervals(p, c):
    for W, closed in [
        (compound_symmetry(p, c), (-1 / ((p - 1) * c), 1 / c)),
        (tridiagonal(p, c), (-0.5 / (c * abs(np.cos(p * np.pi / (p + 1)))),
                             0.5 / (c * abs(np.cos(p * np.pi / (p + 1)))))),
    ]:
        oracle = eigen_interval(W)
        np.testing.assert_allclose(oracle, closed, atol=1e-12)

        def inside(r, W=W):
            return check_A_plus([1.0, r], W[None]).inside

        lo = bisect_boundary(inside, oracle[0] - 1.0, 0.0)
        hi = bisect_boundary(inside, 0.0, oracle[1] + 1.0)
        assert lo == pytest.approx(closed[0], abs=1e-6)
        assert hi == pytest.approx(closed[1], abs=1e-6)


# --------------------------------------------------------------------------
# alpha step


def test_solve_alpha_unconstrained_examples():
    rng = np.random.default_rng(0)
    eps = rng.standard_normal((5, 3))
    np.testing.assert_allclose(solve_alpha_unconstrained(np.zeros((0, 3, 3)), eps), [np.sum(eps**2) / 15])

    # rows +-sqrt(3) e_j average to eps_i eps_i' = I
    eps = np.vstack([np.eye(3), -np.eye(3)]) * np.sqrt(3.0)
    basis = np.stack([compound_symmetry(3), tridiagonal(3)])
    basis[1] = basis[1] + 0.3 * compound_symmetry(3)
    np.testing.assert_allclose(solve_alpha_unconstrained(basis, eps), [1.0, 0.0, 0.0], atol=1e-14)


def test_solve_alpha_unconstrained_hand_system():
    rng = np.random.default_rng(1)
    eps = rng.standard_normal((2, 3))
    W = np.array([[0.0, 0.4, 1.0], [0.4, 0.0, 0.2], [1.0, 0.2, 0.0]])
    full = [np.eye(3), W]
    G = np.array([[2 * np.trace(a @ b) for b in full] for a in full])
    v = np.array([sum(e @ M @ e for e in eps) for M in full])
    np.testing.assert_allclose(solve_alpha_unconstrained(W[None], eps), np.linalg.solve(G, v), rtol=1e-12)


def test_collinear_basis_names_members():
    W = compound_symmetry(3)
    with pytest.raises(CollinearBasisError) as info:
        solve_alpha_unconstrained(np.stack([W, 2 * W]), np.ones((4, 3)))
    assert info.value.dependent == [1, 2]


def test_eigen_clip_example():
    Q = linalg.qr(np.random.default_rng(2).standard_normal((2, 2)))[0]
    M = Q @ np.diag([2.0, -0.5]) @ Q.T
    np.testing.assert_allclose(np.linalg.eigvalsh(eigen_clip(M, 1e-4)), [1e-4, 2.0], atol=1e-12)


def test_admm_matches_unconstrained_inside():
    rng = np.random.default_rng(3)
    basis = np.stack([compound_symmetry(5, 0.3), tridiagonal(5, 0.5)])
    eps = rng.standard_normal((200, 5))
    a = solve_alpha_unconstrained(basis, eps)
    assert check_A_plus(a, basis).inside
    res = solve_alpha_admm(basis, eps)
    assert np.max(np.abs(res.alpha - a)) < 1e-6


def _rank_one_eps(n, p, seed):
    # every residual vector is proportional to (1, ..., 1): the unconstrained
    # compound-symmetry estimate sits exactly on the boundary rho = 1 / c
    s = np.random.default_rng(seed).standard_normal(n)
    return s[:, None] * np.ones((1, p))


def test_admm_compound_symmetry_boundary():
    p, c = 4, 1.0
    W = compound_symmetry(p, c)
    eps = _rank_one_eps(50, p, 4)
    a = solve_alpha_unconstrained(W[None], eps)
    assert a[1] / a[0] == pytest.approx(1 / c)
    assert not check_A_plus(a, W[None]).inside
    res = solve_alpha_admm(W[None], eps)
    rho = res.alpha[1] / res.alpha[0]
    lo, hi = eigen_interval(W)
    assert lo < rho < hi
    assert np.linalg.eigvalsh(sigma_matrix(res.alpha, W[None]))[0] >= 1e-4 - 1e-6
    q = q_loss_from_eps(eps, res.alpha, W[None]) / eps.shape[0]
    assert q <= profile_grid_q(eps, W, lo, hi) + 1e-4


def test_admm_tridiagonal_outside():
    W = tridiagonal(3)
    eps = _rank_one_eps(40, 3, 5)
    a = solve_alpha_unconstrained(W[None], eps)
    assert a[1] / a[0] == pytest.approx(1.0)
    assert not check_A_plus(a, W[None]).inside
    res = solve_alpha_admm(W[None], eps)
    lo, hi = eigen_interval(W)
    assert lo < res.alpha[1] / res.alpha[0] < hi
    q = q_loss_from_eps(eps, res.alpha, W[None]) / eps.shape[0]
    assert q <= profile_grid_q(eps, W, lo, hi) + 1e-4


def test_admm_primal_residual_monotone_after_burn_in():
    W = tridiagonal(3)
    eps = _rank_one_eps(40, 3, 5)
    hist = np.array(solve_alpha_admm(W[None], eps).history)
    primal = hist[10:, 0]
    assert np.all(np.diff(primal) <= 1e-12 + 1e-9 * primal[:-1])


def test_admm_nonconvergence_carries_history():
    W = tridiagonal(3)
    with pytest.raises(ConvergenceError) as info:
        solve_alpha_admm(W[None], _rank_one_eps(40, 3, 5), SolverConfig(max_admm=3))
    assert len(info.value.history) == 3


# --------------------------------------------------------------------------
# dispersion


def test_dispersion_closed_forms():
    rng = np.random.default_rng(6)
    Y = rng.poisson(3.0, (50, 2)).astype(float)
    ds = Dataset(Y, np.ones((50, 1)), np.zeros((0, 2, 2)))
    st = ParameterState(np.log([[2.0], [4.0]]), [1.0], [1.0, 1.0])
    mu = np.array([2.0, 4.0])
    phi, bound = update_dispersion(ds, ds.spec("log", "proportional"), st)
    np.testing.assert_allclose(phi, np.mean((Y - mu) ** 2 / mu, axis=0), rtol=1e-12)
    assert bound == []
    stg = ParameterState([[2.0], [4.0]], [1.0], [1.0, 1.0])
    phi, _ = update_dispersion(ds, ds.spec("identity", "constant"), stg)
    np.testing.assert_allclose(phi, np.mean((Y - mu) ** 2, axis=0), rtol=1e-12)


def test_dispersion_quadratic_bisection_oracle():
    rng = np.random.default_rng(7)
    mu = np.exp(rng.normal(1.0, 0.5, 200))
    Y = rng.negative_binomial(2.0, 2.0 / (2.0 + mu)).astype(float)
    X = np.column_stack([np.ones(200), np.log(mu) - 1.0])
    ds = Dataset(np.column_stack([Y, Y[::-1]]), X, np.zeros((0, 2, 2)))
    st = ParameterState([[1.0, 1.0], [1.0, 0.0]], [1.0], [1.0, 1.0])
    phi, _ = update_dispersion(ds, ds.spec("log", "quadratic"), st)
    m = np.exp(X @ np.array([[1.0, 1.0], [1.0, 0.0]]).T)
    for j in range(2):
        r2 = (ds.Y[:, j] - m[:, j]) ** 2
        a, b = 1e-8, 1e8
        for _ in range(200):
            mid = np.sqrt(a * b) if b / a > 4 else 0.5 * (a + b)
            if np.mean(r2 / (m[:, j] + mid * m[:, j] ** 2)) > 1:
                a = mid
            else:
                b = mid
        assert phi[j] == pytest.approx(0.5 * (a + b), abs=1e-8)


def test_dispersion_boundary_flag():
    Y = np.array([[1.0, 5.0], [1.0, 5.0], [1.0, 5.0]])
    ds = Dataset(Y, np.ones((3, 1)), np.zeros((0, 2, 2)))
    st = ParameterState([[0.0], [np.log(5.0)]], [1.0], [1.0, 1.0])
    phi, bound = update_dispersion(ds, ds.spec("log", "quadratic"), st, SolverConfig(phi_min=1e-6))
    assert bound == [0, 1] and np.all(phi == 1e-6)


# --------------------------------------------------------------------------
# beta step and full fit


def _gaussian_k0(seed=8, n=60, p=3, d=3):
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), rng.standard_normal((n, d - 1))])
    Y = X @ rng.standard_normal((d, p)) + rng.standard_normal((n, p))
    return Dataset(Y, X, np.zeros((0, p, p)))


def test_update_beta_gaussian_one_step():
    ds = _gaussian_k0()
    ols = np.linalg.lstsq(ds.X, ds.Y, rcond=None)[0].T
    st = ParameterState(np.random.default_rng(9).standard_normal((3, 3)) * 10, [1.0], np.ones(3))
    beta = update_beta(ds, ds.spec("identity", "constant"), st)
    np.testing.assert_allclose(beta, ols, atol=1e-10)
    again = update_beta(ds, ds.spec("identity", "constant"), st.with_(beta=beta))
    np.testing.assert_allclose(again, beta, atol=1e-12)


def test_update_beta_poisson_monotone():
    design = make_design("poisson", 200, 5, d=3, K=2, seed=1)
    ds = generate(design, np.random.default_rng(0))
    spec = design.spec()
    st = ParameterState(np.zeros((5, 3)), np.r_[1.0, design.rho0], np.ones(5))
    norms = []
    for _ in range(6):
        norms.append(np.linalg.norm(psi_beta(ds, spec, st)))
        st = st.with_(beta=update_beta(ds, spec, st))
    assert np.all(np.diff(norms[:6]) < 0)


def test_fit_gaussian_k0_closed_form():
    ds = _gaussian_k0()
    res = fit(ds, ds.spec("identity", "constant"), SolverConfig(estimate_phi=False))
    ols = np.linalg.lstsq(ds.X, ds.Y, rcond=None)[0].T
    resid = ds.Y - ds.X @ ols.T
    assert res.converged and res.outer_iters <= 3
    np.testing.assert_allclose(res.state.beta, ols, atol=1e-8)
    assert res.state.alpha[0] == pytest.approx(np.mean(resid**2), abs=1e-8)


def test_fit_independence_consistency():
    errs = []
    for n in (100, 1600):
        design = make_design("poisson", n, 6, d=2, K=2, seed=2, rho0=[0.0, 0.0])
        ds = generate(design, np.random.default_rng([2, n]))
        res = fit(ds, design.spec())
        errs.append(np.max(np.abs(res.state.rho)))
    assert errs[1] < errs[0] and errs[1] < 0.05


@pytest.mark.parametrize("family", ["gaussian", "bernoulli", "poisson", "negbin"])
def test_fit_output_validity_and_fixed_point(family):
    design = make_design(family, 150, 8, seed=3)
    ds = generate(design, np.random.default_rng(3))
    cfg = SolverConfig()
    res = fit(ds, design.spec(), cfg)
    assert res.converged
    R = correlation_matrix(res.state.rho, ds.basis)
    np.linalg.cholesky(R)
    assert np.max(np.abs(R - np.eye(ds.p))) <= 1.0
    assert res.psi_norms[0] < 10 * cfg.tol_outer * res.psi_scale
    assert res.psi_norms[1] < 10 * cfg.tol_outer * ds.n * ds.p


def test_fit_is_deterministic():
    design = make_design("negbin", 120, 6, seed=4)
    ds = generate(design, np.random.default_rng(4))
    a, b = fit(ds, design.spec()), fit(ds, design.spec())
    assert np.array_equal(a.state.vartheta, b.state.vartheta)
    assert np.array_equal(a.state.phi, b.state.phi)
    assert a.history == b.history


def test_fit_non_convergence_is_reported():
    design = make_design("poisson", 100, 5, seed=5)
    ds = generate(design, np.random.default_rng(5))
    res = fit(ds, design.spec(), SolverConfig(max_outer=1, tol_outer=1e-14))
    assert not res.converged and "no convergence" in res.message


def test_fit_rejects_invalid_basis():
    ds = _gaussian_k0()
    bad = Dataset(ds.Y, ds.X, np.eye(3)[None])
    with pytest.raises(InvalidInputError, match="nonzero diagonal"):
        fit(bad, bad.spec("identity", "constant"))


def test_fit_fixed_alpha():
    design = make_design("poisson", 100, 5, seed=6)
    ds = generate(design, np.random.default_rng(6))
    res = fit(ds, design.spec(), SolverConfig(fixed_alpha=(1.0,) + (0.0,) * design.K))
    assert res.converged and np.all(res.state.rho == 0)


def test_solver_config_validation():
    with pytest.raises(InvalidInputError):
        SolverConfig(gamma=0.0)
    with pytest.raises(InvalidInputError):
        SolverConfig(nu=-1.0)


def test_beta_stays_put_on_the_floor():
    # a replicate whose first alpha update lands on the nu floor; minimising
    # ||psi_beta|| there used to walk beta far from the truth
    design = make_design("poisson", 200, 10, reps=200, seed=10, rho_range=(0.3, 0.5))
    ds = generate(design, np.random.default_rng([design.seed, 82]))
    cfg = SolverConfig()
    res = fit(ds, design.spec(), cfg)
    assert not res.unconstrained_in_A_plus
    assert res.min_eig_R >= cfg.nu / 2
    assert np.mean((res.state.beta - design.beta0) ** 2) < 0.02
    assert not res.phi_at_bound
