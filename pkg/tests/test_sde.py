import math

import mpmath
import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from degradiff.errors import ConfigurationError, DivergenceError
from degradiff.sde import (
    SdeParams,
    complex_normal,
    diffusion_coeff,
    dsm_loss,
    dump_trajectory,
    gaussian_score,
    load_trajectory,
    marginal_std,
    mean_weight,
    perturbation_kernel,
    reverse_ode_sampler,
    reverse_pc_sampler,
    sample_perturbed,
)

from oracles import euler_maruyama_moments, kernel_moments_by_quadrature

P = SdeParams()


def c128(*vals):
    return torch.tensor(vals, dtype=torch.complex128)


# -- schedule ---------------------------------------------------------------


def test_diffusion_coeff_endpoints():
    k = math.sqrt(2 * math.log(10))
    assert math.isclose(diffusion_coeff(0.0, P), 0.05 * k, rel_tol=1e-14)
    assert math.isclose(diffusion_coeff(1.0, P), 0.5 * k, rel_tol=1e-14)


def test_diffusion_coeff_midpoint_high_precision():
    mpmath.mp.dps = 30
    oracle = mpmath.mpf("0.05") * mpmath.sqrt(10) * mpmath.sqrt(2 * mpmath.log(10))
    assert abs(diffusion_coeff(0.5, P) - float(oracle)) < 1e-12
    assert abs(diffusion_coeff(0.5, P) - 0.33936) < 1e-4


def test_diffusion_coeff_increasing():
    ts = np.linspace(0, 1, 101)
    g = diffusion_coeff(ts, P)
    assert np.all(np.diff(g) > 0)


def test_params_validation():
    with pytest.raises(ConfigurationError):
        SdeParams(sigma_min=0.5, sigma_max=0.5)
    with pytest.raises(ConfigurationError):
        SdeParams(t_eps=0.0)
    with pytest.raises(ConfigurationError):
        SdeParams(gamma=-1.0)
    with pytest.raises(ConfigurationError):
        SdeParams(n_steps=0)


# -- perturbation kernel ----------------------------------------------------


def test_kernel_initial_condition():
    mean, std = perturbation_kernel(c128(1 + 2j), c128(-1j), 0.0, P)
    assert torch.allclose(mean, c128(1 + 2j))
    assert float(std) == 0.0


def test_kernel_no_reversion_keeps_x0():
    p = SdeParams(gamma=0.0)
    for t in (0.1, 0.5, 1.0):
        mean, _ = perturbation_kernel(c128(0.3), c128(5.0), t, p)
        assert torch.allclose(mean, c128(0.3))


def test_kernel_worked_example():
    mean, _ = perturbation_kernel(c128(0.0), c128(1.0), 0.5, P)
    assert abs(float(mean.real) - (1 - math.exp(-0.75))) < 1e-12
    assert abs(float(mean.real) - 0.52763) < 1e-5


@pytest.mark.parametrize("gamma,smin,smax,t", [(1.5, 0.05, 0.5, 0.5), (0.7, 0.1, 0.9, 0.8),
                                                (3.0, 0.02, 0.3, 0.25), (0.0, 0.05, 0.5, 1.0)])
def test_kernel_std_matches_quadrature(gamma, smin, smax, t):
    p = SdeParams(gamma=gamma, sigma_min=smin, sigma_max=smax)
    _, std = kernel_moments_by_quadrature(gamma, smin, smax, 0.0, 1.0, t)
    assert math.isclose(marginal_std(t, p), std, rel_tol=1e-6)


def test_kernel_matches_euler_maruyama_single_tuple():
    p = SdeParams(gamma=1.5)
    sim = euler_maruyama_moments(1.5, 0.05, 0.5, 1.0, 2.0, [0.5, 1.0], n_paths=40_000, dt=1e-3)
    for t, (m, s) in sim.items():
        mean, std = perturbation_kernel(c128(1.0), c128(2.0), t, p)
        assert abs(m / float(mean.real) - 1) < 0.01
        assert abs(s / float(std) - 1) < 0.02


@settings(max_examples=50, deadline=None)
@given(gamma=st.floats(0.0, 5.0), t1=st.floats(0.0, 1.0), t2=st.floats(0.0, 1.0))
def test_mean_weight_convex_and_monotone(gamma, t1, t2):
    p = SdeParams(gamma=gamma)
    w1, w2 = mean_weight(t1, p), mean_weight(t2, p)
    assert 0 < w1 <= 1
    if t1 < t2:
        assert w2 <= w1
    q = SdeParams(gamma=gamma + 0.5)
    assert mean_weight(t1, q) <= w1


def test_kernel_shape_mismatch():
    with pytest.raises(ConfigurationError):
        perturbation_kernel(torch.zeros(3, dtype=torch.complex64), torch.zeros(4, dtype=torch.complex64), 0.5, P)


# -- sampling and loss ------------------------------------------------------


def test_complex_normal_unit_variance():
    z = complex_normal((200_000,), torch.Generator().manual_seed(0), torch.complex128)
    assert abs(float(z.real.var()) - 0.5) < 0.01
    assert abs(float(z.imag.var()) - 0.5) < 0.01
    assert abs(float((z.abs() ** 2).mean()) - 1.0) < 0.01


def test_sample_perturbed_std_override_and_seed():
    x0 = torch.randn(5, dtype=torch.complex128)
    y = torch.randn(5, dtype=torch.complex128)
    s = sample_perturbed(x0, y, 0.4, P, torch.Generator().manual_seed(1), std_override=0.0)
    assert torch.equal(s.sample, s.mean)
    a = sample_perturbed(x0, y, 0.4, P, torch.Generator().manual_seed(3))
    b = sample_perturbed(x0, y, 0.4, P, torch.Generator().manual_seed(3))
    assert torch.equal(a.sample, b.sample)


def test_sample_perturbed_variance():
    x0 = torch.zeros(100_000, dtype=torch.complex128)
    y = torch.ones(100_000, dtype=torch.complex128)
    s = sample_perturbed(x0, y, 0.6, P, torch.Generator().manual_seed(0))
    emp = float(((s.sample - s.mean).abs() ** 2).mean())
    assert abs(emp / float(s.std) ** 2 - 1) < 0.02


def test_sample_perturbed_per_item_times():
    x0 = torch.zeros(3, 4, 5, dtype=torch.complex64)
    y = torch.ones(3, 4, 5, dtype=torch.complex64)
    t = torch.tensor([0.1, 0.5, 0.9])
    s = sample_perturbed(x0, y, t, P)
    assert s.sample.shape == x0.shape and s.std.shape == (3,)
    for i in range(3):
        assert torch.allclose(s.mean[i], torch.full((4, 5), 1 - math.exp(-1.5 * float(t[i])),
                                                    dtype=torch.complex64), atol=1e-6)


def test_dsm_loss_examples():
    gen = torch.Generator().manual_seed(0)
    z = complex_normal((4, 6), gen, torch.complex128)
    std = torch.tensor(0.3, dtype=torch.float64)
    assert float(dsm_loss(-z / std, z, std)) < 1e-30
    assert math.isclose(float(dsm_loss(torch.zeros_like(z), z, std)),
                        float((z.abs() ** 2).mean()), rel_tol=1e-12)
    s = complex_normal((4, 6), gen, torch.complex128)
    ref = sum(abs(0.3 * complex(a) + complex(b)) ** 2
              for a, b in zip(s.flatten().tolist(), z.flatten().tolist())) / 24
    assert math.isclose(float(dsm_loss(s, z, std)), ref, rel_tol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), std=st.floats(1e-3, 10.0))
def test_dsm_loss_nonnegative_zero_only_at_exact_score(seed, std):
    gen = torch.Generator().manual_seed(seed)
    z = complex_normal((8,), gen, torch.complex128)
    s = complex_normal((8,), gen, torch.complex128)
    assert float(dsm_loss(s, z, std)) > 0
    assert float(dsm_loss(-z / std, z, std)) < 1e-20


# -- reverse samplers -------------------------------------------------------


X0, Y = 1.0 + 0.5j, 0.7 + 0.3j


def _pc_runs(n_runs=200, params=P):
    x0, y = c128(X0), c128(Y)
    score = gaussian_score(x0, y, params)
    gen = torch.Generator().manual_seed(7)
    return torch.stack([reverse_pc_sampler(score, y, params, gen) for _ in range(n_runs)])[:, 0]


def test_pc_sampler_recovers_kernel_mean():
    out = _pc_runs()
    mean_t_eps, _ = perturbation_kernel(c128(X0), c128(Y), P.t_eps, P)
    se = math.sqrt(float(out.real.var()) / out.shape[0]) + 1e-300
    se_i = math.sqrt(float(out.imag.var()) / out.shape[0])
    assert abs(float(out.real.mean() - mean_t_eps.real)) < 3 * se
    assert abs(float(out.imag.mean() - mean_t_eps.imag)) < 3 * se_i


def test_pc_sampler_single_step_finite_and_deterministic():
    p = SdeParams(n_steps=1)
    x0 = torch.randn(3, 5, dtype=torch.complex128)
    y = torch.randn(3, 5, dtype=torch.complex128)
    score = gaussian_score(x0, y, p)
    a = reverse_pc_sampler(score, y, p, torch.Generator().manual_seed(2))
    b = reverse_pc_sampler(score, y, p, torch.Generator().manual_seed(2))
    assert torch.isfinite(torch.view_as_real(a)).all()
    assert torch.equal(a, b)


def test_pc_sampler_divergence_names_step():
    y = torch.ones(4, dtype=torch.complex128)
    with pytest.raises(DivergenceError, match="step 0"):
        reverse_pc_sampler(lambda x, y_, t: x * float("inf"), y, P, torch.Generator().manual_seed(0))


def _ode_exact(x_init, x0, y, params):
    """Closed-form solution of the probability-flow ODE under the Gaussian score."""
    mean_1, std_1 = perturbation_kernel(x0, y, 1.0, params)
    mean_e, std_e = perturbation_kernel(x0, y, params.t_eps, params)
    return mean_e + (x_init - mean_1) * float(std_e) / float(std_1)


def test_ode_sampler_recovers_x0():
    x0 = torch.full((64,), 3 + 1j, dtype=torch.complex128)
    y = torch.full((64,), 2.8 + 0.9j, dtype=torch.complex128)
    out = reverse_ode_sampler(gaussian_score(x0, y, P), y, P, torch.Generator().manual_seed(0))
    assert float(torch.linalg.vector_norm(out - x0) / torch.linalg.vector_norm(x0)) < 0.02


def test_ode_sampler_matches_closed_form():
    x0, y = c128(X0, -0.2j), c128(Y, 0.4)
    x_init = c128(0.9 + 0.1j, 0.3 - 0.2j)
    out = reverse_ode_sampler(gaussian_score(x0, y, P), y, P, x_init=x_init)
    assert torch.allclose(out, _ode_exact(x_init, x0, y, P), atol=1e-4)


def test_ode_sampler_zero_drift():
    p = SdeParams(gamma=0.0)
    x_init = c128(0.25 - 1j, 2.0)
    out = reverse_ode_sampler(lambda x, y_, t: torch.zeros_like(x), c128(5.0, 5.0), p, x_init=x_init)
    assert torch.equal(out, x_init)


def test_ode_sampler_fourth_order():
    x0, y = c128(X0), c128(Y)
    x_init = c128(1.3 + 0.1j)
    exact = _ode_exact(x_init, x0, y, P)
    errs = []
    for n in (15, 30, 60):
        p = SdeParams(n_steps=n)
        out = reverse_ode_sampler(gaussian_score(x0, y, p), y, p, x_init=x_init)
        errs.append(float((out - exact).abs()))
    for coarse, fine in zip(errs, errs[1:]):
        assert 8 <= coarse / fine <= 24


def test_ode_deterministic_given_seed():
    x0 = torch.randn(6, dtype=torch.complex128)
    y = torch.randn(6, dtype=torch.complex128)
    score = gaussian_score(x0, y, P)
    a = reverse_ode_sampler(score, y, P, torch.Generator().manual_seed(4))
    b = reverse_ode_sampler(score, y, P, torch.Generator().manual_seed(4))
    assert torch.equal(a, b)


def test_trajectory_dump_round_trip(tmp_path):
    traj = []
    x0 = torch.randn(2, 3, dtype=torch.complex64)
    reverse_ode_sampler(gaussian_score(x0, x0 * 0, P), x0 * 0, SdeParams(n_steps=4),
                        torch.Generator().manual_seed(0), trajectory=traj)
    dump_trajectory(tmp_path / "t.bin", traj)
    arr = load_trajectory(tmp_path / "t.bin")
    assert arr.shape == (4, 2, 3, 2)
    assert np.allclose(arr[..., 0] + 1j * arr[..., 1], torch.stack(traj).numpy())
    raw = (tmp_path / "t.bin").read_bytes()
    assert raw[:4] == b"DDTR" and len(raw) == 4 + 4 + 8 * 4 + 4 * arr.size
