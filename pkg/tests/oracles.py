"""Independent numerical oracles used to derive expected test values.

Each routine here deliberately avoids the package's own evaluation path:
densities are checked against adaptive quadrature and a Crank-Nicolson
Fokker-Planck solve, choice probabilities against a standalone
Euler-Maruyama Monte Carlo, and expectations against plain Monte Carlo.
"""

from __future__ import annotations

import numpy as np
from scipy.integrate import quad
from scipy.sparse import diags
from scipy.sparse.linalg import splu


def integrate_density(log_density_fn, nondecision, upper_only=False):
    """Adaptive quadrature of the response-time density over (ndt, inf).

    ``log_density_fn(t, choice)`` must return the log joint density.
    Returns total mass (both boundaries) or the upper-boundary mass.
    """
    choices = (1,) if upper_only else (0, 1)
    total = 0.0
    for c in choices:
        val, _ = quad(
            lambda t: np.exp(log_density_fn(t, c)),
            nondecision,
            np.inf,
            limit=400,
        )
        total += val
    return total


def euler_choice_probability(boundary, start_frac, drift, n_paths=1_000_000,
                             dt=1e-4, horizon=30.0, seed=20240817,
                             chunk=20_000):
    """Upper-boundary hit fraction from a standalone Euler-Maruyama scheme.

    Paths are advanced in vectorized blocks; absorbed paths drop out of the
    active set.  Independent of the package sampler.
    """
    rng = np.random.default_rng(seed)
    sqrt_dt = np.sqrt(dt)
    max_steps = int(round(horizon / dt))
    upper_hits = 0
    done = 0
    while done < n_paths:
        n = min(chunk, n_paths - done)
        x = np.full(n, start_frac * boundary)
        alive = np.ones(n, dtype=bool)
        for _ in range(max_steps):
            idx = np.flatnonzero(alive)
            if idx.size == 0:
                break
            x[idx] += drift * dt + sqrt_dt * rng.standard_normal(idx.size)
            hit_up = idx[x[idx] >= boundary]
            hit_lo = idx[x[idx] <= 0.0]
            upper_hits += hit_up.size
            alive[hit_up] = False
            alive[hit_lo] = False
        done += n
    return upper_hits / n_paths


def fokker_planck_log_density(t_dec, choice, boundary, start_frac, drift,
                              nx=550, dt=1e-4):
    """First-passage density at decision time ``t_dec`` from a
    Crank-Nicolson solve of the Fokker-Planck equation with absorbing
    boundaries; the density equals the probability flux out of the hit
    boundary."""
    dx = boundary / nx
    start_idx = start_frac * boundary / dx
    lo = int(np.floor(start_idx))
    frac = start_idx - lo

    n_inner = nx - 1
    p = np.zeros(n_inner)
    # Split the unit point mass between the two nearest interior nodes.
    p[lo - 1] += (1.0 - frac) / dx
    if frac:
        p[lo] += frac / dx

    # L = -v D1 + 0.5 D2 on interior nodes (Dirichlet 0 at both walls).
    main = np.full(n_inner, -1.0 / dx**2)
    up = np.full(n_inner - 1, 0.5 / dx**2 - drift / (2 * dx))
    dn = np.full(n_inner - 1, 0.5 / dx**2 + drift / (2 * dx))
    lap = diags([dn, main, up], offsets=[-1, 0, 1], format="csc")
    ident = diags([np.ones(n_inner)], offsets=[0], format="csc")
    lhs = splu((ident - 0.5 * dt * lap).tocsc())
    rhs = ident + 0.5 * dt * lap

    n_steps = int(round(t_dec / dt))
    for _ in range(n_steps):
        p = lhs.solve(rhs @ p)

    # Second-order one-sided flux through the absorbing wall (p = 0 there).
    if choice == 1:
        flux = 0.5 * (4.0 * p[-1] - p[-2]) / (2.0 * dx)
    else:
        flux = 0.5 * (4.0 * p[0] - p[1]) / (2.0 * dx)
    return np.log(flux)


def mc_gaussian_expectation(fn, mean, sd, n_draws, seed):
    """Plain Monte Carlo estimate of E[fn(F)], F ~ N(mean, diag(sd^2)).

    Returns (estimate, standard error).
    """
    rng = np.random.default_rng(seed)
    mean = np.asarray(mean, dtype=np.float64)
    sd = np.asarray(sd, dtype=np.float64)
    draws = mean + sd * rng.standard_normal((n_draws, mean.shape[0]))
    vals = np.array([fn(f) for f in draws])
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(n_draws))


def chain_marginals(init_dist, trans, n_steps):
    """Marginal state distributions of a homogeneous chain via matrix powers."""
    out = [np.asarray(init_dist, dtype=np.float64)]
    for _ in range(n_steps - 1):
        out.append(out[-1] @ trans)
    return np.array(out)
