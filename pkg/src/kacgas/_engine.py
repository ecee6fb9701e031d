"""Compiled inner loops for the lattice gas.

``run_thinning`` uniformizes the chain: candidate events arrive at the constant
rate ``N^2 (n_bonds * r_max + 2)`` and are accepted with probability
``rate / r_max``.  ``run_direct`` is the textbook direct method: it keeps the
local field ``h = J_N eta`` current (one kernel row per move), recomputes all
rates and picks one event proportionally.  Both sample the same law.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _tilt_at(tilt_times, tilt_values, t, i):
    # Linear interpolation in time of F at lattice index i; zero when no tilt.
    nt = tilt_times.shape[0]
    if nt == 0:
        return 0.0
    if t <= tilt_times[0]:
        return tilt_values[0, i]
    if t >= tilt_times[nt - 1]:
        return tilt_values[nt - 1, i]
    lo = 0
    hi = nt - 1
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if tilt_times[mid] <= t:
            lo = mid
        else:
            hi = mid
    w = (t - tilt_times[lo]) / (tilt_times[hi] - tilt_times[lo])
    return (1.0 - w) * tilt_values[lo, i] + w * tilt_values[hi, i]


@njit(cache=True)
def _bond_rate(occ, h, self_energy, b, beta, tilt_times, tilt_values, t):
    d = occ[b] - occ[b + 1]
    if d == 0:
        return 0.0
    dh = d * (h[b] - h[b + 1]) + self_energy[b]
    r = np.exp(-0.5 * beta * dh)
    if tilt_times.shape[0] > 0:
        # particle crosses from the occupied end to the empty end
        f_here = _tilt_at(tilt_times, tilt_values, t, b)
        f_next = _tilt_at(tilt_times, tilt_values, t, b + 1)
        r *= np.exp(-d * (f_here - f_next))
    return r


@njit(cache=True)
def _apply_bond(occ, h, J, b, track_field):
    # moves the particle across bond (b, b+1); the field changes by J[dst] - J[src]
    n = occ.shape[0]
    if occ[b] == 1:
        src, dst = b, b + 1
    else:
        src, dst = b + 1, b
    occ[src] = 0
    occ[dst] = 1
    if track_field:
        for k in range(n):
            h[k] += J[dst, k] - J[src, k]


@njit(cache=True)
def _apply_flip(occ, h, J, i, track_field):
    n = occ.shape[0]
    s = 1.0 - 2.0 * occ[i]
    occ[i] = 1 - occ[i]
    if track_field:
        for k in range(n):
            h[k] += s * J[i, k]


@njit(cache=True)
def _refresh_field(occ, J, h):
    n = occ.shape[0]
    for k in range(n):
        acc = 0.0
        for z in range(n):
            if occ[z]:
                acc += J[k, z]
        h[k] = acc


@njit(cache=True)
def _exact_energy_rate(occ, D, self_energy, b, beta):
    # h(b) - h(b+1) = -sum_z D[b, z] eta(z)
    n = occ.shape[0]
    acc = 0.0
    for z in range(n):
        if occ[z]:
            acc += D[b, z]
    d = occ[b] - occ[b + 1]
    return np.exp(-0.5 * beta * (-d * acc + self_energy[b]))


@njit(cache=True)
def run_thinning(
    occ, D, self_energy, bond_bound, beta, rho_minus, rho_plus, N, sample_times, t_end,
    r_max, tilt_times, tilt_values, rng,
):
    """Uniformized sampler.

    Each candidate uses one uniform: its integer part (after scaling) picks the
    slot, its fractional part decides acceptance.  Energy factors are bracketed
    by ``exp(+-beta/2 * bond_bound[b])``; the exact factor, an O(N) sum, is only
    needed when the acceptance variable falls inside that bracket.  Without a
    tilt the candidate count per sampling interval is Poisson, so no clocks are drawn.
    """
    n = occ.shape[0]
    nb = n - 1
    n_samples = sample_times.shape[0]
    out = np.zeros((n_samples, n), dtype=np.int8)
    tilted = tilt_times.shape[0] > 0
    bond_mass = nb * r_max
    total = bond_mass + 2.0
    big_rate = float(N) * float(N) * total
    events = 0
    t = 0.0
    k = 0
    while k < n_samples and sample_times[k] <= t:
        out[k, :] = occ
        k += 1
    while True:
        t_stop = sample_times[k] if k < n_samples else t_end
        if tilted:
            n_cand = -1
        else:
            n_cand = rng.poisson(big_rate * (t_stop - t))
        done = 0
        while True:
            if tilted:
                t_next = t + rng.exponential(1.0) / big_rate
                if t_next >= t_stop:
                    break
                t = t_next
            else:
                if done >= n_cand:
                    break
                done += 1
            slot = rng.random() * total
            if slot < bond_mass:
                q = slot / r_max
                b = int(q)
                if b >= nb:
                    b = nb - 1
                if occ[b] == occ[b + 1]:
                    continue
                a = (q - b) * r_max
                lo = np.exp(-0.5 * beta * bond_bound[b])
                hi = 1.0 / lo
                tf = 1.0
                if tilted:
                    d = occ[b] - occ[b + 1]
                    tf = np.exp(-d * (_tilt_at(tilt_times, tilt_values, t, b)
                                      - _tilt_at(tilt_times, tilt_values, t, b + 1)))
                if a < lo * tf:
                    accept = True
                elif a >= hi * tf:
                    accept = False
                else:
                    accept = a < tf * _exact_energy_rate(occ, D, self_energy, b, beta)
                if accept:
                    if occ[b] == 1:
                        occ[b] = 0
                        occ[b + 1] = 1
                    else:
                        occ[b] = 1
                        occ[b + 1] = 0
                    events += 1
            else:
                w = slot - bond_mass
                left = w < 1.0
                i = 0 if left else n - 1
                rho = rho_minus if left else rho_plus
                c = rho if occ[i] == 0 else 1.0 - rho
                if w - np.floor(w) < c:
                    occ[i] = 1 - occ[i]
                    events += 1
        t = t_stop
        if k < n_samples:
            out[k, :] = occ
            k += 1
            while k < n_samples and sample_times[k] <= t:
                out[k, :] = occ
                k += 1
        else:
            break
    return out, events, t


@njit(cache=True)
def all_rates(occ, h, self_energy, beta, rho_minus, rho_plus, N, tilt_times, tilt_values, t):
    """Rates of every event, already multiplied by ``N^2``: bonds first, then the two boundaries."""
    n = occ.shape[0]
    nb = n - 1
    rates = np.zeros(nb + 2)
    scale = float(N) * float(N)
    for b in range(nb):
        rates[b] = scale * _bond_rate(occ, h, self_energy, b, beta, tilt_times, tilt_values, t)
    rates[nb] = scale * (rho_minus if occ[0] == 0 else 1.0 - rho_minus)
    rates[nb + 1] = scale * (rho_plus if occ[n - 1] == 0 else 1.0 - rho_plus)
    return rates


@njit(cache=True)
def run_direct(
    occ, J, self_energy, beta, rho_minus, rho_plus, N, t0, sample_times, t_end,
    tilt_times, tilt_values, rng,
):
    n = occ.shape[0]
    nb = n - 1
    n_samples = sample_times.shape[0]
    out = np.zeros((n_samples, n), dtype=np.int8)
    h = np.zeros(n)
    _refresh_field(occ, J, h)
    t = t0
    k = 0
    events = 0
    while True:
        rates = all_rates(occ, h, self_energy, beta, rho_minus, rho_plus, N, tilt_times, tilt_values, t)
        total = rates.sum()
        t_next = t + rng.exponential(1.0) / total
        while k < n_samples and sample_times[k] < t_next:
            out[k, :] = occ
            k += 1
        if t_next > t_end:
            break
        t = t_next
        target = rng.random() * total
        acc = 0.0
        e = nb + 1
        for j in range(nb + 2):
            acc += rates[j]
            if target < acc and rates[j] > 0.0:
                e = j
                break
        if e < nb:
            _apply_bond(occ, h, J, e, True)
        else:
            _apply_flip(occ, h, J, 0 if e == nb else n - 1, True)
        events += 1
    while k < n_samples:
        out[k, :] = occ
        k += 1
    return out, events, t
