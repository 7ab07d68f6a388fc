"""JIT-compiled inner loops for the event simulation and the martingale replay.

Random numbers are drawn outside the kernels in blocks, so the kernels are pure functions
of their inputs and release the GIL (replicas run in parallel threads).
"""

import numpy as np
from numba import njit

INT64_MAX = np.iinfo(np.int64).max
INT64_MIN = np.iinfo(np.int64).min

# Kernel exit status
STATUS_REACHED_END = 0
STATUS_BLOCK_EXHAUSTED = 1
STATUS_BUDGET = 2
STATUS_OVERFLOW = 3

# Event codes
CODE_RIGHT = 0
CODE_LEFT = 1
CODE_INTERACTION_APPLIED = 2
CODE_INTERACTION_SKIPPED = 3


@njit(cache=True, nogil=True)
def advance_events(
    positions,
    waits,
    actors,
    uniforms,
    partners,
    cursor,
    last_time,
    t_end,
    max_events,
    p_right,
    p_left,
    rec_times,
    rec_actors,
    rec_positions,
    rec_offset,
):
    """Apply events from the block until t_end, the block end or the event cap.

    Event e fires at last_time + waits[e]; actors[e] is the acting particle; uniforms[e]
    selects right / left / interaction against the cumulative probabilities p_right, p_left;
    partners[e] is the interaction partner (may equal the actor, then nothing moves).

    Returns (cursor, last_time, n_events, n_recorded, status, code, actor, partner).
    """
    block = waits.shape[0]
    record = rec_times.shape[0] > 0
    n_events = 0
    n_recorded = 0
    status = STATUS_REACHED_END
    code = -1
    actor = -1
    partner = -1
    while True:
        if n_events >= max_events:
            status = STATUS_BUDGET
            break
        if cursor >= block:
            status = STATUS_BLOCK_EXHAUSTED
            break
        if record and rec_offset + n_recorded >= rec_times.shape[0]:
            status = STATUS_BUDGET
            break
        t_ev = last_time + waits[cursor]
        if t_ev > t_end:
            status = STATUS_REACHED_END
            break
        i = actors[cursor]
        u = uniforms[cursor]
        moved = True
        if u < p_right:
            if positions[i] == INT64_MAX:
                status = STATUS_OVERFLOW
                break
            positions[i] += 1
            code = CODE_RIGHT
            partner = -1
        elif u < p_left:
            if positions[i] == INT64_MIN:
                status = STATUS_OVERFLOW
                break
            positions[i] -= 1
            code = CODE_LEFT
            partner = -1
        else:
            j = partners[cursor]
            partner = j
            if positions[i] > positions[j]:
                positions[i] = positions[j]
                code = CODE_INTERACTION_APPLIED
            else:
                code = CODE_INTERACTION_SKIPPED
                moved = False
        if record and moved:
            rec_times[rec_offset + n_recorded] = t_ev
            rec_actors[rec_offset + n_recorded] = i
            rec_positions[rec_offset + n_recorded] = positions[i]
            n_recorded += 1
        actor = i
        last_time = t_ev
        cursor += 1
        n_events += 1
    return cursor, last_time, n_events, n_recorded, status, code, actor, partner


@njit(cache=True, nogil=True)
def _cumulative_at(cum, k_lo, x):
    """F(x) = sum_{k <= x} f(k/N) from the window cumulative sum (zero left of the window)."""
    idx = x - k_lo
    if idx < 0:
        return 0.0
    if idx >= cum.shape[0]:
        return cum[cum.shape[0] - 1]
    return cum[idx]


@njit(cache=True, nogil=True)
def _value_at(fk, k_lo, x):
    idx = x - k_lo
    if idx < 0 or idx >= fk.shape[0]:
        return 0.0
    return fk[idx]


@njit(cache=True, nogil=True)
def replay_martingale(
    initial_positions,
    event_times,
    actors,
    new_positions,
    t_start,
    grid_times,
    fk,
    k_lo,
    alpha,
    beta,
    mu_n,
):
    """Replay an event-resolved trajectory and evaluate the Dynkin martingales.

    fk holds f(k/N) for k = k_lo .. k_lo + len(fk) - 1 (f negligible outside).
    With c_k = #{i : x_i >= k}:
        R_f       = sum_k f_k c_k / N^2 = sum_i F(x_i) / N^2
        L_N R_f   = sum_k g_k c_k / N^2 - mu_n / N^3 * sum_k f_k c_k (N - c_k)
        Gamma     = [sum_i (alpha f(x_i+1)^2 + beta f(x_i)^2)
                     + mu_n / N * (N sum_i F_i^2 - (sum_i F_i)^2)] / N^4
    where g_k = beta f_{k-1} - (alpha+beta) f_k + alpha f_{k+1}. All three are constant between
    events, so the compensators are accumulated exactly.

    grid_times are absolute times (sorted, >= t_start). Returns (W, quadratic compensator).
    """
    n = initial_positions.shape[0]
    nf = float(n)
    m = fk.shape[0]
    x = initial_positions.copy()

    cum = np.empty(m)
    acc = 0.0
    for idx in range(m):
        acc += fk[idx]
        cum[idx] = acc

    gk = np.empty(m)
    for idx in range(m):
        left = fk[idx - 1] if idx > 0 else 0.0
        right = fk[idx + 1] if idx + 1 < m else 0.0
        gk[idx] = beta * left - (alpha + beta) * fk[idx] + alpha * right

    counts = np.zeros(m, dtype=np.int64)
    for i in range(n):
        xi = x[i]
        top = xi - k_lo
        if top >= m:
            top = m - 1
        for idx in range(0, top + 1):
            counts[idx] += 1

    s_r = 0.0
    s_g = 0.0
    s_q = 0.0
    for idx in range(m):
        c = float(counts[idx])
        s_r += fk[idx] * c
        s_g += gk[idx] * c
        s_q += fk[idx] * c * (nf - c)

    s_f = 0.0
    s_f2 = 0.0
    s_jump = 0.0
    for i in range(n):
        big_f = _cumulative_at(cum, k_lo, x[i])
        s_f += big_f
        s_f2 += big_f * big_f
        up = _value_at(fk, k_lo, x[i] + 1)
        here = _value_at(fk, k_lo, x[i])
        s_jump += alpha * up * up + beta * here * here

    r0 = s_r / nf**2
    compensator = 0.0
    quad = 0.0
    t_prev = t_start
    n_grid = grid_times.shape[0]
    w_out = np.zeros(n_grid)
    q_out = np.zeros(n_grid)
    g_ptr = 0
    n_ev = event_times.shape[0]

    for e in range(n_ev + 1):
        t_next = event_times[e] if e < n_ev else np.inf
        drift = s_g / nf**2 - mu_n * s_q / nf**3
        gamma = (s_jump + mu_n / nf * (nf * s_f2 - s_f * s_f)) / nf**4
        while g_ptr < n_grid and grid_times[g_ptr] < t_next:
            dt = grid_times[g_ptr] - t_prev
            w_out[g_ptr] = s_r / nf**2 - r0 - (compensator + drift * dt)
            q_out[g_ptr] = quad + gamma * dt
            g_ptr += 1
        if e == n_ev:
            break
        dt = t_next - t_prev
        compensator += drift * dt
        quad += gamma * dt
        t_prev = t_next

        i = actors[e]
        a = x[i]
        b = new_positions[e]

        big_f_a = _cumulative_at(cum, k_lo, a)
        big_f_b = _cumulative_at(cum, k_lo, b)
        s_f += big_f_b - big_f_a
        s_f2 += big_f_b * big_f_b - big_f_a * big_f_a
        up_a = _value_at(fk, k_lo, a + 1)
        here_a = _value_at(fk, k_lo, a)
        up_b = _value_at(fk, k_lo, b + 1)
        here_b = _value_at(fk, k_lo, b)
        s_jump += alpha * (up_b * up_b - up_a * up_a) + beta * (here_b * here_b - here_a * here_a)

        if b < a:
            lo = b + 1 - k_lo
            hi = a - k_lo
            delta = -1
        else:
            lo = a + 1 - k_lo
            hi = b - k_lo
            delta = 1
        if lo < 0:
            lo = 0
        if hi > m - 1:
            hi = m - 1
        for idx in range(lo, hi + 1):
            c = float(counts[idx])
            c_new = c + delta
            s_r += fk[idx] * delta
            s_g += gk[idx] * delta
            s_q += fk[idx] * (c_new * (nf - c_new) - c * (nf - c))
            counts[idx] += delta
        x[i] = b

    return w_out, q_out
