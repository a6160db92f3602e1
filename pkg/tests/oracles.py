"""Independent reference implementations used only to verify the package.

Everything here is written the slow, obvious way (explicit loops, dense
eigendecompositions, first-order methods) so agreement with the package is
evidence rather than tautology.
"""

import numpy as np

from gnnfp.channel import NetworkConfig, NetworkInstance


def synthetic_instance(H: np.ndarray, max_tx_power_dBm: float = 20.0,
                       weights: tuple = (), seed: int = 0) -> NetworkInstance:
    """Wrap a handcrafted channel tensor (L,Q,L,Nr,Nt) in an instance."""
    L, Q, _, Nr, Nt = H.shape
    config = NetworkConfig(L=L, Q=Q, Nt=Nt, Nr=Nr,
                           max_tx_power_dBm=max_tx_power_dBm,
                           weights=weights, seed=seed)
    bs = np.zeros((L, 2))
    users = np.zeros((L, Q, 2))
    return NetworkInstance(config=config, H=np.asarray(H, dtype=complex),
                           bs_positions=bs, user_positions=users)


def naive_interference_covariance(inst, v, l, q):
    """Term-by-term summation of every interfering beam plus noise."""
    cfg = inst.config
    c = np.eye(cfg.Nr, dtype=complex)
    for j in range(cfg.Q):
        if j != q:
            s = inst.H[l, q, l] @ v[l, j]
            c += np.outer(s, s.conj())
    for i in range(cfg.L):
        if i != l:
            for j in range(cfg.Q):
                s = inst.H[l, q, i] @ v[i, j]
                c += np.outer(s, s.conj())
    return c


def logdet_rate(inst, v, l, q):
    """log det(I + C^-1 H v v^H H^H), the determinant form of the rate."""
    c = naive_interference_covariance(inst, v, l, q)
    own = inst.H[l, q, l] @ v[l, q]
    m = np.eye(inst.config.Nr) + np.linalg.solve(c, np.outer(own, own.conj()))
    sign, logdet = np.linalg.slogdet(m)
    return float(sign.real * logdet)


def eval_ft_reference(inst, v, y, gamma):
    """Surrogate objective after both transforms, evaluated by direct loops:
    sum of w[log(1+g) - g] + 2 w (1+g) Re(y^H H v) - w (1+g) y^H (I + sum s s^H) y."""
    cfg = inst.config
    w = cfg.weight_array()
    total = 0.0
    for l in range(cfg.L):
        for q in range(cfg.Q):
            wlq, g, ylq = w[l, q], gamma[l, q], y[l, q]
            total += wlq * (np.log1p(g) - g)
            own = inst.H[l, q, l] @ v[l, q]
            total += 2.0 * wlq * (1.0 + g) * np.real(np.vdot(ylq, own))
            acc = np.real(np.vdot(ylq, ylq))  # sigma^2 = 1 after normalization
            for i in range(cfg.L):
                for j in range(cfg.Q):
                    s = inst.H[l, q, i] @ v[i, j]
                    acc += abs(np.vdot(ylq, s)) ** 2
            total -= wlq * (1.0 + g) * acc
    return float(total)


def qp_objective(D, b, v):
    """sum_q [v_q^H D v_q - 2 Re(b_q^H v_q)] for stacked per-user rows."""
    quad = np.real(np.einsum("qm,mk,qk->", v.conj(), D, v))
    lin = 2.0 * np.real(np.sum(v.conj() * b))
    return float(quad - lin)


def pgd_qp_reference(D, b, P, max_iter=200_000, rel_stop=1e-15):
    """Accelerated projected gradient on the ball-constrained QP.

    First-order method with function-value restarts; shares no code path
    with the bisection solver. Returns the best iterate found.
    """
    lam_max = float(np.linalg.eigvalsh(D)[-1])
    step = 1.0 / max(lam_max, 1e-12)
    v = np.zeros_like(b)
    z = v.copy()
    t = 1.0
    best = v.copy()
    best_obj = qp_objective(D, b, v)
    stall = 0
    for _ in range(max_iter):
        grad = z @ D.T - b
        v_new = z - step * grad
        pw = float(np.sum(np.abs(v_new) ** 2))
        if pw > P:
            v_new *= np.sqrt(P / pw)
        obj = qp_objective(D, b, v_new)
        if obj > best_obj:  # momentum overshoot: restart
            z = best.copy()
            t = 1.0
            stall += 1
            if stall > 200:
                break
            continue
        if best_obj - obj <= rel_stop * (1.0 + abs(best_obj)):
            stall += 1
            if stall > 200:
                best, best_obj = v_new, obj
                break
        else:
            stall = 0
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        z = v_new + ((t - 1.0) / t_new) * (v_new - v)
        v, t = v_new, t_new
        best, best_obj = v_new, obj
    return best
