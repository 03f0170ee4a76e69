"""Backward/forward sweep kernels.

Two interchangeable implementations of the same iteration:

* ``sweep_loops``: explicit per-branch loops, compiled with numba when available;
* ``sweep_matrix``: vectorised numpy using the branch-by-bus incidence matrix.

Set ``LLRM_DISABLE_NUMBA=1`` to force the numpy path. Both return
``(voltage, branch_current, iterations, converged, trace)`` where ``trace``
holds the largest voltage-magnitude change of each sweep.
"""

import os

import numpy as np

_disabled = os.environ.get("LLRM_DISABLE_NUMBA", "").strip().lower() not in ("", "0", "false", "no")

try:
    if _disabled:
        raise ImportError
    from numba import njit
    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f


@njit(cache=True, nogil=True)
def _sweep_loops(s_pu, z, order, parent, parent_branch, v_slack, slack, tol, max_iter):
    n = s_pu.shape[0]
    nb = z.shape[0]
    v = np.full(n, v_slack + 0j)
    acc = np.zeros(n, dtype=np.complex128)
    ib = np.zeros(nb, dtype=np.complex128)
    trace = np.zeros(max_iter)
    converged = False
    it = 0
    while it < max_iter:
        # backward: load currents gathered towards the root
        for j in range(n):
            acc[j] = np.conj(s_pu[j] / v[j])
        acc[slack] = 0j
        for m in range(order.shape[0] - 1, -1, -1):
            j = order[m]
            ib[parent_branch[j]] = acc[j]
            acc[parent[j]] += acc[j]
        # forward: voltage drops away from the root
        dv = 0.0
        for m in range(order.shape[0]):
            j = order[m]
            vn = v[parent[j]] - z[parent_branch[j]] * ib[parent_branch[j]]
            d = abs(abs(vn) - abs(v[j]))
            if d > dv:
                dv = d
            v[j] = vn
        trace[it] = dv
        it += 1
        if dv < tol:
            converged = True
            break
    # currents consistent with the final voltages
    for j in range(n):
        acc[j] = np.conj(s_pu[j] / v[j])
    acc[slack] = 0j
    for m in range(order.shape[0] - 1, -1, -1):
        j = order[m]
        ib[parent_branch[j]] = acc[j]
        acc[parent[j]] += acc[j]
    return v, ib, it, converged, trace[:it]


def sweep_loops(topology, s_pu, z, v_slack, tol, max_iter):
    return _sweep_loops(np.ascontiguousarray(s_pu, dtype=np.complex128),
                        np.ascontiguousarray(z, dtype=np.complex128),
                        topology.order, topology.parent, topology.parent_branch,
                        float(v_slack), int(topology.slack), float(tol), int(max_iter))


def sweep_matrix(topology, s_pu, z, v_slack, tol, max_iter):
    bibc = topology.bibc
    drop = bibc.T * z  # bus-by-branch: impedance of each branch on the path to the bus
    s = np.asarray(s_pu, dtype=np.complex128).copy()
    s[topology.slack] = 0
    v = np.full(topology.n_bus, complex(v_slack))
    trace = []
    converged = False
    for _ in range(max_iter):
        ib = bibc @ np.conj(s / v)
        vn = v_slack - drop @ ib
        dv = float(np.max(np.abs(np.abs(vn) - np.abs(v)))) if vn.size else 0.0
        v = vn
        trace.append(dv)
        if dv < tol:
            converged = True
            break
    ib = bibc @ np.conj(s / v)
    return v, ib, len(trace), converged, np.asarray(trace)


BACKENDS = {"numba": sweep_loops, "numpy": sweep_matrix}
DEFAULT_BACKEND = "numba" if HAVE_NUMBA else "numpy"


def get_sweep(backend=None):
    name = backend or DEFAULT_BACKEND
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba backend requested but numba is unavailable or disabled")
    try:
        return BACKENDS[name]
    except KeyError:
        raise ValueError(f"unknown power-flow backend {name!r}") from None
