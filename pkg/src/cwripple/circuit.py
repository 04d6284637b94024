"""Transient simulation of the half-wave Cockcroft-Walton (Villard) cascade.

The ladder is solved in nodal form with backward-Euler companion models:

* every stage capacitor is a series ``C + ESR`` branch replaced by a Norton
  equivalent with ``R_eq = esr + dt/C`` and an EMF equal to the stored
  capacitor voltage;
* every diode is piecewise linear: ``Ron`` in series with ``Vf`` when on,
  a leakage conductance ``Goff`` when off;
* the sinusoidal source is grounded and ideal, so its node is eliminated
  from the unknowns and only contributes to the right-hand side.

Node numbering: ``0`` is ground, ``1..2N`` are the ladder nodes (odd nodes
form the AC column, even nodes the DC column, node ``2N`` is the output) and
``2N + 1`` is the source node. Diode ``k`` points from node ``k - 1`` to
node ``k``. With this ordering the reduced conductance matrix has bandwidth
two and is symmetric positive definite, so elimination runs on band storage
without pivoting.

The inner loops are compiled with numba. :func:`simulate` runs entirely inside
the compiled kernel; :func:`step` exposes a single time step on a
:class:`Netlist` for testing and inspection.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

__all__ = [
    "CaseParams",
    "SimConfig",
    "Netlist",
    "CycleWaveform",
    "SingularNetworkError",
    "build_netlist",
    "step",
    "simulate",
    "write_waveform_csv",
    "read_waveform_csv",
]

GROUND = -1
SOURCE = -2


class SingularNetworkError(RuntimeError):
    """Raised when the nodal matrix has a zero pivot (floating node)."""


@dataclass(frozen=True)
class CaseParams:
    """One point of the design space. SI units throughout."""

    n_stages: int
    vin_peak: float
    cap: float
    freq: float
    r_load: float
    esr: float = 0.5
    diode_vf: float = 0.7
    diode_ron: float = 10.0
    diode_goff: float = 1e-9

    def __post_init__(self):
        if not (isinstance(self.n_stages, (int, np.integer)) and 1 <= self.n_stages <= 32):
            raise ValueError(f"n_stages must be an integer in [1, 32], got {self.n_stages!r}")
        for name in ("vin_peak", "cap", "freq", "r_load", "diode_ron", "diode_goff"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be positive and finite, got {value!r}")
        for name in ("esr", "diode_vf"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise ValueError(f"{name} must be non-negative, got {value!r}")


@dataclass(frozen=True)
class SimConfig:
    steps_per_cycle: int = 5000
    max_cycles: int = 2000
    # light loads creep towards steady state by less than 1e-5 of V_dc per
    # cycle while that creep is still comparable to their ripple; 1e-8 keeps
    # the leftover drift under about 1% of V_pp across the default grid
    settle_rel_tol: float = 1e-8
    settle_consecutive: int = 3
    max_diode_iters: int = 50

    def __post_init__(self):
        if self.steps_per_cycle < 256:
            raise ValueError("steps_per_cycle must be >= 256")
        if self.max_cycles < 2:
            raise ValueError("max_cycles must be >= 2")
        if not self.settle_rel_tol > 0:
            raise ValueError("settle_rel_tol must be > 0")
        if self.settle_consecutive < 1:
            raise ValueError("settle_consecutive must be >= 1")
        if self.max_diode_iters < 1:
            raise ValueError("max_diode_iters must be >= 1")


@dataclass
class Netlist:
    """Flat branch arrays plus mutable integration state.

    ``cap_v`` and ``dio_on`` are the state carried between steps.
    ``nonconverged_steps`` counts steps whose diode-state iteration hit the
    sweep limit (the last state was kept).
    """

    node_count: int
    source_node: int
    output_node: int
    vin_peak: float
    freq: float
    cap_a: np.ndarray
    cap_b: np.ndarray
    cap_c: np.ndarray
    cap_esr: np.ndarray
    cap_v: np.ndarray
    dio_a: np.ndarray
    dio_k: np.ndarray
    dio_vf: np.ndarray
    dio_ron: np.ndarray
    dio_goff: np.ndarray
    dio_on: np.ndarray
    load: tuple[int, int, float]
    nonconverged_steps: int = 0
    max_diode_iters: int = 50
    _node_map: np.ndarray = field(init=False, repr=False)
    _bandwidth: int = field(init=False, repr=False)

    def __post_init__(self):
        node_map = np.full(self.node_count, -3, dtype=np.int64)
        node_map[0] = GROUND
        node_map[self.source_node] = SOURCE
        unknown = 0
        for node in range(1, self.node_count):
            if node != self.source_node:
                node_map[node] = unknown
                unknown += 1
        self._node_map = node_map
        bw = 0
        pairs = list(zip(self.cap_a, self.cap_b)) + list(zip(self.dio_a, self.dio_k))
        pairs.append(self.load[:2])
        for a, b in pairs:
            ia, ib = node_map[a], node_map[b]
            if ia >= 0 and ib >= 0:
                bw = max(bw, abs(int(ia) - int(ib)))
        self._bandwidth = bw

    @property
    def n_unknowns(self) -> int:
        return int(np.count_nonzero(self._node_map >= 0))

    @property
    def cap_branches(self):
        return list(zip(self.cap_a.tolist(), self.cap_b.tolist(), self.cap_c.tolist(),
                        self.cap_esr.tolist(), self.cap_v.tolist()))

    @property
    def diode_branches(self):
        return list(zip(self.dio_a.tolist(), self.dio_k.tolist(), self.dio_vf.tolist(),
                        self.dio_ron.tolist(), self.dio_goff.tolist(),
                        self.dio_on.astype(bool).tolist()))

    def source_voltage(self, t: float) -> float:
        return self.vin_peak * math.sin(2.0 * math.pi * self.freq * t)

    def node_voltages(self, x: np.ndarray, t: float) -> np.ndarray:
        """Expand the unknown vector into a full per-node array (ground = 0)."""
        full = np.zeros(self.node_count)
        full[self.source_node] = self.source_voltage(t)
        mask = self._node_map >= 0
        full[mask] = x[self._node_map[mask]]
        return full


@dataclass
class CycleWaveform:
    """Output-node samples of the last simulated cycle."""

    samples: np.ndarray
    dt: float
    v_dc_history: np.ndarray
    converged: bool
    cycles_run: int
    nonconverged_steps: int = 0
    diode_mean_current: np.ndarray | None = None
    load_mean_current: float = float("nan")

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(1, len(self.samples) + 1)


def build_netlist(params: CaseParams) -> Netlist:
    """Villard cascade for ``params``: 2N capacitors, 2N diodes, load on node 2N."""
    n = params.n_stages
    top = 2 * n
    source = top + 1
    cap_a, cap_b = [], []
    # AC column: source -> 1, 1 -> 3, ..., (2N-3) -> (2N-1)
    prev = source
    for node in range(1, top, 2):
        cap_a.append(prev)
        cap_b.append(node)
        prev = node
    # DC column: ground -> 2, 2 -> 4, ..., (2N-2) -> 2N
    prev = 0
    for node in range(2, top + 1, 2):
        cap_a.append(prev)
        cap_b.append(node)
        prev = node
    n_caps = len(cap_a)
    return Netlist(
        node_count=top + 2,
        source_node=source,
        output_node=top,
        vin_peak=float(params.vin_peak),
        freq=float(params.freq),
        cap_a=np.array(cap_a, dtype=np.int64),
        cap_b=np.array(cap_b, dtype=np.int64),
        cap_c=np.full(n_caps, float(params.cap)),
        cap_esr=np.full(n_caps, float(params.esr)),
        cap_v=np.zeros(n_caps),
        dio_a=np.arange(0, top, dtype=np.int64),
        dio_k=np.arange(1, top + 1, dtype=np.int64),
        dio_vf=np.full(top, float(params.diode_vf)),
        dio_ron=np.full(top, float(params.diode_ron)),
        dio_goff=np.full(top, float(params.diode_goff)),
        dio_on=np.zeros(top, dtype=np.uint8),
        load=(top, 0, float(params.r_load)),
    )


# ---------------------------------------------------------------------------
# compiled kernels


@numba.njit(cache=True, inline="always")
def _known(idx, vs):
    return 0.0 if idx == GROUND else vs


@numba.njit(cache=True, inline="always")
def _node_v(idx, x, vs):
    if idx >= 0:
        return x[idx]
    return _known(idx, vs)


@numba.njit(cache=True, inline="always")
def _stamp_g(ab, ip, iq, g, bw):
    if ip >= 0:
        ab[ip, bw] += g
        if iq >= 0:
            ab[ip, bw + iq - ip] -= g
    if iq >= 0:
        ab[iq, bw] += g
        if ip >= 0:
            ab[iq, bw + ip - iq] -= g


@numba.njit(cache=True, inline="always")
def _stamp_i(rhs, ip, iq, g, e, vs):
    # branch current p -> q is g * (vp - vq - e)
    if ip >= 0:
        rhs[ip] += g * e
        if iq < 0:
            rhs[ip] += g * _known(iq, vs)
    if iq >= 0:
        rhs[iq] -= g * e
        if ip < 0:
            rhs[iq] += g * _known(ip, vs)


@numba.njit(cache=True)
def _band_factor(ab, bw):
    """In-place LU of a band matrix without pivoting; multipliers overwrite L."""
    n = ab.shape[0]
    for k in range(n):
        piv = ab[k, bw]
        if not (abs(piv) > 1e-300):
            return False
        for i in range(k + 1, min(n, k + bw + 1)):
            f = ab[i, bw + k - i] / piv
            ab[i, bw + k - i] = f
            if f != 0.0:
                for j in range(k + 1, min(n, k + bw + 1)):
                    ab[i, bw + j - i] -= f * ab[k, bw + j - k]
    return True


@numba.njit(cache=True)
def _band_lu_solve(ab, rhs, x, bw):
    n = rhs.shape[0]
    for k in range(n):
        for i in range(k + 1, min(n, k + bw + 1)):
            rhs[i] -= ab[i, bw + k - i] * rhs[k]
    for k in range(n - 1, -1, -1):
        s = rhs[k]
        for j in range(k + 1, min(n, k + bw + 1)):
            s -= ab[k, bw + j - k] * x[j]
        x[k] = s / ab[k, bw]


@numba.njit(cache=True)
def _solve_step(vs, dt, node_map, cap_a, cap_b, cap_c, cap_esr, cap_v,
                dio_a, dio_k, dio_vf, dio_ron, dio_goff, dio_on,
                load_a, load_b, g_load, bw, max_iters, x, ab, rhs, dio_i, factored):
    """Advance one backward-Euler step in place.

    ``ab`` holds the factored matrix for the current diode states when
    ``factored[0]`` is set; it is rebuilt only after a state change.
    Returns 0 when the diode states settled, 1 when the sweep limit was hit,
    -1 on a singular matrix.
    """
    n_caps = cap_a.shape[0]
    n_dio = dio_a.shape[0]
    status = 1
    for _ in range(max_iters):
        if not factored[0]:
            ab[:, :] = 0.0
            for c in range(n_caps):
                _stamp_g(ab, node_map[cap_a[c]], node_map[cap_b[c]],
                         1.0 / (cap_esr[c] + dt / cap_c[c]), bw)
            for d in range(n_dio):
                g = 1.0 / dio_ron[d] if dio_on[d] else dio_goff[d]
                _stamp_g(ab, node_map[dio_a[d]], node_map[dio_k[d]], g, bw)
            _stamp_g(ab, node_map[load_a], node_map[load_b], g_load, bw)
            if not _band_factor(ab, bw):
                return -1
            factored[0] = True
        rhs[:] = 0.0
        for c in range(n_caps):
            _stamp_i(rhs, node_map[cap_a[c]], node_map[cap_b[c]],
                     1.0 / (cap_esr[c] + dt / cap_c[c]), cap_v[c], vs)
        for d in range(n_dio):
            if dio_on[d]:
                _stamp_i(rhs, node_map[dio_a[d]], node_map[dio_k[d]],
                         1.0 / dio_ron[d], dio_vf[d], vs)
            else:
                _stamp_i(rhs, node_map[dio_a[d]], node_map[dio_k[d]], dio_goff[d], 0.0, vs)
        _stamp_i(rhs, node_map[load_a], node_map[load_b], g_load, 0.0, vs)
        _band_lu_solve(ab, rhs, x, bw)
        changed = False
        for d in range(n_dio):
            vak = _node_v(node_map[dio_a[d]], x, vs) - _node_v(node_map[dio_k[d]], x, vs)
            on = vak > dio_vf[d]
            if on != (dio_on[d] != 0):
                dio_on[d] = 1 if on else 0
                changed = True
        if not changed:
            status = 0
            break
        factored[0] = False
    for d in range(n_dio):
        vak = _node_v(node_map[dio_a[d]], x, vs) - _node_v(node_map[dio_k[d]], x, vs)
        if dio_on[d]:
            dio_i[d] = (vak - dio_vf[d]) / dio_ron[d]
        else:
            dio_i[d] = dio_goff[d] * vak
    for c in range(n_caps):
        g = 1.0 / (cap_esr[c] + dt / cap_c[c])
        vab = _node_v(node_map[cap_a[c]], x, vs) - _node_v(node_map[cap_b[c]], x, vs)
        cap_v[c] += g * (vab - cap_v[c]) * dt / cap_c[c]
    return status


@numba.njit(cache=True)
def _simulate_kernel(vin_peak, freq, node_map, n_unk, out_idx,
                     cap_a, cap_b, cap_c, cap_esr, cap_v,
                     dio_a, dio_k, dio_vf, dio_ron, dio_goff, dio_on,
                     load_a, load_b, g_load, bw, max_iters,
                     steps_per_cycle, max_cycles, rel_tol, consecutive,
                     samples, history, dio_mean):
    dt = 1.0 / (freq * steps_per_cycle)
    omega = 2.0 * np.pi * freq
    x = np.zeros(n_unk)
    ab = np.zeros((n_unk, 2 * bw + 1))
    rhs = np.zeros(n_unk)
    dio_i = np.zeros(dio_a.shape[0])
    factored = np.zeros(1, dtype=np.bool_)
    nonconv = 0
    streak = 0
    converged = False
    cycles = 0
    load_mean = 0.0
    prev_mean = 0.0
    for cyc in range(max_cycles):
        acc = 0.0
        dio_mean[:] = 0.0
        for s in range(steps_per_cycle):
            t = (cyc * steps_per_cycle + s + 1) * dt
            vs = vin_peak * np.sin(omega * t)
            status = _solve_step(vs, dt, node_map, cap_a, cap_b, cap_c, cap_esr, cap_v,
                                 dio_a, dio_k, dio_vf, dio_ron, dio_goff, dio_on,
                                 load_a, load_b, g_load, bw, max_iters, x, ab, rhs, dio_i,
                                 factored)
            if status < 0:
                return -1, cycles, nonconv, load_mean
            nonconv += status
            v = x[out_idx]
            samples[s] = v
            acc += v
            for d in range(dio_i.shape[0]):
                dio_mean[d] += dio_i[d]
        cycles = cyc + 1
        mean = acc / steps_per_cycle
        history[cyc] = mean
        for d in range(dio_i.shape[0]):
            dio_mean[d] /= steps_per_cycle
        load_mean = mean * g_load
        if cyc > 0:
            rel = abs(mean - prev_mean) / max(abs(mean), 1.0)
            if rel < rel_tol:
                streak += 1
            else:
                streak = 0
            if streak >= consecutive:
                converged = True
                break
        prev_mean = mean
    return (1 if converged else 0), cycles, nonconv, load_mean


# ---------------------------------------------------------------------------
# Python-level API


def step(netlist: Netlist, t: float, dt: float) -> np.ndarray:
    """Advance ``netlist`` by one backward-Euler step ending at time ``t``.

    Returns the full node-voltage vector (index = node number). Capacitor
    voltages and diode states are updated in place.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    n = netlist.n_unknowns
    bw = netlist._bandwidth
    x = np.zeros(n)
    ab = np.zeros((n, 2 * bw + 1))
    rhs = np.zeros(n)
    dio_i = np.zeros(len(netlist.dio_a))
    vs = netlist.source_voltage(t)
    load_a, load_b, r_load = netlist.load
    status = _solve_step(vs, dt, netlist._node_map, netlist.cap_a, netlist.cap_b,
                         netlist.cap_c, netlist.cap_esr, netlist.cap_v,
                         netlist.dio_a, netlist.dio_k, netlist.dio_vf, netlist.dio_ron,
                         netlist.dio_goff, netlist.dio_on, load_a, load_b, 1.0 / r_load,
                         bw, netlist.max_diode_iters, x, ab, rhs, dio_i,
                         np.zeros(1, dtype=np.bool_))
    if status < 0:
        raise SingularNetworkError("singular nodal matrix: check for floating nodes")
    netlist.nonconverged_steps += status
    return netlist.node_voltages(x, t)


def simulate(params: CaseParams, config: SimConfig | None = None) -> CycleWaveform:
    """Run whole cycles from a cold start until the cycle mean settles.

    Convergence: ``|mean_k - mean_{k-1}| / max(|mean_k|, 1 V) < settle_rel_tol``
    on ``settle_consecutive`` consecutive cycles. If ``max_cycles`` is reached
    first the last cycle is still returned with ``converged=False``.
    """
    config = config or SimConfig()
    net = build_netlist(params)
    net.max_diode_iters = config.max_diode_iters
    spc = config.steps_per_cycle
    samples = np.zeros(spc)
    history = np.zeros(config.max_cycles)
    dio_mean = np.zeros(len(net.dio_a))
    load_a, load_b, r_load = net.load
    status, cycles, nonconv, load_mean = _simulate_kernel(
        net.vin_peak, net.freq, net._node_map, net.n_unknowns,
        int(net._node_map[net.output_node]),
        net.cap_a, net.cap_b, net.cap_c, net.cap_esr, net.cap_v,
        net.dio_a, net.dio_k, net.dio_vf, net.dio_ron, net.dio_goff, net.dio_on,
        load_a, load_b, 1.0 / r_load, net._bandwidth, config.max_diode_iters,
        spc, config.max_cycles, config.settle_rel_tol, config.settle_consecutive,
        samples, history, dio_mean,
    )
    if status < 0:
        raise SingularNetworkError("singular nodal matrix during simulation")
    return CycleWaveform(
        samples=samples,
        dt=1.0 / (params.freq * spc),
        v_dc_history=history[:cycles].copy(),
        converged=bool(status),
        cycles_run=int(cycles),
        nonconverged_steps=int(nonconv),
        diode_mean_current=dio_mean,
        load_mean_current=float(load_mean),
    )


WAVEFORM_HEADER = ("t_s", "v_out_v")


def write_waveform_csv(waveform: CycleWaveform, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(WAVEFORM_HEADER)
        for t, v in zip(waveform.times, waveform.samples):
            writer.writerow((repr(float(t)), repr(float(v))))


def read_waveform_csv(path) -> CycleWaveform:
    """Load a single-cycle dump written by :func:`write_waveform_csv`.

    Raises ``ValueError`` on a wrong header, non-numeric cells or a
    non-uniform time axis.
    """
    with open(Path(path), newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != WAVEFORM_HEADER:
            raise ValueError(f"waveform CSV must have header {','.join(WAVEFORM_HEADER)}, got {header}")
        t, v = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise ValueError(f"line {lineno}: expected 2 columns, got {len(row)}")
            try:
                t.append(float(row[0]))
                v.append(float(row[1]))
            except ValueError as exc:
                raise ValueError(f"line {lineno}: {exc}") from None
    if len(v) < 2:
        raise ValueError("waveform CSV has fewer than 2 samples")
    t_arr = np.asarray(t)
    v_arr = np.asarray(v)
    if not (np.all(np.isfinite(t_arr)) and np.all(np.isfinite(v_arr))):
        raise ValueError("waveform CSV contains non-finite values")
    steps = np.diff(t_arr)
    dt = float(np.mean(steps))
    if dt <= 0 or np.max(np.abs(steps - dt)) > 1e-6 * dt:
        raise ValueError("waveform CSV time axis is not uniformly increasing")
    return CycleWaveform(samples=v_arr, dt=dt, v_dc_history=np.array([float(np.mean(v_arr))]),
                         converged=True, cycles_run=1)
