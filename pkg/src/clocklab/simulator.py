"""Packet-level discrete-event simulation of the synchronization protocols.

The engine generates ground-truth clocks on a grid, schedules two-packet
skew exchanges and offset roundtrips at random times on random links,
arbitrates concurrent transmissions under a primary-interference MAC
(active links must form a matching), and drives one of three
estimation protocols:

* ``SS`` — per-link skew ratios smoothed by exponential forgetting,
  nodal values by spatial smoothing; the model-free baseline.
* ``Hybrid`` — a restricted two-node network filter per link, nodal
  skews by spatial smoothing of the link estimates.
* ``MBCSP`` — the distributed whole-network filter.

All estimator state advances on *local* time-stamp differences only —
no protocol code ever reads reference time — which is what makes
trace-driven replay exact: feeding the recorded stamps back through the
same protocol machine reproduces every estimate bit for bit.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field, replace

import numpy as np

from clocklab.clocks import ClockParams, simulate_clock, skew_normalizer
from clocklab.measurement import (
    DelayModel,
    StampRecord,
    draw_delay,
    measurement_epoch,
    offset_delay_estimate,
    predict_receipt,
    skew_measurement,
)
from clocklab.network import (
    NetworkFilterState,
    initial_network_state,
    net_update_distributed,
    nodal_skew_estimate,
    relative_skew_readout,
)
from clocklab.smoothing import RelativeEstimates, SyncGraph, jacobi_step

__all__ = [
    "PROTOCOLS",
    "TRACE_HEADER",
    "Scenario",
    "MetricsReport",
    "read_scenario",
    "quantize_stamp",
    "mac_arbitrate",
    "compute_metrics",
    "run_scenario",
    "run_protocol_ss",
    "run_protocol_hybrid",
    "trace_replay",
    "write_metrics_csv",
    "write_trace_csv",
    "read_trace_csv",
]

PROTOCOLS = ("SS", "Hybrid", "MBCSP")
TRACE_HEADER = "kind,src,dst,seq,s_stamp,r_stamp,true_send_t,true_delay"
STAMP_DIGITS = 12


def quantize_stamp(x: float, digits: int = STAMP_DIGITS) -> float:
    """Quantize a display reading to the stamp resolution (significant digits)."""
    return float(f"{x:.{digits}g}")


# --------------------------------------------------------------------------
# scenario
# --------------------------------------------------------------------------

_SCENARIO_KEYS = {
    "nodes", "edges", "alpha", "dt", "horizon", "protocol", "seed",
    "skew_rate", "offset_rate", "skew_gap", "roundtrip_gap",
    "ss_lambda", "noise_floor",
}
_DELAY_KEYS = {"delay.kind", "delay.mean", "delay.spread", "delay.bound"}


@dataclass(frozen=True)
class Scenario:
    """Complete description of one simulation run.

    Rates are per directed link per unit time; packet separations are
    in grid steps.  The master seed fixes everything: clock paths,
    exchange times, link picks, delays, and MAC tie-breaks.
    """

    graph: SyncGraph
    alpha: float
    epsilons: tuple[float, ...]
    delay: DelayModel
    dt: float = 1e-5
    horizon: float = 12.0
    skew_rate: float = 1.0
    offset_rate: float = 6.0
    skew_gap: int = 40
    roundtrip_gap: int = 20
    protocol: str = "MBCSP"
    seed: int = 0
    ss_lambda: float = 0.05
    noise_floor: float = 1e-6

    def __post_init__(self) -> None:
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"unknown protocol {self.protocol!r}")
        if len(self.epsilons) != self.graph.n + 1:
            raise ValueError(
                f"need one epsilon per node: got {len(self.epsilons)} "
                f"for {self.graph.n + 1} nodes"
            )
        if self.epsilons[0] != 0.0:
            raise ValueError("reference clock must have zero diffusion (epsilon_0 = 0)")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt!r}")
        if not self.horizon > 0:
            raise ValueError(f"horizon must be positive, got {self.horizon!r}")
        if not (self.skew_rate > 0 and self.offset_rate > 0):
            raise ValueError("exchange rates must be positive")
        if self.skew_gap < 1 or self.roundtrip_gap < 1:
            raise ValueError("packet separations must be at least one grid step")
        if not 0.0 < self.ss_lambda <= 1.0:
            raise ValueError(f"ss_lambda must be in (0, 1], got {self.ss_lambda!r}")
        n_dir = 2 * len(self.graph.edges)
        for name, rate in (("skew_rate", self.skew_rate), ("offset_rate", self.offset_rate)):
            if rate * n_dir * self.dt >= 0.5:
                raise ValueError(f"{name} too high for the grid step")

    @property
    def params(self) -> tuple[ClockParams, ...]:
        return tuple(ClockParams(alpha=self.alpha, epsilon=e) for e in self.epsilons)

    @property
    def directed_links(self) -> tuple[tuple[int, int], ...]:
        out = []
        for (i, j) in self.graph.edges:
            out.append((i, j))
            out.append((j, i))
        return tuple(out)


def _parse_value(key: str, raw: str):
    if key in ("nodes", "seed", "skew_gap", "roundtrip_gap"):
        return int(raw)
    if key in ("protocol", "delay.kind"):
        return raw
    if key == "edges":
        edges = []
        for part in raw.replace(",", " ").split():
            a, _, b = part.partition("-")
            edges.append((int(a), int(b)))
        return edges
    return float(raw)


def read_scenario(path) -> Scenario:
    """Parse a ``key = value`` scenario file with ``[section]`` headers."""
    values: dict[str, object] = {}
    epsilons: dict[int, float] = {}
    section = ""
    with open(path) as fh:
        for ln, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("[") and line.endswith("]"):
                name = line[1:-1].strip()
                section = "" if name == "scenario" else name + "."
                continue
            key, eq, val = line.partition("=")
            if not eq:
                raise ValueError(f"line {ln}: expected `key = value`, got {line!r}")
            key = section + key.strip()
            val = val.strip()
            try:
                if key.startswith("epsilon_"):
                    epsilons[int(key[len("epsilon_"):])] = float(val)
                elif key in _SCENARIO_KEYS or key in _DELAY_KEYS:
                    values[key] = _parse_value(key, val)
                else:
                    raise ValueError(f"unknown scenario key {key!r} (line {ln})")
            except ValueError as exc:
                if "unknown scenario key" in str(exc):
                    raise
                raise ValueError(f"line {ln}: bad value for {key!r}: {val!r}") from None
    for req in ("nodes", "edges", "alpha", "delay.kind", "delay.mean"):
        if req not in values:
            raise ValueError(f"missing required scenario key {req!r}")
    n_total = int(values.pop("nodes"))
    if n_total < 2:
        raise ValueError("need at least two nodes (reference plus one)")
    graph = SyncGraph(n=n_total - 1, edges=values.pop("edges"))
    eps = [0.0] * n_total
    for i, e in epsilons.items():
        if not 0 <= i < n_total:
            raise ValueError(f"epsilon_{i} references a node outside 0..{n_total - 1}")
        eps[i] = e
    missing = [i for i in range(1, n_total) if i not in epsilons]
    if missing:
        raise ValueError(f"missing required scenario key 'epsilon_{missing[0]}'")
    delay = DelayModel(
        kind=str(values.pop("delay.kind")),
        mean=float(values.pop("delay.mean")),
        spread=float(values.pop("delay.spread", 0.0)),
        bound=values.pop("delay.bound", None),
    )
    return Scenario(graph=graph, alpha=float(values.pop("alpha")),
                    epsilons=tuple(eps), delay=delay, **values)


# --------------------------------------------------------------------------
# MAC
# --------------------------------------------------------------------------


def mac_arbitrate(pending, rng: np.random.Generator):
    """Admit a matching out of one slot's transmissions.

    ``pending`` is a sequence of objects with ``src``/``dst`` node ids.
    Greedy in uniformly random order: a transmission is admitted iff
    neither endpoint is already busy this slot.  Returns
    ``(admitted, dropped)`` lists.
    """
    if len(pending) <= 1:
        return list(pending), []
    order = rng.permutation(len(pending))
    busy: set[int] = set()
    admitted, dropped = [], []
    for idx in order:
        t = pending[int(idx)]
        if t.src in busy or t.dst in busy:
            dropped.append(t)
        else:
            busy.add(t.src)
            busy.add(t.dst)
            admitted.append(t)
    return admitted, dropped


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricsReport:
    """Per-node mean absolute errors plus run counters.

    Keys are non-reference node ids.  Replay reports carry NaN in the
    columns that need ground truth (offset/skew and the no-sync
    baselines) since a trace records only stamps.
    """

    offset_mae: dict[int, float]
    skew_mae: dict[int, float]
    pred_mae: dict[int, float]
    offset_nosync: dict[int, float]
    skew_nosync: dict[int, float]
    collisions: int = 0
    out_of_order: int = 0
    discarded: int = 0


def compute_metrics(ground_truth, estimates, predictions) -> MetricsReport:
    """Assemble per-node MAEs from aligned series.

    ``ground_truth``: {node: (t, tau, skew)} arrays on the evaluation
    grid; ``estimates``: {node: (offset_est, skew_est)} on the same
    grid; ``predictions``: {node: [(predicted, actual), ...]} receipt
    stamps.  The no-sync columns use the zero-offset and unit-skew
    baselines on the same grid.
    """
    offset_mae, skew_mae, pred_mae = {}, {}, {}
    off_ns, skew_ns = {}, {}
    for node, (t, tau, skew) in ground_truth.items():
        t = np.asarray(t, dtype=float)
        tau = np.asarray(tau, dtype=float)
        skew = np.asarray(skew, dtype=float)
        est_off, est_skew = estimates[node]
        est_off = np.asarray(est_off, dtype=float)
        est_skew = np.asarray(est_skew, dtype=float)
        if not (len(t) == len(tau) == len(skew) == len(est_off) == len(est_skew)):
            raise ValueError(f"length mismatch in series for node {node}")
        if len(t) == 0:
            nan = float("nan")
            offset_mae[node] = skew_mae[node] = nan
            off_ns[node] = skew_ns[node] = nan
            pred_mae[node] = nan
            continue
        true_off = tau - t
        offset_mae[node] = float(np.mean(np.abs(est_off - true_off)))
        skew_mae[node] = float(np.mean(np.abs(est_skew - skew)))
        off_ns[node] = float(np.mean(np.abs(true_off)))
        skew_ns[node] = float(np.mean(np.abs(skew - 1.0)))
        pairs = predictions.get(node, [])
        if pairs:
            arr = np.asarray(pairs, dtype=float)
            pred_mae[node] = float(np.mean(np.abs(arr[:, 0] - arr[:, 1])))
        else:
            pred_mae[node] = float("nan")
    return MetricsReport(offset_mae=offset_mae, skew_mae=skew_mae,
                         pred_mae=pred_mae, offset_nosync=off_ns,
                         skew_nosync=skew_ns)


def write_metrics_csv(report: MetricsReport, path) -> None:
    """CSV dump: ``node,offset_mae,skew_mae,pred_mae,offset_nosync,skew_nosync``."""
    with open(path, "w") as fh:
        fh.write("node,offset_mae,skew_mae,pred_mae,offset_nosync,skew_nosync\n")
        for node in sorted(report.pred_mae):
            fh.write(
                f"{node},{report.offset_mae.get(node, float('nan')):.17g},"
                f"{report.skew_mae.get(node, float('nan')):.17g},"
                f"{report.pred_mae[node]:.17g},"
                f"{report.offset_nosync.get(node, float('nan')):.17g},"
                f"{report.skew_nosync.get(node, float('nan')):.17g}\n"
            )


# --------------------------------------------------------------------------
# trace I/O
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TraceRow:
    kind: str
    src: int
    dst: int
    seq: int
    s_stamp: float
    r_stamp: float
    true_send_t: float | None = None
    true_delay: float | None = None


def write_trace_csv(rows, path) -> None:
    """One row per delivered packet, in arrival-processing order."""
    with open(path, "w") as fh:
        fh.write(TRACE_HEADER + "\n")
        for r in rows:
            tail = ""
            if r.true_send_t is not None:
                tail = f"{r.true_send_t:.17g},{r.true_delay:.17g}"
            else:
                tail = ","
            fh.write(f"{r.kind},{r.src},{r.dst},{r.seq},"
                     f"{r.s_stamp:.17g},{r.r_stamp:.17g},{tail}\n")


def read_trace_csv(path) -> list[TraceRow]:
    """Parse a trace; malformed lines raise with their line number."""
    rows = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != TRACE_HEADER:
            raise ValueError(f"line 1: expected trace header {TRACE_HEADER!r}")
        for ln, raw in enumerate(fh, 2):
            line = raw.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 8:
                raise ValueError(f"line {ln}: expected 8 fields, got {len(parts)}")
            try:
                rows.append(TraceRow(
                    kind=parts[0], src=int(parts[1]), dst=int(parts[2]),
                    seq=int(parts[3]), s_stamp=float(parts[4]),
                    r_stamp=float(parts[5]),
                    true_send_t=float(parts[6]) if parts[6] else None,
                    true_delay=float(parts[7]) if parts[7] else None,
                ))
            except ValueError:
                raise ValueError(f"line {ln}: malformed trace row {line!r}") from None
    return rows


# --------------------------------------------------------------------------
# protocol machine: every estimator decision, driven by stamps alone
# --------------------------------------------------------------------------


def _staleness_predict(st: NetworkFilterState, elapsed: dict[int, float]):
    """Advance selected state rows by their own elapsed local times.

    ``elapsed`` maps state indices (0-based) to nonnegative local-time
    differences.  Each named row decays by its own factor and collects
    its own process noise; unnamed rows are left stale, to be advanced
    when they next participate.
    """
    g = np.ones(st.n)
    add = np.zeros(st.n)
    for k in sorted(elapsed):
        d = elapsed[k]
        decay = np.exp(-st.alpha * d)
        g[k] = decay
        e_m = st.params[k + 1].epsilon ** 2 / (2.0 * st.alpha)
        add[k] = e_m * (1.0 - decay * decay)
    p_new = st.P * np.outer(g, g) + np.diag(add)
    return replace(st, x_hat=g * st.x_hat, P=p_new)


class ProtocolMachine:
    """All protocol state and decisions, fed by packet-arrival facts.

    The engine (or the trace replayer) calls the ``*_arrived`` and
    ``skew_complete`` handlers in arrival order; readouts never mutate
    state, so evaluation sampling cannot perturb a run.
    """

    def __init__(self, sc: Scenario):
        self.sc = sc
        self.n = sc.graph.n
        self.params = sc.params
        self.protocol = sc.protocol
        # relative-offset bookkeeping (identical for all protocols)
        self.rel_off: dict[tuple[int, int], float] = {}
        self.v_off = np.zeros(self.n + 1)
        self.u_off = [0.0] * (self.n + 1)
        # prediction records and counters
        self.pred_pairs: dict[int, list[tuple[float, float]]] = {}
        self.completed: dict[tuple[int, int], int] = {}
        self.out_of_order = 0
        if sc.protocol == "MBCSP":
            self.net = initial_network_state(self.params)
            self.u_node = [0.0] * (self.n + 1)
        elif sc.protocol == "Hybrid":
            # One restricted filter per link.  A link touching the
            # reference is a one-node filter; between two ordinary nodes
            # the filter carries both (their sum stays at its prior —
            # only the difference is ever measured).  ``loc`` maps global
            # node ids to the filter's own node numbering.
            self.links: dict[tuple[int, int], NetworkFilterState] = {}
            self.u_link: dict[tuple[int, int], dict[int, float]] = {}
            self.loc: dict[tuple[int, int], dict[int, int]] = {}
            for (i, j) in sc.graph.edges:
                if 0 in (i, j):
                    other = j if i == 0 else i
                    self.links[(i, j)] = initial_network_state(
                        (self.params[0], self.params[other])
                    )
                    self.loc[(i, j)] = {0: 0, other: 1}
                else:
                    self.links[(i, j)] = initial_network_state(
                        (ClockParams(sc.alpha, 0.0), self.params[i], self.params[j])
                    )
                    self.loc[(i, j)] = {i: 1, j: 2}
                self.u_link[(i, j)] = {i: 0.0, j: 0.0}
            self.rel_logskew: dict[tuple[int, int], float] = {}
            self.w_skew = np.zeros(self.n + 1)
            self.u_skew = [0.0] * (self.n + 1)
        else:  # SS
            self.ratios: dict[tuple[int, int], float] = {}
            self.rel_logskew = {}
            self.w_skew = np.zeros(self.n + 1)

    # ----------------------------------------------------------- helpers

    def _edge_of(self, a: int, b: int) -> tuple[int, int]:
        for e in self.sc.graph.edges:
            if e == (a, b) or e == (b, a):
                return e
        raise ValueError(f"no edge between {a} and {b}")


    def _jacobi(self, node: int, values: dict, v: np.ndarray) -> None:
        if node == 0 or not values:
            return
        edges = tuple(values.keys())
        if not any(node in e for e in edges):
            return
        g = SyncGraph(n=self.n, edges=edges)
        v[node] = jacobi_step(node, v, g, RelativeEstimates(dict(values)))

    # --------------------------------------------------- skew estimation

    def directed_skew(self, i: int, j: int, now_i: float, now_j: float,
                      t_proxy: float) -> float:
        """Current estimate of a_ij = a_j/a_i, staleness-adjusted."""
        if self.protocol == "MBCSP":
            tmp = _staleness_predict(self.net, self._elapsed_net({i: now_i, j: now_j}))
            return relative_skew_readout(tmp, i, j, t_proxy)[0]
        if self.protocol == "Hybrid":
            edge = self._edge_of(i, j)
            tmp = _staleness_predict(
                self.links[edge], self._elapsed_link(edge, {i: now_i, j: now_j})
            )
            return relative_skew_readout(
                tmp, self.loc[edge][i], self.loc[edge][j], t_proxy
            )[0]
        # SS: held ratio, either direction
        if (i, j) in self.ratios:
            return self.ratios[(i, j)]
        if (j, i) in self.ratios:
            return 1.0 / self.ratios[(j, i)]
        return 1.0

    def symmetric_skew(self, i: int, j: int, now_i: float, now_j: float,
                       t_proxy: float) -> float | None:
        """Symmetrized a_ij estimate (SS: the raw held ratio; None if unset)."""
        if self.protocol == "SS":
            if (i, j) in self.ratios:
                return self.ratios[(i, j)]
            if (j, i) in self.ratios:
                return 1.0 / self.ratios[(j, i)]
            return None
        if self.protocol == "MBCSP":
            tmp = _staleness_predict(self.net, self._elapsed_net({i: now_i, j: now_j}))
            return relative_skew_readout(tmp, i, j, t_proxy)[2]
        edge = self._edge_of(i, j)
        tmp = _staleness_predict(
            self.links[edge], self._elapsed_link(edge, {i: now_i, j: now_j})
        )
        return relative_skew_readout(
            tmp, self.loc[edge][i], self.loc[edge][j], t_proxy
        )[2]

    def _elapsed_net(self, now: dict[int, float]) -> dict[int, float]:
        return {
            m - 1: max(0.0, stamp - self.u_node[m])
            for m, stamp in now.items() if m != 0
        }

    def _elapsed_link(self, edge, now: dict[int, float]) -> dict[int, float]:
        out = {}
        for m, stamp in now.items():
            fid = self.loc[edge][m]
            if fid > 0:
                out[fid - 1] = max(0.0, stamp - self.u_link[edge][m])
        return out

    def skew_complete(self, snd: int, rcv: int, s0: float, r0: float,
                      s1: float, r1: float) -> None:
        """Both packets of a skew pair arrived: predict, measure, update."""
        if r1 - r0 <= 0:
            self.out_of_order += 1
        key = (snd, rcv)
        if self.completed.get(key, 0) >= 1:
            a_hat = self.directed_skew(snd, rcv, s0, r0, t_proxy=r0)
            r_hat = predict_receipt(s0, r0, s1, a_hat)
            self.pred_pairs.setdefault(rcv, []).append((r_hat, r1))
        self.completed[key] = self.completed.get(key, 0) + 1

        rec = StampRecord(link=key, s=(s0, s1), r=(r0, r1), kind="skew-pair")
        if self.protocol == "SS":
            ratio = abs((r1 - r0) / (s1 - s0))
            prev = self.ratios.get(key)
            lam = self.sc.ss_lambda
            self.ratios[key] = ratio if prev is None else (1 - lam) * prev + lam * ratio
            self.rel_logskew[key] = math.log(self.ratios[key])
            self._jacobi(rcv, self.rel_logskew, self.w_skew)
            return
        m = skew_measurement(
            rec, self.params[snd], self.params[rcv],
            t_k=measurement_epoch(rec), delay_model=self.sc.delay,
            floor=self.sc.noise_floor,
        )
        if self.protocol == "MBCSP":
            self.net = _staleness_predict(
                self.net, self._elapsed_net({snd: s1, rcv: r1})
            )
            self.net = net_update_distributed(self.net, m)
            if snd != 0:
                self.u_node[snd] = s1
            if rcv != 0:
                self.u_node[rcv] = r1
            return
        # Hybrid: restricted per-link filter, then spatial smoothing of
        # the link estimates into nodal log-skews.
        edge = self._edge_of(snd, rcv)
        fs = _staleness_predict(
            self.links[edge], self._elapsed_link(edge, {snd: s1, rcv: r1})
        )
        fs = net_update_distributed(
            fs, replace(m, link=(self.loc[edge][snd], self.loc[edge][rcv]))
        )
        self.links[edge] = fs
        self.u_link[edge][snd] = s1
        self.u_link[edge][rcv] = r1
        xi, xj = (
            float(fs.x_hat[fid - 1]) if fid > 0 else 0.0
            for fid in (self.loc[edge][edge[0]], self.loc[edge][edge[1]])
        )
        self.rel_logskew[edge] = xj - xi
        for node, stamp in ((snd, s1), (rcv, r1)):
            if node != 0:
                self._jacobi(node, self.rel_logskew, self.w_skew)
                self.u_skew[node] = stamp

    # -------------------------------------------------- offset estimation

    def reply_payload(self, i: int, j: int, s_i: float, r_ij: float) -> float | None:
        """Skew value node j attaches to its roundtrip reply (snapshotted
        when the request arrives, so replay lands on the same state)."""
        return self.symmetric_skew(i, j, s_i, r_ij, t_proxy=r_ij)

    def off_reply_arrived(self, i: int, j: int, s_i: float, r_ij: float,
                          s_j: float, r_ji: float,
                          carried: float | None) -> float | None:
        """Roundtrip closed at the initiator: estimate offset and delays."""
        if self.protocol == "SS":
            a_ij = carried
            if a_ij is None:
                own = self.ratios.get((j, i))
                a_ij = (1.0 / own) if own else None
            if a_ij is None:
                return None
            own = self.ratios.get((j, i))
            a_ji = own if own is not None else 1.0 / a_ij
        else:
            if carried is None:
                return None
            a_ij, a_ji = carried, 1.0 / carried
        rec = StampRecord(link=(i, j), s=(s_i, s_j), r=(r_ij, r_ji),
                          kind="offset-roundtrip")
        tau_ij, _, _ = offset_delay_estimate(rec, a_ij, a_ji)
        self.rel_off[(i, j)] = tau_ij
        self._jacobi(i, self.rel_off, self.v_off)
        if i != 0:
            self.u_off[i] = r_ji
        return tau_ij

    def off_ack_arrived(self, i: int, j: int, tau_ij: float, r_ack: float) -> None:
        """Initiator's ACK reached the replier: mirror the offset."""
        self.rel_off[(j, i)] = -tau_ij
        self._jacobi(j, self.rel_off, self.v_off)
        if j != 0:
            self.u_off[j] = r_ack

    # ----------------------------------------------------- metric readouts

    def nodal_skew(self, m: int, tau_now: float) -> float:
        if m == 0:
            return 1.0
        if self.protocol == "MBCSP":
            tmp = _staleness_predict(self.net, self._elapsed_net({m: tau_now}))
            return nodal_skew_estimate(tmp, m, tau_now)
        if self.protocol == "Hybrid":
            d = max(0.0, tau_now - self.u_skew[m])
            decay = np.exp(-self.sc.alpha * d)
            variances = []
            for edge, fs in self.links.items():
                if m not in edge:
                    continue
                tmp = _staleness_predict(fs, self._elapsed_link(edge, {m: tau_now}))
                if 0 in edge:
                    variances.append(float(tmp.P[0, 0]))
                else:
                    variances.append(float(tmp.P[0, 0] + tmp.P[1, 1] - 2 * tmp.P[0, 1]))
            v_m = float(np.mean(variances)) if variances else 0.0
            return float(
                skew_normalizer(tau_now, self.params[m])
                * np.exp(decay * self.w_skew[m] + 0.5 * v_m)
            )
        return float(np.exp(self.w_skew[m]))

    def offset_estimate(self, m: int, tau_now: float) -> float:
        """Smoothed nodal offset, drift-extrapolated by the nodal skew."""
        if m == 0:
            return 0.0
        a_m = self.nodal_skew(m, tau_now)
        elapsed = max(0.0, tau_now - self.u_off[m])
        return float(self.v_off[m] + (1.0 - 1.0 / a_m) * elapsed)


# --------------------------------------------------------------------------
# event engine
# --------------------------------------------------------------------------


@dataclass
class _Send:
    src: int
    dst: int
    kind: str
    xid: int
    payload: tuple = ()


@dataclass
class _Exchange:
    kind: str          # "skew" | "offset"
    src: int
    dst: int
    xid: int
    deadline: int
    stage: dict = field(default_factory=dict)
    dead: bool = False


def _clock_tables(sc: Scenario, seeds):
    """Ground-truth display/skew tables per node on the full grid."""
    displays, skews = [], []
    for node in range(sc.graph.n + 1):
        traj = simulate_clock(sc.params[node], sc.horizon, sc.dt,
                              seed=int(seeds[node]))
        displays.append(traj.displays)
        skews.append(traj.skews)
    return displays, skews


def run_scenario(sc: Scenario):
    """Run one full simulation; returns ``(MetricsReport, trace rows)``.

    Deterministic in the master seed: independent substreams drive the
    clocks, the two exchange point processes, the delay draws, and the
    MAC tie-breaks, so neither topology nor protocol choice perturbs
    the others' randomness.

    Offset and skew errors are sampled each time a node refreshes its
    nodal estimates (roundtrip completions and their ACKs) — the
    instants at which the protocol actually produces output — and the
    no-sync baselines use the same instants, so the MAE columns compare
    like with like.
    """
    root = np.random.SeedSequence(sc.seed)
    children = root.spawn(sc.graph.n + 4)
    clock_seeds = [c.generate_state(1, np.uint64)[0] for c in children[: sc.graph.n + 1]]
    rng_sched = np.random.default_rng(children[sc.graph.n + 1])
    rng_delay = np.random.default_rng(children[sc.graph.n + 2])
    rng_mac = np.random.default_rng(children[sc.graph.n + 3])

    displays, skews = _clock_tables(sc, clock_seeds)
    n_slots = len(displays[0]) - 1
    dlinks = sc.directed_links
    machine = ProtocolMachine(sc)
    trace: list[TraceRow] = []
    exchanges: dict[int, _Exchange] = {}
    collisions = 0
    discarded = 0
    timeout_slots = max(1, int(round(10.0 * sc.delay.mean / sc.dt)))

    p_skew = sc.skew_rate * len(dlinks) * sc.dt
    p_off = sc.offset_rate * len(dlinks) * sc.dt

    heap: list[tuple[int, int, str, object]] = []
    seq_counter = 0

    def push(slot, kind, data):
        nonlocal seq_counter
        seq_counter += 1
        heapq.heappush(heap, (slot, seq_counter, kind, data))

    xid_counter = 0

    def stamp(node, slot):
        return quantize_stamp(float(displays[node][slot]))

    push(int(rng_sched.geometric(p_skew)), "start-skew", None)
    push(int(rng_sched.geometric(p_off)), "start-offset", None)

    samples: dict[int, list[tuple[float, ...]]] = {
        m: [] for m in range(1, sc.graph.n + 1)
    }

    def record_sample(node: int, slot: int) -> None:
        if node == 0:
            return
        tau_now = float(displays[node][slot])
        samples[node].append((
            slot * sc.dt, tau_now, float(skews[node][slot]),
            machine.offset_estimate(node, tau_now),
            machine.nodal_skew(node, tau_now),
        ))

    def handle_arrival(slot, send: _Send):
        nonlocal discarded
        ex = exchanges.get(send.xid)
        if ex is None or ex.dead:
            return
        if slot > ex.deadline:
            ex.dead = True
            discarded += 1
            return
        r_stamp = stamp(send.dst, slot)
        s_stamp, send_slot, delay_t = send.payload
        trace.append(TraceRow(
            kind=send.kind, src=send.src, dst=send.dst, seq=send.xid,
            s_stamp=s_stamp, r_stamp=r_stamp,
            true_send_t=send_slot * sc.dt, true_delay=delay_t,
        ))
        if send.kind == "skew-a":
            ex.stage["a"] = (s_stamp, r_stamp)
        elif send.kind == "skew-b":
            if "a" not in ex.stage:
                ex.dead = True
                discarded += 1
                return
            s0, r0 = ex.stage["a"]
            machine.skew_complete(ex.src, ex.dst, s0, r0, s_stamp, r_stamp)
            push(slot + 1, "send", _Send(ex.dst, ex.src, "skew-ack", ex.xid))
            ex.stage["done"] = True
        elif send.kind == "skew-ack":
            ex.dead = True  # exchange closed; the ACK carries bookkeeping only
        elif send.kind == "off-req":
            carried = machine.reply_payload(ex.src, ex.dst, s_stamp, r_stamp)
            ex.stage["req"] = (s_stamp, r_stamp)
            ex.stage["carried"] = carried
            push(slot + sc.roundtrip_gap, "send",
                 _Send(ex.dst, ex.src, "off-rep", ex.xid))
        elif send.kind == "off-rep":
            if "req" not in ex.stage:
                ex.dead = True
                discarded += 1
                return
            s_i, r_ij = ex.stage["req"]
            tau_ij = machine.off_reply_arrived(
                ex.src, ex.dst, s_i, r_ij, s_stamp, r_stamp, ex.stage["carried"]
            )
            if tau_ij is not None:
                ex.stage["tau"] = tau_ij
                record_sample(ex.src, slot)
                push(slot + 1, "send", _Send(ex.src, ex.dst, "off-ack", ex.xid))
            else:
                ex.dead = True
        elif send.kind == "off-ack":
            machine.off_ack_arrived(ex.src, ex.dst, ex.stage["tau"], r_stamp)
            record_sample(ex.dst, slot)
            ex.dead = True

    while heap:
        slot = heap[0][0]
        if slot > n_slots:
            break
        arrivals, sends, starts = [], [], []
        while heap and heap[0][0] == slot:
            _, _, kind, data = heapq.heappop(heap)
            if kind == "arrive":
                arrivals.append(data)
            elif kind == "send":
                sends.append(data)
            else:
                starts.append(kind)
        for send in arrivals:
            handle_arrival(slot, send)
        for kind in starts:
            p_kind = p_skew if kind == "start-skew" else p_off
            link = dlinks[int(rng_sched.integers(len(dlinks)))]
            xid_counter += 1
            ex = _Exchange(kind.removeprefix("start-"), link[0], link[1],
                           xid_counter, deadline=slot + timeout_slots)
            exchanges[ex.xid] = ex
            if ex.kind == "skew":
                sends.append(_Send(ex.src, ex.dst, "skew-a", ex.xid))
                push(slot + sc.skew_gap, "send", _Send(ex.src, ex.dst, "skew-b", ex.xid))
            else:
                sends.append(_Send(ex.src, ex.dst, "off-req", ex.xid))
            push(slot + int(rng_sched.geometric(p_kind)), kind, None)
        if sends:
            live = []
            for s in sends:
                ex = exchanges.get(s.xid)
                if ex is not None and not ex.dead:
                    live.append(s)
            admitted, dropped = mac_arbitrate(live, rng_mac)
            collisions += len(dropped)
            for s in dropped:
                exchanges[s.xid].dead = True
            for s in sorted(admitted, key=lambda x: x.xid):
                delay_t = float(draw_delay(sc.delay, rng_delay))
                dslots = max(1, int(round(delay_t / sc.dt)))
                arrive_slot = slot + dslots
                s.payload = (stamp(s.src, slot), slot, dslots * sc.dt)
                if arrive_slot <= n_slots:
                    push(arrive_slot, "arrive", s)

    ground_truth, estimates = {}, {}
    for m, rows in samples.items():
        arr = np.array(rows, dtype=float).reshape(-1, 5)
        ground_truth[m] = (arr[:, 0], arr[:, 1], arr[:, 2])
        estimates[m] = (arr[:, 3], arr[:, 4])
    report = compute_metrics(ground_truth, estimates, machine.pred_pairs)
    report = replace(report, collisions=collisions,
                     out_of_order=machine.out_of_order, discarded=discarded)
    return report, trace


def run_protocol_ss(sc: Scenario):
    """The exponential-forgetting baseline on the given scenario."""
    return run_scenario(replace(sc, protocol="SS"))


def run_protocol_hybrid(sc: Scenario):
    """Per-link filters plus smoothing on the given scenario."""
    return run_scenario(replace(sc, protocol="Hybrid"))


# --------------------------------------------------------------------------
# trace replay
# --------------------------------------------------------------------------


def trace_replay(rows, sc: Scenario) -> MetricsReport:
    """Re-run the protocol machine over recorded stamps only.

    Reproduces the live run's estimates and prediction errors exactly
    (same machine, same call sequence, same quantized stamps).  Ground
    truth is unavailable from a trace, so the offset/skew MAE columns
    are NaN; an empty trace yields an empty report.
    """
    machine = ProtocolMachine(sc)
    pend_a: dict[tuple[int, int, int], tuple[float, float]] = {}
    pend_req: dict[tuple[int, int, int], tuple[float, float, float | None]] = {}
    pend_tau: dict[tuple[int, int, int], float] = {}
    for row in rows:
        key = (row.src, row.dst, row.seq)
        if row.kind == "skew-a":
            pend_a[key] = (row.s_stamp, row.r_stamp)
        elif row.kind == "skew-b":
            if key in pend_a:
                s0, r0 = pend_a.pop(key)
                machine.skew_complete(row.src, row.dst, s0, r0,
                                      row.s_stamp, row.r_stamp)
        elif row.kind == "off-req":
            carried = machine.reply_payload(row.src, row.dst,
                                            row.s_stamp, row.r_stamp)
            pend_req[key] = (row.s_stamp, row.r_stamp, carried)
        elif row.kind == "off-rep":
            back = (row.dst, row.src, row.seq)
            if back in pend_req:
                s_i, r_ij, carried = pend_req.pop(back)
                tau_ij = machine.off_reply_arrived(
                    row.dst, row.src, s_i, r_ij, row.s_stamp, row.r_stamp, carried
                )
                if tau_ij is not None:
                    pend_tau[back] = tau_ij
        elif row.kind == "off-ack":
            if key in pend_tau:
                machine.off_ack_arrived(row.src, row.dst, pend_tau.pop(key),
                                        row.r_stamp)
        # skew-ack carries nothing the estimators use
    nan = float("nan")
    nodes = range(1, sc.graph.n + 1)
    pred = {}
    for m in nodes:
        pairs = machine.pred_pairs.get(m, [])
        if pairs:
            arr = np.asarray(pairs)
            pred[m] = float(np.mean(np.abs(arr[:, 0] - arr[:, 1])))
        else:
            pred[m] = nan
    return MetricsReport(
        offset_mae={m: nan for m in nodes}, skew_mae={m: nan for m in nodes},
        pred_mae=pred, offset_nosync={m: nan for m in nodes},
        skew_nosync={m: nan for m in nodes},
        out_of_order=machine.out_of_order,
    )
