"""Electron-then-ion coincidence runs and detection-efficiency estimation.

An ionization event produces an electron and an ion at the same point. The
stack starts in electron polarity and every electrode ramps exponentially to
the opposite sign, so the electron is detected within nanoseconds while the
slower ion follows the ramped fields to the detector. The ion efficiency of a
CEM is the fraction of electron detections followed by an ion detection.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from .fieldsolve import BasisSet
from .geometry import GeometrySpec, expand_voltages
from .tracer import (
    ELECTRON,
    RB87_ION,
    FieldSource,
    ImpactRecord,
    Species,
    TraceOptions,
    Trajectory,
    VoltageSchedule,
    trace,
)

ELECTRON_PHASE = {"chip": 0.0, "ext": 50.0, "con": 1000.0, "dt": 2000.0, "cem": 2300.0}
ELECTRON_MODE = {"chip": 0.0, "ext": 50.0, "con": 1000.0, "dt": 100.0, "cem": 120.0}
ION_WORKING_POINT = {"chip": 0.0, "ext": -50.0, "con": -1000.0, "dt": -2000.0, "cem": -2300.0}
DEFAULT_TAU = {"chip": 2e-6, "ext": 0.7e-6, "con": 2e-6, "dt": 2e-6, "cem": 2e-6}
BIRTH = (0.0, 0.0, -2e-3)


@dataclass(frozen=True)
class SwitchPlan:
    """Electron-phase voltages ramping to ion-phase voltages from t = 0.

    Keys may name electrode groups ("ext") or single segments ("ext1").
    A tau of 0 switches instantly; tau = inf never leaves the electron phase.
    """

    electron: Mapping[str, float] = field(default_factory=lambda: dict(ELECTRON_PHASE))
    ion: Mapping[str, float] | None = None  # default: sign-inverted electron phase
    tau: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_TAU))

    def ion_phase(self) -> dict[str, float]:
        if self.ion is not None:
            return dict(self.ion)
        return {k: -v for k, v in self.electron.items()}

    def schedule(self, spec: GeometrySpec) -> VoltageSchedule:
        u0 = expand_voltages(spec, dict(self.electron))
        ut = expand_voltages(spec, self.ion_phase())
        tau = expand_voltages(spec, dict(self.tau))
        return VoltageSchedule.switch(u0, ut, tau)

    def with_tau(self, tau: float) -> "SwitchPlan":
        return replace(self, tau={k: tau for k in set(self.electron) | set(self.tau)})

    def to_dict(self) -> dict:
        return {"electron": dict(self.electron), "ion": self.ion_phase(), "tau_s": {k: _num(v) for k, v in self.tau.items()}}

    @classmethod
    def from_dict(cls, d: Mapping) -> "SwitchPlan":
        tau = {k: (math.inf if v is None or v == "inf" else float(v)) for k, v in d.get("tau_s", DEFAULT_TAU).items()}
        return cls(dict(d.get("electron", ELECTRON_PHASE)), d.get("ion"), tau)


def _num(v: float):
    return None if math.isinf(v) else v


@dataclass
class CoincidenceEvent:
    pair_id: int
    birth: np.ndarray
    electron: ImpactRecord
    ion: ImpactRecord
    electron_path: Trajectory | None = None
    ion_path: Trajectory | None = None

    @property
    def electron_detected(self) -> bool:
        return self.electron.detected

    @property
    def ion_detected(self) -> bool:
        return self.ion.detected

    @property
    def delay(self) -> float:
        """Ion arrival time after electron detection."""
        return self.ion.time - self.electron.time

    @property
    def loss(self) -> str | None:
        for who, rec in (("electron", self.electron), ("ion", self.ion)):
            if not rec.detected:
                where = rec.electrode or (f"cem {rec.cem}" if rec.cem is not None else "")
                return f"{who}: {rec.termination} {where}".strip()
        return None


def run_coincidence(
    basis: BasisSet,
    spec: GeometrySpec,
    birth: Sequence[float] = BIRTH,
    plan: SwitchPlan = SwitchPlan(),
    pair_id: int = 0,
    opts: TraceOptions = TraceOptions(),
    ion: Species = RB87_ION,
    source: FieldSource | None = None,
) -> CoincidenceEvent:
    """Trace the electron and the ion of one event through the switching fields, both from t = 0."""
    if source is None:
        source = FieldSource.build(basis, plan.schedule(spec))
    zero = np.zeros(3)
    e = trace(ELECTRON, birth, zero, source, opts=opts)
    i = trace(ion, birth, zero, source, opts=opts)
    keep = opts.record
    return CoincidenceEvent(pair_id, np.asarray(birth, dtype=float), e.impact, i.impact, e if keep else None, i if keep else None)


def run_many(
    basis: BasisSet,
    spec: GeometrySpec,
    births: np.ndarray,
    plan: SwitchPlan = SwitchPlan(),
    opts: TraceOptions = TraceOptions(record=False),
    threads: int = 1,
) -> list[CoincidenceEvent]:
    """Independent events in input order, for any thread count."""
    births = np.atleast_2d(np.asarray(births, dtype=float))
    source = FieldSource.build(basis, plan.schedule(spec))

    def one(k: int) -> CoincidenceEvent:
        return run_coincidence(basis, spec, births[k], plan, k, opts, source=source)

    if threads > 1 and len(births) > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(one, range(len(births))))
    return [one(k) for k in range(len(births))]


@dataclass
class EfficiencyEstimate:
    """Per-CEM conditional ion detection probability with Clopper-Pearson intervals."""

    eta: dict[str, float]
    interval: dict[str, tuple[float, float]]
    electrons: dict[str, int]
    coincidences: dict[str, int]
    confidence: float = 0.95
    method: str = "clopper-pearson"

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "confidence": self.confidence,
            "cems": {
                k: {
                    "eta": _num_or_none(self.eta[k]),
                    "interval": list(self.interval[k]),
                    "electrons_detected": self.electrons[k],
                    "coincident_ions": self.coincidences[k],
                }
                for k in self.eta
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _num_or_none(v: float):
    return None if math.isnan(v) else v


def binomial_interval(k: int, n: int, confidence: float = 0.95) -> tuple[float, float]:
    if n == 0:
        return (0.0, 1.0)
    ci = stats.binomtest(k, n).proportion_ci(confidence_level=confidence, method="exact")
    return (float(ci.low), float(ci.high))


def estimate_efficiency(
    events: Sequence[CoincidenceEvent],
    ion_eta: float | Mapping[int, float],
    electron_eta: float | Mapping[int, float] = 1.0,
    n_pairs: int | None = None,
    seed: int = 0,
    confidence: float = 0.95,
) -> EfficiencyEstimate:
    """Apply Bernoulli detection to the geometric hits and estimate ion efficiency.

    Events are reused cyclically when ``n_pairs`` exceeds their number. An
    electron counts when it hits a CEM opening and passes its Bernoulli draw;
    the ion of that pair then counts toward the electron's CEM when it too
    hits an opening and passes its draw. The result is keyed by CEM number
    plus "all".
    """
    if not events:
        raise ValueError("no events")
    n = len(events) if n_pairs is None else int(n_pairs)
    rng = np.random.default_rng(seed)

    def eta_of(model, cem) -> float:
        if isinstance(model, Mapping):
            return float(model.get(cem, 0.0))
        return float(model)

    u = rng.random((n, 2))
    ne: dict[str, int] = {}
    nc: dict[str, int] = {}
    for p in range(n):
        ev = events[p % len(events)]
        if not ev.electron_detected or u[p, 0] >= eta_of(electron_eta, ev.electron.cem):
            continue
        key = str(ev.electron.cem)
        hit = ev.ion_detected and u[p, 1] < eta_of(ion_eta, ev.ion.cem)
        for k in (key, "all"):
            ne[k] = ne.get(k, 0) + 1
            nc[k] = nc.get(k, 0) + int(hit)
    if not ne:
        raise ValueError("no electron was detected; efficiency is undefined")
    keys = sorted(ne, key=lambda k: (k == "all", k))
    return EfficiencyEstimate(
        eta={k: nc[k] / ne[k] for k in keys},
        interval={k: binomial_interval(nc[k], ne[k], confidence) for k in keys},
        electrons={k: ne[k] for k in keys},
        coincidences={k: nc[k] for k in keys},
        confidence=confidence,
    )


EVENT_COLUMNS = (
    "pair_id", "birth_x_m", "birth_y_m", "birth_z_m",
    "electron_t_s", "electron_x_m", "electron_y_m", "electron_cem", "electron_termination",
    "ion_t_s", "ion_x_m", "ion_y_m", "ion_cem", "ion_termination",
    "delay_s", "loss",
)


def event_log_csv(events: Sequence[CoincidenceEvent]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EVENT_COLUMNS)
    for ev in events:
        e, i = ev.electron, ev.ion
        w.writerow(
            [ev.pair_id, *(repr(float(c)) for c in ev.birth)]
            + [repr(e.time), repr(float(e.position[0])), repr(float(e.position[1])), "" if e.cem is None else e.cem, e.termination]
            + [repr(i.time), repr(float(i.position[0])), repr(float(i.position[1])), "" if i.cem is None else i.cem, i.termination]
            + [repr(ev.delay), ev.loss or ""]
        )
    return buf.getvalue()
