"""One-sided/two-sided CUSUM change detection over per-patch feature streams.

Each monitored feature keeps its own state. The first ``warmup`` samples
only feed the running mean/std estimate. Afterwards each sample is scored
as a normalized residual against the pre-change estimate; the estimate
keeps absorbing calm samples and freezes as soon as either cumulative sum
passes h/2, so an emerging change cannot contaminate its own baseline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import InvalidArgumentError, InvalidStreamError
from .terrafeat import COLUMN_GROUP, FEATURE_COLUMNS, FeatureVector

SIGMA_FLOOR = 1e-12


@dataclass(frozen=True)
class CusumConfig:
    k: float = 0.5        # drift allowance, sigma units
    h: float = 5.0        # alarm threshold, sigma units
    warmup: int = 20      # samples used to seed mean/std
    one_sided: bool = False

    def __post_init__(self):
        if self.h <= 0:
            raise InvalidArgumentError(f"h must be positive, got {self.h}")
        if self.k < 0:
            raise InvalidArgumentError(f"k must be non-negative, got {self.k}")
        if self.warmup < 2:
            raise InvalidArgumentError(f"warmup must be >= 2, got {self.warmup}")


@dataclass
class CusumState:
    """Running state for one monitored feature."""

    config: CusumConfig = field(default_factory=CusumConfig)
    n: int = 0                 # samples seen
    s_plus: float = 0.0
    s_minus: float = 0.0
    frozen: bool = False       # pre-change statistics latched
    _n_est: int = 0
    _mean: float = 0.0
    _m2: float = 0.0

    @property
    def running_mean(self) -> float:
        return self._mean

    @property
    def running_std(self) -> float:
        if self._n_est == 0:
            return 0.0
        return math.sqrt(self._m2 / self._n_est)

    @property
    def warmed_up(self) -> bool:
        return self.n >= self.config.warmup

    def _absorb(self, x: float) -> None:
        self._n_est += 1
        delta = x - self._mean
        self._mean += delta / self._n_est
        self._m2 += delta * (x - self._mean)


def cusum_update(state: CusumState, x: float) -> tuple[CusumState, bool]:
    """Feed one sample; returns (state, alarm).

    The state is updated in place and returned for convenience.
    """
    if not math.isfinite(x):
        raise InvalidArgumentError(f"CUSUM sample must be finite, got {x}")
    cfg = state.config
    if not state.warmed_up:
        state._absorb(x)
        state.n += 1
        return state, False
    state.n += 1
    eps = (x - state.running_mean) / max(state.running_std, SIGMA_FLOOR)
    state.s_plus = max(0.0, state.s_plus + eps - cfg.k)
    if cfg.one_sided:
        state.s_minus = 0.0
    else:
        state.s_minus = max(0.0, state.s_minus - eps - cfg.k)
    peak = max(state.s_plus, state.s_minus)
    alarm = peak > cfg.h
    if not state.frozen:
        if peak > cfg.h / 2.0:
            state.frozen = True
        else:
            state._absorb(x)
    return state, alarm


@dataclass(frozen=True)
class ChangeEvent:
    t: float
    feature: str
    s_plus: float
    s_minus: float
    h: float


def detect_changes(stream, config: CusumConfig = CusumConfig()) -> list[ChangeEvent]:
    """Run one CUSUM per feature column over a time-ordered stream of
    (t, FeatureVector) rows.

    Rows whose group is flagged degenerate are skipped for that group's
    columns. An alarm emits a ChangeEvent and resets that column's state
    to a fresh warmup. Deterministic given stream and config.
    """
    states = {name: CusumState(config) for name in FEATURE_COLUMNS}
    events: list[ChangeEvent] = []
    last_t = None
    for t, fv in stream:
        if last_t is not None and t <= last_t:
            raise InvalidStreamError(f"feature stream is not time-ordered at t={t}")
        last_t = t
        row = fv.as_dict() if isinstance(fv, FeatureVector) else dict(fv)
        for name in FEATURE_COLUMNS:
            group = COLUMN_GROUP[name]
            if row.get(f"deg_{group}", False):
                continue
            x = float(row[name])
            if not math.isfinite(x):
                continue
            _, alarm = cusum_update(states[name], x)
            if alarm:
                st = states[name]
                events.append(ChangeEvent(t, name, st.s_plus, st.s_minus, config.h))
                states[name] = CusumState(config)
    events.sort(key=lambda e: e.t)
    return events
