"""Exogenous time series: synthetic generation, CSV ingestion, splits.

A scenario holds whole days of per-agent load and PV plus shared outdoor
temperature and import/export prices. The last ``n_test_days`` days are
the test split; normalisation statistics come from the training days only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

START = pd.Timestamp("2024-01-01T00:00:00")
STAT_KEYS = ("net_demand", "price_import", "price_export", "temp")


class SchemaError(ValueError):
    pass


class GapError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Scenario:
    """Day-aligned series; per-agent arrays have shape ``(n_agents, n_days * T)``."""

    dt: float
    n_steps: int
    agent_ids: tuple[str, ...]
    load: np.ndarray
    pv: np.ndarray
    temp: np.ndarray
    price_import: np.ndarray
    price_export: np.ndarray
    n_test_days: int = 1
    stats: dict = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        total = self.temp.shape[0]
        if total % self.n_steps:
            raise ValueError("series length must be a whole number of days")
        for name in ("load", "pv"):
            if getattr(self, name).shape != (len(self.agent_ids), total):
                raise ValueError(f"{name} must have shape (n_agents, {total})")
        for name in ("price_import", "price_export"):
            if getattr(self, name).shape != (total,):
                raise ValueError(f"{name} must have length {total}")
        if np.any(self.price_import < 0) or np.any(self.price_export < 0):
            raise ValueError("prices must be nonnegative")
        if np.any(self.pv < 0):
            raise ValueError("PV must be nonnegative")
        if not 0 <= self.n_test_days < self.n_days:
            raise ValueError("need at least one training day")
        if self.stats is None:
            object.__setattr__(self, "stats", compute_stats(self))

    @property
    def n_days(self) -> int:
        return self.temp.shape[0] // self.n_steps

    @property
    def n_agents(self) -> int:
        return len(self.agent_ids)

    @property
    def train_days(self) -> np.ndarray:
        return np.arange(self.n_days - self.n_test_days)

    @property
    def test_days(self) -> np.ndarray:
        return np.arange(self.n_days - self.n_test_days, self.n_days)

    def day_slice(self, day: int) -> slice:
        return slice(day * self.n_steps, (day + 1) * self.n_steps)

    def episodes(self, days) -> dict:
        """Stack the exogenous inputs of the given days, leading axis = episode."""
        days = np.asarray(days, dtype=int)
        T = self.n_steps
        idx = days[:, None] * T + np.arange(T)
        return {
            "load": self.load[:, idx].transpose(1, 2, 0),
            "pv": self.pv[:, idx].transpose(1, 2, 0),
            "temp": self.temp[idx],
            "price_import": self.price_import[idx],
            "price_export": self.price_export[idx],
            "days": days,
        }

    def timestamps(self) -> pd.DatetimeIndex:
        return START + pd.to_timedelta(np.arange(self.temp.shape[0]) * self.dt, unit="h")


def compute_stats(sc: Scenario) -> dict:
    cols = np.concatenate([np.arange(d * sc.n_steps, (d + 1) * sc.n_steps) for d in sc.train_days])
    net = sc.load[:, cols] - sc.pv[:, cols]
    out = {
        "net_demand": net,
        "price_import": sc.price_import[cols],
        "price_export": sc.price_export[cols],
        "temp": sc.temp[cols],
    }
    return {k: (float(np.min(v)), float(np.max(v))) for k, v in out.items()}


def generate_synthetic(
    seed: int,
    n_agents: int,
    n_days: int,
    dt: float = 0.25,
    n_steps: int | None = None,
    n_test_days: int = 1,
    pv_capacity: tuple[float, float] = (0.0, 4.0),
    load_base: tuple[float, float] = (0.3, 0.8),
    temp_mean: float = 6.0,
    price_base: float = 0.15,
    price_peak: float = 0.18,
    export_factor: float = 0.4,
    agent_ids=None,
) -> Scenario:
    """Deterministic diurnal load, midday PV, winter temperature, peak prices.

    PV is a half-sine between 06:00 and 18:00 scaled by a per-agent
    capacity and a per-day clearness factor, and exactly zero elsewhere.
    Import price has an afternoon bump centred at 17:30; export price is
    ``export_factor`` times the import price.
    """
    if n_agents < 1 or n_days < 1:
        raise ValueError("counts must be >= 1")
    if n_steps is None:
        n_steps = int(round(24.0 / dt))
    rng = np.random.default_rng(seed)
    total = n_days * n_steps
    k = np.arange(total)
    hour = (k * dt) % 24.0
    day = k // n_steps

    base = rng.uniform(*load_base, size=(n_agents, 1))
    shape = 1.0 + 0.6 * np.exp(-(((hour - 8.0) / 1.5) ** 2)) + 1.2 * np.exp(-(((hour - 19.0) / 2.0) ** 2))
    day_factor = rng.uniform(0.85, 1.15, size=(n_agents, n_days))[:, day]
    load = base * shape * day_factor * (1.0 + 0.05 * rng.standard_normal((n_agents, total)))
    load = np.maximum(load, 0.05)

    cap = rng.uniform(*pv_capacity, size=(n_agents, 1))
    daylight = (hour > 6.0) & (hour < 18.0)
    sine = np.where(daylight, np.sin(np.pi * (hour - 6.0) / 12.0), 0.0)
    clearness = rng.uniform(0.3, 1.0, size=n_days)[day]
    pv = cap * sine * clearness * (1.0 + 0.03 * rng.standard_normal((n_agents, total)))
    pv = np.where(daylight, np.maximum(pv, 0.0), 0.0)

    temp = (
        temp_mean
        + 4.0 * np.sin(2 * np.pi * (hour - 9.0) / 24.0)
        + rng.normal(0.0, 2.0, size=n_days)[day]
        + 0.3 * rng.standard_normal(total)
    )
    imp = price_base + price_peak * np.exp(-(((hour - 17.5) / 1.5) ** 2)) + 0.01 * rng.standard_normal(total)
    imp = np.maximum(imp, 0.02)
    ids = tuple(agent_ids) if agent_ids is not None else tuple(f"agent{i}" for i in range(n_agents))
    return Scenario(dt, n_steps, ids, load, pv, temp, imp, export_factor * imp, n_test_days)


def desk_scenario(agent_ids, seed: int = 0, **overrides) -> Scenario:
    """Hourly 21-day scenario with the last 5 days held out for evaluation."""
    kw = dict(n_agents=len(agent_ids), n_days=21, dt=1.0, n_test_days=5, agent_ids=agent_ids)
    kw.update(overrides)
    return generate_synthetic(seed, **kw)


# ---------------------------------------------------------------------------
# CSV interchange


_SCHEMAS = {
    "households": ["timestamp", "agent_id", "load_kw", "pv_kw"],
    "weather": ["timestamp", "temp_c"],
    "prices": ["timestamp", "price_import", "price_export"],
}


def save_csv(sc: Scenario, directory: str | Path) -> Path:
    """Write the three schema CSVs plus ``scenario.json``; returns the JSON path."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    ts = sc.timestamps().strftime("%Y-%m-%dT%H:%M:%S")
    n = sc.n_agents
    hh = pd.DataFrame({
        "timestamp": np.tile(ts, n),
        "agent_id": np.repeat(sc.agent_ids, len(ts)),
        "load_kw": sc.load.ravel(),
        "pv_kw": sc.pv.ravel(),
    })
    hh.to_csv(d / "households.csv", index=False, float_format="%.17g")
    pd.DataFrame({"timestamp": ts, "temp_c": sc.temp}).to_csv(d / "weather.csv", index=False, float_format="%.17g")
    pd.DataFrame({"timestamp": ts, "price_import": sc.price_import, "price_export": sc.price_export}).to_csv(
        d / "prices.csv", index=False, float_format="%.17g"
    )
    meta = {
        "households": "households.csv",
        "weather": "weather.csv",
        "prices": "prices.csv",
        "dt": sc.dt,
        "n_steps": sc.n_steps,
        "n_test_days": sc.n_test_days,
    }
    path = d / "scenario.json"
    path.write_text(json.dumps(meta, indent=1))
    return path


def _read(path, kind):
    try:
        df = pd.read_csv(path, float_precision="round_trip")
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise SchemaError(f"{path}: {exc}") from None
    want = _SCHEMAS[kind]
    if list(df.columns) != want:
        raise SchemaError(f"{path}: expected header {','.join(want)}, got {','.join(map(str, df.columns))}")
    try:
        df["timestamp"] = pd.to_datetime(df["timestamp"], format="ISO8601")
    except (ValueError, TypeError) as exc:
        raise SchemaError(f"{path}: bad timestamp ({exc})") from None
    return df


def _native_step(ts: pd.DatetimeIndex, what: str) -> float:
    if len(ts) < 2:
        raise SchemaError(f"{what}: need at least two timestamps")
    diffs = np.diff(ts.asi8) / 3.6e12  # hours
    step = float(np.median(diffs))
    if step <= 0:
        raise SchemaError(f"{what}: timestamps must increase")
    if np.any(diffs > 2 * step + 1e-9):
        raise GapError(f"{what}: gap of {diffs.max():g} h exceeds one missing step of {step:g} h")
    return step


def interpolate_series(times_h: np.ndarray, values: np.ndarray, dt: float, native: float) -> np.ndarray:
    """Linear interpolation onto a ``dt`` grid covering ``len * native`` hours.

    Points past the last sample hold its value; endpoints are preserved.
    """
    n_out = int(round((times_h[-1] - times_h[0] + native) / dt))
    grid = times_h[0] + dt * np.arange(n_out)
    values = np.atleast_2d(values)
    return np.stack([np.interp(grid, times_h, row) for row in values])


def load_csv(paths: dict, config: dict | None = None) -> Scenario:
    """Read the schema CSVs, interpolate to ``dt`` and split into days.

    ``paths`` maps ``households``/``weather``/``prices`` to files. ``config``
    may give ``dt`` (default: native step), ``n_steps`` (default: one day)
    and ``n_test_days``. Trailing partial days are dropped.
    """
    config = dict(config or {})
    hh = _read(paths["households"], "households")
    we = _read(paths["weather"], "weather")
    pr = _read(paths["prices"], "prices")

    if hh.duplicated(["timestamp", "agent_id"]).any():
        raise SchemaError("households: duplicate (timestamp, agent_id) rows")
    agent_ids = tuple(str(a) for a in pd.unique(hh["agent_id"]))
    hh["agent_id"] = hh["agent_id"].astype(str)
    load_w = hh.pivot(index="timestamp", columns="agent_id", values="load_kw")[list(agent_ids)]
    pv_w = hh.pivot(index="timestamp", columns="agent_id", values="pv_kw")[list(agent_ids)]
    if load_w.isna().any().any():
        raise GapError("households: agents do not share the same timestamps")
    we = we.set_index("timestamp").sort_index()
    pr = pr.set_index("timestamp").sort_index()

    native = _native_step(load_w.index, "households")
    for df, what in ((we, "weather"), (pr, "prices")):
        _native_step(df.index, what)
    dt = float(config.get("dt", native))
    t0 = min(load_w.index[0], we.index[0], pr.index[0])

    def hours(idx):
        return (idx - t0).total_seconds().to_numpy() / 3600.0

    load = interpolate_series(hours(load_w.index), load_w.to_numpy().T, dt, native)
    pv = interpolate_series(hours(pv_w.index), pv_w.to_numpy().T, dt, native)
    temp = interpolate_series(hours(we.index), we["temp_c"].to_numpy(), dt, _native_step(we.index, "weather"))[0]
    pstep = _native_step(pr.index, "prices")
    imp = interpolate_series(hours(pr.index), pr["price_import"].to_numpy(), dt, pstep)[0]
    exp = interpolate_series(hours(pr.index), pr["price_export"].to_numpy(), dt, pstep)[0]

    n_steps = int(config.get("n_steps", round(24.0 / dt)))
    total = min(load.shape[1], temp.shape[0], imp.shape[0])
    total -= total % n_steps
    if total == 0:
        raise SchemaError("series shorter than one episode")
    return Scenario(
        dt, n_steps, agent_ids, load[:, :total], pv[:, :total], temp[:total], imp[:total], exp[:total],
        int(config.get("n_test_days", 1)),
    )


def load_scenario(path: str | Path) -> Scenario:
    """Load a ``scenario.json`` written by :func:`save_csv`."""
    path = Path(path)
    meta = json.loads(path.read_text())
    base = path.parent
    paths = {k: base / meta[k] for k in ("households", "weather", "prices")}
    return load_csv(paths, {k: meta[k] for k in ("dt", "n_steps", "n_test_days") if k in meta})
