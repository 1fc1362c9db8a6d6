"""Regenerate the bundled price/demand table and forecast-error history.

Run from the repository root: ``python3 scripts/make_default_data.py``.
"""
from pathlib import Path

import numpy as np

DATA = Path(__file__).resolve().parents[1] / "src" / "gridsched" / "data"

NOMINAL_KW = 3490.0
PV_KW = 1750.0
LOAD_SHAPE = [0.60, 0.55, 0.50, 0.50, 0.55, 0.65, 0.75, 0.85, 0.90, 0.92, 0.95, 0.97,
              1.00, 0.98, 0.95, 0.93, 0.95, 1.00, 0.98, 0.95, 0.90, 0.80, 0.70, 0.65]
PV_SHAPE = [0, 0, 0, 0, 0, 0.05, 0.20, 0.40, 0.60, 0.80, 0.90, 1.00,
            1.00, 0.95, 0.85, 0.70, 0.50, 0.30, 0.10, 0, 0, 0, 0, 0]

# fractional forecast errors: a 30/70 mix of under- and over-forecast regimes
ERR_WEIGHTS = (0.3, 0.7)
ERR_MEANS = (-0.04, 0.015)
ERR_STDS = (0.015, 0.02)
HISTORY_DAYS = 120
SEED = 20240601


def day_ahead_price(hour: int) -> float:
    if 17 <= hour <= 20:
        return 0.12
    if 7 <= hour <= 22:
        return 0.08
    return 0.05


def write_prices(path: Path) -> None:
    lines = ["hour,c_da,c_rt,c_pv,c_s,g_dl,g_pv_forecast"]
    for t in range(24):
        c = day_ahead_price(t)
        lines.append(f"{t},{c!r},{round(1.5 * c, 6)!r},0.03,{round(0.5 * c, 6)!r},"
                     f"{round(NOMINAL_KW * LOAD_SHAPE[t], 6)!r},{round(PV_KW * PV_SHAPE[t], 6)!r}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_history(path: Path) -> None:
    rng = np.random.default_rng(SEED)
    n = 24 * HISTORY_DAYS
    shape = np.tile(LOAD_SHAPE, HISTORY_DAYS)
    forecast = NOMINAL_KW * shape * rng.uniform(0.95, 1.05, n)
    comp = rng.choice(2, size=n, p=ERR_WEIGHTS)
    err = rng.normal(np.take(ERR_MEANS, comp), np.take(ERR_STDS, comp))
    actual = forecast * (1.0 + err)
    lines = ["timestamp,forecast,actual"]
    for k in range(n):
        day, hour = divmod(k, 24)
        lines.append(f"d{day:03d}h{hour:02d},{forecast[k]:.6f},{actual[k]:.6f}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


if __name__ == "__main__":
    write_prices(DATA / "prices.csv")
    write_history(DATA / "history.csv")
