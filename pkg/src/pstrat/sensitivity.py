"""Sensitivity grids over eps (principal ignorability) and xi (monotonicity).

Grids over eps reuse one set of score fits, because eps only enters the
weights. A grid over xi refits the score model at every value.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import estimators as est
from .dataset import ExperimentData, summarize
from .estimators import PipelineConfig, SensitivityParams
from .pscore import Regime, xi_upper_bound

EPS_RANGE = (0.5, 2.0)
EPS_POINTS = 13
XI_POINTS = 11


def default_eps_grid() -> np.ndarray:
    return np.geomspace(*EPS_RANGE, EPS_POINTS)


def default_xi_grid(data: ExperimentData, k: int = XI_POINTS) -> np.ndarray:
    return np.linspace(0.0, xi_upper_bound(summarize(data)), k)


def parse_grid(text: str) -> np.ndarray:
    """``"v"`` gives one value, ``"lo:hi:k"`` gives k values from lo to hi.

    eps-style grids (positive ``lo``) are log-spaced, a grid starting at 0 is linear.
    """
    parts = text.split(":")
    try:
        if len(parts) == 1:
            return np.array([float(parts[0])])
        if len(parts) == 3:
            lo, hi, k = float(parts[0]), float(parts[1]), int(parts[2])
            if k < 1 or hi < lo:
                raise ValueError
            return np.geomspace(lo, hi, k) if lo > 0 else np.linspace(lo, hi, k)
    except ValueError:
        pass
    raise ValueError(f"bad grid {text!r}: expected a number or lo:hi:k")


@dataclass
class GridPoint:
    params: dict
    estimates: list

    def covers_zero(self) -> dict:
        return {(str(e.stratum), e.variant): e.covers(0.0) for e in self.estimates}


@dataclass
class SensitivityGrid:
    axes: dict
    points: list
    config: dict = field(default_factory=dict)

    def rows(self):
        for gp in self.points:
            for e in gp.estimates:
                yield {
                    **gp.params,
                    "stratum": str(e.stratum),
                    "variant": e.variant,
                    "point": e.point,
                    "se": e.se,
                    "ci_low": e.ci[0],
                    "ci_high": e.ci[1],
                    "covers_zero": e.covers(0.0),
                    "failed_replicates": e.failed_replicates,
                }

    def to_csv(self, path=None) -> str:
        rows = list(self.rows())
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "axes": {k: [float(v) for v in vals] for k, vals in self.axes.items()},
            "rows": list(self.rows()),
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    def lookup(self, stratum, variant="adjusted", **params) -> est.PceEstimate:
        for gp in self.points:
            if all(np.isclose(gp.params[k], v) for k, v in params.items()):
                for e in gp.estimates:
                    if str(e.stratum) == str(stratum) and e.variant == variant:
                        return e
        raise KeyError((stratum, variant, params))


def _eps_grid(data, cfg, combos, B, level, seed, jobs):
    full = est.full_sample(data, cfg)
    init = full.scores.coef[0] if cfg.regime.tag != "strong-mono" else None
    fits = est.bootstrap_fits(data, cfg.regime, B, seed, init, cfg.boot_em, jobs)
    points = []
    for params in combos:
        c = replace(cfg, sens=SensitivityParams(**params))
        rep = est.bootstrap(data, c, B, level, seed, fits=fits, full=full)
        points.append(GridPoint({**{"eps": 1.0, "eps1": 1.0, "eps0": 1.0}, **params,
                                 "xi": cfg.regime.xi}, rep.estimates))
    return points


def grid_eps_strong(data: ExperimentData, eps_values=None, B: int = 300, level: float = 0.95,
                    seed: int = 0, *, config: PipelineConfig | None = None, jobs: int = 1) -> SensitivityGrid:
    """Estimates over eps under strong monotonicity."""
    cfg = replace(config or PipelineConfig(), regime=Regime.strong(), sens=SensitivityParams())
    eps_values = default_eps_grid() if eps_values is None else np.asarray(eps_values, float)
    points = _eps_grid(data, cfg, [{"eps": float(v)} for v in eps_values], B, level, seed, jobs)
    return SensitivityGrid({"eps": eps_values}, points, {**cfg.to_dict(), "B": B, "level": level, "seed": seed})


def grid_eps_mono(data: ExperimentData, eps1_values=None, eps0_values=None, B: int = 300,
                  level: float = 0.95, seed: int = 0, *, config: PipelineConfig | None = None,
                  regime: Regime | None = None, jobs: int = 1) -> SensitivityGrid:
    """Full factorial over (eps1, eps0) under monotonicity (or fixed xi)."""
    cfg = replace(config or PipelineConfig(), regime=regime or Regime.mono(), sens=SensitivityParams())
    e1 = default_eps_grid() if eps1_values is None else np.asarray(eps1_values, float)
    e0 = default_eps_grid() if eps0_values is None else np.asarray(eps0_values, float)
    combos = [{"eps1": float(a), "eps0": float(b)} for a in e1 for b in e0]
    points = _eps_grid(data, cfg, combos, B, level, seed, jobs)
    return SensitivityGrid({"eps1": e1, "eps0": e0}, points,
                           {**cfg.to_dict(), "B": B, "level": level, "seed": seed})


def grid_xi(data: ExperimentData, xi_values=None, B: int = 300, level: float = 0.95, seed: int = 0,
            *, config: PipelineConfig | None = None, jobs: int = 1) -> SensitivityGrid:
    """Refit and estimate at each xi; the default grid spans [0, upper bound]."""
    cfg = config or PipelineConfig()
    bound = xi_upper_bound(summarize(data))
    xs = default_xi_grid(data) if xi_values is None else np.asarray(xi_values, float)
    if (xs < 0).any() or (xs > bound + 1e-12).any():
        raise ValueError(f"xi values must lie in [0, {bound:.6g}]")
    points = []
    for xi in xs:
        c = replace(cfg, regime=Regime.no_mono(float(xi)))
        rep = est.bootstrap(data, c, B, level, seed, jobs=jobs)
        points.append(GridPoint({"eps": 1.0, "eps1": c.sens.eps1, "eps0": c.sens.eps0, "xi": float(xi)},
                                rep.estimates))
    meta = {**cfg.to_dict(), "regime": "no-mono", "xi": None}
    return SensitivityGrid({"xi": xs}, points, {**meta, "xi_bound": bound, "B": B, "level": level, "seed": seed})
