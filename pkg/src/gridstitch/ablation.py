"""Factorial ablations on the stitching suite.

Factors: advantage weights on/off, value prompt on/off, concat vs.
separate tokenization, plus a return-target grid for the return-to-go
baseline. Cells run independently (optionally in parallel processes);
failures are recorded per cell and never abort the suite. Evaluation
samples actions categorically so per-seed success rates are graded
rather than all-or-nothing, which is what the confidence intervals in
the summary are computed over.
"""

from __future__ import annotations

import csv
import json
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import presets
from .rollout import rollout_dt, rollout_vadt


@dataclass
class SuiteConfig:
    name: str = "stitch"
    seeds: int = 5
    episodes: int = 20
    train_steps: int = 400
    sample_eval: bool = True
    prompt_levels: tuple[bool, ...] = (True, False)
    weight_levels: tuple[bool, ...] = (True, False)
    tokenizations: tuple[str, ...] = ("concat", "separate")
    dt_rtg_multipliers: tuple[float, ...] = (0.5, 1.0, 1.1, 1.5, 2.0)
    include_dt_grid: bool = True

    @classmethod
    def from_file(cls, path: str | Path) -> "SuiteConfig":
        blob = json.loads(Path(path).read_text(encoding="utf-8"))
        cfg = cls()
        for key, value in blob.items():
            if not hasattr(cfg, key):
                raise ValueError(f"unknown suite field '{key}'")
            setattr(cfg, key, tuple(value) if isinstance(value, list) else value)
        return cfg


def expand_cells(suite: SuiteConfig) -> list[dict]:
    """One dict per training run: the full factorial plus the dt grid."""
    cells = []
    for prompt_on in suite.prompt_levels:
        for weights_on in suite.weight_levels:
            for tok in suite.tokenizations:
                for seed in range(suite.seeds):
                    cells.append({
                        "variant": "vadt", "prompt_on": prompt_on,
                        "weights_on": weights_on, "tokenization": tok,
                        "seed": seed, "episodes": suite.episodes,
                        "train_steps": suite.train_steps,
                        "sample_eval": suite.sample_eval,
                    })
    if suite.include_dt_grid:
        for seed in range(suite.seeds):
            cells.append({
                "variant": "dt", "seed": seed, "episodes": suite.episodes,
                "train_steps": suite.train_steps,
                "sample_eval": suite.sample_eval,
                "rtg_multipliers": list(suite.dt_rtg_multipliers),
            })
    return cells


class _ZeroPrompt:
    prompt_dim = 1

    def prompt(self, s: int) -> np.ndarray:
        return np.zeros(1)


def run_cell(cell: dict) -> dict:
    """Train and evaluate one suite cell; returns row dicts or an error."""
    try:
        if cell["variant"] == "vadt":
            env, ds, table, high, policy = presets.fixture_vadt(
                seed=cell["seed"], tokenization=cell["tokenization"],
                steps=cell["train_steps"], weights_on=cell["weights_on"],
                prompt_on=cell["prompt_on"])
            eval_high = high if cell["prompt_on"] else _ZeroPrompt()
            report = rollout_vadt(env, eval_high, policy,
                                  episodes=cell["episodes"],
                                  seed=1000 + cell["seed"],
                                  sample=cell["sample_eval"])
            return {"cell": cell, "rows": [{
                "variant": "vadt",
                "prompt_on": cell["prompt_on"],
                "weights_on": cell["weights_on"],
                "tokenization": cell["tokenization"],
                "rtg": "",
                "seed": cell["seed"],
                "success_rate": report.success_rate,
                "mean_return": report.mean_return,
            }]}
        env, ds, policy = presets.fixture_dt(seed=cell["seed"],
                                             steps=cell["train_steps"])
        max_ret = ds.max_return()
        rows = []
        for mult in cell["rtg_multipliers"]:
            report = rollout_dt(env, policy, initial_rtg=mult * max_ret,
                                episodes=cell["episodes"],
                                seed=1000 + cell["seed"],
                                sample=cell["sample_eval"])
            rows.append({
                "variant": "dt", "prompt_on": True, "weights_on": False,
                "tokenization": "concat", "rtg": mult,
                "seed": cell["seed"],
                "success_rate": report.success_rate,
                "mean_return": report.mean_return,
            })
        return {"cell": cell, "rows": rows}
    except Exception as e:  # cells must not kill the suite
        return {"cell": cell, "error": f"{type(e).__name__}: {e}",
                "trace": traceback.format_exc()}


@dataclass
class SuiteResult:
    rows: list[dict] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)

    def cell_groups(self) -> dict[tuple, list[dict]]:
        groups: dict[tuple, list[dict]] = {}
        for row in self.rows:
            key = (row["variant"], row["prompt_on"], row["weights_on"],
                   row["tokenization"], row["rtg"])
            groups.setdefault(key, []).append(row)
        return groups

    def summarize(self) -> list[dict]:
        out = []
        for key, rows in sorted(self.cell_groups().items(), key=lambda kv: str(kv[0])):
            src = np.array([r["success_rate"] for r in rows])
            ret = np.array([r["mean_return"] for r in rows])
            n = len(rows)
            out.append({
                "variant": key[0], "prompt_on": key[1], "weights_on": key[2],
                "tokenization": key[3], "rtg": key[4], "n_seeds": n,
                "success_mean": float(src.mean()),
                "success_ci95": _ci_halfwidth(src),
                "return_mean": float(ret.mean()),
                "return_ci95": _ci_halfwidth(ret),
            })
        return out


def _ci_halfwidth(x: np.ndarray) -> float:
    """95% normal-approximation half-width over seeds."""
    if len(x) < 2:
        return 0.0
    return float(1.96 * np.std(x, ddof=1) / np.sqrt(len(x)))


def run_suite(suite: SuiteConfig, workers: int = 1) -> SuiteResult:
    cells = expand_cells(suite)
    result = SuiteResult()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(run_cell, cells))
    else:
        outcomes = [run_cell(c) for c in cells]
    for outcome in outcomes:
        if "error" in outcome:
            result.failures.append(outcome)
        else:
            result.rows.extend(outcome["rows"])
    # deterministic row order regardless of worker scheduling
    result.rows.sort(key=lambda r: (r["variant"], str(r["prompt_on"]),
                                    str(r["weights_on"]), r["tokenization"],
                                    str(r["rtg"]), r["seed"]))
    return result


_COLUMNS = ["variant", "prompt_on", "weights_on", "tokenization", "rtg", "seed",
            "success_rate", "mean_return"]


def write_matrix_csv(result: SuiteResult, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_COLUMNS)
        for row in result.rows:
            writer.writerow([row[c] if not isinstance(row[c], float) else repr(row[c])
                             for c in _COLUMNS])


def write_summary(result: SuiteResult, path: str | Path) -> None:
    blob = {"cells": result.summarize(),
            "failures": [{"cell": f["cell"], "error": f["error"]}
                         for f in result.failures]}
    Path(path).write_text(json.dumps(blob, sort_keys=True, indent=2) + "\n",
                          encoding="utf-8")
