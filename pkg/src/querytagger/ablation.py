"""Ablation sweeps: run pipeline variants over seeds and tabulate test F1.

A cell is a small dict of overrides on a base :class:`PipelineConfig`:

``pretrain``  run Stage I (bool)
``weak``      run Stage II (bool)
``mode``      Stage III loss: vanilla | virtual | adversarial
``k``         number of search titles appended to each query

Cells that share a seed and a Stage I / Stage II prefix reuse its weights.
"""
from __future__ import annotations

import dataclasses
import itertools
import statistics
import traceback
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .training import Corpora, PipelineConfig, build_vocab, run_pipeline

AXES = ("pretrain", "weak", "mode", "k")


def apply_cell(base: PipelineConfig, cell: dict) -> PipelineConfig:
    unknown = set(cell) - set(AXES)
    if unknown:
        raise ValueError(f"unknown ablation axes: {sorted(unknown)}")
    cfg = dataclasses.replace(base)
    if "pretrain" in cell:
        cfg.skip_stage1 = not cell["pretrain"]
    if "weak" in cell:
        cfg.skip_stage2 = not cell["weak"]
    if "mode" in cell:
        cfg.stage3 = dataclasses.replace(cfg.stage3, mode=cell["mode"])
    if "k" in cell:
        cfg.title_count = int(cell["k"])
    return cfg


def cell_name(cell: dict) -> str:
    return ",".join(f"{a}={cell[a]}" for a in AXES if a in cell) or "base"


def cross_product(axes: dict[str, Sequence]) -> list[dict]:
    names = [a for a in AXES if a in axes]
    return [dict(zip(names, combo)) for combo in itertools.product(*(axes[a] for a in names))]


@dataclass
class CellResult:
    cell: dict
    seed: int
    f1: float | None
    brand_f1: float | None
    error: str | None = None


@dataclass
class Sweep:
    results: list[CellResult] = field(default_factory=list)

    def scores(self, cell: dict, metric: str = "f1") -> dict[int, float]:
        return {r.seed: getattr(r, metric) for r in self.results
                if r.cell == cell and r.error is None}

    def mean(self, cell: dict, metric: str = "f1") -> float:
        return statistics.fmean(self.scores(cell, metric).values())

    def table(self) -> list[dict]:
        """One row per cell: mean and standard deviation across seeds."""
        rows, seen = [], []
        for r in self.results:
            if r.cell not in seen:
                seen.append(r.cell)
        for cell in seen:
            runs = [r for r in self.results if r.cell == cell]
            ok = [r for r in runs if r.error is None]
            row = {"cell": cell_name(cell), **cell, "n": len(ok), "failed": len(runs) - len(ok)}
            for metric in ("f1", "brand_f1"):
                vals = [getattr(r, metric) for r in ok]
                row[f"{metric}_mean"] = statistics.fmean(vals) if vals else float("nan")
                row[f"{metric}_std"] = statistics.stdev(vals) if len(vals) > 1 else 0.0
            rows.append(row)
        return rows

    def to_tsv(self) -> str:
        rows = self.table()
        cols = ["cell", *AXES, "n", "failed", "f1_mean", "f1_std", "brand_f1_mean", "brand_f1_std"]
        lines = ["\t".join(cols)]
        for row in rows:
            lines.append("\t".join(_fmt(row.get(c, "")) for c in cols))
        return "\n".join(lines) + "\n"

    def title_series(self) -> str:
        """``k  f1_mean  f1_std`` rows in ascending k, for the title-count plot."""
        rows = sorted((r for r in self.table() if "k" in r), key=lambda r: r["k"])
        lines = ["k\tf1_mean\tf1_std\tbrand_f1_mean"]
        lines += [f"{r['k']}\t{_fmt(r['f1_mean'])}\t{_fmt(r['f1_std'])}\t{_fmt(r['brand_f1_mean'])}"
                  for r in rows]
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def run_ablation(corpora: Corpora, base: PipelineConfig, cells: Iterable[dict],
                 seeds: Sequence[int], progress=None) -> Sweep:
    """Run every cell for every seed. A failing cell is recorded and the
    sweep continues."""
    cells = list(cells)
    vocab = build_vocab(corpora)
    sweep = Sweep()
    for seed in seeds:
        cache: dict = {}
        for cell in cells:
            cfg = dataclasses.replace(apply_cell(base, cell), seed=seed)
            try:
                res = run_pipeline(corpora, cfg, vocab=vocab, cache=cache)
                out = CellResult(cell, seed, res.test.f1, res.test.category_f1("Brand"))
            except Exception as exc:  # noqa: BLE001 - recorded, sweep goes on
                out = CellResult(cell, seed, None, None,
                                 f"{type(exc).__name__}: {exc}\n{traceback.format_exc(limit=3)}")
            sweep.results.append(out)
            if progress is not None:
                progress(out)
    return sweep
