"""Ablation sweeps: one training run per row, all sharing a seed and dataset."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import MANIFOLD_SETTINGS, VARIANTS, RunConfig
from .data import DatasetManifest
from .errors import ConfigError

AXES = ("loop", "design", "manifold", "curvature", "scale", "injection", "extra-feature")
DEFAULT_LOOP_PAIRS = ((1, 2), (1, 3), (2, 2))
CURVATURES = (0.5, 1.0, 1.5, 2.0)
SCALES = (0.5, 1.0, 2.0)

COLUMNS = (
    "axis", "row", "pair", "variant", "manifold", "injection", "extra_feature", "curvature", "scale",
    "learn_scale", "unique_layers", "loops", "effective_depth", "params", "p_i", "p_c", "final_loss", "seconds",
)


@dataclass
class AblationRow:
    label: str
    overrides: dict
    pair: str = ""


def loop_label(units: int, loops: int) -> str:
    """``Base(Ux1)`` for a plain pass, ``Loop(UxL)`` otherwise."""
    return f"Base({units}x1)" if loops == 0 else f"Loop({units}x{loops})"


def axis_rows(axis: str, loop_pairs=DEFAULT_LOOP_PAIRS) -> list[AblationRow]:
    if axis == "loop":
        rows = []
        for units, loops in loop_pairs:
            if units < 1 or loops < 1:
                raise ConfigError(f"loop pair {units}x{loops} needs positive entries")
            pair = f"{units}x{loops}"
            for lp in (0, loops):
                rows.append(AblationRow(
                    loop_label(units, lp),
                    {"loop.enc_layers": units, "loop.dec_layers": units, "loop.loops": lp},
                    pair,
                ))
        return rows
    if axis == "design":
        return [AblationRow(v, {"loop.variant": v}) for v in VARIANTS]
    if axis == "manifold":
        return [AblationRow(m, {"align.manifold": m}) for m in MANIFOLD_SETTINGS]
    if axis == "curvature":
        rows = [AblationRow(f"c={c:g}", {"align.manifold": "poincare", "align.curvature": c}) for c in CURVATURES]
        rows.append(AblationRow("learnable", {"align.manifold": "adaptive-poincare", "align.curvature": 1.0}))
        return rows
    if axis == "scale":
        rows = [AblationRow(f"s={s:g}", {"align.scale": s, "align.learn_scale": False}) for s in SCALES]
        rows.append(AblationRow("learnable", {"align.scale": 1.0, "align.learn_scale": True}))
        return rows
    if axis == "injection":
        return [
            AblationRow("concat", {"loop.injection": "concat"}),
            AblationRow("add", {"loop.injection": "add", "loop.add_length_align": True}),
            AblationRow("attention", {"loop.injection": "attention"}),
        ]
    if axis == "extra-feature":
        return [AblationRow(f, {"loop.extra_feature": f}) for f in ("none", "noise", "temporal")]
    raise ConfigError(f"unknown ablation axis {axis!r}; choose from {AXES}")


def count_parameters(cfg: RunConfig, vocab_size: int) -> int:
    from .model import SignModel

    return SignModel(cfg, vocab_size, np.random.default_rng(0)).num_parameters()


def ablate(
    axis: str,
    base: RunConfig,
    manifest: DatasetManifest,
    out_dir: str | Path,
    loop_pairs=DEFAULT_LOOP_PAIRS,
    dry_run: bool = False,
    log=None,
) -> list[dict]:
    """Run every row of ``axis`` on top of ``base`` and write ``results.csv``.

    With ``dry_run`` only the structural columns (parameter count and
    effective depth) are filled, which is enough for the pairing audit.
    """
    from .train import train

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vocab_size = len(manifest.vocabulary)
    results = []
    for i, row in enumerate(axis_rows(axis, loop_pairs)):
        cfg = base.with_overrides({**row.overrides, "output_dir": str(out / f"{i:02d}")}).validate()
        record = {
            "axis": axis,
            "row": row.label,
            "pair": row.pair,
            "variant": cfg.loop.variant,
            "manifold": cfg.align.manifold,
            "injection": cfg.loop.injection,
            "extra_feature": cfg.loop.extra_feature,
            "curvature": cfg.align.curvature,
            "scale": cfg.align.scale,
            "learn_scale": cfg.align.learn_scale,
            "unique_layers": cfg.loop.unique_layers,
            "loops": cfg.loop.loops,
            "effective_depth": cfg.loop.effective_depth,
            "params": count_parameters(cfg, vocab_size),
            "p_i": "",
            "p_c": "",
            "final_loss": "",
            "seconds": "",
        }
        if not dry_run:
            start = time.perf_counter()
            result = train(cfg, manifest)
            steps = [h for h in result.history if h["kind"] == "step"]
            record.update(
                p_i=result.evaluation["p_i"],
                p_c=result.evaluation["p_c"],
                final_loss=steps[-1]["joint"] if steps else "",
                seconds=round(time.perf_counter() - start, 2),
            )
        results.append(record)
        if log is not None:
            log(record)
    write_results(out / "results.csv", results)
    return results


def write_results(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=COLUMNS)
        writer.writeheader()
        writer.writerows(rows)


def pair_mismatches(rows: list[dict]) -> list[str]:
    """Loop-axis pairs whose Base and Loop parameter counts differ."""
    by_pair: dict[str, set] = {}
    for r in rows:
        if r["pair"]:
            by_pair.setdefault(r["pair"], set()).add(r["params"])
    return [p for p, counts in by_pair.items() if len(counts) != 1]
