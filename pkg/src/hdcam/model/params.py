"""Parameter accounting and reconciliation against published counts."""
from __future__ import annotations

import itertools
from dataclasses import dataclass

from .config import PUBLISHED_PARAMS, LedgerToggles, ModelConfig, named_variant
from .model import HdcamModel


@dataclass
class ParamReport:
    total: int
    per_layer: list[tuple[str, int]]     # block prefix -> count, program order
    per_stage: dict[str, int]            # stage1..stage3, classifier


def _stage_of(prefix: str) -> str:
    if prefix.startswith("stem"):
        return "stage1"
    if prefix.startswith("stages."):
        return "stage" + prefix.split(".")[1]
    return "classifier"


def _block_of(name: str) -> str:
    parts = name.split(".")
    if parts[0] == "stages":
        return ".".join(parts[:4]) if parts[2] == "blocks" else ".".join(parts[:3])
    return parts[0]


def count_parameters(model: HdcamModel) -> ParamReport:
    per_layer: dict[str, int] = {}
    for name, p in model.named_parameters():
        blk = _block_of(name)
        per_layer[blk] = per_layer.get(blk, 0) + p.size
    per_stage: dict[str, int] = {}
    for blk, n in per_layer.items():
        st = _stage_of(blk)
        per_stage[st] = per_stage.get(st, 0) + n
    return ParamReport(sum(per_layer.values()), list(per_layer.items()), per_stage)


def count_config(cfg: ModelConfig) -> int:
    return count_parameters(HdcamModel(cfg, init="zeros")).total


def format_report(report: ParamReport, cfg: ModelConfig, target: int | None = None) -> str:
    lines = [f"{'layer':<24}{'params':>10}"]
    lines += [f"{blk:<24}{n:>10,}" for blk, n in report.per_layer]
    lines.append("")
    lines.append(f"{'stage':<24}{'params':>10}")
    lines += [f"{st:<24}{n:>10,}" for st, n in report.per_stage.items()]
    lines.append("")
    lines.append(f"{'total':<24}{report.total:>10,}")
    if target is not None:
        delta = report.total - target
        lines.append(f"{'published target':<24}{target:>10,}")
        lines.append(f"{'delta':<24}{delta:>+10,}  ({100.0 * delta / target:+.2f}%)")
    return "\n".join(lines)


def published_targets() -> list[tuple[str, ModelConfig, int]]:
    """Every (label, config, published count) pair the reconciliation fits."""
    from .ablation import table5_grid

    rows = [(name, named_variant(name), n) for name, n in PUBLISHED_PARAMS.items()]
    rows += [(f"table5:{r.id}", r.config, r.published_params) for r in table5_grid() if r.published_params]
    return rows


@dataclass
class Reconciliation:
    toggles: LedgerToggles
    counts: dict[str, int]
    total_abs_deviation: int
    max_rel_deviation: float


def reconcile(expansions=(1, 2, 4)) -> list[Reconciliation]:
    """Count every published row under each toggle combination.

    Sorted best first by summed absolute deviation.
    """
    targets = published_targets()
    results = []
    for bias, ln_affine, layer_scale, final_norm, expansion in itertools.product(
        (True, False), (True, False), (True, False), (True, False), expansions
    ):
        tg = LedgerToggles(bias=bias, ln_affine=ln_affine, expansion=expansion,
                           layer_scale=layer_scale, final_norm=final_norm)
        counts = {label: count_config(cfg.replace(toggles=tg)) for label, cfg, _ in targets}
        devs = [counts[label] - n for label, _, n in targets]
        rel = max(abs(d) / n for d, (_, _, n) in zip(devs, targets))
        results.append(Reconciliation(tg, counts, sum(abs(d) for d in devs), rel))
    results.sort(key=lambda r: (r.total_abs_deviation, r.max_rel_deviation))
    return results


def format_reconciliation(results: list[Reconciliation], top: int = 8) -> str:
    targets = published_targets()
    lines = ["toggle combinations ranked by total |count - published| over "
             f"{len(targets)} published rows", ""]
    head = f"{'bias':<6}{'ln_aff':<8}{'exp':<5}{'lscale':<8}{'fnorm':<7}{'sum|dev|':>10}{'max rel':>10}"
    lines.append(head)
    for r in results[:top]:
        t = r.toggles
        lines.append(f"{t.bias!s:<6}{t.ln_affine!s:<8}{t.expansion:<5}{t.layer_scale!s:<8}"
                     f"{t.final_norm!s:<7}{r.total_abs_deviation:>10,}{100 * r.max_rel_deviation:>9.2f}%")
    best = results[0]
    lines += ["", "best combination, per row:"]
    for label, _, n in targets:
        c = best.counts[label]
        lines.append(f"  {label:<12}{c:>8,} vs {n:>8,}  ({c - n:+,})")
    return "\n".join(lines)
