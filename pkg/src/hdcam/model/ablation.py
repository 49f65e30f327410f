"""Ablation grids: encoder counts, MHSAtten placement, hierarchical on/off."""
from __future__ import annotations

from dataclasses import dataclass

from .config import VARIANTS, ModelConfig, named_variant, require_valid


@dataclass(frozen=True)
class AblationRow:
    grid: str
    id: str
    label: str
    config: ModelConfig
    published_params: int | None = None


# id: (HDConv counts, MHSAtten counts, published parameter count)
TABLE5 = {
    1: ((1, 3, 5), (0, 0, 0), 37673),
    2: ((1, 3, 4), (0, 0, 1), 54249),
    3: ((1, 2, 4), (0, 1, 1), 58441),
    4: ((0, 2, 4), (1, 1, 1), 60817),
    5: ((1, 2, 4), (0, 0, 0), 31785),
    6: ((1, 2, 4), (0, 0, 1), 52969),
    7: ((1, 2, 4), (0, 1, 1), 58441),
    8: ((1, 2, 4), (1, 1, 1), 61585),
}


def table5_grid(base: str = "Small") -> list[AblationRow]:
    cfg = named_variant(base)
    rows = []
    for i, (hd, mh, n) in TABLE5.items():
        c = cfg.replace(hdconv_counts=hd, mhsatten_counts=mh, name=f"{base}-table5-{i}")
        label = f"HDConv={list(hd)}, MHSAtten={list(mh)}"
        rows.append(AblationRow("table5", str(i), label, require_valid(c), n if base == "Small" else None))
    return rows


def table6_grid() -> list[AblationRow]:
    rows = []
    for name in VARIANTS:
        for pos, tag in (("stage_begin", "begin"), ("stage_end", "end")):
            c = named_variant(name, mhsatten_position=pos, name=f"{name}-{tag}")
            rows.append(AblationRow("table6", f"{name}-{tag}", f"{name}, MHSAtten at stage {tag}", c))
    return rows


def table4_grid() -> list[AblationRow]:
    rows = []
    for name in VARIANTS:
        for hier, tag in ((True, "hier"), (False, "flat")):
            c = named_variant(name, hierarchical=hier, name=f"{name}-{tag}")
            what = "hierarchical" if hier else "non-hierarchical"
            rows.append(AblationRow("table4", f"{name}-{tag}", f"{name}, {what} DwConv", c))
    return rows


GRIDS = {"table4": table4_grid, "table5": table5_grid, "table6": table6_grid}


def build_ablation_grid(which: str | None = None) -> list[AblationRow]:
    """One grid by name, or all three in table4, table5, table6 order."""
    if which is not None:
        return GRIDS[which]()
    return table4_grid() + table5_grid() + table6_grid()


def ablation_config(row_id: int | str, base: str = "Small") -> AblationRow:
    for row in table5_grid(base):
        if row.id == str(row_id):
            return row
    raise KeyError(row_id)
