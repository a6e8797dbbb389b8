"""Module ablation (embedding x fusion x input mode) and the neighbouring-band sweep."""

from __future__ import annotations

import logging
import statistics
from dataclasses import dataclass, field, replace

from .data import HsiCube
from .metrics import EvalResult, evaluate
from .model import PATCH, PIXEL, ModelConfig
from .training import recipe, train

logger = logging.getLogger(__name__)

SWEEP_N = (1, 3, 5, 7, 9, 11)


@dataclass
class Variant:
    name: str
    config: ModelConfig
    results: list[EvalResult] = field(default_factory=list)

    def _values(self, key: str) -> list[float]:
        return [getattr(r, key) for r in self.results]

    def mean(self, key: str) -> float:
        return statistics.fmean(self._values(key))

    def stdev(self, key: str) -> float:
        vals = self._values(key)
        return statistics.stdev(vals) if len(vals) > 1 else 0.0

    def median(self, key: str) -> float:
        return statistics.median(self._values(key))


def ablation_variants(base: ModelConfig, n_gse: int = 7, include_patch: bool = True,
                      patch_side: int = 7) -> list[Variant]:
    """Transformer baseline, +GSE, +CAF, GSE+CAF pixel-wise, then GSE+CAF patch-wise."""
    px = replace(base, input_mode=PIXEL)
    out = [
        Variant("vit", replace(px, n=1, caf=False)),
        Variant("gse", replace(px, n=min(n_gse, base.m), caf=False)),
        Variant("caf", replace(px, n=1, caf=True)),
        Variant("gse+caf", replace(px, caf=True)),
    ]
    if include_patch:
        out.append(Variant("gse+caf patch", replace(base, caf=True, input_mode=PATCH,
                                                    patch_side=patch_side)))
    return out


def sweep_variants(base: ModelConfig) -> list[tuple[int, Variant, Variant]]:
    rows = []
    for n in SWEEP_N:
        if n <= base.m:
            rows.append((n, Variant(f"gse n={n}", replace(base, n=n, caf=False)),
                         Variant(f"gse+caf n={n}", replace(base, n=n, caf=True))))
    return rows


def run_variant(variant: Variant, cube: HsiCube, seeds, **train_overrides) -> Variant:
    for seed in seeds:
        tc = recipe(variant.config, cube, seed=seed, **train_overrides)
        logger.info("training %s seed %d for %d epochs", variant.name, seed, tc.epochs)
        params, _ = train(cube, variant.config, tc)
        variant.results.append(evaluate(params, variant.config, cube, "test"))
    return variant


def ordering_checks(variants: list[Variant]) -> dict[str, bool]:
    """Median-OA orderings the full model is expected to exhibit."""
    oa = {v.name: v.median("oa") for v in variants}
    checks = {
        "vit < gse": oa["vit"] < oa["gse"],
        "vit < caf": oa["vit"] < oa["caf"],
        "gse+caf > gse": oa["gse+caf"] > oa["gse"],
        "gse+caf > caf": oa["gse+caf"] > oa["caf"],
    }
    if "gse+caf patch" in oa:
        checks["patch > pixel"] = oa["gse+caf patch"] > oa["gse+caf"]
    return checks


def _cell(v: Variant, key: str, pct: bool, spread: bool) -> str:
    f = 100.0 if pct else 1.0
    digits = 2 if pct else 4
    text = f"{f * v.mean(key):.{digits}f}"
    if spread:
        text += f" ± {f * v.stdev(key):.{digits}f}"
    return text


def format_ablation(variants: list[Variant]) -> str:
    spread = any(len(v.results) > 1 for v in variants)
    width = 18 if spread else 9
    head = f"{'variant':<15} {'input':<6} {'n':>3} {'CAF':>4} " + " ".join(
        f"{h:>{width}}" for h in ("OA (%)", "AA (%)", "kappa")) + f" {'median OA':>10}"
    lines = [head]
    for v in variants:
        c = v.config
        lines.append(f"{v.name:<15} {c.input_mode:<6} {c.n:>3} {'on' if c.caf else 'off':>4} "
                     + " ".join(f"{_cell(v, k, k != 'kappa', spread):>{width}}"
                                for k in ("oa", "aa", "kappa"))
                     + f" {100 * v.median('oa'):>10.2f}")
    return "\n".join(lines) + "\n"


def format_sweep(rows: list[tuple[int, Variant, Variant]]) -> str:
    spread = any(len(v.results) > 1 for _, a, b in rows for v in (a, b))
    width = 18 if spread else 9
    cols = [f"{p} {h}" for p in ("GSE", "GSE+CAF") for h in ("OA", "AA", "kappa")]
    lines = [f"{'n':>3} " + " ".join(f"{c:>{width}}" for c in cols)]
    for n, gse, both in rows:
        cells = [_cell(v, k, k != "kappa", spread) for v in (gse, both) for k in ("oa", "aa", "kappa")]
        lines.append(f"{n:>3} " + " ".join(f"{c:>{width}}" for c in cells))
    return "\n".join(lines) + "\n"
