"""Stage-2 ablation sweeps on top of one stage-1 model."""

from __future__ import annotations

import csv
import io

import numpy as np

from .evalkit import evaluate_2d
from .semantics import guided_attention, probability_entropy
from .trainer import SceneModel, render_instance_features, train_stage2

__all__ = ["KINDS", "ablation_configs", "attention_stats", "run_ablation", "ablation_csv"]

KINDS = ("codebook-size", "attention-structure", "guidance")


def ablation_configs(kind: str, n_instances: int) -> list[tuple[str, dict]]:
    """Named stage-2 overrides for one sweep."""
    if kind == "codebook-size":
        sizes = [max(1, n_instances // 4), max(1, n_instances // 2), n_instances, 2 * n_instances]
        return [(f"n_codes={n}", {"n_codes": n}) for n in sizes]
    if kind == "attention-structure":
        off = dict(lambda_ent=0.0)
        return [
            ("a:mlp-only", dict(use_attention=False, use_residual=False, use_lift=True, **off)),
            ("b:attention-only", dict(use_attention=True, use_residual=False, use_lift=False, **off)),
            ("c:attention+mlp", dict(use_attention=True, use_residual=False, use_lift=True, **off)),
            ("d:+residual", dict(use_attention=True, use_residual=True, use_lift=True, **off)),
            ("e:+guidance", dict(use_attention=True, use_residual=True, use_lift=True)),
        ]
    if kind == "guidance":
        return [("lambda_ent=0", {"lambda_ent": 0.0}), ("lambda_ent=10", {"lambda_ent": 10.0})]
    raise ValueError(f"unknown ablation kind {kind!r}; expected one of {', '.join(KINDS)}")


def attention_stats(model: SceneModel, pack, views=None) -> tuple[float, float]:
    """Mean max attention probability and mean entropy over labeled pixels."""
    views = pack.test_views if views is None else views
    maxp, ent, n = 0.0, 0.0, 0
    for v in views:
        f = render_instance_features(model, v)
        rows = f.reshape(-1, f.shape[-1])[v.valid.reshape(-1)]
        if len(rows) == 0:
            continue
        probs = guided_attention(rows, model.codebooks, model.attention).probs
        if probs is None:
            return float("nan"), float("nan")
        maxp += probs.data.max(axis=1).sum()
        ent += probability_entropy(probs).item() * len(rows)
        n += len(rows)
    return maxp / n, ent / n


def run_ablation(stage1: SceneModel, pack, kind: str, base_overrides: dict | None = None,
                 progress=None) -> list[dict]:
    """Train stage 2 once per configuration; one result row each."""
    n_inst = len(np.unique(pack.class_of_instance)) if pack.scene is None else len(pack.scene.instances)
    rows = []
    for name, over in ablation_configs(kind, n_inst):
        model = stage1.fork(**{**(base_overrides or {}), **over})
        model, _ = train_stage2(model, pack)
        miou, macc, _ = evaluate_2d(model, pack)
        maxp, ent = attention_stats(model, pack)
        row = {"config": name, "n_codes": model.cfg.n_codes, "lambda_ent": model.cfg.lambda_ent,
               "miou": miou, "macc": macc, "max_prob": maxp, "entropy": ent}
        rows.append(row)
        if progress is not None:
            progress(row)
    return rows


def ablation_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    cols = ["config", "n_codes", "lambda_ent", "miou", "macc", "max_prob", "entropy"]
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([r[c] if isinstance(r[c], str) else repr(float(r[c])) if isinstance(r[c], float)
                    else r[c] for c in cols])
    return buf.getvalue()
