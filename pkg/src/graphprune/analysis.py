"""Mask similarity metrics, per-layer sparsity reports and magnitude-based masks.

Similarities are computed over *pruned* sets: bit ``True`` marks a pruned
decision unit.  Degenerate cases are total: two empty pruned sets have
Jaccard 1.0, and cosine with an all-zero vector is 0.0.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import MaskLengthError
from .netmodel import WEIGHTED, NetworkSpec, PruningMask, flops, keep_vectors, layer_flops, unit_l1_norms


def _bits(mask) -> np.ndarray:
    return mask.bits if isinstance(mask, PruningMask) else np.asarray(mask, dtype=bool)


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = _bits(a), _bits(b)
    if a.shape != b.shape:
        raise MaskLengthError(f"masks differ in length: {a.size} vs {b.size}")
    return a, b


def jaccard(a, b) -> float:
    a, b = _pair(a, b)
    union = int((a | b).sum())
    return 1.0 if union == 0 else int((a & b).sum()) / union


def cosine(a, b) -> float:
    a, b = _pair(a, b)
    na, nb = int(a.sum()), int(b.sum())
    if na == 0 or nb == 0:
        return 0.0
    return int((a & b).sum()) / math.sqrt(na * nb)


def hamming(a, b) -> int:
    a, b = _pair(a, b)
    return int((a != b).sum())


def _layer_units(net: NetworkSpec) -> dict[int, np.ndarray]:
    return {l.id: net.indexing.units_of_layer(l.id) for l in net.layers if l.kind in WEIGHTED}


def per_layer_similarity(net: NetworkSpec, a: PruningMask, b: PruningMask) -> dict[int, dict]:
    a_bits, b_bits = _pair(a, b)
    out = {}
    for lid, units in _layer_units(net).items():
        x, y = a_bits[units], b_bits[units]
        out[lid] = {"jaccard": jaccard(x, y), "cosine": cosine(x, y), "hamming": hamming(x, y)}
    return out


@dataclass
class LayerSparsity:
    layer_id: int
    kept: int
    pruned: int
    flops_ratio: float


def layer_sparsity_report(net: NetworkSpec, mask: PruningMask) -> list[LayerSparsity]:
    keep = keep_vectors(net, mask)
    now, orig = layer_flops(net, mask), layer_flops(net, None)
    rows = []
    for layer in net.layers:
        if layer.kind not in WEIGHTED:
            continue
        k = keep[layer.id]
        ratio = now[layer.id] / orig[layer.id] if orig[layer.id] else 1.0
        rows.append(LayerSparsity(layer.id, int(k.sum()), int((~k).sum()), ratio))
    return rows


def weight_magnitude_mask(net: NetworkSpec, keep_rates: float | Mapping[int, float]) -> PruningMask:
    """Per unit space, keep the ``ceil(rate * units)`` units with the largest l1 norm.

    ``keep_rates`` is a single rate or a map from a producing layer id to the
    rate of the unit space that layer belongs to.  Ties prune the lower index.
    """
    idx = net.indexing
    norms = unit_l1_norms(net)
    bits = np.zeros(idx.C, dtype=bool)
    for units, layers in zip(idx.spaces, idx.space_layers):
        if isinstance(keep_rates, Mapping):
            rate = next((keep_rates[l] for l in layers if l in keep_rates), 1.0)
        else:
            rate = keep_rates
        if not 0.0 <= rate <= 1.0:
            raise ValueError(f"keep rate {rate} outside [0, 1]")
        units = np.asarray(units)
        n_prune = units.size - math.ceil(rate * units.size - 1e-9)
        # ascending norm, lower index first among equals
        order = sorted(range(units.size), key=lambda i: (norms[units[i]], i))
        bits[units[order[:n_prune]]] = True
    return PruningMask(bits)


def magnitude_mask_for_flops(net: NetworkSpec, flops_target: float, iters: int = 60) -> PruningMask:
    """Largest uniform keep rate whose magnitude mask meets the FLOPs ratio target."""
    total = flops(net)
    lo, hi = 0.0, 1.0
    if flops(net, weight_magnitude_mask(net, 1.0)) / total <= flops_target:
        return weight_magnitude_mask(net, 1.0)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if flops(net, weight_magnitude_mask(net, mid)) / total <= flops_target:
            lo = mid
        else:
            hi = mid
    return weight_magnitude_mask(net, lo)


def random_feasible_mask(net: NetworkSpec, flops_target: float, rng: np.random.Generator) -> PruningMask:
    """Prune units in random order until the FLOPs ratio meets the target.

    A unit whose removal would empty a weighted layer is skipped.
    """
    idx = net.indexing
    total = flops(net)
    layer_units = _layer_units(net)
    bits = np.zeros(idx.C, dtype=bool)
    for u in rng.permutation(idx.C):
        if flops(net, bits) / total <= flops_target:
            break
        bits[u] = True
        if any(units.size and bits[units].all() for units in layer_units.values()):
            bits[u] = False
    return PruningMask(bits)


def write_report(out_dir, net: NetworkSpec, a: PruningMask, b: PruningMask | None = None) -> dict:
    """Per-layer CSV plus a summary JSON; similarity columns need a second mask."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sparsity = layer_sparsity_report(net, a)
    sims = per_layer_similarity(net, a, b) if b is not None else {}
    with open(out_dir / "layers.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer_id", "kept", "pruned", "flops_ratio", "jaccard", "cosine", "hamming"])
        for row in sparsity:
            s = sims.get(row.layer_id, {})
            w.writerow([row.layer_id, row.kept, row.pruned, f"{row.flops_ratio:.6f}",
                        s.get("jaccard", ""), s.get("cosine", ""), s.get("hamming", "")])
    summary = {
        "units": len(a),
        "pruned": int(a.bits.sum()),
        "flops_ratio": flops(net, a) / flops(net),
        "similarity_over": "pruned units",
        "layers": [asdict(r) for r in sparsity],
    }
    if b is not None:
        summary.update(jaccard=jaccard(a, b), cosine=cosine(a, b), hamming=hamming(a, b),
                       pruned_b=int(b.bits.sum()), flops_ratio_b=flops(net, b) / flops(net))
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    return summary
