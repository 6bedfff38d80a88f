"""Retrieval evaluation: distances, AP/mAP, CMC, and the two protocols.

VERI mode ranks the tagged query split against the tagged gallery split
and removes same-identity-same-camera gallery entries before scoring.
VEHICLEID mode pools all test images and, per trial, keeps one image per
identity as gallery and queries with the rest; trial seeds are fixed, so
trial order cannot change the means.

Queries left with no relevant gallery entry are excluded from the mAP and
CMC means and counted in ``skipped_queries``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .dataset import Record, write_ppm
from .errors import ConfigError
from .rng import stream

DEFAULT_MAX_RANK = 10


def pairwise_distances(queries: np.ndarray, gallery: np.ndarray, chunk: int = 64) -> np.ndarray:
    """Euclidean distances, exact difference form, chunked over queries."""
    if queries.ndim != 2 or gallery.ndim != 2 or queries.shape[1] != gallery.shape[1]:
        raise ConfigError(f"descriptor shapes {queries.shape} and {gallery.shape} disagree")
    out = np.empty((queries.shape[0], gallery.shape[0]))
    for i in range(0, queries.shape[0], chunk):
        diff = queries[i : i + chunk, None, :] - gallery[None, :, :]
        out[i : i + chunk] = np.sqrt((diff * diff).sum(axis=2))
    return out


@dataclass
class RankedList:
    query_index: int
    order: np.ndarray      # retained gallery indices, best match first
    relevance: np.ndarray  # bool flags aligned with order


def rank_one(query_index: int, distances: np.ndarray, gallery_ids: np.ndarray,
             query_id: int, junk: Optional[np.ndarray] = None) -> RankedList:
    """Sort one query's gallery by (distance, gallery index), drop junk."""
    keep = np.ones(distances.shape[0], dtype=bool) if junk is None else ~junk
    idx = np.nonzero(keep)[0]
    order = idx[np.lexsort((idx, distances[idx]))]
    return RankedList(query_index=query_index, order=order,
                      relevance=gallery_ids[order] == query_id)


def average_precision(relevance: np.ndarray) -> Optional[float]:
    """Un-interpolated AP; None when the list holds no relevant entry."""
    rel = np.asarray(relevance, dtype=bool)
    n_rel = int(rel.sum())
    if n_rel == 0:
        return None
    ranks = np.nonzero(rel)[0] + 1
    hits = np.arange(1, n_rel + 1)
    return float((hits / ranks).mean())


def mean_ap(ranked: Sequence[RankedList]) -> Tuple[Optional[float], int]:
    """(mAP over scorable queries, number of skipped queries)."""
    aps = []
    skipped = 0
    for r in ranked:
        ap = average_precision(r.relevance)
        if ap is None:
            skipped += 1
        else:
            aps.append(ap)
    return (float(np.mean(aps)) if aps else None), skipped


def cmc_curve(ranked: Sequence[RankedList], max_rank: int = DEFAULT_MAX_RANK) -> np.ndarray:
    """cmc[k] = fraction of scorable queries whose first hit is at rank <= k+1."""
    counts = np.zeros(max_rank)
    scorable = 0
    for r in ranked:
        hits = np.nonzero(r.relevance)[0]
        if hits.size == 0:
            continue
        scorable += 1
        first = hits[0]
        if first < max_rank:
            counts[first:] += 1
    return counts / scorable if scorable else counts


@dataclass(frozen=True)
class EvalProtocol:
    mode: str = "VERI"                  # VERI | VEHICLEID
    trials: int = 10
    seed: int = 0
    gallery_size: Optional[int] = None  # VEHICLEID: identities per trial
    max_rank: int = DEFAULT_MAX_RANK


def _rank_set(qd: np.ndarray, gd: np.ndarray, q_recs: Sequence[Record],
              g_recs: Sequence[Record], junk_rule: bool, max_rank: int):
    dist = pairwise_distances(qd, gd)
    g_ids = np.array([r.id for r in g_recs])
    g_cams = np.array([r.camera for r in g_recs])
    ranked = []
    for i, q in enumerate(q_recs):
        junk = (g_ids == q.id) & (g_cams == q.camera) if junk_rule else None
        ranked.append(rank_one(i, dist[i], g_ids, q.id, junk))
    m, skipped = mean_ap(ranked)
    cmc = cmc_curve(ranked, max_rank)
    return ranked, m, skipped, cmc


def run_protocol(descriptors: np.ndarray, records: Sequence[Record],
                 protocol: EvalProtocol) -> Dict[str, object]:
    """Evaluate descriptors (aligned with records) under a protocol.

    Returns the report dict; ``map`` is None and ``degenerate`` true when
    no query could be scored.
    """
    if protocol.mode == "VERI":
        q_pos = [i for i, r in enumerate(records) if r.split == "query"]
        g_pos = [i for i, r in enumerate(records) if r.split == "gallery"]
        if not q_pos or not g_pos:
            raise ConfigError("VERI protocol needs both query and gallery records")
        q_recs = [records[i] for i in q_pos]
        g_recs = [records[i] for i in g_pos]
        _, m, skipped, cmc = _rank_set(descriptors[q_pos], descriptors[g_pos], q_recs, g_recs,
                                       junk_rule=True, max_rank=protocol.max_rank)
        report = {
            "protocol": "VERI",
            "map": m,
            "cmc": [round(float(c), 12) for c in cmc],
            "n_queries": len(q_recs),
            "skipped_queries": skipped,
            "trials": [],
        }
        if m is None:
            report["degenerate"] = True
        return report

    if protocol.mode != "VEHICLEID":
        raise ConfigError(f"unknown protocol mode {protocol.mode!r}")

    by_id: Dict[int, List[int]] = {}
    for i, r in enumerate(records):
        if r.split in ("query", "gallery"):
            by_id.setdefault(r.id, []).append(i)
    if not by_id:
        raise ConfigError("VEHICLEID protocol found no test records")

    trials = []
    maps, cmcs = [], []
    total_q = total_skipped = 0
    all_ids = sorted(by_id)
    for t in range(protocol.trials):
        rng = stream(protocol.seed, "vehicleid-trial", t)
        ids = all_ids
        if protocol.gallery_size is not None and protocol.gallery_size < len(all_ids):
            pick = rng.choice(len(all_ids), size=protocol.gallery_size, replace=False)
            ids = [all_ids[i] for i in sorted(pick)]
        g_pos, q_pos = [], []
        for ident in ids:
            positions = by_id[ident]
            g_pick = int(rng.integers(0, len(positions)))
            g_pos.append(positions[g_pick])
            q_pos.extend(p for j, p in enumerate(positions) if j != g_pick)
        q_recs = [records[i] for i in q_pos]
        g_recs = [records[i] for i in g_pos]
        _, m, skipped, cmc = _rank_set(descriptors[q_pos], descriptors[g_pos], q_recs, g_recs,
                                       junk_rule=False, max_rank=protocol.max_rank)
        trials.append({
            "trial": t,
            "map": m,
            "cmc": [round(float(c), 12) for c in cmc],
            "n_queries": len(q_recs),
            "skipped_queries": skipped,
        })
        if m is not None:
            maps.append(m)
            cmcs.append(cmc)
        total_q += len(q_recs)
        total_skipped += skipped

    mean_map = float(np.mean(maps)) if maps else None
    mean_cmc = np.mean(cmcs, axis=0) if cmcs else np.zeros(protocol.max_rank)
    report = {
        "protocol": "VEHICLEID",
        "map": mean_map,
        "cmc": [round(float(c), 12) for c in mean_cmc],
        "n_queries": total_q,
        "skipped_queries": total_skipped,
        "trials": trials,
    }
    if mean_map is None:
        report["degenerate"] = True
    return report


def ranking_entries(descriptors: np.ndarray, records: Sequence[Record],
                    protocol: Optional[EvalProtocol] = None) -> List[Dict[str, object]]:
    """Per-VERI-query ranked gallery paths with relevance flags.

    Embedded in the eval report so ranking grids can be rendered later
    from the JSON alone.
    """
    protocol = protocol or EvalProtocol()
    q_pos = [i for i, r in enumerate(records) if r.split == "query"]
    g_pos = [i for i, r in enumerate(records) if r.split == "gallery"]
    if not q_pos or not g_pos:
        raise ConfigError("ranking entries need query and gallery records")
    q_recs = [records[i] for i in q_pos]
    g_recs = [records[i] for i in g_pos]
    ranked, _, _, _ = _rank_set(descriptors[q_pos], descriptors[g_pos], q_recs, g_recs,
                                junk_rule=True, max_rank=protocol.max_rank)
    entries = []
    for r in ranked:
        entries.append({
            "query": q_recs[r.query_index].path,
            "gallery": [g_recs[j].path for j in r.order],
            "relevance": [bool(x) for x in r.relevance],
        })
    return entries


def save_report(report: Dict[str, object], path: str) -> None:
    with open(path, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")


# ---------------------------------------------------------------------------
# ranking grids

BORDER = 2
GREEN = (0.0, 0.8, 0.0)
RED = (0.9, 0.0, 0.0)
WHITE = (1.0, 1.0, 1.0)


def _framed(tile: np.ndarray, color) -> np.ndarray:
    h, w, _ = tile.shape
    out = np.empty((h + 2 * BORDER, w + 2 * BORDER, 3))
    out[:] = color
    out[BORDER : BORDER + h, BORDER : BORDER + w] = tile
    return out


def ranking_grid(query_image: np.ndarray, gallery_images: Sequence[np.ndarray],
                 relevance: Sequence[bool], out_path: str) -> None:
    """Query tile (white frame) plus ranked tiles framed green/red."""
    tiles = [_framed(query_image, WHITE)]
    for img, rel in zip(gallery_images, relevance):
        tiles.append(_framed(img, GREEN if rel else RED))
    write_ppm(out_path, np.concatenate(tiles, axis=1))


def ranking_report(descriptors: np.ndarray, records: Sequence[Record],
                   manifest_dir: str, out_dir: str, top_k: int = 5,
                   protocol: Optional[EvalProtocol] = None) -> List[str]:
    """One grid file per VERI query; returns the written paths."""
    from .dataset import read_ppm

    protocol = protocol or EvalProtocol()
    q_pos = [i for i, r in enumerate(records) if r.split == "query"]
    g_pos = [i for i, r in enumerate(records) if r.split == "gallery"]
    if not q_pos or not g_pos:
        raise ConfigError("ranking report needs query and gallery records")
    q_recs = [records[i] for i in q_pos]
    g_recs = [records[i] for i in g_pos]
    ranked, _, _, _ = _rank_set(descriptors[q_pos], descriptors[g_pos], q_recs, g_recs,
                                junk_rule=True, max_rank=protocol.max_rank)
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for r in ranked:
        q = q_recs[r.query_index]
        order = r.order[:top_k]
        imgs = [read_ppm(os.path.join(manifest_dir, g_recs[j].path)) for j in order]
        rels = list(r.relevance[: len(order)])
        path = os.path.join(out_dir, f"query_{r.query_index:04d}.ppm")
        ranking_grid(read_ppm(os.path.join(manifest_dir, q.path)), imgs, rels, path)
        paths.append(path)
    return paths
