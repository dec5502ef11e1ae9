"""Two-stage retrieval inference and ranking metrics.

Stage 1 ranks the whole gallery by cosine similarity of pooled embeddings;
stage 2 re-ranks a fixed-size shortlist by the matching probability of the
cross encoder. Metrics cover both relevance settings: behavior match (only
the exact paired image is correct) and identity match (every image of the
query's identity is correct).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import PAD_ID
from .tensor import Tensor, no_grad

BEHAVIOR_MATCH = "behavior_match"
IDENTITY_MATCH = "identity_match"

METRICS_REPORT_SCHEMA = {
    "type": "object",
    "required": ["setting", "n_queries", "n_gallery", "r1", "r5", "r10",
                 "map", "shortlist_k", "checkpoint_hash"],
    "properties": {
        "setting": {"enum": [BEHAVIOR_MATCH, IDENTITY_MATCH]},
        "n_queries": {"type": "integer", "minimum": 1},
        "n_gallery": {"type": "integer", "minimum": 1},
        "r1": {"type": "number", "minimum": 0, "maximum": 1},
        "r5": {"type": "number", "minimum": 0, "maximum": 1},
        "r10": {"type": "number", "minimum": 0, "maximum": 1},
        "map": {"type": "number", "minimum": 0, "maximum": 1},
        "shortlist_k": {"type": "integer", "minimum": 1},
        "checkpoint_hash": {"type": "string"},
    },
    "additionalProperties": True,
}


@dataclass
class GalleryIndex:
    """Pooled gallery features plus cached fused visual tokens for reranking."""

    record_ids: np.ndarray   # [G]
    features: np.ndarray     # [G, proj_dim], unit-norm rows
    visual_tokens: np.ndarray  # [G, 1+L, D], inputs to the cross encoder

    def __len__(self):
        return len(self.record_ids)


@dataclass
class RankingResult:
    query_id: int
    ordered_ids: np.ndarray   # gallery record ids, best first
    similarities: np.ndarray  # stage-1 similarity aligned with ordered_ids
    itm_probs: np.ndarray     # matching probability for the reranked prefix
    shortlist_k: int


def build_gallery_index(model, records, chunk_size=64):
    """Embed all gallery records (pose-fused) without gradients."""
    if not records:
        raise ValueError("empty gallery")
    feats, tokens = [], []
    with no_grad():
        for lo in range(0, len(records), chunk_size):
            chunk = records[lo:lo + chunk_size]
            images = np.stack([r.image for r in chunk])
            poses = np.stack([r.heatmap() for r in chunk])
            f_v_tokens = model.embed_images(images, poses)
            feats.append(model.pool_image(f_v_tokens).numpy())
            tokens.append(f_v_tokens.numpy())
    return GalleryIndex(
        record_ids=np.array([r.record_id for r in records]),
        features=np.concatenate(feats),
        visual_tokens=np.concatenate(tokens),
    )


def _ordered_by(scores, record_ids):
    # Descending score, ties broken by ascending record id.
    return np.lexsort((record_ids, -scores))


def retrieve_two_stage(query_tokens, index: GalleryIndex, model, shortlist_k=128,
                       query_id=-1):
    """Similarity shortlist followed by cross-encoder reranking.

    Items beyond the shortlist keep their stage-1 order after the reranked
    block; with shortlist_k >= gallery size this equals an exhaustive rerank.
    """
    if len(index) == 0:
        raise ValueError("empty gallery")
    query_tokens = np.asarray(query_tokens)
    with no_grad():
        f_t = model.text_embedding(query_tokens[None]).numpy()[0]
    sims = index.features @ f_t
    stage1 = _ordered_by(sims, index.record_ids)

    k = min(shortlist_k, len(index))
    shortlist = stage1[:k]
    with no_grad():
        probs = model.itm_probability(
            Tensor(index.visual_tokens[shortlist]),
            np.broadcast_to(query_tokens, (k, query_tokens.shape[-1])),
        ).numpy()
    rerank_order = _ordered_by(probs, index.record_ids[shortlist])
    final = np.concatenate([shortlist[rerank_order], stage1[k:]])
    return RankingResult(
        query_id=query_id,
        ordered_ids=index.record_ids[final],
        similarities=sims[final],
        itm_probs=probs[rerank_order],
        shortlist_k=k,
    )


# -- metrics -----------------------------------------------------------------


def _query_and_ids(ranking):
    if isinstance(ranking, RankingResult):
        return ranking.query_id, ranking.ordered_ids
    qid, ids = ranking  # also accept plain (query_id, ordered_ids) pairs
    return qid, np.asarray(ids)


def recall_at_k(rankings, truth, k):
    """Fraction of queries with at least one relevant id in the top k.

    `truth` maps query_id -> set of relevant gallery ids.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    hits = 0
    for ranking in rankings:
        qid, ordered = _query_and_ids(ranking)
        relevant = truth[qid]
        hits += bool(set(ordered[:k].tolist()) & set(relevant))
    return hits / len(rankings)


def mean_average_precision(rankings, truth):
    """Mean over queries of uninterpolated average precision."""
    aps = []
    for ranking in rankings:
        qid, ordered = _query_and_ids(ranking)
        relevant = set(truth[qid])
        if not relevant:
            raise ValueError(f"query {qid} has no relevant items")
        hits = 0
        precisions = []
        for rank, rid in enumerate(ordered, start=1):
            if int(rid) in relevant:
                hits += 1
                precisions.append(hits / rank)
        aps.append(float(np.mean(precisions)))
    return float(np.mean(aps))


def ground_truth(records, setting):
    """Relevant gallery ids per query record id for one evaluation setting."""
    if setting == BEHAVIOR_MATCH:
        return {r.record_id: {r.record_id} for r in records}
    if setting == IDENTITY_MATCH:
        by_identity = {}
        for r in records:
            by_identity.setdefault(r.identity_id, set()).add(r.record_id)
        return {r.record_id: by_identity[r.identity_id] for r in records}
    raise ValueError(f"unknown setting {setting!r}")


def evaluate(model, test_records, setting, shortlist_k=128, checkpoint_hash="",
             return_rankings=False):
    """Full retrieval evaluation: R@1/5/10 and mAP over all test queries."""
    index = build_gallery_index(model, test_records)
    truth = ground_truth(test_records, setting)
    pad_len = max(len(r.caption) for r in test_records)
    rankings = []
    for r in test_records:
        query = np.full(pad_len, PAD_ID, dtype=np.int64)
        query[: len(r.caption)] = r.caption
        rankings.append(retrieve_two_stage(query, index, model,
                                           shortlist_k=shortlist_k,
                                           query_id=r.record_id))
    report = {
        "setting": setting,
        "n_queries": len(rankings),
        "n_gallery": len(index),
        "r1": recall_at_k(rankings, truth, 1),
        "r5": recall_at_k(rankings, truth, 5),
        "r10": recall_at_k(rankings, truth, 10),
        "map": mean_average_precision(rankings, truth),
        "shortlist_k": int(min(shortlist_k, len(index))),
        "checkpoint_hash": checkpoint_hash,
    }
    if return_rankings:
        return report, rankings
    return report


def write_rank_csv(path, rankings):
    """Per-query rank dump: query_id, rank, record_id, sim, itm_prob."""
    with open(path, "w") as f:
        f.write("query_id,rank,record_id,sim,itm_prob\n")
        for ranking in rankings:
            for rank, (rid, sim) in enumerate(
                    zip(ranking.ordered_ids, ranking.similarities), start=1):
                prob = (f"{ranking.itm_probs[rank - 1]:.6f}"
                        if rank <= ranking.shortlist_k else "")
                f.write(f"{ranking.query_id},{rank},{rid},{sim:.6f},{prob}\n")
