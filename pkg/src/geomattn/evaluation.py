"""Retrieval evaluation: distances, ranking, AP/mAP, CMC, track retrieval.

Everything here is plain numpy on finished feature tables; no gradients.
Protocol notes, all standard for re-identification benchmarks:

* Gallery entries sharing BOTH identity and camera with the query are junk
  and excluded from that query's ranking (configurable off).
* Ranking sorts by Euclidean distance ascending with ties broken by gallery
  index, so results are deterministic.
* AP = (1/R) * sum of precision at each relevant hit. Queries with no
  relevant entry in their valid gallery are excluded from the mean and
  counted separately.
* Image-to-track retrieval scores each track by the minimum distance over
  its member images, then runs the same AP machinery over tracks.

``expected_random_ap`` gives the closed-form mean AP of a uniformly random
ranking — the floor any useful embedding must beat:

    E[AP] = (1/N) * (H_N + (R-1) * (N - H_N) / (N-1))

with H_N the N-th harmonic number (and the degenerate cases E=1/N for R=N=1,
E=1 for R=N).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from geomattn.autodiff import Tensor
from geomattn.data import ReidDataset
from geomattn.model import ThreeBranchNet

__all__ = [
    "FeatureTable",
    "EvalConfig",
    "ImageEvalResult",
    "TrackEvalResult",
    "MetricsReport",
    "pairwise_distances",
    "filter_valid_gallery",
    "average_precision",
    "evaluate_image_to_image",
    "evaluate_image_to_track",
    "expected_random_ap",
    "extract_features",
    "evaluate",
]


@dataclass
class FeatureTable:
    """Aligned arrays describing one split: features[i] belongs to ids[i]."""

    features: np.ndarray  # [n, d], unit-norm rows
    ids: np.ndarray  # [n] int
    cameras: np.ndarray  # [n] int
    tracks: np.ndarray | None = None  # [n] int, optional

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.ids = np.asarray(self.ids, dtype=int)
        self.cameras = np.asarray(self.cameras, dtype=int)
        if self.tracks is not None:
            self.tracks = np.asarray(self.tracks, dtype=int)
        n = self.features.shape[0]
        if self.features.ndim != 2:
            raise ValueError(f"features must be [n, d], got {self.features.shape}")
        for name, arr in (("ids", self.ids), ("cameras", self.cameras)):
            if arr.shape != (n,):
                raise ValueError(f"{name} must align with features: {arr.shape} vs n={n}")
        if self.tracks is not None and self.tracks.shape != (n,):
            raise ValueError(f"tracks must align with features: {self.tracks.shape}")
        norms = np.linalg.norm(self.features, axis=1)
        if n and not np.all(np.abs(norms - 1.0) <= 1e-8):
            worst = float(np.max(np.abs(norms - 1.0)))
            raise ValueError(f"feature rows must be unit-norm (worst deviation {worst:.3e})")

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class EvalConfig:
    filter_same_camera: bool = True
    cmc_topk: int = 50
    batch_size: int = 32

    def __post_init__(self):
        if self.cmc_topk < 1:
            raise ValueError(f"cmc_topk must be >= 1, got {self.cmc_topk}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


def pairwise_distances(query: FeatureTable, gallery: FeatureTable) -> np.ndarray:
    """Euclidean distance matrix [nq, ng]; sqrt(2 - 2 cos) for unit rows."""
    qf, gf = query.features, gallery.features
    if qf.shape[1] != gf.shape[1]:
        raise ValueError(f"feature dimensions differ: {qf.shape[1]} vs {gf.shape[1]}")
    sq = (qf * qf).sum(axis=1)[:, None] + (gf * gf).sum(axis=1)[None, :]
    d2 = np.maximum(sq - 2.0 * qf @ gf.T, 0.0)
    return np.sqrt(d2)


def filter_valid_gallery(
    query: FeatureTable, gallery: FeatureTable, filter_same_camera: bool = True
) -> np.ndarray:
    """Boolean [nq, ng]; False marks junk (same identity AND same camera)."""
    if not filter_same_camera:
        return np.ones((len(query), len(gallery)), dtype=bool)
    same_id = query.ids[:, None] == gallery.ids[None, :]
    same_cam = query.cameras[:, None] == gallery.cameras[None, :]
    return ~(same_id & same_cam)


def average_precision(ranked_relevance) -> float:
    """AP over one ranked list; NaN when the list has no relevant entry."""
    rel = np.asarray(ranked_relevance, dtype=bool)
    r = int(rel.sum())
    if r == 0:
        return float("nan")
    hits = np.cumsum(rel)
    ranks = np.arange(1, rel.size + 1)
    return float((hits[rel] / ranks[rel]).sum() / r)


def _rank_gallery(distances_row: np.ndarray, valid_row: np.ndarray) -> np.ndarray:
    """Valid gallery indices sorted by distance, ties by gallery index."""
    valid_idx = np.flatnonzero(valid_row)
    order = np.argsort(distances_row[valid_idx], kind="stable")
    return valid_idx[order]


@dataclass
class ImageEvalResult:
    imap: float
    cmc: np.ndarray  # [topk], fraction of evaluated queries with a hit by k
    per_query_ap: np.ndarray  # [nq], NaN where the query had no relevant entry
    n_evaluated: int


@dataclass
class TrackEvalResult:
    tmap: float
    per_query_ap: np.ndarray
    n_evaluated: int


def evaluate_image_to_image(
    query: FeatureTable,
    gallery: FeatureTable,
    filter_same_camera: bool = True,
    topk: int = 50,
    distances: np.ndarray | None = None,
) -> ImageEvalResult:
    if distances is None:
        distances = pairwise_distances(query, gallery)
    valid = filter_valid_gallery(query, gallery, filter_same_camera)
    nq = len(query)
    aps = np.full(nq, np.nan)
    hit_by_k = np.zeros((nq, topk), dtype=bool)
    for i in range(nq):
        order = _rank_gallery(distances[i], valid[i])
        if order.size == 0:
            raise ValueError(f"query {i} has no valid gallery entries")
        rel = gallery.ids[order] == query.ids[i]
        aps[i] = average_precision(rel)
        first = np.flatnonzero(rel)
        if first.size and int(first[0]) < topk:
            hit_by_k[i, int(first[0]) :] = True
    evaluated = ~np.isnan(aps)
    n_eval = int(evaluated.sum())
    imap = float(aps[evaluated].mean()) if n_eval else 0.0
    cmc = (
        hit_by_k[evaluated].mean(axis=0) if n_eval else np.zeros(topk)
    )
    return ImageEvalResult(imap=imap, cmc=np.asarray(cmc, dtype=float),
                           per_query_ap=aps, n_evaluated=n_eval)


def _track_table(gallery: FeatureTable) -> tuple[np.ndarray, np.ndarray, np.ndarray, list[np.ndarray]]:
    """Unique tracks with their identity and camera; members index gallery.

    Every image of a track must share one identity and one camera.
    """
    if gallery.tracks is None:
        raise ValueError("gallery has no track ids")
    track_ids = np.unique(gallery.tracks)
    identities = np.empty(track_ids.size, dtype=int)
    cameras = np.empty(track_ids.size, dtype=int)
    members: list[np.ndarray] = []
    for t, track in enumerate(track_ids):
        idx = np.flatnonzero(gallery.tracks == track)
        ids_here = np.unique(gallery.ids[idx])
        cams_here = np.unique(gallery.cameras[idx])
        if ids_here.size != 1 or cams_here.size != 1:
            raise ValueError(
                f"track {int(track)} mixes identities {ids_here.tolist()} / "
                f"cameras {cams_here.tolist()}; tracks must be single-identity, "
                "single-camera"
            )
        identities[t] = ids_here[0]
        cameras[t] = cams_here[0]
        members.append(idx)
    return track_ids, identities, cameras, members


def evaluate_image_to_track(
    query: FeatureTable,
    gallery: FeatureTable,
    filter_same_camera: bool = True,
    distances: np.ndarray | None = None,
) -> TrackEvalResult:
    if distances is None:
        distances = pairwise_distances(query, gallery)
    _, track_identities, track_cameras, members = _track_table(gallery)
    nq = len(query)
    nt = track_identities.size
    track_dist = np.empty((nq, nt))
    for t, idx in enumerate(members):
        track_dist[:, t] = distances[:, idx].min(axis=1)
    if filter_same_camera:
        valid = ~(
            (query.ids[:, None] == track_identities[None, :])
            & (query.cameras[:, None] == track_cameras[None, :])
        )
    else:
        valid = np.ones((nq, nt), dtype=bool)
    aps = np.full(nq, np.nan)
    for i in range(nq):
        order = _rank_gallery(track_dist[i], valid[i])
        if order.size == 0:
            raise ValueError(f"query {i} has no valid gallery tracks")
        rel = track_identities[order] == query.ids[i]
        aps[i] = average_precision(rel)
    evaluated = ~np.isnan(aps)
    n_eval = int(evaluated.sum())
    tmap = float(aps[evaluated].mean()) if n_eval else 0.0
    return TrackEvalResult(tmap=tmap, per_query_ap=aps, n_evaluated=n_eval)


def expected_random_ap(n: int, r: int) -> float:
    """Mean AP of a uniformly random ranking of n items with r relevant."""
    if not 0 <= r <= n:
        raise ValueError(f"need 0 <= r <= n, got r={r}, n={n}")
    if r == 0:
        return float("nan")
    if n == 1:
        return 1.0
    harmonic = float(np.sum(1.0 / np.arange(1, n + 1)))
    return (harmonic + (r - 1) * (n - harmonic) / (n - 1)) / n


@dataclass
class MetricsReport:
    imap: float
    cmc: np.ndarray
    per_query_ap: np.ndarray
    n_queries: int
    n_evaluated: int
    tmap: float | None = None
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "imAP": self.imap,
            "cmc": [float(v) for v in self.cmc],
            "top1": float(self.cmc[0]),
            "top5": float(self.cmc[4]) if len(self.cmc) >= 5 else float(self.cmc[-1]),
            "per_query_ap": [None if math.isnan(v) else float(v) for v in self.per_query_ap],
            "n_queries": self.n_queries,
            "n_evaluated": self.n_evaluated,
            "config": dict(self.config),
        }
        if self.tmap is not None:
            out["tmAP"] = self.tmap
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def extract_features(
    model: ThreeBranchNet, dataset: ReidDataset, batch_size: int = 32
) -> FeatureTable:
    """Run the deployment feature path over a dataset in eval mode."""
    feats = []
    for start in range(0, len(dataset), batch_size):
        chunk = dataset.samples[start : start + batch_size]
        x = Tensor(np.stack([s.image.data for s in chunk]))
        feats.append(model.extract_reid_feature(x).data)
    features = np.concatenate(feats, axis=0) if feats else np.zeros((0, 1))
    tracks = None
    if all(s.track is not None for s in dataset.samples) and len(dataset):
        tracks = np.array([s.track for s in dataset.samples])
    return FeatureTable(
        features=features,
        ids=np.array([s.identity for s in dataset.samples]),
        cameras=np.array([s.camera for s in dataset.samples]),
        tracks=tracks,
    )


def evaluate(
    model: ThreeBranchNet,
    query_set: ReidDataset,
    gallery_set: ReidDataset,
    cfg: EvalConfig = EvalConfig(),
) -> MetricsReport:
    """Full retrieval evaluation; only the two ReID branches participate."""
    query = extract_features(model, query_set, cfg.batch_size)
    gallery = extract_features(model, gallery_set, cfg.batch_size)
    distances = pairwise_distances(query, gallery)
    image = evaluate_image_to_image(
        query, gallery, cfg.filter_same_camera, cfg.cmc_topk, distances=distances
    )
    tmap = None
    if gallery.tracks is not None:
        tmap = evaluate_image_to_track(
            query, gallery, cfg.filter_same_camera, distances=distances
        ).tmap
    return MetricsReport(
        imap=image.imap,
        cmc=image.cmc,
        per_query_ap=image.per_query_ap,
        n_queries=len(query),
        n_evaluated=image.n_evaluated,
        tmap=tmap,
        config={
            "filter_same_camera": cfg.filter_same_camera,
            "cmc_topk": cfg.cmc_topk,
        },
    )
