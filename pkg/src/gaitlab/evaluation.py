"""Gallery/probe nearest-neighbor identification and the normalization
ablation runner.

Identification is closed-set: each probe is assigned the identity of its
nearest gallery embedding (Euclidean distance on unit-norm vectors, ties
broken by (distance, subject_id)). Rank-k counts distinct subjects.
"""
from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import EmptyGallery, OpenSetProbe
from .models import embed_sequence_with_spe, temporal_forward
from .poses import resample
from .training import TrainConfig, prepare_normalized, train


@dataclass(frozen=True)
class EmbeddingRecord:
    subject_id: str
    sequence_id: str
    embedding: np.ndarray
    tags: dict = field(default_factory=dict)

    def __post_init__(self):
        emb = np.asarray(self.embedding, dtype=np.float64)
        norm = np.linalg.norm(emb)
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"embedding of {self.sequence_id} has norm {norm}, expected 1")
        object.__setattr__(self, "embedding", emb)


def identify(probe: EmbeddingRecord, gallery) -> list:
    """Ranked distinct subject list by ascending distance to the probe."""
    if not gallery:
        raise EmptyGallery("cannot identify against an empty gallery")
    dists = [(float(np.linalg.norm(probe.embedding - g.embedding)), g.subject_id)
             for g in gallery]
    dists.sort()
    ranked, seen = [], set()
    for _, subject in dists:
        if subject not in seen:
            seen.add(subject)
            ranked.append(subject)
    return ranked


def rank_k_accuracy(probes, gallery, k: int) -> float:
    """Fraction of probes whose true subject is within the top-k distinct subjects."""
    if not gallery:
        raise EmptyGallery("cannot evaluate against an empty gallery")
    gallery_subjects = {g.subject_id for g in gallery}
    missing = sorted({p.subject_id for p in probes} - gallery_subjects)
    if missing:
        raise OpenSetProbe(f"probe subjects absent from gallery: {missing}")
    if not probes:
        return 0.0
    gal_emb = np.stack([g.embedding for g in gallery])
    gal_sub = [g.subject_id for g in gallery]
    hits = 0
    for p in probes:
        d = np.linalg.norm(gal_emb - p.embedding, axis=1)
        order = sorted(range(len(gallery)), key=lambda i: (d[i], gal_sub[i]))
        seen: list = []
        for i in order:
            if gal_sub[i] not in seen:
                seen.append(gal_sub[i])
                if len(seen) >= k:
                    break
        hits += p.subject_id in seen
    return hits / len(probes)


# -- embedding extraction --

def embed_dataset(model_kind, store, model_config, sequences, scheme,
                  stats=None, geom=None, seq_len: int = 60) -> list:
    """Normalize, middle-crop/interpolate to seq_len, and embed each sequence.

    The single-pose model embeds per frame and mean-pools (re-normalized); the
    temporal model embeds whole sequences.
    """
    normalized, stats = prepare_normalized(sequences, scheme, stats, geom)
    records = []
    for seq in normalized:
        if len(seq) >= seq_len:
            seq = resample(seq, seq_len, "middle_crop")
        else:
            seq = resample(seq, seq_len, "interpolate")
        if model_kind == "spe":
            emb = embed_sequence_with_spe(seq.poses, store, model_config, "mean")
        else:
            with ad.no_grad():
                emb = temporal_forward(seq.poses, store, model_config).data
        records.append(EmbeddingRecord(seq.subject_id, seq.sequence_id, emb, dict(seq.tags)))
    return records


# -- ablation grids --

@dataclass(frozen=True)
class AblationCell:
    model: str          # "spe" | "temporal"
    scheme: str
    seed: int


@dataclass
class AblationResult:
    rows: list                  # dict per cell: model, scheme, seed, rank1, rank5
    aggregates: list            # dict per (model, scheme): mean/std across seeds
    failures: list = field(default_factory=list)


def cell_key(cell: AblationCell, model_config, train_config: TrainConfig) -> str:
    blob = json.dumps({
        "model": cell.model, "scheme": cell.scheme, "seed": cell.seed,
        "model_config": repr(model_config), "train_config": repr(train_config),
    }, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def run_cell(cell: AblationCell, train_set, gallery_set, probe_set,
             model_config, train_config: TrainConfig, geom=None) -> dict:
    cfg = TrainConfig(**{**train_config.__dict__, "seed": cell.seed})
    result = train(cell.model, train_set, cell.scheme, model_config, cfg, geom=geom)
    gallery = embed_dataset(cell.model, result.store, model_config, gallery_set,
                            cell.scheme, stats=result.stats, geom=geom,
                            seq_len=cfg.seq_len)
    probes = embed_dataset(cell.model, result.store, model_config, probe_set,
                           cell.scheme, stats=result.stats, geom=geom,
                           seq_len=cfg.seq_len)
    return {
        "model": cell.model,
        "scheme": cell.scheme,
        "seed": cell.seed,
        "rank1": rank_k_accuracy(probes, gallery, 1),
        "rank5": rank_k_accuracy(probes, gallery, 5),
    }


def run_ablation(cells, train_set, gallery_set, probe_set, model_configs,
                 train_config: TrainConfig, geom=None,
                 cache_dir=None) -> AblationResult:
    """Train/evaluate every (model, scheme, seed) cell; aggregate mean +- std
    (population) across seeds per (model, scheme). Cell failures are recorded
    and the run continues. With cache_dir, finished cells are reused by hash.
    """
    rows, failures = [], []
    for cell in cells:
        model_config = model_configs[cell.model]
        cache_path = None
        if cache_dir is not None:
            os.makedirs(cache_dir, exist_ok=True)
            cache_path = os.path.join(
                cache_dir, f"cell_{cell_key(cell, model_config, train_config)}.json")
            if os.path.exists(cache_path):
                with open(cache_path) as f:
                    rows.append(json.load(f))
                continue
        try:
            row = run_cell(cell, train_set, gallery_set, probe_set,
                           model_config, train_config, geom=geom)
        except Exception as exc:  # record and continue per-cell
            failures.append({"model": cell.model, "scheme": cell.scheme,
                             "seed": cell.seed, "error": f"{type(exc).__name__}: {exc}"})
            continue
        rows.append(row)
        if cache_path is not None:
            tmp = cache_path + ".tmp"
            with open(tmp, "w") as f:
                json.dump(row, f)
            os.replace(tmp, cache_path)

    groups: dict = {}
    for row in rows:
        groups.setdefault((row["model"], row["scheme"]), []).append(row)
    aggregates = []
    for (model, scheme), grp in groups.items():
        r1 = np.array([g["rank1"] for g in grp])
        r5 = np.array([g["rank5"] for g in grp])
        aggregates.append({
            "model": model, "scheme": scheme, "n_seeds": len(grp),
            "rank1_mean": float(r1.mean()), "rank1_std": float(r1.std()),
            "rank5_mean": float(r5.mean()), "rank5_std": float(r5.std()),
        })
    return AblationResult(rows=rows, aggregates=aggregates, failures=failures)


def write_results_csv(path, result: AblationResult) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["model", "scheme", "seed", "rank1", "rank5"])
        for row in result.rows:
            w.writerow([row["model"], row["scheme"], row["seed"],
                        row["rank1"], row["rank5"]])


def render_markdown_table(result: AblationResult) -> str:
    lines = ["| model | scheme | seeds | rank-1 | rank-5 |",
             "|---|---|---|---|---|"]
    for agg in result.aggregates:
        lines.append(
            f"| {agg['model']} | {agg['scheme']} | {agg['n_seeds']} "
            f"| {agg['rank1_mean']:.3f} ± {agg['rank1_std']:.3f} "
            f"| {agg['rank5_mean']:.3f} ± {agg['rank5_std']:.3f} |")
    return "\n".join(lines) + "\n"
