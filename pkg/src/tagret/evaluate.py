"""Text-to-image retrieval evaluation, router accuracy and embedding dumps."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .backbone import TagClip, TextFeatures, VisualFeatures, load_checkpoint
from .data import AERIAL, GROUND, DatasetManifest, _read_array, _write_array, load_batch
from .errors import DataError
from .losses import cosine
from .metrics import RetrievalMetrics, rank_metrics
from .moe import expert_usage


def compute_similarity(vf: VisualFeatures, tf: TextFeatures) -> torch.Tensor:
    """Row-wise ``0.5 * [cos(v_cls, t_eos) + cos(v_tse, t_tse)]``."""
    return 0.5 * (cosine(vf.cls, tf.eos) + cosine(vf.tse, tf.tse))


def similarity_table(vf: VisualFeatures, tf: TextFeatures) -> torch.Tensor:
    """(queries x gallery) matrix of the same score."""

    def unit(x):
        return x / x.norm(dim=-1, keepdim=True)

    return 0.5 * (unit(tf.eos) @ unit(vf.cls).T + unit(tf.tse) @ unit(vf.tse).T)


@torch.no_grad()
def encode_gallery(model: TagClip, manifest: DatasetManifest, batch_size: int = 128):
    """Visual features for every record, plus the router's per-block view predictions."""
    parts, z_parts, traces = [], [], []
    for start in range(0, len(manifest), batch_size):
        idx = list(range(start, min(start + batch_size, len(manifest))))
        batch = load_batch(manifest, idx)
        vf = model.encode_image(torch.from_numpy(batch.images))
        parts.append(vf)
        traces.extend(vf.traces)
        if vf.view_logits:
            z_parts.append(torch.stack([t.z for t in vf.traces if t.z is not None]))
    cat = lambda name: torch.cat([getattr(p, name) for p in parts])  # noqa: E731
    vf = VisualFeatures(cat("cls"), cat("locals"), cat("view"), cat("tse"))
    z = torch.cat(z_parts, dim=1) if z_parts else None  # (n_routers, N)
    return vf, z, traces


@torch.no_grad()
def encode_queries(model: TagClip, manifest: DatasetManifest, batch_size: int = 256):
    """Text features for every caption, with the identity and view of its image."""
    rows, ids, views = [], [], []
    batch = load_batch(manifest, range(len(manifest)))
    for i, rec in enumerate(manifest.records):
        for k in range(len(rec.caption_rows)):
            rows.append(batch.tokens[i, k])
            ids.append(rec.id_index)
            views.append(rec.view)
    tokens = torch.from_numpy(np.stack(rows))
    feats = [model.encode_text(tokens[s : s + batch_size]) for s in range(0, len(tokens), batch_size)]
    eos = torch.cat([f.eos for f in feats])
    tse = torch.cat([f.tse for f in feats])
    sos = torch.cat([f.sos for f in feats])
    tf = TextFeatures(sos, torch.empty(0), torch.empty(0, dtype=torch.bool), eos, tse)
    return tf, np.array(ids), np.array(views)


def router_accuracy_from(z: torch.Tensor | None, views: np.ndarray) -> dict:
    """Fraction of routing decisions (over all HR-MoE blocks) matching the true view."""
    if z is None:
        return {}
    correct = (z.numpy() == views[None, :])
    out = {}
    for view, name in ((AERIAL, "aerial"), (GROUND, "ground")):
        sel = views == view
        if sel.any():
            out[name] = 100.0 * float(correct[:, sel].mean())
    out["overall"] = 100.0 * float(correct.mean())
    return out


def evaluate_model(model: TagClip, manifest: DatasetManifest, train_ids=None) -> RetrievalMetrics:
    """Each caption queries the full image gallery of ``manifest``."""
    if len(manifest) == 0:
        raise DataError("empty gallery")
    if train_ids is not None:
        shared = set(train_ids) & set(manifest.identities)
        if shared:
            raise DataError(f"{len(shared)} test identities also appear in training")
    model.eval()
    vf, z, _ = encode_gallery(model, manifest)
    tf, q_ids, q_views = encode_queries(model, manifest)
    g_ids, g_views = manifest.id_array, manifest.views
    sim = similarity_table(vf, tf).double().numpy()
    overall = rank_metrics(sim, q_ids, g_ids)
    per_view = {}
    for view, name in ((AERIAL, "aerial"), (GROUND, "ground")):
        qs, gs = q_views == view, g_views == view
        if qs.any() and gs.any():
            try:
                per_view[name] = rank_metrics(sim[np.ix_(qs, gs)], q_ids[qs], g_ids[gs])
            except ValueError:
                pass
    per_view["mixed"] = overall
    return RetrievalMetrics(
        R1=overall["R1"],
        R5=overall["R5"],
        R10=overall["R10"],
        mAP=overall["mAP"],
        n_queries=overall["n_queries"],
        n_gallery=len(g_ids),
        per_view=per_view,
        router_accuracy=router_accuracy_from(z, g_views),
    )


def evaluate(checkpoint: str | Path, manifest: DatasetManifest) -> RetrievalMetrics:
    model, extra = load_checkpoint(checkpoint)
    return evaluate_model(model, manifest, extra.get("train_ids"))


def router_accuracy(model: TagClip, manifest: DatasetManifest) -> dict:
    _, z, _ = encode_gallery(model, manifest)
    return router_accuracy_from(z, manifest.views)


@torch.no_grad()
def view_entanglement(model: TagClip, manifest: DatasetManifest) -> float:
    """Mean ``|cos(v_cls, v_view)|`` over the manifest's images."""
    vf, _, _ = encode_gallery(model, manifest)
    return float(cosine(vf.cls, vf.view).abs().mean())


def routing_report(model: TagClip, manifest: DatasetManifest) -> dict:
    _, z, traces = encode_gallery(model, manifest)
    return {
        "router_accuracy": router_accuracy_from(z, manifest.views),
        "expert_usage": expert_usage(traces, model.cfg.n_experts) if traces else {},
        "n_samples": len(manifest),
    }


def dump_embeddings(model: TagClip, manifest: DatasetManifest, path: str | Path) -> Path:
    """Write ``v_cls`` for every sample to ``<path>.bin`` with a JSON sidecar."""
    vf, _, _ = encode_gallery(model, manifest)
    path = Path(path).with_suffix(".bin")
    path.parent.mkdir(parents=True, exist_ok=True)
    sidecar = _write_array(path, vf.cls.numpy().astype(np.float32))
    sidecar["ids"] = manifest.id_array.tolist()
    sidecar["views"] = manifest.views.tolist()
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2) + "\n")
    return path


def read_embeddings(path: str | Path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    path = Path(path).with_suffix(".bin")
    sidecar = json.loads(path.with_suffix(".json").read_text())
    return _read_array(path), np.array(sidecar["ids"]), np.array(sidecar["views"])


def centroid_separation(emb: np.ndarray, ids: np.ndarray) -> float:
    """Mean distance between identity centroids over mean within-identity scatter."""
    emb = emb / np.linalg.norm(emb, axis=1, keepdims=True)
    labels = np.unique(ids)
    centroids = np.stack([emb[ids == i].mean(axis=0) for i in labels])
    scatter = np.mean([np.linalg.norm(emb[ids == i] - c, axis=1).mean() for i, c in zip(labels, centroids)])
    diff = centroids[:, None] - centroids[None]
    dist = np.linalg.norm(diff, axis=-1)[np.triu_indices(len(labels), 1)].mean()
    return float(dist / scatter)


@torch.no_grad()
def routing_stream(model: TagClip, manifest: DatasetManifest, batch_size: int = 128):
    """Yield one record per gallery batch: expert usage and router hit counters."""
    model.eval()
    n = model.cfg.n_experts
    for b, start in enumerate(range(0, len(manifest), batch_size)):
        idx = list(range(start, min(start + batch_size, len(manifest))))
        batch = load_batch(manifest, idx)
        vf = model.encode_image(torch.from_numpy(batch.images))
        record = {"batch": b, "n_samples": len(idx), "expert_usage": expert_usage(vf.traces, n) if vf.traces else {}}
        counters = {}
        for t in vf.traces:
            if t.z is None:
                continue
            for view, name in ((AERIAL, "aerial"), (GROUND, "ground")):
                sel = batch.views == view
                hit = int((t.z.numpy()[sel] == view).sum())
                c = counters.setdefault(name, {"correct": 0, "total": 0})
                c["correct"] += hit
                c["total"] += int(sel.sum())
        record["router_counts"] = counters
        yield record
