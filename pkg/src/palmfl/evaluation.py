"""Template extraction for deployment and verification/identification metrics."""

import csv
import json
from dataclasses import asdict, dataclass
from fractions import Fraction

import numpy as np

from .errors import DeploymentStateError, EvaluationError, MetricError
from .pipeline import Head, head_templates


@dataclass
class ScoreSet:
    genuine: np.ndarray
    impostor: np.ndarray

    def __post_init__(self):
        self.genuine = np.asarray(self.genuine, dtype=np.float64).ravel()
        self.impostor = np.asarray(self.impostor, dtype=np.float64).ravel()


@dataclass
class RocCurve:
    points: np.ndarray  # (n, 2) columns far, gar
    auc: float


# ---------------------------------------------------------------------------
# Deployment


def _fedpalm_pool(result, site):
    client = result.clients[site]
    n = result.config.n_clients
    if len(client.received_experts) != n:
        raise DeploymentStateError(f"client {site} has not received every textural expert")
    pool = [client.received_experts[c] for c in range(n)] + [client.open.expert]
    pool[site] = client.closed.expert
    return pool


def closed_templates(result, client_id, images):
    """Closed-set templates of ``images`` as produced at client ``client_id``."""
    images = np.asarray(images, dtype=np.float64)
    cfg = result.config
    client = result.clients[client_id]
    if result.method == "fedpalm":
        n = cfg.n_clients
        head = Head(client_id, client.closed.embedding, tuple(c for c in range(n + 1) if c != client_id))
        return head_templates(_fedpalm_pool(result, client_id), cfg.expert, head, images, cfg.k)
    model = result.global_model if result.method == "fedavg" else client.closed
    return head_templates([model.expert], cfg.expert, Head(0, model.embedding), images, cfg.k)


def open_templates(result, images, site=0):
    """Open-set templates; ``site`` picks the deployment client (or local model)."""
    images = np.asarray(images, dtype=np.float64)
    cfg = result.config
    if result.method == "fedpalm":
        n = cfg.n_clients
        head = Head(n, result.clients[site].open.embedding, tuple(range(n)))
        return head_templates(_fedpalm_pool(result, site), cfg.expert, head, images, cfg.k)
    model = result.global_model if result.method == "fedavg" else result.clients[site].closed
    return head_templates([model.expert], cfg.expert, Head(0, model.embedding), images, cfg.k)


def deploy_closed_template(result, client_id, image):
    return closed_templates(result, client_id, np.asarray(image)[None])[0]


def deploy_open_template(result, image, site=0):
    return open_templates(result, np.asarray(image)[None], site)[0]


# ---------------------------------------------------------------------------
# Metrics


def score_pair(q, g):
    return float(np.clip(np.dot(q, g), -1.0, 1.0))


def _check(s):
    if s.genuine.size == 0 or s.impostor.size == 0:
        raise MetricError("genuine and impostor score lists must be non-empty")
    if not (np.all(np.isfinite(s.genuine)) and np.all(np.isfinite(s.impostor))):
        raise MetricError("scores must be finite")


def _rate_counts(s, thresholds):
    """(#impostor >= t, #genuine < t) for every threshold."""
    imp = np.sort(s.impostor)
    gen = np.sort(s.genuine)
    fa = imp.size - np.searchsorted(imp, thresholds, side="left")
    fr = np.searchsorted(gen, thresholds, side="left")
    return fa, fr


def compute_eer(s):
    """Equal error rate and its threshold.

    Thresholds sweep every unique score (plus one above the maximum). The
    crossing of FAR and FRR is interpolated linearly between the bracketing
    thresholds; the interpolation runs in exact rational arithmetic so that
    symmetric inputs give exactly 0.5.
    """
    _check(s)
    ts = np.unique(np.concatenate([s.genuine, s.impostor]))
    ts = np.append(ts, np.inf)
    fa, fr = _rate_counts(s, ts)
    ni, ng = s.impostor.size, s.genuine.size
    crossed = fr * ni >= fa * ng
    j = int(np.argmax(crossed))
    far_j, frr_j = Fraction(int(fa[j]), ni), Fraction(int(fr[j]), ng)
    if far_j == frr_j:
        return float(far_j), float(ts[j]) if np.isfinite(ts[j]) else float(ts[j - 1])
    far_p, frr_p = Fraction(int(fa[j - 1]), ni), Fraction(int(fr[j - 1]), ng)
    a = far_p - frr_p
    b = far_j - frr_j
    lam = a / (a - b)
    eer = far_p + lam * (far_j - far_p)
    hi = ts[j] if np.isfinite(ts[j]) else ts[j - 1]
    threshold = ts[j - 1] + float(lam) * (hi - ts[j - 1])
    return float(eer), float(threshold)


def compute_roc(s):
    """ROC points (FAR, GAR) at every unique threshold and trapezoidal AUC."""
    _check(s)
    ts = np.unique(np.concatenate([s.genuine, s.impostor]))[::-1]
    ts = np.concatenate([[np.inf], ts])
    fa, fr = _rate_counts(s, ts)
    far = fa / s.impostor.size
    gar = 1.0 - fr / s.genuine.size
    points = np.column_stack([far, gar])
    auc = float(np.sum((far[1:] - far[:-1]) * (gar[1:] + gar[:-1]) / 2.0))
    return RocCurve(points, auc)


def identification_from_scores(scores, gallery_labels, query_labels):
    """Rank-1 accuracy from a (query, gallery) similarity matrix."""
    gallery_labels = np.asarray(gallery_labels)
    query_labels = np.asarray(query_labels)
    missing = set(query_labels.tolist()) - set(gallery_labels.tolist())
    if missing:
        raise EvaluationError(f"query identities {sorted(missing)} not enrolled in the gallery")
    nearest = np.argmax(scores, axis=1)
    return float(np.mean(gallery_labels[nearest] == query_labels))


def _unit_rows(x):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def identification_acc(gallery, gallery_labels, query, query_labels):
    """Rank-1 accuracy by maximum cosine similarity (ties: lowest gallery index)."""
    scores = _unit_rows(query) @ _unit_rows(gallery).T
    return identification_from_scores(scores, gallery_labels, query_labels)


def pair_scores(q_templates, q_labels, g_templates, g_labels):
    """All query x gallery scores split into genuine / impostor."""
    scores = np.asarray(q_templates) @ np.asarray(g_templates).T
    same = np.asarray(q_labels)[:, None] == np.asarray(g_labels)[None, :]
    return ScoreSet(scores[same], scores[~same]), scores


# ---------------------------------------------------------------------------
# Scenario reports


def _metrics(q, ql, g, gl):
    s, scores = pair_scores(q, ql, g, gl)
    eer, thr = compute_eer(s)
    roc = compute_roc(s)
    acc = identification_from_scores(scores, gl, ql)
    entry = {
        "eer": eer,
        "threshold": thr,
        "auc": roc.auc,
        "acc": acc,
        "n_genuine": int(s.genuine.size),
        "n_impostor": int(s.impostor.size),
    }
    return entry, roc


def _average(entries):
    return {key: float(np.mean([e[key] for e in entries])) for key in ("eer", "auc", "acc")}


def evaluate_scenario(result, dataset, split, scenario):
    """Metrics for ``scenario`` in {"closed", "open"}.

    Returns (report dict, {view name: RocCurve}). Closed-set: one entry per
    client over its own gallery/query plus the average. Open-set: one entry
    per deployment site plus the average and, for shared-model methods, the
    single global entry.
    """
    ids = dataset.identities
    entries, rocs = [], {}
    if scenario == "closed":
        for c in range(split.n_clients):
            g_idx, q_idx = split.closed_gallery[c], split.closed_query[c]
            g = closed_templates(result, c, dataset.images[g_idx])
            q = closed_templates(result, c, dataset.images[q_idx])
            entry, roc = _metrics(q, ids[q_idx], g, ids[g_idx])
            entries.append({"client": c, **entry})
            rocs[f"closed_client{c}"] = roc
        return {"per_client": entries, "average": _average(entries)}, rocs
    if scenario != "open":
        raise EvaluationError(f"unknown scenario {scenario!r}")
    g_idx, q_idx = split.open_gallery, split.open_query
    for c in range(split.n_clients):
        g = open_templates(result, dataset.images[g_idx], site=c)
        q = open_templates(result, dataset.images[q_idx], site=c)
        entry, roc = _metrics(q, ids[q_idx], g, ids[g_idx])
        entries.append({"client": c, **entry})
        rocs[f"open_client{c}"] = roc
    report = {"per_client": entries, "average": _average(entries), "global": None}
    if result.method != "local":
        report["global"] = {k: v for k, v in entries[0].items() if k != "client"}
        rocs["open_global"] = rocs["open_client0"]
    return report, rocs


@dataclass
class EvalReport:
    method: str
    closed: dict
    open: dict
    config_hash: str = ""

    def to_json(self):
        return json.dumps(asdict(self), indent=1, sort_keys=True) + "\n"


def evaluate(result, dataset, split, config_hash=""):
    closed, closed_rocs = evaluate_scenario(result, dataset, split, "closed")
    opened, open_rocs = evaluate_scenario(result, dataset, split, "open")
    return EvalReport(result.method, closed, opened, config_hash), {**closed_rocs, **open_rocs}


def write_roc_csv(path, roc):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["far", "gar"])
        for far, gar in roc.points:
            writer.writerow([repr(float(far)), repr(float(gar))])
