"""Evaluation metrics: FID, perceptual diversity, NDB/JSD, content distance and probes.

Features come from a fixed, never-trained random convolutional embedding by
default, so values are comparable only between runs that share the extractor
seed. Precomputed features (e.g. from a pretrained network) can be supplied via
the external extractor.
"""
from __future__ import annotations

import csv
import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy.stats import norm
from sklearn.linear_model import LogisticRegression
from sklearn.preprocessing import StandardScaler

from .config import InvalidArgument, RngStream
from .networks import ModelSet, encode_content

log = logging.getLogger(__name__)


# features ---------------------------------------------------------------------

@dataclass
class FeatureExtractor:
    kind: str = "seeded-random-conv"
    seed: int = 0
    dim: int = 64
    table: dict = field(default_factory=dict, repr=False)  # external: name -> feature row

    def __post_init__(self):
        if self.kind == "seeded-random-conv":
            rng = RngStream(self.seed, "feature-extractor")
            chans = [3, 16, 32, self.dim]
            self._weights = []
            for cin, cout in zip(chans, chans[1:]):
                w = rng.normal(cout, cin, 3, 3, dtype=torch.float64) * math.sqrt(2.0 / (cin * 9))
                b = rng.normal(cout, dtype=torch.float64) * 0.1
                self._weights.append((w, b))
        elif self.kind != "external":
            raise InvalidArgument(f"unknown extractor kind {self.kind!r}")

    @classmethod
    def from_csv(cls, path) -> "FeatureExtractor":
        names, rows, meta = read_features_csv(path)
        ext = cls(kind="external", seed=meta.get("seed", 0), dim=rows.shape[1])
        ext.table = dict(zip(names, rows))
        return ext

    @torch.no_grad()
    def embed(self, images: torch.Tensor) -> np.ndarray:
        h = images.to(torch.float64)
        if h.shape[-1] != 64:
            h = F.interpolate(h, size=(64, 64), mode="bilinear", align_corners=False)
        for w, b in self._weights:
            h = F.relu(F.conv2d(h, w, b, stride=2, padding=1))
        return h.mean(dim=(2, 3)).numpy()


def extract_features(extractor: FeatureExtractor, images, names=None) -> np.ndarray:
    """One feature row per image."""
    if extractor.kind == "external":
        if names is None or len(names) == 0:
            raise InvalidArgument("external extractor needs image names")
        missing = [n for n in names if n not in extractor.table]
        if missing:
            raise InvalidArgument(f"no precomputed features for {missing[0]}")
        return np.stack([extractor.table[n] for n in names])
    if images is None or len(images) == 0:
        raise InvalidArgument("empty image list")
    batch = torch.stack(list(images)) if isinstance(images, (list, tuple)) else images
    return np.concatenate([extractor.embed(batch[i:i + 64]) for i in range(0, len(batch), 64)])


def write_features_csv(path, names, features: np.ndarray, extractor: FeatureExtractor) -> None:
    with open(path, "w", newline="") as f:
        f.write(f"# extractor={extractor.kind} seed={extractor.seed} dim={features.shape[1]}\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["name"] + [f"f{i}" for i in range(features.shape[1])])
        for name, row in zip(names, features):
            w.writerow([name] + [repr(float(v)) for v in row])


def read_features_csv(path):
    with open(path, newline="") as f:
        first = f.readline()
        meta = {}
        if first.startswith("#"):
            for tok in first[1:].split():
                key, _, val = tok.partition("=")
                meta[key] = int(val) if val.isdigit() else val
        else:
            f.seek(0)
        reader = csv.reader(f)
        next(reader)
        names, rows = [], []
        for row in reader:
            names.append(row[0])
            rows.append([float(v) for v in row[1:]])
    return names, np.array(rows), meta


# Frechet distance ---------------------------------------------------------------

def _sqrt_psd(mat):
    vals, vecs = np.linalg.eigh(mat)
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def frechet_distance(mu1, cov1, mu2, cov2) -> float:
    """Squared Frechet distance between two Gaussians.

    ``trace((cov1 cov2)^{1/2})`` is evaluated as the trace of the PSD square root
    of ``cov1^{1/2} cov2 cov1^{1/2}``, with negative eigenvalues clamped to zero.
    """
    mu1, mu2 = np.atleast_1d(np.asarray(mu1, float)), np.atleast_1d(np.asarray(mu2, float))
    cov1, cov2 = np.atleast_2d(np.asarray(cov1, float)), np.atleast_2d(np.asarray(cov2, float))
    d = mu1.shape[0]
    if mu2.shape != (d,) or cov1.shape != (d, d) or cov2.shape != (d, d):
        raise InvalidArgument("frechet_distance: dimension mismatch")
    for a in (mu1, mu2, cov1, cov2):
        if not np.all(np.isfinite(a)):
            raise InvalidArgument("frechet_distance: non-finite input")
    cov1 = (cov1 + cov1.T) / 2
    cov2 = (cov2 + cov2.T) / 2
    s1 = _sqrt_psd(cov1)
    middle = s1 @ cov2 @ s1
    tr_covmean = np.sqrt(np.clip(np.linalg.eigvalsh((middle + middle.T) / 2), 0, None)).sum()
    diff = mu1 - mu2
    value = float(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2 * tr_covmean)
    return max(value, 0.0)


def gaussian_stats(features: np.ndarray):
    return features.mean(axis=0), np.cov(features, rowvar=False, ddof=1).reshape(features.shape[1], -1)


def fid_from_features(real: np.ndarray, gen: np.ndarray) -> float:
    if len(real) < 2 or len(gen) < 2:
        raise InvalidArgument("fid needs at least two images per side")
    dim = real.shape[1]
    if min(len(real), len(gen)) < 10 * dim:
        log.warning("fid: %d/%d samples for %d-dim features; covariance estimate is rank-limited",
                    len(real), len(gen), dim)
    return frechet_distance(*gaussian_stats(real), *gaussian_stats(gen))


def fid(real_images, gen_images, extractor: FeatureExtractor) -> float:
    if len(real_images) < 2 or len(gen_images) < 2:
        raise InvalidArgument("fid needs at least two images per side")
    return fid_from_features(extract_features(extractor, real_images), extract_features(extractor, gen_images))


# diversity --------------------------------------------------------------------

def diversity_from_features(features: np.ndarray) -> float:
    """Mean over unordered pairs of the mean absolute difference of unit-normalized rows."""
    if len(features) < 2:
        raise InvalidArgument("perceptual_diversity needs at least two images")
    norms = np.linalg.norm(features, axis=1, keepdims=True)
    unit = features / np.where(norms > 0, norms, 1.0)
    dists = [np.abs(unit[i] - unit[j]).mean() for i, j in itertools.combinations(range(len(unit)), 2)]
    return float(np.mean(dists))


def perceptual_diversity(images, extractor: FeatureExtractor) -> float:
    if len(images) < 2:
        raise InvalidArgument("perceptual_diversity needs at least two images")
    return diversity_from_features(extract_features(extractor, images))


# bins: NDB / JSD ----------------------------------------------------------------

@dataclass
class BinModel:
    centroids: np.ndarray
    train_counts: np.ndarray
    alpha: float = 0.05

    @property
    def K(self) -> int:
        return len(self.centroids)

    @property
    def n_train(self) -> int:
        return int(self.train_counts.sum())

    @property
    def train_proportions(self) -> np.ndarray:
        return self.train_counts / self.train_counts.sum()


def _sq_dists(x, c):
    return ((x[:, None, :] - c[None, :, :]) ** 2).sum(-1)


def assign_bins(centroids: np.ndarray, features: np.ndarray) -> np.ndarray:
    return _sq_dists(np.asarray(features, float), centroids).argmin(axis=1)


def fit_bins(features: np.ndarray, K: int = 10, seed: int = 0, alpha: float = 0.05,
             max_iter: int = 300, tol: float = 1e-6) -> BinModel:
    """K-means (k-means++ seeding, Lloyd iterations) over training features.

    A cluster that empties during iteration is re-seeded at the point farthest
    from its current centroid.
    """
    x = np.asarray(features, float)
    n = len(x)
    if K < 1 or n < K:
        raise InvalidArgument(f"need at least K={K} training samples, got {n}")
    rng = np.random.default_rng(seed)
    centroids = [x[rng.integers(n)]]
    for _ in range(1, K):
        d2 = _sq_dists(x, np.array(centroids)).min(axis=1)
        total = d2.sum()
        idx = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centroids.append(x[idx])
    centroids = np.array(centroids)
    for _ in range(max_iter):
        d2 = _sq_dists(x, centroids)
        labels = d2.argmin(axis=1)
        new = centroids.copy()
        for k in range(K):
            members = x[labels == k]
            if len(members):
                new[k] = members.mean(axis=0)
            else:
                far = d2[np.arange(n), labels].argmax()
                new[k] = x[far]
                labels[far] = k
                d2[far] = 0
        shift = ((new - centroids) ** 2).sum()
        centroids = new
        if shift < tol:
            break
    labels = assign_bins(centroids, x)
    counts = np.bincount(labels, minlength=K).astype(float)
    return BinModel(centroids, counts, alpha)


def two_proportion_pvalue(c1, n1, c2, n2) -> np.ndarray:
    """Two-sided p-value of the pooled two-proportion z-test (elementwise)."""
    c1, c2 = np.asarray(c1, float), np.asarray(c2, float)
    p1, p2 = c1 / n1, c2 / n2
    pooled = (c1 + c2) / (n1 + n2)
    se = np.sqrt(pooled * (1 - pooled) * (1 / n1 + 1 / n2))
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, (p1 - p2) / np.where(se > 0, se, 1), 0.0)
    return 2 * norm.sf(np.abs(z))


def jensen_shannon(p, q) -> float:
    """JSD in nats; zero-probability entries contribute nothing."""
    p, q = np.asarray(p, float), np.asarray(q, float)
    m = (p + q) / 2

    def kl(a):
        mask = a > 0
        return float((a[mask] * np.log(a[mask] / m[mask])).sum())

    return max(0.0, 0.5 * kl(p) + 0.5 * kl(q))


def ndb_jsd(bins: BinModel, gen_features: np.ndarray, alpha: float | None = None):
    """Return ``(ndb, ndb_ratio, jsd)`` for generated features against the training bins."""
    gen = np.asarray(gen_features, float)
    if len(gen) == 0:
        raise InvalidArgument("empty generated set")
    alpha = bins.alpha if alpha is None else alpha
    gen_counts = np.bincount(assign_bins(bins.centroids, gen), minlength=bins.K).astype(float)
    pvals = two_proportion_pvalue(bins.train_counts, bins.n_train, gen_counts, len(gen))
    ndb = int((pvals < alpha).sum())
    return ndb, ndb / bins.K, jensen_shannon(bins.train_proportions, gen_counts / len(gen))


# content-space measurements -------------------------------------------------------

@torch.no_grad()
def content_features(models: ModelSet, images: torch.Tensor, domain) -> np.ndarray:
    out = [encode_content(models, images[i:i + 32], domain).flatten(1) for i in range(0, len(images), 32)]
    return torch.cat(out).double().numpy()


def content_distance(features_a: np.ndarray, features_b: np.ndarray) -> float:
    """L1 norm of the difference between the two mean content vectors."""
    a, b = np.atleast_2d(features_a), np.atleast_2d(features_b)
    if len(a) == 0 or len(b) == 0:
        raise InvalidArgument("content distance needs non-empty sets")
    if a.shape[1:] != b.shape[1:]:
        raise InvalidArgument("content feature shapes differ")
    return float(np.abs(a.mean(axis=0) - b.mean(axis=0)).sum())


def content_domain_distance(models: ModelSet, images_a, images_b, domain_a=0, domain_b=1) -> float:
    if len(images_a) == 0 or len(images_b) == 0:
        raise InvalidArgument("content distance needs non-empty sets")
    return content_distance(content_features(models, images_a, domain_a),
                            content_features(models, images_b, domain_b))


def _probe_accuracy(x, y, train_idx, test_idx, seed):
    scaler = StandardScaler().fit(x[train_idx])
    clf = LogisticRegression(max_iter=2000, random_state=seed)
    clf.fit(scaler.transform(x[train_idx]), y[train_idx])
    return float((clf.predict(scaler.transform(x[test_idx])) == y[test_idx]).mean())


def disentanglement_probe(models: ModelSet, dataset, seed: int = 0) -> tuple[float, float]:
    """Held-out accuracy of linear probes on frozen content codes.

    Returns ``(content_acc, domain_acc_on_content)``: one probe predicts the
    synthetic content factor, the other the source domain. 80/20 split.
    """
    if dataset.labels is None:
        raise InvalidArgument("disentanglement probe needs a labelled dataset")
    feats, content_ids, domains = [], [], []
    for d in range(dataset.k):
        feats.append(content_features(models, dataset.images[d], d))
        content_ids.append(dataset.label_arrays(d)[0])
        domains.append(np.full(len(dataset.images[d]), d))
    x = np.concatenate(feats)
    perm = np.random.default_rng(seed).permutation(len(x))
    cut = int(round(0.8 * len(x)))
    train_idx, test_idx = perm[:cut], perm[cut:]
    return (_probe_accuracy(x, np.concatenate(content_ids), train_idx, test_idx, seed),
            _probe_accuracy(x, np.concatenate(domains), train_idx, test_idx, seed))


def export_embeddings(models: ModelSet, dataset, path) -> Path:
    """CSV of flattened content codes, one row per image, last column the domain."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        header_written = False
        for d in range(dataset.k):
            feats = content_features(models, dataset.images[d], d)
            if not header_written:
                w.writerow([f"c{i}" for i in range(feats.shape[1])] + ["domain"])
                header_written = True
            for row in feats:
                w.writerow([f"{v:.8g}" for v in row] + [d])
    return path


# full evaluation ----------------------------------------------------------------

def evaluate(models: ModelSet, dataset, extractor: FeatureExtractor | None = None, n_samples: int = 10,
             seed: int = 0, K: int = 10, source: int = 0, target: int = 1, max_inputs: int | None = None) -> dict:
    """Translate source-domain images with random attributes and score them against the target domain."""
    from .inference import translate_random

    extractor = extractor or FeatureExtractor(seed=seed)
    rng = RngStream(seed, "evaluate")
    inputs = dataset.images[source]
    if max_inputs is not None:
        inputs = inputs[:max_inputs]
    diversities, generated = [], []
    for x in inputs:
        outs = translate_random(models, x, source, target, n_samples, rng)
        generated.extend(outs)
        if n_samples >= 2:
            diversities.append(perceptual_diversity(outs, extractor))
    real_feats = extract_features(extractor, dataset.images[target])
    gen_feats = extract_features(extractor, generated)
    bins = fit_bins(real_feats, min(K, len(real_feats)), seed)
    ndb, ndb_ratio, jsd = ndb_jsd(bins, gen_feats)
    result = {
        "fid": fid_from_features(real_feats, gen_feats),
        "perceptual_diversity": float(np.mean(diversities)) if diversities else 0.0,
        "ndb": ndb,
        "ndb_ratio": ndb_ratio,
        "jsd": jsd,
        "content_distance": content_domain_distance(models, dataset.images[source], dataset.images[target],
                                                    source, target),
    }
    if dataset.labels is not None:
        result["probe_content_acc"], result["probe_domain_acc"] = disentanglement_probe(models, dataset, seed)
    return result


def write_metric_report(path, metrics: dict, config: dict, seeds: dict, checkpoint_hash: str) -> None:
    report = {"metrics": metrics, "config": config, "seeds": seeds, "checkpoint_hash": checkpoint_hash}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
