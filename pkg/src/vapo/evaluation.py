"""Sample-quality metrics, energy histograms, nearest-neighbour audit and OOD AUROC.

FID has no meaning for point clouds, so sample quality is measured with an
unbiased multi-bandwidth RBF MMD^2, a smoothed 2-D histogram KL divergence and
mode coverage.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.stats import rankdata

DEFAULT_BANDWIDTHS = (0.25, 0.5, 1.0, 2.0)


@dataclass
class MetricReport:
    mmd_rbf: float
    mmd_rbf_raw: float
    grid_kld: float
    mode_coverage: float | None
    n_samples: int

    def to_dict(self):
        return asdict(self)


def _points(a, name):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise ValueError(f"{name} must be an (n, D) array")
    return a


def _sqdist(a, b):
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d, 0.0)


def rbf_kernel(a, b, bandwidths=DEFAULT_BANDWIDTHS):
    """Sum over bandwidths of ``exp(-||a_i - b_j||^2 / (2 bw^2))``."""
    d2 = _sqdist(a, b)
    return sum(np.exp(-d2 / (2.0 * bw * bw)) for bw in bandwidths)


def mmd_rbf(a, b, bandwidths=DEFAULT_BANDWIDTHS) -> float:
    """Unbiased MMD^2 estimate with a sum of Gaussian kernels. May be slightly negative."""
    a, b = _points(a, "a"), _points(b, "b")
    m, n = len(a), len(b)
    if m < 2 or n < 2:
        raise ValueError("mmd_rbf needs at least two points in each set")
    if a.shape[1] != b.shape[1]:
        raise ValueError("dimension mismatch")
    kaa = rbf_kernel(a, a, bandwidths)
    kbb = rbf_kernel(b, b, bandwidths)
    kab = rbf_kernel(a, b, bandwidths)
    saa = (kaa.sum() - np.trace(kaa)) / (m * (m - 1))
    sbb = (kbb.sum() - np.trace(kbb)) / (n * (n - 1))
    return float(saa + sbb - 2.0 * kab.mean())


def mmd_permutation_test(a, b, bandwidths=DEFAULT_BANDWIDTHS, n_perm=200, rng=0):
    """Unbiased MMD^2 together with its permutation null distribution.

    Returns:
        ``(statistic, null)`` where ``null`` has ``n_perm`` entries.
    """
    a, b = _points(a, "a"), _points(b, "b")
    m, n = len(a), len(b)
    if m < 2 or n < 2:
        raise ValueError("mmd_rbf needs at least two points in each set")
    z = np.concatenate([a, b])
    K = rbf_kernel(z, z, bandwidths)
    np.fill_diagonal(K, 0.0)
    total = m + n

    def stat(mask):
        ex = mask.astype(np.float64)
        ey = 1.0 - ex
        kx = K @ ex
        ky = K @ ey
        sxx = ex @ kx / (m * (m - 1))
        syy = ey @ ky / (n * (n - 1))
        sxy = ex @ ky / (m * n)
        return sxx + syy - 2.0 * sxy

    base = np.zeros(total, dtype=bool)
    base[:m] = True
    observed = stat(base)
    gen = np.random.default_rng(rng)
    null = np.empty(n_perm)
    for k in range(n_perm):
        null[k] = stat(base[gen.permutation(total)])
    return float(observed), null


def _hist2d(points, bins, rng_box):
    h, _, _ = np.histogram2d(points[:, 0], points[:, 1], bins=bins, range=rng_box)
    return h


def grid_kld(samples, dataset, bins=20, range_=((-3.0, 3.0), (-3.0, 3.0)), alpha=1.0) -> float:
    """KL(data || samples) between Laplace-smoothed 2-D histograms.

    Points outside ``range_`` are dropped before counting.
    """
    s, d = _points(samples, "samples"), _points(dataset, "dataset")
    if s.shape[1] != 2 or d.shape[1] != 2:
        raise ValueError("grid_kld is defined for 2-D data only")
    hs = _hist2d(s, bins, range_) + alpha
    hd = _hist2d(d, bins, range_) + alpha
    p, q = hd / hd.sum(), hs / hs.sum()
    return float(np.sum(p * np.log(p / q)))


def mode_coverage(samples, mode_centers, capture_radius, min_fraction=0.01) -> float:
    """Fraction of modes holding at least ``min_fraction`` of the samples within ``capture_radius``."""
    s = _points(samples, "samples")
    c = _points(mode_centers, "mode_centers")
    if len(s) == 0 or len(c) == 0:
        raise ValueError("mode_coverage needs non-empty samples and mode centers")
    dist = np.sqrt(_sqdist(s, c))
    captured = (dist < capture_radius).sum(axis=0) / len(s)
    return float(np.mean(captured >= min_fraction))


def energy_values(model, samples, chunk=4096):
    s = _points(samples, "samples")
    return np.concatenate([np.atleast_1d(model.value_and_grad(s[i:i + chunk])[0])
                           for i in range(0, len(s), chunk)]) if len(s) else np.zeros(0)


def energy_histogram(model, samples, bins=50, edges=None):
    """Histogram of ``Phi`` over ``samples``.

    Edges span the observed min/max padded by 1% of the range on both sides,
    unless ``edges`` is given.

    Returns:
        ``(edges, counts)``.
    """
    e = energy_values(model, samples)
    if e.size == 0:
        raise ValueError("energy_histogram needs at least one sample")
    if edges is None:
        edges = histogram_edges(e, bins)
    counts, edges = np.histogram(e, bins=edges)
    return edges, counts


def histogram_edges(values, bins):
    lo, hi = float(np.min(values)), float(np.max(values))
    pad = 0.01 * (hi - lo)
    if pad == 0.0:
        pad = 0.01 * max(abs(lo), 1.0)
    return np.linspace(lo - pad, hi + pad, bins + 1)


def histogram_overlap(counts_a, counts_b) -> float:
    """Intersection over union of two normalized histograms on shared bins."""
    p = np.asarray(counts_a, float)
    q = np.asarray(counts_b, float)
    p, q = p / p.sum(), q / q.sum()
    return float(np.minimum(p, q).sum() / np.maximum(p, q).sum())


def auroc(pos_scores, neg_scores) -> float:
    """Mann-Whitney AUROC: probability a positive outscores a negative (ties count half)."""
    pos = np.asarray(pos_scores, dtype=np.float64).ravel()
    neg = np.asarray(neg_scores, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise ValueError("both classes must be non-empty")
    ranks = rankdata(np.concatenate([pos, neg]))
    u = ranks[:pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def ood_auroc(model, in_samples, out_samples) -> float:
    """AUROC of the energy score with in-distribution points as the positive class."""
    return auroc(energy_values(model, in_samples), energy_values(model, out_samples))


def nearest_neighbors(samples, dataset, k=1):
    """Exact Euclidean k-NN of each sample in ``dataset``; returns ``(indices, distances)``."""
    s, d = _points(samples, "samples"), _points(dataset, "dataset")
    if k < 1 or k > len(d):
        raise ValueError(f"k must lie in [1, {len(d)}]")
    dist, idx = cKDTree(d).query(s, k=k)
    return np.asarray(idx).reshape(len(s), k), np.asarray(dist).reshape(len(s), k)


def memorization_fraction(samples, dataset, threshold=1e-3) -> float:
    _, dist = nearest_neighbors(samples, dataset, 1)
    return float(np.mean(dist[:, 0] < threshold))


def evaluate_samples(samples, dataset, mode_centers=None, capture_radius=0.3,
                     bandwidths=DEFAULT_BANDWIDTHS, bins=20, range_=((-3.0, 3.0), (-3.0, 3.0))):
    s, d = _points(samples, "samples"), _points(dataset, "dataset")
    raw = mmd_rbf(s, d, bandwidths)
    kld = grid_kld(s, d, bins, range_) if s.shape[1] == 2 else float("nan")
    cov = None if mode_centers is None else mode_coverage(s, mode_centers, capture_radius)
    return MetricReport(mmd_rbf=max(0.0, raw), mmd_rbf_raw=raw, grid_kld=kld, mode_coverage=cov,
                        n_samples=len(s))


def kld_range(dim=2):
    return ((-3.0, 3.0),) * dim


def full_report(model, to_model, to_data, params, heldout, train_points=None, mode_centers=None,
                capture_radius=0.3, n_samples=2000, seed=0, cfg=None, n_perm=200, k_nn=5,
                ood_box=4.0, hist_bins=50):
    """Generate samples from ``model`` and compute every evaluation artifact.

    Metrics that compare point sets are computed in data space; energies are
    evaluated in model space.

    Args:
        model: Trained potential.
        to_model, to_data: Maps between data space and model space.
        params: Homotopy parameters (the prior width is used for sampling).
        heldout: ``(M, D)`` held-out points in data space.
        train_points: Optional training points in data space, for the energy
            histogram comparison and the nearest-neighbour audit.
        mode_centers: Optional mode centers in data space.
        cfg: ``OdeConfig`` for sampling.

    Returns:
        dict with the ``MetricReport`` fields plus ``mmd_null_q95``,
        ``mmd_p_value``, ``histogram_overlap``, ``memorization_fraction``,
        ``ood_auroc`` and the raw arrays under ``samples``, ``histograms`` and
        ``nearest_neighbors``.
    """
    from . import ode

    heldout = _points(heldout, "heldout")
    cfg = cfg or ode.OdeConfig()
    rng = np.random.default_rng([seed, 7])
    samples = to_data(ode.sample(model, n_samples, params, cfg, rng=seed))
    rep = evaluate_samples(samples, heldout, mode_centers, capture_radius,
                           range_=kld_range(2)).to_dict()
    stat, null = mmd_permutation_test(samples, heldout, n_perm=n_perm, rng=rng)
    rep["mmd_null_q95"] = float(np.quantile(null, 0.95))
    rep["mmd_p_value"] = float((1 + np.sum(null >= stat)) / (1 + len(null)))

    e_held = energy_values(model, to_model(heldout))
    e_samp = energy_values(model, to_model(samples)) if len(samples) else np.zeros(0)
    hists = {}
    if train_points is not None:
        train_points = _points(train_points, "train_points")
        e_train = energy_values(model, to_model(train_points))
        edges = histogram_edges(np.concatenate([e_train, e_held]), hist_bins)
        hists["train"] = (edges, np.histogram(e_train, edges)[0])
        hists["heldout"] = (edges, np.histogram(e_held, edges)[0])
        rep["histogram_overlap"] = histogram_overlap(hists["train"][1], hists["heldout"][1])
        idx, dist = nearest_neighbors(samples, train_points, min(k_nn, len(train_points)))
        rep["memorization_fraction"] = float(np.mean(dist[:, 0] < 1e-3))
    else:
        edges = histogram_edges(e_held, hist_bins)
        hists["heldout"] = (edges, np.histogram(e_held, edges)[0])
        rep["histogram_overlap"] = None
        idx, dist = nearest_neighbors(samples, heldout, min(k_nn, len(heldout)))
        rep["memorization_fraction"] = None
    if len(e_samp):
        hists["samples"] = energy_histogram(model, to_model(samples), hist_bins)
    out = rng.uniform(-ood_box, ood_box, size=heldout.shape)
    rep["ood_auroc"] = auroc(e_held, energy_values(model, to_model(out)))
    rep["samples"] = samples
    rep["histograms"] = hists
    rep["nearest_neighbors"] = (idx, dist)
    return rep
