import numpy as np


def cluster_corpus(rng, n_clusters=30, per_cluster=20, sigma=0.005, min_sep=0.1):
    """Points around well-separated generating boxes in (cx, cy, w, h) space."""
    centers = []
    while len(centers) < n_clusters:
        w, h = rng.uniform(0.05, 0.3), rng.uniform(0.03, 0.2)
        c = np.array([
            rng.uniform(w / 2 + 0.02, 1 - w / 2 - 0.02),
            rng.uniform(h / 2 + 0.02, 1 - h / 2 - 0.02),
            w,
            h,
        ])
        if all(np.abs(c - d).max() > min_sep for d in centers):
            centers.append(c)
    centers = np.array(centers)
    pts = np.concatenate([c + rng.normal(0, sigma, (per_cluster, 4)) for c in centers])
    return pts, centers
