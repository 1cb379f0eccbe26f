"""Separable toy feature maps: the domain lights up a row band, the class a column band."""
import numpy as np


def toy_maps(n_per_domain=12, n_domains=6, seed=0):
    rng = np.random.default_rng(seed)
    maps, doms, cls = [], [], []
    for d in range(n_domains):
        for k in range(n_per_domain):
            m = rng.standard_normal((26, 99)).astype(np.float32) * 0.5
            m[4 * d:4 * d + 4] += 2.0
            c = k % 2
            if c:
                m[:, 60:80] += 1.5
            maps.append(m)
            doms.append(d)
            cls.append(c)
    return np.stack(maps), np.array(doms), np.array(cls)
