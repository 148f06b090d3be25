import numpy as np

from ccq import ModalDataset


def random_dataset(seed, dims=(32, 48), n=500, n0=300):
    rng = np.random.default_rng(seed)
    return ModalDataset([rng.standard_normal((n, p)) for p in dims], n0)
