"""Input checks shared by the estimators."""
import numpy as np
from sklearn.utils.validation import check_array


def check_contexts_omegas(C, W, min_samples=1):
    C = check_array(C, ensure_2d=False, dtype=float)
    if C.ndim == 1:
        C = C[:, None]
    W = check_array(W, ensure_2d=False, dtype=float)
    if W.ndim == 1:
        W = W[:, None]
    if C.shape[0] != W.shape[0]:
        raise ValueError(f"{C.shape[0]} contexts but {W.shape[0]} weight vectors")
    if C.shape[0] < min_samples:
        raise ValueError(f"need at least {min_samples} samples, got {C.shape[0]}")
    return C, W


def check_contexts(C, dim=None):
    C = check_array(C, ensure_2d=False, dtype=float)
    if C.ndim == 1:
        C = C[None, :] if dim is not None and C.size == dim else C[:, None]
    if dim is not None and C.shape[1] != dim:
        raise ValueError(f"expected contexts of dimension {dim}, got {C.shape[1]}")
    return C


def check_random_state(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
