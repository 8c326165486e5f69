"""Pure-numpy reference versions of the conv kernels in ``_kernels.pyx``."""
import numpy as np
from numpy.lib.stride_tricks import as_strided


def im2col(xp, k, stride, ho, wo):
    n, _, _, c = xp.shape
    s0, s1, s2, s3 = xp.strides
    view = as_strided(
        xp,
        shape=(n, ho, wo, k, k, c),
        strides=(s0, s1 * stride, s2 * stride, s1, s2, s3),
        writeable=False,
    )
    return np.ascontiguousarray(view).reshape(n * ho * wo, k * k * c)


def col2im(dcols, stride, hp, wp):
    n, ho, wo, k, _, c = dcols.shape
    out = np.zeros((n, hp, wp, c), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            out[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[:, :, :, i, j, :]
    return out
