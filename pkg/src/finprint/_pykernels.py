"""Pure numpy kernels; the reference the compiled ``_ckernels`` must agree with.

Every function here has a twin in ``_ckernels.pyx`` with the same signature
and the same floating point operation order, so both backends produce
bit-identical results.
"""
import numpy as np

BACKEND = "python"

_UNSEEN = -2
_NOISE = -1


def im2col(x_pad, k):
    """(N, Hp, Wp, C) padded input -> (N*Ho*Wo, k*k*C) patches, column order (ki, kj, c)."""
    n, hp, wp, c = x_pad.shape
    ho, wo = hp - k + 1, wp - k + 1
    win = np.lib.stride_tricks.sliding_window_view(x_pad, (k, k), axis=(1, 2))
    # win: (N, Ho, Wo, C, k, k)
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, k * k * c)


def col2im(dcols, n, h, w, c, k):
    """Adjoint of im2col: scatter-add patch gradients back to the padded input."""
    d = dcols.reshape(n, h, w, k, k, c)
    out = np.zeros((n, h + k - 1, w + k - 1, c))
    for ki in range(k):
        for kj in range(k):
            out[:, ki:ki + h, kj:kj + w, :] += d[:, :, :, ki, kj, :]
    return out


def maxpool2_forward(x):
    """2x2 stride-2 max pool over (N, H, W, C); odd trailing rows/cols are dropped.

    Returns the pooled array and the winning offset (0..3, row-major in the
    window, first maximum wins on ties).
    """
    n, h, w, c = x.shape
    ho, wo = h // 2, w // 2
    xs = x[:, :2 * ho, :2 * wo, :].reshape(n, ho, 2, wo, 2, c)
    cand = np.stack(
        [xs[:, :, 0, :, 0, :], xs[:, :, 0, :, 1, :], xs[:, :, 1, :, 0, :], xs[:, :, 1, :, 1, :]],
        axis=-1,
    )
    arg = np.argmax(cand, axis=-1).astype(np.int8)
    out = np.take_along_axis(cand, arg[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg


def maxpool2_backward(dout, arg, h, w):
    n, ho, wo, c = dout.shape
    dx = np.zeros((n, h, w, c))
    for off in range(4):
        di, dj = divmod(off, 2)
        dx[:, di:2 * ho:2, dj:2 * wo:2, :] = np.where(arg == off, dout, 0.0)
    return dx


def box_distance_matrix(frame, x, y, w, h, lam, max_distance):
    """Pairwise clustering distance between boxes (see ``tracklet.box_distance``)."""
    frame = np.asarray(frame, dtype=np.int64)
    x, y, w, h = (np.asarray(a, dtype=np.float64) for a in (x, y, w, h))
    x2, y2 = x + w, y + h
    ix = np.maximum(0.0, np.minimum(x2[:, None], x2[None, :]) - np.maximum(x[:, None], x[None, :]))
    iy = np.maximum(0.0, np.minimum(y2[:, None], y2[None, :]) - np.maximum(y[:, None], y[None, :]))
    inter = ix * iy
    area = w * h
    iou = np.minimum(1.0, inter / ((area[:, None] + area[None, :]) - inter))
    gap = np.abs(frame[:, None] - frame[None, :]).astype(np.float64)
    temporal = np.minimum(1.0, lam * gap)
    dist = ((1.0 - iou) + temporal) / 2.0
    dist[gap == 0] = max_distance
    return dist


def dbscan_labels(dist, eps, min_pts):
    """DBSCAN on a precomputed (n, n) distance matrix, visiting points in index order.

    A point is always its own neighbour, whatever ``dist[i, i]`` holds.
    Returns int64 labels, clusters numbered 0.. in discovery order, -1 noise.
    """
    dist = np.asarray(dist, dtype=np.float64)
    n = dist.shape[0]
    within = dist <= eps
    np.fill_diagonal(within, True)
    neighbours = [np.flatnonzero(row) for row in within]
    labels = np.full(n, _UNSEEN, dtype=np.int64)
    cluster = 0
    for i in range(n):
        if labels[i] != _UNSEEN:
            continue
        if len(neighbours[i]) < min_pts:
            labels[i] = _NOISE
            continue
        labels[i] = cluster
        queue = list(neighbours[i])
        head = 0
        while head < len(queue):
            j = queue[head]
            head += 1
            if labels[j] == _NOISE:
                labels[j] = cluster
            if labels[j] != _UNSEEN:
                continue
            labels[j] = cluster
            if len(neighbours[j]) >= min_pts:
                queue.extend(neighbours[j])
        cluster += 1
    return labels
