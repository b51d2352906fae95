"""Independent reference computations used by several test modules."""
import numpy as np

from oaid import tensor as T


def pattern(trace):
    """Activation pattern of every ReLU and max-pool in a forward trace."""
    parts = []
    for layer, cache in zip(trace.layers, trace.caches):
        if layer.kind == "relu":
            parts.append(np.asarray(cache).ravel().astype(np.int64))
        elif layer.kind == "maxpool2":
            x = np.asarray(cache[0])  # NHWC pool input
            n, h, w, c = x.shape
            windows = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
            parts.append(windows.reshape(n, h // 2, w // 2, c, 4).argmax(axis=-1).ravel())
    return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)


def gradcheck(layers, params, x, loss_fn, h=1e-3, n_probe=25, seed=0):
    """Max relative error of analytic vs central-difference gradients.

    ``loss_fn(output) -> (loss, d loss / d output)``. Stencil points whose
    x+h and x-h evaluations straddle a ReLU or max-pool switch are skipped,
    since the loss is not differentiable there. Patterns are compared at
    five points across the stencil so a switch that flips and flips back
    inside it is caught too.
    """
    rng = np.random.default_rng(seed)
    out, trace = T.forward(layers, params, x)
    _, g_out = loss_fn(out.data)
    grads = T.backward(trace, g_out)
    worst, checked = 0.0, 0

    def evaluate():
        o, tr = T.forward(layers, params, x)
        return loss_fn(o.data)[0], pattern(tr)

    targets = [(name, params[name], grads.params[name]) for name in params] + [("input", x, grads.input)]
    for name, arr, ag in targets:
        idx = rng.choice(arr.size, min(arr.size, n_probe), replace=False)
        for flat in idx:
            j = np.unravel_index(flat, arr.shape)
            orig = arr[j]
            arr[j] = orig + h
            fp, pp = evaluate()
            arr[j] = orig - h
            fm, pm = evaluate()
            straddles = not np.array_equal(pp, pm)
            for t in (-0.5, 0.0, 0.5):
                if straddles:
                    break
                arr[j] = orig + t * h
                straddles = not np.array_equal(evaluate()[1], pp)
            arr[j] = orig
            if straddles:
                continue
            num = (fp - fm) / (2 * h)
            err = abs(num - ag[j]) / max(abs(num), abs(ag[j]), 1e-6)
            worst = max(worst, err)
            checked += 1
    return worst, checked


def weighted_sum_loss(weights):
    def f(out):
        return float(np.sum(out * weights)), weights
    return f


def pairwise_auc(real, fake):
    """P(fake > real) + P(tie)/2 by explicit enumeration of every pair."""
    wins = 0.0
    for f in fake:
        for r in real:
            if f > r:
                wins += 1.0
            elif f == r:
                wins += 0.5
    return wins / (len(real) * len(fake))


def swept_ap(real, fake):
    """AP by walking distinct thresholds from the top, one threshold at a time."""
    allv = sorted(set(list(real) + list(fake)), reverse=True)
    n_pos = len(fake)
    ap, prev_recall = 0.0, 0.0
    for t in allv:
        tp = sum(1 for f in fake if f >= t)
        fp = sum(1 for r in real if r >= t)
        recall = tp / n_pos
        precision = tp / (tp + fp)
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


def dice_scalar(pred, target, eps=1e-6):
    """Generalised two-class Dice written out pixel by pixel."""
    p = [float(v) for v in np.ravel(pred)]
    g = [float(v) for v in np.ravel(target)]
    vol_fg = sum(g)
    vol_bg = sum(1 - v for v in g)
    w_fg = 1.0 / (vol_fg + eps) ** 2
    w_bg = 1.0 / (vol_bg + eps) ** 2
    inter = sum(w_fg * pi * gi + w_bg * (1 - pi) * (1 - gi) for pi, gi in zip(p, g))
    total = sum(w_fg * (pi + gi) + w_bg * ((1 - pi) + (1 - gi)) for pi, gi in zip(p, g))
    return 1 - (2 * inter + eps) / (total + eps)
