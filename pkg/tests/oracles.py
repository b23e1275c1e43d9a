"""Slow, obviously-correct reference implementations used only by tests."""

from nbo.metrics import f_score


def auc_all_pairs(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    concordant = ties = 0
    for p in pos:
        for n in neg:
            if p > n:
                concordant += 1
            elif p == n:
                ties += 1
    return (concordant + 0.5 * ties) / (len(pos) * len(neg))


def grid_points(step):
    k = round(1 / step)
    return [i / k for i in range(k + 1)]


def brute_force_weight(p_gbdt, p_lstm, labels, step=0.01):
    from nbo.ensemble import ensemble_score

    best = None
    for w in grid_points(step):
        blended = [ensemble_score(g, l, w) for g, l in zip(p_gbdt, p_lstm)]
        a = auc_all_pairs(blended, labels)
        if best is None or a > best[1]:
            best = (w, a)
    return best


def brute_force_threshold(scores, labels, step=0.001):
    best = None
    for tau in grid_points(step):
        preds = [1 if s >= tau else 0 for s in scores]
        f = f_score(preds, labels)[2]
        if best is None or f >= best[1]:
            best = (tau, f)
    return best
