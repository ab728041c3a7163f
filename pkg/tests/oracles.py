"""Deliberately naive reference implementations used as test oracles.

None of these share code with the package: plain Python loops in float64.
"""

import math

import numpy as np


def dense(x, W, b):
    m, n = W.shape
    y = np.zeros(m)
    for i in range(m):
        acc = float(b[i])
        for j in range(n):
            acc += float(W[i, j]) * float(x[j])
        y[i] = acc
    return y


def _padded_at(x, c, iy, ix, H, W):
    if 0 <= iy < H and 0 <= ix < W:
        return float(x[c, iy, ix])
    return 0.0


def conv2d(x, w, b, stride, pad):
    C, H, W = x.shape
    F, _, kh, kw = w.shape
    ho = (H + 2 * pad - kh) // stride + 1
    wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((F, ho, wo))
    for f in range(F):
        for oy in range(ho):
            for ox in range(wo):
                acc = float(b[f])
                for c in range(C):
                    for i in range(kh):
                        for j in range(kw):
                            acc += float(w[f, c, i, j]) * _padded_at(
                                x, c, oy * stride + i - pad, ox * stride + j - pad, H, W)
                out[f, oy, ox] = acc
    return out


def depthwise_conv2d(x, w, b, stride, pad):
    C, H, W = x.shape
    _, kh, kw = w.shape
    ho = (H + 2 * pad - kh) // stride + 1
    wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((C, ho, wo))
    for c in range(C):
        for oy in range(ho):
            for ox in range(wo):
                acc = float(b[c])
                for i in range(kh):
                    for j in range(kw):
                        acc += float(w[c, i, j]) * _padded_at(
                            x, c, oy * stride + i - pad, ox * stride + j - pad, H, W)
                out[c, oy, ox] = acc
    return out


def maxpool(x, size, stride):
    C, H, W = x.shape
    ho, wo = (H - size) // stride + 1, (W - size) // stride + 1
    out = np.zeros((C, ho, wo))
    for c in range(C):
        for oy in range(ho):
            for ox in range(wo):
                out[c, oy, ox] = max(float(x[c, oy * stride + i, ox * stride + j])
                                     for i in range(size) for j in range(size))
    return out


def softmax(z):
    m = max(z)
    e = [math.exp(v - m) for v in z]
    s = sum(e)
    return np.array([v / s for v in e])


def reference_forward(model_def, params, x):
    """Second forward implementation driven directly by the JSON document."""
    doc = model_def.to_dict()
    a = np.asarray(x, dtype=np.float64)
    it = iter(params)
    for layer in doc["layers"]:
        kind = layer["kind"]
        if kind == "dense":
            W, b = next(it)
            a = dense(a.reshape(-1), W, b)
        elif kind == "relu":
            a = np.where(a > 0, a, 0.0)
        elif kind == "softmax":
            a = softmax(list(a))
        elif kind == "maxpool":
            a = maxpool(a, layer["size"], layer["stride"])
        else:
            W, b = next(it)
            kh = layer["kernel"][0]
            pad = {"valid": 0, "same": (kh - 1) // 2}.get(layer["padding"], layer["padding"])
            fn = conv2d if kind == "conv2d" else depthwise_conv2d
            a = fn(a, W, b, layer["stride"], pad)
    return a


def auc_threshold_sweep(member_scores, nonmember_scores):
    """ROC AUC by sweeping every distinct threshold and integrating with trapezoids."""
    thresholds = sorted(set(member_scores) | set(nonmember_scores), reverse=True)
    pts = [(0.0, 0.0)]
    for t in thresholds:
        tpr = sum(s >= t for s in member_scores) / len(member_scores)
        fpr = sum(s >= t for s in nonmember_scores) / len(nonmember_scores)
        pts.append((fpr, tpr))
    area = 0.0
    for (x0, y0), (x1, y1) in zip(pts, pts[1:]):
        area += (x1 - x0) * (y0 + y1) / 2
    return area


def entropy(p):
    return -sum(v * math.log(v) for v in p if v > 0)
