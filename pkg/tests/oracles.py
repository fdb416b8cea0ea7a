"""Loop-level reference implementations used as test oracles.

Everything here is written with explicit Python loops over numpy arrays and
shares no code with ``densetrf``; only raw parameter values are read from the
torch modules under test.
"""

import math

import numpy as np


def to_np(t):
    return t.detach().cpu().double().numpy()


# -- mock extractor ----------------------------------------------------------

def mock_features(image, patch_size, out_channels, seed):
    freqs = [0.125, 0.25]
    angles = [0.0, 45.0, 90.0, 135.0]
    gains = [1.0] * 3 + [3.0] * 3 + [3.0] * 3 + [6.0] * 8
    rng = np.random.default_rng(seed)
    proj = rng.standard_normal((17, out_channels)) / math.sqrt(17)
    hi, wi, _ = image.shape
    p = patch_size
    out = np.zeros((hi // p, wi // p, out_channels))
    for gy in range(hi // p):
        for gx in range(wi // p):
            patch = image[gy * p:(gy + 1) * p, gx * p:(gx + 1) * p, :].astype(np.float64)
            stats = []
            for c in range(3):
                stats.append(sum(patch[y, x, c] for y in range(p) for x in range(p)) / (p * p))
            for c in range(3):
                mu = stats[c]
                var = sum((patch[y, x, c] - mu) ** 2 for y in range(p) for x in range(p)) / (p * p)
                stats.append(math.sqrt(var))
            for c in range(3):
                dx = [abs(patch[y, x + 1, c] - patch[y, x, c]) for y in range(p) for x in range(p - 1)]
                dy = [abs(patch[y + 1, x, c] - patch[y, x, c]) for y in range(p - 1) for x in range(p)]
                stats.append(0.5 * (sum(dx) / len(dx) + sum(dy) / len(dy)))
            gray = patch.mean(axis=2)
            for f in freqs:
                for a in angles:
                    th = math.radians(a)
                    ev = np.array([[math.cos(2 * math.pi * f * (x * math.cos(th) + y * math.sin(th)))
                                    for x in range(p)] for y in range(p)])
                    od = np.array([[math.sin(2 * math.pi * f * (x * math.cos(th) + y * math.sin(th)))
                                    for x in range(p)] for y in range(p)])
                    ev = (ev - ev.mean()) / (p * p)
                    od = (od - od.mean()) / (p * p)
                    e = sum(gray[y, x] * ev[y, x] for y in range(p) for x in range(p))
                    o = sum(gray[y, x] * od[y, x] for y in range(p) for x in range(p))
                    stats.append(math.sqrt(e * e + o * o))
            stats = np.array(stats) * np.array(gains)
            out[gy, gx] = stats @ proj
    return out


# -- elementary layers ------------------------------------------------------

def linear(x, layer):
    w = to_np(layer.weight)
    b = to_np(layer.bias) if layer.bias is not None else np.zeros(w.shape[0])
    return np.array([sum(w[o, i] * x[i] for i in range(len(x))) + b[o] for o in range(w.shape[0])])


def gelu(x):
    return np.array([0.5 * v * (1.0 + math.erf(v / math.sqrt(2.0))) for v in x])


def sigmoid(v):
    return 1.0 / (1.0 + math.exp(-v))


def layer_norm(x, ln):
    mu = sum(x) / len(x)
    var = sum((v - mu) ** 2 for v in x) / len(x)
    g, b = to_np(ln.weight), to_np(ln.bias)
    return np.array([(x[i] - mu) / math.sqrt(var + ln.eps) * g[i] + b[i] for i in range(len(x))])


def mlp2(x, fc1, fc2):
    return linear(gelu(linear(x, fc1)), fc2)


def gru_cell(x, h, cell):
    d = len(h)
    wih, whh = to_np(cell.weight_ih), to_np(cell.weight_hh)
    bih, bhh = to_np(cell.bias_ih), to_np(cell.bias_hh)

    def gate(block, inp, hid, w_i, w_h, b_i, b_h):
        rows = range(block * d, (block + 1) * d)
        gi = np.array([sum(w_i[r, j] * inp[j] for j in range(len(inp))) + b_i[r] for r in rows])
        gh = np.array([sum(w_h[r, j] * hid[j] for j in range(d)) + b_h[r] for r in rows])
        return gi, gh

    ri, rh = gate(0, x, h, wih, whh, bih, bhh)
    zi, zh = gate(1, x, h, wih, whh, bih, bhh)
    ni, nh = gate(2, x, h, wih, whh, bih, bhh)
    r = np.array([sigmoid(a + b) for a, b in zip(ri, rh)])
    z = np.array([sigmoid(a + b) for a, b in zip(zi, zh)])
    n = np.array([math.tanh(ni[i] + r[i] * nh[i]) for i in range(d)])
    return np.array([(1 - z[i]) * n[i] + z[i] * h[i] for i in range(d)])


# -- slot attention ------------------------------------------------------------

def slot_attention(module, inputs, slots):
    """``inputs`` (N, C_a) and ``slots`` (K, D) for a single sample."""
    cfg = module.config
    n, k = inputs.shape[0], slots.shape[0]
    d = slots.shape[1]
    normed = [layer_norm(inputs[i], module.norm_inputs) for i in range(n)]
    keys = [linear(x, module.to_k) / math.sqrt(d) for x in normed]
    values = [linear(x, module.to_v) for x in normed]
    slots = [np.array(s, dtype=np.float64) for s in slots]
    attn = None
    for _ in range(cfg.num_iterations):
        q = [linear(layer_norm(s, module.norm_slots), module.to_q) for s in slots]
        attn = np.zeros((k, n))
        for i in range(n):
            logits = [sum(q[a][j] * keys[i][j] for j in range(d)) for a in range(k)]
            m = max(logits)
            ex = [math.exp(v - m) for v in logits]
            for a in range(k):
                attn[a, i] = ex[a] / sum(ex)
        new = []
        for a in range(k):
            w = [attn[a, i] + cfg.epsilon for i in range(n)]
            tot = sum(w)
            upd = sum((w[i] / tot) * values[i] for i in range(n))
            h = gru_cell(upd, slots[a], module.gru)
            h = h + mlp2(layer_norm(h, module.norm_mlp), module.mlp[0], module.mlp[2])
            new.append(h)
        slots = new
    return np.array(slots), attn


def decode(decoder, slots, pos_inputs, height, width):
    """Returns per-slot features (K,H,W,C), alpha (K,H,W), masks, reconstruction (H,W,C)."""
    k = slots.shape[0]
    n = pos_inputs.shape[0]
    c = decoder.feature_dim
    mlp = decoder.mlp
    feats = np.zeros((k, n, c))
    alpha = np.zeros((k, n))
    for a in range(k):
        for i in range(n):
            x = np.concatenate([slots[a], pos_inputs[i]])
            hdn = gelu(linear(x, mlp[0]))
            hdn = gelu(linear(hdn, mlp[2]))
            out = linear(hdn, mlp[4])
            feats[a, i] = out[:c]
            alpha[a, i] = out[c]
    masks = np.zeros((k, n))
    for i in range(n):
        m = max(alpha[:, i])
        ex = [math.exp(alpha[a, i] - m) for a in range(k)]
        for a in range(k):
            masks[a, i] = ex[a] / sum(ex)
    recon = np.zeros((n, c))
    for i in range(n):
        for a in range(k):
            recon[i] += feats[a, i] * masks[a, i]
    return (feats.reshape(k, height, width, c), alpha.reshape(k, height, width),
            masks.reshape(k, height, width), recon.reshape(height, width, c))


# -- resampling and metrics ---------------------------------------------------

def bilinear_upsample(grid, factor):
    """align_corners=False bilinear resize of an (h, w) array by an integer factor."""
    h, w = grid.shape
    out = np.zeros((h * factor, w * factor))
    for y in range(h * factor):
        sy = min(max((y + 0.5) / factor - 0.5, 0.0), h - 1)
        y0 = int(math.floor(sy))
        y1 = min(y0 + 1, h - 1)
        fy = sy - y0
        for x in range(w * factor):
            sx = min(max((x + 0.5) / factor - 0.5, 0.0), w - 1)
            x0 = int(math.floor(sx))
            x1 = min(x0 + 1, w - 1)
            fx = sx - x0
            top = grid[y0, x0] * (1 - fx) + grid[y0, x1] * fx
            bot = grid[y1, x0] * (1 - fx) + grid[y1, x1] * fx
            out[y, x] = top * (1 - fy) + bot * fy
    return out


def hausdorff_bruteforce(a, b):
    pa = [(y, x) for y in range(a.shape[0]) for x in range(a.shape[1]) if a[y, x]]
    pb = [(y, x) for y in range(b.shape[0]) for x in range(b.shape[1]) if b[y, x]]
    if not pa or not pb:
        return math.nan

    def directed(p, q):
        worst = 0.0
        for (y1, x1) in p:
            best = math.inf
            for (y2, x2) in q:
                dy, dx = y1 - y2, x1 - x2
                best = min(best, math.sqrt(dy * dy + dx * dx))
            worst = max(worst, best)
        return worst

    return max(directed(pa, pb), directed(pb, pa))


def bce(logits, labels):
    total = 0.0
    flat_x, flat_y = logits.ravel(), labels.ravel()
    for x, y in zip(flat_x, flat_y):
        s = 1.0 / (1.0 + math.exp(-x))
        total += -(y * math.log(s) + (1 - y) * math.log(1 - s))
    return total / flat_x.size
