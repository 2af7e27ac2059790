"""Independent oracles the tests check the library against.

Everything here is deliberately brute force (explicit loops, dense searches,
finite differences) and never calls the code paths it verifies.
"""

from __future__ import annotations

import numpy as np

from crossmesh import tensor as tt
from crossmesh.tensor import Tensor, backward, no_grad, tape_scope

FD_STEP = 1e-5
FD_RTOL = 1e-4
FD_ATOL = 1e-7


def finite_difference(fn, arrays: list[np.ndarray], which: int, index: int,
                      h: float = FD_STEP) -> float:
    """Central difference of scalar fn(*arrays) w.r.t. arrays[which].flat[index]."""
    flat = arrays[which].ravel()
    orig = flat[index]
    flat[index] = orig + h
    with no_grad():
        up = fn(*[Tensor(a) for a in arrays]).item()
    flat[index] = orig - h
    with no_grad():
        down = fn(*[Tensor(a) for a in arrays]).item()
    flat[index] = orig
    return (up - down) / (2.0 * h)


def gradcheck(fn, arrays: list[np.ndarray], coords_per_input: int | None = None,
              rtol: float = FD_RTOL, atol: float = FD_ATOL, seed: int = 0) -> float:
    """Compare reverse-mode gradients of scalar fn against central differences.

    Returns the worst mismatch ratio |fd - an| / max(|fd|, |an|, atol/rtol);
    asserts it stays below rtol. ``coords_per_input`` subsamples coordinates
    for large inputs.
    """
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    with tape_scope():
        loss = fn(*tensors)
        backward(loss)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for which, (t, a) in enumerate(zip(tensors, arrays)):
        assert t.grad is not None, f"input {which} received no gradient"
        assert t.grad.shape == a.shape
        n = a.size
        if coords_per_input is None or coords_per_input >= n:
            idxs = range(n)
        else:
            idxs = rng.choice(n, size=coords_per_input, replace=False)
        for index in idxs:
            fd = finite_difference(fn, arrays, which, int(index))
            an = float(t.grad.ravel()[int(index)])
            err = abs(fd - an) / max(abs(fd), abs(an), atol / rtol)
            worst = max(worst, err)
            assert err < rtol, (
                f"gradient mismatch at input {which}, coord {index}: fd={fd!r} an={an!r} err={err:.3g}"
            )
    return worst


# -- attention formula oracles -------------------------------------------------


def exchanged_attention_oracle(x_q: np.ndarray, q_params, x_kv: np.ndarray, kv_params,
                               out_params) -> np.ndarray:
    """Literal multi-head attention via per-head loops and explicit softmax.

    Queries come from ``q_params`` applied to ``x_q``; keys/values from
    ``kv_params`` applied to ``x_kv`` (each modality projects with its own
    weights); the output projection is ``out_params``.
    """
    heads, d = out_params.head_count, out_params.w_q.shape[0]
    dh = d // heads
    q = x_q @ q_params.w_q.numpy() + q_params.b_q.numpy()
    k = x_kv @ kv_params.w_k.numpy() + kv_params.b_k.numpy()
    v = x_kv @ kv_params.w_v.numpy() + kv_params.b_v.numpy()
    ctx = np.zeros((x_q.shape[0], d))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        qh, kh, vh = q[:, sl], k[:, sl], v[:, sl]
        for i in range(qh.shape[0]):
            scores = np.array([qh[i] @ kh[j] for j in range(kh.shape[0])]) / np.sqrt(dh)
            e = np.exp(scores - scores.max())
            a = e / e.sum()
            ctx[i, sl] = sum(a[j] * vh[j] for j in range(vh.shape[0]))
    return ctx @ out_params.w_o.numpy() + out_params.b_o.numpy()


def attention_oracle(x_q: np.ndarray, x_kv: np.ndarray, p) -> np.ndarray:
    """Self-attention flavor: one parameter set for queries, keys, and values."""
    return exchanged_attention_oracle(x_q, p, x_kv, p, p)


def layer_norm_oracle(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                      eps: float = 1e-5) -> np.ndarray:
    out = np.zeros_like(x)
    for i in range(x.shape[0]):
        row = x[i]
        mu = row.mean()
        var = ((row - mu) ** 2).mean()
        out[i] = gamma * (row - mu) / np.sqrt(var + eps) + beta
    return out


def cross_modal_oracle(x_img: np.ndarray, x_kp: np.ndarray, params) -> dict:
    """Brute-force evaluation of the key/value-exchanged attention module."""
    img_mha = exchanged_attention_oracle(x_img, params.attn_img, x_kp, params.attn_kp,
                                         params.attn_img)
    kp_mha = exchanged_attention_oracle(x_kp, params.attn_kp, x_img, params.attn_img,
                                        params.attn_kp)
    mlp = None
    if params.switch is not None:
        h = x_kp @ params.switch.w1.numpy() + params.switch.b1.numpy()
        h = 0.5 * h * (1.0 + np.tanh(np.sqrt(2 / np.pi) * (h + 0.044715 * h**3)))
        mlp = h @ params.switch.w2.numpy() + params.switch.b2.numpy()
    img_att = layer_norm_oracle(x_img + img_mha, params.ln_img.gamma.numpy(),
                                params.ln_img.beta.numpy())
    kp_att = layer_norm_oracle(x_kp + kp_mha, params.ln_kp.gamma.numpy(),
                               params.ln_kp.beta.numpy())
    return {"img_mha": img_mha, "kp_mha": kp_mha, "mlp": mlp,
            "img_att": img_att, "kp_att": kp_att}


# -- procrustes oracle -----------------------------------------------------------


def _euler(a: float, b: float, c: float) -> np.ndarray:
    ca, sa = np.cos(a), np.sin(a)
    cb, sb = np.cos(b), np.sin(b)
    cc, sc = np.cos(c), np.sin(c)
    rz = np.array([[ca, -sa, 0], [sa, ca, 0], [0, 0, 1]])
    ry = np.array([[cb, 0, sb], [0, 1, 0], [-sb, 0, cb]])
    rx = np.array([[1, 0, 0], [0, cc, -sc], [0, sc, cc]])
    return rz @ ry @ rx


def _residual_for_rotation(r: np.ndarray, x: np.ndarray, y: np.ndarray) -> float:
    """Closed-form optimal scale/translation for a fixed rotation."""
    mx, my = x.mean(axis=0), y.mean(axis=0)
    x0, y0 = x - mx, y - my
    rx = x0 @ r.T
    denom = (rx * rx).sum()
    s = (rx * y0).sum() / denom
    if s <= 0:
        s = 1e-12
    res = s * rx - y0
    return float(np.sqrt((res * res).sum()))


def procrustes_grid_oracle(x: np.ndarray, y: np.ndarray, levels: int = 6,
                           steps: int = 13) -> float:
    """Coarse-to-fine dense search over Euler angles (to ~1e-3 rad)."""
    best = (0.0, 0.0, 0.0)
    span = np.pi
    best_res = np.inf
    for _ in range(levels):
        grid = np.linspace(-span, span, steps)
        for da in grid:
            for db in grid:
                for dc in grid:
                    r = _euler(best[0] + da, best[1] + db, best[2] + dc)
                    res = _residual_for_rotation(r, x, y)
                    if res < best_res:
                        best_res = res
                        cand = (best[0] + da, best[1] + db, best[2] + dc)
        best = cand
        span /= steps / 2.0
    return best_res


# -- scalar-loop loss oracles ------------------------------------------------------


def loss_map_oracle(ph, po, gh, go, w) -> float:
    k = ph.shape[0]
    total = 0.0
    for i in range(k):
        total += w[i] * np.abs(ph[i] - gh[i]).mean()
        total += w[i] * np.abs(po[i] - go[i]).mean()
    return total / k


def point_l1_oracle(pred, gt) -> float:
    total = 0.0
    for i in range(pred.shape[0]):
        total += sum(abs(pred[i, c] - gt[i, c]) for c in range(pred.shape[1]))
    return total / pred.shape[0]


def reproj_oracle(j3d, s, t, gt, vis) -> float:
    k = j3d.shape[0]
    total = 0.0
    for i in range(k):
        px = s * j3d[i, 0] + t[0]
        py = s * j3d[i, 1] + t[1]
        total += vis[i] * (abs(px - gt[i, 0]) + abs(py - gt[i, 1])) / 2.0
    return total / k


def consistency_oracle(a, b) -> float:
    return float(np.sqrt(((a - b) ** 2).sum()) / np.sqrt(a.shape[0]))


def conv2d_oracle(x, w, b=None, stride=1, padding=0):
    """Independent sliding-window cross-correlation (python loops)."""
    cout, cin, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    oh = (x.shape[1] + 2 * padding - kh) // stride + 1
    ow = (x.shape[2] + 2 * padding - kw) // stride + 1
    out = np.zeros((cout, oh, ow))
    for o in range(cout):
        for i in range(oh):
            for j in range(ow):
                acc = 0.0
                for c in range(cin):
                    for a_ in range(kh):
                        for b_ in range(kw):
                            acc += xp[c, i * stride + a_, j * stride + b_] * w[o, c, a_, b_]
                out[o, i, j] = acc + (b[o] if b is not None else 0.0)
    return out
