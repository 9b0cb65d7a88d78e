"""Forward evaluation of the attention ansatz with derivative propagation.

One forward pass co-propagates, through every layer, the triple

    (value, Jacobian w.r.t. selected electron coordinates, Laplacian trace)

so that log|psi|, its spatial gradient, and its Laplacian come out together.
The determinant stage uses the closed forms

    d  log det M = tr(M^-1 dM)
    d2 log det M = tr(M^-1 d2M) - tr((M^-1 dM)^2)

per coordinate. A hand-written reverse pass over the same computation yields
parameter gradients of the complex log-amplitude, either per sample (for the
overlap-matrix preconditioner and for tests) or contracted with a per-walker
weight vector (for the energy gradient), in which case the per-layer activation
and sensitivity second moments needed by the Kronecker-factored preconditioner
are collected in the same sweep.

Jacobian buffers are dense, shape (batch, n_coords, tokens, features). All hot
contractions are phrased as GEMMs; plain einsum is reserved for small
statistics where it cannot dominate.
"""

from __future__ import annotations

import numpy as np

from .state import DerivativeBatch

# |psi| below this is reported as a vanishing amplitude (never silently clamped)
LOG_DEGENERATE = np.log(1e-300)


def _mm(x: np.ndarray, w_t: np.ndarray) -> np.ndarray:
    """Right-multiply the trailing axis by w_t via one GEMM."""
    shape = x.shape
    return (x.reshape(-1, shape[-1]) @ w_t).reshape(*shape[:-1], w_t.shape[1])


def _heads(x, n_heads, width):
    """(B, ..., N, H*W) slice -> contiguous (B, H, ..., N, W)."""
    *lead, n, _ = x.shape
    x = x.reshape(*lead, n, n_heads, width)
    return np.ascontiguousarray(np.moveaxis(x, -2, 1))


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------


def _attention_forward(h, hj, hl, wq, wk, wv, wo, tape):
    """One residual self-attention layer, propagating optional jac/lap buffers.

    h: (B, N, D); hj: (B, C, N, D) or None; hl: (B, N, D) or None.
    wq/wk: (H, A, D), wv: (H, V, D), wo: (D, H*V).
    """
    b, n, _ = h.shape
    n_heads, d_attn, _ = wq.shape
    d_vals = wv.shape[1]
    scale = 1.0 / np.sqrt(d_attn)
    na, nv = n_heads * d_attn, n_heads * d_vals

    wqkv_t = np.concatenate(
        [wq.reshape(na, -1), wk.reshape(na, -1), wv.reshape(nv, -1)]
    ).T  # (D, H*(2A+V))

    pk = _mm(h, wqkv_t)
    q = _heads(pk[..., :na], n_heads, d_attn)  # (B,H,N,A)
    k = _heads(pk[..., na : 2 * na], n_heads, d_attn)
    v = _heads(pk[..., 2 * na :], n_heads, d_vals)

    logits = (q @ k.swapaxes(-1, -2)) * scale  # (B,H,N,N), row i = query
    a = np.exp(logits - logits.max(axis=-1, keepdims=True))
    a /= a.sum(axis=-1, keepdims=True)

    out = a @ v  # (B,H,N,V)
    cat = np.ascontiguousarray(out.swapaxes(1, 2)).reshape(b, n, nv)
    f = h + _mm(cat, wo.T)

    if tape is not None:
        tape.append({"h_in": h, "q": q, "k": k, "v": v, "a": a, "cat": cat})

    fj = fl = None
    if hj is not None:
        c = hj.shape[1]
        pkj = _mm(hj, wqkv_t)  # (B,C,N,H*(2A+V))
        qj = _heads(pkj[..., :na], n_heads, d_attn)  # (B,H,C,N,A)
        kj = _heads(pkj[..., na : 2 * na], n_heads, d_attn)
        vj = _heads(pkj[..., 2 * na :], n_heads, d_vals)

        # d(q_i . k_j) split into (dq_i).k_j and q_i.(dk_j)
        s1 = (qj.reshape(b, n_heads, c * n, d_attn) @ k.swapaxes(-1, -2)).reshape(
            b, n_heads, c, n, n
        )
        kjm = np.ascontiguousarray(kj.transpose(0, 1, 4, 2, 3)).reshape(
            b, n_heads, d_attn, c * n
        )
        s2 = (
            (q @ kjm).reshape(b, n_heads, n, c, n).transpose(0, 1, 3, 2, 4)
        )
        sj = (s1 + s2) * scale  # (B,H,C,N,N)

        mu = (a[:, :, None] * sj).sum(axis=-1)  # (B,H,C,N)
        u = sj - mu[..., None]
        aj = a[:, :, None] * u

        o1 = (aj.reshape(b, n_heads, c * n, n) @ v).reshape(b, n_heads, c, n, d_vals)
        vjm = np.ascontiguousarray(vj.transpose(0, 1, 3, 2, 4)).reshape(
            b, n_heads, n, c * d_vals
        )
        o2 = (a @ vjm).reshape(b, n_heads, n, c, d_vals).transpose(0, 1, 3, 2, 4)
        outj = o1 + o2
        catj = np.ascontiguousarray(outj.transpose(0, 2, 3, 1, 4)).reshape(
            b, c, n, nv
        )
        fj = hj + _mm(catj, wo.T)

        if hl is not None:
            pkl = _mm(hl, wqkv_t)
            ql = _heads(pkl[..., :na], n_heads, d_attn)
            kl = _heads(pkl[..., na : 2 * na], n_heads, d_attn)
            vl = _heads(pkl[..., 2 * na :], n_heads, d_vals)

            qjm = np.ascontiguousarray(qj.transpose(0, 1, 3, 2, 4)).reshape(
                b, n_heads, n, c * d_attn
            )
            kjm2 = np.ascontiguousarray(kj.transpose(0, 1, 3, 2, 4)).reshape(
                b, n_heads, n, c * d_attn
            )
            sl = (
                ql @ k.swapaxes(-1, -2)
                + q @ kl.swapaxes(-1, -2)
                + 2.0 * (qjm @ kjm2.swapaxes(-1, -2))
            ) * scale  # (B,H,N,N)

            usq = (u * u).sum(axis=2)
            t1 = (aj * sj).sum(axis=(2, 4))
            t2 = (a * sl).sum(axis=-1)
            al = a * (usq + sl - (t1 + t2)[..., None])

            ajm = np.ascontiguousarray(aj.transpose(0, 1, 3, 2, 4)).reshape(
                b, n_heads, n, c * n
            )
            outl = (
                al @ v
                + 2.0 * (ajm @ vj.reshape(b, n_heads, c * n, d_vals))
                + a @ vl
            )
            catl = np.ascontiguousarray(outl.swapaxes(1, 2)).reshape(b, n, nv)
            fl = hl + _mm(catl, wo.T)

    return f, fj, fl


def _perceptron_forward(f, fj, fl, w, bias, tape):
    """Residual tanh perceptron f + tanh(W f + b) with buffer propagation."""
    z = _mm(f, w.T) + bias
    t = np.tanh(z)
    h = f + t
    if tape is not None:
        tape.append({"f_in": f, "t": t})
    hj = hl = None
    if fj is not None:
        dphi = 1.0 - t * t
        zj = _mm(fj, w.T)
        hj = fj + dphi[:, None] * zj
        if fl is not None:
            zl = _mm(fl, w.T)
            sumsq = (zj * zj).sum(axis=1)
            hl = fl + dphi * zl - 2.0 * t * dphi * sumsq
    return h, hj, hl


def _forward_streams(params, feats, fjac=None, flap=None, tape=None):
    """Run the token streams through embedding + all layers."""
    w0t = params["embed"].T
    h = _mm(feats, w0t)
    hj = _mm(fjac, w0t) if fjac is not None else None
    hl = _mm(flap, w0t) if flap is not None else None
    if tape is not None:
        tape.append({"feats": feats})

    n_layers = params["wq"].shape[0]
    n_mlp = params["mlp_w"].shape[1]
    for layer in range(n_layers):
        h, hj, hl = _attention_forward(
            h,
            hj,
            hl,
            params["wq"][layer],
            params["wk"][layer],
            params["wv"][layer],
            params["wo"][layer],
            tape,
        )
        for p in range(n_mlp):
            h, hj, hl = _perceptron_forward(
                h, hj, hl, params["mlp_w"][layer, p], params["mlp_b"][layer, p], tape
            )
    return h, hj, hl


def _orbital_matrices(params, h, hj=None, hl=None):
    n_det, n_orb, _ = params["orb_re"].shape
    worb = params["orb_re"] + 1j * params["orb_im"]  # (M, N_orb, D)
    proj_t = worb.reshape(n_det * n_orb, -1).T  # (D, M*N_orb)

    def project(x):
        if x is None:
            return None
        y = _mm(x, proj_t)  # (..., N, M*N_orb)
        y = y.reshape(*x.shape[:-1], n_det, n_orb)
        return np.ascontiguousarray(np.moveaxis(y, -2, 1))

    phi = project(h)  # (B, M, N, N_orb)
    phij = None
    if hj is not None:
        y = _mm(hj, proj_t).reshape(*hj.shape[:-1], n_det, n_orb)
        phij = np.ascontiguousarray(y.transpose(0, 3, 1, 2, 4))  # (B,M,C,N,N_orb)
    phil = project(hl)
    return worb, phi, phij, phil


def _det_combine(phi, want_inverse):
    """Stable sum over determinants in the complex log domain.

    Returns (logpsi, weights, minv, singular, degenerate). ``weights`` are the
    per-determinant complex fractions det_m / sum_m det_m; singular
    determinants get weight zero, and their (placeholder) inverses never
    contribute. Rows whose summed amplitude vanishes or underflows are flagged
    degenerate.
    """
    n = phi.shape[-1]
    sign, logabs = np.linalg.slogdet(phi)
    singular = (sign == 0) | ~np.isfinite(logabs)
    z = np.where(singular, -np.inf, logabs) + 1j * np.angle(sign)

    zmax = np.max(np.where(singular, -np.inf, logabs), axis=1)
    alive = np.isfinite(zmax)
    with np.errstate(invalid="ignore", over="ignore"):
        wtil = np.exp(z - np.where(alive, zmax, 0.0)[:, None])
    wtil[singular] = 0.0
    total = wtil.sum(axis=1)

    safe_total = np.where(total == 0, 1.0, total)
    logpsi = np.where(alive, zmax, -np.inf) + np.log(safe_total)
    degenerate = ~alive | (total == 0) | (logpsi.real < LOG_DEGENERATE)
    logpsi = np.where(degenerate, -np.inf + 0j, logpsi)
    weights = np.where((total == 0)[:, None], 0.0, wtil / safe_total[:, None])

    minv = None
    if want_inverse:
        phi_safe = np.where(singular[:, :, None, None], np.eye(n)[None, None], phi)
        minv = np.linalg.inv(phi_safe)
    return logpsi, weights, minv, singular, degenerate


def forward_log_amplitude(params, feats, tape=None):
    """Complex log-amplitude per walker; real part is -inf where psi = 0."""
    h, _, _ = _forward_streams(params, feats, tape=tape)
    worb, phi, _, _ = _orbital_matrices(params, h)
    want_inv = tape is not None
    logpsi, weights, minv, singular, degenerate = _det_combine(phi, want_inv)
    if tape is not None:
        tape.append(
            {
                "h_final": h,
                "worb": worb,
                "minv": minv,
                "weights": weights,
                "singular": singular,
                "degenerate": degenerate,
            }
        )
    return logpsi


def forward_with_derivatives(
    params, feats, fjac, flap, need_laplacian=True
) -> DerivativeBatch:
    """Value, coordinate gradient, and (optionally) Laplacian of log psi.

    ``fjac`` may cover any subset of coordinates (axis 1); the returned
    gradient has matching length. The Laplacian requires the full set.
    """
    h, hj, hl = _forward_streams(
        params, feats, fjac=fjac, flap=flap if need_laplacian else None
    )
    _, phi, phij, phil = _orbital_matrices(params, h, hj, hl)
    logpsi, weights, minv, singular, degenerate = _det_combine(phi, True)
    b, m, c, n, _ = phij.shape

    # Per-determinant log-derivatives; singular determinants carry zero weight
    # and their placeholder inverses are annihilated by it.
    g = (minv[:, :, None] * phij.swapaxes(-1, -2)).sum(axis=(-2, -1))  # (B,M,C)
    grad = (weights[..., None] * g).sum(axis=1)  # (B,C)

    lap = None
    if need_laplacian:
        phijm = np.ascontiguousarray(phij.transpose(0, 1, 3, 2, 4)).reshape(
            b, m, n, c * n
        )
        t = (minv @ phijm).reshape(b, m, n, c, n)  # [i, c, j] of M^-1 dM
        tr_t2 = (t * t.transpose(0, 1, 4, 3, 2)).sum(axis=(2, 4))  # (B,M,C)
        lapz = (minv * phil.swapaxes(-1, -2)).sum(axis=(-2, -1)) - tr_t2.sum(axis=-1)
        lap = (weights * (lapz + (g * g).sum(axis=-1))).sum(axis=1) - (
            grad * grad
        ).sum(axis=1)
        lap = np.where(degenerate, np.nan, lap)

    grad = np.where(degenerate[:, None], np.nan, grad)
    return DerivativeBatch(logpsi, grad, lap, degenerate)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def _det_boundary_cotangents(det_tape):
    """d log(psi) / d phi_m = weight_m * (M_m^-1)^T, zero for singular dets."""
    minv = det_tape["minv"]
    weights = det_tape["weights"]
    cot_phi = weights[:, :, None, None] * minv.swapaxes(-1, -2)
    # Exactly singular determinants are skipped. Their true contribution is the
    # adjugate, which vanishes unless the rank is exactly N-1; configurations
    # where that matters are flagged degenerate upstream.
    return cot_phi


def _tdot(x, y, axes):
    return np.tensordot(x, y, axes=axes)


def _scores(cot):
    """Per-sample sampling-density scores 2 * d log|psi| / d(out), batch-centered.

    The Kronecker G factors approximate the Fisher of |psi|^2, whose score is
    twice the log-modulus gradient; centering over the batch matches the
    covariance form of the overlap matrix.
    """
    s = 2.0 * cot.real
    return s - s.mean(axis=0)


def _backward_network(params, layer_tapes, cot_h, eps=None, per_sample=False,
                      kfac_stats=None):
    """Backpropagate stream cotangents through MLP and attention layers.

    ``cot_h`` is (B, N, D), real or complex. With ``per_sample`` the per-layer
    parameter gradients keep the batch axis; otherwise they are contracted
    with the weight vector ``eps``. Returns a grads dict whose values mirror
    the parameter shapes (plus a leading batch axis in per-sample mode).
    """
    n_layers = params["wq"].shape[0]
    n_heads = params["wq"].shape[1]
    n_mlp = params["mlp_w"].shape[1]
    dtype = cot_h.dtype
    b, n_tok = cot_h.shape[0], cot_h.shape[1]
    scale = 1.0 / np.sqrt(params["wq"].shape[2])

    def wgrad(cot, act):
        """(B,N,out),(B,N,in) -> per-sample (B,out,in) or eps-weighted (out,in)."""
        if per_sample:
            return np.einsum("bno,bni->boi", cot, act, optimize=True)
        return _tdot(cot * eps[:, None, None], act, axes=([0, 1], [0, 1]))

    grads = {
        key: np.zeros(((b,) if per_sample else ()) + params[key].shape, dtype=dtype)
        for key in ("wq", "wk", "wv", "wo", "mlp_w", "mlp_b")
    }

    tape_iter = iter(reversed(layer_tapes))
    for layer in reversed(range(n_layers)):
        for p in reversed(range(n_mlp)):
            rec = next(tape_iter)
            f_in, t = rec["f_in"], rec["t"]
            cot_z = (1.0 - t * t) * cot_h
            grads["mlp_w"][..., layer, p, :, :] = wgrad(cot_z, f_in)
            if per_sample:
                grads["mlp_b"][..., layer, p, :] = cot_z.sum(axis=1)
            else:
                grads["mlp_b"][..., layer, p, :] = _tdot(
                    eps, cot_z.sum(axis=1), axes=(0, 0)
                )
            if kfac_stats is not None:
                act = np.concatenate([f_in, np.ones((b, n_tok, 1))], axis=-1)
                sens = _scores(cot_z)
                kfac_stats[f"mlp{layer}p{p}"] = (
                    _tdot(act, act, axes=([0, 1], [0, 1])) / (b * n_tok),
                    _tdot(sens, sens, axes=([0, 1], [0, 1])) / b,
                )
            cot_h = cot_h + _mm(cot_z, params["mlp_w"][layer, p])

        rec = next(tape_iter)
        h_in, q, k, v, a, cat = (
            rec["h_in"], rec["q"], rec["k"], rec["v"], rec["a"], rec["cat"],
        )
        wo = params["wo"][layer]

        cot_cat = _mm(cot_h, wo)  # (B,N,H*V)
        grads["wo"][..., layer, :, :] = wgrad(cot_h, cat)
        cot_out = _heads(cot_cat, n_heads, v.shape[-1])  # (B,H,N,V)
        cot_a = cot_out @ v.swapaxes(-1, -2)
        cot_v = a.swapaxes(-1, -2) @ cot_out
        cot_s = a * (cot_a - (a * cot_a).sum(axis=-1, keepdims=True))
        cot_q = (cot_s @ k) * scale
        cot_k = (cot_s.swapaxes(-1, -2) @ q) * scale

        def head_grad(cot):
            # (B,H,N,W) x (B,N,D) -> (H,W,D) (or (B,H,W,D) per sample)
            if per_sample:
                return np.einsum("bhnw,bnd->bhwd", cot, h_in, optimize=True)
            return _tdot(
                cot * eps[:, None, None, None], h_in, axes=([0, 2], [0, 1])
            )

        grads["wq"][..., layer, :, :, :] = head_grad(cot_q)
        grads["wk"][..., layer, :, :, :] = head_grad(cot_k)
        grads["wv"][..., layer, :, :, :] = head_grad(cot_v)

        if kfac_stats is not None:
            a_in = _tdot(h_in, h_in, axes=([0, 1], [0, 1])) / (b * n_tok)
            sens = _scores(cot_h)
            kfac_stats[f"wo{layer}"] = (
                _tdot(cat, cat, axes=([0, 1], [0, 1])) / (b * n_tok),
                _tdot(sens, sens, axes=([0, 1], [0, 1])) / b,
            )
            for name, cot in (("wq", cot_q), ("wk", cot_k), ("wv", cot_v)):
                sens = _scores(cot)
                g_heads = (
                    np.einsum("bhno,bhnp->hop", sens, sens, optimize=True) / b
                )
                for head in range(n_heads):
                    kfac_stats[f"{name}{layer}h{head}"] = (a_in, g_heads[head])

        # fold the three projections back onto the stream in one GEMM
        na = n_heads * q.shape[-1]
        nv = n_heads * v.shape[-1]
        cot_all = np.concatenate(
            [
                np.ascontiguousarray(cot_q.swapaxes(1, 2)).reshape(b, n_tok, na),
                np.ascontiguousarray(cot_k.swapaxes(1, 2)).reshape(b, n_tok, na),
                np.ascontiguousarray(cot_v.swapaxes(1, 2)).reshape(b, n_tok, nv),
            ],
            axis=-1,
        )
        wqkv = np.concatenate(
            [
                params["wq"][layer].reshape(na, -1),
                params["wk"][layer].reshape(na, -1),
                params["wv"][layer].reshape(nv, -1),
            ]
        )
        cot_h = cot_h + _mm(cot_all, wqkv)

    rec = next(tape_iter)
    feats = rec["feats"]
    if per_sample:
        grads["embed"] = np.einsum("bnd,bnf->bdf", cot_h, feats, optimize=True)
    else:
        grads["embed"] = _tdot(
            cot_h * eps[:, None, None], feats, axes=([0, 1], [0, 1])
        )
    if kfac_stats is not None:
        sens = _scores(cot_h)
        kfac_stats["embed"] = (
            _tdot(feats, feats, axes=([0, 1], [0, 1])) / (b * n_tok),
            _tdot(sens, sens, axes=([0, 1], [0, 1])) / b,
        )
    return grads


def weighted_param_gradient(params, feats, weights):
    """Gradient of sum_b weights_b * log|psi_b| w.r.t. every parameter.

    Returns (grads dict of real arrays, kfac statistics). Walkers with a
    vanishing amplitude contribute nothing regardless of their weight.
    """
    tape = []
    forward_log_amplitude(params, feats, tape=tape)
    det_tape = tape[-1]
    layer_tapes = tape[:-1]
    b, n_tok = feats.shape[0], feats.shape[1]
    eps = np.where(det_tape["degenerate"], 0.0, np.asarray(weights, dtype=np.float64))

    cot_phi = _det_boundary_cotangents(det_tape)  # (B,M,N,J)
    h_final = det_tape["h_final"]
    worb = det_tape["worb"]
    n_det, n_orb, _ = worb.shape
    kfac_stats = {}

    grads = {}
    cot_w = cot_phi * eps[:, None, None, None]
    grads_orb = _tdot(
        cot_w.transpose(1, 3, 0, 2).reshape(n_det * n_orb, -1),
        h_final.reshape(b * n_tok, -1),
        axes=(1, 0),
    ).reshape(n_det, n_orb, -1)
    grads["orb_re"] = grads_orb.real
    grads["orb_im"] = -grads_orb.imag  # Re(i * cot) = -Im(cot)
    cot_h = _mm(
        np.ascontiguousarray(cot_phi.transpose(0, 2, 1, 3)).reshape(
            b, n_tok, n_det * n_orb
        ),
        worb.reshape(n_det * n_orb, -1),
    ).real

    a_orb = _tdot(h_final, h_final, axes=([0, 1], [0, 1])) / (b * n_tok)
    for m_i in range(n_det):
        sens = _scores(
            np.concatenate(
                [cot_phi[:, m_i], -1j * cot_phi[:, m_i].conj()], axis=-1
            )
        )  # Re / -Im of the cotangent: d log|psi| w.r.t. (re, im) outputs
        kfac_stats[f"orb{m_i}"] = (
            a_orb,
            _tdot(sens, sens, axes=([0, 1], [0, 1])) / b,
        )

    net_grads = _backward_network(
        params, layer_tapes, cot_h, eps=eps, kfac_stats=kfac_stats
    )
    grads.update(net_grads)
    return grads, kfac_stats


def per_sample_param_gradients(params, feats):
    """Complex d(log psi_b)/d(theta) for every walker, flattened to (B, P).

    Memory scales as batch x parameter count; intended for the overlap-matrix
    preconditioner and for oracle tests at small sizes.
    """
    tape = []
    forward_log_amplitude(params, feats, tape=tape)
    det_tape = tape[-1]
    layer_tapes = tape[:-1]
    degenerate = det_tape["degenerate"]
    b, n_tok = feats.shape[0], feats.shape[1]

    cot_phi = _det_boundary_cotangents(det_tape)
    h_final = det_tape["h_final"]
    worb = det_tape["worb"]
    n_det, n_orb, _ = worb.shape

    grads = {}
    grads_orb = np.einsum("bmnj,bnd->bmjd", cot_phi, h_final, optimize=True)
    grads["orb_re"] = grads_orb
    grads["orb_im"] = 1j * grads_orb
    cot_h = _mm(
        np.ascontiguousarray(cot_phi.transpose(0, 2, 1, 3)).reshape(
            b, n_tok, n_det * n_orb
        ),
        worb.reshape(n_det * n_orb, -1),
    )

    net_grads = _backward_network(params, layer_tapes, cot_h, per_sample=True)
    grads.update(net_grads)

    flat = np.concatenate(
        [grads[key].reshape(b, -1) for key in
         ("embed", "wq", "wk", "wv", "wo", "mlp_w", "mlp_b", "orb_re", "orb_im")],
        axis=1,
    )
    flat[degenerate] = np.nan
    return flat, degenerate
