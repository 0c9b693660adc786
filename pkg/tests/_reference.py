"""Independent oracles for the test suite.

Two kinds live here:

* scalar-loop reference implementations of the tensor primitives (no numpy
  vectorization on the checked path), and
* float64 reimplementations of the network forward functions that read
  parameter values through a lookup so finite differences can perturb them
  at full precision.

Nothing in this module touches the tape machinery.
"""

from __future__ import annotations

import math

import numpy as np


# ---------------------------------------------------------------------------
# scalar-loop primitive references


def ref_matmul(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 2 and b.ndim == 2:
        n, k = a.shape
        k2, m = b.shape
        assert k == k2
        out = np.zeros((n, m))
        for i in range(n):
            for j in range(m):
                acc = 0.0
                for t in range(k):
                    acc += a[i, t] * b[t, j]
                out[i, j] = acc
        return out
    if b.ndim == 2:
        lead = a.shape[:-2]
        flat = a.reshape(-1, *a.shape[-2:])
        return np.stack([ref_matmul(x, b) for x in flat]).reshape(*lead, a.shape[-2], b.shape[-1])
    assert a.shape[:-2] == b.shape[:-2]
    lead = a.shape[:-2]
    fa = a.reshape(-1, *a.shape[-2:])
    fb = b.reshape(-1, *b.shape[-2:])
    return np.stack([ref_matmul(x, y) for x, y in zip(fa, fb)]).reshape(
        *lead, a.shape[-2], b.shape[-1]
    )


def _elementwise(a, b, fn):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    out = np.zeros_like(a)
    for idx in np.ndindex(a.shape):
        out[idx] = fn(a[idx], b[idx])
    return out


def ref_add(a, b):
    return _elementwise(a, b, lambda x, y: x + y)


def ref_sub(a, b):
    return _elementwise(a, b, lambda x, y: x - y)


def ref_mul(a, b):
    return _elementwise(a, b, lambda x, y: x * y)


def _unary(a, fn):
    a = np.asarray(a, dtype=np.float64)
    out = np.zeros_like(a)
    for idx in np.ndindex(a.shape):
        out[idx] = fn(a[idx])
    return out


def ref_scale(a, s):
    return _unary(a, lambda x: x * s)


def ref_relu(a):
    return _unary(a, lambda x: x if x > 0 else 0.0)


def ref_tanh(a):
    return _unary(a, math.tanh)


def ref_square(a):
    return _unary(a, lambda x: x * x)


def ref_softmax_lastdim(a):
    a = np.asarray(a, dtype=np.float64)
    out = np.zeros_like(a)
    rows = a.reshape(-1, a.shape[-1])
    flat = out.reshape(-1, a.shape[-1])
    for r in range(rows.shape[0]):
        m = max(rows[r])
        exps = [math.exp(x - m) for x in rows[r]]
        total = sum(exps)
        for c, e in enumerate(exps):
            flat[r, c] = e / total
    return out


def ref_sum(a):
    total = 0.0
    for v in np.asarray(a, dtype=np.float64).reshape(-1):
        total += v
    return total


def ref_mean(a):
    a = np.asarray(a)
    return ref_sum(a) / a.size


def ref_concat_lastdim(arrs):
    arrs = [np.asarray(x, dtype=np.float64) for x in arrs]
    lead = arrs[0].shape[:-1]
    width = sum(x.shape[-1] for x in arrs)
    out = np.zeros(lead + (width,))
    for idx in np.ndindex(lead):
        offset = 0
        for x in arrs:
            for c in range(x.shape[-1]):
                out[idx + (offset + c,)] = x[idx + (c,)]
            offset += x.shape[-1]
    return out


# ---------------------------------------------------------------------------
# float64 network references (read parameters through `get`)


def data64(p):
    return p.data.astype(np.float64)


def make_param_store(nets):
    """id -> float64 copy of every parameter in the given nets."""
    store = {}
    params = []
    for net in nets:
        for p in net.parameters():
            store[id(p)] = data64(p)
            params.append(p)
    return store, params


def _relu64(x):
    return np.maximum(x, 0.0)


def _pool64(pool, query, keys, get):
    """query (d,), keys (M, d) -> (d,) using the attention formula."""
    wq = get(pool.w_query)
    wk = get(pool.w_key)
    scores = (keys @ wk.T) @ (wq @ query)
    e = np.exp(scores - scores.max())
    alpha = e / e.sum()
    return alpha @ keys


def ref_encode(encoder, obs, action, get):
    q = _relu64(get(encoder.self_enc.w).T @ np.asarray(obs.self_feats, dtype=np.float64) + get(encoder.self_enc.b))
    parts = [q]
    d = encoder.spec.embed_dim
    for name, _ in encoder.spec.entity_types:
        arr = np.asarray(obs.entities[name], dtype=np.float64)
        if len(arr) == 0:
            parts.append(np.zeros(d))
            continue
        enc = encoder.type_encs[name]
        emb = _relu64(arr @ get(enc.w) + get(enc.b))
        parts.append(_pool64(encoder.type_pools[name], q, emb, get))
    if encoder.with_action:
        lin = encoder.action_enc
        parts.append(_relu64(get(lin.w).T @ np.asarray(action, dtype=np.float64) + get(lin.b)))
    h = np.concatenate(parts)
    return _relu64(get(encoder.out.w).T @ h + get(encoder.out.b))


def ref_policy_forward(policy, obs, get=None):
    get = get or data64
    h = ref_encode(policy.encoder, obs, None, get)
    return np.tanh(get(policy.head.w).T @ h + get(policy.head.b))


def ref_critic_forward(critic, observations, actions, index, roles, get=None):
    get = get or data64
    n = len(observations)
    embs = [ref_encode(critic.encoder, o, a, get) for o, a in zip(observations, actions)]
    own = embs[index]
    parts = [_relu64(get(critic.own.w).T @ own + get(critic.own.b))]
    if critic.spec.n_roles == 1:
        groups = [[j for j in range(n) if j != index]]
    else:
        groups = [
            [j for j in range(n) if j != index and roles[j] == roles[index]],
            [j for j in range(n) if roles[j] != roles[index]],
        ]
    d = critic.spec.embed_dim
    for pool, members in zip(critic.agent_pools, groups):
        if not members:
            parts.append(np.zeros(d))
            continue
        keys = np.stack([embs[j] for j in members])
        parts.append(_pool64(pool, own, keys, get))
    h = _relu64(get(critic.head1.w).T @ np.concatenate(parts) + get(critic.head1.b))
    return float((get(critic.head2.w).T @ h + get(critic.head2.b))[0])


def directional_fd(fn, store, params, direction, h=1e-3):
    """Central finite difference of fn(get) along a parameter-space direction.

    ``direction`` maps id(param) -> float64 array of the same shape.
    """

    def evaluate(sign):
        shifted = dict(store)
        for p in params:
            shifted[id(p)] = store[id(p)] + sign * h * direction[id(p)]
        return fn(lambda p: shifted[id(p)])

    return (evaluate(+1.0) - evaluate(-1.0)) / (2.0 * h)


def directional_gradcheck(grads, params, store, fn, rng, tol=1e-3, tries=16, required=3, h=2e-4):
    """Compare tape gradients to central finite differences of ``fn`` along
    several parameter-space directions.

    The first direction is the gradient itself; the rest are random. The
    Richardson-extrapolated stencil pair (h, h/2) is the reference; directions
    where the two stencils disagree beyond the assertion tolerance are skipped
    (a relu kink sits inside the stencil), as are directions with no signal.
    Returns the number of directions actually checked.
    """
    grads = {p: grads.get(p, np.zeros_like(p.data)) for p in params}
    gvec_norm = np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    assert gvec_norm > 0, "gradient is identically zero"
    checked = 0
    for trial in range(tries):
        if checked >= required:
            break
        if trial == 0:
            direction = {id(p): grads[p].astype(np.float64) / gvec_norm for p in params}
        else:
            direction = {id(p): rng.standard_normal(p.data.shape) for p in params}
            norm = np.sqrt(sum((d**2).sum() for d in direction.values()))
            direction = {k: d / norm for k, d in direction.items()}
        fd = directional_fd(fn, store, params, direction, h=h)
        fd_half = directional_fd(fn, store, params, direction, h=h / 2)
        fd_rich = (4.0 * fd_half - fd) / 3.0
        if abs(fd_rich) < 1e-4 * gvec_norm:
            continue  # nearly orthogonal to the gradient
        if abs(fd - fd_half) > 0.25 * tol * abs(fd_rich):
            continue  # stencil disagreement: kink inside, no clean reference
        got = sum(float(np.sum(grads[p].astype(np.float64) * direction[id(p)])) for p in params)
        assert abs(got - fd_rich) / max(abs(fd_rich), 1e-12) < tol
        checked += 1
    assert checked >= 1, "no usable finite-difference direction found"
    return checked
