"""Finite-difference gradient checks exposed through the CLI.

Central differences with h=1e-5 against the recorded adjoints, per
primitive and for the full policy objective. The test suite carries its
own independent numeric differentiation so the shipped checker never
validates itself.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .policy import (PolicyBatch, PolicyConfig, forward_policy, init_policy,
                     nll_loss, policy_entropy)
from .tensor import Tensor


def numeric_gradient(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of one array."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f(x)
        flat[i] = orig - h
        lo = f(x)
        flat[i] = orig
        gf[i] = (hi - lo) / (2.0 * h)
    return g


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray,
                       floor: float = 1e-6) -> float:
    denom = np.maximum(np.abs(numeric), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def primitive_cases(rng: np.random.Generator):
    """(name, input array, Tensor -> scalar Tensor) triples.

    Each output is folded to a scalar through a fixed random weighting so
    the check exercises non-uniform upstream gradients.
    """
    a = rng.normal(size=(4, 4))
    b = rng.normal(size=(4, 4))
    bias = rng.normal(size=4)
    pos = np.abs(rng.normal(size=(4, 4))) + 0.5
    # keep kink/boundary inputs away from the finite-difference step
    kink_safe = np.where(np.abs(a) < 0.05, a + 0.2, a)
    ids = rng.integers(0, 4, size=(3, 5))
    w_emb = rng.normal(size=(3, 5, 4))
    w_stack = rng.normal(size=(2, 4, 4))
    mask = np.tril(np.ones((4, 4), dtype=bool))
    gain = rng.normal(size=4) * 0.1 + 1.0
    cbias = rng.normal(size=4) * 0.1
    wb = Tensor(b)

    def weighted(t):
        return T.reduce_sum(T.mul(t, wb))

    return [
        ("matmul", a, lambda x: weighted(T.matmul(x, Tensor(b)))),
        ("add", a, lambda x: weighted(T.add(x, Tensor(b)))),
        ("add_bias", a, lambda x: weighted(T.add(x, Tensor(bias)))),
        ("multiply", a, lambda x: weighted(T.mul(x, Tensor(b)))),
        ("sum", a, lambda x: T.reduce_sum(T.mul(T.reduce_sum(x, axis=1), Tensor(b[0])))),
        ("mean", a, lambda x: T.reduce_sum(T.mul(T.reduce_mean(x, axis=0), Tensor(b[0])))),
        ("exp", a, lambda x: weighted(T.exp(x))),
        ("log", pos, lambda x: weighted(T.log(x))),
        ("tanh", a, lambda x: weighted(T.tanh(x))),
        ("relu", kink_safe, lambda x: weighted(T.relu(x))),
        ("causal_softmax", a, lambda x: weighted(T.masked_softmax(x, mask))),
        ("embedding", a, lambda x: T.reduce_sum(T.mul(T.embedding_lookup(x, ids), Tensor(w_emb)))),
        ("layer_norm", a, lambda x: weighted(T.layer_norm(x, Tensor(gain), Tensor(cbias)))),
        ("reshape", a, lambda x: T.reduce_sum(T.mul(T.reshape(x, (2, 8)), Tensor(b.reshape(2, 8))))),
        ("transpose", a, lambda x: weighted(T.transpose(x, (1, 0)))),
        ("stack", a, lambda x: T.reduce_sum(T.mul(T.stack([x, T.tanh(x)], axis=0), Tensor(w_stack)))),
        ("getitem", a, lambda x: T.reduce_sum(T.mul(x[1:3, ::2], Tensor(b[1:3, ::2])))),
        ("clip", kink_safe, lambda x: weighted(T.clip(x, -10.0, 10.0))),
    ]


def check_primitive(x0: np.ndarray, fn) -> float:
    leaf = Tensor(x0.copy(), requires_grad=True)
    T.backward(fn(leaf))
    analytic = leaf.grad

    def value(x):
        return fn(Tensor(x)).item()

    numeric = numeric_gradient(value, x0.copy())
    return max_relative_error(analytic, numeric)


def run_primitive_checks(seed: int) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    return {name: check_primitive(x0, fn) for name, x0, fn in primitive_cases(rng)}


# ---------------------------------------------------------------------------
# full policy objective

def small_policy_config() -> PolicyConfig:
    return PolicyConfig(context_length=2, state_dim=6, action_dim=4, n_items=5,
                        width=16, layers=2, heads=2, max_timesteps=8)


def random_policy_batch(cfg: PolicyConfig, rng: np.random.Generator,
                        batch_size: int = 3) -> PolicyBatch:
    k = cfg.context_length
    return PolicyBatch(
        rtg=rng.normal(size=(batch_size, k)),
        state_feats=rng.normal(size=(batch_size, k, cfg.state_dim)),
        action_ids=rng.integers(0, cfg.n_items, size=(batch_size, k)),
        timesteps=np.tile(np.arange(k), (batch_size, 1)),
        mask=np.ones((batch_size, k), dtype=bool),
        # fixed targets: training detaches embedding targets, so a pure
        # gradient check must not route the loss through them
        action_targets=rng.normal(size=(batch_size, k, cfg.action_dim)),
    )


def policy_objective(params, cfg: PolicyConfig, batch: PolicyBatch, lam: float) -> Tensor:
    mu, logvar = forward_policy(params, cfg, batch)
    fit = nll_loss(mu, logvar, batch.action_targets, batch.mask)
    ent = policy_entropy(logvar, batch.mask)
    return T.sub(fit, T.mul(ent, lam))


def check_policy_loss(seed: int, coords_per_tensor: int = 3, lam: float = 0.37) -> float:
    """FD check of d(nll - lambda*entropy)/dtheta on a 2-block width-16 net,
    sampling a few coordinates of every parameter tensor."""
    rng = np.random.default_rng(seed)
    cfg = small_policy_config()
    params = init_policy(cfg, rng)
    batch = random_policy_batch(cfg, rng)

    T.zero_grads(params)
    T.backward(policy_objective(params, cfg, batch, lam))

    worst = 0.0
    h = 1e-5
    for name in sorted(params):
        p = params[name]
        flat = p.data.reshape(-1)
        gflat = (p.grad if p.grad is not None else np.zeros_like(p.data)).reshape(-1)
        for i in rng.choice(flat.size, size=min(coords_per_tensor, flat.size), replace=False):
            orig = flat[i]
            flat[i] = orig + h
            hi = policy_objective(params, cfg, batch, lam).item()
            flat[i] = orig - h
            lo = policy_objective(params, cfg, batch, lam).item()
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * h)
            err = abs(gflat[i] - numeric) / max(abs(numeric), 1e-6)
            worst = max(worst, err)
    return worst


def run_all(seeds: int = 20, tol: float = 1e-4) -> list[str]:
    lines = []
    worst_prim: dict[str, float] = {}
    for seed in range(seeds):
        for name, err in run_primitive_checks(seed).items():
            worst_prim[name] = max(worst_prim.get(name, 0.0), err)
    for name in sorted(worst_prim):
        status = "ok" if worst_prim[name] < tol else "FAIL"
        lines.append(f"primitive {name}: max rel err {worst_prim[name]:.3e} [{status}]")
    worst_loss = max(check_policy_loss(seed) for seed in range(seeds))
    status = "ok" if worst_loss < tol else "FAIL"
    lines.append(f"policy loss: max rel err {worst_loss:.3e} [{status}]")
    return lines
