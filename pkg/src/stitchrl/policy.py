"""Causal transformer policy over (RTG, state, action) token triples.

Each timestep contributes three tokens in the order return-to-go, state,
action; the action distribution for step t is read off the state token,
so it conditions on everything up to and including s_t but never on a_t
itself. The head is a diagonal Gaussian in action-embedding space: two
linear layers produce the mean and the (clamped) log-variance.

Training minimizes masked-mean negative log-likelihood minus a
lambda-weighted entropy bonus, where lambda = exp(omega) is a dual
variable enforcing an entropy floor beta: after each policy step, omega
takes one gradient step on exp(omega) * (H - beta), so lambda grows while
entropy sits below the floor and decays once above it, and stays positive
by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .optim import Adam
from .tensor import Tensor

LN_2PI = math.log(2.0 * math.pi)


def unit_gaussian_entropy(action_dim: int) -> float:
    return 0.5 * action_dim * (1.0 + LN_2PI)


def default_entropy_floor(action_dim: int) -> float:
    # half the entropy of a unit-variance Gaussian of the same dimension
    return 0.5 * unit_gaussian_entropy(action_dim)


@dataclass
class PolicyConfig:
    context_length: int = 2
    state_dim: int = 16
    action_dim: int = 8
    n_items: int = 8
    width: int = 32
    layers: int = 2
    heads: int = 2
    max_timesteps: int = 64
    sigma_min: float = 1e-2
    sigma_max: float = 5.0
    item_embed_scale: float = 0.4
    objective: str = "nll"  # or "l2" for the plain squared-error baseline

    def __post_init__(self):
        if self.width % self.heads != 0:
            raise ValueError("width must be divisible by heads")
        if self.objective not in ("nll", "l2"):
            raise ValueError(f"unknown objective {self.objective!r}")

    @property
    def logvar_min(self) -> float:
        return 2.0 * math.log(self.sigma_min)

    @property
    def logvar_max(self) -> float:
        return 2.0 * math.log(self.sigma_max)

    def to_json(self) -> dict:
        from dataclasses import asdict
        return asdict(self)

    @staticmethod
    def from_json(d: dict) -> "PolicyConfig":
        return PolicyConfig(**d)


@dataclass
class DualVariable:
    """lambda = exp(omega): positive for every finite omega."""
    omega: Tensor

    @staticmethod
    def create(initial_lambda: float = 1.0) -> "DualVariable":
        return DualVariable(Tensor(np.array([math.log(initial_lambda)]), requires_grad=True))

    @property
    def value(self) -> float:
        return math.exp(float(self.omega.data[0]))


def init_policy(cfg: PolicyConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    d, da, ds = cfg.width, cfg.action_dim, cfg.state_dim
    scale = 0.05

    def w(*shape):
        return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    def ones(*shape):
        return Tensor(np.ones(shape), requires_grad=True)

    params: dict[str, Tensor] = {
        "item_embed": Tensor(rng.normal(0.0, cfg.item_embed_scale, size=(cfg.n_items, da)),
                             requires_grad=True),
        "embed_rtg.w": w(1, d), "embed_rtg.b": zeros(d),
        "embed_state.w": w(ds, d), "embed_state.b": zeros(d),
        "embed_action.w": w(da, d), "embed_action.b": zeros(d),
        "embed_pos": Tensor(rng.normal(0.0, scale, size=(cfg.max_timesteps + 1, d)),
                            requires_grad=True),
        "ln_f.g": ones(d), "ln_f.b": zeros(d),
        "head_mu.w": w(d, da), "head_mu.b": zeros(da),
        "head_logvar.w": Tensor(rng.normal(0.0, 0.01, size=(d, da)), requires_grad=True),
        "head_logvar.b": zeros(da),
    }
    for i in range(cfg.layers):
        p = f"block{i}."
        params[p + "ln1.g"] = ones(d)
        params[p + "ln1.b"] = zeros(d)
        params[p + "attn.wq"] = w(d, d)
        params[p + "attn.wk"] = w(d, d)
        params[p + "attn.wv"] = w(d, d)
        params[p + "attn.wo"] = w(d, d)
        params[p + "attn.bo"] = zeros(d)
        params[p + "ln2.g"] = ones(d)
        params[p + "ln2.b"] = zeros(d)
        params[p + "mlp.w1"] = w(d, 4 * d)
        params[p + "mlp.b1"] = zeros(4 * d)
        params[p + "mlp.w2"] = w(4 * d, d)
        params[p + "mlp.b2"] = zeros(d)
    return params


@dataclass
class PolicyBatch:
    """Numeric batch the transformer consumes.

    rtg (B,K), state_feats (B,K,ds), action_ids (B,K) int rows into the
    item table, action_targets (B,K,da) or None to use detached embeddings
    of action_ids, timesteps (B,K) with -1 padding, mask (B,K) bool.
    """
    rtg: np.ndarray
    state_feats: np.ndarray
    action_ids: np.ndarray
    timesteps: np.ndarray
    mask: np.ndarray
    action_targets: np.ndarray | None = None


def _linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    lead = x.shape[:-1]
    flat = T.reshape(x, (int(np.prod(lead)), x.shape[-1]))
    out = T.matmul(flat, w)
    if b is not None:
        out = T.add(out, b)
    return T.reshape(out, lead + (w.shape[1],))


def _attention_mask(mask: np.ndarray, k: int) -> np.ndarray:
    """(B,1,3K,3K) boolean: causal, pad keys hidden, diagonal always open."""
    t = 3 * k
    causal = np.tril(np.ones((t, t), dtype=bool))
    token_mask = np.repeat(mask, 3, axis=1)  # (B,3K)
    allow = causal[None, :, :] & token_mask[:, None, :]
    idx = np.arange(t)
    allow[:, idx, idx] = True
    return allow[:, None, :, :]


def forward_policy(params: dict[str, Tensor], cfg: PolicyConfig,
                   batch: PolicyBatch) -> tuple[Tensor, Tensor]:
    """Per-position action distributions: (mean, log-variance), each (B,K,da)."""
    b, k = batch.rtg.shape
    if k != cfg.context_length:
        raise T.ShapeError(f"batch context {k} != configured {cfg.context_length}")
    if batch.state_feats.shape != (b, k, cfg.state_dim):
        raise T.ShapeError(f"state features shape {batch.state_feats.shape}")

    ids = np.where(batch.mask, batch.action_ids, 0).astype(np.int64)
    steps = np.where(batch.mask, batch.timesteps + 1, 0).astype(np.int64)
    steps = np.minimum(steps, cfg.max_timesteps)

    a_embed = T.embedding_lookup(params["item_embed"], ids)
    g_tok = _linear(Tensor(batch.rtg[..., None]), params["embed_rtg.w"], params["embed_rtg.b"])
    s_tok = _linear(Tensor(batch.state_feats), params["embed_state.w"], params["embed_state.b"])
    a_tok = _linear(a_embed, params["embed_action.w"], params["embed_action.b"])
    pos = T.embedding_lookup(params["embed_pos"], steps)
    g_tok = T.add(g_tok, pos)
    s_tok = T.add(s_tok, pos)
    a_tok = T.add(a_tok, pos)

    x = T.reshape(T.stack([g_tok, s_tok, a_tok], axis=2), (b, 3 * k, cfg.width))
    allow = _attention_mask(batch.mask, k)

    n_heads = cfg.heads
    head_dim = cfg.width // n_heads
    inv_sqrt = 1.0 / math.sqrt(head_dim)
    for i in range(cfg.layers):
        p = f"block{i}."
        h = T.layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"])

        def split_heads(t_):
            t_ = T.reshape(t_, (b, 3 * k, n_heads, head_dim))
            return T.transpose(t_, (0, 2, 1, 3))

        q = split_heads(_linear(h, params[p + "attn.wq"]))
        key = split_heads(_linear(h, params[p + "attn.wk"]))
        v = split_heads(_linear(h, params[p + "attn.wv"]))
        scores = T.mul(T.matmul(q, T.transpose(key, (0, 1, 3, 2))), inv_sqrt)
        att = T.masked_softmax(scores, allow)
        mixed = T.matmul(att, v)
        mixed = T.reshape(T.transpose(mixed, (0, 2, 1, 3)), (b, 3 * k, cfg.width))
        x = T.add(x, _linear(mixed, params[p + "attn.wo"], params[p + "attn.bo"]))

        h2 = T.layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"])
        m = _linear(T.relu(_linear(h2, params[p + "mlp.w1"], params[p + "mlp.b1"])),
                    params[p + "mlp.w2"], params[p + "mlp.b2"])
        x = T.add(x, m)

    x = T.layer_norm(x, params["ln_f.g"], params["ln_f.b"])
    state_h = x[:, 1::3, :]
    mu = _linear(state_h, params["head_mu.w"], params["head_mu.b"])
    logvar = T.clip(_linear(state_h, params["head_logvar.w"], params["head_logvar.b"]),
                    cfg.logvar_min, cfg.logvar_max)
    return mu, logvar


def action_targets(params: dict[str, Tensor], batch: PolicyBatch) -> np.ndarray:
    """Regression targets in embedding space. Detached: targets must not
    pull the item embeddings toward the predictions, or every embedding
    would collapse onto a single point."""
    if batch.action_targets is not None:
        return batch.action_targets
    ids = np.where(batch.mask, batch.action_ids, 0).astype(np.int64)
    return params["item_embed"].data[ids]


def _masked_mean(per_position: Tensor, mask: np.ndarray) -> Tensor:
    n = float(mask.sum())
    if n == 0:
        raise ValueError("batch mask has no real positions")
    return T.mul(T.reduce_sum(T.mul(per_position, Tensor(mask.astype(np.float64)))), 1.0 / n)


def nll_loss(mu: Tensor, logvar: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Masked mean over positions of the diagonal-Gaussian negative log density."""
    diff = T.sub(mu, Tensor(targets))
    quad = T.mul(T.mul(diff, diff), T.exp(T.neg(logvar)))
    per = T.mul(T.add(T.reduce_sum(T.add(logvar, quad), axis=-1),
                      mu.shape[-1] * LN_2PI), 0.5)
    return _masked_mean(per, mask)


def l2_loss(mu: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Plain squared-error action regression, the non-probabilistic baseline."""
    diff = T.sub(mu, Tensor(targets))
    per = T.reduce_sum(T.mul(diff, diff), axis=-1)
    return _masked_mean(per, mask)


def policy_entropy(logvar: Tensor, mask: np.ndarray) -> Tensor:
    """Masked mean of the closed-form diagonal-Gaussian entropy."""
    d = logvar.shape[-1]
    per = T.mul(T.add(T.reduce_sum(logvar, axis=-1), d * (1.0 + LN_2PI)), 0.5)
    return _masked_mean(per, mask)


@dataclass
class StepMetrics:
    nll: float
    entropy: float
    lam: float
    loss: float


def lagrangian_step(params: dict[str, Tensor], cfg: PolicyConfig, batch: PolicyBatch,
                    dual: DualVariable, beta: float,
                    opt_policy: Adam, opt_dual: Adam | None,
                    lambda_fixed: float | None = None) -> StepMetrics:
    """One alternating update: policy step at fixed lambda, then dual step.

    The policy minimizes nll - lambda * H with lambda held constant; the
    dual variable then minimizes exp(omega) * (H - beta) with H held
    constant, shrinking lambda while entropy exceeds the floor and growing
    it otherwise. With lambda_fixed set (e.g. 0), the dual is untouched.
    """
    mu, logvar = forward_policy(params, cfg, batch)
    targets = action_targets(params, batch)
    ent = policy_entropy(logvar, batch.mask)
    if cfg.objective == "l2":
        fit = l2_loss(mu, targets, batch.mask)
    else:
        fit = nll_loss(mu, logvar, targets, batch.mask)
    lam = lambda_fixed if lambda_fixed is not None else dual.value
    loss = T.sub(fit, T.mul(ent, lam)) if lam != 0.0 else fit

    T.zero_grads(params)
    T.backward(loss)
    opt_policy.step()

    ent_value = ent.item()
    if lambda_fixed is None:
        dual.omega.zero_grad()
        dual_loss = T.mul(T.exp(dual.omega), ent_value - beta)
        T.backward(dual_loss)
        opt_dual.step()
        lam = dual.value
    return StepMetrics(nll=fit.item(), entropy=ent_value, lam=lam, loss=loss.item())


# ---------------------------------------------------------------------------
# acting

def sample_action(mu: np.ndarray, logvar: np.ndarray, mode: str,
                  rng: np.random.Generator | None = None) -> np.ndarray:
    if mode == "mean":
        return np.array(mu, dtype=np.float64)
    if mode == "stochastic":
        sigma = np.exp(0.5 * np.asarray(logvar))
        return np.asarray(mu) + sigma * rng.standard_normal(len(mu))
    raise ValueError(f"unknown action mode {mode!r}")


def decode_action(vec: np.ndarray, embed_table: np.ndarray, legal_indices) -> int:
    """Nearest legal item embedding under Euclidean distance."""
    legal = list(legal_indices)
    if not legal:
        raise ValueError("no legal actions to decode to")
    dists = [float(np.sum((embed_table[i] - vec) ** 2)) for i in legal]
    return legal[int(np.argmin(dists))]


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, params: dict[str, Tensor], cfg: PolicyConfig,
                    dual: DualVariable, manifest_json: dict | None = None) -> None:
    from .tensor import save_params
    save_params(path, params, extra={
        "policy_config": cfg.to_json(),
        "dual_omega": float(dual.omega.data[0]),
        "manifest": manifest_json,
    })


def load_checkpoint(path):
    from .tensor import load_params
    params, extra = load_params(path)
    cfg = PolicyConfig.from_json(extra["policy_config"])
    dual = DualVariable(Tensor(np.array([extra["dual_omega"]]), requires_grad=True))
    return params, cfg, dual, extra.get("manifest")
