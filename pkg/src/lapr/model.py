"""Dual mixture-of-expert encoders with a query-adaptive router.

Two independent banks of K small two-layer perceptrons project raw
embeddings into K mode-specific views, one bank for queries and one for
prompts. An affine-plus-softmax router turns the query embedding into
mixture weights over the K modes; mixing each bank's outputs with those
weights yields the label-aware query embedding and, per prompt, the
query-relevant prompt embedding. A pair is scored by cosine similarity of
the two mixtures divided by a temperature (1.0 keeps the raw cosine).

Backpropagation is hand-rolled. ``score_pairs`` / ``score_pairs_backward``
is the one implementation of the chain rule through cosine, mixing,
experts, and router; the single-pair helpers wrap it with batch size 1.
All gradients are verified against central finite differences in the test
suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateVector, InvalidArgument
from .linalg import ZERO_NORM_EPS, softmax_rows
from .rng import SeededRng


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    ``hidden`` and ``out_dim`` default to ``dim`` when omitted.
    ``use_label`` records whether prompt fusion includes the label
    embedding; it travels with checkpoints so retrieval matches training.
    """

    dim: int
    num_experts: int = 10
    hidden: int | None = None
    out_dim: int | None = None
    temperature: float = 1.0
    use_label: bool = True

    def __post_init__(self):
        if self.hidden is None:
            self.hidden = self.dim
        if self.out_dim is None:
            self.out_dim = self.dim
        if min(self.dim, self.num_experts, self.hidden, self.out_dim) < 1:
            raise InvalidArgument("all model dimensions must be >= 1")
        if not self.temperature > 0:
            raise InvalidArgument("temperature must be > 0")

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "num_experts": self.num_experts,
            "hidden": self.hidden,
            "out_dim": self.out_dim,
            "temperature": self.temperature,
            "use_label": self.use_label,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            dim=int(d["dim"]),
            num_experts=int(d["num_experts"]),
            hidden=int(d["hidden"]),
            out_dim=int(d["out_dim"]),
            temperature=float(d["temperature"]),
            use_label=bool(d["use_label"]),
        )


@dataclass
class ExpertParams:
    """One two-layer rectifier perceptron: W2 @ relu(W1 @ x + b1) + b2.

    Also doubles as the gradient container for one expert (same shapes).
    """

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    def arrays(self) -> list[np.ndarray]:
        return [self.W1, self.b1, self.W2, self.b2]

    def zeros_like(self) -> "ExpertParams":
        return ExpertParams(*[np.zeros_like(a) for a in self.arrays()])

    def copy(self) -> "ExpertParams":
        return ExpertParams(*[a.copy() for a in self.arrays()])


@dataclass
class EncoderBank:
    """K experts for one side. Query and prompt banks never share storage."""

    experts: list[ExpertParams]
    side: str  # "query" | "prompt"

    def arrays(self) -> list[np.ndarray]:
        out = []
        for e in self.experts:
            out.extend(e.arrays())
        return out

    def copy(self) -> "EncoderBank":
        return EncoderBank([e.copy() for e in self.experts], self.side)


@dataclass
class RouterParams:
    """Affine map to K logits; softmax of the logits is the mixture."""

    W: np.ndarray
    b: np.ndarray

    def arrays(self) -> list[np.ndarray]:
        return [self.W, self.b]

    def copy(self) -> "RouterParams":
        return RouterParams(self.W.copy(), self.b.copy())


@dataclass
class LaprModel:
    config: ModelConfig
    query_bank: EncoderBank
    prompt_bank: EncoderBank
    router: RouterParams

    def arrays(self) -> list[np.ndarray]:
        """All parameters in checkpoint order: query bank, prompt bank, router."""
        return self.query_bank.arrays() + self.prompt_bank.arrays() + self.router.arrays()

    def copy(self) -> "LaprModel":
        return LaprModel(
            config=self.config,
            query_bank=self.query_bank.copy(),
            prompt_bank=self.prompt_bank.copy(),
            router=self.router.copy(),
        )


@dataclass
class ModelGrads:
    """Parameter gradients mirroring LaprModel's layout."""

    query_experts: list[ExpertParams]
    prompt_experts: list[ExpertParams]
    router: RouterParams

    @classmethod
    def zeros(cls, model: LaprModel) -> "ModelGrads":
        return cls(
            query_experts=[e.zeros_like() for e in model.query_bank.experts],
            prompt_experts=[e.zeros_like() for e in model.prompt_bank.experts],
            router=RouterParams(np.zeros_like(model.router.W), np.zeros_like(model.router.b)),
        )

    def arrays(self) -> list[np.ndarray]:
        out = []
        for e in self.query_experts:
            out.extend(e.arrays())
        for e in self.prompt_experts:
            out.extend(e.arrays())
        out.extend(self.router.arrays())
        return out

    def add_(self, other: "ModelGrads", scale: float = 1.0) -> "ModelGrads":
        for mine, theirs in zip(self.arrays(), other.arrays()):
            mine += scale * theirs
        return self

    def scale_(self, s: float) -> "ModelGrads":
        for a in self.arrays():
            a *= s
        return self


def pack_arrays(arrays: list[np.ndarray]) -> np.ndarray:
    return np.concatenate([a.ravel() for a in arrays]) if arrays else np.zeros(0)


def set_packed(arrays: list[np.ndarray], flat: np.ndarray) -> None:
    offset = 0
    for a in arrays:
        n = a.size
        a[...] = flat[offset : offset + n].reshape(a.shape)
        offset += n
    if offset != flat.size:
        raise InvalidArgument("packed vector length does not match parameters")


def init_model(config: ModelConfig, rng: SeededRng, zero_router: bool = False) -> LaprModel:
    """Fan-in uniform weights, zero biases, in a fixed draw order.

    Draw order: query bank experts 0..K-1 (W1 then W2, row-major), then the
    prompt bank, then the router. ``zero_router`` starts the router at zero,
    which makes the mixture exactly uniform (the router-free ablation).
    """

    def uniform_matrix(rows: int, cols: int) -> np.ndarray:
        bound = 1.0 / np.sqrt(cols)
        return np.array(
            [[rng.uniform(-bound, bound) for _ in range(cols)] for _ in range(rows)],
            dtype=np.float64,
        )

    def make_bank(side: str) -> EncoderBank:
        experts = []
        for _ in range(config.num_experts):
            W1 = uniform_matrix(config.hidden, config.dim)
            W2 = uniform_matrix(config.out_dim, config.hidden)
            experts.append(
                ExpertParams(W1, np.zeros(config.hidden), W2, np.zeros(config.out_dim))
            )
        return EncoderBank(experts, side)

    query_bank = make_bank("query")
    prompt_bank = make_bank("prompt")
    if zero_router:
        router = RouterParams(
            np.zeros((config.num_experts, config.dim)), np.zeros(config.num_experts)
        )
    else:
        router = RouterParams(
            uniform_matrix(config.num_experts, config.dim), np.zeros(config.num_experts)
        )
    return LaprModel(config, query_bank, prompt_bank, router)


# ---------------------------------------------------------------------------
# Single-vector operations
# ---------------------------------------------------------------------------

def fuse_prompt(image_emb: np.ndarray, label_emb: np.ndarray, use_label: bool = True) -> np.ndarray:
    """Joint prompt embedding: image + label sum, or image alone."""
    image_emb = np.asarray(image_emb, dtype=np.float64)
    label_emb = np.asarray(label_emb, dtype=np.float64)
    if image_emb.shape != label_emb.shape:
        raise InvalidArgument(
            f"fuse dims differ: {image_emb.shape} vs {label_emb.shape}"
        )
    if not use_label:
        return image_emb.copy()
    return image_emb + label_emb


def expert_forward(expert: ExpertParams, x: np.ndarray) -> np.ndarray:
    """W2 @ relu(W1 @ x + b1) + b2."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != expert.W1.shape[1]:
        raise InvalidArgument(f"expert input dim {x.shape} != {expert.W1.shape[1]}")
    hidden = np.maximum(expert.W1 @ x + expert.b1, 0.0)
    return expert.W2 @ hidden + expert.b2


def router_forward(router: RouterParams, query_emb: np.ndarray) -> np.ndarray:
    """Mixture weights softmax(W @ u + b); always on the simplex."""
    query_emb = np.asarray(query_emb, dtype=np.float64)
    if query_emb.ndim != 1 or query_emb.shape[0] != router.W.shape[1]:
        raise InvalidArgument(f"router input dim {query_emb.shape} != {router.W.shape[1]}")
    logits = router.W @ query_emb + router.b
    e = np.exp(logits - logits.max())
    return e / e.sum()


def mix(weights: np.ndarray, modes: list[np.ndarray]) -> np.ndarray:
    """Convex combination sum_k weights[k] * modes[k]."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 1 or len(modes) != weights.shape[0]:
        raise InvalidArgument(f"{len(modes)} mode vectors for {weights.shape[0]} weights")
    stacked = np.stack([np.asarray(m, dtype=np.float64) for m in modes])
    if stacked.ndim != 2:
        raise InvalidArgument("mode vectors must share one dimension")
    return weights @ stacked


# ---------------------------------------------------------------------------
# Batched scoring core
# ---------------------------------------------------------------------------

@dataclass
class ScoreContext:
    """Forward intermediates kept for the backward pass.

    Shapes: U (B,d) queries, Z (J,d) fused prompts, mixtures (B,K),
    query_modes/prompt_modes (K,B,dp)/(K,J,dp), mixed_query (B,dp),
    mixed_prompt (B,J,dp), scores (B,J).
    """

    U: np.ndarray
    Z: np.ndarray
    mixtures: np.ndarray
    query_hidden: np.ndarray  # (K,B,h) post-relu
    prompt_hidden: np.ndarray  # (K,J,h) post-relu
    query_mask: np.ndarray  # (K,B,h) relu active
    prompt_mask: np.ndarray
    query_modes: np.ndarray
    prompt_modes: np.ndarray
    mixed_query: np.ndarray
    mixed_prompt: np.ndarray
    query_norms: np.ndarray  # (B,)
    prompt_norms: np.ndarray  # (B,J)
    cosines: np.ndarray  # (B,J)
    scores: np.ndarray  # (B,J) cosines / temperature


def _bank_forward(bank: EncoderBank, X: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Run every expert over rows of X. Returns (modes, hidden, mask)."""
    modes, hiddens, masks = [], [], []
    for expert in bank.experts:
        pre = X @ expert.W1.T + expert.b1
        mask = pre > 0.0
        hidden = np.where(mask, pre, 0.0)
        modes.append(hidden @ expert.W2.T + expert.b2)
        hiddens.append(hidden)
        masks.append(mask)
    return np.stack(modes), np.stack(hiddens), np.stack(masks)


def score_pairs(model: LaprModel, U: np.ndarray, Z: np.ndarray) -> ScoreContext:
    """Score every query row of U against every fused prompt row of Z.

    Raises DegenerateVector if any mixed embedding on either side collapses
    below ZERO_NORM_EPS (cosine undefined).
    """
    U = np.atleast_2d(np.asarray(U, dtype=np.float64))
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    cfg = model.config
    if U.shape[1] != cfg.dim or Z.shape[1] != cfg.dim:
        raise InvalidArgument(
            f"embedding dim mismatch: queries {U.shape[1]}, prompts {Z.shape[1]}, model {cfg.dim}"
        )

    logits = U @ model.router.W.T + model.router.b
    mixtures = softmax_rows(logits)

    query_modes, query_hidden, query_mask = _bank_forward(model.query_bank, U)
    prompt_modes, prompt_hidden, prompt_mask = _bank_forward(model.prompt_bank, Z)

    mixed_query = np.einsum("bk,kbd->bd", mixtures, query_modes)
    mixed_prompt = np.einsum("bk,kjd->bjd", mixtures, prompt_modes)

    query_norms = np.linalg.norm(mixed_query, axis=1)
    prompt_norms = np.linalg.norm(mixed_prompt, axis=2)
    if query_norms.min(initial=np.inf) < ZERO_NORM_EPS:
        raise DegenerateVector("mixed query embedding collapsed to zero norm")
    if prompt_norms.min(initial=np.inf) < ZERO_NORM_EPS:
        raise DegenerateVector("mixed prompt embedding collapsed to zero norm")

    dots = np.einsum("bd,bjd->bj", mixed_query, mixed_prompt)
    cosines = dots / (query_norms[:, None] * prompt_norms)
    scores = cosines / cfg.temperature

    return ScoreContext(
        U=U,
        Z=Z,
        mixtures=mixtures,
        query_hidden=query_hidden,
        prompt_hidden=prompt_hidden,
        query_mask=query_mask,
        prompt_mask=prompt_mask,
        query_modes=query_modes,
        prompt_modes=prompt_modes,
        mixed_query=mixed_query,
        mixed_prompt=mixed_prompt,
        query_norms=query_norms,
        prompt_norms=prompt_norms,
        cosines=cosines,
        scores=scores,
    )


def _bank_backward(
    bank: EncoderBank,
    X: np.ndarray,
    hidden: np.ndarray,
    mask: np.ndarray,
    d_modes: np.ndarray,
    grads: list[ExpertParams],
) -> None:
    """Accumulate per-expert parameter gradients for one side."""
    for k, expert in enumerate(bank.experts):
        dY = d_modes[k]
        grads[k].W2 += dY.T @ hidden[k]
        grads[k].b2 += dY.sum(axis=0)
        dH = (dY @ expert.W2) * mask[k]
        grads[k].W1 += dH.T @ X
        grads[k].b1 += dH.sum(axis=0)


def score_pairs_backward(
    model: LaprModel,
    ctx: ScoreContext,
    d_scores: np.ndarray,
    freeze_router: bool = False,
    freeze_experts: bool = False,
) -> ModelGrads:
    """Chain upstream d(loss)/d(scores) back to parameter gradients.

    Mixture-weight gradients always collect contributions from both the
    query-side and prompt-side mixtures; ``freeze_router`` stops them at the
    router parameters (the expert step), ``freeze_experts`` zeroes the expert
    parameter slots (the router step) while still using expert outputs.
    """
    d_scores = np.asarray(d_scores, dtype=np.float64)
    if d_scores.shape != ctx.scores.shape:
        raise InvalidArgument("upstream gradient shape mismatch")
    grads = ModelGrads.zeros(model)
    d_cos = d_scores / model.config.temperature

    inv_qn = 1.0 / ctx.query_norms  # (B,)
    inv_pn = 1.0 / ctx.prompt_norms  # (B,J)
    coef = d_cos * inv_qn[:, None] * inv_pn  # (B,J)

    # d/d mixed_query: sum_j coef * p_tilde - (sum_j d_cos*cos) * u_tilde / |u|^2
    d_mixed_query = np.einsum("bj,bjd->bd", coef, ctx.mixed_prompt)
    d_mixed_query -= ((d_cos * ctx.cosines).sum(axis=1) * inv_qn**2)[:, None] * ctx.mixed_query

    # d/d mixed_prompt[b,j]: coef * u_tilde - d_cos*cos * p_tilde / |p|^2
    d_mixed_prompt = coef[:, :, None] * ctx.mixed_query[:, None, :]
    d_mixed_prompt -= (d_cos * ctx.cosines * inv_pn**2)[:, :, None] * ctx.mixed_prompt

    if not freeze_experts:
        d_query_modes = np.einsum("bk,bd->kbd", ctx.mixtures, d_mixed_query)
        d_prompt_modes = np.einsum("bk,bjd->kjd", ctx.mixtures, d_mixed_prompt)
        _bank_backward(
            model.query_bank, ctx.U, ctx.query_hidden, ctx.query_mask,
            d_query_modes, grads.query_experts,
        )
        _bank_backward(
            model.prompt_bank, ctx.Z, ctx.prompt_hidden, ctx.prompt_mask,
            d_prompt_modes, grads.prompt_experts,
        )

    if not freeze_router:
        d_mixtures = np.einsum("bd,kbd->bk", d_mixed_query, ctx.query_modes)
        d_mixtures += np.einsum("bjd,kjd->bk", d_mixed_prompt, ctx.prompt_modes)
        accumulate_router_grads(model, ctx.U, ctx.mixtures, d_mixtures, grads)

    return grads


def accumulate_router_grads(
    model: LaprModel,
    U: np.ndarray,
    mixtures: np.ndarray,
    d_mixtures: np.ndarray,
    grads: ModelGrads,
) -> None:
    """Backprop d(loss)/d(mixture) through the softmax into router params."""
    inner = (mixtures * d_mixtures).sum(axis=1, keepdims=True)
    d_logits = mixtures * (d_mixtures - inner)
    grads.router.W += d_logits.T @ U
    grads.router.b += d_logits.sum(axis=0)


# ---------------------------------------------------------------------------
# Single-pair wrappers
# ---------------------------------------------------------------------------

def pair_score(
    model: LaprModel, query_emb: np.ndarray, fused_prompt: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """Score one (query, prompt) pair.

    Returns (score, mixed query embedding, mixed prompt embedding, mixture
    weights); score is cosine / temperature.
    """
    ctx = score_pairs(model, query_emb[None, :], fused_prompt[None, :])
    return (
        float(ctx.scores[0, 0]),
        ctx.mixed_query[0],
        ctx.mixed_prompt[0, 0],
        ctx.mixtures[0],
    )


def backward_pair(
    model: LaprModel,
    query_emb: np.ndarray,
    fused_prompt: np.ndarray,
    upstream: float,
    freeze_router: bool = False,
    freeze_experts: bool = False,
) -> ModelGrads:
    """Gradients of (upstream * pair score) w.r.t. all parameters."""
    ctx = score_pairs(model, query_emb[None, :], fused_prompt[None, :])
    d_scores = np.array([[float(upstream)]])
    return score_pairs_backward(
        model, ctx, d_scores, freeze_router=freeze_router, freeze_experts=freeze_experts
    )
