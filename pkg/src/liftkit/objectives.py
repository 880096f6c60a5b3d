"""Training objectives for the masked-diffusion denoiser.

All losses share one shape: corrupt the response span, pick a supervised
subset S of the masked positions, and score

    loss = weight * sum_{k in S} pos_w[k] * (-log p(x0_k | x_input))

with weight 1/t (or 1/(t+rho) for the single-pass approximation). The
objectives differ in how the input is built and how S is chosen:

  vanilla    mask at rate t, supervise every masked position.
  lift       mask at rate t+rho, rank masked positions by the model's own
             confidence in the ground truth, keep a time-dependent subset,
             unmask the rest, then score a second pass at the restored
             input. Two forward passes.
  lift_a     same selection, but gate the loss inside the single t+rho
             pass and reweight by 1/(t+rho). One forward pass.
  top_k, bottom_k, random2, random3
             lift plumbing with the time-to-regime map ablated away.
  gift       mask with probability proportional to sqrt(entropy) measured
             on the fully-masked input, then score like vanilla.
  cart       mask at rate t, down-weight targets with few unmasked
             neighbors inside a +/-window.

Subset selection partitions diffusion time into three regimes via H >= 2:
t < 1/H trains the hardest tokens (bottom-K), t >= 1-1/H the easiest
(top-K), and the middle regime falls back to rate-t masking, realized by
keeping each masked position of the t+rho input independently with
probability t/(t+rho). With rho = 0 the middle regime therefore keeps
everything and lift/lift_a reduce exactly to the vanilla loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import TokenSequence, Vocabulary
from .denoiser import Denoiser
from .diffusion import RhoStrategy, TimestepDraw, corrupt, unmask_positions
from .errors import ConfigError, ContractError
from .rng import StepRngs, stream

OBJECTIVE_KINDS = (
    "vanilla",
    "lift",
    "lift_a",
    "top_k",
    "bottom_k",
    "random2",
    "random3",
    "gift",
    "cart",
)

REGIMES = ("bottom", "vanilla", "top")

_FORCED_REGIME = {"top_k": "top", "bottom_k": "bottom"}
_RANDOM_CHOICES = {"random2": ("top", "bottom"), "random3": ("top", "bottom", "vanilla")}


@dataclass(frozen=True)
class ObjectiveSpec:
    """Which loss to train with, plus its knobs."""

    kind: str = "lift"
    H: int = 3
    rho: RhoStrategy = field(default_factory=RhoStrategy)
    cart_window: int = 8
    gift_exponent: float = 0.5

    def __post_init__(self):
        if self.kind not in OBJECTIVE_KINDS:
            raise ConfigError(f"unknown objective kind '{self.kind}'")
        if self.H < 2:
            raise ConfigError(f"H must be >= 2, got {self.H}")
        if self.cart_window < 1:
            raise ConfigError(f"cart_window must be >= 1, got {self.cart_window}")
        if self.gift_exponent <= 0:
            raise ConfigError(f"gift_exponent must be > 0, got {self.gift_exponent}")

    @property
    def uses_rho(self) -> bool:
        return self.kind in ("lift", "lift_a", "top_k", "bottom_k", "random2", "random3")


@dataclass
class SelectionResult:
    selected: list[int]  # sorted positions
    regime: str
    K: int
    confidences: dict[int, float]


@dataclass
class LossValue:
    """One example's loss and its audit trail.

    Invariant: value == weight * sum(per_position.values()); per-position
    contributions already include any position weight (cart).
    """

    value: float
    loss: Tensor | None
    weight: float
    per_position: dict[int, float]
    selected: list[int]
    regime: str | None
    skipped: bool
    mean_token_loss: float
    input_ids: np.ndarray | None = None
    K: int | None = None
    pos_weights: dict[int, float] | None = None
    selection: SelectionResult | None = None


@dataclass
class BatchLoss:
    """Loss over one micro-batch: an undivided sum, so the trainer can
    average across accumulation micro-batches by total active count."""

    loss_sum: Tensor | None
    per_example: list[LossValue]
    n_active: int
    regime: str | None
    forward_passes: int

    @property
    def skipped(self) -> bool:
        return self.n_active == 0

    @property
    def mean_value(self) -> float:
        if self.n_active == 0:
            return 0.0
        return sum(e.value for e in self.per_example if not e.skipped) / self.n_active

    @property
    def mean_token_loss(self) -> float:
        vals = [e.mean_token_loss for e in self.per_example if not e.skipped]
        return float(np.mean(vals)) if vals else 0.0


def regime_for(t: float, H: int) -> str:
    """Map diffusion time to a selection regime (left-closed boundaries)."""
    if t >= 1.0 - 1.0 / H:
        return "top"
    if t >= 1.0 / H:
        return "vanilla"
    return "bottom"


def select_subset(
    candidates,
    confidences: dict[int, float],
    t: float,
    H: int,
    response_len: int,
    rng: np.random.Generator,
    rho: float = 0.0,
    forced_regime: str | None = None,
) -> SelectionResult:
    """Choose the supervised subset of masked positions.

    Top/bottom regimes take the K = floor(t * response_len) most/least
    confident candidates (clamped to the candidate count), ties broken by
    lower position. The vanilla regime keeps each candidate independently
    with probability t/(t+rho), consuming one uniform per candidate in
    position order; this reproduces rate-t masking in distribution and
    degenerates to "keep all" at rho = 0.
    """
    cands = sorted(int(p) for p in candidates)
    missing = [p for p in cands if p not in confidences]
    if missing:
        raise ContractError(f"confidences missing for candidates {missing}")
    K = min(math.floor(t * response_len), len(cands))
    regime = forced_regime if forced_regime is not None else regime_for(t, H)
    if regime == "top":
        chosen = sorted(cands, key=lambda p: (-confidences[p], p))[:K]
    elif regime == "bottom":
        chosen = sorted(cands, key=lambda p: (confidences[p], p))[:K]
    elif regime == "vanilla":
        keep = 1.0 if t + rho <= 0 else min(1.0, t / (t + rho))
        u = rng.random(len(cands))
        chosen = [p for p, ui in zip(cands, u) if ui < keep]
    else:
        raise ContractError(f"unknown regime '{regime}'")
    return SelectionResult(selected=sorted(chosen), regime=regime, K=K, confidences=dict(confidences))


def assemble_gated_loss(
    log_probs: Tensor,
    targets: np.ndarray,
    weight_mask: np.ndarray,
    scale: float,
) -> Tensor:
    """scale * sum(weight_mask * -log_probs[..., targets]).

    The gather reads a target id at every position, but positions with a
    zero weight contribute exactly 0.0 to both the loss and every
    parameter gradient, so target ids outside the supervised set cannot
    leak into training.
    """
    nll = ad.scalar_scale(ad.gather(log_probs, np.asarray(targets)), -1.0)
    weighted = ad.mul(nll, Tensor(np.asarray(weight_mask, dtype=np.float64)))
    return ad.scalar_scale(ad.tensor_sum(weighted), float(scale))


# ---------------------------------------------------------------------------
# the batched objective step
# ---------------------------------------------------------------------------

def run_objective(
    model: Denoiser,
    spec: ObjectiveSpec,
    examples: list[TokenSequence],
    draw: TimestepDraw,
    bundles: list[StepRngs],
    vocab: Vocabulary,
    train: bool = True,
    dropout_rng: np.random.Generator | None = None,
    regime_rng: np.random.Generator | None = None,
) -> BatchLoss:
    """Evaluate one objective over a micro-batch sharing a (t, rho) draw."""
    if len(bundles) != len(examples):
        raise ContractError("one StepRngs bundle per example required")
    widths = {len(ex) for ex in examples}
    if len(widths) != 1:
        raise ContractError(f"examples must share a common padded length, got {sorted(widths)}")
    t, rho = draw.t, draw.rho
    kind = spec.kind
    mask_id, pad_id = vocab.mask_id, vocab.pad_id
    calls_before = model.forward_calls

    forced = _FORCED_REGIME.get(kind)
    if kind in _RANDOM_CHOICES:
        if regime_rng is None:
            raise ConfigError(f"objective '{kind}' needs a regime_rng")
        choices = _RANDOM_CHOICES[kind]
        forced = choices[int(regime_rng.integers(len(choices)))]

    if kind == "vanilla":
        prepared = _prep_rate_mask(examples, bundles, t, mask_id)
        weight = 1.0 / t
        step_regime = None
    elif kind in ("lift", "top_k", "bottom_k", "random2", "random3"):
        prepared, step_regime = _prep_lift(
            model, spec, examples, bundles, t, rho, mask_id, pad_id, forced
        )
        weight = 1.0 / t
    elif kind == "lift_a":
        return _run_lift_a(model, spec, examples, draw, bundles, vocab, train, dropout_rng, calls_before)
    elif kind == "gift":
        prepared = _prep_gift(model, spec, examples, bundles, t, mask_id, pad_id)
        weight = 1.0 / t
        step_regime = None
    elif kind == "cart":
        prepared = _prep_cart(spec, examples, bundles, t, mask_id)
        weight = 1.0 / t
        step_regime = None
    else:  # pragma: no cover - guarded by ObjectiveSpec
        raise ConfigError(f"unhandled objective kind '{kind}'")

    if kind in ("top_k", "bottom_k", "random2", "random3"):
        step_regime = forced

    active = [j for j, p in enumerate(prepared) if p["selected"]]
    per_example: list[LossValue] = [None] * len(examples)  # type: ignore[list-item]
    loss_sum = None
    if active:
        ids = np.stack([prepared[j]["input_ids"] for j in active])
        targets = np.stack([examples[j].ids for j in active])
        wmask = np.zeros(ids.shape, dtype=np.float64)
        for row, j in enumerate(active):
            for k in prepared[j]["selected"]:
                wmask[row, k] = prepared[j]["pos_weights"].get(k, 1.0) if prepared[j]["pos_weights"] else 1.0
        logp = model.forward(ids, pad_id=pad_id, train=train, rng=dropout_rng)
        loss_sum = assemble_gated_loss(logp, targets, wmask, weight)
        nll_rows = -np.take_along_axis(logp.data, targets[..., None], axis=-1)[..., 0]
        for row, j in enumerate(active):
            per_example[j] = _loss_value(prepared[j], nll_rows[row], wmask[row], weight)
    for j, p in enumerate(prepared):
        if per_example[j] is None:
            per_example[j] = _skipped_value(p, weight)

    return BatchLoss(
        loss_sum=loss_sum,
        per_example=per_example,
        n_active=len(active),
        regime=step_regime,
        forward_passes=model.forward_calls - calls_before,
    )


def _prep_rate_mask(examples, bundles, rate, mask_id):
    prepared = []
    for ex, b in zip(examples, bundles):
        c = corrupt(ex, rate, b.mask, mask_id)
        sel = [int(p) for p in c.mask_set]
        prepared.append(
            {"input_ids": c.ids, "selected": sel, "pos_weights": None, "regime": None, "K": None, "selection": None}
        )
    return prepared


def _prep_lift(model, spec, examples, bundles, t, rho, mask_id, pad_id, forced):
    rate = min(t + rho, 1.0)
    corrupted = [corrupt(ex, rate, b.mask, mask_id) for ex, b in zip(examples, bundles)]
    logp = model.log_probs_eval(np.stack([c.ids for c in corrupted]), pad_id=pad_id)
    prepared = []
    step_regime = None
    for j, (ex, c, b) in enumerate(zip(examples, corrupted, bundles)):
        conf = {int(k): float(np.exp(logp[j, k, ex.ids[k]])) for k in c.mask_set}
        sel = select_subset(
            c.mask_set, conf, t, spec.H, ex.response_len, b.select, rho=rho, forced_regime=forced
        )
        step_regime = sel.regime
        to_unmask = sorted(set(c.mask_positions()) - set(sel.selected))
        xt = unmask_positions(c, ex, to_unmask)
        prepared.append(
            {
                "input_ids": xt.ids,
                "selected": sel.selected,
                "pos_weights": None,
                "regime": sel.regime,
                "K": sel.K,
                "selection": sel,
            }
        )
    return prepared, step_regime


def _run_lift_a(model, spec, examples, draw, bundles, vocab, train, dropout_rng, calls_before):
    """Single forward at t+rho; selection uses its values, loss its graph."""
    t, rho = draw.t, draw.rho
    rate = min(t + rho, 1.0)
    mask_id, pad_id = vocab.mask_id, vocab.pad_id
    forced = None
    corrupted = [corrupt(ex, rate, b.mask, mask_id) for ex, b in zip(examples, bundles)]
    ids = np.stack([c.ids for c in corrupted])
    logp = model.forward(ids, pad_id=pad_id, train=train, rng=dropout_rng)
    weight = 1.0 / (t + rho)

    prepared = []
    step_regime = None
    for j, (ex, c, b) in enumerate(zip(examples, corrupted, bundles)):
        conf = {int(k): float(np.exp(logp.data[j, k, ex.ids[k]])) for k in c.mask_set}
        sel = select_subset(
            c.mask_set, conf, t, spec.H, ex.response_len, b.select, rho=rho, forced_regime=forced
        )
        step_regime = sel.regime
        prepared.append(
            {
                "input_ids": c.ids,
                "selected": sel.selected,
                "pos_weights": None,
                "regime": sel.regime,
                "K": sel.K,
                "selection": sel,
            }
        )

    active = [j for j, p in enumerate(prepared) if p["selected"]]
    targets = np.stack([ex.ids for ex in examples])
    wmask = np.zeros(ids.shape, dtype=np.float64)
    for j in active:
        for k in prepared[j]["selected"]:
            wmask[j, k] = 1.0
    loss_sum = assemble_gated_loss(logp, targets, wmask, weight) if active else None
    nll_rows = -np.take_along_axis(logp.data, targets[..., None], axis=-1)[..., 0]
    per_example = []
    for j, p in enumerate(prepared):
        if j in active:
            per_example.append(_loss_value(p, nll_rows[j], wmask[j], weight))
        else:
            per_example.append(_skipped_value(p, weight))
    return BatchLoss(
        loss_sum=loss_sum,
        per_example=per_example,
        n_active=len(active),
        regime=step_regime,
        forward_passes=model.forward_calls - calls_before,
    )


def _prep_gift(model, spec, examples, bundles, t, mask_id, pad_id):
    # Probe pass on the fully-masked response (x1) to get per-position entropy.
    x1 = []
    for ex in examples:
        ids = ex.ids.copy()
        ids[ex.response_slice] = mask_id
        x1.append(ids)
    logp = model.log_probs_eval(np.stack(x1), pad_id=pad_id)
    prepared = []
    for j, (ex, b) in enumerate(zip(examples, bundles)):
        rows = logp[j, ex.response_slice]  # [response_len, vocab]
        h = np.maximum(-(np.exp(rows) * rows).sum(axis=-1), 0.0)
        s = h**spec.gift_exponent
        mean_s = s.mean()
        q = np.full(len(s), t) if mean_s == 0 else np.minimum(1.0, t * s / mean_s)
        u = b.mask.random(ex.response_len)
        rel = np.nonzero(u < q)[0]
        positions = (ex.prompt_len + rel).astype(np.int64)
        ids = ex.ids.copy()
        ids[positions] = mask_id
        prepared.append(
            {
                "input_ids": ids,
                "selected": [int(p) for p in positions],
                "pos_weights": None,
                "regime": None,
                "K": None,
                "selection": None,
                "gift_q": q,
            }
        )
    return prepared


def cart_position_weights(mask_set, prompt_len: int, response_len: int, window: int) -> dict[int, float]:
    """Fraction of unmasked tokens in each masked position's +/-window
    neighborhood, denominator clipped to the in-sequence neighborhood."""
    masked = set(int(p) for p in mask_set)
    length = prompt_len + response_len
    weights = {}
    for k in masked:
        lo, hi = max(0, k - window), min(length - 1, k + window)
        neighbors = [p for p in range(lo, hi + 1) if p != k]
        unmasked = sum(1 for p in neighbors if p not in masked)
        weights[k] = unmasked / len(neighbors) if neighbors else 0.0
    return weights


def _prep_cart(spec, examples, bundles, t, mask_id):
    prepared = []
    for ex, b in zip(examples, bundles):
        c = corrupt(ex, t, b.mask, mask_id)
        w = cart_position_weights(c.mask_set, ex.prompt_len, ex.response_len, spec.cart_window)
        prepared.append(
            {
                "input_ids": c.ids,
                "selected": [int(p) for p in c.mask_set],
                "pos_weights": w,
                "regime": None,
                "K": None,
                "selection": None,
            }
        )
    return prepared


def _loss_value(p, nll_row: np.ndarray, wmask_row: np.ndarray, weight: float) -> LossValue:
    contrib = {int(k): float(nll_row[k] * wmask_row[k]) for k in p["selected"]}
    token_losses = [float(nll_row[k]) for k in p["selected"]]
    return LossValue(
        value=weight * sum(contrib.values()),
        loss=None,  # batch-level node lives on BatchLoss.loss_sum
        weight=weight,
        per_position=contrib,
        selected=list(p["selected"]),
        regime=p["regime"],
        skipped=False,
        mean_token_loss=float(np.mean(token_losses)) if token_losses else 0.0,
        input_ids=p["input_ids"],
        K=p["K"],
        pos_weights=p["pos_weights"],
        selection=p["selection"],
    )


def _skipped_value(p, weight: float) -> LossValue:
    return LossValue(
        value=0.0,
        loss=None,
        weight=weight,
        per_position={},
        selected=[],
        regime=p["regime"],
        skipped=True,
        mean_token_loss=0.0,
        input_ids=p["input_ids"],
        K=p["K"],
        pos_weights=p["pos_weights"],
        selection=p["selection"],
    )


def objective_step(
    model: Denoiser,
    spec: ObjectiveSpec,
    examples: list[TokenSequence],
    draw: TimestepDraw,
    seed: int,
    step: int,
    vocab: Vocabulary,
    train: bool = True,
    example_offset: int = 0,
) -> BatchLoss:
    """Trainer entry point: derive named per-example streams and evaluate.

    ``example_offset`` is the index of the first example within the
    optimizer step, so gradient-accumulation micro-batches see the same
    per-example streams as one combined batch would.
    """
    bundles = [StepRngs.at(seed, step, example_offset + j) for j in range(len(examples))]
    return run_objective(
        model,
        spec,
        examples,
        draw,
        bundles,
        vocab,
        train=train,
        dropout_rng=stream(seed, "dropout", step, example_offset),
        regime_rng=stream(seed, "regime", step),
    )


# ---------------------------------------------------------------------------
# single-example entry points
# ---------------------------------------------------------------------------

def _single(batch: BatchLoss) -> LossValue:
    lv = batch.per_example[0]
    lv.loss = batch.loss_sum
    return lv


def nelbo_vanilla(model, clean, t, rngs: StepRngs, vocab, train: bool = True) -> LossValue:
    """Masked cross-entropy at rate t with 1/t weighting."""
    spec = ObjectiveSpec(kind="vanilla")
    draw = TimestepDraw(t=t, rho=0.0)
    return _single(run_objective(model, spec, [clean], draw, [rngs], vocab, train=train, dropout_rng=rngs.dropout))


def loss_lift(model, clean, draw: TimestepDraw, H: int, rngs: StepRngs, vocab, train: bool = True) -> LossValue:
    spec = ObjectiveSpec(kind="lift", H=H)
    return _single(run_objective(model, spec, [clean], draw, [rngs], vocab, train=train, dropout_rng=rngs.dropout))


def loss_lift_a(model, clean, draw: TimestepDraw, H: int, rngs: StepRngs, vocab, train: bool = True) -> LossValue:
    spec = ObjectiveSpec(kind="lift_a", H=H)
    return _single(run_objective(model, spec, [clean], draw, [rngs], vocab, train=train, dropout_rng=rngs.dropout))


def loss_ablation(
    kind: str,
    model,
    clean,
    draw: TimestepDraw,
    rngs: StepRngs,
    vocab,
    regime_rng: np.random.Generator | None = None,
    train: bool = True,
) -> LossValue:
    if kind not in ("top_k", "bottom_k", "random2", "random3"):
        raise ConfigError(f"'{kind}' is not an ablation objective")
    spec = ObjectiveSpec(kind=kind)
    return _single(
        run_objective(
            model, spec, [clean], draw, [rngs], vocab,
            train=train, dropout_rng=rngs.dropout, regime_rng=regime_rng,
        )
    )


def loss_gift(model, clean, t, rngs: StepRngs, vocab, exponent: float = 0.5, train: bool = True) -> LossValue:
    spec = ObjectiveSpec(kind="gift", gift_exponent=exponent)
    draw = TimestepDraw(t=t, rho=0.0)
    return _single(run_objective(model, spec, [clean], draw, [rngs], vocab, train=train, dropout_rng=rngs.dropout))


def loss_cart(model, clean, t, rngs: StepRngs, vocab, window: int = 8, train: bool = True) -> LossValue:
    spec = ObjectiveSpec(kind="cart", cart_window=window)
    draw = TimestepDraw(t=t, rho=0.0)
    return _single(run_objective(model, spec, [clean], draw, [rngs], vocab, train=train, dropout_rng=rngs.dropout))
