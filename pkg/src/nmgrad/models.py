"""Aggregation models that turn a bag of tile embeddings into a grade.

Four aggregators share one classifier head: column-wise mean and max
pooling, flat gated-attention pooling over all instances, and the nested
variant that first pools tiles into region embeddings with a shared
tile-level attention and then pools regions with an independent
region-level attention. All backward passes are analytic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .embeddings import SCALE_MODES, NestedBag
from .errors import DataFormatError, EmptyBagError, ValidationError
from .losses import LossConfig, focal_tversky_loss
from .ops import (
    AttentionParams,
    ClassifierParams,
    classifier_backward,
    classifier_forward,
    gated_attention_backward,
    gated_attention_forward,
    init_attention_params,
    init_classifier_params,
)
from .params import load_params, save_params

AGGREGATORS = ("mean", "max", "abmil", "nmia")

TILE_ATTENTION = "tile_attention"
REGION_ATTENTION = "region_attention"


@dataclass(frozen=True)
class ModelConfig:
    aggregator: str
    scale_mode: str = "mono"
    embed_dim: int = 128
    attention_dim: int = 64
    init_seed: int = 0

    def __post_init__(self):
        if self.aggregator not in AGGREGATORS:
            raise ValidationError(f"unknown aggregator {self.aggregator!r}")
        if self.scale_mode not in SCALE_MODES:
            raise ValidationError(f"unknown scale mode {self.scale_mode!r}")
        if self.embed_dim < 1 or self.attention_dim < 1:
            raise ValidationError("embed_dim and attention_dim must be positive")


@dataclass
class ForwardTrace:
    """Everything one nested forward pass produced, for scoring and heatmaps."""

    slide_id: str
    region_ids: tuple[int, ...]
    tile_attention: list[np.ndarray]     # per region, sums to 1
    region_embeddings: np.ndarray        # (K, D)
    region_attention: np.ndarray         # (K,), sums to 1
    slide_embedding: np.ndarray          # (D,)
    probabilities: np.ndarray            # (p_LG, p_HG)
    region_predictions: np.ndarray       # (K,) p_HG of each region embedding


def init_params(config: ModelConfig) -> dict[str, np.ndarray]:
    """Seeded parameter blocks for the configured aggregator."""
    rng = np.random.default_rng(config.init_seed)
    params: dict[str, np.ndarray] = {}
    if config.aggregator in ("abmil", "nmia"):
        att = init_attention_params(rng, config.embed_dim, config.attention_dim)
        params[f"{TILE_ATTENTION}.w"] = att.w
        params[f"{TILE_ATTENTION}.V"] = att.V
        params[f"{TILE_ATTENTION}.U"] = att.U
    if config.aggregator == "nmia":
        att = init_attention_params(rng, config.embed_dim, config.attention_dim)
        params[f"{REGION_ATTENTION}.w"] = att.w
        params[f"{REGION_ATTENTION}.V"] = att.V
        params[f"{REGION_ATTENTION}.U"] = att.U
    cls = init_classifier_params(rng, config.embed_dim)
    params["classifier.weight"] = cls.weight
    params["classifier.bias"] = cls.bias
    return params


def attention_from(params: dict[str, np.ndarray], prefix: str) -> AttentionParams:
    return AttentionParams(w=params[f"{prefix}.w"], V=params[f"{prefix}.V"],
                           U=params[f"{prefix}.U"])


def classifier_from(params: dict[str, np.ndarray]) -> ClassifierParams:
    return ClassifierParams(weight=params["classifier.weight"],
                            bias=params["classifier.bias"])


def aggregate_mean(H: np.ndarray) -> np.ndarray:
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2 or H.shape[0] < 1:
        raise EmptyBagError("mean aggregation needs at least one instance")
    return H.mean(axis=0)


def aggregate_max(H: np.ndarray) -> np.ndarray:
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2 or H.shape[0] < 1:
        raise EmptyBagError("max aggregation needs at least one instance")
    return H.max(axis=0)


def abmil_forward(H: np.ndarray, params: dict[str, np.ndarray]
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Flat attention pooling: returns (probabilities, attention weights)."""
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2 or H.shape[0] < 1:
        raise EmptyBagError("attention aggregation needs at least one instance")
    attention = gated_attention_forward(H, attention_from(params, TILE_ATTENTION))
    pooled = attention @ H
    probs = classifier_forward(pooled, classifier_from(params))
    return probs, attention


def nmia_forward(bag: NestedBag, params: dict[str, np.ndarray]) -> ForwardTrace:
    """Nested attention pooling: tiles to regions, regions to the slide."""
    if bag.num_regions < 1:
        raise EmptyBagError(f"slide {bag.slide_id} has no regions")
    tile_att = attention_from(params, TILE_ATTENTION)
    region_att = attention_from(params, REGION_ATTENTION)
    classifier = classifier_from(params)

    tile_weights: list[np.ndarray] = []
    region_rows: list[np.ndarray] = []
    for region in bag.regions:
        if region.instances.shape[0] < 1:
            raise EmptyBagError(
                f"slide {bag.slide_id} region {region.region_id} is empty"
            )
        a = gated_attention_forward(region.instances, tile_att)
        tile_weights.append(a)
        region_rows.append(a @ region.instances)
    region_embeddings = np.stack(region_rows)
    region_weights = gated_attention_forward(region_embeddings, region_att)
    slide_embedding = region_weights @ region_embeddings
    probs = classifier_forward(slide_embedding, classifier)
    region_predictions = np.array(
        [classifier_forward(row, classifier)[1] for row in region_embeddings]
    )
    return ForwardTrace(
        slide_id=bag.slide_id,
        region_ids=tuple(r.region_id for r in bag.regions),
        tile_attention=tile_weights,
        region_embeddings=region_embeddings,
        region_attention=region_weights,
        slide_embedding=slide_embedding,
        probabilities=probs,
        region_predictions=region_predictions,
    )


def region_scores(trace: ForwardTrace) -> list[tuple[int, float, float]]:
    """Per-region (region_id, attention score, prediction score) readout."""
    return [
        (rid, float(a), float(p))
        for rid, a, p in zip(trace.region_ids, trace.region_attention,
                             trace.region_predictions)
    ]


def model_forward(bag: NestedBag, params: dict[str, np.ndarray],
                  config: ModelConfig) -> tuple[np.ndarray, ForwardTrace | None]:
    """Slide probabilities for any aggregator; NMIA also yields a trace."""
    if config.aggregator == "nmia":
        trace = nmia_forward(bag, params)
        return trace.probabilities, trace
    H = bag.flat_instances()
    if config.aggregator == "mean":
        probs = classifier_forward(aggregate_mean(H), classifier_from(params))
    elif config.aggregator == "max":
        probs = classifier_forward(aggregate_max(H), classifier_from(params))
    else:
        probs, _ = abmil_forward(H, params)
    return probs, None


# ---------------------------------------------------------------------------
# Loss gradients (full backward through loss, classifier and aggregation).
# ---------------------------------------------------------------------------

def _label_onehot(label: int) -> np.ndarray:
    if label not in (0, 1):
        raise ValidationError(f"label must be 0 (LG) or 1 (HG), got {label}")
    return np.array([1.0 - label, float(label)])


def loss_and_gradients(
    bag: NestedBag,
    params: dict[str, np.ndarray],
    config: ModelConfig,
    loss_config: LossConfig,
) -> tuple[float, dict[str, np.ndarray], np.ndarray]:
    """Focal Tversky loss of one bag plus gradients for every block.

    The slide prediction is treated as a single-sample batch; gradients
    flow through the classifier softmax and the aggregation (including the
    attention softmaxes) back to every trainable block.
    """
    grads = {name: np.zeros_like(block) for name, block in params.items()}
    onehot = _label_onehot(bag.label)
    classifier = classifier_from(params)

    if config.aggregator == "nmia":
        trace = nmia_forward(bag, params)
        probs = trace.probabilities
        loss, d_pred = focal_tversky_loss(probs[None, :], onehot[None, :], loss_config)
        d_h, d_weight, d_bias = classifier_backward(
            trace.slide_embedding, classifier, probs, d_pred[0]
        )
        grads["classifier.weight"] += d_weight
        grads["classifier.bias"] += d_bias

        region_att = attention_from(params, REGION_ATTENTION)
        b = trace.region_attention
        H_reg = trace.region_embeddings
        d_b = H_reg @ d_h
        d_H_reg = np.outer(b, d_h)
        dH2, dw, dV, dU = gated_attention_backward(H_reg, region_att, d_b)
        d_H_reg += dH2
        grads[f"{REGION_ATTENTION}.w"] += dw
        grads[f"{REGION_ATTENTION}.V"] += dV
        grads[f"{REGION_ATTENTION}.U"] += dU

        tile_att = attention_from(params, TILE_ATTENTION)
        for k, region in enumerate(bag.regions):
            d_region_row = d_H_reg[k]
            d_a = region.instances @ d_region_row
            _, dw, dV, dU = gated_attention_backward(region.instances, tile_att, d_a)
            grads[f"{TILE_ATTENTION}.w"] += dw
            grads[f"{TILE_ATTENTION}.V"] += dV
            grads[f"{TILE_ATTENTION}.U"] += dU
        return loss, grads, probs

    H = bag.flat_instances()
    if config.aggregator == "mean":
        pooled = aggregate_mean(H)
    elif config.aggregator == "max":
        pooled = aggregate_max(H)
    else:
        attention = gated_attention_forward(H, attention_from(params, TILE_ATTENTION))
        pooled = attention @ H
    probs = classifier_forward(pooled, classifier)
    loss, d_pred = focal_tversky_loss(probs[None, :], onehot[None, :], loss_config)
    d_h, d_weight, d_bias = classifier_backward(pooled, classifier, probs, d_pred[0])
    grads["classifier.weight"] += d_weight
    grads["classifier.bias"] += d_bias
    if config.aggregator == "abmil":
        d_a = H @ d_h
        _, dw, dV, dU = gated_attention_backward(
            H, attention_from(params, TILE_ATTENTION), d_a
        )
        grads[f"{TILE_ATTENTION}.w"] += dw
        grads[f"{TILE_ATTENTION}.V"] += dV
        grads[f"{TILE_ATTENTION}.U"] += dU
    return loss, grads, probs


def make_loss_closure(bag: NestedBag, config: ModelConfig, loss_config: LossConfig):
    """Closure params -> (loss, grads) for gradient checking."""

    def closure(params: dict[str, np.ndarray]):
        loss, grads, _ = loss_and_gradients(bag, params, config, loss_config)
        return loss, grads

    return closure


# ---------------------------------------------------------------------------
# Checkpoints: parameter container plus a JSON sidecar describing the model.
# ---------------------------------------------------------------------------

def save_checkpoint(params: dict[str, np.ndarray], config: ModelConfig, path) -> None:
    """Write the parameter container plus a .json sidecar next to it."""
    path = Path(path)
    save_params(params, path)
    sidecar = {
        "aggregator": config.aggregator,
        "scale_mode": config.scale_mode,
        "D": config.embed_dim,
        "M": config.attention_dim,
    }
    path.with_suffix(".json").write_text(
        json.dumps(sidecar, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], ModelConfig]:
    path = Path(path)
    params = load_params(path)
    sidecar_path = path.with_suffix(".json")
    if not sidecar_path.exists():
        raise DataFormatError("missing checkpoint sidecar", str(sidecar_path))
    sidecar = json.loads(sidecar_path.read_text(encoding="utf-8"))
    try:
        config = ModelConfig(
            aggregator=str(sidecar["aggregator"]),
            scale_mode=str(sidecar["scale_mode"]),
            embed_dim=int(sidecar["D"]),
            attention_dim=int(sidecar["M"]),
        )
    except KeyError as exc:
        raise DataFormatError(f"sidecar missing {exc}", str(sidecar_path)) from exc
    return params, config
