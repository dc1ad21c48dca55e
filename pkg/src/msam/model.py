"""Multimodal classifier: per-modality MLP encoders plus a fusion head.

Two fusion modes are supported. Late fusion gives each modality its own small
two-layer head and sums the per-modality logits. Early fusion concatenates the
encoder features and applies a maxout layer (elementwise max over `pieces`
affine maps) followed by a linear head.

There are two forward paths on purpose. `forward_masked` is a plain numpy
evaluation used for coalition masking, evaluation, and as a tape-free oracle
in the tests; `tape_loss`/`tape_loss_terms` build the same computation on an
autodiff tape for training. A coalition is always the set of modalities that
stay active: everything else has its inputs zeroed before encoding.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DimensionError, UsageError
from .tensor import Rng, Tensor, derive_seed, randn

Array = np.ndarray

_ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class EncoderSpec:
    """Shape of one modality's encoder MLP.

    `hidden` lists the layer widths; the activation follows every layer, and
    an empty tuple means the encoder is the identity on the raw input.
    """

    in_dim: int
    hidden: tuple[int, ...] = ()
    activation: str = "relu"

    def __post_init__(self):
        if self.in_dim < 1:
            raise ConfigError(f"encoder in_dim must be >= 1, got {self.in_dim}")
        if any(h < 1 for h in self.hidden):
            raise ConfigError(f"encoder hidden widths must be >= 1, got {self.hidden}")
        if self.activation not in _ACTIVATIONS:
            raise ConfigError(f"activation must be one of {_ACTIVATIONS}, got {self.activation!r}")

    @property
    def out_dim(self) -> int:
        return self.hidden[-1] if self.hidden else self.in_dim


@dataclass(frozen=True)
class FusionSpec:
    """Fusion head shape. `width` is the maxout output width (early) or the
    per-modality head hidden width (late); `pieces` applies to early only."""

    mode: str
    width: int = 8
    pieces: int = 2

    def __post_init__(self):
        if self.mode not in ("early", "late"):
            raise ConfigError(f"fusion mode must be 'early' or 'late', got {self.mode!r}")
        if self.width < 1:
            raise ConfigError(f"fusion width must be >= 1, got {self.width}")
        if self.mode == "early" and self.pieces < 2:
            raise ConfigError(f"early fusion needs >= 2 maxout pieces, got {self.pieces}")


@dataclass
class ForwardTrace:
    """Intermediate values of one plain forward pass."""

    features: list[Array]
    fused: Array
    logits: Array
    keep: tuple[int, ...]


def _act_plain(name: str):
    return np.tanh if name == "tanh" else (lambda a: np.maximum(a, 0.0))


def mask_inputs(xs: Sequence[Array], keep: Iterable[int], n_modalities: int) -> list[Array]:
    """Zero the inputs of every modality not in `keep` (the active coalition)."""
    kept = frozenset(keep)
    for m in kept:
        if not 0 <= m < n_modalities:
            raise UsageError(f"coalition member {m} outside [0, {n_modalities})")
    return [xs[m] if m in kept else np.zeros_like(xs[m]) for m in range(n_modalities)]


class MultimodalModel:
    """Encoders + fusion head with named parameters and pass counters.

    Weights initialize to randn / sqrt(fan_in) from a seed-derived stream,
    biases to zero (omitted entirely when `bias=False`). `counters` tracks
    taped forward/backward passes and plain masked forwards so the training
    harness can assert the per-step pass budget.
    """

    def __init__(
        self,
        encoders: Sequence[EncoderSpec],
        fusion: FusionSpec,
        classes: int,
        *,
        bias: bool = True,
        seed: int = 0,
    ):
        if not encoders:
            raise ConfigError("need at least one modality encoder")
        if classes < 2:
            raise ConfigError(f"need at least two classes, got {classes}")
        self.encoders = tuple(encoders)
        self.fusion = fusion
        self.classes = classes
        self.bias = bias
        self.seed = seed
        self.counters = {"taped": 0, "masked_forward": 0}
        rng = Rng(derive_seed(seed, 1))
        items: list[tuple[str, Tensor]] = []

        def linear(name: str, fan_in: int, fan_out: int):
            items.append((f"{name}.w", randn(rng, (fan_in, fan_out)).scale(fan_in**-0.5)))
            if bias:
                items.append((f"{name}.b", Tensor(np.zeros(fan_out))))

        for m, es in enumerate(self.encoders):
            prev = es.in_dim
            for i, h in enumerate(es.hidden):
                linear(f"enc{m}.l{i}", prev, h)
                prev = h
        if fusion.mode == "late":
            for m, es in enumerate(self.encoders):
                linear(f"head{m}.l0", es.out_dim, fusion.width)
                linear(f"head{m}.l1", fusion.width, classes)
        else:
            total = sum(es.out_dim for es in self.encoders)
            for j in range(fusion.pieces):
                linear(f"fusion.p{j}", total, fusion.width)
            linear("head.out", fusion.width, classes)
        self.params = ad.ParameterVector(items)

    @property
    def n_modalities(self) -> int:
        return len(self.encoders)

    @property
    def n_params(self) -> int:
        return self.params.size

    def _check_inputs(self, xs: Sequence[Array], labels: Array | None = None) -> int:
        if len(xs) != self.n_modalities:
            raise DimensionError(f"expected {self.n_modalities} modality arrays, got {len(xs)}")
        n = None
        for m, x in enumerate(xs):
            x = np.asarray(x)
            if x.ndim != 2 or x.shape[1] != self.encoders[m].in_dim:
                raise DimensionError(
                    f"modality {m} expects shape (N, {self.encoders[m].in_dim}), got {x.shape}"
                )
            if n is None:
                n = x.shape[0]
            elif x.shape[0] != n:
                raise DimensionError("modality arrays disagree on batch size")
        if n == 0:
            raise UsageError("batch must be non-empty")
        if labels is not None and np.asarray(labels).shape != (n,):
            raise DimensionError(f"labels shape {np.asarray(labels).shape} != ({n},)")
        return int(n)

    # plain (tape-free) path

    def _encode_plain(self, m: int, x: Array) -> Array:
        es = self.encoders[m]
        act = _act_plain(es.activation)
        h = x
        for i in range(len(es.hidden)):
            h = h @ self.params.view(f"enc{m}.l{i}.w")
            if self.bias:
                h = h + self.params.view(f"enc{m}.l{i}.b")
            h = act(h)
        return h

    def forward_masked(self, xs: Sequence[Array], keep: Iterable[int]) -> ForwardTrace:
        """Plain forward with only the coalition `keep` active.

        Unlike the taped path this never raises on overflow: evaluation of a
        diverged model reports inf/nan values as they are.
        """
        self._check_inputs(xs)
        self.counters["masked_forward"] += 1
        keep = tuple(sorted(frozenset(keep)))
        masked = mask_inputs([np.asarray(x, dtype=np.float64) for x in xs], keep, self.n_modalities)
        with np.errstate(over="ignore", invalid="ignore"):
            return self._forward_masked_inner(masked, keep)

    def _forward_masked_inner(self, masked: list[Array], keep: tuple[int, ...]) -> ForwardTrace:
        feats = [self._encode_plain(m, masked[m]) for m in range(self.n_modalities)]
        if self.fusion.mode == "late":
            logits = None
            for m in range(self.n_modalities):
                act = _act_plain(self.encoders[m].activation)
                h = feats[m] @ self.params.view(f"head{m}.l0.w")
                if self.bias:
                    h = h + self.params.view(f"head{m}.l0.b")
                h = act(h)
                out = h @ self.params.view(f"head{m}.l1.w")
                if self.bias:
                    out = out + self.params.view(f"head{m}.l1.b")
                logits = out if logits is None else logits + out
            fused = logits
        else:
            joint = np.concatenate(feats, axis=1)
            pieces = []
            for j in range(self.fusion.pieces):
                p = joint @ self.params.view(f"fusion.p{j}.w")
                if self.bias:
                    p = p + self.params.view(f"fusion.p{j}.b")
                pieces.append(p)
            fused = np.stack(pieces, axis=0).max(axis=0)
            logits = fused @ self.params.view("head.out.w")
            if self.bias:
                logits = logits + self.params.view("head.out.b")
        return ForwardTrace(features=feats, fused=fused, logits=logits, keep=keep)

    def forward(self, xs: Sequence[Array]) -> ForwardTrace:
        """Plain forward with every modality active."""
        return self.forward_masked(xs, range(self.n_modalities))

    # taped path

    def _tape_linear(self, leaves, h, name: str):
        h = ad.matmul(h, leaves[f"{name}.w"])
        if self.bias:
            h = ad.add_bias(h, leaves[f"{name}.b"])
        return h

    def _tape_logits(self, tape, leaves, masked: list[Array]):
        feats = []
        for m, es in enumerate(self.encoders):
            h = ad.constant(tape, masked[m])
            act = ad.tanh if es.activation == "tanh" else ad.relu
            for i in range(len(es.hidden)):
                h = act(self._tape_linear(leaves, h, f"enc{m}.l{i}"))
            feats.append(h)
        if self.fusion.mode == "late":
            logits = None
            for m in range(self.n_modalities):
                act = ad.tanh if self.encoders[m].activation == "tanh" else ad.relu
                h = act(self._tape_linear(leaves, feats[m], f"head{m}.l0"))
                out = self._tape_linear(leaves, h, f"head{m}.l1")
                logits = out if logits is None else ad.add(logits, out)
            return logits
        joint = ad.concat(feats)
        pieces = [self._tape_linear(leaves, joint, f"fusion.p{j}") for j in range(self.fusion.pieces)]
        return self._tape_linear(leaves, ad.maxout(pieces), "head.out")

    def tape_loss(self, leaves, inputs):
        """Taped mean cross-entropy on the full (unmasked) batch."""
        xs, labels = inputs
        return self.tape_loss_terms(leaves, (xs, labels, ((tuple(range(self.n_modalities)), None),)))

    def tape_loss_terms(self, leaves, inputs):
        """Taped weighted sum of masked cross-entropy terms.

        `terms` is a sequence of (keep, weight) pairs; a weight of None means
        the raw unscaled loss (so a single full-coalition term builds exactly
        the same graph as `tape_loss`).
        """
        xs, labels, terms = inputs
        if not terms:
            raise UsageError("tape_loss_terms needs at least one term")
        n = self._check_inputs(xs, np.asarray(labels))
        del n
        tape = next(iter(leaves.values())).tape
        xs = [np.asarray(x, dtype=np.float64) for x in xs]
        total = None
        for keep, weight in terms:
            masked = mask_inputs(xs, keep, self.n_modalities)
            logits = self._tape_logits(tape, leaves, masked)
            ce = ad.softmax_cross_entropy(logits, np.asarray(labels))
            term = ce if weight is None else ad.scale(ce, float(weight))
            total = term if total is None else ad.add(total, term)
        return total

    def loss_value_and_grad(self, xs: Sequence[Array], labels: Array) -> tuple[float, Array]:
        """One taped forward/backward on the full batch; counts as one pass."""
        self.counters["taped"] += 1
        return ad.value_and_grad(self.tape_loss, self.params, (xs, labels))

    def terms_value_and_grad(
        self, xs: Sequence[Array], labels: Array, terms
    ) -> tuple[float, Array]:
        """Taped forward/backward of a weighted masked-loss sum.

        With an empty term list this is the zero function (no pass consumed).
        """
        if not terms:
            return 0.0, np.zeros(self.params.size, dtype=np.float64)
        self.counters["taped"] += 1
        return ad.value_and_grad(self.tape_loss_terms, self.params, (xs, labels, terms))


def loss_and_accuracy(logits: Array, labels: Array) -> tuple[float, float]:
    """Mean softmax cross-entropy and top-1 accuracy of raw logits.

    Uses the same log-sum-exp arithmetic as the taped loss node, so plain and
    taped evaluations of one batch agree to rounding error.
    """
    z = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise DimensionError(f"got logits {z.shape} with labels {labels.shape}")
    if z.shape[0] == 0:
        raise UsageError("need a non-empty batch")
    if labels.min() < 0 or labels.max() >= z.shape[1]:
        raise UsageError(f"labels must lie in [0, {z.shape[1]})")
    # non-finite logits (diverged model) pass through as inf/nan, not errors
    with np.errstate(over="ignore", invalid="ignore"):
        m = z.max(axis=1, keepdims=True)
        zs = z - m
        ez = np.exp(zs)
        sez = ez.sum(axis=1, keepdims=True)
        logp = zs - np.log(sez)
        loss = float(-logp[np.arange(z.shape[0]), labels].mean())
        acc = float(np.mean(np.argmax(z, axis=1) == labels))
    return loss, acc


def evaluate(model: MultimodalModel, xs: Sequence[Array], labels: Array) -> tuple[float, float]:
    """Plain full-coalition loss and accuracy on one batch or split."""
    trace = model.forward(xs)
    return loss_and_accuracy(trace.logits, np.asarray(labels))
