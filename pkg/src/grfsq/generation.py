"""Coarse-to-fine layered token generation.

One pass per residual layer, each pass predicting all frames at once
(non-autoregressive in time, autoregressive in granularity). The context
for layer r carries the global feature, the layer indicator, and a
frame-wise concatenation of speech tokens, control tracks and the tokens
produced at layer r-1 (an all-zero sentinel at layer 0).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInput, PredictorContractViolation

PROB_FLOOR = 1e-12
DEFAULT_SPEECH_VOCAB = 4096
DEFAULT_TOKEN_RATE = 25.0


@dataclass(frozen=True, eq=False)
class SpeechTokenSeq:
    """Discrete speech tokens at a fixed frame rate."""

    tokens: np.ndarray
    vocab: int = DEFAULT_SPEECH_VOCAB
    rate: float = DEFAULT_TOKEN_RATE

    def __post_init__(self):
        arr = np.asarray(self.tokens)
        if arr.ndim != 1:
            raise InvalidInput(f"tokens must be 1-D, got shape {arr.shape}")
        if not np.issubdtype(arr.dtype, np.integer):
            raise InvalidInput("tokens must be integers")
        if self.vocab < 1:
            raise InvalidInput("vocab must be positive")
        if arr.size and (arr.min() < 0 or arr.max() >= self.vocab):
            raise InvalidInput(f"tokens must lie in [0, {self.vocab})")
        arr = arr.astype(np.int64)
        arr.setflags(write=False)
        object.__setattr__(self, "tokens", arr)

    def __len__(self) -> int:
        return self.tokens.shape[0]


@dataclass(frozen=True, eq=False)
class ControlTrack:
    """Frame-level head pose (3), gaze (2) and eye blink (2) signals."""

    head_pose: np.ndarray
    gaze: np.ndarray
    blink: np.ndarray

    def __post_init__(self):
        fields = {"head_pose": (self.head_pose, 3), "gaze": (self.gaze, 2), "blink": (self.blink, 2)}
        arrays = {}
        for name, (value, width) in fields.items():
            arr = np.asarray(value, dtype=np.float64)
            if arr.ndim != 2 or arr.shape[1] != width:
                raise InvalidInput(f"{name} must have shape (T, {width}), got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise InvalidInput(f"{name} contains non-finite values")
            arrays[name] = arr
        lengths = {a.shape[0] for a in arrays.values()}
        if len(lengths) != 1:
            raise InvalidInput(f"control tracks disagree on length: {sorted(lengths)}")
        for name, arr in arrays.items():
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def num_frames(self) -> int:
        return self.head_pose.shape[0]


@dataclass(frozen=True, eq=False)
class GenerationContext:
    """Everything a predictor sees for one layer pass."""

    global_feature: np.ndarray
    layer_indicator: int
    framewise: np.ndarray  # (T, 1 + 3 + 2 + 2 + num_groups)
    prev_layer_tokens: np.ndarray  # (T, num_groups)

    @property
    def num_frames(self) -> int:
        return self.framewise.shape[0]


@dataclass(frozen=True, eq=False)
class LayerPass:
    layer: int
    positions: np.ndarray


@dataclass(frozen=True, eq=False)
class Schedule:
    num_frames: int
    num_layers: int
    passes: tuple[LayerPass, ...]


def build_schedule(num_frames: int, num_layers: int) -> Schedule:
    """One pass per layer; each pass covers every frame position at once."""
    if num_frames < 0 or num_layers < 1:
        raise InvalidInput("need num_frames >= 0 and num_layers >= 1")
    passes = tuple(
        LayerPass(layer=r, positions=np.arange(num_frames)) for r in range(num_layers)
    )
    return Schedule(num_frames=num_frames, num_layers=num_layers, passes=passes)


def assemble_context(
    global_feature,
    layer: int,
    speech: SpeechTokenSeq,
    controls: ControlTrack,
    prev_tokens=None,
    num_groups: int | None = None,
) -> GenerationContext:
    """Build the layer context; layer 0 substitutes an all-zero token sentinel."""
    T = len(speech)
    if controls.num_frames != T:
        raise InvalidInput(
            f"controls cover {controls.num_frames} frames, speech covers {T}"
        )
    if layer < 0:
        raise InvalidInput("layer must be non-negative")
    fg = np.asarray(global_feature, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(fg)):
        raise InvalidInput("global feature contains non-finite values")

    if prev_tokens is not None:
        prev = np.asarray(prev_tokens)
        if prev.ndim != 2 or prev.shape[0] != T:
            raise InvalidInput(f"prev_tokens must have shape ({T}, groups), got {prev.shape}")
        if prev.size and not np.issubdtype(prev.dtype, np.integer):
            raise InvalidInput("prev_tokens must be integers")
        if num_groups is not None and prev.shape[1] != num_groups:
            raise InvalidInput(
                f"prev_tokens have {prev.shape[1]} groups, expected {num_groups}"
            )
        num_groups = prev.shape[1]
    if num_groups is None:
        raise InvalidInput("num_groups is required when prev_tokens is not given")

    if layer == 0:
        prev = np.zeros((T, num_groups), dtype=np.int64)
    else:
        if prev_tokens is None:
            raise InvalidInput("layers above 0 need the previous layer's tokens")
        prev = prev.astype(np.int64)

    framewise = np.concatenate(
        [
            speech.tokens[:, None].astype(np.float64),
            controls.head_pose,
            controls.gaze,
            controls.blink,
            prev.astype(np.float64),
        ],
        axis=1,
    )
    return GenerationContext(
        global_feature=fg,
        layer_indicator=int(layer),
        framewise=framewise,
        prev_layer_tokens=prev,
    )


def validate_prediction_grid(probs, num_frames: int | None = None, num_groups: int | None = None) -> np.ndarray:
    arr = np.asarray(probs, dtype=np.float64)
    if arr.ndim != 3:
        raise InvalidInput(f"prediction grid must be (T, G, C), got shape {arr.shape}")
    if num_frames is not None and arr.shape[0] != num_frames:
        raise InvalidInput(f"grid covers {arr.shape[0]} frames, expected {num_frames}")
    if num_groups is not None and arr.shape[1] != num_groups:
        raise InvalidInput(f"grid has {arr.shape[1]} groups, expected {num_groups}")
    if arr.size:
        if np.any(arr < 0) or not np.all(np.isfinite(arr)):
            raise InvalidInput("probabilities must be finite and non-negative")
        sums = arr.sum(axis=2)
        if np.any(np.abs(sums - 1.0) > 1e-9):
            raise InvalidInput("each (frame, group) row must sum to 1 within 1e-9")
    return arr


def nll(predictions, targets) -> float:
    """Negative log-likelihood of targets (nats), probabilities floored at 1e-12."""
    probs = validate_prediction_grid(predictions)
    tgt = np.asarray(targets)
    if tgt.shape != probs.shape[:2]:
        raise InvalidInput(
            f"targets shape {tgt.shape} does not match grid {probs.shape[:2]}"
        )
    if tgt.size == 0:
        return 0.0
    if not np.issubdtype(tgt.dtype, np.integer):
        raise InvalidInput("targets must be integers")
    if tgt.min() < 0 or tgt.max() >= probs.shape[2]:
        raise InvalidInput(f"targets must lie in [0, {probs.shape[2]})")
    t_idx, g_idx = np.indices(tgt.shape)
    picked = probs[t_idx, g_idx, tgt]
    return float(-np.log(np.maximum(picked, PROB_FLOOR)).sum())


def argmax_sample(predictions) -> np.ndarray:
    """Most probable class per (frame, group); ties resolve to the lowest class."""
    probs = validate_prediction_grid(predictions)
    return probs.argmax(axis=2).astype(np.int64)


def generate(
    predictor,
    global_feature,
    speech: SpeechTokenSeq,
    controls: ControlTrack,
    num_layers: int,
    num_groups: int,
    with_nll: bool = False,
):
    """Run the layered generation loop.

    The predictor is invoked exactly once per layer with a context holding
    only the previous layer's tokens; its grid is argmax-sampled into that
    layer's slice of the output tensor (T, groups, layers).
    """
    if num_layers < 1 or num_groups < 1:
        raise InvalidInput("num_layers and num_groups must be positive")
    T = len(speech)
    out = np.zeros((T, num_groups, num_layers), dtype=np.int64)
    nll_per_layer = np.zeros(num_layers)
    num_classes = None
    prev = None
    for layer in range(num_layers):
        context = assemble_context(
            global_feature, layer, speech, controls, prev_tokens=prev, num_groups=num_groups
        )
        grid = np.asarray(predictor(context))
        if grid.ndim != 3 or grid.shape[0] != T or grid.shape[1] != num_groups:
            raise PredictorContractViolation(
                f"layer {layer}: grid shape {grid.shape}, expected ({T}, {num_groups}, C)"
            )
        if num_classes is None:
            num_classes = grid.shape[2]
        elif grid.shape[2] != num_classes:
            raise PredictorContractViolation(
                f"layer {layer}: class count changed from {num_classes} to {grid.shape[2]}"
            )
        try:
            tokens = argmax_sample(grid)
        except InvalidInput as exc:
            raise PredictorContractViolation(f"layer {layer}: {exc}") from None
        if with_nll:
            nll_per_layer[layer] = nll(grid, tokens)
        out[:, :, layer] = tokens
        prev = tokens
    if with_nll:
        return out, nll_per_layer
    return out


class UniformPredictor:
    """Assigns every class equal probability."""

    def __init__(self, num_classes: int):
        if num_classes < 1:
            raise InvalidInput("num_classes must be positive")
        self.num_classes = num_classes

    def __call__(self, context: GenerationContext) -> np.ndarray:
        T = context.num_frames
        G = context.prev_layer_tokens.shape[1]
        return np.full((T, G, self.num_classes), 1.0 / self.num_classes)


class EchoPredictor:
    """Puts probability one on a fixed target tensor's slice for each layer."""

    def __init__(self, target, num_classes: int | None = None):
        arr = np.asarray(target)
        if arr.ndim != 3:
            raise InvalidInput(f"target must be (T, G, R), got shape {arr.shape}")
        self.target = arr.astype(np.int64)
        if num_classes is None:
            num_classes = int(arr.max()) + 1 if arr.size else 1
        self.num_classes = num_classes

    def __call__(self, context: GenerationContext) -> np.ndarray:
        layer = context.layer_indicator
        T, G, R = self.target.shape
        if layer >= R:
            raise PredictorContractViolation(f"layer {layer} beyond the {R} target layers")
        grid = np.zeros((T, G, self.num_classes))
        t_idx, g_idx = np.indices((T, G))
        grid[t_idx, g_idx, self.target[:, :, layer]] = 1.0
        return grid


class RecordingPredictor:
    """Wraps a predictor and snapshots every context it receives."""

    def __init__(self, inner):
        self.inner = inner
        self.contexts: list[GenerationContext] = []

    def __call__(self, context: GenerationContext) -> np.ndarray:
        self.contexts.append(
            GenerationContext(
                global_feature=context.global_feature.copy(),
                layer_indicator=context.layer_indicator,
                framewise=context.framewise.copy(),
                prev_layer_tokens=context.prev_layer_tokens.copy(),
            )
        )
        return self.inner(context)


class BigramPredictor:
    """Add-one-smoothed counts over previous-layer tokens and speech tokens.

    Per layer, two count channels are combined multiplicatively and
    renormalized: target given the same-position previous-layer token, and
    target given the frame's speech token. Unseen symbols fall back to the
    uniform smoothing mass.
    """

    def __init__(self, num_classes: int, num_layers: int):
        if num_classes < 1 or num_layers < 1:
            raise InvalidInput("num_classes and num_layers must be positive")
        self.num_classes = num_classes
        self.num_layers = num_layers
        self._prev_counts: list[dict[int, np.ndarray]] = [{} for _ in range(num_layers)]
        self._speech_counts: list[dict[int, np.ndarray]] = [{} for _ in range(num_layers)]

    @classmethod
    def fit(cls, targets, speech: SpeechTokenSeq, num_classes: int) -> "BigramPredictor":
        arr = np.asarray(targets)
        if arr.ndim != 3:
            raise InvalidInput(f"targets must be (T, G, R), got shape {arr.shape}")
        T, G, R = arr.shape
        if len(speech) != T:
            raise InvalidInput(f"speech covers {len(speech)} frames, targets cover {T}")
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise InvalidInput(f"targets must lie in [0, {num_classes})")
        model = cls(num_classes, R)
        tokens = speech.tokens
        for r in range(R):
            prev = np.zeros((T, G), dtype=np.int64) if r == 0 else arr[:, :, r - 1]
            pc, sc = model._prev_counts[r], model._speech_counts[r]
            for t in range(T):
                a = int(tokens[t])
                row_s = sc.get(a)
                if row_s is None:
                    row_s = sc[a] = np.zeros(num_classes, dtype=np.int64)
                for g in range(G):
                    tgt = int(arr[t, g, r])
                    p = int(prev[t, g])
                    row_p = pc.get(p)
                    if row_p is None:
                        row_p = pc[p] = np.zeros(num_classes, dtype=np.int64)
                    row_p[tgt] += 1
                    row_s[tgt] += 1
        return model

    def _channel(self, table: dict[int, np.ndarray], symbol: int) -> np.ndarray:
        counts = table.get(symbol)
        if counts is None:
            return np.full(self.num_classes, 1.0 / self.num_classes)
        smoothed = counts + 1.0
        return smoothed / smoothed.sum()

    def __call__(self, context: GenerationContext) -> np.ndarray:
        layer = context.layer_indicator
        if layer >= self.num_layers:
            raise PredictorContractViolation(
                f"layer {layer} beyond the {self.num_layers} trained layers"
            )
        speech_tokens = context.framewise[:, 0].astype(np.int64)
        prev = context.prev_layer_tokens
        T, G = prev.shape
        grid = np.empty((T, G, self.num_classes))
        for t in range(T):
            p_speech = self._channel(self._speech_counts[layer], int(speech_tokens[t]))
            for g in range(G):
                p_prev = self._channel(self._prev_counts[layer], int(prev[t, g]))
                joint = p_prev * p_speech
                grid[t, g] = joint / joint.sum()
        return grid


def load_speech_tokens(
    path, vocab: int = DEFAULT_SPEECH_VOCAB, rate: float = DEFAULT_TOKEN_RATE
) -> SpeechTokenSeq:
    """Read newline-delimited integer tokens, validated against the vocab."""
    tokens = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            try:
                value = int(text)
            except ValueError:
                raise InvalidInput(f"{path}:{lineno}: not an integer token: {text!r}") from None
            if value < 0 or value >= vocab:
                raise InvalidInput(
                    f"{path}:{lineno}: token {value} outside vocab [0, {vocab})"
                )
            tokens.append(value)
    return SpeechTokenSeq(tokens=np.asarray(tokens, dtype=np.int64), vocab=vocab, rate=rate)


def load_controls(path) -> ControlTrack:
    """Read JSON-lines control records with fields h (3), g (2), b (2)."""
    h, g, b = [], [], []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            try:
                record = json.loads(text)
            except json.JSONDecodeError as exc:
                raise InvalidInput(f"{path}:{lineno}: invalid JSON: {exc}") from None
            if not isinstance(record, dict):
                raise InvalidInput(f"{path}:{lineno}: expected a JSON object")
            for key, dest, width in (("h", h, 3), ("g", g, 2), ("b", b, 2)):
                value = record.get(key)
                if (
                    not isinstance(value, list)
                    or len(value) != width
                    or not all(isinstance(v, (int, float)) for v in value)
                    or not all(math.isfinite(float(v)) for v in value)
                ):
                    raise InvalidInput(
                        f"{path}:{lineno}: field {key!r} must be {width} finite numbers"
                    )
                dest.append([float(v) for v in value])
    return ControlTrack(
        head_pose=np.asarray(h, dtype=np.float64).reshape(len(h), 3),
        gaze=np.asarray(g, dtype=np.float64).reshape(len(g), 2),
        blink=np.asarray(b, dtype=np.float64).reshape(len(b), 2),
    )
