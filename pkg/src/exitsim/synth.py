"""Synthetic confidence-trace generator and the on-disk trace format.

The generator is a stand-in for a real layered captioner.  Per token it
draws a difficulty d; each layer i's confidence is a logistic squash of
a score that rises with depth past d at rate ``growth``, but the score
is capped at a token-specific ceiling: some tokens keep refining toward
certainty while the rest stall at a plateau.  The distortion level
``sigma`` lowers every layer's score and pushes the ceilings further
down, so distorted inputs both look less confident everywhere and stop
improving earlier.  That second effect is what moves the best exit
threshold when distortion rises, and it is the signal the online
threshold adapter exploits.

Trace files are line-delimited text so external decoders can export
real traces into the same pipeline.  See ``write_traces`` for the
field-by-field layout.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import IO, Iterable, Iterator

import numpy as np

from .cascade import DEFAULT_MAX_CAPTION_LENGTH, TokenTrace

DEFAULT_SEED = 7

FORMAT_NAME = "exitsim-traces"
FORMAT_VERSION = 1


class TraceFormatError(ValueError):
    """A trace file failed structural validation; message cites the line."""


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass(frozen=True)
class SyntheticConfidenceModel:
    """Distribution over per-token confidence traces.

    Layer i's score starts at growth * (i - d) for a difficulty d drawn
    uniformly from [difficulty_low, difficulty_high].  A clean_fraction
    of tokens refine indefinitely; the rest stall at a ceiling whose
    logit is gaussian around logit(ceiling_center).  Distortion sigma
    subtracts base_drop_rate * sigma from every layer's score and an
    extra ceiling_drop_rate * sigma from the ceilings.  Confidence is
    the logistic squash of the capped, shifted, noise-jittered score.

    Each layer also emits a token id: the true target with probability
    equal to that layer's confidence (one shared uniform per token, so
    correctness is consistent across layers), else a per-token wrong
    guess.  Calibrated heads make exact-match accuracy track the
    confidence an exit actually banked.
    """

    n_layers: int = 12
    vocab_size: int = 32
    growth: float = 1.4
    difficulty_low: float = 1.0
    difficulty_high: float = 12.0
    noise_scale: float = 0.05
    clean_fraction: float = 0.4
    ceiling_center: float = 0.91
    ceiling_spread: float = 0.35
    ceiling_drop_rate: float = 0.6
    base_drop_rate: float = 0.25
    sigma: float = 0.0
    eos_prob: float = 0.08
    eos_id: int = 0
    seed: int = DEFAULT_SEED

    def __post_init__(self) -> None:
        if self.n_layers < 2:
            raise ValueError(f"n_layers must be >= 2, got {self.n_layers}")
        if self.vocab_size < 2:
            raise ValueError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.growth <= 0:
            raise ValueError(f"growth must be positive, got {self.growth}")
        if self.difficulty_low > self.difficulty_high:
            raise ValueError(
                f"difficulty_low {self.difficulty_low} > difficulty_high "
                f"{self.difficulty_high}"
            )
        if self.noise_scale < 0:
            raise ValueError(f"noise_scale must be >= 0, got {self.noise_scale}")
        if not 0.0 <= self.clean_fraction <= 1.0:
            raise ValueError(
                f"clean_fraction {self.clean_fraction} outside [0, 1]"
            )
        if not 0.0 < self.ceiling_center < 1.0:
            raise ValueError(
                f"ceiling_center {self.ceiling_center} outside (0, 1)"
            )
        if self.ceiling_spread < 0:
            raise ValueError(
                f"ceiling_spread must be >= 0, got {self.ceiling_spread}"
            )
        if self.ceiling_drop_rate < 0 or self.base_drop_rate < 0:
            raise ValueError("distortion drop rates must be >= 0")
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")
        if not 0.0 <= self.eos_prob <= 1.0:
            raise ValueError(f"eos_prob {self.eos_prob} outside [0, 1]")
        if not 0 <= self.eos_id < self.vocab_size:
            raise ValueError(
                f"eos_id {self.eos_id} outside [0, {self.vocab_size})"
            )

    def stream_rng(self, offset: int = 0) -> np.random.Generator:
        """Independent deterministic stream derived from the model seed."""
        return np.random.default_rng((self.seed, offset))

    def confidence_matrix(self, n_tokens: int, rng: np.random.Generator) -> np.ndarray:
        """Sample an (n_tokens, n_layers) block of confidences only."""
        return _draw_confidences(self, n_tokens, rng)


def distort(model: SyntheticConfidenceModel, sigma: float) -> SyntheticConfidenceModel:
    """Copy of ``model`` at a new distortion level, all else unchanged."""
    return dataclasses.replace(model, sigma=sigma)


def _draw_confidences(
    model: SyntheticConfidenceModel, n_tokens: int, rng: np.random.Generator
) -> np.ndarray:
    # Draw order is part of the stream contract: difficulty, clean mask,
    # ceiling jitter, layer noise.  Tests pin stream content by seed.
    if n_tokens < 1:
        raise ValueError(f"n_tokens must be >= 1, got {n_tokens}")
    difficulty = rng.uniform(model.difficulty_low, model.difficulty_high, n_tokens)
    clean = rng.random(n_tokens) < model.clean_fraction
    ceiling_jitter = rng.normal(0.0, 1.0, n_tokens)
    noise = rng.normal(0.0, model.noise_scale, (n_tokens, model.n_layers))
    layer_index = np.arange(1, model.n_layers + 1, dtype=float)
    rise = model.growth * (layer_index[None, :] - difficulty[:, None])
    center_logit = math.log(model.ceiling_center / (1.0 - model.ceiling_center))
    ceiling = (
        center_logit
        + model.ceiling_spread * ceiling_jitter
        - model.sigma * model.ceiling_drop_rate
    )
    ceiling = np.where(clean, np.inf, ceiling)
    z = (
        np.minimum(rise, ceiling[:, None])
        - model.sigma * model.base_drop_rate
        + noise
    )
    return np.clip(_sigmoid(z), 0.0, 1.0)


@dataclass(frozen=True)
class TraceBatch:
    """Vectorized block of sampled tokens: confidences, per-layer token
    ids, and the true target id per token."""

    confidences: np.ndarray  # (n, N) float64 in [0, 1]
    token_ids: np.ndarray  # (n, N) int64
    targets: np.ndarray  # (n,) int64

    def __len__(self) -> int:
        return self.confidences.shape[0]

    def trace(self, index: int) -> TokenTrace:
        return TokenTrace.from_arrays(
            self.confidences[index], self.token_ids[index]
        )


def sample_batch(
    model: SyntheticConfidenceModel, n_tokens: int, rng: np.random.Generator
) -> TraceBatch:
    """Draw ``n_tokens`` independent tokens from the model.

    Per-layer token ids are consistent: one wrong guess per token, and a
    layer emits the true target iff a single per-token uniform falls
    under its confidence, so correctness is monotone in confidence.
    Wrong guesses never use the eos id, keeping caption lengths governed
    by ``eos_prob`` alone.
    """
    conf = _draw_confidences(model, n_tokens, rng)
    v = model.vocab_size
    u_correct = rng.random(n_tokens)
    is_eos = rng.random(n_tokens) < model.eos_prob
    nominal = rng.integers(1, v, n_tokens)  # non-eos candidate targets
    targets = np.where(is_eos, model.eos_id, nominal)
    wrong = rng.integers(1, v, n_tokens)
    collide = wrong == targets
    wrong = np.where(collide, 1 + (wrong % (v - 1)), wrong)
    correct = u_correct[:, None] < conf
    token_ids = np.where(correct, targets[:, None], wrong[:, None])
    return TraceBatch(
        confidences=conf,
        token_ids=token_ids.astype(np.int64),
        targets=targets.astype(np.int64),
    )


def sample_trace(
    model: SyntheticConfidenceModel, rng: np.random.Generator
) -> TokenTrace:
    """Draw a single token trace."""
    return sample_batch(model, 1, rng).trace(0)


@dataclass(frozen=True)
class ImageTraces:
    """One image's token traces, with true targets when known.

    This is both the unit the caption loop consumes and the record type
    of the trace file format.  ``targets`` is None for corpora exported
    without reference tokens; accuracy metrics are then unavailable.
    """

    image_id: int | str
    traces: tuple[TokenTrace, ...]
    targets: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        if not self.traces:
            raise ValueError(f"image {self.image_id!r} has no traces")
        if self.targets is not None and len(self.targets) != len(self.traces):
            raise ValueError(
                f"image {self.image_id!r}: {len(self.targets)} targets vs "
                f"{len(self.traces)} traces"
            )

    def __len__(self) -> int:
        return len(self.traces)


def sample_image(
    model: SyntheticConfidenceModel,
    rng: np.random.Generator,
    max_len: int = DEFAULT_MAX_CAPTION_LENGTH,
    image_id: int | str = 0,
) -> ImageTraces:
    """Draw one image: ``max_len`` token positions with targets.

    The caption loop decides where the caption actually ends (emitted
    eos or the cap); generating the full block up front lets several
    policies replay the identical image.
    """
    batch = sample_batch(model, max_len, rng)
    return ImageTraces(
        image_id=image_id,
        traces=tuple(batch.trace(i) for i in range(max_len)),
        targets=tuple(int(t) for t in batch.targets),
    )


def image_stream(
    model: SyntheticConfidenceModel,
    rng: np.random.Generator,
    max_len: int = DEFAULT_MAX_CAPTION_LENGTH,
    start_id: int = 0,
) -> Iterator[ImageTraces]:
    """Endless stream of freshly sampled images with increasing ids."""
    image_id = start_id
    while True:
        yield sample_image(model, rng, max_len, image_id)
        image_id += 1


def token_stream(
    model: SyntheticConfidenceModel,
    rng: np.random.Generator,
    block: int = 4096,
) -> Iterator[TokenTrace]:
    """Endless stream of single token traces, sampled in blocks."""
    while True:
        batch = sample_batch(model, block, rng)
        for i in range(block):
            yield batch.trace(i)


# ---------------------------------------------------------------------------
# Trace file format
# ---------------------------------------------------------------------------
#
# Line 1 (header):   exitsim-traces <version> layers=<N> vocab=<V> source=<tag>
# Lines 2..:         <image_id> <T> <token fields> ...
#
# Each of the T token groups is one target field followed by N layer
# fields.  The target field is the true token id, or "-" when unknown.
# A layer field is "<confidence>:<token_id>" with the confidence printed
# to 17 significant digits, which round-trips IEEE-754 doubles exactly.
# Fields are separated by single spaces; one image per line.


@dataclass(frozen=True)
class TraceFileHeader:
    version: int
    n_layers: int
    vocab_size: int
    source: str


def _validate_image(
    image: ImageTraces, n_layers: int, vocab_size: int
) -> None:
    ident = str(image.image_id)
    if not ident or any(ch.isspace() for ch in ident):
        raise ValueError(f"image id {ident!r} is empty or contains whitespace")
    for trace in image.traces:
        if trace.n_layers != n_layers:
            raise ValueError(
                f"image {ident}: trace has {trace.n_layers} layers, file "
                f"header says {n_layers}"
            )
        for layer in trace.layers:
            if layer.token_id >= vocab_size:
                raise ValueError(
                    f"image {ident}: token id {layer.token_id} >= vocab "
                    f"size {vocab_size}"
                )
    if image.targets is not None:
        for t in image.targets:
            if not 0 <= t < vocab_size:
                raise ValueError(
                    f"image {ident}: target {t} outside [0, {vocab_size})"
                )


def write_traces(
    path: str,
    images: Iterable[ImageTraces],
    n_layers: int,
    vocab_size: int,
    source: str = "synthetic",
) -> int:
    """Write images to ``path`` in the trace file format; returns the count."""
    if not source or any(ch.isspace() for ch in source):
        raise ValueError(f"source tag {source!r} is empty or contains whitespace")
    count = 0
    with open(path, "w", encoding="ascii") as fh:
        fh.write(
            f"{FORMAT_NAME} {FORMAT_VERSION} layers={n_layers} "
            f"vocab={vocab_size} source={source}\n"
        )
        for image in images:
            _validate_image(image, n_layers, vocab_size)
            fields = [str(image.image_id), str(len(image.traces))]
            for pos, trace in enumerate(image.traces):
                if image.targets is None:
                    fields.append("-")
                else:
                    fields.append(str(image.targets[pos]))
                for layer in trace.layers:
                    fields.append(f"{layer.confidence:.17g}:{layer.token_id}")
            fh.write(" ".join(fields) + "\n")
            count += 1
    return count


def read_header(path: str) -> TraceFileHeader:
    with open(path, "r", encoding="ascii") as fh:
        return _parse_header(fh.readline())


def _parse_header(line: str) -> TraceFileHeader:
    parts = line.split()
    if len(parts) != 5 or parts[0] != FORMAT_NAME:
        raise TraceFormatError(
            f"line 1: expected '{FORMAT_NAME} <version> layers=... vocab=... "
            f"source=...', got {line.strip()!r}"
        )
    try:
        version = int(parts[1])
    except ValueError:
        raise TraceFormatError(f"line 1: version {parts[1]!r} is not an integer")
    if version != FORMAT_VERSION:
        raise TraceFormatError(
            f"line 1: unsupported trace format version {version} "
            f"(this reader handles version {FORMAT_VERSION})"
        )
    values = {}
    for field, key in zip(parts[2:], ("layers", "vocab", "source")):
        prefix = key + "="
        if not field.startswith(prefix):
            raise TraceFormatError(
                f"line 1: expected field '{key}=...', got {field!r}"
            )
        values[key] = field[len(prefix):]
    try:
        n_layers = int(values["layers"])
        vocab_size = int(values["vocab"])
    except ValueError:
        raise TraceFormatError(
            f"line 1: layers/vocab must be integers, got "
            f"{values['layers']!r}/{values['vocab']!r}"
        )
    if n_layers < 2 or vocab_size < 2:
        raise TraceFormatError(
            f"line 1: layers={n_layers} vocab={vocab_size} out of range"
        )
    return TraceFileHeader(version, n_layers, vocab_size, values["source"])


def _parse_image_line(
    line: str, lineno: int, header: TraceFileHeader
) -> ImageTraces:
    fields = line.split()
    n = header.n_layers
    if len(fields) < 2:
        raise TraceFormatError(
            f"line {lineno}: expected '<image_id> <n_tokens> ...', got "
            f"{line.strip()!r}"
        )
    image_id = fields[0]
    try:
        n_tokens = int(fields[1])
    except ValueError:
        raise TraceFormatError(
            f"line {lineno}: token count {fields[1]!r} is not an integer"
        )
    if n_tokens < 1:
        raise TraceFormatError(f"line {lineno}: token count must be >= 1")
    expected = 2 + n_tokens * (1 + n)
    if len(fields) != expected:
        raise TraceFormatError(
            f"line {lineno}: expected {expected} fields for {n_tokens} tokens "
            f"of {n} layers, got {len(fields)}"
        )
    traces: list[TokenTrace] = []
    targets: list[int | None] = []
    pos = 2
    for tok in range(n_tokens):
        raw_target = fields[pos]
        pos += 1
        if raw_target == "-":
            targets.append(None)
        else:
            try:
                target = int(raw_target)
            except ValueError:
                raise TraceFormatError(
                    f"line {lineno}: token {tok + 1} target {raw_target!r} "
                    f"is not an integer"
                )
            if not 0 <= target < header.vocab_size:
                raise TraceFormatError(
                    f"line {lineno}: token {tok + 1} target {target} outside "
                    f"[0, {header.vocab_size})"
                )
            targets.append(target)
        confs: list[float] = []
        ids: list[int] = []
        for layer in range(n):
            field = fields[pos]
            pos += 1
            conf_s, sep, id_s = field.partition(":")
            if not sep:
                raise TraceFormatError(
                    f"line {lineno}: token {tok + 1} layer {layer + 1} field "
                    f"{field!r} is not '<confidence>:<token_id>'"
                )
            try:
                conf = float(conf_s)
                token_id = int(id_s)
            except ValueError:
                raise TraceFormatError(
                    f"line {lineno}: token {tok + 1} layer {layer + 1} field "
                    f"{field!r} has a malformed number"
                )
            if not 0.0 <= conf <= 1.0:
                raise TraceFormatError(
                    f"line {lineno}: token {tok + 1} layer {layer + 1} "
                    f"confidence {conf!r} outside [0, 1]"
                )
            if not 0 <= token_id < header.vocab_size:
                raise TraceFormatError(
                    f"line {lineno}: token {tok + 1} layer {layer + 1} token "
                    f"id {token_id} outside [0, {header.vocab_size})"
                )
            confs.append(conf)
            ids.append(token_id)
        traces.append(TokenTrace.from_arrays(confs, ids))
    known = [t for t in targets if t is not None]
    if known and len(known) != n_tokens:
        raise TraceFormatError(
            f"line {lineno}: targets must be present for all tokens or none"
        )
    return ImageTraces(
        image_id=image_id,
        traces=tuple(traces),
        targets=tuple(known) if known else None,
    )


def read_traces(path: str) -> Iterator[ImageTraces]:
    """Stream images from a trace file, validating as it goes.

    Raises TraceFormatError with a line number on any malformed record,
    and rejects files written by unknown future format versions.
    """
    with open(path, "r", encoding="ascii") as fh:
        header = _parse_header(fh.readline())
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            yield _parse_image_line(line, lineno, header)
