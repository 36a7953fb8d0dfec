"""
Siamese verification over flattened face models.

Both inputs go through the same fully connected map G_W (tanh hidden layers,
linear embedding). The energy of a pair is the Euclidean distance between
embeddings, and the loss is

    Y * (2/Q) E^2  +  (1 - Y) * 2Q exp(-2.77 E / Q)

with Y = 1 for same-person pairs. Training is plain minibatch gradient
descent on the mean pair loss.
"""

import logging
import math
import struct
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import DataError, DimensionMismatchError, ModelFormatError
from .face_model import FlatWeights

logger = logging.getLogger(__name__)

DIFF_LOSS_RATE = 2.77

NET_MAGIC = b"NSIA"
NET_FORMAT_VERSION = 1
# magic, version (u16), number of layer sizes (u32), 6 reserved bytes
_HEADER = struct.Struct("<4sHI6s")


@dataclass(frozen=True)
class SiameseConfig:
    q: float = 5.0
    learning_rate: float = 0.01
    epochs: int = 200
    batch_size: int = 64
    seed: int = 0
    layer_sizes: Tuple[int, ...] = (256, 64, 16)

    def __post_init__(self):
        if not self.q > 0:
            raise DataError("siamese: Q must be positive")
        if not self.learning_rate > 0:
            raise DataError("siamese: learning_rate must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise DataError("siamese: epochs and batch_size must be >= 1")
        if not self.layer_sizes or any(int(s) < 1 for s in self.layer_sizes):
            raise DataError("siamese: layer sizes must be positive")
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))


@dataclass
class SiameseNet:
    """
    layer_sizes = (input, hidden..., embedding). weights[k] has shape
    (layer_sizes[k + 1], layer_sizes[k]).
    """

    layer_sizes: Tuple[int, ...]
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    q: float = 5.0
    threshold: float = 0.0

    def __post_init__(self):
        self.layer_sizes = tuple(int(s) for s in self.layer_sizes)
        if len(self.layer_sizes) < 2:
            raise DataError("siamese: a network needs an input and an embedding layer")
        if len(self.weights) != len(self.layer_sizes) - 1 or len(self.biases) != len(self.weights):
            raise DataError("siamese: one weight matrix and bias per layer transition")
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            expected = (self.layer_sizes[k + 1], self.layer_sizes[k])
            if w.shape != expected or b.shape != (expected[0],):
                raise DataError(f"siamese: layer {k} has shape {w.shape}, expected {expected}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise DataError(f"siamese: layer {k} has non-finite weights")

    @property
    def input_size(self) -> int:
        return self.layer_sizes[0]

    @property
    def embedding_size(self) -> int:
        return self.layer_sizes[-1]

    @classmethod
    def initialize(cls, layer_sizes: Sequence[int], seed: int, q: float = 5.0) -> "SiameseNet":
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            bound = 1.0 / math.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
            biases.append(rng.uniform(-bound, bound, size=fan_out))
        return cls(tuple(layer_sizes), weights, biases, q=q)

    @classmethod
    def zeros(cls, layer_sizes: Sequence[int], q: float = 5.0) -> "SiameseNet":
        weights = [np.zeros((o, i)) for i, o in zip(layer_sizes[:-1], layer_sizes[1:])]
        biases = [np.zeros(o) for o in layer_sizes[1:]]
        return cls(tuple(layer_sizes), weights, biases, q=q)

    def parameters(self) -> List[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def copy(self) -> "SiameseNet":
        return SiameseNet(
            self.layer_sizes,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.q,
            self.threshold,
        )


@dataclass(frozen=True, eq=False)
class LabeledPair:
    a: FlatWeights
    b: FlatWeights
    label: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise DataError(f"siamese: pair label must be 0 or 1, got {self.label}")
        if len(self.a) != len(self.b):
            raise DimensionMismatchError("siamese: pair members differ in length")


@dataclass
class SiameseHistory:
    train_loss: List[float] = field(default_factory=list)
    test_loss: List[float] = field(default_factory=list)
    test_accuracy: List[float] = field(default_factory=list)


def _as_matrix(net: SiameseNet, inputs) -> np.ndarray:
    if isinstance(inputs, FlatWeights):
        inputs = inputs.values
    matrix = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    if matrix.shape[1] != net.input_size:
        raise DimensionMismatchError(
            f"siamese: input of length {matrix.shape[1]}, network expects {net.input_size}"
        )
    return matrix


def _forward(net: SiameseNet, inputs: np.ndarray) -> List[np.ndarray]:
    """Activations per layer, the input first and the embedding last."""
    activations = [inputs]
    last = len(net.weights) - 1
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        pre = activations[-1] @ w.T + b
        activations.append(pre if k == last else np.tanh(pre))
    return activations


def embed_batch(net: SiameseNet, inputs) -> np.ndarray:
    return _forward(net, _as_matrix(net, inputs))[-1]


def embed(net: SiameseNet, p) -> np.ndarray:
    return embed_batch(net, p)[0]


def energy(e1: np.ndarray, e2: np.ndarray) -> float:
    e1 = np.asarray(e1, dtype=np.float64)
    e2 = np.asarray(e2, dtype=np.float64)
    if e1.shape != e2.shape:
        raise DimensionMismatchError(f"siamese: embeddings differ in shape {e1.shape} vs {e2.shape}")
    return float(np.linalg.norm(e1 - e2))


def pair_loss(e, y, q: float):
    """Same-person loss (2/Q) E^2 when y = 1, different-person loss 2Q exp(-2.77 E/Q) when y = 0."""
    e = np.asarray(e, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    same = (2.0 / q) * e ** 2
    different = 2.0 * q * np.exp(-(DIFF_LOSS_RATE / q) * e)
    loss = y * same + (1.0 - y) * different
    return float(loss) if loss.ndim == 0 else loss


def pair_arrays(pairs: Sequence[LabeledPair]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    if not pairs:
        raise DataError("siamese: no pairs given")
    first = np.stack([p.a.values for p in pairs])
    second = np.stack([p.b.values for p in pairs])
    labels = np.array([p.label for p in pairs], dtype=np.float64)
    return first, second, labels


def pair_energies(net: SiameseNet, first: np.ndarray, second: np.ndarray) -> np.ndarray:
    embedded_first = embed_batch(net, first)
    embedded_second = embed_batch(net, second)
    return np.linalg.norm(embedded_first - embedded_second, axis=1)


def loss_and_gradients(net: SiameseNet, first: np.ndarray, second: np.ndarray,
                       labels: np.ndarray) -> Tuple[float, List[np.ndarray], List[np.ndarray]]:
    """
    Mean pair loss and its gradients. Both branches run as one stacked batch
    through the shared weights, so their gradient contributions add up.
    """
    first = _as_matrix(net, first)
    second = _as_matrix(net, second)
    batch = first.shape[0]
    q = net.q

    activations = _forward(net, np.vstack([first, second]))
    difference = activations[-1][:batch] - activations[-1][batch:]
    e = np.linalg.norm(difference, axis=1)
    loss = float(np.mean(pair_loss(e, labels, q)))

    # dL/d(difference): the same-person term is smooth at E = 0; the
    # different-person term has no direction there and contributes nothing.
    decay = np.exp(-(DIFF_LOSS_RATE / q) * e)
    safe_e = np.where(e > 0, e, 1.0)
    coefficient = labels * (4.0 / q) + (1.0 - labels) * np.where(
        e > 0, -2.0 * DIFF_LOSS_RATE * decay / safe_e, 0.0
    )
    grad_difference = coefficient[:, None] * difference / batch

    grad = np.vstack([grad_difference, -grad_difference])
    weight_grads: List[np.ndarray] = [None] * len(net.weights)
    bias_grads: List[np.ndarray] = [None] * len(net.weights)
    last = len(net.weights) - 1
    for k in range(last, -1, -1):
        if k != last:
            grad = grad * (1.0 - activations[k + 1] ** 2)
        weight_grads[k] = grad.T @ activations[k]
        bias_grads[k] = grad.sum(axis=0)
        if k > 0:
            grad = grad @ net.weights[k]
    return loss, weight_grads, bias_grads


def mean_loss(net: SiameseNet, pairs: Sequence[LabeledPair]) -> float:
    first, second, labels = pair_arrays(pairs)
    return float(np.mean(pair_loss(pair_energies(net, first, second), labels, net.q)))


def accuracy(net: SiameseNet, pairs: Sequence[LabeledPair], threshold: float) -> float:
    first, second, labels = pair_arrays(pairs)
    decisions = pair_energies(net, first, second) < threshold
    return float(np.mean(decisions == (labels == 1)))


def best_threshold(scores, labels) -> Tuple[float, float]:
    """
    Threshold with the highest accuracy for the rule "same iff score < t",
    searched over midpoints between observed scores and both extremes.
    Returns (threshold, accuracy). When a run of neighbouring candidates ties
    for the best accuracy, the threshold sits in the middle of the first run.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(labels) == 1
    unique = np.unique(scores)
    candidates = np.concatenate([
        unique[:1],
        (unique[:-1] + unique[1:]) / 2.0,
        [np.nextafter(unique[-1], np.inf)],
    ])
    accepted_positive = np.searchsorted(np.sort(scores[positive]), candidates, side="left")
    accepted_negative = np.searchsorted(np.sort(scores[~positive]), candidates, side="left")
    negatives = int(np.count_nonzero(~positive))
    accuracies = (accepted_positive + (negatives - accepted_negative)) / len(scores)
    best = int(np.argmax(accuracies))
    last = best
    while last + 1 < len(candidates) and accuracies[last + 1] == accuracies[best]:
        last += 1
    if np.isfinite(candidates[last]):
        threshold = (candidates[best] + candidates[last]) / 2.0
    else:
        threshold = candidates[best]
    return float(threshold), float(accuracies[best])


class SiameseTrainer:
    """Owns the network while it trains; the threshold is fixed on the training pairs."""

    def __init__(self, config: Optional[SiameseConfig] = None, initial: Optional[SiameseNet] = None):
        self.config = config or SiameseConfig()
        self.initial = initial
        self.net: Optional[SiameseNet] = None
        self.history = SiameseHistory()

    def _start(self, input_size: int) -> SiameseNet:
        config = self.config
        if self.initial is None:
            return SiameseNet.initialize((input_size,) + config.layer_sizes, config.seed, q=config.q)
        net = self.initial.copy()
        if net.input_size != input_size:
            raise DimensionMismatchError(
                f"siamese: pairs have length {input_size}, network expects {net.input_size}"
            )
        net.q = config.q
        return net

    def train(self, pairs: Sequence[LabeledPair],
              test_pairs: Optional[Sequence[LabeledPair]] = None) -> SiameseNet:
        config = self.config
        first, second, labels = pair_arrays(pairs)
        net = self._start(first.shape[1])
        self.net = net
        self.history = SiameseHistory()

        rng = np.random.default_rng(config.seed)
        count = len(labels)

        for epoch in range(1, config.epochs + 1):
            order = rng.permutation(count)
            epoch_loss = 0.0
            for start in range(0, count, config.batch_size):
                batch = order[start:start + config.batch_size]
                loss, weight_grads, bias_grads = loss_and_gradients(
                    net, first[batch], second[batch], labels[batch]
                )
                for k in range(len(net.weights)):
                    net.weights[k] -= config.learning_rate * weight_grads[k]
                    net.biases[k] -= config.learning_rate * bias_grads[k]
                epoch_loss += loss * len(batch)

            self.history.train_loss.append(epoch_loss / count)
            if test_pairs:
                threshold, _ = best_threshold(pair_energies(net, first, second), labels)
                self.history.test_loss.append(mean_loss(net, test_pairs))
                self.history.test_accuracy.append(accuracy(net, test_pairs, threshold))
            logger.debug("siamese: epoch %d loss %.4f", epoch, self.history.train_loss[-1])

        net.threshold, train_accuracy = best_threshold(pair_energies(net, first, second), labels)
        logger.info(
            "siamese: trained %d epochs, final loss %.4f, training accuracy %.3f at threshold %.4f",
            config.epochs, self.history.train_loss[-1], train_accuracy, net.threshold,
        )
        return net

    def get_net(self) -> Optional[SiameseNet]:
        return self.net

    def get_history(self) -> SiameseHistory:
        return self.history


def train_siamese(pairs: Sequence[LabeledPair], config: Optional[SiameseConfig] = None,
                  test_pairs: Optional[Sequence[LabeledPair]] = None,
                  initial: Optional[SiameseNet] = None) -> Tuple[SiameseNet, SiameseHistory]:
    trainer = SiameseTrainer(config, initial)
    net = trainer.train(pairs, test_pairs)
    return net, trainer.get_history()


def verify(net: SiameseNet, p1, p2, threshold: Optional[float] = None) -> Tuple[bool, float]:
    """Same person iff the energy is below the threshold."""
    if threshold is None:
        threshold = net.threshold
    score = energy(embed(net, p1), embed(net, p2))
    return score < threshold, score


def to_bytes(net: SiameseNet) -> bytes:
    parts = [
        _HEADER.pack(NET_MAGIC, NET_FORMAT_VERSION, len(net.layer_sizes), b"\x00" * 6),
        np.asarray(net.layer_sizes, dtype="<u4").tobytes(),
        np.array([net.q, net.threshold], dtype="<f8").tobytes(),
    ]
    for w, b in zip(net.weights, net.biases):
        parts.append(w.astype("<f8").tobytes())
        parts.append(b.astype("<f8").tobytes())
    return b"".join(parts)


def from_bytes(data: bytes, source: str = "<bytes>") -> SiameseNet:
    if len(data) < _HEADER.size:
        raise ModelFormatError(f"siamese: {source} is truncated (no complete header)")
    magic, version, layer_count, _ = _HEADER.unpack_from(data)
    if magic != NET_MAGIC:
        raise ModelFormatError(f"siamese: {source} has bad magic {magic!r}")
    if version != NET_FORMAT_VERSION:
        raise ModelFormatError(f"siamese: {source} has format version {version}")
    if layer_count < 2:
        raise ModelFormatError(f"siamese: {source} declares {layer_count} layers")

    offset = _HEADER.size
    sizes_end = offset + 4 * layer_count
    if len(data) < sizes_end + 16:
        raise ModelFormatError(f"siamese: {source} is truncated")
    layer_sizes = tuple(int(s) for s in np.frombuffer(data[offset:sizes_end], dtype="<u4"))
    q, threshold = np.frombuffer(data[sizes_end:sizes_end + 16], dtype="<f8")
    offset = sizes_end + 16

    expected = sum(8 * (i * o + o) for i, o in zip(layer_sizes[:-1], layer_sizes[1:]))
    if len(data) - offset != expected:
        raise ModelFormatError(
            f"siamese: {source} holds {len(data) - offset} weight bytes, layers need {expected}"
        )

    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        size = fan_in * fan_out
        weights.append(np.frombuffer(data, dtype="<f8", count=size, offset=offset)
                       .reshape(fan_out, fan_in).astype(np.float64))
        offset += 8 * size
        biases.append(np.frombuffer(data, dtype="<f8", count=fan_out, offset=offset).astype(np.float64))
        offset += 8 * fan_out
    return SiameseNet(layer_sizes, weights, biases, float(q), float(threshold))


def save_net(net: SiameseNet, path: str) -> None:
    with open(path, "wb") as f:
        f.write(to_bytes(net))


def load_net(path: str) -> SiameseNet:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except FileNotFoundError:
        raise ModelFormatError(f"siamese: network file not found: {path}") from None
    return from_bytes(data, source=path)
