"""Label-only decision oracles and query accounting.

An oracle answers one question: "what label does this image get?". Attacks see
nothing else (no scores, no gradients), and every answer costs one query. The
toy oracles here are small deterministic models for tests and demos; real
models are reached through the wire transports in :mod:`sparseevo.wire`.
"""
from __future__ import annotations

import abc
import math
from pathlib import Path

import numpy as np

from .container import load_image
from .image import ImageTensor, ShapeMismatchError

__all__ = [
    "BudgetExhaustedError",
    "QueryBudget",
    "DecisionOracle",
    "LinearToyOracle",
    "Mlp2ToyOracle",
    "CentroidOracle",
    "load_centroid_oracle",
    "oracle_from_spec",
]


class BudgetExhaustedError(RuntimeError):
    """Raised by QueryBudget.charge when no queries remain."""


class QueryBudget:
    """A hard cap on oracle queries, charged before each query is made.

    ``limit=None`` means unbounded. ``charge()`` raises when the budget is
    already spent, so a query that would exceed the cap is never issued.
    """

    __slots__ = ("limit", "used")

    def __init__(self, limit: int | None):
        if limit is not None and limit < 0:
            raise ValueError(f"budget limit must be non-negative, got {limit}")
        self.limit = limit
        self.used = 0

    @property
    def remaining(self) -> float:
        if self.limit is None:
            return math.inf
        return self.limit - self.used

    def charge(self) -> None:
        if self.limit is not None and self.used >= self.limit:
            raise BudgetExhaustedError(f"query budget of {self.limit} exhausted")
        self.used += 1

    def __repr__(self) -> str:
        return f"QueryBudget(used={self.used}, limit={self.limit})"


class DecisionOracle(abc.ABC):
    """Base class for label-only classifiers.

    Subclasses implement ``_decide``; ``predict`` checks the input shape,
    counts the query, and returns the top-1 label. The counter only moves for
    calls that actually reach the model, so a shape error costs nothing.
    """

    def __init__(self, channels: int, width: int, height: int, num_classes: int):
        if min(channels, width, height) < 1:
            raise ValueError("oracle input dimensions must be positive")
        if num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {num_classes}")
        self.channels = channels
        self.width = width
        self.height = height
        self.num_classes = num_classes
        self._query_count = 0

    @property
    def query_count(self) -> int:
        return self._query_count

    def predict(self, image: ImageTensor) -> int:
        expected = (self.channels, self.height, self.width)
        if image.shape != expected:
            raise ShapeMismatchError(
                f"oracle expects shape {expected} (C, H, W), got {image.shape}"
            )
        self._query_count += 1
        label = int(self._decide(image))
        if not (0 <= label < self.num_classes):
            raise ValueError(f"oracle produced label {label} outside 0..{self.num_classes - 1}")
        return label

    @abc.abstractmethod
    def _decide(self, image: ImageTensor) -> int: ...


class LinearToyOracle(DecisionOracle):
    """argmax of K fixed random linear scores; no bias, so ties break low.

    The all-zeros image scores 0 for every class and therefore gets label 0.
    """

    def __init__(self, seed: int, shape: tuple[int, int, int], num_classes: int = 10):
        channels, width, height = shape
        super().__init__(channels, width, height, num_classes)
        rng = np.random.default_rng(seed)
        self._weights = rng.standard_normal((num_classes, channels * height * width))

    def _decide(self, image: ImageTensor) -> int:
        scores = self._weights @ image.data.reshape(-1)
        return int(np.argmax(scores))


class Mlp2ToyOracle(DecisionOracle):
    """A fixed random two-layer ReLU network, for oracles with curved regions."""

    HIDDEN = 32

    def __init__(self, seed: int, shape: tuple[int, int, int], num_classes: int = 10):
        channels, width, height = shape
        super().__init__(channels, width, height, num_classes)
        rng = np.random.default_rng(seed)
        d = channels * height * width
        self._w1 = rng.standard_normal((self.HIDDEN, d)) / math.sqrt(d)
        self._b1 = 0.1 * rng.standard_normal(self.HIDDEN)
        self._w2 = rng.standard_normal((num_classes, self.HIDDEN)) / math.sqrt(self.HIDDEN)
        self._b2 = 0.1 * rng.standard_normal(num_classes)

    def _decide(self, image: ImageTensor) -> int:
        hidden = np.maximum(self._w1 @ image.data.reshape(-1) + self._b1, 0.0)
        return int(np.argmax(self._w2 @ hidden + self._b2))


class CentroidOracle(DecisionOracle):
    """Nearest-centroid classifier: label of the closest reference image.

    Squared distances are computed directly (never expanded into dot
    products), so exact ties are exact and break toward the lower class index.
    """

    def __init__(self, centroids: list[ImageTensor]):
        if len(centroids) < 2:
            raise ValueError("need at least 2 centroids")
        first = centroids[0]
        for c in centroids[1:]:
            if c.shape != first.shape:
                raise ShapeMismatchError("all centroids must share one shape")
        super().__init__(first.channels, first.width, first.height, len(centroids))
        self._stack = np.stack([c.data for c in centroids])

    @property
    def centroids(self) -> np.ndarray:
        return self._stack

    def _decide(self, image: ImageTensor) -> int:
        sq = ((self._stack - image.data[None]) ** 2).sum(axis=(1, 2, 3))
        return int(np.argmin(sq))


def load_centroid_oracle(path: str | Path) -> CentroidOracle:
    """Build a CentroidOracle from a directory of container files.

    Files are taken in sorted name order; the first becomes class 0.
    """
    path = Path(path)
    if not path.is_dir():
        raise ValueError(f"centroid path {path} is not a directory")
    files = sorted(p for p in path.iterdir() if p.is_file())
    if len(files) < 2:
        raise ValueError(f"centroid directory {path} needs at least 2 image files")
    return CentroidOracle([load_image(p) for p in files])


def oracle_from_spec(
    spec: str,
    *,
    shape: tuple[int, int, int] | None = None,
    num_classes: int | None = None,
) -> DecisionOracle:
    """Build an oracle from a selector string.

    Supported selectors::

        toy:linear:<seed>      random linear toy (needs shape)
        toy:centroid:<path>    nearest-centroid over a directory of images
        toy:mlp2:<seed>        random two-layer toy (needs shape)
        exec:<command>         spawn a subprocess speaking the line protocol
        tcp:<host>:<port>      connect to a protocol server

    ``shape`` is (C, W, H). Toy selectors other than centroid require it;
    remote oracles report their own geometry during the handshake.
    """
    kind, _, rest = spec.partition(":")
    if kind == "toy":
        family, _, arg = rest.partition(":")
        if family == "centroid":
            if not arg:
                raise ValueError("toy:centroid needs a path, e.g. toy:centroid:./centroids")
            return load_centroid_oracle(arg)
        if family in ("linear", "mlp2"):
            if not arg:
                raise ValueError(f"toy:{family} needs a seed, e.g. toy:{family}:7")
            if shape is None:
                raise ValueError(f"toy:{family} needs an input shape")
            seed = int(arg)
            classes = 10 if num_classes is None else num_classes
            cls = LinearToyOracle if family == "linear" else Mlp2ToyOracle
            return cls(seed, shape, classes)
        raise ValueError(f"unknown toy oracle family {family!r}")
    if kind == "exec":
        if not rest:
            raise ValueError("exec: needs a command line")
        from .wire import ExecTransport, RemoteOracle

        return RemoteOracle(ExecTransport(rest))
    if kind == "tcp":
        host, _, port = rest.rpartition(":")
        if not host or not port:
            raise ValueError("tcp: selector must look like tcp:host:port")
        from .wire import RemoteOracle, TcpTransport

        return RemoteOracle(TcpTransport(host, int(port)))
    raise ValueError(f"unknown oracle selector {spec!r}")
