"""Dense float64 arithmetic, the parameter store and gradient checking.

Loss functions used throughout the package follow one calling convention::

    loss_fn(params, backward=True) -> (loss, grads)

``grads`` maps tensor names to arrays shaped like the tensors (missing names
mean a zero gradient). With ``backward=False`` the function may skip the
reverse pass and return ``(loss, None)``.
"""

from __future__ import annotations

from collections.abc import Callable, Iterable, Iterator, Mapping

import numpy as np

from .errors import DivergenceError, ShapeError

LossFn = Callable[..., tuple[float, "Mapping[str, np.ndarray] | None"]]


def as_matrix(values, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Return ``values`` as a read-only 2-D float64 array."""
    m = np.array(values, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1) if rows is None else m.reshape(rows, -1)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    if rows is not None and cols is not None and m.shape != (rows, cols):
        raise ShapeError(f"expected shape {(rows, cols)}, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix has non-finite entries")
    m.setflags(write=False)
    return m


def matmul(lhs: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    lhs = np.asarray(lhs, dtype=np.float64)
    rhs = np.asarray(rhs, dtype=np.float64)
    if lhs.ndim != 2 or rhs.ndim != 2 or lhs.shape[1] != rhs.shape[0]:
        raise ShapeError(f"cannot multiply {lhs.shape} by {rhs.shape}")
    return lhs @ rhs


class ParamStore:
    """Named float64 tensors with trainable flags and gradient buffers.

    Every tensor owns a gradient buffer of its own shape. Only trainable
    tensors ever receive writes into it, so frozen buffers stay exactly zero.
    """

    def __init__(self) -> None:
        self.tensors: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, name: str, value, trainable: bool = True) -> np.ndarray:
        if name in self.tensors:
            raise KeyError(f"tensor {name!r} already exists")
        arr = np.array(value, dtype=np.float64)
        self.tensors[name] = arr
        self.grads[name] = np.zeros_like(arr)
        self._trainable[name] = bool(trainable)
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.tensors if n.startswith(prefix)]

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def trainable_names(self) -> list[str]:
        return [n for n, flag in self._trainable.items() if flag]

    def set_trainable(self, names: Iterable[str] | str, flag: bool) -> None:
        if isinstance(names, str):
            names = [names]
        for n in names:
            if n not in self.tensors:
                raise KeyError(n)
            self._trainable[n] = bool(flag)

    def freeze_all(self) -> None:
        for n in self._trainable:
            self._trainable[n] = False

    def only_trainable(self, names: Iterable[str]) -> None:
        """Freeze everything except ``names``."""
        self.freeze_all()
        self.set_trainable(list(names), True)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def accumulate(self, name: str, grad: np.ndarray) -> None:
        if not self._trainable[name]:
            return
        buf = self.grads[name]
        if buf.shape != np.shape(grad):
            raise ShapeError(f"gradient for {name!r} has shape {np.shape(grad)}, expected {buf.shape}")
        buf += grad

    def count(self, trainable_only: bool = False) -> int:
        return int(
            sum(t.size for n, t in self.tensors.items() if self._trainable[n] or not trainable_only)
        )

    def snapshot(self, names: Iterable[str] | None = None) -> dict[str, bytes]:
        names = self.tensors if names is None else names
        return {n: self.tensors[n].tobytes() for n in names}


def loss_and_grads(loss_fn: LossFn, params: ParamStore) -> tuple[float, dict[str, np.ndarray]]:
    """Evaluate ``loss_fn`` and accumulate its gradient into ``params``.

    Returns the loss and a copy of the gradient contribution for every
    trainable tensor. Buffers are not zeroed first.
    """
    loss, grads = loss_fn(params, backward=True)
    loss = float(loss)
    if not np.isfinite(loss):
        raise DivergenceError(f"non-finite loss {loss!r}")
    grads = grads or {}
    out = {}
    for name in params.trainable_names():
        g = grads.get(name)
        g = np.zeros_like(params[name]) if g is None else np.asarray(g, dtype=np.float64)
        params.accumulate(name, g)
        out[name] = g.copy()
    return loss, out


def finite_diff_check(loss_fn: LossFn, params: ParamStore, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Error per scalar is ``|analytic - numeric| / max(1, |numeric|)``, taken
    over every element of every trainable tensor. Tensors are restored
    exactly after each probe.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    _, grads = loss_fn(params, backward=True)
    grads = grads or {}
    worst = 0.0
    for name in params.trainable_names():
        w = params.tensors[name]
        analytic = grads.get(name)
        analytic = np.zeros_like(w) if analytic is None else np.asarray(analytic)
        flat = w.reshape(-1)
        flat_g = analytic.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + step
            f_plus = loss_fn(params, backward=False)[0]
            flat[idx] = orig - step
            f_minus = loss_fn(params, backward=False)[0]
            flat[idx] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            err = abs(flat_g[idx] - numeric) / max(1.0, abs(numeric))
            if err > worst:
                worst = err
    return float(worst)
