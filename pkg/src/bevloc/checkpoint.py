"""Named-parameter container and the text checkpoint format.

Checkpoints are a versioned, line-oriented text format: a header line,
then per array one `name <name> shape <d0> <d1> ...` line followed by the
values with full repr precision (lossless round-trip, diff-able).
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, parameter

HEADER = "bevloc-params v1"


class ParamSet:
    """Ordered mapping name -> trainable Tensor, flat-vector addressable."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, array) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = parameter(np.asarray(array, dtype=np.float64))
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    @property
    def size(self) -> int:
        return sum(t.size for t in self._params.values())

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def to_vector(self) -> np.ndarray:
        return np.concatenate([t.data.ravel() for t in self._params.values()])

    def from_vector(self, vec: np.ndarray):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.size:
            raise ValueError(f"expected {self.size} values, got {vec.size}")
        i = 0
        for t in self._params.values():
            n = t.size
            t.data = vec[i : i + n].reshape(t.shape).copy()
            i += n

    def grad_vector(self) -> np.ndarray:
        parts = []
        for t in self._params.values():
            g = t.grad if t.grad is not None else np.zeros(t.shape)
            parts.append(np.asarray(g, dtype=np.float64).ravel())
        return np.concatenate(parts)

    def slice_of(self, name: str) -> slice:
        """Flat-vector slice covering one named array."""
        i = 0
        for n, t in self._params.items():
            if n == name:
                return slice(i, i + t.size)
            i += t.size
        raise KeyError(name)

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for name, t in self._params.items():
            out.add(name, t.data.copy())
        return out


def save_params(params: ParamSet, path):
    lines = [HEADER]
    for name, t in params.items():
        dims = " ".join(str(d) for d in t.shape) if t.ndim else "scalar"
        lines.append(f"name {name} shape {dims}")
        lines.append(" ".join(repr(float(v)) for v in t.data.ravel()))
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def load_params(path) -> ParamSet:
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines or lines[0] != HEADER:
        raise ValueError(f"not a checkpoint file (missing {HEADER!r} header)")
    out = ParamSet()
    i = 1
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        head = lines[i].split()
        if head[0] != "name" or "shape" not in head:
            raise ValueError(f"malformed checkpoint line: {lines[i]!r}")
        name = head[1]
        shape_tokens = head[head.index("shape") + 1 :]
        shape = () if shape_tokens == ["scalar"] else tuple(int(s) for s in shape_tokens)
        vals = np.array([float(v) for v in lines[i + 1].split()], dtype=np.float64)
        out.add(name, vals.reshape(shape))
        i += 2
    return out
