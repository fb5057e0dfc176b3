"""Named parameter storage, the SSEG1 checkpoint format, and gradient checking."""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from .tensor import Tensor, no_grad

MAGIC = b"SSEG1"


class ParamStore:
    """Ordered mapping of parameter name to a trainable :class:`Tensor`."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def grad(self, name: str) -> np.ndarray:
        p = self._params[name]
        return np.zeros_like(p.data) if p.grad is None else p.grad

    def num_values(self) -> int:
        return sum(p.data.size for p in self._params.values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)}")
        for k, p in self._params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {p.data.shape}")
            p.data = arr.copy()


# ---------------------------------------------------------------- checkpoint

def dumps_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    """Serialize named arrays: magic, then per tensor name-len, name, rank, dims, values."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")  # ascontiguousarray would promote 0-d to 1-d
        raw = name.encode("utf-8")
        buf.write(struct.pack("<Q", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<Q", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    return buf.getvalue()


def loads_tensors(data: bytes) -> dict[str, np.ndarray]:
    if not data.startswith(MAGIC):
        raise ValueError("not an SSEG1 checkpoint")
    pos = len(MAGIC)
    out: dict[str, np.ndarray] = {}

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise ValueError("truncated checkpoint")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    while pos < len(data):
        (name_len,) = struct.unpack("<Q", take(8))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<Q", take(8))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank)) if rank else ()
        count = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64).reshape(dims)
        out[name] = arr
    return out


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps_tensors(tensors))


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    return loads_tensors(Path(path).read_bytes())


# ------------------------------------------------------------- gradient check

@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    worst_index: tuple
    n_coords: int
    tolerance: float
    below_noise: int = 0  # coordinates where both gradients sit under the difference noise floor
    noise_floor: float = 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def as_dict(self) -> dict:
        return {
            "max_rel_error": float(self.max_rel_error),
            "worst_param": self.worst_param,
            "worst_index": list(self.worst_index),
            "n_coords": self.n_coords,
            "tolerance": self.tolerance,
            "below_noise": self.below_noise,
            "noise_floor": self.noise_floor,
            "passed": bool(self.passed),
        }


def grad_check(
    f: Callable[[], Tensor],
    params: ParamStore,
    tolerance: float = 1e-4,
    step: float = 1e-5,
    names: list[str] | None = None,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f`` with central differences.

    ``f`` must rebuild its graph from the current parameter values on every
    call.  Relative error per coordinate is
    ``|g_ad - g_fd| / (|g_ad| + |g_fd| + 1e-12)``.  A central difference cannot
    resolve gradients much below ``eps * |f| / step`` (rounding in the two
    evaluations), so coordinates where both gradients fall under ten times that
    floor are counted in ``below_noise`` instead of scored.
    """
    first = float(f().data)
    floor = 10.0 * np.finfo(np.float64).eps * max(1.0, abs(first)) / step
    if float(f().data) != first:
        raise RuntimeError("grad_check: f is not deterministic")
    params.zero_grad()
    f().backward()
    worst = (0.0, "", ())
    n = quiet = 0
    for name in names or list(params):
        p = params[name]
        g_ad = params.grad(name)
        flat = p.data.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            with no_grad():
                flat[idx] = orig + step
                fp = float(f().data)
                flat[idx] = orig - step
                fm = float(f().data)
            flat[idx] = orig
            g_fd = (fp - fm) / (2 * step)
            ga = g_ad.reshape(-1)[idx]
            n += 1
            if abs(ga) + abs(g_fd) < floor:
                quiet += 1
                continue
            rel = abs(ga - g_fd) / (abs(ga) + abs(g_fd) + 1e-12)
            if rel > worst[0]:
                worst = (rel, name, np.unravel_index(idx, p.shape))
    return GradCheckReport(worst[0], worst[1], tuple(int(i) for i in worst[2]), n, tolerance, quiet, floor)
