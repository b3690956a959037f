"""Dense float64 matrices and a deterministic counter-based RNG.

Everything numerical in the package runs through these two primitives: a
thin row-major matrix wrapper that rejects non-finite entries, and a
SplitMix64 generator whose integer stream is identical across platforms,
so that seeded experiments reproduce bit for bit.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import NumericalError, ParameterError, ParseError, ShapeError

_MASK64 = (1 << 64) - 1
_INV_2_53 = 2.0 ** -53


class RngState:
    """SplitMix64 generator (Steele, Lea & Flood 2014).

    The state advances by the golden-gamma constant on every draw and the
    output is the mixed counter, so the stream is a pure function of the
    seed. Floats take the top 53 bits, giving uniforms on [0, 1).
    """

    __slots__ = ("seed", "_state", "_spare_normal")

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._state = self.seed
        self._spare_normal: float | None = None

    def next_u64(self) -> int:
        self._state = (self._state + 0x9E3779B97F4A7C15) & _MASK64
        z = self._state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def next_float(self) -> float:
        return (self.next_u64() >> 11) * _INV_2_53

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.next_float()

    def normal(self) -> float:
        """Standard normal via Box-Muller; the sine variate is cached."""
        if self._spare_normal is not None:
            z = self._spare_normal
            self._spare_normal = None
            return z
        u1 = 1.0 - self.next_float()  # (0, 1], keeps log() finite
        u2 = self.next_float()
        radius = math.sqrt(-2.0 * math.log(u1))
        self._spare_normal = radius * math.sin(2.0 * math.pi * u2)
        return radius * math.cos(2.0 * math.pi * u2)

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n) by rejection, so no modulo bias."""
        if n <= 0:
            raise ParameterError(f"randint needs n >= 1, got {n}")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            draw = self.next_u64()
            if draw < limit:
                return draw % n

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]

    def sample_indices(self, n: int, k: int) -> list[int]:
        """k distinct indices drawn uniformly from range(n), stable order of draw."""
        if not 0 <= k <= n:
            raise ParameterError(f"cannot draw {k} from {n} without replacement")
        pool = list(range(n))
        out = []
        for i in range(k):
            j = i + self.randint(n - i)
            pool[i], pool[j] = pool[j], pool[i]
            out.append(pool[i])
        return out

    def derive(self, label: str) -> "RngState":
        """Independent stream keyed by the original seed and a label (FNV-1a)."""
        h = 0xCBF29CE484222325
        for byte in label.encode("utf-8"):
            h = ((h ^ byte) * 0x100000001B3) & _MASK64
        mixed = _splitmix_finalize(self.seed ^ h)
        return RngState(mixed)


def _splitmix_finalize(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


class Matrix:
    """Dense 2-D float64 array, row-major, always finite.

    `a` is the backing numpy array; in-place updates go through it and are
    the caller's responsibility to keep finite (the optimizer re-checks).
    """

    __slots__ = ("a",)

    def __init__(self, rows: int, cols: int, data):
        if rows <= 0 or cols <= 0:
            raise ParameterError(f"matrix dims must be positive, got {rows}x{cols}")
        arr = np.asarray(data, dtype=np.float64).reshape(rows, cols)
        _check_finite(arr)
        self.a = np.ascontiguousarray(arr)

    @classmethod
    def from_array(cls, arr) -> "Matrix":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeError(f"expected 2-D array, got ndim={arr.ndim}")
        m = cls.__new__(cls)
        _check_finite(arr)
        m.a = np.ascontiguousarray(arr)
        return m

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "Matrix":
        return cls.from_array(np.zeros((rows, cols)))

    @classmethod
    def full(cls, rows: int, cols: int, value: float) -> "Matrix":
        return cls.from_array(np.full((rows, cols), float(value)))

    @property
    def rows(self) -> int:
        return self.a.shape[0]

    @property
    def cols(self) -> int:
        return self.a.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.a.shape

    @property
    def data(self) -> list[float]:
        """Flat row-major copy of the entries."""
        return self.a.ravel().tolist()

    def copy(self) -> "Matrix":
        return Matrix.from_array(self.a.copy())

    def __repr__(self) -> str:
        return f"Matrix({self.rows}x{self.cols})"


def _check_finite(arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise NumericalError("matrix contains NaN or Inf")


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.cols != b.rows:
        raise ShapeError("matmul dimension mismatch", a.shape, b.shape)
    return Matrix.from_array(a.a @ b.a)


def hadamard(a: Matrix, b: Matrix) -> Matrix:
    if a.shape != b.shape:
        raise ShapeError("hadamard shape mismatch", a.shape, b.shape)
    return Matrix.from_array(a.a * b.a)


def transpose(a: Matrix) -> Matrix:
    return Matrix.from_array(a.a.T)


def add_scaled(alpha: float, a: Matrix, beta: float, b: Matrix) -> Matrix:
    """alpha*a + beta*b, elementwise."""
    if a.shape != b.shape:
        raise ShapeError("add_scaled shape mismatch", a.shape, b.shape)
    return Matrix.from_array(alpha * a.a + beta * b.a)


def uniform_matrix(rng: RngState, rows: int, cols: int, lo: float, hi: float) -> Matrix:
    """Entries i.i.d. uniform on [lo, hi), drawn in row-major order."""
    if not lo < hi:
        raise ParameterError(f"uniform_matrix needs lo < hi, got [{lo}, {hi})")
    span = hi - lo
    vals = [lo + span * rng.next_float() for _ in range(rows * cols)]
    return Matrix(rows, cols, vals)


def frobenius_norm(a: Matrix) -> float:
    return float(np.sqrt(np.sum(a.a * a.a)))


def row_softmax(a: Matrix) -> Matrix:
    """Softmax of each row, max-subtracted for stability."""
    return Matrix.from_array(_softmax_rows(a.a))


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def row_argmax(a: Matrix) -> list[int]:
    """Index of each row's maximum; ties resolve to the lowest index."""
    return a.a.argmax(axis=1).tolist()


def total_sum(a: Matrix) -> float:
    return float(a.a.sum())


def total_mean(a: Matrix) -> float:
    return float(a.a.mean())


def format_float(x: float) -> str:
    """Shortest decimal that round-trips to the same float64."""
    return repr(float(x))


def matrix_to_csv_lines(m: Matrix) -> list[str]:
    return [",".join(format_float(v) for v in row) for row in m.a]


def write_matrix_csv(path, m: Matrix) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for line in matrix_to_csv_lines(m):
            fh.write(line + "\n")


def read_matrix_csv(path) -> Matrix:
    rows = []
    width = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = [float(tok) for tok in line.split(",")]
            except ValueError as exc:
                raise ParseError(f"bad float in matrix csv: {exc}", line=lineno)
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise ParseError("ragged matrix csv row", line=lineno)
            rows.append(row)
    if not rows:
        raise ParseError("empty matrix csv")
    return Matrix.from_array(np.array(rows))
