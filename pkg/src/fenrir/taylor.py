"""Truncated Taylor series arithmetic.

A :class:`Taylor` holds the coefficients ``c_0, ..., c_{n-1}`` of a power
series ``sum_k c_k tau**k`` and supports the arithmetic and elementary
functions needed to push a series through an ODE vector field.  Vector fields
written with plain operators and numpy ufuncs (``np.sin``, ``np.exp``, ...)
work unchanged, because the class implements ``__array_ufunc__``.
"""

import numpy as np


class Taylor:
    """Truncated power series with a fixed number of coefficients."""

    __slots__ = ("c",)

    def __init__(self, coeffs):
        self.c = np.asarray(coeffs, dtype=float)

    def __repr__(self):
        return f"Taylor({self.c.tolist()})"

    def coefficient(self, k):
        return self.c[k]

    # -- helpers -----------------------------------------------------------
    def _lift(self, other):
        if isinstance(other, Taylor):
            return other
        other = float(other)
        c = np.zeros_like(self.c)
        c[0] = other
        return Taylor(c)

    # -- arithmetic ----------------------------------------------------------
    def __neg__(self):
        return Taylor(-self.c)

    def __pos__(self):
        return self

    def __add__(self, other):
        return Taylor(self.c + self._lift(other).c)

    __radd__ = __add__

    def __sub__(self, other):
        return Taylor(self.c - self._lift(other).c)

    def __rsub__(self, other):
        return Taylor(self._lift(other).c - self.c)

    def __mul__(self, other):
        if not isinstance(other, Taylor):
            return Taylor(self.c * float(other))
        return Taylor(np.convolve(self.c, other.c)[: self.c.size])

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, Taylor):
            return Taylor(self.c / float(other))
        a, b = self.c, other.c
        if b[0] == 0.0:
            raise ZeroDivisionError("series division by a series with zero constant term")
        q = np.zeros_like(a)
        for k in range(a.size):
            q[k] = (a[k] - np.dot(b[1 : k + 1], q[k - 1 :: -1][:k])) / b[0]
        return Taylor(q)

    def __rtruediv__(self, other):
        return self._lift(other) / self

    def __pow__(self, p):
        if isinstance(p, Taylor):
            return (p * self.log()).exp()
        if float(p).is_integer() and p >= 0:
            out = self._lift(1.0)
            for _ in range(int(p)):
                out = out * self
            return out
        a = self.c
        if a[0] == 0.0:
            raise ValueError("non-integer power of a series with zero constant term")
        p = float(p)
        b = np.zeros_like(a)
        b[0] = a[0] ** p
        for k in range(1, a.size):
            j = np.arange(1, k + 1)
            b[k] = np.sum(((p + 1.0) * j - k) * a[j] * b[k - j]) / (k * a[0])
        return Taylor(b)

    def __rpow__(self, base):
        return (self * np.log(float(base))).exp()

    # -- elementary functions ------------------------------------------------
    def exp(self):
        a = self.c
        e = np.zeros_like(a)
        e[0] = np.exp(a[0])
        for k in range(1, a.size):
            j = np.arange(1, k + 1)
            e[k] = np.sum(j * a[j] * e[k - j]) / k
        return Taylor(e)

    def log(self):
        a = self.c
        out = np.zeros_like(a)
        out[0] = np.log(a[0])
        for k in range(1, a.size):
            j = np.arange(1, k)
            out[k] = (a[k] - np.sum(j * out[j] * a[k - j]) / k) / a[0]
        return Taylor(out)

    def sqrt(self):
        return self**0.5

    def _sincos(self):
        a = self.c
        s = np.zeros_like(a)
        c = np.zeros_like(a)
        s[0], c[0] = np.sin(a[0]), np.cos(a[0])
        for k in range(1, a.size):
            j = np.arange(1, k + 1)
            s[k] = np.sum(j * a[j] * c[k - j]) / k
            c[k] = -np.sum(j * a[j] * s[k - j]) / k
        return Taylor(s), Taylor(c)

    def sin(self):
        return self._sincos()[0]

    def cos(self):
        return self._sincos()[1]

    def tanh(self):
        e2 = (2.0 * self).exp()
        return (e2 - 1.0) / (e2 + 1.0)

    def square(self):
        return self * self

    # -- numpy interop ---------------------------------------------------------
    _BINARY = {
        np.add: lambda a, b: a + b,
        np.subtract: lambda a, b: a - b,
        np.multiply: lambda a, b: a * b,
        np.true_divide: lambda a, b: a / b,
        np.power: lambda a, b: a**b,
    }
    _UNARY = {
        np.negative: lambda a: -a,
        np.positive: lambda a: a,
        np.exp: lambda a: a.exp(),
        np.log: lambda a: a.log(),
        np.sqrt: lambda a: a.sqrt(),
        np.sin: lambda a: a.sin(),
        np.cos: lambda a: a.cos(),
        np.tanh: lambda a: a.tanh(),
        np.square: lambda a: a.square(),
    }

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        if method != "__call__" or kwargs:
            return NotImplemented
        if len(inputs) == 1 and ufunc in self._UNARY:
            op = self._UNARY[ufunc]
        elif len(inputs) == 2 and ufunc in self._BINARY:
            op = self._BINARY[ufunc]
        else:
            return NotImplemented
        if any(isinstance(x, np.ndarray) and x.ndim > 0 for x in inputs):
            # broadcast over object arrays element by element
            boxed = [_box(x) if isinstance(x, Taylor) else x for x in inputs]
            return np.frompyfunc(_promote(op, ufunc), len(inputs), 1)(*boxed)
        return _promote(op, ufunc)(*inputs)


def _box(x):
    arr = np.empty((), dtype=object)
    arr[()] = x
    return arr


def _promote(op, ufunc):
    def wrapped(*args):
        ref = next((a for a in args if isinstance(a, Taylor)), None)
        if ref is None:
            return ufunc(*args)
        return op(*(ref._lift(a) for a in args))

    return wrapped


def taylor_coefficients(value, k):
    """Coefficient ``k`` of each entry of ``value`` (series or constants)."""
    out = []
    for v in np.ravel(np.asarray(value, dtype=object)):
        if isinstance(v, Taylor):
            out.append(v.c[k])
        else:
            out.append(float(v) if k == 0 else 0.0)
    return np.array(out, dtype=float)
