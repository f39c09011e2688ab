"""Small differentiation engine for invariant-based strain energies.

Two pieces live here:

* :class:`Dual2` -- second-order forward mode seeded along the three
  invariant directions ``(I1, I2, J)``.  It carries the value, the gradient
  and the upper triangle of the Hessian.
* :class:`Tape` / :class:`Var` -- a single-use reverse-mode tape over numpy
  arrays, used for parameter gradients of scalar losses.

The components of a ``Dual2`` are deliberately untyped: they may be floats,
numpy arrays, :class:`Dual1` numbers (one parameter direction) or tape
``Var`` objects.  Nesting a ``Var`` inside a ``Dual2`` is what makes a loss
on stresses (first invariant derivatives of the energy) differentiable in
the network weights.
"""

from __future__ import annotations

import numbers

import numpy as np

__all__ = [
    "DomainError",
    "TapeError",
    "Dual1",
    "Dual2",
    "Tape",
    "Var",
    "dual2_eval",
    "tape_gradient",
    "value_of",
    "exp",
    "log",
    "log1p",
    "sqrt",
    "softplus",
    "sigmoid",
    "power",
    "absolute",
    "relu",
]


class DomainError(ValueError):
    """Raised when an elementary function leaves its domain."""


class TapeError(RuntimeError):
    """Raised on misuse of a reverse-mode tape."""


# ---------------------------------------------------------------------------
# numpy-level primitives

def _np_softplus(x):
    x = np.asarray(x, dtype=float)
    # overflow-safe: x + log1p(exp(-x)) for x > 0
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _np_sigmoid(x):
    x = np.asarray(x, dtype=float)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def value_of(x):
    """Strip every derivative layer and return the plain numeric value."""
    while True:
        if isinstance(x, Var):
            return x.value
        if isinstance(x, (Dual1, Dual2)):
            x = x.v
        else:
            return x


def _check_positive(x, what):
    v = np.asarray(value_of(x))
    if not np.all(np.isfinite(v)) or np.any(v <= 0):
        raise DomainError(f"{what} of non-positive argument")


def _check_nonzero(x):
    v = np.asarray(value_of(x))
    if np.any(v == 0):
        raise DomainError("division by zero")


# structural zeros (plain python/numpy scalars equal to 0) are skipped so
# that e.g. the Hessian of an affine input never touches the tape
def _is_zero(x):
    return isinstance(x, numbers.Number) and x == 0


def _mul(a, b):
    if _is_zero(a) or _is_zero(b):
        return 0.0
    return a * b


def _add(a, b):
    if _is_zero(a):
        return b
    if _is_zero(b):
        return a
    return a + b


def _neg(a):
    return 0.0 if _is_zero(a) else -a


# ---------------------------------------------------------------------------
# generic elementary functions (dispatch on the innermost type)

def exp(x):
    if isinstance(x, (Dual2, Dual1, Var)):
        return x.exp()
    return np.exp(x)


def log(x):
    if isinstance(x, (Dual2, Dual1, Var)):
        return x.log()
    _check_positive(x, "log")
    return np.log(x)


def log1p(x):
    if isinstance(x, (Dual2, Dual1, Var)):
        return x.log1p()
    if np.any(np.asarray(x) <= -1):
        raise DomainError("log1p of argument <= -1")
    return np.log1p(x)


def sqrt(x):
    if isinstance(x, (Dual2, Dual1, Var)):
        return x.sqrt()
    if np.any(np.asarray(x) < 0):
        raise DomainError("sqrt of negative argument")
    return np.sqrt(x)


def softplus(x):
    """log(1 + e^x), evaluated without overflow."""
    if isinstance(x, (Dual2, Dual1, Var)):
        return x.softplus()
    return _np_softplus(x)


def sigmoid(x):
    if isinstance(x, (Dual2, Dual1, Var)):
        return x.sigmoid()
    return _np_sigmoid(x)


def power(x, p):
    if isinstance(x, (Dual2, Dual1, Var)):
        return x ** p
    if not float(p).is_integer() and np.any(np.asarray(x) < 0):
        raise DomainError("fractional power of negative argument")
    return np.power(x, p)


def absolute(x):
    if isinstance(x, (Dual1, Var)):
        return x.abs()
    if isinstance(x, Dual2):
        raise TypeError("abs is not twice differentiable")
    return np.abs(x)


def relu(x):
    if isinstance(x, (Dual1, Var)):
        return x.relu()
    if isinstance(x, Dual2):
        raise TypeError("relu is not twice differentiable")
    return np.maximum(x, 0.0)


# ---------------------------------------------------------------------------
# first-order dual number along a single parameter direction

class Dual1:
    """First-order dual number ``v + d*eps`` with numeric components."""

    __array_ufunc__ = None
    __slots__ = ("v", "d")

    def __init__(self, v, d=0.0):
        self.v = v
        self.d = d

    def __repr__(self):
        return f"Dual1({self.v!r}, {self.d!r})"

    @staticmethod
    def _wrap(other):
        if isinstance(other, Dual1):
            return other
        if isinstance(other, (Dual2, Var)):
            return None
        return Dual1(other, 0.0)

    def __add__(self, other):
        o = self._wrap(other)
        if o is None:
            return NotImplemented
        return Dual1(self.v + o.v, _add(self.d, o.d))

    __radd__ = __add__

    def __sub__(self, other):
        o = self._wrap(other)
        if o is None:
            return NotImplemented
        return Dual1(self.v - o.v, _add(self.d, _neg(o.d)))

    def __rsub__(self, other):
        o = self._wrap(other)
        if o is None:
            return NotImplemented
        return o - self

    def __neg__(self):
        return Dual1(-self.v, _neg(self.d))

    def __mul__(self, other):
        o = self._wrap(other)
        if o is None:
            return NotImplemented
        return Dual1(self.v * o.v, _add(_mul(self.d, o.v), _mul(self.v, o.d)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = self._wrap(other)
        if o is None:
            return NotImplemented
        _check_nonzero(o.v)
        inv = 1.0 / o.v
        return Dual1(self.v * inv,
                     _add(_mul(self.d, inv), _neg(_mul(_mul(self.v, o.d), inv * inv))))

    def __rtruediv__(self, other):
        o = self._wrap(other)
        if o is None:
            return NotImplemented
        return o / self

    def __pow__(self, p):
        if isinstance(p, (Dual1, Dual2, Var)):
            return exp(p * log(self))
        if p == 0:
            return Dual1(np.ones_like(np.asarray(self.v, dtype=float)), 0.0)
        if not float(p).is_integer():
            _check_positive(self.v, "fractional power")
        return Dual1(np.power(self.v, p), _mul(self.d, p * np.power(self.v, p - 1)))

    def _chain(self, f0, f1):
        return Dual1(f0, _mul(self.d, f1))

    def exp(self):
        e = np.exp(self.v)
        return self._chain(e, e)

    def log(self):
        _check_positive(self.v, "log")
        return self._chain(np.log(self.v), 1.0 / self.v)

    def log1p(self):
        return self._chain(log1p(self.v), 1.0 / (1.0 + self.v))

    def sqrt(self):
        _check_positive(self.v, "sqrt")
        s = np.sqrt(self.v)
        return self._chain(s, 0.5 / s)

    def softplus(self):
        return self._chain(_np_softplus(self.v), _np_sigmoid(self.v))

    def sigmoid(self):
        s = _np_sigmoid(self.v)
        return self._chain(s, s * (1.0 - s))

    def abs(self):
        return self._chain(np.abs(self.v), np.sign(self.v))

    def relu(self):
        return self._chain(np.maximum(self.v, 0.0), (np.asarray(self.v) > 0).astype(float))

    def __getitem__(self, idx):
        return Dual1(self.v[idx], self.d if _is_zero(self.d) else self.d[idx])

    def sum(self, axis=None):
        return Dual1(np.sum(self.v, axis=axis),
                     self.d if _is_zero(self.d) else np.sum(self.d, axis=axis))


# ---------------------------------------------------------------------------
# second-order forward mode in the three invariant directions

_PAIRS = ((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2))
_SLOT = {}
for _k, (_i, _j) in enumerate(_PAIRS):
    _SLOT[(_i, _j)] = _k
    _SLOT[(_j, _i)] = _k


class Dual2:
    """Value, gradient and Hessian of a scalar in the (I1, I2, J) directions.

    ``g`` holds the three first partials and ``h`` the six distinct second
    partials in the order 11, 12, 1J, 22, 2J, JJ.
    """

    __array_ufunc__ = None
    __slots__ = ("v", "g", "h")

    def __init__(self, v, g=(0.0, 0.0, 0.0), h=(0.0,) * 6):
        self.v = v
        self.g = tuple(g)
        self.h = tuple(h)

    def __repr__(self):
        return f"Dual2(v={self.v!r}, g={self.g!r}, h={self.h!r})"

    @classmethod
    def variable(cls, value, direction):
        g = [0.0, 0.0, 0.0]
        g[direction] = 1.0
        return cls(value, g)

    @classmethod
    def seed(cls, i1, i2, j):
        """Return the three seeded invariants as ``Dual2`` numbers."""
        return cls.variable(i1, 0), cls.variable(i2, 1), cls.variable(j, 2)

    # -- accessors ---------------------------------------------------------
    @property
    def value(self):
        return self.v

    def d(self, i):
        return self.g[i]

    def dd(self, i, j):
        return self.h[_SLOT[(i, j)]]

    def grad_array(self):
        """Numeric gradient, shape ``(3,) + value.shape``."""
        vals = np.broadcast_arrays(np.asarray(self.v, float), *[np.asarray(x, float) for x in self.g])
        return np.stack(vals[1:])

    def hess_array(self):
        """Numeric symmetric Hessian, shape ``(3, 3) + value.shape``."""
        base = np.asarray(self.v, float)
        out = np.zeros((3, 3) + base.shape)
        for (i, j), hij in zip(_PAIRS, self.h):
            out[i, j] = out[j, i] = np.broadcast_to(np.asarray(hij, float), base.shape)
        return out

    # -- arithmetic --------------------------------------------------------
    @staticmethod
    def _is_const(other):
        return not isinstance(other, Dual2)

    def __add__(self, other):
        if self._is_const(other):
            return Dual2(self.v + other, self.g, self.h)
        return Dual2(self.v + other.v,
                     [_add(a, b) for a, b in zip(self.g, other.g)],
                     [_add(a, b) for a, b in zip(self.h, other.h)])

    __radd__ = __add__

    def __neg__(self):
        return Dual2(-self.v, [_neg(a) for a in self.g], [_neg(a) for a in self.h])

    def __sub__(self, other):
        if self._is_const(other):
            return Dual2(self.v - other, self.g, self.h)
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if self._is_const(other):
            return Dual2(self.v * other,
                         [_mul(a, other) for a in self.g],
                         [_mul(a, other) for a in self.h])
        a, b = self, other
        g = [_add(_mul(a.g[i], b.v), _mul(a.v, b.g[i])) for i in range(3)]
        h = []
        for k, (i, j) in enumerate(_PAIRS):
            t = _add(_mul(a.h[k], b.v), _mul(a.v, b.h[k]))
            t = _add(t, _mul(a.g[i], b.g[j]))
            t = _add(t, _mul(a.g[j], b.g[i]))
            h.append(t)
        return Dual2(a.v * b.v, g, h)

    __rmul__ = __mul__

    def reciprocal(self):
        _check_nonzero(self.v)
        r = 1.0 / self.v
        r2 = r * r
        return self._chain(r, -r2, 2.0 * r2 * r)

    def __truediv__(self, other):
        if self._is_const(other):
            _check_nonzero(other)
            return self * (1.0 / other)
        return self * other.reciprocal()

    def __rtruediv__(self, other):
        return self.reciprocal() * other

    def __pow__(self, p):
        if isinstance(p, Dual2):
            return exp(p * log(self))
        if isinstance(p, (Dual1, Var)):
            return exp(log(self) * p)
        p = float(p)
        if p == 0.0:
            return Dual2(power(self.v, 0.0))
        if not p.is_integer():
            _check_positive(self.v, "fractional power")
        f0 = power(self.v, p)
        f1 = p * power(self.v, p - 1.0)
        f2 = p * (p - 1.0) * power(self.v, p - 2.0) if p != 1.0 else 0.0
        return self._chain(f0, f1, f2)

    def __matmul__(self, w):
        return Dual2(self.v @ w,
                     [0.0 if _is_zero(a) else a @ w for a in self.g],
                     [0.0 if _is_zero(a) else a @ w for a in self.h])

    def __getitem__(self, idx):
        def pick(a):
            if _is_zero(a):
                return a
            if np.ndim(value_of(a)) == 0:
                return a
            return a[idx]
        v = self.v
        if isinstance(v, (int, float, np.floating)):
            v = np.asarray(float(v))
        return Dual2(v[idx], [pick(a) for a in self.g], [pick(a) for a in self.h])

    def sum(self, axis=None):
        def red(a):
            if _is_zero(a):
                return a
            return a.sum(axis=axis) if hasattr(a, "sum") and not isinstance(a, np.ndarray) \
                else np.sum(a, axis=axis)
        return Dual2(red(self.v), [red(a) for a in self.g], [red(a) for a in self.h])

    # -- unary functions ---------------------------------------------------
    def _chain(self, f0, f1, f2):
        g = [_mul(f1, a) for a in self.g]
        h = []
        for k, (i, j) in enumerate(_PAIRS):
            h.append(_add(_mul(f2, _mul(self.g[i], self.g[j])), _mul(f1, self.h[k])))
        return Dual2(f0, g, h)

    def exp(self):
        e = exp(self.v)
        return self._chain(e, e, e)

    def log(self):
        _check_positive(self.v, "log")
        r = 1.0 / self.v
        return self._chain(log(self.v), r, -(r * r))

    def log1p(self):
        r = 1.0 / (1.0 + self.v)
        return self._chain(log1p(self.v), r, -(r * r))

    def sqrt(self):
        _check_positive(self.v, "sqrt")
        s = sqrt(self.v)
        f1 = 0.5 / s
        return self._chain(s, f1, -0.5 * f1 / self.v)

    def softplus(self):
        s = sigmoid(self.v)
        return self._chain(softplus(self.v), s, s * (1.0 - s))

    def sigmoid(self):
        s = sigmoid(self.v)
        f1 = s * (1.0 - s)
        return self._chain(s, f1, f1 * (1.0 - 2.0 * s))


def dual2_eval(f, seed):
    """Evaluate ``f(I1, I2, J)`` with second-order invariant derivatives."""
    i1, i2, j = seed
    return f(*Dual2.seed(i1, i2, j))


# ---------------------------------------------------------------------------
# reverse mode

def _unbroadcast(g, shape):
    g = np.asarray(g)
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


class Tape:
    """Append-only record of array operations; one backward sweep per use."""

    def __init__(self):
        self._parents = []
        self._vjps = []
        self._shapes = []
        self.consumed = False

    def __len__(self):
        return len(self._parents)

    def leaf(self, value):
        return self._record(np.array(value, dtype=float), (), ())

    def _record(self, value, parents, vjps):
        if self.consumed:
            raise TapeError("tape already consumed by a backward sweep")
        value = np.asarray(value, dtype=float)
        self._parents.append(tuple(p.idx for p in parents))
        self._vjps.append(tuple(vjps))
        self._shapes.append(value.shape)
        return Var(self, len(self._parents) - 1, value)

    def backward(self, out):
        if self.consumed:
            raise TapeError("tape already consumed by a backward sweep")
        if out.tape is not self:
            raise TapeError("output recorded on a different tape")
        if out.value.size != 1:
            raise TapeError("backward requires a scalar output")
        adj = [None] * (out.idx + 1)
        adj[out.idx] = np.ones_like(out.value)
        for i in range(out.idx, -1, -1):
            g = adj[i]
            if g is None:
                continue
            for p, vjp in zip(self._parents[i], self._vjps[i]):
                c = vjp(g)
                adj[p] = c if adj[p] is None else adj[p] + c
        self.consumed = True
        self._vjps = None
        return adj


def tape_gradient(loss, params):
    """Gradient of the scalar ``loss`` with respect to each leaf in ``params``.

    The tape is consumed; a second call raises :class:`TapeError`.
    """
    adj = loss.tape.backward(loss)
    out = []
    for p in params:
        if p.tape is not loss.tape:
            raise TapeError("parameter recorded on a different tape")
        a = adj[p.idx] if p.idx < len(adj) else None
        out.append(np.zeros_like(p.value) if a is None else np.asarray(a).reshape(p.value.shape))
    return out


class Var:
    """A node on a :class:`Tape` holding a numpy array value."""

    __array_ufunc__ = None
    __slots__ = ("tape", "idx", "value")

    def __init__(self, tape, idx, value):
        self.tape = tape
        self.idx = idx
        self.value = value

    def __repr__(self):
        return f"Var(#{self.idx}, shape={self.value.shape})"

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def _rec(self, value, parents, vjps):
        return self.tape._record(value, parents, vjps)

    def _other(self, other):
        if isinstance(other, Var):
            if other.tape is not self.tape:
                raise TapeError("mixing variables from different tapes")
            return other, other.value
        if isinstance(other, (Dual1, Dual2)):
            return NotImplemented, None
        return None, np.asarray(other, dtype=float)

    # -- binary ------------------------------------------------------------
    def __add__(self, other):
        o, ov = self._other(other)
        if o is NotImplemented:
            return NotImplemented
        s = self.shape
        if o is None:
            return self._rec(self.value + ov, (self,), (lambda g: _unbroadcast(g, s),))
        so = o.shape
        return self._rec(self.value + ov, (self, o),
                         (lambda g: _unbroadcast(g, s), lambda g: _unbroadcast(g, so)))

    __radd__ = __add__

    def __neg__(self):
        return self._rec(-self.value, (self,), (lambda g: -g,))

    def __sub__(self, other):
        o, ov = self._other(other)
        if o is NotImplemented:
            return NotImplemented
        s = self.shape
        if o is None:
            return self._rec(self.value - ov, (self,), (lambda g: _unbroadcast(g, s),))
        so = o.shape
        return self._rec(self.value - ov, (self, o),
                         (lambda g: _unbroadcast(g, s), lambda g: -_unbroadcast(g, so)))

    def __rsub__(self, other):
        o, ov = self._other(other)
        if o is NotImplemented:
            return NotImplemented
        s = self.shape
        return self._rec(ov - self.value, (self,), (lambda g: -_unbroadcast(g, s),))

    def __mul__(self, other):
        o, ov = self._other(other)
        if o is NotImplemented:
            return NotImplemented
        a, s = self.value, self.shape
        if o is None:
            return self._rec(a * ov, (self,), (lambda g: _unbroadcast(g * ov, s),))
        so = o.shape
        return self._rec(a * ov, (self, o),
                         (lambda g: _unbroadcast(g * ov, s), lambda g: _unbroadcast(g * a, so)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        o, ov = self._other(other)
        if o is NotImplemented:
            return NotImplemented
        _check_nonzero(ov)
        a, s = self.value, self.shape
        if o is None:
            return self._rec(a / ov, (self,), (lambda g: _unbroadcast(g / ov, s),))
        so = o.shape
        return self._rec(a / ov, (self, o),
                         (lambda g: _unbroadcast(g / ov, s),
                          lambda g: _unbroadcast(-g * a / (ov * ov), so)))

    def __rtruediv__(self, other):
        o, ov = self._other(other)
        if o is NotImplemented:
            return NotImplemented
        _check_nonzero(self.value)
        a, s = self.value, self.shape
        return self._rec(ov / a, (self,), (lambda g: _unbroadcast(-g * ov / (a * a), s),))

    def __pow__(self, p):
        if isinstance(p, (Var, Dual1, Dual2)):
            return NotImplemented
        p = float(p)
        a = self.value
        if p == 0.0:
            return self._rec(np.ones_like(a), (self,), (lambda g: np.zeros_like(a),))
        if not p.is_integer():
            _check_positive(a, "fractional power")
        return self._rec(np.power(a, p), (self,), (lambda g: g * p * np.power(a, p - 1.0),))

    def __matmul__(self, other):
        o, ov = self._other(other)
        if o is NotImplemented:
            return NotImplemented
        a = self.value
        out = a @ ov
        if o is None:
            return self._rec(out, (self,), (lambda g: _matmul_vjp_left(g, a, ov),))
        return self._rec(out, (self, o),
                         (lambda g: _matmul_vjp_left(g, a, ov), lambda g: _matmul_vjp_right(g, a, ov)))

    def __rmatmul__(self, other):
        o, ov = self._other(other)
        if o is NotImplemented:
            return NotImplemented
        b = self.value
        return self._rec(ov @ b, (self,), (lambda g: _matmul_vjp_right(g, ov, b),))

    def __getitem__(self, idx):
        a = self.value
        s = a.shape

        def vjp(g):
            out = np.zeros(s)
            np.add.at(out, idx, g)
            return out
        return self._rec(a[idx], (self,), (vjp,))

    @property
    def T(self):
        return self._rec(self.value.T, (self,), (lambda g: g.T,))

    def reshape(self, *shape):
        s = self.shape
        return self._rec(self.value.reshape(*shape), (self,), (lambda g: g.reshape(s),))

    def sum(self, axis=None):
        a = self.value
        s = a.shape

        def vjp(g):
            if axis is None:
                return np.broadcast_to(g, s).copy()
            return np.broadcast_to(np.expand_dims(g, axis), s).copy()
        return self._rec(np.sum(a, axis=axis), (self,), (vjp,))

    def mean(self, axis=None):
        n = self.value.size if axis is None else self.value.shape[axis]
        return self.sum(axis) * (1.0 / n)

    # -- unary ---------------------------------------------------------------
    def _unary(self, f0, f1):
        return self._rec(f0, (self,), (lambda g: g * f1,))

    def exp(self):
        e = np.exp(self.value)
        return self._unary(e, e)

    def log(self):
        _check_positive(self.value, "log")
        return self._unary(np.log(self.value), 1.0 / self.value)

    def log1p(self):
        return self._unary(log1p(self.value), 1.0 / (1.0 + self.value))

    def sqrt(self):
        _check_positive(self.value, "sqrt")
        s = np.sqrt(self.value)
        return self._unary(s, 0.5 / s)

    def softplus(self):
        return self._unary(_np_softplus(self.value), _np_sigmoid(self.value))

    def sigmoid(self):
        s = _np_sigmoid(self.value)
        return self._unary(s, s * (1.0 - s))

    def abs(self):
        return self._unary(np.abs(self.value), np.sign(self.value))

    def relu(self):
        return self._unary(np.maximum(self.value, 0.0), (self.value > 0).astype(float))


def _matmul_vjp_left(g, a, b):
    if b.ndim == 1:
        return np.multiply.outer(g, b) if a.ndim > 1 else g * b
    return g @ b.T


def _matmul_vjp_right(g, a, b):
    if a.ndim == 1:
        return np.multiply.outer(a, g) if b.ndim > 1 else g * a
    if b.ndim == 1:
        return a.T @ g
    return a.T @ g
