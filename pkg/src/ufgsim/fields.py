"""Vector-field algebra: Lie brackets, multi-indices and the bracket hierarchy.

A vector field on R^N is stored as N symbolic components and doubles as a
first-order differential operator.  The hierarchy extends a base family
V_0..V_d by iterated brackets V_[a*i] = [V_[a], V_i]; multi-indices over
{0..d} are weighted so that appending a noise index costs 1 and appending
the drift index costs 2.  The frame collection R_m gathers every bracket
field of weighted length at most m, excluding the bare drift.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import expr as ex

DEFAULT_TABLE_CAP = 5000


@dataclass(frozen=True)
class VectorField:
    """A dimension-N list of expression trees, callable at points."""

    dim: int
    components: tuple
    name: str = ""

    def __post_init__(self):
        if len(self.components) != self.dim:
            raise ValueError(f"expected {self.dim} components, got {len(self.components)}")
        for c in self.components:
            if ex.max_variable_index(c) >= self.dim:
                raise ValueError(
                    f"component {ex.to_string(c)} uses a variable index >= dim {self.dim}"
                )

    def __call__(self, x):
        return np.array([ex.evaluate(c, x) for c in self.components])

    def eval_batch(self, X):
        """Evaluate at points of shape (..., N); non-finite values pass through."""
        X = np.asarray(X, dtype=float)
        out = np.empty(X.shape, dtype=float)
        for j, c in enumerate(self.components):
            out[..., j] = ex.evaluate_array(c, X)
        return out

    def jacobian_exprs(self):
        """Matrix of symbolic partials J[j][i] = d component_j / d x_i."""
        return tuple(
            tuple(ex.differentiate(c, i) for i in range(self.dim)) for c in self.components
        )

    def jacobian_batch(self, X):
        """Jacobians at points of shape (..., N), result (..., N, N)."""
        X = np.asarray(X, dtype=float)
        J = _jacobian_cache(self)
        out = np.empty(X.shape[:-1] + (self.dim, self.dim), dtype=float)
        for j in range(self.dim):
            for i in range(self.dim):
                out[..., j, i] = ex.evaluate_array(J[j][i], X)
        return out

    def is_zero(self):
        return all(c == ex.ZERO for c in self.components)


_JAC_CACHE: dict = {}


def _jacobian_cache(vf):
    key = (vf.dim, vf.components)
    got = _JAC_CACHE.get(key)
    if got is None:
        got = vf.jacobian_exprs()
        _JAC_CACHE[key] = got
    return got


def make_field(dim, component_texts, variable_names, name=""):
    comps = tuple(ex.parse_expression(t, variable_names) for t in component_texts)
    return VectorField(dim, comps, name)


def zero_field(dim):
    return VectorField(dim, tuple(ex.ZERO for _ in range(dim)))


def lie_bracket(V, W):
    """Symbolic commutator [V, W], componentwise sum_i (V^i d_i W^j - W^i d_i V^j)."""
    if V.dim != W.dim:
        raise ValueError(f"dimension mismatch: {V.dim} vs {W.dim}")
    n = V.dim
    comps = []
    for j in range(n):
        acc = ex.ZERO
        for i in range(n):
            term = ex.Binary(
                "sub",
                ex.Binary("mul", V.components[i], ex.differentiate(W.components[j], i)),
                ex.Binary("mul", W.components[i], ex.differentiate(V.components[j], i)),
            )
            acc = ex.Binary("add", acc, term)
        comps.append(ex.simplify(acc))
    return VectorField(n, tuple(comps))


@dataclass(frozen=True, order=True)
class MultiIndex:
    """Non-empty tuple over {0..d}; the trivial index (0,) is excluded."""

    entries: tuple

    def __post_init__(self):
        if len(self.entries) == 0:
            raise ValueError("multi-index must be non-empty")
        if self.entries == (0,):
            raise ValueError("the trivial multi-index (0,) is excluded")
        if any(e < 0 for e in self.entries):
            raise ValueError("multi-index entries must be non-negative")

    @property
    def length(self):
        """Weighted length: tuple size plus the number of zero entries."""
        return len(self.entries) + sum(1 for e in self.entries if e == 0)

    def extend(self, i):
        return MultiIndex(self.entries + (i,))

    def __repr__(self):
        return f"({','.join(map(str, self.entries))})"


def multiindex_length(alpha):
    return alpha.length


def canonical_key(alpha):
    """Sort key: by weighted length, then lexicographically by entries."""
    return (alpha.length, alpha.entries)


class BracketTable:
    """The bracket hierarchy {V_[a] : ||a|| <= m+2} over base fields V_0..V_d.

    Multi-indices are kept in canonical order (weighted length, then entries).
    Antisymmetric twins such as (0,1) and (1,0) are both retained; only
    structurally identical component tuples are shared via interning.
    Instances are immutable after construction.
    """

    def __init__(self, base_fields, m, cap=DEFAULT_TABLE_CAP):
        if m < 1:
            raise ValueError("level m must be >= 1")
        dims = {f.dim for f in base_fields}
        if len(dims) != 1:
            raise ValueError("all base fields must share one dimension")
        self.dim = dims.pop()
        self.d = len(base_fields) - 1
        if self.d < 1:
            raise ValueError("need a drift and at least one noise field")
        self.m = m
        self.base_fields = tuple(base_fields)
        self.fields: dict[MultiIndex, VectorField] = {}
        self._build(cap)
        self._order = sorted(self.fields, key=canonical_key)

    @property
    def drift(self):
        return self.base_fields[0]

    def _build(self, cap):
        interned: dict[tuple, VectorField] = {}

        def intern(vf):
            key = tuple(vf.components)
            kept = interned.get(key)
            if kept is None:
                interned[key] = vf
                return vf
            return kept

        def weighted(entries):
            return len(entries) + sum(1 for e in entries if e == 0)

        # Breadth-first by tuple size.  The trivial prefix (0,) is not a table
        # entry but still acts as a bracket parent, producing (0,i) children.
        frontier = []
        for i in range(self.d + 1):
            entries = (i,)
            fld = intern(self.base_fields[i])
            if entries != (0,) and weighted(entries) <= self.m + 2:
                self.fields[MultiIndex(entries)] = fld
            frontier.append((entries, fld))
        while frontier:
            nxt = []
            for entries, fld in frontier:
                for i in range(self.d + 1):
                    child = entries + (i,)
                    if weighted(child) > self.m + 2:
                        continue
                    if len(self.fields) >= cap:
                        raise RuntimeError(
                            f"bracket table exceeded its entry cap ({cap}); "
                            "lower m or raise the cap explicitly"
                        )
                    bracket = intern(lie_bracket(fld, self.base_fields[i]))
                    self.fields[MultiIndex(child)] = bracket
                    nxt.append((child, bracket))
            frontier = nxt

    def indices(self, max_length=None):
        """Multi-indices in canonical order, optionally capped by weighted length."""
        if max_length is None:
            return list(self._order)
        return [a for a in self._order if a.length <= max_length]

    def r_m(self):
        """Indices of the frame R_m (weighted length <= m, drift excluded)."""
        return self.indices(self.m)

    def ufg_targets(self):
        """Indices with m < ||a|| <= m+2, the ones the UFG identity must cover."""
        return [a for a in self._order if self.m < a.length <= self.m + 2]

    def field(self, alpha):
        return self.fields[alpha]

    def evaluate_frame(self, subset, x):
        """Frame matrix (N x k): bracket fields evaluated at x as columns.

        subset is "brackets" for the frame of R_m alone or "brackets+drift"
        to append the drift V_0 as the final column.  Columns follow the
        canonical table order.
        """
        x = np.asarray(x, dtype=float)
        cols = []
        for a in self.r_m():
            try:
                cols.append(self.fields[a](x))
            except ex.EvalDomainError as err:
                raise ex.EvalDomainError(f"bracket {a}: {err.brief}",
                                         err.subtree) from None
        if subset == "brackets+drift":
            cols.append(self.drift(x))
        elif subset != "brackets":
            raise ValueError("subset must be 'brackets' or 'brackets+drift'")
        return np.column_stack(cols) if cols else np.zeros((self.dim, 0))

    def evaluate_frame_batch(self, subset, X):
        """Batched frames: X of shape (..., N) -> (..., N, k)."""
        X = np.asarray(X, dtype=float)
        mats = [self.fields[a].eval_batch(X) for a in self.r_m()]
        if subset == "brackets+drift":
            mats.append(self.drift.eval_batch(X))
        elif subset != "brackets":
            raise ValueError("subset must be 'brackets' or 'brackets+drift'")
        return np.stack(mats, axis=-1)

    def spot_check(self, rng, n_points=5, box=1.0, tol=1e-9):
        """Recompute a few stored extensions as explicit brackets and compare."""
        for alpha in self._order:
            if len(alpha.entries) < 2:
                continue
            parent = MultiIndex(alpha.entries[:-1]) if alpha.entries[:-1] != (0,) else None
            i = alpha.entries[-1]
            base_parent = (
                self.fields[parent] if parent is not None else self.base_fields[0]
            )
            redo = lie_bracket(base_parent, self.base_fields[i])
            for _ in range(n_points):
                x = rng.uniform(-box, box, size=self.dim)
                got = self.fields[alpha](x)
                want = redo(x)
                if np.max(np.abs(got - want)) > tol:
                    return False
        return True


def build_hierarchy(base_fields, m, cap=DEFAULT_TABLE_CAP):
    """Build the bracket hierarchy through weighted length m+2."""
    return BracketTable(base_fields, m, cap=cap)


def evaluate_frame(table, subset, x):
    return table.evaluate_frame(subset, x)
