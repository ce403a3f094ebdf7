"""Reverse-mode automatic differentiation on static dense-tensor graphs.

The engine is deliberately small: a ``Graph`` is an append-only list of
primitive nodes with static shapes, evaluated with numpy in topological
(append) order.  Differentiation is *symbolic*: ``Graph.add_gradient_nodes``
appends the adjoint computation to the graph as ordinary nodes, so a gradient
is itself a differentiable expression.  That property is what makes the
input-gradient penalty used by adversarial training differentiable with
respect to network parameters (double backpropagation).

Tensors are 64-bit float numpy arrays, row-major.  No fusion, no dynamic
shapes: correctness and determinism over speed.
"""

from __future__ import annotations

import numpy as np

from .errors import GraphError

# A tensor is a float64 ndarray; scalars are 0-d arrays.
Tensor = np.ndarray

# Additive cushion inside the L2-norm composite so the norm stays smooth
# (and double-differentiable) at exactly zero input; its sqrt (1e-12) is far
# below every tolerance used in this package.
_NORM_EPS = 1e-24

__all__ = [
    "Tensor",
    "Graph",
    "forward_eval",
    "gradient",
    "input_gradient_node",
    "finite_difference_check",
]


def _as_shape(shape) -> tuple:
    if isinstance(shape, (int, np.integer)):
        return (int(shape),)
    return tuple(int(s) for s in shape)


class Graph:
    """Append-only computation graph.

    Node ``i`` is described by ``ops[i]`` (a primitive name), ``parents[i]``
    (ids of its inputs, all ``< i``), ``attrs[i]`` (op-specific constants)
    and ``shapes[i]`` (statically inferred output shape).  Acyclicity is
    guaranteed by construction: a node may only reference earlier nodes.
    """

    def __init__(self):
        self.ops: list[str] = []
        self.parents: list[tuple] = []
        self.attrs: list[dict] = []
        self.shapes: list[tuple] = []
        self.leaves: dict[str, int] = {}
        self.warnings: list[str] = []

    # ------------------------------------------------------------------
    # plumbing

    @property
    def num_nodes(self) -> int:
        return len(self.ops)

    def node_shape(self, node: int) -> tuple:
        return self.shapes[node]

    def clone(self) -> "Graph":
        g = Graph()
        g.ops = list(self.ops)
        g.parents = list(self.parents)
        g.attrs = list(self.attrs)  # attr dicts are never mutated after creation
        g.shapes = list(self.shapes)
        g.leaves = dict(self.leaves)
        g.warnings = list(self.warnings)
        return g

    def _check(self, node) -> int:
        if not isinstance(node, (int, np.integer)) or not 0 <= node < self.num_nodes:
            raise GraphError(f"unknown node id {node!r}")
        return int(node)

    def _append(self, op: str, parents: tuple, shape: tuple, **attrs) -> int:
        self.ops.append(op)
        self.parents.append(tuple(self._check(p) for p in parents))
        self.attrs.append(attrs)
        self.shapes.append(tuple(shape))
        return len(self.ops) - 1

    # ------------------------------------------------------------------
    # leaves and constants

    def leaf(self, name: str, shape) -> int:
        """A named input fed at evaluation time (data or parameters)."""
        if name in self.leaves:
            raise GraphError(f"leaf {name!r} already exists")
        nid = self._append("leaf", (), _as_shape(shape), name=name)
        self.leaves[name] = nid
        return nid

    def constant(self, value) -> int:
        value = np.asarray(value, dtype=np.float64)
        return self._append("const", (), value.shape, value=value)

    # ------------------------------------------------------------------
    # arithmetic primitives

    def add(self, a: int, b: int) -> int:
        a, b = self._check(a), self._check(b)
        shape = self._broadcast(a, b, "add")
        return self._append("add", (a, b), shape)

    def mul(self, a: int, b: int) -> int:
        a, b = self._check(a), self._check(b)
        shape = self._broadcast(a, b, "mul")
        return self._append("mul", (a, b), shape)

    def _broadcast(self, a: int, b: int, op: str) -> tuple:
        try:
            return np.broadcast_shapes(self.shapes[a], self.shapes[b])
        except ValueError:
            raise GraphError(
                f"{op}: incompatible shapes {self.shapes[a]} and {self.shapes[b]} "
                f"(nodes {a}, {b})"
            ) from None

    def matmul(self, a: int, b: int) -> int:
        a, b = self._check(a), self._check(b)
        sa, sb = self.shapes[a], self.shapes[b]
        if len(sa) != 2 or len(sb) != 2 or sa[1] != sb[0]:
            raise GraphError(f"matmul: incompatible shapes {sa} @ {sb} (nodes {a}, {b})")
        return self._append("matmul", (a, b), (sa[0], sb[1]))

    def affine(self, a: int, scale: float, shift: float) -> int:
        """Elementwise ``scale * a + shift`` with scalar constants."""
        a = self._check(a)
        return self._append("affine", (a,), self.shapes[a], scale=float(scale), shift=float(shift))

    def sub(self, a: int, b: int) -> int:
        return self.add(a, self.affine(b, -1.0, 0.0))

    # ------------------------------------------------------------------
    # elementwise nonlinearities

    def _unary(self, op: str, a: int) -> int:
        a = self._check(a)
        return self._append(op, (a,), self.shapes[a])

    def tanh(self, a: int) -> int:
        return self._unary("tanh", a)

    def relu(self, a: int) -> int:
        return self._unary("relu", a)

    def sigmoid(self, a: int) -> int:
        return self._unary("sigmoid", a)

    def exp(self, a: int) -> int:
        return self._unary("exp", a)

    def log(self, a: int) -> int:
        return self._unary("log", a)

    def square(self, a: int) -> int:
        return self._unary("square", a)

    def sqrt(self, a: int) -> int:
        return self._unary("sqrt", a)

    def reciprocal(self, a: int) -> int:
        return self._unary("reciprocal", a)

    def gtzero(self, a: int) -> int:
        """Indicator (a > 0) as floats; derivative defined as zero."""
        return self._unary("gtzero", a)

    # ------------------------------------------------------------------
    # reductions and shape ops

    def _reduced_shape(self, a: int, axis, keepdims: bool) -> tuple:
        sa = self.shapes[a]
        if axis is None:
            return tuple(1 for _ in sa) if keepdims else ()
        if not -len(sa) <= axis < len(sa):
            raise GraphError(f"reduction axis {axis} out of range for shape {sa}")
        axis %= len(sa)
        if keepdims:
            return tuple(1 if i == axis else s for i, s in enumerate(sa))
        return tuple(s for i, s in enumerate(sa) if i != axis)

    def sum(self, a: int, axis=None, keepdims: bool = False) -> int:
        a = self._check(a)
        shape = self._reduced_shape(a, axis, keepdims)
        return self._append("sum", (a,), shape, axis=axis, keepdims=keepdims)

    def mean(self, a: int, axis=None, keepdims: bool = False) -> int:
        a = self._check(a)
        shape = self._reduced_shape(a, axis, keepdims)
        return self._append("mean", (a,), shape, axis=axis, keepdims=keepdims)

    def max_detached(self, a: int, axis=None, keepdims: bool = True) -> int:
        """Maximum treated as a constant by differentiation.

        Used to stabilize log-sum-exp: the subtracted maximum cancels in
        value, so a zero derivative for this node leaves all gradients exact.
        """
        a = self._check(a)
        shape = self._reduced_shape(a, axis, keepdims)
        return self._append("max_detached", (a,), shape, axis=axis, keepdims=keepdims)

    def broadcast_to(self, a: int, shape) -> int:
        a = self._check(a)
        shape = _as_shape(shape)
        try:
            if np.broadcast_shapes(self.shapes[a], shape) != shape:
                raise ValueError
        except ValueError:
            raise GraphError(f"cannot broadcast {self.shapes[a]} to {shape}") from None
        return self._append("broadcast_to", (a,), shape, target=shape)

    def reshape(self, a: int, shape) -> int:
        a = self._check(a)
        shape = _as_shape(shape)
        if int(np.prod(self.shapes[a], dtype=np.int64)) != int(np.prod(shape, dtype=np.int64)):
            raise GraphError(f"cannot reshape {self.shapes[a]} to {shape}")
        return self._append("reshape", (a,), shape, target=shape)

    def transpose(self, a: int) -> int:
        a = self._check(a)
        sa = self.shapes[a]
        if len(sa) != 2:
            raise GraphError(f"transpose expects a matrix, got shape {sa}")
        return self._append("transpose", (a,), (sa[1], sa[0]))

    def concat(self, nodes, axis: int = 0) -> int:
        nodes = tuple(self._check(n) for n in nodes)
        if not nodes:
            raise GraphError("concat of zero nodes")
        base = self.shapes[nodes[0]]
        axis %= max(1, len(base))
        total = 0
        for n in nodes:
            s = self.shapes[n]
            if len(s) != len(base) or any(
                s[i] != base[i] for i in range(len(base)) if i != axis
            ):
                raise GraphError(f"concat: mismatched shapes {base} vs {s}")
            total += s[axis]
        shape = tuple(total if i == axis else s for i, s in enumerate(base))
        return self._append("concat", nodes, shape, axis=axis)

    def slice_axis(self, a: int, axis: int, start: int, stop: int) -> int:
        a = self._check(a)
        sa = self.shapes[a]
        axis %= len(sa)
        if not 0 <= start <= stop <= sa[axis]:
            raise GraphError(f"slice [{start}:{stop}] out of range for shape {sa}")
        shape = tuple(stop - start if i == axis else s for i, s in enumerate(sa))
        return self._append("slice", (a,), shape, axis=axis, start=start, stop=stop)

    def pad_axis(self, a: int, axis: int, before: int, after: int) -> int:
        a = self._check(a)
        sa = self.shapes[a]
        axis %= len(sa)
        shape = tuple(s + (before + after if i == axis else 0) for i, s in enumerate(sa))
        return self._append("pad", (a,), shape, axis=axis, before=before, after=after)

    # ------------------------------------------------------------------
    # composites built from primitives (fully differentiable)

    def l2norm(self, a: int, axis=None) -> int:
        """Euclidean norm along ``axis`` (all elements when None).

        Realized as sqrt(sum(a^2) + tiny) so the expression stays smooth at
        zero; the cushion is far below every tolerance used in this package.
        """
        return self.sqrt(self.affine(self.sum(self.square(a), axis=axis), 1.0, _NORM_EPS))

    def logsumexp(self, a: int, axis: int) -> int:
        """Row-stable log-sum-exp along ``axis`` with exact gradients."""
        a = self._check(a)
        m = self.max_detached(a, axis=axis, keepdims=True)
        z = self.add(a, self.affine(m, -1.0, 0.0))
        se = self.sum(self.exp(z), axis=axis)
        return self.add(self.log(se), self.reshape(m, self.shapes[se]))

    # ------------------------------------------------------------------
    # symbolic reverse mode

    def _ancestors(self, node: int) -> np.ndarray:
        mark = np.zeros(self.num_nodes, dtype=bool)
        stack = [node]
        while stack:
            n = stack.pop()
            if mark[n]:
                continue
            mark[n] = True
            stack.extend(self.parents[n])
        return mark

    def _depends_on(self, targets) -> np.ndarray:
        mark = np.zeros(self.num_nodes, dtype=bool)
        for t in targets:
            mark[t] = True
        for n in range(self.num_nodes):
            if not mark[n] and any(mark[p] for p in self.parents[n]):
                mark[n] = True
        return mark

    def _unbroadcast(self, g: int, target: tuple) -> int:
        """Reduce an adjoint of a broadcast result back to ``target`` shape."""
        while len(self.shapes[g]) > len(target):
            g = self.sum(g, axis=0)
        for i, t in enumerate(target):
            if t == 1 and self.shapes[g][i] != 1:
                g = self.sum(g, axis=i, keepdims=True)
        if self.shapes[g] != target:
            g = self.reshape(g, target)
        return g

    def _warn_once(self, message: str):
        if message not in self.warnings:
            self.warnings.append(message)

    def add_gradient_nodes(self, scalar_node: int, wrt: list) -> dict:
        """Append adjoint nodes for d(scalar)/d(leaf) for each leaf in ``wrt``.

        Returns a map leaf-id -> adjoint node id.  Leaves the scalar does not
        depend on get a zero constant of the leaf's shape.  The appended
        nodes are ordinary primitives, so the result supports further
        differentiation.
        """
        scalar_node = self._check(scalar_node)
        if int(np.prod(self.shapes[scalar_node], dtype=np.int64)) != 1:
            raise GraphError(
                f"gradient target must be scalar, node {scalar_node} has shape "
                f"{self.shapes[scalar_node]}"
            )
        wrt_ids = []
        for w in wrt:
            w = self._check(w)
            if self.ops[w] != "leaf":
                raise GraphError(f"gradient requested w.r.t. non-leaf node {w}")
            wrt_ids.append(w)

        relevant = self._ancestors(scalar_node)
        active = relevant & self._depends_on(wrt_ids)

        adj: dict[int, int] = {}
        adj[scalar_node] = self.constant(np.ones(self.shapes[scalar_node]))

        def accumulate(p: int, contrib: int):
            if p in adj:
                adj[p] = self.add(adj[p], contrib)
            else:
                adj[p] = contrib

        for n in range(scalar_node, -1, -1):
            if n not in adj or not active[n]:
                continue
            g = adj[n]
            op = self.ops[n]
            ps = self.parents[n]
            at = self.attrs[n]
            if op in ("leaf", "const"):
                continue
            if op == "add":
                for p in ps:
                    if active[p]:
                        accumulate(p, self._unbroadcast(g, self.shapes[p]))
            elif op == "mul":
                a, b = ps
                if active[a]:
                    accumulate(a, self._unbroadcast(self.mul(g, b), self.shapes[a]))
                if active[b]:
                    accumulate(b, self._unbroadcast(self.mul(g, a), self.shapes[b]))
            elif op == "matmul":
                a, b = ps
                if active[a]:
                    accumulate(a, self.matmul(g, self.transpose(b)))
                if active[b]:
                    accumulate(b, self.matmul(self.transpose(a), g))
            elif op == "affine":
                if active[ps[0]]:
                    accumulate(ps[0], self.affine(g, at["scale"], 0.0))
            elif op == "tanh":
                if active[ps[0]]:
                    accumulate(ps[0], self.mul(g, self.affine(self.square(n), -1.0, 1.0)))
            elif op == "sigmoid":
                if active[ps[0]]:
                    accumulate(ps[0], self.mul(g, self.mul(n, self.affine(n, -1.0, 1.0))))
            elif op == "relu":
                if active[ps[0]]:
                    self._warn_once(
                        f"relu at node {ps[0]}: subgradient 0 at 0; second-order "
                        "paths through it are piecewise-constant"
                    )
                    accumulate(ps[0], self.mul(g, self.gtzero(ps[0])))
            elif op == "exp":
                if active[ps[0]]:
                    accumulate(ps[0], self.mul(g, n))
            elif op == "log":
                if active[ps[0]]:
                    accumulate(ps[0], self.mul(g, self.reciprocal(ps[0])))
            elif op == "square":
                if active[ps[0]]:
                    accumulate(ps[0], self.mul(g, self.affine(ps[0], 2.0, 0.0)))
            elif op == "sqrt":
                if active[ps[0]]:
                    accumulate(ps[0], self.mul(g, self.affine(self.reciprocal(n), 0.5, 0.0)))
            elif op == "reciprocal":
                if active[ps[0]]:
                    accumulate(ps[0], self.mul(g, self.affine(self.square(n), -1.0, 0.0)))
            elif op in ("sum", "mean"):
                if active[ps[0]]:
                    sa = self.shapes[ps[0]]
                    axis, keepdims = at["axis"], at["keepdims"]
                    gk = g
                    if not keepdims:
                        kd = self._reduced_shape(ps[0], axis, True)
                        gk = self.reshape(g, kd)
                    spread = self.broadcast_to(gk, sa)
                    if op == "mean":
                        count = (
                            int(np.prod(sa, dtype=np.int64))
                            if axis is None
                            else sa[axis % len(sa)]
                        )
                        spread = self.affine(spread, 1.0 / count, 0.0)
                    accumulate(ps[0], spread)
            elif op == "broadcast_to":
                if active[ps[0]]:
                    accumulate(ps[0], self._unbroadcast(g, self.shapes[ps[0]]))
            elif op == "reshape":
                if active[ps[0]]:
                    accumulate(ps[0], self.reshape(g, self.shapes[ps[0]]))
            elif op == "transpose":
                if active[ps[0]]:
                    accumulate(ps[0], self.transpose(g))
            elif op == "concat":
                axis = at["axis"]
                offset = 0
                for p in ps:
                    extent = self.shapes[p][axis]
                    if active[p]:
                        accumulate(p, self.slice_axis(g, axis, offset, offset + extent))
                    offset += extent
            elif op == "slice":
                if active[ps[0]]:
                    axis, start = at["axis"], at["start"]
                    total = self.shapes[ps[0]][axis]
                    after = total - at["stop"]
                    accumulate(ps[0], self.pad_axis(g, axis, start, after))
            elif op == "pad":
                if active[ps[0]]:
                    axis, before = at["axis"], at["before"]
                    extent = self.shapes[ps[0]][axis]
                    accumulate(ps[0], self.slice_axis(g, axis, before, before + extent))
            elif op == "gtzero":
                if active[ps[0]]:
                    self._warn_once(
                        f"gtzero at node {n}: derivative is zero almost everywhere; "
                        "higher-order contribution dropped"
                    )
            elif op == "max_detached":
                pass  # detached by design; cancels in value, zero derivative is exact
            else:  # pragma: no cover - construction guards make this unreachable
                raise GraphError(f"no gradient rule for op {op!r}")

        out = {}
        for w in wrt_ids:
            out[w] = adj[w] if w in adj else self.constant(np.zeros(self.shapes[w]))
        return out


# ----------------------------------------------------------------------
# module-level operations


def forward_eval(graph: Graph, bindings: dict) -> list:
    """Evaluate every node; returns a list indexed by node id.

    ``bindings`` maps leaf names to arrays.  Extra keys are ignored so a
    superset (e.g. a full parameter dictionary) can be fed to many graphs.
    """
    vals: list = [None] * graph.num_nodes
    for n in range(graph.num_nodes):
        op = graph.ops[n]
        ps = graph.parents[n]
        at = graph.attrs[n]
        if op == "leaf":
            name = at["name"]
            if name not in bindings:
                raise GraphError(f"unbound leaf {name!r}")
            x = np.asarray(bindings[name], dtype=np.float64)
            if x.shape != graph.shapes[n]:
                raise GraphError(
                    f"leaf {name!r} expects shape {graph.shapes[n]}, got {x.shape}"
                )
            vals[n] = x
        elif op == "const":
            vals[n] = at["value"]
        elif op == "add":
            vals[n] = vals[ps[0]] + vals[ps[1]]
        elif op == "mul":
            vals[n] = vals[ps[0]] * vals[ps[1]]
        elif op == "matmul":
            vals[n] = vals[ps[0]] @ vals[ps[1]]
        elif op == "affine":
            vals[n] = vals[ps[0]] * at["scale"] + at["shift"]
        elif op == "tanh":
            vals[n] = np.tanh(vals[ps[0]])
        elif op == "relu":
            vals[n] = np.maximum(vals[ps[0]], 0.0)
        elif op == "sigmoid":
            vals[n] = 0.5 * (np.tanh(0.5 * vals[ps[0]]) + 1.0)
        elif op == "exp":
            vals[n] = np.exp(vals[ps[0]])
        elif op == "log":
            vals[n] = np.log(vals[ps[0]])
        elif op == "square":
            x = vals[ps[0]]
            vals[n] = x * x
        elif op == "sqrt":
            vals[n] = np.sqrt(vals[ps[0]])
        elif op == "reciprocal":
            vals[n] = 1.0 / vals[ps[0]]
        elif op == "gtzero":
            vals[n] = (vals[ps[0]] > 0.0).astype(np.float64)
        elif op == "sum":
            vals[n] = np.asarray(
                np.sum(vals[ps[0]], axis=at["axis"], keepdims=at["keepdims"])
            )
        elif op == "mean":
            vals[n] = np.asarray(
                np.mean(vals[ps[0]], axis=at["axis"], keepdims=at["keepdims"])
            )
        elif op == "max_detached":
            vals[n] = np.asarray(
                np.max(vals[ps[0]], axis=at["axis"], keepdims=at["keepdims"])
            )
        elif op == "broadcast_to":
            vals[n] = np.broadcast_to(vals[ps[0]], at["target"])
        elif op == "reshape":
            vals[n] = np.reshape(vals[ps[0]], at["target"])
        elif op == "transpose":
            vals[n] = vals[ps[0]].T
        elif op == "concat":
            vals[n] = np.concatenate([vals[p] for p in ps], axis=at["axis"])
        elif op == "slice":
            idx = [slice(None)] * len(graph.shapes[ps[0]])
            idx[at["axis"]] = slice(at["start"], at["stop"])
            vals[n] = vals[ps[0]][tuple(idx)]
        elif op == "pad":
            width = [(0, 0)] * len(graph.shapes[ps[0]])
            width[at["axis"]] = (at["before"], at["after"])
            vals[n] = np.pad(vals[ps[0]], width)
        else:  # pragma: no cover
            raise GraphError(f"no forward rule for op {op!r}")
    return vals


def _leaf_id(graph: Graph, leaf) -> int:
    if isinstance(leaf, str):
        if leaf not in graph.leaves:
            raise GraphError(f"unknown leaf {leaf!r}")
        return graph.leaves[leaf]
    return graph._check(leaf)


def gradient(graph: Graph, scalar_node: int, wrt, bindings: dict) -> dict:
    """Numeric reverse-mode gradients of a scalar node w.r.t. leaves.

    ``wrt`` is an iterable of leaf ids or leaf names; the returned dict is
    keyed by the identifiers given.  Unreached leaves map to zero tensors.
    """
    wrt = list(wrt)
    g2 = graph.clone()
    ids = [_leaf_id(g2, w) for w in wrt]
    adjoints = g2.add_gradient_nodes(scalar_node, ids)
    vals = forward_eval(g2, bindings)
    return {key: vals[adjoints[i]] for key, i in zip(wrt, ids)}


def input_gradient_node(graph: Graph, scalar_node: int, input_leaf) -> tuple:
    """Extend the graph with nodes computing d(scalar)/d(input_leaf).

    Returns ``(extended_graph, node_id)``; the original graph is untouched.
    The new node has the leaf's shape and remains differentiable with
    respect to every other leaf (double backpropagation).  Non-smooth
    primitives on the path leave a note in ``extended_graph.warnings``.
    """
    g2 = graph.clone()
    lid = _leaf_id(g2, input_leaf)
    adjoints = g2.add_gradient_nodes(scalar_node, [lid])
    return g2, adjoints[lid]


def finite_difference_check(
    graph: Graph, scalar_node: int, leaf, bindings: dict, step: float = 1e-5
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    The error for coordinate k is |ad_k - fd_k| / max(1e-12, |ad_k|, |fd_k|);
    non-finite values anywhere yield +inf.
    """
    if not step > 0:
        raise GraphError("finite-difference step must be positive")
    lid = _leaf_id(graph, leaf)
    name = graph.attrs[lid]["name"]
    ad = gradient(graph, scalar_node, [lid], bindings)[lid]
    base = np.asarray(bindings[name], dtype=np.float64)
    worst = 0.0
    for k in range(base.size):
        shifted = dict(bindings)
        plus = base.copy().reshape(-1)
        plus[k] += step
        shifted[name] = plus.reshape(base.shape)
        f_plus = float(forward_eval(graph, shifted)[scalar_node])
        minus = base.copy().reshape(-1)
        minus[k] -= step
        shifted[name] = minus.reshape(base.shape)
        f_minus = float(forward_eval(graph, shifted)[scalar_node])
        fd = (f_plus - f_minus) / (2.0 * step)
        adk = float(ad.reshape(-1)[k])
        if not (np.isfinite(fd) and np.isfinite(adk)):
            return float("inf")
        err = abs(adk - fd) / max(1e-12, abs(adk), abs(fd))
        worst = max(worst, err)
    return worst
