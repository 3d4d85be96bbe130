"""Bounded equality saturation over abstract expressions, and subexpression entailment.

An e-graph is seeded with the target expressions and saturated under the
equivalence axioms (each applied in both directions). ``x = sum(1, x)`` is
built in: a reduction of extent 1 is never materialized. After saturation a
term ``e`` is a subexpression of a target iff ``e`` is represented in the
e-graph and its class is reachable from a target's class through child
edges. The subexpression axioms cover every child position once
commutativity is taken into account, so reachability is exactly the
transitive closure they describe.
"""

from __future__ import annotations

import threading
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .expr import Expr, expr_key, normalize

Node = tuple  # (op, k_or_name, *child_class_ids)

AXIOMS = (
    "add-comm", "mul-comm", "add-assoc", "mul-assoc", "mul-add-distrib", "div-add",
    "mul-div", "div-div", "sum-identity", "sum-sum", "sum-add", "sum-mul", "sum-div",
    "exp-add", "sqrt-mul",
)


class BudgetExhausted(Exception):
    """Raised (or reported) when saturation stopped before reaching a fixpoint."""


class EGraph:
    def __init__(self) -> None:
        self.parent: list[int] = []
        self.classes: dict[int, set[Node]] = {}
        self.memo: dict[Node, int] = {}
        self.axiom_log: Counter[str] = Counter()

    # -- core -------------------------------------------------------------
    def find(self, a: int) -> int:
        root = a
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[a] != root:
            self.parent[a], a = root, self.parent[a]
        return root

    def canon(self, node: Node) -> Node:
        if node[0] == "var":
            return node
        return (node[0], node[1]) + tuple(self.find(c) for c in node[2:])

    def add(self, node: Node) -> int:
        if node[0] == "sum" and node[1] == 1:
            return self.find(node[2])
        node = self.canon(node)
        cid = self.memo.get(node)
        if cid is not None:
            return self.find(cid)
        cid = len(self.parent)
        self.parent.append(cid)
        self.classes[cid] = {node}
        self.memo[node] = cid
        return cid

    def lookup_node(self, node: Node) -> int | None:
        if node[0] == "sum" and node[1] == 1:
            return self.find(node[2])
        cid = self.memo.get(self.canon(node))
        return None if cid is None else self.find(cid)

    def union(self, a: int, b: int, axiom: str) -> bool:
        a, b = self.find(a), self.find(b)
        if a == b:
            return False
        self.axiom_log[axiom] += 1
        if len(self.classes[a]) < len(self.classes[b]):
            a, b = b, a
        self.parent[b] = a
        self.classes[a] |= self.classes.pop(b)
        return True

    def rebuild(self) -> None:
        """Restore congruence: re-canonicalize nodes until no class merges."""
        while True:
            merged = False
            memo: dict[Node, int] = {}
            for cid in list(self.classes):
                if cid not in self.classes:
                    continue
                for node in sorted(self.classes[cid]):
                    cn = self.canon(node)
                    other = memo.get(cn)
                    root = self.find(cid)
                    if other is not None and self.find(other) != root:
                        self.union(other, root, "congruence")
                        merged = True
                    memo[cn] = self.find(cid)
            if not merged:
                break
        self.memo = memo
        for cid in list(self.classes):
            self.classes[cid] = {self.canon(n) for n in self.classes[cid]}

    @property
    def num_nodes(self) -> int:
        return len(self.memo)

    # -- terms ------------------------------------------------------------
    def add_expr(self, e: Expr) -> int:
        if e.op == "var":
            return self.add(("var", e.name))
        kids = tuple(self.add_expr(a) for a in e.args)
        return self.add((e.op, e.k) + kids)

    def lookup(self, e: Expr) -> int | None:
        if e.op == "var":
            return self.lookup_node(("var", e.name))
        kids = []
        for a in e.args:
            c = self.lookup(a)
            if c is None:
                return None
            kids.append(c)
        return self.lookup_node((e.op, e.k) + tuple(kids))

    def nodes(self, cid: int, op: str) -> list[Node]:
        return sorted(n for n in self.classes[self.find(cid)] if n[0] == op)

    def reachable(self, roots: Iterable[int]) -> set[int]:
        seen: set[int] = set()
        stack = [self.find(r) for r in roots]
        while stack:
            c = stack.pop()
            if c in seen:
                continue
            seen.add(c)
            for n in self.classes[c]:
                if n[0] != "var":
                    stack.extend(self.find(k) for k in n[2:])
        return seen

    # -- saturation -------------------------------------------------------
    def saturate(self, node_limit: int = 10_000, iter_limit: int = 8) -> bool:
        """Apply every axiom to a fixpoint; False if a limit stopped it first."""
        for _ in range(iter_limit):
            before = (self.num_nodes, len(self.classes))
            matches = []
            for cid in list(self.classes):
                for node in sorted(self.classes.get(cid, ())):
                    matches.extend(self._match(cid, node))
            for cid, build, axiom in matches:
                if self.num_nodes >= node_limit:
                    self.rebuild()
                    return False
                new = build()
                self.union(cid, new, axiom)
            self.rebuild()
            if (self.num_nodes, len(self.classes)) == before:
                return True
            if self.num_nodes >= node_limit:
                return False
        return False

    def _match(self, cid: int, n: Node):
        op = n[0]
        A = self.add
        N = self.nodes
        out = []
        if op == "add":
            a, b = n[2], n[3]
            out.append((cid, lambda: A(("add", 0, b, a)), "add-comm"))
            for nb in N(b, "add"):
                out.append((cid, lambda nb=nb: A(("add", 0, A(("add", 0, a, nb[2])), nb[3])), "add-assoc"))
            for na in N(a, "add"):
                out.append((cid, lambda na=na: A(("add", 0, na[2], A(("add", 0, na[3], b)))), "add-assoc"))
            for na in N(a, "mul"):
                for nb in N(b, "mul"):
                    if self.find(na[3]) == self.find(nb[3]):
                        out.append((cid, lambda na=na, nb=nb: A(("mul", 0, A(("add", 0, na[2], nb[2])), na[3])),
                                    "mul-add-distrib"))
            for na in N(a, "div"):
                for nb in N(b, "div"):
                    if self.find(na[3]) == self.find(nb[3]):
                        out.append((cid, lambda na=na, nb=nb: A(("div", 0, A(("add", 0, na[2], nb[2])), na[3])),
                                    "div-add"))
            for na in N(a, "sum"):
                for nb in N(b, "sum"):
                    if na[1] == nb[1]:
                        out.append((cid, lambda na=na, nb=nb: A(("sum", na[1], A(("add", 0, na[2], nb[2])))),
                                    "sum-add"))
        elif op == "mul":
            a, b = n[2], n[3]
            out.append((cid, lambda: A(("mul", 0, b, a)), "mul-comm"))
            for nb in N(b, "mul"):
                out.append((cid, lambda nb=nb: A(("mul", 0, A(("mul", 0, a, nb[2])), nb[3])), "mul-assoc"))
            for na in N(a, "mul"):
                out.append((cid, lambda na=na: A(("mul", 0, na[2], A(("mul", 0, na[3], b)))), "mul-assoc"))
            for na in N(a, "add"):
                out.append((cid, lambda na=na: A(("add", 0, A(("mul", 0, na[2], b)), A(("mul", 0, na[3], b)))),
                            "mul-add-distrib"))
            for nb in N(b, "div"):
                out.append((cid, lambda nb=nb: A(("div", 0, A(("mul", 0, a, nb[2])), nb[3])), "mul-div"))
            for na in N(a, "sum"):
                out.append((cid, lambda na=na: A(("sum", na[1], A(("mul", 0, na[2], b)))), "sum-mul"))
            ea, eb = N(a, "exp"), N(b, "exp")
            for na in ea:
                for nb in eb:
                    out.append((cid, lambda na=na, nb=nb: A(("exp", 0, A(("add", 0, na[2], nb[2])))), "exp-add"))
            sa, sb = N(a, "sqrt"), N(b, "sqrt")
            for na in sa:
                for nb in sb:
                    out.append((cid, lambda na=na, nb=nb: A(("sqrt", 0, A(("mul", 0, na[2], nb[2])))), "sqrt-mul"))
        elif op == "div":
            a, b = n[2], n[3]
            for na in N(a, "add"):
                out.append((cid, lambda na=na: A(("add", 0, A(("div", 0, na[2], b)), A(("div", 0, na[3], b)))),
                            "div-add"))
            for na in N(a, "mul"):
                out.append((cid, lambda na=na: A(("mul", 0, na[2], A(("div", 0, na[3], b)))), "mul-div"))
            for na in N(a, "div"):
                out.append((cid, lambda na=na: A(("div", 0, na[2], A(("mul", 0, na[3], b)))), "div-div"))
            for nb in N(b, "mul"):
                out.append((cid, lambda nb=nb: A(("div", 0, A(("div", 0, a, nb[2])), nb[3])), "div-div"))
            for na in N(a, "sum"):
                out.append((cid, lambda na=na: A(("sum", na[1], A(("div", 0, na[2], b)))), "sum-div"))
        elif op == "sum":
            k, a = n[1], n[2]
            for na in N(a, "sum"):
                out.append((cid, lambda na=na: A(("sum", k * na[1], na[2])), "sum-sum"))
            for i in _proper_divisors(k):
                out.append((cid, lambda i=i: A(("sum", i, A(("sum", k // i, a)))), "sum-sum"))
            for na in N(a, "add"):
                out.append((cid, lambda na=na: A(("add", 0, A(("sum", k, na[2])), A(("sum", k, na[3])))), "sum-add"))
            for na in N(a, "mul"):
                out.append((cid, lambda na=na: A(("mul", 0, A(("sum", k, na[2])), na[3])), "sum-mul"))
            for na in N(a, "div"):
                out.append((cid, lambda na=na: A(("div", 0, A(("sum", k, na[2])), na[3])), "sum-div"))
        elif op == "exp":
            for na in N(n[2], "add"):
                out.append((cid, lambda na=na: A(("mul", 0, A(("exp", 0, na[2])), A(("exp", 0, na[3])))), "exp-add"))
        elif op == "sqrt":
            for na in N(n[2], "mul"):
                out.append((cid, lambda na=na: A(("mul", 0, A(("sqrt", 0, na[2])), A(("sqrt", 0, na[3])))),
                            "sqrt-mul"))
        return out


def _proper_divisors(k: int) -> list[int]:
    return [i for i in range(2, k) if k % i == 0]


class Verdict:
    TRUE = "true"
    FALSE = "false"
    BUDGET = "budget-exhausted"


@dataclass
class EntailmentStats:
    queries: int = 0
    cache_hits: int = 0
    budget_exhausted: int = 0

    def to_json(self) -> dict:
        return {"queries": self.queries, "cacheHits": self.cache_hits,
                "budgetExhausted": self.budget_exhausted}


@dataclass
class Entailment:
    """Decides ``subexpr(e, t)`` for some target ``t`` up to the equivalence axioms.

    The e-graph is saturated once per target set; queries are cached by the
    normalized term.
    """

    targets: Sequence[Expr]
    node_limit: int = 10_000
    iter_limit: int = 8
    egraph: EGraph = field(init=False)
    complete: bool = field(init=False)
    stats: EntailmentStats = field(default_factory=EntailmentStats)

    def __post_init__(self) -> None:
        self.egraph = EGraph()
        roots = [self.egraph.add_expr(t) for t in self.targets]
        self.complete = self.egraph.saturate(self.node_limit, self.iter_limit)
        self._reach = self.egraph.reachable(roots)
        self._cache: dict[str, str] = {}
        self._lock = threading.Lock()

    def class_of(self, e: Expr) -> int | None:
        """E-class id of ``e`` if it is represented, else None."""
        c = self.egraph.lookup(normalize(e))
        if c is None:
            c = self.egraph.lookup(e)
        return None if c is None else self.egraph.find(c)

    def class_in_target(self, cid: int | None) -> bool:
        return cid is not None and self.egraph.find(cid) in self._reach

    def check(self, e: Expr) -> str:
        key = expr_key(e)
        with self._lock:
            self.stats.queries += 1
            hit = self._cache.get(key)
            if hit is not None:
                self.stats.cache_hits += 1
                return hit
        if self.class_in_target(self.class_of(e)):
            verdict = Verdict.TRUE
        elif self.complete:
            verdict = Verdict.FALSE
        else:
            verdict = Verdict.BUDGET
        with self._lock:
            if verdict == Verdict.BUDGET:
                self.stats.budget_exhausted += 1
            self._cache[key] = verdict
        return verdict

    def __call__(self, e: Expr) -> bool:
        return self.check(e) == Verdict.TRUE


def is_subexpr(e: Expr, targets: Sequence[Expr], node_limit: int = 10_000,
               iter_limit: int = 8, strict: bool = False) -> bool:
    """True iff ``subexpr(e, t)`` is derivable for some target within the budget.

    With ``strict=True`` a budget-limited negative raises ``BudgetExhausted``
    instead of returning False.
    """
    ent = Entailment(list(targets), node_limit, iter_limit)
    verdict = ent.check(e)
    if verdict == Verdict.BUDGET and strict:
        raise BudgetExhausted(f"saturation stopped at {ent.egraph.num_nodes} nodes")
    return verdict == Verdict.TRUE


def equivalent(a: Expr, b: Expr, node_limit: int = 10_000, iter_limit: int = 8) -> bool:
    """True iff ``a = b`` is derivable from the equivalence axioms within the budget."""
    eg = EGraph()
    ca = eg.add_expr(a)
    cb = eg.add_expr(b)
    if eg.find(ca) == eg.find(cb):
        return True
    for _ in range(iter_limit):
        done = eg.saturate(node_limit, 1)
        if eg.find(ca) == eg.find(cb):
            return True
        if done or eg.num_nodes >= node_limit:
            break
    return False
