"""Exact discrete SCM oracle for the peer-effect summary graph.

Covers d-separation, backdoor-path enumeration, the graphical sequential
ignorability conditions, truncated factorisation, nested counterfactuals by
full enumeration of exogenous noise, and the do-free identification formulas
for the peer direct/indirect and self-treatment effects.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

WX, X, T, WT, WY, Y = "W_x", "X", "T", "W_t", "W_y", "Y"
SUMMARY_ORDER = (WX, X, T, WT, WY, Y)
SUMMARY_PARENTS = {
    WX: (),
    X: (),
    T: (WX, X),
    WT: (WX,),
    WY: (WX, WT),
    Y: (WX, X, T, WT, WY),
}
MAX_CARD = 4
MAX_NOISE_CONFIGS = 10**7


class OverlapError(ValueError):
    """A conditioning event needed by an identification formula has zero probability."""


@dataclass(frozen=True)
class CausalDag:
    parents: dict

    def __post_init__(self):
        parents = {v: tuple(ps) for v, ps in self.parents.items()}
        for v, ps in parents.items():
            for p in ps:
                if p not in parents:
                    raise ValueError(f"parent {p!r} of {v!r} is not a variable")
        object.__setattr__(self, "parents", parents)
        self.order  # raises on cycles

    @property
    def variables(self) -> tuple:
        return tuple(self.parents)

    @property
    def order(self) -> tuple:
        """Topological order, ties broken by declaration order."""
        done, out = set(), []
        pending = list(self.parents)
        while pending:
            progressed = False
            for v in list(pending):
                if all(p in done for p in self.parents[v]):
                    done.add(v)
                    out.append(v)
                    pending.remove(v)
                    progressed = True
            if not progressed:
                raise ValueError(f"graph has a cycle among {pending}")
        return tuple(out)

    def children(self, v) -> tuple:
        return tuple(c for c, ps in self.parents.items() if v in ps)

    def edges(self) -> set:
        return {(p, c) for c, ps in self.parents.items() for p in ps}

    def descendants(self, v) -> set:
        out, stack = set(), [v]
        while stack:
            for c in self.children(stack.pop()):
                if c not in out:
                    out.add(c)
                    stack.append(c)
        return out

    def ancestors(self, vs) -> set:
        out, stack = set(vs), list(vs)
        while stack:
            for p in self.parents[stack.pop()]:
                if p not in out:
                    out.add(p)
                    stack.append(p)
        return out

    def without_edges(self, edges) -> "CausalDag":
        edges = set(edges)
        return CausalDag({c: tuple(p for p in ps if (p, c) not in edges)
                          for c, ps in self.parents.items()})

    def _check(self, *sets):
        for s in sets:
            for v in s:
                if v not in self.parents:
                    raise KeyError(f"unknown variable {v!r}")


def summary_dag() -> CausalDag:
    """Summary graph over neighbour features/treatment/outcome exposures and the unit."""
    return CausalDag(dict(SUMMARY_PARENTS))


def d_separated(dag: CausalDag, a, b, z=()) -> bool:
    """Reachability (Bayes-ball) test of ``a`` independent of ``b`` given ``z``."""
    a, b, z = set(a), set(b), set(z)
    dag._check(a, b, z)
    if a & b or a & z or b & z:
        raise ValueError("a, b and z must be disjoint")
    anc_z = dag.ancestors(z)
    # (node, came_from_child) pairs; starting from a node counts as arriving from a child
    stack = [(v, True) for v in a]
    seen, reached = set(), set()
    while stack:
        v, up = stack.pop()
        if (v, up) in seen:
            continue
        seen.add((v, up))
        if v not in z:
            reached.add(v)
        if up and v not in z:
            stack.extend((p, True) for p in dag.parents[v])
            stack.extend((c, False) for c in dag.children(v))
        elif not up:
            if v not in z:
                stack.extend((c, False) for c in dag.children(v))
            if v in anc_z:
                stack.extend((p, True) for p in dag.parents[v])
    return not (reached & b)


def undirected_paths(dag: CausalDag, source, target, avoid=()):
    """All simple paths between two variables in the skeleton."""
    dag._check([source, target], avoid)
    nbrs = {v: set(dag.parents[v]) | set(dag.children(v)) for v in dag.variables}
    avoid = set(avoid)
    out = []

    def walk(path):
        v = path[-1]
        if v == target:
            out.append(tuple(path))
            return
        for n in sorted(nbrs[v], key=dag.variables.index):
            if n not in path and n not in avoid:
                walk(path + [n])

    walk([source])
    return out


def backdoor_paths(dag: CausalDag, source, target, avoid=()):
    """Paths from ``source`` to ``target`` whose first edge points into ``source``."""
    return [p for p in undirected_paths(dag, source, target, avoid)
            if p[1] in dag.parents[source]]


def path_blocked(dag: CausalDag, path, z) -> bool:
    """Whether conditioning on ``z`` blocks a single path."""
    z = set(z)
    dag._check(path, z)
    for prev, v, nxt in zip(path, path[1:], path[2:]):
        collider = prev in dag.parents[v] and nxt in dag.parents[v]
        if collider:
            if v not in z and not (dag.descendants(v) & z):
                return True
        elif v in z:
            return True
    return False


def format_path(dag: CausalDag, path) -> str:
    parts = [path[0]]
    for u, v in zip(path, path[1:]):
        parts.append("->" if u in dag.parents[v] else "<-")
        parts.append(v)
    return " ".join(parts)


class IgnorabilityCheck(NamedTuple):
    mediator_outcome: bool  # mediator-outcome paths blocked by w + exposure
    exposure: bool  # exposure paths blocked by w, w not downstream
    paths: tuple = ()  # (condition, path, blocked) for every backdoor path inspected

    def __bool__(self):
        return self.mediator_outcome and self.exposure


def verify_sequential_ignorability(dag: CausalDag, w, exposure=WT, mediator=WY,
                                   outcome=Y) -> IgnorabilityCheck:
    """Check the two path-blocking conditions for adjustment set ``w``.

    Mediator-outcome: ``w`` plus the exposure blocks every backdoor path from mediator to
    outcome that avoids the exposure. Exposure: ``w`` blocks every backdoor path
    from the exposure to the mediator or the outcome, and no member of ``w``
    descends from the exposure.
    """
    w = set(w)
    dag._check(w, [exposure, mediator, outcome])
    bad = w & {exposure, mediator, outcome}
    if bad:
        raise ValueError(f"adjustment set may not contain {sorted(bad)}")
    records = []
    z1 = w | {exposure}
    for p in backdoor_paths(dag, mediator, outcome, avoid=[exposure]):
        records.append(("mediator_outcome", p, path_blocked(dag, p, z1)))
    for tgt in (mediator, outcome):
        for p in backdoor_paths(dag, exposure, tgt):
            records.append(("exposure", p, path_blocked(dag, p, w)))
    c1 = all(ok for cond, _, ok in records if cond == "mediator_outcome")
    c2 = all(ok for cond, _, ok in records if cond == "exposure")
    c2 = c2 and not (w & dag.descendants(exposure))
    return IgnorabilityCheck(c1, c2, tuple(records))


@dataclass(frozen=True)
class JointTable:
    """Probability table with one axis per variable."""

    variables: tuple
    probs: np.ndarray

    def axis(self, v) -> int:
        try:
            return self.variables.index(v)
        except ValueError:
            raise KeyError(f"variable {v!r} not in table {self.variables}") from None

    def card(self, v) -> int:
        return self.probs.shape[self.axis(v)]

    def marginal(self, keep) -> "JointTable":
        keep = tuple(keep)
        drop = tuple(i for i, v in enumerate(self.variables) if v not in keep)
        probs = self.probs.sum(axis=drop)
        kept = tuple(v for v in self.variables if v in keep)
        perm = [kept.index(v) for v in keep]
        return JointTable(keep, np.transpose(probs, perm))

    def prob(self, **event) -> float:
        idx = tuple(event.get(v, slice(None)) for v in self.variables)
        return float(np.sum(self.probs[idx]))

    def expectation(self, target, **given) -> float:
        """E[target | given] using level index as the numeric value."""
        denom = self.prob(**given)
        if denom <= 0:
            raise OverlapError(f"P({_event_str(given)}) = 0")
        num = sum(y * self.prob(**given, **{target: y}) for y in range(self.card(target)))
        return num / denom


def _event_str(event) -> str:
    return ", ".join(f"{k}={v}" for k, v in event.items()) or "{}"


@dataclass
class DiscreteSCM:
    """Markovian SCM with finite domains and independent finite exogenous noise.

    ``mechanisms[v]`` is an integer array indexed by the parent values (in the
    DAG's parent order) followed by the noise value.
    """

    dag: CausalDag
    cards: dict
    mechanisms: dict
    noise: dict
    _cpts: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        for v in self.dag.variables:
            card = int(self.cards[v])
            if not 1 <= card <= MAX_CARD:
                raise ValueError(f"cardinality of {v} must lie in [1, {MAX_CARD}]")
            noise = np.asarray(self.noise[v], dtype=float)
            if noise.ndim != 1 or noise.size == 0 or np.any(noise < 0):
                raise ValueError(f"noise table of {v} must be a nonnegative vector")
            if abs(noise.sum() - 1) > 1e-12:
                raise ValueError(f"noise table of {v} sums to {noise.sum()}")
            mech = np.asarray(self.mechanisms[v], dtype=np.int64)
            shape = tuple(int(self.cards[p]) for p in self.dag.parents[v]) + (noise.size,)
            if mech.shape != shape:
                raise ValueError(f"mechanism of {v} has shape {mech.shape}, expected {shape}")
            if mech.min() < 0 or mech.max() >= card:
                raise ValueError(f"mechanism of {v} leaves its domain")
            self.noise[v] = noise
            self.mechanisms[v] = mech

    def cpt(self, v) -> np.ndarray:
        """P(v | parents) with the variable's own axis last."""
        if v not in self._cpts:
            mech, noise = self.mechanisms[v], self.noise[v]
            onehot = np.eye(self.cards[v])[mech]  # (*parents, noise, card)
            self._cpts[v] = np.tensordot(onehot, noise, axes=([-2], [0]))
        return self._cpts[v]

    def _check_do(self, do):
        for v, val in do.items():
            if v not in self.cards:
                raise KeyError(f"unknown variable {v!r}")
            vals = np.atleast_1d(val)
            if np.any(vals < 0) or np.any(vals >= self.cards[v]):
                raise ValueError(f"do({v}={val}) outside domain of size {self.cards[v]}")

    def evaluate(self, noise_values: dict, do=None) -> dict:
        """Propagate explicit noise values (arrays) through the mechanisms."""
        do = do or {}
        vals = {}
        for v in self.dag.order:
            if v in do:
                vals[v] = np.broadcast_to(np.asarray(do[v], dtype=np.int64),
                                          np.shape(noise_values[v])).copy()
                continue
            idx = tuple(vals[p] for p in self.dag.parents[v]) + (noise_values[v],)
            vals[v] = self.mechanisms[v][idx]
        return vals

    def noise_grid(self):
        """Every joint noise configuration with its probability."""
        sizes = [self.noise[v].size for v in self.dag.order]
        total = int(np.prod(sizes))
        if total > MAX_NOISE_CONFIGS:
            raise ValueError(f"noise domain has {total} configurations; too many to enumerate")
        grid = np.indices(sizes).reshape(len(sizes), -1)
        u = {v: grid[k] for k, v in enumerate(self.dag.order)}
        weight = np.ones(total)
        for v in self.dag.order:
            weight = weight * self.noise[v][u[v]]
        return u, weight

    def sample(self, n: int, rng, do=None) -> dict:
        u = {v: rng.choice(self.noise[v].size, size=n, p=self.noise[v]) for v in self.dag.order}
        return self.evaluate(u, do)

    def to_json(self) -> dict:
        return {"variables": {v: {"card": int(self.cards[v]),
                                  "parents": list(self.dag.parents[v]),
                                  "noise": self.noise[v].tolist(),
                                  "mechanism": self.mechanisms[v].tolist()}
                              for v in self.dag.variables}}

    @classmethod
    def from_json(cls, data: dict) -> "DiscreteSCM":
        variables = data["variables"]
        dag = CausalDag({v: tuple(s["parents"]) for v, s in variables.items()})
        return cls(dag, {v: s["card"] for v, s in variables.items()},
                   {v: np.array(s["mechanism"]) for v, s in variables.items()},
                   {v: np.array(s["noise"], dtype=float) for v, s in variables.items()})

    @classmethod
    def load(cls, path) -> "DiscreteSCM":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def interventional_distribution(scm: DiscreteSCM, do=None) -> JointTable:
    """Truncated factorisation: drop the factors of intervened variables."""
    do = dict(do or {})
    scm._check_do(do)
    order = scm.dag.order
    shape = tuple(scm.cards[v] for v in order)
    joint = np.ones(shape)
    for v in order:
        axes = [order.index(p) for p in scm.dag.parents[v]] + [order.index(v)]
        if v in do:
            factor = np.zeros(scm.cards[v])
            factor[int(do[v])] = 1.0
            axes = [order.index(v)]
        else:
            factor = scm.cpt(v)
        # move factor axes into position and broadcast
        view = [1] * len(order)
        for k, ax in enumerate(axes):
            view[ax] = factor.shape[k]
        perm = np.argsort(axes)
        joint = joint * np.transpose(factor, perm).reshape(view)
    table = JointTable(order, joint)
    return table.marginal([v for v in order if v not in do])


def observational_joint(scm: DiscreteSCM) -> JointTable:
    return interventional_distribution(scm, {})


@dataclass(frozen=True)
class EffectQuery:
    """Contrast levels: exposure ``w_t`` vs ``w_t_prime``, treatment ``t`` vs ``t_prime``.

    Levels are domain indices for the discrete oracle, and reals (scalars or
    per-unit arrays) for the network estimator.
    """

    w_t: object = 0
    w_t_prime: object = 1
    t: object = 0
    t_prime: object = 1


def counterfactual_mean(scm: DiscreteSCM, do: dict, target=Y) -> float:
    """E[target under do] by enumerating every noise configuration."""
    scm._check_do(do)
    u, weight = scm.noise_grid()
    return float(np.dot(weight, scm.evaluate(u, do)[target]))


def nested_counterfactual_mean(scm: DiscreteSCM, q: EffectQuery, target: str = "PDE") -> float:
    """Exact PDE, PIE or STE by enumeration over all exogenous noise.

    PDE = E[Y(w', W_y(w')) - Y(w, W_y(w'))]
    PIE = E[Y(w, W_y(w')) - Y(w, W_y(w))]
    STE = E[Y(t') - Y(t)]
    """
    target = target.upper()
    u, weight = scm.noise_grid()
    if target == "STE":
        scm._check_do({T: q.t})
        scm._check_do({T: q.t_prime})
        y1 = scm.evaluate(u, {T: q.t_prime})[Y]
        y0 = scm.evaluate(u, {T: q.t})[Y]
        return float(np.dot(weight, y1 - y0))
    scm._check_do({WT: q.w_t})
    scm._check_do({WT: q.w_t_prime})
    med_prime = scm.evaluate(u, {WT: q.w_t_prime})[WY]
    y_cross = scm.evaluate(u, {WT: q.w_t, WY: med_prime})[Y]
    if target == "PDE":
        y_top = scm.evaluate(u, {WT: q.w_t_prime, WY: med_prime})[Y]
        return float(np.dot(weight, y_top - y_cross))
    if target == "PIE":
        y_base = scm.evaluate(u, {WT: q.w_t})[Y]
        return float(np.dot(weight, y_cross - y_base))
    raise ValueError(f"unknown target {target!r}; expected PDE, PIE or STE")


def _wx_levels(joint: JointTable, w_x):
    if w_x is not None:
        if joint.prob(**{WX: w_x}) <= 0:
            raise OverlapError(f"P({WX}={w_x}) = 0")
        return [(w_x, 1.0)]
    return [(v, joint.prob(**{WX: v})) for v in range(joint.card(WX))
            if joint.prob(**{WX: v}) > 0]


def _mediator_prob(joint, wy, wt, wx) -> float:
    denom = joint.prob(**{WT: wt, WX: wx})
    if denom <= 0:
        raise OverlapError(f"P({WT}={wt}, {WX}={wx}) = 0")
    return joint.prob(**{WY: wy, WT: wt, WX: wx}) / denom


def _outcome_mean(joint, wt, wy, wx) -> float:
    event = {WT: wt, WY: wy, WX: wx}
    if joint.prob(**event) <= 0:
        raise OverlapError(f"P({_event_str(event)}) = 0")
    return joint.expectation(Y, **event)


def _check_overlap(joint, q, levels):
    # every (w_t, w_y, w_x) cell the formulas touch must carry mass
    for wx, _ in levels:
        for wt in (q.w_t, q.w_t_prime):
            for wy in range(joint.card(WY)):
                if _mediator_prob(joint, wy, wt, wx) <= 0:
                    raise OverlapError(
                        f"P({WY}={wy} | {WT}={wt}, {WX}={wx}) = 0 violates overlap")


def identified_pde(joint: JointTable, q: EffectQuery, w_x=None) -> float:
    """Sum over w_x, w_y' of P(w_x) P(w_y' | w_t', w_x) [E(Y|w_t',w_y',w_x) - E(Y|w_t,w_y',w_x)].

    With ``w_x`` given, the effect conditional on that neighbour-feature level.
    """
    levels = _wx_levels(joint, w_x)
    _check_overlap(joint, q, levels)
    total = 0.0
    for wx, pwx in levels:
        for wy in range(joint.card(WY)):
            pm = _mediator_prob(joint, wy, q.w_t_prime, wx)
            diff = (_outcome_mean(joint, q.w_t_prime, wy, wx)
                    - _outcome_mean(joint, q.w_t, wy, wx))
            total += pwx * pm * diff
    return total


def identified_pie(joint: JointTable, q: EffectQuery, w_x=None) -> float:
    """Sum over w_x, w_y of P(w_x) E(Y|w_t,w_y,w_x) [P(w_y|w_t',w_x) - P(w_y|w_t,w_x)]."""
    levels = _wx_levels(joint, w_x)
    _check_overlap(joint, q, levels)
    total = 0.0
    for wx, pwx in levels:
        for wy in range(joint.card(WY)):
            shift = (_mediator_prob(joint, wy, q.w_t_prime, wx)
                     - _mediator_prob(joint, wy, q.w_t, wx))
            total += pwx * _outcome_mean(joint, q.w_t, wy, wx) * shift
    return total


def identified_ste(joint: JointTable, q: EffectQuery) -> float:
    """Sum over x, w_x of P(x) P(w_x) [E(Y|t',x,w_x) - E(Y|t,x,w_x)].

    The product P(x) P(w_x) relies on own and neighbour features being
    independent roots, as they are in the summary graph.
    """
    total = 0.0
    for x in range(joint.card(X)):
        px = joint.prob(**{X: x})
        for wx in range(joint.card(WX)):
            pwx = joint.prob(**{WX: wx})
            if px * pwx <= 0:
                continue
            diff = 0.0
            for t, sign in ((q.t_prime, 1.0), (q.t, -1.0)):
                event = {T: t, X: x, WX: wx}
                if joint.prob(**event) <= 0:
                    raise OverlapError(f"P({_event_str(event)}) = 0 violates overlap")
                diff += sign * joint.expectation(Y, **event)
            total += px * pwx * diff
    return total


def random_summary_scm(rng, cards=(2, 3), extra_noise: int = 1) -> DiscreteSCM:
    """Random SCM on the summary graph with every conditional strictly positive.

    Each mechanism is surjective in the noise for every parent configuration,
    and noise tables are strictly positive, so all cells have mass.
    """
    dag = summary_dag()
    card = {v: int(rng.choice(cards)) for v in dag.variables}
    mechs, noise = {}, {}
    for v in dag.variables:
        n_noise = card[v] + extra_noise
        pshape = tuple(card[p] for p in dag.parents[v])
        mech = np.empty(pshape + (n_noise,), dtype=np.int64)
        for idx in itertools.product(*(range(s) for s in pshape)):
            vals = np.concatenate([np.arange(card[v]), rng.integers(0, card[v], extra_noise)])
            mech[idx] = rng.permutation(vals)
        p = rng.dirichlet(np.ones(n_noise)) + 0.02
        noise[v] = p / p.sum()
        mechs[v] = mech
    return DiscreteSCM(dag, card, mechs, noise)


def linear_summary_scm(y_fn, card: int = 2) -> DiscreteSCM:
    """Summary-graph SCM whose outcome is ``y_fn(w_t, w_y)`` clamped to the domain.

    Upstream variables copy uniform noise (W_y follows W_t with probability 3/4),
    so the nested counterfactuals have small hand-checkable values.
    """
    dag = summary_dag()
    cards = {v: card for v in dag.variables}
    ycard = MAX_CARD
    cards[Y] = ycard
    uniform = np.full(card, 1.0 / card)
    mechs, noise = {}, {}
    for v in (WX, X):
        mechs[v] = np.arange(card)
        noise[v] = uniform
    mechs[T] = np.broadcast_to(np.arange(card), (card, card, card)).copy()
    noise[T] = uniform
    mechs[WT] = np.broadcast_to(np.arange(card), (card, card)).copy()
    noise[WT] = uniform
    # W_y: noise 0..2 copies W_t, noise 3 draws the flipped level
    wy = np.empty((card, card, 4), dtype=np.int64)
    for wx, wt in itertools.product(range(card), range(card)):
        wy[wx, wt] = [wt, wt, wt, (wt + 1) % card]
    mechs[WY] = wy
    noise[WY] = np.full(4, 0.25)
    ymech = np.empty((card,) * 5 + (1,), dtype=np.int64)
    for wx, x, t, wt, wyv in itertools.product(range(card), repeat=5):
        ymech[wx, x, t, wt, wyv, 0] = int(np.clip(y_fn(wt, wyv), 0, ycard - 1))
    mechs[Y] = ymech
    noise[Y] = np.ones(1)
    return DiscreteSCM(dag, cards, mechs, noise)
