"""Conjunctive rule language over object-slot concept matrices.

A concept matrix is ``z in [0,1]^{O x A}``: O object slots, A attribute
columns organized in named groups (e.g. shape/size/material/color plus an
optional presence flag). A :class:`Rule` is a class-level conjunction of
rule-objects, each a set of (group = value) conditions.

Soft semantics: product t-norm for conjunction, hard max over injective
assignments of rule-objects to slots. Every rule-object is additionally
gated by the slot's presence activation, so rules demanding more objects
than a sample contains score zero. The semantics keep an exhaustive
brute-force oracle exact, which the tests rely on.
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass, field

import numpy as np


class RuleError(ValueError):
    pass


@dataclass(frozen=True)
class ConceptGroup:
    name: str
    values: tuple[str, ...]


@dataclass(frozen=True)
class ConceptSpace:
    """Attribute vocabulary: ordered groups of one-hot columns."""

    groups: tuple[ConceptGroup, ...]
    presence: str | None = None  # name of the single-column presence group

    def __post_init__(self):
        names = [g.name for g in self.groups]
        if len(set(names)) != len(names):
            raise RuleError("duplicate group names")
        if self.presence is not None and self.presence not in names:
            raise RuleError(f"presence group {self.presence!r} not declared")

    @property
    def n_attrs(self) -> int:
        return sum(len(g.values) for g in self.groups)

    def group(self, name: str) -> ConceptGroup:
        for g in self.groups:
            if g.name == name:
                return g
        raise RuleError(f"unknown attribute group {name!r}")

    def offset(self, name: str) -> int:
        off = 0
        for g in self.groups:
            if g.name == name:
                return off
            off += len(g.values)
        raise RuleError(f"unknown attribute group {name!r}")

    def column(self, group: str, value: str) -> int:
        g = self.group(group)
        if value not in g.values:
            raise RuleError(f"unknown value {value!r} for group {group!r}")
        return self.offset(group) + g.values.index(value)

    def column_name(self, col: int) -> tuple[str, str]:
        off = 0
        for g in self.groups:
            if col < off + len(g.values):
                return g.name, g.values[col - off]
            off += len(g.values)
        raise RuleError(f"column {col} out of range")

    def presence_column(self) -> int | None:
        return None if self.presence is None else self.offset(self.presence)


def hans_space(n_colors: int = 8) -> ConceptSpace:
    """Default desk geometry: shape(3)+size(2)+material(2)+color(n)+presence."""
    colors = ("gray", "red", "blue", "green", "brown", "purple", "cyan", "yellow")[:n_colors]
    return ConceptSpace(
        groups=(
            ConceptGroup("shape", ("cube", "sphere", "cylinder")),
            ConceptGroup("size", ("small", "large")),
            ConceptGroup("material", ("rubber", "metal")),
            ConceptGroup("color", colors),
            ConceptGroup("presence", ("yes",)),
        ),
        presence="presence",
    )


def cub_space(n_groups: int = 28, n_values: int = 4) -> ConceptSpace:
    """Generic bird-concept stand-in: n_groups one-hot groups, no presence."""
    return ConceptSpace(
        groups=tuple(
            ConceptGroup(f"c{i:02d}", tuple(f"v{j}" for j in range(n_values)))
            for i in range(n_groups)
        )
    )


Condition = tuple[str, str]  # (group name, value name)


@dataclass(frozen=True)
class Rule:
    """Class-level conjunctive explanation in canonical form."""

    class_id: int
    objects: tuple[tuple[Condition, ...], ...]

    @staticmethod
    def make(class_id: int, objects) -> "Rule":
        canon = []
        for conds in objects:
            conds = tuple(sorted(set((str(g), str(v)) for g, v in conds)))
            if not conds:
                raise RuleError("rule-object with no conditions")
            groups = [g for g, _ in conds]
            if len(set(groups)) != len(groups):
                raise RuleError(f"multiple conditions on one group: {conds}")
            canon.append(conds)
        if not canon:
            raise RuleError("rule with no objects")
        return Rule(int(class_id), tuple(sorted(canon)))

    @property
    def n_objects(self) -> int:
        return len(self.objects)

    @property
    def n_conditions(self) -> int:
        return sum(len(o) for o in self.objects)

    def canonical(self) -> tuple:
        return self.objects

    def same_conditions(self, other: "Rule") -> bool:
        return self.objects == other.objects


def print_rule(rule: Rule) -> str:
    """Round-trippable text form: classK(X):- in(O1,X),group(O1,value),..."""
    atoms = [f"in(O{i + 1},X)" for i in range(rule.n_objects)]
    for i, conds in enumerate(rule.objects):
        atoms.extend(f"{g}(O{i + 1},{v})" for g, v in conds)
    return f"class{rule.class_id}(X):- " + ",".join(atoms)


_HEAD = re.compile(r"^class(\d+)\(X\)$")
_ATOM = re.compile(r"^(\w+)\(O(\d+),([\w]+)\)$")


def parse_rule(text: str) -> Rule:
    text = text.strip().rstrip(".")
    if ":-" not in text:
        raise RuleError(f"not a rule: {text!r}")
    head, body = text.split(":-", 1)
    m = _HEAD.match(head.strip())
    if not m:
        raise RuleError(f"bad rule head: {head!r}")
    class_id = int(m.group(1))
    objects: dict[int, list[Condition]] = {}
    # atoms contain commas inside parens, so split on "),"
    atoms = [a if a.endswith(")") else a + ")" for a in body.replace(" ", "").split("),") if a]
    for atom in atoms:
        m = _ATOM.match(atom)
        if not m:
            raise RuleError(f"bad atom: {atom!r}")
        name, obj, value = m.group(1), int(m.group(2)), m.group(3)
        if name == "in":
            objects.setdefault(obj - 1, [])
        else:
            objects.setdefault(obj - 1, []).append((name, value))
    return Rule.make(class_id, [objects[i] for i in sorted(objects)])


# ---------------------------------------------------------------------------
# soft evaluation
#
# Candidate sets repeat the same rule-objects thousands of times, so the
# evaluator caches per-object slot scores across rules and vectorizes the
# product over injective assignments.

_PERM_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _permutations(n_obj: int, n_slots: int) -> np.ndarray:
    key = (n_obj, n_slots)
    p = _PERM_CACHE.get(key)
    if p is None:
        p = np.array(list(itertools.permutations(range(n_slots), n_obj)), dtype=np.intp)
        p = p.reshape(-1, n_obj)
        _PERM_CACHE[key] = p
    return p


class Evaluator:
    """Soft rule evaluation over a fixed batch of concept matrices."""

    def __init__(self, z: np.ndarray, space: ConceptSpace):
        z = np.asarray(z, dtype=np.float64)
        self.z = z if z.ndim == 3 else z[None]
        self.space = space
        pcol = space.presence_column()
        self.presence = (self.z[:, :, pcol] if pcol is not None
                         else np.ones(self.z.shape[:2]))
        self._objects: dict[tuple, np.ndarray] = {}

    def object_scores(self, conds: tuple) -> np.ndarray:
        """[S, O]: presence-gated product of the condition activations."""
        m = self._objects.get(conds)
        if m is None:
            m = self.presence.copy()
            for g, v in conds:
                m = m * self.z[:, :, self.space.column(g, v)]
            self._objects[conds] = m
        return m

    def _assignment_values(self, rule: Rule) -> tuple[np.ndarray, np.ndarray]:
        """(values [S, P], perms [P, n_obj]) over injective assignments."""
        n_slots = self.z.shape[1]
        if rule.n_objects > n_slots:
            return np.zeros((self.z.shape[0], 1)), np.zeros((1, rule.n_objects), dtype=np.intp)
        perms = _permutations(rule.n_objects, n_slots)
        vals = self.object_scores(rule.objects[0])[:, perms[:, 0]]
        for j in range(1, rule.n_objects):
            vals = vals * self.object_scores(rule.objects[j])[:, perms[:, j]]
        return vals, perms

    def validity(self, rule: Rule) -> np.ndarray:
        """[S] max over injective object-to-slot assignments."""
        if rule.n_objects == 1:
            return self.object_scores(rule.objects[0]).max(axis=1)
        vals, _ = self._assignment_values(rule)
        return vals.max(axis=1)

    def best_assignment(self, rule: Rule) -> np.ndarray:
        """[S, n_obj] validity-maximizing slots (first max on ties)."""
        vals, perms = self._assignment_values(rule)
        return perms[np.argmax(vals, axis=1)]

    def validity_many(self, rules: list[Rule], chunk: int = 4096) -> np.ndarray:
        """[R, S] validities for many rules sharing this batch.

        Rules are grouped by object count; each group runs a subset DP over
        slots (Held-Karp style) vectorized across rules and samples, which
        is exact for the max-product assignment because all scores are
        non-negative.
        """
        n_s, n_slots = self.z.shape[0], self.z.shape[1]
        out = np.zeros((len(rules), n_s))
        by_size: dict[int, list[int]] = {}
        for i, rule in enumerate(rules):
            by_size.setdefault(rule.n_objects, []).append(i)
        for n_obj, idxs in by_size.items():
            if n_obj > n_slots:
                continue
            for start in range(0, len(idxs), chunk):
                part = idxs[start:start + chunk]
                m = np.stack([
                    np.stack([self.object_scores(o) for o in rules[i].objects], axis=0)
                    for i in part
                ])  # [R, n_obj, S, O]
                out[part] = self._dp_max_assignment(m)
        return out

    @staticmethod
    def _dp_max_assignment(m: np.ndarray) -> np.ndarray:
        """Max over injective assignments of prod_j m[:, j, :, slot_j].

        m: [R, n_obj, S, O] non-negative. Scans slots once; f[sub] holds the
        best product assigning exactly the objects in `sub` to scanned
        slots. Targets are updated in descending popcount so every source
        still carries its pre-slot value.
        """
        r, n_obj, s, o = m.shape
        full = (1 << n_obj) - 1
        f = np.zeros((full + 1, r, s))
        f[0] = 1.0
        targets = sorted(range(1, full + 1), key=lambda t: -bin(t).count("1"))
        for slot in range(o):
            col = m[:, :, :, slot]
            for target in targets:
                bits = target
                while bits:
                    j = (bits & -bits).bit_length() - 1
                    bits &= bits - 1
                    np.maximum(f[target], f[target ^ (1 << j)] * col[:, j], out=f[target])
        return f[full]


def rule_validity(rule: Rule, z: np.ndarray, space: ConceptSpace) -> float:
    """Soft validity of a rule on one concept matrix, in [0, 1]."""
    return float(Evaluator(z, space).validity(rule)[0])


def rule_validity_batch(rule: Rule, z: np.ndarray, space: ConceptSpace) -> np.ndarray:
    return Evaluator(z, space).validity(rule)


def ground_rule(rule: Rule, z: np.ndarray, space: ConceptSpace,
                evaluator: Evaluator | None = None, index: int = 0) -> np.ndarray:
    """Binary O x A target mask from the validity-maximizing assignment."""
    z = np.asarray(z, dtype=np.float64)
    ev = evaluator if evaluator is not None else Evaluator(z, space)
    assign = ev.best_assignment(rule)[index]
    mask = np.zeros((ev.z.shape[1], ev.z.shape[2]))
    for i, conds in enumerate(rule.objects):
        for g, v in conds:
            mask[assign[i], space.column(g, v)] = 1.0
    return mask


# ---------------------------------------------------------------------------
# candidate construction

@dataclass
class CandidateSet:
    """Per-class deduplicated candidate rules plus the caps used."""

    per_class: dict[int, list[Rule]]
    max_objects: int
    max_attrs: int

    def n_rules(self) -> int:
        return sum(len(v) for v in self.per_class.values())


def propositionalize(mask: np.ndarray, class_id: int, space: ConceptSpace,
                     max_objects: int = 4, max_attrs: int = 3) -> list[Rule]:
    """All capped conjunctive rules readable from a binary attribution mask.

    Emits one rule per (nonempty subset of marked objects, choice of a
    nonempty condition subset per object), skipping condition subsets that
    would put two values on one attribute group. The presence column never
    becomes a condition. No dedup here -- the count matches the closed
    form over object subsets exactly; duplicates drop out when candidates
    are merged per class (:func:`build_candidates`).
    """
    if max_objects < 1 or max_attrs < 1:
        raise RuleError("caps must be >= 1")
    mask = np.asarray(mask)
    pcol = space.presence_column()
    marked: list[list[Condition]] = []
    for row in mask:
        conds = [space.column_name(c) for c in np.flatnonzero(row) if c != pcol]
        if conds:
            marked.append(conds)

    per_object_choices: list[list[tuple[Condition, ...]]] = []
    for conds in marked:
        choices = []
        for r in range(1, min(max_attrs, len(conds)) + 1):
            for combo in itertools.combinations(conds, r):
                groups = [g for g, _ in combo]
                if len(set(groups)) == len(groups):
                    choices.append(combo)
        per_object_choices.append(choices)

    rules: list[Rule] = []
    n = len(per_object_choices)
    for r in range(1, min(max_objects, n) + 1):
        for objs in itertools.combinations(range(n), r):
            for assignment in itertools.product(*(per_object_choices[i] for i in objs)):
                rules.append(Rule.make(class_id, assignment))
    return rules


def build_candidates(masks: np.ndarray, labels: np.ndarray, space: ConceptSpace,
                     max_objects: int = 4, max_attrs: int = 3) -> CandidateSet:
    """Propositionalize every sample and merge per class, dropping duplicates."""
    per_class: dict[int, list[Rule]] = {}
    seen: dict[int, set] = {}
    for mask, label in zip(masks, labels):
        k = int(label)
        bucket = per_class.setdefault(k, [])
        keys = seen.setdefault(k, set())
        for rule in propositionalize(mask, k, space, max_objects, max_attrs):
            if rule.canonical() not in keys:
                keys.add(rule.canonical())
                bucket.append(rule)
    return CandidateSet(per_class, max_objects, max_attrs)


# ---------------------------------------------------------------------------
# scoring

@dataclass
class RuleScore:
    rule: Rule
    rho_pos: float
    rho_neg: float

    @property
    def rho(self) -> float:
        return self.rho_pos - self.rho_neg


class ClassAbsentError(ValueError):
    pass


def _aggregate(vals: np.ndarray, agg: str, softmin_tau: float) -> float:
    if agg == "mean":
        return float(np.mean(vals))
    if agg == "min":
        return float(np.min(vals))
    if agg == "softmin":
        w = np.exp(-vals / softmin_tau)
        return float(np.sum(vals * w) / np.sum(w))
    raise ValueError(f"unknown aggregation {agg!r}")


def score_candidates(candidates: CandidateSet, z: np.ndarray, labels: np.ndarray,
                     space: ConceptSpace, agg: str = "mean",
                     softmin_tau: float = 0.1) -> dict[int, list[RuleScore]]:
    """rho+ / rho- per candidate over positive / negative critic samples."""
    labels = np.asarray(labels)
    for k in candidates.per_class:
        if not np.any(labels == k):
            raise ClassAbsentError(f"critic set has no samples of class {k}")
    evaluator = Evaluator(z, space)
    # validity depends only on rule objects: evaluate unique bodies once
    unique: dict[tuple, int] = {}
    bodies: list[Rule] = []
    for rules in candidates.per_class.values():
        for rule in rules:
            if rule.objects not in unique:
                unique[rule.objects] = len(bodies)
                bodies.append(rule)
    vals = evaluator.validity_many(bodies)
    out: dict[int, list[RuleScore]] = {}
    for k, rules in candidates.per_class.items():
        pos = labels == k
        neg = ~pos
        has_neg = bool(np.any(neg))
        scores = []
        for rule in rules:
            v = vals[unique[rule.objects]]
            scores.append(RuleScore(
                rule,
                _aggregate(v[pos], agg, softmin_tau),
                _aggregate(v[neg], agg, softmin_tau) if has_neg else 0.0,
            ))
        out[k] = scores
    return out


def select_best(scores: dict[int, list[RuleScore]]) -> dict[int, Rule]:
    """argmax-rho rule per class; ties -> fewer conditions, then lexicographic."""
    best: dict[int, Rule] = {}
    for k, lst in scores.items():
        if not lst:
            raise RuleError(f"class {k}: empty candidate list")
        best[k] = min(lst, key=lambda s: (-s.rho, s.rule.n_conditions, s.rule.canonical())).rule
    return best
