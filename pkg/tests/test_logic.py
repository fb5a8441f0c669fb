import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lsxlab import logic


SPACE = logic.hans_space()


def make_z(space, objects, n_slots=5, fill=0.0):
    """z with given objects as dicts {group: value}, presence set, rest `fill`."""
    z = np.full((n_slots, space.n_attrs), fill)
    pcol = space.presence_column()
    for slot, obj in enumerate(objects):
        if obj is None:
            continue
        if pcol is not None:
            z[slot, pcol] = 1.0
        for g, v in obj.items():
            z[slot, space.column(g, v)] = 1.0
    return z


def brute_force_validity(rule, z, space):
    """Independent oracle: explicit loop over every injective assignment."""
    z = np.asarray(z)
    n_slots = z.shape[0]
    pcol = space.presence_column()
    best = 0.0
    if rule.n_objects > n_slots:
        return 0.0
    for assign in itertools.permutations(range(n_slots), rule.n_objects):
        v = 1.0
        for obj, slot in zip(rule.objects, assign):
            if pcol is not None:
                v *= z[slot, pcol]
            for g, val in obj:
                v *= z[slot, space.column(g, val)]
        best = max(best, v)
    return best


class TestRuleLanguage:
    def test_canonical_form_is_order_free(self):
        a = logic.Rule.make(1, [[("color", "red")], [("shape", "cube"), ("size", "large")]])
        b = logic.Rule.make(1, [[("size", "large"), ("shape", "cube")], [("color", "red")]])
        assert a == b

    def test_rejects_two_values_on_one_group(self):
        with pytest.raises(logic.RuleError):
            logic.Rule.make(0, [[("color", "red"), ("color", "green")]])

    def test_rejects_empty(self):
        with pytest.raises(logic.RuleError):
            logic.Rule.make(0, [])
        with pytest.raises(logic.RuleError):
            logic.Rule.make(0, [[]])

    def test_print_matches_notation(self):
        r = logic.Rule.make(1, [[("color", "green"), ("shape", "cube")]])
        assert logic.print_rule(r) == "class1(X):- in(O1,X),color(O1,green),shape(O1,cube)"

    def test_parse_print_round_trip(self):
        rules = [
            logic.Rule.make(0, [[("color", "red")]]),
            logic.Rule.make(2, [[("color", "green"), ("shape", "cube")], [("color", "red")]]),
            logic.Rule.make(1, [[("size", "large")], [("size", "large"), ("shape", "cylinder")]]),
        ]
        for r in rules:
            assert logic.parse_rule(logic.print_rule(r)) == r

    def test_parse_tolerates_period_and_spaces(self):
        r = logic.parse_rule("class1(X) :- in(O1,X), color(O1,green).")
        assert r == logic.Rule.make(1, [[("color", "green")]])


class TestPropositionalize:
    def test_paper_worked_example_seven_rules(self):
        # object1 marked {green, cube}, object2 marked {red} -> exactly 7
        mask = np.zeros((5, SPACE.n_attrs))
        mask[0, SPACE.column("color", "green")] = 1
        mask[0, SPACE.column("shape", "cube")] = 1
        mask[1, SPACE.column("color", "red")] = 1
        rules = logic.propositionalize(mask, 1, SPACE)
        assert len(rules) == 7
        expected = {
            logic.Rule.make(1, [[("color", "green")]]),
            logic.Rule.make(1, [[("shape", "cube")]]),
            logic.Rule.make(1, [[("color", "red")]]),
            logic.Rule.make(1, [[("color", "green"), ("shape", "cube")]]),
            logic.Rule.make(1, [[("color", "red")], [("shape", "cube")]]),
            logic.Rule.make(1, [[("color", "green")], [("color", "red")]]),
            logic.Rule.make(1, [[("color", "red")], [("color", "green"), ("shape", "cube")]]),
        }
        assert set(rules) == expected

    def test_single_mark_single_rule(self):
        mask = np.zeros((3, SPACE.n_attrs))
        mask[2, SPACE.column("size", "small")] = 1
        rules = logic.propositionalize(mask, 0, SPACE)
        assert rules == [logic.Rule.make(0, [[("size", "small")]])]

    def test_attr_cap(self):
        # two objects each with 2 marked attrs, cap 1 attr -> 4 singles + 4 pairs
        mask = np.zeros((4, SPACE.n_attrs))
        mask[0, SPACE.column("color", "red")] = 1
        mask[0, SPACE.column("shape", "cube")] = 1
        mask[1, SPACE.column("color", "blue")] = 1
        mask[1, SPACE.column("size", "large")] = 1
        rules = logic.propositionalize(mask, 0, SPACE, max_attrs=1)
        assert len(rules) == 8

    def test_presence_column_excluded(self):
        mask = np.zeros((2, SPACE.n_attrs))
        mask[0, SPACE.presence_column()] = 1
        assert logic.propositionalize(mask, 0, SPACE) == []

    def test_empty_mask(self):
        assert logic.propositionalize(np.zeros((3, SPACE.n_attrs)), 0, SPACE) == []

    def test_count_matches_closed_form_and_enumerator(self):
        # distinct-group marks: count = sum over nonempty object subsets
        # of prod (2^a_o - 1), truncated by caps
        rng = np.random.default_rng(0)
        for _ in range(20):
            n_obj = rng.integers(1, 4)
            group_pool = ["shape", "size", "material", "color"]
            marks = []
            mask = np.zeros((6, SPACE.n_attrs))
            for o in range(n_obj):
                k = rng.integers(1, 4)
                groups = rng.choice(group_pool, size=k, replace=False)
                conds = []
                for g in groups:
                    v = SPACE.group(g).values[rng.integers(0, len(SPACE.group(g).values))]
                    mask[o, SPACE.column(g, v)] = 1
                    conds.append((g, v))
                marks.append(conds)
            max_objects, max_attrs = 4, 3
            rules = logic.propositionalize(mask, 0, SPACE, max_objects, max_attrs)

            def per_object(a):
                return sum(
                    1
                    for r in range(1, min(max_attrs, a) + 1)
                    for _ in itertools.combinations(range(a), r)
                )

            expect = 0
            for r in range(1, min(max_objects, n_obj) + 1):
                for subset in itertools.combinations(range(n_obj), r):
                    prod = 1
                    for o in subset:
                        prod *= per_object(len(marks[o]))
                    expect += prod
            assert len(rules) == expect

    def test_dedup_happens_at_union(self):
        mask = np.zeros((4, SPACE.n_attrs))
        mask[0, SPACE.column("color", "red")] = 1
        mask[1, SPACE.column("color", "red")] = 1
        # raw emission keeps the repeated single-object rule (closed form = 3)
        assert len(logic.propositionalize(mask, 0, SPACE)) == 3
        masks = np.stack([mask, mask])
        cands = logic.build_candidates(masks, np.array([0, 0]), SPACE)
        canon = [r.canonical() for r in cands.per_class[0]]
        assert len(canon) == len(set(canon)) == 2


class TestValidity:
    def test_max_over_slots(self):
        z = np.zeros((2, SPACE.n_attrs))
        z[:, SPACE.presence_column()] = 1.0
        z[0, SPACE.column("color", "red")] = 0.9
        z[1, SPACE.column("color", "red")] = 0.2
        rule = logic.Rule.make(0, [[("color", "red")]])
        assert logic.rule_validity(rule, z, SPACE) == pytest.approx(0.9, abs=1e-12)

    def test_two_objects_one_slot(self):
        z = make_z(SPACE, [{"color": "red"}, None, None], n_slots=3)
        rule = logic.Rule.make(0, [[("color", "red")], [("color", "red")]])
        assert logic.rule_validity(rule, z, SPACE) == 0.0

    def test_exact_match_is_one(self):
        z = make_z(SPACE, [{"shape": "cube", "size": "large"}, {"shape": "cylinder", "size": "large"}])
        rule = logic.Rule.make(0, [[("shape", "cube"), ("size", "large")],
                                   [("shape", "cylinder"), ("size", "large")]])
        assert logic.rule_validity(rule, z, SPACE) == 1.0

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 3), st.integers(2, 5))
    def test_matches_brute_force(self, seed, n_obj, n_slots):
        rng = np.random.default_rng(seed)
        z = rng.uniform(0, 1, (n_slots, SPACE.n_attrs))
        objects = []
        for _ in range(n_obj):
            groups = rng.choice(["shape", "size", "material", "color"],
                                size=rng.integers(1, 4), replace=False)
            objects.append([(g, SPACE.group(g).values[rng.integers(0, len(SPACE.group(g).values))])
                            for g in groups])
        rule = logic.Rule.make(0, objects)
        got = logic.rule_validity(rule, z, SPACE)
        want = brute_force_validity(rule, z, SPACE)
        assert got == pytest.approx(want, abs=1e-12)
        assert 0.0 <= got <= 1.0

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_slot_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        z = rng.uniform(0, 1, (4, SPACE.n_attrs))
        rule = logic.Rule.make(0, [[("color", "red")], [("shape", "cube"), ("size", "small")]])
        perm = rng.permutation(4)
        assert logic.rule_validity(rule, z, SPACE) == pytest.approx(
            logic.rule_validity(rule, z[perm], SPACE), abs=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_adding_condition_never_increases_validity(self, seed):
        rng = np.random.default_rng(seed)
        z = rng.uniform(0, 1, (4, SPACE.n_attrs))
        base = logic.Rule.make(0, [[("color", "red")]])
        extended = logic.Rule.make(0, [[("color", "red"), ("shape", "cube")]])
        assert logic.rule_validity(extended, z, SPACE) <= logic.rule_validity(base, z, SPACE) + 1e-12


class TestScoring:
    def test_perfect_separator(self):
        z_pos = make_z(SPACE, [{"color": "red"}])
        z_neg = make_z(SPACE, [{"color": "blue"}])
        z = np.stack([z_pos, z_neg])
        cands = logic.CandidateSet({0: [logic.Rule.make(0, [[("color", "red")]])]}, 4, 3)
        scores = logic.score_candidates(cands, z, np.array([0, 1]), SPACE)
        assert scores[0][0].rho == pytest.approx(1.0)

    def test_always_true_scores_zero(self):
        z = np.stack([make_z(SPACE, [{"color": "red"}]), make_z(SPACE, [{"color": "red"}])])
        cands = logic.CandidateSet({0: [logic.Rule.make(0, [[("color", "red")]])]}, 4, 3)
        scores = logic.score_candidates(cands, z, np.array([0, 1]), SPACE)
        assert scores[0][0].rho == pytest.approx(0.0)

    def test_hand_computed_three_samples(self):
        z = np.zeros((3, 2, SPACE.n_attrs))
        z[:, :, SPACE.presence_column()] = 1.0
        red = SPACE.column("color", "red")
        z[0, 0, red] = 0.8
        z[1, 0, red] = 0.4
        z[2, 0, red] = 0.1
        labels = np.array([0, 0, 1])
        cands = logic.CandidateSet({0: [logic.Rule.make(0, [[("color", "red")]])]}, 4, 3)
        s = logic.score_candidates(cands, z, labels, SPACE)[0][0]
        assert s.rho_pos == pytest.approx(0.6, abs=1e-12)   # mean(0.8, 0.4)
        assert s.rho_neg == pytest.approx(0.1, abs=1e-12)
        assert s.rho == pytest.approx(0.5, abs=1e-12)

    def test_class_absent_error(self):
        z = np.stack([make_z(SPACE, [{"color": "red"}])])
        cands = logic.CandidateSet({3: [logic.Rule.make(3, [[("color", "red")]])]}, 4, 3)
        with pytest.raises(logic.ClassAbsentError, match="class 3"):
            logic.score_candidates(cands, z, np.array([0]), SPACE)


class TestSelectBest:
    def test_argmax(self):
        rules = [logic.Rule.make(0, [[("color", c)]]) for c in ("red", "blue", "green")]
        scores = {0: [logic.RuleScore(rules[0], 0.2, 0.0),
                      logic.RuleScore(rules[1], 0.9, 0.0),
                      logic.RuleScore(rules[2], 0.1, 0.0)]}
        assert logic.select_best(scores)[0] == rules[1]

    def test_tie_prefers_fewer_conditions(self):
        small = logic.Rule.make(0, [[("color", "red")]])
        big = logic.Rule.make(0, [[("color", "red"), ("shape", "cube"), ("size", "large")]])
        scores = {0: [logic.RuleScore(big, 0.9, 0.0), logic.RuleScore(small, 0.9, 0.0)]}
        assert logic.select_best(scores)[0] == small

    def test_class_specific_beats_always_true(self):
        generic = logic.RuleScore(logic.Rule.make(0, [[("size", "large")]]), 1.0, 1.0)
        specific = logic.RuleScore(logic.Rule.make(0, [[("color", "red")]]), 0.9, 0.1)
        assert logic.select_best({0: [generic, specific]})[0] == specific.rule

    def test_empty_error(self):
        with pytest.raises(logic.RuleError):
            logic.select_best({0: []})


class TestGroundRule:
    def test_single_object(self):
        z = make_z(SPACE, [{"color": "blue"}, {"color": "blue"}, {"color": "red"}], n_slots=3)
        rule = logic.Rule.make(0, [[("color", "red")]])
        mask = logic.ground_rule(rule, z, SPACE)
        want = np.zeros_like(mask)
        want[2, SPACE.column("color", "red")] = 1.0
        assert np.array_equal(mask, want)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(0)
        z = rng.uniform(0, 1, (4, SPACE.n_attrs))
        rule = logic.Rule.make(0, [[("color", "red")], [("shape", "cube")]])
        perm = np.array([2, 0, 3, 1])
        assert np.array_equal(logic.ground_rule(rule, z, SPACE)[perm], logic.ground_rule(rule, z[perm], SPACE))

    def test_matches_exhaustive_assignment(self):
        rng = np.random.default_rng(1)
        z = rng.uniform(0, 1, (3, SPACE.n_attrs))
        rule = logic.Rule.make(0, [[("color", "red")], [("shape", "cube"), ("size", "small")]])
        pcol = SPACE.presence_column()
        best_val, best_assign = -1.0, None
        for assign in itertools.permutations(range(3), 2):
            v = 1.0
            for obj, slot in zip(rule.objects, assign):
                v *= z[slot, pcol]
                for g, val in obj:
                    v *= z[slot, SPACE.column(g, val)]
            if v > best_val:
                best_val, best_assign = v, assign
        mask = logic.ground_rule(rule, z, SPACE)
        want = np.zeros_like(mask)
        for obj, slot in zip(rule.objects, best_assign):
            for g, val in obj:
                want[slot, SPACE.column(g, val)] = 1.0
        assert np.array_equal(mask, want)
