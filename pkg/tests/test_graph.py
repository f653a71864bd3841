"""Graph parsing, prompt decomposition, and step routing."""

import json
from pathlib import Path

import pytest

from sdfscene.graph import (
    Edge,
    EdgeRotation,
    GraphSyntaxError,
    GraphValidationError,
    Node,
    SceneGraph,
    StepPlan,
    build_step_plan,
    decompose_prompts,
    load_graph,
    parse_graph,
)

WIZARD_PATH = Path(__file__).resolve().parents[1] / "graphs" / "wizard.json"


def make_graph(m, edges, global_prompt="scene"):
    nodes = [{"name": f"obj{i}", "attributes": []} for i in range(m)]
    es = [{"subject": a, "object": b, "relation": "near"} for a, b in edges]
    return parse_graph(json.dumps(
        {"global_prompt": global_prompt, "nodes": nodes, "edges": es}))


class TestParsing:
    def test_wizard_file(self):
        g = load_graph(WIZARD_PATH)
        assert g.M == 4 and g.K == 3
        assert g.nodes[0].name == "Wizard"
        assert g.nodes[0].init_radius == pytest.approx(0.32)

    def test_minimal_single_node(self):
        g = parse_graph(json.dumps(
            {"global_prompt": "a sphere", "nodes": [{"name": "Sphere"}]}))
        assert g.M == 1 and g.K == 0

    def test_name_references_resolve(self):
        g = parse_graph(json.dumps({
            "global_prompt": "p",
            "nodes": [{"name": "A"}, {"name": "B"}],
            "edges": [{"subject": "B", "object": "A", "relation": "on"}]}))
        assert g.edges[0].subject == 1 and g.edges[0].object == 0

    def test_unknown_node_reference(self):
        with pytest.raises(GraphValidationError):
            parse_graph(json.dumps({
                "global_prompt": "p",
                "nodes": [{"name": "A"}],
                "edges": [{"subject": "A", "object": "Cat", "relation": "on"}]}))

    def test_malformed_json(self):
        with pytest.raises(GraphSyntaxError):
            parse_graph("{not json")

    def test_missing_keys(self):
        with pytest.raises(GraphSyntaxError):
            parse_graph(json.dumps({"nodes": []}))
        with pytest.raises(GraphSyntaxError):
            parse_graph(json.dumps({"global_prompt": "p"}))
        with pytest.raises(GraphSyntaxError):
            parse_graph(json.dumps(
                {"global_prompt": "p", "nodes": [{"attributes": []}]}))

    def test_self_edge_rejected(self):
        with pytest.raises(GraphValidationError):
            make_graph(2, [(0, 0)])

    def test_duplicate_edge_rejected(self):
        with pytest.raises(GraphValidationError):
            make_graph(2, [(0, 1), (1, 0)])

    def test_duplicate_names_rejected(self):
        with pytest.raises(GraphValidationError):
            parse_graph(json.dumps({
                "global_prompt": "p",
                "nodes": [{"name": "A"}, {"name": "A"}]}))

    def test_empty_graph_rejected(self):
        with pytest.raises(GraphValidationError):
            parse_graph(json.dumps({"global_prompt": "p", "nodes": []}))

    def test_bad_init_fields(self):
        with pytest.raises(GraphValidationError):
            parse_graph(json.dumps({
                "global_prompt": "p",
                "nodes": [{"name": "A", "init_radius": -0.2}]}))
        with pytest.raises(GraphValidationError):
            parse_graph(json.dumps({
                "global_prompt": "p",
                "nodes": [{"name": "A", "init_center": [2.0, 0.0, 0.0]}]}))


class TestPrompts:
    def test_attributes_join_by_commas(self):
        g = load_graph(WIZARD_PATH)
        ps = decompose_prompts(g)
        assert ps.object_prompts[0] == "Wizard, wise-looking"

    def test_bare_edge_prompt(self):
        g = load_graph(WIZARD_PATH)
        ps = decompose_prompts(g, edge_style="bare")
        assert ps.edge_prompts[(0, 1)] == "Wizard standing in front of Wooden Desk"

    def test_full_edge_prompt_includes_attributes(self):
        g = load_graph(WIZARD_PATH)
        ps = decompose_prompts(g, edge_style="full")
        assert ps.edge_prompts[(0, 1)] == (
            "Wizard, wise-looking standing in front of Wooden Desk")

    def test_count_is_one_plus_m_plus_k(self):
        g = load_graph(WIZARD_PATH)
        ps = decompose_prompts(g)
        assert ps.count() == 1 + g.M + g.K == 8
        assert len(ps.all_prompts()) == 8

    def test_deterministic(self):
        src = WIZARD_PATH.read_text()
        a = decompose_prompts(parse_graph(src)).all_prompts()
        b = decompose_prompts(parse_graph(src)).all_prompts()
        assert a == b

    def test_random_graphs_prompt_count(self):
        import random
        rnd = random.Random(20240803)
        for _ in range(200):
            m = rnd.randint(1, 8)
            pairs = [(i, j) for i in range(m) for j in range(i + 1, m)]
            rnd.shuffle(pairs)
            k = rnd.randint(0, len(pairs))
            g = make_graph(m, pairs[:k])
            ps = decompose_prompts(g, edge_style=rnd.choice(["full", "bare"]))
            assert ps.count() == 1 + m + k


class TestStepPlan:
    def test_two_object_cycle(self):
        g = make_graph(2, [(0, 1)])
        kinds = [build_step_plan(g, s) for s in range(4)]
        assert kinds[0] == StepPlan(0, "object", 0, (0, 1))
        assert kinds[1] == StepPlan(1, "object", 1, (0, 1))
        assert kinds[2] == StepPlan(2, "global")
        assert kinds[3] == StepPlan(3, "object", 0, (0, 1))

    def test_single_object_no_edges(self):
        g = make_graph(1, [])
        assert build_step_plan(g, 0) == StepPlan(0, "object", 0, None)
        assert build_step_plan(g, 1) == StepPlan(1, "global")

    def test_round_robin_alternates(self):
        # node 0 touches edges (0,1) and (0,2): successive visits alternate
        g = make_graph(3, [(0, 1), (0, 2)])
        rot = EdgeRotation()
        seen = [build_step_plan(g, s, rot).edge
                for s in range(12) if s % 4 == 0]
        assert seen == [(0, 1), (0, 2), (0, 1)]

    def test_round_robin_fairness(self):
        g = make_graph(4, [(0, 1), (0, 2), (0, 3)])
        rot = EdgeRotation()
        counts = {}
        for s in range(5 * 3 * 5):   # node 0 scheduled 15 times
            p = build_step_plan(g, s, rot)
            if p.kind == "object" and p.object_index == 0:
                counts[p.edge] = counts.get(p.edge, 0) + 1
        assert counts == {(0, 1): 5, (0, 2): 5, (0, 3): 5}

    def test_window_property(self):
        for m in (1, 2, 3, 4):
            pairs = [(i, j) for i in range(m) for j in range(i + 1, m)]
            g = make_graph(m, pairs)
            rot = EdgeRotation()
            plans = [build_step_plan(g, s, rot) for s in range(7 * (m + 1))]
            for w in range(0, len(plans) - m, m + 1):
                window = plans[w:w + m + 1]
                assert sum(p.kind == "global" for p in window) == 1
                objs = sorted(p.object_index for p in window if p.kind == "object")
                assert objs == list(range(m))

    def test_stateless_matches_rotation(self):
        g = make_graph(3, [(0, 1), (0, 2), (1, 2)])
        rot = EdgeRotation()
        for s in range(24):
            assert build_step_plan(g, s, rot) == build_step_plan(g, s)

    def test_negative_step_rejected(self):
        g = make_graph(1, [])
        with pytest.raises(ValueError):
            build_step_plan(g, -1)
