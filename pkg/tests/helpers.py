"""Shared test oracles: finite differences, random nets, random procedures."""

from __future__ import annotations

import numpy as np

from ddxplan.neural import param_vector, set_param_vector


def central_finite_difference(fn, params, h=1e-5):
    """Gradient of scalar fn() with respect to a list of parameter arrays,
    by central differences on the flattened vector."""
    vec = param_vector(params).copy()
    grad = np.zeros_like(vec)
    for i in range(vec.size):
        bumped = vec.copy()
        bumped[i] = vec[i] + h
        set_param_vector(params, bumped)
        up = fn()
        bumped[i] = vec[i] - h
        set_param_vector(params, bumped)
        down = fn()
        grad[i] = (up - down) / (2.0 * h)
    set_param_vector(params, vec)
    return grad


def max_relative_error(analytic, numeric, floor=1e-8):
    analytic = np.asarray(analytic, dtype=float).ravel()
    numeric = np.asarray(numeric, dtype=float).ravel()
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def random_predicate(rng, symptom_names, finding_names=(), depth=0):
    """Random predicate tree in parser-canonical shape (no And directly
    under And, no Or under Or), so parse(serialize(.)) is structural identity."""
    from ddxplan.procedure_dsl import (
        AndExpr,
        FindingAtom,
        FlagAtom,
        NotExpr,
        OrExpr,
        SymptomAtom,
    )

    roll = rng.random()
    if depth >= 2 or roll < 0.55:
        kind = rng.random()
        missing = bool(rng.random() < 0.15)
        if not finding_names or kind < 0.6:
            return SymptomAtom(
                name=symptom_names[int(rng.integers(len(symptom_names)))],
                missing_answer=missing,
            )
        name = finding_names[int(rng.integers(len(finding_names)))]
        if kind < 0.85:
            op = (">=", "<=", ">", "<", "=", "!=")[int(rng.integers(6))]
            value = float(rng.integers(0, 500)) if rng.random() < 0.5 else round(
                float(rng.uniform(-5, 5)), 3
            )
            return FindingAtom(name=name, op=op, value=value, missing_answer=missing)
        return FlagAtom(name=name, missing_answer=missing)
    if roll < 0.7:
        return NotExpr(random_predicate(rng, symptom_names, finding_names, depth + 1))
    cls = AndExpr if rng.random() < 0.5 else OrExpr
    items = []
    for _ in range(int(rng.integers(2, 4))):
        child = random_predicate(rng, symptom_names, finding_names, depth + 1)
        if isinstance(child, cls):
            items.extend(child.items)  # keep the flattened parser shape
        else:
            items.append(child)
    if len(items) < 2:
        items.append(random_predicate(rng, symptom_names, finding_names, 2))
    return cls(items)


def make_random_procedure(rng, n_nodes, symptom_names, finding_names=(), name="proc"):
    """Random rooted binary DAG: every node reachable, edges only forward,
    leftover edges go to terminals."""
    from ddxplan.procedure_dsl import DecisionNode, ProcedureGraph

    node_ids = [f"n{i}" for i in range(n_nodes)]
    targets = {nid: [None, None] for nid in node_ids}
    dangling = [("n0", 0), ("n0", 1)]
    for nid in node_ids[1:]:
        slot = rng.integers(len(dangling))
        src, branch = dangling.pop(int(slot))
        targets[src][branch] = nid
        dangling.extend([(nid, 0), (nid, 1)])
    for src, branch in dangling:
        targets[src][branch] = "confirm" if rng.random() < 0.5 else "exclude"

    nodes = {}
    for nid in node_ids:
        when = random_predicate(rng, symptom_names, finding_names)
        nodes[nid] = DecisionNode(
            id=nid,
            ask=f"Question at {nid}?",
            when=when,
            yes_target=targets[nid][0],
            no_target=targets[nid][1],
        )
    return ProcedureGraph(name=name, disease_label="synthetic", start="n0", nodes=nodes)
