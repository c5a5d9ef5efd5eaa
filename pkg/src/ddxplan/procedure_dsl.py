"""Decision-procedure DSL: parse, validate, interpret, serialize.

A procedure is a rooted binary-branching DAG of yes/no question nodes whose
leaves are the global terminals `confirm` and `exclude`. Each node carries
the question text shown to the patient and a predicate over symptoms,
findings, and flags that the patient agent evaluates against the record.

Grammar (comments run `#` to end of line, whitespace is insignificant):

    procedure := "procedure" STRING "for" STRING "{" "start" ":" IDENT node+ "}"
    node      := "node" IDENT "{" "ask" ":" STRING "when" ":" expr
                 "yes" "->" target "no" "->" target "}"
    target    := IDENT | "confirm" | "exclude"
    expr      := and ("||" and)*
    and       := unary ("&&" unary)*
    unary     := "!" unary | "(" expr ")" | atom
    atom      := ("symptom" | "flag") "(" STRING ")" ["?yes"]
               | "finding" "(" STRING ")" cmp NUMBER ["?yes"]
    cmp       := ">=" | "<=" | ">" | "<" | "=" | "!="

An atom that asks about a finding missing from the record answers "no" by
default; the `?yes` suffix flips that default for the atom.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .cohort import PatientRecord, answer_finding_query
from .ontology import Ontology

TERMINALS = ("confirm", "exclude")
RESERVED = {"procedure", "for", "start", "node", "ask", "when", "yes", "no",
            "symptom", "finding", "flag", *TERMINALS}

MAX_QUESTIONS = 20

CMP_OPS = (">=", "<=", "!=", ">", "<", "=")


class ProcedureError(RuntimeError):
    """Interpreter misuse: running an unvalidated or unbound graph."""


class ParseError(ValueError):
    def __init__(self, message: str, line: int, col: int):
        super().__init__(f"{line}:{col}: {message}")
        self.line = line
        self.col = col


@dataclass
class Diagnostic:
    severity: str  # "error" | "warning"
    code: str
    message: str

    def __str__(self):
        return f"{self.severity}[{self.code}]: {self.message}"


# --- predicate AST ----------------------------------------------------------


@dataclass
class SymptomAtom:
    name: str
    missing_answer: bool = False
    index: int | None = field(default=None, compare=False)

    def evaluate(self, record: PatientRecord) -> bool:
        if self.index is None:
            raise ProcedureError(
                f"symptom({self.name!r}) is unbound; validate against an ontology first"
            )
        return bool(record.oracle_symptoms[self.index])


@dataclass
class FindingAtom:
    name: str
    op: str
    value: float
    missing_answer: bool = False

    def evaluate_value(self, value: float) -> bool:
        if self.op == ">=":
            return value >= self.value
        if self.op == "<=":
            return value <= self.value
        if self.op == ">":
            return value > self.value
        if self.op == "<":
            return value < self.value
        if self.op == "=":
            return value == self.value
        return value != self.value

    def evaluate(self, record: PatientRecord) -> bool:
        return answer_finding_query(record, self.name, self)


@dataclass
class FlagAtom:
    name: str
    missing_answer: bool = False

    def evaluate_value(self, value: float) -> bool:
        return value != 0

    def evaluate(self, record: PatientRecord) -> bool:
        return answer_finding_query(record, self.name, self)


@dataclass
class NotExpr:
    operand: object

    def evaluate(self, record) -> bool:
        return not self.operand.evaluate(record)


@dataclass
class AndExpr:
    items: list

    def evaluate(self, record) -> bool:
        return all(item.evaluate(record) for item in self.items)


@dataclass
class OrExpr:
    items: list

    def evaluate(self, record) -> bool:
        return any(item.evaluate(record) for item in self.items)


@dataclass
class DecisionNode:
    id: str
    ask: str
    when: object
    yes_target: str
    no_target: str

    @property
    def targets(self) -> tuple[str, str]:
        return (self.yes_target, self.no_target)


@dataclass
class ProcedureGraph:
    name: str
    disease_label: str
    start: str
    nodes: dict[str, DecisionNode]


@dataclass
class RunTrace:
    entries: list[tuple[str, bool]]
    outcome: str  # "confirm" | "exclude" | "failure"

    @property
    def questions_asked(self) -> int:
        return len(self.entries)

    @property
    def last_node(self) -> str | None:
        return self.entries[-1][0] if self.entries else None


# --- lexer -------------------------------------------------------------------


@dataclass
class Token:
    kind: str  # IDENT, STRING, NUMBER, or the literal punctuation
    value: str | float
    line: int
    col: int


_PUNCT = ("->", "||", "&&", ">=", "<=", "!=", "{", "}", "(", ")", ":", "!",
          ">", "<", "=", "?")


def _lex(text: str) -> list[Token]:
    tokens: list[Token] = []
    line, col = 1, 1
    i = 0
    n = len(text)
    while i < n:
        ch = text[i]
        if ch == "\n":
            line += 1
            col = 1
            i += 1
            continue
        if ch in " \t\r":
            i += 1
            col += 1
            continue
        if ch == "#":
            while i < n and text[i] != "\n":
                i += 1
            continue
        if ch == '"':
            start_line, start_col = line, col
            i += 1
            col += 1
            out = []
            while i < n and text[i] != '"':
                if text[i] == "\n":
                    raise ParseError("unterminated string", start_line, start_col)
                if text[i] == "\\" and i + 1 < n and text[i + 1] in ('"', "\\"):
                    out.append(text[i + 1])
                    i += 2
                    col += 2
                    continue
                out.append(text[i])
                i += 1
                col += 1
            if i >= n:
                raise ParseError("unterminated string", start_line, start_col)
            i += 1
            col += 1
            tokens.append(Token("STRING", "".join(out), start_line, start_col))
            continue
        if ch.isdigit() or (ch == "-" and i + 1 < n and text[i + 1].isdigit()):
            start_col = col
            j = i + 1
            while j < n and (text[j].isdigit() or text[j] in ".eE" or
                             (text[j] in "+-" and text[j - 1] in "eE")):
                j += 1
            literal = text[i:j]
            try:
                value = float(literal)
            except ValueError:
                raise ParseError(f"bad number literal {literal!r}", line, start_col) from None
            tokens.append(Token("NUMBER", value, line, start_col))
            col += j - i
            i = j
            continue
        if ch.isalpha() or ch == "_":
            start_col = col
            j = i + 1
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            tokens.append(Token("IDENT", text[i:j], line, start_col))
            col += j - i
            i = j
            continue
        for punct in _PUNCT:
            if text.startswith(punct, i):
                tokens.append(Token(punct, punct, line, col))
                i += len(punct)
                col += len(punct)
                break
        else:
            raise ParseError(f"unexpected character {ch!r}", line, col)
    tokens.append(Token("EOF", "", line, col))
    return tokens


# --- parser ------------------------------------------------------------------


class _Parser:
    def __init__(self, tokens: list[Token]):
        self.tokens = tokens
        self.pos = 0

    @property
    def current(self) -> Token:
        return self.tokens[self.pos]

    def _advance(self) -> Token:
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def _fail(self, message: str, tok: Token | None = None):
        tok = tok or self.current
        raise ParseError(message, tok.line, tok.col)

    def _expect(self, kind: str) -> Token:
        if self.current.kind != kind:
            self._fail(f"expected {kind}, found {self._describe(self.current)}")
        return self._advance()

    def _expect_keyword(self, word: str) -> Token:
        if self.current.kind != "IDENT" or self.current.value != word:
            self._fail(f"expected {word!r}, found {self._describe(self.current)}")
        return self._advance()

    @staticmethod
    def _describe(tok: Token) -> str:
        if tok.kind == "EOF":
            return "end of input"
        return repr(tok.value)

    def parse_procedure(self) -> ProcedureGraph:
        self._expect_keyword("procedure")
        name = self._expect("STRING").value
        self._expect_keyword("for")
        disease = self._expect("STRING").value
        self._expect("{")

        start = None
        start_line = None
        nodes: dict[str, DecisionNode] = {}
        node_lines: dict[str, int] = {}
        while self.current.kind != "}":
            if self.current.kind == "IDENT" and self.current.value == "start":
                tok = self._advance()
                self._expect(":")
                if start is not None:
                    self._fail(
                        f"duplicate start declaration (lines {start_line} and {tok.line})",
                        tok,
                    )
                start = self._expect("IDENT").value
                start_line = tok.line
            elif self.current.kind == "IDENT" and self.current.value == "node":
                tok = self.current
                node = self.parse_node()
                if node.id in nodes:
                    self._fail(
                        f"duplicate node id {node.id!r} "
                        f"(lines {node_lines[node.id]} and {tok.line})",
                        tok,
                    )
                nodes[node.id] = node
                node_lines[node.id] = tok.line
            else:
                self._fail(f"expected 'start' or 'node', found {self._describe(self.current)}")
        self._expect("}")
        if self.current.kind != "EOF":
            self._fail(f"trailing input after procedure: {self._describe(self.current)}")
        if start is None:
            self._fail("procedure declares no start node", self.tokens[0])
        if not nodes:
            self._fail("procedure declares no nodes", self.tokens[0])
        return ProcedureGraph(name=name, disease_label=disease, start=start, nodes=nodes)

    def parse_node(self) -> DecisionNode:
        self._expect_keyword("node")
        ident = self._expect("IDENT")
        if ident.value in RESERVED:
            self._fail(f"node id {ident.value!r} is a reserved word", ident)
        self._expect("{")
        self._expect_keyword("ask")
        self._expect(":")
        ask = self._expect("STRING").value
        self._expect_keyword("when")
        self._expect(":")
        when = self.parse_expr()
        self._expect_keyword("yes")
        self._expect("->")
        yes_target = self.parse_target()
        self._expect_keyword("no")
        self._expect("->")
        no_target = self.parse_target()
        self._expect("}")
        return DecisionNode(
            id=ident.value, ask=ask, when=when, yes_target=yes_target, no_target=no_target
        )

    def parse_target(self) -> str:
        tok = self._expect("IDENT")
        if tok.value in RESERVED and tok.value not in TERMINALS:
            self._fail(f"target {tok.value!r} is a reserved word", tok)
        return tok.value

    def parse_expr(self):
        left = self.parse_and()
        items = [left]
        while self.current.kind == "||":
            self._advance()
            items.append(self.parse_and())
        return items[0] if len(items) == 1 else OrExpr(items)

    def parse_and(self):
        items = [self.parse_unary()]
        while self.current.kind == "&&":
            self._advance()
            items.append(self.parse_unary())
        return items[0] if len(items) == 1 else AndExpr(items)

    def parse_unary(self):
        if self.current.kind == "!":
            self._advance()
            return NotExpr(self.parse_unary())
        if self.current.kind == "(":
            self._advance()
            expr = self.parse_expr()
            self._expect(")")
            return expr
        return self.parse_atom()

    def parse_atom(self):
        tok = self.current
        if tok.kind != "IDENT" or tok.value not in ("symptom", "finding", "flag"):
            self._fail(
                f"expected an atom (symptom/finding/flag), found {self._describe(tok)}"
            )
        kind = self._advance().value
        self._expect("(")
        name = self._expect("STRING").value
        self._expect(")")
        if kind == "symptom":
            atom = SymptomAtom(name=name)
        elif kind == "flag":
            atom = FlagAtom(name=name)
        else:
            op_tok = self.current
            if op_tok.kind not in CMP_OPS:
                self._fail(f"expected a comparison operator, found {self._describe(op_tok)}")
            self._advance()
            value = self._expect("NUMBER").value
            atom = FindingAtom(name=name, op=op_tok.kind, value=float(value))
        if self.current.kind == "?":
            self._advance()
            self._expect_keyword("yes")
            atom.missing_answer = True
        return atom


def parse(text: str) -> ProcedureGraph:
    """Parse DSL text into a graph; raises ParseError with line:col."""
    return _Parser(_lex(text)).parse_procedure()


def load_procedure(path) -> ProcedureGraph:
    with open(path, encoding="utf-8") as fh:
        return parse(fh.read())


# --- validator ---------------------------------------------------------------


def _atoms(expr):
    if isinstance(expr, (SymptomAtom, FindingAtom, FlagAtom)):
        yield expr
    elif isinstance(expr, NotExpr):
        yield from _atoms(expr.operand)
    elif isinstance(expr, (AndExpr, OrExpr)):
        for item in expr.items:
            yield from _atoms(item)


def validate(
    graph: ProcedureGraph,
    ontology: Ontology | None = None,
    finding_vocabulary: set[str] | None = None,
) -> list[Diagnostic]:
    """Static checks; returns diagnostics (empty list means valid).

    With an ontology, symptom atoms are also bound to their ids so the
    interpreter can evaluate them. Unreachable-terminal conditions are
    warnings; everything else is an error.
    """
    diags: list[Diagnostic] = []

    if graph.start not in graph.nodes:
        diags.append(
            Diagnostic("error", "unknown-start", f"start node {graph.start!r} is not declared")
        )
    for node in graph.nodes.values():
        for branch, target in (("yes", node.yes_target), ("no", node.no_target)):
            if target not in TERMINALS and target not in graph.nodes:
                diags.append(
                    Diagnostic(
                        "error",
                        "unresolved-target",
                        f"node {node.id!r} {branch}-edge points at unknown target {target!r}",
                    )
                )

    cycle = _find_cycle(graph)
    if cycle:
        diags.append(
            Diagnostic(
                "error", "cycle", "cycle detected: " + " -> ".join(cycle)
            )
        )

    if graph.start in graph.nodes and not cycle:
        reachable, terminals = _reachable(graph)
        for node_id in sorted(graph.nodes):
            if node_id not in reachable:
                diags.append(
                    Diagnostic(
                        "error",
                        "unreachable-node",
                        f"node {node_id!r} is unreachable from start",
                    )
                )
        for terminal in TERMINALS:
            if terminal not in terminals:
                diags.append(
                    Diagnostic(
                        "warning",
                        "unreachable-terminal",
                        f"terminal {terminal!r} is unreachable",
                    )
                )

    for node in graph.nodes.values():
        for atom in _atoms(node.when):
            if isinstance(atom, SymptomAtom):
                if ontology is not None:
                    try:
                        atom.index = ontology.id_of(atom.name)
                    except KeyError:
                        diags.append(
                            Diagnostic(
                                "error",
                                "unresolved-name",
                                f"node {node.id!r}: unknown symptom {atom.name!r}",
                            )
                        )
            elif finding_vocabulary is not None and atom.name not in finding_vocabulary:
                diags.append(
                    Diagnostic(
                        "error",
                        "unresolved-name",
                        f"node {node.id!r}: unknown finding {atom.name!r}",
                    )
                )
    return diags


def _find_cycle(graph: ProcedureGraph) -> list[str] | None:
    """Iterative DFS three-coloring; returns one cycle's node ids if any."""
    WHITE, GRAY, BLACK = 0, 1, 2
    color = {nid: WHITE for nid in graph.nodes}
    parent: dict[str, str] = {}
    for root in graph.nodes:
        if color[root] != WHITE:
            continue
        stack = [(root, iter(_node_targets(graph, root)))]
        color[root] = GRAY
        while stack:
            nid, edges = stack[-1]
            advanced = False
            for target in edges:
                if color[target] == GRAY:
                    path = [nid]
                    cur = nid
                    while cur != target:
                        cur = parent[cur]
                        path.append(cur)
                    path.reverse()  # target .. nid
                    return path + [target]
                if color[target] == WHITE:
                    color[target] = GRAY
                    parent[target] = nid
                    stack.append((target, iter(_node_targets(graph, target))))
                    advanced = True
                    break
            if not advanced:
                color[nid] = BLACK
                stack.pop()
    return None


def _node_targets(graph: ProcedureGraph, node_id: str):
    node = graph.nodes[node_id]
    return [t for t in node.targets if t in graph.nodes]


def _reachable(graph: ProcedureGraph):
    reachable = set()
    terminals = set()
    stack = [graph.start]
    while stack:
        nid = stack.pop()
        if nid in reachable:
            continue
        reachable.add(nid)
        for target in graph.nodes[nid].targets:
            if target in TERMINALS:
                terminals.add(target)
            elif target in graph.nodes:
                stack.append(target)
    return reachable, terminals


def is_valid(diags: list[Diagnostic]) -> bool:
    return not any(d.severity == "error" for d in diags)


# --- interpreter ---------------------------------------------------------------


def run(
    graph: ProcedureGraph,
    record: PatientRecord,
    channel,
    max_questions: int = MAX_QUESTIONS,
    on_turn=None,
) -> RunTrace:
    """Walk the graph against one record through a semantic channel.

    At each node the patient evaluates the predicate on the record; the
    channel may perturb the delivered answer; the doctor follows the edge
    for the answer it observed. Exhausting the question cap without
    reaching a terminal is a failure (scored negative downstream).
    """
    if graph.start not in graph.nodes:
        raise ProcedureError(f"cannot run: start node {graph.start!r} missing")
    entries: list[tuple[str, bool]] = []
    node = graph.nodes[graph.start]
    while len(entries) < max_questions:
        utterance = channel.render_question(node.ask)
        true_answer = bool(node.when.evaluate(record))
        observed = bool(channel.deliver_answer(true_answer))
        entries.append((node.id, observed))
        if on_turn is not None:
            on_turn(node, utterance, observed)
        target = node.yes_target if observed else node.no_target
        if target in TERMINALS:
            return RunTrace(entries=entries, outcome=target)
        if target not in graph.nodes:
            raise ProcedureError(f"node {node.id!r} target {target!r} missing; validate first")
        node = graph.nodes[target]
    return RunTrace(entries=entries, outcome="failure")


def truth_table_outcome(graph: ProcedureGraph, assignment: dict[str, bool]) -> str:
    """Pure edge-following oracle under a total answer assignment; no
    channel, no question cap (acyclic validated graphs always terminate)."""
    node = graph.nodes[graph.start]
    seen = set()
    while True:
        if node.id in seen:
            raise ProcedureError("assignment walk revisited a node; graph has a cycle")
        seen.add(node.id)
        target = node.yes_target if assignment[node.id] else node.no_target
        if target in TERMINALS:
            return target
        node = graph.nodes[target]


def induced_assignment(graph: ProcedureGraph, record: PatientRecord) -> dict[str, bool]:
    """The answers a record induces at every node (for oracle comparisons)."""
    return {nid: bool(node.when.evaluate(record)) for nid, node in graph.nodes.items()}


# --- serializer ----------------------------------------------------------------


def _quote(text: str) -> str:
    return '"' + text.replace("\\", "\\\\").replace('"', '\\"') + '"'


def _format_number(value: float) -> str:
    if value == int(value) and abs(value) < 1e15:
        return str(int(value))
    return repr(value)


def _serialize_expr(expr, parent_prec: int = 0) -> str:
    # precedence: or=1, and=2, unary=3
    if isinstance(expr, OrExpr):
        text = " || ".join(_serialize_expr(e, 1) for e in expr.items)
        return f"({text})" if parent_prec > 1 else text
    if isinstance(expr, AndExpr):
        text = " && ".join(_serialize_expr(e, 2) for e in expr.items)
        return f"({text})" if parent_prec > 2 else text
    if isinstance(expr, NotExpr):
        return "!" + _serialize_expr(expr.operand, 3)
    suffix = "?yes" if expr.missing_answer else ""
    if isinstance(expr, SymptomAtom):
        return f"symptom({_quote(expr.name)}){suffix}"
    if isinstance(expr, FlagAtom):
        return f"flag({_quote(expr.name)}){suffix}"
    if isinstance(expr, FindingAtom):
        return f"finding({_quote(expr.name)}) {expr.op} {_format_number(expr.value)}{suffix}"
    raise TypeError(f"not a predicate node: {expr!r}")


def serialize(graph: ProcedureGraph) -> str:
    """Canonical text form: node order is sorted by id, so serialization is
    deterministic and parse(serialize(g)) is structurally g."""
    lines = [f"procedure {_quote(graph.name)} for {_quote(graph.disease_label)} {{"]
    lines.append(f"  start: {graph.start}")
    for node_id in sorted(graph.nodes):
        node = graph.nodes[node_id]
        lines.append(f"  node {node.id} {{")
        lines.append(f"    ask: {_quote(node.ask)}")
        lines.append(f"    when: {_serialize_expr(node.when)}")
        lines.append(f"    yes -> {node.yes_target}")
        lines.append(f"    no -> {node.no_target}")
        lines.append("  }")
    lines.append("}")
    return "\n".join(lines) + "\n"


def save_procedure(graph: ProcedureGraph, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize(graph))
