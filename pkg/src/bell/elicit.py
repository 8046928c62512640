"""The thought-eliciting prompt programs.

Four techniques are single-turn prompt constructions (chain-of-thought,
thread-of-thought, and the two re-reading variants); three are multi-step
executors (verification chains, graph plans, logic injection). Builders are
pure: the same record and config always produce the same request. Executors
capture every intermediate exchange in an ExplanationTranscript.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from typing import Any, Mapping, Sequence

from bell import logic
from bell.backend import Backend, BackendProfile, ChatMessage, ChatRequest
from bell.core import (
    EvalRecord,
    ExplanationTranscript,
    TechniqueKind,
    TranscriptStep,
)

COT_TRIGGER = "Let's think step by step."
THOT_TRIGGER = (
    "Walk me through this context in manageable parts step by step, "
    "summarizing and analyzing as we go."
)
REREAD_PHRASE = "Read the question again: "
DEFAULT_SYSTEM = (
    "You are a careful reasoning assistant. Explain your reasoning clearly "
    "and end with the final answer."
)

LOGIC_FACTS_PHRASE = "Consider the following logical facts: "

COVE_FLAG_DEGENERATE = "cove_degenerate"
LOT_FLAG_DEGENERATE = "lot_degenerate"
GOT_FLAG_UNPARSEABLE_SCORE = "got_unparseable_score"

_NUMBERED_LINE_RE = re.compile(r"^\s*\d+\s*[.):-]\s*(.+?)\s*$")
_SCORE_RE = re.compile(r"-?\d+(?:\.\d+)?")


class PlanError(Exception):
    """Invalid technique configuration or graph plan."""


@dataclass(frozen=True)
class PromptTemplate:
    """System text plus a user-text pattern with {question}, {context} and
    {injected_logic} placeholders. Re-reading templates carry {question}
    twice; all others exactly once."""

    technique: TechniqueKind
    system_text: str
    user_text_pattern: str

    def __post_init__(self):
        expected = 2 if self.technique in (TechniqueKind.REREAD_COT, TechniqueKind.REREAD_THOT) else 1
        count = self.user_text_pattern.count("{question}")
        if count != expected:
            raise PlanError(
                f"{self.technique.value} template must contain {{question}} "
                f"{expected} time(s), found {count}"
            )

    def render(self, record: EvalRecord, context: str = "", injected_logic: str = "") -> str:
        # plain substitution, not str.format: trigger text may contain braces
        return (
            self.user_text_pattern.replace("{question}", record.question)
            .replace("{context}", context)
            .replace("{injected_logic}", injected_logic)
        )


def template_for(technique: TechniqueKind, config: "ElicitConfig") -> PromptTemplate:
    """The single-turn user-text template of a technique under this config."""
    if technique == TechniqueKind.COT:
        pattern = f"{{question}}\n{config.cot_trigger}"
    elif technique == TechniqueKind.THOT:
        pattern = f"{{question}}\n{config.thot_trigger}"
    elif technique == TechniqueKind.REREAD_COT:
        pattern = f"{{question}}\n{config.reread_phrase}{{question}}\n{config.cot_trigger}"
    elif technique == TechniqueKind.REREAD_THOT:
        pattern = f"{{question}}\n{config.reread_phrase}{{question}}\n{config.thot_trigger}"
    elif technique == TechniqueKind.LOT:
        pattern = f"{{question}}\n{LOGIC_FACTS_PHRASE}{{injected_logic}}\n{config.cot_trigger}"
    else:
        raise PlanError(f"{technique.value} has no single-turn template")
    return PromptTemplate(technique, config.default_system, pattern)


@dataclass(frozen=True)
class GotNode:
    node_id: str
    operation: str  # generate | score | aggregate | refine
    params: Mapping[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {"node_id": self.node_id, "operation": self.operation, "params": dict(self.params)}


@dataclass(frozen=True)
class GotPlan:
    """A reasoning graph: nodes are operations, edges carry intermediate
    output forward. Must be a DAG with a unique sink."""

    nodes: tuple[GotNode, ...]
    edges: tuple[tuple[str, str], ...]

    def to_dict(self) -> dict[str, Any]:
        return {
            "nodes": [n.to_dict() for n in self.nodes],
            "edges": [list(e) for e in self.edges],
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "GotPlan":
        return cls(
            nodes=tuple(
                GotNode(n["node_id"], n["operation"], dict(n.get("params", {})))
                for n in d["nodes"]
            ),
            edges=tuple((e[0], e[1]) for e in d["edges"]),
        )


_GOT_OPERATIONS = ("generate", "score", "aggregate", "refine")


def validate_plan(plan: GotPlan) -> list[str]:
    problems = []
    ids = [n.node_id for n in plan.nodes]
    if len(set(ids)) != len(ids):
        problems.append("node ids must be unique")
    known = set(ids)
    for node in plan.nodes:
        if node.operation not in _GOT_OPERATIONS:
            problems.append(f"node {node.node_id}: unknown operation {node.operation!r}")
        if node.operation == "generate" and int(node.params.get("k", 1)) < 1:
            problems.append(f"node {node.node_id}: branching factor k must be >= 1")
    for src, dst in plan.edges:
        if src not in known or dst not in known:
            problems.append(f"edge ({src}, {dst}) references unknown node")
    if problems:
        return problems
    order = topological_order(plan)
    if order is None:
        problems.append("plan contains a cycle")
        return problems
    sinks = [n.node_id for n in plan.nodes if not any(src == n.node_id for src, _ in plan.edges)]
    if len(sinks) != 1:
        problems.append(f"plan must have exactly one sink node, found {sinks}")
    return problems


def topological_order(plan: GotPlan) -> list[GotNode] | None:
    """Kahn's algorithm; ties broken by node declaration order. None on a
    cycle."""
    indegree = {n.node_id: 0 for n in plan.nodes}
    for _, dst in plan.edges:
        indegree[dst] += 1
    by_id = {n.node_id: n for n in plan.nodes}
    ready = [n.node_id for n in plan.nodes if indegree[n.node_id] == 0]
    order: list[GotNode] = []
    while ready:
        node_id = ready.pop(0)
        order.append(by_id[node_id])
        for src, dst in plan.edges:
            if src == node_id:
                indegree[dst] -= 1
                if indegree[dst] == 0:
                    ready.append(dst)
        ready.sort(key=lambda nid: next(i for i, n in enumerate(plan.nodes) if n.node_id == nid))
    if len(order) != len(plan.nodes):
        return None
    return order


def default_got_plan() -> GotPlan:
    """Three candidate branches, each judged 0-10, the top two merged, then a
    final refinement pass. Sized for math word problems."""
    return GotPlan(
        nodes=(
            GotNode("g1", "generate", {"k": 1}),
            GotNode("g2", "generate", {"k": 1}),
            GotNode("g3", "generate", {"k": 1}),
            GotNode("s1", "score"),
            GotNode("s2", "score"),
            GotNode("s3", "score"),
            GotNode("agg", "aggregate", {"top": 2}),
            GotNode("refine", "refine"),
        ),
        edges=(
            ("g1", "s1"), ("g2", "s2"), ("g3", "s3"),
            ("s1", "agg"), ("s2", "agg"), ("s3", "agg"),
            ("agg", "refine"),
        ),
    )


@dataclass(frozen=True)
class ElicitConfig:
    """Trigger phrases and executor knobs. All defaults are overridable from
    the run config; builders depend only on (record, config)."""

    cot_trigger: str = COT_TRIGGER
    thot_trigger: str = THOT_TRIGGER
    reread_phrase: str = REREAD_PHRASE
    default_system: str = DEFAULT_SYSTEM
    cove_max_questions: int = 3
    got_plan: GotPlan = field(default_factory=default_got_plan)
    lot_max_new: int = logic.DEFAULT_EXTENSION_BUDGET
    temperature: float = 0.0
    want_logprobs: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            "cot_trigger": self.cot_trigger,
            "thot_trigger": self.thot_trigger,
            "reread_phrase": self.reread_phrase,
            "default_system": self.default_system,
            "cove_max_questions": self.cove_max_questions,
            "got_plan": self.got_plan.to_dict(),
            "lot_max_new": self.lot_max_new,
            "temperature": self.temperature,
            "want_logprobs": self.want_logprobs,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ElicitConfig":
        base = cls()
        plan = GotPlan.from_dict(d["got_plan"]) if "got_plan" in d else base.got_plan
        known = {f for f in cls.__dataclass_fields__} - {"got_plan"}
        return replace(base, got_plan=plan, **{k: v for k, v in d.items() if k in known})


def _system_text(record: EvalRecord, config: ElicitConfig) -> str:
    return record.system_prompt or config.default_system


def _request(record: EvalRecord, config: ElicitConfig, user_text: str) -> ChatRequest:
    return ChatRequest(
        messages=(
            ChatMessage("system", _system_text(record, config)),
            ChatMessage("user", user_text),
        ),
        temperature=config.temperature,
        want_logprobs=config.want_logprobs,
    )


def build_plain(record: EvalRecord, config: ElicitConfig = ElicitConfig()) -> ChatRequest:
    """The untriggered completion: just the question. Used for the standalone
    hallucination column, never as a technique."""
    return _request(record, config, record.question)


def build_cot(record: EvalRecord, config: ElicitConfig = ElicitConfig()) -> ChatRequest:
    """Question followed by the step-by-step trigger sentence."""
    return _request(record, config, template_for(TechniqueKind.COT, config).render(record))


def build_thot(record: EvalRecord, config: ElicitConfig = ElicitConfig()) -> ChatRequest:
    """Question followed by the walk-through-in-parts trigger sentence."""
    return _request(record, config, template_for(TechniqueKind.THOT, config).render(record))


def build_reread(
    inner: TechniqueKind, record: EvalRecord, config: ElicitConfig = ElicitConfig()
) -> ChatRequest:
    """Question stated, then re-stated, then the inner technique's trigger.
    The question appears exactly twice."""
    if inner == TechniqueKind.COT:
        technique = TechniqueKind.REREAD_COT
    elif inner == TechniqueKind.THOT:
        technique = TechniqueKind.REREAD_THOT
    else:
        raise PlanError(f"re-reading wraps cot or thot, not {inner.value!r}")
    return _request(record, config, template_for(technique, config).render(record))


def build_request(
    technique: TechniqueKind, record: EvalRecord, config: ElicitConfig = ElicitConfig()
) -> ChatRequest:
    if technique == TechniqueKind.COT:
        return build_cot(record, config)
    if technique == TechniqueKind.THOT:
        return build_thot(record, config)
    if technique == TechniqueKind.REREAD_COT:
        return build_reread(TechniqueKind.COT, record, config)
    if technique == TechniqueKind.REREAD_THOT:
        return build_reread(TechniqueKind.THOT, record, config)
    raise PlanError(f"{technique.value} is not a single-turn technique")


class _TranscriptBuilder:
    def __init__(self, record: EvalRecord, technique: TechniqueKind | None,
                 profile: BackendProfile, config: ElicitConfig):
        self.record = record
        self.technique = technique
        self.profile = profile
        self.config = config
        self.steps: list[TranscriptStep] = []
        self.flags: list[str] = []
        self.annotations: dict[str, str] = {}
        self.last_logprobs: tuple[float, ...] | None = None

    def exchange(self, backend: Backend, request: ChatRequest, stage: str) -> str:
        for message in request.messages:
            self.steps.append(TranscriptStep(message.role, message.content, stage))
        response = backend.chat(self.profile, request)
        self.steps.append(TranscriptStep("assistant", response.content, stage))
        self.last_logprobs = response.token_logprobs
        return response.content

    def local(self, role: str, content: str, stage: str) -> None:
        self.steps.append(TranscriptStep(role, content, stage))

    def finish(self) -> ExplanationTranscript:
        final = next(
            (s.content for s in reversed(self.steps) if s.role == "assistant"), ""
        )
        return ExplanationTranscript(
            record_id=self.record.id,
            technique=self.technique,
            steps=tuple(self.steps),
            final_explanation=final,
            model_id=self.profile.model_id,
            temperature=self.config.temperature,
            flags=tuple(self.flags),
            annotations=self.annotations,
            final_logprobs=self.last_logprobs,
        )


def run_single(
    backend: Backend,
    profile: BackendProfile,
    record: EvalRecord,
    technique: TechniqueKind,
    config: ElicitConfig = ElicitConfig(),
) -> ExplanationTranscript:
    """Execute one of the single-turn techniques."""
    builder = _TranscriptBuilder(record, technique, profile, config)
    builder.exchange(backend, build_request(technique, record, config), "answer")
    return builder.finish()


def run_plain(
    backend: Backend,
    profile: BackendProfile,
    record: EvalRecord,
    config: ElicitConfig = ElicitConfig(),
) -> ExplanationTranscript:
    builder = _TranscriptBuilder(record, None, profile, config)
    builder.exchange(backend, build_plain(record, config), "answer")
    return builder.finish()


def parse_numbered_questions(text: str, limit: int) -> list[str]:
    questions = []
    for line in text.splitlines():
        m = _NUMBERED_LINE_RE.match(line)
        if m and m.group(1):
            questions.append(m.group(1))
        if len(questions) >= limit:
            break
    return questions


def run_cove(
    backend: Backend,
    profile: BackendProfile,
    record: EvalRecord,
    config: ElicitConfig = ElicitConfig(),
) -> ExplanationTranscript:
    """Verification chain: draft, plan verification questions, answer each
    question in isolation, then produce the corrected final answer.

    Verification requests see only their own question, never the draft, so
    their answers cannot inherit its mistakes. If planning yields no
    parseable questions the draft is promoted to the final answer and the
    transcript is flagged.
    """
    if config.cove_max_questions < 1:
        raise PlanError("cove_max_questions must be >= 1")
    builder = _TranscriptBuilder(record, TechniqueKind.COVE, profile, config)

    draft = builder.exchange(backend, build_plain(record, config), "baseline")

    plan_text = (
        f"Question: {record.question}\n"
        f"Draft answer: {draft}\n"
        f"List up to {config.cove_max_questions} short verification questions that would "
        "fact-check the draft answer. Write one per line, numbered 1., 2., ..."
    )
    plan_reply = builder.exchange(backend, _request(record, config, plan_text), "plan")

    questions = parse_numbered_questions(plan_reply, config.cove_max_questions)
    if not questions:
        builder.flags.append(COVE_FLAG_DEGENERATE)
        builder.local("assistant", draft, "final")
        return builder.finish()

    answers = []
    for i, question in enumerate(questions, start=1):
        verify_request = ChatRequest(
            messages=(
                ChatMessage("system", config.default_system),
                ChatMessage("user", f"Answer the following question concisely: {question}"),
            ),
            temperature=config.temperature,
            want_logprobs=config.want_logprobs,
        )
        answers.append(builder.exchange(backend, verify_request, f"verify:{i}"))

    pairs = "\n".join(
        f"Q{i}: {q}\nA{i}: {a}" for i, (q, a) in enumerate(zip(questions, answers), start=1)
    )
    final_text = (
        f"Question: {record.question}\n"
        f"Draft answer: {draft}\n"
        f"Verification results:\n{pairs}\n"
        "Using the verification results, produce the corrected final answer "
        "with a brief explanation."
    )
    builder.exchange(backend, _request(record, config, final_text), "final")
    return builder.finish()


def _parse_judge_score(text: str) -> float | None:
    m = _SCORE_RE.search(text)
    if not m:
        return None
    value = float(m.group(0))
    if not 0.0 <= value <= 10.0:
        return None
    return value


def run_got(
    backend: Backend,
    profile: BackendProfile,
    record: EvalRecord,
    plan: GotPlan | None = None,
    config: ElicitConfig = ElicitConfig(),
) -> ExplanationTranscript:
    """Execute a reasoning graph in topological order.

    generate nodes propose candidate solutions (k per node), score nodes
    judge their parents' candidates on a 0-10 scale, aggregate nodes merge
    the top-scored candidates, refine nodes polish a single draft. The sink
    node's output is the final explanation.
    """
    plan = plan if plan is not None else config.got_plan
    problems = validate_plan(plan)
    if problems:
        raise PlanError("; ".join(problems))
    order = topological_order(plan)
    assert order is not None  # validate_plan rejected cycles

    builder = _TranscriptBuilder(record, TechniqueKind.GOT, profile, config)
    parents: dict[str, list[str]] = {n.node_id: [] for n in plan.nodes}
    for src, dst in plan.edges:
        parents[dst].append(src)
    # outputs: node id -> list of (text, score or None) candidates
    outputs: dict[str, list[tuple[str, float | None]]] = {}

    for node in order:
        stage = f"got:{node.node_id}"
        inherited = [item for pid in parents[node.node_id] for item in outputs[pid]]
        if node.operation == "generate":
            k = int(node.params.get("k", 1))
            produced = []
            for j in range(1, k + 1):
                context = ""
                if inherited:
                    context = "Notes from earlier steps:\n" + "\n".join(t for t, _ in inherited) + "\n"
                text = (
                    f"Question: {record.question}\n{context}"
                    f"Propose candidate solution {node.node_id}.{j}. "
                    "Reason it through and state the answer."
                )
                produced.append((builder.exchange(backend, _request(record, config, text), stage), None))
            outputs[node.node_id] = produced
        elif node.operation == "score":
            scored = []
            for text, _ in inherited:
                judge_text = (
                    f"Question: {record.question}\n"
                    f"Candidate solution:\n{text}\n"
                    "Rate how promising this solution is on a scale from 0 to 10. "
                    "Reply with only the number."
                )
                reply = builder.exchange(backend, _request(record, config, judge_text), stage)
                score = _parse_judge_score(reply)
                if score is None:
                    score = 0.0
                    builder.flags.append(GOT_FLAG_UNPARSEABLE_SCORE)
                scored.append((text, score))
            builder.annotations[stage] = ",".join(f"{s:g}" for _, s in scored)
            outputs[node.node_id] = scored
        elif node.operation == "aggregate":
            top = int(node.params.get("top", 2))
            ranked = sorted(
                enumerate(inherited), key=lambda item: (-(item[1][1] or 0.0), item[0])
            )[:top]
            listing = "\n".join(
                f"Candidate {chr(ord('A') + i)} (score {cand[1] if cand[1] is not None else 'n/a'}):\n{cand[0]}"
                for i, (_, cand) in enumerate(ranked)
            )
            text = (
                f"Question: {record.question}\n{listing}\n"
                "Merge the strongest reasoning from these candidates into one "
                "improved solution."
            )
            outputs[node.node_id] = [
                (builder.exchange(backend, _request(record, config, text), stage), None)
            ]
        else:  # refine
            draft = inherited[-1][0] if inherited else ""
            text = (
                f"Question: {record.question}\n"
                f"Draft solution:\n{draft}\n"
                "Refine this into a clear final explanation ending with the answer."
            )
            outputs[node.node_id] = [
                (builder.exchange(backend, _request(record, config, text), stage), None)
            ]
    return builder.finish()


LOT_GRAMMAR_NOTE = (
    "Use short identifiers for atomic propositions and define each one. "
    "Express the relations between them with the connectives '~' (not), "
    "'&' (and), '|' (or) and '->' (implies), separating expressions with ';'. "
    "End with a single line starting with 'LOGIC:' that contains only the "
    "expressions."
)


def _extract_logic(reply: str) -> logic.ParseResult:
    for line in reversed(reply.splitlines()):
        stripped = line.strip()
        if stripped.upper().startswith("LOGIC:"):
            return logic.parse(stripped[len("LOGIC:"):])
    return logic.parse(reply)


def run_lot(
    backend: Backend,
    profile: BackendProfile,
    record: EvalRecord,
    config: ElicitConfig = ElicitConfig(),
) -> ExplanationTranscript:
    """Logic injection: extract the question's propositional structure, close
    it under contraposition and syllogism locally (no model call), then
    answer with the extended facts in context.

    Unparseable extractions degrade to the plain step-by-step request and
    flag the transcript.
    """
    builder = _TranscriptBuilder(record, TechniqueKind.LOT, profile, config)

    extract_text = (
        f"Question: {record.question}\n"
        "Extract the atomic propositions and the implication or negation "
        f"relations between them. {LOT_GRAMMAR_NOTE}"
    )
    reply = builder.exchange(backend, _request(record, config, extract_text), "lot:extract")

    parsed = _extract_logic(reply)
    degenerate = not parsed.propositions and bool(parsed.errors)
    if degenerate:
        builder.flags.append(LOT_FLAG_DEGENERATE)
        builder.exchange(backend, build_cot(record, config), "lot:answer")
        return builder.finish()

    extended = logic.extend(list(parsed.propositions), max_new=config.lot_max_new)
    translated = logic.translate(extended)
    builder.local("system", translated, "lot:extend")

    if translated:
        answer_text = template_for(TechniqueKind.LOT, config).render(
            record, injected_logic=translated
        )
    else:
        answer_text = template_for(TechniqueKind.COT, config).render(record)
    builder.exchange(backend, _request(record, config, answer_text), "lot:answer")
    return builder.finish()


def run_technique(
    backend: Backend,
    profile: BackendProfile,
    record: EvalRecord,
    technique: TechniqueKind,
    config: ElicitConfig = ElicitConfig(),
) -> ExplanationTranscript:
    """Dispatch a technique to its builder or executor."""
    if technique == TechniqueKind.COVE:
        return run_cove(backend, profile, record, config)
    if technique == TechniqueKind.GOT:
        return run_got(backend, profile, record, config=config)
    if technique == TechniqueKind.LOT:
        return run_lot(backend, profile, record, config)
    return run_single(backend, profile, record, technique, config)
