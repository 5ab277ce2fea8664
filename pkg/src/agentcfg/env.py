"""Environment contract plus a fully specified synthetic agentic environment.

The synthetic ground truth is a logistic success model over interpretable
match terms (depth, tool coverage, budget adequacy, prompt relevance,
difficulty) with a deterministic cost model. Tool *usage* is gated separately
from allocation, so the asymmetric allocated-but-unused penalty is reachable.
Every execution is a pure function of (query spec, configuration, seed),
which makes the closed-form expected-reward oracle checkable by Monte Carlo.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import (
    AUTO_TOOL_WORKFLOWS,
    EVALUATOR_OPTIMIZER_ID,
    ROLES,
    TIER_TOKENS,
    TOOL_REGISTRY,
    Configuration,
    ExecutionOutcome,
    PromptAtom,
    Query,
    StateEmbedding,
    extract_features,
    index_structure_action,
    toolset_size,
)
from .errors import ContractError
from .reward import RewardConfig, tool_shaping

TOOL_TOKEN_OVERHEAD = 150      # tokens charged per invoked tool
BASE_NEEDED_TOKENS = 256       # token need at difficulty 0
EO_EXPECTED_EXTRA = 1.5        # mean of the seeded uniform {0,1,2,3} extra iterations


# ---------------------------------------------------------------------------
# Ground-truth model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticQuerySpec:
    """Latent generator state; recorded for oracle use only and never
    exposed to the policies."""

    difficulty: float
    required_tools: int          # 4-bit subset
    required_depth: int          # minimum agents_active needed
    noise_scale: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.difficulty <= 1.0:
            raise ContractError(f"difficulty out of [0,1]: {self.difficulty}")
        if not 1 <= self.required_depth <= 3:
            raise ContractError(f"required_depth out of 1..3: {self.required_depth}")
        if self.noise_scale < 0:
            raise ContractError("noise_scale must be >= 0")


@dataclass(frozen=True)
class SuccessModel:
    w_bias: float = -1.0
    w_depth: float = 2.0
    w_coverage: float = 2.5
    w_adequacy: float = 1.5
    w_relevance: float = 1.0
    w_difficulty: float = 3.0


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def atom_class(text: str) -> str:
    """Deterministic instruction class of a prompt atom, by keyword."""
    lowered = text.lower()
    if "tool" in lowered:
        return "tool"
    if "decompose" in lowered or "step" in lowered:
        return "multi_step"
    return "general"


def query_class(spec: SyntheticQuerySpec) -> str:
    if spec.required_tools:
        return "tool"
    if spec.required_depth >= 2:
        return "multi_step"
    return "general"


def _chosen_atoms(config: Configuration, library: Sequence[PromptAtom]):
    """(agent_index, atom) pairs for every chosen atom id."""
    for agent, seq in enumerate(config.prompts):
        for atom_id in seq:
            yield agent, library[atom_id]


def prompt_relevance(spec, config: Configuration, library) -> float:
    """Fraction of chosen atoms whose role matches the choosing agent and
    whose class matches the query class; 0 when nothing is chosen."""
    qc = query_class(spec)
    chosen = list(_chosen_atoms(config, library))
    if not chosen:
        return 0.0
    relevant = sum(
        1
        for agent, atom in chosen
        if atom.role == ROLES[agent] and atom_class(atom.text) == qc
    )
    return relevant / len(chosen)


def tool_usage(spec, config: Configuration, library) -> int:
    """Tools are invoked only if allocated AND required AND the execution has
    a reason to call them (a tool-class atom, or an inherently tool-looping
    workflow)."""
    allocated = config.structure.tools1 | config.structure.tools2
    overlap = spec.required_tools & allocated
    if not overlap:
        return 0
    gated = config.structure.workflow_id in AUTO_TOOL_WORKFLOWS or any(
        atom_class(atom.text) == "tool" for _, atom in _chosen_atoms(config, library)
    )
    return toolset_size(overlap) if gated else 0


def success_probability(
    spec: SyntheticQuerySpec,
    config: Configuration,
    model: SuccessModel,
    library: Sequence[PromptAtom],
) -> float:
    wf = config.structure.workflow
    coverage = (
        toolset_size(spec.required_tools & (config.structure.tools1 | config.structure.tools2))
        / max(toolset_size(spec.required_tools), 1)
    )
    depth_ok = 1.0 if wf.agents_active >= spec.required_depth else 0.0
    needed = BASE_NEEDED_TOKENS * (1.0 + 2.0 * spec.difficulty)
    adequacy = min(
        min(TIER_TOKENS[config.structure.budgets[i]] / needed, 1.0)
        for i in range(wf.agents_active)
    )
    relevance = prompt_relevance(spec, config, library)
    x = (
        model.w_bias
        + model.w_depth * depth_ok
        + model.w_coverage * coverage
        + model.w_adequacy * adequacy
        + model.w_relevance * relevance
        - model.w_difficulty * spec.difficulty
    )
    return _sigmoid(x)


def _base_tokens(spec, config: Configuration) -> int:
    wf = config.structure.workflow
    return sum(
        int(round(TIER_TOKENS[config.structure.budgets[i]] * (0.5 + 0.5 * spec.difficulty)))
        for i in range(wf.agents_active)
    )


def execute_synthetic(
    query: Query,
    spec: SyntheticQuerySpec,
    config: Configuration,
    model: SuccessModel,
    library: Sequence[PromptAtom],
    seed: int,
) -> ExecutionOutcome:
    """Deterministic given (spec, configuration, seed). Draw order is fixed:
    correctness, then extra iterations, then token jitter."""
    rng = np.random.default_rng(seed)
    p = success_probability(spec, config, model, library)
    correct = bool(rng.random() < p)
    n_steps = config.structure.workflow.llm_call_count
    if config.structure.workflow_id == EVALUATOR_OPTIMIZER_ID:
        n_steps += int(rng.integers(0, 4))
    n_used = tool_usage(spec, config, library)
    n_alloc = toolset_size(config.structure.tools1) + toolset_size(config.structure.tools2)
    n_tokens = _base_tokens(spec, config) + TOOL_TOKEN_OVERHEAD * n_used
    jitter = int(spec.noise_scale)
    if jitter > 0:
        n_tokens = max(0, n_tokens + int(rng.integers(-jitter, jitter + 1)))
    answer = query.gold_answer if (correct and query.gold_answer) else "no answer"
    return ExecutionOutcome(
        answer_text=answer,
        correct=correct,
        n_steps=n_steps,
        n_tokens=n_tokens,
        n_tools_used=n_used,
        n_tools_allocated=n_alloc,
    )


def expected_reward(
    spec: SyntheticQuerySpec,
    config: Configuration,
    model: SuccessModel,
    library: Sequence[PromptAtom],
    reward_cfg: RewardConfig,
) -> float:
    """Exact expectation of the shaped reward: success marginalized in closed
    form, step/token randomness replaced by its mean."""
    p = success_probability(spec, config, model, library)
    n_steps = float(config.structure.workflow.llm_call_count)
    if config.structure.workflow_id == EVALUATOR_OPTIMIZER_ID:
        n_steps += EO_EXPECTED_EXTRA
    n_used = tool_usage(spec, config, library)
    n_alloc = toolset_size(config.structure.tools1) + toolset_size(config.structure.tools2)
    n_tokens = _base_tokens(spec, config) + TOOL_TOKEN_OVERHEAD * n_used

    def branch(correct: bool) -> float:
        return (
            reward_cfg.alpha * (1.0 if correct else 0.0)
            - reward_cfg.beta_s * n_steps
            - reward_cfg.beta_t * n_tokens / reward_cfg.t_max
            + reward_cfg.eta * tool_shaping(n_used, n_alloc, correct, reward_cfg)
        )

    return p * branch(True) + (1.0 - p) * branch(False)


def brute_force_best(
    spec: SyntheticQuerySpec,
    subspace: Iterable[Configuration],
    model: SuccessModel,
    library: Sequence[PromptAtom],
    reward_cfg: RewardConfig,
):
    """Exact argmax of expected_reward over a finite subspace. Ties break by
    smallest structure index, then shortest total prompt length, then
    lexicographic prompt ids."""
    best = None
    best_key = None
    n_seen = 0
    for config in subspace:
        n_seen += 1
        value = expected_reward(spec, config, model, library, reward_cfg)
        key = (
            -value,
            index_structure_action(config.structure),
            sum(len(p) for p in config.prompts),
            config.prompts,
        )
        if best_key is None or key < best_key:
            best, best_key = (config, value), key
    if n_seen == 0:
        raise ContractError("brute_force_best needs a non-empty subspace")
    return best


# ---------------------------------------------------------------------------
# Hash embedding (synthetic-mode semantic vector)
# ---------------------------------------------------------------------------


def hash_embed(text: str, dim: int = 64) -> np.ndarray:
    """Token n-gram hashing into `dim` signed buckets, L2-normalized.

    Uses blake2b so the embedding is identical across processes and
    platforms (the builtin hash() is salted)."""
    tokens = text.lower().split()
    grams = tokens + [f"{a} {b}" for a, b in zip(tokens, tokens[1:])]
    vec = np.zeros(dim)
    for gram in grams:
        digest = hashlib.blake2b(gram.encode("utf-8"), digest_size=8).digest()
        h = int.from_bytes(digest, "little")
        sign = 1.0 if (h >> 60) & 1 else -1.0
        vec[h % dim] += sign
    norm = np.linalg.norm(vec)
    if norm > 0:
        vec /= norm
    return vec


# ---------------------------------------------------------------------------
# Query generation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QueryDistribution:
    tool_prob: float = 0.4
    depth_probs: tuple[float, float, float] = (0.5, 0.3, 0.2)
    difficulty_low: float = 0.0
    difficulty_high: float = 0.8
    noise_scale: float = 0.0


_NOUNS = (
    "apples", "books", "coins", "tickets", "marbles", "boxes", "stamps",
    "bottles", "cards", "chairs",
)
_TOPICS = (
    "the 2014 film", "the tallest bridge", "the river delta", "the old treaty",
    "the chess opening", "the comet's orbit", "the island nation", "the art museum",
)

_CALC_TEMPLATES = (
    "Calculate the total of {a} and {b} {noun}.",
    "Calculate the sum of {a}, {b} and {c}.",
    "Find the total cost of {a} {noun} at {b} dollars each.",
)
_SEARCH_TEMPLATES = (
    "Search for who directed {topic} and find the year.",
    "Find the population of {topic} region, search carefully.",
)
_DEEP_TEMPLATES = (
    "First count the {a} {noun}, then remove {b}, and report what is left.",
    "Start with {a} {noun}; after giving away {b}, how many are remaining?",
    "First add {a} and {b}, then double the result, then subtract {c}.",
)
_SIMPLE_TEMPLATES = (
    "What is known about {topic}?",
    "Describe {topic} in one sentence.",
    "Is {topic} older than {a} years?",
)


def generate_query(
    dist: QueryDistribution, rng: np.random.Generator, query_id: str = "q"
):
    """Synthesize a (Query, SyntheticQuerySpec) pair whose surface text
    correlates with the latent spec via the feature extractor."""
    difficulty = float(rng.uniform(dist.difficulty_low, dist.difficulty_high))
    depth = int(rng.choice(3, p=np.asarray(dist.depth_probs) / sum(dist.depth_probs))) + 1
    required_tools = 0
    if rng.random() < dist.tool_prob:
        # calculator (bit 0) or web_search (bit 1)
        required_tools = 1 << int(rng.integers(0, 2))

    a, b, c = (int(v) for v in rng.integers(2, 90, size=3))
    noun = _NOUNS[int(rng.integers(0, len(_NOUNS)))]
    topic = _TOPICS[int(rng.integers(0, len(_TOPICS)))]
    if required_tools & 0b01:
        template = _CALC_TEMPLATES[int(rng.integers(0, len(_CALC_TEMPLATES)))]
    elif required_tools & 0b10:
        template = _SEARCH_TEMPLATES[int(rng.integers(0, len(_SEARCH_TEMPLATES)))]
    elif depth >= 2:
        template = _DEEP_TEMPLATES[int(rng.integers(0, len(_DEEP_TEMPLATES)))]
    else:
        template = _SIMPLE_TEMPLATES[int(rng.integers(0, len(_SIMPLE_TEMPLATES)))]
    text = template.format(a=a, b=b, c=c, noun=noun, topic=topic)
    query = Query(id=query_id, text=text, gold_answer=str(a + b))
    spec = SyntheticQuerySpec(
        difficulty=difficulty,
        required_tools=required_tools,
        required_depth=depth,
        noise_scale=dist.noise_scale,
    )
    return query, spec


# ---------------------------------------------------------------------------
# Atom libraries
# ---------------------------------------------------------------------------


def default_atom_library() -> tuple[PromptAtom, ...]:
    texts = [
        ("reasoner", "Think through the question carefully before answering."),
        ("reasoner", "Use the available tools whenever they can help."),
        ("reasoner", "Decompose the problem into smaller steps."),
        ("reasoner", "Keep the reasoning concise."),
        ("verifier", "Check each step of the reasoning for mistakes."),
        ("verifier", "Verify any tool output against the question."),
        ("verifier", "Confirm the intermediate steps are consistent."),
        ("answerer", "State the final answer plainly."),
        ("answerer", "Answer with a single step-by-step summary."),
        ("answerer", "If a tool result exists, base the answer on it."),
    ]
    return tuple(PromptAtom(i, role, text) for i, (role, text) in enumerate(texts))


def compact_atom_library() -> tuple[PromptAtom, ...]:
    """4-atom library for reduced-space experiments."""
    texts = [
        ("reasoner", "Think through the question carefully before answering."),
        ("reasoner", "Use the available tools whenever they can help."),
        ("verifier", "Check the reasoning for mistakes."),
        ("answerer", "State the final answer plainly."),
    ]
    return tuple(PromptAtom(i, role, text) for i, (role, text) in enumerate(texts))


# ---------------------------------------------------------------------------
# Environment object (the configure -> execute -> outcome contract)
# ---------------------------------------------------------------------------


@dataclass
class SyntheticEnv:
    """Synthetic environment: embeds queries and executes configurations
    against the logistic ground truth. Declared maxima bound the reward."""

    queries: list[Query]
    specs: dict[str, SyntheticQuerySpec]
    model: SuccessModel = field(default_factory=SuccessModel)
    library: tuple[PromptAtom, ...] = field(default_factory=default_atom_library)
    semantic_dim: int = 64

    s_max: int = 7   # max reasoning steps (EvaluatorOptimizer worst case)
    u_max: int = 4   # max tools invokable
    a_max: int = 8   # max tools allocatable (two agents x 4)

    def embed(self, query: Query) -> StateEmbedding:
        return StateEmbedding(
            semantic=hash_embed(query.text, self.semantic_dim),
            features=extract_features(query.text).as_vector(),
        )

    def spec_for(self, query: Query) -> SyntheticQuerySpec:
        return self.specs[query.id]

    def execute(self, query: Query, config: Configuration, seed: int) -> ExecutionOutcome:
        return execute_synthetic(
            query, self.spec_for(query), config, self.model, self.library, seed
        )

    def expected_reward(self, query: Query, config: Configuration,
                        reward_cfg: RewardConfig) -> float:
        return expected_reward(
            self.spec_for(query), config, self.model, self.library, reward_cfg
        )


def build_env(
    dist: QueryDistribution,
    n_queries: int,
    seed: int,
    model: Optional[SuccessModel] = None,
    library: Optional[Sequence[PromptAtom]] = None,
    semantic_dim: int = 64,
) -> SyntheticEnv:
    rng = np.random.default_rng(seed)
    queries, specs = [], {}
    for i in range(n_queries):
        q, s = generate_query(dist, rng, query_id=f"q{i:04d}")
        queries.append(q)
        specs[q.id] = s
    return SyntheticEnv(
        queries=queries,
        specs=specs,
        model=model or SuccessModel(),
        library=tuple(library) if library is not None else default_atom_library(),
        semantic_dim=semantic_dim,
    )
