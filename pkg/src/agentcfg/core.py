"""Domain types shared by every module: queries, workflows, actions, episodes.

The structure action space is 9 workflows x 16^2 tool subsets x 3^3 budget
tiers = 62,208 joint actions, indexed with a workflow-major mixed-radix
encoding so actions round-trip losslessly through a single integer.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import ContractError

# ---------------------------------------------------------------------------
# Tool registry and budget tiers
# ---------------------------------------------------------------------------

# Registry order fixes the bit layout of tool subsets (bit i <-> TOOL_REGISTRY[i]).
TOOL_REGISTRY = ("calculator", "web_search", "python_exec", "lookup")
N_TOOLS = len(TOOL_REGISTRY)
N_TOOL_SUBSETS = 1 << N_TOOLS  # 16

TIER_NAMES = ("Low", "Mid", "High")
TIER_TOKENS = (256, 1024, 4096)
N_TIERS = 3

LOW, MID, HIGH = 0, 1, 2


def toolset_members(mask: int) -> tuple[str, ...]:
    """Tool names present in a 4-bit subset index."""
    return tuple(name for i, name in enumerate(TOOL_REGISTRY) if mask >> i & 1)


def toolset_size(mask: int) -> int:
    return bin(mask & (N_TOOL_SUBSETS - 1)).count("1")


def toolset_from_names(names: Sequence[str]) -> int:
    mask = 0
    for name in names:
        mask |= 1 << TOOL_REGISTRY.index(name)
    return mask


# ---------------------------------------------------------------------------
# Workflows
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Workflow:
    id: int
    name: str
    min_calls: int
    max_calls: int
    agents_active: int
    agent2_tools_allowed: bool

    @property
    def llm_call_count(self) -> int:
        """Nominal call count (minimum for the iterative workflow)."""
        return self.min_calls


WORKFLOWS: tuple[Workflow, ...] = (
    Workflow(0, "Direct", 1, 1, 1, False),
    Workflow(1, "ReasonAns", 2, 2, 2, False),
    Workflow(2, "ReasonVerifyAns", 3, 3, 3, True),
    Workflow(3, "Routing", 3, 3, 3, True),
    Workflow(4, "ParallelSectioning", 4, 4, 3, True),
    Workflow(5, "ParallelVoting", 4, 4, 2, False),
    Workflow(6, "OrchestratorWorkers", 4, 4, 3, True),
    Workflow(7, "EvaluatorOptimizer", 4, 7, 2, True),
    Workflow(8, "AutonomousAgent", 4, 4, 1, True),
)

N_WORKFLOWS = len(WORKFLOWS)
WORKFLOW_BY_NAME = {wf.name: wf for wf in WORKFLOWS}

EVALUATOR_OPTIMIZER_ID = 7
AUTONOMOUS_AGENT_ID = 8
# Workflows whose execution loop invokes allocated tools without an explicit
# instruction atom asking for them.
AUTO_TOOL_WORKFLOWS = frozenset({6, 8})

STRUCT_SPACE_SIZE = N_WORKFLOWS * N_TOOL_SUBSETS**2 * N_TIERS**3  # 62,208


# ---------------------------------------------------------------------------
# Queries and features
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Query:
    id: str
    text: str
    gold_answer: Optional[str] = None


MULTI_STEP_KEYWORDS = ("step", "then", "after", "first", "remaining", "left")
TOOL_KEYWORDS = ("calculate", "sum", "total", "how many", "search", "find")


@dataclass(frozen=True)
class QueryFeatures:
    char_length: int
    word_count: int
    numerical_density: float
    multi_step_flag: bool
    tool_flag: bool

    def as_vector(self) -> np.ndarray:
        return np.array(
            [
                self.char_length,
                self.word_count,
                self.numerical_density,
                float(self.multi_step_flag),
                float(self.tool_flag),
            ],
            dtype=np.float64,
        )


def extract_features(
    text: str,
    multi_step_keywords: Sequence[str] = MULTI_STEP_KEYWORDS,
    tool_keywords: Sequence[str] = TOOL_KEYWORDS,
) -> QueryFeatures:
    """Deterministic hand-crafted features of a query text.

    Tokenization is whitespace splitting; numerical density counts tokens
    containing at least one digit.
    """
    tokens = text.split()
    word_count = len(tokens)
    n_numeric = sum(1 for t in tokens if any(ch.isdigit() for ch in t))
    lowered = text.lower()
    return QueryFeatures(
        char_length=len(text),
        word_count=word_count,
        numerical_density=n_numeric / max(word_count, 1),
        multi_step_flag=any(k in lowered for k in multi_step_keywords),
        tool_flag=any(k in lowered for k in tool_keywords),
    )


@dataclass(frozen=True)
class StateEmbedding:
    """Fixed per-episode query representation: semantic vector + 5 features."""

    semantic: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        if self.features.shape != (5,):
            raise ContractError(f"feature vector must have 5 entries, got {self.features.shape}")
        if not (np.all(np.isfinite(self.semantic)) and np.all(np.isfinite(self.features))):
            raise ContractError("state embedding entries must be finite")

    @property
    def dim(self) -> int:
        return self.semantic.shape[0] + 5

    # Raw count features (char/word counts) are orders of magnitude larger
    # than the unit-norm semantic entries and would saturate a tanh trunk, so
    # the network input squashes each feature to O(1). Stored records keep
    # the raw feature values.
    _FEATURE_SCALE = np.array([100.0, 20.0, 1.0, 1.0, 1.0])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.semantic, self.features / self._FEATURE_SCALE])

    def key(self) -> tuple:
        """Quantized hashable key (round to 1e-6) for tabular bookkeeping."""
        return tuple(np.round(self.as_vector(), 6).tolist())


# ---------------------------------------------------------------------------
# Actions and configurations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StructureAction:
    workflow_id: int
    tools1: int
    tools2: int
    budgets: tuple[int, int, int]

    def __post_init__(self):
        if not 0 <= self.workflow_id < N_WORKFLOWS:
            raise ContractError(f"workflow id out of range: {self.workflow_id}")
        for t in (self.tools1, self.tools2):
            if not 0 <= t < N_TOOL_SUBSETS:
                raise ContractError(f"tool subset out of range: {t}")
        if len(self.budgets) != 3 or any(not 0 <= b < N_TIERS for b in self.budgets):
            raise ContractError(f"bad budget tiers: {self.budgets}")

    @property
    def workflow(self) -> Workflow:
        return WORKFLOWS[self.workflow_id]


def index_structure_action(a: StructureAction) -> int:
    """Mixed-radix encoding, workflow-major; bijective with the decoder."""
    idx = a.workflow_id
    idx = idx * N_TOOL_SUBSETS + a.tools1
    idx = idx * N_TOOL_SUBSETS + a.tools2
    for b in a.budgets:
        idx = idx * N_TIERS + b
    return idx


def decode_structure_action(i: int) -> StructureAction:
    if not 0 <= i < STRUCT_SPACE_SIZE:
        raise ContractError(f"structure index out of range: {i}")
    i, b3 = divmod(i, N_TIERS)
    i, b2 = divmod(i, N_TIERS)
    i, b1 = divmod(i, N_TIERS)
    i, tools2 = divmod(i, N_TOOL_SUBSETS)
    wf, tools1 = divmod(i, N_TOOL_SUBSETS)
    return StructureAction(wf, tools1, tools2, (b1, b2, b3))


# ---------------------------------------------------------------------------
# Prompt atoms and sequences
# ---------------------------------------------------------------------------

ROLES = ("reasoner", "verifier", "answerer")
MAX_PROMPT_LEN = 4


@dataclass(frozen=True)
class PromptAtom:
    id: int
    role: str
    text: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ContractError(f"unknown atom role: {self.role}")
        if not self.text:
            raise ContractError("atom text must be non-empty")


# A prompt sequence is the ordered tuple of chosen atom ids; STOP is implicit
# as the terminator and never stored.
PromptSequence = tuple[int, ...]


def validate_prompt_sequence(seq: Sequence[int], library_size: int) -> None:
    if len(seq) > MAX_PROMPT_LEN:
        raise ContractError(f"prompt sequence longer than {MAX_PROMPT_LEN}: {seq}")
    if len(set(seq)) != len(seq):
        raise ContractError(f"repeated atom in prompt sequence: {seq}")
    for a in seq:
        if not 0 <= a < library_size:
            raise ContractError(f"atom id out of range: {a}")


def validate_library(atoms: Sequence[PromptAtom]) -> None:
    ids = [a.id for a in atoms]
    if ids != list(range(len(atoms))):
        raise ContractError("atom library ids must be dense 0..|P|-1 in order")


@dataclass(frozen=True)
class Configuration:
    structure: StructureAction
    prompts: tuple[PromptSequence, ...]

    def __post_init__(self):
        n_active = self.structure.workflow.agents_active
        if len(self.prompts) != n_active:
            raise ContractError(
                f"{self.structure.workflow.name} needs {n_active} prompt "
                f"sequences, got {len(self.prompts)}"
            )


# ---------------------------------------------------------------------------
# Episodes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExecutionOutcome:
    answer_text: str
    correct: bool
    n_steps: int
    n_tokens: int
    n_tools_used: int
    n_tools_allocated: int

    def __post_init__(self):
        for name in ("n_steps", "n_tokens", "n_tools_used", "n_tools_allocated"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be non-negative")


@dataclass(frozen=True)
class EpisodeRecord:
    state: StateEmbedding
    structure_action: StructureAction
    prompt_actions: tuple[PromptSequence, ...]
    outcome: ExecutionOutcome
    reward: float
    reward_breakdown: tuple[float, float, float, float]
    seed: int

    def __post_init__(self):
        if abs(self.reward - sum(self.reward_breakdown)) > 1e-12:
            raise ContractError("reward must equal the sum of its breakdown terms")

    def to_json_dict(self) -> dict:
        return {
            "state_semantic": self.state.semantic.tolist(),
            "state_features": self.state.features.tolist(),
            "workflow": self.structure_action.workflow_id,
            "tools1": self.structure_action.tools1,
            "tools2": self.structure_action.tools2,
            "budgets": list(self.structure_action.budgets),
            "prompts": [list(p) for p in self.prompt_actions],
            "answer_text": self.outcome.answer_text,
            "correct": self.outcome.correct,
            "n_steps": self.outcome.n_steps,
            "n_tokens": self.outcome.n_tokens,
            "n_tools_used": self.outcome.n_tools_used,
            "n_tools_allocated": self.outcome.n_tools_allocated,
            "reward": self.reward,
            "reward_terms": list(self.reward_breakdown),
            "seed": self.seed,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "EpisodeRecord":
        state = StateEmbedding(
            semantic=np.array(d["state_semantic"], dtype=np.float64),
            features=np.array(d["state_features"], dtype=np.float64),
        )
        action = StructureAction(
            d["workflow"], d["tools1"], d["tools2"], tuple(d["budgets"])
        )
        outcome = ExecutionOutcome(
            answer_text=d["answer_text"],
            correct=bool(d["correct"]),
            n_steps=d["n_steps"],
            n_tokens=d["n_tokens"],
            n_tools_used=d["n_tools_used"],
            n_tools_allocated=d["n_tools_allocated"],
        )
        return cls(
            state=state,
            structure_action=action,
            prompt_actions=tuple(tuple(p) for p in d["prompts"]),
            outcome=outcome,
            reward=float(d["reward"]),
            reward_breakdown=tuple(float(x) for x in d["reward_terms"]),
            seed=int(d["seed"]),
        )


@dataclass
class ExperienceBuffer:
    """Append-only episode store; iteration order equals insertion order."""

    records: list[EpisodeRecord] = field(default_factory=list)

    def append(self, record: EpisodeRecord) -> None:
        self.records.append(record)

    def extend(self, records: Sequence[EpisodeRecord]) -> None:
        self.records.extend(records)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[EpisodeRecord]:
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]
