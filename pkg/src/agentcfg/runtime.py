"""Run plumbing: YAML config loading with strict key checking, episode-buffer
JSONL persistence, a chat-completions HTTP adapter realizing the nine
workflow call topologies, and the end-to-end training orchestrator.

Real-mode support is best-effort: the adapter takes an injectable transport
(and sleep) so its call-count, retry, and aggregation contracts are testable
without network access. API keys are only ever named indirectly through an
environment variable.
"""

from __future__ import annotations

import dataclasses
import json
import os
import re
import time
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import yaml

from .core import (
    ROLES,
    TIER_TOKENS,
    WORKFLOWS,
    Configuration,
    EpisodeRecord,
    ExperienceBuffer,
    PromptAtom,
    Query,
    toolset_members,
)
from .analysis import diversity_report, safe_eval_arithmetic
from .env import QueryDistribution, SyntheticEnv, build_env, default_atom_library
from .errors import (
    BackendError,
    ConfigError,
    EmptyEliteError,
    PersistenceError,
    ResponseParseError,
)
from .core import ExecutionOutcome
from .policy import (
    MaskTable,
    PromptPolicy,
    StructurePolicy,
    default_mask_table,
    mask_table_from_config,
)
from .reward import RewardConfig
from .train import (
    DPOConfig,
    GRPOConfig,
    PPOConfig,
    SFTConfig,
    filter_elite,
    grpo_to_ppo_config,
    kl_to_empirical,
    sft_update,
    train_policies,
)

# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EnvConfig:
    n_queries: int = 32
    semantic_dim: int = 64
    tool_prob: float = 0.4
    depth_probs: tuple = (0.5, 0.3, 0.2)
    difficulty_low: float = 0.0
    difficulty_high: float = 0.8
    noise_scale: float = 0.0


@dataclass(frozen=True)
class BackendEndpoint:
    base_url: str = "http://localhost:8000/v1/chat/completions"
    model: str = "local-model"
    api_key_env: str = "BACKEND_API_KEY"
    timeout: float = 60.0
    max_retries: int = 3
    temperature: float = 0.0

    def __post_init__(self):
        if self.timeout <= 0:
            raise ConfigError("backend timeout must be > 0")
        if self.max_retries < 0:
            raise ConfigError("backend max_retries must be >= 0")


@dataclass(frozen=True)
class RunConfig:
    mode: str = "synthetic"
    seed: int = 0
    objective: str = "ppo"
    refinement: str = "sft"
    output_dir: str = "out"
    atom_library: Optional[str] = None
    env: EnvConfig = field(default_factory=EnvConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    grpo: GRPOConfig = field(default_factory=GRPOConfig)
    sft: SFTConfig = field(default_factory=SFTConfig)
    dpo: DPOConfig = field(default_factory=DPOConfig)
    mask_table: dict = field(default_factory=dict)
    backend: Optional[BackendEndpoint] = None

    def __post_init__(self):
        if self.mode not in ("synthetic", "real"):
            raise ConfigError(f"mode must be synthetic|real, got {self.mode!r}")
        if self.objective not in ("ppo", "grpo"):
            raise ConfigError(f"objective must be ppo|grpo, got {self.objective!r}")
        if self.refinement not in ("sft", "dpo", "none"):
            raise ConfigError(
                f"refinement must be sft|dpo|none, got {self.refinement!r}"
            )


_SECTION_TYPES = {
    "env": EnvConfig,
    "reward": RewardConfig,
    "ppo": PPOConfig,
    "grpo": GRPOConfig,
    "sft": SFTConfig,
    "dpo": DPOConfig,
    "backend": BackendEndpoint,
}


def _coerce(value, hint, path: str):
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if hint is tuple or typing.get_origin(hint) is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return tuple(value)
    if typing.get_origin(hint) is typing.Union:  # Optional[...]
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if value is None:
            return None
        return _coerce(value, args[0], path)
    return value


def _build_dataclass(cls, data: dict, path: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping, got {data!r}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in names:
            raise ConfigError(f"unknown config key: {path}.{key}")
        kwargs[key] = _coerce(value, hints[key], f"{path}.{key}")
    return cls(**kwargs)


def _validate_mask_rules(rules: dict, path: str) -> dict:
    if rules is None:
        return {}
    if not isinstance(rules, dict):
        raise ConfigError(f"{path}: expected a mapping")
    known_wf = {wf.name for wf in WORKFLOWS}
    for key, value in rules.items():
        if key == "workflows":
            continue
        if key not in known_wf:
            raise ConfigError(f"unknown config key: {path}.{key}")
        for sub in value:
            if sub not in ("tools1", "tools2", "budgets"):
                raise ConfigError(f"unknown config key: {path}.{key}.{sub}")
    return rules


def load_config(path) -> RunConfig:
    """Parse and fully validate a YAML run config; unknown keys anywhere are
    rejected with their path, and every omitted field takes its published
    default."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("top-level config must be a mapping")
    top_fields = {f.name for f in dataclasses.fields(RunConfig)}
    kwargs = {}
    for key, value in data.items():
        if key not in top_fields:
            raise ConfigError(f"unknown config key: {key}")
        if key in _SECTION_TYPES:
            kwargs[key] = _build_dataclass(_SECTION_TYPES[key], value, key)
        elif key == "mask_table":
            kwargs[key] = _validate_mask_rules(value, key)
        else:
            hints = typing.get_type_hints(RunConfig)
            kwargs[key] = _coerce(value, hints[key], key)
    cfg = RunConfig(**kwargs)
    if cfg.atom_library is not None and not Path(cfg.atom_library).exists():
        raise ConfigError(f"atom_library: file not found: {cfg.atom_library}")
    return cfg


def dump_config(cfg: RunConfig) -> dict:
    """Normalized plain-dict form with every default materialized (the
    `dump(load(x)) == normalize(x)` fixed point)."""

    def plain(obj):
        if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
            return {k: plain(v) for k, v in dataclasses.asdict(obj).items()}
        if isinstance(obj, tuple):
            return [plain(v) for v in obj]
        if isinstance(obj, dict):
            return {k: plain(v) for k, v in obj.items()}
        return obj

    return plain(cfg)


def load_atom_library(path) -> tuple[PromptAtom, ...]:
    """Atom library file: a YAML list of {role, text} entries; ids follow
    file order."""
    with open(path) as fh:
        entries = yaml.safe_load(fh)
    if not isinstance(entries, list):
        raise ConfigError(f"atom library must be a list: {path}")
    atoms = []
    for i, entry in enumerate(entries):
        if not isinstance(entry, dict) or set(entry) != {"role", "text"}:
            raise ConfigError(f"atom library entry {i} must have exactly role and text")
        atoms.append(PromptAtom(i, entry["role"], entry["text"]))
    return tuple(atoms)


# ---------------------------------------------------------------------------
# Buffer persistence
# ---------------------------------------------------------------------------


def persist_buffer(buffer: ExperienceBuffer, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for record in buffer:
            fh.write(json.dumps(record.to_json_dict()) + "\n")


def load_buffer(path) -> ExperienceBuffer:
    buffer = ExperienceBuffer()
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                buffer.append(EpisodeRecord.from_json_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise PersistenceError(
                    f"{path}: malformed episode at line {lineno}: {exc}"
                ) from exc
    return buffer


# ---------------------------------------------------------------------------
# Real-mode backend adapter
# ---------------------------------------------------------------------------

Transport = Callable[[dict, "BackendEndpoint"], dict]

TOOL_DIRECTIVE_RE = re.compile(r"^TOOL:([a-z_]+):(.*)$", re.MULTILINE)

LOOKUP_FIXTURE = {
    "capital of france": "Paris",
    "largest planet": "Jupiter",
    "speed of light": "299792458 m/s",
}


def run_tool(name: str, argument: str, allocated: Sequence[str]) -> str:
    """Execute one tool directive against the local registry; always returns
    a string (error strings, never exceptions)."""
    if name not in allocated:
        return f"ERROR: tool {name} not allocated"
    if name == "calculator":
        value = safe_eval_arithmetic(argument)
        return f"ERROR: malformed expression: {argument}" if value is None else repr(value)
    if name == "lookup":
        return LOOKUP_FIXTURE.get(argument.strip().lower(), "ERROR: key not found")
    return f"ERROR: tool {name} disabled"


def default_transport(payload: dict, endpoint: BackendEndpoint) -> dict:
    import requests

    headers = {"Content-Type": "application/json"}
    api_key = os.environ.get(endpoint.api_key_env)
    if api_key:
        headers["Authorization"] = f"Bearer {api_key}"
    response = requests.post(
        endpoint.base_url, json=payload, headers=headers, timeout=endpoint.timeout
    )
    response.raise_for_status()
    return response.json()


def chat_call(
    endpoint: BackendEndpoint,
    messages: list[dict],
    max_tokens: int,
    transport: Transport,
    sleep: Callable[[float], None] = time.sleep,
):
    """One logical chat call with retries (exponential backoff 1s/2s/4s...).

    Returns (content, total_tokens). Retries never multiply logical calls:
    the first successful transport response wins."""
    payload = {
        "model": endpoint.model,
        "messages": messages,
        "max_tokens": max_tokens,
        "temperature": endpoint.temperature,
    }
    last_exc = None
    for attempt in range(endpoint.max_retries + 1):
        try:
            response = transport(payload, endpoint)
            try:
                content = response["choices"][0]["message"]["content"]
                tokens = int(response["usage"]["total_tokens"])
            except (KeyError, IndexError, TypeError) as exc:
                raise ResponseParseError(f"malformed backend response: {response!r}") from exc
            return content, tokens
        except ResponseParseError:
            raise
        except Exception as exc:  # transport-level failure -> retry
            last_exc = exc
            if attempt < endpoint.max_retries:
                sleep(float(2**attempt))
    raise BackendError(
        f"backend failed after {endpoint.max_retries + 1} attempts: {last_exc}"
    ) from last_exc


@dataclass(frozen=True)
class WorkflowPlan:
    """Call topology of one workflow: how many calls, the fan-out of the
    parallel stage if any, and the iteration cap for iterative workflows."""

    workflow_id: int
    kind: str          # direct | chain | routing | sectioning | voting |
    #                    orchestrator | evaluator_optimizer | autonomous
    max_calls: int
    fan_out: int = 1
    max_refinements: int = 0


PLAN_REGISTRY: dict[int, WorkflowPlan] = {
    0: WorkflowPlan(0, "direct", 1),
    1: WorkflowPlan(1, "chain", 2),
    2: WorkflowPlan(2, "chain", 3),
    3: WorkflowPlan(3, "routing", 3),
    4: WorkflowPlan(4, "sectioning", 4, fan_out=3),
    5: WorkflowPlan(5, "voting", 4, fan_out=3),
    6: WorkflowPlan(6, "orchestrator", 4, fan_out=2),
    7: WorkflowPlan(7, "evaluator_optimizer", 7, max_refinements=3),
    8: WorkflowPlan(8, "autonomous", 4),
}


def normalize_answer(text: str) -> str:
    return re.sub(r"\s+", " ", text.strip().lower())


class _RealExecution:
    """Bookkeeping for one real-mode episode: calls, tokens, tool runs."""

    def __init__(self, query, config, endpoint, library, transport, sleep):
        self.query = query
        self.config = config
        self.endpoint = endpoint
        self.library = library
        self.transport = transport
        self.sleep = sleep
        self.n_calls = 0
        self.n_tokens = 0
        self.n_tools_used = 0

    def agent_tools(self, agent: int) -> tuple[str, ...]:
        a = self.config.structure
        return toolset_members(a.tools1 if agent == 0 else a.tools2)

    def system_text(self, agent: int) -> str:
        seq = self.config.prompts[agent] if agent < len(self.config.prompts) else ()
        return " ".join(self.library[i].text for i in seq)

    def call(self, agent: int, user_text: str, cap: int) -> str:
        if self.n_calls >= cap:
            raise BackendError(f"workflow call cap {cap} exceeded")
        budgets = self.config.structure.budgets
        max_tokens = TIER_TOKENS[budgets[min(agent, len(budgets) - 1)]]
        messages = []
        system = self.system_text(agent)
        if system:
            messages.append({"role": "system", "content": system})
        messages.append({"role": "user", "content": user_text})
        content, tokens = chat_call(
            self.endpoint, messages, max_tokens, self.transport, self.sleep
        )
        self.n_calls += 1
        self.n_tokens += tokens
        return content

    def resolve_tools(self, agent: int, content: str) -> str:
        """Run every TOOL:<name>:<arg> directive; returns appended results
        text ('' when there were no directives)."""
        allocated = self.agent_tools(agent)
        results = []
        for match in TOOL_DIRECTIVE_RE.finditer(content):
            name, arg = match.group(1), match.group(2)
            result = run_tool(name, arg, allocated)
            if not result.startswith("ERROR: tool" ):
                self.n_tools_used += 1
            results.append(f"TOOL_RESULT:{name}:{result}")
        return "\n".join(results)


def _run_plan(ex: _RealExecution, plan: WorkflowPlan) -> str:
    q = ex.query.text

    def call_with_tools(agent: int, text: str) -> str:
        content = ex.call(agent, text, plan.max_calls)
        tool_block = ex.resolve_tools(agent, content)
        return content + ("\n" + tool_block if tool_block else "")

    if plan.kind == "direct":
        return call_with_tools(0, q)
    if plan.kind == "chain":
        context = q
        out = ""
        n_agents = WORKFLOWS[plan.workflow_id].agents_active
        for agent in range(n_agents):
            out = call_with_tools(agent, context)
            context = f"{q}\n\nPrevious stage output:\n{out}"
        return out
    if plan.kind == "routing":
        route = call_with_tools(0, f"Route this query to a specialist and restate it:\n{q}")
        specialist = call_with_tools(1, f"{q}\n\nRouting note:\n{route}")
        return call_with_tools(2, f"{q}\n\nSpecialist output:\n{specialist}")
    if plan.kind == "sectioning":
        sections = [
            call_with_tools(0, f"{q}\n\nHandle section {i + 1} of {plan.fan_out}.")
            for i in range(plan.fan_out)
        ]
        joined = "\n---\n".join(sections)
        return call_with_tools(2, f"{q}\n\nSection outputs:\n{joined}")
    if plan.kind == "voting":
        votes = [
            call_with_tools(0, f"{q}\n\nGive your independent answer (vote {i + 1}).")
            for i in range(plan.fan_out)
        ]
        ex.call(1, f"{q}\n\nVotes:\n" + "\n".join(votes), plan.max_calls)  # aggregator call
        normalized = [normalize_answer(v) for v in votes]
        counts: dict[str, int] = {}
        for v in normalized:
            counts[v] = counts.get(v, 0) + 1
        best = max(counts.values())
        for v, original in zip(normalized, votes):
            if counts[v] == best:
                return original
    if plan.kind == "orchestrator":
        outline = call_with_tools(0, f"Decompose into {plan.fan_out} subtasks:\n{q}")
        worker_out = [
            call_with_tools(1, f"{q}\n\nSubtask {i + 1} from plan:\n{outline}")
            for i in range(plan.fan_out)
        ]
        return call_with_tools(2, f"{q}\n\nWorker outputs:\n" + "\n---\n".join(worker_out))
    if plan.kind == "evaluator_optimizer":
        draft = call_with_tools(0, q)
        for round_idx in range(plan.max_refinements):
            verdict = ex.call(
                1, f"{q}\n\nDraft:\n{draft}\n\nReply ACCEPT or critique.", plan.max_calls
            )
            if "ACCEPT" in verdict:
                return draft
            if ex.n_calls >= plan.max_calls:
                return draft
            draft = call_with_tools(0, f"{q}\n\nRevise per critique:\n{verdict}")
        return draft
    if plan.kind == "autonomous":
        context = q
        content = ""
        while ex.n_calls < plan.max_calls:
            content = ex.call(0, context, plan.max_calls)
            tool_block = ex.resolve_tools(0, content)
            if not tool_block:
                return content
            context = f"{q}\n\nAgent trace:\n{content}\n{tool_block}"
        return content
    raise BackendError(f"unknown plan kind: {plan.kind}")


def execute_real(
    query: Query,
    config: Configuration,
    endpoint: BackendEndpoint,
    library: Sequence[PromptAtom],
    transport: Transport = default_transport,
    sleep: Callable[[float], None] = time.sleep,
    plans: dict[int, WorkflowPlan] = PLAN_REGISTRY,
) -> ExecutionOutcome:
    """Run one episode against a chat-completions backend. Backend and parse
    failures are recorded as failed episodes, never raised."""
    plan = plans[config.structure.workflow_id]
    ex = _RealExecution(query, config, endpoint, library, transport, sleep)
    try:
        answer = _run_plan(ex, plan)
    except (BackendError, ResponseParseError) as exc:
        answer = f"EPISODE_FAILED: {exc}"
    correct = bool(
        query.gold_answer
        and normalize_answer(answer) == normalize_answer(query.gold_answer)
    )
    a = config.structure
    n_alloc = len(toolset_members(a.tools1)) + len(toolset_members(a.tools2))
    return ExecutionOutcome(
        answer_text=answer,
        correct=correct,
        n_steps=ex.n_calls,
        n_tokens=ex.n_tokens,
        n_tools_used=ex.n_tools_used,
        n_tools_allocated=n_alloc,
    )


# ---------------------------------------------------------------------------
# Training orchestrator
# ---------------------------------------------------------------------------


@dataclass
class TrainingArtifacts:
    struct_policy: StructurePolicy
    prompt_policy: PromptPolicy
    table: MaskTable
    buffer: ExperienceBuffer
    diagnostics: list
    report: dict
    env: SyntheticEnv


def build_components(cfg: RunConfig):
    """(env, table, library, policies) from a validated RunConfig."""
    library = (
        load_atom_library(cfg.atom_library)
        if cfg.atom_library
        else default_atom_library()
    )
    dist = QueryDistribution(
        tool_prob=cfg.env.tool_prob,
        depth_probs=tuple(cfg.env.depth_probs),
        difficulty_low=cfg.env.difficulty_low,
        difficulty_high=cfg.env.difficulty_high,
        noise_scale=cfg.env.noise_scale,
    )
    env = build_env(
        dist, cfg.env.n_queries, cfg.seed, library=library,
        semantic_dim=cfg.env.semantic_dim,
    )
    table = mask_table_from_config(cfg.mask_table) if cfg.mask_table else default_mask_table()
    state_dim = cfg.env.semantic_dim + 5
    struct_policy = StructurePolicy(state_dim, rng=np.random.default_rng([cfg.seed, 1]))
    prompt_policy = PromptPolicy(state_dim, library, rng=np.random.default_rng([cfg.seed, 2]))
    return env, table, library, struct_policy, prompt_policy


def run_training(cfg: RunConfig) -> TrainingArtifacts:
    """Full pipeline: RL phase (PPO or GRPO), elite filtering, SFT
    refinement, and a summary report. Deterministic given cfg.seed in
    synthetic single-executor mode."""
    env, table, library, struct_policy, prompt_policy = build_components(cfg)
    ppo_cfg = cfg.ppo if cfg.objective == "ppo" else grpo_to_ppo_config(cfg.grpo)
    buffer, diagnostics = train_policies(
        struct_policy, prompt_policy, table, env, ppo_cfg, cfg.reward,
        cfg.seed, objective=cfg.objective,
    )
    report: dict = {
        "episodes": len(buffer),
        "mean_reward_first_batch": diagnostics[0]["mean_reward"],
        "mean_reward_last_batch": diagnostics[-1]["mean_reward"],
    }
    if cfg.refinement == "sft":
        try:
            elite = filter_elite(buffer, cfg.sft)
            sft_losses = sft_update(struct_policy, prompt_policy, table, elite, cfg.sft)
            report["elite_size"] = len(elite)
            report["tau_eff"] = elite.tau_eff
            report["sft_final_loss"] = sft_losses[-1]
            report["kl_to_elite"] = kl_to_empirical(
                struct_policy, prompt_policy, table, elite
            )
        except EmptyEliteError as exc:
            report["sft_skipped"] = str(exc)
    elif cfg.refinement == "dpo":
        from .train import dpo_update
        from .errors import NoPairsError

        try:
            dpo_losses = dpo_update(struct_policy, prompt_policy, table, buffer, cfg.dpo)
            report["dpo_final_loss"] = dpo_losses[-1]
        except NoPairsError as exc:
            report["dpo_skipped"] = str(exc)
    counts = np.zeros(len(WORKFLOWS))
    for record in buffer:
        counts[record.structure_action.workflow_id] += 1
    div = diversity_report(counts)
    report["diversity"] = {
        "unique_workflows": div.unique_workflows,
        "entropy_nats": div.entropy_nats,
        "gini": div.gini,
    }
    return TrainingArtifacts(
        struct_policy, prompt_policy, table, buffer, diagnostics, report, env
    )


def save_artifacts(artifacts: TrainingArtifacts, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    artifacts.struct_policy.save(out_dir)
    artifacts.prompt_policy.save(out_dir)
    persist_buffer(artifacts.buffer, out_dir / "episodes.jsonl")
    with open(out_dir / "report.json", "w") as fh:
        json.dump(artifacts.report, fh, indent=2)
    with open(out_dir / "diagnostics.jsonl", "w") as fh:
        for diag in artifacts.diagnostics:
            fh.write(json.dumps(diag) + "\n")
