"""Two-level policy: a structure policy with six factorized masked heads and
a sequential prompt policy with STOP, plus companion value networks and
valid-configuration enumeration.

Head order is fixed: workflow -> tools1 -> tools2 -> budget1..3. The workflow
is sampled first; the remaining heads are masked conditioned on it. Sampling
and log-prob evaluation share one masking code path so the PPO ratio is
always computed over the same valid support.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import (
    MAX_PROMPT_LEN,
    N_TIERS,
    N_TOOL_SUBSETS,
    N_WORKFLOWS,
    ROLES,
    TIER_NAMES,
    WORKFLOW_BY_NAME,
    WORKFLOWS,
    PromptAtom,
    StateEmbedding,
    StructureAction,
    validate_library,
)
from .errors import ContractError, InvalidActionError, InvalidMaskError
from .numeric import (
    DEFAULT_HIDDEN,
    DenseNet,
    MaskedCategorical,
    entropy,
    load_net,
    log_prob,
    sample,
    save_net,
)

HEAD_SIZES = (N_WORKFLOWS, N_TOOL_SUBSETS, N_TOOL_SUBSETS, N_TIERS, N_TIERS, N_TIERS)
HEAD_NAMES = ("workflow", "tools1", "tools2", "budget1", "budget2", "budget3")
STRUCT_LOGITS_SIZE = sum(HEAD_SIZES)

STOP = "STOP"  # sentinel name; the STOP index is always the last output slot


# ---------------------------------------------------------------------------
# Mask table
# ---------------------------------------------------------------------------


@dataclass
class MaskTable:
    """Workflow-conditioned validity masks over every structure dimension."""

    workflow_mask: np.ndarray            # (9,)
    tools1: np.ndarray                   # (9, 16)
    tools2: np.ndarray                   # (9, 16)
    budget1: np.ndarray                  # (9, 3)
    budget2: np.ndarray                  # (9, 3)
    budget3: np.ndarray                  # (9, 3)

    def __post_init__(self):
        self.workflow_mask = np.asarray(self.workflow_mask, dtype=np.float64)
        for name in ("tools1", "tools2", "budget1", "budget2", "budget3"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        self.validate()

    def validate(self) -> None:
        if self.workflow_mask.sum() < 1:
            raise InvalidMaskError("no workflow is valid")
        for wf in range(N_WORKFLOWS):
            if not self.workflow_mask[wf]:
                continue
            for name in ("tools1", "tools2", "budget1", "budget2", "budget3"):
                if getattr(self, name)[wf].sum() < 1:
                    raise InvalidMaskError(f"workflow {wf}: dimension {name} fully masked")

    def masks_for(self, workflow_id: int) -> list[np.ndarray]:
        """Per-dimension masks conditioned on the chosen workflow, in head
        order after the workflow head."""
        return [
            self.tools1[workflow_id],
            self.tools2[workflow_id],
            self.budget1[workflow_id],
            self.budget2[workflow_id],
            self.budget3[workflow_id],
        ]

    def is_valid(self, a: StructureAction) -> bool:
        if not self.workflow_mask[a.workflow_id]:
            return False
        masks = self.masks_for(a.workflow_id)
        choices = (a.tools1, a.tools2, *a.budgets)
        return all(m[c] > 0 for m, c in zip(masks, choices))


def all_ones_mask_table() -> MaskTable:
    return MaskTable(
        workflow_mask=np.ones(N_WORKFLOWS),
        tools1=np.ones((N_WORKFLOWS, N_TOOL_SUBSETS)),
        tools2=np.ones((N_WORKFLOWS, N_TOOL_SUBSETS)),
        budget1=np.ones((N_WORKFLOWS, N_TIERS)),
        budget2=np.ones((N_WORKFLOWS, N_TIERS)),
        budget3=np.ones((N_WORKFLOWS, N_TIERS)),
    )


def default_mask_table() -> MaskTable:
    """Default rules: agent-2 tools only where the workflow uses them, and
    budget slots collapsed to Low for inactive agents."""
    table = all_ones_mask_table()
    for wf in WORKFLOWS:
        if not wf.agent2_tools_allowed:
            table.tools2[wf.id, :] = 0.0
            table.tools2[wf.id, 0] = 1.0  # empty subset only
        if wf.agents_active < 2:
            table.budget2[wf.id, :] = 0.0
            table.budget2[wf.id, 0] = 1.0  # Low only
        if wf.agents_active < 3:
            table.budget3[wf.id, :] = 0.0
            table.budget3[wf.id, 0] = 1.0
    return table


def mask_table_from_config(rules: dict) -> MaskTable:
    """Build a table from a config mapping workflow name -> allowed choices.

    Recognized per-workflow keys: "tools1"/"tools2" (lists of subset indices)
    and "budgets" (list of three lists of tier names or indices). Workflows
    absent from the mapping keep the default rules; a top-level "workflows"
    list restricts the workflow head itself.
    """
    table = default_mask_table()
    allowed_wfs = rules.get("workflows")
    if allowed_wfs is not None:
        table.workflow_mask[:] = 0.0
        for name in allowed_wfs:
            table.workflow_mask[WORKFLOW_BY_NAME[name].id] = 1.0
    for name, spec in rules.items():
        if name == "workflows":
            continue
        if name not in WORKFLOW_BY_NAME:
            raise ContractError(f"unknown workflow in mask rules: {name}")
        wf = WORKFLOW_BY_NAME[name].id
        for key, attr in (("tools1", table.tools1), ("tools2", table.tools2)):
            if key in spec:
                attr[wf, :] = 0.0
                for idx in spec[key]:
                    attr[wf, int(idx)] = 1.0
        if "budgets" in spec:
            for slot, attr in enumerate((table.budget1, table.budget2, table.budget3)):
                attr[wf, :] = 0.0
                for tier in spec["budgets"][slot]:
                    t = TIER_NAMES.index(tier) if isinstance(tier, str) else int(tier)
                    attr[wf, t] = 1.0
    table.validate()
    return table


def enumerate_valid(table: MaskTable) -> int:
    """Closed-form count of valid structure actions: sum over unmasked
    workflows of the product of per-dimension support sizes."""
    total = 0
    for wf in range(N_WORKFLOWS):
        if not table.workflow_mask[wf]:
            continue
        n = 1
        for m in table.masks_for(wf):
            n *= int(m.sum())
        total += n
    return total


def enumerate_valid_exhaustive(table: MaskTable) -> int:
    """Count by explicit iteration over the full 62,208-element space."""
    count = 0
    for wf in range(N_WORKFLOWS):
        if not table.workflow_mask[wf]:
            continue
        t1s, t2s, b1s, b2s, b3s = (np.flatnonzero(m) for m in table.masks_for(wf))
        for _t1 in t1s:
            for _t2 in t2s:
                count += len(b1s) * len(b2s) * len(b3s)
    return count


def iter_valid_actions(table: MaskTable):
    """Yield every valid StructureAction under the table, canonical order."""
    for wf in range(N_WORKFLOWS):
        if not table.workflow_mask[wf]:
            continue
        masks = table.masks_for(wf)
        supports = [np.flatnonzero(m) for m in masks]
        for t1 in supports[0]:
            for t2 in supports[1]:
                for b1 in supports[2]:
                    for b2 in supports[3]:
                        for b3 in supports[4]:
                            yield StructureAction(
                                wf, int(t1), int(t2), (int(b1), int(b2), int(b3))
                            )


# ---------------------------------------------------------------------------
# Structure policy
# ---------------------------------------------------------------------------

_HEAD_OFFSETS = np.cumsum((0,) + HEAD_SIZES)


def head_slice(i: int) -> slice:
    return slice(int(_HEAD_OFFSETS[i]), int(_HEAD_OFFSETS[i + 1]))


class StructurePolicy:
    """Trunk net emitting logits for all six heads, plus a scalar value net."""

    def __init__(self, state_dim: int, hidden=DEFAULT_HIDDEN, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.state_dim = state_dim
        self.trunk = DenseNet([state_dim, *hidden, STRUCT_LOGITS_SIZE], rng=rng)
        self.value_net = DenseNet([state_dim, *hidden, 1], rng=rng)

    def head_logits(self, s_vec: np.ndarray) -> list[np.ndarray]:
        out = self.trunk.forward(s_vec)
        return [out[head_slice(i)] for i in range(len(HEAD_SIZES))]

    def distributions(self, s_vec, table: MaskTable, workflow_id: int):
        """MaskedCategoricals for all six heads given a chosen workflow."""
        logits = self.head_logits(s_vec)
        masks = [table.workflow_mask] + table.masks_for(workflow_id)
        return [MaskedCategorical(z, m) for z, m in zip(logits, masks)]

    def value(self, s_vec) -> float:
        return float(self.value_net.forward(s_vec)[0])

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        save_net(self.trunk, directory / "structure_trunk.params")
        save_net(self.value_net, directory / "structure_value.params")

    def load(self, directory) -> None:
        directory = Path(directory)
        self.trunk = load_net(directory / "structure_trunk.params")
        self.value_net = load_net(directory / "structure_value.params")


def sample_structure(
    policy: StructurePolicy,
    table: MaskTable,
    s: StateEmbedding,
    rng: np.random.Generator,
):
    """Sample workflow first, then the remaining heads under its masks.

    Returns (action, joint_log_prob, per_head_entropies).
    """
    s_vec = s.as_vector()
    logits = policy.head_logits(s_vec)
    wf_dist = MaskedCategorical(logits[0], table.workflow_mask)
    wf, lp = sample(wf_dist, rng)
    entropies = [entropy(wf_dist)]
    joint_lp = lp
    choices = []
    for head, mask in enumerate(table.masks_for(wf), start=1):
        dist = MaskedCategorical(logits[head], mask)
        c, lp = sample(dist, rng)
        joint_lp += lp
        entropies.append(entropy(dist))
        choices.append(c)
    action = StructureAction(wf, choices[0], choices[1], tuple(choices[2:]))
    return action, joint_lp, entropies


def log_prob_structure(
    policy: StructurePolicy, table: MaskTable, s: StateEmbedding, a: StructureAction
) -> float:
    """Joint log-probability under the identical masking pipeline as
    sampling; errors on any action the masks forbid."""
    if not table.is_valid(a):
        raise InvalidActionError(
            f"structure action invalid under mask table: {a}"
        )
    dists = policy.distributions(s.as_vector(), table, a.workflow_id)
    choices = (a.workflow_id, a.tools1, a.tools2, *a.budgets)
    return sum(log_prob(d, c) for d, c in zip(dists, choices))


def value_estimate(net: DenseNet, x) -> float:
    """Scalar value prediction for a state or prompt-step input."""
    return float(net.forward(np.asarray(x, dtype=np.float64))[0])


# ---------------------------------------------------------------------------
# Prompt policy
# ---------------------------------------------------------------------------


@dataclass
class PromptStep:
    """One sequential prompt decision, cached for PPO/SFT updates."""

    agent: int
    input_vec: np.ndarray
    mask: np.ndarray
    action: int            # atom id, or STOP index (= n_atoms)
    log_prob: float


class PromptPolicy:
    """Sequential atom selector conditioned on [state; one-hot workflow;
    multi-hot already-chosen atoms], with a per-role no-repeat mask and an
    always-available STOP action."""

    def __init__(self, state_dim: int, library: Sequence[PromptAtom],
                 hidden=DEFAULT_HIDDEN, rng=None):
        validate_library(library)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.state_dim = state_dim
        self.library = tuple(library)
        self.n_atoms = len(library)
        self.stop_index = self.n_atoms
        self.input_dim = state_dim + N_WORKFLOWS + self.n_atoms
        self.net = DenseNet([self.input_dim, *hidden, self.n_atoms + 1], rng=rng)
        self.value_net = DenseNet([self.input_dim, *hidden, 1], rng=rng)
        self._role_masks = {
            role: np.array([1.0 if a.role == role else 0.0 for a in library])
            for role in ROLES
        }

    def step_input(self, s_vec: np.ndarray, workflow_id: int, chosen: Sequence[int]):
        wf_onehot = np.zeros(N_WORKFLOWS)
        wf_onehot[workflow_id] = 1.0
        multi_hot = np.zeros(self.n_atoms)
        for a in chosen:
            multi_hot[a] = 1.0
        return np.concatenate([s_vec, wf_onehot, multi_hot])

    def step_mask(self, role: str, chosen: Sequence[int], length: int) -> np.ndarray:
        """Valid actions at one step: role-matching unchosen atoms plus STOP;
        STOP only once the sequence hits the length cap."""
        mask = np.zeros(self.n_atoms + 1)
        mask[self.stop_index] = 1.0
        if length < MAX_PROMPT_LEN:
            mask[: self.n_atoms] = self._role_masks[role]
            for a in chosen:
                mask[a] = 0.0
        return mask

    def value(self, step_input) -> float:
        return float(self.value_net.forward(step_input)[0])

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        save_net(self.net, directory / "prompt_policy.params")
        save_net(self.value_net, directory / "prompt_value.params")

    def load(self, directory) -> None:
        directory = Path(directory)
        self.net = load_net(directory / "prompt_policy.params")
        self.value_net = load_net(directory / "prompt_value.params")


def sample_prompts(
    policy: PromptPolicy,
    s: StateEmbedding,
    a_struct: StructureAction,
    rng: np.random.Generator,
):
    """One STOP-terminated sequence per active agent; agent i takes role
    ROLES[i]. Returns (sequences, steps) with stepwise log-probs recorded."""
    s_vec = s.as_vector()
    sequences: list[tuple[int, ...]] = []
    steps: list[PromptStep] = []
    for agent in range(a_struct.workflow.agents_active):
        role = ROLES[agent]
        chosen: list[int] = []
        while True:
            x = policy.step_input(s_vec, a_struct.workflow_id, chosen)
            mask = policy.step_mask(role, chosen, len(chosen))
            dist = MaskedCategorical(policy.net.forward(x), mask)
            action, lp = sample(dist, rng)
            steps.append(PromptStep(agent, x, mask, action, lp))
            if action == policy.stop_index:
                break
            chosen.append(action)
        sequences.append(tuple(chosen))
    return tuple(sequences), steps


def greedy_configuration(
    struct_policy: StructurePolicy,
    prompt_policy: PromptPolicy,
    table: MaskTable,
    s: StateEmbedding,
):
    """Deterministic argmax decode of both policies: the mode of each masked
    head (workflow first), then the argmax prompt step for every agent."""
    from .core import Configuration
    from .numeric import masked_softmax

    s_vec = s.as_vector()
    logits = struct_policy.head_logits(s_vec)
    wf = int(np.argmax(masked_softmax(MaskedCategorical(logits[0], table.workflow_mask))))
    choices = []
    for head, mask in enumerate(table.masks_for(wf), start=1):
        probs = masked_softmax(MaskedCategorical(logits[head], mask))
        choices.append(int(np.argmax(probs)))
    action = StructureAction(wf, choices[0], choices[1], tuple(choices[2:]))
    sequences = []
    for agent in range(action.workflow.agents_active):
        role = ROLES[agent]
        chosen: list[int] = []
        while True:
            x = prompt_policy.step_input(s_vec, wf, chosen)
            mask = prompt_policy.step_mask(role, chosen, len(chosen))
            probs = masked_softmax(MaskedCategorical(prompt_policy.net.forward(x), mask))
            pick = int(np.argmax(probs))
            if pick == prompt_policy.stop_index:
                break
            chosen.append(pick)
        sequences.append(tuple(chosen))
    return Configuration(action, tuple(sequences))


def log_prob_prompts(
    policy: PromptPolicy,
    s: StateEmbedding,
    a_struct: StructureAction,
    sequences: Sequence[Sequence[int]],
) -> float:
    """Total log-probability of given sequences (including each STOP)."""
    if len(sequences) != a_struct.workflow.agents_active:
        raise InvalidActionError("one prompt sequence required per active agent")
    s_vec = s.as_vector()
    total = 0.0
    for agent, seq in enumerate(sequences):
        role = ROLES[agent]
        chosen: list[int] = []
        for atom in list(seq) + [policy.stop_index]:
            x = policy.step_input(s_vec, a_struct.workflow_id, chosen)
            mask = policy.step_mask(role, chosen, len(chosen))
            if not mask[atom] > 0:
                raise InvalidActionError(
                    f"atom {atom} invalid for role {role} at position {len(chosen)}"
                )
            dist = MaskedCategorical(policy.net.forward(x), mask)
            total += log_prob(dist, atom)
            if atom != policy.stop_index:
                chosen.append(atom)
    return total
