"""Comparison baselines over the identical environment and reward: grid
search, greedy coordinate ascent, a flat contextual-bandit policy, and a flat
sequential policy without the hierarchical decomposition.

All searches run through one Harness so every baseline sees the same queries,
reward config, and seed stream; only the decision procedure differs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import (
    N_TIERS,
    N_TOOL_SUBSETS,
    N_WORKFLOWS,
    ROLES,
    WORKFLOWS,
    Configuration,
    PromptAtom,
    StructureAction,
    index_structure_action,
)
from .env import SyntheticEnv
from .errors import ContractError, TrainingDivergenceError
from .numeric import (
    AdamState,
    DenseNet,
    MaskedCategorical,
    adam_step,
    clip_grad_norm,
    entropy,
    entropy_grad_logits,
    log_prob,
    log_prob_grad_logits,
    sample,
)
from .policy import HEAD_SIZES, MaskTable, default_mask_table, head_slice
from .reward import RewardConfig, shaped_reward
from .train import PPOConfig, _normalize, _surrogate_and_coeff


@dataclass(frozen=True)
class SearchBudget:
    max_evaluations: int = 50
    episodes_per_evaluation: int = 20

    def __post_init__(self):
        if self.max_evaluations < 1 or self.episodes_per_evaluation < 1:
            raise ContractError("search budget fields must be >= 1")


@dataclass
class Harness:
    """Shared evaluation harness: scores a fixed configuration by mean shaped
    reward over all queries, either exactly (expected_mode) or by seeded
    episodes. Counts candidate evaluations."""

    env: SyntheticEnv
    reward_cfg: RewardConfig
    seed: int = 0
    expected_mode: bool = True
    n_evaluations: int = 0

    def evaluate(self, config: Configuration, episodes_per_evaluation: int = 20) -> float:
        self.n_evaluations += 1
        if self.expected_mode:
            return float(
                np.mean(
                    [self.env.expected_reward(q, config, self.reward_cfg)
                     for q in self.env.queries]
                )
            )
        total = 0.0
        n = 0
        for qi, q in enumerate(self.env.queries):
            for i in range(episodes_per_evaluation):
                exec_seed = int(
                    np.random.SeedSequence(
                        [self.seed, self.n_evaluations, qi, i]
                    ).generate_state(1)[0]
                )
                outcome = self.env.execute(q, config, exec_seed)
                total += shaped_reward(outcome, self.reward_cfg)[0]
                n += 1
        return total / n


def _tie_break_key(value: float, config: Configuration):
    return (
        -value,
        index_structure_action(config.structure),
        sum(len(p) for p in config.prompts),
        config.prompts,
    )


# ---------------------------------------------------------------------------
# Grid search
# ---------------------------------------------------------------------------


def _canonical_atom(library: Sequence[PromptAtom], role: str) -> Optional[int]:
    for atom in library:
        if atom.role == role:
            return atom.id
    return None


def default_grid(
    table: MaskTable, library: Sequence[PromptAtom]
) -> list[Configuration]:
    """Canonical stratified candidate slice: every valid workflow x {empty,
    largest-valid tool subsets} x {uniform lowest, uniform highest tiers} x
    {no atoms, one canonical atom per agent}."""
    grid = []
    for wf in range(N_WORKFLOWS):
        if not table.workflow_mask[wf]:
            continue
        masks = table.masks_for(wf)
        supports = [np.flatnonzero(m).tolist() for m in masks]
        t1_opts = sorted({supports[0][0], max(supports[0], key=lambda m: (bin(m).count("1"), -m))})
        t2_opts = sorted({supports[1][0], max(supports[1], key=lambda m: (bin(m).count("1"), -m))})
        budget_opts = []
        for uniform in (min, max):
            budget_opts.append(tuple(uniform(supports[2 + i]) for i in range(3)))
        budget_opts = sorted(set(budget_opts))
        n_agents = WORKFLOWS[wf].agents_active
        empty = tuple(() for _ in range(n_agents))
        canonical = tuple(
            ((a,) if (a := _canonical_atom(library, ROLES[i])) is not None else ())
            for i in range(n_agents)
        )
        prompt_opts = [empty] if canonical == empty else [empty, canonical]
        for t1 in t1_opts:
            for t2 in t2_opts:
                for budgets in budget_opts:
                    for prompts in prompt_opts:
                        grid.append(
                            Configuration(
                                StructureAction(wf, t1, t2, budgets), prompts
                            )
                        )
    return grid


def grid_search(
    harness: Harness,
    grid: Sequence[Configuration],
    budget: SearchBudget,
):
    """Evaluate up to max_evaluations candidates in canonical (given) order;
    returns (best configuration, mean utility, trace)."""
    if not grid:
        raise ContractError("grid_search requires a non-empty candidate grid")
    trace = []
    best = None
    best_key = None
    for config in list(grid)[: budget.max_evaluations]:
        value = harness.evaluate(config, budget.episodes_per_evaluation)
        trace.append((config, value))
        key = _tie_break_key(value, config)
        if best_key is None or key < best_key:
            best, best_key = (config, value), key
    return best[0], best[1], trace


# ---------------------------------------------------------------------------
# Greedy coordinate ascent
# ---------------------------------------------------------------------------

GREEDY_DIMENSIONS = ("workflow", "tools1", "tools2", "budget1", "budget2", "budget3", "atoms")


def _project_config(config: Configuration, wf: int, table: MaskTable) -> Configuration:
    """Re-fit a configuration onto a different workflow: clamp each dimension
    to the new valid support and resize the prompt tuple."""
    masks = table.masks_for(wf)
    supports = [np.flatnonzero(m).tolist() for m in masks]

    def clamp(value, support):
        return value if value in support else support[0]

    a = config.structure
    structure = StructureAction(
        wf,
        clamp(a.tools1, supports[0]),
        clamp(a.tools2, supports[1]),
        tuple(clamp(a.budgets[i], supports[2 + i]) for i in range(3)),
    )
    n_agents = WORKFLOWS[wf].agents_active
    prompts = tuple(
        config.prompts[i] if i < len(config.prompts) else () for i in range(n_agents)
    )
    return Configuration(structure, prompts)


def greedy_search(
    harness: Harness,
    table: MaskTable,
    library: Sequence[PromptAtom],
    budget: SearchBudget,
    dimension_order: Sequence[str] = GREEDY_DIMENSIONS,
):
    """Single-pass coordinate ascent from the cheapest default configuration
    (first valid workflow, empty tools, lowest tiers, no atoms). Returns
    (best configuration, utility, trace)."""
    missing = set(GREEDY_DIMENSIONS) - set(dimension_order)
    if missing:
        raise ContractError(f"dimension order must cover {sorted(missing)}")
    wf0 = int(np.flatnonzero(table.workflow_mask)[0])
    supports0 = [np.flatnonzero(m).tolist() for m in table.masks_for(wf0)]
    start = Configuration(
        StructureAction(
            wf0,
            supports0[0][0],
            supports0[1][0],
            tuple(supports0[2 + i][0] for i in range(3)),
        ),
        tuple(() for _ in range(WORKFLOWS[wf0].agents_active)),
    )
    current = start
    current_value = harness.evaluate(start, budget.episodes_per_evaluation)
    trace = [("start", start, current_value)]

    def candidates_for(dim: str, config: Configuration):
        a = config.structure
        if dim == "workflow":
            return [
                _project_config(config, int(wf), table)
                for wf in np.flatnonzero(table.workflow_mask)
                if int(wf) != a.workflow_id
            ]
        supports = [np.flatnonzero(m).tolist() for m in table.masks_for(a.workflow_id)]
        out = []
        if dim == "tools1":
            out = [
                Configuration(StructureAction(a.workflow_id, t, a.tools2, a.budgets), config.prompts)
                for t in supports[0] if t != a.tools1
            ]
        elif dim == "tools2":
            out = [
                Configuration(StructureAction(a.workflow_id, a.tools1, t, a.budgets), config.prompts)
                for t in supports[1] if t != a.tools2
            ]
        elif dim in ("budget1", "budget2", "budget3"):
            slot = int(dim[-1]) - 1
            for tier in supports[2 + slot]:
                if tier == a.budgets[slot]:
                    continue
                budgets = tuple(
                    tier if i == slot else a.budgets[i] for i in range(3)
                )
                out.append(
                    Configuration(
                        StructureAction(a.workflow_id, a.tools1, a.tools2, budgets),
                        config.prompts,
                    )
                )
        elif dim == "atoms":
            for agent in range(len(config.prompts)):
                role = ROLES[agent]
                for atom in library:
                    if atom.role != role or config.prompts[agent] == (atom.id,):
                        continue
                    prompts = tuple(
                        (atom.id,) if i == agent else config.prompts[i]
                        for i in range(len(config.prompts))
                    )
                    out.append(Configuration(a, prompts))
        return out

    for dim in dimension_order:
        best_key = _tie_break_key(current_value, current)
        for candidate in candidates_for(dim, current):
            if harness.n_evaluations >= budget.max_evaluations:
                break
            value = harness.evaluate(candidate, budget.episodes_per_evaluation)
            trace.append((dim, candidate, value))
            key = _tie_break_key(value, candidate)
            if key < best_key:
                current, current_value, best_key = candidate, value, key
    return current, current_value, trace


# ---------------------------------------------------------------------------
# Flat policies
# ---------------------------------------------------------------------------


@dataclass
class FlatDecision:
    input_vec: np.ndarray
    mask: np.ndarray
    action: int
    log_prob: float
    target: float = 0.0
    adv: float = 0.0


@dataclass
class FlatEpisode:
    decisions: list[FlatDecision]
    config: Configuration
    reward: float = 0.0


class BanditPolicy:
    """One-shot flat policy: six structure heads plus a single prompt-atom
    head (last index = no atom), all sampled simultaneously from the state.
    No hierarchy and no workflow-conditioned masking."""

    def __init__(self, state_dim: int, n_atoms: int, hidden=(64, 64), rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.state_dim = state_dim
        self.n_atoms = n_atoms
        self.head_sizes = HEAD_SIZES + (n_atoms + 1,)
        self.net = DenseNet([state_dim, *hidden, sum(self.head_sizes)], rng=rng)
        self.value_net = DenseNet([state_dim, *hidden, 1], rng=rng)
        self._offsets = np.cumsum((0,) + self.head_sizes)

    def head_logits(self, s_vec):
        out = self.net.forward(s_vec)
        return [
            out[self._offsets[i] : self._offsets[i + 1]]
            for i in range(len(self.head_sizes))
        ]

    def act(self, s_vec, rng) -> FlatEpisode:
        # Decisions are recorded against the full concatenated output so the
        # shared flat PPO update can re-evaluate them with one forward pass:
        # each head's mask selects only its own logit slice.
        full_logits = self.net.forward(s_vec)
        decisions = []
        choices = []
        for i in range(len(self.head_sizes)):
            lo, hi = int(self._offsets[i]), int(self._offsets[i + 1])
            mask = np.zeros(len(full_logits))
            mask[lo:hi] = 1.0
            dist = MaskedCategorical(full_logits, mask)
            c, lp = sample(dist, rng)
            decisions.append(FlatDecision(s_vec, mask, c, lp))
            choices.append(c - lo)
        wf, t1, t2, b1, b2, b3, atom = choices
        n_agents = WORKFLOWS[wf].agents_active
        prompts = []
        for agent in range(n_agents):
            if atom < self.n_atoms:
                prompts.append((atom,))
            else:
                prompts.append(())
        config = Configuration(StructureAction(wf, t1, t2, (b1, b2, b3)), tuple(prompts))
        return FlatEpisode(decisions=decisions, config=config)

    def probability_of(self, s_vec, config: Configuration, atom: Optional[int]) -> float:
        """Joint probability of a flat choice tuple (probe helper)."""
        logits = self.head_logits(s_vec)
        a = config.structure
        atom_idx = self.n_atoms if atom is None else atom
        choices = (a.workflow_id, a.tools1, a.tools2, *a.budgets, atom_idx)
        total = 0.0
        for z, c in zip(logits, choices):
            total += log_prob(MaskedCategorical(z, np.ones(len(z))), c)
        return math.exp(total)


class FlatEpisodePolicy:
    """One shared network chooses every dimension in sequence (workflow,
    tools1, tools2, tiers, then atoms with STOP per agent) over a max-arity
    output head with per-stage arity masks. Hierarchical masks can be
    injected for support-equivalence checks but are off by default."""

    STRUCT_STAGES = 6

    def __init__(self, state_dim: int, library: Sequence[PromptAtom],
                 hidden=(64, 64), rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.state_dim = state_dim
        self.library = tuple(library)
        self.n_atoms = len(library)
        self.stop_index = self.n_atoms
        self.max_arity = max(max(HEAD_SIZES), self.n_atoms + 1)
        self.n_stages = self.STRUCT_STAGES + 1  # structure dims + atom stage
        # input: state, stage one-hot, chosen-so-far one-hots (wf), chosen atoms,
        # agent one-hot
        self.input_dim = state_dim + self.n_stages + N_WORKFLOWS + self.n_atoms + 3
        self.net = DenseNet([self.input_dim, *hidden, self.max_arity], rng=rng)
        self.value_net = DenseNet([self.input_dim, *hidden, 1], rng=rng)

    def stage_input(self, s_vec, stage, workflow_id, chosen_atoms, agent):
        stage_onehot = np.zeros(self.n_stages)
        stage_onehot[stage] = 1.0
        wf = np.zeros(N_WORKFLOWS)
        if workflow_id is not None:
            wf[workflow_id] = 1.0
        atoms = np.zeros(self.n_atoms)
        for a in chosen_atoms:
            atoms[a] = 1.0
        agent_onehot = np.zeros(3)
        if agent is not None:
            agent_onehot[agent] = 1.0
        return np.concatenate([s_vec, stage_onehot, wf, atoms, agent_onehot])

    def _arity_mask(self, arity: int) -> np.ndarray:
        mask = np.zeros(self.max_arity)
        mask[:arity] = 1.0
        return mask

    def _struct_stage_mask(self, stage: int, workflow_id, table: Optional[MaskTable]):
        mask = self._arity_mask(HEAD_SIZES[stage])
        if table is not None:
            if stage == 0:
                mask[: N_WORKFLOWS] *= table.workflow_mask
            else:
                mask[: HEAD_SIZES[stage]] *= table.masks_for(workflow_id)[stage - 1]
        return mask

    def act(self, s_vec, rng, table: Optional[MaskTable] = None) -> FlatEpisode:
        decisions = []
        choices = []
        workflow_id = None
        for stage in range(self.STRUCT_STAGES):
            x = self.stage_input(s_vec, stage, workflow_id, [], None)
            mask = self._struct_stage_mask(stage, workflow_id, table)
            dist = MaskedCategorical(self.net.forward(x), mask)
            c, lp = sample(dist, rng)
            decisions.append(FlatDecision(x, mask, c, lp))
            choices.append(c)
            if stage == 0:
                workflow_id = c
        wf, t1, t2, b1, b2, b3 = choices
        n_agents = WORKFLOWS[wf].agents_active
        sequences = []
        from .core import MAX_PROMPT_LEN

        for agent in range(n_agents):
            chosen: list[int] = []
            while True:
                x = self.stage_input(s_vec, self.STRUCT_STAGES, wf, chosen, agent)
                mask = self._arity_mask(self.n_atoms + 1)
                for a in chosen:
                    mask[a] = 0.0
                if len(chosen) >= MAX_PROMPT_LEN:
                    mask[: self.n_atoms] = 0.0
                dist = MaskedCategorical(self.net.forward(x), mask)
                c, lp = sample(dist, rng)
                decisions.append(FlatDecision(x, mask, c, lp))
                if c == self.stop_index:
                    break
                chosen.append(c)
            sequences.append(tuple(chosen))
        config = Configuration(
            StructureAction(wf, t1, t2, (b1, b2, b3)), tuple(sequences)
        )
        return FlatEpisode(decisions=decisions, config=config)


# ---------------------------------------------------------------------------
# Flat PPO training (shared by bandit and flat-episode baselines)
# ---------------------------------------------------------------------------


def _flat_collect(policy, env, n, reward_cfg, run_seed, start, gamma,
                  table=None) -> list[FlatEpisode]:
    episodes = []
    for i in range(n):
        idx = start + i
        rng = np.random.default_rng([run_seed, idx, 0])
        query = env.queries[int(rng.integers(0, len(env.queries)))]
        s_vec = env.embed(query).as_vector()
        if isinstance(policy, FlatEpisodePolicy):
            ep = policy.act(s_vec, rng, table)
        else:
            ep = policy.act(s_vec, rng)
        exec_seed = int(np.random.SeedSequence([run_seed, idx]).generate_state(1)[0])
        outcome = env.execute(query, ep.config, exec_seed)
        ep.reward = shaped_reward(outcome, reward_cfg)[0]
        k = len(ep.decisions)
        for j, d in enumerate(ep.decisions):
            remaining = k - 1 - j
            d.target = ep.reward if (gamma == 0.0 or remaining == 0) else gamma**remaining * ep.reward
        episodes.append(ep)
    return episodes


def _flat_ppo_update(policy, episodes: Sequence[FlatEpisode], cfg: PPOConfig,
                     opt_net: AdamState, opt_value: AdamState):
    decisions = [d for ep in episodes for d in ep.decisions]
    advs = _normalize(
        np.array([d.target - float(policy.value_net.forward(d.input_vec)[0]) for d in decisions])
    )
    for d, a in zip(decisions, advs):
        d.adv = float(a)
    diag = {}
    for _ in range(cfg.epochs_per_batch):
        g_net = policy.net.zero_grads()
        g_val = policy.value_net.zero_grads()
        loss = 0.0
        n = len(decisions)
        for d in decisions:
            dist = MaskedCategorical(policy.net.forward(d.input_vec), d.mask)
            new_lp = log_prob(dist, d.action)
            ratio = math.exp(new_lp - d.log_prob)
            surr, coeff = _surrogate_and_coeff(ratio, d.adv, cfg.clip_eps)
            h = entropy(dist)
            loss += (-surr - cfg.entropy_coef * h) / n
            g = (-coeff / n) * log_prob_grad_logits(dist, d.action)
            g += (-cfg.entropy_coef / n) * entropy_grad_logits(dist)
            gl, _ = policy.net.backward(d.input_vec, g)
            for acc, gg in zip(g_net, gl):
                acc += gg
            v = float(policy.value_net.forward(d.input_vec)[0])
            err = v - d.target
            loss += cfg.value_coef * err * err / n
            gl, _ = policy.value_net.backward(
                d.input_vec, np.array([2.0 * cfg.value_coef * err / n])
            )
            for acc, gg in zip(g_val, gl):
                acc += gg
        if not math.isfinite(loss):
            raise TrainingDivergenceError("non-finite flat-policy loss")
        adam_step(policy.net.params, clip_grad_norm(g_net, cfg.max_grad_norm),
                  opt_net, cfg.lr_struct)
        adam_step(policy.value_net.params, clip_grad_norm(g_val, cfg.max_grad_norm),
                  opt_value, cfg.lr_struct)
        diag = {"loss": loss, "mean_reward": float(np.mean([e.reward for e in episodes]))}
    return diag


def bandit_policy_train(
    env: SyntheticEnv,
    cfg: PPOConfig,
    reward_cfg: RewardConfig,
    run_seed: int,
    hidden=(64, 64),
):
    """Contextual-bandit baseline: flat one-shot policy trained by PPO with
    gamma = 0. Returns (policy, diagnostics)."""
    state_dim = env.semantic_dim + 5
    policy = BanditPolicy(state_dim, len(env.library), hidden,
                          rng=np.random.default_rng(run_seed))
    opt_net = AdamState.for_params(policy.net.params)
    opt_value = AdamState.for_params(policy.value_net.params)
    diagnostics = []
    episode = 0
    while episode < cfg.total_episodes:
        n = min(cfg.batch_size, cfg.total_episodes - episode)
        episodes = _flat_collect(policy, env, n, reward_cfg, run_seed, episode, 0.0)
        episode += n
        diagnostics.append(
            dict(_flat_ppo_update(policy, episodes, cfg, opt_net, opt_value),
                 episodes=episode)
        )
    return policy, diagnostics


def flat_episode_policy_train(
    env: SyntheticEnv,
    cfg: PPOConfig,
    reward_cfg: RewardConfig,
    run_seed: int,
    hidden=(64, 64),
    table: Optional[MaskTable] = None,
):
    """Flat sequential baseline: one shared network picks every dimension in
    order without the hierarchical decomposition. Returns (policy,
    diagnostics)."""
    state_dim = env.semantic_dim + 5
    policy = FlatEpisodePolicy(state_dim, env.library, hidden,
                               rng=np.random.default_rng(run_seed))
    opt_net = AdamState.for_params(policy.net.params)
    opt_value = AdamState.for_params(policy.value_net.params)
    diagnostics = []
    episode = 0
    while episode < cfg.total_episodes:
        n = min(cfg.batch_size, cfg.total_episodes - episode)
        episodes = _flat_collect(
            policy, env, n, reward_cfg, run_seed, episode, cfg.gamma, table
        )
        episode += n
        diagnostics.append(
            dict(_flat_ppo_update(policy, episodes, cfg, opt_net, opt_value),
                 episodes=episode)
        )
    return policy, diagnostics


def random_policy_utility(
    env: SyntheticEnv,
    reward_cfg: RewardConfig,
    n_episodes: int,
    run_seed: int,
    table: Optional[MaskTable] = None,
) -> float:
    """Monte-Carlo mean shaped reward of uniform random valid configurations;
    the floor that trained baselines must beat."""
    table = table if table is not None else default_mask_table()
    rng = np.random.default_rng(run_seed)
    total = 0.0
    for i in range(n_episodes):
        query = env.queries[int(rng.integers(0, len(env.queries)))]
        wf_support = np.flatnonzero(table.workflow_mask)
        wf = int(wf_support[rng.integers(0, len(wf_support))])
        supports = [np.flatnonzero(m) for m in table.masks_for(wf)]
        picks = [int(s[rng.integers(0, len(s))]) for s in supports]
        n_agents = WORKFLOWS[wf].agents_active
        prompts = []
        for agent in range(n_agents):
            role_atoms = [a.id for a in env.library if a.role == ROLES[agent]]
            if role_atoms and rng.random() < 0.5:
                prompts.append((int(role_atoms[rng.integers(0, len(role_atoms))]),))
            else:
                prompts.append(())
        config = Configuration(
            StructureAction(wf, picks[0], picks[1], tuple(picks[2:])),
            tuple(prompts),
        )
        exec_seed = int(np.random.SeedSequence([run_seed, i]).generate_state(1)[0])
        outcome = env.execute(query, config, exec_seed)
        total += shaped_reward(outcome, reward_cfg)[0]
    return total / n_episodes
