"""End-to-end training: masked PPO with per-batch advantage normalization,
elite filtering, SFT refinement, GRPO and DPO alternatives, and executable
checks of the SFT concentration guarantees.

All losses are exposed as pure (loss, grads) functions of the current
parameters so gradient correctness is testable against finite differences.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .core import (
    Configuration,
    EpisodeRecord,
    ExperienceBuffer,
    StateEmbedding,
    StructureAction,
    index_structure_action,
)
from .env import SyntheticEnv
from .errors import (
    ContractError,
    EmptyEliteError,
    NoPairsError,
    TrainingDivergenceError,
)
from .numeric import (
    AdamState,
    MaskedCategorical,
    adam_step,
    clip_grad_norm,
    entropy,
    entropy_grad_logits,
    log_prob,
    log_prob_grad_logits,
    masked_softmax,
)
from .policy import (
    HEAD_SIZES,
    MaskTable,
    PromptPolicy,
    PromptStep,
    StructurePolicy,
    head_slice,
    log_prob_structure,
    sample_prompts,
    sample_structure,
)
from .reward import RewardConfig, shaped_reward

# ---------------------------------------------------------------------------
# Configs (defaults follow the published training hyperparameters)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PPOConfig:
    lr_struct: float = 3e-4
    lr_prompt: float = 5e-5
    batch_size: int = 32
    clip_eps: float = 0.2
    gamma: float = 0.95
    entropy_coef: float = 0.05
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    epochs_per_batch: int = 4
    total_episodes: int = 4000


@dataclass(frozen=True)
class SFTConfig:
    lr_struct: float = 1e-4
    lr_prompt: float = 5e-6
    entropy_reg: float = 0.01
    tau: float = 4.0
    elite_fraction: float = 0.30
    epochs: int = 10

    def __post_init__(self):
        if not 0 < self.elite_fraction <= 1:
            raise ContractError("elite_fraction must be in (0, 1]")


@dataclass(frozen=True)
class GRPOConfig:
    lr: float = 3e-4
    batch_size: int = 64
    clip_eps: float = 0.2
    gamma: float = 0.99
    entropy_coef: float = 0.05
    kl_coef: float = 0.0
    epochs_per_batch: int = 4
    total_episodes: int = 4000


@dataclass(frozen=True)
class DPOConfig:
    lr_struct: float = 1e-4
    lr_prompt: float = 1e-5
    batch_size: int = 16
    beta: float = 0.05
    entropy_coef: float = 0.05
    epochs: int = 3
    max_grad_norm: float = 0.5
    positive_reward: float = 4.0   # positives additionally require correctness
    negative_reward: float = 2.0


# ---------------------------------------------------------------------------
# Rollout collection
# ---------------------------------------------------------------------------


@dataclass
class Rollout:
    """One configured-and-executed episode plus the caches PPO needs."""

    record: EpisodeRecord
    struct_log_prob: float
    prompt_steps: list[PromptStep]
    # filled by compute_advantages
    struct_adv: float = 0.0
    struct_target: float = 0.0
    step_advs: list[float] = field(default_factory=list)
    step_targets: list[float] = field(default_factory=list)

    @property
    def state(self) -> StateEmbedding:
        return self.record.state


def _episode_seed(run_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([run_seed, index]).generate_state(1)[0])


def collect_rollouts(
    struct_policy: StructurePolicy,
    prompt_policy: PromptPolicy,
    table: MaskTable,
    env: SyntheticEnv,
    n: int,
    reward_cfg: RewardConfig,
    run_seed: int,
    start_episode: int = 0,
) -> list[Rollout]:
    """Embed -> sample structure (masked) -> sample prompts -> execute ->
    shaped reward. Fully deterministic given run_seed and the episode
    counter (single-executor mode)."""
    rollouts = []
    for i in range(n):
        episode = start_episode + i
        rng = np.random.default_rng([run_seed, episode, 0])
        query = env.queries[int(rng.integers(0, len(env.queries)))]
        state = env.embed(query)
        action, struct_lp, _ = sample_structure(struct_policy, table, state, rng)
        prompts, steps = sample_prompts(prompt_policy, state, action, rng)
        exec_seed = _episode_seed(run_seed, episode)
        config = Configuration(structure=action, prompts=prompts)
        outcome = env.execute(query, config, exec_seed)
        reward, breakdown = shaped_reward(outcome, reward_cfg)
        record = EpisodeRecord(
            state=state,
            structure_action=action,
            prompt_actions=prompts,
            outcome=outcome,
            reward=reward,
            reward_breakdown=breakdown,
            seed=exec_seed,
        )
        rollouts.append(Rollout(record=record, struct_log_prob=struct_lp, prompt_steps=steps))
    return rollouts


def collect_episodes(
    struct_policy, prompt_policy, table, env, n, reward_cfg, run_seed, start_episode=0
) -> ExperienceBuffer:
    buffer = ExperienceBuffer()
    for r in collect_rollouts(
        struct_policy, prompt_policy, table, env, n, reward_cfg, run_seed, start_episode
    ):
        buffer.append(r.record)
    return buffer


# ---------------------------------------------------------------------------
# Advantages
# ---------------------------------------------------------------------------


def _normalize(values: np.ndarray) -> np.ndarray:
    """Mean-0 std-1 with a population std and the +1e-8 guard."""
    return (values - values.mean()) / (values.std() + 1e-8)


def compute_advantages(
    rollouts: Sequence[Rollout],
    struct_policy: StructurePolicy,
    prompt_policy: PromptPolicy,
    gamma: float,
) -> None:
    """Structure advantage = return - V_struct(s); prompt-step advantage =
    gamma-discounted terminal reward - V_prompt(step input). Each set is
    normalized per batch, ranking-preserving."""
    if not rollouts:
        raise ContractError("cannot compute advantages for an empty batch")
    struct_raw = []
    for r in rollouts:
        r.struct_target = r.record.reward
        struct_raw.append(r.struct_target - struct_policy.value(r.state.as_vector()))
    struct_norm = _normalize(np.array(struct_raw))
    for r, a in zip(rollouts, struct_norm):
        r.struct_adv = float(a)

    step_raw = []
    for r in rollouts:
        k = len(r.prompt_steps)
        r.step_targets = [
            gamma ** (k - 1 - j) * r.record.reward for j in range(k)
        ]
        r.step_advs = []
        for step, target in zip(r.prompt_steps, r.step_targets):
            step_raw.append(target - prompt_policy.value(step.input_vec))
    if step_raw:
        step_norm = _normalize(np.array(step_raw))
        idx = 0
        for r in rollouts:
            r.step_advs = [float(step_norm[idx + j]) for j in range(len(r.prompt_steps))]
            idx += len(r.prompt_steps)


def grpo_advantages(rewards: Sequence[float]) -> np.ndarray:
    """Group-relative advantages: (R_i - mean) / (population std + 1e-8)."""
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.size == 0:
        raise ContractError("grpo_advantages needs at least one reward")
    return (rewards - rewards.mean()) / (rewards.std() + 1e-8)


# ---------------------------------------------------------------------------
# PPO loss and update
# ---------------------------------------------------------------------------


def _surrogate_and_coeff(ratio: float, adv: float, clip_eps: float):
    """min(rho*A, clip(rho)*A) and d(surrogate)/d(new log-prob)."""
    clipped = min(max(ratio, 1.0 - clip_eps), 1.0 + clip_eps)
    unclipped_term = ratio * adv
    clipped_term = clipped * adv
    if unclipped_term <= clipped_term:
        return unclipped_term, ratio * adv
    return clipped_term, 0.0


def ppo_loss_and_grads(
    struct_policy: StructurePolicy,
    prompt_policy: PromptPolicy,
    table: MaskTable,
    rollouts: Sequence[Rollout],
    cfg: PPOConfig,
    use_value_loss: bool = True,
):
    """Clipped-surrogate PPO loss over one batch, with value MSE and entropy
    regularization; masks are applied identically to old and new log-probs.

    Returns (loss, grads, diagnostics) where grads maps net name -> gradient
    list aligned with that net's parameters.
    """
    n_struct = len(rollouts)
    n_steps = sum(len(r.prompt_steps) for r in rollouts)
    grads = {
        "struct_trunk": struct_policy.trunk.zero_grads(),
        "struct_value": struct_policy.value_net.zero_grads(),
        "prompt_net": prompt_policy.net.zero_grads(),
        "prompt_value": prompt_policy.value_net.zero_grads(),
    }
    loss = 0.0
    clip_hits = 0
    sum_entropy = 0.0
    sum_value_loss = 0.0

    for r in rollouts:
        s_vec = r.state.as_vector()
        a = r.record.structure_action
        dists = struct_policy.distributions(s_vec, table, a.workflow_id)
        choices = (a.workflow_id, a.tools1, a.tools2, *a.budgets)
        new_lp = sum(log_prob(d, c) for d, c in zip(dists, choices))
        ratio = math.exp(new_lp - r.struct_log_prob)
        surr, coeff = _surrogate_and_coeff(ratio, r.struct_adv, cfg.clip_eps)
        if abs(ratio - 1.0) > cfg.clip_eps:
            clip_hits += 1
        ep_entropy = sum(entropy(d) for d in dists)
        sum_entropy += ep_entropy
        loss += (-surr - cfg.entropy_coef * ep_entropy) / n_struct

        dlogits = np.zeros(sum(HEAD_SIZES))
        for head, (d, c) in enumerate(zip(dists, choices)):
            g = (-coeff / n_struct) * log_prob_grad_logits(d, c)
            g += (-cfg.entropy_coef / n_struct) * entropy_grad_logits(d)
            dlogits[head_slice(head)] = g
        g_trunk, _ = struct_policy.trunk.backward(s_vec, dlogits)
        for acc, g in zip(grads["struct_trunk"], g_trunk):
            acc += g

        if use_value_loss:
            v = struct_policy.value(s_vec)
            err = v - r.struct_target
            sum_value_loss += err * err
            loss += cfg.value_coef * err * err / n_struct
            g_val, _ = struct_policy.value_net.backward(
                s_vec, np.array([2.0 * cfg.value_coef * err / n_struct])
            )
            for acc, g in zip(grads["struct_value"], g_val):
                acc += g

        for step, adv, target in zip(r.prompt_steps, r.step_advs, r.step_targets):
            dist = MaskedCategorical(prompt_policy.net.forward(step.input_vec), step.mask)
            new_lp = log_prob(dist, step.action)
            ratio = math.exp(new_lp - step.log_prob)
            surr, coeff = _surrogate_and_coeff(ratio, adv, cfg.clip_eps)
            if abs(ratio - 1.0) > cfg.clip_eps:
                clip_hits += 1
            h = entropy(dist)
            sum_entropy += h
            loss += (-surr - cfg.entropy_coef * h) / n_steps
            g = (-coeff / n_steps) * log_prob_grad_logits(dist, step.action)
            g += (-cfg.entropy_coef / n_steps) * entropy_grad_logits(dist)
            g_net, _ = prompt_policy.net.backward(step.input_vec, g)
            for acc, gg in zip(grads["prompt_net"], g_net):
                acc += gg
            if use_value_loss:
                v = prompt_policy.value(step.input_vec)
                err = v - target
                sum_value_loss += err * err
                loss += cfg.value_coef * err * err / n_steps
                g_val, _ = prompt_policy.value_net.backward(
                    step.input_vec, np.array([2.0 * cfg.value_coef * err / n_steps])
                )
                for acc, gg in zip(grads["prompt_value"], g_val):
                    acc += gg

    diagnostics = {
        "loss": loss,
        "clip_fraction": clip_hits / max(n_struct + n_steps, 1),
        "mean_entropy": sum_entropy / max(n_struct + n_steps, 1),
        "value_loss": sum_value_loss / max(n_struct + n_steps, 1),
        "mean_reward": float(np.mean([r.record.reward for r in rollouts])),
    }
    return loss, grads, diagnostics


@dataclass
class OptimizerSet:
    struct_trunk: AdamState
    struct_value: AdamState
    prompt_net: AdamState
    prompt_value: AdamState

    @classmethod
    def create(cls, struct_policy: StructurePolicy, prompt_policy: PromptPolicy):
        return cls(
            struct_trunk=AdamState.for_params(struct_policy.trunk.params),
            struct_value=AdamState.for_params(struct_policy.value_net.params),
            prompt_net=AdamState.for_params(prompt_policy.net.params),
            prompt_value=AdamState.for_params(prompt_policy.value_net.params),
        )


def ppo_update(
    struct_policy: StructurePolicy,
    prompt_policy: PromptPolicy,
    table: MaskTable,
    rollouts: Sequence[Rollout],
    cfg: PPOConfig,
    opt: OptimizerSet,
    use_value_loss: bool = True,
):
    """epochs_per_batch gradient steps on the batch; per-network gradient
    clipping and per-policy learning rates."""
    last = None
    for _ in range(cfg.epochs_per_batch):
        loss, grads, last = ppo_loss_and_grads(
            struct_policy, prompt_policy, table, rollouts, cfg, use_value_loss
        )
        if not math.isfinite(loss):
            raise TrainingDivergenceError(f"non-finite PPO loss: {last}")
        for name, net, state, lr in (
            ("struct_trunk", struct_policy.trunk, opt.struct_trunk, cfg.lr_struct),
            ("struct_value", struct_policy.value_net, opt.struct_value, cfg.lr_struct),
            ("prompt_net", prompt_policy.net, opt.prompt_net, cfg.lr_prompt),
            ("prompt_value", prompt_policy.value_net, opt.prompt_value, cfg.lr_prompt),
        ):
            g = clip_grad_norm(grads[name], cfg.max_grad_norm)
            adam_step(net.params, g, state, lr)
    return last


def train_policies(
    struct_policy: StructurePolicy,
    prompt_policy: PromptPolicy,
    table: MaskTable,
    env: SyntheticEnv,
    cfg: PPOConfig,
    reward_cfg: RewardConfig,
    run_seed: int,
    objective: str = "ppo",
    on_batch: Optional[Callable[[int, dict], None]] = None,
):
    """RL phase of the training pipeline: collect a batch, normalize
    advantages, run clipped-surrogate epochs; repeat until total_episodes.

    Returns (buffer, diagnostics list)."""
    if cfg.total_episodes <= 0:
        raise ContractError("total_episodes must be positive")
    if objective not in ("ppo", "grpo"):
        raise ContractError(f"unknown objective: {objective}")
    opt = OptimizerSet.create(struct_policy, prompt_policy)
    buffer = ExperienceBuffer()
    diagnostics = []
    episode = 0
    batch_idx = 0
    while episode < cfg.total_episodes:
        n = min(cfg.batch_size, cfg.total_episodes - episode)
        rollouts = collect_rollouts(
            struct_policy, prompt_policy, table, env, n, reward_cfg, run_seed, episode
        )
        episode += n
        buffer.extend(r.record for r in rollouts)
        if objective == "grpo":
            advs = grpo_advantages([r.record.reward for r in rollouts])
            for r, a in zip(rollouts, advs):
                r.struct_adv = float(a)
                k = len(r.prompt_steps)
                r.step_targets = [cfg.gamma ** (k - 1 - j) * r.record.reward for j in range(k)]
                r.step_advs = [float(a)] * k
            diag = ppo_update(
                struct_policy, prompt_policy, table, rollouts, cfg, opt,
                use_value_loss=False,
            )
        else:
            compute_advantages(rollouts, struct_policy, prompt_policy, cfg.gamma)
            diag = ppo_update(struct_policy, prompt_policy, table, rollouts, cfg, opt)
        diag = dict(diag or {}, batch=batch_idx, episodes=episode)
        diagnostics.append(diag)
        if on_batch:
            on_batch(batch_idx, diag)
        batch_idx += 1
    return buffer, diagnostics


def grpo_to_ppo_config(cfg: GRPOConfig) -> PPOConfig:
    """GRPO runs through the same clipped-surrogate machinery with
    group-relative advantages and no learned baseline."""
    return PPOConfig(
        lr_struct=cfg.lr,
        lr_prompt=cfg.lr,
        batch_size=cfg.batch_size,
        clip_eps=cfg.clip_eps,
        gamma=cfg.gamma,
        entropy_coef=cfg.entropy_coef,
        value_coef=0.0,
        max_grad_norm=0.5,
        epochs_per_batch=cfg.epochs_per_batch,
        total_episodes=cfg.total_episodes,
    )


# ---------------------------------------------------------------------------
# Elite filtering and SFT
# ---------------------------------------------------------------------------


def action_key(structure: StructureAction, prompts) -> tuple:
    return (index_structure_action(structure), tuple(tuple(p) for p in prompts))


@dataclass
class EliteSet:
    """Correct, above-threshold episodes plus their empirical distribution
    over quantized state keys."""

    records: list[EpisodeRecord]
    tau_eff: float
    state_counts: dict
    action_counts: dict          # (state_key, action_key) -> count
    state_examples: dict         # state_key -> StateEmbedding
    action_examples: dict        # (state_key, action_key) -> EpisodeRecord

    def __len__(self):
        return len(self.records)

    def p_hat(self, state_key) -> dict:
        n_s = self.state_counts[state_key]
        return {
            a_key: count / n_s
            for (s_key, a_key), count in self.action_counts.items()
            if s_key == state_key
        }

    def elite_actions(self, state_key) -> set:
        return {a for (s, a) in self.action_counts if s == state_key}

    def rewards_for(self, state_key, a_key) -> list[float]:
        return [
            r.reward
            for r in self.records
            if r.state.key() == state_key
            and action_key(r.structure_action, r.prompt_actions) == a_key
        ]


def filter_elite(buffer: ExperienceBuffer, cfg: SFTConfig) -> EliteSet:
    """Keep records that are correct with reward >= tau_eff, where tau_eff
    reconciles the fixed threshold with the top-fraction quantile."""
    if len(buffer) == 0:
        raise ContractError("cannot filter an empty buffer")
    rewards = np.array([r.reward for r in buffer])
    quantile = float(np.quantile(rewards, 1.0 - cfg.elite_fraction, method="higher"))
    tau_eff = max(cfg.tau, quantile)
    records = [r for r in buffer if r.outcome.correct and r.reward >= tau_eff]
    if not records:
        raise EmptyEliteError(
            f"no correct episodes with reward >= {tau_eff:.4f} among {len(buffer)}"
        )
    state_counts: dict = {}
    action_counts: dict = {}
    state_examples: dict = {}
    action_examples: dict = {}
    for r in records:
        s_key = r.state.key()
        a_key = action_key(r.structure_action, r.prompt_actions)
        state_counts[s_key] = state_counts.get(s_key, 0) + 1
        action_counts[(s_key, a_key)] = action_counts.get((s_key, a_key), 0) + 1
        state_examples.setdefault(s_key, r.state)
        action_examples.setdefault((s_key, a_key), r)
    return EliteSet(records, tau_eff, state_counts, action_counts,
                    state_examples, action_examples)


def sft_loss_and_grads(
    struct_policy: StructurePolicy,
    prompt_policy: PromptPolicy,
    table: MaskTable,
    records: Sequence[EpisodeRecord],
    entropy_reg: float = 0.0,
):
    """Mean negative log-likelihood of the elite demonstrations (structure
    action and every prompt step), minus entropy_reg times the mean policy
    entropy at the visited decisions."""
    n = len(records)
    grads = {
        "struct_trunk": struct_policy.trunk.zero_grads(),
        "prompt_net": prompt_policy.net.zero_grads(),
    }
    loss = 0.0
    for r in records:
        s_vec = r.state.as_vector()
        a = r.structure_action
        dists = struct_policy.distributions(s_vec, table, a.workflow_id)
        choices = (a.workflow_id, a.tools1, a.tools2, *a.budgets)
        dlogits = np.zeros(sum(HEAD_SIZES))
        for head, (d, c) in enumerate(zip(dists, choices)):
            loss += (-log_prob(d, c) - entropy_reg * entropy(d)) / n
            g = (-1.0 / n) * log_prob_grad_logits(d, c)
            g += (-entropy_reg / n) * entropy_grad_logits(d)
            dlogits[head_slice(head)] = g
        g_trunk, _ = struct_policy.trunk.backward(s_vec, dlogits)
        for acc, g in zip(grads["struct_trunk"], g_trunk):
            acc += g

        chosen_per_agent = r.prompt_actions
        from .core import ROLES  # local import to avoid a cycle at module load

        for agent, seq in enumerate(chosen_per_agent):
            role = ROLES[agent]
            chosen: list[int] = []
            for atom in list(seq) + [prompt_policy.stop_index]:
                x = prompt_policy.step_input(s_vec, a.workflow_id, chosen)
                mask = prompt_policy.step_mask(role, chosen, len(chosen))
                dist = MaskedCategorical(prompt_policy.net.forward(x), mask)
                loss += (-log_prob(dist, atom) - entropy_reg * entropy(dist)) / n
                g = (-1.0 / n) * log_prob_grad_logits(dist, atom)
                g += (-entropy_reg / n) * entropy_grad_logits(dist)
                g_net, _ = prompt_policy.net.backward(x, g)
                for acc, gg in zip(grads["prompt_net"], g_net):
                    acc += gg
                if atom != prompt_policy.stop_index:
                    chosen.append(atom)
    return loss, grads


def sft_update(
    struct_policy: StructurePolicy,
    prompt_policy: PromptPolicy,
    table: MaskTable,
    elite: EliteSet,
    cfg: SFTConfig,
):
    """Maximum-likelihood refinement on the elite set; raises on an empty
    elite without touching the policies."""
    if len(elite) == 0:
        raise EmptyEliteError("sft_update requires a non-empty elite set")
    opt_struct = AdamState.for_params(struct_policy.trunk.params)
    opt_prompt = AdamState.for_params(prompt_policy.net.params)
    losses = []
    for _ in range(cfg.epochs):
        loss, grads = sft_loss_and_grads(
            struct_policy, prompt_policy, table, elite.records, cfg.entropy_reg
        )
        if not math.isfinite(loss):
            raise TrainingDivergenceError("non-finite SFT loss")
        adam_step(struct_policy.trunk.params, grads["struct_trunk"], opt_struct, cfg.lr_struct)
        adam_step(prompt_policy.net.params, grads["prompt_net"], opt_prompt, cfg.lr_prompt)
        losses.append(loss)
    return losses


# ---------------------------------------------------------------------------
# DPO
# ---------------------------------------------------------------------------


def _config_log_prob(struct_policy, prompt_policy, table, record: EpisodeRecord) -> float:
    from .policy import log_prob_prompts

    return log_prob_structure(
        struct_policy, table, record.state, record.structure_action
    ) + log_prob_prompts(
        prompt_policy, record.state, record.structure_action, record.prompt_actions
    )


def _dpo_pairs(buffer: ExperienceBuffer, cfg: DPOConfig):
    positives = [
        r for r in buffer if r.outcome.correct and r.reward >= cfg.positive_reward
    ]
    negatives = [r for r in buffer if r.reward <= cfg.negative_reward]
    if not positives or not negatives:
        raise NoPairsError(
            f"need positives and negatives: {len(positives)} / {len(negatives)}"
        )
    neg_vectors = np.stack([r.state.as_vector() for r in negatives])
    pairs = []
    for pos in positives:
        d = np.linalg.norm(neg_vectors - pos.state.as_vector(), axis=1)
        pairs.append((pos, negatives[int(np.argmin(d))]))
    return pairs


def dpo_update(
    struct_policy: StructurePolicy,
    prompt_policy: PromptPolicy,
    table: MaskTable,
    buffer: ExperienceBuffer,
    cfg: DPOConfig,
):
    """Preference refinement against a frozen pre-update reference snapshot.
    Positives pair with their nearest-state negative, one pair per positive."""
    pairs = _dpo_pairs(buffer, cfg)
    ref_struct = copy.deepcopy(struct_policy)
    ref_prompt = copy.deepcopy(prompt_policy)
    ref_lps = [
        (
            _config_log_prob(ref_struct, ref_prompt, table, pos),
            _config_log_prob(ref_struct, ref_prompt, table, neg),
        )
        for pos, neg in pairs
    ]
    opt_struct = AdamState.for_params(struct_policy.trunk.params)
    opt_prompt = AdamState.for_params(prompt_policy.net.params)
    losses = []
    for _ in range(cfg.epochs):
        loss, grads = dpo_loss_and_grads(
            struct_policy, prompt_policy, table, pairs, ref_lps, cfg
        )
        if not math.isfinite(loss):
            raise TrainingDivergenceError("non-finite DPO loss")
        g1 = clip_grad_norm(grads["struct_trunk"], cfg.max_grad_norm)
        g2 = clip_grad_norm(grads["prompt_net"], cfg.max_grad_norm)
        adam_step(struct_policy.trunk.params, g1, opt_struct, cfg.lr_struct)
        adam_step(prompt_policy.net.params, g2, opt_prompt, cfg.lr_prompt)
        losses.append(loss)
    return losses


def dpo_loss_and_grads(struct_policy, prompt_policy, table, pairs, ref_lps, cfg: DPOConfig):
    """loss = -log sigmoid(beta * [(l(a+) - l_ref(a+)) - (l(a-) - l_ref(a-))])
    averaged over pairs."""
    n = len(pairs)
    grads = {
        "struct_trunk": struct_policy.trunk.zero_grads(),
        "prompt_net": prompt_policy.net.zero_grads(),
    }
    loss = 0.0
    for (pos, neg), (ref_pos, ref_neg) in zip(pairs, ref_lps):
        lp_pos = _config_log_prob(struct_policy, prompt_policy, table, pos)
        lp_neg = _config_log_prob(struct_policy, prompt_policy, table, neg)
        margin = cfg.beta * ((lp_pos - ref_pos) - (lp_neg - ref_neg))
        loss += -_log_sigmoid(margin) / n
        # d loss / d lp_pos = -beta * sigmoid(-margin); flipped sign for lp_neg
        coeff = -cfg.beta * _sigmoid(-margin) / n
        for record, sign in ((pos, 1.0), (neg, -1.0)):
            _accumulate_config_logp_grads(
                struct_policy, prompt_policy, table, record, sign * coeff, grads
            )
    return loss, grads


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def _log_sigmoid(x: float) -> float:
    return -math.log1p(math.exp(-x)) if x >= 0 else x - math.log1p(math.exp(x))


def _accumulate_config_logp_grads(
    struct_policy, prompt_policy, table, record: EpisodeRecord, coeff: float, grads
):
    """Add coeff * d(log pi(config|s))/d(params) into the accumulators."""
    from .core import ROLES

    s_vec = record.state.as_vector()
    a = record.structure_action
    dists = struct_policy.distributions(s_vec, table, a.workflow_id)
    choices = (a.workflow_id, a.tools1, a.tools2, *a.budgets)
    dlogits = np.zeros(sum(HEAD_SIZES))
    for head, (d, c) in enumerate(zip(dists, choices)):
        dlogits[head_slice(head)] = coeff * log_prob_grad_logits(d, c)
    g_trunk, _ = struct_policy.trunk.backward(s_vec, dlogits)
    for acc, g in zip(grads["struct_trunk"], g_trunk):
        acc += g
    for agent, seq in enumerate(record.prompt_actions):
        role = ROLES[agent]
        chosen: list[int] = []
        for atom in list(seq) + [prompt_policy.stop_index]:
            x = prompt_policy.step_input(s_vec, a.workflow_id, chosen)
            mask = prompt_policy.step_mask(role, chosen, len(chosen))
            dist = MaskedCategorical(prompt_policy.net.forward(x), mask)
            g_net, _ = prompt_policy.net.backward(
                x, coeff * log_prob_grad_logits(dist, atom)
            )
            for acc, gg in zip(grads["prompt_net"], g_net):
                acc += gg
            if atom != prompt_policy.stop_index:
                chosen.append(atom)


# ---------------------------------------------------------------------------
# Theorem verification (support restriction / reward floor / KL)
# ---------------------------------------------------------------------------


def _sample_config_key(struct_policy, prompt_policy, table, state, rng):
    action, _, _ = sample_structure(struct_policy, table, state, rng)
    prompts, _ = sample_prompts(prompt_policy, state, action, rng)
    return action_key(action, prompts)


def verify_support_restriction(
    struct_policy: StructurePolicy,
    prompt_policy: PromptPolicy,
    table: MaskTable,
    elite: EliteSet,
    n_samples: int,
    rng: np.random.Generator,
):
    """Draw n_samples configurations per elite state; pass iff every sample
    lies in that state's elite action set. Returns (passed, violations)."""
    violations = []
    for s_key, state in elite.state_examples.items():
        allowed = elite.elite_actions(s_key)
        for _ in range(n_samples):
            a_key = _sample_config_key(struct_policy, prompt_policy, table, state, rng)
            if a_key not in allowed:
                violations.append((s_key, a_key))
    return len(violations) == 0, violations


def verify_reward_floor(
    struct_policy: StructurePolicy,
    prompt_policy: PromptPolicy,
    table: MaskTable,
    elite: EliteSet,
    n_samples: int,
    rng: np.random.Generator,
):
    """Estimate E[replayed elite reward] under the refined policy; pass iff
    the estimate is >= tau_eff - 1e-9 and no sampled action falls outside the
    recorded support. Returns (estimate, passed, n_support_violations)."""
    reward_lookup = {
        key: float(np.mean(elite.rewards_for(*key))) for key in elite.action_counts
    }
    total_weight = sum(elite.state_counts.values())
    estimate = 0.0
    n_violations = 0
    for s_key, state in elite.state_examples.items():
        weight = elite.state_counts[s_key] / total_weight
        acc = 0.0
        for _ in range(n_samples):
            a_key = _sample_config_key(struct_policy, prompt_policy, table, state, rng)
            if (s_key, a_key) in reward_lookup:
                acc += reward_lookup[(s_key, a_key)]
            else:
                n_violations += 1
        estimate += weight * acc / n_samples
    passed = n_violations == 0 and estimate >= elite.tau_eff - 1e-9
    return estimate, passed, n_violations


def kl_to_empirical(
    struct_policy: StructurePolicy,
    prompt_policy: PromptPolicy,
    table: MaskTable,
    elite: EliteSet,
) -> float:
    """State-frequency-weighted KL(p_hat || pi) over elite actions; policy
    probabilities floored at 1e-12 so the report stays finite."""
    total = sum(elite.state_counts.values())
    kl = 0.0
    for s_key, state in elite.state_examples.items():
        weight = elite.state_counts[s_key] / total
        for a_key, p in elite.p_hat(s_key).items():
            record = elite.action_examples[(s_key, a_key)]
            lp = _config_log_prob(struct_policy, prompt_policy, table, record)
            pi = max(math.exp(lp), 1e-12)
            kl += weight * p * math.log(p / pi)
    return kl
