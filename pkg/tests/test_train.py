"""Training machinery: advantages, clipped surrogate, elite SFT, DPO, and the
executable concentration checks."""

import math

import numpy as np
import pytest

from agentcfg.core import (
    Configuration,
    EpisodeRecord,
    ExecutionOutcome,
    ExperienceBuffer,
    StateEmbedding,
    StructureAction,
)
from agentcfg.env import QueryDistribution, build_env, compact_atom_library
from agentcfg.errors import ContractError, EmptyEliteError, NoPairsError
from agentcfg.policy import (
    PromptPolicy,
    StructurePolicy,
    default_mask_table,
    log_prob_structure,
)
from agentcfg.reward import RewardConfig
from agentcfg.train import (
    DPOConfig,
    OptimizerSet,
    PPOConfig,
    Rollout,
    SFTConfig,
    _config_log_prob,
    _surrogate_and_coeff,
    collect_episodes,
    collect_rollouts,
    compute_advantages,
    dpo_loss_and_grads,
    dpo_update,
    filter_elite,
    grpo_advantages,
    grpo_to_ppo_config,
    kl_to_empirical,
    ppo_loss_and_grads,
    ppo_update,
    sft_loss_and_grads,
    sft_update,
    train_policies,
    verify_reward_floor,
    verify_support_restriction,
)

LIB = compact_atom_library()
TABLE = default_mask_table()
REWARD = RewardConfig()
HIDDEN = (16,)


def small_env(seed=0, n=6):
    return build_env(QueryDistribution(), n, seed=seed, library=LIB, semantic_dim=8)


def make_policies(seed=0, state_dim=13):
    return (
        StructurePolicy(state_dim, hidden=HIDDEN, rng=np.random.default_rng([seed, 1])),
        PromptPolicy(state_dim, LIB, hidden=HIDDEN, rng=np.random.default_rng([seed, 2])),
    )


def zero_value_nets(struct_policy, prompt_policy):
    for net in (struct_policy.value_net, prompt_policy.value_net):
        for p in net.params:
            p[...] = 0.0


def make_record(reward, correct=True, seed=0, workflow=0, prompts=((),),
                tools1=0, budgets=(0, 0, 0), semantic=None):
    state = StateEmbedding(
        semantic=semantic if semantic is not None else np.full(8, float(seed)),
        features=np.zeros(5),
    )
    return EpisodeRecord(
        state=state,
        structure_action=StructureAction(workflow, tools1, 0, budgets),
        prompt_actions=prompts,
        outcome=ExecutionOutcome("x", correct, 1, 100, 0, 0),
        reward=reward,
        reward_breakdown=(reward, 0.0, 0.0, 0.0),
        seed=seed,
    )


class TestAdvantages:
    def test_worked_example(self):
        struct, prompt = make_policies(0)
        zero_value_nets(struct, prompt)
        rollouts = [
            Rollout(record=make_record(r), struct_log_prob=0.0, prompt_steps=[])
            for r in (1.0, 2.0, 3.0)
        ]
        compute_advantages(rollouts, struct, prompt, gamma=0.95)
        advs = [r.struct_adv for r in rollouts]
        expected = math.sqrt(1.5)  # (3-2)/std([1,2,3]) with population std
        assert advs == pytest.approx([-expected, 0.0, expected], abs=1e-4)
        assert advs[2] == pytest.approx(1.2247, abs=1e-3)

    def test_all_equal_rewards_give_zero(self):
        struct, prompt = make_policies(1)
        zero_value_nets(struct, prompt)
        rollouts = [
            Rollout(record=make_record(2.0, seed=i), struct_log_prob=0.0, prompt_steps=[])
            for i in range(4)
        ]
        compute_advantages(rollouts, struct, prompt, gamma=0.95)
        assert all(r.struct_adv == pytest.approx(0.0) for r in rollouts)

    def test_ranking_preserved(self):
        struct, prompt = make_policies(2)
        zero_value_nets(struct, prompt)
        rewards = [0.3, 4.1, 2.2, 5.0, 1.7]
        rollouts = [
            Rollout(record=make_record(r), struct_log_prob=0.0, prompt_steps=[])
            for r in rewards
        ]
        compute_advantages(rollouts, struct, prompt, gamma=0.95)
        order = np.argsort(rewards)
        advs = np.array([r.struct_adv for r in rollouts])
        assert np.all(np.diff(advs[order]) > 0)

    def test_empty_batch_rejected(self):
        struct, prompt = make_policies(3)
        with pytest.raises(ContractError):
            compute_advantages([], struct, prompt, gamma=0.95)

    def test_step_targets_discounted(self):
        struct, prompt = make_policies(4)
        env = small_env()
        rollouts = collect_rollouts(struct, prompt, TABLE, env, 8, REWARD, run_seed=9)
        compute_advantages(rollouts, struct, prompt, gamma=0.5)
        for r in rollouts:
            k = len(r.prompt_steps)
            for j, target in enumerate(r.step_targets):
                assert target == pytest.approx(0.5 ** (k - 1 - j) * r.record.reward)

    def test_grpo_examples(self):
        advs = grpo_advantages([1.0, 2.0, 3.0])
        assert advs == pytest.approx([-math.sqrt(1.5), 0.0, math.sqrt(1.5)], abs=1e-6)
        assert grpo_advantages([5.0]) == pytest.approx([0.0])
        assert grpo_advantages([2.0, 2.0]) == pytest.approx([0.0, 0.0])
        with pytest.raises(ContractError):
            grpo_advantages([])


class TestClippedSurrogate:
    def test_clip_example(self):
        surr, coeff = _surrogate_and_coeff(ratio=2.0, adv=1.0, clip_eps=0.2)
        assert surr == pytest.approx(1.2)
        assert coeff == 0.0  # clipped branch: no gradient

    def test_ratio_one(self):
        surr, coeff = _surrogate_and_coeff(ratio=1.0, adv=0.7, clip_eps=0.2)
        assert surr == pytest.approx(0.7)
        assert coeff == pytest.approx(0.7)

    def test_negative_advantage_pessimism(self):
        surr, coeff = _surrogate_and_coeff(ratio=0.5, adv=-1.0, clip_eps=0.2)
        assert surr == pytest.approx(-0.8)  # min(-0.5, -0.8)
        assert coeff == 0.0


class TestPPOGradients:
    def test_full_loss_finite_differences(self):
        struct, prompt = make_policies(5)
        env = small_env(1)
        cfg = PPOConfig(batch_size=4, total_episodes=4)
        rollouts = collect_rollouts(struct, prompt, TABLE, env, 4, REWARD, run_seed=2)
        compute_advantages(rollouts, struct, prompt, cfg.gamma)

        def loss_fn():
            loss, _, _ = ppo_loss_and_grads(struct, prompt, TABLE, rollouts, cfg)
            return loss

        _, grads, _ = ppo_loss_and_grads(struct, prompt, TABLE, rollouts, cfg)
        rng = np.random.default_rng(3)
        nets = {
            "struct_trunk": struct.trunk,
            "struct_value": struct.value_net,
            "prompt_net": prompt.net,
            "prompt_value": prompt.value_net,
        }
        h = 1e-5
        for name, net in nets.items():
            flat_g = np.concatenate([g.ravel() for g in grads[name]])
            flat0 = net.get_flat()
            idx = rng.choice(net.n_params, size=min(25, net.n_params), replace=False)
            for i in idx:
                for sign in (+1, -1):
                    flat = flat0.copy()
                    flat[i] += sign * h
                    net.set_flat(flat)
                    if sign > 0:
                        hi = loss_fn()
                    else:
                        lo = loss_fn()
                net.set_flat(flat0)
                fd = (hi - lo) / (2 * h)
                err = abs(fd - flat_g[i])
                denom = max(abs(fd), abs(flat_g[i]), 1e-7)
                assert err < 1e-9 or err / denom < 1e-3, (name, i)

    def test_update_moves_toward_high_advantage(self):
        struct, prompt = make_policies(6)
        env = small_env(2)
        cfg = PPOConfig(batch_size=8, total_episodes=8, lr_struct=1e-2, lr_prompt=1e-2)
        rollouts = collect_rollouts(struct, prompt, TABLE, env, 8, REWARD, run_seed=5)
        compute_advantages(rollouts, struct, prompt, cfg.gamma)
        best = max(rollouts, key=lambda r: r.struct_adv)
        lp_before = log_prob_structure(struct, TABLE, best.state, best.record.structure_action)
        opt = OptimizerSet.create(struct, prompt)
        diag = ppo_update(struct, prompt, TABLE, rollouts, cfg, opt)
        lp_after = log_prob_structure(struct, TABLE, best.state, best.record.structure_action)
        assert lp_after > lp_before
        assert set(diag) >= {"loss", "clip_fraction", "mean_entropy",
                             "value_loss", "mean_reward"}

    def test_grpo_config_mapping(self):
        from agentcfg.train import GRPOConfig

        ppo = grpo_to_ppo_config(GRPOConfig())
        assert ppo.value_coef == 0.0
        assert ppo.lr_struct == ppo.lr_prompt == 3e-4
        assert ppo.batch_size == 64 and ppo.gamma == 0.99


class TestCollection:
    def test_deterministic_bit_identical(self):
        for builder in (lambda: make_policies(7), lambda: make_policies(7)):
            pass
        s1, p1 = make_policies(7)
        s2, p2 = make_policies(7)
        env = small_env(3)
        b1 = collect_episodes(s1, p1, TABLE, env, 40, REWARD, run_seed=11)
        b2 = collect_episodes(s2, p2, TABLE, env, 40, REWARD, run_seed=11)
        assert [r.to_json_dict() for r in b1] == [r.to_json_dict() for r in b2]

    def test_different_seed_differs(self):
        s, p = make_policies(8)
        env = small_env(4)
        b1 = collect_episodes(s, p, TABLE, env, 20, REWARD, run_seed=1)
        b2 = collect_episodes(s, p, TABLE, env, 20, REWARD, run_seed=2)
        assert [r.to_json_dict() for r in b1] != [r.to_json_dict() for r in b2]

    def test_zero_episodes_empty(self):
        s, p = make_policies(9)
        assert len(collect_episodes(s, p, TABLE, small_env(), 0, REWARD, 0)) == 0

    def test_all_rollouts_respect_masks(self):
        s, p = make_policies(10)
        env = small_env(5)
        rollouts = collect_rollouts(s, p, TABLE, env, 1000, REWARD, run_seed=13)
        for r in rollouts:
            a = r.record.structure_action
            assert TABLE.is_valid(a)
            assert len(r.record.prompt_actions) == a.workflow.agents_active
            assert all(len(seq) <= 4 for seq in r.record.prompt_actions)


class TestEliteFiltering:
    def test_worked_example(self):
        buf = ExperienceBuffer()
        for reward, correct in ((5.0, True), (4.5, True), (4.2, False), (1.0, True)):
            buf.append(make_record(reward, correct=correct, seed=int(reward * 10)))
        elite = filter_elite(buf, SFTConfig(elite_fraction=1.0))
        assert elite.tau_eff == pytest.approx(4.0)
        assert sorted(r.reward for r in elite.records) == [4.5, 5.0]

    def test_quantile_tightens_threshold(self):
        buf = ExperienceBuffer()
        for reward, correct in ((5.0, True), (4.5, True), (4.2, False), (1.0, True)):
            buf.append(make_record(reward, correct=correct, seed=int(reward * 10)))
        elite = filter_elite(buf, SFTConfig(elite_fraction=0.25))
        assert elite.tau_eff == pytest.approx(5.0)
        assert [r.reward for r in elite.records] == [5.0]

    def test_fraction_bounds_elite_size(self):
        buf = ExperienceBuffer()
        rng = np.random.default_rng(0)
        for i in range(100):
            buf.append(make_record(float(rng.uniform(4.1, 6.0)), seed=i))
        elite = filter_elite(buf, SFTConfig(tau=0.0, elite_fraction=0.30))
        assert len(elite) <= 30

    def test_empty_elite_raises(self):
        buf = ExperienceBuffer()
        buf.append(make_record(5.0, correct=False))
        with pytest.raises(EmptyEliteError):
            filter_elite(buf, SFTConfig())
        with pytest.raises(ContractError):
            filter_elite(ExperienceBuffer(), SFTConfig())

    def test_counts_and_p_hat(self):
        buf = ExperienceBuffer()
        for _ in range(3):
            buf.append(make_record(5.0, workflow=0, prompts=((0,),)))
        buf.append(make_record(5.0, workflow=1, prompts=((0,), ())))
        elite = filter_elite(buf, SFTConfig(elite_fraction=1.0))
        (s_key,) = elite.state_counts
        p_hat = elite.p_hat(s_key)
        assert sorted(p_hat.values()) == pytest.approx([0.25, 0.75])
        assert len(elite.elite_actions(s_key)) == 2


def _converge_sft(records, seed=11, epochs=400, lr=0.05):
    struct, prompt = make_policies(seed)
    buf = ExperienceBuffer()
    for r in records:
        buf.append(r)
    elite = filter_elite(buf, SFTConfig(elite_fraction=1.0, tau=0.0))
    cfg = SFTConfig(lr_struct=lr, lr_prompt=lr, entropy_reg=0.0, epochs=epochs,
                    tau=0.0, elite_fraction=1.0)
    losses = sft_update(struct, prompt, TABLE, elite, cfg)
    return struct, prompt, elite, losses


class TestSFT:
    def test_gradient_finite_differences(self):
        struct, prompt = make_policies(12)
        records = [
            make_record(5.0, workflow=2, prompts=((0,), (2,), (3,)), seed=1),
            make_record(4.5, workflow=0, prompts=((1,),), seed=2),
        ]
        _, grads = sft_loss_and_grads(struct, prompt, TABLE, records, entropy_reg=0.01)
        rng = np.random.default_rng(1)
        h = 1e-5
        for name, net in (("struct_trunk", struct.trunk), ("prompt_net", prompt.net)):
            flat_g = np.concatenate([g.ravel() for g in grads[name]])
            flat0 = net.get_flat()
            idx = rng.choice(net.n_params, size=25, replace=False)
            for i in idx:
                vals = {}
                for sign in (+1, -1):
                    flat = flat0.copy()
                    flat[i] += sign * h
                    net.set_flat(flat)
                    vals[sign], _ = sft_loss_and_grads(
                        struct, prompt, TABLE, records, entropy_reg=0.01
                    )
                net.set_flat(flat0)
                fd = (vals[1] - vals[-1]) / (2 * h)
                denom = max(abs(fd), abs(flat_g[i]), 1e-7)
                assert abs(fd - flat_g[i]) / denom < 1e-3, (name, i)

    def test_losses_decrease(self):
        records = [make_record(5.0, workflow=0, prompts=((0,),))]
        _, _, _, losses = _converge_sft(records, epochs=50, lr=0.01)
        assert losses[-1] < losses[0]

    def test_point_mass_concentration(self):
        record = make_record(5.0, workflow=0, prompts=((0,),))
        struct, prompt, _, _ = _converge_sft([record], epochs=600, lr=0.05)
        p = math.exp(_config_log_prob(struct, prompt, TABLE, record))
        assert p >= 0.99

    def test_fifty_fifty_split(self):
        a = make_record(5.0, workflow=0, prompts=((),), budgets=(0, 0, 0))
        b = make_record(5.0, workflow=0, prompts=((),), budgets=(2, 0, 0))
        struct, prompt, _, _ = _converge_sft([a, b], epochs=600, lr=0.05)
        p_a = math.exp(_config_log_prob(struct, prompt, TABLE, a))
        p_b = math.exp(_config_log_prob(struct, prompt, TABLE, b))
        assert abs(p_a - 0.5) <= 0.05 and abs(p_b - 0.5) <= 0.05

    def test_empty_elite_rejected(self):
        struct, prompt = make_policies(13)
        from agentcfg.train import EliteSet

        empty = EliteSet([], 4.0, {}, {}, {}, {})
        with pytest.raises(EmptyEliteError):
            sft_update(struct, prompt, TABLE, empty, SFTConfig())


class TestVerification:
    def test_converged_policy_passes(self):
        record = make_record(5.0, workflow=0, prompts=((0,),))
        struct, prompt, elite, _ = _converge_sft([record], epochs=800, lr=0.08)
        rng = np.random.default_rng(0)
        passed, violations = verify_support_restriction(
            struct, prompt, TABLE, elite, n_samples=300, rng=rng
        )
        assert passed and not violations
        estimate, floor_ok, n_bad = verify_reward_floor(
            struct, prompt, TABLE, elite, n_samples=300, rng=rng
        )
        assert floor_ok and n_bad == 0
        assert estimate == pytest.approx(5.0)
        assert kl_to_empirical(struct, prompt, TABLE, elite) < 1e-2

    def test_random_policy_fails(self):
        record = make_record(5.0, workflow=0, prompts=((0,),))
        buf = ExperienceBuffer()
        buf.append(record)
        elite = filter_elite(buf, SFTConfig(elite_fraction=1.0, tau=0.0))
        struct, prompt = make_policies(14)
        rng = np.random.default_rng(1)
        passed, violations = verify_support_restriction(
            struct, prompt, TABLE, elite, n_samples=200, rng=rng
        )
        assert not passed and violations
        assert kl_to_empirical(struct, prompt, TABLE, elite) > 1.0

    def test_kl_decreases_under_sft(self):
        record = make_record(5.0, workflow=0, prompts=((0,),))
        buf = ExperienceBuffer()
        buf.append(record)
        elite = filter_elite(buf, SFTConfig(elite_fraction=1.0, tau=0.0))
        struct, prompt = make_policies(15)
        kls = [kl_to_empirical(struct, prompt, TABLE, elite)]
        cfg = SFTConfig(lr_struct=0.02, lr_prompt=0.02, entropy_reg=0.0,
                        epochs=50, tau=0.0, elite_fraction=1.0)
        for _ in range(4):
            sft_update(struct, prompt, TABLE, elite, cfg)
            kls.append(kl_to_empirical(struct, prompt, TABLE, elite))
        assert kls[-1] < kls[0]
        assert all(k >= -1e-9 for k in kls)


class TestDPO:
    def _pair_buffer(self):
        buf = ExperienceBuffer()
        buf.append(make_record(5.0, correct=True, workflow=0, prompts=((0,),), seed=1))
        buf.append(make_record(1.0, correct=False, workflow=1,
                               prompts=((), ()), seed=1))
        return buf

    def test_identical_policy_loss_is_ln2(self):
        struct, prompt = make_policies(16)
        from agentcfg.train import _dpo_pairs

        cfg = DPOConfig()
        pairs = _dpo_pairs(self._pair_buffer(), cfg)
        ref_lps = [
            (
                _config_log_prob(struct, prompt, TABLE, pos),
                _config_log_prob(struct, prompt, TABLE, neg),
            )
            for pos, neg in pairs
        ]
        loss, _ = dpo_loss_and_grads(struct, prompt, TABLE, pairs, ref_lps, cfg)
        assert loss == pytest.approx(math.log(2.0), abs=1e-12)

    def test_update_widens_margin(self):
        struct, prompt = make_policies(17)
        buf = self._pair_buffer()
        pos, neg = buf[0], buf[1]
        before = (
            _config_log_prob(struct, prompt, TABLE, pos)
            - _config_log_prob(struct, prompt, TABLE, neg)
        )
        losses = dpo_update(struct, prompt, TABLE, buf,
                            DPOConfig(lr_struct=1e-2, lr_prompt=1e-2, epochs=10))
        after = (
            _config_log_prob(struct, prompt, TABLE, pos)
            - _config_log_prob(struct, prompt, TABLE, neg)
        )
        assert after > before
        assert losses[-1] < losses[0] < math.log(2.0) + 1e-9

    def test_missing_side_raises(self):
        struct, prompt = make_policies(18)
        buf = ExperienceBuffer()
        buf.append(make_record(5.0, correct=True))
        with pytest.raises(NoPairsError):
            dpo_update(struct, prompt, TABLE, buf, DPOConfig())


class TestTrainPolicies:
    def test_zero_episodes_rejected(self):
        struct, prompt = make_policies(19)
        with pytest.raises(ContractError):
            train_policies(struct, prompt, TABLE, small_env(), PPOConfig(total_episodes=0),
                           REWARD, 0)
        with pytest.raises(ContractError):
            train_policies(struct, prompt, TABLE, small_env(), PPOConfig(total_episodes=8),
                           REWARD, 0, objective="nope")

    def test_short_run_bookkeeping(self):
        struct, prompt = make_policies(20)
        cfg = PPOConfig(batch_size=8, total_episodes=24)
        buffer, diagnostics = train_policies(struct, prompt, TABLE, small_env(6),
                                             cfg, REWARD, run_seed=3)
        assert len(buffer) == 24
        assert len(diagnostics) == 3
        assert diagnostics[-1]["episodes"] == 24
        assert all(math.isfinite(d["loss"]) for d in diagnostics)

    def test_grpo_objective_runs(self):
        struct, prompt = make_policies(21)
        cfg = grpo_to_ppo_config(__import__("agentcfg.train", fromlist=["GRPOConfig"])
                                 .GRPOConfig(batch_size=8, total_episodes=16))
        buffer, diagnostics = train_policies(struct, prompt, TABLE, small_env(7),
                                             cfg, REWARD, run_seed=4, objective="grpo")
        assert len(buffer) == 16
        assert diagnostics[-1]["value_loss"] == 0.0

    def test_deterministic_final_parameters(self):
        results = []
        for _ in range(2):
            struct, prompt = make_policies(22)
            cfg = PPOConfig(batch_size=8, total_episodes=16)
            train_policies(struct, prompt, TABLE, small_env(8), cfg, REWARD, run_seed=5)
            results.append(np.concatenate([struct.trunk.get_flat(),
                                           prompt.net.get_flat()]))
        assert np.array_equal(results[0], results[1])
