"""SFT step, group advantages, KL estimator, clipped objective, RL loop."""

import math

import numpy as np
import pytest

from microvlm import autograd as ag
from microvlm.autograd import Tape, Tensor
from microvlm.model import Model, ModelConfig
from microvlm.reattention import ReattentionConfig
from microvlm.rewards import RewardConfig
from microvlm.scenes import SceneConfig, synthesize, visual_vocab_size
from microvlm.trainer import (
    Adam,
    GroupBatch,
    Rollout,
    TrainConfig,
    TrainingDiverged,
    brpo_loss,
    brpo_train,
    build_sft_example,
    group_advantages,
    kl_term,
    prepare_sft_examples,
    rollout_seed,
    sft_step,
)
from microvlm.vocab import default_vocab

VOCAB = default_vocab()


def tiny_model(dim=16, layers=2, heads=2, seed=0, max_positions=192):
    cfg = ModelConfig(
        vocab_size=len(VOCAB),
        visual_vocab_size=visual_vocab_size(4, 4),
        dim=dim,
        n_layers=layers,
        n_heads=heads,
        max_positions=max_positions,
    )
    return Model(cfg, seed=seed)


def make_rollout(logp_theta, logp_old, logp_ref, advantage, dtype=np.float64):
    reward = None
    return Rollout(
        question_index=0,
        tokens=[0] * len(logp_old),
        script=[],
        logp_old=np.asarray(logp_old, dtype=np.float64),
        reward=reward,
        n_r=0,
        l_r_total=0,
        advantage=advantage,
        logp_ref=np.asarray(logp_ref, dtype=np.float64),
        logp_theta=Tensor(np.asarray(logp_theta), dtype=dtype),
    )


class TestGroupAdvantages:
    def test_hand_case(self):
        np.testing.assert_allclose(group_advantages([1, 0, 1, 0]), [1, -1, 1, -1], atol=1e-12)

    def test_degenerate_all_equal(self):
        np.testing.assert_array_equal(group_advantages([2, 2, 2, 2]), np.zeros(4))

    def test_shift_invariance(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            r = rng.standard_normal(8)
            c = float(rng.uniform(-5, 5))
            np.testing.assert_allclose(group_advantages(r), group_advantages(r + c), atol=1e-9)

    def test_standardization_property(self):
        """Mean ~ 0 and population std ~ 1 on 10k random non-degenerate groups."""
        rng = np.random.default_rng(1)
        for _ in range(10_000):
            g = int(rng.integers(2, 12))
            r = rng.standard_normal(g)
            if r.std() < 1e-6:
                continue
            a = group_advantages(r)
            assert abs(a.mean()) < 1e-6
            assert abs(a.std() - 1.0) < 1e-6

    def test_group_too_small(self):
        with pytest.raises(ValueError):
            group_advantages([1.0])


class TestKlTerm:
    def test_identity_is_zero(self):
        lp = np.log(np.array([0.3, 0.5, 0.2]))
        np.testing.assert_allclose(kl_term(lp, lp), np.zeros(3), atol=1e-15)

    def test_rho_two_hand_value(self):
        # rho = 2 -> 2 - ln 2 - 1
        got = kl_term(np.array([0.0]), np.array([math.log(2.0)]))
        assert got[0] == pytest.approx(2 - math.log(2) - 1, abs=1e-9)

    def test_nonnegative_property(self):
        rng = np.random.default_rng(2)
        rhos = rng.uniform(0.01, 100, size=10_000)
        got = kl_term(np.zeros(10_000), np.log(rhos))
        assert np.all(got >= 0)
        assert got[np.argmin(np.abs(rhos - 1.0))] < 1e-3


class TestBrpoLoss:
    def test_ratio_one_zero_adv_reduces_to_kl(self):
        lp = np.log(np.array([0.2, 0.4, 0.1]))
        ref = lp + np.array([0.3, -0.2, 0.1])
        r1 = make_rollout(lp, lp, ref, 0.0)
        r2 = make_rollout(lp, lp, ref, 0.0)
        cfg = TrainConfig(group_size=2, kl_beta=0.1, steps=1)
        obj = brpo_loss(GroupBatch(0, [r1, r2]), cfg)
        expected = -0.1 * kl_term(lp, ref).mean()
        assert obj.item() == pytest.approx(expected, abs=1e-7)

    def test_clip_branch_hand_value(self):
        # single token, ratio 1.5, eps 0.2, A = +1 -> min(1.5, 1.2) = 1.2
        r1 = make_rollout([math.log(1.5)], [0.0], [math.log(1.5)], 1.0)
        r2 = make_rollout([0.0], [0.0], [0.0], 0.0)
        cfg = TrainConfig(group_size=2, kl_beta=0.0, clip_eps=0.2, steps=1)
        obj = brpo_loss(GroupBatch(0, [r1, r2]), cfg)
        assert obj.item() == pytest.approx(1.2 / 2, abs=1e-9)

    def test_advantage_sign_flip_negates_unclipped_surrogate(self):
        rng = np.random.default_rng(3)
        lp_old = rng.standard_normal(5) * 0.1 - 2
        lp_theta = lp_old + rng.uniform(-0.05, 0.05, size=5)  # ratios inside the clip window
        cfg = TrainConfig(group_size=2, kl_beta=0.0, clip_eps=0.2, steps=1)
        for a in (0.7, 1.3):
            up = brpo_loss(
                GroupBatch(0, [make_rollout(lp_theta, lp_old, lp_theta, a),
                               make_rollout(lp_theta, lp_old, lp_theta, a)]),
                cfg,
            ).item()
            dn = brpo_loss(
                GroupBatch(0, [make_rollout(lp_theta, lp_old, lp_theta, -a),
                               make_rollout(lp_theta, lp_old, lp_theta, -a)]),
                cfg,
            ).item()
            assert up == pytest.approx(-dn, abs=1e-9)

    def test_clip_branches_vs_brute_force(self):
        """Surrogate equals the literal min/clip formula on random triples."""
        rng = np.random.default_rng(4)
        for _ in range(400):
            ratio = float(rng.uniform(0.05, 3.0))
            adv = float(rng.uniform(-2, 2))
            eps = float(rng.uniform(0.05, 0.5))
            cfg = TrainConfig(group_size=2, kl_beta=0.0, clip_eps=eps, steps=1)
            r1 = make_rollout([math.log(ratio)], [0.0], [math.log(ratio)], adv)
            r2 = make_rollout([0.0], [0.0], [0.0], 0.0)
            got = 2 * brpo_loss(GroupBatch(0, [r1, r2]), cfg).item()
            brute = min(ratio * adv, float(np.clip(ratio, 1 - eps, 1 + eps)) * adv)
            assert got == pytest.approx(brute, abs=1e-7)

    def test_sequence_level_mode(self):
        lp_theta = np.array([math.log(1.2), math.log(1.1)])
        lp_old = np.zeros(2)
        adv = 1.0
        cfg = TrainConfig(group_size=2, kl_beta=0.0, clip_eps=0.2, ratio_mode="sequence_level", steps=1)
        r1 = make_rollout(lp_theta, lp_old, lp_theta, adv)
        r2 = make_rollout([0.0], [0.0], [0.0], 0.0)
        got = 2 * brpo_loss(GroupBatch(0, [r1, r2]), cfg).item()
        seq_ratio = 1.2 * 1.1
        assert got == pytest.approx(min(seq_ratio, 1.2) * adv, abs=1e-9)

    def test_surrogate_gradient_matches_policy_gradient_at_start(self):
        """At theta == old, grad(surrogate) == grad REINFORCE, checked by FD."""
        model = tiny_model(dim=8, layers=1, heads=2)
        for _, p in model.parameters():
            p.data = p.data.astype(np.float64)
        vis = [1, 2, 3]
        txt = VOCAB.encode(["how", "many", "red", "objects"])
        responses = [[40, 41, 42], [43, 44, 45]]
        advantages = [1.0, -0.5]
        cfg = TrainConfig(group_size=2, kl_beta=0.0, clip_eps=0.2, steps=1)

        logp_old = [model.score_response(vis, txt, r).data.copy() for r in responses]

        def build_group():
            rollouts = []
            for resp, old, adv in zip(responses, logp_old, advantages):
                lp = model.score_response(vis, txt, resp)
                rollouts.append(
                    Rollout(0, resp, [], old, None, 0, 0, advantage=adv,
                            logp_ref=old.copy(), logp_theta=lp)
                )
            return GroupBatch(0, rollouts)

        model.zero_grads()
        with Tape() as tape:
            obj = brpo_loss(build_group(), cfg)
        tape.backward(obj)
        grads = {n: p.grad.copy() for n, p in model.parameters() if p.grad is not None}

        def reinforce_value():
            total = 0.0
            for resp, adv in zip(responses, advantages):
                lp = model.score_response(vis, txt, resp).data
                total += adv * lp.mean()
            return total / len(responses)

        rng = np.random.default_rng(0)
        h = 1e-6
        for name in ("head.w", "l0.wq", "text_emb"):
            p = model.params[name]
            flat = p.data.reshape(-1)
            gflat = grads[name].reshape(-1)
            for idx in rng.choice(flat.size, size=3, replace=False):
                orig = flat[idx]
                flat[idx] = orig + h
                up = reinforce_value()
                flat[idx] = orig - h
                dn = reinforce_value()
                flat[idx] = orig
                fd = (up - dn) / (2 * h)
                assert fd == pytest.approx(gflat[idx], abs=2e-4, rel=2e-3)


class TestSft:
    def _records(self, n=4, seed=0):
        return [(qa, trace) for _, qa, trace in synthesize(n, seed=seed, config=SceneConfig(max_objects=2))]

    def test_prepare_skips_malformed(self):
        records = self._records(3)
        qa, trace = records[0]
        from microvlm.scenes import GoldTrace

        broken = GoldTrace(qa=qa, tokens=tuple(list(trace.tokens)[:-1]))  # drop close tag
        examples, skipped = prepare_sft_examples(records + [(qa, broken)], VOCAB)
        assert len(examples) == 3
        assert skipped == 1

    def test_mask_covers_exactly_response_predictions(self):
        records = self._records(1)
        qa, trace = records[0]
        ex = build_sft_example(qa, trace.tokens, VOCAB)
        assert int(ex.mask.sum()) == len(trace.tokens)
        assert not ex.mask[-1]  # the last row predicts nothing

    def test_vtc_augmentation_masks_injected(self):
        records = self._records(1)
        qa, trace = records[0]
        plain = build_sft_example(qa, trace.tokens, VOCAB)
        vtc = build_sft_example(qa, trace.tokens, VOCAB, reattention_mode="vtc")
        n_vis = len(qa.scene.visual_token_ids())
        assert len(vtc.ids) == len(plain.ids) + n_vis  # one reflection block
        assert int(vtc.mask.sum()) == int(plain.mask.sum())

    def test_loss_decreases_on_overfit_smoke(self):
        model = tiny_model(dim=16, layers=1, heads=2)
        examples, _ = prepare_sft_examples(self._records(2), VOCAB)
        opt = Adam(model, lr=3e-3)
        first = sft_step(model, examples, opt)
        last = first
        for _ in range(120):
            last = sft_step(model, examples, opt)
        assert last < first * 0.2, (first, last)

    def test_frozen_visual_table_untouched(self):
        model = tiny_model()
        model.set_visual_frozen(True)
        before = model.params["vis_emb"].data.copy()
        examples, _ = prepare_sft_examples(self._records(2), VOCAB)
        opt = Adam(model, lr=1e-3)
        sft_step(model, examples, opt)
        assert model.params["vis_emb"].grad is not None
        np.testing.assert_array_equal(model.params["vis_emb"].grad, np.zeros_like(before))
        np.testing.assert_array_equal(model.params["vis_emb"].data, before)

    def test_deterministic(self):
        losses = []
        for _ in range(2):
            model = tiny_model(seed=5)
            examples, _ = prepare_sft_examples(self._records(2, seed=1), VOCAB)
            opt = Adam(model, lr=1e-3)
            losses.append([sft_step(model, examples, opt) for _ in range(3)])
        assert losses[0] == losses[1]


class TestBrpoTrain:
    def _dataset(self, n=3):
        return [(qa, trace) for _, qa, trace in synthesize(n, seed=2, config=SceneConfig(max_objects=2))]

    def _cfg(self, **kw):
        base = dict(group_size=2, steps=2, max_new=10, lr=1e-3, seed=7)
        base.update(kw)
        return TrainConfig(**base)

    def test_telemetry_fields_and_determinism(self, tmp_path):
        def run(path):
            model = tiny_model(seed=11)
            return brpo_train(
                model, self._dataset(), self._cfg(),
                RewardConfig(), ReattentionConfig(mode="off"),
                telemetry_path=path,
            )

        t1 = run(tmp_path / "a.jsonl")
        t2 = run(tmp_path / "b.jsonl")
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
        for key in ("mean_reward", "acc_reward", "n_r_mean", "l_r_total_mean"):
            assert key in t1[0]
        assert t1 == t2

    def test_group_size_respected(self):
        model = tiny_model(seed=13)
        telem = brpo_train(model, self._dataset(), self._cfg(group_size=3, steps=1),
                           RewardConfig(), ReattentionConfig(mode="off"))
        assert len(telem) == 1

    def test_vtr_mode_runs_and_replays(self):
        model = tiny_model(seed=17)
        telem = brpo_train(model, self._dataset(), self._cfg(steps=1),
                           RewardConfig(), ReattentionConfig(mode="vtr", m=50.0))
        assert math.isfinite(telem[0]["objective"])

    def test_nan_aborts_with_diagnostics(self, tmp_path):
        model = tiny_model(seed=19)
        model.params["head.w"].data[0, 0] = np.nan
        path = tmp_path / "telemetry.jsonl"
        with np.errstate(all="ignore"):
            with pytest.raises(TrainingDiverged):
                brpo_train(model, self._dataset(), self._cfg(steps=2),
                           RewardConfig(), ReattentionConfig(mode="off"),
                           telemetry_path=path)
        assert (tmp_path / "telemetry.jsonl.diverged.json").exists()

    def test_checkpoint_written(self, tmp_path):
        model = tiny_model(seed=23)
        ckpt = tmp_path / "model.ckpt"
        brpo_train(model, self._dataset(), self._cfg(steps=1),
                   RewardConfig(), ReattentionConfig(mode="off"),
                   checkpoint_path=ckpt)
        loaded = Model.load(ckpt)
        np.testing.assert_array_equal(loaded.params["head.w"].data, model.params["head.w"].data)


def test_rollout_seed_stable():
    a = rollout_seed(1, 2, 3, 4)
    b = rollout_seed(1, 2, 3, 4)
    assert a == b
    assert rollout_seed(1, 2, 3, 5) != a
    # Pinned value: the derivation must stay stable across releases.
    assert a == int.from_bytes(
        __import__("hashlib").sha256(b"1:2:3:4").digest()[:8], "little"
    )
