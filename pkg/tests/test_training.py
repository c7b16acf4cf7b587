"""Batch sampling, the combined loss, SGD semantics, the training loop."""

import math

import numpy as np
import pytest

from helpers import tiny_config, tiny_model, toy_batch
from normaug import datagen, normbank as nb, tensor as T, training
from normaug.gradcheck import grad_check_params
from normaug.model import init_model
from normaug.normbank import DomainSubset, Partition
from normaug.tensor import Tensor
from normaug.training import (
    DomainBatch,
    EpochSampler,
    SGD,
    TrainConfig,
    make_optimizer,
    sample_batch,
    sample_combination,
    train,
    train_step,
    two_path_loss,
)


def small_dataset(seed=0, per_cell=24, kappa=1.0):
    ds, _ = datagen.generate(num_classes=3, num_domains=4, per_cell=per_cell,
                             feature_dim=6, shift_kappa=kappa, seed=seed)
    return ds


class TestDomainBatch:
    def test_invariants_enforced(self):
        feats = np.zeros((6, 4))
        labels = np.zeros(6, dtype=np.int64)
        ids = np.repeat([0, 1, 2], 2)
        DomainBatch(feats, labels, ids, per_domain=2)
        with pytest.raises(ValueError):
            DomainBatch(feats, labels, np.array([0, 0, 0, 1, 1, 2]), per_domain=2)
        with pytest.raises(ValueError):
            DomainBatch(feats, labels, ids, per_domain=1)


class TestSampleBatch:
    def test_counts_and_balance(self):
        ds = small_dataset()
        sources, _ = datagen.split_lodo(ds, 3)
        batch = sample_batch(sources, 16, np.random.default_rng(0))
        assert batch.size == 48
        ids, counts = np.unique(batch.domain_ids, return_counts=True)
        assert np.array_equal(ids, [0, 1, 2])
        assert np.all(counts == 16)

    def test_seeded_determinism(self):
        ds = small_dataset()
        sources, _ = datagen.split_lodo(ds, 3)
        a = sample_batch(sources, 8, np.random.default_rng(42))
        b = sample_batch(sources, 8, np.random.default_rng(42))
        assert np.array_equal(a.features, b.features)
        assert np.array_equal(a.labels, b.labels)

    def test_no_duplicates_within_domain(self):
        ds = small_dataset()
        sources, _ = datagen.split_lodo(ds, 3)
        batch = sample_batch(sources, 16, np.random.default_rng(1))
        for d in range(3):
            rows = batch.features[batch.domain_ids == d]
            assert np.unique(rows, axis=0).shape[0] == 16

    def test_small_domain_rejected(self):
        ds = small_dataset(per_cell=4)  # 12 rows per domain
        sources, _ = datagen.split_lodo(ds, 3)
        with pytest.raises(ValueError, match="rows < 16"):
            sample_batch(sources, 16, np.random.default_rng(0))

    def test_epoch_sampler_walks_without_replacement(self):
        ds = small_dataset(per_cell=8)  # 24 rows per domain
        sources, _ = datagen.split_lodo(ds, 3)
        sampler = EpochSampler(sources, 8, np.random.default_rng(3))
        seen = [sampler.next_batch().features[:, 0] for _ in range(3)]
        stacked = np.concatenate(seen)
        # 24 draws per domain before any reshuffle: all rows distinct
        assert np.unique(stacked).size == stacked.size


class TestSampleCombination:
    def test_uniform_frequencies(self):
        parts = nb.enumerate_reduced_combinations(3)
        rng = np.random.default_rng(0)
        counts = {p: 0 for p in parts}
        draws = 4000
        for _ in range(draws):
            counts[sample_combination(parts, rng, "random")] += 1
        for p, c in counts.items():
            assert abs(c / draws - 0.25) < 0.03, f"{p}: {c / draws}"

    def test_single_only(self):
        parts = nb.enumerate_reduced_combinations(3)
        rng = np.random.default_rng(0)
        for _ in range(50):
            assert sample_combination(parts, rng, "single_only").is_all_singletons()

    def test_seeded_sequence(self):
        parts = nb.enumerate_reduced_combinations(4)
        rng = np.random.default_rng(9)
        seq1 = [sample_combination(parts, rng, "random") for _ in range(10)]
        rng = np.random.default_rng(9)
        seq2 = [sample_combination(parts, rng, "random") for _ in range(10)]
        assert seq1 == seq2


class TestLoss:
    def test_uniform_two_class(self):
        logits = Tensor(np.zeros((1, 2)))
        loss = two_path_loss(logits, np.array([0]), None)
        assert math.isclose(loss.item(), math.log(2.0), rel_tol=1e-12)

    def test_duplicated_aux_doubles_loss(self):
        rng = np.random.default_rng(0)
        logits = Tensor(rng.standard_normal((4, 3)))
        labels = np.array([0, 1, 2, 0])
        blocks = {DomainSubset.of(0, 1, 2): (np.arange(4), logits)}
        total = two_path_loss(logits, labels, blocks, aux_weight=1.0)
        single = two_path_loss(logits, labels, None)
        assert math.isclose(total.item(), 2 * single.item(), rel_tol=1e-12)

    def test_block_average_arithmetic(self):
        # main CE 0.5, two blocks with mean CEs 0.4 and 0.8 -> 0.5 + 0.6
        def logits_with_ce(ce, n):
            # two classes; logit gap g gives CE = log(1 + e^-g)
            gap = -math.log(math.expm1(ce)) if ce < math.log(2) else 0.0
            gap = -math.log(math.exp(ce) - 1.0)
            arr = np.zeros((n, 2))
            arr[:, 0] = gap
            return arr

        main = Tensor(logits_with_ce(0.5, 4))
        b1 = Tensor(logits_with_ce(0.4, 2))
        b2 = Tensor(logits_with_ce(0.8, 2))
        labels = np.zeros(4, dtype=np.int64)
        blocks = {
            DomainSubset.of(0): (np.array([0, 1]), b1),
            DomainSubset.of(1, 2): (np.array([2, 3]), b2),
        }
        loss = two_path_loss(main, labels, blocks, aux_weight=1.0)
        assert math.isclose(loss.item(), 0.5 + 0.5 * (0.4 + 0.8), rel_tol=1e-10)

    def test_aux_weight_scales_aux_term(self):
        rng = np.random.default_rng(1)
        logits = Tensor(rng.standard_normal((4, 3)))
        labels = np.array([0, 1, 2, 0])
        blocks = {DomainSubset.of(0, 1, 2): (np.arange(4), logits)}
        l0 = two_path_loss(logits, labels, None).item()
        l1 = two_path_loss(logits, labels, blocks, aux_weight=0.5).item()
        assert math.isclose(l1, 1.5 * l0, rel_tol=1e-12)

    def test_out_of_range_label(self):
        with pytest.raises(ValueError, match="label out of range"):
            two_path_loss(Tensor(np.zeros((2, 3))), np.array([0, 3]), None)

    def test_full_loss_gradcheck(self):
        """Finite differences over every parameter of a small two-layer model,
        main route plus one auxiliary partition."""
        rng = np.random.default_rng(2)
        for trial in range(3):
            m = tiny_model(seed=trial, hidden=(5, 4))
            x, labels, ids = toy_batch(rng, per_domain=2)
            part = nb.enumerate_reduced_combinations(3)[trial % 4]
            params = [t for _, t in m.parameters()]

            def fn():
                logits, _ = m.forward_main(x, mode="train")
                blocks = m.forward_aux(x, ids, part, mode="train")
                return two_path_loss(logits, labels, blocks, aux_weight=1.0)

            assert grad_check_params(fn, params, h=1e-5) < 1e-6


class TestSGD:
    def test_plain_sgd_is_lr_times_grad(self):
        t = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        opt = SGD([{"params": [("w", t)], "lr": 0.1, "momentum": 0.0,
                    "weight_decay": 0.0}])
        t.grad = np.array([3.0, -1.0])
        before = t.data.copy()
        opt.step()
        assert np.array_equal(t.data, before - 0.1 * np.array([3.0, -1.0]))

    def test_zero_lr_freezes(self):
        m = tiny_model()
        cfg = TrainConfig(lr_backbone=1e-300, lr_classifier=1e-300)
        opt = make_optimizer(m, cfg)
        opt.lr_scale = 0.0
        rng = np.random.default_rng(0)
        x, labels, ids = toy_batch(rng)
        before = {n: t.data.copy() for n, t in m.parameters()}
        batch = DomainBatch(x, labels, ids, per_domain=4)
        train_step(m, batch, nb.all_singletons(3), opt)
        for n, t in m.parameters():
            assert np.array_equal(before[n], t.data), n

    def test_momentum_accumulates_velocity(self):
        t = Tensor(np.array([0.0]), requires_grad=True)
        opt = SGD([{"params": [("w", t)], "lr": 1.0, "momentum": 0.5,
                    "weight_decay": 0.0}])
        t.grad = np.array([1.0])
        opt.step()  # v=1, w=-1
        t.grad = np.array([1.0])
        opt.step()  # v=1.5, w=-2.5
        assert np.allclose(t.data, [-2.5])

    def test_weight_decay_added_to_grad(self):
        t = Tensor(np.array([2.0]), requires_grad=True)
        opt = SGD([{"params": [("w", t)], "lr": 0.1, "momentum": 0.0,
                    "weight_decay": 0.5}])
        t.grad = np.array([0.0])
        opt.step()
        assert np.allclose(t.data, [2.0 - 0.1 * (0.5 * 2.0)])


class TestTrainStep:
    def test_loss_decreases_on_separable_toy(self):
        # two linearly separable classes over two source domains
        rng = np.random.default_rng(0)
        n = 40
        x0 = rng.standard_normal((n, 6)) + np.array([3.0, 0, 0, 0, 0, 0])
        x1 = rng.standard_normal((n, 6)) - np.array([3.0, 0, 0, 0, 0, 0])
        x = np.vstack([x0, x1])
        labels = np.concatenate([np.zeros(n, np.int64), np.ones(n, np.int64)])
        ids = np.concatenate([np.repeat([0, 1], n // 2), np.repeat([0, 1], n // 2)])

        cfg = tiny_config(num_domains=2, num_classes=2)
        m = init_model(cfg, seed=0)
        opt = make_optimizer(m, TrainConfig(lr_backbone=0.02, lr_classifier=0.05))
        parts = nb.enumerate_reduced_combinations(2)
        losses = []
        d0 = np.flatnonzero(ids == 0)
        d1 = np.flatnonzero(ids == 1)
        for step in range(50):
            sel = np.concatenate([rng.choice(d0, 4, replace=False),
                                  rng.choice(d1, 4, replace=False)])
            batch = DomainBatch(x[sel], labels[sel], ids[sel], per_domain=4)
            losses.append(train_step(m, batch, parts[0], opt))
        assert losses[-1] < losses[0]

    def test_nan_loss_aborts(self):
        m = tiny_model()
        m.classifier_main.weight.data[:] = np.inf
        rng = np.random.default_rng(1)
        x, labels, ids = toy_batch(rng)
        batch = DomainBatch(x, labels, ids, per_domain=4)
        opt = make_optimizer(m, TrainConfig())
        with np.errstate(invalid="ignore"):
            with pytest.raises(RuntimeError, match="non-finite"):
                train_step(m, batch, None, opt)


class TestTrainLoop:
    def _run(self, tmp_path, seed=0, **overrides):
        tmp_path.mkdir(parents=True, exist_ok=True)
        ds = small_dataset(seed=seed)
        cfg_kwargs = dict(epochs=2, iters_per_epoch=4, batch_per_domain=4, seed=seed)
        cfg_kwargs.update(overrides)
        tc = TrainConfig(**cfg_kwargs)
        mc = tiny_config(num_classes=3)
        m = init_model(mc, seed=seed)
        metrics = tmp_path / f"metrics_{seed}.csv"
        ckpt = tmp_path / f"model_{seed}.ckpt"
        result = train(m, ds, 3, tc, metrics_path=metrics, checkpoint_path=ckpt)
        return result, metrics, ckpt

    def test_metrics_contract(self, tmp_path):
        result, metrics, _ = self._run(tmp_path)
        lines = metrics.read_text().splitlines()
        assert lines[0] == "epoch,train_loss,src_acc,tgt_acc_main,tgt_acc_ensemble"
        assert len(lines) == 3  # header + 2 epochs
        assert len(result.metrics) == 2
        assert result.metrics[0]["epoch"] == 1

    def test_seeded_run_reproducible(self, tmp_path):
        r1, m1, c1 = self._run(tmp_path / "a")
        r2, m2, c2 = self._run(tmp_path / "b")
        assert m1.read_text() == m2.read_text()
        assert c1.read_bytes() == c2.read_bytes()

    def test_final_epoch_model_persisted(self, tmp_path):
        from normaug.model import load_checkpoint
        result, _, ckpt = self._run(tmp_path)
        loaded, epoch, _ = load_checkpoint(ckpt)
        assert epoch == 2
        for (n1, t1), (n2, t2) in zip(result.model.parameters(), loaded.parameters()):
            assert n1 == n2 and np.array_equal(t1.data, t2.data)

    def test_baseline_leaves_bank_untouched(self, tmp_path):
        ds = small_dataset()
        tc = TrainConfig(epochs=1, iters_per_epoch=4, batch_per_domain=4)
        m = init_model(tiny_config(num_classes=3, use_aug=False), seed=0)
        train(m, ds, 3, tc)
        assert m.banks == []
        for unit in m.main_units:
            assert unit.update_count == 4

    def test_aux_units_updated_per_partition(self, tmp_path):
        ds = small_dataset()
        tc = TrainConfig(epochs=1, iters_per_epoch=6, batch_per_domain=4)
        m = init_model(tiny_config(num_classes=3), seed=0)
        train(m, ds, 3, tc)
        touched = sum(u.update_count for u in m.banks[0].units.values())
        # every iteration updates exactly the units of the sampled partition
        assert touched > 0
        for unit in m.main_units:
            assert unit.update_count == 6

    def test_domain_count_mismatch_rejected(self):
        ds = small_dataset()
        m = tiny_model(num_domains=4)
        with pytest.raises(ValueError, match="source domains"):
            train(m, ds, 3, TrainConfig(epochs=1, iters_per_epoch=1,
                                        batch_per_domain=4))
