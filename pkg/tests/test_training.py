import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from calcseg import data as D
from calcseg import model as M
from calcseg import training as TR
from calcseg.errors import DataError, DegenerateBatchError, NumericalError
from calcseg.morphology import connected_components
from oracles import central_difference

SMALL = M.ArchConfig(num_blocks=2, branch_kernels=(1, 3), branch_width=2, final_kernel=3)


class TestMaskedBCE:
    def test_logit_zero_label_one(self):
        loss, grad = TR.bce_loss_masked(np.zeros((1, 1, 1, 1)), np.ones((1, 1, 1, 1)),
                                        np.ones((1, 1, 1, 1)))
        assert loss == pytest.approx(math.log(2), abs=1e-12)
        assert grad[0, 0, 0, 0] == pytest.approx(-0.5)

    def test_gradient_only_at_masked_pixel(self, rng):
        z = rng.standard_normal((1, 1, 6, 6))
        y = rng.integers(0, 2, z.shape)
        m = np.zeros(z.shape, bool)
        m[0, 0, 2, 3] = True
        _, grad = TR.bce_loss_masked(z, y, m)
        assert np.count_nonzero(grad) == 1 and grad[0, 0, 2, 3] != 0

    def test_finite_differences(self, rng):
        z = rng.standard_normal((1, 1, 8, 8)) * 3
        y = rng.integers(0, 2, z.shape)
        m = rng.uniform(size=z.shape) < 0.4
        _, grad = TR.bce_loss_masked(z, y, m)
        fd = central_difference(lambda: TR.bce_loss_masked(z, y, m)[0], z)
        np.testing.assert_allclose(grad, fd, atol=1e-4 * np.abs(fd).max())

    def test_stable_for_large_logits(self):
        z = np.array([[[[800.0, -800.0]]]])
        loss, grad = TR.bce_loss_masked(z, np.array([[[[0, 1]]]]), np.ones(z.shape, bool))
        assert loss == pytest.approx(800.0)
        assert np.all(np.isfinite(grad))

    def test_empty_mask(self):
        with pytest.raises(DegenerateBatchError):
            TR.bce_loss_masked(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 2, 2)),
                               np.zeros((1, 1, 2, 2)))


class TestHardNegatives:
    def test_ratio_one_to_three(self, rng):
        labels = np.zeros(1004, bool)
        labels[[3, 100, 500, 900]] = True
        loss = rng.uniform(size=1004)
        sel = TR.select_hard_negatives(loss, labels, 3)
        assert sel[labels].all()
        neg_sel = np.flatnonzero(sel & ~labels)
        assert neg_sel.size == 12
        hardest = np.argsort(-np.where(labels, -np.inf, loss), kind="stable")[:12]
        assert set(neg_sel) == set(hardest)

    def test_capped_by_available_negatives(self):
        labels = np.array([1] * 5 + [0] * 8, bool)
        sel = TR.select_hard_negatives(np.arange(13.0), labels, 3)
        assert sel.all()

    def test_matches_full_sort_on_4x4(self):
        loss = np.array([[0.9, 0.1, 0.5, 0.5],
                         [0.2, 0.7, 0.3, 0.8],
                         [0.5, 0.0, 0.6, 0.4],
                         [0.1, 0.95, 0.2, 0.3]])
        labels = np.zeros((4, 4), bool)
        labels[1, 1] = labels[3, 1] = True
        for ratio in (1, 2, 3, 4):
            sel = TR.select_hard_negatives(loss, labels, ratio)
            # brute force: every negative sorted by (-loss, row-major index)
            negs = sorted((-loss[i, j], 4 * i + j) for i in range(4) for j in range(4)
                          if not labels[i, j])
            expected = {idx for _, idx in negs[:2 * ratio]}
            got = {4 * i + j for i, j in zip(*np.nonzero(sel & ~labels))}
            assert got == expected
        # ratio 2 keeps 0.9, 0.8, 0.6 and one of the three tied 0.5s: the earliest index
        sel = TR.select_hard_negatives(loss, labels, 2)
        assert {4 * i + j for i, j in zip(*np.nonzero(sel & ~labels))} == {0, 7, 10, 2}

    def test_fallback_without_positives(self, rng):
        loss = rng.uniform(size=(10, 10))
        sel = TR.select_hard_negatives(loss, np.zeros((10, 10), bool), 3, fallback=7)
        assert sel.sum() == 7
        assert loss[sel].min() >= np.sort(loss.ravel())[-7]

    @settings(max_examples=50, deadline=None)
    @given(n=st.integers(1, 60), ratio=st.integers(1, 5), seed=st.integers(0, 10**6))
    def test_mask_composition(self, n, ratio, seed):
        r = np.random.default_rng(seed)
        labels = r.uniform(size=n) < 0.2
        sel = TR.select_hard_negatives(r.uniform(size=n), labels, ratio, fallback=4)
        n_pos, n_neg = labels.sum(), (~labels).sum()
        want = min(ratio * n_pos, n_neg) if n_pos else min(4, n_neg)
        assert (sel & ~labels).sum() == want and sel[labels].all()


class TestSGD:
    def _scalar_model(self, value):
        cfg = M.ArchConfig(num_blocks=1, branch_kernels=(1,), branch_width=1, final_kernel=1)
        model = M.build_model(cfg, dtype=np.float64)
        for p in model.parameters():
            p[...] = 0.0
        model.final.kernel[...] = value
        return model

    def test_zero_gradients_leave_parameters(self):
        model = M.build_model(SMALL, seed=1)
        before = [p.copy() for p in model.parameters()]
        state = TR.OptimizerState.zeros_like(model)
        TR.sgd_momentum_step(model, [np.zeros_like(p) for p in before], state, TR.TrainConfig())
        for a, b in zip(before, model.parameters()):
            np.testing.assert_array_equal(a, b)

    def test_two_step_recurrence(self):
        model = self._scalar_model(1.0)
        state = TR.OptimizerState.zeros_like(model)
        grads = [np.zeros_like(p) for p in model.parameters()]
        grads[2][...] = 2.0  # final kernel
        cfg = TR.TrainConfig(learning_rate=0.001, momentum=0.9)
        TR.sgd_momentum_step(model, grads, state, cfg)
        assert state.velocity[2].item() == pytest.approx(2.0)
        assert model.final.kernel.item() == pytest.approx(0.998, abs=1e-12)
        TR.sgd_momentum_step(model, grads, state, cfg)
        assert state.velocity[2].item() == pytest.approx(3.8)
        assert model.final.kernel.item() == pytest.approx(0.9942, abs=1e-12)

    def test_velocity_decays_geometrically(self):
        model = self._scalar_model(1.0)
        state = TR.OptimizerState.zeros_like(model)
        state.velocity[2][...] = 1.0
        zero = [np.zeros_like(p) for p in model.parameters()]
        for i in range(1, 5):
            TR.sgd_momentum_step(model, zero, state, TR.TrainConfig())
            assert state.velocity[2].item() == pytest.approx(0.9 ** i)

    def test_non_finite_gradient_names_layer_and_aborts(self):
        model = M.build_model(SMALL, seed=1)
        before = [p.copy() for p in model.parameters()]
        grads = [np.zeros_like(p) for p in before]
        grads[3][0] = np.nan
        with pytest.raises(NumericalError, match=r"block0\.k3\.bias"):
            TR.sgd_momentum_step(model, grads, TR.OptimizerState.zeros_like(model),
                                 TR.TrainConfig())
        for a, b in zip(before, model.parameters()):
            np.testing.assert_array_equal(a, b)


class TestAugment:
    def test_identity(self, rng):
        img = rng.uniform(size=(20, 20)).astype(np.float32)
        msk = rng.uniform(size=(20, 20)) < 0.1
        a, b = TR.transform(img, msk, 0.0, False)
        np.testing.assert_array_equal(a, img)
        np.testing.assert_array_equal(b, msk)

    def test_double_flip(self, rng):
        img = rng.uniform(size=(9, 13)).astype(np.float32)
        msk = rng.uniform(size=(9, 13)) < 0.3
        a, b = TR.transform(*TR.transform(img, msk, 0.0, True), 0.0, True)
        np.testing.assert_array_equal(a, img)
        np.testing.assert_array_equal(b, msk)

    def test_flip_mirrors(self, rng):
        img = rng.uniform(size=(5, 6)).astype(np.float32)
        a, _ = TR.transform(img, np.zeros((5, 6), bool), 0.0, True)
        np.testing.assert_array_equal(a, img[:, ::-1])

    def test_mask_stays_binary_and_same_transform(self):
        rng = np.random.default_rng(0)
        img = np.zeros((41, 41), np.float32)
        img[10:14, 25:29] = 1.0
        msk = img > 0
        cfg = TR.TrainConfig(rotation_range_deg=(-35, 35))
        for _ in range(5):
            a, b = TR.augment(img, msk, cfg, rng)
            assert b.dtype == bool
            # the rotated blob and rotated mask land in the same place
            assert (a[b] > 0.3).mean() > 0.9

    @pytest.mark.parametrize("seed", range(8))
    def test_rotation_round_trip_recovers_blobs(self, seed):
        size = 128
        params = D.SyntheticParams(height=size, width=size, num_isolated=8, num_clusters=1,
                                   cluster_size=4, seed=seed)
        _, msk, _ = D.generate_synthetic(params)
        # only blobs that stay inside the frame at every angle can be recovered
        yy, xx = np.mgrid[:size, :size]
        c = (size - 1) / 2
        inside = (yy - c) ** 2 + (xx - c) ** 2 < (size / 2 - 8) ** 2
        comps = connected_components(msk)
        keep = [k.id for k in comps.components if inside[comps.label_grid == k.id].all()]
        msk = np.isin(comps.label_grid, keep)
        img = np.zeros(msk.shape, np.float32)
        _, rot = TR.transform(img, msk, 20.0, False)
        _, back = TR.transform(img, rot, -20.0, False)
        assert (back & msk).sum() / msk.sum() >= 0.9


class TestCrops:
    def test_positive_centred_crop_contains_positive(self, rng):
        img = np.zeros((200, 200), np.float32)
        msk = np.zeros((200, 200), bool)
        msk[150, 20] = True
        for _ in range(10):
            _, m = TR.sample_crop(img, msk, 32, rng, positive_probability=1.0)
            assert m.shape == (32, 32) and m.sum() == 1

    def test_small_image_padded(self, rng):
        img, m = TR.sample_crop(np.ones((10, 12), np.float32), np.zeros((10, 12), bool), 16, rng)
        assert img.shape == (16, 16) and img.sum() == 120


def _tiny_dataset(n=2, seed=0, size=96):
    params = D.SyntheticParams(height=size, width=size, num_isolated=3, num_clusters=1,
                               cluster_size=3, cluster_radius=12)
    return D.synthetic_dataset(n, params, seed=seed)


class TestTrainLoop:
    def test_deterministic(self, tmp_path):
        ds = _tiny_dataset(1)
        cfg = TR.TrainConfig(epochs=20, crop_size=32, seed=3)
        m1, l1 = TR.train(ds, SMALL, cfg, checkpoint_path=tmp_path / "a.cseg")
        m2, l2 = TR.train(ds, SMALL, cfg, checkpoint_path=tmp_path / "b.cseg")
        assert l1.deterministic_rows() == l2.deterministic_rows()
        assert l1.steps == l2.steps
        assert (tmp_path / "a.cseg").read_bytes() == (tmp_path / "b.cseg").read_bytes()

    def test_log_records_mining_counts(self, tmp_path):
        ds = _tiny_dataset(2)
        cfg = TR.TrainConfig(epochs=4, crop_size=32, seed=0)
        _, tlog = TR.train(ds, SMALL, cfg, log_path=tmp_path / "log.tsv")
        assert len(tlog.steps) == 8 and len(tlog.epochs) == 4
        for s in tlog.steps:
            want = min(3 * s.positives, s.negatives_available) if s.positives else 64
            assert s.negatives_selected == want
        rows = TR.read_training_log(tmp_path / "log.tsv")
        assert [(r.epoch, r.mean_loss, r.cumulative_positives, r.cumulative_negatives)
                for r in rows] == tlog.deterministic_rows()
        text = (tmp_path / "log.tsv").read_text().splitlines()
        assert text[0].startswith("# calcseg training log v1")
        assert text[1] == "epoch\tmean_masked_loss\tcumulative_positives\tcumulative_negatives\tseconds"

    def test_periodic_checkpoints(self, tmp_path):
        cfg = TR.TrainConfig(epochs=2, crop_size=32, checkpoint_every=1)
        model, _ = TR.train(_tiny_dataset(1), SMALL, cfg, checkpoint_path=tmp_path / "m.cseg")
        back = M.load_checkpoint(tmp_path / "m.cseg")
        assert back.config == SMALL and back.dataset == "synthetic"
        for p, q in zip(model.parameters(), back.parameters()):
            np.testing.assert_array_equal(p, q)

    def test_ablation_uses_every_pixel(self):
        cfg = TR.TrainConfig(epochs=1, crop_size=32, hard_negative_mining=False)
        _, tlog = TR.train(_tiny_dataset(1), SMALL, cfg)
        s = tlog.steps[0]
        assert s.negatives_selected == s.negatives_available == 32 * 32 - s.positives

    def test_refuses_positive_free_dataset(self):
        ds = D.Dataset([D.Sample.from_arrays(np.zeros((40, 40)), np.zeros((40, 40)))])
        with pytest.raises(DataError, match="no positive"):
            TR.train(ds, SMALL, TR.TrainConfig(epochs=1, crop_size=32))

    def test_crop_smaller_than_receptive_field(self):
        with pytest.raises(Exception, match="receptive field"):
            TR.train(_tiny_dataset(1), M.ArchConfig(), TR.TrainConfig(crop_size=32))

    def test_loss_decreases(self):
        ds = _tiny_dataset(3, size=96)
        cfg = TR.TrainConfig(epochs=40, crop_size=48, seed=1)
        arch = M.ArchConfig(num_blocks=2, branch_kernels=(1, 3, 5), branch_width=4, final_kernel=3)
        _, tlog = TR.train(ds, arch, cfg)
        losses = [e.mean_loss for e in tlog.epochs]
        assert np.mean(losses[-4:]) < np.mean(losses[:4])
