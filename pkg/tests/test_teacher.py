import numpy as np
import pytest

from distillwsd import tensor as T
from distillwsd.errors import ContractError
from distillwsd.regions import Box, ProposalConfig, ProposalSet, iou, nms
from distillwsd.teacher import (
    ScoreBundle,
    TeacherConfig,
    TeacherModel,
    detect,
    fuse_scores,
    teacher_forward,
    teacher_softened_prediction,
)
from distillwsd.tensor import Tensor

from conftest import finite_difference_check


def micro_teacher(k=3, top_n=4, rng=None, input_size=16, dtype=np.float64):
    cfg = TeacherConfig(num_classes=k, input_size=input_size, channels=(2, 3, 4),
                        roi_out=(2, 2), fc_width=6, top_n=top_n,
                        proposal_cfg=ProposalConfig(top_n=top_n))
    return TeacherModel(cfg, rng or np.random.default_rng(0), dtype=dtype), cfg


def random_proposals(rng, n, size=16):
    boxes, scores = [], []
    for _ in range(n):
        x, y = rng.uniform(0, size * 0.5, size=2)
        w, h = rng.uniform(2, size * 0.45, size=2)
        boxes.append(Box(x, y, min(x + w, size), min(y + h, size)))
        scores.append(float(rng.uniform(0.1, 1.0)))
    return ProposalSet(boxes=boxes, prior_scores=scores)


class TestFusion:
    def test_hand_worked_two_by_two(self):
        m_c = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
        m_d = Tensor(np.zeros((2, 2)))
        b = fuse_scores(m_c, m_d)
        np.testing.assert_allclose(b.s_d.data, 0.5, atol=1e-12)
        e = np.exp([1.0, 0.0])
        row = e / e.sum()
        want_s = np.array([[row[0], row[1]], [row[1], row[0]]]) * 0.5
        np.testing.assert_allclose(b.s.data, want_s, atol=1e-12)
        np.testing.assert_allclose(b.p.data, want_s.sum(axis=0), atol=1e-12)

    def test_single_proposal_degeneracy(self, rng):
        m_c = Tensor(rng.normal(size=(1, 4)))
        m_d = Tensor(rng.normal(size=(1, 4)))
        b = fuse_scores(m_c, m_d)
        np.testing.assert_allclose(b.s_d.data, 1.0, atol=1e-12)
        np.testing.assert_allclose(b.p.data, b.s_c.data[0], atol=1e-12)

    def test_fusion_bounds_and_conservation(self, rng):
        for _ in range(100):
            m_c = Tensor(rng.uniform(-8, 8, size=(6, 5)).astype(np.float32))
            m_d = Tensor(rng.uniform(-8, 8, size=(6, 5)).astype(np.float32))
            b = fuse_scores(m_c, m_d)
            assert np.all(b.s.data >= 0)
            assert np.all(b.s.data <= np.minimum(b.s_c.data, b.s_d.data) + 1e-7)
            assert np.all(b.p.data >= 0) and np.all(b.p.data <= 1 + 1e-6)
            assert abs(b.p.data.sum() - b.s_prime.data.sum()) < 1e-5

    def test_row_and_column_normalization(self, rng):
        b = fuse_scores(Tensor(rng.normal(size=(5, 3))), Tensor(rng.normal(size=(5, 3))))
        np.testing.assert_allclose(b.s_c.data.sum(axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(b.s_d.data.sum(axis=0), 1.0, atol=1e-12)


class TestTeacherForward:
    def test_proposal_count_contract(self, rng):
        model, cfg = micro_teacher(top_n=4)
        props = random_proposals(rng, 3)
        with pytest.raises(ContractError):
            teacher_forward(model, rng.normal(size=(3, 16, 16)), props)

    def test_bundle_shapes(self, rng):
        model, cfg = micro_teacher(k=3, top_n=4)
        bundle = teacher_forward(model, rng.normal(size=(3, 16, 16)), random_proposals(rng, 4))
        assert bundle.m_c.shape == (4, 3)
        assert bundle.s.shape == (4, 3)
        assert bundle.p.shape == (3,)
        assert bundle.s_prime.shape == (4,)

    def test_batch_matches_single(self, rng):
        model, cfg = micro_teacher(k=3, top_n=4)
        images = rng.normal(size=(2, 3, 16, 16))
        props = [random_proposals(rng, 4) for _ in range(2)]
        with T.no_grad():
            bundles = model.forward_batch(Tensor(images), props)
            for i in range(2):
                single = teacher_forward(model, images[i], props[i])
                np.testing.assert_allclose(single.p.data, bundles[i].p.data, atol=1e-10)


class TestSoftenedPrediction:
    def test_unit_temperatures_reduce_to_p(self, rng):
        model, cfg = micro_teacher(k=4, top_n=5)
        bundle = teacher_forward(model, rng.normal(size=(3, 16, 16)).astype(np.float32),
                                 random_proposals(rng, 5))
        soft = teacher_softened_prediction(bundle, Tensor(np.ones(4)), Tensor(np.ones(5)))
        np.testing.assert_allclose(soft.data, bundle.p.data, atol=1e-6)

    def test_huge_temperatures_give_uniform(self, rng):
        model, cfg = micro_teacher(k=4, top_n=5)
        bundle = teacher_forward(model, rng.normal(size=(3, 16, 16)), random_proposals(rng, 5))
        soft = teacher_softened_prediction(bundle, Tensor(np.full(4, 1e6)), Tensor(np.full(5, 1e6)))
        np.testing.assert_allclose(soft.data, 0.25, atol=1e-3)

    def test_matches_scalar_reimplementation(self, rng):
        m_c = rng.normal(size=(3, 4))
        m_d = rng.normal(size=(3, 4))
        t_c = np.array([1.0, 2.0, 1.0, 3.0])
        t_d = np.array([1.0, 1.0, 2.0])
        bundle = fuse_scores(Tensor(m_c), Tensor(m_d))
        bundle = ScoreBundle(m_c=Tensor(m_c), m_d=Tensor(m_d), s_c=bundle.s_c, s_d=bundle.s_d,
                             s=bundle.s, p=bundle.p, s_prime=bundle.s_prime)
        got = teacher_softened_prediction(bundle, Tensor(t_c), Tensor(t_d)).data

        want = np.zeros(4)
        for k in range(4):
            for r in range(3):
                num_c = np.exp(m_c[r, k] / t_c[k])
                den_c = sum(np.exp(m_c[r, kk] / t_c[kk]) for kk in range(4))
                num_d = np.exp(m_d[r, k] / t_d[r])
                den_d = sum(np.exp(m_d[rr, k] / t_d[rr]) for rr in range(3))
                want[k] += (num_c / den_c) * (num_d / den_d)
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_gradients_flow_to_temperatures_not_weights(self, rng):
        model, cfg = micro_teacher(k=3, top_n=4)
        model.freeze()
        bundle = teacher_forward(model, rng.normal(size=(3, 16, 16)), random_proposals(rng, 4))
        t_c = Tensor(np.full(3, 1.5), requires_grad=True, dtype=np.float64)
        t_d = Tensor(np.full(4, 0.7), requires_grad=True, dtype=np.float64)
        finite_difference_check(
            lambda: (teacher_softened_prediction(bundle, t_c, t_d) ** 2).sum(), [t_c, t_d])
        for p in model.parameters():
            assert p.tensor.grad is None


class TestDetect:
    def test_single_proposal_returns_it_everywhere(self, rng):
        model, cfg = micro_teacher(k=3, top_n=1)
        props = random_proposals(rng, 1)
        out = detect(model, rng.normal(size=(3, 16, 16)), props)
        with T.no_grad():
            bundle = teacher_forward(model, rng.normal(size=(3, 16, 16)), props)
        assert set(out) == {0, 1, 2}
        for k in range(3):
            assert len(out[k]) == 1
            assert out[k][0][0] == props.boxes[0]

    def test_duplicate_boxes_collapse(self, rng):
        model, cfg = micro_teacher(k=2, top_n=4)
        box = Box(2, 2, 10, 10)
        props = ProposalSet(boxes=[box] * 4, prior_scores=[0.9, 0.8, 0.7, 0.6])
        out = detect(model, rng.normal(size=(3, 16, 16)), props)
        for k in range(2):
            assert len(out[k]) == 1

    def test_matches_nms_oracle(self, rng):
        model, cfg = micro_teacher(k=3, top_n=20)
        props = random_proposals(rng, 20)
        image = rng.normal(size=(3, 16, 16))
        out = detect(model, image, props, iou_thresh=0.4)
        with T.no_grad():
            s = teacher_forward(model, image, props).s.data
        for k in range(3):
            keep = nms(props.boxes, s[:, k].tolist(), 0.4)
            assert [b for b, _ in out[k]] == [props.boxes[i] for i in keep]
            for i, (_, score) in zip(keep, out[k]):
                assert score == pytest.approx(s[i, k])


class TestTraining:
    def test_full_loss_gradient_check(self, rng):
        from distillwsd.distill import hard_loss

        model, cfg = micro_teacher(k=2, top_n=3, rng=np.random.default_rng(5))
        image = rng.normal(size=(1, 3, 16, 16))
        props = random_proposals(rng, 3)
        y = np.array([[1.0, 0.0]])

        def loss():
            bundle = model.forward_batch(Tensor(image), [props])[0]
            return hard_loss(T.reshape(bundle.p, (1, 2)), y)

        finite_difference_check(loss, model.parameters())

    def test_freeze_marks_all_parameters(self, rng):
        model, _ = micro_teacher()
        assert not model.frozen
        model.freeze()
        assert model.frozen
        assert all(not p.tensor.requires_grad for p in model.parameters())
