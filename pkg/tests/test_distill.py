import numpy as np
import pytest

from distillwsd import tensor as T
from distillwsd.dataset import ArrayDataset
from distillwsd.distill import (
    DistillConfig,
    TemperatureBank,
    build_teacher_cache,
    combined_loss,
    feature_distill_loss,
    hard_loss,
    prediction_distill_loss,
    run_stage1,
    run_stage2,
    select_distill_proposals,
    soft_target_batch,
)
from distillwsd.errors import ContractError, StateError
from distillwsd.regions import Box, ProposalConfig, ProposalSet, iou, nms, recycle_to_length
from distillwsd.student import StudentConfig, StudentModel
from distillwsd.teacher import TeacherConfig, TeacherModel, teacher_forward
from distillwsd.tensor import Tensor

from conftest import finite_difference_check


def micro_cfg(**kw):
    defaults = dict(top_after_nms=3, batch_size=2, stage1_epochs=2, stage2_epochs=2,
                    stage1_lr=1e-3, stage2_lr=1e-2, cache_teacher=True, seed=0)
    defaults.update(kw)
    return DistillConfig(**defaults)


def micro_models(k=3, top_n=6, input_size=16, seed=0, dtype=np.float32):
    tcfg = TeacherConfig(num_classes=k, input_size=input_size, channels=(2, 3, 4),
                         roi_out=(2, 2), fc_width=6, top_n=top_n,
                         proposal_cfg=ProposalConfig(top_n=top_n))
    teacher = TeacherModel(tcfg, np.random.default_rng(seed), dtype=dtype)
    scfg = StudentConfig(num_classes=k, input_size=input_size, channels=(2, 3, 4),
                         teacher_channels=(2, 3, 4), fc_width=6)
    student = StudentModel(scfg, np.random.default_rng(seed + 1), dtype=dtype)
    return teacher, student


def micro_dataset(rng, n=6, k=3, size=16, dtype=np.float32):
    images = rng.normal(0, 0.3, size=(n, 3, size, size)).astype(dtype)
    labels = (rng.uniform(size=(n, k)) < 0.4).astype(np.float32)
    labels[:, 0] = 1.0  # every class list non-empty
    ds = ArrayDataset(images=images, labels=labels, ids=[f"img{i}" for i in range(n)],
                      num_classes=k)
    return ds


class TestLosses:
    def test_feature_loss_zero_at_identity(self, rng):
        f = Tensor(rng.normal(size=(3, 2, 2, 2)))
        assert feature_distill_loss(f, f).item() == 0.0

    def test_feature_loss_analytic_value(self):
        f_t = Tensor(np.ones((1, 2, 2, 2)))
        f_s = Tensor(np.zeros((1, 2, 2, 2)))
        assert feature_distill_loss(f_t, f_s).item() == pytest.approx(4.0)

    def test_feature_loss_matches_scalar_oracle(self, rng):
        f_t = rng.normal(size=(4, 3, 2, 2))
        f_s = rng.normal(size=(4, 3, 2, 2))
        want = 0.0
        for j in range(4):
            for c in range(3):
                for a in range(2):
                    for b in range(2):
                        want += (f_t[j, c, a, b] - f_s[j, c, a, b]) ** 2
        want /= 2.0 * 4
        got = feature_distill_loss(Tensor(f_t), Tensor(f_s)).item()
        assert got == pytest.approx(want, abs=1e-12)

    def test_feature_loss_shape_contract(self, rng):
        with pytest.raises(ContractError):
            feature_distill_loss(Tensor(np.zeros((2, 1, 2, 2))), Tensor(np.zeros((3, 1, 2, 2))))

    def test_prediction_loss_values(self):
        assert prediction_distill_loss(Tensor(np.array([0.2, 0.8])),
                                       Tensor(np.array([0.2, 0.8]))).item() == 0.0
        got = prediction_distill_loss(Tensor(np.array([0.7, 0.6])),
                                      Tensor(np.array([0.2, 0.1]))).item()
        assert got == pytest.approx(0.25)

    def test_prediction_loss_batch_mean(self, rng):
        p_t = rng.uniform(size=(4, 3))
        p_s = rng.uniform(size=(4, 3))
        want = ((p_t - p_s) ** 2).sum() / 8.0
        assert prediction_distill_loss(Tensor(p_t), Tensor(p_s)).item() == pytest.approx(want)

    def test_hard_loss_perfect_prediction_near_zero(self):
        y = np.array([[1.0, 0.0, 1.0]])
        assert hard_loss(Tensor(y[0]), y[0]).item() < 1e-5 * 3

    def test_hard_loss_half_everywhere(self):
        y = np.array([[1.0, 0.0], [0.0, 1.0]])
        got = hard_loss(Tensor(np.full((2, 2), 0.5)), y).item()
        assert got == pytest.approx(2 * np.log(2.0))

    def test_hard_loss_matches_scalar_oracle(self, rng):
        p = rng.uniform(0.01, 0.99, size=(3, 4))
        y = (rng.uniform(size=(3, 4)) < 0.5).astype(float)
        want = 0.0
        for n in range(3):
            for k in range(4):
                want -= y[n, k] * np.log(p[n, k]) + (1 - y[n, k]) * np.log(1 - p[n, k])
        want /= 3
        assert hard_loss(Tensor(p), y).item() == pytest.approx(want, abs=1e-12)

    def test_combined_loss_values_and_linearity(self, rng):
        assert combined_loss(Tensor(np.array(0.3)), Tensor(np.array(0.2)), 0.0).item() == \
            pytest.approx(0.3)
        assert combined_loss(Tensor(np.array(0.3)), Tensor(np.array(0.2)), 1.0).item() == \
            pytest.approx(0.5)
        # gradient linearity on a random two-parameter graph
        a = Tensor(rng.normal(size=4), requires_grad=True, dtype=np.float64)
        lam = 0.7

        def build(scale_hard, scale_soft):
            hard = (a * a).sum() * scale_hard
            soft = (a * Tensor(np.ones(4))).sum() * scale_soft
            return hard, soft

        hard, soft = build(1.0, 1.0)
        combined_loss(hard, soft, lam).backward()
        g_combined = a.grad.copy()
        a.grad = None
        hard, _ = build(1.0, 1.0)
        hard.backward()
        g_hard = a.grad.copy()
        a.grad = None
        _, soft = build(1.0, 1.0)
        soft.backward()
        g_soft = a.grad.copy()
        np.testing.assert_allclose(g_combined, g_hard + lam * g_soft, atol=1e-12)

    def test_prediction_loss_temperature_gradients(self, rng):
        m_c = rng.normal(size=(4, 3))
        m_d = rng.normal(size=(4, 3))
        m_s = Tensor(rng.normal(size=3), requires_grad=True, dtype=np.float64)
        temps = TemperatureBank(3, 4, dtype=np.float64)
        from distillwsd.teacher import teacher_softened_prediction

        class View:
            pass

        view = View()
        view.m_c, view.m_d = Tensor(m_c), Tensor(m_d)

        def loss():
            p_t = teacher_softened_prediction(view, temps.t_c.tensor, temps.t_d.tensor)
            p_s = T.tempered_sigmoid(m_s, temps.t.tensor)
            return prediction_distill_loss(p_t, p_s)

        finite_difference_check(loss, temps.parameters() + [m_s])


class TestTemperatureBank:
    def test_initialized_to_exactly_one(self):
        temps = TemperatureBank(5, 7)
        for p in temps.parameters():
            assert np.all(p.tensor.data == 1.0)
        assert temps.t_c.tensor.shape == (5,)
        assert temps.t_d.tensor.shape == (7,)
        assert temps.t.tensor.shape == (5,)

    def test_clamp_after_step(self):
        from distillwsd.optim import SGD, TEMPERATURE_FLOOR

        temps = TemperatureBank(3, 3)
        opt = SGD(temps.parameters(), lr=10.0, momentum=0.0, clamp_min=TEMPERATURE_FLOOR)
        for p in temps.parameters():
            p.tensor.grad = np.full(3, 5.0, dtype=np.float32)
        opt.step()
        for p in temps.parameters():
            assert np.all(p.tensor.data >= TEMPERATURE_FLOOR)


class TestSelectDistillProposals:
    def test_identical_boxes_recycle_single_survivor(self, rng):
        teacher, _ = micro_models(top_n=4)
        box = Box(2, 2, 10, 10)
        props = ProposalSet(boxes=[box] * 4, prior_scores=[0.9, 0.8, 0.7, 0.6])
        bundle = teacher_forward(teacher, rng.normal(size=(3, 16, 16)).astype(np.float32), props)
        cfg = micro_cfg(top_after_nms=3)
        boxes, sp, keep = select_distill_proposals(bundle, props, cfg)
        assert len(boxes) == 3
        assert all(b == box for b in boxes)
        assert len(set(keep.tolist())) == 1

    def test_survivors_respect_nms_threshold(self, rng):
        teacher, _ = micro_models(top_n=12)
        props = _random_props(rng, 12)
        bundle = teacher_forward(teacher, rng.normal(size=(3, 16, 16)).astype(np.float32), props)
        cfg = micro_cfg(top_after_nms=6)
        boxes, _, keep = select_distill_proposals(bundle, props, cfg)
        unique = sorted(set(keep.tolist()))
        for i, a in enumerate(unique):
            for b in unique[i + 1:]:
                assert iou(props.boxes[a], props.boxes[b]) <= 0.4

    def test_matches_bruteforce_oracle(self, rng):
        teacher, _ = micro_models(top_n=40)
        props = _random_props(rng, 40)
        bundle = teacher_forward(teacher, rng.normal(size=(3, 16, 16)).astype(np.float32), props)
        cfg = micro_cfg(top_after_nms=10)
        _, _, keep = select_distill_proposals(bundle, props, cfg)
        sp = bundle.s_prime.data
        want = nms(props.boxes, [float(v) for v in sp], 0.4)[:10]
        want = recycle_to_length(want, 10)
        assert keep.tolist() == want


def _random_props(rng, n, size=16):
    boxes, scores = [], []
    for _ in range(n):
        x, y = rng.uniform(0, size * 0.5, size=2)
        w, h = rng.uniform(2, size * 0.45, size=2)
        boxes.append(Box(x, y, min(x + w, size), min(y + h, size)))
        scores.append(float(rng.uniform(0.1, 1.0)))
    return ProposalSet(boxes=boxes, prior_scores=scores)


class TestStage1:
    def test_requires_frozen_teacher(self, rng):
        teacher, student = micro_models()
        ds = micro_dataset(rng)
        with pytest.raises(ContractError):
            run_stage1(teacher, student, ds, micro_cfg())

    def test_identical_conv_stack_is_fixed_point(self, rng):
        teacher, student = micro_models()
        for name in ("conv1", "conv2", "conv3"):
            for part in ("weight", "bias"):
                student.param(f"{name}.{part}").tensor.data[:] = \
                    teacher.param(f"{name}.{part}").tensor.data
        teacher.freeze()
        ds = micro_dataset(rng)
        report = run_stage1(teacher, student, ds, micro_cfg(stage1_epochs=1))
        assert report.losses["total"][0] < 1e-8

    def test_teacher_bits_never_change(self, rng):
        teacher, student = micro_models()
        teacher.freeze()
        before = {p.name: p.tensor.data.copy() for p in teacher.parameters()}
        ds = micro_dataset(rng)
        run_stage1(teacher, student, ds, micro_cfg(stage1_epochs=2))
        for p in teacher.parameters():
            np.testing.assert_array_equal(p.tensor.data, before[p.name])

    def test_loss_descends_and_heads_untouched(self, rng):
        teacher, student = micro_models(seed=7)
        teacher.freeze()
        heads_before = {p.name: p.tensor.data.copy() for p in student.head_parameters()}
        ds = micro_dataset(rng, n=8)
        cfg = micro_cfg(stage1_epochs=12, stage1_lr=2e-3, batch_size=4)
        report = run_stage1(teacher, student, ds, cfg)
        assert report.losses["total"][-1] < 0.6 * report.losses["total"][0]
        for p in student.head_parameters():
            np.testing.assert_array_equal(p.tensor.data, heads_before[p.name])
        assert student.stage1_trained

    def test_cached_and_uncached_runs_match(self, rng):
        ds = micro_dataset(rng, n=4)
        reports = []
        for cache_flag in (True, False):
            teacher, student = micro_models(seed=3)
            teacher.freeze()
            reports.append(run_stage1(teacher, student, ds,
                                      micro_cfg(stage1_epochs=2, cache_teacher=cache_flag)))
        np.testing.assert_allclose(reports[0].losses["total"], reports[1].losses["total"],
                                   rtol=1e-6)


class TestStage2:
    def test_requires_stage1_when_configured(self, rng):
        teacher, student = micro_models()
        teacher.freeze()
        ds = micro_dataset(rng)
        temps = TemperatureBank(3, 6)
        with pytest.raises(StateError):
            run_stage2(teacher, student, ds, ds, micro_cfg(require_stage1=True), temps)

    def test_lambda_zero_never_touches_teacher(self, rng):
        teacher, student = micro_models()
        ds = micro_dataset(rng)
        temps = TemperatureBank(3, 6)

        class Boom(TeacherModel):
            def forward_batch(self, *a, **k):
                raise AssertionError("teacher consulted in baseline arm")

        boom = Boom.__new__(Boom)
        boom.__dict__.update(teacher.__dict__)
        report = run_stage2(boom, student, ds, ds,
                            micro_cfg(lambda_weight=0.0, require_stage1=False), temps)
        assert report.epochs_run == 2
        assert all(v == 0.0 for v in report.losses["soft"])

    def test_temperatures_move_and_stay_above_floor(self, rng):
        teacher, student = micro_models(seed=11)
        teacher.freeze()
        ds = micro_dataset(rng, n=8)
        temps = TemperatureBank(3, 6)
        cfg = micro_cfg(stage2_epochs=4, stage2_lr=0.05, require_stage1=False, batch_size=4)
        report = run_stage2(teacher, student, ds, ds, cfg, temps)
        moved = any(not np.allclose(p.tensor.data, 1.0) for p in temps.parameters())
        assert moved
        for p in temps.parameters():
            assert np.all(p.tensor.data >= 0.05)
        assert set(report.final_temperatures) == {"t_c", "t_d", "t"}

    def test_teacher_frozen_through_stage2(self, rng):
        teacher, student = micro_models()
        teacher.freeze()
        before = {p.name: p.tensor.data.copy() for p in teacher.parameters()}
        ds = micro_dataset(rng, n=6)
        temps = TemperatureBank(3, 6)
        run_stage2(teacher, student, ds, ds, micro_cfg(require_stage1=False), temps)
        for p in teacher.parameters():
            np.testing.assert_array_equal(p.tensor.data, before[p.name])

    def test_deterministic_loss_series(self, rng):
        ds = micro_dataset(rng, n=6)
        series = []
        for _ in range(2):
            teacher, student = micro_models(seed=2)
            teacher.freeze()
            temps = TemperatureBank(3, 6)
            report = run_stage2(teacher, student, ds, ds, micro_cfg(require_stage1=False), temps)
            series.append((report.losses["hard"], report.losses["soft"]))
        assert series[0] == series[1]

    def test_soft_targets_match_cache_free_path(self, rng):
        teacher, student = micro_models(seed=4)
        teacher.freeze()
        ds = micro_dataset(rng, n=4)
        cfg = micro_cfg(require_stage1=False)
        ds.ensure_proposals(teacher.cfg.proposal_cfg)
        cache = build_teacher_cache(teacher, ds, cfg)
        temps = TemperatureBank(3, 6)
        p_t = soft_target_batch([cache[i] for i in range(4)], temps)
        for i in range(4):
            with T.no_grad():
                bundle = teacher.forward_batch(Tensor(ds.images[i:i + 1]), [ds.proposals[i]])[0]
            from distillwsd.teacher import teacher_softened_prediction

            want = teacher_softened_prediction(bundle, temps.t_c.tensor, temps.t_d.tensor)
            np.testing.assert_allclose(p_t.data[i], want.data, atol=1e-6)


class TestGradientRouting:
    def test_stage2_all_student_params_and_temps_get_grads(self, rng):
        teacher, student = micro_models(seed=6, dtype=np.float64)
        teacher.freeze()
        ds = micro_dataset(rng, n=2, dtype=np.float64)
        ds.ensure_proposals(teacher.cfg.proposal_cfg)
        cfg = micro_cfg(require_stage1=False)
        cache = build_teacher_cache(teacher, ds, cfg)
        temps = TemperatureBank(3, 6, dtype=np.float64)
        logits = student.forward_batch(Tensor(ds.images))
        p = T.sigmoid(logits)
        l_hard = hard_loss(p, ds.labels)
        p_t = soft_target_batch(cache, temps)
        p_s = T.tempered_sigmoid(logits, temps.t.tensor)
        l_soft = prediction_distill_loss(p_t, p_s)
        combined_loss(l_hard, l_soft, 1.0).backward()
        for p_ in student.parameters():
            assert p_.tensor.grad is not None, p_.name
        for p_ in temps.parameters():
            assert p_.tensor.grad is not None, p_.name
        for p_ in teacher.parameters():
            assert p_.tensor.grad is None, p_.name
