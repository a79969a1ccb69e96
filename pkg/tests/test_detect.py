import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from rgbd_fusion.detect import geometry as geo
from rgbd_fusion.detect.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from rgbd_fusion.detect.model import (
    ArchConfig,
    architecture_signature,
    build_model,
    forward_train,
    parameter_count,
    predict,
    roi_pool,
)
from rgbd_fusion.errors import ConfigInvalid, CorruptCheckpoint, EmptyBox, NonPositiveSize, ShapeMismatch
from rgbd_fusion.fusion import VariantKind

from .oracles import MINIMAL_ARCH, assign_exhaustive, gradient_check, iou_by_pixels, nms_quadratic, roi_pool_loops

SMALL_ARCH = ArchConfig(widths=(8, 8, 8), strides=(2, 2, 2), anchor_scales=(8.0, 16.0), rpn_channels=8, head_hidden=16)


def random_boxes(rng, n, size=60.0, integer=False):
    xy = rng.uniform(0, size, (n, 2))
    wh = rng.uniform(1, size / 2, (n, 2))
    b = np.hstack([xy, xy + wh])
    return np.floor(b) + [0, 0, 1, 1] if integer else b


class TestAnchors:
    def test_single_cell(self):
        a = geo.generate_anchors(1, 1, 16, [32], [1.0])
        np.testing.assert_allclose(a, [[-8, -8, 24, 24]])

    def test_count(self):
        assert geo.generate_anchors(4, 4, 16, [16, 32, 64], [0.5, 1, 2]).shape == (144, 4)

    def test_nested_loop_oracle(self):
        scales, ratios = [16, 32, 64], [0.5, 1, 2]
        got = geo.generate_anchors(4, 4, 16, scales, ratios)
        expected = []
        for y in range(4):
            for x in range(4):
                cx, cy = (x + 0.5) * 16, (y + 0.5) * 16
                for s in scales:
                    for r in ratios:
                        w, h = s / np.sqrt(r), s * np.sqrt(r)
                        expected.append([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2])
        np.testing.assert_allclose(got, expected, rtol=0, atol=1e-12)
        areas = geo.box_area(got)
        np.testing.assert_allclose(areas, np.tile(np.repeat(np.square(scales), 3), 16))

    def test_bad_stride(self):
        with pytest.raises(Exception):
            geo.generate_anchors(2, 2, 0, [8], [1])


class TestIou:
    def test_examples(self):
        assert geo.iou([0, 0, 10, 10], [0, 0, 10, 10]) == 1.0
        assert geo.iou([0, 0, 10, 10], [10, 10, 20, 20]) == 0.0
        assert geo.iou([0, 0, 10, 10], [5, 0, 15, 10]) == pytest.approx(1 / 3)

    def test_pixel_oracle(self):
        rng = np.random.default_rng(0)
        a, b = random_boxes(rng, 300, 40, True), random_boxes(rng, 300, 40, True)
        for x, y in zip(a, b):
            assert abs(geo.iou(x, y) - iou_by_pixels(x.astype(int), y.astype(int))) < 1e-9

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.1, 100))
    def test_symmetric_bounded_scale_invariant(self, seed, k):
        rng = np.random.default_rng(seed)
        a, b = random_boxes(rng, 2)
        v = geo.iou(a, b)
        assert 0 <= v <= 1
        assert v == geo.iou(b, a)
        assert geo.iou(a * k, b * k) == pytest.approx(v, abs=1e-12)


class TestCoding:
    def test_identity(self):
        assert geo.encode_box([0, 0, 10, 10], [0, 0, 10, 10]) == (0, 0, 0, 0)

    def test_round_trip(self):
        rng = np.random.default_rng(1)
        gt, anc = random_boxes(rng, 1000), random_boxes(rng, 1000)
        back = geo.decode_boxes(geo.encode_boxes(gt, anc), anc)
        assert np.abs(back - gt).max() < 1e-6

    def test_degenerate(self):
        with pytest.raises(NonPositiveSize):
            geo.encode_box([0, 0, 0, 10], [0, 0, 10, 10])

    def test_clamp(self):
        b = geo.decode_boxes([[0, 0, 50, 50]], [[0, 0, 2, 2]], max_log_scale=np.log(10))
        np.testing.assert_allclose(b, [[-9, -9, 11, 11]])


class TestAssign:
    def test_examples(self):
        anchors = np.array([[0, 0, 10, 10], [0, 0, 10, 12], [50, 50, 60, 60], [0, 0, 14, 14], [0, 0, 20, 20]], float)
        a = geo.assign_targets(anchors, [[0, 0, 10, 10]], [4], 0.7, 0.3)
        # IoUs 1, 0.833, 0, 0.51, 0.25
        assert a.labels.tolist() == [1, 1, 0, -1, 0]
        assert a.classes.tolist() == [4, 4, -1, -1, -1]
        np.testing.assert_allclose(a.deltas[0], 0)

    def test_forced_match(self):
        anchors = np.array([[0, 0, 10, 10], [30, 30, 40, 40]], float)
        a = geo.assign_targets(anchors, [[5, 5, 20, 20]], [1], 0.7, 0.3)
        assert a.labels.tolist() == [1, 0]
        assert geo.assign_targets(anchors, [[5, 5, 20, 20]], [1], 0.7, 0.3, force_match=False).labels.tolist() == [0, 0]

    def test_no_gt(self):
        a = geo.assign_targets(np.array([[0, 0, 1, 1]], float), np.zeros((0, 4)), [], 0.7, 0.3)
        assert a.labels.tolist() == [0]

    def test_exhaustive_oracle(self):
        rng = np.random.default_rng(2)
        for trial in range(30):
            anchors = random_boxes(rng, 60, 50, integer=trial % 2 == 0)
            gt = random_boxes(rng, int(rng.integers(0, 5)), 50, integer=trial % 2 == 0)
            cls = rng.integers(0, 9, len(gt))
            force = trial % 3 != 0
            got = geo.assign_targets(anchors, gt, cls, 0.5, 0.3, force)
            labels, matched, classes = assign_exhaustive(anchors, gt, cls, 0.5, 0.3, force)
            assert got.labels.tolist() == labels.tolist()
            assert got.matched_gt.tolist() == matched.tolist()
            assert got.classes.tolist() == classes.tolist()


class TestNms:
    def test_examples(self):
        boxes = [[0, 0, 10, 10], [1, 1, 11, 11], [20, 20, 30, 30]]
        assert geo.nms(boxes, [0.9, 0.8, 0.7], 0.5).tolist() == [0, 2]
        assert geo.nms(boxes, [0.9, 0.8, 0.7], 0.5, classes=[0, 1, 0]).tolist() == [0, 1, 2]
        assert geo.nms(np.zeros((0, 4)), [], 0.5).tolist() == []

    def test_ties_prefer_lower_index(self):
        assert geo.nms([[0, 0, 10, 10], [0, 0, 10, 10]], [0.5, 0.5], 0.5).tolist() == [0]

    def test_quadratic_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            n = int(rng.integers(1, 40))
            boxes = random_boxes(rng, n, 50)
            scores = np.round(rng.random(n), 2)  # deliberate ties
            classes = rng.integers(0, 3, n)
            thr = float(rng.uniform(0.2, 0.8))
            assert set(geo.nms(boxes, scores, thr, classes).tolist()) == set(nms_quadratic(boxes, scores, thr, classes))

    def test_kept_boxes_do_not_overlap(self):
        rng = np.random.default_rng(4)
        boxes = random_boxes(rng, 80, 50)
        keep = geo.nms(boxes, rng.random(80), 0.4)
        ious = geo.iou_matrix(boxes[keep], boxes[keep])
        np.fill_diagonal(ious, 0)
        assert ious.max() <= 0.4

    def test_threshold_one_keeps_all_distinct(self):
        rng = np.random.default_rng(5)
        boxes = random_boxes(rng, 30)
        assert len(geo.nms(boxes, rng.random(30), 1.0)) == 30

    def test_raising_threshold_can_shrink_kept_set(self):
        # A suppresses B only at the lower threshold; B then survives and suppresses C.
        a, b, c = [0, 0, 10, 10], [0, 0, 10, 19], [0, 7, 10, 22]
        boxes = np.array([a, b, c], float)
        # IoU(a, b) = 0.526, IoU(b, c) = 0.545, IoU(a, c) = 0.136
        scores = [0.9, 0.8, 0.7]
        assert geo.nms(boxes, scores, 0.5).tolist() == [0, 2]
        assert geo.nms(boxes, scores, 0.53).tolist() == [0, 1]

    def test_top_box_always_kept(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            scores = rng.random(15)
            for thr in (0.1, 0.5, 0.9):
                assert geo.nms(random_boxes(rng, 15), scores, thr)[0] == np.argmax(scores)


class TestRoiPool:
    def test_loop_oracle(self):
        rng = np.random.default_rng(7)
        feats = torch.from_numpy(rng.normal(size=(3, 9, 11)))
        boxes = np.vstack([random_boxes(rng, 50, 8), [[-3, -2, 20, 20], [4.2, 4.2, 4.3, 4.3]]])
        got = roi_pool(feats, boxes, 3)
        for box, out in zip(boxes, got):
            assert torch.equal(out, roi_pool_loops(feats, box, 3))

    def test_whole_map_identity(self):
        feats = torch.arange(2 * 4 * 4, dtype=torch.float64).reshape(2, 4, 4)
        assert torch.equal(roi_pool(feats, [[0, 0, 4, 4]], 4)[0], feats)

    def test_outside(self):
        with pytest.raises(EmptyBox):
            roi_pool(torch.zeros(1, 4, 4), [[5, 5, 8, 8]], 2)


class TestModel:
    def test_deterministic_init(self):
        a, b = build_model("rgbd", SMALL_ARCH, 3), build_model("rgbd", SMALL_ARCH, 3)
        for (n, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
            assert torch.equal(p, q), n
        c = build_model("rgbd", SMALL_ARCH, 4)
        assert not torch.equal(a.first_conv.weight, c.first_conv.weight)

    @pytest.mark.parametrize("k", [3, 7])
    def test_variant_parity(self, k):
        arch = ArchConfig(first_kernel=k)
        rgbd, rgb, depth = (build_model(v, arch) for v in ("rgbd", "rgb", "depth"))
        c_out = arch.widths[0]
        assert parameter_count(rgbd) - parameter_count(rgb) == k * k * c_out
        assert parameter_count(rgbd) - parameter_count(depth) == 3 * k * k * c_out
        sig = {v: architecture_signature(m) for v, m in (("rgbd", rgbd), ("rgb", rgb), ("depth", depth))}
        first = "backbone.0.weight"
        assert sig["rgbd"][first][1] == 4 and sig["rgb"][first][1] == 3 and sig["depth"][first][1] == 1
        for v in ("rgb", "depth"):
            assert {n: s for n, s in sig[v].items() if n != first} == {n: s for n, s in sig["rgbd"].items() if n != first}

    def test_full_size_parity_number(self):
        assert parameter_count(build_model("rgbd")) - parameter_count(build_model("rgb")) == 144

    def test_wrong_channels(self):
        with pytest.raises(ShapeMismatch):
            build_model("rgb", SMALL_ARCH).rpn(torch.zeros(1, 4, 32, 32))

    def test_bad_arch(self):
        with pytest.raises(ConfigInvalid):
            ArchConfig(first_kernel=4)

    def test_losses_nonnegative_and_finite(self):
        model = build_model("rgbd", SMALL_ARCH, 0)
        x = torch.randn(2, 4, 64, 80)
        targets = [(np.array([[5, 5, 30, 40.0]]), np.array([2])), (np.zeros((0, 4)), np.zeros(0, int))]
        losses = forward_train(model, x, targets, generator=np.random.default_rng(0))
        for k, v in losses.items():
            assert torch.isfinite(v) and v.item() >= 0, k

    def test_no_gt_means_no_regression(self):
        model = build_model("rgb", SMALL_ARCH, 0)
        losses = forward_train(model, torch.randn(1, 3, 48, 48), [(np.zeros((0, 4)), np.zeros(0, int))])
        assert losses["rpn_reg"].item() == 0 and losses["det_reg"].item() == 0
        assert losses["rpn_cls"].item() > 0

    def test_target_count_mismatch(self):
        with pytest.raises(ShapeMismatch):
            forward_train(build_model("rgb", SMALL_ARCH), torch.zeros(2, 3, 32, 32), [(np.zeros((0, 4)), [])])

    def test_zero_head_gives_no_confident_detections(self):
        model = build_model("depth", SMALL_ARCH, 0)
        with torch.no_grad():
            model.cls_score.weight.zero_()
            model.cls_score.bias.zero_()
        # uniform over 10 outcomes, far below 0.5
        assert predict(model, torch.randn(1, 48, 64), score_threshold=0.5) == []
        dets = predict(model, torch.randn(1, 48, 64), score_threshold=0.05)
        assert all(d.score == pytest.approx(0.1) for d in dets)

    def test_predict_deterministic_and_in_bounds(self):
        model = build_model("rgbd", SMALL_ARCH, 1)
        x = torch.randn(4, 40, 56)
        a, b = predict(model, x, 0.0), predict(model, x, 0.0)
        assert a == b
        for d in a:
            assert 0 <= d.bbox[0] < d.bbox[2] <= 56 and 0 <= d.bbox[1] < d.bbox[3] <= 40
        assert len(a) <= 100

    def test_loss_decreases(self):
        torch.manual_seed(0)
        model = build_model("rgbd", SMALL_ARCH, 0)
        x = torch.randn(1, 4, 64, 64)
        targets = [(np.array([[8, 8, 40, 30.0], [30, 36, 60, 60]]), np.array([1, 5]))]
        opt = torch.optim.SGD(model.parameters(), lr=0.01, momentum=0.9)
        history = []
        for step in range(50):
            opt.zero_grad()
            loss = forward_train(model, x, targets, generator=np.random.default_rng(step))["total"]
            loss.backward()
            opt.step()
            history.append(loss.item())
        assert np.mean(history[-10:]) < 0.8 * np.mean(history[:5])

    def test_gradient_check(self):
        worst = gradient_check(seed=1)
        assert set(worst) == {n for n, _ in build_model("rgb", MINIMAL_ARCH).named_parameters()}
        assert max(worst.values()) < 1e-4


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        model = build_model("rgbd", SMALL_ARCH, 2)
        ckpt = Checkpoint.from_model(model, 2, channel_stats="channel_stats.json", epoch=4, val_map=0.5)
        save_checkpoint(ckpt, tmp_path / "m.ckpt")
        back = load_checkpoint(tmp_path / "m.ckpt")
        assert back.variant is VariantKind.RGBD and back.arch == SMALL_ARCH and back.seed == 2
        assert back.meta == {"epoch": 4, "val_map": 0.5} and back.channel_stats == "channel_stats.json"
        restored = back.to_model()
        x = torch.randn(4, 40, 40)
        assert predict(restored, x, 0.0) == predict(model, x, 0.0)

    def test_corruption_detected(self, tmp_path):
        save_checkpoint(Checkpoint.from_model(build_model("rgb", SMALL_ARCH), 0), tmp_path / "m.ckpt")
        blob = bytearray((tmp_path / "m.ckpt").read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        (tmp_path / "bad.ckpt").write_bytes(bytes(blob))
        with pytest.raises(CorruptCheckpoint):
            load_checkpoint(tmp_path / "bad.ckpt")
        (tmp_path / "junk.ckpt").write_bytes(b"hello")
        with pytest.raises(CorruptCheckpoint):
            load_checkpoint(tmp_path / "junk.ckpt")


class TestMoreExamples:
    def test_iou_one_third(self):
        assert geo.iou([0, 0, 2, 2], [1, 0, 3, 2]) == pytest.approx(1 / 3, abs=1e-15)
        assert iou_by_pixels([0, 0, 2, 2], [1, 0, 3, 2]) == pytest.approx(1 / 3)

    def test_twice_the_anchor(self):
        tx, ty, tw, th = geo.encode_box([-5, -5, 15, 15], [0, 0, 10, 10])
        assert (tx, ty) == (0, 0) and tw == pytest.approx(np.log(2)) and th == pytest.approx(np.log(2))

    def test_decode_monotone_in_tx(self):
        tx = np.linspace(-2, 2, 50)
        d = np.column_stack([tx, np.zeros(50), np.full(50, 0.3), np.zeros(50)])
        x0 = geo.decode_boxes(d, np.tile([3, 4, 13, 10], (50, 1)))[:, 0]
        assert np.all(np.diff(x0) > 0)

    def test_nms_single_and_pair(self):
        assert geo.nms([[0, 0, 5, 5]], [0.3], 0.5).tolist() == [0]
        assert geo.nms([[0, 0, 5, 5], [0, 0, 5, 5]], [0.8, 0.9], 0.5).tolist() == [1]

    def test_nms_200_vs_oracle(self):
        rng = np.random.default_rng(8)
        boxes, scores = random_boxes(rng, 200, 100), rng.random(200)
        keep = geo.nms(boxes, scores, 0.5)
        assert keep.tolist() == nms_quadratic(boxes, scores, 0.5)
        assert np.all(np.diff(scores[keep]) <= 0) and len(set(keep.tolist())) == len(keep)

    def test_assign_50_by_5(self):
        rng = np.random.default_rng(9)
        anchors, gt = random_boxes(rng, 50, 40), random_boxes(rng, 5, 40)
        cls = rng.integers(0, 9, 5)
        got = geo.assign_targets(anchors, gt, cls, 0.7, 0.3)
        assert got.labels.tolist() == assign_exhaustive(anchors, gt, cls, 0.7, 0.3)[0].tolist()

    def test_assign_exact_anchor(self):
        anchors = np.array([[0, 0, 8, 8], [20, 20, 30, 30]], float)
        a = geo.assign_targets(anchors, [[20, 20, 30, 30]], [6], 0.7, 0.3)
        assert a.labels.tolist() == [0, 1] and a.classes[1] == 6 and not a.deltas[1].any()

    def test_roi_constant_map(self):
        out = roi_pool(torch.full((2, 6, 6), 3.5), [[0.5, 1.2, 5.5, 4.1]], 3)
        assert torch.all(out == 3.5)

    def test_depth_first_layer(self):
        assert build_model("depth", SMALL_ARCH).first_conv.in_channels == 1

    def test_classification_loss_vanishes_with_confident_logits(self):
        import torch.nn.functional as F

        target = torch.tensor([0, 2, 1])
        for scale, bound in ((5.0, 0.02), (20.0, 1e-8)):
            logits = F.one_hot(target, 3).double() * scale
            assert F.cross_entropy(logits, target).item() < bound


@pytest.mark.slow
def test_single_scene_overfit_matches_annotations():
    from rgbd_fusion.train import TrainConfig, train

    from .fixtures_data import fixture_samples

    (sample,) = fixture_samples(1, seed=11)
    model = build_model("rgbd", seed=0)
    train(model, [sample], [sample], TrainConfig(learning_rate=0.02, max_epochs=500, patience_epochs=500))
    dets = predict(model, sample.image, 0.5)
    assert len(sample.boxes) >= 1
    for box, cls in zip(sample.boxes, sample.classes):
        assert max((geo.iou(d.bbox, box) for d in dets if d.class_id == cls), default=0.0) >= 0.9
