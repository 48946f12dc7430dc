"""Fusion tests: spec fixtures, idempotence, hull containment, TTA passes."""

import numpy as np
import pytest

from rfl_lab.ensemble import FusionConfig, ScoreMode, TtaPass, ensemble_pipeline, fuse
from rfl_lab.geometry import SceneDims, TtaTransform, apply_tta
from rfl_lab.metrics import Box, Detection


def det(x1, y1, x2, y2, score=0.5, cls=0, source="m", image_id=""):
    return Detection(Box(x1, y1, x2, y2), cls, score, source, image_id)


def sort_key(d):
    return (d.class_id, -d.score, d.box.x1, d.box.y1)


class TestFuse:
    def test_single_source_disjoint_is_fixpoint(self):
        dets = [
            det(0, 0, 10, 10, 0.9),
            det(50, 50, 60, 60, 0.7),
            det(0, 40, 8, 46, 0.4),
        ]
        out = fuse(dets, FusionConfig(min_votes=1))
        assert sorted(out, key=sort_key) == sorted(dets, key=sort_key)

    def test_identical_boxes_mean_score(self):
        dets = [
            det(5, 5, 15, 15, 0.6, source="a"),
            det(5, 5, 15, 15, 0.8, source="b"),
        ]
        out = fuse(dets, FusionConfig())
        assert len(out) == 1
        assert out[0].box == Box(5, 5, 15, 15)
        assert out[0].score == pytest.approx(0.7, rel=1e-12)
        assert out[0].source == "b+a"  # higher score processed first

    def test_weighted_corner_fixture(self):
        # Corners average with score weights: (0*0.6 + 1*0.2) / 0.8 = 0.25.
        dets = [
            det(0, 0, 10, 10, 0.6, source="a"),
            det(1, 1, 11, 11, 0.2, source="b"),
        ]
        out = fuse(dets, FusionConfig(iou_thresh=0.5))
        assert len(out) == 1
        bb = out[0].box
        assert (bb.x1, bb.y1, bb.x2, bb.y2) == (0.25, 0.25, 10.25, 10.25)
        assert out[0].score == pytest.approx(0.4, rel=1e-12)

    def test_max_and_weighted_mean_modes(self):
        dets = [
            det(0, 0, 10, 10, 0.6, source="a"),
            det(0, 0, 10, 10, 0.2, source="b"),
        ]
        out = fuse(dets, FusionConfig(score_mode=ScoreMode.MAX))
        assert out[0].score == 0.6
        cfg = FusionConfig(
            score_mode=ScoreMode.WEIGHTED_MEAN, source_weights={"a": 3.0, "b": 1.0}
        )
        out = fuse(dets, cfg)
        assert out[0].score == pytest.approx((3 * 0.6 + 1 * 0.2) / 4, rel=1e-12)

    def test_min_votes_counts_distinct_sources(self):
        dets = [
            det(0, 0, 10, 10, 0.9, source="a"),
            det(0, 0, 10, 10, 0.8, source="a"),
        ]
        assert fuse(dets, FusionConfig(min_votes=2)) == []
        dets[1] = det(0, 0, 10, 10, 0.8, source="b")
        assert len(fuse(dets, FusionConfig(min_votes=2))) == 1

    def test_classes_never_mix(self):
        dets = [
            det(0, 0, 10, 10, 0.9, cls=0),
            det(0, 0, 10, 10, 0.8, cls=1),
        ]
        out = fuse(dets, FusionConfig())
        assert len(out) == 2
        assert {d.class_id for d in out} == {0, 1}

    def test_output_never_larger_than_input(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            dets = random_dets(rng)
            out = fuse(dets, FusionConfig(iou_thresh=0.4))
            assert len(out) <= len(dets)

    def test_idempotent_when_clusters_separated(self):
        rng = np.random.default_rng(1)
        checked = 0
        for _ in range(100):
            dets = random_dets(rng)
            once = fuse(dets, FusionConfig(iou_thresh=0.55))
            # Idempotence is claimed when the fused clusters are already
            # mutually below the IoU threshold.
            if _any_cross_iou(once, 0.55):
                continue
            assert fuse(once, FusionConfig(iou_thresh=0.55)) == once
            checked += 1
        assert checked >= 50

    def test_hull_containment(self):
        # Unique source tags make cluster membership recoverable from the
        # fused detection's joined source string.
        rng = np.random.default_rng(2)
        for _ in range(50):
            dets = random_dets(rng, unique_sources=True)
            cfg = FusionConfig(iou_thresh=0.4)
            for fused in fuse(dets, cfg):
                tags = set(fused.source.split("+"))
                members = [d for d in dets if d.source in tags]
                assert len(members) == len(tags)
                xs1 = [m.box.x1 for m in members]
                ys1 = [m.box.y1 for m in members]
                xs2 = [m.box.x2 for m in members]
                ys2 = [m.box.y2 for m in members]
                assert min(xs1) - 1e-9 <= fused.box.x1 <= max(xs1) + 1e-9
                assert min(ys1) - 1e-9 <= fused.box.y1 <= max(ys1) + 1e-9
                assert min(xs2) - 1e-9 <= fused.box.x2 <= max(xs2) + 1e-9
                assert min(ys2) - 1e-9 <= fused.box.y2 <= max(ys2) + 1e-9

    def test_cluster_membership_invariant_to_score_rescale(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            dets = random_dets(rng)
            cfg = FusionConfig(iou_thresh=0.5)
            base = fuse(dets, cfg)
            scaled = [
                Detection(d.box, d.class_id, d.score * 0.5, d.source, d.image_id)
                for d in dets
            ]
            out = fuse(scaled, cfg)
            assert len(out) == len(base)
            for a, b in zip(out, base):
                assert a.source == b.source
                assert a.score == pytest.approx(b.score * 0.5, rel=1e-9)

    def test_validation(self):
        with pytest.raises(ValueError):
            FusionConfig(iou_thresh=0.0)
        with pytest.raises(ValueError):
            FusionConfig(min_votes=0)
        with pytest.raises(ValueError):
            FusionConfig(source_weights={"a": -1.0})


def _any_cross_iou(dets, thr):
    from rfl_lab.metrics import iou as _iou

    for i, a in enumerate(dets):
        for b in dets[i + 1:]:
            if a.class_id == b.class_id and _iou(a.box, b.box) >= thr:
                return True
    return False


def random_dets(rng, n_sources=3, unique_sources=False):
    dets = []
    for s in range(n_sources):
        for _ in range(rng.integers(1, 6)):
            x, y = rng.uniform(0, 80, size=2)
            w, h = rng.uniform(4, 15, size=2)
            tag = f"m{s}_{len(dets)}" if unique_sources else f"m{s}"
            dets.append(
                det(
                    x, y, x + w, y + h,
                    score=round(float(rng.uniform(0.05, 1.0)), 2),
                    cls=int(rng.integers(2)),
                    source=tag,
                )
            )
    return dets


class TestEnsemblePipeline:
    SCENE = SceneDims(100, 100)

    def test_identity_pass_equals_fuse(self):
        rng = np.random.default_rng(4)
        dets = random_dets(rng)
        cfg = FusionConfig(iou_thresh=0.5)
        via_pipeline = ensemble_pipeline([TtaPass(dets)], self.SCENE, cfg)
        assert via_pipeline == fuse(dets, cfg)

    def test_rot90_pass_votes_align(self):
        base = [
            det(10, 10, 20, 20, 0.8, source="a"),
            det(40, 60, 55, 70, 0.6, source="a"),
        ]
        rotated = apply_tta(base, self.SCENE, TtaTransform.rot90())
        rotated = [
            Detection(d.box, d.class_id, d.score, "b", d.image_id) for d in rotated
        ]
        cfg = FusionConfig(iou_thresh=0.9, min_votes=2)
        out = ensemble_pipeline(
            [
                TtaPass(base, TtaTransform.identity(), source="a"),
                TtaPass(rotated, TtaTransform.rot90(), source="b"),
            ],
            self.SCENE,
            cfg,
        )
        assert len(out) == 2
        got = sorted((d.box for d in out), key=lambda b: b.x1)
        want = sorted((d.box for d in base), key=lambda b: b.x1)
        assert got == want

    def test_unreachable_vote_threshold(self):
        dets = [det(0, 0, 10, 10, 0.9, source="a"), det(0, 0, 10, 10, 0.8, source="b")]
        out = ensemble_pipeline(
            [TtaPass(dets[:1], source="a"), TtaPass(dets[1:], source="b")],
            self.SCENE,
            FusionConfig(min_votes=3),
        )
        assert out == []
